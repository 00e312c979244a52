//! Spatial pyramid pooling, per-view embedding and concatenation fusion.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{dropout_mask, ParamId, ParamSet, Tape, Tensor, Var};
use crate::view::{View, ViewMask};

/// Pooling grid sides, in output order.
pub const PYRAMID_LEVELS: [usize; 3] = [1, 2, 3];

/// Number of pooled cells per feature channel (1 + 4 + 9).
pub const PYRAMID_CELLS: usize = 14;

/// Pools `[D, H, W]` (or a batch `[B, D, H, W]`) to 1x1, 2x2 and 3x3 max grids and
/// concatenates them, channel-major within each level: `[14 D]` (or `[B, 14 D]`).
pub fn spp(tape: &mut Tape, featmap: Var) -> Result<Var> {
    let s = tape.shape(featmap).to_vec();
    let (batched, x) = match s.len() {
        3 => (false, tape.reshape(featmap, &[1, s[0], s[1], s[2]])?),
        4 => (true, featmap),
        _ => {
            return Err(Error::shape(
                "spp",
                format!("expected [D,H,W] or [B,D,H,W], got {s:?}"),
            ))
        }
    };
    let s4 = tape.shape(x).to_vec();
    let (b, d, h, w) = (s4[0], s4[1], s4[2], s4[3]);
    if h < 3 || w < 3 {
        return Err(Error::shape(
            "spp",
            format!("feature map {h}x{w} is smaller than 3x3"),
        ));
    }
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS.len());
    for n in PYRAMID_LEVELS {
        let pooled = tape.adaptive_max_pool2d(x, n, n)?;
        levels.push(tape.reshape(pooled, &[b, d * n * n])?);
    }
    let out = tape.concat(&levels, 1)?;
    if batched {
        Ok(out)
    } else {
        tape.reshape(out, &[PYRAMID_CELLS * d])
    }
}

/// Whether dropout is active, and how its masks are derived.
///
/// Masks are drawn per frame from a generator keyed on `(seed, frame index, site)`, so a
/// frame gets the same mask whether it is processed alone or inside a longer batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Mode {
    Eval,
    Train { seed: u64, rate: f64 },
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

pub(crate) fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Applies row-wise dropout to `x[T, W]` whose row `i` belongs to frame `first_frame + i`.
pub fn frame_dropout(
    tape: &mut Tape,
    x: Var,
    mode: Mode,
    first_frame: usize,
    site: u64,
) -> Result<Var> {
    let Mode::Train { seed, rate } = mode else {
        return Ok(x);
    };
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
    }
    if rate == 0.0 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 2 {
        return Err(Error::shape(
            "dropout",
            format!("expected [T, W], got {s:?}"),
        ));
    }
    let mut mask = Vec::with_capacity(s[0] * s[1]);
    for t in 0..s[0] {
        let key = mix(seed ^ mix((first_frame + t) as u64 ^ mix(site)));
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        mask.extend(dropout_mask(s[1], rate, &mut rng));
    }
    tape.apply_dropout_mask(x, mask)
}

/// Fully connected per-view embedding: affine, dropout, ReLU.
#[derive(Clone, Debug)]
pub struct ViewEmbedder {
    pub view: View,
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ViewEmbedder {
    pub fn build(
        view: View,
        in_dim: usize,
        out_dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let w = params.add_uniform(format!("embed.{view}.w"), [in_dim, out_dim], in_dim, rng);
        let b = params.add_uniform(format!("embed.{view}.b"), [out_dim], in_dim, rng);
        ViewEmbedder {
            view,
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// `[T, 14 D]` pooled features to `[T, out_dim]`.
    pub fn embed(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        spp_vec: Var,
        mode: Mode,
        first_frame: usize,
    ) -> Result<Var> {
        let s = tape.shape(spp_vec);
        if s.len() != 2 || s[1] != self.in_dim {
            return Err(Error::shape(
                "embed_view",
                format!("expected [T, {}] pooled features, got {s:?}", self.in_dim),
            ));
        }
        let w = tape.param(params, self.w)?;
        let b = tape.param(params, self.b)?;
        let h = tape.affine(spp_vec, w, b)?;
        let h = frame_dropout(tape, h, mode, first_frame, 1 + self.view.index() as u64)?;
        tape.relu(h)
    }
}

/// Concatenation of all three view slots followed by affine, dropout, ReLU.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub w: ParamId,
    pub b: ParamId,
    pub view_dim: usize,
    pub out_dim: usize,
}

const FUSION_SITE: u64 = 16;

impl Fusion {
    pub fn build(
        view_dim: usize,
        out_dim: usize,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let fan = view_dim * View::ALL.len();
        let w = params.add_uniform("fusion.w", [fan, out_dim], fan, rng);
        let b = params.add_uniform("fusion.b", [out_dim], fan, rng);
        Fusion {
            w,
            b,
            view_dim,
            out_dim,
        }
    }

    /// Fuses per-view embeddings `[T, view_dim]`. Views outside `mask` occupy their slot
    /// as zeros, so the fusion input width never changes.
    pub fn fuse(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        embeddings: &[(View, Var)],
        mask: ViewMask,
        mode: Mode,
        first_frame: usize,
    ) -> Result<Var> {
        if mask.is_empty() {
            return Err(Error::Config("view mask must not be empty".into()));
        }
        let mut slots: [Option<Var>; 3] = [None; 3];
        for &(view, var) in embeddings {
            if slots[view.index()].replace(var).is_some() {
                return Err(Error::Config(format!("view `{view}` supplied twice")));
            }
            if !mask.contains(view) {
                return Err(Error::Config(format!(
                    "view `{view}` supplied but not in mask {mask}"
                )));
            }
        }
        let mut rows = None;
        for view in mask.views() {
            let Some(var) = slots[view.index()] else {
                return Err(Error::Config(format!(
                    "view `{view}` is in the mask but was not supplied"
                )));
            };
            let s = tape.shape(var);
            if s.len() != 2 || s[1] != self.view_dim || rows.is_some_and(|r| r != s[0]) {
                return Err(Error::shape(
                    "fuse_views",
                    format!("embedding for `{view}` has shape {s:?}"),
                ));
            }
            rows = Some(s[0]);
        }
        let rows = rows.expect("mask is non-empty");
        let mut parts = Vec::with_capacity(3);
        for view in View::ALL {
            match slots[view.index()] {
                Some(v) => parts.push(v),
                None => parts.push(tape.constant(Tensor::zeros([rows, self.view_dim]))?),
            }
        }
        let x = tape.concat(&parts, 1)?;
        let w = tape.param(params, self.w)?;
        let b = tape.param(params, self.b)?;
        let h = tape.affine(x, w, b)?;
        let h = frame_dropout(tape, h, mode, first_frame, FUSION_SITE)?;
        tape.relu(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::adaptive_bin;
    use proptest::prelude::*;
    use rand::Rng;

    /// Enumerates each bin's index range and takes the max.
    fn spp_oracle(d: usize, h: usize, w: usize, data: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for n in [1usize, 2, 3] {
            for c in 0..d {
                for i in 0..n {
                    let r0 = i * h / n;
                    let r1 = ((i + 1) * h).div_ceil(n);
                    for j in 0..n {
                        let c0 = j * w / n;
                        let c1 = ((j + 1) * w).div_ceil(n);
                        let mut m = f64::NEG_INFINITY;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                m = m.max(data[(c * h + r) * w + cc]);
                            }
                        }
                        out.push(m);
                    }
                }
            }
        }
        out
    }

    fn run_spp(d: usize, h: usize, w: usize, data: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::inference();
        let x = tape
            .constant(Tensor::new([d, h, w], data).unwrap())
            .unwrap();
        let y = spp(&mut tape, x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn bins_follow_floor_ceil_rule() {
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
        assert_eq!(adaptive_bin(1, 4, 2), (2, 4));
    }

    #[test]
    fn spp_length_and_constant_map() {
        let out = run_spp(4, 5, 5, vec![2.5; 100]);
        assert_eq!(out.len(), 56);
        assert!(out.iter().all(|&v| v == 2.5));
    }

    #[test]
    fn spp_matches_oracle_on_random_2x5x5() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        assert_eq!(run_spp(2, 5, 5, data.clone()), spp_oracle(2, 5, 5, &data));
    }

    #[test]
    fn spp_rejects_small_maps() {
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([2, 2, 5])).unwrap();
        assert!(spp(&mut tape, x).is_err());
    }

    proptest! {
        #[test]
        fn spp_length_is_size_invariant(d in 1usize..5, h in 3usize..9, w in 3usize..9) {
            prop_assert_eq!(run_spp(d, h, w, vec![1.0; d * h * w]).len(), 14 * d);
        }

        #[test]
        fn spp_is_monotone(
            data in prop::collection::vec(-1.0f64..1.0, 2 * 4 * 6),
            idx in 0usize..48,
            bump in 0.0f64..2.0,
        ) {
            let before = run_spp(2, 4, 6, data.clone());
            let mut raised = data;
            raised[idx] += bump;
            let after = run_spp(2, 4, 6, raised);
            for (a, b) in before.iter().zip(&after) {
                prop_assert!(b >= a);
            }
        }
    }

    fn setup() -> (ParamSet, [ViewEmbedder; 3], Fusion) {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let emb = View::ALL.map(|v| ViewEmbedder::build(v, 28, 512, &mut ps, &mut rng));
        let fusion = Fusion::build(512, 64, &mut ps, &mut rng);
        (ps, emb, fusion)
    }

    #[test]
    fn embed_zero_input_zero_bias_is_zero() {
        let (mut ps, emb, _) = setup();
        ps.get_mut(emb[1].b).value.data_mut().fill(0.0);
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([2, 28])).unwrap();
        let y = emb[1].embed(&mut tape, &ps, x, Mode::Eval, 0).unwrap();
        assert_eq!(tape.shape(y), &[2, 512]);
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_is_nonnegative_and_deterministic_in_eval() {
        let (ps, emb, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_fn([3, 28], |_| rng.random_range(-2.0..2.0));
        let eval = |mode| {
            let mut tape = Tape::inference();
            let x = tape.constant(input.clone()).unwrap();
            let y = emb[0].embed(&mut tape, &ps, x, mode, 0).unwrap();
            tape.value(y).clone()
        };
        let a = eval(Mode::Eval);
        assert_eq!(a, eval(Mode::Eval));
        assert!(a.data().iter().all(|&v| v >= 0.0));
        let t = eval(Mode::Train { seed: 1, rate: 0.5 });
        assert!(t.data().iter().all(|&v| v >= 0.0));
        assert_ne!(a, t);
    }

    #[test]
    fn wrong_embedding_input_width() {
        let (ps, emb, _) = setup();
        let mut tape = Tape::inference();
        let x = tape.constant(Tensor::zeros([1, 27])).unwrap();
        assert!(emb[0].embed(&mut tape, &ps, x, Mode::Eval, 0).is_err());
    }

    fn fused(
        ps: &ParamSet,
        fusion: &Fusion,
        inputs: &[(View, Tensor)],
        mask: ViewMask,
    ) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let vars: Vec<(View, Var)> = inputs
            .iter()
            .map(|(v, t)| (*v, tape.constant(t.clone()).unwrap()))
            .collect();
        let y = fusion.fuse(&mut tape, ps, &vars, mask, Mode::Eval, 0)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn fuse_zero_central_with_zero_bias() {
        let (mut ps, _, fusion) = setup();
        ps.get_mut(fusion.b).value.data_mut().fill(0.0);
        let out = fused(
            &ps,
            &fusion,
            &[(View::Central, Tensor::zeros([1, 512]))],
            ViewMask::single(View::Central),
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 64]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_order_masking_and_errors() {
        let (ps, _, fusion) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut e = || Tensor::from_fn([2, 512], |_| rng.random::<f64>());
        let (l, c, r) = (e(), e(), e());
        let canonical = fused(
            &ps,
            &fusion,
            &[
                (View::Left, l.clone()),
                (View::Central, c.clone()),
                (View::Right, r.clone()),
            ],
            ViewMask::ALL,
        )
        .unwrap();
        let shuffled = fused(
            &ps,
            &fusion,
            &[
                (View::Right, r.clone()),
                (View::Left, l.clone()),
                (View::Central, c.clone()),
            ],
            ViewMask::ALL,
        )
        .unwrap();
        assert_eq!(canonical, shuffled);
        assert!(canonical.data().iter().all(|&v| v >= 0.0));

        let lr: ViewMask = "left,right".parse().unwrap();
        let masked = fused(
            &ps,
            &fusion,
            &[(View::Left, l.clone()), (View::Right, r.clone())],
            lr,
        )
        .unwrap();
        let zero_central = fused(
            &ps,
            &fusion,
            &[
                (View::Left, l.clone()),
                (View::Central, Tensor::zeros([2, 512])),
                (View::Right, r.clone()),
            ],
            ViewMask::ALL,
        )
        .unwrap();
        assert_eq!(masked, zero_central);
        assert_eq!(masked.shape(), &[2, 64]);

        let dup = fused(
            &ps,
            &fusion,
            &[(View::Left, l.clone()), (View::Left, l.clone())],
            lr,
        );
        assert!(dup.is_err());
        let missing = fused(&ps, &fusion, &[(View::Left, l)], lr);
        assert!(missing.is_err());
    }
}
