//! Per-frame visual feature extractors.
//!
//! Both extractors map a batch of frames `[B, C, H, W]` to a spatial grid of feature
//! vectors `[B, D, G, G]`; there is no classification head.
//!
//! The ViT-style extractor follows the usual recipe: a strided convolution turns
//! non-overlapping patches into tokens, a learned class token is prepended, learned
//! positional embeddings are added, and pre-norm transformer blocks mix the tokens. The
//! class token takes part in attention but is dropped from the returned grid.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Vit,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub image_size: usize,
    pub channels_in: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cnn_widths: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::Vit,
            image_size: 32,
            channels_in: 3,
            patch_size: 8,
            embed_dim: 32,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            cnn_widths: vec![8, 16, 32],
        }
    }
}

impl BackboneConfig {
    pub fn cnn() -> Self {
        BackboneConfig {
            kind: BackboneKind::Cnn,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.channels_in == 0 {
            return bad("image_size and channels_in must be positive".into());
        }
        match self.kind {
            BackboneKind::Vit => {
                if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
                    return bad(format!(
                        "patch_size {} must divide image_size {}",
                        self.patch_size, self.image_size
                    ));
                }
                if self.heads == 0
                    || self.embed_dim == 0
                    || !self.embed_dim.is_multiple_of(self.heads)
                {
                    return bad(format!(
                        "heads {} must divide embed_dim {}",
                        self.heads, self.embed_dim
                    ));
                }
                if self.mlp_ratio == 0 {
                    return bad("mlp_ratio must be positive".into());
                }
            }
            BackboneKind::Cnn => {
                if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
                    return bad("cnn_widths must be a non-empty list of positive widths".into());
                }
            }
        }
        let (_, g) = self.output_grid();
        if g < 3 {
            return bad(format!(
                "backbone output grid is {g}x{g}; spatial pyramid pooling needs at least 3x3"
            ));
        }
        Ok(())
    }

    /// `(feature dim, grid side)` of the extractor output; a function of config only.
    pub fn output_grid(&self) -> (usize, usize) {
        match self.kind {
            BackboneKind::Vit => (self.embed_dim, self.image_size / self.patch_size.max(1)),
            BackboneKind::Cnn => {
                let side = self
                    .cnn_widths
                    .iter()
                    .fold(self.image_size, |s, _| (s + 2 - 3) / 2 + 1);
                (*self.cnn_widths.last().unwrap_or(&0), side)
            }
        }
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    mlp1_w: ParamId,
    mlp1_b: ParamId,
    mlp2_w: ParamId,
    mlp2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct VitIds {
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    blocks: Vec<BlockIds>,
}

#[derive(Clone, Debug)]
pub enum Backbone {
    Vit {
        cfg: BackboneConfig,
        ids: VitIds,
    },
    Cnn {
        cfg: BackboneConfig,
        stages: Vec<(ParamId, ParamId)>,
    },
}

impl Backbone {
    /// Registers parameters under `prefix` with fan-in uniform init.
    pub fn build(
        cfg: &BackboneConfig,
        prefix: &str,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels_in;
        match cfg.kind {
            BackboneKind::Vit => {
                let (d, p) = (cfg.embed_dim, cfg.patch_size);
                let g = cfg.image_size / p;
                let hidden = d * cfg.mlp_ratio;
                let fan = c * p * p;
                let patch_w =
                    params.add_uniform(format!("{prefix}.patch.w"), [d, c, p, p], fan, rng);
                let patch_b = params.add_uniform(format!("{prefix}.patch.b"), [d], fan, rng);
                let cls = params.add_uniform(format!("{prefix}.cls"), [1, d], d, rng);
                let pos = params.add_uniform(format!("{prefix}.pos"), [g * g + 1, d], d, rng);
                let blocks = (0..cfg.depth)
                    .map(|i| {
                        let n = |s: &str| format!("{prefix}.block{i}.{s}");
                        BlockIds {
                            ln1_g: params.add(n("ln1.g"), Tensor::full([d], 1.0)),
                            ln1_b: params.add(n("ln1.b"), Tensor::zeros([d])),
                            qkv_w: params.add_uniform(n("qkv.w"), [d, 3 * d], d, rng),
                            qkv_b: params.add(n("qkv.b"), Tensor::zeros([3 * d])),
                            proj_w: params.add_uniform(n("proj.w"), [d, d], d, rng),
                            proj_b: params.add(n("proj.b"), Tensor::zeros([d])),
                            ln2_g: params.add(n("ln2.g"), Tensor::full([d], 1.0)),
                            ln2_b: params.add(n("ln2.b"), Tensor::zeros([d])),
                            mlp1_w: params.add_uniform(n("mlp1.w"), [d, hidden], d, rng),
                            mlp1_b: params.add(n("mlp1.b"), Tensor::zeros([hidden])),
                            mlp2_w: params.add_uniform(n("mlp2.w"), [hidden, d], hidden, rng),
                            mlp2_b: params.add(n("mlp2.b"), Tensor::zeros([d])),
                        }
                    })
                    .collect();
                Ok(Backbone::Vit {
                    cfg: cfg.clone(),
                    ids: VitIds {
                        patch_w,
                        patch_b,
                        cls,
                        pos,
                        blocks,
                    },
                })
            }
            BackboneKind::Cnn => {
                let mut c_in = c;
                let stages = cfg
                    .cnn_widths
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| {
                        let fan = c_in * 9;
                        let ids = (
                            params.add_uniform(
                                format!("{prefix}.conv{i}.w"),
                                [w, c_in, 3, 3],
                                fan,
                                rng,
                            ),
                            params.add_uniform(format!("{prefix}.conv{i}.b"), [w], fan, rng),
                        );
                        c_in = w;
                        ids
                    })
                    .collect();
                Ok(Backbone::Cnn {
                    cfg: cfg.clone(),
                    stages,
                })
            }
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        match self {
            Backbone::Vit { cfg, .. } | Backbone::Cnn { cfg, .. } => cfg,
        }
    }

    /// `[B, C, H, W]` frames to a `[B, D, G, G]` feature grid.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, frames: Var) -> Result<Var> {
        let cfg = self.config();
        let s = tape.shape(frames);
        if s.len() != 4
            || s[1] != cfg.channels_in
            || s[2] != cfg.image_size
            || s[3] != cfg.image_size
        {
            return Err(Error::shape(
                "backbone",
                format!(
                    "expected [B, {}, {}, {}], got {s:?}",
                    cfg.channels_in, cfg.image_size, cfg.image_size
                ),
            ));
        }
        match self {
            Backbone::Vit { cfg, ids } => vit_forward(tape, params, cfg, ids, frames),
            Backbone::Cnn { stages, .. } => {
                let mut x = frames;
                for &(w, b) in stages {
                    let w = tape.param(params, w)?;
                    let b = tape.param(params, b)?;
                    x = tape.conv2d(x, w, b, 2, 1)?;
                    x = tape.relu(x)?;
                }
                Ok(x)
            }
        }
    }
}

fn vit_forward(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &BackboneConfig,
    ids: &VitIds,
    frames: Var,
) -> Result<Var> {
    let b = tape.shape(frames)[0];
    let d = cfg.embed_dim;
    let g = cfg.image_size / cfg.patch_size;
    let s = g * g + 1;
    let heads = cfg.heads;
    let dh = d / heads;

    let pw = tape.param(params, ids.patch_w)?;
    let pb = tape.param(params, ids.patch_b)?;
    let patches = tape.conv2d(frames, pw, pb, cfg.patch_size, 0)?;
    let patches = tape.reshape(patches, &[b, d, g * g])?;
    let patches = tape.permute(patches, &[0, 2, 1])?;

    let cls = tape.param(params, ids.cls)?;
    let zeros = tape.constant(Tensor::zeros([b, 1, d]))?;
    let cls = tape.add_broadcast(zeros, cls)?;
    let tokens = tape.concat(&[cls, patches], 1)?;
    let pos = tape.param(params, ids.pos)?;
    let tokens = tape.add_broadcast(tokens, pos)?;
    let mut x = tape.reshape(tokens, &[b * s, d])?;

    let scale = 1.0 / (dh as f64).sqrt();
    for blk in &ids.blocks {
        let p = |tape: &mut Tape, id| tape.param(params, id);

        let (g1, b1) = (p(tape, blk.ln1_g)?, p(tape, blk.ln1_b)?);
        let h = tape.layer_norm(x, g1, b1)?;
        let (qw, qb) = (p(tape, blk.qkv_w)?, p(tape, blk.qkv_b)?);
        let qkv = tape.affine(h, qw, qb)?;
        let qkv = tape.reshape(qkv, &[b, s, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut qkv_parts = Vec::with_capacity(3);
        for i in 0..3 {
            let part = tape.slice(qkv, 0, i, 1)?;
            qkv_parts.push(tape.reshape(part, &[b * heads, s, dh])?);
        }
        let kt = tape.permute(qkv_parts[1], &[0, 2, 1])?;
        let scores = tape.bmm(qkv_parts[0], kt)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax(scores)?;
        let mixed = tape.bmm(attn, qkv_parts[2])?;
        let mixed = tape.reshape(mixed, &[b, heads, s, dh])?;
        let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
        let mixed = tape.reshape(mixed, &[b * s, d])?;
        let (ow, ob) = (p(tape, blk.proj_w)?, p(tape, blk.proj_b)?);
        let out = tape.affine(mixed, ow, ob)?;
        x = tape.add(x, out)?;

        let (g2, b2) = (p(tape, blk.ln2_g)?, p(tape, blk.ln2_b)?);
        let h = tape.layer_norm(x, g2, b2)?;
        let (w1, bb1) = (p(tape, blk.mlp1_w)?, p(tape, blk.mlp1_b)?);
        let h = tape.affine(h, w1, bb1)?;
        let h = tape.gelu(h)?;
        let (w2, bb2) = (p(tape, blk.mlp2_w)?, p(tape, blk.mlp2_b)?);
        let h = tape.affine(h, w2, bb2)?;
        x = tape.add(x, h)?;
    }

    let x = tape.reshape(x, &[b, s, d])?;
    let grid = tape.slice(x, 1, 1, g * g)?;
    let grid = tape.permute(grid, &[0, 2, 1])?;
    tape.reshape(grid, &[b, d, g, g])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn run(cfg: &BackboneConfig, params: &ParamSet, bb: &Backbone, frames: Tensor) -> Tensor {
        let mut tape = Tape::inference();
        let x = tape.constant(frames).unwrap();
        let y = bb.forward(&mut tape, params, x).unwrap();
        assert_eq!(
            tape.shape(y)[1..],
            [
                cfg.output_grid().0,
                cfg.output_grid().1,
                cfg.output_grid().1
            ]
        );
        tape.value(y).clone()
    }

    fn random_frames(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Tensor {
        Tensor::from_fn([b, 3, size, size], |_| rng.random::<f64>())
    }

    #[test]
    fn vit_output_shape() {
        let cfg = BackboneConfig {
            embed_dim: 16,
            heads: 4,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let bb = Backbone::build(&cfg, "vit", &mut ps, &mut rng).unwrap();
        let out = run(&cfg, &ps, &bb, random_frames(&mut rng, 2, 32));
        assert_eq!(out.shape(), &[2, 16, 4, 4]);
    }

    #[test]
    fn config_violations_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let bad_patch = BackboneConfig {
            patch_size: 7,
            ..BackboneConfig::default()
        };
        assert!(Backbone::build(&bad_patch, "x", &mut ps, &mut rng).is_err());
        let bad_heads = BackboneConfig {
            heads: 5,
            ..BackboneConfig::default()
        };
        assert!(Backbone::build(&bad_heads, "x", &mut ps, &mut rng).is_err());
        let tiny_grid = BackboneConfig {
            patch_size: 16,
            ..BackboneConfig::default()
        };
        assert!(Backbone::build(&tiny_grid, "x", &mut ps, &mut rng).is_err());
        let deep_cnn = BackboneConfig {
            cnn_widths: vec![4, 4, 4, 4],
            ..BackboneConfig::cnn()
        };
        assert!(Backbone::build(&deep_cnn, "x", &mut ps, &mut rng).is_err());
        assert!(ps.is_empty());
    }

    #[test]
    fn vit_depth_zero_is_patch_projection_plus_position() {
        let cfg = BackboneConfig {
            depth: 0,
            embed_dim: 8,
            heads: 2,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let bb = Backbone::build(&cfg, "vit", &mut ps, &mut rng).unwrap();
        let frames = random_frames(&mut rng, 1, 32);
        let out = run(&cfg, &ps, &bb, frames.clone());

        let Backbone::Vit { ids, .. } = &bb else {
            unreachable!()
        };
        let (w, bias, pos) = (
            ps.value(ids.patch_w),
            ps.value(ids.patch_b),
            ps.value(ids.pos),
        );
        // direct patch projection, one grid cell at a time
        for d in 0..8 {
            for gy in 0..4 {
                for gx in 0..4 {
                    let mut acc = 0.0;
                    for c in 0..3 {
                        for ky in 0..8 {
                            for kx in 0..8 {
                                let px = frames.data()[(c * 32 + gy * 8 + ky) * 32 + gx * 8 + kx];
                                acc += px * w.data()[((d * 3 + c) * 8 + ky) * 8 + kx];
                            }
                        }
                    }
                    let token = 1 + gy * 4 + gx;
                    let expect = acc + bias.data()[d] + pos.data()[token * 8 + d];
                    let got = out.data()[(d * 4 + gy) * 4 + gx];
                    assert!((expect - got).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn vit_depth_zero_locality() {
        let cfg = BackboneConfig {
            depth: 0,
            embed_dim: 16,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::new();
        let bb = Backbone::build(&cfg, "vit", &mut ps, &mut rng).unwrap();
        let a = random_frames(&mut rng, 1, 32);
        let mut b = a.clone();
        // perturb pixels inside the patch at grid cell (row 2, col 1)
        for c in 0..3 {
            for y in 16..24 {
                for x in 8..16 {
                    b.data_mut()[(c * 32 + y) * 32 + x] += 0.3;
                }
            }
        }
        let (oa, ob) = (run(&cfg, &ps, &bb, a), run(&cfg, &ps, &bb, b));
        let mut changed = Vec::new();
        for cell in 0..16 {
            if (0..16).any(|d| oa.data()[d * 16 + cell] != ob.data()[d * 16 + cell]) {
                changed.push(cell);
            }
        }
        assert_eq!(changed, vec![2 * 4 + 1]);
    }

    #[test]
    fn vit_attention_is_permutation_equivariant() {
        // 2x2 grid: 16px images with 8px patches
        let cfg = BackboneConfig {
            image_size: 16,
            depth: 2,
            embed_dim: 8,
            heads: 2,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParamSet::new();
        let ids_bb = build_unchecked_vit(&cfg, &mut ps, &mut rng);
        let frames = random_frames(&mut rng, 1, 16);
        let perm = [3usize, 0, 2, 1]; // new cell i shows old cell perm[i]
        let mut shuffled = frames.clone();
        for (new_cell, &old_cell) in perm.iter().enumerate() {
            let (ny, nx) = (new_cell / 2 * 8, new_cell % 2 * 8);
            let (oy, ox) = (old_cell / 2 * 8, old_cell % 2 * 8);
            for c in 0..3 {
                for y in 0..8 {
                    for x in 0..8 {
                        shuffled.data_mut()[(c * 16 + ny + y) * 16 + nx + x] =
                            frames.data()[(c * 16 + oy + y) * 16 + ox + x];
                    }
                }
            }
        }
        let mut ps2 = ps.clone();
        let Backbone::Vit { ids, .. } = &ids_bb else {
            unreachable!()
        };
        {
            let pos = ps.value(ids.pos).clone();
            let dst = ps2.get_mut(ids.pos).value.data_mut();
            for (new_cell, &old_cell) in perm.iter().enumerate() {
                for d in 0..8 {
                    dst[(1 + new_cell) * 8 + d] = pos.data()[(1 + old_cell) * 8 + d];
                }
            }
        }
        let eval = |ps: &ParamSet, f: Tensor| {
            let mut tape = Tape::inference();
            let x = tape.constant(f).unwrap();
            let y = ids_bb.forward(&mut tape, ps, x).unwrap();
            let mut v = tape.value(y).data().to_vec();
            v.sort_by(f64::total_cmp);
            v
        };
        let a = eval(&ps, frames);
        let b = eval(&ps2, shuffled);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    fn build_unchecked_vit(
        cfg: &BackboneConfig,
        ps: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Backbone {
        // Same registration as Backbone::build, bypassing the SPP grid check.
        let mut big = cfg.clone();
        big.image_size = cfg.patch_size * 3;
        let Backbone::Vit { ids, .. } = Backbone::build(&big, "vit", ps, rng).unwrap() else {
            unreachable!()
        };
        let g = cfg.image_size / cfg.patch_size;
        let pos = ps.value(ids.pos).data()[..(g * g + 1) * cfg.embed_dim].to_vec();
        ps.get_mut(ids.pos).value = Tensor::new([g * g + 1, cfg.embed_dim], pos).unwrap();
        Backbone::Vit {
            cfg: cfg.clone(),
            ids,
        }
    }

    #[test]
    fn gradients_reach_every_patch() {
        let cfg = BackboneConfig {
            embed_dim: 8,
            heads: 2,
            depth: 1,
            ..BackboneConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParamSet::new();
        let bb = Backbone::build(&cfg, "vit", &mut ps, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.leaf(random_frames(&mut rng, 1, 32)).unwrap();
        let y = bb.forward(&mut tape, &ps, x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(x).unwrap();
        for gy in 0..4 {
            for gx in 0..4 {
                let any = (0..3).any(|c| {
                    (0..8).any(|py| {
                        (0..8).any(|px| g[(c * 32 + gy * 8 + py) * 32 + gx * 8 + px] != 0.0)
                    })
                });
                assert!(any, "no gradient reaches patch ({gy}, {gx})");
            }
        }
    }

    #[test]
    fn cnn_shapes_and_zero_input() {
        let cfg = BackboneConfig::cnn();
        assert_eq!(cfg.output_grid(), (32, 4));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParamSet::new();
        let bb = Backbone::build(&cfg, "cnn", &mut ps, &mut rng).unwrap();
        for p in ps.iter_mut().filter(|p| p.name.ends_with(".b")) {
            p.value.data_mut().fill(0.0);
        }
        let out = run(&cfg, &ps, &bb, Tensor::zeros([2, 3, 32, 32]));
        assert_eq!(out.shape(), &[2, 32, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_depends_only_on_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for cfg in [BackboneConfig::default(), BackboneConfig::cnn()] {
            let mut ps = ParamSet::new();
            let bb = Backbone::build(&cfg, "b", &mut ps, &mut rng).unwrap();
            let a = run(&cfg, &ps, &bb, random_frames(&mut rng, 1, 32));
            let b = run(&cfg, &ps, &bb, Tensor::full([1, 3, 32, 32], 0.7));
            assert_eq!(a.shape(), b.shape());
        }
    }
}
