//! Stacked LSTM over fused per-frame features and the full progress model.
//!
//! [`ProgressModel`] chains backbone, pyramid pooling, per-view embedding, fusion, two
//! LSTM layers and a sigmoid head. Prediction at frame `t` only ever depends on frames
//! `0..=t`: [`ProgressModel::step`] consumes one frame at a time, and
//! [`ProgressModel::run_sequence`] computes exactly the same fold in one batched pass.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::fusion::{spp, Fusion, Mode, ViewEmbedder, PYRAMID_CELLS};
use crate::numcore::{checkpoint, ParamId, ParamSet, Tape, Tensor, Var};
use crate::view::{View, ViewMask};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub view_embed_dim: usize,
    pub fusion_dim: usize,
    pub lstm_hidden: usize,
    pub lstm_layers: usize,
    /// One backbone for all views, or one per view.
    pub share_backbone: bool,
    pub forget_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            view_embed_dim: 512,
            fusion_dim: 64,
            lstm_hidden: 32,
            lstm_layers: 2,
            share_backbone: true,
            forget_bias: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.view_embed_dim == 0
            || self.fusion_dim == 0
            || self.lstm_hidden == 0
            || self.lstm_layers == 0
        {
            return Err(Error::Config(
                "view_embed_dim, fusion_dim, lstm_hidden and lstm_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hidden and cell vectors of one LSTM layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<LayerState>,
    pub frames_seen: usize,
}

impl RecurrentState {
    pub fn fresh(layers: usize, hidden: usize) -> Self {
        RecurrentState {
            layers: (0..layers)
                .map(|_| LayerState {
                    h: vec![0.0; hidden],
                    c: vec![0.0; hidden],
                })
                .collect(),
            frames_seen: 0,
        }
    }
}

/// One LSTM layer, gate order `[input, forget, candidate, output]`.
#[derive(Clone, Debug)]
pub struct LstmLayer {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmLayer {
    pub fn build(
        name: &str,
        input: usize,
        hidden: usize,
        forget_bias: f64,
        params: &mut ParamSet,
        rng: &mut impl Rng,
    ) -> Self {
        let w_ih = params.add_uniform(format!("{name}.w_ih"), [input, 4 * hidden], input, rng);
        let w_hh = params.add_uniform(format!("{name}.w_hh"), [hidden, 4 * hidden], hidden, rng);
        let bias = Tensor::from_fn([4 * hidden], |i| {
            if (hidden..2 * hidden).contains(&i) {
                forget_bias
            } else {
                0.0
            }
        });
        let bias = params.add(format!("{name}.b"), bias);
        LstmLayer {
            w_ih,
            w_hh,
            bias,
            input,
            hidden,
        }
    }

    /// Runs the layer over `x[T, input]` from `(h0, c0)`; returns `(h[T, hidden], h_T, c_T)`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        x: Var,
        h0: Var,
        c0: Var,
    ) -> Result<(Var, Var, Var)> {
        let steps = tape.shape(x)[0];
        let hd = self.hidden;
        let w_ih = tape.param(params, self.w_ih)?;
        let w_hh = tape.param(params, self.w_hh)?;
        let bias = tape.param(params, self.bias)?;
        let projected = tape.affine(x, w_ih, bias)?;
        let (mut h, mut c) = (h0, c0);
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = tape.slice(projected, 0, t, 1)?;
            let rec = tape.matmul(h, w_hh)?;
            let gates = tape.add(xt, rec)?;
            let i = tape.slice(gates, 1, 0, hd)?;
            let i = tape.sigmoid(i)?;
            let f = tape.slice(gates, 1, hd, hd)?;
            let f = tape.sigmoid(f)?;
            let g = tape.slice(gates, 1, 2 * hd, hd)?;
            let g = tape.tanh(g)?;
            let o = tape.slice(gates, 1, 3 * hd, hd)?;
            let o = tape.sigmoid(o)?;
            let keep = tape.mul(f, c)?;
            let write = tape.mul(i, g)?;
            c = tape.add(keep, write)?;
            let squashed = tape.tanh(c)?;
            h = tape.mul(o, squashed)?;
            outputs.push(h);
        }
        let hs = tape.concat(&outputs, 0)?;
        Ok((hs, h, c))
    }
}

/// Frames for one or more views: each tensor is `[T, C, H, W]` with pixels in `[0, 1]`.
pub type ViewFrames = Vec<(View, Tensor)>;

/// Tape handles produced by [`ProgressModel::forward`].
#[derive(Debug)]
pub struct ForwardOutput {
    /// `[T, 1]` progress estimates.
    pub progress: Var,
    /// Final `(h, c)` per LSTM layer.
    pub state: Vec<(Var, Var)>,
}

/// The full multi-view progress predictor.
#[derive(Clone, Debug)]
pub struct ProgressModel {
    config: ModelConfig,
    pub params: ParamSet,
    backbones: Vec<Backbone>,
    embedders: Vec<ViewEmbedder>,
    fusion: Fusion,
    lstm: Vec<LstmLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl ProgressModel {
    /// Builds a model with fan-in uniform initialization drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let backbones = if config.share_backbone {
            vec![Backbone::build(
                &config.backbone,
                "backbone",
                &mut params,
                &mut rng,
            )?]
        } else {
            View::ALL
                .iter()
                .map(|v| {
                    Backbone::build(
                        &config.backbone,
                        &format!("backbone.{v}"),
                        &mut params,
                        &mut rng,
                    )
                })
                .collect::<Result<_>>()?
        };
        let (feat_dim, _) = config.backbone.output_grid();
        let embedders = View::ALL
            .iter()
            .map(|&v| {
                ViewEmbedder::build(
                    v,
                    PYRAMID_CELLS * feat_dim,
                    config.view_embed_dim,
                    &mut params,
                    &mut rng,
                )
            })
            .collect();
        let fusion = Fusion::build(
            config.view_embed_dim,
            config.fusion_dim,
            &mut params,
            &mut rng,
        );
        let mut input = config.fusion_dim;
        let lstm = (0..config.lstm_layers)
            .map(|i| {
                let layer = LstmLayer::build(
                    &format!("lstm{i}"),
                    input,
                    config.lstm_hidden,
                    config.forget_bias,
                    &mut params,
                    &mut rng,
                );
                input = config.lstm_hidden;
                layer
            })
            .collect();
        let head_w = params.add_uniform(
            "head.w",
            [config.lstm_hidden, 1],
            config.lstm_hidden,
            &mut rng,
        );
        let head_b = params.add("head.b", Tensor::zeros([1]));
        Ok(ProgressModel {
            config,
            params,
            backbones,
            embedders,
            fusion,
            lstm,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    pub fn lstm_layers(&self) -> &[LstmLayer] {
        &self.lstm
    }

    pub fn fresh_state(&self) -> RecurrentState {
        RecurrentState::fresh(self.config.lstm_layers, self.config.lstm_hidden)
    }

    fn check_state(&self, state: &RecurrentState) -> Result<()> {
        let ok = state.layers.len() == self.config.lstm_layers
            && state.layers.iter().all(|l| {
                l.h.len() == self.config.lstm_hidden && l.c.len() == self.config.lstm_hidden
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "recurrent state does not match the model ({} layers of {} units)",
                self.config.lstm_layers, self.config.lstm_hidden
            )))
        }
    }

    /// Records the forward pass for frames `[T, C, H, W]` per active view, starting from
    /// `state`. Frames for views outside `mask` are ignored.
    pub fn forward(
        &self,
        tape: &mut Tape,
        frames: &[(View, Tensor)],
        mask: ViewMask,
        mode: Mode,
        state: &RecurrentState,
    ) -> Result<ForwardOutput> {
        self.check_state(state)?;
        let cfg = &self.config.backbone;
        let mut active: Vec<(View, &Tensor)> = Vec::with_capacity(3);
        for view in mask.views() {
            let mut found = frames.iter().filter(|(v, _)| *v == view);
            let (_, t) = found
                .next()
                .ok_or_else(|| Error::Config(format!("no frames supplied for view `{view}`")))?;
            if found.next().is_some() {
                return Err(Error::Config(format!("view `{view}` supplied twice")));
            }
            let s = t.shape();
            if s.len() != 4
                || s[1] != cfg.channels_in
                || s[2] != cfg.image_size
                || s[3] != cfg.image_size
            {
                return Err(Error::shape(
                    "forward",
                    format!("frames for `{view}` have shape {s:?}"),
                ));
            }
            active.push((view, t));
        }
        let steps = active[0].1.shape()[0];
        if steps == 0 || active.iter().any(|(_, t)| t.shape()[0] != steps) {
            return Err(Error::shape(
                "forward",
                "views must supply the same non-zero number of frames",
            ));
        }
        let first_frame = state.frames_seen;

        let mut pooled: Vec<(View, Var)> = Vec::with_capacity(active.len());
        if self.backbones.len() == 1 {
            // shared weights: run every active view through one batched pass
            let mut data = Vec::with_capacity(active.len() * active[0].1.len());
            for (_, t) in &active {
                data.extend_from_slice(t.data());
            }
            let mut shape = active[0].1.shape().to_vec();
            shape[0] = steps * active.len();
            let x = tape.constant(Tensor::new(shape, data)?)?;
            let feats = self.backbones[0].forward(tape, &self.params, x)?;
            let all = spp(tape, feats)?;
            for (i, (view, _)) in active.iter().enumerate() {
                let rows = if active.len() == 1 {
                    all
                } else {
                    tape.slice(all, 0, i * steps, steps)?
                };
                pooled.push((*view, rows));
            }
        } else {
            for (view, t) in &active {
                let x = tape.constant((*t).clone())?;
                let feats = self.backbones[view.index()].forward(tape, &self.params, x)?;
                pooled.push((*view, spp(tape, feats)?));
            }
        }

        let mut embeddings = Vec::with_capacity(pooled.len());
        for (view, p) in pooled {
            let e = self.embedders[view.index()].embed(tape, &self.params, p, mode, first_frame)?;
            embeddings.push((view, e));
        }
        let mut x = self
            .fusion
            .fuse(tape, &self.params, &embeddings, mask, mode, first_frame)?;

        let mut final_state = Vec::with_capacity(self.lstm.len());
        for (layer, st) in self.lstm.iter().zip(&state.layers) {
            let h0 = tape.constant(Tensor::new([1, layer.hidden], st.h.clone())?)?;
            let c0 = tape.constant(Tensor::new([1, layer.hidden], st.c.clone())?)?;
            let (hs, h, c) = layer.forward(tape, &self.params, x, h0, c0)?;
            final_state.push((h, c));
            x = hs;
        }
        let w = tape.param(&self.params, self.head_w)?;
        let b = tape.param(&self.params, self.head_b)?;
        let logits = tape.affine(x, w, b)?;
        let progress = tape.sigmoid(logits)?;
        Ok(ForwardOutput {
            progress,
            state: final_state,
        })
    }

    fn read_state(&self, tape: &Tape, out: &ForwardOutput, frames_seen: usize) -> RecurrentState {
        RecurrentState {
            layers: out
                .state
                .iter()
                .map(|&(h, c)| LayerState {
                    h: tape.value(h).data().to_vec(),
                    c: tape.value(c).data().to_vec(),
                })
                .collect(),
            frames_seen,
        }
    }

    /// Consumes one frame per active view (`[C, H, W]` each) and returns the new state and
    /// the progress estimate for that frame.
    pub fn step(
        &self,
        state: &RecurrentState,
        frames: &[(View, Tensor)],
        mask: ViewMask,
        mode: Mode,
    ) -> Result<(RecurrentState, f64)> {
        let batched: ViewFrames = frames
            .iter()
            .map(|(v, t)| {
                let mut shape = vec![1];
                shape.extend_from_slice(t.shape());
                Ok((*v, t.clone().reshape(shape)?))
            })
            .collect::<Result<_>>()?;
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, &batched, mask, mode, state)?;
        let p = tape.value(out.progress).data()[0];
        Ok((self.read_state(&tape, &out, state.frames_seen + 1), p))
    }

    /// Progress estimates for every frame of a sequence, starting from a fresh state.
    pub fn run_sequence(
        &self,
        frames: &[(View, Tensor)],
        mask: ViewMask,
        mode: Mode,
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let out = self.forward(&mut tape, frames, mask, mode, &self.fresh_state())?;
        Ok(tape.value(out.progress).data().to_vec())
    }

    fn config_path(path: &Path) -> PathBuf {
        let mut s = path.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Writes the parameter checkpoint to `path` and the model config to `<path>.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)?;
        let cfg_path = Self::config_path(path);
        let json = serde_json::to_string_pretty(&self.config)?;
        fs::write(&cfg_path, json).map_err(|e| Error::io(cfg_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = Self::config_path(path);
        let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = ProgressModel::new(config, 0)?;
        let stored = checkpoint::load(path)?;
        model.params.copy_values_from(&stored)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::sigmoid;

    fn tiny() -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig {
                embed_dim: 8,
                heads: 2,
                depth: 1,
                ..BackboneConfig::default()
            },
            view_embed_dim: 16,
            fusion_dim: 8,
            lstm_hidden: 4,
            ..ModelConfig::default()
        }
    }

    fn frames(rng: &mut ChaCha8Rng, t: usize, views: &[View]) -> ViewFrames {
        views
            .iter()
            .map(|&v| (v, Tensor::from_fn([t, 3, 32, 32], |_| rng.random::<f64>())))
            .collect()
    }

    fn frame_at(seq: &ViewFrames, t: usize) -> ViewFrames {
        seq.iter()
            .map(|(v, x)| {
                let n = 3 * 32 * 32;
                (
                    *v,
                    Tensor::new([3, 32, 32], x.data()[t * n..(t + 1) * n].to_vec()).unwrap(),
                )
            })
            .collect()
    }

    /// Textbook single-cell LSTM step on plain vectors.
    fn cell_oracle(
        x: &[f64],
        h: &[f64],
        c: &[f64],
        w_ih: &[f64],
        w_hh: &[f64],
        b: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hd = h.len();
        let mut z = b.to_vec();
        for (k, &xk) in x.iter().enumerate() {
            for j in 0..4 * hd {
                z[j] += xk * w_ih[k * 4 * hd + j];
            }
        }
        for (k, &hk) in h.iter().enumerate() {
            for j in 0..4 * hd {
                z[j] += hk * w_hh[k * 4 * hd + j];
            }
        }
        let mut h2 = vec![0.0; hd];
        let mut c2 = vec![0.0; hd];
        for j in 0..hd {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[hd + j]);
            let g = z[2 * hd + j].tanh();
            let o = sigmoid(z[3 * hd + j]);
            c2[j] = f * c[j] + i * g;
            h2[j] = o * c2[j].tanh();
        }
        (h2, c2)
    }

    #[test]
    fn lstm_matches_cell_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let layer = LstmLayer::build("l", 2, 2, 1.0, &mut ps, &mut rng);
        ps.get_mut(layer.bias)
            .value
            .data_mut()
            .iter_mut()
            .for_each(|b| *b += rng.random_range(-0.5..0.5));
        let xs: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::inference();
        let x = tape
            .constant(Tensor::new([3, 2], xs.clone()).unwrap())
            .unwrap();
        let h0 = tape
            .constant(Tensor::new([1, 2], vec![0.1, -0.2]).unwrap())
            .unwrap();
        let c0 = tape
            .constant(Tensor::new([1, 2], vec![0.3, 0.05]).unwrap())
            .unwrap();
        let (hs, _, c_last) = layer.forward(&mut tape, &ps, x, h0, c0).unwrap();

        let (mut h, mut c) = (vec![0.1, -0.2], vec![0.3, 0.05]);
        for t in 0..3 {
            (h, c) = cell_oracle(
                &xs[t * 2..t * 2 + 2],
                &h,
                &c,
                ps.value(layer.w_ih).data(),
                ps.value(layer.w_hh).data(),
                ps.value(layer.bias).data(),
            );
            for (got, want) in tape.value(hs).data()[t * 2..t * 2 + 2].iter().zip(&h) {
                assert!((got - want).abs() < 1e-14);
            }
        }
        for (got, want) in tape.value(c_last).data().iter().zip(&c) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn forget_gate_bias_initialized_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let layer = LstmLayer::build("l", 3, 4, 1.0, &mut ps, &mut rng);
        let b = ps.value(layer.bias).data();
        assert_eq!(&b[..4], &[0.0; 4]);
        assert_eq!(&b[4..8], &[1.0; 4]);
        assert_eq!(&b[8..], &[0.0; 8]);
    }

    #[test]
    fn fresh_step_is_in_unit_interval() {
        let model = ProgressModel::new(tiny(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = frames(&mut rng, 1, &View::ALL);
        let (state, p) = model
            .step(
                &model.fresh_state(),
                &frame_at(&seq, 0),
                ViewMask::ALL,
                Mode::Eval,
            )
            .unwrap();
        assert!(p > 0.0 && p < 1.0);
        assert_eq!(state.frames_seen, 1);
    }

    #[test]
    fn zero_head_predicts_one_half() {
        let mut model = ProgressModel::new(tiny(), 3).unwrap();
        let mut zero: Vec<ParamId> = model
            .lstm_layers()
            .iter()
            .flat_map(|l| [l.w_ih, l.w_hh, l.bias])
            .collect();
        let (hw, hb) = model.head_ids();
        zero.extend([hw, hb]);
        for id in zero {
            model.params.get_mut(id).value.data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let seq = frames(&mut rng, 4, &View::ALL);
        let preds = model.run_sequence(&seq, ViewMask::ALL, Mode::Eval).unwrap();
        assert_eq!(preds, vec![0.5; 4]);
    }

    #[test]
    fn run_sequence_equals_step_fold_bit_for_bit() {
        for (share, mode) in [
            (true, Mode::Eval),
            (
                false,
                Mode::Train {
                    seed: 77,
                    rate: 0.5,
                },
            ),
        ] {
            let cfg = ModelConfig {
                share_backbone: share,
                ..tiny()
            };
            let model = ProgressModel::new(cfg, 8).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mask: ViewMask = "left,right".parse().unwrap();
            let seq = frames(&mut rng, 5, &[View::Left, View::Right]);
            let mut tape = Tape::inference();
            let out = model
                .forward(&mut tape, &seq, mask, mode, &model.fresh_state())
                .unwrap();
            let batched = tape.value(out.progress).data().to_vec();
            let mut state = model.fresh_state();
            let mut folded = Vec::new();
            for t in 0..5 {
                let (s, p) = model.step(&state, &frame_at(&seq, t), mask, mode).unwrap();
                state = s;
                folded.push(p);
            }
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&batched), bits(&folded));
        }
    }

    #[test]
    fn future_frames_do_not_change_the_past() {
        let model = ProgressModel::new(tiny(), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let seq = frames(&mut rng, 3, &[View::Central]);
        let mask = ViewMask::single(View::Central);
        let before = model.run_sequence(&seq, mask, Mode::Eval).unwrap();
        let mut altered = seq.clone();
        let n = 3 * 32 * 32;
        altered[0].1.data_mut()[2 * n..]
            .iter_mut()
            .for_each(|v| *v = 1.0 - *v);
        let after = model.run_sequence(&altered, mask, Mode::Eval).unwrap();
        assert_eq!(before[..2], after[..2]);
        assert_ne!(before[2], after[2]);
        // prefix property
        let prefix: ViewFrames = seq
            .iter()
            .map(|(v, t)| {
                (
                    *v,
                    Tensor::new([2, 3, 32, 32], t.data()[..2 * n].to_vec()).unwrap(),
                )
            })
            .collect();
        assert_eq!(
            model.run_sequence(&prefix, mask, Mode::Eval).unwrap(),
            before[..2]
        );
    }

    #[test]
    fn input_validation() {
        let model = ProgressModel::new(tiny(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let seq = frames(&mut rng, 2, &[View::Left]);
        assert!(model.run_sequence(&seq, ViewMask::ALL, Mode::Eval).is_err());
        let empty = vec![(View::Left, Tensor::zeros([0, 3, 32, 32]))];
        assert!(model
            .run_sequence(&empty, ViewMask::single(View::Left), Mode::Eval)
            .is_err());
        let wrong = RecurrentState::fresh(1, 4);
        assert!(model
            .step(
                &wrong,
                &frame_at(&seq, 0),
                ViewMask::single(View::Left),
                Mode::Eval
            )
            .is_err());
    }

    #[test]
    fn save_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ProgressModel::new(tiny(), 12).unwrap();
        model.save(&path).unwrap();
        let back = ProgressModel::load(&path).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config(), model.config());
    }
}
