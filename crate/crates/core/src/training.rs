//! Training loop with the two anti-shortcut augmentations: variable frame-rate
//! resampling and random segments that keep global progress labels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::episode::{BoundaryRule, Episode, ProgressLabels};
use crate::error::{Error, Result};
use crate::fusion::Mode;
use crate::numcore::{AdamConfig, AdamState, Tape};
use crate::temporal::{ModelConfig, ProgressModel};
use crate::view::ViewMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub dropout: f64,
    pub segment_training: bool,
    pub framerate_aug: bool,
    pub segment_length_range: [f64; 2],
    pub framerate_factor_range: [f64; 2],
    pub chunks_per_video: [usize; 2],
    pub view_mask: ViewMask,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            seed: 0,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            dropout: 0.5,
            segment_training: true,
            framerate_aug: true,
            segment_length_range: [0.2, 1.0],
            framerate_factor_range: [0.5, 2.0],
            chunks_per_video: [2, 5],
            view_mask: ViewMask::ALL,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.segment_length_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "segment_length_range must satisfy 0 < lo <= hi <= 1, got [{lo}, {hi}]"
            )));
        }
        let [lo, hi] = self.framerate_factor_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "framerate_factor_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        let [lo, hi] = self.chunks_per_video;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!(
                "chunks_per_video must satisfy 1 <= lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "lr must be non-negative, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.model.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// An episode together with its ground-truth progress over the action span.
#[derive(Clone, Debug)]
pub struct LabeledEpisode {
    pub episode: Episode,
    pub labels: ProgressLabels,
}

impl LabeledEpisode {
    /// Labels the episode from its stored boundaries or by rule detection.
    pub fn new(episode: Episode, rule: Option<&BoundaryRule>) -> Result<Self> {
        let labels = episode.labels(rule)?;
        Ok(LabeledEpisode { episode, labels })
    }

    pub fn full_span(&self) -> Sample {
        Sample {
            frames: self.labels.frames().collect(),
            labels: self.labels.labels.clone(),
        }
    }
}

/// Frame indices into an episode with the progress label each one carries.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub frames: Vec<usize>,
    pub labels: Vec<f64>,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Splits the sample into `k` random chunks and plays each back at its own speed by
/// nearest-neighbour index selection. A factor of 2 keeps every other frame; 0.5 shows
/// each frame twice. Labels travel with their frames. Samples shorter than 4 frames are
/// returned unchanged.
pub fn variable_framerate_resample(
    sample: &Sample,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Sample {
    let n = sample.len();
    if n < 4 {
        return sample.clone();
    }
    let [kmin, kmax] = cfg.chunks_per_video;
    let k = rng.random_range(kmin..=kmax).min(n);
    let mut cuts = rand::seq::index::sample(rng, n - 1, k - 1).into_vec();
    cuts.iter_mut().for_each(|c| *c += 1);
    cuts.sort_unstable();
    cuts.insert(0, 0);
    cuts.push(n);

    let [fmin, fmax] = cfg.framerate_factor_range;
    let mut out = Sample {
        frames: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
    };
    for w in cuts.windows(2) {
        let (start, len) = (w[0], w[1] - w[0]);
        let factor = if fmin == fmax {
            fmin
        } else {
            rng.random_range(fmin..=fmax)
        };
        let m = ((len as f64 / factor).round() as usize).max(1);
        for j in 0..m {
            let src = start + (j * len / m).min(len - 1);
            out.frames.push(sample.frames[src]);
            out.labels.push(sample.labels[src]);
        }
    }
    out
}

/// A contiguous random window whose length is a uniform fraction of the sample. Labels
/// are not renormalized.
pub fn sample_segment(sample: &Sample, cfg: &TrainConfig, rng: &mut impl Rng) -> Sample {
    let n = sample.len();
    if n == 0 {
        return sample.clone();
    }
    let [lo, hi] = cfg.segment_length_range;
    let frac = if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    };
    let len = ((frac * n as f64).round() as usize).clamp(1, n);
    let start = rng.random_range(0..=n - len);
    Sample {
        frames: sample.frames[start..start + len].to_vec(),
        labels: sample.labels[start..start + len].to_vec(),
    }
}

/// Mean absolute error between equal-length sequences.
pub fn sequence_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "sequence_loss",
            format!(
                "{} predictions vs {} labels",
                predictions.len(),
                labels.len()
            ),
        ));
    }
    Ok(predictions
        .iter()
        .zip(labels)
        .map(|(p, l)| (p - l).abs())
        .sum::<f64>()
        / labels.len() as f64)
}

/// Model plus optimizer state carried across epochs.
pub struct Trainer {
    pub model: ProgressModel,
    pub adam: AdamState,
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = ProgressModel::new(config.model.clone(), config.seed)?;
        Ok(Self::with_model(model, config))
    }

    pub fn with_model(model: ProgressModel, config: TrainConfig) -> Self {
        let adam = AdamState::new(config.adam(), &model.params);
        // separate stream from the one used for weight initialization
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e_5f72_6e67);
        Trainer {
            model,
            adam,
            config,
            rng,
            epoch: 0,
        }
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// The sample one training step sees for `ep`.
    pub fn augment(&mut self, ep: &LabeledEpisode) -> Sample {
        let mut s = ep.full_span();
        if self.config.framerate_aug {
            s = variable_framerate_resample(&s, &self.config, &mut self.rng);
        }
        if self.config.segment_training {
            s = sample_segment(&s, &self.config, &mut self.rng);
        }
        s
    }

    /// One pass over `dataset` in shuffled order; returns the mean per-episode loss.
    pub fn train_epoch(&mut self, dataset: &[LabeledEpisode]) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let epoch = self.epoch + 1;
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for idx in order {
            let ep = &dataset[idx];
            let sample = self.augment(ep);
            let mode = Mode::Train {
                seed: self.rng.next_u64(),
                rate: self.config.dropout,
            };
            let non_finite = |e: Error| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    epoch,
                    episode: ep.episode.id.clone(),
                },
                other => other,
            };
            let frames = ep
                .episode
                .view_frames(self.config.view_mask, &sample.frames)?;
            let mut tape = Tape::new();
            let out = self
                .model
                .forward(
                    &mut tape,
                    &frames,
                    self.config.view_mask,
                    mode,
                    &self.model.fresh_state(),
                )
                .map_err(non_finite)?;
            let loss = tape
                .mean_abs_error(out.progress, &sample.labels)
                .map_err(non_finite)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(non_finite(Error::NonFinite { op: "loss" }));
            }
            tape.backward(loss)?;
            self.model.params.zero_grads();
            tape.accumulate_param_grads(&mut self.model.params)?;
            self.adam.step(&mut self.model.params)?;
            if self.model.params.iter().any(|p| !p.value.is_finite()) {
                return Err(non_finite(Error::NonFinite { op: "adam" }));
            }
            total += value;
        }
        self.epoch = epoch;
        Ok(total / dataset.len() as f64)
    }
}

/// Mean over episodes of the per-episode MAE on full spans, eval mode.
pub fn validation_mae(
    model: &ProgressModel,
    dataset: &[LabeledEpisode],
    mask: ViewMask,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let mut total = 0.0;
    for ep in dataset {
        let s = ep.full_span();
        let frames = ep.episode.view_frames(mask, &s.frames)?;
        let preds = model.run_sequence(&frames, mask, Mode::Eval)?;
        total += sequence_loss(&preds, &s.labels)?;
    }
    Ok(total / dataset.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mae: f64,
    pub val_mae: f64,
}

pub struct FitResult {
    /// Parameters from the epoch with the lowest validation MAE (the initial model when
    /// no epoch ran).
    pub model: ProgressModel,
    pub log: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
}

/// Trains for `config.epochs` epochs, keeping the best-validation parameters. When
/// `checkpoint` is given, the best model is saved there whenever it improves.
pub fn fit(
    config: &TrainConfig,
    train: &[LabeledEpisode],
    val: &[LabeledEpisode],
    checkpoint: Option<&Path>,
) -> Result<FitResult> {
    let trainer = Trainer::new(config.clone())?;
    fit_from(trainer, train, val, checkpoint)
}

pub fn fit_from(
    mut trainer: Trainer,
    train: &[LabeledEpisode],
    val: &[LabeledEpisode],
    checkpoint: Option<&Path>,
) -> Result<FitResult> {
    let mask = trainer.config.view_mask;
    let mut best: Option<(f64, usize, ProgressModel)> = None;
    let mut log = Vec::with_capacity(trainer.config.epochs);
    for _ in 0..trainer.config.epochs {
        let train_mae = trainer.train_epoch(train)?;
        let val_mae = validation_mae(&trainer.model, val, mask)?;
        let epoch = trainer.epochs_done();
        log::info!("epoch {epoch}: train_mae {train_mae:.5} val_mae {val_mae:.5}");
        log.push(EpochMetrics {
            epoch,
            train_mae,
            val_mae,
        });
        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            if let Some(path) = checkpoint {
                trainer.model.save(path)?;
            }
            best = Some((val_mae, epoch, trainer.model.clone()));
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, Some(e)),
        None => (trainer.model, None),
    };
    Ok(FitResult {
        model,
        log,
        best_epoch,
    })
}

/// `epoch,train_mae,val_mae` rows under a header.
pub fn write_metrics_csv(log: &[EpochMetrics], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,train_mae,val_mae\n");
    for m in log {
        text += &format!("{},{:?},{:?}\n", m.epoch, m.train_mae, m.val_mae);
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
