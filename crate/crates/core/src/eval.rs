//! Reference baselines and the evaluation protocol: whole-span MAE, progress-quartile
//! MAE with a fresh state per quarter, per-action MAE and per-camera ablation.
//!
//! All MAE values reported here are percentages.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::Episode;
use crate::error::{Error, Result};
use crate::fusion::{mix, Mode};
use crate::numcore::checkpoint;
use crate::temporal::ProgressModel;
use crate::training::{fit, sequence_loss, LabeledEpisode, TrainConfig};
use crate::view::{View, ViewMask};

/// Progress quarters by ground-truth label: `[0, .25)`, `[.25, .5)`, `[.5, .75)`, `[.75, 1]`.
pub const QUARTILE_LABELS: [&str; 4] = ["[0-25]", "[25-50]", "[50-75]", "[75-100]"];

/// One sequence handed to a predictor. Recurrent predictors start from a fresh state.
pub struct SequenceInput<'a> {
    pub episode: &'a Episode,
    pub frames: &'a [usize],
    /// Ground truth, only for oracle predictors.
    pub labels: &'a [f64],
}

pub trait Predictor {
    fn name(&self) -> String;

    /// One estimate per input frame.
    fn predict(&self, input: &SequenceInput<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>>;

    /// Identifies the predictor's configuration and weights in reports.
    fn fingerprint(&self) -> String {
        fingerprint(&[self.name().as_bytes()])
    }
}

/// First 16 hex digits of the SHA-256 of the concatenated parts.
pub fn fingerprint(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize()
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Per-frame-index mean of training labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageIndexModel {
    pub table: Vec<f64>,
    pub counts: Vec<usize>,
}

impl AverageIndexModel {
    /// `table[i]` is the mean label at index `i` over the sequences longer than `i`.
    pub fn fit(sequences: &[&[f64]]) -> Result<Self> {
        let len = sequences.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 {
            return Err(Error::Config(
                "average-index model needs non-empty training labels".into(),
            ));
        }
        // running means stay exact when every sequence carries the same label
        let mut table = vec![0.0; len];
        let mut counts = vec![0usize; len];
        for s in sequences {
            for (i, &p) in s.iter().enumerate() {
                counts[i] += 1;
                table[i] += (p - table[i]) / counts[i] as f64;
            }
        }
        Ok(AverageIndexModel { table, counts })
    }

    pub fn fit_episodes(episodes: &[LabeledEpisode]) -> Result<Self> {
        let seqs: Vec<&[f64]> = episodes
            .iter()
            .map(|e| e.labels.labels.as_slice())
            .collect();
        Self::fit(&seqs)
    }

    /// Clamps to the last entry beyond the longest training sequence.
    pub fn predict_index(&self, i: usize) -> f64 {
        self.table[i.min(self.table.len() - 1)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Random,
    Static,
    AverageIndex,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(BaselineKind::Random),
            "static" => Ok(BaselineKind::Static),
            "average_index" | "average-index" => Ok(BaselineKind::AverageIndex),
            other => Err(Error::Config(format!(
                "unknown baseline `{other}` (expected random, static or average_index)"
            ))),
        }
    }
}

/// Prediction of a baseline at local frame index `i`.
pub fn baseline_predict(
    kind: BaselineKind,
    i: usize,
    rng: &mut impl Rng,
    avg: Option<&AverageIndexModel>,
) -> Result<f64> {
    match kind {
        BaselineKind::Random => Ok(rng.random::<f64>()),
        BaselineKind::Static => Ok(0.5),
        BaselineKind::AverageIndex => avg
            .map(|m| m.predict_index(i))
            .ok_or_else(|| Error::Config("average_index baseline needs a fitted model".into())),
    }
}

#[derive(Clone, Debug)]
pub struct Baseline {
    pub kind: BaselineKind,
    pub avg: Option<AverageIndexModel>,
}

impl Baseline {
    pub fn new(kind: BaselineKind, avg: Option<AverageIndexModel>) -> Result<Self> {
        if kind == BaselineKind::AverageIndex && avg.is_none() {
            return Err(Error::Config(
                "average_index baseline needs a fitted model".into(),
            ));
        }
        Ok(Baseline { kind, avg })
    }
}

impl Predictor for Baseline {
    fn name(&self) -> String {
        match self.kind {
            BaselineKind::Random => "random",
            BaselineKind::Static => "static",
            BaselineKind::AverageIndex => "average_index",
        }
        .to_string()
    }

    fn predict(&self, input: &SequenceInput<'_>, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        (0..input.frames.len())
            .map(|i| baseline_predict(self.kind, i, rng, self.avg.as_ref()))
            .collect()
    }

    fn fingerprint(&self) -> String {
        let table = serde_json::to_vec(&self.avg).unwrap_or_default();
        fingerprint(&[self.name().as_bytes(), &table])
    }
}

/// Trained network restricted to a camera subset.
pub struct ModelPredictor<'a> {
    pub model: &'a ProgressModel,
    pub mask: ViewMask,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> String {
        format!("model[{}]", self.mask)
    }

    fn predict(&self, input: &SequenceInput<'_>, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        let frames = input.episode.view_frames(self.mask, input.frames)?;
        self.model.run_sequence(&frames, self.mask, Mode::Eval)
    }

    fn fingerprint(&self) -> String {
        let cfg = serde_json::to_vec(self.model.config()).unwrap_or_default();
        let weights = checkpoint::encode(&self.model.params);
        fingerprint(&[self.mask.to_string().as_bytes(), &cfg, &weights])
    }
}

/// Returns the ground truth.
pub struct Oracle;

impl Predictor for Oracle {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn predict(&self, input: &SequenceInput<'_>, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok(input.labels.to_vec())
    }
}

/// Ignores the frames and predicts `local index / expected_len`, capped at 1: the
/// shortcut a model can learn when it only ever sees complete sequences.
pub struct FrameCounter {
    pub expected_len: f64,
}

impl FrameCounter {
    /// Uses the mean span length (in frame steps) of `episodes`.
    pub fn from_episodes(episodes: &[LabeledEpisode]) -> Self {
        let total: usize = episodes.iter().map(|e| e.labels.t_e - e.labels.t_s).sum();
        FrameCounter {
            expected_len: total as f64 / episodes.len().max(1) as f64,
        }
    }
}

impl Predictor for FrameCounter {
    fn name(&self) -> String {
        format!("frame_counter[{}]", self.expected_len)
    }

    fn predict(&self, input: &SequenceInput<'_>, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
        Ok((0..input.frames.len())
            .map(|i| (i as f64 / self.expected_len).min(1.0))
            .collect())
    }
}

/// Per-episode RNG so results do not depend on evaluation order.
fn episode_rng(seed: u64, id: &str, part: u64) -> ChaCha8Rng {
    let h = id.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    });
    ChaCha8Rng::seed_from_u64(mix(seed ^ mix(h ^ mix(part))))
}

fn predict_checked(
    pred: &dyn Predictor,
    input: &SequenceInput<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let p = pred.predict(input, rng)?;
    if p.len() != input.frames.len() {
        return Err(Error::shape(
            "predict",
            format!(
                "{} returned {} values for {} frames",
                pred.name(),
                p.len(),
                input.frames.len()
            ),
        ));
    }
    Ok(p)
}

/// Mean over episodes of the full-span MAE, in percent.
pub fn evaluate_whole(pred: &dyn Predictor, episodes: &[LabeledEpisode], seed: u64) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to evaluate".into()));
    }
    let mut total = 0.0;
    for ep in episodes {
        let s = ep.full_span();
        let input = SequenceInput {
            episode: &ep.episode,
            frames: &s.frames,
            labels: &s.labels,
        };
        let p = predict_checked(pred, &input, &mut episode_rng(seed, &ep.episode.id, 0))?;
        total += sequence_loss(&p, &s.labels)?;
    }
    Ok(100.0 * total / episodes.len() as f64)
}

pub fn quartile_of(label: f64) -> usize {
    ((label * 4.0).floor() as usize).min(3)
}

/// MAE per progress quarter, in percent. Each quarter of each span is predicted as an
/// independent sequence. Spans shorter than 4 frames are skipped.
pub fn evaluate_quartiles(
    pred: &dyn Predictor,
    episodes: &[LabeledEpisode],
    seed: u64,
) -> Result<[f64; 4]> {
    let mut sums = [0.0; 4];
    let mut counts = [0usize; 4];
    for ep in episodes {
        let s = ep.full_span();
        if s.len() < 4 {
            log::warn!(
                "episode `{}`: span of {} frames skipped in quartile evaluation",
                ep.episode.id,
                s.len()
            );
            continue;
        }
        for q in 0..4 {
            let idx: Vec<usize> = (0..s.len())
                .filter(|&i| quartile_of(s.labels[i]) == q)
                .collect();
            if idx.is_empty() {
                continue;
            }
            let frames: Vec<usize> = idx.iter().map(|&i| s.frames[i]).collect();
            let labels: Vec<f64> = idx.iter().map(|&i| s.labels[i]).collect();
            let input = SequenceInput {
                episode: &ep.episode,
                frames: &frames,
                labels: &labels,
            };
            let p = predict_checked(
                pred,
                &input,
                &mut episode_rng(seed, &ep.episode.id, q as u64 + 1),
            )?;
            sums[q] += sequence_loss(&p, &labels)?;
            counts[q] += 1;
        }
    }
    if counts.contains(&0) {
        return Err(Error::Config(
            "quartile evaluation needs at least one span of 4 frames".into(),
        ));
    }
    Ok(std::array::from_fn(|q| 100.0 * sums[q] / counts[q] as f64))
}

/// Whole-span MAE per action name.
pub fn per_action_report(
    pred: &dyn Predictor,
    episodes: &[LabeledEpisode],
    seed: u64,
) -> Result<BTreeMap<String, f64>> {
    let mut groups: BTreeMap<String, Vec<LabeledEpisode>> = BTreeMap::new();
    for ep in episodes {
        groups
            .entry(ep.episode.action.clone())
            .or_default()
            .push(ep.clone());
    }
    groups
        .into_iter()
        .map(|(action, eps)| Ok((action, evaluate_whole(pred, &eps, seed)?)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub predictor: String,
    pub mask: String,
    pub n_episodes: usize,
    pub whole: f64,
    pub quartiles: [f64; 4],
    pub per_action: BTreeMap<String, f64>,
    pub fingerprint: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "[0-25],[25-50],[50-75],[75-100],whole";

    pub fn csv_row(&self) -> String {
        let q = self.quartiles;
        format!(
            "{:?},{:?},{:?},{:?},{:?}",
            q[0], q[1], q[2], q[3], self.whole
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }
}

/// Whole, quartile and per-action MAE for one predictor.
pub fn evaluate(
    pred: &dyn Predictor,
    mask: ViewMask,
    episodes: &[LabeledEpisode],
    seed: u64,
) -> Result<EvalReport> {
    Ok(EvalReport {
        predictor: pred.name(),
        mask: mask.to_string(),
        n_episodes: episodes.len(),
        whole: evaluate_whole(pred, episodes, seed)?,
        quartiles: evaluate_quartiles(pred, episodes, seed)?,
        per_action: per_action_report(pred, episodes, seed)?,
        fingerprint: pred.fingerprint(),
    })
}

/// Single cameras first, then all three.
pub fn default_ablation_masks() -> Vec<ViewMask> {
    vec![
        ViewMask::single(View::Left),
        ViewMask::single(View::Right),
        ViewMask::single(View::Central),
        ViewMask::ALL,
    ]
}

/// Trains one model per camera subset from the same seed and evaluates each on `test`.
pub fn camera_ablation(
    train: &[LabeledEpisode],
    val: &[LabeledEpisode],
    test: &[LabeledEpisode],
    cfg: &TrainConfig,
    masks: &[ViewMask],
) -> Result<Vec<(ViewMask, EvalReport)>> {
    masks
        .iter()
        .map(|&mask| {
            let cfg = TrainConfig {
                view_mask: mask,
                ..cfg.clone()
            };
            let fitted = fit(&cfg, train, val, None)?;
            let pred = ModelPredictor {
                model: &fitted.model,
                mask,
            };
            Ok((mask, evaluate(&pred, mask, test, cfg.seed)?))
        })
        .collect()
}
