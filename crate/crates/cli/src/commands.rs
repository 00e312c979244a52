//! Subcommand implementations.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use progressd_core::dataset::{
    episode_dir, episode_dirs, load_split, Split, DATASET_FILE, EPISODES_DIR,
};
use progressd_core::episode::{
    detect_boundaries, load_episode, map_trace_index_to_frame, read_manifest, write_manifest,
    BoundaryRule, FrameBoundaries,
};
use progressd_core::eval::{
    evaluate, AverageIndexModel, Baseline, BaselineKind, FrameCounter, ModelPredictor, Oracle,
    Predictor,
};
use progressd_core::synthgen::{generate_dataset, SynthConfig};
use progressd_core::training::{fit, write_metrics_csv};
use progressd_core::{Error, LabeledEpisode, Mode, ProgressModel, SensorTrace, TrainConfig};

use crate::manifest::{default_path, write_atomic, RunManifest};
use crate::plot::{self, Curve};
use crate::{EvalArgs, GenerateArgs, PlotArgs, SegmentArgs, TrainArgs, UsageError, SEED_ENV};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn config_error(path: &Path, e: Error) -> anyhow::Error {
    usage(format!("{}: {e}", path.display()))
}

/// `--seed` beats `PROGRESSD_SEED`, which beats the config file.
pub fn resolve_seed(flag: Option<u64>, from_file: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(from_file),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Boundary rules from a file: one rule for every episode, or one per action.
pub enum Rules {
    Builtin,
    One(BoundaryRule),
    ByAction(BTreeMap<String, BoundaryRule>),
}

impl Rules {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Rules::Builtin);
        };
        let value: serde_json::Value = serde_json::from_str(&read_text(path)?)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
        if value.get("start").is_some() || value.get("end").is_some() {
            let rule: BoundaryRule = serde_json::from_value(value)
                .map_err(|e| usage(format!("{}: {e}", path.display())))?;
            rule.validate().map_err(|e| config_error(path, e))?;
            return Ok(Rules::One(rule));
        }
        let map: BTreeMap<String, BoundaryRule> =
            serde_json::from_value(value).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        for (action, rule) in &map {
            rule.validate()
                .map_err(|e| usage(format!("{}: rule `{action}`: {e}", path.display())))?;
        }
        Ok(Rules::ByAction(map))
    }

    /// The rule for `action`; `None` means the built-in table.
    pub fn get(&self, action: &str) -> Result<Option<&BoundaryRule>> {
        match self {
            Rules::Builtin => Ok(None),
            Rules::One(r) => Ok(Some(r)),
            Rules::ByAction(map) => map
                .get(action)
                .map(Some)
                .ok_or_else(|| usage(format!("no boundary rule for action `{action}`"))),
        }
    }

    fn resolve(&self, action: &str) -> Result<BoundaryRule> {
        match self.get(action)? {
            Some(r) => Ok(r.clone()),
            None => progressd_core::episode::builtin_rules()
                .remove(action)
                .ok_or_else(|| usage(format!("no built-in boundary rule for action `{action}`"))),
        }
    }
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(usage(format!(
            "unknown split `{other}` (expected train, val or test)"
        ))),
    }
}

fn labeled_split(root: &Path, split: Split, rules: &Rules) -> Result<Vec<LabeledEpisode>> {
    load_split(root, split)?
        .into_iter()
        .map(|ep| {
            let rule = rules.get(&ep.action)?.cloned();
            let id = ep.id.clone();
            LabeledEpisode::new(ep, rule.as_ref())
                .with_context(|| format!("labeling episode `{id}`"))
        })
        .collect()
}

pub fn generate(a: &GenerateArgs, manifest: Option<PathBuf>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::from_json(&read_text(p)?).map_err(|e| config_error(p, e))?,
        None => SynthConfig::default(),
    };
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    if a.out.join(DATASET_FILE).exists() || a.out.join(EPISODES_DIR).exists() {
        if !a.force {
            return Err(usage(format!(
                "{} already holds a dataset; pass --force to replace it",
                a.out.display()
            )));
        }
        let episodes = a.out.join(EPISODES_DIR);
        if episodes.exists() {
            fs::remove_dir_all(&episodes)
                .with_context(|| format!("removing {}", episodes.display()))?;
        }
    }
    let ds = generate_dataset(&cfg, &a.out)?;
    println!(
        "generated {} episodes in {} (train {}, val {}, test {})",
        ds.episodes.len(),
        a.out.display(),
        ds.splits.train.len(),
        ds.splits.val.len(),
        ds.splits.test.len()
    );
    let mut m = RunManifest::new("generate");
    m.config = a.config.clone();
    m.outputs = vec![a.out.clone()];
    m.seed = Some(cfg.seed);
    m.finish(&manifest.unwrap_or_else(|| default_path(&a.out)))?;
    Ok(())
}

#[derive(Debug, PartialEq)]
pub struct BoundaryRow {
    pub episode: String,
    pub action: String,
    pub status: &'static str,
    pub frames: Option<FrameBoundaries>,
    pub samples: Option<(usize, usize)>,
    /// Whether the detection equals the boundaries already stored in the manifest.
    pub agrees: Option<bool>,
}

pub fn segment(a: &SegmentArgs, manifest: Option<PathBuf>) -> Result<()> {
    let rules = Rules::load(a.rules.as_deref())?;
    let dirs = episode_dirs(&a.episodes)?;
    if dirs.is_empty() {
        return Err(usage(format!("no episodes under {}", a.episodes.display())));
    }
    let mut rows = Vec::with_capacity(dirs.len());
    let mut touched = Vec::new();
    for dir in &dirs {
        let mut man = read_manifest(dir)?;
        let trace = SensorTrace::read_csv(&dir.join("trace.csv"), man.trace_sample_rate_hz)?;
        let rule = rules.resolve(&man.action)?;
        let mut row = BoundaryRow {
            episode: man.id.clone(),
            action: man.action.clone(),
            status: "ok",
            frames: None,
            samples: None,
            agrees: None,
        };
        match detect_boundaries(&trace, &rule) {
            Ok(b) => {
                let fb = FrameBoundaries {
                    t_s_frame: map_trace_index_to_frame(b.t_s, &trace, &man.frame_timestamps),
                    t_e_frame: map_trace_index_to_frame(b.t_e, &trace, &man.frame_timestamps),
                };
                row.frames = Some(fb);
                row.samples = Some((b.t_s, b.t_e));
                row.agrees = man.boundaries.map(|old| old == fb);
                if a.write_boundaries {
                    man.boundaries = Some(fb);
                    write_manifest(&man, dir)?;
                    touched.push(dir.join("manifest.json"));
                }
            }
            Err(Error::NoStart) => {
                log::warn!("{}: start condition never satisfied", man.id);
                row.status = "no_start";
            }
            Err(Error::NoEnd { t_start }) => {
                log::warn!(
                    "{}: end condition never satisfied after sample {t_start}",
                    man.id
                );
                row.status = "no_end";
            }
            Err(e) => return Err(anyhow::Error::new(e).context(format!("episode `{}`", man.id))),
        }
        rows.push(row);
    }

    let report = a
        .report
        .clone()
        .unwrap_or_else(|| a.episodes.join("boundaries.csv"));
    let text = boundary_csv(&rows)?;
    write_atomic(&report, text.as_bytes())?;
    print!("{text}");
    let ok = rows.iter().filter(|r| r.status == "ok").count();
    let compared: Vec<bool> = rows.iter().filter_map(|r| r.agrees).collect();
    println!(
        "{} episodes: {ok} segmented, {} warnings; {} of {} agree with stored boundaries",
        rows.len(),
        rows.len() - ok,
        compared.iter().filter(|&&x| x).count(),
        compared.len()
    );

    let mut m = RunManifest::new("segment");
    m.config = a.rules.clone();
    m.inputs = vec![a.episodes.clone()];
    m.outputs = std::iter::once(report.clone()).chain(touched).collect();
    m.finish(&manifest.unwrap_or_else(|| default_path(&report)))?;
    Ok(())
}

fn boundary_csv(rows: &[BoundaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "episode",
        "action",
        "status",
        "t_s_frame",
        "t_e_frame",
        "t_s_sample",
        "t_e_sample",
        "agrees_with_manifest",
    ])?;
    let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.episode.clone(),
            r.action.clone(),
            r.status.to_string(),
            opt(r.frames.map(|f| f.t_s_frame)),
            opt(r.frames.map(|f| f.t_e_frame)),
            opt(r.samples.map(|s| s.0)),
            opt(r.samples.map(|s| s.1)),
            r.agrees.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn train(a: &TrainArgs, manifest: Option<PathBuf>) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json(&read_text(p)?).map_err(|e| config_error(p, e))?,
        None => TrainConfig::default(),
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.seed = resolve_seed(a.seed, cfg.seed)?;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let rules = Rules::load(a.rules.as_deref())?;
    let train = labeled_split(&a.data, Split::Train, &rules)?;
    let val = labeled_split(&a.data, Split::Val, &rules)?;
    if train.is_empty() {
        return Err(usage(format!(
            "{}: training split is empty",
            a.data.display()
        )));
    }
    if val.is_empty() {
        return Err(usage(format!(
            "{}: validation split is empty",
            a.data.display()
        )));
    }
    println!(
        "training on {} episodes, validating on {}, {} epochs, seed {}",
        train.len(),
        val.len(),
        cfg.epochs,
        cfg.seed
    );
    let fitted = fit(&cfg, &train, &val, None)?;
    for m in &fitted.log {
        println!(
            "epoch {:>3}  train_mae {:.5}  val_mae {:.5}",
            m.epoch, m.train_mae, m.val_mae
        );
    }
    if let Some(best) = fitted.best_epoch {
        println!("best validation epoch {best}");
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fitted.model.save(&a.out)?;
    let metrics = a
        .metrics
        .clone()
        .unwrap_or_else(|| with_suffix(&a.out, ".metrics.csv"));
    write_metrics_csv(&fitted.log, &metrics)?;

    let mut m = RunManifest::new("train");
    m.config = a.config.clone();
    m.inputs = vec![a.data.clone()];
    m.outputs = vec![a.out.clone(), with_suffix(&a.out, ".json"), metrics];
    m.seed = Some(cfg.seed);
    m.finish(&manifest.unwrap_or_else(|| default_path(&a.out)))?;
    Ok(())
}

pub fn eval(a: &EvalArgs, manifest: Option<PathBuf>) -> Result<()> {
    let seed = resolve_seed(a.seed, 0)?;
    let split = parse_split(&a.split)?;
    let rules = Rules::load(a.rules.as_deref())?;
    let episodes = labeled_split(&a.data, split, &rules)?;
    if episodes.is_empty() {
        return Err(usage(format!(
            "{}: split `{}` is empty",
            a.data.display(),
            a.split
        )));
    }

    let model = a.model.as_deref().map(ProgressModel::load).transpose()?;
    let predictor: Box<dyn Predictor + '_> = match (&model, a.baseline.as_deref()) {
        (Some(m), _) => Box::new(ModelPredictor {
            model: m,
            mask: a.mask,
        }),
        (None, Some("oracle")) => Box::new(Oracle),
        (None, Some("frame_counter")) => Box::new(FrameCounter::from_episodes(&labeled_split(
            &a.data,
            Split::Train,
            &rules,
        )?)),
        (None, Some(name)) => {
            let kind: BaselineKind = name.parse().map_err(|e: Error| usage(e.to_string()))?;
            let avg = if kind == BaselineKind::AverageIndex {
                Some(AverageIndexModel::fit_episodes(&labeled_split(
                    &a.data,
                    Split::Train,
                    &rules,
                )?)?)
            } else {
                None
            };
            Box::new(Baseline::new(kind, avg)?)
        }
        (None, None) => return Err(usage("either --model or --baseline is required")),
    };

    let report = evaluate(predictor.as_ref(), a.mask, &episodes, seed)?;
    if let Some(parent) = a.report.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(
        &a.report,
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    let csv_path = a.report.with_extension("csv");
    let csv_text = report.to_csv();
    write_atomic(&csv_path, csv_text.as_bytes())?;
    println!(
        "{} on {} {} episodes, mask {}",
        report.predictor, report.n_episodes, a.split, report.mask
    );
    print!("{csv_text}");

    let mut m = RunManifest::new("eval");
    m.inputs = std::iter::once(a.data.clone())
        .chain(a.model.clone())
        .collect();
    m.outputs = vec![a.report.clone(), csv_path];
    m.seed = Some(seed);
    m.finish(&manifest.unwrap_or_else(|| default_path(&a.report)))?;
    Ok(())
}

fn find_episode_dir(root: &Path, id: &str) -> Result<PathBuf> {
    let direct = episode_dir(root, id);
    if direct.join("manifest.json").is_file() {
        return Ok(direct);
    }
    for dir in episode_dirs(root)? {
        if read_manifest(&dir)?.id == id {
            return Ok(dir);
        }
    }
    Err(usage(format!(
        "episode `{id}` not found under {}",
        root.display()
    )))
}

pub fn plot(a: &PlotArgs, manifest: Option<PathBuf>) -> Result<()> {
    let rules = Rules::load(a.rules.as_deref())?;
    let dir = find_episode_dir(&a.data, &a.episode)?;
    let ep = load_episode(&dir)?;
    let rule = rules.get(&ep.action)?.cloned();
    let labeled = LabeledEpisode::new(ep, rule.as_ref())?;
    let span = labeled.full_span();

    let mut curves = Vec::new();
    for (path, base) in [(&a.model, "prediction"), (&a.model2, "prediction2")] {
        let Some(path) = path else { continue };
        let model = ProgressModel::load(path)?;
        for &mask in &a.masks {
            let frames = labeled.episode.view_frames(mask, &span.frames)?;
            let values = model.run_sequence(&frames, mask, Mode::Eval)?;
            let name = if a.masks.len() == 1 {
                base.to_string()
            } else {
                format!("{base}[{mask}]")
            };
            curves.push(Curve { name, values });
        }
    }
    if a.oracle {
        curves.push(Curve {
            name: "oracle".into(),
            values: span.labels.clone(),
        });
    }

    let title = format!("{} ({})", labeled.episode.id, labeled.episode.action);
    let svg = plot::to_svg(&title, &span.frames, &span.labels, &curves);
    let csv_path = a.out.with_extension("csv");
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    write_atomic(&a.out, svg.as_bytes())?;
    write_atomic(
        &csv_path,
        plot::to_csv(&span.frames, &span.labels, &curves).as_bytes(),
    )?;
    println!(
        "{} frames, {} curves -> {}, {}",
        span.len(),
        curves.len(),
        a.out.display(),
        csv_path.display()
    );

    let mut m = RunManifest::new("plot");
    m.inputs = std::iter::once(dir)
        .chain(a.model.clone())
        .chain(a.model2.clone())
        .collect();
    m.outputs = vec![a.out.clone(), csv_path];
    m.finish(&manifest.unwrap_or_else(|| default_path(&a.out)))?;
    Ok(())
}
