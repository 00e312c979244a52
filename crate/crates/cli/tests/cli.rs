use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use progressd_cli::manifest::{sha256_file, RunManifest};
use progressd_core::dataset::{load_split, Split};
use progressd_core::eval::{camera_ablation, EvalReport};
use progressd_core::{LabeledEpisode, ProgressModel, TrainConfig, ViewMask};
/// Every file under `root`, relative, sorted.
fn files(root: &Path) -> Vec<PathBuf> {
    walkdir::WalkDir::new(root)
        .sort_by_file_name()
        .into_iter()
        .map(|e| e.unwrap())
        .filter(|e| e.file_type().is_file())
        .map(|e| e.path().strip_prefix(root).unwrap().to_path_buf())
        .collect()
}

const SYNTH: &str = r#"{
    "seed": 5,
    "n_episodes": 10,
    "duration_range": [10, 20],
    "idle_prefix_range": [2, 4],
    "idle_suffix_range": [5, 7],
    "split": [0.6, 0.2, 0.2]
}"#;

const TRAIN: &str = r#"{
    "epochs": 2,
    "seed": 3,
    "model": {
        "backbone": {"embed_dim": 8, "depth": 1, "heads": 2},
        "view_embed_dim": 16,
        "fusion_dim": 8,
        "lstm_hidden": 8
    }
}"#;

fn progressd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_progressd"))
        .current_dir(dir)
        .env_remove("PROGRESSD_SEED")
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

/// Workspace with `synth.json`, `train.json` and a generated dataset in `data/`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), SYNTH).unwrap();
    fs::write(dir.path().join("train.json"), TRAIN).unwrap();
    ok(&progressd(
        dir.path(),
        &["generate", "--config", "synth.json", "--out", "data"],
    ));
    dir
}

fn read_manifest(path: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn generate_reports_counts_and_is_byte_reproducible() {
    let a = workspace();
    let b = workspace();
    let fa = files(&a.path().join("data"));
    assert_eq!(fa, files(&b.path().join("data")));
    assert!(fa.len() > 10);
    for f in &fa {
        if f == Path::new("run.json") {
            continue;
        }
        assert_eq!(
            fs::read(a.path().join("data").join(f)).unwrap(),
            fs::read(b.path().join("data").join(f)).unwrap(),
            "{}",
            f.display()
        );
    }
    let ma = read_manifest(&a.path().join("data/run.json"));
    let mb = read_manifest(&b.path().join("data/run.json"));
    assert_eq!(ma.artifacts, mb.artifacts);
    assert_eq!(ma.seed, Some(5));
    let ds = fs::read_to_string(a.path().join("data/dataset.json")).unwrap();
    assert!(ds.contains("\"ep0009\""));
    for (path, hash) in &ma.artifacts {
        assert_eq!(&sha256_file(&a.path().join(path)).unwrap(), hash);
    }
}

#[test]
fn generate_rejects_bad_config_and_existing_dataset() {
    let dir = workspace();
    fs::write(dir.path().join("bad.json"), r#"{"noise_level": -1.0}"#).unwrap();
    let out = progressd(
        dir.path(),
        &["generate", "--config", "bad.json", "--out", "other"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("noise_level"));

    fs::write(dir.path().join("typo.json"), r#"{"n_episodez": 3}"#).unwrap();
    let out = progressd(
        dir.path(),
        &["generate", "--config", "typo.json", "--out", "other"],
    );
    assert_eq!(out.status.code(), Some(2));

    let out = progressd(
        dir.path(),
        &["generate", "--config", "synth.json", "--out", "data"],
    );
    assert_eq!(out.status.code(), Some(2));
    ok(&progressd(
        dir.path(),
        &[
            "generate",
            "--config",
            "synth.json",
            "--out",
            "data",
            "--force",
        ],
    ));

    let out = progressd(dir.path(), &["generate", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_precedence_is_flag_then_env_then_file() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("synth.json"), SYNTH).unwrap();
    let seed_of = |out: &str| read_manifest(&dir.path().join(out).join("run.json")).seed;

    ok(&progressd(
        dir.path(),
        &["generate", "--config", "synth.json", "--out", "file"],
    ));
    assert_eq!(seed_of("file"), Some(5));

    let env = Command::new(env!("CARGO_BIN_EXE_progressd"))
        .current_dir(dir.path())
        .env("PROGRESSD_SEED", "77")
        .args(["generate", "--config", "synth.json", "--out", "env"])
        .output()
        .unwrap();
    ok(&env);
    assert_eq!(seed_of("env"), Some(77));

    let flag = Command::new(env!("CARGO_BIN_EXE_progressd"))
        .current_dir(dir.path())
        .env("PROGRESSD_SEED", "77")
        .args([
            "generate",
            "--config",
            "synth.json",
            "--out",
            "flag",
            "--seed",
            "9",
        ])
        .output()
        .unwrap();
    ok(&flag);
    assert_eq!(seed_of("flag"), Some(9));

    let bad = Command::new(env!("CARGO_BIN_EXE_progressd"))
        .current_dir(dir.path())
        .env("PROGRESSD_SEED", "many")
        .args(["generate", "--config", "synth.json", "--out", "bad"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn segment_recovers_stored_boundaries() {
    let dir = workspace();
    let stdout = ok(&progressd(
        dir.path(),
        &["segment", "--episodes", "data", "--write-boundaries"],
    ));
    assert!(stdout.contains("10 of 10 agree"), "{stdout}");
    let report = fs::read_to_string(dir.path().join("data/boundaries.csv")).unwrap();
    let rows: Vec<&str> = report.lines().skip(1).collect();
    assert_eq!(rows.len(), 10);
    assert!(rows
        .iter()
        .all(|r| r.contains(",ok,") && r.ends_with(",true")));

    // an explicit single rule applies to every episode
    let rule = r#"{"start": [{"channel": "left_waist_velocity", "op": ">", "threshold": 0.1}],
                   "end": [{"channel": "right_gripper_effort", "op": "<", "threshold": -0.5}]}"#;
    fs::write(dir.path().join("rule.json"), rule).unwrap();
    ok(&progressd(
        dir.path(),
        &[
            "segment",
            "--episodes",
            "data",
            "--rules",
            "rule.json",
            "--report",
            "r.csv",
        ],
    ));
    assert_eq!(
        fs::read_to_string(dir.path().join("r.csv"))
            .unwrap()
            .lines()
            .count(),
        11
    );
}

#[test]
fn segment_rejects_unknown_channels() {
    let dir = workspace();
    let rule = r#"{"start": [{"channel": "left_tail_velocity", "op": ">", "threshold": 0.1}],
                   "end": [{"channel": "right_waist_velocity", "op": "<", "threshold": 0.1}]}"#;
    fs::write(dir.path().join("rule.json"), rule).unwrap();
    let out = progressd(
        dir.path(),
        &["segment", "--episodes", "data", "--rules", "rule.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("left_tail_velocity"));
}

fn train_config() -> TrainConfig {
    TrainConfig::from_json(TRAIN).unwrap()
}

#[test]
fn zero_epochs_writes_the_initial_model() {
    let dir = workspace();
    ok(&progressd(
        dir.path(),
        &[
            "train",
            "--data",
            "data",
            "--config",
            "train.json",
            "--out",
            "m.ckpt",
            "--epochs",
            "0",
        ],
    ));
    let saved = ProgressModel::load(&dir.path().join("m.ckpt")).unwrap();
    let cfg = train_config();
    let init = ProgressModel::new(cfg.model, cfg.seed).unwrap();
    for (a, b) in saved.params.iter().zip(init.params.iter()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
    let metrics = fs::read_to_string(dir.path().join("m.ckpt.metrics.csv")).unwrap();
    assert_eq!(metrics, "epoch,train_mae,val_mae\n");
}

#[test]
fn training_is_reproducible_and_eval_matches_the_library() {
    let dir = workspace();
    let train = |out: &str| {
        ok(&progressd(
            dir.path(),
            &[
                "train",
                "--data",
                "data",
                "--config",
                "train.json",
                "--out",
                out,
            ],
        ));
    };
    train("a.ckpt");
    train("b.ckpt");
    for suffix in ["", ".json", ".metrics.csv"] {
        assert_eq!(
            fs::read(dir.path().join(format!("a.ckpt{suffix}"))).unwrap(),
            fs::read(dir.path().join(format!("b.ckpt{suffix}"))).unwrap(),
            "a.ckpt{suffix}"
        );
    }
    assert_eq!(
        fs::read_to_string(dir.path().join("a.ckpt.metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    ok(&progressd(
        dir.path(),
        &[
            "eval",
            "--data",
            "data",
            "--model",
            "a.ckpt",
            "--mask",
            "all",
            "--report",
            "eval.json",
            "--seed",
            "3",
        ],
    ));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    let csv = fs::read_to_string(dir.path().join("eval.csv")).unwrap();
    assert_eq!(csv, report.to_csv());
    let row: Vec<f64> = csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(row[..4], report.quartiles);
    assert_eq!(row[4], report.whole);

    // the same configuration trained through the library's ablation gives the same report
    let load = |s| -> Vec<LabeledEpisode> {
        load_split(&dir.path().join("data"), s)
            .unwrap()
            .into_iter()
            .map(|e| LabeledEpisode::new(e, None).unwrap())
            .collect()
    };
    let ablation = camera_ablation(
        &load(Split::Train),
        &load(Split::Val),
        &load(Split::Test),
        &train_config(),
        &[ViewMask::ALL],
    )
    .unwrap();
    let lib = &ablation[0].1;
    assert_eq!(lib.whole, report.whole);
    assert_eq!(lib.quartiles, report.quartiles);
    assert_eq!(lib.per_action, report.per_action);
    assert_eq!(lib.fingerprint, report.fingerprint);
}

#[test]
fn static_baseline_scores_a_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let synth =
        r#"{"seed": 1, "n_episodes": 12, "duration_range": [150, 250], "split": [0.5, 0.0, 0.5]}"#;
    fs::write(dir.path().join("synth.json"), synth).unwrap();
    ok(&progressd(
        dir.path(),
        &["generate", "--config", "synth.json", "--out", "data"],
    ));
    let stdout = ok(&progressd(
        dir.path(),
        &[
            "eval",
            "--data",
            "data",
            "--baseline",
            "static",
            "--report",
            "static.json",
        ],
    ));
    assert!(stdout.contains("static"));
    let report: EvalReport =
        serde_json::from_str(&fs::read_to_string(dir.path().join("static.json")).unwrap()).unwrap();
    assert!((report.whole - 25.0).abs() < 0.5, "{}", report.whole);
    assert_eq!(report.n_episodes, 6);

    let out = progressd(
        dir.path(),
        &[
            "eval",
            "--data",
            "data",
            "--baseline",
            "psychic",
            "--report",
            "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = progressd(
        dir.path(),
        &["eval", "--data", "data", "--report", "x.json"],
    );
    assert_eq!(out.status.code(), Some(2));
    let out = progressd(
        dir.path(),
        &[
            "eval",
            "--data",
            "data",
            "--model",
            "missing.ckpt",
            "--report",
            "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn plot_writes_parseable_svg_and_raw_series() {
    let dir = workspace();
    ok(&progressd(
        dir.path(),
        &[
            "train",
            "--data",
            "data",
            "--config",
            "train.json",
            "--out",
            "m.ckpt",
            "--epochs",
            "1",
        ],
    ));
    ok(&progressd(
        dir.path(),
        &[
            "plot",
            "--data",
            "data",
            "--model",
            "m.ckpt",
            "--model2",
            "m.ckpt",
            "--oracle",
            "--episode",
            "ep0003",
            "--out",
            "plots/curve.svg",
        ],
    ));
    let svg = fs::read_to_string(dir.path().join("plots/curve.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).unwrap();
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    let lines = doc
        .descendants()
        .filter(|n| n.has_tag_name("polyline"))
        .count();
    assert_eq!(lines, 4);

    let csv = fs::read_to_string(dir.path().join("plots/curve.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(
        rows.next().unwrap(),
        "frame,ground_truth,prediction,prediction2,oracle"
    );
    let rows: Vec<Vec<f64>> = rows
        .map(|r| r.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    let manifest: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("data/episodes/ep0003/manifest.json")).unwrap(),
    )
    .unwrap();
    let b = &manifest["boundaries"];
    let span = (b["t_e_frame"].as_u64().unwrap() - b["t_s_frame"].as_u64().unwrap() + 1) as usize;
    assert_eq!(rows.len(), span);
    let max_gap = rows.iter().map(|r| (r[4] - r[1]).abs()).fold(0.0, f64::max);
    assert_eq!(max_gap, 0.0);
    assert!(rows.iter().all(|r| r[2] == r[3]));
    assert_eq!(rows[0][0] as u64, b["t_s_frame"].as_u64().unwrap());

    let out = progressd(
        dir.path(),
        &[
            "plot",
            "--data",
            "data",
            "--oracle",
            "--episode",
            "nope",
            "--out",
            "x.svg",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn smoke_training_fits_the_time_budget() {
    let dir = tempfile::tempdir().unwrap();
    let synth = r#"{"seed": 2, "n_episodes": 20, "duration_range": [40, 120]}"#;
    fs::write(dir.path().join("synth.json"), synth).unwrap();
    fs::write(dir.path().join("train.json"), TRAIN).unwrap();
    ok(&progressd(
        dir.path(),
        &["generate", "--config", "synth.json", "--out", "data"],
    ));
    let start = Instant::now();
    ok(&progressd(
        dir.path(),
        &[
            "train",
            "--data",
            "data",
            "--config",
            "train.json",
            "--out",
            "m.ckpt",
            "--epochs",
            "5",
        ],
    ));
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs() < 300, "{elapsed:?}");
    let m = read_manifest(&dir.path().join("m.ckpt.run.json"));
    assert_eq!(m.subcommand, "train");
    assert_eq!(m.artifacts.len(), 3);
    assert_eq!(m.outputs[0], PathBuf::from("m.ckpt"));
}
