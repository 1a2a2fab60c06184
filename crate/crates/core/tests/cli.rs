//! End-to-end runs of the command-line interface.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::Parser;

use sparsehead::autodiff::Tensor;
use sparsehead::cli::{dispatch, run, Cli, DataSource, ExperimentConfig, SyntheticSource, EXIT_RUNTIME, EXIT_USAGE};
use sparsehead::datagen::{save_tds, AugmentationRule, Dataset, Mixing, WorldConfig};
use sparsehead::models::{read_checkpoint, EncoderSpec, HeadSpec};
use sparsehead::objectives::{SparsityConfig, SparsityMode};
use sparsehead::trainer::TrainConfig;

fn experiment(steps: usize) -> ExperimentConfig {
    let enc = EncoderSpec { input_dim: 12, hidden: vec![16], output_dim: 8, activation: Default::default() };
    let mut train = TrainConfig::new(enc, HeadSpec::linear(8, 8), AugmentationRule::latent(1.0));
    train.steps = steps;
    train.batch_size = 32;
    train.sparsity = SparsityConfig { lambda: 1e-2, mode: SparsityMode::Proximal, zero_threshold: 1e-8 };
    train.diag_samples = 128;
    ExperimentConfig {
        name: "cli".into(),
        data: DataSource::Synthetic(SyntheticSource {
            world: WorldConfig {
                n_subject: 3,
                n_nuisance: 3,
                obs_dim: 12,
                mixing: Mixing::Linear,
                n_classes: 3,
                shuffle_features: false,
            },
            world_seed: 2,
            n_train: 256,
            n_test: 200,
            sample_seed: 5,
            tasks: None,
        }),
        train,
        out_dir: None,
    }
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Runs a command in-process and returns its stdout.
fn capture(args: &[&str]) -> String {
    let cli = Cli::try_parse_from(std::iter::once("sparsehead").chain(args.iter().copied())).unwrap();
    let mut out = Vec::new();
    dispatch(&cli, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(run(["sparsehead", "train", "--out", s(&out)]), EXIT_USAGE);
    let status = Command::new(env!("CARGO_BIN_EXE_sparsehead"))
        .args(["train", "--config", s(&tmp.path().join("absent.json")), "--out", s(&out)])
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&status.stderr).contains("absent.json"));
}

#[test]
fn malformed_configs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, "{").unwrap();
    assert_eq!(run(["sparsehead", "train", "--config", s(&bad), "--out", s(&out)]), EXIT_USAGE);

    let mut json: serde_json::Value = serde_json::to_value(experiment(10)).unwrap();
    json["train"]["unknown_knob"] = serde_json::json!(1);
    fs::write(&bad, json.to_string()).unwrap();
    assert_eq!(run(["sparsehead", "train", "--config", s(&bad), "--out", s(&out)]), EXIT_USAGE);

    let mut cfg = experiment(10);
    cfg.train.head = HeadSpec::identity(8);
    let path = write_config(tmp.path(), &cfg);
    assert_eq!(run(["sparsehead", "train", "--config", s(&path), "--out", s(&out)]), EXIT_USAGE);

    assert_eq!(run(["sparsehead", "no-such-command"]), EXIT_USAGE);
}

#[test]
fn train_synth_spectrum_eval_align() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &experiment(120));
    let run_dir = tmp.path().join("run");
    let data_dir = tmp.path().join("data");
    assert_eq!(run(["sparsehead", "train", "--config", s(&cfg), "--out", s(&run_dir)]), 0);
    for f in ["model.sphd", "metrics.jsonl", "spectrum.csv"] {
        assert!(run_dir.join(f).is_file(), "{f} missing");
    }
    let metrics = fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.last().unwrap()["step"], 120);
    assert!(lines.iter().all(|l| l["config_hash"].is_string() && l["loss_infonce_per_anchor"].is_number()));

    assert_eq!(run(["sparsehead", "synth", "--config", s(&cfg), "--out", s(&data_dir)]), 0);
    let (train_tds, test_tds) = (data_dir.join("train.tds"), data_dir.join("test.tds"));
    let checkpoint = run_dir.join("model.sphd");
    let csv = tmp.path().join("spec.csv");
    assert_eq!(
        run(["sparsehead", "spectrum", "--checkpoint", s(&checkpoint), "--data", s(&test_tds), "--csv", s(&csv)]),
        0
    );
    let spectrum = fs::read_to_string(&csv).unwrap();
    assert!(spectrum.starts_with("index,sigma_r,log10_sigma_r,sigma_z,log10_sigma_z"));
    assert_eq!(spectrum.lines().count(), 9);

    let before = fs::read(&checkpoint).unwrap();
    let checksum = read_checkpoint(before.as_slice()).unwrap().encoder_checksum();
    let eval: serde_json::Value = serde_json::from_str(&capture(&[
        "eval",
        "--checkpoint",
        s(&checkpoint),
        "--train",
        s(&train_tds),
        "--test",
        s(&test_tds),
    ]))
    .unwrap();
    let linear = eval["linear_acc"].as_f64().unwrap();
    let knn = eval["knn_acc"].as_f64().unwrap();
    assert!(linear > 1.0 / 3.0 + 0.1, "probe accuracy {linear}");
    assert!((0.0..=1.0).contains(&knn));
    // Evaluation never touches the encoder.
    let after = fs::read(&checkpoint).unwrap();
    assert_eq!(before, after);
    assert_eq!(read_checkpoint(after.as_slice()).unwrap().encoder_checksum(), checksum);

    let align: serde_json::Value =
        serde_json::from_str(&capture(&["align", "--config", s(&cfg), "--checkpoint", s(&checkpoint)])).unwrap();
    let mcc = align["mcc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&mcc));
    assert_eq!(align["samples"], 200);
    assert_eq!(align["assignment"].as_array().unwrap().len(), 6);
}

#[test]
fn seed_override_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &experiment(30));
    let out = |name: &str, seed: &str| {
        let dir = tmp.path().join(name);
        assert_eq!(run(["sparsehead", "train", "--config", s(&cfg), "--seed", seed, "--out", s(&dir)]), 0);
        fs::read(dir.join("model.sphd")).unwrap()
    };
    assert_eq!(out("a", "1"), out("b", "1"));
    assert_ne!(out("a", "1"), out("c", "2"));
}

#[test]
fn concentration_csv() {
    let text = capture(&["concentration", "--dims", "4,16", "--n", "20", "--trials", "3"]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("d,mean_M"));
    let rows: Vec<(usize, f64)> = lines
        .map(|l| {
            let (d, m) = l.split_once(',').unwrap();
            (d.parse().unwrap(), m.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[1].1 < rows[0].1);
    assert_eq!(run(["sparsehead", "concentration", "--dims", "16,4"]), EXIT_USAGE);
}

#[test]
fn single_class_eval_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &experiment(10));
    let run_dir = tmp.path().join("run");
    assert_eq!(run(["sparsehead", "train", "--config", s(&cfg), "--out", s(&run_dir)]), 0);
    let x = Tensor::from_rows(4, 12, (0..48).map(|v| v as f64 * 0.1).collect()).unwrap();
    let ds = Dataset { features: x, labels: Some(vec![0; 4]), n_classes: 2, latents: None, layout: None };
    let tds = tmp.path().join("one.tds");
    save_tds(&ds, &tds).unwrap();
    let code = run([
        "sparsehead",
        "eval",
        "--checkpoint",
        s(&run_dir.join("model.sphd")),
        "--train",
        s(&tds),
        "--test",
        s(&tds),
        "--k",
        "1",
    ]);
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn shipped_example_config_is_valid() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.json");
    let cfg = ExperimentConfig::load(&path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg, serde_json::from_value(serde_json::to_value(&cfg).unwrap()).unwrap());
}
