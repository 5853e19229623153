use std::path::Path;
use std::process::Command;

use qprune::nn::{Network, Target};
use qprune::pipeline::{BatchSampler, Targets};
use qprune_harness::checkpoint::Checkpoint;
use qprune_harness::config::ExperimentConfig;
use qprune_harness::runner::{self, RunOptions, CHECKPOINT_FILE, METRICS_FILE, SUMMARY_FILE};
use qprune_harness::sweep;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MLP: &str = r#"
task = "toy_classify"
seed = 3
steps = 120
batch_size = 16
lr = 0.1

[data]
n_samples = 200
noise = 0.05

[[layers]]
kind = "dense"
in_features = 2
out_features = 12

[[layers]]
kind = "relu"

[[layers]]
kind = "dense"
in_features = 12
out_features = 12

[[layers]]
kind = "relu"

[[layers]]
kind = "dense"
in_features = 12
out_features = 2
"#;

const JOINT: &str = r#"
[wraps.2.weight_prune]
final_sparsity = 0.5
start_step = 10
interval = 10
repetitions = 3

[wraps.2.weight_quantize]
bits = 8
quantize_step = 60

[wraps.2.feature_prune]
final_sparsity = 0.25
start_step = 10
interval = 20
repetitions = 2
window = 4

[wraps.2.feature_quantize]
bits = 6
"#;

fn config(extra: &str, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(&format!("{MLP}{extra}")).unwrap();
    cfg.out = out.to_path_buf();
    cfg
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

#[test]
fn identical_runs_write_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = config(JOINT, &dir.path().join("a"));
    let b = config(JOINT, &dir.path().join("b"));
    let sa = runner::run(&a).unwrap();
    let sb = runner::run(&b).unwrap();
    assert_eq!(sa, sb);
    assert_eq!(read(a.out.join(METRICS_FILE)), read(b.out.join(METRICS_FILE)));
    assert_eq!(read(a.out.join(CHECKPOINT_FILE)), read(b.out.join(CHECKPOINT_FILE)));
}

#[test]
fn metrics_csv_has_one_row_per_step_and_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(JOINT, dir.path());
    runner::run(&cfg).unwrap();
    let rows = runner::read_metrics(&cfg.out.join(METRICS_FILE)).unwrap();
    // three dense layers, weight and feature rows each
    assert_eq!(rows.len(), 120 * 6);
    let header = String::from_utf8(read(cfg.out.join(METRICS_FILE))).unwrap();
    assert!(header.starts_with("step,loss,metric,layer_id,grad_norm,sparsity,d_bits,footprint_mb,pd\n"));
    for r in &rows {
        assert!((r.pd * r.footprint_mb - r.metric).abs() <= 1e-12 * r.metric.abs().max(1.0));
    }
    let last_w = rows.iter().rev().find(|r| r.layer_id == "2/w").unwrap();
    assert_eq!(last_w.sparsity, 0.5);
    assert!(last_w.d_bits.is_some());
    let early_f = rows.iter().find(|r| r.layer_id == "2/f").unwrap();
    assert_eq!(early_f.d_bits, None);
}

#[test]
fn checkpoint_save_load_save_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(JOINT, dir.path());
    runner::run_with(&cfg, RunOptions { resume: false, stop_at: Some(45) }).unwrap();
    let path = cfg.out.join(CHECKPOINT_FILE);
    let bytes = read(&path);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(ckpt.step, 45);
    assert_eq!(ckpt.to_bytes(), bytes);

    let trainer = ckpt.restore(&cfg.plan()).unwrap();
    assert_eq!(Checkpoint::capture(&trainer).to_bytes(), bytes);
    let fp = trainer.model().operators()[2].feature_prune.as_ref().unwrap();
    assert_eq!(fp.window().len(), 4);
    assert!(fp.mask().is_some());
}

#[test]
fn checkpoint_rejects_truncation_and_mismatched_configs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(JOINT, dir.path());
    runner::run_with(&cfg, RunOptions { resume: false, stop_at: Some(20) }).unwrap();
    let bytes = read(cfg.out.join(CHECKPOINT_FILE));
    for cut in [5, 20, bytes.len() / 2, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());

    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let bare = config("", dir.path());
    assert!(ckpt.restore(&bare.plan()).is_err());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = config(JOINT, &dir.path().join("full"));
    let full_summary = runner::run(&full).unwrap();

    let mut split = config(JOINT, &dir.path().join("split"));
    split.checkpoint_every = 25;
    assert!(runner::run_with(&split, RunOptions { resume: false, stop_at: Some(37) }).unwrap().is_none());
    // metrics past the last checkpoint are discarded on resume
    let resumed = runner::run_with(&split, RunOptions { resume: true, stop_at: None }).unwrap().unwrap();

    assert_eq!(resumed, full_summary);
    for file in [METRICS_FILE, CHECKPOINT_FILE, SUMMARY_FILE] {
        assert_eq!(read(full.out.join(file)), read(split.out.join(file)), "{file}");
    }
}

#[test]
fn empty_wrap_run_matches_bare_network() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("", dir.path());
    let summary = runner::run(&cfg).unwrap();
    assert_eq!(summary.order, None);

    let data = cfg.dataset().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut net = Network::new(cfg.layers.clone(), &mut rng).unwrap();
    let mut sampler = BatchSampler::new(cfg.seed);
    for _ in 0..cfg.steps {
        let idx = sampler.next_batch(data.train.len(), cfg.batch_size);
        let (x, t) = data.train.batch(&idx);
        let Targets::Classes(c) = &t else { unreachable!() };
        net.train_step(&x, Target::Classes(c), cfg.plan().loss, cfg.lr).unwrap();
    }
    let logits = net.predict(&data.eval.inputs).unwrap();
    let Targets::Classes(labels) = &data.eval.targets else { unreachable!() };
    let acc = qprune::metrics::accuracy(&logits, labels).unwrap();
    assert_eq!(summary.final_metric, acc);
}

#[test]
fn order_sweep_labels_mirrored_variants() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(JOINT, dir.path());
    let (pq, qp) = sweep::mirrored_variants(&cfg).unwrap();
    assert_eq!(qprune::pipeline::derive_order(&pq.plan()).unwrap().to_string(), "PruneThenQuantize");
    assert_eq!(qprune::pipeline::derive_order(&qp.plan()).unwrap().to_string(), "QuantizeThenPrune");

    let report = sweep::sweep_order(&cfg, 2).unwrap();
    let labels: Vec<_> = report.columns.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(labels, ["P-Q", "Q-P"]);
    assert_eq!(report.columns[0].summary.order.as_deref(), Some("PruneThenQuantize"));
    assert_eq!(report.columns[1].summary.order.as_deref(), Some("QuantizeThenPrune"));
    for col in &report.columns {
        let s = &col.summary;
        for e in &s.achieved_sparsity {
            assert_eq!(e.achieved, e.target, "{} {} {}", col.label, e.layer, e.tensor);
        }
        assert!((s.performance_density * s.footprint.total_mb - s.final_metric).abs() <= 1e-12 * s.final_metric);
    }
    assert!(dir.path().join(sweep::REPORT_JSON).exists());

    let swapped = sweep::Report {
        columns: report.columns.iter().rev().cloned().collect(),
    };
    let text = sweep::render(&swapped);
    let header = text.lines().next().unwrap();
    assert!(header.find("Q-P").unwrap() < header.find("P-Q").unwrap());

    let collected = sweep::collect(dir.path()).unwrap();
    let names: Vec<_> = collected.columns.iter().map(|c| c.label.as_str()).collect();
    assert_eq!(names, ["pq", "qp"]);
}

#[test]
fn sweep_requires_both_operator_families() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("[wraps.2.weight_quantize]\nbits = 8\n", dir.path());
    assert!(sweep::mirrored_variants(&cfg).is_err());
}

fn cli(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_qprune")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let good = dir.path().join("good.toml");
    std::fs::write(&good, format!("{MLP}{JOINT}")).unwrap();
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();

    let (code, stdout, _) = cli(&["train", good.to_str().unwrap(), "--out", out_s, "--seed", "9"]);
    assert_eq!(code, 0);
    let summary: runner::Summary = serde_json::from_str(&stdout).unwrap();
    assert_eq!(summary.seed, 9);
    assert!(out.join(SUMMARY_FILE).exists());

    let ckpt = out.join(CHECKPOINT_FILE);
    let (code, stdout, _) = cli(&["eval", ckpt.to_str().unwrap(), good.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(code, 0);
    assert!(stdout.contains("\"step\": 120"), "{stdout}");

    let (code, stdout, _) = cli(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(code, 0);
    assert!(stdout.contains("| run |"), "{stdout}");

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, MLP.replace("lr = 0.1", "lr = -1.0")).unwrap();
    let (code, _, stderr) = cli(&["train", bad.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code, 1);
    assert!(stderr.contains("`lr`") && stderr.contains("line 6"), "{stderr}");

    let (code, _, _) = cli(&["train", dir.path().join("missing.toml").to_str().unwrap()]);
    assert_eq!(code, 1);
    let (code, _, _) = cli(&["frobnicate"]);
    assert_eq!(code, 1);

    let diverging = dir.path().join("nan.toml");
    std::fs::write(&diverging, MLP.replace("lr = 0.1", "lr = 1e50")).unwrap();
    let (code, _, stderr) = cli(&["train", diverging.to_str().unwrap(), "--out", out_s]);
    assert_eq!(code, 2, "{stderr}");
    assert!(stderr.contains("step"), "{stderr}");
}
