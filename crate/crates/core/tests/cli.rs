//! End-to-end runs of the `funnel` binary on a tiny model.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
n_layers = 4
d_model = 8
n_heads = 2
head_dim = 4
d_ff = 16
vocab_size = 9
max_seq = 8
[model.pooler]
n_pool_heads = 2
n_pool_layers = 1
[train]
max_steps = 10
warmup_steps = 2
batch_size = 4
eval_batch_size = 16
[data]
n_train = 32
n_eval = 16
[sweep]
layers = [0, 2, 4]
seeds = 2
[bench]
layers = [0, 2]
n_warmup = 1
n_reps = 5
"#;

fn funnel(dir: &Path, args: &[&str]) -> Output {
    let config = dir.join("tiny.toml");
    if !config.exists() {
        fs::write(&config, TINY).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_funnel"))
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(dir)
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn csv_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

const RUN_HEADER: &str = "scenario,funnel_layer,recovery_op,task,seed,steps,metric_name,metric_value,flops_savings,latency_median_ms";
const COST_HEADER: &str = "funnel_layer,recovery_op,seq_len,flops_total,flops_savings,latency_median_ms,latency_savings";

#[test]
fn bad_arguments_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        &["train", "--layers", "3"][..],
        &["train", "--layers", "6"],
        &["flops", "--recovery", "median"],
        &["sweep-recovery-op", "--task", "sentence"],
        &["no-such-command"],
    ] {
        let out = funnel(tmp.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
}

#[test]
fn bad_inputs_exit_with_code_3() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.conll");
    let out = funnel(tmp.path(), &["train", "--layers", "0", "--data", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let out = funnel(tmp.path(), &["eval"]);
    assert_eq!(out.status.code(), Some(3), "eval without a checkpoint");
    let broken = tmp.path().join("broken.conll");
    fs::write(&broken, "EU\n").unwrap();
    let out = funnel(tmp.path(), &["train", "--layers", "0", "--data", broken.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    fs::write(&config, "[train]\nmax_step = 10\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_funnel"))
        .arg("--config")
        .arg(&config)
        .arg("flops")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn layer_zero_sweep_writes_one_row_per_seed() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&funnel(tmp.path(), &["sweep-funnel-layer", "--layers", "0", "--seeds", "3"]));
    let lines = csv_lines(&tmp.path().join("sweep_funnel_layer.csv"));
    assert_eq!(lines[0], RUN_HEADER);
    assert_eq!(lines.len(), 1 + 3);
    let seeds: Vec<&str> = lines[1..].iter().map(|l| l.split(',').nth(4).unwrap()).collect();
    assert_eq!(seeds, ["0", "1", "2"]);
    let plot = csv_lines(&tmp.path().join("sweep_funnel_layer_plot.csv"));
    assert_eq!(plot.len(), 2);
}

#[test]
fn recovery_sweep_covers_every_op_layer_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&funnel(
        tmp.path(),
        &["sweep-recovery-op", "--task", "token", "--layers", "0,2,4", "--seeds", "2"],
    ));
    let lines = csv_lines(&tmp.path().join("sweep_recovery_op.csv"));
    assert_eq!(lines[0], RUN_HEADER);
    assert_eq!(lines.len(), 1 + 6 * 3 * 2);
    for op in ["sum_first", "sum_last", "sum_prev_max", "sum_prev_avg", "avg_last", "max_last"] {
        assert!(stdout.contains(op), "{op} missing from summary");
        assert_eq!(lines.iter().filter(|l| l.split(',').nth(2) == Some(op)).count(), 6);
    }
}

#[test]
fn flops_and_bench_share_the_cost_header() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&funnel(tmp.path(), &["flops"]));
    let flops = csv_lines(&tmp.path().join("flops.csv"));
    assert_eq!(flops[0], COST_HEADER);
    assert_eq!(flops.len(), 1 + 2);
    ok(&funnel(tmp.path(), &["bench"]));
    let bench = csv_lines(&tmp.path().join("bench.csv"));
    assert_eq!(bench[0], COST_HEADER);
    assert_eq!(bench.len(), 1 + 2);
    for row in &bench[1..] {
        let median: f64 = row.split(',').nth(5).unwrap().parse().unwrap();
        assert!(median > 0.0);
    }
}

#[test]
fn eval_reproduces_the_training_metric() {
    let tmp = tempfile::tempdir().unwrap();
    let trained = ok(&funnel(tmp.path(), &["train", "--task", "token", "--layers", "2", "--recovery", "avg_last"]));
    assert!(tmp.path().join("model.ckpt").exists());
    assert!(tmp.path().join("train_report.json").exists());
    let evaluated = ok(&funnel(tmp.path(), &["eval", "--task", "token"]));
    assert!(trained.starts_with("f1="), "{trained}");
    assert_eq!(trained, evaluated);
}

#[test]
fn gen_data_writes_both_splits() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&funnel(tmp.path(), &["gen-data", "--task", "token"]));
    assert_eq!(stdout.trim(), "wrote train.txt (32 examples) and eval.txt (16 examples)");
    let train = csv_lines(&tmp.path().join("train.txt"));
    assert_eq!(train.len(), 32);
    assert!(train.iter().all(|l| l.split('\t').count() == 2));
}
