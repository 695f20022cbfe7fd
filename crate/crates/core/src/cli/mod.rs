//! The `funnel` command-line experiment runner.

mod config;
mod records;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

pub use config::{task_data, BenchConfig, ExperimentConfig, SweepConfig, TaskConfig, TaskName};
pub use records::{
    aggregate, mean_std, write_csv, CostRecord, PlotPoint, RunRecord, COST_COLUMNS, RUN_COLUMNS,
};

use crate::cost_model::{flops_estimate, wall_clock_profile};
use crate::error::{Error, Result};
use crate::funnel_ops::{FunnelConfig, Recovery, RecoveryOp};
use crate::model::{load_checkpoint, save_checkpoint, HeadKind};
use crate::tasks::{evaluate, run_scenario, Dataset, Scenario, Target};

#[derive(Debug, Parser)]
#[command(name = "funnel", version, about = "Funnel pooling experiments on a toy transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

/// Flags shared by every subcommand; they override the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct Flags {
    /// TOML experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; sweeps use seeds `seed..seed + seeds`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Seeds per sweep point.
    #[arg(long, global = true)]
    pub seeds: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated funnel layers. For training and sweeps 0 is the
    /// unfunneled baseline; for bench and flops 0 pools before layer 0.
    #[arg(long, global = true, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Recovery: none, tile_only, sum_first, sum_last, sum_prev_max,
    /// sum_prev_avg, avg_last or max_last.
    #[arg(long, global = true, value_parser = parse_recovery)]
    pub recovery: Option<Recovery>,
    /// Scenario: funnel_aware, funnel_finetune or inference_only.
    #[arg(long, global = true, value_parser = parse_scenario)]
    pub scenario: Option<Scenario>,
    /// Fine-tuning steps.
    #[arg(long, global = true)]
    pub steps: Option<usize>,
    /// Task: sentence, token or conll.
    #[arg(long, global = true, value_parser = parse_task)]
    pub task: Option<TaskName>,
    /// CoNLL training file (implies --task conll).
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Checkpoint read by `eval` (default OUT/model.ckpt).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

fn parse_recovery(s: &str) -> Result<Recovery> {
    s.parse()
}

fn parse_scenario(s: &str) -> Result<Scenario> {
    s.parse()
}

fn parse_task(s: &str) -> Result<TaskName> {
    s.parse()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the generated train and eval sets as text.
    GenData,
    /// Train one configuration and save a checkpoint.
    Train,
    /// Evaluate a checkpoint on the held-out set.
    Eval,
    /// Train and evaluate every layer of the grid at every seed.
    SweepFunnelLayer,
    /// Cross every recovery op with the layer grid (token tasks only).
    SweepRecoveryOp,
    /// Analytic FLOPs and measured latency over the layer grid.
    Bench,
    /// Analytic FLOPs over the layer grid.
    Flops,
}

/// Config file merged with the command-line flags.
#[derive(Clone, Debug)]
pub struct Settings {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    /// `--task` was given explicitly.
    pub task_flag: bool,
    pub checkpoint: Option<PathBuf>,
}

impl Settings {
    pub fn resolve(flags: &Flags) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = flags.seed {
            cfg.train.seed = s;
        }
        if let Some(n) = flags.seeds {
            cfg.sweep.seeds = n;
        }
        if let Some(l) = &flags.layers {
            cfg.sweep.layers = l.clone();
            cfg.bench.layers = l.clone();
        }
        if let Some(r) = flags.recovery {
            cfg.sweep.recovery = r;
        }
        if let Some(s) = flags.scenario {
            cfg.sweep.scenario = s;
        }
        if let Some(n) = flags.steps {
            cfg.train.max_steps = n;
            if cfg.train.warmup_steps >= n {
                cfg.train.warmup_steps = n / 20;
            }
        }
        if let Some(p) = &flags.data {
            cfg.data.conll_path = Some(p.clone());
            cfg.data.task = TaskName::Conll;
        }
        if let Some(t) = flags.task {
            cfg.data.task = t;
        }
        if cfg.sweep.seeds == 0 {
            return Err(Error::Usage("--seeds must be positive".into()));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(Self {
            cfg,
            out: flags.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            task_flag: flags.task.is_some(),
            checkpoint: flags.checkpoint.clone(),
        })
    }

    fn seeds(&self) -> impl Iterator<Item = u64> + Clone {
        let base = self.cfg.train.seed;
        (0..self.cfg.sweep.seeds as u64).map(move |i| base + i)
    }
}

/// Funnel of a training sweep point; layer 0 is the unfunneled baseline.
pub fn sweep_funnel(n_layers: usize, layer: usize, recovery: Recovery) -> Result<FunnelConfig> {
    if layer == 0 {
        Ok(FunnelConfig::no_funnel(n_layers).with_recovery(recovery))
    } else {
        FunnelConfig::at_layer(n_layers, layer, recovery)
    }
}

fn check_grid(layers: &[usize], n_layers: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Usage("the layer grid is empty".into()));
    }
    if let Some(bad) = layers.iter().find(|&&l| l % 2 != 0 || l > n_layers) {
        return Err(Error::Usage(format!(
            "layer {bad} is not in the grid 0, 2, ..., {n_layers}"
        )));
    }
    Ok(())
}

/// Trains and evaluates one (layer, recovery, seed) point.
pub fn run_point(
    s: &Settings,
    scenario: Scenario,
    layer: usize,
    recovery: Recovery,
    seed: u64,
) -> Result<RunRecord> {
    let (mc, train, eval) = task_data(&s.cfg, seed)?;
    let fc = sweep_funnel(mc.n_layers, layer, recovery)?;
    let mut tc = s.cfg.train.clone();
    tc.seed = seed;
    let outcome = run_scenario(scenario, &mc, &fc, &tc, &train, &eval)?;
    let flops = flops_estimate(&mc, &fc, train.seq, train.kind)?;
    Ok(RunRecord {
        scenario: scenario.name().into(),
        funnel_layer: layer,
        recovery_op: recovery.name().into(),
        task: s.cfg.data.task.name().into(),
        seed,
        steps: tc.max_steps,
        metric_name: outcome.metrics.name.into(),
        metric_value: outcome.metrics.value,
        flops_savings: flops.savings_ratio,
        latency_median_ms: None,
    })
}

fn run_grid(s: &Settings, points: Vec<(usize, Recovery, u64)>) -> Result<Vec<RunRecord>> {
    let scenario = s.cfg.sweep.scenario;
    points
        .into_par_iter()
        .map(|(layer, rec, seed)| run_point(s, scenario, layer, rec, seed))
        .collect()
}

fn write_sweep(s: &Settings, stem: &str, runs: &[RunRecord]) -> Result<Vec<PlotPoint>> {
    write_csv(&s.out.join(format!("{stem}.csv")), runs, &RUN_COLUMNS)?;
    let plot = aggregate(runs);
    write_csv(
        &s.out.join(format!("{stem}_plot.csv")),
        &plot,
        &["series", "x", "mean", "std", "n"],
    )?;
    Ok(plot)
}

pub fn cmd_sweep_funnel_layer(s: &Settings) -> Result<Vec<RunRecord>> {
    let n = s.cfg.model.n_layers;
    check_grid(&s.cfg.sweep.layers, n)?;
    let rec = s.cfg.sweep.recovery;
    if s.cfg.data.task.head() == HeadKind::Token && rec == Recovery::None {
        return Err(Error::Usage("token tasks need a recovery other than none".into()));
    }
    let points = s
        .cfg
        .sweep
        .layers
        .iter()
        .flat_map(|&l| s.seeds().map(move |seed| (l, rec, seed)))
        .collect();
    let runs = run_grid(s, points)?;
    let plot = write_sweep(s, "sweep_funnel_layer", &runs)?;
    println!("layer  mean     std      n   ({})", runs.first().map_or("", |r| &r.metric_name));
    for p in &plot {
        println!("{:>5}  {:.4}  {:.4}  {}", p.x, p.mean, p.std, p.n);
    }
    Ok(runs)
}

pub fn cmd_sweep_recovery_op(s: &Settings) -> Result<Vec<RunRecord>> {
    if s.cfg.data.task.head() != HeadKind::Token {
        return Err(Error::Usage(
            "recovery sweeps need a token-level task (--task token or conll)".into(),
        ));
    }
    let n = s.cfg.model.n_layers;
    check_grid(&s.cfg.sweep.layers, n)?;
    let points = RecoveryOp::ALL
        .iter()
        .flat_map(|&op| {
            s.cfg.sweep.layers.iter().flat_map(move |&l| {
                s.seeds().map(move |seed| (l, Recovery::Combine(op), seed))
            })
        })
        .collect();
    let runs = run_grid(s, points)?;
    write_sweep(s, "sweep_recovery_op", &runs)?;
    let means: Vec<(RecoveryOp, f64)> = RecoveryOp::ALL
        .iter()
        .map(|&op| {
            let v: Vec<f64> = runs
                .iter()
                .filter(|r| r.recovery_op == op.name())
                .map(|r| r.metric_value)
                .collect();
            (op, mean_std(&v).0)
        })
        .collect();
    for (op, m) in &means {
        println!("{:<13} {m:.4}", op.name());
    }
    let avg = means[RecoveryOp::ALL.iter().position(|&o| o == RecoveryOp::AvgLast).unwrap()].1;
    for (op, m) in &means {
        if *m > avg {
            println!("note: {} ({m:.4}) beats avg_last ({avg:.4}) over this grid", op.name());
        }
    }
    Ok(runs)
}

/// Cost rows of the bench grid; latency is measured when `measure` is set.
pub fn cost_rows(s: &Settings, head: HeadKind, recovery: Recovery, measure: bool) -> Result<Vec<CostRecord>> {
    let b = &s.cfg.bench;
    let n = b.model.n_layers;
    if b.layers.is_empty() || b.layers.iter().any(|&l| l > n) {
        return Err(Error::Usage(format!("bench layers must lie in 0..={n}")));
    }
    let mut rows = Vec::with_capacity(b.layers.len());
    for &layer in &b.layers {
        let fc = FunnelConfig::at_layer(n, layer, recovery)?;
        let report = flops_estimate(&b.model, &fc, b.seq_len, head)?;
        let latency = if measure {
            let state = crate::model::ModelState::init(b.model.clone(), fc.clone(), s.cfg.train.seed)?;
            Some(wall_clock_profile(&state, b.seq_len, b.batch, b.n_warmup, b.n_reps)?)
        } else {
            None
        };
        rows.push(CostRecord {
            funnel_layer: layer,
            recovery_op: recovery.name().into(),
            seq_len: b.seq_len,
            flops_total: report.total,
            flops_savings: report.savings_ratio,
            latency_median_ms: latency.as_ref().map(|l| l.median_ms),
            latency_savings: latency.as_ref().map(|l| l.savings_vs_baseline),
        });
    }
    Ok(rows)
}

fn print_costs(rows: &[CostRecord]) {
    println!("layer  flops_savings  latency_ms  latency_savings");
    for r in rows {
        let fmt = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        println!(
            "{:>5}  {:>13.4}  {:>10}  {:>15}",
            r.funnel_layer,
            r.flops_savings,
            fmt(r.latency_median_ms, 2),
            fmt(r.latency_savings, 4)
        );
    }
}

pub fn cmd_bench(s: &Settings) -> Result<Vec<CostRecord>> {
    let rows = cost_rows(s, HeadKind::Sentence, Recovery::None, true)?;
    write_csv(&s.out.join("bench.csv"), &rows, &COST_COLUMNS)?;
    print_costs(&rows);
    Ok(rows)
}

pub fn cmd_flops(s: &Settings) -> Result<Vec<CostRecord>> {
    let (head, rec) = if s.task_flag && s.cfg.data.task.head() == HeadKind::Token {
        (HeadKind::Token, s.cfg.sweep.recovery)
    } else {
        (HeadKind::Sentence, Recovery::None)
    };
    let rows = cost_rows(s, head, rec, false)?;
    write_csv(&s.out.join("flops.csv"), &rows, &COST_COLUMNS)?;
    print_costs(&rows);
    Ok(rows)
}

fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
    let mut text = String::new();
    for ex in &data.examples {
        let label = match &ex.target {
            Target::Class(c) => c.to_string(),
            Target::Tags(t) => join(t),
        };
        text.push_str(&format!("{}\t{label}\n", join(&ex.tokens)));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_out(s: &Settings) -> Result<()> {
    fs::create_dir_all(&s.out).map_err(|e| Error::io(&s.out, e))
}

pub fn cmd_gen_data(s: &Settings) -> Result<()> {
    create_out(s)?;
    let (_, train, eval) = task_data(&s.cfg, s.cfg.train.seed)?;
    write_dataset(&s.out.join("train.txt"), &train)?;
    write_dataset(&s.out.join("eval.txt"), &eval)?;
    println!(
        "wrote train.txt ({} examples) and eval.txt ({} examples)",
        train.len(),
        eval.len()
    );
    Ok(())
}

fn single_layer(s: &Settings) -> Result<usize> {
    match s.cfg.sweep.layers.as_slice() {
        [l] => Ok(*l),
        _ if s.cfg.sweep.layers == SweepConfig::default().layers => Ok(0),
        _ => Err(Error::Usage("train takes a single --layers value".into())),
    }
}

#[derive(Serialize)]
struct TrainReport<'a> {
    record: &'a RunRecord,
    final_loss: f64,
    metrics: &'a crate::tasks::Metrics,
}

pub fn cmd_train(s: &Settings) -> Result<RunRecord> {
    create_out(s)?;
    let layer = single_layer(s)?;
    check_grid(&[layer], s.cfg.model.n_layers)?;
    let seed = s.cfg.train.seed;
    let (mc, train, eval) = task_data(&s.cfg, seed)?;
    let fc = sweep_funnel(mc.n_layers, layer, s.cfg.sweep.recovery)?;
    let scenario = s.cfg.sweep.scenario;
    let outcome = run_scenario(scenario, &mc, &fc, &s.cfg.train, &train, &eval)?;
    save_checkpoint(&outcome.state, &s.out.join("model.ckpt"))?;
    let record = RunRecord {
        scenario: scenario.name().into(),
        funnel_layer: layer,
        recovery_op: fc.recovery_op.name().into(),
        task: s.cfg.data.task.name().into(),
        seed,
        steps: s.cfg.train.max_steps,
        metric_name: outcome.metrics.name.into(),
        metric_value: outcome.metrics.value,
        flops_savings: flops_estimate(&mc, &fc, train.seq, train.kind)?.savings_ratio,
        latency_median_ms: None,
    };
    let report = TrainReport {
        record: &record,
        final_loss: outcome.finetune_losses.last().copied().unwrap_or(f64::NAN),
        metrics: &outcome.metrics,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Input(format!("cannot encode report: {e}")))?;
    let path = s.out.join("train_report.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    println!("{}={}", record.metric_name, record.metric_value);
    Ok(record)
}

pub fn cmd_eval(s: &Settings) -> Result<crate::tasks::Metrics> {
    let path = s
        .checkpoint
        .clone()
        .unwrap_or_else(|| s.out.join("model.ckpt"));
    let state = load_checkpoint(&path)?;
    let (mc, _, eval) = task_data(&s.cfg, s.cfg.train.seed)?;
    if state.config().n_classes < mc.n_classes || eval.seq > state.config().max_seq {
        return Err(Error::Input(format!(
            "checkpoint {} does not fit the {} task",
            path.display(),
            s.cfg.data.task
        )));
    }
    let metrics = evaluate(&state, &eval, s.cfg.train.eval_batch_size)?;
    println!("{}={}", metrics.name, metrics.value);
    Ok(metrics)
}

pub fn run(cli: &Cli) -> Result<()> {
    let s = Settings::resolve(&cli.flags)?;
    match cli.command {
        Command::GenData => cmd_gen_data(&s),
        Command::Train => cmd_train(&s).map(drop),
        Command::Eval => cmd_eval(&s).map(drop),
        Command::SweepFunnelLayer => cmd_sweep_funnel_layer(&s).map(drop),
        Command::SweepRecoveryOp => cmd_sweep_recovery_op(&s).map(drop),
        Command::Bench => cmd_bench(&s).map(drop),
        Command::Flops => cmd_flops(&s).map(drop),
    }
}
