// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `diffclean` command line: `simulate`, `clean`, `assess`, `metrics`
//! and `train`.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 cleaning stopped at
//! `max_iterations` without converging, 4 numeric failure.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{sha256_hex, Checkpoint, ModelBinding};
use crate::dataset::{
    format_value, load_series, render_series, ColumnSpec, ExtraColumn, ScaledSeries, TimeSeriesDataset,
};
use crate::error::{Error, Result};
use crate::networks::{init_params, ModelConfig};
use crate::pipeline::{assess, run_cleaning, training_split, CleaningConfig, CleaningResult, PipelineConfig};
use crate::quality::{mse_lmae, precision_recall_f1};
use crate::synth::{generate, OutlierKind, SynthSpec};
use crate::training::{train, EpochRecord, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NOT_CONVERGED: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Default run directory when `--run-dir` is not given.
pub const RUN_DIR_ENV: &str = "DIFFCLEAN_RUN_DIR";

/// Full configuration file: one section per component. Unknown keys are
/// rejected; missing keys take their defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub synth: SynthSpec,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Sets `section.field` (or deeper) to `raw`, parsed as JSON when
    /// possible and as a string otherwise.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got `{assignment}`")))?;
        let mut root = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        for part in key.trim().split('.') {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        *self = serde_json::from_value(root).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        Ok(())
    }

    pub fn cleaning(&self) -> CleaningConfig {
        CleaningConfig {
            pipeline: self.pipeline.clone(),
            train: self.train.clone(),
            model: self.model.clone(),
        }
    }

    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("serializable").as_bytes())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "diffclean",
    version,
    about = "Probabilistic time-series quality assessment and cleaning"
)]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a labeled synthetic series.
    Simulate(SimulateArgs),
    /// Run the iterative cleaning loop.
    Clean(RunArgs),
    /// Score a series with a trained checkpoint, without modifying it.
    Assess(AssessArgs),
    /// Compare predictions or a cleaned series against ground truth.
    Metrics(MetricsArgs),
    /// Train a model on a series and save the checkpoint.
    Train(RunArgs),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Squared error instead of the robust loss.
    NoHuber,
    /// Condition on the raw covariates instead of the recurrent state.
    NoConditional,
    /// z-score instead of median/interquartile scaling.
    NoQuartile,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// JSON configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override any field, e.g. `--set pipeline.samples=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long, short)]
    pub output: PathBuf,
    #[arg(long)]
    pub length: Option<usize>,
    /// Contamination rate in [0, 0.2].
    #[arg(long)]
    pub rate: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
    /// Seconds between samples.
    #[arg(long)]
    pub interval: Option<i64>,
    #[arg(long, value_delimiter = ',')]
    pub kinds: Vec<KindArg>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Spike,
    LevelShift,
    Stuck,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ColumnArgs {
    #[arg(long, default_value = "timestamp")]
    pub timestamp_column: String,
    #[arg(long, default_value = "value")]
    pub value_column: String,
    #[arg(long, default_value = "label")]
    pub label_column: String,
}

impl ColumnArgs {
    fn spec(&self) -> ColumnSpec {
        ColumnSpec {
            timestamp: self.timestamp_column.clone(),
            value: self.value_column.clone(),
            label: self.label_column.clone(),
            ..ColumnSpec::default()
        }
    }
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Output directory (default: $DIFFCLEAN_RUN_DIR, else `diffclean-run`).
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub context: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub k: Option<f64>,
    /// Also write `checkpoint_iter<N>.json` for every round (`clean` only).
    #[arg(long)]
    pub save_checkpoints: bool,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Args, Debug)]
pub struct AssessArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub ablate: Vec<Ablation>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[command(flatten)]
    pub columns: ColumnArgs,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Test,
}

#[derive(Args, Debug)]
pub struct MetricsArgs {
    /// Predictions or cleaned series (after cleaning).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth; its `label` column, when present, scores the flags.
    #[arg(long)]
    pub truth: PathBuf,
    /// Baseline predictions; prints a before/after pair of rows.
    #[arg(long)]
    pub before: Option<PathBuf>,
    #[arg(long, default_value = "value")]
    pub pred_column: String,
    #[arg(long, default_value = "value")]
    pub truth_column: String,
    #[arg(long, default_value = "timestamp")]
    pub timestamp_column: String,
    #[arg(long, value_enum, default_value = "all")]
    pub split: Split,
    /// Training share used to locate the split.
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
    /// Keep points labeled as outliers in the error metrics.
    #[arg(long)]
    pub include_outliers: bool,
}

/// Parses `std::env::args`, runs, and returns the process exit code.
pub fn main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    run(cli)
}

pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return EXIT_USAGE;
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let outcome = match cli.command {
        Command::Simulate(a) => cmd_simulate(&a).map(|_| EXIT_OK),
        Command::Clean(a) => cmd_clean(&a),
        Command::Assess(a) => cmd_assess(&a).map(|_| EXIT_OK),
        Command::Metrics(a) => cmd_metrics(&a).map(|_| EXIT_OK),
        Command::Train(a) => cmd_train(&a).map(|_| EXIT_OK),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                EXIT_NUMERIC
            } else {
                EXIT_USAGE
            }
        }
    }
}

fn base_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &args.set {
        cfg.set(s)?;
    }
    Ok(cfg)
}

fn apply_ablations(cfg: &mut RunConfig, ablations: &[Ablation]) {
    for a in ablations {
        match a {
            Ablation::NoHuber => cfg.train.squared_loss = true,
            Ablation::NoConditional => cfg.model.conditional = false,
            Ablation::NoQuartile => cfg.pipeline.quartile_scaling = false,
        }
    }
}

/// File, then `--set`, then dedicated flags.
pub fn effective_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = base_config(&a.cfg)?;
    let p = &mut cfg.pipeline;
    if let Some(v) = a.cfg.seed {
        p.seed = v;
    }
    if let Some(v) = a.samples {
        p.samples = v;
    }
    if let Some(v) = a.steps {
        p.diffusion_steps = v;
    }
    if let Some(v) = a.max_iterations {
        p.max_iterations = v;
    }
    if let Some(v) = a.train_fraction {
        p.train_fraction = v;
    }
    if let Some(v) = a.threshold {
        p.threshold = v;
    }
    if let Some(v) = a.k {
        p.k = v;
    }
    if let Some(v) = a.context {
        cfg.model.context_len = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    apply_ablations(&mut cfg, &a.ablate);
    cfg.cleaning().validate()?;
    Ok(cfg)
}

fn run_dir(explicit: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = explicit
        .clone()
        .or_else(|| std::env::var_os(RUN_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("diffclean-run"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn preamble(hash: &str, seed: u64) -> String {
    format!("# diffclean config_hash={hash} seed={seed}\n")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg = base_config(&a.cfg)?;
    let s = &mut cfg.synth;
    if let Some(v) = a.cfg.seed {
        s.seed = v;
    }
    if let Some(v) = a.length {
        s.length = v;
    }
    if let Some(v) = a.rate {
        s.contamination_rate = v;
    }
    if let Some(v) = a.noise_std {
        s.noise_std = v;
    }
    if let Some(v) = a.interval {
        s.sampling_interval = v;
    }
    if !a.kinds.is_empty() {
        s.kinds = a
            .kinds
            .iter()
            .map(|k| match k {
                KindArg::Spike => OutlierKind::Spike,
                KindArg::LevelShift => OutlierKind::LevelShift,
                KindArg::Stuck => OutlierKind::Stuck,
            })
            .collect();
    }
    let ds = generate(&cfg.synth)?;
    let labels = ds.labels.as_ref().expect("generated series carry labels");
    let clean = ds.clean.as_ref().expect("generated series carry the clean signal");
    let extra = [
        ExtraColumn {
            name: "label",
            cells: labels.iter().map(|&l| u8::from(l).to_string()).collect(),
        },
        ExtraColumn {
            name: "clean",
            cells: clean.iter().map(|&v| format_value(v)).collect(),
        },
    ];
    let text = preamble(&cfg.hash(), cfg.synth.seed) + &render_series(&ds, &extra)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_text(&a.output, &text)?;
    eprintln!(
        "wrote {} points ({} labeled outliers) to {}",
        ds.len(),
        labels.iter().filter(|&&l| l).count(),
        a.output.display()
    );
    Ok(())
}

fn loss_csv(rounds: &[(usize, &[EpochRecord])], head: &str) -> String {
    let mut out = head.to_string();
    out.push_str("iteration,epoch,lr,mean_loss\n");
    for (it, hist) in rounds {
        for e in hist.iter() {
            out.push_str(&format!(
                "{it},{},{},{}\n",
                e.epoch,
                format_value(e.lr),
                format_value(e.mean_loss)
            ));
        }
    }
    out
}

pub fn cmd_clean(a: &RunArgs) -> Result<i32> {
    let cfg = effective_run_config(a)?;
    let ds = load_series(&a.input, &a.columns.spec())?;
    let dir = run_dir(&a.run_dir)?;
    let result = run_cleaning(&ds, &cfg.cleaning())?;
    write_clean_outputs(&dir, &ds, &cfg, &result)?;
    if a.save_checkpoints {
        let binding = ModelBinding::new(&cfg.model, &cfg.pipeline);
        for (i, p) in result.round_params.iter().enumerate() {
            Checkpoint::new(p, binding.clone(), result.normalizer, cfg.pipeline.seed, i)
                .save(&dir.join(format!("checkpoint_iter{i}.json")))?;
        }
    }
    let last = result.iterations.last().expect("at least one round");
    eprintln!(
        "{} after {} iteration(s): {} low-quality point(s), final QES {:.4}; outputs in {}",
        if result.converged { "converged" } else { "not converged" },
        result.iterations_used(),
        result.low_quality.len(),
        last.qes,
        dir.display()
    );
    Ok(if result.converged { EXIT_OK } else { EXIT_NOT_CONVERGED })
}

/// Writes every artifact of a cleaning run into `dir`.
pub fn write_clean_outputs(dir: &Path, ds: &TimeSeriesDataset, cfg: &RunConfig, r: &CleaningResult) -> Result<()> {
    let hash = cfg.hash();
    let seed = cfg.pipeline.seed;
    let head = preamble(&hash, seed);
    let n = ds.len();
    let c = cfg.model.context_len;

    let mut prob = vec![0.0; n];
    for p in &r.points {
        prob[p.index] = p.p_o;
    }
    let flags = r.flag_mask();
    let mut extra = Vec::new();
    if let Some(labels) = &ds.labels {
        extra.push(ExtraColumn {
            name: "label",
            cells: labels.iter().map(|&l| u8::from(l).to_string()).collect(),
        });
    }
    extra.extend([
        ExtraColumn {
            name: "imputed",
            cells: r.cleaned.mask.iter().map(|&m| u8::from(m).to_string()).collect(),
        },
        ExtraColumn {
            name: "outlier_probability",
            cells: prob.iter().map(|p| format!("{p:.6}")).collect(),
        },
        ExtraColumn {
            name: "flagged",
            cells: flags.iter().map(|&f| u8::from(f).to_string()).collect(),
        },
    ]);
    write_text(
        &dir.join("cleaned.csv"),
        &(head.clone() + &render_series(&r.cleaned, &extra)?),
    )?;

    let mut u = head.clone() + "index,timestamp,original,imputed,p_o,iteration\n";
    for p in &r.low_quality {
        u.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            p.index,
            p.timestamp,
            format_value(p.original),
            p.imputed.map(format_value).unwrap_or_default(),
            p.p_o,
            p.iteration
        ));
    }
    write_text(&dir.join("low_quality.csv"), &u)?;

    let mut q = head.clone() + "iteration,qes,sigma2,flagged_train,flagged_horizon,newly_flagged\n";
    for it in &r.iterations {
        q.push_str(&format!(
            "{},{},{},{},{},{}\n",
            it.iteration,
            format_value(it.qes),
            format_value(it.sigma2),
            it.flagged_train,
            it.flagged_horizon,
            it.newly_flagged
        ));
    }
    write_text(&dir.join("qes.csv"), &q)?;

    let rounds: Vec<(usize, &[EpochRecord])> = r
        .iterations
        .iter()
        .map(|it| (it.iteration, it.loss_history.as_slice()))
        .collect();
    write_text(&dir.join("loss_history.csv"), &loss_csv(&rounds, &head))?;

    for (name, preds) in [
        ("predictions_initial.csv", &r.first_predictions),
        ("predictions.csv", &r.last_predictions),
    ] {
        let mut out = head.clone() + "t,timestamp,split,mu_raw,sigma_raw,sigma2_raw\n";
        for p in preds.iter() {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                p.index,
                ds.format_timestamp(p.index),
                if p.index < r.train_len { "train" } else { "test" },
                format_value(p.mu),
                format_value(p.sigma),
                format_value(p.sigma2)
            ));
        }
        write_text(&dir.join(name), &out)?;
    }

    let k_sweep: Vec<Value> = [0.05, 0.1, 0.2]
        .iter()
        .map(|&k| {
            let per_round: Vec<Option<f64>> = r
                .iterations
                .iter()
                .map(|it| it.qes_with_k(r.train_len, c, k).ok())
                .collect();
            json!({ "k": k, "qes": per_round })
        })
        .collect();
    let iterations: Vec<Value> = r
        .iterations
        .iter()
        .map(|it| {
            json!({
                "iteration": it.iteration,
                "lr0": it.lr0,
                "sigma2": it.sigma2,
                "sigma2_change": it.sigma2_change,
                "qes": it.qes,
                "flagged_train": it.flagged_train,
                "flagged_horizon": it.flagged_horizon,
                "newly_flagged": it.newly_flagged,
                "final_loss": it.loss_history.last().map(|e| e.mean_loss),
                "horizon_error": it.horizon_error,
                "detection": it.detection,
            })
        })
        .collect();
    let report = json!({
        "tool": "diffclean",
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": hash,
        "seed": seed,
        "config": cfg,
        "input_points": n,
        "train_len": r.train_len,
        "converged": r.converged,
        "iterations_used": r.iterations_used(),
        "normalizer": r.normalizer,
        "error_variance": r.last.error,
        "qes": r.qes_history(),
        "qes_k_sweep": k_sweep,
        "iterations": iterations,
        "metrics": {
            "detection": r.iterations.last().and_then(|it| it.detection),
            "horizon_error_before": r.iterations.first().and_then(|it| it.horizon_error),
            "horizon_error_after": r.iterations.last().and_then(|it| it.horizon_error),
        },
        "low_quality_count": r.low_quality.len(),
        "points": r.points.iter().map(|p| json!({
            "t": p.index,
            "timestamp": ds.format_timestamp(p.index),
            "value": p.value,
            "mu": p.mu,
            "sigma_total": p.sigma_total,
            "p_o": p.p_o,
            "flagged": p.flagged,
        })).collect::<Vec<_>>(),
    });
    write_json(&dir.join("report.json"), &report)?;

    let binding = ModelBinding::new(&cfg.model, &cfg.pipeline);
    let last_iteration = r.iterations_used() - 1;
    Checkpoint::new(&r.params, binding, r.normalizer, seed, last_iteration).save(&dir.join("checkpoint.json"))
}

pub fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = effective_run_config(a)?;
    let ds = load_series(&a.input, &a.columns.spec())?;
    let dir = run_dir(&a.run_dir)?;
    let cc = cfg.cleaning();
    let train_len = training_split(&ds, &cc.pipeline, &cc.model)?;
    let norm = crate::dataset::Normalizer::fit(&ds.values[..train_len], cc.pipeline.quartile_scaling)?;
    let sched = cc.pipeline.schedule()?;
    let series = ScaledSeries::new(&ds, &norm);
    let seed = cc.pipeline.seed;
    let params = init_params(seed, &cc.model)?;
    let (params, history) = train(params, &cc.model, &cc.train, &sched, &series, train_len, seed, 0)?;
    let head = preamble(&cfg.hash(), seed);
    write_text(&dir.join("loss_history.csv"), &loss_csv(&[(0, &history)], &head))?;
    let binding = ModelBinding::new(&cc.model, &cc.pipeline);
    Checkpoint::new(&params, binding, norm, seed, 0).save(&dir.join("checkpoint.json"))?;
    eprintln!(
        "trained {} epoch(s), final loss {}; checkpoint in {}",
        history.len(),
        history
            .last()
            .map_or("n/a".to_string(), |e| format!("{:.6}", e.mean_loss)),
        dir.display()
    );
    Ok(())
}

pub fn cmd_assess(a: &AssessArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let mut cfg = base_config(&a.cfg)?;
    apply_ablations(&mut cfg, &a.ablate);
    ck.check_binding(&ModelBinding::new(&cfg.model, &cfg.pipeline))?;
    cfg.cleaning().validate()?;
    let params = ck.params()?;
    let ds = load_series(&a.input, &a.columns.spec())?;
    let dir = run_dir(&a.run_dir)?;
    let pc = PipelineConfig {
        seed: ck.seed,
        ..cfg.pipeline.clone()
    };
    let train_len = training_split(&ds, &pc, &cfg.model)?;
    let sched = pc.schedule()?;
    let series = ScaledSeries::new(&ds, &ck.normalizer);
    let result = assess(&params, &cfg.model, &pc, &sched, &series, train_len, ck.iteration)?;

    let spread = ck.normalizer.spread();
    let head = preamble(&cfg.hash(), ck.seed);
    let mut out = head + "index,timestamp,value,mu,sigma_total,outlier_probability,flagged\n";
    let mut points = Vec::with_capacity(result.predictions.len());
    for ((p, &po), &f) in result.predictions.iter().zip(&result.p_o).zip(&result.flagged) {
        let mu = ck.normalizer.unscale(p.mu);
        let st = (p.sigma * p.sigma + result.error.sigma2).sqrt() * spread;
        out.push_str(&format!(
            "{},{},{},{},{},{po:.6},{}\n",
            p.index,
            ds.format_timestamp(p.index),
            format_value(ds.values[p.index]),
            format_value(mu),
            format_value(st),
            u8::from(f)
        ));
        points.push(json!({
            "t": p.index, "timestamp": ds.format_timestamp(p.index), "value": ds.values[p.index],
            "mu": mu, "sigma_total": st, "p_o": po, "flagged": f,
        }));
    }
    write_text(&dir.join("scores.csv"), &out)?;
    let flagged: Vec<usize> = result
        .predictions
        .iter()
        .zip(&result.flagged)
        .filter(|(_, &f)| f)
        .map(|(p, _)| p.index)
        .collect();
    write_json(
        &dir.join("assessment.json"),
        &json!({
            "tool": "diffclean",
            "version": env!("CARGO_PKG_VERSION"),
            "config_hash": cfg.hash(),
            "model_hash": ck.model_hash,
            "seed": ck.seed,
            "iteration": ck.iteration,
            "config": cfg,
            "train_len": train_len,
            "error_variance": result.error,
            "qes": result.qes,
            "flagged": flagged,
            "points": points,
        }),
    )?;
    eprintln!(
        "assessed {} point(s): {} flagged, QES {:.4}; outputs in {}",
        result.predictions.len(),
        flagged.len(),
        result.qes,
        dir.display()
    );
    Ok(())
}

/// Header-indexed delimiter-separated table; `#` lines are skipped.
struct Table {
    columns: HashMap<String, usize>,
    rows: Vec<csv::StringRecord>,
}

impl Table {
    fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_reader(file);
        let columns = reader
            .headers()
            .map_err(|e| Error::Parse {
                row: 0,
                message: e.to_string(),
            })?
            .iter()
            .enumerate()
            .map(|(i, h)| (h.to_string(), i))
            .collect();
        let rows = reader
            .records()
            .enumerate()
            .map(|(i, r)| {
                r.map_err(|e| Error::Parse {
                    row: i + 1,
                    message: e.to_string(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Parse {
                row: 0,
                message: format!("{} has no data rows", path.display()),
            });
        }
        Ok(Self { columns, rows })
    }

    fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = *self.columns.get(name)?;
        Some(self.rows.iter().map(|r| r.get(i).unwrap_or("")).collect())
    }

    fn require(&self, name: &str, path: &Path) -> Result<Vec<&str>> {
        self.column(name).ok_or_else(|| Error::Parse {
            row: 0,
            message: format!("{} has no column `{name}`", path.display()),
        })
    }
}

fn numbers(cells: &[&str], what: &str) -> Result<Vec<f64>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            c.parse::<f64>().map_err(|_| Error::Parse {
                row: i + 1,
                message: format!("bad {what} `{c}`"),
            })
        })
        .collect()
}

fn flags(cells: &[&str]) -> Result<Vec<bool>> {
    cells
        .iter()
        .enumerate()
        .map(|(i, c)| match *c {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            _ => Err(Error::Parse {
                row: i + 1,
                message: format!("bad flag `{c}`"),
            }),
        })
        .collect()
}

/// One metrics row of `cmd_metrics`.
#[derive(Debug, Serialize)]
pub struct MetricsRow {
    pub name: String,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub mse: f64,
    pub lmae: f64,
    pub count: usize,
}

pub fn compute_metrics(a: &MetricsArgs, pred_path: &Path, name: &str) -> Result<MetricsRow> {
    let truth = Table::read(&a.truth)?;
    let pred = Table::read(pred_path)?;
    let truth_ts = truth.require(&a.timestamp_column, &a.truth)?;
    let pred_ts = pred.require(&a.timestamp_column, pred_path)?;
    let index: HashMap<&str, usize> = pred_ts.iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let truth_vals = numbers(&truth.require(&a.truth_column, &a.truth)?, "truth value")?;
    let pred_vals = numbers(&pred.require(&a.pred_column, pred_path)?, "predicted value")?;
    let labels = truth.column("label").map(|c| flags(&c)).transpose()?;
    let pred_flags = pred
        .column("flagged")
        .or_else(|| pred.column("imputed"))
        .map(|c| flags(&c))
        .transpose()?;

    let n = truth_ts.len();
    let train_len = ((n as f64) * a.train_fraction).floor() as usize;
    let selected: Vec<usize> = (0..n)
        .filter(|&i| match a.split {
            Split::All => true,
            Split::Train => i < train_len,
            Split::Test => i >= train_len,
        })
        .collect();
    let mut aligned = Vec::with_capacity(selected.len());
    for &i in &selected {
        match index.get(truth_ts[i]) {
            Some(&j) => aligned.push((i, j)),
            None if pred_ts.len() < n => {}
            None => {
                return Err(Error::invalid(format!(
                    "timestamp `{}` of {} is missing from {}",
                    truth_ts[i],
                    a.truth.display(),
                    pred_path.display()
                )))
            }
        }
    }
    if aligned.is_empty() {
        return Err(Error::invalid(format!(
            "{} and {} share no timestamps",
            a.truth.display(),
            pred_path.display()
        )));
    }
    let (mut y, mut yhat) = (Vec::new(), Vec::new());
    for &(i, j) in &aligned {
        if !a.include_outliers && labels.as_ref().is_some_and(|l| l[i]) {
            continue;
        }
        y.push(truth_vals[i]);
        yhat.push(pred_vals[j]);
    }
    let err = mse_lmae(&y, &yhat)?;
    let det = match (&labels, &pred_flags) {
        (Some(l), Some(f)) => {
            let lf: Vec<bool> = aligned.iter().map(|&(i, _)| l[i]).collect();
            let pf: Vec<bool> = aligned.iter().map(|&(_, j)| f[j]).collect();
            Some(precision_recall_f1(&pf, &lf)?)
        }
        _ => None,
    };
    Ok(MetricsRow {
        name: name.into(),
        precision: det.map(|d| d.precision),
        recall: det.map(|d| d.recall),
        f1: det.map(|d| d.f1),
        mse: err.mse,
        lmae: err.lmae,
        count: err.count,
    })
}

pub fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let mut rows = Vec::new();
    if let Some(b) = &a.before {
        rows.push(compute_metrics(a, b, "before")?);
        rows.push(compute_metrics(a, &a.pred, "after")?);
    } else {
        rows.push(compute_metrics(a, &a.pred, "result")?);
    }
    let opt = |v: Option<f64>| v.map_or("".to_string(), |x| format!("{x:.6}"));
    println!("row,precision,recall,f1,mse,lmae,count");
    for r in &rows {
        println!(
            "{},{},{},{},{:.6e},{:.6e},{}",
            r.name,
            opt(r.precision),
            opt(r.recall),
            opt(r.f1),
            r.mse,
            r.lmae,
            r.count
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_nested_fields() {
        let mut c = RunConfig::default();
        c.set("pipeline.samples=7").unwrap();
        c.set("model.conditional=false").unwrap();
        c.set("synth.kinds=[\"spike\",\"stuck\"]").unwrap();
        assert_eq!(c.pipeline.samples, 7);
        assert!(!c.model.conditional);
        assert_eq!(c.synth.kinds, vec![OutlierKind::Spike, OutlierKind::Stuck]);
        assert!(c.set("pipeline.nope=1").is_err());
        assert!(c.set("pipeline.samples=abc").is_err());
    }

    #[test]
    fn unknown_file_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"pipeline": {"sample": 3}}"#);
        assert!(err.is_err());
        let ok: RunConfig = serde_json::from_str(r#"{"train": {"epochs": 3}}"#).unwrap();
        assert_eq!(ok.train.epochs, 3);
        assert_eq!(ok.pipeline, PipelineConfig::default());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.pipeline.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }
}
