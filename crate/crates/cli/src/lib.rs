//! `ralab` command-line driver.

pub mod manifest;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use chrono::Utc;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::Value;

use ralab_core::acquisition::{Acquisition, DEFAULT_BINS};
use ralab_core::analysis::{bias_study, load_run_dir, stage_column, wilcoxon_signed_rank, write_csv, Characteristic};
use ralab_core::attacks::{evaluate_robustness, AttackConfig, ATTACK_PRESETS};
use ralab_core::config::{config_from_value, DatasetConfig, ExperimentConfig, Mode};
use ralab_core::data::{synth_blobs, synth_digits, write_idx};
use ralab_core::learner::{read_stages_csv, run_to_dir, write_stages_csv, ExperimentData, StageRecord};
use ralab_core::nets::Model;
use ralab_core::retrainer::{parse_retrain_config, run_retraining, RetrainConfig};

use manifest::write_manifest;

/// Bad invocation or configuration (exit code 2).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for configuration errors, 1 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || c.downcast_ref::<ralab_core::Error>().is_some_and(ralab_core::Error::is_config_error)
    });
    if config {
        2
    } else {
        1
    }
}

#[derive(Debug, Parser)]
#[command(name = "ralab", version, about = "Robust pool-based active learning experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run active learning and write stages.csv (plus score dumps).
    Al(AlArgs),
    /// Evaluate a checkpoint against attacks on a config's test half.
    AttackEval(AttackEvalArgs),
    /// Divergence-vs-robustness study over run directories.
    Bias(BiasArgs),
    /// Select held-out data for adversarial retraining of a fully trained model.
    Retrain(RetrainArgs),
    /// Wilcoxon signed-rank test between two stages.csv files.
    Stats(StatsArgs),
    /// Summarise result CSVs into curve and table files.
    Report(ReportArgs),
    /// Write a synthetic dataset as IDX files.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct AlArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub acquisition: Option<String>,
    #[arg(long, value_parser = ["standard", "robust"])]
    pub mode: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Runs seeds seed..seed+k-1.
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Record per-stage wall-clock seconds (makes stages.csv nondeterministic).
    #[arg(long)]
    pub wall_clock: bool,
    #[arg(long)]
    pub dump_scores: bool,
    #[arg(long)]
    pub checkpoints: bool,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct AttackEvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Experiment config naming the dataset and default attacks.
    #[arg(long)]
    pub config: PathBuf,
    /// Attack preset; repeatable. Defaults to the config's attacks.
    #[arg(long = "attack")]
    pub attacks: Vec<String>,
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BiasArgs {
    /// Run directories written by `al --dump-scores`.
    #[arg(long, num_args = 1.., required = true)]
    pub runs: Vec<PathBuf>,
    #[arg(long, default_value = "rob_pgd")]
    pub column: String,
    #[arg(long, default_value_t = DEFAULT_BINS)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RetrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 1)]
    pub repeats: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long, default_value = "rob_pgd")]
    pub column: String,
    /// Pair only the last stage of each seed instead of every (seed, stage).
    #[arg(long)]
    pub final_only: bool,
    /// Directory receiving stats.csv.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Directories holding stages.csv, bias output and/or retrain.csv.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, value_parser = ["digits", "blobs"], default_value = "digits")]
    pub kind: String,
    #[arg(long, default_value_t = 6000)]
    pub train: usize,
    #[arg(long, default_value_t = 2000)]
    pub test: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::Al(a) => cmd_al(&a),
        Command::AttackEval(a) => cmd_attack_eval(&a),
        Command::Bias(a) => cmd_bias(&a),
        Command::Retrain(a) => cmd_retrain(&a),
        Command::Stats(a) => cmd_stats(&a),
        Command::Report(a) => report::cmd_report(&a.inputs, &a.out),
        Command::Synth(a) => cmd_synth(&a),
    }
}

/// Honours `RALAB_THREADS` for the worker pool.
fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("RALAB_THREADS") {
        let n: usize = v.parse().map_err(|_| usage(format!("RALAB_THREADS must be a positive integer, got `{v}`")))?;
        if n == 0 {
            return Err(usage("RALAB_THREADS must be positive"));
        }
        // A second initialisation (e.g. in-process tests) keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| ralab_core::Error::Parse(format!("{}: {e}", path.display())).into())
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads an experiment config with command-line overrides applied before validation.
pub fn load_experiment(path: &Path, acquisition: Option<&str>, mode: Option<&str>, seed: Option<u64>) -> Result<(ExperimentConfig, Value)> {
    let mut v = read_json(path)?;
    let obj = v.as_object_mut().ok_or_else(|| usage("configuration must be a JSON object"))?;
    if let Some(a) = acquisition {
        obj.insert("acquisition".into(), Value::String(a.parse::<Acquisition>()?.name().into()));
    }
    if let Some(m) = mode {
        obj.insert("mode".into(), Value::String(m.into()));
    }
    if let Some(s) = seed {
        obj.insert("seed".into(), s.into());
    }
    let mut cfg = config_from_value(v.clone())?;
    cfg.dataset = cfg.dataset.resolved(&config_dir(path));
    Ok((cfg, v))
}

fn seeds(first: u64, repeats: u64) -> Result<Vec<u64>> {
    if repeats == 0 {
        return Err(usage("--repeats must be at least 1"));
    }
    Ok((0..repeats).map(|k| first + k).collect())
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |r| format!("{:.4}", r))
}

fn cmd_al(a: &AlArgs) -> Result<()> {
    let started = Utc::now();
    let (mut cfg, raw) = load_experiment(&a.config, a.acquisition.as_deref(), a.mode.as_deref(), a.seed)?;
    if a.dump_scores {
        cfg.dump_scores = true;
    }
    let seeds = seeds(cfg.seed, a.repeats)?;
    let data = ExperimentData::load(&cfg.dataset, cfg.split_seed).context("loading the dataset")?;
    fs::create_dir_all(&a.out)?;
    let mut all: Vec<StageRecord> = Vec::new();
    for &seed in &seeds {
        let cfg = ExperimentConfig { seed, ..cfg.clone() };
        let quiet = a.quiet;
        let records = run_to_dir(&cfg, &data, &a.out, a.wall_clock, a.checkpoints, &mut |r| {
            if !quiet {
                eprintln!(
                    "[{} {} seed {}] stage {:>3} |L|={:>5} acc={:.4} pgd={} square={}",
                    cfg.acquisition,
                    if cfg.mode == Mode::Robust { "robust" } else { "standard" },
                    seed,
                    r.stage,
                    r.labeled,
                    r.accuracy,
                    fmt_rate(r.rob_pgd),
                    fmt_rate(r.rob_square)
                )
            }
        })?;
        all.extend(records);
        write_stages_csv(&a.out.join("stages.csv"), &all)?;
    }
    let snapshot = serde_json::json!({"file": raw, "resolved": cfg});
    write_manifest(&a.out, "al", seeds, snapshot, started)?;
    Ok(())
}

#[derive(Serialize)]
struct AttackRow {
    family: String,
    norm: String,
    epsilon: f64,
    alpha: f64,
    iters: usize,
    accuracy: f64,
    robustness: f64,
    n: usize,
}

fn cmd_attack_eval(a: &AttackEvalArgs) -> Result<()> {
    let started = Utc::now();
    let (cfg, raw) = load_experiment(&a.config, None, None, None)?;
    let attacks: Vec<AttackConfig> = if a.attacks.is_empty() {
        cfg.eval_attacks.iter().chain(&cfg.final_eval_attacks).cloned().collect()
    } else {
        a.attacks
            .iter()
            .map(|name| {
                AttackConfig::preset(name)
                    .ok_or_else(|| usage(format!("unknown attack preset `{name}` (valid: {})", ATTACK_PRESETS.join(", "))))
            })
            .collect::<Result<_>>()?
    };
    let attacks: Vec<AttackConfig> = attacks.into_iter().map(|c| c.with_seed(a.seed)).collect();
    let model: Model = Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let data = ExperimentData::load(&cfg.dataset, cfg.split_seed)?;
    let test = match a.limit.or(cfg.eval_limit) {
        Some(n) if n < data.test.len() => data.test.head(n)?,
        _ => data.test,
    };
    let report = evaluate_robustness(&model, &test, &attacks)?;
    let rows: Vec<AttackRow> = report
        .attacks
        .iter()
        .map(|o| AttackRow {
            family: format!("{:?}", o.config.family).to_lowercase(),
            norm: format!("{:?}", o.config.norm).to_lowercase(),
            epsilon: o.config.epsilon,
            alpha: o.config.alpha,
            iters: o.config.iters,
            accuracy: report.clean_accuracy,
            robustness: o.robustness,
            n: report.n,
        })
        .collect();
    fs::create_dir_all(&a.out)?;
    write_csv(&a.out.join("attack_eval.csv"), &rows)?;
    println!("clean accuracy {:.4} on {} items", report.clean_accuracy, report.n);
    for r in &rows {
        println!("{} eps={} iters={}: robustness {:.4}", r.family, r.epsilon, r.iters, r.robustness);
    }
    write_manifest(&a.out, "attack-eval", vec![a.seed], serde_json::json!({"file": raw, "attacks": attacks}), started)?;
    Ok(())
}

fn cmd_bias(a: &BiasArgs) -> Result<()> {
    let started = Utc::now();
    let mut runs = Vec::new();
    for d in &a.runs {
        runs.extend(load_run_dir(d).with_context(|| format!("reading run directory {}", d.display()))?);
    }
    let study = bias_study(&runs, &Characteristic::ALL, &a.column, a.bins)?;
    fs::create_dir_all(&a.out)?;
    write_csv(&a.out.join("bias.csv"), &study.records)?;
    write_csv(&a.out.join("correlation.csv"), &study.correlations)?;
    for c in Characteristic::ALL {
        let mean = study.mean_correlation(c);
        println!("{:<10} mean r = {}", format!("{c:?}").to_lowercase(), mean.map_or("undefined".into(), |r| format!("{r:.4}")));
    }
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let cfg = serde_json::json!({"runs": a.runs, "column": a.column, "bins": a.bins});
    write_manifest(&a.out, "bias", seeds, cfg, started)?;
    Ok(())
}

fn load_retrain(path: &Path, seed: Option<u64>) -> Result<(RetrainConfig, Value)> {
    let mut v = read_json(path)?;
    if let Some(s) = seed {
        v.as_object_mut().ok_or_else(|| usage("configuration must be a JSON object"))?.insert("seed".into(), s.into());
    }
    let mut cfg = parse_retrain_config(&v.to_string())?;
    cfg.dataset = cfg.dataset.resolved(&config_dir(path));
    Ok((cfg, v))
}

fn cmd_retrain(a: &RetrainArgs) -> Result<()> {
    let started = Utc::now();
    let (cfg, raw) = load_retrain(&a.config, a.seed)?;
    let seeds = seeds(cfg.seed, a.repeats)?;
    let data = ExperimentData::load(&cfg.dataset, cfg.split_seed)?;
    fs::create_dir_all(&a.out)?;
    let mut all = Vec::new();
    for &seed in &seeds {
        let cfg = RetrainConfig { seed, ..cfg.clone() };
        let quiet = a.quiet;
        all.extend(run_retraining(&cfg, &data, &mut |r| {
            if !quiet {
                eprintln!(
                    "[retrain seed {seed}] {} fraction {:.2}: acc {:.4} -> {:.4}, pgd {} -> {}",
                    r.acquisition,
                    r.fraction,
                    r.baseline_accuracy,
                    r.accuracy,
                    fmt_rate(r.baseline_rob_pgd),
                    fmt_rate(r.rob_pgd)
                )
            }
        })?);
        write_csv(&a.out.join("retrain.csv"), &all)?;
    }
    write_manifest(&a.out, "retrain", seeds, serde_json::json!({"file": raw, "resolved": cfg}), started)?;
    Ok(())
}

#[derive(Serialize)]
struct StatsRow {
    a: String,
    b: String,
    column: String,
    pairs: usize,
    statistic: f64,
    w_plus: f64,
    p_value: f64,
    n: usize,
    exact: bool,
}

/// Values of `column` keyed by (seed, stage); with `final_only`, each seed's
/// last stage only.
fn keyed(records: &[StageRecord], column: &str, final_only: bool) -> Result<std::collections::BTreeMap<(u64, usize), f64>> {
    let mut last: std::collections::BTreeMap<u64, usize> = Default::default();
    for r in records {
        let e = last.entry(r.seed).or_insert(r.stage);
        *e = (*e).max(r.stage);
    }
    let mut out = std::collections::BTreeMap::new();
    for r in records {
        if final_only && last[&r.seed] != r.stage {
            continue;
        }
        if let Some(v) = stage_column(r, column)? {
            out.insert((r.seed, r.stage), v);
        }
    }
    Ok(out)
}

fn cmd_stats(a: &StatsArgs) -> Result<()> {
    let ra = read_stages_csv(&a.a).with_context(|| format!("reading {}", a.a.display()))?;
    let rb = read_stages_csv(&a.b).with_context(|| format!("reading {}", a.b.display()))?;
    let (ka, kb) = (keyed(&ra, &a.column, a.final_only)?, keyed(&rb, &a.column, a.final_only)?);
    let (xs, ys): (Vec<f64>, Vec<f64>) = ka.iter().filter_map(|(k, x)| kb.get(k).map(|y| (*x, *y))).unzip();
    if xs.is_empty() {
        return Err(anyhow!("the two files share no (seed, stage) pairs with a `{}` value", a.column));
    }
    let w = wilcoxon_signed_rank(&xs, &ys)?;
    println!("W={} p={:.6e} n={} ({} pairs, {})", w.statistic, w.p_value, w.n, xs.len(), if w.exact { "exact" } else { "normal approximation" });
    let row = StatsRow {
        a: a.a.display().to_string(),
        b: a.b.display().to_string(),
        column: a.column.clone(),
        pairs: xs.len(),
        statistic: w.statistic,
        w_plus: w.w_plus,
        p_value: w.p_value,
        n: w.n,
        exact: w.exact,
    };
    fs::create_dir_all(&a.out)?;
    let path = a.out.join("stats.csv");
    let fresh = !path.exists();
    let file = fs::OpenOptions::new().create(true).append(true).open(&path)?;
    let mut wtr = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    wtr.serialize(row)?;
    wtr.flush()?;
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let started = Utc::now();
    let (train, test) = match a.kind.as_str() {
        "digits" => (synth_digits::<f32>(a.train, a.seed)?, synth_digits::<f32>(a.test, a.seed.wrapping_add(1))?),
        _ => {
            let per = |n: usize| n.div_ceil(10);
            (synth_blobs(10, per(a.train), 784, 0.5, a.seed)?, synth_blobs(10, per(a.test), 784, 0.5, a.seed.wrapping_add(1))?)
        }
    };
    fs::create_dir_all(&a.out)?;
    write_idx(&train, &a.out.join("train-images-idx3-ubyte"), &a.out.join("train-labels-idx1-ubyte"))?;
    write_idx(&test, &a.out.join("t10k-images-idx3-ubyte"), &a.out.join("t10k-labels-idx1-ubyte"))?;
    let cfg = serde_json::json!({"kind": a.kind, "train": a.train, "test": a.test});
    write_manifest(&a.out, "synth", vec![a.seed], cfg, started)?;
    Ok(())
}

/// Dataset section pointing at IDX files written by `synth`.
pub fn idx_dataset(dir: &Path, train_limit: Option<usize>) -> DatasetConfig {
    DatasetConfig::Idx {
        train_images: dir.join("train-images-idx3-ubyte"),
        train_labels: dir.join("train-labels-idx1-ubyte"),
        test_images: dir.join("t10k-images-idx3-ubyte"),
        test_labels: dir.join("t10k-labels-idx1-ubyte"),
        train_limit,
        test_limit: None,
    }
}
