//! `contig`: train, evaluate and benchmark temporal interaction graph models.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 data
//! error, 4 task not supported by the dataset.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contig_core::bench::{bench_fit, time_epochs};
use contig_core::eval::{write_bucket_csv, write_results, Evaluator, LinkMode, ResultRow, RECALL_KS};
use contig_core::graph::{load_stream, LoadOptions};
use contig_core::synthetic::{generate, SyntheticConfig};
use contig_core::train::{fit, Checkpoint, EpochRecord};
use contig_core::{Config, Dataset, Error, ErrorClass, Result};

use manifest::{config_from_manifest, DatasetInfo, RunManifest};

#[derive(Parser)]
#[command(name = "contig", version, about = "Temporal interaction graph embedding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write a checkpoint, a manifest and per-epoch metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one downstream task.
    Eval(EvalArgs),
    /// Recall@K over all items (eval --task recommend).
    Recommend(TaskArgs),
    /// Node classification from frozen embeddings (eval --task classify).
    Classify(TaskArgs),
    /// Link prediction AP per interval bucket (eval --task buckets).
    BucketEval(TaskArgs),
    /// Time one training epoch on growing prefixes of a stream.
    Bench(BenchArgs),
    /// Write a synthetic interaction stream as CSV.
    Synthetic(SyntheticArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML config file, or a manifest from an earlier run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Enable an ablation variant; repeatable.
    #[arg(long, value_name = "NAME")]
    ablation: Vec<String>,
    /// Dotted-key override, e.g. `--set ode.steps=8`; repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    /// Built-in defaults, then the file, then flags.
    fn resolve(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(p) if p.extension().is_some_and(|e| e == "json") => config_from_manifest(p)?,
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for name in &self.ablation {
            config.model.ablation.set(name, true)?;
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if self.deterministic {
            config.train.deterministic = true;
        }
        for kv in &self.set {
            config.apply_override(kv)?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Task {
    Link,
    Recommend,
    Classify,
    Buckets,
}

impl Task {
    fn name(self) -> &'static str {
        match self {
            Task::Link => "link",
            Task::Recommend => "recommend",
            Task::Classify => "classify",
            Task::Buckets => "buckets",
        }
    }
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// transductive or inductive.
    #[arg(long, default_value = "transductive")]
    mode: String,
    /// Cutoffs for Recall@K.
    #[arg(long, value_delimiter = ',', default_values_t = RECALL_KS)]
    k: Vec<usize>,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: Task,
    #[command(flatten)]
    rest: TaskArgs,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Ascending prefix sizes.
    #[arg(long, value_delimiter = ',', default_values_t = [5000, 10000, 20000])]
    counts: Vec<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SyntheticArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    edges: usize,
    #[arg(long, default_value_t = 100)]
    users: usize,
    #[arg(long, default_value_t = 100)]
    items: usize,
    /// Defaults to one community per user.
    #[arg(long)]
    communities: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Fraction of users with an 8x longer revisit period.
    #[arg(long, default_value_t = 0.0)]
    long_cohort: f64,
    /// Label the long cohort's interactions as positive.
    #[arg(long)]
    labels: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(a.task, &a.rest),
        Command::Recommend(a) => eval(Task::Recommend, &a),
        Command::Classify(a) => eval(Task::Classify, &a),
        Command::BucketEval(a) => eval(Task::Buckets, &a),
        Command::Bench(a) => bench(&a),
        Command::Synthetic(a) => synthetic(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Runtime => 1,
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Unsupported => 4,
            })
        }
    }
}

fn load_data(path: &Path, config: &Config) -> Result<Dataset> {
    load_stream(path, LoadOptions { bipartite: config.data.bipartite })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `model.json` for the full model, `model-<ablations>.json` otherwise.
fn model_file(config: &Config) -> String {
    let active = config.model.ablation.active();
    if active.is_empty() {
        "model.json".into()
    } else {
        format!("model-{}.json", active.join("+"))
    }
}

fn row(metric: impl Into<String>, mode: &str, value: f64, ds: &Dataset, config: &Config) -> ResultRow {
    ResultRow {
        metric: metric.into(),
        dataset: ds.name().to_string(),
        mode: mode.to_string(),
        value,
        seed: config.train.seed,
        config_fingerprint: config.fingerprint(),
    }
}

/// Runs `body` between the initial and the final manifest write.
fn with_manifest(mut manifest: RunManifest, body: impl FnOnce(&mut RunManifest) -> Result<()>) -> Result<()> {
    manifest.write()?;
    let outcome = body(&mut manifest);
    manifest.finish(&outcome)?;
    outcome
}

fn train(args: &TrainArgs) -> Result<()> {
    let config = args.config.resolve()?;
    create_dir(&args.out)?;
    let started = Instant::now();
    let ds = load_data(&args.data, &config)?;
    let load_seconds = started.elapsed().as_secs_f64();
    let mut manifest = RunManifest::new(args.out.join("manifest.json"), "train", &config);
    manifest.dataset = Some(DatasetInfo::describe(&args.data, &ds)?);
    manifest.timings.insert("load".into(), load_seconds);
    with_manifest(manifest, |m| {
        let epochs_path = args.out.join("epochs.csv");
        let mut epochs = csv::Writer::from_path(&epochs_path).map_err(|e| Error::Data(e.to_string()))?;
        let mut write_error = None;
        let outcome = m.time("train", || {
            fit(&ds, &config, |r: &EpochRecord| {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  val AP {:.4}  AUC {:.4}  {:.1}s{}",
                    r.epoch,
                    r.loss,
                    r.val_ap,
                    r.val_auc,
                    r.seconds,
                    if r.improved { "  *" } else { "" }
                );
                if let Err(e) = epochs.serialize(r).and_then(|_| Ok(epochs.flush()?)) {
                    write_error.get_or_insert(e);
                }
            })
        })?;
        if let Some(e) = write_error {
            return Err(Error::Data(format!("{}: {e}", epochs_path.display())));
        }
        m.output("epochs", &epochs_path);

        let model_path = args.out.join(model_file(&config));
        outcome.best.save(&model_path)?;
        m.output("checkpoint", &model_path);
        m.checkpoint = Some(model_path.display().to_string());

        let report = m.time("eval", || {
            Evaluator::new(&outcome.best, &ds)?.link_prediction(outcome.split.test.clone(), LinkMode::Transductive)
        })?;
        let results_path = args.out.join("results.csv");
        write_results(
            &results_path,
            &[
                row("val_ap", "transductive", outcome.best.val_ap, &ds, &config),
                row("ap", report.mode, report.ap, &ds, &config),
                row("auc", report.mode, report.auc, &ds, &config),
            ],
        )?;
        m.output("results", &results_path);
        m.summary.insert("best_epoch".into(), outcome.best.epoch as f64);
        m.summary.insert("epochs_run".into(), outcome.history.len() as f64);
        m.summary.insert("val_ap".into(), outcome.best.val_ap);
        m.summary.insert("test_ap".into(), report.ap);
        m.summary.insert("test_auc".into(), report.auc);
        println!(
            "best epoch {}: val AP={:.4} test AP={:.4} AUC={:.4} -> {}",
            outcome.best.epoch,
            outcome.best.val_ap,
            report.ap,
            report.auc,
            model_path.display()
        );
        Ok(())
    })
}

fn eval(task: Task, args: &TaskArgs) -> Result<()> {
    let mode: LinkMode = args.mode.parse()?;
    let checkpoint = Checkpoint::load(&args.checkpoint)?;
    let config = checkpoint.config()?;
    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => args.checkpoint.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
    };
    create_dir(&out)?;
    let ds = load_data(&args.data, &config)?;
    let mut manifest = RunManifest::new(out.join(format!("manifest-{}.json", task.name())), &format!("eval {}", task.name()), &config);
    manifest.dataset = Some(DatasetInfo::describe(&args.data, &ds)?);
    manifest.checkpoint = Some(args.checkpoint.display().to_string());
    with_manifest(manifest, |m| {
        let evaluator = Evaluator::new(&checkpoint, &ds)?;
        let test = evaluator.split().test.clone();
        let results_path = out.join(format!("results-{}.csv", task.name()));
        match task {
            Task::Link => {
                let r = m.time("eval", || evaluator.link_prediction(test, mode))?;
                write_results(&results_path, &[row("ap", r.mode, r.ap, &ds, &config), row("auc", r.mode, r.auc, &ds, &config)])?;
                m.summary.insert("ap".into(), r.ap);
                m.summary.insert("auc".into(), r.auc);
                println!("{} AP={:.4} AUC={:.4} over {} interactions", r.mode, r.ap, r.auc, r.events);
            }
            Task::Recommend => {
                let r = m.time("eval", || evaluator.recommendation(test, &args.k))?;
                let rows: Vec<ResultRow> = r
                    .ks
                    .iter()
                    .zip(&r.recall)
                    .map(|(k, v)| row(format!("recall@{k}"), "transductive", *v, &ds, &config))
                    .collect();
                write_results(&results_path, &rows)?;
                let parts: Vec<String> = r.ks.iter().zip(&r.recall).map(|(k, v)| format!("Recall@{k}={v:.4}")).collect();
                for (k, v) in r.ks.iter().zip(&r.recall) {
                    m.summary.insert(format!("recall@{k}"), *v);
                }
                println!("{} over {} interactions", parts.join(" "), r.events);
            }
            Task::Classify => {
                let r = m.time("eval", || evaluator.node_classification())?;
                write_results(&results_path, &[row("auc", "classify", r.auc, &ds, &config)])?;
                m.summary.insert("auc".into(), r.auc);
                println!("AUC={:.4} (train {} / test {} labelled interactions)", r.auc, r.train_events, r.test_events);
            }
            Task::Buckets => {
                let r = m.time("eval", || evaluator.interval_buckets(test))?;
                let buckets_path = out.join("buckets.csv");
                write_bucket_csv(&buckets_path, &r)?;
                m.output("buckets", &buckets_path);
                for (b, ap) in r.ap.iter().enumerate() {
                    m.summary.insert(format!("bucket{b}_ap"), *ap);
                }
                let parts: Vec<String> = r.ap.iter().zip(&r.sizes).map(|(ap, n)| format!("{ap:.4}({n})")).collect();
                println!("bucket AP: {}", parts.join(" "));
                return Ok(());
            }
        }
        m.output("results", &results_path);
        Ok(())
    })
}

fn bench(args: &BenchArgs) -> Result<()> {
    let config = args.config.resolve()?;
    create_dir(&args.out)?;
    let ds = load_data(&args.data, &config)?;
    let mut manifest = RunManifest::new(args.out.join("manifest-bench.json"), "bench", &config);
    manifest.dataset = Some(DatasetInfo::describe(&args.data, &ds)?);
    with_manifest(manifest, |m| {
        let rows = m.time("bench", || time_epochs(&ds, &config, &args.counts))?;
        let path = args.out.join("bench.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(e.to_string()))?;
        for r in &rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
            println!("{:>8} edges  {:.3}s", r.edges, r.seconds);
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        m.output("bench", &path);
        if rows.len() >= 2 {
            let fit = bench_fit(&rows)?;
            m.summary.insert("slope".into(), fit.slope);
            m.summary.insert("r_squared".into(), fit.r_squared);
            println!("linear fit: {:.3e} s/edge, R^2={:.4}", fit.slope, fit.r_squared);
        }
        Ok(())
    })
}

fn synthetic(args: &SyntheticArgs) -> Result<()> {
    let ds = generate(&SyntheticConfig {
        edges: args.edges,
        users: args.users,
        items: args.items,
        communities: args.communities.unwrap_or(args.users),
        noise: args.noise,
        long_cohort: args.long_cohort,
        labels: args.labels,
        seed: args.seed,
        ..SyntheticConfig::default()
    })?;
    ds.write_csv(&args.out)?;
    println!("{} interactions -> {}", ds.len(), args.out.display());
    Ok(())
}
