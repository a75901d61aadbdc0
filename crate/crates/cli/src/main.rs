//! `featherlite` command-line interface: dataset fetching, pipeline
//! training, evaluation, inference benchmarking, and report regeneration.
//!
//! Exit codes: 0 on success, 1 on a usage error, 2 on a runtime failure.

mod fetch;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};

use featherlite_core::benchreport::{
    self, GraphRunner, MonotonicClock, ReportBundle,
};
use featherlite_core::checkpoint::load_checkpoint;
use featherlite_core::dataio::{self, DatasetName};
use featherlite_core::pipeline::{
    self, evaluate_model, PipelineConfig, StageSelect,
};
use featherlite_core::rng::RngStream;
use featherlite_core::tensor::Tensor;
use featherlite_core::trainer::TrainHistory;

const ENV_DATA_DIR: &str = "FEATHERLITE_DATA_DIR";

#[derive(Parser)]
#[command(
    name = "featherlite",
    version,
    about = "Lightweight dual-branch CNN pipeline: train, evaluate, benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Download and verify a dataset into the data directory.
    FetchData {
        /// mnist, fashion, or cifar10
        dataset: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Read archives from a local directory instead of the network.
        #[arg(long)]
        from_dir: Option<PathBuf>,
        /// Enforce this SHA-256 for the cifar-10 archive.
        #[arg(long)]
        sha256: Option<String>,
    },
    /// Run the training pipeline (stages s1, s2, s3, or all).
    Train {
        /// mnist, fashion, or cifar10
        dataset: String,
        #[arg(long, default_value = "all")]
        stage: String,
        #[arg(long)]
        seed: Option<u64>,
        /// JSON pipeline config; explicit flags override its values.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run directory for checkpoints, metrics, and reports.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// 0 = all cores, 1 = sequential.
        #[arg(long)]
        threads: Option<usize>,
        /// Smoke preset: 10k train / 2k val subset, halved epoch caps.
        #[arg(long)]
        smoke: bool,
        #[arg(long)]
        verbose: bool,
    },
    /// Evaluate a checkpoint on a dataset's test split.
    Eval {
        /// mnist, fashion, or cifar10
        dataset: String,
        /// Checkpoint base path (or its .manifest.json).
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Evaluate only the first N test samples.
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// Measure single-sample latency and a power-of-two batch throughput sweep.
    Bench {
        /// Checkpoint base path (or its .manifest.json).
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        warmup: usize,
        #[arg(long, default_value_t = 14)]
        max_batch_exp: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Regenerate derived report files (curves, summaries) from a run directory.
    Report { run_dir: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help / --version land here too; they are not usage errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn resolve_data_dir(flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| std::env::var_os(ENV_DATA_DIR).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// Accepts `runs/x/final`, `runs/x/final.manifest.json`, or
/// `runs/x/final.weights.bin` and yields the checkpoint base path.
fn resolve_ckpt_base(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    for suffix in [".manifest.json", ".weights.bin"] {
        if let Some(stripped) = s.strip_suffix(suffix) {
            return PathBuf::from(stripped);
        }
    }
    path.to_path_buf()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::FetchData {
            dataset,
            data_dir,
            from_dir,
            sha256,
        } => {
            let name = DatasetName::parse(&dataset)?;
            let data_dir = resolve_data_dir(data_dir);
            fetch::fetch_dataset(name, &data_dir, from_dir.as_deref(), sha256.as_deref())
        }
        Command::Train {
            dataset,
            stage,
            seed,
            config,
            out,
            data_dir,
            batch_size,
            threads,
            smoke,
            verbose,
        } => cmd_train(
            &dataset, &stage, seed, config, out, data_dir, batch_size, threads, smoke, verbose,
        ),
        Command::Eval {
            dataset,
            model,
            data_dir,
            limit,
            threads,
        } => cmd_eval(&dataset, &model, data_dir, limit, threads),
        Command::Bench {
            model,
            reps,
            warmup,
            max_batch_exp,
            out,
        } => cmd_bench(&model, reps, warmup, max_batch_exp, &out),
        Command::Report { run_dir } => cmd_report(&run_dir),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: &str,
    stage: &str,
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    data_dir: Option<PathBuf>,
    batch_size: Option<usize>,
    threads: Option<usize>,
    smoke: bool,
    verbose: bool,
) -> Result<()> {
    let stage = StageSelect::parse(stage)?;

    // Precedence: defaults < config file < smoke preset < explicit flags.
    let mut cfg: PipelineConfig = match &config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            serde_json::from_str(&text)
                .with_context(|| format!("parsing config {}", path.display()))?
        }
        None => PipelineConfig::default(),
    };
    if smoke {
        let base = PipelineConfig::smoke(dataset, cfg.seed);
        cfg.stage_caps = base.stage_caps;
        cfg.limits = base.limits;
    }
    cfg.dataset = dataset.to_string();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    if let Some(t) = threads {
        cfg.threads = t;
    }
    cfg.verbose = cfg.verbose || verbose;
    cfg.data_dir = Some(resolve_data_dir(data_dir.or(cfg.data_dir.take())));
    let run_dir = out
        .or(cfg.out_dir.take())
        .unwrap_or_else(|| PathBuf::from(format!("runs/{dataset}")));
    cfg.out_dir = Some(run_dir.clone());

    std::fs::create_dir_all(&run_dir)?;
    write_run_manifest(&run_dir, &cfg)?;

    let summary = pipeline::run_pipeline(&cfg, stage, &run_dir)?;
    for (name, history) in &summary.stage_histories {
        let last = history.epochs.last();
        println!(
            "stage {name}: {} epochs{}{}",
            history.epochs.len(),
            history
                .stopped_early
                .map(|e| format!(", early stop at {e}"))
                .unwrap_or_default(),
            last.map(|m| format!(", final val_acc {:?}", m.val_accuracy))
                .unwrap_or_default()
        );
    }
    if let Some(report) = &summary.test_report {
        println!();
        println!(
            "test accuracy: {:.4} on {} samples",
            report.accuracy, report.samples
        );
        println!("trainable parameters: {}", report.size_summary);
        println!();
        print!("{}", report.report.to_text());
        println!("artifacts under {}", run_dir.display());
    }
    Ok(())
}

/// Deterministic run manifest: resolved config, its hash, and the tool
/// version. No timestamps, so identical inputs produce identical manifests.
fn write_run_manifest(run_dir: &Path, cfg: &PipelineConfig) -> Result<()> {
    let config_json = serde_json::to_string_pretty(cfg)?;
    let mut hasher = Sha256::new();
    hasher.update(config_json.as_bytes());
    let digest: String = hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect();
    let manifest = serde_json::json!({
        "tool": "featherlite",
        "version": env!("CARGO_PKG_VERSION"),
        "config_sha256": digest,
        "config": serde_json::from_str::<serde_json::Value>(&config_json)?,
    });
    std::fs::write(
        run_dir.join("run_manifest.json"),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    Ok(())
}

fn cmd_eval(
    dataset: &str,
    model: &Path,
    data_dir: Option<PathBuf>,
    limit: Option<usize>,
    threads: usize,
) -> Result<()> {
    let name = DatasetName::parse(dataset)?;
    let data_dir = resolve_data_dir(data_dir);
    let (graph, meta) = load_checkpoint(&resolve_ckpt_base(model))?;
    let pair = dataio::load_dataset(name, &data_dir)?;
    let test = match limit {
        Some(n) => pair.test.head(n),
        None => pair.test,
    };
    let report = evaluate_model(&graph, &test, dataset, threads)?;
    if let Some(metric) = meta.selected_metric {
        eprintln!(
            "checkpoint selected by {metric}{}",
            meta.metric_value
                .map(|v| format!(" = {v:.4}"))
                .unwrap_or_default()
        );
    }
    println!(
        "test accuracy: {:.4} on {} samples",
        report.accuracy, report.samples
    );
    println!("trainable parameters: {}", report.size_summary);
    println!();
    print!("{}", report.report.to_text());
    Ok(())
}

fn cmd_bench(model: &Path, reps: usize, warmup: usize, max_batch_exp: u32, out: &Path) -> Result<()> {
    let (graph, _) = load_checkpoint(&resolve_ckpt_base(model))?;
    let input_shape = graph
        .input_shapes()
        .first()
        .context("model has no inputs")?
        .clone();

    // Deterministic synthetic inputs; forward cost does not depend on pixel
    // values. Measured span is the model forward pass only.
    let mut samples = Vec::new();
    let mut rng = RngStream::new(0, "bench/samples");
    for _ in 0..16 {
        let mut t = Tensor::zeros(&input_shape);
        for v in t.data_mut() {
            *v = rng.next_f64() as f32;
        }
        samples.push(t);
    }

    let label = model.display().to_string();
    let mut runner = GraphRunner::new(&graph, samples)?;
    let mut clock = MonotonicClock::new();
    eprintln!("measuring latency ({reps} reps, {warmup} warmup)...");
    let latency = benchreport::measure_latency(&mut runner, &mut clock, &label, reps, warmup)?;
    eprintln!(
        "latency: {:.3} ms mean, {:.3} ms std",
        latency.mean_ms, latency.std_ms
    );
    eprintln!("sweeping batch sizes 2^0..2^{max_batch_exp} ({reps} reps each)...");
    let throughput =
        benchreport::measure_throughput(&mut runner, &mut clock, &label, max_batch_exp, reps)?;
    for row in &throughput.rows {
        eprintln!(
            "batch {:>6}: {:>12.1} samples/sec (std {:.1})",
            row.batch_size, row.mean_samples_per_sec, row.std_samples_per_sec
        );
    }

    let bundle = ReportBundle {
        dataset: None,
        accuracy: None,
        size: Some(benchreport::size_report(&graph)),
        latency: Some(latency),
        throughput: Some(throughput),
        training_curves: Vec::new(),
    };
    let written = benchreport::emit_reports(&bundle, out)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

/// Rebuilds all derived report files from a run directory without
/// retraining: training-curve SVGs from the stage CSVs plus the summary.
fn cmd_report(run_dir: &Path) -> Result<()> {
    let mut bundle = ReportBundle::default();

    let stages = [
        ("s1", "stage_s1/metrics.csv"),
        ("s2_head", "stage_s2_head/metrics.csv"),
        ("s2_full", "stage_s2_full/metrics.csv"),
    ];
    for (label, rel) in stages {
        let path = run_dir.join(rel);
        if path.exists() {
            let history = TrainHistory::from_csv(&std::fs::read_to_string(&path)?)?;
            bundle.training_curves.push((label.to_string(), history));
        }
    }
    for fold in 0..16 {
        let path = run_dir.join(format!("stage_s3/metrics_fold{fold}.csv"));
        if !path.exists() {
            break;
        }
        let history = TrainHistory::from_csv(&std::fs::read_to_string(&path)?)?;
        bundle
            .training_curves
            .push((format!("s3_fold{fold}"), history));
    }

    let report_path = run_dir.join("final/report.json");
    if report_path.exists() {
        let report: featherlite_core::pipeline::TestReport =
            serde_json::from_str(&std::fs::read_to_string(&report_path)?)?;
        bundle.dataset = Some(report.dataset.clone());
        bundle.accuracy = Some(report.accuracy);
    }
    let final_base = run_dir.join("final/final");
    if featherlite_core::checkpoint::checkpoint_paths(&final_base).0.exists() {
        let (graph, _) = load_checkpoint(&final_base)?;
        bundle.size = Some(benchreport::size_report(&graph));
    }

    if bundle.training_curves.is_empty() && bundle.accuracy.is_none() && bundle.size.is_none() {
        anyhow::bail!(
            "{} holds no recognizable run artifacts",
            run_dir.display()
        );
    }
    let out = run_dir.join("report");
    let written = benchreport::emit_reports(&bundle, &out)?;
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}
