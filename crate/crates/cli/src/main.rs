use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use lope_core::experiment::{
    expand_sweep, parse_seeds, Execution, run_ablation, run_seeds, seed_dir, RunSummary, SweepAxis, Variant,
};
use lope_core::rundir::RunDir;
use lope_core::trainer::{IterationReport, Observer, RunStatus, Trainer};
use lope_core::TrainConfig;

#[derive(Parser, Debug)]
#[command(name = "lope", version, about = "Preference-guided policy optimization: train, evaluate, ablate, serve, export")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one run per seed.
    Train(TrainArgs),
    /// Evaluate the latest checkpoint of a run directory.
    Eval(EvalArgs),
    /// Run the ablation variants (optionally over a parameter sweep) and tabulate them.
    Ablate(AblateArgs),
    /// Serve the run-management and annotation HTTP API.
    Serve(ServeArgs),
    /// Merge metrics of several runs into mean/stderr curves (CSV + SVG).
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// JSON config file; keys not given fall back to the preset of its env kind.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    print_config: bool,
    /// Dotted `key=value` overrides, e.g. `mislabel_ratio=0.2 env.kind=line`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seeds: `N`, inclusive range `A..B`, or a comma list. Defaults to the config seed.
    #[arg(long)]
    seeds: Option<String>,
    /// Output root; each seed writes to `<out>/seed_<s>`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Seeds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Keep finished runs whose stored config matches instead of retraining them.
    #[arg(long)]
    resume: bool,
    /// Log progress every this many iterations (0 disables).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Run directory containing `checkpoints/`.
    run: PathBuf,
    /// Specific checkpoint file instead of the latest one.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    episodes: usize,
    /// Seed of the evaluation rollouts.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "0..9")]
    seeds: String,
    #[arg(long, default_value = "ablation")]
    out: PathBuf,
    /// Swept key with comma-separated values, e.g. `mislabel_ratio=0,0.1,0.2,0.3`. Repeatable.
    #[arg(long = "grid", value_name = "KEY=V1,V2,...")]
    grid: Vec<String>,
    /// Variants to run (comma list of full, no_pi, no_pg, ppo).
    #[arg(long, default_value = "full,no_pi,no_pg,ppo")]
    variants: String,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Keep finished runs whose stored config matches instead of retraining them.
    #[arg(long)]
    resume: bool,
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: std::net::SocketAddr,
    /// Persist each run under `<out>/<run id>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run directories holding `metrics.csv`.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    #[arg(long, default_value = "export")]
    out: PathBuf,
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<lope_core::Error> for Failure {
    fn from(e: lope_core::Error) -> Self {
        match e {
            lope_core::Error::InvalidConfig { .. } | lope_core::Error::InvalidMap(_) => Failure::Config(e.into()),
            other => Failure::Runtime(other.into()),
        }
    }
}

fn config_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Config(e.into())
}

fn runtime_err(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Returns the resolved config, or None after printing it for `--print-config`.
fn resolve_config(args: &ConfigArgs) -> Result<Option<TrainConfig>, Failure> {
    let partial = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))
                .map_err(config_err)?;
            let v: serde_json::Value = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))
                .map_err(config_err)?;
            Some(v)
        }
        None => None,
    };
    let overrides = args
        .overrides
        .iter()
        .map(|o| lope_core::config::parse_override(o))
        .collect::<Result<Vec<_>, _>>()?;
    let cfg = TrainConfig::resolve(partial.as_ref(), &overrides)?;
    if args.print_config {
        println!("{}", cfg.to_json_pretty()?);
        return Ok(None);
    }
    Ok(Some(cfg))
}

/// Logs progress every `every` iterations.
fn progress(seed: u64, every: usize) -> Box<dyn Observer + Send> {
    Box::new(move |_: &Trainer, r: &IterationReport| {
        let m = &r.metrics;
        if every > 0 && (m.iteration + 1) % every == 0 {
            tracing::info!(
                seed,
                iteration = m.iteration,
                success = m.success_rate,
                avg_return = m.avg_return,
                mmd = m.mmd_metric,
                p_size = m.p_size,
                "progress"
            );
        }
        ControlFlow::Continue(())
    })
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let Some(cfg) = resolve_config(&a.config)? else {
        return Ok(());
    };
    let seeds = match &a.seeds {
        Some(s) => parse_seeds(s)?,
        None => vec![cfg.seed],
    };
    let every = a.log_every;
    let results = run_seeds(&cfg, &seeds, Some(&a.out), Execution { jobs: a.jobs, resume: a.resume }, &|s| progress(s, every));
    let mut failed = Vec::new();
    for (seed, res) in results {
        match res {
            Ok(rec) if rec.status != RunStatus::Failed => {
                let s = RunSummary::of(&rec);
                println!(
                    "seed {seed}: final_success={:.3} auc={:.3} first_0.5={} dir={}",
                    s.final_success,
                    s.auc_success,
                    s.first_half.map_or("-".to_string(), |i| i.to_string()),
                    seed_dir(&a.out, seed).display()
                );
            }
            Ok(rec) => failed.push(format!("seed {seed}: {}", rec.error.unwrap_or_default())),
            Err(e) => failed.push(format!("seed {seed}: {e}")),
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(runtime_err(anyhow!("{} run(s) failed:\n{}", failed.len(), failed.join("\n"))))
    }
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let dir = RunDir::open(&a.run);
    let path = match a.checkpoint {
        Some(p) => p,
        None => dir
            .latest_checkpoint()?
            .ok_or_else(|| runtime_err(anyhow!("no checkpoints under {}", a.run.display())))?,
    };
    let ck = RunDir::read_checkpoint(&path)?;
    let trainer = Trainer::restore(ck)?;
    let r = trainer.evaluate_with_seed(a.episodes, a.seed)?;
    let out = serde_json::json!({
        "checkpoint": path,
        "iteration": trainer.iteration(),
        "episodes": a.episodes,
        "success_rate": r.success_rate,
        "avg_return": r.avg_return,
        "mean_length": r.mean_length,
    });
    println!("{}", serde_json::to_string_pretty(&out).map_err(runtime_err)?);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let Some(cfg) = resolve_config(&a.config)? else {
        return Ok(());
    };
    let seeds = parse_seeds(&a.seeds)?;
    let axes = a.grid.iter().map(|g| g.parse::<SweepAxis>()).collect::<Result<Vec<_>, _>>()?;
    let variants = a
        .variants
        .split(',')
        .map(|v| v.trim().parse::<Variant>())
        .collect::<Result<Vec<_>, _>>()?;
    let points = expand_sweep(&axes);
    let every = a.log_every;
    let rows = run_ablation(&cfg, &points, &variants, &seeds, &a.out, Execution { jobs: a.jobs, resume: a.resume }, &|s| progress(s, every))?;
    println!("point,variant,seed,final_success,auc_success,first_iter_0.5");
    for r in &rows {
        println!(
            "{},{},{},{:.4},{:.4},{}",
            r.point,
            r.variant,
            r.summary.seed,
            r.summary.final_success,
            r.summary.auc_success,
            r.summary.first_half.map_or(String::new(), |i| i.to_string())
        );
    }
    eprintln!("wrote {}", a.out.join("ablation.csv").display());
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> Result<(), Failure> {
    let rt = tokio::runtime::Runtime::new().map_err(runtime_err)?;
    let state = lope_service::AppState::new(a.out);
    rt.block_on(lope_service::serve(a.addr, state))
        .with_context(|| format!("serving on {}", a.addr))
        .map_err(runtime_err)
}

fn cmd_export(a: ExportArgs) -> Result<(), Failure> {
    let report = lope_core::export::export_runs(&a.runs, &a.out)?;
    for (dir, why) in &report.skipped {
        eprintln!("skipped {}: {why}", dir.display());
    }
    println!(
        "merged {} run(s): {} {}",
        report.used.len(),
        display(&report.csv_path),
        display(&report.svg_path)
    );
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}
