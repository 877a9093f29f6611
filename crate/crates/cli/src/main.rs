use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fmap_cli::{cmd_eval, cmd_fit, cmd_sweep, cmd_synth, CliError, CliResult, RunConfig, EXIT_OK};
use fmap_ood::clustering::ClusterMethod;
use fmap_ood::Distance;

#[derive(Parser)]
#[command(name = "fmap", version, about = "Flag unknown objects in one-stage detector output from feature maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args, Clone)]
struct FitArgs {
    #[arg(long)]
    fit_manifest: Option<PathBuf>,
    #[arg(long, value_parser = parse_cluster)]
    cluster: Option<ClusterMethod>,
    #[arg(long, value_parser = parse_distance)]
    distance: Option<Distance>,
}

#[derive(Args, Clone)]
struct EvalArgs {
    /// Repeat for several evaluation sets.
    #[arg(long = "eval-manifest")]
    eval_manifests: Vec<PathBuf>,
    /// Add unknown-object proposals to every run.
    #[arg(long)]
    eul: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit centroids and thresholds; writes bank.json.
    Fit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// Evaluate every run at every confidence threshold.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Model file (default: <out>/bank.json).
        #[arg(long)]
        bank: Option<PathBuf>,
    },
    /// Fit every needed variant, evaluate the grid and write the Pareto front.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        fit: FitArgs,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        images: Option<usize>,
    },
}

fn parse_cluster(s: &str) -> Result<ClusterMethod, String> {
    s.parse().map_err(|e: fmap_ood::Error| e.to_string())
}

fn parse_distance(s: &str) -> Result<Distance, String> {
    s.parse().map_err(|e: fmap_ood::Error| e.to_string())
}

fn base_config(common: &Common) -> CliResult<RunConfig> {
    if let Some(n) = common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = common.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    Ok(cfg)
}

fn apply_fit(cfg: &mut RunConfig, a: &FitArgs) {
    if let Some(p) = &a.fit_manifest {
        cfg.fit_manifest = Some(p.clone());
    }
    if let Some(c) = a.cluster {
        cfg.fit.cluster.method = c;
    }
    if let Some(d) = a.distance {
        cfg.fit.distance = d;
    }
}

fn apply_eval(cfg: &mut RunConfig, a: &EvalArgs) {
    if !a.eval_manifests.is_empty() {
        cfg.eval_manifests = a.eval_manifests.clone();
    }
    if a.eul {
        cfg.runs.iter_mut().for_each(|r| r.eul = true);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Fit { common, fit } => {
            let mut cfg = base_config(&common)?;
            apply_fit(&mut cfg, &fit);
            cmd_fit(&cfg).map(|_| ())
        }
        Command::Eval { common, eval, bank } => {
            let mut cfg = base_config(&common)?;
            apply_eval(&mut cfg, &eval);
            if bank.is_some() {
                cfg.bank = bank;
            }
            cmd_eval(&cfg).map(|_| ())
        }
        Command::Sweep { common, fit, eval } => {
            let mut cfg = base_config(&common)?;
            apply_fit(&mut cfg, &fit);
            apply_eval(&mut cfg, &eval);
            cmd_sweep(&cfg).map(|_| ())
        }
        Command::Synth { common, images } => {
            let mut cfg = base_config(&common)?;
            if let Some(n) = images {
                cfg.synth.images = n;
            }
            cmd_synth(&cfg)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
