//! `biomarker`: runs pipeline steps over a shared run directory.
//!
//! Exit codes: 0 success, 2 invalid input or configuration (including a
//! missing or stale upstream step), 1 runtime failure.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use biomarker_core::pipeline::{ImageSubset, RunConfig, RunDir, Step, CONFIG_FILE};
use biomarker_core::review::ReviewStore;
use biomarker_core::{Error, Exec};
use clap::{Args, Parser, Subcommand, ValueEnum};
use review_server::{AppState, Assets, ServerConfig};

#[derive(Parser)]
#[command(name = "biomarker", version, about = "Self-supervised biomarker proposal pipeline for retinal OCT")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON). Defaults to <run-dir>/config.json, then the desk config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory. Defaults to $BIOMARKER_RUN_ROOT/seed-<seed>, else ./runs/seed-<seed>.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    #[arg(long, env = "BIOMARKER_RUN_ROOT", global = true, hide_env_values = true)]
    run_root: Option<PathBuf>,
    /// Overrides the run seed and the training seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Disable data-parallel execution.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Labelled,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as JSON.
    Config,
    /// Generate the synthetic cohort.
    Synth {
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Self-supervised BYOL pretraining.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Extract pooled encoder features.
    Extract {
        #[arg(long, value_enum)]
        subset: Option<Subset>,
        #[arg(long)]
        normalize: bool,
    },
    /// k-means over the features, VA-ordered.
    Cluster {
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Linear probe and GradCAM maps.
    Attribute {
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Per-cluster statistics and grading conditionals.
    Stats,
    /// Prognostic benchmark over repeated seeds.
    Evaluate {
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        folds: Option<usize>,
    },
    /// Every step in order.
    All,
    /// Serve the review API over a completed run.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "BIOMARKER_CURATOR_TOKEN", hide_env_values = true)]
        curator_token: Option<String>,
    },
}

fn load_config(common: &Common, run_dir: &std::path::Path) -> Result<RunConfig, Error> {
    let path = match &common.config {
        Some(p) => Some(p.clone()),
        None => Some(run_dir.join(CONFIG_FILE)).filter(|p| p.exists()),
    };
    match path {
        Some(p) => {
            if !p.exists() {
                return Err(Error::invalid(format!("config file {} does not exist", p.display())));
            }
            let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            RunConfig::from_json(&text)
        }
        None => Ok(RunConfig::desk()),
    }
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common, command: &Command) {
    if let Some(s) = common.seed {
        cfg.seed = s;
        cfg.train.seed = s;
    }
    match *command {
        Command::Synth { patients: Some(n) } => cfg.synth.n_patients = n,
        Command::Train { steps, batch_size } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
        }
        Command::Extract { subset, normalize } => {
            if let Some(s) = subset {
                cfg.extract.subset = match s {
                    Subset::Labelled => ImageSubset::Labelled,
                    Subset::All => ImageSubset::All,
                };
            }
            if normalize {
                cfg.extract.normalize = true;
            }
        }
        Command::Cluster { k, temperature } => {
            if let Some(k) = k {
                cfg.cluster.k = k;
                cfg.evaluate.clusters = k;
            }
            if temperature.is_some() {
                cfg.cluster.temperature = temperature;
            }
        }
        Command::Attribute { limit: Some(l) } => cfg.attribute.limit = Some(l),
        Command::Evaluate { seeds, folds } => {
            if let Some(n) = seeds {
                cfg.evaluate.seeds = (0..n).collect();
            }
            if let Some(f) = folds {
                cfg.evaluate.folds = f;
            }
        }
        _ => {}
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let common = &cli.common;
    let seed_hint = common.seed.unwrap_or(0);
    let run_dir = match (&common.run_dir, &common.run_root) {
        (Some(d), _) => d.clone(),
        (None, Some(root)) => root.join(format!("seed-{seed_hint}")),
        (None, None) => PathBuf::from("runs").join(format!("seed-{seed_hint}")),
    };
    let mut cfg = load_config(common, &run_dir)?;
    apply_overrides(&mut cfg, common, &cli.command);
    let exec = if common.sequential { Exec::Sequential } else { Exec::default() };
    let run = RunDir::new(&run_dir, cfg, exec)?;
    let step = match cli.command {
        Command::Config => {
            print!("{}", run.config.to_json());
            return Ok(());
        }
        Command::Synth { .. } => Step::Synth,
        Command::Train { .. } => Step::Train,
        Command::Extract { .. } => Step::Extract,
        Command::Cluster { .. } => Step::Cluster,
        Command::Attribute { .. } => Step::Attribute,
        Command::Stats => Step::Stats,
        Command::Evaluate { .. } => Step::Evaluate,
        Command::All => {
            for step in Step::ALL {
                run.run(step)?;
            }
            print_report(&run);
            return Ok(());
        }
        Command::Serve { addr, curator_token } => return serve(&run, addr, curator_token),
    };
    let marker = run.run(step)?;
    println!(
        "{}: done, {} files, outputs {}",
        step.name(),
        marker.outputs.len(),
        &marker.outputs_digest[..16]
    );
    if step == Step::Evaluate {
        print_report(&run);
    }
    Ok(())
}

fn print_report(run: &RunDir) {
    let p = run.step_dir(Step::Evaluate).join("report.txt");
    if let Ok(text) = std::fs::read_to_string(p) {
        print!("{text}");
    }
}

fn serve(run: &RunDir, addr: SocketAddr, curator_token: Option<String>) -> Result<(), Error> {
    run.verify(Step::Attribute)?;
    let catalog = run.review_catalog()?;
    let store = ReviewStore::open(&run.review_dir(), catalog)?;
    let assets = Assets {
        images_dir: run.images_dir(),
        maps_dir: run.maps_dir(),
    };
    let state = AppState::new(store, assets, ServerConfig { curator_token });
    let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io(&run.root, e))?;
    rt.block_on(review_server::serve(addr, state))
        .map_err(|e| Error::io(&run.root, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
