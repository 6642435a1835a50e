use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clearcf_core::clear::Variant;
use clearcf_harness::pipeline::{self, Method};
use clearcf_harness::{ExperimentConfig, HarnessError, Result, Scale};

#[derive(Parser)]
#[command(name = "clearcf", version, about = "Counterfactual explanations for graph classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment manifest (JSON); omitted keys take the scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// desk or paper.
    #[arg(long, global = true)]
    scale: Option<String>,

    /// clear, clear-vae, clear-nc, clear-npa, clear-npx, clear-np, random, eg-ist or eg-rm.
    #[arg(long, global = true)]
    method: Option<String>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured dataset.
    GenData,
    /// Train the graph classifier.
    TrainClf,
    /// Train a counterfactual generator variant.
    TrainCfe,
    /// Explain every test graph with the selected method.
    Explain,
    /// Score stored counterfactuals.
    Evaluate,
    /// Train and score every generator variant over the configured seeds.
    Ablate,
    /// Hyperparameter grid over alpha, beta, batch size and latent width.
    Sweep,
    /// Export community degrees of originals and counterfactuals.
    Scatter,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let scale = cli.scale.as_deref().map(Scale::parse).transpose()?;
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path, scale)?,
        None => ExperimentConfig::from_json(&serde_json::json!({}), scale)?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn method(cli: &Cli, default: &str) -> Result<Method> {
    Method::parse(cli.method.as_deref().unwrap_or(default))
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    match cli.command {
        Command::GenData => {
            let ds = pipeline::cmd_gen_data(&cfg)?;
            println!("wrote {} graphs to {}", ds.graphs.len(), cfg.dataset_path().display());
        }
        Command::TrainClf => {
            let r = pipeline::cmd_train_clf(&cfg)?;
            println!("best epoch {} validation accuracy {:.4}", r.best_epoch, r.best_val_accuracy);
        }
        Command::TrainCfe => {
            let Method::Clear(v) = method(cli, Variant::Clear.name())? else {
                return Err(HarnessError::Config("train-cfe trains generator variants only".into()));
            };
            let r = pipeline::cmd_train_cfe(&cfg, v)?;
            println!("{}: best epoch {} validation validity {:.4}", v.name(), r.best_epoch, r.best_val_validity);
        }
        Command::Explain => {
            let m = method(cli, Variant::Clear.name())?;
            let cfs = pipeline::cmd_explain(&cfg, m)?;
            println!("{}: {} counterfactuals", m.name(), cfs.iter().map(Vec::len).sum::<usize>());
        }
        Command::Evaluate => {
            let methods = cli.method.as_deref().map(Method::parse).transpose()?.into_iter().collect::<Vec<_>>();
            for r in pipeline::cmd_evaluate(&cfg, &methods)? {
                println!(
                    "{:<10} validity {:.4} proximity_x {:.4} proximity_a {:.4} causality {:.4} time/cf {:.6}s",
                    r.method, r.validity, r.proximity_x, r.proximity_a, r.causality, r.time_per_cf
                );
            }
        }
        Command::Ablate => {
            let rows = pipeline::cmd_ablate(&cfg)?;
            println!("{} ablation rows", rows.len());
        }
        Command::Sweep => {
            let rows = pipeline::cmd_sweep(&cfg)?;
            println!("{} sweep rows", rows.len());
        }
        Command::Scatter => {
            let rows = pipeline::cmd_scatter(&cfg)?;
            println!("{} scatter rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
