use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use polyvis::fusion::FusionMethod;
use polyvis::harness::experiment::{self, mask_tsv, sweep_tsv};
use polyvis::harness::metrics::OutputDir;
use polyvis::harness::ExperimentConfig;
use polyvis::positional::PeScheme;
use polyvis::training::{grad_check, Phase};
use polyvis::{Error, Result};

#[derive(Parser)]
#[command(name = "polyvis", version, about = "Poly-visual-expert fusion laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults to the built-in experiment.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, evaluate and analyse one experiment.
    Run(Common),
    /// Token and PE budget for the configured experts.
    Budget {
        #[command(flatten)]
        common: Common,
        /// PE scheme to account for (defaults to the configured one).
        #[arg(long)]
        scheme: Option<PeScheme>,
        /// Text tokens next to the image.
        #[arg(long, default_value_t = 8)]
        prompt_len: usize,
    },
    /// Finite-difference gradient check on micro models.
    Gradcheck(Common),
    /// Train, then mask each expert in turn.
    Mask(Common),
    /// Train one model per expert order.
    SweepOrder(Common),
    /// Train one model per PE scheme.
    SweepPe(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut config = match &common.config {
        Some(path) => ExperimentConfig::from_path(path)?,
        None => ExperimentConfig::default_with_seed(0),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.output_dir = out.clone();
    }
    Ok(config.validated()?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let config = load(&common)?;
            let summary = experiment::run_experiment(&config, &config.output_dir)?;
            println!("eval accuracy {:.4}", summary.trained.eval.accuracy);
            for (a, v) in &summary.trained.eval.by_attribute {
                println!("  {a}: {v:.4}");
            }
            print!("{}", summary.contribution.to_tsv());
            println!("outputs written to {}", config.output_dir.display());
        }
        Command::Budget {
            common,
            scheme,
            prompt_len,
        } => {
            let mut config = load(&common)?;
            if let Some(s) = scheme {
                config.pe_scheme = s;
            }
            let report = polyvis::analysis::token_budget_report(
                config.expert_specs(),
                &config.fusion_config(),
                config.pe_scheme,
                prompt_len,
                config.decoder.max_len,
            )?;
            print!("{}", report.to_tsv());
        }
        Command::Gradcheck(common) => {
            let seed = load(&common)?.seed;
            let mut worst: f64 = 0.0;
            for method in [FusionMethod::Mlp, FusionMethod::Qformer] {
                for scheme in PeScheme::ALL {
                    let (mut model, batch) = experiment::micro_model(method, scheme, seed)?;
                    let phase = experiment::micro_phase(Phase::Finetune);
                    let report = grad_check(&mut model, &batch, &phase)?;
                    println!(
                        "{:?}\t{scheme}\tmax_rel_err={:.3e}\tscalars={}\tworst={}",
                        method,
                        report.max(),
                        report.scalars,
                        report.worst
                    );
                    worst = worst.max(report.max());
                }
            }
            if worst > 1e-5 {
                return Err(Error::GradCheck(format!("max relative error {worst:.3e} exceeds 1e-5")));
            }
        }
        Command::Mask(common) => {
            let config = load(&common)?;
            let trained = experiment::train(&config)?;
            let rows = experiment::mask_study(&trained.model, &trained.data.eval)?;
            let text = mask_tsv(&rows);
            print!("{text}");
            let mut dir = OutputDir::create(&config.output_dir)?;
            dir.write("mask.tsv", text)?;
            dir.finish()?;
        }
        Command::SweepOrder(common) => {
            let config = load(&common)?;
            let rows = experiment::order_sweep(&config, &config.analysis.orders)?;
            let text = sweep_tsv(&rows);
            print!("{text}");
            let mut dir = OutputDir::create(&config.output_dir)?;
            dir.write("order.tsv", text)?;
            dir.finish()?;
        }
        Command::SweepPe(common) => {
            let config = load(&common)?;
            let rows = experiment::pe_sweep(&config, &config.analysis.pe_schemes)?;
            let text = sweep_tsv(&rows);
            print!("{text}");
            let mut dir = OutputDir::create(&config.output_dir)?;
            dir.write("pe.tsv", text)?;
            dir.finish()?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
