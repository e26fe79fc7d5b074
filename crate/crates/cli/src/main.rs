//! `deqr` command-line driver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use deqr::harness::{gradcheck, run_experiment, RunOptions, Stage};

#[derive(Parser)]
#[command(name = "deqr", version, about = "Deep equilibrium robustness experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or ingest) the dataset and write it as CSV.
    GenData(Common),
    /// Train and write the checkpoint and history.
    Train(Common),
    /// Ready-made attack and the full intermediate-attack grid.
    Attack(Common),
    /// Evaluate the entropy-reduction defense.
    Defend(Common),
    /// Full evaluation report with plot data.
    Report(Common),
    /// Run the configured stages, or those given with --stage.
    Run {
        #[command(flatten)]
        common: Common,
        /// Stage to run; repeatable.
        #[arg(long = "stage")]
        stages: Vec<String>,
    },
    /// Compare reverse-mode gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

fn run_stage(common: &Common, stages: Option<Vec<Stage>>) -> deqr::Result<()> {
    let opts = RunOptions {
        seed: common.seed,
        out: common.out.clone(),
        stages,
    };
    let summary = run_experiment(&common.config, &opts)?;
    for p in &summary.artifacts {
        println!("wrote {}", p.display());
    }
    if let Some(r) = &summary.report {
        println!(
            "clean {:.4}  ready-made {:.4}  grid-min {:.4} at (i={}, K_a={}, λ={})",
            r.clean_accuracy,
            r.readymade_pgd_accuracy,
            r.grid_min_accuracy,
            r.grid_argmin.i,
            r.grid_argmin.k_a,
            r.grid_argmin.lambda
        );
        if let Some(d) = &r.defense {
            println!("defended grid-min {:.4}", d.grid_min_accuracy);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData(c) => run_stage(c, Some(vec![Stage::GenData])),
        Command::Train(c) => run_stage(c, Some(vec![Stage::Train])),
        Command::Attack(c) => run_stage(c, Some(vec![Stage::Attack])),
        Command::Defend(c) => run_stage(c, Some(vec![Stage::Defend])),
        Command::Report(c) => run_stage(c, Some(vec![Stage::Report])),
        Command::Run { common, stages } => stages
            .iter()
            .map(|s| s.parse::<Stage>())
            .collect::<deqr::Result<Vec<_>>>()
            .and_then(|st| run_stage(common, if st.is_empty() { None } else { Some(st) })),
        Command::Gradcheck { seed, instances } => gradcheck(*seed, *instances, 5).map(|s| {
            println!(
                "{} instances: max relative error ce {:.3e}, entropy {:.3e}, trades {:.3e}",
                s.instances, s.unrolled_ce, s.entropy, s.trades
            );
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
