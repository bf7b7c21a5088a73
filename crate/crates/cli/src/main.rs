use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nrrdd::harness::{self, ExperimentConfig, RunOptions};
use nrrdd::Error;

#[derive(Parser)]
#[command(name = "nrrdd", version, about = "Dataset distillation with masked refinement and distance-based labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set refine.epsilon=0.3`. Repeatable.
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[arg(long)]
    seed: Option<u64>,

    #[arg(short, long)]
    output_dir: Option<PathBuf>,

    /// Recompute even when outputs exist.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train the teacher on the configured dataset.
    TrainTeacher(Common),
    /// Discover, refine and relabel the synthetic set.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Stop after patch discovery (no refinement).
        #[arg(long)]
        skip_nrr: bool,
        /// Refine without the BatchNorm statistics term.
        #[arg(long)]
        no_bn_loss: bool,
        /// Write PNG previews of the synthetic images.
        #[arg(long)]
        previews: bool,
    },
    /// Train students on the stored labels and record their accuracy.
    Transfer(Common),
    /// Test accuracy of a snapshot (the teacher by default).
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Plots and summary tables from a results directory.
    Report {
        /// Directory holding results.jsonl (defaults to the output directory).
        dir: Option<PathBuf>,
        #[arg(short, long)]
        config: Option<PathBuf>,
    },
    /// Teacher, then distill + transfer over the configured sweep grid.
    Sweep(Common),
}

fn load(common: &Common) -> nrrdd::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(&common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn opts(common: &Common) -> RunOptions {
    RunOptions { force: common.force, previews: false }
}

fn run(cli: Cli) -> nrrdd::Result<()> {
    match cli.command {
        Command::TrainTeacher(c) => {
            let path = harness::cmd_train_teacher(&load(&c)?, opts(&c))?;
            println!("{}", path.display());
        }
        Command::Distill { common, skip_nrr, no_bn_loss, previews } => {
            let mut cfg = load(&common)?;
            cfg.skip_nrr |= skip_nrr;
            cfg.refine.no_bn_loss |= no_bn_loss;
            let out = harness::cmd_distill(&cfg, RunOptions { previews, ..opts(&common) })?;
            println!("{}", out.manifest.display());
            for (_, p) in &out.stores {
                println!("{}", p.display());
            }
            if let (Some(a), Some(b)) = (out.summary.median_loss_initial, out.summary.median_loss_final) {
                println!("median L_C {a:.4} -> {b:.4}");
            }
        }
        Command::Transfer(c) => {
            for row in harness::cmd_transfer(&load(&c)?, opts(&c))? {
                let rr = row.recover_rate.map_or(String::new(), |v| format!("  recover {v:.3}"));
                println!("{:<4} accuracy {:.4}  store {} B{rr}", row.mode, row.accuracy, row.store_bytes);
            }
        }
        Command::Eval { common, snapshot } => {
            let acc = harness::cmd_eval(&load(&common)?, snapshot.as_deref())?;
            println!("accuracy {acc:.4}");
        }
        Command::Report { dir, config } => {
            let dir = match (dir, config) {
                (Some(d), _) => d,
                (None, Some(c)) => ExperimentConfig::load(&c)?.output_dir,
                (None, None) => ExperimentConfig::default().output_dir,
            };
            let out = harness::cmd_report(&dir)?;
            print!("{}", out.summary);
            for f in &out.files {
                eprintln!("wrote {}", f.display());
            }
        }
        Command::Sweep(c) => {
            let rows = harness::cmd_sweep(&load(&c)?, opts(&c))?;
            println!("{} result rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::MissingArtifact(p) = &e {
                if p.extension().is_none() {
                    eprintln!("hint: point `dataset.root` or {} at the extracted dataset", harness::DATA_ROOT_ENV);
                } else {
                    eprintln!("hint: run the preceding command (train-teacher, distill) first");
                }
            }
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
