use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tkc::data::MixtureSpec;
use tkc_cli::{
    cmd_eval, cmd_gen_data, cmd_resume, cmd_stability_report, cmd_sweep_h, cmd_train, final_stability,
    load_config, sweep_table, CliError, TrainOptions,
};

#[derive(Parser)]
#[command(name = "tkc", version, about = "Temporal knowledge consistency training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set h=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for metrics, checkpoint and resolved config.
        #[arg(long)]
        out: PathBuf,
        /// Continue the run stored in this checkpoint instead.
        #[arg(long, conflicts_with_all = ["config", "set"])]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
        /// Also write per-sample stability as `stability.csv`.
        #[arg(long)]
        stability_dump: bool,
    },
    /// Train once per temporal-teacher count and tabulate the results.
    SweepH {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated teacher counts.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        h: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the student of a checkpoint with kNN (and optionally linear) probes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TKDS file to evaluate on; defaults to the run's own dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Also train a linear probe.
        #[arg(long)]
        probe: bool,
    },
    /// Per-sample stability across epochs as `sample_id,epoch,stability`.
    StabilityReport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset the run used; checked against the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic Gaussian-mixture dataset in TKDS format.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        classes: usize,
        #[arg(long, default_value_t = 512)]
        per_class: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 4.0)]
        spread: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{v:.4}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            out,
            resume,
            stop_after,
            stability_dump,
        } => {
            let opts = TrainOptions {
                stop_after,
                stability_dump,
            };
            let (trainer, artifacts) = match resume {
                Some(ck) => cmd_resume(&ck, &out, &opts)?,
                None => cmd_train(load_config(config.config.as_deref(), &config.set)?, &out, &opts)?,
            };
            if let Some(r) = trainer.records().last() {
                println!(
                    "epoch {}: loss {:.4}, knn_top1 {:.4}, mean stability (last 5) {}",
                    r.epoch,
                    r.loss.total,
                    r.knn_top1,
                    fmt_opt(final_stability(&trainer))
                );
                if let Some(l) = r.linear_top1 {
                    println!("linear_top1 {l:.4}");
                }
            }
            println!("metrics: {}", artifacts.metrics.display());
            println!("checkpoint: {}", artifacts.checkpoint.display());
        }
        Command::SweepH { config, h, out } => {
            let base = load_config(config.config.as_deref(), &config.set)?;
            let rows = cmd_sweep_h(&base, &h, &out)?;
            print!("{}", sweep_table(&rows));
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            probe,
        } => {
            let r = cmd_eval(&checkpoint, data.as_deref(), k, probe)?;
            println!("knn_top1 {}", r.knn_top1);
            if let Some(l) = r.linear_top1 {
                println!("linear_top1 {l}");
            }
        }
        Command::StabilityReport {
            checkpoint,
            data,
            out,
        } => {
            let csv = cmd_stability_report(&checkpoint, data.as_deref())?;
            match out {
                Some(p) => tkc::io::write_atomic(&p, csv.as_bytes())
                    .map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?,
                None => print!("{csv}"),
            }
        }
        Command::GenData {
            out,
            classes,
            per_class,
            dim,
            spread,
            seed,
        } => {
            let spec = MixtureSpec {
                classes,
                per_class,
                dim,
                spread,
                seed,
            };
            let d = cmd_gen_data(&spec, &out)?;
            println!("wrote {} samples to {}", d.n_samples(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
