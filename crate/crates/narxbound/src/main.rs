//! Thin command-line harness over the library: one subcommand per experiment
//! stage. Exit codes: 0 success, 1 runtime failure, 2 config validation,
//! 3 completed with warnings (indeterminate certification steps above 10%).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use narxbound::error::Error;
use narxbound::experiment::{
    run_compare_appendix_a, run_compare_training_noise, run_detect, run_report, run_simulate,
    run_train, ExperimentConfig,
};

#[derive(Parser)]
#[command(
    name = "narxbound",
    about = "Certified prediction bounds for ReLU NARX estimators and anomaly detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the configured detection trajectory (fault included).
    Simulate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; defaults to the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the estimator on freshly generated fault-free trajectories.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Train on noise-free measurements of the same trajectories.
        #[arg(long)]
        ideal_data: bool,
    },
    /// Run the detector over a trajectory file.
    Detect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the multi-ellipsoid and single-ellipsoid input formulations.
    CompareAppendixA {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        trajectory: PathBuf,
        /// Number of timesteps to certify.
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train noisy/ideal twin networks and compare their certified bounds.
    CompareTrainingNoise {
        #[arg(long)]
        config: PathBuf,
        /// Number of timesteps to certify.
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a run directory and consolidate its reports.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn dispatch() -> narxbound::Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let path = run_simulate(&cfg, &out)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Train {
            config,
            out,
            ideal_data,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let result = run_train(&cfg, &out, ideal_data)?;
            println!(
                "wrote {} (train mse {:.3e}, validation mse {:.3e})",
                result.weights_path.display(),
                result.report.train_mse,
                result.report.val_mse
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Detect {
            config,
            weights,
            trajectory,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let result = run_detect(&cfg, &weights, &trajectory, &out)?;
            let s = &result.log.summary;
            println!(
                "steps {}, alarms {}, indeterminate {}, rate {:.4} (bound {:.4})",
                s.steps, s.alarms, s.indeterminate, s.alarm_rate, s.false_alarm_bound
            );
            if result.warning {
                eprintln!(
                    "warning: {} of {} steps were indeterminate",
                    s.indeterminate, s.steps
                );
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::CompareAppendixA {
            config,
            weights,
            trajectory,
            steps,
            out,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let rows = run_compare_appendix_a(&cfg, &weights, &trajectory, steps, &out)?;
            let solved = rows
                .iter()
                .filter(|r| r.multi_log_volume.is_some() && r.single_log_volume.is_some())
                .count();
            println!("compared {} steps ({} fully solved)", rows.len(), solved);
            Ok(ExitCode::SUCCESS)
        }
        Command::CompareTrainingNoise { config, steps, out } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let cmp = run_compare_training_noise(&cfg, steps, &out)?;
            println!(
                "noisy-trained bound smaller on {:.0}% of {} steps",
                100.0 * cmp.noisy_smaller_fraction,
                cmp.steps.len()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { run_dir } => {
            let report = run_report(&run_dir)?;
            println!(
                "verified {} scenario(s); report at {}",
                report.scenarios.len(),
                run_dir.join("report.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
