use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dil_cli::commands::{self, FINAL_MODEL};
use dil_cli::{verify, CliError, ExperimentConfig, Overrides};

#[derive(Parser)]
#[command(name = "dil", version, about = "Distortion-invariant training for image restoration")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.variant=dil_sf`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides `output_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the clean corpus and every distorted rendition with a manifest.
    SynthData,
    /// Train the configured variant.
    Train {
        /// Continue from a `.dilnet` checkpoint; its `.dilopt` sibling must exist.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many steps have run; the schedule still spans `train.iters`.
        #[arg(long)]
        until: Option<usize>,
    },
    /// Evaluate checkpoints on seen and unseen distortions.
    Eval {
        /// Checkpoint to evaluate; repeatable. Defaults to the run's final model.
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
    /// Merge row CSVs from several evaluations into one table.
    Report {
        /// `label=path` of a rows CSV; repeatable. Defaults to every rows CSV in `<out>/eval`.
        #[arg(long = "input", value_name = "LABEL=PATH")]
        inputs: Vec<String>,
    },
    /// Run the invariant checks and print a pass/fail table.
    Verify,
    /// Print the resolved config as JSON.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Command::Verify = cli.command {
        let results = verify::run_all(|r| println!("{r}"));
        return verify::summarize(&results);
    }
    let overrides = Overrides {
        sets: cli.global.sets,
        seed: cli.global.seed,
        out: cli.global.out,
    };
    let cfg = ExperimentConfig::load(cli.global.config.as_deref(), &overrides)?;
    match cli.command {
        Command::SynthData => {
            let m = commands::synth_data(&cfg)?;
            println!(
                "wrote {} clean images and {} renditions to {}",
                m.images.len(),
                m.renditions.len(),
                cfg.output_dir.join("data").display()
            );
        }
        Command::Train { resume, until } => {
            let s = commands::train(&cfg, resume.as_deref(), until)?;
            println!(
                "{}: {} iterations, final outer loss {}",
                s.variant,
                s.iterations_completed,
                s.final_outer_loss.map(|v| format!("{v:.6e}")).unwrap_or_else(|| "n/a".into())
            );
        }
        Command::Eval { mut checkpoints } => {
            if checkpoints.is_empty() {
                checkpoints.push(cfg.output_dir.join(FINAL_MODEL));
            }
            for (label, report) in commands::eval(&cfg, &checkpoints)? {
                for r in &report.rows {
                    println!(
                        "{label} {} {} seen={} psnr={:.3} ssim={:.4}",
                        r.dataset_id, r.spec, r.seen, r.psnr_db, r.ssim
                    );
                }
            }
        }
        Command::Report { inputs } => {
            let inputs = if inputs.is_empty() {
                default_report_inputs(&cfg)?
            } else {
                inputs
                    .iter()
                    .map(|s| {
                        s.split_once('=')
                            .map(|(l, p)| (l.to_string(), PathBuf::from(p)))
                            .ok_or_else(|| CliError::Usage(format!("--input expects label=path, got `{s}`")))
                    })
                    .collect::<Result<_, _>>()?
            };
            let table = commands::report(&inputs)?;
            let path = cfg.output_dir.join("report.csv");
            std::fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::Usage(e.to_string()))?;
            std::fs::write(&path, &table).map_err(|e| CliError::Runtime(e.to_string()))?;
            print!("{table}");
        }
        Command::ShowConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
        }
        Command::Verify => unreachable!("handled above"),
    }
    Ok(())
}

fn default_report_inputs(cfg: &ExperimentConfig) -> Result<Vec<(String, PathBuf)>, CliError> {
    let dir = cfg.output_dir.join("eval");
    let entries = std::fs::read_dir(&dir).map_err(|e| CliError::Usage(format!("{}: {e}", dir.display())))?;
    let mut found: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter_map(|p| {
            let name = p.file_name()?.to_str()?.to_string();
            let label = name.strip_suffix(".rows.csv")?.to_string();
            Some((label, p))
        })
        .collect();
    found.sort();
    Ok(found)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
