use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use morphdet::app::{self, resolve_path, RunConfig};
use morphdet::{Error, Result};

/// Parasite detector with per-detection morphology reports.
#[derive(Parser)]
#[command(name = "morphdet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `loss.lambda_morph`.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides the score threshold of the command.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the summary JSON.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split; defaults to `eval.split`.
        #[arg(long)]
        split: Option<String>,
        /// Also write the summary here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Attach full-vs-ablated latency measurements.
        #[arg(long)]
        latency: bool,
    },
    /// Write per-image reports for a folder of PNG images.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Defaults to `infer.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate once per λ and print the comparison table.
    AblateLambda {
        #[command(flatten)]
        common: Common,
        /// Comma-separated λ values; defaults to `ablation.lambdas`.
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(l) = c.lambda {
        cfg.loss.lambda_morph = l;
    }
    if let Some(t) = c.threshold {
        cfg.eval.score_threshold = t;
        cfg.infer.score_threshold = t;
    }
    cfg.resolve()
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(&common)?;
            let (dir, manifest) = app::gen_data(&cfg)?;
            println!(
                "wrote {} train / {} val images to {} (config {})",
                manifest.n_train,
                manifest.n_val,
                dir.display(),
                manifest.config_hash
            );
        }
        Command::Train { common, resume } => {
            let cfg = load_config(&common)?;
            let outcome = app::train(&cfg, resume.as_deref())?;
            if let (Some(f), Some(l)) = (&outcome.first, &outcome.last) {
                println!("loss {:.6} -> {:.6}", f.total, l.total);
            }
            println!(
                "{} steps; checkpoints in {}",
                outcome.steps,
                outcome.out_dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            out,
            latency,
        } => {
            let mut cfg = load_config(&common)?;
            cfg.eval.latency |= latency;
            let split = split.unwrap_or_else(|| cfg.eval.split.clone());
            let summary = app::eval(&cfg, &resolve_path(&checkpoint), &split)?;
            let bytes = summary.to_json_bytes()?;
            if let Some(out) = out {
                write_out(&resolve_path(&out), &bytes)?;
            }
            std::io::stdout()
                .write_all(&bytes)
                .map_err(|e| Error::io("<stdout>", e))?;
        }
        Command::Infer {
            common,
            checkpoint,
            images,
            out,
        } => {
            let cfg = load_config(&common)?;
            let out = resolve_path(&out.unwrap_or_else(|| cfg.infer.out_dir.clone()));
            let reports = app::infer(
                &resolve_path(&checkpoint),
                &images,
                cfg.infer.score_threshold,
                &out,
            )?;
            for (path, report) in reports {
                println!("{}: {} detection(s)", path.display(), report.detections.len());
                print!("{}", report.text());
            }
        }
        Command::AblateLambda { common, lambdas } => {
            let cfg = load_config(&common)?;
            let lambdas = lambdas.unwrap_or_else(|| cfg.ablation.lambdas.clone());
            let table = app::ablate_lambda(&cfg, &lambdas)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_user_error() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
