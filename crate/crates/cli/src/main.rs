use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gaitdis_core::classify::ModelKind;
use gaitdis_core::pipeline::{self, RunConfig, EFFECTIVE_CONFIG_FILE};
use gaitdis_core::preprocess::SsaParams;
use gaitdis_core::Error;

#[derive(Parser)]
#[command(
    name = "gaitdis",
    version,
    about = "Gait affect recognition with subject/affect disentanglement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (JSON); omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic motion dataset.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment and normalize the sequences of a manifest into gait cycles.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ssa_window: Option<usize>,
        #[arg(long)]
        ssa_components: Option<usize>,
    },
    /// Train the autoencoder on a cycle directory.
    Train {
        #[arg(long)]
        cycles: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated affect classification.
    Eval {
        #[arg(long)]
        cycles: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Comma-separated subset of knn-man,svm-man,svm-xyz,cnn-xyz,ae-xyz.
        #[arg(long, value_delimiter = ',')]
        models: Option<Vec<ModelKind>>,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subject identification from raw cycles and from affect codes.
    Privacy {
        #[arg(long)]
        cycles: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Guided Grad-CAM attributions aggregated per class.
    Explain {
        #[arg(long)]
        cycles: PathBuf,
        /// Autoencoder checkpoint, required for heads over affect codes.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Classifier checkpoint or fold-heads manifest (heads.json).
        #[arg(long)]
        classifier: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        per_sample: bool,
    },
    /// Summarize a run directory as markdown.
    Report {
        /// Run directory.
        run: PathBuf,
    },
    /// Run every stage into one directory.
    All {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid-argument",
        Error::NonFinite(_) => "non-finite",
        Error::Internal(_) => "internal",
        Error::Parse { .. } => "parse",
        Error::Io { .. } => "io",
        Error::Json { .. } => "json",
        Error::DegeneratePose { .. } => "degenerate-pose",
        Error::NoGaitCycle(_) => "no-gait-cycle",
        Error::UnsupportedModel(_) => "unsupported-model",
        Error::Checkpoint(_) => "checkpoint",
        Error::Preprocess { .. } => "preprocess",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn require(flag: &str, path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{flag}: {} does not exist",
            path.display()
        )))
    }
}

fn load_config(arg: &ConfigArg, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let cfg = match &arg.config {
        Some(p) => {
            require("--config", p)?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn echo(cfg: &RunConfig, dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.write_effective(&dir.join(EFFECTIVE_CONFIG_FILE))?;
    Ok(())
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Synth { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            echo(&cfg, &out)?;
            let m = pipeline::synth_to_dir(&cfg.synth, &out)?;
            println!("{}", m.display());
        }
        Command::Preprocess {
            manifest,
            out,
            ssa_window,
            ssa_components,
        } => {
            require("--manifest", &manifest)?;
            let mut cfg = RunConfig::default();
            let d = SsaParams::default();
            cfg.preprocess = SsaParams {
                window: ssa_window.unwrap_or(d.window),
                components: ssa_components.unwrap_or(d.components),
            };
            echo(&cfg, &out)?;
            let index = pipeline::preprocess_to_dir(&manifest, &cfg.preprocess, &out)?;
            println!("{} cycles", index.cycles.len());
        }
        Command::Train {
            cycles,
            config,
            epochs,
            seed,
            out,
        } => {
            require("--cycles", &cycles)?;
            let mut cfg = load_config(&config, seed)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let dir = out
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            echo(&cfg, dir)?;
            let r = pipeline::train_to_checkpoint(
                &cycles, &cfg.model, &cfg.loss, &cfg.train, cfg.seed, &out,
            )?;
            if let Some(last) = r.epochs.last() {
                println!("epoch {} total {:.6}", last.epoch, last.total);
            }
        }
        Command::Eval {
            cycles,
            ckpt,
            models,
            config,
            seed,
            out,
        } => {
            require("--cycles", &cycles)?;
            if let Some(c) = &ckpt {
                require("--ckpt", c)?;
            }
            let mut cfg = load_config(&config, seed)?;
            if let Some(m) = models {
                cfg.eval.models = m;
            }
            if cfg.eval.models.contains(&ModelKind::AeXyz) && ckpt.is_none() {
                return Err(Failure::Usage("--ckpt: required for ae-xyz".into()));
            }
            echo(&cfg, &out)?;
            let b = pipeline::eval_to_dir(&cycles, ckpt.as_deref(), &cfg.eval, cfg.seed, &out)?;
            for r in &b.results {
                println!("{} {:.2} ± {:.2}", r.model, r.accuracy.0, r.accuracy.1);
            }
        }
        Command::Privacy {
            cycles,
            ckpt,
            config,
            seed,
            out,
        } => {
            require("--cycles", &cycles)?;
            require("--ckpt", &ckpt)?;
            let cfg = load_config(&config, seed)?;
            echo(&cfg, &out)?;
            let r = pipeline::privacy_to_dir(&cycles, &ckpt, &cfg.eval, cfg.seed, &out)?;
            println!(
                "raw {:.2} enc-svm {:.2} enc-net {:.2} shuffled {:.2} chance {:.2}",
                r.svm_raw.0, r.svm_enc.0, r.cnn_enc.0, r.shuffled_control.0, r.chance
            );
        }
        Command::Explain {
            cycles,
            ckpt,
            classifier,
            out,
            per_sample,
        } => {
            require("--cycles", &cycles)?;
            require("--classifier", &classifier)?;
            if let Some(c) = &ckpt {
                require("--ckpt", c)?;
            }
            let mut cfg = RunConfig::default();
            cfg.explain.per_sample = per_sample;
            echo(&cfg, &out)?;
            pipeline::explain_to_dir(&cycles, ckpt.as_deref(), &classifier, &cfg.explain, &out)?;
            println!("{}", out.display());
        }
        Command::Report { run } => {
            require("RUN", &run)?;
            println!("{}", pipeline::write_report(&run)?.display());
        }
        Command::All { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            pipeline::run_all(&cfg, &out)?;
            println!("{}", out.join("report.md").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    if let Some(n) = std::env::var("GAITDIS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        gaitdis_core::parallel::init_threads(n);
    }
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error[usage]: {}", one_line(&msg));
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error[{}]: {}", kind(&e), one_line(&e.to_string()));
            ExitCode::from(1)
        }
    }
}
