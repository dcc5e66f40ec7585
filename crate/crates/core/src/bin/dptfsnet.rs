use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dptfsnet::cli::{cmd_enhance, cmd_train, info_report, RunConfig};
use dptfsnet::model::{checkpoint, MaskSource};
use dptfsnet::verify::{self, Level};
use dptfsnet::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_VERIFY: u8 = 3;

#[derive(Parser)]
#[command(name = "dptfsnet", version, about = "Speech enhancement with a dual-path transformer network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on synthetic noisy/clean pairs and write a checkpoint.
    Train {
        /// Run configuration file (key=value).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Base preset applied before the config file: reference or desk.
        #[arg(long)]
        preset: Option<String>,
        /// Extra key=value overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        checkpoint_out: Option<PathBuf>,
        #[arg(long)]
        history_out: Option<PathBuf>,
    },
    /// Enhance a 16-bit PCM mono WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Require the checkpoint to match this run configuration's model.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bypass the network and apply a unit mask.
        #[arg(long)]
        identity_mask: bool,
    },
    /// Run gradient and invariant self-checks.
    Verify {
        #[arg(long, default_value = "fast")]
        level: String,
        #[arg(long, hide = true)]
        tamper: Option<String>,
    },
    /// Print the parameter breakdown and configuration.
    Info {
        #[arg(long, conflicts_with_all = ["config", "preset"])]
        checkpoint: Option<PathBuf>,
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_IO,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::Train {
            config,
            preset,
            overrides,
            steps,
            seed,
            checkpoint_out,
            history_out,
        } => {
            let mut cfg = match &preset {
                Some(p) => RunConfig::preset(p)?,
                None => RunConfig::default(),
            };
            if let Some(path) = &config {
                let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
                    path: path.clone(),
                    source: e,
                })?;
                cfg = cfg.apply_kv(dptfsnet::kv::parse(&text)?)?;
            }
            cfg = cfg.with_overrides(&overrides)?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if checkpoint_out.is_some() {
                cfg.paths.checkpoint_out = checkpoint_out;
            }
            if history_out.is_some() {
                cfg.paths.history_out = history_out;
            }
            cmd_train(&cfg, &mut stdout)?;
            Ok(0)
        }
        Command::Enhance {
            checkpoint,
            input,
            output,
            config,
            identity_mask,
        } => {
            let expected = config.as_deref().map(RunConfig::load).transpose()?.map(|c| c.model);
            let source = if identity_mask {
                MaskSource::Identity
            } else {
                MaskSource::Network
            };
            let n = cmd_enhance(&checkpoint, &input, &output, expected.as_ref(), source)?;
            let _ = writeln!(stdout, "wrote {n} samples to {}", output.display());
            Ok(0)
        }
        Command::Verify { level, tamper } => {
            let level = Level::parse(&level)?;
            let tamper = tamper.as_deref().map(verify::parse_op_kind).transpose()?;
            let report = verify::run(level, tamper, |s| {
                let _ = writeln!(
                    io::stdout(),
                    "{} {:<36} {:>7.2}s  {}",
                    if s.pass { "PASS" } else { "FAIL" },
                    s.name,
                    s.seconds,
                    s.detail
                );
            });
            if report.all_pass() {
                let _ = writeln!(stdout, "all {} suites passed", report.suites.len());
                Ok(0)
            } else {
                let names: Vec<_> = report.failures().map(|s| s.name).collect();
                let _ = writeln!(stdout, "failed: {}", names.join(", "));
                Ok(EXIT_VERIFY)
            }
        }
        Command::Info {
            checkpoint: ckpt,
            config,
            preset,
        } => {
            let text = if let Some(path) = ckpt {
                let net = checkpoint::load(&path, None)?;
                info_report(&net.config, Some(&net.params))?
            } else {
                let cfg = match (config, preset) {
                    (Some(path), _) => RunConfig::load(&path)?,
                    (None, Some(p)) => RunConfig::preset(&p)?,
                    (None, None) => RunConfig::default(),
                };
                info_report(&cfg.model, None)?
            };
            let _ = write!(stdout, "{text}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
