mod manifest;
mod run;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chrono::Utc;
use clap::{Parser, Subcommand};
use dialogctx::corpus::GeneratorConfig;
use dialogctx::interaction::ModuleKind;
use dialogctx::numerics::DType;
use dialogctx::pipeline::{Checkpoint, ModelConfig, ModuleFlags};

use manifest::{hash_all, sha256_file, RunManifest};
use run::{env_precision, execute, load_config, EvalSplit, Invocation};

/// Exit 2: bad usage, config or input; exit 1: runtime or check failure.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl From<dialogctx::Error> for Failure {
    fn from(e: dialogctx::Error) -> Self {
        use dialogctx::Error as E;
        match e {
            E::Config(_) | E::Contract(_) | E::Validation(_) | E::Parse { .. } | E::Json(_) => {
                Failure::Usage(e.to_string())
            }
            E::Dimension(_) | E::Numeric(_) | E::Format(_) | E::Truncated { .. } | E::Io(_) => {
                Failure::Runtime(e.to_string())
            }
        }
    }
}

#[derive(Parser)]
#[command(name = "dialogctx", version, about = "Dialogue-context prosody prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialogue corpus.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints, a metrics log and a manifest into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma list of modules to keep (ht-nt, hs-ns, ht-ns, hs-nt); empty keeps none.
        #[arg(long)]
        ablation: Option<String>,
        /// Replace interaction enhancement with the prefix mean.
        #[arg(long)]
        no_ie: bool,
        #[arg(long)]
        quiet: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a split of a corpus.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Predict prosody for one target utterance from its history.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dialogue: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value = "small")]
        dims: String,
        #[arg(long, default_value = "gradcheck.manifest.json")]
        manifest: PathBuf,
    },
    /// Re-run a recorded command and compare its metrics and outputs.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        /// Where regenerated outputs go; a temporary directory by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_ablation(list: &str) -> Result<ModuleFlags, Failure> {
    let kinds = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<ModuleKind>())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModuleFlags::keep(&kinds))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Turns parsed flags into a resolved invocation and its manifest path.
fn resolve(command: Command) -> Result<(Invocation, PathBuf, bool, bool), Failure> {
    let precision = env_precision()?;
    Ok(match command {
        Command::GenData {
            config,
            out,
            seed,
            manifest,
        } => {
            let mut cfg: GeneratorConfig = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = manifest.unwrap_or_else(|| with_suffix(&out, ".manifest.json"));
            (Invocation::GenData { config: cfg, out }, m, false, false)
        }
        Command::Train {
            config,
            corpus,
            out,
            ablation,
            no_ie,
            quiet,
            manifest,
        } => {
            let mut cfg: ModelConfig = load_config(config.as_deref())?;
            if let Some(list) = ablation {
                cfg.module_flags = parse_ablation(&list)?;
            }
            if no_ie {
                cfg.ie_enabled = false;
            }
            if let Some(p) = precision {
                cfg.precision = p;
            }
            cfg.validate()?;
            let m = manifest.unwrap_or_else(|| out.join("manifest.json"));
            (
                Invocation::Train {
                    config: cfg,
                    corpus,
                    out,
                },
                m,
                !quiet,
                false,
            )
        }
        Command::Eval {
            checkpoint,
            corpus,
            split,
            json,
            manifest,
        } => {
            let precision = match precision {
                Some(p) => p,
                None => stored_precision(&checkpoint)?,
            };
            let m = manifest.unwrap_or_else(|| with_suffix(&checkpoint, ".eval.manifest.json"));
            let inv = Invocation::Eval {
                checkpoint,
                corpus,
                split,
                precision,
            };
            (inv, m, false, json)
        }
        Command::Infer {
            checkpoint,
            dialogue,
            manifest,
        } => {
            let precision = match precision {
                Some(p) => p,
                None => stored_precision(&checkpoint)?,
            };
            let m = manifest.unwrap_or_else(|| with_suffix(&dialogue, ".infer.manifest.json"));
            let inv = Invocation::Infer {
                checkpoint,
                dialogue,
                precision,
            };
            (inv, m, false, false)
        }
        Command::Gradcheck { module, dims, manifest } => {
            if precision == Some(DType::F32) {
                return Err(Failure::Usage(format!(
                    "gradient checks run in 64-bit; unset {} or set it to f64",
                    run::PRECISION_ENV
                )));
            }
            (Invocation::Gradcheck { module, dims }, manifest, false, false)
        }
        Command::Replay { .. } => unreachable!("handled by the caller"),
    })
}

fn stored_precision(checkpoint: &Path) -> Result<DType, Failure> {
    Ok(Checkpoint::load(checkpoint)?.config.precision)
}

fn run_command(command: Command) -> Result<bool, Failure> {
    if let Command::Replay { manifest, out } = command {
        return replay(&manifest, out.as_deref());
    }
    let (inv, manifest_path, verbose, json) = resolve(command)?;
    let started_at = Utc::now();
    let outcome = execute(&inv, verbose)?;
    let finished_at = Utc::now();
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&outcome.metrics).map_err(|e| Failure::Runtime(e.to_string()))?
        );
    } else {
        print!("{}", outcome.report);
    }
    let m = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: inv.seed(),
        invocation: inv,
        started_at,
        finished_at,
        inputs: hash_all(&outcome.inputs)?,
        outputs: hash_all(&outcome.outputs)?,
        metrics: outcome.metrics,
    };
    m.save(&manifest_path)?;
    Ok(outcome.ok)
}

fn replay(path: &Path, out: Option<&Path>) -> Result<bool, Failure> {
    let recorded = RunManifest::load(path)?;
    for (input, hash) in &recorded.inputs {
        if &sha256_file(input)? != hash {
            return Err(Failure::Runtime(format!(
                "input {} changed since the recorded run",
                input.display()
            )));
        }
    }
    let tmp;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => {
            tmp = tempfile::tempdir().map_err(|e| Failure::Runtime(e.to_string()))?;
            tmp.path().to_path_buf()
        }
    };
    let inv = recorded.invocation.redirected(&dir);
    let outcome = execute(&inv, false)?;

    let by_name = |m: &BTreeMap<PathBuf, String>| -> BTreeMap<String, String> {
        m.iter()
            .map(|(p, h)| {
                (
                    p.file_name()
                        .map_or_else(String::new, |n| n.to_string_lossy().into_owned()),
                    h.clone(),
                )
            })
            .collect()
    };
    let fresh = by_name(&hash_all(&outcome.outputs)?);
    let mut same = true;
    if outcome.metrics != recorded.metrics {
        println!("metrics differ from the recorded run");
        same = false;
    }
    for (name, hash) in by_name(&recorded.outputs) {
        match fresh.get(&name) {
            Some(h) if *h == hash => println!("identical  {name}"),
            Some(_) => {
                println!("differs    {name}");
                same = false;
            }
            None => {
                println!("missing    {name}");
                same = false;
            }
        }
    }
    println!(
        "{}",
        if same {
            "replay reproduced the recorded metrics and outputs"
        } else {
            "replay did NOT reproduce the recorded run"
        }
    );
    Ok(same)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            let (Failure::Usage(msg) | Failure::Runtime(msg)) = &f;
            eprintln!("error: {msg}");
            ExitCode::from(f.code())
        }
    }
}
