use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::ValueEnum;
use dialogctx::corpus::{generate_corpus, read_corpus, write_corpus, CorpusDims, DialogueRecord, GeneratorConfig};
use dialogctx::encoders::UtteranceFeatures;
use dialogctx::gradsuite::{self, Suite, SuiteDims, TOLERANCE};
use dialogctx::numerics::{DType, Real};
use dialogctx::par::Execution;
use dialogctx::pipeline::{
    evaluate, infer, split_indices, train, Checkpoint, EvalReport, MetricsEntry, ModelConfig, Split, TrainOptions,
};
use serde::de::{DeserializeOwned, IgnoredAny};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::Failure;

pub const PRECISION_ENV: &str = "I3_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Test,
    Val,
}

/// A fully resolved command: everything needed to run it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Invocation {
    GenData {
        config: GeneratorConfig,
        out: PathBuf,
    },
    Train {
        config: ModelConfig,
        corpus: PathBuf,
        out: PathBuf,
    },
    Eval {
        checkpoint: PathBuf,
        corpus: PathBuf,
        split: EvalSplit,
        precision: DType,
    },
    Infer {
        checkpoint: PathBuf,
        dialogue: PathBuf,
        precision: DType,
    },
    Gradcheck {
        module: String,
        dims: String,
    },
}

impl Invocation {
    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::GenData { config, .. } => Some(config.seed),
            Invocation::Train { config, .. } => Some(config.seed),
            _ => None,
        }
    }

    /// Same command with its outputs sent under `dir`.
    pub fn redirected(&self, dir: &Path) -> Invocation {
        let mut inv = self.clone();
        match &mut inv {
            Invocation::GenData { out, .. } => {
                *out = dir.join(out.file_name().unwrap_or("corpus.jsonl".as_ref()));
            }
            Invocation::Train { out, .. } => *out = dir.to_path_buf(),
            _ => {}
        }
        inv
    }
}

pub struct Outcome {
    pub metrics: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Text for stdout.
    pub report: String,
    /// False when the command ran but its check failed.
    pub ok: bool,
}

pub fn env_precision() -> Result<Option<DType>, Failure> {
    match std::env::var(PRECISION_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.as_str() {
            "f32" => Ok(Some(DType::F32)),
            "f64" => Ok(Some(DType::F64)),
            _ => Err(Failure::Usage(format!("{PRECISION_ENV}={v:?}; expected f32 or f64"))),
        },
    }
}

/// Reads a JSON or (by `.toml` extension) TOML config; absent path gives defaults.
pub fn load_config<C: DeserializeOwned + Default>(path: Option<&Path>) -> Result<C, Failure> {
    let Some(path) = path else {
        return Ok(C::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

pub fn execute(inv: &Invocation, verbose: bool) -> Result<Outcome, Failure> {
    match inv {
        Invocation::GenData { config, out } => gen_data(config, out),
        Invocation::Train { config, corpus, out } => match config.precision {
            DType::F32 => train_as::<f32>(config, corpus, out, verbose),
            DType::F64 => train_as::<f64>(config, corpus, out, verbose),
        },
        Invocation::Eval {
            checkpoint,
            corpus,
            split,
            precision,
        } => eval(checkpoint, corpus, *split, *precision),
        Invocation::Infer {
            checkpoint,
            dialogue,
            precision,
        } => run_infer(checkpoint, dialogue, *precision),
        Invocation::Gradcheck { module, dims } => gradcheck(module, dims),
    }
}

fn gen_data(config: &GeneratorConfig, out: &Path) -> Result<Outcome, Failure> {
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let records = generate_corpus(config)?;
    write_corpus(&records, out)?;
    let dims = CorpusDims::of(&records)?.expect("validated config yields dialogues");
    Ok(Outcome {
        metrics: json!({
            "dialogues": records.len(),
            "d_t": dims.d_t,
            "d_s": dims.d_s,
        }),
        inputs: vec![],
        outputs: vec![out.to_path_buf()],
        report: format!(
            "wrote {} dialogues to {} (semantic dim {}, prosodic dim {}, vocabulary {}, speakers {})\n",
            records.len(),
            out.display(),
            dims.d_t,
            dims.d_s,
            config.vocab,
            config.num_speakers
        ),
        ok: true,
    })
}

fn train_as<T: Real>(config: &ModelConfig, corpus: &Path, out: &Path, verbose: bool) -> Result<Outcome, Failure> {
    config.validate()?;
    let records = read_corpus(corpus)?;
    fs::create_dir_all(out).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    let metrics_path = out.join("metrics.jsonl");
    let opts = TrainOptions {
        exec: Execution::default(),
        metrics_path: Some(metrics_path.clone()),
        verbose,
    };
    let outcome = train::<T>(config, &records, &opts)?;
    let best_path = out.join("checkpoint.i3ck");
    let final_path = out.join("final.i3ck");
    outcome.best_checkpoint.save(&best_path)?;
    outcome.final_checkpoint.save(&final_path)?;

    let best: &MetricsEntry = outcome
        .metrics
        .iter()
        .find(|m| m.step == outcome.best_step)
        .expect("best step was logged");
    let report = format!(
        "trained {} steps on {} dialogues; best validation at step {}: MAE-P {:.4}  MAE-E {:.4}  MAE-D {:.4}\n\
         best checkpoint: {}\nfinal checkpoint: {}\nmetrics log: {}\n",
        config.steps,
        outcome.split.train.len(),
        outcome.best_step,
        best.mae_p,
        best.mae_e,
        best.mae_d,
        best_path.display(),
        final_path.display(),
        metrics_path.display()
    );
    Ok(Outcome {
        metrics: json!({
            "best_step": outcome.best_step,
            "best": best,
            "final": outcome.metrics.last(),
        }),
        inputs: vec![corpus.to_path_buf()],
        outputs: vec![best_path, final_path, metrics_path],
        report,
        ok: true,
    })
}

fn load_for_corpus(checkpoint: &Path, corpus: &Path) -> Result<(Checkpoint, Vec<DialogueRecord>), Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let records = read_corpus(corpus)?;
    let dims = CorpusDims::of(&records)?.ok_or_else(|| Failure::Usage(format!("{} is empty", corpus.display())))?;
    ckpt.config.check_corpus(&dims).map_err(|e| {
        Failure::Usage(format!(
            "{} does not fit {}: {e}",
            corpus.display(),
            checkpoint.display()
        ))
    })?;
    Ok((ckpt, records))
}

fn eval(checkpoint: &Path, corpus: &Path, split: EvalSplit, precision: DType) -> Result<Outcome, Failure> {
    let (ckpt, records) = load_for_corpus(checkpoint, corpus)?;
    let parts = split_indices(records.len(), ckpt.config.seed)?;
    let idx = match split {
        EvalSplit::Test => &parts.test,
        EvalSplit::Val => &parts.val,
    };
    let subset = Split::select(&records, idx);
    let report = match precision {
        DType::F32 => evaluate(&ckpt.to_model::<f32>()?, &subset, Execution::default())?,
        DType::F64 => evaluate(&ckpt.to_model::<f64>()?, &subset, Execution::default())?,
    };
    let metrics = serde_json::to_value(&report).map_err(|e| Failure::Runtime(e.to_string()))?;
    Ok(Outcome {
        report: table(&report, split),
        metrics,
        inputs: vec![checkpoint.to_path_buf(), corpus.to_path_buf()],
        outputs: vec![],
        ok: true,
    })
}

fn table(r: &EvalReport, split: EvalSplit) -> String {
    let name = match split {
        EvalSplit::Test => "test",
        EvalSplit::Val => "val",
    };
    let mut s = format!("{name} split: {} dialogues, {} phonemes\n", r.dialogues, r.phonemes);
    s += &format!(
        "  MAE-P   {:.4}\n  MAE-E   {:.4}\n  MAE-D   {:.4}\n",
        r.mae_p, r.mae_e, r.mae_d
    );
    for (m, acc) in &r.retrieval_acc {
        s += &format!("  retrieval {m:<6} {acc:.4}\n");
    }
    s += &format!("  retrieval chance {:.4}\n", r.retrieval_chance);
    s += &format!(
        "  loss    {:.4} (pitch {:.4}, energy {:.4}, log-duration {:.4})\n",
        r.loss.total, r.loss.pitch, r.loss.energy, r.loss.logdur
    );
    s
}

/// History utterances plus target phonemes. `target` and `next` may be
/// present and are ignored.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferInput {
    pub history: Vec<UtteranceFeatures>,
    pub phonemes: Vec<usize>,
    #[serde(default, rename = "target")]
    _target: Option<IgnoredAny>,
    #[serde(default, rename = "next")]
    _next: Option<IgnoredAny>,
}

fn run_infer(checkpoint: &Path, dialogue: &Path, precision: DType) -> Result<Outcome, Failure> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let text = fs::read_to_string(dialogue).map_err(|e| Failure::Runtime(format!("{}: {e}", dialogue.display())))?;
    let input: InferInput =
        serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", dialogue.display())))?;
    check_infer_input(&input, &ckpt.config).map_err(|m| Failure::Usage(format!("{}: {m}", dialogue.display())))?;
    let prediction = match precision {
        DType::F32 => infer(&ckpt.to_model::<f32>()?, &input.history, &input.phonemes)?,
        DType::F64 => infer(&ckpt.to_model::<f64>()?, &input.history, &input.phonemes)?,
    };
    let metrics = serde_json::to_value(&prediction).map_err(|e| Failure::Runtime(e.to_string()))?;
    let mut report = serde_json::to_string_pretty(&prediction).map_err(|e| Failure::Runtime(e.to_string()))?;
    report.push('\n');
    Ok(Outcome {
        metrics,
        inputs: vec![checkpoint.to_path_buf(), dialogue.to_path_buf()],
        outputs: vec![],
        report,
        ok: true,
    })
}

fn check_infer_input(input: &InferInput, config: &ModelConfig) -> Result<(), String> {
    if input.history.is_empty() {
        return Err("history is empty".into());
    }
    if input.phonemes.is_empty() {
        return Err("phonemes is empty".into());
    }
    if let Some(p) = input.phonemes.iter().find(|&&p| p >= config.vocab) {
        return Err(format!("phoneme id {p} is outside the vocabulary of {}", config.vocab));
    }
    for (i, u) in input.history.iter().enumerate() {
        if u.semantic.len() != config.d_t || u.prosodic.len() != config.d_s {
            return Err(format!(
                "history[{i}] has semantic/prosodic dims {}/{}, model expects {}/{}",
                u.semantic.len(),
                u.prosodic.len(),
                config.d_t,
                config.d_s
            ));
        }
        if u.speaker_id >= config.num_speakers {
            return Err(format!("history[{i}] speaker {} is out of range", u.speaker_id));
        }
    }
    Ok(())
}

fn gradcheck(module: &str, dims: &str) -> Result<Outcome, Failure> {
    let dims: SuiteDims = dims
        .parse()
        .map_err(|e: dialogctx::Error| Failure::Usage(e.to_string()))?;
    let suites = if module == "all" {
        Suite::ALL.to_vec()
    } else {
        vec![module.parse::<Suite>().map_err(|_| {
            Failure::Usage(format!(
                "unknown module {module:?}; valid: all, numerics, encoders, interaction, synthesizer"
            ))
        })?]
    };
    let started = Instant::now();
    let mut outcomes = Vec::new();
    for s in suites {
        outcomes.extend(gradsuite::run_suite(s, dims)?);
    }
    let mut report = String::new();
    let mut rows = Vec::new();
    for o in &outcomes {
        let r = &o.report;
        let (tensor, coord) = r.worst.clone().unwrap_or_default();
        report += &format!(
            "{:<4} {:<12} {:<28} max rel err {:.3e}  ({} coords)\n",
            if o.passed() { "ok" } else { "FAIL" },
            o.suite.name(),
            o.op,
            r.max_rel_error,
            r.coords_checked
        );
        if !o.passed() {
            report += &format!(
                "     worst at {tensor}[{coord}]: analytic {:.6e}, numeric {:.6e}\n",
                r.analytic_at_worst, r.numeric_at_worst
            );
        }
        rows.push(json!({
            "suite": o.suite.name(),
            "op": o.op,
            "max_rel_error": r.max_rel_error,
            "coords_checked": r.coords_checked,
            "worst_tensor": tensor,
            "worst_coord": coord,
        }));
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    report += &format!(
        "{} checks, {} failed, tolerance {:.0e}, {:.1} s\n",
        outcomes.len(),
        failed,
        TOLERANCE,
        started.elapsed().as_secs_f64()
    );
    Ok(Outcome {
        metrics: Value::Array(rows),
        inputs: vec![],
        outputs: vec![],
        report,
        ok: failed == 0,
    })
}
