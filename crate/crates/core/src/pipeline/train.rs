use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dialogue_loss, evaluate, Checkpoint, EvalReport, Model, ModelConfig};
use crate::corpus::{CorpusDims, DialogueRecord, NormStats};
use crate::error::{Error, Result};
use crate::numerics::{AdamConfig, AdamState, Gradients, Real, Tape};
use crate::par::{self, Execution};

const SPLIT_STREAM: u64 = 2;
const BATCH_STREAM: u64 = 3;

/// Dialogue indices of the train/validation/test partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn select(records: &[DialogueRecord], idx: &[usize]) -> Vec<DialogueRecord> {
        idx.iter().map(|&i| records[i].clone()).collect()
    }
}

/// Seeded shuffle followed by an 8:1:1 cut. Validation and test get at least
/// one dialogue each.
pub fn split_indices(n: usize, seed: u64) -> Result<Split> {
    if n < 3 {
        return Err(Error::Validation(format!(
            "corpus has {n} dialogue(s); train/val/test split needs at least 3"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SPLIT_STREAM);
    idx.shuffle(&mut rng);
    let held = (n / 10).max(1);
    let test = idx.split_off(n - held);
    let val = idx.split_off(n - 2 * held);
    Ok(Split { train: idx, val, test })
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub exec: Execution,
    /// JSON Lines metrics log, one entry per validation pass.
    pub metrics_path: Option<PathBuf>,
    /// Prints one line per validation pass to stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsEntry {
    pub step: usize,
    /// Mean training objective since the previous entry; absent at step 0.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub train_loss: Option<f64>,
    /// Validation objective.
    pub loss: f64,
    pub prosody_loss: f64,
    pub mae_p: f64,
    pub mae_e: f64,
    pub mae_d: f64,
    pub retrieval_acc: BTreeMap<String, f64>,
}

impl MetricsEntry {
    fn new(step: usize, train_loss: Option<f64>, r: &EvalReport) -> Self {
        Self {
            step,
            train_loss,
            loss: r.loss.total,
            prosody_loss: r.loss.prosody(),
            mae_p: r.mae_p,
            mae_e: r.mae_e,
            mae_d: r.mae_d,
            retrieval_acc: r.retrieval_acc.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: Model<T>,
    pub final_checkpoint: Checkpoint,
    /// Lowest validation objective seen, including step 0.
    pub best_checkpoint: Checkpoint,
    pub best_step: usize,
    pub metrics: Vec<MetricsEntry>,
    pub split: Split,
}

/// Gradient of the mean dialogue loss over `batch`, computed one tape per
/// dialogue and summed in batch order.
pub fn batch_gradients<T: Real>(
    model: &Model<T>,
    corpus: &[DialogueRecord],
    batch: &[usize],
    exec: Execution,
) -> Result<(Gradients<T>, f64)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let per = par::map(exec, batch, |&i| -> Result<(Gradients<T>, f64)> {
        let mut tape = Tape::new(&model.params);
        let l = dialogue_loss(&mut tape, model, &corpus[i])?;
        let v = tape.scalar(l.total)?.as_f64();
        if !v.is_finite() {
            let at = tape
                .first_non_finite()
                .map(|(node, op)| format!("; first non-finite value at tape node {node} ({op})"))
                .unwrap_or_default();
            return Err(Error::Numeric(format!("loss of dialogue {i} is {v}{at}")));
        }
        Ok((tape.backward(l.total)?, v))
    });
    let mut sum = Gradients::empty(model.params.len());
    let mut loss = 0.0;
    for r in per {
        let (g, v) = r?;
        sum.add_assign(&g);
        loss += v;
    }
    let b = batch.len() as f64;
    sum.scale(T::lit(1.0 / b));
    Ok((sum, loss / b))
}

/// Mini-batch Adam on the training split with periodic validation.
pub fn train<T: Real>(config: &ModelConfig, corpus: &[DialogueRecord], opts: &TrainOptions) -> Result<TrainOutcome<T>> {
    config.validate()?;
    let dims = CorpusDims::of(corpus)?.ok_or_else(|| Error::Validation("training corpus is empty".into()))?;
    config.check_corpus(&dims)?;
    let split = split_indices(corpus.len(), config.seed)?;
    let val = Split::select(corpus, &split.val);
    let norm = NormStats::of(corpus);

    let mut model = Model::<T>::new(config.clone())?;
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut log = match &opts.metrics_path {
        Some(p) => Some(BufWriter::new(File::create(p)?)),
        None => None,
    };
    let mut metrics = Vec::new();
    let mut record = |entry: MetricsEntry, log: &mut Option<BufWriter<File>>| -> Result<()> {
        if let Some(w) = log {
            serde_json::to_writer(&mut *w, &entry)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        if opts.verbose {
            eprintln!(
                "step {:>6}  val loss {:.4}  mae_p {:.4}  mae_e {:.4}  mae_d {:.4}",
                entry.step, entry.loss, entry.mae_p, entry.mae_e, entry.mae_d
            );
        }
        metrics.push(entry);
        Ok(())
    };

    let report = evaluate(&model, &val, opts.exec)?;
    let mut best_loss = report.loss.total;
    let mut best = Checkpoint::from_model(&model, 0, norm);
    let mut best_step = 0;
    record(MetricsEntry::new(0, None, &report), &mut log)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BATCH_STREAM);
    let mut order = split.train.clone();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let mut interval_loss = 0.0;
    let mut interval_steps = 0;

    for step in 1..=config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (grads, loss) = batch_gradients(&model, corpus, &batch, opts.exec)
            .map_err(|e| Error::Numeric(format!("step {step}: {e}")))?;
        model.params.zero_grad();
        model.params.accumulate(&grads);
        adam.step(&mut model.params)?;
        if let Some(name) = model.params.first_non_finite() {
            return Err(Error::Numeric(format!(
                "step {step}: parameter {name:?} became non-finite"
            )));
        }
        interval_loss += loss;
        interval_steps += 1;

        if step % config.eval_every == 0 || step == config.steps {
            let report = evaluate(&model, &val, opts.exec)?;
            let train_loss = interval_loss / interval_steps as f64;
            interval_loss = 0.0;
            interval_steps = 0;
            if report.loss.total < best_loss {
                best_loss = report.loss.total;
                best = Checkpoint::from_model(&model, step as u64, norm);
                best_step = step;
            }
            record(MetricsEntry::new(step, Some(train_loss), &report), &mut log)?;
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: Checkpoint::from_model(&model, config.steps as u64, norm),
        model,
        best_checkpoint: best,
        best_step,
        metrics,
        split,
    })
}
