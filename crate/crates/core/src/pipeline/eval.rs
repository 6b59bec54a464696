use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{forward, variance_losses, LossComponents, Model};
use crate::corpus::DialogueRecord;
use crate::encoders::UtteranceFeatures;
use crate::error::{Error, Result};
use crate::interaction::{retrieval_accuracy, ModuleKind};
use crate::numerics::{Real, Tape};
use crate::par::{self, Execution};
use crate::synthesizer::ProsodyPrediction;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dialogues: usize,
    pub phonemes: usize,
    /// Mean absolute pitch error over all phonemes, normalized units.
    pub mae_p: f64,
    pub mae_e: f64,
    /// Mean absolute log-duration error over all phonemes.
    pub mae_d: f64,
    /// Per enabled module, averaged over dialogues.
    pub retrieval_acc: BTreeMap<String, f64>,
    /// Mean of `1 / (N - 1)` over the evaluated dialogues.
    pub retrieval_chance: f64,
    /// Per-dialogue losses averaged over the split.
    pub loss: LossComponents,
}

#[derive(Debug, Clone)]
pub struct DialogueEval {
    pub prediction: ProsodyPrediction,
    pub abs_pitch: f64,
    pub abs_energy: f64,
    pub abs_logdur: f64,
    pub phonemes: usize,
    pub retrieval: [Option<f64>; 4],
    pub loss: LossComponents,
}

/// Scores one dialogue. The prosody outputs come from the history alone; the
/// utterances `2..N` are only used for alignment and retrieval.
pub fn evaluate_dialogue<T: Real>(model: &Model<T>, record: &DialogueRecord) -> Result<DialogueEval> {
    let mut tape = Tape::new(&model.params);
    let fwd = forward(
        &mut tape,
        model,
        record.history(),
        Some(&record.utterances[1..]),
        &record.target.phonemes,
    )?;
    let variance = variance_losses(&mut tape, &fwd.outputs, &record.target)?;
    let prediction = ProsodyPrediction::from_outputs(&tape, &fwd.outputs)?;

    let mut retrieval = [None; 4];
    let mut contrastive = BTreeMap::new();
    let mut cl_sum = 0.0;
    for kind in ModuleKind::ALL {
        if let (Some(a), Some(l)) = (fwd.alignments[kind.index()], fwd.contrastive[kind.index()]) {
            let sims: Vec<f64> = tape.value(a.m_p).iter().map(|x| x.as_f64()).collect();
            retrieval[kind.index()] = Some(retrieval_accuracy(&sims, a.n)?);
            let v = tape.scalar(l)?.as_f64();
            cl_sum += v;
            contrastive.insert(kind.name().to_string(), v);
        }
    }
    let s = |i: usize| tape.scalar(variance[i]).map(|x| x.as_f64());
    let (pitch, energy, logdur) = (s(0)?, s(1)?, s(2)?);
    let loss = LossComponents {
        pitch,
        energy,
        logdur,
        total: pitch + energy + logdur + model.config.lambda_cl * cl_sum,
        contrastive,
    };

    let t = &record.target;
    let abs = |pred: &[f64], target: &mut dyn Iterator<Item = f64>| -> f64 {
        pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum()
    };
    Ok(DialogueEval {
        abs_pitch: abs(&prediction.pitch, &mut t.pitch.iter().copied()),
        abs_energy: abs(&prediction.energy, &mut t.energy.iter().copied()),
        abs_logdur: abs(
            &prediction.log_duration,
            &mut t.duration.iter().map(|&d| (d as f64).ln()),
        ),
        phonemes: t.phonemes.len(),
        prediction,
        retrieval,
        loss,
    })
}

pub fn evaluate<T: Real>(model: &Model<T>, records: &[DialogueRecord], exec: Execution) -> Result<EvalReport> {
    if records.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let per: Vec<DialogueEval> = par::map(exec, records, |r| evaluate_dialogue(model, r))
        .into_iter()
        .collect::<Result<_>>()?;
    let phonemes: usize = per.iter().map(|d| d.phonemes).sum();
    let pooled = |f: fn(&DialogueEval) -> f64| per.iter().map(f).sum::<f64>() / phonemes as f64;
    let mut retrieval_acc = BTreeMap::new();
    for kind in model.config.module_flags.enabled() {
        let acc: f64 = per.iter().filter_map(|d| d.retrieval[kind.index()]).sum();
        retrieval_acc.insert(kind.name().to_string(), acc / per.len() as f64);
    }
    let losses: Vec<LossComponents> = per.iter().map(|d| d.loss.clone()).collect();
    Ok(EvalReport {
        dialogues: per.len(),
        phonemes,
        mae_p: pooled(|d| d.abs_pitch),
        mae_e: pooled(|d| d.abs_energy),
        mae_d: pooled(|d| d.abs_logdur),
        retrieval_acc,
        retrieval_chance: records.iter().map(|r| 1.0 / (r.turns() - 1) as f64).sum::<f64>() / records.len() as f64,
        loss: LossComponents::mean(&losses),
    })
}

/// Prosody of the target utterance from its history and phonemes alone.
pub fn infer<T: Real>(
    model: &Model<T>,
    history: &[UtteranceFeatures],
    phonemes: &[usize],
) -> Result<ProsodyPrediction> {
    if history.is_empty() {
        return Err(Error::contract("inference needs at least one history utterance"));
    }
    for (i, u) in history.iter().enumerate() {
        if u.semantic.is_empty() || u.prosodic.is_empty() {
            return Err(Error::contract(format!(
                "history utterance {} is missing its {} features",
                i + 1,
                if u.semantic.is_empty() { "semantic" } else { "prosodic" }
            )));
        }
    }
    let mut tape = Tape::new(&model.params);
    let fwd = forward(&mut tape, model, history, None, phonemes)?;
    ProsodyPrediction::from_outputs(&tape, &fwd.outputs)
}

/// [`infer`] on a stored dialogue, ignoring its last utterance and targets.
pub fn predict<T: Real>(model: &Model<T>, record: &DialogueRecord) -> Result<ProsodyPrediction> {
    infer(model, record.history(), &record.target.phonemes)
}
