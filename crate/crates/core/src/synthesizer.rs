//! Target-utterance phoneme encoder, feature aggregation and variance
//! adapter.
//!
//! Phoneme ids are embedded, run through a Bi-GRU with `d_m / 2` units per
//! direction and projected back to `d_m`. The last prefix feature of every
//! enabled interaction module is added to each position, and three
//! position-wise MLP heads predict pitch, energy and log-duration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{bigru, GruParams};
use crate::error::{Error, Result};
use crate::init;
use crate::interaction::{InteractionFeatureSet, ModuleKind};
use crate::numerics::{ParamId, Params, Real, Tape, Var};

/// Two-layer position-wise MLP `d_m -> d_m -> 1` with a tanh hidden layer.
#[derive(Debug, Clone, Copy)]
pub struct HeadParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl HeadParams {
    fn register<T: Real, R: Rng>(params: &mut Params<T>, prefix: &str, d_m: usize, rng: &mut R) -> Result<Self> {
        let k = 1.0 / (d_m as f64).sqrt();
        Ok(Self {
            w1: init::uniform(params, format!("{prefix}.w1"), vec![d_m, d_m], k, rng)?,
            b1: init::uniform(params, format!("{prefix}.b1"), vec![1, d_m], k, rng)?,
            w2: init::uniform(params, format!("{prefix}.w2"), vec![d_m, 1], k, rng)?,
            b2: init::uniform(params, format!("{prefix}.b2"), vec![1, 1], k, rng)?,
        })
    }

    /// `L x d_m` in, `L x 1` out.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let w1 = tape.param(self.w1)?;
        let b1 = tape.param(self.b1)?;
        let w2 = tape.param(self.w2)?;
        let b2 = tape.param(self.b2)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.tanh(h);
        let o = tape.matmul(h, w2)?;
        tape.add_row(o, b2)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SynthParams {
    pub vocab: usize,
    pub d_m: usize,
    pub phoneme_table: ParamId,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub pitch_head: HeadParams,
    pub energy_head: HeadParams,
    pub logdur_head: HeadParams,
}

impl SynthParams {
    pub fn register<T: Real, R: Rng>(params: &mut Params<T>, vocab: usize, d_m: usize, rng: &mut R) -> Result<Self> {
        if vocab == 0 {
            return Err(Error::Config("phoneme vocabulary must be non-empty".into()));
        }
        if d_m < 2 || !d_m.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "d_m = {d_m}: the phoneme Bi-GRU needs an even d_m >= 2"
            )));
        }
        let half = d_m / 2;
        let phoneme_table = init::normal(params, "synth.phoneme".into(), vec![vocab, d_m], 1.0, rng)?;
        let gru_fwd = GruParams::register(params, "synth.gru_fwd", d_m, half, rng)?;
        let gru_bwd = GruParams::register(params, "synth.gru_bwd", d_m, half, rng)?;
        let k = 1.0 / (d_m as f64).sqrt();
        let out_w = init::uniform(params, "synth.out.w".into(), vec![d_m, d_m], k, rng)?;
        let out_b = init::uniform(params, "synth.out.b".into(), vec![1, d_m], k, rng)?;
        Ok(Self {
            vocab,
            d_m,
            phoneme_table,
            gru_fwd,
            gru_bwd,
            out_w,
            out_b,
            pitch_head: HeadParams::register(params, "synth.pitch", d_m, rng)?,
            energy_head: HeadParams::register(params, "synth.energy", d_m, rng)?,
            logdur_head: HeadParams::register(params, "synth.logdur", d_m, rng)?,
        })
    }
}

/// Linguistic encodings `P` of the target utterance, `L x d_m`.
pub fn encode_phonemes<T: Real>(tape: &mut Tape<'_, T>, sp: &SynthParams, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::contract("target utterance has no phonemes"));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id >= sp.vocab) {
        return Err(Error::contract(format!(
            "phoneme id {bad} outside vocabulary of {}",
            sp.vocab
        )));
    }
    let table = tape.param(sp.phoneme_table)?;
    let x = tape.gather(table, ids)?;
    let states = bigru(tape, x, &sp.gru_fwd, &sp.gru_bwd, sp.d_m / 2)?;
    let w = tape.param(sp.out_w)?;
    let b = tape.param(sp.out_b)?;
    let y = tape.matmul(states, w)?;
    tape.add_row(y, b)
}

/// `P_i + sum of the enabled modules' last prefix features` for every
/// position. With no module enabled this returns `p` itself.
pub fn aggregate_features<T: Real>(tape: &mut Tape<'_, T>, p: Var, feats: &InteractionFeatureSet) -> Result<Var> {
    let d = tape.cols(p);
    let mut context: Option<Var> = None;
    for kind in ModuleKind::ALL {
        let Some(f) = feats.last(kind) else { continue };
        if tape.shape(f) != (1, d) {
            return Err(Error::dim(format!(
                "{kind} feature has shape {:?}, linguistic encodings have width {d}",
                tape.shape(f)
            )));
        }
        context = Some(match context {
            None => f,
            Some(c) => tape.add(c, f)?,
        });
    }
    match context {
        None => Ok(p),
        Some(c) => tape.add_row(p, c),
    }
}

/// Head outputs on the tape, each `L x 1`.
#[derive(Debug, Clone, Copy)]
pub struct VarianceOutputs {
    pub pitch: Var,
    pub energy: Var,
    pub log_duration: Var,
}

pub fn predict_variance<T: Real>(tape: &mut Tape<'_, T>, sp: &SynthParams, p: Var) -> Result<VarianceOutputs> {
    Ok(VarianceOutputs {
        pitch: sp.pitch_head.forward(tape, p)?,
        energy: sp.energy_head.forward(tape, p)?,
        log_duration: sp.logdur_head.forward(tape, p)?,
    })
}

/// Phoneme-level prosody read off a finished forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProsodyPrediction {
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub log_duration: Vec<f64>,
    pub durations: Vec<usize>,
    pub regulated_length: usize,
}

impl ProsodyPrediction {
    pub fn from_outputs<T: Real>(tape: &Tape<'_, T>, out: &VarianceOutputs) -> Result<Self> {
        let read = |v: Var| -> Vec<f64> { tape.value(v).iter().map(|x| x.as_f64()).collect() };
        let pitch = read(out.pitch);
        let energy = read(out.energy);
        let log_duration = read(out.log_duration);
        if let Some(x) = pitch
            .iter()
            .chain(&energy)
            .chain(&log_duration)
            .find(|x| !x.is_finite())
        {
            let at = tape
                .first_non_finite()
                .map(|(node, op)| format!("; first non-finite value at tape node {node} ({op})"))
                .unwrap_or_default();
            return Err(Error::Numeric(format!("variance adapter produced {x}{at}")));
        }
        let durations = frame_counts(&log_duration);
        Ok(Self {
            regulated_length: durations.iter().sum(),
            pitch,
            energy,
            log_duration,
            durations,
        })
    }
}

/// `max(1, round(exp(d)))` per position.
pub fn frame_counts(log_duration: &[f64]) -> Vec<usize> {
    log_duration
        .iter()
        .map(|d| {
            let f = d.exp().round();
            if f.is_finite() && f >= 1.0 {
                f as usize
            } else {
                1
            }
        })
        .collect()
}

/// Repeats row `i` `durations[i]` times.
pub fn length_regulate<R: Clone>(rows: &[R], durations: &[usize]) -> Result<Vec<R>> {
    if rows.len() != durations.len() {
        return Err(Error::contract(format!(
            "{} positions but {} durations",
            rows.len(),
            durations.len()
        )));
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::contract(format!("duration at position {i} is zero")));
    }
    Ok(rows
        .iter()
        .zip(durations)
        .flat_map(|(r, &d)| std::iter::repeat_n(r.clone(), d))
        .collect())
}
