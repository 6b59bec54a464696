//! Speaker-conditioned Bi-GRU sentence encoders.
//!
//! One [`EncoderParams`] instance exists per modality and is shared by the
//! historical (contextual) and next-utterance (per-sentence) roles. In the
//! per-sentence role each utterance is run as its own length-1 sequence, so
//! the two roles agree exactly on single-utterance input.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{ParamId, Params, Real, Tape, Var};

/// Sentence-level features of one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceFeatures {
    #[serde(rename = "speaker")]
    pub speaker_id: usize,
    pub semantic: Vec<f64>,
    pub prosodic: Vec<f64>,
}

impl UtteranceFeatures {
    pub fn features(&self, modality: Modality) -> &[f64] {
        match modality {
            Modality::Text => &self.semantic,
            Modality::Speech => &self.prosodic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Speech,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Text => "text",
            Modality::Speech => "speech",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderDims {
    pub d_in: usize,
    pub d_h: usize,
    pub d_mid: usize,
    pub d_m: usize,
    pub num_speakers: usize,
}

/// Weights of one GRU direction. Inputs multiply on the left: `x W + h U + b`.
#[derive(Debug, Clone, Copy)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn register<T: Real, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        d_in: usize,
        d_h: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let k = 1.0 / (d_h as f64).sqrt();
        let mut w = |name: &str, rows: usize, cols: usize, rng: &mut R| {
            init::uniform(params, format!("{prefix}.{name}"), vec![rows, cols], k, rng)
        };
        let w_z = w("w_z", d_in, d_h, rng)?;
        let w_r = w("w_r", d_in, d_h, rng)?;
        let w_h = w("w_h", d_in, d_h, rng)?;
        let u_z = w("u_z", d_h, d_h, rng)?;
        let u_r = w("u_r", d_h, d_h, rng)?;
        let u_h = w("u_h", d_h, d_h, rng)?;
        let b_z = w("b_z", 1, d_h, rng)?;
        let b_r = w("b_r", 1, d_h, rng)?;
        let b_h = w("b_h", 1, d_h, rng)?;
        Ok(Self {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z,
            b_r,
            b_h,
        })
    }
}

fn gate<T: Real>(tape: &mut Tape<'_, T>, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(w)?;
    let u = tape.param(u)?;
    let b = tape.param(b)?;
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_row(s, b)
}

/// One GRU step over a batch of rows.
///
/// `z = sig(x W_z + h U_z + b_z)`, `r = sig(x W_r + h U_r + b_r)`,
/// `h~ = tanh(x W_h + (r * h) U_h + b_h)`, `h' = (1 - z) * h + z * h~`.
pub fn gru_cell<T: Real>(tape: &mut Tape<'_, T>, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    if tape.rows(x) != tape.rows(h_prev) {
        return Err(Error::dim(format!(
            "gru_cell: {} input rows, {} hidden rows",
            tape.rows(x),
            tape.rows(h_prev)
        )));
    }
    let z = gate(tape, x, h_prev, p.w_z, p.u_z, p.b_z)?;
    let z = tape.sigmoid(z);
    let r = gate(tape, x, h_prev, p.w_r, p.u_r, p.b_r)?;
    let r = tape.sigmoid(r);
    let rh = tape.mul(r, h_prev)?;
    let cand = gate(tape, x, rh, p.w_h, p.u_h, p.b_h)?;
    let cand = tape.tanh(cand);
    let keep = tape.one_minus(z);
    let carried = tape.mul(keep, h_prev)?;
    let fresh = tape.mul(z, cand)?;
    tape.add(carried, fresh)
}

/// Runs a GRU over the rows of `xs` in order (or reversed) and returns the
/// per-position hidden states stacked in original row order.
pub fn gru_sequence<T: Real>(tape: &mut Tape<'_, T>, xs: Var, p: &GruParams, d_h: usize, reverse: bool) -> Result<Var> {
    let n = tape.rows(xs);
    let mut h = tape.zeros(1, d_h)?;
    let mut states = Vec::with_capacity(n);
    let order: Vec<usize> = if reverse {
        (0..n).rev().collect()
    } else {
        (0..n).collect()
    };
    for i in order {
        let x = tape.row_of(xs, i)?;
        h = gru_cell(tape, x, h, p)?;
        states.push(h);
    }
    if reverse {
        states.reverse();
    }
    tape.vstack(&states)
}

/// Bidirectional per-position states `[fwd_i ; bwd_i]`, shape `n x 2 d_h`.
pub fn bigru<T: Real>(tape: &mut Tape<'_, T>, xs: Var, fwd: &GruParams, bwd: &GruParams, d_h: usize) -> Result<Var> {
    let f = gru_sequence(tape, xs, fwd, d_h, false)?;
    let b = gru_sequence(tape, xs, bwd, d_h, true)?;
    tape.hcat(&[f, b])
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub speaker_table: ParamId,
    pub fwd: GruParams,
    pub bwd: GruParams,
    pub proj1_w: ParamId,
    pub proj1_b: ParamId,
    pub proj2_w: ParamId,
    pub proj2_b: ParamId,
}

impl EncoderParams {
    pub fn register<T: Real, R: Rng>(
        params: &mut Params<T>,
        prefix: &str,
        dims: EncoderDims,
        rng: &mut R,
    ) -> Result<Self> {
        let EncoderDims {
            d_in,
            d_h,
            d_mid,
            d_m,
            num_speakers,
        } = dims;
        if [d_in, d_h, d_mid, d_m, num_speakers].contains(&0) {
            return Err(Error::Config(format!("encoder {prefix}: zero dimension in {dims:?}")));
        }
        let speaker_table = init::normal(params, format!("{prefix}.speaker"), vec![num_speakers, d_in], 0.1, rng)?;
        let fwd = GruParams::register(params, &format!("{prefix}.gru_fwd"), d_in, d_h, rng)?;
        let bwd = GruParams::register(params, &format!("{prefix}.gru_bwd"), d_in, d_h, rng)?;
        let k1 = 1.0 / ((2 * d_h) as f64).sqrt();
        let proj1_w = init::uniform(params, format!("{prefix}.proj1.w"), vec![2 * d_h, d_mid], k1, rng)?;
        let proj1_b = init::uniform(params, format!("{prefix}.proj1.b"), vec![1, d_mid], k1, rng)?;
        let k2 = 1.0 / (d_mid as f64).sqrt();
        let proj2_w = init::uniform(params, format!("{prefix}.proj2.w"), vec![d_mid, d_m], k2, rng)?;
        let proj2_b = init::uniform(params, format!("{prefix}.proj2.b"), vec![1, d_m], k2, rng)?;
        Ok(Self {
            dims,
            speaker_table,
            fwd,
            bwd,
            proj1_w,
            proj1_b,
            proj2_w,
            proj2_b,
        })
    }
}

fn dense_tanh<T: Real>(tape: &mut Tape<'_, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let w = tape.param(w)?;
    let b = tape.param(b)?;
    let xw = tape.matmul(x, w)?;
    let s = tape.add_row(xw, b)?;
    Ok(tape.tanh(s))
}

/// Speaker-embedded inputs `feature_i + speaker_table[speaker_i]`, one row each.
fn embed_inputs<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &EncoderParams,
    features: &[&[f64]],
    speaker_ids: &[usize],
) -> Result<Var> {
    if features.is_empty() {
        return Err(Error::contract("encode_sequence on an empty utterance list"));
    }
    if features.len() != speaker_ids.len() {
        return Err(Error::contract(format!(
            "{} feature vectors but {} speaker ids",
            features.len(),
            speaker_ids.len()
        )));
    }
    let d_in = enc.dims.d_in;
    if let Some(&s) = speaker_ids.iter().find(|&&s| s >= enc.dims.num_speakers) {
        return Err(Error::contract(format!(
            "unknown speaker id {s} (model has {} speakers)",
            enc.dims.num_speakers
        )));
    }
    let mut data = Vec::with_capacity(features.len() * d_in);
    for f in features {
        if f.len() != d_in {
            return Err(Error::dim(format!(
                "feature vector of length {} for an encoder expecting {d_in}",
                f.len()
            )));
        }
        data.extend(f.iter().map(|&x| T::lit(x)));
    }
    let x = tape.input(features.len(), d_in, data)?;
    let table = tape.param(enc.speaker_table)?;
    let spk = tape.gather(table, speaker_ids)?;
    tape.add(x, spk)
}

/// Encodes a list of utterance feature vectors to `n x d_m`.
///
/// `contextual = true` runs the Bi-GRU across the whole list (historical
/// role); `false` runs every utterance as its own length-1 sequence
/// (next-utterance role).
pub fn encode_sequence<T: Real>(
    tape: &mut Tape<'_, T>,
    enc: &EncoderParams,
    features: &[&[f64]],
    speaker_ids: &[usize],
    contextual: bool,
) -> Result<Var> {
    let x = embed_inputs(tape, enc, features, speaker_ids)?;
    let d_h = enc.dims.d_h;
    let states = if contextual {
        bigru(tape, x, &enc.fwd, &enc.bwd, d_h)?
    } else {
        let h0 = tape.zeros(features.len(), d_h)?;
        let f = gru_cell(tape, x, h0, &enc.fwd)?;
        let b = gru_cell(tape, x, h0, &enc.bwd)?;
        tape.hcat(&[f, b])?
    };
    let mid = dense_tanh(tape, states, enc.proj1_w, enc.proj1_b)?;
    dense_tanh(tape, mid, enc.proj2_w, enc.proj2_b)
}

#[cfg(test)]
pub(crate) mod reference {
    //! Straight-line f64 encoder used as an oracle.

    pub fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// `x W` for a row vector and a row-major matrix.
    pub fn vecmat(x: &[f64], w: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; cols];
        for (i, &xi) in x.iter().enumerate() {
            for j in 0..cols {
                out[j] += xi * w[i * cols + j];
            }
        }
        out
    }

    pub struct Gru<'a> {
        pub w: [&'a [f64]; 3],
        pub u: [&'a [f64]; 3],
        pub b: [&'a [f64]; 3],
        pub d_h: usize,
    }

    impl Gru<'_> {
        pub fn cell(&self, x: &[f64], h: &[f64]) -> Vec<f64> {
            let d = self.d_h;
            let pre = |g: usize, hv: &[f64]| -> Vec<f64> {
                let a = vecmat(x, self.w[g], d);
                let b = vecmat(hv, self.u[g], d);
                (0..d).map(|j| a[j] + b[j] + self.b[g][j]).collect()
            };
            let z: Vec<f64> = pre(0, h).into_iter().map(sigmoid).collect();
            let r: Vec<f64> = pre(1, h).into_iter().map(sigmoid).collect();
            let rh: Vec<f64> = r.iter().zip(h).map(|(a, b)| a * b).collect();
            let c: Vec<f64> = pre(2, &rh).into_iter().map(f64::tanh).collect();
            (0..d).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect()
        }
    }
}
