//! Intra- and inter-modal interaction modules.
//!
//! Each module pairs a history modality with a next-utterance modality:
//!
//! | kind  | history | next   |
//! |-------|---------|--------|
//! | HT-NT | text    | text   |
//! | HS-NS | speech  | speech |
//! | HT-NS | text    | speech |
//! | HS-NT | speech  | text   |
//!
//! The history side is encoded contextually and turned into prefix features
//! `F_{1->k}` by interaction enhancement: position `k` attends over positions
//! `1..k-1`, is added back residually and layer-normalized. The next side is
//! encoded one sentence at a time. Training aligns the two through an MSE
//! between their cosine-similarity matrix and a +1/-1 target.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{encode_sequence, EncoderParams, Modality, UtteranceFeatures};
use crate::error::{Error, Result};
use crate::init;
use crate::numerics::{ParamId, Params, Real, Tape, Var};

/// Guard used by every cosine similarity in this crate.
pub const COSINE_EPS: f64 = 1e-8;
/// Variance floor of the parameter-free layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModuleKind {
    #[serde(rename = "ht-nt")]
    HtNt,
    #[serde(rename = "hs-ns")]
    HsNs,
    #[serde(rename = "ht-ns")]
    HtNs,
    #[serde(rename = "hs-nt")]
    HsNt,
}

impl ModuleKind {
    pub const ALL: [ModuleKind; 4] = [ModuleKind::HtNt, ModuleKind::HsNs, ModuleKind::HtNs, ModuleKind::HsNt];

    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::HtNt => "ht-nt",
            ModuleKind::HsNs => "hs-ns",
            ModuleKind::HtNs => "ht-ns",
            ModuleKind::HsNt => "hs-nt",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn history(self) -> Modality {
        match self {
            ModuleKind::HtNt | ModuleKind::HtNs => Modality::Text,
            ModuleKind::HsNs | ModuleKind::HsNt => Modality::Speech,
        }
    }

    pub fn next(self) -> Modality {
        match self {
            ModuleKind::HtNt | ModuleKind::HsNt => Modality::Text,
            ModuleKind::HsNs | ModuleKind::HtNs => Modality::Speech,
        }
    }

    pub fn is_intra(self) -> bool {
        self.history() == self.next()
    }
}

impl fmt::Display for ModuleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModuleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModuleKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown module {s:?}; valid names are ht-nt, hs-ns, ht-ns, hs-nt"
                ))
            })
    }
}

/// Query/key/value projections of one module's cross-attention.
#[derive(Debug, Clone, Copy)]
pub struct IeParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl IeParams {
    pub fn register<T: Real, R: Rng>(params: &mut Params<T>, prefix: &str, d_m: usize, rng: &mut R) -> Result<Self> {
        let k = 1.0 / (d_m as f64).sqrt();
        Ok(Self {
            w_q: init::uniform(params, format!("{prefix}.w_q"), vec![d_m, d_m], k, rng)?,
            w_k: init::uniform(params, format!("{prefix}.w_k"), vec![d_m, d_m], k, rng)?,
            w_v: init::uniform(params, format!("{prefix}.w_v"), vec![d_m, d_m], k, rng)?,
        })
    }
}

/// Shared modality encoders plus one private set of attention weights per
/// module kind.
#[derive(Debug, Clone, Copy)]
pub struct ContextEncoders {
    pub text: EncoderParams,
    pub speech: EncoderParams,
    pub ie: [IeParams; 4],
}

impl ContextEncoders {
    pub fn encoder(&self, m: Modality) -> &EncoderParams {
        match m {
            Modality::Text => &self.text,
            Modality::Speech => &self.speech,
        }
    }

    pub fn ie(&self, kind: ModuleKind) -> &IeParams {
        &self.ie[kind.index()]
    }
}

/// Single-head scaled dot-product attention of one query row over context
/// rows: `softmax((q Wq)(C Wk)^T / sqrt(d)) (C Wv)`.
pub fn cross_attention<T: Real>(tape: &mut Tape<'_, T>, query: Var, context: Var, p: &IeParams) -> Result<Var> {
    if tape.rows(query) != 1 {
        return Err(Error::dim("cross_attention takes a single query row"));
    }
    let wq = tape.param(p.w_q)?;
    let wk = tape.param(p.w_k)?;
    let wv = tape.param(p.w_v)?;
    let q = tape.matmul(query, wq)?;
    let k = tape.matmul(context, wk)?;
    let v = tape.matmul(context, wv)?;
    attend(tape, q, k, v)
}

fn attend<T: Real>(tape: &mut Tape<'_, T>, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = tape.cols(q);
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scale(scores, T::one() / T::lit(d as f64).sqrt());
    let weights = tape.softmax_rows(scores);
    tape.matmul(weights, v)
}

/// Prefix features `F_{1->1} .. F_{1->n}` for history encodings `h` (`n x d`).
///
/// Enabled: `F_1 = H_1`, `F_k = LN(H_k + attn(H_k, H_1..H_{k-1}))`.
/// Disabled: `F_k = mean(H_1..H_k)`.
pub fn interaction_enhance<T: Real>(
    tape: &mut Tape<'_, T>,
    h: Var,
    p: &IeParams,
    ie_enabled: bool,
) -> Result<Vec<Var>> {
    let n = tape.rows(h);
    let mut out = Vec::with_capacity(n);
    out.push(tape.row_of(h, 0)?);
    if n == 1 {
        return Ok(out);
    }
    if ie_enabled {
        let wq = tape.param(p.w_q)?;
        let wk = tape.param(p.w_k)?;
        let wv = tape.param(p.w_v)?;
        let q_all = tape.matmul(h, wq)?;
        let k_all = tape.matmul(h, wk)?;
        let v_all = tape.matmul(h, wv)?;
        let eps = T::lit(LAYER_NORM_EPS);
        for k in 1..n {
            let q = tape.row_of(q_all, k)?;
            let keys = tape.slice_rows(k_all, 0, k)?;
            let vals = tape.slice_rows(v_all, 0, k)?;
            let att = attend(tape, q, keys, vals)?;
            let hk = tape.row_of(h, k)?;
            let res = tape.add(hk, att)?;
            out.push(tape.layer_norm_rows(res, eps));
        }
    } else {
        for k in 1..n {
            let prefix = tape.slice_rows(h, 0, k + 1)?;
            let s = tape.sum_rows(prefix);
            out.push(tape.scale(s, T::one() / T::lit((k + 1) as f64)));
        }
    }
    Ok(out)
}

/// `n x n` target with +1 on the diagonal and -1 elsewhere.
pub fn ground_truth_matrix(n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::contract("ground-truth matrix needs n >= 1"));
    }
    Ok((0..n * n).map(|i| if i / n == i % n { 1.0 } else { -1.0 }).collect())
}

/// Prediction and target matrices for one dialogue and one module.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentMatrices {
    pub m_p: Var,
    pub m_gt: Var,
    pub n: usize,
}

/// `M_p[i][j] = cos(F_i, H_next_j)`.
pub fn build_prediction_matrix<T: Real>(tape: &mut Tape<'_, T>, features: &[Var], next: Var) -> Result<Var> {
    if features.len() != tape.rows(next) {
        return Err(Error::contract(format!(
            "{} prefix features against {} next-utterance encodings",
            features.len(),
            tape.rows(next)
        )));
    }
    let f = tape.vstack(features)?;
    tape.cosine_matrix(f, next, T::lit(COSINE_EPS))
}

pub fn alignment_matrices<T: Real>(tape: &mut Tape<'_, T>, features: &[Var], next: Var) -> Result<AlignmentMatrices> {
    let m_p = build_prediction_matrix(tape, features, next)?;
    let n = features.len();
    let gt = ground_truth_matrix(n)?;
    let m_gt = tape.input(n, n, gt.into_iter().map(T::lit).collect())?;
    Ok(AlignmentMatrices { m_p, m_gt, n })
}

pub fn contrastive_loss<T: Real>(tape: &mut Tape<'_, T>, m: &AlignmentMatrices) -> Result<Var> {
    tape.mse(m.m_p, m.m_gt)
}

fn modality_rows(utts: &[UtteranceFeatures], m: Modality) -> Result<(Vec<&[f64]>, Vec<usize>)> {
    let mut rows = Vec::with_capacity(utts.len());
    let mut spk = Vec::with_capacity(utts.len());
    for (i, u) in utts.iter().enumerate() {
        let f = u.features(m);
        if f.is_empty() {
            return Err(Error::contract(format!(
                "utterance {} has no {} features",
                i + 1,
                m.name()
            )));
        }
        rows.push(f);
        spk.push(u.speaker_id);
    }
    Ok((rows, spk))
}

/// Contextual encoding of history utterances in one modality (`n x d_m`).
pub fn encode_history<T: Real>(
    tape: &mut Tape<'_, T>,
    ctx: &ContextEncoders,
    modality: Modality,
    history: &[UtteranceFeatures],
) -> Result<Var> {
    let (rows, spk) = modality_rows(history, modality)?;
    encode_sequence(tape, ctx.encoder(modality), &rows, &spk, true)
}

/// Per-sentence encoding of next utterances in one modality (`n x d_m`).
pub fn encode_next<T: Real>(
    tape: &mut Tape<'_, T>,
    ctx: &ContextEncoders,
    modality: Modality,
    next: &[UtteranceFeatures],
) -> Result<Var> {
    let (rows, spk) = modality_rows(next, modality)?;
    encode_sequence(tape, ctx.encoder(modality), &rows, &spk, false)
}

/// Output of one interaction module on one dialogue.
#[derive(Debug, Clone)]
pub struct ModuleOutput {
    /// `F_{1->1} .. F_{1->N-1}`, each `1 x d_m`.
    pub features: Vec<Var>,
    pub alignment: Option<AlignmentMatrices>,
    pub loss: Option<Var>,
}

/// Prefix features of the four modules, indexed by [`ModuleKind`]. A
/// disabled module holds `None` and contributes nothing downstream.
#[derive(Debug, Clone, Default)]
pub struct InteractionFeatureSet {
    features: [Option<Vec<Var>>; 4],
}

impl InteractionFeatureSet {
    pub fn set(&mut self, kind: ModuleKind, features: Vec<Var>) {
        self.features[kind.index()] = Some(features);
    }

    pub fn get(&self, kind: ModuleKind) -> Option<&[Var]> {
        self.features[kind.index()].as_deref()
    }

    /// `F_{1->N-1}` of `kind`, if the module is enabled.
    pub fn last(&self, kind: ModuleKind) -> Option<Var> {
        self.get(kind).and_then(|f| f.last().copied())
    }

    pub fn enabled(&self) -> impl Iterator<Item = ModuleKind> + '_ {
        ModuleKind::ALL
            .into_iter()
            .filter(|k| self.features[k.index()].is_some())
    }
}

/// History-side prefix features only; this is all inference ever computes.
pub fn history_features<T: Real>(
    tape: &mut Tape<'_, T>,
    ctx: &ContextEncoders,
    kind: ModuleKind,
    history: &[UtteranceFeatures],
    ie_enabled: bool,
) -> Result<Vec<Var>> {
    let h = encode_history(tape, ctx, kind.history(), history)?;
    interaction_enhance(tape, h, ctx.ie(kind), ie_enabled)
}

/// Full training-time module on a dialogue of `N >= 2` utterances: history
/// `1..N-1` in the first modality of `kind`, next utterances `2..N` in the
/// second, and the contrastive loss between them.
pub fn run_interaction_module<T: Real>(
    tape: &mut Tape<'_, T>,
    ctx: &ContextEncoders,
    kind: ModuleKind,
    dialogue: &[UtteranceFeatures],
    ie_enabled: bool,
) -> Result<ModuleOutput> {
    if dialogue.len() < 2 {
        return Err(Error::contract(format!(
            "interaction module needs at least 2 utterances, got {}",
            dialogue.len()
        )));
    }
    let n = dialogue.len();
    let features = history_features(tape, ctx, kind, &dialogue[..n - 1], ie_enabled)?;
    let next = encode_next(tape, ctx, kind.next(), &dialogue[1..])?;
    let alignment = alignment_matrices(tape, &features, next)?;
    let loss = contrastive_loss(tape, &alignment)?;
    Ok(ModuleOutput {
        features,
        alignment: Some(alignment),
        loss: Some(loss),
    })
}

/// Fraction of rows `i` whose most similar column is `i` itself. Ties go to
/// the lowest column index; NaN similarities never win.
pub fn retrieval_accuracy(similarity: &[f64], n: usize) -> Result<f64> {
    if n == 0 || similarity.len() != n * n {
        return Err(Error::contract(format!(
            "retrieval over {} similarities for n = {n}",
            similarity.len()
        )));
    }
    let hits = similarity
        .chunks(n)
        .enumerate()
        .filter(|(i, row)| {
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] || (row[best].is_nan() && !row[j].is_nan()) {
                    best = j;
                }
            }
            best == *i
        })
        .count();
    Ok(hits as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderDims;
    use crate::numerics::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ie_params(d: usize, seed: u64) -> (Params<f64>, IeParams) {
        let mut p = Params::new();
        let ie = IeParams::register(&mut p, "ie", d, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (p, ie)
    }

    fn vecmat(x: &[f64], w: &[f64], d: usize) -> Vec<f64> {
        crate::encoders::reference::vecmat(x, w, d)
    }

    /// Straight-line single-head attention.
    fn ref_attention(p: &Params<f64>, ie: &IeParams, q: &[f64], ctx: &[Vec<f64>]) -> Vec<f64> {
        let d = q.len();
        let (wq, wk, wv) = (p.get(ie.w_q).data(), p.get(ie.w_k).data(), p.get(ie.w_v).data());
        let qp = vecmat(q, wq, d);
        let scores: Vec<f64> = ctx
            .iter()
            .map(|c| {
                let k = vecmat(c, wk, d);
                qp.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
        let z: f64 = e.iter().sum();
        let mut out = vec![0.0; d];
        for (c, w) in ctx.iter().zip(&e) {
            let v = vecmat(c, wv, d);
            for j in 0..d {
                out[j] += w / z * v[j];
            }
        }
        out
    }

    fn ref_layer_norm(x: &[f64]) -> Vec<f64> {
        let n = x.len() as f64;
        let mu = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
        x.iter().map(|v| (v - mu) / (var + LAYER_NORM_EPS).sqrt()).collect()
    }

    #[test]
    fn module_names_round_trip() {
        for k in ModuleKind::ALL {
            assert_eq!(k.name().parse::<ModuleKind>().unwrap(), k);
        }
        assert!("ht-xx".parse::<ModuleKind>().is_err());
        assert!(ModuleKind::HtNt.is_intra() && !ModuleKind::HsNt.is_intra());
    }

    #[test]
    fn attention_single_context_returns_value_projection() {
        let (p, ie) = ie_params(3, 1);
        let mut t = Tape::new(&p);
        let q = t.row(&[0.3, -0.2, 0.9]).unwrap();
        let c = t.row(&[1.0, 0.5, -0.5]).unwrap();
        let out = cross_attention(&mut t, q, c, &ie).unwrap();
        let expect = vecmat(&[1.0, 0.5, -0.5], p.get(ie.w_v).data(), 3);
        for (a, b) in t.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_identical_context_rows() {
        let (p, ie) = ie_params(2, 2);
        let mut t = Tape::new(&p);
        let q = t.row(&[0.3, -0.2]).unwrap();
        let c = t.input(2, 2, vec![0.7, 0.1, 0.7, 0.1]).unwrap();
        let out = cross_attention(&mut t, q, c, &ie).unwrap();
        let expect = vecmat(&[0.7, 0.1], p.get(ie.w_v).data(), 2);
        for (a, b) in t.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_reference() {
        let (p, ie) = ie_params(2, 3);
        let q = [0.4, -1.1];
        let ctx = vec![vec![0.2, 0.9], vec![-0.5, 0.3], vec![1.2, -0.7]];
        let mut t = Tape::new(&p);
        let qv = t.row(&q).unwrap();
        let cv = t.input(3, 2, ctx.concat()).unwrap();
        let out = cross_attention(&mut t, qv, cv, &ie).unwrap();
        let expect = ref_attention(&p, &ie, &q, &ctx);
        for (a, b) in t.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }

    #[test]
    fn enhance_single_row_is_identity_in_both_modes() {
        let (p, ie) = ie_params(2, 4);
        for on in [true, false] {
            let mut t = Tape::new(&p);
            let h = t.row(&[0.5, -0.25]).unwrap();
            let f = interaction_enhance(&mut t, h, &ie, on).unwrap();
            assert_eq!(f.len(), 1);
            assert_eq!(t.value(f[0]), &[0.5, -0.25]);
        }
    }

    #[test]
    fn enhance_disabled_is_prefix_mean() {
        let (p, ie) = ie_params(2, 5);
        let mut t = Tape::new(&p);
        let h = t.input(2, 2, vec![1.0, 2.0, 3.0, -4.0]).unwrap();
        let f = interaction_enhance(&mut t, h, &ie, false).unwrap();
        assert_eq!(t.value(f[0]), &[1.0, 2.0]);
        assert_eq!(t.value(f[1]), &[2.0, -1.0]);
    }

    #[test]
    fn enhance_enabled_matches_stepwise_composition() {
        let (p, ie) = ie_params(2, 6);
        let rows = vec![vec![0.3, -0.8], vec![1.1, 0.4], vec![-0.6, 0.2]];
        let mut t = Tape::new(&p);
        let h = t.input(3, 2, rows.concat()).unwrap();
        let f = interaction_enhance(&mut t, h, &ie, true).unwrap();
        for k in 1..3 {
            let att = ref_attention(&p, &ie, &rows[k], &rows[..k]);
            let res: Vec<f64> = rows[k].iter().zip(&att).map(|(a, b)| a + b).collect();
            let expect = ref_layer_norm(&res);
            for (a, b) in t.value(f[k]).iter().zip(&expect) {
                assert!((a - b).abs() < 1e-12, "k={k}: {a} vs {b}");
            }
        }
        // And the tape's own cross_attention agrees bit for bit.
        let q = t.row_of(h, 1).unwrap();
        let c = t.slice_rows(h, 0, 1).unwrap();
        let att = cross_attention(&mut t, q, c, &ie).unwrap();
        let res = t.add(q, att).unwrap();
        let ln = t.layer_norm_rows(res, LAYER_NORM_EPS);
        assert_eq!(t.value(ln), t.value(f[1]));
    }

    #[test]
    fn enhance_disabled_prefix_is_order_free() {
        let (p, ie) = ie_params(3, 7);
        let a = [0.1, 0.2, 0.3];
        let b = [-1.0, 0.5, 2.0];
        let c = [0.7, -0.7, 0.0];
        let mut t = Tape::new(&p);
        let h1 = t.input(3, 3, [a, b, c].concat()).unwrap();
        let h2 = t.input(3, 3, [b, a, c].concat()).unwrap();
        let f1 = interaction_enhance(&mut t, h1, &ie, false).unwrap();
        let f2 = interaction_enhance(&mut t, h2, &ie, false).unwrap();
        for (x, y) in t.value(f1[1]).iter().zip(t.value(f2[1])) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(t.value(f1[2]), t.value(f2[2]));
    }

    #[test]
    fn ground_truth_rule() {
        assert_eq!(ground_truth_matrix(1).unwrap(), vec![1.0]);
        assert_eq!(ground_truth_matrix(2).unwrap(), vec![1.0, -1.0, -1.0, 1.0]);
        assert_eq!(
            ground_truth_matrix(3).unwrap(),
            vec![1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, -1.0, 1.0]
        );
        assert!(ground_truth_matrix(0).is_err());
    }

    #[test]
    fn prediction_matrix_examples() {
        let p = Params::<f64>::new();
        let mut t = Tape::new(&p);
        let f0 = t.row(&[1.0, 0.0]).unwrap();
        let f1 = t.row(&[0.0, 1.0]).unwrap();
        let h = t.input(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let m = build_prediction_matrix(&mut t, &[f0, f1], h).unwrap();
        assert_eq!(t.value(m), &[0.0, 1.0, 1.0, 0.0]);
        let same = t.input(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = build_prediction_matrix(&mut t, &[f0, f1], same).unwrap();
        assert_eq!(t.value(m), &[1.0, 0.0, 0.0, 1.0]);
        assert!(build_prediction_matrix(&mut t, &[f0], same).is_err());
    }

    #[test]
    fn contrastive_loss_examples() {
        let p = Params::<f64>::new();
        let mut t = Tape::new(&p);
        for n in 1..=6 {
            let gt = t.input(n, n, ground_truth_matrix(n).unwrap()).unwrap();
            let zero = t.zeros(n, n).unwrap();
            let m = AlignmentMatrices { m_p: gt, m_gt: gt, n };
            let l = contrastive_loss(&mut t, &m).unwrap();
            assert_eq!(t.scalar(l).unwrap(), 0.0);
            let m = AlignmentMatrices { m_p: zero, m_gt: gt, n };
            let l = contrastive_loss(&mut t, &m).unwrap();
            assert_eq!(t.scalar(l).unwrap(), 1.0);
        }
        let gt = t.input(2, 2, ground_truth_matrix(2).unwrap()).unwrap();
        let half = t.input(2, 2, vec![0.5, -0.5, -0.5, 0.5]).unwrap();
        let l = contrastive_loss(
            &mut t,
            &AlignmentMatrices {
                m_p: half,
                m_gt: gt,
                n: 2,
            },
        )
        .unwrap();
        assert_eq!(t.scalar(l).unwrap(), 0.25);
    }

    #[test]
    fn retrieval_examples() {
        assert_eq!(retrieval_accuracy(&[1.0, 0.0, 0.0, 1.0], 2).unwrap(), 1.0);
        // F = [e1, e1], H = [e2, e3]: every row ties at 0, lowest index wins.
        assert_eq!(retrieval_accuracy(&[0.0, 0.0, 0.0, 0.0], 2).unwrap(), 0.5);
        assert_eq!(retrieval_accuracy(&[-0.3], 1).unwrap(), 1.0);
        assert_eq!(retrieval_accuracy(&[f64::NAN, 0.2, f64::NAN, 0.1], 2).unwrap(), 0.5);
        assert!(retrieval_accuracy(&[1.0, 2.0], 2).is_err());
    }

    pub(crate) fn tiny_context(
        d_t: usize,
        d_s: usize,
        d_h: usize,
        d_m: usize,
        seed: u64,
    ) -> (Params<f64>, ContextEncoders) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let dims = |d_in| EncoderDims {
            d_in,
            d_h,
            d_mid: d_h,
            d_m,
            num_speakers: 2,
        };
        let text = EncoderParams::register(&mut p, "text", dims(d_t), &mut rng).unwrap();
        let speech = EncoderParams::register(&mut p, "speech", dims(d_s), &mut rng).unwrap();
        let ie = ModuleKind::ALL.map(|k| IeParams::register(&mut p, &format!("ie.{k}"), d_m, &mut rng).unwrap());
        (p, ContextEncoders { text, speech, ie })
    }

    pub(crate) fn tiny_dialogue(n: usize, d_t: usize, d_s: usize, seed: u64) -> Vec<UtteranceFeatures> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| UtteranceFeatures {
                speaker_id: i % 2,
                semantic: (0..d_t).map(|_| r.random_range(-1.0..1.0)).collect(),
                prosodic: (0..d_s).map(|_| r.random_range(-1.0..1.0)).collect(),
            })
            .collect()
    }

    #[test]
    fn smallest_dialogue_gives_one_by_one_matrix() {
        let (p, ctx) = tiny_context(3, 4, 3, 2, 1);
        let d = tiny_dialogue(2, 3, 4, 2);
        for kind in ModuleKind::ALL {
            let mut t = Tape::new(&p);
            let out = run_interaction_module(&mut t, &ctx, kind, &d, true).unwrap();
            assert_eq!(out.features.len(), 1);
            assert_eq!(t.shape(out.alignment.unwrap().m_p), (1, 1));
        }
        let mut t = Tape::new(&p);
        assert!(run_interaction_module(&mut t, &ctx, ModuleKind::HtNt, &d[..1], true).is_err());
    }

    #[test]
    fn text_history_shared_between_ht_modules() {
        let (p, ctx) = tiny_context(3, 4, 3, 2, 3);
        let d = tiny_dialogue(4, 3, 4, 4);
        let mut t = Tape::new(&p);
        let a = encode_history(&mut t, &ctx, ModuleKind::HtNt.history(), &d[..3]).unwrap();
        let b = encode_history(&mut t, &ctx, ModuleKind::HtNs.history(), &d[..3]).unwrap();
        assert_eq!(t.value(a), t.value(b));
        let fa = history_features(&mut t, &ctx, ModuleKind::HtNt, &d[..3], true).unwrap();
        let fb = history_features(&mut t, &ctx, ModuleKind::HtNs, &d[..3], true).unwrap();
        assert_ne!(t.value(fa[2]), t.value(fb[2]));
    }

    #[test]
    fn missing_modality_is_contract_error() {
        let (p, ctx) = tiny_context(3, 4, 3, 2, 5);
        let mut d = tiny_dialogue(3, 3, 4, 6);
        d[1].prosodic.clear();
        let mut t = Tape::new(&p);
        let err = run_interaction_module(&mut t, &ctx, ModuleKind::HsNs, &d, true).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn module_loss_matches_straight_line_recomputation() {
        // Recompute the HT-NT loss from encoder outputs with plain f64 code.
        let (p, ctx) = tiny_context(3, 3, 3, 3, 8);
        let d = tiny_dialogue(3, 3, 3, 9);
        let mut t = Tape::new(&p);
        let out = run_interaction_module(&mut t, &ctx, ModuleKind::HtNt, &d, true).unwrap();
        let loss = t.scalar(out.loss.unwrap()).unwrap();

        let mut t2 = Tape::new(&p);
        let h = encode_history(&mut t2, &ctx, Modality::Text, &d[..2]).unwrap();
        let nx = encode_next(&mut t2, &ctx, Modality::Text, &d[1..]).unwrap();
        let hr: Vec<Vec<f64>> = (0..2).map(|i| t2.row_values(h, i).to_vec()).collect();
        let nr: Vec<Vec<f64>> = (0..2).map(|i| t2.row_values(nx, i).to_vec()).collect();
        let ie = ctx.ie(ModuleKind::HtNt);
        let att = ref_attention(&p, ie, &hr[1], &hr[..1]);
        let f1 = ref_layer_norm(&hr[1].iter().zip(&att).map(|(a, b)| a + b).collect::<Vec<_>>());
        let feats = [hr[0].clone(), f1];
        let cos = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
            dot / (na * nb)
        };
        let mut expect = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { -1.0 };
                expect += (cos(&feats[i], &nr[j]) - target).powi(2);
            }
        }
        expect /= 4.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn gradient_check_every_module() {
        // d_m = 2 would make the layer norm output constant (+-1 per entry).
        let (p, ctx) = tiny_context(3, 4, 3, 3, 10);
        let d = tiny_dialogue(3, 3, 4, 11);
        for kind in ModuleKind::ALL {
            for ie_on in [true, false] {
                let r = grad_check(&p, GradCheckOptions::default(), |t| {
                    let out = run_interaction_module(t, &ctx, kind, &d, ie_on)?;
                    Ok(out.loss.unwrap())
                })
                .unwrap();
                assert!(r.passes(1e-4), "{kind} ie={ie_on}: {r:?}");
            }
        }
    }

    #[test]
    fn attention_gradient_check() {
        let (p, ie) = ie_params(3, 12);
        let r = grad_check(&p, GradCheckOptions::default(), |t| {
            let h = t.input(
                4,
                3,
                vec![0.2, -0.4, 0.9, 1.1, 0.3, -0.2, -0.5, 0.8, 0.1, 0.6, 0.6, -1.0],
            )?;
            let f = interaction_enhance(t, h, &ie, true)?;
            let s = t.vstack(&f)?;
            let sq = t.mul(s, s)?;
            let w = t.input(4, 3, (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
            let m = t.mul(sq, w)?;
            Ok(t.sum(m))
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
