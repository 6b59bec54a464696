//! Finite-difference checks of every differentiable building block, grouped
//! into suites. Both the `gradcheck` command and the acceptance run use these.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::encoders::UtteranceFeatures;
use crate::encoders::{encode_sequence, gru_cell, EncoderDims, EncoderParams, GruParams};
use crate::error::{Error, Result};
use crate::interaction::{
    cross_attention, interaction_enhance, run_interaction_module, ContextEncoders, IeParams, InteractionFeatureSet,
    ModuleKind,
};
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, ParamId, Params, Tape, Tensor, Var};
use crate::synthesizer::{aggregate_features, encode_phonemes, predict_variance, SynthParams};

/// Largest relative error a check may report and still pass.
pub const TOLERANCE: f64 = 1e-4;

const POINTS_PER_OP: u64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Numerics,
    Encoders,
    Interaction,
    Synthesizer,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Numerics, Suite::Encoders, Suite::Interaction, Suite::Synthesizer];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Numerics => "numerics",
            Suite::Encoders => "encoders",
            Suite::Interaction => "interaction",
            Suite::Synthesizer => "synthesizer",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL.into_iter().find(|x| x.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown suite {s:?}; valid: numerics, encoders, interaction, synthesizer"
            ))
        })
    }
}

/// Problem sizes: `Small` probes every coordinate of tiny models, `Default`
/// probes a strided subset of each tensor at desk dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SuiteDims {
    Small,
    Default,
}

impl FromStr for SuiteDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small" => Ok(SuiteDims::Small),
            "default" => Ok(SuiteDims::Default),
            _ => Err(Error::Config(format!("unknown dims {s:?}; valid: small, default"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub suite: Suite,
    pub op: String,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.passes(TOLERANCE)
    }
}

struct Sizes {
    d_t: usize,
    d_s: usize,
    d_h: usize,
    d_m: usize,
    vocab: usize,
    opts: GradCheckOptions,
}

impl Sizes {
    fn of(dims: SuiteDims) -> Self {
        match dims {
            SuiteDims::Small => Sizes {
                d_t: 3,
                d_s: 4,
                d_h: 3,
                d_m: 4,
                vocab: 5,
                opts: GradCheckOptions::default(),
            },
            SuiteDims::Default => Sizes {
                d_t: 32,
                d_s: 48,
                d_h: 32,
                d_m: 16,
                vocab: 64,
                opts: GradCheckOptions {
                    max_coords_per_tensor: Some(12),
                    ..GradCheckOptions::default()
                },
            },
        }
    }
}

pub fn run_suite(suite: Suite, dims: SuiteDims) -> Result<Vec<CheckOutcome>> {
    let sizes = Sizes::of(dims);
    let checks = match suite {
        Suite::Numerics => numerics_suite()?,
        Suite::Encoders => encoders_suite(&sizes)?,
        Suite::Interaction => interaction_suite(&sizes)?,
        Suite::Synthesizer => synthesizer_suite(&sizes)?,
    };
    Ok(checks
        .into_iter()
        .map(|(op, report)| CheckOutcome { suite, op, report })
        .collect())
}

pub fn run_all(dims: SuiteDims) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    for s in Suite::ALL {
        out.extend(run_suite(s, dims)?);
    }
    Ok(out)
}

fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

fn worst(a: GradCheckReport, b: GradCheckReport) -> GradCheckReport {
    if b.max_rel_error > a.max_rel_error {
        b
    } else {
        a
    }
}

/// `sum(y * W)` for a fixed random `W` of `y`'s shape, so that every output
/// entry gets its own weight.
fn project(tape: &mut Tape<'_, f64>, y: Var, seed: u64) -> Result<Var> {
    let (r, c) = tape.shape(y);
    let w = normal(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), r * c);
    let w = tape.input(r, c, w)?;
    let m = tape.mul(y, w)?;
    Ok(tape.sum(m))
}

type OpFn = fn(&mut Tape<'_, f64>, &[Var]) -> Result<Var>;
type ShapeFn = fn(usize, usize) -> Vec<(usize, usize)>;

/// Checks one op at several random points; operands are the parameters.
fn check_op(shapes: ShapeFn, f: OpFn) -> Result<GradCheckReport> {
    let mut acc: Option<GradCheckReport> = None;
    for point in 0..POINTS_PER_OP {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + point);
        let r = 2 + (point as usize % 2);
        let c = 3 + (point as usize % 2);
        let mut params = Params::new();
        let ids: Vec<ParamId> = shapes(r, c)
            .into_iter()
            .enumerate()
            .map(|(i, (a, b))| {
                params.add(
                    format!("x{i}"),
                    Tensor::matrix(a, b, normal(&mut rng, a * b))?.with_grad(),
                )
            })
            .collect::<Result<_>>()?;
        let report = grad_check(&params, GradCheckOptions::default(), |t| {
            let vars: Vec<Var> = ids.iter().map(|&id| t.param(id)).collect::<Result<_>>()?;
            let y = f(t, &vars)?;
            project(t, y, point)
        })?;
        acc = Some(match acc {
            None => report,
            Some(a) => worst(a, report),
        });
    }
    Ok(acc.expect("at least one point"))
}

fn numerics_suite() -> Result<Vec<(String, GradCheckReport)>> {
    let one = |r, c| vec![(r, c)];
    let two = |r, c| vec![(r, c), (r, c)];
    let ops: Vec<(&str, ShapeFn, OpFn)> = vec![
        ("add", two, |t, v| t.add(v[0], v[1])),
        ("sub", two, |t, v| t.sub(v[0], v[1])),
        ("mul", two, |t, v| t.mul(v[0], v[1])),
        ("add_row", |r, c| vec![(r, c), (1, c)], |t, v| t.add_row(v[0], v[1])),
        ("add_scalar", one, |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("scale", one, |t, v| Ok(t.scale(v[0], -1.7))),
        ("one_minus", one, |t, v| Ok(t.one_minus(v[0]))),
        ("matmul", |r, c| vec![(r, c), (c, r + 1)], |t, v| t.matmul(v[0], v[1])),
        ("transpose", one, |t, v| Ok(t.transpose(v[0]))),
        ("sigmoid", one, |t, v| Ok(t.sigmoid(v[0]))),
        ("tanh", one, |t, v| Ok(t.tanh(v[0]))),
        ("exp", one, |t, v| Ok(t.exp(v[0]))),
        ("sum", one, |t, v| Ok(t.sum(v[0]))),
        ("mean", one, |t, v| Ok(t.mean(v[0]))),
        ("sum_rows", one, |t, v| Ok(t.sum_rows(v[0]))),
        ("softmax_rows", one, |t, v| Ok(t.softmax_rows(v[0]))),
        ("layer_norm_rows", one, |t, v| Ok(t.layer_norm_rows(v[0], 1e-5))),
        ("l2_normalize_rows", one, |t, v| Ok(t.l2_normalize_rows(v[0], 1e-8))),
        ("slice_rows", one, |t, v| {
            let r = t.rows(v[0]);
            t.slice_rows(v[0], 1, r)
        }),
        ("vstack", |r, c| vec![(r, c), (1, c)], |t, v| t.vstack(&[v[0], v[1]])),
        ("hcat", |r, c| vec![(r, c), (r, 2)], |t, v| t.hcat(&[v[0], v[1]])),
        ("gather", one, |t, v| t.gather(v[0], &[1, 0, 1])),
        ("mse", two, |t, v| t.mse(v[0], v[1])),
        (
            "cosine_similarity",
            |_, c| vec![(1, c), (1, c)],
            |t, v| t.cosine_similarity(v[0], v[1], 1e-8),
        ),
        (
            "cosine_matrix",
            |r, c| vec![(r, c), (r + 1, c)],
            |t, v| t.cosine_matrix(v[0], v[1], 1e-8),
        ),
    ];
    ops.into_iter()
        .map(|(name, shapes, f)| Ok((name.to_string(), check_op(shapes, f)?)))
        .collect()
}

fn utterances(n: usize, d_t: usize, d_s: usize, seed: u64) -> Vec<UtteranceFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| UtteranceFeatures {
            speaker_id: i % 2,
            semantic: normal(&mut rng, d_t).into_iter().map(|x| 0.5 * x).collect(),
            prosodic: normal(&mut rng, d_s).into_iter().map(|x| 0.5 * x).collect(),
        })
        .collect()
}

fn encoder_dims(s: &Sizes, d_in: usize) -> EncoderDims {
    EncoderDims {
        d_in,
        d_h: s.d_h,
        d_mid: s.d_h,
        d_m: s.d_m,
        num_speakers: 2,
    }
}

fn encoders_suite(s: &Sizes) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut params = Params::new();
    let gru = GruParams::register(&mut params, "gru", s.d_t, s.d_h, &mut rng)?;
    let x = params.add("x", Tensor::matrix(1, s.d_t, normal(&mut rng, s.d_t))?.with_grad())?;
    let h = params.add("h", Tensor::matrix(1, s.d_h, normal(&mut rng, s.d_h))?.with_grad())?;
    let report = grad_check(&params, s.opts, |t| {
        let (xv, hv) = (t.param(x)?, t.param(h)?);
        let y = gru_cell(t, xv, hv, &gru)?;
        project(t, y, 1)
    })?;
    out.push(("gru_cell".to_string(), report));

    let utts = utterances(4, s.d_t, s.d_s, 12);
    let rows: Vec<&[f64]> = utts.iter().map(|u| u.semantic.as_slice()).collect();
    let spk: Vec<usize> = utts.iter().map(|u| u.speaker_id).collect();
    let mut params = Params::new();
    let enc = EncoderParams::register(&mut params, "enc", encoder_dims(s, s.d_t), &mut rng)?;
    for (name, contextual) in [("bigru_encoder", true), ("sentence_encoder", false)] {
        let report = grad_check(&params, s.opts, |t| {
            let y = encode_sequence(t, &enc, &rows, &spk, contextual)?;
            project(t, y, 2)
        })?;
        out.push((name.to_string(), report));
    }
    Ok(out)
}

fn context(s: &Sizes, rng: &mut ChaCha8Rng, params: &mut Params<f64>) -> Result<ContextEncoders> {
    let text = EncoderParams::register(params, "text", encoder_dims(s, s.d_t), rng)?;
    let speech = EncoderParams::register(params, "speech", encoder_dims(s, s.d_s), rng)?;
    let mut ie = Vec::new();
    for k in ModuleKind::ALL {
        ie.push(IeParams::register(params, &format!("ie.{k}"), s.d_m, rng)?);
    }
    Ok(ContextEncoders {
        text,
        speech,
        ie: ie.try_into().expect("four modules"),
    })
}

fn interaction_suite(s: &Sizes) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = s.d_m;

    let mut params = Params::new();
    let ie = IeParams::register(&mut params, "ie", d, &mut rng)?;
    let q = params.add("query", Tensor::matrix(1, d, normal(&mut rng, d))?.with_grad())?;
    let c = params.add("context", Tensor::matrix(3, d, normal(&mut rng, 3 * d))?.with_grad())?;
    let report = grad_check(&params, s.opts, |t| {
        let (qv, cv) = (t.param(q)?, t.param(c)?);
        let y = cross_attention(t, qv, cv, &ie)?;
        project(t, y, 3)
    })?;
    out.push(("cross_attention".to_string(), report));

    for (name, on) in [("interaction_enhance", true), ("prefix_mean", false)] {
        let report = grad_check(&params, s.opts, |t| {
            let h = t.param(c)?;
            let f = interaction_enhance(t, h, &ie, on)?;
            let y = t.vstack(&f)?;
            project(t, y, 4)
        })?;
        out.push((name.to_string(), report));
    }

    let mut params = Params::new();
    let ctx = context(s, &mut rng, &mut params)?;
    let dialogue = utterances(4, s.d_t, s.d_s, 22);
    for kind in ModuleKind::ALL {
        let report = grad_check(&params, s.opts, |t| {
            let m = run_interaction_module(t, &ctx, kind, &dialogue, true)?;
            m.loss.ok_or_else(|| Error::contract("module produced no loss"))
        })?;
        out.push((format!("contrastive_loss[{kind}]"), report));
    }
    Ok(out)
}

fn synthesizer_suite(s: &Sizes) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = s.d_m;
    let phonemes = [1, s.vocab - 1, 0, 2];

    let mut params = Params::new();
    let sp = SynthParams::register(&mut params, s.vocab, d, &mut rng)?;
    let report = grad_check(&params, s.opts, |t| {
        let y = encode_phonemes(t, &sp, &phonemes)?;
        project(t, y, 5)
    })?;
    out.push(("phoneme_encoder".to_string(), report));

    let p = params.add("encodings", Tensor::matrix(3, d, normal(&mut rng, 3 * d))?.with_grad())?;
    let feats: Vec<ParamId> = ModuleKind::ALL
        .iter()
        .map(|k| {
            params.add(
                format!("feature.{k}"),
                Tensor::matrix(1, d, normal(&mut rng, d))?.with_grad(),
            )
        })
        .collect::<Result<_>>()?;
    let report = grad_check(&params, s.opts, |t| {
        let pv = t.param(p)?;
        let mut set = InteractionFeatureSet::default();
        for (k, &id) in ModuleKind::ALL.iter().zip(&feats) {
            let f = t.param(id)?;
            set.set(*k, vec![f]);
        }
        let y = aggregate_features(t, pv, &set)?;
        project(t, y, 6)
    })?;
    out.push(("aggregate_features".to_string(), report));

    let report = grad_check(&params, s.opts, |t| {
        let pv = t.param(p)?;
        let o = predict_variance(t, &sp, pv)?;
        let y = t.hcat(&[o.pitch, o.energy, o.log_duration])?;
        project(t, y, 7)
    })?;
    out.push(("variance_heads".to_string(), report));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_small_suite_passes() {
        for out in run_all(SuiteDims::Small).unwrap() {
            assert!(out.passed(), "{} {}: {:?}", out.suite, out.op, out.report);
        }
    }

    #[test]
    fn every_default_suite_passes() {
        for out in run_all(SuiteDims::Default).unwrap() {
            assert!(out.passed(), "{} {}: {:?}", out.suite, out.op, out.report);
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("encoders".parse::<Suite>().unwrap(), Suite::Encoders);
        assert!("everything".parse::<Suite>().is_err());
        assert_eq!("small".parse::<SuiteDims>().unwrap(), SuiteDims::Small);
        assert!("huge".parse::<SuiteDims>().is_err());
    }
}
