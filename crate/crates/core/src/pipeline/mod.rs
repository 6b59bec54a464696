//! Joint model, losses, training, evaluation and checkpoints.

mod checkpoint;
mod eval;
mod train;

pub use checkpoint::{Checkpoint, NamedTensor, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use eval::{evaluate, evaluate_dialogue, infer, predict, DialogueEval, EvalReport};
pub use train::{batch_gradients, split_indices, train, MetricsEntry, Split, TrainOptions, TrainOutcome};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusDims, DialogueRecord, TargetProsody};
use crate::encoders::{EncoderDims, EncoderParams, Modality, UtteranceFeatures};
use crate::error::{Error, Result};
use crate::interaction::{
    alignment_matrices, contrastive_loss, encode_history, encode_next, interaction_enhance, AlignmentMatrices,
    ContextEncoders, IeParams, InteractionFeatureSet, ModuleKind,
};
use crate::numerics::{DType, Params, Real, Tape, Var};
use crate::synthesizer::{aggregate_features, encode_phonemes, predict_variance, SynthParams, VarianceOutputs};

/// Which interaction modules take part in training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleFlags {
    pub ht_nt: bool,
    pub hs_ns: bool,
    pub ht_ns: bool,
    pub hs_nt: bool,
}

impl Default for ModuleFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl ModuleFlags {
    pub fn all() -> Self {
        Self::keep(&ModuleKind::ALL)
    }

    pub fn none() -> Self {
        Self::keep(&[])
    }

    pub fn keep(kinds: &[ModuleKind]) -> Self {
        let on = |k| kinds.contains(&k);
        Self {
            ht_nt: on(ModuleKind::HtNt),
            hs_ns: on(ModuleKind::HsNs),
            ht_ns: on(ModuleKind::HtNs),
            hs_nt: on(ModuleKind::HsNt),
        }
    }

    pub fn is_enabled(&self, kind: ModuleKind) -> bool {
        match kind {
            ModuleKind::HtNt => self.ht_nt,
            ModuleKind::HsNs => self.hs_ns,
            ModuleKind::HtNs => self.ht_ns,
            ModuleKind::HsNt => self.hs_nt,
        }
    }

    pub fn enabled(&self) -> Vec<ModuleKind> {
        ModuleKind::ALL.into_iter().filter(|&k| self.is_enabled(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_s: usize,
    pub d_h_text: usize,
    pub d_h_speech: usize,
    pub d_m: usize,
    pub vocab: usize,
    pub num_speakers: usize,
    pub lambda_cl: f64,
    pub module_flags: ModuleFlags,
    pub ie_enabled: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub precision: DType,
    /// Validation interval in optimizer steps.
    pub eval_every: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 32,
            d_s: 48,
            d_h_text: 32,
            d_h_speech: 48,
            d_m: 16,
            vocab: 64,
            num_speakers: 2,
            lambda_cl: 1.0,
            module_flags: ModuleFlags::all(),
            ie_enabled: true,
            lr: 1e-2,
            batch_size: 16,
            steps: 3000,
            seed: 0,
            precision: DType::F32,
            eval_every: 250,
        }
    }
}

impl ModelConfig {
    /// Dimensions of the full-size setting: 512-d sentence embeddings,
    /// 768-d speech embeddings, 256-d interaction space.
    pub fn full_scale() -> Self {
        Self {
            d_t: 512,
            d_s: 768,
            d_h_text: 512,
            d_h_speech: 768,
            d_m: 256,
            lr: 1e-3,
            steps: 400_000,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_t", self.d_t),
            ("d_s", self.d_s),
            ("d_h_text", self.d_h_text),
            ("d_h_speech", self.d_h_speech),
            ("d_m", self.d_m),
            ("vocab", self.vocab),
            ("num_speakers", self.num_speakers),
            ("batch_size", self.batch_size),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !self.d_m.is_multiple_of(2) {
            return Err(Error::Config(format!("d_m = {} must be even", self.d_m)));
        }
        if !(self.lambda_cl.is_finite() && self.lambda_cl >= 0.0) {
            return Err(Error::Config(format!("lambda_cl = {} must be >= 0", self.lambda_cl)));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("lr = {} must be >= 0", self.lr)));
        }
        Ok(())
    }

    /// Rejects corpora whose feature sizes or id ranges the model cannot take.
    pub fn check_corpus(&self, dims: &CorpusDims) -> Result<()> {
        if dims.d_t != self.d_t || dims.d_s != self.d_s {
            return Err(Error::Config(format!(
                "corpus has semantic/prosodic dims {}/{}, model expects {}/{}",
                dims.d_t, dims.d_s, self.d_t, self.d_s
            )));
        }
        if dims.min_vocab > self.vocab {
            return Err(Error::Config(format!(
                "corpus uses phoneme id {}, model vocabulary is {}",
                dims.min_vocab - 1,
                self.vocab
            )));
        }
        if dims.min_speakers > self.num_speakers {
            return Err(Error::Config(format!(
                "corpus uses speaker id {}, model has {} speakers",
                dims.min_speakers - 1,
                self.num_speakers
            )));
        }
        Ok(())
    }

    fn uses_contrastive(&self) -> bool {
        self.lambda_cl != 0.0 && !self.module_flags.enabled().is_empty()
    }
}

/// All trainable state plus the handles into it.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
    pub context: ContextEncoders,
    pub synth: SynthParams,
}

impl<T: Real> Model<T> {
    /// Freshly initialized model; a pure function of the config.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Params::new();
        let dims = |d_in, d_h| EncoderDims {
            d_in,
            d_h,
            d_mid: d_h,
            d_m: config.d_m,
            num_speakers: config.num_speakers,
        };
        let text = EncoderParams::register(&mut params, "text", dims(config.d_t, config.d_h_text), &mut rng)?;
        let speech = EncoderParams::register(&mut params, "speech", dims(config.d_s, config.d_h_speech), &mut rng)?;
        let mut ie = Vec::with_capacity(4);
        for kind in ModuleKind::ALL {
            ie.push(IeParams::register(
                &mut params,
                &format!("ie.{kind}"),
                config.d_m,
                &mut rng,
            )?);
        }
        let ie: [IeParams; 4] = ie.try_into().expect("four modules");
        let synth = SynthParams::register(&mut params, config.vocab, config.d_m, &mut rng)?;
        Ok(Self {
            config,
            params,
            context: ContextEncoders { text, speech, ie },
            synth,
        })
    }
}

/// Per-dialogue loss values, or their average over a set of dialogues.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub pitch: f64,
    pub energy: f64,
    pub logdur: f64,
    /// Contrastive loss per enabled module.
    pub contrastive: BTreeMap<String, f64>,
    pub total: f64,
}

impl LossComponents {
    /// Sum of the three variance losses.
    pub fn prosody(&self) -> f64 {
        self.pitch + self.energy + self.logdur
    }

    pub(crate) fn mean(parts: &[LossComponents]) -> LossComponents {
        let n = parts.len().max(1) as f64;
        let mut out = LossComponents::default();
        for p in parts {
            out.pitch += p.pitch / n;
            out.energy += p.energy / n;
            out.logdur += p.logdur / n;
            out.total += p.total / n;
            for (k, v) in &p.contrastive {
                *out.contrastive.entry(k.clone()).or_default() += v / n;
            }
        }
        out
    }
}

/// Everything one forward pass over a dialogue leaves on the tape.
#[derive(Debug, Clone)]
pub struct Forward {
    pub features: InteractionFeatureSet,
    pub outputs: VarianceOutputs,
    pub alignments: [Option<AlignmentMatrices>; 4],
    pub contrastive: [Option<Var>; 4],
}

/// Runs the enabled modules on `history`, aggregates into the phoneme
/// encoding of `phonemes` and predicts prosody. When `next` is given (the
/// utterances `2..N`), the alignment matrices and contrastive losses are
/// built as well; the prosody outputs never depend on it.
pub fn forward<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    history: &[UtteranceFeatures],
    next: Option<&[UtteranceFeatures]>,
    phonemes: &[usize],
) -> Result<Forward> {
    if history.is_empty() {
        return Err(Error::contract("dialogue history is empty"));
    }
    if let Some(next) = next {
        if next.len() != history.len() {
            return Err(Error::contract(format!(
                "{} history utterances but {} next utterances",
                history.len(),
                next.len()
            )));
        }
    }
    let cfg = &model.config;
    let ctx = &model.context;
    let mut hist_enc: [Option<Var>; 2] = [None, None];
    let mut next_enc: [Option<Var>; 2] = [None, None];
    let slot = |m: Modality| match m {
        Modality::Text => 0,
        Modality::Speech => 1,
    };

    let mut features = InteractionFeatureSet::default();
    let mut alignments = [None; 4];
    let mut contrastive = [None; 4];
    for kind in cfg.module_flags.enabled() {
        let hm = kind.history();
        let h = match hist_enc[slot(hm)] {
            Some(h) => h,
            None => {
                let h = encode_history(tape, ctx, hm, history)?;
                hist_enc[slot(hm)] = Some(h);
                h
            }
        };
        let f = interaction_enhance(tape, h, ctx.ie(kind), cfg.ie_enabled)?;
        if let Some(next) = next {
            let nm = kind.next();
            let n = match next_enc[slot(nm)] {
                Some(n) => n,
                None => {
                    let n = encode_next(tape, ctx, nm, next)?;
                    next_enc[slot(nm)] = Some(n);
                    n
                }
            };
            let a = alignment_matrices(tape, &f, n)?;
            contrastive[kind.index()] = Some(contrastive_loss(tape, &a)?);
            alignments[kind.index()] = Some(a);
        }
        features.set(kind, f);
    }

    let p = encode_phonemes(tape, &model.synth, phonemes)?;
    let p = aggregate_features(tape, p, &features)?;
    let outputs = predict_variance(tape, &model.synth, p)?;
    Ok(Forward {
        features,
        outputs,
        alignments,
        contrastive,
    })
}

/// Pitch, energy and log-duration MSE against the targets.
pub fn variance_losses<T: Real>(
    tape: &mut Tape<'_, T>,
    out: &VarianceOutputs,
    target: &TargetProsody,
) -> Result<[Var; 3]> {
    let l = target.phonemes.len();
    let col = |tape: &mut Tape<'_, T>, xs: Vec<f64>| tape.input(l, 1, xs.into_iter().map(T::lit).collect());
    let pitch = col(tape, target.pitch.clone())?;
    let energy = col(tape, target.energy.clone())?;
    let logdur = col(tape, target.duration.iter().map(|&d| (d as f64).ln()).collect())?;
    Ok([
        tape.mse(out.pitch, pitch)?,
        tape.mse(out.energy, energy)?,
        tape.mse(out.log_duration, logdur)?,
    ])
}

/// Loss of one dialogue on `tape`: variance MSEs plus `lambda_cl` times the
/// contrastive loss of every enabled module. With `lambda_cl = 0` the
/// contrastive branch is not built at all.
pub fn dialogue_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    record: &DialogueRecord,
) -> Result<DialogueLoss> {
    let n = record.turns();
    if n < 2 {
        return Err(Error::contract(format!("dialogue has {n} utterance(s), need 2")));
    }
    let next = model.config.uses_contrastive().then(|| &record.utterances[1..]);
    let fwd = forward(tape, model, record.history(), next, &record.target.phonemes)?;
    let variance = variance_losses(tape, &fwd.outputs, &record.target)?;
    let [p, e, d] = variance;
    let pe = tape.add(p, e)?;
    let mut total = tape.add(pe, d)?;
    let cl: Vec<Var> = fwd.contrastive.iter().flatten().copied().collect();
    if !cl.is_empty() {
        let mut sum = cl[0];
        for &c in &cl[1..] {
            sum = tape.add(sum, c)?;
        }
        let weighted = tape.scale(sum, T::lit(model.config.lambda_cl));
        total = tape.add(total, weighted)?;
    }
    Ok(DialogueLoss {
        total,
        variance,
        forward: fwd,
    })
}

#[derive(Debug, Clone)]
pub struct DialogueLoss {
    pub total: Var,
    /// Pitch, energy and log-duration MSE.
    pub variance: [Var; 3],
    pub forward: Forward,
}

impl DialogueLoss {
    pub fn components<T: Real>(&self, tape: &Tape<'_, T>) -> Result<LossComponents> {
        let total = tape.scalar(self.total)?.as_f64();
        read_components(tape, self.variance, &self.forward.contrastive, total)
    }
}

fn read_components<T: Real>(
    tape: &Tape<'_, T>,
    parts: [Var; 3],
    contrastive: &[Option<Var>; 4],
    total: f64,
) -> Result<LossComponents> {
    let s = |v: Var| tape.scalar(v).map(|x| x.as_f64());
    let mut c = BTreeMap::new();
    for kind in ModuleKind::ALL {
        if let Some(v) = contrastive[kind.index()] {
            c.insert(kind.name().to_string(), s(v)?);
        }
    }
    Ok(LossComponents {
        pitch: s(parts[0])?,
        energy: s(parts[1])?,
        logdur: s(parts[2])?,
        contrastive: c,
        total,
    })
}

/// Batch objective on a single tape: the mean of [`dialogue_loss`] over the
/// batch, with the component values averaged the same way.
pub fn total_loss<T: Real>(
    tape: &mut Tape<'_, T>,
    model: &Model<T>,
    batch: &[&DialogueRecord],
) -> Result<(Var, LossComponents)> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut losses = Vec::with_capacity(batch.len());
    let mut parts = Vec::with_capacity(batch.len());
    for r in batch {
        let l = dialogue_loss(tape, model, r)?;
        parts.push(l.components(tape)?);
        losses.push(l.total);
    }
    let stacked = tape.vstack(&losses)?;
    let mean = tape.mean(stacked);
    Ok((mean, LossComponents::mean(&parts)))
}
