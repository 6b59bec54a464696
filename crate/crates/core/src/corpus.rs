//! Synthetic dialogue corpora with known cross-modal latent dynamics, and
//! their JSON Lines serialization.
//!
//! Every dialogue follows two coupled latent chains, a semantic one `z_s`
//! and a prosodic one `z_p`:
//!
//! ```text
//! z_s[i+1] = tanh(A_ss z_s[i] + A_ps z_p[i]) + noise
//! z_p[i+1] = tanh(A_pp z_p[i] + A_sp z_s[i]) + noise
//! semantic[i] = tanh(W_t z_s[i]) + noise
//! prosodic[i] = tanh(W_s z_p[i]) + noise
//! ```
//!
//! The target utterance's phoneme-level pitch and energy are a projection of
//! the final prosodic latent plus a per-phoneme offset; durations follow the
//! same pattern and are rounded and clamped to `[1, 8]`. The latent part can
//! only be recovered from the dialogue history, the offset only from the
//! phoneme ids.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::UtteranceFeatures;
use crate::error::{Error, Result};
use crate::par::{self, Execution};

pub const MIN_DURATION: u32 = 1;
pub const MAX_DURATION: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_dialogues: usize,
    pub turns_min: usize,
    pub turns_max: usize,
    pub d_z: usize,
    pub d_t: usize,
    pub d_s: usize,
    pub noise_sigma: f64,
    pub vocab: usize,
    pub phonemes_min: usize,
    pub phonemes_max: usize,
    pub num_speakers: usize,
    pub seed: u64,
    /// Target spectral norm of each transition matrix.
    pub spectral_norm: f64,
    /// Multiplier on `A_ps` and `A_sp`; 0 decouples the two chains.
    pub cross_coupling: f64,
    /// Target projections `w_p`, `w_e` have entries with standard deviation
    /// `latent_scale / sqrt(d_z)`; `w_d` uses half of that.
    pub latent_scale: f64,
    /// Standard deviation of the per-phoneme pitch and energy offsets.
    pub offset_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_dialogues: 2000,
            turns_min: 2,
            turns_max: 6,
            d_z: 16,
            d_t: 32,
            d_s: 48,
            noise_sigma: 0.05,
            vocab: 64,
            phonemes_min: 4,
            phonemes_max: 12,
            num_speakers: 2,
            seed: 0,
            spectral_norm: 0.9,
            cross_coupling: 1.0,
            latent_scale: 2.0,
            offset_scale: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::contract(format!("generator config: {m}")));
        if self.turns_min < 2 {
            return fail(format!(
                "turns_min = {} (dialogues need at least 2 turns)",
                self.turns_min
            ));
        }
        if self.turns_max < self.turns_min {
            return fail(format!("turns_max {} < turns_min {}", self.turns_max, self.turns_min));
        }
        if self.phonemes_min < 1 || self.phonemes_max < self.phonemes_min {
            return fail(format!(
                "phoneme length range [{}, {}]",
                self.phonemes_min, self.phonemes_max
            ));
        }
        for (name, v) in [
            ("d_z", self.d_z),
            ("d_t", self.d_t),
            ("d_s", self.d_s),
            ("vocab", self.vocab),
            ("num_speakers", self.num_speakers),
        ] {
            if v == 0 {
                return fail(format!("{name} must be at least 1"));
            }
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("spectral_norm", self.spectral_norm),
            ("latent_scale", self.latent_scale),
            ("offset_scale", self.offset_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        if !self.cross_coupling.is_finite() {
            return fail("cross_coupling must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetProsody {
    pub phonemes: Vec<usize>,
    pub pitch: Vec<f64>,
    pub energy: Vec<f64>,
    pub duration: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueRecord {
    pub utterances: Vec<UtteranceFeatures>,
    pub target: TargetProsody,
}

impl DialogueRecord {
    /// Number of utterances `N`, the last being the target.
    pub fn turns(&self) -> usize {
        self.utterances.len()
    }

    pub fn history(&self) -> &[UtteranceFeatures] {
        &self.utterances[..self.utterances.len().saturating_sub(1)]
    }

    /// Checks the structural invariants; the message names the offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.utterances.len() < 2 {
            return bad(format!(
                "utterances: dialogue has {} utterance(s), at least 2 required",
                self.utterances.len()
            ));
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if u.semantic.is_empty() {
                return bad(format!("utterances[{i}].semantic is empty"));
            }
            if u.prosodic.is_empty() {
                return bad(format!("utterances[{i}].prosodic is empty"));
            }
            if let Some(x) = u.semantic.iter().chain(&u.prosodic).find(|x| !x.is_finite()) {
                return bad(format!("utterances[{i}] contains non-finite value {x}"));
            }
        }
        let t = &self.target;
        let l = t.phonemes.len();
        if l == 0 {
            return bad("target.phonemes is empty".into());
        }
        for (name, n) in [
            ("pitch", t.pitch.len()),
            ("energy", t.energy.len()),
            ("duration", t.duration.len()),
        ] {
            if n != l {
                return bad(format!("target.{name} has {n} entries, target.phonemes has {l}"));
            }
        }
        if let Some(x) = t.pitch.iter().chain(&t.energy).find(|x| !x.is_finite()) {
            return bad(format!("target pitch/energy contains non-finite value {x}"));
        }
        if let Some(j) = t.duration.iter().position(|&d| d < MIN_DURATION) {
            return bad(format!("target.duration[{j}] is 0"));
        }
        Ok(())
    }
}

/// Pooled phoneme-level statistics used to z-normalize pitch and energy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub pitch_mean: f64,
    pub pitch_std: f64,
    pub energy_mean: f64,
    pub energy_std: f64,
}

impl Default for NormStats {
    fn default() -> Self {
        Self {
            pitch_mean: 0.0,
            pitch_std: 1.0,
            energy_mean: 0.0,
            energy_std: 1.0,
        }
    }
}

impl NormStats {
    pub fn of(records: &[DialogueRecord]) -> Self {
        let (pm, ps) = mean_std(records.iter().flat_map(|r| r.target.pitch.iter().copied()));
        let (em, es) = mean_std(records.iter().flat_map(|r| r.target.energy.iter().copied()));
        Self {
            pitch_mean: pm,
            pitch_std: ps,
            energy_mean: em,
            energy_std: es,
        }
    }
}

fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 1.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Largest singular value of a row-major `d x d` matrix by power iteration on
/// `A^T A`.
pub fn spectral_norm(a: &[f64], d: usize) -> f64 {
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    let mut sigma = 0.0;
    for _ in 0..500 {
        let av = matvec(a, &v, d, d);
        let mut w = vec![0.0; d];
        for i in 0..d {
            for j in 0..d {
                w[j] += a[i * d + j] * av[i];
            }
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v = w.iter().map(|x| x / norm).collect();
        let next = matvec(a, &v, d, d).iter().map(|x| x * x).sum::<f64>().sqrt();
        let done = (next - sigma).abs() <= 1e-13 * next.max(1.0);
        sigma = next;
        if done {
            break;
        }
    }
    sigma
}

fn matvec(a: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..rows)
        .map(|i| a[i * cols..(i + 1) * cols].iter().zip(x).map(|(p, q)| p * q).sum())
        .collect()
}

fn normal_vec<R: Rng>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Corpus-wide generative maps, drawn once from the corpus seed.
#[derive(Debug, Clone)]
pub struct LatentModel {
    pub d_z: usize,
    pub a_ss: Vec<f64>,
    pub a_sp: Vec<f64>,
    pub a_ps: Vec<f64>,
    pub a_pp: Vec<f64>,
    pub w_t: Vec<f64>,
    pub w_s: Vec<f64>,
    pub w_p: Vec<f64>,
    pub w_e: Vec<f64>,
    pub w_d: Vec<f64>,
    pub pitch_offset: Vec<f64>,
    pub energy_offset: Vec<f64>,
    pub duration_offset: Vec<f64>,
}

impl LatentModel {
    pub fn draw(cfg: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_z;
        let mut transition = |scale: f64| {
            let mut a = normal_vec(&mut rng, d * d, 1.0);
            let s = spectral_norm(&a, d);
            let k = if s > 0.0 { cfg.spectral_norm * scale / s } else { 0.0 };
            a.iter_mut().for_each(|x| *x *= k);
            a
        };
        let a_ss = transition(1.0);
        let a_sp = transition(cfg.cross_coupling);
        let a_ps = transition(cfg.cross_coupling);
        let a_pp = transition(1.0);
        let obs = 1.0 / (d as f64).sqrt();
        let proj = cfg.latent_scale / (d as f64).sqrt();
        Self {
            d_z: d,
            a_ss,
            a_sp,
            a_ps,
            a_pp,
            w_t: normal_vec(&mut rng, cfg.d_t * d, obs),
            w_s: normal_vec(&mut rng, cfg.d_s * d, obs),
            w_p: normal_vec(&mut rng, d, proj),
            w_e: normal_vec(&mut rng, d, proj),
            w_d: normal_vec(&mut rng, d, proj / 2.0),
            pitch_offset: normal_vec(&mut rng, cfg.vocab, cfg.offset_scale),
            energy_offset: normal_vec(&mut rng, cfg.vocab, cfg.offset_scale),
            duration_offset: normal_vec(&mut rng, cfg.vocab, 1.0),
        }
    }
}

/// A generated dialogue together with the latent projections its targets
/// were built from. The projections are what a perfect history model could
/// recover.
#[derive(Debug, Clone)]
pub struct GeneratedDialogue {
    pub record: DialogueRecord,
    pub latent_pitch: f64,
    pub latent_energy: f64,
}

fn dialogue_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ index as u64);
    // Keep per-dialogue streams apart from the corpus-level draw even when
    // `seed ^ index == seed`.
    rng.set_stream(1);
    rng
}

fn generate_dialogue(cfg: &GeneratorConfig, m: &LatentModel, index: usize) -> GeneratedDialogue {
    let mut rng = dialogue_rng(cfg.seed, index);
    let d = m.d_z;
    let sigma = cfg.noise_sigma;
    let turns = rng.random_range(cfg.turns_min..=cfg.turns_max);
    let mut z_s = normal_vec(&mut rng, d, 1.0);
    let mut z_p = normal_vec(&mut rng, d, 1.0);
    let mut utterances = Vec::with_capacity(turns);
    for i in 0..turns {
        if i > 0 {
            let ss = matvec(&m.a_ss, &z_s, d, d);
            let ps = matvec(&m.a_ps, &z_p, d, d);
            let pp = matvec(&m.a_pp, &z_p, d, d);
            let sp = matvec(&m.a_sp, &z_s, d, d);
            let ns = normal_vec(&mut rng, d, sigma);
            let np = normal_vec(&mut rng, d, sigma);
            z_s = (0..d).map(|k| (ss[k] + ps[k]).tanh() + ns[k]).collect();
            z_p = (0..d).map(|k| (pp[k] + sp[k]).tanh() + np[k]).collect();
        }
        let observe = |rng: &mut ChaCha8Rng, w: &[f64], z: &[f64], rows: usize| -> Vec<f64> {
            let noise = normal_vec(rng, rows, sigma);
            matvec(w, z, rows, d)
                .into_iter()
                .zip(noise)
                .map(|(x, e)| x.tanh() + e)
                .collect()
        };
        let semantic = observe(&mut rng, &m.w_t, &z_s, cfg.d_t);
        let prosodic = observe(&mut rng, &m.w_s, &z_p, cfg.d_s);
        utterances.push(UtteranceFeatures {
            speaker_id: i % cfg.num_speakers,
            semantic,
            prosodic,
        });
    }
    let dot = |w: &[f64]| w.iter().zip(&z_p).map(|(a, b)| a * b).sum::<f64>();
    let latent_pitch = dot(&m.w_p);
    let latent_energy = dot(&m.w_e);
    let latent_dur = dot(&m.w_d);
    let len = rng.random_range(cfg.phonemes_min..=cfg.phonemes_max);
    let phonemes: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab)).collect();
    let target = TargetProsody {
        pitch: phonemes.iter().map(|&p| latent_pitch + m.pitch_offset[p]).collect(),
        energy: phonemes.iter().map(|&p| latent_energy + m.energy_offset[p]).collect(),
        duration: phonemes
            .iter()
            .map(|&p| {
                (4.0 + 2.0 * latent_dur + m.duration_offset[p])
                    .round()
                    .clamp(MIN_DURATION as f64, MAX_DURATION as f64) as u32
            })
            .collect(),
        phonemes,
    };
    GeneratedDialogue {
        record: DialogueRecord { utterances, target },
        latent_pitch,
        latent_energy,
    }
}

/// Generates the corpus and returns the normalization applied to it. The
/// latent projections in the result are normalized with the same statistics.
pub fn generate_detailed(cfg: &GeneratorConfig, exec: Execution) -> Result<(Vec<GeneratedDialogue>, NormStats)> {
    cfg.validate()?;
    let model = LatentModel::draw(cfg);
    let mut out = par::map_range(exec, cfg.num_dialogues, |i| generate_dialogue(cfg, &model, i));
    let raw: Vec<DialogueRecord> = out.iter().map(|g| g.record.clone()).collect();
    let stats = NormStats::of(&raw);
    let scale = |x: f64, mean: f64, std: f64| if std > 0.0 { (x - mean) / std } else { x - mean };
    for g in &mut out {
        let t = &mut g.record.target;
        t.pitch
            .iter_mut()
            .for_each(|x| *x = scale(*x, stats.pitch_mean, stats.pitch_std));
        t.energy
            .iter_mut()
            .for_each(|x| *x = scale(*x, stats.energy_mean, stats.energy_std));
        g.latent_pitch = scale(g.latent_pitch, stats.pitch_mean, stats.pitch_std);
        g.latent_energy = scale(g.latent_energy, stats.energy_mean, stats.energy_std);
    }
    Ok((out, stats))
}

pub fn generate_corpus(cfg: &GeneratorConfig) -> Result<Vec<DialogueRecord>> {
    generate_corpus_with(cfg, Execution::default())
}

pub fn generate_corpus_with(cfg: &GeneratorConfig, exec: Execution) -> Result<Vec<DialogueRecord>> {
    Ok(generate_detailed(cfg, exec)?.0.into_iter().map(|g| g.record).collect())
}

/// Held-out R^2 of an ordinary-least-squares probe from the mean history
/// prosodic features to the latent pitch component. Fits on the first 80% of
/// dialogues and scores on the rest.
pub fn learnability_probe(dialogues: &[GeneratedDialogue]) -> Result<f64> {
    let n = dialogues.len();
    if n < 10 {
        return Err(Error::contract("learnability probe needs at least 10 dialogues"));
    }
    let d = dialogues[0].record.utterances[0].prosodic.len();
    let design = |g: &GeneratedDialogue| -> Vec<f64> {
        let hist = g.record.history();
        let mut row = vec![0.0; d + 1];
        row[d] = 1.0;
        for u in hist {
            for (r, x) in row.iter_mut().zip(&u.prosodic) {
                *r += x / hist.len() as f64;
            }
        }
        row
    };
    let split = n * 4 / 5;
    let (train, test) = dialogues.split_at(split);
    let x = DMatrix::from_row_iterator(train.len(), d + 1, train.iter().flat_map(design));
    let y = DVector::from_iterator(train.len(), train.iter().map(|g| g.latent_pitch));
    let beta = x
        .svd(true, true)
        .solve(&y, 1e-10)
        .map_err(|e| Error::Numeric(format!("probe least squares: {e}")))?;
    let preds: Vec<f64> = test
        .iter()
        .map(|g| design(g).iter().zip(beta.iter()).map(|(a, b)| a * b).sum())
        .collect();
    let truth: Vec<f64> = test.iter().map(|g| g.latent_pitch).collect();
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_res: f64 = preds.iter().zip(&truth).map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = truth.iter().map(|t| (t - mean).powi(2)).sum();
    Ok(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 0.0 })
}

/// Writes floats with 17 significant digits in scientific notation.
struct ExactFloats;

impl serde_json::ser::Formatter for ExactFloats {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write_corpus(records: &[DialogueRecord], path: &Path) -> Result<()> {
    for (i, r) in records.iter().enumerate() {
        r.validate()
            .map_err(|e| Error::Validation(format!("record {i}: {e}")))?;
    }
    let file = BufWriter::new(File::create(path)?);
    if is_gz(path) {
        let mut gz = GzEncoder::new(file, Compression::default());
        write_lines(records, &mut gz)?;
        gz.finish()?.flush()?;
    } else {
        let mut w = file;
        write_lines(records, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn write_lines<W: Write>(records: &[DialogueRecord], w: &mut W) -> Result<()> {
    for r in records {
        let mut ser = serde_json::Serializer::with_formatter(&mut *w, ExactFloats);
        r.serialize(&mut ser)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

fn open_lines(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path)?;
    Ok(if is_gz(path) {
        Box::new(BufReader::new(MultiGzDecoder::new(file)))
    } else {
        Box::new(BufReader::new(file))
    })
}

/// Reads a corpus file, skipping blank lines.
pub fn read_corpus(path: &Path) -> Result<Vec<DialogueRecord>> {
    Ok(read_numbered(path)?.into_iter().map(|(_, r)| r).collect())
}

fn read_numbered(path: &Path) -> Result<Vec<(usize, DialogueRecord)>> {
    let mut reader = open_lines(path)?;
    let mut out = Vec::new();
    let mut line = String::new();
    let mut number = 0;
    loop {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            break;
        }
        number += 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DialogueRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: number,
            message: e.to_string(),
        })?;
        rec.validate()
            .map_err(|e| Error::Validation(format!("{} line {number}: {}", path.display(), strip(e))))?;
        out.push((number, rec));
    }
    Ok(out)
}

fn strip(e: Error) -> String {
    match e {
        Error::Validation(m) => m,
        other => other.to_string(),
    }
}

/// Dimensions a model needs to consume a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusDims {
    pub d_t: usize,
    pub d_s: usize,
    /// Largest phoneme id plus one.
    pub min_vocab: usize,
    /// Largest speaker id plus one.
    pub min_speakers: usize,
}

impl CorpusDims {
    /// Dimensions of a record list, which must agree across every utterance.
    pub fn of(records: &[DialogueRecord]) -> Result<Option<Self>> {
        dims_checked(records.iter().enumerate().map(|(i, r)| (format!("record {i}"), r)))
    }
}

fn dims_checked<'a>(mut items: impl Iterator<Item = (String, &'a DialogueRecord)>) -> Result<Option<CorpusDims>> {
    let mut dims: Option<(CorpusDims, String)> = None;
    for (loc, r) in &mut items {
        for u in &r.utterances {
            let (d, first) = dims.get_or_insert_with(|| {
                (
                    CorpusDims {
                        d_t: u.semantic.len(),
                        d_s: u.prosodic.len(),
                        min_vocab: 0,
                        min_speakers: 0,
                    },
                    loc.clone(),
                )
            });
            for (name, have, want) in [
                ("semantic", u.semantic.len(), d.d_t),
                ("prosodic", u.prosodic.len(), d.d_s),
            ] {
                if have != want {
                    return Err(Error::Validation(format!(
                        "{loc}: {name} vectors have dimension {have}, but {first} established {want}"
                    )));
                }
            }
            d.min_speakers = d.min_speakers.max(u.speaker_id + 1);
        }
        if let Some((d, _)) = dims.as_mut() {
            d.min_vocab = d.min_vocab.max(r.target.phonemes.iter().max().map_or(0, |m| m + 1));
        }
    }
    Ok(dims.map(|(d, _)| d))
}

/// Reads externally produced features in the corpus schema and checks that
/// every utterance shares one semantic and one prosodic dimension.
pub fn ingest_external(path: &Path) -> Result<(Vec<DialogueRecord>, Option<CorpusDims>)> {
    let numbered = read_numbered(path)?;
    let dims = dims_checked(
        numbered
            .iter()
            .map(|(n, r)| (format!("{} line {n}", path.display()), r)),
    )?;
    Ok((numbered.into_iter().map(|(_, r)| r).collect(), dims))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GeneratorConfig {
        GeneratorConfig {
            num_dialogues: n,
            d_z: 4,
            d_t: 5,
            d_s: 6,
            vocab: 8,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn power_iteration_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for d in [1, 2, 5, 16] {
            let a = normal_vec(&mut rng, d * d, 1.0);
            let svd = DMatrix::from_row_slice(d, d, &a).singular_values();
            let expect = svd.iter().cloned().fold(0.0, f64::max);
            assert!((spectral_norm(&a, d) - expect).abs() < 1e-8 * expect.max(1.0), "d={d}");
        }
        assert_eq!(spectral_norm(&[0.0; 4], 2), 0.0);
    }

    #[test]
    fn transitions_have_requested_norm() {
        let cfg = GeneratorConfig::default();
        let m = LatentModel::draw(&cfg);
        for a in [&m.a_ss, &m.a_sp, &m.a_ps, &m.a_pp] {
            assert!((spectral_norm(a, 16) - 0.9).abs() < 1e-9);
        }
        let m = LatentModel::draw(&GeneratorConfig {
            cross_coupling: 0.0,
            ..cfg
        });
        assert!(m.a_sp.iter().chain(&m.a_ps).all(|&x| x == 0.0));
    }

    #[test]
    fn degenerate_dynamics_give_zero_features() {
        let cfg = GeneratorConfig {
            noise_sigma: 0.0,
            ..small(5)
        };
        let mut m = LatentModel::draw(&cfg);
        for v in [
            &mut m.a_ss,
            &mut m.a_sp,
            &mut m.a_ps,
            &mut m.a_pp,
            &mut m.w_t,
            &mut m.w_s,
        ] {
            v.iter_mut().for_each(|x| *x = 0.0);
        }
        for i in 0..5 {
            let g = generate_dialogue(&cfg, &m, i);
            for u in &g.record.utterances {
                assert!(u.semantic.iter().chain(&u.prosodic).all(|&x| x == 0.0));
            }
            assert_eq!(g.latent_pitch, 0.0);
        }
    }

    #[test]
    fn same_seed_same_corpus_any_execution() {
        let cfg = small(40);
        let a = generate_corpus_with(&cfg, Execution::Sequential).unwrap();
        let b = generate_corpus_with(&cfg, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&GeneratorConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invariants_hold() {
        let recs = generate_corpus(&small(60)).unwrap();
        for r in &recs {
            r.validate().unwrap();
            assert!((2..=6).contains(&r.turns()));
            assert!(r.target.duration.iter().all(|d| (1..=8).contains(d)));
            for (i, u) in r.utterances.iter().enumerate() {
                assert_eq!(u.speaker_id, i % 2);
            }
        }
        let s = NormStats::of(&recs);
        assert!(s.pitch_mean.abs() < 1e-12 && (s.pitch_std - 1.0).abs() < 1e-12);
        assert!(s.energy_mean.abs() < 1e-12 && (s.energy_std - 1.0).abs() < 1e-12);
    }

    #[test]
    fn history_prosody_predicts_latent_pitch() {
        let (g, _) = generate_detailed(&GeneratorConfig::default(), Execution::default()).unwrap();
        let r2 = learnability_probe(&g).unwrap();
        assert!(r2 >= 0.3, "probe R^2 {r2}");
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            GeneratorConfig {
                turns_min: 1,
                ..small(1)
            },
            GeneratorConfig {
                turns_max: 1,
                ..small(1)
            },
            GeneratorConfig { d_t: 0, ..small(1) },
            GeneratorConfig {
                noise_sigma: -0.1,
                ..small(1)
            },
            GeneratorConfig {
                phonemes_min: 0,
                ..small(1)
            },
        ] {
            assert!(matches!(generate_corpus(&cfg), Err(Error::Contract(_))));
        }
    }

    #[test]
    fn round_trip_plain_and_gz() {
        let recs = generate_corpus(&small(15)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["c.jsonl", "c.jsonl.gz"] {
            let p = dir.path().join(name);
            write_corpus(&recs, &p).unwrap();
            assert_eq!(read_corpus(&p).unwrap(), recs);
            let (ext, dims) = ingest_external(&p).unwrap();
            assert_eq!(ext, recs);
            let dims = dims.unwrap();
            assert_eq!((dims.d_t, dims.d_s, dims.min_speakers), (5, 6, 2));
            assert!(dims.min_vocab <= 8);
        }
    }

    #[test]
    fn floats_written_with_seventeen_digits() {
        let rec = DialogueRecord {
            utterances: vec![
                UtteranceFeatures {
                    speaker_id: 0,
                    semantic: vec![0.1],
                    prosodic: vec![1.0 / 3.0],
                },
                UtteranceFeatures {
                    speaker_id: 1,
                    semantic: vec![-2.5e-300],
                    prosodic: vec![5e-324],
                },
            ],
            target: TargetProsody {
                phonemes: vec![0],
                pitch: vec![1.0],
                energy: vec![-0.0],
                duration: vec![3],
            },
        };
        let mut buf = Vec::new();
        write_lines(std::slice::from_ref(&rec), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("1.0000000000000001e-1"), "{text}");
        assert!(text.contains("3.3333333333333331e-1"), "{text}");
        let back: DialogueRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.utterances[1].prosodic[0].to_bits(), (5e-324f64).to_bits());
        assert_eq!(back.target.energy[0].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn empty_file_is_empty_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(read_corpus(&p).unwrap().is_empty());
        assert_eq!(ingest_external(&p).unwrap().1, None);
    }

    fn line(n_utts: usize, d_sem: usize) -> String {
        let utts: Vec<String> = (0..n_utts)
            .map(|i| {
                format!(
                    r#"{{"speaker":{},"semantic":{:?},"prosodic":[0.5]}}"#,
                    i % 2,
                    vec![0.1; d_sem]
                )
            })
            .collect();
        format!(
            r#"{{"utterances":[{}],"target":{{"phonemes":[1],"pitch":[0.0],"energy":[0.0],"duration":[2]}}}}"#,
            utts.join(",")
        )
    }

    #[test]
    fn single_utterance_dialogue_is_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.jsonl");
        std::fs::write(&p, format!("{}\n{}\n", line(2, 3), line(1, 3))).unwrap();
        let err = read_corpus(&p).unwrap_err();
        assert!(
            matches!(err, Error::Validation(ref m) if m.contains("line 2") && m.contains("utterances")),
            "{err}"
        );
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, format!("{}\n\n{{\"utterances\": [\n", line(2, 3))).unwrap();
        match read_corpus(&p).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn schema_violation_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        let l = line(2, 3).replace(r#""pitch":[0.0]"#, r#""pitch":[0.0,1.0]"#);
        std::fs::write(&p, l).unwrap();
        let err = read_corpus(&p).unwrap_err();
        assert!(err.to_string().contains("target.pitch"), "{err}");
    }

    #[test]
    fn mixed_dims_name_both() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mixed.jsonl");
        std::fs::write(&p, format!("{}\n{}\n", line(2, 512), line(2, 384))).unwrap();
        let err = ingest_external(&p).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("512") && msg.contains("384"), "{msg}");
    }
}
