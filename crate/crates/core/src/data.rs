//! Corpora: the synthetic decodable generator, its inverse (the oracle
//! transcriber used for intelligibility scoring), and the on-disk corpus
//! format.
//!
//! A synthetic utterance is a concatenation of per-phoneme template frames
//! passed through a per-speaker voice transform `g * template + b`, with
//! each phoneme lasting `round(d * rate)` frames, plus uniform noise of
//! amplitude `noise`. Consecutive phonemes in a generated sequence always
//! differ, so run-length collapsing in the oracle is lossless.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::inventory::{LanguageDef, PhonemeInventory};

pub const MEL_MAGIC: &[u8; 4] = b"MELB";
pub const CORPUS_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_MEL_CHANNELS: usize = 16;
pub const DEFAULT_MIN_RUN: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub phonemes: Vec<usize>,
    pub speaker_id: usize,
    /// `T_out x M` log-mel frames.
    pub mel: Tensor<f32>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.mel.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Voice {
    pub language_id: String,
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
    pub rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub mel_channels: usize,
    /// Frames per phoneme at rate 1.
    pub base_duration: usize,
    pub templates: BTreeMap<usize, Vec<f32>>,
    pub languages: Vec<LanguageDef>,
    pub voices: BTreeMap<usize, Voice>,
    pub noise: f32,
    /// Up to this many silence frames are padded at each end.
    #[serde(default)]
    pub silence_jitter: usize,
    pub silence_level: f32,
    pub min_run: usize,
    pub seed: u64,
}

/// Knobs for drawing a random [`SyntheticSpec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecRecipe {
    pub mel_channels: usize,
    pub base_duration: usize,
    pub noise: f32,
    pub silence_jitter: usize,
    pub silence_level: f32,
    /// Templates are drawn uniformly from `[-template_range, template_range]`.
    pub template_range: f32,
    /// Minimum max-norm distance between any two templates.
    pub min_separation: f32,
    /// Per-channel gains are drawn from `1 ± gain_spread`.
    pub gain_spread: f32,
    pub bias_spread: f32,
    pub min_run: usize,
    pub template_seed: u64,
}

impl Default for SpecRecipe {
    fn default() -> Self {
        SpecRecipe {
            mel_channels: DEFAULT_MEL_CHANNELS,
            base_duration: 4,
            noise: 0.02,
            silence_jitter: 0,
            silence_level: -3.0,
            template_range: 1.0,
            min_separation: 0.5,
            gain_spread: 0.15,
            bias_spread: 0.15,
            min_run: DEFAULT_MIN_RUN,
            template_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceRecipe {
    pub speaker_id: usize,
    pub language_id: String,
    #[serde(default = "unit_rate")]
    pub rate: f64,
}

fn unit_rate() -> f64 {
    1.0
}

impl SyntheticSpec {
    /// Draws templates for every phoneme any language uses and a voice for
    /// every listed speaker, deterministically from `recipe.template_seed`.
    pub fn random(
        languages: Vec<LanguageDef>,
        voices: &[VoiceRecipe],
        recipe: &SpecRecipe,
        seed: u64,
    ) -> Result<Self> {
        let m = recipe.mel_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(recipe.template_seed);
        let needed: BTreeSet<usize> = languages
            .iter()
            .flat_map(|l| l.phonemes.iter().copied())
            .collect();
        let silence = vec![recipe.silence_level; m];
        let min_sep = recipe.min_separation.max(4.0 * recipe.noise);
        let mut templates: BTreeMap<usize, Vec<f32>> = BTreeMap::new();
        for &p in &needed {
            let mut attempts = 0;
            loop {
                attempts += 1;
                if attempts > 10_000 {
                    return Err(Error::Config(format!(
                        "cannot place template {p} at separation {min_sep} in {m} channels"
                    )));
                }
                let cand: Vec<f32> = (0..m)
                    .map(|_| rng.random_range(-recipe.template_range..=recipe.template_range))
                    .collect();
                let clear = templates
                    .values()
                    .chain(std::iter::once(&silence))
                    .all(|t| max_norm_dist(t, &cand) >= min_sep);
                if clear {
                    templates.insert(p, cand);
                    break;
                }
            }
        }
        let mut voice_map = BTreeMap::new();
        for v in voices {
            let mut vrng = ChaCha8Rng::seed_from_u64(recipe.template_seed);
            vrng.set_stream(1 + v.speaker_id as u64);
            let gain = (0..m)
                .map(|_| 1.0 + vrng.random_range(-recipe.gain_spread..=recipe.gain_spread))
                .collect();
            let bias = (0..m)
                .map(|_| vrng.random_range(-recipe.bias_spread..=recipe.bias_spread))
                .collect();
            voice_map.insert(
                v.speaker_id,
                Voice {
                    language_id: v.language_id.clone(),
                    gain,
                    bias,
                    rate: v.rate,
                },
            );
        }
        let spec = SyntheticSpec {
            mel_channels: m,
            base_duration: recipe.base_duration,
            templates,
            languages,
            voices: voice_map,
            noise: recipe.noise,
            silence_jitter: recipe.silence_jitter,
            silence_level: recipe.silence_level,
            min_run: recipe.min_run,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.mel_channels;
        if m == 0 {
            return Err(Error::Config("mel_channels must be positive".into()));
        }
        if self.base_duration < 2 {
            return Err(Error::Config("base_duration must be at least 2".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        if self.min_run == 0 {
            return Err(Error::Config("min_run must be at least 1".into()));
        }
        for (p, t) in &self.templates {
            if t.len() != m {
                return Err(Error::Config(format!("template {p} has {} channels", t.len())));
            }
        }
        let ts: Vec<_> = self.templates.iter().collect();
        for (i, (pa, a)) in ts.iter().enumerate() {
            for (pb, b) in &ts[i + 1..] {
                if max_norm_dist(a, b) < 4.0 * self.noise {
                    return Err(Error::Config(format!(
                        "templates {pa} and {pb} closer than 4x noise"
                    )));
                }
            }
        }
        for l in &self.languages {
            if let Some(p) = l.phonemes.iter().find(|p| !self.templates.contains_key(p)) {
                return Err(Error::Config(format!(
                    "language {} uses phoneme {p} without a template",
                    l.language_id
                )));
            }
        }
        for (s, v) in &self.voices {
            if v.gain.len() != m || v.bias.len() != m {
                return Err(Error::Config(format!("voice {s} has wrong channel count")));
            }
            if !(v.rate > 0.0) {
                return Err(Error::Config(format!("voice {s} has non-positive rate")));
            }
            self.language(&v.language_id)?;
        }
        Ok(())
    }

    pub fn language(&self, language_id: &str) -> Result<&LanguageDef> {
        self.languages
            .iter()
            .find(|l| l.language_id == language_id)
            .ok_or_else(|| Error::UnknownLanguage(language_id.to_string()))
    }

    pub fn voice(&self, speaker_id: usize) -> Result<&Voice> {
        self.voices
            .get(&speaker_id)
            .ok_or(Error::UnknownSpeaker(speaker_id))
    }

    /// Frames one phoneme spans for `speaker_id`.
    pub fn phoneme_frames(&self, speaker_id: usize) -> Result<usize> {
        let v = self.voice(speaker_id)?;
        Ok(((self.base_duration as f64 * v.rate).round() as usize).max(1))
    }

    /// Clean (noise-free, unpadded) mel for a phoneme sequence.
    pub fn render(&self, phonemes: &[usize], speaker_id: usize) -> Result<Tensor<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        self.render_with(phonemes, speaker_id, 0.0, 0, &mut rng)
    }

    fn render_with(
        &self,
        phonemes: &[usize],
        speaker_id: usize,
        noise: f32,
        jitter: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor<f32>> {
        let v = self.voice(speaker_id)?;
        let m = self.mel_channels;
        let dur = self.phoneme_frames(speaker_id)?;
        let silence = vec![self.silence_level; m];
        let (lead, trail) = if jitter > 0 {
            (rng.random_range(0..=jitter), rng.random_range(0..=jitter))
        } else {
            (0, 0)
        };
        let total = lead + trail + dur * phonemes.len();
        let mut data = Vec::with_capacity(total * m);
        let emit = |src: &[f32], data: &mut Vec<f32>, rng: &mut ChaCha8Rng| {
            for c in 0..m {
                let n = if noise > 0.0 {
                    rng.random_range(-noise..=noise)
                } else {
                    0.0
                };
                data.push(v.gain[c] * src[c] + v.bias[c] + n);
            }
        };
        for _ in 0..lead {
            emit(&silence, &mut data, rng);
        }
        for &p in phonemes {
            let t = self.templates.get(&p).ok_or(Error::InvalidPhoneme {
                index: p,
                capacity: self.templates.len(),
            })?;
            for _ in 0..dur {
                emit(t, &mut data, rng);
            }
        }
        for _ in 0..trail {
            emit(&silence, &mut data, rng);
        }
        Tensor::new(vec![total, m], data)
    }
}

fn max_norm_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}

/// Generates `n_utts` utterances for each speaker, in speaker order.
/// Utterance `k` of the output draws from its own random stream, so the
/// result is independent of scheduling.
pub fn generate_corpus(
    spec: &SyntheticSpec,
    speaker_ids: &[usize],
    n_utts: usize,
    len_range: (usize, usize),
) -> Result<Vec<Utterance>> {
    let (lo, hi) = len_range;
    if lo == 0 || lo > hi {
        return Err(Error::Validation(format!("bad length range {lo}..={hi}")));
    }
    let mut jobs = Vec::with_capacity(speaker_ids.len() * n_utts);
    for &s in speaker_ids {
        let voice = spec.voice(s)?;
        let lang: Vec<usize> = spec
            .language(&voice.language_id)?
            .phonemes
            .iter()
            .copied()
            .collect();
        if lang.is_empty() {
            return Err(Error::Validation(format!(
                "language {} has no phonemes",
                voice.language_id
            )));
        }
        for _ in 0..n_utts {
            jobs.push((s, lang.clone()));
        }
    }
    jobs.into_par_iter()
        .enumerate()
        .map(|(k, (speaker, lang))| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let len = rng.random_range(lo..=hi);
            let mut phonemes = Vec::with_capacity(len);
            while phonemes.len() < len {
                let p = lang[rng.random_range(0..lang.len())];
                if lang.len() > 1 && phonemes.last() == Some(&p) {
                    continue;
                }
                phonemes.push(p);
            }
            let mel = spec.render_with(&phonemes, speaker, spec.noise, spec.silence_jitter, &mut rng)?;
            Ok(Utterance {
                phonemes,
                speaker_id: speaker,
                mel,
            })
        })
        .collect()
}

/// Recovers the phoneme sequence from a mel by inverting the speaker's
/// voice transform, labelling each frame with its nearest template
/// (Euclidean), and collapsing runs. Runs shorter than `spec.min_run` and
/// silence runs are dropped; neighbours left equal afterwards merge.
pub fn oracle_transcribe(
    mel: &Tensor<f32>,
    spec: &SyntheticSpec,
    speaker_id: usize,
) -> Result<Vec<usize>> {
    let v = spec.voice(speaker_id)?;
    if let Some(channel) = v.gain.iter().position(|&g| g == 0.0) {
        return Err(Error::NonInvertibleTransform {
            speaker: speaker_id,
            channel,
        });
    }
    let m = spec.mel_channels;
    if mel.cols() != m {
        return Err(Error::ShapeMismatch {
            op: "oracle_transcribe",
            lhs: mel.shape().to_vec(),
            rhs: vec![mel.rows(), m],
        });
    }
    let silence = vec![spec.silence_level; m];
    let mut runs: Vec<(Option<usize>, usize)> = Vec::new();
    let mut frame = vec![0.0f32; m];
    for r in 0..mel.rows() {
        for (c, (f, &y)) in frame.iter_mut().zip(mel.row_slice(r)).enumerate() {
            *f = (y - v.bias[c]) / v.gain[c];
        }
        let mut best = (None, sq_dist(&frame, &silence));
        for (&p, t) in &spec.templates {
            let d = sq_dist(&frame, t);
            if d < best.1 {
                best = (Some(p), d);
            }
        }
        match runs.last_mut() {
            Some((label, n)) if *label == best.0 => *n += 1,
            _ => runs.push((best.0, 1)),
        }
    }
    let mut out: Vec<usize> = Vec::new();
    for (label, n) in runs {
        let Some(p) = label else { continue };
        if n < spec.min_run {
            continue;
        }
        if out.last() != Some(&p) {
            out.push(p);
        }
    }
    Ok(out)
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// On-disk formats

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Encodes a mel as `MELB | u32 T | u32 M | T*M f32`, all little-endian.
pub fn encode_mel(mel: &Tensor<f32>) -> Result<Vec<u8>> {
    let (t, m) = mel.dims2()?;
    let mut out = Vec::with_capacity(12 + 4 * t * m);
    out.extend_from_slice(MEL_MAGIC);
    out.extend_from_slice(&(t as u32).to_le_bytes());
    out.extend_from_slice(&(m as u32).to_le_bytes());
    for &x in mel.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_mel(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    if bytes.len() < 12 {
        if bytes.len() >= 4 && &bytes[..4] != MEL_MAGIC {
            return Err(malformed(path, "bad magic"));
        }
        return Err(Error::TruncatedTensor {
            path: path.to_path_buf(),
            expected: 12,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != MEL_MAGIC {
        return Err(malformed(path, "bad magic"));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let m = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let expected = 12 + 4 * t * m;
    if bytes.len() < expected {
        return Err(Error::TruncatedTensor {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(malformed(path, "trailing bytes after tensor"));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![t, m], data)
}

fn malformed(path: &Path, reason: &str) -> Error {
    Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

pub fn write_mel(mel: &Tensor<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode_mel(mel)?).map_err(|e| Error::io(path, e))
}

pub fn read_mel(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mel(&bytes, path)
}

/// A corpus together with the symbol table and languages its phoneme
/// indices refer to.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub inventory: PhonemeInventory,
    pub languages: Vec<LanguageDef>,
    /// `(speaker_id, language_id)` for every speaker in the corpus.
    pub speakers: Vec<(usize, String)>,
    pub mel_channels: usize,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    /// Wraps utterances drawn from `spec`.
    pub fn from_synthetic(
        inventory: &PhonemeInventory,
        spec: &SyntheticSpec,
        utterances: Vec<Utterance>,
    ) -> Result<Self> {
        let ids: BTreeSet<usize> = utterances.iter().map(|u| u.speaker_id).collect();
        let speakers = ids
            .into_iter()
            .map(|s| Ok((s, spec.voice(s)?.language_id.clone())))
            .collect::<Result<_>>()?;
        let corpus = Corpus {
            inventory: inventory.clone(),
            languages: spec.languages.clone(),
            speakers,
            mel_channels: spec.mel_channels,
            utterances,
        };
        corpus.validate()?;
        Ok(corpus)
    }

    pub fn speaker_ids(&self) -> BTreeSet<usize> {
        self.speakers.iter().map(|(s, _)| *s).collect()
    }

    pub fn phonemes_used(&self) -> BTreeSet<usize> {
        self.utterances
            .iter()
            .flat_map(|u| u.phonemes.iter().copied())
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let known = self.speaker_ids();
        for l in &self.languages {
            l.validate(&self.inventory)?;
        }
        for (s, lang) in &self.speakers {
            if !self.languages.iter().any(|l| &l.language_id == lang) {
                return Err(Error::UnknownLanguage(format!("{lang} (speaker {s})")));
            }
        }
        for (i, u) in self.utterances.iter().enumerate() {
            if !known.contains(&u.speaker_id) {
                return Err(Error::UnknownSpeaker(u.speaker_id));
            }
            if u.mel.rows() == 0 || u.mel.cols() != self.mel_channels {
                return Err(Error::Validation(format!(
                    "utterance {i}: mel shape {:?}, corpus has {} channels",
                    u.mel.shape(),
                    self.mel_channels
                )));
            }
            if u.phonemes.is_empty() {
                return Err(Error::Validation(format!("utterance {i} has no phonemes")));
            }
            for &p in &u.phonemes {
                self.inventory.check_index(p)?;
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusManifest {
    format_version: u32,
    mel_channels: usize,
    inventory: PhonemeInventory,
    languages: Vec<LanguageDef>,
    speakers: Vec<SpeakerRecord>,
    utterances: Vec<UtteranceRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpeakerRecord {
    speaker_id: usize,
    language_id: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct UtteranceRecord {
    id: String,
    speaker_id: usize,
    phonemes: Vec<usize>,
    mel_file: String,
    frames: usize,
    sha256: String,
}

pub const CORPUS_MANIFEST: &str = "manifest.json";

pub fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    corpus.validate()?;
    let mel_dir = dir.join("mels");
    fs::create_dir_all(&mel_dir).map_err(|e| Error::io(&mel_dir, e))?;
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for (k, u) in corpus.utterances.iter().enumerate() {
        let id = format!("utt_{k:05}");
        let rel = format!("mels/{id}.melb");
        let bytes = encode_mel(&u.mel)?;
        let path = dir.join(&rel);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        records.push(UtteranceRecord {
            id,
            speaker_id: u.speaker_id,
            phonemes: u.phonemes.clone(),
            mel_file: rel,
            frames: u.mel.rows(),
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = CorpusManifest {
        format_version: CORPUS_FORMAT_VERSION,
        mel_channels: corpus.mel_channels,
        inventory: corpus.inventory.clone(),
        languages: corpus.languages.clone(),
        speakers: corpus
            .speakers
            .iter()
            .map(|(s, l)| SpeakerRecord {
                speaker_id: *s,
                language_id: l.clone(),
            })
            .collect(),
        utterances: records,
    };
    let path = dir.join(CORPUS_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let path = dir.join(CORPUS_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| malformed(&path, &e.to_string()))?;
    if manifest.format_version != CORPUS_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CORPUS_FORMAT_VERSION,
            found: manifest.format_version,
        });
    }
    let mut utterances = Vec::with_capacity(manifest.utterances.len());
    for rec in &manifest.utterances {
        let mel_path: PathBuf = dir.join(&rec.mel_file);
        let bytes = fs::read(&mel_path).map_err(|e| Error::io(&mel_path, e))?;
        let mel = decode_mel(&bytes, &mel_path)?;
        if sha256_hex(&bytes) != rec.sha256 {
            return Err(Error::ChecksumMismatch(rec.mel_file.clone()));
        }
        if mel.rows() != rec.frames || mel.cols() != manifest.mel_channels {
            return Err(malformed(&mel_path, "mel shape disagrees with manifest"));
        }
        utterances.push(Utterance {
            phonemes: rec.phonemes.clone(),
            speaker_id: rec.speaker_id,
            mel,
        });
    }
    let corpus = Corpus {
        inventory: manifest.inventory,
        languages: manifest.languages,
        speakers: manifest
            .speakers
            .into_iter()
            .map(|s| (s.speaker_id, s.language_id))
            .collect(),
        mel_channels: manifest.mel_channels,
        utterances,
    };
    corpus.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_phoneme_spec() -> SyntheticSpec {
        let mut templates = BTreeMap::new();
        templates.insert(0, vec![1.0, 0.0, -1.0]);
        templates.insert(1, vec![-1.0, 0.5, 1.0]);
        let mut voices = BTreeMap::new();
        voices.insert(
            0,
            Voice {
                language_id: "L1".into(),
                gain: vec![1.0; 3],
                bias: vec![0.0; 3],
                rate: 1.0,
            },
        );
        SyntheticSpec {
            mel_channels: 3,
            base_duration: 3,
            templates,
            languages: vec![LanguageDef::new("L1", [0, 1])],
            voices,
            noise: 0.0,
            silence_jitter: 0,
            silence_level: -3.0,
            min_run: 2,
            seed: 5,
        }
    }

    #[test]
    fn identity_voice_repeats_templates() {
        let spec = two_phoneme_spec();
        let mel = spec.render(&[0, 1], 0).unwrap();
        assert_eq!(mel.shape(), &[6, 3]);
        for r in 0..3 {
            assert_eq!(mel.row_slice(r), &[1.0, 0.0, -1.0]);
            assert_eq!(mel.row_slice(r + 3), &[-1.0, 0.5, 1.0]);
        }
    }

    #[test]
    fn rate_two_doubles_duration() {
        let mut spec = two_phoneme_spec();
        spec.voices.get_mut(&0).unwrap().rate = 2.0;
        let mel = spec.render(&[0, 1, 0], 0).unwrap();
        assert_eq!(mel.rows(), 18);
    }

    #[test]
    fn same_seed_same_corpus() {
        let mut spec = two_phoneme_spec();
        spec.noise = 0.05;
        let a = generate_corpus(&spec, &[0], 5, (3, 6)).unwrap();
        let b = generate_corpus(&spec, &[0], 5, (3, 6)).unwrap();
        assert_eq!(a.len(), 5);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.phonemes, y.phonemes);
            assert!(x.mel.bit_eq(&y.mel));
        }
        spec.seed += 1;
        let c = generate_corpus(&spec, &[0], 5, (3, 6)).unwrap();
        assert_ne!(a[0].mel, c[0].mel);
    }

    #[test]
    fn mel_length_is_sum_of_durations() {
        let mut spec = two_phoneme_spec();
        spec.voices.get_mut(&0).unwrap().rate = 1.5;
        for u in generate_corpus(&spec, &[0], 10, (1, 9)).unwrap() {
            assert_eq!(u.frames(), u.phonemes.len() * 5); // round(3 * 1.5) = 5
        }
    }

    #[test]
    fn zeros_mel_decodes_to_nearest_template() {
        let spec = two_phoneme_spec();
        let zeros = Tensor::zeros(&[4, 3]);
        // template 0 is at squared distance 2, template 1 at 2.25
        assert_eq!(oracle_transcribe(&zeros, &spec, 0).unwrap(), vec![0]);
        let one = Tensor::zeros(&[1, 3]);
        assert!(oracle_transcribe(&one, &spec, 0).unwrap().is_empty());
    }

    #[test]
    fn zero_gain_is_rejected() {
        let mut spec = two_phoneme_spec();
        spec.voices.get_mut(&0).unwrap().gain[1] = 0.0;
        assert!(matches!(
            oracle_transcribe(&Tensor::zeros(&[2, 3]), &spec, 0),
            Err(Error::NonInvertibleTransform { channel: 1, .. })
        ));
    }

    #[test]
    fn undefined_speaker_language_is_rejected() {
        let spec = two_phoneme_spec();
        assert!(generate_corpus(&spec, &[3], 1, (1, 2)).is_err());
    }

    #[test]
    fn silence_padding_is_ignored_by_oracle() {
        let mut spec = two_phoneme_spec();
        spec.silence_jitter = 4;
        spec.noise = 0.05;
        for u in generate_corpus(&spec, &[0], 20, (2, 6)).unwrap() {
            assert_eq!(oracle_transcribe(&u.mel, &spec, 0).unwrap(), u.phonemes);
        }
    }

    #[test]
    fn mel_blob_rejects_bad_magic_and_truncation() {
        let mel = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let bytes = encode_mel(&mel).unwrap();
        let p = Path::new("x.melb");
        assert_eq!(decode_mel(&bytes, p).unwrap(), mel);
        assert!(matches!(
            decode_mel(&bytes[..bytes.len() - 3], p),
            Err(Error::TruncatedTensor { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_mel(&bad, p), Err(Error::MalformedHeader { .. })));
    }
}
