//! Pretraining, the freeze plans for mono- and cross-lingual speaker
//! adaptation, accumulative adaptation, and checkpoints.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sha256_hex, Corpus, Utterance};
use crate::error::{Error, Result};
use crate::gradcore::{adam_step, clip_grad_norm, AdamHyper, AdamState, FreezePlan, ParamGroup, ParamStore, Tape, Tensor};
use crate::inventory::{LanguageDef, PhonemeInventory, SpeakerRegistry};
use crate::metrics::{mcd, DEFAULT_CEPSTRAL_ORDER};
use crate::model::{init_params, teacher_forced, ModelConfig, TacoModel, PHONEME_TABLE, SPEAKER_TABLE};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_TENSORS: &str = "tensors.bin";

/// Standard deviation of the noise added to freshly initialized speaker rows.
pub const NEW_SPEAKER_NOISE: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainHyper {
    pub adam: AdamHyper,
    pub batch_size: usize,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    /// Cosine decay from `adam.lr` down to `adam.lr * lr_final_fraction`.
    pub lr_final_fraction: f64,
    pub log_interval: u64,
    pub mcd_interval: u64,
    /// Number of training utterances in the fixed MCD probe subset.
    pub mcd_probe: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            adam: AdamHyper::default(),
            batch_size: 8,
            clip_norm: 1.0,
            lr_final_fraction: 0.1,
            log_interval: 50,
            mcd_interval: 250,
            mcd_probe: 4,
        }
    }
}

impl TrainHyper {
    /// Pretraining defaults with the learning rate divided by ten.
    pub fn adaptation_default() -> Self {
        let mut h = TrainHyper::default();
        h.adam.lr /= 10.0;
        h
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) || !self.adam.lr.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(Error::Config("lr_final_fraction must lie in [0, 1]".into()));
        }
        if self.log_interval == 0 || self.mcd_interval == 0 {
            return Err(Error::Config("log intervals must be at least 1".into()));
        }
        Ok(())
    }

    fn lr_at(&self, step: u64, total: u64) -> f64 {
        let frac = if total <= 1 { 0.0 } else { step as f64 / (total - 1) as f64 };
        let floor = self.lr_final_fraction;
        self.adam.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogEntry {
    pub stage: usize,
    pub step: u64,
    /// Mean spectrogram loss of the batch, before the update.
    pub loss: f64,
    /// Teacher-forced MCD on the probe subset, at snapshot steps.
    pub mcd_db: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Pretrain,
    Mono,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub kind: StageKind,
    pub label: String,
    pub steps: u64,
    pub seed: u64,
    pub new_speakers: Vec<usize>,
    pub hyper: TrainHyper,
    /// Where the stage's corpus came from, when known.
    pub corpus: Option<String>,
    pub plan: FreezePlan,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub inventory: PhonemeInventory,
    pub registry: SpeakerRegistry,
    pub languages: Vec<LanguageDef>,
    /// Phonemes that appeared in any training data so far.
    pub seen_phonemes: BTreeSet<usize>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
    /// Set on load when the file carried no optimizer state.
    pub optimizer_reinitialized: bool,
    pub log: Vec<LogEntry>,
    /// One entry per training stage, in order; only ever appended to.
    pub stages: Vec<StageRecord>,
    /// Free-form resolved run configuration embedded by callers.
    pub run_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn model(&self) -> Result<TacoModel> {
        TacoModel::new(self.config.clone())
    }

    pub fn freeze_history(&self) -> Vec<&FreezePlan> {
        self.stages.iter().map(|s| &s.plan).collect()
    }

    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.steps).sum()
    }

    /// Concatenated stage labels, e.g. `ENES2DE2KO`.
    pub fn scenario_label(&self) -> String {
        self.stages
            .iter()
            .map(|s| s.label.as_str())
            .collect::<Vec<_>>()
            .join("2")
    }

    pub fn language(&self, language_id: &str) -> Result<&LanguageDef> {
        self.languages
            .iter()
            .find(|l| l.language_id == language_id)
            .ok_or_else(|| Error::UnknownLanguage(language_id.to_string()))
    }

    pub fn check_speaker(&self, speaker_id: usize) -> Result<()> {
        self.registry.get(speaker_id).map(|_| ())
    }

    /// Validates a phoneme sequence against the inventory.
    pub fn check_phonemes(&self, phonemes: &[usize]) -> Result<()> {
        for &p in phonemes {
            self.inventory.check_index(p)?;
        }
        Ok(())
    }
}

/// Teacher-forced spectrogram loss averaged over utterances.
pub fn corpus_loss(ckpt: &Checkpoint, utterances: &[Utterance]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::Validation("no utterances to score".into()));
    }
    let model = ckpt.model()?;
    let losses: Vec<f64> = utterances
        .par_iter()
        .map(|u| Ok(teacher_forced(&model, &ckpt.params, &u.phonemes, u.speaker_id, &u.mel)?.1))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Teacher-forced MCD (post-net output vs reference) averaged over utterances.
pub fn corpus_mcd(ckpt: &Checkpoint, utterances: &[Utterance]) -> Result<f64> {
    Ok(utterance_mcds(ckpt, utterances)?.iter().sum::<f64>() / utterances.len().max(1) as f64)
}

pub fn utterance_mcds(ckpt: &Checkpoint, utterances: &[Utterance]) -> Result<Vec<f64>> {
    let model = ckpt.model()?;
    utterances
        .par_iter()
        .map(|u| {
            let (out, _) = teacher_forced(&model, &ckpt.params, &u.phonemes, u.speaker_id, &u.mel)?;
            mcd(&u.mel.cast(), &out.y_post.cast(), DEFAULT_CEPSTRAL_ORDER.min(ckpt.config.mel_channels - 1))
        })
        .collect()
}

fn batch_gradients(
    model: &TacoModel,
    params: &ParamStore<f32>,
    batch: &[&Utterance],
    dropout_seed: u64,
) -> Result<(ParamStore<f32>, f64)> {
    let per: Vec<(ParamStore<f32>, f64)> = batch
        .par_iter()
        .enumerate()
        .map(|(k, u)| {
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
            rng.set_stream(k as u64);
            let dropout = (model.config.prenet_dropout > 0.0).then_some(&mut rng);
            let (terms, _) = model.utterance_loss(&bound, &u.phonemes, u.speaker_id, &u.mel, dropout)?;
            let loss = terms.spectrogram.item() as f64;
            let grads = tape.backward(terms.total)?;
            Ok((bound.gradients(params, &grads), loss))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f32;
    let mut iter = per.into_iter();
    let (mut acc, mut loss) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        for (a, b) in acc.iter_mut().zip(g.iter()) {
            a.value.add_assign(&b.value);
        }
        loss += l;
    }
    for a in acc.iter_mut() {
        a.value.scale_assign(1.0 / n);
    }
    Ok((acc, loss / n as f64))
}

/// Runs `steps` optimizer steps over `data`, appending to the log.
fn train_stage(
    ckpt: &mut Checkpoint,
    data: &[Utterance],
    plan: &FreezePlan,
    hyper: &TrainHyper,
    steps: u64,
    seed: u64,
    stage: usize,
) -> Result<()> {
    hyper.validate()?;
    plan.validate(&ckpt.params)?;
    if data.is_empty() {
        return Err(Error::Validation("training corpus is empty".into()));
    }
    if steps == 0 {
        return Err(Error::Validation("steps must be at least 1".into()));
    }
    let model = ckpt.model()?;
    let probe: Vec<Utterance> = data.iter().take(hyper.mcd_probe).cloned().collect();
    let mut state = AdamState::new(&ckpt.params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();

    for step in 0..steps {
        let mut batch = Vec::with_capacity(hyper.batch_size);
        while batch.len() < hyper.batch_size.min(data.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(&data[order[cursor]]);
            cursor += 1;
        }
        let dropout_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step);
        let (mut grads, loss) = batch_gradients(&model, &ckpt.params, &batch, dropout_seed)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        plan.mask(&mut grads);
        if hyper.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, hyper.clip_norm);
        }
        let adam = AdamHyper {
            lr: hyper.lr_at(step, steps),
            ..hyper.adam
        };
        adam_step(&mut ckpt.params, &grads, plan, &mut state, &adam)?;

        let last = step + 1 == steps;
        let snapshot = !probe.is_empty() && (step % hyper.mcd_interval == 0 || last);
        if step % hyper.log_interval == 0 || last || snapshot {
            let mcd_db = if snapshot { Some(corpus_mcd(ckpt, &probe)?) } else { None };
            log::info!("stage {stage} step {step} loss {loss:.5}");
            ckpt.log.push(LogEntry {
                stage,
                step,
                loss,
                mcd_db,
            });
        }
    }
    ckpt.optimizer = Some(state);
    ckpt.optimizer_reinitialized = false;
    Ok(())
}

/// Trains a fresh model on `corpus`. Corpus speakers must have ids
/// `0..n` and are registered in that order.
pub fn pretrain(
    corpus: &Corpus,
    config: &ModelConfig,
    hyper: &TrainHyper,
    seed: u64,
    steps: u64,
    label: &str,
) -> Result<Checkpoint> {
    corpus.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Validation("cannot pretrain on an empty corpus".into()));
    }
    if steps == 0 {
        return Err(Error::Validation("steps must be at least 1".into()));
    }
    config.validate()?;
    check_dims(config, &corpus.inventory, corpus.mel_channels)?;

    let mut registry = SpeakerRegistry::new(config.speaker_capacity);
    let mut speakers = corpus.speakers.clone();
    speakers.sort();
    for (i, (s, lang)) in speakers.iter().enumerate() {
        if *s != i {
            return Err(Error::Validation(format!(
                "pretraining speakers must have ids 0..n; found {s} at position {i}"
            )));
        }
        registry = registry.add_speakers(1, lang)?.0;
    }

    let mut ckpt = Checkpoint {
        config: config.clone(),
        inventory: corpus.inventory.clone(),
        registry,
        languages: corpus.languages.clone(),
        seen_phonemes: corpus.phonemes_used(),
        params: init_params(config, seed)?,
        optimizer: None,
        optimizer_reinitialized: false,
        log: Vec::new(),
        stages: Vec::new(),
        run_config: None,
    };
    let plan = FreezePlan::default();
    train_stage(&mut ckpt, &corpus.utterances, &plan, hyper, steps, seed, 0)?;
    ckpt.stages.push(StageRecord {
        kind: StageKind::Pretrain,
        label: label.to_string(),
        steps,
        seed,
        new_speakers: speakers.iter().map(|(s, _)| *s).collect(),
        hyper: hyper.clone(),
        corpus: None,
        plan,
    });
    Ok(ckpt)
}

fn check_dims(config: &ModelConfig, inventory: &PhonemeInventory, mel_channels: usize) -> Result<()> {
    if config.phoneme_capacity != inventory.capacity() {
        return Err(Error::Config(format!(
            "model phoneme_capacity {} differs from inventory capacity {}",
            config.phoneme_capacity,
            inventory.capacity()
        )));
    }
    if config.mel_channels != mel_channels {
        return Err(Error::Config(format!(
            "model mel_channels {} differs from corpus mel channels {mel_channels}",
            config.mel_channels
        )));
    }
    Ok(())
}

fn old_speakers(ckpt: &Checkpoint, new_speakers: &[usize]) -> Result<BTreeSet<usize>> {
    for &s in new_speakers {
        ckpt.check_speaker(s)?;
    }
    let new: BTreeSet<usize> = new_speakers.iter().copied().collect();
    Ok((0..ckpt.registry.len()).filter(|s| !new.contains(s)).collect())
}

fn with_speaker_rows(mut plan: FreezePlan, old: BTreeSet<usize>) -> FreezePlan {
    if !old.is_empty() {
        plan.frozen_rows.insert(SPEAKER_TABLE.to_string(), old);
    }
    plan
}

/// Encoder and phoneme table frozen whole, old speaker rows frozen;
/// decoder and new speaker rows train.
pub fn plan_monolingual(ckpt: &Checkpoint, new_speakers: &[usize]) -> Result<FreezePlan> {
    let old = old_speakers(ckpt, new_speakers)?;
    let mut plan = FreezePlan::default();
    plan.frozen_tensors.extend(ckpt.params.names_in(ParamGroup::Encoder));
    plan.frozen_tensors.insert(PHONEME_TABLE.to_string());
    Ok(with_speaker_rows(plan, old))
}

/// Only old speaker rows frozen; encoder, decoder and phoneme table train.
pub fn plan_crosslingual(ckpt: &Checkpoint, new_speakers: &[usize]) -> Result<FreezePlan> {
    let old = old_speakers(ckpt, new_speakers)?;
    Ok(with_speaker_rows(FreezePlan::default(), old))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdaptKind {
    Mono,
    Cross,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NewSpeaker {
    pub speaker_id: usize,
    pub language_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptScenario {
    pub kind: AdaptKind,
    pub new_speakers: Vec<NewSpeaker>,
    pub steps: u64,
    pub hyper: TrainHyper,
    /// Stage label used in scenario names, e.g. `DE`.
    pub label: String,
    /// Old-speaker utterances mixed into the adaptation data.
    pub old_data: Option<Corpus>,
    /// Recorded in the stage history.
    pub corpus_source: Option<String>,
}

impl AdaptScenario {
    pub fn new(kind: AdaptKind, new_speakers: Vec<NewSpeaker>, steps: u64, label: &str) -> Self {
        AdaptScenario {
            kind,
            new_speakers,
            steps,
            hyper: TrainHyper::adaptation_default(),
            label: label.to_string(),
            old_data: None,
            corpus_source: None,
        }
    }
}

fn merge_languages(known: &mut Vec<LanguageDef>, incoming: &[LanguageDef]) -> Result<()> {
    for l in incoming {
        match known.iter().find(|k| k.language_id == l.language_id) {
            Some(k) if k != l => {
                return Err(Error::Validation(format!(
                    "language {} is defined differently in the corpus and the checkpoint",
                    l.language_id
                )))
            }
            Some(_) => {}
            None => known.push(l.clone()),
        }
    }
    Ok(())
}

fn merge_inventory(ckpt: &PhonemeInventory, corpus: &PhonemeInventory) -> Result<PhonemeInventory> {
    let (a, b) = (ckpt.symbols(), corpus.symbols());
    let prefix = a.len().min(b.len());
    if ckpt.capacity() != corpus.capacity() || a[..prefix] != b[..prefix] {
        return Err(Error::Validation(
            "corpus inventory is not an extension of the checkpoint inventory".into(),
        ));
    }
    Ok(if b.len() > a.len() { corpus.clone() } else { ckpt.clone() })
}

/// Adds the scenario's speakers and fine-tunes under the scenario's freeze
/// plan. The corpus must hold only new-speaker utterances.
pub fn adapt(ckpt: &Checkpoint, corpus: &Corpus, scenario: &AdaptScenario, seed: u64) -> Result<Checkpoint> {
    corpus.validate()?;
    if corpus.utterances.is_empty() {
        return Err(Error::Validation("adaptation corpus is empty".into()));
    }
    if scenario.steps == 0 {
        return Err(Error::Validation("steps must be at least 1".into()));
    }
    let mut next = ckpt.clone();
    next.inventory = merge_inventory(&ckpt.inventory, &corpus.inventory)?;
    check_dims(&next.config, &next.inventory, corpus.mel_channels)?;
    merge_languages(&mut next.languages, &corpus.languages)?;

    let n_old = ckpt.registry.len();
    for (i, ns) in scenario.new_speakers.iter().enumerate() {
        if ns.speaker_id != n_old + i {
            return Err(Error::Validation(format!(
                "new speaker {} should have id {} (next free registry id)",
                ns.speaker_id,
                n_old + i
            )));
        }
        next.language(&ns.language_id)?;
    }
    let new_ids: BTreeSet<usize> = scenario.new_speakers.iter().map(|s| s.speaker_id).collect();
    for u in &corpus.utterances {
        if u.speaker_id < n_old {
            return Err(Error::Validation(format!(
                "adaptation corpus contains old speaker {}; pass old data separately",
                u.speaker_id
            )));
        }
        if !new_ids.contains(&u.speaker_id) {
            return Err(Error::UnknownSpeaker(u.speaker_id));
        }
    }
    for (s, lang) in &corpus.speakers {
        if let Some(ns) = scenario.new_speakers.iter().find(|n| n.speaker_id == *s) {
            if &ns.language_id != lang {
                return Err(Error::Validation(format!(
                    "speaker {s} is {lang} in the corpus but {} in the scenario",
                    ns.language_id
                )));
            }
        }
    }

    if scenario.kind == AdaptKind::Mono {
        for ns in &scenario.new_speakers {
            let lang = next.language(&ns.language_id)?;
            let unseen: Vec<usize> = lang.phonemes.difference(&ckpt.seen_phonemes).copied().collect();
            if !unseen.is_empty() {
                return Err(Error::Validation(format!(
                    "mono-lingual adaptation needs phonemes already seen in training; {} has unseen {unseen:?}",
                    ns.language_id
                )));
            }
        }
        let unseen: Vec<usize> = corpus.phonemes_used().difference(&ckpt.seen_phonemes).copied().collect();
        if !unseen.is_empty() {
            return Err(Error::Validation(format!(
                "mono-lingual corpus uses unseen phonemes {unseen:?}"
            )));
        }
    }

    for ns in &scenario.new_speakers {
        let (reg, _) = next.registry.add_speakers(1, &ns.language_id)?;
        next.registry = reg;
    }
    for s in 0..n_old {
        next.registry.freeze(s)?;
    }
    init_new_speaker_rows(&mut next.params, n_old, scenario.new_speakers.len(), seed)?;

    let new_list: Vec<usize> = new_ids.iter().copied().collect();
    let plan = match scenario.kind {
        AdaptKind::Mono => plan_monolingual(&next, &new_list)?,
        AdaptKind::Cross => plan_crosslingual(&next, &new_list)?,
    };

    let mut data = corpus.utterances.clone();
    if let Some(old) = &scenario.old_data {
        for u in &old.utterances {
            if u.speaker_id >= n_old {
                return Err(Error::Validation(format!(
                    "old data contains speaker {} that is not an old speaker",
                    u.speaker_id
                )));
            }
        }
        data.extend(old.utterances.iter().cloned());
    }
    let stage = next.stages.len();
    train_stage(&mut next, &data, &plan, &scenario.hyper, scenario.steps, seed, stage)?;
    next.seen_phonemes.extend(corpus.phonemes_used());
    next.stages.push(StageRecord {
        kind: match scenario.kind {
            AdaptKind::Mono => StageKind::Mono,
            AdaptKind::Cross => StageKind::Cross,
        },
        label: scenario.label.clone(),
        steps: scenario.steps,
        seed,
        new_speakers: new_list,
        hyper: scenario.hyper.clone(),
        corpus: scenario.corpus_source.clone(),
        plan,
    });
    Ok(next)
}

/// New rows start at the mean of the existing speaker rows plus small noise.
fn init_new_speaker_rows(params: &mut ParamStore<f32>, n_old: usize, n_new: usize, seed: u64) -> Result<()> {
    let table = params.get_mut(SPEAKER_TABLE)?;
    let (rows, dim) = table.dims2()?;
    if n_old + n_new > rows {
        return Err(Error::CapacityExceeded {
            what: "speaker table",
            capacity: rows,
            requested: n_old + n_new,
        });
    }
    let mut mean = vec![0.0f64; dim];
    for r in 0..n_old {
        for (m, &x) in mean.iter_mut().zip(table.row_slice(r)) {
            *m += x as f64;
        }
    }
    if n_old > 0 {
        mean.iter_mut().for_each(|m| *m /= n_old as f64);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let noise = Normal::new(0.0, NEW_SPEAKER_NOISE).expect("finite std");
    for r in n_old..n_old + n_new {
        for (x, &m) in table.row_slice_mut(r).iter_mut().zip(&mean) {
            *x = (m + noise.sample(&mut rng)) as f32;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Checkpoint files

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorRecord {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerRecord {
    step: u64,
    m: Vec<TensorRecord>,
    v: Vec<TensorRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointManifest {
    format_version: u32,
    crate_version: String,
    config: ModelConfig,
    inventory: PhonemeInventory,
    registry: SpeakerRegistry,
    languages: Vec<LanguageDef>,
    seen_phonemes: BTreeSet<usize>,
    stages: Vec<StageRecord>,
    log: Vec<LogEntry>,
    run_config: Option<serde_json::Value>,
    tensors: Vec<TensorRecord>,
    optimizer: Option<OptimizerRecord>,
}

fn push_store(store: &ParamStore<f32>, blob: &mut Vec<u8>) -> Vec<TensorRecord> {
    store
        .iter()
        .map(|p| {
            let start = blob.len();
            for x in p.value.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            TensorRecord {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                offset: start as u64,
                bytes: (blob.len() - start) as u64,
                sha256: sha256_hex(&blob[start..]),
            }
        })
        .collect()
}

fn read_store(records: &[TensorRecord], blob: &[u8], path: &Path) -> Result<ParamStore<f32>> {
    let mut store = ParamStore::new();
    for rec in records {
        let n: usize = rec.shape.iter().product();
        let (start, len) = (rec.offset as usize, rec.bytes as usize);
        if len != 4 * n {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: format!("{}: {} bytes for shape {:?}", rec.name, len, rec.shape),
            });
        }
        let Some(bytes) = blob.get(start..start + len) else {
            return Err(Error::TruncatedTensor {
                path: path.to_path_buf(),
                expected: start + len,
                found: blob.len(),
            });
        };
        if sha256_hex(bytes) != rec.sha256 {
            return Err(Error::ChecksumMismatch(format!("{} in {}", rec.name, path.display())));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(&rec.name, rec.group, Tensor::new(rec.shape.clone(), data)?);
    }
    Ok(store)
}

/// Writes `manifest.json` and `tensors.bin` into `dir`.
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::with_capacity(4 * ckpt.params.numel());
    let tensors = push_store(&ckpt.params, &mut blob);
    let optimizer = ckpt.optimizer.as_ref().map(|st| OptimizerRecord {
        step: st.step,
        m: push_store(&st.m, &mut blob),
        v: push_store(&st.v, &mut blob),
    });
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        config: ckpt.config.clone(),
        inventory: ckpt.inventory.clone(),
        registry: ckpt.registry.clone(),
        languages: ckpt.languages.clone(),
        seen_phonemes: ckpt.seen_phonemes.clone(),
        stages: ckpt.stages.clone(),
        log: ckpt.log.clone(),
        run_config: ckpt.run_config.clone(),
        tensors,
        optimizer,
    };
    let bin = dir.join(CHECKPOINT_TENSORS);
    fs::write(&bin, &blob).map_err(|e| Error::io(&bin, e))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let probe: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let found = probe.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_FORMAT_VERSION,
            found,
        });
    }
    let m: CheckpointManifest = serde_json::from_value(probe).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let bin = dir.join(CHECKPOINT_TENSORS);
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let params = read_store(&m.tensors, &blob, &bin)?;
    let optimizer = match &m.optimizer {
        Some(o) => Some(AdamState {
            step: o.step,
            m: read_store(&o.m, &blob, &bin)?,
            v: read_store(&o.v, &blob, &bin)?,
        }),
        None => None,
    };
    m.config.validate()?;
    m.registry.validate()?;
    for l in &m.languages {
        l.validate(&m.inventory)?;
    }
    let expected = init_params(&m.config, 0)?;
    for p in expected.iter() {
        let got = params.get(&p.name)?;
        if got.shape() != p.value.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                lhs: got.shape().to_vec(),
                rhs: p.value.shape().to_vec(),
            });
        }
    }
    Ok(Checkpoint {
        config: m.config,
        inventory: m.inventory,
        registry: m.registry,
        languages: m.languages,
        seen_phonemes: m.seen_phonemes,
        params,
        optimizer_reinitialized: optimizer.is_none(),
        optimizer,
        log: m.log,
        stages: m.stages,
        run_config: m.run_config,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::ModelConfig;

    pub(crate) fn tiny_ckpt(n_speakers: usize) -> Checkpoint {
        let config = ModelConfig {
            phoneme_dim: 4,
            encoder_channels: 4,
            encoder_hidden: 3,
            speaker_dim: 2,
            prenet_dims: vec![4],
            decoder_hidden: 4,
            attention_dim: 3,
            mel_channels: 4,
            postnet_channels: 3,
            phoneme_capacity: 8,
            speaker_capacity: 6,
            ..ModelConfig::default()
        };
        let mut registry = SpeakerRegistry::new(6);
        for _ in 0..n_speakers {
            registry = registry.add_speakers(1, "L1").unwrap().0;
        }
        Checkpoint {
            params: init_params(&config, 1).unwrap(),
            config,
            inventory: PhonemeInventory::new(&["a", "b", "c"], 8).unwrap(),
            registry,
            languages: vec![LanguageDef::new("L1", [0, 1, 2])],
            seen_phonemes: [0, 1, 2].into(),
            optimizer: None,
            optimizer_reinitialized: false,
            log: vec![],
            stages: vec![],
            run_config: None,
        }
    }

    #[test]
    fn mono_plan_freezes_encoder_table_and_old_rows() {
        let ck = tiny_ckpt(2);
        let plan = plan_monolingual(&ck, &[1]).unwrap();
        assert!(plan.frozen_tensors.contains(PHONEME_TABLE));
        for n in ck.params.names_in(ParamGroup::Encoder) {
            assert!(plan.frozen_tensors.contains(&n));
        }
        assert!(!plan.frozen_tensors.iter().any(|n| n.starts_with("dec.")));
        assert_eq!(plan.frozen_rows[SPEAKER_TABLE], [0].into());

        let ck = tiny_ckpt(4);
        assert_eq!(plan_monolingual(&ck, &[2, 3]).unwrap().frozen_rows[SPEAKER_TABLE], [0, 1].into());
        assert_eq!(plan_monolingual(&ck, &[]).unwrap().frozen_rows[SPEAKER_TABLE], [0, 1, 2, 3].into());
        assert!(plan_monolingual(&ck, &[4]).is_err());
    }

    #[test]
    fn cross_plan_only_freezes_old_rows() {
        let ck = tiny_ckpt(2);
        let plan = plan_crosslingual(&ck, &[1]).unwrap();
        assert!(plan.frozen_tensors.is_empty());
        assert_eq!(plan.frozen_rows[SPEAKER_TABLE], [0].into());
        let all_old = plan_crosslingual(&ck, &[]).unwrap();
        assert_eq!(all_old.frozen_rows[SPEAKER_TABLE], [0, 1].into());
        let mono = plan_monolingual(&ck, &[1]).unwrap();
        assert!(mono.frozen_tensors.len() > plan.frozen_tensors.len());
    }

    #[test]
    fn new_rows_start_near_the_mean() {
        let mut ck = tiny_ckpt(2);
        init_new_speaker_rows(&mut ck.params, 2, 1, 3).unwrap();
        let t = ck.params.get(SPEAKER_TABLE).unwrap();
        for c in 0..2 {
            let mean = (t.row_slice(0)[c] + t.row_slice(1)[c]) / 2.0;
            assert!((t.row_slice(2)[c] - mean).abs() < 0.05);
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        let h = TrainHyper::default();
        assert!((h.lr_at(0, 100) - h.adam.lr).abs() < 1e-15);
        assert!((h.lr_at(99, 100) - h.adam.lr * h.lr_final_fraction).abs() < 1e-12);
    }

    #[test]
    fn adaptation_lr_is_ten_times_smaller() {
        assert!((TrainHyper::adaptation_default().adam.lr * 10.0 - TrainHyper::default().adam.lr).abs() < 1e-15);
    }

    #[test]
    fn label_joins_stages() {
        let mut ck = tiny_ckpt(1);
        for l in ["ENES", "DE", "KO"] {
            ck.stages.push(StageRecord {
                kind: StageKind::Cross,
                label: l.into(),
                steps: 1,
                seed: 0,
                new_speakers: vec![],
                hyper: TrainHyper::default(),
                corpus: None,
                plan: FreezePlan::default(),
            });
        }
        assert_eq!(ck.scenario_label(), "ENES2DE2KO");
    }
}
