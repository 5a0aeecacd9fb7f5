//! Tacotron-style acoustic model over a universal phoneme table.
//!
//! Text path: phoneme lookup, convolution stack, bidirectional LSTM,
//! projection back to the embedding width, plus a residual add of the
//! embeddings themselves. The speaker embedding is concatenated to every
//! encoder step. The decoder attends with forward attention (no transition
//! agent), predicts `r` frames and a stop logit per step, and a
//! convolutional postnet refines the frames residually.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{lstm_step, Bound, LstmWeights, ParamGroup, ParamStore, Real, Tape, Tensor, Var};
use crate::inventory::{DEFAULT_PHONEME_CAPACITY, DEFAULT_SPEAKER_CAPACITY};

pub const PHONEME_TABLE: &str = "W_p";
pub const SPEAKER_TABLE: &str = "W_s";

/// Standard deviation of the initial embedding rows, used rows or not.
pub const EMBEDDING_INIT_STD: f64 = 0.1;
const STOP_BIAS_INIT: f64 = -4.0;
const SIMPLEX_TOL: f64 = 1e-6;

static ROWS_CHECKED: AtomicU64 = AtomicU64::new(0);

/// Number of alignment rows verified to lie on the simplex in this process.
pub fn alignment_rows_checked() -> u64 {
    ROWS_CHECKED.load(Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Phoneme embedding width; also the encoder output width.
    pub phoneme_dim: usize,
    pub encoder_conv_layers: usize,
    pub encoder_kernel: usize,
    pub encoder_channels: usize,
    /// Hidden size of each direction of the encoder LSTM.
    pub encoder_hidden: usize,
    pub speaker_dim: usize,
    pub prenet_dims: Vec<usize>,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
    pub mel_channels: usize,
    /// Frames emitted per decoder step.
    pub reduction: usize,
    pub postnet_layers: usize,
    pub postnet_kernel: usize,
    pub postnet_channels: usize,
    pub stop_weight: f64,
    pub stop_pos_weight: f64,
    pub prenet_dropout: f64,
    pub phoneme_capacity: usize,
    pub speaker_capacity: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            phoneme_dim: 16,
            encoder_conv_layers: 2,
            encoder_kernel: 3,
            encoder_channels: 32,
            encoder_hidden: 16,
            speaker_dim: 8,
            prenet_dims: vec![32, 32],
            decoder_hidden: 64,
            attention_dim: 32,
            mel_channels: 16,
            reduction: 2,
            postnet_layers: 2,
            postnet_kernel: 5,
            postnet_channels: 32,
            stop_weight: 0.5,
            stop_pos_weight: 1.0,
            prenet_dropout: 0.0,
            phoneme_capacity: DEFAULT_PHONEME_CAPACITY,
            speaker_capacity: DEFAULT_SPEAKER_CAPACITY,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("phoneme_dim", self.phoneme_dim),
            ("encoder_kernel", self.encoder_kernel),
            ("encoder_channels", self.encoder_channels),
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("attention_dim", self.attention_dim),
            ("mel_channels", self.mel_channels),
            ("reduction", self.reduction),
            ("postnet_kernel", self.postnet_kernel),
            ("postnet_channels", self.postnet_channels),
            ("phoneme_capacity", self.phoneme_capacity),
            ("speaker_capacity", self.speaker_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.prenet_dims.contains(&0) {
            return Err(Error::Config("prenet dims must be at least 1".into()));
        }
        if self.encoder_kernel.is_multiple_of(2) || self.postnet_kernel.is_multiple_of(2) {
            return Err(Error::Config("convolution kernels must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.prenet_dropout) {
            return Err(Error::Config("prenet_dropout must lie in [0, 1)".into()));
        }
        if self.stop_weight < 0.0 || self.stop_pos_weight <= 0.0 {
            return Err(Error::Config("stop loss weights must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of the speaker-conditioned encoder memory.
    pub fn memory_dim(&self) -> usize {
        self.phoneme_dim + self.speaker_dim
    }

    fn encoder_lstm_input(&self) -> usize {
        if self.encoder_conv_layers == 0 {
            self.phoneme_dim
        } else {
            self.encoder_channels
        }
    }

    fn prenet_out(&self) -> usize {
        self.prenet_dims.last().copied().unwrap_or(self.mel_channels)
    }
}

fn init_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| dist.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, shape: &[usize]) -> Tensor<f32> {
    init_normal(rng, shape, (2.0 / (fan_in + fan_out) as f64).sqrt())
}

fn lstm_params(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng, prefix: &str, group: ParamGroup, input: usize, hidden: usize) {
    store.insert(&format!("{prefix}.w_ih"), group, xavier(rng, input, hidden, &[input, 4 * hidden]));
    store.insert(&format!("{prefix}.w_hh"), group, xavier(rng, hidden, hidden, &[hidden, 4 * hidden]));
    let mut b = Tensor::zeros(&[1, 4 * hidden]);
    for j in hidden..2 * hidden {
        b.data_mut()[j] = 1.0;
    }
    store.insert(&format!("{prefix}.b"), group, b);
}

/// Freshly initialized parameters. Every phoneme and speaker row is drawn
/// from `N(0, 0.1²)`, including rows no language uses yet.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamStore::new();
    let e = cfg.phoneme_dim;
    let m = cfg.mel_channels;

    p.insert(PHONEME_TABLE, ParamGroup::PhonemeTable, init_normal(&mut rng, &[cfg.phoneme_capacity, e], EMBEDDING_INIT_STD));
    p.insert(SPEAKER_TABLE, ParamGroup::SpeakerTable, init_normal(&mut rng, &[cfg.speaker_capacity, cfg.speaker_dim], EMBEDDING_INIT_STD));

    let enc = ParamGroup::Encoder;
    let mut c_in = e;
    for i in 0..cfg.encoder_conv_layers {
        let k = cfg.encoder_kernel;
        let c_out = cfg.encoder_channels;
        p.insert(&format!("enc.conv{i}.w"), enc, xavier(&mut rng, k * c_in, c_out, &[k * c_in, c_out]));
        p.insert(&format!("enc.conv{i}.b"), enc, Tensor::zeros(&[1, c_out]));
        c_in = c_out;
    }
    let h = cfg.encoder_hidden;
    lstm_params(&mut p, &mut rng, "enc.fwd", enc, cfg.encoder_lstm_input(), h);
    lstm_params(&mut p, &mut rng, "enc.bwd", enc, cfg.encoder_lstm_input(), h);
    p.insert("enc.proj.w", enc, xavier(&mut rng, 2 * h, e, &[2 * h, e]));
    p.insert("enc.proj.b", enc, Tensor::zeros(&[1, e]));

    let dec = ParamGroup::Decoder;
    let mut d_in = m;
    for (i, &d) in cfg.prenet_dims.iter().enumerate() {
        p.insert(&format!("dec.prenet{i}.w"), dec, xavier(&mut rng, d_in, d, &[d_in, d]));
        p.insert(&format!("dec.prenet{i}.b"), dec, Tensor::zeros(&[1, d]));
        d_in = d;
    }
    let dm = cfg.memory_dim();
    let hd = cfg.decoder_hidden;
    let a = cfg.attention_dim;
    lstm_params(&mut p, &mut rng, "dec.lstm", dec, cfg.prenet_out() + dm, hd);
    p.insert("dec.att.query", dec, xavier(&mut rng, hd, a, &[hd, a]));
    p.insert("dec.att.memory", dec, xavier(&mut rng, dm, a, &[dm, a]));
    p.insert("dec.att.bias", dec, Tensor::zeros(&[1, a]));
    p.insert("dec.att.v", dec, xavier(&mut rng, a, 1, &[a, 1]));
    let r = cfg.reduction;
    p.insert("dec.out.w", dec, xavier(&mut rng, hd + dm, r * m, &[hd + dm, r * m]));
    p.insert("dec.out.b", dec, Tensor::zeros(&[1, r * m]));
    p.insert("dec.stop.w", dec, init_normal(&mut rng, &[hd + dm, 1], 0.01));
    p.insert("dec.stop.b", dec, Tensor::filled(&[1, 1], STOP_BIAS_INIT as f32));

    let mut c_in = m;
    let k = cfg.postnet_kernel;
    for i in 0..cfg.postnet_layers {
        let last = i + 1 == cfg.postnet_layers;
        let c_out = if last { m } else { cfg.postnet_channels };
        let mut w = xavier(&mut rng, k * c_in, c_out, &[k * c_in, c_out]);
        if last {
            w.scale_assign(0.1);
        }
        p.insert(&format!("post.conv{i}.w"), dec, w);
        p.insert(&format!("post.conv{i}.b"), dec, Tensor::zeros(&[1, c_out]));
        c_in = c_out;
    }
    Ok(p)
}

/// Decoder-step x encoder-step attention weights. Every row is checked to
/// lie on the probability simplex when it is appended.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMatrix {
    encoder_steps: usize,
    weights: Vec<f64>,
}

impl AlignmentMatrix {
    pub fn new(encoder_steps: usize) -> Self {
        AlignmentMatrix {
            encoder_steps,
            weights: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.encoder_steps {
            return Err(Error::ShapeMismatch {
                op: "alignment row",
                lhs: vec![self.decoder_steps(), self.encoder_steps],
                rhs: vec![row.len()],
            });
        }
        let sum: f64 = row.iter().sum();
        let min = row.iter().copied().fold(f64::INFINITY, f64::min);
        if (sum - 1.0).abs() > SIMPLEX_TOL || min < 0.0 || !sum.is_finite() {
            return Err(Error::AlignmentNotSimplex {
                row: self.decoder_steps(),
                sum,
                min,
            });
        }
        self.weights.extend_from_slice(row);
        ROWS_CHECKED.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut a = AlignmentMatrix::new(rows.first().map_or(0, Vec::len));
        for r in rows {
            a.push_row(r)?;
        }
        Ok(a)
    }

    pub fn decoder_steps(&self) -> usize {
        self.weights.len().checked_div(self.encoder_steps).unwrap_or(0)
    }

    pub fn encoder_steps(&self) -> usize {
        self.encoder_steps
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.weights[t * self.encoder_steps..(t + 1) * self.encoder_steps]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks_exact(self.encoder_steps.max(1))
    }

    /// Bitwise equality of every weight.
    pub fn bit_eq(&self, other: &AlignmentMatrix) -> bool {
        self.encoder_steps == other.encoder_steps
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// CSV with one decoder step per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let line: Vec<String> = row.iter().map(|w| format!("{w:.9e}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// How the decoder obtains its inputs and length.
#[derive(Clone, Copy, Debug)]
pub enum DecodeMode<'a, T> {
    /// Ground-truth previous frames; length follows the target.
    TeacherForced(&'a Tensor<T>),
    /// Own previous output, until the stop rule fires or `max_steps`.
    FreeRunning { max_steps: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopRule {
    /// Stop after the first step whose stop probability exceeds 0.5.
    Predictor,
    /// Run exactly this many steps.
    FixedSteps(usize),
}

/// Decoder outputs still recorded on the tape.
pub struct DecoderVars<'t, T: Real> {
    pub y_pre: Var<'t, T>,
    pub y_post: Var<'t, T>,
    /// `[1, steps]` stop logits.
    pub stop_logits: Var<'t, T>,
    pub alignment: AlignmentMatrix,
    pub stopped: bool,
    pub truncated: bool,
}

/// Detached decoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderOutput<T> {
    pub y_pre: Tensor<T>,
    pub y_post: Tensor<T>,
    pub alignment: AlignmentMatrix,
    pub stop_probs: Vec<f64>,
    pub stopped: bool,
    pub truncated: bool,
}

impl<T: Real> DecoderVars<'_, T> {
    pub fn detach(&self) -> DecoderOutput<T> {
        let stop_probs = self
            .stop_logits
            .value()
            .data()
            .iter()
            .map(|&x| 1.0 / (1.0 + (-x.as_f64()).exp()))
            .collect();
        DecoderOutput {
            y_pre: (*self.y_pre.value()).clone(),
            y_post: (*self.y_post.value()).clone(),
            alignment: self.alignment.clone(),
            stop_probs,
            stopped: self.stopped,
            truncated: self.truncated,
        }
    }
}

/// One forward-attention update:
/// `alpha_t(n) ∝ (alpha_{t-1}(n) + alpha_{t-1}(n-1)) * softmax(energies)(n)`.
pub fn forward_attention_step<'t, T: Real>(
    alpha_prev: &Var<'t, T>,
    energies: &Var<'t, T>,
    step: usize,
) -> Result<Var<'t, T>> {
    let probs = energies.softmax(None)?;
    let carried = alpha_prev.add(&alpha_prev.shift_right()?)?;
    carried
        .mul(&probs)?
        .normalize_rows()
        .map_err(|e| match e {
            Error::Numeric(_) => Error::DegenerateAttention { step },
            other => other,
        })
}

/// The acoustic model; all methods read parameters through a [`Bound`].
#[derive(Clone, Debug)]
pub struct TacoModel {
    pub config: ModelConfig,
}

impl TacoModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(TacoModel { config })
    }

    /// `EncoderStack(Embed(X)) + Embed(X)`, shape `[T_in, E]`.
    pub fn encode<'t, T: Real>(&self, p: &Bound<'t, T>, phonemes: &[usize]) -> Result<Var<'t, T>> {
        if phonemes.is_empty() {
            return Err(Error::Validation("cannot encode an empty phoneme sequence".into()));
        }
        let cfg = &self.config;
        let table = p.var(PHONEME_TABLE)?;
        let tape = table.tape();
        let emb = table.embedding(phonemes)?;

        let mut x = emb;
        let pad = (cfg.encoder_kernel - 1) / 2;
        for i in 0..cfg.encoder_conv_layers {
            let w = p.var(&format!("enc.conv{i}.w"))?;
            let b = p.var(&format!("enc.conv{i}.b"))?;
            x = x.conv1d(&w, &b, cfg.encoder_kernel, pad)?.relu();
        }

        let steps = phonemes.len();
        let h = cfg.encoder_hidden;
        let frames: Vec<Var<'t, T>> = (0..steps).map(|t| x.slice_rows(t, t + 1)).collect::<Result<_>>()?;
        let run = |prefix: &str, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<(usize, Var<'t, T>)>> {
            let w = lstm_weights(p, prefix)?;
            let mut hs = tape.constant(Tensor::zeros(&[1, h]));
            let mut cs = tape.constant(Tensor::zeros(&[1, h]));
            let mut out = Vec::with_capacity(steps);
            for t in order {
                (hs, cs) = lstm_step(&frames[t], &hs, &cs, &w)?;
                out.push((t, hs));
            }
            Ok(out)
        };
        let fwd = run("enc.fwd", &mut (0..steps))?;
        let mut bwd = run("enc.bwd", &mut (0..steps).rev())?;
        bwd.reverse();
        let fwd = tape.concat_rows(&fwd.into_iter().map(|(_, v)| v).collect::<Vec<_>>())?;
        let bwd = tape.concat_rows(&bwd.into_iter().map(|(_, v)| v).collect::<Vec<_>>())?;
        let both = tape.concat_cols(&[fwd, bwd])?;
        let stack = both.matmul(&p.var("enc.proj.w")?)?.add(&p.var("enc.proj.b")?)?;
        stack.add(&emb)
    }

    /// Appends the speaker's embedding row to every memory step.
    pub fn condition_on_speaker<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        memory: &Var<'t, T>,
        speaker_id: usize,
    ) -> Result<Var<'t, T>> {
        let table = p.var(SPEAKER_TABLE)?;
        let rows = table.value().rows();
        if speaker_id >= rows {
            return Err(Error::UnknownSpeaker(speaker_id));
        }
        let steps = memory.shape()[0];
        let spk = table.embedding(&vec![speaker_id; steps])?;
        memory.tape().concat_cols(&[*memory, spk])
    }

    fn prenet<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        frame: &Var<'t, T>,
        dropout: &mut Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t, T>> {
        let mut x = *frame;
        let rate = self.config.prenet_dropout;
        for i in 0..self.config.prenet_dims.len() {
            x = x
                .matmul(&p.var(&format!("dec.prenet{i}.w"))?)?
                .add(&p.var(&format!("dec.prenet{i}.b"))?)?
                .relu();
            if rate > 0.0 {
                if let Some(rng) = dropout.as_deref_mut() {
                    let keep = T::lit(1.0 / (1.0 - rate));
                    let shape = x.shape().to_vec();
                    let n: usize = shape.iter().product();
                    let mask = (0..n)
                        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
                        .collect();
                    x = x.mul(&x.tape().constant(Tensor::new(shape, mask)?))?;
                }
            }
        }
        Ok(x)
    }

    fn postnet<'t, T: Real>(&self, p: &Bound<'t, T>, y_pre: &Var<'t, T>) -> Result<Var<'t, T>> {
        let cfg = &self.config;
        let pad = (cfg.postnet_kernel - 1) / 2;
        let mut x = *y_pre;
        for i in 0..cfg.postnet_layers {
            x = x.conv1d(
                &p.var(&format!("post.conv{i}.w"))?,
                &p.var(&format!("post.conv{i}.b"))?,
                cfg.postnet_kernel,
                pad,
            )?;
            if i + 1 < cfg.postnet_layers {
                x = x.tanh();
            }
        }
        if cfg.postnet_layers == 0 {
            return Ok(*y_pre);
        }
        y_pre.add(&x)
    }

    /// Autoregressive decoding over speaker-conditioned memory. With
    /// `fixed_alignment`, attention is not computed: row `t` of the given
    /// matrix is used at step `t`, and the emitted alignment is that
    /// matrix.
    pub fn decode<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        memory: &Var<'t, T>,
        mode: DecodeMode<'_, T>,
        stop: StopRule,
        fixed_alignment: Option<&AlignmentMatrix>,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<DecoderVars<'t, T>> {
        let cfg = &self.config;
        let tape = memory.tape();
        let (t_in, dm) = {
            let s = memory.shape();
            (s[0], s[1])
        };
        if dm != cfg.memory_dim() {
            return Err(Error::ShapeMismatch {
                op: "decode memory",
                lhs: vec![t_in, dm],
                rhs: vec![t_in, cfg.memory_dim()],
            });
        }
        let r = cfg.reduction;
        let m = cfg.mel_channels;

        let (max_steps, target) = match mode {
            DecodeMode::TeacherForced(y) => {
                let (t_out, ym) = y.dims2()?;
                if ym != m || t_out == 0 {
                    return Err(Error::ShapeMismatch {
                        op: "decode target",
                        lhs: y.shape().to_vec(),
                        rhs: vec![t_out.max(1), m],
                    });
                }
                (t_out.div_ceil(r), Some(y))
            }
            DecodeMode::FreeRunning { max_steps } => (max_steps, None),
        };
        let max_steps = match stop {
            StopRule::FixedSteps(n) if target.is_none() => n,
            _ => max_steps,
        };
        if let Some(a) = fixed_alignment {
            if a.encoder_steps() != t_in {
                return Err(Error::ShapeMismatch {
                    op: "fixed alignment",
                    lhs: vec![a.decoder_steps(), a.encoder_steps()],
                    rhs: vec![max_steps, t_in],
                });
            }
            if a.decoder_steps() < max_steps {
                return Err(Error::ShapeMismatch {
                    op: "fixed alignment length",
                    lhs: vec![a.decoder_steps(), a.encoder_steps()],
                    rhs: vec![max_steps, t_in],
                });
            }
        }

        let keys = memory
            .matmul(&p.var("dec.att.memory")?)?
            .add(&p.var("dec.att.bias")?)?;
        let att_query = p.var("dec.att.query")?;
        let att_v = p.var("dec.att.v")?;
        let lstm = lstm_weights(p, "dec.lstm")?;
        let out_w = p.var("dec.out.w")?;
        let out_b = p.var("dec.out.b")?;
        let stop_w = p.var("dec.stop.w")?;
        let stop_b = p.var("dec.stop.b")?;

        let mut alpha0 = Tensor::zeros(&[1, t_in]);
        alpha0.data_mut()[0] = T::one();
        let mut alpha = tape.constant(alpha0);
        let mut ctx = tape.constant(Tensor::zeros(&[1, dm]));
        let mut h = tape.constant(Tensor::zeros(&[1, cfg.decoder_hidden]));
        let mut c = tape.constant(Tensor::zeros(&[1, cfg.decoder_hidden]));
        let mut prev = tape.constant(Tensor::zeros(&[1, m]));

        let mut frames = Vec::with_capacity(max_steps);
        let mut stops = Vec::with_capacity(max_steps);
        let mut alignment = AlignmentMatrix::new(t_in);
        let mut stopped = false;

        for step in 0..max_steps {
            let pre = self.prenet(p, &prev, &mut dropout)?;
            let x = tape.concat_cols(&[pre, ctx])?;
            (h, c) = lstm_step(&x, &h, &c, &lstm)?;

            alpha = match fixed_alignment {
                Some(a) => {
                    let row = a.row(step).iter().map(|&w| T::lit(w)).collect::<Vec<_>>();
                    tape.constant(Tensor::row(&row))
                }
                None => {
                    let q = h.matmul(&att_query)?;
                    let energies = keys.add(&q)?.tanh().matmul(&att_v)?.transpose()?;
                    forward_attention_step(&alpha, &energies, step)?
                }
            };
            match fixed_alignment {
                Some(a) => alignment.push_row(a.row(step))?,
                None => {
                    let row: Vec<f64> = alpha.value().data().iter().map(|w| w.as_f64()).collect();
                    alignment.push_row(&row)?;
                }
            }
            ctx = alpha.matmul(memory)?;

            let hc = tape.concat_cols(&[h, ctx])?;
            let out = hc.matmul(&out_w)?.add(&out_b)?.reshape(&[r, m])?;
            let stop_logit = hc.matmul(&stop_w)?.add(&stop_b)?;
            frames.push(out);
            stops.push(stop_logit);

            match target {
                Some(y) => {
                    let row = ((step + 1) * r - 1).min(y.rows() - 1);
                    prev = tape.constant(Tensor::row(y.row_slice(row)));
                }
                None => {
                    prev = out.slice_rows(r - 1, r)?;
                    if stop == StopRule::Predictor && stop_logit.item() > T::zero() {
                        stopped = true;
                        break;
                    }
                }
            }
        }
        let truncated = target.is_none() && !stopped && stop == StopRule::Predictor;
        if frames.is_empty() {
            return Err(Error::Validation("decoder produced no steps".into()));
        }

        let mut y_pre = tape.concat_rows(&frames)?;
        if let Some(y) = target {
            if y.rows() < frames.len() * r {
                y_pre = y_pre.slice_rows(0, y.rows())?;
            }
        }
        let y_post = self.postnet(p, &y_pre)?;
        let stop_logits = tape.concat_cols(&stops)?;
        Ok(DecoderVars {
            y_pre,
            y_post,
            stop_logits,
            alignment,
            stopped: stopped || matches!(stop, StopRule::FixedSteps(_)),
            truncated,
        })
    }

    /// Teacher-forced forward pass and loss for one utterance.
    pub fn utterance_loss<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        phonemes: &[usize],
        speaker_id: usize,
        target: &Tensor<T>,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(LossTerms<'t, T>, DecoderVars<'t, T>)> {
        let memory = self.encode(p, phonemes)?;
        let memory = self.condition_on_speaker(p, &memory, speaker_id)?;
        let out = self.decode(
            p,
            &memory,
            DecodeMode::TeacherForced(target),
            StopRule::Predictor,
            None,
            dropout,
        )?;
        let steps = out.alignment.decoder_steps();
        let mut stop_targets = vec![T::zero(); steps];
        stop_targets[steps - 1] = T::one();
        let tape = memory.tape();
        let y = tape.constant(target.clone());
        let terms = taco_loss(
            &y,
            &out.y_pre,
            &out.y_post,
            &out.stop_logits,
            &stop_targets,
            self.config.stop_weight,
            self.config.stop_pos_weight,
        )?;
        Ok((terms, out))
    }
}

fn lstm_weights<'t, T: Real>(p: &Bound<'t, T>, prefix: &str) -> Result<LstmWeights<'t, T>> {
    Ok(LstmWeights {
        w_ih: p.var(&format!("{prefix}.w_ih"))?,
        w_hh: p.var(&format!("{prefix}.w_hh"))?,
        bias: p.var(&format!("{prefix}.b"))?,
    })
}

pub struct LossTerms<'t, T: Real> {
    /// Spectrogram terms plus the weighted stop term; what gets minimized.
    pub total: Var<'t, T>,
    /// `mse(Y, Y_post) + mse(Y, Y_pre)`; what gets reported.
    pub spectrogram: Var<'t, T>,
}

/// `mse(Y, Y_post) + mse(Y, Y_pre) + stop_weight * BCE(stop)`.
pub fn taco_loss<'t, T: Real>(
    y: &Var<'t, T>,
    y_pre: &Var<'t, T>,
    y_post: &Var<'t, T>,
    stop_logits: &Var<'t, T>,
    stop_targets: &[T],
    stop_weight: f64,
    stop_pos_weight: f64,
) -> Result<LossTerms<'t, T>> {
    let spectrogram = y.mse(y_post)?.add(&y.mse(y_pre)?)?;
    let total = if stop_weight > 0.0 {
        let bce = stop_logits.bce_with_logits(stop_targets, T::lit(stop_pos_weight))?;
        spectrogram.add(&bce.scale(T::lit(stop_weight)))?
    } else {
        spectrogram
    };
    Ok(LossTerms { total, spectrogram })
}

/// Free-running (or fixed-alignment) inference without gradient tracking.
pub fn infer(
    model: &TacoModel,
    params: &ParamStore<f32>,
    phonemes: &[usize],
    speaker_id: usize,
    max_steps: usize,
    stop: StopRule,
    fixed_alignment: Option<&AlignmentMatrix>,
) -> Result<DecoderOutput<f32>> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let memory = model.encode(&p, phonemes)?;
    let memory = model.condition_on_speaker(&p, &memory, speaker_id)?;
    let out = model.decode(
        &p,
        &memory,
        DecodeMode::FreeRunning { max_steps },
        stop,
        fixed_alignment,
        None,
    )?;
    Ok(out.detach())
}

/// Teacher-forced outputs for one utterance, without gradient tracking.
pub fn teacher_forced(
    model: &TacoModel,
    params: &ParamStore<f32>,
    phonemes: &[usize],
    speaker_id: usize,
    target: &Tensor<f32>,
) -> Result<(DecoderOutput<f32>, f64)> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    let (terms, out) = model.utterance_loss(&p, phonemes, speaker_id, target, None)?;
    Ok((out.detach(), terms.spectrogram.item().as_f64()))
}

/// Encoder memory values for a phoneme sequence.
pub fn encode_values(model: &TacoModel, params: &ParamStore<f32>, phonemes: &[usize]) -> Result<Tensor<f32>> {
    let tape = Tape::new();
    let p = params.bind_frozen(&tape);
    Ok((*model.encode(&p, phonemes)?.value()).clone())
}
