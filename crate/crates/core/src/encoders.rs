//! Toy dual encoders and projection heads.
//!
//! Audio: the waveform is cut into strided windows, each window goes through a
//! shared affine map and `tanh`, and the frame features are mean-pooled.
//! Text: token embeddings are looked up and mean-pooled. Both utterance
//! vectors are then mapped by a per-modality affine head and L2-normalized.
//!
//! Every forward step has a matching backward step here so the training code
//! can chain gradients down to the encoder weights.

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, Matrix};
use crate::seed;

pub const MAX_AUDIO_LEN: usize = 80_000;
pub const MAX_TEXT_LEN: usize = 16;

/// Log inverse temperature at initialization, `ln(1/0.07)`.
pub fn initial_log_scale() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Raw audio samples. Non-empty, finite, at most `max_len` long.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform(Vec<f64>);

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        Self::with_max_len(samples, MAX_AUDIO_LEN)
    }

    pub fn with_max_len(samples: Vec<f64>, max_len: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidWaveform("empty waveform".into()));
        }
        if samples.len() > max_len {
            return Err(Error::InvalidWaveform(format!(
                "{} samples exceeds the cap of {max_len}",
                samples.len()
            )));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidWaveform(format!("sample {i} is not finite")));
        }
        Ok(Self(samples))
    }

    pub fn samples(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Token ids. Non-empty and at most `max_len` long; the vocabulary bound is
/// checked by the encoder that consumes them.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence(Vec<u32>);

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Result<Self> {
        Self::with_max_len(tokens, MAX_TEXT_LEN)
    }

    pub fn with_max_len(tokens: Vec<u32>, max_len: usize) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidTokens("empty token sequence".into()));
        }
        if tokens.len() > max_len {
            return Err(Error::InvalidTokens(format!(
                "{} tokens exceeds the cap of {max_len}",
                tokens.len()
            )));
        }
        Ok(Self(tokens))
    }

    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Pooled utterance-level representation (`d_enc` wide).
#[derive(Clone, Debug, PartialEq)]
pub struct UtteranceEmbedding(pub Vec<f64>);

impl UtteranceEmbedding {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Audio frame length in samples.
    pub window: usize,
    pub stride: usize,
    pub d_enc: usize,
    pub d_proj: usize,
    pub vocab_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            window: 64,
            stride: 32,
            d_enc: 32,
            d_proj: 64,
            vocab_size: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("window", self.window),
            ("stride", self.stride),
            ("d_enc", self.d_enc),
            ("d_proj", self.d_proj),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be positive")));
            }
        }
        Ok(())
    }

    pub fn frame_count(&self, audio_len: usize) -> usize {
        if audio_len < self.window {
            0
        } else {
            (audio_len - self.window) / self.stride + 1
        }
    }
}

/// `x ↦ W·x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineMap {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl AffineMap {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn random(out_dim: usize, in_dim: usize, std: f64, rng: &mut seed::Rng) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        let data = (0..out_dim * in_dim).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, data),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.matvec(x);
        axpy(1.0, &self.bias, &mut y);
        y
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and returns `Wᵀ dy`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut AffineMap) -> Vec<f64> {
        grad.weight.add_outer(1.0, dy, x);
        axpy(1.0, dy, &mut grad.bias);
        self.weight.matvec_t(dy)
    }
}

/// All trainable state of the dual encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    /// Per-frame map, `d_enc × window`.
    pub audio: AffineMap,
    /// `vocab_size × d_enc`.
    pub token_embedding: Matrix,
    pub audio_head: AffineMap,
    pub text_head: AffineMap,
    /// Log inverse temperature; similarities are multiplied by `exp(log_scale)`.
    pub log_scale: f64,
}

/// Names of the parameter arrays, in the canonical order used by the
/// optimizer and the checkpoint format.
pub const PARAM_NAMES: [&str; 8] = [
    "audio.weight",
    "audio.bias",
    "text.embedding",
    "audio_head.weight",
    "audio_head.bias",
    "text_head.weight",
    "text_head.bias",
    "logit_scale",
];

impl EncoderParams {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::mix(seed, 0xE5C0));
        let audio = AffineMap::random(config.d_enc, config.window, (config.window as f64).powf(-0.5), &mut rng);
        let emb = Normal::new(0.0, 1.0).expect("unit normal");
        let token_embedding = Matrix::from_vec(
            config.vocab_size,
            config.d_enc,
            (0..config.vocab_size * config.d_enc).map(|_| emb.sample(&mut rng)).collect(),
        );
        let head_std = (config.d_enc as f64).powf(-0.5);
        let audio_head = AffineMap::random(config.d_proj, config.d_enc, head_std, &mut rng);
        let text_head = AffineMap::random(config.d_proj, config.d_enc, head_std, &mut rng);
        Ok(Self {
            config,
            audio,
            token_embedding,
            audio_head,
            text_head,
            log_scale: initial_log_scale(),
        })
    }

    /// Same shapes, all zeros. Used as a gradient accumulator.
    pub fn zeros(config: EncoderConfig) -> Self {
        Self {
            config,
            audio: AffineMap::zeros(config.d_enc, config.window),
            token_embedding: Matrix::zeros(config.vocab_size, config.d_enc),
            audio_head: AffineMap::zeros(config.d_proj, config.d_enc),
            text_head: AffineMap::zeros(config.d_proj, config.d_enc),
            log_scale: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config)
    }

    /// Parameter arrays with their shapes, in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<usize>, &[f64])> {
        let c = &self.config;
        vec![
            (PARAM_NAMES[0], vec![c.d_enc, c.window], self.audio.weight.as_slice()),
            (PARAM_NAMES[1], vec![c.d_enc], &self.audio.bias),
            (PARAM_NAMES[2], vec![c.vocab_size, c.d_enc], self.token_embedding.as_slice()),
            (PARAM_NAMES[3], vec![c.d_proj, c.d_enc], self.audio_head.weight.as_slice()),
            (PARAM_NAMES[4], vec![c.d_proj], &self.audio_head.bias),
            (PARAM_NAMES[5], vec![c.d_proj, c.d_enc], self.text_head.weight.as_slice()),
            (PARAM_NAMES[6], vec![c.d_proj], &self.text_head.bias),
            (PARAM_NAMES[7], vec![], std::slice::from_ref(&self.log_scale)),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            (PARAM_NAMES[0], self.audio.weight.as_mut_slice()),
            (PARAM_NAMES[1], &mut self.audio.bias),
            (PARAM_NAMES[2], self.token_embedding.as_mut_slice()),
            (PARAM_NAMES[3], self.audio_head.weight.as_mut_slice()),
            (PARAM_NAMES[4], &mut self.audio_head.bias),
            (PARAM_NAMES[5], self.text_head.weight.as_mut_slice()),
            (PARAM_NAMES[6], &mut self.text_head.bias),
            (PARAM_NAMES[7], std::slice::from_mut(&mut self.log_scale)),
        ]
    }

    /// `self += other`, element-wise.
    pub fn accumulate(&mut self, other: &EncoderParams) {
        for ((_, dst), (_, _, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            axpy(1.0, src, dst);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Component-wise mean of a non-empty set of equal-length vectors.
pub fn mean_pool<V: AsRef<[f64]>>(frames: &[V]) -> Result<Vec<f64>> {
    let first = frames.first().ok_or(Error::EmptyInput)?.as_ref();
    let mut acc = vec![0.0; first.len()];
    for f in frames {
        let f = f.as_ref();
        if f.len() != acc.len() {
            return Err(Error::ShapeMismatch(format!(
                "frame of width {} in a pool of width {}",
                f.len(),
                acc.len()
            )));
        }
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue("frame entry"));
        }
        axpy(1.0, f, &mut acc);
    }
    let n = frames.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    Ok(acc)
}

/// Strided windows of the waveform; a trailing partial window is dropped.
pub fn frames<'a>(w: &'a Waveform, config: &EncoderConfig) -> impl Iterator<Item = &'a [f64]> + 'a {
    let (window, stride) = (config.window, config.stride);
    let n = config.frame_count(w.len());
    (0..n).map(move |m| &w.samples()[m * stride..m * stride + window])
}

/// Frame activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct AudioTrace {
    /// `tanh` outputs, one row per frame.
    pub activations: Matrix,
}

pub fn encode_audio(w: &Waveform, p: &EncoderParams) -> Result<UtteranceEmbedding> {
    encode_audio_traced(w, p).map(|(h, _)| h)
}

pub fn encode_audio_traced(w: &Waveform, p: &EncoderParams) -> Result<(UtteranceEmbedding, AudioTrace)> {
    let cfg = &p.config;
    let n = cfg.frame_count(w.len());
    if n == 0 {
        return Err(Error::AudioTooShort {
            len: w.len(),
            window: cfg.window,
        });
    }
    let mut activations = Matrix::zeros(n, cfg.d_enc);
    for (m, frame) in frames(w, cfg).enumerate() {
        let pre = p.audio.apply(frame);
        for (a, z) in activations.row_mut(m).iter_mut().zip(pre) {
            *a = z.tanh();
        }
    }
    let rows: Vec<&[f64]> = (0..n).map(|m| activations.row(m)).collect();
    let h = mean_pool(&rows)?;
    Ok((UtteranceEmbedding(h), AudioTrace { activations }))
}

/// Backpropagates `dh` (gradient w.r.t. the pooled audio vector) into the
/// frame map gradient.
pub fn audio_backward(w: &Waveform, trace: &AudioTrace, dh: &[f64], p: &EncoderParams, grad: &mut EncoderParams) {
    let n = trace.activations.rows();
    let inv_n = 1.0 / n as f64;
    let mut dpre = vec![0.0; dh.len()];
    for (m, frame) in frames(w, &p.config).enumerate() {
        for ((d, &a), &g) in dpre.iter_mut().zip(trace.activations.row(m)).zip(dh) {
            *d = g * inv_n * (1.0 - a * a);
        }
        grad.audio.weight.add_outer(1.0, &dpre, frame);
        axpy(1.0, &dpre, &mut grad.audio.bias);
    }
}

pub fn encode_text(t: &TokenSequence, p: &EncoderParams) -> Result<UtteranceEmbedding> {
    let vocab_size = p.config.vocab_size;
    if let Some(&token) = t.tokens().iter().find(|&&k| k as usize >= vocab_size) {
        return Err(Error::TokenOutOfVocabulary { token, vocab_size });
    }
    let rows: Vec<&[f64]> = t.tokens().iter().map(|&k| p.token_embedding.row(k as usize)).collect();
    mean_pool(&rows).map(UtteranceEmbedding)
}

pub fn text_backward(t: &TokenSequence, dh: &[f64], grad: &mut EncoderParams) {
    let inv_n = 1.0 / t.len() as f64;
    for &k in t.tokens() {
        axpy(inv_n, dh, grad.token_embedding.row_mut(k as usize));
    }
}

/// `normalize(W·h + b)`. Returns the unit vector and the pre-normalization norm.
pub fn project_traced(h: &[f64], head: &AffineMap) -> Result<(Vec<f64>, f64)> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue("utterance embedding"));
    }
    if h.len() != head.in_dim() {
        return Err(Error::ShapeMismatch(format!(
            "embedding width {} vs head input {}",
            h.len(),
            head.in_dim()
        )));
    }
    let mut u = head.apply(h);
    let r = norm(&u);
    if r == 0.0 || !r.is_finite() {
        return Err(Error::DegenerateProjection);
    }
    u.iter_mut().for_each(|v| *v /= r);
    Ok((u, r))
}

pub fn project(h: &UtteranceEmbedding, head: &AffineMap) -> Result<Vec<f64>> {
    project_traced(h.as_slice(), head).map(|(z, _)| z)
}

/// Backward through `normalize ∘ affine`. Accumulates the head gradient and
/// returns the gradient w.r.t. `h`.
pub fn project_backward(h: &[f64], head: &AffineMap, z: &[f64], pre_norm: f64, dz: &[f64], grad: &mut AffineMap) -> Vec<f64> {
    let zdz = dot(z, dz);
    let du: Vec<f64> = dz.iter().zip(z).map(|(g, zi)| (g - zi * zdz) / pre_norm).collect();
    head.backward(h, &du, grad)
}
