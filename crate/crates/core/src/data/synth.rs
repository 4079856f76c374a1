//! Synthetic paired corpus with a controllable shared signal.
//!
//! A fixed "world" (class prototypes and keyword templates) is derived from
//! `world_seed`. Each sample draws a class, jitters the class prototype into a
//! latent vector, and renders:
//!
//! * audio: the latent vector as sine amplitudes of tones whose periods divide
//!   `period`, plus per-sample cosine and out-of-band nuisance tones and white
//!   noise;
//! * text: keywords from the class template shuffled among filler tokens.
//!   Templates draw from a shared pool of `keyword_vocab` tokens, so one
//!   keyword can belong to several classes.
//!
//! Device-directedness follows class parity (odd classes are directed), except
//! that a `directed_flip` share of utterances invert it. Two optional cues mark
//! directedness itself: a signed offset on the top cosine tone, and a "wake"
//! keyword that replaces a filler. Both live in places the unlabeled corpus
//! treats as uninformative, so an encoder has to adapt to read them.
//! [`SynthSpec::downstream`] switches them on.
//!
//! Tones are phase-locked to a `period`-sample grid, so with a frame stride
//! equal to `period` every audio frame sees the same waveform shape.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{PairedSample, Source, Task};
use crate::encoders::{TokenSequence, Waveform, MAX_AUDIO_LEN, MAX_TEXT_LEN};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub class_count: usize,
    pub latent_dim: usize,
    pub world_seed: u64,
    pub vocab_size: usize,
    /// Token ids `0..filler_tokens` are class-independent filler.
    pub filler_tokens: usize,
    /// Distinct keyword tokens shared by all class templates; classes
    /// overlap when this is below `class_count * keywords_per_class`.
    pub keyword_vocab: usize,
    pub keywords_per_class: usize,
    pub keywords_per_utterance: usize,
    pub fillers_per_utterance: usize,
    pub audio_len: usize,
    /// Tone grid in samples; tone `k` has frequency `k / period`.
    pub period: usize,
    pub tone_amplitude: f64,
    pub latent_jitter: f64,
    pub nuisance_amplitude: f64,
    pub noise_std: f64,
    /// Probability that directedness disagrees with class parity.
    pub directed_flip: f64,
    /// Signed amplitude added to the top cosine tone: positive when directed.
    pub directed_cue: f64,
    /// Probability that a directed utterance carries the wake keyword.
    pub directed_token_rate: f64,
}

impl SynthSpec {
    pub fn new(class_count: usize, latent_dim: usize) -> Self {
        Self {
            class_count,
            latent_dim,
            world_seed: 0x00D5_C1A9,
            vocab_size: 128,
            filler_tokens: 32,
            keyword_vocab: 30,
            keywords_per_class: 4,
            keywords_per_utterance: 4,
            fillers_per_utterance: 6,
            audio_len: 1024,
            period: 32,
            tone_amplitude: 0.5,
            latent_jitter: 0.5,
            nuisance_amplitude: 0.5,
            noise_std: 0.3,
            directed_flip: 0.0,
            directed_cue: 0.0,
            directed_token_rate: 0.0,
        }
    }

    /// Labeled command utterances: two keywords among eight fillers, with
    /// directedness flipped for 5% of utterances and marked by the audio cue
    /// (amplitude 0.5) and, for 60% of directed ones, the wake keyword.
    pub fn downstream(self) -> Self {
        Self {
            keywords_per_utterance: 2,
            fillers_per_utterance: 8,
            directed_flip: 0.05,
            directed_cue: 0.5,
            directed_token_rate: 0.6,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.class_count == 0 {
            return bad("class_count must be at least 1".into());
        }
        let max_tones = self.period / 2 - 1;
        if self.latent_dim == 0 || self.latent_dim > max_tones {
            return bad(format!("latent_dim must be in 1..={max_tones} for period {}", self.period));
        }
        if self.filler_tokens == 0 || self.filler_tokens >= self.vocab_size {
            return bad("filler_tokens must leave room for keywords".into());
        }
        if self.keyword_vocab < self.keywords_per_class || self.filler_tokens + self.keyword_vocab > self.vocab_size {
            return bad("keyword_vocab must fit the vocabulary and cover one template".into());
        }
        if self.keywords_per_class == 0 || self.keywords_per_utterance == 0 {
            return bad("keyword counts must be positive".into());
        }
        let len = self.keywords_per_utterance + self.fillers_per_utterance;
        if len > MAX_TEXT_LEN {
            return bad(format!("utterance length {len} exceeds {MAX_TEXT_LEN}"));
        }
        if !(0.0..=1.0).contains(&self.directed_flip) || !(0.0..=1.0).contains(&self.directed_token_rate) {
            return bad("directed_flip and directed_token_rate must be probabilities".into());
        }
        if self.audio_len == 0 || self.audio_len > MAX_AUDIO_LEN {
            return bad(format!("audio_len must be in 1..={MAX_AUDIO_LEN}"));
        }
        Ok(())
    }

    fn world(&self) -> World {
        let mut rng = seed::rng(seed::mix(self.world_seed, self.class_count as u64 * 1000 + self.latent_dim as u64));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let prototypes = (0..self.class_count)
            .map(|_| (0..self.latent_dim).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let mut pool: Vec<u32> = (self.filler_tokens as u32..self.vocab_size as u32).collect();
        pool.shuffle(&mut rng);
        pool.truncate(self.keyword_vocab);
        let keywords = (0..self.class_count)
            .map(|_| pool.choose_multiple(&mut rng, self.keywords_per_class).copied().collect())
            .collect();
        World {
            prototypes,
            keywords,
            wake: pool[0],
        }
    }

    /// `n` clean ("manual") pairs, labeled for `task` when one is given. The
    /// audio and text do not depend on `task`.
    pub fn generate(&self, seed: u64, n: usize, task: Option<Task>) -> Result<Vec<PairedSample>> {
        self.validate()?;
        if n == 0 {
            return Err(Error::InvalidParameter("N must be at least 1".into()));
        }
        let world = self.world();
        (0..n).map(|i| self.sample(&world, seed, i, task)).collect()
    }

    fn sample(&self, world: &World, seed: u64, index: usize, task: Option<Task>) -> Result<PairedSample> {
        let id = format!("s{index:06}");
        let mut rng = seed::rng(seed::mix_str(seed, &id));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let class = rng.random_range(0..self.class_count);
        let directed = (class % 2 == 1) != (rng.random::<f64>() < self.directed_flip);
        let cue = if directed { self.directed_cue } else { -self.directed_cue };

        let latent: Vec<f64> = world.prototypes[class]
            .iter()
            .map(|&mu| mu + self.latent_jitter * normal.sample(&mut rng))
            .collect();
        let max_tones = self.period / 2 - 1;
        let cos_amp: Vec<f64> = (0..max_tones).map(|_| self.nuisance_amplitude * normal.sample(&mut rng)).collect();
        let sin_nuisance: Vec<f64> = (self.latent_dim..max_tones)
            .map(|_| self.nuisance_amplitude * normal.sample(&mut rng))
            .collect();
        let omega = 2.0 * std::f64::consts::PI / self.period as f64;
        let samples = (0..self.audio_len)
            .map(|t| {
                let phase = omega * (t % self.period) as f64;
                let mut x = 0.0;
                for (k, &a) in latent.iter().enumerate() {
                    x += self.tone_amplitude * a * (phase * (k + 1) as f64).sin();
                }
                for (k, &a) in sin_nuisance.iter().enumerate() {
                    x += a * (phase * (self.latent_dim + k + 1) as f64).sin();
                }
                x += cue * (phase * max_tones as f64).cos();
                for (k, &a) in cos_amp.iter().enumerate() {
                    x += a * (phase * (k + 1) as f64).cos();
                }
                quantize_sample(x + self.noise_std * normal.sample(&mut rng))
            })
            .collect();

        let template = &world.keywords[class];
        let mut tokens: Vec<u32> = (0..self.keywords_per_utterance)
            .map(|_| template[rng.random_range(0..template.len())])
            .collect();
        tokens.extend((0..self.fillers_per_utterance).map(|_| rng.random_range(0..self.filler_tokens as u32)));
        let marked = directed && rng.random::<f64>() < self.directed_token_rate;
        if marked && self.fillers_per_utterance > 0 {
            tokens[self.keywords_per_utterance] = world.wake;
        }
        tokens.shuffle(&mut rng);

        Ok(PairedSample {
            id,
            audio: Waveform::new(samples)?,
            text: TokenSequence::new(tokens)?,
            label: task.map(|t| match t {
                Task::Mdsd => u32::from(directed),
                Task::Mcic => class as u32,
            }),
            source: Source::Manual,
        })
    }
}

struct World {
    prototypes: Vec<Vec<f64>>,
    keywords: Vec<Vec<u32>>,
    /// Directedness keyword; an ordinary member of the keyword pool.
    wake: u32,
}

/// Rounds to 9 significant decimal digits, the precision of the dataset file.
pub fn quantize_sample(x: f64) -> f64 {
    format!("{x:.8e}").parse().expect("formatted float parses")
}

/// Unlabeled clean pairs with default generator settings.
pub fn generate_pairs(seed: u64, n: usize, class_count: usize, latent_dim: usize) -> Result<Vec<PairedSample>> {
    SynthSpec::new(class_count, latent_dim).generate(seed, n, None)
}

/// Clean pairs labeled for `task` with default generator settings.
pub fn generate_labeled_pairs(seed: u64, n: usize, class_count: usize, latent_dim: usize, task: Task) -> Result<Vec<PairedSample>> {
    SynthSpec::new(class_count, latent_dim).generate(seed, n, Some(task))
}
