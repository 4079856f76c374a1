//! Character (token) error rate: measurement and synthetic injection.

use rand::Rng as _;

use super::{PairedSample, Source};
use crate::encoders::{TokenSequence, MAX_TEXT_LEN};
use crate::error::{Error, Result};
use crate::seed;

/// Relative probabilities of substitution, insertion and deletion.
pub const EDIT_MIX: [f64; 3] = [0.70, 0.15, 0.15];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CerReport {
    pub reference_len: usize,
    pub distance: usize,
    pub cer: f64,
}

impl CerReport {
    fn new(reference_len: usize, distance: usize) -> Self {
        Self {
            reference_len,
            distance,
            cer: distance as f64 / reference_len as f64,
        }
    }

    /// Pools several reports into one corpus-level rate.
    pub fn corpus<I: IntoIterator<Item = CerReport>>(reports: I) -> Result<Self> {
        let (len, dist) = reports
            .into_iter()
            .fold((0, 0), |(l, d), r| (l + r.reference_len, d + r.distance));
        if len == 0 {
            return Err(Error::UndefinedCer);
        }
        Ok(Self::new(len, dist))
    }
}

/// Levenshtein distance with unit costs divided by the reference length.
pub fn measure_cer(reference: &TokenSequence, hypothesis: &TokenSequence) -> Result<CerReport> {
    measure_tokens(reference.tokens(), hypothesis.tokens())
}

pub(crate) fn measure_tokens(reference: &[u32], hypothesis: &[u32]) -> Result<CerReport> {
    if reference.is_empty() {
        return Err(Error::UndefinedCer);
    }
    let distance = strsim::generic_levenshtein(&reference.to_vec(), &hypothesis.to_vec());
    Ok(CerReport::new(reference.len(), distance))
}

/// Corrupts `text` so that the expected number of edits per reference token is
/// `target_cer`. Each token independently receives an edit with probability
/// `target_cer`, drawn from [`EDIT_MIX`]. Substituted and inserted tokens are
/// uniform over the vocabulary (substitutions never reproduce the original).
/// The result is truncated to the text length cap, and a sequence that would
/// end up empty keeps a substitution for its first token instead.
pub fn inject_cer(text: &TokenSequence, target_cer: f64, vocab_size: usize, seed: u64) -> Result<TokenSequence> {
    if !(0.0..=1.0).contains(&target_cer) {
        return Err(Error::InvalidParameter(format!("target CER {target_cer} outside [0, 1]")));
    }
    if vocab_size < 2 {
        return Err(Error::InvalidParameter("vocabulary needs at least two tokens".into()));
    }
    if let Some(&token) = text.tokens().iter().find(|&&t| t as usize >= vocab_size) {
        return Err(Error::TokenOutOfVocabulary { token, vocab_size });
    }
    if target_cer == 0.0 {
        return Ok(text.clone());
    }
    let mut rng = seed::rng(seed::mix(seed, 0xCE12));
    let other = |rng: &mut seed::Rng, t: u32| {
        let r = rng.random_range(0..vocab_size as u32 - 1);
        if r >= t {
            r + 1
        } else {
            r
        }
    };
    let mut out = Vec::with_capacity(text.len() + 4);
    for &t in text.tokens() {
        if rng.random::<f64>() >= target_cer {
            out.push(t);
            continue;
        }
        let u: f64 = rng.random();
        if u < EDIT_MIX[0] {
            out.push(other(&mut rng, t));
        } else if u < EDIT_MIX[0] + EDIT_MIX[1] {
            out.push(t);
            out.push(rng.random_range(0..vocab_size as u32));
        }
    }
    if out.is_empty() {
        let first = text.tokens()[0];
        out.push(other(&mut rng, first));
    }
    out.truncate(MAX_TEXT_LEN);
    TokenSequence::new(out)
}

/// ASR-style copies of `samples`: text corrupted at `target_cer` with a
/// per-sample seed derived from `seed` and the sample id, source set to ASR.
pub fn asr_transcripts(samples: &[PairedSample], target_cer: f64, vocab_size: usize, seed: u64) -> Result<Vec<PairedSample>> {
    samples
        .iter()
        .map(|s| {
            Ok(PairedSample {
                text: inject_cer(&s.text, target_cer, vocab_size, seed::mix_str(seed, &s.id))?,
                source: Source::Asr,
                ..s.clone()
            })
        })
        .collect()
}
