//! Paired audio/text samples, the synthetic corpus generator, ASR-style
//! error injection, splitting and on-disk storage.

mod cer;
mod io;
mod synth;

pub use cer::{asr_transcripts, inject_cer, measure_cer, CerReport, EDIT_MIX};
pub use io::{read_dataset, write_dataset, DATASET_HEADER};
pub use synth::{generate_labeled_pairs, generate_pairs, quantize_sample, SynthSpec};

use rand::seq::SliceRandom;

use crate::encoders::{TokenSequence, Waveform};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    /// Device-directed speech detection; label 1 is device-directed.
    Mdsd,
    /// 15-way intent classification.
    Mcic,
}

impl Task {
    pub fn classes(self) -> usize {
        match self {
            Task::Mdsd => 2,
            Task::Mcic => 15,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Mdsd => "mdsd",
            Task::Mcic => "mcic",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mdsd" => Ok(Task::Mdsd),
            "mcic" => Ok(Task::Mcic),
            other => Err(format!("unknown task `{other}` (expected mdsd or mcic)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    Asr,
    Manual,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Asr => "asr",
            Source::Manual => "manual",
        }
    }
}

impl std::str::FromStr for Source {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "asr" => Ok(Source::Asr),
            "manual" => Ok(Source::Manual),
            other => Err(format!("unknown source `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub id: String,
    pub audio: Waveform,
    pub text: TokenSequence,
    /// Class id; present only for downstream-task data.
    pub label: Option<u32>,
    pub source: Source,
}

/// Train/valid/test counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSpec {
    pub const fn new(train: usize, valid: usize, test: usize) -> Self {
        Self { train, valid, test }
    }

    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }

    /// Binary device-directed task, ASR-only partition (10,000/5,000/4,800) ÷ 10.
    pub const MDSD_ASR_ONLY: SplitSpec = SplitSpec::new(1_000, 500, 480);
    /// 15-intent task partition (6,400/2,000/1,800) ÷ 10.
    pub const MCIC: SplitSpec = SplitSpec::new(640, 200, 180);
}

/// Deterministic shuffled partition into (train, valid, test).
pub fn split_dataset(
    data: &[PairedSample],
    spec: SplitSpec,
    seed: u64,
) -> Result<(Vec<PairedSample>, Vec<PairedSample>, Vec<PairedSample>)> {
    if spec.total() != data.len() {
        return Err(Error::SplitMismatch {
            counts: [spec.train, spec.valid, spec.test],
            size: data.len(),
        });
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut seed::rng(seed::mix(seed, 0x5B11)));
    let pick = |range: std::ops::Range<usize>| order[range].iter().map(|&i| data[i].clone()).collect::<Vec<_>>();
    let a = spec.train;
    let b = a + spec.valid;
    Ok((pick(0..a), pick(a..b), pick(b..data.len())))
}
