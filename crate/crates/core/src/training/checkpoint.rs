//! Binary checkpoint files.
//!
//! Little-endian throughout:
//!
//! ```text
//! "DSCK" | u32 version | u32 array count
//! per array: u16 name length | UTF-8 name | u8 rank | rank × u64 dims | f64 data
//! ```
//!
//! Both pretraining checkpoints and fine-tuned classifiers use this layout; the
//! scalar array `kind` tells them apart. Integer metadata such as seeds is
//! stored bit-for-bit in the f64 payload.

use std::collections::BTreeMap;
use std::path::Path;

use super::finetune::Classifier;
use super::optim::AdamState;
use super::{Task, TrainConfig};
use crate::encoders::{AffineMap, EncoderConfig, EncoderParams, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_PRETRAIN: f64 = 0.0;
const KIND_CLASSIFIER: f64 = 1.0;

/// Everything needed to resume pretraining exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub optimizer: AdamState,
    pub config: TrainConfig,
    /// Seed driving initialization and the per-epoch shuffles.
    pub seed: u64,
    pub epochs_done: usize,
}

impl Checkpoint {
    /// An untrained checkpoint: the initialization a run with `seed` starts from.
    pub fn initial(config: TrainConfig, encoder: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: EncoderParams::init(encoder, seed)?,
            optimizer: AdamState::default(),
            config,
            seed,
            epochs_done: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct NamedArray {
    name: String,
    dims: Vec<u64>,
    data: Vec<f64>,
}

impl NamedArray {
    fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self {
            name: name.into(),
            dims: dims.into_iter().map(|d| d as u64).collect(),
            data,
        }
    }

    fn scalar(name: impl Into<String>, v: f64) -> Self {
        Self::new(name, vec![], vec![v])
    }

    fn bits(name: impl Into<String>, v: u64) -> Self {
        Self::scalar(name, f64::from_bits(v))
    }
}

fn incompatible(msg: impl Into<String>) -> Error {
    Error::IncompatibleCheckpoint(msg.into())
}

fn encode(arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.dims.len() as u8);
        for d in &a.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| incompatible("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode(buf: &[u8]) -> Result<BTreeMap<String, NamedArray>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
        return Err(incompatible("bad magic"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(incompatible(format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| incompatible("array name is not UTF-8"))?
            .to_string();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= (buf.len() - r.pos) as u64)
            .ok_or_else(|| incompatible(format!("array `{name}` larger than the file")))? as usize;
        let raw = r.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        arrays.insert(name.clone(), NamedArray { name, dims, data });
    }
    if r.pos != buf.len() {
        return Err(incompatible("trailing bytes"));
    }
    Ok(arrays)
}

fn write_file(path: &Path, arrays: &[NamedArray]) -> Result<()> {
    std::fs::write(path, encode(arrays)).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<BTreeMap<String, NamedArray>> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&buf)
}

struct Arrays(BTreeMap<String, NamedArray>);

impl Arrays {
    fn get(&self, name: &str, dims: &[usize]) -> Result<&[f64]> {
        let a = self.0.get(name).ok_or_else(|| incompatible(format!("missing array `{name}`")))?;
        if a.dims.len() != dims.len() || a.dims.iter().zip(dims).any(|(&x, &y)| x != y as u64) {
            return Err(incompatible(format!("array `{name}` has dims {:?}, expected {dims:?}", a.dims)));
        }
        Ok(&a.data)
    }

    fn any(&self, name: &str) -> Result<&[f64]> {
        self.0
            .get(name)
            .map(|a| a.data.as_slice())
            .ok_or_else(|| incompatible(format!("missing array `{name}`")))
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.get(name, &[])?[0])
    }

    fn bits(&self, name: &str) -> Result<u64> {
        self.scalar(name).map(f64::to_bits)
    }

    fn kind(&self, expect: f64) -> Result<()> {
        let k = self.scalar("kind")?;
        if k != expect {
            return Err(incompatible(format!("file kind {k}, expected {expect}")));
        }
        Ok(())
    }
}

fn count(v: f64, what: &str) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v < 1e15 {
        Ok(v as usize)
    } else {
        Err(incompatible(format!("{what} = {v} is not a count")))
    }
}

fn encoder_arrays(p: &EncoderParams, out: &mut Vec<NamedArray>) {
    let c = &p.config;
    out.push(NamedArray::new(
        "encoder.config",
        vec![5],
        [c.window, c.stride, c.d_enc, c.d_proj, c.vocab_size].iter().map(|&v| v as f64).collect(),
    ));
    for (name, dims, data) in p.tensors() {
        out.push(NamedArray::new(name, dims, data.to_vec()));
    }
}

fn read_encoder(a: &Arrays) -> Result<EncoderParams> {
    let c = a.get("encoder.config", &[5])?;
    let config = EncoderConfig {
        window: count(c[0], "window")?,
        stride: count(c[1], "stride")?,
        d_enc: count(c[2], "d_enc")?,
        d_proj: count(c[3], "d_proj")?,
        vocab_size: count(c[4], "vocab_size")?,
    };
    config.validate().map_err(|e| incompatible(e.to_string()))?;
    let mut p = EncoderParams::zeros(config);
    let shapes: Vec<Vec<usize>> = p.tensors().into_iter().map(|(_, d, _)| d).collect();
    for ((name, dst), dims) in p.tensors_mut().into_iter().zip(shapes) {
        dst.copy_from_slice(a.get(name, &dims)?);
    }
    Ok(p)
}

fn config_arrays(c: &TrainConfig, out: &mut Vec<NamedArray>) {
    out.push(NamedArray::new(
        "config.train",
        vec![11],
        vec![
            c.learning_rate,
            c.batch_size as f64,
            c.epochs as f64,
            c.lambda,
            c.gamma,
            c.hard_negatives as f64,
            c.weight_decay,
            c.beta1,
            c.beta2,
            c.epsilon,
            c.encoder_lr_scale,
        ],
    ));
    out.push(NamedArray::new(
        "config.seeds",
        vec![c.seeds.len()],
        c.seeds.iter().map(|&s| f64::from_bits(s)).collect(),
    ));
}

fn read_config(a: &Arrays) -> Result<TrainConfig> {
    let t = a.get("config.train", &[11])?;
    Ok(TrainConfig {
        learning_rate: t[0],
        batch_size: count(t[1], "batch_size")?,
        epochs: count(t[2], "epochs")?,
        lambda: t[3],
        gamma: t[4],
        hard_negatives: count(t[5], "hard_negatives")?,
        weight_decay: t[6],
        beta1: t[7],
        beta2: t[8],
        epsilon: t[9],
        encoder_lr_scale: t[10],
        seeds: a.any("config.seeds")?.iter().map(|v| v.to_bits()).collect(),
    })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let mut arrays = vec![NamedArray::scalar("kind", KIND_PRETRAIN)];
    encoder_arrays(&ckpt.params, &mut arrays);
    arrays.push(NamedArray::scalar("optim.step", ckpt.optimizer.step as f64));
    for (name, (m, v)) in &ckpt.optimizer.moments {
        arrays.push(NamedArray::new(format!("optim.m.{name}"), vec![m.len()], m.clone()));
        arrays.push(NamedArray::new(format!("optim.v.{name}"), vec![v.len()], v.clone()));
    }
    config_arrays(&ckpt.config, &mut arrays);
    arrays.push(NamedArray::bits("rng.seed", ckpt.seed));
    arrays.push(NamedArray::scalar("rng.epoch", ckpt.epochs_done as f64));
    write_file(path.as_ref(), &arrays)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let a = Arrays(read_file(path.as_ref())?);
    a.kind(KIND_PRETRAIN)?;
    let params = read_encoder(&a)?;
    let mut optimizer = AdamState {
        step: count(a.scalar("optim.step")?, "optim.step")? as u64,
        moments: BTreeMap::new(),
    };
    for name in PARAM_NAMES {
        let m = a.0.get(&format!("optim.m.{name}"));
        let v = a.0.get(&format!("optim.v.{name}"));
        match (m, v) {
            (Some(m), Some(v)) if m.data.len() == v.data.len() => {
                optimizer.moments.insert(name.to_string(), (m.data.clone(), v.data.clone()));
            }
            (None, None) => {}
            _ => return Err(incompatible(format!("optimizer moments for `{name}` are incomplete"))),
        }
    }
    Ok(Checkpoint {
        params,
        optimizer,
        config: read_config(&a)?,
        seed: a.bits("rng.seed")?,
        epochs_done: count(a.scalar("rng.epoch")?, "rng.epoch")?,
    })
}

pub fn save_classifier(path: impl AsRef<Path>, clf: &Classifier) -> Result<()> {
    let mut arrays = vec![NamedArray::scalar("kind", KIND_CLASSIFIER)];
    encoder_arrays(&clf.encoders, &mut arrays);
    let task = match clf.task {
        Task::Mdsd => 0.0,
        Task::Mcic => 1.0,
    };
    arrays.push(NamedArray::scalar("task", task));
    let (rows, cols) = clf.head.weight.shape();
    arrays.push(NamedArray::new("head.weight", vec![rows, cols], clf.head.weight.as_slice().to_vec()));
    arrays.push(NamedArray::new("head.bias", vec![rows], clf.head.bias.clone()));
    write_file(path.as_ref(), &arrays)
}

pub fn load_classifier(path: impl AsRef<Path>) -> Result<Classifier> {
    let a = Arrays(read_file(path.as_ref())?);
    a.kind(KIND_CLASSIFIER)?;
    let encoders = read_encoder(&a)?;
    let task = match a.scalar("task")? {
        0.0 => Task::Mdsd,
        1.0 => Task::Mcic,
        t => return Err(incompatible(format!("unknown task code {t}"))),
    };
    let classes = task.classes();
    let width = 2 * encoders.config.d_enc;
    let head = AffineMap {
        weight: Matrix::from_vec(classes, width, a.get("head.weight", &[classes, width])?.to_vec()),
        bias: a.get("head.bias", &[classes])?.to_vec(),
    };
    Ok(Classifier { encoders, head, task })
}
