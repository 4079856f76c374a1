//! Contrastive pretraining loop.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::model::{batch_gradients, embed_batch};
use super::optim::{adamw_step, AdamState, ParamSlot};
use super::TrainConfig;
use crate::data::PairedSample;
use crate::encoders::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objectives::{info_nce, retrieval_hits, similarity_matrix, LossBreakdown, MAX_LOGIT_SCALE};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based.
    pub epoch: usize,
    /// 1-based within the epoch.
    pub step: usize,
    pub loss: LossBreakdown,
    /// `exp(log_scale)` after the update.
    pub logit_scale: f64,
}

/// Stateful trainer; everything needed to resume lives in its [`Checkpoint`].
#[derive(Clone, Debug)]
pub struct Trainer {
    params: EncoderParams,
    optimizer: AdamState,
    config: TrainConfig,
    seed: u64,
    epochs_done: usize,
    exec: Exec,
}

impl Trainer {
    pub fn new(config: TrainConfig, encoder: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            params: EncoderParams::init(encoder, seed)?,
            optimizer: AdamState::default(),
            config,
            seed,
            epochs_done: 0,
            exec: Exec::default(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        Ok(Self {
            params: ckpt.params,
            optimizer: ckpt.optimizer,
            config: ckpt.config,
            seed: ckpt.seed,
            epochs_done: ckpt.epochs_done,
            exec: Exec::default(),
        })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn epochs_done(&self) -> usize {
        self.epochs_done
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            config: self.config.clone(),
            seed: self.seed,
            epochs_done: self.epochs_done,
        }
    }

    /// Sample order for a given epoch; a pure function of (seed, epoch).
    fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed::mix(self.seed, 0xE90C_0000 + epoch as u64)));
        order
    }

    /// One pass over `data` in shuffled full batches (a trailing partial
    /// batch is skipped).
    pub fn run_epoch(&mut self, data: &[PairedSample]) -> Result<Vec<StepRecord>> {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let bs = self.config.batch_size;
        if data.len() < bs {
            return Err(Error::InvalidParameter(format!(
                "dataset of {} pairs is smaller than one batch of {bs}",
                data.len()
            )));
        }
        let epoch = self.epochs_done + 1;
        let order = self.epoch_order(epoch, data.len());
        let adam = self.config.adam();
        let max_log_scale = MAX_LOGIT_SCALE.ln();
        let mut log = Vec::with_capacity(data.len() / bs);
        for (step, chunk) in order.chunks_exact(bs).enumerate() {
            let batch: Vec<&PairedSample> = chunk.iter().map(|&i| &data[i]).collect();
            let out = batch_gradients(
                &self.params,
                &batch,
                self.config.lambda,
                self.config.gamma,
                self.config.hard_negatives,
                self.exec,
            )?;
            if !out.loss.total.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, step: step + 1 });
            }
            let grads = out.grads.tensors();
            let mut slots: Vec<ParamSlot<'_>> = self
                .params
                .tensors_mut()
                .into_iter()
                .zip(&grads)
                .map(|((name, value), (_, _, grad))| ParamSlot {
                    name,
                    value,
                    grad,
                    decay: name != "logit_scale",
                    lr_scale: 1.0,
                })
                .collect();
            adamw_step(&mut slots, &mut self.optimizer, &adam)?;
            self.params.log_scale = self.params.log_scale.min(max_log_scale);
            log.push(StepRecord {
                epoch,
                step: step + 1,
                loss: out.loss,
                logit_scale: self.params.log_scale.exp(),
            });
        }
        self.epochs_done = epoch;
        Ok(log)
    }
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub log: Vec<StepRecord>,
}

impl PretrainRun {
    /// Mean total loss per epoch, in epoch order.
    pub fn epoch_means(&self) -> Vec<f64> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.log {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.loss.total;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.loss.total, 1)),
            }
        }
        out.into_iter().map(|(_, s, n)| s / n as f64).collect()
    }
}

/// Trains for `config.epochs` epochs from a fresh initialization seeded by
/// the first configured seed.
pub fn pretrain(config: &TrainConfig, encoder: EncoderConfig, data: &[PairedSample], exec: Exec) -> Result<PretrainRun> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut trainer = Trainer::new(config.clone(), encoder, config.seeds[0])?.with_exec(exec);
    let mut log = Vec::new();
    for _ in 0..config.epochs {
        log.extend(trainer.run_epoch(data)?);
    }
    Ok(PretrainRun {
        checkpoint: trainer.checkpoint(),
        log,
    })
}

pub const LOSS_LOG_HEADER: &str = "epoch\tstep\tL_a\tL_t\tL_a*\tL_t*\ttotal\texp(s)";

/// Tab-separated loss log, one record per optimizer step.
pub fn write_loss_log(path: impl AsRef<Path>, log: &[StepRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::with_capacity(64 * (log.len() + 1));
    text.push_str(LOSS_LOG_HEADER);
    text.push('\n');
    for r in log {
        let l = &r.loss;
        text.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            r.epoch, r.step, l.l_a, l.l_t, l.l_a_hard, l.l_t_hard, l.total, r.logit_scale
        ));
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Held-out alignment quality over consecutive batches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlignmentReport {
    /// Mean of `(L_a + L_t) / 2` over batches.
    pub mean_info_nce: f64,
    /// Audio-to-text top-1 accuracy within each batch.
    pub retrieval_accuracy: f64,
    pub batches: usize,
}

pub fn alignment_report(p: &EncoderParams, data: &[PairedSample], batch_size: usize, exec: Exec) -> Result<AlignmentReport> {
    if batch_size < 2 {
        return Err(Error::BatchTooSmall(batch_size));
    }
    let refs: Vec<&PairedSample> = data.iter().collect();
    let chunks: Vec<&[&PairedSample]> = refs.chunks_exact(batch_size).collect();
    if chunks.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_batch = exec
        .map(&chunks, |chunk| -> Result<(f64, usize)> {
            let batch = embed_batch(p, chunk, Exec::Sequential)?;
            let s = similarity_matrix(&batch, p.log_scale)?;
            let (l_a, l_t) = info_nce(&s)?;
            Ok(((l_a + l_t) / 2.0, retrieval_hits(&s)))
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let batches = per_batch.len();
    let loss = per_batch.iter().map(|r| r.0).sum::<f64>() / batches as f64;
    let hits: usize = per_batch.iter().map(|r| r.1).sum();
    Ok(AlignmentReport {
        mean_info_nce: loss,
        retrieval_accuracy: hits as f64 / (batches * batch_size) as f64,
        batches,
    })
}
