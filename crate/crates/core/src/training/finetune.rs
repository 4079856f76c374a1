//! Downstream classification on top of the (optionally frozen) encoders.
//!
//! The head is a single affine map over `[h_audio ; h_text]`, the pooled
//! encoder outputs before projection, trained with softmax cross-entropy.

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::optim::{adamw_step, AdamState, ParamSlot};
use super::{FreezeMask, Task, TrainConfig};
use crate::data::PairedSample;
use crate::encoders::{audio_backward, encode_audio_traced, encode_text, text_backward, AffineMap, EncoderParams};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::linalg::log_sum_exp;
use crate::seed;

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub encoders: EncoderParams,
    pub head: AffineMap,
    pub task: Task,
}

impl Classifier {
    pub fn features(&self, sample: &PairedSample) -> Result<Vec<f64>> {
        let mut x = crate::encoders::encode_audio(&sample.audio, &self.encoders)?.0;
        x.extend(encode_text(&sample.text, &self.encoders)?.0);
        Ok(x)
    }

    pub fn logits(&self, sample: &PairedSample) -> Result<Vec<f64>> {
        Ok(self.head.apply(&self.features(sample)?))
    }

    /// Arg-max class; ties go to the smaller index.
    pub fn predict(&self, sample: &PairedSample) -> Result<u32> {
        let z = self.logits(sample)?;
        Ok((0..z.len()).fold(0, |b, j| if z[j] > z[b] { j } else { b }) as u32)
    }
}

fn check_labels(data: &[PairedSample], task: Task) -> Result<()> {
    for s in data {
        match s.label {
            None => {
                return Err(Error::InvalidParameter(format!("sample `{}` has no label", s.id)));
            }
            Some(l) if l as usize >= task.classes() => {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    classes: task.classes(),
                });
            }
            Some(_) => {}
        }
    }
    Ok(())
}

struct SampleGrad {
    loss: f64,
    head: AffineMap,
    encoders: Option<EncoderParams>,
}

fn sample_gradient(clf: &Classifier, sample: &PairedSample, freeze: FreezeMask, weight: f64) -> Result<SampleGrad> {
    let p = &clf.encoders;
    let (h_a, trace) = encode_audio_traced(&sample.audio, p)?;
    let h_t = encode_text(&sample.text, p)?;
    let mut x = h_a.0;
    let d = x.len();
    x.extend(h_t.0);
    let z = clf.head.apply(&x);
    let label = sample.label.expect("labels checked") as usize;
    let lse = log_sum_exp(z.iter().copied());
    let loss = lse - z[label];
    let dz: Vec<f64> = z
        .iter()
        .enumerate()
        .map(|(j, &zj)| weight * ((zj - lse).exp() - f64::from(u8::from(j == label))))
        .collect();
    let mut head = AffineMap::zeros(clf.head.out_dim(), clf.head.in_dim());
    let dx = clf.head.backward(&x, &dz, &mut head);
    let encoders = if freeze.audio_encoder_trainable || freeze.text_encoder_trainable {
        let mut g = p.zeros_like();
        if freeze.audio_encoder_trainable {
            audio_backward(&sample.audio, &trace, &dx[..d], p, &mut g);
        }
        if freeze.text_encoder_trainable {
            text_backward(&sample.text, &dx[d..], &mut g);
        }
        Some(g)
    } else {
        None
    };
    Ok(SampleGrad { loss, head, encoders })
}

/// Fine-tunes a classification head (and the unfrozen encoders) starting from
/// the checkpoint's encoder weights. Frozen encoder arrays are never touched.
pub fn finetune(
    ckpt: &Checkpoint,
    task: Task,
    freeze: FreezeMask,
    data: &[PairedSample],
    config: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<Classifier> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_labels(data, task)?;
    let d_enc = ckpt.params.config.d_enc;
    let mut head_rng = seed::rng(seed::mix(seed, 0x4EAD));
    let mut clf = Classifier {
        encoders: ckpt.params.clone(),
        head: AffineMap::random(task.classes(), 2 * d_enc, (2.0 * d_enc as f64).powf(-0.5), &mut head_rng),
        task,
    };
    let adam = config.adam();
    let mut state = AdamState::default();
    let bs = config.batch_size.min(data.len());
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(seed::mix(seed, 0xF17E_0000 + epoch as u64)));
        for chunk in order.chunks(bs) {
            let weight = 1.0 / chunk.len() as f64;
            let per_sample = exec
                .map(chunk, |&i| sample_gradient(&clf, &data[i], freeze, weight))
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            let mut head_grad = AffineMap::zeros(clf.head.out_dim(), clf.head.in_dim());
            let mut enc_grad = clf.encoders.zeros_like();
            let mut loss = 0.0;
            for g in &per_sample {
                loss += g.loss;
                crate::linalg::axpy(1.0, g.head.weight.as_slice(), head_grad.weight.as_mut_slice());
                crate::linalg::axpy(1.0, &g.head.bias, &mut head_grad.bias);
                if let Some(e) = &g.encoders {
                    enc_grad.accumulate(e);
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    step: 0,
                });
            }
            let mut slots = vec![
                ParamSlot {
                    name: "head.weight",
                    value: clf.head.weight.as_mut_slice(),
                    grad: head_grad.weight.as_slice(),
                    decay: true,
                    lr_scale: 1.0,
                },
                ParamSlot {
                    name: "head.bias",
                    value: &mut clf.head.bias,
                    grad: &head_grad.bias,
                    decay: true,
                    lr_scale: 1.0,
                },
            ];
            if freeze.audio_encoder_trainable {
                slots.push(ParamSlot {
                    name: "audio.weight",
                    value: clf.encoders.audio.weight.as_mut_slice(),
                    grad: enc_grad.audio.weight.as_slice(),
                    decay: true,
                    lr_scale: config.encoder_lr_scale,
                });
                slots.push(ParamSlot {
                    name: "audio.bias",
                    value: &mut clf.encoders.audio.bias,
                    grad: &enc_grad.audio.bias,
                    decay: true,
                    lr_scale: config.encoder_lr_scale,
                });
            }
            if freeze.text_encoder_trainable {
                slots.push(ParamSlot {
                    name: "text.embedding",
                    value: clf.encoders.token_embedding.as_mut_slice(),
                    grad: enc_grad.token_embedding.as_slice(),
                    decay: true,
                    lr_scale: config.encoder_lr_scale,
                });
            }
            adamw_step(&mut slots, &mut state, &adam)?;
        }
    }
    Ok(clf)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub task: Task,
    pub n: usize,
    pub acc: f64,
    /// Share of device-directed (label 1) samples predicted otherwise; binary
    /// task only, and only when the test set has positives.
    pub frr: Option<f64>,
    /// Mean per-class F1 over classes present in labels or predictions;
    /// intent task only.
    pub macro_f1: Option<f64>,
}

pub fn compute_metrics(task: Task, predictions: &[u32], labels: &[u32]) -> Result<Metrics> {
    if labels.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let n = labels.len();
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    let acc = correct as f64 / n as f64;
    let frr = match task {
        Task::Mdsd => {
            let positives = labels.iter().filter(|&&l| l == 1).count();
            let rejected = predictions.iter().zip(labels).filter(|&(&p, &l)| l == 1 && p != 1).count();
            (positives > 0).then(|| rejected as f64 / positives as f64)
        }
        Task::Mcic => None,
    };
    let macro_f1 = match task {
        Task::Mcic => {
            let mut classes: Vec<u32> = labels.iter().chain(predictions).copied().collect();
            classes.sort_unstable();
            classes.dedup();
            let f1s = classes.iter().map(|&c| {
                let tp = predictions.iter().zip(labels).filter(|&(&p, &l)| p == c && l == c).count() as f64;
                let fp = predictions.iter().zip(labels).filter(|&(&p, &l)| p == c && l != c).count() as f64;
                let fn_ = predictions.iter().zip(labels).filter(|&(&p, &l)| p != c && l == c).count() as f64;
                if tp == 0.0 {
                    0.0
                } else {
                    2.0 * tp / (2.0 * tp + fp + fn_)
                }
            });
            Some(f1s.sum::<f64>() / classes.len() as f64)
        }
        Task::Mdsd => None,
    };
    Ok(Metrics {
        task,
        n,
        acc,
        frr,
        macro_f1,
    })
}

pub fn evaluate(clf: &Classifier, test: &[PairedSample], exec: Exec) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    check_labels(test, clf.task)?;
    let predictions = exec.map(test, |s| clf.predict(s)).into_iter().collect::<Result<Vec<_>>>()?;
    let labels: Vec<u32> = test.iter().map(|s| s.label.expect("checked")).collect();
    compute_metrics(clf.task, &predictions, &labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
}

/// Fine-tunes and evaluates once per configured seed. With a parallel
/// policy the seeds run concurrently (each fine-tune then runs sequentially
/// inside); the results are identical either way.
pub fn finetune_seeds(
    ckpt: &Checkpoint,
    task: Task,
    freeze: FreezeMask,
    train: &[PairedSample],
    test: &[PairedSample],
    config: &TrainConfig,
    exec: Exec,
) -> Result<Vec<SeedResult>> {
    let inner = if exec.is_parallel() { Exec::Sequential } else { exec };
    exec.map(&config.seeds, |&seed| -> Result<SeedResult> {
        let clf = finetune(ckpt, task, freeze, train, config, seed, inner)?;
        Ok(SeedResult {
            seed,
            metrics: evaluate(&clf, test, inner)?,
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub size: usize,
    pub per_seed: Vec<SeedResult>,
    pub mean_acc: f64,
    pub min_acc: f64,
    pub max_acc: f64,
}

/// Fine-tunes on the first `size` training samples for each size and seed.
#[allow(clippy::too_many_arguments)]
pub fn data_size_sweep(
    ckpt: &Checkpoint,
    sizes: &[usize],
    task: Task,
    freeze: FreezeMask,
    train: &[PairedSample],
    test: &[PairedSample],
    config: &TrainConfig,
    exec: Exec,
) -> Result<Vec<SweepRow>> {
    if sizes.is_empty() {
        return Err(Error::InvalidParameter("no sweep sizes".into()));
    }
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParameter("sweep sizes must be strictly ascending".into()));
    }
    if let Some(&size) = sizes.iter().find(|&&s| s > train.len() || s == 0) {
        return Err(Error::SizeExceedsData {
            size,
            available: train.len(),
        });
    }
    sizes
        .iter()
        .map(|&size| {
            let per_seed = finetune_seeds(ckpt, task, freeze, &train[..size], test, config, exec)?;
            let accs: Vec<f64> = per_seed.iter().map(|r| r.metrics.acc).collect();
            Ok(SweepRow {
                size,
                mean_acc: accs.iter().sum::<f64>() / accs.len() as f64,
                min_acc: accs.iter().copied().fold(f64::INFINITY, f64::min),
                max_acc: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                per_seed,
            })
        })
        .collect()
}
