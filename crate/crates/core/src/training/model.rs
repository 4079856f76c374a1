//! Full forward/backward of the contrastive objective through the projection
//! heads and both encoders.

use crate::data::PairedSample;
use crate::encoders::{
    audio_backward, encode_audio_traced, encode_text, project_backward, project_traced, text_backward, AudioTrace, EncoderParams,
};
use crate::error::Result;
use crate::exec::Exec;
use crate::linalg::Matrix;
use crate::objectives::{
    backward_with_negatives, mine_hard_negatives, objective_with_negatives, similarity_matrix, EmbeddingBatch, HardNegativeSet,
    LossBreakdown,
};

struct PairForward {
    h_audio: Vec<f64>,
    trace: AudioTrace,
    h_text: Vec<f64>,
    z_audio: Vec<f64>,
    r_audio: f64,
    z_text: Vec<f64>,
    r_text: f64,
}

fn forward_pair(sample: &PairedSample, p: &EncoderParams) -> Result<PairForward> {
    let (h_audio, trace) = encode_audio_traced(&sample.audio, p)?;
    let h_text = encode_text(&sample.text, p)?;
    let (z_audio, r_audio) = project_traced(&h_audio.0, &p.audio_head)?;
    let (z_text, r_text) = project_traced(&h_text.0, &p.text_head)?;
    Ok(PairForward {
        h_audio: h_audio.0,
        trace,
        h_text: h_text.0,
        z_audio,
        r_audio,
        z_text,
        r_text,
    })
}

fn forward_batch(p: &EncoderParams, samples: &[&PairedSample], exec: Exec) -> Result<(Vec<PairForward>, EmbeddingBatch)> {
    let fwd = exec.map(samples, |s| forward_pair(s, p)).into_iter().collect::<Result<Vec<_>>>()?;
    let d = p.config.d_proj;
    let mut za = Matrix::zeros(fwd.len(), d);
    let mut zt = Matrix::zeros(fwd.len(), d);
    for (i, f) in fwd.iter().enumerate() {
        za.row_mut(i).copy_from_slice(&f.z_audio);
        zt.row_mut(i).copy_from_slice(&f.z_text);
    }
    let batch = EmbeddingBatch::new(za, zt)?;
    Ok((fwd, batch))
}

/// Projected unit embeddings of a batch of pairs.
pub fn embed_batch(p: &EncoderParams, samples: &[&PairedSample], exec: Exec) -> Result<EmbeddingBatch> {
    forward_batch(p, samples, exec).map(|(_, b)| b)
}

#[derive(Clone, Debug)]
pub struct BatchGradients {
    pub loss: LossBreakdown,
    pub negatives: HardNegativeSet,
    pub grads: EncoderParams,
}

/// Loss and exact parameter gradients for one batch. Hard negatives are mined
/// from the current similarities and then held fixed.
pub fn batch_gradients(p: &EncoderParams, samples: &[&PairedSample], lambda: f64, gamma: f64, k: usize, exec: Exec) -> Result<BatchGradients> {
    let (fwd, batch) = forward_batch(p, samples, exec)?;
    let s = similarity_matrix(&batch, p.log_scale)?;
    let negatives = mine_hard_negatives(&s, k)?;
    let obj = backward_with_negatives(&batch, &s, negatives, lambda, gamma)?;

    let per_sample = exec.map_range(samples.len(), |i| {
        let f = &fwd[i];
        let sample = samples[i];
        let mut g = p.zeros_like();
        let dh_a = project_backward(&f.h_audio, &p.audio_head, &f.z_audio, f.r_audio, obj.d_audio.row(i), &mut g.audio_head);
        audio_backward(&sample.audio, &f.trace, &dh_a, p, &mut g);
        let dh_t = project_backward(&f.h_text, &p.text_head, &f.z_text, f.r_text, obj.d_text.row(i), &mut g.text_head);
        text_backward(&sample.text, &dh_t, &mut g);
        g
    });
    // Fixed-order reduction keeps results independent of the execution policy.
    let mut grads = p.zeros_like();
    for g in &per_sample {
        grads.accumulate(g);
    }
    grads.log_scale = obj.d_log_scale;
    Ok(BatchGradients {
        loss: obj.loss,
        negatives: obj.negatives,
        grads,
    })
}

/// Forward value of the objective with the given negatives held fixed.
pub fn batch_objective(
    p: &EncoderParams,
    samples: &[&PairedSample],
    negatives: &HardNegativeSet,
    lambda: f64,
    gamma: f64,
) -> Result<LossBreakdown> {
    let (_, batch) = forward_batch(p, samples, Exec::Sequential)?;
    let s = similarity_matrix(&batch, p.log_scale)?;
    objective_with_negatives(&s, negatives, lambda, gamma)
}
