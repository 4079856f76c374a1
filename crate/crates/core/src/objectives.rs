//! Contrastive objective: scaled cosine similarities, symmetric InfoNCE, top-K
//! hard-negative mining, the hard-negative matching loss and their weighted
//! sum, with closed-form gradients.
//!
//! All per-anchor losses are reduced by the arithmetic mean over the batch.

use crate::error::{Error, Result};
use crate::linalg::{log_sum_exp, norm, Matrix};

/// Upper bound on `exp(log_scale)`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

/// Projected, unit-normalized embeddings of both modalities; row `i` of each
/// matrix belongs to the same pair.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    audio: Matrix,
    text: Matrix,
}

impl EmbeddingBatch {
    pub fn new(audio: Matrix, text: Matrix) -> Result<Self> {
        if audio.shape() != text.shape() {
            return Err(Error::ShapeMismatch(format!(
                "audio batch {:?} vs text batch {:?}",
                audio.shape(),
                text.shape()
            )));
        }
        for (name, m) in [("audio", &audio), ("text", &text)] {
            for i in 0..m.rows() {
                let r = norm(m.row(i));
                if (r - 1.0).abs() > 1e-6 {
                    return Err(Error::InvalidParameter(format!("{name} row {i} has norm {r}, expected 1")));
                }
            }
        }
        Ok(Self { audio, text })
    }

    pub fn from_rows(audio: &[Vec<f64>], text: &[Vec<f64>]) -> Result<Self> {
        Self::new(Matrix::from_rows(audio), Matrix::from_rows(text))
    }

    pub fn audio(&self) -> &Matrix {
        &self.audio
    }

    pub fn text(&self) -> &Matrix {
        &self.text
    }

    pub fn len(&self) -> usize {
        self.audio.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The same batch with the modalities exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            audio: self.text.clone(),
            text: self.audio.clone(),
        }
    }
}

/// `scores[i][j] = scale · ⟨audio_i, text_j⟩`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    scores: Matrix,
    scale: f64,
}

impl SimilarityMatrix {
    /// Wraps an arbitrary square score matrix (scale 1). Handy for testing the
    /// losses directly on logits.
    pub fn from_scores(scores: Matrix) -> Result<Self> {
        if scores.rows() != scores.cols() {
            return Err(Error::ShapeMismatch(format!("similarity matrix {:?} is not square", scores.shape())));
        }
        if !scores.is_finite() {
            return Err(Error::NonFiniteValue("similarity"));
        }
        Ok(Self { scores, scale: 1.0 })
    }

    pub fn scores(&self) -> &Matrix {
        &self.scores
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.scores.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn similarity_matrix(batch: &EmbeddingBatch, log_scale: f64) -> Result<SimilarityMatrix> {
    let scale = log_scale.exp();
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidParameter(format!("logit scale exp({log_scale}) is not a positive finite number")));
    }
    let mut scores = batch.audio.matmul_t(&batch.text);
    scores.as_mut_slice().iter_mut().for_each(|v| *v *= scale);
    Ok(SimilarityMatrix { scores, scale })
}

fn row_loss(s: &Matrix, i: usize) -> f64 {
    log_sum_exp(s.row(i).iter().copied()) - s[(i, i)]
}

fn col_loss(s: &Matrix, i: usize) -> f64 {
    log_sum_exp((0..s.rows()).map(|j| s[(j, i)])) - s[(i, i)]
}

/// Symmetric InfoNCE: `(L_a, L_t)`, audio-to-text over rows and
/// text-to-audio over columns.
pub fn info_nce(s: &SimilarityMatrix) -> Result<(f64, f64)> {
    let n = s.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let m = &s.scores;
    let l_a = (0..n).map(|i| row_loss(m, i)).sum::<f64>() / n as f64;
    let l_t = (0..n).map(|i| col_loss(m, i)).sum::<f64>() / n as f64;
    Ok((l_a.max(0.0), l_t.max(0.0)))
}

/// Per anchor, the K most similar non-matching indices on each side.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardNegativeSet {
    /// `text[i]`: text indices k ≠ i with the largest `S[i][k]`, descending.
    pub text: Vec<Vec<usize>>,
    /// `audio[i]`: audio indices k ≠ i with the largest `S[k][i]`, descending.
    pub audio: Vec<Vec<usize>>,
}

impl HardNegativeSet {
    pub fn k(&self) -> usize {
        self.text.first().map_or(0, Vec::len)
    }

    fn check(&self, n: usize) -> Result<()> {
        if self.text.len() != n || self.audio.len() != n {
            return Err(Error::InconsistentNegatives(format!(
                "{} text / {} audio anchors for a batch of {n}",
                self.text.len(),
                self.audio.len()
            )));
        }
        for (side, sets) in [("text", &self.text), ("audio", &self.audio)] {
            for (i, set) in sets.iter().enumerate() {
                if set.is_empty() {
                    return Err(Error::InconsistentNegatives(format!("{side} anchor {i} has no negatives")));
                }
                for &k in set {
                    if k >= n {
                        return Err(Error::InconsistentNegatives(format!("{side} anchor {i}: index {k} out of range")));
                    }
                    if k == i {
                        return Err(Error::InconsistentNegatives(format!("{side} anchor {i}: negative equals anchor")));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest values, excluding `skip`; ties (including
/// `-0.0` against `0.0`) go to the smaller index. Values must be finite.
fn top_k(values: impl Iterator<Item = f64>, skip: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<(usize, f64)> = values.enumerate().filter(|&(j, _)| j != skip).collect();
    idx.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite scores").then(a.0.cmp(&b.0)));
    idx.truncate(k);
    idx.into_iter().map(|(j, _)| j).collect()
}

pub fn mine_hard_negatives(s: &SimilarityMatrix, k: usize) -> Result<HardNegativeSet> {
    let n = s.len();
    if k == 0 {
        return Err(Error::InvalidParameter("K must be at least 1".into()));
    }
    if k > n.saturating_sub(1) {
        return Err(Error::NotEnoughNegatives {
            k,
            available: n.saturating_sub(1),
        });
    }
    let m = &s.scores;
    let text = (0..n).map(|i| top_k(m.row(i).iter().copied(), i, k)).collect();
    let audio = (0..n).map(|i| top_k((0..n).map(|j| m[(j, i)]), i, k)).collect();
    Ok(HardNegativeSet { text, audio })
}

/// Hard-negative matching loss `(L_a*, L_t*)`: each anchor's positive is
/// contrasted only against its mined negatives.
pub fn lam_loss(s: &SimilarityMatrix, negs: &HardNegativeSet) -> Result<(f64, f64)> {
    let n = s.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    negs.check(n)?;
    let m = &s.scores;
    let mut l_a = 0.0;
    let mut l_t = 0.0;
    for i in 0..n {
        let pos = m[(i, i)];
        l_a += log_sum_exp(std::iter::once(pos).chain(negs.text[i].iter().map(|&k| m[(i, k)]))) - pos;
        l_t += log_sum_exp(std::iter::once(pos).chain(negs.audio[i].iter().map(|&k| m[(k, i)]))) - pos;
    }
    Ok(((l_a / n as f64).max(0.0), (l_t / n as f64).max(0.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_a: f64,
    pub l_t: f64,
    pub l_a_hard: f64,
    pub l_t_hard: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub total: f64,
}

/// `total = λ(L_a + L_t) + γ(L_a* + L_t*)`.
pub fn total_loss(l_a: f64, l_t: f64, l_a_hard: f64, l_t_hard: f64, lambda: f64, gamma: f64) -> Result<LossBreakdown> {
    if lambda < 0.0 || gamma < 0.0 || !lambda.is_finite() || !gamma.is_finite() {
        return Err(Error::NegativeWeight(format!("λ = {lambda}, γ = {gamma}")));
    }
    for (name, v) in [("L_a", l_a), ("L_t", l_t), ("L_a*", l_a_hard), ("L_t*", l_t_hard)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::InvalidParameter(format!("{name} = {v} must be finite and non-negative")));
        }
    }
    Ok(LossBreakdown {
        l_a,
        l_t,
        l_a_hard,
        l_t_hard,
        lambda,
        gamma,
        total: lambda * (l_a + l_t) + gamma * (l_a_hard + l_t_hard),
    })
}

/// Forward pass of the full objective for a fixed negative set.
pub fn objective_with_negatives(s: &SimilarityMatrix, negs: &HardNegativeSet, lambda: f64, gamma: f64) -> Result<LossBreakdown> {
    let (l_a, l_t) = info_nce(s)?;
    let (l_a_hard, l_t_hard) = lam_loss(s, negs)?;
    total_loss(l_a, l_t, l_a_hard, l_t_hard, lambda, gamma)
}

/// `∂total/∂S` for fixed negatives.
pub fn logit_gradient(s: &SimilarityMatrix, negs: &HardNegativeSet, lambda: f64, gamma: f64) -> Result<Matrix> {
    let n = s.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    negs.check(n)?;
    let m = &s.scores;
    let inv_n = 1.0 / n as f64;
    let mut g = Matrix::zeros(n, n);

    if lambda != 0.0 {
        let w = lambda * inv_n;
        for i in 0..n {
            let lse = log_sum_exp(m.row(i).iter().copied());
            for j in 0..n {
                g[(i, j)] += w * (m[(i, j)] - lse).exp();
            }
            g[(i, i)] -= w;

            let lse = log_sum_exp((0..n).map(|j| m[(j, i)]));
            for j in 0..n {
                g[(j, i)] += w * (m[(j, i)] - lse).exp();
            }
            g[(i, i)] -= w;
        }
    }
    if gamma != 0.0 {
        let w = gamma * inv_n;
        for i in 0..n {
            let pos = m[(i, i)];
            let ts = &negs.text[i];
            let lse = log_sum_exp(std::iter::once(pos).chain(ts.iter().map(|&k| m[(i, k)])));
            g[(i, i)] += w * ((pos - lse).exp() - 1.0);
            for &k in ts {
                g[(i, k)] += w * (m[(i, k)] - lse).exp();
            }

            let as_ = &negs.audio[i];
            let lse = log_sum_exp(std::iter::once(pos).chain(as_.iter().map(|&k| m[(k, i)])));
            g[(i, i)] += w * ((pos - lse).exp() - 1.0);
            for &k in as_ {
                g[(k, i)] += w * (m[(k, i)] - lse).exp();
            }
        }
    }
    Ok(g)
}

/// Gradients of the total objective w.r.t. both embedding matrices and the
/// log scale. The mined indices are treated as constants.
#[derive(Clone, Debug)]
pub struct ObjectiveGrads {
    pub loss: LossBreakdown,
    pub negatives: HardNegativeSet,
    pub d_audio: Matrix,
    pub d_text: Matrix,
    pub d_log_scale: f64,
}

pub fn loss_backward(batch: &EmbeddingBatch, log_scale: f64, lambda: f64, gamma: f64, k: usize) -> Result<ObjectiveGrads> {
    let s = similarity_matrix(batch, log_scale)?;
    let negatives = mine_hard_negatives(&s, k)?;
    backward_with_negatives(batch, &s, negatives, lambda, gamma)
}

pub fn backward_with_negatives(
    batch: &EmbeddingBatch,
    s: &SimilarityMatrix,
    negatives: HardNegativeSet,
    lambda: f64,
    gamma: f64,
) -> Result<ObjectiveGrads> {
    let loss = objective_with_negatives(s, &negatives, lambda, gamma)?;
    let g = logit_gradient(s, &negatives, lambda, gamma)?;
    // S = e^s · A Tᵀ
    let d_log_scale = g.as_slice().iter().zip(s.scores.as_slice()).map(|(a, b)| a * b).sum();
    let mut d_raw = g;
    d_raw.as_mut_slice().iter_mut().for_each(|v| *v *= s.scale);
    let d_audio = d_raw.matmul(&batch.text);
    let d_text = d_raw.transpose().matmul(&batch.audio);
    Ok(ObjectiveGrads {
        loss,
        negatives,
        d_audio,
        d_text,
        d_log_scale,
    })
}

/// Audio-to-text top-1 retrieval hits within the batch (ties resolve to the
/// smaller index).
pub fn retrieval_hits(s: &SimilarityMatrix) -> usize {
    let m = &s.scores;
    (0..s.len())
        .filter(|&i| {
            let best = (0..s.len()).fold(0, |b, j| if m[(i, j)] > m[(i, b)] { j } else { b });
            best == i
        })
        .count()
}
