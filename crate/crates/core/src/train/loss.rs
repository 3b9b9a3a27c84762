//! In-batch contrastive objective over a `B × B` grid of (scene, text)
//! pairings. Row `i` is scene `i`, column `k` is text `k`; the softmax in
//! both terms runs over the text index within a scene row.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossMode {
    /// Cosine-similarity term only.
    CosSim,
    /// Matching-probability term only.
    MatchProb,
    /// Mean of both terms.
    #[default]
    Both,
    /// Conventional InfoNCE on `cos / 0.1` with the matched column as the
    /// positive class. Not part of the reference objective; kept for
    /// comparison runs.
    InfoNce,
}

pub const INFONCE_TEMPERATURE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchScores {
    /// `cos_sim(S_scene_i, S_text_k)`.
    pub cos: Array2<f64>,
    /// `m_ik`.
    pub matching: Array2<f64>,
    /// `y_ik`.
    pub targets: Array2<f64>,
    /// `w_ik` = 1 − target cosine.
    pub weights: Array2<f64>,
}

impl BatchScores {
    /// Aligned batch: pair `(i, i)` matches, everything else is a negative.
    /// Target cosine is 1 on matches and 0 elsewhere, so `w = 1 − y`.
    pub fn aligned(cos: Array2<f64>, matching: Array2<f64>) -> Self {
        let b = cos.nrows();
        assert_eq!(cos.dim(), (b, b));
        assert_eq!(matching.dim(), (b, b));
        let targets = Array2::from_shape_fn((b, b), |(i, k)| if i == k { 1.0 } else { 0.0 });
        let weights = targets.mapv(|y| 1.0 - y);
        Self { cos, matching, targets, weights }
    }

    pub fn batch_size(&self) -> usize {
        self.cos.nrows()
    }
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut r in out.rows_mut() {
        let max = r.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + r.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        r.mapv_inplace(|v| v - lse);
    }
    out
}

/// `(1/B²) Σ_i Σ_k −c_ik log softmax_row(z)_ik` and its gradient w.r.t. `z`.
fn weighted_softmax_xent(z: &Array2<f64>, coef: &Array2<f64>) -> (f64, Array2<f64>) {
    let b = z.nrows() as f64;
    let norm = 1.0 / (b * b);
    let logp = log_softmax_rows(z);
    let loss = -(coef * &logp).sum() * norm;
    let mut grad = logp.mapv(f64::exp);
    for (mut g, c) in grad.rows_mut().into_iter().zip(coef.rows()) {
        let total: f64 = c.sum();
        g.zip_mut_with(&c, |p, &ci| *p = norm * (*p * total - ci));
    }
    (loss, grad)
}

/// Cosine term: softmax over `x = 1 − cos`, weighted by `w`.
pub fn loss_cossim(scores: &BatchScores) -> f64 {
    loss_cossim_grad(scores).0
}

/// Returns the cosine term and `dL/dcos`.
pub fn loss_cossim_grad(scores: &BatchScores) -> (f64, Array2<f64>) {
    let x = scores.cos.mapv(|c| 1.0 - c);
    let (l, dx) = weighted_softmax_xent(&x, &scores.weights);
    (l, -dx)
}

/// Matching term: softmax over `m`, weighted by `y`.
pub fn loss_match(scores: &BatchScores) -> f64 {
    loss_match_grad(scores).0
}

/// Returns the matching term and `dL/dm`.
pub fn loss_match_grad(scores: &BatchScores) -> (f64, Array2<f64>) {
    weighted_softmax_xent(&scores.matching, &scores.targets)
}

fn loss_infonce_grad(scores: &BatchScores) -> (f64, Array2<f64>) {
    let b = scores.batch_size() as f64;
    let z = scores.cos.mapv(|c| c / INFONCE_TEMPERATURE);
    // (1/B) Σ_i −log p_ii == B · (1/B²) Σ −y log p
    let (l, dz) = weighted_softmax_xent(&z, &scores.targets);
    (l * b, dz * (b / INFONCE_TEMPERATURE))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub cossim: f64,
    pub matching: f64,
    pub total: f64,
    pub d_cos: Array2<f64>,
    pub d_match: Array2<f64>,
}

/// Both terms are always reported; `total` and the gradients follow `mode`.
pub fn loss_with_grads(scores: &BatchScores, mode: LossMode) -> LossBreakdown {
    let (cossim, d_cos) = loss_cossim_grad(scores);
    let (matching, d_match) = loss_match_grad(scores);
    let zeros = || Array2::zeros(scores.cos.raw_dim());
    match mode {
        LossMode::CosSim => LossBreakdown { cossim, matching, total: cossim, d_cos, d_match: zeros() },
        LossMode::MatchProb => LossBreakdown { cossim, matching, total: matching, d_cos: zeros(), d_match },
        LossMode::Both => LossBreakdown {
            cossim,
            matching,
            total: 0.5 * (cossim + matching),
            d_cos: d_cos * 0.5,
            d_match: d_match * 0.5,
        },
        LossMode::InfoNce => {
            let (total, d_cos) = loss_infonce_grad(scores);
            LossBreakdown { cossim, matching, total, d_cos, d_match: zeros() }
        }
    }
}

pub fn loss_total(scores: &BatchScores, mode: LossMode) -> f64 {
    loss_with_grads(scores, mode).total
}
