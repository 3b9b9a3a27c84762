//! Contrastive training of [`JointModel`].

pub mod loss;

use std::io::Write;
use std::path::PathBuf;

use ndarray::{Array1, Array2};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::nn::{checkpoint, GraphEncoding, GraphGrad, JointModel, PairForward};
pub use loss::{loss_cossim, loss_match, loss_total, loss_with_grads, BatchScores, LossBreakdown, LossMode};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least {needed} described scenes, dataset has {available}")]
    InsufficientScenes { needed: usize, available: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("loss diverged at step {step}")]
    DivergedLoss { step: usize, last_good: Box<JointModel> },
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] checkpoint::CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 8, epochs: 30, learning_rate: 1e-3, loss_mode: LossMode::Both, seed: 0, checkpoint_every: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// One matched pair of a batch: indices into `dataset.scenes` / `dataset.texts`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchPair {
    pub scene: usize,
    pub text: usize,
}

/// Samples `b` pairwise-distinct scenes uniformly, and for each a uniformly
/// chosen description.
pub fn build_batch<R: Rng + ?Sized>(dataset: &Dataset, b: usize, rng: &mut R) -> Result<Vec<BatchPair>, TrainError> {
    let scenes = dataset.described_scenes();
    if scenes.len() < b {
        return Err(TrainError::InsufficientScenes { needed: b, available: scenes.len() });
    }
    let by_scene = dataset.texts_by_scene();
    Ok(sample(rng, scenes.len(), b)
        .into_iter()
        .map(|i| {
            let scene = scenes[i];
            let texts = &by_scene[scene];
            BatchPair { scene, text: texts[rng.random_range(0..texts.len())] }
        })
        .collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &JointModel, lr: f64) -> Self {
        let shapes: Vec<usize> = model.parameters().iter().map(|(_, p)| p.len()).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, model: &mut JointModel, grads: &JointModel) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let grads = grads.parameters();
        for (ti, p) in model.parameters_mut().into_iter().enumerate() {
            let g = grads[ti].1;
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                p[j] -= self.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        a.dot(b) / (na * nb)
    }
}

/// `(d cos / d a, d cos / d b)`.
fn cosine_grad(a: &Array1<f64>, b: &Array1<f64>) -> (Array1<f64>, Array1<f64>) {
    let (na, nb) = (a.dot(a).sqrt(), b.dot(b).sqrt());
    if na < 1e-12 || nb < 1e-12 {
        return (Array1::zeros(a.len()), Array1::zeros(b.len()));
    }
    let c = a.dot(b) / (na * nb);
    let da = b / (na * nb) - a * (c / (na * na));
    let db = a / (na * nb) - b * (c / (nb * nb));
    (da, db)
}

/// Loss and parameter gradients for one batch of matched pairs.
/// Also returns the gradients w.r.t. every scene/text node-feature matrix in
/// batch order (used by gradient checks).
pub struct StepOutput {
    pub loss: LossBreakdown,
    pub grads: JointModel,
    pub d_scene_features: Vec<Array2<f64>>,
    pub d_text_features: Vec<Array2<f64>>,
}

pub fn batch_loss_and_grads(
    model: &JointModel,
    scenes: &[&crate::vectors::FeaturizedGraph],
    texts: &[&crate::vectors::FeaturizedGraph],
    mode: LossMode,
) -> StepOutput {
    let b = scenes.len();
    assert_eq!(texts.len(), b);
    let enc_s: Vec<GraphEncoding> = scenes.par_iter().map(|g| GraphEncoding::new(model, g)).collect();
    let enc_t: Vec<GraphEncoding> = texts.par_iter().map(|g| GraphEncoding::new(model, g)).collect();
    let pairs: Vec<PairForward> = (0..b * b)
        .into_par_iter()
        .map(|ik| PairForward::new(model, &enc_t[ik % b], &enc_s[ik / b]))
        .collect();
    let cos = Array2::from_shape_fn((b, b), |(i, k)| {
        let p = &pairs[i * b + k];
        cosine(&p.s_scene, &p.s_text)
    });
    let matching = Array2::from_shape_fn((b, b), |(i, k)| pairs[i * b + k].match_prob);
    let loss = loss_with_grads(&BatchScores::aligned(cos, matching), mode);

    let mut grads = model.zeros_like();
    let mut g_s: Vec<GraphGrad> = enc_s.iter().map(GraphGrad::zeros_for).collect();
    let mut g_t: Vec<GraphGrad> = enc_t.iter().map(GraphGrad::zeros_for).collect();
    for i in 0..b {
        for k in 0..b {
            let p = &pairs[i * b + k];
            let (dc, dm) = (loss.d_cos[[i, k]], loss.d_match[[i, k]]);
            if dc == 0.0 && dm == 0.0 {
                continue;
            }
            let (ds, dt) = cosine_grad(&p.s_scene, &p.s_text);
            let (gt, gs) = p.backward(model, &enc_t[k], &enc_s[i], &(dt * dc), &(ds * dc), dm, &mut grads);
            g_t[k].add_assign(&gt);
            g_s[i].add_assign(&gs);
        }
    }
    let d_scene_features = enc_s.iter().zip(&g_s).map(|(e, g)| e.backward(model, g, &mut grads).0).collect();
    let d_text_features = enc_t.iter().zip(&g_t).map(|(e, g)| e.backward(model, g, &mut grads).0).collect();
    StepOutput { loss, grads, d_scene_features, d_text_features }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLoss {
    pub step: usize,
    pub epoch: usize,
    pub cossim: f64,
    pub matching: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLoss>,
}

impl TrainReport {
    /// Mean total loss per epoch.
    pub fn epoch_means(&self) -> Vec<f64> {
        let epochs = self.steps.iter().map(|s| s.epoch + 1).max().unwrap_or(0);
        (0..epochs)
            .map(|e| {
                let xs: Vec<f64> = self.steps.iter().filter(|s| s.epoch == e).map(|s| s.total).collect();
                xs.iter().sum::<f64>() / xs.len() as f64
            })
            .collect()
    }

    /// CSV with header `step,L_cossim,L_match,L`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,L_cossim,L_match,L")?;
        for s in &self.steps {
            writeln!(w, "{},{:.9},{:.9},{:.9}", s.step, s.cossim, s.matching, s.total)?;
        }
        Ok(())
    }
}

/// Receives periodic and final snapshots of the model.
pub trait CheckpointSink {
    fn save(&mut self, step: usize, model: &JointModel) -> Result<(), TrainError>;
}

pub struct NoCheckpoints;

impl CheckpointSink for NoCheckpoints {
    fn save(&mut self, _step: usize, _model: &JointModel) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Writes `step-<n>.bin` files plus `latest.bin` into a directory.
pub struct DirectoryCheckpoints {
    pub dir: PathBuf,
}

impl CheckpointSink for DirectoryCheckpoints {
    fn save(&mut self, step: usize, model: &JointModel) -> Result<(), TrainError> {
        std::fs::create_dir_all(&self.dir)?;
        checkpoint::save_model(model, self.dir.join(format!("step-{step:06}.bin")))?;
        checkpoint::save_model(model, self.dir.join("latest.bin"))?;
        Ok(())
    }
}

/// Keeps snapshots in memory.
#[derive(Default)]
pub struct MemoryCheckpoints {
    pub saved: Vec<(usize, JointModel)>,
}

impl CheckpointSink for MemoryCheckpoints {
    fn save(&mut self, step: usize, model: &JointModel) -> Result<(), TrainError> {
        self.saved.push((step, model.clone()));
        Ok(())
    }
}

/// Number of optimizer steps per epoch: one pass worth of descriptions.
pub fn steps_per_epoch(dataset: &Dataset, batch_size: usize) -> usize {
    (dataset.texts.len() / batch_size).max(1)
}

/// Adam training over in-batch contrastive batches. Deterministic given
/// `cfg.seed`. On a non-finite loss or gradient, the model from before the
/// failing step is handed to the sink and returned inside the error.
pub fn train(
    model: &mut JointModel,
    dataset: &Dataset,
    cfg: &TrainConfig,
    sink: &mut dyn CheckpointSink,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if dataset.texts.is_empty() {
        return Err(TrainError::InsufficientScenes { needed: cfg.batch_size, available: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model, cfg.learning_rate);
    let per_epoch = steps_per_epoch(dataset, cfg.batch_size);
    let mut report = TrainReport::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for _ in 0..per_epoch {
            let batch = build_batch(dataset, cfg.batch_size, &mut rng)?;
            let scenes: Vec<_> = batch.iter().map(|p| &dataset.scenes[p.scene]).collect();
            let texts: Vec<_> = batch.iter().map(|p| &dataset.texts[p.text].graph).collect();
            let out = batch_loss_and_grads(model, &scenes, &texts, cfg.loss_mode);
            let l = &out.loss;
            if !(l.total.is_finite() && l.cossim.is_finite() && l.matching.is_finite() && out.grads.is_finite()) {
                sink.save(step, model)?;
                return Err(TrainError::DivergedLoss { step, last_good: Box::new(model.clone()) });
            }
            report.steps.push(StepLoss { step, epoch, cossim: l.cossim, matching: l.matching, total: l.total });
            adam.update(model, &out.grads);
            step += 1;
            if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
                sink.save(step, model)?;
            }
        }
        log::info!(
            "epoch {epoch}: mean loss {:.5}",
            report.epoch_means().last().copied().unwrap_or(f64::NAN)
        );
    }
    sink.save(step, model)?;
    Ok(report)
}

#[cfg(test)]
mod tests;
