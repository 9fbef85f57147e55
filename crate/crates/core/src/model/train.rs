use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::forward::{batch_loss, loss_and_grad, outputs, Sequence};
use super::mask::{DecodeOrder, MaskSpec, RevealMode};
use super::*;
use crate::frame::Frame;
use crate::tokenizer::TokenGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient norm limit.
    pub grad_clip: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup: u64,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    pub final_lr_fraction: f64,
    /// Reveal ratio is drawn uniformly from `[0, reveal_max]` per sample.
    pub reveal_max: f64,
    pub heldout_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 8,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            warmup: 50,
            final_lr_fraction: 1.0,
            reveal_max: 0.5,
            heldout_every: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("batch_size, lr and grad_clip must be positive"));
        }
        if !(0.0..=1.0).contains(&self.reveal_max) {
            return Err(Error::config("reveal_max must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let warm = if self.warmup > 0 && step < self.warmup {
            (step + 1) as f64 / self.warmup as f64
        } else {
            1.0
        };
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = (step.saturating_sub(self.warmup) as f64 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * t).cos());
        let frac = self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos;
        self.lr * warm * frac
    }
}

/// One frame pair in token form; the pixels of frame 2 are needed by the
/// deterministic variant only.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub f1: TokenGrid,
    pub f2: TokenGrid,
    pub f2_frame: Option<Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl AdamState {
    pub fn new(cfg: &ModelConfig) -> Self {
        AdamState {
            step: 0,
            m: Params::zeros_like(cfg),
            v: Params::zeros_like(cfg),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub train_loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heldout_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub losses: Vec<LossPoint>,
    pub final_heldout: Option<f64>,
}

/// The training sequence for one example at the given reveal ratio. The
/// variant fixes the mask family and decode order.
pub fn training_sequence(cfg: &ModelConfig, ex: &TrainExample, ratio: f64, rng_seed: u64) -> Result<Sequence> {
    let n = cfg.cells();
    match cfg.variant {
        Variant::DistributionalRandomAccess => {
            let mask = MaskSpec::new(RevealMode::RandomSubset, n, ratio, rng_seed)?;
            let order = DecodeOrder::random(&mask, rng_seed);
            Sequence::distributional(cfg, &ex.f1, &ex.f2, &mask, &order)
        }
        Variant::DistributionalRaster => {
            let mask = MaskSpec::new(RevealMode::RasterPrefix, n, ratio, rng_seed)?;
            Sequence::distributional(cfg, &ex.f1, &ex.f2, &mask, &DecodeOrder::raster(&mask))
        }
        Variant::DeterministicL2 => {
            let mask = MaskSpec::new(RevealMode::RandomSubset, n, ratio, rng_seed)?;
            let frame = ex
                .f2_frame
                .as_ref()
                .ok_or_else(|| Error::Data("deterministic training needs frame-2 pixels".into()))?;
            Sequence::deterministic(cfg, &ex.f1, &ex.f2, Some(frame), &mask)
        }
    }
}

/// Sequences of training step `step`: examples, ratios and masks all derive
/// from `(seed, step)` so a resumed run replays the same batches.
pub fn step_batch(cfg: &ModelConfig, tc: &TrainConfig, data: &[TrainExample], step: u64) -> Result<Vec<Sequence>> {
    let mut rng = seed::rng(tc.seed, Stream::Batch, step);
    (0..tc.batch_size)
        .map(|_| {
            let i = rng.random_range(0..data.len());
            let ratio = rng.random::<f64>() * tc.reveal_max;
            let s: u64 = rng.random();
            training_sequence(cfg, &data[i], ratio, s)
        })
        .collect()
}

/// Fixed held-out sequences: one per example, ratio drawn from the same range.
pub fn heldout_sequences(cfg: &ModelConfig, data: &[TrainExample], reveal_max: f64, seed: u64) -> Result<Vec<Sequence>> {
    let mut rng = seed::rng(seed, Stream::Batch, u64::MAX);
    data.iter()
        .map(|ex| {
            let ratio = rng.random::<f64>() * reveal_max;
            training_sequence(cfg, ex, ratio, rng.random())
        })
        .collect()
}

pub fn heldout_loss(model: &Model<f32>, seqs: &[Sequence]) -> Result<f64> {
    batch_loss(model, seqs)
}

/// Fraction of scored positions whose highest logit is the target token.
pub fn token_accuracy(model: &Model<f32>, seqs: &[Sequence]) -> Result<f64> {
    if !model.config.variant.is_distributional() {
        return Err(Error::config("token accuracy needs a distributional variant"));
    }
    let k = model.config.vocab;
    let (mut hit, mut total) = (0usize, 0usize);
    for s in seqs {
        let out = outputs(model, s);
        for (r, &t) in s.target_tokens.iter().enumerate() {
            let row = &out[r * k..(r + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            hit += (best == t as usize) as usize;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("no scored positions".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Runs Adam from `adam.step` up to `tc.steps`. `on_point` sees every loss
/// point as it is produced.
pub fn train(
    model: &mut Model<f32>,
    adam: &mut AdamState,
    data: &[TrainExample],
    heldout: &[Sequence],
    tc: &TrainConfig,
    mut on_point: impl FnMut(&LossPoint),
) -> Result<TrainOutcome> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let cfg = model.config.clone();
    let mut grads = Params::<f32>::zeros_like(&cfg);
    let mut losses = Vec::new();
    let mut final_heldout = None;
    while adam.step < tc.steps {
        let step = adam.step;
        let batch = step_batch(&cfg, tc, data, step)?;
        let count: usize = batch.iter().map(|s| s.targets.len()).sum();
        grads.fill_zero();
        let mut total = 0.0;
        if count > 0 {
            let scale = 1.0 / count as f64;
            for s in &batch {
                total += loss_and_grad(model, s, scale, &mut grads)?;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let norm = grads.sq_norm().sqrt();
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numerical(format!(
                "training diverged at step {step}: loss {loss}, gradient norm {norm}, lr {}",
                tc.lr_at(step)
            )));
        }
        let clip = if norm > tc.grad_clip { tc.grad_clip / norm } else { 1.0 };
        let lr = tc.lr_at(step);
        let t = (step + 1) as i32;
        let bc1 = 1.0 - tc.beta1.powi(t);
        let bc2 = 1.0 - tc.beta2.powi(t);
        let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
        for (i, g) in grads.tensors.iter().enumerate() {
            let w = &mut model.params.tensors[i].data;
            let m = &mut adam.m.tensors[i].data;
            let v = &mut adam.v.tensors[i].data;
            for j in 0..g.data.len() {
                let gj = g.data[j] * clip as f32;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] as f64 / bc1;
                let vh = v[j] as f64 / bc2;
                w[j] -= (lr * mh / (vh.sqrt() + tc.adam_eps)) as f32;
            }
        }
        adam.step += 1;
        let last = adam.step == tc.steps;
        let heldout_loss = if !heldout.is_empty() && (last || (tc.heldout_every > 0 && adam.step % tc.heldout_every == 0)) {
            let h = batch_loss(model, heldout)?;
            if !h.is_finite() {
                return Err(Error::Numerical(format!("held-out loss {h} at step {}", adam.step)));
            }
            final_heldout = Some(h);
            Some(h)
        } else {
            None
        };
        let point = LossPoint {
            step,
            train_loss: loss,
            grad_norm: norm,
            lr,
            heldout_loss,
        };
        on_point(&point);
        losses.push(point);
    }
    Ok(TrainOutcome { losses, final_heldout })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let tc = TrainConfig {
            steps: 100,
            warmup: 10,
            lr: 1.0,
            final_lr_fraction: 0.1,
            ..TrainConfig::default()
        };
        assert!((tc.lr_at(0) - 0.1).abs() < 1e-12);
        assert!((tc.lr_at(10) - 1.0).abs() < 1e-12);
        assert!((tc.lr_at(100) - 0.1).abs() < 1e-12);
        assert!(tc.lr_at(50) < 1.0 && tc.lr_at(50) > 0.1);
    }
}
