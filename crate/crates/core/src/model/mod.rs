//! Small autoregressive transformer over (location, token) pairs that predicts
//! frame-2 patch tokens from frame 1 and any revealed subset of frame 2.
//!
//! Three variants share one parameter layout:
//! * `distributional_random_access`: decodes hidden patches in any order;
//! * `distributional_raster`: same network, trained and queried in raster order;
//! * `deterministic_l2`: one bidirectional pass regressing patch pixels.

mod checkpoint;
mod forward;
mod gradcheck;
mod infer;
mod mask;
mod train;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;
use crate::seed::{self, Stream};

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use forward::{batch_loss, loss_and_grad, outputs, Sequence, NO_LOC};
pub use gradcheck::{grad_check, GradCheckReport};
pub use infer::{sample_token, LogitsGrid, Rollout, RolloutJob, Sampling};
pub use mask::{budget, DecodeOrder, MaskSpec, RevealMode};
pub use train::{
    heldout_loss, heldout_sequences, step_batch, token_accuracy, train, training_sequence, AdamState, LossPoint,
    TrainConfig, TrainExample, TrainOutcome,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    DistributionalRandomAccess,
    DistributionalRaster,
    DeterministicL2,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::DistributionalRandomAccess => "distributional_random_access",
            Variant::DistributionalRaster => "distributional_raster",
            Variant::DeterministicL2 => "deterministic_l2",
        }
    }

    pub fn is_distributional(self) -> bool {
        self != Variant::DeterministicL2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    /// Codebook size K.
    pub vocab: usize,
    /// Token grid `[gh, gw]`.
    pub grid: [usize; 2],
    /// Tokenizer patch side; sets the pixel output width of the deterministic head.
    pub patch: usize,
    pub variant: Variant,
    pub rng_seed: u64,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Layer norm before the output head. Disabled only for gradient checks.
    #[serde(default = "default_true")]
    pub final_norm: bool,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_true() -> bool {
    true
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 4,
            model_dim: 128,
            heads: 4,
            vocab: crate::tokenizer::DEFAULT_CODES,
            grid: [16, 16],
            patch: crate::tokenizer::DEFAULT_PATCH,
            variant: Variant::DistributionalRandomAccess,
            rng_seed: 0,
            mlp_ratio: 4,
            final_norm: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || self.model_dim % self.heads != 0 {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab == 0 || self.grid[0] == 0 || self.grid[1] == 0 || self.patch == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("vocab, grid, patch and mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid[0] * self.grid[1]
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.model_dim * self.mlp_ratio
    }

    /// Width of the output head: K logits or one patch of pixels.
    pub fn out_dim(&self) -> usize {
        match self.variant {
            Variant::DeterministicL2 => self.patch * self.patch * 3,
            _ => self.vocab,
        }
    }

    /// Token embedding rows: K codes, then BOS, then MASK.
    pub fn embed_rows(&self) -> usize {
        self.vocab + 2
    }

    pub fn bos(&self) -> u32 {
        self.vocab as u32
    }

    pub fn mask_token(&self) -> u32 {
        self.vocab as u32 + 1
    }

    pub fn param_count(&self) -> usize {
        tensor_specs(self).iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Segment ids added to every position.
pub const SEG_FRAME1: u8 = 0;
pub const SEG_REVEALED: u8 = 1;
pub const SEG_DECODE: u8 = 2;
pub const SEGMENTS: usize = 3;

pub(crate) const TOK: usize = 0;
pub(crate) const LOC: usize = 1;
pub(crate) const QRY: usize = 2;
pub(crate) const SEG: usize = 3;
pub(crate) const GLOBALS: usize = 4;
pub(crate) const PER_LAYER: usize = 12;

// Offsets inside one layer block.
pub(crate) const LN1_G: usize = 0;
pub(crate) const LN1_B: usize = 1;
pub(crate) const W_QKV: usize = 2;
pub(crate) const B_QKV: usize = 3;
pub(crate) const W_O: usize = 4;
pub(crate) const B_O: usize = 5;
pub(crate) const LN2_G: usize = 6;
pub(crate) const LN2_B: usize = 7;
pub(crate) const W_1: usize = 8;
pub(crate) const B_1: usize = 9;
pub(crate) const W_2: usize = 10;
pub(crate) const B_2: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Uniform(f64),
    Ones,
    Zeros,
}

fn tensor_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.model_dim;
    let n = cfg.cells();
    let hid = cfg.hidden_dim();
    // Uniform bounds with standard deviation 0.02 (residual projections scaled down by depth).
    let std = 0.02f64;
    let u = |s: f64| Init::Uniform(s * 3f64.sqrt());
    let resid = std / (2.0 * cfg.layers.max(1) as f64).sqrt();
    let mut v = vec![
        ("tok_emb".to_string(), vec![cfg.embed_rows(), d], u(std)),
        ("loc_emb".to_string(), vec![n, d], u(std)),
        ("qry_emb".to_string(), vec![n, d], u(std)),
        ("seg_emb".to_string(), vec![SEGMENTS, d], u(std)),
    ];
    for l in 0..cfg.layers {
        let p = |s: &str| format!("layer{l}.{s}");
        v.push((p("ln1.g"), vec![d], Init::Ones));
        v.push((p("ln1.b"), vec![d], Init::Zeros));
        v.push((p("attn.qkv.w"), vec![d, 3 * d], u(std)));
        v.push((p("attn.qkv.b"), vec![3 * d], Init::Zeros));
        v.push((p("attn.out.w"), vec![d, d], u(resid)));
        v.push((p("attn.out.b"), vec![d], Init::Zeros));
        v.push((p("ln2.g"), vec![d], Init::Ones));
        v.push((p("ln2.b"), vec![d], Init::Zeros));
        v.push((p("mlp.fc.w"), vec![d, hid], u(std)));
        v.push((p("mlp.fc.b"), vec![hid], Init::Zeros));
        v.push((p("mlp.proj.w"), vec![hid, d], u(resid)));
        v.push((p("mlp.proj.b"), vec![d], Init::Zeros));
    }
    v.push(("ln_f.g".to_string(), vec![d], Init::Ones));
    v.push(("ln_f.b".to_string(), vec![d], Init::Zeros));
    // Zero output layer: initial logits are uniform.
    v.push(("head.w".to_string(), vec![d, cfg.out_dim()], Init::Zeros));
    v.push(("head.b".to_string(), vec![cfg.out_dim()], Init::Zeros));
    v
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(cfg: &ModelConfig) -> Self {
        Params {
            tensors: tensor_specs(cfg)
                .into_iter()
                .map(|(name, shape, _)| {
                    let n = shape.iter().product();
                    Tensor {
                        name,
                        shape,
                        data: vec![T::ZERO; n],
                    }
                })
                .collect(),
        }
    }

    pub fn init(cfg: &ModelConfig) -> Self {
        let mut p = Self::zeros_like(cfg);
        for (i, ((_, _, init), t)) in tensor_specs(cfg).into_iter().zip(&mut p.tensors).enumerate() {
            match init {
                Init::Zeros => {}
                Init::Ones => t.data.iter_mut().for_each(|v| *v = T::ONE),
                Init::Uniform(a) => {
                    let mut rng = seed::rng(cfg.rng_seed, Stream::Init, i as u64);
                    for v in t.data.iter_mut() {
                        *v = T::from_f64(rng.random_range(-a..a));
                    }
                }
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.to_f64() * v.to_f64())
            .sum()
    }

    pub fn convert<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    #[inline]
    pub(crate) fn t(&self, i: usize) -> &[T] {
        &self.tensors[i].data
    }

    #[inline]
    pub(crate) fn t_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.tensors[i].data
    }
}

pub(crate) fn layer_base(l: usize) -> usize {
    GLOBALS + l * PER_LAYER
}

pub(crate) fn final_base(cfg: &ModelConfig) -> usize {
    GLOBALS + cfg.layers * PER_LAYER
}

/// A configured network and its weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Scalar> Model<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Model { config, params })
    }

    pub fn convert<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.convert(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig {
            layers: 1,
            model_dim: 16,
            heads: 2,
            vocab: 8,
            grid: [4, 4],
            ..ModelConfig::default()
        };
        let a = Model::<f32>::init(cfg.clone()).unwrap();
        let b = Model::<f32>::init(cfg.clone()).unwrap();
        assert_eq!(a, b);
        let c = Model::<f32>::init(ModelConfig { rng_seed: 1, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
        assert!(a.params.get("head.w").unwrap().data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_dims() {
        let cfg = ModelConfig {
            model_dim: 10,
            heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(Model::<f32>::init(cfg), Err(Error::Config(_))));
    }

    #[test]
    fn default_fits_budget() {
        assert!(ModelConfig::default().param_count() < 5_000_000);
    }
}
