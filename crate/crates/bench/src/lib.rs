//! Shared fixtures for the benchmarks: a small clip set, a fitted codebook
//! and an untrained model of each size.

use kltrace_core::model::{Model, ModelConfig, Variant};
use kltrace_core::synth::{generate_dataset, Clip, DatasetSpec, QuerySpec, Scenario, WorldParams};
use kltrace_core::tokenizer::{fit_codebook, Codebook};

pub struct Fixture {
    pub clips: Vec<Clip>,
    pub codebook: Codebook,
    pub model: Model<f32>,
}

/// Clips of `size x size` pixels, a 64-code codebook and a model with the
/// given depth and width.
pub fn fixture(size: usize, layers: usize, model_dim: usize) -> Fixture {
    let world = WorldParams {
        width: size,
        height: size,
        sprite_size: [(size / 4) as u32, (size / 3) as u32],
        ..WorldParams::default()
    };
    let spec = DatasetSpec {
        seed: 1,
        scenarios: [(Scenario::Translate, 4)].into_iter().collect(),
        world,
        queries: QuerySpec::default(),
    };
    let (clips, _) = generate_dataset(&spec).expect("fixture clips");
    let frames: Vec<_> = clips.iter().flat_map(|c| c.frames.clone()).collect();
    let codebook = fit_codebook(&frames, 4, 64, 5, 0).expect("fixture codebook");
    let model = Model::init(ModelConfig {
        layers,
        model_dim,
        heads: 4,
        vocab: 64,
        grid: [size / 4, size / 4],
        patch: 4,
        variant: Variant::DistributionalRandomAccess,
        rng_seed: 0,
        mlp_ratio: 4,
        final_norm: true,
    })
    .expect("fixture model");
    Fixture { clips, codebook, model }
}
