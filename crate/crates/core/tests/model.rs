use kltrace_core::model::*;
use kltrace_core::tokenizer::TokenGrid;
use kltrace_core::Frame;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cfg(variant: Variant, layers: usize, dim: usize, heads: usize, vocab: usize) -> ModelConfig {
    ModelConfig {
        layers,
        model_dim: dim,
        heads,
        vocab,
        grid: [4, 4],
        patch: 2,
        variant,
        rng_seed: 3,
        mlp_ratio: 2,
        final_norm: true,
    }
}

fn grid(seed: u64, k: usize) -> TokenGrid {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    TokenGrid::new(4, 4, (0..16).map(|_| r.random_range(0..k as u32)).collect()).unwrap()
}

fn frame(seed: u64) -> Frame {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Frame::from_raw(8, 8, (0..8 * 8 * 3).map(|_| r.random()).collect()).unwrap()
}

/// Random weights everywhere, including the (normally zero) output layer.
fn randomize<T: kltrace_core::nn::Scalar>(m: &mut Model<T>, seed: u64, scale: f64) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    for t in &mut m.params.tensors {
        if t.name.ends_with(".g") {
            continue;
        }
        for v in &mut t.data {
            *v = T::from_f64(r.random_range(-scale..scale));
        }
    }
}

fn dist_batch(c: &ModelConfig, n: usize) -> Vec<Sequence> {
    (0..n as u64)
        .map(|i| {
            let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, i).unwrap();
            let order = DecodeOrder::random(&mask, 100 + i);
            Sequence::distributional(c, &grid(i, c.vocab), &grid(50 + i, c.vocab), &mask, &order).unwrap()
        })
        .collect()
}

#[test]
fn initial_cross_entropy_is_ln_k() {
    let c = ModelConfig {
        grid: [4, 4],
        ..ModelConfig::default()
    };
    let m = Model::<f32>::init(c.clone()).unwrap();
    let batch: Vec<Sequence> = (0..3u64)
        .map(|i| {
            let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.3, i).unwrap();
            let order = DecodeOrder::random(&mask, i);
            Sequence::distributional(&c, &grid(i, 512), &grid(i + 9, 512), &mask, &order).unwrap()
        })
        .collect();
    let loss = batch_loss(&m, &batch).unwrap();
    assert!((loss - (512f64).ln()).abs() < 1e-6, "{loss}");
}

#[test]
fn zero_head_bias_gradient_closed_form() {
    let c = cfg(Variant::DistributionalRandomAccess, 1, 8, 2, 6);
    let m = Model::<f64>::init(c.clone()).unwrap();
    let batch = dist_batch(&c, 3);
    let count: usize = batch.iter().map(|s| s.targets.len()).sum();
    let mut grads = Params::<f64>::zeros_like(&c);
    for s in &batch {
        loss_and_grad(&m, s, 1.0 / count as f64, &mut grads).unwrap();
    }
    let mut freq = vec![0.0; 6];
    for s in &batch {
        for &t in &s.target_tokens {
            freq[t as usize] += 1.0 / count as f64;
        }
    }
    let gb = &grads.get("head.b").unwrap().data;
    for k in 0..6 {
        assert!((gb[k] - (1.0 / 6.0 - freq[k])).abs() < 1e-12);
    }
}

#[test]
fn grad_check_linear_only() {
    let mut c = cfg(Variant::DeterministicL2, 0, 6, 2, 5);
    c.final_norm = false;
    let mut m = Model::<f64>::init(c.clone()).unwrap();
    randomize(&mut m, 1, 0.5);
    let batch: Vec<Sequence> = (0..2u64)
        .map(|i| {
            let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, i).unwrap();
            Sequence::deterministic(&c, &grid(i, 5), &grid(i + 3, 5), Some(&frame(i)), &mask).unwrap()
        })
        .collect();
    let r = grad_check(&m, &batch, 1e-3, 1e-8, 12, 0).unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn grad_check_one_layer_attention() {
    let c = cfg(Variant::DistributionalRandomAccess, 1, 8, 2, 6);
    let mut m = Model::<f64>::init(c.clone()).unwrap();
    randomize(&mut m, 2, 0.4);
    let r = grad_check(&m, &dist_batch(&c, 2), 1e-5, 1e-4, 8, 1).unwrap();
    assert!(r.passed, "{r:?}");
    let d = cfg(Variant::DeterministicL2, 1, 8, 2, 6);
    let mut md = Model::<f64>::init(d.clone()).unwrap();
    randomize(&mut md, 3, 0.4);
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, 4).unwrap();
    let s = Sequence::deterministic(&d, &grid(1, 6), &grid(2, 6), Some(&frame(5)), &mask).unwrap();
    let r = grad_check(&md, &[s], 1e-5, 1e-4, 8, 1).unwrap();
    assert!(r.passed, "{r:?}");
}

fn trained_like(variant: Variant) -> Model<f32> {
    let c = cfg(variant, 2, 16, 2, 12);
    let mut m = Model::<f32>::init(c).unwrap();
    randomize(&mut m, 7, 0.3);
    m
}

#[test]
fn rollout_matches_teacher_forcing() {
    let m = trained_like(Variant::DistributionalRandomAccess);
    let (f1, f2) = (grid(1, 12), grid(2, 12));
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, 5).unwrap();
    let order = DecodeOrder::random(&mask, 6);
    let job = RolloutJob {
        f1: &f1,
        f2: &f2,
        mask: &mask,
        order: &order,
        sampling_seed: 9,
    };
    let r = m.rollout(&job, &Sampling::default()).unwrap();
    assert_eq!(r.logits.valid_count(), order.order.len());
    for &i in &mask.revealed {
        assert_eq!(r.predicted.tokens[i], f2.tokens[i]);
        assert!(!r.logits.valid[i]);
    }
    let seq = Sequence::distributional(&m.config, &f1, &r.predicted, &mask, &order).unwrap();
    let out = outputs(&m, &seq);
    for (s, &cell) in order.order.iter().enumerate() {
        for j in 0..12 {
            let a = r.logits.row(cell)[j];
            let b = out[s * 12 + j];
            assert!((a - b).abs() < 1e-4, "step {s}: {a} vs {b}");
        }
    }
    // batched rollout agrees with single rollouts
    let order2 = DecodeOrder::random(&mask, 7);
    let job2 = RolloutJob {
        order: &order2,
        sampling_seed: 10,
        ..job
    };
    let both = m.rollout_batch(&[job, job2], &Sampling::default()).unwrap();
    assert_eq!(both[0], r);
    let single2 = m.rollout(&job2, &Sampling::default()).unwrap();
    for (a, b) in both[1].logits.logits.iter().zip(&single2.logits.logits) {
        assert!((a - b).abs() < 1e-5);
    }
    assert_eq!(both[1].predicted, single2.predicted);
}

#[test]
fn causality_under_later_edits() {
    let m = trained_like(Variant::DistributionalRandomAccess);
    let (f1, f2) = (grid(3, 12), grid(4, 12));
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, 1).unwrap();
    let order = DecodeOrder::random(&mask, 2);
    let seq = Sequence::distributional(&m.config, &f1, &f2, &mask, &order).unwrap();
    let base = outputs(&m, &seq);
    let t = 4;
    let mut edited = f2.clone();
    for &cell in &order.order[t..] {
        edited.tokens[cell] = (edited.tokens[cell] + 5) % 12;
    }
    let seq2 = Sequence::distributional(&m.config, &f1, &edited, &mask, &order).unwrap();
    let out2 = outputs(&m, &seq2);
    // Step t+1 is the first whose input carries the token decoded at step t.
    assert_eq!(base[..(t + 1) * 12], out2[..(t + 1) * 12]);
    assert_ne!(base[(t + 1) * 12..], out2[(t + 1) * 12..]);
}

#[test]
fn rollouts_are_deterministic_and_modes_behave() {
    let m = trained_like(Variant::DistributionalRandomAccess);
    let (f1, f2) = (grid(5, 12), grid(6, 12));
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.1, 3).unwrap();
    let order = DecodeOrder::random(&mask, 3);
    let job = RolloutJob {
        f1: &f1,
        f2: &f2,
        mask: &mask,
        order: &order,
        sampling_seed: 1,
    };
    let a = m.rollout(&job, &Sampling::default()).unwrap();
    let b = m.rollout(&job, &Sampling::default()).unwrap();
    assert_eq!(a, b);

    let full = MaskSpec::full(16);
    let none = DecodeOrder::raster(&full);
    let r = m
        .rollout(
            &RolloutJob {
                mask: &full,
                order: &none,
                ..job
            },
            &Sampling::default(),
        )
        .unwrap();
    assert_eq!(r.logits.valid_count(), 0);
    assert_eq!(r.predicted, f2);

    let ow = MaskSpec::new(RevealMode::OverwriteDuringRollout, 16, 0.25, 2).unwrap();
    let all = DecodeOrder::random(&ow, 4);
    let r = m
        .rollout(
            &RolloutJob {
                mask: &ow,
                order: &all,
                ..job
            },
            &Sampling::default(),
        )
        .unwrap();
    assert_eq!(r.logits.valid_count(), 16);
    for &i in &ow.overwrite {
        assert_eq!(r.predicted.tokens[i], f2.tokens[i]);
    }
}

#[test]
fn raster_variant_rejects_random_subsets() {
    let m = trained_like(Variant::DistributionalRaster);
    let (f1, f2) = (grid(5, 12), grid(6, 12));
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, 3).unwrap();
    let order = DecodeOrder::raster(&mask);
    let job = RolloutJob {
        f1: &f1,
        f2: &f2,
        mask: &mask,
        order: &order,
        sampling_seed: 1,
    };
    assert!(m.rollout(&job, &Sampling::default()).is_err());
    let prefix = MaskSpec::new(RevealMode::RasterPrefix, 16, 0.25, 3).unwrap();
    let order = DecodeOrder::raster(&prefix);
    let ok = RolloutJob {
        mask: &prefix,
        order: &order,
        ..job
    };
    assert!(m.rollout(&ok, &Sampling::default()).is_ok());
    let shuffled = DecodeOrder::random(&prefix, 1);
    let bad = RolloutJob { order: &shuffled, ..ok };
    assert!(m.rollout(&bad, &Sampling::default()).is_err());
}

#[test]
fn parallel_path_equals_first_step() {
    let m = trained_like(Variant::DistributionalRandomAccess);
    let (f1, f2) = (grid(8, 12), grid(9, 12));
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, 8).unwrap();
    let par = m.predict_parallel(&f1, &f2, &mask, &Sampling::default(), 0).unwrap();
    for &h in mask.hidden().iter().take(3) {
        let mut order = DecodeOrder::random(&mask, h as u64);
        let pos = order.order.iter().position(|&c| c == h).unwrap();
        order.order.swap(0, pos);
        let job = RolloutJob {
            f1: &f1,
            f2: &f2,
            mask: &mask,
            order: &order,
            sampling_seed: 0,
        };
        let r = m.rollout(&job, &Sampling::default()).unwrap();
        for (a, b) in par.logits.row(h).iter().zip(r.logits.row(h)) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}

#[test]
fn deterministic_prediction_matches_forward() {
    let m = trained_like(Variant::DeterministicL2);
    let (f1, f2) = (grid(1, 12), grid(2, 12));
    let mask = MaskSpec::new(RevealMode::RandomSubset, 16, 0.25, 8).unwrap();
    let (cells, px) = m.predict_pixels(&f1, &f2, &mask).unwrap();
    assert_eq!(cells, mask.hidden());
    let seq = Sequence::deterministic(&m.config, &f1, &f2, None, &mask).unwrap();
    let out = outputs(&m, &seq);
    assert_eq!(px.len(), out.len());
    for (a, b) in px.iter().zip(&out) {
        assert!((a - b).abs() < 1e-5);
    }
    let job = RolloutJob {
        f1: &f1,
        f2: &f2,
        mask: &mask,
        order: &DecodeOrder::random(&mask, 0),
        sampling_seed: 0,
    };
    assert!(m.rollout(&job, &Sampling::default()).is_err());
}

fn toy_data(k: usize) -> Vec<TrainExample> {
    // Frame 2 repeats frame 1: the model only has to learn to copy.
    (0..12u64)
        .map(|i| {
            let f1 = grid(i, k);
            TrainExample {
                f1: f1.clone(),
                f2: f1,
                f2_frame: None,
            }
        })
        .collect()
}

#[test]
fn training_reduces_loss_and_resumes_identically() {
    let c = cfg(Variant::DistributionalRandomAccess, 1, 16, 2, 8);
    let data = toy_data(8);
    let tc = TrainConfig {
        steps: 300,
        batch_size: 4,
        lr: 3e-3,
        warmup: 5,
        heldout_every: 50,
        ..TrainConfig::default()
    };
    let held = heldout_sequences(&c, &data[..4], 0.5, 1).unwrap();

    let init = Model::<f32>::init(c.clone()).unwrap();
    let mut zero = init.clone();
    let mut adam0 = AdamState::new(&c);
    let none = TrainConfig { steps: 0, ..tc.clone() };
    train(&mut zero, &mut adam0, &data, &held, &none, |_| {}).unwrap();
    assert_eq!(zero, init);

    let mut full = init.clone();
    let mut adam = AdamState::new(&c);
    let out = train(&mut full, &mut adam, &data, &held, &tc, |_| {}).unwrap();
    assert!((out.losses[0].train_loss - 8f64.ln()).abs() < 1e-5);
    let first = out.losses.iter().find_map(|p| p.heldout_loss).unwrap();
    assert!(out.final_heldout.unwrap() < first);
    assert!(out.final_heldout.unwrap() < 8f64.ln() - 0.3);

    let mut half = init.clone();
    let mut adam_h = AdamState::new(&c);
    let mid = TrainConfig { steps: 25, ..tc.clone() };
    train(&mut half, &mut adam_h, &data, &held, &mid, |_| {}).unwrap();
    // round trip through a checkpoint before resuming
    let ck = Checkpoint {
        model: half,
        codebook_digest: "x".into(),
        step: adam_h.step,
        adam: Some(adam_h),
        meta: serde_json::Value::Null,
    };
    let back = Checkpoint::from_bytes(&ck.to_bytes(), std::path::Path::new("c")).unwrap();
    let (mut half, mut adam_h) = (back.model, back.adam.unwrap());
    train(&mut half, &mut adam_h, &data, &held, &tc, |_| {}).unwrap();
    assert_eq!(half, full);
}

#[test]
fn nan_weights_abort_training() {
    let c = cfg(Variant::DistributionalRandomAccess, 1, 8, 2, 8);
    let mut m = Model::<f32>::init(c.clone()).unwrap();
    m.params.get_mut("head.w").unwrap().data[0] = f32::NAN;
    let mut adam = AdamState::new(&c);
    let tc = TrainConfig {
        steps: 3,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let err = train(&mut m, &mut adam, &toy_data(8), &[], &tc, |_| {}).unwrap_err();
    assert!(matches!(err, kltrace_core::Error::Numerical(_)));
}
