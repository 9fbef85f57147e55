use rand::RngExt;
use serde::{Deserialize, Serialize};

use super::forward::{batch_loss, loss_and_grad, Sequence};
use super::*;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Tensor and element index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Smallest gradient magnitude used as the denominator of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares analytic gradients of the mean batch loss with central finite
/// differences on up to `per_tensor` sampled entries of every tensor.
pub fn grad_check(
    model: &Model<f64>,
    batch: &[Sequence],
    epsilon: f64,
    tolerance: f64,
    per_tensor: usize,
    rng_seed: u64,
) -> Result<GradCheckReport> {
    let count: usize = batch.iter().map(|s| s.targets.len()).sum();
    if count == 0 {
        return Err(Error::Data("grad_check batch has no scored positions".into()));
    }
    let mut grads = Params::<f64>::zeros_like(&model.config);
    for s in batch {
        loss_and_grad(model, s, 1.0 / count as f64, &mut grads)?;
    }
    let mut probe = model.clone();
    let mut rng = seed::rng(rng_seed, Stream::Init, u64::MAX);
    let mut worst = (String::new(), 0usize);
    let mut max_rel = 0.0f64;
    let mut checked = 0;
    for ti in 0..grads.tensors.len() {
        let n = grads.tensors[ti].data.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for j in picks {
            let orig = probe.params.tensors[ti].data[j];
            probe.params.tensors[ti].data[j] = orig + epsilon;
            let up = batch_loss(&probe, batch)?;
            probe.params.tensors[ti].data[j] = orig - epsilon;
            let down = batch_loss(&probe, batch)?;
            probe.params.tensors[ti].data[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads.tensors[ti].data[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > max_rel || checked == 0 {
                max_rel = max_rel.max(rel);
                worst = (grads.tensors[ti].name.clone(), j);
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        worst,
        checked,
        tolerance,
        passed: max_rel < tolerance,
    })
}
