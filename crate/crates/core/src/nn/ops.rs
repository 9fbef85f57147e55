//! Row-wise building blocks with hand-written backward passes.

use super::scalar::{matmul, matmul_nt, matmul_tn, Scalar};

pub const LN_EPS: f64 = 1e-5;

/// `y[rows x out] = x[rows x inp] W[inp x out] + b`.
pub fn linear<T: Scalar>(x: &[T], w: &[T], b: &[T], y: &mut [T], rows: usize, inp: usize, out: usize) {
    for r in 0..rows {
        y[r * out..(r + 1) * out].copy_from_slice(b);
    }
    matmul(x, w, y, rows, inp, out, true);
}

/// Accumulates `dW`, `db` and writes (or accumulates) `dx`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    dx: Option<&mut [T]>,
    rows: usize,
    inp: usize,
    out: usize,
) {
    matmul_tn(x, dy, dw, inp, rows, out, true);
    for r in 0..rows {
        for (g, &d) in db.iter_mut().zip(&dy[r * out..(r + 1) * out]) {
            *g += d;
        }
    }
    if let Some(dx) = dx {
        matmul_nt(dy, w, dx, rows, out, inp, false);
    }
}

/// Layer norm over rows of width `d`. Saves the normalized input and inverse
/// standard deviation for the backward pass.
pub fn layer_norm<T: Scalar>(x: &[T], g: &[T], b: &[T], y: &mut [T], xhat: &mut [T], rstd: &mut [T], d: usize) {
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (r, row) in x.chunks_exact(d).enumerate() {
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * g[j] + b[j];
        }
    }
}

/// Inference-only layer norm.
pub fn layer_norm_infer<T: Scalar>(x: &[T], g: &[T], b: &[T], y: &mut [T], d: usize) {
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for (row, out) in x.chunks_exact(d).zip(y.chunks_exact_mut(d)) {
        let mut mean = T::ZERO;
        for &v in row {
            mean += v;
        }
        mean *= inv_d;
        let mut var = T::ZERO;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var *= inv_d;
        let rs = T::ONE / (var + eps).sqrt();
        for j in 0..d {
            out[j] = (row[j] - mean) * rs * g[j] + b[j];
        }
    }
}

/// Accumulates `dg`, `db` and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    g: &[T],
    dg: &mut [T],
    db: &mut [T],
    dx: &mut [T],
    d: usize,
) {
    let inv_d = T::from_f64(1.0 / d as f64);
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xh = &xhat[r * d..(r + 1) * d];
        let mut mean_dxh = T::ZERO;
        let mut mean_dxh_xh = T::ZERO;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh[j];
        }
        mean_dxh *= inv_d;
        mean_dxh_xh *= inv_d;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dx[r * d + j] += rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::ONE + t) + half * x * (T::ONE - t * t) * c * (T::ONE + T::from_f64(3.0) * a * x * x)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_inplace<T: Scalar>(row: &mut [T]) {
    let mut m = row[0];
    for &v in row.iter() {
        m = m.max(v);
    }
    let mut s = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    let inv = T::ONE / s;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Log-softmax of one row written into `out`.
pub fn log_softmax<T: Scalar>(row: &[T], out: &mut [T]) {
    let mut m = row[0];
    for &v in row {
        m = m.max(v);
    }
    let mut s = T::ZERO;
    for &v in row {
        s += (v - m).exp();
    }
    let lse = m + s.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_backward_matches_difference() {
        let d = 5;
        let x: Vec<f64> = vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.0, 1.1, 0.9, -2.0, 0.0];
        let g: Vec<f64> = vec![1.0, 0.5, -0.3, 2.0, 0.8];
        let b: Vec<f64> = vec![0.1, 0.0, -0.2, 0.3, 0.0];
        let w: Vec<f64> = (0..10).map(|i| (i as f64 * 0.7).sin()).collect();
        let loss = |x: &[f64]| {
            let mut y = vec![0.0; 10];
            layer_norm_infer(x, &g, &b, &mut y, d);
            y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>()
        };
        let (mut y, mut xh, mut rs) = (vec![0.0; 10], vec![0.0; 10], vec![0.0; 2]);
        layer_norm(&x, &g, &b, &mut y, &mut xh, &mut rs, d);
        let (mut dg, mut db, mut dx) = (vec![0.0; d], vec![0.0; d], vec![0.0; 10]);
        layer_norm_backward(&w, &xh, &rs, &g, &mut dg, &mut db, &mut dx, d);
        for i in 0..10 {
            let mut p = x.clone();
            p[i] += 1e-6;
            let mut q = x.clone();
            q[i] -= 1e-6;
            let num = (loss(&p) - loss(&q)) / 2e-6;
            assert!((num - dx[i]).abs() < 1e-7, "i={i} {num} {}", dx[i]);
        }
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut r = vec![1000.0f32, 999.0, -5.0];
        softmax_inplace(&mut r);
        assert!((r.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        let mut ls = vec![0.0f32; 3];
        log_softmax(&[1000.0f32, 999.0, -5.0], &mut ls);
        assert!((ls[0].exp() - r[0]).abs() < 1e-4);
    }
}
