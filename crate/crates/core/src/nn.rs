//! Row-wise building blocks shared by the projector and the transformer.

use crate::linalg::Mat;

pub const LN_EPS: f64 = 1e-5;

/// Saved state of a row-wise layer normalisation.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Mat,
    pub inv_std: Vec<f64>,
}

/// Normalised rows before the affine scale and shift.
pub fn normalize_rows(x: &Mat, eps: f64) -> LayerNormCache {
    let (rows, cols) = x.shape();
    let mut xhat = Mat::zeros(rows, cols);
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv_std.push(s);
    }
    LayerNormCache { xhat, inv_std }
}

pub fn layer_norm(x: &Mat, gain: &[f64], shift: &[f64], eps: f64) -> (Mat, LayerNormCache) {
    let cache = normalize_rows(x, eps);
    let mut y = cache.xhat.clone();
    for r in 0..y.rows() {
        for ((o, g), b) in y.row_mut(r).iter_mut().zip(gain).zip(shift) {
            *o = *o * g + b;
        }
    }
    (y, cache)
}

/// Accumulates gain and shift gradients and returns the input gradient.
pub fn layer_norm_backward(
    dy: &Mat,
    cache: &LayerNormCache,
    gain: &[f64],
    dgain: &mut [f64],
    dshift: &mut [f64],
) -> Mat {
    let (rows, cols) = dy.shape();
    let n = cols as f64;
    let mut dx = Mat::zeros(rows, cols);
    let mut dxhat = vec![0.0; cols];
    for r in 0..rows {
        let xh = cache.xhat.row(r);
        let g = dy.row(r);
        let mut mean_d = 0.0;
        let mut mean_dx = 0.0;
        for j in 0..cols {
            dgain[j] += g[j] * xh[j];
            dshift[j] += g[j];
            dxhat[j] = g[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * xh[j];
        }
        mean_d /= n;
        mean_dx /= n;
        let s = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = s * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    dx
}

/// `x · w + b` with `b` a 1-row matrix.
pub fn affine(x: &Mat, w: &Mat, b: &Mat) -> Mat {
    let mut y = x.matmul(w);
    y.add_row_vector(b.as_slice());
    y
}

/// Accumulates `dw += xᵀ·dy`, `db += Σ dy` and returns `dy · wᵀ`.
pub fn affine_backward(x: &Mat, w: &Mat, dy: &Mat, dw: &mut Mat, db: &mut Mat) -> Mat {
    x.t_matmul_acc(dy, dw);
    dy.sum_rows_into(db.as_mut_slice());
    dy.matmul_t(w)
}
