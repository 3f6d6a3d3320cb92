//! Row-wise kernels: affine maps, softmax, layer normalization, set max-pool.

use ndarray::{Array1, Array2, ArrayBase, Axis, Data, Ix2};

use super::{Matrix, ParamGrads, ParamStore};
use crate::error::{Error, Result};

/// Normalization epsilon. Small enough that a unit-variance row is left
/// unchanged to ~1e-12.
pub const LN_EPS: f64 = 1e-12;

/// `x · W + b` with `W` stored as `[in, out]` under `{prefix}.weight` and `b`
/// as `[1, out]` under `{prefix}.bias`.
pub fn linear(x: &Matrix, params: &ParamStore, prefix: &str) -> Result<Matrix> {
    affine(x, params, prefix, false)
}

/// [`linear`] with an optional fused ReLU.
pub(crate) fn affine<S: Data<Elem = f64>>(
    x: &ArrayBase<S, Ix2>,
    params: &ParamStore,
    prefix: &str,
    relu: bool,
) -> Result<Matrix> {
    let w = params.get(&format!("{prefix}.weight"))?;
    let b = params.get(&format!("{prefix}.bias"))?;
    if x.ncols() != w.nrows() {
        return Err(Error::dim(format!("{prefix} input width"), w.nrows(), x.ncols()));
    }
    if b.dim() != (1, w.ncols()) {
        return Err(Error::dim(format!("{prefix} bias width"), w.ncols(), b.ncols()));
    }
    let mut y = x.dot(w);
    let b = b.row(0);
    let b = b.as_slice().expect("contiguous bias");
    for mut row in y.rows_mut() {
        let row = row.as_slice_mut().expect("row-major product");
        if relu {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v = (*v + bj).max(0.0);
            }
        } else {
            for (v, &bj) in row.iter_mut().zip(b) {
                *v += bj;
            }
        }
    }
    Ok(y)
}

/// Backward of [`linear`]: accumulates weight/bias gradients, returns `dL/dx`.
pub fn linear_backward(
    upstream: &Matrix,
    x: &Matrix,
    params: &ParamStore,
    prefix: &str,
    grads: &mut ParamGrads,
) -> Result<Matrix> {
    let w = params.get(&format!("{prefix}.weight"))?;
    grads.accumulate(&format!("{prefix}.weight"), x.t().dot(upstream));
    grads.accumulate(&format!("{prefix}.bias"), upstream.sum_axis(Axis(0)).insert_axis(Axis(0)));
    Ok(upstream.dot(&w.t()))
}

/// Registers seeded `[in, out]` weight and `[1, out]` bias tensors.
pub fn init_linear(params: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize) {
    params.init(&format!("{prefix}.weight"), (d_in, d_out), d_in);
    params.init(&format!("{prefix}.bias"), (1, d_out), d_in);
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    y
}

/// Given `y = softmax(x)` row-wise and `dL/dy`, returns `dL/dx`.
pub fn softmax_rows_backward(y: &Matrix, dy: &Matrix) -> Matrix {
    let mut dx = Array2::zeros(y.dim());
    for ((yr, dyr), mut dxr) in y.rows().into_iter().zip(dy.rows()).zip(dx.rows_mut()) {
        let inner = yr.dot(&dyr);
        for ((d, &yv), &g) in dxr.iter_mut().zip(yr).zip(dyr) {
            *d = yv * (g - inner);
        }
    }
    dx
}

/// Cached state of a layer-norm forward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    xhat: Matrix,
    inv_std: Array1<f64>,
}

/// Row-wise layer normalization with learned affine `{prefix}.gamma`, `{prefix}.beta` (`[1, d]`).
pub fn layer_norm(x: &Matrix, params: &ParamStore, prefix: &str) -> Result<(Matrix, LayerNormCache)> {
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    let beta = params.get(&format!("{prefix}.beta"))?;
    if gamma.ncols() != x.ncols() || beta.ncols() != x.ncols() {
        return Err(Error::dim(format!("{prefix} width"), gamma.ncols(), x.ncols()));
    }
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (i, mut row) in xhat.rows_mut().into_iter().enumerate() {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        let is = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std[i] = is;
    }
    let y = &xhat * gamma + beta;
    Ok((y, LayerNormCache { xhat, inv_std }))
}

pub fn layer_norm_backward(
    dy: &Matrix,
    cache: &LayerNormCache,
    params: &ParamStore,
    prefix: &str,
    grads: &mut ParamGrads,
) -> Result<Matrix> {
    let gamma = params.get(&format!("{prefix}.gamma"))?;
    grads.accumulate(&format!("{prefix}.gamma"), (dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
    grads.accumulate(&format!("{prefix}.beta"), dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
    let dxhat = dy * gamma;
    let d = dy.ncols() as f64;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let is = cache.inv_std[i];
        for j in 0..dy.ncols() {
            dx[[i, j]] = is * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    Ok(dx)
}

pub fn init_layer_norm(params: &mut ParamStore, prefix: &str, d: usize) {
    let g = format!("{prefix}.gamma");
    if !params.contains(&g) {
        params.insert(g, Array2::ones((1, d))).expect("fresh tensor");
        params.insert(format!("{prefix}.beta"), Array2::zeros((1, d))).expect("fresh tensor");
    }
}

/// Column-wise maximum over a set of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub values: Vec<f64>,
    /// Row index of each column's maximum; lowest index wins ties.
    pub argmax: Vec<usize>,
    pub rows: usize,
    /// True when the input had no rows; `values` is then all zeros.
    pub empty: bool,
}

pub fn maxpool_set<S: Data<Elem = f64>>(features: &ArrayBase<S, Ix2>) -> MaxPool {
    let (m, d) = features.dim();
    if m == 0 {
        return MaxPool { values: vec![0.0; d], argmax: vec![0; d], rows: 0, empty: true };
    }
    let mut values = features.row(0).to_vec();
    let mut argmax = vec![0; d];
    for i in 1..m {
        for (j, &v) in features.row(i).iter().enumerate() {
            if v > values[j] {
                values[j] = v;
                argmax[j] = i;
            }
        }
    }
    MaxPool { values, argmax, rows: m, empty: false }
}

/// Routes `upstream[j]` to row `argmax[j]`.
pub fn maxpool_backward(upstream: &[f64], pool: &MaxPool) -> Matrix {
    let mut dx = Array2::zeros((pool.rows, upstream.len()));
    if !pool.empty {
        for (j, &g) in upstream.iter().enumerate() {
            dx[[pool.argmax[j], j]] += g;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let y = softmax_rows(&array![[3.0, 3.0, 3.0, 3.0]]);
        for v in y.iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = array![[1.0, -2.0, 700.0], [0.1, 0.2, 0.3]];
        let y = softmax_rows(&x);
        for r in y.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_stats() {
        let mut p = ParamStore::new(0);
        init_layer_norm(&mut p, "ln", 5);
        let x = array![[1.0, 4.0, -2.0, 0.5, 9.0], [0.1, 0.2, 0.0, -0.1, 0.3]];
        let (y, _) = layer_norm(&x, &p, "ln").unwrap();
        for r in y.rows() {
            let mean = r.sum() / 5.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
            assert!(mean.abs() <= 1e-12);
            assert!((var - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn layer_norm_keeps_normalized_row() {
        let mut p = ParamStore::new(0);
        init_layer_norm(&mut p, "ln", 4);
        let x = array![[1.0, -1.0, 1.0, -1.0]];
        let (y, _) = layer_norm(&x, &p, "ln").unwrap();
        for (a, b) in x.iter().zip(y.iter()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn maxpool_single_row_and_ties() {
        let p = maxpool_set(&array![[1.0, -2.0]]);
        assert_eq!(p.values, vec![1.0, -2.0]);
        let p = maxpool_set(&array![[1.0, 5.0], [1.0, 2.0], [0.0, 5.0]]);
        assert_eq!(p.values, vec![1.0, 5.0]);
        assert_eq!(p.argmax, vec![0, 0]);
        let dx = maxpool_backward(&[2.0, 3.0], &p);
        assert_eq!(dx, array![[2.0, 3.0], [0.0, 0.0], [0.0, 0.0]]);
    }

    #[test]
    fn maxpool_empty_is_flagged_zero() {
        let p = maxpool_set(&Array2::zeros((0, 3)));
        assert!(p.empty);
        assert_eq!(p.values, vec![0.0; 3]);
    }
}
