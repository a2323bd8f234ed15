//! Dense, layer-norm and GELU primitives with their backward passes.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::params::{Dense, LayerNormParams};

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-form GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// `x W + b`.
pub fn dense_forward(x: ArrayView2<f64>, layer: &Dense) -> Array2<f64> {
    let mut y = x.dot(&layer.weight);
    y += &layer.bias;
    y
}

/// Accumulates `dW += xᵀ dy`, `db += Σ_rows dy` and returns `dx = dy Wᵀ`.
pub fn dense_backward(x: ArrayView2<f64>, layer: &Dense, dy: ArrayView2<f64>, grad: &mut Dense) -> Array2<f64> {
    grad.weight += &x.t().dot(&dy);
    grad.bias += &dy.sum_axis(Axis(0));
    dy.dot(&layer.weight.t())
}

/// Same as [`dense_backward`] without the input gradient.
pub fn dense_backward_params(x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Dense) {
    grad.weight += &x.t().dot(&dy);
    grad.bias += &dy.sum_axis(Axis(0));
}

/// Normalized rows and inverse standard deviations saved for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerNormCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

pub fn layer_norm_forward(x: ArrayView2<f64>, p: &LayerNormParams) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.dot(&row) / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let inv = *s;
        row.mapv_inplace(|v| v * inv);
    }
    let mut y = &xhat * &p.gain;
    y += &p.bias;
    (y, LayerNormCache { xhat, inv_std })
}

pub fn layer_norm_backward(
    cache: &LayerNormCache,
    p: &LayerNormParams,
    dy: ArrayView2<f64>,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    grad.gain += &(&dy * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = &dy * &p.gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        for j in 0..out.len() {
            out[j] = s * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    dx
}
