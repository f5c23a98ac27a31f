//! Row-wise kernels and their vector-Jacobian products.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;

use crate::seed::Rng;

pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug, Clone, Default)]
pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Normalizes each row to zero mean and unit variance, then applies gain and bias.
pub fn layer_norm(x: ArrayView2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LayerNormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, s) in xhat.axis_iter_mut(Axis(0)).zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let k = *s;
        row.mapv_inplace(|v| v * k);
    }
    let y = &xhat * gain + bias;
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward(
    dy: ArrayView2<f64>,
    gain: &Array1<f64>,
    cache: &LayerNormCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = &dy * gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, g), xh), &s) in
        dx.axis_iter_mut(Axis(0)).zip(dxhat.axis_iter(Axis(0))).zip(cache.xhat.axis_iter(Axis(0))).zip(&cache.inv_std)
    {
        let mean_g = g.sum() / d;
        let mean_gx = g.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
        Zip::from(&mut out).and(&g).and(&xh).for_each(|o, &gi, &xi| {
            *o = s * (gi - mean_g - xi * mean_gx);
        });
    }
    (dx, dgain, dbias)
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Numerically stable softmax over each row, in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

/// VJP of row softmax: `dS = P * (dP - rowsum(dP * P))`.
pub fn softmax_rows_backward(probs: &Array2<f64>, dprobs: &Array2<f64>) -> Array2<f64> {
    let mut out = dprobs.clone();
    for (mut o, p) in out.axis_iter_mut(Axis(0)).zip(probs.axis_iter(Axis(0))) {
        let dot = o.iter().zip(p).map(|(a, b)| a * b).sum::<f64>();
        Zip::from(&mut o).and(&p).for_each(|g, &pi| *g = pi * (*g - dot));
    }
    out
}

/// Inverted dropout mask: entries are 0 or 1/(1-rate).
pub fn dropout_mask(shape: (usize, usize), rate: f64, rng: &mut Rng) -> Array2<f64> {
    let scale = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < rate { 0.0 } else { scale })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
        let h = 1e-6;
        (f(x + h) - f(x - h)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_numeric() {
        for &x in &[-3.0, -1.0, -0.1, 0.0, 0.3, 1.5, 4.0] {
            assert!((gelu_grad(x) - numeric(gelu, x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut x = array![[1.0, 2.0, 3.0], [1000.0, 1000.0, -1000.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!((x[[1, 0]] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let x = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 5.0, 10.0]];
        let g = Array1::ones(4);
        let b = Array1::zeros(4);
        let (y, _) = layer_norm(x.view(), &g, &b);
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-12);
            let var = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn layer_norm_backward_matches_numeric() {
        let x = array![[0.3, -1.2, 2.0, 0.7], [1.0, 1.1, -0.4, 0.0]];
        let g = array![1.2, 0.8, -0.5, 1.0];
        let b = array![0.1, 0.0, -0.2, 0.3];
        let w = array![[0.5, -1.0, 2.0, 0.1], [1.5, 0.2, -0.7, 0.9]];
        let loss = |x: &Array2<f64>| (&layer_norm(x.view(), &g, &b).0 * &w).sum();
        let (_, cache) = layer_norm(x.view(), &g, &b);
        let (dx, _, _) = layer_norm_backward(w.view(), &g, &cache);
        for i in 0..2 {
            for j in 0..4 {
                let mut xp = x.clone();
                xp[[i, j]] += 1e-6;
                let mut xm = x.clone();
                xm[[i, j]] -= 1e-6;
                let num = (loss(&xp) - loss(&xm)) / 2e-6;
                assert!((dx[[i, j]] - num).abs() < 1e-7, "({i},{j}) {} vs {num}", dx[[i, j]]);
            }
        }
    }
}
