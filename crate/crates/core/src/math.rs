//! Scalar abstraction and the small numeric kernels shared by the model.
//!
//! The whole model is generic over [`Scalar`] so experiments run in f32 while
//! gradient-check tests run the same code in f64.

use ndarray::{Array1, Array2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// Floating point element type of the model (f32 or f64).
pub trait Scalar:
    LinalgScalar
    + Float
    + ScalarOperand
    + FromPrimitive
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from f64 (named to avoid clashing with `FromPrimitive`).
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}
impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

/// tanh-approximated GELU.
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::of(0.044_715);
    let half = F::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * x * (F::one() + t)
}

/// Derivative of [`gelu`], consistent with the tanh approximation.
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let k = F::of(0.044_715);
    let half = F::of(0.5);
    let three = F::of(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = F::one() - t * t;
    half * (F::one() + t) + half * x * sech2 * c * (F::one() + three * k * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<F: Scalar>(z: &Array2<F>) -> Array2<F> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.iter().cloned().fold(F::zero(), |a, b| a + b);
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Backward of row-wise softmax: given probabilities `p` and upstream `dp`,
/// returns the gradient w.r.t. the logits.
pub fn softmax_rows_backward<F: Scalar>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut dz = Array2::zeros(p.raw_dim());
    for ((p_row, dp_row), mut dz_row) in
        p.rows().into_iter().zip(dp.rows()).zip(dz.rows_mut())
    {
        let dot = p_row
            .iter()
            .zip(dp_row.iter())
            .fold(F::zero(), |acc, (&pi, &di)| acc + pi * di);
        for ((dzi, &pi), &di) in dz_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *dzi = pi * (di - dot);
        }
    }
    dz
}

pub fn softmax_vec<F: Scalar>(z: &Array1<F>) -> Array1<F> {
    let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut out = z.mapv(|v| (v - max).exp());
    let sum = out.iter().cloned().fold(F::zero(), |a, b| a + b);
    out.mapv_inplace(|v| v / sum);
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Cached quantities needed for the layer-norm backward pass.
pub struct LayerNormCache<F> {
    /// Normalized input (before scale/shift), one row per token.
    pub normed: Array2<F>,
    /// 1 / sqrt(var + eps) per row.
    pub rstd: Array1<F>,
}

/// Per-row layer normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn layer_norm<F: Scalar>(
    x: &Array2<F>,
    gamma: &Array1<F>,
    beta: &Array1<F>,
) -> (Array2<F>, LayerNormCache<F>) {
    let (rows, cols) = x.dim();
    let dim = F::of(cols as f64);
    let eps = F::of(LAYER_NORM_EPS);
    let mut normed = Array2::zeros((rows, cols));
    let mut rstd = Array1::zeros(rows);
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().cloned().fold(F::zero(), |a, b| a + b) / dim;
        let var = row
            .iter()
            .map(|&v| (v - mean) * (v - mean))
            .fold(F::zero(), |a, b| a + b)
            / dim;
        let rs = F::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..cols {
            let n = (x[[r, c]] - mean) * rs;
            normed[[r, c]] = n;
            out[[r, c]] = gamma[c] * n + beta[c];
        }
    }
    (out, LayerNormCache { normed, rstd })
}

/// Gradients produced by [`layer_norm_backward`].
pub struct LayerNormGrads<F> {
    pub d_input: Array2<F>,
    pub d_gamma: Array1<F>,
    pub d_beta: Array1<F>,
}

pub fn layer_norm_backward<F: Scalar>(
    gamma: &Array1<F>,
    cache: &LayerNormCache<F>,
    d_out: &Array2<F>,
) -> LayerNormGrads<F> {
    let (rows, cols) = cache.normed.dim();
    let dim = F::of(cols as f64);
    let mut d_input = Array2::zeros((rows, cols));
    let mut d_gamma = Array1::zeros(cols);
    let mut d_beta = Array1::zeros(cols);
    for r in 0..rows {
        // g = d_out * gamma, per coordinate of this row
        let mut g_mean = F::zero();
        let mut gn_mean = F::zero();
        for c in 0..cols {
            let g = d_out[[r, c]] * gamma[c];
            g_mean = g_mean + g;
            gn_mean = gn_mean + g * cache.normed[[r, c]];
            d_gamma[c] = d_gamma[c] + d_out[[r, c]] * cache.normed[[r, c]];
            d_beta[c] = d_beta[c] + d_out[[r, c]];
        }
        g_mean = g_mean / dim;
        gn_mean = gn_mean / dim;
        let rs = cache.rstd[r];
        for c in 0..cols {
            let g = d_out[[r, c]] * gamma[c];
            d_input[[r, c]] = rs * (g - g_mean - cache.normed[[r, c]] * gn_mean);
        }
    }
    LayerNormGrads {
        d_input,
        d_gamma,
        d_beta,
    }
}

/// Fixed sinusoidal positional encodings over `n` positions and `dim` channels.
pub fn sinusoidal_positions<F: Scalar>(n: usize, dim: usize) -> Array2<F> {
    let mut pos = Array2::zeros((n, dim));
    for p in 0..n {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let rate = (p as f64) / 10_000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { rate.sin() } else { rate.cos() };
            pos[[p, i]] = F::of(v);
        }
    }
    pos
}

/// FNV-1a over a byte stream; used for config hashes and frozen-backbone digests.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x1_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-2.5f64, -0.7, 0.0, 0.3, 1.9] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let z = array![[1.0f64, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        let p = softmax_rows(&z);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let z = array![[0.3f64, -1.2, 0.8, 0.1]];
        let dp = array![[0.5f64, -0.25, 1.5, 0.0]];
        let analytic = softmax_rows_backward(&softmax_rows(&z), &dp);
        let h = 1e-6;
        for j in 0..4 {
            let mut zp = z.clone();
            zp[[0, j]] += h;
            let mut zm = z.clone();
            zm[[0, j]] -= h;
            let f = |p: &Array2<f64>| -> f64 {
                softmax_rows(p)
                    .iter()
                    .zip(dp.iter())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((analytic[[0, j]] - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_output_is_normalized() {
        let x = array![[1.0f64, 2.0, 3.0, 4.0]];
        let gamma = Array1::ones(4);
        let beta = Array1::zeros(4);
        let (y, _) = layer_norm(&x, &gamma, &beta);
        let mean: f64 = y.row(0).sum() / 4.0;
        let var: f64 = y.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let x = array![[0.5f64, -1.0, 2.0], [0.1, 0.0, -0.4]];
        let gamma = array![1.1f64, 0.9, 1.3];
        let beta = array![0.0f64, 0.2, -0.1];
        let d_out = array![[1.0f64, -2.0, 0.5], [0.3, 0.7, -1.1]];
        let (_, cache) = layer_norm(&x, &gamma, &beta);
        let grads = layer_norm_backward(&gamma, &cache, &d_out);
        let h = 1e-6;
        let loss = |x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>| -> f64 {
            let (y, _) = layer_norm(x, g, b);
            y.iter().zip(d_out.iter()).map(|(a, c)| a * c).sum()
        };
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&xp, &gamma, &beta) - loss(&xm, &gamma, &beta)) / (2.0 * h);
                assert!((grads.d_input[[r, c]] - fd).abs() < 1e-7);
            }
        }
        for c in 0..3 {
            let mut gp = gamma.clone();
            gp[c] += h;
            let mut gm = gamma.clone();
            gm[c] -= h;
            let fd = (loss(&x, &gp, &beta) - loss(&x, &gm, &beta)) / (2.0 * h);
            assert!((grads.d_gamma[c] - fd).abs() < 1e-7);
            let mut bp = beta.clone();
            bp[c] += h;
            let mut bm = beta.clone();
            bm[c] -= h;
            let fd = (loss(&x, &gamma, &bp) - loss(&x, &gamma, &bm)) / (2.0 * h);
            assert!((grads.d_beta[c] - fd).abs() < 1e-7);
        }
    }

    #[test]
    fn positional_encodings_are_bounded_and_distinct() {
        let pos = sinusoidal_positions::<f64>(16, 8);
        assert!(pos.iter().all(|v| v.abs() <= 1.0));
        assert_ne!(pos.row(0).to_vec(), pos.row(1).to_vec());
    }

    #[test]
    fn fnv1a64_is_stable() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_ne!(fnv1a64(b"a"), fnv1a64(b"b"));
    }
}
