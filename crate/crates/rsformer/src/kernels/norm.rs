//! Channel layer normalization (pixel-as-token).

use crate::kernels::reduce::pairwise_sum;
use ndarray::{Array1, Array3, Array4, ArrayView4};

/// Saved statistics for the backward pass.
pub struct LayerNormSaved {
    pub mean: Array3<f64>,
    pub rstd: Array3<f64>,
}

/// Normalizes the channel vector at every `(batch, row, col)` location to zero
/// mean and unit variance (population variance, `+ eps` under the root), then
/// applies the per-channel affine transform.
///
/// The channel mean uses pairwise summation, so a vector that is constant
/// across channels has an exactly-zero numerator whenever the channel count
/// is a power of two.
pub fn layer_norm_channels(
    x: &ArrayView4<f64>,
    gamma: &Array1<f64>,
    beta: &Array1<f64>,
    eps: f64,
) -> (Array4<f64>, LayerNormSaved) {
    let (n, c, h, w) = x.dim();
    let mut out = Array4::zeros((n, c, h, w));
    let mut mean = Array3::zeros((n, h, w));
    let mut rstd = Array3::zeros((n, h, w));
    let inv_c = 1.0 / c as f64;
    let mut chan = vec![0.0f64; c];
    let mut devs = vec![0.0f64; c];
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                for ci in 0..c {
                    chan[ci] = x[[ni, ci, i, j]];
                }
                let mu = pairwise_sum(&chan) * inv_c;
                for ci in 0..c {
                    let d = chan[ci] - mu;
                    devs[ci] = d * d;
                }
                let var = pairwise_sum(&devs) * inv_c;
                let r = 1.0 / (var + eps).sqrt();
                mean[[ni, i, j]] = mu;
                rstd[[ni, i, j]] = r;
                for ci in 0..c {
                    out[[ni, ci, i, j]] = gamma[ci] * (chan[ci] - mu) * r + beta[ci];
                }
            }
        }
    }
    (out, LayerNormSaved { mean, rstd })
}

/// Backward pass; returns `(dx, dgamma, dbeta)`.
pub fn layer_norm_channels_grad(
    dy: &ArrayView4<f64>,
    x: &ArrayView4<f64>,
    gamma: &Array1<f64>,
    saved: &LayerNormSaved,
) -> (Array4<f64>, Array1<f64>, Array1<f64>) {
    let (n, c, h, w) = x.dim();
    let mut dx = Array4::zeros((n, c, h, w));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    let inv_c = 1.0 / c as f64;
    for ni in 0..n {
        for i in 0..h {
            for j in 0..w {
                let mu = saved.mean[[ni, i, j]];
                let r = saved.rstd[[ni, i, j]];
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                for ci in 0..c {
                    let xhat = (x[[ni, ci, i, j]] - mu) * r;
                    let g = dy[[ni, ci, i, j]];
                    dgamma[ci] += g * xhat;
                    dbeta[ci] += g;
                    let dxhat = g * gamma[ci];
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                }
                for ci in 0..c {
                    let xhat = (x[[ni, ci, i, j]] - mu) * r;
                    let dxhat = dy[[ni, ci, i, j]] * gamma[ci];
                    dx[[ni, ci, i, j]] =
                        r * (dxhat - inv_c * sum_dxhat - xhat * inv_c * sum_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array4};

    #[test]
    fn two_channel_hand_case() {
        // Channel vector [1, 3]: mean 2, population std 1, output [-1, 1].
        let mut x = Array4::zeros((1, 2, 1, 1));
        x[[0, 0, 0, 0]] = 1.0;
        x[[0, 1, 0, 0]] = 3.0;
        let (y, _) = layer_norm_channels(&x.view(), &arr1(&[1.0, 1.0]), &arr1(&[0.0, 0.0]), 0.0);
        assert_eq!(y[[0, 0, 0, 0]], -1.0);
        assert_eq!(y[[0, 1, 0, 0]], 1.0);
    }

    #[test]
    fn constant_channels_normalize_to_zero() {
        // Power-of-two channel count keeps the pairwise mean exact.
        let x = Array4::from_elem((2, 4, 2, 2), 0.7);
        let (y, _) = layer_norm_channels(&x.view(), &arr1(&[1.0; 4]), &arr1(&[0.0; 4]), 1e-6);
        assert!(y.iter().all(|&v| v == 0.0));
    }
}
