//! Pixel shuffle / unshuffle (depth-to-space and space-to-depth).

use crate::error::{Error, Result};
use ndarray::{Array4, ArrayView4};

/// Space-to-depth: `[N, C, H*r, W*r] -> [N, C*r^2, H, W]`.
///
/// Output channel `c*r^2 + dh*r + dw` holds input pixel offset `(dh, dw)`.
pub fn pixel_unshuffle(x: &ArrayView4<f64>, r: usize) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Contract(format!(
            "pixel_unshuffle requires H and W divisible by {r}, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Array4::zeros((n, c * r * r, oh, ow));
    for ni in 0..n {
        for ci in 0..c {
            for dh in 0..r {
                for dw in 0..r {
                    let co = ci * r * r + dh * r + dw;
                    for i in 0..oh {
                        for j in 0..ow {
                            out[[ni, co, i, j]] = x[[ni, ci, i * r + dh, j * r + dw]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Depth-to-space: `[N, C*r^2, H, W] -> [N, C, H*r, W*r]`; inverse of
/// [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &ArrayView4<f64>, r: usize) -> Result<Array4<f64>> {
    let (n, c, h, w) = x.dim();
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::Contract(format!(
            "pixel_shuffle requires channels divisible by {}, got {c}",
            r * r
        )));
    }
    let co = c / (r * r);
    let mut out = Array4::zeros((n, co, h * r, w * r));
    for ni in 0..n {
        for ci in 0..co {
            for dh in 0..r {
                for dw in 0..r {
                    let cin = ci * r * r + dh * r + dw;
                    for i in 0..h {
                        for j in 0..w {
                            out[[ni, ci, i * r + dh, j * r + dw]] = x[[ni, cin, i, j]];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn unshuffle_matches_index_oracle_on_ramp() {
        // 1x1x4x4 ramp image; the oracle is the index arithmetic itself.
        let x = Array::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let y = pixel_unshuffle(&x.view(), 2).unwrap();
        assert_eq!(y.dim(), (1, 4, 2, 2));
        for co in 0..4 {
            let (dh, dw) = (co / 2, co % 2);
            for i in 0..2 {
                for j in 0..2 {
                    let expected = ((i * 2 + dh) * 4 + (j * 2 + dw)) as f64;
                    assert_eq!(y[[0, co, i, j]], expected, "channel {co} at ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn shuffle_inverts_unshuffle_exactly() {
        let x = Array::from_shape_fn((2, 3, 6, 8), |(n, c, i, j)| {
            (n * 1000 + c * 100 + i * 10 + j) as f64
        });
        let y = pixel_unshuffle(&x.view(), 2).unwrap();
        let z = pixel_shuffle(&y.view(), 2).unwrap();
        assert_eq!(x, z);
    }
}
