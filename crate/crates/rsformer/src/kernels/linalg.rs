//! Batched matrix products, softmax and length normalization on rank-3 data.
//!
//! All operands are `[batch, rows, cols]`; every batch item is handled
//! independently.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

fn op_dims(m: (usize, usize), t: bool) -> (usize, usize) {
    if t { (m.1, m.0) } else { m }
}

fn matmul2(a: &ArrayView2<f64>, b: &ArrayView2<f64>, ta: bool, tb: bool) -> Array2<f64> {
    match (ta, tb) {
        (false, false) => a.dot(b),
        (true, false) => a.t().dot(b),
        (false, true) => a.dot(&b.t()),
        (true, true) => a.t().dot(&b.t()),
    }
}

/// Batched matrix multiplication with optional transposes: `op(a) . op(b)`.
pub fn bmm(a: &ArrayView3<f64>, b: &ArrayView3<f64>, ta: bool, tb: bool) -> Result<Array3<f64>> {
    let (ba, ra, ca) = a.dim();
    let (bb, rb, cb) = b.dim();
    if ba != bb {
        return Err(Error::shape("bmm batch", &[ba], &[bb]));
    }
    let (m, k1) = op_dims((ra, ca), ta);
    let (k2, n) = op_dims((rb, cb), tb);
    if k1 != k2 {
        return Err(Error::Nonconformable {
            index: 0,
            lhs_rows: m,
            lhs_cols: k1,
            rhs_rows: k2,
            rhs_cols: n,
        });
    }
    let mut out = Array3::zeros((ba, m, n));
    for i in 0..ba {
        let y = matmul2(&a.index_axis(Axis(0), i), &b.index_axis(Axis(0), i), ta, tb);
        out.index_axis_mut(Axis(0), i).assign(&y);
    }
    Ok(out)
}

/// Gradients of [`bmm`]; returns `(da, db)`.
pub fn bmm_grad(
    dy: &ArrayView3<f64>,
    a: &ArrayView3<f64>,
    b: &ArrayView3<f64>,
    ta: bool,
    tb: bool,
) -> (Array3<f64>, Array3<f64>) {
    let batch = a.dim().0;
    let mut da = Array3::zeros(a.dim());
    let mut db = Array3::zeros(b.dim());
    for i in 0..batch {
        let g = dy.index_axis(Axis(0), i);
        let av = a.index_axis(Axis(0), i);
        let bv = b.index_axis(Axis(0), i);
        // dA' = dY . B'^T, dB' = A'^T . dY where primes are the transposed operands.
        let da_p = matmul2(&g, &bv, false, !tb);
        let db_p = matmul2(&av, &g, !ta, false);
        if ta {
            da.index_axis_mut(Axis(0), i).assign(&da_p.t());
        } else {
            da.index_axis_mut(Axis(0), i).assign(&da_p);
        }
        if tb {
            db.index_axis_mut(Axis(0), i).assign(&db_p.t());
        } else {
            db.index_axis_mut(Axis(0), i).assign(&db_p);
        }
    }
    (da, db)
}

/// Swaps the two trailing axes.
pub fn transpose12(x: &ArrayView3<f64>) -> Array3<f64> {
    x.permuted_axes([0, 2, 1]).to_owned()
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &ArrayView3<f64>) -> Array3<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Backward of [`softmax_last`] given the forward output.
pub fn softmax_last_grad(dy: &ArrayView3<f64>, y: &ArrayView3<f64>) -> Array3<f64> {
    let mut dx = dy.to_owned();
    for (mut drow, yrow) in dx.rows_mut().into_iter().zip(y.rows()) {
        let dot: f64 = drow.iter().zip(yrow.iter()).map(|(d, y)| d * y).sum();
        for (d, y) in drow.iter_mut().zip(yrow.iter()) {
            *d = (*d - dot) * y;
        }
    }
    dx
}

/// Stabilizer inside the row-norm square root.
pub const L2_NORM_EPS: f64 = 1e-12;

/// Scales every row of the last axis to (approximately) unit length.
pub fn l2_normalize_last(x: &ArrayView3<f64>) -> Array3<f64> {
    let mut out = x.to_owned();
    for mut row in out.rows_mut() {
        let norm = (row.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS).sqrt();
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Backward of [`l2_normalize_last`] given the original input.
pub fn l2_normalize_last_grad(dy: &ArrayView3<f64>, x: &ArrayView3<f64>) -> Array3<f64> {
    let mut dx = dy.to_owned();
    for (mut drow, xrow) in dx.rows_mut().into_iter().zip(x.rows()) {
        let norm = (xrow.iter().map(|v| v * v).sum::<f64>() + L2_NORM_EPS).sqrt();
        let inv = 1.0 / norm;
        let dot: f64 = drow.iter().zip(xrow.iter()).map(|(d, x)| d * x).sum();
        for (d, x) in drow.iter_mut().zip(xrow.iter()) {
            *d = inv * (*d - x * dot * inv * inv);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn rnd(b: usize, r: usize, c: usize, salt: usize) -> Array3<f64> {
        Array::from_shape_fn((b, r, c), |(i, j, k)| {
            (((i * 131 + j * 31 + k * 7 + salt * 97) % 41) as f64) * 0.05 - 1.0
        })
    }

    /// Triple-loop product used as an oracle against the BLAS-backed path.
    fn naive_mm(a: &Array3<f64>, b: &Array3<f64>) -> Array3<f64> {
        let (nb, m, k) = a.dim();
        let n = b.dim().2;
        let mut out = Array3::zeros((nb, m, n));
        for bi in 0..nb {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for kk in 0..k {
                        acc += a[[bi, i, kk]] * b[[bi, kk, j]];
                    }
                    out[[bi, i, j]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn bmm_matches_triple_loop() {
        let a = rnd(2, 5, 4, 1);
        let b = rnd(2, 4, 6, 2);
        let got = bmm(&a.view(), &b.view(), false, false).unwrap();
        let want = naive_mm(&a, &b);
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn bmm_transpose_flags() {
        let a = rnd(1, 4, 5, 3);
        let b = rnd(1, 6, 4, 4);
        let got = bmm(&a.view(), &b.view(), true, true).unwrap();
        assert_eq!(got.dim(), (1, 5, 6));
        let at = transpose12(&a.view());
        let bt = transpose12(&b.view());
        let want = naive_mm(&at, &bt);
        assert!((&got - &want).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = rnd(2, 3, 7, 5);
        let y = softmax_last(&x.view());
        for row in y.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nonconformable_reports_shapes() {
        let a = rnd(1, 3, 4, 0);
        let b = rnd(1, 5, 6, 0);
        assert!(bmm(&a.view(), &b.view(), false, false).is_err());
    }
}
