//! Unnormalized 2-D discrete Fourier transforms.

use ndarray::{Array2, ArrayView2};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

fn fft2_inplace(data: &mut Array2<Complex64>, inverse: bool) {
    let (m, n) = data.dim();
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(n)
    } else {
        planner.plan_fft_forward(n)
    };
    for mut row in data.rows_mut() {
        let slice = row.as_slice_mut().expect("row contiguous");
        row_fft.process(slice);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(m)
    } else {
        planner.plan_fft_forward(m)
    };
    let mut scratch = vec![Complex64::default(); m];
    for j in 0..data.dim().1 {
        for i in 0..m {
            scratch[i] = data[[i, j]];
        }
        col_fft.process(&mut scratch);
        for i in 0..m {
            data[[i, j]] = scratch[i];
        }
    }
}

/// Forward unnormalized 2-D DFT of a real plane (no `1/(MN)` factor).
pub fn dft2_plane(x: &ArrayView2<f64>) -> Array2<Complex64> {
    let mut data = x.mapv(|v| Complex64::new(v, 0.0));
    fft2_inplace(&mut data, false);
    data
}

/// Inverse 2-D DFT normalized by `1/(MN)`, so `idft2(dft2(x)) == x`.
pub fn idft2_plane(x: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let mut data = x.to_owned();
    fft2_inplace(&mut data, true);
    let scale = 1.0 / (data.len() as f64);
    data.mapv_inplace(|v| v * scale);
    data
}
