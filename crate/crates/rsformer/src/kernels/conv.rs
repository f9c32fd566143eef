//! 2-D convolution and transposed convolution with analytic gradients.
//!
//! Layout is NCHW throughout. Forward convolution runs as im2col + matmul per
//! batch item and group, which covers pointwise (k = 1), dense and depth-wise
//! (groups = channels) cases uniformly. Gradients reuse the same column
//! buffers: `dW = dY · cols^T` and `dX = col2im(W^T · dY)`.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, Array4, ArrayView4, s};
use serde::{Deserialize, Serialize};

/// Boundary handling for the implicit padding band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    /// Pad with zeros (default everywhere).
    Zero,
    /// Wrap around (test mode for translation-covariance properties).
    Circular,
}

/// Static description of a convolution, minus the tensor shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub pad_mode: PadMode,
}

impl ConvSpec {
    pub fn pointwise() -> Self {
        Self { stride: 1, padding: 0, groups: 1, pad_mode: PadMode::Zero }
    }

    /// Same-size convolution for an odd kernel `k`.
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, padding: (kernel - 1) / 2, groups: 1, pad_mode: PadMode::Zero }
    }

    /// Depth-wise same-size convolution over `channels`.
    pub fn depthwise(kernel: usize, channels: usize) -> Self {
        Self { stride: 1, padding: (kernel - 1) / 2, groups: channels, pad_mode: PadMode::Zero }
    }

    /// Stride-2 halving convolution for an odd kernel.
    pub fn halving(kernel: usize) -> Self {
        Self { stride: 2, padding: (kernel - 1) / 2, groups: 1, pad_mode: PadMode::Zero }
    }

    pub fn with_pad_mode(mut self, mode: PadMode) -> Self {
        self.pad_mode = mode;
        self
    }
}

/// Transposed convolution description; output size is
/// `(in - 1) * stride - 2 * padding + kernel + output_padding`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
}

impl ConvTransposeSpec {
    /// Exact 2x upsampling: kernel 2, stride 2, no padding.
    pub fn doubling() -> Self {
        Self { stride: 2, padding: 0, output_padding: 0 }
    }
}

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let padded = input + 2 * padding;
    if padded < kernel {
        return 0;
    }
    (padded - kernel) / stride + 1
}

fn pad_input(x: &ArrayView4<f64>, padding: usize, mode: PadMode) -> Array4<f64> {
    let (n, c, h, w) = x.dim();
    if padding == 0 {
        return x.to_owned();
    }
    let (hp, wp) = (h + 2 * padding, w + 2 * padding);
    let mut out = Array4::zeros((n, c, hp, wp));
    out.slice_mut(s![.., .., padding..padding + h, padding..padding + w])
        .assign(x);
    if mode == PadMode::Circular {
        let p = padding as isize;
        for i in 0..hp {
            for j in 0..wp {
                let ih = (i as isize - p).rem_euclid(h as isize) as usize;
                let jw = (j as isize - p).rem_euclid(w as isize) as usize;
                if ih + padding != i || jw + padding != j {
                    for ni in 0..n {
                        for ci in 0..c {
                            out[[ni, ci, i, j]] = x[[ni, ci, ih, jw]];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Folds a gradient w.r.t. the padded input back onto the original extent.
fn unpad_grad(dxp: &Array4<f64>, padding: usize, mode: PadMode, h: usize, w: usize) -> Array4<f64> {
    let (n, c, _, _) = dxp.dim();
    if padding == 0 {
        return dxp.clone();
    }
    match mode {
        PadMode::Zero => dxp
            .slice(s![.., .., padding..padding + h, padding..padding + w])
            .to_owned(),
        PadMode::Circular => {
            let mut dx = Array4::zeros((n, c, h, w));
            let p = padding as isize;
            for ((ni, ci, i, j), &g) in dxp.indexed_iter() {
                let ih = (i as isize - p).rem_euclid(h as isize) as usize;
                let jw = (j as isize - p).rem_euclid(w as isize) as usize;
                dx[[ni, ci, ih, jw]] += g;
            }
            dx
        }
    }
}

fn validate_conv(x: &ArrayView4<f64>, w: &ArrayView4<f64>, spec: &ConvSpec) -> Result<()> {
    let (_, c_in, _, _) = x.dim();
    let (c_out, c_in_g, kh, kw) = w.dim();
    if spec.stride == 0 || spec.groups == 0 {
        return Err(Error::Config("conv stride and groups must be >= 1".into()));
    }
    if kh != kw {
        return Err(Error::Config(format!("only square kernels supported, got {kh}x{kw}")));
    }
    if c_in % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(Error::Config(format!(
            "channels ({c_in} in, {c_out} out) not divisible by groups {}",
            spec.groups
        )));
    }
    if c_in_g != c_in / spec.groups {
        return Err(Error::shape(
            "conv weight channel group",
            &[c_out, c_in / spec.groups, kh, kw],
            &[c_out, c_in_g, kh, kw],
        ));
    }
    Ok(())
}

fn im2col(
    xp: &Array4<f64>,
    n: usize,
    group_ch: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) -> Array2<f64> {
    let cg = group_ch.len();
    let mut cols = Array2::zeros((cg * k * k, oh * ow));
    let xs = xp.as_slice().expect("padded input is contiguous");
    let (_, c, hp, wp) = xp.dim();
    let base_n = n * c * hp * wp;
    for (ci_local, ci) in group_ch.enumerate() {
        let base_c = base_n + ci * hp * wp;
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci_local * k + kh) * k + kw;
                let mut col_row = cols.row_mut(row);
                let dst = col_row.as_slice_mut().expect("row contiguous");
                for i in 0..oh {
                    let src = base_c + (i * stride + kh) * wp + kw;
                    for j in 0..ow {
                        dst[i * ow + j] = xs[src + j * stride];
                    }
                }
            }
        }
    }
    cols
}

fn col2im_accum(
    dcols: &Array2<f64>,
    dxp: &mut Array4<f64>,
    n: usize,
    group_ch: std::ops::Range<usize>,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let (_, c, hp, wp) = dxp.dim();
    let xs = dxp.as_slice_mut().expect("contiguous");
    let base_n = n * c * hp * wp;
    for (ci_local, ci) in group_ch.enumerate() {
        let base_c = base_n + ci * hp * wp;
        for kh in 0..k {
            for kw in 0..k {
                let row = (ci_local * k + kh) * k + kw;
                let src = dcols.row(row);
                let src = src.as_slice().expect("row contiguous");
                for i in 0..oh {
                    let dst = base_c + (i * stride + kh) * wp + kw;
                    for j in 0..ow {
                        xs[dst + j * stride] += src[i * ow + j];
                    }
                }
            }
        }
    }
}

/// Forward convolution; weight is `[c_out, c_in/groups, k, k]`.
pub fn conv2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    spec: &ConvSpec,
) -> Result<Array4<f64>> {
    validate_conv(x, w, spec)?;
    let (n, c_in, h, wd) = x.dim();
    let (c_out, _, k, _) = w.dim();
    let oh = conv_output_size(h, k, spec.stride, spec.padding);
    let ow = conv_output_size(wd, k, spec.stride, spec.padding);
    if oh == 0 || ow == 0 {
        return Err(Error::Contract(format!(
            "conv output would be empty for input {h}x{wd} with kernel {k}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::shape("conv bias", &[c_out], &[b.len()]));
        }
    }
    let xp = pad_input(x, spec.padding, spec.pad_mode);
    let cg = c_in / spec.groups;
    let cog = c_out / spec.groups;
    let w_mat = w
        .to_shape((c_out, cg * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut out = Array4::zeros((n, c_out, oh, ow));
    for ni in 0..n {
        for g in 0..spec.groups {
            let cols = im2col(&xp, ni, g * cg..(g + 1) * cg, k, spec.stride, oh, ow);
            let wg = w_mat.slice(s![g * cog..(g + 1) * cog, ..]);
            let y = wg.dot(&cols);
            out.slice_mut(s![ni, g * cog..(g + 1) * cog, .., ..])
                .assign(&y.into_shape_with_order((cog, oh, ow)).expect("output reshape"));
        }
    }
    if let Some(b) = bias {
        for co in 0..c_out {
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + b[co]);
        }
    }
    Ok(out)
}

/// Gradient of `conv2d` w.r.t. its input.
pub fn conv2d_grad_input(
    dy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    x_dim: (usize, usize, usize, usize),
    spec: &ConvSpec,
) -> Array4<f64> {
    let (n, c_in, h, wd) = x_dim;
    let (c_out, _, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let cg = c_in / spec.groups;
    let cog = c_out / spec.groups;
    let w_mat = w
        .to_shape((c_out, cg * k * k))
        .expect("weight reshape")
        .to_owned();
    let mut dxp = Array4::zeros((n, c_in, h + 2 * spec.padding, wd + 2 * spec.padding));
    for ni in 0..n {
        for g in 0..spec.groups {
            let dy_g = dy
                .slice(s![ni, g * cog..(g + 1) * cog, .., ..])
                .to_shape((cog, oh * ow))
                .expect("dy reshape")
                .to_owned();
            let wg = w_mat.slice(s![g * cog..(g + 1) * cog, ..]);
            let dcols = wg.t().dot(&dy_g);
            col2im_accum(&dcols, &mut dxp, ni, g * cg..(g + 1) * cg, k, spec.stride, oh, ow);
        }
    }
    unpad_grad(&dxp, spec.padding, spec.pad_mode, h, wd)
}

/// Gradient of `conv2d` w.r.t. its weight.
pub fn conv2d_grad_weight(
    dy: &ArrayView4<f64>,
    x: &ArrayView4<f64>,
    w_dim: (usize, usize, usize, usize),
    spec: &ConvSpec,
) -> Array4<f64> {
    let (n, _, _, _) = x.dim();
    let (c_out, cg, k, _) = w_dim;
    let (_, _, oh, ow) = dy.dim();
    let cog = c_out / spec.groups;
    let xp = pad_input(x, spec.padding, spec.pad_mode);
    let mut dw_mat = Array2::zeros((c_out, cg * k * k));
    for ni in 0..n {
        for g in 0..spec.groups {
            let cols = im2col(&xp, ni, g * cg..(g + 1) * cg, k, spec.stride, oh, ow);
            let dy_g = dy
                .slice(s![ni, g * cog..(g + 1) * cog, .., ..])
                .to_shape((cog, oh * ow))
                .expect("dy reshape")
                .to_owned();
            let contrib = dy_g.dot(&cols.t());
            let mut target = dw_mat.slice_mut(s![g * cog..(g + 1) * cog, ..]);
            target += &contrib;
        }
    }
    dw_mat
        .into_shape_with_order((c_out, cg, k, k))
        .expect("dw reshape")
}

/// Gradient of `conv2d` w.r.t. its bias: sums over batch and space.
pub fn conv2d_grad_bias(dy: &ArrayView4<f64>) -> Array1<f64> {
    let (n, c_out, oh, ow) = dy.dim();
    let mut db = Array1::zeros(c_out);
    for ni in 0..n {
        for co in 0..c_out {
            let mut acc = 0.0;
            for i in 0..oh {
                for j in 0..ow {
                    acc += dy[[ni, co, i, j]];
                }
            }
            db[co] += acc;
        }
    }
    db
}

/// Forward transposed convolution; weight is `[c_in, c_out, k, k]`.
pub fn conv_transpose2d(
    x: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    bias: Option<&Array1<f64>>,
    spec: &ConvTransposeSpec,
) -> Result<Array4<f64>> {
    let (n, c_in, h, wd) = x.dim();
    let (wc_in, c_out, k, kw) = w.dim();
    if wc_in != c_in {
        return Err(Error::shape("conv_transpose weight", &[c_in, c_out, k, k], &[wc_in, c_out, k, kw]));
    }
    if spec.stride == 0 {
        return Err(Error::Config("conv_transpose stride must be >= 1".into()));
    }
    let oh = (h - 1) * spec.stride + k + spec.output_padding;
    let ow = (wd - 1) * spec.stride + k + spec.output_padding;
    if oh < 2 * spec.padding || ow < 2 * spec.padding {
        return Err(Error::Contract("conv_transpose padding exceeds output".into()));
    }
    let (oh, ow) = (oh - 2 * spec.padding, ow - 2 * spec.padding);
    let mut out = Array4::zeros((n, c_out, oh, ow));
    for ni in 0..n {
        for ci in 0..c_in {
            for a in 0..h {
                for b in 0..wd {
                    let v = x[[ni, ci, a, b]];
                    if v == 0.0 {
                        continue;
                    }
                    for kh in 0..k {
                        let i = (a * spec.stride + kh) as isize - spec.padding as isize;
                        if i < 0 || i as usize >= oh {
                            continue;
                        }
                        for kwi in 0..k {
                            let j = (b * spec.stride + kwi) as isize - spec.padding as isize;
                            if j < 0 || j as usize >= ow {
                                continue;
                            }
                            for co in 0..c_out {
                                out[[ni, co, i as usize, j as usize]] += v * w[[ci, co, kh, kwi]];
                            }
                        }
                    }
                }
            }
        }
    }
    if let Some(bv) = bias {
        if bv.len() != c_out {
            return Err(Error::shape("conv_transpose bias", &[c_out], &[bv.len()]));
        }
        for co in 0..c_out {
            out.slice_mut(s![.., co, .., ..]).mapv_inplace(|v| v + bv[co]);
        }
    }
    Ok(out)
}

/// Gradient of `conv_transpose2d` w.r.t. its input.
pub fn conv_transpose2d_grad_input(
    dy: &ArrayView4<f64>,
    w: &ArrayView4<f64>,
    x_dim: (usize, usize, usize, usize),
    spec: &ConvTransposeSpec,
) -> Array4<f64> {
    let (n, c_in, h, wd) = x_dim;
    let (_, c_out, k, _) = w.dim();
    let (_, _, oh, ow) = dy.dim();
    let mut dx = Array4::zeros((n, c_in, h, wd));
    for ni in 0..n {
        for ci in 0..c_in {
            for a in 0..h {
                for b in 0..wd {
                    let mut acc = 0.0;
                    for kh in 0..k {
                        let i = (a * spec.stride + kh) as isize - spec.padding as isize;
                        if i < 0 || i as usize >= oh {
                            continue;
                        }
                        for kwi in 0..k {
                            let j = (b * spec.stride + kwi) as isize - spec.padding as isize;
                            if j < 0 || j as usize >= ow {
                                continue;
                            }
                            for co in 0..c_out {
                                acc += dy[[ni, co, i as usize, j as usize]] * w[[ci, co, kh, kwi]];
                            }
                        }
                    }
                    dx[[ni, ci, a, b]] = acc;
                }
            }
        }
    }
    dx
}

/// Gradient of `conv_transpose2d` w.r.t. its weight.
pub fn conv_transpose2d_grad_weight(
    dy: &ArrayView4<f64>,
    x: &ArrayView4<f64>,
    w_dim: (usize, usize, usize, usize),
    spec: &ConvTransposeSpec,
) -> Array4<f64> {
    let (n, c_in, h, wd) = x.dim();
    let (_, c_out, k, _) = w_dim;
    let (_, _, oh, ow) = dy.dim();
    let mut dw = Array4::zeros(w_dim);
    for ni in 0..n {
        for ci in 0..c_in {
            for a in 0..h {
                for b in 0..wd {
                    let v = x[[ni, ci, a, b]];
                    if v == 0.0 {
                        continue;
                    }
                    for kh in 0..k {
                        let i = (a * spec.stride + kh) as isize - spec.padding as isize;
                        if i < 0 || i as usize >= oh {
                            continue;
                        }
                        for kwi in 0..k {
                            let j = (b * spec.stride + kwi) as isize - spec.padding as isize;
                            if j < 0 || j as usize >= ow {
                                continue;
                            }
                            for co in 0..c_out {
                                dw[[ci, co, kh, kwi]] += v * dy[[ni, co, i as usize, j as usize]];
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn ramp(n: usize, c: usize, h: usize, w: usize) -> Array4<f64> {
        Array::from_shape_fn((n, c, h, w), |(a, b, i, j)| {
            ((a * 31 + b * 17 + i * 5 + j * 3) % 23) as f64 * 0.1 - 1.0
        })
    }

    /// Naive direct-summation convolution used as the oracle.
    fn conv2d_naive(
        x: &Array4<f64>,
        w: &Array4<f64>,
        bias: Option<&Array1<f64>>,
        spec: &ConvSpec,
    ) -> Array4<f64> {
        let (n, c_in, h, wd) = x.dim();
        let (c_out, cg, k, _) = w.dim();
        let cog = c_out / spec.groups;
        let oh = conv_output_size(h, k, spec.stride, spec.padding);
        let ow = conv_output_size(wd, k, spec.stride, spec.padding);
        let mut out = Array4::zeros((n, c_out, oh, ow));
        for ni in 0..n {
            for co in 0..c_out {
                let g = co / cog;
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = bias.map(|b| b[co]).unwrap_or(0.0);
                        for cl in 0..cg {
                            let ci = g * cg + cl;
                            for kh in 0..k {
                                for kwi in 0..k {
                                    let ii = (i * spec.stride + kh) as isize - spec.padding as isize;
                                    let jj = (j * spec.stride + kwi) as isize - spec.padding as isize;
                                    let xv = match spec.pad_mode {
                                        PadMode::Zero => {
                                            if ii < 0 || jj < 0 || ii >= h as isize || jj >= wd as isize {
                                                0.0
                                            } else {
                                                x[[ni, ci, ii as usize, jj as usize]]
                                            }
                                        }
                                        PadMode::Circular => {
                                            let ih = ii.rem_euclid(h as isize) as usize;
                                            let jw = jj.rem_euclid(wd as isize) as usize;
                                            x[[ni, ci, ih, jw]]
                                        }
                                    };
                                    acc += xv * w[[co, cl, kh, kwi]];
                                }
                            }
                        }
                        out[[ni, co, i, j]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_oracle_dense() {
        let x = ramp(2, 3, 7, 6);
        let w = ramp(4, 3, 3, 3);
        let b = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        for spec in [
            ConvSpec::same(3),
            ConvSpec::halving(3),
            ConvSpec { stride: 1, padding: 0, groups: 1, pad_mode: PadMode::Zero },
            ConvSpec::same(3).with_pad_mode(PadMode::Circular),
        ] {
            let got = conv2d(&x.view(), &w.view(), Some(&b), &spec).unwrap();
            let want = conv2d_naive(&x, &w, Some(&b), &spec);
            let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "spec {spec:?} diff {diff}");
        }
    }

    #[test]
    fn matches_naive_oracle_depthwise() {
        let x = ramp(1, 4, 6, 6);
        let w = ramp(4, 1, 3, 3);
        let spec = ConvSpec::depthwise(3, 4);
        let got = conv2d(&x.view(), &w.view(), None, &spec).unwrap();
        let want = conv2d_naive(&x, &w, None, &spec);
        let diff = (&got - &want).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn transpose_doubles_spatial_size() {
        let x = ramp(1, 4, 5, 7);
        let w = ramp(4, 2, 2, 2);
        let y = conv_transpose2d(&x.view(), &w.view(), None, &ConvTransposeSpec::doubling()).unwrap();
        assert_eq!(y.dim(), (1, 2, 10, 14));
    }

    /// <conv(x), y> == <x, conv_grad_input(y)> makes forward/backward adjoint.
    #[test]
    fn grad_input_is_adjoint_of_forward() {
        let x = ramp(1, 2, 6, 6);
        let w = ramp(4, 2, 3, 3);
        for spec in [ConvSpec::same(3), ConvSpec::halving(3), ConvSpec::same(3).with_pad_mode(PadMode::Circular)] {
            let y = conv2d(&x.view(), &w.view(), None, &spec).unwrap();
            let dy = ramp(1, 4, y.dim().2, y.dim().3);
            let dx = conv2d_grad_input(&dy.view(), &w.view(), x.dim(), &spec);
            let lhs: f64 = (&y * &dy).sum();
            let rhs: f64 = (&x * &dx).sum();
            assert!((lhs - rhs).abs() < 1e-9, "spec {spec:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn transpose_grads_are_adjoint() {
        let x = ramp(1, 3, 4, 5);
        let w = ramp(3, 2, 2, 2);
        let spec = ConvTransposeSpec::doubling();
        let y = conv_transpose2d(&x.view(), &w.view(), None, &spec).unwrap();
        let dy = ramp(1, 2, y.dim().2, y.dim().3);
        let dx = conv_transpose2d_grad_input(&dy.view(), &w.view(), x.dim(), &spec);
        let lhs: f64 = (&y * &dy).sum();
        let rhs: f64 = (&x * &dx).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
