//! Reverse-mode automatic differentiation on a define-by-run tape.
//!
//! Every operation computes its value eagerly and records enough to replay
//! the chain rule backwards. Values are `f64` throughout; gradient checks
//! against central differences are part of the test suite, so each op's
//! backward must match its forward exactly.

use std::collections::HashMap;

use ndarray::{Array2, ArrayD, Ix3, Ix4, IxDyn};
use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};
use crate::kernels::activation::{gelu_grad_map, gelu_map};
use crate::kernels::conv::{
    conv2d, conv2d_grad_bias, conv2d_grad_input, conv2d_grad_weight, conv_transpose2d,
    conv_transpose2d_grad_input, conv_transpose2d_grad_weight, ConvSpec, ConvTransposeSpec,
};
use crate::kernels::fft::{dft2_plane, idft2_plane};
use crate::kernels::linalg::{
    bmm, bmm_grad, l2_normalize_last, l2_normalize_last_grad, softmax_last, softmax_last_grad,
    transpose12,
};
use crate::kernels::norm::{layer_norm_channels, layer_norm_channels_grad, LayerNormSaved};
use crate::kernels::reduce::pairwise_mean;
use crate::kernels::shuffle::{pixel_shuffle, pixel_unshuffle};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

/// Spectral weights `|dF|^alpha`, max-normalized and clamped to `[0, 1]`
/// per batch item. An all-zero difference yields all-zero weights.
pub fn focal_frequency_weights(
    a: &ndarray::ArrayView4<f64>,
    b: &ndarray::ArrayView4<f64>,
    alpha: f64,
) -> Result<Vec<Array2<f64>>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "focal_frequency_weights",
            &[a.dim().0, a.dim().1, a.dim().2, a.dim().3],
            &[b.dim().0, b.dim().1, b.dim().2, b.dim().3],
        ));
    }
    let (n, c, _, _) = a.dim();
    let mut weights: Vec<Array2<f64>> = Vec::with_capacity(n * c);
    for ni in 0..n {
        let mut max_w: f64 = 0.0;
        let mut raw: Vec<Array2<f64>> = Vec::with_capacity(c);
        for ci in 0..c {
            let plane = a.slice(ndarray::s![ni, ci, .., ..]).to_owned()
                - b.slice(ndarray::s![ni, ci, .., ..]).to_owned();
            let wmat = dft2_plane(&plane.view()).mapv(|z| z.norm().powf(alpha));
            max_w = wmat.iter().cloned().fold(max_w, f64::max);
            raw.push(wmat);
        }
        for mut wmat in raw {
            if max_w > 0.0 {
                wmat.mapv_inplace(|v| (v / max_w).clamp(0.0, 1.0));
            } else {
                wmat.fill(0.0);
            }
            weights.push(wmat);
        }
    }
    Ok(weights)
}

enum Op {
    Leaf,
    Add(VarId, VarId),
    Mul(VarId, VarId),
    Neg(VarId),
    Exp(VarId),
    Gelu(VarId),
    ScaleChannels(VarId, VarId),
    MulScalar(VarId, VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvSpec,
    },
    ConvTranspose2d {
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvTransposeSpec,
    },
    LayerNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        saved: LayerNormSaved,
    },
    Bmm {
        a: VarId,
        b: VarId,
        ta: bool,
        tb: bool,
    },
    Transpose12(VarId),
    SoftmaxLast(VarId),
    L2NormalizeLast(VarId),
    Reshape(VarId),
    PixelShuffle(VarId, usize),
    PixelUnshuffle(VarId, usize),
    ConcatChannels(VarId, VarId),
    Charbonnier {
        a: VarId,
        b: VarId,
        eps: f64,
    },
    L1 {
        a: VarId,
        b: VarId,
    },
    FocalFrequency {
        a: VarId,
        b: VarId,
        weights: Vec<Array2<f64>>,
    },
    AddScaled {
        a: VarId,
        b: VarId,
        beta: f64,
    },
    DotConst {
        x: VarId,
        dir: ArrayD<f64>,
    },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// A dynamically built computation tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<ArrayD<f64>>>,
    params: Vec<(String, VarId)>,
}

fn as4<'a>(v: &'a ArrayD<f64>, ctx: &str) -> Result<ndarray::ArrayView4<'a, f64>> {
    v.view()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::shape(ctx, &[4], &[v.ndim()]))
}

fn as3<'a>(v: &'a ArrayD<f64>, ctx: &str) -> Result<ndarray::ArrayView3<'a, f64>> {
    v.view()
        .into_dimensionality::<Ix3>()
        .map_err(|_| Error::shape(ctx, &[3], &[v.ndim()]))
}

fn scalar(v: f64) -> ArrayD<f64> {
    ArrayD::from_elem(IxDyn(&[]), v)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        VarId(self.nodes.len() - 1)
    }

    fn needs(&self, id: VarId) -> bool {
        self.nodes[id.0].needs_grad
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: VarId) -> f64 {
        let v = &self.nodes[id.0].value;
        debug_assert_eq!(v.ndim(), 0);
        v[[]]
    }

    /// Inserts a non-differentiable input.
    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a differentiable leaf registered under `name`.
    pub fn parameter(&mut self, name: &str, value: ArrayD<f64>) -> VarId {
        let id = self.push(value, Op::Leaf, true);
        self.params.push((name.to_string(), id));
        id
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let value = va + vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let value = va * vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    pub fn neg(&mut self, x: VarId) -> VarId {
        let value = self.nodes[x.0].value.mapv(|v| -v);
        let ng = self.needs(x);
        self.push(value, Op::Neg(x), ng)
    }

    pub fn exp(&mut self, x: VarId) -> VarId {
        let value = self.nodes[x.0].value.mapv(f64::exp);
        let ng = self.needs(x);
        self.push(value, Op::Exp(x), ng)
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let value = gelu_map(&self.nodes[x.0].value);
        let ng = self.needs(x);
        self.push(value, Op::Gelu(x), ng)
    }

    /// `[N, C, H, W] * [C]`, broadcasting the per-channel scale.
    pub fn scale_channels(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let xv = as4(&self.nodes[x.0].value, "scale_channels input")?;
        let sv = &self.nodes[s.0].value;
        let (_, c, _, _) = xv.dim();
        if sv.ndim() != 1 || sv.len() != c {
            return Err(Error::shape("scale_channels scale", &[c], sv.shape()));
        }
        let mut value = xv.to_owned();
        for ci in 0..c {
            let f = sv[[ci]];
            value
                .slice_mut(ndarray::s![.., ci, .., ..])
                .mapv_inplace(|v| v * f);
        }
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(value.into_dyn(), Op::ScaleChannels(x, s), ng))
    }

    /// Multiplies by a rank-0 node.
    pub fn mul_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        let sv = &self.nodes[s.0].value;
        if sv.ndim() != 0 {
            return Err(Error::shape("mul_scalar scale", &[], sv.shape()));
        }
        let f = sv[[]];
        let value = self.nodes[x.0].value.mapv(|v| v * f);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(value, Op::MulScalar(x, s), ng))
    }

    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvSpec,
    ) -> Result<VarId> {
        let xv = as4(&self.nodes[x.0].value, "conv2d input")?;
        let wv = as4(&self.nodes[w.0].value, "conv2d weight")?;
        let bias = match b {
            Some(bid) => Some(
                self.nodes[bid.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Config("conv bias must be rank 1".into()))?
                    .to_owned(),
            ),
            None => None,
        };
        let value = conv2d(&xv, &wv, bias.as_ref(), &spec)?;
        let ng = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(value.into_dyn(), Op::Conv2d { x, w, b, spec }, ng))
    }

    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        spec: ConvTransposeSpec,
    ) -> Result<VarId> {
        let xv = as4(&self.nodes[x.0].value, "conv_transpose2d input")?;
        let wv = as4(&self.nodes[w.0].value, "conv_transpose2d weight")?;
        let bias = match b {
            Some(bid) => Some(
                self.nodes[bid.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .map_err(|_| Error::Config("conv bias must be rank 1".into()))?
                    .to_owned(),
            ),
            None => None,
        };
        let value = conv_transpose2d(&xv, &wv, bias.as_ref(), &spec)?;
        let ng = self.needs(x) || self.needs(w) || b.map(|bid| self.needs(bid)).unwrap_or(false);
        Ok(self.push(value.into_dyn(), Op::ConvTranspose2d { x, w, b, spec }, ng))
    }

    pub fn layer_norm_channels(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        eps: f64,
    ) -> Result<VarId> {
        let xv = as4(&self.nodes[x.0].value, "layer_norm input")?;
        let g = self.nodes[gamma.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::Config("layer norm gamma must be rank 1".into()))?
            .to_owned();
        let bt = self.nodes[beta.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .map_err(|_| Error::Config("layer norm beta must be rank 1".into()))?
            .to_owned();
        let c = xv.dim().1;
        if g.len() != c || bt.len() != c {
            return Err(Error::shape("layer norm affine", &[c], &[g.len(), bt.len()]));
        }
        let (value, saved) = layer_norm_channels(&xv, &g, &bt, eps);
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value.into_dyn(),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            },
            ng,
        ))
    }

    pub fn bmm(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> Result<VarId> {
        let av = as3(&self.nodes[a.0].value, "bmm lhs")?;
        let bv = as3(&self.nodes[b.0].value, "bmm rhs")?;
        let value = bmm(&av, &bv, ta, tb)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value.into_dyn(), Op::Bmm { a, b, ta, tb }, ng))
    }

    pub fn transpose12(&mut self, x: VarId) -> Result<VarId> {
        let xv = as3(&self.nodes[x.0].value, "transpose12")?;
        let value = transpose12(&xv);
        let ng = self.needs(x);
        Ok(self.push(value.into_dyn(), Op::Transpose12(x), ng))
    }

    pub fn softmax_last(&mut self, x: VarId) -> Result<VarId> {
        let xv = as3(&self.nodes[x.0].value, "softmax input")?;
        let value = softmax_last(&xv);
        let ng = self.needs(x);
        Ok(self.push(value.into_dyn(), Op::SoftmaxLast(x), ng))
    }

    pub fn l2_normalize_last(&mut self, x: VarId) -> Result<VarId> {
        let xv = as3(&self.nodes[x.0].value, "l2_normalize input")?;
        let value = l2_normalize_last(&xv);
        let ng = self.needs(x);
        Ok(self.push(value.into_dyn(), Op::L2NormalizeLast(x), ng))
    }

    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if v.len() != shape.iter().product::<usize>() {
            return Err(Error::shape("reshape", shape, v.shape()));
        }
        let value = v
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|_| Error::shape("reshape (non-contiguous)", shape, v.shape()))?;
        let ng = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    pub fn pixel_shuffle(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let xv = as4(&self.nodes[x.0].value, "pixel_shuffle input")?;
        let value = pixel_shuffle(&xv, r)?;
        let ng = self.needs(x);
        Ok(self.push(value.into_dyn(), Op::PixelShuffle(x, r), ng))
    }

    pub fn pixel_unshuffle(&mut self, x: VarId, r: usize) -> Result<VarId> {
        let xv = as4(&self.nodes[x.0].value, "pixel_unshuffle input")?;
        let value = pixel_unshuffle(&xv, r)?;
        let ng = self.needs(x);
        Ok(self.push(value.into_dyn(), Op::PixelUnshuffle(x, r), ng))
    }

    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let av = as4(&self.nodes[a.0].value, "concat lhs")?;
        let bv = as4(&self.nodes[b.0].value, "concat rhs")?;
        let (na, ca, ha, wa) = av.dim();
        let (nb, _cb, hb, wb) = bv.dim();
        if na != nb || ha != hb || wa != wb {
            return Err(Error::shape(
                "concat_channels",
                &[na, ca, ha, wa],
                &[nb, _cb, hb, wb],
            ));
        }
        let value = ndarray::concatenate(ndarray::Axis(1), &[av, bv])
            .map_err(|e| Error::Config(format!("concat failed: {e}")))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value.into_dyn(), Op::ConcatChannels(a, b), ng))
    }

    /// Mean of `sqrt((a - b)^2 + eps^2)` over all elements.
    pub fn charbonnier(&mut self, a: VarId, b: VarId, eps: f64) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("charbonnier", va.shape(), vb.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("charbonnier eps must be positive".into()));
        }
        let terms: Vec<f64> = va
            .iter()
            .zip(vb.iter())
            .map(|(x, y)| {
                let d = x - y;
                (d * d + eps * eps).sqrt()
            })
            .collect();
        let value = scalar(pairwise_mean(&terms));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Charbonnier { a, b, eps }, ng))
    }

    /// Mean absolute error.
    pub fn l1(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape("l1", va.shape(), vb.shape()));
        }
        let terms: Vec<f64> = va
            .iter()
            .zip(vb.iter())
            .map(|(x, y)| (x - y).abs())
            .collect();
        let value = scalar(pairwise_mean(&terms));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::L1 { a, b }, ng))
    }

    /// Focal frequency loss between two `[N, C, H, W]` images.
    ///
    /// The spectral weight `|dF|^alpha` (max-normalized and clamped per batch
    /// item) is computed from the current values and frozen: no gradient flows
    /// through the exponent.
    pub fn focal_frequency(&mut self, a: VarId, b: VarId, alpha: f64) -> Result<VarId> {
        if alpha < 0.0 {
            return Err(Error::Config("focal frequency alpha must be >= 0".into()));
        }
        let av = as4(&self.nodes[a.0].value, "focal_frequency lhs")?;
        let bv = as4(&self.nodes[b.0].value, "focal_frequency rhs")?;
        let weights = focal_frequency_weights(&av, &bv, alpha)?;
        self.focal_frequency_frozen(a, b, weights)
    }

    /// Focal frequency loss with an externally supplied (frozen) weight
    /// matrix per `(batch, channel)` plane; this is what the finite-difference
    /// oracle evaluates so the weights stay fixed across perturbations.
    pub fn focal_frequency_frozen(
        &mut self,
        a: VarId,
        b: VarId,
        weights: Vec<Array2<f64>>,
    ) -> Result<VarId> {
        let av = as4(&self.nodes[a.0].value, "focal_frequency lhs")?;
        let bv = as4(&self.nodes[b.0].value, "focal_frequency rhs")?;
        if av.dim() != bv.dim() {
            return Err(Error::shape(
                "focal_frequency",
                &self.nodes[a.0].value.shape().to_vec(),
                self.nodes[b.0].value.shape(),
            ));
        }
        let (n, c, h, w) = av.dim();
        if weights.len() != n * c || weights.iter().any(|wm| wm.dim() != (h, w)) {
            return Err(Error::Contract(
                "focal frequency weights must hold one HxW matrix per (batch, channel)".into(),
            ));
        }
        let mn = (h * w) as f64;
        let mut per_plane: Vec<f64> = Vec::with_capacity(n * c);
        for ni in 0..n {
            for ci in 0..c {
                let plane = av.slice(ndarray::s![ni, ci, .., ..]).to_owned()
                    - bv.slice(ndarray::s![ni, ci, .., ..]).to_owned();
                let d = dft2_plane(&plane.view());
                let terms: Vec<f64> = d
                    .iter()
                    .zip(weights[ni * c + ci].iter())
                    .map(|(z, w)| w * z.norm_sqr())
                    .collect();
                per_plane.push(crate::kernels::reduce::pairwise_sum(&terms) / mn);
            }
        }
        let value = scalar(pairwise_mean(&per_plane));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::FocalFrequency { a, b, weights }, ng))
    }

    /// `a + beta * b` for rank-0 nodes.
    pub fn add_scaled(&mut self, a: VarId, b: VarId, beta: f64) -> Result<VarId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if va.ndim() != 0 || vb.ndim() != 0 {
            return Err(Error::Config("add_scaled operands must be scalars".into()));
        }
        let value = scalar(va[[]] + beta * vb[[]]);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::AddScaled { a, b, beta }, ng))
    }

    /// Fixed-direction scalar projection `sum(x * dir)`; test utility for
    /// gradient checks.
    pub fn dot_const(&mut self, x: VarId, dir: ArrayD<f64>) -> Result<VarId> {
        let v = &self.nodes[x.0].value;
        if v.shape() != dir.shape() {
            return Err(Error::shape("dot_const", dir.shape(), v.shape()));
        }
        let value = scalar(v.iter().zip(dir.iter()).map(|(a, b)| a * b).sum());
        let ng = self.needs(x);
        Ok(self.push(value, Op::DotConst { x, dir }, ng))
    }

    fn accum(&mut self, id: VarId, g: ArrayD<f64>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut self.grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Runs the chain rule from a scalar `root`; gradients are then available
    /// through [`Graph::grad`] and [`Graph::param_grads`].
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if self.nodes[root.0].value.ndim() != 0 {
            return Err(Error::Contract(
                "backward requires a scalar root node".into(),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(scalar(1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.backprop_node(i, &gy)?;
            self.grads[i] = Some(gy);
            for (parent, g) in contributions {
                self.accum(parent, g);
            }
        }
        Ok(())
    }

    /// Computes the gradient contributions of node `i` to its parents.
    fn backprop_node(&self, i: usize, gy: &ArrayD<f64>) -> Result<Vec<(VarId, ArrayD<f64>)>> {
        let mut out: Vec<(VarId, ArrayD<f64>)> = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, gy * &self.nodes[b.0].value));
                out.push((*b, gy * &self.nodes[a.0].value));
            }
            Op::Neg(x) => out.push((*x, gy.mapv(|v| -v))),
            Op::Exp(x) => out.push((*x, gy * &self.nodes[i].value)),
            Op::Gelu(x) => out.push((*x, gelu_grad_map(gy, &self.nodes[x.0].value))),
            Op::ScaleChannels(x, s) => {
                let xv = as4(&self.nodes[x.0].value, "scale_channels grad")?;
                let sv = &self.nodes[s.0].value;
                let gv = as4(gy, "scale_channels grad")?;
                let (n, c, h, w) = xv.dim();
                let mut gx = gv.to_owned();
                let mut gs = ndarray::Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let f = sv[[ci]];
                    let mut acc = 0.0;
                    for ni in 0..n {
                        for ii in 0..h {
                            for jj in 0..w {
                                acc += gv[[ni, ci, ii, jj]] * xv[[ni, ci, ii, jj]];
                            }
                        }
                    }
                    gs[ci] = acc;
                    gx.slice_mut(ndarray::s![.., ci, .., ..])
                        .mapv_inplace(|v| v * f);
                }
                out.push((*x, gx.into_dyn()));
                out.push((*s, gs.into_dyn()));
            }
            Op::MulScalar(x, s) => {
                let f = self.nodes[s.0].value[[]];
                out.push((*x, gy.mapv(|v| v * f)));
                let gs = scalar(
                    gy.iter()
                        .zip(self.nodes[x.0].value.iter())
                        .map(|(g, v)| g * v)
                        .sum(),
                );
                out.push((*s, gs));
            }
            Op::Conv2d { x, w, b, spec } => {
                let gyv = as4(gy, "conv grad")?;
                let xv = as4(&self.nodes[x.0].value, "conv grad x")?;
                let wv = as4(&self.nodes[w.0].value, "conv grad w")?;
                if self.needs(*x) {
                    out.push((*x, conv2d_grad_input(&gyv, &wv, xv.dim(), spec).into_dyn()));
                }
                if self.needs(*w) {
                    out.push((*w, conv2d_grad_weight(&gyv, &xv, wv.dim(), spec).into_dyn()));
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        out.push((*bid, conv2d_grad_bias(&gyv).into_dyn()));
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, spec } => {
                let gyv = as4(gy, "conv_t grad")?;
                let xv = as4(&self.nodes[x.0].value, "conv_t grad x")?;
                let wv = as4(&self.nodes[w.0].value, "conv_t grad w")?;
                if self.needs(*x) {
                    out.push((
                        *x,
                        conv_transpose2d_grad_input(&gyv, &wv, xv.dim(), spec).into_dyn(),
                    ));
                }
                if self.needs(*w) {
                    out.push((
                        *w,
                        conv_transpose2d_grad_weight(&gyv, &xv, wv.dim(), spec).into_dyn(),
                    ));
                }
                if let Some(bid) = b {
                    if self.needs(*bid) {
                        out.push((*bid, conv2d_grad_bias(&gyv).into_dyn()));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let gyv = as4(gy, "layer norm grad")?;
                let xv = as4(&self.nodes[x.0].value, "layer norm grad x")?;
                let g = self.nodes[gamma.0]
                    .value
                    .view()
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("gamma rank checked at forward")
                    .to_owned();
                let (dx, dgamma, dbeta) = layer_norm_channels_grad(&gyv, &xv, &g, saved);
                out.push((*x, dx.into_dyn()));
                out.push((*gamma, dgamma.into_dyn()));
                out.push((*beta, dbeta.into_dyn()));
            }
            Op::Bmm { a, b, ta, tb } => {
                let gyv = as3(gy, "bmm grad")?;
                let av = as3(&self.nodes[a.0].value, "bmm grad a")?;
                let bv = as3(&self.nodes[b.0].value, "bmm grad b")?;
                let (ga, gb) = bmm_grad(&gyv, &av, &bv, *ta, *tb);
                out.push((*a, ga.into_dyn()));
                out.push((*b, gb.into_dyn()));
            }
            Op::Transpose12(x) => {
                let gyv = as3(gy, "transpose grad")?;
                out.push((*x, transpose12(&gyv).into_dyn()));
            }
            Op::SoftmaxLast(x) => {
                let gyv = as3(gy, "softmax grad")?;
                let yv = as3(&self.nodes[i].value, "softmax value")?;
                out.push((*x, softmax_last_grad(&gyv, &yv).into_dyn()));
            }
            Op::L2NormalizeLast(x) => {
                let gyv = as3(gy, "l2 norm grad")?;
                let xv = as3(&self.nodes[x.0].value, "l2 norm grad x")?;
                out.push((*x, l2_normalize_last_grad(&gyv, &xv).into_dyn()));
            }
            Op::Reshape(x) => {
                let shape = self.nodes[x.0].value.shape().to_vec();
                let g = gy
                    .clone()
                    .into_shape_with_order(IxDyn(&shape))
                    .expect("grad reshape");
                out.push((*x, g));
            }
            Op::PixelShuffle(x, r) => {
                let gyv = as4(gy, "pixel_shuffle grad")?;
                out.push((*x, pixel_unshuffle(&gyv, *r)?.into_dyn()));
            }
            Op::PixelUnshuffle(x, r) => {
                let gyv = as4(gy, "pixel_unshuffle grad")?;
                out.push((*x, pixel_shuffle(&gyv, *r)?.into_dyn()));
            }
            Op::ConcatChannels(a, b) => {
                let gyv = as4(gy, "concat grad")?;
                let ca = self.nodes[a.0].value.shape()[1];
                out.push((*a, gyv.slice(ndarray::s![.., ..ca, .., ..]).to_owned().into_dyn()));
                out.push((*b, gyv.slice(ndarray::s![.., ca.., .., ..]).to_owned().into_dyn()));
            }
            Op::Charbonnier { a, b, eps } => {
                let g0 = gy[[]];
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let n = va.len() as f64;
                let mut ga = va.clone();
                ga.zip_mut_with(vb, |x, y| {
                    let d = *x - *y;
                    *x = g0 * d / ((d * d + eps * eps).sqrt() * n);
                });
                let gb = ga.mapv(|v| -v);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::L1 { a, b } => {
                let g0 = gy[[]];
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let n = va.len() as f64;
                let mut ga = va.clone();
                ga.zip_mut_with(vb, |x, y| {
                    let d = *x - *y;
                    *x = if d == 0.0 { 0.0 } else { g0 * d.signum() / n };
                });
                let gb = ga.mapv(|v| -v);
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::FocalFrequency { a, b, weights } => {
                let g0 = gy[[]];
                let av = as4(&self.nodes[a.0].value, "ff grad a")?;
                let bv = as4(&self.nodes[b.0].value, "ff grad b")?;
                let (n, c, h, w) = av.dim();
                let mut ga = ndarray::Array4::<f64>::zeros((n, c, h, w));
                for ni in 0..n {
                    for ci in 0..c {
                        let plane = av.slice(ndarray::s![ni, ci, .., ..]).to_owned()
                            - bv.slice(ndarray::s![ni, ci, .., ..]).to_owned();
                        let d = dft2_plane(&plane.view());
                        let weighted = ndarray::Zip::from(&d)
                            .and(&weights[ni * c + ci])
                            .map_collect(|z, &wt| z * wt);
                        let spatial = idft2_plane(&weighted.view());
                        let scale = 2.0 * g0 / ((n * c) as f64);
                        let mut target = ga.slice_mut(ndarray::s![ni, ci, .., ..]);
                        ndarray::Zip::from(&mut target)
                            .and(&spatial)
                            .for_each(|t, z| *t = scale * z.re);
                    }
                }
                let gb = ga.mapv(|v| -v);
                out.push((*a, ga.into_dyn()));
                out.push((*b, gb.into_dyn()));
            }
            Op::AddScaled { a, b, beta } => {
                out.push((*a, gy.clone()));
                out.push((*b, gy.mapv(|v| v * beta)));
            }
            Op::DotConst { x, dir } => {
                let g0 = gy[[]];
                out.push((*x, dir.mapv(|v| v * g0)));
            }
        }
        Ok(out)
    }

    pub fn grad(&self, id: VarId) -> Option<&ArrayD<f64>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every registered parameter, keyed by name. Parameters the
    /// loss does not reach map to `None`.
    pub fn param_grads(&self) -> HashMap<String, Option<&ArrayD<f64>>> {
        self.params
            .iter()
            .map(|(name, id)| (name.clone(), self.grad(*id)))
            .collect()
    }

    pub fn param_ids(&self) -> &[(String, VarId)] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array, Array4, Dimension};

    fn arr(shape: &[usize], salt: usize) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |ix| {
            let mut h = salt * 131;
            for k in 0..ix.ndim() {
                h = h * 31 + ix[k] * 7;
            }
            ((h % 97) as f64) * 0.021 - 1.0
        })
    }

    /// Central-difference check of `d(dot(f(x), dir))/dx` for a single-input op.
    fn grad_check<F>(shape: &[usize], build: F)
    where
        F: Fn(&mut Graph, VarId) -> VarId,
    {
        let x0 = arr(shape, 1);
        let mut g = Graph::new();
        let x = g.parameter("x", x0.clone());
        let y = build(&mut g, x);
        let dir = arr(g.value(y).shape(), 9);
        let loss = g.dot_const(y, dir.clone()).unwrap();
        g.backward(loss).unwrap();
        let analytic = g.grad(x).unwrap().clone();

        let h = 1e-6;
        let mut max_rel: f64 = 0.0;
        for flat in 0..x0.len() {
            let eval = |delta: f64| -> f64 {
                let mut xp = x0.clone();
                xp.as_slice_mut().unwrap()[flat] += delta;
                let mut gg = Graph::new();
                let xv = gg.constant(xp);
                let yv = build(&mut gg, xv);
                let lv = gg.dot_const(yv, dir.clone()).unwrap();
                gg.scalar_value(lv)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[flat];
            let denom = an.abs().max(fd.abs()).max(1e-4);
            max_rel = max_rel.max((an - fd).abs() / denom);
        }
        assert!(max_rel < 1e-4, "max relative grad error {max_rel}");
    }

    #[test]
    fn gelu_grad_matches_fd() {
        grad_check(&[2, 3], |g, x| g.gelu(x));
    }

    #[test]
    fn softmax_grad_matches_fd() {
        grad_check(&[1, 3, 5], |g, x| g.softmax_last(x).unwrap());
    }

    #[test]
    fn l2_normalize_grad_matches_fd() {
        grad_check(&[1, 2, 6], |g, x| g.l2_normalize_last(x).unwrap());
    }

    #[test]
    fn layer_norm_grad_matches_fd() {
        grad_check(&[1, 4, 3, 3], |g, x| {
            let gamma = g.constant(arr(&[4], 2));
            let beta = g.constant(arr(&[4], 3));
            g.layer_norm_channels(x, gamma, beta, 1e-6).unwrap()
        });
    }

    #[test]
    fn conv_grads_match_fd() {
        grad_check(&[1, 2, 5, 5], |g, x| {
            let w = g.constant(arr(&[3, 2, 3, 3], 4));
            let b = g.constant(arr(&[3], 5));
            g.conv2d(x, w, Some(b), ConvSpec::same(3)).unwrap()
        });
        // weight path
        let x0 = arr(&[1, 2, 4, 4], 6);
        let w0 = arr(&[2, 2, 3, 3], 7);
        let mut g = Graph::new();
        let x = g.constant(x0);
        let w = g.parameter("w", w0.clone());
        let y = g.conv2d(x, w, None, ConvSpec::same(3)).unwrap();
        let dir = arr(g.value(y).shape(), 8);
        let loss = g.dot_const(y, dir).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(w).is_some());
    }

    #[test]
    fn conv_transpose_grad_matches_fd() {
        grad_check(&[1, 2, 3, 3], |g, x| {
            let w = g.constant(arr(&[2, 3, 2, 2], 11));
            g.conv_transpose2d(x, w, None, ConvTransposeSpec::doubling())
                .unwrap()
        });
    }

    #[test]
    fn charbonnier_grad_matches_fd() {
        grad_check(&[2, 3, 4], |g, x| {
            let other = g.constant(arr(&[2, 3, 4], 12));
            g.charbonnier(x, other, 1e-3).unwrap()
        });
    }

    #[test]
    fn focal_frequency_grad_matches_fd_with_frozen_weights() {
        // The weight matrix does not care about gradients, so the FD oracle
        // evaluates the loss with the weights frozen at the unperturbed input.
        let shape = [1usize, 2, 4, 4];
        let a0 = arr(&shape, 1);
        let b0 = arr(&shape, 13);
        let weights = focal_frequency_weights(
            &a0.view().into_dimensionality().unwrap(),
            &b0.view().into_dimensionality().unwrap(),
            1.0,
        )
        .unwrap();
        grad_check(&shape, |g, x| {
            let other = g.constant(b0.clone());
            g.focal_frequency_frozen(x, other, weights.clone()).unwrap()
        });
    }

    #[test]
    fn pixel_shuffle_grads_are_permutations() {
        grad_check(&[1, 4, 2, 2], |g, x| g.pixel_shuffle(x, 2).unwrap());
        grad_check(&[1, 1, 4, 4], |g, x| g.pixel_unshuffle(x, 2).unwrap());
    }

    #[test]
    fn concat_and_scale_channels_grads() {
        grad_check(&[1, 2, 3, 3], |g, x| {
            let other = g.constant(arr(&[1, 3, 3, 3], 14));
            g.concat_channels(x, other).unwrap()
        });
        grad_check(&[1, 3, 2, 2], |g, x| {
            let s = g.constant(arr(&[3], 15));
            g.scale_channels(x, s).unwrap()
        });
    }

    #[test]
    fn zero_layer_scale_residual_is_identity() {
        let x0 = arr(&[1, 2, 3, 3], 16);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let zero = g.constant(ArrayD::zeros(IxDyn(&[2])));
        let noise = g.constant(arr(&[1, 2, 3, 3], 17));
        let scaled = g.scale_channels(noise, zero).unwrap();
        let y = g.add(x, scaled).unwrap();
        assert_eq!(g.value(y), &x0);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.parameter("x", arr(&[2, 2], 18));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn param_grads_keyed_by_name() {
        let mut g = Graph::new();
        let x = g.parameter("weight", Array4::<f64>::ones((1, 1, 2, 2)).into_dyn());
        let y = g.charbonnier(x, x, 1e-3).unwrap();
        g.backward(y).unwrap();
        let grads = g.param_grads();
        assert!(grads.contains_key("weight"));
    }
}
