//! A small reverse-mode tape over dense `f64` tensors.
//!
//! Every forward evaluation records its operations on a fresh [`Graph`];
//! [`Graph::backward`] then walks the tape in reverse. Images are laid out
//! channel-first `(C, H, W)`, convolution weights `(out, in, k, k)`.

use std::sync::Arc;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, ArrayView3, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};

pub type Tensor = ArrayD<f64>;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
    },
    LeakyRelu {
        input: Var,
        slope: f64,
    },
    AvgPool2(Var),
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Upsample2(Var),
    Concat(Vec<Var>),
    Sigmoid(Var),
    InstanceNorm {
        input: Var,
        gain: Var,
        shift: Var,
        inv_std: Vec<f64>,
        normalized: Array3<f64>,
    },
    ChannelAffine {
        input: Var,
        scale: Vec<f64>,
    },
    Gather {
        input: Var,
        channels: Vec<usize>,
    },
    Gram(Var),
    SqDist {
        input: Var,
        target: Arc<Tensor>,
        weight: f64,
    },
    Sum(Vec<Var>),
    Scale {
        input: Var,
        factor: f64,
    },
}

/// Recorded computation. Values are reference counted so constant weights
/// can be placed on the tape without copying.
pub struct Graph {
    values: Vec<Arc<Tensor>>,
    ops: Vec<Op>,
    needs_grad: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, op: Op, needs_grad: bool) -> Var {
        self.values.push(value);
        self.ops.push(op);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, false)
    }

    /// Trainable input whose gradient is reported by `backward`.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn variable_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.push_shared(value, Op::Leaf, true)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.values[var.0]
    }

    pub fn scalar(&self, var: Var) -> f64 {
        *self.values[var.0].iter().next().expect("empty tensor")
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.needs_grad[v.0])
    }

    fn view3(&self, var: Var) -> ArrayView3<'_, f64> {
        self.values[var.0]
            .view()
            .into_dimensionality::<Ix3>()
            .expect("expected a (C, H, W) tensor")
    }

    /// Stride-1 convolution with `pad` zero padding on each side.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, pad: usize) -> Var {
        let x = self.view3(input);
        let w = self.values[weight.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight must be 4-D");
        let b = bias.map(|b| {
            self.values[b.0]
                .view()
                .into_dimensionality::<Ix1>()
                .expect("bias must be 1-D")
        });
        let out = conv2d_forward(x, w.view(), b, pad);
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let flag = self.grad_flag(&deps);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                input,
                weight,
                bias,
                pad,
            },
            flag,
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.leaky_relu(input, 0.0)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let out = self.values[input.0].mapv(|v| if v > 0.0 { v } else { slope * v });
        let flag = self.grad_flag(&[input]);
        self.push(out, Op::LeakyRelu { input, slope }, flag)
    }

    /// 2×2 average pooling, stride 2; odd trailing rows/columns are dropped.
    pub fn avg_pool2(&mut self, input: Var) -> Var {
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<f64>::zeros((c, ho, wo));
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let sum = x[[ch, 2 * i, 2 * j]]
                        + x[[ch, 2 * i, 2 * j + 1]]
                        + x[[ch, 2 * i + 1, 2 * j]]
                        + x[[ch, 2 * i + 1, 2 * j + 1]];
                    out[[ch, i, j]] = 0.25 * sum;
                }
            }
        }
        let flag = self.grad_flag(&[input]);
        self.push(out.into_dyn(), Op::AvgPool2(input), flag)
    }

    /// 2×2 max pooling, stride 2. Ties resolve to the first element in row-major order.
    pub fn max_pool2(&mut self, input: Var) -> Var {
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let (ho, wo) = (h / 2, w / 2);
        let mut out = Array3::<f64>::zeros((c, ho, wo));
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let mut best = (2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = (2 * i + di, 2 * j + dj);
                        if x[[ch, cand.0, cand.1]] > x[[ch, best.0, best.1]] {
                            best = cand;
                        }
                    }
                    out[[ch, i, j]] = x[[ch, best.0, best.1]];
                    argmax.push((ch * h + best.0) * w + best.1);
                }
            }
        }
        let flag = self.grad_flag(&[input]);
        self.push(out.into_dyn(), Op::MaxPool2 { input, argmax }, flag)
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, input: Var) -> Var {
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let out = Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, i, j)| x[[ch, i / 2, j / 2]]);
        let flag = self.grad_flag(&[input]);
        self.push(out.into_dyn(), Op::Upsample2(input), flag)
    }

    /// Channel-wise concatenation of equally sized `(C, H, W)` tensors.
    pub fn concat(&mut self, inputs: &[Var]) -> Var {
        let views: Vec<_> = inputs.iter().map(|v| self.view3(*v)).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("concat: spatial sizes differ");
        let flag = self.grad_flag(inputs);
        self.push(out.into_dyn(), Op::Concat(inputs.to_vec()), flag)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self.values[input.0].mapv(sigmoid);
        let flag = self.grad_flag(&[input]);
        self.push(out, Op::Sigmoid(input), flag)
    }

    /// Per-channel spatial normalization followed by a learned gain and shift.
    pub fn instance_norm(&mut self, input: Var, gain: Var, shift: Var) -> Var {
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let m = (h * w) as f64;
        let gain_v = self.values[gain.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("gain must be 1-D");
        let shift_v = self.values[shift.0]
            .view()
            .into_dimensionality::<Ix1>()
            .expect("shift must be 1-D");
        let mut normalized = Array3::<f64>::zeros((c, h, w));
        let mut out = Array3::<f64>::zeros((c, h, w));
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = x.index_axis(Axis(0), ch);
            let mean = plane.sum() / m;
            let var = plane.fold(0.0, |acc, v| acc + (v - mean) * (v - mean)) / m;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            inv_std.push(is);
            let mut nplane = normalized.index_axis_mut(Axis(0), ch);
            nplane.zip_mut_with(&plane, |n, v| *n = (v - mean) * is);
            let (gc, sc) = (gain_v[ch], shift_v[ch]);
            out.index_axis_mut(Axis(0), ch)
                .zip_mut_with(&nplane, |o, n| *o = gc * n + sc);
        }
        let flag = self.grad_flag(&[input, gain, shift]);
        self.push(
            out.into_dyn(),
            Op::InstanceNorm {
                input,
                gain,
                shift,
                inv_std,
                normalized,
            },
            flag,
        )
    }

    /// `y[c] = x[c] * scale[c] + offset[c]` with constant coefficients.
    pub fn channel_affine(&mut self, input: Var, scale: &[f64], offset: &[f64]) -> Var {
        let mut out = self.view3(input).to_owned();
        for (ch, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            let (a, b) = (scale[ch], offset[ch]);
            plane.mapv_inplace(|v| v * a + b);
        }
        let flag = self.grad_flag(&[input]);
        self.push(
            out.into_dyn(),
            Op::ChannelAffine {
                input,
                scale: scale.to_vec(),
            },
            flag,
        )
    }

    /// Select channels (with repetition) from a `(C, H, W)` tensor.
    pub fn gather(&mut self, input: Var, channels: &[usize]) -> Var {
        let out = self.view3(input).select(Axis(0), channels);
        let flag = self.grad_flag(&[input]);
        self.push(
            out.into_dyn(),
            Op::Gather {
                input,
                channels: channels.to_vec(),
            },
            flag,
        )
    }

    /// Spatially normalized Gram matrix of a `(C, H, W)` feature map.
    pub fn gram(&mut self, input: Var) -> Var {
        let x = self.view3(input);
        let (c, h, w) = x.dim();
        let f = x.into_shape_with_order((c, h * w)).expect("contiguous feature map");
        let out = gram(f);
        let flag = self.grad_flag(&[input]);
        self.push(out.into_dyn(), Op::Gram(input), flag)
    }

    /// `weight * ||input - target||²` as a scalar.
    pub fn sq_dist(&mut self, input: Var, target: Arc<Tensor>, weight: f64) -> Var {
        let x = &self.values[input.0];
        assert_eq!(x.shape(), target.shape(), "sq_dist shape mismatch");
        let total: f64 = x.iter().zip(target.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        let flag = self.grad_flag(&[input]);
        self.push(
            ArrayD::from_elem(IxDyn(&[]), weight * total),
            Op::SqDist { input, target, weight },
            flag,
        )
    }

    /// Sum of scalars.
    pub fn sum(&mut self, inputs: &[Var]) -> Var {
        let total: f64 = inputs.iter().map(|v| self.scalar(*v)).sum();
        let flag = self.grad_flag(inputs);
        self.push(ArrayD::from_elem(IxDyn(&[]), total), Op::Sum(inputs.to_vec()), flag)
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Var {
        let out = self.values[input.0].mapv(|v| v * factor);
        let flag = self.grad_flag(&[input]);
        self.push(out, Op::Scale { input, factor }, flag)
    }

    /// Reverse pass from a scalar `output`. Only gradients of values that
    /// depend on a [`Graph::variable`] are materialized.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[output.0] = Some(ArrayD::from_elem(self.values[output.0].raw_dim(), 1.0));

        for idx in (0..=output.0).rev() {
            if !self.needs_grad[idx] {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            match &self.ops[idx] {
                Op::Leaf => {
                    grads[idx] = Some(dy);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    pad,
                } => {
                    let x = self.view3(*input);
                    let w = self.values[weight.0].view().into_dimensionality::<Ix4>().unwrap();
                    let dy3 = dy.into_dimensionality::<Ix3>().unwrap();
                    let (dx, dw) = conv2d_backward(x, w, dy3.view(), *pad);
                    if let Some(b) = bias {
                        if self.needs_grad[b.0] {
                            let db = dy3.sum_axis(Axis(2)).sum_axis(Axis(1));
                            accumulate(&mut grads, *b, db.into_dyn());
                        }
                    }
                    if self.needs_grad[weight.0] {
                        accumulate(&mut grads, *weight, dw.into_dyn());
                    }
                    if self.needs_grad[input.0] {
                        accumulate(&mut grads, *input, dx.into_dyn());
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let mut dx = dy;
                    dx.zip_mut_with(&self.values[input.0], |g, &x| {
                        if x <= 0.0 {
                            *g *= slope;
                        }
                    });
                    accumulate(&mut grads, *input, dx);
                }
                Op::AvgPool2(input) => {
                    let dy3 = dy.into_dimensionality::<Ix3>().unwrap();
                    let mut dx = Array3::<f64>::zeros(self.view3(*input).dim());
                    let (c, ho, wo) = dy3.dim();
                    for ch in 0..c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let g = 0.25 * dy3[[ch, i, j]];
                                dx[[ch, 2 * i, 2 * j]] += g;
                                dx[[ch, 2 * i, 2 * j + 1]] += g;
                                dx[[ch, 2 * i + 1, 2 * j]] += g;
                                dx[[ch, 2 * i + 1, 2 * j + 1]] += g;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, dx.into_dyn());
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = ArrayD::<f64>::zeros(self.values[input.0].raw_dim());
                    let flat = dx.as_slice_mut().expect("contiguous");
                    for (g, &at) in dy.iter().zip(argmax) {
                        flat[at] += g;
                    }
                    accumulate(&mut grads, *input, dx);
                }
                Op::Upsample2(input) => {
                    let dy3 = dy.into_dimensionality::<Ix3>().unwrap();
                    let (c, h, w) = self.view3(*input).dim();
                    let mut dx = Array3::<f64>::zeros((c, h, w));
                    for ((ch, i, j), g) in dy3.indexed_iter() {
                        dx[[ch, i / 2, j / 2]] += g;
                    }
                    accumulate(&mut grads, *input, dx.into_dyn());
                }
                Op::Concat(inputs) => {
                    let mut start = 0;
                    for v in inputs {
                        let c = self.values[v.0].shape()[0];
                        if self.needs_grad[v.0] {
                            let part = dy.slice_axis(Axis(0), (start..start + c).into()).to_owned();
                            accumulate(&mut grads, *v, part);
                        }
                        start += c;
                    }
                }
                Op::Sigmoid(input) => {
                    let mut dx = dy;
                    dx.zip_mut_with(&self.values[idx], |g, &y| *g *= y * (1.0 - y));
                    accumulate(&mut grads, *input, dx);
                }
                Op::InstanceNorm {
                    input,
                    gain,
                    shift,
                    inv_std,
                    normalized,
                } => {
                    let dy3 = dy.into_dimensionality::<Ix3>().unwrap();
                    let gain_v = self.values[gain.0].view().into_dimensionality::<Ix1>().unwrap();
                    let c = dy3.dim().0;
                    let m = (dy3.dim().1 * dy3.dim().2) as f64;
                    let mut dgain = Array1::<f64>::zeros(c);
                    let mut dshift = Array1::<f64>::zeros(c);
                    let mut dx = Array3::<f64>::zeros(dy3.raw_dim());
                    for ch in 0..c {
                        let g = dy3.index_axis(Axis(0), ch);
                        let n = normalized.index_axis(Axis(0), ch);
                        let sum_g = g.sum();
                        let sum_gn: f64 = g.iter().zip(n.iter()).map(|(a, b)| a * b).sum();
                        dgain[ch] = sum_gn;
                        dshift[ch] = sum_g;
                        // d/dx of gain * (x - mean) * inv_std
                        let k = gain_v[ch] * inv_std[ch] / m;
                        let mut out = dx.index_axis_mut(Axis(0), ch);
                        ndarray::Zip::from(&mut out)
                            .and(&g)
                            .and(&n)
                            .for_each(|o, &gv, &nv| *o = k * (m * gv - sum_g - nv * sum_gn));
                    }
                    if self.needs_grad[gain.0] {
                        accumulate(&mut grads, *gain, dgain.into_dyn());
                    }
                    if self.needs_grad[shift.0] {
                        accumulate(&mut grads, *shift, dshift.into_dyn());
                    }
                    if self.needs_grad[input.0] {
                        accumulate(&mut grads, *input, dx.into_dyn());
                    }
                }
                Op::ChannelAffine { input, scale } => {
                    let mut dx = dy.into_dimensionality::<Ix3>().unwrap();
                    for (ch, mut plane) in dx.axis_iter_mut(Axis(0)).enumerate() {
                        let a = scale[ch];
                        plane.mapv_inplace(|v| v * a);
                    }
                    accumulate(&mut grads, *input, dx.into_dyn());
                }
                Op::Gather { input, channels } => {
                    let dy3 = dy.into_dimensionality::<Ix3>().unwrap();
                    let mut dx = Array3::<f64>::zeros(self.view3(*input).dim());
                    for (k, &ch) in channels.iter().enumerate() {
                        let mut dst = dx.index_axis_mut(Axis(0), ch);
                        dst += &dy3.index_axis(Axis(0), k);
                    }
                    accumulate(&mut grads, *input, dx.into_dyn());
                }
                Op::Gram(input) => {
                    let x = self.view3(*input);
                    let (c, h, w) = x.dim();
                    let f = x.into_shape_with_order((c, h * w)).unwrap();
                    let dg = dy.into_dimensionality::<Ix2>().unwrap();
                    let sym = (&dg + &dg.t()) / (h * w) as f64;
                    let df = sym.dot(&f);
                    let dx = df.into_shape_with_order((c, h, w)).unwrap();
                    accumulate(&mut grads, *input, dx.into_dyn());
                }
                Op::SqDist { input, target, weight } => {
                    let scale = 2.0 * weight * self.scalar_of(&dy);
                    let mut dx = (*self.values[input.0]).clone();
                    dx.zip_mut_with(target.as_ref(), |a, b| *a = scale * (*a - b));
                    accumulate(&mut grads, *input, dx);
                }
                Op::Sum(inputs) => {
                    for v in inputs {
                        if self.needs_grad[v.0] {
                            accumulate(&mut grads, *v, dy.clone());
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut grads, *input, dy.mapv(|g| g * factor));
                }
            }
        }
        // Non-leaf gradients have already been consumed; keep leaves only.
        for (idx, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.ops[idx], Op::Leaf) {
                *slot = None;
            }
        }
        Gradients { grads }
    }

    fn scalar_of(&self, t: &Tensor) -> f64 {
        *t.iter().next().expect("empty gradient")
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `F·Fᵀ / M` for a feature matrix of shape `(N, M)`. The upper triangle is
/// mirrored so the result is exactly symmetric.
pub fn gram(features: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, m) = features.dim();
    let mut g = features.dot(&features.t());
    let inv = 1.0 / m as f64;
    for i in 0..n {
        g[[i, i]] *= inv;
        for j in i + 1..n {
            let v = g[[i, j]] * inv;
            g[[i, j]] = v;
            g[[j, i]] = v;
        }
    }
    g
}

fn pad_input(x: ArrayView3<'_, f64>, pad: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if pad == 0 {
        return x.to_owned();
    }
    let mut padded = Array3::<f64>::zeros((c, h + 2 * pad, w + 2 * pad));
    padded.slice_mut(s![.., pad..pad + h, pad..pad + w]).assign(&x);
    padded
}

fn shifted_columns(padded: &Array3<f64>, ky: usize, kx: usize, ho: usize, wo: usize) -> Array2<f64> {
    let c = padded.dim().0;
    padded
        .slice(s![.., ky..ky + ho, kx..kx + wo])
        .to_owned()
        .into_shape_with_order((c, ho * wo))
        .expect("owned slice is contiguous")
}

pub(crate) fn conv2d_forward(
    x: ArrayView3<'_, f64>,
    w: ndarray::ArrayView4<'_, f64>,
    b: Option<ndarray::ArrayView1<'_, f64>>,
    pad: usize,
) -> Array3<f64> {
    let (c, h, wd) = x.dim();
    let (o, ci, kh, kw) = w.dim();
    assert_eq!(c, ci, "conv2d: input has {c} channels, weight expects {ci}");
    let padded = pad_input(x, pad);
    let ho = h + 2 * pad + 1 - kh;
    let wo = wd + 2 * pad + 1 - kw;
    let mut out = Array2::<f64>::zeros((o, ho * wo));
    for ky in 0..kh {
        for kx in 0..kw {
            let cols = shifted_columns(&padded, ky, kx, ho, wo);
            let wk = w.slice(s![.., .., ky, kx]);
            general_mat_mul(1.0, &wk, &cols, 1.0, &mut out);
        }
    }
    if let Some(b) = b {
        for (mut row, bias) in out.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += *bias;
        }
    }
    out.into_shape_with_order((o, ho, wo)).expect("contiguous output")
}

fn conv2d_backward(
    x: ArrayView3<'_, f64>,
    w: ndarray::ArrayView4<'_, f64>,
    dy: ArrayView3<'_, f64>,
    pad: usize,
) -> (Array3<f64>, ndarray::Array4<f64>) {
    let (c, h, wd) = x.dim();
    let (o, _, kh, kw) = w.dim();
    let (_, ho, wo) = dy.dim();
    let padded = pad_input(x, pad);
    let dy2 = dy
        .to_owned()
        .into_shape_with_order((o, ho * wo))
        .expect("contiguous gradient");
    let mut dpadded = Array3::<f64>::zeros(padded.raw_dim());
    let mut dw = ndarray::Array4::<f64>::zeros(w.raw_dim());
    let mut dcols = Array2::<f64>::zeros((c, ho * wo));
    let mut dwk = Array2::<f64>::zeros((o, c));
    for ky in 0..kh {
        for kx in 0..kw {
            let cols = shifted_columns(&padded, ky, kx, ho, wo);
            general_mat_mul(1.0, &dy2, &cols.t(), 0.0, &mut dwk);
            dw.slice_mut(s![.., .., ky, kx]).assign(&dwk);
            let wk = w.slice(s![.., .., ky, kx]);
            general_mat_mul(1.0, &wk.t(), &dy2, 0.0, &mut dcols);
            let dc3 = dcols.view().into_shape_with_order((c, ho, wo)).expect("contiguous");
            let mut target = dpadded.slice_mut(s![.., ky..ky + ho, kx..kx + wo]);
            target += &dc3;
        }
    }
    let dx = dpadded.slice(s![.., pad..pad + h, pad..pad + wd]).to_owned();
    (dx, dw)
}
