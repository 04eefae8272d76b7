//! Reverse-mode tape over the hand-written kernels.
//!
//! Each recorded node keeps its forward value and the inputs its backward
//! rule needs. [`Graph::backward`] walks the tape once in reverse creation
//! order; there is no general program transformation, only the per-op rules
//! defined next to the kernels.

use super::conv;
use super::ops::{self, ElementwiseKind, NormStats};
use super::sample::{self, DeformInputs, DeformLayout};
use super::{Scalar, Tensor};
use crate::error::{dim_err, Result};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Elementwise(ElementwiseKind, Var, Option<Var>),
    AxisAdd { x: Var, v: Var, axis: usize },
    AxisMul { x: Var, v: Var, axis: usize },
    Softmax(Var, usize),
    MaskedSoftmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, axis: usize, stats: NormStats<T> },
    InstanceNorm { x: Var, gamma: Var, beta: Var, stats: NormStats<T> },
    Conv3d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool(Var, [usize; 3]),
    Upsample2(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    GridSample(Var, Var),
    Deform(DeformArgs<T>),
    Sum(Var),
    Dice { p: Var, target: Arc<Vec<T>>, eps: T },
    Bce { x: Var, target: Arc<Vec<T>> },
    CrossEntropy { x: Var, labels: Vec<usize>, weights: Vec<T>, probs: Tensor<T> },
}

/// Operands of [`Graph::deform`].
#[derive(Clone, Debug)]
pub struct DeformArgs<T> {
    /// V×E voxel-major value matrix per level
    pub values: Vec<Var>,
    pub extents: Vec<[usize; 3]>,
    /// P×3 cell-convention anchors
    pub refs: Tensor<T>,
    pub offsets: Var,
    pub scales: Var,
    pub weights: Var,
    pub layout: DeformLayout,
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Values are immutable once recorded.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor<T> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, delta: Tensor<T>) {
    match slot {
        Some(g) => {
            for (a, &b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let y = self.value(a).transpose2()?;
        Ok(self.push(y, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).clone().reshape(shape)?;
        Ok(self.push(y, Op::Reshape(a), &[a]))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let y = ops::elementwise(self.value(a), b.map(|b| self.value(b)), kind)?;
        let inputs: Vec<Var> = std::iter::once(a).chain(b).collect();
        Ok(self.push(y, Op::Elementwise(kind, a, b), &inputs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Add, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Mul, a, Some(b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.elementwise(ElementwiseKind::Scale(s), a, None)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Relu, a, None)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Gelu, a, None)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.elementwise(ElementwiseKind::Sigmoid, a, None)
    }

    fn axis_check(&self, x: Var, v: Var, axis: usize) -> Result<(usize, usize, usize)> {
        let (outer, n, inner) = ops::split_axis(self.shape(x), axis)?;
        if self.value(v).numel() != n {
            return Err(dim_err!(
                "vector of {} entries does not match axis {axis} of {:?}",
                self.value(v).numel(),
                self.shape(x)
            ));
        }
        Ok((outer, n, inner))
    }

    /// Adds vector `v` broadcast along `axis` (row bias when `axis` is the
    /// last axis, channel bias when it is the channel axis).
    pub fn add_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (outer, n, inner) = self.axis_check(x, v, axis)?;
        let mut y = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (i, val) in y.data_mut().iter_mut().enumerate() {
            *val += vd[(i / inner) % n];
        }
        let _ = outer;
        Ok(self.push(y, Op::AxisAdd { x, v, axis }, &[x, v]))
    }

    /// Multiplies by vector `v` broadcast along `axis`.
    pub fn mul_along(&mut self, x: Var, v: Var, axis: usize) -> Result<Var> {
        let (_, n, inner) = self.axis_check(x, v, axis)?;
        let mut y = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (i, val) in y.data_mut().iter_mut().enumerate() {
            *val *= vd[(i / inner) % n];
        }
        Ok(self.push(y, Op::AxisMul { x, v, axis }, &[x, v]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = ops::softmax(self.value(x), axis)?;
        Ok(self.push(y, Op::Softmax(x, axis), &[x]))
    }

    /// Row softmax with `allowed` gating; see [`ops::masked_softmax_rows`].
    pub fn masked_softmax(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let y = ops::masked_softmax_rows(self.value(x), allowed)?;
        Ok(self.push(y, Op::MaskedSoftmax(x), &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, axis: usize) -> Result<Var> {
        let (y, stats) = ops::layer_norm_forward(self.value(x), self.value(gamma), self.value(beta), axis)?;
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, axis, stats }, &[x, gamma, beta]))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (y, stats) = ops::instance_norm_forward(self.value(x), self.value(gamma), self.value(beta))?;
        Ok(self.push(y, Op::InstanceNorm { x, gamma, beta, stats }, &[x, gamma, beta]))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let y = conv::conv3d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push(y, Op::Conv3d { x, w, b, stride, pad }, &inputs))
    }

    pub fn avg_pool3d(&mut self, x: Var, factor: [usize; 3]) -> Result<Var> {
        let y = conv::avg_pool3d(self.value(x), factor)?;
        Ok(self.push(y, Op::AvgPool(x, factor), &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let y = conv::upsample_nearest2(self.value(x))?;
        Ok(self.push(y, Op::Upsample2(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || axis >= s.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(dim_err!("cannot concatenate {:?} with {first:?} along axis {axis}", s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let n = self.shape(x)[axis];
                data.extend_from_slice(&self.value(x).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::Concat(xs.to_vec(), axis), xs))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (outer, n, inner) = ops::split_axis(self.shape(x), axis)?;
        if len == 0 || start + len > n {
            return Err(dim_err!("slice {start}..{} outside extent {n}", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = self.shape(x).to_vec();
        shape[axis] = len;
        let y = Tensor::new(&shape, data)?;
        Ok(self.push(y, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn grid_sample(&mut self, value: Var, coords: Var) -> Result<Var> {
        let y = sample::grid_sample_trilinear(self.value(value), self.value(coords))?;
        Ok(self.push(y, Op::GridSample(value, coords), &[value, coords]))
    }

    /// Fused deformable aggregation, see [`sample::deform_aggregate`].
    pub fn deform(&mut self, args: DeformArgs<T>) -> Result<Var> {
        let y = sample::deform_aggregate(&self.deform_inputs(&args, &args.values.iter().map(|&v| self.value(v)).collect::<Vec<_>>()))?;
        let inputs: Vec<Var> = args.values.iter().copied().chain([args.offsets, args.scales, args.weights]).collect();
        Ok(self.push(y, Op::Deform(args), &inputs))
    }

    fn deform_inputs<'a>(&'a self, a: &'a DeformArgs<T>, vals: &'a [&'a Tensor<T>]) -> DeformInputs<'a, T> {
        DeformInputs {
            values: vals,
            extents: &a.extents,
            refs: &a.refs,
            offsets: self.value(a.offsets),
            scales: self.value(a.scales),
            weights: self.value(a.weights),
            layout: a.layout,
        }
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let y = Tensor::scalar(self.value(x).sum());
        Ok(self.push(y, Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn dice_loss(&mut self, p: Var, target: Arc<Vec<T>>, eps: T) -> Result<Var> {
        let l = ops::dice_loss(self.value(p).data(), &target, eps)?;
        Ok(self.push(Tensor::scalar(l), Op::Dice { p, target, eps }, &[p]))
    }

    pub fn bce_with_logits(&mut self, x: Var, target: Arc<Vec<T>>) -> Result<Var> {
        let l = ops::bce_with_logits(self.value(x).data(), &target)?;
        Ok(self.push(Tensor::scalar(l), Op::Bce { x, target }, &[x]))
    }

    /// Weighted sum of per-row cross-entropies.
    pub fn cross_entropy(&mut self, x: Var, labels: Vec<usize>, weights: Vec<T>) -> Result<Var> {
        let (l, probs) = ops::cross_entropy_rows(self.value(x), &labels, &weights)?;
        Ok(self.push(Tensor::scalar(l), Op::CrossEntropy { x, labels, weights, probs }, &[x]))
    }

    /// Reverse pass from a one-element output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        if self.value(output).numel() != 1 {
            return Err(dim_err!("backward needs a scalar output, got {:?}", self.shape(output)));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::full(self.shape(output), T::one()));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Grads { grads })
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let mut give = |v: Var, g: Tensor<T>| {
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], g);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ga, gb) = ops::matmul_backward(self.value(*a), self.value(*b), gy);
                give(*a, ga);
                give(*b, gb);
            }
            Op::Transpose(a) => give(*a, gy.transpose2()?),
            Op::Reshape(a) => give(*a, gy.clone().reshape(self.shape(*a))?),
            Op::Elementwise(kind, a, b) => {
                let (ga, gb) = ops::elementwise_backward(self.value(*a), b.map(|b| self.value(b)), *kind, gy);
                give(*a, ga);
                if let (Some(b), Some(gb)) = (b, gb) {
                    give(*b, gb);
                }
            }
            Op::AxisAdd { x, v, axis } => {
                let (_, n, inner) = ops::split_axis(self.shape(*x), *axis)?;
                let mut gv = vec![T::zero(); n];
                for (i, &g) in gy.data().iter().enumerate() {
                    gv[(i / inner) % n] += g;
                }
                give(*x, gy.clone());
                give(*v, Tensor::new(self.shape(*v), gv)?);
            }
            Op::AxisMul { x, v, axis } => {
                let (_, n, inner) = ops::split_axis(self.shape(*x), *axis)?;
                let (xd, vd) = (self.value(*x).data(), self.value(*v).data());
                let mut gv = vec![T::zero(); n];
                let mut gx = vec![T::zero(); xd.len()];
                for (i, &g) in gy.data().iter().enumerate() {
                    let j = (i / inner) % n;
                    gv[j] += g * xd[i];
                    gx[i] = g * vd[j];
                }
                give(*x, Tensor::new(self.shape(*x), gx)?);
                give(*v, Tensor::new(self.shape(*v), gv)?);
            }
            Op::Softmax(x, axis) => give(*x, ops::softmax_backward(&node.value, gy, *axis)),
            Op::MaskedSoftmax(x) => give(*x, ops::softmax_backward(&node.value, gy, 1)),
            Op::LayerNorm { x, gamma, beta, axis, stats } => {
                let (gx, gg, gb) = ops::layer_norm_backward(self.shape(*x), self.value(*gamma), *axis, stats, gy);
                give(*x, gx);
                give(*gamma, gg);
                give(*beta, gb);
            }
            Op::InstanceNorm { x, gamma, beta, stats } => {
                let (gx, gg, gb) = ops::instance_norm_backward(self.shape(*x), self.value(*gamma), stats, gy);
                give(*x, gx);
                give(*gamma, gg);
                give(*beta, gb);
            }
            Op::Conv3d { x, w, b, stride, pad } => {
                let need_x = self.nodes[x.0].needs_grad;
                let (gx, gw, gb) = conv::conv3d_backward(self.value(*x), self.value(*w), *stride, *pad, gy, need_x)?;
                if need_x {
                    give(*x, gx);
                }
                give(*w, gw);
                if let Some(b) = b {
                    give(*b, gb);
                }
            }
            Op::AvgPool(x, f) => give(*x, conv::avg_pool3d_backward(self.shape(*x), *f, gy)),
            Op::Upsample2(x) => give(*x, conv::upsample_nearest2_backward(self.shape(*x), gy)),
            Op::Concat(xs, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut start = 0;
                for &x in xs {
                    let n = self.shape(x)[*axis];
                    let mut g = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        g.extend_from_slice(&gy.data()[(o * total + start) * inner..(o * total + start + n) * inner]);
                    }
                    give(x, Tensor::new(self.shape(x), g)?);
                    start += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, n, inner) = ops::split_axis(self.shape(*x), *axis)?;
                let len = node.value.shape()[*axis];
                let mut g = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    g[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&gy.data()[o * len * inner..(o + 1) * len * inner]);
                }
                give(*x, Tensor::new(self.shape(*x), g)?);
            }
            Op::GridSample(v, c) => {
                let (gv, gc) = sample::grid_sample_backward(self.value(*v), self.value(*c), gy)?;
                give(*v, gv);
                give(*c, gc);
            }
            Op::Deform(a) => {
                let vals: Vec<&Tensor<T>> = a.values.iter().map(|&v| self.value(v)).collect();
                let g = sample::deform_aggregate_backward(&self.deform_inputs(a, &vals), gy)?;
                for (&v, gv) in a.values.iter().zip(g.values) {
                    give(v, gv);
                }
                give(a.offsets, g.offsets);
                give(a.scales, g.scales);
                give(a.weights, g.weights);
            }
            Op::Sum(x) => {
                let s = gy.item();
                give(*x, Tensor::full(self.shape(*x), s));
            }
            Op::Dice { p, target, eps } => {
                let s = gy.item();
                let g = ops::dice_loss_grad(self.value(*p).data(), target, *eps);
                give(*p, Tensor::new(self.shape(*p), g.into_iter().map(|x| x * s).collect())?);
            }
            Op::Bce { x, target } => {
                let s = gy.item();
                let g = ops::bce_with_logits_grad(self.value(*x).data(), target);
                give(*x, Tensor::new(self.shape(*x), g.into_iter().map(|v| v * s).collect())?);
            }
            Op::CrossEntropy { x, labels, weights, probs } => {
                let s = gy.item();
                let g = ops::cross_entropy_rows_grad(probs, labels, weights).map(|v| v * s);
                give(*x, g);
            }
        }
        Ok(())
    }
}
