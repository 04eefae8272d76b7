//! Dense kernels: matrix products, normalizations, activations and losses.

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

pub const NORM_EPS: f64 = 1e-5;

/// `(outer, axis extent, inner)` decomposition of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(dim_err!("axis {axis} out of range for shape {shape:?}"));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(dim_err!("matmul inner extents differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(
        T::one(),
        MatRef::row_major(a.data(), m, k),
        MatRef::row_major(b.data(), k, n),
        T::zero(),
        &mut out,
        n,
    );
    Tensor::new(&[m, n], out)
}

/// Gradients of `a·b` given the output gradient.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gc: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = vec![T::zero(); m * k];
    gemm(
        T::one(),
        MatRef::row_major(gc.data(), m, n),
        MatRef::row_major(b.data(), k, n).t(),
        T::zero(),
        &mut ga,
        k,
    );
    let mut gb = vec![T::zero(); k * n];
    gemm(
        T::one(),
        MatRef::row_major(a.data(), m, k).t(),
        MatRef::row_major(gc.data(), m, n),
        T::zero(),
        &mut gb,
        n,
    );
    (Tensor::new(&[m, k], ga).unwrap(), Tensor::new(&[k, n], gb).unwrap())
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..n {
                max = max.max(src[base + j * inner]);
            }
            let mut total = T::zero();
            for j in 0..n {
                let e = (src[base + j * inner] - max).exp();
                out[base + j * inner] = e;
                total += e;
            }
            for j in 0..n {
                out[base + j * inner] /= total;
            }
        }
    }
    let y = Tensor::new(x.shape(), out)?;
    y.ensure_finite("softmax")?;
    Ok(y)
}

pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, gy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, n, inner) = split_axis(y.shape(), axis).unwrap();
    let (yd, gd) = (y.data(), gy.data());
    let mut gx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += yd[base + j * inner] * gd[base + j * inner];
            }
            for j in 0..n {
                let idx = base + j * inner;
                gx[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::new(y.shape(), gx).unwrap()
}

/// Row-wise softmax of a matrix where `allowed[r*cols + c] == false` acts as a
/// −∞ logit. A row with no allowed entry falls back to the unmasked softmax.
pub fn masked_softmax_rows<T: Scalar>(x: &Tensor<T>, allowed: &[bool]) -> Result<Tensor<T>> {
    let (rows, cols) = x.dims2()?;
    if allowed.len() != rows * cols {
        return Err(dim_err!(
            "attention mask has {} entries, logits are {rows}x{cols}",
            allowed.len()
        ));
    }
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        let mask = &allowed[r * cols..(r + 1) * cols];
        let any = mask.iter().any(|&m| m);
        let keep = |c: usize| !any || mask[c];
        let mut max = T::neg_infinity();
        for c in (0..cols).filter(|&c| keep(c)) {
            max = max.max(row[c]);
        }
        let mut total = T::zero();
        let dst = &mut out[r * cols..(r + 1) * cols];
        for c in (0..cols).filter(|&c| keep(c)) {
            let e = (row[c] - max).exp();
            dst[c] = e;
            total += e;
        }
        for c in (0..cols).filter(|&c| keep(c)) {
            dst[c] /= total;
        }
    }
    let y = Tensor::new(x.shape(), out)?;
    y.ensure_finite("masked softmax")?;
    Ok(y)
}

/// Statistics saved by a normalization forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

fn normalize_groups<T: Scalar>(
    x: &[T],
    groups: usize,
    n: usize,
    index: impl Fn(usize, usize) -> usize,
) -> NormStats<T> {
    let eps = T::c(NORM_EPS);
    let nf = T::from_usize(n).unwrap();
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); groups];
    for g in 0..groups {
        let mut mean = T::zero();
        for j in 0..n {
            mean += x[index(g, j)];
        }
        mean /= nf;
        let mut var = T::zero();
        for j in 0..n {
            let d = x[index(g, j)] - mean;
            var += d * d;
        }
        var /= nf;
        let r = T::one() / (var + eps).sqrt();
        rstd[g] = r;
        for j in 0..n {
            let idx = index(g, j);
            xhat[idx] = (x[idx] - mean) * r;
        }
    }
    NormStats { xhat, rstd }
}

fn normalize_groups_backward<T: Scalar>(
    stats: &NormStats<T>,
    dxhat: &[T],
    groups: usize,
    n: usize,
    index: impl Fn(usize, usize) -> usize,
) -> Vec<T> {
    let nf = T::from_usize(n).unwrap();
    let mut gx = vec![T::zero(); dxhat.len()];
    for g in 0..groups {
        let mut sum_d = T::zero();
        let mut sum_dx = T::zero();
        for j in 0..n {
            let idx = index(g, j);
            sum_d += dxhat[idx];
            sum_dx += dxhat[idx] * stats.xhat[idx];
        }
        let r = stats.rstd[g];
        for j in 0..n {
            let idx = index(g, j);
            gx[idx] = r / nf * (nf * dxhat[idx] - sum_d - stats.xhat[idx] * sum_dx);
        }
    }
    gx
}

/// Normalizes every slice along `axis` to zero mean and unit variance, then
/// applies the per-position affine `gamma`, `beta` (length = axis extent).
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    Ok(layer_norm_forward(x, gamma, beta, axis)?.0)
}

pub fn layer_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    axis: usize,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (outer, n, inner) = split_axis(x.shape(), axis)?;
    if gamma.numel() != n || beta.numel() != n {
        return Err(dim_err!(
            "layer_norm affine extents {}/{} differ from axis extent {n}",
            gamma.numel(),
            beta.numel()
        ));
    }
    let index = |g: usize, j: usize| (g / inner) * n * inner + j * inner + g % inner;
    let stats = normalize_groups(x.data(), outer * inner, n, index);
    let mut out = vec![T::zero(); x.numel()];
    for g in 0..outer * inner {
        for j in 0..n {
            let idx = index(g, j);
            out[idx] = stats.xhat[idx] * gamma.data()[j] + beta.data()[j];
        }
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

pub fn layer_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    axis: usize,
    stats: &NormStats<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (outer, n, inner) = split_axis(shape, axis).unwrap();
    let index = |g: usize, j: usize| (g / inner) * n * inner + j * inner + g % inner;
    let gyd = gy.data();
    let mut dxhat = vec![T::zero(); gyd.len()];
    let mut ggamma = vec![T::zero(); n];
    let mut gbeta = vec![T::zero(); n];
    for g in 0..outer * inner {
        for j in 0..n {
            let idx = index(g, j);
            dxhat[idx] = gyd[idx] * gamma.data()[j];
            ggamma[j] += gyd[idx] * stats.xhat[idx];
            gbeta[j] += gyd[idx];
        }
    }
    let gx = normalize_groups_backward(stats, &dxhat, outer * inner, n, index);
    (
        Tensor::new(shape, gx).unwrap(),
        Tensor::new(gamma.shape(), ggamma).unwrap(),
        Tensor::new(gamma.shape(), gbeta).unwrap(),
    )
}

/// Per-(batch, channel) normalization over the spatial axes of a feature map
/// with a per-channel affine.
pub fn instance_norm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let (b, c, sp) = x.dims5()?;
    if gamma.numel() != c || beta.numel() != c {
        return Err(dim_err!("instance_norm affine extents differ from {c} channels"));
    }
    let v: usize = sp.iter().product();
    let index = |g: usize, j: usize| g * v + j;
    let stats = normalize_groups(x.data(), b * c, v, index);
    let mut out = vec![T::zero(); x.numel()];
    for g in 0..b * c {
        let (ga, be) = (gamma.data()[g % c], beta.data()[g % c]);
        for j in 0..v {
            out[g * v + j] = stats.xhat[g * v + j] * ga + be;
        }
    }
    Ok((Tensor::new(x.shape(), out)?, stats))
}

pub fn instance_norm_backward<T: Scalar>(
    shape: &[usize],
    gamma: &Tensor<T>,
    stats: &NormStats<T>,
    gy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = shape[1];
    let groups = shape[0] * c;
    let v: usize = shape[2..].iter().product();
    let gyd = gy.data();
    let mut dxhat = vec![T::zero(); gyd.len()];
    let mut ggamma = vec![T::zero(); c];
    let mut gbeta = vec![T::zero(); c];
    for g in 0..groups {
        let ch = g % c;
        for j in 0..v {
            let idx = g * v + j;
            dxhat[idx] = gyd[idx] * gamma.data()[ch];
            ggamma[ch] += gyd[idx] * stats.xhat[idx];
            gbeta[ch] += gyd[idx];
        }
    }
    let gx = normalize_groups_backward(stats, &dxhat, groups, v, |g, j| g * v + j);
    (
        Tensor::new(shape, gx).unwrap(),
        Tensor::new(gamma.shape(), ggamma).unwrap(),
        Tensor::new(gamma.shape(), gbeta).unwrap(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
    /// tanh approximation
    Gelu,
    Sigmoid,
    Scale(f64),
}

impl ElementwiseKind {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementwiseKind::Add | ElementwiseKind::Mul)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let inner = T::c(GELU_C) * (x + T::c(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::c(GELU_C) * (T::one() + T::c(3.0 * GELU_A) * x * x);
    T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
}

fn broadcast_pair<'a, T: Scalar>(
    a: &'a Tensor<T>,
    b: &'a Tensor<T>,
) -> Result<(&'a [usize], impl Fn(usize) -> T + 'a, impl Fn(usize) -> T + 'a)> {
    let shape = if a.shape() == b.shape() || b.numel() == 1 {
        a.shape()
    } else if a.numel() == 1 {
        b.shape()
    } else {
        return Err(dim_err!(
            "shapes {:?} and {:?} are not scalar-or-equal broadcastable",
            a.shape(),
            b.shape()
        ));
    };
    let (ad, bd) = (a.data(), b.data());
    let fa = move |i: usize| if ad.len() == 1 { ad[0] } else { ad[i] };
    let fb = move |i: usize| if bd.len() == 1 { bd[0] } else { bd[i] };
    Ok((shape, fa, fb))
}

/// Pointwise arithmetic and activations. Binary kinds accept equal shapes or
/// a one-element operand on either side.
pub fn elementwise<T: Scalar>(
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
    kind: ElementwiseKind,
) -> Result<Tensor<T>> {
    use ElementwiseKind::*;
    let out = match (kind, b) {
        (Add | Mul, Some(b)) => {
            let (shape, fa, fb) = broadcast_pair(a, b)?;
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|i| if kind == Add { fa(i) + fb(i) } else { fa(i) * fb(i) })
                .collect();
            Tensor::new(shape, data)?
        }
        (Add | Mul, None) => return Err(dim_err!("{kind:?} needs a second operand")),
        (_, Some(_)) => return Err(dim_err!("{kind:?} is unary")),
        (Relu, None) => a.map(|x| x.max(T::zero())),
        (Gelu, None) => a.map(gelu),
        (Sigmoid, None) => a.map(sigmoid),
        (Scale(s), None) => {
            let s = T::c(s);
            a.map(|x| x * s)
        }
    };
    out.ensure_finite("elementwise")?;
    Ok(out)
}

/// Gradients of [`elementwise`]; the second entry is `None` for unary kinds.
pub fn elementwise_backward<T: Scalar>(
    a: &Tensor<T>,
    b: Option<&Tensor<T>>,
    kind: ElementwiseKind,
    gy: &Tensor<T>,
) -> (Tensor<T>, Option<Tensor<T>>) {
    use ElementwiseKind::*;
    let g = gy.data();
    let reduce = |full: Vec<T>, target: &Tensor<T>| -> Tensor<T> {
        if target.numel() == 1 && full.len() != 1 {
            let mut s = T::zero();
            for v in full {
                s += v;
            }
            Tensor::new(target.shape(), vec![s]).unwrap()
        } else {
            Tensor::new(target.shape(), full).unwrap()
        }
    };
    match kind {
        Add | Mul => {
            let b = b.expect("binary op");
            let (_, fa, fb) = broadcast_pair(a, b).unwrap();
            let n = g.len();
            let (ga, gb): (Vec<T>, Vec<T>) = if kind == Add {
                (g.to_vec(), g.to_vec())
            } else {
                ((0..n).map(|i| g[i] * fb(i)).collect(), (0..n).map(|i| g[i] * fa(i)).collect())
            };
            (reduce(ga, a), Some(reduce(gb, b)))
        }
        Relu => {
            let d = a.data().iter().zip(g).map(|(&x, &gi)| if x > T::zero() { gi } else { T::zero() });
            (Tensor::new(a.shape(), d.collect()).unwrap(), None)
        }
        Gelu => {
            let d = a.data().iter().zip(g).map(|(&x, &gi)| gi * gelu_grad(x));
            (Tensor::new(a.shape(), d.collect()).unwrap(), None)
        }
        Sigmoid => {
            let d = a.data().iter().zip(g).map(|(&x, &gi)| {
                let s = sigmoid(x);
                gi * s * (T::one() - s)
            });
            (Tensor::new(a.shape(), d.collect()).unwrap(), None)
        }
        Scale(s) => {
            let s = T::c(s);
            (Tensor::new(a.shape(), g.iter().map(|&x| x * s).collect()).unwrap(), None)
        }
    }
}

/// Soft Dice loss `1 − (2Σpt + ε)/(Σp + Σt + ε)`.
pub fn dice_loss<T: Scalar>(p: &[T], t: &[T], eps: T) -> Result<T> {
    if p.len() != t.len() {
        return Err(dim_err!("dice: {} predictions vs {} targets", p.len(), t.len()));
    }
    let (mut inter, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in p.iter().zip(t) {
        inter += a * b;
        sp += a;
        st += b;
    }
    Ok(T::one() - (T::c(2.0) * inter + eps) / (sp + st + eps))
}

pub fn dice_loss_grad<T: Scalar>(p: &[T], t: &[T], eps: T) -> Vec<T> {
    let (mut inter, mut sp, mut st) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in p.iter().zip(t) {
        inter += a * b;
        sp += a;
        st += b;
    }
    let s = sp + st + eps;
    let num = T::c(2.0) * inter + eps;
    t.iter().map(|&ti| -(T::c(2.0) * ti * s - num) / (s * s)).collect()
}

/// Mean binary cross-entropy on logits, `max(x,0) − x·t + ln(1 + e^{−|x|})`.
pub fn bce_with_logits<T: Scalar>(x: &[T], t: &[T]) -> Result<T> {
    if x.len() != t.len() {
        return Err(dim_err!("bce: {} logits vs {} targets", x.len(), t.len()));
    }
    let mut acc = T::zero();
    for (&xi, &ti) in x.iter().zip(t) {
        acc += xi.max(T::zero()) - xi * ti + (-xi.abs()).exp().ln_1p();
    }
    Ok(acc / T::from_usize(x.len()).unwrap())
}

pub fn bce_with_logits_grad<T: Scalar>(x: &[T], t: &[T]) -> Vec<T> {
    let n = T::from_usize(x.len()).unwrap();
    x.iter().zip(t).map(|(&xi, &ti)| (sigmoid(xi) - ti) / n).collect()
}

/// `Σ_r w_r · (−log softmax(x_r)[label_r])` over the rows of a matrix.
pub fn cross_entropy_rows<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    weights: &[T],
) -> Result<(T, Tensor<T>)> {
    let (rows, cols) = logits.dims2()?;
    if labels.len() != rows || weights.len() != rows {
        return Err(dim_err!("cross entropy: {rows} rows, {} labels, {} weights", labels.len(), weights.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::Range(format!("label {bad} outside {cols} classes")));
    }
    let probs = softmax(logits, 1)?;
    let mut loss = T::zero();
    for r in 0..rows {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &v in row {
            total += (v - max).exp();
        }
        let log_p = row[labels[r]] - max - total.ln();
        loss += -weights[r] * log_p;
    }
    Ok((loss, probs))
}

pub fn cross_entropy_rows_grad<T: Scalar>(probs: &Tensor<T>, labels: &[usize], weights: &[T]) -> Tensor<T> {
    let cols = probs.shape()[1];
    let mut g = probs.data().to_vec();
    for (r, (&l, &w)) in labels.iter().zip(weights).enumerate() {
        for c in 0..cols {
            let idx = r * cols + c;
            g[idx] = w * (g[idx] - if c == l { T::one() } else { T::zero() });
        }
    }
    Tensor::new(probs.shape(), g).unwrap()
}
