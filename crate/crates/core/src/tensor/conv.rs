//! 3D convolution, average pooling and nearest upsampling on B×C×D×H×W maps.

use super::{gemm, MatRef, Scalar, Tensor};
use crate::error::{dim_err, Result};

/// Geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(x: &Tensor<impl Scalar>, w: &Tensor<impl Scalar>, stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, input) = x.dims5()?;
        let (cout, wcin, k) = match w.shape()[..] {
            [o, i, a, b, c] if a == b && b == c => (o, i, a),
            _ => return Err(dim_err!("conv weight must be out×in×k×k×k, got {:?}", w.shape())),
        };
        if wcin != cin {
            return Err(dim_err!("conv expects {wcin} input channels, feature map has {cin}"));
        }
        if stride == 0 {
            return Err(dim_err!("conv stride must be positive"));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad;
            if padded < k {
                return Err(dim_err!(
                    "conv output extent along axis {a} is not positive (extent {}, pad {pad}, kernel {k})",
                    input[a]
                ));
            }
            output[a] = (padded - k) / stride + 1;
        }
        Ok(ConvGeom { batch, cin, cout, k, stride, pad, input, output })
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }

    fn patch(&self) -> usize {
        self.cin * self.k * self.k * self.k
    }

    /// Output depth slices per im2col chunk, sized to keep the column buffer
    /// around a megabyte.
    fn chunk_depth(&self) -> usize {
        let per_slice = self.patch() * self.output[1] * self.output[2];
        (262_144 / per_slice.max(1)).clamp(1, self.output[0])
    }

    /// Fills `col` (patch × slices·Ho·Wo) for output depth slices `d0..d1`.
    fn im2col<T: Scalar>(&self, x: &[T], d0: usize, d1: usize, col: &mut Vec<T>) {
        let [di, hi, wi] = self.input;
        let [_, ho, wo] = self.output;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = (d1 - d0) * ho * wo;
        col.clear();
        col.resize(self.patch() * n, T::zero());
        for c in 0..self.cin {
            let plane = &x[c * di * hi * wi..(c + 1) * di * hi * wi];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let dst = &mut col[row * n..(row + 1) * n];
                        let mut j = 0;
                        for od in d0..d1 {
                            let id = (od * s + kd) as isize - p;
                            for oh in 0..ho {
                                let ih = (oh * s + kh) as isize - p;
                                let inside = id >= 0 && (id as usize) < di && ih >= 0 && (ih as usize) < hi;
                                if !inside {
                                    j += wo;
                                    continue;
                                }
                                let src = &plane[(id as usize * hi + ih as usize) * wi..][..wi];
                                if s == 1 {
                                    let (lo, hi_) = unit_stride_span(kw, p, wo, wi);
                                    let off = (lo + kw) as isize - p;
                                    dst[j + lo..j + hi_].copy_from_slice(&src[off as usize..off as usize + hi_ - lo]);
                                    j += wo;
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * s + kw) as isize - p;
                                    if iw >= 0 && (iw as usize) < wi {
                                        dst[j] = src[iw as usize];
                                    }
                                    j += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds `col` back into the input gradient.
    fn col2im<T: Scalar>(&self, col: &[T], d0: usize, d1: usize, gx: &mut [T]) {
        let [di, hi, wi] = self.input;
        let [_, ho, wo] = self.output;
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let n = (d1 - d0) * ho * wo;
        for c in 0..self.cin {
            let plane = &mut gx[c * di * hi * wi..(c + 1) * di * hi * wi];
            for kd in 0..k {
                for kh in 0..k {
                    for kw in 0..k {
                        let row = ((c * k + kd) * k + kh) * k + kw;
                        let src = &col[row * n..(row + 1) * n];
                        let mut j = 0;
                        for od in d0..d1 {
                            let id = (od * s + kd) as isize - p;
                            for oh in 0..ho {
                                let ih = (oh * s + kh) as isize - p;
                                let inside = id >= 0 && (id as usize) < di && ih >= 0 && (ih as usize) < hi;
                                if !inside {
                                    j += wo;
                                    continue;
                                }
                                let dst = &mut plane[(id as usize * hi + ih as usize) * wi..][..wi];
                                if s == 1 {
                                    let (lo, hi_) = unit_stride_span(kw, p, wo, wi);
                                    let off = ((lo + kw) as isize - p) as usize;
                                    for (d, &v) in dst[off..off + hi_ - lo].iter_mut().zip(&src[j + lo..j + hi_]) {
                                        *d += v;
                                    }
                                    j += wo;
                                    continue;
                                }
                                for ow in 0..wo {
                                    let iw = (ow * s + kw) as isize - p;
                                    if iw >= 0 && (iw as usize) < wi {
                                        dst[iw as usize] += src[j];
                                    }
                                    j += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `lo..hi` whose input column `ow + kw − pad` lies inside `0..wi`.
fn unit_stride_span(kw: usize, pad: isize, wo: usize, wi: usize) -> (usize, usize) {
    let shift = kw as isize - pad;
    let lo = (-shift).max(0) as usize;
    let hi = ((wi as isize - shift).max(0) as usize).min(wo);
    (lo.min(hi), hi)
}

/// Direct 3D convolution with zero padding. A 1×1×1 kernel with unit stride
/// is exactly the channel matmul `W·X` per batch element.
pub fn conv3d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let geom = ConvGeom::new(x, w, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != geom.cout {
            return Err(dim_err!("conv bias has {} entries for {} output channels", b.numel(), geom.cout));
        }
    }
    let (vin, vout) = (geom.in_vox(), geom.out_vox());
    let mut out = vec![T::zero(); geom.batch * geom.cout * vout];
    let wmat = MatRef::row_major(w.data(), geom.cout, geom.patch());
    let mut col = Vec::new();
    for b in 0..geom.batch {
        let xb = &x.data()[b * geom.cin * vin..(b + 1) * geom.cin * vin];
        let ob = &mut out[b * geom.cout * vout..(b + 1) * geom.cout * vout];
        if geom.pointwise() {
            gemm(T::one(), wmat, MatRef::row_major(xb, geom.cin, vin), T::zero(), ob, vin);
        } else {
            let plane = geom.output[1] * geom.output[2];
            let step = geom.chunk_depth();
            let mut d0 = 0;
            while d0 < geom.output[0] {
                let d1 = (d0 + step).min(geom.output[0]);
                let n = (d1 - d0) * plane;
                geom.im2col(xb, d0, d1, &mut col);
                gemm(
                    T::one(),
                    wmat,
                    MatRef::row_major(&col, geom.patch(), n),
                    T::zero(),
                    &mut ob[d0 * plane..],
                    vout,
                );
                d0 = d1;
            }
        }
        if let Some(bias) = bias {
            for (o, &bv) in bias.data().iter().enumerate() {
                ob[o * vout..(o + 1) * vout].iter_mut().for_each(|v| *v += bv);
            }
        }
    }
    let [d, h, wd] = geom.output;
    let y = Tensor::new(&[geom.batch, geom.cout, d, h, wd], out)?;
    y.ensure_finite("conv3d")?;
    Ok(y)
}

/// Gradients of [`conv3d`] with respect to input, weight and bias.
pub fn conv3d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    gy: &Tensor<T>,
    need_input_grad: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let geom = ConvGeom::new(x, w, stride, pad)?;
    let (vin, vout, patch) = (geom.in_vox(), geom.out_vox(), geom.patch());
    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = vec![T::zero(); geom.cout];
    let wmat = MatRef::row_major(w.data(), geom.cout, patch);
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for b in 0..geom.batch {
        let xb = &x.data()[b * geom.cin * vin..(b + 1) * geom.cin * vin];
        let gyb = &gy.data()[b * geom.cout * vout..(b + 1) * geom.cout * vout];
        let gxb = &mut gx[b * geom.cin * vin..(b + 1) * geom.cin * vin];
        for o in 0..geom.cout {
            for &g in &gyb[o * vout..(o + 1) * vout] {
                gb[o] += g;
            }
        }
        if geom.pointwise() {
            let gymat = MatRef::row_major(gyb, geom.cout, vout);
            gemm(T::one(), gymat, MatRef::row_major(xb, geom.cin, vin).t(), T::one(), &mut gw, patch);
            if need_input_grad {
                gemm(T::one(), wmat.t(), gymat, T::one(), gxb, vin);
            }
            continue;
        }
        let plane = geom.output[1] * geom.output[2];
        let step = geom.chunk_depth();
        let mut d0 = 0;
        while d0 < geom.output[0] {
            let d1 = (d0 + step).min(geom.output[0]);
            let n = (d1 - d0) * plane;
            let gychunk = MatRef { data: &gyb[d0 * plane..], rows: geom.cout, cols: n, rs: vout, cs: 1 };
            geom.im2col(xb, d0, d1, &mut col);
            gemm(T::one(), gychunk, MatRef::row_major(&col, patch, n).t(), T::one(), &mut gw, patch);
            if need_input_grad {
                dcol.clear();
                dcol.resize(patch * n, T::zero());
                gemm(T::one(), wmat.t(), gychunk, T::zero(), &mut dcol, n);
                geom.col2im(&dcol, d0, d1, gxb);
            }
            d0 = d1;
        }
    }
    Ok((
        Tensor::new(x.shape(), gx)?,
        Tensor::new(w.shape(), gw)?,
        Tensor::new(&[geom.cout], gb)?,
    ))
}

fn pool_dims(x: &Tensor<impl Scalar>, factor: [usize; 3]) -> Result<(usize, [usize; 3], [usize; 3])> {
    let (b, c, sp) = x.dims5()?;
    let mut out = [0; 3];
    for a in 0..3 {
        if factor[a] == 0 || sp[a] % factor[a] != 0 {
            return Err(dim_err!("extent {} along axis {a} is not divisible by pool factor {}", sp[a], factor[a]));
        }
        out[a] = sp[a] / factor[a];
    }
    Ok((b * c, sp, out))
}

/// Block average pooling; extents must be divisible by the factor.
pub fn avg_pool3d<T: Scalar>(x: &Tensor<T>, factor: [usize; 3]) -> Result<Tensor<T>> {
    let (planes, [d, h, w], [od, oh, ow]) = pool_dims(x, factor)?;
    let [fd, fh, fw] = factor;
    let inv = T::one() / T::from_usize(fd * fh * fw).unwrap();
    let mut out = vec![T::zero(); planes * od * oh * ow];
    for p in 0..planes {
        let src = &x.data()[p * d * h * w..(p + 1) * d * h * w];
        let dst = &mut out[p * od * oh * ow..(p + 1) * od * oh * ow];
        for z in 0..od {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = T::zero();
                    for a in 0..fd {
                        for b in 0..fh {
                            let row = ((z * fd + a) * h + y * fh + b) * w + xx * fw;
                            for c in 0..fw {
                                acc += src[row + c];
                            }
                        }
                    }
                    dst[(z * oh + y) * ow + xx] = acc * inv;
                }
            }
        }
    }
    let s = x.shape();
    Tensor::new(&[s[0], s[1], od, oh, ow], out)
}

pub fn avg_pool3d_backward<T: Scalar>(shape: &[usize], factor: [usize; 3], gy: &Tensor<T>) -> Tensor<T> {
    let (d, h, w) = (shape[2], shape[3], shape[4]);
    let [fd, fh, fw] = factor;
    let (od, oh, ow) = (d / fd, h / fh, w / fw);
    let inv = T::one() / T::from_usize(fd * fh * fw).unwrap();
    let planes = shape[0] * shape[1];
    let mut gx = vec![T::zero(); planes * d * h * w];
    for p in 0..planes {
        for z in 0..d {
            for y in 0..h {
                for xx in 0..w {
                    gx[((p * d + z) * h + y) * w + xx] = gy.data()[((p * od + z / fd) * oh + y / fh) * ow + xx / fw] * inv;
                }
            }
        }
    }
    Tensor::new(shape, gx).unwrap()
}

/// Nearest-neighbour ×2 upsampling along every spatial axis.
pub fn upsample_nearest2<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, [d, h, w]) = x.dims5()?;
    let mut out = vec![T::zero(); b * c * 8 * d * h * w];
    for p in 0..b * c {
        for z in 0..2 * d {
            for y in 0..2 * h {
                let src = &x.data()[((p * d + z / 2) * h + y / 2) * w..][..w];
                let dst = &mut out[((p * 2 * d + z) * 2 * h + y) * 2 * w..][..2 * w];
                for xx in 0..2 * w {
                    dst[xx] = src[xx / 2];
                }
            }
        }
    }
    Tensor::new(&[b, c, 2 * d, 2 * h, 2 * w], out)
}

pub fn upsample_nearest2_backward<T: Scalar>(shape: &[usize], gy: &Tensor<T>) -> Tensor<T> {
    let (d, h, w) = (shape[2], shape[3], shape[4]);
    let planes = shape[0] * shape[1];
    let mut gx = vec![T::zero(); planes * d * h * w];
    for p in 0..planes {
        for z in 0..2 * d {
            for y in 0..2 * h {
                let src = &gy.data()[((p * 2 * d + z) * 2 * h + y) * 2 * w..][..2 * w];
                let dst = &mut gx[((p * d + z / 2) * h + y / 2) * w..][..w];
                for xx in 0..2 * w {
                    dst[xx / 2] += src[xx];
                }
            }
        }
    }
    Tensor::new(shape, gx).unwrap()
}
