//! Trilinear sampling with clamp-to-border and analytic gradients.
//!
//! Sampling coordinates are normalized per axis so that 0 and 1 land on the
//! centres of the first and last voxel ("align corners"). Anchors produced
//! elsewhere use the cell convention `(i + 0.5) / n`; [`cell_to_grid`] maps
//! between the two.

use super::{Scalar, Tensor};
use crate::error::{dim_err, Error, Result};

/// Maps a cell-convention coordinate onto the align-corners grid of an axis
/// with `n` voxels. Returns the coordinate and its derivative.
pub fn cell_to_grid<T: Scalar>(u: T, n: usize) -> (T, T) {
    if n <= 1 {
        return (T::c(0.5), T::zero());
    }
    let nf = T::from_usize(n).unwrap();
    let scale = nf / (nf - T::one());
    ((u * nf - T::c(0.5)) / (nf - T::one()), scale)
}

/// The eight interpolation corners of one sample point.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Corners<T> {
    pub idx: [usize; 8],
    pub w: [T; 8],
    /// d weight / d normalized coordinate, per axis
    pub dw: [[T; 3]; 8],
}

pub(crate) fn corners<T: Scalar>(g: [T; 3], extents: [usize; 3]) -> Corners<T> {
    let mut lo = [0usize; 3];
    let mut hi = [0usize; 3];
    let mut frac = [T::zero(); 3];
    let mut dpos = [T::zero(); 3];
    for a in 0..3 {
        let n = extents[a];
        if n == 1 {
            continue;
        }
        let nm1 = T::from_usize(n - 1).unwrap();
        let clamped = g[a].max(T::zero()).min(T::one());
        if g[a] >= T::zero() && g[a] <= T::one() {
            dpos[a] = nm1;
        }
        let pos = clamped * nm1;
        let i0 = pos.floor().to_usize().unwrap().min(n - 2);
        lo[a] = i0;
        hi[a] = i0 + 1;
        frac[a] = pos - T::from_usize(i0).unwrap();
    }
    let [_, h, w] = extents;
    let mut out = Corners { idx: [0; 8], w: [T::zero(); 8], dw: [[T::zero(); 3]; 8] };
    for corner in 0..8 {
        let bits = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
        let mut wa = [T::zero(); 3];
        let mut da = [T::zero(); 3];
        let mut ix = [0usize; 3];
        for a in 0..3 {
            if bits[a] == 1 {
                wa[a] = frac[a];
                da[a] = T::one();
                ix[a] = hi[a];
            } else {
                wa[a] = T::one() - frac[a];
                da[a] = -T::one();
                ix[a] = lo[a];
            }
        }
        out.idx[corner] = (ix[0] * h + ix[1]) * w + ix[2];
        out.w[corner] = wa[0] * wa[1] * wa[2];
        out.dw[corner] = [
            da[0] * wa[1] * wa[2] * dpos[0],
            wa[0] * da[1] * wa[2] * dpos[1],
            wa[0] * wa[1] * da[2] * dpos[2],
        ];
    }
    out
}

fn value_dims<T: Scalar>(value: &Tensor<T>) -> Result<(usize, [usize; 3])> {
    let (b, c, sp) = value.dims5()?;
    if b != 1 {
        return Err(dim_err!("grid sample takes one batch element per call, got {b}"));
    }
    Ok((c, sp))
}

fn coords_of<T: Scalar>(coords: &Tensor<T>) -> Result<Vec<[T; 3]>> {
    let (p, three) = coords.dims2()?;
    if three != 3 {
        return Err(dim_err!("coordinates must be P×3, got {:?}", coords.shape()));
    }
    let d = coords.data();
    if let Some(i) = d.iter().position(|x| x.is_nan()) {
        return Err(Error::Numeric(format!("NaN sampling coordinate at flat index {i}")));
    }
    Ok((0..p).map(|i| [d[3 * i], d[3 * i + 1], d[3 * i + 2]]).collect())
}

/// Samples `value` (1×C×D×H×W) at `coords` (P×3, ordered d,h,w) giving P×C.
pub fn grid_sample_trilinear<T: Scalar>(value: &Tensor<T>, coords: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, sp) = value_dims(value)?;
    let pts = coords_of(coords)?;
    let vox: usize = sp.iter().product();
    let v = value.data();
    let mut out = vec![T::zero(); pts.len() * c];
    for (p, g) in pts.iter().enumerate() {
        let cr = corners(*g, sp);
        for ch in 0..c {
            let plane = &v[ch * vox..(ch + 1) * vox];
            let mut acc = T::zero();
            for k in 0..8 {
                acc += cr.w[k] * plane[cr.idx[k]];
            }
            out[p * c + ch] = acc;
        }
    }
    Tensor::new(&[pts.len(), c], out)
}

/// Gradients of [`grid_sample_trilinear`] with respect to value and coordinates.
pub fn grid_sample_backward<T: Scalar>(
    value: &Tensor<T>,
    coords: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, sp) = value_dims(value)?;
    let pts = coords_of(coords)?;
    let vox: usize = sp.iter().product();
    let v = value.data();
    let mut gv = vec![T::zero(); value.numel()];
    let mut gc = vec![T::zero(); coords.numel()];
    for (p, g) in pts.iter().enumerate() {
        let cr = corners(*g, sp);
        for ch in 0..c {
            let go = gy.data()[p * c + ch];
            let base = ch * vox;
            for k in 0..8 {
                gv[base + cr.idx[k]] += cr.w[k] * go;
                for a in 0..3 {
                    gc[3 * p + a] += cr.dw[k][a] * v[base + cr.idx[k]] * go;
                }
            }
        }
    }
    Ok((Tensor::new(value.shape(), gv)?, Tensor::new(coords.shape(), gc)?))
}

/// Layout of the fused deformable aggregation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeformLayout {
    pub heads: usize,
    pub levels: usize,
    pub points: usize,
}

impl DeformLayout {
    pub fn slots(&self) -> usize {
        self.heads * self.levels * self.points
    }

    pub fn slot(&self, h: usize, s: usize, k: usize) -> usize {
        (h * self.levels + s) * self.points + k
    }
}

/// Inputs of the fused deformable aggregation.
pub struct DeformInputs<'a, T> {
    /// one V×E voxel-major value matrix per level
    pub values: &'a [&'a Tensor<T>],
    /// spatial extents of each value level
    pub extents: &'a [[usize; 3]],
    /// P×3 anchors in cell convention
    pub refs: &'a Tensor<T>,
    /// P×(heads·levels·points·3) raw offsets
    pub offsets: &'a Tensor<T>,
    /// per-level offset scale
    pub scales: &'a Tensor<T>,
    /// P×(heads·levels·points) attention weights
    pub weights: &'a Tensor<T>,
    pub layout: DeformLayout,
}

struct Prepared {
    width: usize,
    head_dim: usize,
    points: usize,
    extents: Vec<[usize; 3]>,
}

fn prepare<T: Scalar>(inp: &DeformInputs<T>) -> Result<Prepared> {
    let l = inp.layout;
    if inp.values.len() != l.levels {
        return Err(dim_err!("{} value levels for a layout of {}", inp.values.len(), l.levels));
    }
    if inp.extents.len() != l.levels {
        return Err(dim_err!("{} value extents for a layout of {}", inp.extents.len(), l.levels));
    }
    let mut width = None;
    for (v, ext) in inp.values.iter().zip(inp.extents) {
        let (vox, c) = v.dims2()?;
        if vox != ext.iter().product::<usize>() {
            return Err(dim_err!("value level has {vox} rows for extents {ext:?}"));
        }
        if *width.get_or_insert(c) != c {
            return Err(dim_err!("value levels must share one channel width"));
        }
    }
    let width = width.unwrap_or(0);
    let extents = inp.extents.to_vec();
    if l.heads == 0 || width % l.heads != 0 {
        return Err(dim_err!("width {width} not divisible into {} heads", l.heads));
    }
    let (p, three) = inp.refs.dims2()?;
    if three != 3 {
        return Err(dim_err!("reference points must be P×3"));
    }
    if inp.offsets.shape() != [p, l.slots() * 3] {
        return Err(dim_err!("offsets shape {:?}, expected [{p}, {}]", inp.offsets.shape(), l.slots() * 3));
    }
    if inp.weights.shape() != [p, l.slots()] {
        return Err(dim_err!("weights shape {:?}, expected [{p}, {}]", inp.weights.shape(), l.slots()));
    }
    if inp.scales.numel() != l.levels {
        return Err(dim_err!("{} offset scales for {} levels", inp.scales.numel(), l.levels));
    }
    Ok(Prepared { width, head_dim: width / l.heads, points: p, extents })
}

/// Normalized sampling coordinate of one slot and d coord / d cell coordinate.
fn slot_coord<T: Scalar>(inp: &DeformInputs<T>, ext: [usize; 3], p: usize, s: usize, slot: usize) -> ([T; 3], [T; 3]) {
    let r = inp.refs.row(p);
    let off = &inp.offsets.row(p)[slot * 3..slot * 3 + 3];
    let scale = inp.scales.data()[s];
    let mut g = [T::zero(); 3];
    let mut dg = [T::zero(); 3];
    for a in 0..3 {
        let (ga, da) = cell_to_grid(r[a] + scale * off[a], ext[a]);
        g[a] = ga;
        dg[a] = da;
    }
    (g, dg)
}

/// `out[p, h] = Σ_{s,k} w[p,h,s,k] · V_s,h(ref_p + scale_s · Δ[p,h,s,k])`, heads
/// concatenated along the columns of the P×E result.
pub fn deform_aggregate<T: Scalar>(inp: &DeformInputs<T>) -> Result<Tensor<T>> {
    let pr = prepare(inp)?;
    let l = inp.layout;
    let vm: Vec<&[T]> = inp.values.iter().map(|v| v.data()).collect();
    let mut out = vec![T::zero(); pr.points * pr.width];
    for p in 0..pr.points {
        let wrow = inp.weights.row(p);
        for h in 0..l.heads {
            let dst = &mut out[p * pr.width + h * pr.head_dim..][..pr.head_dim];
            for s in 0..l.levels {
                let ext = pr.extents[s];
                for k in 0..l.points {
                    let slot = l.slot(h, s, k);
                    let (g, _) = slot_coord(inp, ext, p, s, slot);
                    let cr = corners(g, ext);
                    let a = wrow[slot];
                    for q in 0..8 {
                        let aw = a * cr.w[q];
                        let src = &vm[s][cr.idx[q] * pr.width + h * pr.head_dim..][..pr.head_dim];
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d += aw * x;
                        }
                    }
                }
            }
        }
    }
    let y = Tensor::new(&[pr.points, pr.width], out)?;
    y.ensure_finite("deformable aggregation")?;
    Ok(y)
}

pub struct DeformGrads<T> {
    pub values: Vec<Tensor<T>>,
    pub offsets: Tensor<T>,
    pub scales: Tensor<T>,
    pub weights: Tensor<T>,
}

pub fn deform_aggregate_backward<T: Scalar>(inp: &DeformInputs<T>, gy: &Tensor<T>) -> Result<DeformGrads<T>> {
    let pr = prepare(inp)?;
    let l = inp.layout;
    let vm: Vec<&[T]> = inp.values.iter().map(|v| v.data()).collect();
    let mut gvm: Vec<Vec<T>> = inp.values.iter().map(|v| vec![T::zero(); v.numel()]).collect();
    let mut goff = vec![T::zero(); inp.offsets.numel()];
    let mut gscale = vec![T::zero(); l.levels];
    let mut gw = vec![T::zero(); inp.weights.numel()];
    for p in 0..pr.points {
        let wrow = inp.weights.row(p);
        let orow = inp.offsets.row(p);
        for h in 0..l.heads {
            let go = &gy.data()[p * pr.width + h * pr.head_dim..][..pr.head_dim];
            for s in 0..l.levels {
                let ext = pr.extents[s];
                let scale = inp.scales.data()[s];
                for k in 0..l.points {
                    let slot = l.slot(h, s, k);
                    let (g, dgdu) = slot_coord(inp, ext, p, s, slot);
                    let cr = corners(g, ext);
                    let a = wrow[slot];
                    let mut dgrid = [T::zero(); 3];
                    let mut dw = T::zero();
                    for q in 0..8 {
                        let off = cr.idx[q] * pr.width + h * pr.head_dim;
                        let src = &vm[s][off..][..pr.head_dim];
                        // go · V at this corner
                        let mut dot = T::zero();
                        for (&x, &gc) in src.iter().zip(go) {
                            dot += x * gc;
                        }
                        dw += cr.w[q] * dot;
                        for ax in 0..3 {
                            dgrid[ax] += a * cr.dw[q][ax] * dot;
                        }
                        let aw = a * cr.w[q];
                        for (d, &gc) in gvm[s][off..][..pr.head_dim].iter_mut().zip(go) {
                            *d += aw * gc;
                        }
                    }
                    gw[p * l.slots() + slot] += dw;
                    for ax in 0..3 {
                        let du = dgrid[ax] * dgdu[ax];
                        goff[p * l.slots() * 3 + slot * 3 + ax] += du * scale;
                        gscale[s] += du * orow[slot * 3 + ax];
                    }
                }
            }
        }
    }
    let values = gvm.into_iter().zip(inp.values).map(|(g, v)| Tensor::new(v.shape(), g).unwrap()).collect();
    Ok(DeformGrads {
        values,
        offsets: Tensor::new(inp.offsets.shape(), goff)?,
        scales: Tensor::new(inp.scales.shape(), gscale)?,
        weights: Tensor::new(inp.weights.shape(), gw)?,
    })
}

/// Trilinear resampling of a C×D×H×W map onto a finer or coarser grid,
/// aligning cell centres. Used for non-differentiable mask priors.
pub fn resample_cells<T: Scalar>(src: &[T], channels: usize, from: [usize; 3], to: [usize; 3]) -> Vec<T> {
    let vox_from: usize = from.iter().product();
    let vox_to: usize = to.iter().product();
    assert_eq!(src.len(), channels * vox_from);
    let mut out = vec![T::zero(); channels * vox_to];
    let mut j = 0;
    for z in 0..to[0] {
        for y in 0..to[1] {
            for x in 0..to[2] {
                let cell = [z, y, x];
                let mut g = [T::zero(); 3];
                for a in 0..3 {
                    let u = (T::from_usize(cell[a]).unwrap() + T::c(0.5)) / T::from_usize(to[a]).unwrap();
                    g[a] = cell_to_grid(u, from[a]).0;
                }
                let cr = corners(g, from);
                for c in 0..channels {
                    let plane = &src[c * vox_from..(c + 1) * vox_from];
                    let mut acc = T::zero();
                    for q in 0..8 {
                        acc += cr.w[q] * plane[cr.idx[q]];
                    }
                    out[c * vox_to + j] = acc;
                }
                j += 1;
            }
        }
    }
    out
}
