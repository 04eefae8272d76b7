//! Full-scale deformable fusion of the encoder pyramid, plus the two
//! baseline fusions used in ablations.

use crate::backbone::FeaturePyramid;
use crate::error::{dim_err, Error, Result};
use crate::nn::{map_to_tokens, tokens_to_map, Activation, Bound, Builder, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup, ParamId};
use crate::tensor::{DeformArgs, DeformLayout, Graph, Scalar, Tensor, Var};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    /// skips pass straight to the decoder
    Off,
    /// queries from the coarsest levels, values from every level
    FullScale,
    /// deformable attention restricted to the query levels
    Deformable,
    /// dense self-attention over the query levels
    Standard,
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(FusionMode::Off),
            "fsad" | "fullscale" => Ok(FusionMode::FullScale),
            "deformable" => Ok(FusionMode::Deformable),
            "standard" => Ok(FusionMode::Standard),
            _ => Err(Error::Config(format!("unknown fusion mode '{s}' (off|fsad|deformable|standard)"))),
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::Off => "off",
            FusionMode::FullScale => "fsad",
            FusionMode::Deformable => "deformable",
            FusionMode::Standard => "standard",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSpec {
    pub points: usize,
    pub query_levels: usize,
    pub heads: usize,
    /// common value width E
    pub width: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        SamplingSpec { points: 4, query_levels: 4, heads: 4, width: 64 }
    }
}

impl SamplingSpec {
    pub fn validate(&self, stages: usize) -> Result<()> {
        if self.points == 0 || self.heads == 0 || self.query_levels == 0 {
            return Err(Error::Spec("sampling points, heads and query levels must be positive".into()));
        }
        if self.query_levels > stages {
            return Err(Error::Spec(format!("{} query levels exceed {stages} pyramid levels", self.query_levels)));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Spec(format!("width {} not divisible into {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Cell-centre anchors `((d+0.5)/D, (h+0.5)/H, (w+0.5)/W)` of every voxel, row-major.
pub fn make_reference_points<T: Scalar>(extents: [usize; 3]) -> Tensor<T> {
    let [d, h, w] = extents;
    let mut data = Vec::with_capacity(d * h * w * 3);
    for i in 0..d {
        for j in 0..h {
            for k in 0..w {
                data.push(T::c((i as f64 + 0.5) / d as f64));
                data.push(T::c((j as f64 + 0.5) / h as f64));
                data.push(T::c((k as f64 + 0.5) / w as f64));
            }
        }
    }
    Tensor::new(&[d * h * w, 3], data).expect("reference grid shape")
}

/// Attention-buffer element counts `(deformable, dense)` for a query and value level set.
pub fn attention_buffer_counts(query_tokens: &[usize], value_tokens: &[usize], heads: usize, points: usize) -> (u128, u128) {
    let tq: u128 = query_tokens.iter().map(|&t| t as u128).sum();
    let tv: u128 = value_tokens.iter().map(|&t| t as u128).sum();
    let lv = value_tokens.len() as u128;
    (tq * heads as u128 * lv * points as u128, tq * tv * heads as u128)
}

/// Projected value levels shared by every query level.
#[derive(Clone, Debug)]
pub struct ValuePyramid {
    /// V×E tokens per level
    pub values: Vec<Var>,
    pub extents: Vec<[usize; 3]>,
    /// per-level offset scale
    pub scales: Var,
}

/// Deformable attention for one query level.
#[derive(Clone, Debug)]
pub struct FsadAttention {
    pub offsets: Mlp,
    pub weights: Mlp,
    pub out: Linear,
    pub layout: DeformLayout,
}

impl FsadAttention {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, channels: usize, width: usize, layout: DeformLayout) -> Self {
        let mut s = b.scope(name);
        FsadAttention {
            offsets: Mlp::zero_out(&mut s, "offsets", [channels, width, layout.slots() * 3], Activation::Relu),
            weights: Mlp::zero_out(&mut s, "weights", [channels, width, layout.slots()], Activation::Relu),
            out: Linear::zeroed(&mut s, "out", width, channels),
            layout,
        }
    }

    /// Softmax-normalized weights, T×(heads·levels·points); each head's block sums to one.
    pub fn attention_weights<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, queries: Var) -> Result<Var> {
        let t = g.shape(queries)[0];
        let raw = self.weights.forward(g, p, queries)?;
        let per = self.layout.levels * self.layout.points;
        let r = g.reshape(raw, &[t * self.layout.heads, per])?;
        let a = g.softmax(r, 1)?;
        g.reshape(a, &[t, self.layout.slots()])
    }

    /// `queries` are T×C tokens anchored at `refs`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, queries: Var, refs: &Tensor<T>, values: &ValuePyramid) -> Result<Var> {
        if refs.shape()[0] != g.shape(queries)[0] {
            return Err(dim_err!("{} reference points for {} queries", refs.shape()[0], g.shape(queries)[0]));
        }
        let offsets = self.offsets.forward(g, p, queries)?;
        let weights = self.attention_weights(g, p, queries)?;
        let agg = g.deform(DeformArgs {
            values: values.values.clone(),
            extents: values.extents.clone(),
            refs: refs.clone(),
            offsets,
            scales: values.scales,
            weights,
            layout: self.layout,
        })?;
        self.out.forward(g, p, agg)
    }
}

/// Attention → LN(residual) → FFN → LN(residual) on one query level.
#[derive(Clone, Debug)]
pub struct FsadBlock {
    pub attn: FsadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
}

impl FsadBlock {
    fn finish<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var, update: Var) -> Result<Var> {
        let r = g.add(x, update)?;
        let x = self.norm1.forward(g, p, r)?;
        let f = self.ffn.forward(g, p, x)?;
        let r = g.add(x, f)?;
        self.norm2.forward(g, p, r)
    }
}

/// Dense-attention baseline over the concatenated query levels.
#[derive(Clone, Debug)]
pub struct StandardFusion {
    pub proj_in: Vec<Linear>,
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: Mlp,
    pub norm2: LayerNorm,
    pub proj_out: Vec<Linear>,
}

#[derive(Clone, Debug)]
pub struct FsadTransformer {
    pub mode: FusionMode,
    pub spec: SamplingSpec,
    pub stages: usize,
    /// per value level projection to the common width
    pub value_proj: Vec<Linear>,
    /// per value level offset gain, multiplied by 1/max-extent at run time
    pub scales: Option<ParamId>,
    /// one block per query level, coarsest last
    pub blocks: Vec<FsadBlock>,
    pub standard: Option<StandardFusion>,
}

impl FsadTransformer {
    pub fn new<T: Scalar>(b: &mut Builder<T>, mode: FusionMode, spec: &SamplingSpec, channels: &[usize]) -> Result<Self> {
        let stages = channels.len();
        let mut me = FsadTransformer {
            mode,
            spec: spec.clone(),
            stages,
            value_proj: Vec::new(),
            scales: None,
            blocks: Vec::new(),
            standard: None,
        };
        if mode == FusionMode::Off {
            return Ok(me);
        }
        spec.validate(stages)?;
        let mut b = b.scope("fsad").group(ParamGroup::Transformer);
        let e = spec.width;
        let q0 = stages - spec.query_levels;
        if mode == FusionMode::Standard {
            let mut sb = b.scope("standard");
            let proj_in = (q0..stages).map(|s| Linear::new(&mut sb, &format!("in{}", s + 1), channels[s], e)).collect();
            let proj_out = (q0..stages).map(|s| Linear::zeroed(&mut sb, &format!("out{}", s + 1), e, channels[s])).collect();
            me.standard = Some(StandardFusion {
                proj_in,
                attn: MultiHeadAttention::new(&mut sb, "attn", e, spec.heads),
                norm1: LayerNorm::new(&mut sb, "norm1", e),
                ffn: Mlp::new(&mut sb, "ffn", [e, 2 * e, e], Activation::Gelu),
                norm2: LayerNorm::new(&mut sb, "norm2", e),
                proj_out,
            });
            return Ok(me);
        }
        let value_levels = me.value_levels();
        me.value_proj = value_levels
            .clone()
            .map(|s| Linear::new(&mut b, &format!("value{}", s + 1), channels[s], e))
            .collect();
        let gains = Tensor::full(&[value_levels.len()], T::c(2.0));
        me.scales = Some(b.param("offset_gain", gains, false));
        let layout = DeformLayout { heads: spec.heads, levels: value_levels.len(), points: spec.points };
        me.blocks = (q0..stages)
            .map(|s| {
                let c = channels[s];
                let mut lb = b.scope(&format!("level{}", s + 1));
                FsadBlock {
                    attn: FsadAttention::new(&mut lb, "attn", c, e, layout),
                    norm1: LayerNorm::new(&mut lb, "norm1", c),
                    ffn: Mlp::new(&mut lb, "ffn", [c, 2 * c, c], Activation::Gelu),
                    norm2: LayerNorm::new(&mut lb, "norm2", c),
                }
            })
            .collect();
        Ok(me)
    }

    pub fn query_levels(&self) -> std::ops::Range<usize> {
        self.stages - self.spec.query_levels..self.stages
    }

    pub fn value_levels(&self) -> std::ops::Range<usize> {
        match self.mode {
            FusionMode::Deformable => self.query_levels(),
            _ => 0..self.stages,
        }
    }

    /// Projected value tokens and the per-level offset scales.
    pub fn prepare_values<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pyramid: &FeaturePyramid) -> Result<ValuePyramid> {
        let mut values = Vec::new();
        let mut extents = Vec::new();
        let mut inv = Vec::new();
        for (proj, s) in self.value_proj.iter().zip(self.value_levels()) {
            let x = pyramid.levels[s];
            let (_, _, ext) = g.value(x).dims5()?;
            inv.push(T::one() / T::c(*ext.iter().max().unwrap() as f64));
            let tokens = map_to_tokens(g, x)?;
            values.push(proj.forward(g, p, tokens)?);
            extents.push(ext);
        }
        let inv = g.constant(Tensor::new(&[inv.len()], inv)?);
        let scales = g.mul(p.var(self.scales.expect("deformable mode has gains")), inv)?;
        Ok(ValuePyramid { values, extents, scales })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        if pyramid.levels.len() != self.stages {
            return Err(dim_err!("pyramid has {} levels, fusion expects {}", pyramid.levels.len(), self.stages));
        }
        match self.mode {
            FusionMode::Off => Ok(pyramid.clone()),
            FusionMode::Standard => self.forward_standard(g, p, pyramid),
            FusionMode::FullScale | FusionMode::Deformable => {
                let values = self.prepare_values(g, p, pyramid)?;
                let mut out = pyramid.clone();
                for (block, s) in self.blocks.iter().zip(self.query_levels()) {
                    let x = pyramid.levels[s];
                    let (_, _, ext) = g.value(x).dims5()?;
                    let tokens = map_to_tokens(g, x)?;
                    let refs = make_reference_points(ext);
                    let a = block.attn.forward(g, p, tokens, &refs, &values)?;
                    let y = block.finish(g, p, tokens, a)?;
                    out.levels[s] = tokens_to_map(g, y, ext)?;
                }
                Ok(out)
            }
        }
    }

    fn forward_standard<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, pyramid: &FeaturePyramid) -> Result<FeaturePyramid> {
        let st = self.standard.as_ref().expect("standard mode has parameters");
        let mut tokens = Vec::new();
        let mut counts = Vec::new();
        for (proj, s) in st.proj_in.iter().zip(self.query_levels()) {
            let t = map_to_tokens(g, pyramid.levels[s])?;
            counts.push(g.shape(t)[0]);
            tokens.push(proj.forward(g, p, t)?);
        }
        let x = g.concat(&tokens, 0)?;
        let a = st.attn.forward(g, p, x, x, x, None)?;
        let r = g.add(x, a)?;
        let x = st.norm1.forward(g, p, r)?;
        let f = st.ffn.forward(g, p, x)?;
        let r = g.add(x, f)?;
        let x = st.norm2.forward(g, p, r)?;
        let mut out = pyramid.clone();
        let mut start = 0;
        for ((proj, s), n) in st.proj_out.iter().zip(self.query_levels()).zip(counts) {
            let part = g.slice(x, 0, start, n)?;
            start += n;
            let (_, _, ext) = g.value(pyramid.levels[s]).dims5()?;
            let upd = proj.forward(g, p, part)?;
            let upd = tokens_to_map(g, upd, ext)?;
            out.levels[s] = g.add(pyramid.levels[s], upd)?;
        }
        Ok(out)
    }
}
