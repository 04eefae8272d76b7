//! The five segmentation-head formulations and the query transformer block.
//!
//! Every variant is expressed through two matrices: a mask embedding applied
//! to the decoder features at each voxel and a class embedding applied to the
//! resulting per-query (or per-channel) mask logits. Coupled variants fold the
//! two into K+1 semantic logits (background first); the decoupled variant keeps
//! binary masks and per-query class logits with a trailing no-object column.

use crate::error::{dim_err, Error, Result};
use crate::nn::{map_to_matrix, map_to_tokens, Activation, Bound, Builder, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamGroup, ParamId};
use crate::tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadVariant {
    FixedIdentity,
    LearnableCls,
    TransformerCls,
    TransformerClsMask,
    Decoupled,
}

impl HeadVariant {
    pub const ALL: [HeadVariant; 5] = [
        HeadVariant::FixedIdentity,
        HeadVariant::LearnableCls,
        HeadVariant::TransformerCls,
        HeadVariant::TransformerClsMask,
        HeadVariant::Decoupled,
    ];

    pub fn uses_queries(self) -> bool {
        matches!(self, HeadVariant::TransformerCls | HeadVariant::TransformerClsMask | HeadVariant::Decoupled)
    }

    pub fn is_decoupled(self) -> bool {
        self == HeadVariant::Decoupled
    }

    /// Width of the class embedding for `k` foreground classes.
    pub fn class_width(self, k: usize) -> usize {
        // coupled: background + K; decoupled: K + no-object
        k + 1
    }
}

impl FromStr for HeadVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "fixed" => HeadVariant::FixedIdentity,
            "learnable_cls" => HeadVariant::LearnableCls,
            "transformer_cls" => HeadVariant::TransformerCls,
            "transformer_cls_mask" => HeadVariant::TransformerClsMask,
            "decoupled" => HeadVariant::Decoupled,
            _ => {
                return Err(Error::Config(format!(
                    "unknown head variant '{s}' (fixed|learnable_cls|transformer_cls|transformer_cls_mask|decoupled)"
                )))
            }
        })
    }
}

impl fmt::Display for HeadVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadVariant::FixedIdentity => "fixed",
            HeadVariant::LearnableCls => "learnable_cls",
            HeadVariant::TransformerCls => "transformer_cls",
            HeadVariant::TransformerClsMask => "transformer_cls_mask",
            HeadVariant::Decoupled => "decoupled",
        })
    }
}

/// Boolean query × memory gate, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub rows: usize,
    pub cols: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn full(rows: usize, cols: usize, value: bool) -> Self {
        AttnMask { rows, cols, allowed: vec![value; rows * cols] }
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allowed[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug)]
pub struct QuerySet {
    pub embed: ParamId,
    pub pos: ParamId,
    pub count: usize,
    pub width: usize,
}

impl QuerySet {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, count: usize, width: usize) -> Self {
        let mut s = b.scope(name);
        let bound = 3f64.sqrt();
        let embed = s.uniform("embed", &[count, width], bound);
        let pos = s.uniform("pos", &[count, width], bound);
        s.set_decay(embed, false);
        s.set_decay(pos, false);
        QuerySet { embed, pos, count, width }
    }
}

/// Cross-attention → self-attention → FFN, each wrapped as `LN(x + sublayer)`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub cross: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: Mlp,
    pub norm3: LayerNorm,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, width: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        TransformerBlock {
            cross: MultiHeadAttention::new(&mut s, "cross", width, heads),
            norm1: LayerNorm::new(&mut s, "norm1", width),
            self_attn: MultiHeadAttention::new(&mut s, "self", width, heads),
            norm2: LayerNorm::new(&mut s, "norm2", width),
            ffn: Mlp::new(&mut s, "ffn", [width, 2 * width, width], Activation::Gelu),
            norm3: LayerNorm::new(&mut s, "norm3", width),
        }
    }

    /// `queries`, `pos`: N×E; `memory`: T×E; `mask`: N×T.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        queries: Var,
        pos: Var,
        memory: Var,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let (n, t) = (g.shape(queries)[0], g.shape(memory)[0]);
        if let Some(m) = mask {
            if (m.rows, m.cols) != (n, t) {
                return Err(dim_err!("attention mask is {}x{}, expected {n}x{t}", m.rows, m.cols));
            }
        }
        let q = g.add(queries, pos)?;
        let a = self.cross.forward(g, p, q, memory, memory, mask.map(|m| m.allowed.as_slice()))?;
        let r = g.add(queries, a)?;
        let x = self.norm1.forward(g, p, r)?;
        let q = g.add(x, pos)?;
        let a = self.self_attn.forward(g, p, q, q, x, None)?;
        let r = g.add(x, a)?;
        let x = self.norm2.forward(g, p, r)?;
        let f = self.ffn.forward(g, p, x)?;
        let r = g.add(x, f)?;
        self.norm3.forward(g, p, r)
    }
}

/// Largest memory grid side after pooling.
pub const MEMORY_SIDE: usize = 8;

/// Pool factor per axis: the smallest divisor bringing the extent to at most [`MEMORY_SIDE`].
pub fn memory_pool_factor(extents: [usize; 3]) -> [usize; 3] {
    extents.map(|e| (1..=e).find(|f| e % f == 0 && e / f <= MEMORY_SIDE).unwrap_or(e))
}

pub fn memory_extents(extents: [usize; 3]) -> [usize; 3] {
    let f = memory_pool_factor(extents);
    [extents[0] / f[0], extents[1] / f[1], extents[2] / f[2]]
}

/// Average-pooled decoder map as T×C tokens.
pub fn memory_tokens<T: Scalar>(g: &mut Graph<T>, map: Var) -> Result<Var> {
    let (_, _, ext) = g.value(map).dims5()?;
    let f = memory_pool_factor(ext);
    let pooled = if f == [1, 1, 1] { map } else { g.avg_pool3d(map, f)? };
    map_to_tokens(g, pooled)
}

/// Semantic logits `class_embᵀ · mask_logits` (K'×V) from N×V mask logits and N×K' class embeddings.
pub fn semantic_logits<T: Scalar>(g: &mut Graph<T>, mask_logits: Var, class_emb: Var) -> Result<Var> {
    let ct = g.transpose(class_emb)?;
    g.matmul(ct, mask_logits)
}

fn mask_logits_pointwise<T: Scalar>(g: &mut Graph<T>, f: Var, m_mask: Var) -> Result<Var> {
    let (c, _) = g.value(f).dims2()?;
    let (cm, _) = g.value(m_mask).dims2()?;
    if c != cm {
        return Err(dim_err!("features have {c} channels, mask embedding expects {cm}"));
    }
    let mt = g.transpose(m_mask)?;
    g.matmul(mt, f)
}

/// Softmax over classes of `I · M_maskᵀ F` for C×V features `f` and a C×K mask embedding.
pub fn head_fixed<T: Scalar>(g: &mut Graph<T>, f: Var, m_mask: Var) -> Result<Var> {
    let k = g.shape(m_mask)[1];
    let eye = g.constant(Tensor::eye(k));
    head_learnable_cls(g, f, m_mask, eye)
}

/// Softmax over classes of `M_clsᵀ M_maskᵀ F`.
pub fn head_learnable_cls<T: Scalar>(g: &mut Graph<T>, f: Var, m_mask: Var, m_cls: Var) -> Result<Var> {
    let ml = mask_logits_pointwise(g, f, m_mask)?;
    let s = semantic_logits(g, ml, m_cls)?;
    g.softmax(s, 0)
}

#[derive(Clone, Copy, Debug)]
pub struct HeadDims {
    /// decoder channels C at this stage
    pub channels: usize,
    /// foreground classes K
    pub classes: usize,
    pub queries: usize,
    pub width: usize,
    pub heads: usize,
}

/// Predictions of one stage.
#[derive(Clone, Debug)]
pub struct HeadOutput {
    pub variant: HeadVariant,
    /// N×C (rows are queries, or class channels for point-wise variants)
    pub mask_embedding: Var,
    /// N×(K+1)
    pub class_embedding: Var,
    /// N×V
    pub mask_logits: Var,
    /// coupled variants: (K+1)×V, background first
    pub semantic_logits: Option<Var>,
    /// refined N×E queries, for query-based variants
    pub queries: Option<Var>,
}

impl HeadOutput {
    /// Decoupled class logits N×(K+1).
    pub fn class_logits(&self) -> Var {
        self.class_embedding
    }
}

#[derive(Clone, Debug)]
pub struct StageHead {
    pub variant: HeadVariant,
    pub dims: HeadDims,
    /// C×(K+1) point-wise mask embedding
    pub m_mask: Option<ParamId>,
    /// (K+1)×(K+1) learnable class embedding
    pub m_cls: Option<ParamId>,
    pub memory_proj: Option<Linear>,
    pub block: Option<TransformerBlock>,
    pub mask_mlp: Option<Mlp>,
    pub cls_mlp: Option<Mlp>,
}

impl StageHead {
    pub fn new<T: Scalar>(b: &mut Builder<T>, name: &str, variant: HeadVariant, dims: HeadDims) -> Result<Self> {
        let kc = variant.class_width(dims.classes);
        if variant.uses_queries() && !variant.is_decoupled() && dims.queries != kc {
            return Err(Error::Spec(format!("{variant} needs {kc} queries (background + classes), got {}", dims.queries)));
        }
        if variant.is_decoupled() && dims.queries < dims.classes {
            return Err(Error::Spec(format!("{} queries cannot cover {} classes", dims.queries, dims.classes)));
        }
        let mut s = b.scope(name);
        let mut h = StageHead { variant, dims, m_mask: None, m_cls: None, memory_proj: None, block: None, mask_mlp: None, cls_mlp: None };
        let (c, e) = (dims.channels, dims.width);
        if matches!(variant, HeadVariant::FixedIdentity | HeadVariant::LearnableCls | HeadVariant::TransformerCls) {
            let mut cb = s.scope("pointwise").group(ParamGroup::Cnn);
            let bound = (6.0 / (c + kc) as f64).sqrt();
            h.m_mask = Some(cb.uniform("mask_embedding", &[c, kc], bound));
            if variant == HeadVariant::LearnableCls {
                let eye = Tensor::<T>::eye(kc);
                let jitter: Vec<T> = (0..kc * kc).map(|_| T::c(cb.rng().gen_range(-0.1..0.1))).collect();
                let init = eye.data().iter().zip(&jitter).map(|(&a, &j)| a + j).collect();
                h.m_cls = Some(cb.param("class_embedding", Tensor::new(&[kc, kc], init)?, true));
            }
        }
        if variant.uses_queries() {
            let mut tb = s.scope("query").group(ParamGroup::Transformer);
            h.memory_proj = Some(Linear::new(&mut tb, "memory", c, e));
            h.block = Some(TransformerBlock::new(&mut tb, "block", e, dims.heads));
            h.cls_mlp = Some(Mlp::new(&mut tb, "class_mlp", [e, e, kc], Activation::Relu));
            if variant != HeadVariant::TransformerCls {
                h.mask_mlp = Some(Mlp::new(&mut tb, "mask_mlp", [e, e, c], Activation::Relu));
            }
        }
        Ok(h)
    }

    /// `map` is the 1×C×D×H×W decoder output; `queries` are (embeddings, positions).
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        map: Var,
        queries: Option<(Var, Var)>,
        mask: Option<&AttnMask>,
    ) -> Result<HeadOutput> {
        let (_, c, _) = g.value(map).dims5()?;
        if c != self.dims.channels {
            return Err(dim_err!("decoder map has {c} channels, head expects {}", self.dims.channels));
        }
        let f = map_to_matrix(g, map)?;
        let kc = self.variant.class_width(self.dims.classes);
        let refined = match (&self.block, queries) {
            (Some(block), Some((q, pos))) => {
                let mem = memory_tokens(g, map)?;
                let mem = self.memory_proj.as_ref().unwrap().forward(g, p, mem)?;
                Some(block.forward(g, p, q, pos, mem, mask)?)
            }
            (Some(_), None) => return Err(Error::Spec(format!("{} head needs queries", self.variant))),
            (None, _) => None,
        };
        let mask_embedding = match (&self.mask_mlp, refined) {
            (Some(mlp), Some(x)) => mlp.forward(g, p, x)?,
            _ => {
                let m = p.var(self.m_mask.expect("point-wise mask embedding"));
                g.transpose(m)?
            }
        };
        let class_embedding = match (&self.cls_mlp, refined) {
            (Some(mlp), Some(x)) => mlp.forward(g, p, x)?,
            _ => match self.m_cls {
                Some(id) => p.var(id),
                None => g.constant(Tensor::eye(kc)),
            },
        };
        let mask_logits = g.matmul(mask_embedding, f)?;
        let semantic = if self.variant.is_decoupled() { None } else { Some(semantic_logits(g, mask_logits, class_embedding)?) };
        Ok(HeadOutput {
            variant: self.variant,
            mask_embedding,
            class_embedding,
            mask_logits,
            semantic_logits: semantic,
            queries: refined,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn argmax_cols(t: &Tensor<f64>) -> Vec<usize> {
        let (r, c) = t.dims2().unwrap();
        (0..c)
            .map(|j| (0..r).fold(0, |best, i| if t.at(&[i, j]) > t.at(&[best, j]) { i } else { best }))
            .collect()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in HeadVariant::ALL {
            assert_eq!(v.to_string().parse::<HeadVariant>().unwrap(), v);
        }
        assert!("eq5".parse::<HeadVariant>().is_err());
    }

    #[test]
    fn fixed_head_uniform_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[3, 10], &mut rng));
        let zero = g.constant(Tensor::zeros(&[3, 4]));
        let p = head_fixed(&mut g, f, zero).unwrap();
        assert!(g.value(p).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let m = g.constant(rand_t(&[3, 4], &mut rng));
        let p = head_fixed(&mut g, f, m).unwrap();
        for j in 0..10 {
            let s: f64 = (0..4).map(|i| g.value(p).at(&[i, j])).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learnable_identity_equals_fixed_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[5, 12], &mut rng));
        let m = g.constant(rand_t(&[5, 4], &mut rng));
        let eye = g.constant(Tensor::eye(4));
        let a = head_fixed(&mut g, f, m).unwrap();
        let b = head_learnable_cls(&mut g, f, m, eye).unwrap();
        assert_eq!(g.value(a), g.value(b));
    }

    #[test]
    fn learnable_permutation_permutes_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let perm = [2usize, 0, 3, 1];
        let mut pm = Tensor::<f64>::zeros(&[4, 4]);
        for (i, &j) in perm.iter().enumerate() {
            pm.set(&[i, j], 1.0);
        }
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[3, 7], &mut rng));
        let m = g.constant(rand_t(&[3, 4], &mut rng));
        let pv = g.constant(pm);
        let base = head_fixed(&mut g, f, m).unwrap();
        let permuted = head_learnable_cls(&mut g, f, m, pv).unwrap();
        for (i, &j) in perm.iter().enumerate() {
            for v in 0..7 {
                // softmax normalizers sum in permuted order
                assert!((g.value(permuted).at(&[j, v]) - g.value(base).at(&[i, v])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn learnable_matches_two_matmul_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (ft, mt, ct) = (rand_t(&[3, 6], &mut rng), rand_t(&[3, 4], &mut rng), rand_t(&[4, 4], &mut rng));
        let mut g = Graph::<f64>::new();
        let (f, m, c) = (g.constant(ft.clone()), g.constant(mt.clone()), g.constant(ct.clone()));
        let p = head_learnable_cls(&mut g, f, m, c).unwrap();
        for v in 0..6 {
            // per voxel: row f_v · M_mask · M_cls, then softmax
            let mut z = [0.0; 4];
            for (k, zk) in z.iter_mut().enumerate() {
                for j in 0..4 {
                    let mut fm = 0.0;
                    for ch in 0..3 {
                        fm += ft.at(&[ch, v]) * mt.at(&[ch, j]);
                    }
                    *zk += fm * ct.at(&[j, k]);
                }
            }
            let mx = z.iter().cloned().fold(f64::MIN, f64::max);
            let den: f64 = z.iter().map(|x| (x - mx).exp()).sum();
            for k in 0..4 {
                assert!((g.value(p).at(&[k, v]) - (z[k] - mx).exp() / den).abs() < 1e-10);
            }
        }
    }

    fn block(seed: u64, e: usize) -> (ParamStore<f64>, TransformerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let blk = TransformerBlock::new(&mut b, "blk", e, 2);
        (store, blk)
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let (store, blk) = block(5, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let q = g.constant(rand_t(&[3, 8], &mut rng));
        let pos = g.constant(rand_t(&[3, 8], &mut rng));
        let mem = g.constant(rand_t(&[10, 8], &mut rng));
        let a = blk.forward(&mut g, &p, q, pos, mem, None).unwrap();
        let b = blk.forward(&mut g, &p, q, pos, mem, Some(&AttnMask::full(3, 10, true))).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) <= 1e-12);
        let c = blk.forward(&mut g, &p, q, pos, mem, Some(&AttnMask::full(3, 10, false))).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(c)) <= 1e-12);
        assert!(blk.forward(&mut g, &p, q, pos, mem, Some(&AttnMask::full(3, 9, true))).is_err());
    }

    #[test]
    fn one_hot_mask_selects_value() {
        let (store, blk) = block(7, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let q = g.constant(rand_t(&[3, 8], &mut rng));
        let mem = g.constant(rand_t(&[6, 8], &mut rng));
        let chosen = [4usize, 0, 4];
        let mut mask = AttnMask::full(3, 6, false);
        for (r, &t) in chosen.iter().enumerate() {
            mask.allowed[r * 6 + t] = true;
        }
        let a = blk.cross.forward(&mut g, &p, q, mem, mem, Some(&mask.allowed)).unwrap();
        let v = blk.cross.v.forward(&mut g, &p, mem).unwrap();
        let o = blk.cross.out.forward(&mut g, &p, v).unwrap();
        for (r, &t) in chosen.iter().enumerate() {
            for c in 0..8 {
                assert!((g.value(a).at(&[r, c]) - g.value(o).at(&[t, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn query_permutation_equivariance() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let dims = HeadDims { channels: 4, classes: 3, queries: 3, width: 8, heads: 2 };
        let head = {
            let mut b = Builder::new(&mut store, &mut rng);
            StageHead::new(&mut b, "h", HeadVariant::Decoupled, dims).unwrap()
        };
        let qt = rand_t(&[3, 8], &mut rng);
        let pt = rand_t(&[3, 8], &mut rng);
        let map = rand_t(&[1, 4, 4, 4, 4], &mut rng);
        let perm = [1usize, 2, 0];
        let permute = |t: &Tensor<f64>| {
            let c = t.shape()[1];
            Tensor::from_fn(t.shape(), |i| t.data()[perm[i / c] * c + i % c])
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let m = g.constant(map);
        let (q1, p1) = (g.constant(qt.clone()), g.constant(pt.clone()));
        let (q2, p2) = (g.constant(permute(&qt)), g.constant(permute(&pt)));
        let a = head.forward(&mut g, &p, m, Some((q1, p1)), None).unwrap();
        let b = head.forward(&mut g, &p, m, Some((q2, p2)), None).unwrap();
        for (x, y) in [(a.mask_logits, b.mask_logits), (a.class_logits(), b.class_logits())] {
            let want = permute(g.value(x));
            assert!(want.max_abs_diff(g.value(y)) < 1e-12);
        }
    }

    #[test]
    fn decoupled_zero_row_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut g = Graph::<f64>::new();
        let f = g.constant(rand_t(&[4, 9], &mut rng));
        let mut emb = rand_t(&[3, 4], &mut rng);
        for c in 0..4 {
            emb.set(&[1, c], 0.0);
        }
        let e = g.constant(emb);
        let ml = g.matmul(e, f).unwrap();
        let s = g.sigmoid(ml).unwrap();
        assert!(g.value(s).row(1).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn every_variant_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = rand_t(&[1, 4, 8, 8, 8], &mut rng);
        for v in HeadVariant::ALL {
            let mut store = ParamStore::new();
            let queries = if v.is_decoupled() { 3 } else { 4 };
            let dims = HeadDims { channels: 4, classes: 3, queries, width: 8, heads: 2 };
            let (head, qs) = {
                let mut b = Builder::new(&mut store, &mut rng);
                let qs = QuerySet::new(&mut b, "q", queries, 8);
                (StageHead::new(&mut b, "h", v, dims).unwrap(), qs)
            };
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let m = g.constant(map.clone());
            let q = v.uses_queries().then(|| (p.var(qs.embed), p.var(qs.pos)));
            let out = head.forward(&mut g, &p, m, q, None).unwrap();
            assert_eq!(g.shape(out.mask_logits), &[if v.uses_queries() { queries } else { 4 }, 512]);
            let probs = match out.semantic_logits {
                Some(s) => g.softmax(s, 0).unwrap(),
                None => {
                    let t = g.softmax(out.class_logits(), 1).unwrap();
                    g.transpose(t).unwrap()
                }
            };
            let (r, c) = g.value(probs).dims2().unwrap();
            for j in 0..c {
                let s: f64 = (0..r).map(|i| g.value(probs).at(&[i, j])).sum();
                assert!((s - 1.0).abs() < 1e-12, "{v}");
            }
            let _ = argmax_cols(g.value(probs));
        }
    }

    #[test]
    fn memory_grid() {
        assert_eq!(memory_extents([32, 32, 32]), [8, 8, 8]);
        assert_eq!(memory_extents([4, 16, 24]), [4, 8, 8]);
        assert_eq!(memory_pool_factor([12, 8, 2]), [2, 1, 1]);
    }
}
