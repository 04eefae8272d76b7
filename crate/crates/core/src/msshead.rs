//! Multi-scale segmentation head: one query set refined coarse→fine over the
//! decoder stages, each stage's masks gating the next stage's cross-attention.

pub use crate::heads::AttnMask;
use crate::error::{dim_err, Result};
use crate::heads::{memory_extents, HeadDims, HeadOutput, HeadVariant, QuerySet, StageHead};
use crate::nn::{Bound, Builder, ParamGroup};
use crate::tensor::{resample_cells, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct StagePrediction {
    /// 1 = finest
    pub level: usize,
    pub extents: [usize; 3],
    pub output: HeadOutput,
}

#[derive(Clone, Debug)]
pub struct HeadOptions {
    pub variant: HeadVariant,
    pub classes: usize,
    pub queries: usize,
    pub width: usize,
    pub heads: usize,
    pub shared_queries: bool,
    pub masked_attention: bool,
}

#[derive(Clone, Debug)]
pub struct MultiScaleHead {
    pub options: HeadOptions,
    /// coarsest first
    pub stages: Vec<StageHead>,
    /// one set when shared, otherwise one per stage
    pub query_sets: Vec<QuerySet>,
}

/// Allowed iff the previous stage's logit, trilinearly resampled onto the
/// target memory grid, is positive (sigmoid above one half).
pub fn build_attention_mask<T: Scalar>(prev_logits: &Tensor<T>, prev_extents: [usize; 3], target: [usize; 3]) -> Result<AttnMask> {
    let (n, v) = prev_logits.dims2()?;
    if v != prev_extents.iter().product::<usize>() {
        return Err(dim_err!("{v} mask voxels do not match extents {prev_extents:?}"));
    }
    let r = resample_cells(prev_logits.data(), n, prev_extents, target);
    Ok(AttnMask { rows: n, cols: target.iter().product(), allowed: r.iter().map(|&x| x > T::zero()).collect() })
}

impl MultiScaleHead {
    /// `channels` lists decoder widths of the supervised stages, coarsest first.
    pub fn new<T: Scalar>(b: &mut Builder<T>, options: HeadOptions, channels: &[usize]) -> Result<Self> {
        let mut b = b.scope("head");
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let dims = HeadDims { channels: c, classes: options.classes, queries: options.queries, width: options.width, heads: options.heads };
                StageHead::new(&mut b, &format!("stage{}", channels.len() - i), options.variant, dims)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut query_sets = Vec::new();
        if options.variant.uses_queries() {
            let mut qb = b.scope("queries").group(ParamGroup::Transformer);
            let count = if options.shared_queries { 1 } else { channels.len() };
            for i in 0..count {
                query_sets.push(QuerySet::new(&mut qb, &format!("set{}", i + 1), options.queries, options.width));
            }
        }
        Ok(MultiScaleHead { options, stages, query_sets })
    }

    /// Runs every stage on `maps` (coarse→fine, one per stage). `masked`
    /// overrides the configured gate toggle.
    pub fn run<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, maps: &[Var], masked: Option<bool>) -> Result<Vec<StagePrediction>> {
        if maps.len() != self.stages.len() {
            return Err(dim_err!("{} decoder maps for {} head stages", maps.len(), self.stages.len()));
        }
        let masked = masked.unwrap_or(self.options.masked_attention);
        let nstages = self.stages.len();
        let mut preds: Vec<StagePrediction> = Vec::with_capacity(nstages);
        let mut carried: Option<Var> = None;
        for (i, (head, &map)) in self.stages.iter().zip(maps).enumerate() {
            let (_, _, ext) = g.value(map).dims5()?;
            let queries = if self.options.variant.uses_queries() {
                let set = &self.query_sets[if self.options.shared_queries { 0 } else { i }];
                let q = match carried {
                    Some(q) if self.options.shared_queries => q,
                    _ => p.var(set.embed),
                };
                Some((q, p.var(set.pos)))
            } else {
                None
            };
            let mask = match (preds.last(), masked && queries.is_some()) {
                (Some(prev), true) => {
                    let logits = g.value(prev.output.mask_logits).clone();
                    Some(build_attention_mask(&logits, prev.extents, memory_extents(ext))?)
                }
                _ => None,
            };
            let out = head.forward(g, p, map, queries, mask.as_ref())?;
            carried = out.queries;
            preds.push(StagePrediction { level: nstages - i, extents: ext, output: out });
        }
        Ok(preds)
    }
}

/// Runs a multi-scale head over decoder maps, coarsest first.
pub fn run_multiscale<T: Scalar>(g: &mut Graph<T>, p: &Bound, head: &MultiScaleHead, maps: &[Var]) -> Result<Vec<StagePrediction>> {
    head.run(g, p, maps, None)
}

/// Per-voxel class scores `Σ_i p_i(c)·m_i`, K×V, for classes 1..K.
pub fn semantic_scores<T: Scalar>(class_probs: &Tensor<T>, mask_probs: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, kc) = class_probs.dims2()?;
    let (nm, v) = mask_probs.dims2()?;
    if n != nm || kc < 2 {
        return Err(dim_err!("class probabilities {n}x{kc} do not pair with masks {nm}x{v}"));
    }
    let k = kc - 1;
    let mut s = vec![T::zero(); k * v];
    for i in 0..n {
        let m = mask_probs.row(i);
        for c in 0..k {
            let pc = class_probs.at(&[i, c]);
            for (d, &mv) in s[c * v..(c + 1) * v].iter_mut().zip(m) {
                *d += pc * mv;
            }
        }
    }
    Tensor::new(&[k, v], s)
}

/// Voxel labels from decoupled predictions. The no-object column is excluded;
/// a voxel whose best class score stays below one half is background (0).
pub fn assemble_semantic<T: Scalar>(class_probs: &Tensor<T>, mask_probs: &Tensor<T>) -> Result<Vec<u16>> {
    let s = semantic_scores(class_probs, mask_probs)?;
    let (k, v) = s.dims2()?;
    let half = T::c(0.5);
    Ok((0..v)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if s.at(&[c, j]) > s.at(&[best, j]) {
                    best = c;
                }
            }
            if s.at(&[best, j]) < half { 0 } else { best as u16 + 1 }
        })
        .collect())
}

/// Voxel labels from coupled (background-first) semantic logits.
pub fn argmax_labels<T: Scalar>(semantic: &Tensor<T>) -> Result<Vec<u16>> {
    let (k, v) = semantic.dims2()?;
    Ok((0..v)
        .map(|j| {
            let mut best = 0;
            for c in 1..k {
                if semantic.at(&[c, j]) > semantic.at(&[best, j]) {
                    best = c;
                }
            }
            best as u16
        })
        .collect())
}

/// Labels of one stage's predictions, dispatching on the variant.
pub fn stage_labels<T: Scalar>(g: &Graph<T>, out: &HeadOutput) -> Result<Vec<u16>> {
    match out.semantic_logits {
        Some(s) => argmax_labels(g.value(s)),
        None => {
            let cls = crate::tensor::softmax(g.value(out.class_logits()), 1)?;
            let masks = g.value(out.mask_logits).map(|x| T::one() / (T::one() + (-x).exp()));
            assemble_semantic(&cls, &masks)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn saturated_priors() {
        let pos = Tensor::<f64>::full(&[2, 64], 10.0);
        let m = build_attention_mask(&pos, [4, 4, 4], [8, 8, 8]).unwrap();
        assert!(m.allowed.iter().all(|&a| a));
        let neg = Tensor::<f64>::full(&[2, 64], -10.0);
        let m = build_attention_mask(&neg, [4, 4, 4], [8, 8, 8]).unwrap();
        assert!(m.allowed.iter().all(|&a| !a));
    }

    #[test]
    fn half_volume_prior_matches_point_oracle() {
        // logits +1 on the upper half along depth, -1 below
        let ext = [4, 4, 4];
        let logits = Tensor::<f64>::from_fn(&[1, 64], |i| if i / 16 >= 2 { 1.0 } else { -1.0 });
        let target = [8, 8, 8];
        let m = build_attention_mask(&logits, ext, target).unwrap();
        for z in 0..8 {
            // resampled logit along depth: linear between cell centres
            let u = (z as f64 + 0.5) / 8.0 * 4.0 - 0.5;
            let u = u.clamp(0.0, 3.0);
            let lo = u.floor().min(2.0) as usize;
            let fr = u - lo as f64;
            let val = |i: usize| if i >= 2 { 1.0 } else { -1.0 };
            let l = val(lo) * (1.0 - fr) + val(lo + 1) * fr;
            for r in 0..64 {
                assert_eq!(m.allowed[z * 64 + r], l > 0.0);
            }
        }
        assert_eq!(m.allowed.iter().filter(|&&a| a).count(), 256);
    }

    fn build(variant: HeadVariant, shared: bool, masked: bool, seed: u64) -> (ParamStore<f64>, MultiScaleHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let queries = if variant.is_decoupled() { 3 } else { 4 };
        let opts = HeadOptions { variant, classes: 3, queries, width: 8, heads: 2, shared_queries: shared, masked_attention: masked };
        let h = MultiScaleHead::new(&mut b, opts, &[6, 4, 2]).unwrap();
        (store, h)
    }

    fn maps(g: &mut Graph<f64>, seed: u64) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        [(6, 4), (4, 8), (2, 16)].iter().map(|&(c, e)| g.constant(rand_t(&[1, c, e, e, e], &mut rng))).collect()
    }

    fn values(g: &Graph<f64>, preds: &[StagePrediction]) -> Vec<Tensor<f64>> {
        preds.iter().flat_map(|s| [g.value(s.output.mask_logits).clone(), g.value(s.output.class_embedding).clone()]).collect()
    }

    #[test]
    fn stage_layout() {
        let (store, h) = build(HeadVariant::Decoupled, true, true, 1);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let m = maps(&mut g, 2);
        let preds = run_multiscale(&mut g, &p, &h, &m).unwrap();
        assert_eq!(preds.iter().map(|s| s.level).collect::<Vec<_>>(), vec![3, 2, 1]);
        for (s, e) in preds.iter().zip([4, 8, 16]) {
            assert_eq!(s.extents, [e; 3]);
            assert_eq!(g.shape(s.output.mask_logits), &[3, e * e * e]);
            assert_eq!(g.shape(s.output.queries.unwrap()), &[3, 8]);
        }
        // finest is twice the next and four times the coarsest
        assert_eq!(preds[2].extents[0], 2 * preds[1].extents[0]);
        assert_eq!(preds[2].extents[0], 4 * preds[0].extents[0]);
    }

    #[test]
    fn single_stage_equals_single_head_call() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = {
            let mut b = Builder::new(&mut store, &mut rng);
            let opts = HeadOptions { variant: HeadVariant::Decoupled, classes: 3, queries: 3, width: 8, heads: 2, shared_queries: true, masked_attention: true };
            MultiScaleHead::new(&mut b, opts, &[2]).unwrap()
        };
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let map = g.constant(rand_t(&[1, 2, 8, 8, 8], &mut rng));
        let preds = run_multiscale(&mut g, &p, &h, &[map]).unwrap();
        let q = &h.query_sets[0];
        let direct = h.stages[0].forward(&mut g, &p, map, Some((p.var(q.embed), p.var(q.pos))), None).unwrap();
        assert_eq!(g.value(preds[0].output.mask_logits), g.value(direct.mask_logits));
        assert_eq!(g.value(preds[0].output.class_logits()), g.value(direct.class_logits()));
    }

    #[test]
    fn masking_disabled_matches_unmasked_config() {
        let (store, h) = build(HeadVariant::Decoupled, true, true, 4);
        let (_, h_off) = build(HeadVariant::Decoupled, true, false, 4);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let m = maps(&mut g, 5);
        let a = h.run(&mut g, &p, &m, Some(false)).unwrap();
        let b = h_off.run(&mut g, &p, &m, None).unwrap();
        let (va, vb) = (values(&g, &a), values(&g, &b));
        for (x, y) in va.iter().zip(&vb) {
            assert!(x.max_abs_diff(y) <= 1e-12);
        }
        // the gate is live when enabled
        let c = h.run(&mut g, &p, &m, None).unwrap();
        assert_ne!(values(&g, &c), va);
    }

    #[test]
    fn coarse_transformer_perturbation_propagates() {
        let (mut store, h) = build(HeadVariant::Decoupled, true, true, 6);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let m = maps(&mut g, 7);
        let r = h.run(&mut g, &p, &m, None).unwrap();
        let before = values(&g, &r);
        let prefix = "head.stage3.query.block";
        for prm in store.params_mut().iter_mut().filter(|q| q.name.starts_with(prefix)) {
            prm.tensor = Tensor::zeros(prm.tensor.shape());
        }
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let m = maps(&mut g, 7);
        let r = h.run(&mut g, &p, &m, None).unwrap();
        let after = values(&g, &r);
        // stages 2 and 1 both move
        for i in 2..6 {
            assert!(before[i].max_abs_diff(&after[i]) > 1e-6, "entry {i}");
        }
    }

    #[test]
    fn per_stage_query_sets_run() {
        for variant in [HeadVariant::Decoupled, HeadVariant::TransformerClsMask] {
            let (store, h) = build(variant, false, true, 8);
            assert_eq!(h.query_sets.len(), 3);
            let mut g = Graph::new();
            let p = store.bind(&mut g, true);
            let m = maps(&mut g, 9);
            let preds = h.run(&mut g, &p, &m, None).unwrap();
            assert!(preds.iter().all(|s| g.value(s.output.mask_logits).is_finite()));
        }
    }

    #[test]
    fn assemble_examples() {
        let cls = Tensor::<f64>::from_f64(&[1, 4], &[0.0, 1.0, 0.0, 0.0]).unwrap();
        let masks = Tensor::full(&[1, 5], 1.0);
        assert_eq!(assemble_semantic(&cls, &masks).unwrap(), vec![2; 5]);
        let cls = Tensor::<f64>::from_f64(&[2, 4], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let masks = Tensor::<f64>::from_f64(&[2, 4], &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(assemble_semantic(&cls, &masks).unwrap(), vec![1, 1, 3, 3]);
    }

    #[test]
    fn assemble_matches_score_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let (n, k, v) = (3, 3, 12);
            let raw = rand_t(&[n, k + 1], &mut rng).map(|x| x * 3.0);
            let cls = crate::tensor::softmax(&raw, 1).unwrap();
            let masks = Tensor::from_fn(&[n, v], |_| rng.gen_range(0.0..1.0));
            let labels = assemble_semantic(&cls, &masks).unwrap();
            for j in 0..v {
                let scores: Vec<f64> = (0..k).map(|c| (0..n).map(|i| cls.at(&[i, c]) * masks.at(&[i, j])).sum()).collect();
                let (best, &top) = scores.iter().enumerate().fold((0, &scores[0]), |a, b| if b.1 > a.1 { b } else { a });
                let want = if top < 0.5 { 0 } else { best as u16 + 1 };
                assert_eq!(labels[j], want);
            }
        }
    }
}
