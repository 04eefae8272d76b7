//! Bipartite matching of predictions to ground-truth segments and the
//! deep-supervised set loss built on it.

use crate::error::{dim_err, Error, Result};
use crate::msshead::StagePrediction;
use crate::tensor::{ops, Graph, Scalar, Tensor, Var};
use std::sync::Arc;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub no_object: f64,
    pub dice_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { class: 2.0, bce: 10.0, dice: 10.0, no_object: 0.1, dice_eps: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.class, self.bce, self.dice, self.no_object, self.dice_eps];
        if all.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// `w_l ∝ 2^{−(l−1)}`, normalized; index 0 is the finest stage.
pub fn deep_sup_weights(stages: usize) -> Vec<f64> {
    let total = ((1u64 << stages) - 1) as f64;
    (0..stages).map(|l| (1u64 << (stages - 1 - l)) as f64 / total).collect()
}

pub fn dice_loss(p: &[f64], t: &[f64], eps: f64) -> Result<f64> {
    ops::dice_loss(p, t, eps)
}

pub fn bce_loss(logits: &[f64], t: &[f64]) -> Result<f64> {
    ops::bce_with_logits(logits, t)
}

/// Weighted negative log-softmax of one logit row at `label`.
pub fn ce_class_loss(logits: &[f64], label: usize, weight: f64) -> Result<f64> {
    let row = Tensor::new(&[1, logits.len()], logits.to_vec())?;
    if label >= logits.len() {
        return Err(dim_err!("label {label} outside {} classes", logits.len()));
    }
    Ok(ops::cross_entropy_rows(&row, &[label], &[weight])?.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    /// class in 1..=K
    pub label: usize,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthSet {
    pub extents: [usize; 3],
    pub classes: usize,
    pub segments: Vec<Segment>,
}

impl GroundTruthSet {
    /// One segment per class present in a label volume.
    pub fn from_labels(labels: &[u16], extents: [usize; 3], classes: usize) -> Result<Self> {
        if labels.len() != extents.iter().product::<usize>() {
            return Err(dim_err!("{} labels for extents {extents:?}", labels.len()));
        }
        let mut segments = Vec::new();
        for c in 1..=classes {
            let mask: Vec<bool> = labels.iter().map(|&l| l as usize == c).collect();
            if mask.iter().any(|&m| m) {
                segments.push(Segment { label: c, mask });
            }
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize > classes) {
            return Err(Error::Range(format!("label {l} exceeds {classes} classes")));
        }
        Ok(GroundTruthSet { extents, classes, segments })
    }

    /// Nearest-neighbour downsampling by integer factors. Segments keep their
    /// order, even when a mask vanishes, so one matching indexes every stage.
    pub fn downsample(&self, target: [usize; 3]) -> Result<Self> {
        if target == self.extents {
            return Ok(self.clone());
        }
        let mut f = [0; 3];
        for a in 0..3 {
            if target[a] == 0 || self.extents[a] % target[a] != 0 {
                return Err(dim_err!("cannot downsample {:?} to {target:?}", self.extents));
            }
            f[a] = self.extents[a] / target[a];
        }
        let [_, h, w] = self.extents;
        let pick = |mask: &[bool]| {
            let mut out = Vec::with_capacity(target.iter().product());
            for z in 0..target[0] {
                for y in 0..target[1] {
                    for x in 0..target[2] {
                        out.push(mask[((z * f[0]) * h + y * f[1]) * w + x * f[2]]);
                    }
                }
            }
            out
        };
        let segments = self.segments.iter().map(|s| Segment { label: s.label, mask: pick(&s.mask) }).collect();
        Ok(GroundTruthSet { extents: target, classes: self.classes, segments })
    }
}

/// Class and mask logits of one stage.
#[derive(Clone, Debug)]
pub struct PredictionSet<T> {
    /// N×(K+1), no-object last
    pub class_logits: Tensor<T>,
    /// N×V
    pub mask_logits: Tensor<T>,
}

/// `cost[j][i] = λ_cls·(−p_i(c_j)) + λ_bce·bce(m_i, g_j) + λ_dice·dice(σ(m_i), g_j)`.
pub fn pairwise_cost<T: Scalar>(pred: &PredictionSet<T>, gt: &GroundTruthSet, w: &LossWeights) -> Result<Tensor<f64>> {
    let (n, kc) = pred.class_logits.dims2()?;
    let (nm, v) = pred.mask_logits.dims2()?;
    if nm != n || kc != gt.classes + 1 || v != gt.extents.iter().product::<usize>() {
        return Err(dim_err!("predictions {n}x{kc}/{nm}x{v} do not match ground truth with {} classes", gt.classes));
    }
    let probs = ops::softmax(&pred.class_logits.cast::<f64>(), 1)?;
    let logits = pred.mask_logits.cast::<f64>();
    let r = gt.segments.len();
    let mut cost = vec![0.0; r * n];
    for i in 0..n {
        let x = logits.row(i);
        let sig: Vec<f64> = x.iter().map(|&a| ops::sigmoid(a)).collect();
        for (j, seg) in gt.segments.iter().enumerate() {
            let t: Vec<f64> = seg.mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
            let cls = -probs.at(&[i, seg.label - 1]);
            cost[j * n + i] = w.class * cls + w.bce * ops::bce_with_logits(x, &t)? + w.dice * ops::dice_loss(&sig, &t, w.dice_eps)?;
        }
    }
    Tensor::new(&[r, n], cost)
}

/// Matching of ground-truth segments (rows) to queries (columns).
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// query index per ground-truth segment
    pub sigma: Vec<usize>,
    pub total: f64,
}

/// Minimum-cost injective assignment of every row to a distinct column.
/// Shortest augmenting paths with potentials, O(R²·C); among equal
/// reductions the lowest column index wins.
pub fn hungarian(cost: &Tensor<f64>) -> Result<Assignment> {
    let (r, c) = cost.dims2()?;
    if r > c {
        return Err(Error::Capacity(format!("{r} ground-truth segments exceed {c} queries")));
    }
    if !cost.is_finite() {
        return Err(Error::Numeric("cost matrix has non-finite entries".into()));
    }
    if r == 0 {
        return Ok(Assignment { sigma: Vec::new(), total: 0.0 });
    }
    let a = |i: usize, j: usize| cost.data()[(i - 1) * c + (j - 1)];
    // 1-based with column 0 as the virtual root
    let mut u = vec![0.0; r + 1];
    let mut v = vec![0.0; c + 1];
    let mut owner = vec![0usize; c + 1];
    let mut way = vec![0usize; c + 1];
    for i in 1..=r {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; c + 1];
        let mut used = vec![false; c + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=c {
                if used[j] {
                    continue;
                }
                let cur = a(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=c {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut sigma = vec![0; r];
    for j in 1..=c {
        if owner[j] != 0 {
            sigma[owner[j] - 1] = j - 1;
        }
    }
    let total = sigma.iter().enumerate().map(|(i, &j)| cost.data()[i * c + j]).sum();
    Ok(Assignment { sigma, total })
}

/// Matching computed once from the finest stage's predictions.
pub fn match_final_stage<T: Scalar>(stages: &[PredictionSet<T>], levels: &[usize], gt: &GroundTruthSet, w: &LossWeights) -> Result<Assignment> {
    let finest = levels
        .iter()
        .position(|&l| l == 1)
        .ok_or_else(|| Error::Spec("no finest-stage prediction to match against".into()))?;
    let pred = &stages[finest];
    let n = pred.class_logits.shape()[0];
    if gt.segments.len() > n {
        return Err(Error::Capacity(format!("{} ground-truth segments exceed {n} queries", gt.segments.len())));
    }
    hungarian(&pairwise_cost(pred, gt, w)?)
}

#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub total: Var,
    pub class: f64,
    pub bce: f64,
    pub dice: f64,
    pub assignment: Assignment,
}

fn targets<T: Scalar>(mask: &[bool]) -> Arc<Vec<T>> {
    Arc::new(mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())
}

/// `Σ_l w_l Σ_i [λ_cls·CE_i + 1[matched]·(λ_bce·BCE + λ_dice·Dice)]` with one
/// matching taken from the finest stage and reused everywhere. `gt` is at the
/// finest resolution.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, stages: &[StagePrediction], gt: &GroundTruthSet, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let sets: Vec<PredictionSet<T>> = stages
        .iter()
        .map(|s| PredictionSet { class_logits: g.value(s.output.class_logits()).clone(), mask_logits: g.value(s.output.mask_logits).clone() })
        .collect();
    let levels: Vec<usize> = stages.iter().map(|s| s.level).collect();
    let assignment = match_final_stage(&sets, &levels, gt, w)?;
    total_loss_with(g, stages, gt, w, assignment)
}

/// [`total_loss`] under a given assignment, which is treated as a constant.
pub fn total_loss_with<T: Scalar>(g: &mut Graph<T>, stages: &[StagePrediction], gt: &GroundTruthSet, w: &LossWeights, assignment: Assignment) -> Result<LossBreakdown> {
    w.validate()?;
    if assignment.sigma.len() != gt.segments.len() {
        return Err(dim_err!("assignment covers {} of {} segments", assignment.sigma.len(), gt.segments.len()));
    }
    let ds = deep_sup_weights(stages.len());
    let mut terms = Vec::new();
    let (mut class_sum, mut bce_sum, mut dice_sum) = (0.0, 0.0, 0.0);
    for s in stages {
        let wl = ds[s.level - 1];
        let gts = gt.downsample(s.extents)?;
        let cls = s.output.class_logits();
        let (n, kc) = g.value(cls).dims2()?;
        let mut labels = vec![kc - 1; n];
        let mut weights = vec![T::c(w.no_object); n];
        for (seg, &q) in gts.segments.iter().zip(&assignment.sigma) {
            labels[q] = seg.label - 1;
            weights[q] = T::one();
        }
        let ce = g.cross_entropy(cls, labels, weights)?;
        class_sum += wl * g.value(ce).item().to_f64().unwrap();
        terms.push(g.scale(ce, wl * w.class)?);
        for (seg, &q) in gts.segments.iter().zip(&assignment.sigma) {
            let t = targets::<T>(&seg.mask);
            let row = g.slice(s.output.mask_logits, 0, q, 1)?;
            let bce = g.bce_with_logits(row, t.clone())?;
            let prob = g.sigmoid(row)?;
            let dice = g.dice_loss(prob, t, T::c(w.dice_eps))?;
            bce_sum += wl * g.value(bce).item().to_f64().unwrap();
            dice_sum += wl * g.value(dice).item().to_f64().unwrap();
            terms.push(g.scale(bce, wl * w.bce)?);
            terms.push(g.scale(dice, wl * w.dice)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossBreakdown { total, class: class_sum, bce: bce_sum, dice: dice_sum, assignment })
}

/// Loss of the coupled variants: `Σ_l w_l (mean CE + mean foreground soft Dice)`
/// on background-first semantic logits.
pub fn semantic_loss<T: Scalar>(g: &mut Graph<T>, stages: &[StagePrediction], labels: &[u16], extents: [usize; 3], classes: usize) -> Result<(Var, f64, f64)> {
    let gt = GroundTruthSet::from_labels(labels, extents, classes)?;
    let ds = deep_sup_weights(stages.len());
    let (mut ce_sum, mut dice_sum) = (0.0, 0.0);
    let mut terms = Vec::new();
    for s in stages {
        let logits = s.output.semantic_logits.ok_or_else(|| Error::Spec("semantic loss needs coupled predictions".into()))?;
        let wl = ds[s.level - 1];
        let gts = gt.downsample(s.extents)?;
        let v: usize = s.extents.iter().product();
        let mut lab = vec![0usize; v];
        for seg in &gts.segments {
            for (l, &m) in lab.iter_mut().zip(&seg.mask) {
                if m {
                    *l = seg.label;
                }
            }
        }
        let rows = g.transpose(logits)?;
        let ce = g.cross_entropy(rows, lab.clone(), vec![T::one() / T::c(v as f64); v])?;
        ce_sum += wl * g.value(ce).item().to_f64().unwrap();
        terms.push(g.scale(ce, wl)?);
        let probs = g.softmax(logits, 0)?;
        for c in 1..=classes {
            let t = Arc::new(lab.iter().map(|&l| if l == c { T::one() } else { T::zero() }).collect::<Vec<_>>());
            let pc = g.slice(probs, 0, c, 1)?;
            let d = g.dice_loss(pc, t, T::one())?;
            dice_sum += wl * g.value(d).item().to_f64().unwrap() / classes as f64;
            terms.push(g.scale(d, wl / classes as f64)?);
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok((total, ce_sum, dice_sum))
}
