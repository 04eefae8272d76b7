//! Finite-difference checks of every differentiable operation, in f64.
//!
//! Layers with parameters are checked with the parameters as inputs too, so
//! the offset/weight MLPs of FSAD and both head branches are covered. All
//! zero-initialised parameters are re-drawn at random first; a zero output
//! layer would otherwise hide every gradient behind it.

use crate::error::{Error, Result};
use crate::fsad::{FsadAttention, ValuePyramid};
use crate::heads::{HeadOutput, HeadVariant};
use crate::matchloss::{match_final_stage, total_loss_with, GroundTruthSet, LossWeights, PredictionSet};
use crate::msshead::StagePrediction;
use crate::nn::{Activation, Bound, Builder, Mlp, ParamStore};
use crate::tensor::{gradcheck, DeformLayout, ElementwiseKind, GradReport, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

/// Names accepted by [`run_op`], in suite order.
pub const OPS: &[&str] = &[
    "matmul",
    "conv3d",
    "conv3d_strided",
    "softmax",
    "masked_softmax",
    "layer_norm",
    "instance_norm",
    "grid_sample",
    "elementwise",
    "pool_upsample",
    "fsad_attention",
    "mask_mlp",
    "class_mlp",
    "dice_loss",
    "bce_loss",
    "ce_loss",
    "total_loss",
];

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Keeps values at least `margin` away from zero (kinks of relu and friends).
fn off_zero(shape: &[usize], rng: &mut ChaCha8Rng, margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(margin..1.0);
        if rng.gen_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Sample coordinates whose scaled positions avoid the trilinear cell boundaries.
fn grid_coords(n: usize, extent: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3], |_| loop {
        let c: f64 = rng.gen_range(0.05..0.95);
        let pos = c * (extent - 1) as f64;
        if (pos - pos.round()).abs() > 1e-3 {
            break c;
        }
    })
}

fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for p in store.params_mut() {
        p.tensor.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.8..0.8));
    }
}

fn with_params<F>(name: &str, data: Vec<Tensor<f64>>, store: &ParamStore<f64>, f: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var], &Bound) -> crate::Result<Var>,
{
    let n = data.len();
    let inputs: Vec<Tensor<f64>> = data.into_iter().chain(store.params().iter().map(|p| p.tensor.clone())).collect();
    gradcheck(
        name,
        |g, v| {
            let bound = Bound::from_vars(v[n..].to_vec());
            f(g, &v[..n], &bound)
        },
        &inputs,
        TOLERANCE,
    )
}

fn fsad_attention(rng: &mut ChaCha8Rng) -> GradReport {
    let mut store = ParamStore::new();
    let layout = DeformLayout { heads: 2, levels: 2, points: 2 };
    let attn = {
        let mut b = Builder::new(&mut store, rng);
        FsadAttention::new(&mut b, "fsad", 4, 4, layout)
    };
    randomize(&mut store, rng);
    // small offsets keep most samples inside the volume
    for p in store.params_mut().iter_mut().filter(|p| p.name.starts_with("fsad.offsets.fc2")) {
        p.tensor.data_mut().iter_mut().for_each(|v| *v *= 0.3);
    }
    let queries = uniform(&[3, 4], -1.0, 1.0, rng);
    let refs = uniform(&[3, 3], 0.2, 0.8, rng);
    let v0 = uniform(&[8, 4], -1.0, 1.0, rng);
    let v1 = uniform(&[27, 4], -1.0, 1.0, rng);
    let scales = Tensor::from_f64(&[2], &[0.25, 0.15]).unwrap();
    with_params("fsad_attention", vec![queries, v0, v1, scales], &store, |g, v, p| {
        let values = ValuePyramid { values: vec![v[1], v[2]], extents: vec![[2, 2, 2], [3, 3, 3]], scales: v[3] };
        attn.forward(g, p, v[0], &refs, &values)
    })
}

fn head_branch(name: &str, rng: &mut ChaCha8Rng) -> GradReport {
    let (e, c, kc, n, vox) = (6, 5, 3, 3, 10);
    let mut store = ParamStore::new();
    let out_dim = if name == "mask_mlp" { c } else { kc };
    let mlp = {
        let mut b = Builder::new(&mut store, rng);
        Mlp::new(&mut b, name, [e, e, out_dim], Activation::Relu)
    };
    randomize(&mut store, rng);
    let queries = off_zero(&[n, e], rng, 0.05);
    if name == "mask_mlp" {
        let features = uniform(&[c, vox], -1.0, 1.0, rng);
        with_params(name, vec![queries, features], &store, |g, v, p| {
            let emb = mlp.forward(g, p, v[0])?;
            g.matmul(emb, v[1])
        })
    } else {
        with_params(name, vec![queries], &store, |g, v, p| {
            let logits = mlp.forward(g, p, v[0])?;
            g.softmax(logits, 1)
        })
    }
}

/// Three stages (4³, 2³, 1³) of a decoupled head with two classes and three
/// queries; the assignment is computed once from the inputs and then frozen.
fn total_loss_check(rng: &mut ChaCha8Rng) -> GradReport {
    let (n, k) = (3, 2);
    let extents = [[1usize; 3], [2; 3], [4; 3]];
    let labels: Vec<u16> = (0..64).map(|_| rng.gen_range(0..=k as u16)).collect();
    let gt = GroundTruthSet::from_labels(&labels, [4; 3], k).unwrap();
    let mut inputs = Vec::new();
    for e in extents {
        inputs.push(uniform(&[n, k + 1], -2.0, 2.0, rng));
        inputs.push(uniform(&[n, e.iter().product()], -3.0, 3.0, rng));
    }
    let w = LossWeights::default();
    let sets: Vec<PredictionSet<f64>> =
        inputs.chunks(2).map(|c| PredictionSet { class_logits: c[0].clone(), mask_logits: c[1].clone() }).collect();
    let sigma = match match_final_stage(&sets, &[3, 2, 1], &gt, &w) {
        Ok(s) => s,
        Err(e) => return failed("total_loss", e),
    };
    gradcheck(
        "total_loss",
        |g, v| {
            let stages: Vec<StagePrediction> = extents
                .iter()
                .enumerate()
                .map(|(i, &e)| StagePrediction {
                    level: 3 - i,
                    extents: e,
                    output: HeadOutput {
                        variant: HeadVariant::Decoupled,
                        mask_embedding: v[2 * i + 1],
                        class_embedding: v[2 * i],
                        mask_logits: v[2 * i + 1],
                        semantic_logits: None,
                        queries: None,
                    },
                })
                .collect();
            Ok(total_loss_with(g, &stages, &gt, &w, sigma.clone())?.total)
        },
        &inputs,
        TOLERANCE,
    )
}

fn failed(op: &str, e: Error) -> GradReport {
    GradReport { op: op.into(), max_rel_error: vec![], tolerance: TOLERANCE, pass: false, diagnostic: Some(e.to_string()) }
}

/// One finite-difference check of `op` with inputs drawn from `seed`.
pub fn run_op(op: &str, seed: u64) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let report = match op {
        "matmul" => gradcheck(op, |g, v| g.matmul(v[0], v[1]), &[uniform(&[3, 4], -1.0, 1.0, r), uniform(&[4, 5], -1.0, 1.0, r)], TOLERANCE),
        "conv3d" | "conv3d_strided" => {
            let stride = if op == "conv3d" { 1 } else { 2 };
            let x = uniform(&[1, 2, 4, 4, 4], -1.0, 1.0, r);
            let w = uniform(&[3, 2, 3, 3, 3], -0.5, 0.5, r);
            let b = uniform(&[3], -0.5, 0.5, r);
            gradcheck(op, |g, v| g.conv3d(v[0], v[1], Some(v[2]), stride, 1), &[x, w, b], TOLERANCE)
        }
        "softmax" => gradcheck(op, |g, v| g.softmax(v[0], 1), &[uniform(&[3, 5], -2.0, 2.0, r)], TOLERANCE),
        "masked_softmax" => {
            let allowed: Vec<bool> = (0..15).map(|i| i % 5 == 0 || r.gen_bool(0.6)).collect();
            gradcheck(op, |g, v| g.masked_softmax(v[0], &allowed), &[uniform(&[3, 5], -2.0, 2.0, r)], TOLERANCE)
        }
        "layer_norm" => {
            let x = uniform(&[4, 6], -2.0, 2.0, r);
            let (gamma, beta) = (uniform(&[6], 0.5, 1.5, r), uniform(&[6], -0.5, 0.5, r));
            gradcheck(op, |g, v| g.layer_norm(v[0], v[1], v[2], 1), &[x, gamma, beta], TOLERANCE)
        }
        "instance_norm" => {
            let x = uniform(&[1, 2, 2, 3, 2], -2.0, 2.0, r);
            let (gamma, beta) = (uniform(&[2], 0.5, 1.5, r), uniform(&[2], -0.5, 0.5, r));
            gradcheck(op, |g, v| g.instance_norm(v[0], v[1], v[2]), &[x, gamma, beta], TOLERANCE)
        }
        "grid_sample" => {
            let field = uniform(&[1, 2, 4, 4, 4], -1.0, 1.0, r);
            let coords = grid_coords(6, 4, r);
            gradcheck(op, |g, v| g.grid_sample(v[0], v[1]), &[field, coords], TOLERANCE)
        }
        "elementwise" => {
            let (a, b) = (off_zero(&[3, 4], r, 0.05), uniform(&[3, 4], -2.0, 2.0, r));
            gradcheck(
                op,
                |g, v| {
                    let s = g.elementwise(ElementwiseKind::Sigmoid, v[1], None)?;
                    let ge = g.gelu(v[0])?;
                    let re = g.relu(v[0])?;
                    let p = g.mul(ge, s)?;
                    let q = g.add(p, re)?;
                    let d = g.elementwise(ElementwiseKind::Add, q, Some(v[1]))?;
                    g.scale(d, 1.5)
                },
                &[a, b],
                TOLERANCE,
            )
        }
        "pool_upsample" => {
            let x = uniform(&[1, 2, 4, 4, 2], -1.0, 1.0, r);
            let y = uniform(&[1, 1, 4, 4, 2], -1.0, 1.0, r);
            gradcheck(
                op,
                |g, v| {
                    let p = g.avg_pool3d(v[0], [2, 2, 2])?;
                    let u = g.upsample2(p)?;
                    let c = g.concat(&[u, v[1]], 1)?;
                    g.slice(c, 1, 1, 2)
                },
                &[x, y],
                TOLERANCE,
            )
        }
        "fsad_attention" => fsad_attention(r),
        "mask_mlp" | "class_mlp" => head_branch(op, r),
        "dice_loss" => {
            let t: Arc<Vec<f64>> = Arc::new((0..12).map(|_| if r.gen_bool(0.4) { 1.0 } else { 0.0 }).collect());
            gradcheck(
                op,
                |g, v| {
                    let p = g.sigmoid(v[0])?;
                    g.dice_loss(p, t.clone(), 1.0)
                },
                &[uniform(&[1, 12], -3.0, 3.0, r)],
                TOLERANCE,
            )
        }
        "bce_loss" => {
            let t: Arc<Vec<f64>> = Arc::new((0..12).map(|_| if r.gen_bool(0.5) { 1.0 } else { 0.0 }).collect());
            gradcheck(op, |g, v| g.bce_with_logits(v[0], t.clone()), &[uniform(&[1, 12], -4.0, 4.0, r)], TOLERANCE)
        }
        "ce_loss" => {
            let labels: Vec<usize> = (0..4).map(|_| r.gen_range(0..5)).collect();
            let weights = vec![1.0, 0.1, 1.0, 0.1];
            gradcheck(op, |g, v| g.cross_entropy(v[0], labels.clone(), weights.clone()), &[uniform(&[4, 5], -2.0, 2.0, r)], TOLERANCE)
        }
        "total_loss" => total_loss_check(r),
        _ => return Err(Error::Config(format!("unknown gradient check '{op}' (known: {})", OPS.join(", ")))),
    };
    Ok(GradReport { op: format!("{op} [seed {seed}]"), ..report })
}

/// Every op in [`OPS`] (or only `filter`) for every seed.
pub fn run_suite(filter: Option<&str>, seeds: &[u64]) -> Result<Vec<GradReport>> {
    let ops: Vec<&str> = match filter {
        Some(f) => vec![*OPS.iter().find(|&&o| o == f).ok_or_else(|| Error::Config(format!("unknown gradient check '{f}' (known: {})", OPS.join(", "))))?],
        None => OPS.to_vec(),
    };
    let mut out = Vec::new();
    for op in ops {
        for &s in seeds {
            out.push(run_op(op, s)?);
        }
    }
    Ok(out)
}
