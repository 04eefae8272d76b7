//! Central finite-difference verification of the analytic gradients.

use super::{Graph, Tensor, Var};
use crate::error::Result;

pub const FD_STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub op: String,
    /// max relative error per input
    pub max_rel_error: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
    pub diagnostic: Option<String>,
}

impl GradReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().copied().fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max rel err {:.3e} (tol {:.0e})",
            self.op,
            if self.pass { "PASS" } else { "FAIL" },
            self.worst(),
            self.tolerance
        )?;
        if let Some(d) = &self.diagnostic {
            write!(f, " [{d}]")?;
        }
        Ok(())
    }
}

/// Deterministic reduction weights in [0.5, 1.5) so that outputs with a
/// constant sum (softmax rows) still have informative gradients.
fn reduction_weights(n: usize) -> Vec<f64> {
    let mut state: u64 = 0x9E37_79B9_7F4A_7C15;
    (0..n)
        .map(|_| {
            state = state.wrapping_mul(6_364_136_223_846_793_005).wrapping_add(1_442_695_040_888_963_407);
            0.5 + (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn scalar_objective<F>(f: &F, inputs: &[Tensor<f64>], leaves: bool) -> Result<(Graph<f64>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| if leaves { g.leaf(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let n = g.value(out).numel();
    let obj = if n == 1 {
        out
    } else {
        let w = g.constant(Tensor::new(g.shape(out), reduction_weights(n))?);
        let prod = g.mul(out, w)?;
        g.sum(prod)?
    };
    Ok((g, vars, obj))
}

/// Compares the tape gradient of `op` against the fourth-order central
/// difference `(8(f₊₁ − f₋₁) − (f₊₂ − f₋₂)) / 12h`, h = 1e-4. Relative error
/// per element is `|a−n| / max(|a|, |n|, 1e-8)`.
pub fn gradcheck<F>(name: &str, op: F, inputs: &[Tensor<f64>], tolerance: f64) -> GradReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let fail = |msg: String| GradReport {
        op: name.to_string(),
        max_rel_error: vec![f64::INFINITY; inputs.len()],
        tolerance,
        pass: false,
        diagnostic: Some(msg),
    };
    let (g, vars, obj) = match scalar_objective(&op, inputs, true) {
        Ok(x) => x,
        Err(e) => return fail(format!("forward failed: {e}")),
    };
    let grads = match g.backward(obj) {
        Ok(gr) => gr,
        Err(e) => return fail(format!("backward failed: {e}")),
    };
    let mut errors = Vec::with_capacity(inputs.len());
    let mut diagnostic = None;
    let mut perturbed = inputs.to_vec();
    for (i, (input, &var)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(var, input.shape());
        if !analytic.is_finite() {
            return fail(format!("non-finite analytic gradient for input {i}"));
        }
        let mut worst = 0.0f64;
        for j in 0..input.numel() {
            let x0 = input.data()[j];
            let mut eval = |x: f64| -> Result<f64> {
                perturbed[i].data_mut()[j] = x;
                let (g, _, obj) = scalar_objective(&op, &perturbed, false)?;
                Ok(g.value(obj).item())
            };
            let mut f = [0.0; 4];
            for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                match eval(x0 + k * FD_STEP) {
                    Ok(v) => *slot = v,
                    Err(e) => return fail(format!("perturbed forward failed: {e}")),
                }
            }
            perturbed[i].data_mut()[j] = x0;
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * FD_STEP);
            let a = analytic.data()[j];
            if !numeric.is_finite() {
                return fail(format!("non-finite numeric gradient for input {i} element {j}"));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > worst {
                worst = rel;
                if rel >= tolerance {
                    diagnostic = Some(format!("input {i} element {j}: analytic {a:.6e} numeric {numeric:.6e}"));
                }
            }
        }
        errors.push(worst);
    }
    let pass = errors.iter().all(|&e| e < tolerance);
    GradReport { op: name.to_string(), max_rel_error: errors, tolerance, pass, diagnostic: if pass { None } else { diagnostic } }
}
