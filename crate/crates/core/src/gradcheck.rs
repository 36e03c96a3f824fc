//! Finite-difference verification of tape gradients.
//!
//! The checked op is given as a closure that builds a sub-graph from variable
//! leaves. A non-scalar output is projected to a scalar with fixed
//! pseudo-random weights, so every output element contributes. Each probed
//! input element is perturbed by `±h` (and `±2h` for the fourth-order
//! stencil); a probe whose perturbed evaluations take a different discrete
//! branch than the base evaluation straddles a kink and is counted as
//! skipped rather than compared. Differences no larger than the rounding
//! error of the difference quotient itself (about `eps * |output| / h`) are
//! not counted against the gradient.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::FeatureMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) - f(x-h)) / 2h`
    Central,
    /// `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`
    FourthOrder,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub stencil: Stencil,
    pub seed: u64,
    /// Probe at most this many elements per input (chosen at random).
    pub max_probes: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            tolerance: 1e-4,
            stencil: Stencil::FourthOrder,
            seed: 0x5eed,
            max_probes: None,
        }
    }
}

impl GradCheckConfig {
    pub fn with_tolerance(tolerance: f64) -> Self {
        Self {
            tolerance,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InputError {
    pub name: String,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub inputs: Vec<InputError>,
    pub pass: bool,
    pub diagnostic: Option<String>,
}

impl GradCheckReport {
    fn failed(op: &str, tolerance: f64, diagnostic: String) -> Self {
        Self {
            op: op.to_string(),
            tolerance,
            max_rel_error: f64::INFINITY,
            inputs: Vec::new(),
            pass: false,
            diagnostic: Some(diagnostic),
        }
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{}: max rel err {:.3e} (tol {:.1e}) {}",
            self.op,
            self.max_rel_error,
            self.tolerance,
            if self.pass { "PASS" } else { "FAIL" }
        )?;
        for i in &self.inputs {
            writeln!(
                f,
                "  {:<32} checked {:>5} skipped {:>3} max rel err {:.3e}",
                i.name, i.checked, i.skipped_kinks, i.max_rel_error
            )?;
        }
        if let Some(d) = &self.diagnostic {
            writeln!(f, "  {d}")?;
        }
        Ok(())
    }
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    relative_error_above_noise(analytic, numeric, 0.0)
}

/// Like [`relative_error`], but the first `noise` of the absolute difference
/// is forgiven: it is what rounding in the perturbed evaluations alone can
/// produce.
pub fn relative_error_above_noise(analytic: f64, numeric: f64, noise: f64) -> f64 {
    ((analytic - numeric).abs() - noise).max(0.0) / analytic.abs().max(numeric.abs()).max(1e-8)
}

struct Eval {
    out: FeatureMap,
    pattern: u64,
}

fn evaluate<F>(inputs: &[FeatureMap], build: &F) -> Result<(Graph, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::with_pattern_tracking();
    let ids: Vec<NodeId> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = build(&mut g, &ids)?;
    Ok((g, ids, out))
}

fn eval_values<F>(inputs: &[FeatureMap], build: &F) -> Result<Eval>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let (g, _, out) = evaluate(inputs, build)?;
    Ok(Eval {
        pattern: g.pattern().unwrap_or(0),
        out: g.take_value(out),
    })
}

/// Compares tape gradients of `build` against finite differences at
/// `inputs`. See the module docs for the projection and kink handling.
pub fn finite_diff_check<F>(
    op: &str,
    inputs: &[(&str, &FeatureMap)],
    build: F,
    cfg: &GradCheckConfig,
) -> GradCheckReport
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let values: Vec<FeatureMap> = inputs.iter().map(|(_, m)| (*m).clone()).collect();
    let (g, ids, out) = match evaluate(&values, &build) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failed(op, cfg.tolerance, format!("evaluation failed: {e}")),
    };
    let base_pattern = g.pattern().unwrap_or(0);
    let out_value = g.value(out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let proj: Vec<f64> = if out_value.len() == 1 {
        vec![1.0]
    } else {
        (0..out_value.len()).map(|_| rng.random_range(-1.0..1.0)).collect()
    };
    // bound on the rounding error of one difference quotient
    let stencil_weight = match cfg.stencil {
        Stencil::Central => 1.0,
        Stencil::FourthOrder => 1.5,
    };
    let noise = 4.0 * f64::EPSILON * stencil_weight / cfg.step
        * proj.iter().zip(out_value.data()).map(|(r, f)| (r * f).abs()).sum::<f64>();
    let (c, h, w) = out_value.shape();
    let seed_grad = FeatureMap::from_vec(c, h, w, proj.clone()).unwrap();
    let grads = match g.backward_with(out, seed_grad) {
        Ok(gr) => gr,
        Err(e) => return GradCheckReport::failed(op, cfg.tolerance, format!("backward failed: {e}")),
    };

    let mut report = GradCheckReport {
        op: op.to_string(),
        tolerance: cfg.tolerance,
        max_rel_error: 0.0,
        inputs: Vec::new(),
        pass: true,
        diagnostic: None,
    };

    for (k, (name, input)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[k], input);
        if !analytic.is_finite() {
            report.pass = false;
            report.max_rel_error = f64::INFINITY;
            report.diagnostic = Some(format!("non-finite analytic gradient for input {name}"));
            return report;
        }
        let n = input.len();
        let probes: Vec<usize> = match cfg.max_probes {
            Some(m) if m < n => {
                let mut v = sample(&mut rng, n, m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        let mut entry = InputError {
            name: name.to_string(),
            checked: 0,
            skipped_kinks: 0,
            max_rel_error: 0.0,
            worst_index: None,
        };
        let offsets: &[f64] = match cfg.stencil {
            Stencil::Central => &[1.0, -1.0],
            Stencil::FourthOrder => &[1.0, -1.0, 2.0, -2.0],
        };
        for &j in &probes {
            let mut evals = Vec::with_capacity(offsets.len());
            for &o in offsets {
                let mut perturbed = values.clone();
                perturbed[k].data_mut()[j] += o * cfg.step;
                match eval_values(&perturbed, &build) {
                    Ok(e) => evals.push(e),
                    Err(e) => {
                        report.pass = false;
                        report.diagnostic = Some(format!("perturbed evaluation failed: {e}"));
                        return report;
                    }
                }
            }
            if evals.iter().any(|e| e.pattern != base_pattern) {
                entry.skipped_kinks += 1;
                continue;
            }
            let numeric: f64 = proj
                .iter()
                .enumerate()
                .map(|(m, r)| {
                    let d1 = evals[0].out.data()[m] - evals[1].out.data()[m];
                    let d = match cfg.stencil {
                        Stencil::Central => d1 / (2.0 * cfg.step),
                        Stencil::FourthOrder => {
                            let d2 = evals[2].out.data()[m] - evals[3].out.data()[m];
                            (8.0 * d1 - d2) / (12.0 * cfg.step)
                        }
                    };
                    r * d
                })
                .sum();
            let a = analytic.data()[j];
            let err = if numeric.is_finite() {
                relative_error_above_noise(a, numeric, noise)
            } else {
                f64::INFINITY
            };
            entry.checked += 1;
            if err >= entry.max_rel_error {
                entry.max_rel_error = err;
                entry.worst_index = Some(j);
            }
        }
        if n > 0 && entry.checked == 0 {
            report.pass = false;
            report.diagnostic = Some(format!("every probe of {name} straddled a kink"));
        }
        report.max_rel_error = report.max_rel_error.max(entry.max_rel_error);
        report.inputs.push(entry);
    }
    if report.max_rel_error > cfg.tolerance {
        report.pass = false;
    }
    report
}
