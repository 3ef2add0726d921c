//! Level allocation across blocks.
//!
//! Each block contributes a sampled value curve `α ↦ π₃(α)`. Curves are
//! concavified, and levels are chosen where the right derivatives equalize
//! (Bonferroni budget) or where `(1 - α_b) ∂₊π₃(α_b)` equalizes (Šidák
//! budget). Both allocators bisect on the shared multiplier.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::AltDensity;
use crate::error::{invalid, Error, Result};
use crate::k3solver::{K3Problem, SolverParams};
use crate::quadrature::QGrid;

use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Bonferroni,
    Sidak,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CurveData {
    alphas: Vec<f64>,
    values: Vec<f64>,
    block_id: String,
}

/// Sampled per-block value curve. The concavified interpolant passes through
/// `(0, 0)` and is flat past the last sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CurveData", into = "CurveData")]
pub struct ValueCurve {
    pub alphas: Vec<f64>,
    pub values: Vec<f64>,
    pub block_id: String,
    knots: Vec<f64>,
    heights: Vec<f64>,
    slopes: Vec<f64>,
}

impl TryFrom<CurveData> for ValueCurve {
    type Error = Error;

    fn try_from(d: CurveData) -> Result<Self> {
        ValueCurve::new(d.alphas, d.values, d.block_id)
    }
}

impl From<ValueCurve> for CurveData {
    fn from(c: ValueCurve) -> Self {
        CurveData {
            alphas: c.alphas,
            values: c.values,
            block_id: c.block_id,
        }
    }
}

impl ValueCurve {
    pub fn new(alphas: Vec<f64>, values: Vec<f64>, block_id: impl Into<String>) -> Result<Self> {
        if alphas.is_empty() || alphas.len() != values.len() {
            return Err(invalid("value curve needs equally many alphas and values"));
        }
        if alphas.windows(2).any(|w| !(w[0] < w[1])) || !(alphas[0] >= 0.0) || !(alphas[alphas.len() - 1] < 1.0) {
            return Err(invalid("curve alphas must increase strictly within [0,1)"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("curve values must be finite"));
        }
        let mut xs = Vec::with_capacity(alphas.len() + 1);
        let mut ys = Vec::with_capacity(alphas.len() + 1);
        if alphas[0] > 0.0 {
            xs.push(0.0);
            ys.push(0.0);
        }
        xs.extend_from_slice(&alphas);
        ys.extend_from_slice(&values);
        let slopes = pooled_slopes(&xs, &ys);
        let mut heights = vec![ys[0]];
        for (j, s) in slopes.iter().enumerate() {
            heights.push(heights[j] + s * (xs[j + 1] - xs[j]));
        }
        Ok(ValueCurve {
            alphas,
            values,
            block_id: block_id.into(),
            knots: xs,
            heights,
            slopes,
        })
    }

    /// The same curve under another block id.
    pub fn with_block_id(&self, id: &str) -> Self {
        ValueCurve {
            block_id: id.to_string(),
            ..self.clone()
        }
    }

    /// Knots of the concavified curve, including the origin anchor.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Segment slopes of the concavified curve; non-negative and
    /// non-increasing.
    pub fn slopes(&self) -> &[f64] {
        &self.slopes
    }

    /// Concavified value at `alpha`.
    pub fn value_at(&self, alpha: f64) -> f64 {
        let x = &self.knots;
        if alpha <= x[0] {
            return self.heights[0];
        }
        match self.segment(alpha) {
            Some(j) => self.heights[j] + self.slopes[j] * (alpha - x[j]),
            None => *self.heights.last().unwrap(),
        }
    }

    fn segment(&self, alpha: f64) -> Option<usize> {
        let j = self.knots.partition_point(|&k| k <= alpha);
        if j == 0 {
            Some(0)
        } else if j >= self.knots.len() {
            None
        } else {
            Some(j - 1)
        }
    }

    /// Largest `α'` with `∂₊π(α') >= mu`.
    fn right_inverse(&self, mu: f64) -> f64 {
        let last = *self.knots.last().unwrap();
        if mu <= 0.0 {
            return last;
        }
        match self.slopes.iter().rposition(|&s| s >= mu) {
            Some(j) => self.knots[j + 1],
            None => 0.0,
        }
    }

    /// Largest `α'` with `(1 - α') ∂₊π(α') >= mu`.
    fn right_inverse_sidak(&self, mu: f64) -> f64 {
        let last = *self.knots.last().unwrap();
        if mu <= 0.0 {
            return last;
        }
        let mut best = 0.0;
        for (j, &s) in self.slopes.iter().enumerate() {
            if s <= 0.0 || (1.0 - self.knots[j]) * s < mu {
                continue;
            }
            best = f64::max(best, self.knots[j + 1].min(1.0 - mu / s));
        }
        best
    }
}

/// Slopes pooled by width-weighted adjacent violators so they are
/// non-increasing, then floored at zero.
fn pooled_slopes(xs: &[f64], ys: &[f64]) -> Vec<f64> {
    // (width, rise, count)
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    for j in 0..xs.len() - 1 {
        let mut cur = (xs[j + 1] - xs[j], ys[j + 1] - ys[j], 1);
        while let Some(&prev) = blocks.last() {
            if prev.1 * cur.0 < cur.1 * prev.0 {
                blocks.pop();
                cur = (prev.0 + cur.0, prev.1 + cur.1, prev.2 + cur.2);
            } else {
                break;
            }
        }
        blocks.push(cur);
    }
    let mut out = Vec::with_capacity(xs.len().saturating_sub(1));
    for (w, r, c) in blocks {
        out.extend(std::iter::repeat_n((r / w).max(0.0), c));
    }
    out
}

/// Slope of the concavified curve on the segment to the right of `alpha`;
/// zero at or beyond the last knot.
pub fn right_derivative(curve: &ValueCurve, alpha: f64) -> f64 {
    match curve.segment(alpha) {
        Some(j) => curve.slopes[j],
        None => 0.0,
    }
}

/// Twelve log-spaced levels between `alpha/(10B)` and `min(0.5, 5 alpha)`.
pub fn default_alpha_grid(alpha: f64, n_blocks: usize) -> Vec<f64> {
    let lo = alpha / (10.0 * n_blocks as f64);
    let hi = (5.0 * alpha).min(0.5);
    let n = 12;
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Samples `π₃` at every level of `alpha_grid`.
pub fn build_value_curve(
    g: &AltDensity,
    alpha_grid: &[f64],
    grid: &QGrid,
    params: &SolverParams,
    block_id: &str,
) -> Result<ValueCurve> {
    let problem = K3Problem::new(Arc::new(g.clone()), Arc::new(grid.clone()))?;
    curve_from_problem(&problem, alpha_grid, params, block_id)
}

pub fn curve_from_problem(
    problem: &K3Problem,
    alpha_grid: &[f64],
    params: &SolverParams,
    block_id: &str,
) -> Result<ValueCurve> {
    if alpha_grid.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
        return Err(invalid("curve levels must lie in (0,1)"));
    }
    let values: Vec<f64> = alpha_grid
        .par_iter()
        .map(|&a| {
            problem.pi3(a, params).map_err(|e| Error::Solver {
                alpha: a,
                message: e.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    ValueCurve::new(alpha_grid.to_vec(), values, block_id)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationResult {
    pub levels: Vec<f64>,
    pub mu_star: f64,
    pub budget: Budget,
    pub binding: bool,
    pub iterations: usize,
    /// The multiplier search hit its upper cap (the steepest observed slope).
    pub cap_binding: bool,
}

/// `(α/B, 1 - (1-α)^(1/B))`.
pub fn uniform_splits(alpha: f64, n_blocks: usize) -> Result<(f64, f64)> {
    if n_blocks == 0 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("need B >= 1 and alpha in (0,1)"));
    }
    let b = n_blocks as f64;
    Ok((alpha / b, -((-alpha).ln_1p() / b).exp_m1()))
}

/// Whether `levels` respect the budget at `alpha`.
pub fn budget_feasible(levels: &[f64], alpha: f64, budget: Budget) -> bool {
    match budget {
        Budget::Bonferroni => levels.iter().sum::<f64>() <= alpha + 1e-9,
        Budget::Sidak => {
            let log_keep: f64 = levels.iter().map(|l| (-l).ln_1p()).sum();
            log_keep >= (-alpha).ln_1p() - 1e-9
        }
    }
}

/// Mean concavified value `(1/B) Σ π₃^(b)(level_b)`.
pub fn allocation_objective(curves: &[ValueCurve], levels: &[f64]) -> f64 {
    curves.iter().zip(levels).map(|(c, &l)| c.value_at(l)).sum::<f64>() / curves.len() as f64
}

fn check_inputs(curves: &[ValueCurve], alpha: f64, eps: f64) -> Result<()> {
    if curves.is_empty() {
        return Err(invalid("allocation needs at least one curve"));
    }
    if !(alpha > 0.0 && alpha < 1.0) || !(eps > 0.0) {
        return Err(invalid("need alpha in (0,1) and eps > 0"));
    }
    Ok(())
}

fn bisect<F>(mu_bar: f64, eps: f64, over: F) -> (f64, usize)
where
    F: Fn(f64) -> bool,
{
    let (mut lo, mut hi) = (0.0, mu_bar);
    let cap = ((mu_bar / eps).log2().ceil().max(0.0) as usize) + 1;
    let mut it = 0;
    while hi - lo >= eps && it < cap {
        let mid = 0.5 * (lo + hi);
        if over(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
        it += 1;
    }
    (hi, it)
}

/// Equalized-marginal allocation under `Σ α_b <= α`.
pub fn kkt_bisection_bonferroni(curves: &[ValueCurve], alpha: f64, eps: f64) -> Result<AllocationResult> {
    check_inputs(curves, alpha, eps)?;
    let b = curves.len();
    let mu_bar = curves.iter().map(|c| c.slopes[0]).fold(0.0, f64::max);
    if mu_bar <= 0.0 {
        return Ok(AllocationResult {
            levels: vec![alpha / b as f64; b],
            mu_star: 0.0,
            budget: Budget::Bonferroni,
            binding: true,
            iterations: 0,
            cap_binding: false,
        });
    }
    let total = |mu: f64| curves.iter().map(|c| c.right_inverse(mu)).sum::<f64>();
    let cap_binding = total(mu_bar) > alpha;
    let (mu_star, iterations) = if cap_binding {
        (mu_bar, 0)
    } else {
        bisect(mu_bar, eps, |mu| total(mu) > alpha)
    };
    let raw: Vec<f64> = curves.iter().map(|c| c.right_inverse(mu_star)).collect();
    let sum: f64 = raw.iter().sum();
    let levels = if sum > 0.0 {
        raw.iter().map(|l| l * alpha / sum).collect()
    } else {
        vec![alpha / b as f64; b]
    };
    Ok(AllocationResult {
        levels,
        mu_star,
        budget: Budget::Bonferroni,
        binding: true,
        iterations,
        cap_binding,
    })
}

/// Weighted equalized-marginal allocation under `Π (1 - α_b) >= 1 - α`.
pub fn kkt_bisection_sidak(curves: &[ValueCurve], alpha: f64, eps: f64) -> Result<AllocationResult> {
    check_inputs(curves, alpha, eps)?;
    let b = curves.len();
    let target = -(-alpha).ln_1p();
    let uniform = -((-alpha).ln_1p() / b as f64).exp_m1();
    let mu_bar = curves.iter().map(|c| c.slopes[0]).fold(0.0, f64::max);
    if mu_bar <= 0.0 {
        return Ok(AllocationResult {
            levels: vec![uniform; b],
            mu_star: 0.0,
            budget: Budget::Sidak,
            binding: true,
            iterations: 0,
            cap_binding: false,
        });
    }
    let total = |mu: f64| {
        curves
            .iter()
            .map(|c| -(-c.right_inverse_sidak(mu)).ln_1p())
            .sum::<f64>()
    };
    let cap_binding = total(mu_bar) > target;
    let (mu_star, iterations) = if cap_binding {
        (mu_bar, 0)
    } else {
        bisect(mu_bar, eps, |mu| total(mu) > target)
    };
    let raw: Vec<f64> = curves
        .iter()
        .map(|c| -(-c.right_inverse_sidak(mu_star)).ln_1p())
        .collect();
    let sum: f64 = raw.iter().sum();
    let levels = if sum > 0.0 {
        raw.iter().map(|t| -(-t * target / sum).exp_m1()).collect()
    } else {
        vec![uniform; b]
    };
    Ok(AllocationResult {
        levels,
        mu_star,
        budget: Budget::Sidak,
        binding: true,
        iterations,
        cap_binding,
    })
}
