//! The K=3 block rule.
//!
//! For a block of three sorted p-values `u1 <= u2 <= u3` with alternative
//! density `g`, the rule maximizing average power subject to
//! `FWER_0, FWER_1, FWER_2 <= alpha` is indexed by dual multipliers
//! `mu = (mu0, mu1, mu2)`:
//!
//! ```text
//! a_i = 2 g1 g2 g3
//! b_0 = (6, 0, 0)
//! b_1 = (2 (g2 + g3), 2 g1, 0)
//! b_2 = (2 g2 g3, 2 g1 g3, 2 g1 g2)
//! R_i = a_i - Σ_l mu_l b_{l,i}
//! ```
//!
//! and the block rejects the `r` smallest p-values where `r` maximizes the
//! partial sum `R_1 + ... + R_r` (with `r = 0` scoring zero). Ties go to the
//! smaller `r`, which is the strict-inequality form of the indicators.
//!
//! The multipliers are found by cyclic coordinate descent on the dual. Each
//! coordinate solves `F_l(mu_l) = alpha` by bracketing and bisection, where
//! `F_l` is the exact FWER_l functional of the induced rule. When
//! `F_l(0) <= alpha` the constraint is slack and the coordinate is set to 0.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{AltDensity, DensitySpec};
use crate::error::{invalid, Error, Result};
use crate::quadrature::{pairwise_sum, GridMeta, QGrid};

pub const MSG_DECREASE_ALPHA: &str = "Consider decreasing FWER level α.";
pub const MSG_INCREASE_UMAX: &str = "Consider increasing U_max or decreasing FWER level α.";

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MuVector {
    pub mu0: f64,
    pub mu1: f64,
    pub mu2: f64,
}

impl MuVector {
    pub fn new(mu0: f64, mu1: f64, mu2: f64) -> Self {
        MuVector { mu0, mu1, mu2 }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.mu0, self.mu1, self.mu2]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        MuVector::new(a[0], a[1], a[2])
    }

    pub fn with(self, which: Coordinate, x: f64) -> Self {
        let mut a = self.to_array();
        a[which as usize] = x;
        MuVector::from_array(a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coordinate {
    Mu0 = 0,
    Mu1 = 1,
    Mu2 = 2,
}

pub const COORDINATES: [Coordinate; 3] = [Coordinate::Mu0, Coordinate::Mu1, Coordinate::Mu2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveFlag {
    Success,
    LevelUnreachable,
    BracketFailed,
    MaxIter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub flag: SolveFlag,
    pub message: String,
    pub outer_iterations: usize,
    /// `F_l(mu) - alpha` for l = 0, 1, 2.
    pub final_residuals: [f64; 3],
    /// Coordinates pinned at zero because their constraint is slack.
    #[serde(default)]
    pub slack: [bool; 3],
}

impl SolveDiagnostics {
    fn coordinate(flag: SolveFlag, message: &str) -> Self {
        SolveDiagnostics {
            flag,
            message: message.to_string(),
            outer_iterations: 0,
            final_residuals: [0.0; 3],
            slack: [false; 3],
        }
    }

    pub fn is_success(&self) -> bool {
        self.flag == SolveFlag::Success
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    pub delta: f64,
    pub epsilon: f64,
    pub t_max: usize,
    pub u_s: f64,
    pub u_f: f64,
    pub u_max: f64,
    pub max_iter_b: usize,
}

impl Default for SolverParams {
    fn default() -> Self {
        SolverParams {
            delta: 1e-7,
            epsilon: 1e-6,
            t_max: 50,
            u_s: 0.5,
            u_f: 2.0,
            u_max: 1e6,
            max_iter_b: 200,
        }
    }
}

impl SolverParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) || !(self.epsilon > 0.0) {
            return Err(invalid("delta and epsilon must be positive"));
        }
        if !(self.u_f > 1.0) || !(self.u_s > 0.0) || !(self.u_max > 0.0) {
            return Err(invalid("need U_f > 1, U_s > 0 and U_max > 0"));
        }
        if self.t_max == 0 || self.max_iter_b == 0 {
            return Err(invalid("iteration caps must be positive"));
        }
        Ok(())
    }
}

/// Power and FWER functionals of a block rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RuleMetrics {
    pub fwer0: f64,
    pub fwer1: f64,
    pub fwer2: f64,
    pub avg_power: f64,
}

impl RuleMetrics {
    pub fn fwer(&self) -> [f64; 3] {
        [self.fwer0, self.fwer1, self.fwer2]
    }
}

// ── Pointwise rule ───────────────────────────────────────────────────────────

/// `(R1, R2, R3)` from the density values at a sorted triple.
#[inline]
pub fn r_from_values(mu: &MuVector, g: [f64; 3]) -> [f64; 3] {
    let [g1, g2, g3] = g;
    let a = 2.0 * g1 * g2 * g3;
    [
        a - 6.0 * mu.mu0 - 2.0 * mu.mu1 * (g2 + g3) - 2.0 * mu.mu2 * g2 * g3,
        a - 2.0 * mu.mu1 * g1 - 2.0 * mu.mu2 * g1 * g3,
        a - 2.0 * mu.mu2 * g1 * g2,
    ]
}

pub fn r_coefficients(mu: &MuVector, u: &[f64; 3], g: &AltDensity) -> [f64; 3] {
    r_from_values(mu, [g.pdf(u[0]), g.pdf(u[1]), g.pdf(u[2])])
}

/// Number of rejections in `0..=3`.
#[inline]
pub fn rejections_from_values(mu: &MuVector, g: [f64; 3]) -> usize {
    let [r1, r2, r3] = r_from_values(mu, g);
    let a1 = r1 > 0.0 || r1 + r2 > 0.0 || r1 + r2 + r3 > 0.0;
    if !a1 {
        return 0;
    }
    let a2 = r2 > 0.0 || r2 + r3 > 0.0;
    if !a2 {
        return 1;
    }
    if r3 > 0.0 {
        3
    } else {
        2
    }
}

#[inline]
pub fn decide_from_values(mu: &MuVector, g: [f64; 3]) -> [bool; 3] {
    let r = rejections_from_values(mu, g);
    [r >= 1, r >= 2, r >= 3]
}

/// `(D1, D2, D3)` at a sorted triple.
pub fn decide_dmu(mu: &MuVector, u: &[f64; 3], g: &AltDensity) -> [bool; 3] {
    decide_from_values(mu, [g.pdf(u[0]), g.pdf(u[1]), g.pdf(u[2])])
}

/// A solved block rule: multipliers plus the density they were solved for.
#[derive(Debug, Clone)]
pub struct K3Rule {
    pub mu: MuVector,
    pub density: Arc<AltDensity>,
}

impl K3Rule {
    pub fn decide(&self, u: &[f64; 3]) -> [bool; 3] {
        decide_dmu(&self.mu, u, &self.density)
    }

    /// Rejection count for a sorted triple.
    pub fn rejections(&self, u: &[f64; 3]) -> usize {
        let g = &self.density;
        rejections_from_values(&self.mu, [g.pdf(u[0]), g.pdf(u[1]), g.pdf(u[2])])
    }
}

// ── Quadrature problem ───────────────────────────────────────────────────────

/// A density and a grid with `g` tabulated at every node.
///
/// Decisions use point values of `g` at the nodes, as the deployed rule does.
/// Integrals use cell averages of `g` when the grid has cells, so the mass
/// each cell carries is exact and only the decision is piecewise constant.
#[derive(Debug, Clone)]
pub struct K3Problem {
    density: Arc<AltDensity>,
    grid: Arc<QGrid>,
    gvals: Vec<[f64; 3]>,
    gmass: Vec<[f64; 3]>,
}

impl K3Problem {
    pub fn new(density: Arc<AltDensity>, grid: Arc<QGrid>) -> Result<Self> {
        let gvals: Vec<[f64; 3]> = grid
            .nodes()
            .par_iter()
            .map(|u| [density.pdf(u[0]), density.pdf(u[1]), density.pdf(u[2])])
            .collect();
        let gmass = grid.cell_means(&density).unwrap_or_else(|| gvals.clone());
        if let Some((i, v)) = gvals
            .iter()
            .zip(&gmass)
            .enumerate()
            .map(|(i, (a, b))| (i, [a[0], a[1], a[2], b[0], b[1], b[2]]))
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
        {
            let u = grid.nodes()[i];
            let value = *v.iter().find(|x| !x.is_finite()).unwrap();
            return Err(Error::NonFiniteIntegrand {
                u1: u[0],
                u2: u[1],
                u3: u[2],
                value,
            });
        }
        Ok(K3Problem {
            density,
            grid,
            gvals,
            gmass,
        })
    }

    pub fn density(&self) -> &Arc<AltDensity> {
        &self.density
    }

    pub fn grid(&self) -> &Arc<QGrid> {
        &self.grid
    }

    /// All four functionals of `D^mu` in one pass.
    #[allow(clippy::needless_range_loop)]
    pub fn rule_metrics(&self, mu: &MuVector) -> RuleMetrics {
        let w = self.grid.weights();
        let n = w.len();
        let partials: Vec<[f64; 4]> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = [0.0; 4];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let r = rejections_from_values(mu, self.gvals[i]);
                    if r == 0 {
                        continue;
                    }
                    accumulate(&mut acc, w[i], self.gmass[i], r);
                }
                acc
            })
            .collect();
        finish_metrics(&partials)
    }

    /// `(FWER_0, FWER_1, FWER_2)` of `D^mu`.
    pub fn constraint_maps(&self, mu: &MuVector) -> [f64; 3] {
        self.rule_metrics(mu).fwer()
    }

    /// Functionals of an arbitrary decision map, checked for nesting.
    pub fn evaluate<F>(&self, decision: F) -> Result<RuleMetrics>
    where
        F: Fn(&[f64; 3]) -> [bool; 3] + Sync,
    {
        let nodes = self.grid.nodes();
        let w = self.grid.weights();
        let n = w.len();
        let partials: Vec<Result<[f64; 4]>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut acc = [0.0; 4];
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    let u = &nodes[i];
                    let d = decision(u);
                    if (d[1] && !d[0]) || (d[2] && !d[1]) {
                        return Err(Error::NestingViolation {
                            u1: u[0],
                            u2: u[1],
                            u3: u[2],
                        });
                    }
                    let r = d.iter().filter(|x| **x).count();
                    if r > 0 {
                        accumulate(&mut acc, w[i], self.gmass[i], r);
                    }
                }
                Ok(acc)
            })
            .collect();
        let partials: Vec<[f64; 4]> = partials.into_iter().collect::<Result<_>>()?;
        Ok(finish_metrics(&partials))
    }

    /// Cyclic coordinate descent for the dual multipliers.
    pub fn solve(&self, alpha: f64, params: &SolverParams) -> Result<(MuVector, SolveDiagnostics)> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0,1), got {alpha}")));
        }
        params.validate()?;
        let mut mu = MuVector::default();
        let mut slack = [false; 3];
        let mut converged = false;
        let mut t = 0;
        while t < params.t_max {
            t += 1;
            let old = mu;
            for which in COORDINATES {
                let f = |x: f64| self.constraint_maps(&mu.with(which, x))[which as usize];
                let (value, diag) = compute_coordinate_mu(f, alpha, params);
                match diag.flag {
                    SolveFlag::Success => {
                        mu = mu.with(which, value);
                        slack[which as usize] = false;
                    }
                    SolveFlag::LevelUnreachable => {
                        mu = mu.with(which, 0.0);
                        slack[which as usize] = true;
                    }
                    _ => {
                        let mut diag = diag;
                        diag.outer_iterations = t;
                        diag.final_residuals = self.residuals(&mu, alpha);
                        diag.slack = slack;
                        return Ok((mu, diag));
                    }
                }
            }
            let step: f64 = old
                .to_array()
                .iter()
                .zip(mu.to_array())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            if step <= params.epsilon {
                converged = true;
                break;
            }
        }
        let (flag, message) = if converged {
            (SolveFlag::Success, String::new())
        } else {
            (
                SolveFlag::MaxIter,
                format!("no convergence after T_max = {} outer iterations", params.t_max),
            )
        };
        Ok((
            mu,
            SolveDiagnostics {
                flag,
                message,
                outer_iterations: t,
                final_residuals: self.residuals(&mu, alpha),
                slack,
            },
        ))
    }

    /// Smallest `c >= 1` (to bisection tolerance, from above) with every
    /// constraint of `c * mu` at most `alpha`. Rejection counts only fall as
    /// `c` grows, so the constraints are non-increasing in `c`.
    pub fn repair_feasible(&self, mu: &MuVector, alpha: f64, params: &SolverParams) -> Option<MuVector> {
        let scaled = |c: f64| MuVector::from_array(mu.to_array().map(|x| c * x));
        let ok = |c: f64| self.constraint_maps(&scaled(c)).iter().all(|f| *f <= alpha);
        if ok(1.0) {
            return Some(*mu);
        }
        let top = mu.to_array().into_iter().fold(0.0, f64::max);
        if !(top > 0.0) {
            return None;
        }
        let (mut lo, mut hi) = (1.0, 2.0);
        while !ok(hi) {
            lo = hi;
            hi *= 2.0;
            if hi * top > params.u_max {
                return None;
            }
        }
        for _ in 0..params.max_iter_b {
            if hi - lo < params.delta {
                break;
            }
            let mid = 0.5 * (lo + hi);
            if ok(mid) {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Some(scaled(hi))
    }

    fn residuals(&self, mu: &MuVector, alpha: f64) -> [f64; 3] {
        let f = self.constraint_maps(mu);
        [f[0] - alpha, f[1] - alpha, f[2] - alpha]
    }

    /// Optimal average power at level `alpha`.
    pub fn pi3(&self, alpha: f64, params: &SolverParams) -> Result<f64> {
        let (mu, diag) = self.solve(alpha, params)?;
        if !diag.is_success() {
            return Err(Error::Solver {
                alpha,
                message: diag.message,
            });
        }
        Ok(self.rule_metrics(&mu).avg_power)
    }
}

#[inline]
fn accumulate(acc: &mut [f64; 4], w: f64, g: [f64; 3], r: usize) {
    let [g1, g2, g3] = g;
    // D1 always set when r >= 1
    acc[0] += w;
    acc[1] += w * (g2 + g3);
    acc[2] += w * g2 * g3;
    let mut pw = 1.0;
    if r >= 2 {
        acc[1] += w * g1;
        acc[2] += w * g1 * g3;
        pw += 1.0;
    }
    if r >= 3 {
        acc[2] += w * g1 * g2;
        pw += 1.0;
    }
    acc[3] += w * pw * g1 * g2 * g3;
}

fn finish_metrics(partials: &[[f64; 4]]) -> RuleMetrics {
    let col = |j: usize| pairwise_sum(&partials.iter().map(|p| p[j]).collect::<Vec<_>>());
    RuleMetrics {
        fwer0: 6.0 * col(0),
        fwer1: 2.0 * col(1),
        fwer2: 2.0 * col(2),
        avg_power: 2.0 * col(3),
    }
}

// ── Root finding ─────────────────────────────────────────────────────────────

/// Solves `F(x) = alpha` for a non-increasing `F` on `[0, U_max]` by
/// expanding-interval bracketing followed by bisection.
pub fn compute_coordinate_mu<F>(mut f: F, alpha: f64, params: &SolverParams) -> (f64, SolveDiagnostics)
where
    F: FnMut(f64) -> f64,
{
    let mut lo = 0.0;
    let f0 = f(lo);
    if f0 == alpha {
        return (lo, SolveDiagnostics::coordinate(SolveFlag::Success, ""));
    }
    if f0 < alpha {
        return (lo, SolveDiagnostics::coordinate(SolveFlag::LevelUnreachable, MSG_DECREASE_ALPHA));
    }
    let mut hi = lo + params.u_s;
    let mut f_hi = f(hi);
    while f_hi > alpha && hi < params.u_max {
        hi *= params.u_f;
        f_hi = f(hi);
    }
    if f_hi > alpha {
        return (lo, SolveDiagnostics::coordinate(SolveFlag::BracketFailed, MSG_INCREASE_UMAX));
    }
    for _ in 0..params.max_iter_b {
        let half = (hi - lo) / 2.0;
        if half < params.delta {
            break;
        }
        let mid = lo + half;
        if f(mid) > alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo + (hi - lo) / 2.0, SolveDiagnostics::coordinate(SolveFlag::Success, ""))
}

// ── Free-function entry points ───────────────────────────────────────────────

pub fn constraint_maps(mu: &MuVector, g: &AltDensity, grid: &QGrid) -> Result<[f64; 3]> {
    let p = K3Problem::new(Arc::new(g.clone()), Arc::new(grid.clone()))?;
    Ok(p.constraint_maps(mu))
}

pub fn compute_optimal_mu(
    alpha: f64,
    g: &AltDensity,
    grid: &QGrid,
    params: &SolverParams,
) -> Result<(MuVector, SolveDiagnostics)> {
    let p = K3Problem::new(Arc::new(g.clone()), Arc::new(grid.clone()))?;
    p.solve(alpha, params)
}

/// Power and FWER functionals of `decision` when the alternative density is `g`.
pub fn evaluate_rule<F>(decision: F, g: &AltDensity, grid: &QGrid) -> Result<RuleMetrics>
where
    F: Fn(&[f64; 3]) -> [bool; 3] + Sync,
{
    let p = K3Problem::new(Arc::new(g.clone()), Arc::new(grid.clone()))?;
    p.evaluate(decision)
}

pub fn pi3_value(alpha: f64, g: &AltDensity, grid: &QGrid, params: &SolverParams) -> Result<f64> {
    let p = K3Problem::new(Arc::new(g.clone()), Arc::new(grid.clone()))?;
    p.pi3(alpha, params)
}

// ── Caching and artifacts ────────────────────────────────────────────────────

/// Solved multipliers keyed by level, for one problem and parameter set.
#[derive(Debug)]
pub struct SolveCache {
    problem: K3Problem,
    params: SolverParams,
    solved: Mutex<HashMap<u64, (MuVector, SolveDiagnostics)>>,
}

impl SolveCache {
    pub fn new(problem: K3Problem, params: SolverParams) -> Self {
        SolveCache {
            problem,
            params,
            solved: Mutex::new(HashMap::new()),
        }
    }

    pub fn problem(&self) -> &K3Problem {
        &self.problem
    }

    pub fn params(&self) -> &SolverParams {
        &self.params
    }

    /// Solves at `alpha` once; later calls return the stored result.
    pub fn solve(&self, alpha: f64) -> Result<(MuVector, SolveDiagnostics)> {
        let key = alpha.to_bits();
        if let Some(hit) = self.solved.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let out = self.problem.solve(alpha, &self.params)?;
        self.solved.lock().unwrap().insert(key, out.clone());
        Ok(out)
    }

    /// Solved rule at `alpha`, or an error carrying the solver message.
    pub fn rule(&self, alpha: f64) -> Result<K3Rule> {
        let (mu, diag) = self.solve(alpha)?;
        if !diag.is_success() {
            return Err(Error::Solver {
                alpha,
                message: diag.message,
            });
        }
        Ok(K3Rule {
            mu,
            density: self.problem.density.clone(),
        })
    }

    /// Like [`rule`](Self::rule), but an iterate that hit the outer-iteration
    /// cap is repaired instead of rejected: all multipliers are scaled up by
    /// the smallest factor that makes every constraint hold. Coordinate
    /// descent can creep along a ridge when `g` is a step function, as with a
    /// Grenander fit.
    pub fn feasible_rule(&self, alpha: f64) -> Result<(K3Rule, SolveDiagnostics)> {
        let (mut mu, diag) = self.solve(alpha)?;
        if !diag.is_success() {
            if diag.flag != SolveFlag::MaxIter {
                return Err(Error::Solver {
                    alpha,
                    message: diag.message,
                });
            }
            mu = self.problem.repair_feasible(&mu, alpha, &self.params).ok_or_else(|| Error::Solver {
                alpha,
                message: format!("{}; feasibility repair failed. {MSG_INCREASE_UMAX}", diag.message),
            })?;
            log::warn!(
                "alpha={alpha}: solver capped after {} outer iterations, using scaled feasible multipliers",
                diag.outer_iterations
            );
        }
        Ok((
            K3Rule {
                mu,
                density: self.problem.density.clone(),
            },
            diag,
        ))
    }

    /// Artifact for `alpha`, solving if needed.
    pub fn artifact(&self, alpha: f64) -> Result<SolverArtifact> {
        let (mu, diagnostics) = self.solve(alpha)?;
        Ok(SolverArtifact::from_solution(
            &self.problem,
            alpha,
            &self.params,
            mu,
            diagnostics,
        ))
    }

    /// Stores a saved artifact if it was produced for this density, grid and
    /// parameter set. Returns whether it was taken.
    pub fn adopt(&self, a: &SolverArtifact) -> bool {
        let matches = a.density == *self.problem.density.spec()
            && a.grid == *self.problem.grid.meta()
            && a.params == self.params;
        if matches {
            self.solved
                .lock()
                .unwrap()
                .insert(a.alpha.to_bits(), (MuVector::from_array(a.mu), a.diagnostics.clone()));
        }
        matches
    }

    pub fn pi3(&self, alpha: f64) -> Result<f64> {
        let rule = self.rule(alpha)?;
        Ok(self.problem.rule_metrics(&rule.mu).avg_power)
    }

    pub fn len(&self) -> usize {
        self.solved.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverArtifact {
    pub alpha: f64,
    pub density: DensitySpec,
    pub grid: GridMeta,
    pub params: SolverParams,
    pub mu: [f64; 3],
    pub diagnostics: SolveDiagnostics,
    pub residuals: [f64; 3],
    pub metrics: RuleMetrics,
}

impl SolverArtifact {
    pub fn build(problem: &K3Problem, alpha: f64, params: &SolverParams) -> Result<Self> {
        let (mu, diagnostics) = problem.solve(alpha, params)?;
        Ok(Self::from_solution(problem, alpha, params, mu, diagnostics))
    }

    fn from_solution(
        problem: &K3Problem,
        alpha: f64,
        params: &SolverParams,
        mu: MuVector,
        diagnostics: SolveDiagnostics,
    ) -> Self {
        SolverArtifact {
            alpha,
            density: problem.density().spec().clone(),
            grid: problem.grid().meta().clone(),
            params: *params,
            mu: mu.to_array(),
            residuals: diagnostics.final_residuals,
            metrics: problem.rule_metrics(&mu),
            diagnostics,
        }
    }
}
