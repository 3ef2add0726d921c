//! Alternative p-value densities on [0,1].
//!
//! Every family is described by a serializable [`DensitySpec`] and realized as
//! an [`AltDensity`] exposing the density `g`, its CDF `G`, a sup bound `M` and
//! a sampler that maps a uniform draw to an alternative p-value. The
//! Grenander estimator lives here too, since the plug-in procedure treats its
//! fit as just another density.

use std::f64::consts::SQRT_2;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, StudentsT};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{invalid, Error, Result};

pub const DEFAULT_TRUNC_BOUND: f64 = 6.0;

/// Samples at exactly zero are moved here so the Grenander height stays finite.
pub const ZERO_CLAMP: f64 = 1e-300;

const SUP_GRID_POINTS: usize = 1001;

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / SQRT_2)
}

pub fn norm_inv(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    -SQRT_2 * erfc_inv(2.0 * p)
}

fn norm_ln_pdf(x: f64) -> f64 {
    -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

fn default_bound() -> f64 {
    DEFAULT_TRUNC_BOUND
}

/// Serializable description of an alternative density, written as
/// `{"kind": ..., "params": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "params", rename_all = "snake_case")]
pub enum DensitySpec {
    /// One-sided normal location shift on `[-trunc_bound, trunc_bound]`.
    Truncnorm {
        theta: f64,
        #[serde(default = "default_bound")]
        trunc_bound: f64,
    },
    /// Null `N(0,1)`, alternative Student-t, two-sided p-values.
    Tdist { df: f64 },
    /// `Beta(shape, 1)`, i.e. `g(u) = shape * u^(shape-1)`.
    Beta { shape: f64 },
    /// Equal-weight mixture of two truncated normal location shifts.
    Mixnorm {
        means: [f64; 2],
        #[serde(default = "default_bound")]
        trunc_bound: f64,
    },
    GrenanderFit(GrenanderFit),
    Uniform,
}

impl DensitySpec {
    /// Mixnorm with component means `theta/2` and `3*theta/2`.
    pub fn mixnorm_from_theta(theta: f64) -> Self {
        DensitySpec::Mixnorm {
            means: [0.5 * theta, 1.5 * theta],
            trunc_bound: DEFAULT_TRUNC_BOUND,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            DensitySpec::Truncnorm { .. } => "truncnorm",
            DensitySpec::Tdist { .. } => "tdist",
            DensitySpec::Beta { .. } => "beta",
            DensitySpec::Mixnorm { .. } => "mixnorm",
            DensitySpec::GrenanderFit(_) => "grenander_fit",
            DensitySpec::Uniform => "uniform",
        }
    }

    /// The family's headline shape parameter: theta, df, the Beta shape, or
    /// the mean of the mixnorm means. Zero for uniform and Grenander fits.
    pub fn shape_parameter(&self) -> f64 {
        match self {
            DensitySpec::Truncnorm { theta, .. } => *theta,
            DensitySpec::Tdist { df } => *df,
            DensitySpec::Beta { shape } => *shape,
            DensitySpec::Mixnorm { means, .. } => 0.5 * (means[0] + means[1]),
            DensitySpec::GrenanderFit(_) | DensitySpec::Uniform => 0.0,
        }
    }
}

/// Normal location shift truncated to `[-bound, bound]`, pushed through the
/// truncated null CDF to give a p-value. No sign restriction here; the public
/// constructor enforces `theta < 0`.
#[derive(Debug, Clone, Copy)]
struct TruncShift {
    theta: f64,
    bound: f64,
    lo: f64,
    z0: f64,
    lo1: f64,
    z1: f64,
    log_ratio: f64,
}

impl TruncShift {
    fn new(theta: f64, bound: f64) -> Self {
        let lo = norm_cdf(-bound);
        let z0 = norm_cdf(bound) - lo;
        let lo1 = norm_cdf(-bound - theta);
        let z1 = norm_cdf(bound - theta) - lo1;
        TruncShift {
            theta,
            bound,
            lo,
            z0,
            lo1,
            z1,
            log_ratio: (z0 / z1).ln() - 0.5 * theta * theta,
        }
    }

    fn x(&self, u: f64) -> f64 {
        norm_inv(self.lo + u.clamp(0.0, 1.0) * self.z0).clamp(-self.bound, self.bound)
    }

    fn pdf(&self, u: f64) -> f64 {
        (self.log_ratio + self.theta * self.x(u)).exp()
    }

    fn cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        if u >= 1.0 {
            return 1.0;
        }
        ((norm_cdf(self.x(u) - self.theta) - self.lo1) / self.z1).clamp(0.0, 1.0)
    }

    fn draw(&self, v: f64) -> f64 {
        let x = self.theta + norm_inv(self.lo1 + v * self.z1);
        ((norm_cdf(x) - self.lo) / self.z0).clamp(0.0, 1.0)
    }
}

#[derive(Debug, Clone)]
enum Model {
    Truncnorm(TruncShift),
    Tdist(StudentsT),
    Beta(f64),
    Mixnorm([TruncShift; 2]),
    Grenander(GrenanderFit),
    Uniform,
}

/// An alternative p-value density together with its CDF and sup bound.
///
/// Immutable after construction and safe to share across threads.
#[derive(Debug, Clone)]
pub struct AltDensity {
    spec: DensitySpec,
    model: Model,
    sup_bound: f64,
    monotone: bool,
}

impl AltDensity {
    pub fn from_spec(spec: &DensitySpec) -> Result<Self> {
        match spec {
            DensitySpec::Truncnorm { theta, trunc_bound } => truncnorm_density(*theta, *trunc_bound),
            DensitySpec::Tdist { df } => tdist_density(*df),
            DensitySpec::Beta { shape } => beta_density(*shape),
            DensitySpec::Mixnorm { means, trunc_bound } => mixnorm_density(*means, *trunc_bound),
            DensitySpec::GrenanderFit(fit) => {
                fit.validate()?;
                Ok(Self::finish(spec.clone(), Model::Grenander(fit.clone()), true))
            }
            DensitySpec::Uniform => Ok(uniform_density()),
        }
    }

    fn finish(spec: DensitySpec, model: Model, monotone: bool) -> Self {
        let mut d = AltDensity {
            spec,
            model,
            sup_bound: 1.0,
            monotone,
        };
        d.sup_bound = match &d.model {
            Model::Truncnorm(t) => t.pdf(0.0).max(1.0),
            Model::Grenander(fit) => fit.heights.iter().copied().fold(1.0, f64::max),
            Model::Uniform => 1.0,
            _ => (0..SUP_GRID_POINTS)
                .map(|i| d.pdf(i as f64 / (SUP_GRID_POINTS - 1) as f64))
                .filter(|v| v.is_finite())
                .fold(1.0, f64::max),
        };
        d
    }

    pub fn spec(&self) -> &DensitySpec {
        &self.spec
    }

    /// Upper bound `M` on `g`, at least 1. For densities that are unbounded
    /// at zero this is the maximum over the 1001-point evaluation grid.
    pub fn sup_bound(&self) -> f64 {
        self.sup_bound
    }

    pub fn is_monotone(&self) -> bool {
        self.monotone
    }

    /// Density `g(u)`; zero outside `[0,1]`.
    pub fn pdf(&self, u: f64) -> f64 {
        if !(0.0..=1.0).contains(&u) {
            return 0.0;
        }
        match &self.model {
            Model::Truncnorm(t) => t.pdf(u),
            Model::Tdist(t) => {
                if u <= 0.0 {
                    return f64::INFINITY;
                }
                let z = -norm_inv(0.5 * u);
                (t.ln_pdf(z) - norm_ln_pdf(z)).exp()
            }
            Model::Beta(s) => {
                if u == 0.0 && *s < 1.0 {
                    f64::INFINITY
                } else {
                    s * u.powf(s - 1.0)
                }
            }
            Model::Mixnorm([a, b]) => 0.5 * (a.pdf(u) + b.pdf(u)),
            Model::Grenander(fit) => fit.pdf(u),
            Model::Uniform => 1.0,
        }
    }

    /// CDF `G(alpha) = ∫_0^alpha g`.
    pub fn cdf(&self, alpha: f64) -> f64 {
        if alpha <= 0.0 {
            return 0.0;
        }
        if alpha >= 1.0 {
            return 1.0;
        }
        match &self.model {
            Model::Truncnorm(t) => t.cdf(alpha),
            Model::Tdist(t) => {
                let z = -norm_inv(0.5 * alpha);
                (2.0 * t.cdf(-z)).clamp(0.0, 1.0)
            }
            Model::Beta(s) => alpha.powf(*s),
            Model::Mixnorm([a, b]) => 0.5 * (a.cdf(alpha) + b.cdf(alpha)),
            Model::Grenander(fit) => fit.cdf(alpha),
            Model::Uniform => alpha,
        }
    }

    /// Maps a uniform draw `v` to a p-value distributed with density `g`.
    /// The map is measurable but not necessarily monotone (t-family).
    pub fn draw(&self, v: f64) -> f64 {
        let v = v.clamp(0.0, 1.0);
        match &self.model {
            Model::Truncnorm(t) => t.draw(v),
            Model::Tdist(t) => {
                let x = t.inverse_cdf(v.clamp(1e-300, 1.0 - 1e-16));
                (2.0 * norm_cdf(-x.abs())).clamp(0.0, 1.0)
            }
            Model::Beta(s) => v.powf(1.0 / s),
            Model::Mixnorm([a, b]) => {
                if v < 0.5 {
                    a.draw(2.0 * v)
                } else {
                    b.draw(2.0 * v - 1.0)
                }
            }
            Model::Grenander(fit) => fit.quantile(v),
            Model::Uniform => v,
        }
    }
}

/// One-sided truncated-normal alternative with `theta < 0`.
pub fn truncnorm_density(theta: f64, trunc_bound: f64) -> Result<AltDensity> {
    if !(theta < 0.0) || !theta.is_finite() {
        return Err(invalid(format!(
            "truncnorm requires theta < 0 (a left shift of the statistic), got {theta}"
        )));
    }
    if !(trunc_bound > 0.0) || !trunc_bound.is_finite() {
        return Err(invalid(format!("trunc_bound must be positive, got {trunc_bound}")));
    }
    let spec = DensitySpec::Truncnorm { theta, trunc_bound };
    Ok(AltDensity::finish(
        spec,
        Model::Truncnorm(TruncShift::new(theta, trunc_bound)),
        true,
    ))
}

pub fn tdist_density(df: f64) -> Result<AltDensity> {
    if !(df > 0.0) || !df.is_finite() {
        return Err(invalid(format!("tdist requires df > 0, got {df}")));
    }
    let t = StudentsT::new(0.0, 1.0, df).map_err(|e| invalid(e.to_string()))?;
    Ok(AltDensity::finish(DensitySpec::Tdist { df }, Model::Tdist(t), false))
}

pub fn beta_density(shape: f64) -> Result<AltDensity> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(invalid(format!("beta shape must be positive, got {shape}")));
    }
    Ok(AltDensity::finish(
        DensitySpec::Beta { shape },
        Model::Beta(shape),
        shape <= 1.0,
    ))
}

pub fn mixnorm_density(means: [f64; 2], trunc_bound: f64) -> Result<AltDensity> {
    if means.iter().any(|m| !(*m <= 0.0) || !m.is_finite()) {
        return Err(invalid(format!("mixnorm means must be <= 0, got {means:?}")));
    }
    if !(trunc_bound > 0.0) || !trunc_bound.is_finite() {
        return Err(invalid(format!("trunc_bound must be positive, got {trunc_bound}")));
    }
    let comps = [
        TruncShift::new(means[0], trunc_bound),
        TruncShift::new(means[1], trunc_bound),
    ];
    Ok(AltDensity::finish(
        DensitySpec::Mixnorm { means, trunc_bound },
        Model::Mixnorm(comps),
        true,
    ))
}

pub fn uniform_density() -> AltDensity {
    AltDensity::finish(DensitySpec::Uniform, Model::Uniform, true)
}

/// `G(alpha)` for any density.
pub fn cdf_g(g: &AltDensity, alpha: f64) -> f64 {
    g.cdf(alpha)
}

/// Maximum of `|g - ghat|` over `n_points` evenly spaced points of `[lo, hi]`.
pub fn sup_norm_distance(g: &AltDensity, ghat: &AltDensity, lo: f64, hi: f64, n_points: usize) -> f64 {
    assert!(n_points >= 2 && lo < hi, "need n_points >= 2 and lo < hi");
    let step = (hi - lo) / (n_points - 1) as f64;
    (0..n_points)
        .map(|i| {
            let u = if i + 1 == n_points { hi } else { lo + i as f64 * step };
            (g.pdf(u) - ghat.pdf(u)).abs()
        })
        .fold(0.0, f64::max)
}

// ── Grenander ────────────────────────────────────────────────────────────────

/// Piecewise-constant non-increasing density.
///
/// `heights[j]` applies on `(breakpoints[j], breakpoints[j+1]]`, with the first
/// interval closed at 0. `breakpoints` starts at 0 and ends at 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrenanderFit {
    pub breakpoints: Vec<f64>,
    pub heights: Vec<f64>,
    pub n: usize,
}

impl GrenanderFit {
    fn validate(&self) -> Result<()> {
        let b = &self.breakpoints;
        if b.len() < 2 || self.heights.len() + 1 != b.len() {
            return Err(invalid("grenander fit needs len(heights) + 1 == len(breakpoints) >= 2"));
        }
        if b[0] != 0.0 || *b.last().unwrap() != 1.0 || b.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("grenander breakpoints must increase from 0 to 1"));
        }
        if self.heights.windows(2).any(|w| w[1] > w[0]) || self.heights.iter().any(|h| !(*h >= 0.0)) {
            return Err(invalid("grenander heights must be non-negative and non-increasing"));
        }
        Ok(())
    }

    fn segment(&self, u: f64) -> usize {
        // first breakpoint >= u, segment to its left
        let i = self.breakpoints.partition_point(|&b| b < u);
        i.saturating_sub(1).min(self.heights.len() - 1)
    }

    pub fn pdf(&self, u: f64) -> f64 {
        if !(0.0..=1.0).contains(&u) {
            return 0.0;
        }
        self.heights[self.segment(u)]
    }

    pub fn cdf(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for (j, h) in self.heights.iter().enumerate() {
            let (a, b) = (self.breakpoints[j], self.breakpoints[j + 1]);
            if u <= b {
                return (acc + h * (u - a)).min(1.0);
            }
            acc += h * (b - a);
        }
        acc.min(1.0)
    }

    /// Inverse of the piecewise-linear CDF.
    pub fn quantile(&self, v: f64) -> f64 {
        let mut acc = 0.0;
        for (j, h) in self.heights.iter().enumerate() {
            let (a, b) = (self.breakpoints[j], self.breakpoints[j + 1]);
            let mass = h * (b - a);
            if *h > 0.0 && acc + mass >= v {
                return (a + (v - acc) / h).clamp(a, b);
            }
            acc += mass;
        }
        // v beyond the total mass: the last point carrying mass
        let last = self.heights.iter().rposition(|h| *h > 0.0).unwrap_or(0);
        self.breakpoints[last + 1]
    }
}

/// Grenander estimator: slopes of the least concave majorant of the
/// empirical CDF, computed by pooling adjacent violators.
pub fn fit_grenander(samples: &[f64]) -> Result<GrenanderFit> {
    if samples.is_empty() {
        return Err(invalid("grenander fit needs at least one sample"));
    }
    if let Some(bad) = samples.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(invalid(format!("grenander samples must lie in [0,1], got {bad}")));
    }
    let n = samples.len();
    let mut xs: Vec<f64> = samples.iter().map(|&x| if x == 0.0 { ZERO_CLAMP } else { x }).collect();
    xs.sort_by(f64::total_cmp);

    // ECDF jumps with ties merged
    let mut knots: Vec<(f64, f64)> = Vec::new();
    for x in xs {
        match knots.last_mut() {
            Some((v, c)) if *v == x => *c += 1.0,
            _ => knots.push((x, 1.0)),
        }
    }

    // (left end, right end, count); counts stay exact
    let mut blocks: Vec<(f64, f64, f64)> = Vec::with_capacity(knots.len() + 1);
    let mut left = 0.0;
    for &(x, c) in &knots {
        let mut cur = (left, x, c);
        while let Some(&prev) = blocks.last() {
            // pool when the previous slope does not exceed the current one;
            // the relative slack merges collinear vertices despite rounding
            let (wp, wc) = (prev.1 - prev.0, cur.1 - cur.0);
            if prev.2 * wc <= cur.2 * wp * (1.0 + 1e-12) {
                blocks.pop();
                cur = (prev.0, cur.1, prev.2 + cur.2);
            } else {
                break;
            }
        }
        blocks.push(cur);
        left = x;
    }

    let mut breakpoints = vec![0.0];
    let mut heights = Vec::with_capacity(blocks.len() + 1);
    for (lo, hi, c) in blocks {
        breakpoints.push(hi);
        heights.push(c / n as f64 / (hi - lo));
    }
    if *breakpoints.last().unwrap() < 1.0 {
        breakpoints.push(1.0);
        heights.push(0.0);
    }
    Ok(GrenanderFit { breakpoints, heights, n })
}

/// Wraps a Grenander fit as a density.
pub fn grenander_density(fit: GrenanderFit) -> Result<AltDensity> {
    AltDensity::from_spec(&DensitySpec::GrenanderFit(fit))
}

impl TryFrom<&DensitySpec> for AltDensity {
    type Error = Error;

    fn try_from(spec: &DensitySpec) -> Result<Self> {
        AltDensity::from_spec(spec)
    }
}
