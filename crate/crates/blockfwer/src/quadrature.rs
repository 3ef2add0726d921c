//! Quadrature on the ordered simplex `Q = {0 <= u1 <= u2 <= u3 <= 1}`.
//!
//! Grids are tensor products of one-dimensional breakpoints restricted to
//! cells that meet `Q`. A strictly ordered cell `i < j < k` carries its
//! midpoint with the full cell volume. Cells on the diagonal are clipped to
//! their `Q` portion (a half or a sixth of the cell) and carry the centroid of
//! that portion, so weights are positive and sum to `vol(Q) = 1/6` exactly up
//! to rounding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::AltDensity;
use crate::error::{invalid, Error, Result};

pub const VOL_Q: f64 = 1.0 / 6.0;

/// Default points per axis; 74 gives 70,300 nodes.
pub const DEFAULT_N_PER_AXIS: usize = 74;

const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Equal-width cells.
    Uniform,
    /// Cell edges at quantiles of `(u + G(u))/2` for the alternative CDF `G`.
    Graded,
    /// Equal-weight sorted uniform triples.
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub mode: GridMode,
    pub n_per_axis: usize,
    pub n_grid: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

/// Nodes and positive weights on `Q`.
#[derive(Debug, Clone)]
pub struct QGrid {
    nodes: Vec<[f64; 3]>,
    weights: Vec<f64>,
    meta: GridMeta,
    /// Breakpoints and per-node cell indices for tensor grids.
    cells: Option<(Vec<f64>, Vec<[u32; 3]>)>,
}

impl QGrid {
    pub fn nodes(&self) -> &[[f64; 3]] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn n_grid(&self) -> usize {
        self.nodes.len()
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    /// Per-node cell averages `(G(b_{c+1}) - G(b_c)) / h_c` of `g` along each
    /// axis, or `None` for a sampled grid. With these in place of point values,
    /// `Σ w_i g(u1) g(u2) g(u3)` is exact over every cell.
    pub fn cell_means(&self, g: &AltDensity) -> Option<Vec<[f64; 3]>> {
        let (breaks, idx) = self.cells.as_ref()?;
        let cdf: Vec<f64> = breaks.iter().map(|&b| g.cdf(b)).collect();
        let means: Vec<f64> = (0..breaks.len() - 1)
            .map(|c| (cdf[c + 1] - cdf[c]) / (breaks[c + 1] - breaks[c]))
            .collect();
        Some(idx.iter().map(|c| c.map(|j| means[j as usize])).collect())
    }

    /// Tensor grid built from increasing breakpoints `0 = b0 < ... < bn = 1`.
    pub fn from_breakpoints(breaks: &[f64], mode: GridMode) -> Result<Self> {
        let n = breaks.len().saturating_sub(1);
        if n < 2 {
            return Err(invalid("need at least two cells per axis"));
        }
        if breaks[0] != 0.0 || breaks[n] != 1.0 || breaks.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(invalid("breakpoints must increase strictly from 0 to 1"));
        }
        let a = &breaks[..n];
        let h: Vec<f64> = breaks.windows(2).map(|w| w[1] - w[0]).collect();
        let count = n * (n + 1) * (n + 2) / 6;
        let mut nodes = Vec::with_capacity(count);
        let mut weights = Vec::with_capacity(count);
        let mut idx = Vec::with_capacity(count);
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    let (node, w) = if i < j && j < k {
                        (
                            [a[i] + h[i] / 2.0, a[j] + h[j] / 2.0, a[k] + h[k] / 2.0],
                            h[i] * h[j] * h[k],
                        )
                    } else if i == j && j < k {
                        (
                            [a[i] + h[i] / 3.0, a[i] + 2.0 * h[i] / 3.0, a[k] + h[k] / 2.0],
                            h[i] * h[i] / 2.0 * h[k],
                        )
                    } else if i < j && j == k {
                        (
                            [a[i] + h[i] / 2.0, a[j] + h[j] / 3.0, a[j] + 2.0 * h[j] / 3.0],
                            h[i] * h[j] * h[j] / 2.0,
                        )
                    } else {
                        (
                            [a[i] + h[i] / 4.0, a[i] + h[i] / 2.0, a[i] + 3.0 * h[i] / 4.0],
                            h[i] * h[i] * h[i] / 6.0,
                        )
                    };
                    nodes.push(node);
                    weights.push(w);
                    idx.push([i as u32, j as u32, k as u32]);
                }
            }
        }
        Ok(QGrid {
            meta: GridMeta {
                mode,
                n_per_axis: n,
                n_grid: nodes.len(),
                seed: None,
            },
            nodes,
            weights,
            cells: Some((breaks.to_vec(), idx)),
        })
    }
}

/// Midpoint tensor grid with `n_per_axis` equal cells per axis.
pub fn build_qgrid(n_per_axis: usize) -> Result<QGrid> {
    if n_per_axis < 2 {
        return Err(invalid(format!("n_per_axis must be >= 2, got {n_per_axis}")));
    }
    let breaks: Vec<f64> = (0..=n_per_axis).map(|i| i as f64 / n_per_axis as f64).collect();
    QGrid::from_breakpoints(&breaks, GridMode::Uniform)
}

/// Tensor grid whose cell edges are quantiles of the half-half mixture of the
/// uniform law and `g`, so spiky alternatives get resolved near zero while the
/// null mass stays covered.
pub fn build_graded_qgrid(n_per_axis: usize, g: &AltDensity) -> Result<QGrid> {
    if n_per_axis < 2 {
        return Err(invalid(format!("n_per_axis must be >= 2, got {n_per_axis}")));
    }
    let mix = |u: f64| 0.5 * (u + g.cdf(u));
    let mut breaks = Vec::with_capacity(n_per_axis + 1);
    breaks.push(0.0);
    for i in 1..n_per_axis {
        let q = i as f64 / n_per_axis as f64;
        let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if mix(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let b = 0.5 * (lo + hi);
        let prev = *breaks.last().unwrap();
        breaks.push(if b > prev { b } else { next_up(prev) });
    }
    breaks.push(1.0);
    QGrid::from_breakpoints(&breaks, GridMode::Graded)
}

fn next_up(x: f64) -> f64 {
    f64::from_bits(x.to_bits() + 1)
}

/// `n_points` sorted uniform triples with equal weights `1/(6 n_points)`.
pub fn build_sampled_qgrid(n_points: usize, seed: u64) -> Result<QGrid> {
    if n_points == 0 {
        return Err(invalid("sampled grid needs at least one point"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let nodes: Vec<[f64; 3]> = (0..n_points)
        .map(|_| {
            let mut t = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            t.sort_by(f64::total_cmp);
            t
        })
        .collect();
    let w = VOL_Q / n_points as f64;
    Ok(QGrid {
        meta: GridMeta {
            mode: GridMode::Sampled,
            n_per_axis: 0,
            n_grid: n_points,
            seed: Some(seed),
        },
        weights: vec![w; n_points],
        nodes,
        cells: None,
    })
}

/// Pairwise summation; the result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 32 {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

/// Sums `f(i)` over `0..n` in fixed-size chunks so the result does not depend
/// on the number of worker threads.
pub(crate) fn chunked_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(n);
            let vals: Vec<f64> = (lo..hi).map(&f).collect();
            pairwise_sum(&vals)
        })
        .collect();
    pairwise_sum(&partials)
}

/// `Σ w_i f(node_i)`. Fails on the first node (in index order) where the
/// integrand is not finite.
pub fn integrate_on_q<F>(grid: &QGrid, integrand: F) -> Result<f64>
where
    F: Fn(&[f64; 3]) -> f64 + Sync,
{
    let bad = grid
        .nodes
        .par_iter()
        .map(|u| (u, integrand(u)))
        .find_first(|(_, v)| !v.is_finite());
    if let Some((u, value)) = bad {
        return Err(Error::NonFiniteIntegrand {
            u1: u[0],
            u2: u[1],
            u3: u[2],
            value,
        });
    }
    Ok(chunked_sum(grid.n_grid(), |i| grid.weights[i] * integrand(&grid.nodes[i])))
}
