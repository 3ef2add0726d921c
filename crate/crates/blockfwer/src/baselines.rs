//! Comparison procedures.
//!
//! Every procedure maps a p-value vector to a rejection mask aligned with the
//! input. Block and tree methods take the partition as index triples.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Floor applied to p-values entering log-based statistics.
pub const P_FLOOR: f64 = 1e-300;

pub const MIN_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Bonferroni,
    SidakSs,
    Holm,
    Hochberg,
    Hommel,
    SidakSd,
    BlockHolm,
    BlockHochberg,
    ClosedFisher,
    Meinshausen,
    HartogEvalue,
    MinpResampling,
    BhFdr,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::Bonferroni,
        Method::SidakSs,
        Method::Holm,
        Method::Hochberg,
        Method::Hommel,
        Method::SidakSd,
        Method::BlockHolm,
        Method::BlockHochberg,
        Method::ClosedFisher,
        Method::Meinshausen,
        Method::HartogEvalue,
        Method::MinpResampling,
        Method::BhFdr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Bonferroni => "bonferroni",
            Method::SidakSs => "sidak_ss",
            Method::Holm => "holm",
            Method::Hochberg => "hochberg",
            Method::Hommel => "hommel",
            Method::SidakSd => "sidak_sd",
            Method::BlockHolm => "block_holm",
            Method::BlockHochberg => "block_hochberg",
            Method::ClosedFisher => "closed_fisher",
            Method::Meinshausen => "meinshausen",
            Method::HartogEvalue => "hartog_evalue",
            Method::MinpResampling => "minp_resampling",
            Method::BhFdr => "bh_fdr",
        }
    }

    pub fn is_stepwise(&self) -> bool {
        matches!(
            self,
            Method::Bonferroni | Method::SidakSs | Method::Holm | Method::Hochberg | Method::Hommel | Method::SidakSd
        )
    }

    pub fn needs_partition(&self) -> bool {
        matches!(
            self,
            Method::BlockHolm | Method::BlockHochberg | Method::Meinshausen | Method::HartogEvalue
        )
    }

    /// False only for the FDR reference.
    pub fn controls_fwer(&self) -> bool {
        *self != Method::BhFdr
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| invalid(format!("unknown method '{s}'")))
    }
}

fn check_pvalues(p: &[f64]) -> Result<()> {
    match p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        Some(bad) => Err(invalid(format!("p-values must lie in [0,1], got {bad}"))),
        None => Ok(()),
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("alpha must lie in (0,1), got {alpha}")))
    }
}

fn ascending(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
    idx
}

/// `1 - (1 - alpha)^(1/m)` without cancellation.
pub fn sidak_level(alpha: f64, m: usize) -> f64 {
    -((-alpha).ln_1p() / m as f64).exp_m1()
}

/// Simes combination `min_k m p_(k) / k`.
pub fn simes_p(p: &[f64]) -> f64 {
    let mut s: Vec<f64> = p.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(k, &x)| m * x / (k + 1) as f64)
        .fold(f64::INFINITY, f64::min)
        .min(1.0)
}

// ── Stepwise ─────────────────────────────────────────────────────────────────

fn step_down(p: &[f64], thresholds: impl Fn(usize) -> f64) -> Vec<bool> {
    let mut out = vec![false; p.len()];
    for (k, &i) in ascending(p).iter().enumerate() {
        if p[i] <= thresholds(k) {
            out[i] = true;
        } else {
            break;
        }
    }
    out
}

fn step_up(p: &[f64], thresholds: impl Fn(usize) -> f64) -> Vec<bool> {
    let order = ascending(p);
    let mut out = vec![false; p.len()];
    if let Some(last) = (0..order.len()).rev().find(|&k| p[order[k]] <= thresholds(k)) {
        for &i in &order[..=last] {
            out[i] = true;
        }
    }
    out
}

/// Hommel adjusted p-values.
pub fn hommel_adjusted(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    if n == 0 {
        return Vec::new();
    }
    let order = ascending(p);
    let s: Vec<f64> = order.iter().map(|&i| p[i]).collect();
    let init = (0..n)
        .map(|i| n as f64 * s[i] / (i + 1) as f64)
        .fold(f64::INFINITY, f64::min);
    let mut q = vec![init; n];
    let mut pa = vec![init; n];
    for m in (2..n).rev() {
        // i1 = 0..n-m+1, i2 = n-m+1..n
        let split = n - m + 1;
        let q1 = (split..n)
            .zip(2..=m)
            .map(|(i, k)| m as f64 * s[i] / k as f64)
            .fold(f64::INFINITY, f64::min);
        for i in 0..split {
            q[i] = (m as f64 * s[i]).min(q1);
        }
        for i in split..n {
            q[i] = q[split - 1];
        }
        for i in 0..n {
            pa[i] = pa[i].max(q[i]);
        }
    }
    let mut out = vec![0.0; n];
    for (k, &i) in order.iter().enumerate() {
        out[i] = pa[k].max(s[k]).min(1.0);
    }
    out
}

/// Single-step and stepwise FWER procedures.
pub fn stepwise(method: Method, p: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_pvalues(p)?;
    check_alpha(alpha)?;
    let m = p.len();
    if m == 0 {
        return Ok(Vec::new());
    }
    let out = match method {
        Method::Bonferroni => p.iter().map(|&x| x <= alpha / m as f64).collect(),
        Method::SidakSs => {
            let c = sidak_level(alpha, m);
            p.iter().map(|&x| x <= c).collect()
        }
        Method::Holm => step_down(p, |k| alpha / (m - k) as f64),
        Method::Hochberg => step_up(p, |k| alpha / (m - k) as f64),
        Method::SidakSd => step_down(p, |k| sidak_level(alpha, m - k)),
        Method::Hommel => hommel_adjusted(p).iter().map(|&a| a <= alpha).collect(),
        other => return Err(invalid(format!("{other} is not a stepwise method"))),
    };
    Ok(out)
}

// ── Block gatekeeping ────────────────────────────────────────────────────────

fn check_blocks(blocks: &[[usize; 3]], k: usize) -> Result<()> {
    let mut seen = vec![false; k];
    for b in blocks {
        for &i in b {
            if i >= k || seen[i] {
                return Err(invalid(format!("partition index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
    }
    if seen.iter().any(|s| !s) {
        return Err(invalid("partition does not cover every hypothesis"));
    }
    Ok(())
}

/// Simes-combine each block and run Holm or Hochberg across the block
/// p-values as a gate. Inside a block that passes the gate, members are
/// tested by the same step rule at level `alpha / B`, so each block spends at
/// most `alpha / B` of false-rejection probability.
pub fn block_gatekeeping(method: Method, p: &[f64], blocks: &[[usize; 3]], alpha: f64) -> Result<Vec<bool>> {
    check_pvalues(p)?;
    check_alpha(alpha)?;
    check_blocks(blocks, p.len())?;
    let block_p: Vec<f64> = blocks.iter().map(|b| simes_p(&[p[b[0]], p[b[1]], p[b[2]]])).collect();
    let nb = blocks.len();
    let (gate, inner) = match method {
        Method::BlockHolm => (step_down(&block_p, |k| alpha / (nb - k) as f64), Method::Holm),
        Method::BlockHochberg => (step_up(&block_p, |k| alpha / (nb - k) as f64), Method::Hochberg),
        other => return Err(invalid(format!("{other} is not a block gatekeeping method"))),
    };
    let level = alpha / nb as f64;
    let mut out = vec![false; p.len()];
    for (b, open) in blocks.iter().zip(gate) {
        if open {
            let within = stepwise(inner, &[p[b[0]], p[b[1]], p[b[2]]], level)?;
            for (&i, r) in b.iter().zip(within) {
                out[i] = r;
            }
        }
    }
    Ok(out)
}

// ── Closed Fisher ────────────────────────────────────────────────────────────

/// Upper tail of the chi-square law with `2 s` degrees of freedom.
pub fn chi2_sf_even(x: f64, s: usize) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    let h = 0.5 * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for j in 1..s {
        term *= h / j as f64;
        sum += term;
    }
    ((-h).exp() * sum).min(1.0)
}

/// Fisher combination p-value of a set of p-values.
pub fn fisher_p(p: &[f64]) -> f64 {
    let stat: f64 = p.iter().map(|&x| -2.0 * x.max(P_FLOOR).ln()).sum();
    chi2_sf_even(stat, p.len())
}

fn clamp_zeros(p: &[f64]) -> Vec<f64> {
    if p.contains(&0.0) {
        log::warn!("p-values equal to 0 clamped to {P_FLOOR:e} for log-based statistics");
    }
    p.iter().map(|&x| x.max(P_FLOOR)).collect()
}

/// Closed testing with Fisher local tests. `H_i` is rejected when every
/// subset containing `i` is rejected; for each subset size the least
/// significant such subset pairs `i` with the largest remaining p-values.
pub fn closed_fisher(p: &[f64], alpha: f64) -> Result<Vec<bool>> {
    check_pvalues(p)?;
    check_alpha(alpha)?;
    let p = clamp_zeros(p);
    let k = p.len();
    let logs: Vec<f64> = p.iter().map(|x| -2.0 * x.ln()).collect();
    let mut desc: Vec<usize> = (0..k).collect();
    desc.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    let out = (0..k)
        .map(|i| {
            let mut stat = logs[i];
            // the singleton's Fisher p-value is p itself; skip the exp/ln roundtrip
            if p[i] > alpha {
                return false;
            }
            let mut s = 1;
            for &j in desc.iter().filter(|&&j| j != i) {
                stat += logs[j];
                s += 1;
                if chi2_sf_even(stat, s) > alpha {
                    return false;
                }
            }
            true
        })
        .collect();
    Ok(out)
}

// ── Tree closure ─────────────────────────────────────────────────────────────

/// Hierarchical testing on the root / block / leaf tree. Meinshausen uses a
/// Simes local test at level `alpha |v| / K`; the e-value variant rejects node
/// `v` when `Σ_{i in v} 0.5 p_i^(-1/2) >= |v| / alpha`. A node is tested only
/// if its parent was rejected.
pub fn tree_closure(method: Method, p: &[f64], blocks: &[[usize; 3]], alpha: f64) -> Result<Vec<bool>> {
    check_pvalues(p)?;
    check_alpha(alpha)?;
    check_blocks(blocks, p.len())?;
    let k = p.len();
    let mut out = vec![false; k];
    if k == 0 {
        return Ok(out);
    }
    match method {
        Method::Meinshausen => {
            let kf = k as f64;
            if simes_p(p) > alpha {
                return Ok(out);
            }
            for b in blocks {
                let v = [p[b[0]], p[b[1]], p[b[2]]];
                if simes_p(&v) > alpha * 3.0 / kf {
                    continue;
                }
                for &i in b {
                    out[i] = p[i] <= alpha / kf;
                }
            }
        }
        Method::HartogEvalue => {
            let e: Vec<f64> = p.iter().map(|&x| evalue(x)).collect();
            if e.iter().sum::<f64>() < k as f64 / alpha {
                return Ok(out);
            }
            for b in blocks {
                if b.iter().map(|&i| e[i]).sum::<f64>() < 3.0 / alpha {
                    continue;
                }
                for &i in b {
                    out[i] = e[i] >= 1.0 / alpha;
                }
            }
        }
        other => return Err(invalid(format!("{other} is not a tree method"))),
    }
    Ok(out)
}

/// Calibrator `e = 0.5 p^(-1/2)`.
pub fn evalue(p: f64) -> f64 {
    0.5 / p.max(P_FLOOR).sqrt()
}

/// Leaf cutoff of the e-value tree: `e >= 1/alpha` iff `p <= (alpha/2)^2`.
pub fn hartog_leaf_cutoff(alpha: f64) -> f64 {
    (0.5 * alpha).powi(2)
}

// ── Min-P resampling ─────────────────────────────────────────────────────────

/// Empirical `alpha`-quantile of the minimum p-value over `n_resamples`
/// complete-null vectors drawn by `null_sampler`.
pub fn minp_cutoff<F>(alpha: f64, mut null_sampler: F, n_resamples: usize, seed: u64) -> Result<f64>
where
    F: FnMut(&mut ChaCha20Rng) -> Vec<f64>,
{
    check_alpha(alpha)?;
    if n_resamples < MIN_RESAMPLES {
        return Err(invalid(format!(
            "min-P resampling needs at least {MIN_RESAMPLES} resamples, got {n_resamples}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut mins: Vec<f64> = (0..n_resamples)
        .map(|_| null_sampler(&mut rng).into_iter().fold(1.0, f64::min))
        .collect();
    mins.sort_by(f64::total_cmp);
    let k = (alpha * n_resamples as f64).floor() as usize;
    Ok(if k == 0 { 0.0 } else { mins[k - 1] })
}

/// Single-step min-P: reject `p_i <= c*`.
pub fn minp_resampling<F>(p: &[f64], alpha: f64, null_sampler: F, n_resamples: usize, seed: u64) -> Result<Vec<bool>>
where
    F: FnMut(&mut ChaCha20Rng) -> Vec<f64>,
{
    check_pvalues(p)?;
    let c = minp_cutoff(alpha, null_sampler, n_resamples, seed)?;
    Ok(p.iter().map(|&x| x <= c).collect())
}

// ── FDR reference ────────────────────────────────────────────────────────────

/// Benjamini–Hochberg step-up at level `q`.
pub fn bh_fdr(p: &[f64], q: f64) -> Result<Vec<bool>> {
    check_pvalues(p)?;
    check_alpha(q)?;
    let m = p.len();
    Ok(step_up(p, |k| (k + 1) as f64 * q / m as f64))
}

/// Runs any method that needs no null sampler. `blocks` is required for the
/// block and tree methods.
pub fn run(method: Method, p: &[f64], blocks: Option<&[[usize; 3]]>, alpha: f64) -> Result<Vec<bool>> {
    let need = || blocks.ok_or_else(|| invalid(format!("{method} requires a block partition")));
    match method {
        m if m.is_stepwise() => stepwise(m, p, alpha),
        Method::BlockHolm | Method::BlockHochberg => block_gatekeeping(method, p, need()?, alpha),
        Method::Meinshausen | Method::HartogEvalue => tree_closure(method, p, need()?, alpha),
        Method::ClosedFisher => closed_fisher(p, alpha),
        Method::BhFdr => bh_fdr(p, alpha),
        Method::MinpResampling => Err(invalid("minp_resampling needs a null sampler")),
        _ => unreachable!(),
    }
}
