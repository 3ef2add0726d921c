//! The blockwise procedure and its plug-in variant.
//!
//! Each block's three p-values are sorted, the solved K=3 rule for that
//! block's level gives a rejection count `R`, and the `R` smallest p-values
//! of the block are rejected. Blocks at the same level share one solve.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::allocation::{uniform_splits, Budget};
use crate::densities::{fit_grenander, grenander_density, GrenanderFit};
use crate::error::{invalid, Error, Result};
use crate::k3solver::{K3Problem, K3Rule, SolveCache, SolverParams};
use crate::quadrature::build_graded_qgrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub members: [String; 3],
}

/// Disjoint blocks of exactly three hypotheses covering all `K = 3B` ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPartition {
    blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn new(blocks: Vec<Block>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut block_ids = HashSet::new();
        for b in &blocks {
            if !block_ids.insert(b.id.as_str()) {
                return Err(invalid(format!("block id '{}' appears twice", b.id)));
            }
            for m in &b.members {
                if !seen.insert(m.as_str()) {
                    return Err(invalid(format!("hypothesis '{m}' belongs to more than one block")));
                }
            }
        }
        Ok(BlockPartition { blocks })
    }

    /// Consecutive triples `(0,1,2), (3,4,5), ...` with ids `h<k>` and `b<j>`.
    pub fn consecutive(n_blocks: usize) -> Self {
        let blocks = (0..n_blocks)
            .map(|j| Block {
                id: format!("b{j}"),
                members: [0, 1, 2].map(|i| format!("h{}", 3 * j + i)),
            })
            .collect();
        BlockPartition { blocks }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_hypotheses(&self) -> usize {
        3 * self.blocks.len()
    }

    pub fn hypothesis_ids(&self) -> Vec<String> {
        self.blocks.iter().flat_map(|b| b.members.iter().cloned()).collect()
    }

    /// Blocks as index triples into [`hypothesis_ids`](Self::hypothesis_ids).
    pub fn index_triples(&self) -> Vec<[usize; 3]> {
        (0..self.blocks.len()).map(|j| [3 * j, 3 * j + 1, 3 * j + 2]).collect()
    }

    fn position(&self, block_id: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.id == block_id)
    }
}

/// A row of the p-value CSV `hypothesis_id,block_id,p_value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PValueRow {
    pub hypothesis_id: String,
    pub block_id: String,
    pub p_value: f64,
}

/// Parsed p-value file: values by hypothesis id plus the block partition in
/// order of first appearance.
#[derive(Debug, Clone)]
pub struct PValueInput {
    pub pvalues: BTreeMap<String, f64>,
    pub partition: BlockPartition,
}

impl PValueInput {
    /// P-values in partition order.
    pub fn ordered(&self) -> Vec<f64> {
        self.partition.hypothesis_ids().iter().map(|h| self.pvalues[h]).collect()
    }
}

pub fn read_pvalue_csv<R: Read>(reader: R) -> Result<PValueInput> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut pvalues = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    let mut members: HashMap<String, Vec<String>> = HashMap::new();
    for (i, rec) in rdr.deserialize::<PValueRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = rec.map_err(|e| Error::Input {
            context: format!("line {line}"),
            message: e.to_string(),
        })?;
        if !(0.0..=1.0).contains(&row.p_value) {
            return Err(Error::Input {
                context: format!("line {line}"),
                message: format!("p_value {} outside [0,1]", row.p_value),
            });
        }
        if pvalues.insert(row.hypothesis_id.clone(), row.p_value).is_some() {
            return Err(Error::Input {
                context: format!("line {line}"),
                message: format!("duplicate hypothesis_id '{}'", row.hypothesis_id),
            });
        }
        let entry = members.entry(row.block_id.clone()).or_insert_with(|| {
            order.push(row.block_id.clone());
            Vec::new()
        });
        entry.push(row.hypothesis_id);
    }
    let mut blocks = Vec::with_capacity(order.len());
    for id in order {
        let m = &members[&id];
        if m.len() != 3 {
            return Err(Error::Input {
                context: format!("block '{id}'"),
                message: format!("has {} members, expected 3", m.len()),
            });
        }
        blocks.push(Block {
            id,
            members: [m[0].clone(), m[1].clone(), m[2].clone()],
        });
    }
    Ok(PValueInput {
        pvalues,
        partition: BlockPartition::new(blocks)?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RejectionSet {
    pub rejected: Vec<String>,
    pub per_block: BTreeMap<String, usize>,
}

/// Sorted `(p, id)` triple with ties broken by id.
fn sort_block(ids: &[String; 3], p: [f64; 3]) -> [(f64, &str); 3] {
    let mut t = [(p[0], ids[0].as_str()), (p[1], ids[1].as_str()), (p[2], ids[2].as_str())];
    t.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
    t
}

fn lookup(pvalues: &BTreeMap<String, f64>, id: &str) -> Result<f64> {
    let p = *pvalues
        .get(id)
        .ok_or_else(|| invalid(format!("no p-value for hypothesis '{id}'")))?;
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p-value for '{id}' outside [0,1]: {p}")));
    }
    Ok(p)
}

/// Blockwise procedure at per-block `levels` (aligned with the partition).
pub fn boost_run(
    pvalues: &BTreeMap<String, f64>,
    partition: &BlockPartition,
    levels: &[f64],
    cache: &SolveCache,
) -> Result<RejectionSet> {
    let all: Vec<usize> = (0..partition.n_blocks()).collect();
    boost_run_on(pvalues, partition, &all, levels, cache, false)
}

fn boost_run_on(
    pvalues: &BTreeMap<String, f64>,
    partition: &BlockPartition,
    which: &[usize],
    levels: &[f64],
    cache: &SolveCache,
    feasible_ok: bool,
) -> Result<RejectionSet> {
    if levels.len() != which.len() {
        return Err(invalid(format!(
            "{} levels given for {} blocks",
            levels.len(),
            which.len()
        )));
    }
    if let Some(bad) = levels.iter().find(|l| !(**l > 0.0 && **l < 1.0)) {
        return Err(invalid(format!("block levels must lie in (0,1), got {bad}")));
    }
    let known: HashSet<&str> = partition.blocks().iter().flat_map(|b| b.members.iter().map(String::as_str)).collect();
    if let Some(extra) = pvalues.keys().find(|k| !known.contains(k.as_str())) {
        log::warn!("hypothesis '{extra}' is not in any block and is ignored");
    }
    let mut out = RejectionSet::default();
    for (&j, &level) in which.iter().zip(levels) {
        let block = &partition.blocks()[j];
        let wrap = |e: Error| Error::Block {
            block: block.id.clone(),
            source: Box::new(e),
        };
        let p = [
            lookup(pvalues, &block.members[0]).map_err(wrap)?,
            lookup(pvalues, &block.members[1]).map_err(wrap)?,
            lookup(pvalues, &block.members[2]).map_err(wrap)?,
        ];
        let rule = if feasible_ok {
            cache.feasible_rule(level).map_err(wrap)?.0
        } else {
            cache.rule(level).map_err(wrap)?
        };
        let sorted = sort_block(&block.members, p);
        let r = rule.rejections(&[sorted[0].0, sorted[1].0, sorted[2].0]);
        out.rejected.extend(sorted[..r].iter().map(|(_, id)| id.to_string()));
        out.per_block.insert(block.id.clone(), r);
    }
    Ok(out)
}

/// Index-based blockwise decisions; `rules[j]` decides `blocks[j]`. Ties are
/// broken by index.
pub fn boost_mask(p: &[f64], blocks: &[[usize; 3]], rules: &[&K3Rule]) -> Vec<bool> {
    let mut out = vec![false; p.len()];
    for (b, rule) in blocks.iter().zip(rules) {
        let mut t = *b;
        t.sort_by(|&x, &y| p[x].total_cmp(&p[y]).then(x.cmp(&y)));
        let r = rule.rejections(&[p[t[0]], p[t[1]], p[t[2]]]);
        for &i in &t[..r] {
            out[i] = true;
        }
    }
    out
}

/// `alpha - L3 * B_T * (log n / n)^(1/3)`.
pub fn deflate_alpha(alpha: f64, l3: f64, b_t: usize, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(invalid(format!("deflation needs n >= 2, got {n}")));
    }
    if !(l3 >= 0.0) {
        return Err(invalid(format!("L3 must be non-negative, got {l3}")));
    }
    let nf = n as f64;
    let out = alpha - l3 * b_t as f64 * (nf.ln() / nf).cbrt();
    if out <= 0.0 {
        return Err(invalid(format!(
            "deflated level {out} is not positive; use a larger estimation fold or a smaller L3"
        )));
    }
    Ok(out)
}

// ── Plug-in ──────────────────────────────────────────────────────────────────

/// Split of the blocks into an estimation fold `E` and a testing fold `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub estimation: Vec<String>,
    pub testing: Vec<String>,
}

impl FoldSplit {
    pub fn new(estimation: Vec<String>, testing: Vec<String>) -> Result<Self> {
        if testing.is_empty() {
            return Err(invalid("testing fold must contain at least one block"));
        }
        let e: HashSet<&String> = estimation.iter().collect();
        if let Some(both) = testing.iter().find(|t| e.contains(t)) {
            return Err(invalid(format!("block '{both}' is in both folds")));
        }
        Ok(FoldSplit { estimation, testing })
    }

    /// Even-indexed blocks estimate, odd-indexed blocks are tested.
    pub fn alternating(partition: &BlockPartition) -> Result<Self> {
        let (mut e, mut t) = (Vec::new(), Vec::new());
        for (j, b) in partition.blocks().iter().enumerate() {
            if j % 2 == 0 {
                e.push(b.id.clone());
            } else {
                t.push(b.id.clone());
            }
        }
        FoldSplit::new(e, t)
    }

    pub fn swapped(&self) -> Result<Self> {
        FoldSplit::new(self.testing.clone(), self.estimation.clone())
    }

    fn check(&self, partition: &BlockPartition) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.estimation.iter().chain(&self.testing) {
            if partition.position(id).is_none() {
                return Err(invalid(format!("fold names unknown block '{id}'")));
            }
            if !seen.insert(id) {
                return Err(invalid(format!("block '{id}' listed twice in the fold split")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Grenander,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginConfig {
    pub alpha: f64,
    pub budget: Budget,
    pub estimator: Estimator,
    /// Deflation constant; `None` runs at the nominal level.
    pub deflate_l3: Option<f64>,
    pub n_per_axis: usize,
    pub params: SolverParams,
}

impl PluginConfig {
    pub fn new(alpha: f64) -> Self {
        PluginConfig {
            alpha,
            budget: Budget::Bonferroni,
            estimator: Estimator::Grenander,
            deflate_l3: None,
            n_per_axis: crate::quadrature::DEFAULT_N_PER_AXIS,
            params: SolverParams::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PluginOutcome {
    pub rejections: RejectionSet,
    /// Per-block level used on the testing fold.
    pub level: f64,
    /// Total level after optional deflation.
    pub alpha_used: f64,
    pub ghat: GrenanderFit,
}

/// Fits `ĝ` on the pooled estimation-fold p-values and runs the blockwise
/// procedure on the testing fold only.
pub fn plugin_boost_run(
    pvalues: &BTreeMap<String, f64>,
    partition: &BlockPartition,
    fold: &FoldSplit,
    cfg: &PluginConfig,
) -> Result<PluginOutcome> {
    fold.check(partition)?;
    let mut sample = Vec::with_capacity(3 * fold.estimation.len());
    for id in &fold.estimation {
        let b = &partition.blocks()[partition.position(id).unwrap()];
        for m in &b.members {
            sample.push(lookup(pvalues, m)?);
        }
    }
    if sample.len() < 3 {
        return Err(invalid("estimation fold has fewer than 3 p-values"));
    }
    let Estimator::Grenander = cfg.estimator;
    let fit = fit_grenander(&sample)?;
    let ghat = Arc::new(grenander_density(fit.clone())?);
    let b_t = fold.testing.len();
    let alpha_used = match cfg.deflate_l3 {
        Some(l3) => deflate_alpha(cfg.alpha, l3, b_t, sample.len())?,
        None => cfg.alpha,
    };
    let (bonf, sidak) = uniform_splits(alpha_used, b_t)?;
    let level = match cfg.budget {
        Budget::Bonferroni => bonf,
        Budget::Sidak => sidak,
    };
    let grid = Arc::new(build_graded_qgrid(cfg.n_per_axis, &ghat)?);
    let cache = SolveCache::new(K3Problem::new(ghat, grid)?, cfg.params);
    let which: Vec<usize> = fold
        .testing
        .iter()
        .map(|id| partition.position(id).unwrap())
        .collect();
    let rejections = boost_run_on(pvalues, partition, &which, &vec![level; b_t], &cache, true)?;
    Ok(PluginOutcome {
        rejections,
        level,
        alpha_used,
        ghat: fit,
    })
}

/// Runs the plug-in procedure at `alpha/2` on `(E, T)` and again with the
/// folds swapped, and returns the union of both rejection sets.
pub fn plugin_boost_swap(
    pvalues: &BTreeMap<String, f64>,
    partition: &BlockPartition,
    fold: &FoldSplit,
    cfg: &PluginConfig,
) -> Result<RejectionSet> {
    let half = PluginConfig {
        alpha: cfg.alpha / 2.0,
        ..cfg.clone()
    };
    let a = plugin_boost_run(pvalues, partition, fold, &half)?;
    let b = plugin_boost_run(pvalues, partition, &fold.swapped()?, &half)?;
    let mut out = a.rejections;
    out.rejected.extend(b.rejections.rejected);
    out.per_block.extend(b.rejections.per_block);
    Ok(out)
}
