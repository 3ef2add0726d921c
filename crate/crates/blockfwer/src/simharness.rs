//! Seeded Monte-Carlo engine.
//!
//! Every replicate draws from its own ChaCha20 stream keyed by
//! `(seed, replicate_index)`. Latent Gaussians carry the dependence; a null
//! coordinate maps to `p = Φ(X)` and an alternative coordinate to
//! `p = G⁻¹(Φ(X))`, so marginals are exact and dependence is a Gaussian
//! copula. Tallies are integer counts, so reductions do not depend on
//! scheduling.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{uniform_splits, Budget};
use crate::baselines::{self, Method};
use crate::boost::boost_mask;
use crate::densities::{norm_cdf, AltDensity, DensitySpec};
use crate::error::{invalid, Error, Result};
use crate::k3solver::{K3Problem, K3Rule, SolveCache, SolverParams};
use crate::quadrature::{build_graded_qgrid, DEFAULT_N_PER_AXIS};

pub const MIN_REPLICATES: usize = 100;
pub const DEFAULT_MINP_RESAMPLES: usize = 10_000;

/// Stream used for placement draws that are fixed across replicates.
const PLACEMENT_STREAM: u64 = u64::MAX;
/// Seed offset for the min-P null resamples.
const MINP_SEED_OFFSET: u64 = 0x6d69_6e70;
const CHUNK: usize = 256;

/// BOOST or a baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SimMethod {
    Boost,
    Baseline(Method),
}

impl fmt::Display for SimMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimMethod::Boost => f.write_str("boost"),
            SimMethod::Baseline(m) => f.write_str(m.name()),
        }
    }
}

impl FromStr for SimMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "boost" {
            Ok(SimMethod::Boost)
        } else {
            s.parse().map(SimMethod::Baseline)
        }
    }
}

impl TryFrom<String> for SimMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SimMethod> for String {
    fn from(m: SimMethod) -> String {
        m.to_string()
    }
}

impl SimMethod {
    /// BOOST followed by every baseline.
    pub fn all() -> Vec<SimMethod> {
        std::iter::once(SimMethod::Boost)
            .chain(Method::ALL.iter().map(|m| SimMethod::Baseline(*m)))
            .collect()
    }

    pub fn controls_fwer(&self) -> bool {
        match self {
            SimMethod::Boost => true,
            SimMethod::Baseline(m) => m.controls_fwer(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Configuration {
    CompleteNull,
    /// The first `ell` hypotheses are alternatives.
    HEll { ell: usize },
    FullAlternative,
    /// The first `active_blocks` blocks (default `B/2`) are fully alternative.
    SparseBlocks {
        #[serde(default)]
        active_blocks: Option<usize>,
    },
    /// `round(fraction * K)` alternatives at positions fixed by the seed.
    Scattered { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dependence {
    Independent,
    /// `X_k = sqrt(rho) Z0 + sqrt(1-rho) Z_k` for every `k`.
    Equicorrelated { rho: f64 },
    /// `X_k = l_b Z0 + sqrt(1-l_b^2) Z_k` with block-constant loadings `l_b`
    /// linearly spaced around `mean_loading`.
    OneFactor { mean_loading: f64 },
}

fn default_independent() -> Dependence {
    Dependence::Independent
}

fn default_budget() -> Budget {
    Budget::Bonferroni
}

fn default_n_per_axis() -> usize {
    DEFAULT_N_PER_AXIS
}

fn default_minp() -> usize {
    DEFAULT_MINP_RESAMPLES
}

fn default_methods() -> Vec<SimMethod> {
    SimMethod::all()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub family: DensitySpec,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub alpha: f64,
    #[serde(default = "default_budget")]
    pub budget: Budget,
    pub configuration: Configuration,
    #[serde(default = "default_independent")]
    pub dependence: Dependence,
    pub n_rep: usize,
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<SimMethod>,
    #[serde(default = "default_n_per_axis")]
    pub n_per_axis: usize,
    #[serde(default = "default_minp")]
    pub minp_resamples: usize,
    #[serde(default)]
    pub solver: SolverParams,
}

impl SimConfig {
    /// Independent full-alternative config with every method.
    pub fn new(family: DensitySpec, b: usize, alpha: f64, n_rep: usize, seed: u64) -> Self {
        SimConfig {
            family,
            k: 3 * b,
            b,
            alpha,
            budget: Budget::Bonferroni,
            configuration: Configuration::FullAlternative,
            dependence: Dependence::Independent,
            n_rep,
            seed,
            methods: SimMethod::all(),
            n_per_axis: DEFAULT_N_PER_AXIS,
            minp_resamples: DEFAULT_MINP_RESAMPLES,
            solver: SolverParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.b == 0 || self.k != 3 * self.b {
            return Err(invalid(format!("need K = 3B with B >= 1, got K={} B={}", self.k, self.b)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid(format!("alpha must lie in (0,1), got {}", self.alpha)));
        }
        if self.n_rep < MIN_REPLICATES {
            return Err(invalid(format!(
                "n_rep must be at least {MIN_REPLICATES}, got {}",
                self.n_rep
            )));
        }
        if self.methods.is_empty() {
            return Err(invalid("no methods requested"));
        }
        match self.configuration {
            Configuration::HEll { ell } if ell > self.k => {
                return Err(invalid(format!("ell={ell} exceeds K={}", self.k)))
            }
            Configuration::SparseBlocks { active_blocks: Some(a) } if a > self.b => {
                return Err(invalid(format!("active_blocks={a} exceeds B={}", self.b)))
            }
            Configuration::Scattered { fraction } if !(fraction > 0.0 && fraction <= 1.0) => {
                return Err(invalid(format!("fraction must lie in (0,1], got {fraction}")))
            }
            _ => {}
        }
        match self.dependence {
            Dependence::Equicorrelated { rho } if !(0.0..1.0).contains(&rho) => {
                Err(invalid(format!("rho must lie in [0,1), got {rho}")))
            }
            Dependence::OneFactor { mean_loading } if !(0.0..1.0).contains(&mean_loading) => {
                Err(invalid(format!("mean_loading must lie in [0,1), got {mean_loading}")))
            }
            _ => self.solver.validate(),
        }
    }

    fn replicate_rng(&self, replicate: u64) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::seed_from_u64(self.seed);
        rng.set_stream(replicate);
        rng
    }
}

/// Alternative labels for a configuration.
pub fn alternative_labels(cfg: &SimConfig) -> Vec<bool> {
    let k = cfg.k;
    match cfg.configuration {
        Configuration::CompleteNull => vec![false; k],
        Configuration::FullAlternative => vec![true; k],
        Configuration::HEll { ell } => (0..k).map(|i| i < ell).collect(),
        Configuration::SparseBlocks { active_blocks } => {
            let a = active_blocks.unwrap_or(cfg.b / 2);
            (0..k).map(|i| i / 3 < a).collect()
        }
        Configuration::Scattered { fraction } => {
            let n = ((fraction * k as f64).round() as usize).clamp(1, k);
            let mut rng = cfg.replicate_rng(PLACEMENT_STREAM);
            let mut out = vec![false; k];
            for i in rand::seq::index::sample(&mut rng, k, n) {
                out[i] = true;
            }
            out
        }
    }
}

/// Per-hypothesis latent loading on the common factor.
pub fn factor_loadings(cfg: &SimConfig) -> Vec<f64> {
    let per_block: Vec<f64> = match cfg.dependence {
        Dependence::Independent => vec![0.0; cfg.b],
        Dependence::Equicorrelated { rho } => vec![rho.sqrt(); cfg.b],
        Dependence::OneFactor { mean_loading: m } => {
            let half = (0.5 * m).min(0.5 * (1.0 - m));
            if cfg.b == 1 {
                vec![m]
            } else {
                (0..cfg.b)
                    .map(|j| m - half + 2.0 * half * j as f64 / (cfg.b - 1) as f64)
                    .collect()
            }
        }
    };
    per_block.iter().flat_map(|&l| [l, l, l]).collect()
}

/// One replicate: p-values and alternative labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub p: Vec<f64>,
    pub is_alt: Vec<bool>,
}

/// Draws replicates for one config.
#[derive(Debug, Clone)]
pub struct Dgp {
    cfg: SimConfig,
    labels: Vec<bool>,
    loadings: Vec<f64>,
    alt: Option<AltDensity>,
}

impl Dgp {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        let labels = alternative_labels(cfg);
        let alt = match cfg.family {
            // theta = 0 is the null itself
            DensitySpec::Truncnorm { theta: 0.0, .. } => None,
            _ if labels.iter().any(|&a| a) => Some(AltDensity::from_spec(&cfg.family)?),
            _ => None,
        };
        Ok(Dgp {
            cfg: cfg.clone(),
            loadings: factor_loadings(cfg),
            labels,
            alt,
        })
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    fn latent(&self, rng: &mut ChaCha20Rng) -> Vec<f64> {
        let z0: f64 = rng.sample(StandardNormal);
        self.loadings
            .iter()
            .map(|&l| {
                let z: f64 = rng.sample(StandardNormal);
                l * z0 + (1.0 - l * l).sqrt() * z
            })
            .collect()
    }

    fn draw(&self, rng: &mut ChaCha20Rng, complete_null: bool) -> Vec<f64> {
        self.latent(rng)
            .into_iter()
            .zip(&self.labels)
            .map(|(x, &alt)| {
                let v = norm_cdf(x);
                match &self.alt {
                    Some(g) if alt && !complete_null => g.draw(v),
                    _ => v,
                }
            })
            .collect()
    }

    pub fn sample(&self, replicate: u64) -> Sample {
        let mut rng = self.cfg.replicate_rng(replicate);
        Sample {
            p: self.draw(&mut rng, false),
            is_alt: self.labels.clone(),
        }
    }

    /// Complete-null p-values under the same dependence.
    pub fn null_draw(&self, rng: &mut ChaCha20Rng) -> Vec<f64> {
        self.draw(rng, true)
    }
}

/// Sampler of `k` independent uniform p-values, for min-P on real data.
pub fn independent_null(k: usize) -> impl FnMut(&mut ChaCha20Rng) -> Vec<f64> {
    move |rng| (0..k).map(|_| rng.random::<f64>()).collect()
}

pub fn dgp_sample(cfg: &SimConfig, replicate: u64) -> Result<Sample> {
    Ok(Dgp::new(cfg)?.sample(replicate))
}

// ── BOOST solve sharing ──────────────────────────────────────────────────────

/// Solve caches keyed by family, grid size and solver parameters, so sweeps
/// solve each `(density, level)` once.
#[derive(Debug, Default)]
pub struct SolverStore {
    caches: Mutex<HashMap<String, Arc<SolveCache>>>,
}

impl SolverStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cache_for(&self, family: &DensitySpec, n_per_axis: usize, params: &SolverParams) -> Result<Arc<SolveCache>> {
        let key = format!("{}|{n_per_axis}|{params:?}", serde_json::to_string(family)?);
        if let Some(c) = self.caches.lock().unwrap().get(&key) {
            return Ok(c.clone());
        }
        let g = Arc::new(AltDensity::from_spec(family)?);
        let grid = Arc::new(build_graded_qgrid(n_per_axis, &g)?);
        let cache = Arc::new(SolveCache::new(K3Problem::new(g, grid)?, *params));
        Ok(self.caches.lock().unwrap().entry(key).or_insert(cache).clone())
    }
}

/// Per-block BOOST level under the config's budget.
pub fn boost_block_level(cfg: &SimConfig) -> Result<f64> {
    let (bonf, sidak) = uniform_splits(cfg.alpha, cfg.b)?;
    Ok(match cfg.budget {
        Budget::Bonferroni => bonf,
        Budget::Sidak => sidak,
    })
}

// ── Experiment ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodRecord {
    pub method: SimMethod,
    /// Mean over replicates of the fraction of true alternatives rejected.
    pub avg_power: Option<f64>,
    pub any_power: Option<f64>,
    pub all_reject_prob: Option<f64>,
    /// `P(at least one false rejection)` keyed by the number of alternatives.
    pub fwer_by_ell: BTreeMap<usize, f64>,
    pub block_fwer_mean: Option<f64>,
    pub block_fwer_max: Option<f64>,
    pub mc_se_power: Option<f64>,
    pub mc_se_fwer: Option<f64>,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimResult {
    pub config: SimConfig,
    pub n_alternatives: usize,
    pub records: Vec<MethodRecord>,
}

impl SimResult {
    pub fn record(&self, method: SimMethod) -> Option<&MethodRecord> {
        self.records.iter().find(|r| r.method == method)
    }
}

pub fn mc_se(p: f64, n_rep: usize) -> f64 {
    (p * (1.0 - p) / n_rep as f64).max(0.0).sqrt()
}

#[derive(Debug, Clone, Default)]
struct Tally {
    true_rej: u64,
    any_true: u64,
    all_alt: u64,
    any_false: u64,
    block_false: Vec<u64>,
    nanos: u128,
}

impl Tally {
    fn add(&mut self, o: &Tally) {
        self.true_rej += o.true_rej;
        self.any_true += o.any_true;
        self.all_alt += o.all_alt;
        self.any_false += o.any_false;
        if self.block_false.is_empty() {
            self.block_false = vec![0; o.block_false.len()];
        }
        for (a, b) in self.block_false.iter_mut().zip(&o.block_false) {
            *a += b;
        }
        self.nanos += o.nanos;
    }
}

enum Runner {
    Boost(K3Rule),
    MinP(f64),
    Plain(Method),
}

pub fn run_experiment(cfg: &SimConfig) -> Result<SimResult> {
    run_experiment_with(cfg, &SolverStore::new())
}

pub fn run_experiment_with(cfg: &SimConfig, store: &SolverStore) -> Result<SimResult> {
    let dgp = Dgp::new(cfg)?;
    let blocks: Vec<[usize; 3]> = (0..cfg.b).map(|j| [3 * j, 3 * j + 1, 3 * j + 2]).collect();
    let mut runners = Vec::with_capacity(cfg.methods.len());
    for m in &cfg.methods {
        runners.push(match m {
            SimMethod::Boost => {
                let cache = store.cache_for(&cfg.family, cfg.n_per_axis, &cfg.solver)?;
                Runner::Boost(cache.rule(boost_block_level(cfg)?)?)
            }
            SimMethod::Baseline(Method::MinpResampling) => Runner::MinP(baselines::minp_cutoff(
                cfg.alpha,
                |rng| dgp.null_draw(rng),
                cfg.minp_resamples,
                cfg.seed.wrapping_add(MINP_SEED_OFFSET),
            )?),
            SimMethod::Baseline(b) => Runner::Plain(*b),
        });
    }

    let labels = dgp.labels();
    let n_alt = labels.iter().filter(|&&a| a).count();
    let null_blocks: Vec<bool> = blocks.iter().map(|t| t.iter().any(|&i| !labels[i])).collect();

    let one = |r: u64, tallies: &mut [Tally]| -> Result<()> {
        let s = dgp.sample(r);
        for (runner, t) in runners.iter().zip(tallies.iter_mut()) {
            let start = Instant::now();
            let rej = match runner {
                Runner::Boost(rule) => boost_mask(&s.p, &blocks, &vec![rule; blocks.len()]),
                Runner::MinP(c) => s.p.iter().map(|&x| x <= *c).collect(),
                Runner::Plain(m) => baselines::run(*m, &s.p, Some(&blocks), cfg.alpha).map_err(|e| Error::Replicate {
                    replicate: r,
                    seed: cfg.seed,
                    source: Box::new(e),
                })?,
            };
            t.nanos += start.elapsed().as_nanos();
            let tr = rej.iter().zip(labels).filter(|(&x, &a)| x && a).count() as u64;
            let fr = rej.iter().zip(labels).any(|(&x, &a)| x && !a);
            t.true_rej += tr;
            t.any_true += (tr > 0) as u64;
            t.all_alt += (n_alt > 0 && tr == n_alt as u64) as u64;
            t.any_false += fr as u64;
            for (j, b) in blocks.iter().enumerate() {
                t.block_false[j] += b.iter().any(|&i| rej[i] && !labels[i]) as u64;
            }
        }
        Ok(())
    };

    let fresh = || vec![Tally { block_false: vec![0; cfg.b], ..Tally::default() }; runners.len()];
    let n_chunks = cfg.n_rep.div_ceil(CHUNK);
    let partials: Vec<Result<Vec<Tally>>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let mut tallies = fresh();
            for r in c * CHUNK..((c + 1) * CHUNK).min(cfg.n_rep) {
                one(r as u64, &mut tallies)?;
            }
            Ok(tallies)
        })
        .collect();
    let mut total = fresh();
    for part in partials {
        for (a, b) in total.iter_mut().zip(part?) {
            a.add(&b);
        }
    }

    let n = cfg.n_rep as f64;
    let has_null = n_alt < cfg.k;
    let records = cfg
        .methods
        .iter()
        .zip(total)
        .map(|(m, t)| {
            let power = (n_alt > 0).then(|| t.true_rej as f64 / (n * n_alt as f64));
            let fwer = t.any_false as f64 / n;
            let per_block: Vec<f64> = t
                .block_false
                .iter()
                .zip(&null_blocks)
                .filter(|(_, &nb)| nb)
                .map(|(&c, _)| c as f64 / n)
                .collect();
            MethodRecord {
                method: *m,
                avg_power: power,
                any_power: (n_alt > 0).then(|| t.any_true as f64 / n),
                all_reject_prob: (n_alt > 0).then(|| t.all_alt as f64 / n),
                fwer_by_ell: if has_null { BTreeMap::from([(n_alt, fwer)]) } else { BTreeMap::new() },
                block_fwer_mean: has_null.then(|| per_block.iter().sum::<f64>() / per_block.len() as f64),
                block_fwer_max: has_null.then(|| per_block.iter().copied().fold(0.0, f64::max)),
                mc_se_power: power.map(|p| mc_se(p, cfg.n_rep)),
                mc_se_fwer: has_null.then(|| mc_se(fwer, cfg.n_rep)),
                wall_clock_seconds: t.nanos as f64 * 1e-9,
            }
        })
        .collect();
    Ok(SimResult {
        config: cfg.clone(),
        n_alternatives: n_alt,
        records,
    })
}

// ── CSV ──────────────────────────────────────────────────────────────────────

/// One row of the sweep table. Column order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub family: String,
    pub theta: f64,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "B")]
    pub b: usize,
    pub alpha: f64,
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub mc_se: f64,
    pub n_rep: usize,
    pub seed: u64,
}

pub const CSV_COLUMNS: [&str; 11] = [
    "family", "theta", "K", "B", "alpha", "method", "metric", "value", "mc_se", "n_rep", "seed",
];

impl SimResult {
    /// Rows for every metric defined under this configuration. Wall-clock is
    /// left out so tables are reproducible.
    pub fn rows(&self) -> Vec<CsvRow> {
        let c = &self.config;
        let row = |method: &SimMethod, metric: String, value: f64| CsvRow {
            family: c.family.kind_name().to_string(),
            theta: c.family.shape_parameter(),
            k: c.k,
            b: c.b,
            alpha: c.alpha,
            method: method.to_string(),
            metric,
            value,
            mc_se: mc_se(value, c.n_rep),
            n_rep: c.n_rep,
            seed: c.seed,
        };
        let mut out = Vec::new();
        for r in &self.records {
            let m = &r.method;
            for (name, v) in [
                ("avg_power", r.avg_power),
                ("any_power", r.any_power),
                ("all_reject_prob", r.all_reject_prob),
            ] {
                if let Some(v) = v {
                    out.push(row(m, name.to_string(), v));
                }
            }
            for (ell, v) in &r.fwer_by_ell {
                out.push(row(m, format!("fwer_{ell}"), *v));
            }
            if let Some(v) = r.block_fwer_mean {
                out.push(row(m, "block_fwer_mean".to_string(), v));
            }
            if let Some(v) = r.block_fwer_max {
                out.push(row(m, "block_fwer_max".to_string(), v));
            }
        }
        out
    }
}

pub fn write_rows<W: Write>(rows: &[CsvRow], writer: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(CSV_COLUMNS)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: std::io::Read>(reader: R) -> Result<Vec<CsvRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().ne(CSV_COLUMNS) {
        return Err(Error::Input {
            context: "sweep csv".into(),
            message: format!("expected columns {}", CSV_COLUMNS.join(",")),
        });
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

/// Runs configs in order (each one parallel over replicates) and writes all
/// rows. An empty list writes only the header.
pub fn sweep<W: Write>(configs: &[SimConfig], writer: W) -> Result<Vec<SimResult>> {
    let store = SolverStore::new();
    let mut results = Vec::with_capacity(configs.len());
    let mut rows = Vec::new();
    for cfg in configs {
        let res = run_experiment_with(cfg, &store)?;
        rows.extend(res.rows());
        results.push(res);
    }
    write_rows(&rows, writer)?;
    Ok(results)
}

/// Parses either one config object or an array of them.
pub fn parse_configs(json: &str) -> Result<Vec<SimConfig>> {
    let v: serde_json::Value = serde_json::from_str(json)?;
    Ok(if v.is_array() {
        serde_json::from_value(v)?
    } else {
        vec![serde_json::from_value(v)?]
    })
}

// ── Plug-in rate study ───────────────────────────────────────────────────────

/// Settings for the Grenander plug-in rate study on one alternative density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginRateConfig {
    pub family: DensitySpec,
    pub alpha_blk: f64,
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    #[serde(default = "default_n_per_axis")]
    pub n_per_axis: usize,
    #[serde(default)]
    pub solver: SolverParams,
    /// Interior window and resolution for the sup-norm error.
    pub window: [f64; 2],
    pub window_points: usize,
}

impl PluginRateConfig {
    pub fn new(family: DensitySpec, alpha_blk: f64, sizes: Vec<usize>, trials: usize, seed: u64) -> Self {
        PluginRateConfig {
            family,
            alpha_blk,
            sizes,
            trials,
            seed,
            n_per_axis: DEFAULT_N_PER_AXIS,
            solver: SolverParams::default(),
            window: [0.05, 0.95],
            window_points: 200,
        }
    }
}

/// One fitted trial. Powers and FWERs are exact quadrature values of the
/// rules under the true density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PluginTrial {
    pub n: usize,
    pub trial: usize,
    pub sup_norm: f64,
    pub rate: f64,
    pub ratio: f64,
    pub oracle_power: f64,
    pub plugin_power: f64,
    pub gap: f64,
    pub plugin_fwer_max: f64,
    /// False when the fitted rule is a feasible capped iterate.
    pub converged: bool,
}

/// `(log n / n)^(1/3)`.
pub fn grenander_rate(n: usize) -> f64 {
    let n = n as f64;
    (n.ln() / n).cbrt()
}

/// For each size and trial: draw `n` alternative p-values, fit the Grenander
/// estimator, solve the block rule for the fit and score it under the true
/// density. Trials run in parallel; output order is `(n, trial)`.
pub fn plugin_rate_study(cfg: &PluginRateConfig) -> Result<Vec<PluginTrial>> {
    if cfg.trials == 0 || cfg.sizes.is_empty() {
        return Err(invalid("plug-in study needs at least one size and one trial"));
    }
    if cfg.sizes.iter().any(|&n| n < 3) {
        return Err(invalid("every fit size must be at least 3"));
    }
    let g = Arc::new(AltDensity::from_spec(&cfg.family)?);
    let grid = Arc::new(build_graded_qgrid(cfg.n_per_axis, &g)?);
    let truth = K3Problem::new(g.clone(), grid)?;
    let oracle = SolveCache::new(truth.clone(), cfg.solver);
    let oracle_power = oracle.pi3(cfg.alpha_blk)?;
    let jobs: Vec<(usize, usize)> = cfg
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(si, _)| (0..cfg.trials).map(move |t| (si, t)))
        .collect();
    jobs.par_iter()
        .map(|&(si, t)| {
            let n = cfg.sizes[si];
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            rng.set_stream((si * cfg.trials + t) as u64);
            let sample: Vec<f64> = (0..n).map(|_| g.draw(rng.random::<f64>())).collect();
            let fit = crate::densities::fit_grenander(&sample)?;
            let ghat = Arc::new(crate::densities::grenander_density(fit)?);
            let sup = crate::densities::sup_norm_distance(&g, &ghat, cfg.window[0], cfg.window[1], cfg.window_points);
            let hat_grid = Arc::new(build_graded_qgrid(cfg.n_per_axis, &ghat)?);
            let hat = SolveCache::new(K3Problem::new(ghat, hat_grid)?, cfg.solver);
            let (rule, diag) = hat.feasible_rule(cfg.alpha_blk)?;
            let m = truth.evaluate(|u| rule.decide(u))?;
            let rate = grenander_rate(n);
            Ok(PluginTrial {
                n,
                trial: t,
                sup_norm: sup,
                rate,
                ratio: sup / rate,
                oracle_power,
                plugin_power: m.avg_power,
                gap: oracle_power - m.avg_power,
                plugin_fwer_max: m.fwer().into_iter().fold(0.0, f64::max),
                converged: diag.is_success(),
            })
        })
        .collect()
}

pub fn write_plugin_trials<W: Write>(trials: &[PluginTrial], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for t in trials {
        w.serialize(t)?;
    }
    if trials.is_empty() {
        w.write_record([
            "n", "trial", "sup_norm", "rate", "ratio", "oracle_power", "plugin_power", "gap", "plugin_fwer_max", "converged",
        ])?;
    }
    w.flush()?;
    Ok(())
}
