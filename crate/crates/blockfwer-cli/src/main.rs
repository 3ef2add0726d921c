use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use blockfwer::allocation::{
    build_value_curve, default_alpha_grid, kkt_bisection_bonferroni, kkt_bisection_sidak, uniform_splits,
    AllocationResult, Budget, ValueCurve,
};
use blockfwer::baselines::{self, Method};
use blockfwer::boost::{
    boost_run, plugin_boost_run, plugin_boost_swap, read_pvalue_csv, FoldSplit, PValueInput, PluginConfig,
    RejectionSet,
};
use blockfwer::densities::{AltDensity, DensitySpec, DEFAULT_TRUNC_BOUND};
use blockfwer::k3solver::{K3Problem, SolveCache, SolverArtifact, SolverParams};
use blockfwer::quadrature::{build_graded_qgrid, build_qgrid, QGrid, DEFAULT_N_PER_AXIS};
use blockfwer::simharness::{self, PluginRateConfig};
use blockfwer::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

/// Environment variable naming a directory for solver artifacts.
const CACHE_ENV: &str = "BLOCKFWER_CACHE_DIR";

#[derive(Parser)]
#[command(name = "blockfwer", version, about = "Block-separable strong-FWER testing with K=3 blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the dual multipliers for one block level and print the artifact.
    Solve(SolveArgs),
    /// Run the blockwise procedure on a p-value CSV.
    Run(RunArgs),
    /// Plug-in procedure with a Grenander fit on an estimation fold.
    Plugin(PluginArgs),
    /// Allocate per-block levels from value curves or density specs.
    Allocate(AllocateArgs),
    /// Run a baseline procedure on a p-value CSV.
    Baseline(BaselineArgs),
    /// Run simulation configs and write the metric table as CSV.
    Simulate(SimulateArgs),
    /// Tabulate per-block value curves.
    Curves(CurvesArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Truncnorm,
    Tdist,
    Beta,
    Mixnorm,
    Uniform,
}

#[derive(Args, Clone)]
struct FamilyArgs {
    #[arg(long, value_enum, default_value = "truncnorm")]
    family: Family,
    /// Location shift for truncnorm; mixnorm uses (theta/2, 3 theta/2) unless --means is given.
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_TRUNC_BOUND)]
    trunc_bound: f64,
    #[arg(long)]
    df: Option<f64>,
    #[arg(long)]
    shape: Option<f64>,
    /// Mixnorm component means, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 2, allow_hyphen_values = true)]
    means: Option<Vec<f64>>,
    /// JSON density spec; overrides the other family flags.
    #[arg(long)]
    density_json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridKind {
    Graded,
    Uniform,
}

#[derive(Args, Clone)]
struct GridArgs {
    #[arg(long, default_value_t = DEFAULT_N_PER_AXIS)]
    n_per_axis: usize,
    #[arg(long, value_enum, default_value = "graded")]
    grid: GridKind,
}

#[derive(Args, Clone)]
struct SolverArgs {
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    t_max: Option<usize>,
    #[arg(long)]
    u_s: Option<f64>,
    #[arg(long)]
    u_f: Option<f64>,
    #[arg(long)]
    u_max: Option<f64>,
    #[arg(long)]
    max_iter_b: Option<usize>,
}

#[derive(Args)]
struct SolveArgs {
    #[arg(long, value_parser = unit_interval)]
    alpha: f64,
    #[command(flatten)]
    family: FamilyArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RunBudget {
    Bonferroni,
    Sidak,
    Kkt,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    pvalues: PathBuf,
    #[arg(long, value_parser = unit_interval)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "bonferroni")]
    budget: RunBudget,
    #[command(flatten)]
    family: FamilyArgs,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BudgetArg {
    Bonferroni,
    Sidak,
}

impl From<BudgetArg> for Budget {
    fn from(b: BudgetArg) -> Budget {
        match b {
            BudgetArg::Bonferroni => Budget::Bonferroni,
            BudgetArg::Sidak => Budget::Sidak,
        }
    }
}

#[derive(Args)]
struct PluginArgs {
    #[arg(long)]
    pvalues: PathBuf,
    #[arg(long, value_parser = unit_interval)]
    alpha: f64,
    /// The Sidak budget assumes independence across testing blocks.
    #[arg(long, value_enum, default_value = "bonferroni")]
    budget: BudgetArg,
    /// Blocks whose p-values fit the density, comma separated. Defaults to
    /// every other block starting with the first.
    #[arg(long = "ghat-from-fold", value_delimiter = ',')]
    estimation: Option<Vec<String>>,
    /// Run at alpha/2 twice with the folds swapped and report the union.
    #[arg(long)]
    swap: bool,
    /// Deflation constant; omit to run at the nominal level.
    #[arg(long = "deflate-L3")]
    deflate_l3: Option<f64>,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AllocateArgs {
    #[arg(long, value_parser = unit_interval)]
    alpha: f64,
    #[arg(long, value_enum, default_value = "bonferroni")]
    budget: BudgetArg,
    /// JSON array of value curves, as written by `curves`.
    #[arg(long, conflicts_with = "densities", required_unless_present = "densities")]
    curves: Option<PathBuf>,
    /// JSON array of `{"block_id": ..., "density": {...}}`.
    #[arg(long)]
    densities: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BaselineArgs {
    #[arg(long, value_parser = parse_method)]
    method: Method,
    #[arg(long, value_parser = unit_interval)]
    alpha: f64,
    #[arg(long)]
    pvalues: PathBuf,
    /// Seed for min-P resampling under independent uniform nulls.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = simharness::DEFAULT_MINP_RESAMPLES)]
    resamples: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// One config object or an array of them.
    #[arg(long)]
    config: PathBuf,
    /// Seed for every config in the file.
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    threads: Option<usize>,
    /// Treat the config as a plug-in rate study instead of a sweep.
    #[arg(long)]
    plugin_rate: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// JSON array of `{"block_id": ..., "density": {...}}`.
    #[arg(long)]
    densities: PathBuf,
    /// Total level used to place the default curve grid.
    #[arg(long, value_parser = unit_interval)]
    alpha: f64,
    /// Explicit curve levels, comma separated.
    #[arg(long, value_delimiter = ',')]
    levels: Option<Vec<f64>>,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    solver: SolverArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(serde::Deserialize)]
struct BlockDensity {
    block_id: String,
    density: DensitySpec,
}

/// Failure tagged with the exit code it maps to.
enum Failure {
    Usage(String),
    Compute(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(_) | Error::Input { .. } | Error::Io(_) | Error::Csv(_) | Error::Json(_) => {
                Failure::Usage(e.to_string())
            }
            _ => Failure::Compute(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::from(Error::from(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::from(Error::from(e))
    }
}

type CliResult = std::result::Result<(), Failure>;

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    let x: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if x > 0.0 && x < 1.0 {
        Ok(x)
    } else {
        Err(format!("must lie in (0,1), got {x}"))
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

impl FamilyArgs {
    fn spec(&self) -> std::result::Result<DensitySpec, Failure> {
        if let Some(path) = &self.density_json {
            return Ok(serde_json::from_str(&fs::read_to_string(path)?)?);
        }
        let need = |v: Option<f64>, flag: &str| v.ok_or_else(|| usage(format!("--{flag} is required for this family")));
        Ok(match self.family {
            Family::Truncnorm => DensitySpec::Truncnorm {
                theta: need(self.theta, "theta")?,
                trunc_bound: self.trunc_bound,
            },
            Family::Tdist => DensitySpec::Tdist { df: need(self.df, "df")? },
            Family::Beta => DensitySpec::Beta {
                shape: need(self.shape, "shape")?,
            },
            Family::Mixnorm => match &self.means {
                Some(m) => DensitySpec::Mixnorm {
                    means: [m[0], m[1]],
                    trunc_bound: self.trunc_bound,
                },
                None => DensitySpec::mixnorm_from_theta(need(self.theta, "theta")?),
            },
            Family::Uniform => DensitySpec::Uniform,
        })
    }
}

impl SolverArgs {
    fn params(&self) -> SolverParams {
        let d = SolverParams::default();
        SolverParams {
            delta: self.delta.unwrap_or(d.delta),
            epsilon: self.epsilon.unwrap_or(d.epsilon),
            t_max: self.t_max.unwrap_or(d.t_max),
            u_s: self.u_s.unwrap_or(d.u_s),
            u_f: self.u_f.unwrap_or(d.u_f),
            u_max: self.u_max.unwrap_or(d.u_max),
            max_iter_b: self.max_iter_b.unwrap_or(d.max_iter_b),
        }
    }
}

fn build_grid(args: &GridArgs, g: &AltDensity) -> blockfwer::Result<QGrid> {
    match args.grid {
        GridKind::Graded => build_graded_qgrid(args.n_per_axis, g),
        GridKind::Uniform => build_qgrid(args.n_per_axis),
    }
}

fn solve_cache(spec: &DensitySpec, grid: &GridArgs, solver: &SolverArgs) -> std::result::Result<SolveCache, Failure> {
    let params = solver.params();
    params.validate()?;
    let g = Arc::new(AltDensity::from_spec(spec)?);
    let q = Arc::new(build_grid(grid, &g)?);
    Ok(SolveCache::new(K3Problem::new(g, q)?, params))
}

fn writer(out: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout())),
    })
}

fn emit_json(out: &Option<PathBuf>, value: &impl serde::Serialize) -> CliResult {
    let mut w = writer(out)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_pvalues(path: &Path) -> std::result::Result<PValueInput, Failure> {
    let f = File::open(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    read_pvalue_csv(f).map_err(|e| usage(format!("{}: {e}", path.display())))
}

// ── artifact cache ───────────────────────────────────────────────────────────

/// FNV-1a over the canonical JSON of the solve inputs.
fn artifact_key(cache: &SolveCache, alpha: f64) -> std::result::Result<String, Failure> {
    let p = cache.problem();
    let canon = serde_json::to_string(&json!({
        "alpha": alpha,
        "density": p.density().spec(),
        "grid": p.grid().meta(),
        "params": cache.params(),
    }))?;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in canon.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Ok(format!("{h:016x}"))
}

/// Solves through the on-disk cache when the environment variable is set.
/// Returns the artifact and the file it lives in, if any.
fn cached_artifact(cache: &SolveCache, alpha: f64) -> std::result::Result<(SolverArtifact, Option<PathBuf>), Failure> {
    let Some(dir) = std::env::var_os(CACHE_ENV).map(PathBuf::from) else {
        return Ok((cache.artifact(alpha)?, None));
    };
    let path = dir.join(format!("{}.json", artifact_key(cache, alpha)?));
    if let Ok(text) = fs::read_to_string(&path) {
        match serde_json::from_str::<SolverArtifact>(&text) {
            Ok(a) if a.alpha == alpha && cache.adopt(&a) => {
                log::info!("using cached artifact {}", path.display());
                return Ok((a, Some(path)));
            }
            _ => log::warn!("ignoring stale cache file {}", path.display()),
        }
    }
    let a = cache.artifact(alpha)?;
    fs::create_dir_all(&dir)?;
    fs::write(&path, serde_json::to_string_pretty(&a)?)?;
    Ok((a, Some(path)))
}

fn artifact_ref(a: &SolverArtifact, path: &Option<PathBuf>) -> serde_json::Value {
    match path {
        Some(p) => json!(p.display().to_string()),
        None => serde_json::to_value(a).unwrap_or(serde_json::Value::Null),
    }
}

// ── subcommands ──────────────────────────────────────────────────────────────

fn cmd_solve(a: SolveArgs) -> CliResult {
    let spec = a.family.spec()?;
    let cache = solve_cache(&spec, &a.grid, &a.solver)?;
    let (art, _) = cached_artifact(&cache, a.alpha)?;
    emit_json(&a.out, &art)?;
    if !art.diagnostics.is_success() {
        return Err(Failure::Compute(art.diagnostics.message.clone()));
    }
    Ok(())
}

fn rejection_json(r: &RejectionSet, extra: serde_json::Value) -> serde_json::Value {
    let mut v = json!({ "rejected": r.rejected, "per_block": r.per_block });
    if let (Some(obj), serde_json::Value::Object(more)) = (v.as_object_mut(), extra) {
        obj.extend(more);
    }
    v
}

fn cmd_run(a: RunArgs) -> CliResult {
    let input = read_pvalues(&a.pvalues)?;
    let spec = a.family.spec()?;
    let cache = solve_cache(&spec, &a.grid, &a.solver)?;
    let nb = input.partition.n_blocks();
    if nb == 0 {
        return Err(usage("no blocks in the p-value file"));
    }
    let (bonf, sidak) = uniform_splits(a.alpha, nb)?;
    let (levels, budget_name) = match a.budget {
        RunBudget::Bonferroni => (vec![bonf; nb], "bonferroni"),
        RunBudget::Sidak => (vec![sidak; nb], "sidak"),
        RunBudget::Kkt => {
            // one family for every block, so a single curve serves all
            let grid = default_alpha_grid(a.alpha, nb);
            let curve = blockfwer::allocation::curve_from_problem(cache.problem(), &grid, cache.params(), "all")?;
            let curves: Vec<ValueCurve> = input
                .partition
                .blocks()
                .iter()
                .map(|b| curve.with_block_id(&b.id))
                .collect();
            (kkt_bisection_bonferroni(&curves, a.alpha, 1e-9)?.levels, "kkt")
        }
    };
    let mut refs = BTreeMap::new();
    for &l in &levels {
        let (art, path) = cached_artifact(&cache, l)?;
        refs.insert(format!("{l}"), artifact_ref(&art, &path));
    }
    let r = boost_run(&input.pvalues, &input.partition, &levels, &cache)?;
    emit_json(
        &a.out,
        &rejection_json(&r, json!({ "alpha": a.alpha, "budget": budget_name, "levels": levels, "solver": refs })),
    )
}

fn cmd_plugin(a: PluginArgs) -> CliResult {
    let input = read_pvalues(&a.pvalues)?;
    let fold = match &a.estimation {
        Some(e) => {
            let t: Vec<String> = input
                .partition
                .blocks()
                .iter()
                .map(|b| b.id.clone())
                .filter(|id| !e.contains(id))
                .collect();
            FoldSplit::new(e.clone(), t)?
        }
        None => FoldSplit::alternating(&input.partition)?,
    };
    let params = a.solver.params();
    params.validate()?;
    let cfg = PluginConfig {
        alpha: a.alpha,
        budget: a.budget.into(),
        deflate_l3: a.deflate_l3,
        n_per_axis: a.grid.n_per_axis,
        params,
        ..PluginConfig::new(a.alpha)
    };
    if a.swap {
        let r = plugin_boost_swap(&input.pvalues, &input.partition, &fold, &cfg)?;
        emit_json(&a.out, &rejection_json(&r, json!({ "alpha": a.alpha, "swap": true })))
    } else {
        let o = plugin_boost_run(&input.pvalues, &input.partition, &fold, &cfg)?;
        emit_json(
            &a.out,
            &rejection_json(
                &o.rejections,
                json!({
                    "alpha": a.alpha,
                    "alpha_used": o.alpha_used,
                    "level": o.level,
                    "estimation": fold.estimation,
                    "testing": fold.testing,
                    "ghat": o.ghat,
                }),
            ),
        )
    }
}

fn read_block_densities(path: &Path) -> std::result::Result<Vec<BlockDensity>, Failure> {
    let v: Vec<BlockDensity> = serde_json::from_str(&fs::read_to_string(path)?)?;
    if v.is_empty() {
        return Err(usage("density file lists no blocks"));
    }
    Ok(v)
}

fn curves_for(
    blocks: &[BlockDensity],
    levels: &[f64],
    grid: &GridArgs,
    solver: &SolverArgs,
) -> std::result::Result<Vec<ValueCurve>, Failure> {
    let params = solver.params();
    params.validate()?;
    let mut out = Vec::with_capacity(blocks.len());
    for b in blocks {
        let g = AltDensity::from_spec(&b.density)?;
        let q = build_grid(grid, &g)?;
        out.push(build_value_curve(&g, levels, &q, &params, &b.block_id).map_err(|e| Error::Block {
            block: b.block_id.clone(),
            source: Box::new(e),
        })?);
    }
    Ok(out)
}

fn cmd_allocate(a: AllocateArgs) -> CliResult {
    let curves: Vec<ValueCurve> = match (&a.curves, &a.densities) {
        (Some(p), _) => serde_json::from_str(&fs::read_to_string(p)?)?,
        (None, Some(p)) => {
            let blocks = read_block_densities(p)?;
            let levels = default_alpha_grid(a.alpha, blocks.len());
            curves_for(&blocks, &levels, &a.grid, &a.solver)?
        }
        (None, None) => return Err(usage("one of --curves or --densities is required")),
    };
    let res: AllocationResult = match Budget::from(a.budget) {
        Budget::Bonferroni => kkt_bisection_bonferroni(&curves, a.alpha, a.eps)?,
        Budget::Sidak => kkt_bisection_sidak(&curves, a.alpha, a.eps)?,
    };
    if res.cap_binding {
        log::warn!("multiplier cap binds; levels come from the steepest observed slope");
    }
    let ids: Vec<&str> = curves.iter().map(|c| c.block_id.as_str()).collect();
    emit_json(&a.out, &json!({ "block_ids": ids, "allocation": res }))
}

fn cmd_curves(a: CurvesArgs) -> CliResult {
    let blocks = read_block_densities(&a.densities)?;
    let levels = a.levels.clone().unwrap_or_else(|| default_alpha_grid(a.alpha, blocks.len()));
    let curves = curves_for(&blocks, &levels, &a.grid, &a.solver)?;
    emit_json(&a.out, &curves)
}

fn cmd_baseline(a: BaselineArgs) -> CliResult {
    let input = read_pvalues(&a.pvalues)?;
    let p = input.ordered();
    let blocks = input.partition.index_triples();
    let mask = if a.method == Method::MinpResampling {
        let seed = a.seed.ok_or_else(|| usage("--seed is required for minp_resampling"))?;
        baselines::minp_resampling(&p, a.alpha, simharness::independent_null(p.len()), a.resamples, seed)?
    } else {
        baselines::run(a.method, &p, Some(&blocks), a.alpha)?
    };
    let ids = input.partition.hypothesis_ids();
    let mut r = RejectionSet::default();
    for (b, t) in input.partition.blocks().iter().zip(&blocks) {
        r.per_block.insert(b.id.clone(), t.iter().filter(|&&i| mask[i]).count());
    }
    // report in p-value order within the file's block order
    let mut hit: Vec<usize> = (0..ids.len()).filter(|&i| mask[i]).collect();
    hit.sort_by(|&x, &y| p[x].total_cmp(&p[y]).then(ids[x].cmp(&ids[y])));
    r.rejected = hit.into_iter().map(|i| ids[i].clone()).collect();
    emit_json(&a.out, &rejection_json(&r, json!({ "method": a.method, "alpha": a.alpha })))
}

fn cmd_simulate(a: SimulateArgs) -> CliResult {
    let text = fs::read_to_string(&a.config)?;
    let run = || -> CliResult {
        let w = writer(&a.out)?;
        if a.plugin_rate {
            let mut cfg: PluginRateConfig = serde_json::from_str(&text)?;
            cfg.seed = a.seed;
            let trials = simharness::plugin_rate_study(&cfg)?;
            simharness::write_plugin_trials(&trials, w)?;
        } else {
            let mut configs = simharness::parse_configs(&text)?;
            for c in &mut configs {
                c.seed = a.seed;
            }
            simharness::sweep(&configs, w)?;
        }
        Ok(())
    };
    match a.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| usage(format!("cannot build thread pool: {e}")))?;
            pool.install(run)
        }
        None => run(),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let out = match cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Run(a) => cmd_run(a),
        Command::Plugin(a) => cmd_plugin(a),
        Command::Allocate(a) => cmd_allocate(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Curves(a) => cmd_curves(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Compute(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
