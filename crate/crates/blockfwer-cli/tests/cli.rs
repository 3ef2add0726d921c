use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use blockfwer::baselines::{self, Method};
use blockfwer::boost::{boost_run, read_pvalue_csv};
use blockfwer::densities::truncnorm_density;
use blockfwer::k3solver::{K3Problem, SolveCache, SolverParams, MSG_INCREASE_UMAX};
use blockfwer::quadrature::build_graded_qgrid;
use serde_json::Value;
use tempfile::TempDir;

const GRID: [&str; 2] = ["--n-per-axis", "40"];

fn blockfwer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockfwer"))
        .args(args)
        .env_remove("BLOCKFWER_CACHE_DIR")
        .output()
        .unwrap()
}

fn json_of(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

/// Ten blocks of p-values with some strong signals.
fn pvalue_file(dir: &Path) -> PathBuf {
    let mut text = String::from("hypothesis_id,block_id,p_value\n");
    let p = [
        1e-5, 2e-4, 0.3, 0.6, 0.2, 0.9, 1e-6, 1e-6, 1e-6, 0.004, 0.01, 0.5, 0.7, 0.8, 0.05, 3e-4, 0.002, 0.02, 0.4,
        0.1, 0.35, 0.9, 0.95, 0.99, 1e-3, 0.03, 0.6, 0.15, 0.25, 0.45,
    ];
    for (i, v) in p.iter().enumerate() {
        text.push_str(&format!("h{i},b{},{v}\n", i / 3));
    }
    let path = dir.join("p.csv");
    fs::write(&path, text).unwrap();
    path
}

fn library_cache() -> SolveCache {
    let g = Arc::new(truncnorm_density(-2.0, 6.0).unwrap());
    let grid = Arc::new(build_graded_qgrid(40, &g).unwrap());
    SolveCache::new(K3Problem::new(g, grid).unwrap(), SolverParams::default())
}

#[test]
fn solve_prints_a_converged_artifact() {
    let out = blockfwer(&[&["solve", "--alpha", "0.005", "--theta", "-2"][..], &GRID].concat());
    let v = json_of(&out);
    assert_eq!(v["diagnostics"]["flag"], "success");
    assert_eq!(v["mu"].as_array().unwrap().len(), 3);
    let res: Vec<f64> = v["residuals"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    // F0 may be slack; the binding pair sits on the level
    assert!(res[0] <= 2e-4 && res[1].abs() <= 2e-4 && res[2].abs() <= 2e-4, "{res:?}");
    assert_eq!(v["grid"]["n_per_axis"], 40);
}

#[test]
fn flagged_solve_exits_one_with_the_message() {
    let out = blockfwer(&[&["solve", "--alpha", "0.005", "--theta", "-2", "--u-max", "1e-3"][..], &GRID].concat());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(MSG_INCREASE_UMAX));
    // the artifact is still printed for inspection
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["diagnostics"]["flag"], "bracket_failed");
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.csv");
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "hypothesis_id,block_id,p_value\na,x,0.1\nb,x,2.0\nc,x,0.3\n").unwrap();
    for args in [
        vec!["solve", "--theta", "-2"],
        vec!["solve", "--alpha", "1.5", "--theta", "-2"],
        vec!["solve", "--alpha", "0.05"],
        vec!["solve", "--alpha", "0.05", "--theta", "-2", "--n-per-axis", "1"],
        vec!["run", "--alpha", "0.05", "--theta", "-2", "--pvalues", missing.to_str().unwrap()],
        vec!["run", "--alpha", "0.05", "--theta", "-2", "--pvalues", bad.to_str().unwrap()],
        vec!["baseline", "--method", "westfall", "--alpha", "0.05", "--pvalues", bad.to_str().unwrap()],
        vec!["frobnicate"],
    ] {
        let out = blockfwer(&args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = blockfwer(&["run", "--alpha", "0.05", "--theta", "-2", "--pvalues", bad.to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}

#[test]
fn run_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let path = pvalue_file(dir.path());
    let out = blockfwer(&[
        &["run", "--alpha", "0.05", "--budget", "sidak", "--theta", "-2", "--pvalues", path.to_str().unwrap()][..],
        &GRID,
    ]
    .concat());
    let v = json_of(&out);
    let levels: Vec<f64> = v["levels"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(levels.len(), 10);
    assert!(levels.iter().all(|&l| (l - 0.0051162).abs() < 5e-8));

    let input = read_pvalue_csv(fs::File::open(&path).unwrap()).unwrap();
    let lib = boost_run(&input.pvalues, &input.partition, &levels, &library_cache()).unwrap();
    let rejected: Vec<String> = serde_json::from_value(v["rejected"].clone()).unwrap();
    let per_block: BTreeMap<String, usize> = serde_json::from_value(v["per_block"].clone()).unwrap();
    assert_eq!(rejected, lib.rejected);
    assert_eq!(per_block, lib.per_block);
    assert_eq!(per_block["b2"], 3);
}

#[test]
fn kkt_budget_on_identical_blocks_is_uniform() {
    let dir = TempDir::new().unwrap();
    let path = pvalue_file(dir.path());
    let out = blockfwer(&[
        &["run", "--alpha", "0.05", "--budget", "kkt", "--theta", "-2", "--pvalues", path.to_str().unwrap()][..],
        &GRID,
    ]
    .concat());
    let v = json_of(&out);
    for l in v["levels"].as_array().unwrap() {
        assert!((l.as_f64().unwrap() - 0.005).abs() < 1e-12);
    }
}

#[test]
fn baseline_matches_the_library() {
    let dir = TempDir::new().unwrap();
    let path = pvalue_file(dir.path());
    let input = read_pvalue_csv(fs::File::open(&path).unwrap()).unwrap();
    let p = input.ordered();
    let ids = input.partition.hypothesis_ids();
    for m in [Method::Holm, Method::Hommel, Method::BlockHolm, Method::HartogEvalue] {
        let out = blockfwer(&["baseline", "--method", m.name(), "--alpha", "0.05", "--pvalues", path.to_str().unwrap()]);
        let v = json_of(&out);
        let mut got: Vec<String> = serde_json::from_value(v["rejected"].clone()).unwrap();
        let mask = baselines::run(m, &p, Some(&input.partition.index_triples()), 0.05).unwrap();
        let mut want: Vec<String> = (0..p.len()).filter(|&i| mask[i]).map(|i| ids[i].clone()).collect();
        got.sort();
        want.sort();
        assert_eq!(got, want, "{m}");
    }
    let out = blockfwer(&["baseline", "--method", "minp_resampling", "--alpha", "0.05", "--pvalues", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let out = blockfwer(&[
        "baseline", "--method", "minp_resampling", "--alpha", "0.05", "--seed", "3", "--resamples", "2000",
        "--pvalues", path.to_str().unwrap(),
    ]);
    json_of(&out);
}

fn sim_config(dir: &Path) -> PathBuf {
    let cfg = r#"[{"family":{"kind":"truncnorm","params":{"theta":-2.0}},"K":30,"B":10,"alpha":0.05,
        "configuration":{"kind":"h_ell","ell":15},"n_rep":600,"seed":1,"n_per_axis":40,"minp_resamples":500},
       {"family":{"kind":"beta","params":{"shape":0.3}},"K":12,"B":4,"alpha":0.05,
        "configuration":{"kind":"complete_null"},"n_rep":300,"seed":1,"n_per_axis":40,
        "methods":["boost","holm","closed_fisher"]}]"#;
    let path = dir.join("sim.json");
    fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn simulate_is_byte_identical_across_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(dir.path());
    let run = |threads: &str, seed: &str| {
        let out = blockfwer(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", seed, "--threads", threads]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let one = run("1", "42");
    assert_eq!(one, run("2", "42"));
    assert_eq!(one, run("4", "42"));
    assert_ne!(one, run("1", "43"));
    let text = String::from_utf8(one).unwrap();
    assert!(text.starts_with("family,theta,K,B,alpha,method,metric,value,mc_se,n_rep,seed\n"));
    // the command-line seed wins over the file
    assert!(text.lines().skip(1).all(|l| l.ends_with(",42")));
}

#[test]
fn simulate_writes_to_a_file() {
    let dir = TempDir::new().unwrap();
    let cfg = sim_config(dir.path());
    let dest = dir.path().join("out.csv");
    let out = blockfwer(&["simulate", "--config", cfg.to_str().unwrap(), "--seed", "1", "--out", dest.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let rows = blockfwer::simharness::read_rows(fs::File::open(&dest).unwrap()).unwrap();
    assert!(rows.iter().any(|r| r.method == "closed_fisher" && r.metric == "fwer_0"));
}

#[test]
fn cache_dir_reuses_artifacts() {
    let dir = TempDir::new().unwrap();
    let cache = dir.path().join("cache");
    let solve = || {
        Command::new(env!("CARGO_BIN_EXE_blockfwer"))
            .args([&["solve", "--alpha", "0.005", "--theta", "-2"][..], &GRID].concat())
            .env("BLOCKFWER_CACHE_DIR", &cache)
            .output()
            .unwrap()
    };
    let first = solve();
    assert!(first.status.success());
    let files: Vec<_> = fs::read_dir(&cache).unwrap().collect();
    assert_eq!(files.len(), 1);
    let second = solve();
    assert_eq!(first.stdout, second.stdout);
    assert_eq!(fs::read_dir(&cache).unwrap().count(), 1);
}

#[test]
fn plugin_smoke() {
    let dir = TempDir::new().unwrap();
    let path = pvalue_file(dir.path());
    let v = json_of(&blockfwer(&[
        &["plugin", "--alpha", "0.05", "--pvalues", path.to_str().unwrap()][..],
        &GRID,
    ]
    .concat()));
    assert_eq!(v["testing"], serde_json::json!(["b1", "b3", "b5", "b7", "b9"]));
    assert_eq!(v["level"], 0.01);
    let v = json_of(&blockfwer(&[
        &["plugin", "--alpha", "0.05", "--swap", "--pvalues", path.to_str().unwrap()][..],
        &GRID,
    ]
    .concat()));
    assert_eq!(v["per_block"].as_object().unwrap().len(), 10);
    let out = blockfwer(&[
        &["plugin", "--alpha", "0.05", "--deflate-L3", "5", "--pvalues", path.to_str().unwrap()][..],
        &GRID,
    ]
    .concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn curves_then_allocate() {
    let dir = TempDir::new().unwrap();
    let dens = dir.path().join("d.json");
    fs::write(
        &dens,
        r#"[{"block_id":"a","density":{"kind":"truncnorm","params":{"theta":-2.0}}},
            {"block_id":"b","density":{"kind":"truncnorm","params":{"theta":-2.0}}}]"#,
    )
    .unwrap();
    let curves = dir.path().join("c.json");
    let out = blockfwer(&[
        &["curves", "--alpha", "0.05", "--densities", dens.to_str().unwrap(), "--out", curves.to_str().unwrap()][..],
        &GRID,
    ]
    .concat());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json_of(&blockfwer(&["allocate", "--alpha", "0.05", "--curves", curves.to_str().unwrap()]));
    assert_eq!(v["block_ids"], serde_json::json!(["a", "b"]));
    for l in v["allocation"]["levels"].as_array().unwrap() {
        assert!((l.as_f64().unwrap() - 0.025).abs() < 1e-12);
    }
    let v = json_of(&blockfwer(&["allocate", "--alpha", "0.05", "--budget", "sidak", "--curves", curves.to_str().unwrap()]));
    let want = 1.0 - 0.95f64.sqrt();
    for l in v["allocation"]["levels"].as_array().unwrap() {
        assert!((l.as_f64().unwrap() - want).abs() < 1e-12);
    }
    let out = blockfwer(&["allocate", "--alpha", "0.05"]);
    assert_eq!(out.status.code(), Some(2));
}
