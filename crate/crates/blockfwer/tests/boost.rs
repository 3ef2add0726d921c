use std::collections::BTreeMap;
use std::sync::{Arc, OnceLock};

use blockfwer::boost::*;
use blockfwer::densities::truncnorm_density;
use blockfwer::k3solver::{K3Problem, SolveCache, SolverParams};
use blockfwer::quadrature::{build_graded_qgrid, DEFAULT_N_PER_AXIS};
use blockfwer::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

fn fresh_cache() -> SolveCache {
    let g = Arc::new(truncnorm_density(-2.0, 6.0).unwrap());
    let grid = Arc::new(build_graded_qgrid(DEFAULT_N_PER_AXIS, &g).unwrap());
    SolveCache::new(K3Problem::new(g, grid).unwrap(), SolverParams::default())
}

fn cache() -> &'static SolveCache {
    static C: OnceLock<SolveCache> = OnceLock::new();
    C.get_or_init(fresh_cache)
}

fn pmap(partition: &BlockPartition, p: &[f64]) -> BTreeMap<String, f64> {
    partition.hypothesis_ids().into_iter().zip(p.iter().copied()).collect()
}

const CSV: &str = "hypothesis_id,block_id,p_value
a,x,0.01
b,x,0.2
c,x,0.03
d,y,0.5
e,y, 0.6
f,y,0.7
";

#[test]
fn csv_parses_into_blocks_in_order() {
    let input = read_pvalue_csv(CSV.as_bytes()).unwrap();
    assert_eq!(input.partition.n_blocks(), 2);
    assert_eq!(input.partition.blocks()[0].id, "x");
    assert_eq!(input.partition.blocks()[1].members, ["d", "e", "f"].map(String::from));
    assert_eq!(input.ordered(), vec![0.01, 0.2, 0.03, 0.5, 0.6, 0.7]);
}

#[test]
fn csv_errors_carry_the_line() {
    let bad_p = CSV.replace("0.03", "1.3");
    let err = read_pvalue_csv(bad_p.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 4"), "{err}");

    let dup = CSV.replace("b,x", "a,x");
    let err = read_pvalue_csv(dup.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 3") && err.contains("duplicate"), "{err}");

    let junk = CSV.replace("0.6", "abc");
    let err = read_pvalue_csv(junk.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("line 6"), "{err}");

    let short = CSV.replace("f,y,0.7\n", "");
    let err = read_pvalue_csv(short.as_bytes()).unwrap_err().to_string();
    assert!(err.contains("'y'") && err.contains("2 members"), "{err}");
}

#[test]
fn partitions_must_be_disjoint() {
    let block = |id: &str, m: [&str; 3]| Block {
        id: id.into(),
        members: m.map(String::from),
    };
    assert!(BlockPartition::new(vec![block("x", ["a", "b", "c"]), block("y", ["c", "d", "e"])]).is_err());
    assert!(BlockPartition::new(vec![block("x", ["a", "b", "c"]), block("x", ["d", "e", "f"])]).is_err());
    let ok = BlockPartition::new(vec![block("x", ["a", "b", "c"])]).unwrap();
    assert_eq!(ok.n_hypotheses(), 3);
    let c = BlockPartition::consecutive(2);
    assert_eq!(c.hypothesis_ids(), ["h0", "h1", "h2", "h3", "h4", "h5"]);
    assert_eq!(c.index_triples(), vec![[0, 1, 2], [3, 4, 5]]);
}

#[test]
fn no_evidence_rejects_nothing() {
    let part = BlockPartition::consecutive(10);
    let out = boost_run(&pmap(&part, &[1.0; 30]), &part, &[0.005; 10], cache()).unwrap();
    assert!(out.rejected.is_empty());
    assert!(out.per_block.values().all(|&r| r == 0));
}

#[test]
fn tiny_block_rejects_all_three() {
    let part = BlockPartition::consecutive(10);
    let mut p = vec![0.8; 30];
    p[6..9].copy_from_slice(&[1e-12, 2e-12, 3e-12]);
    let out = boost_run(&pmap(&part, &p), &part, &[0.005; 10], cache()).unwrap();
    assert_eq!(out.per_block["b2"], 3);
    assert_eq!(out.rejected, ["h6", "h7", "h8"]);
}

#[test]
fn ties_break_by_hypothesis_id() {
    let input = read_pvalue_csv(
        "hypothesis_id,block_id,p_value\nz,b,1e-6\nm,b,1e-6\nq,b,0.9\n".as_bytes(),
    )
    .unwrap();
    let rule = cache().rule(0.0167).unwrap();
    let r = rule.rejections(&[1e-6, 1e-6, 0.9]);
    assert!(r == 1 || r == 2, "R = {r}");
    let out = boost_run(&input.pvalues, &input.partition, &[0.0167], cache()).unwrap();
    let want: Vec<&str> = ["m", "z"][..r].to_vec();
    assert_eq!(out.rejected, want);
}

#[test]
fn mismatched_inputs_are_errors() {
    let part = BlockPartition::consecutive(2);
    let mut p = pmap(&part, &[0.1; 6]);
    assert!(boost_run(&p, &part, &[0.01], cache()).is_err());
    assert!(boost_run(&p, &part, &[0.01, 1.0], cache()).is_err());
    p.remove("h4");
    match boost_run(&p, &part, &[0.01, 0.01], cache()).unwrap_err() {
        Error::Block { block, .. } => assert_eq!(block, "b1"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn cached_and_per_block_solves_agree_bitwise() {
    let part = BlockPartition::consecutive(10);
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let p: Vec<f64> = (0..30).map(|_| rng.random::<f64>().powi(4)).collect();
    let pm = pmap(&part, &p);
    let shared = boost_run(&pm, &part, &[0.005; 10], cache()).unwrap();
    // one fresh cache per block
    let mut per_block = RejectionSet::default();
    for (j, b) in part.blocks().iter().enumerate() {
        let single = BlockPartition::new(vec![b.clone()]).unwrap();
        let sub: BTreeMap<String, f64> = b.members.iter().map(|m| (m.clone(), pm[m])).collect();
        let out = boost_run(&sub, &single, &[0.005], &fresh_cache()).unwrap();
        per_block.rejected.extend(out.rejected);
        per_block.per_block.extend(out.per_block);
        assert_eq!(j + 1, per_block.per_block.len());
    }
    assert_eq!(shared, per_block);
    assert!(shared.per_block.values().any(|&r| r > 0), "draw gave no rejections to compare");
}

#[test]
fn mask_matches_the_keyed_run() {
    let part = BlockPartition::consecutive(10);
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let p: Vec<f64> = (0..30).map(|_| rng.random::<f64>().powi(5)).collect();
    let rule = cache().rule(0.005).unwrap();
    let mask = boost_mask(&p, &part.index_triples(), &[&rule; 10]);
    let out = boost_run(&pmap(&part, &p), &part, &[0.005; 10], cache()).unwrap();
    let ids = part.hypothesis_ids();
    let mut from_mask: Vec<String> = (0..30).filter(|&i| mask[i]).map(|i| ids[i].clone()).collect();
    let mut keyed = out.rejected.clone();
    from_mask.sort();
    keyed.sort();
    assert_eq!(from_mask, keyed);
}

#[test]
fn deflation_examples() {
    let a = deflate_alpha(0.05, 0.01, 10, 1000).unwrap();
    // (log 1000 / 1000)^(1/3) = 0.190449; the quoted 0.030962 rounds r_n early
    assert!((a - 0.030962).abs() < 1e-5, "{a}");
    let r = (1000f64.ln() / 1000.0).cbrt();
    assert!((a - (0.05 - 0.1 * r)).abs() < 1e-15);
    assert_eq!(deflate_alpha(0.05, 0.0, 10, 1000).unwrap(), 0.05);
    let err = deflate_alpha(0.05, 1.0, 10, 100).unwrap_err().to_string();
    assert!(err.contains("L3"), "{err}");
    assert!(deflate_alpha(0.05, 0.01, 10, 1).is_err());
    assert!(deflate_alpha(0.05, -0.01, 10, 100).is_err());
}

#[test]
fn fold_splits() {
    let part = BlockPartition::consecutive(5);
    let f = FoldSplit::alternating(&part).unwrap();
    assert_eq!(f.estimation, ["b0", "b2", "b4"]);
    assert_eq!(f.testing, ["b1", "b3"]);
    let s = f.swapped().unwrap();
    assert_eq!(s.testing, f.estimation);
    assert!(FoldSplit::new(vec!["b0".into()], vec![]).is_err());
    assert!(FoldSplit::new(vec!["b0".into()], vec!["b0".into()]).is_err());
    // unknown ids surface when the fold is used
    let bad = FoldSplit::new(vec!["b9".into()], vec!["b1".into()]).unwrap();
    let pm = pmap(&part, &[0.5; 15]);
    assert!(plugin_boost_run(&pm, &part, &bad, &PluginConfig::new(0.05)).is_err());
}

fn quick_plugin(alpha: f64) -> PluginConfig {
    let mut cfg = PluginConfig::new(alpha);
    cfg.n_per_axis = 30;
    cfg
}

#[test]
fn plugin_rejects_only_on_the_testing_fold() {
    let part = BlockPartition::consecutive(10);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let g = truncnorm_density(-2.0, 6.0).unwrap();
    let p: Vec<f64> = (0..30).map(|_| g.draw(rng.random())).collect();
    let fold = FoldSplit::alternating(&part).unwrap();
    let out = plugin_boost_run(&pmap(&part, &p), &part, &fold, &quick_plugin(0.05)).unwrap();
    assert_eq!(out.level, 0.01);
    assert_eq!(out.alpha_used, 0.05);
    let keys: Vec<&String> = out.rejections.per_block.keys().collect();
    assert_eq!(keys, ["b1", "b3", "b5", "b7", "b9"]);
    let testing: Vec<String> = [1, 3, 5, 7, 9]
        .iter()
        .flat_map(|j| part.blocks()[*j].members.clone())
        .collect();
    assert!(out.rejections.rejected.iter().all(|id| testing.contains(id)));
}

#[test]
fn plugin_estimation_fold_needs_three_values() {
    let part = BlockPartition::consecutive(2);
    let fold = FoldSplit::new(vec![], vec!["b0".into(), "b1".into()]).unwrap();
    assert!(plugin_boost_run(&pmap(&part, &[0.5; 6]), &part, &fold, &quick_plugin(0.05)).is_err());
}

#[test]
fn plugin_on_uniform_data_fits_a_near_uniform_density() {
    let part = BlockPartition::consecutive(200);
    let mut rng = ChaCha20Rng::seed_from_u64(9);
    let p: Vec<f64> = (0..600).map(|_| rng.random()).collect();
    let fold = FoldSplit::alternating(&part).unwrap();
    let out = plugin_boost_run(&pmap(&part, &p), &part, &fold, &quick_plugin(0.05)).unwrap();
    // 300 pooled points: cdf close to the identity
    for &x in &[0.1, 0.3, 0.5, 0.7, 0.9] {
        assert!((out.ghat.cdf(x) - x).abs() < 0.1, "cdf({x}) = {}", out.ghat.cdf(x));
    }
}

#[test]
fn plugin_complete_null_fwer_is_controlled() {
    let part = BlockPartition::consecutive(10);
    let fold = FoldSplit::alternating(&part).unwrap();
    let cfg = quick_plugin(0.05);
    let n = 300;
    let mut rng = ChaCha20Rng::seed_from_u64(2024);
    let mut hits = 0;
    for _ in 0..n {
        let p: Vec<f64> = (0..30).map(|_| rng.random()).collect();
        let out = plugin_boost_run(&pmap(&part, &p), &part, &fold, &cfg).unwrap();
        if !out.rejections.rejected.is_empty() {
            hits += 1;
        }
    }
    let fwer = hits as f64 / n as f64;
    let se = (0.05f64 * 0.95 / n as f64).sqrt();
    assert!(fwer <= 0.05 + 3.0 * se, "FWER {fwer}");
}

#[test]
fn swap_covers_every_block() {
    let part = BlockPartition::consecutive(6);
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let p: Vec<f64> = (0..18).map(|_| rng.random::<f64>().powi(3)).collect();
    let fold = FoldSplit::alternating(&part).unwrap();
    let out = plugin_boost_swap(&pmap(&part, &p), &part, &fold, &quick_plugin(0.05)).unwrap();
    assert_eq!(out.per_block.len(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn rejections_are_a_prefix_of_sorted_pvalues(
        p in prop::collection::vec(prop_oneof![1e-8f64..1e-3, 1e-3f64..1.0], 9),
        level in prop::sample::select(vec![0.005, 0.0167]),
    ) {
        let part = BlockPartition::consecutive(3);
        let out = boost_run(&pmap(&part, &p), &part, &[level; 3], cache()).unwrap();
        for (j, b) in part.blocks().iter().enumerate() {
            let r = out.per_block[&b.id];
            let rejected: Vec<f64> = (0..3).filter(|i| out.rejected.contains(&b.members[*i])).map(|i| p[3 * j + i]).collect();
            let kept: Vec<f64> = (0..3).filter(|i| !out.rejected.contains(&b.members[*i])).map(|i| p[3 * j + i]).collect();
            prop_assert_eq!(rejected.len(), r);
            let max_rej = rejected.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min_kept = kept.iter().copied().fold(f64::INFINITY, f64::min);
            prop_assert!(max_rej <= min_kept);
        }
    }
}
