// Independent oracles shared by the integration tests. Nothing here calls
// into the library's numerical code.
#![allow(dead_code)]

/// Adaptive Simpson on `[a, b]` with absolute tolerance `tol`.
pub fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
    let m = 0.5 * (a + b);
    let (fa, fm, fb) = (f(a), f(m), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Simes p-value of a set, computed from scratch.
pub fn simes(p: &[f64]) -> f64 {
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, x)| m * x / (i + 1) as f64)
        .fold(1.0, f64::min)
}

/// Fisher combination p-value by direct series for the chi-square survival
/// function with `2m` degrees of freedom.
pub fn fisher(p: &[f64]) -> f64 {
    if p.len() == 1 {
        return p[0];
    }
    let x: f64 = -2.0 * p.iter().map(|v| v.max(1e-300).ln()).sum::<f64>();
    let half = 0.5 * x;
    let mut term = 1.0;
    let mut acc = 1.0;
    for k in 1..p.len() {
        term *= half / k as f64;
        acc += term;
    }
    (-half).exp() * acc
}

/// Closed testing over all `2^K - 1` intersections with a local test that
/// returns a p-value.
pub fn brute_closure<T: Fn(&[f64]) -> f64>(p: &[f64], alpha: f64, local: T) -> Vec<bool> {
    let k = p.len();
    let mut rejected = vec![true; k];
    for mask in 1u32..(1 << k) {
        let sub: Vec<f64> = (0..k).filter(|i| mask & (1 << i) != 0).map(|i| p[i]).collect();
        if local(&sub) > alpha {
            for (i, r) in rejected.iter_mut().enumerate() {
                if mask & (1 << i) != 0 {
                    *r = false;
                }
            }
        }
    }
    rejected
}

/// Least concave majorant of the ECDF by gift wrapping: from each vertex take
/// the point of steepest slope, preferring the farthest on (near) ties. Returns
/// (breakpoints, heights) in the same layout as the library's fit.
pub fn lcm_oracle(samples: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let mut pts: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    let mut count = 0usize;
    for (i, &x) in xs.iter().enumerate() {
        count += 1;
        if i + 1 < xs.len() && xs[i + 1] == x {
            continue;
        }
        pts.push((x, count as f64 / n));
    }
    let mut breaks = vec![0.0];
    let mut heights = Vec::new();
    let mut cur = 0;
    while cur + 1 < pts.len() {
        let (x0, y0) = pts[cur];
        let mut best = cur + 1;
        let mut best_slope = (pts[best].1 - y0) / (pts[best].0 - x0);
        for (j, &(x, y)) in pts.iter().enumerate().skip(cur + 2) {
            let s = (y - y0) / (x - x0);
            // collinear points are merged; allow for rounding in the slopes
            if s >= best_slope * (1.0 - 1e-12) {
                best = j;
                best_slope = s;
            }
        }
        breaks.push(pts[best].0);
        heights.push(best_slope);
        cur = best;
    }
    if *breaks.last().unwrap() < 1.0 {
        breaks.push(1.0);
        heights.push(0.0);
    }
    (breaks, heights)
}

/// Kolmogorov–Smirnov statistic of `xs` against the CDF `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Asymptotic 1% critical value of the one-sample KS statistic.
pub fn ks_crit_01(n: usize) -> f64 {
    1.6276 / (n as f64).sqrt()
}
