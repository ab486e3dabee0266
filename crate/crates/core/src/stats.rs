//! Paired significance testing for per-sample error comparisons.
//!
//! The Wilcoxon signed-rank test is exact for up to [`EXACT_LIMIT`]
//! non-zero differences: the null distribution of the rank sum is built by
//! dynamic programming over all 2^n sign assignments. Ties get average
//! ranks; doubling every rank keeps the DP in integer arithmetic, so the
//! exact path has no rounding at all. Larger samples use the normal
//! approximation with tie correction and continuity correction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Largest number of non-zero differences handled by exact enumeration.
pub const EXACT_LIMIT: usize = 25;
/// Default evaluation subsample size for paired tests.
pub const DEFAULT_TEST_SAMPLES: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WilcoxonResult {
    /// min(W+, W-), using average ranks.
    pub w: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Number of pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    pub exact: bool,
}

/// Two-sided paired Wilcoxon signed-rank test on per-sample metrics.
pub fn wilcoxon_paired(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    if a.len() != b.len() {
        return Err(Error::Stats(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let mut diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Stats("non-finite difference".into()));
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonResult { w: 0.0, p: 1.0, n_effective: 0, exact: true });
    }
    diffs.sort_by(|x, y| x.abs().partial_cmp(&y.abs()).unwrap());

    // Doubled average ranks (integers even with ties) and the tie sizes.
    let mut ranks2 = vec![0u64; n];
    let mut tie_sizes: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && diffs[j].abs() == diffs[i].abs() {
            j += 1;
        }
        // Group occupies ranks i+1 ..= j; average rank doubled is (i+1) + j.
        let r2 = (i + 1 + j) as u64;
        for r in ranks2.iter_mut().take(j).skip(i) {
            *r = r2;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    let w2_plus: u64 = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| *r)
        .sum();
    let total2: u64 = ranks2.iter().sum();
    let w2_minus = total2 - w2_plus;
    let w2 = w2_plus.min(w2_minus);
    let w = w2 as f64 / 2.0;

    let p = if n <= EXACT_LIMIT {
        exact_p(&ranks2, w2, n)
    } else {
        normal_p(w, n, &tie_sizes)
    };
    Ok(WilcoxonResult { w, p: p.min(1.0), n_effective: n, exact: n <= EXACT_LIMIT })
}

/// P(W <= w2/2 or W >= T - w2/2) over all 2^n sign assignments, counted
/// exactly in doubled-rank space.
fn exact_p(ranks2: &[u64], w2: u64, n: usize) -> f64 {
    let total: u64 = ranks2.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in ranks2 {
        for s in (r as usize..counts.len()).rev() {
            counts[s] += counts[s - r as usize];
        }
    }
    let low: u64 = counts.iter().take(w2 as usize + 1).sum();
    let high: u64 = counts.iter().skip((total - w2) as usize).sum();
    (low + high) as f64 / (1u64 << n) as f64
}

/// Normal approximation with continuity correction and the tie correction
/// sum(t^3 - t) / 48 subtracted from the variance.
fn normal_p(w: f64, n: usize, tie_sizes: &[usize]) -> f64 {
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_sizes
        .iter()
        .map(|&t| {
            let tf = t as f64;
            (tf * tf * tf - tf) / 48.0
        })
        .sum();
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    if var <= 0.0 {
        return 1.0;
    }
    let z = (w - mean + 0.5) / var.sqrt();
    // Two-sided: 2 * Phi(z) for the lower tail statistic.
    libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Bonferroni correction for `m` comparisons.
pub fn bonferroni(p: f64, m: usize) -> f64 {
    (p * m as f64).min(1.0)
}

/// Deterministic subsample of `n` indices stratified by bus count:
/// proportional quotas per distinct count (largest remainder), sampled
/// without replacement inside each stratum.
pub fn stratified_indices(bus_counts: &[usize], n: usize, seed: u64) -> Vec<usize> {
    let total = bus_counts.len();
    if n >= total {
        return (0..total).collect();
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, &c) in bus_counts.iter().enumerate() {
        groups.entry(c).or_default().push(i);
    }
    // Largest-remainder apportionment of n across strata.
    let mut quotas: Vec<(usize, usize, f64)> = groups
        .values()
        .enumerate()
        .map(|(gi, idx)| {
            let share = n as f64 * idx.len() as f64 / total as f64;
            (gi, share.floor() as usize, share - share.floor())
        })
        .collect();
    let assigned: usize = quotas.iter().map(|q| q.1).sum();
    let mut by_rem = quotas.clone();
    by_rem.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0)));
    for q in by_rem.iter().take(n - assigned) {
        quotas[q.0].1 += 1;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for (group, quota) in groups.values().zip(quotas.iter().map(|q| q.1)) {
        let mut pool = group.clone();
        pool.shuffle(&mut rng);
        out.extend(pool.into_iter().take(quota.min(group.len())));
    }
    out.sort_unstable();
    out
}
