//! Synthetic grid generation with power-flow ground truth.
//!
//! Each attempt draws a random connected topology (uniform labeled spanning
//! tree plus Bernoulli extra edges), bus roles, line parameters, and
//! setpoints from the regime's range table, then labels the grid with a
//! Newton-Raphson solve. Draws that fail to converge, or that converge to
//! an implausible operating point, are discarded; generation keeps the
//! first `n_samples` valid attempts in attempt order, so the result is
//! identical no matter how attempts are distributed over threads.
//! Attempt k uses ChaCha stream k of the dataset seed, which is what makes
//! that property hold.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

use crate::grid::{
    build_ybus, edge_features, node_features, to_per_unit, Bus, BusType, Grid, Line, Regime,
    EDGE_FEATURE_DIM, NODE_FEATURE_DIM,
};
use crate::nr::{
    compute_mismatch, flat_init, free_variables, solve_nr, PfSolution, DEFAULT_MAX_ITER,
    DEFAULT_TOL,
};
use crate::{Error, Result};

/// Attempts allowed per requested sample before generation gives up.
pub const ATTEMPT_BUDGET_FACTOR: usize = 10;

/// Per-regime draw ranges (raw units: ohm/km, nF/km, km, MW, MVAr) plus
/// the operating window a kept solution must lie in. Both tables accept a
/// wide voltage band; the heavily loaded transmission table caps angles
/// tighter to stay clear of the steady-state stability limit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParameterRanges {
    pub len_km: (f64, f64),
    pub r_ohm_per_km: (f64, f64),
    pub x_ohm_per_km: (f64, f64),
    pub c_nf_per_km: (f64, f64),
    pub p_mw: (f64, f64),
    pub q_mvar: (f64, f64),
    pub s_base_mva: f64,
    pub v_base_kv: f64,
    /// Accepted voltage band for a kept solution, per-unit.
    pub valid_v: (f64, f64),
    /// Accepted angle band relative to the slack, radians.
    pub valid_theta_max: f64,
}

impl ParameterRanges {
    pub fn mv() -> Self {
        ParameterRanges {
            len_km: (1.0, 20.0),
            r_ohm_per_km: (0.5, 0.6),
            x_ohm_per_km: (0.30, 0.35),
            c_nf_per_km: (8.0, 14.0),
            p_mw: (-5.0, 5.0),
            q_mvar: (-2.0, 2.0),
            s_base_mva: 10.0,
            v_base_kv: 10.0,
            valid_v: (0.8, 1.2),
            valid_theta_max: std::f64::consts::FRAC_PI_2,
        }
    }

    pub fn hv() -> Self {
        ParameterRanges {
            len_km: (1.0, 50.0),
            r_ohm_per_km: (0.15, 0.20),
            x_ohm_per_km: (0.35, 0.45),
            c_nf_per_km: (8.0, 10.0),
            p_mw: (-300.0, 300.0),
            q_mvar: (-150.0, 150.0),
            s_base_mva: 100.0,
            v_base_kv: 110.0,
            valid_v: (0.8, 1.2),
            valid_theta_max: std::f64::consts::FRAC_PI_3,
        }
    }

    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Mv => Self::mv(),
            Regime::Hv => Self::hv(),
        }
    }
}

/// Generation settings. `n_buses` is an inclusive range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub regime: Regime,
    pub n_samples: usize,
    pub n_buses: (usize, usize),
    pub pv_fraction: f64,
    pub extra_edge_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Desk-scale defaults: 3000 MV or 1500 HV samples, 4..=32 buses.
    pub fn new(regime: Regime) -> Self {
        SynthConfig {
            regime,
            n_samples: match regime {
                Regime::Mv => 3000,
                Regime::Hv => 1500,
            },
            n_buses: (4, 32),
            pv_fraction: 0.2,
            extra_edge_prob: 0.1,
            seed: 0,
        }
    }
}

/// Power-flow ground truth for one grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PfTarget {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

/// One labeled sample. Feature blocks are derived from the grid and the
/// flat-start state; they are rebuilt on load rather than serialized.
#[derive(Debug, Clone)]
pub struct Sample {
    pub grid: Grid,
    pub target: PfTarget,
    /// Per-bus features at flat start.
    pub node_x: Vec<[f64; NODE_FEATURE_DIM]>,
    /// Directed edge list: lines in order, (from, to) then (to, from).
    pub edges_dir: Vec<(usize, usize)>,
    /// Feature vector per directed edge, aligned with `edges_dir`.
    pub edge_e: Vec<[f64; EDGE_FEATURE_DIM]>,
}

impl Sample {
    /// Assembles a sample from a grid and its solved state, deriving the
    /// feature blocks. Callers supply targets from `solve_nr` or a fixture.
    pub fn from_parts(grid: Grid, target: PfTarget) -> Self {
        let (v0, t0) = flat_init(&grid);
        let node_x = node_features(&grid, &v0, &t0);
        let mut edges_dir = Vec::with_capacity(grid.lines.len() * 2);
        let mut edge_e = Vec::with_capacity(grid.lines.len() * 2);
        for line in &grid.lines {
            let f = edge_features(line);
            edges_dir.push((line.from, line.to));
            edge_e.push(f);
            edges_dir.push((line.to, line.from));
            edge_e.push(f);
        }
        Sample { grid, target, node_x, edges_dir, edge_e }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<Sample>,
    pub splits: Splits,
    /// Synthesis attempts examined to collect the samples; the solver
    /// convergence rate is `samples.len() / attempts`.
    pub attempts: usize,
}

impl Dataset {
    pub fn split_samples(&self, split: Split) -> Vec<&Sample> {
        let idx = match split {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        };
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Decodes a Pruefer sequence over labels 0..n into its labeled tree.
/// Sequences drawn uniformly give uniformly distributed labeled trees.
fn prufer_decode(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    debug_assert_eq!(seq.len(), n.saturating_sub(2));
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    // Min-heap over current leaves.
    let mut heap: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&i| degree[i] == 1)
        .map(std::cmp::Reverse)
        .collect();
    for &s in seq {
        let std::cmp::Reverse(leaf) = heap.pop().expect("tree invariant");
        edges.push((leaf.min(s), leaf.max(s)));
        degree[s] -= 1;
        if degree[s] == 1 {
            heap.push(std::cmp::Reverse(s));
        }
    }
    let std::cmp::Reverse(a) = heap.pop().expect("two last nodes");
    let std::cmp::Reverse(b) = heap.pop().expect("two last nodes");
    edges.push((a.min(b), a.max(b)));
    edges
}

/// Connected topology on n buses: a uniform spanning tree plus each
/// remaining pair independently with probability `extra_edge_prob`.
/// Edges come out as (low, high) pairs, tree edges first.
pub fn sample_topology(rng: &mut impl Rng, n: usize, extra_edge_prob: f64) -> Vec<(usize, usize)> {
    assert!(n >= 2);
    let tree = if n == 2 {
        vec![(0, 1)]
    } else {
        let seq: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
        prufer_decode(&seq, n)
    };
    let in_tree: std::collections::HashSet<(usize, usize)> = tree.iter().copied().collect();
    let mut edges = tree.clone();
    for i in 0..n {
        for j in i + 1..n {
            if !in_tree.contains(&(i, j)) && rng.gen_bool(extra_edge_prob) {
                edges.push((i, j));
            }
        }
    }
    edges
}

/// Draws a complete grid: topology, bus roles, line electrical parameters,
/// and setpoints. Bus 0 is the slack; each other bus is PV with probability
/// `pv_fraction`. PV active power is drawn from the same range as PQ buses.
pub fn sample_grid(rng: &mut impl Rng, cfg: &SynthConfig, ranges: &ParameterRanges) -> Grid {
    let n = rng.gen_range(cfg.n_buses.0..=cfg.n_buses.1);
    let topo = sample_topology(rng, n, cfg.extra_edge_prob);

    let mut buses = Vec::with_capacity(n);
    buses.push(Bus { bus_type: BusType::Slack, p: 0.0, q: 0.0, v_set: 0.0 });
    for _ in 1..n {
        let bus_type = if rng.gen_bool(cfg.pv_fraction) { BusType::Pv } else { BusType::Pq };
        buses.push(Bus { bus_type, p: 0.0, q: 0.0, v_set: 0.0 });
    }

    let mut lines = Vec::with_capacity(topo.len());
    for (f, t) in topo {
        let len = rng.gen_range(ranges.len_km.0..ranges.len_km.1);
        let r = rng.gen_range(ranges.r_ohm_per_km.0..ranges.r_ohm_per_km.1);
        let x = rng.gen_range(ranges.x_ohm_per_km.0..ranges.x_ohm_per_km.1);
        let c = rng.gen_range(ranges.c_nf_per_km.0..ranges.c_nf_per_km.1);
        let (r_pu, x_pu, b_pu) = to_per_unit(r, x, c, len, ranges.s_base_mva, ranges.v_base_kv);
        lines.push(Line { from: f, to: t, r: r_pu, x: x_pu, b: b_pu, len_km: len });
    }

    for bus in buses.iter_mut() {
        match bus.bus_type {
            BusType::Slack => {
                bus.v_set = rng.gen_range(0.9..1.1);
            }
            BusType::Pv => {
                bus.p = rng.gen_range(ranges.p_mw.0..ranges.p_mw.1) / ranges.s_base_mva;
                bus.v_set = rng.gen_range(0.9..1.1);
            }
            BusType::Pq => {
                bus.p = rng.gen_range(ranges.p_mw.0..ranges.p_mw.1) / ranges.s_base_mva;
                bus.q = rng.gen_range(ranges.q_mvar.0..ranges.q_mvar.1) / ranges.s_base_mva;
            }
        }
    }

    Grid {
        s_base: ranges.s_base_mva,
        v_base: ranges.v_base_kv,
        regime: cfg.regime,
        buses,
        lines,
    }
}

/// Newton-Raphson can land on mathematically valid but physically spurious
/// roots (negative magnitudes, angles rotated by full turns), and heavily
/// loaded draws converge to collapse-adjacent states no operator would run.
/// Both are invalid operating points and are rejected like non-convergent
/// cases; the bands are the regime's steady-state operating limits.
fn plausible_operating_point(ranges: &ParameterRanges, sol: &PfSolution) -> bool {
    sol.v.iter().all(|&v| (ranges.valid_v.0..=ranges.valid_v.1).contains(&v))
        && sol.theta.iter().all(|&t| t.abs() <= ranges.valid_theta_max)
}

fn attempt_sample(cfg: &SynthConfig, ranges: &ParameterRanges, attempt: u64) -> Option<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(attempt);
    let grid = sample_grid(&mut rng, cfg, ranges);
    let ybus = build_ybus(&grid).ok()?;
    let sol = solve_nr(&grid, &ybus, DEFAULT_TOL, DEFAULT_MAX_ITER);
    if !sol.converged || !plausible_operating_point(ranges, &sol) {
        return None;
    }
    Some(Sample::from_parts(grid, PfTarget { v: sol.v, theta: sol.theta }))
}

/// Generates the dataset serially. See [`generate_dataset_threaded`] for the
/// multi-worker variant with identical output.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    generate_with_ranges(cfg, &ParameterRanges::for_regime(cfg.regime), 1)
}

/// Generates the dataset with up to `threads` workers. Attempts are
/// processed in fixed-size blocks and filtered in attempt order, so output
/// does not depend on the worker count.
pub fn generate_dataset_threaded(cfg: &SynthConfig, threads: usize) -> Result<Dataset> {
    generate_with_ranges(cfg, &ParameterRanges::for_regime(cfg.regime), threads)
}

/// Generation core with an explicit parameter table (the standard tables
/// come from [`ParameterRanges::for_regime`]).
pub fn generate_with_ranges(
    cfg: &SynthConfig,
    ranges: &ParameterRanges,
    threads: usize,
) -> Result<Dataset> {
    let budget = cfg.n_samples * ATTEMPT_BUDGET_FACTOR;
    let threads = threads.max(1);
    let mut kept: Vec<Sample> = Vec::with_capacity(cfg.n_samples);
    let mut next_attempt: usize = 0;
    let mut examined: usize = 0;

    while kept.len() < cfg.n_samples && next_attempt < budget {
        let want = cfg.n_samples - kept.len();
        // Oversample the block mildly to amortize rejections.
        let block = (want + want / 2 + 1).min(budget - next_attempt);
        let lo = next_attempt;
        let hi = next_attempt + block;
        let results: Vec<Option<Sample>> = if threads == 1 {
            (lo..hi).map(|a| attempt_sample(cfg, ranges, a as u64)).collect()
        } else {
            let chunk = block.div_ceil(threads);
            let mut out: Vec<Option<Sample>> = Vec::with_capacity(block);
            std::thread::scope(|scope| {
                let mut handles = Vec::new();
                for w in 0..threads {
                    let start = lo + w * chunk;
                    let end = (start + chunk).min(hi);
                    if start >= end {
                        break;
                    }
                    handles.push(scope.spawn(move || {
                        (start..end)
                            .map(|a| attempt_sample(cfg, ranges, a as u64))
                            .collect::<Vec<_>>()
                    }));
                }
                for h in handles {
                    out.extend(h.join().expect("generation worker"));
                }
            });
            out
        };
        for (i, s) in results.into_iter().enumerate() {
            if kept.len() == cfg.n_samples {
                break;
            }
            examined = lo + i + 1;
            if let Some(s) = s {
                kept.push(s);
            }
        }
        next_attempt = hi;
    }

    if kept.len() < cfg.n_samples {
        return Err(Error::GenerationBudget {
            kept: kept.len(),
            requested: cfg.n_samples,
            attempts: budget,
        });
    }

    Ok(Dataset {
        config: cfg.clone(),
        splits: make_splits(cfg.n_samples, cfg.seed),
        samples: kept,
        attempts: examined,
    })
}

/// Seeded 1:1:1 split. Indices are shuffled with a dedicated stream of the
/// dataset seed and dealt out as train / val / test thirds (train absorbs
/// the remainder), then sorted for stable iteration order.
pub fn make_splits(n: usize, seed: u64) -> Splits {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let third = n / 3;
    let train_len = n - 2 * third;
    let mut train: Vec<usize> = idx[..train_len].to_vec();
    let mut val: Vec<usize> = idx[train_len..train_len + third].to_vec();
    let mut test: Vec<usize> = idx[train_len + third..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Splits { train, val, test }
}

#[derive(Serialize, Deserialize)]
struct JsonlHeader {
    config: SynthConfig,
    splits: Splits,
    attempts: usize,
}

#[derive(Serialize, Deserialize)]
struct JsonlSample {
    grid: Grid,
    target: PfTarget,
}

/// Writes the dataset as JSON lines: a header object with config and splits,
/// then one sample per line.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    let header = JsonlHeader {
        config: dataset.config.clone(),
        splits: dataset.splits.clone(),
        attempts: dataset.attempts,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        let line = JsonlSample { grid: s.grid.clone(), target: s.target.clone() };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSONL dataset and rebuilds the derived feature blocks.
pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::MalformedDataset { line: 1, msg: "empty file".into() })??;
    let header: JsonlHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::MalformedDataset { line: 1, msg: e.to_string() })?;
    let mut samples = Vec::new();
    for (k, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: JsonlSample = serde_json::from_str(&line)
            .map_err(|e| Error::MalformedDataset { line: k + 2, msg: e.to_string() })?;
        parsed.grid.validate().map_err(|e| Error::MalformedDataset {
            line: k + 2,
            msg: e.to_string(),
        })?;
        if parsed.target.v.len() != parsed.grid.n() || parsed.target.theta.len() != parsed.grid.n()
        {
            return Err(Error::MalformedDataset {
                line: k + 2,
                msg: "target length does not match bus count".into(),
            });
        }
        samples.push(Sample::from_parts(parsed.grid, parsed.target));
    }
    if samples.len() != header.config.n_samples {
        return Err(Error::MalformedDataset {
            line: samples.len() + 1,
            msg: format!(
                "header promises {} samples, found {}",
                header.config.n_samples,
                samples.len()
            ),
        });
    }
    Ok(Dataset {
        config: header.config,
        samples,
        splits: header.splits,
        attempts: header.attempts,
    })
}

/// Residual check for a labeled sample: infinity norm of the solved-system
/// mismatch at the stored target.
pub fn target_mismatch(sample: &Sample) -> Result<f64> {
    let ybus = build_ybus(&sample.grid)?;
    let (dp, dq) = compute_mismatch(&sample.grid, &ybus, &sample.target.v, &sample.target.theta);
    let (theta_idx, v_idx) = free_variables(&sample.grid);
    let mut norm: f64 = 0.0;
    for &i in &theta_idx {
        norm = norm.max(dp[i].abs());
    }
    for &i in &v_idx {
        norm = norm.max(dq[i].abs());
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(regime: Regime, n_samples: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            regime,
            n_samples,
            n_buses: (4, 12),
            pv_fraction: 0.2,
            extra_edge_prob: 0.1,
            seed,
        }
    }

    #[test]
    fn prufer_star_decode() {
        let edges = prufer_decode(&[3, 3], 4);
        assert_eq!(edges, vec![(0, 3), (1, 3), (2, 3)]);
    }

    #[test]
    fn topology_full_probability_gives_complete_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let edges = sample_topology(&mut rng, 6, 1.0);
        assert_eq!(edges.len(), 15);
        let set: std::collections::HashSet<_> = edges.iter().copied().collect();
        assert_eq!(set.len(), 15, "no duplicate edges");
    }

    #[test]
    fn topology_zero_probability_gives_tree() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 2 + (seed as usize % 14);
            let edges = sample_topology(&mut rng, n, 0.0);
            assert_eq!(edges.len(), n - 1);
        }
    }

    #[test]
    fn spanning_trees_on_three_nodes_are_uniform() {
        // Three labeled trees on 3 nodes, keyed by the node of degree 2.
        let mut counts = [0usize; 3];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let trials = 3000;
        for _ in 0..trials {
            let edges = sample_topology(&mut rng, 3, 0.0);
            let mut deg = [0usize; 3];
            for (a, b) in edges {
                deg[a] += 1;
                deg[b] += 1;
            }
            counts[deg.iter().position(|&d| d == 2).unwrap()] += 1;
        }
        for c in counts {
            let frac = c as f64 / trials as f64;
            assert!((0.28..0.39).contains(&frac), "tree center fraction {frac}");
        }
    }

    #[test]
    fn sampled_grids_follow_regime_ranges() {
        let cfg = small_cfg(Regime::Hv, 1, 3);
        let ranges = ParameterRanges::hv();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let grid = sample_grid(&mut rng, &cfg, &ranges);
            grid.validate().unwrap();
            assert_eq!(grid.buses[0].bus_type, BusType::Slack);
            for bus in &grid.buses {
                // HV active power in per-unit of 100 MVA: [-3, 3].
                assert!(bus.p.abs() <= 3.0);
                assert!(bus.q.abs() <= 1.5);
                if bus.bus_type != BusType::Pq {
                    assert!((0.9..1.1).contains(&bus.v_set));
                }
            }
            let z_base = 110.0 * 110.0 / 100.0;
            for line in &grid.lines {
                assert!(line.len_km >= 1.0 && line.len_km < 50.0);
                let r_per_km = line.r * z_base / line.len_km;
                assert!((0.15..0.20).contains(&r_per_km), "r/km {r_per_km}");
            }
        }
    }

    #[test]
    fn pv_fraction_extremes() {
        let ranges = ParameterRanges::mv();
        let mut cfg = small_cfg(Regime::Mv, 1, 0);
        cfg.pv_fraction = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = sample_grid(&mut rng, &cfg, &ranges);
        assert!(g.buses.iter().all(|b| b.bus_type != BusType::Pv));
        cfg.pv_fraction = 1.0;
        let g = sample_grid(&mut rng, &cfg, &ranges);
        assert!(g.buses.iter().skip(1).all(|b| b.bus_type == BusType::Pv));
    }

    #[test]
    fn kept_solutions_are_plausible_operating_points() {
        for regime in [Regime::Mv, Regime::Hv] {
            let bands = ParameterRanges::for_regime(regime);
            let ds = generate_dataset(&small_cfg(regime, 40, 19)).unwrap();
            for s in &ds.samples {
                for &v in &s.target.v {
                    assert!((bands.valid_v.0..=bands.valid_v.1).contains(&v), "v = {v}");
                }
                for &t in &s.target.theta {
                    assert!(t.abs() <= bands.valid_theta_max, "theta = {t}");
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_converged() {
        let cfg = small_cfg(Regime::Mv, 30, 7);
        let d1 = generate_dataset(&cfg).unwrap();
        let d2 = generate_dataset(&cfg).unwrap();
        assert_eq!(d1.samples.len(), 30);
        for (a, b) in d1.samples.iter().zip(&d2.samples) {
            assert_eq!(a.target.v, b.target.v);
            assert_eq!(a.grid.lines.len(), b.grid.lines.len());
        }
        for s in &d1.samples {
            assert!(target_mismatch(s).unwrap() <= DEFAULT_TOL);
            let n = s.grid.n();
            assert!((4..=12).contains(&n));
            assert_eq!(s.node_x.len(), n);
            assert_eq!(s.edge_e.len(), 2 * s.grid.lines.len());
        }
    }

    #[test]
    fn threaded_generation_matches_serial() {
        let cfg = small_cfg(Regime::Mv, 25, 13);
        let serial = generate_dataset(&cfg).unwrap();
        let threaded = generate_dataset_threaded(&cfg, 4).unwrap();
        for (a, b) in serial.samples.iter().zip(&threaded.samples) {
            assert_eq!(a.target.v, b.target.v);
            assert_eq!(a.target.theta, b.target.theta);
            assert_eq!(a.grid.buses.len(), b.grid.buses.len());
        }
        assert_eq!(serial.splits, threaded.splits);
    }

    #[test]
    fn splits_are_disjoint_and_cover() {
        let splits = make_splits(100, 3);
        assert_eq!(splits.train.len(), 34);
        assert_eq!(splits.val.len(), 33);
        assert_eq!(splits.test.len(), 33);
        let mut all: Vec<usize> = splits
            .train
            .iter()
            .chain(&splits.val)
            .chain(&splits.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // Seeded: same seed reproduces, different seed differs.
        assert_eq!(make_splits(100, 3), splits);
        assert_ne!(make_splits(100, 4).train, splits.train);
    }

    #[test]
    fn hv_generation_works() {
        let cfg = small_cfg(Regime::Hv, 20, 21);
        let d = generate_dataset(&cfg).unwrap();
        assert_eq!(d.samples.len(), 20);
        for s in &d.samples {
            assert_eq!(s.grid.regime, Regime::Hv);
            assert!(target_mismatch(s).unwrap() <= DEFAULT_TOL);
        }
    }

    #[test]
    fn impossible_parameters_exhaust_budget() {
        let cfg = small_cfg(Regime::Mv, 5, 1);
        let mut ranges = ParameterRanges::mv();
        // Loads far beyond any loadability limit.
        ranges.p_mw = (-900.0, -800.0);
        let err = generate_with_ranges(&cfg, &ranges, 1).unwrap_err();
        assert!(matches!(err, Error::GenerationBudget { requested: 5, .. }));
    }

    #[test]
    fn jsonl_round_trip() {
        let cfg = small_cfg(Regime::Mv, 12, 19);
        let d = generate_dataset(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        save_jsonl(&d, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert_eq!(back.samples.len(), d.samples.len());
        assert_eq!(back.splits, d.splits);
        assert_eq!(back.config.seed, d.config.seed);
        for (a, b) in d.samples.iter().zip(&back.samples) {
            // serde_json round-trips f64 exactly.
            assert_eq!(a.target.v, b.target.v);
            assert_eq!(a.target.theta, b.target.theta);
            assert_eq!(a.node_x, b.node_x);
            assert_eq!(a.edge_e, b.edge_e);
            for (la, lb) in a.grid.lines.iter().zip(&b.grid.lines) {
                assert_eq!(la.r, lb.r);
                assert_eq!(la.x, lb.x);
                assert_eq!(la.b, lb.b);
            }
        }
        // Save again: byte-identical files.
        let path2 = dir.path().join("data2.jsonl");
        save_jsonl(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn malformed_jsonl_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"config\":bad}\n").unwrap();
        let err = load_jsonl(&path).unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
    }
}
