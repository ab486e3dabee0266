//! Newton-Raphson AC power flow in polar coordinates.
//!
//! Unknowns are the voltage angles at PV and PQ buses and the voltage
//! magnitudes at PQ buses. The mismatch vector stacks dP at PV+PQ buses over
//! dQ at PQ buses, with dP = p_set - p_calc and dQ = q_set - q_calc, so the
//! Jacobian here is the derivative of that mismatch (the negative of the
//! textbook power Jacobian).

use crate::grid::{BusType, Grid, Ybus};
use crate::{Error, Result};

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 30;

/// Solver output. `singular` marks runs aborted on a singular Jacobian;
/// such runs always have `converged = false`.
#[derive(Debug, Clone)]
pub struct PfSolution {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub max_mismatch: f64,
    pub singular: bool,
}

/// Flat start: slack and PV magnitudes at their setpoints, PQ magnitudes at
/// 1.0, all angles 0.
pub fn flat_init(grid: &Grid) -> (Vec<f64>, Vec<f64>) {
    let v = grid
        .buses
        .iter()
        .map(|b| match b.bus_type {
            BusType::Slack | BusType::Pv => b.v_set,
            BusType::Pq => 1.0,
        })
        .collect();
    (v, vec![0.0; grid.n()])
}

/// Computed complex power injections: p_i = v_i sum_k v_k (G cos + B sin),
/// q_i = v_i sum_k v_k (G sin - B cos) with angle differences theta_i - theta_k.
pub fn compute_injections(ybus: &Ybus, v: &[f64], theta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = ybus.n;
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        let (mut pi, mut qi) = (0.0, 0.0);
        for k in 0..n {
            let g = ybus.g[i * n + k];
            let b = ybus.b[i * n + k];
            if g == 0.0 && b == 0.0 {
                continue;
            }
            let d = theta[i] - theta[k];
            let (s, c) = d.sin_cos();
            pi += v[k] * (g * c + b * s);
            qi += v[k] * (g * s - b * c);
        }
        p[i] = v[i] * pi;
        q[i] = v[i] * qi;
    }
    (p, q)
}

/// Full-length mismatch vectors: dp = p_set - p_calc, dq = q_set - q_calc.
/// Rows for the slack bus (and dq rows for PV buses) are reported but not
/// part of the solved system.
pub fn compute_mismatch(
    grid: &Grid,
    ybus: &Ybus,
    v: &[f64],
    theta: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (p, q) = compute_injections(ybus, v, theta);
    let dp = grid.buses.iter().zip(&p).map(|(b, pc)| b.p - pc).collect();
    let dq = grid.buses.iter().zip(&q).map(|(b, qc)| b.q - qc).collect();
    (dp, dq)
}

/// Bus indices of the free variables: angles at PV+PQ buses, magnitudes at
/// PQ buses, both in ascending bus order.
pub fn free_variables(grid: &Grid) -> (Vec<usize>, Vec<usize>) {
    let theta_idx = grid
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.bus_type != BusType::Slack)
        .map(|(i, _)| i)
        .collect();
    let v_idx = grid
        .buses
        .iter()
        .enumerate()
        .filter(|(_, b)| b.bus_type == BusType::Pq)
        .map(|(i, _)| i)
        .collect();
    (theta_idx, v_idx)
}

/// Dense mismatch Jacobian restricted to the free variables. Row order is
/// [dP at theta_idx buses, dQ at v_idx buses]; column order [theta, v].
/// Entries match central finite differences of [`compute_mismatch`].
pub fn jacobian(grid: &Grid, ybus: &Ybus, v: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = ybus.n;
    let (theta_idx, v_idx) = free_variables(grid);
    let (p, q) = compute_injections(ybus, v, theta);
    let m = theta_idx.len() + v_idx.len();
    let mut jac = vec![0.0; m * m];
    // d p_calc / d x and d q_calc / d x, negated into the mismatch Jacobian.
    let set = |r: usize, c: usize, val: f64, jac: &mut Vec<f64>| {
        jac[r * m + c] = -val;
    };
    for (r, &i) in theta_idx.iter().enumerate() {
        // dP_i rows.
        for (c, &j) in theta_idx.iter().enumerate() {
            let val = if i == j {
                -q[i] - ybus.b[i * n + i] * v[i] * v[i]
            } else {
                let d = theta[i] - theta[j];
                let (s, cs) = d.sin_cos();
                v[i] * v[j] * (ybus.g[i * n + j] * s - ybus.b[i * n + j] * cs)
            };
            set(r, c, val, &mut jac);
        }
        for (c, &j) in v_idx.iter().enumerate() {
            let val = if i == j {
                p[i] / v[i] + ybus.g[i * n + i] * v[i]
            } else {
                let d = theta[i] - theta[j];
                let (s, cs) = d.sin_cos();
                v[i] * (ybus.g[i * n + j] * cs + ybus.b[i * n + j] * s)
            };
            set(r, theta_idx.len() + c, val, &mut jac);
        }
    }
    for (r, &i) in v_idx.iter().enumerate() {
        // dQ_i rows.
        let row = theta_idx.len() + r;
        for (c, &j) in theta_idx.iter().enumerate() {
            let val = if i == j {
                p[i] - ybus.g[i * n + i] * v[i] * v[i]
            } else {
                let d = theta[i] - theta[j];
                let (s, cs) = d.sin_cos();
                -v[i] * v[j] * (ybus.g[i * n + j] * cs + ybus.b[i * n + j] * s)
            };
            set(row, c, val, &mut jac);
        }
        for (c, &j) in v_idx.iter().enumerate() {
            let val = if i == j {
                q[i] / v[i] - ybus.b[i * n + i] * v[i]
            } else {
                let d = theta[i] - theta[j];
                let (s, cs) = d.sin_cos();
                v[i] * (ybus.g[i * n + j] * s - ybus.b[i * n + j] * cs)
            };
            set(row, theta_idx.len() + c, val, &mut jac);
        }
    }
    jac
}

/// In-place dense LU solve with partial pivoting, a @ x = b for square a.
pub fn lu_solve(a: &mut [f64], b: &mut [f64]) -> Result<()> {
    let m = b.len();
    debug_assert_eq!(a.len(), m * m);
    let mut perm: Vec<usize> = (0..m).collect();
    for col in 0..m {
        let mut piv = col;
        let mut best = a[perm[col] * m + col].abs();
        for r in col + 1..m {
            let cand = a[perm[r] * m + col].abs();
            if cand > best {
                best = cand;
                piv = r;
            }
        }
        if best < 1e-12 {
            return Err(Error::SingularMatrix { pivot: col });
        }
        perm.swap(col, piv);
        let prow = perm[col];
        let pval = a[prow * m + col];
        for r in col + 1..m {
            let row = perm[r];
            let f = a[row * m + col] / pval;
            if f != 0.0 {
                a[row * m + col] = f;
                for c in col + 1..m {
                    a[row * m + c] -= f * a[prow * m + c];
                }
            }
        }
    }
    // Forward substitution on the permuted rows.
    let mut y = vec![0.0; m];
    for r in 0..m {
        let row = perm[r];
        let mut s = b[row];
        for c in 0..r {
            s -= a[row * m + c] * y[c];
        }
        y[r] = s;
    }
    // Back substitution.
    for r in (0..m).rev() {
        let row = perm[r];
        let mut s = y[r];
        for c in r + 1..m {
            s -= a[row * m + c] * b[c];
        }
        b[r] = s / a[row * m + r];
    }
    Ok(())
}

/// Infinity norm of the solved-system mismatch at a state.
fn masked_mismatch_norm(grid: &Grid, ybus: &Ybus, v: &[f64], theta: &[f64]) -> f64 {
    let (dp, dq) = compute_mismatch(grid, ybus, v, theta);
    let (theta_idx, v_idx) = free_variables(grid);
    let mut norm: f64 = 0.0;
    for &i in &theta_idx {
        norm = norm.max(dp[i].abs());
    }
    for &i in &v_idx {
        norm = norm.max(dq[i].abs());
    }
    norm
}

/// Full Newton-Raphson solve from flat start. Never panics on bad grids:
/// singular Jacobians and numerical blowups yield `converged = false`.
pub fn solve_nr(grid: &Grid, ybus: &Ybus, tol: f64, max_iter: usize) -> PfSolution {
    let (mut v, mut theta) = flat_init(grid);
    let (theta_idx, v_idx) = free_variables(grid);
    let m = theta_idx.len() + v_idx.len();
    let mut iterations = 0;
    let mut singular = false;

    loop {
        let norm = masked_mismatch_norm(grid, ybus, &v, &theta);
        if !norm.is_finite() {
            return PfSolution { v, theta, converged: false, iterations, max_mismatch: norm, singular };
        }
        if norm <= tol {
            return PfSolution { v, theta, converged: true, iterations, max_mismatch: norm, singular };
        }
        if iterations >= max_iter || m == 0 {
            return PfSolution { v, theta, converged: false, iterations, max_mismatch: norm, singular };
        }

        let (dp, dq) = compute_mismatch(grid, ybus, &v, &theta);
        let mut jac = jacobian(grid, ybus, &v, &theta);
        // Newton step on the mismatch root: J dx = -mismatch.
        let mut rhs = Vec::with_capacity(m);
        for &i in &theta_idx {
            rhs.push(-dp[i]);
        }
        for &i in &v_idx {
            rhs.push(-dq[i]);
        }
        if lu_solve(&mut jac, &mut rhs).is_err() {
            singular = true;
            let norm = masked_mismatch_norm(grid, ybus, &v, &theta);
            return PfSolution { v, theta, converged: false, iterations, max_mismatch: norm, singular };
        }
        for (k, &i) in theta_idx.iter().enumerate() {
            theta[i] += rhs[k];
        }
        for (k, &i) in v_idx.iter().enumerate() {
            v[i] += rhs[theta_idx.len() + k];
        }
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_ybus, Bus, BusType, Line, Regime};

    fn two_bus(p_load: f64, x: f64) -> Grid {
        Grid {
            s_base: 10.0,
            v_base: 10.0,
            regime: Regime::Mv,
            buses: vec![
                Bus { bus_type: BusType::Slack, p: 0.0, q: 0.0, v_set: 1.0 },
                Bus { bus_type: BusType::Pq, p: p_load, q: 0.0, v_set: 0.0 },
            ],
            lines: vec![Line { from: 0, to: 1, r: 0.0, x, b: 0.0, len_km: 1.0 }],
        }
    }

    /// Closed-form solution of the lossless two-bus problem with q_set = 0:
    /// writing V2 = a + jb, P = b/x and a^2 - a + b^2 = 0.
    fn two_bus_analytic(p: f64, x: f64) -> (f64, f64) {
        let b = p * x;
        let a = (1.0 + (1.0 - 4.0 * b * b).sqrt()) / 2.0;
        ((a * a + b * b).sqrt(), b.atan2(a))
    }

    #[test]
    fn flat_init_respects_setpoints() {
        let mut grid = two_bus(-0.5, 0.1);
        grid.buses[0].v_set = 1.04;
        grid.buses.push(Bus { bus_type: BusType::Pv, p: 0.2, q: 0.0, v_set: 0.97 });
        grid.lines.push(Line { from: 1, to: 2, r: 0.0, x: 0.2, b: 0.0, len_km: 1.0 });
        let (v, th) = flat_init(&grid);
        assert_eq!(v, vec![1.04, 1.0, 0.97]);
        assert_eq!(th, vec![0.0; 3]);
    }

    #[test]
    fn two_bus_matches_closed_form() {
        let grid = two_bus(-0.5, 0.1);
        let ybus = build_ybus(&grid).unwrap();
        let sol = solve_nr(&grid, &ybus, 1e-10, 30);
        assert!(sol.converged, "mismatch {}", sol.max_mismatch);
        let (v_ref, th_ref) = two_bus_analytic(-0.5, 0.1);
        assert!((sol.v[1] - v_ref).abs() <= 1e-8, "v {} vs {}", sol.v[1], v_ref);
        assert!((sol.theta[1] - th_ref).abs() <= 1e-8);
        assert_eq!(sol.v[0], 1.0);
        assert_eq!(sol.theta[0], 0.0);
    }

    #[test]
    fn infeasible_load_does_not_converge() {
        // Lossless x = 0.1 transfers at most |P| = 1/(4x) = 2.5 with q = 0
        // load; 1/(2x) = 5 is the hard bound from the quadratic.
        let grid = two_bus(-6.0, 0.1);
        let ybus = build_ybus(&grid).unwrap();
        let sol = solve_nr(&grid, &ybus, 1e-8, 30);
        assert!(!sol.converged);
    }

    #[test]
    fn mismatch_matches_line_flow_formula() {
        let grid = two_bus(0.0, 0.1);
        let ybus = build_ybus(&grid).unwrap();
        let v = [1.0, 1.0];
        let theta = [0.0, -0.05];
        let (dp, _) = compute_mismatch(&grid, &ybus, &v, &theta);
        // p2_calc = (v1 v2 / x) sin(theta2 - theta1).
        let p2 = (1.0 / 0.1) * (-0.05f64).sin();
        assert!((dp[1] - (0.0 - p2)).abs() < 1e-12);
        assert!((dp[1] - 0.4997916927067833).abs() < 1e-12);
        // Lossless line: injections at the two ends cancel.
        let p1 = (1.0 / 0.1) * (0.05f64).sin();
        assert!((dp[0] - (0.0 - p1)).abs() < 1e-12);
    }

    #[test]
    fn jacobian_hand_value_two_bus() {
        let grid = two_bus(-0.5, 0.1);
        let ybus = build_ybus(&grid).unwrap();
        let (v, theta) = flat_init(&grid);
        let jac = jacobian(&grid, &ybus, &v, &theta);
        // Free vars: [theta2, v2]; d(dP2)/d(theta2) = -(v1 v2 / x) cos(0) = -10.
        assert!((jac[0] - (-10.0)).abs() < 1e-12);
    }

    fn random_grid(seed: u64, n: usize) -> Grid {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut buses = vec![Bus { bus_type: BusType::Slack, p: 0.0, q: 0.0, v_set: 1.0 }];
        for _ in 1..n {
            if rng.gen_bool(0.3) {
                buses.push(Bus {
                    bus_type: BusType::Pv,
                    p: rng.gen_range(-0.3..0.3),
                    q: 0.0,
                    v_set: rng.gen_range(0.95..1.05),
                });
            } else {
                buses.push(Bus {
                    bus_type: BusType::Pq,
                    p: rng.gen_range(-0.3..0.3),
                    q: rng.gen_range(-0.15..0.15),
                    v_set: 0.0,
                });
            }
        }
        let mut lines = Vec::new();
        for i in 1..n {
            let j = rng.gen_range(0..i);
            lines.push(Line {
                from: j,
                to: i,
                r: rng.gen_range(0.01..0.08),
                x: rng.gen_range(0.05..0.2),
                b: rng.gen_range(0.0..0.02),
                len_km: 1.0,
            });
        }
        Grid { s_base: 10.0, v_base: 10.0, regime: Regime::Mv, buses, lines }
    }

    #[test]
    fn jacobian_matches_central_differences() {
        for seed in 0..10u64 {
            let grid = random_grid(seed, 6);
            let ybus = build_ybus(&grid).unwrap();
            // Evaluate away from flat start so off-diagonal trig terms are live.
            let mut v: Vec<f64>;
            let mut theta: Vec<f64>;
            {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed + 100);
                let (v0, t0) = flat_init(&grid);
                v = v0;
                theta = t0;
                for i in 0..6 {
                    v[i] *= rng.gen_range(0.97..1.03);
                    theta[i] += rng.gen_range(-0.05..0.05);
                }
            }
            let (theta_idx, v_idx) = free_variables(&grid);
            let m = theta_idx.len() + v_idx.len();
            let jac = jacobian(&grid, &ybus, &v, &theta);

            let masked = |grid: &Grid, v: &[f64], th: &[f64]| -> Vec<f64> {
                let (dp, dq) = compute_mismatch(grid, &ybus, v, th);
                theta_idx
                    .iter()
                    .map(|&i| dp[i])
                    .chain(v_idx.iter().map(|&i| dq[i]))
                    .collect()
            };
            let h = 1e-6;
            for c in 0..m {
                let (mut vp, mut tp) = (v.clone(), theta.clone());
                let (mut vm, mut tm) = (v.clone(), theta.clone());
                if c < theta_idx.len() {
                    tp[theta_idx[c]] += h;
                    tm[theta_idx[c]] -= h;
                } else {
                    vp[v_idx[c - theta_idx.len()]] += h;
                    vm[v_idx[c - theta_idx.len()]] -= h;
                }
                let fp = masked(&grid, &vp, &tp);
                let fm = masked(&grid, &vm, &tm);
                for r in 0..m {
                    let fd = (fp[r] - fm[r]) / (2.0 * h);
                    let ad = jac[r * m + c];
                    let denom = ad.abs().max(fd.abs()).max(1.0);
                    assert!(
                        (ad - fd).abs() / denom <= 1e-5,
                        "seed {seed} entry ({r},{c}): analytic {ad} vs fd {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn converged_solutions_have_nonnegative_losses() {
        let mut solved = 0;
        for seed in 0..20u64 {
            let grid = random_grid(seed, 8);
            let ybus = build_ybus(&grid).unwrap();
            let sol = solve_nr(&grid, &ybus, 1e-8, 30);
            if !sol.converged {
                continue;
            }
            solved += 1;
            let (p, _) = compute_injections(&ybus, &sol.v, &sol.theta);
            let losses: f64 = p.iter().sum();
            assert!(losses >= -1e-8, "seed {seed}: losses {losses}");
            // PV magnitudes pinned at their setpoints.
            for (bus, &vi) in grid.buses.iter().zip(&sol.v) {
                if bus.bus_type == BusType::Pv {
                    assert_eq!(vi, bus.v_set);
                }
            }
        }
        assert!(solved >= 15, "only {solved}/20 random grids converged");
    }

    #[test]
    fn solver_permutation_equivariant() {
        let grid = random_grid(3, 6);
        let ybus = build_ybus(&grid).unwrap();
        let sol = solve_nr(&grid, &ybus, 1e-10, 30);
        assert!(sol.converged);

        let perm = [4usize, 2, 0, 5, 1, 3];
        let mut pg = grid.clone();
        let mut new_buses = vec![grid.buses[0].clone(); 6];
        for i in 0..6 {
            new_buses[perm[i]] = grid.buses[i].clone();
        }
        pg.buses = new_buses;
        for line in &mut pg.lines {
            line.from = perm[line.from];
            line.to = perm[line.to];
        }
        let pybus = build_ybus(&pg).unwrap();
        let psol = solve_nr(&pg, &pybus, 1e-10, 30);
        assert!(psol.converged);
        for i in 0..6 {
            assert!((sol.v[i] - psol.v[perm[i]]).abs() < 1e-6);
            assert!((sol.theta[i] - psol.theta[perm[i]]).abs() < 1e-6);
        }
    }

    #[test]
    fn lu_solves_and_flags_singular() {
        let mut a = vec![2.0, 1.0, 1.0, 3.0];
        let mut b = vec![5.0, 10.0];
        lu_solve(&mut a, &mut b).unwrap();
        // Solution of [[2,1],[1,3]] x = [5,10]: x = [1, 3].
        assert!((b[0] - 1.0).abs() < 1e-12);
        assert!((b[1] - 3.0).abs() < 1e-12);

        let mut a = vec![1.0, 2.0, 2.0, 4.0];
        let mut b = vec![1.0, 2.0];
        assert!(matches!(
            lu_solve(&mut a, &mut b),
            Err(Error::SingularMatrix { .. })
        ));
    }
}
