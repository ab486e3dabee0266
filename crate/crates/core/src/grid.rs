//! Grid data model: buses, lines, per-unit conversion, admittance matrix,
//! and the feature encodings consumed by the model.
//!
//! All electrical quantities on [`Grid`] are in per-unit on the grid's own
//! (s_base, v_base). System frequency is fixed at 50 Hz.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Width of a node feature row.
pub const NODE_FEATURE_DIM: usize = 8;
/// Width of an edge feature vector.
pub const EDGE_FEATURE_DIM: usize = 4;
/// System frequency in Hz used for shunt susceptance conversion.
pub const FREQUENCY_HZ: f64 = 50.0;
/// Lines with |z| below this are rejected as degenerate.
pub const MIN_IMPEDANCE: f64 = 1e-12;

/// Role of a bus in the power-flow problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BusType {
    /// Fixed complex voltage (magnitude setpoint, angle 0). Exactly one per grid.
    Slack,
    /// Fixed active power injection and voltage magnitude.
    Pv,
    /// Fixed active and reactive power injection.
    Pq,
}

/// Voltage regime of a synthesized grid. Selects the parameter table row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Regime {
    Mv,
    Hv,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Regime::Mv => write!(f, "MV"),
            Regime::Hv => write!(f, "HV"),
        }
    }
}

/// One bus. Power setpoints are per-unit injections (generation positive,
/// load negative). `v_set` is meaningful for slack and PV buses and stored
/// as 0 for PQ buses. The slack angle is always 0 rad.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Bus {
    #[serde(rename = "type")]
    pub bus_type: BusType,
    pub p: f64,
    pub q: f64,
    pub v_set: f64,
}

/// One branch with series impedance r + jx and total shunt susceptance b
/// (pi model: b/2 at each end), all per-unit. `len_km` is kept for
/// bookkeeping and feature checks; the electrical data is already converted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Line {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    pub len_km: f64,
}

/// A complete per-unit grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grid {
    /// Apparent power base in MVA.
    pub s_base: f64,
    /// Voltage base in kV.
    pub v_base: f64,
    pub regime: Regime,
    pub buses: Vec<Bus>,
    pub lines: Vec<Line>,
}

impl Grid {
    pub fn n(&self) -> usize {
        self.buses.len()
    }

    /// Index of the slack bus. Valid only after [`Grid::validate`].
    pub fn slack(&self) -> usize {
        self.buses
            .iter()
            .position(|b| b.bus_type == BusType::Slack)
            .expect("validated grid has a slack bus")
    }

    /// Structural checks: exactly one slack, line endpoints in range and
    /// distinct, positive reactance, connected topology.
    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 buses, got {n}")));
        }
        let n_slack = self
            .buses
            .iter()
            .filter(|b| b.bus_type == BusType::Slack)
            .count();
        if n_slack != 1 {
            return Err(Error::InvalidGrid(format!(
                "expected exactly one slack bus, found {n_slack}"
            )));
        }
        if !(self.s_base > 0.0) || !(self.v_base > 0.0) {
            return Err(Error::InvalidGrid(format!(
                "bases must be positive: s_base = {}, v_base = {}",
                self.s_base, self.v_base
            )));
        }
        for (k, line) in self.lines.iter().enumerate() {
            if line.from >= n || line.to >= n {
                return Err(Error::InvalidGrid(format!(
                    "line {k} endpoints ({}, {}) out of range for {n} buses",
                    line.from, line.to
                )));
            }
            if line.from == line.to {
                return Err(Error::InvalidGrid(format!(
                    "line {k} is a self-loop at bus {}",
                    line.from
                )));
            }
            if !(line.x > 0.0) || line.r < 0.0 {
                return Err(Error::InvalidGrid(format!(
                    "line {k} needs r >= 0 and x > 0, got r = {}, x = {}",
                    line.r, line.x
                )));
            }
        }
        // Connectivity via union-find.
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for line in &self.lines {
            let (a, b) = (find(&mut parent, line.from), find(&mut parent, line.to));
            parent[a] = b;
        }
        let root = find(&mut parent, 0);
        for i in 1..n {
            if find(&mut parent, i) != root {
                return Err(Error::InvalidGrid(format!("bus {i} is disconnected")));
            }
        }
        Ok(())
    }
}

/// Bus admittance matrix Y = G + jB, stored as dense row-major real and
/// imaginary parts (grids here are small, n <= a few dozen).
#[derive(Debug, Clone)]
pub struct Ybus {
    pub n: usize,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
}

impl Ybus {
    #[inline]
    pub fn at(&self, i: usize, j: usize) -> Complex64 {
        Complex64::new(self.g[i * self.n + j], self.b[i * self.n + j])
    }
}

/// Assembles the pi-model admittance matrix: for each line with series
/// admittance y = 1/(r + jx), Y[f][f] and Y[t][t] gain y + j b/2, and the
/// off-diagonals gain -y. Parallel lines accumulate.
pub fn build_ybus(grid: &Grid) -> Result<Ybus> {
    grid.validate()?;
    let n = grid.n();
    let mut g = vec![0.0; n * n];
    let mut b = vec![0.0; n * n];
    for line in &grid.lines {
        let z = Complex64::new(line.r, line.x);
        if z.norm() < MIN_IMPEDANCE {
            return Err(Error::DegenerateLine {
                from: line.from,
                to: line.to,
                z_abs: z.norm(),
            });
        }
        let y = z.inv();
        let (f, t) = (line.from, line.to);
        g[f * n + f] += y.re;
        b[f * n + f] += y.im + line.b / 2.0;
        g[t * n + t] += y.re;
        b[t * n + t] += y.im + line.b / 2.0;
        g[f * n + t] -= y.re;
        b[f * n + t] -= y.im;
        g[t * n + f] -= y.re;
        b[t * n + f] -= y.im;
    }
    Ok(Ybus { n, g, b })
}

/// Converts raw per-km line data to per-unit series impedance and total
/// shunt susceptance. `c_nf_per_km` is line capacitance in nF/km at 50 Hz.
/// z_base in ohms is v_base_kv^2 / s_base_mva.
pub fn to_per_unit(
    r_ohm_per_km: f64,
    x_ohm_per_km: f64,
    c_nf_per_km: f64,
    length_km: f64,
    s_base_mva: f64,
    v_base_kv: f64,
) -> (f64, f64, f64) {
    let z_base = v_base_kv * v_base_kv / s_base_mva;
    let r_pu = r_ohm_per_km * length_km / z_base;
    let x_pu = x_ohm_per_km * length_km / z_base;
    let b_pu =
        2.0 * std::f64::consts::PI * FREQUENCY_HZ * c_nf_per_km * 1e-9 * length_km * z_base;
    (r_pu, x_pu, b_pu)
}

/// Node feature row for bus i given a voltage state:
/// [p, q, is_slack, is_pv, is_pq, v_set (0 for PQ), v_i, theta_i].
pub fn node_features(grid: &Grid, v: &[f64], theta: &[f64]) -> Vec<[f64; NODE_FEATURE_DIM]> {
    grid.buses
        .iter()
        .enumerate()
        .map(|(i, bus)| {
            let (s, pv, pq) = match bus.bus_type {
                BusType::Slack => (1.0, 0.0, 0.0),
                BusType::Pv => (0.0, 1.0, 0.0),
                BusType::Pq => (0.0, 0.0, 1.0),
            };
            let v_set = if bus.bus_type == BusType::Pq { 0.0 } else { bus.v_set };
            [bus.p, bus.q, s, pv, pq, v_set, v[i], theta[i]]
        })
        .collect()
}

/// Edge feature vector for one line: [g, b, b_shunt/2, r/x] with
/// g + jb = 1/(r + jx). Both directions of a line share this vector.
pub fn edge_features(line: &Line) -> [f64; EDGE_FEATURE_DIM] {
    let d = line.r * line.r + line.x * line.x;
    [line.r / d, -line.x / d, line.b / 2.0, line.r / line.x]
}
