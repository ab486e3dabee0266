//! Supervised and physics-based training objectives, plus the plain-f64
//! metric helpers used during evaluation.
//!
//! The physics term measures power-balance violation of a predicted state
//! directly against the admittance matrix, so it needs no labels. Residuals
//! are formed in rectangular current coordinates from the polar state:
//!
//!   e = v cos(theta), f = v sin(theta),
//!   Ie = G e - B f,   If = G f + B e,
//!   P = e Ie + f If,  Q = f Ie - e If.
//!
//! Active-power residuals count at PV and PQ buses, reactive ones only at
//! PQ buses. Intermediate refinement steps are discounted by
//! gamma^(T-1-t), so the final state carries full weight.

use crate::model::{PreparedSample, StateTrajectory};
use crate::tensor::{Tape, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    /// Weight of the physics term in the combined objective.
    pub lambda_pf: f64,
    /// Per-step discount for intermediate states.
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda_pf: 0.01, gamma: 0.9 }
    }
}

/// Discount weights for a `steps`-long trajectory: gamma^(steps-1-t).
/// The last entry is exactly 1.
pub fn discount_weights(steps: usize, gamma: f64) -> Vec<f64> {
    (0..steps).map(|t| gamma.powi((steps - 1 - t) as i32)).collect()
}

/// Sum of w_t * terms_t on the tape.
pub fn weighted_sum(tape: &mut Tape, terms: &[Var], weights: &[f64]) -> Result<Var> {
    assert_eq!(terms.len(), weights.len());
    let mut acc: Option<Var> = None;
    for (&term, &w) in terms.iter().zip(weights) {
        let scaled = tape.scalar_mul(term, w);
        acc = Some(match acc {
            None => scaled,
            Some(a) => tape.add(a, scaled)?,
        });
    }
    acc.ok_or(Error::Config("weighted_sum needs at least one term".into()))
}

/// Squared power-balance violation of one state: sum of masked active and
/// reactive mismatches. `g_c`, `b_c` and the setpoint/mask columns must be
/// tape constants built from `prep`.
struct PhysicsConsts {
    g: Var,
    b: Var,
    p_set: Var,
    q_set: Var,
    dp_mask: Var,
    dq_mask: Var,
}

impl PhysicsConsts {
    fn bind(tape: &mut Tape, prep: &PreparedSample) -> PhysicsConsts {
        PhysicsConsts {
            g: tape.constant(prep.g_mat.clone()),
            b: tape.constant(prep.b_mat.clone()),
            p_set: tape.constant(prep.p_set.clone()),
            q_set: tape.constant(prep.q_set.clone()),
            dp_mask: tape.constant(prep.dp_mask.clone()),
            dq_mask: tape.constant(prep.dq_mask.clone()),
        }
    }
}

fn physics_step(tape: &mut Tape, c: &PhysicsConsts, v: Var, th: Var) -> Result<Var> {
    let ct = tape.cos(th);
    let st = tape.sin(th);
    let e = tape.mul(v, ct)?;
    let f = tape.mul(v, st)?;
    let ge = tape.matmul(c.g, e)?;
    let bf = tape.matmul(c.b, f)?;
    let gf = tape.matmul(c.g, f)?;
    let be = tape.matmul(c.b, e)?;
    let ie = tape.sub(ge, bf)?;
    let if_ = tape.add(gf, be)?;
    let e_ie = tape.mul(e, ie)?;
    let f_if = tape.mul(f, if_)?;
    let p = tape.add(e_ie, f_if)?;
    let f_ie = tape.mul(f, ie)?;
    let e_if = tape.mul(e, if_)?;
    let q = tape.sub(f_ie, e_if)?;
    let dp = tape.sub(c.p_set, p)?;
    let dq = tape.sub(c.q_set, q)?;
    let dp_m = tape.mul(dp, c.dp_mask)?;
    let dq_m = tape.mul(dq, c.dq_mask)?;
    let dp_sq = tape.square(dp_m);
    let dq_sq = tape.square(dq_m);
    let sp = tape.sum(dp_sq);
    let sq = tape.sum(dq_sq);
    tape.add(sp, sq)
}

/// Discounted physics loss over refinement states (the initial flat start
/// is excluded by the caller).
pub fn physics_loss(
    tape: &mut Tape,
    prep: &PreparedSample,
    v_states: &[Var],
    th_states: &[Var],
    gamma: f64,
) -> Result<Var> {
    assert_eq!(v_states.len(), th_states.len());
    let consts = PhysicsConsts::bind(tape, prep);
    let mut terms = Vec::with_capacity(v_states.len());
    for (&v, &th) in v_states.iter().zip(th_states) {
        terms.push(physics_step(tape, &consts, v, th)?);
    }
    let weights = discount_weights(terms.len(), gamma);
    weighted_sum(tape, &terms, &weights)
}

/// Mean squared error of the final state against the labels, over the
/// 2(n-1) non-slack coordinates (v and theta jointly).
pub fn data_mse(tape: &mut Tape, prep: &PreparedSample, v: Var, th: Var) -> Result<Var> {
    let target_v = tape.constant(prep.target_v.clone());
    let target_th = tape.constant(prep.target_th.clone());
    let mask = tape.constant(prep.nonslack_mask.clone());
    let dv = tape.sub(v, target_v)?;
    let dth = tape.sub(th, target_th)?;
    let dv_m = tape.mul(dv, mask)?;
    let dth_m = tape.mul(dth, mask)?;
    let dv_sq = tape.square(dv_m);
    let dth_sq = tape.square(dth_m);
    let sv = tape.sum(dv_sq);
    let sth = tape.sum(dth_sq);
    let total = tape.add(sv, sth)?;
    Ok(tape.scalar_mul(total, 1.0 / (2.0 * (prep.n as f64 - 1.0))))
}

pub struct LossTerms {
    pub total: Var,
    pub data: Var,
    pub physics: Var,
}

/// total = data MSE (final state) + lambda_pf * discounted physics loss.
pub fn combined_loss(
    tape: &mut Tape,
    prep: &PreparedSample,
    traj: &StateTrajectory,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let last = traj.v.len() - 1;
    let data = data_mse(tape, prep, traj.v[last], traj.theta[last])?;
    let physics = physics_loss(tape, prep, &traj.v[1..], &traj.theta[1..], cfg.gamma)?;
    let scaled = tape.scalar_mul(physics, cfg.lambda_pf);
    let total = tape.add(data, scaled)?;
    Ok(LossTerms { total, data, physics })
}

/// Plain-f64 twin of [`physics_step`]; used for evaluation metrics and as
/// an independent check on the tape version.
pub fn physics_step_value(prep: &PreparedSample, v: &[f64], th: &[f64]) -> f64 {
    let n = prep.n;
    let e: Vec<f64> = v.iter().zip(th).map(|(vi, ti)| vi * ti.cos()).collect();
    let f: Vec<f64> = v.iter().zip(th).map(|(vi, ti)| vi * ti.sin()).collect();
    let mut total = 0.0;
    for i in 0..n {
        let mut ie = 0.0;
        let mut if_ = 0.0;
        for j in 0..n {
            let g = prep.g_mat.data[i * n + j];
            let b = prep.b_mat.data[i * n + j];
            ie += g * e[j] - b * f[j];
            if_ += g * f[j] + b * e[j];
        }
        let p = e[i] * ie + f[i] * if_;
        let q = f[i] * ie - e[i] * if_;
        let dp = (prep.p_set.data[i] - p) * prep.dp_mask.data[i];
        let dq = (prep.q_set.data[i] - q) * prep.dq_mask.data[i];
        total += dp * dp + dq * dq;
    }
    total
}

/// State error metrics against the sample labels, slack excluded.
#[derive(Debug, Clone, Copy)]
pub struct StateRmse {
    /// Joint RMSE over the stacked (v, theta) coordinates, theta in radians.
    pub all: f64,
    pub v: f64,
    /// Angle-only RMSE in degrees.
    pub theta_deg: f64,
}

pub fn rmse_state(prep: &PreparedSample, v: &[f64], th: &[f64]) -> StateRmse {
    let m = prep.n as f64 - 1.0;
    let mut sv = 0.0;
    let mut sth = 0.0;
    let mut sth_deg = 0.0;
    for i in 0..prep.n {
        if prep.nonslack_mask.data[i] == 0.0 {
            continue;
        }
        let dv = v[i] - prep.target_v.data[i];
        let dth = th[i] - prep.target_th.data[i];
        sv += dv * dv;
        sth += dth * dth;
        let deg = dth.to_degrees();
        sth_deg += deg * deg;
    }
    StateRmse {
        all: ((sv + sth) / (2.0 * m)).sqrt(),
        v: (sv / m).sqrt(),
        theta_deg: (sth_deg / m).sqrt(),
    }
}
