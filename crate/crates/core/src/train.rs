//! Optimization loop: AdamW with decoupled weight decay, cosine annealing
//! with warm restarts, best-validation checkpointing, and the evaluation
//! and transfer helpers built on top of it.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{attach_lora, apply_mode, AdaptMode};
use crate::loss::{combined_loss, discount_weights, physics_step_value, rmse_state, LossConfig};
use crate::model::{forward, Model, PreparedSample};
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// First cosine cycle length in epochs; later cycles grow by
    /// `restart_mult`.
    pub restart_period: usize,
    pub restart_mult: usize,
    pub lr_min: f64,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 64,
            restart_period: 10,
            restart_mult: 2,
            lr_min: 1e-6,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Longer schedule for full-size runs.
    pub fn paper_scale() -> Self {
        TrainConfig { epochs: 100, batch_size: 512, ..TrainConfig::default() }
    }
}

/// Learning rate at a fractional epoch position. Cycles restart at full
/// `lr` and anneal towards `lr_min`; each cycle is `restart_mult` times
/// longer than the last.
pub fn cosine_warm_restart_lr(cfg: &TrainConfig, epoch_frac: f64) -> f64 {
    let mult = cfg.restart_mult.max(1) as f64;
    let mut start = 0.0;
    let mut len = cfg.restart_period.max(1) as f64;
    while epoch_frac >= start + len {
        start += len;
        len *= mult;
    }
    let pos = (epoch_frac - start) / len;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * pos).cos())
}

struct Slot {
    m: Tensor,
    v: Tensor,
}

/// AdamW over named tensors. Weight decay is decoupled: applied directly
/// to the weights, never through the moment estimates.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: u32,
    slots: HashMap<String, Slot>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> AdamW {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            slots: HashMap::new(),
        }
    }

    /// One update over every trainable tensor of `model`. Missing entries in
    /// `grads` count as zero gradient (the decay still applies).
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &HashMap<String, Tensor>,
        lr: f64,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut failed: Option<Error> = None;
        model.for_each_trainable_mut(|name, w| {
            if failed.is_some() {
                return;
            }
            let slot = self.slots.entry(name.to_string()).or_insert_with(|| Slot {
                m: Tensor::zeros(w.rows, w.cols),
                v: Tensor::zeros(w.rows, w.cols),
            });
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(w.rows, w.cols);
                    &zero
                }
            };
            for j in 0..w.data.len() {
                let gj = g.data[j];
                if !gj.is_finite() {
                    failed = Some(Error::NonFiniteGradient { name: name.to_string() });
                    return;
                }
                slot.m.data[j] = self.beta1 * slot.m.data[j] + (1.0 - self.beta1) * gj;
                slot.v.data[j] = self.beta2 * slot.v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mhat = slot.m.data[j] / bc1;
                let vhat = slot.v.data[j] / bc2;
                w.data[j] -= lr * self.weight_decay * w.data[j];
                w.data[j] -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        });
        match failed {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Learning rate at the first batch of the epoch.
    pub lr: f64,
    pub loss_data: f64,
    pub loss_pf: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// Trains in place. On return the model holds the weights of the epoch with
/// the lowest validation RMSE. A model without trainable parameters (or an
/// empty training set) returns immediately with an empty history.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedSample],
    val_set: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if model.count_params(true) == 0 || train_set.is_empty() {
        return Ok(TrainHistory { epochs: Vec::new(), best_epoch: 0, best_val_rmse: f64::NAN });
    }
    let mut opt = AdamW::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model, usize)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let epoch_lr = cosine_warm_restart_lr(cfg, epoch as f64);
        let mut data_sum = 0.0;
        let mut pf_sum = 0.0;
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let frac = epoch as f64 + bi as f64 / steps_per_epoch as f64;
            let lr = cosine_warm_restart_lr(cfg, frac);
            let mut acc: HashMap<String, Tensor> = HashMap::new();
            for &idx in batch {
                let prep = &train_set[idx];
                let mut tape = Tape::new();
                let traj = forward(&mut tape, model, prep)?;
                let terms = combined_loss(&mut tape, prep, &traj, &cfg.loss)?;
                if !tape.scalar_value(terms.total).is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: bi });
                }
                data_sum += tape.scalar_value(terms.data);
                pf_sum += tape.scalar_value(terms.physics);
                let mut grads = tape.backward(terms.total)?;
                for (name, var) in &traj.trainable {
                    if let Some(g) = grads.take(*var) {
                        match acc.get_mut(name) {
                            Some(t) => {
                                for (a, b) in t.data.iter_mut().zip(&g.data) {
                                    *a += b;
                                }
                            }
                            None => {
                                acc.insert(name.clone(), g);
                            }
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in acc.values_mut() {
                for v in g.data.iter_mut() {
                    *v *= scale;
                }
            }
            opt.step(model, &acc, lr)?;
        }
        let val = evaluate(model, val_set, cfg.loss.gamma)?;
        history.push(EpochLog {
            epoch,
            lr: epoch_lr,
            loss_data: data_sum / train_set.len() as f64,
            loss_pf: pf_sum / train_set.len() as f64,
            val_rmse: val.rmse_all,
        });
        if best.as_ref().map_or(true, |(b, _, _)| val.rmse_all < *b) {
            best = Some((val.rmse_all, model.clone(), epoch));
        }
    }
    let (best_val_rmse, best_model, best_epoch) = best.expect("at least one epoch ran");
    *model = best_model;
    Ok(TrainHistory { epochs: history, best_epoch, best_val_rmse })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub n_buses: usize,
    pub rmse_all: f64,
    pub l_pf: f64,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// RMSE over all non-slack (v, theta) coordinates pooled across the set.
    pub rmse_all: f64,
    pub rmse_v: f64,
    pub rmse_theta_deg: f64,
    /// Mean discounted physics loss of the predicted trajectories.
    pub l_pf: f64,
    pub per_sample: Vec<SampleEval>,
}

/// Runs the model over a set and pools the error statistics.
pub fn evaluate(model: &Model, set: &[PreparedSample], gamma: f64) -> Result<EvalSummary> {
    let mut sq_v = 0.0;
    let mut sq_th = 0.0;
    let mut sq_th_deg = 0.0;
    let mut coords = 0.0;
    let mut pf_total = 0.0;
    let mut per_sample = Vec::with_capacity(set.len());
    for prep in set {
        let mut tape = Tape::new();
        let traj = forward(&mut tape, model, prep)?;
        let steps = traj.v.len() - 1;
        let weights = discount_weights(steps, gamma);
        let mut l_pf = 0.0;
        for t in 1..=steps {
            let v = &tape.value(traj.v[t]).data;
            let th = &tape.value(traj.theta[t]).data;
            l_pf += weights[t - 1] * physics_step_value(prep, v, th);
        }
        let v = &tape.value(*traj.v.last().unwrap()).data;
        let th = &tape.value(*traj.theta.last().unwrap()).data;
        for i in 0..prep.n {
            if prep.nonslack_mask.data[i] == 0.0 {
                continue;
            }
            let dv = v[i] - prep.target_v.data[i];
            let dth = th[i] - prep.target_th.data[i];
            sq_v += dv * dv;
            sq_th += dth * dth;
            sq_th_deg += dth.to_degrees() * dth.to_degrees();
            coords += 1.0;
        }
        let r = rmse_state(prep, v, th);
        pf_total += l_pf;
        per_sample.push(SampleEval { n_buses: prep.n, rmse_all: r.all, l_pf });
    }
    let n = set.len() as f64;
    Ok(EvalSummary {
        rmse_all: ((sq_v + sq_th) / (2.0 * coords)).sqrt(),
        rmse_v: (sq_v / coords).sqrt(),
        rmse_theta_deg: (sq_th_deg / coords).sqrt(),
        l_pf: pf_total / n,
        per_sample,
    })
}

/// One evaluation row as written to the metrics table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub mode: String,
    pub seed: u64,
    /// Fraction of the target-domain training split used.
    pub beta: f64,
    pub rmse_all: f64,
    pub rmse_v: f64,
    pub rmse_theta_deg: f64,
    pub l_pf: f64,
    pub trainable_params: usize,
    /// Trainable fraction relative to full fine-tuning.
    pub p_reduced: f64,
    /// Accuracy retention relative to full fine-tuning:
    /// rmse(full) / rmse(mode); 1.0 means parity, higher is better.
    pub r_ret: f64,
}

/// rmse(full fine-tune) / rmse(mode).
pub fn retention(rmse_mode: f64, rmse_full_ft: f64) -> f64 {
    rmse_full_ft / rmse_mode
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptOptions {
    pub mode: AdaptMode,
    pub rank: usize,
    pub alpha: f64,
    /// Seed for adapter initialization.
    pub seed: u64,
}

/// Clones the source model and prepares it for a transfer mode: attaches
/// adapters when the mode needs them and sets the freeze pattern.
pub fn prepare_transfer(source: &Model, opts: &AdaptOptions) -> Result<Model> {
    let mut model = source.clone();
    if opts.mode.needs_adapters() {
        attach_lora(&mut model, opts.rank, opts.alpha, opts.seed)?;
    }
    apply_mode(&mut model, opts.mode)?;
    Ok(model)
}

/// Nested training subsets for the few-shot sweep: one fixed shuffle, then
/// prefixes of it, so smaller budgets are strict subsets of larger ones.
pub fn fewshot_subsets(n: usize, betas: &[f64], seed: u64) -> Vec<(f64, Vec<usize>)> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    betas
        .iter()
        .map(|&beta| {
            let take = ((beta * n as f64).ceil() as usize).clamp(1, n);
            let mut idx = order[..take].to_vec();
            idx.sort_unstable();
            (beta, idx)
        })
        .collect()
}

/// Indices of non-dominated points when minimizing both coordinates.
/// Returned sorted; ties on both axes keep the earliest index.
pub fn pareto_front(points: &[(f64, f64)]) -> Vec<usize> {
    let mut front = Vec::new();
    'outer: for (i, &(xi, yi)) in points.iter().enumerate() {
        for (j, &(xj, yj)) in points.iter().enumerate() {
            if i == j {
                continue;
            }
            let dominates = xj <= xi && yj <= yi && (xj < xi || yj < yi);
            let tie_earlier = xj == xi && yj == yi && j < i;
            if dominates || tie_earlier {
                continue 'outer;
            }
        }
        front.push(i);
    }
    front
}
