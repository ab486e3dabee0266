//! Low-rank adaptation of attention projections and the freeze patterns for
//! the transfer baselines.
//!
//! An adapter contributes delta_w = (alpha / rank) * A @ B on top of a
//! frozen base matrix. A is drawn from N(0, 0.02^2), B starts at zero, so a
//! freshly attached adapter leaves the forward pass bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const LORA_INIT_STD: f64 = 0.02;
pub const DEFAULT_RANK: usize = 2;
pub const DEFAULT_ALPHA: f64 = 8.0;

/// One low-rank pair. `a` is (d_out x rank), `b` is (rank x d_in).
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub frozen: bool,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// Number of adapter parameters: rank * (d_in + d_out).
    pub fn param_count(&self) -> usize {
        self.a.data.len() + self.b.data.len()
    }

    /// Materializes delta_w = scaling * a @ b as a dense (d_out x d_in) block.
    pub fn delta(&self) -> Tensor {
        let (d_out, r) = self.a.shape();
        let (_, d_in) = self.b.shape();
        let s = self.scaling();
        let mut out = Tensor::zeros(d_out, d_in);
        for i in 0..d_out {
            for k in 0..r {
                let aik = self.a.at(i, k);
                if aik != 0.0 {
                    for j in 0..d_in {
                        out.data[i * d_in + j] += aik * self.b.at(k, j);
                    }
                }
            }
        }
        for v in out.data.iter_mut() {
            *v *= s;
        }
        out
    }
}

/// Transfer strategies compared in evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptMode {
    /// Source model evaluated unchanged.
    ZeroShot,
    /// Every base parameter trainable.
    FullFt,
    /// Only the prediction head trainable.
    HeadOnly,
    /// Only adapters trainable.
    LoraOnly,
    /// Adapters plus the prediction head trainable.
    LoraPHead,
}

impl AdaptMode {
    pub const ALL: [AdaptMode; 5] = [
        AdaptMode::ZeroShot,
        AdaptMode::FullFt,
        AdaptMode::HeadOnly,
        AdaptMode::LoraOnly,
        AdaptMode::LoraPHead,
    ];

    pub fn needs_adapters(self) -> bool {
        matches!(self, AdaptMode::LoraOnly | AdaptMode::LoraPHead)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AdaptMode::ZeroShot => "zero_shot",
            AdaptMode::FullFt => "full_ft",
            AdaptMode::HeadOnly => "head_only",
            AdaptMode::LoraOnly => "lora_only",
            AdaptMode::LoraPHead => "lora_phead",
        }
    }
}

impl std::fmt::Display for AdaptMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.as_str())
    }
}

impl std::str::FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" => Ok(AdaptMode::ZeroShot),
            "full_ft" => Ok(AdaptMode::FullFt),
            "head_only" => Ok(AdaptMode::HeadOnly),
            "lora_only" => Ok(AdaptMode::LoraOnly),
            "lora_phead" => Ok(AdaptMode::LoraPHead),
            other => Err(Error::Config(format!("unknown adaptation mode '{other}'"))),
        }
    }
}

/// Attaches fresh adapters to every attention projection (w_q, w_k, w_v of
/// each layer). Draw order is the canonical target order, seeded.
pub fn attach_lora(model: &mut Model, rank: usize, alpha: f64, seed: u64) -> Result<()> {
    let d = model.config.d;
    if rank == 0 || rank > d {
        return Err(Error::BadRank { rank, max_rank: d });
    }
    for layer in &model.layers {
        for proj in [&layer.w_q, &layer.w_k, &layer.w_v] {
            if proj.adapter.is_some() {
                return Err(Error::AdapterAlreadyAttached { target: proj.base.name.clone() });
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, LORA_INIT_STD).expect("valid std");
    for layer in model.layers.iter_mut() {
        for proj in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
            let a = Tensor::from_vec(
                d,
                rank,
                (0..d * rank).map(|_| normal.sample(&mut rng)).collect(),
            );
            let b = Tensor::zeros(rank, d);
            proj.adapter = Some(LoraAdapter { a, b, rank, alpha, frozen: false });
        }
    }
    Ok(())
}

/// Folds every adapter into its base matrix and removes it. The merged
/// matrix computes base + scaling * A @ B with the same operation order as
/// the live-adapter forward pass.
pub fn merge_lora(model: &mut Model) -> Result<()> {
    let mut merged_any = false;
    for layer in model.layers.iter_mut() {
        for proj in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
            if let Some(adapter) = proj.adapter.take() {
                let delta = adapter.delta();
                for (w, &dw) in proj.base.value.data.iter_mut().zip(&delta.data) {
                    *w += dw;
                }
                merged_any = true;
            }
        }
    }
    if !merged_any {
        return Err(Error::MissingAdapters { mode: "merge" });
    }
    Ok(())
}

/// Applies a mode's freeze pattern. Modes that use adapters require them
/// attached; modes that do not, require them absent.
pub fn apply_mode(model: &mut Model, mode: AdaptMode) -> Result<()> {
    let has_adapters = model.has_adapters();
    if mode.needs_adapters() && !has_adapters {
        return Err(Error::MissingAdapters { mode: mode.as_str() });
    }
    if !mode.needs_adapters() && has_adapters {
        return Err(Error::Config(format!(
            "mode {mode} does not use adapters but adapters are attached"
        )));
    }
    let (base_trainable, head_trainable, adapters_trainable) = match mode {
        AdaptMode::ZeroShot => (false, false, false),
        AdaptMode::FullFt => (true, true, false),
        AdaptMode::HeadOnly => (false, true, false),
        AdaptMode::LoraOnly => (false, false, true),
        AdaptMode::LoraPHead => (false, true, true),
    };
    model.visit_params_mut(|name, p| {
        let is_head = name.starts_with("head.");
        p.frozen = if is_head { !head_trainable } else { !base_trainable };
    });
    for layer in model.layers.iter_mut() {
        for proj in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
            if let Some(ad) = proj.adapter.as_mut() {
                ad.frozen = !adapters_trainable;
            }
        }
    }
    Ok(())
}
