//! Iterative graph attention network for power-flow state estimation.
//!
//! The model refines a voltage state over `unroll` steps. Each step encodes
//! the current (v, theta) together with static bus features, runs a stack of
//! edge-biased self-attention layers over the grid graph, and emits per-bus
//! corrections (dv, dtheta). Attention is restricted to graph neighbors plus
//! self-loops; a small MLP on line features adds a learned bias to each
//! neighbor logit, which is how line impedances enter the attention pattern.
//!
//! All weights live in named [`Param`]s so optimizers and checkpoints can
//! address them uniformly. Attention projections are wrapped in
//! [`Projection`], which may carry a low-rank adapter; the effective matrix
//! is formed once per forward pass.

use std::path::Path;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::adapt::LoraAdapter;
use crate::grid::{build_ybus, BusType, NODE_FEATURE_DIM};
use crate::nr::flat_init;
use crate::synth::Sample;
use crate::tensor::{Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Embedding width. Must be divisible by `heads`.
    pub d: usize,
    /// Hidden width of the edge-bias and prediction MLPs.
    pub d_hi: usize,
    pub heads: usize,
    pub layers: usize,
    /// Number of refinement steps; the layer stack is shared across steps.
    pub unroll: usize,
    /// Scale on the raw head output; keeps early updates small so the
    /// iteration stays near flat start while untrained.
    pub out_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { d: 8, d_hi: 32, heads: 2, layers: 8, unroll: 40, out_scale: 0.1 }
    }
}

impl ModelConfig {
    /// Reduced unroll depth for runs on small hardware.
    pub fn desk() -> Self {
        ModelConfig { unroll: 10, ..ModelConfig::default() }
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }
}

/// One named weight matrix (or bias row).
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

/// A base matrix that may carry a low-rank adapter.
#[derive(Debug, Clone)]
pub struct Projection {
    pub base: Param,
    pub adapter: Option<LoraAdapter>,
}

/// Two-layer tanh MLP weights; used for both the per-head edge bias
/// (d_e -> d_hi -> 1) and the prediction head (d -> d_hi -> 2).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub w1: Param,
    pub b1: Param,
    pub w2: Param,
    pub b2: Param,
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub w_q: Projection,
    pub w_k: Projection,
    pub w_v: Projection,
    pub w_o: Param,
    pub ln_gain: Param,
    pub ln_bias: Param,
    /// One edge-bias MLP per head.
    pub edge: Vec<Mlp>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub w_in: Param,
    pub layers: Vec<LayerParams>,
    pub head: Mlp,
}

fn uniform_param(rng: &mut ChaCha8Rng, name: String, rows: usize, cols: usize) -> Param {
    let bound = 1.0 / (rows as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound);
    let data = (0..rows * cols).map(|_| u.sample(rng)).collect();
    Param { name, value: Tensor::from_vec(rows, cols, data), frozen: false }
}

fn const_param(name: String, rows: usize, cols: usize, fill: f64) -> Param {
    Param { name, value: Tensor::from_vec(rows, cols, vec![fill; rows * cols]), frozen: false }
}

impl Model {
    /// Fan-in uniform init, drawn in parameter-definition order from one
    /// seeded stream. Biases, layer-norm offsets, and the final head layer
    /// start at zero, so a fresh model's refinement steps are identity.
    pub fn init(config: &ModelConfig, seed: u64) -> Model {
        assert!(config.d % config.heads == 0, "d must be divisible by heads");
        let d = config.d;
        let d_hi = config.d_hi;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w_in = uniform_param(&mut rng, "w_in".into(), NODE_FEATURE_DIM, d);
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let w_q = Projection { base: uniform_param(&mut rng, p("w_q"), d, d), adapter: None };
            let w_k = Projection { base: uniform_param(&mut rng, p("w_k"), d, d), adapter: None };
            let w_v = Projection { base: uniform_param(&mut rng, p("w_v"), d, d), adapter: None };
            let w_o = uniform_param(&mut rng, p("w_o"), d, d);
            let ln_gain = const_param(p("ln_gain"), 1, d, 1.0);
            let ln_bias = const_param(p("ln_bias"), 1, d, 0.0);
            let mut edge = Vec::with_capacity(config.heads);
            for h in 0..config.heads {
                let e = |s: &str| format!("layers.{l}.edge.{h}.{s}");
                edge.push(Mlp {
                    w1: uniform_param(&mut rng, e("w1"), crate::grid::EDGE_FEATURE_DIM, d_hi),
                    b1: const_param(e("b1"), 1, d_hi, 0.0),
                    w2: uniform_param(&mut rng, e("w2"), d_hi, 1),
                    b2: const_param(e("b2"), 1, 1, 0.0),
                });
            }
            layers.push(LayerParams { w_q, w_k, w_v, w_o, ln_gain, ln_bias, edge });
        }
        let head = Mlp {
            w1: uniform_param(&mut rng, "head.w1".into(), d, d_hi),
            b1: const_param("head.b1".into(), 1, d_hi, 0.0),
            w2: const_param("head.w2".into(), d_hi, 2, 0.0),
            b2: const_param("head.b2".into(), 1, 2, 0.0),
        };
        Model { config: config.clone(), w_in, layers, head }
    }

    /// Visits every base parameter in definition order.
    pub fn visit_params(&self, mut f: impl FnMut(&Param)) {
        f(&self.w_in);
        for layer in &self.layers {
            f(&layer.w_q.base);
            f(&layer.w_k.base);
            f(&layer.w_v.base);
            f(&layer.w_o);
            f(&layer.ln_gain);
            f(&layer.ln_bias);
            for mlp in &layer.edge {
                f(&mlp.w1);
                f(&mlp.b1);
                f(&mlp.w2);
                f(&mlp.b2);
            }
        }
        f(&self.head.w1);
        f(&self.head.b1);
        f(&self.head.w2);
        f(&self.head.b2);
    }

    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Param)) {
        let mut call = |p: &mut Param| {
            let name = p.name.clone();
            f(&name, p);
        };
        call(&mut self.w_in);
        for layer in self.layers.iter_mut() {
            call(&mut layer.w_q.base);
            call(&mut layer.w_k.base);
            call(&mut layer.w_v.base);
            call(&mut layer.w_o);
            call(&mut layer.ln_gain);
            call(&mut layer.ln_bias);
            for mlp in layer.edge.iter_mut() {
                call(&mut mlp.w1);
                call(&mut mlp.b1);
                call(&mut mlp.w2);
                call(&mut mlp.b2);
            }
        }
        call(&mut self.head.w1);
        call(&mut self.head.b1);
        call(&mut self.head.w2);
        call(&mut self.head.b2);
    }

    pub fn has_adapters(&self) -> bool {
        self.layers
            .iter()
            .any(|l| l.w_q.adapter.is_some() || l.w_k.adapter.is_some() || l.w_v.adapter.is_some())
    }

    pub fn projection_mut(&mut self, target: &str) -> Option<&mut Projection> {
        for layer in self.layers.iter_mut() {
            if layer.w_q.base.name == target {
                return Some(&mut layer.w_q);
            }
            if layer.w_k.base.name == target {
                return Some(&mut layer.w_k);
            }
            if layer.w_v.base.name == target {
                return Some(&mut layer.w_v);
            }
        }
        None
    }

    /// Counts scalar parameters. Adapters are included in the total; with
    /// `trainable_only` the frozen flags of both kinds are honored.
    pub fn count_params(&self, trainable_only: bool) -> usize {
        let mut total = 0usize;
        self.visit_params(|p| {
            if !trainable_only || !p.frozen {
                total += p.value.data.len();
            }
        });
        for layer in &self.layers {
            for proj in [&layer.w_q, &layer.w_k, &layer.w_v] {
                if let Some(ad) = &proj.adapter {
                    if !trainable_only || !ad.frozen {
                        total += ad.param_count();
                    }
                }
            }
        }
        total
    }

    /// Applies an update to every trainable tensor, adapters included.
    /// Adapter factors are addressed as `<target>.lora_a` / `<target>.lora_b`.
    pub fn for_each_trainable_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        self.visit_params_mut(|name, p| {
            if !p.frozen {
                f(name, &mut p.value);
            }
        });
        for layer in self.layers.iter_mut() {
            for proj in [&mut layer.w_q, &mut layer.w_k, &mut layer.w_v] {
                if let Some(ad) = proj.adapter.as_mut() {
                    if !ad.frozen {
                        let a_name = format!("{}.lora_a", proj.base.name);
                        let b_name = format!("{}.lora_b", proj.base.name);
                        f(&a_name, &mut ad.a);
                        f(&b_name, &mut ad.b);
                    }
                }
            }
        }
    }
}

/// Per-sample constants precomputed once: feature blocks, the attention
/// mask, admittance matrices, setpoints, and the bus-role masks used by the
/// losses and the slack clamp.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub n: usize,
    /// Static feature block (n x 6): p, q, role one-hot, v_set.
    pub static_feat: Tensor,
    /// Flat-start state.
    pub v0: Tensor,
    pub th0: Tensor,
    /// (n x n): 0.0 on self-loops and graph neighbors, -inf elsewhere.
    pub neighbor_mask: Tensor,
    /// Directed edge endpoints, row-aligned with `edge_feat`.
    pub positions: Rc<Vec<(usize, usize)>>,
    pub edge_feat: Tensor,
    /// Dense bus admittance, split into real and imaginary parts.
    pub g_mat: Tensor,
    pub b_mat: Tensor,
    /// Injection setpoints (n x 1).
    pub p_set: Tensor,
    pub q_set: Tensor,
    /// 1.0 where the active-power residual is constrained (PV and PQ).
    pub dp_mask: Tensor,
    /// 1.0 where the reactive-power residual is constrained (PQ only).
    pub dq_mask: Tensor,
    /// 1.0 everywhere except the slack bus.
    pub nonslack_mask: Tensor,
    /// Slack set voltage at the slack bus, 0.0 elsewhere.
    pub slack_v: Tensor,
    pub target_v: Tensor,
    pub target_th: Tensor,
}

impl PreparedSample {
    pub fn new(sample: &Sample) -> Result<PreparedSample> {
        let grid = &sample.grid;
        let n = grid.n();
        let ybus = build_ybus(grid)?;
        let (v0, th0) = flat_init(grid);

        let mut static_feat = Tensor::zeros(n, 6);
        for (i, row) in sample.node_x.iter().enumerate() {
            static_feat.data[i * 6..(i + 1) * 6].copy_from_slice(&row[..6]);
        }

        let mut neighbor_mask = Tensor::from_vec(n, n, vec![f64::NEG_INFINITY; n * n]);
        for i in 0..n {
            neighbor_mask.data[i * n + i] = 0.0;
        }
        for &(i, j) in &sample.edges_dir {
            neighbor_mask.data[i * n + j] = 0.0;
        }

        let e = sample.edges_dir.len();
        let mut edge_feat = Tensor::zeros(e, crate::grid::EDGE_FEATURE_DIM);
        for (k, row) in sample.edge_e.iter().enumerate() {
            let w = crate::grid::EDGE_FEATURE_DIM;
            edge_feat.data[k * w..(k + 1) * w].copy_from_slice(row);
        }

        let mut p_set = Tensor::zeros(n, 1);
        let mut q_set = Tensor::zeros(n, 1);
        let mut dp_mask = Tensor::zeros(n, 1);
        let mut dq_mask = Tensor::zeros(n, 1);
        let mut nonslack_mask = Tensor::zeros(n, 1);
        let mut slack_v = Tensor::zeros(n, 1);
        for (i, bus) in grid.buses.iter().enumerate() {
            p_set.data[i] = bus.p;
            q_set.data[i] = bus.q;
            match bus.bus_type {
                BusType::Slack => {
                    slack_v.data[i] = bus.v_set;
                }
                BusType::Pv => {
                    dp_mask.data[i] = 1.0;
                    nonslack_mask.data[i] = 1.0;
                }
                BusType::Pq => {
                    dp_mask.data[i] = 1.0;
                    dq_mask.data[i] = 1.0;
                    nonslack_mask.data[i] = 1.0;
                }
            }
        }

        Ok(PreparedSample {
            n,
            static_feat,
            v0: Tensor::column(&v0),
            th0: Tensor::column(&th0),
            neighbor_mask,
            positions: Rc::new(sample.edges_dir.clone()),
            edge_feat,
            g_mat: Tensor::from_vec(n, n, ybus.g),
            b_mat: Tensor::from_vec(n, n, ybus.b),
            p_set,
            q_set,
            dp_mask,
            dq_mask,
            nonslack_mask,
            slack_v,
            target_v: Tensor::column(&sample.target.v),
            target_th: Tensor::column(&sample.target.theta),
        })
    }
}

/// States produced by one forward pass. `v[0]` / `theta[0]` hold the flat
/// start; entries 1..=unroll are refinement outputs. `trainable` maps every
/// non-frozen parameter name to its tape leaf, in binding order.
pub struct StateTrajectory {
    pub v: Vec<Var>,
    pub theta: Vec<Var>,
    pub trainable: Vec<(String, Var)>,
}

fn bind(tape: &mut Tape, trainable: &mut Vec<(String, Var)>, p: &Param) -> Var {
    if p.frozen {
        tape.constant(p.value.clone())
    } else {
        let v = tape.leaf(p.value.clone());
        trainable.push((p.name.clone(), v));
        v
    }
}

fn bind_projection(
    tape: &mut Tape,
    trainable: &mut Vec<(String, Var)>,
    proj: &Projection,
) -> Result<Var> {
    let base = bind(tape, trainable, &proj.base);
    let Some(ad) = &proj.adapter else {
        return Ok(base);
    };
    let bind_factor = |tape: &mut Tape, tr: &mut Vec<(String, Var)>, t: &Tensor, suffix: &str| {
        if ad.frozen {
            tape.constant(t.clone())
        } else {
            let v = tape.leaf(t.clone());
            tr.push((format!("{}.{suffix}", proj.base.name), v));
            v
        }
    };
    let a = bind_factor(tape, trainable, &ad.a, "lora_a");
    let b = bind_factor(tape, trainable, &ad.b, "lora_b");
    let ab = tape.matmul(a, b)?;
    let scaled = tape.scalar_mul(ab, ad.scaling());
    tape.add(base, scaled)
}

struct BoundMlp {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

fn bind_mlp(tape: &mut Tape, trainable: &mut Vec<(String, Var)>, mlp: &Mlp) -> BoundMlp {
    BoundMlp {
        w1: bind(tape, trainable, &mlp.w1),
        b1: bind(tape, trainable, &mlp.b1),
        w2: bind(tape, trainable, &mlp.w2),
        b2: bind(tape, trainable, &mlp.b2),
    }
}

fn mlp_apply(tape: &mut Tape, m: &BoundMlp, x: Var) -> Result<Var> {
    let h = tape.matmul(x, m.w1)?;
    let hb = tape.add(h, m.b1)?;
    let ht = tape.tanh(hb);
    let o = tape.matmul(ht, m.w2)?;
    tape.add(o, m.b2)
}

struct BoundLayer {
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln_gain: Var,
    ln_bias: Var,
    /// Per head: edge bias plus neighbor mask, (n x n), shared by all steps.
    biased_mask: Vec<Var>,
}

/// Runs the full unrolled refinement on `tape`. Parameters are bound once;
/// effective projections (base + adapter) and the per-layer edge-bias masks
/// are likewise built once and reused by every step.
pub fn forward(tape: &mut Tape, model: &Model, prep: &PreparedSample) -> Result<StateTrajectory> {
    let cfg = &model.config;
    let (heads, dh) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut trainable = Vec::new();

    let static_c = tape.constant(prep.static_feat.clone());
    let mask_c = tape.constant(prep.neighbor_mask.clone());
    let nonslack = tape.constant(prep.nonslack_mask.clone());
    let slack_fill = tape.constant(prep.slack_v.clone());
    let edge_c = tape.constant(prep.edge_feat.clone());

    let w_in = bind(tape, &mut trainable, &model.w_in);
    let mut bound_layers = Vec::with_capacity(cfg.layers);
    for layer in &model.layers {
        let w_q = bind_projection(tape, &mut trainable, &layer.w_q)?;
        let w_k = bind_projection(tape, &mut trainable, &layer.w_k)?;
        let w_v = bind_projection(tape, &mut trainable, &layer.w_v)?;
        let w_o = bind(tape, &mut trainable, &layer.w_o);
        let ln_gain = bind(tape, &mut trainable, &layer.ln_gain);
        let ln_bias = bind(tape, &mut trainable, &layer.ln_bias);
        let mut biased_mask = Vec::with_capacity(heads);
        for mlp in &layer.edge {
            let bm = bind_mlp(tape, &mut trainable, mlp);
            let beta = mlp_apply(tape, &bm, edge_c)?;
            let beta_mat = tape.scatter_matrix(beta, prep.positions.clone(), prep.n)?;
            biased_mask.push(tape.add(beta_mat, mask_c)?);
        }
        bound_layers.push(BoundLayer { w_q, w_k, w_v, w_o, ln_gain, ln_bias, biased_mask });
    }
    let head = bind_mlp(tape, &mut trainable, &model.head);

    let mut v_cur = tape.constant(prep.v0.clone());
    let mut th_cur = tape.constant(prep.th0.clone());
    let mut vs = vec![v_cur];
    let mut ths = vec![th_cur];

    for step in 1..=cfg.unroll {
        let x = tape.concat_cols(&[static_c, v_cur, th_cur])?;
        let mut h = tape.matmul(x, w_in)?;
        for lb in &bound_layers {
            let q = tape.matmul(h, lb.w_q)?;
            let k = tape.matmul(h, lb.w_k)?;
            let v = tape.matmul(h, lb.w_v)?;
            let mut head_outs = Vec::with_capacity(heads);
            for m in 0..heads {
                let qm = tape.slice_cols(q, m * dh, (m + 1) * dh)?;
                let km = tape.slice_cols(k, m * dh, (m + 1) * dh)?;
                let vm = tape.slice_cols(v, m * dh, (m + 1) * dh)?;
                let logits = tape.matmul_nt(qm, km)?;
                let att = tape.masked_softmax(logits, lb.biased_mask[m], scale)?;
                head_outs.push(tape.matmul(att, vm)?);
            }
            let cat = tape.concat_cols(&head_outs)?;
            let proj = tape.matmul(cat, lb.w_o)?;
            let res = tape.add(h, proj)?;
            h = tape.layer_norm(res, lb.ln_gain, lb.ln_bias)?;
        }
        let delta = mlp_apply(tape, &head, h)?;
        let delta = tape.scalar_mul(delta, cfg.out_scale);
        let dv = tape.slice_cols(delta, 0, 1)?;
        let dth = tape.slice_cols(delta, 1, 2)?;
        let v_raw = tape.add(v_cur, dv)?;
        let th_raw = tape.add(th_cur, dth)?;
        // Slack clamp: zero the slack row, then add back its set voltage.
        let v_masked = tape.mul(v_raw, nonslack)?;
        let v_next = tape.add(v_masked, slack_fill)?;
        let th_next = tape.mul(th_raw, nonslack)?;
        if !tape.value(v_next).data.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalBlowup { what: "voltage magnitude", step });
        }
        if !tape.value(th_next).data.iter().all(|x| x.is_finite()) {
            return Err(Error::NumericalBlowup { what: "voltage angle", step });
        }
        v_cur = v_next;
        th_cur = th_next;
        vs.push(v_cur);
        ths.push(th_cur);
    }

    Ok(StateTrajectory { v: vs, theta: ths, trainable })
}

#[derive(Serialize, Deserialize)]
struct SavedParam {
    name: String,
    frozen: bool,
    value: Tensor,
}

#[derive(Serialize, Deserialize)]
struct SavedAdapter {
    target: String,
    rank: usize,
    alpha: f64,
    frozen: bool,
    a: Tensor,
    b: Tensor,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: ModelConfig,
    params: Vec<SavedParam>,
    adapters: Vec<SavedAdapter>,
}

pub fn checkpoint_to_json(model: &Model) -> Result<String> {
    let mut params = Vec::new();
    model.visit_params(|p| {
        params.push(SavedParam { name: p.name.clone(), frozen: p.frozen, value: p.value.clone() });
    });
    let mut adapters = Vec::new();
    for layer in &model.layers {
        for proj in [&layer.w_q, &layer.w_k, &layer.w_v] {
            if let Some(ad) = &proj.adapter {
                adapters.push(SavedAdapter {
                    target: proj.base.name.clone(),
                    rank: ad.rank,
                    alpha: ad.alpha,
                    frozen: ad.frozen,
                    a: ad.a.clone(),
                    b: ad.b.clone(),
                });
            }
        }
    }
    let file = CheckpointFile { config: model.config.clone(), params, adapters };
    Ok(serde_json::to_string(&file)?)
}

pub fn checkpoint_from_json(json: &str) -> Result<Model> {
    let file: CheckpointFile = serde_json::from_str(json)?;
    let c = &file.config;
    if c.d == 0 || c.heads == 0 || c.d % c.heads != 0 {
        return Err(Error::Checkpoint(format!(
            "invalid architecture: d = {}, heads = {}",
            c.d, c.heads
        )));
    }
    let mut model = Model::init(&file.config, 0);
    let mut cursor = 0usize;
    let mut bad: Option<String> = None;
    model.visit_params_mut(|name, p| {
        if bad.is_some() {
            return;
        }
        match file.params.get(cursor) {
            None => bad = Some("checkpoint has too few parameters".into()),
            Some(s) if s.name != name => {
                bad = Some(format!("parameter order mismatch: expected '{name}', found '{}'", s.name))
            }
            Some(s) if s.value.shape() != p.value.shape() => {
                bad = Some(format!("shape mismatch for '{name}'"))
            }
            Some(s) => {
                p.value = s.value.clone();
                p.frozen = s.frozen;
            }
        }
        cursor += 1;
    });
    if let Some(msg) = bad {
        return Err(Error::Checkpoint(msg));
    }
    if cursor != file.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model expects {cursor}",
            file.params.len()
        )));
    }
    for s in file.adapters {
        let proj = model
            .projection_mut(&s.target)
            .ok_or_else(|| Error::NoSuchTarget(s.target.clone()))?;
        if proj.adapter.is_some() {
            return Err(Error::AdapterAlreadyAttached { target: s.target });
        }
        proj.adapter =
            Some(LoraAdapter { a: s.a, b: s.b, rank: s.rank, alpha: s.alpha, frozen: s.frozen });
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_json(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    checkpoint_from_json(&std::fs::read_to_string(path)?)
}
