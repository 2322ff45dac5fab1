//! Calibration by reconstruction of unit outputs.
//!
//! Units are processed in layer order. For each unit the boundary tensors are
//! captured from the partially quantized model, the targets and squared
//! output gradients from the FP model, and the rounding variables and
//! activation step sizes are fitted with Adam against the weighted squared
//! error of the unit output.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::data::{CalibrationSet, Dataset};
use crate::error::{Error, Result};
use crate::forward::{self, external_deps, input_slot, BnNodes, Binder, Env, LayerNodes, Slot, StoredBinder};
use crate::model::{partition, Granularity, LayerQuant, NetworkModel, ReconUnit};
use crate::optim::Adam;
use crate::quant::{
    self, beta_schedule, check_bits, init_step_size, init_step_size_per_channel, scan_step_size, AdaRoundState,
    GridKind, QuantParams, RoundingConfig, RoundingMode,
};
use crate::tensor::Tensor;

const MONITOR_BATCHES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FirstLastPolicy {
    /// Stem and head weights (and the head input) at 8 bits.
    #[default]
    Eight,
    /// Stem and head follow the body bit width.
    Follow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub iterations: usize,
    pub batch: usize,
    pub lr_round: f64,
    pub lr_step: f64,
    pub rounding: RoundingConfig,
    pub granularity: Granularity,
    pub weight_bits: u32,
    /// Activation bits; `None` keeps activations in floating point.
    pub act_bits: Option<u32>,
    pub first_last: FirstLastPolicy,
    /// Per-body-layer weight bits overriding `weight_bits`.
    pub bit_config: Option<Vec<u32>>,
    /// Weight the objective by squared output gradients; plain MSE otherwise.
    pub use_fisher: bool,
    /// Capture unit inputs from the partially quantized model.
    pub propagate_quantized: bool,
    pub per_channel: bool,
    /// Fraction of iterations that learn rounding only, before step sizes join.
    pub act_warmup: f64,
    pub seed: u64,
    /// Iterations between calibration log rows.
    pub log_every: usize,
    /// Iterations between evaluations of the hard-rounded loss on the
    /// first few cache batches.
    pub monitor_every: usize,
    #[serde(default)]
    pub keep_caches: bool,
}

impl ReconConfig {
    /// Defaults sized for the shipped fixtures.
    pub fn desk() -> Self {
        Self {
            iterations: 2000,
            batch: 32,
            lr_round: 1e-2,
            lr_step: 4e-5,
            rounding: RoundingConfig::default(),
            granularity: Granularity::Block,
            weight_bits: 4,
            act_bits: None,
            first_last: FirstLastPolicy::Eight,
            bit_config: None,
            use_fisher: true,
            propagate_quantized: true,
            per_channel: false,
            act_warmup: 0.2,
            seed: 0,
            log_every: 50,
            monitor_every: 20,
            keep_caches: false,
        }
    }

    /// The published schedule: 20k iterations at learning rate 1e-3.
    pub fn paper() -> Self {
        Self { iterations: 20_000, lr_round: 1e-3, log_every: 500, ..Self::desk() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch == 0 {
            return Err(Error::Usage("iterations and batch size must be positive".into()));
        }
        for (name, v) in [("lr_round", self.lr_round), ("lr_step", self.lr_step)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Usage(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.act_warmup) || !(0.0..1.0).contains(&self.rounding.warmup) {
            return Err(Error::Usage("warmup fractions must lie in [0, 1)".into()));
        }
        check_bits(self.weight_bits)?;
        if let Some(b) = self.act_bits {
            check_bits(b)?;
        }
        if let Some(c) = &self.bit_config {
            for &b in c {
                check_bits(b)?;
            }
        }
        if self.log_every == 0 || self.monitor_every == 0 {
            return Err(Error::Usage("log and monitor intervals must be positive".into()));
        }
        Ok(())
    }
}

/// Weight and input-activation bits of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerBits {
    pub weight: u32,
    pub act: Option<u32>,
}

/// Bits for every layer; `None` for layers left in floating point.
pub fn resolve_bits(model: &NetworkModel, cfg: &ReconConfig) -> Result<Vec<Option<LayerBits>>> {
    let body: Vec<usize> = model.body().collect();
    if let Some(c) = &cfg.bit_config {
        if c.len() != body.len() {
            return Err(Error::Usage(format!("bit config has {} entries for {} body layers", c.len(), body.len())));
        }
    }
    let head = model.head_index();
    let mut out = Vec::with_capacity(model.layers.len());
    for (k, layer) in model.layers.iter().enumerate() {
        if !layer.quantizable {
            out.push(None);
            continue;
        }
        let edge = k == 0 || k == head;
        let weight = if edge && cfg.first_last == FirstLastPolicy::Eight {
            8
        } else if edge {
            cfg.weight_bits
        } else {
            cfg.bit_config.as_ref().map_or(cfg.weight_bits, |c| c[k - 1])
        };
        // The network input is never quantized; shared inputs use their owner's quantizer.
        let owns_input = k > 0 && input_slot(model, k)?.is_some();
        let act = match cfg.act_bits {
            Some(_) if !owns_input => None,
            Some(_) if k == head && cfg.first_last == FirstLastPolicy::Eight => Some(8),
            a => a,
        };
        out.push(Some(LayerBits { weight, act }));
    }
    Ok(out)
}

/// Weighted squared error, averaged over the leading (batch) axis.
pub fn fim_weighted_loss(delta: &Tensor, grad: &Tensor) -> Result<f64> {
    if delta.shape() != grad.shape() {
        return Err(Error::Usage(format!("shape mismatch: {:?} vs {:?}", delta.shape(), grad.shape())));
    }
    let n = delta.shape()[0] as f64;
    Ok(delta.data().iter().zip(grad.data()).map(|(d, g)| g * g * d * d).sum::<f64>() / n)
}

/// Boundary data of one unit for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheBatch {
    pub deps: Vec<(Slot, Tensor)>,
    /// FP pre-activation of the unit's output layer.
    pub target: Tensor,
    /// Per-sample gradient of the task loss at the unit output (FP model).
    pub grad: Tensor,
    /// Objective weights: squared gradients scaled to unit mean over the cache.
    pub weight: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnitCache {
    pub unit: ReconUnit,
    pub target_layer: usize,
    pub batches: Vec<CacheBatch>,
}

/// FP outputs and per-sample loss gradients at `layers`, batch by batch.
pub fn fp_reference(
    fp: &NetworkModel,
    batches: &[Dataset],
    layers: &[usize],
) -> Result<Vec<BTreeMap<usize, (Tensor, Tensor)>>> {
    let all: Vec<usize> = (0..fp.layers.len()).collect();
    batches
        .iter()
        .map(|b| {
            let mut g = Graph::new();
            let mut env = Env::new();
            let x = g.constant(b.inputs.clone());
            env.insert(Slot::NetInput, x);
            forward::run_layers(&mut g, fp, &all, &mut env, &mut StoredBinder { quantize_act: false })?;
            let loss = g.cross_entropy(env[&Slot::Pre(fp.head_index())], &b.labels)?;
            let grads = g.backward(loss)?;
            let n = b.len() as f64;
            let mut out = BTreeMap::new();
            for &k in layers {
                let node = env[&Slot::Pre(k)];
                let z = g.value(node).clone();
                let gz = grads.get(node).map(|t| t.scale(n)).unwrap_or_else(|| Tensor::zeros(z.shape()));
                out.insert(k, (z, gz));
            }
            Ok(out)
        })
        .collect()
}

/// Captures the inputs of `unit` from `state` (quantized upstream) or `fp`,
/// with FP targets and gradient weights.
pub fn collect_unit_io(
    state: &NetworkModel,
    fp: &NetworkModel,
    calib: &CalibrationSet,
    unit: &ReconUnit,
    cfg: &ReconConfig,
) -> Result<UnitCache> {
    if calib.is_empty() {
        return Err(Error::Usage("calibration set is empty".into()));
    }
    let batches = calib.batches(cfg.batch)?;
    let target = unit.last();
    let refs = fp_reference(fp, &batches, &[target])?;
    build_cache(state, fp, &batches, &refs, unit, cfg)
}

fn build_cache(
    state: &NetworkModel,
    fp: &NetworkModel,
    batches: &[Dataset],
    refs: &[BTreeMap<usize, (Tensor, Tensor)>],
    unit: &ReconUnit,
    cfg: &ReconConfig,
) -> Result<UnitCache> {
    let target = unit.last();
    let deps = external_deps(state, &unit.layers)?;
    let mut out = Vec::with_capacity(batches.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, r) in batches.iter().zip(refs) {
        let values = if cfg.propagate_quantized {
            forward::forward_slots(state, &b.inputs, true, &deps)?
        } else {
            forward::forward_slots(fp, &b.inputs, false, &deps)?
        };
        let (z, gz) = r[&target].clone();
        let w = gz.map(|v| v * v);
        total += w.sum();
        count += w.numel();
        out.push(CacheBatch { deps: deps.iter().copied().zip(values).collect(), target: z, grad: gz, weight: w });
    }
    let mean = total / count as f64;
    for b in &mut out {
        b.weight = if !cfg.use_fisher {
            Tensor::ones(b.target.shape())
        } else if mean > 0.0 {
            b.weight.scale(1.0 / mean)
        } else {
            log::warn!("unit {}: zero output gradients, falling back to plain squared error", unit.name);
            Tensor::ones(b.target.shape())
        };
    }
    Ok(UnitCache { unit: unit.clone(), target_layer: target, batches: out })
}

/// Quantizer state of one layer inside a unit.
#[derive(Debug, Clone)]
struct LayerState {
    q: QuantParams,
    w: Tensor,
    ada: AdaRoundState,
    act: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WeightMode {
    Soft,
    Hard,
    Nearest,
}

struct UnitBinder<'a> {
    states: &'a BTreeMap<usize, LayerState>,
    mode: WeightMode,
    act_steps: &'a BTreeMap<usize, f64>,
    train_act: bool,
    v_nodes: Vec<(usize, NodeId)>,
    s_nodes: Vec<(usize, NodeId)>,
}

impl Binder for UnitBinder<'_> {
    fn bind(&mut self, g: &mut Graph, model: &NetworkModel, k: usize) -> Result<LayerNodes> {
        let layer = &model.layers[k];
        let bias = g.constant(layer.bias.clone());
        let Some(st) = self.states.get(&k) else {
            let weight = g.constant(layer.weight.clone());
            return Ok(LayerNodes { weight, bias, act: None, bn: BnNodes::None });
        };
        let weight = match self.mode {
            WeightMode::Soft => {
                let v = g.param(st.ada.v.clone());
                self.v_nodes.push((k, v));
                g.soft_round(v, &st.w, &st.q, st.ada.config)?
            }
            WeightMode::Hard => g.constant(quant::adaround_hard(&st.w, &st.q, &st.ada)?),
            WeightMode::Nearest => g.constant(quant::quantize_rtn(&st.w, &st.q)?),
        };
        let act = match (st.act, self.act_steps.get(&k)) {
            (Some(bits), Some(&step)) => {
                let node = if self.train_act { g.param(Tensor::scalar(step)) } else { g.constant(Tensor::scalar(step)) };
                if self.train_act {
                    self.s_nodes.push((k, node));
                }
                Some((node, GridKind::Unsigned.bounds(bits).1))
            }
            _ => None,
        };
        Ok(LayerNodes { weight, bias, act, bn: BnNodes::None })
    }
}

struct UnitPass {
    graph: Graph,
    loss: NodeId,
    recon: f64,
    v_nodes: Vec<(usize, NodeId)>,
    s_nodes: Vec<(usize, NodeId)>,
}

fn unit_pass(
    model: &NetworkModel,
    cache: &UnitCache,
    batch: &CacheBatch,
    states: &BTreeMap<usize, LayerState>,
    act_steps: &BTreeMap<usize, f64>,
    mode: WeightMode,
    train_act: bool,
) -> Result<UnitPass> {
    let mut g = Graph::new();
    let mut env = Env::new();
    for (slot, t) in &batch.deps {
        let id = g.constant(t.clone());
        env.insert(*slot, id);
    }
    let mut binder = UnitBinder { states, mode, act_steps, train_act, v_nodes: Vec::new(), s_nodes: Vec::new() };
    forward::run_layers(&mut g, model, &cache.unit.layers, &mut env, &mut binder)?;
    let z = env[&Slot::Pre(cache.target_layer)];
    let loss = g.weighted_sq_err(z, &batch.target, &batch.weight)?;
    let recon = g.value(loss).item();
    Ok(UnitPass { graph: g, loss, recon, v_nodes: binder.v_nodes, s_nodes: binder.s_nodes })
}

fn cache_loss(
    model: &NetworkModel,
    cache: &UnitCache,
    states: &BTreeMap<usize, LayerState>,
    act_steps: &BTreeMap<usize, f64>,
    mode: WeightMode,
) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for b in &cache.batches {
        let rows = b.target.shape()[0];
        total += unit_pass(model, cache, b, states, act_steps, mode, false)?.recon * rows as f64;
        n += rows;
    }
    Ok(total / n as f64)
}

/// One row of the calibration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogRow {
    pub unit: String,
    pub iteration: usize,
    pub recon_loss: f64,
    pub reg_loss: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnitReport {
    pub unit: String,
    pub layers: Vec<String>,
    /// Objective of the initial state rounded to nearest, over the whole cache.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Learned rounding lost to nearest rounding and was discarded.
    pub fell_back: bool,
    pub binarized_fraction: f64,
    /// `(iteration, hard-rounded loss on the monitor batches)` samples.
    pub hard_trace: Vec<(usize, f64)>,
}

impl UnitReport {
    /// Hard-rounded loss averaged over the last `window` iterations is
    /// strictly below its value at iteration 0.
    pub fn trend_improved(&self, window: usize) -> bool {
        let (Some(&(0, start)), Some(&(last_it, _))) = (self.hard_trace.first(), self.hard_trace.last()) else {
            return false;
        };
        let tail: Vec<f64> = self.hard_trace.iter().filter(|(i, _)| *i + window > last_it).map(|p| p.1).collect();
        tail.iter().sum::<f64>() / (tail.len() as f64) < start
    }
}

/// Calibrated state of every layer in a unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitResult {
    pub layers: BTreeMap<usize, LayerQuant>,
    /// Quantized weights to install.
    pub weights: BTreeMap<usize, Tensor>,
    pub report: UnitReport,
    pub log: Vec<LogRow>,
}

/// Fits rounding and activation steps of every quantizable layer in the unit.
pub fn reconstruct_unit(
    model: &NetworkModel,
    cache: &UnitCache,
    bits: &[Option<LayerBits>],
    cfg: &ReconConfig,
) -> Result<UnitResult> {
    cfg.validate()?;
    let unit = &cache.unit;
    let mut states = BTreeMap::new();
    for &k in &unit.layers {
        let Some(b) = bits[k] else { continue };
        let w = model.layers[k].weight.clone();
        let q = if cfg.per_channel {
            QuantParams::weight_per_channel(b.weight, init_step_size_per_channel(&w, b.weight)?)?
        } else {
            QuantParams::weight(b.weight, init_step_size(&w, b.weight)?)?
        }
        .with_mode(RoundingMode::Adaround);
        let ada = AdaRoundState::from_weights(&w, &q, cfg.rounding)?;
        states.insert(k, LayerState { q, w, ada, act: b.act });
    }

    // Activation steps start at the scan optimum over the cached inputs, layer
    // by layer so that later inputs see the earlier quantizers.
    let mut act_steps = BTreeMap::new();
    for (&k, st) in &states {
        let Some(bits) = st.act else { continue };
        let upto: Vec<usize> = unit.layers.iter().copied().take_while(|&j| j <= k).collect();
        let mut vals = Vec::new();
        for b in &cache.batches {
            let mut g = Graph::new();
            let mut env = Env::new();
            for (slot, t) in &b.deps {
                let id = g.constant(t.clone());
                env.insert(*slot, id);
            }
            let mut binder = UnitBinder {
                states: &states,
                mode: WeightMode::Nearest,
                act_steps: &act_steps,
                train_act: false,
                v_nodes: Vec::new(),
                s_nodes: Vec::new(),
            };
            forward::run_layers(&mut g, model, &upto, &mut env, &mut binder)?;
            vals.extend_from_slice(g.value(env[&Slot::Input(k)]).data());
        }
        let step = scan_step_size(&vals, GridKind::Unsigned, bits).unwrap_or(1e-3);
        act_steps.insert(k, step);
    }

    let init_steps = act_steps.clone();
    let initial_loss = cache_loss(model, cache, &states, &act_steps, WeightMode::Nearest)?;

    let v_shapes: Vec<Vec<usize>> = states.values().map(|s| s.ada.v.shape().to_vec()).collect();
    let v_refs: Vec<&[usize]> = v_shapes.iter().map(|s| s.as_slice()).collect();
    let mut adam_v = Adam::new(cfg.lr_round, &v_refs);
    let act_keys: Vec<usize> = act_steps.keys().copied().collect();
    let s_shapes: Vec<&[usize]> = act_keys.iter().map(|_| &[1usize][..]).collect();
    let mut adam_s = Adam::new(cfg.lr_step, &s_shapes);
    let act_start = (cfg.act_warmup * cfg.iterations as f64).floor() as usize;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (cache.target_layer as u64).wrapping_mul(0x9e37_79b9));
    let nb = cache.batches.len();
    let mut order: Vec<usize> = (0..nb).collect();
    let mut log = Vec::new();
    let mut hard_trace = Vec::new();
    let rc = cfg.rounding;
    for it in 0..cfg.iterations {
        if it % nb == 0 {
            order.shuffle(&mut rng);
        }
        let batch = &cache.batches[order[it % nb]];
        let train_act = it >= act_start && !act_keys.is_empty();
        let phase = beta_schedule(it, cfg.iterations, rc.beta_start, rc.beta_end, rc.warmup);
        let mut pass = unit_pass(model, cache, batch, &states, &act_steps, WeightMode::Soft, train_act)?;
        let mut root = pass.loss;
        let mut reg = 0.0;
        if phase.reg_active {
            for &(_, v) in &pass.v_nodes {
                let r = pass.graph.rounding_reg(v, phase.beta, rc)?;
                reg += pass.graph.value(r).item();
                root = pass.graph.add(root, r)?;
            }
        }
        if !pass.recon.is_finite() || !reg.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                message: format!("unit {} objective became {} + {}", unit.name, pass.recon, reg),
            });
        }
        if it % cfg.log_every == 0 || it + 1 == cfg.iterations {
            log.push(LogRow { unit: unit.name.clone(), iteration: it, recon_loss: pass.recon, reg_loss: reg, beta: phase.beta });
        }
        if it % cfg.monitor_every == 0 || it + 1 == cfg.iterations {
            let (mut total, mut rows) = (0.0, 0usize);
            for b in &cache.batches[..nb.min(MONITOR_BATCHES)] {
                let r = b.target.shape()[0];
                total += unit_pass(model, cache, b, &states, &act_steps, WeightMode::Hard, false)?.recon * r as f64;
                rows += r;
            }
            hard_trace.push((it, total / rows as f64));
        }
        let grads = pass.graph.backward(root)?;
        let vg: Vec<Tensor> = pass.v_nodes.iter().map(|(_, id)| grads.get(*id).cloned().unwrap()).collect();
        if vg.iter().any(|t| !t.all_finite()) {
            return Err(Error::Diverged { iteration: it, message: format!("unit {} rounding gradient is not finite", unit.name) });
        }
        {
            let mut params: Vec<&mut Tensor> = states.values_mut().map(|s| &mut s.ada.v).collect();
            let grefs: Vec<&Tensor> = vg.iter().collect();
            adam_v.step(&mut params, &grefs)?;
        }
        if train_act {
            let mut vals: Vec<Tensor> = act_keys.iter().map(|k| Tensor::scalar(act_steps[k])).collect();
            let sg: Vec<Tensor> = act_keys
                .iter()
                .map(|k| {
                    let id = pass.s_nodes.iter().find(|(kk, _)| kk == k).map(|p| p.1).unwrap();
                    grads.get(id).cloned().unwrap()
                })
                .collect();
            {
                let mut prefs: Vec<&mut Tensor> = vals.iter_mut().collect();
                let grefs: Vec<&Tensor> = sg.iter().collect();
                adam_s.step(&mut prefs, &grefs)?;
            }
            for (k, v) in act_keys.iter().zip(&vals) {
                let s = v.item();
                if !s.is_finite() {
                    return Err(Error::Diverged { iteration: it, message: format!("activation step of layer {k} is {s}") });
                }
                act_steps.insert(*k, s.max(1e-8));
            }
        }
        pass.graph = Graph::new();
    }

    let learned_loss = cache_loss(model, cache, &states, &act_steps, WeightMode::Hard)?;
    let fell_back = !(learned_loss <= initial_loss);
    if fell_back {
        log::warn!(
            "unit {}: learned rounding ({learned_loss:.6e}) is worse than nearest ({initial_loss:.6e}); keeping nearest",
            unit.name
        );
    }
    let final_loss = if fell_back { initial_loss } else { learned_loss };
    let steps = if fell_back { &init_steps } else { &act_steps };

    let mut layers = BTreeMap::new();
    let mut weights = BTreeMap::new();
    let (mut binarized, mut total) = (0.0, 0usize);
    for (&k, st) in &states {
        let (w, mode) = if fell_back {
            (quant::quantize_rtn(&st.w, &st.q)?, RoundingMode::Nearest)
        } else {
            (quant::adaround_hard(&st.w, &st.q, &st.ada)?, RoundingMode::Adaround)
        };
        binarized += st.ada.binarized_fraction(0.01) * st.w.numel() as f64;
        total += st.w.numel();
        weights.insert(k, w);
        layers.insert(
            k,
            LayerQuant {
                weight_bits: st.q.bits,
                weight_step: st.q.step.clone(),
                mode,
                act_bits: st.act,
                act_step: steps.get(&k).copied(),
                vround: Some(st.ada.v.clone()),
            },
        );
    }
    let report = UnitReport {
        unit: unit.name.clone(),
        layers: unit.layers.iter().map(|&k| model.layers[k].id.clone()).collect(),
        initial_loss,
        final_loss,
        fell_back,
        binarized_fraction: if total > 0 { binarized / total as f64 } else { 1.0 },
        hard_trace,
    };
    Ok(UnitResult { layers, weights, report, log })
}

#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub model: NetworkModel,
    pub reports: Vec<UnitReport>,
    pub log: Vec<LogRow>,
    pub caches: Vec<UnitCache>,
}

/// Calibrates every unit of a BN-folded model in order.
pub fn calibrate_model(fp: &NetworkModel, calib: &CalibrationSet, cfg: &ReconConfig) -> Result<CalibrationOutcome> {
    cfg.validate()?;
    if let Some(l) = fp.layers.iter().find(|l| l.bn.is_some()) {
        return Err(Error::Precondition(format!("layer {} still carries batch norm; fold it first", l.id)));
    }
    if calib.is_empty() {
        return Err(Error::Usage("calibration set is empty".into()));
    }
    let bits = resolve_bits(fp, cfg)?;
    let units = partition(fp, cfg.granularity)?;
    let batches = calib.batches(cfg.batch)?;
    let targets: Vec<usize> = units.iter().map(|u| u.last()).collect();
    let refs = fp_reference(fp, &batches, &targets)?;
    let mut state = fp.clone();
    let mut reports = Vec::new();
    let mut log = Vec::new();
    let mut caches = Vec::new();
    for unit in &units {
        let cache = build_cache(&state, fp, &batches, &refs, unit, cfg)?;
        let res = reconstruct_unit(&state, &cache, &bits, cfg)?;
        for (k, w) in res.weights {
            state.layers[k].weight = w;
        }
        for (k, q) in res.layers {
            state.layers[k].quant = Some(q);
        }
        log::info!(
            "unit {}: loss {:.4e} -> {:.4e}{}",
            unit.name,
            res.report.initial_loss,
            res.report.final_loss,
            if res.report.fell_back { " (nearest kept)" } else { "" }
        );
        reports.push(res.report);
        log.extend(res.log);
        if cfg.keep_caches {
            caches.push(cache);
        }
    }
    state.metadata.insert("calibration".into(), serde_json::to_value(cfg)?);
    Ok(CalibrationOutcome { model: state, reports, log, caches })
}

/// Applies nearest rounding to every quantizable layer without learning.
pub fn quantize_nearest(fp: &NetworkModel, calib: &CalibrationSet, cfg: &ReconConfig) -> Result<NetworkModel> {
    let bits = resolve_bits(fp, cfg)?;
    let mut model = fp.clone();
    let units = partition(fp, Granularity::Layer)?;
    let batches = calib.batches(cfg.batch)?;
    for unit in &units {
        let k = unit.layers[0];
        let Some(b) = bits[k] else { continue };
        let w = &fp.layers[k].weight;
        let q = QuantParams::weight(b.weight, init_step_size(w, b.weight)?)?;
        let mut act_step = None;
        if let Some(a) = b.act {
            let slot = input_slot(&model, k)?.ok_or_else(|| Error::Usage("shared input has no quantizer".into()))?;
            let mut vals = Vec::new();
            for batch in &batches {
                let mut v = forward::forward_slots(&model, &batch.inputs, true, &[slot])?.remove(0);
                if model.layers[k].global_pool && v.rank() == 4 {
                    let mut g = Graph::new();
                    let id = g.constant(v);
                    let p = g.global_avg_pool(id)?;
                    v = g.value(p).clone();
                }
                vals.extend_from_slice(v.data());
            }
            act_step = Some(scan_step_size(&vals, GridKind::Unsigned, a).unwrap_or(1e-3));
        }
        model.layers[k].weight = quant::quantize_rtn(w, &q)?;
        model.layers[k].quant = Some(LayerQuant {
            weight_bits: b.weight,
            weight_step: q.step.clone(),
            mode: RoundingMode::Nearest,
            act_bits: b.act,
            act_step,
            vround: None,
        });
    }
    Ok(model)
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
