//! Graph construction for a [`NetworkModel`].
//!
//! Layers are emitted in order into a [`Graph`]; intermediate values are kept
//! in an environment keyed by [`Slot`], which lets a caller seed a partial run
//! (a reconstruction unit) with cached boundary tensors.

use std::collections::BTreeMap;

use crate::autograd::{BatchStats, Graph, NodeId};
use crate::error::{Error, Result};
use crate::model::{Activation, InputSource, LayerKind, LinkSource, NetworkModel};
use crate::quant::GridKind;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    NetInput,
    /// Input of layer k after its activation quantizer.
    Input(usize),
    /// Pre-activation of layer k.
    Pre(usize),
    /// Activated output of layer k.
    Output(usize),
}

pub type Env = BTreeMap<Slot, NodeId>;

#[derive(Debug, Clone, Copy)]
pub enum BnNodes {
    None,
    Eval,
    Train { gamma: NodeId, beta: NodeId },
}

/// Graph nodes standing in for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerNodes {
    pub weight: NodeId,
    pub bias: NodeId,
    /// Activation step node and upper grid bound.
    pub act: Option<(NodeId, f64)>,
    pub bn: BnNodes,
}

pub trait Binder {
    fn bind(&mut self, g: &mut Graph, model: &NetworkModel, k: usize) -> Result<LayerNodes>;
}

/// Uses the weights stored on the model. Activation quantizers are applied
/// when `quantize_act` is set and the layer carries a calibrated step.
pub struct StoredBinder {
    pub quantize_act: bool,
}

impl Binder for StoredBinder {
    fn bind(&mut self, g: &mut Graph, model: &NetworkModel, k: usize) -> Result<LayerNodes> {
        let layer = &model.layers[k];
        let weight = g.constant(layer.weight.clone());
        let bias = g.constant(layer.bias.clone());
        Ok(LayerNodes { weight, bias, act: stored_act(g, model, k, self.quantize_act), bn: stored_bn(model, k) })
    }
}

pub(crate) fn stored_bn(model: &NetworkModel, k: usize) -> BnNodes {
    if model.layers[k].bn.is_some() {
        BnNodes::Eval
    } else {
        BnNodes::None
    }
}

pub(crate) fn stored_act(g: &mut Graph, model: &NetworkModel, k: usize, enabled: bool) -> Option<(NodeId, f64)> {
    if !enabled {
        return None;
    }
    let q = model.layers[k].quant.as_ref()?;
    let (bits, step) = (q.act_bits?, q.act_step?);
    Some((g.constant(Tensor::scalar(step)), GridKind::Unsigned.bounds(bits).1))
}

fn lookup(env: &Env, slot: Slot, model: &NetworkModel) -> Result<NodeId> {
    env.get(&slot).copied().ok_or_else(|| {
        let name = |k: usize| model.layers[k].id.clone();
        let what = match slot {
            Slot::NetInput => "network input".to_string(),
            Slot::Input(k) => format!("input of {}", name(k)),
            Slot::Pre(k) => format!("pre-activation of {}", name(k)),
            Slot::Output(k) => format!("output of {}", name(k)),
        };
        Error::Usage(format!("{what} is not available"))
    })
}

/// Where layer `k`'s (unquantized) input comes from, or `None` when it
/// shares another layer's quantized input.
pub fn input_slot(model: &NetworkModel, k: usize) -> Result<Option<Slot>> {
    Ok(match &model.layers[k].input {
        InputSource::Prev if k == 0 => Some(Slot::NetInput),
        InputSource::Prev => Some(Slot::Output(k - 1)),
        InputSource::OutputOf(j) => Some(Slot::Output(model.index_of(j)?)),
        InputSource::SameAs(_) => None,
    })
}

/// Slots produced outside `layers` that running `layers` reads.
pub fn external_deps(model: &NetworkModel, layers: &[usize]) -> Result<Vec<Slot>> {
    let inside = |s: Slot| match s {
        Slot::NetInput => false,
        Slot::Input(k) | Slot::Pre(k) | Slot::Output(k) => layers.contains(&k),
    };
    let mut deps = Vec::new();
    for &k in layers {
        let slot = match input_slot(model, k)? {
            Some(s) => s,
            None => match &model.layers[k].input {
                InputSource::SameAs(j) => Slot::Input(model.index_of(j)?),
                _ => unreachable!(),
            },
        };
        deps.push(slot);
        for link in model.residual_links.iter().filter(|l| l.to == model.layers[k].id) {
            let f = model.index_of(&link.from)?;
            deps.push(match link.source {
                LinkSource::Input => Slot::Input(f),
                LinkSource::Output => Slot::Output(f),
            });
        }
    }
    deps.retain(|&s| !inside(s));
    deps.sort();
    deps.dedup();
    Ok(deps)
}

/// Emits `layers` in order. Returns batch statistics of train-mode batch norms.
pub fn run_layers(
    g: &mut Graph,
    model: &NetworkModel,
    layers: &[usize],
    env: &mut Env,
    binder: &mut dyn Binder,
) -> Result<Vec<(usize, BatchStats)>> {
    let mut stats = Vec::new();
    for &k in layers {
        let layer = &model.layers[k];
        let nodes = binder.bind(g, model, k)?;
        let x = match input_slot(model, k)? {
            None => {
                let InputSource::SameAs(j) = &layer.input else { unreachable!() };
                lookup(env, Slot::Input(model.index_of(j)?), model)?
            }
            Some(slot) => {
                let mut a = lookup(env, slot, model)?;
                if layer.kind == LayerKind::Linear && g.value(a).rank() == 4 {
                    a = if layer.global_pool {
                        g.global_avg_pool(a)?
                    } else {
                        let s = g.value(a).shape();
                        let flat = [s[0], s[1..].iter().product()];
                        g.reshape(a, &flat)?
                    };
                }
                if let Some((s, qmax)) = nodes.act {
                    a = g.act_quant(a, s, qmax)?;
                }
                a
            }
        };
        env.insert(Slot::Input(k), x);
        let mut z = match layer.kind {
            LayerKind::Linear => g.linear(x, nodes.weight)?,
            LayerKind::Conv2d => g.conv2d(x, nodes.weight, layer.stride, layer.padding)?,
        };
        z = g.add_bias(z, nodes.bias)?;
        match nodes.bn {
            BnNodes::None => {}
            BnNodes::Eval => {
                let bn = layer.bn.as_ref().ok_or_else(|| Error::Usage(format!("layer {} has no batch norm", layer.id)))?;
                let (scale, shift) = bn.affine()?;
                z = g.channel_affine(z, &scale, &shift)?;
            }
            BnNodes::Train { gamma, beta } => {
                let eps = layer.bn.as_ref().map_or(1e-5, |b| b.eps);
                let (out, st) = g.batch_norm(z, gamma, beta, eps)?;
                stats.push((k, st));
                z = out;
            }
        }
        for link in model.residual_links.iter().filter(|l| l.to == layer.id) {
            let f = model.index_of(&link.from)?;
            let slot = match link.source {
                LinkSource::Input => Slot::Input(f),
                LinkSource::Output => Slot::Output(f),
            };
            let r = lookup(env, slot, model)?;
            z = g.add(z, r)?;
        }
        env.insert(Slot::Pre(k), z);
        let y = match layer.activation {
            Activation::Relu => g.relu(z)?,
            Activation::None => z,
        };
        env.insert(Slot::Output(k), y);
    }
    Ok(stats)
}

/// Full forward with stored weights; returns the logits.
pub fn forward(model: &NetworkModel, input: &Tensor, quantize_act: bool) -> Result<Tensor> {
    let head = model.head_index();
    forward_slots(model, input, quantize_act, &[Slot::Pre(head)]).map(|mut v| v.remove(0))
}

/// Full forward returning the requested intermediate values.
pub fn forward_slots(model: &NetworkModel, input: &Tensor, quantize_act: bool, slots: &[Slot]) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let mut env = Env::new();
    let x = g.constant(input.clone());
    env.insert(Slot::NetInput, x);
    let all: Vec<usize> = (0..model.layers.len()).collect();
    run_layers(&mut g, model, &all, &mut env, &mut StoredBinder { quantize_act })?;
    slots.iter().map(|&s| Ok(g.value(lookup(&env, s, model)?).clone())).collect()
}

/// Accuracy and mean cross entropy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    pub loss: f64,
    pub samples: usize,
}

pub fn evaluate(model: &NetworkModel, inputs: &Tensor, labels: &[usize], quantize_act: bool) -> Result<EvalMetrics> {
    let n = inputs.shape()[0];
    if labels.len() != n {
        return Err(Error::Input(format!("{} labels for {n} samples", labels.len())));
    }
    if inputs.shape()[1..] != model.input_shape[..] {
        return Err(Error::Input(format!(
            "samples of shape {:?} do not match model input {:?}",
            &inputs.shape()[1..],
            model.input_shape
        )));
    }
    let m = model.num_classes;
    let (mut correct, mut loss) = (0usize, 0.0);
    let chunk = 256;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let logits = forward(model, &inputs.slice_rows(start, end)?, quantize_act)?;
        let probs = crate::autograd::softmax_rows(logits.data(), end - start, m);
        for (r, &label) in labels[start..end].iter().enumerate() {
            if label >= m {
                return Err(Error::Input(format!("label {label} out of range for {m} classes")));
            }
            let row = &logits.data()[r * m..(r + 1) * m];
            let pred = argmax(row);
            correct += usize::from(pred == label);
            loss -= probs[r * m + label].max(f64::MIN_POSITIVE).ln();
        }
    }
    Ok(EvalMetrics { accuracy: correct as f64 / n as f64, loss: loss / n as f64, samples: n })
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}
