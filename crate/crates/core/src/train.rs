//! Minimal supervised training, enough to produce converged fixtures.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::{self, BnNodes, Binder, Env, LayerNodes, Slot};
use crate::hessian::{self, FlatParams};
use crate::model::NetworkModel;
use crate::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Running-statistics momentum for batch norm.
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch: 64, lr: 3e-3, bn_momentum: 0.1, seed: 0 }
    }
}

/// Every trainable tensor of the model in a fixed order.
fn param_tensors(model: &NetworkModel) -> Vec<Tensor> {
    let mut out = Vec::new();
    for l in &model.layers {
        out.push(l.weight.clone());
        out.push(l.bias.clone());
        if let Some(bn) = &l.bn {
            out.push(bn.gamma.clone());
            out.push(bn.beta.clone());
        }
    }
    out
}

fn store_params(model: &mut NetworkModel, params: &[Tensor]) {
    let mut it = params.iter();
    for l in &mut model.layers {
        l.weight = it.next().unwrap().clone();
        l.bias = it.next().unwrap().clone();
        if let Some(bn) = &mut l.bn {
            bn.gamma = it.next().unwrap().clone();
            bn.beta = it.next().unwrap().clone();
        }
    }
}

struct TrainBinder<'a> {
    params: &'a [Tensor],
    cursor: usize,
    ids: Vec<NodeId>,
}

impl Binder for TrainBinder<'_> {
    fn bind(&mut self, g: &mut Graph, model: &NetworkModel, k: usize) -> Result<LayerNodes> {
        let mut next = |g: &mut Graph| {
            let id = g.param(self.params[self.cursor].clone());
            self.cursor += 1;
            self.ids.push(id);
            id
        };
        let weight = next(g);
        let bias = next(g);
        let bn = if model.layers[k].bn.is_some() {
            let gamma = next(g);
            let beta = next(g);
            BnNodes::Train { gamma, beta }
        } else {
            BnNodes::None
        };
        Ok(LayerNodes { weight, bias, act: None, bn })
    }
}

/// Mini-batch Adam on the mean cross entropy. Returns the mean loss per epoch.
pub fn train(model: &mut NetworkModel, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if cfg.batch == 0 || cfg.epochs == 0 {
        return Err(Error::Usage("epochs and batch size must be positive".into()));
    }
    let mut params = param_tensors(model);
    let refs: Vec<&Tensor> = params.iter().collect();
    let mut adam = Adam::for_params(cfg.lr, &refs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let all: Vec<usize> = (0..model.layers.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch = data.subset(chunk)?;
            let mut g = Graph::new();
            let mut env = Env::new();
            let x = g.constant(batch.inputs.clone());
            env.insert(Slot::NetInput, x);
            let mut binder = TrainBinder { params: &params, cursor: 0, ids: Vec::new() };
            let stats = forward::run_layers(&mut g, model, &all, &mut env, &mut binder)?;
            let ids = binder.ids;
            let loss = g.cross_entropy(env[&Slot::Pre(model.head_index())], &batch.labels)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged { iteration: epoch, message: format!("training loss {lv}") });
            }
            total += lv * chunk.len() as f64;
            let grads = g.backward(loss)?;
            let gs: Vec<Tensor> = ids.iter().map(|&id| grads.get(id).cloned().unwrap()).collect();
            let grefs: Vec<&Tensor> = gs.iter().collect();
            let mut prefs: Vec<&mut Tensor> = params.iter_mut().collect();
            adam.step(&mut prefs, &grefs)?;
            for (k, st) in stats {
                let bn = model.layers[k].bn.as_mut().unwrap();
                let mo = cfg.bn_momentum;
                for j in 0..st.mean.len() {
                    let (m, v) = (&mut bn.mean.data_mut()[j], st.mean[j]);
                    *m = (1.0 - mo) * *m + mo * v;
                    let (r, v) = (&mut bn.var.data_mut()[j], st.var[j]);
                    *r = (1.0 - mo) * *r + mo * v;
                }
            }
        }
        history.push(total / data.len() as f64);
    }
    store_params(model, &params);
    Ok(history)
}

/// Damped Newton on the quantizable weights with a finite-difference Hessian,
/// until the gradient infinity norm drops below `tol`. Returns that norm.
pub fn polish_to_stationary(model: &mut NetworkModel, data: &Dataset, tol: f64, max_iter: usize) -> Result<f64> {
    let flat = FlatParams::weights(model)?;
    let mut theta = flat.theta.clone();
    let (mut loss, mut grad) = hessian::loss_and_grad(model, &flat, &theta, data)?;
    let mut mu = 1e-3;
    for _ in 0..max_iter {
        if grad.max_abs() < tol {
            break;
        }
        let (h, _) = hessian::model_hessian_fd(&flat.unflatten(model, &theta)?, &flat, data, 1e-5)?;
        let d = theta.numel();
        let g = DVector::from_row_slice(grad.data());
        let mut accepted = false;
        for _ in 0..30 {
            let damped = &h + DMatrix::identity(d, d) * mu;
            let Some(chol) = damped.clone().cholesky() else {
                mu *= 4.0;
                continue;
            };
            let step = chol.solve(&(-&g));
            let cand = theta.add(&Tensor::new(vec![d], step.as_slice().to_vec())?)?;
            let (cl, cg) = hessian::loss_and_grad(model, &flat, &cand, data)?;
            if cl.is_finite() && (cl < loss || cg.max_abs() < grad.max_abs() && cl <= loss + 1e-15) {
                theta = cand;
                loss = cl;
                grad = cg;
                mu = (mu / 3.0).max(1e-12);
                accepted = true;
                break;
            }
            mu *= 4.0;
        }
        if !accepted {
            break;
        }
    }
    flat.write(model, &theta)?;
    Ok(grad.max_abs())
}
