//! Brute-force second-order quantities for tiny models: finite-difference
//! Hessians, the Gauss-Newton quadratic form and the comparison between the
//! weight-space quadratic and the output-space quadratic under a perturbation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{softmax_rows, Graph, NodeId};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::{self, stored_act, stored_bn, Binder, Env, LayerNodes, Slot};
use crate::model::NetworkModel;
use crate::tensor::Tensor;

/// Largest parameter count the dense oracles accept.
pub const MAX_ORACLE_DIM: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlatEntry {
    pub layer: usize,
    pub kind: ParamKind,
    pub offset: usize,
    pub len: usize,
}

/// Stacked parameter vector with its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatParams {
    pub theta: Tensor,
    pub index: Vec<FlatEntry>,
}

impl FlatParams {
    /// All quantizable weights, in layer order.
    pub fn weights(model: &NetworkModel) -> Result<Self> {
        Self::collect(model, false)
    }

    /// Weights and biases of every layer.
    pub fn with_biases(model: &NetworkModel) -> Result<Self> {
        Self::collect(model, true)
    }

    fn collect(model: &NetworkModel, biases: bool) -> Result<Self> {
        let mut data = Vec::new();
        let mut index = Vec::new();
        for (k, l) in model.layers.iter().enumerate() {
            let mut push = |kind, t: &Tensor| {
                index.push(FlatEntry { layer: k, kind, offset: data.len(), len: t.numel() });
                data.extend_from_slice(t.data());
            };
            if biases || l.quantizable {
                push(ParamKind::Weight, &l.weight);
            }
            if biases {
                push(ParamKind::Bias, &l.bias);
            }
        }
        if data.is_empty() {
            return Err(Error::Usage("model has no parameters to flatten".into()));
        }
        let n = data.len();
        Ok(Self { theta: Tensor::new(vec![n], data)?, index })
    }

    pub fn dim(&self) -> usize {
        self.theta.numel()
    }

    /// Copy of `model` with `theta` written into the indexed tensors.
    pub fn unflatten(&self, model: &NetworkModel, theta: &Tensor) -> Result<NetworkModel> {
        let mut out = model.clone();
        self.write(&mut out, theta)?;
        Ok(out)
    }

    pub fn write(&self, model: &mut NetworkModel, theta: &Tensor) -> Result<()> {
        if theta.numel() != self.dim() {
            return Err(Error::Dimension(format!("theta has {} entries, layout needs {}", theta.numel(), self.dim())));
        }
        for e in &self.index {
            let l = &mut model.layers[e.layer];
            let t = match e.kind {
                ParamKind::Weight => &mut l.weight,
                ParamKind::Bias => &mut l.bias,
            };
            t.data_mut().copy_from_slice(&theta.data()[e.offset..e.offset + e.len]);
        }
        Ok(())
    }
}

/// Binds the indexed tensors as trainable leaves, everything else as constants.
struct FlatBinder<'a> {
    flat: &'a FlatParams,
    nodes: Vec<(usize, ParamKind, NodeId)>,
}

impl Binder for FlatBinder<'_> {
    fn bind(&mut self, g: &mut Graph, model: &NetworkModel, k: usize) -> Result<LayerNodes> {
        let l = &model.layers[k];
        let mut node = |kind, t: &Tensor| {
            if self.flat.index.iter().any(|e| e.layer == k && e.kind == kind) {
                let id = g.param(t.clone());
                self.nodes.push((k, kind, id));
                id
            } else {
                g.constant(t.clone())
            }
        };
        let weight = node(ParamKind::Weight, &l.weight);
        let bias = node(ParamKind::Bias, &l.bias);
        Ok(LayerNodes { weight, bias, act: stored_act(g, model, k, false), bn: stored_bn(model, k) })
    }
}

fn run_flat<'a>(model: &NetworkModel, flat: &'a FlatParams, inputs: &Tensor) -> Result<(Graph, Env, FlatBinder<'a>)> {
    let mut g = Graph::new();
    let mut env = Env::new();
    let x = g.constant(inputs.clone());
    env.insert(Slot::NetInput, x);
    let mut binder = FlatBinder { flat, nodes: Vec::new() };
    let all: Vec<usize> = (0..model.layers.len()).collect();
    forward::run_layers(&mut g, model, &all, &mut env, &mut binder)?;
    Ok((g, env, binder))
}

fn gather(flat: &FlatParams, binder: &FlatBinder, grads: &crate::autograd::Gradients) -> Result<Tensor> {
    let mut out = vec![0.0; flat.dim()];
    for e in &flat.index {
        let (_, _, id) = binder
            .nodes
            .iter()
            .find(|(k, kind, _)| *k == e.layer && *kind == e.kind)
            .ok_or_else(|| Error::Usage("parameter was not bound".into()))?;
        let g = grads.get(*id).ok_or_else(|| Error::Usage("missing gradient".into()))?;
        out[e.offset..e.offset + e.len].copy_from_slice(g.data());
    }
    Tensor::new(vec![flat.dim()], out)
}

/// Mean cross entropy of the FP model at `theta` and its gradient.
pub fn loss_and_grad(model: &NetworkModel, flat: &FlatParams, theta: &Tensor, batch: &Dataset) -> Result<(f64, Tensor)> {
    let m = flat.unflatten(model, theta)?;
    let (mut g, env, binder) = run_flat(&m, flat, &batch.inputs)?;
    let logits = env[&Slot::Pre(m.head_index())];
    let loss = g.cross_entropy(logits, &batch.labels)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), gather(flat, &binder, &grads)?))
}

pub fn loss_at(model: &NetworkModel, flat: &FlatParams, theta: &Tensor, batch: &Dataset) -> Result<f64> {
    let m = flat.unflatten(model, theta)?;
    crate::forward::evaluate(&m, &batch.inputs, &batch.labels, false).map(|r| r.loss)
}

/// Central-difference Hessian of a gradient field, symmetrized.
/// Returns the matrix and the relative asymmetry before symmetrization.
pub fn full_hessian_fd(
    mut grad: impl FnMut(&Tensor) -> Result<Tensor>,
    theta: &Tensor,
    h: f64,
) -> Result<(DMatrix<f64>, f64)> {
    let d = theta.numel();
    if d > MAX_ORACLE_DIM {
        return Err(Error::Scale(format!("finite-difference Hessian limited to {MAX_ORACLE_DIM} parameters, got {d}")));
    }
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut hm = DMatrix::zeros(d, d);
    let mut probe = theta.clone();
    for j in 0..d {
        let orig = probe.data()[j];
        probe.data_mut()[j] = orig + h;
        let up = grad(&probe)?;
        probe.data_mut()[j] = orig - h;
        let down = grad(&probe)?;
        probe.data_mut()[j] = orig;
        for i in 0..d {
            hm[(i, j)] = (up.data()[i] - down.data()[i]) / (2.0 * h);
        }
    }
    let asym = (&hm - hm.transpose()).norm() / hm.norm().max(f64::MIN_POSITIVE);
    let sym = (&hm + hm.transpose()) * 0.5;
    Ok((sym, asym))
}

/// Hessian of the mean cross entropy with respect to `flat`.
pub fn model_hessian_fd(model: &NetworkModel, flat: &FlatParams, batch: &Dataset, h: f64) -> Result<(DMatrix<f64>, f64)> {
    full_hessian_fd(|t| loss_and_grad(model, flat, t, batch).map(|(_, g)| g), &flat.theta, h)
}

/// `diag(p) - p p^T` for every row of the logits.
pub fn output_hessian(logits: &Tensor) -> Result<Vec<DMatrix<f64>>> {
    if logits.rank() != 2 {
        return Err(Error::Dimension(format!("expected [N, m] logits, got {:?}", logits.shape())));
    }
    let (n, m) = (logits.shape()[0], logits.shape()[1]);
    let p = softmax_rows(logits.data(), n, m);
    Ok((0..n)
        .map(|r| {
            let pr = DVector::from_row_slice(&p[r * m..(r + 1) * m]);
            DMatrix::from_diagonal(&pr) - &pr * pr.transpose()
        })
        .collect())
}

/// Per-sample Jacobians of the logits with respect to `flat`, each `m x d`.
pub fn jacobians(model: &NetworkModel, flat: &FlatParams, batch: &Dataset) -> Result<Vec<DMatrix<f64>>> {
    let n = batch.len();
    let m = model.num_classes;
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let x = batch.inputs.slice_rows(s, s + 1)?;
        let (mut g, env, binder) = run_flat(model, flat, &x)?;
        let logits = env[&Slot::Pre(model.head_index())];
        let mut jac = DMatrix::zeros(m, flat.dim());
        for i in 0..m {
            let onehot = g.constant(Tensor::from_fn(&[1, m], |j| if j == i { 1.0 } else { 0.0 }));
            let picked = g.mul(logits, onehot)?;
            let root = g.sum(picked)?;
            let grads = g.backward(root)?;
            let row = gather(flat, &binder, &grads)?;
            for (c, v) in row.data().iter().enumerate() {
                jac[(i, c)] = *v;
            }
        }
        out.push(jac);
    }
    Ok(out)
}

/// `E_n[(J_n dtheta)^T H_n (J_n dtheta)]` with the expectation over the batch.
pub fn gn_quadratic(model: &NetworkModel, flat: &FlatParams, batch: &Dataset, delta: &Tensor) -> Result<f64> {
    let jac = jacobians(model, flat, batch)?;
    let logits = forward::forward(model, &batch.inputs, false)?;
    let hz = output_hessian(&logits)?;
    gn_from_parts(&jac, &hz, delta)
}

fn gn_from_parts(jac: &[DMatrix<f64>], hz: &[DMatrix<f64>], delta: &Tensor) -> Result<f64> {
    let d = DVector::from_row_slice(delta.data());
    if jac.first().is_some_and(|j| j.ncols() != d.len()) {
        return Err(Error::Dimension(format!("perturbation has {} entries, Jacobian {}", d.len(), jac[0].ncols())));
    }
    let total: f64 = jac
        .iter()
        .zip(hz)
        .map(|(j, h)| {
            let dz = j * &d;
            (dz.transpose() * h * &dz)[(0, 0)]
        })
        .sum();
    Ok(total / jac.len() as f64)
}

/// Explicit `E_n[J_n^T H_n J_n]`.
pub fn gn_matrix(model: &NetworkModel, flat: &FlatParams, batch: &Dataset) -> Result<DMatrix<f64>> {
    let jac = jacobians(model, flat, batch)?;
    let logits = forward::forward(model, &batch.inputs, false)?;
    let hz = output_hessian(&logits)?;
    let d = flat.dim();
    let mut g = DMatrix::zeros(d, d);
    for (j, h) in jac.iter().zip(&hz) {
        g += j.transpose() * h * j;
    }
    Ok(g / jac.len() as f64)
}

/// Squared gradient of the mean loss at layer `id`'s pre-activation, per element.
pub fn fim_diag_preact(model: &NetworkModel, batch: &Dataset, id: &str) -> Result<Tensor> {
    let k = model.index_of(id)?;
    let mut g = Graph::new();
    let mut env = Env::new();
    let x = g.constant(batch.inputs.clone());
    env.insert(Slot::NetInput, x);
    let all: Vec<usize> = (0..model.layers.len()).collect();
    forward::run_layers(&mut g, model, &all, &mut env, &mut forward::StoredBinder { quantize_act: false })?;
    let loss = g.cross_entropy(env[&Slot::Pre(model.head_index())], &batch.labels)?;
    let grads = g.backward(loss)?;
    let gz = grads
        .get(env[&Slot::Pre(k)])
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(g.value(env[&Slot::Pre(k)]).shape()));
    Ok(gz.map(|v| v * v))
}

/// One rung of the perturbation ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticReport {
    pub epsilon: f64,
    pub delta_norm: f64,
    /// `dtheta^T H dtheta` with the finite-difference Hessian.
    pub lhs: f64,
    /// `dtheta^T G dtheta`.
    pub gn: f64,
    /// `E[dz^T H_z dz]` with the true output change.
    pub rhs: f64,
    /// `|lhs - gn| / |lhs|`.
    pub hessian_gap: f64,
    /// `|gn - rhs| / gn`.
    pub output_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub grad_inf_norm: f64,
    pub output_grad_inf_norm: f64,
    pub dim: usize,
    pub hessian_asymmetry: f64,
    pub hessian_frobenius: f64,
    pub rungs: Vec<QuadraticReport>,
    /// Output gaps strictly decrease along the ladder.
    pub monotone: bool,
}

pub const EPSILON_LADDER: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Gradient threshold defining a converged checkpoint.
pub const CONVERGED_GRAD: f64 = 1e-4;

fn rel(a: f64, b: f64, denom: f64) -> f64 {
    if denom == 0.0 {
        if a == b { 0.0 } else { f64::INFINITY }
    } else {
        (a - b).abs() / denom.abs()
    }
}

/// Random unit direction drawn from a seeded Gaussian.
pub fn unit_direction(dim: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = Tensor::randn(&[dim], 1.0, &mut rng);
    let n = t.norm();
    t.scale(1.0 / n)
}

/// Compares the weight-space and output-space quadratics along `direction`
/// for every `epsilon`. Fails with a precondition error unless the gradient
/// over the quantizable weights is below [`CONVERGED_GRAD`].
pub fn verify_output_identity(model: &NetworkModel, batch: &Dataset, epsilons: &[f64], direction: &Tensor) -> Result<IdentityCheck> {
    let flat = FlatParams::weights(model)?;
    let d = flat.dim();
    if d > MAX_ORACLE_DIM {
        return Err(Error::Scale(format!("oracle limited to {MAX_ORACLE_DIM} weights, model has {d}")));
    }
    if direction.numel() != d {
        return Err(Error::Dimension(format!("direction has {} entries, model {d}", direction.numel())));
    }
    let (_, grad) = loss_and_grad(model, &flat, &flat.theta, batch)?;
    let grad_inf = grad.max_abs();
    if !(grad_inf < CONVERGED_GRAD) {
        return Err(Error::Precondition(format!(
            "checkpoint is not converged: gradient infinity norm {grad_inf:.3e} >= {CONVERGED_GRAD:e}"
        )));
    }
    let logits = forward::forward(model, &batch.inputs, false)?;
    let (n, m) = (batch.len(), model.num_classes);
    let p = softmax_rows(logits.data(), n, m);
    let mut out_grad = 0.0f64;
    for (r, &l) in batch.labels.iter().enumerate() {
        for j in 0..m {
            let y = if j == l { 1.0 } else { 0.0 };
            out_grad = out_grad.max(((p[r * m + j] - y) / n as f64).abs());
        }
    }
    let (hmat, asym) = model_hessian_fd(model, &flat, batch, 1e-5)?;
    let jac = jacobians(model, &flat, batch)?;
    let hz = output_hessian(&logits)?;
    let mut rungs = Vec::new();
    for &eps in epsilons {
        let delta = direction.scale(eps);
        let dv = DVector::from_row_slice(delta.data());
        let lhs = (dv.transpose() * &hmat * &dv)[(0, 0)];
        let gn = gn_from_parts(&jac, &hz, &delta)?;
        let perturbed = flat.unflatten(model, &flat.theta.add(&delta)?)?;
        let dz = forward::forward(&perturbed, &batch.inputs, false)?.sub(&logits)?;
        let mut rhs = 0.0;
        for (r, h) in hz.iter().enumerate() {
            let v = DVector::from_row_slice(&dz.data()[r * m..(r + 1) * m]);
            rhs += (v.transpose() * h * &v)[(0, 0)];
        }
        rhs /= n as f64;
        rungs.push(QuadraticReport {
            epsilon: eps,
            delta_norm: delta.norm(),
            lhs,
            gn,
            rhs,
            hessian_gap: rel(lhs, gn, lhs),
            output_gap: rel(gn, rhs, gn),
        });
    }
    let monotone = rungs.windows(2).all(|w| w[1].output_gap < w[0].output_gap);
    Ok(IdentityCheck {
        grad_inf_norm: grad_inf,
        output_grad_inf_norm: out_grad,
        dim: d,
        hessian_asymmetry: asym,
        hessian_frobenius: hmat.norm(),
        rungs,
        monotone,
    })
}
