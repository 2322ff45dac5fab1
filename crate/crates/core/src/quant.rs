//! Uniform symmetric fake quantization for weights and unsigned activations,
//! learned rounding, and the activation step-size gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SUPPORTED_BITS: [u32; 4] = [2, 3, 4, 8];

/// Number of step-size candidates scanned by [`init_step_size`].
pub const STEP_SCAN_CANDIDATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundingMode {
    Nearest,
    Adaround,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    /// `{-2^(b-1), ..., 2^(b-1)-1}`, used for weights.
    Signed,
    /// `{0, ..., 2^b - 1}`, used for post-ReLU activations.
    Unsigned,
}

impl GridKind {
    pub fn bounds(self, bits: u32) -> (f64, f64) {
        match self {
            GridKind::Signed => (-(2f64.powi(bits as i32 - 1)), 2f64.powi(bits as i32 - 1) - 1.0),
            GridKind::Unsigned => (0.0, 2f64.powi(bits as i32) - 1.0),
        }
    }
}

pub fn check_bits(bits: u32) -> Result<u32> {
    if SUPPORTED_BITS.contains(&bits) {
        Ok(bits)
    } else {
        Err(Error::Parameter(format!("unsupported bitwidth {bits}, expected one of {SUPPORTED_BITS:?}")))
    }
}

/// State of one quantizer. `step` holds a single value, or one value per
/// output channel (leading axis) when `per_channel` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub bits: u32,
    pub step: Vec<f64>,
    pub qmin: f64,
    pub qmax: f64,
    pub per_channel: bool,
    pub mode: RoundingMode,
}

impl QuantParams {
    pub fn weight(bits: u32, step: f64) -> Result<Self> {
        Self::build(bits, vec![step], GridKind::Signed, false, RoundingMode::Nearest)
    }

    pub fn weight_per_channel(bits: u32, steps: Vec<f64>) -> Result<Self> {
        Self::build(bits, steps, GridKind::Signed, true, RoundingMode::Nearest)
    }

    pub fn activation(bits: u32, step: f64) -> Result<Self> {
        Self::build(bits, vec![step], GridKind::Unsigned, false, RoundingMode::Nearest)
    }

    fn build(bits: u32, step: Vec<f64>, kind: GridKind, per_channel: bool, mode: RoundingMode) -> Result<Self> {
        check_bits(bits)?;
        let q = {
            let (qmin, qmax) = kind.bounds(bits);
            Self { bits, step, qmin, qmax, per_channel, mode }
        };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step.is_empty() || self.step.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("step size must be positive, got {:?}", self.step)));
        }
        Ok(())
    }

    pub fn with_mode(mut self, mode: RoundingMode) -> Self {
        self.mode = mode;
        self
    }

    /// Step size applying to flat element `i` of a tensor with `numel` elements.
    #[inline]
    pub fn step_for(&self, i: usize, numel: usize) -> f64 {
        if self.step.len() == 1 {
            self.step[0]
        } else {
            self.step[i / (numel / self.step.len())]
        }
    }

    fn check_channels(&self, t: &Tensor) -> Result<()> {
        if self.step.len() > 1 && (t.shape()[0] != self.step.len()) {
            return Err(Error::Dimension(format!(
                "{} per-channel steps for tensor of shape {:?}",
                self.step.len(),
                t.shape()
            )));
        }
        Ok(())
    }
}

#[inline]
fn round_nearest(x: f64) -> f64 {
    x.round_ties_even()
}

/// `s * clip(round(w / s), n, p)` with ties rounded to even.
pub fn quantize_rtn(w: &Tensor, q: &QuantParams) -> Result<Tensor> {
    q.validate()?;
    q.check_channels(w)?;
    let numel = w.numel();
    let mut out = w.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let s = q.step_for(i, numel);
        *x = s * round_nearest(*x / s).clamp(q.qmin, q.qmax);
    }
    Ok(out)
}

/// Candidate multipliers `0.20, 0.21, ..., 1.19` of `max|w| / p`.
pub fn step_scan_candidates(max_abs: f64, qmax: f64) -> Vec<f64> {
    (0..STEP_SCAN_CANDIDATES)
        .map(|i| (20 + i) as f64 / 100.0 * max_abs / qmax)
        .collect()
}

pub(crate) fn quant_sq_error(values: &[f64], s: f64, qmin: f64, qmax: f64) -> f64 {
    values
        .iter()
        .map(|&x| {
            let e = s * round_nearest(x / s).clamp(qmin, qmax) - x;
            e * e
        })
        .sum()
}

/// Step size minimizing the squared RTN error over the candidate scan;
/// the first minimum wins on ties.
pub fn scan_step_size(values: &[f64], kind: GridKind, bits: u32) -> Result<f64> {
    check_bits(bits)?;
    let (qmin, qmax) = kind.bounds(bits);
    let max_abs = values.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if !(max_abs > 0.0) || !max_abs.is_finite() {
        return Err(Error::Parameter("cannot initialize a step size for an all-zero tensor".into()));
    }
    let mut best = (f64::INFINITY, 0.0);
    for s in step_scan_candidates(max_abs, qmax) {
        let err = quant_sq_error(values, s, qmin, qmax);
        if err < best.0 {
            best = (err, s);
        }
    }
    Ok(best.1)
}

/// Weight step size for a signed `bits`-bit grid.
pub fn init_step_size(w: &Tensor, bits: u32) -> Result<f64> {
    scan_step_size(w.data(), GridKind::Signed, bits)
}

/// One step per output channel (leading axis).
pub fn init_step_size_per_channel(w: &Tensor, bits: u32) -> Result<Vec<f64>> {
    let channels = w.shape()[0];
    let stride = w.numel() / channels;
    w.data()
        .chunks(stride)
        .map(|c| scan_step_size(c, GridKind::Signed, bits))
        .collect()
}

/// Rectified sigmoid stretch constants and the regularizer weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundingConfig {
    pub zeta: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub beta_start: f64,
    pub beta_end: f64,
    pub warmup: f64,
}

impl Default for RoundingConfig {
    fn default() -> Self {
        Self { zeta: 1.1, gamma: -0.1, lambda: 0.01, beta_start: 20.0, beta_end: 2.0, warmup: 0.2 }
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// `clip(sigmoid(v)(zeta - gamma) + gamma, 0, 1)`
#[inline]
pub fn rectified_sigmoid(v: f64, zeta: f64, gamma: f64) -> f64 {
    (sigmoid(v) * (zeta - gamma) + gamma).clamp(0.0, 1.0)
}

/// Derivative of [`rectified_sigmoid`]; zero where the clip saturates.
#[inline]
pub fn rectified_sigmoid_grad(v: f64, zeta: f64, gamma: f64) -> f64 {
    let sg = sigmoid(v);
    let raw = sg * (zeta - gamma) + gamma;
    if raw <= 0.0 || raw >= 1.0 {
        0.0
    } else {
        sg * (1.0 - sg) * (zeta - gamma)
    }
}

/// Learned-rounding variable for one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaRoundState {
    pub v: Tensor,
    pub config: RoundingConfig,
}

impl AdaRoundState {
    /// Initializes `v` so that the soft-rounded weight equals `w` wherever
    /// `w/s` lies inside the grid.
    pub fn from_weights(w: &Tensor, q: &QuantParams, config: RoundingConfig) -> Result<Self> {
        q.validate()?;
        q.check_channels(w)?;
        let numel = w.numel();
        let span = config.zeta - config.gamma;
        let v = Tensor::from_fn(w.shape(), |i| {
            let s = q.step_for(i, numel);
            let x = w.data()[i] / s;
            let rest = x - x.floor();
            // sigmoid^-1((rest - gamma) / span)
            let r = ((rest - config.gamma) / span).clamp(1e-6, 1.0 - 1e-6);
            (r / (1.0 - r)).ln()
        });
        Ok(Self { v, config })
    }

    pub fn soft(&self) -> Tensor {
        let c = self.config;
        self.v.map(|v| rectified_sigmoid(v, c.zeta, c.gamma))
    }

    /// Binary rounding choice: 1 (ceil) where the rectified sigmoid is at least 1/2.
    pub fn hard(&self) -> Tensor {
        let c = self.config;
        self.v.map(|v| if rectified_sigmoid(v, c.zeta, c.gamma) >= 0.5 { 1.0 } else { 0.0 })
    }

    /// Fraction of soft values within `tol` of 0 or 1.
    pub fn binarized_fraction(&self, tol: f64) -> f64 {
        let soft = self.soft();
        let near = soft.data().iter().filter(|&&h| h <= tol || h >= 1.0 - tol).count();
        near as f64 / soft.numel() as f64
    }
}

/// `s * clip(floor(w/s) + h, n, p)` for an arbitrary rounding offset `h`.
pub(crate) fn apply_rounding(w: &Tensor, q: &QuantParams, h: &Tensor) -> Result<Tensor> {
    w.expect_same_shape(h)?;
    q.validate()?;
    q.check_channels(w)?;
    let numel = w.numel();
    let mut out = w.clone();
    for (i, x) in out.data_mut().iter_mut().enumerate() {
        let s = q.step_for(i, numel);
        *x = s * ((*x / s).floor() + h.data()[i]).clamp(q.qmin, q.qmax);
    }
    Ok(out)
}

/// Soft learned-rounding weight.
pub fn adaround_apply(w: &Tensor, q: &QuantParams, state: &AdaRoundState) -> Result<Tensor> {
    if w.shape() != state.v.shape() {
        return Err(Error::Usage(format!(
            "rounding variable shape {:?} does not match weight {:?}",
            state.v.shape(),
            w.shape()
        )));
    }
    apply_rounding(w, q, &state.soft())
}

/// Learned-rounding weight with the rounding choice binarized.
pub fn adaround_hard(w: &Tensor, q: &QuantParams, state: &AdaRoundState) -> Result<Tensor> {
    if w.shape() != state.v.shape() {
        return Err(Error::Usage("rounding variable shape does not match weight".into()));
    }
    apply_rounding(w, q, &state.hard())
}

/// `lambda * sum(1 - |2 h(v) - 1|^beta)`
pub fn adaround_reg(state: &AdaRoundState, beta: f64) -> f64 {
    let c = state.config;
    c.lambda
        * state
            .v
            .data()
            .iter()
            .map(|&v| 1.0 - (2.0 * rectified_sigmoid(v, c.zeta, c.gamma) - 1.0).abs().powf(beta))
            .sum::<f64>()
}

/// Annealing temperature at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaPhase {
    pub beta: f64,
    /// False during warmup, when the rounding regularizer is switched off.
    pub reg_active: bool,
}

/// Regularizer off for the first `warmup` fraction of `total`; afterwards
/// `beta` falls from `beta_start` to `beta_end` along a half cosine, reaching
/// `beta_end` at `iter = total - 1`.
pub fn beta_schedule(iter: usize, total: usize, beta_start: f64, beta_end: f64, warmup: f64) -> BetaPhase {
    let warm = (warmup * total as f64).floor() as usize;
    if iter < warm {
        return BetaPhase { beta: beta_start, reg_active: false };
    }
    let span = total.saturating_sub(1).saturating_sub(warm);
    let r = if span == 0 { 1.0 } else { ((iter - warm) as f64 / span as f64).min(1.0) };
    let beta = beta_end + 0.5 * (beta_start - beta_end) * (1.0 + (std::f64::consts::PI * r).cos());
    BetaPhase { beta, reg_active: true }
}

/// `s * clip(round(x/s), 0, p)` on an unsigned grid.
pub fn act_fake_quant(x: &Tensor, q: &QuantParams) -> Result<Tensor> {
    q.validate()?;
    let s = q.step[0];
    Ok(x.map(|v| s * round_nearest(v / s).clamp(q.qmin, q.qmax)))
}

/// Per-element `d x_hat / d s` under the straight-through estimator.
#[inline]
pub(crate) fn act_step_partial(x: f64, s: f64, qmax: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x >= qmax * s {
        qmax
    } else {
        round_nearest(x / s) - x / s
    }
}

/// Learned-step-size gradient `dL/ds` given `upstream = dL/dx_hat`.
pub fn act_step_grad(x: &Tensor, q: &QuantParams, upstream: &Tensor) -> Result<f64> {
    x.expect_same_shape(upstream)?;
    q.validate()?;
    let s = q.step[0];
    Ok(x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&xi, &gi)| gi * act_step_partial(xi, s, q.qmax))
        .sum())
}
