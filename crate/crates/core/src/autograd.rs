//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node ids are
//! already a topological order and [`Graph::backward`] walks them in reverse.

use crate::error::{Error, Result};
use crate::quant::{self, QuantParams, RoundingConfig};
use crate::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(Error::Dimension(format!("conv2d needs NCHW input and KCHW kernel, got {x:?} and {w:?}")));
        }
        if x[1] != w[1] {
            return Err(Error::Dimension(format!("conv2d channel mismatch: input {x:?}, kernel {w:?}")));
        }
        if stride == 0 {
            return Err(Error::Dimension("conv2d stride must be positive".into()));
        }
        let extent = |size: usize, k: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < k || !(padded - k).is_multiple_of(stride) {
                return Err(Error::Dimension(format!(
                    "conv2d output extent ({size} + 2*{padding} - {k}) / {stride} + 1 is not integral"
                )));
            }
            Ok((padded - k) / stride + 1)
        };
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            k: w[0],
            kh: w[2],
            kw: w[3],
            stride,
            padding,
            ho: extent(x[2], w[2])?,
            wo: extent(x[3], w[3])?,
        })
    }

    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn rows(&self) -> usize {
        self.n * self.ho * self.wo
    }

    /// Input offset for (sample, channel, output row/col, kernel row/col), if inside the image.
    #[inline]
    fn source(&self, n: usize, c: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
        let ix = (ox * self.stride + kx) as isize - self.padding as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some(((n * self.c + c) * self.h + iy as usize) * self.w + ix as usize)
        }
    }

    /// Patch matrix `[n*ho*wo, c*kh*kw]`.
    pub fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut cols = vec![0.0; self.rows() * patch];
        for n in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (n * self.ho + oy) * self.wo + ox;
                    let dst = &mut cols[row * patch..(row + 1) * patch];
                    let mut j = 0;
                    for c in 0..self.c {
                        for ky in 0..self.kh {
                            for kx in 0..self.kw {
                                if let Some(src) = self.source(n, c, oy, ox, ky, kx) {
                                    dst[j] = x[src];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add of a patch-matrix gradient back onto the input.
    pub fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let patch = self.patch();
        let mut dx = vec![0.0; self.n * self.c * self.h * self.w];
        for n in 0..self.n {
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = (n * self.ho + oy) * self.wo + ox;
                    let src = &cols[row * patch..(row + 1) * patch];
                    let mut j = 0;
                    for c in 0..self.c {
                        for ky in 0..self.kh {
                            for kx in 0..self.kw {
                                if let Some(dst) = self.source(n, c, oy, ox, ky, kx) {
                                    dx[dst] += src[j];
                                }
                                j += 1;
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Pure conv2d forward (no graph), used by inference-only paths.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(x.shape(), w.shape(), stride, padding)?;
    let cols = g.im2col(x.data());
    Ok(conv_from_cols(&g, &cols, w.data()))
}

fn conv_from_cols(g: &ConvGeometry, cols: &[f64], w: &[f64]) -> Tensor {
    let (rows, patch, k) = (g.rows(), g.patch(), g.k);
    let mut out_mat = vec![0.0; rows * k];
    // cols [rows, patch] x w^T [patch, k]
    gemm(rows, patch, k, cols, (patch, 1), w, (1, patch), &mut out_mat, false);
    let hw = g.ho * g.wo;
    let mut out = vec![0.0; rows * k];
    for n in 0..g.n {
        for p in 0..hw {
            let row = n * hw + p;
            for kk in 0..k {
                out[(n * k + kk) * hw + p] = out_mat[row * k + kk];
            }
        }
    }
    Tensor::new(vec![g.n, k, g.ho, g.wo], out).expect("conv output shape")
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    ChannelAffine(NodeId, Vec<f64>),
    Relu(NodeId),
    Sum(NodeId),
    Reshape(NodeId),
    GlobalAvgPool(NodeId),
    Conv2d { x: NodeId, w: NodeId, geom: ConvGeometry, cols: Vec<f64> },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<f64> },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftRound { v: NodeId, base: Vec<f64>, q: QuantParams, cfg: RoundingConfig },
    ActQuant { x: NodeId, s: NodeId, qmax: f64 },
    WeightedSqErr { a: NodeId, diff: Vec<f64>, weight: Vec<f64> },
    RoundingReg { v: NodeId, beta: f64, cfg: RoundingConfig },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Per-channel batch statistics recorded by [`Graph::batch_norm`].
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node on its tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Dimension(format!("expected [N, C, ...], got {shape:?}")));
    }
    let inner = shape[2..].iter().product();
    Ok((shape[0], shape[1], inner))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op, trainable: false });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Usage(format!("node {} is not on this graph", id.0)));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf; always receives a gradient from [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.nodes[id.0].trainable = true;
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).transpose2()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    /// `x W^T` for `x: [N, in]` and `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let wt = self.transpose(w)?;
        self.matmul(x, wt)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check(a)?;
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::Scale(a, c)))
    }

    /// Adds `b: [C]` along axis 1 of `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(x)?;
        self.check(b)?;
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        let bias = self.value(b);
        if bias.numel() != c {
            return Err(Error::Dimension(format!(
                "bias of {} elements for {c} channels",
                bias.numel()
            )));
        }
        let mut v = self.value(x).clone();
        let bd = bias.data().to_vec();
        let data = v.data_mut();
        for i in 0..n {
            for (j, &bj) in bd.iter().enumerate() {
                let base = (i * c + j) * inner;
                for e in &mut data[base..base + inner] {
                    *e += bj;
                }
            }
        }
        Ok(self.push(v, Op::AddBias(x, b)))
    }

    /// `x * scale[c] + shift[c]` along axis 1 with constant coefficients.
    pub fn channel_affine(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        self.check(x)?;
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        if scale.len() != c || shift.len() != c {
            return Err(Error::Dimension(format!("affine coefficients must have {c} elements")));
        }
        let mut v = self.value(x).clone();
        for (e, val) in v.data_mut().iter_mut().enumerate() {
            let j = (e / inner) % c;
            *val = *val * scale[j] + shift[j];
        }
        debug_assert_eq!(v.numel(), n * c * inner);
        Ok(self.push(v, Op::ChannelAffine(x, scale.to_vec())))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).map(|e| e.max(0.0));
        Ok(self.push(v, Op::Relu(x)))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let v = Tensor::scalar(self.value(x).sum());
        Ok(self.push(v, Op::Sum(x)))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.check(x)?;
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// `[N, C, H, W] -> [N, C]` by spatial mean.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        let shape = self.value(x).shape().to_vec();
        if shape.len() != 4 {
            return Err(Error::Dimension(format!("global pooling needs NCHW, got {shape:?}")));
        }
        let (n, c, inner) = (shape[0], shape[1], shape[2] * shape[3]);
        let xd = self.value(x).data();
        let v = Tensor::from_fn(&[n, c], |i| xd[i * inner..(i + 1) * inner].iter().sum::<f64>() / inner as f64);
        Ok(self.push(v, Op::GlobalAvgPool(x)))
    }

    /// Cross-correlation lowered to a patch-matrix product.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.check(x)?;
        self.check(w)?;
        let geom = ConvGeometry::new(self.value(x).shape(), self.value(w).shape(), stride, padding)?;
        let cols = geom.im2col(self.value(x).data());
        let v = conv_from_cols(&geom, &cols, self.value(w).data());
        Ok(self.push(v, Op::Conv2d { x, w, geom, cols }))
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check(logits)?;
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "cross entropy needs [N, m] logits for {} labels, got {:?}",
                labels.len(),
                lv.shape()
            )));
        }
        let (n, m) = (lv.shape()[0], lv.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
            return Err(Error::Input(format!("label {bad} out of range for {m} classes")));
        }
        let probs = softmax_rows(lv.data(), n, m);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| -probs[i * m + l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / n as f64;
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels: labels.to_vec(), probs }))
    }

    /// Training-mode batch normalization over every axis except 1.
    pub fn batch_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<(NodeId, BatchStats)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (n, c, inner) = channel_layout(self.value(x).shape())?;
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Dimension(format!("batch norm parameters must have {c} elements")));
        }
        let xd = self.value(x).data();
        let count = (n * inner) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for i in 0..n {
            for j in 0..c {
                let base = (i * c + j) * inner;
                mean[j] += xd[base..base + inner].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for i in 0..n {
            for j in 0..c {
                let base = (i * c + j) * inner;
                var[j] += xd[base..base + inner].iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..n {
            for j in 0..c {
                let base = (i * c + j) * inner;
                for e in base..base + inner {
                    xhat[e] = (xd[e] - mean[j]) * inv_std[j];
                    out[e] = gd[j] * xhat[e] + bd[j];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let stats = BatchStats { mean, var };
        let id = self.push(Tensor::new(shape, out)?, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        Ok((id, stats))
    }

    /// Learned-rounding weight `s * clip(floor(w/s) + h(v), n, p)`, differentiable in `v`.
    pub fn soft_round(&mut self, v: NodeId, w: &Tensor, q: &QuantParams, cfg: RoundingConfig) -> Result<NodeId> {
        self.check(v)?;
        if self.value(v).shape() != w.shape() {
            return Err(Error::Usage(format!(
                "rounding variable {:?} does not match weight {:?}",
                self.value(v).shape(),
                w.shape()
            )));
        }
        q.validate()?;
        let numel = w.numel();
        let base: Vec<f64> = w.data().iter().enumerate().map(|(i, &x)| (x / q.step_for(i, numel)).floor()).collect();
        let vd = self.value(v).data();
        let out: Vec<f64> = base
            .iter()
            .enumerate()
            .map(|(i, &b)| q.step_for(i, numel) * (b + quant::rectified_sigmoid(vd[i], cfg.zeta, cfg.gamma)).clamp(q.qmin, q.qmax))
            .collect();
        let value = Tensor::new(w.shape().to_vec(), out)?;
        Ok(self.push(value, Op::SoftRound { v, base, q: q.clone(), cfg }))
    }

    /// Unsigned activation fake quantization with step-size node `s` (scalar).
    /// Straight-through in `x` on `[0, p*s]`; learned-step-size rule in `s`.
    pub fn act_quant(&mut self, x: NodeId, s: NodeId, qmax: f64) -> Result<NodeId> {
        self.check(x)?;
        self.check(s)?;
        let sv = self.value(s);
        if !sv.is_scalar() || !(sv.item() > 0.0) {
            return Err(Error::Parameter(format!("activation step must be a positive scalar, got {:?}", sv.data())));
        }
        let step = sv.item();
        let v = self.value(x).map(|e| step * (e / step).round_ties_even().clamp(0.0, qmax));
        Ok(self.push(v, Op::ActQuant { x, s, qmax }))
    }

    /// `mean_batch sum_i weight_i (a_i - target_i)^2`; the batch is axis 0.
    pub fn weighted_sq_err(&mut self, a: NodeId, target: &Tensor, weight: &Tensor) -> Result<NodeId> {
        self.check(a)?;
        let av = self.value(a);
        av.expect_same_shape(target)?;
        av.expect_same_shape(weight)?;
        let n = av.shape()[0] as f64;
        let diff: Vec<f64> = av.data().iter().zip(target.data()).map(|(x, t)| x - t).collect();
        let loss = diff.iter().zip(weight.data()).map(|(d, w)| w * d * d).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::WeightedSqErr { a, diff, weight: weight.data().to_vec() }))
    }

    /// `lambda * sum(1 - |2 h(v) - 1|^beta)`.
    pub fn rounding_reg(&mut self, v: NodeId, beta: f64, cfg: RoundingConfig) -> Result<NodeId> {
        self.check(v)?;
        let total = self
            .value(v)
            .data()
            .iter()
            .map(|&x| 1.0 - (2.0 * quant::rectified_sigmoid(x, cfg.zeta, cfg.gamma) - 1.0).abs().powf(beta))
            .sum::<f64>()
            * cfg.lambda;
        Ok(self.push(Tensor::scalar(total), Op::RoundingReg { v, beta, cfg }))
    }

    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        self.check(root)?;
        if !self.value(root).is_scalar() {
            return Err(Error::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::ones(self.value(root).shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |id: NodeId, delta: Tensor| -> Result<()> {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut ga = vec![0.0; m * k];
                // g [m,n] x b^T [n,k]
                gemm(m, n, k, g.data(), (n, 1), bv.data(), (1, n), &mut ga, false);
                let mut gb = vec![0.0; k * n];
                // a^T [k,m] x g [m,n]
                gemm(k, m, n, av.data(), (1, k), g.data(), (n, 1), &mut gb, false);
                acc(*a, Tensor::new(vec![m, k], ga)?)?;
                acc(*b, Tensor::new(vec![k, n], gb)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose2()?)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.zip_map(self.value(*b), |x, y| x * y)?)?;
                acc(*b, g.zip_map(self.value(*a), |x, y| x * y)?)?;
            }
            Op::Scale(a, c) => acc(*a, g.scale(*c))?,
            Op::AddBias(x, b) => {
                let (n, c, inner) = channel_layout(g.shape())?;
                let mut gb = vec![0.0; c];
                let gd = g.data();
                for s in 0..n {
                    for (j, e) in gb.iter_mut().enumerate() {
                        let base = (s * c + j) * inner;
                        *e += gd[base..base + inner].iter().sum::<f64>();
                    }
                }
                acc(*x, g.clone())?;
                acc(*b, Tensor::new(self.value(*b).shape().to_vec(), gb)?)?;
            }
            Op::ChannelAffine(x, scale) => {
                let (_, c, inner) = channel_layout(g.shape())?;
                let mut gx = g.clone();
                for (e, val) in gx.data_mut().iter_mut().enumerate() {
                    *val *= scale[(e / inner) % c];
                }
                acc(*x, gx)?;
            }
            Op::Relu(x) => {
                let gx = g.zip_map(self.value(*x), |gi, xi| if xi > 0.0 { gi } else { 0.0 })?;
                acc(*x, gx)?;
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.value(*x).shape(), g.item()))?,
            Op::Reshape(x) => acc(*x, g.reshape(self.value(*x).shape())?)?,
            Op::GlobalAvgPool(x) => {
                let shape = self.value(*x).shape();
                let inner = shape[2] * shape[3];
                let gd = g.data();
                acc(*x, Tensor::from_fn(shape, |e| gd[e / inner] / inner as f64))?;
            }
            Op::Conv2d { x, w, geom, cols } => {
                let (rows, patch, k) = (geom.rows(), geom.patch(), geom.k);
                let hw = geom.ho * geom.wo;
                let gd = g.data();
                let mut gmat = vec![0.0; rows * k];
                for n in 0..geom.n {
                    for p in 0..hw {
                        for kk in 0..k {
                            gmat[(n * hw + p) * k + kk] = gd[(n * k + kk) * hw + p];
                        }
                    }
                }
                let mut gw = vec![0.0; k * patch];
                // gmat^T [k, rows] x cols [rows, patch]
                gemm(k, rows, patch, &gmat, (1, k), cols, (patch, 1), &mut gw, false);
                let mut gcols = vec![0.0; rows * patch];
                // gmat [rows, k] x w [k, patch]
                gemm(rows, k, patch, &gmat, (k, 1), self.value(*w).data(), (patch, 1), &mut gcols, false);
                acc(*w, Tensor::new(self.value(*w).shape().to_vec(), gw)?)?;
                acc(*x, Tensor::new(self.value(*x).shape().to_vec(), geom.col2im(&gcols))?)?;
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let shape = self.value(*logits).shape();
                let (n, m) = (shape[0], shape[1]);
                let scale = g.item() / n as f64;
                let mut gl = probs.clone();
                for (r, &l) in labels.iter().enumerate() {
                    gl[r * m + l] -= 1.0;
                }
                gl.iter_mut().for_each(|e| *e *= scale);
                acc(*logits, Tensor::new(vec![n, m], gl)?)?;
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, .. } => {
                let (n, c, inner) = channel_layout(g.shape())?;
                let gd = g.data();
                let count = (n * inner) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for j in 0..c {
                        let base = (s * c + j) * inner;
                        for e in base..base + inner {
                            sum_g[j] += gd[e];
                            sum_gx[j] += gd[e] * xhat[e];
                        }
                    }
                }
                let gam = self.value(*gamma).data();
                let mut gx = vec![0.0; gd.len()];
                for s in 0..n {
                    for j in 0..c {
                        let base = (s * c + j) * inner;
                        let coef = gam[j] * inv_std[j] / count;
                        for e in base..base + inner {
                            gx[e] = coef * (count * gd[e] - sum_g[j] - xhat[e] * sum_gx[j]);
                        }
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx)?)?;
                acc(*gamma, Tensor::new(self.value(*gamma).shape().to_vec(), sum_gx)?)?;
                acc(*beta, Tensor::new(self.value(*beta).shape().to_vec(), sum_g)?)?;
            }
            Op::SoftRound { v, base, q, cfg } => {
                let vd = self.value(*v).data();
                let numel = vd.len();
                let gv = Tensor::from_fn(self.value(*v).shape(), |e| {
                    let h = quant::rectified_sigmoid(vd[e], cfg.zeta, cfg.gamma);
                    let t = base[e] + h;
                    if t < q.qmin || t > q.qmax {
                        0.0
                    } else {
                        g.data()[e] * q.step_for(e, numel) * quant::rectified_sigmoid_grad(vd[e], cfg.zeta, cfg.gamma)
                    }
                });
                acc(*v, gv)?;
            }
            Op::ActQuant { x, s, qmax } => {
                let step = self.value(*s).item();
                let xv = self.value(*x);
                let upper = qmax * step;
                let gx = g.zip_map(xv, |gi, xi| if (0.0..=upper).contains(&xi) { gi } else { 0.0 })?;
                let gs: f64 = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * quant::act_step_partial(xi, step, *qmax))
                    .sum();
                acc(*x, gx)?;
                acc(*s, Tensor::new(self.value(*s).shape().to_vec(), vec![gs])?)?;
            }
            Op::WeightedSqErr { a, diff, weight } => {
                let av = self.value(*a);
                let c = 2.0 * g.item() / av.shape()[0] as f64;
                let ga: Vec<f64> = diff.iter().zip(weight).map(|(d, w)| c * w * d).collect();
                acc(*a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
            Op::RoundingReg { v, beta, cfg } => {
                let gi = g.item();
                let gv = self.value(*v).map(|x| {
                    let h = quant::rectified_sigmoid(x, cfg.zeta, cfg.gamma);
                    let u = 2.0 * h - 1.0;
                    if u == 0.0 {
                        return 0.0;
                    }
                    -gi * cfg.lambda * beta * u.abs().powf(beta - 1.0) * u.signum() * 2.0
                        * quant::rectified_sigmoid_grad(x, cfg.zeta, cfg.gamma)
                });
                acc(*v, gv)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows(logits: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let row = &logits[r * m..(r + 1) * m];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        for j in 0..m {
            out[r * m + j] = (row[j] - mx).exp() / denom;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_of_ones_is_nine() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[1, 1, 3, 3]));
        let w = g.param(Tensor::ones(&[1, 1, 3, 3]));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn delta_kernel_is_identity() {
        let x = Tensor::from_fn(&[2, 3, 5, 4], |i| (i as f64 * 0.37).sin());
        let w = Tensor::from_fn(&[3, 3, 3, 3], |i| {
            let (k, c, r) = (i / 27, (i / 9) % 3, i % 9);
            if k == c && r == 4 { 1.0 } else { 0.0 }
        });
        assert_eq!(conv2d_forward(&x, &w, 1, 1).unwrap(), x);
    }

    #[test]
    fn conv_non_integral_extent() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let w = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w, 2, 0), Err(Error::Dimension(_))));
        let w2 = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(conv2d_forward(&x, &w2, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn relu_values_and_gate() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::zeros(&[2, 4]));
        let l = g.cross_entropy(z, &[0, 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
        let z = g.constant(Tensor::new(vec![1, 3], vec![0.0, 100.0, 0.0]).unwrap());
        let l = g.cross_entropy(z, &[1]).unwrap();
        assert!(g.value(l).item() < 1e-40);
        assert!(matches!(g.cross_entropy(z, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn simple_gradients() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![3], vec![0.5, -2.0, 4.0]).unwrap());
        let s = g.sum(w).unwrap();
        assert_eq!(g.backward(s).unwrap().get(w).unwrap().data(), &[1.0; 3]);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        assert_eq!(g.backward(l).unwrap().get(w).unwrap().data(), &[1.0, -4.0, 8.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let w = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn unreached_params_get_zero_grads() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2]));
        let b = g.param(Tensor::ones(&[3, 1]));
        let l = g.sum(a).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(b).unwrap(), &Tensor::zeros(&[3, 1]));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let w = g.param(Tensor::new(vec![2], vec![1.0, 3.0]).unwrap());
        let a = g.add(w, w).unwrap();
        let b = g.add(a, w).unwrap();
        let l = g.sum(b).unwrap();
        assert_eq!(g.backward(l).unwrap().get(w).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn act_quant_straight_through() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![4], vec![-0.5, 0.26, 1.4, 9.0]).unwrap());
        let s = g.param(Tensor::scalar(0.5));
        let y = g.act_quant(x, s, 3.0).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.5, 1.5, 1.5]);
        let l = g.sum(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0, 1.0, 0.0]);
        let expected = (1.0 - 0.52) + (3.0 - 2.8) + 3.0;
        assert!((grads.get(s).unwrap().item() - expected).abs() < 1e-12);
    }

    #[test]
    fn conv_gradients_match_differences() {
        use crate::gradcheck::{finite_diff_grad, relative_error};
        let x0 = Tensor::from_fn(&[2, 3, 8, 8], |i| (i as f64 * 0.731).sin());
        let w0 = Tensor::from_fn(&[4, 3, 3, 3], |i| (i as f64 * 1.37).cos() * 0.5);
        let u = Tensor::from_fn(&[2, 4, 8, 8], |i| (i as f64 * 0.19).sin());
        let f = |x: &Tensor, w: &Tensor| -> f64 {
            let y = conv2d_forward(x, w, 1, 1).unwrap();
            y.data().iter().zip(u.data()).map(|(a, b)| a * b).sum()
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let w = g.param(w0.clone());
        let y = g.conv2d(x, w, 1, 1).unwrap();
        let uc = g.constant(u.clone());
        let m = g.mul(y, uc).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        let nx = finite_diff_grad(|t| Ok(f(t, &w0)), &x0, 1e-6).unwrap();
        let nw = finite_diff_grad(|t| Ok(f(&x0, t)), &w0, 1e-6).unwrap();
        assert!(relative_error(grads.get(x).unwrap(), &nx) < 1e-5);
        assert!(relative_error(grads.get(w).unwrap(), &nw) < 1e-5);
    }
}
