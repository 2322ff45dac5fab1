//! Network description, batch-norm folding and reconstruction partitions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quant::RoundingMode;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Linear,
    Conv2d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

/// Where a layer reads its input from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    /// Output of the preceding layer (the network input for the first layer).
    #[default]
    Prev,
    /// Shares another layer's (quantized) input, e.g. a downsample branch.
    SameAs(String),
    /// Output of an earlier layer other than the preceding one.
    OutputOf(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkSource {
    /// The (quantized) input of the `from` layer.
    Input,
    /// The activated output of the `from` layer.
    Output,
}

/// Adds a tensor taken at `from` to the pre-activation of `to`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualLink {
    pub from: String,
    pub to: String,
    pub source: LinkSource,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormSpec {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub mean: Tensor,
    pub var: Tensor,
    pub eps: f64,
}

impl BatchNormSpec {
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
            eps,
        }
    }

    /// Per-channel `(scale, shift)` of the inference-time transform.
    pub fn affine(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let c = self.gamma.numel();
        let mut scale = Vec::with_capacity(c);
        let mut shift = Vec::with_capacity(c);
        for j in 0..c {
            let denom = self.var.data()[j] + self.eps;
            if !(denom > 0.0) {
                return Err(Error::Numeric(format!(
                    "batch norm channel {j} has variance + eps = {denom}"
                )));
            }
            let s = self.gamma.data()[j] / denom.sqrt();
            scale.push(s);
            shift.push(self.beta.data()[j] - self.mean.data()[j] * s);
        }
        Ok((scale, shift))
    }
}

/// Calibrated quantization state attached to a layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerQuant {
    pub weight_bits: u32,
    pub weight_step: Vec<f64>,
    pub mode: RoundingMode,
    /// Bits and step of the quantizer on this layer's input.
    pub act_bits: Option<u32>,
    pub act_step: Option<f64>,
    #[serde(skip)]
    pub vround: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    pub bn: Option<BatchNormSpec>,
    pub quantizable: bool,
    pub activation: Activation,
    pub input: InputSource,
    /// Spatial mean before a linear layer fed by a feature map.
    pub global_pool: bool,
    pub quant: Option<LayerQuant>,
}

impl LayerSpec {
    pub fn linear(id: &str, weight: Tensor, bias: Tensor, activation: Activation) -> Self {
        Self {
            id: id.to_string(),
            kind: LayerKind::Linear,
            weight,
            bias,
            stride: 1,
            padding: 0,
            bn: None,
            quantizable: true,
            activation,
            input: InputSource::Prev,
            global_pool: false,
            quant: None,
        }
    }

    pub fn conv(id: &str, weight: Tensor, bias: Tensor, stride: usize, padding: usize, activation: Activation) -> Self {
        Self { kind: LayerKind::Conv2d, stride, padding, ..Self::linear(id, weight, bias, activation) }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        let ws = self.weight.shape();
        let rank = match self.kind {
            LayerKind::Linear => 2,
            LayerKind::Conv2d => 4,
        };
        if ws.len() != rank {
            return Err(Error::Dimension(format!("layer {}: {:?} weight has shape {ws:?}", self.id, self.kind)));
        }
        if self.bias.shape() != [ws[0]] {
            return Err(Error::Dimension(format!(
                "layer {}: bias shape {:?} does not match {} outputs",
                self.id,
                self.bias.shape(),
                ws[0]
            )));
        }
        if self.kind == LayerKind::Conv2d && self.stride == 0 {
            return Err(Error::Dimension(format!("layer {}: zero stride", self.id)));
        }
        if let Some(bn) = &self.bn {
            for (name, t) in [("gamma", &bn.gamma), ("beta", &bn.beta), ("mean", &bn.mean), ("var", &bn.var)] {
                if t.shape() != [ws[0]] {
                    return Err(Error::Dimension(format!(
                        "layer {}: batch norm {name} has shape {:?}, expected [{}]",
                        self.id,
                        t.shape(),
                        ws[0]
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ordered layers with explicit block and stage structure.
///
/// The first layer is the stem and the last the head; neither belongs to a
/// block. Every other layer belongs to exactly one block.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub name: String,
    /// Per-sample input extents.
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
    pub residual_links: Vec<ResidualLink>,
    pub blocks: Vec<Vec<String>>,
    /// Each stage lists block indices.
    pub stages: Vec<Vec<usize>>,
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

impl NetworkModel {
    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.layers
            .iter()
            .position(|l| l.id == id)
            .ok_or_else(|| Error::Usage(format!("unknown layer id {id:?}")))
    }

    pub fn layer(&self, id: &str) -> Result<&LayerSpec> {
        Ok(&self.layers[self.index_of(id)?])
    }

    pub fn head_index(&self) -> usize {
        self.layers.len() - 1
    }

    /// Layer indices of each block.
    pub fn block_indices(&self) -> Result<Vec<Vec<usize>>> {
        self.blocks
            .iter()
            .map(|b| b.iter().map(|id| self.index_of(id)).collect())
            .collect()
    }

    /// Block index of each layer, `None` for stem and head.
    pub fn block_of(&self) -> Result<Vec<Option<usize>>> {
        let mut out = vec![None; self.layers.len()];
        for (bi, block) in self.block_indices()?.iter().enumerate() {
            for &k in block {
                out[k] = Some(bi);
            }
        }
        Ok(out)
    }

    /// Indices of the body layers (everything except stem and head).
    pub fn body(&self) -> std::ops::Range<usize> {
        1..self.layers.len().saturating_sub(1)
    }

    pub fn weight_elements(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.len() < 2 {
            return Err(Error::Input("a network needs at least a stem and a head layer".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) || self.num_classes == 0 {
            return Err(Error::Input(format!(
                "invalid input shape {:?} or class count {}",
                self.input_shape, self.num_classes
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            layer.validate()?;
            if self.layers[..i].iter().any(|l| l.id == layer.id) {
                return Err(Error::Input(format!("duplicate layer id {:?}", layer.id)));
            }
            let refers = match &layer.input {
                InputSource::Prev => None,
                InputSource::SameAs(j) | InputSource::OutputOf(j) => Some(j),
            };
            if let Some(j) = refers {
                if self.index_of(j)? >= i {
                    return Err(Error::Input(format!("layer {} reads from later layer {j}", layer.id)));
                }
                if i == 0 {
                    return Err(Error::Input("the stem must read the network input".into()));
                }
            }
        }

        let head = self.head_index();
        let mut owner = vec![None; self.layers.len()];
        let mut last_end = 0;
        for (bi, block) in self.block_indices()?.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::Input(format!("block {bi} is empty")));
            }
            for (pos, &k) in block.iter().enumerate() {
                if k == 0 || k == head {
                    return Err(Error::Input(format!(
                        "block {bi} contains the stem or head layer {}",
                        self.layers[k].id
                    )));
                }
                if pos > 0 && k != block[pos - 1] + 1 {
                    return Err(Error::Input(format!("block {bi} is not a contiguous layer range")));
                }
                if owner[k].is_some() {
                    return Err(Error::Input(format!("layer {} is in more than one block", self.layers[k].id)));
                }
                owner[k] = Some(bi);
            }
            if block[0] <= last_end && bi > 0 {
                return Err(Error::Input(format!("block {bi} is out of order")));
            }
            last_end = *block.last().unwrap();
        }
        if let Some(k) = self.body().find(|&k| owner[k].is_none()) {
            return Err(Error::Input(format!("body layer {} belongs to no block", self.layers[k].id)));
        }

        let mut next = 0;
        for (si, stage) in self.stages.iter().enumerate() {
            if stage.is_empty() {
                return Err(Error::Input(format!("stage {si} is empty")));
            }
            for &b in stage {
                if b != next {
                    return Err(Error::Input(format!("stage {si} does not continue the block sequence at {next}")));
                }
                next += 1;
            }
        }
        if next != self.blocks.len() {
            return Err(Error::Input(format!("stages cover {next} of {} blocks", self.blocks.len())));
        }

        for link in &self.residual_links {
            let (f, t) = (self.index_of(&link.from)?, self.index_of(&link.to)?);
            if f >= t {
                return Err(Error::Input(format!("residual link {} -> {} goes backwards", link.from, link.to)));
            }
            if owner[f].is_none() || owner[f] != owner[t] {
                return Err(Error::Input(format!(
                    "residual link {} -> {} crosses a block boundary",
                    link.from, link.to
                )));
            }
        }

        // A dry run on one sample catches shape disagreements between layers.
        let mut shape = vec![1];
        shape.extend_from_slice(&self.input_shape);
        let logits = crate::forward::forward(self, &Tensor::zeros(&shape), false)?;
        if logits.shape() != [1, self.num_classes] {
            return Err(Error::Dimension(format!(
                "network yields {:?} for {} classes",
                logits.shape(),
                self.num_classes
            )));
        }
        Ok(())
    }

    /// Pre-activation of layer `id` (residual additions included).
    pub fn forward_to(&self, input: &Tensor, id: &str) -> Result<Tensor> {
        let k = self.index_of(id)?;
        crate::forward::forward_slots(self, input, false, &[crate::forward::Slot::Pre(k)])
            .map(|mut v| v.remove(0))
    }
}

/// Folds inference-mode batch norm into the preceding weights and bias.
pub fn fold_bn(model: &NetworkModel) -> Result<NetworkModel> {
    let mut out = model.clone();
    for layer in &mut out.layers {
        let Some(bn) = layer.bn.take() else { continue };
        let (scale, _) = bn.affine()?;
        let k = layer.out_channels();
        let per = layer.weight.numel() / k;
        for (e, w) in layer.weight.data_mut().iter_mut().enumerate() {
            *w *= scale[e / per];
        }
        let b = layer.bias.data_mut();
        for j in 0..k {
            b[j] = scale[j] * (b[j] - bn.mean.data()[j]) + bn.beta.data()[j];
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    Layer,
    Block,
    Stage,
    Net,
}

impl Granularity {
    pub const ALL: [Granularity; 4] = [Granularity::Layer, Granularity::Block, Granularity::Stage, Granularity::Net];
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Granularity::Layer => "layer",
            Granularity::Block => "block",
            Granularity::Stage => "stage",
            Granularity::Net => "net",
        };
        f.write_str(s)
    }
}

impl FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "layer" => Ok(Granularity::Layer),
            "block" => Ok(Granularity::Block),
            "stage" => Ok(Granularity::Stage),
            "net" => Ok(Granularity::Net),
            other => Err(Error::Usage(format!("unknown granularity {other:?}"))),
        }
    }
}

/// A contiguous run of layers reconstructed jointly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconUnit {
    pub name: String,
    pub layers: Vec<usize>,
}

impl ReconUnit {
    pub fn contains(&self, k: usize) -> bool {
        self.layers.contains(&k)
    }

    pub fn last(&self) -> usize {
        *self.layers.last().expect("units are nonempty")
    }
}

/// Splits the quantizable layers into reconstruction units, in layer order.
/// Stem and head are always their own units.
pub fn partition(model: &NetworkModel, granularity: Granularity) -> Result<Vec<ReconUnit>> {
    let blocks = model.block_indices()?;
    let q = |k: &usize| model.layers[*k].quantizable;
    let single = |k: usize| ReconUnit { name: model.layers[k].id.clone(), layers: vec![k] };
    let mut units = Vec::new();
    if model.layers[0].quantizable {
        units.push(single(0));
    }
    match granularity {
        Granularity::Layer => units.extend(model.body().filter(|k| q(k)).map(single)),
        Granularity::Block => {
            for (bi, block) in blocks.iter().enumerate() {
                if block.iter().any(q) {
                    units.push(ReconUnit { name: format!("block{bi}"), layers: block.clone() });
                }
            }
        }
        Granularity::Stage => {
            for (si, stage) in model.stages.iter().enumerate() {
                let layers: Vec<usize> = stage.iter().flat_map(|&b| blocks[b].iter().copied()).collect();
                if layers.iter().any(q) {
                    units.push(ReconUnit { name: format!("stage{si}"), layers });
                }
            }
        }
        Granularity::Net => {
            let layers: Vec<usize> = model.body().collect();
            if layers.iter().any(q) {
                units.push(ReconUnit { name: "net".into(), layers });
            }
        }
    }
    let head = model.head_index();
    if model.layers[head].quantizable {
        units.push(single(head));
    }
    Ok(units)
}
