//! On-disk model containers: a directory holding `manifest.json` and one
//! `BQTN` file per tensor.
//!
//! `BQTN` layout (little-endian): magic, u32 rank, rank × u32 extents, then
//! f32 payload in row-major order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Activation, BatchNormSpec, InputSource, LayerKind, LayerQuant, LayerSpec, NetworkModel, ResidualLink,
};
use crate::quant::RoundingMode;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"BQTN";
pub const MANIFEST: &str = "manifest.json";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub(crate) struct Reader<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Reader<'a> {
    pub fn u32(&mut self) -> std::result::Result<u32, String> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let bytes = n.checked_mul(4).ok_or("payload size overflows")?;
        let b = self.take(bytes)?;
        Ok(b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
    }

    pub fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated: needed {n} bytes at offset {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != TENSOR_MAGIC {
        return Err("bad magic, expected BQTN".into());
    }
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 8 {
        return Err(format!("unsupported rank {rank}"));
    }
    let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<std::result::Result<_, _>>()?;
    let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("extent product overflows")?;
    let data = r.f32s(numel)?;
    if r.pos != bytes.len() {
        return Err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Tensor::new(shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e.to_string()))?;
    decode_tensor(&bytes).map_err(|m| Error::load(path, m))
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    gamma: String,
    beta: String,
    mean: String,
    var: String,
    eps: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantEntry {
    weight_bits: u32,
    weight_step: Vec<f64>,
    mode: RoundingMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_bits: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    act_step: Option<f64>,
    qstep: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vround: Option<String>,
}

fn is_prev(s: &InputSource) -> bool {
    *s == InputSource::Prev
}

fn default_true() -> bool {
    true
}

fn default_one() -> usize {
    1
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerEntry {
    id: String,
    kind: LayerKind,
    weight: String,
    bias: String,
    #[serde(default = "default_one")]
    stride: usize,
    #[serde(default)]
    padding: usize,
    activation: Activation,
    #[serde(default, skip_serializing_if = "is_prev")]
    input: InputSource,
    #[serde(default)]
    global_pool: bool,
    #[serde(default = "default_true")]
    quantizable: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bn: Option<BnEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quant: Option<QuantEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    name: String,
    input_shape: Vec<usize>,
    num_classes: usize,
    layers: Vec<LayerEntry>,
    #[serde(default)]
    residual_links: Vec<ResidualLink>,
    blocks: Vec<Vec<String>>,
    stages: Vec<Vec<usize>>,
    #[serde(default)]
    metadata: serde_json::Map<String, serde_json::Value>,
}

/// Writes `model` into `dir` (created if missing).
pub fn save_model(model: &NetworkModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let put = |name: String, t: &Tensor| -> Result<String> {
        write_tensor(&dir.join(&name), t)?;
        Ok(name)
    };
    let mut layers = Vec::new();
    for l in &model.layers {
        let bn = match &l.bn {
            Some(bn) => Some(BnEntry {
                gamma: put(format!("{}.bn_gamma.bqtn", l.id), &bn.gamma)?,
                beta: put(format!("{}.bn_beta.bqtn", l.id), &bn.beta)?,
                mean: put(format!("{}.bn_mean.bqtn", l.id), &bn.mean)?,
                var: put(format!("{}.bn_var.bqtn", l.id), &bn.var)?,
                eps: bn.eps,
            }),
            None => None,
        };
        let quant = match &l.quant {
            Some(q) => {
                let steps = Tensor::new(vec![q.weight_step.len()], q.weight_step.clone())?;
                Some(QuantEntry {
                    weight_bits: q.weight_bits,
                    weight_step: q.weight_step.clone(),
                    mode: q.mode,
                    act_bits: q.act_bits,
                    act_step: q.act_step,
                    qstep: put(format!("{}.qstep", l.id), &steps)?,
                    vround: match &q.vround {
                        Some(v) => Some(put(format!("{}.vround", l.id), v)?),
                        None => None,
                    },
                })
            }
            None => None,
        };
        layers.push(LayerEntry {
            id: l.id.clone(),
            kind: l.kind,
            weight: put(format!("{}.weight.bqtn", l.id), &l.weight)?,
            bias: put(format!("{}.bias.bqtn", l.id), &l.bias)?,
            stride: l.stride,
            padding: l.padding,
            activation: l.activation,
            input: l.input.clone(),
            global_pool: l.global_pool,
            quantizable: l.quantizable,
            bn,
            quant,
        });
    }
    let manifest = Manifest {
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        num_classes: model.num_classes,
        layers,
        residual_links: model.residual_links.clone(),
        blocks: model.blocks.clone(),
        stages: model.stages.clone(),
        metadata: model.metadata.clone(),
    };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST), text)?;
    Ok(())
}

/// Reads and validates a model container.
pub fn load_model(dir: &Path) -> Result<NetworkModel> {
    let manifest_path = dir.join(MANIFEST);
    if !manifest_path.is_file() {
        return Err(Error::load(&manifest_path, "manifest.json not found"));
    }
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    let get = |name: &str| -> Result<Tensor> {
        let p: PathBuf = dir.join(name);
        read_tensor(&p)
    };
    let mut layers = Vec::with_capacity(m.layers.len());
    for e in &m.layers {
        let bn = match &e.bn {
            Some(b) => Some(BatchNormSpec {
                gamma: get(&b.gamma)?,
                beta: get(&b.beta)?,
                mean: get(&b.mean)?,
                var: get(&b.var)?,
                eps: b.eps,
            }),
            None => None,
        };
        let quant = match &e.quant {
            Some(q) => Some(LayerQuant {
                weight_bits: q.weight_bits,
                weight_step: q.weight_step.clone(),
                mode: q.mode,
                act_bits: q.act_bits,
                act_step: q.act_step,
                vround: match &q.vround {
                    Some(v) => Some(get(v)?),
                    None => None,
                },
            }),
            None => None,
        };
        layers.push(LayerSpec {
            id: e.id.clone(),
            kind: e.kind,
            weight: get(&e.weight)?,
            bias: get(&e.bias)?,
            stride: e.stride,
            padding: e.padding,
            bn,
            quantizable: e.quantizable,
            activation: e.activation,
            input: e.input.clone(),
            global_pool: e.global_pool,
            quant,
        });
    }
    let model = NetworkModel {
        name: m.name,
        input_shape: m.input_shape,
        num_classes: m.num_classes,
        layers,
        residual_links: m.residual_links,
        blocks: m.blocks,
        stages: m.stages,
        metadata: m.metadata,
    };
    model.validate().map_err(|e| Error::load(&manifest_path, e.to_string()))?;
    Ok(model)
}
