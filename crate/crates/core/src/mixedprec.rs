//! Mixed-precision bit assignment under a hardware budget.
//!
//! A [`SensitivityTable`] scores each layer at each bit width plus the joint
//! cost of 2-bit subsets inside a block. [`ga_search`] minimizes that score
//! over `{2,4,8}^n` subject to a [`HardwareTable`] budget, and
//! [`exhaustive_search`] enumerates small spaces exactly.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::CalibrationSet;
use crate::error::{Error, Result};
use crate::forward;
use crate::autograd::Graph;
use crate::model::NetworkModel;
use crate::tensor::Tensor;

pub const BITS: [u32; 3] = [2, 4, 8];
/// Largest block whose 2-bit subsets are enumerated.
pub const MAX_PERMUTATION_BLOCK: usize = 6;
pub const MAX_EXHAUSTIVE_LAYERS: usize = 12;

fn bit_index(b: u32) -> Result<usize> {
    BITS.iter().position(|&x| x == b).ok_or_else(|| Error::Data(format!("bit width {b} is not in {{2,4,8}}")))
}

/// Weight bits for each searched layer.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitConfig(pub Vec<u32>);

impl BitConfig {
    pub fn new(bits: Vec<u32>) -> Result<Self> {
        for &b in &bits {
            bit_index(b)?;
        }
        Ok(Self(bits))
    }

    pub fn uniform(n: usize, bits: u32) -> Self {
        Self(vec![bits; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetEntry {
    pub subset: Vec<String>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub layers: Vec<String>,
    /// Joint cost of every nonempty 2-bit subset; `None` means 2-bit layers
    /// of this block are scored by their diagonal terms.
    pub offdiag2: Option<Vec<SubsetEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityTable {
    pub layers: Vec<String>,
    pub reference_bits: u32,
    /// `diag[layer][bits]`.
    pub diag: BTreeMap<String, BTreeMap<String, f64>>,
    pub blocks: Vec<BlockEntry>,
}

impl SensitivityTable {
    pub fn diag_value(&self, layer: &str, bits: u32) -> Result<f64> {
        self.diag
            .get(layer)
            .and_then(|m| m.get(&bits.to_string()))
            .copied()
            .ok_or_else(|| Error::Data(format!("sensitivity table has no entry for layer {layer} at {bits} bits")))
    }

    /// Raises entries so that cost never grows with bit width.
    pub fn enforce_monotone(&mut self) {
        for (layer, m) in &mut self.diag {
            let mut floor = f64::NEG_INFINITY;
            for b in [8u32, 4, 2] {
                if let Some(v) = m.get_mut(&b.to_string()) {
                    if *v < floor {
                        if floor - *v > 1e-6 {
                            log::warn!("sensitivity of {layer} at {b} bits ({v:.3e}) is below the wider width ({floor:.3e}); raised");
                        }
                        *v = floor;
                    }
                    floor = *v;
                }
            }
        }
    }

    /// Resolves names into a form that scores configurations quickly.
    pub fn compile(&self) -> Result<FitnessModel> {
        let n = self.layers.len();
        let pos: BTreeMap<&str, usize> = self.layers.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut diag = Vec::with_capacity(n);
        for l in &self.layers {
            let mut row = [0.0; 3];
            for (j, &b) in BITS.iter().enumerate() {
                row[j] = self.diag_value(l, b)?;
            }
            diag.push(row);
        }
        let mut blocks = Vec::new();
        let mut covered = vec![false; n];
        for blk in &self.blocks {
            let idx: Vec<usize> = blk
                .layers
                .iter()
                .map(|l| pos.get(l.as_str()).copied().ok_or_else(|| Error::Data(format!("block layer {l} is not a searched layer"))))
                .collect::<Result<_>>()?;
            for &i in &idx {
                if std::mem::replace(&mut covered[i], true) {
                    return Err(Error::Data(format!("layer {} is in two blocks", self.layers[i])));
                }
            }
            let joint = match &blk.offdiag2 {
                None => None,
                Some(entries) => {
                    let mut table = vec![None; 1usize << idx.len()];
                    table[0] = Some(0.0);
                    for e in entries {
                        let mut mask = 0usize;
                        for l in &e.subset {
                            let j = blk.layers.iter().position(|x| x == l).ok_or_else(|| {
                                Error::Data(format!("subset layer {l} is not in block {:?}", blk.layers))
                            })?;
                            mask |= 1 << j;
                        }
                        table[mask] = Some(e.value);
                    }
                    let mut full = Vec::with_capacity(table.len());
                    for (mask, v) in table.into_iter().enumerate() {
                        let names: Vec<&str> =
                            (0..idx.len()).filter(|j| mask >> j & 1 == 1).map(|j| blk.layers[j].as_str()).collect();
                        full.push(v.ok_or_else(|| Error::Data(format!("no 2-bit joint entry for subset {names:?}")))?);
                    }
                    Some(full)
                }
            };
            blocks.push((idx, joint));
        }
        for (i, c) in covered.iter().enumerate() {
            if !c {
                blocks.push((vec![i], Some(vec![0.0, diag[i][0]])));
            }
        }
        Ok(FitnessModel { diag, blocks })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitnessModel {
    diag: Vec<[f64; 3]>,
    blocks: Vec<(Vec<usize>, Option<Vec<f64>>)>,
}

impl FitnessModel {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn eval(&self, c: &BitConfig) -> Result<f64> {
        if c.len() != self.diag.len() {
            return Err(Error::Data(format!("config has {} entries for {} layers", c.len(), self.diag.len())));
        }
        let mut total = 0.0;
        for (i, &b) in c.bits().iter().enumerate() {
            if b != 2 {
                total += self.diag[i][bit_index(b)?];
            }
        }
        for (idx, joint) in &self.blocks {
            match joint {
                Some(t) => {
                    let mask = idx.iter().enumerate().filter(|(_, &i)| c.0[i] == 2).fold(0usize, |m, (j, _)| m | 1 << j);
                    total += t[mask];
                }
                None => total += idx.iter().filter(|&&i| c.0[i] == 2).map(|&i| self.diag[i][0]).sum::<f64>(),
            }
        }
        Ok(total)
    }
}

/// Score of `c`: diagonal terms of the non-2-bit layers plus the joint term
/// of each block's 2-bit subset.
pub fn fitness(c: &BitConfig, table: &SensitivityTable) -> Result<f64> {
    table.compile()?.eval(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Constraint {
    Latency,
    Size,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareLayer {
    pub id: String,
    pub elements: u64,
    #[serde(default)]
    pub latency_ms: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareTable {
    pub constraint: Constraint,
    pub act_bits: u32,
    pub layers: Vec<HardwareLayer>,
}

impl HardwareTable {
    pub fn validate(&self) -> Result<()> {
        if self.constraint == Constraint::Size {
            return Ok(());
        }
        for l in &self.layers {
            let mut prev = 0.0;
            for b in BITS {
                let v = *l
                    .latency_ms
                    .get(&b.to_string())
                    .ok_or_else(|| Error::Data(format!("layer {} has no latency at {b} bits", l.id)))?;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(Error::Data(format!("layer {} latency at {b} bits must be positive, got {v}", l.id)));
                }
                if v < prev {
                    return Err(Error::Data(format!("layer {} latency decreases from {prev} to {v} as bits grow", l.id)));
                }
                prev = v;
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.id.clone()).collect()
    }
}

pub const MIB: f64 = 1024.0 * 1024.0;

/// Latency in ms or weight storage in MB (2^20 bytes).
pub fn hardware_measure(c: &BitConfig, table: &HardwareTable, act_bits: u32) -> Result<f64> {
    if act_bits != table.act_bits {
        return Err(Error::Data(format!("hardware table covers {}-bit activations, not {act_bits}", table.act_bits)));
    }
    if c.len() != table.layers.len() {
        return Err(Error::Data(format!("config has {} entries for {} table layers", c.len(), table.layers.len())));
    }
    match table.constraint {
        Constraint::Size => {
            let bits: u64 = table.layers.iter().zip(c.bits()).map(|(l, &b)| l.elements * b as u64).sum();
            Ok(bits as f64 / 8.0 / MIB)
        }
        Constraint::Latency => table
            .layers
            .iter()
            .zip(c.bits())
            .map(|(l, &b)| {
                l.latency_ms
                    .get(&b.to_string())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("layer {} has no latency at {b} bits", l.id)))
            })
            .sum(),
    }
}

/// ResNet-18 (ImageNet) convolution and classifier weights as a size table.
pub fn resnet18_size_table() -> HardwareTable {
    let mut layers = vec![("conv1".to_string(), 64 * 3 * 7 * 7)];
    let widths = [64u64, 128, 256, 512];
    let mut cin = 64u64;
    for (s, &w) in widths.iter().enumerate() {
        for b in 0..2 {
            let first_in = if b == 0 { cin } else { w };
            layers.push((format!("layer{}.{b}.conv1", s + 1), w * first_in * 9));
            layers.push((format!("layer{}.{b}.conv2", s + 1), w * w * 9));
            if b == 0 && s > 0 {
                layers.push((format!("layer{}.0.downsample", s + 1), w * cin));
            }
        }
        cin = w;
    }
    layers.push(("fc".to_string(), 1000 * 512));
    HardwareTable {
        constraint: Constraint::Size,
        act_bits: 8,
        layers: layers.into_iter().map(|(id, elements)| HardwareLayer { id, elements, latency_ms: BTreeMap::new() }).collect(),
    }
}

/// Body layers that take part in the search; stem and head stay at 8 bits.
pub fn searchable_layers(model: &NetworkModel) -> Vec<String> {
    model.body().filter(|&k| model.layers[k].quantizable).map(|k| model.layers[k].id.clone()).collect()
}

/// Weight storage in MB: quantized layers at their bit width, others at 32 bits.
pub fn model_size_mb(model: &NetworkModel) -> f64 {
    let bits: u64 = model
        .layers
        .iter()
        .map(|l| l.weight.numel() as u64 * l.quant.as_ref().map_or(32, |q| q.weight_bits as u64))
        .sum();
    bits as f64 / 8.0 / MIB
}

pub fn write_json<T: Serialize>(path: &std::path::Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// A made-up latency model: fixed launch cost plus a per-element cost that
/// shrinks sublinearly with bit width.
pub fn synthetic_latency_table(model: &NetworkModel, layers: &[String]) -> Result<HardwareTable> {
    let mut out = Vec::new();
    for id in layers {
        let l = model.layer(id)?;
        let elements = l.weight.numel() as u64;
        let macs = elements as f64 * spatial_positions(model, id)? as f64;
        let latency_ms = [(2u32, 0.4), (4, 0.6), (8, 1.0)]
            .into_iter()
            .map(|(b, f)| (b.to_string(), 0.002 + macs * f * 1e-6))
            .collect();
        out.push(HardwareLayer { id: id.clone(), elements, latency_ms });
    }
    Ok(HardwareTable { constraint: Constraint::Latency, act_bits: 8, layers: out })
}

fn spatial_positions(model: &NetworkModel, id: &str) -> Result<usize> {
    let x = Tensor::zeros(&[&[1usize][..], &model.input_shape[..]].concat());
    let k = model.index_of(id)?;
    let z = forward::forward_slots(model, &x, false, &[forward::Slot::Pre(k)])?.remove(0);
    Ok(z.numel() / model.layers[k].out_channels())
}

/// Copy of `reference` with each `(layer, bits)` taken from `models[bits]`.
pub fn compose(models: &BTreeMap<u32, NetworkModel>, reference_bits: u32, assign: &[(&str, u32)]) -> Result<NetworkModel> {
    let base = models
        .get(&reference_bits)
        .ok_or_else(|| Error::Usage(format!("no {reference_bits}-bit calibration was provided")))?;
    let mut out = base.clone();
    for &(id, b) in assign {
        let src = models.get(&b).ok_or_else(|| Error::Usage(format!("no {b}-bit calibration was provided")))?;
        let k = out.index_of(id)?;
        let layer = src.layer(id)?;
        if layer.weight.shape() != out.layers[k].weight.shape() {
            return Err(Error::Usage(format!("layer {id} differs in shape between calibrations")));
        }
        out.layers[k] = layer.clone();
    }
    Ok(out)
}

/// The mixed model for a searched configuration, built from unified calibrations.
pub fn compose_config(models: &BTreeMap<u32, NetworkModel>, layers: &[String], c: &BitConfig) -> Result<NetworkModel> {
    let assign: Vec<(&str, u32)> = layers.iter().map(|s| s.as_str()).zip(c.bits().iter().copied()).collect();
    compose(models, 8, &assign)
}

struct OutputProbe {
    batches: Vec<(Tensor, Tensor, Tensor)>,
}

impl OutputProbe {
    /// Reference logits and squared per-sample loss gradients at the FP logits.
    fn new(fp: &NetworkModel, reference: &NetworkModel, calib: &CalibrationSet) -> Result<Self> {
        let mut batches = Vec::new();
        for b in calib.batches(256)? {
            let z = forward::forward(fp, &b.inputs, false)?;
            let mut g = Graph::new();
            let zn = g.constant(z);
            let loss = g.cross_entropy(zn, &b.labels)?;
            let grads = g.backward(loss)?;
            let n = b.len() as f64;
            let w = grads.get(zn).map(|t| t.map(|v| v * v * n * n)).unwrap_or_else(|| Tensor::zeros(g.value(zn).shape()));
            let r = forward::forward(reference, &b.inputs, true)?;
            batches.push((b.inputs, r, w));
        }
        Ok(Self { batches })
    }

    fn degradation(&self, model: &NetworkModel) -> Result<f64> {
        let mut total = 0.0;
        let mut n = 0usize;
        for (x, r, w) in &self.batches {
            let z = forward::forward(model, x, true)?;
            total += z.data().iter().zip(r.data()).zip(w.data()).map(|((a, b), w)| w * (a - b) * (a - b)).sum::<f64>();
            n += x.shape()[0];
        }
        Ok(total / n as f64)
    }
}

/// Gradient-weighted output change of every single-layer swap and every
/// 2-bit subset of each block, relative to the 8-bit calibration.
pub fn measure_sensitivities(
    fp: &NetworkModel,
    models: &BTreeMap<u32, NetworkModel>,
    calib: &CalibrationSet,
    layers: &[String],
) -> Result<SensitivityTable> {
    for b in BITS {
        if !models.contains_key(&b) {
            return Err(Error::Usage(format!("measuring sensitivities needs a {b}-bit calibration")));
        }
    }
    let probe = OutputProbe::new(fp, &models[&8], calib)?;
    let mut diag = BTreeMap::new();
    for id in layers {
        let mut row = BTreeMap::new();
        for b in BITS {
            let v = if b == 8 { 0.0 } else { probe.degradation(&compose(models, 8, &[(id, b)])?)? };
            row.insert(b.to_string(), v);
        }
        diag.insert(id.clone(), row);
    }
    let mut blocks = Vec::new();
    let mut seen: Vec<&String> = Vec::new();
    for blk in &fp.blocks {
        let members: Vec<String> = blk.iter().filter(|l| layers.contains(l)).cloned().collect();
        if members.is_empty() {
            continue;
        }
        seen.extend(layers.iter().filter(|l| members.contains(l)));
        let offdiag2 = if members.len() > MAX_PERMUTATION_BLOCK {
            log::warn!("block {members:?} is too large for 2-bit permutations; using diagonal terms");
            None
        } else {
            let mut entries = Vec::new();
            for mask in 1usize..1 << members.len() {
                let subset: Vec<String> =
                    (0..members.len()).filter(|j| mask >> j & 1 == 1).map(|j| members[j].clone()).collect();
                let assign: Vec<(&str, u32)> = subset.iter().map(|s| (s.as_str(), 2)).collect();
                let value = probe.degradation(&compose(models, 8, &assign)?)?;
                entries.push(SubsetEntry { subset, value });
            }
            Some(entries)
        };
        blocks.push(BlockEntry { layers: members, offdiag2 });
    }
    for l in layers.iter().filter(|l| !seen.contains(l)) {
        let v = diag[l]["2"];
        blocks.push(BlockEntry { layers: vec![l.clone()], offdiag2: Some(vec![SubsetEntry { subset: vec![l.clone()], value: v }]) });
    }
    let mut table = SensitivityTable { layers: layers.to_vec(), reference_bits: 8, diag, blocks };
    table.enforce_monotone();
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation: f64,
    pub topk: usize,
    pub seed: u64,
    /// Consecutive rejected offspring before giving up.
    pub stall_limit: usize,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self { population: 50, generations: 100, mutation: 0.1, topk: 10, seed: 0, stall_limit: 10_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationLog {
    pub generation: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub config: BitConfig,
    pub fitness: f64,
    pub hardware: f64,
    pub generations: Vec<GenerationLog>,
}

/// Child taking each gene from one of two randomly drawn archive members.
pub fn crossover<R: Rng>(topk: &[BitConfig], rng: &mut R) -> BitConfig {
    let a = &topk[rng.random_range(0..topk.len())];
    let b = &topk[rng.random_range(0..topk.len())];
    BitConfig(a.0.iter().zip(&b.0).map(|(&x, &y)| if rng.random_bool(0.5) { x } else { y }).collect())
}

/// Resamples each gene uniformly from {2,4,8} with probability `p`.
pub fn mutate<R: Rng>(parent: &BitConfig, p: f64, rng: &mut R) -> BitConfig {
    BitConfig(parent.0.iter().map(|&g| if rng.random_bool(p) { BITS[rng.random_range(0..3)] } else { g }).collect())
}

fn check_feasible(hw: &HardwareTable, n: usize, delta: f64) -> Result<f64> {
    hw.validate()?;
    let floor = hardware_measure(&BitConfig::uniform(n, 2), hw, hw.act_bits)?;
    if floor > delta {
        return Err(Error::Infeasible { threshold: delta, min_achievable: floor });
    }
    Ok(floor)
}

pub fn ga_search(table: &SensitivityTable, hw: &HardwareTable, delta: f64, cfg: &GaConfig) -> Result<SearchResult> {
    ga_search_audited(table, hw, delta, cfg, &mut |_, _| {})
}

/// [`ga_search`] calling `audit` with every admitted individual and its cost.
pub fn ga_search_audited(
    table: &SensitivityTable,
    hw: &HardwareTable,
    delta: f64,
    cfg: &GaConfig,
    audit: &mut dyn FnMut(&BitConfig, f64),
) -> Result<SearchResult> {
    if cfg.population < 2 || cfg.topk == 0 || !(0.0..=1.0).contains(&cfg.mutation) {
        return Err(Error::Usage("population must be at least 2, topk positive and mutation in [0, 1]".into()));
    }
    let model = table.compile()?;
    let n = model.len();
    if hw.ids() != table.layers {
        return Err(Error::Data("hardware table and sensitivity table list different layers".into()));
    }
    check_feasible(hw, n, delta)?;
    let act = hw.act_bits;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(1.0f64, 1.0).expect("valid normal");

    // Initial population: Gaussian draws over bit indices, repaired toward
    // 2 bits until they fit the budget.
    let mut pop = Vec::with_capacity(cfg.population);
    while pop.len() < cfg.population {
        let mut c = BitConfig(
            (0..n).map(|_| BITS[normal.sample(&mut rng).round().clamp(0.0, 2.0) as usize]).collect(),
        );
        let mut h = hardware_measure(&c, hw, act)?;
        while h > delta {
            let wide: Vec<usize> = (0..n).filter(|&i| c.0[i] != 2).collect();
            let i = wide[rng.random_range(0..wide.len())];
            c.0[i] = BITS[bit_index(c.0[i])? - 1];
            h = hardware_measure(&c, hw, act)?;
        }
        audit(&c, h);
        pop.push(c);
    }

    let mut archive: Vec<(f64, BitConfig)> = Vec::new();
    let mut log = Vec::with_capacity(cfg.generations);
    let mut rejected_last = 0;
    for generation in 0..cfg.generations {
        let mut sum = 0.0;
        for c in &pop {
            let f = model.eval(c)?;
            sum += f;
            if !archive.iter().any(|(_, a)| a == c) {
                archive.push((f, c.clone()));
            }
        }
        archive.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        archive.truncate(cfg.topk);
        log.push(GenerationLog {
            generation,
            best_fitness: archive[0].0,
            mean_fitness: sum / pop.len() as f64,
            rejected: rejected_last,
        });
        if generation + 1 == cfg.generations {
            break;
        }
        let parents: Vec<BitConfig> = archive.iter().map(|p| p.1.clone()).collect();
        let mut next = Vec::with_capacity(cfg.population);
        let mut stall = 0;
        rejected_last = 0;
        while next.len() < cfg.population {
            let child = if next.len() < cfg.population / 2 {
                crossover(&parents, &mut rng)
            } else {
                mutate(&parents[rng.random_range(0..parents.len())], cfg.mutation, &mut rng)
            };
            let h = hardware_measure(&child, hw, act)?;
            if h <= delta {
                audit(&child, h);
                next.push(child);
                stall = 0;
            } else {
                stall += 1;
                rejected_last += 1;
                if stall >= cfg.stall_limit {
                    return Err(Error::Search(format!(
                        "{stall} consecutive offspring exceeded the budget at generation {generation}"
                    )));
                }
            }
        }
        pop = next;
    }
    let (fitness, config) = archive.swap_remove(0);
    let hardware = hardware_measure(&config, hw, act)?;
    Ok(SearchResult { config, fitness, hardware, generations: log })
}

/// True optimum by enumerating all `3^n` configurations.
pub fn exhaustive_search(table: &SensitivityTable, hw: &HardwareTable, delta: f64) -> Result<(BitConfig, f64)> {
    let n = table.layers.len();
    if n > MAX_EXHAUSTIVE_LAYERS {
        return Err(Error::Scale(format!("{n} layers exceed the exhaustive limit of {MAX_EXHAUSTIVE_LAYERS}")));
    }
    let model = table.compile()?;
    check_feasible(hw, n, delta)?;
    let mut best: Option<(f64, BitConfig)> = None;
    for code in 0..3usize.pow(n as u32) {
        let mut rest = code;
        let c = BitConfig(
            (0..n)
                .map(|_| {
                    let b = BITS[rest % 3];
                    rest /= 3;
                    b
                })
                .collect(),
        );
        if hardware_measure(&c, hw, hw.act_bits)? > delta {
            continue;
        }
        let f = model.eval(&c)?;
        if best.as_ref().is_none_or(|(bf, _)| f < *bf) {
            best = Some((f, c));
        }
    }
    let (f, c) = best.expect("all-2 configuration is feasible");
    Ok((c, f))
}

/// A random table over `n` layers grouped into blocks of `block` layers.
pub fn random_tables(n: usize, block: usize, seed: u64) -> (SensitivityTable, HardwareTable) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers: Vec<String> = (0..n).map(|i| format!("l{i}")).collect();
    let mut diag = BTreeMap::new();
    let mut hw = Vec::new();
    for l in &layers {
        let d4: f64 = rng.random_range(0.01..0.2);
        let d2 = d4 + rng.random_range(0.1..2.0);
        diag.insert(l.clone(), BTreeMap::from([("2".into(), d2), ("4".into(), d4), ("8".into(), 0.0)]));
        let base: f64 = rng.random_range(0.5..3.0);
        let l4 = base * rng.random_range(0.5..0.8);
        let l2 = l4 * rng.random_range(0.5..0.9);
        hw.push(HardwareLayer {
            id: l.clone(),
            elements: rng.random_range(1000..100_000),
            latency_ms: BTreeMap::from([("2".into(), l2), ("4".into(), l4), ("8".into(), base)]),
        });
    }
    let mut blocks = Vec::new();
    for chunk in layers.chunks(block.max(1)) {
        let mut entries = Vec::new();
        for mask in 1usize..1 << chunk.len() {
            let subset: Vec<String> = (0..chunk.len()).filter(|j| mask >> j & 1 == 1).map(|j| chunk[j].clone()).collect();
            let sum: f64 = subset.iter().map(|s| diag[s]["2"]).sum();
            let value = if subset.len() == 1 { sum } else { sum * rng.random_range(0.8..1.5) };
            entries.push(SubsetEntry { subset, value });
        }
        blocks.push(BlockEntry { layers: chunk.to_vec(), offdiag2: Some(entries) });
    }
    (
        SensitivityTable { layers, reference_bits: 8, diag, blocks },
        HardwareTable { constraint: Constraint::Latency, act_bits: 8, layers: hw },
    )
}
