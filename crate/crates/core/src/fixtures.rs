//! Synthetic toy networks and datasets.
//!
//! `tiny-mlp` is trained on twelve prototype inputs, each repeated with a
//! fixed label histogram. The network can match every histogram exactly, so
//! its minimum has zero output-gradient residual per prototype and the
//! Hessian equals the Gauss-Newton matrix there.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::json;

use crate::container::save_model;
use crate::data::{write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::forward::{self, Slot};
use crate::mixedprec;
use crate::model::{
    Activation, BatchNormSpec, InputSource, LayerSpec, LinkSource, NetworkModel, ResidualLink,
};
use crate::tensor::Tensor;
use crate::train::{self, TrainConfig};

pub const MLP_PROTOTYPES: usize = 12;
pub const MLP_COPIES: usize = 10;
pub const MLP_CLASSES: usize = 3;
pub const MLP_INPUT: usize = 4;
pub const MLP_HIDDEN: usize = 8;

fn snap(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Rounds every stored tensor to f32 so in-memory metrics match a reload.
pub fn snap_to_f32(model: &mut NetworkModel) {
    for l in &mut model.layers {
        l.weight = snap(&l.weight);
        l.bias = snap(&l.bias);
        if let Some(bn) = &mut l.bn {
            for t in [&mut bn.gamma, &mut bn.beta, &mut bn.mean, &mut bn.var] {
                *t = snap(t);
            }
        }
    }
}

fn he(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

fn small_bias(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(&[n], -0.1, 0.1, rng)
}

/// Untrained tiny MLP: stem, one residual block of two layers, head.
pub fn tiny_mlp_architecture(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (i, h, c) = (MLP_INPUT, MLP_HIDDEN, MLP_CLASSES);
    let layers = vec![
        LayerSpec::linear("fc1", he(&[h, i], i, &mut rng), small_bias(h, &mut rng), Activation::Relu),
        LayerSpec::linear("fc2", he(&[h, h], h, &mut rng), small_bias(h, &mut rng), Activation::Relu),
        LayerSpec::linear("fc3", he(&[h, h], h, &mut rng), small_bias(h, &mut rng), Activation::Relu),
        LayerSpec::linear("fc4", he(&[c, h], h, &mut rng), small_bias(c, &mut rng), Activation::None),
    ];
    NetworkModel {
        name: "tiny-mlp".into(),
        input_shape: vec![i],
        num_classes: c,
        layers,
        residual_links: vec![ResidualLink { from: "fc2".into(), to: "fc3".into(), source: LinkSource::Input }],
        blocks: vec![vec!["fc2".into(), "fc3".into()]],
        stages: vec![vec![0]],
        metadata: Default::default(),
    }
}

pub struct MlpFixture {
    pub model: NetworkModel,
    pub unconverged: NetworkModel,
    /// Prototype-replicated training set; also the oracle batch.
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

fn label_histograms(rng: &mut ChaCha8Rng) -> Vec<[usize; MLP_CLASSES]> {
    (0..MLP_PROTOTYPES)
        .map(|_| loop {
            let mut counts = [1usize; MLP_CLASSES];
            for _ in 0..MLP_COPIES - MLP_CLASSES {
                counts[rng.random_range(0..MLP_CLASSES)] += 1;
            }
            let mut sorted = counts;
            sorted.sort_unstable();
            if sorted[MLP_CLASSES - 1] - sorted[MLP_CLASSES - 2] >= 2 {
                break counts;
            }
        })
        .collect()
}

fn noisy_samples(
    protos: &Tensor,
    hist: &[[usize; MLP_CLASSES]],
    n: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = Vec::with_capacity(n * MLP_INPUT);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let j = rng.random_range(0..MLP_PROTOTYPES);
        for f in 0..MLP_INPUT {
            data.push(protos.data()[j * MLP_INPUT + f] + normal.sample(rng));
        }
        let mut r = rng.random_range(0..MLP_COPIES);
        let mut label = 0;
        while r >= hist[j][label] {
            r -= hist[j][label];
            label += 1;
        }
        labels.push(label);
    }
    Dataset::new(snap(&Tensor::new(vec![n, MLP_INPUT], data)?), labels)
}

/// Smallest |pre-activation| of the hidden layers over `inputs`.
pub fn min_hidden_margin(model: &NetworkModel, inputs: &Tensor) -> Result<f64> {
    let slots: Vec<Slot> = (0..model.head_index()).map(Slot::Pre).collect();
    let values = forward::forward_slots(model, inputs, false, &slots)?;
    Ok(values.iter().flat_map(|t| t.data().iter()).fold(f64::INFINITY, |m, v| m.min(v.abs())))
}

/// Trains the MLP fixture to a stationary point. Fails when the seed leaves a
/// hidden pre-activation within 1e-3 of a kink.
pub fn tiny_mlp(seed: u64) -> Result<MlpFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d6c70);
    let protos = snap(&Tensor::randn(&[MLP_PROTOTYPES, MLP_INPUT], 1.0, &mut rng));
    let hist = label_histograms(&mut rng);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (j, h) in hist.iter().enumerate() {
        for (c, &count) in h.iter().enumerate() {
            for _ in 0..count {
                rows.push(j);
                labels.push(c);
            }
        }
    }
    let train_set = Dataset::new(protos.select_rows(&rows)?, labels)?;

    let mut model = tiny_mlp_architecture(seed);
    let short = TrainConfig { epochs: 5, batch: 120, lr: 1e-2, seed, ..Default::default() };
    train::train(&mut model, &train_set, &short)?;
    let mut unconverged = model.clone();
    snap_to_f32(&mut unconverged);
    let long = TrainConfig { epochs: 3000, batch: 120, lr: 1e-2, seed, ..Default::default() };
    train::train(&mut model, &train_set, &long)?;
    let grad = train::polish_to_stationary(&mut model, &train_set, 1e-11, 200)?;
    if grad >= 1e-8 {
        return Err(Error::Numeric(format!("mlp fixture stalled at gradient {grad:.3e}")));
    }
    snap_to_f32(&mut model);
    let margin = min_hidden_margin(&model, &protos)?;
    if margin <= 1e-3 {
        return Err(Error::Numeric(format!("hidden pre-activation margin {margin:.3e} too small")));
    }

    let calib = noisy_samples(&protos, &hist, 1024, 0.02, &mut rng)?;
    let test = noisy_samples(&protos, &hist, 1024, 0.02, &mut rng)?;
    let fp = forward::evaluate(&model, &test.inputs, &test.labels, false)?;
    model.metadata.insert("fp_test_accuracy".into(), json!(fp.accuracy));
    model.metadata.insert("fp_test_loss".into(), json!(fp.loss));
    model.metadata.insert("seed".into(), json!(seed));
    model.metadata.insert("hidden_margin".into(), json!(margin));
    Ok(MlpFixture { model, unconverged, train: train_set, calib, test })
}

pub const RESNET_CLASSES: usize = 10;
pub const RESNET_INPUT: [usize; 3] = [3, 7, 7];

fn conv_bn(id: &str, cin: usize, cout: usize, k: usize, stride: usize, act: Activation, rng: &mut ChaCha8Rng) -> LayerSpec {
    let pad = k / 2;
    let mut l = LayerSpec::conv(id, he(&[cout, cin, k, k], cin * k * k, rng), Tensor::zeros(&[cout]), stride, pad, act);
    l.bn = Some(BatchNormSpec::identity(cout, 1e-5));
    l
}

/// Untrained tiny ResNet: stem, two stages of two residual blocks, pooled head.
pub fn tiny_resnet_architecture(seed: u64) -> NetworkModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Activation::Relu;
    let mut layers = vec![
        conv_bn("stem", 3, 8, 3, 1, r, &mut rng),
        conv_bn("b1c1", 8, 8, 3, 1, r, &mut rng),
        conv_bn("b1c2", 8, 8, 3, 1, r, &mut rng),
        conv_bn("b2c1", 8, 8, 3, 1, r, &mut rng),
        conv_bn("b2c2", 8, 8, 3, 1, r, &mut rng),
        conv_bn("b3c1", 8, 16, 3, 2, r, &mut rng),
        conv_bn("b3down", 8, 16, 1, 2, Activation::None, &mut rng),
        conv_bn("b3c2", 16, 16, 3, 1, r, &mut rng),
        conv_bn("b4c1", 16, 16, 3, 1, r, &mut rng),
        conv_bn("b4c2", 16, 16, 3, 1, r, &mut rng),
    ];
    layers[6].input = InputSource::SameAs("b3c1".into());
    layers[7].input = InputSource::OutputOf("b3c1".into());
    let mut head = LayerSpec::linear("fc", he(&[10, 16], 16, &mut rng), Tensor::zeros(&[10]), Activation::None);
    head.global_pool = true;
    layers.push(head);
    let link = |from: &str, to: &str, source| ResidualLink { from: from.into(), to: to.into(), source };
    NetworkModel {
        name: "tiny-resnet".into(),
        input_shape: RESNET_INPUT.to_vec(),
        num_classes: RESNET_CLASSES,
        layers,
        residual_links: vec![
            link("b1c1", "b1c2", LinkSource::Input),
            link("b2c1", "b2c2", LinkSource::Input),
            link("b3down", "b3c2", LinkSource::Output),
            link("b4c1", "b4c2", LinkSource::Input),
        ],
        blocks: vec![
            vec!["b1c1".into(), "b1c2".into()],
            vec!["b2c1".into(), "b2c2".into()],
            vec!["b3c1".into(), "b3down".into(), "b3c2".into()],
            vec!["b4c1".into(), "b4c2".into()],
        ],
        stages: vec![vec![0, 1], vec![2, 3]],
        metadata: Default::default(),
    }
}

/// Class templates: smoothed Gaussian patterns.
fn templates(rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let [c, h, w] = RESNET_INPUT;
    (0..RESNET_CLASSES)
        .map(|_| {
            let raw = Tensor::randn(&[c, h, w], 1.0, rng);
            let mut out = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let mut s = 0.0;
                        for dy in [h - 1, 0, 1] {
                            for dx in [w - 1, 0, 1] {
                                s += raw.data()[(ch * h + (y + dy) % h) * w + (x + dx) % w];
                            }
                        }
                        out[(ch * h + y) * w + x] = s / 3.0;
                    }
                }
            }
            out
        })
        .collect()
}

/// Shifted, rescaled, noisy template draws.
fn template_samples(temps: &[Vec<f64>], n: usize, noise: f64, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    let [c, h, w] = RESNET_INPUT;
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Parameter(e.to_string()))?;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.random_range(0..RESNET_CLASSES);
        let (sy, sx) = (rng.random_range(0..3) + h - 1, rng.random_range(0..3) + w - 1);
        let amp = rng.random_range(0.7..1.3);
        let t = &temps[label];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(amp * t[(ch * h + (y + sy) % h) * w + (x + sx) % w] + normal.sample(rng));
                }
            }
        }
        labels.push(label);
    }
    let mut shape = vec![n];
    shape.extend_from_slice(&RESNET_INPUT);
    Dataset::new(snap(&Tensor::new(shape, data)?), labels)
}

pub struct ResnetFixture {
    pub model: NetworkModel,
    pub train: Dataset,
    pub calib: Dataset,
    pub test: Dataset,
}

pub const RESNET_NOISE: f64 = 1.3;

pub fn tiny_resnet(seed: u64) -> Result<ResnetFixture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7265736e);
    let temps = templates(&mut rng);
    let train_set = template_samples(&temps, 2048, RESNET_NOISE, &mut rng)?;
    let calib = template_samples(&temps, 1024, RESNET_NOISE, &mut rng)?;
    let test = template_samples(&temps, 1024, RESNET_NOISE, &mut rng)?;
    let mut model = tiny_resnet_architecture(seed);
    let cfg = TrainConfig { epochs: 12, batch: 64, lr: 3e-3, seed, ..Default::default() };
    let history = train::train(&mut model, &train_set, &cfg)?;
    snap_to_f32(&mut model);
    let fp = forward::evaluate(&model, &test.inputs, &test.labels, false)?;
    let tr = forward::evaluate(&model, &train_set.inputs, &train_set.labels, false)?;
    model.metadata.insert("fp_test_accuracy".into(), json!(fp.accuracy));
    model.metadata.insert("fp_test_loss".into(), json!(fp.loss));
    model.metadata.insert("fp_train_accuracy".into(), json!(tr.accuracy));
    model.metadata.insert("train_loss_history".into(), json!(history));
    model.metadata.insert("seed".into(), json!(seed));
    Ok(ResnetFixture { model, train: train_set, calib, test })
}

/// Writes every fixture under `dir`.
pub fn write_all(dir: &Path, seed: u64) -> Result<()> {
    let mut mlp = None;
    for attempt in 0..20 {
        match tiny_mlp(seed + attempt) {
            Ok(f) => {
                mlp = Some(f);
                break;
            }
            Err(e) => log::warn!("tiny-mlp seed {}: {e}", seed + attempt),
        }
    }
    let mlp = mlp.ok_or_else(|| Error::Numeric("no seed produced a usable mlp fixture".into()))?;
    let base = dir.join("tiny-mlp");
    save_model(&mlp.model, &base.join("model"))?;
    save_model(&mlp.unconverged, &base.join("unconverged"))?;
    write_dataset(&base.join("train.bqtd"), &mlp.train)?;
    write_dataset(&base.join("calib.bqtd"), &mlp.calib)?;
    write_dataset(&base.join("test.bqtd"), &mlp.test)?;

    let res = tiny_resnet(seed)?;
    let base = dir.join("tiny-resnet");
    save_model(&res.model, &base.join("model"))?;
    write_dataset(&base.join("train.bqtd"), &res.train)?;
    write_dataset(&base.join("calib.bqtd"), &res.calib)?;
    write_dataset(&base.join("test.bqtd"), &res.test)?;
    let layers = mixedprec::searchable_layers(&res.model);
    mixedprec::write_json(&base.join("latency.json"), &mixedprec::synthetic_latency_table(&res.model, &layers)?)?;
    mixedprec::write_json(&dir.join("resnet18-size.json"), &mixedprec::resnet18_size_table())?;
    Ok(())
}
