use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use blockquant::container::load_model;
use blockquant::data::{load_calibration, read_dataset, sample_indices, subsample, CalibrationSet};
use blockquant::forward::{evaluate, forward_slots, Slot};
use blockquant::mixedprec::{self, compose_config, measure_sensitivities, BitConfig};
use blockquant::model::{fold_bn, Granularity, NetworkModel};
use blockquant::recon::{calibrate_model, fim_weighted_loss, fp_reference, quantize_nearest, CalibrationOutcome, ReconConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture_root() -> &'static Path {
    static ROOT: OnceLock<(PathBuf, Option<tempfile::TempDir>)> = OnceLock::new();
    let (p, _) = ROOT.get_or_init(|| {
        let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
        if shipped.join("tiny-resnet/model/manifest.json").exists() {
            return (shipped, None);
        }
        let tmp = tempfile::tempdir().unwrap();
        blockquant::fixtures::write_all(tmp.path(), 0).unwrap();
        (tmp.path().to_path_buf(), Some(tmp))
    });
    p
}

fn folded(name: &str) -> NetworkModel {
    fold_bn(&load_model(&fixture_root().join(name).join("model")).unwrap()).unwrap()
}

fn calib(name: &str, n: usize, seed: u64) -> CalibrationSet {
    load_calibration(&fixture_root().join(name).join("calib.bqtd"), n, seed).unwrap()
}

/// Weight-only block calibrations of tiny-resnet at 2, 4 and 8 bits.
fn resnet_unified() -> &'static (NetworkModel, CalibrationSet, BTreeMap<u32, CalibrationOutcome>) {
    static CELL: OnceLock<(NetworkModel, CalibrationSet, BTreeMap<u32, CalibrationOutcome>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let fp = folded("tiny-resnet");
        let c = calib("tiny-resnet", 256, 0);
        let mut out = BTreeMap::new();
        for b in [2u32, 4, 8] {
            let cfg = ReconConfig { weight_bits: b, ..ReconConfig::desk() };
            out.insert(b, calibrate_model(&fp, &c, &cfg).unwrap());
        }
        (fp, c, out)
    })
}

fn mlp_unified(fp: &NetworkModel, c: &CalibrationSet) -> BTreeMap<u32, NetworkModel> {
    [2u32, 4, 8]
        .into_iter()
        .map(|b| {
            let cfg = ReconConfig { weight_bits: b, iterations: 500, ..ReconConfig::desk() };
            (b, calibrate_model(fp, c, &cfg).unwrap().model)
        })
        .collect()
}

/// Lazily materialized Fisher-Yates over a virtual identity array.
fn reference_sample(available: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut moved: HashMap<usize, usize> = HashMap::new();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let j = rng.random_range(i..available);
        let vi = *moved.get(&i).unwrap_or(&i);
        let vj = *moved.get(&j).unwrap_or(&j);
        moved.insert(j, vi);
        out.push(vj);
    }
    out
}

#[test]
fn sampler_matches_reference_and_repeats() {
    for (available, n, seed) in [(10, 10, 0), (1000, 256, 7), (4096, 1024, 3), (50, 1, 11)] {
        assert_eq!(sample_indices(available, n, seed).unwrap(), reference_sample(available, n, seed));
    }
    let path = fixture_root().join("tiny-resnet/calib.bqtd");
    let a = load_calibration(&path, 256, 5).unwrap();
    let b = load_calibration(&path, 256, 5).unwrap();
    assert_eq!(a.indices, b.indices);
    assert_eq!(a.data.inputs.data(), b.data.inputs.data());
    assert_ne!(a.indices, load_calibration(&path, 256, 6).unwrap().indices);
}

#[test]
fn singleton_blocks_score_their_diagonal() {
    let mut fp = folded("tiny-mlp");
    fp.residual_links.clear();
    fp.blocks = vec![vec!["fc2".into()], vec!["fc3".into()]];
    fp.stages = vec![vec![0, 1]];
    fp.validate().unwrap();
    let c = calib("tiny-mlp", 256, 0);
    let models = mlp_unified(&fp, &c);
    let layers = mixedprec::searchable_layers(&fp);
    let table = measure_sensitivities(&fp, &models, &c, &layers).unwrap();
    assert_eq!(table.blocks.len(), 2);
    for blk in &table.blocks {
        let entries = blk.offdiag2.as_ref().unwrap();
        assert_eq!(entries.len(), 1);
        let d = table.diag_value(&blk.layers[0], 2).unwrap();
        assert!((entries[0].value - d).abs() < 1e-9, "{} vs {d}", entries[0].value);
    }
}

#[test]
fn joint_block_term_is_not_additive() {
    let (fp, c, unified) = resnet_unified();
    let models: BTreeMap<u32, NetworkModel> = unified.iter().map(|(b, o)| (*b, o.model.clone())).collect();
    let layers = mixedprec::searchable_layers(fp);
    let table = measure_sensitivities(fp, &models, c, &layers).unwrap();
    let blk = table.blocks.iter().find(|b| b.layers.len() == 2).unwrap();
    let joint = blk.offdiag2.as_ref().unwrap().iter().find(|e| e.subset.len() == 2).unwrap().value;
    let sum: f64 = blk.layers.iter().map(|l| table.diag_value(l, 2).unwrap()).sum();
    assert!((joint - sum).abs() > 1e-6 * sum.abs().max(1e-12), "joint {joint} equals diagonal sum {sum}");
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        for k in i..=j {
            r[idx[k]] = (i + j) as f64 / 2.0;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn block_fitness_ranks_like_task_loss() {
    let (fp, c, unified) = resnet_unified();
    let models: BTreeMap<u32, NetworkModel> = unified.iter().map(|(b, o)| (*b, o.model.clone())).collect();
    let layers = mixedprec::searchable_layers(fp);
    let table = measure_sensitivities(fp, &models, c, &layers).unwrap();
    let block = ["b3c1", "b3down", "b3c2"];
    let test = read_dataset(&fixture_root().join("tiny-resnet/test.bqtd")).unwrap();
    let (mut predicted, mut measured) = (Vec::new(), Vec::new());
    for code in 0..27 {
        let mut bits = vec![8u32; layers.len()];
        let mut rest = code;
        for id in block {
            bits[layers.iter().position(|l| l == id).unwrap()] = [2, 4, 8][rest % 3];
            rest /= 3;
        }
        let cfg = BitConfig(bits);
        predicted.push(mixedprec::fitness(&cfg, &table).unwrap());
        let m = compose_config(&models, &layers, &cfg).unwrap();
        measured.push(evaluate(&m, &test.inputs, &test.labels, true).unwrap().loss);
    }
    let rho = spearman(&predicted, &measured);
    assert!(rho > 0.7, "rank correlation {rho:.3}");
}

#[test]
fn reconstruction_beats_nearest_on_held_out_batches() {
    let (fp, c, unified) = resnet_unified();
    let rtn = quantize_nearest(fp, c, &ReconConfig { weight_bits: 2, ..ReconConfig::desk() }).unwrap();
    let held = read_dataset(&fixture_root().join("tiny-resnet/test.bqtd")).unwrap();
    let held = subsample(&held, Path::new("test.bqtd"), 256, 1).unwrap();
    let batches = held.batches(64).unwrap();
    let outputs: Vec<usize> = fp.blocks.iter().map(|b| fp.index_of(b.last().unwrap()).unwrap()).collect();
    let refs = fp_reference(fp, &batches, &outputs).unwrap();
    let loss = |m: &NetworkModel, k: usize| -> f64 {
        let mut total = 0.0;
        for (b, r) in batches.iter().zip(&refs) {
            let z = forward_slots(m, &b.inputs, false, &[Slot::Pre(k)]).unwrap().remove(0);
            let (zf, g) = &r[&k];
            let d = z.sub(zf).unwrap();
            total += fim_weighted_loss(&d, g).unwrap() * b.len() as f64;
        }
        total / held.len() as f64
    };
    for &k in &outputs {
        let (ours, nearest) = (loss(&unified[&2].model, k), loss(&rtn, k));
        assert!(ours < nearest, "{}: {ours:.4e} vs nearest {nearest:.4e}", fp.layers[k].id);
    }
}

#[test]
fn reconstruction_trend_improves_on_every_unit() {
    let (_, _, unified) = resnet_unified();
    let mlp = folded("tiny-mlp");
    let mlp_out = calibrate_model(&mlp, &calib("tiny-mlp", 256, 0), &ReconConfig { weight_bits: 2, ..ReconConfig::desk() }).unwrap();
    let reports = unified[&2].reports.iter().chain(unified[&4].reports.iter()).chain(&mlp_out.reports);
    for r in reports {
        assert!(r.final_loss <= r.initial_loss, "unit {} ended worse than it started", r.unit);
        assert!(r.trend_improved(100), "unit {} trace {:?}", r.unit, r.hard_trace);
    }
}

#[test]
fn whole_network_overfits_small_calibration_set() {
    let fp = folded("tiny-resnet");
    let test = read_dataset(&fixture_root().join("tiny-resnet/test.bqtd")).unwrap();
    let data = read_dataset(&fixture_root().join("tiny-resnet/calib.bqtd")).unwrap();
    let c = subsample(&data, Path::new("calib.bqtd"), 16, 0).unwrap();
    let acc = |g: Granularity| {
        let cfg = ReconConfig { weight_bits: 2, granularity: g, ..ReconConfig::desk() };
        let m = calibrate_model(&fp, &c, &cfg).unwrap().model;
        evaluate(&m, &test.inputs, &test.labels, true).unwrap()
    };
    let (net, block) = (acc(Granularity::Net), acc(Granularity::Block));
    assert!(net.loss > block.loss, "net {net:?} vs block {block:?}");
}
