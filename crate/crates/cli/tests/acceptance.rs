//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use blockquant::autograd::{Graph, NodeId};
use blockquant::container::load_model;
use blockquant::data::{read_dataset, subsample, CalibrationSet, Dataset};
use blockquant::forward::evaluate;
use blockquant::gradcheck::{finite_diff_grad, relative_error};
use blockquant::hessian::{gn_matrix, model_hessian_fd, unit_direction, verify_output_identity, FlatParams, EPSILON_LADDER};
use blockquant::mixedprec::{
    self, exhaustive_search, ga_search, ga_search_audited, hardware_measure, random_tables, BitConfig, GaConfig,
    HardwareTable,
};
use blockquant::model::{fold_bn, partition, Activation, Granularity, LayerSpec, NetworkModel};
use blockquant::quant::{self, act_step_grad, GridKind, QuantParams, RoundingConfig};
use blockquant::recon::{calibrate_model, collect_unit_io, reconstruct_unit, resolve_bits, FirstLastPolicy, ReconConfig};
use blockquant::{fixtures, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

struct Fixtures {
    root: PathBuf,
    _tmp: Option<tempfile::TempDir>,
}

impl Fixtures {
    fn locate() -> Self {
        let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
        if shipped.join("tiny-resnet/model/manifest.json").exists() {
            return Self { root: shipped, _tmp: None };
        }
        let tmp = tempfile::tempdir().expect("tempdir");
        fixtures::write_all(tmp.path(), 0).expect("fixture generation");
        Self { root: tmp.path().to_path_buf(), _tmp: Some(tmp) }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn ok_if(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit_s: f64, t: Instant, res: Outcome) -> Outcome {
    let el = t.elapsed().as_secs_f64();
    match res {
        Ok(d) if el <= limit_s => Ok(format!("{d}; {el:.1}s")),
        Ok(d) => Err(format!("{d}; took {el:.1}s, limit {limit_s}s")),
        Err(d) => Err(format!("{d}; {el:.1}s")),
    }
}

// ---------------------------------------------------------------- gradients

/// Projects a node onto a fixed random tensor so the check sees every output.
fn project(g: &mut Graph, node: NodeId, u: &Tensor) -> NodeId {
    let c = g.constant(u.clone());
    let m = g.mul(node, c).unwrap();
    g.sum(m).unwrap()
}

fn check_op(x0: &Tensor, u_seed: u64, build: &dyn Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
    let shape_probe = {
        let mut g = Graph::new();
        let id = g.param(x0.clone());
        let out = build(&mut g, id);
        g.value(out).shape().to_vec()
    };
    let mut urng = ChaCha8Rng::seed_from_u64(u_seed);
    let u = Tensor::randn(&shape_probe, 1.0, &mut urng);
    let eval = |x: &Tensor| {
        let mut g = Graph::new();
        let id = g.param(x.clone());
        let out = build(&mut g, id);
        let root = project(&mut g, out, &u);
        Ok(g.value(root).item())
    };
    let mut g = Graph::new();
    let id = g.param(x0.clone());
    let out = build(&mut g, id);
    let root = project(&mut g, out, &u);
    let analytic = g.backward(root).unwrap().get(id).unwrap().clone();
    let numeric = finite_diff_grad(eval, x0, 1e-6).unwrap();
    relative_error(&analytic, &numeric)
}

fn away_from_zero(t: Tensor) -> Tensor {
    t.map(|v| if v.abs() < 0.05 { v + 0.1f64.copysign(v) } else { v })
}

fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let a34 = r(&[3, 4]);
    let b42 = r(&[4, 2]);
    let c34 = r(&[3, 4]);
    let w54 = r(&[5, 4]);
    let bias4 = r(&[4]);
    let x4d = r(&[2, 3, 4, 4]);
    let bias3 = r(&[3]);
    let cx = r(&[2, 2, 5, 5]);
    let cw = r(&[3, 2, 3, 3]);
    let logits = r(&[4, 5]);
    let bnx = r(&[6, 3]);
    let bn4 = r(&[4, 3, 3, 3]);
    let gamma = r(&[3]);
    let beta = r(&[3]);
    let target = r(&[3, 4]);
    let weight = r(&[3, 4]).map(|v| v * v);
    let vsoft = r(&[3, 4]).map(|v| v.clamp(-1.8, 1.8));
    let wsoft = r(&[3, 4]).map(|v| v * 0.5);
    let relu_in = away_from_zero(r(&[3, 4]));
    let scale3: Vec<f64> = r(&[3]).data().to_vec();
    let shift3: Vec<f64> = r(&[3]).data().to_vec();
    let labels = [0usize, 3, 4, 1];
    let us = seed * 1000;
    let mut out = Vec::new();
    macro_rules! op {
        ($name:expr, $x:expr, $body:expr) => {
            out.push(($name, check_op(&$x, us + out.len() as u64, &$body)));
        };
    }
    op!("matmul/lhs", a34, |g: &mut Graph, x| { let b = g.constant(b42.clone()); g.matmul(x, b).unwrap() });
    op!("matmul/rhs", b42, |g: &mut Graph, x| { let a = g.constant(a34.clone()); g.matmul(a, x).unwrap() });
    op!("transpose", a34, |g: &mut Graph, x| g.transpose(x).unwrap());
    op!("linear/input", a34, |g: &mut Graph, x| { let w = g.constant(w54.clone()); g.linear(x, w).unwrap() });
    op!("linear/weight", w54, |g: &mut Graph, w| { let x = g.constant(a34.clone()); g.linear(x, w).unwrap() });
    op!("add", a34, |g: &mut Graph, x| { let c = g.constant(c34.clone()); g.add(x, c).unwrap() });
    op!("sub/lhs", a34, |g: &mut Graph, x| { let c = g.constant(c34.clone()); g.sub(x, c).unwrap() });
    op!("sub/rhs", a34, |g: &mut Graph, x| { let c = g.constant(c34.clone()); g.sub(c, x).unwrap() });
    op!("mul", a34, |g: &mut Graph, x| { let c = g.constant(c34.clone()); g.mul(x, c).unwrap() });
    op!("mul/self", a34, |g: &mut Graph, x| g.mul(x, x).unwrap());
    op!("scale", a34, |g: &mut Graph, x| g.scale(x, -1.7).unwrap());
    op!("add_bias/input", a34, |g: &mut Graph, x| { let b = g.constant(bias4.clone()); g.add_bias(x, b).unwrap() });
    op!("add_bias/bias", bias4, |g: &mut Graph, b| { let x = g.constant(a34.clone()); g.add_bias(x, b).unwrap() });
    op!("add_bias/channels", bias3, |g: &mut Graph, b| { let x = g.constant(x4d.clone()); g.add_bias(x, b).unwrap() });
    op!("channel_affine", x4d, |g: &mut Graph, x| g.channel_affine(x, &scale3, &shift3).unwrap());
    op!("relu", relu_in, |g: &mut Graph, x| g.relu(x).unwrap());
    op!("sum", a34, |g: &mut Graph, x| g.sum(x).unwrap());
    op!("reshape", a34, |g: &mut Graph, x| g.reshape(x, &[2, 6]).unwrap());
    op!("global_avg_pool", x4d, |g: &mut Graph, x| g.global_avg_pool(x).unwrap());
    op!("conv2d/input", cx, |g: &mut Graph, x| { let w = g.constant(cw.clone()); g.conv2d(x, w, 1, 1).unwrap() });
    op!("conv2d/weight", cw, |g: &mut Graph, w| { let x = g.constant(cx.clone()); g.conv2d(x, w, 1, 1).unwrap() });
    op!("conv2d/strided", cx, |g: &mut Graph, x| { let w = g.constant(cw.clone()); g.conv2d(x, w, 2, 1).unwrap() });
    op!("conv2d/strided-weight", cw, |g: &mut Graph, w| { let x = g.constant(cx.clone()); g.conv2d(x, w, 2, 0).unwrap() });
    op!("cross_entropy", logits, |g: &mut Graph, x| g.cross_entropy(x, &labels).unwrap());
    op!("batch_norm/input", bnx, |g: &mut Graph, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.batch_norm(x, ga, be, 1e-5).unwrap().0
    });
    op!("batch_norm/spatial", bn4, |g: &mut Graph, x| {
        let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
        g.batch_norm(x, ga, be, 1e-5).unwrap().0
    });
    op!("batch_norm/gamma", gamma, |g: &mut Graph, ga| {
        let (x, be) = (g.constant(bn4.clone()), g.constant(beta.clone()));
        g.batch_norm(x, ga, be, 1e-5).unwrap().0
    });
    op!("batch_norm/beta", beta, |g: &mut Graph, be| {
        let (x, ga) = (g.constant(bnx.clone()), g.constant(gamma.clone()));
        g.batch_norm(x, ga, be, 1e-5).unwrap().0
    });
    let q = QuantParams::weight(4, 0.1).unwrap();
    let cfg = RoundingConfig::default();
    op!("soft_round", vsoft, |g: &mut Graph, v| g.soft_round(v, &wsoft, &q, cfg).unwrap());
    op!("weighted_sq_err", a34, |g: &mut Graph, x| g.weighted_sq_err(x, &target, &weight).unwrap());
    for beta in [2.0, 20.0] {
        op!("rounding_reg", vsoft, move |g: &mut Graph, v| g.rounding_reg(v, beta, cfg).unwrap());
    }
    let (x, s, qmax, u) = act_case(&mut rng, 24, 15.0);
    out.push(("act_quant/input", act_quant_check(&x, s, qmax, &u, true)));
    out.push(("act_quant/step", act_quant_check(&x, s, qmax, &u, false)));
    out
}

/// Values whose scaled residual lies in (0.05, 0.45) and whose clip branch
/// is unambiguous, so the straight-through surrogate is locally exact.
fn act_case(rng: &mut ChaCha8Rng, n: usize, qmax: f64) -> (Tensor, f64, f64, Tensor) {
    let s = rng.random_range(0.05..0.5);
    let mut xs = Vec::with_capacity(n);
    while xs.len() < n {
        let t: f64 = rng.random_range(-3.0..qmax + 3.0);
        let r = (t - t.round()).abs();
        let clear = t < -0.05 || (t > 0.05 && t < qmax - 0.55) || t > qmax + 0.05;
        if clear && r > 0.05 && r < 0.45 {
            xs.push(t * s);
        }
    }
    let u = Tensor::randn(&[n], 1.0, rng);
    (Tensor::new(vec![n], xs).unwrap(), s, qmax, u)
}

/// Frozen-residual surrogate: inside the grid the rounding residual at the
/// base point is held fixed, which is what the straight-through rule
/// differentiates.
fn surrogate(x: f64, s: f64, qmax: f64, x0: f64, s0: f64) -> f64 {
    let t0 = x0 / s0;
    if t0 <= 0.0 {
        0.0
    } else if t0 >= qmax {
        s * qmax
    } else {
        x + s * (t0.round() - t0)
    }
}

fn act_quant_check(x: &Tensor, s: f64, qmax: f64, u: &Tensor, wrt_x: bool) -> f64 {
    let mut g = Graph::new();
    let xn = g.param(x.clone());
    let sn = g.param(Tensor::scalar(s));
    let out = g.act_quant(xn, sn, qmax).unwrap();
    let root = project(&mut g, out, u);
    let grads = g.backward(root).unwrap();
    let f = |xv: &Tensor, sv: f64| -> f64 {
        xv.data().iter().zip(x.data()).zip(u.data()).map(|((&a, &a0), &w)| w * surrogate(a, sv, qmax, a0, s)).sum()
    };
    if wrt_x {
        let numeric = finite_diff_grad(|xv: &Tensor| Ok(f(xv, s)), x, 1e-6).unwrap();
        relative_error(grads.get(xn).unwrap(), &numeric)
    } else {
        let numeric = finite_diff_grad(|sv: &Tensor| Ok(f(x, sv.item())), &Tensor::scalar(s), 1e-7).unwrap();
        relative_error(grads.get(sn).unwrap(), &numeric)
    }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut worst = (0.0, "");
    let mut ops = 0;
    for seed in 0..20 {
        let suite = gradient_suite(seed);
        ops = suite.len();
        for (name, e) in suite {
            if !(e <= worst.0) {
                worst = (e, name);
            }
        }
    }
    within(30.0, t, ok_if(worst.0 < 1e-5, format!("{ops} op checks x 20 seeds, worst rel err {:.2e} ({})", worst.0, worst.1)))
}

// ---------------------------------------------------------------- second order

fn criterion_2(fx: &Fixtures) -> Outcome {
    let t = Instant::now();
    let model = load_model(&fx.path("tiny-mlp/model")).map_err(|e| e.to_string())?;
    let data = read_dataset(&fx.path("tiny-mlp/train.bqtd")).map_err(|e| e.to_string())?;
    let dim = FlatParams::weights(&model).unwrap().dim();
    let check = verify_output_identity(&model, &data, &EPSILON_LADDER, &unit_direction(dim, 0)).map_err(|e| e.to_string())?;
    let gaps: Vec<String> = check.rungs.iter().map(|r| format!("{:.1e}", r.output_gap)).collect();
    let last = check.rungs.last().unwrap().output_gap;
    within(
        120.0,
        t,
        ok_if(
            check.grad_inf_norm < 1e-4 && check.monotone && last < 1e-2,
            format!("grad {:.1e}, gaps {}", check.grad_inf_norm, gaps.join(" > ")),
        ),
    )
}

fn criterion_3(fx: &Fixtures) -> Outcome {
    let t = Instant::now();
    let model = load_model(&fx.path("tiny-mlp/model")).map_err(|e| e.to_string())?;
    let data = read_dataset(&fx.path("tiny-mlp/train.bqtd")).map_err(|e| e.to_string())?;
    let flat = FlatParams::weights(&model).unwrap();
    let d = flat.dim();
    let (h, _) = model_hessian_fd(&model, &flat, &data, 1e-5).map_err(|e| e.to_string())?;
    let gmat = gn_matrix(&model, &flat, &data).map_err(|e| e.to_string())?;
    let hf = h.norm();
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let v = unit_direction(d, 100 + seed);
        let v = v.data();
        let quad = |m: &dyn Fn(usize, usize) -> f64| -> f64 {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += v[i] * m(i, j) * v[j];
                }
            }
            s
        };
        let gap = (quad(&|i, j| h[(i, j)]) - quad(&|i, j| gmat[(i, j)])).abs();
        worst = worst.max(gap / hf);
    }
    within(120.0, t, ok_if(d <= 200 && worst <= 1e-3, format!("d = {d}, worst |vHv - vGv| / ||H||_F = {worst:.2e}")))
}

// ---------------------------------------------------------------- quantizers

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 100_000;
    for bits in [2u32, 4, 8] {
        let s = rng.random_range(0.01..0.3);
        let q = QuantParams::weight(bits, s).unwrap();
        let (lo, hi) = GridKind::Signed.bounds(bits);
        let w = Tensor::from_fn(&[n], |_| rng.random_range(-1.2 * hi * s..1.2 * hi * s));
        let wq = quant::quantize_rtn(&w, &q).unwrap();
        let again = quant::quantize_rtn(&wq, &q).unwrap();
        if again.data().iter().zip(wq.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Err(format!("{bits}-bit: requantization changed a value"));
        }
        let grid: Vec<f64> = (lo as i64..=hi as i64).map(|k| k as f64 * s).collect();
        for (&x, &y) in w.data().iter().zip(wq.data()) {
            let k = y / s;
            if (k - k.round()).abs() > 1e-9 || k.round() < lo || k.round() > hi {
                return Err(format!("{bits}-bit: {y} is off the grid"));
            }
            if !grid.contains(&y) {
                return Err(format!("{bits}-bit: {y} is not an exact grid point"));
            }
            let best = grid.iter().map(|p| (p - x).abs()).fold(f64::INFINITY, f64::min);
            if (y - x).abs() > best + 1e-12 {
                return Err(format!("{bits}-bit: {x} rounded to {y}, nearest point is {best} away"));
            }
        }
    }
    within(10.0, t, Ok(format!("{n} elements at 2/4/8 bits: on grid, idempotent, nearest")))
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let bits = [2u32, 4, 8][rng.random_range(0..3)];
        let (_, qmax) = GridKind::Unsigned.bounds(bits);
        let (x, s, _, u) = act_case(&mut rng, 16, qmax);
        let q = QuantParams::activation(bits, s).unwrap();
        let analytic = act_step_grad(&x, &q, &u).unwrap();
        let f = |sv: f64| -> f64 {
            x.data().iter().zip(u.data()).map(|(&a, &w)| w * surrogate(a, sv, qmax, a, s)).sum()
        };
        // The surrogate is linear in s, so a wide step adds no truncation error.
        let h = 1e-3 * s;
        let numeric = (f(s + h) - f(s - h)) / (2.0 * h);
        worst = worst.max((analytic - numeric).abs() / numeric.abs().max(1e-8));
    }
    // Nonpositive inputs contribute exactly nothing.
    let neg = Tensor::from_fn(&[64], |i| -(i as f64) * 0.03);
    let zero = act_step_grad(&neg, &QuantParams::activation(4, 0.1).unwrap(), &Tensor::ones(&[64])).unwrap();
    ok_if(worst < 1e-4 && zero == 0.0, format!("100 cases, worst rel err {worst:.2e}; x <= 0 gives {zero}"))
}

// ---------------------------------------------------------------- rounding

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let shapes = [(1usize, 8usize), (2, 4), (1, 10), (2, 5), (1, 6), (1, 9), (2, 3), (1, 7), (2, 5), (1, 10)];
    let mut hits = 0;
    let mut notes = Vec::new();
    for (trial, &(o, i)) in shapes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + trial as u64);
        let w = Tensor::randn(&[o, i], (2.0 / i as f64).sqrt(), &mut rng);
        let b = Tensor::randn(&[o], 0.1, &mut rng);
        let head = Tensor::randn(&[2, o], 1.0, &mut rng);
        let model = NetworkModel {
            name: "single".into(),
            input_shape: vec![i],
            num_classes: 2,
            layers: vec![
                LayerSpec::linear("fc", w.clone(), b.clone(), Activation::None),
                LayerSpec::linear("out", head, Tensor::zeros(&[2]), Activation::None),
            ],
            residual_links: vec![],
            blocks: vec![],
            stages: vec![],
            metadata: Default::default(),
        };
        model.validate().map_err(|e| e.to_string())?;
        let n = 64;
        let x = Tensor::randn(&[n, i], 1.0, &mut rng);
        let labels = (0..n).map(|k| k % 2).collect();
        let calib = CalibrationSet {
            data: Dataset::new(x.clone(), labels).unwrap(),
            source: PathBuf::new(),
            seed: 0,
            indices: (0..n).collect(),
        };
        let cfg = ReconConfig {
            weight_bits: 2,
            first_last: FirstLastPolicy::Follow,
            granularity: Granularity::Layer,
            batch: n,
            seed: trial as u64,
            ..ReconConfig::desk()
        };
        let unit = partition(&model, Granularity::Layer).unwrap().remove(0);
        let cache = collect_unit_io(&model, &model, &calib, &unit, &cfg).map_err(|e| e.to_string())?;
        let res = reconstruct_unit(&model, &cache, &resolve_bits(&model, &cfg).unwrap(), &cfg).map_err(|e| e.to_string())?;
        let s = res.layers[&0].weight_step[0];
        let batch = &cache.batches[0];
        let loss = |wq: &[f64]| -> f64 {
            let mut total = 0.0;
            for r in 0..n {
                for c in 0..o {
                    let z: f64 = (0..i).map(|k| x.data()[r * i + k] * wq[c * i + k]).sum::<f64>() + b.data()[c];
                    let d = z - batch.target.data()[r * o + c];
                    total += batch.weight.data()[r * o + c] * d * d;
                }
            }
            total / n as f64
        };
        let numel = o * i;
        let mut best = f64::INFINITY;
        for mask in 0u32..1 << numel {
            let wq: Vec<f64> = (0..numel)
                .map(|k| s * ((w.data()[k] / s).floor() + (mask >> k & 1) as f64).clamp(-2.0, 1.0))
                .collect();
            best = best.min(loss(&wq));
        }
        let got = loss(res.weights[&0].data());
        let ok = got - best <= 1e-6 * best.max(1.0);
        hits += ok as usize;
        if !ok {
            notes.push(format!("trial {trial}: {got:.6e} vs best {best:.6e}"));
        }
    }
    let detail = format!("{hits}/10 trials at the brute-force optimum{}", if notes.is_empty() { String::new() } else { format!(" ({})", notes.join("; ")) });
    within(120.0, t, ok_if(hits >= 9, detail))
}

// ---------------------------------------------------------------- tiny-resnet studies

const ORDERING_ITERS: usize = 4000;

struct ResnetCtx {
    fp: NetworkModel,
    calib: Dataset,
    test: Dataset,
    calib_path: PathBuf,
}

impl ResnetCtx {
    fn load(fx: &Fixtures) -> Result<Self, String> {
        let model = load_model(&fx.path("tiny-resnet/model")).map_err(|e| e.to_string())?;
        Ok(Self {
            fp: fold_bn(&model).map_err(|e| e.to_string())?,
            calib: read_dataset(&fx.path("tiny-resnet/calib.bqtd")).map_err(|e| e.to_string())?,
            test: read_dataset(&fx.path("tiny-resnet/test.bqtd")).map_err(|e| e.to_string())?,
            calib_path: fx.path("tiny-resnet/calib.bqtd"),
        })
    }

    fn calib(&self, seed: u64) -> CalibrationSet {
        subsample(&self.calib, &self.calib_path, 256, seed).unwrap()
    }

    fn accuracy(&self, m: &NetworkModel) -> f64 {
        evaluate(m, &self.test.inputs, &self.test.labels, true).unwrap().accuracy
    }
}

fn two_bit(g: Granularity, seed: u64) -> ReconConfig {
    ReconConfig { weight_bits: 2, granularity: g, iterations: ORDERING_ITERS, seed, ..ReconConfig::desk() }
}

fn criterion_7(ctx: &ResnetCtx, block_models: &mut Vec<NetworkModel>) -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5 {
        let calib = ctx.calib(seed);
        let mut acc = BTreeMap::new();
        for g in [Granularity::Layer, Granularity::Block, Granularity::Net] {
            let out = calibrate_model(&ctx.fp, &calib, &two_bit(g, seed)).map_err(|e| e.to_string())?;
            acc.insert(g.to_string(), ctx.accuracy(&out.model));
            if g == Granularity::Block {
                block_models.push(out.model);
            }
        }
        let (l, b, n) = (acc["layer"], acc["block"], acc["net"]);
        wins += (b >= l && b > n) as usize;
        rows.push(format!("s{seed} L {l:.3} B {b:.3} N {n:.3}"));
    }
    within(900.0, t, ok_if(wins >= 4, format!("{wins}/5 seeds ordered [{}]", rows.join(", "))))
}

fn criterion_8(fx: &Fixtures) -> Outcome {
    let t = Instant::now();
    let mut rows = Vec::new();
    let mut ok = true;
    for name in ["tiny-mlp", "tiny-resnet"] {
        let model = load_model(&fx.path(&format!("{name}/model"))).map_err(|e| e.to_string())?;
        let fp = fold_bn(&model).map_err(|e| e.to_string())?;
        let calib_path = fx.path(&format!("{name}/calib.bqtd"));
        let calib = blockquant::data::load_calibration(&calib_path, 1024, 0).map_err(|e| e.to_string())?;
        let test = read_dataset(&fx.path(&format!("{name}/test.bqtd"))).map_err(|e| e.to_string())?;
        let cfg = ReconConfig { weight_bits: 8, act_bits: Some(8), ..ReconConfig::desk() };
        let q = calibrate_model(&fp, &calib, &cfg).map_err(|e| e.to_string())?.model;
        let a_fp = evaluate(&model, &test.inputs, &test.labels, false).unwrap().accuracy;
        let a_q = evaluate(&q, &test.inputs, &test.labels, true).unwrap().accuracy;
        ok &= a_fp - a_q < 0.005;
        rows.push(format!("{name} {a_fp:.4} -> {a_q:.4}"));
    }
    within(300.0, t, ok_if(ok, rows.join(", ")))
}

fn criterion_9() -> Outcome {
    let t = Instant::now();
    let mut hits = 0;
    let mut violations = 0;
    for trial in 0..20u64 {
        let (table, hw) = random_tables(6, 3, 900 + trial);
        let lo = hardware_measure(&BitConfig::uniform(6, 2), &hw, 8).unwrap();
        let hi = hardware_measure(&BitConfig::uniform(6, 8), &hw, 8).unwrap();
        let frac = 0.15 + 0.7 * (trial as f64 / 19.0);
        let delta = lo + frac * (hi - lo);
        let (_, optimum) = exhaustive_search(&table, &hw, delta).map_err(|e| e.to_string())?;
        let cfg = GaConfig { seed: trial, ..GaConfig::default() };
        let res = ga_search_audited(&table, &hw, delta, &cfg, &mut |_, h| violations += (h > delta) as usize)
            .map_err(|e| e.to_string())?;
        violations += (res.hardware > delta) as usize;
        hits += (res.fitness <= optimum * 1.01 + 1e-12) as usize;
    }
    within(60.0, t, ok_if(hits >= 18 && violations == 0, format!("{hits}/20 within 1% of the optimum, {violations} budget violations")))
}

fn criterion_10(ctx: &ResnetCtx, fx: &Fixtures, unified: &[NetworkModel]) -> Outcome {
    if unified.len() != 5 {
        return Err("unified 2-bit calibrations are missing".into());
    }
    let t = Instant::now();
    let layers = mixedprec::searchable_layers(&ctx.fp);
    let hw: HardwareTable = serde_json::from_str(&std::fs::read_to_string(fx.path("tiny-resnet/latency.json")).unwrap())
        .map_err(|e| e.to_string())?;
    if hw.ids() != layers {
        return Err("latency table does not match the searchable layers".into());
    }
    let calib0 = ctx.calib(0);
    let mut models = BTreeMap::new();
    models.insert(2, unified[0].clone());
    for b in [4u32, 8] {
        let cfg = ReconConfig { weight_bits: b, ..two_bit(Granularity::Block, 0) };
        models.insert(b, calibrate_model(&ctx.fp, &calib0, &cfg).map_err(|e| e.to_string())?.model);
    }
    let table = mixedprec::measure_sensitivities(&ctx.fp, &models, &calib0, &layers).map_err(|e| e.to_string())?;
    let delta = 1.15 * hardware_measure(&BitConfig::uniform(layers.len(), 2), &hw, 8).unwrap();
    let mut wins = 0;
    let mut rows = Vec::new();
    for seed in 0..5u64 {
        let found = ga_search(&table, &hw, delta, &GaConfig { seed, ..GaConfig::default() }).map_err(|e| e.to_string())?;
        let mut body = Vec::new();
        for k in ctx.fp.body() {
            let pos = layers.iter().position(|l| *l == ctx.fp.layers[k].id).unwrap();
            body.push(found.config.bits()[pos]);
        }
        let cfg = ReconConfig { bit_config: Some(body), ..two_bit(Granularity::Block, seed) };
        let mixed = calibrate_model(&ctx.fp, &ctx.calib(seed), &cfg).map_err(|e| e.to_string())?.model;
        let (am, au) = (ctx.accuracy(&mixed), ctx.accuracy(&unified[seed as usize]));
        wins += (am >= au) as usize;
        rows.push(format!("s{seed} {:?} {am:.3} vs {au:.3}", found.config.bits()));
    }
    let el = t.elapsed().as_secs_f64();
    ok_if(wins >= 4, format!("{wins}/5 seeds mixed >= unified [{}]; {el:.1}s", rows.join(", ")))
}

fn criterion_11(fx: &Fixtures) -> Outcome {
    let hw: HardwareTable = serde_json::from_str(&std::fs::read_to_string(fx.path("resnet18-size.json")).unwrap())
        .map_err(|e| e.to_string())?;
    let n = hw.layers.len();
    let c = BitConfig((0..n).map(|i| if i == 0 || i + 1 == n { 8 } else { 4 }).collect());
    let mb = hardware_measure(&c, &hw, 8).map_err(|e| e.to_string())?;
    // Independent count: 7x7 stem, four stages of two basic blocks, three
    // projection shortcuts, 1000-way classifier.
    let stem = 64 * 3 * 49;
    let mut body = 0u64;
    let mut cin = 64u64;
    for w in [64u64, 128, 256, 512] {
        body += w * cin * 9 + 3 * w * w * 9;
        if w != 64 {
            body += w * cin;
        }
        cin = w;
    }
    let bytes = body / 2 + stem + 512 * 1000;
    let hand = bytes as f64 / (1024.0 * 1024.0);
    ok_if((mb - 5.81).abs() <= 0.01 && (mb - hand).abs() < 1e-12, format!("{mb:.4} MB ({bytes} bytes), reference 5.81"))
}

// ---------------------------------------------------------------- determinism

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_blockquant")).args(args).env("RUST_LOG", "warn").output().unwrap();
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn criterion_12(fx: &Fixtures) -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cal");
    let out_s = out.to_str().unwrap();
    let model = fx.path("tiny-resnet/model");
    let calib = fx.path("tiny-resnet/calib.bqtd");
    let cal_args = [
        "calibrate", "--model", model.to_str().unwrap(), "--calib", calib.to_str().unwrap(), "--bits", "2,4,8",
        "--act-bits", "8", "--iters", "150", "--calib-size", "128", "--seed", "3", "--out", out_s,
    ];
    run_cli(&cal_args)?;
    let first = snapshot(&out);
    std::fs::remove_dir_all(&out).unwrap();
    run_cli(&cal_args)?;
    let second = snapshot(&out);
    if first != second {
        let diff: Vec<_> = first.keys().filter(|k| first.get(*k) != second.get(*k)).collect();
        return Err(format!("calibrate outputs differ: {diff:?}"));
    }
    let sens = out.join("sensitivity.json");
    let hw = fx.path("tiny-resnet/latency.json");
    let result = tmp.path().join("search.json");
    let search_args = [
        "search", "--sensitivity", sens.to_str().unwrap(), "--hardware", hw.to_str().unwrap(), "--delta-scale", "1.3",
        "--seed", "5", "--out", result.to_str().unwrap(),
    ];
    run_cli(&search_args)?;
    let a = std::fs::read(&result).unwrap();
    run_cli(&search_args)?;
    let b = std::fs::read(&result).unwrap();
    ok_if(a == b, format!("calibrate: {} files identical; search: {} bytes identical", first.len(), a.len()))
}

fn main() {
    let fx = Fixtures::locate();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut report = |n: usize, name: &'static str, r: Outcome| {
        match &r {
            Ok(d) => println!("PASS [{n:>2}] {name}: {d}"),
            Err(d) => println!("FAIL [{n:>2}] {name}: {d}"),
        }
        results.push((n, name, r));
    };
    report(1, "gradient checks", criterion_1());
    report(2, "output-space quadratic identity", criterion_2(&fx));
    report(3, "Gauss-Newton vs Hessian", criterion_3(&fx));
    report(4, "quantizer invariants", criterion_4());
    report(5, "step-size gradient", criterion_5());
    report(6, "learned rounding vs brute force", criterion_6());
    let mut block_models = Vec::new();
    match ResnetCtx::load(&fx) {
        Ok(ctx) => {
            report(7, "granularity ordering", criterion_7(&ctx, &mut block_models));
            report(8, "8-bit safety", criterion_8(&fx));
            report(9, "genetic search vs enumeration", criterion_9());
            report(10, "mixed vs unified precision", criterion_10(&ctx, &fx, &block_models));
        }
        Err(e) => {
            for (n, name) in [(7, "granularity ordering"), (8, "8-bit safety"), (9, "genetic search vs enumeration"), (10, "mixed vs unified precision")] {
                report(n, name, Err(e.clone()));
            }
        }
    }
    report(11, "model size arithmetic", criterion_11(&fx));
    report(12, "determinism", criterion_12(&fx));
    let passed = results.iter().filter(|r| r.2.is_ok()).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
