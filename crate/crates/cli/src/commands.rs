use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use blockquant::container::{load_model, save_model};
use blockquant::data::{load_calibration, read_dataset};
use blockquant::forward::{evaluate, EvalMetrics};
use blockquant::hessian::{unit_direction, verify_output_identity, FlatParams, EPSILON_LADDER};
use blockquant::mixedprec::{
    self, exhaustive_search, ga_search, hardware_measure, model_size_mb, searchable_layers, write_json, BitConfig,
    GaConfig, GenerationLog, HardwareTable, SensitivityTable,
};
use blockquant::model::{fold_bn, Granularity, NetworkModel};
use blockquant::recon::{calibrate_model, write_log, ReconConfig, UnitReport};
use blockquant::{fixtures, Error};
use serde::Serialize;
use serde_json::{json, Value};

use crate::options::{CalibrateOpts, EvalOpts, FixtureOpts, Profile, SearchOpts, VerifyOpts};

const TOOL: &str = "blockquant";
const VERSION: &str = env!("CARGO_PKG_VERSION");

fn required<T: Clone>(v: &Option<T>, flag: &str) -> anyhow::Result<T> {
    v.clone().ok_or_else(|| Error::Usage(format!("--{flag} is required")).into())
}

fn read_json(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load { path: path.into(), message: e.to_string() })?;
    Ok(serde_json::from_str(&text).map_err(|e| Error::Load { path: path.into(), message: e.to_string() })?)
}

fn parse_as<T: for<'de> serde::Deserialize<'de>>(path: &Path, v: Value) -> anyhow::Result<T> {
    Ok(serde_json::from_value(v).map_err(|e| Error::Load { path: path.into(), message: e.to_string() })?)
}

#[derive(Debug, Clone, Serialize)]
struct CalibrateRun {
    model: PathBuf,
    calib: PathBuf,
    out: PathBuf,
    bits: Vec<u32>,
    calib_size: usize,
    seed: u64,
    profile: Profile,
    bit_config: Option<PathBuf>,
    eval: Option<PathBuf>,
    recon: ReconConfig,
}

#[derive(Debug, Serialize)]
struct UnitSummary {
    unit: String,
    layers: Vec<String>,
    initial_loss: f64,
    final_loss: f64,
    fell_back: bool,
    binarized_fraction: f64,
    loss_trend_improved: bool,
}

impl From<&UnitReport> for UnitSummary {
    fn from(r: &UnitReport) -> Self {
        Self {
            unit: r.unit.clone(),
            layers: r.layers.clone(),
            initial_loss: r.initial_loss,
            final_loss: r.final_loss,
            fell_back: r.fell_back,
            binarized_fraction: r.binarized_fraction,
            loss_trend_improved: r.trend_improved(100),
        }
    }
}

fn metrics_json(m: &EvalMetrics) -> Value {
    json!({ "accuracy": m.accuracy, "loss": m.loss, "samples": m.samples })
}

fn bits_from_search(path: &Path, model: &NetworkModel) -> anyhow::Result<Vec<u32>> {
    let v = read_json(path)?;
    let layers: Vec<String> = parse_as(path, v.get("layers").cloned().unwrap_or(Value::Null))?;
    let config: BitConfig = parse_as(path, v.get("config").cloned().unwrap_or(Value::Null))?;
    if layers.len() != config.len() {
        bail!(Error::Load { path: path.into(), message: "layers and config differ in length".into() });
    }
    let chosen: BTreeMap<&str, u32> = layers.iter().map(|s| s.as_str()).zip(config.bits().iter().copied()).collect();
    model
        .body()
        .map(|k| {
            let id = &model.layers[k].id;
            chosen.get(id.as_str()).copied().ok_or_else(|| {
                Error::Usage(format!("search result {} does not assign layer {id}", path.display())).into()
            })
        })
        .collect()
}

pub fn calibrate(opts: CalibrateOpts) -> anyhow::Result<()> {
    let o = opts.resolve()?;
    let model_dir = required(&o.model, "model")?;
    let calib_path = required(&o.calib, "calib")?;
    let out = required(&o.out, "out")?;
    let profile = o.profile.unwrap_or_default();
    let mut recon = match profile {
        Profile::Desk => ReconConfig::desk(),
        Profile::Paper => ReconConfig::paper(),
    };
    if let Some(v) = o.iters {
        recon.iterations = v;
    }
    if let Some(v) = o.batch {
        recon.batch = v;
    }
    if let Some(v) = o.lr_round {
        recon.lr_round = v;
    }
    if let Some(v) = o.lr_step {
        recon.lr_step = v;
    }
    if let Some(v) = o.lambda {
        recon.rounding.lambda = v;
    }
    recon.granularity = o.granularity.unwrap_or(Granularity::Block);
    recon.act_bits = o.act_bits;
    recon.first_last = o.first_last_bits.unwrap_or_default();
    recon.use_fisher = !o.no_fisher.unwrap_or(false);
    recon.propagate_quantized = !o.fp_inputs.unwrap_or(false);
    recon.per_channel = o.per_channel.unwrap_or(false);
    recon.seed = o.seed.unwrap_or(0);

    let mut model = load_model(&model_dir)?;
    if model.layers.iter().any(|l| l.bn.is_some()) {
        log::info!("folding batch norm into the preceding layers");
        model = fold_bn(&model)?;
    }
    let bits = o.bits.clone().unwrap_or_else(|| vec![4]);
    if let Some(p) = &o.bit_config {
        recon.bit_config = Some(bits_from_search(p, &model)?);
    }
    recon.validate()?;
    let calib_size = o.calib_size.unwrap_or(1024);
    let seed = o.seed.unwrap_or(0);
    let calib = load_calibration(&calib_path, calib_size, seed)?;
    let eval_set = o.eval.as_ref().map(|p| read_dataset(p)).transpose()?;

    let run = CalibrateRun {
        model: model_dir,
        calib: calib_path,
        out: out.clone(),
        bits: bits.clone(),
        calib_size,
        seed,
        profile,
        bit_config: o.bit_config.clone(),
        eval: o.eval.clone(),
        recon: recon.clone(),
    };
    fs::create_dir_all(&out)?;
    let runs: Vec<(String, Option<u32>)> = if recon.bit_config.is_some() {
        vec![("mixed".into(), None)]
    } else {
        bits.iter().map(|&b| (format!("w{b}"), Some(b))).collect()
    };
    let mut calibrated = BTreeMap::new();
    let mut results = Vec::new();
    for (name, b) in runs {
        let mut cfg = recon.clone();
        if let Some(b) = b {
            cfg.weight_bits = b;
        }
        log::info!("calibrating {name}");
        let outcome = calibrate_model(&model, &calib, &cfg)?;
        let dir = out.join(&name);
        save_model(&outcome.model, &dir.join("model"))?;
        write_log(&dir.join("calibration.csv"), &outcome.log)?;
        let qa = cfg.act_bits.is_some();
        let cm = evaluate(&outcome.model, &calib.data.inputs, &calib.data.labels, qa)?;
        let em = eval_set.as_ref().map(|d| evaluate(&outcome.model, &d.inputs, &d.labels, qa)).transpose()?;
        println!(
            "{name}: calibration accuracy {:.4}{}  size {:.4} MB",
            cm.accuracy,
            em.map(|m| format!("  eval accuracy {:.4}", m.accuracy)).unwrap_or_default(),
            model_size_mb(&outcome.model)
        );
        let units: Vec<UnitSummary> = outcome.reports.iter().map(UnitSummary::from).collect();
        results.push(json!({
            "name": name,
            "weight_bits": b,
            "calibration": metrics_json(&cm),
            "eval": em.as_ref().map(metrics_json),
            "size_mb": model_size_mb(&outcome.model),
            "units": units,
        }));
        if let Some(b) = b {
            calibrated.insert(b, outcome.model);
        }
    }

    let mut report = json!({ "tool": TOOL, "version": VERSION, "run_config": run, "results": results });
    if mixedprec::BITS.iter().all(|b| calibrated.contains_key(b)) {
        let layers = searchable_layers(&model);
        let table = mixedprec::measure_sensitivities(&model, &calibrated, &calib, &layers)?;
        write_json(
            &out.join("sensitivity.json"),
            &json!({ "tool": TOOL, "version": VERSION, "run_config": run, "table": table }),
        )?;
        report["sensitivity"] = json!("sensitivity.json");
    }
    write_json(&out.join("report.json"), &report)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
struct SearchRun {
    sensitivity: PathBuf,
    hardware: PathBuf,
    delta: f64,
    delta_scale: Option<f64>,
    ga: GaConfig,
    exhaustive: bool,
}

#[derive(Debug, Serialize)]
struct SearchReport {
    tool: &'static str,
    version: &'static str,
    run_config: SearchRun,
    layers: Vec<String>,
    config: BitConfig,
    fitness: f64,
    hardware: f64,
    constraint: mixedprec::Constraint,
    exhaustive: Option<Value>,
    generations: Vec<GenerationLog>,
}

fn finite_or_null(x: f64) -> Value {
    if x.is_finite() {
        json!(x)
    } else {
        Value::Null
    }
}

pub fn search(opts: SearchOpts) -> anyhow::Result<()> {
    let o = opts.resolve()?;
    let sens_path = required(&o.sensitivity, "sensitivity")?;
    let hw_path = required(&o.hardware, "hardware")?;
    let raw = read_json(&sens_path)?;
    let table: SensitivityTable = match raw.get("table") {
        Some(t) => parse_as(&sens_path, t.clone())?,
        None => parse_as(&sens_path, raw)?,
    };
    let hw: HardwareTable = parse_as(&hw_path, read_json(&hw_path)?)?;
    hw.validate()?;
    let n = table.layers.len();
    let floor = hardware_measure(&BitConfig::uniform(n, 2), &hw, hw.act_bits)?;
    let delta = match (o.delta, o.delta_scale) {
        (Some(d), None) => d,
        (None, Some(s)) => s * floor,
        (None, None) => bail!(Error::Usage("one of --delta or --delta-scale is required".into())),
        (Some(_), Some(_)) => bail!(Error::Usage("--delta and --delta-scale are exclusive".into())),
    };
    let d = GaConfig::default();
    let ga = GaConfig {
        population: o.population.unwrap_or(d.population),
        generations: o.generations.unwrap_or(d.generations),
        mutation: o.mutation.unwrap_or(d.mutation),
        topk: o.topk.unwrap_or(d.topk),
        seed: o.seed.unwrap_or(d.seed),
        stall_limit: d.stall_limit,
    };
    let run = SearchRun {
        sensitivity: sens_path,
        hardware: hw_path,
        delta,
        delta_scale: o.delta_scale,
        ga: ga.clone(),
        exhaustive: o.exhaustive.unwrap_or(false),
    };
    let result = ga_search(&table, &hw, delta, &ga)?;
    let exhaustive = if run.exhaustive {
        let (c, f) = exhaustive_search(&table, &hw, delta)?;
        Some(json!({ "config": c, "fitness": f, "hardware": hardware_measure(&c, &hw, hw.act_bits)? }))
    } else {
        None
    };
    println!("layer        bits");
    for (l, b) in table.layers.iter().zip(result.config.bits()) {
        println!("{l:<12} {b}");
    }
    println!("fitness {:.6e}  cost {:.4} (budget {delta:.4})", result.fitness, result.hardware);
    let mut value = serde_json::to_value(SearchReport {
        tool: TOOL,
        version: VERSION,
        run_config: run,
        layers: table.layers.clone(),
        config: result.config,
        fitness: result.fitness,
        hardware: result.hardware,
        constraint: hw.constraint,
        exhaustive,
        generations: result.generations,
    })?;
    value["run_config"]["delta"] = finite_or_null(delta);
    if let Some(out) = &o.out {
        if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        write_json(out, &value)?;
    }
    Ok(())
}

pub fn eval(o: EvalOpts) -> anyhow::Result<()> {
    let model = load_model(&o.model)?;
    let data = read_dataset(&o.data)?;
    let m = evaluate(&model, &data.inputs, &data.labels, !o.fp_activations)?;
    let layers: Vec<Value> = model
        .layers
        .iter()
        .map(|l| {
            json!({
                "id": l.id,
                "elements": l.weight.numel(),
                "weight_bits": l.quant.as_ref().map(|q| q.weight_bits),
                "act_bits": l.quant.as_ref().and_then(|q| q.act_bits),
            })
        })
        .collect();
    println!("{:<12} {:>9} {:>6} {:>6}", "layer", "elements", "w-bits", "a-bits");
    for l in &model.layers {
        let q = l.quant.as_ref();
        let show = |b: Option<u32>| b.map_or("fp".to_string(), |b| b.to_string());
        println!(
            "{:<12} {:>9} {:>6} {:>6}",
            l.id,
            l.weight.numel(),
            show(q.map(|q| q.weight_bits)),
            show(q.and_then(|q| q.act_bits))
        );
    }
    let size = model_size_mb(&model);
    println!("accuracy {:.4}  loss {:.4}  samples {}  size {size:.4} MB", m.accuracy, m.loss, m.samples);
    let report = json!({
        "tool": TOOL,
        "version": VERSION,
        "run_config": o,
        "accuracy": m.accuracy,
        "loss": m.loss,
        "samples": m.samples,
        "size_mb": size,
        "layers": layers,
    });
    if let Some(out) = &o.out {
        write_json(out, &report)?;
    }
    Ok(())
}

pub fn verify(o: VerifyOpts) -> anyhow::Result<()> {
    let model = load_model(&o.model)?;
    let data = read_dataset(&o.data)?;
    let dim = FlatParams::weights(&model)?.dim();
    let direction = unit_direction(dim, o.seed);
    let check = verify_output_identity(&model, &data, &EPSILON_LADDER, &direction)?;
    println!("‖∇L‖∞ = {:.3e}, d = {}", check.grad_inf_norm, check.dim);
    println!("{:>8} {:>14} {:>14} {:>12}", "eps", "gauss-newton", "output", "gap");
    for r in &check.rungs {
        println!("{:>8.0e} {:>14.6e} {:>14.6e} {:>12.3e}", r.epsilon, r.gn, r.rhs, r.output_gap);
    }
    let report = json!({ "tool": TOOL, "version": VERSION, "run_config": o, "check": check });
    match &o.out {
        Some(out) => write_json(out, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if !check.monotone {
        bail!(Error::Numeric("relative gap does not decrease monotonically along the ladder".into()));
    }
    Ok(())
}

pub fn make_fixtures(o: FixtureOpts) -> anyhow::Result<()> {
    fixtures::write_all(&o.out, o.seed).with_context(|| format!("writing fixtures to {}", o.out.display()))?;
    println!("fixtures written to {}", o.out.display());
    Ok(())
}
