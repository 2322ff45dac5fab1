use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use blockquant::container::save_model;
use blockquant::fixtures::tiny_resnet_architecture;
use blockquant::mixedprec::{random_tables, write_json};
use serde_json::Value;

fn fixtures() -> PathBuf {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    assert!(p.join("tiny-resnet/model/manifest.json").exists(), "run `blockquant make-fixtures` first");
    p
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockquant")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn random_search_inputs(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let (table, hw) = random_tables(n, 4, 1);
    let (sp, hp) = (dir.join("sens.json"), dir.join("hw.json"));
    write_json(&sp, &table).unwrap();
    write_json(&hp, &hw).unwrap();
    (sp, hp)
}

#[test]
fn exit_codes() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(code(&["eval", "--model", s(&missing), "--data", s(&fx.join("tiny-mlp/test.bqtd"))]), 2);
    let (sp, hp) = random_search_inputs(tmp.path(), 6);
    assert_eq!(code(&["search", "--sensitivity", s(&sp), "--hardware", s(&hp), "--delta", "1e-9"]), 3);
    let unconverged = fx.join("tiny-mlp/unconverged");
    assert_eq!(code(&["verify", "--model", s(&unconverged), "--data", s(&fx.join("tiny-mlp/train.bqtd"))]), 5);
    assert_eq!(code(&["verify", "--model", s(&fx.join("tiny-mlp/model")), "--data", s(&fx.join("tiny-mlp/train.bqtd"))]), 0);
    assert_eq!(code(&["calibrate", "--bogus"]), 1);
}

#[test]
fn eval_reproduces_checkpoint_accuracy() {
    let fx = fixtures();
    for name in ["tiny-mlp", "tiny-resnet"] {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("eval.json");
        let st = run(&["eval", "--model", s(&fx.join(name).join("model")), "--data", s(&fx.join(name).join("test.bqtd")), "--out", s(&out)]);
        assert!(st.status.success());
        let want = json(&fx.join(name).join("model/manifest.json"))["metadata"]["fp_test_accuracy"].as_f64().unwrap();
        let got = json(&out)["accuracy"].as_f64().unwrap();
        assert!((got - want).abs() < 1e-12, "{name}: {got} vs {want}");
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let model = tiny_resnet_architecture(12345);
    let classes = model.num_classes as f64;
    save_model(&model, &tmp.path().join("m")).unwrap();
    let out = tmp.path().join("eval.json");
    assert!(run(&["eval", "--model", s(&tmp.path().join("m")), "--data", s(&fx.join("tiny-resnet/test.bqtd")), "--out", s(&out)])
        .status
        .success());
    let acc = json(&out)["accuracy"].as_f64().unwrap();
    assert!((acc - 1.0 / classes).abs() < 0.08, "accuracy {acc} with {classes} classes");
}

#[test]
fn four_bit_size_matches_element_count() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cal");
    let st = run(&[
        "calibrate", "--model", s(&fx.join("tiny-resnet/model")), "--calib", s(&fx.join("tiny-resnet/calib.bqtd")),
        "--bits", "4", "--iters", "50", "--calib-size", "64", "--out", s(&out),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let ev = tmp.path().join("eval.json");
    assert!(run(&["eval", "--model", s(&out.join("w4/model")), "--data", s(&fx.join("tiny-resnet/test.bqtd")), "--out", s(&ev)])
        .status
        .success());
    let report = json(&ev);
    let layers = report["layers"].as_array().unwrap();
    let mut bytes = 0.0;
    for (i, l) in layers.iter().enumerate() {
        let want = if i == 0 || i + 1 == layers.len() { 8 } else { 4 };
        assert_eq!(l["weight_bits"].as_u64().unwrap(), want, "{}", l["id"]);
        bytes += l["elements"].as_f64().unwrap() * want as f64 / 8.0;
    }
    let mb = report["size_mb"].as_f64().unwrap();
    assert!((mb - bytes / 1048576.0).abs() < 1e-12);
    let cal = json(&out.join("report.json"));
    assert_eq!(cal["results"][0]["size_mb"].as_f64().unwrap(), mb);
}

#[test]
fn unbounded_search_keeps_eight_bits() {
    let tmp = tempfile::tempdir().unwrap();
    let (sp, hp) = random_search_inputs(tmp.path(), 8);
    let out = tmp.path().join("r.json");
    assert!(run(&["search", "--sensitivity", s(&sp), "--hardware", s(&hp), "--delta", "inf", "--out", s(&out)]).status.success());
    let r = json(&out);
    assert!(r["config"].as_array().unwrap().iter().all(|b| b.as_u64() == Some(8)));
    assert!(r["run_config"]["delta"].is_null());
}

#[test]
fn fifty_layer_search_is_fast() {
    let tmp = tempfile::tempdir().unwrap();
    let (sp, hp) = random_search_inputs(tmp.path(), 50);
    let out = tmp.path().join("r.json");
    let t = Instant::now();
    let st = run(&["search", "--sensitivity", s(&sp), "--hardware", s(&hp), "--delta-scale", "1.5", "--out", s(&out)]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(t.elapsed().as_secs_f64() < 10.0);
    assert_eq!(json(&out)["config"].as_array().unwrap().len(), 50);
}

#[test]
fn reports_embed_configuration_and_version() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cal");
    let t = Instant::now();
    let st = run(&[
        "calibrate", "--model", s(&fx.join("tiny-mlp/model")), "--calib", s(&fx.join("tiny-mlp/calib.bqtd")),
        "--bits", "8", "--seed", "9", "--out", s(&out),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    assert!(t.elapsed().as_secs_f64() < 60.0);
    let r = json(&out.join("report.json"));
    assert_eq!(r["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(r["run_config"]["seed"], 9);
    assert_eq!(r["run_config"]["bits"], serde_json::json!([8]));
    assert!(r["run_config"]["recon"]["iterations"].as_u64().unwrap() > 0);
    let csv = std::fs::read_to_string(out.join("w8/calibration.csv")).unwrap();
    assert!(csv.starts_with("unit,iteration,recon_loss,reg_loss,beta"));
}

#[test]
fn config_file_values_yield_to_flags() {
    let fx = fixtures();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"bits": [8], "iters": 20, "calib_size": 64, "seed": 4}"#).unwrap();
    let out = tmp.path().join("cal");
    let st = run(&[
        "calibrate", "--config", s(&cfg), "--model", s(&fx.join("tiny-mlp/model")), "--calib",
        s(&fx.join("tiny-mlp/calib.bqtd")), "--seed", "5", "--out", s(&out),
    ]);
    assert!(st.status.success(), "{}", String::from_utf8_lossy(&st.stderr));
    let r = json(&out.join("report.json"));
    assert_eq!(r["run_config"]["seed"], 5);
    assert_eq!(r["run_config"]["calib_size"], 64);
    assert_eq!(r["run_config"]["recon"]["iterations"], 20);
}
