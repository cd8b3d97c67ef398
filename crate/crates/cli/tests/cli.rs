use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use po2quant::io;
use po2quant::{IntTensor, Tensor};
use serde_json::Value;

fn po2q(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_po2q"))
        .args(args)
        .output()
        .expect("spawn po2q")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn golden(dir: &Path) -> String {
    let w = Tensor::new(
        vec![-0.17, 2.58, -8.75, -3.56, 1.56, -0.15, 2.15, -0.66, 0.49],
        vec![3, 3],
    )
    .unwrap();
    let p = dir.join("w.pqt");
    io::save_f64(&p, &w).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn fit_scale_on_the_3x3_example() {
    let dir = tempfile::tempdir().unwrap();
    let w = golden(dir.path());
    let base = ["fit-scale", "--input", &w, "--bits", "4", "--signed", "--n-iters", "2"];
    let v = stdout_json(&po2q(&base));
    assert_eq!(v["exponent"], 0);
    assert_eq!(v["scale"], 1.0);

    let mut with_search = base.to_vec();
    with_search.extend(["--line-search", "2"]);
    let v = stdout_json(&po2q(&with_search));
    assert_eq!(v["exponent"], 1);
    assert!(v["msqe_final"].as_f64().unwrap() < v["msqe_fit"].as_f64().unwrap());
}

#[test]
fn explicit_delta_init_reports_regression_terms() {
    let dir = tempfile::tempdir().unwrap();
    let w = golden(dir.path());
    let v = stdout_json(&po2q(&["fit-scale", "--input", &w, "--delta-init", "1.0"]));
    let it = &v["iterations"][0];
    assert!((it["numerator"].as_f64().unwrap() - 91.31).abs() < 1e-9);
    assert_eq!(it["denominator"], 83.0);
}

#[test]
fn sigma_outlier_accepts_inf() {
    let dir = tempfile::tempdir().unwrap();
    let w = golden(dir.path());
    let v = stdout_json(&po2q(&["fit-scale", "--input", &w, "--sigma-outlier", "inf"]));
    assert_eq!(v["config"]["sigma_outlier"], "inf");
    assert_eq!(v["exponent"], 0);

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"sigma_outlier": "inf", "line_search_range": 2}"#).unwrap();
    let v = stdout_json(&po2q(&["fit-scale", "--input", &w, "--config", cfg.to_str().unwrap()]));
    assert_eq!(v["exponent"], 1);
}

#[test]
fn usage_errors_exit_one() {
    let none = po2q(&[]);
    assert_eq!(none.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(po2q(&["fit-scale", "--bogus"]).status.code(), Some(1));
    assert_eq!(po2q(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(po2q(&["--help"]).status.code(), Some(0));
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let w = golden(dir.path());
    assert_eq!(po2q(&["fit-scale", "--input", &w, "--bits", "1"]).status.code(), Some(1));
    let bad = dir.path().join("bad.pqt");
    fs::write(&bad, b"nope").unwrap();
    assert_eq!(po2q(&["fit-scale", "--input", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn quantize_output_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let w = golden(dir.path());
    let codes = dir.path().join("codes.pqt");
    let reals = dir.path().join("reals.pqt");
    let v = stdout_json(&po2q(&[
        "quantize", "--input", &w, "--output", codes.to_str().unwrap(), "--exponent", "-1", "--codes",
    ]));
    assert_eq!(v["msqe"], 27.6757);
    stdout_json(&po2q(&["quantize", "--input", &w, "--output", reals.to_str().unwrap(), "--exponent", "-1"]));

    let c = io::load(&codes).unwrap().into_i64().unwrap();
    assert_eq!(c.shape(), &[3, 3]);
    assert_eq!(c.data(), &[0, 5, -7, -7, 3, 0, 4, -1, 1]);
    let r = io::load(&reals).unwrap().into_f64();
    let scaled: Vec<f64> = c.data().iter().map(|&k| k as f64 * 0.5).collect();
    assert_eq!(r.data(), scaled.as_slice());

    // rewriting what was read gives identical bytes
    let again = dir.path().join("again.pqt");
    io::save_i64(&again, &c).unwrap();
    assert_eq!(fs::read(&codes).unwrap(), fs::read(&again).unwrap());
}

#[test]
fn grad_fit_writes_fixed_columns() {
    let dir = tempfile::tempdir().unwrap();
    let w = golden(dir.path());
    let csv = dir.path().join("g.csv");
    let out = po2q(&[
        "grad-fit", "--input", &w, "--signed", "--steps", "20", "--freeze-at", "none", "--seed", "1", "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,delta_log2,exponent,msqe,clip_fraction"));
    assert_eq!(lines.count(), 20);
}

#[test]
fn toy_config_echo_reproduces_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let a_s = a.to_str().unwrap();
    assert!(po2q(&["toy-rtlm", "--out", a_s, "--steps", "200", "--seed", "3", "--mode", "ceil"])
        .status
        .success());
    let cfg = a.join("config.json");
    assert!(po2q(&["toy-rtlm", "--out", b.to_str().unwrap(), "--config", cfg.to_str().unwrap()])
        .status
        .success());
    for f in ["exponent.csv", "delta_log2.csv", "msqe.csv", "summary.json", "config.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let head = fs::read_to_string(a.join("exponent.csv")).unwrap();
    assert!(head.starts_with("step,value\n"));
}

#[test]
fn toy_converge_reports_visits_and_freeze() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    let o = out.to_str().unwrap();
    assert!(po2q(&["toy-converge", "--out", o, "--freeze-at", "2500"]).status.success());
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(s["visits_both"], true);
    assert!((s["unconstrained_optimum"].as_f64().unwrap() - 0.9).abs() < 0.02);
    assert!(s["frozen_exponent"].is_number());
}

#[test]
fn qat_divergence_exits_two_after_writing_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("q.json");
    fs::write(&cfg, r#"{"model": {"lr": 1e300, "steps": 20}}"#).unwrap();
    let out = dir.path().join("q");
    let o = po2q(&["qat", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let s: Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(s["diverged_at"].is_number());
    let echoed: Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"]["lr"], 1e300);
    assert_eq!(echoed["model"]["hidden"], 32);
}

fn write_layer(dir: &Path, bias_exponent: Option<i32>) -> String {
    io::save_i64(dir.join("wc.pqt"), &IntTensor::new(vec![3, -7, 2, 1, 0, -5, 6, 6, -1], vec![3, 3]).unwrap()).unwrap();
    io::save_i64(dir.join("bc.pqt"), &IntTensor::from_vec(vec![100, -20, 7])).unwrap();
    io::save_i64(dir.join("x.pqt"), &IntTensor::new(vec![5, 20, 17, 0, 1, 2], vec![2, 3]).unwrap()).unwrap();
    let mut spec = serde_json::json!({
        "weight_codes": "wc.pqt", "weight_exponent": -3, "weight_bits": 4,
        "bias_codes": "bc.pqt",
        "input_exponent": -2, "input_bits": 8, "input_signed": false,
        "output_exponent": -1, "output_bits": 8, "output_signed": true,
    });
    if let Some(e) = bias_exponent {
        spec["bias_exponent"] = e.into();
    }
    let p = dir.join("layer.json");
    fs::write(&p, spec.to_string()).unwrap();
    p.to_str().unwrap().to_owned()
}

#[test]
fn simulate_int_check_passes() {
    let dir = tempfile::tempdir().unwrap();
    let layer = write_layer(dir.path(), None);
    let x = dir.path().join("x.pqt");
    let y = dir.path().join("y.pqt");
    let o = po2q(&[
        "simulate-int", "--layer", &layer, "--input", x.to_str().unwrap(), "--check",
        "--output", y.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "PASS");
    let y = io::load(&y).unwrap().into_i64().unwrap();
    assert_eq!(y.shape(), &[2, 3]);

    let v = stdout_json(&po2q(&["simulate-int", "--layer", &layer, "--input", x.to_str().unwrap()]));
    assert_eq!(v["shift"], -4);
    let out: Vec<i64> = v["output"].as_array().unwrap().iter().map(|x| x.as_i64().unwrap()).collect();
    assert_eq!(out, y.data());
}

#[test]
fn simulate_int_rejects_misaligned_bias() {
    let dir = tempfile::tempdir().unwrap();
    let layer = write_layer(dir.path(), Some(-4));
    let x = dir.path().join("x.pqt");
    assert_eq!(po2q(&["simulate-int", "--layer", &layer, "--input", x.to_str().unwrap()]).status.code(), Some(1));
}
