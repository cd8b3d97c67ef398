use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use po2quant::fpsim::{first_mismatch, int_forward, QuantizedLayer};
use po2quant::grad::DEFAULT_EMA_DECAY;
use po2quant::harness::qat::{
    toy_qat_train, QatDataConfig, QatModelConfig, QatQuantizerConfig,
};
use po2quant::harness::toy::{
    brute_force_optimal_step, run_toy_quantizer, toy_base_input, toy_convergence_experiment,
    toy_rtlm_experiment, transition_sweep, visits_both, ToyInput, ToyQuantizerExperimentConfig,
};
use po2quant::harness::MetricSeries;
use po2quant::io::{self, TensorFile};
use po2quant::msqe::{
    fit_po2_scale, fit_scale_msqe_trace, fit_weights, weighted_fit_scale_trace, GvaState,
    MsqeFitConfig, MsqeQuantizer, DEFAULT_GVA_DECAY,
};
use po2quant::quant::{self, clip_fraction, msqe_at, quant_codes, Po2Scale};
use po2quant::{IntTensor, QuantConfig, QuantError, RoundingMode};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::output::{prepare_dir, print_json, write_json, write_series};
use crate::{ensure, Invalid};

fn load_f64(path: &Path) -> anyhow::Result<po2quant::Tensor> {
    Ok(io::load(path)
        .with_context(|| format!("loading {}", path.display()))?
        .into_f64())
}

/// Recursively overlays `patch` onto `base`. Objects carrying a `kind` tag
/// replace the base object instead of merging into it.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `defaults` with the JSON file at `path` (if any) overlaid.
pub fn load_config<T: Serialize + DeserializeOwned>(defaults: T, path: Option<&Path>) -> anyhow::Result<T> {
    let Some(p) = path else {
        return Ok(defaults);
    };
    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
    let patch: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
    let mut base = serde_json::to_value(defaults)?;
    merge(&mut base, patch);
    serde_json::from_value(base).with_context(|| format!("interpreting {}", p.display()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FitScaleConfig {
    pub bits: u32,
    pub signed: bool,
    pub delta_init: Option<f64>,
    #[serde(flatten)]
    pub fit: MsqeFitConfig,
}

impl Default for FitScaleConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            signed: true,
            delta_init: None,
            fit: MsqeFitConfig::baseline(),
        }
    }
}

pub fn fit_scale(input: &Path, moments: Option<&Path>, cfg: &FitScaleConfig) -> anyhow::Result<()> {
    let w = load_f64(input)?;
    let qc = QuantConfig::new(cfg.bits, cfg.signed)?;
    let delta_init = cfg
        .delta_init
        .unwrap_or_else(|| MsqeQuantizer::range_init(&w, &qc));
    let gva = match moments {
        Some(p) => Some(GvaState::from_moments(load_f64(p)?, DEFAULT_GVA_DECAY, 1)?),
        None => None,
    };
    let report = fit_po2_scale(&w, delta_init, &cfg.fit, gva.as_ref(), &qc)?;
    let trace = match fit_weights(&w, &cfg.fit, gva.as_ref())? {
        Some(f) => weighted_fit_scale_trace(&w, delta_init, cfg.fit.n_iters, &f, &qc)?,
        None => fit_scale_msqe_trace(&w, delta_init, cfg.fit.n_iters, &qc)?,
    };
    let iterations: Vec<Value> = trace
        .iter()
        .map(|it| {
            json!({
                "numerator": it.numerator,
                "denominator": it.denominator,
                "delta": it.delta,
                "exponent": it.scale.exponent(),
            })
        })
        .collect();
    let out = json!({
        "exponent": report.scale.exponent(),
        "scale": report.scale.value(),
        "delta_init": report.delta_init,
        "msqe_init": report.msqe_init,
        "msqe_fit": report.msqe_fit,
        "msqe_final": report.msqe_final,
        "clip_fraction": report.clip_fraction,
        "weighted": report.weighted,
        "iterations": iterations,
        "config": cfg,
    });
    print_json(&out)?;
    Ok(())
}

pub fn quantize(
    input: &Path,
    output: &Path,
    bits: u32,
    signed: bool,
    exponent: Option<i32>,
    codes: bool,
) -> anyhow::Result<()> {
    let w = load_f64(input)?;
    let qc = QuantConfig::new(bits, signed)?;
    let scale = match exponent {
        Some(e) => Po2Scale::new(e)?,
        None => {
            let fit = MsqeFitConfig::default();
            fit_po2_scale(&w, MsqeQuantizer::range_init(&w, &qc), &fit, None, &qc)?.scale
        }
    };
    if codes {
        io::save_i64(output, &quant_codes(&w, scale, &qc)?)?;
    } else {
        io::save_f64(output, &quant::quantize(&w, scale, &qc)?)?;
    }
    let out = json!({
        "exponent": scale.exponent(),
        "msqe": msqe_at(&w, scale, &qc, None)?,
        "clip_fraction": clip_fraction(&w, scale, &qc),
    });
    print_json(&out)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GradFitConfig {
    pub bits: u32,
    pub mode: RoundingMode,
    pub steps: usize,
    pub lr: f64,
    pub init_delta_log2: Option<f64>,
    pub freeze_at: Option<usize>,
    pub ema_decay: f64,
    pub signed: bool,
    pub seed: u64,
}

impl Default for GradFitConfig {
    fn default() -> Self {
        Self {
            bits: 4,
            mode: RoundingMode::Rtlm,
            steps: 500,
            lr: 0.01,
            init_delta_log2: None,
            freeze_at: None,
            ema_decay: DEFAULT_EMA_DECAY,
            signed: true,
            seed: 0,
        }
    }
}

/// CSV columns: `step,delta_log2,exponent,msqe,clip_fraction`.
pub fn grad_fit(input: &Path, out: Option<&Path>, cfg: &GradFitConfig) -> anyhow::Result<()> {
    ensure(cfg.signed, "grad-fit supports signed codes only")?;
    let w = load_f64(input)?;
    let toy = ToyQuantizerExperimentConfig {
        n_elements: w.len(),
        noise_sigma: 0.0,
        init_delta_log2: cfg.init_delta_log2,
        steps: cfg.steps,
        lr: cfg.lr,
        mode: cfg.mode,
        seed: cfg.seed,
        freeze_at: cfg.freeze_at,
        bits: cfg.bits,
        ema_decay: cfg.ema_decay,
        input: ToyInput::Lattice,
    };
    let run = run_toy_quantizer(&toy, &w)?;
    let sink: Box<dyn std::io::Write> = match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    };
    let mut csv = csv::Writer::from_writer(sink);
    csv.write_record(["step", "delta_log2", "exponent", "msqe", "clip_fraction"])?;
    for i in 0..run.exponent.len() {
        csv.write_record([
            run.exponent.steps()[i].to_string(),
            run.delta_log2.values()[i].to_string(),
            run.exponent.values()[i].to_string(),
            run.msqe.values()[i].to_string(),
            run.clip_fraction.values()[i].to_string(),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Sweep {
    pub sigmas: Vec<f64>,
    pub seeds: u64,
    pub modes: Vec<RoundingMode>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            sigmas: vec![0.01, 0.05, 0.1],
            seeds: 20,
            modes: vec![RoundingMode::Ceil, RoundingMode::Rtlm],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyCliConfig {
    #[serde(flatten)]
    pub experiment: ToyQuantizerExperimentConfig,
    /// Transition-count sweep over noise levels, modes and seeds.
    pub sweep: Option<Sweep>,
    pub warmup: usize,
    pub window: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ToyKind {
    Rtlm,
    Converge,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    mode: Option<RoundingMode>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    freeze_at: Option<usize>,
    /// Run the transition sweep with this many seeds.
    #[arg(long)]
    sweep_seeds: Option<u64>,
}

pub fn toy(args: ToyArgs, kind: ToyKind) -> anyhow::Result<()> {
    let defaults = ToyCliConfig {
        experiment: match kind {
            ToyKind::Rtlm => ToyQuantizerExperimentConfig::rtlm_default(),
            ToyKind::Converge => ToyQuantizerExperimentConfig::convergence_default(),
        },
        sweep: None,
        warmup: 500,
        window: 500,
    };
    let mut cfg = load_config(defaults, args.config.as_deref())?;
    let e = &mut cfg.experiment;
    if let Some(s) = args.seed {
        e.seed = s;
    }
    if let Some(s) = args.sigma {
        e.noise_sigma = s;
    }
    if let Some(m) = args.mode {
        e.mode = m;
    }
    if let Some(s) = args.steps {
        e.steps = s;
    }
    if args.freeze_at.is_some() {
        e.freeze_at = args.freeze_at;
    }
    if let Some(n) = args.sweep_seeds {
        cfg.sweep.get_or_insert_with(Sweep::default).seeds = n;
    }
    cfg.experiment.validate()?;

    prepare_dir(&args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    let run = match kind {
        ToyKind::Rtlm => toy_rtlm_experiment(&cfg.experiment)?,
        ToyKind::Converge => toy_convergence_experiment(&cfg.experiment)?,
    };
    for s in run.series() {
        write_series(&args.out, s)?;
    }
    let mut summary = json!({
        "transitions": run.transitions,
        "final_exponent": run.exponent.last(),
        "initial_ema": run.initial_ema,
    });
    if let Some(f) = cfg.experiment.freeze_at.filter(|&f| f < run.exponent.len()) {
        summary["frozen_exponent"] = json!(run.exponent.values()[f]);
    }
    if kind == ToyKind::Converge {
        let base = toy_base_input(&cfg.experiment)?;
        let qc = cfg.experiment.quant_config()?;
        summary["unconstrained_optimum"] = json!(brute_force_optimal_step(&base, &qc)?);
        // only the unfrozen part of the trajectory can oscillate
        let live = cfg.experiment.freeze_at.unwrap_or(usize::MAX).min(run.exponent.len());
        let head = series_prefix(&run.exponent, live)?;
        summary["visits_both"] = json!(visits_both(&head, cfg.warmup, cfg.window, -1.0, 0.0));
    }
    if let Some(sweep) = &cfg.sweep {
        let path = args.out.join("sweep.csv");
        let mut csv = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        csv.write_record(["sigma", "mode", "seed", "transitions"])?;
        let mut means = Vec::new();
        for &sigma in &sweep.sigmas {
            let c = ToyQuantizerExperimentConfig {
                noise_sigma: sigma,
                ..cfg.experiment
            };
            let first = cfg.experiment.seed;
            for (mode, counts) in transition_sweep(&c, &sweep.modes, first..first + sweep.seeds)? {
                for (i, n) in counts.iter().enumerate() {
                    csv.write_record([sigma.to_string(), mode.to_string(), (first + i as u64).to_string(), n.to_string()])?;
                }
                let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
                means.push(json!({"sigma": sigma, "mode": mode, "mean_transitions": mean}));
            }
        }
        csv.flush()?;
        summary["sweep"] = json!(means);
    }
    write_json(&args.out.join("summary.json"), &summary)?;
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct QatConfig {
    pub model: QatModelConfig,
    pub quantizers: QatQuantizerConfig,
    pub data: QatDataConfig,
}

pub fn qat(out: &Path, cfg: &QatConfig) -> anyhow::Result<()> {
    prepare_dir(out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let run = toy_qat_train(&cfg.model, &cfg.quantizers, &cfg.data)?;
    for s in &run.series {
        write_series(out, s)?;
    }
    write_json(&out.join("summary.json"), &run.summary)?;
    if let Some(step) = run.summary.diverged_at {
        return Err(QuantError::Diverged { step: step as usize }.into());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerSpec {
    /// `[out, in]` integer tensor file, relative to the JSON file.
    pub weight_codes: PathBuf,
    pub weight_exponent: i32,
    pub weight_bits: u32,
    /// `[out]` integer tensor file with signed 8-bit codes.
    pub bias_codes: PathBuf,
    /// Must equal `weight_exponent + input_exponent` when given.
    pub bias_exponent: Option<i32>,
    pub input_exponent: i32,
    pub input_bits: u32,
    pub input_signed: bool,
    pub output_exponent: i32,
    pub output_bits: u32,
    pub output_signed: bool,
}

pub fn load_layer(path: &Path) -> anyhow::Result<QuantizedLayer> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let spec: LayerSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let codes = |p: &Path| -> anyhow::Result<IntTensor> {
        let full = dir.join(p);
        Ok(io::load(&full)
            .with_context(|| format!("loading {}", full.display()))?
            .into_i64()?)
    };
    let bias_exponent = spec
        .bias_exponent
        .unwrap_or(spec.weight_exponent + spec.input_exponent);
    Ok(QuantizedLayer::new(
        codes(&spec.weight_codes)?,
        Po2Scale::new(spec.weight_exponent)?,
        QuantConfig::signed(spec.weight_bits)?,
        codes(&spec.bias_codes)?,
        Po2Scale::new(bias_exponent)?,
        Po2Scale::new(spec.input_exponent)?,
        QuantConfig::new(spec.input_bits, spec.input_signed)?,
        Po2Scale::new(spec.output_exponent)?,
        QuantConfig::new(spec.output_bits, spec.output_signed)?,
    )?)
}

/// Input rows: a `[in]` vector or a `[batch, in]` matrix.
fn input_rows(t: IntTensor, width: usize) -> anyhow::Result<Vec<IntTensor>> {
    match t.shape() {
        [n] if *n == width => Ok(vec![t]),
        [_, n] if *n == width => Ok(t
            .data()
            .chunks(width)
            .map(|c| IntTensor::from_vec(c.to_vec()))
            .collect()),
        s => Err(Invalid(format!("input shape {s:?} does not match layer width {width}")).into()),
    }
}

pub fn simulate_int(layer_path: &Path, input: &Path, check: bool, output: Option<&Path>) -> anyhow::Result<()> {
    let layer = load_layer(layer_path)?;
    let x = match io::load(input).with_context(|| format!("loading {}", input.display()))? {
        TensorFile::I64(t) => t,
        other => other.into_i64()?,
    };
    let batched = x.shape().len() == 2;
    let rows = input_rows(x, layer.in_features())?;
    ensure(!rows.is_empty(), "empty input")?;
    let mut out = Vec::new();
    for r in &rows {
        out.extend(int_forward(&layer, r)?.into_data());
    }
    let shape = if batched {
        vec![rows.len(), layer.out_features()]
    } else {
        vec![layer.out_features()]
    };
    let result = IntTensor::new(out, shape)?;
    if let Some(p) = output {
        io::save_i64(p, &result)?;
    }
    if check {
        let width = layer.out_features();
        for (i, r) in rows.iter().enumerate() {
            if let Some(j) = first_mismatch(&layer, r)? {
                println!("FAIL: first mismatch at index {}", i * width + j);
                anyhow::bail!("integer path disagrees with the reference");
            }
        }
        println!("PASS");
    } else {
        let v = json!({"shift": layer.shift(), "output": result.data(), "shape": result.shape()});
        print_json(&v)?;
    }
    Ok(())
}

fn series_prefix(s: &MetricSeries, n: usize) -> anyhow::Result<MetricSeries> {
    let mut out = MetricSeries::new(s.name.clone());
    for (step, v) in s.iter().take(n) {
        out.push(step, v)?;
    }
    Ok(out)
}
