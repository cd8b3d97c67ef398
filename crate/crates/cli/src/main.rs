use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand};
use po2quant::QuantError;

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(
    name = "po2q",
    version,
    about = "Power-of-two scale quantization tools",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Bit width and signedness shared by the tensor commands.
#[derive(Args, Debug, Clone)]
struct QuantArgs {
    #[arg(long)]
    bits: Option<u32>,
    /// Symmetric signed codes (the default).
    #[arg(long, conflicts_with = "unsigned")]
    signed: bool,
    /// Codes in [0, 2^bits - 1].
    #[arg(long)]
    unsigned: bool,
}

impl QuantArgs {
    fn signedness(&self) -> Option<bool> {
        match (self.signed, self.unsigned) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit a power-of-two scale to a tensor by (weighted) least squares.
    FitScale {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
        #[arg(long)]
        n_iters: Option<usize>,
        /// Exponent radius of the local search; 0 disables it.
        #[arg(long)]
        line_search: Option<usize>,
        /// Starting step; defaults to max|w| / q_max.
        #[arg(long)]
        delta_init: Option<f64>,
        /// Outlier threshold in standard deviations, or "inf".
        #[arg(long)]
        sigma_outlier: Option<f64>,
        /// Second-moment tensor used as fitting weights.
        #[arg(long, alias = "gva-moments")]
        gva_state: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Quantize a tensor with a given or fitted power-of-two scale.
    Quantize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        quant: QuantArgs,
        /// Scale exponent; fitted with the default settings when omitted.
        #[arg(long, allow_hyphen_values = true)]
        exponent: Option<i32>,
        /// Write integer codes instead of dequantized reals.
        #[arg(long)]
        codes: bool,
    },
    /// Learn a log2 scale on a fixed tensor with Adam.
    GradFit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        mode: Option<po2quant::RoundingMode>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long, allow_hyphen_values = true)]
        init_delta_log2: Option<f64>,
        /// Step at which the exponent freezes, or "none".
        #[arg(long, value_parser = parse_freeze_at)]
        freeze_at: Option<FreezeAt>,
        /// Signed codes; the only supported form here.
        #[arg(long)]
        signed: bool,
        /// Recorded in the echoed config; the fit itself is deterministic.
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Exponent trajectory of one learned quantizer under input noise.
    ToyRtlm(commands::ToyArgs),
    /// Fixed-input oscillation and freeze experiment.
    ToyConverge(commands::ToyArgs),
    /// Toy quantization-aware training run.
    Qat {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run a single integer-only layer.
    SimulateInt {
        /// Layer description (JSON referencing tensor files).
        #[arg(long)]
        layer: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Compare against the real-valued reference.
        #[arg(long)]
        check: bool,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// A problem with the caller's inputs (exit code 1).
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Invalid>().is_some() || cause.downcast_ref::<serde_json::Error>().is_some() {
            return 1;
        }
        if let Some(q) = cause.downcast_ref::<QuantError>() {
            return if q.is_validation() { 1 } else { 2 };
        }
    }
    2
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::FitScale {
            input,
            quant,
            n_iters,
            line_search,
            delta_init,
            sigma_outlier,
            gva_state,
            config,
        } => {
            let mut cfg: commands::FitScaleConfig = commands::load_config(Default::default(), config.as_deref())?;
            if let Some(b) = quant.bits {
                cfg.bits = b;
            }
            if let Some(s) = quant.signedness() {
                cfg.signed = s;
            }
            if let Some(n) = n_iters {
                cfg.fit.n_iters = n;
            }
            if let Some(n) = line_search {
                cfg.fit.line_search_range = n;
            }
            if delta_init.is_some() {
                cfg.delta_init = delta_init;
            }
            if sigma_outlier.is_some() {
                cfg.fit.sigma_outlier = sigma_outlier;
            }
            if gva_state.is_some() {
                cfg.fit.use_gva = true;
            }
            commands::fit_scale(&input, gva_state.as_deref(), &cfg)
        }
        Command::Quantize {
            input,
            output,
            quant,
            exponent,
            codes,
        } => commands::quantize(
            &input,
            &output,
            quant.bits.unwrap_or(4),
            quant.signedness().unwrap_or(true),
            exponent,
            codes,
        ),
        Command::GradFit {
            input,
            bits,
            mode,
            steps,
            lr,
            init_delta_log2,
            freeze_at,
            signed: _,
            seed,
            out,
            config,
        } => {
            let mut cfg: commands::GradFitConfig = commands::load_config(Default::default(), config.as_deref())?;
            if let Some(b) = bits {
                cfg.bits = b;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            if let Some(l) = lr {
                cfg.lr = l;
            }
            if init_delta_log2.is_some() {
                cfg.init_delta_log2 = init_delta_log2;
            }
            if let Some(FreezeAt(f)) = freeze_at {
                cfg.freeze_at = f;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            commands::grad_fit(&input, out.as_deref(), &cfg)
        }
        Command::ToyRtlm(args) => commands::toy(args, commands::ToyKind::Rtlm),
        Command::ToyConverge(args) => commands::toy(args, commands::ToyKind::Converge),
        Command::Qat {
            config,
            out,
            seed,
            steps,
        } => {
            let mut cfg: commands::QatConfig = commands::load_config(Default::default(), config.as_deref())?;
            if let Some(s) = seed {
                cfg.model.seed = s;
                cfg.data.seed = s;
            }
            if let Some(s) = steps {
                cfg.model.steps = s;
            }
            commands::qat(&out, &cfg)
        }
        Command::SimulateInt {
            layer,
            input,
            check,
            output,
        } => commands::simulate_int(&layer, &input, check, output.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct FreezeAt(Option<usize>);

fn parse_freeze_at(s: &str) -> Result<FreezeAt, String> {
    match s {
        "none" => Ok(FreezeAt(None)),
        n => n.parse().map(|v| FreezeAt(Some(v))).map_err(|e| format!("{e}")),
    }
}

pub fn ensure(cond: bool, msg: impl Into<String>) -> anyhow::Result<()> {
    if !cond {
        bail!(Invalid(msg.into()));
    }
    Ok(())
}
