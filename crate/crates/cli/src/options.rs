//! Command options. Flags win over values read from `--config`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use blockquant::model::Granularity;
use blockquant::recon::FirstLastPolicy;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

fn parse_first_last(s: &str) -> Result<FirstLastPolicy, String> {
    match s {
        "8" => Ok(FirstLastPolicy::Eight),
        "follow" => Ok(FirstLastPolicy::Follow),
        _ => Err(format!("expected 8 or follow, got {s}")),
    }
}

fn parse_granularity(s: &str) -> Result<Granularity, String> {
    s.parse::<Granularity>().map_err(|e| e.to_string())
}

fn parse_delta(s: &str) -> Result<f64, String> {
    match s {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => s.parse::<f64>().map_err(|e| e.to_string()),
    }
}

/// Reads a JSON options file; missing keys stay unset.
pub fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(path)
        .map_err(|e| blockquant::Error::Load { path: path.to_path_buf(), message: e.to_string() })?;
    let value = serde_json::from_str(&text)
        .map_err(|e| blockquant::Error::Load { path: path.to_path_buf(), message: e.to_string() })
        .with_context(|| "reading config")?;
    Ok(value)
}

macro_rules! overlay {
    ($cli:expr, $file:expr, $($field:ident),+) => {
        $( if $cli.$field.is_none() { $cli.$field = $file.$field.take(); } )+
    };
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateOpts {
    /// Model directory (holding manifest.json).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Calibration dataset (.bqtd).
    #[arg(long)]
    pub calib: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON file with any of these options.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Weight bit widths, comma separated; `2,4,8` also writes sensitivities.
    #[arg(long, value_delimiter = ',')]
    pub bits: Option<Vec<u32>>,
    #[arg(long)]
    pub act_bits: Option<u32>,
    #[arg(long, value_parser = parse_granularity)]
    pub granularity: Option<Granularity>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub calib_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub profile: Option<Profile>,
    /// `8` keeps the first and last layers at 8 bits; `follow` uses `--bits`.
    #[arg(long, value_parser = parse_first_last)]
    pub first_last_bits: Option<FirstLastPolicy>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr_round: Option<f64>,
    #[arg(long)]
    pub lr_step: Option<f64>,
    /// Rounding regularizer weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Per-layer bits from a search result, instead of `--bits`.
    #[arg(long)]
    pub bit_config: Option<PathBuf>,
    /// Labeled dataset to report accuracy on.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Feed each unit FP inputs rather than the partially quantized model's.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub fp_inputs: Option<bool>,
    /// Plain squared error instead of gradient weighting.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_fisher: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub per_channel: Option<bool>,
}

impl CalibrateOpts {
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        let mut file: Self = read_config(self.config.as_deref())?;
        overlay!(
            self, file, model, calib, out, bits, act_bits, granularity, iters, calib_size, seed, profile,
            first_last_bits, batch, lr_round, lr_step, lambda, bit_config, eval, fp_inputs, no_fisher, per_channel
        );
        Ok(self)
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchOpts {
    /// Sensitivity table written by `calibrate --bits 2,4,8`.
    #[arg(long)]
    pub sensitivity: Option<PathBuf>,
    /// Hardware lookup table.
    #[arg(long)]
    pub hardware: Option<PathBuf>,
    /// Budget in the table's unit (ms or MB); `inf` for none.
    #[arg(long, value_parser = parse_delta)]
    pub delta: Option<f64>,
    /// Budget as a multiple of the all-2-bit cost.
    #[arg(long)]
    pub delta_scale: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub population: Option<usize>,
    #[arg(long)]
    pub generations: Option<usize>,
    #[arg(long)]
    pub mutation: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also enumerate the whole space (at most 12 layers).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub exhaustive: Option<bool>,
}

impl SearchOpts {
    pub fn resolve(mut self) -> anyhow::Result<Self> {
        let mut file: Self = read_config(self.config.as_deref())?;
        overlay!(
            self, file, sensitivity, hardware, delta, delta_scale, out, population, generations, mutation, topk, seed,
            exhaustive
        );
        Ok(self)
    }
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct EvalOpts {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Write the JSON report here as well.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate without activation quantizers.
    #[arg(long)]
    pub fp_activations: bool,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct VerifyOpts {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset the model was fitted on.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Seed of the perturbation direction.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureOpts {
    #[arg(long, default_value = "fixtures")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
