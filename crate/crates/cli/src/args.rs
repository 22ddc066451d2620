use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::Failure;

#[derive(Parser, Debug)]
#[command(name = "gauss-extremes", version = crate::VERSION, about = "Exceedance asymptotics and Monte Carlo checks for Gaussian processes and fields")]
pub struct Cli {
    /// JSON object of flag values (keys are long flag names); command-line flags win.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Write the result here instead of stdout.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Minimize x^T Sigma^{-1} x subject to x >= b.
    Qpp(QppArgs),
    /// Generalized variance: the reciprocal of the quadratic programming value.
    Genvar(QppArgs),
    /// Pickands, Piterbarg and generalized constants, and the G integral.
    #[command(subcommand)]
    Constant(ConstantCmd),
    /// Double crossing of a scalar process.
    #[command(subcommand)]
    Dc(DcCmd),
    /// Sample paths as CSV.
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Expansion and diagonal-strip diagnostics.
    #[command(subcommand)]
    Verify(VerifyCmd),
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct QppArgs {
    /// Covariance as JSON rows, e.g. '[[1,-0.5],[-0.5,1]]'.
    #[arg(long)]
    pub sigma: String,
    /// Threshold vector, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub b: Vec<f64>,
}

#[derive(Subcommand, Debug)]
pub enum ConstantCmd {
    Pickands(PickandsArgs),
    Piterbarg(PiterbargArgs),
    Generalized(GeneralizedArgs),
    #[command(name = "g-integral")]
    GIntegral(GIntegralArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorArg {
    Ratio,
    Truncated,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationArg {
    Classical,
    UnitVariance,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SupArg {
    Bridge,
    Grid,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum VariantArg {
    Plain,
    HalfDrift,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ConventionArg {
    Display,
    MainTheorem,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum FormatArg {
    Json,
    Csv,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum ModelArg {
    Stationary,
    Fbm,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize, PartialEq, Eq)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeArg {
    Auto,
    Cholesky,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct PickandsArgs {
    /// Exponent 2H in (0, 2].
    #[arg(long = "two-h")]
    pub two_h: f64,
    #[serde(rename = "S")]
    #[arg(long = "S", default_value_t = 16.0)]
    pub s: f64,
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = EstimatorArg::Ratio)]
    pub estimator: EstimatorArg,
    #[arg(long, value_enum, default_value_t = NormalizationArg::Classical)]
    pub normalization: NormalizationArg,
    /// Sup between grid nodes for 2H = 1: exact Brownian-bridge maxima or grid only.
    #[arg(long, value_enum, default_value_t = SupArg::Bridge)]
    pub sup: SupArg,
    /// Also report the change at 2S and at step/2.
    #[arg(long)]
    pub convergence: bool,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct PiterbargArgs {
    /// Drift parameter lambda.
    #[arg(long)]
    pub lambda: f64,
    /// Truncation horizon.
    #[serde(rename = "Lambda")]
    #[arg(long = "Lambda", default_value_t = 20.0)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 0.005)]
    pub step: f64,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// plain: E sup exp(B(t) - lambda t); half-drift: drift (1 + lambda)/2.
    #[arg(long, value_enum, default_value_t = VariantArg::Plain)]
    pub variant: VariantArg,
    #[arg(long, value_enum, default_value_t = SupArg::Bridge)]
    pub sup: SupArg,
}

/// Process model flags shared by several subcommands.
#[derive(Args, Debug, Serialize, Clone)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct ModelFlags {
    /// Scale of the power-exponential correlation exp(-theta t^alpha).
    #[arg(long)]
    pub theta: Option<f64>,
    /// Exponent of the power-exponential correlation.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Hurst index of fractional Brownian motion.
    #[serde(rename = "H")]
    #[arg(long = "H")]
    pub hurst: Option<f64>,
    /// Horizon.
    #[serde(rename = "T")]
    #[arg(long = "T", default_value_t = 1.0)]
    pub horizon: f64,
    /// Upper threshold multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub a: f64,
    /// Lower threshold multiplier.
    #[arg(long, default_value_t = 1.0)]
    pub b: f64,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct GeneralizedArgs {
    /// Build the expansion of this double-crossing model.
    #[arg(long, value_enum)]
    pub model: Option<ModelArg>,
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: ModelFlags,
    /// Expansion data as JSON.
    #[arg(long)]
    pub expansion: Option<PathBuf>,
    /// One-coordinate scalar field: exponent nu.
    #[arg(long)]
    pub nu: Option<f64>,
    /// One-coordinate scalar field: variance coefficient V.
    #[arg(long)]
    pub v: Option<f64>,
    /// One-coordinate scalar field: drift coefficient W.
    #[arg(long)]
    pub w: Option<f64>,
    #[serde(rename = "S")]
    #[arg(long = "S", default_value_t = 8.0)]
    pub s: f64,
    #[serde(rename = "Lambda")]
    #[arg(long = "Lambda", default_value_t = 8.0)]
    pub lambda_max: f64,
    #[arg(long, default_value_t = 0.02)]
    pub step: f64,
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct GIntegralArgs {
    /// Exponents, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub beta: Vec<f64>,
    /// Quadratic form as JSON rows.
    #[arg(long)]
    pub xi: String,
    /// Initial box size in the transformed variables.
    #[arg(long, default_value_t = 8.0)]
    pub cutoff: f64,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
}

#[derive(Subcommand, Debug)]
pub enum DcCmd {
    Stationary(DcArgs),
    Fbm(DcArgs),
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct DcArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: ModelFlags,
    /// Levels, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub u: Vec<f64>,
    /// Closed-form asymptotics (the default when no mode is given).
    #[arg(long)]
    pub asymptotic: bool,
    /// Crude Monte Carlo on a uniform grid.
    #[arg(long)]
    pub mc: bool,
    /// Both, plus the ratio table and verdict.
    #[arg(long)]
    pub compare: bool,
    /// Mean-shift importance sampling instead of crude Monte Carlo (stationary only).
    #[arg(long)]
    pub importance: bool,
    #[arg(long, value_enum, default_value_t = ConventionArg::MainTheorem)]
    pub convention: ConventionArg,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1.0 / 1024.0)]
    pub step: f64,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pickands constant value, in the normalization given by --pickands-normalization.
    #[arg(long)]
    pub pickands: Option<f64>,
    #[arg(long = "pickands-se", default_value_t = 0.0)]
    pub pickands_se: f64,
    #[arg(long = "pickands-normalization", value_enum, default_value_t = NormalizationArg::Classical)]
    pub pickands_normalization: NormalizationArg,
    /// Piterbarg constants, comma separated, overriding the closed forms.
    #[arg(long, value_delimiter = ',')]
    pub piterbarg: Option<Vec<f64>>,
    /// Estimate a missing Pickands constant by Monte Carlo (needs --seed).
    #[arg(long = "estimate-constants")]
    pub estimate_constants: bool,
    #[serde(rename = "const-S")]
    #[arg(long = "const-S", default_value_t = 16.0)]
    pub const_s: f64,
    #[arg(long = "const-step", default_value_t = 0.01)]
    pub const_step: f64,
    #[arg(long = "const-paths", default_value_t = 100_000)]
    pub const_paths: usize,
    /// csv writes the comparison table (with --compare).
    #[arg(long, value_enum, default_value_t = FormatArg::Json)]
    pub format: FormatArg,
}

#[derive(Subcommand, Debug)]
pub enum SimulateCmd {
    Fbm(SimulateArgs),
    Stationary(SimulateArgs),
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct SimulateArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: ModelFlags,
    /// Number of grid steps on [0, T].
    #[arg(long)]
    pub steps: Option<usize>,
    /// Grid step (alternative to --steps).
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long, default_value_t = 10)]
    pub paths: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum, default_value_t = SchemeArg::Auto)]
    pub scheme: SchemeArg,
    #[arg(long, value_enum, default_value_t = FormatArg::Csv)]
    pub format: FormatArg,
}

#[derive(Subcommand, Debug)]
pub enum VerifyCmd {
    Expansion(VerifyExpansionArgs),
    Diagonal(VerifyDiagonalArgs),
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct VerifyExpansionArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: ModelFlags,
    /// Probe radii, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.01,0.001")]
    pub radii: Vec<f64>,
    #[arg(long, default_value_t = 16)]
    pub directions: usize,
    #[arg(long = "probe-seed", default_value_t = 1)]
    pub probe_seed: u64,
    /// Radius for the finite-difference extraction of Xi.
    #[arg(long, default_value_t = 1e-3)]
    pub radius: f64,
}

#[derive(Args, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
#[command(allow_negative_numbers = true)]
pub struct VerifyDiagonalArgs {
    #[arg(long, value_enum)]
    pub model: ModelArg,
    #[command(flatten)]
    #[serde(flatten)]
    pub flags: ModelFlags,
    /// Strip half-width.
    #[arg(long, default_value_t = 0.05)]
    pub eps: f64,
    #[arg(long, value_delimiter = ',', required = true)]
    pub u: Vec<f64>,
    #[arg(long, default_value_t = 100_000)]
    pub paths: usize,
    #[arg(long, default_value_t = 1.0 / 1024.0)]
    pub step: f64,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Appends `--key=value` for every key of the `--config` JSON object whose flag is not
/// already on the command line.
pub fn merge_config(mut argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let mut path = None;
    for (i, a) in argv.iter().enumerate() {
        if a == "--config" {
            path = Some(argv.get(i + 1).cloned().ok_or_else(|| Failure::usage("--config needs a file"))?);
        } else if let Some(p) = a.strip_prefix("--config=") {
            path = Some(p.to_string());
        }
    }
    let Some(path) = path else { return Ok(argv) };
    let text = std::fs::read_to_string(&path).map_err(|e| Failure::usage(format!("--config {path}: {e}")))?;
    let obj: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| Failure::usage(format!("--config {path}: {e}")))?;
    for (key, value) in obj {
        let flag = format!("--{key}");
        let given = argv.iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")));
        if given {
            continue;
        }
        use serde_json::Value;
        match value {
            Value::Bool(true) => argv.push(flag),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => argv.push(format!("{flag}={s}")),
            Value::Number(n) => argv.push(format!("{flag}={n}")),
            Value::Array(items) if items.iter().all(|v| v.is_number()) => {
                let list: Vec<String> = items.iter().map(|v| v.to_string()).collect();
                argv.push(format!("{flag}={}", list.join(",")));
            }
            other => argv.push(format!("{flag}={other}")),
        }
    }
    Ok(argv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn config_fills_missing_flags_only() {
        let dir = std::env::temp_dir().join(format!("ge-config-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        std::fs::write(&path, r#"{"S": 4, "seed": 3, "u": [2, 3], "mc": true, "sigma": [[1, 0], [0, 1]]}"#).unwrap();
        let argv: Vec<String> =
            ["ge", "x", "--config", path.to_str().unwrap(), "--seed", "9"].iter().map(|s| s.to_string()).collect();
        let out = merge_config(argv).unwrap();
        assert!(out.contains(&"--S=4".to_string()));
        assert!(out.contains(&"--u=2,3".to_string()));
        assert!(out.contains(&"--mc".to_string()));
        assert!(out.contains(&"--sigma=[[1,0],[0,1]]".to_string()));
        assert!(!out.iter().any(|a| a.starts_with("--seed=")));
    }
}
