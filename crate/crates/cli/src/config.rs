//! Subcommand parameters and the JSON config file that can supply them.
//!
//! Every field is optional on the command line. A value given as a flag wins
//! over the same value in the config file; anything still missing falls back
//! to the library default when the subcommand is prepared.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use layerfuse_core::{DType, EulerConvention, LayerPatterns, MergeMode, RatioBase, Task};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Contents of a `--config` file: one section per subcommand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub threads: Option<usize>,
    pub gen_fixture: GenFixtureArgs,
    pub merge: MergeArgs,
    pub similarity: SimilarityArgs,
    pub eval: EvalArgs,
    pub validate: ValidateArgs,
    pub mix: MixArgs,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

macro_rules! layered {
    ($ty:ident { $($opt:ident),* } flags { $($flag:ident),* } lists { $($list:ident),* }) => {
        impl $ty {
            /// Fills unset fields from `file`.
            pub fn over(self, file: Self) -> Self {
                Self {
                    $($opt: self.$opt.or(file.$opt),)*
                    $($flag: self.$flag || file.$flag,)*
                    $($list: if self.$list.is_empty() { file.$list } else { self.$list },)*
                }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeArg {
    F32,
    F16,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F16 => DType::F16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Wta,
    Ta,
}

impl From<ModeArg> for MergeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Wta => MergeMode::Wta,
            ModeArg::Ta => MergeMode::TaskArithmetic,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskArg {
    Hpe,
    Bbox,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Hpe => Task::Angle,
            TaskArg::Bbox => Task::BBox,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParserArg {
    Strict,
    Loose,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConventionArg {
    Zyx,
    Xyz,
}

impl From<ConventionArg> for EulerConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::Zyx => EulerConvention::Zyx,
            ConventionArg::Xyz => EulerConvention::Xyz,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioOfArg {
    Pool,
    Task,
}

impl From<RatioOfArg> for RatioBase {
    fn from(r: RatioOfArg) -> Self {
        match r {
            RatioOfArg::Pool => RatioBase::Pool,
            RatioOfArg::Task => RatioBase::Task,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenFixtureArgs {
    /// JSON object mapping tensor names to {"dtype", "shape"}.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Transformer blocks for the built-in layout (used without --spec).
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    /// MLP width; defaults to 4 × hidden.
    #[arg(long)]
    pub ffn: Option<usize>,
    #[arg(long, value_enum)]
    pub dtype: Option<DTypeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Instead of generating, add seeded uniform noise to this checkpoint.
    #[arg(long)]
    pub perturb: Option<PathBuf>,
    /// Noise amplitude for --perturb.
    #[arg(long)]
    pub noise: Option<f32>,
    /// Ramp the noise linearly over the mergeable layers, up to --noise.
    #[arg(long)]
    pub graded: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Report destination (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

layered!(GenFixtureArgs { spec, blocks, hidden, ffn, dtype, seed, perturb, noise, out, report } flags { graded } lists {});

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub other: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Similarity at or above which the other model's layer is taken.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Fraction of lowest-similarity layers always kept from the base.
    #[arg(long)]
    pub safeguard: Option<f64>,
    /// Task-arithmetic weight.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eps: Option<f64>,
    /// Glob selecting mergeable layers; repeatable. Replaces the defaults.
    #[arg(long = "pattern")]
    pub patterns: Vec<String>,
    /// Kind-tagged pattern sets (config file only).
    #[arg(skip)]
    pub layer_patterns: Option<LayerPatterns>,
    /// LoRA adapters (`<layer>.lora_A` / `.lora_B`) folded into the base first.
    #[arg(long)]
    pub base_adapters: Option<PathBuf>,
    #[arg(long)]
    pub other_adapters: Option<PathBuf>,
    #[arg(long)]
    pub lora_scale: Option<f64>,
    /// JSON report destination (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Per-layer replacement table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

layered!(MergeArgs {
    base, other, out, mode, threshold, safeguard, lambda, eps, layer_patterns,
    base_adapters, other_adapters, lora_scale, report, csv
} flags {} lists { patterns });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityArgs {
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub other: Option<PathBuf>,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long = "pattern")]
    pub patterns: Vec<String>,
    #[arg(skip)]
    pub layer_patterns: Option<LayerPatterns>,
    /// JSON report destination (stdout when omitted).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

layered!(SimilarityArgs { base, other, eps, layer_patterns, report, csv } flags {} lists { patterns });

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    /// JSONL of {"id", "response"}.
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// JSONL of {"id", "yaw", "pitch", "roll"} or {"id", "bbox": [x0, y0, x1, y1]}.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub parser: Option<ParserArg>,
    #[arg(long, value_enum)]
    pub convention: Option<ConventionArg>,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

layered!(EvalArgs { task, responses, truth, parser, convention, report, csv } flags {} lists {});

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidateArgs {
    /// JSONL of {"response"} with an optional "task" ("hpe" or "bbox").
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Task for lines that do not name one.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub recycle_cap: Option<usize>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

layered!(ValidateArgs { input, task, recycle_cap, report } flags {} lists {});

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixArgs {
    /// New-task manifest (JSONL of {"id", "source"}).
    #[arg(long)]
    pub task: Option<PathBuf>,
    /// Rehearsal pool manifest; repeatable.
    #[arg(long = "pool")]
    pub pools: Vec<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Whether the ratio is a fraction of each pool or of the task manifest.
    #[arg(long, value_enum)]
    pub ratio_of: Option<RatioOfArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub shuffle: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub report: Option<PathBuf>,
}

layered!(MixArgs { task, ratio, ratio_of, seed, out, report } flags { shuffle } lists { pools });

/// Unwraps a required path or reports which flag is missing.
pub(crate) fn required(value: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required argument --{flag}")))
}

/// Flags override the file's kind-tagged sets, which override the defaults.
pub(crate) fn pick_patterns(flags: Vec<String>, file: Option<LayerPatterns>) -> Result<LayerPatterns, CliError> {
    let patterns = if !flags.is_empty() {
        LayerPatterns::custom(flags)
    } else {
        file.unwrap_or_default()
    };
    patterns.validate().map_err(CliError::rejected)?;
    Ok(patterns)
}

pub(crate) fn check_eps(eps: Option<f64>) -> Result<f64, CliError> {
    let eps = eps.unwrap_or(layerfuse_core::similarity::DEFAULT_EPS);
    if !(eps.is_finite() && eps > 0.0) {
        return Err(CliError::invalid(format!("eps must be positive and finite, got {eps}")));
    }
    Ok(eps)
}
