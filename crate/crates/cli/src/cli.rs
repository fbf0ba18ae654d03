use std::path::PathBuf;

use archlab_core::arch::{Family, Ratio, Variant};
use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::Preset;

/// Train transformer variants and measure where their computation happens.
#[derive(Debug, Parser)]
#[command(name = "archlab", version)]
pub struct Cli {
    /// TOML run configuration. Relative paths inside it are resolved from
    /// its directory.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration, used when no --config is given (default: desk).
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output root; falls back to $ARCHLAB_OUT, then the config's output_dir.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model.
    Pretrain(PretrainArgs),
    /// Train CAA models over outer-width ratios and relate ratio to
    /// outer-FFN contribution.
    Sweep(SweepArgs),
    /// TP/MI contribution analysis of one model.
    Analyze(AnalyzeArgs),
    /// OOD loss or multiple-choice accuracy of one model.
    Eval(EvalArgs),
    /// Pick the checkpoint of each run closest to a common dev loss.
    Align(AlignArgs),
    /// Aligned comparison table over several runs.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum FamilyArg {
    Gpt,
    Bert,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Gpt => Family::Gpt,
            FamilyArg::Bert => Family::Bert,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Vanilla,
    FfnWider,
    Caa,
    /// CAA at the family's combination-enhanced ratio.
    Cea,
    /// CAA at the family's alternate aligned ratio.
    CaaAligned,
    Moe,
    MoeCea,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Vanilla => Variant::Vanilla,
            VariantArg::FfnWider => Variant::FfnWider,
            VariantArg::Caa | VariantArg::Cea | VariantArg::CaaAligned => Variant::Caa,
            VariantArg::Moe => Variant::Moe,
            VariantArg::MoeCea => Variant::MoeCea,
        }
    }
}

fn parse_ratio(s: &str) -> Result<Ratio, String> {
    s.parse().map_err(|e: archlab_core::LabError| e.to_string())
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// Model family (presets only).
    #[arg(long, value_enum)]
    pub family: Option<FamilyArg>,
    /// Architecture variant (presets only).
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    /// Outer-FFN width ratio such as 3/8 or 0.375; implies CAA.
    #[arg(long, value_parser = parse_ratio)]
    pub ratio: Option<Ratio>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Run name; defaults to family and variant.
    #[arg(long)]
    pub name: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct AlignFlags {
    /// Target dev loss; the highest final dev loss among the runs by default.
    #[arg(long)]
    pub target: Option<f64>,
    /// Largest accepted relative residual.
    #[arg(long)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelFlags,
    /// Comma-separated ratios, e.g. 1,3/4,1/2,0.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio)]
    pub ratios: Option<Vec<Ratio>>,
    /// Runs trained at the same time.
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[command(flatten)]
    pub flags: AlignFlags,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub print_config: bool,
}

#[derive(Debug, Args)]
pub struct SourceArgs {
    /// Run directory written by pretrain or sweep.
    #[arg(long, conflicts_with = "checkpoint")]
    pub run: Option<PathBuf>,
    /// Evaluated step of the run; the last one by default.
    #[arg(long, requires = "run")]
    pub step: Option<u64>,
    /// Checkpoint file; data come from --config or --preset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Tp,
    Mi,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DocsArg {
    Dev,
    Train,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    pub source: SourceArgs,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    /// Documents traced through the model.
    #[arg(long, value_enum, default_value = "dev")]
    pub docs: DocsArg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum WhichEval {
    Ood,
    Fewshot,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub which: WhichEval,
    #[command(flatten)]
    pub source: SourceArgs,
    /// Scoring mode for fewshot, e.g. option+len, or auto.
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    pub flags: AlignFlags,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    #[command(flatten)]
    pub flags: AlignFlags,
    /// Skip the MI analysis.
    #[arg(long)]
    pub no_mi: bool,
}
