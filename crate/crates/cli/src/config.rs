//! The TOML run configuration, presets and validation.

use std::path::{Path, PathBuf};

use archlab_core::analysis::AnalysisConfig;
use archlab_core::arch::{ArchSpec, Family, Ratio, Variant};
use archlab_core::data::{load_corpus_dir, Corpus, DomainRole, Manifest, Tokenizer};
use archlab_core::eval::{FewShotConfig, ScoringMode};
use archlab_core::train::{TrainConfig, DEFAULT_ALIGN_THRESHOLD};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const OUT_ENV: &str = "ARCHLAB_OUT";
pub const DEFAULT_MANIFEST: &str = "data/toy/manifest.toml";

/// A configuration problem. Reported with exit code 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn fail<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperSmall,
    PaperLarge,
    MoeDesk,
}

impl Preset {
    pub fn arch(self, family: Family, variant: Variant) -> ArchSpec {
        match self {
            Preset::Desk => ArchSpec::desk(family, variant, 0),
            Preset::PaperSmall => ArchSpec::paper_small(family, variant),
            Preset::PaperLarge => ArchSpec::paper_large(family, variant),
            Preset::MoeDesk => ArchSpec::moe_desk(variant, 0),
        }
    }

    pub fn train(self) -> TrainConfig {
        match self {
            Preset::Desk => TrainConfig::desk(),
            Preset::MoeDesk => TrainConfig::desk_moe(),
            Preset::PaperSmall | Preset::PaperLarge => TrainConfig::paper(),
        }
    }

    pub fn analysis(self) -> AnalysisConfig {
        match self {
            Preset::Desk | Preset::MoeDesk => AnalysisConfig::desk(),
            Preset::PaperSmall | Preset::PaperLarge => AnalysisConfig::paper(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Path of the corpus `manifest.toml`; domain files sit next to it.
    pub manifest: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// OOD domains to evaluate. Absent means every `ood` domain of the
    /// manifest; an empty list disables OOD evaluation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood_domains: Option<Vec<String>>,
    #[serde(default = "default_ood_rows")]
    pub ood_max_rows: usize,
    /// JSONL multiple-choice tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq_tasks: Option<PathBuf>,
    /// JSONL demonstrations, disjoint from the tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub demo_pool: Option<PathBuf>,
    #[serde(default = "FewShotConfig::zero_shot")]
    pub fewshot: FewShotConfig,
    /// `auto` (picked on the demo pool) or a mode such as `option+len`.
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_ood_rows() -> usize {
    256
}

fn default_mode() -> String {
    "auto".into()
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ood_domains: None,
            ood_max_rows: default_ood_rows(),
            mcq_tasks: None,
            demo_pool: None,
            fewshot: FewShotConfig::zero_shot(),
            mode: default_mode(),
        }
    }
}

impl EvalConfig {
    /// `None` for `auto`.
    pub fn scoring_mode(&self) -> Result<Option<ScoringMode>, ConfigError> {
        if self.mode == "auto" {
            return Ok(None);
        }
        match ScoringMode::grid()
            .into_iter()
            .find(|m| m.to_string() == self.mode)
        {
            Some(m) => Ok(Some(m)),
            None => {
                let names: Vec<String> = ScoringMode::grid().iter().map(|m| m.to_string()).collect();
                fail(format!(
                    "eval.mode: unknown mode {:?}; expected auto or one of {}",
                    self.mode,
                    names.join(", ")
                ))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    #[serde(default = "default_ratios")]
    pub ratios: Vec<Ratio>,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// Largest relative dev-loss residual accepted at alignment.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Alignment target; the highest final dev loss when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
}

pub fn default_ratios() -> Vec<Ratio> {
    ["1", "7/8", "3/4", "5/8", "1/2", "3/8", "1/4", "1/8", "0"]
        .iter()
        .map(|r| r.parse().expect("valid ratio literal"))
        .collect()
}

fn default_parallelism() -> usize {
    1
}

fn default_threshold() -> f64 {
    DEFAULT_ALIGN_THRESHOLD
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ratios: default_ratios(),
            parallelism: default_parallelism(),
            threshold: default_threshold(),
            target: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Every random stream (initialization, batches, masking, clustering,
    /// demonstrations) derives from this seed.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub arch: ArchSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub sweep: SweepSpec,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn preset(preset: Preset, family: Family, variant: Variant) -> Self {
        let manifest = PathBuf::from(DEFAULT_MANIFEST);
        let dir = manifest.parent().unwrap_or(Path::new("."));
        let existing = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: default_output_dir(),
            arch: ArchSpec {
                // sized from the corpus tokenizer at load time
                vocab: 0,
                ..preset.arch(family, variant)
            },
            train: preset.train(),
            analysis: preset.analysis(),
            eval: EvalConfig {
                mcq_tasks: existing("tasks.jsonl"),
                demo_pool: existing("demos.jsonl"),
                ..EvalConfig::default()
            },
            sweep: SweepSpec::default(),
            data: DataConfig { manifest },
        }
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError(format!("{origin}: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.data.manifest);
        rebase(&mut cfg.output_dir);
        if let Some(p) = cfg.eval.mcq_tasks.as_mut() {
            rebase(p);
        }
        if let Some(p) = cfg.eval.demo_pool.as_mut() {
            rebase(p);
        }
        Ok(cfg)
    }

    /// Copies the top-level seed into every component that carries one.
    pub fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.eval.fewshot.seed = self.seed;
    }

    /// Checks everything that does not need the corpus.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return fail(format!(
                "schema_version: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if !self.data.manifest.is_file() {
            return fail(format!(
                "data.manifest: {} does not exist",
                self.data.manifest.display()
            ));
        }
        let mut arch = self.arch.clone();
        if arch.vocab == 0 {
            // checked against the tokenizer once the corpus is loaded
            arch.vocab = 1 << 16;
        }
        arch.validate().map_err(|e| ConfigError(format!("arch: {e}")))?;
        self.train
            .validate()
            .map_err(|e| ConfigError(format!("train: {e}")))?;
        if self.train.seq > self.arch.max_seq {
            return fail(format!(
                "train.seq: {} exceeds arch.max_seq {}",
                self.train.seq, self.arch.max_seq
            ));
        }
        let a = &self.analysis;
        for (name, v) in [
            ("analysis.k", a.k),
            ("analysis.batch_size", a.batch_size),
            ("analysis.sample_budget", a.sample_budget),
            ("analysis.min_count", a.min_count),
        ] {
            if v == 0 {
                return fail(format!("{name}: must be positive"));
            }
        }
        for (name, p) in [
            ("eval.mcq_tasks", &self.eval.mcq_tasks),
            ("eval.demo_pool", &self.eval.demo_pool),
        ] {
            if let Some(p) = p {
                if !p.is_file() {
                    return fail(format!("{name}: {} does not exist", p.display()));
                }
            }
        }
        if self.eval.ood_max_rows == 0 {
            return fail("eval.ood_max_rows: must be positive");
        }
        if self.eval.fewshot.repeats == 0 {
            return fail("eval.fewshot.repeats: must be positive");
        }
        self.eval.scoring_mode()?;
        let s = &self.sweep;
        if s.ratios.is_empty() {
            return fail("sweep.ratios: must list at least one ratio");
        }
        for (i, r) in s.ratios.iter().enumerate() {
            let mut spec = arch.clone().with_outer_ratio(*r);
            spec.vocab = arch.vocab;
            spec.validate()
                .map_err(|e| ConfigError(format!("sweep.ratios[{i}] = {r}: {e}")))?;
        }
        if s.parallelism == 0 {
            return fail("sweep.parallelism: must be positive");
        }
        if !(s.threshold >= 0.0 && s.threshold.is_finite()) {
            return fail("sweep.threshold: must be a non-negative number");
        }
        if let Some(t) = s.target {
            if !(t > 0.0 && t.is_finite()) {
                return fail("sweep.target: must be a positive number");
            }
        }
        Ok(())
    }
}

/// A validated configuration with its corpus and tokenizer.
pub struct Loaded {
    pub config: RunConfig,
    pub manifest: Manifest,
    pub corpus: Corpus,
    pub tok: Tokenizer,
}

impl Loaded {
    /// Validates `config`, loads the corpus, sizes the vocabulary and keeps
    /// only the selected OOD domains.
    pub fn new(mut config: RunConfig) -> Result<Self, ConfigError> {
        config.propagate_seed();
        config.validate()?;
        let dir = config
            .data
            .manifest
            .parent()
            .unwrap_or(Path::new("."))
            .to_path_buf();
        let (manifest, mut corpus) = load_corpus_dir(&dir)
            .map_err(|e| ConfigError(format!("data.manifest: {e}")))?;
        let tok = Tokenizer::char_level(corpus.all_texts());
        match config.arch.vocab {
            0 => config.arch.vocab = tok.vocab_size(),
            v if v != tok.vocab_size() => {
                return fail(format!(
                    "arch.vocab: {v} does not match the corpus tokenizer size {}; omit it to use the corpus size",
                    tok.vocab_size()
                ))
            }
            _ => {}
        }
        if let Some(wanted) = &config.eval.ood_domains {
            for name in wanted {
                if manifest.domains.get(name) != Some(&DomainRole::Ood) {
                    return fail(format!(
                        "eval.ood_domains: {name:?} is not an ood domain of the corpus"
                    ));
                }
            }
            corpus.ood.retain(|name, _| wanted.contains(name));
        }
        Ok(Self {
            config,
            manifest,
            corpus,
            tok,
        })
    }
}

/// Output root: `--out`, then the environment variable, then the config.
pub fn output_root(flag: Option<&Path>, config: &RunConfig) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => config.output_dir.clone(),
    }
}
