use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::csv_err;
use crate::arch::{log_softmax_at, Family, Model, TokenBatch};
use crate::data::{Tokenizer, BOS};
use crate::error::{LabError, Result};
use crate::rng::SeededRng;

pub const DEFAULT_UNCONDITIONAL_CONTEXT: &str = "Answer:";
/// Fraction of skipped (overlong) prompts above which a run fails.
pub const MAX_SKIPPED_FRACTION: f64 = 0.10;
const DEMO_SEPARATOR: &str = "\n";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct McqTask {
    pub context: String,
    pub options: Vec<String>,
    pub answer_index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unconditional_context: Option<String>,
}

impl McqTask {
    pub fn validate(&self) -> Result<()> {
        if self.options.len() < 2 || self.answer_index >= self.options.len() {
            return Err(LabError::Invalid(format!(
                "task needs at least two options and a valid answer, got {} options and answer {}",
                self.options.len(),
                self.answer_index
            )));
        }
        Ok(())
    }

    /// The demonstration text: context followed by the correct option.
    pub fn demonstration(&self) -> String {
        format!("{}{}", self.context, self.options[self.answer_index])
    }
}

/// One task per line, JSON encoded.
pub fn read_tasks(path: &Path) -> Result<Vec<McqTask>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: McqTask = serde_json::from_str(&line)
            .map_err(|e| LabError::Format(format!("{}:{}: {e}", path.display(), i + 1)))?;
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_tasks(path: &Path, tasks: &[McqTask]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for t in tasks {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Span {
    OptionOnly,
    FullSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoringMode {
    pub span: Span,
    pub length_norm: bool,
    pub unconditional_norm: bool,
}

impl ScoringMode {
    pub const fn new(span: Span, length_norm: bool, unconditional_norm: bool) -> Self {
        Self {
            span,
            length_norm,
            unconditional_norm,
        }
    }

    pub fn is_valid(&self) -> bool {
        !self.unconditional_norm || self.span == Span::OptionOnly
    }

    /// Every valid mode, in the order used to break ties.
    pub fn grid() -> [ScoringMode; 6] {
        [
            Self::new(Span::OptionOnly, false, false),
            Self::new(Span::OptionOnly, true, false),
            Self::new(Span::FullSequence, false, false),
            Self::new(Span::FullSequence, true, false),
            Self::new(Span::OptionOnly, false, true),
            Self::new(Span::OptionOnly, true, true),
        ]
    }
}

impl std::fmt::Display for ScoringMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let span = match self.span {
            Span::OptionOnly => "option",
            Span::FullSequence => "full",
        };
        write!(f, "{span}")?;
        if self.length_norm {
            write!(f, "+len")?;
        }
        if self.unconditional_norm {
            write!(f, "+uncond")?;
        }
        Ok(())
    }
}

/// Log-probability sums from which every mode's score follows.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptionLogProbs {
    pub option: f64,
    pub option_tokens: usize,
    /// Everything after BOS: prompt plus option.
    pub full: f64,
    pub full_tokens: usize,
    /// The option after the unconditional context.
    pub unconditional: f64,
}

impl OptionLogProbs {
    pub fn score(&self, mode: ScoringMode) -> Result<f64> {
        if !mode.is_valid() {
            return Err(LabError::Invalid(format!(
                "scoring mode {mode} is not a valid combination"
            )));
        }
        let (mut s, n) = match mode.span {
            Span::OptionOnly => (self.option, self.option_tokens),
            Span::FullSequence => (self.full, self.full_tokens),
        };
        if mode.unconditional_norm {
            s -= self.unconditional;
        }
        if mode.length_norm {
            s /= n as f64;
        }
        Ok(s)
    }
}

/// Scores options with a causal model.
pub struct Scorer<'a> {
    pub model: &'a Model,
    pub tok: &'a Tokenizer,
    pub unconditional_context: String,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a Model, tok: &'a Tokenizer) -> Result<Self> {
        if model.spec.family != Family::Gpt {
            return Err(LabError::Invalid(
                "option scoring needs a causal model".into(),
            ));
        }
        Ok(Self {
            model,
            tok,
            unconditional_context: DEFAULT_UNCONDITIONAL_CONTEXT.to_string(),
        })
    }

    /// `log p(ids[t] | ids[..t])` for every `t ≥ 1`.
    fn token_logprobs(&self, ids: Vec<usize>) -> Result<Vec<f64>> {
        let n = ids.len();
        if n > self.model.spec.max_seq {
            return Err(LabError::SequenceTooLong {
                len: n,
                max: self.model.spec.max_seq,
            });
        }
        let out = self
            .model
            .forward(&TokenBatch::single(ids.clone())?, None)?;
        let v = self.model.spec.vocab;
        Ok((1..n)
            .map(|t| log_softmax_at(&out.logits.data()[(t - 1) * v..t * v], ids[t]))
            .collect())
    }

    fn with_bos(&self, parts: &[&str]) -> Vec<usize> {
        let mut ids = vec![BOS];
        for p in parts {
            ids.extend(self.tok.encode(p));
        }
        ids
    }

    pub fn logprobs(
        &self,
        prompt: &str,
        option: &str,
        unconditional_context: Option<&str>,
    ) -> Result<OptionLogProbs> {
        let opt = self.tok.encode(option);
        if opt.is_empty() {
            return Err(LabError::Invalid("option encodes to no tokens".into()));
        }
        let mut ids = self.with_bos(&[prompt]);
        ids.extend(&opt);
        let lp = self.token_logprobs(ids)?;
        let k = opt.len();
        let mut uncond =
            self.with_bos(&[unconditional_context.unwrap_or(&self.unconditional_context)]);
        uncond.extend(&opt);
        let ulp = self.token_logprobs(uncond)?;
        let full_tokens = lp.len();
        let full = lp.iter().sum();
        let option_lp = lp[full_tokens - k..].iter().sum();
        let unconditional = ulp[ulp.len() - k..].iter().sum();
        Ok(OptionLogProbs {
            option: option_lp,
            option_tokens: k,
            full,
            full_tokens,
            unconditional,
        })
    }

    /// Higher is better.
    pub fn score_option(&self, context: &str, option: &str, mode: ScoringMode) -> Result<f64> {
        self.logprobs(context, option, None)?.score(mode)
    }

    fn task_logprobs(&self, prompt: &str, task: &McqTask) -> Result<Vec<OptionLogProbs>> {
        task.options
            .iter()
            .map(|o| self.logprobs(prompt, o, task.unconditional_context.as_deref()))
            .collect()
    }
}

/// Index of the highest score; the lowest index wins ties.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotConfig {
    pub k_shots: usize,
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub shuffle_demos: bool,
}

impl FewShotConfig {
    pub fn zero_shot() -> Self {
        Self {
            k_shots: 0,
            repeats: 1,
            seed: 0,
            shuffle_demos: false,
        }
    }

    /// One demonstration, ten repetitions.
    pub fn one_shot() -> Self {
        Self {
            k_shots: 1,
            repeats: 10,
            ..Self::zero_shot()
        }
    }

    /// Five demonstrations, five repetitions.
    pub fn five_shot() -> Self {
        Self {
            k_shots: 5,
            repeats: 5,
            ..Self::zero_shot()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqRecord {
    pub task_id: usize,
    pub repeat: usize,
    pub predicted: usize,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McqResult {
    pub mode: ScoringMode,
    pub accuracy: f64,
    pub per_repeat: Vec<f64>,
    pub skipped: usize,
    pub attempted: usize,
    pub records: Vec<McqRecord>,
}

impl McqResult {
    /// Columns `task_id,repeat,predicted,correct,span,length_norm,unconditional_norm`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record([
            "task_id",
            "repeat",
            "predicted",
            "correct",
            "span",
            "length_norm",
            "unconditional_norm",
        ])
        .map_err(csv_err)?;
        let span = match self.mode.span {
            Span::OptionOnly => "option_only",
            Span::FullSequence => "full_sequence",
        };
        for r in &self.records {
            w.write_record([
                r.task_id.to_string(),
                r.repeat.to_string(),
                r.predicted.to_string(),
                r.correct.to_string(),
                span.to_string(),
                self.mode.length_norm.to_string(),
                self.mode.unconditional_norm.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Demonstrations drawn for one repeat.
pub fn draw_demos<'t>(
    pool: &'t [McqTask],
    cfg: &FewShotConfig,
    repeat: usize,
) -> Result<Vec<&'t McqTask>> {
    if cfg.k_shots > pool.len() {
        return Err(LabError::Invalid(format!(
            "{} demonstrations requested from a pool of {}",
            cfg.k_shots,
            pool.len()
        )));
    }
    let mut rng = SeededRng::new(cfg.seed, "fewshot").substream(&repeat.to_string());
    let mut idx = rng.sample_indices(pool.len(), cfg.k_shots);
    if cfg.shuffle_demos {
        rng.shuffle(&mut idx);
    } else {
        idx.sort_unstable();
    }
    Ok(idx.into_iter().map(|i| &pool[i]).collect())
}

fn prompt_prefix(demos: &[&McqTask]) -> String {
    demos
        .iter()
        .map(|d| format!("{}{DEMO_SEPARATOR}", d.demonstration()))
        .collect()
}

/// Few-shot accuracy averaged over repeats. Prompts that do not fit the
/// model are skipped and counted; more than 10% skipped is an error.
pub fn evaluate_mcq(
    scorer: &Scorer,
    tasks: &[McqTask],
    mode: ScoringMode,
    fewshot: &FewShotConfig,
    demo_pool: &[McqTask],
) -> Result<McqResult> {
    if fewshot.repeats == 0 {
        return Err(LabError::Invalid("repeats must be at least 1".into()));
    }
    if tasks.is_empty() {
        return Err(LabError::Empty("no tasks".into()));
    }
    let task_set: HashSet<&McqTask> = tasks.iter().collect();
    if demo_pool.iter().any(|d| task_set.contains(d)) {
        return Err(LabError::Invalid(
            "demonstration pool overlaps the evaluated tasks".into(),
        ));
    }
    let mut per_repeat = Vec::with_capacity(fewshot.repeats);
    let mut records = Vec::new();
    let mut skipped = 0;
    for r in 0..fewshot.repeats {
        let prefix = prompt_prefix(&draw_demos(demo_pool, fewshot, r)?);
        let mut hits = 0usize;
        let mut scored = 0usize;
        for (i, t) in tasks.iter().enumerate() {
            t.validate()?;
            let lps = match scorer.task_logprobs(&format!("{prefix}{}", t.context), t) {
                Ok(v) => v,
                Err(LabError::SequenceTooLong { .. }) => {
                    skipped += 1;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let scores: Vec<f64> = lps.iter().map(|l| l.score(mode)).collect::<Result<_>>()?;
            let predicted = argmax_first(&scores);
            let correct = predicted == t.answer_index;
            hits += correct as usize;
            scored += 1;
            records.push(McqRecord {
                task_id: i,
                repeat: r,
                predicted,
                correct,
            });
        }
        per_repeat.push(if scored == 0 {
            0.0
        } else {
            hits as f64 / scored as f64
        });
    }
    let attempted = tasks.len() * fewshot.repeats;
    if skipped as f64 > MAX_SKIPPED_FRACTION * attempted as f64 {
        return Err(LabError::Invalid(format!(
            "{skipped} of {attempted} prompts exceed the context window"
        )));
    }
    Ok(McqResult {
        mode,
        accuracy: per_repeat.iter().sum::<f64>() / per_repeat.len() as f64,
        per_repeat,
        skipped,
        attempted,
        records,
    })
}

/// Zero-shot accuracy of every valid mode on `dev_tasks`; the best mode
/// (first in grid order on ties) and the full table.
pub fn select_best_mode(
    scorer: &Scorer,
    dev_tasks: &[McqTask],
) -> Result<(ScoringMode, Vec<(ScoringMode, f64)>)> {
    if dev_tasks.is_empty() {
        return Err(LabError::Empty("no dev tasks".into()));
    }
    let grid = ScoringMode::grid();
    let mut hits = [0usize; 6];
    let mut scored = 0usize;
    for t in dev_tasks {
        t.validate()?;
        let lps = match scorer.task_logprobs(&t.context, t) {
            Ok(v) => v,
            Err(LabError::SequenceTooLong { .. }) => continue,
            Err(e) => return Err(e),
        };
        scored += 1;
        for (m, h) in grid.iter().zip(hits.iter_mut()) {
            let scores: Vec<f64> = lps.iter().map(|l| l.score(*m)).collect::<Result<_>>()?;
            *h += (argmax_first(&scores) == t.answer_index) as usize;
        }
    }
    if scored == 0 {
        return Err(LabError::Empty(
            "no dev task fits the context window".into(),
        ));
    }
    let table: Vec<(ScoringMode, f64)> = grid
        .iter()
        .zip(hits)
        .map(|(m, h)| (*m, h as f64 / scored as f64))
        .collect();
    let best = table
        .iter()
        .fold(table[0], |b, &c| if c.1 > b.1 { c } else { b });
    Ok((best.0, table))
}
