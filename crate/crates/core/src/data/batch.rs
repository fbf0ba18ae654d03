use serde::{Deserialize, Serialize};

use super::tokenizer::{is_special, Tokenizer, BOS, MASK, NUM_SPECIALS, PAD, SEP};
use crate::arch::{Family, TokenBatch};
use crate::autodiff::IGNORE_INDEX;
use crate::error::{LabError, Result};
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Masked-token prediction (BERT family).
    Mlm,
    /// Next-token prediction (GPT family).
    Lm,
}

impl From<Family> for Objective {
    fn from(f: Family) -> Self {
        match f {
            Family::Bert => Objective::Mlm,
            Family::Gpt => Objective::Lm,
        }
    }
}

pub const MASK_RATE: f64 = 0.15;

/// Input ids plus one target per position; `IGNORE_INDEX` where no loss applies.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub input: TokenBatch,
    pub targets: Vec<i64>,
}

impl LabeledBatch {
    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t >= 0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedBatch {
    pub input: TokenBatch,
    pub targets: Vec<i64>,
    pub mask_positions: Vec<bool>,
}

impl From<MaskedBatch> for LabeledBatch {
    fn from(m: MaskedBatch) -> Self {
        Self {
            input: m.input,
            targets: m.targets,
        }
    }
}

/// `round(0.15·n)` with halves rounded up, never below 1.
pub fn mask_count(n: usize) -> usize {
    ((15 * n + 50) / 100).max(1)
}

/// Masks one row in place; returns targets and the selection.
///
/// Positions are picked by independent Bernoulli draws, then randomly trimmed
/// or topped up to exactly [`mask_count`] of the non-special positions.
pub fn mask_row(
    row: &mut [usize],
    vocab: usize,
    rng: &mut SeededRng,
) -> Result<(Vec<i64>, Vec<bool>)> {
    let eligible: Vec<usize> = (0..row.len()).filter(|&i| !is_special(row[i])).collect();
    if eligible.is_empty() {
        return Err(LabError::Empty("row has no maskable token".into()));
    }
    if vocab <= NUM_SPECIALS {
        return Err(LabError::Invalid(format!(
            "vocab {vocab} has no ordinary tokens"
        )));
    }
    let k = mask_count(eligible.len());
    let (mut picked, mut rest): (Vec<usize>, Vec<usize>) =
        eligible.iter().partition(|_| rng.uniform() < MASK_RATE);
    if picked.len() > k {
        let keep = rng.sample_indices(picked.len(), k);
        picked = keep.into_iter().map(|i| picked[i]).collect();
    } else if picked.len() < k {
        let add = rng.sample_indices(rest.len(), k - picked.len());
        picked.extend(add.into_iter().map(|i| rest[i]));
    }
    rest.clear();
    picked.sort_unstable();

    let mut targets = vec![IGNORE_INDEX; row.len()];
    let mut selected = vec![false; row.len()];
    for &p in &picked {
        targets[p] = row[p] as i64;
        selected[p] = true;
        let u = rng.uniform();
        if u < 0.8 {
            row[p] = MASK;
        } else if u < 0.9 {
            row[p] = NUM_SPECIALS + rng.below(vocab - NUM_SPECIALS);
        }
    }
    Ok((targets, selected))
}

/// Documents joined with a SEP after each one.
pub fn pack_mlm_stream(docs: &[Vec<usize>]) -> Vec<usize> {
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        out.extend_from_slice(d);
        out.push(SEP);
    }
    out
}

/// Documents each preceded by BOS.
pub fn pack_lm_stream(docs: &[Vec<usize>]) -> Vec<usize> {
    let mut out = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for d in docs {
        out.push(BOS);
        out.extend_from_slice(d);
    }
    out
}

/// Input/target pair for the window of `stream` starting at `start`;
/// positions past the end are PAD with ignored targets, and a target that
/// would be BOS (the next document's start) is ignored.
fn lm_window(
    stream: &[usize],
    start: usize,
    seq: usize,
    ids: &mut Vec<usize>,
    targets: &mut Vec<i64>,
) {
    for i in start..start + seq {
        ids.push(stream.get(i).copied().unwrap_or(PAD));
        targets.push(match stream.get(i + 1) {
            Some(&t) if i < stream.len() && t != BOS => t as i64,
            _ => IGNORE_INDEX,
        });
    }
}

fn mlm_window(stream: &[usize], start: usize, seq: usize) -> Vec<usize> {
    (start..start + seq)
        .map(|i| stream.get(i).copied().unwrap_or(PAD))
        .collect()
}

fn row_rng(seed: u64, row: usize) -> SeededRng {
    SeededRng::new(seed, "mlm").substream(&row.to_string())
}

fn mask_rows(rows: Vec<Vec<usize>>, seq: usize, vocab: usize, seed: u64) -> Result<MaskedBatch> {
    let n = rows.len();
    let mut ids = Vec::with_capacity(n * seq);
    let mut targets = Vec::with_capacity(n * seq);
    let mut mask_positions = Vec::with_capacity(n * seq);
    for (r, mut row) in rows.into_iter().enumerate() {
        let (t, m) = mask_row(&mut row, vocab, &mut row_rng(seed, r))?;
        ids.extend(row);
        targets.extend(t);
        mask_positions.extend(m);
    }
    Ok(MaskedBatch {
        input: TokenBatch::new(n, seq, ids)?,
        targets,
        mask_positions,
    })
}

fn encode_all(docs: &[String], tok: &Tokenizer) -> Vec<Vec<usize>> {
    docs.iter().map(|d| tok.encode(d)).collect()
}

/// Packs documents contiguously (SEP between them) into consecutive rows of
/// `seq` tokens, keeps the first `batch` rows and masks them.
pub fn make_mlm_batch(
    docs: &[String],
    tok: &Tokenizer,
    seq: usize,
    batch: usize,
    epoch_seed: u64,
) -> Result<MaskedBatch> {
    let stream = pack_mlm_stream(&encode_all(docs, tok));
    let rows: Vec<Vec<usize>> = (0..batch)
        .map(|r| r * seq)
        .take_while(|&s| s < stream.len())
        .map(|s| mlm_window(&stream, s, seq))
        .collect();
    if rows.is_empty() || seq == 0 {
        return Err(LabError::Empty("no tokens for an MLM batch".into()));
    }
    mask_rows(rows, seq, tok.vocab_size(), epoch_seed)
}

/// Packs documents (BOS before each) into consecutive rows of `seq` inputs
/// with next-token targets, keeping at most `batch` rows.
pub fn make_lm_batch(
    docs: &[String],
    tok: &Tokenizer,
    seq: usize,
    batch: usize,
) -> Result<LabeledBatch> {
    let stream = pack_lm_stream(&encode_all(docs, tok));
    lm_rows(&stream, seq, batch)
}

fn lm_rows(stream: &[usize], seq: usize, max_rows: usize) -> Result<LabeledBatch> {
    let mut ids = Vec::new();
    let mut targets = Vec::new();
    let mut rows = 0;
    while rows < max_rows && rows * seq < stream.len() {
        lm_window(stream, rows * seq, seq, &mut ids, &mut targets);
        rows += 1;
    }
    if rows == 0 || seq == 0 {
        return Err(LabError::Empty("no tokens for an LM batch".into()));
    }
    Ok(LabeledBatch {
        input: TokenBatch::new(rows, seq, ids)?,
        targets,
    })
}

/// Training batches as a pure function of `(seed, step)`: random windows of a
/// packed token stream, masked afresh each step for MLM.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    stream: Vec<usize>,
    objective: Objective,
    seq: usize,
    batch: usize,
    vocab: usize,
}

impl BatchSampler {
    pub fn new(
        docs: &[String],
        tok: &Tokenizer,
        objective: Objective,
        seq: usize,
        batch: usize,
    ) -> Result<Self> {
        let encoded = encode_all(docs, tok);
        let stream = match objective {
            Objective::Mlm => pack_mlm_stream(&encoded),
            Objective::Lm => pack_lm_stream(&encoded),
        };
        if seq == 0 || batch == 0 {
            return Err(LabError::Invalid("seq and batch must be positive".into()));
        }
        if stream.iter().all(|&t| is_special(t)) {
            return Err(LabError::Empty(
                "training stream has no ordinary tokens".into(),
            ));
        }
        Ok(Self {
            stream,
            objective,
            seq,
            batch,
            vocab: tok.vocab_size(),
        })
    }

    pub fn stream_len(&self) -> usize {
        self.stream.len()
    }

    pub fn batch(&self, seed: u64, step: u64) -> Result<LabeledBatch> {
        let mut rng = SeededRng::new(seed, "batch").substream(&step.to_string());
        let span = match self.objective {
            Objective::Mlm => self.seq,
            Objective::Lm => self.seq + 1,
        };
        let max_start = self.stream.len().saturating_sub(span);
        let starts: Vec<usize> = (0..self.batch).map(|_| rng.below(max_start + 1)).collect();
        match self.objective {
            Objective::Lm => {
                let mut ids = Vec::with_capacity(self.batch * self.seq);
                let mut targets = Vec::with_capacity(self.batch * self.seq);
                for &s in &starts {
                    lm_window(&self.stream, s, self.seq, &mut ids, &mut targets);
                }
                Ok(LabeledBatch {
                    input: TokenBatch::new(self.batch, self.seq, ids)?,
                    targets,
                })
            }
            Objective::Mlm => {
                let rows = starts
                    .iter()
                    .map(|&s| {
                        let mut w = mlm_window(&self.stream, s, self.seq);
                        // a window of specials only cannot be masked; shift it onto text
                        if w.iter().all(|&t| is_special(t)) {
                            w = mlm_window(&self.stream, 0, self.seq);
                        }
                        w
                    })
                    .collect();
                let mask_seed = rng.below(usize::MAX) as u64;
                Ok(mask_rows(rows, self.seq, self.vocab, mask_seed)?.into())
            }
        }
    }
}

/// Deterministic evaluation batches over `docs`: consecutive rows of the
/// packed stream, at most `rows_per_batch` rows each and `max_rows` overall.
/// MLM rows are masked with a fixed seed so every evaluation sees the same
/// targets.
pub fn eval_batches(
    docs: &[String],
    tok: &Tokenizer,
    objective: Objective,
    seq: usize,
    rows_per_batch: usize,
    max_rows: usize,
    mask_seed: u64,
) -> Result<Vec<LabeledBatch>> {
    let encoded = encode_all(docs, tok);
    let mut out = Vec::new();
    match objective {
        Objective::Lm => {
            let stream = pack_lm_stream(&encoded);
            let total = stream.len().div_ceil(seq).min(max_rows);
            let mut r = 0;
            while r < total {
                let n = rows_per_batch.min(total - r);
                out.push(lm_rows(&stream[r * seq..], seq, n)?);
                r += n;
            }
        }
        Objective::Mlm => {
            let stream = pack_mlm_stream(&encoded);
            let rows: Vec<Vec<usize>> = (0..stream.len().div_ceil(seq).min(max_rows))
                .map(|r| mlm_window(&stream, r * seq, seq))
                .filter(|w| w.iter().any(|&t| !is_special(t)))
                .collect();
            for (b, chunk) in rows.chunks(rows_per_batch.max(1)).enumerate() {
                out.push(
                    mask_rows(chunk.to_vec(), seq, tok.vocab_size(), mask_seed ^ b as u64)?.into(),
                );
            }
        }
    }
    if out.is_empty() {
        return Err(LabError::Empty("no evaluation tokens".into()));
    }
    Ok(out)
}
