//! Out-of-distribution loss and few-shot multiple-choice scoring.

mod mcq;

pub use mcq::{
    argmax_first, draw_demos, evaluate_mcq, read_tasks, select_best_mode, write_tasks,
    FewShotConfig, McqRecord, McqResult, McqTask, OptionLogProbs, Scorer, ScoringMode, Span,
    DEFAULT_UNCONDITIONAL_CONTEXT, MAX_SKIPPED_FRACTION,
};

use crate::arch::Model;
use crate::data::synth::{CITIES, JOBS, NAMES, RECORD_KEYS};
use crate::data::{eval_batches, Objective, Tokenizer};
use crate::error::{LabError, Result};
use crate::rng::SeededRng;
use crate::train::mean_loss;

/// Default seed for the evaluation mask draw of MLM models.
pub const EVAL_MASK_SEED: u64 = 0x5eed;

/// Mean per-token loss over `docs`: next-token loss for causal models,
/// masked-token loss under a fixed mask draw otherwise. Dev-loss tracking
/// during training goes through the same batches and reduction.
pub fn ood_loss(
    model: &Model,
    docs: &[String],
    tok: &Tokenizer,
    seq: usize,
    max_rows: usize,
    mask_seed: u64,
) -> Result<f64> {
    if docs.is_empty() {
        return Err(LabError::Empty("domain has no documents".into()));
    }
    let objective = Objective::from(model.spec.family);
    let batches = eval_batches(docs, tok, objective, seq, 16, max_rows, mask_seed)?;
    mean_loss(model, &batches)
}

/// Record-completion tasks: the context holds the first `p` fields of a
/// record and the options are the four field keys. Each key is the answer
/// for a quarter of the tasks and the answer slot cycles through the four
/// positions, so any fixed preference scores exactly chance.
pub fn synthetic_record_tasks(n: usize, seed: u64) -> Vec<McqTask> {
    let mut rng = SeededRng::new(seed, "record-tasks");
    (0..n).map(|i| record_task(i, &mut rng)).collect()
}

/// Balanced tasks plus a demonstration pool with no task in common.
pub fn synthetic_record_split(
    n_tasks: usize,
    n_demos: usize,
    seed: u64,
) -> (Vec<McqTask>, Vec<McqTask>) {
    let tasks = synthetic_record_tasks(n_tasks, seed);
    let taken: std::collections::HashSet<&McqTask> = tasks.iter().collect();
    let mut rng = SeededRng::new(seed, "record-demos");
    let mut demos = Vec::with_capacity(n_demos);
    let mut i = 0;
    while demos.len() < n_demos {
        let t = record_task(i, &mut rng);
        i += 1;
        if !taken.contains(&t) && !demos.contains(&t) {
            demos.push(t);
        }
    }
    (tasks, demos)
}

fn record_task(i: usize, rng: &mut SeededRng) -> McqTask {
    let p = (i / 4) % 4;
    let values = [
        NAMES[rng.below(NAMES.len())].to_string(),
        (1940 + rng.below(70)).to_string(),
        CITIES[rng.below(CITIES.len())].to_string(),
        JOBS[rng.below(JOBS.len())].to_string(),
    ];
    let context: String = (0..p)
        .map(|f| format!("{}: {}; ", RECORD_KEYS[f], values[f]))
        .collect();
    let answer_index = i % 4;
    let mut others: Vec<usize> = (0..4).filter(|&k| k != p).collect();
    rng.shuffle(&mut others);
    let mut options = Vec::with_capacity(4);
    let mut rest = others.into_iter();
    for slot in 0..4 {
        let key = if slot == answer_index {
            p
        } else {
            rest.next().unwrap()
        };
        options.push(format!("{}:", RECORD_KEYS[key]));
    }
    McqTask {
        context,
        options,
        answer_index,
        unconditional_context: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_pool_is_disjoint() {
        let (tasks, demos) = synthetic_record_split(64, 40, 3);
        assert_eq!(demos.len(), 40);
        assert!(demos.iter().all(|d| !tasks.contains(d)));
    }

    #[test]
    fn record_tasks_are_balanced() {
        let tasks = synthetic_record_tasks(64, 1);
        let mut by_slot = [0; 4];
        let mut by_key = std::collections::HashMap::new();
        for t in &tasks {
            t.validate().unwrap();
            by_slot[t.answer_index] += 1;
            *by_key.entry(t.options[t.answer_index].clone()).or_insert(0) += 1;
            let lens: Vec<usize> = t.options.iter().map(|o| o.len()).collect();
            assert!(lens.iter().all(|&l| l == lens[0]));
        }
        assert_eq!(by_slot, [16; 4]);
        assert!(by_key.values().all(|&c| c == 16));
    }
}
