use std::collections::BTreeMap;

use super::trace::ActivationTrace;
use crate::error::{LabError, Result};

pub const DESK_MIN_COUNT: usize = 5;
pub const PAPER_MIN_COUNT: usize = 50;

/// Category vectors: the mean of L2-normalized rows per kept token.
#[derive(Clone, Debug, PartialEq)]
pub struct TpCentroids {
    /// Kept token ids, ascending.
    pub tokens: Vec<usize>,
    /// `[tokens.len() × dim]`.
    pub vectors: Vec<f64>,
    pub dim: usize,
    /// Rows left out of the means because their norm was zero.
    pub skipped_zero_rows: usize,
}

impl TpCentroids {
    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Tokens with at least `min_count` rows get a category vector (not
/// re-normalized). Zero rows count towards `min_count` but not the mean.
pub fn tp_centroids(
    reps: &[f64],
    dim: usize,
    targets: &[usize],
    min_count: usize,
) -> Result<TpCentroids> {
    if reps.len() != targets.len() * dim {
        return Err(LabError::Invalid(
            "reps and targets disagree in length".into(),
        ));
    }
    let mut by_token: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &t) in targets.iter().enumerate() {
        by_token.entry(t).or_default().push(i);
    }
    let mut tokens = Vec::new();
    let mut vectors = Vec::new();
    let mut skipped = 0;
    for (t, rows) in by_token {
        if rows.len() < min_count {
            continue;
        }
        let mut sum = vec![0.0; dim];
        let mut used = 0usize;
        for r in rows {
            let x = &reps[r * dim..(r + 1) * dim];
            let n = norm(x);
            if n == 0.0 {
                skipped += 1;
                continue;
            }
            for (s, v) in sum.iter_mut().zip(x) {
                *s += v / n;
            }
            used += 1;
        }
        if used > 0 {
            sum.iter_mut().for_each(|s| *s /= used as f64);
        }
        tokens.push(t);
        vectors.extend(sum);
    }
    if skipped > 0 {
        log::warn!("{skipped} zero-norm rows skipped while building category vectors");
    }
    if tokens.is_empty() {
        return Err(LabError::Empty(format!(
            "no token has {min_count} or more samples; lower min_count"
        )));
    }
    Ok(TpCentroids {
        tokens,
        vectors,
        dim,
        skipped_zero_rows: skipped,
    })
}

/// Kept token whose category vector has the highest cosine similarity with
/// `x`. Ties go to the lowest token id; zero vectors never win. A zero `x`
/// has similarity 0 with everything.
pub fn tp_predict(x: &[f64], c: &TpCentroids) -> Option<usize> {
    let xn = norm(x);
    let mut best: Option<(usize, f64)> = None;
    for (i, &t) in c.tokens.iter().enumerate() {
        let v = c.vector(i);
        let vn = norm(v);
        if vn == 0.0 {
            continue;
        }
        let cos = if xn == 0.0 {
            0.0
        } else {
            x.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (xn * vn)
        };
        if best.is_none_or(|(_, b)| cos > b) {
            best = Some((t, cos));
        }
    }
    best.map(|(t, _)| t)
}

/// Fraction of rows whose target is a kept token and is predicted correctly.
/// Rows with other targets are left out of the denominator.
pub fn tp_accuracy(reps: &[f64], dim: usize, targets: &[usize], c: &TpCentroids) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if c.tokens.binary_search(&t).is_err() {
            continue;
        }
        total += 1;
        if tp_predict(&reps[i * dim..(i + 1) * dim], c) == Some(t) {
            hits += 1;
        }
    }
    if total == 0 {
        return Err(LabError::Empty("no rows with a kept target token".into()));
    }
    Ok(hits as f64 / total as f64)
}

/// Per-site token-prediction accuracy, category vectors fitted per site.
pub fn tp_curve(trace: &ActivationTrace, min_count: usize) -> Result<Vec<f64>> {
    trace
        .reps
        .iter()
        .map(|reps| {
            let c = tp_centroids(reps, trace.dim, &trace.targets, min_count)?;
            tp_accuracy(reps, trace.dim, &trace.targets, &c)
        })
        .collect()
}
