use std::collections::BTreeMap;

use super::kmeans::{assign, minibatch_kmeans};
use super::trace::ActivationTrace;
use crate::error::{LabError, Result};

/// Empirical joint counts of (label, target).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct JointHistogram {
    pub counts: BTreeMap<(usize, usize), u64>,
    pub x_counts: BTreeMap<usize, u64>,
    pub y_counts: BTreeMap<usize, u64>,
    pub total: u64,
}

impl JointHistogram {
    pub fn from_pairs(xs: &[usize], ys: &[usize]) -> Self {
        let mut h = Self::default();
        for (&x, &y) in xs.iter().zip(ys) {
            *h.counts.entry((x, y)).or_default() += 1;
            *h.x_counts.entry(x).or_default() += 1;
            *h.y_counts.entry(y).or_default() += 1;
            h.total += 1;
        }
        h
    }

    /// Plug-in mutual information in nats, summed over nonzero cells.
    pub fn mutual_information(&self) -> f64 {
        let n = self.total as f64;
        let mi: f64 = self
            .counts
            .iter()
            .map(|(&(x, y), &c)| {
                let c = c as f64;
                let px = self.x_counts[&x] as f64;
                let py = self.y_counts[&y] as f64;
                (c / n) * (c * n / (px * py)).ln()
            })
            .sum();
        // the exact value is non-negative; clear rounding residue
        mi.max(0.0)
    }

    pub fn entropy_x(&self) -> f64 {
        entropy(self.x_counts.values(), self.total)
    }

    pub fn entropy_y(&self) -> f64 {
        entropy(self.y_counts.values(), self.total)
    }
}

fn entropy<'a>(counts: impl Iterator<Item = &'a u64>, total: u64) -> f64 {
    let n = total as f64;
    -counts
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Plug-in estimate of I(labels; targets) in nats.
pub fn discrete_mi(labels: &[usize], targets: &[usize]) -> Result<f64> {
    if labels.len() != targets.len() || labels.is_empty() {
        return Err(LabError::Invalid(format!(
            "mutual information needs equal non-empty inputs, got {} and {}",
            labels.len(),
            targets.len()
        )));
    }
    Ok(JointHistogram::from_pairs(labels, targets).mutual_information())
}

/// Entropy of an id sequence in nats.
pub fn label_entropy(ids: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &i in ids {
        *counts.entry(i).or_default() += 1;
    }
    entropy(counts.values(), ids.len() as u64)
}

/// Clusters each site independently and measures MI between cluster labels
/// and targets.
pub fn mi_curve(
    trace: &ActivationTrace,
    k: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(LabError::Empty("trace has no rows".into()));
    }
    trace
        .reps
        .iter()
        .map(|reps| {
            let model = minibatch_kmeans(reps, trace.dim, k, batch_size, seed)?;
            discrete_mi(&assign(&model, reps), &trace.targets)
        })
        .collect()
}
