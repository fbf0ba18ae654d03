use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::analysis::csv_err;
use crate::error::{LabError, Result};

pub const DEFAULT_ALIGN_THRESHOLD: f64 = 0.01;

/// Dev loss at evaluated steps, steps strictly increasing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurve {
    points: Vec<(u64, f64)>,
}

impl LossCurve {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<(u64, f64)>) -> Result<Self> {
        let mut c = Self::new();
        for (s, l) in points {
            c.push(s, l)?;
        }
        Ok(c)
    }

    pub fn push(&mut self, step: u64, loss: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(LabError::Invalid(format!(
                    "step {step} does not follow {last}"
                )));
            }
        }
        self.points.push((step, loss));
        Ok(())
    }

    pub fn points(&self) -> &[(u64, f64)] {
        &self.points
    }

    pub fn last(&self) -> Option<(u64, f64)> {
        self.points.last().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn loss_at(&self, step: u64) -> Option<f64> {
        self.points
            .binary_search_by_key(&step, |p| p.0)
            .ok()
            .map(|i| self.points[i].1)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["step", "dev_loss"]).map_err(csv_err)?;
        for (s, l) in &self.points {
            w.write_record([s.to_string(), l.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut c = Self::new();
        for rec in r.deserialize() {
            let (s, l): (u64, f64) = rec.map_err(csv_err)?;
            c.push(s, l)?;
        }
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignedRun {
    pub step: u64,
    pub loss: f64,
    /// `|loss − target|`.
    pub residual: f64,
    pub relative_residual: f64,
    pub within_threshold: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub target: f64,
    pub threshold: f64,
    pub runs: IndexMap<String, AlignedRun>,
}

impl Alignment {
    /// Fails on the first run whose residual exceeds the threshold.
    pub fn require_all(&self) -> Result<()> {
        match self.runs.iter().find(|(_, r)| !r.within_threshold) {
            Some((name, r)) => Err(LabError::AlignmentRefused {
                run: name.clone(),
                residual: r.relative_residual,
                threshold: self.threshold,
            }),
            None => Ok(()),
        }
    }

    pub fn steps(&self) -> IndexMap<String, u64> {
        self.runs.iter().map(|(n, r)| (n.clone(), r.step)).collect()
    }
}

/// Highest final dev loss among the runs, reachable by all of them.
pub fn default_target(curves: &IndexMap<String, LossCurve>) -> Result<f64> {
    curves
        .iter()
        .map(|(n, c)| {
            c.last()
                .map(|p| p.1)
                .ok_or_else(|| LabError::Empty(format!("run {n} has no evaluations")))
        })
        .try_fold(f64::NEG_INFINITY, |m, l| Ok(m.max(l?)))
}

/// Per run, the evaluated step whose dev loss is closest to `target`
/// (earlier step on ties). Runs whose relative residual exceeds `threshold`
/// are flagged rather than dropped.
pub fn align_checkpoints(
    curves: &IndexMap<String, LossCurve>,
    target: Option<f64>,
    threshold: f64,
) -> Result<Alignment> {
    if curves.is_empty() {
        return Err(LabError::Empty("no runs to align".into()));
    }
    let target = match target {
        Some(t) => t,
        None => default_target(curves)?,
    };
    let mut runs = IndexMap::new();
    for (name, c) in curves {
        let mut best: Option<(u64, f64)> = None;
        for &(s, l) in c.points() {
            if best.is_none_or(|(_, b)| (l - target).abs() < (b - target).abs()) {
                best = Some((s, l));
            }
        }
        let (step, loss) =
            best.ok_or_else(|| LabError::Empty(format!("run {name} has no evaluations")))?;
        let residual = (loss - target).abs();
        let relative_residual = residual / target.abs().max(f64::MIN_POSITIVE);
        if relative_residual > threshold {
            log::warn!("run {name}: closest dev loss {loss} is {relative_residual:.4} away from target {target}");
        }
        runs.insert(
            name.clone(),
            AlignedRun {
                step,
                loss,
                residual,
                relative_residual,
                within_threshold: relative_residual <= threshold,
            },
        );
    }
    Ok(Alignment {
        target,
        threshold,
        runs,
    })
}
