use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{CaptureSpec, Model};
use crate::data::{eval_batches, Objective, Tokenizer};
use crate::error::{LabError, Result};
use crate::rng::SeededRng;

const TRACE_MAGIC: &[u8; 8] = b"ALTRACE\0";
pub const TRACE_FORMAT_VERSION: u32 = 1;

/// Which positions a trace records.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionPolicy {
    /// Masked positions of MLM batches.
    MaskedOnly,
    /// Every position with a next-token target.
    NextToken,
}

impl From<Objective> for PositionPolicy {
    fn from(o: Objective) -> Self {
        match o {
            Objective::Mlm => PositionPolicy::MaskedOnly,
            Objective::Lm => PositionPolicy::NextToken,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TraceMeta {
    pub model_id: String,
    pub step: u64,
    pub policy: Option<PositionPolicy>,
}

/// Per-site representations `[n × dim]` sharing one row → target alignment.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTrace {
    pub sites: Vec<String>,
    pub dim: usize,
    pub reps: Vec<Vec<f64>>,
    pub targets: Vec<usize>,
    pub meta: TraceMeta,
}

impl ActivationTrace {
    pub fn new(
        sites: Vec<String>,
        dim: usize,
        reps: Vec<Vec<f64>>,
        targets: Vec<usize>,
    ) -> Result<Self> {
        if sites.len() != reps.len() {
            return Err(LabError::Invalid(
                "one representation matrix per site".into(),
            ));
        }
        let n = targets.len();
        if let Some((s, r)) = sites.iter().zip(&reps).find(|(_, r)| r.len() != n * dim) {
            return Err(LabError::Invalid(format!(
                "site {s} has {} values, expected {n}×{dim}",
                r.len()
            )));
        }
        Ok(Self {
            sites,
            dim,
            reps,
            targets,
            meta: TraceMeta::default(),
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn site(&self, name: &str) -> Option<&[f64]> {
        self.sites
            .iter()
            .position(|s| s == name)
            .map(|i| self.reps[i].as_slice())
    }

    fn append(&mut self, other: ActivationTrace) -> Result<()> {
        if other.sites != self.sites || other.dim != self.dim {
            return Err(LabError::Invalid(
                "cannot append traces with different sites".into(),
            ));
        }
        for (a, b) in self.reps.iter_mut().zip(other.reps) {
            a.extend(b);
        }
        self.targets.extend(other.targets);
        Ok(())
    }

    /// Keeps the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Self {
        let d = self.dim;
        Self {
            sites: self.sites.clone(),
            dim: d,
            reps: self
                .reps
                .iter()
                .map(|m| {
                    rows.iter()
                        .flat_map(|&r| m[r * d..(r + 1) * d].iter().copied())
                        .collect()
                })
                .collect(),
            targets: rows.iter().map(|&r| self.targets[r]).collect(),
            meta: self.meta.clone(),
        }
    }

    /// Float32 container: magic, version, JSON header, per-site matrices,
    /// then the targets as u32.
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::json!({
            "sites": self.sites,
            "dim": self.dim,
            "n": self.len(),
            "meta": self.meta,
        })
        .to_string();
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(TRACE_MAGIC)?;
        w.write_all(&TRACE_FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        for m in &self.reps {
            for &x in m {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        for &t in &self.targets {
            w.write_all(&(t as u32).to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut r = bytes.as_slice();
        let mut take = |n: usize| -> Result<&[u8]> {
            if r.len() < n {
                return Err(LabError::Format("truncated trace file".into()));
            }
            let (a, b) = r.split_at(n);
            r = b;
            Ok(a)
        };
        if take(8)? != TRACE_MAGIC {
            return Err(LabError::Format("not a trace file".into()));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
        if version != TRACE_FORMAT_VERSION {
            return Err(LabError::Format(format!(
                "trace format version {version} is not supported"
            )));
        }
        let hlen = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(take(hlen)?)?;
        let sites: Vec<String> = serde_json::from_value(header["sites"].clone())?;
        let dim: usize = serde_json::from_value(header["dim"].clone())?;
        let n: usize = serde_json::from_value(header["n"].clone())?;
        let meta: TraceMeta = serde_json::from_value(header["meta"].clone())?;
        let mut reps = Vec::with_capacity(sites.len());
        for _ in &sites {
            let raw = take(n * dim * 4)?;
            reps.push(
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
            );
        }
        let targets = take(n * 4)?
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let mut t = Self::new(sites, dim, reps, targets)?;
        t.meta = meta;
        Ok(t)
    }
}

/// Runs `model` over `docs` and records every site at the positions chosen
/// by the objective's policy, then keeps a seeded sample of
/// `min(sample_budget, available)` rows in stream order.
#[allow(clippy::too_many_arguments)]
pub fn collect_trace(
    model: &Model,
    docs: &[String],
    tok: &Tokenizer,
    objective: Objective,
    seq: usize,
    max_rows: usize,
    sample_budget: usize,
    seed: u64,
) -> Result<ActivationTrace> {
    let batches = eval_batches(docs, tok, objective, seq, 16, max_rows, seed)?;
    let mut trace: Option<ActivationTrace> = None;
    for b in &batches {
        let (positions, targets): (Vec<usize>, Vec<usize>) = b
            .targets
            .iter()
            .enumerate()
            .filter(|(_, &t)| t >= 0)
            .map(|(i, &t)| (i, t as usize))
            .unzip();
        if positions.is_empty() {
            continue;
        }
        let out = model.forward(&b.input, Some(&CaptureSpec { positions, targets }))?;
        let part = out.trace.expect("capture requested");
        match trace.as_mut() {
            Some(t) => t.append(part)?,
            None => trace = Some(part),
        }
    }
    let full = trace.ok_or_else(|| LabError::Empty("no eligible positions to trace".into()))?;
    let mut keep = if full.len() > sample_budget {
        SeededRng::new(seed, "trace-sample").sample_indices(full.len(), sample_budget)
    } else {
        (0..full.len()).collect()
    };
    keep.sort_unstable();
    let mut t = full.select(&keep);
    t.meta.policy = Some(objective.into());
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_round_trip() {
        let mut t = ActivationTrace::new(
            vec!["embed".into(), "L1.mha".into()],
            2,
            vec![vec![0.5, -1.0, 2.0, 0.25], vec![1.0, 2.0, 3.0, 4.0]],
            vec![7, 9],
        )
        .unwrap();
        t.meta.step = 12;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.trace");
        t.save(&p).unwrap();
        assert_eq!(ActivationTrace::load(&p).unwrap(), t);
    }

    #[test]
    fn rejects_misaligned_sites() {
        assert!(
            ActivationTrace::new(vec!["embed".into()], 2, vec![vec![0.0; 3]], vec![1, 2]).is_err()
        );
    }
}
