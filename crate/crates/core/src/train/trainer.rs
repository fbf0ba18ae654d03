use std::path::{Path, PathBuf};

use super::checkpoint::Checkpoint;
use super::curve::LossCurve;
use super::optim::{adam_step, lr_at, AdamState, TrainConfig};
use crate::arch::Model;
use crate::data::{BatchSampler, LabeledBatch};
use crate::error::{LabError, Result};

/// Token-weighted mean negative log-likelihood over `batches`.
pub fn mean_loss(model: &Model, batches: &[LabeledBatch]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for b in batches {
        let (s, n) = model.nll_sum(&b.input, &b.targets)?;
        total += s;
        count += n;
    }
    if count == 0 {
        return Err(LabError::Empty("no evaluation targets".into()));
    }
    Ok(total / count as f64)
}

fn entropy(hist: &[usize]) -> f64 {
    let n: usize = hist.iter().sum();
    -hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n as f64;
            p * p.ln()
        })
        .sum::<f64>()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss: f64,
    pub lm_loss: f64,
    pub lr: f64,
    /// Routing entropy per MoE layer, in nats.
    pub routing_entropy: Vec<f64>,
}

/// Owns a model and its optimizer state; steps are numbered by the number
/// of updates applied so far.
pub struct Trainer<'a> {
    pub model: Model,
    pub adam: AdamState,
    pub step: u64,
    pub curve: LossCurve,
    cfg: TrainConfig,
    sampler: &'a BatchSampler,
    dev: &'a [LabeledBatch],
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: Model,
        cfg: TrainConfig,
        sampler: &'a BatchSampler,
        dev: &'a [LabeledBatch],
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            adam: AdamState::new(&model.params),
            model,
            step: 0,
            curve: LossCurve::new(),
            cfg,
            sampler,
            dev,
        })
    }

    /// Continues from a full checkpoint; `curve` carries the evaluations made
    /// before it was written.
    pub fn resume(
        ckpt: Checkpoint,
        curve: LossCurve,
        cfg: TrainConfig,
        sampler: &'a BatchSampler,
        dev: &'a [LabeledBatch],
    ) -> Result<Self> {
        cfg.validate()?;
        let adam = ckpt
            .optimizer
            .clone()
            .ok_or_else(|| LabError::Invalid("checkpoint has no optimizer state".into()))?;
        let points = curve
            .points()
            .iter()
            .copied()
            .filter(|p| p.0 <= ckpt.step)
            .collect();
        Ok(Self {
            model: ckpt.model(),
            adam,
            step: ckpt.step,
            curve: LossCurve::from_points(points)?,
            cfg,
            sampler,
            dev,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn train_step(&mut self) -> Result<StepStats> {
        let batch = self.sampler.batch(self.cfg.seed, self.step)?;
        let res = self
            .model
            .loss_and_grads(&batch.input, &batch.targets)
            .map_err(|e| self.diverged(e))?;
        let lr = lr_at(self.step + 1, &self.cfg);
        adam_step(
            &mut self.model.params,
            &res.grads,
            &mut self.adam,
            lr,
            &self.cfg,
        )
        .map_err(|e| self.diverged(e))?;
        self.step += 1;
        Ok(StepStats {
            step: self.step,
            loss: res.loss,
            lm_loss: res.lm_loss,
            lr,
            routing_entropy: res.routing_stats.iter().map(|h| entropy(h)).collect(),
        })
    }

    fn diverged(&self, e: LabError) -> LabError {
        match e {
            LabError::NonFinite(_) => LabError::Diverged {
                step: self.step,
                loss: f64::NAN,
            },
            other => other,
        }
    }

    pub fn dev_loss(&self) -> Result<f64> {
        mean_loss(&self.model, self.dev).map_err(|e| self.diverged(e))
    }

    pub fn checkpoint(&self, dev_loss: Option<f64>, with_optimizer: bool) -> Checkpoint {
        Checkpoint {
            step: self.step,
            dev_loss,
            spec: self.model.spec.clone(),
            params: self.model.params.clone(),
            optimizer: with_optimizer.then(|| self.adam.clone()),
        }
    }

    /// Trains to `max_steps`, evaluating every `eval_every` steps and at the
    /// end. `on_eval` sees each evaluation; full checkpoints go to
    /// `checkpoint_dir` every `checkpoint_every` steps and at the end.
    pub fn run(
        &mut self,
        checkpoint_dir: Option<&Path>,
        mut on_eval: impl FnMut(&Trainer<'a>, f64) -> Result<()>,
    ) -> Result<TrainSummary> {
        let mut written = Vec::new();
        let mut last_dev = self.curve.last().map(|p| p.1);
        while self.step < self.cfg.max_steps {
            let stats = self.train_step()?;
            if !stats.loss.is_finite() {
                return Err(LabError::Diverged {
                    step: stats.step,
                    loss: stats.loss,
                });
            }
            let s = self.step;
            let last = s == self.cfg.max_steps;
            if s % self.cfg.eval_every == 0 || last {
                let dev = self.dev_loss()?;
                if !dev.is_finite() {
                    return Err(LabError::Diverged { step: s, loss: dev });
                }
                self.curve.push(s, dev)?;
                last_dev = Some(dev);
                if stats.routing_entropy.is_empty() {
                    log::info!(
                        "step {s}: train {:.4} dev {dev:.4} lr {:.2e}",
                        stats.loss,
                        stats.lr
                    );
                } else {
                    log::info!(
                        "step {s}: train {:.4} (lm {:.4}) dev {dev:.4} routing entropy {:?}",
                        stats.loss,
                        stats.lm_loss,
                        stats.routing_entropy
                    );
                }
                on_eval(self, dev)?;
            }
            if let Some(dir) = checkpoint_dir {
                if s % self.cfg.checkpoint_every == 0 || last {
                    let path = checkpoint_path(dir, s);
                    self.checkpoint(
                        last_dev.filter(|_| self.curve.last().map(|p| p.0) == Some(s)),
                        true,
                    )
                    .save(&path)?;
                    written.push(path);
                }
            }
        }
        Ok(TrainSummary {
            final_step: self.step,
            final_dev_loss: last_dev,
            checkpoints: written,
        })
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("step-{step:07}.ckpt"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub final_step: u64,
    pub final_dev_loss: Option<f64>,
    pub checkpoints: Vec<PathBuf>,
}
