//! Training runs on a corpus, loss-aligned comparisons between them and the
//! outer-width sweep built on top.
//!
//! A run directory holds `loss.csv`, full checkpoints under `checkpoints/`
//! and a parameters-only snapshot per evaluation under `snapshots/`, which
//! is what alignment picks from.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use indexmap::IndexMap;

use crate::analysis::{
    collect_trace, contribution_ratio, mi_curve, tp_curve, AnalysisConfig, ContributionReport,
    Metric,
};
use crate::arch::{ArchSpec, Model, Ratio, Variant};
use crate::data::{eval_batches, BatchSampler, Corpus, Objective, Tokenizer};
use crate::error::{LabError, Result};
use crate::eval::{ood_loss, EVAL_MASK_SEED};
use crate::rng::SeededRng;
use crate::train::{
    align_checkpoints, checkpoint_path, AlignedRun, Alignment, Checkpoint, LossCurve, TrainConfig,
    Trainer,
};

pub const LOSS_CSV: &str = "loss.csv";

pub fn snapshot_path(run_dir: &Path, step: u64) -> PathBuf {
    checkpoint_path(&run_dir.join("snapshots"), step)
}

/// What a finished run left on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RunArtifacts {
    pub name: String,
    pub dir: PathBuf,
    pub spec: ArchSpec,
    pub curve: LossCurve,
    pub checkpoints: Vec<PathBuf>,
}

impl RunArtifacts {
    /// Re-reads a run directory written by [`train_run`].
    pub fn open(name: &str, dir: &Path) -> Result<Self> {
        let curve = LossCurve::read_csv(&dir.join(LOSS_CSV))?;
        let (last, _) = curve
            .last()
            .ok_or_else(|| LabError::Empty(format!("run {name} has no evaluations")))?;
        let spec = Checkpoint::load(&snapshot_path(dir, last))?.spec;
        let mut checkpoints: Vec<PathBuf> = match std::fs::read_dir(dir.join("checkpoints")) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(_) => Vec::new(),
        };
        checkpoints.sort();
        Ok(Self {
            name: name.to_string(),
            dir: dir.to_path_buf(),
            spec,
            curve,
            checkpoints,
        })
    }

    pub fn load_snapshot(&self, step: u64) -> Result<Model> {
        Ok(Checkpoint::load(&snapshot_path(&self.dir, step))?.model())
    }
}

pub fn dev_batches(
    corpus: &Corpus,
    tok: &Tokenizer,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<Vec<crate::data::LabeledBatch>> {
    eval_batches(
        &corpus.dev,
        tok,
        objective,
        cfg.seq,
        16,
        cfg.eval_max_rows,
        EVAL_MASK_SEED,
    )
}

/// Trains `spec` from a seeded initialization, writing into `dir`.
pub fn train_run(
    name: &str,
    spec: ArchSpec,
    cfg: &TrainConfig,
    corpus: &Corpus,
    tok: &Tokenizer,
    dir: &Path,
) -> Result<RunArtifacts> {
    if spec.vocab != tok.vocab_size() {
        return Err(LabError::Invalid(format!(
            "model vocab {} does not match tokenizer vocab {}",
            spec.vocab,
            tok.vocab_size()
        )));
    }
    if cfg.seq > spec.max_seq {
        return Err(LabError::Invalid(format!(
            "train seq {} exceeds max_seq {}",
            cfg.seq, spec.max_seq
        )));
    }
    let objective = Objective::from(spec.family);
    let sampler = BatchSampler::new(&corpus.train, tok, objective, cfg.seq, cfg.batch)?;
    let dev = dev_batches(corpus, tok, objective, cfg)?;
    let model = Model::build(spec.clone(), &SeededRng::new(cfg.seed, "model"))?;
    std::fs::create_dir_all(dir.join("snapshots"))?;
    std::fs::create_dir_all(dir.join("checkpoints"))?;
    let mut trainer = Trainer::new(model, cfg.clone(), &sampler, &dev)?;
    let result = trainer.run(Some(&dir.join("checkpoints")), |t, dev_loss| {
        t.checkpoint(Some(dev_loss), false)
            .save(&snapshot_path(dir, t.step))
    });
    // the curve is worth keeping even when the run diverged
    trainer.curve.write_csv(&dir.join(LOSS_CSV))?;
    let summary = result?;
    log::info!(
        "{name}: {} steps, final dev loss {:?}",
        summary.final_step,
        summary.final_dev_loss
    );
    Ok(RunArtifacts {
        name: name.to_string(),
        dir: dir.to_path_buf(),
        spec,
        curve: trainer.curve.clone(),
        checkpoints: summary.checkpoints,
    })
}

/// Trains every job in its own subdirectory of `root`, at most
/// `parallelism` at a time. Results keep the job order.
pub fn train_runs(
    jobs: &[(String, ArchSpec)],
    cfg: &TrainConfig,
    corpus: &Corpus,
    tok: &Tokenizer,
    root: &Path,
    parallelism: usize,
) -> Result<Vec<RunArtifacts>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<RunArtifacts>>>> =
        Mutex::new(jobs.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..parallelism.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((name, spec)) = jobs.get(i) else {
                    break;
                };
                let r = train_run(name, spec.clone(), cfg, corpus, tok, &root.join(name));
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

/// Contribution reports of one model.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteAnalysis {
    pub tp: ContributionReport,
    pub mi: Option<ContributionReport>,
    pub rows: usize,
}

/// Traces `model` on `docs` and computes the TP (and optionally MI)
/// contribution reports.
pub fn analyze_model(
    model: &Model,
    docs: &[String],
    tok: &Tokenizer,
    seq: usize,
    cfg: &AnalysisConfig,
    seed: u64,
    with_mi: bool,
) -> Result<SiteAnalysis> {
    let objective = Objective::from(model.spec.family);
    let trace = collect_trace(
        model,
        docs,
        tok,
        objective,
        seq,
        usize::MAX,
        cfg.sample_budget,
        seed,
    )?;
    let tp = contribution_ratio(Metric::Tp, &trace.sites, &tp_curve(&trace, cfg.min_count)?)?;
    let mi = if with_mi {
        let values = mi_curve(&trace, cfg.k, cfg.batch_size, seed)?;
        Some(contribution_ratio(Metric::Mi, &trace.sites, &values)?)
    } else {
        None
    };
    Ok(SiteAnalysis {
        tp,
        mi,
        rows: trace.len(),
    })
}

/// Mean OOD loss per held-out domain; empty when the corpus has none.
pub fn ood_losses(
    model: &Model,
    corpus: &Corpus,
    tok: &Tokenizer,
    seq: usize,
    max_rows: usize,
) -> Result<IndexMap<String, f64>> {
    corpus
        .ood
        .iter()
        .map(|(name, docs)| {
            Ok((
                name.clone(),
                ood_loss(model, docs, tok, seq, max_rows, EVAL_MASK_SEED)?,
            ))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparedRun {
    pub name: String,
    pub spec: ArchSpec,
    pub aligned: AlignedRun,
    pub analysis: SiteAnalysis,
    pub ood: IndexMap<String, f64>,
}

impl ComparedRun {
    /// Mean over OOD domains.
    pub fn mean_ood(&self) -> Option<f64> {
        (!self.ood.is_empty()).then(|| self.ood.values().sum::<f64>() / self.ood.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub alignment: Alignment,
    pub runs: Vec<ComparedRun>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompareOptions {
    pub analysis: AnalysisConfig,
    pub seq: usize,
    pub threshold: f64,
    pub target: Option<f64>,
    pub with_mi: bool,
    pub ood_max_rows: usize,
    pub seed: u64,
}

/// Aligns the runs by dev loss and analyzes each at its aligned snapshot,
/// on the in-distribution dev documents. Runs outside the threshold are
/// still analyzed; `alignment.runs[..].within_threshold` says which.
pub fn compare_aligned(
    runs: &[RunArtifacts],
    corpus: &Corpus,
    tok: &Tokenizer,
    opts: &CompareOptions,
) -> Result<Comparison> {
    let curves: IndexMap<String, LossCurve> = runs
        .iter()
        .map(|r| (r.name.clone(), r.curve.clone()))
        .collect();
    let alignment = align_checkpoints(&curves, opts.target, opts.threshold)?;
    let mut out = Vec::with_capacity(runs.len());
    for r in runs {
        let aligned = alignment.runs[&r.name].clone();
        let model = r.load_snapshot(aligned.step)?;
        let analysis = analyze_model(
            &model,
            &corpus.dev,
            tok,
            opts.seq,
            &opts.analysis,
            opts.seed,
            opts.with_mi,
        )?;
        let ood = ood_losses(&model, corpus, tok, opts.seq, opts.ood_max_rows)?;
        log::info!(
            "{}: step {} dev {:.4} (rel. residual {:.4}) TP ffn share {:.3}",
            r.name,
            aligned.step,
            aligned.loss,
            aligned.relative_residual,
            analysis.tp.ffn_ratio
        );
        out.push(ComparedRun {
            name: r.name.clone(),
            spec: r.spec.clone(),
            aligned,
            analysis,
            ood,
        });
    }
    Ok(Comparison {
        alignment,
        runs: out,
    })
}

/// Run name used for a sweep ratio, e.g. `ratio-1_2`.
pub fn ratio_run_name(r: Ratio) -> String {
    format!("ratio-{}_{}", r.num(), r.den())
}

/// CAA copies of `base` at every ratio.
pub fn sweep_jobs(base: &ArchSpec, ratios: &[Ratio]) -> Result<Vec<(String, ArchSpec)>> {
    if ratios.is_empty() {
        return Err(LabError::Empty("no ratios to sweep".into()));
    }
    ratios
        .iter()
        .map(|&r| {
            let spec = ArchSpec {
                variant: Variant::Caa,
                ..base.clone()
            }
            .with_outer_ratio(r);
            spec.validate()?;
            Ok((ratio_run_name(r), spec))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub ratio: Ratio,
    pub outer_ffn_contribution: f64,
    pub ood_loss: Option<f64>,
    pub dev_loss: f64,
    pub step: u64,
    pub within_threshold: bool,
}

pub fn sweep_rows(cmp: &Comparison) -> Vec<SweepRow> {
    cmp.runs
        .iter()
        .map(|r| SweepRow {
            ratio: r.spec.outer_ratio,
            outer_ffn_contribution: r.analysis.tp.ffn_ratio,
            ood_loss: r.mean_ood(),
            dev_loss: r.aligned.loss,
            step: r.aligned.step,
            within_threshold: r.aligned.within_threshold,
        })
        .collect()
}

/// Spearman correlation between ratio and outer-FFN contribution over the
/// rows inside the alignment threshold.
pub fn sweep_trend(rows: &[SweepRow]) -> Option<f64> {
    let kept: Vec<&SweepRow> = rows.iter().filter(|r| r.within_threshold).collect();
    let xs: Vec<f64> = kept.iter().map(|r| r.ratio.to_f64()).collect();
    let ys: Vec<f64> = kept.iter().map(|r| r.outer_ffn_contribution).collect();
    crate::analysis::spearman(&xs, &ys)
}
