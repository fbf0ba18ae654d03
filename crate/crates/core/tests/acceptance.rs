//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each and exits non-zero if any failed. Pass criterion numbers as
//! arguments to run a subset: `cargo test --test acceptance -- 4 5`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::Instant;

use archlab_core::analysis::*;
use archlab_core::arch::*;
use archlab_core::data::*;
use archlab_core::eval::*;
use archlab_core::experiment::*;
use archlab_core::train::*;
use archlab_core::{grad_check, SeededRng, IGNORE_INDEX};
use indexmap::IndexMap;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn err<E: std::fmt::Debug>(e: E) -> String {
    format!("{e:?}")
}

fn toy() -> (Corpus, Tokenizer) {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/toy");
    let (_, corpus) = load_corpus_dir(&dir).expect("shipped toy corpus");
    let tok = Tokenizer::char_level(corpus.all_texts());
    (corpus, tok)
}

fn small(spec: ArchSpec) -> ArchSpec {
    ArchSpec {
        hidden: 16,
        layers: 2,
        max_seq: 8,
        expert_inner: if spec.experts > 0 { 16 } else { 0 },
        ..spec
    }
}

fn reinit(m: &mut Model, part: &str, seed: u64) -> usize {
    let mut rng = SeededRng::new(seed, "reinit");
    let names: Vec<String> = m
        .params
        .names()
        .filter(|n| n.contains(part))
        .map(String::from)
        .collect();
    for n in &names {
        for v in m.params.get_mut(n).unwrap().data_mut() {
            *v = rng.normal() * 0.5;
        }
    }
    names.len()
}

// 1 ------------------------------------------------------------------------

fn grad_variants(vocab: usize) -> Vec<(String, ArchSpec)> {
    let mut out = Vec::new();
    for fam in [Family::Bert, Family::Gpt] {
        let base = |v| small(ArchSpec::desk(fam, v, vocab));
        out.push((format!("{fam:?} vanilla"), base(Variant::Vanilla)));
        out.push((format!("{fam:?} ffn-wider"), base(Variant::FfnWider)));
        for r in ["1/2", "1/8", "0"] {
            out.push((
                format!("{fam:?} caa {r}"),
                base(Variant::Caa).with_outer_ratio(r.parse().unwrap()),
            ));
        }
        let mut nd = base(Variant::Caa).with_outer_ratio("1/2".parse().unwrap());
        nd.direct_pathway = false;
        out.push((format!("{fam:?} caa 1/2 without direct pathway"), nd));
        out.push((format!("{fam:?} moe"), base(Variant::Moe)));
        if fam == Family::Gpt {
            out.push((format!("{fam:?} moe-cea"), base(Variant::MoeCea)));
        }
        let mut tied = base(Variant::Vanilla);
        tied.tie_embeddings = true;
        out.push((format!("{fam:?} vanilla tied head"), tied));
    }
    out.push((
        "pre-rms moe".into(),
        small(ArchSpec::moe_desk(Variant::Moe, vocab)),
    ));
    out.push((
        "pre-rms moe-cea".into(),
        small(ArchSpec::moe_desk(Variant::MoeCea, vocab)),
    ));
    out
}

fn criterion_1() -> Outcome {
    let vocab = 24;
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let variants = grad_variants(vocab);
    for (i, (name, spec)) in variants.iter().enumerate() {
        let model = Model::build(spec.clone(), &SeededRng::new(i as u64, "gc")).map_err(err)?;
        let mut rng = SeededRng::new(i as u64, "gc-batch");
        let mut ids: Vec<usize> = (0..16)
            .map(|_| NUM_SPECIALS + rng.below(vocab - NUM_SPECIALS))
            .collect();
        let targets: Vec<i64> = match spec.family {
            Family::Gpt => ids[1..].iter().map(|&t| t as i64).chain([IGNORE_INDEX]).collect(),
            Family::Bert => {
                let mut t = Vec::new();
                for row in ids.chunks_mut(8) {
                    t.extend(mask_row(row, vocab, &mut rng).map_err(err)?.0);
                }
                t
            }
        };
        let batch = TokenBatch::new(2, 8, ids).map_err(err)?;
        let loss_fn = |p: &archlab_core::ParamStore| {
            let m = Model {
                spec: spec.clone(),
                params: p.clone(),
            };
            let r = m.loss_and_grads(&batch, &targets)?;
            Ok((r.loss, r.grads))
        };
        let gc = grad_check(loss_fn, &model.params, 1e-4, 6).map_err(err)?;
        checked += gc.checked;
        ensure!(
            gc.max_rel_error < 1e-4,
            "{name}: max relative error {:.3e} at {:?}",
            gc.max_rel_error,
            gc.worst
        );
        if gc.max_rel_error >= worst.0 {
            worst = (gc.max_rel_error, name.clone());
        }
    }
    Ok(format!(
        "{} variants, {checked} coordinates, worst {:.2e} ({})",
        variants.len(),
        worst.0,
        worst.1
    ))
}

// 2 ------------------------------------------------------------------------

fn criterion_2() -> Outcome {
    let vocab = 40;
    let mut rng = SeededRng::new(2, "ids");
    let mut ids = |n: usize| {
        (0..n)
            .map(|_| NUM_SPECIALS + rng.below(vocab - NUM_SPECIALS))
            .collect::<Vec<_>>()
    };
    let mut cases = 0;
    for r in ["1/2", "1/8", "0"] {
        let spec =
            ArchSpec::desk(Family::Gpt, Variant::Caa, vocab).with_outer_ratio(r.parse().unwrap());
        let batch = TokenBatch::new(3, 1, ids(3)).map_err(err)?;
        for seed in 0..3 {
            let a = Model::build(spec.clone(), &SeededRng::new(seed, "dp")).map_err(err)?;
            let mut b = a.clone();
            ensure!(
                reinit(&mut b, "inner_ffn", seed + 10) > 0,
                "CAA {r} has no inner FFN parameters"
            );
            let (oa, ob) = (
                a.forward(&batch, None).map_err(err)?,
                b.forward(&batch, None).map_err(err)?,
            );
            ensure!(
                oa.logits.data() == ob.logits.data(),
                "CAA {r}: seq=1 output moved under inner-FFN reinit"
            );
            cases += 1;
        }
        // without the direct pathway the inner FFN is visible
        let mut nd = Model::build(
            ArchSpec {
                direct_pathway: false,
                ..spec.clone()
            },
            &SeededRng::new(0, "dp"),
        )
        .map_err(err)?;
        let before = nd.forward(&batch, None).map_err(err)?.logits;
        reinit(&mut nd, "inner_ffn", 99);
        ensure!(
            nd.forward(&batch, None).map_err(err)?.logits != before,
            "control without direct pathway did not move"
        );
    }
    for spec in [
        ArchSpec::desk(Family::Gpt, Variant::MoeCea, vocab),
        ArchSpec::moe_desk(Variant::MoeCea, vocab),
    ] {
        for seq in [1, 8] {
            let batch = TokenBatch::new(2, seq, ids(2 * seq)).map_err(err)?;
            for seed in 0..3 {
                let a = Model::build(spec.clone(), &SeededRng::new(seed, "cea")).map_err(err)?;
                let mut b = a.clone();
                ensure!(
                    reinit(&mut b, "inner_moe", seed + 20) > 0,
                    "MoE-CEA has no inner MoE parameters"
                );
                let (la, lb) = (
                    a.forward(&batch, None).map_err(err)?.logits,
                    b.forward(&batch, None).map_err(err)?.logits,
                );
                for row in 0..2 {
                    let off = row * seq * vocab;
                    ensure!(
                        la.data()[off..off + vocab] == lb.data()[off..off + vocab],
                        "MoE-CEA ({:?}) position 0 moved under inner-MoE reinit",
                        spec.norm
                    );
                }
                if seq > 1 {
                    ensure!(la != lb, "MoE-CEA later positions ignore the inner MoE");
                }
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} reinitializations, outputs bitwise equal"))
}

// 3 ------------------------------------------------------------------------

fn criterion_3() -> Outcome {
    let mut lines = Vec::new();
    for fam in [Family::Bert, Family::Gpt] {
        let presets: [(&str, fn(Family, Variant) -> ArchSpec); 3] = [
            ("desk", |f, v| ArchSpec::desk(f, v, 48)),
            ("paper-small", ArchSpec::paper_small),
            ("paper-large", ArchSpec::paper_large),
        ];
        for (label, make) in presets {
            let count = |spec: &ArchSpec| param_count(spec).map(|c| c.total).map_err(err);
            let wider = count(&make(fam, Variant::FfnWider))?;
            for r in ["1", "3/4", "1/2", "1/4", "1/8"] {
                let caa = count(&make(fam, Variant::Caa).with_outer_ratio(r.parse().unwrap()))?;
                ensure!(
                    caa == wider,
                    "{fam:?} {label}: CAA({r}) has {caa} parameters, FFN-Wider {wider}"
                );
            }
            let moe = count(&make(fam, Variant::Moe))?;
            // the diagonal-masked pathway only exists under causal attention
            if fam == Family::Gpt {
                let cea = count(&make(fam, Variant::MoeCea))?;
                ensure!(moe == cea, "{fam:?} {label}: MoE {moe} vs MoE-CEA {cea}");
            }
            lines.push(format!("{fam:?} {label} wider {wider} moe {moe}"));
        }
    }
    let vocab = 48;
    let moe = param_count(&ArchSpec::moe_desk(Variant::Moe, vocab))
        .map_err(err)?
        .total;
    let cea = param_count(&ArchSpec::moe_desk(Variant::MoeCea, vocab))
        .map_err(err)?
        .total;
    ensure!(moe == cea, "pre-RMS desk MoE {moe} vs MoE-CEA {cea}");
    for spec in [
        ArchSpec::desk(Family::Gpt, Variant::Caa, vocab).with_outer_ratio("3/4".parse().unwrap()),
        ArchSpec::moe_desk(Variant::MoeCea, vocab),
    ] {
        let built = Model::build(spec.clone(), &SeededRng::new(0, "count")).map_err(err)?;
        let total: usize = built.params.iter().map(|(_, t)| t.len()).sum();
        ensure!(
            total == param_count(&spec).map_err(err)?.total,
            "built model disagrees with param_count"
        );
    }
    Ok(format!(
        "CAA(r) = FFN-Wider for every r, MoE-CEA = MoE; {}",
        lines.join(", ")
    ))
}

// 4 ------------------------------------------------------------------------

fn entropy(ids: &[usize]) -> f64 {
    let mut c: BTreeMap<usize, f64> = BTreeMap::new();
    for &i in ids {
        *c.entry(i).or_default() += 1.0;
    }
    let n = ids.len() as f64;
    -c.values().map(|&k| k / n * (k / n).ln()).sum::<f64>()
}

fn criterion_4() -> Outcome {
    let mut rng = SeededRng::new(4, "mi");
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let (nx, ny) = (2 + rng.below(5), 2 + rng.below(5));
        let table: Vec<Vec<usize>> = (0..nx)
            .map(|_| (0..ny).map(|_| rng.below(12)).collect())
            .collect();
        let mut pairs = Vec::new();
        for (x, row) in table.iter().enumerate() {
            for (y, &c) in row.iter().enumerate() {
                pairs.extend(std::iter::repeat_n((x, y), c));
            }
        }
        if pairs.is_empty() {
            pairs.push((0, 0));
        }
        rng.shuffle(&mut pairs);
        let (xs, ys): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        // plug-in summation over the dense table
        let n = pairs.len() as f64;
        let mut joint = vec![vec![0.0; ny]; nx];
        for &(x, y) in &pairs {
            joint[x][y] += 1.0 / n;
        }
        let px: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
        let py: Vec<f64> = (0..ny).map(|y| joint.iter().map(|r| r[y]).sum()).collect();
        let mut brute = 0.0;
        for x in 0..nx {
            for y in 0..ny {
                if joint[x][y] > 0.0 {
                    brute += joint[x][y] * (joint[x][y] / (px[x] * py[y])).ln();
                }
            }
        }
        let mi = discrete_mi(&xs, &ys).map_err(err)?;
        worst = worst.max((mi - brute.max(0.0)).abs());
        ensure!(
            (mi - brute.max(0.0)).abs() < 1e-12,
            "table {table:?}: {mi} vs brute force {brute}"
        );
    }
    for case in 0..1000 {
        let n = 1 + rng.below(300);
        let (kx, ky) = (1 + rng.below(10), 1 + rng.below(10));
        let xs: Vec<usize> = (0..n).map(|_| rng.below(kx)).collect();
        let ys: Vec<usize> = if case % 5 == 0 {
            xs.iter().map(|x| x % ky).collect()
        } else {
            (0..n).map(|_| rng.below(ky)).collect()
        };
        let mi = discrete_mi(&xs, &ys).map_err(err)?;
        let bound = entropy(&xs).min(entropy(&ys));
        ensure!(
            mi >= 0.0 && mi <= bound + 1e-12,
            "case {case}: MI {mi} outside [0, {bound}]"
        );
    }
    let targets: Vec<usize> = (0..2000).map(|_| NUM_SPECIALS + rng.below(20)).collect();
    let dim = 26;
    let one_hot: Vec<f64> = targets
        .iter()
        .flat_map(|&t| (0..dim).map(move |j| if j == t { 1.0 } else { 0.0 }))
        .collect();
    let noise: Vec<f64> = (0..targets.len() * dim).map(|_| rng.normal()).collect();
    let trace = ActivationTrace::new(
        site_names(1),
        dim,
        vec![noise, one_hot.clone(), one_hot],
        targets.clone(),
    )
    .map_err(err)?;
    let cfg = AnalysisConfig::desk();
    let curve = mi_curve(&trace, cfg.k, cfg.batch_size, 0).map_err(err)?;
    let h = entropy(&targets);
    for &v in &curve[1..] {
        ensure!(
            (v - h).abs() < 1e-9,
            "one-hot site MI {v} vs H(targets) {h}"
        );
    }
    Ok(format!(
        "20 tables (max deviation {worst:.1e}), 1000 bound checks, one-hot site MI = H = {h:.6}"
    ))
}

// 5 ------------------------------------------------------------------------

struct OracleTp {
    kept: Vec<usize>,
    centroids: Vec<Vec<f64>>,
}

fn oracle_tp(reps: &[Vec<f64>], targets: &[usize], min_count: usize) -> OracleTp {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &t in targets {
        *counts.entry(t).or_default() += 1;
    }
    let kept: Vec<usize> = counts
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(&t, _)| t)
        .collect();
    let centroids = kept
        .iter()
        .map(|&t| {
            let dim = reps[0].len();
            let mut sum = vec![0.0; dim];
            let mut used = 0.0;
            for (x, _) in reps.iter().zip(targets).filter(|(_, &y)| y == t) {
                let n = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for j in 0..dim {
                        sum[j] += x[j] / n;
                    }
                    used += 1.0;
                }
            }
            if used > 0.0 {
                sum.iter_mut().for_each(|s| *s /= used);
            }
            sum
        })
        .collect();
    OracleTp { kept, centroids }
}

fn oracle_predict(x: &[f64], o: &OracleTp) -> Option<usize> {
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut best: Option<(usize, f64)> = None;
    for (t, c) in o.kept.iter().zip(&o.centroids) {
        let nc = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nc == 0.0 {
            continue;
        }
        let cos = if nx == 0.0 {
            0.0
        } else {
            x.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / (nx * nc)
        };
        match best {
            Some((_, b)) if cos <= b => {}
            _ => best = Some((*t, cos)),
        }
    }
    best.map(|b| b.0)
}

fn criterion_5() -> Outcome {
    let mut rng = SeededRng::new(5, "tp");
    let mut rows = 0;
    for case in 0..100 {
        let dim = 2 + rng.below(7);
        let n = 20 + rng.below(180);
        let min_count = 1 + rng.below(10);
        let targets: Vec<usize> = (0..n).map(|_| 6 + rng.below(7)).collect();
        let reps: Vec<Vec<f64>> = targets
            .iter()
            .map(|&t| {
                if rng.below(25) == 0 {
                    vec![0.0; dim]
                } else {
                    (0..dim)
                        .map(|j| rng.normal() + if j == t % dim { 1.5 } else { 0.0 })
                        .collect()
                }
            })
            .collect();
        let flat = reps.concat();
        let oracle = oracle_tp(&reps, &targets, min_count);
        let fitted = tp_centroids(&flat, dim, &targets, min_count);
        if oracle.kept.is_empty() {
            ensure!(
                fitted.is_err(),
                "case {case}: expected an error with no kept token"
            );
            continue;
        }
        let fitted = fitted.map_err(err)?;
        ensure!(
            fitted.tokens == oracle.kept,
            "case {case}: kept tokens differ"
        );
        let mut hits = 0;
        let mut total = 0;
        for (x, &t) in reps.iter().zip(&targets) {
            let p = tp_predict(x, &fitted);
            ensure!(
                p == oracle_predict(x, &oracle),
                "case {case}: prediction differs from cosine oracle"
            );
            if oracle.kept.contains(&t) {
                total += 1;
                hits += (p == Some(t)) as usize;
            }
            rows += 1;
        }
        let acc = tp_accuracy(&flat, dim, &targets, &fitted).map_err(err)?;
        ensure!(
            acc == hits as f64 / total as f64,
            "case {case}: accuracy {acc} vs oracle"
        );
    }
    let min_count = AnalysisConfig::paper().min_count;
    let mut reps = Vec::new();
    let mut targets = Vec::new();
    for (tok, count) in [(7usize, min_count - 1), (8, min_count)] {
        for i in 0..count {
            reps.extend([1.0, tok as f64, i as f64 * 0.01]);
            targets.push(tok);
        }
    }
    let c = tp_centroids(&reps, 3, &targets, min_count).map_err(err)?;
    ensure!(
        c.tokens == vec![8],
        "boundary: kept {:?} with min_count {min_count}",
        c.tokens
    );
    Ok(format!(
        "100 instances ({rows} predictions) match the cosine oracle; {} samples dropped, {min_count} kept",
        min_count - 1
    ))
}

// 6, 7 ---------------------------------------------------------------------

fn direction_cfg() -> TrainConfig {
    TrainConfig {
        max_steps: 600,
        warmup_steps: 60,
        eval_every: 5,
        checkpoint_every: 600,
        eval_max_rows: 48,
        seed: 0,
        ..TrainConfig::desk()
    }
}

fn compare_opts(cfg: &TrainConfig) -> CompareOptions {
    CompareOptions {
        analysis: AnalysisConfig::desk(),
        seq: cfg.seq,
        threshold: DEFAULT_ALIGN_THRESHOLD,
        target: None,
        with_mi: true,
        ood_max_rows: 256,
        seed: 0,
    }
}

fn describe(c: &Comparison) -> String {
    c.runs
        .iter()
        .map(|r| {
            format!(
                "{} step {} dev {:.4} (res {:.2}%) TP-ffn {:.3} MI-ffn {:.3}",
                r.name,
                r.aligned.step,
                r.aligned.loss,
                100.0 * r.aligned.relative_residual,
                r.analysis.tp.ffn_ratio,
                r.analysis.mi.as_ref().map_or(f64::NAN, |m| m.ffn_ratio)
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn criterion_6() -> Outcome {
    let (corpus, tok) = toy();
    let cfg = direction_cfg();
    let v = tok.vocab_size();
    let jobs = vec![
        (
            "vanilla".to_string(),
            ArchSpec::desk(Family::Gpt, Variant::Vanilla, v),
        ),
        (
            "ffn-wider".to_string(),
            ArchSpec::desk(Family::Gpt, Variant::FfnWider, v),
        ),
    ];
    ensure!(
        jobs[0].1.ffn_mult == 4 && jobs[1].1.ffn_mult == 32 && jobs[0].1.hidden == 64,
        "unexpected desk shapes"
    );
    let dir = tempfile::tempdir().map_err(err)?;
    let runs = train_runs(&jobs, &cfg, &corpus, &tok, dir.path(), 1).map_err(err)?;
    let cmp = compare_aligned(&runs, &corpus, &tok, &compare_opts(&cfg)).map_err(err)?;
    let detail = describe(&cmp);
    cmp.alignment
        .require_all()
        .map_err(|e| format!("{e:?}; {detail}"))?;
    let (van, wide) = (&cmp.runs[0].analysis.tp, &cmp.runs[1].analysis.tp);
    ensure!(
        wide.ffn_ratio > van.ffn_ratio,
        "TP ffn_ratio wider {:.3} <= vanilla {:.3}; {detail}",
        wide.ffn_ratio,
        van.ffn_ratio
    );
    Ok(detail)
}

fn criterion_7() -> Outcome {
    let (corpus, tok) = toy();
    let cfg = direction_cfg();
    let ratios: Vec<Ratio> = ["1", "1/2", "0"]
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    let base = ArchSpec::desk(Family::Gpt, Variant::Caa, tok.vocab_size());
    let jobs = sweep_jobs(&base, &ratios).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    let runs = train_runs(&jobs, &cfg, &corpus, &tok, dir.path(), 1).map_err(err)?;
    let cmp = compare_aligned(&runs, &corpus, &tok, &compare_opts(&cfg)).map_err(err)?;
    let detail = describe(&cmp);
    cmp.alignment
        .require_all()
        .map_err(|e| format!("{e:?}; {detail}"))?;
    let rows = sweep_rows(&cmp);
    let rho = sweep_trend(&rows).ok_or_else(|| format!("Spearman undefined; {detail}"))?;
    let ood: Vec<f64> = rows
        .iter()
        .map(|r| r.ood_loss.unwrap_or(f64::NAN))
        .collect();
    let soft_ok = ood[1] <= 1.02 * ood[0] || ood[2] <= 1.02 * ood[0];
    let soft = format!(
        "soft OOD check {}: r=1 {:.4}, r=1/2 {:.4} ({:+.2}%), r=0 {:.4} ({:+.2}%)",
        if soft_ok { "met" } else { "NOT met" },
        ood[0],
        ood[1],
        100.0 * (ood[1] / ood[0] - 1.0),
        ood[2],
        100.0 * (ood[2] / ood[0] - 1.0)
    );
    ensure!(
        rho > 0.0,
        "Spearman {rho:.3} not positive; {detail}; {soft}"
    );
    Ok(format!("Spearman {rho:.3}; {soft}; {detail}"))
}

// 8 ------------------------------------------------------------------------

fn criterion_8() -> Outcome {
    let (corpus, tok) = toy();
    let v = tok.vocab_size();
    let bound = 0.8 * (v as f64).ln();
    let mut report = Vec::new();
    for family in [Family::Gpt, Family::Bert] {
        let cfg = TrainConfig::desk();
        ensure!(cfg.max_steps == 2000, "desk preset is not a 2k-step budget");
        let obj = Objective::from(family);
        let sampler =
            BatchSampler::new(&corpus.train, &tok, obj, cfg.seq, cfg.batch).map_err(err)?;
        let dev = dev_batches(&corpus, &tok, obj, &cfg).map_err(err)?;
        let model = Model::build(
            ArchSpec::desk(family, Variant::Vanilla, v),
            &SeededRng::new(cfg.seed, "model"),
        )
        .map_err(err)?;
        let mut t = Trainer::new(model, cfg.clone(), &sampler, &dev).map_err(err)?;
        let mut reached = None;
        while t.step < cfg.max_steps {
            t.train_step().map_err(err)?;
            if t.step % cfg.eval_every == 0 {
                let d = t.dev_loss().map_err(err)?;
                if d < bound {
                    reached = Some((t.step, d));
                    break;
                }
            }
        }
        let (step, d) =
            reached.ok_or_else(|| format!("{family:?} did not reach {bound:.3} in 2000 steps"))?;
        report.push(format!("{family:?} {d:.3} at step {step}"));

        let short = TrainConfig {
            max_steps: 40,
            warmup_steps: 4,
            eval_every: 10,
            checkpoint_every: 20,
            ..cfg
        };
        let dir = tempfile::tempdir().map_err(err)?;
        let fresh = || {
            Model::build(
                ArchSpec::desk(family, Variant::Vanilla, v),
                &SeededRng::new(1, "model"),
            )
        };
        let mut full =
            Trainer::new(fresh().map_err(err)?, short.clone(), &sampler, &dev).map_err(err)?;
        full.run(Some(dir.path()), |_, _| Ok(())).map_err(err)?;
        let mid = Checkpoint::load(&checkpoint_path(dir.path(), 20)).map_err(err)?;
        let mut resumed =
            Trainer::resume(mid, full.curve.clone(), short.clone(), &sampler, &dev).map_err(err)?;
        resumed.run(None, |_, _| Ok(())).map_err(err)?;
        let a = full
            .checkpoint(full.curve.last().map(|p| p.1), true)
            .to_bytes()
            .map_err(err)?;
        let b = resumed
            .checkpoint(resumed.curve.last().map(|p| p.1), true)
            .to_bytes()
            .map_err(err)?;
        ensure!(
            a == b,
            "{family:?}: resumed run differs from uninterrupted run"
        );
        ensure!(
            full.curve == resumed.curve,
            "{family:?}: resumed loss curve differs"
        );
    }
    Ok(format!(
        "bound 0.8 ln V = {bound:.3}: {}; resume bitwise-identical",
        report.join(", ")
    ))
}

// 9 ------------------------------------------------------------------------

fn criterion_9() -> Outcome {
    let (_, tok) = toy();
    let spec = ArchSpec {
        max_seq: 512,
        ..ArchSpec::desk(Family::Gpt, Variant::Vanilla, tok.vocab_size())
    };
    let model = Model::build(spec, &SeededRng::new(9, "untrained")).map_err(err)?;
    let scorer = Scorer::new(&model, &tok).map_err(err)?;
    let (tasks, pool) = synthetic_record_split(200, 40, 9);
    let sigma = (0.25f64 * 0.75 / 200.0).sqrt();
    let (best, table) = select_best_mode(&scorer, &tasks).map_err(err)?;
    ensure!(table.len() == 6, "grid has {} modes", table.len());
    let modes: Vec<ScoringMode> = table.iter().map(|t| t.0).collect();
    ensure!(
        modes == ScoringMode::grid().to_vec(),
        "table is not in grid order"
    );
    let mut all = Vec::new();
    for span in [Span::OptionOnly, Span::FullSequence] {
        for ln in [false, true] {
            for un in [false, true] {
                all.push(ScoringMode::new(span, ln, un));
            }
        }
    }
    let valid: Vec<ScoringMode> = all.iter().copied().filter(|m| m.is_valid()).collect();
    ensure!(
        valid.len() == 6 && valid.iter().all(|m| modes.contains(m)),
        "grid is not every valid mode"
    );
    ensure!(
        all.iter()
            .filter(|m| !m.is_valid())
            .all(|m| scorer.score_option("a", "b", *m).is_err()),
        "an invalid mode was scored"
    );
    let top = table.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    ensure!(
        best == table.iter().find(|t| t.1 == top).unwrap().0,
        "best mode is not the first maximum"
    );
    let mut accs = Vec::new();
    for (mode, acc) in &table {
        let r =
            evaluate_mcq(&scorer, &tasks, *mode, &FewShotConfig::zero_shot(), &[]).map_err(err)?;
        ensure!(
            r.accuracy == *acc,
            "{mode}: table {acc} vs evaluate_mcq {}",
            r.accuracy
        );
        ensure!(
            (acc - 0.25).abs() <= 3.0 * sigma,
            "{mode}: accuracy {acc:.3} outside chance ± 3σ ({sigma:.3})"
        );
        accs.push(format!("{mode} {acc:.3}"));
    }
    let subset = &tasks[..20];
    for (cfg, k, repeats) in [
        (FewShotConfig::one_shot(), 1, 10),
        (FewShotConfig::five_shot(), 5, 5),
    ] {
        ensure!(cfg.k_shots == k && cfg.repeats == repeats, "preset {cfg:?}");
        for r in 0..repeats {
            ensure!(
                draw_demos(&pool, &cfg, r).map_err(err)?.len() == k,
                "repeat {r} drew the wrong count"
            );
        }
        let res = evaluate_mcq(&scorer, subset, best, &cfg, &pool).map_err(err)?;
        ensure!(
            res.per_repeat.len() == repeats,
            "{} repeats run",
            res.per_repeat.len()
        );
        ensure!(
            res.attempted == subset.len() * repeats && res.skipped == 0,
            "attempted {}",
            res.attempted
        );
        ensure!(
            res.records.len() == subset.len() * repeats,
            "{} records",
            res.records.len()
        );
    }
    Ok(format!(
        "chance 0.25 ± {:.3}: {}; best {best}; 1×10 and 5×5 presets exact",
        3.0 * sigma,
        accs.join(", ")
    ))
}

// 10 -----------------------------------------------------------------------

fn criterion_10() -> Outcome {
    let mut rng = SeededRng::new(10, "align");
    let mut refusals = 0;
    for case in 0..100 {
        let runs = 1 + rng.below(5);
        let mut curves = IndexMap::new();
        for r in 0..runs {
            let n = 1 + rng.below(12);
            let mut step = 0;
            let pts: Vec<(u64, f64)> = (0..n)
                .map(|_| {
                    step += 1 + rng.below(50) as u64;
                    // coarse grid so that ties occur
                    (step, 1.0 + rng.below(40) as f64 * 0.125)
                })
                .collect();
            curves.insert(format!("run{r}"), LossCurve::from_points(pts).map_err(err)?);
        }
        let target = if case % 2 == 0 {
            None
        } else {
            Some(1.0 + rng.below(40) as f64 * 0.125)
        };
        let threshold = [0.0, 0.01, 0.05, 0.2][rng.below(4)];
        let al = align_checkpoints(&curves, target, threshold).map_err(err)?;
        let want_target = target.unwrap_or_else(|| {
            curves
                .values()
                .map(|c| c.points().last().unwrap().1)
                .fold(f64::NEG_INFINITY, f64::max)
        });
        ensure!(
            al.target == want_target,
            "case {case}: target {} vs {want_target}",
            al.target
        );
        let mut all_ok = true;
        for (name, c) in &curves {
            let mut best_d = f64::INFINITY;
            let mut best: Option<(u64, f64)> = None;
            for &(s, l) in c.points() {
                let d = (l - want_target).abs();
                if d < best_d {
                    best_d = d;
                    best = Some((s, l));
                }
            }
            let (s, l) = best.unwrap();
            let got = &al.runs[name];
            ensure!(
                got.step == s && got.loss == l,
                "case {case} {name}: step {} vs oracle {s}",
                got.step
            );
            let rel = best_d / want_target;
            ensure!(
                got.within_threshold == (rel <= threshold),
                "case {case} {name}: threshold flag"
            );
            all_ok &= rel <= threshold;
        }
        ensure!(
            al.require_all().is_ok() == all_ok,
            "case {case}: refusal mismatch"
        );
        refusals += (!all_ok) as usize;
    }
    let mut curves = IndexMap::new();
    curves.insert(
        "a".to_string(),
        LossCurve::from_points(vec![(1, 3.0), (2, 2.0)]).map_err(err)?,
    );
    ensure!(
        align_checkpoints(&curves, Some(1.0), 0.01)
            .map_err(err)?
            .require_all()
            .is_err(),
        "unreachable target accepted"
    );
    curves.insert("empty".to_string(), LossCurve::new());
    ensure!(
        align_checkpoints(&curves, None, 0.01).is_err(),
        "empty curve accepted"
    );
    Ok(format!(
        "100 fuzzed cases match the nearest-point oracle ({refusals} refused)"
    ))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", criterion_1),
        (2, "direct pathway invariance", criterion_2),
        (3, "parameter conservation", criterion_3),
        (4, "MI estimator", criterion_4),
        (5, "TP probe", criterion_5),
        (6, "direction A: FFN-Wider vs vanilla", criterion_6),
        (7, "direction B: outer-ratio sweep", criterion_7),
        (8, "training sanity and resume", criterion_8),
        (9, "few-shot scorer", criterion_9),
        (10, "alignment selector", criterion_10),
    ];
    let wanted: Vec<u32> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS [{name}] ({secs:.1}s) {detail}"),
            Err(detail) => {
                println!("criterion {n:>2} FAIL [{name}] ({secs:.1}s) {detail}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: {} failed: {failed:?}", failed.len());
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
