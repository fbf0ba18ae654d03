//! One function per subcommand.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use archlab_core::analysis::ContributionReport;
use archlab_core::arch::{param_count, ArchSpec, Family, Model, Variant};
use archlab_core::data::Tokenizer;
use archlab_core::eval::{evaluate_mcq, read_tasks, select_best_mode, McqTask, Scorer};
use archlab_core::experiment::{
    analyze_model, compare_aligned, ood_losses, sweep_jobs, sweep_rows, sweep_trend, train_run,
    train_runs, CompareOptions, RunArtifacts, SweepRow, LOSS_CSV,
};
use archlab_core::plot::{line_chart, Series};
use archlab_core::train::{align_checkpoints, Checkpoint, LossCurve, DEFAULT_ALIGN_THRESHOLD};
use indexmap::IndexMap;

use crate::cli::*;
use crate::config::{output_root, ConfigError, Loaded, Preset, RunConfig};
use crate::output::*;
use crate::CliError;

type Res<T = ()> = Result<T, CliError>;

fn base_config(cli: &Cli) -> Res<RunConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(_), Some(_)) => {
            return Err(ConfigError(
                "--preset cannot be combined with --config; the config file fixes the architecture"
                    .into(),
            )
            .into())
        }
        (Some(p), None) => RunConfig::from_file(p)?,
        (None, p) => RunConfig::preset(p.unwrap_or(Preset::Desk), Family::Gpt, Variant::Vanilla),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Arch from the preset and the model flags, or from the config file.
fn model_config(cli: &Cli, m: &ModelFlags, default_variant: Variant) -> Res<RunConfig> {
    let mut cfg = base_config(cli)?;
    if cli.config.is_some() {
        if m.family.is_some() || m.variant.is_some() {
            return Err(ConfigError(
                "--family/--variant apply to presets; set arch.family and arch.variant in the config file"
                    .into(),
            )
            .into());
        }
    } else {
        let preset = cli.preset.unwrap_or(Preset::Desk);
        let family = m.family.map(Family::from).unwrap_or(Family::Gpt);
        let variant = m.variant.map(Variant::from).unwrap_or(default_variant);
        let arch = match m.variant {
            Some(VariantArg::Cea) => ArchSpec::cea(family, preset.arch(family, Variant::Caa)),
            Some(VariantArg::CaaAligned) => {
                ArchSpec::caa_aligned(family, preset.arch(family, Variant::Caa))
            }
            _ => preset.arch(family, variant),
        };
        cfg.arch = ArchSpec { vocab: 0, ..arch };
    }
    if let Some(r) = m.ratio {
        cfg.arch = cfg.arch.with_outer_ratio(r);
    }
    Ok(cfg)
}

fn print_config(loaded: &Loaded) {
    print!("{}", loaded.config.to_toml());
}

/// The config as stored in a run directory: absolute data paths, so the
/// run can be reopened from anywhere.
fn stored_config(cfg: &RunConfig, arch: &ArchSpec) -> anyhow::Result<String> {
    let mut c = cfg.clone();
    c.arch = arch.clone();
    let abs = |p: &Path| std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()));
    c.data.manifest = abs(&c.data.manifest)?;
    if let Some(p) = &c.eval.mcq_tasks {
        c.eval.mcq_tasks = Some(abs(p)?);
    }
    if let Some(p) = &c.eval.demo_pool {
        c.eval.demo_pool = Some(abs(p)?);
    }
    Ok(c.to_toml())
}

fn finish_run(
    loaded: &Loaded,
    arch: &ArchSpec,
    art: &RunArtifacts,
) -> anyhow::Result<RunRecord> {
    let dir = &art.dir;
    write_text(&dir.join(CONFIG_FILE), &stored_config(&loaded.config, arch)?)?;
    loaded.tok.save(&dir.join(TOKENIZER_FILE))?;
    let last = art.curve.last();
    let mut record = RunRecord {
        name: art.name.clone(),
        params: param_count(arch)?.total,
        final_step: last.map_or(0, |p| p.0),
        final_dev_loss: last.map(|p| p.1),
        evaluations: art.curve.points().len(),
        checkpoints: art
            .checkpoints
            .iter()
            .filter_map(|p| p.strip_prefix(dir).ok())
            .map(|p| p.to_string_lossy().into_owned())
            .collect(),
        artifacts: Vec::new(),
    };
    record.artifacts = list_files(dir)?;
    record.artifacts.push(RUN_FILE.to_string());
    record.artifacts.sort();
    record.save(dir)?;
    Ok(record)
}

fn default_run_name(arch: &ArchSpec) -> String {
    let family = match arch.family {
        Family::Bert => "bert",
        Family::Gpt => "gpt",
    };
    let variant = match arch.variant {
        Variant::Vanilla => "vanilla".to_string(),
        Variant::FfnWider => "ffn-wider".to_string(),
        Variant::Caa => format!("caa-{}_{}", arch.outer_ratio.num(), arch.outer_ratio.den()),
        Variant::Moe => "moe".to_string(),
        Variant::MoeCea => "moe-cea".to_string(),
    };
    format!("{family}-{variant}")
}

pub fn pretrain(cli: &Cli, args: &PretrainArgs) -> Res {
    let loaded = Loaded::new(model_config(cli, &args.model, Variant::Vanilla)?)?;
    if args.print_config {
        print_config(&loaded);
        return Ok(());
    }
    let name = args
        .name
        .clone()
        .unwrap_or_else(|| default_run_name(&loaded.config.arch));
    let root = output_root(cli.out.as_deref(), &loaded.config);
    let dir = versioned_dir(&root, &name)?;
    log::info!("training {name} into {}", dir.display());
    let arch = loaded.config.arch.clone();
    let art = train_run(
        &name,
        arch.clone(),
        &loaded.config.train,
        &loaded.corpus,
        &loaded.tok,
        &dir,
    )?;
    let record = finish_run(&loaded, &arch, &art)?;
    println!("run: {}", dir.display());
    println!(
        "{}: {} parameters, {} steps, final dev loss {}",
        record.name,
        record.params,
        record.final_step,
        opt_num(record.final_dev_loss)
    );
    Ok(())
}

// ---------------------------------------------------------------------------

fn same_vocab(a: &Tokenizer, b: &Tokenizer) -> bool {
    a.mode() == b.mode()
        && a.vocab_size() == b.vocab_size()
        && (0..a.vocab_size()).all(|i| a.token(i) == b.token(i))
}

struct OpenRun {
    label: String,
    dir: PathBuf,
    loaded: Loaded,
    artifacts: RunArtifacts,
}

fn open_run(dir: &Path, seed: Option<u64>, seen: &mut HashSet<String>) -> Res<OpenRun> {
    let record = RunRecord::load(dir)?;
    let mut cfg = RunConfig::from_file(&dir.join(CONFIG_FILE))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let loaded = Loaded::new(cfg)?;
    let saved = Tokenizer::load(&dir.join(TOKENIZER_FILE))
        .with_context(|| format!("reading the tokenizer of {}", dir.display()))?;
    if !same_vocab(&saved, &loaded.tok) {
        return Err(anyhow!(
            "{}: the corpus changed since this run was trained (tokenizer differs)",
            dir.display()
        )
        .into());
    }
    let mut label = record.name.clone();
    if !seen.insert(label.clone()) {
        let version = dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        label = format!("{}@{version}", record.name);
        let mut n = 2;
        while !seen.insert(label.clone()) {
            label = format!("{}@{version}#{n}", record.name);
            n += 1;
        }
    }
    let artifacts = RunArtifacts::open(&label, dir)?;
    Ok(OpenRun {
        label,
        dir: dir.to_path_buf(),
        loaded,
        artifacts,
    })
}

/// A model to analyze or evaluate, with the data it belongs to.
struct Source {
    label: String,
    step: u64,
    loaded: Loaded,
    model: Model,
}

fn open_source(cli: &Cli, src: &SourceArgs) -> Res<Source> {
    match (&src.run, &src.checkpoint) {
        (Some(dir), None) => {
            let run = open_run(dir, cli.seed, &mut HashSet::new())?;
            let step = match src.step {
                Some(s) => {
                    if run.artifacts.curve.loss_at(s).is_none() {
                        let steps: Vec<u64> =
                            run.artifacts.curve.points().iter().map(|p| p.0).collect();
                        return Err(anyhow!(
                            "{}: no evaluated snapshot at step {s}; available: {steps:?}",
                            dir.display()
                        )
                        .into());
                    }
                    s
                }
                None => run.artifacts.curve.last().expect("open checks").0,
            };
            let model = run.artifacts.load_snapshot(step)?;
            Ok(Source {
                label: format!("{}-step{step}", run.label),
                step,
                loaded: run.loaded,
                model,
            })
        }
        (None, Some(path)) => {
            let loaded = Loaded::new(base_config(cli)?)?;
            let ckpt = Checkpoint::load(path)
                .with_context(|| format!("rejecting checkpoint {}", path.display()))?;
            if ckpt.spec.vocab != loaded.tok.vocab_size() {
                return Err(anyhow!(
                    "checkpoint vocab {} does not match the corpus tokenizer size {}",
                    ckpt.spec.vocab,
                    loaded.tok.vocab_size()
                )
                .into());
            }
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "checkpoint".into());
            Ok(Source {
                label: stem,
                step: ckpt.step,
                model: ckpt.model(),
                loaded,
            })
        }
        _ => Err(ConfigError("give exactly one of --run or --checkpoint".into()).into()),
    }
}

fn write_report(dir: &Path, report: &ContributionReport) -> anyhow::Result<()> {
    let stem = report.metric.as_str();
    report.write_csv(&dir.join(format!("{stem}.csv")))?;
    report.write_svg(&dir.join(format!("{stem}.svg")))?;
    Ok(())
}

pub fn analyze(cli: &Cli, args: &AnalyzeArgs) -> Res {
    let src = open_source(cli, &args.source)?;
    let cfg = &src.loaded.config;
    let corpus = &src.loaded.corpus;
    let docs = match args.docs {
        DocsArg::Dev => &corpus.dev,
        DocsArg::Train => &corpus.train,
    };
    let with_mi = args.method != MethodArg::Tp;
    let sa = analyze_model(
        &src.model,
        docs,
        &src.loaded.tok,
        cfg.train.seq,
        &cfg.analysis,
        cfg.seed,
        with_mi,
    )?;
    let root = output_root(cli.out.as_deref(), cfg);
    let dir = versioned_dir(&root, &format!("analyze-{}", src.label))?;
    let mut summary = serde_json::Map::new();
    summary.insert("source".into(), src.label.clone().into());
    summary.insert("step".into(), src.step.into());
    summary.insert("rows".into(), sa.rows.into());
    let mut reports = Vec::new();
    if args.method != MethodArg::Mi {
        reports.push(&sa.tp);
    }
    if let Some(mi) = &sa.mi {
        reports.push(mi);
    }
    for r in reports {
        write_report(&dir, r)?;
        summary.insert(format!("{}_ffn_ratio", r.metric.as_str()), r.ffn_ratio.into());
        summary.insert(format!("{}_mha_ratio", r.metric.as_str()), r.mha_ratio.into());
        println!(
            "{}: FFN share {:.4}, MHA share {:.4} over {} rows",
            r.metric.as_str().to_uppercase(),
            r.ffn_ratio,
            r.mha_ratio,
            sa.rows
        );
    }
    write_json(&dir.join("summary.json"), &summary)?;
    println!("output: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn eval(cli: &Cli, args: &EvalArgs) -> Res {
    let src = open_source(cli, &args.source)?;
    match args.which {
        WhichEval::Ood => eval_ood(cli, &src),
        WhichEval::Fewshot => eval_fewshot(cli, &src, args.mode.as_deref()),
    }
}

fn eval_ood(cli: &Cli, src: &Source) -> Res {
    let cfg = &src.loaded.config;
    if src.loaded.corpus.ood.is_empty() {
        println!("OOD evaluation disabled: no ood domains are configured for this corpus");
        return Ok(());
    }
    let losses = ood_losses(
        &src.model,
        &src.loaded.corpus,
        &src.loaded.tok,
        cfg.train.seq,
        cfg.eval.ood_max_rows,
    )?;
    let dir = versioned_dir(
        &output_root(cli.out.as_deref(), cfg),
        &format!("eval-{}", src.label),
    )?;
    let header = vec!["domain".to_string(), "loss".to_string()];
    let mut rows: Vec<Vec<String>> = losses
        .iter()
        .map(|(d, l)| vec![d.clone(), num(*l)])
        .collect();
    let mean = losses.values().sum::<f64>() / losses.len() as f64;
    rows.push(vec!["mean".into(), num(mean)]);
    write_csv(&dir.join("ood.csv"), &header, &rows)?;
    print!("{}", markdown_table(&header, &rows));
    println!("output: {}", dir.display());
    Ok(())
}

fn read_task_file(field: &str, path: &Option<PathBuf>) -> Res<Option<Vec<McqTask>>> {
    match path {
        None => Ok(None),
        Some(p) => read_tasks(p)
            .map(Some)
            .map_err(|e| ConfigError(format!("{field}: {}: {e}", p.display())).into()),
    }
}

fn eval_fewshot(cli: &Cli, src: &Source, mode_flag: Option<&str>) -> Res {
    let cfg = &src.loaded.config;
    let mut eval_cfg = cfg.eval.clone();
    if let Some(m) = mode_flag {
        eval_cfg.mode = m.to_string();
    }
    let mode = eval_cfg.scoring_mode()?;
    let tasks = read_task_file("eval.mcq_tasks", &eval_cfg.mcq_tasks)?.ok_or_else(|| {
        ConfigError("eval.mcq_tasks: required for few-shot evaluation".into())
    })?;
    let pool = read_task_file("eval.demo_pool", &eval_cfg.demo_pool)?;
    if pool.is_none() && (mode.is_none() || eval_cfg.fewshot.k_shots > 0) {
        return Err(ConfigError(
            "eval.demo_pool: required for demonstrations and for eval.mode = \"auto\"".into(),
        )
        .into());
    }
    let pool = pool.unwrap_or_default();
    let scorer = Scorer::new(&src.model, &src.loaded.tok)?;
    let dir = versioned_dir(
        &output_root(cli.out.as_deref(), cfg),
        &format!("eval-{}", src.label),
    )?;
    let mode = match mode {
        Some(m) => m,
        None => {
            let (best, table) = select_best_mode(&scorer, &pool)?;
            let header = vec!["mode".to_string(), "accuracy".to_string()];
            let rows: Vec<Vec<String>> = table
                .iter()
                .map(|(m, a)| vec![m.to_string(), num(*a)])
                .collect();
            write_csv(&dir.join("modes.csv"), &header, &rows)?;
            println!("zero-shot accuracy on the demonstration pool:");
            print!("{}", markdown_table(&header, &rows));
            println!("selected mode: {best}");
            best
        }
    };
    let result = evaluate_mcq(&scorer, &tasks, mode, &eval_cfg.fewshot, &pool)?;
    result.write_csv(&dir.join("mcq.csv"))?;
    write_json(
        &dir.join("summary.json"),
        &serde_json::json!({
            "source": src.label,
            "step": src.step,
            "mode": mode.to_string(),
            "k_shots": eval_cfg.fewshot.k_shots,
            "repeats": eval_cfg.fewshot.repeats,
            "accuracy": result.accuracy,
            "per_repeat": result.per_repeat,
            "attempted": result.attempted,
            "skipped": result.skipped,
        }),
    )?;
    println!(
        "{} tasks, {}-shot × {} repeats, mode {mode}: accuracy {:.4} (skipped {} of {})",
        tasks.len(),
        eval_cfg.fewshot.k_shots,
        eval_cfg.fewshot.repeats,
        result.accuracy,
        result.skipped,
        result.attempted
    );
    println!("output: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn alignment_policy(cli: &Cli, a: &AlignFlags, first: Option<&RunConfig>) -> Res<(Option<f64>, f64)> {
    let cfg = match (first, &cli.config) {
        (_, Some(_)) => Some(base_config(cli)?),
        (Some(c), None) => Some(c.clone()),
        (None, None) => None,
    };
    let threshold = a
        .threshold
        .or(cfg.as_ref().map(|c| c.sweep.threshold))
        .unwrap_or(DEFAULT_ALIGN_THRESHOLD);
    let target = a.target.or(cfg.as_ref().and_then(|c| c.sweep.target));
    if !(threshold >= 0.0 && threshold.is_finite()) {
        return Err(ConfigError("--threshold: must be a non-negative number".into()).into());
    }
    Ok((target, threshold))
}

fn flag_note(within: bool) -> String {
    if within { "yes" } else { "NO" }.to_string()
}

pub fn align(cli: &Cli, args: &AlignArgs) -> Res {
    let mut curves = IndexMap::new();
    let mut seen = HashSet::new();
    for dir in &args.runs {
        let record = RunRecord::load(dir)?;
        let curve = LossCurve::read_csv(&dir.join(LOSS_CSV))
            .with_context(|| format!("reading the loss curve of {}", dir.display()))?;
        let mut label = record.name.clone();
        let mut n = 2;
        while !seen.insert(label.clone()) {
            label = format!("{}#{n}", record.name);
            n += 1;
        }
        curves.insert(label, curve);
    }
    let (target, threshold) = alignment_policy(cli, &args.flags, None)?;
    let al = align_checkpoints(&curves, target, threshold)?;
    let header: Vec<String> = [
        "run",
        "step",
        "dev_loss",
        "residual",
        "relative_residual",
        "within_threshold",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = al
        .runs
        .iter()
        .map(|(n, r)| {
            vec![
                n.clone(),
                r.step.to_string(),
                num(r.loss),
                num(r.residual),
                num(r.relative_residual),
                r.within_threshold.to_string(),
            ]
        })
        .collect();
    let root = output_root(cli.out.as_deref(), &base_config(cli)?);
    let dir = versioned_dir(&root, "align")?;
    write_csv(&dir.join("alignment.csv"), &header, &rows)?;
    write_json(&dir.join("alignment.json"), &al)?;
    println!("target dev loss {:.6}, threshold {}", al.target, al.threshold);
    print!("{}", markdown_table(&header, &rows));
    for (n, r) in al.runs.iter().filter(|(_, r)| !r.within_threshold) {
        eprintln!(
            "warning: {n} is {:.2}% away from the target, beyond the threshold",
            100.0 * r.relative_residual
        );
    }
    println!("output: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn report(cli: &Cli, args: &ReportArgs) -> Res {
    let mut seen = HashSet::new();
    let mut runs = Vec::new();
    for dir in &args.runs {
        runs.push(open_run(dir, cli.seed, &mut seen)?);
    }
    let first = &runs[0];
    for r in &runs[1..] {
        if r.loaded.config.data.manifest != first.loaded.config.data.manifest {
            return Err(anyhow!(
                "{} and {} were trained on different corpora",
                first.dir.display(),
                r.dir.display()
            )
            .into());
        }
    }
    let cfg = &first.loaded.config;
    let (target, threshold) = alignment_policy(cli, &args.flags, Some(cfg))?;
    let opts = CompareOptions {
        analysis: cfg.analysis.clone(),
        seq: cfg.train.seq,
        threshold,
        target,
        with_mi: !args.no_mi,
        ood_max_rows: cfg.eval.ood_max_rows,
        seed: cfg.seed,
    };
    let arts: Vec<RunArtifacts> = runs.iter().map(|r| r.artifacts.clone()).collect();
    let cmp = compare_aligned(&arts, &first.loaded.corpus, &first.loaded.tok, &opts)?;
    let domains: Vec<String> = first.loaded.corpus.ood.keys().cloned().collect();
    let mut header: Vec<String> = [
        "run", "family", "variant", "outer_ratio", "params", "step", "dev_loss", "rel_residual",
        "aligned", "tp_ffn_ratio",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    if !args.no_mi {
        header.push("mi_ffn_ratio".into());
    }
    header.extend(domains.iter().map(|d| format!("ood_{d}")));
    if !domains.is_empty() {
        header.push("ood_mean".into());
    }
    let mut rows = Vec::new();
    for r in &cmp.runs {
        let mut row = vec![
            r.name.clone(),
            format!("{:?}", r.spec.family).to_lowercase(),
            default_run_name(&r.spec)
                .split_once('-')
                .map_or(String::new(), |(_, v)| v.to_string()),
            r.spec.outer_ratio.to_string(),
            param_count(&r.spec)?.total.to_string(),
            r.aligned.step.to_string(),
            num(r.aligned.loss),
            num(r.aligned.relative_residual),
            flag_note(r.aligned.within_threshold),
            num(r.analysis.tp.ffn_ratio),
        ];
        if !args.no_mi {
            row.push(opt_num(r.analysis.mi.as_ref().map(|m| m.ffn_ratio)));
        }
        row.extend(domains.iter().map(|d| opt_num(r.ood.get(d).copied())));
        if !domains.is_empty() {
            row.push(opt_num(r.mean_ood()));
        }
        rows.push(row);
    }
    let root = output_root(cli.out.as_deref(), cfg);
    let dir = versioned_dir(&root, "report")?;
    write_csv(&dir.join("comparison.csv"), &header, &rows)?;
    let table = markdown_table(&header, &rows);
    write_text(
        &dir.join("comparison.md"),
        &format!(
            "Aligned at dev loss {:.6} (threshold {}).\n\n{table}",
            cmp.alignment.target, cmp.alignment.threshold
        ),
    )?;
    println!(
        "aligned at dev loss {:.6} (threshold {})",
        cmp.alignment.target, cmp.alignment.threshold
    );
    print!("{table}");
    for r in cmp.runs.iter().filter(|r| !r.aligned.within_threshold) {
        eprintln!(
            "warning: {} could not be aligned ({:.2}% residual); its row is not comparable",
            r.name,
            100.0 * r.aligned.relative_residual
        );
    }
    println!("output: {}", dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------

fn sweep_csv_rows(rows: &[SweepRow]) -> (Vec<String>, Vec<Vec<String>>) {
    let header = [
        "ratio",
        "outer_ffn_contribution",
        "ood_loss",
        "dev_loss",
        "step",
        "within_threshold",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let body = rows
        .iter()
        .map(|r| {
            vec![
                r.ratio.to_string(),
                num(r.outer_ffn_contribution),
                opt_num(r.ood_loss),
                num(r.dev_loss),
                r.step.to_string(),
                r.within_threshold.to_string(),
            ]
        })
        .collect();
    (header, body)
}

fn sweep_svgs(dir: &Path, rows: &[SweepRow]) -> anyhow::Result<()> {
    let kept: Vec<&SweepRow> = rows.iter().filter(|r| r.within_threshold).collect();
    let contrib: Vec<(f64, f64)> = kept
        .iter()
        .map(|r| (r.ratio.to_f64(), r.outer_ffn_contribution))
        .collect();
    write_text(
        &dir.join("sweep_contribution.svg"),
        &line_chart(
            "outer-FFN contribution vs outer width ratio",
            "outer ratio",
            "outer-FFN TP share",
            &[Series::new("outer FFN", contrib)],
        ),
    )?;
    let ood: Vec<(f64, f64)> = kept
        .iter()
        .filter_map(|r| r.ood_loss.map(|l| (r.ratio.to_f64(), l)))
        .collect();
    if !ood.is_empty() {
        write_text(
            &dir.join("sweep_ood.svg"),
            &line_chart(
                "OOD loss vs outer width ratio",
                "outer ratio",
                "mean OOD loss",
                &[Series::new("OOD", ood)],
            ),
        )?;
    }
    Ok(())
}

pub fn sweep(cli: &Cli, args: &SweepArgs) -> Res {
    let mut cfg = model_config(cli, &args.model, Variant::Caa)?;
    if let Some(r) = &args.ratios {
        cfg.sweep.ratios = r.clone();
    }
    if let Some(p) = args.parallelism {
        cfg.sweep.parallelism = p;
    }
    if let Some(t) = args.flags.threshold {
        cfg.sweep.threshold = t;
    }
    if let Some(t) = args.flags.target {
        cfg.sweep.target = Some(t);
    }
    let loaded = Loaded::new(cfg)?;
    if args.print_config {
        print_config(&loaded);
        return Ok(());
    }
    let c = &loaded.config;
    let jobs = sweep_jobs(&c.arch, &c.sweep.ratios)
        .map_err(|e| ConfigError(format!("sweep.ratios: {e}")))?;
    let root = output_root(cli.out.as_deref(), c);
    let dir = versioned_dir(&root, "sweep")?;
    write_text(&dir.join(CONFIG_FILE), &stored_config(c, &c.arch)?)?;
    log::info!(
        "sweeping {} ratios into {} ({} at a time)",
        jobs.len(),
        dir.display(),
        c.sweep.parallelism
    );
    let runs = train_runs(
        &jobs,
        &c.train,
        &loaded.corpus,
        &loaded.tok,
        &dir,
        c.sweep.parallelism,
    )?;
    for (run, (_, spec)) in runs.iter().zip(&jobs) {
        finish_run(&loaded, spec, run)?;
    }
    let opts = CompareOptions {
        analysis: c.analysis.clone(),
        seq: c.train.seq,
        threshold: c.sweep.threshold,
        target: c.sweep.target,
        with_mi: false,
        ood_max_rows: c.eval.ood_max_rows,
        seed: c.seed,
    };
    let cmp = compare_aligned(&runs, &loaded.corpus, &loaded.tok, &opts)?;
    let rows = sweep_rows(&cmp);
    let (header, body) = sweep_csv_rows(&rows);
    write_csv(&dir.join("sweep.csv"), &header, &body)?;
    sweep_svgs(&dir, &rows)?;
    let flagged: Vec<String> = rows
        .iter()
        .filter(|r| !r.within_threshold)
        .map(|r| r.ratio.to_string())
        .collect();
    for r in rows.iter().filter(|r| !r.within_threshold) {
        eprintln!(
            "warning: ratio {} missed the alignment target by more than {}; excluded from the trend",
            r.ratio, c.sweep.threshold
        );
    }
    let used = rows.len() - flagged.len();
    let rho = if used >= 2 { sweep_trend(&rows) } else { None };
    let trend_line = match (used, rho) {
        (0..=1, _) => "trend: not computed (fewer than two aligned ratios)".to_string(),
        (_, None) => "trend: undefined (constant ranks)".to_string(),
        (_, Some(r)) => format!("trend: Spearman(ratio, outer-FFN contribution) = {r:.4} over {used} ratios"),
    };
    write_json(
        &dir.join("trend.json"),
        &serde_json::json!({
            "target": cmp.alignment.target,
            "threshold": cmp.alignment.threshold,
            "ratios_used": used,
            "flagged": flagged,
            "spearman": rho,
        }),
    )?;
    println!(
        "aligned at dev loss {:.6} (threshold {})",
        cmp.alignment.target, cmp.alignment.threshold
    );
    print!("{}", markdown_table(&header, &body));
    println!("{trend_line}");
    println!("output: {}", dir.display());
    Ok(())
}

