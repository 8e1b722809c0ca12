use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use seca_core::datastream::{gen_synthetic, write_feature_bank, FeatureBank, SplitRule};
use seca_core::sevpr::ClassifierVariant;
use seca_core::sgakt::DistillStrategy;
use seca_core::theory::{check_grid, InstanceReport};
use seca_core::trainer::{
    accuracy, checkpoint, load_stream, run_stream, union_test, BetaSchedule, DataSource, Metrics, PoolMax,
    RunConfig, TaskMetric,
};

use crate::args::{EvalArgs, GenDataArgs, ReportArgs, RunArgs, SweepArgs, SweepParam, TheoryArgs, TrainArgs};
use crate::error::{code, CliError, CliResult};
use crate::io::{ensure_dir, load_config, worker_threads, write_text};
use crate::manifest::{Manifest, SweepSpec};
use crate::report::{Report, ReportRow, RunResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.seca";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.json";
pub const THEORY_FILE: &str = "theory.json";
pub const BANK_FILE: &str = "bank.fb";
pub const BANK_CONFIG_FILE: &str = "config.json";

#[derive(Debug, Serialize)]
struct Summary<'a> {
    last: f64,
    avg: f64,
    per_task: &'a [TaskMetric],
}

fn metrics_csv(m: &Metrics) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["task", "seen_classes", "acc"]).expect("in-memory write");
    for t in &m.per_task {
        w.write_record([t.task.to_string(), t.seen_classes.to_string(), t.acc.to_string()])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn write_metrics(dir: &Path, m: &Metrics) -> CliResult<()> {
    write_text(&dir.join(METRICS_FILE), &metrics_csv(m))?;
    let summary = Summary {
        last: m.last,
        avg: m.avg,
        per_task: &m.per_task,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    write_text(&dir.join(SUMMARY_FILE), &(json + "\n"))
}

fn base_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = load_config(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let cfg = base_config(args.config.as_deref(), args.seed)?;
    ensure_dir(&args.out)?;
    let stream = load_stream(&cfg)?;
    let (state, metrics) = run_stream(cfg.clone(), &stream, |_, summary, metric| {
        eprintln!(
            "task {}: acc {:.2}% over {} classes ({} steps, pool {})",
            metric.task, metric.acc, metric.seen_classes, summary.steps, summary.pool_size
        );
    })?;
    checkpoint::save(&state, &args.out.join(CHECKPOINT_FILE))?;
    write_metrics(&args.out, &metrics)?;
    let mut manifest = Manifest::new("train");
    manifest.seed = Some(cfg.seed);
    manifest.config = Some(cfg);
    manifest.write(&args.out)?;
    println!("last {:.2} avg {:.2}", metrics.last, metrics.avg);
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    tasks_done: usize,
    seen_classes: usize,
    acc: f64,
    /// Accuracy on each task's own test set, same prediction space.
    per_task: Vec<f64>,
}

pub fn eval(args: &EvalArgs) -> CliResult<()> {
    let state = checkpoint::load(&args.checkpoint)?;
    let mut cfg = state.config.clone();
    if let Some(p) = &args.config {
        cfg.data = load_config(Some(p))?.data;
    }
    let stream = load_stream(&cfg)?;
    let done = state.tasks_done();
    if done == 0 {
        return Err(CliError::new(code::OTHER, "checkpoint has not trained any task"));
    }
    if done > stream.tasks.len() || (0..done).any(|i| state.task_classes[i] != stream.tasks[i].classes) {
        return Err(CliError::config("data stream does not match the classes the checkpoint was trained on"));
    }
    ensure_dir(&args.out)?;
    let test = union_test(&stream, done)?;
    let acc = accuracy(&state.predict(&test.xs)?, &test.labels)?;
    let mut per_task = Vec::with_capacity(done);
    for task in &stream.tasks[..done] {
        per_task.push(accuracy(&state.predict(&task.test.xs)?, &task.test.labels)?);
    }
    let out = EvalOutput {
        tasks_done: done,
        seen_classes: state.seen().len(),
        acc,
        per_task,
    };
    let json = serde_json::to_string_pretty(&out).expect("eval serializes");
    write_text(&args.out.join(EVAL_FILE), &(json + "\n"))?;
    let mut manifest = Manifest::new("eval");
    manifest.seed = Some(cfg.seed);
    manifest.inputs = vec![args.checkpoint.display().to_string()];
    manifest.config = Some(cfg);
    manifest.write(&args.out)?;
    println!("acc {acc:.2} over {} tasks", done);
    Ok(())
}

pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

fn thread_pool() -> CliResult<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = worker_threads()? {
        b = b.num_threads(n);
    }
    b.build()
        .map_err(|e| CliError::new(code::OTHER, format!("thread pool: {e}")))
}

/// Runs every variant for `trials` seeds. Trial k of every variant uses the
/// same shifted seeds, so variants see identical data and initial weights.
/// Each run writes its own files under `runs/<variant>/seed-<n>/`.
pub fn run_variants(variants: &[Variant], trials: u64, out: &Path) -> CliResult<Report> {
    if trials == 0 {
        return Err(CliError::config("--trials must be at least 1"));
    }
    let mut names = BTreeSet::new();
    for v in variants {
        v.config.validate().map_err(|e| CliError::from(e).context(&v.name))?;
        if !names.insert(v.name.as_str()) {
            return Err(CliError::config(format!("duplicate variant {}", v.name)));
        }
    }
    let jobs: Vec<(usize, u64)> = (0..variants.len())
        .flat_map(|v| (0..trials).map(move |k| (v, k)))
        .collect();
    let run_one = |&(v, k): &(usize, u64)| -> CliResult<RunResult> {
        let variant = &variants[v];
        let cfg = variant.config.trial(k);
        let label = format!("{} seed {}", variant.name, cfg.seed);
        let stream = load_stream(&cfg).map_err(|e| CliError::from(e).context(&label))?;
        let (_, metrics) = run_stream(cfg.clone(), &stream, |_, _, _| {}).map_err(|e| CliError::from(e).context(&label))?;
        let dir = out.join("runs").join(&variant.name).join(format!("seed-{}", cfg.seed));
        ensure_dir(&dir)?;
        write_metrics(&dir, &metrics)?;
        eprintln!("{label}: last {:.2} avg {:.2}", metrics.last, metrics.avg);
        Ok(RunResult::new(cfg.seed, &metrics))
    };
    let results: Vec<CliResult<RunResult>> = thread_pool()?.install(|| jobs.par_iter().map(run_one).collect());
    let mut results = results.into_iter();
    let mut rows = Vec::with_capacity(variants.len());
    for v in variants {
        let runs = results.by_ref().take(trials as usize).collect::<CliResult<Vec<_>>>()?;
        rows.push(ReportRow::from_runs(&v.name, runs)?);
    }
    Ok(Report { rows })
}

fn finish_report(command: &str, args: &RunArgs, base: RunConfig, variants: &[Variant], sweep: Option<SweepSpec>) -> CliResult<()> {
    ensure_dir(&args.out)?;
    let report = run_variants(variants, args.trials, &args.out)?;
    report.write_all(&args.out)?;
    let mut manifest = Manifest::new(command);
    manifest.seed = Some(base.seed);
    manifest.trials = Some(args.trials);
    manifest.sweep = sweep;
    manifest.variants = variants.iter().map(|v| v.name.clone()).collect();
    manifest.config = Some(base);
    manifest.write(&args.out)?;
    print!("{}", report.to_markdown());
    Ok(())
}

/// Names are `<strategy>+<classifier>`; the classifier is the prototype
/// one or text-only.
pub fn distill_variants(base: &RunConfig) -> Vec<Variant> {
    let mut out = Vec::new();
    for classifier in [ClassifierVariant::OnlyText, ClassifierVariant::Sevpr] {
        for distill in DistillStrategy::ALL {
            let mut config = base.clone();
            config.distill = distill;
            config.classifier = classifier;
            out.push(Variant {
                name: format!("{}+{}", distill.name(), classifier.name()),
                config,
            });
        }
    }
    out
}

pub fn classifier_variants(base: &RunConfig) -> Vec<Variant> {
    ClassifierVariant::ALL
        .into_iter()
        .map(|classifier| {
            let mut config = base.clone();
            config.classifier = classifier;
            Variant {
                name: classifier.name().to_string(),
                config,
            }
        })
        .collect()
}

pub fn sweep_variants(base: &RunConfig, param: SweepParam, values: &[String]) -> CliResult<Vec<Variant>> {
    let mut out = Vec::with_capacity(values.len());
    for raw in values {
        let raw = raw.trim();
        let mut config = base.clone();
        match param {
            SweepParam::Beta => config.beta = BetaSchedule::parse(raw)?,
            SweepParam::TauPrime => {
                config.tau_prime = raw
                    .parse()
                    .map_err(|_| CliError::config(format!("tau_prime value {raw:?} is not a number")))?
            }
            SweepParam::Pool => config.pool_max = PoolMax::parse(raw)?,
            SweepParam::Width => {
                config.encoder.width = raw
                    .parse()
                    .map_err(|_| CliError::config(format!("width value {raw:?} is not a positive integer")))?
            }
        }
        config
            .validate()
            .map_err(|e| CliError::from(e).context(format!("{}={raw}", param.name())))?;
        out.push(Variant {
            name: format!("{}={raw}", param.name()),
            config,
        });
    }
    Ok(out)
}

pub fn ablate_distill(args: &RunArgs) -> CliResult<()> {
    let base = base_config(args.config.as_deref(), args.seed)?;
    let variants = distill_variants(&base);
    finish_report("ablate-distill", args, base, &variants, None)
}

pub fn ablate_classifier(args: &RunArgs) -> CliResult<()> {
    let base = base_config(args.config.as_deref(), args.seed)?;
    let variants = classifier_variants(&base);
    finish_report("ablate-classifier", args, base, &variants, None)
}

pub fn sweep(args: &SweepArgs) -> CliResult<()> {
    let base = base_config(args.run.config.as_deref(), args.run.seed)?;
    let variants = sweep_variants(&base, args.param, &args.values)?;
    let spec = SweepSpec {
        param: args.param.name().to_string(),
        values: args.values.clone(),
    };
    finish_report("sweep", &args.run, base, &variants, Some(spec))
}

#[derive(Debug, Serialize)]
struct TheoryOutput<'a> {
    seed: u64,
    instances: usize,
    failed: usize,
    worst_abs_diff: f64,
    worst_probe_gap: f64,
    reports: &'a [InstanceReport],
}

pub fn theory_check(args: &TheoryArgs) -> CliResult<()> {
    ensure_dir(&args.out)?;
    let reports = check_grid(args.seed, args.instances, args.probes)?;
    let failed = reports.iter().filter(|r| !r.passed).count();
    let out = TheoryOutput {
        seed: args.seed,
        instances: reports.len(),
        failed,
        worst_abs_diff: reports.iter().map(|r| r.max_abs_diff).fold(0.0, f64::max),
        worst_probe_gap: reports.iter().map(|r| r.min_probe_gap).fold(f64::INFINITY, f64::min),
        reports: &reports,
    };
    let json = serde_json::to_string_pretty(&out).expect("theory report serializes");
    write_text(&args.out.join(THEORY_FILE), &(json + "\n"))?;
    let mut manifest = Manifest::new("theory-check");
    manifest.seed = Some(args.seed);
    manifest.write(&args.out)?;
    println!(
        "{} instances, {failed} failed, worst weight gap {:.3e}, worst probe margin {:.3e}",
        out.instances, out.worst_abs_diff, out.worst_probe_gap
    );
    if failed > 0 {
        return Err(CliError::new(code::OTHER, format!("{failed} of {} instances failed", out.instances)));
    }
    Ok(())
}

/// Writes `bank.fb`, its name manifest, and a `config.json` that trains on
/// the bank with the same task count.
pub fn gen_data(args: &GenDataArgs) -> CliResult<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    let DataSource::Synthetic(spec) = &mut cfg.data else {
        return Err(CliError::config("gen-data needs a synthetic data source"));
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let spec = spec.clone();
    ensure_dir(&args.out)?;
    let stream = gen_synthetic(&spec)?;
    let bank = FeatureBank::from_stream(&stream);
    write_feature_bank(&args.out.join(BANK_FILE), &bank)?;
    let mut bank_cfg = cfg.clone();
    bank_cfg.data = DataSource::FeatureBank {
        path: BANK_FILE.into(),
        split: SplitRule {
            num_tasks: spec.num_tasks,
            train_ratio: spec.train_per_class as f64 / (spec.train_per_class + spec.test_per_class) as f64,
            seed: spec.seed,
        },
    };
    write_text(&args.out.join(BANK_CONFIG_FILE), &(bank_cfg.to_json() + "\n"))?;
    let mut manifest = Manifest::new("gen-data");
    manifest.seed = Some(spec.seed);
    manifest.config = Some(cfg);
    manifest.write(&args.out)?;
    println!("{} samples, {} classes, dim {}", bank.num_samples(), bank.num_classes, bank.dim);
    Ok(())
}

/// Rows from a directory: its report, or a one-row report from a training
/// summary.
fn rows_of(dir: &Path, manifest: &Manifest) -> CliResult<Vec<ReportRow>> {
    if dir.join(crate::report::REPORT_FILE).exists() {
        return Ok(Report::read(dir)?.rows);
    }
    let path = dir.join(SUMMARY_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let v: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::malformed(format!("{}: {e}", path.display())))?;
    let bad = || CliError::malformed(format!("{}: expected last, avg and per_task", path.display()));
    let num = |k: &str| v.get(k).and_then(serde_json::Value::as_f64).ok_or_else(bad);
    let per_task = v
        .get("per_task")
        .and_then(serde_json::Value::as_array)
        .ok_or_else(bad)?
        .iter()
        .map(|t| t.get("acc").and_then(serde_json::Value::as_f64).ok_or_else(bad))
        .collect::<CliResult<Vec<_>>>()?;
    let cfg = manifest.config.as_ref().ok_or_else(bad)?;
    let run = RunResult {
        seed: cfg.seed,
        last: num("last")?,
        avg: num("avg")?,
        per_task,
    };
    let name = format!("{}+{}", cfg.distill.name(), cfg.classifier.name());
    Ok(vec![ReportRow::from_runs(&name, vec![run])?])
}

pub fn report(args: &ReportArgs) -> CliResult<()> {
    let mut rows: Vec<ReportRow> = Vec::new();
    for (i, dir) in args.inputs.iter().enumerate() {
        let manifest = Manifest::read(dir)?;
        for mut row in rows_of(dir, &manifest)? {
            if rows.iter().any(|r| r.variant == row.variant) {
                row.variant = format!("{}@{}", row.variant, i + 1);
            }
            rows.push(row);
        }
    }
    let report = Report { rows };
    ensure_dir(&args.out)?;
    write_text(
        &args.out.join(format!("report.{}", args.format.extension())),
        &report.render(args.format),
    )?;
    write_text(&args.out.join(crate::report::CURVES_FILE), &report.curves_csv())?;
    let mut manifest = Manifest::new("report");
    manifest.inputs = args.inputs.iter().map(|p| p.display().to_string()).collect();
    manifest.variants = report.rows.iter().map(|r| r.variant.clone()).collect();
    manifest.write(&args.out)?;
    print!("{}", report.render(args.format));
    Ok(())
}
