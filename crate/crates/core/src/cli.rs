//! Experiment runner behind the `shrinklab` binary: plan parsing, per-seed runs,
//! artifact writing, cross-run summaries and the stored-artifact audit.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Regime, TrainConfig};
use crate::diagnostics::{diagnose, histogram_of, DiagnosisInput, DiagnosticsReport, EmbeddingHistogram};
use crate::error::Error;
use crate::matrix::Matrix;
use crate::nn::{Autoencoder, Checkpoint, MlpParams};
use crate::oracle::{lloyd_max_1d, monte_carlo_distortion};
use crate::quantizer::CodebookDump;
use crate::synth::{generate, LabeledDataset};
use crate::textfmt::{fmt_g9, matrix_from_csv, matrix_to_csv, write_atomic};
use crate::trainer::{fresh_params, reconstruct, run_regime, TrainLog};

pub const THREADS_ENV: &str = "SHRINKLAB_THREADS";

/// Failure classes of a CLI invocation, each with its own exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Training(String),
    #[error("{0}")]
    CheckMismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Training(_) => 2,
            CliError::CheckMismatch(_) => 3,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::TrainingFault { .. } | Error::NonFinite(_) => CliError::Training(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn with_path(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanRun {
    pub name: String,
    /// Config path, relative to the plan file.
    pub config: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Relative paths resolve against the working directory.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default, rename = "run")]
    pub runs: Vec<PlanRun>,
    #[serde(default, rename = "compare")]
    pub comparisons: Vec<Comparison>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("shrinklab_out")
}

/// A plan with every config loaded and validated.
#[derive(Debug, Clone)]
pub struct LoadedPlan {
    pub plan: ExperimentPlan,
    pub configs: Vec<TrainConfig>,
}

impl ExperimentPlan {
    pub fn from_toml_str(text: &str) -> CliResult<Self> {
        let plan: ExperimentPlan =
            toml::from_str(text).map_err(|e| CliError::Config(format!("plan: {}", e.message())))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.runs.is_empty() {
            return Err(CliError::Config("plan has no [[run]] entries".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("plan `seeds` is empty".into()));
        }
        let mut names = HashSet::new();
        for r in &self.runs {
            if r.name.is_empty() || r.name.contains(['/', '\\']) || r.name.starts_with('.') {
                return Err(CliError::Config(format!("run name `{}` is not a plain directory name", r.name)));
            }
            if !names.insert(r.name.as_str()) {
                return Err(CliError::Config(format!("duplicate run name `{}`", r.name)));
            }
        }
        let mut seen = HashSet::new();
        for s in &self.seeds {
            if !seen.insert(s) {
                return Err(CliError::Config(format!("duplicate seed {s}")));
            }
        }
        for c in &self.comparisons {
            for side in [&c.baseline, &c.candidate] {
                if !names.contains(side.as_str()) {
                    return Err(CliError::Config(format!("comparison references unknown run `{side}`")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> CliResult<LoadedPlan> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read plan {}: {e}", path.display())))?;
        let plan = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let configs = plan
            .runs
            .iter()
            .map(|r| {
                let p = base.join(&r.config);
                TrainConfig::load(&p).map_err(|e| CliError::Config(format!("run `{}` ({}): {e}", r.name, p.display())))
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(LoadedPlan { plan, configs })
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
    pub check: bool,
}

/// Parses `--seed-list` values such as `0,1,2`.
pub fn parse_seed_list(text: &str) -> CliResult<Vec<u64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| CliError::Config(format!("bad seed `{}` in --seed-list", s.trim())))
        })
        .collect()
}

pub fn job_dir(out_dir: &Path, run: &str, seed: u64) -> PathBuf {
    out_dir.join(run).join(format!("seed_{seed}"))
}

struct Job<'a> {
    run: &'a str,
    seed: u64,
    config: TrainConfig,
    dir: PathBuf,
}

/// Per-job scalar metrics, in output order.
type JobMetrics = Vec<(String, f64)>;

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    /// `(run, seed, metric, value)` in plan order.
    pub rows: Vec<(String, u64, String, f64)>,
}

fn thread_count() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// `shrinklab run`: trains every run for every seed, or with `check` set,
/// recomputes every stored report and compares bytes.
pub fn run_plan(plan_path: &Path, opts: &RunOptions) -> CliResult<RunSummary> {
    let LoadedPlan { mut plan, configs } = ExperimentPlan::load(plan_path)?;
    if let Some(seeds) = &opts.seeds {
        plan.seeds = seeds.clone();
    }
    if let Some(out) = &opts.out_dir {
        plan.out_dir = out.clone();
    }
    plan.validate()?;

    let mut jobs = Vec::new();
    for (r, cfg) in plan.runs.iter().zip(&configs) {
        for &seed in &plan.seeds {
            let mut config = cfg.clone();
            config.seed = seed;
            config.validate().map_err(|e| CliError::Config(format!("run `{}`: {e}", r.name)))?;
            jobs.push(Job {
                run: &r.name,
                seed,
                config,
                dir: job_dir(&plan.out_dir, &r.name, seed),
            });
        }
    }

    let pool = {
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(n) = thread_count()? {
            b = b.num_threads(n);
        }
        b.build().map_err(|e| CliError::Config(format!("thread pool: {e}")))?
    };
    let results: Vec<CliResult<JobMetrics>> = pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let tag = |e: CliError| match e {
                    CliError::Config(m) => CliError::Config(format!("run `{}` seed {}: {m}", job.run, job.seed)),
                    CliError::Training(m) => CliError::Training(format!("run `{}` seed {}: {m}", job.run, job.seed)),
                    CliError::CheckMismatch(m) => {
                        CliError::CheckMismatch(format!("run `{}` seed {}: {m}", job.run, job.seed))
                    }
                };
                if opts.check {
                    check_job(&job.dir).map_err(tag)
                } else {
                    execute_job(job).map_err(tag)
                }
            })
            .collect()
    });

    // report the most severe failure: training faults, then mismatches, then config
    let mut failures: Vec<CliError> = Vec::new();
    let mut rows = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        match res {
            Ok(metrics) => {
                rows.extend(metrics.into_iter().map(|(m, v)| (job.run.to_string(), job.seed, m, v)));
            }
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        failures.sort_by_key(|e| match e {
            CliError::Training(_) => 0,
            CliError::CheckMismatch(_) => 1,
            CliError::Config(_) => 2,
        });
        let code = failures[0].exit_code();
        let msg: Vec<String> = failures.iter().map(|e| e.to_string()).collect();
        let joined = msg.join("\n");
        return Err(match code {
            2 => CliError::Training(joined),
            3 => CliError::CheckMismatch(joined),
            _ => CliError::Config(joined),
        });
    }

    let summary = RunSummary {
        out_dir: plan.out_dir.clone(),
        rows,
    };
    if !opts.check {
        let io = |e: Error| CliError::Config(e.to_string());
        write_atomic(&plan.out_dir.join("summary.csv"), summary_csv(&summary.rows).as_bytes()).map_err(io)?;
        write_atomic(
            &plan.out_dir.join("comparisons.csv"),
            comparisons_csv(&summary.rows, &plan.comparisons).as_bytes(),
        )
        .map_err(io)?;
        let resolved = toml::to_string(&plan).map_err(|e| CliError::Config(e.to_string()))?;
        write_atomic(&plan.out_dir.join("plan.toml"), resolved.as_bytes()).map_err(io)?;
    }
    Ok(summary)
}

fn final_log_metrics(log: &TrainLog) -> JobMetrics {
    let mut out = Vec::new();
    if let Some(r) = log.last() {
        out.push(("final_loss".to_string(), r.loss));
        out.push(("final_mse".to_string(), r.mse));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EncoderHistograms {
    /// Encoder that produced the codebook initialization (untrained or pretrained).
    init_encoder: EmbeddingHistogram,
    final_encoder: EmbeddingHistogram,
}

fn write(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    write_atomic(&dir.join(name), text.as_bytes()).map_err(|e| CliError::Config(format!("{name}: {e}")))
}

fn execute_job(job: &Job<'_>) -> CliResult<JobMetrics> {
    let cfg = &job.config;
    let dir = &job.dir;
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
    let dataset = generate(&cfg.mixture_spec()?)?;
    // the stored config must stay loadable from inside the job directory
    let mut stored_cfg = cfg.clone();
    if let Some(p) = &mut stored_cfg.train.pretrained_checkpoint {
        *p = std::path::absolute(&*p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    }
    write(dir, "config.toml", &stored_cfg.to_toml_string())?;
    write(dir, "data.csv", &dataset.to_csv())?;

    let out = run_regime(cfg, &dataset)?;
    write(dir, "train_log.csv", &out.log.to_csv())?;
    let bins = cfg.diagnostics.histogram_bins;
    let init_encoder = match cfg.train.regime {
        Regime::BaselineVq | Regime::AePretrain => fresh_params(cfg),
        Regime::DeferredVq => match &out.pretrain {
            Some((p, _)) => p.clone(),
            None => MlpParams::from_checkpoint(&Checkpoint::load(
                cfg.train.pretrained_checkpoint.as_ref().expect("deferred without pretrain has a checkpoint"),
            )?)?,
        },
    };
    if let Some((ae, log)) = &out.pretrain {
        Checkpoint::new(ae.to_tensors()).save(&dir.join("ae.ckpt"))?;
        write(dir, "pretrain_log.csv", &log.to_csv())?;
    }
    let embeddings = out.params.encode(&dataset.points)?;
    write(dir, "embeddings.csv", &matrix_to_csv(&embeddings, "z"))?;
    let hist = EncoderHistograms {
        init_encoder: histogram_of(&init_encoder.encode(&dataset.points)?, bins)?,
        final_encoder: histogram_of(&embeddings, bins)?,
    };
    write(
        dir,
        "encoder_histograms.json",
        &(serde_json::to_string_pretty(&hist).map_err(Error::from)? + "\n"),
    )?;

    let mut metrics = final_log_metrics(&out.log);
    let Some(mut model) = out.model else {
        Checkpoint::new(out.params.to_tensors()).save(&dir.join("ae.ckpt"))?;
        return Ok(metrics);
    };
    model.record_usage(&dataset.points, cfg.train.batch_size)?;
    let dump = CodebookDump {
        tokens: model.codebook.tokens.clone(),
        usage_counts: Some(model.codebook.usage_counts.clone()),
    };
    write(dir, "codebook.csv", &dump.to_csv())?;
    model.to_checkpoint().save(&dir.join("model.ckpt"))?;

    let report = report_for_dir(dir)?;
    if report.entropy_bound_holds == Some(false) {
        return Err(CliError::Training("entropy bound violated in report".into()));
    }
    write(dir, "report.json", &report.to_json())?;
    write(dir, "report.csv", &report.to_csv())?;
    let stored = read_dump(&dir.join("codebook.csv"))?;
    let mut stored_codebook = model.codebook.clone();
    stored_codebook.tokens = stored.tokens;
    let recon = reconstruct(&model.params, &stored_codebook, &dataset.points)?;
    write(dir, "reconstructions.csv", &matrix_to_csv(&recon, "x"))?;

    metrics.extend(report.metrics().into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(metrics)
}

fn read_dump(path: &Path) -> CliResult<CodebookDump> {
    let f = File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    CodebookDump::from_csv(f).map_err(with_path(path))
}

/// Report recomputed purely from a job directory's stored artifacts.
pub fn report_for_dir(dir: &Path) -> CliResult<DiagnosticsReport> {
    diagnose_files(
        &dir.join("codebook.csv"),
        None,
        Some(&dir.join("config.toml")),
        Some(&dir.join("model.ckpt")),
    )
}

fn check_job(dir: &Path) -> CliResult<JobMetrics> {
    let cfg = TrainConfig::load(&dir.join("config.toml")).map_err(with_path(&dir.join("config.toml")))?;
    let mut metrics = Vec::new();
    if let Ok(text) = std::fs::read_to_string(dir.join("train_log.csv")) {
        metrics = final_metrics_from_log_csv(&text);
    }
    if cfg.train.regime == Regime::AePretrain {
        return Ok(metrics);
    }
    let stored_json = std::fs::read(dir.join("report.json"))
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.join("report.json").display())))?;
    let stored_csv = std::fs::read(dir.join("report.csv"))
        .map_err(|e| CliError::Config(format!("{}: {e}", dir.join("report.csv").display())))?;
    let report = report_for_dir(dir)?;
    if report.to_json().as_bytes() != stored_json.as_slice() {
        return Err(CliError::CheckMismatch("report.json differs from recomputed diagnostics".into()));
    }
    if report.to_csv().as_bytes() != stored_csv.as_slice() {
        return Err(CliError::CheckMismatch("report.csv differs from recomputed diagnostics".into()));
    }
    metrics.extend(report.metrics().into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(metrics)
}

fn final_metrics_from_log_csv(text: &str) -> JobMetrics {
    let Some(last) = text.lines().skip(1).last() else {
        return Vec::new();
    };
    let cells: Vec<&str> = last.split(',').collect();
    let mut out = Vec::new();
    for (name, idx) in [("final_loss", 1), ("final_mse", 2)] {
        if let Some(v) = cells.get(idx).and_then(|c| c.parse().ok()) {
            out.push((name.to_string(), v));
        }
    }
    out
}

/// Data, component means and seed regenerated from a config file.
fn config_context(path: &Path) -> CliResult<(TrainConfig, LabeledDataset, Matrix)> {
    let cfg = TrainConfig::load(path).map_err(with_path(path))?;
    let spec = cfg.mixture_spec()?;
    let dataset = generate(&spec)?;
    let means = dataset.standardized_means(&spec);
    Ok((cfg, dataset, means))
}

/// `shrinklab diagnose`: everything computable from the given files.
pub fn diagnose_files(
    codebook: &Path,
    embeddings: Option<&Path>,
    config: Option<&Path>,
    checkpoint: Option<&Path>,
) -> CliResult<DiagnosticsReport> {
    let dump = read_dump(codebook)?;
    let embeddings = embeddings
        .map(|p| {
            let f = File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            matrix_from_csv(f, "z").map_err(with_path(p))
        })
        .transpose()?;
    let context = config.map(config_context).transpose()?;
    let model = checkpoint
        .map(|p| {
            Checkpoint::load(p)
                .and_then(|c| MlpParams::from_checkpoint(&c))
                .map_err(with_path(p))
        })
        .transpose()?;
    let defaults = TrainConfig::default();
    let (settings, seed) = match &context {
        Some((cfg, _, _)) => (&cfg.diagnostics, cfg.seed),
        None => (&defaults.diagnostics, 0),
    };
    let report = diagnose(&DiagnosisInput {
        tokens: &dump.tokens,
        usage: dump.usage_counts.as_deref(),
        model: model.as_ref(),
        means: context.as_ref().map(|c| &c.2),
        data: context.as_ref().map(|c| &c.1.points),
        embeddings: embeddings.as_ref(),
        settings,
        seed,
    })?;
    Ok(report)
}

/// Direction in which a metric improves; `None` for metrics without one.
pub fn higher_is_better(metric: &str) -> Option<bool> {
    match metric {
        "perplexity" | "mean_pairwise_distance" | "mode_entropy" | "active_modes" | "mode_coverage"
        | "pairwise_recon_distance" | "embedding_peak_count" | "entropy_bound" => Some(true),
        "distortion" | "frechet_distance" | "final_loss" | "final_mse" => Some(false),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Per `(run, metric)` aggregate across seeds, keyed in first-seen order.
pub fn aggregate(rows: &[(String, u64, String, f64)]) -> Vec<((String, String), Aggregate)> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (run, _, metric, v) in rows {
        let key = (run.clone(), metric.clone());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(*v);
    }
    order
        .into_iter()
        .map(|k| {
            let vs = &groups[&k];
            let agg = Aggregate {
                mean: vs.iter().sum::<f64>() / vs.len() as f64,
                min: vs.iter().copied().fold(f64::INFINITY, f64::min),
                max: vs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            (k, agg)
        })
        .collect()
}

/// `run,seed,metric,value`; the aggregate rows carry `mean`, `min` or `max` as seed.
pub fn summary_csv(rows: &[(String, u64, String, f64)]) -> String {
    let mut out = String::from("run,seed,metric,value\n");
    for (run, seed, metric, v) in rows {
        out.push_str(&format!("{run},{seed},{metric},{}\n", fmt_g9(*v)));
    }
    for ((run, metric), a) in aggregate(rows) {
        for (label, v) in [("mean", a.mean), ("min", a.min), ("max", a.max)] {
            out.push_str(&format!("{run},{label},{metric},{}\n", fmt_g9(v)));
        }
    }
    out
}

/// Seed-averaged comparison per metric: `candidate_better` is a strict improvement.
pub fn comparisons_csv(rows: &[(String, u64, String, f64)], comparisons: &[Comparison]) -> String {
    let agg: BTreeMap<(String, String), Aggregate> = aggregate(rows).into_iter().collect();
    let mut out = String::from("baseline,candidate,metric,baseline_mean,candidate_mean,higher_is_better,candidate_better\n");
    for c in comparisons {
        let metrics: Vec<&String> = agg.keys().filter(|(r, _)| *r == c.baseline).map(|(_, m)| m).collect();
        for m in metrics {
            let (Some(b), Some(k)) = (
                agg.get(&(c.baseline.clone(), m.clone())),
                agg.get(&(c.candidate.clone(), m.clone())),
            ) else {
                continue;
            };
            let Some(hib) = higher_is_better(m) else { continue };
            let better = if hib { k.mean > b.mean } else { k.mean < b.mean };
            out.push_str(&format!(
                "{},{},{m},{},{},{hib},{better}\n",
                c.baseline,
                c.candidate,
                fmt_g9(b.mean),
                fmt_g9(k.mean)
            ));
        }
    }
    out
}

/// `shrinklab oracle`: reference baselines for a config as `quantity,value` CSV.
pub fn oracle_report(config_path: &Path) -> CliResult<String> {
    let (cfg, dataset, means) = config_context(config_path)?;
    let spec = cfg.mixture_spec()?;
    let mut out = String::from("quantity,value\n");
    let mut push = |k: &str, v: f64| out.push_str(&format!("{k},{}\n", fmt_g9(v)));

    // raw-frame distortion of the ideal codebook (one token per component mean)
    let raw_means = Matrix::from_rows(&spec.means);
    let n = 100_000.min(spec.total_points() * 10).max(1);
    push("mc_distortion_means_raw", monte_carlo_distortion(&spec, &raw_means, n, cfg.seed)?);
    push("analytic_noise_floor_raw", spec.dim as f64 * spec.std * spec.std);
    let scale: f64 = dataset.scaler.std.iter().map(|s| 1.0 / (s * s)).sum::<f64>() / spec.dim as f64;
    push("analytic_noise_floor_standardized", spec.dim as f64 * spec.std * spec.std * scale);

    let col: Vec<f64> = dataset.points.iter_rows().map(|r| r[0]).collect();
    let levels = cfg.quantizer.codebook_size.min(256);
    match lloyd_max_1d(&col, levels, 500, 1e-12) {
        Ok(q) => {
            push("lloyd_max_levels", levels as f64);
            push("lloyd_max_distortion_x0", q.distortion);
            push("lloyd_max_iterations", (q.history.len() - 1) as f64);
        }
        Err(e) => return Err(CliError::Config(format!("lloyd-max on x0: {e}"))),
    }
    push("components", means.rows() as f64);
    Ok(out)
}
