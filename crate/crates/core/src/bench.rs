//! Benchmark harness: experiment configs, the CSV results schema, parameter
//! sweeps, and SNR/γ curve emitters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{GuidanceStrategy, DEFAULT_GUIDANCE_SCALE};
use crate::metrics::{alignment_accuracy, cost_report, fit_gaussian, w2_gaussian, ClassQuality, CostReport, QualityReport};
use crate::mixture::{MixtureModel, ScoreKind};
use crate::sampler::{sample, sample_batch, write_trace, SampleTrace};
use crate::schedule::{make_grid, NoiseSchedule};

fn default_w() -> f64 {
    DEFAULT_GUIDANCE_SCALE
}
fn default_late() -> ScoreKind {
    ScoreKind::Conditional
}
fn default_n() -> usize {
    4000
}
fn default_condition() -> String {
    "all".into()
}

/// Flat experiment config; file values can be overridden by CLI flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: PathBuf,
    pub schedule: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offset: Option<f64>,
    #[serde(rename = "T")]
    pub t_steps: usize,
    pub strategy: String,
    #[serde(default = "default_w")]
    pub w: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default = "default_late")]
    pub late_score: ScoreKind,
    #[serde(default = "default_condition")]
    pub condition: String,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub diag: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        match self.schedule.as_str() {
            "vp-linear" => NoiseSchedule::vp_linear(
                self.beta_min.unwrap_or(crate::schedule::DEFAULT_BETA_MIN),
                self.beta_max.unwrap_or(crate::schedule::DEFAULT_BETA_MAX),
            ),
            "vp-cosine" => NoiseSchedule::vp_cosine(
                self.offset.unwrap_or(crate::schedule::DEFAULT_COSINE_OFFSET),
            ),
            "rectified-flow" => Ok(NoiseSchedule::rectified_flow()),
            other => Err(Error::InvalidConfig(format!("unknown schedule `{other}`"))),
        }
    }

    pub fn build_strategy(&self) -> Result<GuidanceStrategy> {
        let missing = |what: &str| {
            Error::InvalidConfig(format!("strategy `{}` requires `{what}`", self.strategy))
        };
        let strat = match self.strategy.as_str() {
            "full_cfg" => GuidanceStrategy::FullCfg { w: self.w },
            "conditional_only" => GuidanceStrategy::ConditionalOnly,
            "unconditional_only" => GuidanceStrategy::UnconditionalOnly,
            "step_ag" => GuidanceStrategy::StepAg {
                w: self.w,
                p: self.p.ok_or_else(|| missing("p"))?,
                late_score: self.late_score,
            },
            "snr_ag" => GuidanceStrategy::SnrAg {
                w: self.w,
                lambda_threshold: self.lambda.ok_or_else(|| missing("lambda"))?,
                late_score: self.late_score,
            },
            "similarity_ag" => GuidanceStrategy::SimilarityAg {
                w: self.w,
                gamma_threshold: self.gamma.ok_or_else(|| missing("gamma"))?,
                late_score: self.late_score,
            },
            other => return Err(Error::InvalidConfig(format!("unknown strategy `{other}`"))),
        };
        strat.validate()?;
        Ok(strat)
    }

    /// The config columns of the CSV row. Fields irrelevant to the strategy
    /// are left empty; these columns double as the sweep dedup key.
    fn config_fields(&self) -> Result<Vec<String>> {
        let strat = self.build_strategy()?;
        let fmt = |v: f64| v.to_string();
        let (p, w, late, gamma, lambda) = match strat {
            GuidanceStrategy::FullCfg { w } => (String::new(), fmt(w), String::new(), String::new(), String::new()),
            GuidanceStrategy::ConditionalOnly | GuidanceStrategy::UnconditionalOnly => {
                (String::new(), String::new(), String::new(), String::new(), String::new())
            }
            GuidanceStrategy::StepAg { w, p, late_score } => {
                // at p covering every step there are no late single-score
                // steps, so the score type makes no difference
                let late = if crate::guidance::guided_step_count(p, self.t_steps) >= self.t_steps {
                    String::new()
                } else {
                    score_kind_name(late_score).to_string()
                };
                (fmt(p), fmt(w), late, String::new(), String::new())
            }
            GuidanceStrategy::SnrAg { w, lambda_threshold, late_score } => (
                String::new(),
                fmt(w),
                score_kind_name(late_score).to_string(),
                String::new(),
                fmt(lambda_threshold),
            ),
            GuidanceStrategy::SimilarityAg { w, gamma_threshold, late_score } => (
                String::new(),
                fmt(w),
                score_kind_name(late_score).to_string(),
                fmt(gamma_threshold),
                String::new(),
            ),
        };
        Ok(vec![
            strat.name().to_string(),
            p,
            w,
            self.t_steps.to_string(),
            self.schedule.clone(),
            late,
            gamma,
            lambda,
            self.condition.clone(),
            self.n.to_string(),
            self.seed.to_string(),
        ])
    }
}

pub fn score_kind_name(kind: ScoreKind) -> &'static str {
    match kind {
        ScoreKind::Conditional => "conditional",
        ScoreKind::Unconditional => "unconditional",
    }
}

/// One benchmark row: config echo plus quality and cost reports.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub config_fields: Vec<String>,
    pub class_labels: Vec<String>,
    pub quality: QualityReport,
    pub cost: CostReport,
}

const CONFIG_COLUMNS: [&str; 11] = [
    "strategy",
    "p",
    "w",
    "T",
    "scheduler",
    "late_score",
    "gamma_threshold",
    "lambda_threshold",
    "condition",
    "n_samples",
    "base_seed",
];

pub fn csv_header(class_labels: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = CONFIG_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.extend(
        ["total_evals", "diagnostic_evals", "evals_saved_ratio", "mean_wall_ms", "alignment_acc"]
            .iter()
            .map(|s| s.to_string()),
    );
    for label in class_labels {
        cols.push(format!("w2_{label}"));
        cols.push(format!("mean_err_{label}"));
        cols.push(format!("cov_err_{label}"));
    }
    cols
}

impl RunResult {
    pub fn csv_record(&self) -> Vec<String> {
        let mut rec = self.config_fields.clone();
        rec.push(self.cost.total_evals.to_string());
        rec.push(self.cost.diagnostic_evals.to_string());
        rec.push(self.cost.evals_saved_ratio.to_string());
        rec.push(self.cost.mean_wall_ms.to_string());
        rec.push(self.quality.alignment_acc.to_string());
        for label in &self.class_labels {
            match self.quality.per_class.get(label) {
                Some(q) => {
                    rec.push(q.w2.to_string());
                    rec.push(q.mean_err.to_string());
                    rec.push(q.cov_err.to_string());
                }
                None => {
                    rec.push("NaN".into());
                    rec.push("NaN".into());
                    rec.push("NaN".into());
                }
            }
        }
        rec
    }

    /// Parse one CSV record back (the round-trip counterpart of
    /// [`RunResult::csv_record`]). Sample counts per class are not part of
    /// the row and come back as 0.
    pub fn from_csv_record(header: &[String], record: &[String]) -> Result<Self> {
        let bad = |msg: String| Error::Parse { path: "<results csv>".into(), msg };
        if header.len() != record.len() {
            return Err(bad(format!("{} columns vs {} header fields", record.len(), header.len())));
        }
        let expected = csv_header(&[]);
        if header.len() < expected.len() || header[..expected.len()] != expected[..] {
            return Err(bad("unexpected results header".into()));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
        let config_fields = record[..CONFIG_COLUMNS.len()].to_vec();
        let base = CONFIG_COLUMNS.len();
        let cost = CostReport {
            total_evals: record[base].parse().map_err(|_| bad("bad total_evals".into()))?,
            diagnostic_evals: record[base + 1].parse().map_err(|_| bad("bad diagnostic_evals".into()))?,
            evals_saved_ratio: f(&record[base + 2])?,
            mean_wall_ms: f(&record[base + 3])?,
        };
        let alignment_acc = f(&record[base + 4])?;
        let mut class_labels = Vec::new();
        let mut per_class = BTreeMap::new();
        let mut i = base + 5;
        while i < header.len() {
            let label = header[i]
                .strip_prefix("w2_")
                .ok_or_else(|| bad(format!("unexpected column `{}`", header[i])))?
                .to_string();
            if i + 2 >= header.len() {
                return Err(bad("truncated per-class block".into()));
            }
            let q = ClassQuality {
                w2: f(&record[i])?,
                mean_err: f(&record[i + 1])?,
                cov_err: f(&record[i + 2])?,
                n: 0,
            };
            if !q.w2.is_nan() {
                per_class.insert(label.clone(), q);
            }
            class_labels.push(label);
            i += 3;
        }
        Ok(Self {
            config_fields,
            class_labels,
            quality: QualityReport { per_class, alignment_acc },
            cost,
        })
    }
}

/// Append rows to a results CSV, writing the header on first creation.
pub fn append_results(path: &Path, class_labels: &[String], rows: &[RunResult]) -> Result<()> {
    let exists = path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    let mut w = csv::Writer::from_writer(file);
    let io_err = |e: csv::Error| Error::Parse { path: path.to_path_buf(), msg: e.to_string() };
    if !exists {
        w.write_record(csv_header(class_labels)).map_err(io_err)?;
    }
    for row in rows {
        w.write_record(row.csv_record()).map_err(io_err)?;
    }
    w.flush().map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
    let header: Vec<String> =
        rdr.headers()
            .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?
            .iter()
            .map(|s| s.to_string())
            .collect();
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })?;
        let record: Vec<String> = rec.iter().map(|s| s.to_string()).collect();
        out.push(RunResult::from_csv_record(&header, &record)?);
    }
    Ok(out)
}

/// Execute one experiment cell: sample `n` trajectories per requested
/// condition, compute quality and cost reports, optionally append the CSV
/// row and write trace files.
pub fn run_experiment(config: &RunConfig) -> Result<RunResult> {
    let model = MixtureModel::load(&config.model)?;
    run_experiment_with_model(config, &model)
}

pub fn run_experiment_with_model(config: &RunConfig, model: &MixtureModel) -> Result<RunResult> {
    let schedule = config.build_schedule()?;
    let grid = make_grid(&schedule, config.t_steps)?;
    let strategy = config.build_strategy()?;
    if config.n == 0 {
        return Err(Error::InvalidConfig("n must be >= 1".into()));
    }

    let conditions: Vec<String> = if config.condition == "all" {
        model.labels().map(|l| l.to_string()).collect()
    } else {
        model.class_index(&config.condition)?;
        vec![config.condition.clone()]
    };

    let mut labeled: Vec<(DVector<f64>, String)> = Vec::new();
    let mut traces: Vec<SampleTrace> = Vec::new();
    let mut per_class = BTreeMap::new();
    for (ci, cond) in conditions.iter().enumerate() {
        // seeds depend only on (base seed, condition slot, sample index) so
        // cells differing only in strategy parameters share priors exactly
        let cell_seed = config.seed + (ci * config.n) as u64;
        let (xs, trs) =
            sample_batch(model, &schedule, &grid, &strategy, cond, config.n, cell_seed, config.diag)?;
        if let Some(dir) = &config.trace_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| Error::Io { path: dir.clone(), source: e })?;
            for (i, tr) in trs.iter().enumerate() {
                write_trace(tr, &dir.join(format!("trace_{cond}_{i}.csv")))?;
            }
        }
        let target = &model.classes()[model.class_index(cond)?];
        match fit_gaussian(&xs) {
            Ok((mean, cov)) => {
                per_class.insert(
                    cond.clone(),
                    ClassQuality {
                        w2: w2_gaussian(&mean, &cov, &target.mean, &target.cov)?,
                        mean_err: (&mean - &target.mean).norm(),
                        cov_err: (&cov - &target.cov).norm(),
                        n: xs.len(),
                    },
                );
            }
            Err(Error::TooFewSamples { .. }) | Err(Error::DegenerateCovariance) => {
                // flagged as insufficient: NaN block in the CSV row
            }
            Err(e) => return Err(e),
        }
        labeled.extend(xs.into_iter().map(|x| (x, cond.clone())));
        traces.extend(trs);
    }

    let quality = QualityReport {
        per_class,
        alignment_acc: alignment_accuracy(&labeled, model)?,
    };
    let cost = cost_report(&traces, config.t_steps)?;
    let class_labels: Vec<String> = model.labels().map(|l| l.to_string()).collect();
    let result = RunResult {
        config_fields: config.config_fields()?,
        class_labels: class_labels.clone(),
        quality,
        cost,
    };
    if let Some(out) = &config.out {
        append_results(out, &class_labels, std::slice::from_ref(&result))?;
    }
    Ok(result)
}

/// Value lists for each sweep axis; `None` keeps the template's value.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SweepAxes {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Vec<String>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub w: Option<Vec<f64>>,
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub t_steps: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gamma: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub late_score: Option<Vec<ScoreKind>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub template: RunConfig,
    pub axes: SweepAxes,
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Parse { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// Enumerate the Cartesian product of the axes over the template, dropping
/// cells whose effective configuration duplicates an earlier one (e.g.
/// step_ag at p = 1 with different late scores). Order is deterministic.
pub fn expand_sweep(sweep: &SweepConfig) -> Result<Vec<RunConfig>> {
    let axes = &sweep.axes;
    let check = |name: &str, empty: bool| {
        if empty {
            Err(Error::InvalidConfig(format!("sweep axis `{name}` is empty")))
        } else {
            Ok(())
        }
    };
    if let Some(v) = &axes.strategy {
        check("strategy", v.is_empty())?;
    }
    if let Some(v) = &axes.p {
        check("p", v.is_empty())?;
    }
    if let Some(v) = &axes.w {
        check("w", v.is_empty())?;
    }
    if let Some(v) = &axes.t_steps {
        check("T", v.is_empty())?;
    }
    if let Some(v) = &axes.gamma {
        check("gamma", v.is_empty())?;
    }
    if let Some(v) = &axes.lambda {
        check("lambda", v.is_empty())?;
    }
    if let Some(v) = &axes.late_score {
        check("late_score", v.is_empty())?;
    }

    let strategies = axes.strategy.clone().unwrap_or_else(|| vec![sweep.template.strategy.clone()]);
    let ps: Vec<Option<f64>> = match &axes.p {
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![sweep.template.p],
    };
    let ws = axes.w.clone().unwrap_or_else(|| vec![sweep.template.w]);
    let ts = axes.t_steps.clone().unwrap_or_else(|| vec![sweep.template.t_steps]);
    let gammas: Vec<Option<f64>> = match &axes.gamma {
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![sweep.template.gamma],
    };
    let lambdas: Vec<Option<f64>> = match &axes.lambda {
        Some(v) => v.iter().copied().map(Some).collect(),
        None => vec![sweep.template.lambda],
    };
    let lates = axes.late_score.clone().unwrap_or_else(|| vec![sweep.template.late_score]);

    let mut cells = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for strategy in &strategies {
        for &t_steps in &ts {
            for &w in &ws {
                for &p in &ps {
                    for &gamma in &gammas {
                        for &lambda in &lambdas {
                            for &late in &lates {
                                let mut cfg = sweep.template.clone();
                                cfg.strategy = strategy.clone();
                                cfg.t_steps = t_steps;
                                cfg.w = w;
                                cfg.p = p;
                                cfg.gamma = gamma;
                                cfg.lambda = lambda;
                                cfg.late_score = late;
                                let key = cfg.config_fields()?;
                                if seen.insert(key) {
                                    cells.push(cfg);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(cells)
}

/// Run every cell of a sweep, appending one CSV row per cell.
pub fn run_sweep(sweep: &SweepConfig) -> Result<Vec<RunResult>> {
    let model = MixtureModel::load(&sweep.template.model)?;
    let cells = expand_sweep(sweep)?;
    let mut out = Vec::with_capacity(cells.len());
    for cell in &cells {
        out.push(run_experiment_with_model(cell, &model)?);
    }
    Ok(out)
}

/// Emit per-schedule SNR curves on a T-step grid:
/// columns schedule, frac (step fraction through sampling), t, lambda.
pub fn emit_snr_curves(schedules: &[NoiseSchedule], t_steps: usize, path: &Path) -> Result<()> {
    let mut out = String::from("schedule,frac,t,lambda\n");
    for sched in schedules {
        let grid = make_grid(sched, t_steps)?;
        for (k, &t) in grid.steps().iter().enumerate() {
            let frac = (k + 1) as f64 / t_steps as f64;
            out.push_str(&format!("{},{},{},{}\n", sched.name(), frac, t, sched.snr(t)?));
        }
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Emit the per-step mean γ_t over `n_avg` diagnostic trajectories:
/// columns step_index, t, mean_gamma. With condition "all", trajectories
/// cycle through the model's classes round-robin.
pub fn emit_gamma_curves(config: &RunConfig, n_avg: usize, path: &Path) -> Result<()> {
    if n_avg == 0 {
        return Err(Error::InvalidConfig("n_avg must be >= 1".into()));
    }
    let model = MixtureModel::load(&config.model)?;
    let schedule = config.build_schedule()?;
    let grid = make_grid(&schedule, config.t_steps)?;
    let strategy = config.build_strategy()?;
    let conditions: Vec<String> = if config.condition == "all" {
        model.labels().map(|l| l.to_string()).collect()
    } else {
        model.class_index(&config.condition)?;
        vec![config.condition.clone()]
    };

    let mut sums = vec![0.0f64; config.t_steps];
    let mut counts = vec![0usize; config.t_steps];
    let mut times = vec![0.0f64; config.t_steps];
    for i in 0..n_avg {
        let cond = &conditions[i % conditions.len()];
        let (_, trace) =
            sample(&model, &schedule, &grid, &strategy, cond, config.seed + i as u64, true)?;
        for (k, row) in trace.rows.iter().enumerate() {
            times[k] = row.t;
            if let Some(g) = row.gamma {
                sums[k] += g;
                counts[k] += 1;
            }
        }
    }
    let mut out = String::from("step_index,t,mean_gamma\n");
    for k in 0..config.t_steps {
        let mean = if counts[k] > 0 { sums[k] / counts[k] as f64 } else { f64::NAN };
        out.push_str(&format!("{},{},{}\n", k + 1, times[k], mean));
    }
    std::fs::write(path, out).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}
