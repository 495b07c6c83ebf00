//! Deterministic DDIM sampling loop with per-step trace recording.
//!
//! Each run owns its state; given (model, schedule, grid, strategy,
//! condition, seed) the output is bit-reproducible. The prior draw consumes
//! only the seed, never strategy parameters, so runs that differ only in
//! strategy share the initial noise exactly.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use nalgebra::DVector;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::guidance::{cfg_combine, cosine_similarity, GuidanceStrategy, SimilarityState, StepDecision};
use crate::mixture::{MixtureModel, ScoreKind};
use crate::schedule::{NoiseSchedule, TimestepGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step_index: usize,
    pub t: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub snr: f64,
    /// Present when both scores were evaluated this step (guided steps, or
    /// any step in diagnostic mode).
    pub gamma: Option<f64>,
    pub decision: StepDecision,
    pub cum_evals: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub rows: Vec<StepRecord>,
    pub total_evals: u64,
    /// Extra evaluations forced by diagnostic dual-eval mode; kept out of
    /// `total_evals` so cost metrics stay honest.
    pub diagnostic_evals: u64,
    pub wall_ms: f64,
    /// Initial noise draw, for cross-run prior consistency checks.
    pub x_init: Vec<f64>,
}

/// One deterministic DDIM update (η = 0): reconstruct x̂₀ and re-noise to
/// `t_next`. `t_next = None` is the terminal update and returns x̂₀.
pub fn ddim_step(
    x_t: &DVector<f64>,
    eps: &DVector<f64>,
    t: f64,
    t_next: Option<f64>,
    schedule: &NoiseSchedule,
) -> Result<DVector<f64>> {
    if x_t.len() != eps.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: eps.len() });
    }
    let (alpha, sigma) = schedule.alpha_sigma(t)?;
    let x0_hat = (x_t - eps * sigma) / alpha;
    match t_next {
        Some(tn) => {
            let (alpha_n, sigma_n) = schedule.alpha_sigma(tn)?;
            Ok(&x0_hat * alpha_n + eps * sigma_n)
        }
        None => Ok(x0_hat),
    }
}

/// Run one guided sampling trajectory.
///
/// `diagnostic_dual_eval` forces both scores on every step so the γ trace is
/// complete; it changes neither decisions nor `total_evals` (the extra
/// evaluations are tallied in `diagnostic_evals`).
pub fn sample(
    model: &MixtureModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    strategy: &GuidanceStrategy,
    condition: &str,
    seed: u64,
    diagnostic_dual_eval: bool,
) -> Result<(DVector<f64>, SampleTrace)> {
    strategy.validate()?;
    model.class_index(condition)?;
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }

    let t_start = grid.steps()[0];
    let (_, sigma_start) = schedule.alpha_sigma(t_start)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::from_iterator(
        model.dim(),
        (0..model.dim()).map(|_| rng.sample::<f64, _>(StandardNormal) * sigma_start),
    );
    let x_init: Vec<f64> = x.iter().copied().collect();

    let mut sim_state = SimilarityState::default();
    let mut rows = Vec::with_capacity(grid.len());
    let mut total_evals = 0u64;
    let mut diagnostic_evals = 0u64;
    let clock = Instant::now();

    for (k, &t) in grid.steps().iter().enumerate() {
        let step_index = k + 1;
        let t_next = grid.steps().get(k + 1).copied();
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let snr = alpha / sigma;

        let last_gamma = sim_state.last_gamma;
        let decision = strategy.decide(step_index, grid, schedule, &mut sim_state, last_gamma)?;

        let (eps, gamma) = match decision {
            StepDecision::Guided => {
                let eps_c = model.eps_conditional(schedule, &x, t, condition)?.eps;
                let eps_u = model.eps_unconditional(schedule, &x, t)?.eps;
                let gamma = cosine_similarity(&eps_c, &eps_u).ok();
                if gamma.is_some() {
                    sim_state.last_gamma = gamma;
                }
                let w = strategy.guidance_scale().expect("guided decision implies a scale");
                (cfg_combine(&eps_u, &eps_c, w)?, gamma)
            }
            StepDecision::Single(kind) => {
                let eps = match kind {
                    ScoreKind::Conditional => model.eps_conditional(schedule, &x, t, condition)?.eps,
                    ScoreKind::Unconditional => model.eps_unconditional(schedule, &x, t)?.eps,
                };
                let gamma = if diagnostic_dual_eval {
                    diagnostic_evals += 1;
                    let other = match kind {
                        ScoreKind::Conditional => model.eps_unconditional(schedule, &x, t)?.eps,
                        ScoreKind::Unconditional => {
                            model.eps_conditional(schedule, &x, t, condition)?.eps
                        }
                    };
                    let (c, u) = match kind {
                        ScoreKind::Conditional => (&eps, &other),
                        ScoreKind::Unconditional => (&other, &eps),
                    };
                    cosine_similarity(c, u).ok()
                } else {
                    None
                };
                (eps, gamma)
            }
        };

        total_evals += decision.evals();
        x = ddim_step(&x, &eps, t, t_next, schedule)?;
        rows.push(StepRecord {
            step_index,
            t,
            alpha,
            sigma,
            snr,
            gamma,
            decision,
            cum_evals: total_evals,
        });
    }

    let wall_ms = clock.elapsed().as_secs_f64() * 1e3;
    Ok((x, SampleTrace { rows, total_evals, diagnostic_evals, wall_ms, x_init }))
}

/// Run `n` independent trajectories with seeds `base_seed + i`.
pub fn sample_batch(
    model: &MixtureModel,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    strategy: &GuidanceStrategy,
    condition: &str,
    n: usize,
    base_seed: u64,
    diagnostic_dual_eval: bool,
) -> Result<(Vec<DVector<f64>>, Vec<SampleTrace>)> {
    if n == 0 {
        return Err(Error::InvalidConfig("batch size must be >= 1".into()));
    }
    let mut samples = Vec::with_capacity(n);
    let mut traces = Vec::with_capacity(n);
    for i in 0..n {
        let (x, trace) = sample(
            model,
            schedule,
            grid,
            strategy,
            condition,
            base_seed + i as u64,
            diagnostic_dual_eval,
        )?;
        samples.push(x);
        traces.push(trace);
    }
    Ok((samples, traces))
}

const TRACE_HEADER: &str =
    "step_index,t,alpha,sigma,snr,gamma,mode,single_score,evals_this_step,cum_evals";

/// Serialize a trace to its delimiter-separated on-disk form.
pub fn trace_to_string(trace: &SampleTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in &trace.rows {
        let (mode, single) = match r.decision {
            StepDecision::Guided => ("guided", ""),
            StepDecision::Single(ScoreKind::Conditional) => ("single", "conditional"),
            StepDecision::Single(ScoreKind::Unconditional) => ("single", "unconditional"),
        };
        let gamma = r.gamma.map(|g| g.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.step_index,
            r.t,
            r.alpha,
            r.sigma,
            r.snr,
            gamma,
            mode,
            single,
            r.decision.evals(),
            r.cum_evals
        ));
    }
    out
}

pub fn write_trace(trace: &SampleTrace, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    f.write_all(trace_to_string(trace).as_bytes())
        .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

/// Parse a trace file back into step records (the round-trip counterpart of
/// [`trace_to_string`]; wall time and the prior draw are not part of the
/// file format).
pub fn parse_trace(text: &str) -> Result<Vec<StepRecord>> {
    let bad = |msg: &str| Error::Parse { path: "<trace>".into(), msg: msg.to_string() };
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRACE_HEADER => {}
        _ => return Err(bad("missing or wrong header")),
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 10 {
            return Err(bad(&format!("expected 10 columns, got {}", cols.len())));
        }
        let f = |s: &str| s.parse::<f64>().map_err(|e| bad(&e.to_string()));
        let decision = match (cols[6], cols[7]) {
            ("guided", "") => StepDecision::Guided,
            ("single", "conditional") => StepDecision::Single(ScoreKind::Conditional),
            ("single", "unconditional") => StepDecision::Single(ScoreKind::Unconditional),
            _ => return Err(bad("bad mode/single_score pair")),
        };
        rows.push(StepRecord {
            step_index: cols[0].parse().map_err(|_| bad("bad step_index"))?,
            t: f(cols[1])?,
            alpha: f(cols[2])?,
            sigma: f(cols[3])?,
            snr: f(cols[4])?,
            gamma: if cols[5].is_empty() { None } else { Some(f(cols[5])?) },
            decision,
            cum_evals: cols[9].parse().map_err(|_| bad("bad cum_evals"))?,
        });
    }
    Ok(rows)
}
