//! Guidance strategies: the CFG combiner, per-step decision logic, and
//! exact model-evaluation accounting.
//!
//! A strategy decides, at each sampling step, whether to spend two model
//! evaluations (guided: combine conditional and unconditional scores) or one
//! (a single score). Step AG gates on step count, SNR AG on the schedule's
//! λ_t, Similarity AG on the measured cosine similarity γ_t between the two
//! scores.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixture::ScoreKind;
use crate::schedule::{snr_crossing_step, NoiseSchedule, TimestepGrid};

pub const DEFAULT_GUIDANCE_SCALE: f64 = 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GuidanceStrategy {
    FullCfg { w: f64 },
    ConditionalOnly,
    UnconditionalOnly,
    StepAg { w: f64, p: f64, late_score: ScoreKind },
    SnrAg { w: f64, lambda_threshold: f64, late_score: ScoreKind },
    SimilarityAg { w: f64, gamma_threshold: f64, late_score: ScoreKind },
}

/// Per-step choice: both scores combined, or a single score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepDecision {
    Guided,
    Single(ScoreKind),
}

impl StepDecision {
    pub fn evals(&self) -> u64 {
        match self {
            StepDecision::Guided => 2,
            StepDecision::Single(_) => 1,
        }
    }
}

/// Mutable per-run state for Similarity AG's one-shot switch.
///
/// γ_t is only observable while both scores are computed; once CFG stops it
/// cannot resume, so the switch is permanent.
#[derive(Debug, Clone, Default)]
pub struct SimilarityState {
    pub switched: bool,
    pub switch_step: Option<usize>,
    pub last_gamma: Option<f64>,
}

/// Evaluation budget: exact for deterministic strategies, an interval for
/// the data-dependent Similarity AG.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalBudget {
    Exact(u64),
    Range(u64, u64),
}

impl GuidanceStrategy {
    pub fn validate(&self) -> Result<()> {
        let check_w = |w: f64| {
            if w.is_finite() && w >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidStrategy(format!("guidance scale w must be finite and >= 0, got {w}")))
            }
        };
        match *self {
            GuidanceStrategy::FullCfg { w } => check_w(w),
            GuidanceStrategy::ConditionalOnly | GuidanceStrategy::UnconditionalOnly => Ok(()),
            GuidanceStrategy::StepAg { w, p, .. } => {
                check_w(w)?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidStrategy(format!("p must be in [0,1], got {p}")));
                }
                Ok(())
            }
            GuidanceStrategy::SnrAg { w, lambda_threshold, .. } => {
                check_w(w)?;
                if lambda_threshold.is_nan() {
                    return Err(Error::InvalidStrategy("lambda threshold is NaN".into()));
                }
                Ok(())
            }
            GuidanceStrategy::SimilarityAg { w, gamma_threshold, .. } => {
                check_w(w)?;
                if !(0.0..=1.0).contains(&gamma_threshold) {
                    return Err(Error::InvalidStrategy(format!(
                        "gamma threshold must be in [0,1], got {gamma_threshold}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GuidanceStrategy::FullCfg { .. } => "full_cfg",
            GuidanceStrategy::ConditionalOnly => "conditional_only",
            GuidanceStrategy::UnconditionalOnly => "unconditional_only",
            GuidanceStrategy::StepAg { .. } => "step_ag",
            GuidanceStrategy::SnrAg { .. } => "snr_ag",
            GuidanceStrategy::SimilarityAg { .. } => "similarity_ag",
        }
    }

    pub fn guidance_scale(&self) -> Option<f64> {
        match *self {
            GuidanceStrategy::FullCfg { w }
            | GuidanceStrategy::StepAg { w, .. }
            | GuidanceStrategy::SnrAg { w, .. }
            | GuidanceStrategy::SimilarityAg { w, .. } => Some(w),
            _ => None,
        }
    }

    /// Decide the action for one step. `step_index` is 1-based in sampling
    /// order (step 1 is the most noisy). For Similarity AG past step 1 while
    /// unswitched, `current_gamma` must carry the γ measured at the previous
    /// dual evaluation.
    pub fn decide(
        &self,
        step_index: usize,
        grid: &TimestepGrid,
        schedule: &NoiseSchedule,
        sim_state: &mut SimilarityState,
        current_gamma: Option<f64>,
    ) -> Result<StepDecision> {
        debug_assert!(step_index >= 1 && step_index <= grid.len());
        Ok(match *self {
            GuidanceStrategy::FullCfg { .. } => StepDecision::Guided,
            GuidanceStrategy::ConditionalOnly => StepDecision::Single(ScoreKind::Conditional),
            GuidanceStrategy::UnconditionalOnly => StepDecision::Single(ScoreKind::Unconditional),
            GuidanceStrategy::StepAg { p, late_score, .. } => {
                if step_index <= guided_step_count(p, grid.len()) {
                    StepDecision::Guided
                } else {
                    StepDecision::Single(late_score)
                }
            }
            GuidanceStrategy::SnrAg { lambda_threshold, late_score, .. } => {
                let t = grid.steps()[step_index - 1];
                // ties go to the non-guided side
                if schedule.snr(t)? < lambda_threshold {
                    StepDecision::Guided
                } else {
                    StepDecision::Single(late_score)
                }
            }
            GuidanceStrategy::SimilarityAg { gamma_threshold, late_score, .. } => {
                if sim_state.switched {
                    StepDecision::Single(late_score)
                } else if step_index == 1 {
                    StepDecision::Guided
                } else {
                    let gamma = current_gamma
                        .or(sim_state.last_gamma)
                        .ok_or(Error::MissingGamma(step_index))?;
                    if gamma > gamma_threshold {
                        sim_state.switched = true;
                        sim_state.switch_step = Some(step_index);
                        StepDecision::Single(late_score)
                    } else {
                        StepDecision::Guided
                    }
                }
            }
        })
    }

    /// Exact eval count for deterministic strategies; for Similarity AG the
    /// attainable interval [T+1, 2T].
    pub fn expected_evals(
        &self,
        grid: &TimestepGrid,
        schedule: &NoiseSchedule,
    ) -> Result<EvalBudget> {
        let t_steps = grid.len() as u64;
        Ok(match *self {
            GuidanceStrategy::FullCfg { .. } => EvalBudget::Exact(2 * t_steps),
            GuidanceStrategy::ConditionalOnly | GuidanceStrategy::UnconditionalOnly => {
                EvalBudget::Exact(t_steps)
            }
            GuidanceStrategy::StepAg { p, .. } => {
                EvalBudget::Exact(t_steps + guided_step_count(p, grid.len()) as u64)
            }
            GuidanceStrategy::SnrAg { lambda_threshold, .. } => {
                let crossing = snr_crossing_step(schedule, grid, lambda_threshold)? as u64;
                EvalBudget::Exact(t_steps + crossing)
            }
            GuidanceStrategy::SimilarityAg { .. } => EvalBudget::Range(t_steps + 1, 2 * t_steps),
        })
    }
}

/// ε̃ = ε_u + w·(ε_c − ε_u).
pub fn cfg_combine(eps_u: &DVector<f64>, eps_c: &DVector<f64>, w: f64) -> Result<DVector<f64>> {
    if eps_u.len() != eps_c.len() {
        return Err(Error::DimensionMismatch { expected: eps_u.len(), got: eps_c.len() });
    }
    Ok(eps_u + (eps_c - eps_u) * w)
}

/// γ = |ε_c·ε_u| / (‖ε_c‖·‖ε_u‖), in [0, 1].
pub fn cosine_similarity(eps_c: &DVector<f64>, eps_u: &DVector<f64>) -> Result<f64> {
    if eps_c.len() != eps_u.len() {
        return Err(Error::DimensionMismatch { expected: eps_c.len(), got: eps_u.len() });
    }
    let nc = eps_c.norm();
    let nu = eps_u.norm();
    if nc == 0.0 || nu == 0.0 {
        return Err(Error::ZeroNormSimilarity);
    }
    Ok((eps_c.dot(eps_u).abs() / (nc * nu)).min(1.0))
}

/// Number of guided steps under Step AG: floor(p·T), taken on the first
/// (most noisy) steps. The floor keeps the §-level forward-pass identity
/// T + floor(pT) exact for fractional p·T.
pub fn guided_step_count(p: f64, t_steps: usize) -> usize {
    // tiny slack so products like 0.3*19 = 5.699999... floor correctly
    ((p * t_steps as f64) + 1e-9).floor() as usize
}
