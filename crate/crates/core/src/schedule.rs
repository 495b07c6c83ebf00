//! Noise schedules: the (α(t), σ(t)) pair, the signal-to-noise ratio
//! λ_t = α(t)/σ(t), and discrete timestep grids.
//!
//! Three families are supported:
//!
//! - `vp-linear`: variance-preserving with β(t) = beta_min + t·(beta_max − beta_min),
//!   ᾱ(t) = exp(−∫₀ᵗ β), α = √ᾱ, σ = √(1 − ᾱ)
//! - `vp-cosine`: ᾱ(t) = cos²(((t+s)/(1+s))·π/2) / cos²((s/(1+s))·π/2)
//! - `rectified-flow`: α = 1 − t, σ = t
//!
//! Times are clamped away from the endpoints where α or σ would vanish,
//! so λ and the x̂₀ reconstruction stay finite everywhere on the valid domain.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA_MIN: f64 = 0.1;
pub const DEFAULT_BETA_MAX: f64 = 20.0;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScheduleKind {
    VpLinear { beta_min: f64, beta_max: f64 },
    VpCosine { offset: f64 },
    RectifiedFlow,
}

/// A noise schedule: immutable after construction, all queries pure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind) -> Result<Self> {
        match kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                if !(beta_min > 0.0 && beta_max > beta_min && beta_max.is_finite()) {
                    return Err(Error::InvalidSchedule(format!(
                        "vp-linear requires 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
                    )));
                }
            }
            ScheduleKind::VpCosine { offset } => {
                if !(offset > 0.0 && offset < 1.0) {
                    return Err(Error::InvalidSchedule(format!(
                        "vp-cosine requires offset in (0, 1), got {offset}"
                    )));
                }
            }
            ScheduleKind::RectifiedFlow => {}
        }
        Ok(Self { kind })
    }

    pub fn vp_linear(beta_min: f64, beta_max: f64) -> Result<Self> {
        Self::new(ScheduleKind::VpLinear { beta_min, beta_max })
    }

    pub fn vp_linear_default() -> Self {
        Self::vp_linear(DEFAULT_BETA_MIN, DEFAULT_BETA_MAX).expect("default params valid")
    }

    pub fn vp_cosine(offset: f64) -> Result<Self> {
        Self::new(ScheduleKind::VpCosine { offset })
    }

    pub fn vp_cosine_default() -> Self {
        Self::vp_cosine(DEFAULT_COSINE_OFFSET).expect("default params valid")
    }

    pub fn rectified_flow() -> Self {
        Self { kind: ScheduleKind::RectifiedFlow }
    }

    /// Parse a schedule by name: `vp-linear`, `vp-cosine`, or `rectified-flow`
    /// with default parameters.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "vp-linear" => Ok(Self::vp_linear_default()),
            "vp-cosine" => Ok(Self::vp_cosine_default()),
            "rectified-flow" => Ok(Self::rectified_flow()),
            other => Err(Error::InvalidSchedule(format!("unknown schedule kind `{other}`"))),
        }
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ScheduleKind::VpLinear { .. } => "vp-linear",
            ScheduleKind::VpCosine { .. } => "vp-cosine",
            ScheduleKind::RectifiedFlow => "rectified-flow",
        }
    }

    /// Valid clamped time domain `[lo, hi]`.
    ///
    /// Rectified flow excludes both endpoints (α or σ vanishes there);
    /// vp-linear only the origin (σ(0) = 0); vp-cosine additionally excludes
    /// t = 1 where α vanishes exactly.
    pub fn domain(&self) -> (f64, f64) {
        match self.kind {
            ScheduleKind::RectifiedFlow => (1e-3, 1.0 - 1e-3),
            ScheduleKind::VpLinear { .. } => (1e-5, 1.0),
            ScheduleKind::VpCosine { .. } => (1e-5, 1.0 - 1e-5),
        }
    }

    /// Clamp a time into the valid domain.
    pub fn clamp_time(&self, t: f64) -> f64 {
        let (lo, hi) = self.domain();
        t.clamp(lo, hi)
    }

    fn check_domain(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain();
        if !t.is_finite() || t < lo || t > hi {
            return Err(Error::TimeOutOfDomain { t, lo, hi });
        }
        Ok(())
    }

    /// Signal and noise coefficients (α(t), σ(t)).
    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_domain(t)?;
        Ok(match self.kind {
            ScheduleKind::VpLinear { beta_min, beta_max } => {
                // ∫₀ᵗ β(u) du = beta_min·t + (beta_max − beta_min)·t²/2
                let integral = beta_min * t + 0.5 * (beta_max - beta_min) * t * t;
                let alpha_bar = (-integral).exp();
                (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt())
            }
            ScheduleKind::VpCosine { offset } => {
                let f = |u: f64| (((u + offset) / (1.0 + offset)) * std::f64::consts::FRAC_PI_2).cos();
                let alpha_bar = (f(t) / f(0.0)).powi(2);
                (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt())
            }
            ScheduleKind::RectifiedFlow => (1.0 - t, t),
        })
    }

    /// Signal-to-noise ratio λ_t = α(t)/σ(t).
    pub fn snr(&self, t: f64) -> Result<f64> {
        let (alpha, sigma) = self.alpha_sigma(t)?;
        Ok(alpha / sigma)
    }
}

/// Discrete sampling grid: strictly decreasing times t_T > … > t_1.
#[derive(Debug, Clone, PartialEq)]
pub struct TimestepGrid {
    steps: Vec<f64>,
    terminal_time: f64,
}

impl TimestepGrid {
    /// Times in sampling order (from most noisy down).
    pub fn steps(&self) -> &[f64] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// The time the final update targets (the clamp floor).
    pub fn terminal_time(&self) -> f64 {
        self.terminal_time
    }
}

/// Uniform trailing grid t_i = i/T for i = T…1, clamped into the schedule's
/// valid domain.
///
/// When several raw entries land at or beyond a domain endpoint, a hard
/// clamp would collapse them onto the same time; those entries are instead
/// spread evenly between the endpoint and the nearest interior entry so the
/// grid stays strictly decreasing at any T.
pub fn make_grid(schedule: &NoiseSchedule, t_steps: usize) -> Result<TimestepGrid> {
    if t_steps == 0 {
        return Err(Error::EmptyGrid);
    }
    let (lo, hi) = schedule.domain();
    let mut steps: Vec<f64> = (1..=t_steps).rev().map(|i| i as f64 / t_steps as f64).collect();

    let hi_cnt = steps.iter().filter(|&&t| t >= hi).count();
    let lo_cnt = steps.iter().filter(|&&t| t <= lo).count();
    if hi_cnt > 0 {
        let anchor = if hi_cnt < t_steps { steps[hi_cnt] } else { lo };
        for j in 0..hi_cnt {
            steps[j] = hi - (hi - anchor) * j as f64 / hi_cnt as f64;
        }
    }
    if lo_cnt > 0 {
        let anchor = if lo_cnt < t_steps { steps[t_steps - lo_cnt - 1] } else { hi };
        for j in 0..lo_cnt {
            steps[t_steps - 1 - j] = lo + (anchor - lo) * j as f64 / lo_cnt as f64;
        }
    }
    debug_assert!(steps.windows(2).all(|p| p[0] > p[1]));
    Ok(TimestepGrid { steps, terminal_time: lo })
}

/// Count of sampling steps whose SNR stays strictly below `lambda_threshold`.
///
/// λ increases along the grid (sampling order), so this is the position of
/// the threshold crossing counted from the start of sampling. Ties go to the
/// non-guided side: a step with λ exactly at the threshold is already past
/// the crossing. Returns T when the threshold is never reached and 0 when
/// the very first step is at or above it.
pub fn snr_crossing_step(
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    lambda_threshold: f64,
) -> Result<usize> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut below = 0;
    for &t in grid.steps() {
        if schedule.snr(t)? < lambda_threshold {
            below += 1;
        } else {
            break;
        }
    }
    Ok(below)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rectified_flow_midpoint() {
        let s = NoiseSchedule::rectified_flow();
        assert_eq!(s.alpha_sigma(0.5).unwrap(), (0.5, 0.5));
        assert_eq!(s.snr(0.5).unwrap(), 1.0);
        assert_eq!(s.snr(0.25).unwrap(), 3.0);
    }

    #[test]
    fn vp_cosine_near_origin() {
        let s = NoiseSchedule::vp_cosine_default();
        let (alpha, sigma) = s.alpha_sigma(1e-5).unwrap();
        assert!(alpha > 0.9999);
        assert!(sigma < 1e-2);
    }

    #[test]
    fn vp_linear_closed_form_matches_quadrature() {
        let s = NoiseSchedule::vp_linear_default();
        let (alpha, sigma) = s.alpha_sigma(0.5).unwrap();
        // integral of beta over [0, 0.5] = 0.1*0.5 + 19.9*0.25/2 = 2.5375
        assert_relative_eq!(alpha, (-0.5 * 2.5375f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(sigma, (1.0 - alpha * alpha).sqrt(), max_relative = 1e-12);

        // trapezoid quadrature of the beta integral as an independent check
        let n = 200_000;
        let beta = |u: f64| 0.1 + u * 19.9;
        let h = 0.5 / n as f64;
        let mut integral = 0.5 * h * (beta(0.0) + beta(0.5));
        for k in 1..n {
            integral += h * beta(k as f64 * h);
        }
        assert_relative_eq!(alpha, (-0.5 * integral).exp(), max_relative = 1e-9);
    }

    #[test]
    fn vp_cosine_snr_one_at_half_mass() {
        // solve cos²(((t+s)/(1+s))·π/2)/cos²((s/(1+s))·π/2) = 0.5 by bisection,
        // then check λ = 1 there (ᾱ = 0.5 means α = σ)
        let s = NoiseSchedule::vp_cosine_default();
        let target = 0.5f64;
        let (mut lo, mut hi) = (1e-5, 1.0 - 1e-5);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let (a, _) = s.alpha_sigma(mid).unwrap();
            if a * a > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let t_star = 0.5 * (lo + hi);
        assert_relative_eq!(s.snr(t_star).unwrap(), 1.0, max_relative = 1e-9);
    }

    #[test]
    fn grid_uniform_trailing_with_clamp() {
        let s = NoiseSchedule::rectified_flow();
        let g = make_grid(&s, 4).unwrap();
        assert_eq!(g.steps(), &[1.0 - 1e-3, 0.75, 0.5, 0.25]);
        assert_eq!(g.terminal_time(), 1e-3);

        let vp = NoiseSchedule::vp_linear_default();
        let g = make_grid(&vp, 4).unwrap();
        assert_eq!(g.steps(), &[1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn grid_rejects_zero_steps() {
        let s = NoiseSchedule::rectified_flow();
        assert!(matches!(make_grid(&s, 0), Err(Error::EmptyGrid)));
    }

    #[test]
    fn snr_increases_along_vp_linear_grid() {
        let s = NoiseSchedule::vp_linear_default();
        let g = make_grid(&s, 1000).unwrap();
        let lambdas: Vec<f64> = g.steps().iter().map(|&t| s.snr(t).unwrap()).collect();
        for pair in lambdas.windows(2) {
            assert!(pair[1] > pair[0]);
        }
    }

    #[test]
    fn crossing_counts() {
        let s = NoiseSchedule::rectified_flow();
        let g = make_grid(&s, 10).unwrap();
        // λ = 1 exactly at t = 0.5; the tie goes to the non-guided side,
        // so only the five steps with t > 0.5 stay strictly below.
        assert_eq!(snr_crossing_step(&s, &g, 1.0).unwrap(), 5);
        assert_eq!(snr_crossing_step(&s, &g, f64::INFINITY).unwrap(), 10);
        assert_eq!(snr_crossing_step(&s, &g, 0.0).unwrap(), 0);
    }

    #[test]
    fn crossing_matches_cosine_snr_root() {
        let s = NoiseSchedule::vp_cosine_default();
        let g = make_grid(&s, 50).unwrap();
        let crossing = snr_crossing_step(&s, &g, 1.0).unwrap();
        // every counted step is strictly below, the next one at or above
        for (i, &t) in g.steps().iter().enumerate() {
            let lambda = s.snr(t).unwrap();
            if i < crossing {
                assert!(lambda < 1.0);
            } else {
                assert!(lambda >= 1.0);
            }
        }
    }

    #[test]
    fn out_of_domain_rejected() {
        let s = NoiseSchedule::rectified_flow();
        assert!(matches!(s.alpha_sigma(0.0), Err(Error::TimeOutOfDomain { .. })));
        assert!(matches!(s.alpha_sigma(1.0), Err(Error::TimeOutOfDomain { .. })));
        assert!(NoiseSchedule::vp_linear(2.0, 1.0).is_err());
    }
}
