//! Class-conditional Gaussian mixtures with exact ε-score oracles.
//!
//! The mixture stands in for a trained denoiser: at time t the noisy marginal
//! of component c is N(α(t)·μ_c, α(t)²·Σ_c + σ(t)²·I), so both the
//! conditional score and the marginal (unconditional) score are available in
//! closed form, with ε = −σ(t)·∇ₓ log p_t.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone)]
pub struct ClassComponent {
    pub label: String,
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MixtureModel {
    dim: usize,
    classes: Vec<ClassComponent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    Conditional,
    Unconditional,
}

#[derive(Debug, Clone)]
pub struct ScoreOutput {
    pub eps: DVector<f64>,
    pub kind: ScoreKind,
}

/// On-disk mixture spec.
#[derive(Debug, Serialize, Deserialize)]
struct MixtureSpec {
    dim: usize,
    classes: Vec<ClassSpec>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ClassSpec {
    label: String,
    weight: f64,
    mean: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

impl MixtureModel {
    /// Build a mixture, validating weights and covariances.
    ///
    /// Weights must sum to 1 within 1e-6 and are renormalized to exactly 1;
    /// covariances must be symmetric positive definite (checked via Cholesky
    /// with the smallest eigenvalue bounded away from zero).
    pub fn new(dim: usize, mut classes: Vec<ClassComponent>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMixture("dim must be >= 1".into()));
        }
        if classes.is_empty() {
            return Err(Error::InvalidMixture("at least one class required".into()));
        }
        let weight_sum: f64 = classes.iter().map(|c| c.weight).sum();
        if (weight_sum - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidMixture(format!(
                "class weights sum to {weight_sum}, expected 1 within 1e-6"
            )));
        }
        for c in &mut classes {
            if c.weight <= 0.0 {
                return Err(Error::InvalidMixture(format!(
                    "class `{}` has non-positive weight {}",
                    c.label, c.weight
                )));
            }
            c.weight /= weight_sum;
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.mean.len() });
            }
            if c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.cov.nrows() });
            }
            let asym = (&c.cov - c.cov.transpose()).abs().max();
            if asym > 1e-9 {
                return Err(Error::InvalidMixture(format!(
                    "class `{}` covariance not symmetric (max asymmetry {asym})",
                    c.label
                )));
            }
            // SPD with a margin: Cholesky of Σ − 1e-9·I must succeed
            let shifted = &c.cov - DMatrix::identity(dim, dim) * 1e-9;
            if Cholesky::new(shifted).is_none() {
                return Err(Error::InvalidMixture(format!(
                    "class `{}` covariance not positive definite",
                    c.label
                )));
            }
        }
        let mut labels: Vec<&str> = classes.iter().map(|c| c.label.as_str()).collect();
        labels.sort_unstable();
        labels.dedup();
        if labels.len() != classes.len() {
            return Err(Error::InvalidMixture("duplicate class labels".into()));
        }
        Ok(Self { dim, classes })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: MixtureSpec = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: "<mixture json>".into(),
            msg: e.to_string(),
        })?;
        let classes = spec
            .classes
            .into_iter()
            .map(|c| {
                let rows: Vec<_> =
                    c.cov.iter().map(|r| nalgebra::RowDVector::from_row_slice(r)).collect();
                ClassComponent {
                    label: c.label,
                    weight: c.weight,
                    mean: DVector::from_vec(c.mean),
                    cov: DMatrix::from_rows(&rows),
                }
            })
            .collect();
        Self::new(spec.dim, classes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse { path: path.to_path_buf(), msg },
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let spec = MixtureSpec {
            dim: self.dim,
            classes: self
                .classes
                .iter()
                .map(|c| ClassSpec {
                    label: c.label.clone(),
                    weight: c.weight,
                    mean: c.mean.iter().copied().collect(),
                    cov: (0..self.dim)
                        .map(|i| (0..self.dim).map(|j| c.cov[(i, j)]).collect())
                        .collect(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&spec).expect("mixture spec serializes")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[ClassComponent] {
        &self.classes
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.classes.iter().map(|c| c.label.as_str())
    }

    pub fn class_index(&self, label: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c.label == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        Ok(())
    }

    /// Log density of one noisy component: log N(x; α·μ_c, α²·Σ_c + σ²·I).
    fn component_log_density(&self, idx: usize, x: &DVector<f64>, alpha: f64, sigma: f64) -> f64 {
        let c = &self.classes[idx];
        let cov_t = &c.cov * (alpha * alpha) + DMatrix::identity(self.dim, self.dim) * (sigma * sigma);
        let chol = Cholesky::new(cov_t).expect("noisy covariance SPD by construction");
        let diff = x - &c.mean * alpha;
        let solved = chol.solve(&diff);
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        -0.5 * (self.dim as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + diff.dot(&solved))
    }

    /// Gradient of the component log density at x.
    fn component_grad(&self, idx: usize, x: &DVector<f64>, alpha: f64, sigma: f64) -> DVector<f64> {
        let c = &self.classes[idx];
        let cov_t = &c.cov * (alpha * alpha) + DMatrix::identity(self.dim, self.dim) * (sigma * sigma);
        let chol = Cholesky::new(cov_t).expect("noisy covariance SPD by construction");
        let diff = x - &c.mean * alpha;
        -chol.solve(&diff)
    }

    /// ε-prediction for the conditional score: ε = −σ(t)·∇ₓ log p_t(x | c).
    pub fn eps_conditional(
        &self,
        schedule: &NoiseSchedule,
        x: &DVector<f64>,
        t: f64,
        label: &str,
    ) -> Result<ScoreOutput> {
        self.check_dim(x)?;
        let idx = self.class_index(label)?;
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let grad = self.component_grad(idx, x, alpha, sigma);
        Ok(ScoreOutput { eps: grad * (-sigma), kind: ScoreKind::Conditional })
    }

    /// ε-prediction for the marginal (unconditional) score.
    ///
    /// The marginal mixture score is the responsibility-weighted combination
    /// of per-component Gaussian scores; responsibilities are computed with
    /// log-sum-exp.
    pub fn eps_unconditional(
        &self,
        schedule: &NoiseSchedule,
        x: &DVector<f64>,
        t: f64,
    ) -> Result<ScoreOutput> {
        self.check_dim(x)?;
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        let resp = self.responsibilities(x, alpha, sigma);
        let mut grad = DVector::zeros(self.dim);
        for (idx, r) in resp.iter().enumerate() {
            if *r > 0.0 {
                grad += self.component_grad(idx, x, alpha, sigma) * *r;
            }
        }
        Ok(ScoreOutput { eps: grad * (-sigma), kind: ScoreKind::Unconditional })
    }

    /// Posterior component weights at (x, t); always sums to 1.
    fn responsibilities(&self, x: &DVector<f64>, alpha: f64, sigma: f64) -> Vec<f64> {
        let log_terms: Vec<f64> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| c.weight.ln() + self.component_log_density(i, x, alpha, sigma))
            .collect();
        softmax_from_logs(&log_terms)
    }

    /// log p_t(x | c) when a label is given, log p_t(x) otherwise.
    pub fn log_density(
        &self,
        schedule: &NoiseSchedule,
        x: &DVector<f64>,
        t: f64,
        label: Option<&str>,
    ) -> Result<f64> {
        self.check_dim(x)?;
        let (alpha, sigma) = schedule.alpha_sigma(t)?;
        match label {
            Some(l) => {
                let idx = self.class_index(l)?;
                Ok(self.component_log_density(idx, x, alpha, sigma))
            }
            None => {
                let log_terms: Vec<f64> = self
                    .classes
                    .iter()
                    .enumerate()
                    .map(|(i, c)| c.weight.ln() + self.component_log_density(i, x, alpha, sigma))
                    .collect();
                Ok(log_sum_exp(&log_terms))
            }
        }
    }

    /// Class posterior at t = 0 (clean data): softmax of
    /// log w_c + log N(x; μ_c, Σ_c).
    pub fn class_posterior(&self, x: &DVector<f64>) -> Result<Vec<f64>> {
        self.check_dim(x)?;
        let log_terms: Vec<f64> = self
            .classes
            .iter()
            .enumerate()
            .map(|(i, c)| c.weight.ln() + self.component_log_density(i, x, 1.0, 0.0))
            .collect();
        Ok(softmax_from_logs(&log_terms))
    }

    /// Label with the largest posterior at x.
    pub fn posterior_argmax(&self, x: &DVector<f64>) -> Result<&str> {
        let post = self.class_posterior(x)?;
        let (best, _) = post
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).expect("posterior finite"))
            .expect("at least one class");
        Ok(&self.classes[best].label)
    }
}

pub fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn softmax_from_logs(log_terms: &[f64]) -> Vec<f64> {
    let total = log_sum_exp(log_terms);
    let mut out: Vec<f64> = log_terms.iter().map(|v| (v - total).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// The repo's canonical benchmark mixture: 2D, three unit-covariance classes
/// with means on a circle of radius 8, equal weights.
pub fn canonical_model() -> MixtureModel {
    let radius = 8.0;
    let classes = (0..3)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / 3.0;
            ClassComponent {
                label: format!("c{k}"),
                weight: 1.0 / 3.0,
                mean: DVector::from_vec(vec![radius * angle.cos(), radius * angle.sin()]),
                cov: DMatrix::identity(2, 2),
            }
        })
        .collect();
    MixtureModel::new(2, classes).expect("canonical model valid")
}

/// Degenerate single-class model (γ_t ≡ 1 since conditional and marginal
/// scores coincide).
pub fn single_class_model() -> MixtureModel {
    MixtureModel::new(
        2,
        vec![ClassComponent {
            label: "only".into(),
            weight: 1.0,
            mean: DVector::from_vec(vec![2.0, -1.0]),
            cov: DMatrix::identity(2, 2),
        }],
    )
    .expect("single class model valid")
}
