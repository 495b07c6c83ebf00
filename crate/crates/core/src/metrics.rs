//! Desk-scale quality and cost metrics: Gaussian fits, the squared
//! Bures–Wasserstein distance, condition-alignment accuracy, and eval-count
//! aggregation.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::mixture::MixtureModel;
use crate::sampler::SampleTrace;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassQuality {
    /// Squared Bures–Wasserstein distance to the target class Gaussian.
    pub w2: f64,
    /// Euclidean distance between fitted and target means.
    pub mean_err: f64,
    /// Frobenius distance between fitted and target covariances.
    pub cov_err: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub per_class: BTreeMap<String, ClassQuality>,
    pub alignment_acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub total_evals: u64,
    pub diagnostic_evals: u64,
    pub mean_wall_ms: f64,
    /// 1 − total_evals / (2·T·n), the saving against a full-CFG budget.
    pub evals_saved_ratio: f64,
}

/// Sample mean and unbiased (n−1) covariance, symmetrized.
///
/// Needs at least d+1 samples; a covariance whose Cholesky fails is reported
/// as degenerate rather than repaired.
pub fn fit_gaussian(samples: &[DVector<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = samples.len();
    let d = samples.first().map(|s| s.len()).unwrap_or(0);
    if n < d + 1 || d == 0 {
        return Err(Error::TooFewSamples { needed: d + 1, got: n });
    }
    let mut mean = DVector::zeros(d);
    for s in samples {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
        mean += s;
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let diff = s - &mean;
        cov += &diff * diff.transpose();
    }
    cov /= (n - 1) as f64;
    let cov = (&cov + cov.transpose()) * 0.5;
    if Cholesky::new(cov.clone()).is_none() {
        return Err(Error::DegenerateCovariance);
    }
    Ok((mean, cov))
}

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// [−1e−10, 0) are treated as round-off and floored at zero; anything more
/// negative is an error.
fn sym_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -1e-10 {
            return Err(Error::NotSpd);
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Squared 2-Wasserstein distance between Gaussians:
/// ‖μ₁−μ₂‖² + tr(Σ₁ + Σ₂ − 2·(Σ₂^{1/2} Σ₁ Σ₂^{1/2})^{1/2}).
pub fn w2_gaussian(
    mean1: &DVector<f64>,
    cov1: &DMatrix<f64>,
    mean2: &DVector<f64>,
    cov2: &DMatrix<f64>,
) -> Result<f64> {
    if mean1.len() != mean2.len() || cov1.nrows() != cov2.nrows() {
        return Err(Error::DimensionMismatch { expected: mean1.len(), got: mean2.len() });
    }
    let sqrt2 = sym_sqrt(cov2)?;
    let inner = sym_sqrt(&(&sqrt2 * cov1 * &sqrt2))?;
    let bures = (cov1 + cov2 - inner * 2.0).trace();
    let d2 = (mean1 - mean2).norm_squared() + bures;
    // round-off can push a zero distance slightly negative
    Ok(d2.max(0.0))
}

/// Fraction of samples whose posterior argmax matches the requested label.
pub fn alignment_accuracy(
    samples_with_labels: &[(DVector<f64>, String)],
    model: &MixtureModel,
) -> Result<f64> {
    if samples_with_labels.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    let mut hits = 0usize;
    for (x, label) in samples_with_labels {
        model.class_index(label)?;
        if model.posterior_argmax(x)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples_with_labels.len() as f64)
}

/// Aggregate eval counts and wall time across traces from runs with the
/// same T.
pub fn cost_report(traces: &[SampleTrace], t_steps: usize) -> Result<CostReport> {
    if traces.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, got: 0 });
    }
    if traces.iter().any(|tr| tr.rows.len() != t_steps) {
        return Err(Error::MixedStepCounts);
    }
    let total_evals: u64 = traces.iter().map(|t| t.total_evals).sum();
    let diagnostic_evals: u64 = traces.iter().map(|t| t.diagnostic_evals).sum();
    let mean_wall_ms = traces.iter().map(|t| t.wall_ms).sum::<f64>() / traces.len() as f64;
    let budget = 2 * t_steps as u64 * traces.len() as u64;
    Ok(CostReport {
        total_evals,
        diagnostic_evals,
        mean_wall_ms,
        evals_saved_ratio: 1.0 - total_evals as f64 / budget as f64,
    })
}
