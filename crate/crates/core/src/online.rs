//! The adaptive estimator: stochastic-gradient coefficient updates with a
//! group-sparsity term driven by per-node derivative-feature covariances,
//! sequential covariance estimation, and the thresholded topology readout.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Hyperparameters of the update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorParams {
    /// gradient step size, > 0
    pub step_size: f64,
    /// group-regularizer weight, >= 0
    pub reg_weight: f64,
    /// forgetting factor of the sequential covariance estimate, in [0, 1)
    pub forgetting: f64,
}

impl EstimatorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::InvalidParam(format!(
                "step size must be positive, got {}",
                self.step_size
            )));
        }
        if !(self.reg_weight >= 0.0) {
            return Err(Error::InvalidParam(format!(
                "regularizer weight must be nonnegative, got {}",
                self.reg_weight
            )));
        }
        if !(0.0..1.0).contains(&self.forgetting) {
            return Err(Error::InvalidParam(format!(
                "forgetting factor must lie in [0, 1), got {}",
                self.forgetting
            )));
        }
        Ok(())
    }
}

/// Evolving state: the coefficient vector and, when the sequential
/// covariance estimate is in use, one estimate per input node.
///
/// The covariance estimates start at `ε I` with `ε = 1e-8` so the group
/// norms are defined from the first step.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub coeffs: DVector<f64>,
    pub cov_estimates: Vec<DMatrix<f64>>,
    pub step_count: usize,
}

const COV_INIT_EPS: f64 = 1e-8;

impl Estimator {
    /// `n_inputs` input nodes, `dict_len` dictionary atoms; coefficient
    /// length is `(n_inputs + 1) · dict_len`. `init` defaults to zero.
    pub fn new(
        n_inputs: usize,
        dict_len: usize,
        params: &EstimatorParams,
        init: Option<DVector<f64>>,
    ) -> Result<Self> {
        params.validate()?;
        let k = (n_inputs + 1) * dict_len;
        let coeffs = match init {
            Some(v) => {
                if v.len() != k {
                    return Err(Error::DimensionMismatch(v.len(), k));
                }
                v
            }
            None => DVector::zeros(k),
        };
        let cov_estimates = (0..n_inputs)
            .map(|_| COV_INIT_EPS * DMatrix::identity(k, k))
            .collect();
        Ok(Self {
            coeffs,
            cov_estimates,
            step_count: 0,
        })
    }

    /// Sequential covariance update
    /// `R̂_m ← α R̂_m + (1-α) t_m t_mᵀ` for every input node.
    pub fn update_cov_estimates(
        &mut self,
        deriv_features: &[DVector<f64>],
        forgetting: f64,
    ) -> Result<()> {
        if deriv_features.len() != self.cov_estimates.len() {
            return Err(Error::DimensionMismatch(
                deriv_features.len(),
                self.cov_estimates.len(),
            ));
        }
        for (est, t) in self.cov_estimates.iter_mut().zip(deriv_features) {
            if t.len() != est.nrows() {
                return Err(Error::DimensionMismatch(t.len(), est.nrows()));
            }
            *est *= forgetting;
            // symmetric rank-one accumulation keeps the estimate symmetric
            est.syger(1.0 - forgetting, t, t, 1.0);
            for i in 0..est.nrows() {
                for j in (i + 1)..est.ncols() {
                    est[(i, j)] = est[(j, i)];
                }
            }
        }
        Ok(())
    }

    /// Estimated derivative norm for input node `m`:
    /// `sqrt(coeffsᵀ · cov · coeffs)`, with negative round-off clamped.
    pub fn edge_strength(&self, cov: &DMatrix<f64>) -> f64 {
        edge_strength(&self.coeffs, cov)
    }

    /// One update with the supplied per-node covariances (exact matrices or
    /// any external estimate).
    pub fn step_with_covs(
        &mut self,
        regressor: &DVector<f64>,
        output: f64,
        covs: &[DMatrix<f64>],
        params: &EstimatorParams,
    ) -> Result<()> {
        if regressor.len() != self.coeffs.len() {
            return Err(Error::DimensionMismatch(regressor.len(), self.coeffs.len()));
        }
        let err = output - regressor.dot(&self.coeffs);
        self.coeffs.axpy(params.step_size * err, regressor, 1.0);
        if params.reg_weight > 0.0 {
            for cov in covs {
                let grad = cov * &self.coeffs;
                let norm_sq = self.coeffs.dot(&grad);
                // subgradient convention: a vanished group contributes zero
                if norm_sq > 0.0 {
                    self.coeffs.axpy(
                        -params.step_size * params.reg_weight / norm_sq.sqrt(),
                        &grad,
                        1.0,
                    );
                }
            }
        }
        self.step_count += 1;
        if !self.coeffs.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(self.step_count));
        }
        Ok(())
    }

    /// One update using the estimator's own sequential covariance
    /// estimates.
    pub fn step_estimated(
        &mut self,
        regressor: &DVector<f64>,
        output: f64,
        params: &EstimatorParams,
    ) -> Result<()> {
        let covs = std::mem::take(&mut self.cov_estimates);
        let r = self.step_with_covs(regressor, output, &covs, params);
        self.cov_estimates = covs;
        r
    }
}

impl Estimator {
    /// Text snapshot (step counter, then one coefficient per line at 17
    /// significant digits) for checkpointing long runs. Covariance
    /// estimates are not part of the snapshot; restarts in estimated mode
    /// re-warm them.
    pub fn snapshot_text(&self) -> String {
        let mut out = format!("{}\n", self.step_count);
        for v in self.coeffs.iter() {
            out.push_str(&format!("{v:.16e}\n"));
        }
        out
    }

    /// Restores a snapshot produced by [`Estimator::snapshot_text`].
    pub fn restore_snapshot(&mut self, text: &str) -> Result<()> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let step_count: usize = lines
            .next()
            .ok_or_else(|| Error::Parse("empty snapshot".into()))?
            .trim()
            .parse()
            .map_err(|e| Error::Parse(format!("snapshot counter: {e}")))?;
        let coeffs: std::result::Result<Vec<f64>, _> =
            lines.map(|l| l.trim().parse::<f64>()).collect();
        let coeffs = coeffs.map_err(|e| Error::Parse(format!("snapshot: {e}")))?;
        if coeffs.len() != self.coeffs.len() {
            return Err(Error::DimensionMismatch(coeffs.len(), self.coeffs.len()));
        }
        self.coeffs = DVector::from_vec(coeffs);
        self.step_count = step_count;
        Ok(())
    }
}

/// `sqrt(coeffsᵀ · cov · coeffs)` with negative round-off clamped to zero.
pub fn edge_strength(coeffs: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let q = coeffs.dot(&(cov * coeffs));
    q.max(0.0).sqrt()
}

/// Thresholded readout: edge present iff its strength reaches the per-node
/// threshold.
pub fn read_topology(strengths: &[f64], thresholds: &[f64]) -> Result<Vec<bool>> {
    if strengths.len() != thresholds.len() {
        return Err(Error::DimensionMismatch(strengths.len(), thresholds.len()));
    }
    Ok(strengths
        .iter()
        .zip(thresholds)
        .map(|(&s, &t)| s >= t)
        .collect())
}

/// Midpoint of the largest gap between consecutive sorted strengths. With a
/// single strength, half of it.
pub fn largest_gap_threshold(strengths: &[f64]) -> f64 {
    let mut sorted = strengths.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite strengths"));
    if sorted.len() < 2 {
        return sorted.first().map_or(0.0, |s| 0.5 * s);
    }
    let mut best = (0, 0.0);
    for i in 0..sorted.len() - 1 {
        let gap = sorted[i + 1] - sorted[i];
        if gap > best.1 {
            best = (i, gap);
        }
    }
    0.5 * (sorted[best.0] + sorted[best.0 + 1])
}
