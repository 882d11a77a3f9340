//! Performance models: evolution of the mean and second moment of the
//! coefficient-error vector under the adaptive update, and the steady-state
//! deviation for the unregularized case.
//!
//! The second-moment recursion contracts the exact fourth-order tables from
//! the moment engine; the regularizer enters through a ratio-of-expectations
//! approximation of the group-norm terms. All statistics are shared with
//! the simulation through [`MomentSet`], so predicted and measured curves
//! are comparable point by point.

use crate::moments::MomentSet;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Step-size bound for convergence in the mean: `2 / λ_max`.
pub fn stability_bound(feature_cov: &DMatrix<f64>) -> Result<f64> {
    if feature_cov.nrows() != feature_cov.ncols() {
        return Err(Error::DimensionMismatch(
            feature_cov.nrows(),
            feature_cov.ncols(),
        ));
    }
    let eig = nalgebra::SymmetricEigen::new(feature_cov.clone());
    let max = eig.eigenvalues.max();
    if !(max > 0.0) {
        return Err(Error::Unstable(
            "zero feature covariance has an unbounded step-size range".into(),
        ));
    }
    Ok(2.0 / max)
}

/// Closed-form approximation of `E{ R γ̂ / sqrt(γ̂ᵀ R γ̂) }` for
/// `γ̂ ~ N(mean, spread)`:
/// `R · mean / sqrt(Tr{R · spread} + meanᵀ R mean)`.
///
/// Returns zero when the denominator vanishes (the subgradient convention)
/// and an error when the radicand is negative beyond round-off.
pub fn reg_mean_term(
    cov: &DMatrix<f64>,
    mean: &DVector<f64>,
    spread: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let num = cov * mean;
    let radicand = (cov * spread).trace() + mean.dot(&num);
    if radicand < -1e-10 {
        return Err(Error::NotPsd(radicand));
    }
    if radicand < 1e-14 {
        return Ok(DVector::zeros(mean.len()));
    }
    Ok(num / radicand.sqrt())
}

/// Residual statistics at the optimal coefficients: the correlation
/// residual `b - R γ*` and the residual-weighted feature second moment
/// `E{s sᵀ e₀²}` assembled from the fourth-order tables.
pub fn optimal_error_moments(
    moments: &MomentSet,
    optimal: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let ks = moments.k_s();
    if optimal.len() != ks {
        return Err(Error::DimensionMismatch(optimal.len(), ks));
    }
    let corr_residual = &moments.feature_out_corr - &moments.feature_cov * optimal;
    let mut drive = moments.second_out_sq.clone();
    for u in 0..ks {
        for v in 0..ks {
            let mut third = 0.0;
            for p in 0..ks {
                third += optimal[p] * moments.third_out_at(u, v, p);
            }
            drive[(u, v)] -= 2.0 * third;
        }
    }
    // quadratic term through the vectorized fourth moment
    let kron = kron_vec(optimal, optimal);
    let quad = &moments.fourth * kron;
    for v in 0..ks {
        for u in 0..ks {
            drive[(u, v)] += quad[u + v * ks];
        }
    }
    Ok((corr_residual, drive))
}

fn kron_vec(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    // column-major pairing: out[u + v*len] = a[u] * b[v]
    let k = a.len();
    DVector::from_fn(k * k, |i, _| a[i % k] * b[i / k])
}

fn vec_of(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

fn unvec(v: &DVector<f64>, k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(k, k, v.as_slice())
}

fn sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    m + m.transpose()
}

/// Mean deviation and second moment of the coefficient error at one
/// iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryState {
    pub mean_dev: DVector<f64>,
    pub second_moment: DMatrix<f64>,
    pub iter: usize,
}

impl TheoryState {
    /// Covariance of the error: second moment minus squared mean.
    pub fn spread(&self) -> DMatrix<f64> {
        &self.second_moment - &self.mean_dev * self.mean_dev.transpose()
    }

    /// Mean of the coefficient vector itself.
    pub fn mean_coeffs(&self, optimal: &DVector<f64>) -> DVector<f64> {
        &self.mean_dev + optimal
    }
}

/// Mean-square deviation `Tr{V}`, clamped at zero against round-off.
pub fn msd(state: &TheoryState) -> f64 {
    let t = state.second_moment.trace();
    if t < 0.0 && t > -1e-12 * state.second_moment.norm() {
        0.0
    } else {
        t.max(0.0)
    }
}

/// The coupled mean / second-moment recursion for one configuration.
pub struct TheoryModel<'a> {
    moments: &'a MomentSet,
    optimal: DVector<f64>,
    step_size: f64,
    reg_weight: f64,
    corr_residual: DVector<f64>,
    noise_drive: DMatrix<f64>,
}

impl<'a> TheoryModel<'a> {
    pub fn new(
        moments: &'a MomentSet,
        optimal: DVector<f64>,
        step_size: f64,
        reg_weight: f64,
    ) -> Result<Self> {
        if !(step_size > 0.0) || !(reg_weight >= 0.0) {
            return Err(Error::InvalidParam(
                "need step_size > 0 and reg_weight >= 0".into(),
            ));
        }
        let (corr_residual, noise_drive) = optimal_error_moments(moments, &optimal)?;
        Ok(Self {
            moments,
            optimal,
            step_size,
            reg_weight,
            corr_residual,
            noise_drive,
        })
    }

    pub fn optimal(&self) -> &DVector<f64> {
        &self.optimal
    }

    pub fn corr_residual(&self) -> &DVector<f64> {
        &self.corr_residual
    }

    pub fn noise_drive(&self) -> &DMatrix<f64> {
        &self.noise_drive
    }

    /// State for a run started at zero coefficients: deviation `-γ*`,
    /// deterministic second moment `γ* γ*ᵀ`.
    pub fn initial_state(&self) -> TheoryState {
        TheoryState {
            mean_dev: -self.optimal.clone(),
            second_moment: &self.optimal * self.optimal.transpose(),
            iter: 0,
        }
    }

    /// State for a run started exactly at the optimum (zero deviation).
    pub fn state_at_optimum(&self) -> TheoryState {
        let k = self.moments.k_s();
        TheoryState {
            mean_dev: DVector::zeros(k),
            second_moment: DMatrix::zeros(k, k),
            iter: 0,
        }
    }

    /// The mean-deviation update alone, evaluated at the given state.
    pub fn mean_step(&self, state: &TheoryState) -> Result<DVector<f64>> {
        let mu = self.step_size;
        let mut next = &state.mean_dev - mu * (&self.moments.feature_cov * &state.mean_dev)
            + mu * &self.corr_residual;
        if self.reg_weight > 0.0 {
            let mean_coeffs = state.mean_coeffs(&self.optimal);
            let spread = state.spread();
            for cov in &self.moments.deriv_covs {
                next -= mu * self.reg_weight * reg_mean_term(cov, &mean_coeffs, &spread)?;
            }
        }
        Ok(next)
    }

    /// The second-moment update alone, evaluated at the given state.
    pub fn mean_square_step(&self, state: &TheoryState) -> Result<DMatrix<f64>> {
        let ks = self.moments.k_s();
        let mu = self.step_size;
        let eta = self.reg_weight;
        let v2 = &state.second_moment;
        let r = &self.moments.feature_cov;

        // deviation-driven cross terms
        let bias_cross = &state.mean_dev * self.corr_residual.transpose();
        let mut third_contr = DMatrix::zeros(ks, ks);
        for v in 0..ks {
            for u in 0..ks {
                let mut acc = 0.0;
                for a in 0..ks {
                    acc += state.mean_dev[a] * self.moments.third_out_at(u, a, v);
                }
                third_contr[(u, v)] = acc;
            }
        }
        let fourth_contr = unvec(
            &(&self.moments.fourth * kron_vec(&state.mean_dev, &self.optimal)),
            ks,
        );
        let gain_cross = third_contr - fourth_contr;
        // fluctuation amplification through the fourth moment
        let amplified = unvec(&(&self.moments.fourth * vec_of(v2)), ks);

        let mut next = v2 - mu * sym(&(v2 * r)) + mu * sym(&bias_cross)
            - mu * mu * sym(&gain_cross)
            + mu * mu * amplified
            + mu * mu * &self.noise_drive;

        if eta > 0.0 {
            let mean_coeffs = state.mean_coeffs(&self.optimal);
            let spread = state.spread();
            let sp_plus = &spread + &mean_coeffs * mean_coeffs.transpose();
            let mut reg_sum = DVector::zeros(ks);
            let mut reg_cross = DMatrix::zeros(ks, ks);
            for cov in &self.moments.deriv_covs {
                let num = cov * &mean_coeffs;
                let radicand = (cov * &spread).trace() + mean_coeffs.dot(&num);
                if radicand < -1e-10 {
                    return Err(Error::NotPsd(radicand));
                }
                if radicand < 1e-14 {
                    continue;
                }
                let inv = 1.0 / radicand.sqrt();
                reg_sum += inv * &num;
                reg_cross += inv * ((&spread + &state.mean_dev * mean_coeffs.transpose()) * cov);
            }
            let resid_cross = &self.corr_residual * reg_sum.transpose();
            let mut pair_quad = DMatrix::zeros(ks, ks);
            let n = self.moments.deriv_covs.len();
            for mi in 0..n {
                let rm = &self.moments.deriv_covs[mi];
                let rm_mean = rm * &mean_coeffs;
                let rm_spread = rm * &spread;
                for pi in 0..n {
                    let rp = &self.moments.deriv_covs[pi];
                    let rp_mean = rp * &mean_coeffs;
                    let rp_spread = rp * &spread;
                    // Gaussian fourth moment of the two quadratic forms
                    let d = 4.0 * rm_mean.dot(&(&spread * &rp_mean))
                        + 2.0 * (&rm_spread * &rp_spread).trace()
                        + (mean_coeffs.dot(&rm_mean) + rm_spread.trace())
                            * (mean_coeffs.dot(&rp_mean) + rp_spread.trace());
                    if d > 1e-300 {
                        pair_quad += (1.0 / d.sqrt()) * (rm * &sp_plus * rp);
                    }
                }
            }
            next += -mu * eta * sym(&reg_cross)
                + mu * mu * eta * eta * pair_quad
                + mu * mu * eta * sym(&(r * &reg_cross))
                - mu * mu * eta * sym(&resid_cross);
        }
        // the construction is symmetric up to round-off; enforce and verify
        let asym = (&next - next.transpose()).norm();
        if asym > 1e-9 * next.norm() {
            return Err(Error::Unstable(format!(
                "second moment lost symmetry ({asym:.3e}) at iteration {}",
                state.iter
            )));
        }
        Ok(0.5 * (&next + next.transpose()))
    }

    /// Advances both moments by one iteration.
    pub fn step(&self, state: &TheoryState) -> Result<TheoryState> {
        let second_moment = self.mean_square_step(state)?;
        let mean_dev = self.mean_step(state)?;
        if !mean_dev.iter().all(|v| v.is_finite()) || !second_moment.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged(state.iter + 1));
        }
        Ok(TheoryState {
            mean_dev,
            second_moment,
            iter: state.iter + 1,
        })
    }

    /// Steady-state second moment for the unregularized case: solves
    /// `(I₂ - F₀) vec{V} = μ² vec{drive}` with
    /// `F₀ = I₂ - μ(I⊗R + R⊗I) + μ² F`, restricted to the spectrally
    /// excited subspace (eigenvalues of `I₂ - F₀` below `1e-10` of the
    /// largest are unexcited and carry no steady-state mass).
    pub fn steady_state_matrix(&self) -> Result<DMatrix<f64>> {
        if self.reg_weight != 0.0 {
            return Err(Error::InvalidParam(
                "steady-state solution requires zero regularizer weight".into(),
            ));
        }
        let ks = self.moments.k_s();
        let mu = self.step_size;
        let r = &self.moments.feature_cov;
        let eye: DMatrix<f64> = DMatrix::identity(ks, ks);
        let mut gap = mu * (eye.kronecker(r) + r.kronecker(&eye));
        gap -= mu * mu * &self.moments.fourth; // gap = I₂ - F₀, symmetric
        let eig = nalgebra::SymmetricEigen::new(gap);
        let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
        if !(max > 0.0) {
            return Err(Error::Unstable("no excited modes".into()));
        }
        let cut = 1e-10 * max;
        // spectral radius over the excited modes: need |1 - λ| < 1
        for &l in eig.eigenvalues.iter() {
            if l.abs() > cut && (1.0 - l).abs() >= 1.0 {
                return Err(Error::Unstable(format!(
                    "steady-state map has spectral radius {:.6} >= 1",
                    (1.0 - l).abs()
                )));
            }
        }
        let b = eig.eigenvectors.transpose() * (mu * mu * vec_of(&self.noise_drive));
        let x = DVector::from_iterator(
            ks * ks,
            b.iter()
                .zip(eig.eigenvalues.iter())
                .map(|(&bi, &li)| if li.abs() > cut { bi / li } else { 0.0 }),
        );
        let v = unvec(&(&eig.eigenvectors * x), ks);
        Ok(0.5 * (&v + v.transpose()))
    }

    /// Steady-state mean-square deviation (trace of the steady-state
    /// second moment), clamped at zero.
    pub fn steady_state_msd(&self) -> Result<f64> {
        Ok(self.steady_state_matrix()?.trace().max(0.0))
    }
}
