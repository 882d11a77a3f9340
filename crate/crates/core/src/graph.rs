//! Ground-truth graph models and stationary signal generators.
//!
//! Two generators are provided: a linear structural model `y = A y + v`
//! with exact Gaussian statistics, and a three-node nonlinear model sampled
//! by inverting `y - f(y) = noise` with a damped Newton iteration.

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::StandardNormal;

/// Binary adjacency matrix with no self-loops. `entry(n, m) = 1` means node
/// `m` feeds node `n` (0-based).
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    entries: DMatrix<f64>,
}

impl AdjacencyMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch(entries.nrows(), entries.ncols()));
        }
        for i in 0..entries.nrows() {
            if entries[(i, i)] != 0.0 {
                return Err(Error::InvalidParam(format!("self-loop at node {i}")));
            }
            for j in 0..entries.ncols() {
                let a = entries[(i, j)];
                if a != 0.0 && a != 1.0 {
                    return Err(Error::InvalidParam(format!(
                        "adjacency entry ({i},{j}) = {a} is not binary"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::DimensionMismatch(row.len(), n));
            }
            for (j, &v) in row.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        Self::new(m)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn n_nodes(&self) -> usize {
        self.entries.nrows()
    }

    /// Row `n` without the diagonal entry, i.e. the edge indicators from
    /// every other node into `n`, ordered by ascending node index.
    pub fn row_without_self(&self, n: usize) -> Vec<bool> {
        (0..self.n_nodes())
            .filter(|&m| m != n)
            .map(|m| self.entries[(n, m)] != 0.0)
            .collect()
    }
}

/// Linear structural model `y = W y + v`, `v ~ N(0, σ_v² I)`, sampled
/// through its exact stationary covariance.
///
/// `W` may be a binary adjacency or any weighted square matrix; `I - W`
/// must be invertible.
#[derive(Debug, Clone)]
pub struct LinearModel {
    mixing: DMatrix<f64>,
    noise_std: f64,
    covariance: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(mixing: &DMatrix<f64>, noise_std: f64) -> Result<Self> {
        if mixing.nrows() != mixing.ncols() {
            return Err(Error::DimensionMismatch(mixing.nrows(), mixing.ncols()));
        }
        if !(noise_std > 0.0) {
            return Err(Error::InvalidParam(format!(
                "noise std must be positive, got {noise_std}"
            )));
        }
        let n = mixing.nrows();
        let i_minus = DMatrix::identity(n, n) - mixing;
        let inv = i_minus
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::ModelConstruction("I - W is singular".into()))?;
        // reject numerically meaningless inverses as construction failures
        let cond = i_minus.norm() * inv.norm();
        if !cond.is_finite() || cond > 1e14 {
            return Err(Error::ModelConstruction(format!(
                "I - W is numerically singular (condition ~ {cond:.2e})"
            )));
        }
        let covariance = noise_std * noise_std * (&inv * inv.transpose());
        let chol = nalgebra::Cholesky::new(covariance.clone())
            .ok_or_else(|| Error::ModelConstruction("covariance not PD".into()))?
            .l()
            .into();
        Ok(Self {
            mixing: mixing.clone(),
            noise_std,
            covariance,
            chol,
        })
    }

    pub fn from_adjacency(adj: &AdjacencyMatrix, noise_std: f64) -> Result<Self> {
        Self::new(adj.matrix(), noise_std)
    }

    pub fn n_nodes(&self) -> usize {
        self.mixing.nrows()
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// Stationary covariance `(I-W)^{-1} σ_v² I (I-W)^{-T}`.
    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    /// One stationary draw using the caller's RNG.
    pub fn draw(&self, rng: &mut impl Rng) -> DVector<f64> {
        let n = self.n_nodes();
        let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        &self.chol * z
    }

    /// `count` i.i.d. draws, a pure function of `(self, seed, count)`.
    pub fn sample(&self, seed: u64, count: usize) -> Vec<DVector<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.draw(&mut rng)).collect()
    }
}

/// Three-node nonlinear model: the coupling strength enters through
/// `g(y) = k1 (y3 + y1)^3 / (k2 y1)` and signals are sampled by solving
/// `y - f(y) = noise` for each standard-normal noise draw.
#[derive(Debug, Clone)]
pub struct NonlinearModel {
    k1: f64,
    k2: f64,
    max_iter: usize,
}

/// Overflow-safe pieces of the sigmoid-like denominator
/// `D(g) = (0.5 + e^g)^5 + 1`: returns `(1/D, D'/D²)` with both limits
/// flushed to zero for large `g`.
fn denom_terms(g: f64) -> (f64, f64) {
    // ln(0.5 + e^g), stable for large |g|
    let lt = if g > 40.0 {
        g + (0.5 * (-g).exp()).ln_1p()
    } else {
        (0.5 + g.exp()).ln()
    };
    let five_lt = 5.0 * lt;
    let inv_d = if five_lt > 700.0 {
        0.0
    } else {
        1.0 / (five_lt.exp() + 1.0)
    };
    let ln_d = if five_lt > 40.0 {
        five_lt
    } else {
        (five_lt.exp() + 1.0).ln()
    };
    // D'/D² = 5 e^g (0.5+e^g)^4 / D²
    let arg = g + 4.0 * lt - 2.0 * ln_d;
    let dd = if arg > 700.0 {
        f64::INFINITY
    } else {
        5.0 * arg.exp()
    };
    (inv_d, dd)
}

impl NonlinearModel {
    pub fn new(k1: f64, k2: f64) -> Result<Self> {
        if !(k1 > 0.0 && k2 > 0.0) {
            return Err(Error::InvalidParam(format!(
                "coupling constants must be positive, got k1={k1}, k2={k2}"
            )));
        }
        Ok(Self {
            k1,
            k2,
            max_iter: 500,
        })
    }

    /// Fixed ground-truth adjacency of the three-node system.
    pub fn adjacency(&self) -> AdjacencyMatrix {
        AdjacencyMatrix::from_rows(&[
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ])
        .expect("static adjacency is valid")
    }

    pub fn n_nodes(&self) -> usize {
        3
    }

    pub fn couplings(&self) -> (f64, f64) {
        (self.k1, self.k2)
    }

    fn g(&self, y: &DVector<f64>) -> f64 {
        let u = y[2] + y[0];
        self.k1 * u * u * u / (self.k2 * y[0])
    }

    /// The structural map `f(y)`.
    pub fn f(&self, y: &DVector<f64>) -> DVector<f64> {
        let g = self.g(y);
        let (inv_d, _) = denom_terms(g);
        DVector::from_vec(vec![y[0] - g, y[1] + (y[1] - g) * inv_d, y[2] + y[0] + g])
    }

    /// Residual `h(y) = y - f(y) - noise` and its Jacobian.
    fn residual(&self, y: &DVector<f64>, noise: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let u = y[2] + y[0];
        let c = self.k1 / self.k2;
        let g = c * u * u * u / y[0];
        let gy1 = c * (3.0 * u * u / y[0] - u * u * u / (y[0] * y[0]));
        let gy3 = 3.0 * c * u * u / y[0];
        let (inv_d, dd) = denom_terms(g);
        let h = DVector::from_vec(vec![
            g - noise[0],
            -(y[1] - g) * inv_d - noise[1],
            -y[0] - g - noise[2],
        ]);
        // rows: dh_i/dy_j
        let coef = inv_d + (y[1] - g) * dd; // d/dg of -(y1-g)/D, factored
        let jac = DMatrix::from_row_slice(
            3,
            3,
            &[
                gy1,
                0.0,
                gy3, //
                coef * gy1,
                -inv_d,
                coef * gy3, //
                -1.0 - gy1,
                0.0,
                -gy3,
            ],
        );
        (h, jac)
    }

    fn newton(&self, init: &DVector<f64>, noise: &DVector<f64>) -> Option<DVector<f64>> {
        let mut y = init.clone();
        if y[0].abs() < 1e-6 {
            y[0] = if y[0] < 0.0 { -1e-3 } else { 1e-3 };
        }
        let (mut h, mut jac) = self.residual(&y, noise);
        let mut r = h.norm();
        for _ in 0..self.max_iter {
            if r <= 1e-12 {
                return Some(y);
            }
            let step = jac.clone().lu().solve(&h)?;
            // backtracking with halving until the residual shrinks and the
            // iterate stays away from the y1 = 0 singularity
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let cand = &y - t * &step;
                if cand[0].abs() > 1e-10 && cand.iter().all(|v| v.is_finite()) {
                    let (hc, jc) = self.residual(&cand, noise);
                    let rc = hc.norm();
                    if rc.is_finite() && rc < r {
                        y = cand;
                        h = hc;
                        jac = jc;
                        r = rc;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        (r <= 1e-10).then_some(y)
    }

    /// Solves `y - f(y) = noise`. The first attempt starts from the noise
    /// vector itself; fallbacks start from the solution of the linear
    /// subsystem obtained by eliminating `g` (the first and third residual
    /// components are linear in it), plus perturbed retries.
    pub fn solve(&self, noise: &DVector<f64>) -> Result<DVector<f64>> {
        let y1 = -(noise[0] + noise[2]);
        let (inv_d, _) = denom_terms(noise[0]);
        let y2 = if inv_d > 0.0 {
            noise[0] - noise[1] / inv_d
        } else {
            // denominator overflowed; start from a large surrogate
            noise[0] - noise[1].signum() * 1e12
        };
        let y3 = (noise[0] * self.k2 * y1 / self.k1).cbrt() - y1;
        let structural = DVector::from_vec(vec![y1, y2, y3]);

        let mut inits = vec![noise.clone(), structural.clone()];
        for scale in [1e-2, 0.3, 3.0] {
            inits.push(DVector::from_vec(vec![
                structural[0] * (1.0 + scale),
                structural[1],
                structural[2] + scale,
            ]));
        }
        let mut best_r = f64::INFINITY;
        for init in &inits {
            if let Some(y) = self.newton(init, noise) {
                return Ok(y);
            }
            let (h, _) = self.residual(init, noise);
            best_r = best_r.min(h.norm());
        }
        Err(Error::RootFinder {
            iters: self.max_iter,
            residual: best_r,
        })
    }

    /// One draw: standard-normal noise, inverted through the model. Noise
    /// vectors leading to `|y1| < 1e-8` sit next to the model singularity
    /// and are rejected and redrawn.
    pub fn draw(&self, rng: &mut impl Rng) -> Result<DVector<f64>> {
        for _ in 0..64 {
            let noise = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            if (noise[0] + noise[2]).abs() < 1e-8 {
                continue;
            }
            return self.solve(&noise);
        }
        Err(Error::InvalidParam(
            "noise rejection did not terminate".into(),
        ))
    }

    /// `count` i.i.d. draws, a pure function of `(self, seed, count)`.
    pub fn sample(&self, seed: u64, count: usize) -> Result<Vec<DVector<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count).map(|_| self.draw(&mut rng)).collect()
    }

    /// Uncentered second moment `E{y yᵀ}` estimated from `count` draws.
    /// This is the zero-mean Gaussian fit the moment engine consumes.
    pub fn empirical_second_moment(&self, seed: u64, count: usize) -> Result<DMatrix<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut acc = DMatrix::zeros(3, 3);
        for _ in 0..count {
            let y = self.draw(&mut rng)?;
            acc.syger(1.0, &y, &y, 1.0);
        }
        acc /= count as f64;
        // syger fills the lower triangle; mirror it
        for i in 0..3 {
            for j in (i + 1)..3 {
                acc[(i, j)] = acc[(j, i)];
            }
        }
        Ok(acc)
    }
}

/// Splits a full `(N+1)`-node signal into the estimator's view for `node`:
/// the other nodes' values in ascending order, then the node's own value.
pub fn split_for_node(signal: &DVector<f64>, node: usize) -> (DVector<f64>, f64) {
    let n = signal.len();
    let inputs = DVector::from_iterator(n - 1, (0..n).filter(|&m| m != node).map(|m| signal[m]));
    (inputs, signal[node])
}

/// Permutes a full-node covariance to the `[inputs..., node]` ordering used
/// by the moment engine.
pub fn covariance_for_node(cov: &DMatrix<f64>, node: usize) -> DMatrix<f64> {
    let n = cov.nrows();
    let order: Vec<usize> = (0..n).filter(|&m| m != node).chain([node]).collect();
    DMatrix::from_fn(n, n, |i, j| cov[(order[i], order[j])])
}
