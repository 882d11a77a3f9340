//! Exact moment engine for Gaussian inputs.
//!
//! Every statistic the performance models need — the regressor covariance,
//! its correlation with the output signal, the derivative-feature
//! covariances, and the fourth-order tables — is an expectation of the form
//!
//! ```text
//! E{ Π_j (ỹ[a_j] - o_j)  ·  Π_t exp(-‖y - d_t‖² / 2σ²) }
//! ```
//!
//! where `ỹ = [inputs; output] ~ N(0, R)`, the `d_t` are fixed dictionary
//! atoms (with multiplicity), each polynomial factor optionally subtracts an
//! atom coordinate, and at most four polynomial factors appear. Completing
//! the square turns the kernel weights into a Gaussian reweighting: with
//! `Σ' = (c/σ² · B + R⁻¹)⁻¹` (`B` projects onto the input block, `c` the
//! number of atom weights) and `μ' = Σ' w`, `w = [Σ_t d_t; 0]/σ²`,
//!
//! ```text
//! value = sqrt(det Σ' / det R) · exp(-Σ_t ‖d_t‖²/2σ² + ½ wᵀ Σ' w)
//!         · E_{N(μ',Σ')}{ Π_j (ỹ[a_j] - o_j) }
//! ```
//!
//! and the remaining polynomial expectation expands into non-central
//! Gaussian product moments of order ≤ 4.
//!
//! Feature entries are sums of such monomials (the mixed second derivative
//! contributes two), so every table entry is assembled from a handful of
//! calls to the same primitive. The Monte-Carlo estimators in the test
//! suites are the independent oracle for all of it.

use crate::kernel::Dictionary;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Non-central Gaussian product moment `E{ Π x[indices] }` for up to four
/// (not necessarily distinct) indices, via the mean/covariance expansion.
pub fn gaussian_product_moment(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    indices: &[usize],
) -> Result<f64> {
    if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
        return Err(Error::DimensionMismatch(mean.len(), cov.nrows()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= mean.len()) {
        return Err(Error::InvalidParam(format!("index {bad} out of range")));
    }
    let m = |i: usize| mean[indices[i]];
    let c = |i: usize, j: usize| cov[(indices[i], indices[j])];
    Ok(match indices.len() {
        0 => 1.0,
        1 => m(0),
        2 => m(0) * m(1) + c(0, 1),
        3 => m(0) * m(1) * m(2) + m(2) * c(0, 1) + m(1) * c(0, 2) + m(0) * c(1, 2),
        4 => {
            m(0) * m(1) * m(2) * m(3)
                + c(0, 1) * c(2, 3)
                + c(0, 2) * c(1, 3)
                + c(0, 3) * c(1, 2)
                + m(0) * m(1) * c(2, 3)
                + m(0) * m(2) * c(1, 3)
                + m(0) * m(3) * c(1, 2)
                + m(1) * m(2) * c(0, 3)
                + m(1) * m(3) * c(0, 2)
                + m(2) * m(3) * c(0, 1)
        }
        n => {
            return Err(Error::InvalidParam(format!(
                "at most 4 active indices supported, got {n}"
            )))
        }
    })
}

/// One polynomial factor `ỹ[y_index] - offset`, where the offset is either
/// absent (plain signal entry) or the coordinate `coord` of the atom at
/// position `slot` in the atom list of the same call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolyFactor {
    pub y_index: usize,
    pub offset: Option<(usize, usize)>,
}

/// Selector-flag parameterization of the generic moment: nesting flags
/// activate the second, third and fourth atom weight, factors are optional
/// and address atom offsets through the stacked coordinate index
/// (`atom slot · n_inputs + coordinate`).
#[derive(Debug, Clone, Copy, Default)]
pub struct SelectorParams {
    pub pair: bool,
    pub triple: bool,
    pub quad: bool,
    pub atoms: [Option<usize>; 4],
    pub factors: [Option<SelectorFactor>; 4],
}

#[derive(Debug, Clone, Copy)]
pub struct SelectorFactor {
    pub signal_index: usize,
    pub stacked_atom_coord: Option<usize>,
}

/// One feature-vector entry, as a factor of an expectation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFactor {
    /// `κ(y, ω_atom)`
    Kernel { atom: usize },
    /// derivative of `κ(y, ω_atom)` in coordinate `node` of the atom
    DictGrad { node: usize, atom: usize },
    /// derivative in coordinate `node` of the input
    InputGrad { node: usize, atom: usize },
    /// mixed second derivative: atom coordinate `node_a`, input coordinate
    /// `node_m`
    CrossHessian {
        node_a: usize,
        node_m: usize,
        atom: usize,
    },
    /// the output signal entry itself
    Output,
}

struct MonomialTerm {
    coef: f64,
    // (y index, Some(coordinate of this factor's own atom) | None)
    polys: [Option<(usize, Option<usize>)>; 2],
    has_atom: bool,
}

/// Precomputed Gaussian context: input-plus-output covariance (inputs first,
/// output last), kernel bandwidth, dictionary, and the per-atom-count
/// reweighting caches.
#[derive(Debug, Clone)]
pub struct MomentContext {
    input_cov: DMatrix<f64>,
    bandwidth: f64,
    dict: Dictionary,
    // per atom count 0..=4: (Σ', prefactor) or why that weight count is
    // numerically unusable
    cov_prime: Vec<std::result::Result<(DMatrix<f64>, f64), String>>,
    atom_sq_norms: Vec<f64>,
}

impl MomentContext {
    pub fn new(input_cov: DMatrix<f64>, bandwidth: f64, dict: Dictionary) -> Result<Self> {
        let dim = input_cov.nrows();
        if input_cov.ncols() != dim {
            return Err(Error::DimensionMismatch(dim, input_cov.ncols()));
        }
        if dict.dim() + 1 != dim {
            return Err(Error::DimensionMismatch(dict.dim() + 1, dim));
        }
        if !(bandwidth > 0.0) {
            return Err(Error::InvalidParam("bandwidth must be positive".into()));
        }
        let sym_err = (&input_cov - input_cov.transpose()).norm();
        if sym_err > 1e-12 * input_cov.norm().max(1.0) {
            return Err(Error::InvalidParam("input covariance not symmetric".into()));
        }
        let chol =
            nalgebra::Cholesky::new(input_cov.clone()).ok_or_else(|| Error::NotPsd(f64::NAN))?;
        let log_det_r: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let inv_r = chol.inverse();

        let n = dim - 1;
        let mut cov_prime = Vec::with_capacity(5);
        for c in 0..=4usize {
            let mut m = inv_r.clone();
            for j in 0..n {
                m[(j, j)] += c as f64 / (bandwidth * bandwidth);
            }
            cov_prime.push(Self::invert_checked(&m, log_det_r));
        }
        let atom_sq_norms = dict.elements().iter().map(|e| e.norm_squared()).collect();
        Ok(Self {
            input_cov,
            bandwidth,
            dict,
            cov_prime,
            atom_sq_norms,
        })
    }

    fn invert_checked(
        m: &DMatrix<f64>,
        log_det_r: f64,
    ) -> std::result::Result<(DMatrix<f64>, f64), String> {
        let eig = nalgebra::SymmetricEigen::new(m.clone());
        let min = eig.eigenvalues.min();
        let max = eig.eigenvalues.max();
        if !(min > 0.0) {
            return Err(format!("reweighted precision not PD (min eig {min:.3e})"));
        }
        let cond = max / min;
        if cond > 1e12 {
            return Err(format!("condition number {cond:.3e} exceeds 1e12"));
        }
        let chol = nalgebra::Cholesky::new(m.clone())
            .ok_or_else(|| format!("Cholesky failed (min eig {min:.3e})"))?;
        let log_det_m: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        // prefactor sqrt(det Σ' / det R) with Σ' = m⁻¹
        let prefactor = (-0.5 * (log_det_m + log_det_r)).exp();
        Ok((chol.inverse(), prefactor))
    }

    pub fn dict(&self) -> &Dictionary {
        &self.dict
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn input_cov(&self) -> &DMatrix<f64> {
        &self.input_cov
    }

    pub fn n_inputs(&self) -> usize {
        self.dict.dim()
    }

    /// Stacked feature length `(n_inputs + 1) · |dictionary|`.
    pub fn feature_len(&self) -> usize {
        (self.n_inputs() + 1) * self.dict.len()
    }

    /// The core primitive: expectation of up to four polynomial factors
    /// times one kernel weight per listed atom (repeats allowed).
    pub fn kernel_weighted_moment(&self, atoms: &[usize], factors: &[PolyFactor]) -> Result<f64> {
        if atoms.len() > 4 {
            return Err(Error::InvalidParam("more than 4 kernel weights".into()));
        }
        if factors.len() > 4 {
            return Err(Error::InvalidParam("more than 4 polynomial factors".into()));
        }
        let dim = self.input_cov.nrows();
        let n = dim - 1;
        for f in factors {
            if f.y_index >= dim {
                return Err(Error::InvalidParam("signal index out of range".into()));
            }
            if let Some((slot, coord)) = f.offset {
                if slot >= atoms.len() || coord >= n {
                    return Err(Error::InvalidParam("factor offset out of range".into()));
                }
            }
        }
        let (sigma_p, prefactor) = match &self.cov_prime[atoms.len()] {
            Ok(v) => v,
            Err(msg) => return Err(Error::Singular(msg.clone())),
        };
        let s2 = self.bandwidth * self.bandwidth;

        let mut w = DVector::zeros(dim);
        let mut sq = 0.0;
        for &a in atoms {
            let atom = self.dict.element(a);
            for j in 0..n {
                w[j] += atom[j] / s2;
            }
            sq += self.atom_sq_norms[a];
        }
        let mu_p = sigma_p * &w;
        let expo = -sq / (2.0 * s2) + 0.5 * w.dot(&mu_p);

        let k = factors.len();
        let mut offsets = [0.0f64; 4];
        for (j, f) in factors.iter().enumerate() {
            offsets[j] = match f.offset {
                Some((slot, coord)) => self.dict.element(atoms[slot])[coord],
                None => 0.0,
            };
        }
        let mut poly = 0.0;
        let mut idx = [0usize; 4];
        for mask in 0..(1u32 << k) {
            let mut coef = 1.0;
            let mut cnt = 0;
            for j in 0..k {
                if mask >> j & 1 == 1 {
                    idx[cnt] = factors[j].y_index;
                    cnt += 1;
                } else {
                    coef *= -offsets[j];
                }
            }
            if coef != 0.0 {
                poly += coef * gaussian_product_moment(&mu_p, sigma_p, &idx[..cnt])?;
            }
        }
        Ok(prefactor * expo.exp() * poly)
    }

    /// Selector-flag form of the same primitive. Flags must nest
    /// (`quad ⇒ triple ⇒ pair`); atom slots must be populated exactly for
    /// the active weights, and stacked coordinates must address active
    /// slots.
    pub fn selector_moment(&self, params: &SelectorParams) -> Result<f64> {
        if (params.quad && !params.triple) || (params.triple && !params.pair) {
            return Err(Error::InvalidParam(
                "selector flags must nest: quad ⇒ triple ⇒ pair".into(),
            ));
        }
        let n_active = 1 + params.pair as usize + params.triple as usize + params.quad as usize;
        let mut atoms = Vec::with_capacity(n_active);
        for slot in 0..n_active {
            atoms.push(params.atoms[slot].ok_or_else(|| {
                Error::InvalidParam(format!("atom slot {slot} required but missing"))
            })?);
        }
        let n = self.n_inputs();
        let mut factors = Vec::new();
        for f in params.factors.iter().flatten() {
            let offset = match f.stacked_atom_coord {
                None => None,
                Some(sc) => {
                    let slot = sc / n;
                    let coord = sc % n;
                    if slot >= n_active {
                        return Err(Error::InvalidParam(format!(
                            "stacked coordinate {sc} addresses inactive atom slot {slot}"
                        )));
                    }
                    Some((slot, coord))
                }
            };
            factors.push(PolyFactor {
                y_index: f.signal_index,
                offset,
            });
        }
        self.kernel_weighted_moment(&atoms, &factors)
    }

    fn expand(&self, f: FeatureFactor) -> ([Option<MonomialTerm>; 2], usize) {
        let s2 = self.bandwidth * self.bandwidth;
        match f {
            FeatureFactor::Kernel { .. } => (
                [
                    Some(MonomialTerm {
                        coef: 1.0,
                        polys: [None, None],
                        has_atom: true,
                    }),
                    None,
                ],
                1,
            ),
            FeatureFactor::DictGrad { node, .. } => (
                [
                    Some(MonomialTerm {
                        coef: 1.0 / s2,
                        polys: [Some((node, Some(node))), None],
                        has_atom: true,
                    }),
                    None,
                ],
                1,
            ),
            FeatureFactor::InputGrad { node, .. } => (
                [
                    Some(MonomialTerm {
                        coef: -1.0 / s2,
                        polys: [Some((node, Some(node))), None],
                        has_atom: true,
                    }),
                    None,
                ],
                1,
            ),
            FeatureFactor::CrossHessian { node_a, node_m, .. } => {
                let first = MonomialTerm {
                    coef: -1.0 / (s2 * s2),
                    polys: [Some((node_a, Some(node_a))), Some((node_m, Some(node_m)))],
                    has_atom: true,
                };
                if node_a == node_m {
                    (
                        [
                            Some(first),
                            Some(MonomialTerm {
                                coef: 1.0 / s2,
                                polys: [None, None],
                                has_atom: true,
                            }),
                        ],
                        2,
                    )
                } else {
                    ([Some(first), None], 1)
                }
            }
            FeatureFactor::Output => (
                [
                    Some(MonomialTerm {
                        coef: 1.0,
                        polys: [Some((self.n_inputs(), None)), None],
                        has_atom: false,
                    }),
                    None,
                ],
                1,
            ),
        }
    }

    fn factor_atom(f: &FeatureFactor) -> Option<usize> {
        match *f {
            FeatureFactor::Kernel { atom }
            | FeatureFactor::DictGrad { atom, .. }
            | FeatureFactor::InputGrad { atom, .. }
            | FeatureFactor::CrossHessian { atom, .. } => Some(atom),
            FeatureFactor::Output => None,
        }
    }

    /// Expectation of a product of feature entries (and output factors).
    /// Each mixed second derivative splits into two monomials, so the
    /// result is a short signed sum of primitive calls.
    pub fn feature_product_expectation(&self, factors: &[FeatureFactor]) -> Result<f64> {
        let k = factors.len();
        if k > 4 {
            return Err(Error::InvalidParam("more than 4 feature factors".into()));
        }
        let expansions: Vec<([Option<MonomialTerm>; 2], usize)> =
            factors.iter().map(|&f| self.expand(f)).collect();
        let mut total = 0.0;
        let combos: usize = expansions.iter().map(|(_, n)| n).product();
        for combo in 0..combos {
            let mut rem = combo;
            let mut coef = 1.0;
            let mut atoms: Vec<usize> = Vec::with_capacity(4);
            let mut polys: Vec<PolyFactor> = Vec::with_capacity(4);
            for (fi, (terms, count)) in expansions.iter().enumerate() {
                let choice = rem % count;
                rem /= count;
                let term = terms[choice].as_ref().expect("term populated");
                coef *= term.coef;
                let slot = if term.has_atom {
                    let atom = Self::factor_atom(&factors[fi]).expect("atom factor");
                    atoms.push(atom);
                    Some(atoms.len() - 1)
                } else {
                    None
                };
                for p in term.polys.iter().flatten() {
                    let (y_index, own_coord) = *p;
                    polys.push(PolyFactor {
                        y_index,
                        offset: own_coord.map(|c| (slot.expect("atom-bound poly"), c)),
                    });
                }
            }
            total += coef * self.kernel_weighted_moment(&atoms, &polys)?;
        }
        Ok(total)
    }

    /// Regressor entry `u` as a feature factor: gradient blocks first
    /// (node-major, dictionary-minor), kernel block last.
    pub fn regressor_factor(&self, u: usize) -> FeatureFactor {
        let d = self.dict.len();
        let nd = self.n_inputs() * d;
        if u < nd {
            FeatureFactor::DictGrad {
                node: u / d,
                atom: u % d,
            }
        } else {
            FeatureFactor::Kernel { atom: u - nd }
        }
    }

    /// Derivative-feature entry `u` for input node `m`: mixed-Hessian blocks
    /// first, input-gradient block last.
    pub fn deriv_factor(&self, u: usize, m: usize) -> FeatureFactor {
        let d = self.dict.len();
        let nd = self.n_inputs() * d;
        if u < nd {
            FeatureFactor::CrossHessian {
                node_a: u / d,
                node_m: m,
                atom: u % d,
            }
        } else {
            FeatureFactor::InputGrad {
                node: m,
                atom: u - nd,
            }
        }
    }

    /// `E{s sᵀ}`, symmetric by construction.
    pub fn feature_covariance(&self) -> Result<DMatrix<f64>> {
        let ks = self.feature_len();
        let mut m = DMatrix::zeros(ks, ks);
        for u in 0..ks {
            for v in u..ks {
                let val = self.feature_product_expectation(&[
                    self.regressor_factor(u),
                    self.regressor_factor(v),
                ])?;
                m[(u, v)] = val;
                m[(v, u)] = val;
            }
        }
        Ok(m)
    }

    /// `E{s · y_out}`.
    pub fn feature_output_corr(&self) -> Result<DVector<f64>> {
        let ks = self.feature_len();
        let mut v = DVector::zeros(ks);
        for u in 0..ks {
            v[u] = self
                .feature_product_expectation(&[self.regressor_factor(u), FeatureFactor::Output])?;
        }
        Ok(v)
    }

    /// `E{t_m t_mᵀ}` for input node `m`, symmetric by construction.
    pub fn deriv_feature_covariance(&self, m: usize) -> Result<DMatrix<f64>> {
        if m >= self.n_inputs() {
            return Err(Error::InvalidParam(format!("input node {m} out of range")));
        }
        let ks = self.feature_len();
        let mut out = DMatrix::zeros(ks, ks);
        for u in 0..ks {
            for v in u..ks {
                let val = self.feature_product_expectation(&[
                    self.deriv_factor(u, m),
                    self.deriv_factor(v, m),
                ])?;
                out[(u, v)] = val;
                out[(v, u)] = val;
            }
        }
        Ok(out)
    }
}

/// Fourth-order tables: the full fourth moment of the regressor in
/// vec-pairing layout, the third moment against the output, and the second
/// moment against the squared output.
#[derive(Debug, Clone, PartialEq)]
pub struct FourthOrderTables {
    /// `fourth[(u + v·ks, l + m·ks)] = E{s_u s_v s_l s_m}`; by full index
    /// symmetry the pairing convention is immaterial.
    pub fourth: DMatrix<f64>,
    /// flat `[u + v·ks + p·ks²] = E{s_u s_v s_p y_out}`
    pub third_out: Vec<f64>,
    /// `E{s_u s_v y_out²}`
    pub second_out_sq: DMatrix<f64>,
}

fn unique_perms<const K: usize>(idx: [usize; K]) -> Vec<[usize; K]> {
    // All distinct permutations of a small multiset.
    fn heap<const K: usize>(arr: &mut [usize; K], k: usize, out: &mut Vec<[usize; K]>) {
        if k == 1 {
            if !out.contains(arr) {
                out.push(*arr);
            }
            return;
        }
        for i in 0..k {
            heap(arr, k - 1, out);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }
    let mut arr = idx;
    let mut out = Vec::new();
    heap(&mut arr, K, &mut out);
    out
}

impl MomentContext {
    /// Computes every fourth-order table, exploiting full permutation
    /// symmetry: only sorted index tuples are evaluated, then mirrored.
    pub fn fourth_order_tables(&self) -> Result<FourthOrderTables> {
        let ks = self.feature_len();

        let mut quads = Vec::new();
        for a in 0..ks {
            for b in a..ks {
                for c in b..ks {
                    for d in c..ks {
                        quads.push([a, b, c, d]);
                    }
                }
            }
        }
        let vals: Result<Vec<f64>> = quads
            .par_iter()
            .map(|&[a, b, c, d]| {
                self.feature_product_expectation(&[
                    self.regressor_factor(a),
                    self.regressor_factor(b),
                    self.regressor_factor(c),
                    self.regressor_factor(d),
                ])
            })
            .collect();
        let vals = vals?;
        let mut fourth = DMatrix::zeros(ks * ks, ks * ks);
        for (q, &val) in quads.iter().zip(&vals) {
            for [u, v, l, m] in unique_perms(*q) {
                fourth[(u + v * ks, l + m * ks)] = val;
            }
        }

        let mut triples = Vec::new();
        for a in 0..ks {
            for b in a..ks {
                for c in b..ks {
                    triples.push([a, b, c]);
                }
            }
        }
        let tvals: Result<Vec<f64>> = triples
            .par_iter()
            .map(|&[a, b, c]| {
                self.feature_product_expectation(&[
                    self.regressor_factor(a),
                    self.regressor_factor(b),
                    self.regressor_factor(c),
                    FeatureFactor::Output,
                ])
            })
            .collect();
        let tvals = tvals?;
        let mut third_out = vec![0.0; ks * ks * ks];
        for (t, &val) in triples.iter().zip(&tvals) {
            for [u, v, p] in unique_perms(*t) {
                third_out[u + v * ks + p * ks * ks] = val;
            }
        }

        let mut second_out_sq = DMatrix::zeros(ks, ks);
        for u in 0..ks {
            for v in u..ks {
                let val = self.feature_product_expectation(&[
                    self.regressor_factor(u),
                    self.regressor_factor(v),
                    FeatureFactor::Output,
                    FeatureFactor::Output,
                ])?;
                second_out_sq[(u, v)] = val;
                second_out_sq[(v, u)] = val;
            }
        }
        Ok(FourthOrderTables {
            fourth,
            third_out,
            second_out_sq,
        })
    }
}

/// The complete set of exact statistics one configuration needs, computed
/// once and shared by the batch solver, the performance models and the
/// simulation harness.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentSet {
    pub feature_cov: DMatrix<f64>,
    pub feature_out_corr: DVector<f64>,
    pub deriv_covs: Vec<DMatrix<f64>>,
    pub fourth: DMatrix<f64>,
    pub third_out: Vec<f64>,
    pub second_out_sq: DMatrix<f64>,
    pub n_inputs: usize,
    pub dict_len: usize,
}

impl MomentSet {
    pub fn compute(ctx: &MomentContext) -> Result<Self> {
        let feature_cov = ctx.feature_covariance()?;
        let feature_out_corr = ctx.feature_output_corr()?;
        let deriv_covs: Result<Vec<_>> = (0..ctx.n_inputs())
            .map(|m| ctx.deriv_feature_covariance(m))
            .collect();
        let tables = ctx.fourth_order_tables()?;
        Ok(Self {
            feature_cov,
            feature_out_corr,
            deriv_covs: deriv_covs?,
            fourth: tables.fourth,
            third_out: tables.third_out,
            second_out_sq: tables.second_out_sq,
            n_inputs: ctx.n_inputs(),
            dict_len: ctx.dict().len(),
        })
    }

    pub fn k_s(&self) -> usize {
        (self.n_inputs + 1) * self.dict_len
    }

    pub fn third_out_at(&self, u: usize, v: usize, p: usize) -> f64 {
        let ks = self.k_s();
        self.third_out[u + v * ks + p * ks * ks]
    }

    pub fn fourth_at(&self, u: usize, v: usize, l: usize, m: usize) -> f64 {
        let ks = self.k_s();
        self.fourth[(u + v * ks, l + m * ks)]
    }

    /// Cache key for a `(input covariance, bandwidth, dictionary)` triple:
    /// hex digest over their canonical text forms.
    pub fn cache_key(input_cov: &DMatrix<f64>, bandwidth: f64, dict: &Dictionary) -> String {
        let mut h = Sha256::new();
        for v in input_cov.iter() {
            h.update(format!("{v:.16e},").as_bytes());
        }
        h.update(format!("|{bandwidth:.16e}|").as_bytes());
        h.update(dict.to_text().as_bytes());
        let digest = h.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    const MAGIC: &'static [u8; 8] = b"KTMOMS1\n";

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(Self::MAGIC);
        buf.extend_from_slice(&(self.n_inputs as u64).to_le_bytes());
        buf.extend_from_slice(&(self.dict_len as u64).to_le_bytes());
        let mut push = |xs: &[f64]| {
            for x in xs {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        };
        push(self.feature_cov.as_slice());
        push(self.feature_out_corr.as_slice());
        for m in &self.deriv_covs {
            push(m.as_slice());
        }
        push(self.fourth.as_slice());
        push(&self.third_out);
        push(self.second_out_sq.as_slice());
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 24 || &bytes[..8] != Self::MAGIC {
            return Err(Error::Parse("bad moment cache header".into()));
        }
        let n_inputs = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let dict_len = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        let ks = (n_inputs + 1) * dict_len;
        let mut pos = 24usize;
        let mut take = |count: usize| -> Result<Vec<f64>> {
            let need = count * 8;
            if bytes.len() < pos + need {
                return Err(Error::Parse("truncated moment cache".into()));
            }
            let out = bytes[pos..pos + need]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += need;
            Ok(out)
        };
        let feature_cov = DMatrix::from_column_slice(ks, ks, &take(ks * ks)?);
        let feature_out_corr = DVector::from_column_slice(&take(ks)?);
        let mut deriv_covs = Vec::with_capacity(n_inputs);
        for _ in 0..n_inputs {
            deriv_covs.push(DMatrix::from_column_slice(ks, ks, &take(ks * ks)?));
        }
        let fourth = DMatrix::from_column_slice(ks * ks, ks * ks, &take(ks * ks * ks * ks)?);
        let third_out = take(ks * ks * ks)?;
        let second_out_sq = DMatrix::from_column_slice(ks, ks, &take(ks * ks)?);
        if pos != bytes.len() {
            return Err(Error::Parse("trailing bytes in moment cache".into()));
        }
        Ok(Self {
            feature_cov,
            feature_out_corr,
            deriv_covs,
            fourth,
            third_out,
            second_out_sq,
            n_inputs,
            dict_len,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Dictionary, Features, GaussianKernel};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
    use rand_distr::StandardNormal;

    fn small_context(seed: u64, n: usize, d: usize, sigma: f64) -> MomentContext {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = n + 1;
        let m = DMatrix::from_fn(dim, dim, |_, _| 0.6 * rng.sample::<f64, _>(StandardNormal));
        let cov = &m * m.transpose() + 0.3 * DMatrix::identity(dim, dim);
        let dict = Dictionary::uniform_grid(n, d, -1.0, 1.0, seed ^ 0x5eed).unwrap();
        MomentContext::new(cov, sigma, dict).unwrap()
    }

    #[test]
    fn product_moment_known_values() {
        let mean0 = DVector::zeros(2);
        let eye = DMatrix::identity(2, 2);
        // standard normal kurtosis
        assert_eq!(
            gaussian_product_moment(&mean0, &eye, &[0, 0, 0, 0]).unwrap(),
            3.0
        );
        // independence
        assert_eq!(
            gaussian_product_moment(&mean0, &eye, &[0, 0, 1, 1]).unwrap(),
            1.0
        );
        // second-moment identity with mean
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 2.0]);
        assert_eq!(gaussian_product_moment(&mean, &cov, &[0, 1]).unwrap(), 2.5);
        assert!(gaussian_product_moment(&mean, &cov, &[0, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn product_moment_matches_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let cov: DMatrix<f64> = &m * m.transpose() + 0.5 * DMatrix::identity(3, 3);
        let mean = DVector::from_vec(vec![0.4, -0.7, 1.1]);
        let chol = nalgebra::Cholesky::new(cov.clone()).unwrap();
        let idx = [0usize, 1, 2, 1];
        let n = 2_000_000;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n {
            let z = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = &mean + chol.l() * z;
            let p = x[idx[0]] * x[idx[1]] * x[idx[2]] * x[idx[3]];
            acc += p;
            acc2 += p * p;
        }
        let est = acc / n as f64;
        let se = ((acc2 / n as f64 - est * est) / n as f64).sqrt();
        let exact = gaussian_product_moment(&mean, &cov, &idx).unwrap();
        assert!(
            (exact - est).abs() <= 4.0 * se,
            "exact {exact}, mc {est}, se {se}"
        );
    }

    #[test]
    fn scalar_analytic_oracle() {
        // One input dimension, covariance diag(r, 1), single atom at x, no
        // factors: value must be sqrt(σ²/(σ²+r)) exp(-x²/(2(σ²+r))).
        for (sigma, r, x) in [(1.0, 0.5, 0.7), (1.3, 0.7, 0.9), (0.6, 2.0, -1.4)] {
            let cov = DMatrix::from_row_slice(2, 2, &[r, 0.0, 0.0, 1.0]);
            let dict = Dictionary::from_elements(vec![DVector::from_vec(vec![x])]).unwrap();
            let ctx = MomentContext::new(cov, sigma, dict).unwrap();
            let got = ctx.kernel_weighted_moment(&[0], &[]).unwrap();
            let s2 = sigma * sigma;
            let expected = (s2 / (s2 + r)).sqrt() * (-x * x / (2.0 * (s2 + r))).exp();
            assert_relative_eq!(got, expected, max_relative = 1e-10);
        }
    }

    #[test]
    fn flat_kernel_limit() {
        // As σ → ∞ every kernel weight tends to 1 and the weighted moment
        // with no polynomial factors tends to 1.
        let ctx = small_context(3, 2, 2, 1e6);
        let v = ctx.kernel_weighted_moment(&[0, 1], &[]).unwrap();
        assert_relative_eq!(v, 1.0, max_relative = 1e-9);
        // with two output factors it tends to E{y_out²}
        let out = ctx.n_inputs();
        let v2 = ctx
            .kernel_weighted_moment(
                &[0, 1],
                &[
                    PolyFactor {
                        y_index: out,
                        offset: None,
                    },
                    PolyFactor {
                        y_index: out,
                        offset: None,
                    },
                ],
            )
            .unwrap();
        assert_relative_eq!(v2, ctx.input_cov()[(out, out)], max_relative = 1e-3);
    }

    #[test]
    fn zero_weight_cross_check() {
        // With no kernel weights the primitive must agree with the plain
        // Gaussian product moment.
        let ctx = small_context(5, 2, 2, 0.9);
        let mean = DVector::zeros(3);
        let direct = gaussian_product_moment(&mean, ctx.input_cov(), &[0, 1, 2, 2]).unwrap();
        let v = ctx
            .kernel_weighted_moment(
                &[],
                &[
                    PolyFactor {
                        y_index: 0,
                        offset: None,
                    },
                    PolyFactor {
                        y_index: 1,
                        offset: None,
                    },
                    PolyFactor {
                        y_index: 2,
                        offset: None,
                    },
                    PolyFactor {
                        y_index: 2,
                        offset: None,
                    },
                ],
            )
            .unwrap();
        assert_relative_eq!(v, direct, max_relative = 1e-12);
    }

    #[test]
    fn selector_form_consistent_across_regimes() {
        let ctx = small_context(7, 2, 3, 0.8);
        let n = ctx.n_inputs();
        // two-weight case through both interfaces
        let direct = ctx
            .kernel_weighted_moment(
                &[0, 2],
                &[
                    PolyFactor {
                        y_index: 0,
                        offset: Some((0, 0)),
                    },
                    PolyFactor {
                        y_index: 1,
                        offset: Some((1, 1)),
                    },
                ],
            )
            .unwrap();
        let params = SelectorParams {
            pair: true,
            triple: false,
            quad: false,
            atoms: [Some(0), Some(2), None, None],
            factors: [
                Some(SelectorFactor {
                    signal_index: 0,
                    stacked_atom_coord: Some(0),
                }),
                Some(SelectorFactor {
                    signal_index: 1,
                    stacked_atom_coord: Some(n + 1),
                }),
                None,
                None,
            ],
        };
        assert_eq!(ctx.selector_moment(&params).unwrap(), direct);
        // flag nesting enforced
        let bad = SelectorParams {
            quad: true,
            ..Default::default()
        };
        assert!(ctx.selector_moment(&bad).is_err());
        // inactive-slot reference rejected
        let bad2 = SelectorParams {
            pair: false,
            atoms: [Some(0), None, None, None],
            factors: [
                Some(SelectorFactor {
                    signal_index: 0,
                    stacked_atom_coord: Some(3 * n),
                }),
                None,
                None,
                None,
            ],
            ..Default::default()
        };
        assert!(ctx.selector_moment(&bad2).is_err());
    }

    /// Monte-Carlo oracle: sampled feature vectors from the same Gaussian.
    struct McOracle {
        s: Vec<DVector<f64>>,
        t: Vec<Vec<DVector<f64>>>,
        y_out: Vec<f64>,
    }

    fn mc_features(ctx: &MomentContext, count: usize, seed: u64) -> McOracle {
        let kernel = GaussianKernel::new(ctx.bandwidth()).unwrap();
        let chol = nalgebra::Cholesky::new(ctx.input_cov().clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = ctx.n_inputs();
        let mut s = Vec::with_capacity(count);
        let mut t = Vec::with_capacity(count);
        let mut y_out = Vec::with_capacity(count);
        for _ in 0..count {
            let z = DVector::from_fn(n + 1, |_, _| rng.sample::<f64, _>(StandardNormal));
            let ytil = chol.l() * z;
            let y = ytil.rows(0, n).into_owned();
            let f = Features::compute(&kernel, ctx.dict(), &y).unwrap();
            s.push(f.regressor());
            t.push((0..n).map(|m| f.deriv_feature(m)).collect());
            y_out.push(ytil[n]);
        }
        McOracle { s, t, y_out }
    }

    fn mc_mean_se(samples: impl Iterator<Item = f64>, n: usize) -> (f64, f64) {
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for v in samples {
            acc += v;
            acc2 += v * v;
        }
        let mean = acc / n as f64;
        let var = (acc2 / n as f64 - mean * mean).max(0.0);
        (mean, (var / n as f64).sqrt())
    }

    #[test]
    fn second_order_tables_match_monte_carlo() {
        let ctx = small_context(11, 2, 2, 0.8);
        let ks = ctx.feature_len();
        let n = 300_000;
        let mc = mc_features(&ctx, n, 99);

        let r = ctx.feature_covariance().unwrap();
        assert_relative_eq!(r.clone(), r.transpose(), max_relative = 1e-14);
        for u in 0..ks {
            for v in u..ks {
                let (est, se) = mc_mean_se(mc.s.iter().map(|s| s[u] * s[v]), n);
                assert!(
                    (r[(u, v)] - est).abs() <= 5.0 * se + 1e-12,
                    "feature cov ({u},{v}): exact {}, mc {est}, se {se}",
                    r[(u, v)]
                );
            }
        }

        let c = ctx.feature_output_corr().unwrap();
        for u in 0..ks {
            let (est, se) = mc_mean_se(mc.s.iter().zip(&mc.y_out).map(|(s, y)| s[u] * y), n);
            assert!(
                (c[u] - est).abs() <= 5.0 * se + 1e-12,
                "output corr {u}: exact {}, mc {est}",
                c[u]
            );
        }

        for m in 0..ctx.n_inputs() {
            let rt = ctx.deriv_feature_covariance(m).unwrap();
            assert_relative_eq!(rt.clone(), rt.transpose(), max_relative = 1e-14);
            for u in 0..ks {
                for v in u..ks {
                    let (est, se) = mc_mean_se(mc.t.iter().map(|tm| tm[m][u] * tm[m][v]), n);
                    assert!(
                        (rt[(u, v)] - est).abs() <= 5.0 * se + 1e-12,
                        "deriv cov m={m} ({u},{v}): exact {}, mc {est}, se {se}",
                        rt[(u, v)]
                    );
                }
            }
        }
    }

    #[test]
    fn fourth_order_tables_match_monte_carlo() {
        let ctx = small_context(13, 2, 2, 0.9);
        let ks = ctx.feature_len();
        let n = 300_000;
        let mc = mc_features(&ctx, n, 7);
        let tables = ctx.fourth_order_tables().unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..25 {
            let (u, v, l, m) = (
                rng.random_range(0..ks),
                rng.random_range(0..ks),
                rng.random_range(0..ks),
                rng.random_range(0..ks),
            );
            let exact = tables.fourth[(u + v * ks, l + m * ks)];
            let (est, se) = mc_mean_se(mc.s.iter().map(|s| s[u] * s[v] * s[l] * s[m]), n);
            assert!(
                (exact - est).abs() <= 5.0 * se + 1e-12,
                "fourth ({u},{v},{l},{m}): exact {exact}, mc {est}, se {se}"
            );
        }
        for _ in 0..15 {
            let (u, v, p) = (
                rng.random_range(0..ks),
                rng.random_range(0..ks),
                rng.random_range(0..ks),
            );
            let exact = tables.third_out[u + v * ks + p * ks * ks];
            let (est, se) = mc_mean_se(
                mc.s.iter()
                    .zip(&mc.y_out)
                    .map(|(s, y)| s[u] * s[v] * s[p] * y),
                n,
            );
            assert!(
                (exact - est).abs() <= 5.0 * se + 1e-12,
                "third ({u},{v},{p}): exact {exact}, mc {est}, se {se}"
            );
        }
        for _ in 0..10 {
            let (u, v) = (rng.random_range(0..ks), rng.random_range(0..ks));
            let exact = tables.second_out_sq[(u, v)];
            let (est, se) = mc_mean_se(
                mc.s.iter().zip(&mc.y_out).map(|(s, y)| s[u] * s[v] * y * y),
                n,
            );
            assert!(
                (exact - est).abs() <= 5.0 * se + 1e-12,
                "second-out ({u},{v}): exact {exact}, mc {est}, se {se}"
            );
        }
    }

    #[test]
    fn fourth_table_symmetries() {
        let ctx = small_context(19, 2, 2, 1.1);
        let ks = ctx.feature_len();
        let t = ctx.fourth_order_tables().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let (u, v, l, m) = (
                rng.random_range(0..ks),
                rng.random_range(0..ks),
                rng.random_range(0..ks),
                rng.random_range(0..ks),
            );
            let a = t.fourth[(u + v * ks, l + m * ks)];
            assert_eq!(a, t.fourth[(v + u * ks, l + m * ks)]);
            assert_eq!(a, t.fourth[(u + v * ks, m + l * ks)]);
            assert_eq!(a, t.fourth[(l + m * ks, u + v * ks)]);
            let b = t.third_out[u + v * ks + l * ks * ks];
            assert_eq!(b, t.third_out[v + u * ks + l * ks * ks]);
            assert_eq!(b, t.third_out[l + v * ks + u * ks * ks]);
        }
    }

    #[test]
    fn psd_and_symmetry_of_assembled_matrices() {
        for seed in [2, 23, 31] {
            let ctx = small_context(seed, 2, 3, 0.7 + 0.2 * seed as f64 % 1.0);
            let r = ctx.feature_covariance().unwrap();
            let eig = nalgebra::SymmetricEigen::new(r.clone());
            let max = eig.eigenvalues.max();
            assert!(
                eig.eigenvalues.min() >= -1e-8 * max,
                "feature covariance not PSD"
            );
            for m in 0..ctx.n_inputs() {
                let rt = ctx.deriv_feature_covariance(m).unwrap();
                let eig = nalgebra::SymmetricEigen::new(rt.clone());
                assert!(eig.eigenvalues.min() >= -1e-8 * eig.eigenvalues.max());
            }
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn prop_feature_covariance_symmetric_psd(seed in 0u64..5000, sigma in 0.5f64..1.6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 1 + (seed % 2) as usize;
            let d = 1 + (seed / 7 % 2) as usize;
            let dim = n + 1;
            let m = DMatrix::from_fn(dim, dim, |_, _| {
                0.6 * rng.sample::<f64, _>(StandardNormal)
            });
            let cov: DMatrix<f64> = &m * m.transpose() + 0.3 * DMatrix::identity(dim, dim);
            let dict = Dictionary::uniform_grid(n, d, -1.0, 1.0, seed ^ 0x77).unwrap();
            let ctx = MomentContext::new(cov, sigma, dict).unwrap();
            let r = ctx.feature_covariance().unwrap();
            proptest::prop_assert_eq!(r.clone(), r.transpose());
            let eig = nalgebra::SymmetricEigen::new(r);
            proptest::prop_assert!(eig.eigenvalues.min() >= -1e-8 * eig.eigenvalues.max());
            // selector form consistent with the list form on a pair case
            let direct = ctx
                .kernel_weighted_moment(&[0, 0], &[PolyFactor { y_index: 0, offset: Some((0, 0)) }])
                .unwrap();
            let sel = ctx
                .selector_moment(&SelectorParams {
                    pair: true,
                    atoms: [Some(0), Some(0), None, None],
                    factors: [
                        Some(SelectorFactor { signal_index: 0, stacked_atom_coord: Some(0) }),
                        None,
                        None,
                        None,
                    ],
                    ..Default::default()
                })
                .unwrap();
            proptest::prop_assert_eq!(direct, sel);
        }
    }

    #[test]
    fn moment_set_save_load_roundtrip() {
        let ctx = small_context(29, 1, 2, 1.0);
        let set = MomentSet::compute(&ctx).unwrap();
        let dir = std::env::temp_dir().join("ktopo-moments-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("set.bin");
        set.save(&path).unwrap();
        let loaded = MomentSet::load(&path).unwrap();
        assert_eq!(set, loaded);
        let key1 = MomentSet::cache_key(ctx.input_cov(), ctx.bandwidth(), ctx.dict());
        let key2 = MomentSet::cache_key(ctx.input_cov(), ctx.bandwidth(), ctx.dict());
        assert_eq!(key1, key2);
        let other = small_context(31, 1, 2, 1.0);
        assert_ne!(
            key1,
            MomentSet::cache_key(other.input_cov(), other.bandwidth(), other.dict())
        );
    }
}
