//! Gaussian kernel, its first and second partial derivatives, dictionary
//! management, and the stacked feature vectors consumed by the estimator.
//!
//! For `κ(a, b) = exp(-‖a-b‖²/2σ²)` the derivative sections have closed
//! forms; all of them are assembled here so that every other module sees the
//! same sign convention. The second derivative is mixed: one differentiation
//! with respect to a coordinate of the stored dictionary element, one with
//! respect to the same-index coordinate of the incoming signal.

use crate::{Error, Result};
use nalgebra::DVector;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

/// Gaussian (RBF) kernel with bandwidth `σ > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianKernel {
    bandwidth: f64,
}

impl GaussianKernel {
    pub fn new(bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0) || !bandwidth.is_finite() {
            return Err(Error::InvalidParam(format!(
                "kernel bandwidth must be positive and finite, got {bandwidth}"
            )));
        }
        Ok(Self { bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch(a.len(), b.len()));
        }
        Ok(())
    }

    /// `κ(a, b) = exp(-‖a-b‖²/2σ²)`, in (0, 1].
    pub fn eval(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        Self::check_dims(a, b)?;
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        Ok((-sq / (2.0 * self.bandwidth * self.bandwidth)).exp())
    }

    /// Partial derivative of `κ(a, b)` with respect to `a[m]`:
    /// `κ(a,b)·(b[m]-a[m])/σ²`.
    pub fn grad_first(&self, a: &[f64], b: &[f64], m: usize) -> Result<f64> {
        Self::check_dims(a, b)?;
        if m >= a.len() {
            return Err(Error::InvalidParam(format!("component {m} out of range")));
        }
        let s2 = self.bandwidth * self.bandwidth;
        Ok(self.eval(a, b)? * (b[m] - a[m]) / s2)
    }

    /// Mixed second derivative `∂²κ(a,b)/∂b[m1]∂a[m2]`:
    ///
    /// * `m1 ≠ m2`: `-κ·(a[m1]-b[m1])(a[m2]-b[m2])/σ⁴`
    /// * `m1 = m2`: `-κ·((a[m1]-b[m1])²/σ⁴ - 1/σ²)`
    pub fn second_cross(&self, a: &[f64], b: &[f64], m1: usize, m2: usize) -> Result<f64> {
        Self::check_dims(a, b)?;
        if m1 >= a.len() || m2 >= a.len() {
            return Err(Error::InvalidParam(format!(
                "components ({m1},{m2}) out of range"
            )));
        }
        let s2 = self.bandwidth * self.bandwidth;
        let k = self.eval(a, b)?;
        let d1 = (a[m1] - b[m1]) / s2;
        let d2 = (a[m2] - b[m2]) / s2;
        // grouped so that the (m1, m2) swap is exact
        let mut v = -k * (d1 * d2);
        if m1 == m2 {
            v += k / s2;
        }
        Ok(v)
    }
}

/// Ordered set of stored input vectors anchoring the kernel expansion.
///
/// Either drawn a priori on a hypercube (the mode every statistical model in
/// this crate assumes, since the moments treat atoms as fixed) or grown
/// online by the coherence rule.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    elements: Vec<DVector<f64>>,
    dim: usize,
}

impl Dictionary {
    pub fn new(dim: usize) -> Self {
        Self {
            elements: Vec::new(),
            dim,
        }
    }

    pub fn from_elements(elements: Vec<DVector<f64>>) -> Result<Self> {
        let dim = elements
            .first()
            .map(|e| e.len())
            .ok_or_else(|| Error::InvalidParam("empty dictionary".into()))?;
        if elements.iter().any(|e| e.len() != dim) {
            return Err(Error::DimensionMismatch(dim, 0));
        }
        Ok(Self { elements, dim })
    }

    /// Draws `count` elements uniformly from `[lo, hi]^dim`, reproducibly.
    pub fn uniform_grid(dim: usize, count: usize, lo: f64, hi: f64, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParam("dictionary size must be >= 1".into()));
        }
        if !(lo < hi) {
            return Err(Error::InvalidParam(format!("bad bounds [{lo}, {hi}]")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let elements = (0..count)
            .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(lo..=hi)))
            .collect();
        Ok(Self { elements, dim })
    }

    /// Coherence admission: a candidate enters iff its peak kernel similarity
    /// to every stored element stays at or below `threshold`. An empty
    /// dictionary always admits. Returns whether the candidate was stored.
    pub fn admit(
        &mut self,
        candidate: &DVector<f64>,
        kernel: &GaussianKernel,
        threshold: f64,
    ) -> Result<bool> {
        if !self.elements.is_empty() && candidate.len() != self.dim {
            return Err(Error::DimensionMismatch(candidate.len(), self.dim));
        }
        let mut max_coh: f64 = 0.0;
        for e in &self.elements {
            max_coh = max_coh.max(kernel.eval(candidate.as_slice(), e.as_slice())?.abs());
        }
        if self.elements.is_empty() || max_coh <= threshold {
            if self.elements.is_empty() {
                self.dim = candidate.len();
            }
            self.elements.push(candidate.clone());
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn element(&self, q: usize) -> &DVector<f64> {
        &self.elements[q]
    }

    pub fn elements(&self) -> &[DVector<f64>] {
        &self.elements
    }

    /// One element per line, whitespace-separated coordinates, 17 significant
    /// digits. Theory and simulation runs share dictionaries through this.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.elements {
            let row: Vec<String> = e.iter().map(|x| format!("{x:.16e}")).collect();
            out.push_str(&row.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut elements = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let coords: std::result::Result<Vec<f64>, _> =
                line.split_whitespace().map(str::parse::<f64>).collect();
            let coords = coords.map_err(|e| Error::Parse(format!("dictionary: {e}")))?;
            elements.push(DVector::from_vec(coords));
        }
        Self::from_elements(elements)
    }
}

/// All feature blocks evaluated at one input vector `y`:
///
/// * `kernels[q] = κ(y, ω_q)`
/// * `dict_grads[m*d+q]` — derivative of `κ(y, ω_q)` in coordinate `m` of
///   the atom `ω_q`
/// * `input_grads[m*d+q]` — derivative in coordinate `m` of `y`; for the
///   Gaussian kernel this is entrywise `-dict_grads`
/// * `cross_hessians[m2]` — stacked mixed second derivatives, block `m1`,
///   atom `q`, differentiated in `ω_q[m1]` and `y[m2]`
///
/// The regressor is `[dict_grads; kernels]` and the per-node derivative
/// feature is `[cross_hessians[m]; input_grads block m]`.
#[derive(Debug, Clone)]
pub struct Features {
    pub kernels: DVector<f64>,
    pub dict_grads: DVector<f64>,
    pub input_grads: DVector<f64>,
    pub cross_hessians: Vec<DVector<f64>>,
}

impl Features {
    /// Evaluates every block. `y` must have the dictionary's dimension.
    pub fn compute(kernel: &GaussianKernel, dict: &Dictionary, y: &DVector<f64>) -> Result<Self> {
        if dict.is_empty() {
            return Err(Error::InvalidParam("empty dictionary".into()));
        }
        if y.len() != dict.dim() {
            return Err(Error::DimensionMismatch(y.len(), dict.dim()));
        }
        let n = dict.dim();
        let d = dict.len();
        let s2 = kernel.bandwidth() * kernel.bandwidth();

        let kernels = DVector::from_fn(d, |q, _| {
            kernel
                .eval(y.as_slice(), dict.element(q).as_slice())
                .unwrap()
        });
        let mut dict_grads = DVector::zeros(n * d);
        for m in 0..n {
            for q in 0..d {
                dict_grads[m * d + q] = kernels[q] * (y[m] - dict.element(q)[m]) / s2;
            }
        }
        let input_grads = -&dict_grads;
        let mut cross_hessians = Vec::with_capacity(n);
        for m2 in 0..n {
            let mut h = DVector::zeros(n * d);
            for m1 in 0..n {
                for q in 0..d {
                    let atom = dict.element(q);
                    let d1 = (y[m1] - atom[m1]) / s2;
                    let d2 = (y[m2] - atom[m2]) / s2;
                    let mut v = -kernels[q] * (d1 * d2);
                    if m1 == m2 {
                        v += kernels[q] / s2;
                    }
                    h[m1 * d + q] = v;
                }
            }
            cross_hessians.push(h);
        }
        Ok(Self {
            kernels,
            dict_grads,
            input_grads,
            cross_hessians,
        })
    }

    /// The regression feature vector `[dict_grads; kernels]`, length
    /// `(n+1)·d`.
    pub fn regressor(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.dict_grads.len() + self.kernels.len());
        s.rows_mut(0, self.dict_grads.len())
            .copy_from(&self.dict_grads);
        s.rows_mut(self.dict_grads.len(), self.kernels.len())
            .copy_from(&self.kernels);
        s
    }

    /// The derivative feature vector for input node `m`:
    /// `[cross_hessians[m]; input_grads block m]`, length `(n+1)·d`.
    pub fn deriv_feature(&self, m: usize) -> DVector<f64> {
        let d = self.kernels.len();
        let nd = self.dict_grads.len();
        let mut t = DVector::zeros(nd + d);
        t.rows_mut(0, nd).copy_from(&self.cross_hessians[m]);
        t.rows_mut(nd, d)
            .copy_from(&self.input_grads.rows(m * d, d));
        t
    }
}

/// Writes the regressor for `y` into `out` without computing the second
/// derivative blocks. Hot path for the simulation loop.
pub fn regressor_into(
    kernel: &GaussianKernel,
    dict: &Dictionary,
    y: &DVector<f64>,
    out: &mut DVector<f64>,
) {
    let n = dict.dim();
    let d = dict.len();
    debug_assert_eq!(out.len(), (n + 1) * d);
    let s2 = kernel.bandwidth() * kernel.bandwidth();
    for q in 0..d {
        let atom = dict.element(q);
        let mut sq = 0.0;
        for m in 0..n {
            let diff = y[m] - atom[m];
            sq += diff * diff;
        }
        let k = (-sq / (2.0 * s2)).exp();
        out[n * d + q] = k;
        for m in 0..n {
            out[m * d + q] = k * (y[m] - atom[m]) / s2;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], j: usize, h: f64) -> f64 {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    }

    #[test]
    fn eval_known_values() {
        let k = GaussianKernel::new(1.0).unwrap();
        assert_eq!(k.eval(&[0.3, -0.2], &[0.3, -0.2]).unwrap(), 1.0);
        assert_relative_eq!(
            k.eval(&[0.0], &[1.0]).unwrap(),
            (-0.5f64).exp(),
            max_relative = 1e-15
        );
        let k2 = GaussianKernel::new(2.0).unwrap();
        assert_relative_eq!(
            k2.eval(&[1.0, 1.0], &[-1.0, -1.0]).unwrap(),
            (-1.0f64).exp(),
            max_relative = 1e-15
        );
    }

    #[test]
    fn eval_symmetric_and_bounded() {
        let k = GaussianKernel::new(0.7).unwrap();
        let a = [0.4, -1.2, 0.05];
        let b = [-0.3, 0.6, 2.0];
        let v = k.eval(&a, &b).unwrap();
        assert_eq!(v, k.eval(&b, &a).unwrap());
        assert!(v > 0.0 && v <= 1.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let k = GaussianKernel::new(1.0).unwrap();
        assert!(matches!(
            k.eval(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch(1, 2))
        ));
        assert!(GaussianKernel::new(0.0).is_err());
        assert!(GaussianKernel::new(-1.0).is_err());
    }

    #[test]
    fn grad_matches_finite_difference() {
        let k = GaussianKernel::new(1.0).unwrap();
        // a = b: zero slope
        assert_eq!(k.grad_first(&[0.5, 0.5], &[0.5, 0.5], 0).unwrap(), 0.0);
        // frozen oracle value: sigma=1, a=[0], b=[1] -> exp(-0.5)*1
        assert_relative_eq!(
            k.grad_first(&[0.0], &[1.0], 0).unwrap(),
            (-0.5f64).exp(),
            max_relative = 1e-12
        );
        let a = [0.3, -0.8];
        let b = [1.1, 0.4];
        for m in 0..2 {
            let fd = central_diff(|x| k.eval(x, &b).unwrap(), &a, m, 1e-5);
            let g = k.grad_first(&a, &b, m).unwrap();
            assert_relative_eq!(g, fd, max_relative = 1e-6);
            // antisymmetry: derivative in b[m] flips the sign
            let fd_b = central_diff(|x| k.eval(&a, x).unwrap(), &b, m, 1e-5);
            assert_relative_eq!(-g, fd_b, max_relative = 1e-6);
        }
    }

    #[test]
    fn second_cross_matches_nested_finite_difference() {
        let k = GaussianKernel::new(1.0).unwrap();
        // a = b diagonal: +kappa/sigma^2 = 1
        assert_relative_eq!(
            k.second_cross(&[0.2, 0.2], &[0.2, 0.2], 1, 1).unwrap(),
            1.0,
            max_relative = 1e-15
        );
        // a = b off-diagonal: 0
        assert_eq!(k.second_cross(&[0.2, 0.2], &[0.2, 0.2], 0, 1).unwrap(), 0.0);
        // frozen: sigma=1, a=[0,0], b=[1,2] -> -exp(-2.5)*(-1)(-2)
        assert_relative_eq!(
            k.second_cross(&[0.0, 0.0], &[1.0, 2.0], 0, 1).unwrap(),
            -2.0 * (-2.5f64).exp(),
            max_relative = 1e-12
        );
        // nested central differences: d/db[m1] then d/da[m2]
        let a = [0.25, -0.6];
        let b = [-0.4, 0.9];
        let h = 1e-4;
        for m1 in 0..2 {
            for m2 in 0..2 {
                let fd = central_diff(
                    |bb| {
                        let bb = bb.to_vec();
                        central_diff(|aa| k.eval(aa, &bb).unwrap(), &a, m2, h)
                    },
                    &b,
                    m1,
                    h,
                );
                let v = k.second_cross(&a, &b, m1, m2).unwrap();
                assert_relative_eq!(v, fd, max_relative = 1e-4);
                // symmetric in (m1, m2)
                assert_eq!(v, k.second_cross(&a, &b, m2, m1).unwrap());
            }
        }
    }

    #[test]
    fn dictionary_admission_rule() {
        let k = GaussianKernel::new(1.0).unwrap();
        let mut dict = Dictionary::new(1);
        // empty dictionary always admits
        assert!(dict.admit(&DVector::from_vec(vec![0.0]), &k, 0.5).unwrap());
        // duplicate has coherence 1 > threshold
        assert!(!dict.admit(&DVector::from_vec(vec![0.0]), &k, 0.99).unwrap());
        // distant candidate: exp(-4.5) ~ 0.011 <= 0.5
        assert!(dict.admit(&DVector::from_vec(vec![3.0]), &k, 0.5).unwrap());
        assert_eq!(dict.len(), 2);
        // pairwise coherence bound holds after sequential admission
        for p in 0..dict.len() {
            for q in 0..dict.len() {
                if p != q {
                    let c = k
                        .eval(dict.element(p).as_slice(), dict.element(q).as_slice())
                        .unwrap()
                        .abs();
                    assert!(c <= 0.5);
                }
            }
        }
    }

    #[test]
    fn grid_is_deterministic_and_bounded() {
        let d1 = Dictionary::uniform_grid(4, 6, -1.0, 1.0, 42).unwrap();
        let d2 = Dictionary::uniform_grid(4, 6, -1.0, 1.0, 42).unwrap();
        assert_eq!(d1, d2);
        assert_eq!(d1.len(), 6);
        assert!(d1
            .elements()
            .iter()
            .all(|e| e.iter().all(|&x| (-1.0..=1.0).contains(&x))));
        let single = Dictionary::uniform_grid(2, 1, -1.0, 1.0, 7).unwrap();
        assert_eq!(single.len(), 1);
        assert!(Dictionary::uniform_grid(2, 0, -1.0, 1.0, 7).is_err());
    }

    #[test]
    fn dictionary_text_roundtrip() {
        let d = Dictionary::uniform_grid(3, 5, -1.0, 1.0, 11).unwrap();
        let rt = Dictionary::from_text(&d.to_text()).unwrap();
        assert_eq!(d, rt);
    }

    #[test]
    fn features_at_dictionary_element() {
        let k = GaussianKernel::new(1.0).unwrap();
        let dict = Dictionary::uniform_grid(3, 4, -1.0, 1.0, 3).unwrap();
        let y = dict.element(1).clone();
        let f = Features::compute(&k, &dict, &y).unwrap();
        assert_eq!(f.kernels[1], 1.0);
        for m in 0..3 {
            assert_eq!(f.dict_grads[m * 4 + 1], 0.0);
        }
    }

    #[test]
    fn input_grads_are_negated_dict_grads() {
        let k = GaussianKernel::new(0.8).unwrap();
        let dict = Dictionary::uniform_grid(2, 3, -1.0, 1.0, 5).unwrap();
        let y = DVector::from_vec(vec![0.3, -0.7]);
        let f = Features::compute(&k, &dict, &y).unwrap();
        assert_eq!(f.input_grads, -f.dict_grads.clone());
        for &v in f.kernels.iter() {
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn hessian_blocks_match_scalar_operation() {
        let k = GaussianKernel::new(1.3).unwrap();
        let dict = Dictionary::uniform_grid(3, 2, -1.0, 1.0, 9).unwrap();
        let y = DVector::from_vec(vec![0.2, 0.5, -0.1]);
        let f = Features::compute(&k, &dict, &y).unwrap();
        for m2 in 0..3 {
            for m1 in 0..3 {
                for q in 0..2 {
                    let direct = k
                        .second_cross(y.as_slice(), dict.element(q).as_slice(), m1, m2)
                        .unwrap();
                    assert_eq!(f.cross_hessians[m2][m1 * 2 + q], direct);
                }
            }
        }
    }

    #[test]
    fn regressor_layout_and_fast_path() {
        let k = GaussianKernel::new(1.0).unwrap();
        let dict = Dictionary::uniform_grid(2, 3, -1.0, 1.0, 1).unwrap();
        let y = DVector::from_vec(vec![0.4, -0.9]);
        let f = Features::compute(&k, &dict, &y).unwrap();
        let s = f.regressor();
        assert_eq!(s.len(), 9);
        // gradient blocks first (node-major), kernel block last
        assert_eq!(s.rows(0, 6), f.dict_grads.rows(0, 6));
        assert_eq!(s.rows(6, 3), f.kernels.rows(0, 3));
        let mut fast = DVector::zeros(9);
        regressor_into(&k, &dict, &y, &mut fast);
        assert_eq!(fast, s);
        let t0 = f.deriv_feature(0);
        assert_eq!(t0.rows(0, 6), f.cross_hessians[0].rows(0, 6));
        assert_eq!(t0.rows(6, 3), f.input_grads.rows(0, 3));
    }

    proptest::proptest! {
        #[test]
        fn prop_eval_symmetric_bounded(
            a in proptest::collection::vec(-2.0f64..2.0, 1..5),
            mut b in proptest::collection::vec(-2.0f64..2.0, 1..5),
            sigma in 0.5f64..2.5,
        ) {
            b.resize(a.len(), 0.0);
            let k = GaussianKernel::new(sigma).unwrap();
            let v = k.eval(&a, &b).unwrap();
            proptest::prop_assert_eq!(v, k.eval(&b, &a).unwrap());
            proptest::prop_assert!(v > 0.0 && v <= 1.0);
        }

        #[test]
        fn prop_grad_matches_finite_difference(
            a in proptest::collection::vec(-2.0f64..2.0, 1..5),
            mut b in proptest::collection::vec(-2.0f64..2.0, 1..5),
            sigma in 0.5f64..2.5,
        ) {
            b.resize(a.len(), 0.0);
            let k = GaussianKernel::new(sigma).unwrap();
            let h = 1e-5;
            for m in 0..a.len() {
                let g = k.grad_first(&a, &b, m).unwrap();
                let mut ap = a.clone();
                let mut am = a.clone();
                ap[m] += h;
                am[m] -= h;
                let fd = (k.eval(&ap, &b).unwrap() - k.eval(&am, &b).unwrap()) / (2.0 * h);
                proptest::prop_assert!((g - fd).abs() / g.abs().max(1.0) <= 1e-6);
            }
        }
    }

    #[test]
    fn features_are_pure() {
        let k = GaussianKernel::new(1.0).unwrap();
        let dict = Dictionary::uniform_grid(2, 4, -1.0, 1.0, 2).unwrap();
        let y = DVector::from_vec(vec![0.1, 0.2]);
        let f1 = Features::compute(&k, &dict, &y).unwrap();
        let f2 = Features::compute(&k, &dict, &y).unwrap();
        assert_eq!(f1.regressor(), f2.regressor());
        assert_eq!(f1.deriv_feature(1), f2.deriv_feature(1));
    }
}
