//! Noise models: the kernel operator 𝔻 in dense, local-in-time or stationary
//! polynomial form.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::linalg;

pub type MatrixFn = Arc<dyn Fn(f64) -> DMatrix<f64> + Send + Sync>;
pub type TwoTimeFn = Arc<dyn Fn(f64, f64) -> DMatrix<f64> + Send + Sync>;

/// Time dependence of one coefficient matrix of a local-in-time kernel.
#[derive(Clone)]
pub enum Profile {
    Constant(DMatrix<f64>),
    /// `Σ_p c_p t^p`.
    Polynomial(Vec<DMatrix<f64>>),
    Function(MatrixFn),
}

impl Profile {
    pub fn scalar(v: f64) -> Self {
        Profile::Constant(DMatrix::from_element(1, 1, v))
    }

    pub fn function(f: impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        Profile::Function(Arc::new(f))
    }

    pub fn at(&self, t: f64) -> DMatrix<f64> {
        match self {
            Profile::Constant(m) => m.clone(),
            Profile::Polynomial(cs) => {
                let mut out = DMatrix::zeros(cs[0].nrows(), cs[0].ncols());
                for c in cs.iter().rev() {
                    out = out * t + c;
                }
                out
            }
            Profile::Function(f) => f(t),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Profile::Constant(_))
    }

    fn shape_at(&self, t: f64) -> (usize, usize) {
        let m = self.at(t);
        (m.nrows(), m.ncols())
    }
}

impl fmt::Debug for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Profile::Constant(m) => write!(f, "Constant({m:?})"),
            Profile::Polynomial(c) => write!(f, "Polynomial({} terms)", c.len()),
            Profile::Function(_) => write!(f, "Function(..)"),
        }
    }
}

/// Local-in-time kernel `Σ_k (−∂)^k D_k^H(t) ∂^k` plus antisymmetric terms.
///
/// `hermitian[k]` is `D_k^H` for `k = 0..=N`; `antisymmetric[k-1]` is `D_k^A`
/// (or `None`) for `k = 1..=N`.
#[derive(Debug, Clone)]
pub struct LocalKernel {
    pub dim: usize,
    pub hermitian: Vec<Profile>,
    pub antisymmetric: Vec<Option<Profile>>,
}

/// Constant-coefficient local kernel, with spectrum
/// `S(ω) = [Σ D_k^H ω^{2k} + i Σ D_k^A ω^{2k−1}]⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialKernel {
    pub dim: usize,
    pub hermitian: Vec<DMatrix<f64>>,
    pub antisymmetric: Vec<Option<DMatrix<f64>>>,
}

/// General two-time kernel `𝔻(t, t′)`, optionally with a local part
/// `D_δ δ(t − t′)`.
#[derive(Clone)]
pub struct DenseKernel {
    pub dim: usize,
    pub kernel: TwoTimeFn,
    pub local: Option<DMatrix<f64>>,
}

impl fmt::Debug for DenseKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DenseKernel")
            .field("dim", &self.dim)
            .field("local", &self.local)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone)]
pub enum KernelSpec {
    Dense(DenseKernel),
    LocalInTime(LocalKernel),
    StationaryPolynomial(PolynomialKernel),
}

fn scalar(v: f64) -> DMatrix<f64> {
    DMatrix::from_element(1, 1, v)
}

impl KernelSpec {
    /// Scalar stationary kernel with `D_k = coefficients[k]`.
    pub fn stationary_scalar(coefficients: &[f64]) -> Self {
        KernelSpec::StationaryPolynomial(PolynomialKernel {
            dim: 1,
            hermitian: coefficients.iter().map(|&c| scalar(c)).collect(),
            antisymmetric: vec![None; coefficients.len().saturating_sub(1)],
        })
    }

    pub fn white(d0: f64) -> Self {
        Self::stationary_scalar(&[d0])
    }

    pub fn ornstein_uhlenbeck(d0: f64, d1: f64) -> Self {
        Self::stationary_scalar(&[d0, d1])
    }

    /// `D0 + D2 ω⁴` spectrum inverse (`D1 = 0`).
    pub fn quartic(d0: f64, d2: f64) -> Self {
        Self::stationary_scalar(&[d0, 0.0, d2])
    }

    /// `−D1 ∂² + D0 + α t²`.
    pub fn harmonic(d0: f64, d1: f64, alpha: f64) -> Self {
        KernelSpec::LocalInTime(LocalKernel {
            dim: 1,
            hermitian: vec![
                Profile::Polynomial(vec![scalar(d0), scalar(0.0), scalar(alpha)]),
                Profile::scalar(d1),
            ],
            antisymmetric: vec![None],
        })
    }

    pub fn dense(
        dim: usize,
        kernel: impl Fn(f64, f64) -> DMatrix<f64> + Send + Sync + 'static,
        local: Option<DMatrix<f64>>,
    ) -> Self {
        KernelSpec::Dense(DenseKernel {
            dim,
            kernel: Arc::new(kernel),
            local,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            KernelSpec::Dense(k) => k.dim,
            KernelSpec::LocalInTime(k) => k.dim,
            KernelSpec::StationaryPolynomial(k) => k.dim,
        }
    }

    /// Highest derivative order `N`; `None` for dense kernels.
    pub fn order(&self) -> Option<usize> {
        match self {
            KernelSpec::Dense(_) => None,
            KernelSpec::LocalInTime(k) => Some(k.hermitian.len().saturating_sub(1)),
            KernelSpec::StationaryPolynomial(k) => Some(k.hermitian.len().saturating_sub(1)),
        }
    }

    /// Order above which every coefficient vanishes identically. Trailing zero
    /// constant coefficients do not count.
    pub fn effective_order(&self) -> Option<usize> {
        let n = self.order()?;
        let zero = |m: &DMatrix<f64>| m.iter().all(|v| *v == 0.0);
        let mut eff = 0;
        for k in 1..=n {
            let h_nonzero = match self.hermitian_profile(k) {
                Some(Profile::Constant(m)) => !zero(&m),
                Some(_) => true,
                None => false,
            };
            let a_nonzero = match self.antisymmetric_profile(k) {
                Some(Profile::Constant(m)) => !zero(&m),
                Some(_) => true,
                None => false,
            };
            if h_nonzero || a_nonzero {
                eff = k;
            }
        }
        Some(eff)
    }

    pub fn is_stationary(&self) -> bool {
        match self {
            KernelSpec::StationaryPolynomial(_) => true,
            KernelSpec::LocalInTime(k) => {
                k.hermitian.iter().all(Profile::is_constant)
                    && k.antisymmetric.iter().flatten().all(Profile::is_constant)
            }
            KernelSpec::Dense(_) => false,
        }
    }

    fn hermitian_profile(&self, k: usize) -> Option<Profile> {
        match self {
            KernelSpec::LocalInTime(l) => l.hermitian.get(k).cloned(),
            KernelSpec::StationaryPolynomial(p) => p.hermitian.get(k).cloned().map(Profile::Constant),
            KernelSpec::Dense(_) => None,
        }
    }

    fn antisymmetric_profile(&self, k: usize) -> Option<Profile> {
        if k == 0 {
            return None;
        }
        match self {
            KernelSpec::LocalInTime(l) => l.antisymmetric.get(k - 1).cloned().flatten(),
            KernelSpec::StationaryPolynomial(p) => p
                .antisymmetric
                .get(k - 1)
                .cloned()
                .flatten()
                .map(Profile::Constant),
            KernelSpec::Dense(_) => None,
        }
    }

    /// `D_k^H(t)`, zero when absent. Panics for dense kernels.
    pub fn hermitian_at(&self, k: usize, t: f64) -> DMatrix<f64> {
        assert!(!matches!(self, KernelSpec::Dense(_)), "dense kernel has no coefficients");
        self.hermitian_profile(k)
            .map(|p| p.at(t))
            .unwrap_or_else(|| DMatrix::zeros(self.dim(), self.dim()))
    }

    /// `D_k^A(t)` when present.
    pub fn antisymmetric_at(&self, k: usize, t: f64) -> Option<DMatrix<f64>> {
        self.antisymmetric_profile(k).map(|p| p.at(t))
    }

    /// A [`LocalKernel`] view of any local or stationary spec.
    pub fn as_local(&self) -> Option<LocalKernel> {
        match self {
            KernelSpec::LocalInTime(l) => Some(l.clone()),
            KernelSpec::StationaryPolynomial(p) => Some(LocalKernel {
                dim: p.dim,
                hermitian: p.hermitian.iter().cloned().map(Profile::Constant).collect(),
                antisymmetric: p
                    .antisymmetric
                    .iter()
                    .map(|a| a.clone().map(Profile::Constant))
                    .collect(),
            }),
            KernelSpec::Dense(_) => None,
        }
    }

    /// Rough correlation time from the coefficient norms at `t`:
    /// `max_k (‖D_k‖/‖D_0‖)^{1/(2k)}`.
    pub fn correlation_time_estimate(&self, t: f64) -> Option<f64> {
        let n = self.order()?;
        let d0 = linalg::frobenius(&self.hermitian_at(0, t));
        if !(d0 > 0.0) {
            return None;
        }
        let mut tau: f64 = 0.0;
        for k in 1..=n {
            let mut dk = linalg::frobenius(&self.hermitian_at(k, t));
            if let Some(a) = self.antisymmetric_at(k, t) {
                dk = dk.max(linalg::frobenius(&a));
            }
            if dk > 0.0 {
                tau = tau.max((dk / d0).powf(1.0 / (2.0 * k as f64)));
            }
        }
        Some(tau)
    }
}

/// Outcome of [`validate_kernel_spec`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub valid: bool,
    pub symmetry_violations: Vec<String>,
    /// Smallest eigenvalue of `W^{-1/2} P W^{-1/2}`, the discretised operator
    /// in the weighted inner product.
    pub min_eigenvalue: Option<f64>,
    pub messages: Vec<String>,
}

const SYMMETRY_TOL: f64 = 1e-12;
/// Above this many unknowns the smallest eigenvalue comes from inverse
/// iteration on the banded matrix instead of a dense solve.
const DENSE_EIGEN_LIMIT: usize = 1500;

/// Checks symmetry of the coefficients and positive definiteness of the
/// discretised operator. Never fails; problems are reported.
pub fn validate_kernel_spec(spec: &KernelSpec, grid: &TimeGrid) -> ValidationReport {
    let mut report = ValidationReport {
        valid: true,
        symmetry_violations: Vec::new(),
        min_eigenvalue: None,
        messages: Vec::new(),
    };
    let n = spec.dim();
    if n == 0 {
        report.valid = false;
        report.messages.push("field dimension must be at least 1".into());
        return report;
    }
    let times = grid.times();

    match spec {
        KernelSpec::Dense(d) => {
            'outer: for (i, &t) in times.iter().enumerate() {
                for &s in &times[..=i] {
                    let a = (d.kernel)(t, s);
                    let b = (d.kernel)(s, t);
                    if a.shape() != (n, n) {
                        report.symmetry_violations.push(format!("D({t},{s}) has shape {:?}", a.shape()));
                        break 'outer;
                    }
                    let scale = linalg::max_abs(&a).max(1.0);
                    if (&a - b.transpose()).iter().any(|v| v.abs() > SYMMETRY_TOL * scale) {
                        report
                            .symmetry_violations
                            .push(format!("D({t},{s}) != D({s},{t})ᵀ"));
                        break 'outer;
                    }
                }
            }
            if let Some(l) = &d.local {
                if !linalg::is_symmetric(l, SYMMETRY_TOL) {
                    report.symmetry_violations.push("local part not symmetric".into());
                }
            }
        }
        _ => {
            let order = spec.order().unwrap_or(0);
            if spec.hermitian_profile(0).is_none() {
                report.messages.push("missing D_0 coefficient".into());
                report.valid = false;
            }
            for (k, t) in (0..=order).flat_map(|k| times.iter().map(move |&t| (k, t))) {
                if let Some(p) = spec.hermitian_profile(k) {
                    if p.shape_at(t) != (n, n) {
                        report.symmetry_violations.push(format!("D_{k}^H has wrong shape"));
                        break;
                    }
                    if !linalg::is_symmetric(&p.at(t), SYMMETRY_TOL) {
                        report
                            .symmetry_violations
                            .push(format!("D_{k}^H({t}) not symmetric"));
                        break;
                    }
                }
                if let Some(p) = spec.antisymmetric_profile(k) {
                    if n == 1 {
                        let a = p.at(t);
                        if a[(0, 0)] != 0.0 {
                            report
                                .symmetry_violations
                                .push(format!("scalar kernel cannot carry D_{k}^A"));
                            break;
                        }
                    }
                    if p.shape_at(t) != (n, n) || !linalg::is_antisymmetric(&p.at(t), SYMMETRY_TOL) {
                        report
                            .symmetry_violations
                            .push(format!("D_{k}^A({t}) not antisymmetric"));
                        break;
                    }
                }
            }
            if report.symmetry_violations.is_empty() {
                if spec.hermitian_profile(order).is_some() {
                    for &t in &times {
                        let top = spec.hermitian_at(order, t);
                        let (min, _) = linalg::eigen_range(&top);
                        if !(min > 0.0) {
                            report.messages.push(format!(
                                "leading coefficient D_{order}^H not positive definite at t={t} (min eigenvalue {min:e})"
                            ));
                            report.valid = false;
                            break;
                        }
                    }
                }
                if let KernelSpec::StationaryPolynomial(p) = spec {
                    if let Some(msg) = stationary_symbol_check(p, grid) {
                        report.messages.push(msg);
                        report.valid = false;
                    }
                }
            }
        }
    }
    if !report.symmetry_violations.is_empty() {
        report.valid = false;
        return report;
    }

    match crate::gridops::assemble_precision(spec, grid) {
        Ok(p) => {
            let min = weighted_min_eigenvalue(&p, grid, n);
            report.min_eigenvalue = Some(min);
            if !(min > 0.0) {
                report.valid = false;
                report
                    .messages
                    .push(format!("discretised operator not positive definite (min eigenvalue {min:e})"));
            }
        }
        Err(e) => {
            report.valid = false;
            report.messages.push(e.to_string());
        }
    }
    report
}

/// Checks `𝔻(ω)` on the grid's Fourier frequencies (up to Nyquist).
fn stationary_symbol_check(p: &PolynomialKernel, grid: &TimeGrid) -> Option<String> {
    let nyquist = std::f64::consts::PI / grid.dt();
    let count = 257;
    for j in 0..count {
        let w = nyquist * j as f64 / (count - 1) as f64;
        let m = real_embedding(&crate::analytic::stationary_symbol(p, w));
        let (min, _) = linalg::eigen_range(&m);
        if !(min > 0.0) {
            return Some(format!("symbol D(ω) not positive definite at ω={w}"));
        }
    }
    None
}

/// Real symmetric embedding `[[A, −B], [B, A]]` of a hermitian `A + iB`.
pub(crate) fn real_embedding(m: &DMatrix<num_complex::Complex64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(2 * n, 2 * n, |i, j| {
        let (a, b) = (i % n, j % n);
        let z = m[(a, b)];
        match (i < n, j < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

fn weighted_min_eigenvalue(p: &crate::gridops::Precision, grid: &TimeGrid, n: usize) -> f64 {
    let scale: Vec<f64> = (0..grid.len() * n)
        .map(|q| 1.0 / grid.weight(q / n).sqrt())
        .collect();
    match p {
        crate::gridops::Precision::Banded(b) if b.dim() > DENSE_EIGEN_LIMIT => {
            let mut s = linalg::BandedSym::zeros(b.dim(), b.half_bandwidth());
            for i in 0..b.dim() {
                for j in i.saturating_sub(b.half_bandwidth())..=i {
                    s.add(i, j, b.get(i, j) * scale[i] * scale[j]);
                }
            }
            linalg::banded_min_eigenvalue(&s, 2000).unwrap_or(f64::NEG_INFINITY)
        }
        other => {
            let d = other.to_dense();
            let s = DMatrix::from_fn(d.nrows(), d.ncols(), |i, j| d[(i, j)] * scale[i] * scale[j]);
            linalg::eigen_range(&s).0
        }
    }
}

pub(crate) fn require_local(spec: &KernelSpec, what: &str) -> Result<LocalKernel> {
    spec.as_local()
        .ok_or_else(|| Error::InvalidModel(format!("{what} needs a local-in-time kernel")))
}
