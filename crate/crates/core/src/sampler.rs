//! Monte Carlo paths of the Gaussian field and ensemble estimates of the
//! coherence `⟨e^{iφ}⟩`.
//!
//! Random numbers come from ChaCha8 streams keyed by `(seed, batch)`, so a
//! run is bit-identical for any thread count.

use std::io::Write;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::gridops::{
    assemble_precision, padded_factor, BoundaryCondition, CorrelationMatrix, KernelMatrix, PaddedFactor,
    PaddingInfo, Precision,
};
use crate::io::fmt_f64;
use crate::kernel::KernelSpec;
use crate::modulation::ControlModulation;
use crate::types::FieldPath;

/// Paths drawn per RNG stream.
pub const BATCH: usize = 1024;
/// Default ensemble size.
pub const DEFAULT_SAMPLES: usize = 100_000;
/// Most paths written by [`write_paths_csv`].
pub const MAX_DUMPED_PATHS: usize = 100;

const JITTER_SCALE: f64 = 1e-12;
const INDEFINITE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorMethod {
    Cholesky,
    /// Cholesky after adding [`CovarianceFactor::jitter`] to the diagonal.
    JitteredCholesky,
    /// Eigen-factor keeping the non-negligible modes.
    Eigen,
    /// Banded Cholesky of the precision on a padded grid.
    Precision,
}

#[derive(Debug)]
enum Inner {
    /// `B = L z` on the rows in `support`, zero elsewhere.
    Dense { support: Vec<usize>, l: DMatrix<f64> },
    /// `B = crop(R⁻ᵀ z)` with `R Rᵀ` the padded precision.
    Banded(Box<PaddedFactor>),
}

/// A square root of the window covariance.
#[derive(Debug)]
pub struct CovarianceFactor {
    grid: TimeGrid,
    dim: usize,
    method: FactorMethod,
    jitter: f64,
    dropped_modes: usize,
    inner: Inner,
}

impl CovarianceFactor {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn method(&self) -> FactorMethod {
        self.method
    }

    /// Diagonal shift added before factorising; zero unless the method is
    /// [`FactorMethod::JitteredCholesky`].
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// Eigenvalues discarded by the eigen-factor.
    pub fn dropped_modes(&self) -> usize {
        self.dropped_modes
    }

    /// Number of standard normals consumed per path.
    pub fn rank(&self) -> usize {
        match &self.inner {
            Inner::Dense { l, .. } => l.ncols(),
            Inner::Banded(p) => p.chol.dim(),
        }
    }

    /// `L Lᵀ` on the window, for checking the factor.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let size = self.grid.len() * self.dim;
        let mut out = DMatrix::zeros(size, size);
        match &self.inner {
            Inner::Dense { support, l } => {
                let llt = l * l.transpose();
                for (a, &i) in support.iter().enumerate() {
                    for (b, &j) in support.iter().enumerate() {
                        out[(i, j)] = llt[(a, b)];
                    }
                }
            }
            Inner::Banded(p) => {
                let lo = p.offset * self.dim;
                for c in 0..size {
                    let col = p.column(lo + c);
                    for r in 0..size {
                        out[(r, c)] = col[lo + r];
                    }
                }
            }
        }
        out
    }

    /// Maps standard normals `z` (length [`rank`](Self::rank)) to a window path.
    fn apply(&self, z: &[f64], out: &mut [f64]) {
        match &self.inner {
            Inner::Dense { support, l } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for (a, &i) in support.iter().enumerate() {
                    let row = l.row(a);
                    out[i] = row.iter().zip(z).map(|(x, y)| x * y).sum();
                }
            }
            Inner::Banded(p) => {
                let mut x = z.to_vec();
                p.chol.solve_upper(&mut x);
                let lo = p.offset * self.dim;
                for (r, v) in out.iter_mut().enumerate() {
                    let q = lo + r;
                    *v = if q < p.pinned { 0.0 } else { x[q - p.pinned] };
                }
            }
        }
    }

    /// `v` with `φ = vᵀz` for the phase of a window vector `h` (`φ = hᵀB`).
    fn phase_vector(&self, h: &[f64]) -> Vec<f64> {
        match &self.inner {
            Inner::Dense { support, l } => {
                let mut v = vec![0.0; l.ncols()];
                for (a, &i) in support.iter().enumerate() {
                    if h[i] != 0.0 {
                        for (k, vk) in v.iter_mut().enumerate() {
                            *vk += l[(a, k)] * h[i];
                        }
                    }
                }
                v
            }
            Inner::Banded(p) => {
                let lo = p.offset * self.dim;
                let mut v = vec![0.0; p.chol.dim()];
                for (r, hr) in h.iter().enumerate() {
                    let q = lo + r;
                    if q >= p.pinned {
                        v[q - p.pinned] = *hr;
                    }
                }
                p.chol.solve_lower(&mut v);
                v
            }
        }
    }
}

/// Factorises `G` as `L Lᵀ`.
///
/// Rows that are identically zero (pinned field values) are left out. Plain
/// Cholesky is tried first. If it fails, eigenvalues below `−1e−8·λ_max`
/// are reported as [`Error::Indefinite`]; a matrix with numerically zero
/// modes gets an eigen-factor without them, and otherwise Cholesky is
/// retried with a diagonal jitter of `1e−12·trace/dim`.
pub fn factorize_covariance(g: &CorrelationMatrix) -> Result<CovarianceFactor> {
    let full = g.matrix();
    let size = full.nrows();
    let support: Vec<usize> = (0..size)
        .filter(|&i| full.row(i).iter().any(|v| *v != 0.0))
        .collect();
    let s = support.len();
    let mut sub = DMatrix::from_fn(s, s, |a, b| full[(support[a], support[b])]);
    sub = (&sub + sub.transpose()) * 0.5;
    let make = |method, jitter, dropped_modes, l| CovarianceFactor {
        grid: *g.grid(),
        dim: g.dim(),
        method,
        jitter,
        dropped_modes,
        inner: Inner::Dense {
            support: support.clone(),
            l,
        },
    };
    if s == 0 {
        return Ok(make(FactorMethod::Cholesky, 0.0, 0, DMatrix::zeros(0, 0)));
    }
    if let Some(ch) = sub.clone().cholesky() {
        return Ok(make(FactorMethod::Cholesky, 0.0, 0, ch.l()));
    }
    let eig = sub.clone().symmetric_eigen();
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min < -INDEFINITE_TOL * max.abs().max(f64::MIN_POSITIVE) {
        return Err(Error::Indefinite {
            min_eigenvalue: min,
            max_eigenvalue: max,
        });
    }
    let rank_deficient = eig.eigenvalues.iter().any(|&v| v <= JITTER_SCALE * max);
    if !rank_deficient {
        let jitter = JITTER_SCALE * sub.trace() / s as f64;
        let mut shifted = sub;
        for i in 0..s {
            shifted[(i, i)] += jitter;
        }
        if let Some(ch) = shifted.cholesky() {
            return Ok(make(FactorMethod::JitteredCholesky, jitter, 0, ch.l()));
        }
    }
    let keep: Vec<usize> = (0..s)
        .filter(|&k| eig.eigenvalues[k] > JITTER_SCALE * max)
        .collect();
    let l = DMatrix::from_fn(s, keep.len(), |i, k| {
        eig.eigenvectors[(i, keep[k])] * eig.eigenvalues[keep[k]].sqrt()
    });
    Ok(make(FactorMethod::Eigen, 0.0, s - keep.len(), l))
}

/// Factorises the precision instead of `G`, so the cost per path is linear
/// in the grid size. Falls back to [`factorize_covariance`] for dense
/// kernels.
pub fn factorize_precision(k: &KernelMatrix, bc: BoundaryCondition) -> Result<CovarianceFactor> {
    let spec: &KernelSpec = k.spec();
    let grid = *k.grid();
    if matches!(spec, KernelSpec::Dense(_)) {
        let g = crate::gridops::kernel_to_correlation(k, bc)?;
        return factorize_covariance(&g);
    }
    let factor = match bc {
        BoundaryCondition::Natural => {
            let Precision::Banded(band) = assemble_precision(spec, &grid)? else {
                unreachable!("local kernels assemble to banded form")
            };
            let chol = band
                .cholesky()
                .map_err(|_| Error::SingularKernel("banded Cholesky failed".into()))?;
            PaddedFactor {
                offset: 0,
                pinned: 0,
                chol,
                info: PaddingInfo {
                    before: 0.0,
                    after: 0.0,
                    edge_correlation: 0.0,
                    converged: true,
                },
            }
        }
        BoundaryCondition::DecayAtInfinity => padded_factor(spec, &grid, false)?,
        BoundaryCondition::DirichletAtQuench => padded_factor(spec, &grid, true)?,
    };
    Ok(CovarianceFactor {
        grid,
        dim: k.dim(),
        method: FactorMethod::Precision,
        jitter: 0.0,
        dropped_modes: 0,
        inner: Inner::Banded(Box::new(factor)),
    })
}

fn batch_rng(seed: u64, batch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(batch as u64);
    rng
}

fn batches(m: usize) -> impl IndexedParallelIterator<Item = (usize, usize)> {
    let count = m.div_ceil(BATCH);
    (0..count).into_par_iter().map(move |b| (b, BATCH.min(m - b * BATCH)))
}

/// Draws `m` independent paths `B = L z`. Deterministic given `seed`.
pub fn sample_paths(factor: &CovarianceFactor, m: usize, seed: u64) -> Vec<FieldPath> {
    let size = factor.grid.len() * factor.dim;
    let rank = factor.rank();
    let per_batch: Vec<Vec<FieldPath>> = batches(m)
        .map(|(b, count)| {
            let mut rng = batch_rng(seed, b);
            let mut z = vec![0.0; rank];
            (0..count)
                .map(|_| {
                    z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                    let mut values = vec![0.0; size];
                    factor.apply(&z, &mut values);
                    FieldPath {
                        grid: factor.grid,
                        dim: factor.dim,
                        values,
                    }
                })
                .collect()
        })
        .collect();
    per_batch.into_iter().flatten().collect()
}

/// Ensemble average of `e^{iφ}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleEstimate {
    pub mean_real: f64,
    pub mean_imag: f64,
    /// Sample deviation of `cos φ` over `√M`.
    pub std_error: f64,
    /// Sample deviation of `sin φ` over `√M`.
    pub std_error_imag: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub seed: u64,
}

impl SampleEstimate {
    pub fn modulus(&self) -> f64 {
        self.mean_real.hypot(self.mean_imag)
    }

    /// Whether `exp(−χ)` lies within `k` standard errors of the real part.
    pub fn agrees_with(&self, chi: f64, k: f64) -> bool {
        (self.mean_real - (-chi).exp()).abs() <= k * self.std_error
    }
}

/// Running sums of `cos φ`, `sin φ` and their squares.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: usize,
    c: f64,
    s: f64,
    cc: f64,
    ss: f64,
}

impl Moments {
    fn push(&mut self, phi: f64) {
        let (s, c) = phi.sin_cos();
        self.n += 1;
        self.c += c;
        self.s += s;
        self.cc += c * c;
        self.ss += s * s;
    }

    fn merge(mut self, o: &Moments) -> Self {
        self.n += o.n;
        self.c += o.c;
        self.s += o.s;
        self.cc += o.cc;
        self.ss += o.ss;
        self
    }

    fn estimate(&self, seed: u64) -> SampleEstimate {
        let n = self.n.max(1) as f64;
        let mc = self.c / n;
        let ms = self.s / n;
        let spread = |sq: f64, mean: f64| {
            if self.n < 2 {
                0.0
            } else {
                ((sq / n - mean * mean).max(0.0) * n / (n - 1.0)).sqrt() / n.sqrt()
            }
        };
        SampleEstimate {
            mean_real: mc,
            mean_imag: ms,
            std_error: spread(self.cc, mc),
            std_error_imag: spread(self.ss, ms),
            m: self.n,
            seed,
        }
    }
}

/// `φ_m = Σ_i w_i f_iᵀ B_m(t_i)` averaged as `e^{iφ}` over the paths.
pub fn estimate_coherence(paths: &[FieldPath], f: &ControlModulation, seed: u64) -> Result<SampleEstimate> {
    let h = f.weighted();
    let mut acc = Moments::default();
    for p in paths {
        p.grid.require_same(f.grid())?;
        if p.dim != f.dim() {
            return Err(Error::Domain(format!(
                "path has {} channels, control {}",
                p.dim,
                f.dim()
            )));
        }
        acc.push(p.values.iter().zip(&h).map(|(b, w)| b * w).sum());
    }
    Ok(acc.estimate(seed))
}

/// Estimates the coherence of every control from the same `m` paths without
/// storing them. Each path is `B = L z`, so `φ = (Lᵀh)ᵀ z`; the normals are
/// drawn exactly as in [`sample_paths`], and the result matches
/// [`estimate_coherence`] on those paths up to round-off.
pub fn monte_carlo_coherence(
    factor: &CovarianceFactor,
    controls: &[ControlModulation],
    m: usize,
    seed: u64,
) -> Result<Vec<SampleEstimate>> {
    for f in controls {
        factor.grid.require_same(f.grid())?;
        if f.dim() != factor.dim {
            return Err(Error::Domain(format!(
                "control has {} channels, factor {}",
                f.dim(),
                factor.dim
            )));
        }
    }
    let vs: Vec<Vec<f64>> = controls.iter().map(|f| factor.phase_vector(&f.weighted())).collect();
    let rank = factor.rank();
    let partial: Vec<Vec<Moments>> = batches(m)
        .map(|(b, count)| {
            let mut rng = batch_rng(seed, b);
            let mut z = vec![0.0; rank];
            let mut acc = vec![Moments::default(); vs.len()];
            for _ in 0..count {
                z.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
                for (a, v) in acc.iter_mut().zip(&vs) {
                    a.push(v.iter().zip(&z).map(|(x, y)| x * y).sum());
                }
            }
            acc
        })
        .collect();
    let mut total = vec![Moments::default(); vs.len()];
    for batch in &partial {
        for (t, p) in total.iter_mut().zip(batch) {
            *t = t.merge(p);
        }
    }
    Ok(total.iter().map(|t| t.estimate(seed)).collect())
}

/// Scaling of path increments with the lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegularityReport {
    pub order: usize,
    /// Lags in units of the grid spacing.
    pub lags: Vec<usize>,
    /// `Var[B(t+h)−B(t)]` per lag, averaged over channels.
    pub increment_variance: Vec<f64>,
    /// Log-log slope of the increment variance against the lag.
    pub slope: f64,
    /// `min(N, 2)`: 0 for white noise, 1 for continuous paths without a
    /// derivative, 2 once the first derivative is continuous.
    pub expected_slope: f64,
    /// For `N ≥ 2`, the same slope for increments of the grid-level finite
    /// difference `(B_{i+1}−B_i)/Δt`.
    pub derivative_slope: Option<f64>,
}

fn log_lags(max_lag: usize) -> Vec<usize> {
    let mut lags: Vec<usize> = (0..=24)
        .map(|k| (max_lag as f64).powf(k as f64 / 24.0).round() as usize)
        .filter(|&l| l >= 1)
        .collect();
    lags.dedup();
    lags
}

fn increment_variance(series: &[Vec<f64>], lag: usize) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for s in series {
        for i in 0..s.len().saturating_sub(lag) {
            let d = s[i + lag] - s[i];
            sum += d * d;
            count += 1;
        }
    }
    sum / count.max(1) as f64
}

fn log_slope(x: &[usize], y: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, v)| **v > 0.0)
        .map(|(a, b)| ((*a as f64).ln(), b.ln()))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Sub-samples the paths at lags `1..=max_lag` (log-spaced, so `max_lag =
/// 1000` sweeps three decades) and regresses the increment variance.
/// Increments are taken from the zero-mean field; `max_lag` is capped at
/// half the path length.
pub fn sample_path_regularity(paths: &[FieldPath], order: usize, max_lag: usize) -> Result<RegularityReport> {
    let first = paths
        .first()
        .ok_or_else(|| Error::Domain("no paths to analyse".into()))?;
    let m = first.grid.len();
    let max_lag = max_lag.min(m / 2);
    if max_lag < 2 {
        return Err(Error::Domain("paths too short for a lag sweep".into()));
    }
    let series: Vec<Vec<f64>> = paths
        .iter()
        .flat_map(|p| (0..p.dim).map(move |c| p.channel(c)))
        .collect();
    let lags = log_lags(max_lag);
    let var: Vec<f64> = lags.par_iter().map(|&l| increment_variance(&series, l)).collect();
    let slope = log_slope(&lags, &var);
    let derivative_slope = (order >= 2).then(|| {
        let dt = first.grid.dt();
        let deriv: Vec<Vec<f64>> = series
            .iter()
            .map(|s| s.windows(2).map(|w| (w[1] - w[0]) / dt).collect())
            .collect();
        let dv: Vec<f64> = lags.par_iter().map(|&l| increment_variance(&deriv, l)).collect();
        log_slope(&lags, &dv)
    });
    Ok(RegularityReport {
        order,
        lags,
        increment_variance: var,
        slope,
        expected_slope: order.min(2) as f64,
        derivative_slope,
    })
}

/// Writes up to [`MAX_DUMPED_PATHS`] paths as `path,t,B1..Bn` rows.
pub fn write_paths_csv<W: Write>(paths: &[FieldPath], out: &mut W) -> std::io::Result<()> {
    let Some(first) = paths.first() else {
        return writeln!(out, "path,t");
    };
    write!(out, "path,t")?;
    for c in 0..first.dim {
        write!(out, ",B{}", c + 1)?;
    }
    writeln!(out)?;
    for (k, p) in paths.iter().take(MAX_DUMPED_PATHS).enumerate() {
        for i in 0..p.grid.len() {
            write!(out, "{k},{}", fmt_f64(p.grid.time(i)))?;
            for v in p.at(i) {
                write!(out, ",{}", fmt_f64(*v))?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dephasing::attenuation_time_basis;
    use crate::gridops::{discretize_kernel, kernel_to_correlation};
    use crate::linalg::frobenius;
    use crate::modulation::{control_cw, control_free};
    use proptest::prelude::*;

    fn ou_correlation(bc: BoundaryCondition) -> CorrelationMatrix {
        let grid = TimeGrid::new(0.0, 4.0, 81).unwrap();
        let k = discretize_kernel(&KernelSpec::ornstein_uhlenbeck(1.0, 1.0), &grid).unwrap();
        kernel_to_correlation(&k, bc).unwrap()
    }

    #[test]
    fn diagonal_factor_is_square_root() {
        let grid = TimeGrid::new(0.0, 1.0, 5).unwrap();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 1.0, 9.0, 0.25, 16.0]));
        let g = CorrelationMatrix::from_matrix(grid, 1, d, BoundaryCondition::Natural).unwrap();
        let f = factorize_covariance(&g).unwrap();
        assert_eq!(f.method(), FactorMethod::Cholesky);
        let Inner::Dense { l, .. } = &f.inner else { panic!() };
        for (i, v) in [2.0, 1.0, 3.0, 0.5, 4.0].iter().enumerate() {
            assert!((l[(i, i)] - v).abs() < 1e-15);
        }
    }

    #[test]
    fn ou_factor_reproduces_covariance() {
        let g = ou_correlation(BoundaryCondition::DecayAtInfinity);
        let f = factorize_covariance(&g).unwrap();
        assert!(frobenius(&(f.reconstruct() - g.matrix())) < 1e-8);
    }

    #[test]
    fn quenched_factor_skips_pinned_row() {
        let g = ou_correlation(BoundaryCondition::DirichletAtQuench);
        let f = factorize_covariance(&g).unwrap();
        assert_eq!(f.rank(), g.matrix().nrows() - 1);
        assert!(frobenius(&(f.reconstruct() - g.matrix())) < 1e-8);
    }

    #[test]
    fn rank_deficient_uses_eigen_factor() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let v = nalgebra::DVector::from_vec(vec![1.0, 2.0, -1.0, 0.5]);
        let g = CorrelationMatrix::from_matrix(grid, 1, &v * v.transpose(), BoundaryCondition::Natural).unwrap();
        let f = factorize_covariance(&g).unwrap();
        assert_eq!(f.method(), FactorMethod::Eigen);
        assert_eq!(f.rank(), 1);
        assert_eq!(f.dropped_modes(), 3);
        assert!(frobenius(&(f.reconstruct() - g.matrix())) < 1e-8);
    }

    #[test]
    fn indefinite_covariance_rejected() {
        let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
        let mut m = DMatrix::identity(4, 4);
        m[(0, 1)] = 2.0;
        m[(1, 0)] = 2.0;
        let g = CorrelationMatrix::from_matrix(grid, 1, m, BoundaryCondition::Natural).unwrap();
        assert!(matches!(factorize_covariance(&g), Err(Error::Indefinite { .. })));
    }

    #[test]
    fn precision_factor_matches_covariance() {
        for bc in [
            BoundaryCondition::DecayAtInfinity,
            BoundaryCondition::DirichletAtQuench,
            BoundaryCondition::Natural,
        ] {
            let grid = TimeGrid::new(0.0, 4.0, 81).unwrap();
            let k = discretize_kernel(&KernelSpec::quartic(1.0, 1.0), &grid).unwrap();
            let g = kernel_to_correlation(&k, bc).unwrap();
            let f = factorize_precision(&k, bc).unwrap();
            let err = frobenius(&(f.reconstruct() - g.matrix()));
            assert!(err < 1e-8, "{bc:?}: {err}");
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let g = ou_correlation(BoundaryCondition::DecayAtInfinity);
        let f = factorize_covariance(&g).unwrap();
        let a = sample_paths(&f, 3000, 7);
        let b = sample_paths(&f, 3000, 7);
        assert_eq!(a, b);
        assert_ne!(a, sample_paths(&f, 3000, 8));
    }

    #[test]
    fn quenched_paths_start_at_zero() {
        let g = ou_correlation(BoundaryCondition::DirichletAtQuench);
        let f = factorize_covariance(&g).unwrap();
        assert!(sample_paths(&f, 200, 1).iter().all(|p| p.values[0] == 0.0));
    }

    #[test]
    fn sample_moments_match_covariance() {
        let g = ou_correlation(BoundaryCondition::DecayAtInfinity);
        let f = factorize_covariance(&g).unwrap();
        let m = 20_000;
        let paths = sample_paths(&f, m, 3);
        let gmax = crate::linalg::max_abs(g.matrix());
        for (i, j) in [(0, 0), (10, 12), (40, 60), (80, 80)] {
            let mean = paths.iter().map(|p| p.values[i]).sum::<f64>() / m as f64;
            let var = g.matrix()[(i, i)];
            assert!(mean.abs() < 4.0 * (var / m as f64).sqrt());
            let cov = paths.iter().map(|p| p.values[i] * p.values[j]).sum::<f64>() / m as f64;
            assert!((cov - g.matrix()[(i, j)]).abs() < 5.0 * (2.0 / m as f64).sqrt() * gmax);
        }
    }

    #[test]
    fn zero_control_gives_unit_estimate() {
        let g = ou_correlation(BoundaryCondition::DecayAtInfinity);
        let f = factorize_covariance(&g).unwrap();
        let paths = sample_paths(&f, 100, 1);
        let c = control_free(g.grid(), 0.0, 0.0, 4.0).unwrap();
        let e = estimate_coherence(&paths, &c, 1).unwrap();
        assert_eq!(e.mean_real, 1.0);
        assert_eq!(e.std_error, 0.0);
    }

    #[test]
    fn streaming_matches_stored_paths() {
        let g = ou_correlation(BoundaryCondition::DirichletAtQuench);
        let f = factorize_covariance(&g).unwrap();
        let c = control_cw(g.grid(), 1.3, 2.0, 0.5, 3.0).unwrap();
        let stored = estimate_coherence(&sample_paths(&f, 2500, 11), &c, 11).unwrap();
        let streamed = monte_carlo_coherence(&f, std::slice::from_ref(&c), 2500, 11).unwrap()[0];
        assert!((stored.mean_real - streamed.mean_real).abs() < 1e-12);
        assert!((stored.std_error - streamed.std_error).abs() < 1e-12);
    }

    #[test]
    fn quenched_cw_matches_analytic_attenuation() {
        let g = ou_correlation(BoundaryCondition::DirichletAtQuench);
        let f = factorize_covariance(&g).unwrap();
        let c = control_cw(g.grid(), 1.0, 1.0, 0.0, 4.0).unwrap();
        let chi = attenuation_time_basis(&g, &c).unwrap().chi;
        let e = monte_carlo_coherence(&f, std::slice::from_ref(&c), 20_000, 5).unwrap()[0];
        assert!(e.agrees_with(chi, 4.0), "{e:?} vs {}", (-chi).exp());
        assert!(e.mean_imag.abs() <= 4.0 * e.std_error_imag);
    }

    #[test]
    fn std_error_halves_when_samples_quadruple() {
        let g = ou_correlation(BoundaryCondition::DecayAtInfinity);
        let f = factorize_covariance(&g).unwrap();
        let c = control_free(g.grid(), 1.0, 0.0, 2.0).unwrap();
        let a = monte_carlo_coherence(&f, std::slice::from_ref(&c), 10_000, 2).unwrap()[0];
        let b = monte_carlo_coherence(&f, std::slice::from_ref(&c), 40_000, 2).unwrap()[0];
        let ratio = a.std_error / b.std_error;
        assert!((ratio - 2.0).abs() < 0.6, "{ratio}");
    }

    #[test]
    fn white_noise_increments_do_not_scale() {
        let grid = TimeGrid::new(0.0, 1.0, 1001).unwrap();
        let k = discretize_kernel(&KernelSpec::white(1.0), &grid).unwrap();
        let f = factorize_precision(&k, BoundaryCondition::Natural).unwrap();
        let r = sample_path_regularity(&sample_paths(&f, 50, 1), 0, 400).unwrap();
        assert!(r.slope.abs() < 0.05, "{}", r.slope);
    }

    #[test]
    fn path_dump_is_capped() {
        let g = ou_correlation(BoundaryCondition::DecayAtInfinity);
        let f = factorize_covariance(&g).unwrap();
        let paths = sample_paths(&f, 150, 1);
        let mut buf = Vec::new();
        write_paths_csv(&paths, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + MAX_DUMPED_PATHS * 81);
        assert!(text.starts_with("path,t,B1\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn estimate_is_bounded(seed in 0u64..1000, g in 0.1f64..3.0) {
            let corr = ou_correlation(BoundaryCondition::DecayAtInfinity);
            let f = factorize_covariance(&corr).unwrap();
            let c = control_free(corr.grid(), g, 0.0, 4.0).unwrap();
            let e = monte_carlo_coherence(&f, std::slice::from_ref(&c), 2000, seed).unwrap()[0];
            prop_assert!(e.modulus() <= 1.0 + 3.0 * e.std_error);
        }
    }
}
