//! Simulated noise spectroscopy: unit-norm probe controls, synthetic
//! coherence measurements, and reconstruction of the spectrum either per
//! eigenmode or as a fitted local-in-time kernel.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytic::{is_markovian, MarkovVerdict};
use crate::dephasing::attenuation_time_basis;
use crate::eigenmodes::{filter_coefficients, EigenmodeDecomposition};
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::gridops::CorrelationMatrix;
use crate::io::fmt_f64;
use crate::kernel::KernelSpec;
use crate::modulation::{control_cw, control_custom, ControlModulation};

/// Measured coherences are clipped to `[COHERENCE_FLOOR, 1]`.
pub const COHERENCE_FLOOR: f64 = 1e-6;
/// Two-sided 95% normal quantile used for confidence intervals.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbeLabel {
    /// Probe equal to eigenmode `index`.
    Mode { index: usize, omega: f64 },
    /// Tone at angular frequency `omega`.
    Frequency { omega: f64 },
    Custom { name: String },
}

impl ProbeLabel {
    pub fn omega(&self) -> Option<f64> {
        match self {
            ProbeLabel::Mode { omega, .. } | ProbeLabel::Frequency { omega } => Some(*omega),
            ProbeLabel::Custom { .. } => None,
        }
    }

    pub fn text(&self) -> String {
        match self {
            ProbeLabel::Mode { index, .. } => format!("mode_{index}"),
            ProbeLabel::Frequency { omega } => format!("omega_{omega}"),
            ProbeLabel::Custom { name } => name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub label: ProbeLabel,
    pub control: ControlModulation,
}

/// Probe controls, each with unit weighted norm `Σ w_i |f_i|² = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    probes: Vec<Probe>,
}

impl FilterBank {
    /// Normalises every control to unit weighted norm.
    pub fn new(probes: Vec<(ProbeLabel, ControlModulation)>) -> Result<Self> {
        let mut out = Vec::with_capacity(probes.len());
        let mut grid: Option<TimeGrid> = None;
        for (label, control) in probes {
            if let Some(g) = &grid {
                g.require_same(control.grid())?;
            }
            grid = Some(*control.grid());
            let norm = control.weighted_norm_sq().sqrt();
            if !(norm > 0.0) {
                return Err(Error::Domain(format!("probe {} has zero norm", label.text())));
            }
            out.push(Probe {
                label,
                control: control.scaled(1.0 / norm),
            });
        }
        Ok(Self { probes: out })
    }

    pub fn probes(&self) -> &[Probe] {
        &self.probes
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }

    pub fn controls(&self) -> Vec<ControlModulation> {
        self.probes.iter().map(|p| p.control.clone()).collect()
    }
}

/// Probes equal to the selected eigenmodes.
pub fn design_filter_bank_eigen(dec: &EigenmodeDecomposition, indices: &[usize]) -> Result<FilterBank> {
    let probes = indices
        .iter()
        .map(|&j| {
            let control = dec.mode_control(j, 1.0)?;
            let omega = dec.modes[j].dominant_frequency;
            Ok((ProbeLabel::Mode { index: j, omega }, control))
        })
        .collect::<Result<Vec<_>>>()?;
    FilterBank::new(probes)
}

/// Unit-norm continuous-wave tones on `[t0, t0 + T]` with unit coupling.
pub fn design_filter_bank_cw(grid: &TimeGrid, omegas: &[f64], t0: f64, duration: f64) -> Result<FilterBank> {
    let probes = omegas
        .iter()
        .map(|&w| Ok((ProbeLabel::Frequency { omega: w }, control_cw(grid, 1.0, w, t0, duration)?)))
        .collect::<Result<Vec<_>>>()?;
    FilterBank::new(probes)
}

/// Unit-norm tones under a half-sine envelope `sin(π(t − t0)/T)`. The
/// envelope vanishes at both ends, so the probe's filter falls off as `ω⁻⁴`
/// instead of `ω⁻²` and the per-tone estimate `2χ/a²` leaks far less weight
/// from neighbouring frequencies than a rectangular tone of the same length.
pub fn design_filter_bank_tapered(grid: &TimeGrid, omegas: &[f64], t0: f64, duration: f64) -> Result<FilterBank> {
    let t1 = t0 + duration;
    if !(duration > 0.0) || !grid.contains(t0) || !grid.contains(t1) {
        return Err(Error::Domain(format!("window [{t0}, {t1}] not inside the grid")));
    }
    let probes = omegas
        .iter()
        .map(|&w| {
            if !w.is_finite() {
                return Err(Error::Domain("tone frequency must be finite".into()));
            }
            let values = grid
                .times()
                .iter()
                .map(|&t| {
                    if t < t0 || t > t1 {
                        0.0
                    } else {
                        (std::f64::consts::PI * (t - t0) / duration).sin() * (w * (t - t0)).cos()
                    }
                })
                .collect();
            Ok((ProbeLabel::Frequency { omega: w }, control_custom(grid, values)?))
        })
        .collect::<Result<Vec<_>>>()?;
    FilterBank::new(probes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub label: ProbeLabel,
    /// Scale applied to the unit-norm probe, so `χ = amplitude²·½(f|𝔾|f)`.
    pub amplitude: f64,
    /// Mean coherence over the repetitions, in `(0, 1]`.
    pub coherence: f64,
    /// Noise of a single repetition.
    pub sigma: f64,
    pub reps: usize,
}

impl Measurement {
    pub fn chi(&self) -> f64 {
        -self.coherence.ln()
    }

    /// Standard error of [`chi`](Self::chi), propagated to first order.
    pub fn chi_std_error(&self) -> f64 {
        self.sigma / (self.reps.max(1) as f64).sqrt() / self.coherence
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub measurements: Vec<Measurement>,
}

impl MeasurementSet {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("measurement sets serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let set: Self = serde_json::from_str(s).map_err(|e| Error::Domain(format!("measurement set: {e}")))?;
        for m in &set.measurements {
            if !(m.coherence > 0.0 && m.coherence <= 1.0) {
                return Err(Error::Domain(format!("coherence {} outside (0, 1]", m.coherence)));
            }
        }
        Ok(set)
    }
}

/// How the probe amplitude is chosen for each measurement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AmplitudePolicy {
    Fixed { amplitude: f64 },
    /// Starts at unit amplitude and rescales after each noisy pilot run so the
    /// attenuation approaches `target_chi`; only the final run is reported.
    Adaptive { target_chi: f64, rounds: usize },
}

impl Default for AmplitudePolicy {
    fn default() -> Self {
        AmplitudePolicy::Adaptive {
            target_chi: 1.0,
            rounds: 3,
        }
    }
}

/// Measurement noise: `reps` runs each with additive Gaussian noise `sigma`
/// on the coherence, averaged and clipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub reps: usize,
    pub seed: u64,
}

impl NoiseModel {
    pub fn noiseless() -> Self {
        Self {
            sigma: 0.0,
            reps: 1,
            seed: 0,
        }
    }
}

fn noisy_coherence(exact: f64, noise: &NoiseModel, rng: &mut ChaCha8Rng) -> f64 {
    if noise.sigma == 0.0 {
        return exact.clamp(COHERENCE_FLOOR, 1.0);
    }
    let reps = noise.reps.max(1);
    let mean = (0..reps)
        .map(|_| exact + noise.sigma * rng.sample::<f64, _>(StandardNormal))
        .sum::<f64>()
        / reps as f64;
    mean.clamp(COHERENCE_FLOOR, 1.0)
}

/// Forward-simulates every probe against `g`. Probes run in parallel, each on
/// its own RNG stream.
pub fn simulate_measurements(
    bank: &FilterBank,
    g: &CorrelationMatrix,
    noise: &NoiseModel,
    policy: AmplitudePolicy,
) -> Result<MeasurementSet> {
    let measurements = bank
        .probes
        .par_iter()
        .enumerate()
        .map(|(p, probe)| {
            let unit_chi = attenuation_time_basis(g, &probe.control)?.chi;
            let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
            rng.set_stream(p as u64);
            let mut amplitude = 1.0;
            if let AmplitudePolicy::Fixed { amplitude: a } = policy {
                amplitude = a;
            }
            if let AmplitudePolicy::Adaptive { target_chi, rounds } = policy {
                for _ in 0..rounds {
                    let c = noisy_coherence((-amplitude * amplitude * unit_chi).exp(), noise, &mut rng);
                    let chi = -c.ln();
                    // A saturated or vanishing pilot gives no scale; step by 10.
                    let factor = if c >= 1.0 || chi <= 0.0 {
                        10.0
                    } else if c <= COHERENCE_FLOOR {
                        0.1
                    } else {
                        (target_chi / chi).sqrt().clamp(0.1, 10.0)
                    };
                    amplitude *= factor;
                }
            }
            let coherence = noisy_coherence((-amplitude * amplitude * unit_chi).exp(), noise, &mut rng);
            Ok(Measurement {
                label: probe.label.clone(),
                amplitude,
                coherence,
                sigma: noise.sigma,
                reps: noise.reps.max(1),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MeasurementSet { measurements })
}

/// Fitted local-in-time kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParametricFit {
    /// Selected order `N̂`.
    pub order: usize,
    /// `D_0..D_N̂` of `1/S(ω) = Σ_k D_k ω^{2k}`.
    pub coefficients: Vec<f64>,
    /// Weighted residual norm of the selected fit.
    pub residual_norm: f64,
    /// Information criterion per candidate order; `None` where the fit had a
    /// non-positive leading coefficient.
    pub criterion: Vec<Option<f64>>,
    pub verdict: MarkovVerdict,
}

impl ParametricFit {
    pub fn kernel(&self) -> KernelSpec {
        KernelSpec::stationary_scalar(&self.coefficients)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub labels: Vec<ProbeLabel>,
    pub s: Vec<f64>,
    pub ci_low: Vec<f64>,
    pub ci_high: Vec<f64>,
    pub fit: Option<ParametricFit>,
}

impl SpectrumEstimate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("estimates serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Domain(format!("spectrum estimate: {e}")))
    }

    /// CSV with columns `label,S_est,CI_low,CI_high`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "label,S_est,CI_low,CI_high")?;
        for (k, l) in self.labels.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{}",
                l.text(),
                fmt_f64(self.s[k]),
                fmt_f64(self.ci_low[k]),
                fmt_f64(self.ci_high[k])
            )?;
        }
        Ok(())
    }
}

/// Lawson–Hanson non-negative least squares: `min ‖A x − b‖, x ≥ 0`.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.abs().max().max(f64::MIN_POSITIVE) * b.abs().max().max(1.0) * n.max(1) as f64;
    let solve_passive = |passive: &[bool]| -> DVector<f64> {
        let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
        let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
        let z = sub.svd(true, true).solve(b, 1e-14).expect("SVD with vectors");
        let mut full = DVector::zeros(n);
        for (c, &j) in idx.iter().enumerate() {
            full[j] = z[c];
        }
        full
    };
    for _ in 0..3 * n.max(1) {
        let w = a.transpose() * (b - a * &x);
        let candidate = (0..n)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&i, &j| w[i].total_cmp(&w[j]));
        let Some(j) = candidate else { break };
        passive[j] = true;
        loop {
            let z = solve_passive(&passive);
            if (0..n).filter(|&k| passive[k]).all(|k| z[k] > 0.0) {
                x = z;
                break;
            }
            let alpha = (0..n)
                .filter(|&k| passive[k] && z[k] <= 0.0)
                .map(|k| x[k] / (x[k] - z[k]))
                .fold(f64::INFINITY, f64::min);
            x = &x + (&z - &x) * alpha;
            for k in 0..n {
                if passive[k] && x[k] <= tol {
                    passive[k] = false;
                    x[k] = 0.0;
                }
            }
        }
    }
    x
}

/// Solves `χ_p = ½ a_p² Σ_j S_j F_{pj}²` for `S ≥ 0` over the modes the
/// probes reach. Modes with no filter weight from any probe are omitted from
/// the estimate; reached modes that the data cannot separate are reported as
/// [`Error::Underdetermined`].
pub fn reconstruct_nonparametric(
    bank: &FilterBank,
    meas: &MeasurementSet,
    dec: &EigenmodeDecomposition,
) -> Result<SpectrumEstimate> {
    if bank.len() != meas.measurements.len() {
        return Err(Error::Domain(format!(
            "{} probes but {} measurements",
            bank.len(),
            meas.measurements.len()
        )));
    }
    let f = filter_coefficients(dec, &bank.controls())?;
    let p_count = bank.len();
    let weight_max = f.iter().flatten().map(|v| v * v).fold(0.0, f64::max);
    let reached: Vec<usize> = (0..dec.len())
        .filter(|&j| f.iter().any(|row| row[j] * row[j] > 1e-10 * weight_max))
        .collect();
    let sigma: Vec<f64> = meas
        .measurements
        .iter()
        .map(|m| m.chi_std_error())
        .collect();
    let noisy = sigma.iter().all(|s| *s > 0.0);
    let row_weight = |p: usize| if noisy { 1.0 / sigma[p] } else { 1.0 };
    let a = DMatrix::from_fn(p_count, reached.len(), |p, c| {
        let amp = meas.measurements[p].amplitude;
        0.5 * amp * amp * f[p][reached[c]].powi(2) * row_weight(p)
    });
    let b = DVector::from_fn(p_count, |p, _| meas.measurements[p].chi() * row_weight(p));

    let svd = a.clone().svd(false, true);
    let smax = svd.singular_values.max();
    let v_t = svd.v_t.as_ref().expect("requested V");
    let mut unconstrained = Vec::new();
    for (k, sv) in svd.singular_values.iter().enumerate() {
        if *sv <= 1e-10 * smax {
            for c in 0..reached.len() {
                if v_t[(k, c)].abs() > 0.1 && !unconstrained.contains(&reached[c]) {
                    unconstrained.push(reached[c]);
                }
            }
        }
    }
    // Fewer probes than modes leaves null directions the SVD does not list.
    if reached.len() > p_count && unconstrained.is_empty() {
        unconstrained = reached.clone();
    }
    if !unconstrained.is_empty() {
        unconstrained.sort_unstable();
        return Err(Error::Underdetermined(unconstrained));
    }

    let s = nnls(&a, &b);
    let floor = 1e-12 * s.max().max(f64::MIN_POSITIVE);
    let ata = a.transpose() * &a;
    let cov = ata.try_inverse().unwrap_or_else(|| DMatrix::zeros(reached.len(), reached.len()));
    let mut est = SpectrumEstimate {
        labels: Vec::new(),
        s: Vec::new(),
        ci_low: Vec::new(),
        ci_high: Vec::new(),
        fit: None,
    };
    for (c, &j) in reached.iter().enumerate() {
        let v = s[c].max(floor);
        let half = if noisy { Z95 * cov[(c, c)].max(0.0).sqrt() } else { 0.0 };
        est.labels.push(ProbeLabel::Mode {
            index: j,
            omega: dec.modes[j].dominant_frequency,
        });
        est.s.push(v);
        est.ci_low.push((v - half).max(0.0));
        est.ci_high.push(v + half);
    }
    Ok(est)
}

/// Per-tone spectrum `Ŝ(ω_p) = 2χ_p / a_p²` for unit-norm tones on a window
/// long compared with the correlation time.
pub fn reconstruct_frequency(meas: &MeasurementSet) -> Result<SpectrumEstimate> {
    let mut est = SpectrumEstimate {
        labels: Vec::new(),
        s: Vec::new(),
        ci_low: Vec::new(),
        ci_high: Vec::new(),
        fit: None,
    };
    for m in &meas.measurements {
        if m.label.omega().is_none() {
            return Err(Error::Domain(format!("probe {} has no frequency", m.label.text())));
        }
        let scale = 2.0 / (m.amplitude * m.amplitude);
        let s = (scale * m.chi()).max(f64::MIN_POSITIVE);
        let half = Z95 * scale * m.chi_std_error();
        est.labels.push(m.label.clone());
        est.s.push(s);
        est.ci_low.push((s - half).max(0.0));
        est.ci_high.push(s + half);
    }
    Ok(est)
}

/// Significance, in standard errors, a noisy fit's leading coefficient needs
/// for its order to be considered.
pub const LEADING_Z: f64 = 3.0;

/// Rule used to pick the kernel order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderCriterion {
    Aic,
    #[default]
    Bic,
}

/// Fits `1/S(ω) = Σ_{k≤N} D_k ω^{2k}` by weighted linear least squares on
/// the per-tone estimates, for each `N ≤ n_max`, and selects the order by the
/// information criterion. Orders whose leading coefficient is not positive
/// are not valid spectra and are skipped; with noisy data the leading
/// coefficient must also exceed [`LEADING_Z`] standard errors.
pub fn fit_local_in_time(meas: &MeasurementSet, n_max: usize, criterion: OrderCriterion) -> Result<SpectrumEstimate> {
    let mut est = reconstruct_frequency(meas)?;
    let points: Vec<(f64, f64, f64)> = meas
        .measurements
        .iter()
        .zip(&est.s)
        .map(|(m, s)| {
            let omega = m.label.omega().expect("checked by reconstruct_frequency");
            let y = 1.0 / s;
            let sd_s = 2.0 / (m.amplitude * m.amplitude) * m.chi_std_error();
            // σ_y = σ_S / S²; unit weights for noiseless data.
            let sd = if sd_s > 0.0 { sd_s / (s * s) } else { 1.0 };
            (omega, y, sd)
        })
        .collect();
    let n = points.len();
    let scale = points.iter().map(|p| p.0.abs()).fold(0.0, f64::max).max(1.0);
    let mut best: Option<(f64, usize, Vec<f64>, f64)> = None;
    let mut table = Vec::new();
    let mut any_fit = false;
    for order in 0..=n_max {
        let k = order + 1;
        if n <= k {
            table.push(None);
            continue;
        }
        // Columns in (ω/scale)^{2k} keep the normal equations well scaled.
        let a = DMatrix::from_fn(n, k, |r, c| (points[r].0 / scale).powi(2 * c as i32) / points[r].2);
        let b = DVector::from_fn(n, |r, _| points[r].1 / points[r].2);
        let svd = a.clone().svd(true, true);
        let coef = svd.solve(&b, 1e-14).expect("SVD with vectors");
        any_fit = true;
        let rss = (&a * &coef - &b).norm_squared();
        let coefficients: Vec<f64> = (0..k).map(|c| coef[c] / scale.powi(2 * c as i32)).collect();
        let noisy = points.iter().any(|p| p.2 != 1.0);
        // With unit-variance weighted residuals, Cov(coef) = (AᵀA)⁻¹.
        let v_t = svd.v_t.as_ref().expect("SVD with vectors");
        let lead_var: f64 = (0..svd.singular_values.len())
            .filter(|&i| svd.singular_values[i] > 0.0)
            .map(|i| (v_t[(i, order)] / svd.singular_values[i]).powi(2))
            .sum();
        let threshold = if noisy { LEADING_Z * lead_var.sqrt() } else { 0.0 };
        if !(coef[order] > threshold) {
            table.push(None);
            continue;
        }
        // Weighted residuals are unit-variance under the model; for
        // noiseless data fall back to the Gaussian likelihood form.
        let fit_term = if noisy {
            rss
        } else {
            n as f64 * (rss / n as f64).max(1e-300).ln()
        };
        let penalty = match criterion {
            OrderCriterion::Aic => 2.0 * k as f64,
            OrderCriterion::Bic => k as f64 * (n as f64).ln(),
        };
        let score = fit_term + penalty;
        table.push(Some(score));
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, order, coefficients, rss.sqrt()));
        }
    }
    let Some((_, order, coefficients, residual_norm)) = best else {
        return Err(if any_fit {
            Error::ModelMismatch("every fitted order has a non-positive leading coefficient".into())
        } else {
            Error::Domain(format!("{n} points cannot constrain any order"))
        });
    };
    if coefficients[0] < 0.0 {
        return Err(Error::ModelMismatch(format!(
            "fitted D_0 = {} is negative",
            coefficients[0]
        )));
    }
    let kernel = KernelSpec::stationary_scalar(&coefficients);
    let verdict = is_markovian(&kernel);
    est.fit = Some(ParametricFit {
        order,
        coefficients,
        residual_norm,
        criterion: table,
        verdict,
    });
    Ok(est)
}
