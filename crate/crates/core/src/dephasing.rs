//! Attenuation `χ = ½(f|𝔾|f)` in the time, eigenmode and frequency bases.

use std::io::Write;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::analytic::stationary_spectrum;
use crate::eigenmodes::{filter_coefficient, EigenmodeDecomposition};
use crate::error::{Error, Result};
use crate::gridops::CorrelationMatrix;
use crate::io::fmt_f64;
use crate::kernel::KernelSpec;
use crate::modulation::ControlModulation;
use crate::types::{Basis, DephasingResult};

fn check_control(g: &CorrelationMatrix, f: &ControlModulation) -> Result<()> {
    g.grid().require_same(f.grid())?;
    if g.dim() != f.dim() {
        return Err(Error::Domain(format!(
            "control has {} channels, correlation {}",
            f.dim(),
            g.dim()
        )));
    }
    Ok(())
}

/// `χ = ½ Σ_ij w_i f_iᵀ G_ij f_j w_j`.
pub fn attenuation_time_basis(g: &CorrelationMatrix, f: &ControlModulation) -> Result<DephasingResult> {
    check_control(g, f)?;
    DephasingResult::new(g.half_form(&f.weighted()), Basis::Time)
}

/// `χ = ½ Σ_j S_j F_j²`.
pub fn attenuation_eigenbasis(dec: &EigenmodeDecomposition, f: &ControlModulation) -> Result<DephasingResult> {
    let coeffs = filter_coefficient(dec, f)?;
    let chi = 0.5
        * dec
            .modes
            .iter()
            .zip(&coeffs)
            .map(|(m, c)| m.eigenvalue * c * c)
            .sum::<f64>();
    DephasingResult::new(chi, Basis::Eigenmode)
}

/// Frequency sampling for [`attenuation_stationary`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGrid {
    /// Number of frequencies across `[−π/Δt, π/Δt)`; rounded up to a power of
    /// two and to at least eight times the number of grid points.
    pub points: usize,
}

impl Default for FrequencyGrid {
    fn default() -> Self {
        Self { points: 0 }
    }
}

/// A control is flagged as not resolved by the grid when more than this
/// fraction of its power lies in the outer [`EDGE_BAND`] of the zone.
const NYQUIST_WARNING: f64 = 1e-6;
const EDGE_BAND: f64 = 0.2;

/// `χ = ½ ∫ F(ω)† S(ω) F(ω) dω` with `F(ω) = ∫ e^{iωt} f(t) dt / √(2π)`
/// computed by FFT of the weighted control and `S` from the closed-form
/// stationary spectrum. The integral covers one Brillouin zone of the grid.
pub fn attenuation_stationary(
    spec: &KernelSpec,
    f: &ControlModulation,
    freq: FrequencyGrid,
) -> Result<DephasingResult> {
    let KernelSpec::StationaryPolynomial(_) = spec else {
        return Err(Error::InvalidModel(
            "frequency-basis attenuation needs a stationary polynomial kernel".into(),
        ));
    };
    let n = spec.dim();
    if f.dim() != n {
        return Err(Error::Domain(format!("control has {} channels, kernel {n}", f.dim())));
    }
    let grid = f.grid();
    let m = grid.len();
    let dt = grid.dt();
    let len = freq.points.max(8 * m).next_power_of_two();
    let h = f.weighted();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(len);
    // spectra[c][k] = Σ_i h_i e^{+iω_k iΔt}; the common phase e^{iω t_start}
    // cancels in F†SF.
    let spectra: Vec<Vec<Complex64>> = (0..n)
        .map(|c| {
            let mut buf: Vec<Complex64> = (0..len)
                .map(|i| if i < m { Complex64::new(h[i * n + c], 0.0) } else { Complex64::new(0.0, 0.0) })
                .collect();
            fft.process(&mut buf);
            buf.iter().map(|z| z.conj()).collect()
        })
        .collect();
    let d_omega = 2.0 * std::f64::consts::PI / (len as f64 * dt);
    let norm = 1.0 / (2.0 * std::f64::consts::PI);
    let terms: Vec<Result<(f64, f64)>> = (0..len)
        .into_par_iter()
        .map(|k| {
            let signed = if k < len / 2 { k as f64 } else { k as f64 - len as f64 };
            let omega = signed * d_omega;
            let s = stationary_spectrum(spec, omega)?;
            let fv = DVector::from_iterator(n, (0..n).map(|c| spectra[c][k]));
            let val = (fv.adjoint() * s * &fv)[(0, 0)];
            Ok((val.re * norm * d_omega, fv.norm_squared()))
        })
        .collect();
    let mut total = 0.0;
    let mut power = 0.0;
    let mut edge_power = 0.0;
    for (k, t) in terms.into_iter().enumerate() {
        let (v, p) = t?;
        total += v;
        power += p;
        let signed = if k < len / 2 { k } else { len - k };
        if signed as f64 > (1.0 - EDGE_BAND) * (len / 2) as f64 {
            edge_power += p;
        }
    }
    let mut result = DephasingResult::new(0.5 * total, Basis::Frequency)?;
    if power > 0.0 && edge_power > NYQUIST_WARNING * power {
        result.warnings.push(format!(
            "control not band-limited on this grid: {:.3e} of its power lies near the Nyquist frequency",
            edge_power / power
        ));
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub duration: f64,
    pub chi: f64,
    pub coherence: f64,
}

/// Attenuation of `family(T)` for every duration, in the time basis.
pub fn coherence_curve<F>(g: &CorrelationMatrix, family: F, durations: &[f64]) -> Result<Vec<CurvePoint>>
where
    F: Fn(f64) -> Result<ControlModulation> + Sync,
{
    durations
        .par_iter()
        .map(|&d| {
            let r = attenuation_time_basis(g, &family(d)?)?;
            Ok(CurvePoint {
                duration: d,
                chi: r.chi,
                coherence: r.coherence,
            })
        })
        .collect()
}

/// Decay-curve CSV with columns `T,chi,coherence`.
pub fn write_curve_csv<W: Write>(out: &mut W, curve: &[CurvePoint]) -> std::io::Result<()> {
    writeln!(out, "T,chi,coherence")?;
    for p in curve {
        writeln!(out, "{},{},{}", fmt_f64(p.duration), fmt_f64(p.chi), fmt_f64(p.coherence))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eigenmodes::{decompose, DEFAULT_CUTOFF};
    use crate::grid::TimeGrid;
    use crate::gridops::{discretize_kernel, kernel_to_correlation, BoundaryCondition};
    use crate::modulation::{control_custom, control_cw, control_free, control_pulse_train};
    use proptest::prelude::*;

    fn correlation(spec: &KernelSpec, grid: &TimeGrid, bc: BoundaryCondition) -> CorrelationMatrix {
        kernel_to_correlation(&discretize_kernel(spec, grid).unwrap(), bc).unwrap()
    }

    #[test]
    fn zero_control_has_unit_coherence() {
        let grid = TimeGrid::new(0.0, 5.0, 101).unwrap();
        let g = correlation(&KernelSpec::ornstein_uhlenbeck(1.0, 1.0), &grid, BoundaryCondition::DecayAtInfinity);
        let r = attenuation_time_basis(&g, &control_free(&grid, 0.0, 0.0, 5.0).unwrap()).unwrap();
        assert_eq!(r.chi, 0.0);
        assert_eq!(r.coherence, 1.0);
    }

    #[test]
    fn white_noise_free_evolution_exact() {
        let grid = TimeGrid::new(0.0, 5.0, 51).unwrap();
        let g = correlation(&KernelSpec::white(2.0), &grid, BoundaryCondition::Natural);
        let f = control_free(&grid, 1.5, 0.0, 5.0).unwrap();
        let r = attenuation_time_basis(&g, &f).unwrap();
        assert!((r.chi - 1.5 * 1.5 * 5.0 / 4.0).abs() < 1e-12, "{}", r.chi);
        // A window ending inside the grid splits a cell; the split cell
        // carries the average of f, which underestimates ∫f² by O(Δt).
        let f = control_free(&grid, 1.5, 0.0, 2.35).unwrap();
        let r = attenuation_time_basis(&g, &f).unwrap();
        let expected = 1.5 * 1.5 * 2.35 / 4.0;
        assert!(r.chi <= expected && r.chi > expected - 1.5 * 1.5 * grid.dt() / 4.0);
    }

    #[test]
    fn stationary_ou_free_evolution() {
        let grid = TimeGrid::new(0.0, 5.0, 1001).unwrap();
        let g = correlation(&KernelSpec::ornstein_uhlenbeck(1.0, 1.0), &grid, BoundaryCondition::DecayAtInfinity);
        let r = attenuation_time_basis(&g, &control_free(&grid, 1.0, 0.0, 5.0).unwrap()).unwrap();
        let exact = 0.5 * (5.0 - (1.0 - (-5.0f64).exp()));
        assert!((r.chi - exact).abs() < 1e-4 * exact, "{} vs {exact}", r.chi);
    }

    #[test]
    fn eigenbasis_matches_time_basis() {
        let grid = TimeGrid::new(0.0, 6.0, 181).unwrap();
        let g = correlation(&KernelSpec::quartic(1.0, 0.5), &grid, BoundaryCondition::DirichletAtQuench);
        let dec = decompose(&g, 0.0).unwrap();
        for f in [
            control_cw(&grid, 0.7, 2.0, 0.5, 4.0).unwrap(),
            control_pulse_train(&grid, 1.0, 0.0, 6.0, &[1.0, 2.5, 5.0]).unwrap(),
        ] {
            let a = attenuation_time_basis(&g, &f).unwrap().chi;
            let b = attenuation_eigenbasis(&dec, &f).unwrap().chi;
            assert!((a - b).abs() <= 1e-8 * a, "{a} vs {b}");
        }
        let v = dec.mode_control(2, 1.0).unwrap();
        let r = attenuation_eigenbasis(&dec, &v).unwrap();
        assert!((r.chi - 0.5 * dec.modes[2].eigenvalue).abs() < 1e-10);
        let _ = DEFAULT_CUTOFF;
    }

    #[test]
    fn frequency_basis_white_noise() {
        let grid = TimeGrid::new(0.0, 5.0, 201).unwrap();
        let f = control_free(&grid, 1.0, 1.0, 3.0).unwrap();
        let spec = KernelSpec::white(1.0);
        let r = attenuation_stationary(&spec, &f, FrequencyGrid::default()).unwrap();
        // A rectangular window is not band-limited, but the white-noise
        // integral is Parseval's identity and exact over one zone.
        let g = correlation(&spec, &grid, BoundaryCondition::Natural);
        let t = attenuation_time_basis(&g, &f).unwrap().chi;
        assert!((r.chi - t).abs() < 1e-12, "{} vs {t}", r.chi);
        assert!(!r.warnings.is_empty());
    }

    #[test]
    fn frequency_basis_matches_time_basis_for_smooth_control() {
        let grid = TimeGrid::new(-8.0, 8.0, 1601).unwrap();
        let spec = KernelSpec::ornstein_uhlenbeck(1.0, 1.0);
        let vals: Vec<f64> = grid
            .times()
            .iter()
            .map(|t| (-t * t / 2.0).exp() * (1.5 * t).cos())
            .collect();
        let f = control_custom(&grid, vals).unwrap();
        let g = correlation(&spec, &grid, BoundaryCondition::DecayAtInfinity);
        let a = attenuation_time_basis(&g, &f).unwrap().chi;
        let b = attenuation_stationary(&spec, &f, FrequencyGrid::default()).unwrap();
        assert!(b.warnings.is_empty());
        assert!((a - b.chi).abs() < 1e-4 * a, "{a} vs {}", b.chi);
    }

    #[test]
    fn hahn_echo_beats_free_evolution_for_short_times() {
        let spec = KernelSpec::ornstein_uhlenbeck(1.0, 1.0);
        let grid = TimeGrid::new(0.0, 1.0, 401).unwrap();
        let free = control_free(&grid, 1.0, 0.0, 1.0).unwrap();
        let echo = control_pulse_train(&grid, 1.0, 0.0, 1.0, &[0.5]).unwrap();
        let a = attenuation_stationary(&spec, &free, FrequencyGrid::default()).unwrap().chi;
        let b = attenuation_stationary(&spec, &echo, FrequencyGrid::default()).unwrap().chi;
        assert!(b < a);
    }

    #[test]
    fn curve_is_monotone_and_starts_at_one() {
        let grid = TimeGrid::new(0.0, 5.0, 201).unwrap();
        let g = correlation(&KernelSpec::ornstein_uhlenbeck(1.0, 1.0), &grid, BoundaryCondition::DecayAtInfinity);
        let durations: Vec<f64> = (0..=20).map(|i| 0.25 * i as f64).collect();
        let curve = coherence_curve(&g, |t| control_free(&grid, 1.0, 0.0, t), &durations).unwrap();
        assert_eq!(curve[0].coherence, 1.0);
        assert!(curve.windows(2).all(|w| w[1].coherence <= w[0].coherence));
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &curve).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("T,chi,coherence\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn chi_is_quadratic_and_nonnegative(lambda in -3.0..3.0f64, w in 0.0..4.0f64, t0 in 0.0..2.0f64) {
            let grid = TimeGrid::new(0.0, 5.0, 101).unwrap();
            let g = correlation(&KernelSpec::stationary_scalar(&[1.0, 0.3, 0.1]), &grid, BoundaryCondition::DecayAtInfinity);
            let f = control_cw(&grid, 1.0, w, t0, 3.0).unwrap();
            let base = attenuation_time_basis(&g, &f).unwrap().chi;
            let scaled = attenuation_time_basis(&g, &f.clone().scaled(lambda)).unwrap().chi;
            prop_assert!(base >= 0.0);
            prop_assert!((scaled - lambda * lambda * base).abs() <= 1e-10 * (1.0 + scaled));
        }

        #[test]
        fn quench_reduces_dephasing(w in 0.0..3.0f64, t0 in 0.0..3.0f64, dur in 0.5..4.0f64) {
            let grid = TimeGrid::new(0.0, 8.0, 161).unwrap();
            let spec = KernelSpec::ornstein_uhlenbeck(1.0, 1.0);
            let gq = correlation(&spec, &grid, BoundaryCondition::DirichletAtQuench);
            let gs = correlation(&spec, &grid, BoundaryCondition::DecayAtInfinity);
            let f = control_cw(&grid, 1.0, w, t0, dur.min(8.0 - t0)).unwrap();
            let q = attenuation_time_basis(&gq, &f).unwrap().chi;
            let s = attenuation_time_basis(&gs, &f).unwrap().chi;
            prop_assert!(q <= s + 1e-12);
        }
    }
}
