//! Built-in scenarios that regenerate the reference figures as CSV.

use std::io::Write;

use noisepath::analytic::{
    harmonic_mode, harmonic_spectrum, quenched_ou_bispectrum, stationary_spectrum_scalar, HarmonicNoiseParams,
    QuenchedOUParams,
};
use noisepath::dephasing::attenuation_time_basis;
use noisepath::eigenmodes::{decompose, DEFAULT_CUTOFF};
use noisepath::gridops::{discretize_kernel, kernel_to_correlation, PADDING_TOLERANCE};
use noisepath::io::{fmt_f64, write_table};
use noisepath::modulation::control_custom;
use noisepath::{BoundaryCondition, KernelSpec, TimeGrid};
use serde_json::{json, Value};

use crate::output::sha256_hex;
use crate::{CliError, Context, Report, Scenario};

/// Width of the Gaussian standing in for `δ(ω₁ − ω₂)` on the fig3 map.
const DIAGONAL_WIDTH: f64 = 0.1;

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| a + (b - a) * k as f64 / (n - 1) as f64).collect()
}

fn context(params: &Value, timestamp: Option<u64>) -> Context {
    Context {
        seed: None,
        config_sha256: sha256_hex(params.to_string().as_bytes()),
        timestamp,
    }
}

/// The scenarios draw no random numbers, so `seed` is accepted and ignored.
pub fn run(scenario: Scenario, _seed: Option<u64>, timestamp: Option<u64>) -> Result<Report, CliError> {
    match scenario {
        Scenario::Fig2b => fig2b(timestamp),
        Scenario::Fig3 => fig3(timestamp),
        Scenario::Fig4 => fig4(timestamp),
    }
}

/// Lorentzian (`N = 1`) against inverse-quartic (`N = 2`) spectra.
fn fig2b(timestamp: Option<u64>) -> Result<Report, CliError> {
    let params = json!({"scenario": "fig2b", "n1": {"d0": 1.0, "d1": 1.0}, "n2": {"d0": 1.0, "d2": 1.0},
        "omega": {"min": 0.0, "max": 20.0, "points": 401}});
    let ctx = context(&params, timestamp);
    let lorentzian = KernelSpec::ornstein_uhlenbeck(1.0, 1.0);
    let quartic = KernelSpec::quartic(1.0, 1.0);
    let rows = linspace(0.0, 20.0, 401)
        .into_iter()
        .map(|w| {
            Ok(vec![
                w,
                stationary_spectrum_scalar(&lorentzian, w)?,
                stationary_spectrum_scalar(&quartic, w)?,
            ])
        })
        .collect::<noisepath::Result<Vec<_>>>()?;
    let meta = ctx.metadata("reproduce fig2b", None, None, vec![]);
    let mut report = Report::default();
    report
        .outputs
        .csv("fig2b_spectra.csv", &meta, |w| write_table(w, &["omega", "S_N1", "S_N2"], &rows));
    Ok(report)
}

/// Quenched Ornstein–Uhlenbeck bispectrum map and eigenspectrum.
fn fig3(timestamp: Option<u64>) -> Result<Report, CliError> {
    let p = QuenchedOUParams::new(1.0, 1.0)?;
    let tau = p.tau();
    let params = json!({"scenario": "fig3", "d0": 1.0, "d1": 1.0,
        "omega": {"min": -5.0, "max": 5.0, "points": 101}, "diagonal_width": DIAGONAL_WIDTH,
        "window": 30.0 * tau, "dt": tau / 25.0, "cutoff": DEFAULT_CUTOFF});
    let ctx = context(&params, timestamp);
    let omegas = linspace(-5.0, 5.0, 101);
    let norm = 1.0 / (DIAGONAL_WIDTH * (2.0 * std::f64::consts::PI).sqrt());
    let mut map = Vec::with_capacity(omegas.len() * omegas.len());
    for &w1 in &omegas {
        for &w2 in &omegas {
            let b = quenched_ou_bispectrum(&p, w1, w2);
            let d = (w1 - w2) / DIAGONAL_WIDTH;
            let diag = b.diagonal_lorentzian * norm * (-0.5 * d * d).exp();
            let total = b.regular + diag;
            map.push(vec![w1, w2, b.regular.re, b.regular.im, b.diagonal_lorentzian, total.norm()]);
        }
    }
    let grid = TimeGrid::with_spacing(0.0, 30.0 * tau, tau / 25.0)?;
    let k = discretize_kernel(&p.kernel(), &grid)?;
    let g = kernel_to_correlation(&k, BoundaryCondition::DirichletAtQuench)?;
    let dec = decompose(&g, DEFAULT_CUTOFF)?;
    let eigen: Vec<Vec<f64>> = dec
        .modes
        .iter()
        .map(|m| {
            let w = m.dominant_frequency;
            vec![m.index as f64, w, m.eigenvalue, 1.0 / (p.d0 + p.d1 * w * w)]
        })
        .collect();
    let meta_map = ctx.metadata("reproduce fig3", None, None, vec![("diagonal_width", DIAGONAL_WIDTH)]);
    let meta_eigen = ctx.metadata(
        "reproduce fig3",
        None,
        Some(grid),
        vec![("padding", PADDING_TOLERANCE), ("cutoff", DEFAULT_CUTOFF)],
    );
    let mut report = Report::default();
    report.outputs.csv("fig3a_bispectrum.csv", &meta_map, |w| {
        write_table(
            w,
            &["omega1", "omega2", "regular_re", "regular_im", "diagonal_weight", "abs_smoothed"],
            &map,
        )
    });
    report.outputs.csv("fig3b_eigenspectrum.csv", &meta_eigen, |w| {
        write_table(w, &["mode_index", "Omega", "S", "S_stationary_form"], &eigen)
    });
    Ok(report)
}

/// Coherence decay under the √2-scaled harmonic eigenmodes, which saturates
/// at `exp(−S(Ω_n))`.
fn fig4(timestamp: Option<u64>) -> Result<Report, CliError> {
    let modes = 5;
    let p = HarmonicNoiseParams::new(0.5, 1.0, 1.0)?;
    let grid = TimeGrid::new(-8.0, 8.0, 801)?;
    let params = json!({"scenario": "fig4", "d0": 0.5, "d1": 1.0, "alpha": 1.0,
        "grid": {"t_start": -8.0, "t_end": 8.0, "n_points": 801}, "modes": modes, "curve_points": 80});
    let ctx = context(&params, timestamp);
    let k = discretize_kernel(&p.kernel(), &grid)?;
    let g = kernel_to_correlation(&k, BoundaryCondition::DecayAtInfinity)?;
    let durations: Vec<f64> = (1..=80).map(|j| grid.span() * j as f64 / 80.0).collect();
    let mut curves = vec![durations.clone()];
    let mut plateaus = Vec::new();
    for n in 0..modes {
        let values = grid
            .times()
            .iter()
            .map(|&t| std::f64::consts::SQRT_2 * harmonic_mode(&p, n, t))
            .collect();
        let f = control_custom(&grid, values)?;
        let curve = durations
            .iter()
            .map(|&d| Ok(attenuation_time_basis(&g, &f.truncated(d)?)?.coherence))
            .collect::<noisepath::Result<Vec<_>>>()?;
        let s = harmonic_spectrum(&p, n)?;
        plateaus.push(vec![n as f64, p.level(n), *curve.last().expect("non-empty"), (-s).exp()]);
        curves.push(curve);
    }
    let rows: Vec<Vec<f64>> = (0..durations.len())
        .map(|i| curves.iter().map(|c| c[i]).collect())
        .collect();
    let mut header = vec!["T".to_string()];
    header.extend((0..modes).map(|n| format!("coherence_n{n}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let meta = ctx.metadata("reproduce fig4", None, Some(grid), vec![("padding", PADDING_TOLERANCE)]);
    let mut report = Report::default();
    report.outputs.csv("fig4_saturation.csv", &meta, |w| write_table(w, &header, &rows));
    report.outputs.csv("fig4_plateaus.csv", &meta, |w| {
        writeln!(w, "n,Omega_n,plateau,expected")?;
        for r in &plateaus {
            writeln!(w, "{},{},{},{}", r[0], fmt_f64(r[1]), fmt_f64(r[2]), fmt_f64(r[3]))?;
        }
        Ok(())
    });
    Ok(report)
}
