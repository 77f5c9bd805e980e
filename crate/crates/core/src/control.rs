//! Pulse-train controls that minimise the overlap `χ = ½ Σ_j S_j F_j²` with
//! the noise eigenspectrum.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dephasing::attenuation_eigenbasis;
use crate::eigenmodes::EigenmodeDecomposition;
use crate::error::{Error, Result};
use crate::io::fmt_f64;
use crate::modulation::{control_pulse_train, cpmg_times, uhrig_times, ControlModulation};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerOptions {
    /// Total starts, including the CPMG, Uhrig and clustered ones.
    pub starts: usize,
    /// Sweeps stop once one improves `χ` by less than `tol·χ`.
    pub tol: f64,
    pub max_sweeps: usize,
    pub seed: u64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            starts: 16,
            tol: 1e-8,
            max_sweeps: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartKind {
    Free,
    Cpmg,
    Uhrig,
    /// All pulses on the last boundaries of the window.
    Clustered,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizedPulses {
    pub pulses: Vec<f64>,
    pub chi: f64,
    pub start: StartKind,
    pub sweeps: usize,
    pub chi_cpmg: f64,
    pub chi_uhrig: f64,
    pub chi_free: f64,
    pub t0: f64,
    pub duration: f64,
    pub coupling: Vec<f64>,
}

/// `χ` of a `±1` switching pattern, from cumulative integrals of the modes.
///
/// With `ṽ_j` the mode held constant on each dual cell (which is what the
/// cell-average tabulation of a control integrates against), `F_j = ∫ s ṽ_j`
/// and `K_j(t) = ∫^t ṽ_j` is piecewise linear. Pulses are searched on the
/// cell boundaries: a flip inside a cell partly cancels the cell average,
/// which lowers `χ` by an amount set by the grid rather than by the noise.
struct Objective {
    s: Vec<f64>,
    bounds: Vec<f64>,
    /// `slope[i][j]`: coupled mode `j` on cell `i`.
    slope: Vec<Vec<f64>>,
    /// `cum[i][j] = K_j(bounds[i])`.
    cum: Vec<Vec<f64>>,
    t0: f64,
    t1: f64,
    /// Boundary indices strictly inside `(t0, t1)`.
    first: usize,
    last: usize,
}

impl Objective {
    fn new(dec: &EigenmodeDecomposition, coupling: &[f64], t0: f64, t1: f64) -> Self {
        let n = dec.dim;
        let m = dec.grid.len();
        let bounds = dec.grid.cell_bounds();
        let slope: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                dec.modes
                    .iter()
                    .map(|md| (0..n).map(|c| coupling[c] * md.function[i * n + c]).sum())
                    .collect()
            })
            .collect();
        let j_count = dec.modes.len();
        let mut cum = vec![vec![0.0; j_count]; m + 1];
        for i in 0..m {
            let h = bounds[i + 1] - bounds[i];
            for j in 0..j_count {
                cum[i + 1][j] = cum[i][j] + slope[i][j] * h;
            }
        }
        let slack = 1e-9 * dec.grid.dt();
        let first = bounds.partition_point(|&b| b <= t0 + slack);
        let last = bounds.partition_point(|&b| b < t1 - slack);
        Self {
            s: dec.modes.iter().map(|md| md.eigenvalue).collect(),
            bounds,
            slope,
            cum,
            t0,
            t1,
            first,
            last,
        }
    }

    /// Number of admissible pulse positions.
    fn slots(&self) -> usize {
        self.last.saturating_sub(self.first)
    }

    fn k(&self, t: f64) -> Vec<f64> {
        let i = self.bounds.partition_point(|&b| b <= t).saturating_sub(1).min(self.slope.len() - 1);
        let x = t - self.bounds[i];
        self.cum[i].iter().zip(&self.slope[i]).map(|(c, v)| c + v * x).collect()
    }

    fn filter(&self, pulses: &[usize]) -> Vec<f64> {
        let mut ks = vec![self.k(self.t0)];
        ks.extend(pulses.iter().map(|&b| self.cum[b].clone()));
        ks.push(self.k(self.t1));
        let mut f = vec![0.0; self.s.len()];
        let mut sign = 1.0;
        for w in ks.windows(2) {
            for (fj, (a, b)) in f.iter_mut().zip(w[0].iter().zip(&w[1])) {
                *fj += sign * (b - a);
            }
            sign = -sign;
        }
        f
    }

    fn chi_of_filter(&self, f: &[f64]) -> f64 {
        0.5 * f.iter().zip(&self.s).map(|(f, s)| s * f * f).sum::<f64>()
    }

    fn chi(&self, pulses: &[usize]) -> f64 {
        self.chi_of_filter(&self.filter(pulses))
    }

    /// Best boundary for pulse `k` between its neighbours, others fixed.
    fn best_position(&self, pulses: &[usize], k: usize) -> (usize, f64) {
        let lo = if k == 0 { self.first } else { pulses[k - 1] + 1 };
        let hi = if k + 1 == pulses.len() { self.last } else { pulses[k + 1] };
        let f = self.filter(pulses);
        let current = self.chi_of_filter(&f);
        // F_j(b) = A_j + 2σ K_j(b), σ the sign before the pulse.
        let sigma = if k % 2 == 0 { 1.0 } else { -1.0 };
        let a: Vec<f64> = f
            .iter()
            .zip(&self.cum[pulses[k]])
            .map(|(fv, kv)| fv - 2.0 * sigma * kv)
            .collect();
        let mut best = (pulses[k], current);
        for b in lo..hi {
            let chi = 0.5
                * a.iter()
                    .zip(&self.cum[b])
                    .zip(&self.s)
                    .map(|((av, kv), s)| {
                        let fj = av + 2.0 * sigma * kv;
                        s * fj * fj
                    })
                    .sum::<f64>();
            if chi < best.1 {
                best = (b, chi);
            }
        }
        best
    }

    /// Nearest admissible boundaries to `times`, kept strictly increasing.
    fn snap(&self, times: &[f64]) -> Option<Vec<usize>> {
        if times.len() > self.slots() {
            return None;
        }
        let mut out: Vec<usize> = Vec::with_capacity(times.len());
        for (k, &t) in times.iter().enumerate() {
            let nearest = (self.first..self.last)
                .min_by(|&a, &b| (self.bounds[a] - t).abs().total_cmp(&(self.bounds[b] - t).abs()))
                .expect("at least one slot");
            let min = out.last().map_or(self.first, |p| p + 1);
            let max = self.last - (times.len() - k);
            out.push(nearest.clamp(min, max));
        }
        Some(out)
    }
}

fn descend(obj: &Objective, mut pulses: Vec<usize>, opts: &OptimizerOptions) -> (Vec<usize>, f64, usize) {
    let mut chi = obj.chi(&pulses);
    let mut sweeps = 0;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let before = chi;
        for k in 0..pulses.len() {
            let (p, c) = obj.best_position(&pulses, k);
            if c < chi {
                pulses[k] = p;
                // Re-evaluate from scratch to keep round-off from drifting.
                chi = obj.chi(&pulses);
            }
        }
        if before - chi <= opts.tol * chi.abs() {
            break;
        }
    }
    (pulses, chi, sweeps)
}

/// Coordinate descent over pulse positions on the dual-cell boundaries, with
/// an exhaustive line search per pulse, from CPMG, Uhrig, end-clustered and
/// random starts. The CPMG and Uhrig sequences seed the search rounded to the
/// nearest boundary and are also kept as candidates at their exact times, so
/// the result never exceeds either baseline. Free evolution is a candidate too: if it wins, `pulses` is empty
/// and `start` is [`StartKind::Free`].
pub fn optimize_pulse_times(
    dec: &EigenmodeDecomposition,
    t0: f64,
    duration: f64,
    pulses: usize,
    coupling: &[f64],
    opts: &OptimizerOptions,
) -> Result<OptimizedPulses> {
    if coupling.len() != dec.dim {
        return Err(Error::Domain(format!(
            "coupling has {} channels, decomposition {}",
            coupling.len(),
            dec.dim
        )));
    }
    let t1 = t0 + duration;
    if !(duration > 0.0) || !dec.grid.contains(t0) || !dec.grid.contains(t1) {
        return Err(Error::Domain(format!("window [{t0}, {t1}] not inside the grid")));
    }
    let obj = Objective::new(dec, coupling, t0, t1);
    let chi_free = obj.chi(&[]);
    let too_many = || Error::Domain(format!("{pulses} pulses do not fit in {} grid cells", obj.slots()));
    let cpmg_exact = cpmg_times(t0, duration, pulses);
    let uhrig_exact = uhrig_times(t0, duration, pulses);
    let cpmg = obj.snap(&cpmg_exact).ok_or_else(too_many)?;
    let uhrig = obj.snap(&uhrig_exact).ok_or_else(too_many)?;
    let exact_chi = |times: &[f64]| -> Result<f64> {
        let f = control_pulse_train(&dec.grid, 1.0, t0, duration, times)?.with_coupling(coupling.to_vec())?;
        Ok(attenuation_eigenbasis(dec, &f)?.chi)
    };
    let chi_cpmg = exact_chi(&cpmg_exact)?;
    let chi_uhrig = exact_chi(&uhrig_exact)?;

    let mut starts: Vec<(StartKind, Vec<usize>)> = vec![(StartKind::Cpmg, cpmg), (StartKind::Uhrig, uhrig)];
    if pulses > 0 {
        starts.push((StartKind::Clustered, (obj.last - pulses..obj.last).collect()));
        let slots: Vec<usize> = (obj.first..obj.last).collect();
        for r in starts.len()..opts.starts.max(starts.len()) {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let mut p = rand::seq::index::sample(&mut rng, slots.len(), pulses)
                .into_iter()
                .map(|i| slots[i])
                .collect::<Vec<_>>();
            p.sort_unstable();
            starts.push((StartKind::Random, p));
        }
    }
    let results: Vec<(StartKind, Vec<usize>, f64, usize)> = starts
        .into_par_iter()
        .map(|(kind, p)| {
            let (p, chi, sweeps) = descend(&obj, p, opts);
            (kind, p, chi, sweeps)
        })
        .collect();
    let (mut start, best, mut chi, sweeps) = results
        .into_iter()
        .reduce(|a, b| if b.2 < a.2 { b } else { a })
        .expect("at least the CPMG start");
    let mut times: Vec<f64> = best.iter().map(|&b| obj.bounds[b]).collect();
    // Off-lattice baselines can undercut the lattice when a pulse splits a
    // cell, so they stay candidates.
    for (kind, exact, c) in [(StartKind::Cpmg, &cpmg_exact, chi_cpmg), (StartKind::Uhrig, &uhrig_exact, chi_uhrig)] {
        if c < chi {
            start = kind;
            chi = c;
            times = exact.clone();
        }
    }
    if chi_free < chi {
        start = StartKind::Free;
        chi = chi_free;
        times.clear();
    }
    Ok(OptimizedPulses {
        pulses: times,
        chi,
        start,
        sweeps,
        chi_cpmg,
        chi_uhrig,
        chi_free,
        t0,
        duration,
        coupling: coupling.to_vec(),
    })
}

impl OptimizedPulses {
    pub fn control(&self, dec: &EigenmodeDecomposition) -> Result<ControlModulation> {
        control_pulse_train(&dec.grid, 1.0, self.t0, self.duration, &self.pulses)?.with_coupling(self.coupling.clone())
    }
}

/// The unit-norm control with the least attenuation: the weakest retained
/// mode, giving `χ = S_min/2`.
pub fn eigenmode_floor(dec: &EigenmodeDecomposition) -> Result<(ControlModulation, f64)> {
    let j = dec
        .modes
        .len()
        .checked_sub(1)
        .ok_or_else(|| Error::Domain("decomposition has no modes".into()))?;
    Ok((dec.mode_control(j, 1.0)?, 0.5 * dec.modes[j].eigenvalue))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtectionRow {
    pub label: String,
    pub chi: f64,
    pub coherence: f64,
    /// `χ_free − χ`.
    pub gain: f64,
}

/// Attenuation of each candidate against the reference free evolution,
/// sorted by increasing `χ`. The reference is included as `free`.
pub fn protection_report(
    dec: &EigenmodeDecomposition,
    free: &ControlModulation,
    candidates: &[(String, ControlModulation)],
) -> Result<Vec<ProtectionRow>> {
    let chi_free = attenuation_eigenbasis(dec, free)?.chi;
    let mut rows = vec![ProtectionRow {
        label: "free".into(),
        chi: chi_free,
        coherence: (-chi_free).exp(),
        gain: 0.0,
    }];
    let computed = candidates
        .par_iter()
        .map(|(label, f)| {
            let r = attenuation_eigenbasis(dec, f)?;
            Ok(ProtectionRow {
                label: label.clone(),
                chi: r.chi,
                coherence: r.coherence,
                gain: chi_free - r.chi,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.extend(computed);
    rows.sort_by(|a, b| a.chi.total_cmp(&b.chi));
    Ok(rows)
}

/// CSV with columns `label,chi,coherence,gain`.
pub fn write_report_csv<W: Write>(rows: &[ProtectionRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "label,chi,coherence,gain")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{}",
            r.label,
            fmt_f64(r.chi),
            fmt_f64(r.coherence),
            fmt_f64(r.gain)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic::{HarmonicNoiseParams, QuenchedOUParams};
    use crate::dephasing::attenuation_time_basis;
    use crate::eigenmodes::decompose;
    use crate::grid::TimeGrid;
    use crate::gridops::{discretize_kernel, kernel_to_correlation, BoundaryCondition, CorrelationMatrix};
    use crate::kernel::KernelSpec;
    use crate::modulation::control_free;
    use proptest::prelude::*;

    fn setup(spec: &KernelSpec, grid: TimeGrid, bc: BoundaryCondition) -> (CorrelationMatrix, EigenmodeDecomposition) {
        let k = discretize_kernel(spec, &grid).unwrap();
        let g = kernel_to_correlation(&k, bc).unwrap();
        let dec = decompose(&g, 0.0).unwrap();
        (g, dec)
    }

    #[test]
    fn objective_matches_dephasing() {
        let (g, dec) = setup(
            &KernelSpec::ornstein_uhlenbeck(1.0, 1.0),
            TimeGrid::new(0.0, 8.0, 161).unwrap(),
            BoundaryCondition::DecayAtInfinity,
        );
        let obj = Objective::new(&dec, &[1.3], 0.5, 7.2);
        let pulses = [21, 54, 55, 127];
        let times: Vec<f64> = pulses.iter().map(|&b| obj.bounds[b]).collect();
        let f = control_pulse_train(&dec.grid, 1.3, 0.5, 6.7, &times).unwrap();
        let chi = attenuation_time_basis(&g, &f).unwrap().chi;
        assert!((obj.chi(&pulses) - chi).abs() < 1e-10 * chi);
    }

    #[test]
    fn white_noise_is_placement_independent() {
        // Δt = 1/9 puts the CPMG times 0.5, 1.5, … on cell boundaries.
        let (_, dec) = setup(
            &KernelSpec::white(2.0),
            TimeGrid::new(0.0, 4.0, 37).unwrap(),
            BoundaryCondition::Natural,
        );
        let obj = Objective::new(&dec, &[1.5], 0.0, 4.0);
        let expected = 1.5 * 1.5 * 4.0 / (2.0 * 2.0);
        for p in [vec![], obj.snap(&uhrig_times(0.0, 4.0, 4)).unwrap(), vec![obj.first, obj.last - 1]] {
            assert!((obj.chi(&p) - expected).abs() < 1e-9 * expected);
        }
        let r = optimize_pulse_times(&dec, 0.0, 4.0, 4, &[1.5], &OptimizerOptions::default()).unwrap();
        for chi in [r.chi_cpmg, r.chi_free] {
            assert!((chi - expected).abs() < 1e-9 * expected, "{chi} vs {expected}");
        }
        // Off-lattice Uhrig pulses split cells, which only lowers χ.
        assert!(r.chi_uhrig <= expected && r.chi <= r.chi_uhrig);
    }

    #[test]
    fn ou_optimum_beats_free_and_baselines() {
        let (_, dec) = setup(
            &KernelSpec::ornstein_uhlenbeck(1.0, 1.0),
            TimeGrid::new(0.0, 12.0, 241).unwrap(),
            BoundaryCondition::DecayAtInfinity,
        );
        let r = optimize_pulse_times(&dec, 0.0, 12.0, 8, &[1.0], &OptimizerOptions::default()).unwrap();
        assert!(r.chi < r.chi_free);
        assert!(r.chi <= r.chi_cpmg && r.chi <= r.chi_uhrig);
        assert!(r.pulses.windows(2).all(|w| w[0] < w[1]));
        let chi = attenuation_eigenbasis(&dec, &r.control(&dec).unwrap()).unwrap().chi;
        assert!((chi - r.chi).abs() < 1e-9 * chi);
    }

    #[test]
    fn harmonic_optimum_beats_cpmg() {
        let p = HarmonicNoiseParams::new(0.5, 1.0, 1.0).unwrap();
        let (_, dec) = setup(&p.kernel(), TimeGrid::new(-6.0, 6.0, 241).unwrap(), BoundaryCondition::DecayAtInfinity);
        let r = optimize_pulse_times(&dec, -4.0, 8.0, 6, &[1.0], &OptimizerOptions::default()).unwrap();
        assert!(r.chi < r.chi_cpmg, "{} vs {}", r.chi, r.chi_cpmg);
    }

    #[test]
    fn optimizer_is_deterministic() {
        let (_, dec) = setup(
            &KernelSpec::quartic(1.0, 1.0),
            TimeGrid::new(0.0, 6.0, 121).unwrap(),
            BoundaryCondition::DecayAtInfinity,
        );
        let opts = OptimizerOptions { seed: 3, ..Default::default() };
        let a = optimize_pulse_times(&dec, 0.0, 6.0, 3, &[1.0], &opts).unwrap();
        let b = optimize_pulse_times(&dec, 0.0, 6.0, 3, &[1.0], &opts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn eigenmode_floor_is_rayleigh_minimum() {
        let (g, dec) = setup(
            &KernelSpec::ornstein_uhlenbeck(1.0, 1.0),
            TimeGrid::new(0.0, 6.0, 121).unwrap(),
            BoundaryCondition::DirichletAtQuench,
        );
        let (f, chi) = eigenmode_floor(&dec).unwrap();
        assert!((chi - 0.5 * dec.s_min()).abs() < 1e-15);
        let direct = attenuation_time_basis(&g, &f).unwrap().chi;
        assert!((direct - chi).abs() < 1e-8 * chi.max(1e-300) + 1e-14);
    }

    #[test]
    fn report_sorted_with_free_gain_zero() {
        let p = QuenchedOUParams::new(1.0, 1.0).unwrap();
        let grid = TimeGrid::new(0.0, 12.0, 241).unwrap();
        let (_, dec) = setup(&p.kernel(), grid, BoundaryCondition::DirichletAtQuench);
        let free = control_free(&grid, 1.0, 0.0, 2.0).unwrap();
        let delayed = control_free(&grid, 1.0, 8.0, 2.0).unwrap();
        let echo = control_pulse_train(&grid, 1.0, 0.0, 2.0, &[1.0]).unwrap();
        let rows = protection_report(&dec, &free, &[("delayed".into(), delayed), ("echo".into(), echo)]).unwrap();
        assert!(rows.windows(2).all(|w| w[0].chi <= w[1].chi));
        let free_row = rows.iter().find(|r| r.label == "free").unwrap();
        assert_eq!(free_row.gain, 0.0);
        // Far from the quench the pinned start no longer reduces χ.
        let delayed_row = rows.iter().find(|r| r.label == "delayed").unwrap();
        assert!(delayed_row.gain < 0.0);
        let mut buf = Vec::new();
        write_report_csv(&rows, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("label,chi,coherence,gain\n"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]

        #[test]
        fn never_worse_than_baselines(pulses in 1usize..6, seed in 0u64..50, d1 in 0.2f64..3.0) {
            let (_, dec) = setup(
                &KernelSpec::ornstein_uhlenbeck(1.0, d1),
                TimeGrid::new(0.0, 5.0, 101).unwrap(),
                BoundaryCondition::DecayAtInfinity,
            );
            let opts = OptimizerOptions { starts: 6, seed, ..Default::default() };
            let r = optimize_pulse_times(&dec, 0.0, 5.0, pulses, &[1.0], &opts).unwrap();
            prop_assert!(r.chi <= r.chi_cpmg && r.chi <= r.chi_uhrig);
            prop_assert!(r.chi <= r.chi_free * (1.0 + 1e-8));
        }
    }
}
