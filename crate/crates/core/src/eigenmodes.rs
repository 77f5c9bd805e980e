//! Noise eigenmodes: diagonalisation of the correlation operator, generalised
//! filter coefficients and the two-frequency bispectrum.

use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridops::{BoundaryCondition, CorrelationMatrix};
use crate::grid::TimeGrid;
use crate::io::fmt_f64;
use crate::modulation::ControlModulation;

pub const DEFAULT_CUTOFF: f64 = 1e-10;
/// Relative eigenvalue gap below which modes are treated as degenerate.
pub const DEGENERACY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub index: usize,
    /// `S(Ω_j)`.
    pub eigenvalue: f64,
    /// `v_j(t_i)`, time-major, normalised so that `Σ w_i v_j(t_i)² = 1`.
    pub function: Vec<f64>,
    /// Peak angular frequency of the mode's DFT (label only).
    pub dominant_frequency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EigenmodeDecomposition {
    pub grid: TimeGrid,
    pub dim: usize,
    pub boundary: BoundaryCondition,
    /// Retained modes, eigenvalue descending.
    pub modes: Vec<Mode>,
    pub cutoff: f64,
    /// Sum of the eigenvalues discarded by the cutoff (negative round-off
    /// eigenvalues count by magnitude).
    pub dropped_weight: f64,
    pub dropped_count: usize,
}

/// Diagonalises `√w G √w` and returns the weighted-orthonormal modes with
/// `S_j ≥ cutoff·S_max`.
pub fn decompose(g: &CorrelationMatrix, cutoff: f64) -> Result<EigenmodeDecomposition> {
    if !(cutoff >= 0.0) {
        return Err(Error::Domain(format!("cutoff must be non-negative, got {cutoff}")));
    }
    let grid = *g.grid();
    let n = g.dim();
    let a = g.weighted_matrix();
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearAlgebra("correlation matrix has non-finite entries".into()));
    }
    let eig = SymmetricEigen::try_new(a, 1e-14, 0)
        .ok_or_else(|| Error::LinearAlgebra("symmetric eigen-solve did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let s_max = eig.eigenvalues[order[0]].max(0.0);
    let inv_sqrt_w: Vec<f64> = (0..grid.len() * n)
        .map(|q| 1.0 / grid.weight(q / n).sqrt())
        .collect();

    let mut modes = Vec::new();
    let mut dropped_weight = 0.0;
    let mut dropped_count = 0;
    for &col in &order {
        let s = eig.eigenvalues[col];
        if s > 0.0 && s >= cutoff * s_max {
            let u = eig.eigenvectors.column(col);
            let mut v: Vec<f64> = u.iter().zip(&inv_sqrt_w).map(|(x, y)| x * y).collect();
            // Fix the sign so that the largest-magnitude entry is positive.
            let (imax, _) = v
                .iter()
                .enumerate()
                .fold((0, 0.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc });
            if v[imax] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            modes.push(Mode {
                index: modes.len(),
                eigenvalue: s,
                function: v,
                dominant_frequency: 0.0,
            });
        } else {
            dropped_weight += s.abs();
            dropped_count += 1;
        }
    }
    let freqs: Vec<f64> = modes
        .par_iter()
        .map(|m| dominant_frequency(&m.function, n, grid.dt()))
        .collect();
    for (m, f) in modes.iter_mut().zip(freqs) {
        m.dominant_frequency = f;
    }
    Ok(EigenmodeDecomposition {
        grid,
        dim: n,
        boundary: g.boundary(),
        modes,
        cutoff,
        dropped_weight,
        dropped_count,
    })
}

/// Peak of the zero-padded power spectrum (summed over channels) on
/// `ω ≥ 0`, refined by parabolic interpolation.
pub fn dominant_frequency(values: &[f64], dim: usize, dt: f64) -> f64 {
    let m = values.len() / dim;
    let len = (16 * m).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(len);
    let mut power = vec![0.0; len / 2 + 1];
    for c in 0..dim {
        let mut buf: Vec<Complex64> = (0..len)
            .map(|i| {
                if i < m {
                    Complex64::new(values[i * dim + c], 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                }
            })
            .collect();
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p += buf[k].norm_sqr();
        }
    }
    let (kmax, _) = power
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (k, &p)| if p > acc.1 { (k, p) } else { acc });
    let mut k = kmax as f64;
    if kmax > 0 && kmax + 1 < power.len() {
        let (a, b, c) = (power[kmax - 1], power[kmax], power[kmax + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            k += 0.5 * (a - c) / denom;
        }
    }
    2.0 * std::f64::consts::PI * k / (len as f64 * dt)
}

impl EigenmodeDecomposition {
    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.eigenvalue).collect()
    }

    pub fn s_min(&self) -> f64 {
        self.modes.last().map_or(0.0, |m| m.eigenvalue)
    }

    pub fn s_max(&self) -> f64 {
        self.modes.first().map_or(0.0, |m| m.eigenvalue)
    }

    /// Index groups of modes whose eigenvalues agree within
    /// [`DEGENERACY_TOL`] relative. Basis choice inside a group is arbitrary.
    pub fn degenerate_groups(&self) -> Vec<Vec<usize>> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (j, m) in self.modes.iter().enumerate() {
            match groups.last_mut() {
                Some(g)
                    if (self.modes[g[0]].eigenvalue - m.eigenvalue).abs()
                        <= DEGENERACY_TOL * self.modes[g[0]].eigenvalue =>
                {
                    g.push(j)
                }
                _ => groups.push(vec![j]),
            }
        }
        groups
    }

    /// Control as a custom modulation equal to mode `j` times `scale`.
    pub fn mode_control(&self, j: usize, scale: f64) -> Result<ControlModulation> {
        let mode = self
            .modes
            .get(j)
            .ok_or_else(|| Error::Domain(format!("mode {j} not retained ({} modes)", self.modes.len())))?;
        crate::modulation::control_custom_multi(
            &self.grid,
            self.dim,
            mode.function.iter().map(|v| v * scale).collect(),
        )
    }

    /// CSV with columns `mode_index,S,dominant_frequency`.
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "mode_index,S,dominant_frequency")?;
        for m in &self.modes {
            writeln!(
                out,
                "{},{},{}",
                m.index,
                fmt_f64(m.eigenvalue),
                fmt_f64(m.dominant_frequency)
            )?;
        }
        Ok(())
    }

    /// Mode functions: one row per (node, channel), one column per mode.
    pub fn write_functions_csv<W: Write>(&self, out: &mut W, max_modes: usize) -> std::io::Result<()> {
        let k = self.modes.len().min(max_modes);
        write!(out, "t,channel")?;
        for j in 0..k {
            write!(out, ",mode_{j}")?;
        }
        writeln!(out)?;
        for q in 0..self.grid.len() * self.dim {
            write!(out, "{},{}", fmt_f64(self.grid.time(q / self.dim)), q % self.dim)?;
            for m in &self.modes[..k] {
                write!(out, ",{}", fmt_f64(m.function[q]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// `F_j = Σ_i w_i v_j(t_i)·f(t_i)`.
pub fn filter_coefficient(dec: &EigenmodeDecomposition, f: &ControlModulation) -> Result<Vec<f64>> {
    dec.grid.require_same(f.grid())?;
    if f.dim() != dec.dim {
        return Err(Error::Domain(format!(
            "control has {} channels, decomposition {}",
            f.dim(),
            dec.dim
        )));
    }
    let h = f.weighted();
    Ok(dec
        .modes
        .iter()
        .map(|m| m.function.iter().zip(&h).map(|(a, b)| a * b).sum())
        .collect())
}

/// [`filter_coefficient`] for many controls in parallel.
pub fn filter_coefficients(dec: &EigenmodeDecomposition, fs: &[ControlModulation]) -> Result<Vec<Vec<f64>>> {
    fs.par_iter().map(|f| filter_coefficient(dec, f)).collect()
}

/// `Σ_j S_j v_j v_jᵀ`.
pub fn reconstruct_correlation(dec: &EigenmodeDecomposition) -> CorrelationMatrix {
    let size = dec.grid.len() * dec.dim;
    let mut g = DMatrix::zeros(size, size);
    for m in &dec.modes {
        let v = nalgebra::DVector::from_column_slice(&m.function);
        g.ger(m.eigenvalue, &v, &v, 1.0);
    }
    CorrelationMatrix::from_matrix(dec.grid, dec.dim, g, dec.boundary)
        .expect("decomposition shape matches its grid")
}

/// Bound on `‖√w (G − G_trunc) √w‖_F` from the dropped eigenvalues.
pub fn truncation_bound(dec: &EigenmodeDecomposition) -> f64 {
    dec.dropped_weight
}

/// `S(ω_k, ω_l) = (ω_k|𝔾|ω_l)` on the DFT frequencies of the grid.
#[derive(Debug, Clone)]
pub struct Bispectrum {
    /// Angular frequencies `2πk/(mΔt)`, `k = −⌊m/2⌋..`, ascending.
    pub omegas: Vec<f64>,
    pub dim: usize,
    /// Index `(k·n + a, l·n + b)`.
    pub values: DMatrix<Complex64>,
}

impl Bispectrum {
    pub fn at(&self, k: usize, l: usize) -> Complex64 {
        self.values[(k * self.dim, l * self.dim)]
    }

    /// Largest `|S(ω₁,ω₂) − S(ω₂,ω₁)*|`.
    pub fn hermiticity_defect(&self) -> f64 {
        let s = &self.values;
        let mut worst: f64 = 0.0;
        for i in 0..s.nrows() {
            for j in 0..=i {
                worst = worst.max((s[(i, j)] - s[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "omega1,omega2,channel1,channel2,re,im")?;
        let n = self.dim;
        for (k, w1) in self.omegas.iter().enumerate() {
            for (l, w2) in self.omegas.iter().enumerate() {
                for a in 0..n {
                    for b in 0..n {
                        let z = self.values[(k * n + a, l * n + b)];
                        writeln!(
                            out,
                            "{},{},{a},{b},{},{}",
                            fmt_f64(*w1),
                            fmt_f64(*w2),
                            fmt_f64(z.re),
                            fmt_f64(z.im)
                        )?;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Double transform with `(ω|t) = e^{iωt}/√(2π)` on the left and its
/// conjugate on the right, with trapezoid weights on both sides.
pub fn bispectrum_from_correlation(g: &CorrelationMatrix) -> Bispectrum {
    let grid = g.grid();
    let n = g.dim();
    let m = grid.len();
    let dt = grid.dt();
    let half = (m / 2) as i64;
    let omegas: Vec<f64> = (0..m as i64)
        .map(|k| 2.0 * std::f64::consts::PI * (k - half) as f64 / (m as f64 * dt))
        .collect();
    let norm = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let times = grid.times();
    // E[(k,a), (i,b)] = δ_ab w_i e^{iω_k t_i}/√(2π)
    let e = DMatrix::<Complex64>::from_fn(m * n, m * n, |r, q| {
        if r % n != q % n {
            return Complex64::new(0.0, 0.0);
        }
        let (k, i) = (r / n, q / n);
        Complex64::from_polar(norm * grid.weight(i), omegas[k] * times[i])
    });
    let gc = g.matrix().map(|v| Complex64::new(v, 0.0));
    let values = &e * gc * e.adjoint();
    Bispectrum { omegas, dim: n, values }
}
