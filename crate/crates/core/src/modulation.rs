//! Control modulations `f(t)`: free evolution, continuous wave, π-pulse trains
//! and tabulated waveforms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControlKind {
    Free,
    Cw { omega: f64 },
    PulseTrain { pulses: Vec<f64> },
    /// Node values, time-major (`values[i * n + c]`).
    Custom { values: Vec<f64> },
}

/// The modulation `f(t) = g·s(t)` on a window `[t0, t0 + T]`, zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlModulation {
    grid: TimeGrid,
    coupling: Vec<f64>,
    t0: f64,
    duration: f64,
    kind: ControlKind,
}

fn check_window(grid: &TimeGrid, t0: f64, duration: f64) -> Result<()> {
    if !(duration >= 0.0) || !t0.is_finite() || !duration.is_finite() {
        return Err(Error::Domain(format!("invalid window t0={t0}, T={duration}")));
    }
    if !grid.contains(t0) || !grid.contains(t0 + duration) {
        return Err(Error::Domain(format!(
            "window [{t0}, {}] outside grid [{}, {}]",
            t0 + duration,
            grid.t_start(),
            grid.t_end()
        )));
    }
    Ok(())
}

pub fn control_free(grid: &TimeGrid, g: f64, t0: f64, duration: f64) -> Result<ControlModulation> {
    check_window(grid, t0, duration)?;
    Ok(ControlModulation {
        grid: *grid,
        coupling: vec![g],
        t0,
        duration,
        kind: ControlKind::Free,
    })
}

/// `f(t) = g cos(ω(t − t0))` on `[t0, t0 + T]`.
pub fn control_cw(grid: &TimeGrid, g: f64, omega: f64, t0: f64, duration: f64) -> Result<ControlModulation> {
    check_window(grid, t0, duration)?;
    if !omega.is_finite() {
        return Err(Error::Domain("CW frequency must be finite".into()));
    }
    Ok(ControlModulation {
        grid: *grid,
        coupling: vec![g],
        t0,
        duration,
        kind: ControlKind::Cw { omega },
    })
}

/// `f = ±g`, starting at `+g` and flipping sign at every pulse.
pub fn control_pulse_train(
    grid: &TimeGrid,
    g: f64,
    t0: f64,
    duration: f64,
    pulse_times: &[f64],
) -> Result<ControlModulation> {
    check_window(grid, t0, duration)?;
    let mut prev = t0;
    for &p in pulse_times {
        if !(p > prev) {
            return Err(Error::Domain(format!(
                "pulse times must be strictly increasing and after t0; got {p} after {prev}"
            )));
        }
        prev = p;
    }
    if let Some(&last) = pulse_times.last() {
        if !(last < t0 + duration) {
            return Err(Error::Domain(format!(
                "pulse at {last} not inside window ending at {}",
                t0 + duration
            )));
        }
    }
    Ok(ControlModulation {
        grid: *grid,
        coupling: vec![g],
        t0,
        duration,
        kind: ControlKind::PulseTrain {
            pulses: pulse_times.to_vec(),
        },
    })
}

/// Tabulated scalar waveform (node values) on the whole grid.
pub fn control_custom(grid: &TimeGrid, values: Vec<f64>) -> Result<ControlModulation> {
    control_custom_multi(grid, 1, values)
}

/// Tabulated `n`-channel waveform, time-major.
pub fn control_custom_multi(grid: &TimeGrid, dim: usize, values: Vec<f64>) -> Result<ControlModulation> {
    if dim == 0 || values.len() != grid.len() * dim {
        return Err(Error::Domain(format!(
            "custom control needs {} values, got {}",
            grid.len() * dim,
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("custom control has non-finite values".into()));
    }
    Ok(ControlModulation {
        grid: *grid,
        coupling: vec![1.0; dim],
        t0: grid.t_start(),
        duration: grid.span(),
        kind: ControlKind::Custom { values },
    })
}

/// CPMG pulse positions `t0 + T(j − ½)/P`.
pub fn cpmg_times(t0: f64, duration: f64, pulses: usize) -> Vec<f64> {
    (1..=pulses)
        .map(|j| t0 + duration * (j as f64 - 0.5) / pulses as f64)
        .collect()
}

/// Uhrig pulse positions `t0 + T sin²(πj/(2P+2))`.
pub fn uhrig_times(t0: f64, duration: f64, pulses: usize) -> Vec<f64> {
    (1..=pulses)
        .map(|j| {
            let s = (std::f64::consts::PI * j as f64 / (2 * pulses + 2) as f64).sin();
            t0 + duration * s * s
        })
        .collect()
}

impl ControlModulation {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn kind(&self) -> &ControlKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.coupling.len()
    }

    pub fn coupling(&self) -> &[f64] {
        &self.coupling
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn window(&self) -> (f64, f64) {
        (self.t0, self.t0 + self.duration)
    }

    /// Replaces the scalar coupling by a per-channel coupling vector.
    pub fn with_coupling(mut self, coupling: Vec<f64>) -> Result<Self> {
        if coupling.is_empty() {
            return Err(Error::Domain("coupling vector is empty".into()));
        }
        if let ControlKind::Custom { .. } = self.kind {
            if coupling.len() != self.coupling.len() {
                return Err(Error::Domain("custom control channel count is fixed".into()));
            }
        }
        self.coupling = coupling;
        Ok(self)
    }

    /// Multiplies the modulation by `s`.
    pub fn scaled(mut self, s: f64) -> Self {
        match &mut self.kind {
            ControlKind::Custom { values } => values.iter_mut().for_each(|v| *v *= s),
            _ => self.coupling.iter_mut().for_each(|g| *g *= s),
        }
        self
    }

    /// Same modulation pattern on the shorter window `[t0, t0 + T]`.
    pub fn truncated(&self, duration: f64) -> Result<Self> {
        check_window(&self.grid, self.t0, duration)?;
        let mut out = self.clone();
        out.duration = duration;
        if let ControlKind::PulseTrain { pulses } = &mut out.kind {
            pulses.retain(|&p| p < self.t0 + duration);
        }
        Ok(out)
    }

    /// Scalar profile `s(t)` with `f = g·s`, for analytic kinds.
    fn shape(&self, t: f64) -> f64 {
        let (a, b) = self.window();
        if t < a || t > b {
            return 0.0;
        }
        match &self.kind {
            ControlKind::Free => 1.0,
            ControlKind::Cw { omega } => (omega * (t - self.t0)).cos(),
            ControlKind::PulseTrain { pulses } => {
                let flips = pulses.partition_point(|&p| p <= t);
                if flips % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            ControlKind::Custom { .. } => unreachable!(),
        }
    }

    /// `∫_lo^hi s(t) dt` for analytic kinds.
    fn shape_integral(&self, lo: f64, hi: f64) -> f64 {
        let (a, b) = self.window();
        let lo = lo.max(a);
        let hi = hi.min(b);
        if hi <= lo {
            return 0.0;
        }
        match &self.kind {
            ControlKind::Free => hi - lo,
            ControlKind::Cw { omega } => {
                if omega.abs() * (hi - lo) < 1e-6 {
                    // Midpoint rule with the second-order correction.
                    let m = omega * (0.5 * (lo + hi) - self.t0);
                    let h = hi - lo;
                    h * m.cos() * (1.0 - omega * omega * h * h / 24.0)
                } else {
                    ((omega * (hi - self.t0)).sin() - (omega * (lo - self.t0)).sin()) / omega
                }
            }
            ControlKind::PulseTrain { pulses } => {
                let mut total = 0.0;
                let mut start = lo;
                let mut sign = if pulses.partition_point(|&p| p <= lo) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                };
                for &p in pulses.iter().filter(|&&p| p > lo && p < hi) {
                    total += sign * (p - start);
                    start = p;
                    sign = -sign;
                }
                total + sign * (hi - start)
            }
            ControlKind::Custom { .. } => unreachable!(),
        }
    }

    /// Pointwise value `f(t)` (length `n`). Tabulated controls interpolate
    /// linearly between nodes.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let n = self.dim();
        match &self.kind {
            ControlKind::Custom { values } => match self.grid.locate(t) {
                Ok((i, frac)) => (0..n)
                    .map(|c| (1.0 - frac) * values[i * n + c] + frac * values[(i + 1) * n + c])
                    .collect(),
                Err(_) => vec![0.0; n],
            },
            _ => {
                let s = self.shape(t);
                self.coupling.iter().map(|g| g * s).collect()
            }
        }
    }

    /// Values used in every quadrature: the average of `f` over each dual
    /// cell, so that `Σ w_i f_i = ∫ f dt` exactly. Tabulated controls return
    /// their node values (zeroed past a truncated window). Time-major.
    pub fn tabulate(&self) -> Vec<f64> {
        let n = self.dim();
        let m = self.grid.len();
        let mut out = vec![0.0; m * n];
        match &self.kind {
            ControlKind::Custom { values } => {
                let (a, b) = self.window();
                let slack = 1e-9 * self.grid.dt();
                for i in 0..m {
                    let t = self.grid.time(i);
                    if t >= a - slack && t <= b + slack {
                        out[i * n..(i + 1) * n].copy_from_slice(&values[i * n..(i + 1) * n]);
                    }
                }
            }
            _ => {
                let bounds = self.grid.cell_bounds();
                for i in 0..m {
                    let s = self.shape_integral(bounds[i], bounds[i + 1]) / self.grid.weight(i);
                    for c in 0..n {
                        out[i * n + c] = self.coupling[c] * s;
                    }
                }
            }
        }
        out
    }

    /// `h_i = w_i f_i`, the vector paired with `G` in every quadratic form.
    pub fn weighted(&self) -> Vec<f64> {
        let n = self.dim();
        let mut v = self.tabulate();
        for (q, x) in v.iter_mut().enumerate() {
            *x *= self.grid.weight(q / n);
        }
        v
    }

    /// `∫ f dt` per channel.
    pub fn integral(&self) -> Vec<f64> {
        let n = self.dim();
        let h = self.weighted();
        (0..n).map(|c| h.iter().skip(c).step_by(n).sum()).collect()
    }

    /// `Σ w_i |f_i|²`.
    pub fn weighted_norm_sq(&self) -> f64 {
        let n = self.dim();
        self.tabulate()
            .iter()
            .enumerate()
            .map(|(q, v)| self.grid.weight(q / n) * v * v)
            .sum()
    }

    pub fn label(&self) -> String {
        match &self.kind {
            ControlKind::Free => "free".into(),
            ControlKind::Cw { omega } => format!("cw(omega={omega})"),
            ControlKind::PulseTrain { pulses } => format!("pulses({})", pulses.len()),
            ControlKind::Custom { .. } => "custom".into(),
        }
    }
}
