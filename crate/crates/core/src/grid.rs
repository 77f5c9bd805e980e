//! Uniform time grids with trapezoid quadrature.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform grid `t_i = t_start + i·Δt`, `i = 0..n_points`.
///
/// Every inner product `(a|b)` in the crate is `Σ w_i a(t_i)·b(t_i)` with the
/// trapezoid weights returned by [`TimeGrid::weight`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_start: f64,
    t_end: f64,
    n_points: usize,
}

impl TimeGrid {
    pub const MIN_POINTS: usize = 4;

    pub fn new(t_start: f64, t_end: f64, n_points: usize) -> Result<Self> {
        if !(t_start.is_finite() && t_end.is_finite()) {
            return Err(Error::Domain("grid bounds must be finite".into()));
        }
        if n_points < Self::MIN_POINTS {
            return Err(Error::Domain(format!(
                "grid needs at least {} points, got {n_points}",
                Self::MIN_POINTS
            )));
        }
        if t_end <= t_start {
            return Err(Error::Domain(format!(
                "grid end {t_end} must exceed start {t_start}"
            )));
        }
        Ok(Self {
            t_start,
            t_end,
            n_points,
        })
    }

    /// Grid on `[t_start, t_end]` whose spacing is as close as possible to,
    /// and never larger than, `dt`.
    pub fn with_spacing(t_start: f64, t_end: f64, dt: f64) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Domain(format!("spacing must be positive, got {dt}")));
        }
        let intervals = ((t_end - t_start) / dt - 1e-9).ceil().max(1.0) as usize;
        Self::new(t_start, t_end, intervals + 1)
    }

    pub fn t_start(&self) -> f64 {
        self.t_start
    }

    pub fn t_end(&self) -> f64 {
        self.t_end
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn span(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn dt(&self) -> f64 {
        self.span() / (self.n_points - 1) as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i + 1 == self.n_points {
            self.t_end
        } else {
            self.t_start + i as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.time(i)).collect()
    }

    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n_points {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.weight(i)).collect()
    }

    /// Boundaries of the dual cells: cell `i` is `[b_i, b_{i+1}]` and has
    /// length `w_i`.
    pub fn cell_bounds(&self) -> Vec<f64> {
        let dt = self.dt();
        let mut b = Vec::with_capacity(self.n_points + 1);
        b.push(self.t_start);
        for i in 0..self.n_points - 1 {
            b.push(self.t_start + (i as f64 + 0.5) * dt);
        }
        b.push(self.t_end);
        b
    }

    pub fn contains(&self, t: f64) -> bool {
        let slack = 1e-9 * self.dt();
        t >= self.t_start - slack && t <= self.t_end + slack
    }

    /// Index of the node nearest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let x = ((t - self.t_start) / self.dt()).round();
        x.clamp(0.0, (self.n_points - 1) as f64) as usize
    }

    /// Locates `t` as `(i, frac)` with `t = t_i + frac·Δt`, `frac ∈ [0, 1]`.
    pub fn locate(&self, t: f64) -> Result<(usize, f64)> {
        if !self.contains(t) {
            return Err(Error::Domain(format!(
                "time {t} outside grid [{}, {}]",
                self.t_start, self.t_end
            )));
        }
        let mut x = ((t - self.t_start) / self.dt()).clamp(0.0, (self.n_points - 1) as f64);
        // Snap round-off so that nodes are located exactly.
        if (x - x.round()).abs() < 1e-9 {
            x = x.round();
        }
        let i = (x.floor() as usize).min(self.n_points - 2);
        Ok((i, x - i as f64))
    }

    /// Extends the grid by at least `before`/`after` on each side while
    /// keeping the spacing and the original nodes. Returns the new grid and the
    /// index offset of the original first node.
    pub fn extended(&self, before: f64, after: f64) -> (TimeGrid, usize) {
        let dt = self.dt();
        let n_before = (before.max(0.0) / dt).ceil() as usize;
        let n_after = (after.max(0.0) / dt).ceil() as usize;
        let grid = TimeGrid {
            t_start: self.t_start - n_before as f64 * dt,
            t_end: self.t_end + n_after as f64 * dt,
            n_points: self.n_points + n_before + n_after,
        };
        (grid, n_before)
    }

    pub fn same_as(&self, other: &TimeGrid) -> bool {
        self.n_points == other.n_points
            && (self.t_start - other.t_start).abs() <= 1e-12 * (1.0 + self.t_start.abs())
            && (self.t_end - other.t_end).abs() <= 1e-12 * (1.0 + self.t_end.abs())
    }

    pub(crate) fn require_same(&self, other: &TimeGrid) -> Result<()> {
        if self.same_as(other) {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "grid mismatch: [{}, {}]×{} vs [{}, {}]×{}",
                self.t_start, self.t_end, self.n_points, other.t_start, other.t_end, other.n_points
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_grids() {
        assert!(TimeGrid::new(0.0, 1.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 10).is_err());
        assert!(TimeGrid::new(0.0, f64::NAN, 10).is_err());
    }

    #[test]
    fn trapezoid_weights() {
        let g = TimeGrid::new(0.0, 2.0, 5).unwrap();
        assert_eq!(g.dt(), 0.5);
        assert_eq!(g.weights(), vec![0.25, 0.5, 0.5, 0.5, 0.25]);
        let total: f64 = g.weights().iter().sum();
        assert!((total - g.span()).abs() < 1e-15);
        let b = g.cell_bounds();
        for i in 0..g.len() {
            assert!((b[i + 1] - b[i] - g.weight(i)).abs() < 1e-15);
        }
    }

    #[test]
    fn times_strictly_increasing() {
        let g = TimeGrid::new(-1.0, 3.0, 101).unwrap();
        let t = g.times();
        assert!(t.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(t[100], 3.0);
    }

    #[test]
    fn extension_keeps_nodes() {
        let g = TimeGrid::new(0.0, 1.0, 11).unwrap();
        let (e, off) = g.extended(0.35, 0.2);
        assert_eq!(off, 4);
        assert!((e.dt() - g.dt()).abs() < 1e-14);
        assert!((e.time(off) - 0.0).abs() < 1e-12);
        assert!((e.time(off + 10) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn locate_interior_and_edges() {
        let g = TimeGrid::new(0.0, 1.0, 11).unwrap();
        let (i, f) = g.locate(0.25).unwrap();
        assert_eq!(i, 2);
        assert!((f - 0.5).abs() < 1e-12);
        assert_eq!(g.locate(1.0).unwrap(), (9, 1.0));
        assert!(g.locate(1.5).is_err());
    }
}
