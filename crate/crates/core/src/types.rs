use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

/// One realisation of the field, time-major (`values[i * n + c]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldPath {
    pub grid: TimeGrid,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FieldPath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() * dim {
            return Err(Error::Domain(format!(
                "path needs {} values, got {}",
                grid.len() * dim,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("path has non-finite values".into()));
        }
        Ok(Self { grid, dim, values })
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Channel `c` as a time series.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.iter().skip(c).step_by(self.dim).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    Time,
    Eigenmode,
    Frequency,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DephasingResult {
    pub chi: f64,
    pub coherence: f64,
    pub basis: Basis,
    pub warnings: Vec<String>,
}

/// Tolerated negative attenuation from round-off.
pub const CHI_SLACK: f64 = 1e-10;

impl DephasingResult {
    pub(crate) fn new(chi: f64, basis: Basis) -> Result<Self> {
        if !chi.is_finite() {
            return Err(Error::LinearAlgebra(format!("non-finite attenuation {chi}")));
        }
        if chi < -CHI_SLACK * (1.0 + chi.abs()) {
            return Err(Error::Indefinite {
                min_eigenvalue: chi,
                max_eigenvalue: f64::NAN,
            });
        }
        let chi = chi.max(0.0);
        Ok(Self {
            chi,
            coherence: (-chi).exp(),
            basis,
            warnings: Vec::new(),
        })
    }
}
