//! Fixtures shared by the benchmarks.

use noisepath::gridops::{discretize_kernel, kernel_to_correlation};
use noisepath::{BoundaryCondition, CorrelationMatrix, KernelSpec, TimeGrid};

/// Quenched Ornstein–Uhlenbeck correlation (`D0 = D1 = 1`) on `[0, 20]`.
pub fn quenched_ou(n_points: usize) -> CorrelationMatrix {
    let grid = TimeGrid::new(0.0, 20.0, n_points).expect("valid grid");
    let k = discretize_kernel(&KernelSpec::ornstein_uhlenbeck(1.0, 1.0), &grid).expect("local kernel");
    kernel_to_correlation(&k, BoundaryCondition::DirichletAtQuench).expect("positive kernel")
}
