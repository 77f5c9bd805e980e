use nalgebra::DMatrix;
use noisepath::dephasing::{attenuation_stationary, attenuation_time_basis, FrequencyGrid};
use noisepath::gridops::{discretize_kernel, kernel_to_correlation};
use noisepath::kernel::PolynomialKernel;
use noisepath::modulation::control_custom_multi;
use noisepath::{BoundaryCondition, KernelSpec, TimeGrid};

fn kernel(a: f64) -> KernelSpec {
    KernelSpec::StationaryPolynomial(PolynomialKernel {
        dim: 2,
        hermitian: vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.5]),
            DMatrix::identity(2, 2),
        ],
        antisymmetric: vec![Some(DMatrix::from_row_slice(2, 2, &[0.0, a, -a, 0.0]))],
    })
}

// A control whose two channels are shifted in time sees the sign of the
// antisymmetric coupling; the time and frequency routes must agree on it.
#[test]
fn antisymmetric_sign_agrees_between_time_and_frequency() {
    let grid = TimeGrid::new(-10.0, 10.0, 2001).unwrap();
    let mut values = Vec::with_capacity(2 * grid.len());
    for t in grid.times() {
        values.push((-(t - 0.6) * (t - 0.6)).exp());
        values.push((-(t + 0.6) * (t + 0.6)).exp());
    }
    let f = control_custom_multi(&grid, 2, values).unwrap();
    let mut chis = Vec::new();
    for a in [0.4, -0.4] {
        let spec = kernel(a);
        let g = kernel_to_correlation(&discretize_kernel(&spec, &grid).unwrap(), BoundaryCondition::DecayAtInfinity)
            .unwrap();
        let time = attenuation_time_basis(&g, &f).unwrap().chi;
        let freq = attenuation_stationary(&spec, &f, FrequencyGrid::default()).unwrap().chi;
        assert!((time - freq).abs() < 1e-3 * time, "a={a}: {time} vs {freq}");
        chis.push(time);
    }
    assert!((chis[0] - chis[1]).abs() > 1e-2 * chis[0], "{chis:?}");
}
