//! Markov structure of local-in-time noise: the generalized state
//! `{B, Ḃ, …, B^{(N−1)}}`, its Gaussian transition law, a Chapman–Kolmogorov
//! check, and the classical field that minimises the action.
//!
//! On the grid the k-th derivative is the k-th forward difference over
//! `Δt^k`, so the state at `t` is a function of the `N` nodes starting at
//! `t`. The banded precision makes exactly these blocks Markov.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::gridops::{assemble_precision, padded_factor, Precision};
use crate::kernel::{require_local, KernelSpec};
use crate::types::FieldPath;

/// Conditioning blocks beyond this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// `B^{(k)}` for `k < components`, each an `n`-vector; `values[k * n + c]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralizedState {
    pub dim: usize,
    pub components: usize,
    pub values: Vec<f64>,
}

impl GeneralizedState {
    pub fn new(dim: usize, components: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != dim * components {
            return Err(Error::Domain(format!(
                "state needs {} values, got {}",
                dim * components,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("state has non-finite values".into()));
        }
        Ok(Self {
            dim,
            components,
            values,
        })
    }

    pub fn zeros(dim: usize, components: usize) -> Self {
        Self {
            dim,
            components,
            values: vec![0.0; dim * components],
        }
    }

    /// Scalar state `(B, Ḃ, …)`.
    pub fn scalar(values: &[f64]) -> Self {
        Self {
            dim: 1,
            components: values.len(),
            values: values.to_vec(),
        }
    }

    pub fn derivative(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Maps the `K` node values `[B_i; …; B_{i+K−1}]` (time-major) to the state
/// `[Δ^k B_i / Δt^k]_k` (derivative-major).
fn state_transform(dim: usize, components: usize, dt: f64) -> DMatrix<f64> {
    let size = dim * components;
    let mut t = DMatrix::zeros(size, size);
    for k in 0..components {
        let scale = dt.powi(k as i32);
        for j in 0..=k {
            let sign = if (k - j) % 2 == 0 { 1.0 } else { -1.0 };
            let coef = sign * binomial(k, j) / scale;
            for c in 0..dim {
                t[(k * dim + c, j * dim + c)] = coef;
            }
        }
    }
    t
}

/// Node values `B_{i+j} = Σ_k C(j,k) Δt^k B^{(k)}` reproducing a state.
fn nodes_from_state(state: &GeneralizedState, dt: f64) -> Vec<f64> {
    let (n, kk) = (state.dim, state.components);
    let mut out = vec![0.0; n * kk];
    for j in 0..kk {
        for k in 0..=j {
            let coef = binomial(j, k) * dt.powi(k as i32);
            for c in 0..n {
                out[j * n + c] += coef * state.values[k * n + c];
            }
        }
    }
    out
}

/// Conditional law of the final state given the initial one:
/// `X_f | X_0 ~ N(A X_0, C)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropagatorGaussian {
    pub t0: f64,
    pub tf: f64,
    pub dim: usize,
    pub components: usize,
    /// `A`, derivative-major on both sides.
    pub mean_map: DMatrix<f64>,
    pub covariance: DMatrix<f64>,
    /// `A X_0` for the initial state the propagator was built with.
    pub mean: Vec<f64>,
    /// Condition number of the initial-state covariance block.
    pub condition: f64,
}

impl PropagatorGaussian {
    pub fn apply(&self, initial: &GeneralizedState) -> Vec<f64> {
        (&self.mean_map * DVector::from_column_slice(&initial.values))
            .iter()
            .copied()
            .collect()
    }
}

/// Covariance of the field at selected nodes, from one padded factorisation.
struct CovarianceOracle {
    grid: TimeGrid,
    dim: usize,
    offset: usize,
    factor: crate::gridops::PaddedFactor,
}

impl CovarianceOracle {
    /// Grid with spacing `dt` on `[t0, t0 + steps·dt]` plus `extra` nodes.
    fn new(spec: &KernelSpec, t0: f64, dt: f64, steps: usize, extra: usize) -> Result<Self> {
        require_local(spec, "the Markov propagator")?;
        // Trailing nodes beyond those requested are harmless: the field is
        // padded past the window anyway.
        let nodes = (steps + extra + 1).max(4);
        let grid = TimeGrid::new(t0, t0 + (nodes - 1) as f64 * dt, nodes)?;
        let factor = padded_factor(spec, &grid, false)?;
        Ok(Self {
            grid,
            dim: spec.dim(),
            offset: factor.offset,
            factor,
        })
    }

    /// Joint covariance of node blocks `[s, s + K)` for each start `s`.
    fn blocks(&self, starts: &[usize], k: usize) -> DMatrix<f64> {
        let n = self.dim;
        let idx: Vec<usize> = starts
            .iter()
            .flat_map(|&s| (s * n..(s + k) * n).map(|q| self.offset * n + q))
            .collect();
        let cols: Vec<Vec<f64>> = idx.iter().map(|&q| self.factor.column(q)).collect();
        let m = DMatrix::from_fn(idx.len(), idx.len(), |r, c| cols[c][idx[r]]);
        (&m + m.transpose()) * 0.5
    }
}

/// Conditions block 1 on block 0 of a joint state covariance `[Σ00 Σ01; Σ10 Σ11]`.
fn condition(joint: &DMatrix<f64>, size: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, f64)> {
    let s00 = joint.view((0, 0), (size, size)).into_owned();
    let s10 = joint.view((size, 0), (size, size)).into_owned();
    let s11 = joint.view((size, size), (size, size)).into_owned();
    // Condition number of the correlation form, so units of the components
    // do not count.
    let d: Vec<f64> = (0..size).map(|i| 1.0 / s00[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    let corr = DMatrix::from_fn(size, size, |i, j| s00[(i, j)] * d[i] * d[j]);
    let (lo, hi) = crate::linalg::eigen_range(&corr);
    let cond = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(cond <= MAX_CONDITION) {
        return Err(Error::IllConditioned { condition: cond });
    }
    let chol = s00
        .cholesky()
        .ok_or(Error::IllConditioned { condition: cond })?;
    let a = chol.solve(&s10.transpose()).transpose();
    let mut c = &s11 - &a * s10.transpose();
    c = (&c + c.transpose()) * 0.5;
    Ok((a, c, cond))
}

fn steps_for(t0: f64, tf: f64, dt: f64) -> Result<usize> {
    if !(tf >= t0) || !(dt > 0.0) {
        return Err(Error::Domain(format!("need tf ≥ t0 and dt > 0, got t0={t0}, tf={tf}, dt={dt}")));
    }
    let steps = ((tf - t0) / dt).round() as usize;
    if ((steps as f64) * dt - (tf - t0)).abs() > 1e-9 * dt.max(tf - t0) {
        return Err(Error::Domain(format!("tf − t0 = {} is not a multiple of dt = {dt}", tf - t0)));
    }
    Ok(steps)
}

/// Transition law of the generalized state from `t0` to `tf` on a grid of
/// spacing `dt` (which must divide `tf − t0`), by exact Gaussian
/// conditioning on the discretised covariance with decay padding.
/// `components` defaults to the kernel order `N` (at least 1); a smaller
/// value conditions on fewer derivatives.
pub fn propagator(
    spec: &KernelSpec,
    t0: f64,
    tf: f64,
    initial: &GeneralizedState,
    dt: f64,
) -> Result<PropagatorGaussian> {
    let steps = steps_for(t0, tf, dt)?;
    let k = initial.components;
    if initial.dim != spec.dim() || k == 0 {
        return Err(Error::Domain(format!(
            "initial state has {}×{} values for a {}-channel kernel",
            initial.components,
            initial.dim,
            spec.dim()
        )));
    }
    let oracle = CovarianceOracle::new(spec, t0, dt, steps, k - 1)?;
    let dt = oracle.grid.dt();
    build_propagator(&oracle, 0, steps, k, dt, t0, tf, Some(initial))
}

#[allow(clippy::too_many_arguments)]
fn build_propagator(
    oracle: &CovarianceOracle,
    i0: usize,
    i1: usize,
    k: usize,
    dt: f64,
    t0: f64,
    tf: f64,
    initial: Option<&GeneralizedState>,
) -> Result<PropagatorGaussian> {
    let n = oracle.dim;
    let size = n * k;
    let t = state_transform(n, k, dt);
    let nodes = oracle.blocks(&[i0, i1], k);
    let mut big_t = DMatrix::zeros(2 * size, 2 * size);
    big_t.view_mut((0, 0), (size, size)).copy_from(&t);
    big_t.view_mut((size, size), (size, size)).copy_from(&t);
    let joint = &big_t * nodes * big_t.transpose();
    let (mean_map, covariance, cond) = if i0 == i1 {
        (DMatrix::identity(size, size), DMatrix::zeros(size, size), 1.0)
    } else {
        condition(&joint, size)?
    };
    let mean = match initial {
        Some(x) => (&mean_map * DVector::from_column_slice(&x.values)).iter().copied().collect(),
        None => vec![0.0; size],
    };
    Ok(PropagatorGaussian {
        t0,
        tf,
        dim: n,
        components: k,
        mean_map,
        covariance,
        mean,
        condition: cond,
    })
}

/// Deviation between the composed and direct transition laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChapmanKolmogorovReport {
    pub components: usize,
    /// Intermediate time actually used (snapped to the grid).
    pub t1: f64,
    pub dt: f64,
    /// Largest entry of the composed-minus-direct mean map, in units of the
    /// state standard deviations.
    pub mean_deviation: f64,
    /// Same for the covariance.
    pub covariance_deviation: f64,
}

impl ChapmanKolmogorovReport {
    pub fn max_deviation(&self) -> f64 {
        self.mean_deviation.max(self.covariance_deviation)
    }
}

/// Composes `t0 → t1 → tf` by marginalising the intermediate state and
/// compares with the direct `t0 → tf` law. All three come from one grid of
/// `resolution` steps across `[t0, tf]`, so discretisation is shared.
/// `components = None` uses the generalized state of order `N`; `Some(1)`
/// tests the bare field.
pub fn chapman_kolmogorov_check(
    spec: &KernelSpec,
    t0: f64,
    t1: f64,
    tf: f64,
    resolution: usize,
    components: Option<usize>,
) -> Result<ChapmanKolmogorovReport> {
    if !(t0 < t1 && t1 < tf) || resolution < 2 {
        return Err(Error::Domain(format!("need t0 < t1 < tf and resolution ≥ 2, got {t0}, {t1}, {tf}")));
    }
    let order = spec
        .effective_order()
        .ok_or_else(|| Error::InvalidModel("Chapman–Kolmogorov check needs a local-in-time kernel".into()))?;
    let k = components.unwrap_or(order.max(1));
    let dt = (tf - t0) / resolution as f64;
    let i1 = (((t1 - t0) / dt).round() as usize).clamp(1, resolution - 1);
    let oracle = CovarianceOracle::new(spec, t0, dt, resolution, k - 1)?;
    let dt = oracle.grid.dt();
    let t1 = t0 + i1 as f64 * dt;
    let first = build_propagator(&oracle, 0, i1, k, dt, t0, t1, None)?;
    let second = build_propagator(&oracle, i1, resolution, k, dt, t1, tf, None)?;
    let direct = build_propagator(&oracle, 0, resolution, k, dt, t0, tf, None)?;
    let a = &second.mean_map * &first.mean_map;
    let c = &second.mean_map * &first.covariance * second.mean_map.transpose() + &second.covariance;

    // Whiten by the marginal standard deviations of each state.
    let size = oracle.dim * k;
    let t = state_transform(oracle.dim, k, dt);
    let sd = |i: usize| -> Vec<f64> {
        let s = &t * oracle.blocks(&[i], k) * t.transpose();
        (0..size).map(|q| s[(q, q)].max(f64::MIN_POSITIVE).sqrt()).collect()
    };
    let (sd0, sdf) = (sd(0), sd(resolution));
    let mut mean_dev: f64 = 0.0;
    let mut cov_dev: f64 = 0.0;
    for r in 0..size {
        for q in 0..size {
            mean_dev = mean_dev.max((a[(r, q)] - direct.mean_map[(r, q)]).abs() * sd0[q] / sdf[r]);
            cov_dev = cov_dev.max((c[(r, q)] - direct.covariance[(r, q)]).abs() / (sdf[r] * sdf[q]));
        }
    }
    Ok(ChapmanKolmogorovReport {
        components: k,
        t1,
        dt,
        mean_deviation: mean_dev,
        covariance_deviation: cov_dev,
    })
}

/// Boundary data for [`classical_field`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FieldBoundary {
    FixedBothEnds { start: GeneralizedState, end: GeneralizedState },
    /// State fixed at `t0`, field decaying as `t → ∞`.
    FixedStartDecay { start: GeneralizedState },
    /// State fixed at `tf`, field decaying as `t → −∞`.
    FixedEndDecay { end: GeneralizedState },
}

/// Padding used for the decay branches, in correlation times.
const DECAY_PAD_TAUS: f64 = 30.0;

/// Minimiser of the discrete action `BᵀPB` with the boundary states held
/// fixed: the discrete Euler–Lagrange equation `(P B)_i = 0` on every free
/// node. States are `N` nodes starting at their time, so the returned path
/// covers `[t0, tf + (N−1)Δt]`. Decay conditions pad the free side by
/// `30τ` and pin the state there to zero.
pub fn classical_field(
    spec: &KernelSpec,
    boundary: &FieldBoundary,
    t0: f64,
    tf: f64,
    dt: f64,
) -> Result<FieldPath> {
    let local = require_local(spec, "the classical field")?;
    let n = local.dim;
    let order = spec.effective_order().unwrap_or(0);
    let k = order.max(1);
    let steps = steps_for(t0, tf, dt)?;
    let window_nodes = steps + k;
    let check = |s: &GeneralizedState| -> Result<()> {
        if s.dim != n || s.components != k {
            return Err(Error::Domain(format!(
                "boundary state must have {k} components of {n} channels"
            )));
        }
        Ok(())
    };
    let tau = spec.correlation_time_estimate(t0).unwrap_or(0.0).max(dt);
    let pad = (DECAY_PAD_TAUS * tau / dt).ceil() as usize;
    let (before, after) = match boundary {
        FieldBoundary::FixedBothEnds { start, end } => {
            check(start)?;
            check(end)?;
            (0, 0)
        }
        FieldBoundary::FixedStartDecay { start } => {
            check(start)?;
            (0, pad + k)
        }
        FieldBoundary::FixedEndDecay { end } => {
            check(end)?;
            (pad + k, 0)
        }
    };
    let total = window_nodes + before + after;
    let start_time = t0 - before as f64 * dt;
    let grid = TimeGrid::new(start_time, start_time + (total - 1) as f64 * dt, total)?;
    let dt = grid.dt();
    let mut fixed = vec![None; total * n];
    let mut pin = |node: usize, values: &[f64]| {
        for (q, v) in values.iter().enumerate() {
            fixed[node * n + q] = Some(*v);
        }
    };
    let zero = vec![0.0; n * k];
    let start_node = before;
    let end_node = before + steps;
    match boundary {
        FieldBoundary::FixedBothEnds { start, end } => {
            pin(start_node, &nodes_from_state(start, dt));
            pin(end_node, &nodes_from_state(end, dt));
        }
        FieldBoundary::FixedStartDecay { start } => {
            pin(start_node, &nodes_from_state(start, dt));
            pin(total - k, &zero);
        }
        FieldBoundary::FixedEndDecay { end } => {
            pin(0, &zero);
            pin(end_node, &nodes_from_state(end, dt));
        }
    }
    let Precision::Banded(band) = assemble_precision(spec, &grid)? else {
        unreachable!("local kernels assemble to banded form")
    };
    let removed: Vec<usize> = (0..total * n).filter(|&q| fixed[q].is_some()).collect();
    let pinned: Vec<f64> = fixed.iter().map(|v| v.unwrap_or(0.0)).collect();
    let rhs_full = band.mul_vec(&pinned);
    let (reduced, keep) = band.without(&removed);
    let mut values = pinned;
    if !keep.is_empty() {
        let chol = reduced
            .cholesky()
            .map_err(|_| Error::SingularKernel("collocation matrix is singular".into()))?;
        let mut rhs: Vec<f64> = keep.iter().map(|&q| -rhs_full[q]).collect();
        chol.solve(&mut rhs);
        for (&q, v) in keep.iter().zip(rhs) {
            values[q] = v;
        }
    }
    let lo = before * n;
    let hi = (before + window_nodes) * n;
    let window = TimeGrid::new(t0, t0 + (window_nodes - 1) as f64 * dt, window_nodes)?;
    FieldPath::new(window, n, values[lo..hi].to_vec())
}

/// `BᵀPB` with `P` the precision assembled on the part of the path inside
/// `[t0, tf]`: the quadrature of `∫Σ_k B^{(k)}·D_k B^{(k)}`. The Gaussian
/// weight of a path is `exp(−½·action)`.
pub fn classical_action(spec: &KernelSpec, path: &FieldPath, t0: f64, tf: f64) -> Result<f64> {
    require_local(spec, "the classical action")?;
    let g = &path.grid;
    let slack = 1e-9 * g.dt();
    let lo = (0..g.len()).find(|&i| g.time(i) >= t0 - slack);
    let hi = (0..g.len()).rev().find(|&i| g.time(i) <= tf + slack);
    let (Some(lo), Some(hi)) = (lo, hi) else {
        return Ok(0.0);
    };
    if hi <= lo {
        return Ok(0.0);
    }
    let n = path.dim;
    let sub = TimeGrid::new(g.time(lo), g.time(hi), hi - lo + 1)?;
    let b = &path.values[lo * n..(hi + 1) * n];
    let p = assemble_precision(spec, &sub)?;
    Ok(b.iter().zip(p.mul_vec(b)).map(|(x, y)| x * y).sum())
}

/// `max_i |(P B)_i| / w_i` over nodes at least `N` away from either end:
/// the discrete Euler–Lagrange residual in units of the continuum operator.
pub fn euler_lagrange_residual(spec: &KernelSpec, path: &FieldPath) -> Result<f64> {
    require_local(spec, "the Euler–Lagrange residual")?;
    let order = spec.effective_order().unwrap_or(0).max(1);
    let n = path.dim;
    let p = assemble_precision(spec, &path.grid)?;
    let r = p.mul_vec(&path.values);
    let m = path.grid.len();
    let mut worst: f64 = 0.0;
    for i in order..m.saturating_sub(order) {
        for c in 0..n {
            worst = worst.max(r[i * n + c].abs() / path.grid.weight(i));
        }
    }
    Ok(worst)
}
