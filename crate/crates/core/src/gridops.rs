//! Discretisation of the kernel operator and its inversion to the
//! correlation matrix.
//!
//! The quadratic form `(B|𝔻|B)` of a local-in-time kernel is approximated by
//! `BᵀPB` with
//!
//! ```text
//! P = W D_0 + Σ_k Δt (Δ^k)ᵀ D_k(t_{j+k/2}) Δ^k + antisymmetric terms,
//! ```
//!
//! where `Δ^k` is the k-th forward difference (rows `j = 0..m−k`) evaluated at
//! the staggered point `t_j + kΔt/2`, and `W` holds the trapezoid weights. The
//! kernel matrix is `M = W⁻¹ P W⁻¹`, so `(a|𝔻|b) ≈ Σ w_i a_i M_ij b_j w_j`,
//! and the correlation matrix is `G = P⁻¹`.

use std::io::Write;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::kernel::KernelSpec;
use crate::linalg::{self, BandedSym};

/// Discretised precision `P = W M W`, banded for local kernels.
#[derive(Debug, Clone)]
pub enum Precision {
    Banded(BandedSym),
    Dense(DMatrix<f64>),
}

impl Precision {
    pub fn dim(&self) -> usize {
        match self {
            Precision::Banded(b) => b.dim(),
            Precision::Dense(d) => d.nrows(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            Precision::Banded(b) => b.get(i, j),
            Precision::Dense(d) => d[(i, j)],
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Precision::Banded(b) => b.to_dense(),
            Precision::Dense(d) => d.clone(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Precision::Banded(b) => b.mul_vec(x),
            Precision::Dense(d) => (d * nalgebra::DVector::from_column_slice(x)).as_slice().to_vec(),
        }
    }
}

/// Discretised kernel operator on a grid.
#[derive(Debug, Clone)]
pub struct KernelMatrix {
    grid: TimeGrid,
    dim: usize,
    precision: Precision,
    spec: KernelSpec,
}

/// Binomial forward-difference stencil of order `k`, without the `Δt^{-k}`.
fn difference_stencil(k: usize) -> Vec<f64> {
    let mut c = vec![1.0];
    for _ in 0..k {
        let mut next = vec![0.0; c.len() + 1];
        for (l, v) in c.iter().enumerate() {
            next[l + 1] += v;
            next[l] -= v;
        }
        c = next;
    }
    c
}

/// Assembles `P` for `spec` on `grid` without checking definiteness.
pub(crate) fn assemble_precision(spec: &KernelSpec, grid: &TimeGrid) -> Result<Precision> {
    let n = spec.dim();
    let m = grid.len();
    let dt = grid.dt();
    match spec {
        KernelSpec::Dense(d) => {
            let size = m * n;
            let times = grid.times();
            let mut p = DMatrix::zeros(size, size);
            for i in 0..m {
                for j in 0..=i {
                    let block = (d.kernel)(times[i], times[j]);
                    if block.shape() != (n, n) {
                        return Err(Error::InvalidModel(format!(
                            "dense kernel returned shape {:?}, expected ({n}, {n})",
                            block.shape()
                        )));
                    }
                    let wij = grid.weight(i) * grid.weight(j);
                    for a in 0..n {
                        for b in 0..n {
                            let v = wij * block[(a, b)];
                            p[(i * n + a, j * n + b)] = v;
                            p[(j * n + b, i * n + a)] = v;
                        }
                    }
                }
                if let Some(local) = &d.local {
                    for a in 0..n {
                        for b in 0..n {
                            p[(i * n + a, i * n + b)] += grid.weight(i) * local[(a, b)];
                        }
                    }
                }
            }
            let sym = (&p + p.transpose()) * 0.5;
            Ok(Precision::Dense(sym))
        }
        _ => {
            let order = spec.order().unwrap_or(0);
            if m <= order {
                return Err(Error::Domain(format!("grid too short for order {order}")));
            }
            let hb = order * n + n - 1;
            let mut p = BandedSym::zeros(m * n, hb);
            let add_block = |p: &mut BandedSym, i: usize, j: usize, s: f64, blk: &DMatrix<f64>| {
                for a in 0..n {
                    for b in 0..n {
                        let (qi, qj) = (i * n + a, j * n + b);
                        // Each unordered off-diagonal pair is visited from both
                        // sides, so only the lower triangle is accumulated.
                        if qi >= qj {
                            p.add(qi, qj, s * blk[(a, b)]);
                        }
                    }
                }
            };
            for i in 0..m {
                let d0 = spec.hermitian_at(0, grid.time(i));
                add_block(&mut p, i, i, grid.weight(i), &d0);
            }
            for k in 1..=order {
                let e = difference_stencil(k);
                let scale = dt.powi(-(k as i32));
                let e: Vec<f64> = e.iter().map(|v| v * scale).collect();
                // Averaged (k−1)-th difference, spanning the same k+1 nodes.
                let prev = difference_stencil(k - 1);
                let pscale = dt.powi(-(k as i32 - 1));
                let mut f = vec![0.0; k + 1];
                for (l, v) in prev.iter().enumerate() {
                    f[l] += 0.5 * v * pscale;
                    f[l + 1] += 0.5 * v * pscale;
                }
                for j in 0..m - k {
                    let s = grid.t_start() + (j as f64 + 0.5 * k as f64) * dt;
                    let dk = spec.hermitian_at(k, s);
                    let ak = spec.antisymmetric_at(k, s);
                    for a in 0..=k {
                        for b in 0..=k {
                            add_block(&mut p, j + a, j + b, dt * e[a] * e[b], &dk);
                            if let Some(ak) = &ak {
                                // ½Δt (e_a f_b A + f_a e_b Aᵀ)
                                let blk = ak * (0.5 * dt * e[a] * f[b])
                                    + ak.transpose() * (0.5 * dt * f[a] * e[b]);
                                add_block(&mut p, j + a, j + b, 1.0, &blk);
                            }
                        }
                    }
                }
            }
            Ok(Precision::Banded(p))
        }
    }
}

const DENSE_EIGEN_LIMIT: usize = 1500;

fn min_eigenvalue_estimate(p: &Precision) -> f64 {
    if p.dim() <= DENSE_EIGEN_LIMIT {
        linalg::eigen_range(&p.to_dense()).0
    } else {
        f64::NAN
    }
}

/// Assembles the discretised kernel; fails when the result is not positive
/// definite.
pub fn discretize_kernel(spec: &KernelSpec, grid: &TimeGrid) -> Result<KernelMatrix> {
    let precision = assemble_precision(spec, grid)?;
    let ok = match &precision {
        Precision::Banded(b) => b.cholesky().is_ok(),
        Precision::Dense(d) => d.clone().cholesky().is_some(),
    };
    if !ok {
        return Err(Error::NotPositiveDefinite {
            min_eigenvalue: min_eigenvalue_estimate(&precision),
        });
    }
    Ok(KernelMatrix {
        grid: *grid,
        dim: spec.dim(),
        precision,
        spec: spec.clone(),
    })
}

impl KernelMatrix {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn precision(&self) -> &Precision {
        &self.precision
    }

    pub fn is_banded(&self) -> bool {
        matches!(self.precision, Precision::Banded(_))
    }

    /// Half-bandwidth in grid steps, for banded kernels.
    pub fn half_bandwidth(&self) -> Option<usize> {
        match self.precision {
            Precision::Banded(_) => Some(self.measured_bandwidth()),
            Precision::Dense(_) => None,
        }
    }

    /// Largest `|i − j|` (grid steps) with a nonzero block.
    fn measured_bandwidth(&self) -> usize {
        let n = self.dim;
        let size = self.precision.dim();
        let mut hb = 0;
        let reach = match &self.precision {
            Precision::Banded(b) => b.half_bandwidth(),
            Precision::Dense(_) => size,
        };
        for q in 0..size {
            for r in q.saturating_sub(reach)..q {
                if self.precision.get(q, r) != 0.0 {
                    hb = hb.max(q / n - r / n);
                }
            }
        }
        hb
    }

    /// `M = W⁻¹ P W⁻¹`, the kernel values `𝔻(t_i, t_j)` in the quadrature
    /// convention (local parts appear as `D/w_i` on the diagonal).
    pub fn matrix(&self) -> DMatrix<f64> {
        let n = self.dim;
        let p = self.precision.to_dense();
        DMatrix::from_fn(p.nrows(), p.ncols(), |i, j| {
            p[(i, j)] / (self.grid.weight(i / n) * self.grid.weight(j / n))
        })
    }

    /// `(a|𝔻|b)` for node vectors `a`, `b` (time-major).
    pub fn quadratic_form(&self, a: &[f64], b: &[f64]) -> f64 {
        let pb = self.precision.mul_vec(b);
        a.iter().zip(&pb).map(|(x, y)| x * y).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryCondition {
    /// `G → 0` far outside the window, realised by padding the grid.
    DecayAtInfinity,
    /// Field pinned to zero at the first grid point, decay after the window.
    DirichletAtQuench,
    /// Free ends at the window edges (no padding).
    Natural,
}

/// How the window was extended to realise the boundary condition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PaddingInfo {
    pub before: f64,
    pub after: f64,
    /// Largest correlation coefficient between a window edge and the outer
    /// tenth of the padding.
    pub edge_correlation: f64,
    pub converged: bool,
}

impl PaddingInfo {
    fn none() -> Self {
        Self {
            before: 0.0,
            after: 0.0,
            edge_correlation: 0.0,
            converged: true,
        }
    }
}

/// Discretised `𝔾(t_i, t_j)` blocks on the window grid.
#[derive(Debug, Clone)]
pub struct CorrelationMatrix {
    grid: TimeGrid,
    dim: usize,
    matrix: DMatrix<f64>,
    boundary: BoundaryCondition,
    padding: PaddingInfo,
}

pub const PADDING_TOLERANCE: f64 = 1e-6;
const PAD_GROWTH: f64 = 1.5;
const MAX_PAD_ROUNDS: usize = 10;
const MAX_PADDED_POINTS: usize = 400_000;

impl CorrelationMatrix {
    /// Wraps an explicit matrix (time-major blocks).
    pub fn from_matrix(
        grid: TimeGrid,
        dim: usize,
        matrix: DMatrix<f64>,
        boundary: BoundaryCondition,
    ) -> Result<Self> {
        if matrix.nrows() != grid.len() * dim || matrix.ncols() != grid.len() * dim {
            return Err(Error::Domain(format!(
                "correlation matrix must be {0}×{0}",
                grid.len() * dim
            )));
        }
        Ok(Self {
            grid,
            dim,
            matrix,
            boundary,
            padding: PaddingInfo::none(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn boundary(&self) -> BoundaryCondition {
        self.boundary
    }

    pub fn padding(&self) -> &PaddingInfo {
        &self.padding
    }

    pub fn block(&self, i: usize, j: usize) -> DMatrix<f64> {
        let n = self.dim;
        self.matrix.view((i * n, j * n), (n, n)).into_owned()
    }

    /// Interpolated block `𝔾(t, t′)`, exact at nodes.
    pub fn correlation_at(&self, t: f64, t_prime: f64) -> Result<DMatrix<f64>> {
        let (i, a) = self.grid.locate(t)?;
        let (j, b) = self.grid.locate(t_prime)?;
        let mut out = DMatrix::zeros(self.dim, self.dim);
        for (di, wi) in [(0, 1.0 - a), (1, a)] {
            for (dj, wj) in [(0, 1.0 - b), (1, b)] {
                let w = wi * wj;
                if w != 0.0 {
                    out += self.block(i + di, j + dj) * w;
                }
            }
        }
        Ok(out)
    }

    /// `½ hᵀ G h` with `h = w∘f` already formed.
    pub(crate) fn half_form(&self, h: &[f64]) -> f64 {
        let v = nalgebra::DVector::from_column_slice(h);
        0.5 * v.dot(&(&self.matrix * &v))
    }

    /// `√w G √w`, the operator in the orthonormal quadrature basis.
    pub fn weighted_matrix(&self) -> DMatrix<f64> {
        let n = self.dim;
        let s: Vec<f64> = (0..self.matrix.nrows())
            .map(|q| self.grid.weight(q / n).sqrt())
            .collect();
        DMatrix::from_fn(self.matrix.nrows(), self.matrix.ncols(), |i, j| {
            s[i] * self.matrix[(i, j)] * s[j]
        })
    }

    /// CSV dump: header `t_i,c_i,<t_j:c_j>...`, one row per (node, channel).
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let n = self.dim;
        let size = self.matrix.nrows();
        write!(out, "t_i,channel")?;
        for q in 0..size {
            write!(out, ",{}", crate::io::fmt_f64(self.grid.time(q / n)))?;
        }
        writeln!(out)?;
        for r in 0..size {
            write!(out, "{},{}", crate::io::fmt_f64(self.grid.time(r / n)), r % n)?;
            for q in 0..size {
                write!(out, ",{}", crate::io::fmt_f64(self.matrix[(r, q)]))?;
            }
            writeln!(out)?;
        }
        Ok(())
    }
}

/// Inverts the kernel with the requested boundary condition.
pub fn kernel_to_correlation(k: &KernelMatrix, bc: BoundaryCondition) -> Result<CorrelationMatrix> {
    let n = k.dim;
    let m = k.grid.len();
    match bc {
        BoundaryCondition::Natural => {
            let g = invert_columns(&k.precision, &[], 0, m * n)?;
            Ok(CorrelationMatrix {
                grid: k.grid,
                dim: n,
                matrix: g,
                boundary: bc,
                padding: PaddingInfo::none(),
            })
        }
        BoundaryCondition::DecayAtInfinity | BoundaryCondition::DirichletAtQuench => {
            let pin_start = bc == BoundaryCondition::DirichletAtQuench;
            if matches!(k.spec, KernelSpec::Dense(_)) {
                // Dense kernels define 𝔾 on the tabulated window only.
                return dense_window(k, bc, pin_start);
            }
            padded_inverse(k, bc, pin_start)
        }
    }
}

fn dense_window(k: &KernelMatrix, bc: BoundaryCondition, pin_start: bool) -> Result<CorrelationMatrix> {
    let n = k.dim;
    let m = k.grid.len();
    let removed: Vec<usize> = if pin_start { (0..n).collect() } else { Vec::new() };
    let g = invert_columns(&k.precision, &removed, 0, m * n)?;
    Ok(CorrelationMatrix {
        grid: k.grid,
        dim: n,
        matrix: g,
        boundary: bc,
        padding: PaddingInfo::none(),
    })
}

/// Columns `[lo, hi)` of `P⁻¹` restricted to rows `[lo, hi)`, with the rows
/// and columns in `removed` pinned to zero.
fn invert_columns(p: &Precision, removed: &[usize], lo: usize, hi: usize) -> Result<DMatrix<f64>> {
    let size = hi - lo;
    let mut out = DMatrix::zeros(size, size);
    match p {
        Precision::Banded(b) => {
            let (reduced, keep) = b.without(removed);
            let chol = reduced
                .cholesky()
                .map_err(|_| Error::SingularKernel("banded Cholesky failed".into()))?;
            let columns: Vec<(usize, usize)> = keep
                .iter()
                .enumerate()
                .filter(|(_, &q)| q >= lo && q < hi)
                .map(|(a, &q)| (a, q))
                .collect();
            use rayon::prelude::*;
            let cols: Vec<(usize, Vec<f64>)> = columns
                .par_iter()
                .map(|&(a, q)| (q, chol.inverse_column(a)))
                .collect();
            for (q, col) in cols {
                for (a, &r) in keep.iter().enumerate() {
                    if r >= lo && r < hi {
                        out[(r - lo, q - lo)] = col[a];
                    }
                }
            }
        }
        Precision::Dense(d) => {
            let keep: Vec<usize> = (0..d.nrows()).filter(|q| removed.binary_search(q).is_err()).collect();
            let sub = DMatrix::from_fn(keep.len(), keep.len(), |i, j| d[(keep[i], keep[j])]);
            let inv = sub
                .cholesky()
                .ok_or_else(|| Error::SingularKernel("dense Cholesky failed".into()))?
                .inverse();
            for (a, &r) in keep.iter().enumerate() {
                for (b, &q) in keep.iter().enumerate() {
                    if r >= lo && r < hi && q >= lo && q < hi {
                        out[(r - lo, q - lo)] = inv[(a, b)];
                    }
                }
            }
        }
    }
    // Remove round-off asymmetry.
    let sym = (&out + out.transpose()) * 0.5;
    Ok(sym)
}

/// Padded grid realising a boundary condition, with its factorised
/// precision. Rows of the pinned first node are removed before factorising.
#[derive(Debug)]
pub(crate) struct PaddedFactor {
    /// Index of the window's first node in the padded grid.
    pub offset: usize,
    /// Number of leading scalar unknowns pinned to zero.
    pub pinned: usize,
    pub chol: linalg::BandedCholesky,
    pub info: PaddingInfo,
}

impl PaddedFactor {
    /// Column of the padded `G` for scalar index `q` (zeros on pinned rows),
    /// indexed like the padded grid.
    pub fn column(&self, q: usize) -> Vec<f64> {
        let total = self.chol.dim() + self.pinned;
        let mut out = vec![0.0; total];
        if q >= self.pinned {
            let col = self.chol.inverse_column(q - self.pinned);
            out[self.pinned..].copy_from_slice(&col);
        }
        out
    }
}

/// Grows the padding around the window until the correlation between each
/// window edge and the outer tenth of the padding falls below
/// [`PADDING_TOLERANCE`].
pub(crate) fn padded_factor(spec: &KernelSpec, grid: &TimeGrid, pin_start: bool) -> Result<PaddedFactor> {
    let n = spec.dim();
    let m = grid.len();
    let tau = |t: f64| spec.correlation_time_estimate(t).unwrap_or(grid.span());
    let mut before = if pin_start { 0.0 } else { 5.0 * tau(grid.t_start()).max(grid.dt()) };
    let mut after = 5.0 * tau(grid.t_end()).max(grid.dt());
    let mut last: Option<PaddedFactor> = None;
    for _ in 0..MAX_PAD_ROUNDS {
        let (ext, offset) = grid.extended(before, after);
        if ext.len() > MAX_PADDED_POINTS {
            break;
        }
        let Precision::Banded(band) = assemble_precision(spec, &ext)? else {
            unreachable!("local kernels assemble to banded form")
        };
        let pinned = if pin_start { n } else { 0 };
        let removed: Vec<usize> = (0..pinned).collect();
        let (reduced, _) = band.without(&removed);
        let chol = reduced
            .cholesky()
            .map_err(|_| Error::SingularKernel("banded Cholesky failed on padded grid".into()))?;
        let mut factor = PaddedFactor {
            offset,
            pinned,
            chol,
            info: PaddingInfo::none(),
        };
        let ext_m = ext.len();
        let pad_after = ext_m - offset - m;
        let mut edge: f64 = 0.0;
        let mut check = |window_node: usize, outer: std::ops::Range<usize>, outer_node: usize| {
            for b in 0..n {
                let qo = outer_node * n + b;
                let var_o = factor.column(qo)[qo];
                for a in 0..n {
                    let qw = window_node * n + a;
                    let col = factor.column(qw);
                    let var_w = col[qw];
                    if !(var_w > 0.0 && var_o > 0.0) {
                        continue;
                    }
                    for node in outer.clone() {
                        edge = edge.max(col[node * n + b].abs() / (var_w * var_o).sqrt());
                    }
                }
            }
        };
        if pad_after > 0 {
            let tenth = (pad_after / 10).max(1);
            check(offset + m - 1, ext_m - tenth..ext_m, ext_m - 1);
        }
        if offset > 0 {
            let tenth = (offset / 10).max(1);
            check(offset, 0..tenth, 0);
        }
        factor.info = PaddingInfo {
            before: offset as f64 * grid.dt(),
            after: pad_after as f64 * grid.dt(),
            edge_correlation: edge,
            converged: edge < PADDING_TOLERANCE,
        };
        let done = factor.info.converged;
        last = Some(factor);
        if done {
            break;
        }
        if !pin_start {
            before *= PAD_GROWTH;
        }
        after *= PAD_GROWTH;
    }
    last.ok_or_else(|| Error::SingularKernel("padded grid exceeds size limit".into()))
}

fn padded_inverse(k: &KernelMatrix, bc: BoundaryCondition, pin_start: bool) -> Result<CorrelationMatrix> {
    let n = k.dim;
    let m = k.grid.len();
    let factor = padded_factor(&k.spec, &k.grid, pin_start)?;
    let lo = factor.offset * n;
    use rayon::prelude::*;
    let cols: Vec<Vec<f64>> = (lo..lo + m * n).into_par_iter().map(|q| factor.column(q)).collect();
    let mut g = DMatrix::zeros(m * n, m * n);
    for (c, col) in cols.iter().enumerate() {
        for r in 0..m * n {
            g[(r, c)] = col[lo + r];
        }
    }
    let matrix = (&g + g.transpose()) * 0.5;
    Ok(CorrelationMatrix {
        grid: k.grid,
        dim: n,
        matrix,
        boundary: bc,
        padding: factor.info,
    })
}
