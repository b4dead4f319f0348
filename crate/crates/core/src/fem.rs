//! Lagrange finite elements on structured boxes and the discrete Poisson
//! solve.
//!
//! A [`FemSpace`] is a tensor product of one-dimensional [`Axis`] bases
//! (degree 1 or 2). The stiffness matrix `M_jk = ∫ ∇W_j · ∇W_k` is assembled
//! cell by cell with Gauss–Legendre quadrature that is exact for the
//! polynomial degree of the integrand, stored as CSR and solved with a
//! Jacobi-preconditioned conjugate gradient.
//!
//! DOF numbering: along an axis with `m = order * n_cells` intervals the
//! nodes are `x_i = lower + i h / order`. Periodic axes identify node `m`
//! with node `0` and number nodes `0..m`; Dirichlet axes drop both boundary
//! nodes and number nodes `1..m` as `0..m-1`. In 2D the global index is
//! `i_x + n_x * i_y`.

use std::io::{self, BufRead, Write};

use arrayvec::ArrayVec;
use rayon::prelude::*;
use thiserror::Error;

use crate::particles::SmoothingKernel;
use crate::reduce;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FemError {
    #[error("axis {axis}: need at least 2 cells, got {n_cells}")]
    TooFewCells { axis: usize, n_cells: usize },
    #[error("axis {axis}: degenerate interval [{lower}, {upper}]")]
    DegenerateDomain { axis: usize, lower: f64, upper: f64 },
    #[error("unsupported element order {0} (expected 1 or 2)")]
    UnsupportedOrder(usize),
    #[error("unsupported dimension {0} (expected 1 or 2)")]
    UnsupportedDimension(usize),
    #[error("vector length {got} does not match {expected} degrees of freedom")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("point {0:?} lies outside the Dirichlet domain")]
    OutOfDomain(Vec<f64>),
    #[error("conjugate gradient did not converge in {iterations} iterations (relative residual {relative_residual:e})")]
    NonConvergence { iterations: usize, relative_residual: f64 },
    #[error("right-hand side is not orthogonal to constants: sum {sum:e} exceeds {bound:e}")]
    IncompatibleRhs { sum: f64, bound: f64 },
    #[error("solver tolerance must be positive, got {0}")]
    InvalidTolerance(f64),
    #[error("malformed dump: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Periodic,
    DirichletZero,
}

/// One weight of a particle shape along an axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeEntry {
    pub dof: usize,
    /// `∫ S(x - X) W(x) dx`, or `W(X)` for the delta kernel.
    pub value: f64,
    /// Same with `W'` in place of `W`.
    pub grad: f64,
}

pub type AxisShape = ArrayVec<ShapeEntry, 16>;

// Gauss–Legendre rules on [0, 1].
const GAUSS2: [(f64, f64); 2] = [
    (0.211_324_865_405_187_1, 0.5),
    (0.788_675_134_594_812_9, 0.5),
];
const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_3, 5.0 / 18.0),
    (0.5, 4.0 / 9.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

fn gauss_rule(points: usize) -> &'static [(f64, f64)] {
    if points <= 2 {
        &GAUSS2
    } else {
        &GAUSS3
    }
}

/// Local Lagrange basis on the reference cell `[0, 1]`: values and
/// ξ-derivatives of the `order + 1` shape functions.
#[inline]
fn local_basis(order: usize, xi: f64) -> ([f64; 3], [f64; 3]) {
    match order {
        1 => ([1.0 - xi, xi, 0.0], [-1.0, 1.0, 0.0]),
        _ => (
            [
                (2.0 * xi - 1.0) * (xi - 1.0),
                4.0 * xi * (1.0 - xi),
                xi * (2.0 * xi - 1.0),
            ],
            [4.0 * xi - 3.0, 4.0 - 8.0 * xi, 4.0 * xi - 1.0],
        ),
    }
}

/// A uniform 1D Lagrange basis.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub lower: f64,
    pub upper: f64,
    pub n_cells: usize,
    pub order: usize,
    pub periodic: bool,
    inv_h: f64,
}

impl Axis {
    fn new(lower: f64, upper: f64, n_cells: usize, order: usize, periodic: bool) -> Self {
        Self { lower, upper, n_cells, order, periodic, inv_h: n_cells as f64 / (upper - lower) }
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn h(&self) -> f64 {
        self.length() / self.n_cells as f64
    }

    fn intervals(&self) -> usize {
        self.order * self.n_cells
    }

    pub fn n_dofs(&self) -> usize {
        if self.periodic {
            self.intervals()
        } else {
            self.intervals() - 1
        }
    }

    /// Maps a (possibly out-of-range, for periodic axes) node index to its
    /// DOF. Dirichlet boundary nodes and nodes outside the domain map to
    /// `None`.
    #[inline]
    pub fn node_dof(&self, node: isize) -> Option<usize> {
        let m = self.intervals() as isize;
        if self.periodic {
            Some(if (0..m).contains(&node) {
                node as usize
            } else {
                node.rem_euclid(m) as usize
            })
        } else if node >= 1 && node <= m - 1 {
            Some(node as usize - 1)
        } else {
            None
        }
    }

    pub fn dof_coordinate(&self, dof: usize) -> f64 {
        let node = if self.periodic { dof } else { dof + 1 };
        self.lower + node as f64 * self.h() / self.order as f64
    }

    /// `∫ W_i dx` for every DOF of the axis.
    pub fn basis_integrals(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_dofs()];
        let h = self.h();
        for c in 0..self.n_cells as isize {
            for &(g, w) in gauss_rule(self.order + 1) {
                let (vals, _) = local_basis(self.order, g);
                for a in 0..=self.order {
                    if let Some(d) = self.node_dof(self.order as isize * c + a as isize) {
                        out[d] += w * h * vals[a];
                    }
                }
            }
        }
        out
    }

    fn push_entry(shape: &mut AxisShape, dof: usize, value: f64, grad: f64) {
        if let Some(e) = shape.iter_mut().find(|e| e.dof == dof) {
            e.value += value;
            e.grad += grad;
        } else {
            shape.push(ShapeEntry { dof, value, grad });
        }
    }

    /// Point evaluation without allocation: up to `order + 1` entries.
    #[inline]
    fn point_entries(&self, x: f64) -> ([ShapeEntry; 3], usize) {
        let inv_h = self.inv_h;
        let t = (x - self.lower) * inv_h;
        // Truncation equals floor for t ≥ 0; the clamp absorbs the rest.
        let c = (t as isize).clamp(0, self.n_cells as isize - 1);
        let xi = t - c as f64;
        let empty = ShapeEntry { dof: 0, value: 0.0, grad: 0.0 };
        let mut out = [empty; 3];
        if self.order == 1 && self.periodic {
            let c = c as usize;
            let next = if c + 1 == self.n_cells { 0 } else { c + 1 };
            out[0] = ShapeEntry { dof: c, value: 1.0 - xi, grad: -inv_h };
            out[1] = ShapeEntry { dof: next, value: xi, grad: inv_h };
            return (out, 2);
        }
        let (vals, ders) = local_basis(self.order, xi);
        let base = self.order as isize * c;
        let mut n = 0;
        for a in 0..self.order + 1 {
            if let Some(d) = self.node_dof(base + a as isize) {
                out[n] = ShapeEntry { dof: d, value: vals[a], grad: ders[a] * inv_h };
                n += 1;
            }
        }
        (out, n)
    }

    /// Point evaluation of all basis functions that are nonzero at `x`.
    /// `x` must already be inside `[lower, upper]`.
    pub fn point_shape(&self, x: f64) -> AxisShape {
        let h = self.h();
        let t = (x - self.lower) / h;
        let c = (t.floor() as isize).clamp(0, self.n_cells as isize - 1);
        let xi = t - c as f64;
        let (vals, ders) = local_basis(self.order, xi);
        let mut shape = AxisShape::new();
        for a in 0..=self.order {
            if let Some(d) = self.node_dof(self.order as isize * c + a as isize) {
                Self::push_entry(&mut shape, d, vals[a], ders[a] / h);
            }
        }
        shape
    }

    /// Exact integrals of the centred B-spline kernel of the given degree and
    /// width against every overlapping basis function.
    pub fn kernel_shape(&self, x: f64, degree: usize, width: f64) -> AxisShape {
        let h = self.h();
        let half = 0.5 * (degree as f64 + 1.0) * width;
        let (s0, s1) = (x - half, x + half);
        let mut breaks: ArrayVec<f64, 24> = ArrayVec::new();
        for m in 0..=degree + 1 {
            breaks.push(s0 + m as f64 * width);
        }
        let first = ((s0 - self.lower) / h).ceil() as isize;
        let last = ((s1 - self.lower) / h).floor() as isize;
        for c in first..=last {
            let node = self.lower + c as f64 * h;
            if node > s0 && node < s1 {
                breaks.push(node);
            }
        }
        breaks.sort_by(f64::total_cmp);

        let mut shape = AxisShape::new();
        let rule = gauss_rule(3);
        for pair in breaks.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            if b - a <= 1e-14 * h {
                continue;
            }
            let c = ((0.5 * (a + b) - self.lower) / h).floor() as isize;
            if !self.periodic && (c < 0 || c >= self.n_cells as isize) {
                continue;
            }
            for &(g, w) in rule {
                let y = a + (b - a) * g;
                let wk = (b - a) * w * bspline((y - x) / width, degree) / width;
                let xi = (y - self.lower) / h - c as f64;
                let (vals, ders) = local_basis(self.order, xi);
                for la in 0..=self.order {
                    if let Some(d) = self.node_dof(self.order as isize * c + la as isize) {
                        Self::push_entry(&mut shape, d, wk * vals[la], wk * ders[la] / h);
                    }
                }
            }
        }
        shape
    }

    pub fn shape(&self, x: f64, kernel: &SmoothingKernel) -> AxisShape {
        match *kernel {
            SmoothingKernel::Delta => self.point_shape(x),
            SmoothingKernel::BSpline { degree, width } => self.kernel_shape(x, degree, width),
        }
    }

    fn wrap(&self, x: f64) -> f64 {
        if x >= self.lower && x < self.upper {
            return x;
        }
        let len = self.length();
        let w = self.lower + (x - self.lower).rem_euclid(len);
        if w >= self.upper {
            self.lower
        } else {
            w
        }
    }
}

/// Centred cardinal B-spline of degree 0..=3 with unit integral and support
/// `[-(p+1)/2, (p+1)/2]`.
pub fn bspline(y: f64, degree: usize) -> f64 {
    let a = y.abs();
    match degree {
        0 => {
            if a < 0.5 {
                1.0
            } else {
                0.0
            }
        }
        1 => (1.0 - a).max(0.0),
        2 => {
            if a <= 0.5 {
                0.75 - a * a
            } else if a < 1.5 {
                0.5 * (1.5 - a) * (1.5 - a)
            } else {
                0.0
            }
        }
        _ => {
            if a <= 1.0 {
                2.0 / 3.0 - a * a + 0.5 * a * a * a
            } else if a < 2.0 {
                let t = 2.0 - a;
                t * t * t / 6.0
            } else {
                0.0
            }
        }
    }
}

/// Finite-element space on an axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct FemSpace {
    axes: Vec<Axis>,
    bc: Boundary,
}

impl FemSpace {
    /// `bounds[i] = (a_i, b_i)`; `n_cells` either has one entry per axis or a
    /// single entry used for every axis.
    pub fn new(
        bounds: &[(f64, f64)],
        n_cells: &[usize],
        order: usize,
        bc: Boundary,
    ) -> Result<Self, FemError> {
        let dim = bounds.len();
        if !(1..=2).contains(&dim) {
            return Err(FemError::UnsupportedDimension(dim));
        }
        if !(1..=2).contains(&order) {
            return Err(FemError::UnsupportedOrder(order));
        }
        let mut axes = Vec::with_capacity(dim);
        for (i, &(lower, upper)) in bounds.iter().enumerate() {
            let n = *n_cells.get(i).or(n_cells.first()).ok_or(FemError::TooFewCells { axis: i, n_cells: 0 })?;
            if n < 2 {
                return Err(FemError::TooFewCells { axis: i, n_cells: n });
            }
            if !(upper > lower) || !lower.is_finite() || !upper.is_finite() {
                return Err(FemError::DegenerateDomain { axis: i, lower, upper });
            }
            axes.push(Axis::new(lower, upper, n, order, bc == Boundary::Periodic));
        }
        Ok(Self { axes, bc })
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[Axis] {
        &self.axes
    }

    pub fn boundary(&self) -> Boundary {
        self.bc
    }

    pub fn order(&self) -> usize {
        self.axes[0].order
    }

    pub fn n_dofs(&self) -> usize {
        self.axes.iter().map(Axis::n_dofs).product()
    }

    /// Measure of the box.
    pub fn volume(&self) -> f64 {
        self.axes.iter().map(Axis::length).product()
    }

    /// Coordinates of a DOF's node.
    pub fn dof_coordinates(&self, dof: usize) -> Vec<f64> {
        let mut rest = dof;
        self.axes
            .iter()
            .map(|ax| {
                let n = ax.n_dofs();
                let i = rest % n;
                rest /= n;
                ax.dof_coordinate(i)
            })
            .collect()
    }

    /// `∫ W_i dx` for every DOF.
    pub fn basis_integrals(&self) -> Vec<f64> {
        let per_axis: Vec<Vec<f64>> = self.axes.iter().map(Axis::basis_integrals).collect();
        match per_axis.as_slice() {
            [x] => x.clone(),
            [x, y] => y.iter().flat_map(|&wy| x.iter().map(move |&wx| wx * wy)).collect(),
            _ => unreachable!(),
        }
    }

    /// Wraps the active coordinates into the box on periodic spaces; no-op
    /// for Dirichlet spaces.
    pub fn wrap(&self, x: &mut [f64; 3]) {
        if self.bc == Boundary::Periodic {
            for (xi, ax) in x.iter_mut().zip(&self.axes) {
                *xi = ax.wrap(*xi);
            }
        }
    }

    /// Whether the active coordinates lie in the closed box.
    pub fn contains(&self, x: &[f64; 3]) -> bool {
        x.iter().zip(&self.axes).all(|(&xi, ax)| xi >= ax.lower && xi <= ax.upper)
    }

    /// Calls `f(dof, value, grad)` for every basis function that overlaps the
    /// (smoothed) particle at `x`. `x` must already be wrapped / contained.
    #[inline]
    pub fn for_each_weight<F>(&self, x: &[f64; 3], kernel: &SmoothingKernel, mut f: F)
    where
        F: FnMut(usize, f64, [f64; 2]),
    {
        if let SmoothingKernel::Delta = kernel {
            // Fast path: at most 3 entries per axis, no duplicates (n_cells ≥ 2).
            match self.axes.as_slice() {
                [ax] => {
                    let (ex, nx) = ax.point_entries(x[0]);
                    for e in &ex[..nx] {
                        f(e.dof, e.value, [e.grad, 0.0]);
                    }
                }
                [ax, ay] => {
                    let stride = ax.n_dofs();
                    let (sx, nx) = ax.point_entries(x[0]);
                    let (sy, ny) = ay.point_entries(x[1]);
                    for ey in &sy[..ny] {
                        for ex in &sx[..nx] {
                            f(ex.dof + stride * ey.dof, ex.value * ey.value, [ex.grad * ey.value, ex.value * ey.grad]);
                        }
                    }
                }
                _ => unreachable!(),
            }
            return;
        }
        match self.axes.as_slice() {
            [ax] => {
                for e in ax.shape(x[0], kernel) {
                    f(e.dof, e.value, [e.grad, 0.0]);
                }
            }
            [ax, ay] => {
                let nx = ax.n_dofs();
                let sx = ax.shape(x[0], kernel);
                let sy = ay.shape(x[1], kernel);
                for ey in &sy {
                    for ex in &sx {
                        f(
                            ex.dof + nx * ey.dof,
                            ex.value * ey.value,
                            [ex.grad * ey.value, ex.value * ey.grad],
                        );
                    }
                }
            }
            _ => unreachable!(),
        }
    }
}

/// Point evaluation for first-order spaces on the full node lattice
/// (boundary and seam nodes kept), so the inner loops need no DOF lookup.
/// Values accumulated on the lattice are folded back onto the DOFs
/// afterwards.
#[derive(Debug, Clone, Copy)]
pub struct NodeLattice {
    dim: usize,
    lower: [f64; 2],
    inv_h: [f64; 2],
    cells: [usize; 2],
    periodic: bool,
}

impl NodeLattice {
    /// `None` unless the space is first order.
    pub fn new(space: &FemSpace) -> Option<Self> {
        if space.order() != 1 {
            return None;
        }
        let mut lat = Self {
            dim: space.dim(),
            lower: [0.0; 2],
            inv_h: [1.0; 2],
            cells: [1; 2],
            periodic: space.boundary() == Boundary::Periodic,
        };
        for (i, ax) in space.axes().iter().enumerate() {
            lat.lower[i] = ax.lower;
            lat.inv_h[i] = ax.inv_h;
            lat.cells[i] = ax.n_cells;
        }
        Some(lat)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inv_h(&self) -> [f64; 2] {
        self.inv_h
    }

    /// Row stride of the lattice (nodes per row along the first axis).
    pub fn stride(&self) -> usize {
        self.cells[0] + 1
    }

    pub fn n_nodes(&self) -> usize {
        (self.cells[0] + 1) * if self.dim == 2 { self.cells[1] + 1 } else { 1 }
    }

    /// Lower-left node of the cell holding `x` and the local coordinates in it.
    #[inline(always)]
    pub fn locate(&self, x: &[f64; 3]) -> (usize, [f64; 2]) {
        let mut idx = 0;
        let mut xi = [0.0; 2];
        let mut stride = 1;
        for a in 0..self.dim {
            let t = (x[a] - self.lower[a]) * self.inv_h[a];
            let c = (t as isize).clamp(0, self.cells[a] as isize - 1) as usize;
            xi[a] = t - c as f64;
            idx += c * stride;
            stride = self.cells[a] + 1;
        }
        (idx, xi)
    }

    fn node_dof(&self, a: usize, node: usize) -> Option<usize> {
        let n = self.cells[a];
        if self.periodic {
            Some(if node == n { 0 } else { node })
        } else if node == 0 || node == n {
            None
        } else {
            Some(node - 1)
        }
    }

    fn axis_dofs(&self, a: usize) -> usize {
        if self.periodic {
            self.cells[a]
        } else {
            self.cells[a] - 1
        }
    }

    /// Adds lattice values onto the DOF vector.
    pub fn fold(&self, nodes: &[f64], out: &mut [f64]) {
        let ny = if self.dim == 2 { self.cells[1] + 1 } else { 1 };
        let sx = self.stride();
        let dx = self.axis_dofs(0);
        for j in 0..ny {
            let dj = if self.dim == 2 { self.node_dof(1, j) } else { Some(0) };
            let Some(dj) = dj else { continue };
            for i in 0..sx {
                if let Some(di) = self.node_dof(0, i) {
                    out[di + dx * dj] += nodes[i + sx * j];
                }
            }
        }
    }

    /// Spreads DOF values onto the lattice (zero on Dirichlet boundaries,
    /// copies across the periodic seam).
    pub fn expand(&self, dofs: &[f64]) -> Vec<f64> {
        let ny = if self.dim == 2 { self.cells[1] + 1 } else { 1 };
        let sx = self.stride();
        let dx = self.axis_dofs(0);
        let mut nodes = vec![0.0; self.n_nodes()];
        for j in 0..ny {
            let dj = if self.dim == 2 { self.node_dof(1, j) } else { Some(0) };
            let Some(dj) = dj else { continue };
            for i in 0..sx {
                if let Some(di) = self.node_dof(0, i) {
                    nodes[i + sx * j] = dofs[di + dx * dj];
                }
            }
        }
        nodes
    }
}

/// Like [`FemSpace::new`], but also checks `dim == bounds.len()`.
pub fn build_space(
    dim: usize,
    bounds: &[(f64, f64)],
    n_cells: &[usize],
    order: usize,
    bc: Boundary,
) -> Result<FemSpace, FemError> {
    if dim != bounds.len() {
        return Err(FemError::UnsupportedDimension(dim));
    }
    FemSpace::new(bounds, n_cells, order, bc)
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    fn from_rows(rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n = rows.len();
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for mut row in rows {
            row.sort_by_key(|&(c, _)| c);
            for (c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        Self { n, row_ptr, col_idx, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        let (s, e) = (self.row_ptr[row], self.row_ptr[row + 1]);
        match self.col_idx[s..e].binary_search(&col) {
            Ok(k) => self.values[s + k],
            Err(_) => 0.0,
        }
    }

    pub fn row(&self, row: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.col_idx[s..e].iter().copied().zip(self.values[s..e].iter().copied())
    }

    pub fn triplets(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n).flat_map(move |r| self.row(r).map(move |(c, v)| (r, c, v)))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.get(i, i)).collect()
    }

    fn row_dot(&self, row: usize, x: &[f64]) -> f64 {
        let (s, e) = (self.row_ptr[row], self.row_ptr[row + 1]);
        self.col_idx[s..e].iter().zip(&self.values[s..e]).map(|(&c, &v)| v * x[c]).sum()
    }

    /// `y = A x`. Each row is an independent ordered sum, so the result does
    /// not depend on the thread count.
    pub fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        if self.n >= 8192 {
            y.par_chunks_mut(1024).enumerate().for_each(|(ci, chunk)| {
                for (k, yi) in chunk.iter_mut().enumerate() {
                    *yi = self.row_dot(ci * 1024 + k, x);
                }
            });
        } else {
            for (i, yi) in y.iter_mut().enumerate() {
                *yi = self.row_dot(i, x);
            }
        }
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        self.matvec_into(x, &mut y);
        y
    }

    /// `xᵀ A x`.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        reduce::sum_map(self.n, |i| x[i] * self.row_dot(i, x))
    }
}

/// The FEM stiffness matrix together with the knowledge of whether it is
/// singular (periodic spaces have the constants as nullspace).
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessMatrix {
    pub matrix: CsrMatrix,
    pub singular: bool,
}

impl StiffnessMatrix {
    pub fn n(&self) -> usize {
        self.matrix.n()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.matrix.get(row, col)
    }
}

/// Element stiffness matrix on one cell, shared by all cells of the uniform
/// mesh. Local index `a + (order + 1) * b` for the node `(a, b)`.
fn element_stiffness(space: &FemSpace) -> Vec<Vec<f64>> {
    let order = space.order();
    let rule = gauss_rule(order + 1);
    let per = order + 1;
    match space.axes() {
        [ax] => {
            let h = ax.h();
            let mut k = vec![vec![0.0; per]; per];
            for &(g, w) in rule {
                let (_, d) = local_basis(order, g);
                for p in 0..per {
                    for q in 0..per {
                        k[p][q] += w * h * (d[p] / h) * (d[q] / h);
                    }
                }
            }
            k
        }
        [ax, ay] => {
            let (hx, hy) = (ax.h(), ay.h());
            let n = per * per;
            let mut k = vec![vec![0.0; n]; n];
            for &(gx, wx) in rule {
                let (vx, dx) = local_basis(order, gx);
                for &(gy, wy) in rule {
                    let (vy, dy) = local_basis(order, gy);
                    let jac = wx * wy * hx * hy;
                    for bp in 0..per {
                        for ap in 0..per {
                            let gp = [dx[ap] / hx * vy[bp], vx[ap] * dy[bp] / hy];
                            for bq in 0..per {
                                for aq in 0..per {
                                    let gq = [dx[aq] / hx * vy[bq], vx[aq] * dy[bq] / hy];
                                    k[ap + per * bp][aq + per * bq] +=
                                        jac * (gp[0] * gq[0] + gp[1] * gq[1]);
                                }
                            }
                        }
                    }
                }
            }
            k
        }
        _ => unreachable!(),
    }
}

fn add_entry(row: &mut Vec<(usize, f64)>, col: usize, v: f64) {
    if let Some(e) = row.iter_mut().find(|e| e.0 == col) {
        e.1 += v;
    } else {
        row.push((col, v));
    }
}

/// Assembles `M_jk = ∫ ∇W_j · ∇W_k dx`.
///
/// Only the upper triangle of each element matrix is evaluated; every
/// off-diagonal contribution is added to both `(j, k)` and `(k, j)` in the
/// same order, so the result is exactly symmetric.
pub fn assemble_stiffness(space: &FemSpace) -> StiffnessMatrix {
    let order = space.order();
    let per = order + 1;
    let kel = element_stiffness(space);
    let n = space.n_dofs();
    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let scatter = |rows: &mut Vec<Vec<(usize, f64)>>, dofs: &[Option<usize>]| {
        for p in 0..dofs.len() {
            for q in p..dofs.len() {
                if let (Some(dp), Some(dq)) = (dofs[p], dofs[q]) {
                    let v = kel[p][q];
                    add_entry(&mut rows[dp], dq, v);
                    if p != q {
                        add_entry(&mut rows[dq], dp, v);
                    }
                }
            }
        }
    };
    match space.axes() {
        [ax] => {
            for c in 0..ax.n_cells as isize {
                let dofs: ArrayVec<Option<usize>, 3> =
                    (0..per).map(|a| ax.node_dof(order as isize * c + a as isize)).collect();
                scatter(&mut rows, &dofs);
            }
        }
        [ax, ay] => {
            let nx = ax.n_dofs();
            for cy in 0..ay.n_cells as isize {
                for cx in 0..ax.n_cells as isize {
                    let mut dofs: ArrayVec<Option<usize>, 9> = ArrayVec::new();
                    for b in 0..per {
                        for a in 0..per {
                            let dx = ax.node_dof(order as isize * cx + a as isize);
                            let dy = ay.node_dof(order as isize * cy + b as isize);
                            dofs.push(dx.zip(dy).map(|(i, j)| i + nx * j));
                        }
                    }
                    scatter(&mut rows, &dofs);
                }
            }
        }
        _ => unreachable!(),
    }
    StiffnessMatrix { matrix: CsrMatrix::from_rows(rows), singular: space.boundary() == Boundary::Periodic }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative residual target `‖MΦ − F‖ ≤ tol ‖F‖`.
    pub tol: f64,
    /// Iteration cap; `None` means `10 N`.
    pub max_iter: Option<usize>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, max_iter: None }
    }
}

/// Potential DOFs and the achieved residual.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldCoefficients {
    pub phi: Vec<f64>,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl FieldCoefficients {
    pub fn zeros(n: usize) -> Self {
        Self { phi: vec![0.0; n], residual_norm: 0.0, iterations: 0 }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    reduce::sum_map(a.len(), |i| a[i] * b[i])
}

fn remove_mean(v: &mut [f64]) {
    let mean = reduce::sum(v) / v.len() as f64;
    for x in v.iter_mut() {
        *x -= mean;
    }
}

/// Solves `M Φ = F` with the default compatibility scale `‖F‖₁`.
pub fn solve_poisson(
    m: &StiffnessMatrix,
    rhs: &[f64],
    cfg: &SolverConfig,
) -> Result<FieldCoefficients, FemError> {
    let scale = rhs.iter().map(|v| v.abs()).sum::<f64>();
    solve_poisson_from(m, rhs, scale, None, cfg)
}

/// Solves `M Φ = F` by Jacobi-preconditioned conjugate gradients.
///
/// On singular (periodic) matrices `|Σ F_i|` must not exceed
/// `1e-10 * charge_scale`; `F` is then projected onto the mean-zero subspace,
/// iterates stay there, and the returned `Φ` has zero mean. `guess` seeds the
/// iteration.
pub fn solve_poisson_from(
    m: &StiffnessMatrix,
    rhs: &[f64],
    charge_scale: f64,
    guess: Option<&[f64]>,
    cfg: &SolverConfig,
) -> Result<FieldCoefficients, FemError> {
    let n = m.n();
    if rhs.len() != n {
        return Err(FemError::DimensionMismatch { expected: n, got: rhs.len() });
    }
    if !(cfg.tol > 0.0) {
        return Err(FemError::InvalidTolerance(cfg.tol));
    }
    let mut b = rhs.to_vec();
    if m.singular {
        let sum = reduce::sum(&b);
        let bound = 1e-10 * charge_scale.max(rhs.iter().map(|v| v.abs()).sum::<f64>());
        if sum.abs() > bound {
            return Err(FemError::IncompatibleRhs { sum, bound });
        }
        remove_mean(&mut b);
    }
    let bnorm = dot(&b, &b).sqrt();
    if bnorm == 0.0 {
        return Ok(FieldCoefficients::zeros(n));
    }
    let max_iter = cfg.max_iter.unwrap_or(10 * n);
    let target = cfg.tol * bnorm;
    let inv_diag: Vec<f64> = m.matrix.diagonal().iter().map(|&d| if d > 0.0 { 1.0 / d } else { 1.0 }).collect();

    let mut x = match guess {
        Some(g) if g.len() == n => g.to_vec(),
        _ => vec![0.0; n],
    };
    if m.singular {
        remove_mean(&mut x);
    }
    let mut ap = vec![0.0; n];
    let mut r = vec![0.0; n];
    let residual = |x: &[f64], r: &mut [f64], scratch: &mut [f64]| {
        m.matrix.matvec_into(x, scratch);
        for i in 0..n {
            r[i] = b[i] - scratch[i];
        }
    };
    residual(&x, &mut r, &mut ap);
    let precondition = |r: &[f64], z: &mut Vec<f64>| {
        z.clear();
        z.extend(r.iter().zip(&inv_diag).map(|(a, d)| a * d));
        if m.singular {
            remove_mean(z);
        }
    };
    let mut z = Vec::with_capacity(n);
    precondition(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    loop {
        let rnorm = dot(&r, &r).sqrt();
        if rnorm <= target {
            // Guard against drift between the recursive and true residual.
            residual(&x, &mut r, &mut ap);
            let true_norm = dot(&r, &r).sqrt();
            if true_norm <= target {
                break;
            }
            precondition(&r, &mut z);
            p.clone_from(&z);
            rz = dot(&r, &z);
        }
        if iterations >= max_iter {
            return Err(FemError::NonConvergence { iterations, relative_residual: rnorm / bnorm });
        }
        m.matrix.matvec_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if pap <= 0.0 {
            return Err(FemError::NonConvergence { iterations, relative_residual: rnorm / bnorm });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        precondition(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
    if m.singular {
        remove_mean(&mut x);
    }
    residual(&x, &mut r, &mut ap);
    let residual_norm = dot(&r, &r).sqrt();
    Ok(FieldCoefficients { phi: x, residual_norm, iterations })
}

/// `E_h(x) = −Σ_j φ_j ∇W_j(x)`; components beyond the space dimension are 0.
pub fn eval_field_at(space: &FemSpace, phi: &[f64], x: &[f64]) -> Result<[f64; 2], FemError> {
    if phi.len() != space.n_dofs() {
        return Err(FemError::DimensionMismatch { expected: space.n_dofs(), got: phi.len() });
    }
    let mut p = [0.0; 3];
    for (pi, xi) in p.iter_mut().zip(x.iter().take(space.dim())) {
        *pi = *xi;
    }
    if space.boundary() == Boundary::Periodic {
        space.wrap(&mut p);
    } else if !space.contains(&p) {
        return Err(FemError::OutOfDomain(x.to_vec()));
    }
    let mut e = [0.0; 2];
    space.for_each_weight(&p, &SmoothingKernel::Delta, |dof, _, g| {
        e[0] -= phi[dof] * g[0];
        e[1] -= phi[dof] * g[1];
    });
    Ok(e)
}

/// Writes `# n=<N> nnz=<nnz>` followed by one `row col value` line per
/// stored entry.
pub fn write_triplets<W: Write>(m: &CsrMatrix, mut w: W) -> io::Result<()> {
    writeln!(w, "# n={} nnz={}", m.n(), m.nnz())?;
    for (r, c, v) in m.triplets() {
        writeln!(w, "{r} {c} {v:e}")?;
    }
    Ok(())
}

/// Reads the format produced by [`write_triplets`] back into `(n, entries)`.
pub fn read_triplets<R: BufRead>(r: R) -> Result<(usize, Vec<(usize, usize, f64)>), FemError> {
    let mut n = None;
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| FemError::Parse(e.to_string()))?;
        let line = line.trim();
        if let Some(header) = line.strip_prefix('#') {
            for tok in header.split_whitespace() {
                if let Some(v) = tok.strip_prefix("n=") {
                    n = v.parse().ok();
                }
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse_err = || FemError::Parse(format!("bad triplet line `{line}`"));
        let r: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let c: usize = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let v: f64 = it.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        out.push((r, c, v));
    }
    Ok((n.ok_or_else(|| FemError::Parse("missing `# n=` header".into()))?, out))
}

/// Writes `# n=<N>` followed by one value per line.
pub fn write_vector<W: Write>(v: &[f64], mut w: W) -> io::Result<()> {
    writeln!(w, "# n={}", v.len())?;
    for x in v {
        writeln!(w, "{x:e}")?;
    }
    Ok(())
}

pub fn read_vector<R: BufRead>(r: R) -> Result<Vec<f64>, FemError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line.map_err(|e| FemError::Parse(e.to_string()))?;
        let line = line.trim();
        if line.starts_with('#') || line.is_empty() {
            continue;
        }
        out.push(line.parse().map_err(|_| FemError::Parse(format!("bad value `{line}`")))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn periodic_1d(n: usize, len: f64) -> FemSpace {
        FemSpace::new(&[(0.0, len)], &[n], 1, Boundary::Periodic).unwrap()
    }

    #[test]
    fn dof_counts() {
        let s = periodic_1d(128, 2.0 * PI / 0.5);
        assert_eq!(s.n_dofs(), 128);
        assert!((s.axes()[0].h() - 2.0 * PI / (0.5 * 128.0)).abs() < 1e-15);
        let d = FemSpace::new(&[(0.0, 1.0)], &[4], 1, Boundary::DirichletZero).unwrap();
        assert_eq!(d.n_dofs(), 3);
        let q = FemSpace::new(&[(0.0, 1.0)], &[4], 2, Boundary::DirichletZero).unwrap();
        assert_eq!(q.n_dofs(), 7);
        let p2 = FemSpace::new(&[(0.0, 1.0)], &[4], 2, Boundary::Periodic).unwrap();
        assert_eq!(p2.n_dofs(), 8);
    }

    #[test]
    fn interior_count_2d_matches_enumeration() {
        let s = FemSpace::new(&[(-12.0, 12.0), (-12.0, 12.0)], &[256], 1, Boundary::DirichletZero).unwrap();
        // Oracle: count lattice nodes strictly inside the box.
        let interior = (0..=256).filter(|&i| i > 0 && i < 256).count();
        assert_eq!(s.n_dofs(), interior * interior);
        assert_eq!(s.n_dofs(), 255 * 255);
    }

    #[test]
    fn rejects_bad_spaces() {
        assert!(matches!(
            FemSpace::new(&[(0.0, 1.0)], &[1], 1, Boundary::Periodic),
            Err(FemError::TooFewCells { .. })
        ));
        assert!(matches!(
            FemSpace::new(&[(1.0, 1.0)], &[4], 1, Boundary::Periodic),
            Err(FemError::DegenerateDomain { .. })
        ));
        assert!(matches!(
            FemSpace::new(&[(0.0, 1.0)], &[4], 3, Boundary::Periodic),
            Err(FemError::UnsupportedOrder(3))
        ));
        assert!(build_space(2, &[(0.0, 1.0)], &[4], 1, Boundary::Periodic).is_err());
    }

    #[test]
    fn partition_of_unity() {
        for bc in [Boundary::Periodic] {
            for order in [1, 2] {
                let s = FemSpace::new(&[(0.0, 3.0)], &[7], order, bc).unwrap();
                for k in 0..50 {
                    let x = 3.0 * (k as f64 + 0.31) / 50.0;
                    let sum: f64 = s.axes()[0].point_shape(x).iter().map(|e| e.value).sum();
                    let dsum: f64 = s.axes()[0].point_shape(x).iter().map(|e| e.grad).sum();
                    assert!((sum - 1.0).abs() < 1e-14, "order {order}: {sum}");
                    assert!(dsum.abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn periodic_1d_stiffness_stencil() {
        let len = 4.0 * PI;
        let s = periodic_1d(16, len);
        let h = len / 16.0;
        let m = assemble_stiffness(&s);
        for j in 0..16 {
            for k in 0..16 {
                let expected = if j == k {
                    2.0 / h
                } else if (j + 1) % 16 == k || (k + 1) % 16 == j {
                    -1.0 / h
                } else {
                    0.0
                };
                assert!((m.get(j, k) - expected).abs() < 1e-13, "({j},{k})");
            }
        }
    }

    #[test]
    fn stiffness_is_exactly_symmetric() {
        for (bounds, n, order, bc) in [
            (vec![(0.0, 1.0)], 9, 2, Boundary::Periodic),
            (vec![(0.0, 1.0), (-1.0, 2.0)], 5, 1, Boundary::Periodic),
            (vec![(0.0, 1.0), (-1.0, 2.0)], 4, 2, Boundary::DirichletZero),
        ] {
            let s = FemSpace::new(&bounds, &[n], order, bc).unwrap();
            let m = assemble_stiffness(&s);
            for (r, c, v) in m.matrix.triplets() {
                assert_eq!(v.to_bits(), m.get(c, r).to_bits());
            }
        }
    }

    /// Row sums checked against a quadrature oracle: Σ_k M_jk = ∫∇W_j·∇(Σ_k W_k) = 0.
    #[test]
    fn periodic_row_sums_vanish() {
        for order in [1, 2] {
            let s = FemSpace::new(&[(0.0, 2.0), (0.0, 1.0)], &[6, 5], order, Boundary::Periodic).unwrap();
            let m = assemble_stiffness(&s);
            let h = s.axes()[0].h().min(s.axes()[1].h());
            let ones = vec![1.0; m.n()];
            let y = m.matrix.matvec(&ones);
            assert!(y.iter().all(|v| v.abs() <= 1e-12 / h), "order {order}");
        }
    }

    /// 2D Q1 stiffness equals K⊗M + M⊗K built from the 1D matrices.
    #[test]
    fn tensor_product_formula_q1() {
        let sx = FemSpace::new(&[(0.0, 2.0)], &[5], 1, Boundary::DirichletZero).unwrap();
        let sy = FemSpace::new(&[(-1.0, 1.0)], &[4], 1, Boundary::DirichletZero).unwrap();
        let s2 = FemSpace::new(&[(0.0, 2.0), (-1.0, 1.0)], &[5, 4], 1, Boundary::DirichletZero).unwrap();
        let kx = assemble_stiffness(&sx);
        let ky = assemble_stiffness(&sy);
        // 1D Q1 mass matrix: h/6 (4 on the diagonal, 1 off).
        let mass = |n: usize, h: f64, i: usize, j: usize| {
            if i == j {
                4.0 * h / 6.0
            } else if i.abs_diff(j) == 1 {
                h / 6.0
            } else {
                let _ = n;
                0.0
            }
        };
        let (nx, ny) = (sx.n_dofs(), sy.n_dofs());
        let (hx, hy) = (sx.axes()[0].h(), sy.axes()[0].h());
        let m2 = assemble_stiffness(&s2);
        for j in 0..nx * ny {
            for k in 0..nx * ny {
                let (jx, jy, kx_, ky_) = (j % nx, j / nx, k % nx, k / nx);
                let expected = kx.get(jx, kx_) * mass(ny, hy, jy, ky_) + mass(nx, hx, jx, kx_) * ky.get(jy, ky_);
                assert!((m2.get(j, k) - expected).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let s = periodic_1d(8, 1.0);
        let m = assemble_stiffness(&s);
        let f = solve_poisson(&m, &[0.0; 8], &SolverConfig::default()).unwrap();
        assert!(f.phi.iter().all(|&v| v == 0.0));
        assert_eq!(f.residual_norm, 0.0);
    }

    #[test]
    fn incompatible_periodic_rhs_rejected() {
        let s = periodic_1d(8, 1.0);
        let m = assemble_stiffness(&s);
        let err = solve_poisson(&m, &[1.0; 8], &SolverConfig::default()).unwrap_err();
        assert!(matches!(err, FemError::IncompatibleRhs { .. }));
    }

    #[test]
    fn non_convergence_reported() {
        let s = FemSpace::new(&[(0.0, 1.0)], &[64], 1, Boundary::DirichletZero).unwrap();
        let m = assemble_stiffness(&s);
        let rhs: Vec<f64> = (0..m.n()).map(|i| ((i * 7 % 5) as f64) - 2.0).collect();
        let cfg = SolverConfig { tol: 1e-12, max_iter: Some(2) };
        assert!(matches!(solve_poisson(&m, &rhs, &cfg), Err(FemError::NonConvergence { .. })));
        assert!(matches!(
            solve_poisson(&m, &rhs, &SolverConfig { tol: 0.0, max_iter: None }),
            Err(FemError::InvalidTolerance(_))
        ));
    }

    #[test]
    fn periodic_solution_has_zero_mean_and_meets_residual() {
        let s = periodic_1d(32, 2.0 * PI);
        let m = assemble_stiffness(&s);
        let ints = s.basis_integrals();
        let rhs: Vec<f64> = (0..32).map(|j| ints[j] * (s.dof_coordinates(j)[0] * 2.0).cos()).collect();
        let cfg = SolverConfig::default();
        let out = solve_poisson(&m, &rhs, &cfg).unwrap();
        let mean: f64 = out.phi.iter().sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-14);
        let bnorm = rhs.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(out.residual_norm <= cfg.tol * bnorm);
    }

    #[test]
    fn field_of_constant_potential_vanishes() {
        let s = FemSpace::new(&[(0.0, 1.0), (0.0, 2.0)], &[4, 6], 2, Boundary::Periodic).unwrap();
        let phi = vec![3.5; s.n_dofs()];
        for x in [[0.1, 0.3], [0.99, 1.7], [1.3, -0.2]] {
            let e = eval_field_at(&s, &phi, &x).unwrap();
            assert!(e[0].abs() < 1e-12 && e[1].abs() < 1e-12);
        }
        let zero = vec![0.0; s.n_dofs()];
        assert_eq!(eval_field_at(&s, &zero, &[0.5, 0.5]).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn dirichlet_field_rejects_outside_points() {
        let s = FemSpace::new(&[(0.0, 1.0)], &[4], 1, Boundary::DirichletZero).unwrap();
        let phi = vec![0.0; 3];
        assert!(matches!(eval_field_at(&s, &phi, &[1.5]), Err(FemError::OutOfDomain(_))));
        assert!(eval_field_at(&s, &phi, &[1.0]).is_ok());
        assert!(matches!(eval_field_at(&s, &[0.0; 2], &[0.5]), Err(FemError::DimensionMismatch { .. })));
    }

    #[test]
    fn bspline_unit_mass() {
        for p in 0..=3 {
            let n = 20_000;
            let half = 0.5 * (p as f64 + 1.0);
            let dx = 2.0 * half / n as f64;
            let mass: f64 = (0..n).map(|i| bspline(-half + (i as f64 + 0.5) * dx, p) * dx).sum();
            assert!((mass - 1.0).abs() < 1e-6, "degree {p}: {mass}");
        }
    }

    #[test]
    fn basis_integrals_sum_to_volume() {
        for order in [1, 2] {
            let s = FemSpace::new(&[(0.0, 2.0), (1.0, 4.0)], &[3, 5], order, Boundary::Periodic).unwrap();
            let total: f64 = s.basis_integrals().iter().sum();
            assert!((total - 6.0).abs() < 1e-13);
        }
    }

    #[test]
    fn dumps_round_trip() {
        let s = periodic_1d(5, 1.0);
        let m = assemble_stiffness(&s);
        let mut buf = Vec::new();
        write_triplets(&m.matrix, &mut buf).unwrap();
        let (n, entries) = read_triplets(buf.as_slice()).unwrap();
        assert_eq!(n, 5);
        assert_eq!(entries.len(), m.matrix.nnz());
        for (r, c, v) in entries {
            assert_eq!(v, m.get(r, c));
        }
        let v = vec![1.5, -2.25e-7, 3.0];
        let mut buf = Vec::new();
        write_vector(&v, &mut buf).unwrap();
        assert_eq!(read_vector(buf.as_slice()).unwrap(), v);
    }
}
