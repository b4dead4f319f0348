//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use hampic::fem::{assemble_stiffness, solve_poisson, Boundary, FemSpace, SolverConfig};
use hampic::particles::SmoothingKernel;

const GAUSS3: [(f64, f64); 3] = [
    (0.112_701_665_379_258_3, 5.0 / 18.0),
    (0.5, 4.0 / 9.0),
    (0.887_298_334_620_741_7, 5.0 / 18.0),
];

/// Tensor Gauss points `(x, weight)` over every cell of the space.
fn quadrature(space: &FemSpace) -> Vec<([f64; 3], f64)> {
    let axes = space.axes();
    let per_axis: Vec<Vec<(f64, f64)>> = axes
        .iter()
        .map(|ax| {
            let h = ax.h();
            let a = ax.lower;
            (0..ax.n_cells).flat_map(|c| GAUSS3.iter().map(move |&(xi, w)| (a + (c as f64 + xi) * h, w * h))).collect()
        })
        .collect();
    match per_axis.as_slice() {
        [px] => px.iter().map(|&(x, w)| ([x, 0.0, 0.0], w)).collect(),
        [px, py] => px.iter().flat_map(|&(x, wx)| py.iter().map(move |&(y, wy)| ([x, y, 0.0], wx * wy))).collect(),
        _ => unreachable!(),
    }
}

/// Solves `−Δφ_h = ρ` with the load assembled by quadrature and returns the
/// L² distance to `exact`.
pub fn fem_l2_error(
    bounds: &[(f64, f64)],
    cells: usize,
    order: usize,
    bc: Boundary,
    rho: impl Fn(&[f64; 3]) -> f64,
    exact: impl Fn(&[f64; 3]) -> f64,
) -> f64 {
    let space = FemSpace::new(bounds, &[cells], order, bc).unwrap();
    let quad = quadrature(&space);
    let mut load = vec![0.0; space.n_dofs()];
    for (x, w) in &quad {
        let r = rho(x);
        space.for_each_weight(x, &SmoothingKernel::Delta, |dof, v, _| load[dof] += w * r * v);
    }
    let m = assemble_stiffness(&space);
    let cfg = SolverConfig { tol: 1e-12, max_iter: None };
    let phi = solve_poisson(&m, &load, &cfg).unwrap().phi;
    let mut err = 0.0;
    for (x, w) in &quad {
        let mut u = 0.0;
        space.for_each_weight(x, &SmoothingKernel::Delta, |dof, v, _| u += phi[dof] * v);
        err += w * (u - exact(x)).powi(2);
    }
    err.sqrt()
}

/// Least-squares slope of `log e` against `log h`.
pub fn loglog_slope(h: &[f64], e: &[f64]) -> f64 {
    let x: Vec<f64> = h.iter().map(|v| v.ln()).collect();
    let y: Vec<f64> = e.iter().map(|v| v.ln()).collect();
    hampic::diagnostics::linear_fit(&x, &y).slope
}
