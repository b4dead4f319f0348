//! The discrete Poisson matrix, its bracket, and numerical checks of the
//! Jacobi identity and of the Poisson-map property of the splitting steps.
//!
//! Phase-space layout: `Z = (X_1, …, X_N, V_1, …, V_N)` with 3 components
//! per marker, so `Z ∈ ℝ^{6N}`; index `3s + c` is `X_s^c` and `3N + 3s + c`
//! is `V_s^c`.
//!
//! ```text
//! K(X) = [[ 0,     κ_x N⁻¹        ],
//!         [ −κ_x N⁻¹, κ_B N⁻¹ B̂(X) ]]
//! ```
//!
//! where `N = Ω ⊗ I₃` and `B̂(X) = blockdiag(B̂₀(X_s))`. With unit scales this
//! is the bracket of the unscaled system.

use std::fmt::Write as _;

use thiserror::Error;

use crate::integrators::{advance, IntegratorError, PicState, PicSystem, SplittingKind};
use crate::particles::ParticleEnsemble;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BracketError {
    #[error("gradient length {got} does not match phase-space dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("index {index} out of range for phase-space dimension {size}")]
    IndexOutOfRange { index: usize, size: usize },
    #[error("the scaled bracket needs κ_E = κ_x, got κ_E = {scale_e}, κ_x = {scale_x}")]
    NonHamiltonianScaling { scale_e: f64, scale_x: f64 },
    #[error(transparent)]
    Integrator(#[from] IntegratorError),
}

/// `B̂` with `B̂ v = v × B`.
pub fn hat_matrix(b: [f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, b[2], -b[1]], [-b[2], 0.0, b[0]], [b[1], -b[0], 0.0]]
}

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn mul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut out = Self::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out.data[i * n + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum()).collect()
    }

    /// `max |a_ij − b_ij|`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Dense Poisson matrix over `ℝ^{6N}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoissonMatrix {
    n_particles: usize,
    matrix: DenseMatrix,
}

impl PoissonMatrix {
    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn size(&self) -> usize {
        6 * self.n_particles
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix.get(i, j)
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.matrix
    }

    /// `max |K_ij + K_ji|`.
    pub fn antisymmetry_defect(&self) -> f64 {
        self.matrix.max_abs_diff(&self.matrix.transpose().scaled(-1.0))
    }
}

impl DenseMatrix {
    fn scaled(mut self, c: f64) -> Self {
        self.data.iter_mut().for_each(|v| *v *= c);
        self
    }
}

/// Builds `K` for markers at `positions` with `weights` in the field `b0`,
/// with unit scales.
pub fn build_poisson_matrix<F>(positions: &[[f64; 3]], weights: &[f64], b0: F) -> PoissonMatrix
where
    F: Fn([f64; 3]) -> [f64; 3],
{
    build_scaled_poisson_matrix(positions, weights, b0, 1.0, 1.0)
}

pub fn build_scaled_poisson_matrix<F>(
    positions: &[[f64; 3]],
    weights: &[f64],
    b0: F,
    scale_x: f64,
    scale_b: f64,
) -> PoissonMatrix
where
    F: Fn([f64; 3]) -> [f64; 3],
{
    let np = positions.len();
    let off = 3 * np;
    let mut k = DenseMatrix::zeros(6 * np);
    for (s, (x, &w)) in positions.iter().zip(weights).enumerate() {
        let inv = 1.0 / w;
        for c in 0..3 {
            k.set(3 * s + c, off + 3 * s + c, scale_x * inv);
            k.set(off + 3 * s + c, 3 * s + c, -scale_x * inv);
        }
        let hat = hat_matrix(b0(*x));
        for a in 0..3 {
            for b in 0..3 {
                k.set(off + 3 * s + a, off + 3 * s + b, scale_b * inv * hat[a][b]);
            }
        }
    }
    PoissonMatrix { n_particles: np, matrix: k }
}

/// `{F, G} = ∇Fᵀ K ∇G`.
pub fn discrete_bracket(grad_f: &[f64], grad_g: &[f64], k: &PoissonMatrix) -> Result<f64, BracketError> {
    let n = k.size();
    for g in [grad_f, grad_g] {
        if g.len() != n {
            return Err(BracketError::DimensionMismatch { expected: n, got: g.len() });
        }
    }
    let kg = k.matrix.mul_vec(grad_g);
    Ok(grad_f.iter().zip(&kg).map(|(a, b)| a * b).sum())
}

/// Phase-space vector of an ensemble in the layout of this module.
pub fn phase_vector(positions: &[[f64; 3]], velocities: &[[f64; 3]]) -> Vec<f64> {
    positions.iter().chain(velocities).flat_map(|p| p.iter().copied()).collect()
}

/// Classification of an index triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TripleClass {
    /// The residual must vanish for any field.
    ZeroExpected,
    /// Three distinct velocity components of one marker: the residual equals
    /// `±(∇·B₀)(X_s) / ω_s²`.
    DivDriven { particle: usize },
}

/// Finite-difference evaluator of the Jacobi cyclic sum
/// `Σ_l (∂_l K_ij K_lk + ∂_l K_jk K_li + ∂_l K_ki K_lj)`.
///
/// `K` depends on `X` only, so `l` runs over the position coordinates
/// (the velocity derivatives vanish identically).
pub struct JacobiVerifier<'a> {
    positions: Vec<[f64; 3]>,
    weights: Vec<f64>,
    field: &'a dyn Fn([f64; 3]) -> [f64; 3],
    /// Relative FD step: `δ_l = delta · max(1, |X^l|)`.
    delta: f64,
    /// Combine steps `δ` and `δ/2` by Richardson extrapolation.
    richardson: bool,
    k: PoissonMatrix,
    dk: Vec<DenseMatrix>,
}

impl<'a> JacobiVerifier<'a> {
    pub fn new(ensemble: &ParticleEnsemble, field: &'a dyn Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self::with_options(ensemble.positions(), ensemble.weights(), field, 1e-5, false)
    }

    pub fn with_options(
        positions: &[[f64; 3]],
        weights: &[f64],
        field: &'a dyn Fn([f64; 3]) -> [f64; 3],
        delta: f64,
        richardson: bool,
    ) -> Self {
        let k = build_poisson_matrix(positions, weights, field);
        let mut v = Self {
            positions: positions.to_vec(),
            weights: weights.to_vec(),
            field,
            delta,
            richardson,
            k,
            dk: Vec::new(),
        };
        v.dk = (0..3 * positions.len()).map(|l| v.derivative(l)).collect();
        v
    }

    fn central(&self, l: usize, step: f64) -> DenseMatrix {
        let (s, c) = (l / 3, l % 3);
        let mut plus = self.positions.clone();
        let mut minus = self.positions.clone();
        plus[s][c] += step;
        minus[s][c] -= step;
        let kp = build_poisson_matrix(&plus, &self.weights, self.field);
        let km = build_poisson_matrix(&minus, &self.weights, self.field);
        let mut d = kp.matrix;
        for (a, b) in d.data.iter_mut().zip(&km.matrix.data) {
            *a = (*a - b) / (2.0 * step);
        }
        d
    }

    fn derivative(&self, l: usize) -> DenseMatrix {
        let (s, c) = (l / 3, l % 3);
        let step = self.delta * self.positions[s][c].abs().max(1.0);
        let d1 = self.central(l, step);
        if !self.richardson {
            return d1;
        }
        let mut d2 = self.central(l, 0.5 * step);
        for (a, b) in d2.data.iter_mut().zip(&d1.data) {
            *a = (4.0 * *a - b) / 3.0;
        }
        d2
    }

    pub fn size(&self) -> usize {
        self.k.size()
    }

    pub fn poisson_matrix(&self) -> &PoissonMatrix {
        &self.k
    }

    pub fn classify(&self, i: usize, j: usize, k: usize) -> TripleClass {
        let off = 3 * self.positions.len();
        if i < off || j < off || k < off {
            return TripleClass::ZeroExpected;
        }
        let (pi, pj, pk) = ((i - off) / 3, (j - off) / 3, (k - off) / 3);
        if pi == pj && pj == pk && i != j && j != k && i != k {
            TripleClass::DivDriven { particle: pi }
        } else {
            TripleClass::ZeroExpected
        }
    }

    pub fn residual(&self, i: usize, j: usize, k: usize) -> Result<f64, BracketError> {
        let n = self.size();
        for index in [i, j, k] {
            if index >= n {
                return Err(BracketError::IndexOutOfRange { index, size: n });
            }
        }
        let km = &self.k.matrix;
        let mut sum = 0.0;
        for (l, d) in self.dk.iter().enumerate() {
            sum += d.get(i, j) * km.get(l, k) + d.get(j, k) * km.get(l, i) + d.get(k, i) * km.get(l, j);
        }
        Ok(sum)
    }

    /// Residuals of every triple `i < j < k` (the cyclic sum is totally
    /// antisymmetric, so these determine all triples).
    pub fn report(&self) -> JacobiReport {
        let n = self.size();
        let mut rows = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    let residual = self.residual(i, j, k).expect("indices in range");
                    rows.push(TripleResidual { i, j, k, residual, class: self.classify(i, j, k) });
                }
            }
        }
        JacobiReport { rows, weights: self.weights.clone() }
    }

    /// Largest residual over all ordered triples, including those with
    /// repeated indices.
    pub fn max_residual_all(&self) -> f64 {
        let n = self.size();
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    m = m.max(self.residual(i, j, k).expect("indices in range").abs());
                }
            }
        }
        m
    }

    /// Largest residual over triples with a repeated index.
    pub fn max_residual_repeated(&self) -> f64 {
        let n = self.size();
        let mut m: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                for (a, b, c) in [(i, i, j), (i, j, i), (j, i, i)] {
                    m = m.max(self.residual(a, b, c).expect("indices in range").abs());
                }
            }
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripleResidual {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    pub residual: f64,
    pub class: TripleClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobiReport {
    pub rows: Vec<TripleResidual>,
    weights: Vec<f64>,
}

impl JacobiReport {
    pub fn max_zero_expected(&self) -> f64 {
        self.rows
            .iter()
            .filter(|r| r.class == TripleClass::ZeroExpected)
            .map(|r| r.residual.abs())
            .fold(0.0, f64::max)
    }

    /// `(triple, residual, ω_s⁻²)` for every divergence-driven triple.
    pub fn div_driven(&self) -> impl Iterator<Item = (&TripleResidual, f64)> {
        self.rows.iter().filter_map(|r| match r.class {
            TripleClass::DivDriven { particle } => Some((r, 1.0 / (self.weights[particle] * self.weights[particle]))),
            TripleClass::ZeroExpected => None,
        })
    }

    /// Text table `i j k residual class`; zero-expected rows with residual
    /// below `threshold` are omitted.
    pub fn to_table(&self, threshold: f64) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>5} {:>5} {:>5} {:>14}  class", "i", "j", "k", "residual");
        for r in &self.rows {
            let class = match r.class {
                TripleClass::ZeroExpected => "zero-expected".to_string(),
                TripleClass::DivDriven { particle } => format!("div-driven(particle {particle})"),
            };
            if r.class == TripleClass::ZeroExpected && r.residual.abs() < threshold {
                continue;
            }
            let _ = writeln!(out, "{:>5} {:>5} {:>5} {:>14.6e}  {}", r.i, r.j, r.k, r.residual, class);
        }
        let _ = writeln!(out, "# triples={} max_zero_expected={:e}", self.rows.len(), self.max_zero_expected());
        out
    }
}

fn set_phase(ensemble: &mut ParticleEnsemble, z: &[f64]) {
    let np = ensemble.len();
    let (xs, vs, _) = ensemble.phase_mut();
    for s in 0..np {
        for c in 0..3 {
            xs[s][c] = z[3 * s + c];
            vs[s][c] = z[3 * np + 3 * s + c];
        }
    }
}

/// Central finite-difference Jacobian of one composed step `Z ↦ Φ_Δt(Z)`.
/// The field is re-solved from scratch (no warm start) for every
/// evaluation. Positions must stay clear of periodic seams.
pub fn step_jacobian(
    system: &PicSystem,
    ensemble: &ParticleEnsemble,
    kind: SplittingKind,
    dt: f64,
    delta: f64,
) -> Result<DenseMatrix, BracketError> {
    let z0 = phase_vector(ensemble.positions(), ensemble.velocities());
    let n = z0.len();
    let eval = |z: &[f64]| -> Result<Vec<f64>, BracketError> {
        let mut e = ensemble.clone();
        set_phase(&mut e, z);
        let mut st = PicState { phi: system.solve_field(&e, None)?, ensemble: e, time: 0.0 };
        st.phi.phi.iter_mut().for_each(|p| *p = 0.0);
        advance(system, &mut st, kind, dt)?;
        Ok(phase_vector(st.ensemble.positions(), st.ensemble.velocities()))
    };
    let mut j = DenseMatrix::zeros(n);
    for l in 0..n {
        let h = delta * z0[l].abs().max(1.0);
        let mut zp = z0.clone();
        let mut zm = z0.clone();
        zp[l] += h;
        zm[l] -= h;
        let (fp, fm) = (eval(&zp)?, eval(&zm)?);
        for i in 0..n {
            j.set(i, l, (fp[i] - fm[i]) / (2.0 * h));
        }
    }
    Ok(j)
}

/// `‖J K Jᵀ − K‖_∞` (max-entry norm) for one step in the system's constant
/// field, with `K` evaluated at the initial state.
pub fn poisson_map_defect(
    system: &PicSystem,
    ensemble: &ParticleEnsemble,
    kind: SplittingKind,
    dt: f64,
) -> Result<f64, BracketError> {
    let f = system.field;
    if f.scale_e != f.scale_x {
        return Err(BracketError::NonHamiltonianScaling { scale_e: f.scale_e, scale_x: f.scale_x });
    }
    let k = build_scaled_poisson_matrix(ensemble.positions(), ensemble.weights(), |_| f.b, f.scale_x, f.scale_b);
    let j = step_jacobian(system, ensemble, kind, dt, 1e-5)?;
    let jkjt = j.mul(k.matrix()).mul(&j.transpose());
    Ok(jkjt.max_abs_diff(k.matrix()))
}

/// Fields used by the verifier tool.
pub mod fields {
    pub fn constant(_: [f64; 3]) -> [f64; 3] {
        [0.3, -0.5, 1.0]
    }

    /// `(y, −x, 0)`: linear and divergence-free.
    pub fn divergence_free(x: [f64; 3]) -> [f64; 3] {
        [x[1], -x[0], 0.0]
    }

    /// `(sin y, cos z, sin x)`: nonlinear and divergence-free.
    pub fn divergence_free_nonlinear(x: [f64; 3]) -> [f64; 3] {
        [x[1].sin(), x[2].cos(), x[0].sin()]
    }

    /// `(x, 0, 0)`: `∇·B = 1`.
    pub fn unit_divergence(x: [f64; 3]) -> [f64; 3] {
        [x[0], 0.0, 0.0]
    }
}
