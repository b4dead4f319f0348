//! Exact sub-flows of the split Hamiltonian and their compositions.
//!
//! `H = H_v + H_e`. The `H_v` flow is free streaming coupled to a constant
//! magnetic rotation and is solved in closed form; the `H_e` flow freezes the
//! positions, so the field is solved once and the velocities receive an
//! exact kick. Lie applies `H_v` then `H_e`; Strang is
//! `H_v(Δt/2) H_e(Δt) H_v(Δt/2)`.

use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{
    assemble_stiffness, solve_poisson_from, Boundary, FemError, FemSpace, FieldCoefficients, NodeLattice, SolverConfig,
    StiffnessMatrix,
};
use crate::particles::{deposit_with, DepositOptions, ParticleEnsemble, ParticleError, SmoothingKernel};

/// Particles per parallel work item in the push loops.
const PUSH_CHUNK: usize = 2048;

/// Below this `|b Δt|` the rotation coefficients switch to Taylor series.
const TAYLOR_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IntegratorError {
    #[error(transparent)]
    Particle(#[from] ParticleError),
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("time step must be positive and finite, got {0}")]
    BadTimeStep(f64),
    #[error("magnetic field scale factors must be positive, got {0:?}")]
    BadScale([f64; 3]),
}

/// Constant external field with the scale factors of the strong-field
/// regime: `Ẋ = κ_x V`, `V̇ = κ_E E + κ_B V × B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagneticField {
    pub b: [f64; 3],
    pub scale_x: f64,
    pub scale_e: f64,
    pub scale_b: f64,
}

impl Default for MagneticField {
    fn default() -> Self {
        Self::uniform([0.0; 3])
    }
}

impl MagneticField {
    pub fn uniform(b: [f64; 3]) -> Self {
        Self { b, scale_x: 1.0, scale_e: 1.0, scale_b: 1.0 }
    }

    /// `κ_x = κ_E = 1/ε`, `κ_B = 1/ε²`.
    pub fn scaled(b: [f64; 3], eps: f64) -> Self {
        Self { b, scale_x: 1.0 / eps, scale_e: 1.0 / eps, scale_b: 1.0 / (eps * eps) }
    }

    pub fn validate(&self) -> Result<(), IntegratorError> {
        let s = [self.scale_x, self.scale_e, self.scale_b];
        if s.iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(IntegratorError::BadScale(s))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplittingKind {
    Lie,
    Strang,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplittingScheme {
    kind: SplittingKind,
    dt: f64,
}

impl SplittingScheme {
    pub fn new(kind: SplittingKind, dt: f64) -> Result<Self, IntegratorError> {
        if dt > 0.0 && dt.is_finite() {
            Ok(Self { kind, dt })
        } else {
            Err(IntegratorError::BadTimeStep(dt))
        }
    }

    pub fn kind(&self) -> SplittingKind {
        self.kind
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Coefficients of `I`, `B̂′` and `B̂′²` in the exact `H_v` propagators.
#[derive(Debug, Clone, Copy)]
struct RotationCoefficients {
    /// Velocity: `sin(bΔt)/b`, `(1 − cos bΔt)/b²`.
    v1: f64,
    v2: f64,
    /// Position: `Δt`, `(1 − cos bΔt)/b²`, `(bΔt − sin bΔt)/b³`.
    x0: f64,
    x1: f64,
    x2: f64,
}

impl RotationCoefficients {
    fn new(b: f64, dt: f64) -> Self {
        if (b * dt).abs() < TAYLOR_THRESHOLD {
            let (b2, dt2) = (b * b, dt * dt);
            let v1 = dt * (1.0 - b2 * dt2 / 6.0);
            let v2 = dt2 * (0.5 - b2 * dt2 / 24.0);
            let x2 = dt2 * dt * (1.0 / 6.0 - b2 * dt2 / 120.0);
            Self { v1, v2, x0: dt, x1: v2, x2 }
        } else {
            let theta = b * dt;
            let half = (0.5 * theta).sin();
            // 1 − cos θ = 2 sin²(θ/2) avoids cancellation for small θ.
            let v2 = 2.0 * half * half / (b * b);
            Self { v1: theta.sin() / b, v2, x0: dt, x1: v2, x2: theta_minus_sin(theta) / (b * b * b) }
        }
    }
}

/// `θ − sin θ`, by its alternating series where the direct difference would
/// cancel.
fn theta_minus_sin(theta: f64) -> f64 {
    if theta.abs() > 0.5 {
        return theta - theta.sin();
    }
    let t2 = theta * theta;
    let mut term = theta * t2 / 6.0;
    let mut sum = term;
    for k in 2..12 {
        term *= -t2 / ((2 * k) as f64 * (2 * k + 1) as f64);
        sum += term;
    }
    sum
}

/// Exact flow of `H_v` over `dt` (any sign). All three position components
/// move, so the update is the exact 6D flow even when only the first `dim`
/// components are seen by the field. Periodic positions are wrapped
/// afterwards.
pub fn flow_hv(ensemble: &mut ParticleEnsemble, field: &MagneticField, space: &FemSpace, dt: f64) {
    let bb = field.b.map(|c| field.scale_b * c);
    let b = (bb[0] * bb[0] + bb[1] * bb[1] + bb[2] * bb[2]).sqrt();
    let k = RotationCoefficients::new(b, dt);
    let kx = field.scale_x;
    let periodic = space.boundary() == Boundary::Periodic;
    let (xs, vs, _) = ensemble.phase_mut();
    xs.par_chunks_mut(PUSH_CHUNK).zip(vs.par_chunks_mut(PUSH_CHUNK)).for_each(|(xc, vc)| {
        for (x, v) in xc.iter_mut().zip(vc.iter_mut()) {
            let v0 = *v;
            if b == 0.0 {
                for c in 0..3 {
                    x[c] += kx * dt * v0[c];
                }
            } else {
                // B̂′v = v × B′ and B̂′²v = (v × B′) × B′.
                let r1 = cross(v0, bb);
                let r2 = cross(r1, bb);
                for c in 0..3 {
                    v[c] = v0[c] + k.v1 * r1[c] + k.v2 * r2[c];
                }
                for c in 0..3 {
                    x[c] += kx * (k.x0 * v0[c] + k.x1 * r1[c] + k.x2 * r2[c]);
                }
            }
            if periodic {
                space.wrap(x);
            }
        }
    });
}

/// Everything needed to evaluate the field from an ensemble.
#[derive(Debug, Clone)]
pub struct PicSystem {
    pub space: FemSpace,
    pub stiffness: StiffnessMatrix,
    pub kernel: SmoothingKernel,
    pub rho0: f64,
    pub solver: SolverConfig,
    pub field: MagneticField,
    pub deposit: DepositOptions,
}

impl PicSystem {
    pub fn new(space: FemSpace, kernel: SmoothingKernel, rho0: f64, field: MagneticField) -> Self {
        let stiffness = assemble_stiffness(&space);
        Self {
            space,
            stiffness,
            kernel,
            rho0,
            solver: SolverConfig::default(),
            field,
            deposit: DepositOptions::default(),
        }
    }

    /// Deposits and solves `M Φ = F` at the current positions. `guess` warm
    /// starts the conjugate gradient.
    pub fn solve_field(
        &self,
        ensemble: &ParticleEnsemble,
        guess: Option<&[f64]>,
    ) -> Result<FieldCoefficients, IntegratorError> {
        let load = deposit_with(ensemble, &self.kernel, &self.space, self.rho0, self.deposit)?;
        Ok(solve_poisson_from(&self.stiffness, &load.values, load.gross_charge, guess, &self.solver)?)
    }
}

/// `V_s ← V_s − κ_E Δt Σ_j φ_j ∇W_j(X_s)` with the smoothed basis gradients
/// of the system's kernel, i.e. the transpose of the deposition.
pub fn kick(system: &PicSystem, ensemble: &mut ParticleEnsemble, phi: &[f64], dt: f64) {
    let scale = system.field.scale_e * dt;
    let dim = ensemble.dim();
    let space = &system.space;
    let kernel = &system.kernel;
    let (xs, vs, _) = ensemble.phase_mut();
    if let (SmoothingKernel::Delta, Some(lat)) = (kernel, NodeLattice::new(space)) {
        let p = lat.expand(phi);
        let sx = lat.stride();
        let [hx, hy] = lat.inv_h();
        let periodic = space.boundary() == Boundary::Periodic;
        xs.par_chunks(PUSH_CHUNK).zip(vs.par_chunks_mut(PUSH_CHUNK)).for_each(|(xc, vc)| {
            for (x, v) in xc.iter().zip(vc.iter_mut()) {
                let mut x = *x;
                if periodic {
                    space.wrap(&mut x);
                }
                let (i, [ax, ay]) = lat.locate(&x);
                if dim == 1 {
                    v[0] -= scale * (p[i + 1] - p[i]) * hx;
                } else {
                    let (p00, p10, p01, p11) = (p[i], p[i + 1], p[i + sx], p[i + sx + 1]);
                    v[0] -= scale * ((1.0 - ay) * (p10 - p00) + ay * (p11 - p01)) * hx;
                    v[1] -= scale * ((1.0 - ax) * (p01 - p00) + ax * (p11 - p10)) * hy;
                }
            }
        });
        return;
    }
    xs.par_chunks(PUSH_CHUNK).zip(vs.par_chunks_mut(PUSH_CHUNK)).for_each(|(xc, vc)| {
        for (x, v) in xc.iter().zip(vc.iter_mut()) {
            let mut grad = [0.0; 2];
            space.for_each_weight(x, kernel, |dof, _, g| {
                grad[0] += phi[dof] * g[0];
                grad[1] += phi[dof] * g[1];
            });
            for c in 0..dim.min(2) {
                v[c] -= scale * grad[c];
            }
        }
    });
}

/// Exact flow of `H_e` over `dt`: solve at the frozen positions, then kick.
/// Returns the potential used for the kick.
pub fn flow_he(
    system: &PicSystem,
    ensemble: &mut ParticleEnsemble,
    dt: f64,
    guess: Option<&[f64]>,
) -> Result<FieldCoefficients, IntegratorError> {
    let phi = system.solve_field(ensemble, guess)?;
    kick(system, ensemble, &phi.phi, dt);
    Ok(phi)
}

/// Applies the splitting composition of `kind` with the two sub-flows given
/// as closures (`hv(τ)`, `he(τ)`), rightmost factor first.
pub fn compose<E>(
    kind: SplittingKind,
    dt: f64,
    mut hv: impl FnMut(f64),
    mut he: impl FnMut(f64) -> Result<(), E>,
) -> Result<(), E> {
    match kind {
        SplittingKind::Lie => {
            hv(dt);
            he(dt)
        }
        SplittingKind::Strang => {
            hv(0.5 * dt);
            he(dt)?;
            hv(0.5 * dt);
            Ok(())
        }
    }
}

/// Dynamical state: ensemble, time and the last potential solved by `H_e`.
#[derive(Debug, Clone, PartialEq)]
pub struct PicState {
    pub ensemble: ParticleEnsemble,
    pub time: f64,
    pub phi: FieldCoefficients,
}

impl PicState {
    /// Wraps the ensemble into the domain and solves the initial field.
    pub fn new(system: &PicSystem, mut ensemble: ParticleEnsemble) -> Result<Self, IntegratorError> {
        ensemble.wrap_into(&system.space);
        let phi = system.solve_field(&ensemble, None)?;
        Ok(Self { ensemble, time: 0.0, phi })
    }
}

/// One composed step of signed length `dt`. On error the state is left
/// partially advanced and should be discarded.
pub fn advance(system: &PicSystem, state: &mut PicState, kind: SplittingKind, dt: f64) -> Result<(), IntegratorError> {
    let PicState { ensemble, phi, .. } = state;
    let cell = std::cell::RefCell::new(ensemble);
    compose(
        kind,
        dt,
        |tau| flow_hv(&mut cell.borrow_mut(), &system.field, &system.space, tau),
        |tau| {
            let new_phi = flow_he(system, &mut cell.borrow_mut(), tau, Some(&phi.phi))?;
            *phi = new_phi;
            Ok::<(), IntegratorError>(())
        },
    )?;
    state.time += dt;
    Ok(())
}

pub fn step(system: &PicSystem, state: &mut PicState, scheme: &SplittingScheme) -> Result<(), IntegratorError> {
    advance(system, state, scheme.kind, scheme.dt)
}
