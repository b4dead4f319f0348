//! Marker ensemble, charge deposition and ensemble moments.

use std::io::{self, BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::fem::{Boundary, FemSpace, NodeLattice};
use crate::reduce::{self, Reduction};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParticleError {
    #[error("ensemble must contain at least one particle")]
    Empty,
    #[error("particle {index} has non-positive or non-finite weight {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("ensemble arrays disagree in length: {positions} positions, {velocities} velocities, {weights} weights")]
    LengthMismatch { positions: usize, velocities: usize, weights: usize },
    #[error("unsupported spatial dimension {0}")]
    BadDimension(usize),
    #[error("particle {index} at {position:?} lies outside the Dirichlet domain")]
    ParticleOutOfDomain { index: usize, position: [f64; 3] },
    #[error("ensemble dimension {ensemble} does not match space dimension {space}")]
    DimensionMismatch { ensemble: usize, space: usize },
    #[error("invalid kernel: {0}")]
    BadKernel(String),
    #[error("snapshot: {0}")]
    Snapshot(String),
}

/// Regularizing function used to smooth markers before projection onto the
/// FEM basis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SmoothingKernel {
    Delta,
    /// Centred cardinal B-spline of degree `degree` (0 = top hat, 1 = hat, …)
    /// scaled to width `width`: support `(degree + 1) * width`, unit mass.
    BSpline { degree: usize, width: f64 },
}

impl SmoothingKernel {
    pub fn validate(&self) -> Result<(), ParticleError> {
        match *self {
            SmoothingKernel::Delta => Ok(()),
            SmoothingKernel::BSpline { degree, width } => {
                if degree > 3 {
                    Err(ParticleError::BadKernel(format!("degree {degree} > 3")))
                } else if !(width > 0.0 && width.is_finite()) {
                    Err(ParticleError::BadKernel(format!("width {width} must be positive")))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn support(&self) -> f64 {
        match *self {
            SmoothingKernel::Delta => 0.0,
            SmoothingKernel::BSpline { degree, width } => (degree as f64 + 1.0) * width,
        }
    }
}

/// Weighted markers `(X_s, V_s, ω_s)`.
///
/// Positions and velocities are stored as 3-vectors; only the first `dim`
/// position components are seen by the field. Weights are fixed at
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleEnsemble {
    dim: usize,
    positions: Vec<[f64; 3]>,
    velocities: Vec<[f64; 3]>,
    weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(
        dim: usize,
        positions: Vec<[f64; 3]>,
        velocities: Vec<[f64; 3]>,
        weights: Vec<f64>,
    ) -> Result<Self, ParticleError> {
        if !(1..=3).contains(&dim) {
            return Err(ParticleError::BadDimension(dim));
        }
        if positions.len() != velocities.len() || positions.len() != weights.len() {
            return Err(ParticleError::LengthMismatch {
                positions: positions.len(),
                velocities: velocities.len(),
                weights: weights.len(),
            });
        }
        if positions.is_empty() {
            return Err(ParticleError::Empty);
        }
        if let Some((index, &weight)) = weights.iter().enumerate().find(|(_, w)| !(**w > 0.0 && w.is_finite())) {
            return Err(ParticleError::BadWeight { index, weight });
        }
        Ok(Self { dim, positions, velocities, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn positions(&self) -> &[[f64; 3]] {
        &self.positions
    }

    pub fn velocities(&self) -> &[[f64; 3]] {
        &self.velocities
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Mutable access to the phase-space coordinates. Weights stay read-only.
    pub fn phase_mut(&mut self) -> (&mut [[f64; 3]], &mut [[f64; 3]], &[f64]) {
        (&mut self.positions, &mut self.velocities, &self.weights)
    }

    pub fn velocities_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.velocities
    }

    pub fn positions_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.positions
    }

    /// Markers of `self` followed by those of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self, ParticleError> {
        if self.dim != other.dim {
            return Err(ParticleError::DimensionMismatch { ensemble: other.dim, space: self.dim });
        }
        let mut out = self.clone();
        out.positions.extend_from_slice(&other.positions);
        out.velocities.extend_from_slice(&other.velocities);
        out.weights.extend_from_slice(&other.weights);
        Ok(out)
    }

    /// Wraps every position into a periodic box.
    pub fn wrap_into(&mut self, space: &FemSpace) {
        self.positions.par_iter_mut().for_each(|x| space.wrap(x));
    }
}

/// `F_i = (ρ_h, W_i)` plus the gross charge magnitude used to judge the
/// periodic compatibility condition.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadVector {
    pub values: Vec<f64>,
    /// `Σ ω_s + ρ₀ |Ω|`: the scale of the terms that cancel in `Σ F_i`.
    pub gross_charge: f64,
}

impl LoadVector {
    pub fn sum(&self) -> f64 {
        reduce::sum(&self.values)
    }
}

/// How deposition work is split across workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DepositStrategy {
    /// Workers own contiguous particle ranges.
    #[default]
    ParticleChunks,
    /// Workers own slabs of cells along the first axis; particles are binned
    /// to slabs first.
    DomainRegions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DepositOptions {
    pub reduction: Reduction,
    pub strategy: DepositStrategy,
}

fn check_particle(space: &FemSpace, index: usize, x: &[f64; 3]) -> Result<(), ParticleError> {
    if space.boundary() == Boundary::DirichletZero && !space.contains(x) {
        return Err(ParticleError::ParticleOutOfDomain { index, position: *x });
    }
    Ok(())
}

fn deposit_range(
    ensemble: &ParticleEnsemble,
    kernel: &SmoothingKernel,
    space: &FemSpace,
    indices: impl Iterator<Item = usize>,
) -> Result<Vec<f64>, ParticleError> {
    let mut f = vec![0.0; space.n_dofs()];
    let periodic = space.boundary() == Boundary::Periodic;
    if let (SmoothingKernel::Delta, Some(lat)) = (kernel, NodeLattice::new(space)) {
        let mut nodes = vec![0.0; lat.n_nodes()];
        let sx = lat.stride();
        for s in indices {
            let mut x = ensemble.positions[s];
            if periodic {
                space.wrap(&mut x);
            } else {
                check_particle(space, s, &x)?;
            }
            let w = ensemble.weights[s];
            let (i, [ax, ay]) = lat.locate(&x);
            if lat.dim() == 1 {
                nodes[i] += w * (1.0 - ax);
                nodes[i + 1] += w * ax;
            } else {
                let (w0, w1) = (w * (1.0 - ay), w * ay);
                nodes[i] += w0 * (1.0 - ax);
                nodes[i + 1] += w0 * ax;
                nodes[i + sx] += w1 * (1.0 - ax);
                nodes[i + sx + 1] += w1 * ax;
            }
        }
        lat.fold(&nodes, &mut f);
        return Ok(f);
    }
    for s in indices {
        let mut x = ensemble.positions[s];
        if periodic {
            space.wrap(&mut x);
        } else {
            check_particle(space, s, &x)?;
        }
        let w = ensemble.weights[s];
        space.for_each_weight(&x, kernel, |dof, value, _| f[dof] += w * value);
    }
    Ok(f)
}

/// Deposits `ρ_h = Σ ω_s S_ε(x − X_s) − ρ₀` onto the basis with the default
/// (thread-count independent) layout.
pub fn deposit(
    ensemble: &ParticleEnsemble,
    kernel: &SmoothingKernel,
    space: &FemSpace,
    rho0: f64,
) -> Result<LoadVector, ParticleError> {
    deposit_with(ensemble, kernel, space, rho0, DepositOptions::default())
}

pub fn deposit_with(
    ensemble: &ParticleEnsemble,
    kernel: &SmoothingKernel,
    space: &FemSpace,
    rho0: f64,
    opts: DepositOptions,
) -> Result<LoadVector, ParticleError> {
    if ensemble.dim != space.dim() {
        return Err(ParticleError::DimensionMismatch { ensemble: ensemble.dim, space: space.dim() });
    }
    kernel.validate()?;
    let np = ensemble.len();
    let chunks = opts.reduction.chunk_count(np);
    let partials: Vec<Vec<f64>> = match opts.strategy {
        DepositStrategy::ParticleChunks => {
            let len = opts.reduction.chunk_len(np);
            (0..chunks)
                .into_par_iter()
                .map(|c| {
                    let start = (c * len).min(np);
                    let end = ((c + 1) * len).min(np);
                    deposit_range(ensemble, kernel, space, start..end)
                })
                .collect::<Result<_, _>>()?
        }
        DepositStrategy::DomainRegions => {
            let ax = &space.axes()[0];
            let n_cells = ax.n_cells;
            let regions = chunks.min(n_cells).max(1);
            let mut bins: Vec<Vec<usize>> = vec![Vec::new(); regions];
            for (s, x) in ensemble.positions.iter().enumerate() {
                let mut p = *x;
                space.wrap(&mut p);
                let cell = (((p[0] - ax.lower) / ax.h()).floor() as isize).clamp(0, n_cells as isize - 1) as usize;
                bins[cell * regions / n_cells].push(s);
            }
            bins.par_iter()
                .map(|b| deposit_range(ensemble, kernel, space, b.iter().copied()))
                .collect::<Result<_, _>>()?
        }
    };
    let mut values = reduce::sum_vectors(partials);
    if rho0 != 0.0 {
        for (f, w) in values.iter_mut().zip(space.basis_integrals()) {
            *f -= rho0 * w;
        }
    }
    let gross_charge = total_charge(ensemble) + rho0.abs() * space.volume();
    Ok(LoadVector { values, gross_charge })
}

/// `C = Σ ω_s`.
pub fn total_charge(ensemble: &ParticleEnsemble) -> f64 {
    reduce::sum(&ensemble.weights)
}

/// `P = Σ ω_s V_s`.
pub fn total_momentum(ensemble: &ParticleEnsemble) -> [f64; 3] {
    let w = &ensemble.weights;
    let v = &ensemble.velocities;
    [0, 1, 2].map(|c| reduce::sum_map(w.len(), |s| w[s] * v[s][c]))
}

/// `H_v = ½ Σ ω_s |V_s|²`.
pub fn kinetic_energy(ensemble: &ParticleEnsemble) -> f64 {
    let w = &ensemble.weights;
    let v = &ensemble.velocities;
    0.5 * reduce::sum_map(w.len(), |s| w[s] * (v[s][0] * v[s][0] + v[s][1] * v[s][1] + v[s][2] * v[s][2]))
}

pub const SNAPSHOT_MAGIC: &str = "# hampic-snapshot v1";

/// Writes the text snapshot format:
///
/// ```text
/// # hampic-snapshot v1
/// # dim=<d> vdim=3 n_particles=<N> time=<t>
/// x_1 .. x_d v_x v_y v_z w
/// ```
///
/// Values use Rust's shortest round-trip float formatting.
pub fn write_snapshot<W: Write>(ensemble: &ParticleEnsemble, time: f64, mut w: W) -> io::Result<()> {
    writeln!(w, "{SNAPSHOT_MAGIC}")?;
    writeln!(w, "# dim={} vdim=3 n_particles={} time={}", ensemble.dim, ensemble.len(), time)?;
    let mut line = String::new();
    for s in 0..ensemble.len() {
        line.clear();
        for c in 0..ensemble.dim {
            line.push_str(&format!("{} ", ensemble.positions[s][c]));
        }
        let v = ensemble.velocities[s];
        line.push_str(&format!("{} {} {} {}\n", v[0], v[1], v[2], ensemble.weights[s]));
        w.write_all(line.as_bytes())?;
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<(ParticleEnsemble, f64), ParticleError> {
    let err = |m: String| ParticleError::Snapshot(m);
    let mut lines = r.lines();
    let magic = lines.next().ok_or_else(|| err("empty file".into()))?.map_err(|e| err(e.to_string()))?;
    if magic.trim() != SNAPSHOT_MAGIC {
        return Err(err(format!("unknown header `{magic}`")));
    }
    let header = lines.next().ok_or_else(|| err("missing header".into()))?.map_err(|e| err(e.to_string()))?;
    let (mut dim, mut n, mut time) = (None, None, None);
    for tok in header.trim_start_matches('#').split_whitespace() {
        if let Some((k, v)) = tok.split_once('=') {
            match k {
                "dim" => dim = v.parse::<usize>().ok(),
                "n_particles" => n = v.parse::<usize>().ok(),
                "time" => time = v.parse::<f64>().ok(),
                _ => {}
            }
        }
    }
    let (dim, n, time) = match (dim, n, time) {
        (Some(d), Some(n), Some(t)) => (d, n, t),
        _ => return Err(err(format!("incomplete header `{header}`"))),
    };
    let mut positions = Vec::with_capacity(n);
    let mut velocities = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for line in lines {
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| err(format!("bad number `{t}`"))))
            .collect::<Result<_, _>>()?;
        if vals.len() != dim + 4 {
            return Err(err(format!("expected {} columns, got {}", dim + 4, vals.len())));
        }
        let mut x = [0.0; 3];
        x[..dim].copy_from_slice(&vals[..dim]);
        positions.push(x);
        velocities.push([vals[dim], vals[dim + 1], vals[dim + 2]]);
        weights.push(vals[dim + 3]);
    }
    if positions.len() != n {
        return Err(err(format!("header announces {n} particles, found {}", positions.len())));
    }
    Ok((ParticleEnsemble::new(dim, positions, velocities, weights)?, time))
}
