//! Initial ensembles of the benchmark problems.
//!
//! Every sampler draws from a ChaCha8 generator seeded from
//! [`ScenarioSpec::seed`]; each fixed-size block of particles (or strata, or
//! grid cells) reads its own stream, so the ensemble does not depend on the
//! thread count. Weights are deterministic: `ω_s = C / N_p` with `C` the
//! analytic integral of `f₀` over the untruncated velocity space.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erf;
use thiserror::Error;

use crate::fem::Boundary;
use crate::integrators::MagneticField;
use crate::particles::{ParticleEnsemble, ParticleError};

/// Particles (or strata) per RNG stream.
const STREAM_BLOCK: usize = 4096;

/// Cells per axis of the stratification grid of 2D scenarios.
const STRATA_GRID: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScenarioError {
    #[error("invalid scenario parameter: {0}")]
    Invalid(String),
    #[error("sampler called with the wrong scenario variant")]
    WrongVariant,
    #[error(transparent)]
    Particle(#[from] ParticleError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Landau { alpha: f64, k: f64 },
    TwoStream { alpha: f64, k: f64 },
    BumpOnTail { alpha: f64, k: f64 },
    Diocotron { alpha: f64, l: u32, r_minus: f64, r_plus: f64, eps: f64, b_ext: [f64; 3] },
}

impl Variant {
    pub fn landau() -> Self {
        Variant::Landau { alpha: 0.001, k: 0.5 }
    }

    pub fn two_stream() -> Self {
        Variant::TwoStream { alpha: 0.01, k: 0.5 }
    }

    pub fn bump_on_tail() -> Self {
        Variant::BumpOnTail { alpha: 0.04, k: 0.3 }
    }

    pub fn diocotron(eps: f64) -> Self {
        Variant::Diocotron { alpha: 0.2, l: 5, r_minus: 5.0, r_plus: 8.0, eps, b_ext: [0.0, 0.0, 1.0] }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Landau { .. } => "landau",
            Variant::TwoStream { .. } => "two_stream",
            Variant::BumpOnTail { .. } => "bump_on_tail",
            Variant::Diocotron { .. } => "diocotron",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Variant::Diocotron { .. } => 2,
            _ => 1,
        }
    }
}

/// How phase-space positions are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Sampling {
    /// Independent draws.
    #[default]
    Random,
    /// Low-noise start. 1D: equally populated cold beams on a uniform
    /// velocity grid, weighted by bin mass; a beam's markers sit on an evenly
    /// spaced lattice in the position CDF with a random phase. 2D:
    /// systematic per-cell counts on a 256² grid, rejection inside cells.
    Stratified,
}

/// Spatial box and velocity truncation interval.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub x: Vec<(f64, f64)>,
    /// `None`: velocities are not truncated.
    pub v: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub variant: Variant,
    pub n_particles: usize,
    pub seed: u64,
    pub sampling: Sampling,
    /// Overrides [`ScenarioSpec::default_domain`].
    pub domain: Option<Domain>,
}

impl ScenarioSpec {
    pub fn new(variant: Variant, n_particles: usize, seed: u64) -> Self {
        Self { variant, n_particles, seed, sampling: Sampling::Random, domain: None }
    }

    pub fn with_sampling(mut self, sampling: Sampling) -> Self {
        self.sampling = sampling;
        self
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: String| Err(ScenarioError::Invalid(m));
        if self.n_particles == 0 {
            return bad("n_particles must be at least 1".into());
        }
        match self.variant {
            Variant::Landau { alpha, k } | Variant::TwoStream { alpha, k } | Variant::BumpOnTail { alpha, k } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return bad(format!("alpha = {alpha} must lie in [0, 1]"));
                }
                if !(k > 0.0 && k.is_finite()) {
                    return bad(format!("k = {k} must be positive"));
                }
            }
            Variant::Diocotron { alpha, l, r_minus, r_plus, eps, .. } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return bad(format!("alpha = {alpha} must lie in [0, 1]"));
                }
                if l < 1 {
                    return bad("mode number l must be at least 1".into());
                }
                if !(0.0 < r_minus && r_minus < r_plus && r_plus.is_finite()) {
                    return bad(format!("need 0 < r_minus < r_plus, got {r_minus}, {r_plus}"));
                }
                if !(eps > 0.0 && eps.is_finite()) {
                    return bad(format!("eps = {eps} must be positive"));
                }
            }
        }
        let d = self.domain();
        if d.x.len() != self.variant.dim() {
            return bad(format!("domain has {} axes, scenario needs {}", d.x.len(), self.variant.dim()));
        }
        if d.x.iter().any(|&(a, b)| !(b > a)) {
            return bad("degenerate domain interval".into());
        }
        if let Some((a, b)) = d.v {
            if !(b > a) {
                return bad("degenerate velocity interval".into());
            }
        }
        if let Variant::Diocotron { r_plus, .. } = self.variant {
            if d.x.iter().any(|&(a, b)| a > -r_plus || b < r_plus) {
                return bad("diocotron domain must contain the ring support".into());
            }
        }
        Ok(())
    }

    pub fn default_domain(&self) -> Domain {
        match self.variant {
            Variant::Landau { k, .. } => Domain { x: vec![(0.0, 2.0 * PI / k)], v: Some((-6.0, 6.0)) },
            Variant::TwoStream { k, .. } => Domain { x: vec![(0.0, 2.0 * PI / k)], v: Some((-5.0, 5.0)) },
            Variant::BumpOnTail { k, .. } => Domain { x: vec![(0.0, 6.0 * PI / k)], v: Some((-8.0, 8.0)) },
            Variant::Diocotron { .. } => Domain { x: vec![(-12.0, 12.0), (-12.0, 12.0)], v: None },
        }
    }

    pub fn domain(&self) -> Domain {
        self.domain.clone().unwrap_or_else(|| self.default_domain())
    }

    pub fn boundary(&self) -> Boundary {
        match self.variant {
            Variant::Diocotron { .. } => Boundary::DirichletZero,
            _ => Boundary::Periodic,
        }
    }

    /// `C = ∫ f₀ dx dv` (untruncated in `v`).
    pub fn total_charge(&self) -> f64 {
        match self.variant {
            Variant::Diocotron { r_minus, r_plus, .. } => ring_mass(r_minus, r_plus),
            // The velocity factors have unit mass and the cosine integrates
            // to zero over whole periods.
            _ => {
                let (a, b) = self.domain().x[0];
                b - a
            }
        }
    }

    /// Neutralizing background: `C/|Ω|` in 1D, none for the non-neutral
    /// column.
    pub fn rho0(&self) -> f64 {
        match self.variant {
            Variant::Diocotron { .. } => 0.0,
            _ => {
                let (a, b) = self.domain().x[0];
                self.total_charge() / (b - a)
            }
        }
    }

    pub fn magnetic_field(&self) -> MagneticField {
        match self.variant {
            Variant::Diocotron { eps, b_ext, .. } => MagneticField::scaled(b_ext, eps),
            _ => MagneticField::default(),
        }
    }
}

/// `2π ∫_{r⁻}^{r⁺} r exp(−4(r − 6.5)²) dr` in closed form.
pub fn ring_mass(r_minus: f64, r_plus: f64) -> f64 {
    let (a, b) = (r_minus - 6.5, r_plus - 6.5);
    // ∫ (u + 6.5) e^{−4u²} du = −e^{−4u²}/8 + 6.5 (√π/4) erf(2u).
    let prim = |u: f64| -(-4.0 * u * u).exp() / 8.0 + 6.5 * PI.sqrt() / 4.0 * erf(2.0 * u);
    2.0 * PI * (prim(b) - prim(a))
}

/// Ring density `d₀` (without the `1/2π` velocity normalization).
pub fn ring_density(x: f64, y: f64, alpha: f64, l: u32, r_minus: f64, r_plus: f64) -> f64 {
    let r = x.hypot(y);
    if r < r_minus || r > r_plus {
        return 0.0;
    }
    let theta = y.atan2(x);
    (1.0 + alpha * (l as f64 * theta).cos()) * (-4.0 * (r - 6.5) * (r - 6.5)).exp()
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Upper bound on the velocity beams of the stratified 1D loader.
pub const STRATIFIED_BEAMS: usize = 512;

/// Fewest markers per beam: keeps each beam's lattice modes above the
/// resolvable grid modes.
pub const MIN_BEAM_MARKERS: usize = 256;

/// Beam count for `n` stratified markers.
pub fn stratified_beams(n: usize) -> usize {
    (n / MIN_BEAM_MARKERS).clamp(1, STRATIFIED_BEAMS)
}


/// Solves `cdf(x) = p` on `[lo, hi]` for a nondecreasing `cdf` by bisection.
fn invert_monotone(cdf: impl Fn(f64) -> f64, p: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Inverse CDF of `(1 + α cos k x)` on `[a, b]`, `b − a` a whole number of
/// periods: solves `x + (α/k) sin k x = a + p (b − a)` by safeguarded
/// Newton.
fn cosine_inverse_cdf(p: f64, alpha: f64, k: f64, a: f64, b: f64) -> f64 {
    let target = a + p * (b - a);
    let g = |x: f64| x + alpha / k * (k * x).sin() - a - alpha / k * (k * a).sin() - (target - a);
    let (mut lo, mut hi) = (a, b);
    let mut x = target.clamp(a, b);
    for _ in 0..100 {
        let gx = g(x);
        if gx.abs() <= 1e-15 * (b - a) {
            break;
        }
        if gx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let dg = 1.0 + alpha * (k * x).cos();
        let mut next = x - gx / dg;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if next == x {
            break;
        }
        x = next;
    }
    x
}

/// Velocity marginal of the 1D scenarios.
#[derive(Debug, Clone, Copy)]
enum VelocityLaw {
    Maxwellian,
    /// `∝ v² e^{−v²/2}`.
    TwoStream,
    /// `0.9 N(0, 1) + 0.1 N(4.5, 0.5²)`.
    BumpOnTail,
}

impl VelocityLaw {
    fn cdf(self, v: f64) -> f64 {
        let phi = |z: f64| 0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2));
        match self {
            VelocityLaw::Maxwellian => phi(v),
            VelocityLaw::TwoStream => {
                // P(|v| ≤ r) for the chi distribution with 3 degrees of freedom.
                let r = v.abs();
                let mass = erf(r / std::f64::consts::SQRT_2) - (2.0 / PI).sqrt() * r * (-0.5 * r * r).exp();
                0.5 + 0.5 * mass * v.signum()
            }
            VelocityLaw::BumpOnTail => 0.9 * phi(v) + 0.1 * phi((v - 4.5) / 0.5),
        }
    }

    fn draw(self, rng: &mut ChaCha8Rng) -> f64 {
        let n = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        match self {
            VelocityLaw::Maxwellian => n(rng),
            VelocityLaw::TwoStream => {
                let (a, b, c) = (n(rng), n(rng), n(rng));
                let speed = (a * a + b * b + c * c).sqrt();
                if rng.random::<bool>() {
                    speed
                } else {
                    -speed
                }
            }
            VelocityLaw::BumpOnTail => {
                if rng.random::<f64>() < 0.9 {
                    n(rng)
                } else {
                    4.5 + 0.5 * n(rng)
                }
            }
        }
    }

    /// Draw restricted to `bounds` by rejection.
    fn draw_truncated(self, rng: &mut ChaCha8Rng, bounds: Option<(f64, f64)>) -> f64 {
        loop {
            let v = self.draw(rng);
            match bounds {
                Some((a, b)) if !(a..=b).contains(&v) => continue,
                _ => return v,
            }
        }
    }

    /// Inverse of the (truncated) CDF.
    fn quantile(self, p: f64, bounds: Option<(f64, f64)>) -> f64 {
        let (a, b) = bounds.unwrap_or((-40.0, 40.0));
        if let VelocityLaw::Maxwellian = self {
            let normal = Normal::standard();
            let (ca, cb) = (self.cdf(a), self.cdf(b));
            return normal.inverse_cdf(ca + p * (cb - ca)).clamp(a, b);
        }
        let (ca, cb) = (self.cdf(a), self.cdf(b));
        invert_monotone(|v| self.cdf(v), ca + p * (cb - ca), a, b)
    }
}

fn sample_1d(spec: &ScenarioSpec, alpha: f64, k: f64, law: VelocityLaw) -> Result<ParticleEnsemble, ScenarioError> {
    spec.validate()?;
    let n = spec.n_particles;
    let domain = spec.domain();
    let (a, b) = domain.x[0];
    let vb = domain.v;
    let mut xs = vec![[0.0; 3]; n];
    let mut vs = vec![[0.0; 3]; n];
    match spec.sampling {
        Sampling::Random => {
            xs.par_chunks_mut(STREAM_BLOCK).zip(vs.par_chunks_mut(STREAM_BLOCK)).enumerate().for_each(
                |(block, (xc, vc))| {
                    let mut rng = rng_for(spec.seed, block as u64);
                    for (x, v) in xc.iter_mut().zip(vc.iter_mut()) {
                        x[0] = cosine_inverse_cdf(rng.random::<f64>(), alpha, k, a, b);
                        v[0] = law.draw_truncated(&mut rng, vb);
                    }
                },
            );
        }
        Sampling::Stratified => {
            // Cold beams on a uniform velocity grid, equally populated and
            // weighted by their bin mass; each beam's markers sit on a spatial
            // lattice with a random offset. Free streaming keeps every beam a
            // lattice, so low spatial modes stay quiet, and the uniform beam
            // spacing resolves the tails as well as the bulk.
            let (va, vb) = vb.unwrap_or((-8.0, 8.0));
            let nb = stratified_beams(n);
            let (ca, cb) = (law.cdf(va), law.cdf(vb));
            let edge = |j: usize| va + (vb - va) * j as f64 / nb as f64;
            let charge = spec.total_charge();
            let beams: Vec<(Vec<[f64; 3]>, f64, f64)> = (0..nb)
                .into_par_iter()
                .map(|j| {
                    let m = n / nb + usize::from(j < n % nb);
                    let mut rng = rng_for(spec.seed, j as u64);
                    let (pa, pb) = (law.cdf(edge(j)), law.cdf(edge(j + 1)));
                    // Velocity at the bin's mass median.
                    let v = law.quantile((0.5 * (pa + pb) - ca) / (cb - ca), Some((va, vb))).clamp(edge(j), edge(j + 1));
                    let w = charge * (pb - pa) / (cb - ca) / m as f64;
                    let phase: f64 = rng.random();
                    let x = (0..m).map(|i| [cosine_inverse_cdf((i as f64 + phase) / m as f64, alpha, k, a, b), 0.0, 0.0]);
                    (x.collect(), v, w)
                })
                .collect();
            let mut ws = Vec::with_capacity(n);
            let mut at = 0;
            for (bx, v, w) in beams {
                let m = bx.len();
                xs[at..at + m].copy_from_slice(&bx);
                vs[at..at + m].fill([v, 0.0, 0.0]);
                ws.resize(at + m, w);
                at += m;
            }
            for x in &mut xs {
                if x[0] >= b {
                    x[0] = a;
                }
            }
            return Ok(ParticleEnsemble::new(1, xs, vs, ws)?);
        }
    }
    for x in &mut xs {
        if x[0] >= b {
            x[0] = a;
        }
    }
    let w = spec.total_charge() / n as f64;
    Ok(ParticleEnsemble::new(1, xs, vs, vec![w; n])?)
}

pub fn sample_landau(spec: &ScenarioSpec) -> Result<ParticleEnsemble, ScenarioError> {
    match spec.variant {
        Variant::Landau { alpha, k } => sample_1d(spec, alpha, k, VelocityLaw::Maxwellian),
        _ => Err(ScenarioError::WrongVariant),
    }
}

pub fn sample_two_stream(spec: &ScenarioSpec) -> Result<ParticleEnsemble, ScenarioError> {
    match spec.variant {
        Variant::TwoStream { alpha, k } => sample_1d(spec, alpha, k, VelocityLaw::TwoStream),
        _ => Err(ScenarioError::WrongVariant),
    }
}

pub fn sample_bump_on_tail(spec: &ScenarioSpec) -> Result<ParticleEnsemble, ScenarioError> {
    match spec.variant {
        Variant::BumpOnTail { alpha, k } => sample_1d(spec, alpha, k, VelocityLaw::BumpOnTail),
        _ => Err(ScenarioError::WrongVariant),
    }
}

pub fn sample_diocotron(spec: &ScenarioSpec) -> Result<ParticleEnsemble, ScenarioError> {
    let Variant::Diocotron { alpha, l, r_minus, r_plus, .. } = spec.variant else {
        return Err(ScenarioError::WrongVariant);
    };
    spec.validate()?;
    let n = spec.n_particles;
    let dens = |x: f64, y: f64| ring_density(x, y, alpha, l, r_minus, r_plus);
    let peak = 1.0 + alpha;
    let mut xs = vec![[0.0; 3]; n];
    let mut vs = vec![[0.0; 3]; n];
    let gauss = |rng: &mut ChaCha8Rng| -> [f64; 3] { [StandardNormal.sample(rng), StandardNormal.sample(rng), 0.0] };
    match spec.sampling {
        Sampling::Random => {
            xs.par_chunks_mut(STREAM_BLOCK).zip(vs.par_chunks_mut(STREAM_BLOCK)).enumerate().for_each(
                |(block, (xc, vc))| {
                    let mut rng = rng_for(spec.seed, block as u64);
                    for (x, v) in xc.iter_mut().zip(vc.iter_mut()) {
                        loop {
                            let px = rng.random_range(-r_plus..r_plus);
                            let py = rng.random_range(-r_plus..r_plus);
                            if rng.random::<f64>() * peak < dens(px, py) {
                                *x = [px, py, 0.0];
                                break;
                            }
                        }
                        *v = gauss(&mut rng);
                    }
                },
            );
        }
        Sampling::Stratified => {
            let g = STRATA_GRID;
            let h = 2.0 * r_plus / g as f64;
            // Cell masses by a 4×4 midpoint rule.
            let mass: Vec<f64> = (0..g * g)
                .into_par_iter()
                .map(|c| {
                    let (cx, cy) = (c % g, c / g);
                    let mut s = 0.0;
                    for i in 0..4 {
                        for j in 0..4 {
                            let x = -r_plus + (cx as f64 + (i as f64 + 0.5) / 4.0) * h;
                            let y = -r_plus + (cy as f64 + (j as f64 + 0.5) / 4.0) * h;
                            s += dens(x, y);
                        }
                    }
                    s
                })
                .collect();
            let total: f64 = crate::reduce::sum(&mass);
            let offset: f64 = rng_for(spec.seed, u64::MAX).random();
            let mut starts = Vec::with_capacity(g * g + 1);
            let mut cum = 0.0;
            starts.push(0usize);
            for m in &mass {
                cum += m;
                starts.push(((cum / total * n as f64 + offset).floor() as usize).min(n));
            }
            // The last boundary is ⌊n + offset⌋ = n.
            let last = starts.len() - 1;
            starts[last] = n;
            let cells: Vec<(usize, usize, usize)> =
                (0..g * g).filter(|&c| starts[c + 1] > starts[c]).map(|c| (c, starts[c], starts[c + 1])).collect();
            let samples: Vec<Vec<([f64; 3], [f64; 3])>> = cells
                .par_iter()
                .map(|&(c, s0, s1)| {
                    let mut rng = rng_for(spec.seed, c as u64);
                    let (cx, cy) = (c % g, c / g);
                    // Rigorous bound: (1 + α) times the radial profile
                    // maximized over the cell's radial extent.
                    let (x0, y0) = (-r_plus + cx as f64 * h, -r_plus + cy as f64 * h);
                    let near = |lo: f64, hi: f64| if lo > 0.0 { lo } else if hi < 0.0 { -hi } else { 0.0 };
                    let rmin = near(x0, x0 + h).hypot(near(y0, y0 + h));
                    let rmax = x0.abs().max((x0 + h).abs()).hypot(y0.abs().max((y0 + h).abs()));
                    let rc = 6.5f64.clamp(rmin, rmax);
                    let bound = peak * (-4.0 * (rc - 6.5) * (rc - 6.5)).exp();
                    (s0..s1)
                        .map(|_| loop {
                            let px = -r_plus + (cx as f64 + rng.random::<f64>()) * h;
                            let py = -r_plus + (cy as f64 + rng.random::<f64>()) * h;
                            if rng.random::<f64>() * bound < dens(px, py) {
                                break ([px, py, 0.0], gauss(&mut rng));
                            }
                        })
                        .collect()
                })
                .collect();
            for (s, (x, v)) in samples.into_iter().flatten().enumerate() {
                xs[s] = x;
                vs[s] = v;
            }
        }
    }
    let w = spec.total_charge() / n as f64;
    Ok(ParticleEnsemble::new(2, xs, vs, vec![w; n])?)
}

/// Dispatches on the scenario variant.
pub fn sample(spec: &ScenarioSpec) -> Result<ParticleEnsemble, ScenarioError> {
    match spec.variant {
        Variant::Landau { .. } => sample_landau(spec),
        Variant::TwoStream { .. } => sample_two_stream(spec),
        Variant::BumpOnTail { .. } => sample_bump_on_tail(spec),
        Variant::Diocotron { .. } => sample_diocotron(spec),
    }
}
