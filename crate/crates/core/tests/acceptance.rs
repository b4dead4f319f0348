//! Acceptance suite: one `PASS`/`FAIL` line per criterion.
//!
//! Runs without the libtest harness so the verdict lines are always printed.
//! `cargo test --test acceptance -- <substring>...` runs only the criteria
//! whose name contains one of the substrings.

mod common;

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hampic::bracket::{fields, poisson_map_defect, JacobiVerifier};
use hampic::config::RunConfig;
use hampic::diagnostics::{electric_energy, fit_damping_rate, linear_fit, unwrap_phases, FitOptions};
use hampic::fem::{Boundary, FemSpace, SolverConfig};
use hampic::integrators::{advance, flow_he, flow_hv, MagneticField, PicState, PicSystem, SplittingKind};
use hampic::particles::{total_charge, ParticleEnsemble, SmoothingKernel};
use hampic::runner::{read_diagnostics, run};
use hampic::scenarios::{sample, Sampling, ScenarioSpec, Variant};

type Outcome = (bool, String);

fn preset(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(format!("{name}.cfg"));
    RunConfig::parse_file(&path).unwrap()
}

fn scratch_dir(tag: &str) -> tempfile::TempDir {
    tempfile::Builder::new().prefix(&format!("acceptance-{tag}-")).tempdir().unwrap()
}

fn run_into(mut cfg: RunConfig, dir: &Path) -> PathBuf {
    cfg.output.dir = dir.to_path_buf();
    run(&cfg).unwrap();
    dir.join("diagnostics.csv")
}

// -- 1, 2: Landau damping rates ---------------------------------------------

fn landau_rate(name: &str, want: f64, rel_tol: f64, min_r2: Option<f64>) -> Outcome {
    let dir = scratch_dir(name);
    let rec = read_diagnostics(&run_into(preset(name), dir.path())).unwrap();
    let fit = fit_damping_rate(&rec.column(|r| r.t), &rec.column(|r| r.e_d), &FitOptions::default());
    match fit {
        Ok(f) => {
            let ok_gamma = (f.gamma - want).abs() <= rel_tol * want;
            let ok_r2 = min_r2.is_none_or(|m| f.r_squared >= m);
            (
                ok_gamma && ok_r2,
                format!("gamma={:.5} (target {want} ±{:.0}%), R²={:.4}, peaks={}", f.gamma, rel_tol * 100.0, f.r_squared, f.n_peaks),
            )
        }
        Err(e) => (false, format!("fit failed: {e}")),
    }
}

fn landau_k05() -> Outcome {
    landau_rate("landau_k05", 0.154, 0.15, Some(0.9))
}

fn landau_k03() -> Outcome {
    landau_rate("landau_k03", 0.0127, 0.30, None)
}

// -- 3: temporal convergence orders ------------------------------------------

fn run_landau(system: &PicSystem, start: &ParticleEnsemble, kind: SplittingKind, dt: f64, t_end: f64) -> ParticleEnsemble {
    let mut state = PicState::new(system, start.clone()).unwrap();
    for _ in 0..(t_end / dt).round() as usize {
        advance(system, &mut state, kind, dt).unwrap();
    }
    state.ensemble
}

/// RMS over markers of the periodic position distance and of the velocity
/// difference.
fn rms_errors(a: &ParticleEnsemble, b: &ParticleEnsemble, len: f64) -> (f64, f64) {
    let (mut sx, mut sv) = (0.0, 0.0);
    for s in 0..a.len() {
        let d = (a.positions()[s][0] - b.positions()[s][0]).rem_euclid(len);
        sx += d.min(len - d).powi(2);
        sv += (a.velocities()[s][0] - b.velocities()[s][0]).powi(2);
    }
    let n = a.len() as f64;
    ((sx / n).sqrt(), (sv / n).sqrt())
}

fn convergence_orders() -> Outcome {
    // The delta kernel gives a force that is piecewise constant in X, which
    // caps any splitting at first order; a C¹ kernel is needed here.
    let spec = ScenarioSpec::new(Variant::Landau { alpha: 0.001, k: 0.5 }, 10_000, 1).with_sampling(Sampling::Stratified);
    let d = spec.domain();
    let len = d.x[0].1 - d.x[0].0;
    let space = FemSpace::new(&d.x, &[128], 1, Boundary::Periodic).unwrap();
    let kernel = SmoothingKernel::BSpline { degree: 1, width: len / 128.0 };
    let mut system = PicSystem::new(space, kernel, spec.rho0(), MagneticField::default());
    system.solver.tol = 1e-12;
    let start = sample(&spec).unwrap();
    let dts: Vec<f64> = (0..5).map(|i| 0.5f64.powi(i + 1)).collect();
    let reference = run_landau(&system, &start, SplittingKind::Strang, dts[4] / 64.0, 1.0);
    let log_dt: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let mut ok = true;
    let mut msg = Vec::new();
    for (kind, lo, hi) in [(SplittingKind::Lie, 0.8, 1.2), (SplittingKind::Strang, 1.8, 2.2)] {
        let errs: Vec<(f64, f64)> = dts.iter().map(|&dt| rms_errors(&run_landau(&system, &start, kind, dt, 1.0), &reference, len)).collect();
        let sx = linear_fit(&log_dt, &errs.iter().map(|e| e.0.ln()).collect::<Vec<_>>()).slope;
        let sv = linear_fit(&log_dt, &errs.iter().map(|e| e.1.ln()).collect::<Vec<_>>()).slope;
        ok &= (lo..=hi).contains(&sx) && (lo..=hi).contains(&sv);
        msg.push(format!("{kind:?} X {sx:.3} V {sv:.3} (want [{lo}, {hi}])"));
    }
    (ok, msg.join("; "))
}

// -- 4: exact sub-flow invariants --------------------------------------------

fn speed(v: &[f64; 3]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn subflow_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let box1 = FemSpace::new(&[(0.0, 4.0 * PI)], &[32], 1, Boundary::Periodic).unwrap();

    // H_v: speeds are invariant.
    let mut worst_speed: f64 = 0.0;
    for _ in 0..1000 {
        let n = 16;
        let xs: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(0.0..4.0 * PI))).collect();
        let vs: Vec<[f64; 3]> = (0..n).map(|_| [0, 1, 2].map(|_| rng.random_range(-5.0..5.0))).collect();
        let mut ens = ParticleEnsemble::new(1, xs, vs.clone(), vec![1.0; n]).unwrap();
        let b = [0, 1, 2].map(|_| rng.random_range(-3.0..3.0));
        let field = if rng.random_bool(0.5) { MagneticField::uniform(b) } else { MagneticField::scaled(b, rng.random_range(0.01..1.0)) };
        flow_hv(&mut ens, &field, &box1, rng.random_range(-1.0..1.0));
        for (v, v0) in ens.velocities().iter().zip(&vs) {
            worst_speed = worst_speed.max((speed(v) - speed(v0)).abs() / speed(v0));
        }
    }

    // H_e: positions untouched, electric energy unchanged.
    let mut x_exact = true;
    let mut worst_he: f64 = 0.0;
    let solver = SolverConfig { tol: 1e-10, max_iter: None };
    for seed in 0..1000u64 {
        let spec = ScenarioSpec::new(Variant::Landau { alpha: rng.random_range(0.01..0.5), k: 0.5 }, 200, seed);
        let mut system = PicSystem::new(box1.clone(), SmoothingKernel::Delta, spec.rho0(), MagneticField::default());
        system.solver = solver;
        let mut ens = sample(&spec).unwrap();
        ens.wrap_into(&system.space);
        let before = ens.positions().to_vec();
        let phi = flow_he(&system, &mut ens, rng.random_range(-1.0..1.0), None).unwrap();
        x_exact &= ens.positions() == before.as_slice();
        // A different starting guess takes a different CG path.
        let guess: Vec<f64> = phi.phi.iter().map(|p| 0.5 * p + 1e-3).collect();
        let after = system.solve_field(&ens, Some(&guess)).unwrap();
        let he0 = 0.5 * electric_energy(&phi.phi, &system.stiffness).unwrap().powi(2);
        let he1 = 0.5 * electric_energy(&after.phi, &system.stiffness).unwrap().powi(2);
        worst_he = worst_he.max((he1 - he0).abs() / he0);
    }

    // Charge across composed steps.
    let spec = ScenarioSpec::new(Variant::landau(), 2000, 3);
    let system = PicSystem::new(box1.clone(), SmoothingKernel::Delta, spec.rho0(), MagneticField::default());
    let mut state = PicState::new(&system, sample(&spec).unwrap()).unwrap();
    let c0 = total_charge(&state.ensemble).to_bits();
    let mut charge_exact = true;
    for n in 0..1000 {
        let kind = if n % 2 == 0 { SplittingKind::Strang } else { SplittingKind::Lie };
        advance(&system, &mut state, kind, 0.05).unwrap();
        charge_exact &= total_charge(&state.ensemble).to_bits() == c0;
    }

    // Energy is quadratic in Φ, so a residual tolerance τ allows ~τ relative.
    let he_tol = 10.0 * solver.tol;
    (
        worst_speed <= 1e-13 && x_exact && worst_he <= he_tol && charge_exact,
        format!(
            "max |V| drift {worst_speed:.2e} (≤1e-13), X bit-exact {x_exact}, max H_e drift {worst_he:.2e} (≤{he_tol:e}), charge bit-exact {charge_exact}"
        ),
    )
}

// -- 5: energy and momentum boundedness --------------------------------------

/// `(|slope|, std)` of the least-squares line through `(t, y)`.
fn trend(t: &[f64], y: &[f64]) -> (f64, f64) {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    let sd = (y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / y.len() as f64).sqrt();
    (linear_fit(t, y).slope.abs(), sd)
}

fn energy_momentum_bounds() -> Outcome {
    let dir = scratch_dir("two_stream");
    let cfg = preset("two_stream");
    let rec = read_diagnostics(&run_into(cfg.clone(), dir.path())).unwrap();
    let t = rec.column(|r| r.t);
    let h = rec.column(|r| r.h);
    let p = rec.column(|r| r.px);
    let dev: Vec<f64> = h.iter().map(|v| (v - h[0]).abs() / h[0]).collect();
    let (slope_e, sd_e) = trend(&t, &dev);
    let span = t[t.len() - 1] - t[0];

    // Envelope of |P − P₀|: the maximum over each of 10 equal windows.
    let dp: Vec<f64> = p.iter().map(|v| (v - p[0]).abs()).collect();
    let w = dp.len().div_ceil(10);
    let env: Vec<f64> = dp.chunks(w).map(|c| c.iter().copied().fold(0.0, f64::max)).collect();
    let tc: Vec<f64> = t.chunks(w).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    let (slope_p, sd_p) = trend(&tc, &env);
    // Momentum scale Σ ω|V| of the initial state.
    let start = sample(&cfg.scenario).unwrap();
    let scale: f64 = start.velocities().iter().zip(start.weights()).map(|(v, w)| w * speed(v)).sum();
    let max_dp = dp.iter().copied().fold(0.0, f64::max);

    let ok = slope_e < 0.2 * sd_e && slope_p < 0.2 * sd_p && max_dp <= 1e-4 * scale;
    (
        ok,
        format!(
            "energy: max dev {:.2e}, |slope| {slope_e:.2e}/unit t vs 0.2·std {:.2e} (slope·T/std = {:.2}); momentum: max |ΔP| {max_dp:.2e} (≤1e-4·Σω|V| = {:.2e}), envelope |slope| {slope_p:.2e} vs 0.2·std {:.2e}; envelope {}",
            dev.iter().copied().fold(0.0, f64::max),
            0.2 * sd_e,
            slope_e * span / sd_e,
            1e-4 * scale,
            0.2 * sd_p,
            env.iter().map(|v| format!("{v:.1e}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// -- 6: Jacobi identity -------------------------------------------------------

fn random_markers(np: usize, rng: &mut ChaCha8Rng) -> ParticleEnsemble {
    let mut arr = || [0, 1, 2].map(|_| rng.random_range(-2.0..2.0));
    let xs: Vec<_> = (0..np).map(|_| arr()).collect();
    let vs: Vec<_> = (0..np).map(|_| arr()).collect();
    let ws: Vec<_> = (0..np).map(|_| rng.random_range(0.3..2.0)).collect();
    ParticleEnsemble::new(3, xs, vs, ws).unwrap()
}

fn jacobi_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // The last field has nonzero partials in every direction that cancel
    // only in the divergence.
    let free: [(&str, fn([f64; 3]) -> [f64; 3]); 4] = [
        ("constant", fields::constant),
        ("divfree", fields::divergence_free),
        ("divfree-nonlinear", fields::divergence_free_nonlinear),
        ("divfree-coupled", |x| [x[0] * x[2].cos(), -x[1] * x[2].cos(), (x[0] * x[1]).sin()]),
    ];
    let mut worst: f64 = 0.0;
    let mut div_ok = true;
    let mut worst_div_rel: f64 = 0.0;
    for np in 1..=4 {
        for _ in 0..3 {
            let ens = random_markers(np, &mut rng);
            for (_, f) in &free {
                let v = JacobiVerifier::with_options(ens.positions(), ens.weights(), f, 1e-4, true);
                worst = worst.max(v.max_residual_all());
            }
            let report = JacobiVerifier::new(&ens, &fields::unit_divergence).report();
            let best = report
                .div_driven()
                .map(|(r, want)| (r.residual.abs() - want).abs() / want)
                .fold(f64::INFINITY, f64::min);
            worst_div_rel = worst_div_rel.max(best);
            div_ok &= best <= 0.1 && report.max_zero_expected() <= 1e-8;
        }
    }
    (
        worst <= 1e-8 && div_ok,
        format!("max residual (div B = 0) {worst:.2e} (≤1e-8); div B = 1: worst best-triple mismatch {:.2e} of 1/ω² (≤10%)", worst_div_rel),
    )
}

// -- 7: Poisson map -----------------------------------------------------------

fn poisson_map() -> Outcome {
    let space = FemSpace::new(&[(-4.0, 4.0), (-4.0, 4.0)], &[8], 1, Boundary::DirichletZero).unwrap();
    let mut system = PicSystem::new(space, SmoothingKernel::Delta, 0.0, MagneticField::uniform([0.2, -0.4, 1.0]));
    system.solver.tol = 1e-13;
    let ens = ParticleEnsemble::new(
        2,
        vec![[0.37, -0.81, 0.2], [-1.43, 0.66, -0.1]],
        vec![[0.5, -0.3, 0.1], [-0.2, 0.4, 0.25]],
        vec![0.8, 1.3],
    )
    .unwrap();
    let d = poisson_map_defect(&system, &ens, SplittingKind::Strang, 0.1).unwrap();
    (d <= 1e-6, format!("‖JKJᵀ − K‖∞ = {d:.2e} (≤1e-6)"))
}

// -- 8: FEM manufactured solutions -------------------------------------------

fn fem_convergence() -> Outcome {
    let cells = [16, 32, 64, 128];
    let slope = |len: f64, err: &dyn Fn(usize) -> f64| {
        let h: Vec<f64> = cells.iter().map(|&n| len / n as f64).collect();
        let e: Vec<f64> = cells.iter().map(|&n| err(n)).collect();
        common::loglog_slope(&h, &e)
    };
    let sp = slope(2.0 * PI, &|n| {
        common::fem_l2_error(&[(0.0, 2.0 * PI)], n, 1, Boundary::Periodic, |x| x[0].sin(), |x| x[0].sin())
    });
    let sd = slope(1.0, &|n| {
        common::fem_l2_error(&[(0.0, 1.0)], n, 1, Boundary::DirichletZero, |x| PI * PI * (PI * x[0]).sin(), |x| (PI * x[0]).sin())
    });
    let ok = (sp - 2.0).abs() <= 0.1 && (sd - 2.0).abs() <= 0.1;
    (ok, format!("L² slopes: periodic {sp:.3}, Dirichlet {sd:.3} (want 2 ± 0.1)"))
}

// -- 9: Strang time symmetry --------------------------------------------------

fn time_symmetry() -> Outcome {
    let spec = ScenarioSpec::new(Variant::Landau { alpha: 0.1, k: 0.5 }, 1000, 5);
    let d = spec.domain();
    let space = FemSpace::new(&d.x, &[128], 1, Boundary::Periodic).unwrap();
    let mut system = PicSystem::new(space, SmoothingKernel::Delta, spec.rho0(), MagneticField::default());
    system.solver.tol = 1e-13;
    let mut state = PicState::new(&system, sample(&spec).unwrap()).unwrap();
    let start = state.ensemble.clone();
    let dt = 0.1;
    advance(&system, &mut state, SplittingKind::Strang, dt).unwrap();
    advance(&system, &mut state, SplittingKind::Strang, -dt).unwrap();
    let len = d.x[0].1 - d.x[0].0;
    let (mut dx, mut dv): (f64, f64) = (0.0, 0.0);
    let vmax = start.velocities().iter().map(|v| v[0].abs()).fold(0.0, f64::max);
    for (a, b) in state.ensemble.positions().iter().zip(start.positions()) {
        let r = (a[0] - b[0]).rem_euclid(len);
        dx = dx.max(r.min(len - r));
    }
    for (a, b) in state.ensemble.velocities().iter().zip(start.velocities()) {
        dv = dv.max((a[0] - b[0]).abs());
    }
    let (rx, rv) = (dx / len, dv / vmax);
    (rx <= 1e-10 && rv <= 1e-10, format!("max relative return error: X {rx:.2e}, V {rv:.2e} (≤1e-10)"))
}

// -- 10: diocotron mode growth -----------------------------------------------

struct ModeSeries {
    t: Vec<f64>,
    amp: Vec<Vec<f64>>,
    arg: Vec<Vec<f64>>,
}

fn read_modes(path: &Path) -> ModeSeries {
    let text = fs::read_to_string(path).unwrap();
    let mut s = ModeSeries { t: Vec::new(), amp: vec![Vec::new(); 9], arg: vec![Vec::new(); 9] };
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        s.t.push(v[0]);
        for m in 1..=8 {
            s.amp[m].push(v[2 * m - 1]);
            s.arg[m].push(v[2 * m]);
        }
    }
    s
}

fn diocotron_run(b_sign: f64) -> ModeSeries {
    let mut cfg = preset("diocotron_eps01");
    cfg.t_end = 30.0;
    cfg.output.density_interval = None;
    if let Variant::Diocotron { b_ext, .. } = &mut cfg.scenario.variant {
        b_ext[2] *= b_sign;
    }
    let dir = scratch_dir("diocotron");
    run_into(cfg, dir.path());
    read_modes(&dir.path().join("modes.csv"))
}

fn diocotron_growth() -> Outcome {
    let fwd = diocotron_run(1.0);
    let rev = diocotron_run(-1.0);
    let last = fwd.t.len() - 1;
    let a5 = &fwd.amp[5];
    let growth = a5[last] / a5[0];
    let dominant = (1..=8).filter(|&m| m != 5).all(|m| fwd.amp[m][last] < a5[last]);
    let drift = |s: &ModeSeries| linear_fit(&s.t, &unwrap_phases(&s.arg[5])).slope;
    let (wf, wr) = (drift(&fwd), drift(&rev));
    let others: Vec<String> = (1..=8).filter(|&m| m != 5).map(|m| format!("{m}:{:.1e}", fwd.amp[m][last])).collect();
    (
        growth >= 3.0 && dominant && wf * wr < 0.0,
        format!(
            "A5 {:.2e} -> {:.2e} (×{growth:.2}, want ≥3); other modes at T {}; dArg5/dt {wf:+.4} vs reversed B {wr:+.4}",
            a5[0],
            a5[last],
            others.join(" ")
        ),
    )
}

// -- 11: determinism ----------------------------------------------------------

fn determinism() -> Outcome {
    let mut cfg = RunConfig::parse_str("scenario = landau\nn_particles = 50000\nt_end = 2\nthreads = 4\n").unwrap();
    cfg.output.interval = 0.01;
    let (a, b) = (scratch_dir("det-a"), scratch_dir("det-b"));
    let ca = fs::read(run_into(cfg.clone(), a.path())).unwrap();
    let cb = fs::read(run_into(cfg, b.path())).unwrap();
    (ca == cb, format!("diagnostics.csv: {} bytes, identical {}", ca.len(), ca == cb))
}

const CRITERIA: &[(&str, fn() -> Outcome)] = &[
    ("1 landau_k05_damping_rate", landau_k05),
    ("2 landau_k03_damping_rate", landau_k03),
    ("3 convergence_orders", convergence_orders),
    ("4 subflow_invariants", subflow_invariants),
    ("5 energy_momentum_bounds", energy_momentum_bounds),
    ("6 jacobi_identity", jacobi_identity),
    ("7 poisson_map", poisson_map),
    ("8 fem_manufactured_convergence", fem_convergence),
    ("9 strang_time_symmetry", time_symmetry),
    ("10 diocotron_mode_growth [long]", diocotron_growth),
    ("11 determinism", determinism),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with("--")).collect();
    let mut failed = 0;
    for (name, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let (ok, detail) = check();
        println!("{} {name}: {detail} [{:.1}s]", if ok { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
        failed += usize::from(!ok);
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
