//! Strong-scaling timings of the two particle phases.

use std::time::Instant;

use crate::config::RunConfig;
use crate::integrators::{flow_hv, kick};
use crate::particles::deposit_with;
use crate::runner::{build_system, RunError};
use crate::scenarios::sample;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub threads: usize,
    /// Seconds per call.
    pub deposit: f64,
    /// Seconds per `H_v` sub-step plus kick.
    pub push: f64,
    pub deposit_speedup: f64,
    pub push_speedup: f64,
}

pub const BENCH_HEADER: &str = "threads,deposit_s,push_s,deposit_speedup,push_speedup";

/// Times `reps` deposits and pushes of the configuration's initial ensemble
/// at each thread count. Speedups are relative to the first entry, which
/// should be 1.
pub fn bench_speedup(cfg: &RunConfig, thread_counts: &[usize], reps: usize) -> Result<Vec<BenchRow>, RunError> {
    let system = build_system(cfg)?;
    let mut ensemble = sample(&cfg.scenario).map_err(|e| RunError::Setup(e.to_string()))?;
    ensemble.wrap_into(&system.space);
    let phi = vec![0.0; system.space.n_dofs()];
    let reps = reps.max(1);
    let mut rows: Vec<BenchRow> = Vec::new();
    for &n in thread_counts {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().map_err(|e| RunError::Setup(e.to_string()))?;
        let (dep, push) = pool.install(|| -> Result<(f64, f64), RunError> {
            let load = || deposit_with(&ensemble, &system.kernel, &system.space, system.rho0, system.deposit);
            load().map_err(|e| RunError::Setup(e.to_string()))?;
            let t0 = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(load().map_err(|e| RunError::Setup(e.to_string()))?);
            }
            let dep = t0.elapsed().as_secs_f64() / reps as f64;
            let mut e = ensemble.clone();
            // Forward and backward sub-steps keep markers near their start.
            let t0 = Instant::now();
            for r in 0..reps {
                let tau = if r % 2 == 0 { cfg.dt } else { -cfg.dt };
                flow_hv(&mut e, &system.field, &system.space, tau);
                kick(&system, &mut e, &phi, tau);
            }
            Ok((dep, t0.elapsed().as_secs_f64() / reps as f64))
        })?;
        let (d1, p1) = rows.first().map_or((dep, push), |r| (r.deposit, r.push));
        rows.push(BenchRow { threads: n, deposit: dep, push, deposit_speedup: d1 / dep, push_speedup: p1 / push });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = format!("{BENCH_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.threads, r.deposit, r.push, r.deposit_speedup, r.push_speedup));
    }
    out
}
