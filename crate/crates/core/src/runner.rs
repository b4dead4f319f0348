//! The main loop: sample, assemble, then step with periodic diagnostics and
//! snapshots.
//!
//! Output directory layout:
//!
//! | file                   | contents                                      |
//! |------------------------|-----------------------------------------------|
//! | `config.resolved`      | canonical echo of the resolved configuration  |
//! | `diagnostics.csv`      | `t,E_d,H,Px,Py,C` after `# key=value` lines    |
//! | `modes.csv`            | 2D only: `t`, then `A_m,arg_m` for m = 1..8    |
//! | `snapshot_NNNNNN.txt`  | particle snapshot after step N                |
//! | `snapshot_final.txt`   | particle snapshot at the end of the run       |
//! | `density_NNNNNN.txt`   | gridded charge density after step N           |
//!
//! Tables are written one whole line at a time and flushed per line, so a
//! failed run leaves every row before the failure intact.

use std::fs;
use std::io::{self, LineWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::diagnostics::{density_grid, electric_energy, mode_amplitudes, total_energy, write_atomic, DiagnosticsRow, GridSpec, CSV_HEADER};
use crate::fem::build_space;
use crate::integrators::{advance, IntegratorError, PicState, PicSystem, SplittingKind};
use crate::particles::{total_charge, total_momentum, write_snapshot, DepositOptions};
use crate::reduce::Reduction;
use crate::scenarios::sample;

/// Highest azimuthal mode written to `modes.csv`.
pub const MAX_MODE: u32 = 8;

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error("step {step}: {source}")]
    Solver { step: usize, source: IntegratorError },
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
}

impl RunError {
    /// Process exit status: 2 configuration, 3 solver, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) | RunError::Setup(_) => 2,
            RunError::Solver { .. } => 3,
            RunError::Io(_) => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub rows: usize,
    pub final_time: f64,
    pub out_dir: PathBuf,
}

/// The discrete system a configuration describes.
pub fn build_system(cfg: &RunConfig) -> Result<PicSystem, RunError> {
    let spec = &cfg.scenario;
    let domain = spec.domain();
    let space = build_space(spec.variant.dim(), &domain.x, &cfg.cells(), cfg.order, cfg.bc)
        .map_err(|e| RunError::Setup(e.to_string()))?;
    let mut system = PicSystem::new(space, cfg.kernel, spec.rho0(), spec.magnetic_field());
    system.solver = cfg.solver;
    system.deposit = DepositOptions {
        reduction: if cfg.deterministic_reduction { Reduction::Deterministic } else { Reduction::Fast },
        strategy: cfg.deposit_strategy,
    };
    Ok(system)
}

/// Diagnostics of the current state. Strang ends with a position update, so
/// the potential is re-solved at the current positions first.
pub fn diagnostics_row(
    system: &PicSystem,
    state: &PicState,
    kind: SplittingKind,
) -> Result<DiagnosticsRow, IntegratorError> {
    let fresh;
    let phi = match kind {
        SplittingKind::Lie => &state.phi.phi,
        SplittingKind::Strang => {
            fresh = system.solve_field(&state.ensemble, Some(&state.phi.phi))?;
            &fresh.phi
        }
    };
    let m = &system.stiffness;
    let e_d = electric_energy(phi, m).expect("potential matches the space");
    let h = total_energy(&state.ensemble, phi, m).expect("potential matches the space");
    let p = total_momentum(&state.ensemble);
    Ok(DiagnosticsRow { t: state.time, e_d, h, px: p[0], py: p[1], c: total_charge(&state.ensemble) })
}

fn metadata(cfg: &RunConfig) -> Vec<(String, String)> {
    let s = &cfg.scenario;
    let cells: Vec<String> = cfg.cells().iter().map(|n| n.to_string()).collect();
    vec![
        ("scenario".into(), s.variant.name().into()),
        ("scheme".into(), format!("{:?}", cfg.scheme).to_lowercase()),
        ("dt".into(), cfg.dt.to_string()),
        ("t_end".into(), cfg.t_end.to_string()),
        ("n_particles".into(), s.n_particles.to_string()),
        ("n_cells".into(), cells.join("x")),
        ("seed".into(), s.seed.to_string()),
        ("sampling".into(), format!("{:?}", s.sampling).to_lowercase()),
    ]
}

struct Outputs {
    dir: PathBuf,
    csv: LineWriter<fs::File>,
    modes: Option<LineWriter<fs::File>>,
    rows: usize,
}

impl Outputs {
    fn create(cfg: &RunConfig) -> io::Result<Self> {
        let dir = cfg.output.dir.clone();
        fs::create_dir_all(&dir)?;
        write_atomic(&dir.join("config.resolved"), cfg.to_text().as_bytes())?;
        let mut csv = LineWriter::new(fs::File::create(dir.join("diagnostics.csv"))?);
        for (k, v) in metadata(cfg) {
            writeln!(csv, "# {k}={v}")?;
        }
        writeln!(csv, "{CSV_HEADER}")?;
        let modes = if cfg.scenario.variant.dim() == 2 {
            let mut w = LineWriter::new(fs::File::create(dir.join("modes.csv"))?);
            let cols: Vec<String> = (1..=MAX_MODE).map(|m| format!("A{m},arg{m}")).collect();
            writeln!(w, "t,{}", cols.join(","))?;
            Some(w)
        } else {
            None
        };
        Ok(Self { dir, csv, modes, rows: 0 })
    }

    fn row(&mut self, system: &PicSystem, state: &PicState, kind: SplittingKind, step: usize) -> Result<(), RunError> {
        let row = diagnostics_row(system, state, kind).map_err(|source| RunError::Solver { step, source })?;
        writeln!(self.csv, "{}", row.to_csv())?;
        if let Some(w) = &mut self.modes {
            let cols: Vec<String> =
                mode_amplitudes(&state.ensemble, MAX_MODE).iter().map(|m| format!("{},{}", m.amplitude, m.phase)).collect();
            writeln!(w, "{},{}", state.time, cols.join(","))?;
        }
        self.rows += 1;
        Ok(())
    }

    fn snapshot(&self, state: &PicState, name: &str) -> io::Result<()> {
        let mut buf = Vec::new();
        write_snapshot(&state.ensemble, state.time, &mut buf)?;
        write_atomic(&self.dir.join(name), &buf)
    }

    fn density(&self, cfg: &RunConfig, state: &PicState, step: usize) -> io::Result<()> {
        let spec = GridSpec { bounds: cfg.scenario.domain().x, cells: cfg.density_cells() };
        let grid = density_grid(&state.ensemble, &spec, state.time);
        write_atomic(&self.dir.join(format!("density_{step:06}.txt")), grid.to_text().as_bytes())
    }
}

/// Runs the configuration to completion on the configured worker count.
pub fn run(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    cfg.validate()?;
    match cfg.threads {
        None => run_here(cfg),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| RunError::Setup(e.to_string()))?
            .install(|| run_here(cfg)),
    }
}

fn run_here(cfg: &RunConfig) -> Result<RunSummary, RunError> {
    let system = build_system(cfg)?;
    let ensemble = sample(&cfg.scenario).map_err(|e| RunError::Setup(e.to_string()))?;
    let mut out = Outputs::create(cfg)?;
    let mut state = PicState::new(&system, ensemble).map_err(|source| RunError::Solver { step: 0, source })?;
    let steps = cfg.steps();
    let every_row = cfg.every(cfg.output.interval);
    let every_snap = cfg.output.snapshot_interval.map(|iv| cfg.every(iv));
    let every_density = cfg.output.density_interval.map(|iv| cfg.every(iv));
    let due = |every: Option<usize>, n: usize| every.is_some_and(|e| n % e == 0);

    out.row(&system, &state, cfg.scheme, 0)?;
    if due(every_density, 0) {
        out.density(cfg, &state, 0)?;
    }
    for n in 1..=steps {
        if let Err(source) = advance(&system, &mut state, cfg.scheme, cfg.dt) {
            out.csv.flush()?;
            return Err(RunError::Solver { step: n, source });
        }
        // Accumulated `t += Δt` drifts; report the nominal time instead.
        state.time = n as f64 * cfg.dt;
        if n % every_row == 0 || n == steps {
            out.row(&system, &state, cfg.scheme, n)?;
        }
        if due(every_snap, n) && n != steps {
            out.snapshot(&state, &format!("snapshot_{n:06}.txt"))?;
        }
        if due(every_density, n) {
            out.density(cfg, &state, n)?;
        }
    }
    out.snapshot(&state, "snapshot_final.txt")?;
    out.csv.flush()?;
    Ok(RunSummary { steps, rows: out.rows, final_time: state.time, out_dir: out.dir.clone() })
}

/// Reads a diagnostics CSV written by [`run`].
pub fn read_diagnostics(path: &Path) -> Result<crate::diagnostics::DiagnosticsRecord, RunError> {
    let text = fs::read_to_string(path)?;
    crate::diagnostics::DiagnosticsRecord::parse_csv(&text).map_err(|e| RunError::Setup(e.to_string()))
}
