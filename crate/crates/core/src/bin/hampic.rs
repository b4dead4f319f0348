use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hampic::bench::{bench_csv, bench_speedup};
use hampic::bracket::{fields, JacobiVerifier};
use hampic::config::RunConfig;
use hampic::diagnostics::{fit_damping_rate, FitOptions};
use hampic::particles::ParticleEnsemble;
use hampic::runner::{read_diagnostics, run, RunError};

/// Jacobi residual accepted as zero.
const JACOBI_TOL: f64 = 1e-8;

#[derive(Parser)]
#[command(name = "hampic", version, about = "Structure-preserving particle-in-cell runs for magnetized Vlasov–Poisson")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a configuration to completion.
    Run {
        config: PathBuf,
        #[arg(long)]
        threads: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Time the deposit and push phases at several worker counts.
    Bench {
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        threads: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Check the Jacobi identity of the discrete bracket on random markers.
    VerifyBracket {
        #[arg(long, default_value_t = 3)]
        np: usize,
        #[arg(long, value_enum, default_value_t = FieldChoice::Divfree)]
        field: FieldChoice,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Fit the damping rate of `E_d` in a diagnostics CSV.
    FitGamma {
        csv: PathBuf,
        #[arg(long)]
        t_min: Option<f64>,
        #[arg(long)]
        fallback: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FieldChoice {
    Constant,
    Divfree,
    Divful,
}

fn load(path: &PathBuf) -> Result<RunConfig, RunError> {
    Ok(RunConfig::parse_file(path)?)
}

fn cmd_run(config: PathBuf, threads: Option<usize>, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), RunError> {
    let mut cfg = load(&config)?;
    if let Some(n) = threads {
        cfg.threads = Some(n);
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    if let Some(s) = seed {
        cfg.scenario.seed = s;
    }
    let summary = run(&cfg)?;
    println!(
        "{} steps, {} rows, t = {} -> {}",
        summary.steps,
        summary.rows,
        summary.final_time,
        summary.out_dir.display()
    );
    Ok(())
}

fn cmd_bench(config: PathBuf, threads: Vec<usize>, reps: usize) -> Result<(), RunError> {
    let cfg = load(&config)?;
    cfg.validate()?;
    if threads.is_empty() || threads.contains(&0) {
        return Err(RunError::Setup("--threads needs positive counts".into()));
    }
    print!("{}", bench_csv(&bench_speedup(&cfg, &threads, reps)?));
    Ok(())
}

fn cmd_verify(np: usize, field: FieldChoice, seed: u64) -> Result<bool, RunError> {
    if !(1..=4).contains(&np) {
        return Err(RunError::Setup(format!("--np must be 1..=4, got {np}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut arr = || [0, 1, 2].map(|_| rng.random_range(-2.0..2.0));
    let xs: Vec<_> = (0..np).map(|_| arr()).collect();
    let vs: Vec<_> = (0..np).map(|_| arr()).collect();
    let ws: Vec<_> = (0..np).map(|s| 0.5 + 0.4 * s as f64).collect();
    let ens = ParticleEnsemble::new(3, xs, vs, ws).map_err(|e| RunError::Setup(e.to_string()))?;
    let b: &dyn Fn([f64; 3]) -> [f64; 3] = match field {
        FieldChoice::Constant => &fields::constant,
        FieldChoice::Divfree => &fields::divergence_free,
        FieldChoice::Divful => &fields::unit_divergence,
    };
    let report = JacobiVerifier::new(&ens, b).report();
    print!("{}", report.to_table(JACOBI_TOL));
    let zero_ok = report.max_zero_expected() <= JACOBI_TOL;
    let div_ok = match field {
        FieldChoice::Divful => report.div_driven().any(|(r, want)| (r.residual.abs() - want).abs() <= 0.1 * want),
        _ => report.div_driven().all(|(r, _)| r.residual.abs() <= JACOBI_TOL),
    };
    Ok(zero_ok && div_ok)
}

fn cmd_fit(csv: PathBuf, t_min: Option<f64>, fallback: bool) -> Result<(), RunError> {
    let record = read_diagnostics(&csv)?;
    let mut opts = FitOptions { direct_fallback: fallback, ..FitOptions::default() };
    if let Some(t) = t_min {
        opts.t_min = t;
    }
    let t = record.column(|r| r.t);
    let e = record.column(|r| r.e_d);
    let fit = fit_damping_rate(&t, &e, &opts).map_err(|e| RunError::Setup(e.to_string()))?;
    println!("gamma={} r_squared={} peaks={} fallback={}", fit.gamma, fit.r_squared, fit.n_peaks, fit.used_fallback);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, threads, out, seed } => cmd_run(config, threads, out, seed),
        Command::Bench { config, threads, reps } => cmd_bench(config, threads, reps),
        Command::VerifyBracket { np, field, seed } => match cmd_verify(np, field, seed) {
            Ok(true) => Ok(()),
            Ok(false) => {
                eprintln!("Jacobi check failed");
                return ExitCode::from(1);
            }
            Err(e) => Err(e),
        },
        Command::FitGamma { csv, t_min, fallback } => cmd_fit(csv, t_min, fallback),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
