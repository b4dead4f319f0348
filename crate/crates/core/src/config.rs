//! Run configuration: a line-oriented `key = value` format.
//!
//! ```text
//! # comment            (also `;`)
//! [section]            optional grouping; a key given under a section must
//!                      belong to it
//! key = value          one entry
//! a = 1, b = 2         several entries on one line; a comma only separates
//!                      entries when the next piece contains `=`, so list
//!                      values such as `b_ext = 0, 0, 1` stay intact
//! ```
//!
//! Keys are unique across the whole file. Every key except `scenario` is
//! optional; absent keys take scenario-dependent defaults. See
//! [`KEYS`] for the full list and [`RunConfig::to_text`] for the canonical
//! echo, which parses back to the same configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::fem::{Boundary, SolverConfig};
use crate::integrators::SplittingKind;
use crate::particles::{DepositStrategy, SmoothingKernel};
use crate::scenarios::{Domain, Sampling, ScenarioSpec, Variant};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: unknown section `[{section}]`")]
    UnknownSection { line: usize, section: String },
    #[error("line {line}: key `{key}` belongs in section [{expected}]")]
    WrongSection { line: usize, key: String, expected: String },
    #[error("line {line}: key `{key}` given twice")]
    Duplicate { line: usize, key: String },
    #[error("missing required key `{0}`")]
    Missing(String),
    #[error("key `{key}`: {msg}")]
    Invalid { key: String, msg: String },
    #[error("cannot read config: {0}")]
    Io(String),
}

/// Every accepted key with its section.
pub const KEYS: &[(&str, &str)] = &[
    ("scenario", "scenario"),
    ("alpha", "scenario"),
    ("k", "scenario"),
    ("l", "scenario"),
    ("r_minus", "scenario"),
    ("r_plus", "scenario"),
    ("eps", "scenario"),
    ("b_ext", "scenario"),
    ("n_particles", "scenario"),
    ("seed", "scenario"),
    ("sampling", "scenario"),
    ("x_domain", "scenario"),
    ("v_domain", "scenario"),
    ("scheme", "time"),
    ("dt", "time"),
    ("t_end", "time"),
    ("n_cells", "space"),
    ("order", "space"),
    ("bc", "space"),
    ("kernel", "space"),
    ("kernel_degree", "space"),
    ("kernel_width", "space"),
    ("solver_tol", "solver"),
    ("solver_max_iter", "solver"),
    ("output_dir", "output"),
    ("output_interval", "output"),
    ("snapshot_interval", "output"),
    ("density_interval", "output"),
    ("density_cells", "output"),
    ("threads", "parallel"),
    ("deterministic_reduction", "parallel"),
    ("deposit_strategy", "parallel"),
];

const SCENARIO_ONLY: &[(&str, &[&str])] = &[
    ("k", &["landau", "two_stream", "bump_on_tail"]),
    ("l", &["diocotron"]),
    ("r_minus", &["diocotron"]),
    ("r_plus", &["diocotron"]),
    ("eps", &["diocotron"]),
    ("b_ext", &["diocotron"]),
];

#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Time between diagnostics rows.
    pub interval: f64,
    /// Time between intermediate particle snapshots; the final snapshot is
    /// always written.
    pub snapshot_interval: Option<f64>,
    /// Time between gridded density dumps.
    pub density_interval: Option<f64>,
    pub density_cells: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub scheme: SplittingKind,
    pub dt: f64,
    pub t_end: f64,
    pub n_cells: Vec<usize>,
    pub order: usize,
    pub bc: Boundary,
    pub kernel: SmoothingKernel,
    pub solver: SolverConfig,
    pub output: OutputConfig,
    /// `None`: the worker pool's default size.
    pub threads: Option<usize>,
    pub deterministic_reduction: bool,
    pub deposit_strategy: DepositStrategy,
}

struct Entry {
    value: String,
}

fn section_of(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|(k, _)| *k == key).map(|&(_, s)| s)
}

fn split_entries(body: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for piece in body.split(',') {
        match out.last_mut() {
            Some(last) if !piece.contains('=') => {
                last.push(',');
                last.push_str(piece);
            }
            _ => out.push(piece.to_string()),
        }
    }
    out
}

fn read_entries(text: &str) -> Result<BTreeMap<String, Entry>, ConfigError> {
    let mut map = BTreeMap::new();
    let mut section: Option<String> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split(['#', ';']).next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(rest) = body.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("unterminated section header `{body}`") })?
                .trim();
            if !KEYS.iter().any(|&(_, s)| s == name) {
                return Err(ConfigError::UnknownSection { line, section: name.to_string() });
            }
            section = Some(name.to_string());
            continue;
        }
        for item in split_entries(body) {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line, msg: format!("expected `key = value`, got `{}`", item.trim()) })?;
            let (key, value) = (key.trim(), value.trim());
            let Some(home) = section_of(key) else {
                return Err(ConfigError::UnknownKey { line, key: key.to_string() });
            };
            if let Some(s) = &section {
                if s != home {
                    return Err(ConfigError::WrongSection { line, key: key.to_string(), expected: home.to_string() });
                }
            }
            if value.is_empty() {
                return Err(ConfigError::Syntax { line, msg: format!("key `{key}` has no value") });
            }
            if map.insert(key.to_string(), Entry { value: value.to_string() }).is_some() {
                return Err(ConfigError::Duplicate { line, key: key.to_string() });
            }
        }
    }
    Ok(map)
}

fn invalid(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { key: key.to_string(), msg: msg.into() }
}

struct Values(BTreeMap<String, Entry>);

impl Values {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(|e| e.value.as_str())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|e| invalid(key, format!("cannot parse `{v}`: {e}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|p| p.trim().parse().map_err(|e| invalid(key, format!("cannot parse `{}`: {e}", p.trim()))))
                    .collect()
            })
            .transpose()
    }

    fn optional_f64(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        match self.raw(key) {
            None | Some("none") => Ok(None),
            Some(_) => self.parse(key, 0.0).map(Some),
        }
    }

    fn bool(&self, key: &str, default: bool) -> Result<bool, ConfigError> {
        match self.raw(key) {
            None => Ok(default),
            Some("true" | "yes" | "on" | "1") => Ok(true),
            Some("false" | "no" | "off" | "0") => Ok(false),
            Some(v) => Err(invalid(key, format!("expected true/false, got `{v}`"))),
        }
    }
}

fn pairs(key: &str, xs: &[f64]) -> Result<Vec<(f64, f64)>, ConfigError> {
    if xs.len() % 2 != 0 || xs.is_empty() {
        return Err(invalid(key, "expected lower,upper pairs"));
    }
    Ok(xs.chunks(2).map(|p| (p[0], p[1])).collect())
}

struct Defaults {
    n_particles: usize,
    dt: f64,
    t_end: f64,
    n_cells: usize,
}

fn defaults(variant: &Variant) -> Defaults {
    match variant {
        Variant::Landau { .. } => Defaults { n_particles: 200_000, dt: 0.01, t_end: 30.0, n_cells: 128 },
        Variant::TwoStream { .. } => Defaults { n_particles: 200_000, dt: 0.01, t_end: 20.0, n_cells: 128 },
        Variant::BumpOnTail { .. } => Defaults { n_particles: 200_000, dt: 0.01, t_end: 20.0, n_cells: 256 },
        Variant::Diocotron { .. } => Defaults { n_particles: 1_000_000, dt: 0.1, t_end: 30.0, n_cells: 256 },
    }
}

impl RunConfig {
    /// Parses and validates; defaults fill every absent key.
    pub fn parse_str(text: &str) -> Result<Self, ConfigError> {
        let v = Values(read_entries(text)?);
        let name = v.raw("scenario").ok_or_else(|| ConfigError::Missing("scenario".into()))?;
        for (key, allowed) in SCENARIO_ONLY {
            if v.raw(key).is_some() && !allowed.contains(&name) {
                return Err(invalid(key, format!("does not apply to scenario `{name}`")));
            }
        }
        let variant = match name {
            "landau" | "two_stream" | "bump_on_tail" => {
                let (a0, k0) = match name {
                    "landau" => (0.001, 0.5),
                    "two_stream" => (0.01, 0.5),
                    _ => (0.04, 0.3),
                };
                let alpha = v.parse("alpha", a0)?;
                let k = v.parse("k", k0)?;
                match name {
                    "landau" => Variant::Landau { alpha, k },
                    "two_stream" => Variant::TwoStream { alpha, k },
                    _ => Variant::BumpOnTail { alpha, k },
                }
            }
            "diocotron" => {
                let b_ext = match v.list::<f64>("b_ext")? {
                    None => [0.0, 0.0, 1.0],
                    Some(b) => b.try_into().map_err(|_| invalid("b_ext", "expected three components"))?,
                };
                Variant::Diocotron {
                    alpha: v.parse("alpha", 0.2)?,
                    l: v.parse("l", 5)?,
                    r_minus: v.parse("r_minus", 5.0)?,
                    r_plus: v.parse("r_plus", 8.0)?,
                    eps: v.parse("eps", 0.1)?,
                    b_ext,
                }
            }
            other => return Err(invalid("scenario", format!("unknown scenario `{other}`"))),
        };
        let d = defaults(&variant);
        let sampling = match v.raw("sampling").unwrap_or("random") {
            "random" => Sampling::Random,
            "stratified" => Sampling::Stratified,
            other => return Err(invalid("sampling", format!("expected random|stratified, got `{other}`"))),
        };
        let mut scenario = ScenarioSpec::new(variant, v.parse("n_particles", d.n_particles)?, v.parse("seed", 1)?)
            .with_sampling(sampling);
        let mut domain: Domain = scenario.default_domain();
        if let Some(x) = v.list::<f64>("x_domain")? {
            domain.x = pairs("x_domain", &x)?;
        }
        match v.raw("v_domain") {
            None => {}
            Some("none") => domain.v = None,
            Some(_) => {
                let p = pairs("v_domain", &v.list::<f64>("v_domain")?.unwrap_or_default())?;
                if p.len() != 1 {
                    return Err(invalid("v_domain", "expected one lower,upper pair or `none`"));
                }
                domain.v = Some(p[0]);
            }
        }
        scenario.domain = Some(domain);

        let scheme = match v.raw("scheme").unwrap_or("strang") {
            "strang" => SplittingKind::Strang,
            "lie" => SplittingKind::Lie,
            other => return Err(invalid("scheme", format!("expected strang|lie, got `{other}`"))),
        };
        let dt = v.parse("dt", d.dt)?;
        let n_cells = v.list::<usize>("n_cells")?.unwrap_or_else(|| vec![d.n_cells]);
        let bc = match v.raw("bc") {
            None => scenario.boundary(),
            Some("periodic") => Boundary::Periodic,
            Some("dirichlet") => Boundary::DirichletZero,
            Some(other) => return Err(invalid("bc", format!("expected periodic|dirichlet, got `{other}`"))),
        };
        let kernel = match v.raw("kernel").unwrap_or("delta") {
            "delta" => {
                for key in ["kernel_degree", "kernel_width"] {
                    if v.raw(key).is_some() {
                        return Err(invalid(key, "only applies to kernel = bspline"));
                    }
                }
                SmoothingKernel::Delta
            }
            "bspline" => {
                let width = v.raw("kernel_width").ok_or_else(|| ConfigError::Missing("kernel_width".into()))?;
                let width = width.parse().map_err(|e| invalid("kernel_width", format!("cannot parse `{width}`: {e}")))?;
                SmoothingKernel::BSpline { degree: v.parse("kernel_degree", 1)?, width }
            }
            other => return Err(invalid("kernel", format!("expected delta|bspline, got `{other}`"))),
        };
        let solver = SolverConfig {
            tol: v.parse("solver_tol", SolverConfig::default().tol)?,
            max_iter: match v.raw("solver_max_iter") {
                None | Some("auto") => None,
                Some(_) => Some(v.parse("solver_max_iter", 0)?),
            },
        };
        let output = OutputConfig {
            dir: PathBuf::from(v.raw("output_dir").unwrap_or("out")),
            interval: v.parse("output_interval", dt)?,
            snapshot_interval: v.optional_f64("snapshot_interval")?,
            density_interval: v.optional_f64("density_interval")?,
            density_cells: v.list::<usize>("density_cells")?.unwrap_or_else(|| vec![128]),
        };
        let threads = match v.raw("threads") {
            None | Some("auto") => None,
            Some(_) => Some(v.parse("threads", 1)?),
        };
        let deposit_strategy = match v.raw("deposit_strategy").unwrap_or("particle_chunks") {
            "particle_chunks" => DepositStrategy::ParticleChunks,
            "domain_regions" => DepositStrategy::DomainRegions,
            other => {
                return Err(invalid("deposit_strategy", format!("expected particle_chunks|domain_regions, got `{other}`")))
            }
        };
        let cfg = RunConfig {
            scenario,
            scheme,
            dt,
            t_end: v.parse("t_end", d.t_end)?,
            n_cells,
            order: v.parse("order", 1)?,
            bc,
            kernel,
            solver,
            output,
            threads,
            deterministic_reduction: v.bool("deterministic_reduction", true)?,
            deposit_strategy,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scenario.validate().map_err(|e| invalid("scenario", e.to_string()))?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(invalid("t_end", format!("must be non-negative, got {}", self.t_end)));
        }
        let tiny = 1e-12 * self.dt;
        if !(self.output.interval >= self.dt - tiny) {
            return Err(invalid("output_interval", format!("must be at least dt = {}", self.dt)));
        }
        for (key, iv) in [("snapshot_interval", self.output.snapshot_interval), ("density_interval", self.output.density_interval)] {
            if let Some(iv) = iv {
                if !(iv >= self.dt - tiny) {
                    return Err(invalid(key, format!("must be at least dt = {}", self.dt)));
                }
            }
        }
        let dim = self.scenario.variant.dim();
        if self.n_cells.len() != 1 && self.n_cells.len() != dim {
            return Err(invalid("n_cells", format!("give 1 or {dim} values")));
        }
        if self.n_cells.iter().any(|&n| n < 2) {
            return Err(invalid("n_cells", "need at least 2 cells per axis"));
        }
        if self.output.density_cells.len() != 1 && self.output.density_cells.len() != dim {
            return Err(invalid("density_cells", format!("give 1 or {dim} values")));
        }
        if self.output.density_cells.contains(&0) {
            return Err(invalid("density_cells", "need at least 1 cell per axis"));
        }
        if !(1..=2).contains(&self.order) {
            return Err(invalid("order", "supported orders are 1 and 2"));
        }
        self.kernel.validate().map_err(|e| invalid("kernel", e.to_string()))?;
        if !(self.solver.tol > 0.0) {
            return Err(invalid("solver_tol", "must be positive"));
        }
        if self.solver.max_iter == Some(0) {
            return Err(invalid("solver_max_iter", "must be at least 1"));
        }
        if self.threads == Some(0) {
            return Err(invalid("threads", "must be at least 1"));
        }
        Ok(())
    }

    /// Number of steps: `⌊T/Δt⌋`, with a relative slack of 1e−9 so that
    /// e.g. `T = 0.3, Δt = 0.1` takes three steps.
    pub fn steps(&self) -> usize {
        (self.t_end / self.dt * (1.0 + 1e-9)).floor() as usize
    }

    /// Steps between events of period `interval` (at least one).
    pub fn every(&self, interval: f64) -> usize {
        ((interval / self.dt).round() as usize).max(1)
    }

    /// Cells per axis, expanded to the scenario dimension.
    pub fn cells(&self) -> Vec<usize> {
        expand(&self.n_cells, self.scenario.variant.dim())
    }

    pub fn density_cells(&self) -> Vec<usize> {
        expand(&self.output.density_cells, self.scenario.variant.dim())
    }

    /// Canonical echo: every resolved key, grouped by section.
    pub fn to_text(&self) -> String {
        let s = &self.scenario;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let join = |xs: &[f64]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let joinu = |xs: &[usize]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let opt = |x: Option<f64>| x.map_or("none".to_string(), |x| x.to_string());

        kv("[scenario]\nscenario", s.variant.name().to_string());
        match s.variant {
            Variant::Landau { alpha, k } | Variant::TwoStream { alpha, k } | Variant::BumpOnTail { alpha, k } => {
                kv("alpha", alpha.to_string());
                kv("k", k.to_string());
            }
            Variant::Diocotron { alpha, l, r_minus, r_plus, eps, b_ext } => {
                kv("alpha", alpha.to_string());
                kv("l", l.to_string());
                kv("r_minus", r_minus.to_string());
                kv("r_plus", r_plus.to_string());
                kv("eps", eps.to_string());
                kv("b_ext", join(&b_ext));
            }
        }
        kv("n_particles", s.n_particles.to_string());
        kv("seed", s.seed.to_string());
        kv(
            "sampling",
            match s.sampling {
                Sampling::Random => "random",
                Sampling::Stratified => "stratified",
            }
            .into(),
        );
        let d = s.domain();
        let flat: Vec<f64> = d.x.iter().flat_map(|&(a, b)| [a, b]).collect();
        kv("x_domain", join(&flat));
        kv("v_domain", d.v.map_or("none".to_string(), |(a, b)| join(&[a, b])));

        kv(
            "\n[time]\nscheme",
            match self.scheme {
                SplittingKind::Strang => "strang",
                SplittingKind::Lie => "lie",
            }
            .into(),
        );
        kv("dt", self.dt.to_string());
        kv("t_end", self.t_end.to_string());

        kv("\n[space]\nn_cells", joinu(&self.n_cells));
        kv("order", self.order.to_string());
        kv(
            "bc",
            match self.bc {
                Boundary::Periodic => "periodic",
                Boundary::DirichletZero => "dirichlet",
            }
            .into(),
        );
        match self.kernel {
            SmoothingKernel::Delta => kv("kernel", "delta".into()),
            SmoothingKernel::BSpline { degree, width } => {
                kv("kernel", "bspline".into());
                kv("kernel_degree", degree.to_string());
                kv("kernel_width", width.to_string());
            }
        }

        kv("\n[solver]\nsolver_tol", self.solver.tol.to_string());
        kv("solver_max_iter", self.solver.max_iter.map_or("auto".to_string(), |n| n.to_string()));

        kv("\n[output]\noutput_dir", self.output.dir.display().to_string());
        kv("output_interval", self.output.interval.to_string());
        kv("snapshot_interval", opt(self.output.snapshot_interval));
        kv("density_interval", opt(self.output.density_interval));
        kv("density_cells", joinu(&self.output.density_cells));

        kv("\n[parallel]\nthreads", self.threads.map_or("auto".to_string(), |n| n.to_string()));
        kv("deterministic_reduction", self.deterministic_reduction.to_string());
        kv(
            "deposit_strategy",
            match self.deposit_strategy {
                DepositStrategy::ParticleChunks => "particle_chunks",
                DepositStrategy::DomainRegions => "domain_regions",
            }
            .into(),
        );
        out
    }
}

fn expand(v: &[usize], dim: usize) -> Vec<usize> {
    if v.len() == dim {
        v.to_vec()
    } else {
        vec![v[0]; dim]
    }
}
