//! Conserved quantities, damping-rate fits, gridded densities and the
//! diagnostics time series.

use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

use crate::fem::StiffnessMatrix;
use crate::particles::{kinetic_energy, ParticleEnsemble};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("potential has {got} entries, matrix has {expected} rows")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("ΦᵀMΦ = {0:e} is negative beyond rounding: matrix is not positive semidefinite")]
    NotPositiveSemidefinite(f64),
    #[error("found {found} peaks in the fit window, need at least {needed}")]
    InsufficientPeaks { found: usize, needed: usize },
    #[error("time series must be strictly increasing: {previous} then {next}")]
    NonIncreasingTime { previous: f64, next: f64 },
    #[error("malformed diagnostics file: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// `E_d = √(ΦᵀMΦ)`.
pub fn electric_energy(phi: &[f64], m: &StiffnessMatrix) -> Result<f64, DiagnosticsError> {
    if phi.len() != m.n() {
        return Err(DiagnosticsError::DimensionMismatch { expected: m.n(), got: phi.len() });
    }
    let q = m.matrix.quadratic_form(phi);
    if q < -1e-12 {
        return Err(DiagnosticsError::NotPositiveSemidefinite(q));
    }
    Ok(q.max(0.0).sqrt())
}

/// `H = ½ Σ ω_s |V_s|² + ½ ΦᵀMΦ`.
pub fn total_energy(ensemble: &ParticleEnsemble, phi: &[f64], m: &StiffnessMatrix) -> Result<f64, DiagnosticsError> {
    let ed = electric_energy(phi, m)?;
    Ok(kinetic_energy(ensemble) + 0.5 * ed * ed)
}

/// Ordinary least-squares line `y = intercept + slope · x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope (0 for fewer than 3 points).
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let sse = (syy - slope * sxy).max(0.0);
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    let slope_stderr = if n > 2.0 && sxx > 0.0 { (sse / (n - 2.0) / sxx).sqrt() } else { 0.0 };
    LinearFit { slope, intercept, r_squared, slope_stderr }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Samples with `t < t_min` are ignored.
    pub t_min: f64,
    /// At most this many peaks (the earliest) enter the fit.
    pub max_peaks: usize,
    /// With fewer than four peaks, fit `log E_d` over the whole window
    /// instead of failing.
    pub direct_fallback: bool,
    /// A peak must dominate every sample within this distance in time, which
    /// screens out sampling-noise ripples on the slopes of the envelope.
    pub min_separation: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { t_min: 1.0, max_peaks: 8, direct_fallback: false, min_separation: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DampingFit {
    /// `γ = −slope` of `log E_d` through the peaks.
    pub gamma: f64,
    pub r_squared: f64,
    pub n_peaks: usize,
    pub intercept: f64,
    pub used_fallback: bool,
}

pub const MIN_PEAKS: usize = 4;

/// Strict local maxima of `y` (interior samples only).
pub fn local_maxima(y: &[f64]) -> Vec<usize> {
    (1..y.len().saturating_sub(1)).filter(|&i| y[i] > y[i - 1] && y[i] > y[i + 1]).collect()
}

pub fn fit_damping_rate(t: &[f64], e_d: &[f64], opts: &FitOptions) -> Result<DampingFit, DiagnosticsError> {
    let idx: Vec<usize> = (0..t.len().min(e_d.len())).filter(|&i| t[i] >= opts.t_min && e_d[i] > 0.0).collect();
    let window: Vec<f64> = idx.iter().map(|&i| e_d[i]).collect();
    let wt: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
    let dominant = |p: usize| {
        let mut j = p;
        while j > 0 && wt[p] - wt[j - 1] <= opts.min_separation {
            j -= 1;
            if window[j] > window[p] {
                return false;
            }
        }
        let mut j = p;
        while j + 1 < wt.len() && wt[j + 1] - wt[p] <= opts.min_separation {
            j += 1;
            if window[j] >= window[p] {
                return false;
            }
        }
        true
    };
    let peaks: Vec<usize> =
        local_maxima(&window).into_iter().filter(|&p| dominant(p)).take(opts.max_peaks).map(|p| idx[p]).collect();
    if peaks.len() < MIN_PEAKS {
        if opts.direct_fallback && idx.len() >= 2 {
            let x: Vec<f64> = idx.iter().map(|&i| t[i]).collect();
            let y: Vec<f64> = idx.iter().map(|&i| e_d[i].ln()).collect();
            let f = linear_fit(&x, &y);
            return Ok(DampingFit {
                gamma: -f.slope,
                r_squared: f.r_squared,
                n_peaks: peaks.len(),
                intercept: f.intercept,
                used_fallback: true,
            });
        }
        return Err(DiagnosticsError::InsufficientPeaks { found: peaks.len(), needed: MIN_PEAKS });
    }
    let x: Vec<f64> = peaks.iter().map(|&i| t[i]).collect();
    let y: Vec<f64> = peaks.iter().map(|&i| e_d[i].ln()).collect();
    let f = linear_fit(&x, &y);
    Ok(DampingFit { gamma: -f.slope, r_squared: f.r_squared, n_peaks: peaks.len(), intercept: f.intercept, used_fallback: false })
}

/// Regular histogram grid over a box.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub bounds: Vec<(f64, f64)>,
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn cell_volume(&self) -> f64 {
        self.bounds.iter().zip(&self.cells).map(|(&(a, b), &n)| (b - a) / n as f64).product()
    }

    fn cell_of(&self, x: &[f64; 3]) -> Option<usize> {
        let mut index = 0;
        let mut stride = 1;
        for (c, (&(a, b), &n)) in self.bounds.iter().zip(&self.cells).enumerate() {
            if !(x[c] >= a && x[c] <= b) {
                return None;
            }
            let i = (((x[c] - a) / (b - a) * n as f64) as usize).min(n - 1);
            index += i * stride;
            stride *= n;
        }
        Some(index)
    }

    /// Centre of cell `index` (row-major, first axis fastest).
    pub fn cell_center(&self, index: usize) -> Vec<f64> {
        let mut rest = index;
        self.bounds
            .iter()
            .zip(&self.cells)
            .map(|(&(a, b), &n)| {
                let i = rest % n;
                rest /= n;
                a + (i as f64 + 0.5) * (b - a) / n as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityGrid {
    pub spec: GridSpec,
    pub time: f64,
    /// Charge per unit volume, first axis fastest.
    pub values: Vec<f64>,
}

/// Histogram of `Σ ω_s` per cell divided by the cell volume. Markers
/// outside the grid are dropped.
pub fn density_grid(ensemble: &ParticleEnsemble, spec: &GridSpec, time: f64) -> DensityGrid {
    let n: usize = spec.cells.iter().product();
    let mut values = vec![0.0; n];
    let vol = spec.cell_volume();
    for (x, w) in ensemble.positions().iter().zip(ensemble.weights()) {
        if let Some(c) = spec.cell_of(x) {
            values[c] += w;
        }
    }
    values.iter_mut().for_each(|v| *v /= vol);
    DensityGrid { spec: spec.clone(), time, values }
}

impl DensityGrid {
    /// Text format:
    ///
    /// ```text
    /// # hampic-density v1
    /// # nx=<nx> [ny=<ny>] bounds=<a0>,<b0>[,<a1>,<b1>] t=<t>
    /// one row per line of the first axis, values separated by spaces
    /// ```
    pub fn to_text(&self) -> String {
        let mut out = String::from("# hampic-density v1\n");
        let names = ["nx", "ny"];
        let dims: Vec<String> = self.spec.cells.iter().zip(names).map(|(n, k)| format!("{k}={n}")).collect();
        let bounds: Vec<String> = self.spec.bounds.iter().map(|(a, b)| format!("{a},{b}")).collect();
        out.push_str(&format!("# {} bounds={} t={}\n", dims.join(" "), bounds.join(","), self.time));
        let nx = self.spec.cells[0];
        for row in self.values.chunks(nx) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }
}

/// Azimuthal Fourier coefficient about the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    /// `|c_l| / c_0` with `c_l = Σ ω e^{−ilθ}`, scaled by 2 so that a density
    /// `1 + α cos lθ` gives `α`.
    pub amplitude: f64,
    /// `arg c_l` in `(−π, π]`.
    pub phase: f64,
}

fn mode_from_sums(re: f64, im: f64, total: f64) -> Mode {
    if total <= 0.0 {
        return Mode { amplitude: 0.0, phase: 0.0 };
    }
    Mode { amplitude: 2.0 * re.hypot(im) / total, phase: im.atan2(re) }
}

pub fn mode_amplitude(ensemble: &ParticleEnsemble, l: u32) -> Mode {
    let lf = l as f64;
    let (mut re, mut im, mut total) = (0.0, 0.0, 0.0);
    for (x, w) in ensemble.positions().iter().zip(ensemble.weights()) {
        let th = x[1].atan2(x[0]);
        re += w * (lf * th).cos();
        im -= w * (lf * th).sin();
        total += w;
    }
    mode_from_sums(re, im, total)
}

/// Modes `1..=max_l` in one pass: `e^{−ilθ}` as powers of `e^{−iθ}`.
pub fn mode_amplitudes(ensemble: &ParticleEnsemble, max_l: u32) -> Vec<Mode> {
    let n = max_l as usize;
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    let mut total = 0.0;
    for (x, w) in ensemble.positions().iter().zip(ensemble.weights()) {
        let r = x[0].hypot(x[1]);
        let (c, s) = if r > 0.0 { (x[0] / r, -x[1] / r) } else { (1.0, 0.0) };
        let (mut pc, mut ps) = (1.0, 0.0);
        for l in 0..n {
            (pc, ps) = (pc * c - ps * s, pc * s + ps * c);
            re[l] += w * pc;
            im[l] += w * ps;
        }
        total += w;
    }
    (0..n).map(|l| mode_from_sums(re[l], im[l], total)).collect()
}

pub fn grid_mode_amplitude(grid: &DensityGrid, l: u32) -> Mode {
    let lf = l as f64;
    let (mut re, mut im, mut total) = (0.0, 0.0, 0.0);
    for (c, v) in grid.values.iter().enumerate() {
        let p = grid.spec.cell_center(c);
        let th = p[1].atan2(p[0]);
        re += v * (lf * th).cos();
        im -= v * (lf * th).sin();
        total += v;
    }
    mode_from_sums(re, im, total)
}

/// Unwraps a sequence of phases so consecutive differences lie in `(−π, π]`.
pub fn unwrap_phases(phases: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = 0.0;
    for (i, &p) in phases.iter().enumerate() {
        if i > 0 {
            let prev = phases[i - 1];
            let mut d = p - prev;
            while d > PI {
                d -= 2.0 * PI;
                offset -= 2.0 * PI;
            }
            while d <= -PI {
                d += 2.0 * PI;
                offset += 2.0 * PI;
            }
        }
        out.push(p + offset);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticsRow {
    pub t: f64,
    pub e_d: f64,
    pub h: f64,
    pub px: f64,
    pub py: f64,
    pub c: f64,
}

pub const CSV_HEADER: &str = "t,E_d,H,Px,Py,C";

impl DiagnosticsRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{},{}", self.t, self.e_d, self.h, self.px, self.py, self.c)
    }
}

/// Time series plus `key=value` metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DiagnosticsRecord {
    pub metadata: Vec<(String, String)>,
    rows: Vec<DiagnosticsRow>,
}

impl DiagnosticsRecord {
    pub fn new(metadata: Vec<(String, String)>) -> Self {
        Self { metadata, rows: Vec::new() }
    }

    pub fn rows(&self) -> &[DiagnosticsRow] {
        &self.rows
    }

    pub fn push(&mut self, row: DiagnosticsRow) -> Result<(), DiagnosticsError> {
        if let Some(last) = self.rows.last() {
            if !(row.t > last.t) {
                return Err(DiagnosticsError::NonIncreasingTime { previous: last.t, next: row.t });
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column(&self, f: impl Fn(&DiagnosticsRow) -> f64) -> Vec<f64> {
        self.rows.iter().map(f).collect()
    }

    /// `# key=value` lines, the header, then one row per output step.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.to_csv());
            out.push('\n');
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self, DiagnosticsError> {
        let mut rec = Self::default();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                if let Some((k, v)) = meta.trim().split_once('=') {
                    rec.metadata.push((k.trim().to_string(), v.trim().to_string()));
                }
                continue;
            }
            if !header_seen {
                if line.replace(' ', "") != CSV_HEADER {
                    return Err(DiagnosticsError::Parse(format!("unexpected header `{line}`")));
                }
                header_seen = true;
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| DiagnosticsError::Parse(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 6 {
                return Err(DiagnosticsError::Parse(format!("line {}: expected 6 columns", lineno + 1)));
            }
            rec.push(DiagnosticsRow { t: vals[0], e_d: vals[1], h: vals[2], px: vals[3], py: vals[4], c: vals[5] })?;
        }
        if !header_seen {
            return Err(DiagnosticsError::Parse("missing header".into()));
        }
        Ok(rec)
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }
}

/// Writes to a sibling temporary file and renames it over `path`, so a
/// reader never sees a truncated file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    {
        let mut f = io::BufWriter::new(fs::File::create(&tmp)?);
        f.write_all(bytes)?;
        f.flush()?;
    }
    fs::rename(&tmp, path)
}
