//! Flat-text persistence for every artifact the binary reads or writes.
//!
//! Two formats cover everything:
//!
//! * **`key = value` text** for run configurations and sidecar metadata —
//!   diff-friendly and mergeable, no schema tooling required;
//! * **CSV tables** for field and film snapshots, trajectory directories,
//!   energy ledgers, fixed-point traces, kernel probes and norm reports.
//!
//! Floating-point numbers are printed with Rust's shortest round-tripping
//! decimal format, so a save → load cycle reproduces every value bit-exactly
//! and identical runs produce byte-identical files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::evolution::{EnergyLedger, FixedPointTrace, LedgerRow, Trajectory};
use crate::geometry::cz_indices;
use crate::greenlab::{EnvelopeFit, KernelProbe};
use crate::grid::{Field, Grid};
use crate::hodograph::{FilmGrid, FilmState};
use crate::norms::{FilmSeminormReport, NormReport};

// ---------------------------------------------------------------------------
// primitives
// ---------------------------------------------------------------------------

/// Shortest decimal form that parses back to the identical `f64`.
fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{what}: expected a number, got `{}`", s.trim())))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse::<usize>()
        .map_err(|_| Error::Config(format!("{what}: expected a nonnegative integer, got `{}`", s.trim())))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.trim()
        .parse::<u64>()
        .map_err(|_| Error::Config(format!("{what}: expected a nonnegative integer, got `{}`", s.trim())))
}

/// Split `key = value` lines, skipping blanks and `#` comments. Returns the
/// pairs in file order; duplicate keys are rejected.
fn parse_kv(text: &str, what: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{what}: line {}: expected `key = value`, got `{line}`",
                lineno + 1
            )));
        };
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!(
                "{what}: line {}: empty key",
                lineno + 1
            )));
        }
        if out.iter().any(|(k, _)| *k == key) {
            return Err(Error::Config(format!(
                "{what}: duplicate key `{key}`"
            )));
        }
        out.push((key, value));
    }
    Ok(out)
}

fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path)?;
    let pairs = parse_kv(&text, &path.display().to_string())?;
    Ok(pairs.into_iter().collect())
}

fn kv_get<'a>(map: &'a BTreeMap<String, String>, key: &str, path: &Path) -> Result<&'a str> {
    map.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Config(format!("{}: missing key `{key}`", path.display())))
}

/// Sidecar path of a snapshot: `<file>.meta` next to the data file.
fn sidecar(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".meta");
    PathBuf::from(os)
}

/// Parse a whitespace- or comma-separated list of numbers.
pub fn parse_float_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| parse_f64(t, what))
        .collect()
}

/// Leading `# key = value` comment lines of a CSV report.
pub fn read_comment_stats(path: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let Some(rest) = line.strip_prefix('#') else {
            break;
        };
        if let Some((key, value)) = rest.split_once('=') {
            out.insert(
                key.trim().to_string(),
                parse_f64(value, &format!("{}: comment `{}`", path.display(), key.trim()))?,
            );
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// run configuration
// ---------------------------------------------------------------------------

/// A complete experiment description, read from and written to flat
/// `key = value` text.
///
/// Recognized keys: `n`, `grid.M`, `grid.Xmax`, `grid.gamma`, `grid.K`,
/// `grid.Lambda`, `time.dt`, `time.T`, `norm.p`, `scenario.name`,
/// `scenario.epsilon`, `seed`, `out.dir`. Any further `scenario.*` key is
/// kept verbatim in [`RunConfig::extras`] for scenario-specific parameters
/// (bump geometry, rescaling factors, probe sources, …); anything else is
/// rejected as a configuration error.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Space dimension (tangential axes plus the vertical one).
    pub n: usize,
    /// Vertical cell count `grid.M`.
    pub grid_m: usize,
    /// Vertical extent `grid.Xmax`.
    pub grid_x_max: f64,
    /// Vertical grading exponent `grid.gamma`.
    pub grid_gamma: f64,
    /// Tangential nodes per axis `grid.K` (ignored for `n = 1`).
    pub grid_k: usize,
    /// Tangential period `grid.Lambda` (ignored for `n = 1`).
    pub grid_period: f64,
    /// Time step `time.dt`.
    pub dt: f64,
    /// Final time `time.T`.
    pub t_final: f64,
    /// Integrability exponent `norm.p` of the trajectory norms.
    pub norm_p: f64,
    /// Scenario selector `scenario.name`.
    pub scenario: String,
    /// Perturbation amplitude `scenario.epsilon`.
    pub epsilon: f64,
    /// RNG seed; recorded in every run record.
    pub seed: u64,
    /// Output directory `out.dir`, if persisting results.
    pub out_dir: Option<PathBuf>,
    /// Further `scenario.*` keys, kept verbatim (sorted by key).
    pub extras: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            n: 1,
            grid_m: 128,
            grid_x_max: 8.0,
            grid_gamma: 2.0,
            grid_k: 1,
            grid_period: 1.0,
            dt: 2.5e-4,
            t_final: 2.5e-2,
            norm_p: 4.0,
            scenario: "ripple".to_string(),
            epsilon: 1e-2,
            seed: 7,
            out_dir: None,
            extras: BTreeMap::new(),
        }
    }
}

impl RunConfig {
    /// Parse a configuration from `key = value` text. Unlisted keys keep
    /// their defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (key, value) in parse_kv(text, "config")? {
            let what = format!("config key `{key}`");
            match key.as_str() {
                "n" => cfg.n = parse_usize(&value, &what)?,
                "grid.M" => cfg.grid_m = parse_usize(&value, &what)?,
                "grid.Xmax" => cfg.grid_x_max = parse_f64(&value, &what)?,
                "grid.gamma" => cfg.grid_gamma = parse_f64(&value, &what)?,
                "grid.K" => cfg.grid_k = parse_usize(&value, &what)?,
                "grid.Lambda" => cfg.grid_period = parse_f64(&value, &what)?,
                "time.dt" => cfg.dt = parse_f64(&value, &what)?,
                "time.T" => cfg.t_final = parse_f64(&value, &what)?,
                "norm.p" => cfg.norm_p = parse_f64(&value, &what)?,
                "scenario.name" => cfg.scenario = value,
                "scenario.epsilon" => cfg.epsilon = parse_f64(&value, &what)?,
                "seed" => cfg.seed = parse_u64(&value, &what)?,
                "out.dir" => cfg.out_dir = Some(PathBuf::from(value)),
                _ if key.starts_with("scenario.") => {
                    cfg.extras.insert(key, value);
                }
                _ => {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Deterministic textual form: known keys in a fixed order, extras
    /// sorted. `parse(render())` reproduces the configuration exactly.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "n = {}", self.n);
        let _ = writeln!(s, "grid.M = {}", self.grid_m);
        let _ = writeln!(s, "grid.Xmax = {}", fmt_f64(self.grid_x_max));
        let _ = writeln!(s, "grid.gamma = {}", fmt_f64(self.grid_gamma));
        let _ = writeln!(s, "grid.K = {}", self.grid_k);
        let _ = writeln!(s, "grid.Lambda = {}", fmt_f64(self.grid_period));
        let _ = writeln!(s, "time.dt = {}", fmt_f64(self.dt));
        let _ = writeln!(s, "time.T = {}", fmt_f64(self.t_final));
        let _ = writeln!(s, "norm.p = {}", fmt_f64(self.norm_p));
        let _ = writeln!(s, "scenario.name = {}", self.scenario);
        let _ = writeln!(s, "scenario.epsilon = {}", fmt_f64(self.epsilon));
        let _ = writeln!(s, "seed = {}", self.seed);
        if let Some(dir) = &self.out_dir {
            let _ = writeln!(s, "out.dir = {}", dir.display());
        }
        for (key, value) in &self.extras {
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }

    /// Check the numeric invariants. Hard violations (non-positive sizes,
    /// non-finite numbers) are errors; soft ones come back as warnings —
    /// notably an integrability exponent at or below `n + 2`, where the
    /// trajectory norms lose their Lipschitz embedding.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(1..=crate::grid::MAX_DIM).contains(&self.n) {
            return Err(Error::Config(format!(
                "n must be 1..={}, got {}",
                crate::grid::MAX_DIM,
                self.n
            )));
        }
        if self.grid_m < 8 {
            return Err(Error::Config(format!(
                "grid.M must be at least 8, got {}",
                self.grid_m
            )));
        }
        if self.n > 1 && self.grid_k < 4 {
            return Err(Error::Config(format!(
                "grid.K must be at least 4 for n > 1, got {}",
                self.grid_k
            )));
        }
        let positives = [
            ("grid.Xmax", self.grid_x_max),
            ("grid.Lambda", self.grid_period),
            ("time.dt", self.dt),
            ("time.T", self.t_final),
            ("norm.p", self.norm_p),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.grid_gamma >= 1.0) || !self.grid_gamma.is_finite() {
            return Err(Error::Config(format!(
                "grid.gamma must be at least 1, got {}",
                self.grid_gamma
            )));
        }
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "scenario.epsilon must be nonnegative, got {}",
                self.epsilon
            )));
        }
        if self.t_final < self.dt {
            return Err(Error::Config(format!(
                "time.T = {} does not cover one step of time.dt = {}",
                self.t_final, self.dt
            )));
        }
        let mut warnings = Vec::new();
        let critical = (self.n + 2) as f64;
        if self.norm_p <= critical {
            warnings.push(format!(
                "norm.p = {} is not above n + 2 = {critical}; the trajectory norm loses \
                 its Lipschitz control at this exponent",
                fmt_f64(self.norm_p)
            ));
        }
        Ok(warnings)
    }

    /// Build the computational grid described by the `grid.*` keys.
    pub fn grid(&self) -> Result<Arc<Grid>> {
        Grid::new(
            self.n,
            self.grid_m,
            self.grid_x_max,
            self.grid_gamma,
            self.grid_k,
            self.grid_period,
        )
    }

    /// Number of steps of size ≈ `dt` covering `[0, T]`; the actual step is
    /// `T / step_count()` so the run lands on `T` exactly.
    pub fn step_count(&self) -> usize {
        ((self.t_final / self.dt) - 1e-9).ceil().max(1.0) as usize
    }

    /// Scenario-specific numeric extra, if present.
    pub fn extra_f64(&self, key: &str) -> Result<Option<f64>> {
        match self.extras.get(key) {
            None => Ok(None),
            Some(v) => parse_f64(v, &format!("config key `{key}`")).map(Some),
        }
    }

    /// Scenario-specific list extra (comma- or whitespace-separated numbers).
    pub fn extra_float_list(&self, key: &str) -> Result<Option<Vec<f64>>> {
        match self.extras.get(key) {
            None => Ok(None),
            Some(v) => parse_float_list(v, &format!("config key `{key}`")).map(Some),
        }
    }
}

// ---------------------------------------------------------------------------
// verdicts and run records
// ---------------------------------------------------------------------------

/// One checked property: which check, which module, the measured number, the
/// threshold it was held against, and the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub check: String,
    pub module: String,
    pub measured: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Verdict {
    /// Pass iff `measured <= threshold` (residual-style checks).
    pub fn at_most(check: &str, module: &str, measured: f64, threshold: f64) -> Verdict {
        Verdict {
            check: check.to_string(),
            module: module.to_string(),
            measured,
            threshold,
            pass: measured.is_finite() && measured <= threshold,
        }
    }

    /// Pass iff `measured >= threshold` (quality-style checks).
    pub fn at_least(check: &str, module: &str, measured: f64, threshold: f64) -> Verdict {
        Verdict {
            check: check.to_string(),
            module: module.to_string(),
            measured,
            threshold,
            pass: measured.is_finite() && measured >= threshold,
        }
    }
}

/// Render a verdict table as CSV (`check,module,measured,threshold,pass`).
pub fn verdict_table(verdicts: &[Verdict]) -> String {
    let mut s = String::from("check,module,measured,threshold,pass\n");
    for v in verdicts {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            v.check,
            v.module,
            fmt_f64(v.measured),
            fmt_f64(v.threshold),
            if v.pass { "pass" } else { "fail" }
        );
    }
    s
}

pub fn write_verdicts(path: &Path, verdicts: &[Verdict]) -> Result<()> {
    fs::write(path, verdict_table(verdicts))?;
    Ok(())
}

pub fn read_verdicts(path: &Path) -> Result<Vec<Verdict>> {
    let text = fs::read_to_string(path)?;
    let what = path.display().to_string();
    let mut rows = text.lines();
    match rows.next() {
        Some("check,module,measured,threshold,pass") => {}
        other => {
            return Err(Error::Config(format!(
                "{what}: bad verdict header `{}`",
                other.unwrap_or("")
            )))
        }
    }
    let mut out = Vec::new();
    for line in rows {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 5 {
            return Err(Error::Config(format!(
                "{what}: expected 5 columns, got {} in `{line}`",
                cols.len()
            )));
        }
        let pass = match cols[4].trim() {
            "pass" => true,
            "fail" => false,
            other => {
                return Err(Error::Config(format!(
                    "{what}: bad outcome `{other}` in `{line}`"
                )))
            }
        };
        out.push(Verdict {
            check: cols[0].to_string(),
            module: cols[1].to_string(),
            measured: parse_f64(cols[2], &what)?,
            threshold: parse_f64(cols[3], &what)?,
            pass,
        });
    }
    Ok(out)
}

/// Everything a command run leaves behind: the configuration it actually
/// used, the verdicts of every check it performed, and free-form notes
/// (warnings, measured diagnostics, file pointers). Rendering is
/// deterministic, so identical configurations and seeds produce
/// byte-identical records.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: RunConfig,
    pub verdicts: Vec<Verdict>,
    pub notes: Vec<String>,
}

impl RunRecord {
    pub fn new(config: RunConfig) -> RunRecord {
        RunRecord {
            config,
            verdicts: Vec::new(),
            notes: Vec::new(),
        }
    }

    /// All checks passed (vacuously true for an empty record).
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::from("[config]\n");
        s.push_str(&self.config.render());
        s.push_str("\n[verdicts]\n");
        s.push_str(&verdict_table(&self.verdicts));
        s.push_str("\n[notes]\n");
        for note in &self.notes {
            let _ = writeln!(s, "- {note}");
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.render())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// field and film snapshots
// ---------------------------------------------------------------------------

/// Write a field snapshot: CSV `x1,...,xn,value` plus a `<path>.meta`
/// sidecar carrying the grid parameters and the time label.
pub fn write_field(path: &Path, field: &Field, time: f64) -> Result<()> {
    let grid = field.grid();
    let n = grid.dim();
    let mut s = String::new();
    for axis in 1..=n {
        let _ = write!(s, "x{axis},");
    }
    s.push_str("value\n");
    for (flat, v) in field.values().iter().enumerate() {
        for c in grid.coords_flat(flat) {
            let _ = write!(s, "{},", fmt_f64(c));
        }
        let _ = writeln!(s, "{}", fmt_f64(*v));
    }
    fs::write(path, s)?;

    let mut meta = String::from("kind = field\n");
    let _ = writeln!(meta, "n = {}", n);
    let _ = writeln!(meta, "grid.M = {}", grid.vertical_cells());
    let _ = writeln!(meta, "grid.Xmax = {}", fmt_f64(grid.x_max()));
    let _ = writeln!(meta, "grid.gamma = {}", fmt_f64(grid.grading()));
    let _ = writeln!(meta, "grid.K = {}", grid.tangential_nodes());
    let _ = writeln!(meta, "grid.Lambda = {}", fmt_f64(grid.period()));
    let _ = writeln!(meta, "time = {}", fmt_f64(time));
    fs::write(sidecar(path), meta)?;
    Ok(())
}

/// Last CSV column of every data row, as numbers.
fn read_last_column(path: &Path, expected_rows: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)?;
    let what = path.display().to_string();
    let mut values = Vec::with_capacity(expected_rows);
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let last = line
            .rsplit(',')
            .next()
            .ok_or_else(|| Error::Config(format!("{what}: empty row")))?;
        values.push(parse_f64(last, &what)?);
    }
    if values.len() != expected_rows {
        return Err(Error::ShapeMismatch(format!(
            "{what}: has {} data rows, grid has {expected_rows} nodes",
            values.len()
        )));
    }
    Ok(values)
}

fn grid_from_meta(meta: &BTreeMap<String, String>, path: &Path) -> Result<Arc<Grid>> {
    Grid::new(
        parse_usize(kv_get(meta, "n", path)?, "meta n")?,
        parse_usize(kv_get(meta, "grid.M", path)?, "meta grid.M")?,
        parse_f64(kv_get(meta, "grid.Xmax", path)?, "meta grid.Xmax")?,
        parse_f64(kv_get(meta, "grid.gamma", path)?, "meta grid.gamma")?,
        parse_usize(kv_get(meta, "grid.K", path)?, "meta grid.K")?,
        parse_f64(kv_get(meta, "grid.Lambda", path)?, "meta grid.Lambda")?,
    )
}

fn check_meta_kind(meta: &BTreeMap<String, String>, want: &str, path: &Path) -> Result<()> {
    let kind = kv_get(meta, "kind", path)?;
    if kind != want {
        return Err(Error::Config(format!(
            "{}: is a {kind} snapshot, expected {want}",
            path.display()
        )));
    }
    Ok(())
}

/// Read a field snapshot written by [`write_field`]; reconstructs the grid
/// from the sidecar. With `reuse`, the sidecar is checked against the given
/// grid and the field is built on it (so a trajectory shares one grid).
fn read_field_with(path: &Path, reuse: Option<&Arc<Grid>>) -> Result<(Field, f64)> {
    let meta_path = sidecar(path);
    let meta = read_kv_file(&meta_path)?;
    check_meta_kind(&meta, "field", path)?;
    let fresh = grid_from_meta(&meta, &meta_path)?;
    let grid = match reuse {
        None => fresh,
        Some(g) => {
            let same = g.dim() == fresh.dim()
                && g.vertical_cells() == fresh.vertical_cells()
                && g.x_max() == fresh.x_max()
                && g.grading() == fresh.grading()
                && g.tangential_nodes() == fresh.tangential_nodes()
                && g.period() == fresh.period();
            if !same {
                return Err(Error::ShapeMismatch(format!(
                    "{}: snapshot grid differs from the trajectory grid",
                    path.display()
                )));
            }
            g.clone()
        }
    };
    let time = parse_f64(kv_get(&meta, "time", &meta_path)?, "meta time")?;
    let values = read_last_column(path, grid.len())?;
    Ok((Field::from_values(grid, values)?, time))
}

pub fn read_field(path: &Path) -> Result<(Field, f64)> {
    read_field_with(path, None)
}

/// Write a film snapshot: the field CSV layout with an extra `h` column
/// (`x1,...,xn,value,h`, where `value = √h` is the transported quantity),
/// plus a sidecar with the film-grid parameters and the time.
pub fn write_film(path: &Path, film: &FilmState) -> Result<()> {
    let grid = film.grid();
    let n = grid.dim();
    let sqrt_h = film.sqrt_height();
    let mut s = String::new();
    for axis in 1..=n {
        let _ = write!(s, "x{axis},");
    }
    s.push_str("value,h\n");
    for (flat, h) in film.h.iter().enumerate() {
        for c in grid.coords_flat(flat) {
            let _ = write!(s, "{},", fmt_f64(c));
        }
        let _ = writeln!(s, "{},{}", fmt_f64(sqrt_h[flat]), fmt_f64(*h));
    }
    fs::write(path, s)?;

    let mut meta = String::from("kind = film\n");
    let _ = writeln!(meta, "n = {}", n);
    let _ = writeln!(meta, "grid.M = {}", grid.vertical_len() - 1);
    let _ = writeln!(meta, "grid.Ymin = {}", fmt_f64(grid.y_min()));
    let _ = writeln!(meta, "grid.Ymax = {}", fmt_f64(grid.y_max()));
    let _ = writeln!(meta, "grid.K = {}", grid.tangential_nodes());
    let _ = writeln!(meta, "grid.Lambda = {}", fmt_f64(grid.period()));
    let _ = writeln!(meta, "time = {}", fmt_f64(film.time));
    fs::write(sidecar(path), meta)?;
    Ok(())
}

pub fn read_film(path: &Path) -> Result<FilmState> {
    let meta_path = sidecar(path);
    let meta = read_kv_file(&meta_path)?;
    check_meta_kind(&meta, "film", path)?;
    let grid = FilmGrid::new(
        parse_usize(kv_get(&meta, "n", &meta_path)?, "meta n")?,
        parse_usize(kv_get(&meta, "grid.M", &meta_path)?, "meta grid.M")?,
        parse_f64(kv_get(&meta, "grid.Ymin", &meta_path)?, "meta grid.Ymin")?,
        parse_f64(kv_get(&meta, "grid.Ymax", &meta_path)?, "meta grid.Ymax")?,
        parse_usize(kv_get(&meta, "grid.K", &meta_path)?, "meta grid.K")?,
        parse_f64(kv_get(&meta, "grid.Lambda", &meta_path)?, "meta grid.Lambda")?,
    )?;
    let time = parse_f64(kv_get(&meta, "time", &meta_path)?, "meta time")?;
    let h = read_last_column(path, grid.len())?;
    FilmState::new(grid, h, time)
}

// ---------------------------------------------------------------------------
// trajectories, ledgers, fixed-point traces
// ---------------------------------------------------------------------------

fn snapshot_name(i: usize) -> String {
    format!("field_{i:04}.csv")
}

/// Persist a trajectory into a directory: one field CSV (plus sidecar) per
/// snapshot, `index.csv` listing `step,time,file`, the energy ledger as
/// `ledger.csv`, and `ledger.meta` with the initial half-norm.
pub fn save_trajectory(dir: &Path, traj: &Trajectory) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::from("step,time,file\n");
    for (i, (time, state)) in traj.times.iter().zip(&traj.states).enumerate() {
        let name = snapshot_name(i);
        write_field(&dir.join(&name), state, *time)?;
        let _ = writeln!(index, "{i},{},{name}", fmt_f64(*time));
    }
    fs::write(dir.join("index.csv"), index)?;

    let mut ledger = String::from("step,time,tau,half_norm,dissipation,work\n");
    for row in &traj.ledger.rows {
        let _ = writeln!(
            ledger,
            "{},{},{},{},{},{}",
            row.step,
            fmt_f64(row.time),
            fmt_f64(row.tau),
            fmt_f64(row.half_norm),
            fmt_f64(row.dissipation),
            fmt_f64(row.work)
        );
    }
    fs::write(dir.join("ledger.csv"), ledger)?;
    fs::write(
        dir.join("ledger.meta"),
        format!(
            "initial_half_norm = {}\n",
            fmt_f64(traj.ledger.initial_half_norm)
        ),
    )?;
    Ok(())
}

fn load_ledger(dir: &Path) -> Result<EnergyLedger> {
    let csv = dir.join("ledger.csv");
    if !csv.exists() {
        return Ok(EnergyLedger::default());
    }
    let what = csv.display().to_string();
    let text = fs::read_to_string(&csv)?;
    let mut rows = Vec::new();
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 6 {
            return Err(Error::Config(format!(
                "{what}: expected 6 columns, got {} in `{line}`",
                cols.len()
            )));
        }
        rows.push(LedgerRow {
            step: parse_usize(cols[0], &what)?,
            time: parse_f64(cols[1], &what)?,
            tau: parse_f64(cols[2], &what)?,
            half_norm: parse_f64(cols[3], &what)?,
            dissipation: parse_f64(cols[4], &what)?,
            work: parse_f64(cols[5], &what)?,
        });
    }
    let meta_path = dir.join("ledger.meta");
    let initial_half_norm = if meta_path.exists() {
        let meta = read_kv_file(&meta_path)?;
        parse_f64(
            kv_get(&meta, "initial_half_norm", &meta_path)?,
            "ledger meta",
        )?
    } else {
        0.0
    };
    Ok(EnergyLedger {
        initial_half_norm,
        rows,
    })
}

/// Load a trajectory saved by [`save_trajectory`]. All snapshots are
/// rebuilt on a single shared grid; the index file dictates the order.
pub fn load_trajectory(dir: &Path) -> Result<Trajectory> {
    let index_path = dir.join("index.csv");
    let what = index_path.display().to_string();
    let text = fs::read_to_string(&index_path)
        .map_err(|e| Error::Config(format!("cannot read {what}: {e}")))?;
    let mut times = Vec::new();
    let mut states: Vec<Field> = Vec::new();
    let mut grid: Option<Arc<Grid>> = None;
    for line in text.lines().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Config(format!(
                "{what}: expected 3 columns, got {} in `{line}`",
                cols.len()
            )));
        }
        let indexed_time = parse_f64(cols[1], &what)?;
        let (field, meta_time) = read_field_with(&dir.join(cols[2].trim()), grid.as_ref())?;
        if meta_time != indexed_time {
            return Err(Error::Config(format!(
                "{what}: snapshot `{}` carries time {meta_time}, index says {indexed_time}",
                cols[2].trim()
            )));
        }
        grid.get_or_insert_with(|| field.grid().clone());
        times.push(indexed_time);
        states.push(field);
    }
    let mut traj = Trajectory::from_snapshots(times, states)?;
    traj.ledger = load_ledger(dir)?;
    Ok(traj)
}

/// Fixed-point iteration trace as CSV. The three series have different
/// lengths (`k` iterates produce `k` distances but `k − 1` ratios); missing
/// entries are empty cells. Convergence is a leading comment.
pub fn write_fixed_point_trace(path: &Path, trace: &FixedPointTrace) -> Result<()> {
    let mut s = format!("# converged = {}\n", if trace.converged { 1 } else { 0 });
    s.push_str("k,distance,ratio,iterate_norm\n");
    let rows = trace
        .distances
        .len()
        .max(trace.ratios.len())
        .max(trace.iterate_norms.len());
    for k in 0..rows {
        let cell = |v: Option<&f64>| v.map(|x| fmt_f64(*x)).unwrap_or_default();
        let _ = writeln!(
            s,
            "{k},{},{},{}",
            cell(trace.distances.get(k)),
            cell(trace.ratios.get(k)),
            cell(trace.iterate_norms.get(k))
        );
    }
    fs::write(path, s)?;
    Ok(())
}

pub fn read_fixed_point_trace(path: &Path) -> Result<FixedPointTrace> {
    let what = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let stats = read_comment_stats(path)?;
    let converged = stats
        .get("converged")
        .copied()
        .ok_or_else(|| Error::Config(format!("{what}: missing `# converged` comment")))?
        != 0.0;
    let mut trace = FixedPointTrace {
        distances: Vec::new(),
        ratios: Vec::new(),
        iterate_norms: Vec::new(),
        converged,
    };
    for line in text.lines() {
        if line.starts_with('#') || line.starts_with('k') || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 4 {
            return Err(Error::Config(format!(
                "{what}: expected 4 columns, got {} in `{line}`",
                cols.len()
            )));
        }
        for (cell, series) in [
            (cols[1], &mut trace.distances),
            (cols[2], &mut trace.ratios),
            (cols[3], &mut trace.iterate_norms),
        ] {
            if !cell.trim().is_empty() {
                series.push(parse_f64(cell, &what)?);
            }
        }
    }
    Ok(trace)
}

// ---------------------------------------------------------------------------
// kernel probes and envelope fits
// ---------------------------------------------------------------------------

/// Probe output CSV: `x1,...,xn,rho,t,raw,normalized`, one row per node and
/// recorded post-release snapshot.
pub fn write_probe(path: &Path, probe: &KernelProbe) -> Result<()> {
    let grid = probe.grid();
    let n = grid.dim();
    let mut s = String::new();
    for axis in 1..=n {
        let _ = write!(s, "x{axis},");
    }
    s.push_str("rho,t,raw,normalized\n");
    for snapshot in 1..probe.trajectory.times.len() {
        let t = probe.trajectory.times[snapshot];
        for sample in probe.samples_at(snapshot)? {
            for c in grid.coords_flat(sample.flat) {
                let _ = write!(s, "{},", fmt_f64(c));
            }
            let _ = writeln!(
                s,
                "{},{},{},{}",
                fmt_f64(sample.rho),
                fmt_f64(t),
                fmt_f64(sample.raw),
                fmt_f64(sample.normalized)
            );
        }
    }
    fs::write(path, s)?;
    Ok(())
}

/// One-line structured-text fit summary: `{"a": …, "b": …, "q": …, "r2": …,
/// "samples": …}` — amplitude, decay rate, stretching exponent, coefficient
/// of determination, sample count.
pub fn write_fit_summary(path: &Path, fit: &EnvelopeFit) -> Result<()> {
    fs::write(path, fit_summary_line(fit))?;
    Ok(())
}

pub fn fit_summary_line(fit: &EnvelopeFit) -> String {
    format!(
        "{{\"a\": {}, \"b\": {}, \"q\": {}, \"r2\": {}, \"samples\": {}}}\n",
        fmt_f64(fit.amplitude),
        fmt_f64(fit.rate),
        fmt_f64(fit.exponent),
        fmt_f64(fit.r_squared),
        fit.used
    )
}

pub fn read_fit_summary(path: &Path) -> Result<EnvelopeFit> {
    let what = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let line = text.trim();
    let inner = line
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| Error::Config(format!("{what}: expected a {{…}} summary line")))?;
    let mut fields: BTreeMap<String, f64> = BTreeMap::new();
    for part in inner.split(',') {
        let (key, value) = part
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("{what}: bad entry `{part}`")))?;
        let key = key.trim().trim_matches('"').to_string();
        fields.insert(key, parse_f64(value, &what)?);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Config(format!("{what}: missing field `{k}`")))
    };
    Ok(EnvelopeFit {
        amplitude: get("a")?,
        rate: get("b")?,
        exponent: get("q")?,
        r_squared: get("r2")?,
        used: get("samples")? as usize,
    })
}

// ---------------------------------------------------------------------------
// norm reports
// ---------------------------------------------------------------------------

/// Column name of a derivative block: time order `l`, spatial multi-index
/// `α` as concatenated digits (e.g. `l1_a0`, `l0_a02`).
fn block_names(n: usize, blocks: usize) -> Vec<String> {
    let family = cz_indices(n);
    if family.len() == blocks {
        family
            .iter()
            .map(|idx| {
                let digits: String = idx.alpha.iter().map(|d| d.to_string()).collect();
                format!("l{}_a{digits}", idx.l)
            })
            .collect()
    } else {
        (0..blocks).map(|i| format!("c{i}")).collect()
    }
}

/// Trajectory-norm report CSV: summary statistics as leading comments, then
/// `R,x1,...,xn,<one column per derivative block>,total` with one row per
/// sampled cylinder (weighted block contributions).
pub fn write_norm_report(path: &Path, report: &NormReport, n: usize) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# value = {}", fmt_f64(report.value));
    let _ = writeln!(s, "# gradient_part = {}", fmt_f64(report.gradient_part));
    let _ = writeln!(s, "# skipped = {}", report.skipped);
    let blocks = report.samples.first().map_or_else(
        || cz_indices(n).len(),
        |sample| sample.weighted.len(),
    );
    let _ = write!(s, "R");
    for axis in 1..=n {
        let _ = write!(s, ",x{axis}");
    }
    for name in block_names(n, blocks) {
        let _ = write!(s, ",{name}");
    }
    s.push_str(",total\n");
    for sample in &report.samples {
        let _ = write!(s, "{}", fmt_f64(sample.cylinder.ball.radius));
        for c in &sample.cylinder.ball.center {
            let _ = write!(s, ",{}", fmt_f64(*c));
        }
        for w in &sample.weighted {
            let _ = write!(s, ",{}", fmt_f64(*w));
        }
        let _ = writeln!(s, ",{}", fmt_f64(sample.total));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Film-seminorm report CSV: same layout as the trajectory-norm report
/// (the window top `s = R⁴` is implied by `R`); clipped-sample count joins
/// the summary comments.
pub fn write_film_report(path: &Path, report: &FilmSeminormReport) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# value = {}", fmt_f64(report.value));
    let _ = writeln!(s, "# clipped = {}", report.clipped);
    let _ = writeln!(s, "# skipped = {}", report.skipped);
    let n = report.samples.first().map_or(1, |sample| sample.center.len());
    let blocks = report
        .samples
        .first()
        .map_or_else(|| cz_indices(n).len(), |sample| sample.weighted.len());
    let _ = write!(s, "R");
    for axis in 1..=n {
        let _ = write!(s, ",x{axis}");
    }
    for name in block_names(n, blocks) {
        let _ = write!(s, ",{name}");
    }
    s.push_str(",total\n");
    for sample in &report.samples {
        let _ = write!(s, "{}", fmt_f64(sample.radius));
        for c in &sample.center {
            let _ = write!(s, ",{}", fmt_f64(*c));
        }
        for w in &sample.weighted {
            let _ = write!(s, ",{}", fmt_f64(*w));
        }
        let _ = writeln!(s, ",{}", fmt_f64(sample.total));
    }
    fs::write(path, s)?;
    Ok(())
}
