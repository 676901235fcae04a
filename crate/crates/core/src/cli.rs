//! Batch entry point: run configuration, `simulate`, `symbol-check` and
//! `validate`.
//!
//! A configuration is a flat text file of `key = value` lines (`#` starts a
//! comment) followed by `--key=value` overrides on the command line. Every
//! key is checked before anything is allocated; errors name the key.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::flows::{self, advance, default_dt, write_csv_header, FlowError, FlowKind, FlowState, Method};
use crate::forms::{KForm, DIM};
use crate::grid::{self, make_initial_data, FdOrder, FormField, GridError, InitialData, TorusGrid};
use crate::symbol::{self, OperatorKind, SymbolProblem, SymbolReport};
use crate::g2::standard_phi;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATE_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_POSITIVITY: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;
pub const EXIT_SYMBOL: i32 = 5;

/// Every accepted key with a one-line description.
pub const KEYS: [(&str, &str); 26] = [
    ("command", "simulate | symbol-check | validate"),
    ("flow", "laplacian | deturck | coflow | modified_coflow | gauged_modified_coflow"),
    ("a", "constant A of the modified co-flow"),
    ("method", "rk4 | euler"),
    ("n", "sites per active axis"),
    ("active_axes", "number of leading axes carrying n sites; the rest are frozen"),
    ("lengths", "one length for all axes or seven comma-separated lengths"),
    ("fd_order", "2 | 4"),
    ("initial", "standard | closed_perturbation | file"),
    ("epsilon", "perturbation amplitude"),
    ("seed", "random seed for initial data and symbol sweeps"),
    ("band", "largest mode number of the perturbation potential"),
    ("input", "snapshot path for initial = file"),
    ("dt", "fixed time step; overrides cfl"),
    ("cfl", "step factor for the diffusive step bound"),
    ("steps", "number of time steps"),
    ("csv", "diagnostics CSV path"),
    ("snapshot_prefix", "snapshot path prefix"),
    ("snapshot_every", "snapshot cadence in steps; 0 writes only the first and last"),
    ("threads", "worker threads; results do not depend on it"),
    ("operator", "deturck | gauged_modified_coflow | laplacian"),
    ("xi", "seven comma-separated covector components"),
    ("samples", "random problems for symbol-check; 0 checks phi0 at xi"),
    ("radius", "sup-norm radius of the random perturbations of phi0"),
    ("negate", "test hook: flip the sign of the symbol"),
    ("spectra_csv", "restricted spectra CSV path for symbol-check"),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{key}: {message}")]
    Key { key: String, message: String },
    #[error("{path}:{line}: expected key = value, got {text:?}")]
    Syntax { path: String, line: usize, text: String },
    #[error("unknown key {0:?}")]
    UnknownKey(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{0}")]
    Usage(String),
}

fn key_error(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.to_string(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    SymbolCheck,
    Validate,
}

impl Command {
    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "simulate" => Some(Command::Simulate),
            "symbol-check" => Some(Command::SymbolCheck),
            "validate" => Some(Command::Validate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DtPolicy {
    Fixed(f64),
    Cfl(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub flow: FlowKind,
    pub method: Method,
    pub n: usize,
    pub active_axes: usize,
    pub lengths: [f64; DIM],
    pub fd_order: FdOrder,
    pub initial: InitialData,
    pub dt: DtPolicy,
    pub steps: usize,
    pub csv: Option<PathBuf>,
    pub snapshot_prefix: Option<PathBuf>,
    pub snapshot_every: usize,
    pub threads: Option<usize>,
    pub operator: OperatorKind,
    pub xi: [f64; DIM],
    pub samples: usize,
    pub radius: f64,
    pub seed: u64,
    pub negate: bool,
    pub spectra_csv: Option<PathBuf>,
}

/// Raw key-value pairs; later insertions win.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse_text(text: &str, path: &str) -> Result<Self, ConfigError> {
        let mut raw = RawConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: path.to_string(),
                line: i + 1,
                text: line.to_string(),
            })?;
            raw.set(key.trim(), value.trim())?;
        }
        Ok(raw)
    }

    pub fn read(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RawConfig::parse_text(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    fn parsed<T: FromStr>(&self, key: &str, default: T) -> Result<T, ConfigError> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| key_error(key, format!("cannot parse {v:?}"))),
        }
    }

    fn float(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.parsed(key, default)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(key_error(key, "must be finite"))
        }
    }

    fn positive(&self, key: &str, default: f64) -> Result<f64, ConfigError> {
        let v = self.float(key, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(key_error(key, "must be positive"))
        }
    }

    fn floats(&self, key: &str) -> Result<Option<Vec<f64>>, ConfigError> {
        let Some(v) = self.get(key) else { return Ok(None) };
        v.split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| key_error(key, format!("cannot parse {s:?} as a finite number")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Some)
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.get(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// Validated configuration. `command` may come from the key or the
    /// command line.
    pub fn build(&self, command: Option<Command>) -> Result<RunConfig, ConfigError> {
        let command = match (command, self.get("command")) {
            (Some(c), _) => c,
            (None, Some(name)) => {
                Command::from_name(name).ok_or_else(|| key_error("command", format!("unknown command {name:?}")))?
            }
            (None, None) => return Err(key_error("command", "missing")),
        };
        let a = self.float("a", 0.0)?;
        let flow_name = self.get("flow").unwrap_or("deturck");
        let flow = FlowKind::from_name(flow_name, a)
            .ok_or_else(|| key_error("flow", format!("unknown flow {flow_name:?}")))?;
        let method_name = self.get("method").unwrap_or("rk4");
        let method =
            Method::from_name(method_name).ok_or_else(|| key_error("method", format!("unknown method {method_name:?}")))?;

        let order_value: usize = self.parsed("fd_order", 2)?;
        let fd_order = FdOrder::from_int(order_value).ok_or_else(|| key_error("fd_order", "must be 2 or 4"))?;
        let n: usize = self.parsed("n", 4)?;
        let min_sites = if fd_order == FdOrder::Second { 4 } else { 6 };
        if n < min_sites {
            return Err(key_error(
                "n",
                format!("the order-{order_value} stencil needs n >= {min_sites}, got {n}"),
            ));
        }
        let active_axes: usize = self.parsed("active_axes", DIM)?;
        if !(1..=DIM).contains(&active_axes) {
            return Err(key_error("active_axes", format!("must be between 1 and {DIM}")));
        }
        let lengths = match self.floats("lengths")? {
            None => [TAU; DIM],
            Some(v) if v.len() == 1 => [v[0]; DIM],
            Some(v) if v.len() == DIM => std::array::from_fn(|i| v[i]),
            Some(v) => return Err(key_error("lengths", format!("expected 1 or {DIM} values, got {}", v.len()))),
        };
        if lengths.iter().any(|l| *l <= 0.0) {
            return Err(key_error("lengths", "must be positive"));
        }

        let seed: u64 = self.parsed("seed", 1)?;
        let initial = match self.get("initial").unwrap_or("standard") {
            "standard" => InitialData::Standard,
            "closed_perturbation" => {
                let epsilon = self.float("epsilon", 0.01)?;
                let band: usize = self.parsed("band", 1)?;
                if band == 0 || 2 * band >= n {
                    return Err(key_error("band", format!("need 1 <= band < n/2 = {}", n as f64 / 2.0)));
                }
                InitialData::ClosedPerturbation { epsilon, seed, band }
            }
            "file" => InitialData::File(self.path("input").ok_or_else(|| key_error("input", "required for initial = file"))?),
            other => return Err(key_error("initial", format!("unknown initial data {other:?}"))),
        };
        let dt = match self.get("dt") {
            Some(_) => DtPolicy::Fixed(self.positive("dt", 0.0)?),
            None => DtPolicy::Cfl(self.positive("cfl", flows::DEFAULT_CFL)?),
        };
        let steps: usize = self.parsed("steps", 10)?;
        let snapshot_prefix = self.path("snapshot_prefix");
        let snapshot_every: usize = self.parsed("snapshot_every", 0)?;
        if snapshot_every > 0 && snapshot_prefix.is_none() {
            return Err(key_error("snapshot_every", "needs snapshot_prefix"));
        }
        let threads = match self.get("threads") {
            None => None,
            Some(_) => {
                let t: usize = self.parsed("threads", 1)?;
                if t == 0 {
                    return Err(key_error("threads", "must be at least 1"));
                }
                Some(t)
            }
        };

        let operator_name = self.get("operator").unwrap_or("deturck");
        let operator = OperatorKind::from_name(operator_name, a)
            .ok_or_else(|| key_error("operator", format!("unknown operator {operator_name:?}")))?;
        let xi = match self.floats("xi")? {
            None => {
                let mut e = [0.0; DIM];
                e[0] = 1.0;
                e
            }
            Some(v) if v.len() == DIM => std::array::from_fn(|i| v[i]),
            Some(v) => return Err(key_error("xi", format!("expected {DIM} values, got {}", v.len()))),
        };
        if xi.iter().all(|x| *x == 0.0) {
            return Err(key_error("xi", "must be nonzero"));
        }
        let samples: usize = self.parsed("samples", 0)?;
        let radius = self.positive("radius", 0.1)?;
        if radius > 0.5 {
            return Err(key_error("radius", "must be at most 0.5"));
        }
        let negate: bool = self.parsed("negate", false)?;

        Ok(RunConfig {
            command,
            flow,
            method,
            n,
            active_axes,
            lengths,
            fd_order,
            initial,
            dt,
            steps,
            csv: self.path("csv"),
            snapshot_prefix,
            snapshot_every,
            threads,
            operator,
            xi,
            samples,
            radius,
            seed,
            negate,
            spectra_csv: self.path("spectra_csv"),
        })
    }
}

pub const USAGE: &str = "usage: g2flow <simulate|symbol-check|validate> [CONFIG] [--key=value ...]";

/// Parse command-line arguments (without the program name).
pub fn parse_args(args: &[String]) -> Result<RunConfig, ConfigError> {
    let mut command = None;
    let mut config_path = None;
    let mut overrides = Vec::new();
    for arg in args {
        if let Some(kv) = arg.strip_prefix("--") {
            if kv == "help" {
                return Err(ConfigError::Usage(USAGE.to_string()));
            }
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| ConfigError::Usage(format!("override {arg:?} must look like --key=value")))?;
            overrides.push((k.to_string(), v.to_string()));
        } else if command.is_none() && config_path.is_none() && Command::from_name(arg).is_some() {
            command = Command::from_name(arg);
        } else if config_path.is_none() {
            config_path = Some(PathBuf::from(arg));
        } else {
            return Err(ConfigError::Usage(format!("unexpected argument {arg:?}\n{USAGE}")));
        }
    }
    let mut raw = match &config_path {
        Some(p) => RawConfig::read(p)?,
        None => RawConfig::default(),
    };
    for (k, v) in &overrides {
        raw.set(k, v)?;
    }
    raw.build(command)
}

impl RunConfig {
    pub fn grid(&self) -> Result<TorusGrid, GridError> {
        let shape = std::array::from_fn(|a| if a < self.active_axes { self.n } else { 1 });
        TorusGrid::with_shape(shape, self.lengths, self.fd_order)
    }
}

/// Entry point used by the binary; returns the exit status.
pub fn run(args: &[String], out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)) -> i32 {
    let config = match parse_args(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = writeln!(err, "config error: {e}");
            return EXIT_CONFIG;
        }
    };
    let work = |out: &mut (dyn Write + Send), err: &mut (dyn Write + Send)| match config.command {
        Command::Simulate => simulate(&config, out, err),
        Command::SymbolCheck => symbol_check(&config, out, err),
        Command::Validate => validate(&config, out, err),
    };
    match config.threads {
        None => work(out, err),
        Some(t) => match rayon::ThreadPoolBuilder::new().num_threads(t).build() {
            Ok(pool) => pool.install(|| work(out, err)),
            Err(e) => {
                let _ = writeln!(err, "config error: threads: {e}");
                EXIT_CONFIG
            }
        },
    }
}

fn snapshot_path(prefix: &Path, tag: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(format!("_{tag}.snap"));
    PathBuf::from(name)
}

fn io_failure(err: &mut dyn Write, what: &str, e: impl std::fmt::Display) -> i32 {
    let _ = writeln!(err, "error: {what}: {e}");
    EXIT_CONFIG
}

/// Run the configured flow, one CSV row per step (row 0 is the initial
/// state). Snapshots are `<prefix>_<step>.snap` at the cadence and
/// `<prefix>_final.snap` at the end, also after a failed step.
pub fn simulate(config: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let grid = match config.grid() {
        Ok(g) => g,
        Err(e) => return io_failure(err, "grid", e),
    };
    let phi = match make_initial_data(&grid, &config.initial) {
        Ok(p) => p,
        Err(GridError::NotPositive { site, margin }) => {
            let _ = writeln!(err, "initial data not positive at {site:?} (margin {margin:e})");
            return EXIT_POSITIVITY;
        }
        Err(e) => return io_failure(err, "initial data", e),
    };
    let mut state = match FlowState::new(phi, 0.0) {
        Ok(s) => s,
        Err(e) => return io_failure(err, "initial state", e),
    };
    let mut csv: Option<BufWriter<File>> = match &config.csv {
        None => None,
        Some(p) => match File::create(p) {
            Ok(f) => Some(BufWriter::new(f)),
            Err(e) => return io_failure(err, &p.display().to_string(), e),
        },
    };
    let snapshot = |field: &FormField, t: f64, tag: &str| -> Result<(), GridError> {
        match &config.snapshot_prefix {
            Some(prefix) => grid::write_snapshot(&snapshot_path(prefix, tag), field, t),
            None => Ok(()),
        }
    };
    let emit_row = |csv: &mut Option<BufWriter<File>>, state: &FlowState, step: usize, dt: f64| -> Result<f64, String> {
        let d = flows::monitors(state, config.flow).map_err(|e| e.to_string())?;
        if let Some(w) = csv.as_mut() {
            writeln!(w, "{}", d.csv_row(step, dt)).map_err(|e| e.to_string())?;
        }
        Ok(d.rhs_l2)
    };

    let _ = writeln!(
        out,
        "simulate: flow {} method {} grid {:?} steps {}",
        config.flow,
        config.method.name(),
        grid.shape(),
        config.steps
    );
    if let Some(w) = csv.as_mut() {
        if let Err(e) = write_csv_header(w) {
            return io_failure(err, "csv", e);
        }
    }
    if let Err(e) = emit_row(&mut csv, &state, 0, 0.0) {
        return io_failure(err, "diagnostics", e);
    }
    if config.snapshot_every > 0 {
        if let Err(e) = snapshot(state.phi(), state.t(), &format!("{:06}", 0)) {
            return io_failure(err, "snapshot", e);
        }
    }

    let mut status = EXIT_OK;
    for step in 1..=config.steps {
        let dt = match config.dt {
            DtPolicy::Fixed(dt) => dt,
            DtPolicy::Cfl(cfl) => default_dt(&state, cfl),
        };
        match advance(&state, config.flow, dt, config.method) {
            Ok((next, used)) => {
                state = next;
                match emit_row(&mut csv, &state, step, used) {
                    Ok(r) if r.is_finite() => {}
                    Ok(_) => {
                        let _ = writeln!(err, "divergence at step {step}");
                        status = EXIT_DIVERGENCE;
                        break;
                    }
                    Err(e) => return io_failure(err, "diagnostics", e),
                }
                if config.snapshot_every > 0 && step % config.snapshot_every == 0 {
                    if let Err(e) = snapshot(state.phi(), state.t(), &format!("{step:06}")) {
                        return io_failure(err, "snapshot", e);
                    }
                }
            }
            Err(e @ FlowError::LeftPositiveCone { .. }) => {
                let _ = writeln!(err, "step {step}: {e}");
                status = EXIT_POSITIVITY;
                break;
            }
            Err(e @ FlowError::Divergence { .. }) => {
                let _ = writeln!(err, "step {step}: {e}");
                status = EXIT_DIVERGENCE;
                break;
            }
            Err(e) => return io_failure(err, "step", e),
        }
    }
    if let Some(w) = csv.as_mut() {
        if let Err(e) = w.flush() {
            return io_failure(err, "csv", e);
        }
    }
    if let Err(e) = snapshot(state.phi(), state.t(), "final") {
        return io_failure(err, "snapshot", e);
    }
    let _ = writeln!(out, "finished at t = {:.6e} with status {status}", state.t());
    status
}

/// Checks the configured problem (`samples = 0`) or a seeded sweep.
pub fn symbol_check(config: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let problems = if config.samples == 0 {
        SymbolProblem::new(config.operator, standard_phi(), &KForm::one_form(config.xi)).map(|p| vec![p])
    } else {
        symbol::sweep_problems(config.operator, config.samples, config.radius, config.seed)
    };
    let problems: Vec<SymbolProblem> = match problems {
        Ok(ps) => ps
            .into_iter()
            .map(|p| if config.negate { p.negated() } else { p })
            .collect(),
        Err(e) => {
            let _ = writeln!(err, "symbol-check: {e}");
            return EXIT_CONFIG;
        }
    };
    let reports: Vec<SymbolReport> = match symbol::check_all(&problems) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "symbol-check: {e}");
            return EXIT_SYMBOL;
        }
    };
    if reports.len() == 1 {
        let _ = write!(out, "{}", reports[0].to_text());
    } else {
        for (i, r) in reports.iter().enumerate() {
            let _ = writeln!(
                out,
                "sample {i}: min_real_part {:.6e} invariance_defect {:.1e} verdict {}",
                r.min_real_part,
                r.invariance_defect,
                if r.verdict { "positive" } else { "not positive" }
            );
        }
    }
    if let Some(path) = &config.spectra_csv {
        if let Err(e) = std::fs::write(path, symbol::spectra_csv(&reports)) {
            return io_failure(err, &path.display().to_string(), e);
        }
    }
    let failed = reports.iter().filter(|r| !r.verdict).count();
    let worst = reports.iter().map(|r| r.min_real_part).fold(f64::INFINITY, f64::min);
    let _ = writeln!(
        out,
        "{} of {} verdicts positive; smallest real part {worst:.6e}",
        reports.len() - failed,
        reports.len()
    );
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_SYMBOL
    }
}

/// Runs the invariant suite on the configured grid size and prints a table.
pub fn validate(config: &RunConfig, out: &mut dyn Write, _err: &mut dyn Write) -> i32 {
    let checks = crate::validate::run_suite(config.n, config.fd_order);
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let _ = writeln!(out, "{:<width$}  result  value      tolerance", "check");
    for c in &checks {
        let _ = writeln!(
            out,
            "{:<width$}  {}    {:<9.3e}  {:.0e}",
            c.name,
            if c.passed { "PASS" } else { "FAIL" },
            c.value,
            c.tolerance
        );
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    let _ = writeln!(out, "{} checks, {} failed", checks.len(), failed);
    if failed == 0 {
        EXIT_OK
    } else {
        EXIT_VALIDATE_FAILED
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    fn key_of(e: ConfigError) -> String {
        match e {
            ConfigError::Key { key, .. } => key,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults() {
        let c = parse_args(&args(&["simulate"])).unwrap();
        assert_eq!(c.command, Command::Simulate);
        assert_eq!(c.flow, FlowKind::Deturck);
        assert_eq!(c.n, 4);
        assert_eq!(c.dt, DtPolicy::Cfl(0.1));
        assert_eq!(c.initial, InitialData::Standard);
    }

    #[test]
    fn file_then_overrides() {
        let raw = RawConfig::parse_text("flow = coflow # comment\nn=6\n\nsteps = 3", "cfg").unwrap();
        let c = raw.build(Some(Command::Simulate)).unwrap();
        assert_eq!(c.flow, FlowKind::Coflow);
        assert_eq!((c.n, c.steps), (6, 3));
        let mut raw = raw;
        raw.set("n", "5").unwrap();
        assert_eq!(raw.build(Some(Command::Simulate)).unwrap().n, 5);
    }

    #[test]
    fn errors_name_the_key() {
        let cases = [
            ("n=3", "n"),
            ("fd_order=3", "fd_order"),
            ("flow=ricci", "flow"),
            ("dt=-1", "dt"),
            ("cfl=nan", "cfl"),
            ("xi=1,0", "xi"),
            ("xi=0,0,0,0,0,0,0", "xi"),
            ("lengths=1,2", "lengths"),
            ("initial=closed_perturbation\nband=2", "band"),
            ("initial=file", "input"),
            ("snapshot_every=2", "snapshot_every"),
            ("steps=-4", "steps"),
            ("negate=maybe", "negate"),
            ("threads=0", "threads"),
            ("radius=3", "radius"),
            ("n=6\nfd_order=4\nn=5", "n"),
        ];
        for (text, key) in cases {
            let e = RawConfig::parse_text(text, "cfg").unwrap().build(Some(Command::Simulate)).unwrap_err();
            assert_eq!(key_of(e), key, "{text}");
        }
    }

    #[test]
    fn malformed_lines_and_unknown_keys() {
        assert!(matches!(
            RawConfig::parse_text("just words", "cfg"),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
        assert!(matches!(
            RawConfig::parse_text("colour = red", "cfg"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(parse_args(&args(&["validate", "--n"])), Err(ConfigError::Usage(_))));
        assert!(matches!(parse_args(&args(&[])), Err(ConfigError::Key { .. })));
    }

    #[test]
    fn n3_validate_is_config_error() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(&args(&["validate", "--n=3"]), &mut o, &mut e), EXIT_CONFIG);
        assert!(String::from_utf8(e).unwrap().contains("n:"));
    }

    #[test]
    fn active_axes_freeze_trailing_axes() {
        let c = parse_args(&args(&["simulate", "--active_axes=2", "--n=5"])).unwrap();
        assert_eq!(c.grid().unwrap().shape(), &[5, 5, 1, 1, 1, 1, 1]);
    }

    #[test]
    fn symbol_check_exit_codes() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(&args(&["symbol-check"]), &mut o, &mut e), EXIT_OK);
        let text = String::from_utf8(o).unwrap();
        assert!(text.contains("spectrum: {1.00000000 x15}"), "{text}");
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(&args(&["symbol-check", "--negate=true"]), &mut o, &mut e), EXIT_SYMBOL);
    }

    #[test]
    fn simulate_fixed_point_on_reduced_grid() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("d.csv");
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let status = run(
            &args(&[
                "simulate",
                "--active_axes=2",
                "--steps=3",
                &format!("--csv={}", csv.display()),
                &format!("--snapshot_prefix={}", dir.path().join("s").display()),
                "--snapshot_every=2",
            ]),
            &mut o,
            &mut e,
        );
        assert_eq!(status, EXIT_OK, "{}", String::from_utf8_lossy(&e));
        let text = std::fs::read_to_string(&csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2 + 4);
        for row in &lines[2..] {
            let rhs: f64 = row.rsplit(',').next().unwrap().parse().unwrap();
            assert!(rhs < 1e-12);
        }
        for tag in ["000000", "000002", "final"] {
            assert!(dir.path().join(format!("s_{tag}.snap")).exists(), "{tag}");
        }
        assert!(!dir.path().join("s_000001.snap").exists());
    }

    #[test]
    fn simulate_reports_positivity_loss() {
        let dir = tempfile::tempdir().unwrap();
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let status = run(
            &args(&[
                "simulate",
                "--active_axes=2",
                "--n=4",
                "--initial=closed_perturbation",
                "--epsilon=0.3",
                "--dt=1e4",
                "--method=euler",
                "--steps=2",
                &format!("--snapshot_prefix={}", dir.path().join("s").display()),
            ]),
            &mut o,
            &mut e,
        );
        assert_eq!(status, EXIT_POSITIVITY, "{}", String::from_utf8_lossy(&e));
        assert!(dir.path().join("s_final.snap").exists());
    }
}
