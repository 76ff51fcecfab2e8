//! `evidence-da` command-line front end.
//!
//! Every subcommand reads a JSON [`TwinConfig`] (a path, or one of the
//! bundled `l63_default.json` / `l95_default.json`), writes its results as CSV
//! into `--out`, and records a `manifest.json` alongside. Exit codes: 0 on
//! success, 2 on usage or configuration errors, 3 on numerical failure.

pub mod output;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use evidence_da::evidence::CmeMethod;
use evidence_da::harness::{
    attribution_from, estimate_parameter_with, prepare, run_oracle_compare_with, run_sweep_with, run_twin_with,
    Branch, SweepAxis, SweepSpec, TwinConfig,
};
use evidence_da::validate::run_invariant_suite;
use evidence_da::CmeError;

use output::{fmt_f64, fmt_opt, write_csv, write_manifest, RunManifest};

pub const L63_DEFAULT: &str = include_str!("../configs/l63_default.json");
pub const L95_DEFAULT: &str = include_str!("../configs/l95_default.json");

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "EVIDENCE_DA_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, bad config, or unusable paths (exit 2).
    Usage(String),
    /// The computation itself failed (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<CmeError> for CliError {
    fn from(e: CmeError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Usage(e.to_string())
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "evidence-da", version, about = "Contextual model evidence from ensemble data assimilation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// CME of the factual and counterfactual models on every window.
    TwinRun(Common),
    /// Mean CME along a forcing-gap or window-length grid.
    Sweep(SweepArgs),
    /// Mean discriminating power along a forcing-gap or window-length grid.
    Attribute(SweepArgs),
    /// Profile the mean CME over absolute forcing values.
    EstimateParam(EstimateArgs),
    /// Quadrature reference against a Monte Carlo ladder and power-law fit.
    OracleCompare(OracleArgs),
    /// Run the invariant suite and check CSV schemas.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelName {
    L63,
    L95,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config path, or `l63_default.json` / `l95_default.json`.
    #[arg(long)]
    config: Option<String>,
    /// Bundled default used when `--config` is absent.
    #[arg(long, value_enum, default_value = "l63")]
    model: ModelName,
    /// Override the number of evidencing windows.
    #[arg(long)]
    windows: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override the window length K.
    #[arg(long = "window-k")]
    window_k: Option<usize>,
    /// Comma-separated subset of is,enkf,en4dvar,ienks.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<String>>,
    #[arg(long, default_value = "evidence-da-out")]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AxisArg {
    ForcingDelta,
    WindowLength,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "forcing-delta")]
    axis: AxisArg,
    /// `lo:hi:step` or a comma-separated list. Defaults per model and axis.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    /// Absolute forcing values, `lo:hi:step` or a comma-separated list.
    #[arg(long, allow_hyphen_values = true)]
    grid: Option<String>,
}

#[derive(Debug, Args)]
struct OracleArgs {
    #[command(flatten)]
    common: Common,
    /// `1e2..1e5` (decades) or a comma-separated list of sample sizes.
    #[arg(long = "mc-ladder")]
    mc_ladder: Option<String>,
    /// Skip the quadrature reference (required for high-dimensional models).
    #[arg(long = "no-ghq")]
    no_ghq: bool,
}

#[derive(Debug, Args)]
struct ValidateArgs {
    /// CSV files whose headers must match a registered schema.
    #[arg(long, num_args = 1..)]
    csv: Vec<PathBuf>,
    #[arg(long, default_value = "evidence-da-out")]
    out: PathBuf,
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("{e}");
        return e.exit_code();
    }
    let started = Instant::now();
    match dispatch(cli.command, started) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
    // A pool may already exist when called repeatedly in one process.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Loads a config by path or bundled name.
pub fn load_config(config: Option<&str>, model: &str) -> Result<TwinConfig, CliError> {
    let text = match config {
        Some(c) if Path::new(c).is_file() => {
            std::fs::read_to_string(c).map_err(|e| CliError::io(Path::new(c), e))?
        }
        Some("l63_default.json") | Some("l63") => L63_DEFAULT.to_string(),
        Some("l95_default.json") | Some("l95") => L95_DEFAULT.to_string(),
        Some(c) => return Err(CliError::Usage(format!("config not found: {c}"))),
        None if model == "l95" => L95_DEFAULT.to_string(),
        None => L63_DEFAULT.to_string(),
    };
    Ok(TwinConfig::from_json(&text)?)
}

fn resolve(common: &Common) -> Result<TwinConfig, CliError> {
    let model = match common.model {
        ModelName::L63 => "l63",
        ModelName::L95 => "l95",
    };
    let mut cfg = load_config(common.config.as_deref(), model)?;
    if let Some(n) = common.windows {
        cfg.n_windows = n;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(k) = common.window_k {
        cfg.window_k = k;
    }
    if let Some(ms) = &common.methods {
        cfg.methods = ms
            .iter()
            .map(|m| CmeMethod::from_name(m.trim()))
            .collect::<Result<_, _>>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `lo:hi:step` (inclusive) or `a,b,c`.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = || CliError::Usage(format!("invalid grid {s:?}: expected lo:hi:step or a comma-separated list"));
    let parts: Vec<&str> = s.split(':').collect();
    let grid = if parts.len() == 3 {
        let [lo, hi, step] = [parts[0], parts[1], parts[2]].map(|p| p.trim().parse::<f64>());
        let (lo, hi, step) = (lo.map_err(|_| bad())?, hi.map_err(|_| bad())?, step.map_err(|_| bad())?);
        if !(step > 0.0) || !(hi >= lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(bad());
        }
        let n = ((hi - lo) / step + 1e-9).floor() as usize;
        if n > 100_000 {
            return Err(bad());
        }
        // Round to suppress accumulated drift, e.g. 0.30000000000000004.
        (0..=n).map(|i| ((lo + i as f64 * step) * 1e12).round() / 1e12).collect()
    } else if parts.len() == 1 {
        s.split(',').map(|p| p.trim().parse::<f64>().map_err(|_| bad())).collect::<Result<Vec<_>, _>>()?
    } else {
        return Err(bad());
    };
    if grid.is_empty() || grid.iter().any(|v| !v.is_finite()) {
        return Err(bad());
    }
    Ok(grid)
}

/// `1e2..1e5` expands to the decades 100, 1000, 10000, 100000; otherwise a
/// comma-separated list.
pub fn parse_ladder(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("invalid MC ladder {s:?}"));
    let size = |p: &str| -> Result<usize, CliError> {
        let v: f64 = p.trim().parse().map_err(|_| bad())?;
        if v >= 1.0 && v <= 1e9 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            Err(bad())
        }
    };
    let ladder = if let Some((lo, hi)) = s.split_once("..") {
        let (mut n, hi) = (size(lo)?, size(hi)?);
        let mut out = Vec::new();
        while n <= hi {
            out.push(n);
            n *= 10;
        }
        out
    } else {
        s.split(',').map(size).collect::<Result<Vec<_>, _>>()?
    };
    if ladder.is_empty() || ladder.windows(2).any(|w| w[1] <= w[0]) {
        return Err(bad());
    }
    Ok(ladder)
}

fn default_grid(cfg: &TwinConfig, axis: SweepAxis) -> Vec<f64> {
    match (axis, cfg.factual.name()) {
        (SweepAxis::WindowLength, _) => vec![2.0, 5.0, 10.0, 15.0],
        (SweepAxis::ForcingDelta, "l63") => (-4..=4).map(|i| 2.0 * i as f64).collect(),
        (SweepAxis::ForcingDelta, _) => (-3..=3).map(f64::from).collect(),
    }
}

fn default_estimate_grid(cfg: &TwinConfig) -> Vec<f64> {
    let f = cfg.factual.forcing();
    match cfg.factual.name() {
        "l63" => (-4..=4).map(|i| f + 2.0 * i as f64).collect(),
        _ => (-6..=6).map(|i| f + 0.5 * i as f64).collect(),
    }
}

struct Finish<'a> {
    command: &'static str,
    cfg: Option<&'a TwinConfig>,
    out: &'a Path,
    outputs: Vec<PathBuf>,
    started: Instant,
}

impl Finish<'_> {
    fn write(self) -> Result<(), CliError> {
        let manifest = RunManifest {
            command: self.command.to_string(),
            config_digest: self.cfg.map(|c| output::config_digest(&c.to_canonical_json())),
            seed: self.cfg.map(|c| c.seed),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            csv_schema_version: output::CSV_SCHEMA_VERSION,
            wall_time_seconds: self.started.elapsed().as_secs_f64(),
            outputs: self.outputs,
        };
        let path = self.out.join("manifest.json");
        write_manifest(&path, &manifest)?;
        for o in &manifest.outputs {
            println!("wrote {}", o.display());
        }
        println!("wrote {}", path.display());
        Ok(())
    }
}

fn dispatch(command: Command, started: Instant) -> Result<(), CliError> {
    match command {
        Command::TwinRun(c) => twin_run(&c, started),
        Command::Sweep(a) => sweep(&a, false, started),
        Command::Attribute(a) => sweep(&a, true, started),
        Command::EstimateParam(a) => estimate(&a, started),
        Command::OracleCompare(a) => oracle(&a, started),
        Command::Validate(a) => validate(&a, started),
    }
}

fn twin_run(c: &Common, started: Instant) -> Result<(), CliError> {
    let cfg = resolve(c)?;
    let ctx = prepare(&cfg, cfg.window_k)?;
    let series = run_twin_with(&ctx, &cfg)?;
    let rows: Vec<Vec<String>> = series
        .records
        .iter()
        .map(|r| {
            vec![
                r.window_start.to_string(),
                r.method.name().to_string(),
                r.branch.name().to_string(),
                fmt_opt(r.log_cme),
                r.converged.to_string(),
                r.note.clone(),
            ]
        })
        .collect();
    let path = c.out.join("twin.csv");
    write_csv(&path, &output::TWIN, &rows)?;
    if let Some(rmse) = ctx.post_spinup_rmse(cfg.spinup_steps) {
        println!("analysis rmse after spin-up: {rmse:.4}");
    }
    for &m in &series.methods {
        let f = series.mean(m, Branch::Factual);
        let p = series.mean(m, Branch::Counterfactual);
        println!(
            "{:<8} mean log p1 {:>12} mean log p0 {:>12}",
            m.name(),
            f.map_or("-".into(), |v| format!("{v:.3}")),
            p.map_or("-".into(), |v| format!("{v:.3}"))
        );
    }
    Finish { command: "twin-run", cfg: Some(&cfg), out: &c.out, outputs: vec![path], started }.write()
}

fn sweep(a: &SweepArgs, attribution: bool, started: Instant) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let axis = match a.axis {
        AxisArg::ForcingDelta => SweepAxis::ForcingDelta,
        AxisArg::WindowLength => SweepAxis::WindowLength,
    };
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => default_grid(&cfg, axis),
    };
    let spec = SweepSpec { axis, grid, methods: cfg.methods.clone() };
    spec.validate()?;
    let max_k = match axis {
        SweepAxis::ForcingDelta => cfg.window_k,
        SweepAxis::WindowLength => spec.grid.iter().fold(1.0, |m: f64, &k| m.max(k)) as usize,
    };
    let ctx = prepare(&cfg, max_k)?;
    let rows = run_sweep_with(&ctx, &cfg, &spec)?;
    let (command, path) = if attribution {
        let path = a.common.out.join("attribution.csv");
        let body: Vec<Vec<String>> = attribution_from(&rows)
            .iter()
            .map(|r| {
                vec![
                    axis.name().to_string(),
                    fmt_f64(r.value),
                    r.method.name().to_string(),
                    fmt_opt(r.mean_power),
                    r.n_ok.to_string(),
                    r.n_failed.to_string(),
                ]
            })
            .collect();
        write_csv(&path, &output::ATTRIBUTION, &body)?;
        ("attribute", path)
    } else {
        let path = a.common.out.join("sweep.csv");
        let body: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    axis.name().to_string(),
                    fmt_f64(r.value),
                    r.method.name().to_string(),
                    fmt_opt(r.mean_factual),
                    fmt_opt(r.mean_candidate),
                    fmt_opt(r.mean_power),
                    r.n_ok.to_string(),
                    r.n_failed.to_string(),
                ]
            })
            .collect();
        write_csv(&path, &output::SWEEP, &body)?;
        ("sweep", path)
    };
    Finish { command, cfg: Some(&cfg), out: &a.common.out, outputs: vec![path], started }.write()
}

fn estimate(a: &EstimateArgs, started: Instant) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let grid = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => default_estimate_grid(&cfg),
    };
    let ctx = prepare(&cfg, cfg.window_k)?;
    let (mut profile, mut summary) = (Vec::new(), Vec::new());
    for &m in &cfg.methods {
        let est = estimate_parameter_with(&ctx, &cfg, &grid, m)?;
        for &(theta, v) in &est.profile {
            profile.push(vec![m.name().to_string(), fmt_f64(theta), fmt_f64(v)]);
        }
        println!(
            "{:<8} argmax {:.4} 95% interval [{:.4}, {:.4}]{}{}",
            m.name(),
            est.argmax,
            est.ci.0,
            est.ci.1,
            if est.unbracketed { " (unbracketed)" } else { "" },
            if est.ci_truncated { " (interval truncated)" } else { "" }
        );
        summary.push(vec![
            m.name().to_string(),
            fmt_f64(est.argmax),
            fmt_f64(est.ci.0),
            fmt_f64(est.ci.1),
            est.unbracketed.to_string(),
            est.ci_truncated.to_string(),
        ]);
    }
    let p = a.common.out.join("profile.csv");
    let s = a.common.out.join("estimate.csv");
    write_csv(&p, &output::PROFILE, &profile)?;
    write_csv(&s, &output::ESTIMATE, &summary)?;
    Finish { command: "estimate-param", cfg: Some(&cfg), out: &a.common.out, outputs: vec![p, s], started }.write()
}

fn oracle(a: &OracleArgs, started: Instant) -> Result<(), CliError> {
    let cfg = resolve(&a.common)?;
    let ladder = match &a.mc_ladder {
        Some(l) => parse_ladder(l)?,
        None => cfg.oracles.mc_ladder.clone(),
    };
    let ctx = prepare(&cfg, cfg.window_k)?;
    let branches = run_oracle_compare_with(&ctx, &cfg, &ladder, !a.no_ghq)?;
    let (mut table, mut ladder_rows) = (Vec::new(), Vec::new());
    for b in &branches {
        let last = b.mc_means.last().copied();
        table.push(vec![
            b.branch.name().to_string(),
            b.n_windows.to_string(),
            b.n_failed.to_string(),
            fmt_opt(b.ghq_mean),
            last.map(|(n, _)| n.to_string()).unwrap_or_default(),
            fmt_opt(last.map(|(_, v)| v)),
            fmt_opt(b.fit.map(|f| f.a)),
            fmt_opt(b.fit.map(|f| f.b)),
            fmt_opt(b.fit.map(|f| f.c)),
            fmt_opt(b.fit.map(|f| f.rmse)),
            b.fit.map(|f| f.converged.to_string()).unwrap_or_default(),
            fmt_opt(b.fit.and_then(|f| f.asymptote())),
        ]);
        for &(n, v) in &b.mc_means {
            ladder_rows.push(vec![b.branch.name().to_string(), n.to_string(), fmt_f64(v)]);
        }
        println!(
            "{:<14} ghq {:>10} mc {:>10} fit c {:>8} rmse {:>8}",
            b.branch.name(),
            b.ghq_mean.map_or("-".into(), |v| format!("{v:.3}")),
            last.map_or("-".into(), |(_, v)| format!("{v:.3}")),
            b.fit.map_or("-".into(), |f| format!("{:.3}", f.c)),
            b.fit.map_or("-".into(), |f| format!("{:.4}", f.rmse)),
        );
    }
    let t = a.common.out.join("oracle.csv");
    let l = a.common.out.join("oracle_ladder.csv");
    write_csv(&t, &output::ORACLE, &table)?;
    write_csv(&l, &output::ORACLE_LADDER, &ladder_rows)?;
    Finish { command: "oracle-compare", cfg: Some(&cfg), out: &a.common.out, outputs: vec![t, l], started }.write()
}

fn validate(a: &ValidateArgs, started: Instant) -> Result<(), CliError> {
    let mut rows = Vec::new();
    let mut failed_invariants = 0;
    for c in run_invariant_suite() {
        println!("{} {:<26} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
        failed_invariants += usize::from(!c.passed);
        rows.push(vec![c.name.to_string(), c.passed.to_string(), c.detail]);
    }
    let digest = output::schema_digest();
    let registry_ok = digest == output::CSV_SCHEMA_DIGEST;
    println!("{} {:<26} {digest}", if registry_ok { "ok  " } else { "FAIL" }, "csv_schema_registry");
    rows.push(vec!["csv_schema_registry".into(), registry_ok.to_string(), digest]);
    let mut drift = !registry_ok;
    for path in &a.csv {
        let (ok, detail) = match check_csv_header(path) {
            Ok(name) => (true, format!("{}: schema {name}", path.display())),
            Err(e) => (false, e),
        };
        drift |= !ok;
        println!("{} {:<26} {detail}", if ok { "ok  " } else { "FAIL" }, "csv_header");
        rows.push(vec!["csv_header".into(), ok.to_string(), detail]);
    }
    let path = a.out.join("validate.csv");
    write_csv(&path, &output::VALIDATE, &rows)?;
    Finish { command: "validate", cfg: None, out: &a.out, outputs: vec![path], started }.write()?;
    if failed_invariants > 0 {
        return Err(CliError::Numerical(format!("{failed_invariants} invariant check(s) failed")));
    }
    if drift {
        return Err(CliError::Usage("CSV schema drift detected".into()));
    }
    Ok(())
}

fn check_csv_header(path: &Path) -> Result<&'static str, String> {
    let mut r = csv::Reader::from_path(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let header = r.headers().map_err(|e| format!("{}: {e}", path.display()))?.clone();
    let cols: Vec<&str> = header.iter().collect();
    let schema = output::match_header(&cols)
        .ok_or_else(|| format!("{}: header [{}] matches no registered schema", path.display(), cols.join(",")))?;
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format!("{}: {e}", path.display()))?;
        if rec.len() != schema.columns.len() {
            return Err(format!("{}: row {} has {} fields", path.display(), i + 1, rec.len()));
        }
    }
    Ok(schema.name)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_configs_parse_and_round_trip() {
        for text in [L63_DEFAULT, L95_DEFAULT] {
            let cfg = TwinConfig::from_json(text).unwrap();
            let again = TwinConfig::from_json(&cfg.to_canonical_json()).unwrap();
            assert_eq!(cfg, again);
            assert_eq!(cfg.to_canonical_json().trim_end(), text.trim_end());
        }
    }

    #[test]
    fn grid_forms() {
        assert_eq!(parse_grid("-3:3:1").unwrap(), vec![-3.0, -2.0, -1.0, 0.0, 1.0, 2.0, 3.0]);
        assert_eq!(parse_grid("0:0.3:0.1").unwrap(), vec![0.0, 0.1, 0.2, 0.3]);
        assert_eq!(parse_grid("2,5,10").unwrap(), vec![2.0, 5.0, 10.0]);
        for bad in ["", "1:2", "3:1:1", "0:1:0", "a,b", "1,nan"] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn ladder_forms() {
        assert_eq!(parse_ladder("1e2..1e5").unwrap(), vec![100, 1000, 10_000, 100_000]);
        assert_eq!(parse_ladder("10,20").unwrap(), vec![10, 20]);
        for bad in ["1e5..1e2", "0,10", "20,10", "1.5", "x"] {
            assert!(parse_ladder(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn error_exit_codes() {
        assert_eq!(CliError::from(CmeError::InvalidInput("x".into())).exit_code(), 2);
        assert_eq!(CliError::from(CmeError::IllConditioned("x".into())).exit_code(), 3);
    }

    #[test]
    fn unknown_config_is_a_usage_error() {
        assert!(matches!(load_config(Some("/nonexistent/cfg.json"), "l63"), Err(CliError::Usage(_))));
    }
}
