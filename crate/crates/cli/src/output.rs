//! Versioned CSV schemas, bit-stable value formatting, and run manifests.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Bumped whenever any column list below changes.
pub const CSV_SCHEMA_VERSION: u32 = 1;

/// SHA-256 of [`schema_fingerprint_source`] for [`CSV_SCHEMA_VERSION`].
/// `validate` fails when the registry drifts from this value.
pub const CSV_SCHEMA_DIGEST: &str = "22379362c04c147d5f37f37f766798fb35860640333714551c24800a20350e34";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CsvSchema {
    pub name: &'static str,
    pub columns: &'static [&'static str],
}

pub const TWIN: CsvSchema = CsvSchema {
    name: "twin",
    columns: &["window_start_index", "method", "model_branch", "log_cme", "converged", "note"],
};

pub const SWEEP: CsvSchema = CsvSchema {
    name: "sweep",
    columns: &["axis", "value", "method", "mean_factual", "mean_candidate", "mean_power", "n_ok", "n_failed"],
};

pub const ATTRIBUTION: CsvSchema = CsvSchema {
    name: "attribution",
    columns: &["axis", "value", "method", "mean_power", "n_ok", "n_failed"],
};

pub const PROFILE: CsvSchema = CsvSchema {
    name: "profile",
    columns: &["method", "forcing", "mean_log_cme"],
};

pub const ESTIMATE: CsvSchema = CsvSchema {
    name: "estimate",
    columns: &["method", "argmax", "ci_lo", "ci_hi", "unbracketed", "ci_truncated"],
};

pub const ORACLE: CsvSchema = CsvSchema {
    name: "oracle",
    columns: &[
        "model_branch",
        "n_windows",
        "n_failed",
        "ghq_mean",
        "mc_n",
        "mc_mean",
        "a",
        "b",
        "c",
        "rmse",
        "fit_converged",
        "asymptote",
    ],
};

pub const ORACLE_LADDER: CsvSchema = CsvSchema {
    name: "oracle_ladder",
    columns: &["model_branch", "n", "mc_mean"],
};

pub const VALIDATE: CsvSchema = CsvSchema {
    name: "validate",
    columns: &["check", "passed", "detail"],
};

pub const SCHEMAS: &[CsvSchema] = &[TWIN, SWEEP, ATTRIBUTION, PROFILE, ESTIMATE, ORACLE, ORACLE_LADDER, VALIDATE];

pub fn schema_fingerprint_source() -> String {
    let mut s = format!("v{CSV_SCHEMA_VERSION}");
    for schema in SCHEMAS {
        s.push_str(&format!(";{}:{}", schema.name, schema.columns.join(",")));
    }
    s
}

pub fn schema_digest() -> String {
    hex::encode(Sha256::digest(schema_fingerprint_source().as_bytes()))
}

/// The registered schema whose header matches `header`, if any.
pub fn match_header(header: &[&str]) -> Option<&'static CsvSchema> {
    SCHEMAS.iter().find(|s| s.columns == header)
}

/// Enough digits for an exact round trip; empty for a missing value.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Writes `rows` under `schema`'s header, creating parent directories.
pub fn write_csv(path: &Path, schema: &CsvSchema, rows: &[Vec<String>]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| CliError::Usage(format!("{}: {e}", path.display()));
    w.write_record(schema.columns).map_err(err)?;
    for row in rows {
        debug_assert_eq!(row.len(), schema.columns.len());
        w.write_record(row).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the canonical JSON of the effective configuration.
    pub config_digest: Option<String>,
    pub seed: Option<u64>,
    pub code_version: String,
    pub csv_schema_version: u32,
    pub wall_time_seconds: f64,
    pub outputs: Vec<PathBuf>,
}

pub fn config_digest(canonical_json: &str) -> String {
    hex::encode(Sha256::digest(canonical_json.as_bytes()))
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    let mut f = File::create(path).map_err(|e| CliError::io(path, e))?;
    writeln!(f, "{json}").map_err(|e| CliError::io(path, e))
}
