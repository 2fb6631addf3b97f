use std::io::Write;

use anyhow::{Context, Result};
use serde::Serialize;

use crate::{Common, Format};

pub const SCHEMA: u32 = 1;

/// Top-level report: schema version, the full run configuration and the
/// command's result.
#[derive(Serialize)]
pub struct Report<'a, T: Serialize> {
    pub schema: u32,
    pub run: &'a crate::Command,
    pub passed: bool,
    /// Fields whose values vary between identical runs (wall-clock timings).
    #[serde(skip_serializing_if = "<[_]>::is_empty")]
    pub nondeterministic_fields: &'a [&'a str],
    pub result: T,
}

/// Writes the report as JSON, or `rows` as CSV, to `--out` or stdout.
pub fn emit<T: Serialize, R: Serialize>(common: &Common, report: &Report<'_, T>, rows: &[R]) -> Result<()> {
    let bytes = match common.format {
        Format::Json => {
            let mut s = serde_json::to_vec_pretty(report)?;
            s.push(b'\n');
            s
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in rows {
                w.serialize(row)?;
            }
            w.into_inner().context("flushing csv")?
        }
    };
    match &common.out {
        Some(path) => std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(&bytes)?,
    }
    Ok(())
}
