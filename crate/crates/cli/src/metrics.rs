//! Per-epoch metrics as CSV.

use std::fmt::Write as _;
use std::path::Path;

use lowbit::strategies::EpochLog;

use crate::checkpoint::write_atomic;
use crate::error::{CliError, Result};

pub const HEADER: &str = "phase,epoch,lr,train_loss,train_acc,val_acc,guidance_loss,wall_ms";

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn row(log: &EpochLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        log.phase,
        log.epoch,
        log.lr,
        log.train_loss,
        log.train_acc,
        log.val_acc,
        opt(log.guidance_loss),
        opt(log.wall_ms)
    )
}

/// Header plus one row per epoch; errors on an empty log.
pub fn emit<'a>(logs: impl IntoIterator<Item = &'a EpochLog>) -> Result<String> {
    let mut out = String::from(HEADER);
    out.push('\n');
    let mut rows = 0;
    for log in logs {
        let _ = writeln!(out, "{}", row(log));
        rows += 1;
    }
    if rows == 0 {
        return Err(CliError::Usage("no epochs to write".into()));
    }
    Ok(out)
}

/// Accumulates rows and rewrites the file after every phase, so a crash
/// leaves the metrics of all finished phases behind.
#[derive(Debug, Default)]
pub struct MetricsFile {
    rows: Vec<String>,
}

impl MetricsFile {
    /// Keeps the rows of an earlier run whose phase satisfies `keep`, for
    /// resuming into the same file.
    pub fn resume(path: &Path, keep: impl Fn(&str) -> bool) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::default()),
            Err(e) => return Err(CliError::io(path, e)),
        };
        let rows = text
            .lines()
            .skip(1)
            .filter(|l| keep(l.split(',').next().unwrap_or("")))
            .map(str::to_string)
            .collect();
        Ok(MetricsFile { rows })
    }

    pub fn extend<'a>(&mut self, logs: impl IntoIterator<Item = &'a EpochLog>) {
        self.rows.extend(logs.into_iter().map(row));
    }

    pub fn render(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(r);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.render().as_bytes())
    }
}
