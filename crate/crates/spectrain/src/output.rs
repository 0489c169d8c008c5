//! Atomic file output and the run record table.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use spectrain_core::training::{ArmRecord, EpochRow, RunRecord};

/// Column names of the run record table.
pub const RECORD_HEADER: [&str; 7] = [
    "epoch",
    "loss_total",
    "loss_energy",
    "loss_eigvec",
    "ortho_residual",
    "lr",
    "seconds",
];

/// Writes `bytes` to a temporary file next to `path`, then renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp =
        tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// The record as a CSV table; columns that do not apply are left empty.
pub fn record_csv(record: &RunRecord) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RECORD_HEADER)?;
    for row in &record.rows {
        w.write_record(row_fields(row))?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// All arms of a loss comparison in one table, with a leading `arm` column.
pub fn comparison_csv(arms: &[ArmRecord]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["arm"];
    header.extend(RECORD_HEADER);
    w.write_record(&header)?;
    for a in arms {
        for row in &a.record.rows {
            let mut fields = vec![a.arm.name().to_string()];
            fields.extend(row_fields(row));
            w.write_record(fields)?;
        }
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn row_fields(row: &EpochRow) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    vec![
        row.epoch.to_string(),
        row.loss_total.to_string(),
        opt(row.loss_energy),
        opt(row.loss_eigvec),
        opt(row.ortho_residual),
        row.lr.to_string(),
        row.seconds.to_string(),
    ]
}
