//! Instrumentation and verification: gradient traces, complexity counters,
//! attention heatmaps, gradient-path decomposition and the norm checks.

use std::path::Path;

use serde::Serialize;

use crate::error::Result;

pub mod complexity;
pub mod fit;
pub mod gradcheck;
pub mod gradtrace;
pub mod heatmap;
pub mod omega;
pub mod paths;
pub mod theorems;
pub mod tradeoff;

/// Writes serialisable rows as CSV with a header taken from the field names.
pub fn write_rows<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
