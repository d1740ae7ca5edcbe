//! Metrics export.
//!
//! Layout: one `#` schema line, the header, then one row per metrics record.
//! Missing values are empty fields; floats use the shortest representation
//! that round-trips, so output is byte-stable.

use std::path::Path;

use fbo_core::{MetricsRecord, RunReport};

use crate::error::{CliError, CliResult};

pub const SCHEMA_LINE: &str = "# fbo-metrics schema v1";
pub const HEADER: &str = "k,rounds_cum,grad_norm_sq,lower_gap,est_err,objective,test_metric";

pub fn format_csv(report: &RunReport) -> CliResult<String> {
    if report.rows.is_empty() {
        return Err(CliError::Config("report has no metrics rows".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(SCHEMA_LINE.as_bytes());
    out.push(b'\n');
    {
        let mut w = ::csv::WriterBuilder::new().terminator(::csv::Terminator::Any(b'\n')).from_writer(&mut out);
        for row in &report.rows {
            w.serialize(row).map_err(|e| CliError::Config(format!("csv: {e}")))?;
        }
        w.flush().map_err(|e| CliError::Config(format!("csv: {e}")))?;
    }
    Ok(String::from_utf8(out).expect("csv output is ascii"))
}

pub fn export_csv(report: &RunReport, path: &Path) -> CliResult<()> {
    let text = format_csv(report)?;
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Read rows back from [`format_csv`] output.
pub fn parse_csv(text: &str) -> CliResult<Vec<MetricsRecord>> {
    let body = text
        .strip_prefix(SCHEMA_LINE)
        .and_then(|rest| rest.strip_prefix('\n'))
        .ok_or_else(|| CliError::Config(format!("missing schema line `{SCHEMA_LINE}`")))?;
    if body.lines().next() != Some(HEADER) {
        return Err(CliError::Config("unexpected csv header".into()));
    }
    ::csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<Result<Vec<MetricsRecord>, _>>()
        .map_err(|e| CliError::Config(format!("csv: {e}")))
}
