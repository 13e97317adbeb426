use std::io::Write;
use std::path::Path;

use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

use crate::manifest::RunManifest;
use crate::CliError;

/// Report layout version; bumped only when existing fields change meaning or disappear.
pub const SCHEMA_VERSION: &str = "1.0";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

/// Flat table rendering of a report.
#[derive(Debug, Default)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table {
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push<I, S>(&mut self, row: I)
    where
        I: IntoIterator<Item = S>,
        S: ToString,
    {
        self.rows.push(row.into_iter().map(|v| v.to_string()).collect());
    }
}

/// Result of a subcommand before the manifest is attached.
pub struct Output {
    pub report: Value,
    pub table: Table,
}

impl Output {
    pub fn new(report: &impl Serialize, table: Table) -> Self {
        Output {
            report: serde_json::to_value(report).expect("reports serialize"),
            table,
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    schema_version: &'static str,
    manifest: &'a RunManifest,
    report: &'a Value,
}

/// JSON: `{schema_version, manifest, report}`. CSV: the manifest as `#`-prefixed comment
/// lines, then the table.
pub fn render(out: &Output, manifest: &RunManifest, format: Format) -> Vec<u8> {
    match format {
        Format::Json => {
            let env = Envelope {
                schema_version: SCHEMA_VERSION,
                manifest,
                report: &out.report,
            };
            let mut s = serde_json::to_vec_pretty(&env).expect("envelope serializes");
            s.push(b'\n');
            s
        }
        Format::Csv => {
            let mut buf = Vec::new();
            let meta = serde_json::json!({ "schema_version": SCHEMA_VERSION, "manifest": manifest });
            writeln!(buf, "# {meta}").expect("write to memory");
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(&out.table.header).expect("write to memory");
            for r in &out.table.rows {
                w.write_record(r).expect("write to memory");
            }
            w.into_inner().expect("flush to memory")
        }
    }
}

pub fn emit(bytes: &[u8], out: Option<&Path>) -> Result<(), CliError> {
    match out {
        Some(p) => std::fs::write(p, bytes).map_err(|e| CliError::io(p, e)),
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| CliError::io("<stdout>", e))
        }
    }
}
