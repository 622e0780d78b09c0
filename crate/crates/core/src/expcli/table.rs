//! CSV output with a versioned schema comment on the first line.

use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub struct Table {
    kind: &'static str,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(kind: &'static str, header: &[&str]) -> Self {
        Self { kind, header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn with_header(kind: &'static str, header: Vec<String>) -> Self {
        Self { kind, header, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("# ntklab {} schema v{SCHEMA_VERSION}\n", self.kind).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.header).expect("in-memory write");
            for r in &self.rows {
                w.write_record(r).expect("in-memory write");
            }
            w.flush().expect("in-memory flush");
        }
        out
    }
}

/// Formats a float so that parsing it back gives the same bits.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Reads two named numeric columns from a CSV, skipping `#` comment lines.
pub fn read_columns(path: &Path, a: &str, b: &str) -> Result<Vec<(f64, f64)>> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{} has no `{name}` column", path.display())))
    };
    let (ia, ib) = (find(a)?, find(b)?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
        let parse = |i: usize| -> Result<f64> {
            rec.get(i)
                .unwrap_or("")
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("bad number in {}: {e}", path.display())))
        };
        out.push((parse(ia)?, parse(ib)?));
    }
    Ok(out)
}
