//! Deterministic CSV emission: fixed-precision scientific formatting so that
//! identical configs and seeds produce byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use pbdw_core::Result;

pub fn fmt_float(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.12e}")
    } else if x.is_infinite() && x > 0.0 {
        "inf".to_string()
    } else if x.is_infinite() {
        "-inf".to_string()
    } else {
        "nan".to_string()
    }
}

/// Accumulates rows and writes the file in one shot.
pub struct CsvTable {
    buf: String,
}

impl CsvTable {
    pub fn new(header: &[&str]) -> Self {
        let mut buf = String::new();
        let _ = writeln!(buf, "{}", header.join(","));
        CsvTable { buf }
    }

    pub fn row(&mut self, fields: &[String]) {
        let _ = writeln!(self.buf, "{}", fields.join(","));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf.as_bytes())?;
        Ok(())
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }
}
