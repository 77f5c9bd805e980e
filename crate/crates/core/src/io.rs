//! Small helpers for the plain-text outputs.

use std::io::{self, Write};

/// Lossless decimal form of a double (17 significant digits).
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes a header row and numeric rows as CSV.
pub fn write_table<W: Write>(out: &mut W, header: &[&str], rows: &[Vec<f64>]) -> io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    Ok(())
}
