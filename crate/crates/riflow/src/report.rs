//! CSV report assembly with provenance metadata.
//!
//! Every report starts with `# key=value` metadata lines (seed, config
//! hash, effective settings), then a header row, then data rows. Floats
//! are formatted to six significant digits so reports are compact, stable
//! across platforms, and diffable.

use std::path::Path;

use crate::error::{domain_err, Result};

/// Formats a float to `digits` significant digits, switching to scientific
/// notation outside a comfortable fixed-point range (printf `%g` style).
pub fn format_sig(v: f64, digits: usize) -> String {
    assert!(digits >= 1, "need at least one significant digit");
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    if mag < -4 || mag >= digits as i32 {
        format!("{:.*e}", digits - 1, v)
    } else {
        let decimals = (digits as i32 - 1 - mag).max(0) as usize;
        format!("{:.*}", decimals, v)
    }
}

/// Formats a float at the reports' standard six significant digits.
pub fn sig6(v: f64) -> String {
    format_sig(v, 6)
}

/// An in-memory CSV with `#`-prefixed metadata lines.
#[derive(Debug, Clone)]
pub struct CsvReport {
    columns: Vec<String>,
    metadata: Vec<(String, String)>,
    rows: Vec<Vec<String>>,
}

impl CsvReport {
    pub fn new(columns: &[&str]) -> Self {
        CsvReport {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            metadata: Vec::new(),
            rows: Vec::new(),
        }
    }

    /// Adds one `# key=value` provenance line.
    pub fn add_metadata(&mut self, key: &str, value: impl ToString) {
        self.metadata.push((key.to_string(), value.to_string()));
    }

    /// Adds the standard provenance block: the run seed, the configuration
    /// hash, and the effective configuration echoed line by line.
    pub fn add_run_context(&mut self, seed: u64, config: &crate::config::Config) {
        self.add_metadata("seed", seed);
        self.add_metadata("config_hash", format!("{:016x}", config.hash()));
        for line in config.metadata_lines() {
            let (k, v) = line.split_once('=').expect("canonical lines are key=value");
            self.add_metadata(k, v);
        }
    }

    /// Appends a pre-formatted row; the cell count must match the header.
    pub fn push_row(&mut self, cells: Vec<String>) -> Result<()> {
        if cells.len() != self.columns.len() {
            return Err(domain_err(
                "csv_report",
                format!("row has {} cells, header has {}", cells.len(), self.columns.len()),
            ));
        }
        self.rows.push(cells);
        Ok(())
    }

    /// Number of data rows so far.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    /// True when no data rows have been added.
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Renders the complete report.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// Writes the report to disk.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digit_formatting_matches_frozen_cases() {
        assert_eq!(format_sig(3.141592653589793, 6), "3.14159");
        assert_eq!(format_sig(0.0012345678, 6), "0.00123457");
        assert_eq!(format_sig(123456789.0, 6), "1.23457e8");
        assert_eq!(format_sig(-0.000012345, 6), "-1.23450e-5");
        assert_eq!(format_sig(1.0, 6), "1.00000");
        assert_eq!(format_sig(0.0, 6), "0");
        assert_eq!(format_sig(f64::INFINITY, 6), "inf");
        assert_eq!(format_sig(8.0, 6), "8.00000");
        assert_eq!(format_sig(0.5, 3), "0.500");
        assert_eq!(format_sig(999999.4, 6), "999999");
        assert_eq!(format_sig(1000000.0, 6), "1.00000e6");
    }

    #[test]
    fn report_renders_metadata_header_and_rows() {
        let mut report = CsvReport::new(&["epoch", "bpd"]);
        report.add_metadata("seed", 42);
        report.push_row(vec!["0".into(), sig6(7.912345678)]).unwrap();
        report.push_row(vec!["1".into(), sig6(6.5)]).unwrap();
        let text = report.render();
        assert_eq!(text, "# seed=42\nepoch,bpd\n0,7.91235\n1,6.50000\n");
        assert_eq!(report.len(), 2);
    }

    #[test]
    fn row_width_is_enforced() {
        let mut report = CsvReport::new(&["a", "b"]);
        assert!(report.push_row(vec!["1".into()]).is_err());
    }

    #[test]
    fn run_context_echoes_the_configuration() {
        let cfg = crate::config::Config::default();
        let mut report = CsvReport::new(&["x"]);
        report.add_run_context(7, &cfg);
        let text = report.render();
        assert!(text.starts_with("# seed=7\n# config_hash="));
        assert!(text.contains("# lr=0.001\n"));
        assert!(text.contains("# loss_bound=8\n"));
        assert!(text.contains("# mixing=0.5\n"));
    }

    #[test]
    fn report_writes_to_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.csv");
        let mut report = CsvReport::new(&["v"]);
        report.push_row(vec![sig6(1.5)]).unwrap();
        report.write(&path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "v\n1.50000\n");
    }
}
