//! CSV emission: a fixed header, a comment line with the run config, rows.

use std::io::Write;
use std::process::Command as Process;

/// `git describe --always --dirty`, or `unknown` outside a checkout.
pub fn git_describe() -> String {
    Process::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub struct CsvWriter<W: Write> {
    out: W,
    columns: usize,
}

impl<W: Write> CsvWriter<W> {
    pub fn new(mut out: W, header: &str, config: &str) -> std::io::Result<Self> {
        write!(out, "{header}\n# config: {config}; git: {}\n", git_describe())?;
        Ok(Self {
            out,
            columns: header.split(',').count(),
        })
    }

    pub fn row(&mut self, line: &str) -> std::io::Result<()> {
        debug_assert_eq!(line.split(',').count(), self.columns, "row width");
        write!(self.out, "{line}\n")
    }

    pub fn finish(mut self) -> std::io::Result<W> {
        self.out.flush()?;
        Ok(self.out)
    }
}
