//! Run outputs: CSV tables prefixed with the configuration echo, and a
//! summary of `key = value` lines.

use std::fs;
use std::path::Path;
use std::time::Duration;

use crate::config::Config;
use crate::{HarnessError, Result};

#[derive(Clone, Debug)]
pub struct RunArtifact {
    pub echo: String,
    /// `(file name, CSV body)` pairs.
    pub tables: Vec<(String, String)>,
    pub summary: Vec<(String, String)>,
    pub elapsed: Duration,
    /// Set by the detection experiment when any monitor raised an alarm.
    pub alarm: bool,
    /// Text for standard output; the summary when left empty.
    pub report: String,
}

impl RunArtifact {
    pub fn new(config: &Config) -> Self {
        Self {
            echo: config.echo(),
            tables: Vec::new(),
            summary: Vec::new(),
            elapsed: Duration::ZERO,
            alarm: false,
            report: String::new(),
        }
    }

    pub fn table(&mut self, name: &str, body: String) {
        self.tables.push((name.to_string(), body));
    }

    pub fn note(&mut self, key: &str, value: impl ToString) {
        self.summary.push((key.to_string(), value.to_string()));
    }

    /// Body of a table with the configuration echo in front.
    pub fn csv(&self, name: &str) -> Option<String> {
        self.tables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, body)| format!("{}{body}", self.echo))
    }

    pub fn stdout_text(&self) -> String {
        if self.report.is_empty() {
            self.summary_text()
        } else {
            self.report.clone()
        }
    }

    pub fn summary_text(&self) -> String {
        self.summary
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Writes every table and `summary.txt` into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        let fail = |path: &Path, source| HarnessError::Output {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| fail(dir, e))?;
        for (name, _) in &self.tables {
            let path = dir.join(name);
            let body = self.csv(name).expect("table exists");
            fs::write(&path, body).map_err(|e| fail(&path, e))?;
        }
        let path = dir.join("summary.txt");
        let text = format!(
            "{}{}wall_clock_seconds = {:.3}\n",
            self.echo,
            self.summary_text(),
            self.elapsed.as_secs_f64()
        );
        fs::write(&path, text).map_err(|e| fail(&path, e))
    }
}

/// Formats a real for CSV output with 17 significant digits.
pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}
