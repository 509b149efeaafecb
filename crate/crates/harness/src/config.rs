//! Line-oriented `key = value` experiment configuration.
//!
//! Every experiment declares its keys with defaults. A file may set any of
//! them, once; anything else is rejected before an experiment starts.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key `{key}` for {experiment}")]
    UnknownKey {
        line: usize,
        key: String,
        experiment: Experiment,
    },
    #[error("line {line}: key `{key}` is set twice")]
    Duplicate { line: usize, key: String },
    #[error("key `{key}`: invalid value `{value}`: {reason}")]
    Value {
        key: String,
        value: String,
        reason: String,
    },
    #[error("config is for `{found}` but the `{expected}` experiment was requested")]
    WrongExperiment { expected: Experiment, found: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Solve,
    SweepEpsilon,
    SweepMeasurements,
    Detect,
    LatticeDecay,
    Complexity,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Solve => "solve",
            Self::SweepEpsilon => "sweep-epsilon",
            Self::SweepMeasurements => "sweep-measurements",
            Self::Detect => "detect",
            Self::LatticeDecay => "lattice-decay",
            Self::Complexity => "complexity",
        }
    }

    /// Recognized keys and their defaults, in echo order.
    pub fn keys(self) -> &'static [(&'static str, &'static str)] {
        match self {
            Self::Solve => &[
                ("seed", "1"),
                ("grid_file", ""),
                ("measurement_file", ""),
                ("epsilon", "auto"),
                ("estimator", "incremental"),
            ],
            Self::SweepEpsilon => &[
                ("seed", "1"),
                ("buses", "118"),
                ("branches", "186"),
                ("areas", "5"),
                ("sigma", "0.01"),
                ("epsilon_scale", "auto"),
                ("epsilon_grid", "1e-3,1e-4,1e-5,1e-6,1e-7"),
            ],
            Self::SweepMeasurements => &[
                ("seed", "1"),
                ("buses", "118"),
                ("branches", "186"),
                ("areas", "5"),
                ("sigma", "0.01"),
                ("epsilon", "auto"),
                ("budgets", "1,2,3,4,5"),
                ("trials", "100"),
            ],
            Self::Detect => &[
                ("seed", "1"),
                ("buses", "118"),
                ("branches", "186"),
                ("areas", "5"),
                ("copies", "2"),
                ("sigma", "0.01"),
                ("epsilon", "auto"),
                ("snapshots", "100"),
                ("noise", "truncated"),
                ("gamma", "auto"),
                ("estimator", "diffusive"),
                ("attack_monitor", "0"),
                ("attack_row", "0"),
                ("attack_draw", "uniform"),
                ("w_max_basis", "nominal"),
                ("w_max_factor", "0.1"),
            ],
            Self::LatticeDecay => &[
                ("seed", "1"),
                ("lattice_a", "5"),
                ("lattice_b", "4"),
                ("monitors", "0,5,10,14"),
            ],
            Self::Complexity => &[
                ("seed", "1"),
                ("rows", "12"),
                ("state_dim", "8"),
                ("block_sizes", "1,2,6,12"),
            ],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Resolved settings: every declared key with its default or configured
/// value.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Config {
    experiment: Experiment,
    values: Vec<(&'static str, String)>,
}

impl Config {
    pub fn defaults(experiment: Experiment) -> Self {
        Self {
            experiment,
            values: experiment
                .keys()
                .iter()
                .map(|&(k, v)| (k, v.to_string()))
                .collect(),
        }
    }

    /// Parses `text` on top of the defaults. An optional `experiment` key
    /// must name `experiment`.
    pub fn parse(text: &str, experiment: Experiment) -> Result<Self, ConfigError> {
        let mut cfg = Self::defaults(experiment);
        let mut seen: Vec<String> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line,
                text: content.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line,
                    text: content.to_string(),
                });
            }
            if seen.iter().any(|k| k == key) {
                return Err(ConfigError::Duplicate {
                    line,
                    key: key.to_string(),
                });
            }
            seen.push(key.to_string());
            if key == "experiment" {
                if value != experiment.name() {
                    return Err(ConfigError::WrongExperiment {
                        expected: experiment,
                        found: value.to_string(),
                    });
                }
                continue;
            }
            cfg.set_at(key, value, line)?;
        }
        Ok(cfg)
    }

    fn set_at(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let experiment = self.experiment;
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| ConfigError::UnknownKey {
                line,
                key: key.to_string(),
                experiment,
            })?;
        slot.1 = value.to_string();
        Ok(())
    }

    /// Overrides a declared key, as done for command-line flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(key, value, 0)
    }

    pub fn experiment(&self) -> Experiment {
        self.experiment
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, v)| v.as_str())
            .unwrap_or_else(|| panic!("{key} is not a key of {}", self.experiment))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e: T::Err| invalid(key, raw, e.to_string()))
    }

    pub fn positive(&self, key: &str) -> Result<f64, ConfigError> {
        let v: f64 = self.get(key)?;
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(invalid(key, self.raw(key), "must be positive".into()))
        }
    }

    pub fn count(&self, key: &str) -> Result<usize, ConfigError> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(invalid(key, self.raw(key), "must be positive".into()));
        }
        Ok(v)
    }

    /// `auto` or a positive number.
    pub fn auto_or_positive(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        if self.raw(key) == "auto" {
            Ok(None)
        } else {
            self.positive(key).map(Some)
        }
    }

    /// `auto` or a finite number at least zero.
    pub fn auto_or_nonnegative(&self, key: &str) -> Result<Option<f64>, ConfigError> {
        if self.raw(key) == "auto" {
            return Ok(None);
        }
        let v: f64 = self.get(key)?;
        if v.is_finite() && v >= 0.0 {
            Ok(Some(v))
        } else {
            Err(invalid(key, self.raw(key), "must be at least zero".into()))
        }
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, ConfigError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.raw(key);
        let items: Result<Vec<T>, _> = raw.split(',').map(|s| s.trim().parse::<T>()).collect();
        let items = items.map_err(|e| invalid(key, raw, e.to_string()))?;
        if items.is_empty() {
            return Err(invalid(key, raw, "empty list".into()));
        }
        Ok(items)
    }

    pub fn choice<'a>(&self, key: &str, options: &[&'a str]) -> Result<&'a str, ConfigError> {
        let raw = self.raw(key);
        options
            .iter()
            .find(|o| **o == raw)
            .copied()
            .ok_or_else(|| invalid(key, raw, format!("expected one of {}", options.join(", "))))
    }

    pub fn seed(&self) -> Result<u64, ConfigError> {
        self.get("seed")
    }

    /// `# key = value` lines describing the run.
    pub fn echo(&self) -> String {
        let mut out = format!("# experiment = {}\n", self.experiment);
        for (k, v) in &self.values {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out
    }
}

fn invalid(key: &str, value: &str, reason: String) -> ConfigError {
    ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason,
    }
}
