//! Flat `key = value` run configuration.
//!
//! Values are applied in order: built-in defaults, the config file, the
//! `TEXTURIZER_SEED` environment variable, then command-line flags.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use texturizer::{LagWindow, SynthesisConfig};

use crate::CliError;

pub const SEED_ENV: &str = "TEXTURIZER_SEED";

/// Every accepted key, in the order `--help` lists them.
pub const KEYS: &[&str] = &[
    "input",
    "output",
    "report",
    "plot",
    "iterations",
    "diversity_iterations",
    "alpha",
    "beta",
    "min_lag",
    "max_lag",
    "griffin_lim_iterations",
    "widths",
    "n_filters",
    "seed",
    "init_scale",
    "frames",
    "sample_rate",
    "window_size",
    "hop_size",
    "lbfgs_memory",
    "lbfgs_max_evaluations",
    "gradient_tolerance",
    "relative_decrease",
];

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub plot: Option<PathBuf>,
    pub synthesis: SynthesisConfig,
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e| CliError::usage(format!("bad value {value:?} for {key}: {e}")))
}

pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, CliError>
where
    T::Err: Display,
{
    value
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| parse(key, v))
        .collect()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let s = &mut self.synthesis;
        match key {
            "input" => self.input = Some(value.into()),
            "output" => self.output = Some(value.into()),
            "report" => self.report = Some(value.into()),
            "plot" => self.plot = Some(value.into()),
            "iterations" => s.iterations = parse(key, value)?,
            "diversity_iterations" => s.diversity_iterations = parse(key, value)?,
            "alpha" => s.alpha = parse(key, value)?,
            "beta" => s.beta = parse(key, value)?,
            "min_lag" => s.lag_window.min_lag = parse(key, value)?,
            "max_lag" => s.lag_window.max_lag = parse(key, value)?,
            "griffin_lim_iterations" => s.griffin_lim_iterations = parse(key, value)?,
            "widths" => s.widths = parse_list(key, value)?,
            "n_filters" => s.n_filters = parse(key, value)?,
            "seed" => s.seed = parse(key, value)?,
            "init_scale" => s.init_scale = parse(key, value)?,
            "frames" => {
                s.frames = if value == "target" {
                    None
                } else {
                    Some(parse(key, value)?)
                }
            }
            "sample_rate" => s.sample_rate = parse(key, value)?,
            "window_size" => s.stft.window_size = parse(key, value)?,
            "hop_size" => s.stft.hop_size = parse(key, value)?,
            "lbfgs_memory" => s.lbfgs.memory = parse(key, value)?,
            "lbfgs_max_evaluations" => s.lbfgs.max_evaluations = parse(key, value)?,
            "gradient_tolerance" => s.lbfgs.gradient_tolerance = parse(key, value)?,
            "relative_decrease" => s.lbfgs.relative_decrease = parse(key, value)?,
            _ => {
                return Err(CliError::usage(format!(
                    "unknown configuration key {key:?} (known keys: {})",
                    KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a `key = value` document. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::usage(format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::usage(format!("{origin}:{}: {}", n + 1, e.message)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then `file`, then the seed variable, then `overrides` in order.
    pub fn resolve(
        file: Option<&Path>,
        env_seed: Option<&str>,
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut config = Self::default();
        if let Some(path) = file {
            config.apply_file(path)?;
        }
        if let Some(seed) = env_seed {
            config
                .set("seed", seed.trim())
                .map_err(|e| CliError::usage(format!("{SEED_ENV}: {}", e.message)))?;
        }
        for (key, value) in overrides {
            config.set(key, value)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synthesis.validate().map_err(|e| CliError::usage(e.to_string()))?;
        LagWindow::new(self.synthesis.lag_window.min_lag, self.synthesis.lag_window.max_lag)
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Splits `key=value`.
pub fn parse_assignment(text: &str) -> Result<(String, String), String> {
    let (key, value) = text
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got {text:?}"))?;
    Ok((key.trim().to_string(), value.trim().to_string()))
}
