//! Flat `key = value` run configuration.
//!
//! Pipeline keys are those of [`RgmmConfig`]; `seed`, `workers` and
//! `window_hu` are handled here. `#` starts a comment.

use std::fs;
use std::path::Path;

use rgmm_core::evaluation::DEFAULT_WINDOW_HU;
use rgmm_core::predictor::RgmmConfig;

use crate::error::CliError;

pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub pipeline: RgmmConfig,
    pub seed: u64,
    /// Worker threads; 0 lets the runtime choose. Never changes outputs.
    pub workers: usize,
    pub window_hu: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: RgmmConfig::default(),
            seed: DEFAULT_SEED,
            workers: 0,
            window_hu: DEFAULT_WINDOW_HU,
        }
    }
}

fn bad(key: &str, value: &str) -> CliError {
    CliError::Config(format!("bad value `{value}` for `{key}`"))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let value = value.trim();
        match key.trim() {
            "seed" => self.seed = value.parse().map_err(|_| bad(key, value))?,
            "workers" => self.workers = value.parse().map_err(|_| bad(key, value))?,
            "window_hu" => self.window_hu = value.parse().map_err(|_| bad(key, value))?,
            k => self.pipeline.set(k, value).map_err(|e| CliError::Config(e.to_string()))?,
        }
        Ok(())
    }

    /// Applies `key=value` or `key = value`.
    pub fn set_assignment(&mut self, assignment: &str) -> Result<(), CliError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("expected key=value, got `{assignment}`")))?;
        self.set(k, v)
    }

    pub fn parse_text(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            cfg.set_assignment(line)
                .map_err(|e| CliError::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse_text(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.window_hu > 0.0 && self.window_hu.is_finite()) {
            return Err(CliError::Config(format!("window_hu must be > 0, got {}", self.window_hu)));
        }
        self.pipeline.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let mut pairs = vec![
            ("seed", self.seed.to_string()),
            ("workers", self.workers.to_string()),
            ("window_hu", self.window_hu.to_string()),
        ];
        pairs.extend(self.pipeline.to_pairs());
        pairs
    }

    /// Text that [`RunConfig::parse_text`] reads back to `self`.
    pub fn to_text(&self) -> String {
        self.to_pairs().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set_assignment("seed=42").unwrap();
        cfg.set_assignment("j_candidates_1 = 2,3").unwrap();
        cfg.set_assignment("gating=soft").unwrap();
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::parse_text("# header\n\nn_learners = 7 # trailing\n").unwrap();
        assert_eq!(cfg.pipeline.boost.n_learners, 7);
        assert!(matches!(RunConfig::parse_text("nonsense = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse_text("seed"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse_text("seed = -1"), Err(CliError::Config(_))));
    }
}
