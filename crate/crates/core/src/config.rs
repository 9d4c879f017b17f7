//! Service configuration, loaded from TOML.
//!
//! ```toml
//! data_dir = "./mmgr-data"
//!
//! [server]
//! bind = "127.0.0.1:7878"
//! workers = 4
//! job_mode = "background"   # or "inline"
//!
//! [gate]
//! epsilon = 0.0
//! abs_factor = 1.05
//! # abs_threshold = 0.5
//! abs_floor = 1e-9
//!
//! [drift]
//! delta_factor = 0.05
//! lambda_factor = 50.0
//! scale_floor = 1e-9
//!
//! [tuning]
//! window = 500
//! lambda = 0.0
//! tau = 1.0
//! workers = 2
//! auto_tune = true
//! ```
//!
//! `MMGR_DATA_DIR` overrides `data_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::drift::DriftConfig;
use crate::error::{Error, Result};
use crate::eval::GateConfig;

pub const DATA_DIR_ENV: &str = "MMGR_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobMode {
    /// Jobs run to completion inside the request that made them runnable.
    Inline,
    /// Jobs run on worker threads; triggering requests return immediately.
    Background,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    pub workers: usize,
    pub job_mode: JobMode,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            workers: 4,
            job_mode: JobMode::Background,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    /// Feedback events after the estimated change point used for a drift retune.
    pub window: u64,
    pub lambda: f64,
    pub tau: f64,
    pub workers: usize,
    pub auto_tune: bool,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            window: 500,
            lambda: 0.0,
            tau: 1.0,
            workers: 2,
            auto_tune: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub epsilon: f64,
    pub abs_factor: f64,
    pub abs_threshold: Option<f64>,
    pub abs_floor: f64,
}

impl Default for GateSection {
    fn default() -> Self {
        let g = GateConfig::default();
        Self {
            epsilon: g.epsilon,
            abs_factor: g.abs_factor,
            abs_threshold: g.abs_threshold,
            abs_floor: g.abs_floor,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data_dir: PathBuf,
    pub server: ServerConfig,
    pub gate: GateSection,
    pub drift: DriftConfig,
    pub tuning: TuningConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("./mmgr-data"),
            server: ServerConfig::default(),
            gate: GateSection::default(),
            drift: DriftConfig::default(),
            tuning: TuningConfig::default(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::validation(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` if given (defaults otherwise) and applies `MMGR_DATA_DIR`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::validation(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Config::default(),
        };
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                cfg.data_dir = PathBuf::from(dir);
            }
        }
        Ok(cfg)
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            epsilon: self.gate.epsilon,
            abs_factor: self.gate.abs_factor,
            abs_threshold: self.gate.abs_threshold,
            abs_floor: self.gate.abs_floor,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.gate;
        let nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !nonneg(g.epsilon) || !nonneg(g.abs_factor) || !nonneg(g.abs_floor) {
            return Err(Error::validation("gate settings must be finite and >= 0"));
        }
        if g.abs_threshold.is_some_and(|t| !nonneg(t)) {
            return Err(Error::validation("gate.abs_threshold must be finite and >= 0"));
        }
        let d = &self.drift;
        if !nonneg(d.delta_factor) || !(d.lambda_factor.is_finite() && d.lambda_factor > 0.0) || !(d.scale_floor > 0.0) {
            return Err(Error::validation("drift factors must be positive and finite"));
        }
        let t = &self.tuning;
        if t.window == 0 || !nonneg(t.lambda) || !nonneg(t.tau) {
            return Err(Error::validation("tuning.window must be > 0 and lambda/tau >= 0"));
        }
        if self.server.workers == 0 {
            return Err(Error::validation("server.workers must be > 0"));
        }
        Ok(())
    }
}
