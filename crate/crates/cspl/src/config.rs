//! Pipeline configuration files (TOML).
//!
//! ```toml
//! [engine]
//! k = 3
//! warmup_iterations = 500
//! seed = 7
//!
//! [data]
//! source = "data/source.jsonl"
//! translated = "data/translated.jsonl"
//! target = "data/target.jsonl"
//! target_test = "data/target_test.jsonl"
//!
//! [backend]
//! kind = "simulator"
//!
//! [simulator]
//! oracle = ["data/target_gt.jsonl"]
//! ```
//!
//! Relative paths are resolved against the directory of the config file.
//! Unknown keys are errors.

use std::path::{Path, PathBuf};
use std::time::Duration;

use cspl_core::engine::fingerprint;
use cspl_core::{EngineConfig, SimParams};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl::read_text;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: PathBuf,
    pub translated: Option<PathBuf>,
    /// Unlabelled target images.
    pub target: PathBuf,
    pub target_test: Option<PathBuf>,
    /// Labelled set evaluated after every stage.
    pub validation: Option<PathBuf>,
    /// `image_id<TAB>score` file used when the engine's difficulty source
    /// is `external_file`.
    pub external_scores: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BackendConfig {
    /// The built-in simulated detector.
    Simulator {},
    /// An external process speaking the stdio protocol.
    Process {
        command: String,
        #[serde(default)]
        args: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_secs: f64,
    },
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig::Simulator {}
    }
}

fn default_timeout() -> f64 {
    30.0
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulatorConfig {
    /// Labelled datasets the simulator may consult for ground truth, on
    /// top of the pipeline's own datasets.
    pub oracle: Vec<PathBuf>,
    pub params: SimParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub engine: EngineConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub backend: BackendConfig,
    #[serde(default)]
    pub simulator: SimulatorConfig,
    #[serde(skip)]
    base_dir: PathBuf,
}

impl PipelineConfig {
    pub fn parse(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }

    pub fn base_dir(&self) -> &Path {
        &self.base_dir
    }

    pub fn set_base_dir(&mut self, dir: impl Into<PathBuf>) {
        self.base_dir = dir.into();
    }

    /// `path` relative to the config file's directory.
    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine.validate()?;
        self.simulator.params.validate()?;
        if let BackendConfig::Process { command, timeout_secs, .. } = &self.backend {
            if command.is_empty() {
                return Err(Error::Config("backend command is empty".into()));
            }
            if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                return Err(Error::Config(format!("backend timeout_secs {timeout_secs} must be positive")));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        match &self.backend {
            BackendConfig::Process { timeout_secs, .. } => Duration::from_secs_f64(*timeout_secs),
            BackendConfig::Simulator {} => Duration::from_secs_f64(default_timeout()),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Hex SHA-256 over every setting, paths as written.
    pub fn fingerprint(&self) -> String {
        fingerprint(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}
