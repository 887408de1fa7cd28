use std::path::{Path, PathBuf};

use gaitlab_core::gaitopt::NlpSettings;
use gaitlab_core::guided::eval::EvalConfig;
use gaitlab_core::guided::ppo::TrainConfig;
use gaitlab_core::model::ModelParams;
use gaitlab_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable naming the default configuration file.
pub const CONFIG_ENV: &str = "GAITLAB_CONFIG";

/// Every tunable of the pipeline. Missing sections and fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Gait-synthesis model (virtual knee by default).
    pub model: ModelParams,
    pub nlp: NlpSettings,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Explicit path first, then the environment variable, then defaults.
    pub fn resolve(explicit: Option<&Path>) -> Result<Self> {
        let from_env = std::env::var_os(CONFIG_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from);
        match explicit.map(Path::to_path_buf).or(from_env) {
            Some(p) => Self::load(&p),
            None => Ok(Self::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.nlp.validate()?;
        self.train.validate()?;
        self.eval.env.validate()
    }
}
