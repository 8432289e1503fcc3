//! The run configuration document (TOML). Every section and key is
//! optional; missing keys take their defaults and unknown keys are rejected.
//!
//! ```toml
//! [data]
//! num_classes = 20
//! seed = 0
//!
//! [train]
//! slots = 32
//! lr = 0.001
//! optimizer = "adam"
//!
//! [paths]
//! data = "run/data"
//! out = "run/model"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `train.bin` and `test.bin`.
    pub data: Option<PathBuf>,
    /// Output directory of the command.
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DatasetSpec,
    pub train: TrainConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.train.architecture(&self.data).validate()
    }
}
