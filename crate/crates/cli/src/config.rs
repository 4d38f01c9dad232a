//! One JSON document configuring every stage. Missing sections and fields
//! take their defaults; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use usbone_core::{BoneMapConfig, Error, PhantomConfig, Result, TgaConfig};
use usbone_transporter::{NetworkSpec, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tga: TgaConfig,
    pub bonemap: BoneMapConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub phantom: PhantomConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Pretty JSON with every field spelled out in declaration order.
    pub fn to_canonical_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
