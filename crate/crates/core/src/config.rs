//! Pipeline configuration, loaded from TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::{
    check_unique, AkdParams, CbaParams, DacgParams, Module, RefineParams, SicdParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum BaselineMode {
    #[default]
    #[serde(rename = "none")]
    None,
    /// Replaces refinement with a fixed 0.4 threshold.
    #[serde(rename = "fixed_threshold_0.4")]
    FixedThreshold,
}

impl BaselineMode {
    pub const THRESHOLD: f64 = 0.4;
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionParams {
    /// Preferred steps `t`, tried in order before falling back to the
    /// earliest valid step.
    pub step_overrides: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub modules: Vec<Module>,
    pub baseline_mode: BaselineMode,
    pub workers: usize,
    pub attribution: AttributionParams,
    pub akd: AkdParams,
    pub dacg: DacgParams,
    pub cba: CbaParams,
    pub sicd: SicdParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            modules: Module::ALL.to_vec(),
            baseline_mode: BaselineMode::None,
            workers: 1,
            attribution: AttributionParams::default(),
            akd: AkdParams::default(),
            dacg: DacgParams::default(),
            cba: CbaParams::default(),
            sicd: SicdParams::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Every numeric parameter in range; reported as a config error.
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        check_unique(&self.modules)?;
        self.refine_params().validate().map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    pub fn refine_params(&self) -> RefineParams {
        RefineParams {
            modules: self.modules.clone(),
            akd: self.akd.clone(),
            dacg: self.dacg.clone(),
            cba: self.cba.clone(),
            sicd: self.sicd.clone(),
        }
    }

    pub fn with_modules(&self, modules: Vec<Module>) -> Self {
        Self {
            modules,
            ..self.clone()
        }
    }

    /// Returns a copy with the dotted `path` (e.g. `dacg.delta_sigma`) set
    /// to `value`, parsed as a TOML value, or as a bare string when it does
    /// not parse.
    pub fn with_param(&self, path: &str, value: &str) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(config_err)?;
        let parsed = parse_value(value);
        let mut slot = &mut root;
        for key in path.split('.') {
            slot = slot
                .as_table_mut()
                .and_then(|t| t.get_mut(key))
                .ok_or_else(|| Error::Config(format!("unknown parameter {path:?}")))?;
        }
        *slot = coerce(slot, parsed);
        let cfg: PipelineConfig = root.try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(text: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Wrap {
        v: toml::Value,
    }
    toml::from_str::<Wrap>(&format!("v = {text}"))
        .map(|w| w.v)
        .unwrap_or_else(|_| toml::Value::String(text.to_string()))
}

/// Integers written where a float is expected are widened.
fn coerce(existing: &toml::Value, new: toml::Value) -> toml::Value {
    match (existing, new) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}
