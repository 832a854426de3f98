//! TOML experiment configuration.
//!
//! Every section is optional; missing keys keep the built-in device
//! defaults. Unknown keys are errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{DeviceConfig, PolicyConfig, ReclaimConfig};
use crate::flash::{default_mode_specs, FlashMode, ModeSpec, PerMode, ReliabilityModel, ReliabilityStage};
use crate::ftl::{GcConfig, Geometry};
use crate::policy::{HeatConfig, PerStage, PolicyKind, PolicyThresholds};
use crate::workload::WorkloadSpec;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySection {
    pub kind: PolicyKind,
    pub r1: u32,
    pub r2: PerStage<u32>,
}

impl Default for PolicySection {
    fn default() -> Self {
        let th = PolicyThresholds::default();
        PolicySection {
            kind: PolicyKind::Raro,
            r1: th.r1,
            r2: th.r2,
        }
    }
}

impl PolicySection {
    pub fn thresholds(&self) -> PolicyThresholds {
        PolicyThresholds {
            r1: self.r1,
            r2: self.r2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub stage: ReliabilityStage,
    pub out: PathBuf,
    /// Bytes written before the run; defaults to the workload dataset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fill_bytes: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logical_bytes: Option<u64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            stage: ReliabilityStage::Old,
            out: PathBuf::from("out"),
            fill_bytes: None,
            logical_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: Geometry,
    pub modes: PerMode<ModeSpec>,
    pub reliability: ReliabilityModel,
    pub gc: GcConfig,
    pub heat: HeatConfig,
    pub policy: PolicySection,
    pub reclaim: ReclaimConfig,
    pub workload: WorkloadSpec,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geometry: Geometry::default(),
            modes: default_mode_specs(),
            reliability: ReliabilityModel::default(),
            gc: GcConfig::default(),
            heat: HeatConfig::default(),
            policy: PolicySection::default(),
            reclaim: ReclaimConfig::default(),
            workload: WorkloadSpec::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

/// Overlay `patch` onto `base`, table by table.
fn merge(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let patch: toml::Value = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        let mut merged = toml::Value::try_from(ExperimentConfig::default()).expect("defaults serialize");
        merge(&mut merged, patch);
        let cfg: ExperimentConfig = merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn page_bytes(&self) -> u64 {
        self.geometry.page_bytes()
    }

    pub fn logical_pages(&self) -> Option<u64> {
        self.experiment.logical_bytes.map(|b| b / self.page_bytes())
    }

    pub fn fill_pages(&self) -> u64 {
        self.experiment
            .fill_bytes
            .unwrap_or(self.workload.dataset_bytes)
            / self.page_bytes()
    }

    pub fn device(&self) -> DeviceConfig {
        DeviceConfig {
            geometry: self.geometry,
            modes: self.modes,
            reliability: self.reliability.clone(),
            gc: self.gc,
            initial_mode: FlashMode::Qlc,
            logical_pages: self.logical_pages(),
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            kind: self.policy.kind,
            thresholds: self.policy.thresholds(),
            heat: self.heat,
            reclaim: self.reclaim,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.geometry.validate().map_err(|m| split_key(&m))?;
        for mode in FlashMode::ALL {
            let spec = &self.modes[mode];
            let key = |field: &str| format!("modes.{}.{field}", mode.as_str().to_lowercase());
            if spec.bits_per_cell != mode.bits_per_cell() {
                return Err(invalid(key("bits_per_cell"), format!("must be {}", mode.bits_per_cell())));
            }
            for (field, v) in [
                ("pages_per_block", u64::from(spec.pages_per_block)),
                ("read_latency_us", spec.read_latency_us),
                ("write_latency_us", spec.write_latency_us),
                ("erase_latency_ms", spec.erase_latency_ms),
                ("pe_limit", u64::from(spec.pe_limit)),
            ] {
                if v == 0 {
                    return Err(invalid(key(field), "must be >= 1"));
                }
            }
            if !(spec.n_sense > 0.0 && spec.n_sense.is_finite()) {
                return Err(invalid(key("n_sense"), "must be > 0"));
            }
        }
        self.reliability
            .validate()
            .map_err(|m| invalid("reliability", m))?;
        self.gc.validate().map_err(|m| invalid("gc", m))?;
        self.heat.validate().map_err(|m| split_key(&m))?;
        let th = self.policy.thresholds();
        if th.r1 == 0 {
            return Err(invalid("policy.r1", "must be >= 1"));
        }
        for stage in ReliabilityStage::ALL {
            if th.r2[stage] < th.r1 {
                return Err(invalid(
                    format!("policy.r2.{stage}"),
                    format!("{} is below r1 = {}", th.r2[stage], th.r1),
                ));
            }
        }
        if !(self.reclaim.watermark >= 0.0 && self.reclaim.watermark < 1.0) {
            return Err(invalid("reclaim.watermark", "must lie in [0, 1)"));
        }
        let qlc_pages = u64::from(self.geometry.block_count()) * u64::from(self.modes.qlc.pages_per_block);
        let logical = self.logical_pages().unwrap_or(qlc_pages);
        if logical == 0 || logical > qlc_pages {
            return Err(invalid("experiment.logical_bytes", "must be positive and fit the raw QLC capacity"));
        }
        self.workload
            .validate(self.page_bytes(), logical)
            .map_err(|e| split_key(&e.to_string().replace("invalid workload: ", "")))?;
        if self.fill_pages() > logical {
            return Err(invalid("experiment.fill_bytes", "exceeds the logical space"));
        }
        Ok(())
    }
}

/// Turn "section.key must ..." into a keyed error.
fn split_key(message: &str) -> ConfigError {
    match message.split_once(' ') {
        Some((key, rest)) if key.contains('.') => invalid(key, rest),
        _ => invalid("config", message),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            [policy]
            kind = "hotness"
            [experiment]
            stage = "young"
            [workload]
            zipf_theta = 1.5
            "#,
        )
        .unwrap();
        assert_eq!(cfg.policy.kind, PolicyKind::Hotness);
        assert_eq!(cfg.experiment.stage, ReliabilityStage::Young);
        assert_eq!(cfg.workload.zipf_theta, 1.5);
        assert_eq!(cfg.modes.qlc.read_latency_us, 140);
        assert_eq!(cfg.policy.r2.old, 11);
    }

    #[test]
    fn empty_config_is_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn partial_mode_override_keeps_other_fields() {
        let cfg = ExperimentConfig::from_toml("[modes.qlc]\nread_latency_us = 100\n").unwrap();
        assert_eq!(cfg.modes.qlc.read_latency_us, 100);
        assert_eq!(cfg.modes.qlc.pages_per_block, 1024);
    }

    #[test]
    fn unknown_key_rejected_by_name() {
        let err = ExperimentConfig::from_toml("[workload]\nzipf_thet = 1.2\n").unwrap_err();
        assert!(err.to_string().contains("zipf_thet"), "{err}");
        let err = ExperimentConfig::from_toml("[nonsense]\nx = 1\n").unwrap_err();
        assert!(err.to_string().contains("nonsense"), "{err}");
    }

    #[test]
    fn zero_pages_per_block_names_key() {
        let err = ExperimentConfig::from_toml("[modes.qlc]\npages_per_block = 0\n").unwrap_err();
        assert!(err.to_string().contains("modes.qlc.pages_per_block"), "{err}");
    }

    #[test]
    fn r2_below_r1_names_key() {
        let err = ExperimentConfig::from_toml("[policy.r2]\nyoung = 0\n").unwrap_err();
        assert!(err.to_string().contains("policy.r2.young"), "{err}");
    }

    #[test]
    fn workload_errors_name_key() {
        let err = ExperimentConfig::from_toml("[workload]\nqueues = 0\n").unwrap_err();
        assert!(err.to_string().starts_with("workload.queues"), "{err}");
        let err = ExperimentConfig::from_toml("[workload]\ndataset_bytes = 68719476736\n").unwrap_err();
        assert!(err.to_string().contains("workload.dataset_bytes"), "{err}");
    }

    #[test]
    fn round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.policy.kind = PolicyKind::Baseline;
        cfg.experiment.fill_bytes = Some(1 << 30);
        cfg.workload.trace_path = Some(PathBuf::from("t.trace"));
        let text = cfg.to_toml();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }
}
