//! Flash-mode-aware read-retry simulation for hybrid SLC/TLC/QLC SSDs.

pub mod calibrate;
pub mod config;
pub mod engine;
pub mod experiment;
pub mod flash;
pub mod ftl;
pub mod policy;
pub mod workload;

pub use config::ExperimentConfig;
pub use engine::{DeviceConfig, PolicyConfig, ReclaimConfig, Simulator, StatsSnapshot, Window};
pub use flash::{FlashMode, ModeSpec, Nanos, PerMode, RberParams, ReliabilityModel, ReliabilityStage, RetryParams};
pub use ftl::{Ftl, FtlError, Geometry, Lpn};
pub use policy::{Heat, HeatConfig, PerStage, PolicyKind, PolicyThresholds};
pub use workload::{Op, Request, WorkloadKind, WorkloadSpec};
