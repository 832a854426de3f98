//! Single runs, policy comparisons and threshold sweeps, plus their report
//! files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig};
use crate::engine::{Simulator, StatsSnapshot};
use crate::flash::ReliabilityStage;
use crate::policy::{PerStage, PolicyKind};
use crate::workload::WorkloadError;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error("{0}")]
    Setup(String),
    #[error("configs differ outside the policy section: {0}")]
    Mismatch(String),
    #[error("r2 = {r2} for {stage} is below r1 = {r1}")]
    ThresholdOrder { stage: ReliabilityStage, r2: u32, r1: u32 },
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

/// Precondition, warm the classifier and replay the configured workload.
pub fn simulate(cfg: &ExperimentConfig) -> Result<StatsSnapshot, ExperimentError> {
    cfg.validate()?;
    let mut sim = Simulator::new(&cfg.device(), &cfg.policy_config()).map_err(ExperimentError::Setup)?;
    let page_bytes = cfg.page_bytes();
    let logical = sim.ftl().logical_pages();
    let requests = cfg.workload.generate(page_bytes, logical)?;
    sim.precondition(cfg.fill_pages(), cfg.experiment.stage)
        .map_err(|e| ExperimentError::Setup(format!("precondition: {e}")))?;
    sim.policy_mut()
        .prime(cfg.workload.warmup(page_bytes, cfg.heat.warmup_requests));
    Ok(sim.run(&requests))
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), ExperimentError> {
    let csv_err = |source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    pub retries: u32,
    pub reads: u64,
}

/// Write `stats.json`, `retries_hist.csv` and `capacity_series.csv`.
pub fn write_run(dir: &Path, stats: &StatsSnapshot) -> Result<(), ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let json = dir.join("stats.json");
    let text = serde_json::to_string_pretty(stats).expect("stats serialize");
    fs::write(&json, text + "\n").map_err(io_err(&json))?;
    let hist: Vec<HistogramRow> = stats
        .retry_histogram
        .iter()
        .enumerate()
        .map(|(i, &reads)| HistogramRow {
            retries: i as u32,
            reads,
        })
        .collect();
    write_csv(&dir.join("retries_hist.csv"), &hist)?;
    write_csv(&dir.join("capacity_series.csv"), &stats.capacity_series)
}

pub fn run(cfg: &ExperimentConfig) -> Result<StatsSnapshot, ExperimentError> {
    let stats = simulate(cfg)?;
    write_run(&cfg.experiment.out, &stats)?;
    Ok(stats)
}

/// Run jobs on a small thread pool, keeping input order in the output.
fn parallel<T, R, F>(jobs: Vec<T>, f: F) -> Vec<R>
where
    T: Send,
    R: Send,
    F: Fn(T) -> R + Sync,
{
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(jobs.len())
        .max(1);
    // Single-threaded targets such as wasm32 cannot spawn.
    if workers == 1 {
        return jobs.into_iter().map(f).collect();
    }
    let slots: Vec<Mutex<Option<T>>> = jobs.into_iter().map(|j| Mutex::new(Some(j))).collect();
    let results: Vec<Mutex<Option<R>>> = slots.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(slot) = slots.get(i) else { break };
                let job = slot.lock().unwrap().take().expect("each job taken once");
                *results[i].lock().unwrap() = Some(f(job));
            });
        }
    });
    results
        .into_iter()
        .map(|r| r.into_inner().unwrap().expect("every job ran"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub policy: PolicyKind,
    pub iops: f64,
    pub iops_ratio_vs_baseline: f64,
    pub capacity_loss_bytes: u64,
    pub capacity_loss_ratio_vs_hotness: f64,
    pub migrations: u64,
    pub mean_retries: f64,
}

fn check_same_experiment(configs: &[ExperimentConfig]) -> Result<(), ExperimentError> {
    let strip = |c: &ExperimentConfig| {
        let mut c = c.clone();
        c.policy.kind = PolicyKind::Baseline;
        c.experiment.out = PathBuf::new();
        c.to_toml()
    };
    let first = strip(&configs[0]);
    for c in &configs[1..] {
        if strip(c) != first {
            let a: toml::Value = toml::from_str(&first).expect("own output parses");
            let b: toml::Value = toml::from_str(&strip(c)).expect("own output parses");
            return Err(ExperimentError::Mismatch(first_difference(&a, &b, "")));
        }
    }
    Ok(())
}

fn first_difference(a: &toml::Value, b: &toml::Value, prefix: &str) -> String {
    if let (toml::Value::Table(x), toml::Value::Table(y)) = (a, b) {
        let keys: std::collections::BTreeSet<&String> = x.keys().chain(y.keys()).collect();
        for k in keys {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match (x.get(k), y.get(k)) {
                (Some(p), Some(q)) if p == q => {}
                (Some(p), Some(q)) => return first_difference(p, q, &path),
                _ => return path,
            }
        }
    }
    prefix.to_string()
}

/// Run each config (same experiment, different policies) and tabulate.
pub fn compare_configs(configs: &[ExperimentConfig]) -> Result<(Vec<CompareRow>, Vec<StatsSnapshot>), ExperimentError> {
    if configs.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    check_same_experiment(configs)?;
    let stats = parallel(configs.to_vec(), |c| simulate(&c))
        .into_iter()
        .collect::<Result<Vec<_>, _>>()?;
    let find = |kind: PolicyKind| {
        configs
            .iter()
            .position(|c| c.policy.kind == kind)
            .map(|i| &stats[i])
    };
    let base_iops = find(PolicyKind::Baseline).map(|s| s.iops);
    let hot_loss = find(PolicyKind::Hotness).map(|s| s.capacity_loss_bytes);
    let ratio = |a: f64, b: Option<f64>| match b {
        Some(b) if b > 0.0 => a / b,
        _ => f64::NAN,
    };
    let rows = configs
        .iter()
        .zip(&stats)
        .map(|(c, s)| CompareRow {
            policy: c.policy.kind,
            iops: s.iops,
            iops_ratio_vs_baseline: ratio(s.iops, base_iops),
            capacity_loss_bytes: s.capacity_loss_bytes,
            capacity_loss_ratio_vs_hotness: ratio(s.capacity_loss_bytes as f64, hot_loss.map(|v| v as f64)),
            migrations: s.migration_count,
            mean_retries: s.mean_retries,
        })
        .collect();
    Ok((rows, stats))
}

/// The three policies on `cfg`'s experiment.
pub fn policy_set(cfg: &ExperimentConfig) -> Vec<ExperimentConfig> {
    PolicyKind::ALL
        .iter()
        .map(|&kind| {
            let mut c = cfg.clone();
            c.policy.kind = kind;
            c
        })
        .collect()
}

/// Compare configs, writing `compare.csv` and a run directory per policy
/// under `out`.
pub fn compare(configs: &[ExperimentConfig], out: &Path) -> Result<Vec<CompareRow>, ExperimentError> {
    let (rows, stats) = compare_configs(configs)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    for (row, s) in rows.iter().zip(&stats) {
        write_run(&out.join(row.policy.as_str()), s)?;
    }
    write_csv(&out.join("compare.csv"), &rows)?;
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub stage: ReliabilityStage,
    pub r2: u32,
    pub iops: f64,
    pub capacity_loss_bytes: u64,
    pub migrations: u64,
}

/// R2 values swept when none are given.
pub fn default_sweep() -> PerStage<Vec<u32>> {
    PerStage {
        young: (4..=9).collect(),
        middle: (7..=12).collect(),
        old: (11..=16).collect(),
    }
}

/// Run the raro policy for every R2 value of every stage.
pub fn sensitivity_rows(cfg: &ExperimentConfig, sweep: &PerStage<Vec<u32>>) -> Result<Vec<SensitivityRow>, ExperimentError> {
    let r1 = cfg.policy.r1;
    let mut jobs = Vec::new();
    for stage in ReliabilityStage::ALL {
        for &r2 in &sweep[stage] {
            if r2 < r1 {
                return Err(ExperimentError::ThresholdOrder { stage, r2, r1 });
            }
            let mut c = cfg.clone();
            c.policy.kind = PolicyKind::Raro;
            c.experiment.stage = stage;
            c.policy.r2[stage] = r2;
            // Keep the other stages' thresholds legal.
            c.validate()?;
            jobs.push((stage, r2, c));
        }
    }
    parallel(jobs, |(stage, r2, c)| {
        simulate(&c).map(|s| SensitivityRow {
            stage,
            r2,
            iops: s.iops,
            capacity_loss_bytes: s.capacity_loss_bytes,
            migrations: s.migration_count,
        })
    })
    .into_iter()
    .collect()
}

pub fn sensitivity(
    cfg: &ExperimentConfig,
    sweep: &PerStage<Vec<u32>>,
    out: &Path,
) -> Result<Vec<SensitivityRow>, ExperimentError> {
    let rows = sensitivity_rows(cfg, sweep)?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    write_csv(&out.join("sensitivity.csv"), &rows)?;
    Ok(rows)
}
