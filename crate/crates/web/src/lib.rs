//! Browser bindings. Each exported function returns a JSON string.

use raro_core::engine::RETRY_BUCKETS;
use raro_core::experiment::{compare_configs, policy_set};
use raro_core::flash::{read_latency_with_retries, PageCondition};
use raro_core::{ExperimentConfig, FlashMode, ReliabilityModel, ReliabilityStage};
use serde_json::json;
use wasm_bindgen::prelude::*;

const DEMO_BLOCKS: u32 = 8;

fn parse<T: std::str::FromStr<Err = String>>(s: &str) -> Result<T, String> {
    s.parse()
}

/// Retry counts of every page in a few blocks at the given wear and read count.
pub fn retry_histogram_json(mode: &str, pe_cycles: u32, reads: u64) -> Result<String, String> {
    let mode: FlashMode = parse(mode)?;
    let cfg = ExperimentConfig::default();
    let spec = cfg.modes[mode];
    let model = ReliabilityModel::default();
    let cond = PageCondition {
        pe_cycles,
        retention_hours: 0.0,
        reads_since_erase: reads,
    };
    let mut hist = vec![0u64; RETRY_BUCKETS];
    let mut total = 0u64;
    for block in 0..DEMO_BLOCKS {
        for page in 0..spec.pages_per_block {
            let n = model.page_retries(mode, &spec, cond, block, page) as usize;
            hist[n.min(RETRY_BUCKETS - 1)] += 1;
            total += n as u64;
        }
    }
    let pages = u64::from(DEMO_BLOCKS * spec.pages_per_block);
    Ok(json!({
        "mode": mode.as_str(),
        "stage": ReliabilityStage::classify(pe_cycles, spec.pe_limit).as_str(),
        "pe_limit": spec.pe_limit,
        "pages": pages,
        "mean": total as f64 / pages as f64,
        "histogram": hist,
    })
    .to_string())
}

/// Read latency and bandwidth relative to a clean read for 0..=max retries.
pub fn retry_bandwidth_json(mode: &str, max_retries: u32) -> Result<String, String> {
    let mode: FlashMode = parse(mode)?;
    let spec = ExperimentConfig::default().modes[mode];
    let clean = read_latency_with_retries(&spec, 0) as f64;
    let rows: Vec<_> = (0..=max_retries.min(64))
        .map(|n| {
            let ns = read_latency_with_retries(&spec, n) as f64;
            json!({ "retries": n, "latency_us": ns / 1000.0, "relative_bandwidth": clean / ns })
        })
        .collect();
    Ok(serde_json::Value::from(rows).to_string())
}

/// Baseline, hotness and raro on a 1 GiB device with a 128 MiB dataset.
pub fn compare_policies_json(theta: f64, stage: &str, queues: u32, requests: u32) -> Result<String, String> {
    let mut cfg = ExperimentConfig::default();
    cfg.geometry.blocks_per_plane = 16;
    cfg.workload.dataset_bytes = 128 << 20;
    cfg.workload.zipf_theta = theta;
    cfg.workload.queues = queues;
    cfg.workload.total_requests = u64::from(requests.min(200_000));
    cfg.experiment.stage = parse(stage)?;
    cfg.validate().map_err(|e| e.to_string())?;
    let (rows, _) = compare_configs(&policy_set(&cfg)).map_err(|e| e.to_string())?;
    serde_json::to_string(&rows).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn retry_histogram(mode: &str, pe_cycles: u32, reads: u32) -> Result<String, JsValue> {
    retry_histogram_json(mode, pe_cycles, u64::from(reads)).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn retry_bandwidth(mode: &str, max_retries: u32) -> Result<String, JsValue> {
    retry_bandwidth_json(mode, max_retries).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn compare_policies(theta: f64, stage: &str, queues: u32, requests: u32) -> Result<String, JsValue> {
    compare_policies_json(theta, stage, queues, requests).map_err(|e| JsValue::from_str(&e))
}
