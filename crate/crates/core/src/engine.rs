//! Deterministic discrete-event engine.
//!
//! Each submission queue is closed-loop with one request outstanding; queues
//! interleave by issue time. Every physical operation occupies its LUN for
//! its latency, and migration or GC work shares those timelines with host I/O.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::flash::{FlashMode, ModeSpec, Nanos, PerMode, ReliabilityModel, ReliabilityStage};
use crate::ftl::{CapacityPoint, Conversion, FlashWork, Ftl, FtlError, GcConfig, Geometry, Lpn};
use crate::policy::{reclaim_cold, HeatConfig, HeatState, Policy, PolicyKind, PolicyThresholds};
use crate::workload::{Op, Request};

pub const RETRY_BUCKETS: usize = 32;

/// Reads between two reclaim checks.
const RECLAIM_PERIOD: u64 = 1_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeviceConfig {
    pub geometry: Geometry,
    pub modes: PerMode<ModeSpec>,
    pub reliability: ReliabilityModel,
    pub gc: GcConfig,
    pub initial_mode: FlashMode,
    /// Defaults to the initial usable capacity.
    pub logical_pages: Option<u64>,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            geometry: Geometry::default(),
            modes: crate::flash::default_mode_specs(),
            reliability: ReliabilityModel::default(),
            gc: GcConfig::default(),
            initial_mode: FlashMode::Qlc,
            logical_pages: None,
        }
    }
}

impl DeviceConfig {
    pub fn build(&self) -> Result<Ftl, String> {
        self.gc.validate()?;
        self.reliability.validate()?;
        Ok(Ftl::new(
            self.geometry,
            self.modes,
            self.reliability.clone(),
            self.initial_mode,
            self.logical_pages,
        )?
        .with_gc(self.gc))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReclaimConfig {
    pub enabled: bool,
    /// Free-capacity floor as a fraction of the initial capacity.
    pub watermark: f64,
}

impl Default for ReclaimConfig {
    fn default() -> Self {
        ReclaimConfig {
            enabled: false,
            watermark: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub thresholds: PolicyThresholds,
    pub heat: HeatConfig,
    pub reclaim: ReclaimConfig,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            kind: PolicyKind::Raro,
            thresholds: PolicyThresholds::default(),
            heat: HeatConfig::default(),
            reclaim: ReclaimConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub submitted: u64,
    pub completed: u64,
    pub failed: u64,
    pub in_flight: u64,
    pub completed_reads: u64,
    pub completed_writes: u64,
    pub page_reads: u64,
    pub unmapped_reads: u64,
    pub elapsed_ns: Nanos,
    pub iops: f64,
    pub bandwidth_mib_s: f64,
    pub mean_latency_us: f64,
    pub latency_p50_us: f64,
    pub latency_p99_us: f64,
    pub latency_p999_us: f64,
    /// Page reads per retry count; the last bucket also holds larger counts.
    pub retry_histogram: Vec<u64>,
    pub mean_retries: f64,
    pub reads_by_mode: BTreeMap<String, u64>,
    /// Page migrations by direction, e.g. `QLC->SLC`.
    pub migrations: BTreeMap<String, u64>,
    pub migration_count: u64,
    pub skipped_migrations: u64,
    /// Block-level mode changes by direction.
    pub block_conversions: BTreeMap<String, u64>,
    pub gc_moved_pages: u64,
    pub gc_erases: u64,
    pub host_pages_written: u64,
    pub write_amplification: f64,
    pub initial_capacity_bytes: u64,
    pub final_capacity_bytes: u64,
    pub capacity_loss_bytes: u64,
    pub capacity_series: Vec<CapacityPoint>,
    /// Number of latency samples behind this snapshot.
    pub latency_samples: u64,
}

#[derive(Debug, Clone, Copy)]
pub enum Window<'a> {
    Cumulative,
    Since(&'a StatsSnapshot),
}

#[derive(Debug, Clone, Default)]
struct Counters {
    submitted: u64,
    completed: u64,
    failed: u64,
    completed_reads: u64,
    completed_writes: u64,
    page_reads: u64,
    unmapped_reads: u64,
    bytes: u64,
    retry_histogram: Vec<u64>,
    retry_sum: u64,
    reads_by_mode: BTreeMap<String, u64>,
    migrations: BTreeMap<String, u64>,
    skipped_migrations: u64,
    block_conversions: BTreeMap<String, u64>,
    gc_moved_pages: u64,
    gc_erases: u64,
    host_pages_written: u64,
    relocated_pages: u64,
    elapsed: Nanos,
}

fn direction(from: FlashMode, to: FlashMode) -> String {
    format!("{from}->{to}")
}

fn sub_map(a: &BTreeMap<String, u64>, b: &BTreeMap<String, u64>) -> BTreeMap<String, u64> {
    a.iter()
        .map(|(k, v)| (k.clone(), v - b.get(k).copied().unwrap_or(0)))
        .filter(|(_, v)| *v > 0)
        .collect()
}

fn percentile(sorted: &[Nanos], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx] as f64 / 1_000.0
}

pub struct Simulator {
    ftl: Ftl,
    policy: Policy,
    reclaim: ReclaimConfig,
    lun_free: Vec<Nanos>,
    counters: Counters,
    latencies: Vec<Nanos>,
    next_token: u64,
    initial_capacity: u64,
    reads_since_reclaim: u64,
}

impl Simulator {
    pub fn new(device: &DeviceConfig, policy: &PolicyConfig) -> Result<Self, String> {
        policy.thresholds.validate()?;
        policy.heat.validate()?;
        let ftl = device.build()?;
        let heat = HeatState::new(policy.heat, ftl.logical_pages());
        Ok(Self::with_parts(ftl, Policy::new(policy.kind, policy.thresholds, heat), policy.reclaim))
    }

    pub fn with_parts(ftl: Ftl, policy: Policy, reclaim: ReclaimConfig) -> Self {
        let luns = ftl.geometry().lun_count();
        let initial_capacity = ftl.usable_capacity();
        Simulator {
            ftl,
            policy,
            reclaim,
            lun_free: vec![0; luns],
            counters: Counters {
                retry_histogram: vec![0; RETRY_BUCKETS],
                ..Counters::default()
            },
            latencies: Vec::new(),
            next_token: 1,
            initial_capacity,
            reads_since_reclaim: 0,
        }
    }

    pub fn ftl(&self) -> &Ftl {
        &self.ftl
    }

    pub fn ftl_mut(&mut self) -> &mut Ftl {
        &mut self.ftl
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn policy_mut(&mut self) -> &mut Policy {
        &mut self.policy
    }

    pub fn lun_timelines(&self) -> &[Nanos] {
        &self.lun_free
    }

    /// Write `fill_pages` logical pages in order and age every block to the
    /// middle of `stage`. Untimed; statistics start afterwards.
    pub fn precondition(&mut self, fill_pages: u64, stage: ReliabilityStage) -> Result<(), FtlError> {
        for lpn in 0..fill_pages {
            let token = self.next_token;
            self.next_token += 1;
            self.ftl.host_write(lpn, token, 0)?;
        }
        let limit = self.ftl.specs()[FlashMode::Qlc].pe_limit;
        self.ftl.set_wear(stage.midpoint(limit));
        self.initial_capacity = self.ftl.usable_capacity();
        Ok(())
    }

    fn charge(&mut self, work: &[FlashWork], at: Nanos) -> Nanos {
        let mut done = at;
        for w in work {
            let start = self.lun_free[w.lun].max(at);
            self.lun_free[w.lun] = start + w.duration;
            done = done.max(start + w.duration);
        }
        done
    }

    fn note_conversions(&mut self, conversions: &[Conversion]) {
        for c in conversions {
            *self
                .counters
                .block_conversions
                .entry(direction(c.from, c.to))
                .or_default() += 1;
        }
    }

    fn read_page(&mut self, lpn: Lpn, issue: Nanos) -> Result<Nanos, FtlError> {
        let Some(ev) = self.ftl.host_read(lpn, issue)? else {
            self.counters.unmapped_reads += 1;
            self.counters.page_reads += 1;
            self.counters.retry_histogram[0] += 1;
            let lun = (lpn % self.lun_free.len() as u64) as usize;
            let latency = self.ftl.specs()[FlashMode::Qlc].read_ns();
            return Ok(self.charge(&[FlashWork { lun, duration: latency }], issue));
        };
        let start = self.lun_free[ev.lun].max(issue);
        let done = start + ev.latency;
        self.lun_free[ev.lun] = done;
        self.counters.page_reads += 1;
        self.counters.retry_sum += u64::from(ev.retries);
        self.counters.retry_histogram[(ev.retries as usize).min(RETRY_BUCKETS - 1)] += 1;
        *self.counters.reads_by_mode.entry(ev.mode.to_string()).or_default() += 1;

        if let Some(req) = self.policy.on_read_complete(lpn, &ev) {
            match self.ftl.migrate_page(req.lpn, req.to, done) {
                Ok(report) => {
                    self.charge(&report.work, done);
                    self.note_conversions(&report.conversions);
                    self.counters.relocated_pages += 1;
                    *self
                        .counters
                        .migrations
                        .entry(direction(report.from, report.to))
                        .or_default() += 1;
                }
                Err(_) => self.counters.skipped_migrations += 1,
            }
            self.policy.complete(req.lpn);
        }
        if self.reclaim.enabled {
            self.reads_since_reclaim += 1;
            if self.reads_since_reclaim >= RECLAIM_PERIOD {
                self.reads_since_reclaim = 0;
                self.run_reclaim(done);
            }
        }
        Ok(done)
    }

    fn run_reclaim(&mut self, now: Nanos) {
        for req in reclaim_cold(&self.ftl, self.policy.heat(), self.reclaim.watermark) {
            match self.ftl.convert_block(req.block, FlashMode::Qlc, now) {
                Ok(report) => {
                    self.charge(&report.work, now);
                    self.note_conversions(&report.conversions);
                    self.counters.relocated_pages += report.relocated;
                }
                Err(_) => self.counters.skipped_migrations += 1,
            }
        }
    }

    fn write_page(&mut self, lpn: Lpn, issue: Nanos) -> Result<Nanos, FtlError> {
        let token = self.next_token;
        self.next_token += 1;
        let ev = self.ftl.host_write(lpn, token, issue)?;
        let done = self.charge(&ev.work, issue);
        self.note_conversions(&ev.conversions);
        self.counters.host_pages_written += 1;
        let gc = self.ftl.garbage_collect(done);
        if gc.erased_blocks > 0 || gc.moved_pages > 0 {
            self.charge(&gc.work, done);
            self.note_conversions(&gc.conversions);
            self.counters.gc_moved_pages += gc.moved_pages;
            self.counters.gc_erases += gc.erased_blocks;
        }
        Ok(done)
    }

    fn serve(&mut self, req: &Request, issue: Nanos) -> Result<Nanos, FtlError> {
        let mut done = issue;
        for lpn in req.lpn..req.lpn + u64::from(req.pages) {
            let finished = match req.op {
                Op::Read => self.read_page(lpn, issue)?,
                Op::Write => self.write_page(lpn, issue)?,
            };
            done = done.max(finished);
        }
        Ok(done)
    }

    /// Run a request stream to completion and return cumulative statistics.
    pub fn run(&mut self, requests: &[Request]) -> StatsSnapshot {
        let queues = requests.iter().map(|r| r.queue as usize + 1).max().unwrap_or(0);
        let mut per_queue: Vec<Vec<&Request>> = vec![Vec::new(); queues];
        for r in requests {
            per_queue[r.queue as usize].push(r);
        }
        self.counters.submitted += requests.len() as u64;
        let page_bytes = self.ftl.geometry().page_bytes();
        let mut cursor = vec![0usize; queues];
        let start = self.counters.elapsed;
        let mut heap: BinaryHeap<Reverse<(Nanos, usize)>> = (0..queues)
            .filter(|q| !per_queue[*q].is_empty())
            .map(|q| Reverse((start, q)))
            .collect();
        while let Some(Reverse((issue, q))) = heap.pop() {
            let req = per_queue[q][cursor[q]];
            cursor[q] += 1;
            let next_issue = match self.serve(req, issue) {
                Ok(done) => {
                    self.counters.completed += 1;
                    match req.op {
                        Op::Read => self.counters.completed_reads += 1,
                        Op::Write => self.counters.completed_writes += 1,
                    }
                    self.counters.bytes += u64::from(req.pages) * page_bytes;
                    self.latencies.push(done - issue);
                    self.counters.elapsed = self.counters.elapsed.max(done);
                    done
                }
                Err(_) => {
                    self.counters.failed += 1;
                    issue
                }
            };
            if cursor[q] < per_queue[q].len() {
                heap.push(Reverse((next_issue, q)));
            }
        }
        self.snapshot_stats(Window::Cumulative)
    }

    pub fn snapshot_stats(&self, window: Window<'_>) -> StatsSnapshot {
        let c = &self.counters;
        let cumulative = self.build_snapshot(c, 0, 0);
        match window {
            Window::Cumulative => cumulative,
            Window::Since(earlier) => {
                let from = earlier.latency_samples as usize;
                let mut w = self.build_snapshot(c, from, earlier.elapsed_ns);
                w.submitted -= earlier.submitted;
                w.completed -= earlier.completed;
                w.failed -= earlier.failed;
                w.completed_reads -= earlier.completed_reads;
                w.completed_writes -= earlier.completed_writes;
                w.page_reads -= earlier.page_reads;
                w.unmapped_reads -= earlier.unmapped_reads;
                for (a, b) in w.retry_histogram.iter_mut().zip(&earlier.retry_histogram) {
                    *a -= b;
                }
                w.reads_by_mode = sub_map(&w.reads_by_mode, &earlier.reads_by_mode);
                w.migrations = sub_map(&w.migrations, &earlier.migrations);
                w.migration_count -= earlier.migration_count;
                w.skipped_migrations -= earlier.skipped_migrations;
                w.block_conversions = sub_map(&w.block_conversions, &earlier.block_conversions);
                w.gc_moved_pages -= earlier.gc_moved_pages;
                w.gc_erases -= earlier.gc_erases;
                w.host_pages_written -= earlier.host_pages_written;
                w.in_flight = 0;
                let secs = w.elapsed_ns as f64 / 1e9;
                w.iops = if secs > 0.0 { w.completed_reads as f64 / secs } else { 0.0 };
                let hist_reads: u64 = w.retry_histogram.iter().sum();
                let retry_sum = cumulative.mean_retries * cumulative.page_reads as f64
                    - earlier.mean_retries * earlier.page_reads as f64;
                w.mean_retries = if hist_reads > 0 { retry_sum / hist_reads as f64 } else { 0.0 };
                let bytes = cumulative.bandwidth_mib_s * cumulative.elapsed_ns as f64
                    - earlier.bandwidth_mib_s * earlier.elapsed_ns as f64;
                w.bandwidth_mib_s = if w.elapsed_ns > 0 { bytes / w.elapsed_ns as f64 } else { 0.0 };
                w.capacity_series.retain(|p| p.time_ns >= earlier.elapsed_ns);
                w
            }
        }
    }

    fn build_snapshot(&self, c: &Counters, from_sample: usize, since: Nanos) -> StatsSnapshot {
        let mut sorted = self.latencies[from_sample.min(self.latencies.len())..].to_vec();
        sorted.sort_unstable();
        let elapsed = c.elapsed.saturating_sub(since);
        let secs = elapsed as f64 / 1e9;
        let mean_latency_us = if sorted.is_empty() {
            0.0
        } else {
            sorted.iter().map(|v| *v as f64).sum::<f64>() / sorted.len() as f64 / 1_000.0
        };
        let final_capacity = self.ftl.usable_capacity();
        let migration_count = c.migrations.values().sum();
        StatsSnapshot {
            submitted: c.submitted,
            completed: c.completed,
            failed: c.failed,
            in_flight: c.submitted - c.completed - c.failed,
            completed_reads: c.completed_reads,
            completed_writes: c.completed_writes,
            page_reads: c.page_reads,
            unmapped_reads: c.unmapped_reads,
            elapsed_ns: elapsed,
            iops: if secs > 0.0 { c.completed_reads as f64 / secs } else { 0.0 },
            bandwidth_mib_s: if secs > 0.0 {
                c.bytes as f64 / (1u64 << 20) as f64 / secs
            } else {
                0.0
            },
            mean_latency_us,
            latency_p50_us: percentile(&sorted, 0.50),
            latency_p99_us: percentile(&sorted, 0.99),
            latency_p999_us: percentile(&sorted, 0.999),
            retry_histogram: c.retry_histogram.clone(),
            mean_retries: if c.page_reads > 0 {
                c.retry_sum as f64 / c.page_reads as f64
            } else {
                0.0
            },
            reads_by_mode: c.reads_by_mode.clone(),
            migrations: c.migrations.clone(),
            migration_count,
            skipped_migrations: c.skipped_migrations,
            block_conversions: c.block_conversions.clone(),
            gc_moved_pages: c.gc_moved_pages,
            gc_erases: c.gc_erases,
            host_pages_written: c.host_pages_written,
            write_amplification: if c.host_pages_written > 0 {
                (c.host_pages_written + c.gc_moved_pages + c.relocated_pages) as f64 / c.host_pages_written as f64
            } else {
                0.0
            },
            initial_capacity_bytes: self.initial_capacity,
            final_capacity_bytes: final_capacity,
            capacity_loss_bytes: self.initial_capacity.saturating_sub(final_capacity),
            capacity_series: self.ftl.ledger().series.clone(),
            latency_samples: self.latencies.len() as u64,
        }
    }
}
