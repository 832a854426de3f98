//! Migration policies: heat classification, the retry-gated decision table,
//! the temperature-only comparison policy and the no-migration baseline.

use std::collections::HashSet;
use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::flash::{FlashMode, ReliabilityStage};
use crate::ftl::{BlockId, BlockState, Ftl, Lpn, ReadEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Heat {
    Cold,
    Warm,
    Hot,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeatConfig {
    /// Logical pages sharing one counter.
    pub extent_pages: u64,
    /// Accesses after which an idle score has halved.
    pub half_life: u64,
    pub theta_warm: f64,
    pub theta_hot: f64,
    /// Requests replayed into the classifier before the measured run.
    pub warmup_requests: u64,
}

impl Default for HeatConfig {
    fn default() -> Self {
        HeatConfig {
            extent_pages: 1,
            half_life: 1_000_000,
            theta_warm: 2.0,
            theta_hot: 3.0,
            warmup_requests: 0,
        }
    }
}

impl HeatConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.extent_pages == 0 {
            return Err("heat.extent_pages must be >= 1".into());
        }
        if self.half_life == 0 {
            return Err("heat.half_life must be >= 1".into());
        }
        if !(self.theta_warm > 0.0 && self.theta_hot > self.theta_warm && self.theta_hot.is_finite()) {
            return Err("heat thresholds require theta_hot > theta_warm > 0".into());
        }
        Ok(())
    }
}

/// Exponentially decayed access counters, one per extent. Decay is applied
/// lazily from the tick of the last update.
#[derive(Debug, Clone)]
pub struct HeatState {
    config: HeatConfig,
    scores: Vec<f64>,
    stamps: Vec<u64>,
    clock: u64,
}

impl HeatState {
    pub fn new(config: HeatConfig, logical_pages: u64) -> Self {
        let extents = logical_pages.div_ceil(config.extent_pages) as usize;
        HeatState {
            config,
            scores: vec![0.0; extents],
            stamps: vec![0; extents],
            clock: 0,
        }
    }

    pub fn config(&self) -> &HeatConfig {
        &self.config
    }

    fn extent(&self, lpn: Lpn) -> usize {
        (lpn / self.config.extent_pages) as usize
    }

    fn decay(&self, ticks: u64) -> f64 {
        (-(ticks as f64) / self.config.half_life as f64).exp2()
    }

    pub fn record_access(&mut self, lpn: Lpn) {
        self.clock += 1;
        let e = self.extent(lpn);
        if e >= self.scores.len() {
            return;
        }
        self.scores[e] = self.scores[e] * self.decay(self.clock - self.stamps[e]) + 1.0;
        self.stamps[e] = self.clock;
    }

    /// Let `ticks` requests pass without touching any extent.
    pub fn advance(&mut self, ticks: u64) {
        self.clock += ticks;
    }

    pub fn score(&self, lpn: Lpn) -> f64 {
        let e = self.extent(lpn);
        match self.scores.get(e) {
            Some(s) if *s > 0.0 => s * self.decay(self.clock - self.stamps[e]),
            _ => 0.0,
        }
    }

    pub fn classify_score(&self, score: f64) -> Heat {
        if score >= self.config.theta_hot {
            Heat::Hot
        } else if score >= self.config.theta_warm {
            Heat::Warm
        } else {
            Heat::Cold
        }
    }

    pub fn classify(&self, lpn: Lpn) -> Heat {
        self.classify_score(self.score(lpn))
    }
}

/// One value per reliability stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerStage<T> {
    pub young: T,
    pub middle: T,
    pub old: T,
}

impl<T> Index<ReliabilityStage> for PerStage<T> {
    type Output = T;

    fn index(&self, stage: ReliabilityStage) -> &T {
        match stage {
            ReliabilityStage::Young => &self.young,
            ReliabilityStage::Middle => &self.middle,
            ReliabilityStage::Old => &self.old,
        }
    }
}

impl<T> IndexMut<ReliabilityStage> for PerStage<T> {
    fn index_mut(&mut self, stage: ReliabilityStage) -> &mut T {
        match stage {
            ReliabilityStage::Young => &mut self.young,
            ReliabilityStage::Middle => &mut self.middle,
            ReliabilityStage::Old => &mut self.old,
        }
    }
}

impl<T> PerStage<T> {
    pub fn from_fn(mut f: impl FnMut(ReliabilityStage) -> T) -> Self {
        PerStage {
            young: f(ReliabilityStage::Young),
            middle: f(ReliabilityStage::Middle),
            old: f(ReliabilityStage::Old),
        }
    }

    pub fn set(&mut self, stage: ReliabilityStage, value: T) {
        match stage {
            ReliabilityStage::Young => self.young = value,
            ReliabilityStage::Middle => self.middle = value,
            ReliabilityStage::Old => self.old = value,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyThresholds {
    pub r1: u32,
    pub r2: PerStage<u32>,
}

impl Default for PolicyThresholds {
    fn default() -> Self {
        PolicyThresholds {
            r1: 1,
            r2: PerStage {
                young: 5,
                middle: 7,
                old: 11,
            },
        }
    }
}

impl PolicyThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if self.r1 < 1 {
            return Err("policy.thresholds.r1 must be >= 1".into());
        }
        for stage in ReliabilityStage::ALL {
            if self.r2[stage] < self.r1 {
                return Err(format!(
                    "policy.thresholds.r2.{stage} = {} is below r1 = {}",
                    self.r2[stage], self.r1
                ));
            }
        }
        Ok(())
    }

    /// `validate` plus the ordering young <= middle <= old.
    pub fn validate_ordered(&self) -> Result<(), String> {
        self.validate()?;
        if !(self.r2.young <= self.r2.middle && self.r2.middle <= self.r2.old) {
            return Err("policy.thresholds.r2 must be nondecreasing across stages".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyKind {
    Baseline,
    Hotness,
    Raro,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 3] = [PolicyKind::Baseline, PolicyKind::Hotness, PolicyKind::Raro];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Baseline => "baseline",
            PolicyKind::Hotness => "hotness",
            PolicyKind::Raro => "raro",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PolicyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" | "base" => Ok(PolicyKind::Baseline),
            "hotness" => Ok(PolicyKind::Hotness),
            "raro" => Ok(PolicyKind::Raro),
            other => Err(format!("unknown policy `{other}`")),
        }
    }
}

/// Target mode for data of the given heat, or `None` to leave it in place.
pub fn migration_decision(
    kind: PolicyKind,
    heat: Heat,
    retries: u32,
    current: FlashMode,
    stage: ReliabilityStage,
    th: &PolicyThresholds,
) -> Option<FlashMode> {
    use FlashMode::*;
    match kind {
        PolicyKind::Baseline => None,
        PolicyKind::Hotness => match (current, heat) {
            (Qlc, Heat::Hot) | (Tlc, Heat::Hot) => Some(Slc),
            (Qlc, Heat::Warm) => Some(Tlc),
            _ => None,
        },
        PolicyKind::Raro => match (current, heat) {
            (Qlc, Heat::Hot) if retries >= th.r1 => Some(Slc),
            (Qlc, Heat::Warm) if retries >= th.r2[stage] => Some(Tlc),
            (Tlc, Heat::Hot) if retries >= th.r1 => Some(Slc),
            _ => None,
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MigrationRequest {
    pub lpn: Lpn,
    pub block: BlockId,
    pub from: FlashMode,
    pub to: FlashMode,
    pub heat: Heat,
}

/// Per-read pipeline: classify heat, take the retry count of the read just
/// served, decide.
#[derive(Debug, Clone)]
pub struct Policy {
    pub kind: PolicyKind,
    pub thresholds: PolicyThresholds,
    heat: HeatState,
    pending: HashSet<Lpn>,
}

impl Policy {
    pub fn new(kind: PolicyKind, thresholds: PolicyThresholds, heat: HeatState) -> Self {
        Policy {
            kind,
            thresholds,
            heat,
            pending: HashSet::new(),
        }
    }

    pub fn heat(&self) -> &HeatState {
        &self.heat
    }

    /// Feed accesses into the classifier without making decisions.
    pub fn prime(&mut self, lpns: impl IntoIterator<Item = Lpn>) {
        for lpn in lpns {
            self.heat.record_access(lpn);
        }
    }

    pub fn on_read_complete(&mut self, lpn: Lpn, read: &ReadEvent) -> Option<MigrationRequest> {
        self.heat.record_access(lpn);
        let heat = self.heat.classify(lpn);
        let to = migration_decision(self.kind, heat, read.retries, read.mode, read.stage, &self.thresholds)?;
        if !self.pending.insert(lpn) {
            return None;
        }
        Some(MigrationRequest {
            lpn,
            block: read.page.block,
            from: read.mode,
            to,
            heat,
        })
    }

    /// Drop the pending marker once a request was executed or skipped.
    pub fn complete(&mut self, lpn: Lpn) {
        self.pending.remove(&lpn);
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReclaimRequest {
    pub block: BlockId,
    pub from: FlashMode,
}

/// Low-density blocks holding only cold data, chosen to cover the gap between
/// free pages and `watermark` (a fraction of the initial capacity). Larger
/// capacity gains first.
pub fn reclaim_cold(ftl: &Ftl, heat: &HeatState, watermark: f64) -> Vec<ReclaimRequest> {
    let ledger = ftl.ledger();
    let want = (ledger.initial_pages as f64 * watermark) as u64;
    if ledger.free_pages >= want {
        return Vec::new();
    }
    let deficit = want - ledger.free_pages;
    let qlc_pages = ftl.specs()[FlashMode::Qlc].pages_per_block;
    let mut candidates: Vec<(u32, u32, BlockId, FlashMode)> = ftl
        .blocks()
        .iter()
        .filter(|b| b.mode != FlashMode::Qlc && b.state != BlockState::Active)
        .filter(|b| b.pe_cycles < ftl.specs()[FlashMode::Qlc].pe_limit)
        .filter(|b| b.valid_lpns().all(|lpn| heat.classify(lpn) == Heat::Cold))
        .map(|b| (qlc_pages - b.pages(), b.valid_count, b.id, b.mode))
        .collect();
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut covered = 0u64;
    let mut out = Vec::new();
    for (gain, _, block, from) in candidates {
        if covered >= deficit {
            break;
        }
        covered += u64::from(gain);
        out.push(ReclaimRequest { block, from });
    }
    out
}
