//! Page-mapped flash translation layer over a hybrid SLC/TLC/QLC device.
//!
//! Only metadata is tracked: each physical page carries the logical page it
//! holds and an opaque write token, so a 16 GiB device fits in a few tens of
//! megabytes.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::{
    FlashMode, ModeSpec, Nanos, PageCondition, PerMode, ReliabilityModel, ReliabilityStage,
    NANOS_PER_HOUR,
};

pub type Lpn = u64;
pub type BlockId = u32;

const UNMAPPED: u64 = u64::MAX;
const NO_LPN: Lpn = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub channels: u32,
    pub luns_per_channel: u32,
    pub planes_per_lun: u32,
    pub blocks_per_plane: u32,
    pub page_size_kib: u32,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            channels: 2,
            luns_per_channel: 2,
            planes_per_lun: 1,
            blocks_per_plane: 256,
            page_size_kib: 16,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("channels", self.channels),
            ("luns_per_channel", self.luns_per_channel),
            ("planes_per_lun", self.planes_per_lun),
            ("blocks_per_plane", self.blocks_per_plane),
            ("page_size_kib", self.page_size_kib),
        ] {
            if v == 0 {
                return Err(format!("geometry.{name} must be >= 1"));
            }
        }
        Ok(())
    }

    pub fn lun_count(&self) -> usize {
        (self.channels * self.luns_per_channel) as usize
    }

    pub fn blocks_per_lun(&self) -> u32 {
        self.planes_per_lun * self.blocks_per_plane
    }

    pub fn block_count(&self) -> u32 {
        self.channels * self.luns_per_channel * self.blocks_per_lun()
    }

    pub fn page_bytes(&self) -> u64 {
        u64::from(self.page_size_kib) * 1024
    }

    pub fn lun_of(&self, block: BlockId) -> usize {
        (block / self.blocks_per_lun()) as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhysPage {
    pub block: BlockId,
    pub page: u32,
}

impl PhysPage {
    fn pack(self) -> u64 {
        (u64::from(self.block) << 32) | u64::from(self.page)
    }

    fn unpack(v: u64) -> Option<Self> {
        (v != UNMAPPED).then_some(PhysPage {
            block: (v >> 32) as u32,
            page: v as u32,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockState {
    Free,
    Active,
    Full,
}

#[derive(Debug, Clone)]
pub struct BlockMeta {
    pub id: BlockId,
    pub channel: u32,
    pub lun: u32,
    pub plane: u32,
    pub mode: FlashMode,
    pub state: BlockState,
    pub pe_cycles: u32,
    /// Wear assigned by preconditioning; `pe_cycles - pe_baseline` erases happened here.
    pub pe_baseline: u32,
    pub erase_count: u32,
    pub reads_since_erase: u64,
    pub write_pointer: u32,
    pub valid_count: u32,
    valid: Vec<bool>,
    program_time: Vec<Nanos>,
    page_lpn: Vec<Lpn>,
    token: Vec<u64>,
}

impl BlockMeta {
    fn new(id: BlockId, geometry: &Geometry, mode: FlashMode, pages: u32) -> Self {
        let per_lun = geometry.blocks_per_lun();
        let lun_index = id / per_lun;
        let mut b = BlockMeta {
            id,
            channel: lun_index / geometry.luns_per_channel,
            lun: lun_index % geometry.luns_per_channel,
            plane: (id % per_lun) / geometry.blocks_per_plane,
            mode,
            state: BlockState::Free,
            pe_cycles: 0,
            pe_baseline: 0,
            erase_count: 0,
            reads_since_erase: 0,
            write_pointer: 0,
            valid_count: 0,
            valid: Vec::new(),
            program_time: Vec::new(),
            page_lpn: Vec::new(),
            token: Vec::new(),
        };
        b.reset_pages(pages);
        b
    }

    fn reset_pages(&mut self, pages: u32) {
        let n = pages as usize;
        self.valid = vec![false; n];
        self.program_time = vec![0; n];
        self.page_lpn = vec![NO_LPN; n];
        self.token = vec![0; n];
        self.write_pointer = 0;
        self.valid_count = 0;
    }

    pub fn pages(&self) -> u32 {
        self.valid.len() as u32
    }

    pub fn invalid_count(&self) -> u32 {
        self.write_pointer - self.valid_count
    }

    pub fn is_valid(&self, page: u32) -> bool {
        self.valid[page as usize]
    }

    pub fn lpn_at(&self, page: u32) -> Option<Lpn> {
        let l = self.page_lpn[page as usize];
        (l != NO_LPN).then_some(l)
    }

    pub fn valid_lpns(&self) -> impl Iterator<Item = Lpn> + '_ {
        self.valid
            .iter()
            .zip(&self.page_lpn)
            .filter(|(v, _)| **v)
            .map(|(_, l)| *l)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub time_ns: Nanos,
    pub usable_bytes: u64,
}

/// Incrementally maintained capacity accounting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CapacityLedger {
    pub usable_pages_total: u64,
    pub free_pages: u64,
    pub blocks_per_mode: PerMode<u32>,
    pub initial_pages: u64,
    pub series: Vec<CapacityPoint>,
}

/// One unit of time a LUN is busy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlashWork {
    pub lun: usize,
    pub duration: Nanos,
}

pub fn total_latency(work: &[FlashWork]) -> Nanos {
    work.iter().map(|w| w.duration).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProgramEvent {
    pub page: PhysPage,
    pub lun: usize,
    pub mode: FlashMode,
    pub latency: Nanos,
    /// Everything charged, including any blocks re-tagged to host the page.
    pub work: Vec<FlashWork>,
    pub conversions: Vec<Conversion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadEvent {
    pub page: PhysPage,
    pub lun: usize,
    pub mode: FlashMode,
    pub stage: ReliabilityStage,
    pub retries: u32,
    pub latency: Nanos,
    pub token: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GcReport {
    pub moved_pages: u64,
    pub erased_blocks: u64,
    pub latency: Nanos,
    pub work: Vec<FlashWork>,
    /// Free blocks re-tagged to host relocated pages.
    pub conversions: Vec<Conversion>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conversion {
    pub block: BlockId,
    pub from: FlashMode,
    pub to: FlashMode,
    pub capacity_delta_pages: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConversionReport {
    pub block: BlockId,
    pub from: FlashMode,
    pub to: FlashMode,
    pub relocated: u64,
    /// Net change of usable pages, destination blocks included.
    pub capacity_delta_pages: i64,
    pub latency: Nanos,
    pub work: Vec<FlashWork>,
    pub conversions: Vec<Conversion>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MigrationReport {
    pub lpn: Lpn,
    pub from: FlashMode,
    pub to: FlashMode,
    pub source: PhysPage,
    pub destination: PhysPage,
    pub capacity_delta_pages: i64,
    pub latency: Nanos,
    pub work: Vec<FlashWork>,
    pub conversions: Vec<Conversion>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FtlError {
    #[error("logical page {lpn} outside the logical space of {limit} pages")]
    LpnOutOfRange { lpn: Lpn, limit: u64 },
    #[error("no free page left for a {0} write")]
    OutOfSpace(FlashMode),
    #[error("block {block} is already in {mode} mode")]
    SameMode { block: BlockId, mode: FlashMode },
    #[error("no conversion path from {from} to {to}")]
    NoConversionPath { from: FlashMode, to: FlashMode },
    #[error("block {0} is worn out for the requested mode")]
    WornOut(BlockId),
    #[error("not enough {0} capacity to relocate valid data")]
    NoDestination(FlashMode),
    #[error("logical page {0} is not mapped")]
    Unmapped(Lpn),
    #[error("block {0} does not exist")]
    NoSuchBlock(BlockId),
}

/// Conversions the device supports.
pub fn conversion_allowed(from: FlashMode, to: FlashMode) -> bool {
    use FlashMode::*;
    matches!(
        (from, to),
        (Qlc, Slc) | (Qlc, Tlc) | (Tlc, Slc) | (Slc, Qlc) | (Tlc, Qlc)
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcConfig {
    /// GC starts when free pages drop below this fraction of usable pages.
    pub low_watermark: f64,
    /// and runs until free pages reach this fraction.
    pub high_watermark: f64,
}

impl Default for GcConfig {
    fn default() -> Self {
        GcConfig {
            low_watermark: 0.05,
            high_watermark: 0.10,
        }
    }
}

impl GcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.low_watermark) || !(0.0..=1.0).contains(&self.high_watermark) {
            return Err("gc watermarks must lie in [0, 1]".into());
        }
        if self.high_watermark < self.low_watermark {
            return Err("gc.high_watermark must be >= gc.low_watermark".into());
        }
        Ok(())
    }
}

/// Candidate summary used by the greedy victim choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VictimCandidate {
    pub block: BlockId,
    pub invalid_pages: u32,
    pub pe_cycles: u32,
    pub fully_programmed: bool,
}

/// Greedy choice: most invalid pages, then fewest P/E cycles, then lowest id.
pub fn select_gc_victim(candidates: impl IntoIterator<Item = VictimCandidate>) -> Option<BlockId> {
    candidates
        .into_iter()
        .filter(|c| c.fully_programmed && c.invalid_pages > 0)
        .min_by(|a, b| {
            b.invalid_pages
                .cmp(&a.invalid_pages)
                .then(a.pe_cycles.cmp(&b.pe_cycles))
                .then(a.block.cmp(&b.block))
        })
        .map(|c| c.block)
}

#[derive(Debug, Clone)]
pub struct Ftl {
    geometry: Geometry,
    specs: PerMode<ModeSpec>,
    reliability: ReliabilityModel,
    gc: GcConfig,
    logical_pages: u64,
    map: Vec<u64>,
    blocks: Vec<BlockMeta>,
    active: Vec<PerMode<Option<BlockId>>>,
    cursor: PerMode<usize>,
    /// LUN currently receiving relocated pages, per mode.
    frontier: PerMode<usize>,
    ledger: CapacityLedger,
}

impl Ftl {
    /// Fresh device, every block erased and in `initial_mode`. The logical
    /// space defaults to the initial usable capacity.
    pub fn new(
        geometry: Geometry,
        specs: PerMode<ModeSpec>,
        reliability: ReliabilityModel,
        initial_mode: FlashMode,
        logical_pages: Option<u64>,
    ) -> Result<Self, String> {
        geometry.validate()?;
        for mode in FlashMode::ALL {
            if specs[mode].pages_per_block == 0 {
                return Err(format!("modes.{}.pages_per_block must be >= 1", mode.as_str().to_lowercase()));
            }
        }
        let pages = specs[initial_mode].pages_per_block;
        let blocks: Vec<BlockMeta> = (0..geometry.block_count())
            .map(|id| BlockMeta::new(id, &geometry, initial_mode, pages))
            .collect();
        let total = u64::from(geometry.block_count()) * u64::from(pages);
        let logical_pages = logical_pages.unwrap_or(total);
        let mut blocks_per_mode = PerMode::from_fn(|_| 0);
        blocks_per_mode[initial_mode] = geometry.block_count();
        let ledger = CapacityLedger {
            usable_pages_total: total,
            free_pages: total,
            blocks_per_mode,
            initial_pages: total,
            series: vec![CapacityPoint {
                time_ns: 0,
                usable_bytes: total * geometry.page_bytes(),
            }],
        };
        Ok(Ftl {
            map: vec![UNMAPPED; logical_pages as usize],
            active: vec![PerMode::from_fn(|_| None); geometry.lun_count()],
            cursor: PerMode::from_fn(|_| 0),
            frontier: PerMode::from_fn(|_| 0),
            geometry,
            specs,
            reliability,
            gc: GcConfig::default(),
            logical_pages,
            blocks,
            ledger,
        })
    }

    pub fn with_gc(mut self, gc: GcConfig) -> Self {
        self.gc = gc;
        self
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn specs(&self) -> &PerMode<ModeSpec> {
        &self.specs
    }

    pub fn reliability(&self) -> &ReliabilityModel {
        &self.reliability
    }

    pub fn logical_pages(&self) -> u64 {
        self.logical_pages
    }

    pub fn blocks(&self) -> &[BlockMeta] {
        &self.blocks
    }

    pub fn block(&self, id: BlockId) -> &BlockMeta {
        &self.blocks[id as usize]
    }

    pub fn ledger(&self) -> &CapacityLedger {
        &self.ledger
    }

    pub fn usable_capacity(&self) -> u64 {
        self.ledger.usable_pages_total * self.geometry.page_bytes()
    }

    pub fn free_pages(&self) -> u64 {
        self.ledger.free_pages
    }

    pub fn mapped_pages(&self) -> u64 {
        self.map.iter().filter(|v| **v != UNMAPPED).count() as u64
    }

    pub fn translate(&self, lpn: Lpn) -> Option<PhysPage> {
        self.map.get(lpn as usize).copied().and_then(PhysPage::unpack)
    }

    pub fn mode_of(&self, lpn: Lpn) -> Option<FlashMode> {
        self.translate(lpn).map(|p| self.blocks[p.block as usize].mode)
    }

    /// Overwrite the wear of every block, as a device aged to a given point.
    pub fn set_wear(&mut self, pe_cycles: u32) {
        for b in &mut self.blocks {
            b.pe_cycles = pe_cycles;
            b.pe_baseline = pe_cycles;
            b.erase_count = 0;
            b.reads_since_erase = 0;
        }
    }

    fn check_lpn(&self, lpn: Lpn) -> Result<(), FtlError> {
        if lpn >= self.logical_pages {
            return Err(FtlError::LpnOutOfRange {
                lpn,
                limit: self.logical_pages,
            });
        }
        Ok(())
    }

    fn lun_range(&self, lun: usize) -> std::ops::Range<usize> {
        let per = self.geometry.blocks_per_lun() as usize;
        lun * per..(lun + 1) * per
    }

    fn can_erase_into(&self, block: &BlockMeta, mode: FlashMode) -> bool {
        block.pe_cycles < self.specs[mode].pe_limit
    }

    fn record_capacity(&mut self, now: Nanos) {
        let usable_bytes = self.ledger.usable_pages_total * self.geometry.page_bytes();
        if self.ledger.series.last().map(|p| p.usable_bytes) != Some(usable_bytes) {
            self.ledger.series.push(CapacityPoint {
                time_ns: now,
                usable_bytes,
            });
        }
    }

    /// Erase a block that holds no valid data and tag it with `mode`.
    fn erase_into(&mut self, id: BlockId, mode: FlashMode, now: Nanos) -> (FlashWork, i64) {
        let old_mode = self.blocks[id as usize].mode;
        let lun = self.geometry.lun_of(id);
        if let Some(slot) = self.active[lun][old_mode].as_mut() {
            if *slot == id {
                self.active[lun][old_mode] = None;
            }
        }
        let old_pages = u64::from(self.blocks[id as usize].pages());
        let old_free = match self.blocks[id as usize].state {
            BlockState::Free => old_pages,
            _ => old_pages - u64::from(self.blocks[id as usize].write_pointer),
        };
        let new_pages = self.specs[mode].pages_per_block;
        let b = &mut self.blocks[id as usize];
        debug_assert_eq!(b.valid_count, 0);
        b.pe_cycles += 1;
        b.erase_count += 1;
        b.reads_since_erase = 0;
        b.mode = mode;
        b.state = BlockState::Free;
        b.reset_pages(new_pages);
        let delta = i64::from(new_pages) - old_pages as i64;
        self.ledger.free_pages = self.ledger.free_pages - old_free + u64::from(new_pages);
        self.ledger.usable_pages_total = (self.ledger.usable_pages_total as i64 + delta) as u64;
        if old_mode != mode {
            self.ledger.blocks_per_mode[old_mode] -= 1;
            self.ledger.blocks_per_mode[mode] += 1;
            self.record_capacity(now);
        }
        let duration = self.specs[old_mode].erase_ns().max(self.specs[mode].erase_ns());
        (FlashWork { lun, duration }, delta)
    }

    /// Open a new active block of `mode` in `lun`, re-tagging a free block of
    /// another mode when none of the right mode is free.
    fn open_block(
        &mut self,
        lun: usize,
        mode: FlashMode,
        now: Nanos,
        work: &mut Vec<FlashWork>,
        conversions: &mut Vec<Conversion>,
    ) -> Option<BlockId> {
        let range = self.lun_range(lun);
        let pick = |same_mode: bool| {
            self.blocks[range.clone()]
                .iter()
                .filter(|b| b.state == BlockState::Free && (b.mode == mode) == same_mode)
                .filter(|b| same_mode || self.can_erase_into(b, mode))
                .min_by_key(|b| (b.pe_cycles, b.id))
                .map(|b| b.id)
        };
        let id = match pick(true) {
            Some(id) => id,
            None => {
                let id = pick(false)?;
                let from = self.blocks[id as usize].mode;
                let (w, delta) = self.erase_into(id, mode, now);
                work.push(w);
                conversions.push(Conversion {
                    block: id,
                    from,
                    to: mode,
                    capacity_delta_pages: delta,
                });
                id
            }
        };
        self.blocks[id as usize].state = BlockState::Active;
        self.active[lun][mode] = Some(id);
        Some(id)
    }

    fn lun_has_room(&self, lun: usize, mode: FlashMode) -> bool {
        if let Some(id) = self.active[lun][mode] {
            let b = &self.blocks[id as usize];
            if b.write_pointer < b.pages() {
                return true;
            }
        }
        self.blocks[self.lun_range(lun)]
            .iter()
            .any(|b| b.state == BlockState::Free && (b.mode == mode || self.can_erase_into(b, mode)))
    }

    /// Next free page of `mode`, round-robin over LUNs.
    fn allocate(
        &mut self,
        mode: FlashMode,
        now: Nanos,
        work: &mut Vec<FlashWork>,
        conversions: &mut Vec<Conversion>,
    ) -> Result<PhysPage, FtlError> {
        let luns = self.geometry.lun_count();
        let lun = (0..luns)
            .map(|step| (self.cursor[mode] + step) % luns)
            .find(|&lun| self.lun_has_room(lun, mode));
        if let Some(lun) = lun {
            self.cursor[mode] = (lun + 1) % luns;
            let id = match self.active[lun][mode] {
                Some(id) if self.blocks[id as usize].write_pointer < self.blocks[id as usize].pages() => id,
                _ => {
                    if let Some(id) = self.active[lun][mode].take() {
                        self.blocks[id as usize].state = BlockState::Full;
                    }
                    self.open_block(lun, mode, now, work, conversions)
                        .ok_or(FtlError::OutOfSpace(mode))?
                }
            };
            let page = self.blocks[id as usize].write_pointer;
            return Ok(PhysPage { block: id, page });
        }
        Err(FtlError::OutOfSpace(mode))
    }

    /// Relocated pages fill one block at a time instead of striping, so a
    /// trickle of migrations opens one block per mode rather than one per LUN.
    /// SLC destinations still stripe; the hottest data needs the parallelism.
    fn allocate_frontier(
        &mut self,
        mode: FlashMode,
        now: Nanos,
        work: &mut Vec<FlashWork>,
        conversions: &mut Vec<Conversion>,
    ) -> Result<PhysPage, FtlError> {
        let lun = self.frontier[mode];
        if let Some(id) = self.active[lun][mode] {
            let b = &self.blocks[id as usize];
            if b.write_pointer < b.pages() {
                return Ok(PhysPage {
                    block: id,
                    page: b.write_pointer,
                });
            }
        }
        self.cursor[mode] = (lun + 1) % self.geometry.lun_count();
        let at = self.allocate(mode, now, work, conversions)?;
        self.frontier[mode] = self.geometry.lun_of(at.block);
        Ok(at)
    }

    fn program(&mut self, at: PhysPage, lpn: Lpn, token: u64, now: Nanos) {
        let b = &mut self.blocks[at.block as usize];
        debug_assert_eq!(b.write_pointer, at.page);
        let i = at.page as usize;
        b.valid[i] = true;
        b.page_lpn[i] = lpn;
        b.token[i] = token;
        b.program_time[i] = now;
        b.write_pointer += 1;
        b.valid_count += 1;
        if b.write_pointer == b.pages() {
            let lun = self.geometry.lun_of(at.block);
            if self.active[lun][b.mode] == Some(at.block) {
                self.active[lun][b.mode] = None;
            }
            b.state = BlockState::Full;
        }
        self.ledger.free_pages -= 1;
        self.map[lpn as usize] = at.pack();
    }

    fn invalidate(&mut self, at: PhysPage) {
        let b = &mut self.blocks[at.block as usize];
        let i = at.page as usize;
        if b.valid[i] {
            b.valid[i] = false;
            b.page_lpn[i] = NO_LPN;
            b.valid_count -= 1;
        }
    }

    /// Out-of-place write of `lpn` into a block of `mode`.
    pub fn host_write_in(
        &mut self,
        lpn: Lpn,
        token: u64,
        mode: FlashMode,
        now: Nanos,
    ) -> Result<ProgramEvent, FtlError> {
        self.check_lpn(lpn)?;
        let mut work = Vec::new();
        let mut conversions = Vec::new();
        let at = match self.allocate(mode, now, &mut work, &mut conversions) {
            Ok(at) => at,
            Err(FtlError::OutOfSpace(_)) => {
                let gc = self.collect(now, u64::MAX, true);
                work.extend(gc.work);
                conversions.extend(gc.conversions);
                self.allocate(mode, now, &mut work, &mut conversions)?
            }
            Err(e) => return Err(e),
        };
        if let Some(old) = self.translate(lpn) {
            self.invalidate(old);
        }
        self.program(at, lpn, token, now);
        let lun = self.geometry.lun_of(at.block);
        let latency = self.specs[mode].write_ns();
        work.push(FlashWork { lun, duration: latency });
        Ok(ProgramEvent {
            page: at,
            lun,
            mode,
            latency,
            work,
            conversions,
        })
    }

    pub fn host_write(&mut self, lpn: Lpn, token: u64, now: Nanos) -> Result<ProgramEvent, FtlError> {
        self.host_write_in(lpn, token, FlashMode::Qlc, now)
    }

    /// Physical read of a mapped page. `Ok(None)` for never-written data.
    pub fn host_read(&mut self, lpn: Lpn, now: Nanos) -> Result<Option<ReadEvent>, FtlError> {
        self.check_lpn(lpn)?;
        let Some(at) = self.translate(lpn) else {
            return Ok(None);
        };
        let b = &self.blocks[at.block as usize];
        let spec = &self.specs[b.mode];
        let cond = PageCondition {
            pe_cycles: b.pe_cycles,
            retention_hours: now.saturating_sub(b.program_time[at.page as usize]) as f64 / NANOS_PER_HOUR,
            reads_since_erase: b.reads_since_erase,
        };
        let retries = self.reliability.page_retries(b.mode, spec, cond, at.block, at.page);
        let event = ReadEvent {
            page: at,
            lun: self.geometry.lun_of(at.block),
            mode: b.mode,
            stage: ReliabilityStage::classify(b.pe_cycles, spec.pe_limit),
            retries,
            latency: crate::flash::read_latency_with_retries(spec, retries),
            token: b.token[at.page as usize],
        };
        self.blocks[at.block as usize].reads_since_erase += 1;
        Ok(Some(event))
    }

    /// Copy one valid page into a block of `mode`. The source read is an
    /// internal copy and is charged without retries.
    fn relocate(
        &mut self,
        from: PhysPage,
        mode: FlashMode,
        now: Nanos,
        work: &mut Vec<FlashWork>,
        conversions: &mut Vec<Conversion>,
    ) -> Result<PhysPage, FtlError> {
        let src = &self.blocks[from.block as usize];
        let lpn = src.page_lpn[from.page as usize];
        let token = src.token[from.page as usize];
        let src_mode = src.mode;
        let to = if mode == FlashMode::Slc {
            self.allocate(mode, now, work, conversions)?
        } else {
            self.allocate_frontier(mode, now, work, conversions)?
        };
        work.push(FlashWork {
            lun: self.geometry.lun_of(from.block),
            duration: self.specs[src_mode].read_ns(),
        });
        self.invalidate(from);
        self.program(to, lpn, token, now);
        work.push(FlashWork {
            lun: self.geometry.lun_of(to.block),
            duration: self.specs[mode].write_ns(),
        });
        Ok(to)
    }

    /// Move one logical page into a block of `target` mode.
    pub fn migrate_page(&mut self, lpn: Lpn, target: FlashMode, now: Nanos) -> Result<MigrationReport, FtlError> {
        self.check_lpn(lpn)?;
        let source = self.translate(lpn).ok_or(FtlError::Unmapped(lpn))?;
        let from = self.blocks[source.block as usize].mode;
        if from == target {
            return Err(FtlError::SameMode {
                block: source.block,
                mode: from,
            });
        }
        let before = self.ledger.usable_pages_total as i64;
        let mut work = Vec::new();
        let mut conversions = Vec::new();
        let destination = self.relocate(source, target, now, &mut work, &mut conversions)?;
        Ok(MigrationReport {
            lpn,
            from,
            to: target,
            source,
            destination,
            capacity_delta_pages: self.ledger.usable_pages_total as i64 - before,
            latency: total_latency(&work),
            work,
            conversions,
        })
    }

    fn target_room_excluding(&self, mode: FlashMode, exclude: BlockId) -> u64 {
        let mut room = 0u64;
        for (lun, slots) in self.active.iter().enumerate() {
            if let Some(id) = slots[mode] {
                if id != exclude {
                    let b = &self.blocks[id as usize];
                    room += u64::from(b.pages() - b.write_pointer);
                }
            }
            let _ = lun;
        }
        room + self
            .blocks
            .iter()
            .filter(|b| b.id != exclude && b.state == BlockState::Free)
            .filter(|b| b.mode == mode || self.can_erase_into(b, mode))
            .map(|_| u64::from(self.specs[mode].pages_per_block))
            .sum::<u64>()
    }

    /// Re-program a whole block at another density. Valid pages move to
    /// blocks of the target mode first; on insufficient destination room the
    /// device is left untouched.
    pub fn convert_block(&mut self, id: BlockId, target: FlashMode, now: Nanos) -> Result<ConversionReport, FtlError> {
        let b = self.blocks.get(id as usize).ok_or(FtlError::NoSuchBlock(id))?;
        let from = b.mode;
        if from == target {
            return Err(FtlError::SameMode { block: id, mode: from });
        }
        if !conversion_allowed(from, target) {
            return Err(FtlError::NoConversionPath { from, to: target });
        }
        if !self.can_erase_into(b, target) {
            return Err(FtlError::WornOut(id));
        }
        let valid = u64::from(b.valid_count);
        if valid > self.target_room_excluding(target, id) {
            return Err(FtlError::NoDestination(target));
        }
        let before = self.ledger.usable_pages_total as i64;
        let lun = self.geometry.lun_of(id);
        if self.active[lun][from] == Some(id) {
            self.active[lun][from] = None;
            self.blocks[id as usize].state = BlockState::Full;
        }
        // keep the block out of the allocator while it is drained
        let saved_state = self.blocks[id as usize].state;
        if saved_state == BlockState::Free {
            self.blocks[id as usize].state = BlockState::Full;
        }
        let mut work = Vec::new();
        let mut conversions = Vec::new();
        let pages: Vec<u32> = (0..self.blocks[id as usize].write_pointer)
            .filter(|p| self.blocks[id as usize].valid[*p as usize])
            .collect();
        let mut relocated = 0;
        for page in pages {
            self.relocate(PhysPage { block: id, page }, target, now, &mut work, &mut conversions)?;
            relocated += 1;
        }
        if saved_state == BlockState::Free {
            self.blocks[id as usize].state = BlockState::Free;
        }
        let (w, delta) = self.erase_into(id, target, now);
        work.push(w);
        conversions.push(Conversion {
            block: id,
            from,
            to: target,
            capacity_delta_pages: delta,
        });
        Ok(ConversionReport {
            block: id,
            from,
            to: target,
            relocated,
            capacity_delta_pages: self.ledger.usable_pages_total as i64 - before,
            latency: total_latency(&work),
            work,
            conversions,
        })
    }

    pub fn victim_candidates(&self) -> impl Iterator<Item = VictimCandidate> + '_ {
        self.blocks
            .iter()
            .filter(|b| self.can_erase_into(b, b.mode))
            .map(|b| VictimCandidate {
                block: b.id,
                invalid_pages: b.invalid_count(),
                pe_cycles: b.pe_cycles,
                fully_programmed: b.state == BlockState::Full,
            })
    }

    fn low_watermark_pages(&self) -> u64 {
        (self.ledger.usable_pages_total as f64 * self.gc.low_watermark) as u64
    }

    fn high_watermark_pages(&self) -> u64 {
        (self.ledger.usable_pages_total as f64 * self.gc.high_watermark) as u64
    }

    /// Greedy GC when free pages fall under the low watermark; runs until the
    /// high watermark is reached or no victim is left.
    pub fn garbage_collect(&mut self, now: Nanos) -> GcReport {
        if self.ledger.free_pages >= self.low_watermark_pages() {
            return GcReport::default();
        }
        let target = self.high_watermark_pages();
        self.collect(now, target, false)
    }

    fn collect(&mut self, now: Nanos, target_free: u64, single: bool) -> GcReport {
        let mut report = GcReport::default();
        while self.ledger.free_pages < target_free {
            let Some(victim) = select_gc_victim(self.victim_candidates()) else {
                break;
            };
            let mode = self.blocks[victim as usize].mode;
            let pages: Vec<u32> = (0..self.blocks[victim as usize].write_pointer)
                .filter(|p| self.blocks[victim as usize].valid[*p as usize])
                .collect();
            let mut drained = true;
            for page in pages {
                match self.relocate(
                    PhysPage { block: victim, page },
                    mode,
                    now,
                    &mut report.work,
                    &mut report.conversions,
                ) {
                    Ok(_) => report.moved_pages += 1,
                    Err(_) => {
                        drained = false;
                        break;
                    }
                }
            }
            if !drained {
                break;
            }
            let (w, _) = self.erase_into(victim, mode, now);
            report.work.push(w);
            report.erased_blocks += 1;
            if single {
                break;
            }
        }
        report.latency = total_latency(&report.work);
        report
    }

    /// Ledger rebuilt from block states.
    pub fn recompute_ledger(&self) -> (u64, u64, PerMode<u32>) {
        let mut usable = 0u64;
        let mut free = 0u64;
        let mut per_mode = PerMode::from_fn(|_| 0u32);
        for b in &self.blocks {
            usable += u64::from(self.specs[b.mode].pages_per_block);
            per_mode[b.mode] += 1;
            free += match b.state {
                BlockState::Free => u64::from(b.pages()),
                _ => u64::from(b.pages() - b.write_pointer),
            };
        }
        (usable, free, per_mode)
    }

    /// Full consistency scan.
    pub fn check_invariants(&self) -> Result<(), String> {
        let (usable, free, per_mode) = self.recompute_ledger();
        if usable != self.ledger.usable_pages_total {
            return Err(format!("usable pages {} != recomputed {usable}", self.ledger.usable_pages_total));
        }
        if free != self.ledger.free_pages {
            return Err(format!("free pages {} != recomputed {free}", self.ledger.free_pages));
        }
        if per_mode != self.ledger.blocks_per_mode {
            return Err("per-mode block counts disagree".into());
        }
        let mut mapped_valid = 0u64;
        for b in &self.blocks {
            if b.pages() != self.specs[b.mode].pages_per_block {
                return Err(format!("block {} page array does not match its {} mode", b.id, b.mode));
            }
            if b.write_pointer > b.pages() {
                return Err(format!("block {} write pointer past end", b.id));
            }
            if b.pe_cycles > self.specs[b.mode].pe_limit {
                return Err(format!("block {} exceeds its P/E limit", b.id));
            }
            if b.erase_count != b.pe_cycles - b.pe_baseline {
                return Err(format!("block {} erase accounting", b.id));
            }
            let mut valid = 0;
            for p in 0..b.pages() {
                let i = p as usize;
                if b.valid[i] {
                    if p >= b.write_pointer {
                        return Err(format!("block {} page {p} valid but unprogrammed", b.id));
                    }
                    valid += 1;
                    let lpn = b.page_lpn[i];
                    let back = self.map.get(lpn as usize).copied().and_then(PhysPage::unpack);
                    if back != Some(PhysPage { block: b.id, page: p }) {
                        return Err(format!("reverse map of block {} page {p} disagrees with forward map", b.id));
                    }
                    mapped_valid += 1;
                }
            }
            if valid != b.valid_count {
                return Err(format!("block {} valid count", b.id));
            }
            if b.state == BlockState::Free && b.write_pointer != 0 {
                return Err(format!("free block {} has programmed pages", b.id));
            }
        }
        for (lpn, v) in self.map.iter().enumerate() {
            if let Some(at) = PhysPage::unpack(*v) {
                let b = &self.blocks[at.block as usize];
                if !b.valid[at.page as usize] || b.page_lpn[at.page as usize] != lpn as u64 {
                    return Err(format!("lpn {lpn} maps to an invalid page"));
                }
            }
        }
        if mapped_valid != self.mapped_pages() {
            return Err("valid page count differs from mapped count".into());
        }
        for (lun, slots) in self.active.iter().enumerate() {
            for mode in FlashMode::ALL {
                if let Some(id) = slots[mode] {
                    let b = &self.blocks[id as usize];
                    if b.mode != mode || b.state != BlockState::Active || self.geometry.lun_of(id) != lun {
                        return Err(format!("active slot {lun}/{mode} holds inconsistent block {id}"));
                    }
                }
            }
        }
        Ok(())
    }
}
