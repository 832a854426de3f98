#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use raro_core::flash::default_mode_specs;
use raro_core::ftl::Conversion;
use raro_core::{FlashMode, Ftl, Geometry, ReliabilityModel};

/// Two LUNs of eight blocks with full-size pages per block, so every
/// conversion moves capacity by the real per-block quantum.
pub fn tiny_geometry() -> Geometry {
    Geometry {
        channels: 1,
        luns_per_channel: 2,
        planes_per_lun: 1,
        blocks_per_plane: 8,
        page_size_kib: 16,
    }
}

pub fn tiny_ftl(logical_pages: u64) -> Ftl {
    Ftl::new(
        tiny_geometry(),
        default_mode_specs(),
        ReliabilityModel::default(),
        FlashMode::Qlc,
        Some(logical_pages),
    )
    .unwrap()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct InterleavingCounts {
    pub writes: u64,
    pub reads: u64,
    pub migrations: u64,
    pub conversions: u64,
    pub gc_runs: u64,
    pub rejected: u64,
}

fn expected_delta(c: &Conversion) -> i64 {
    let specs = default_mode_specs();
    i64::from(specs[c.to].pages_per_block) - i64::from(specs[c.from].pages_per_block)
}

struct Shadow {
    tokens: Vec<Option<u64>>,
    usable: i64,
}

impl Shadow {
    fn absorb(&mut self, conversions: &[Conversion]) -> Result<i64, String> {
        let mut sum = 0;
        for c in conversions {
            if c.capacity_delta_pages != expected_delta(c) {
                return Err(format!(
                    "{} -> {} on block {} moved capacity by {} pages",
                    c.from, c.to, c.block, c.capacity_delta_pages
                ));
            }
            sum += c.capacity_delta_pages;
        }
        self.usable += sum;
        Ok(sum)
    }
}

fn check_lpn(ftl: &mut Ftl, shadow: &Shadow, lpn: u64) -> Result<(), String> {
    let got = ftl.host_read(lpn, 0).map_err(|e| e.to_string())?.map(|r| r.token);
    if got != shadow.tokens[lpn as usize] {
        return Err(format!("lpn {lpn} reads {got:?}, expected {:?}", shadow.tokens[lpn as usize]));
    }
    Ok(())
}

fn full_check(ftl: &mut Ftl, shadow: &Shadow) -> Result<(), String> {
    ftl.check_invariants()?;
    if ftl.ledger().usable_pages_total as i64 != shadow.usable {
        return Err(format!(
            "ledger holds {} usable pages, conversions add up to {}",
            ftl.ledger().usable_pages_total,
            shadow.usable
        ));
    }
    for lpn in 0..shadow.tokens.len() as u64 {
        check_lpn(ftl, shadow, lpn)?;
    }
    let mapped = shadow.tokens.iter().filter(|t| t.is_some()).count() as u64;
    if ftl.mapped_pages() != mapped {
        return Err(format!("{} pages mapped, {mapped} written", ftl.mapped_pages()));
    }
    Ok(())
}

/// Random writes, reads, page migrations, block conversions and GC runs
/// against a shadow copy of every token and of the capacity ledger.
pub fn run_interleaving(seed: u64, ops: u64) -> Result<InterleavingCounts, String> {
    let logical = 8 * 1024;
    let mut ftl = tiny_ftl(logical);
    let blocks = tiny_geometry().block_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shadow = Shadow {
        tokens: vec![None; logical as usize],
        usable: ftl.ledger().usable_pages_total as i64,
    };
    let mut counts = InterleavingCounts::default();
    let mut next_token = 1u64;
    // Keep the hot region small so reads and migrations hit mapped pages.
    let hot = logical / 4;
    for op in 0..ops {
        let lpn = if rng.gen_bool(0.7) { rng.gen_range(0..hot) } else { rng.gen_range(0..logical) };
        let roll: f64 = rng.gen();
        let at = |e: String| format!("seed {seed} op {op}: {e}");
        if roll < 0.40 {
            match ftl.host_write(lpn, next_token, op) {
                Ok(ev) => {
                    shadow.absorb(&ev.conversions).map_err(at)?;
                    shadow.tokens[lpn as usize] = Some(next_token);
                    counts.writes += 1;
                }
                Err(_) => counts.rejected += 1,
            }
            next_token += 1;
        } else if roll < 0.75 {
            check_lpn(&mut ftl, &shadow, lpn).map_err(at)?;
            counts.reads += 1;
        } else if roll < 0.90 {
            let target = FlashMode::ALL[rng.gen_range(0..3)];
            match ftl.migrate_page(lpn, target, op) {
                Ok(report) => {
                    let sum = shadow.absorb(&report.conversions).map_err(at)?;
                    if sum != report.capacity_delta_pages {
                        return Err(at(format!(
                            "migration reports {} pages, its conversions {sum}",
                            report.capacity_delta_pages
                        )));
                    }
                    if ftl.mode_of(lpn) != Some(target) {
                        return Err(at(format!("lpn {lpn} not in {target} after migration")));
                    }
                    counts.migrations += 1;
                }
                Err(_) => counts.rejected += 1,
            }
        } else if roll < 0.95 {
            let block = rng.gen_range(0..blocks);
            let target = FlashMode::ALL[rng.gen_range(0..3)];
            match ftl.convert_block(block, target, op) {
                Ok(report) => {
                    let sum = shadow.absorb(&report.conversions).map_err(at)?;
                    if sum != report.capacity_delta_pages {
                        return Err(at(format!(
                            "conversion reports {} pages, its conversions {sum}",
                            report.capacity_delta_pages
                        )));
                    }
                    counts.conversions += 1;
                }
                Err(_) => counts.rejected += 1,
            }
        } else {
            let report = ftl.garbage_collect(op);
            shadow.absorb(&report.conversions).map_err(at)?;
            counts.gc_runs += 1;
        }
        // Block-mode uniformity is part of check_invariants.
        if op % 10_000 == 9_999 {
            full_check(&mut ftl, &shadow).map_err(|e| format!("seed {seed} after op {op}: {e}"))?;
        }
    }
    full_check(&mut ftl, &shadow).map_err(|e| format!("seed {seed} at end: {e}"))?;
    Ok(counts)
}
