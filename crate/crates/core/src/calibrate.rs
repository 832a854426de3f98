//! Fitting QLC RBER coefficients to per-stage retry ranges.
//!
//! Raw error bits are linear in a common scale of all coefficients, so the
//! search runs over curve shapes (wear exponent, base share, disturb share
//! and exponent) and places each shape analytically inside the target bands.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::RETRY_BUCKETS;
use crate::flash::{
    FlashMode, ModeSpec, PageCondition, PerMode, RberParams, ReliabilityModel, ReliabilityStage, RetryParams,
    SLC_RBER_SCALE, TLC_RBER_SCALE,
};
use crate::ftl::{Ftl, Geometry};
use crate::policy::PerStage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryRange {
    pub lo: u32,
    pub hi: u32,
}

impl RetryRange {
    pub const fn new(lo: u32, hi: u32) -> Self {
        RetryRange { lo, hi }
    }

    pub fn contains(&self, retries: u32) -> bool {
        (self.lo..=self.hi).contains(&retries)
    }

    /// Raw-bit interval whose retry counts land in this range.
    fn raw_bounds(&self, retry: &RetryParams) -> (f64, f64) {
        let lo = if self.lo == 0 {
            0.0
        } else {
            retry.e_ldpc / (1.0 - retry.delta).powi(self.lo as i32 - 1)
        };
        (lo, retry.e_ldpc / (1.0 - retry.delta).powi(self.hi as i32))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationTargets {
    pub ranges: PerStage<RetryRange>,
    /// Where most pages should sit; the fit centres each stage's median here.
    pub central: PerStage<RetryRange>,
    /// Required share of pages inside the range, per stage.
    pub coverage: f64,
    /// Wear exponent at least 1 and stage ranges centred in increasing order.
    pub monotone_wear: bool,
}

impl Default for CalibrationTargets {
    fn default() -> Self {
        CalibrationTargets {
            ranges: PerStage {
                young: RetryRange::new(1, 10),
                middle: RetryRange::new(5, 13),
                old: RetryRange::new(11, 16),
            },
            central: PerStage {
                young: RetryRange::new(4, 9),
                middle: RetryRange::new(7, 12),
                old: RetryRange::new(11, 16),
            },
            coverage: 0.95,
            monotone_wear: true,
        }
    }
}

impl CalibrationTargets {
    pub fn validate(&self) -> Result<(), CalibrationError> {
        for stage in ReliabilityStage::ALL {
            for (name, r) in [("ranges", self.ranges[stage]), ("central", self.central[stage])] {
                if r.lo > r.hi {
                    return Err(CalibrationError::Invalid(format!(
                        "{name}.{stage}: lo {} exceeds hi {}",
                        r.lo, r.hi
                    )));
                }
            }
        }
        if !(self.coverage > 0.0 && self.coverage <= 1.0) {
            return Err(CalibrationError::Invalid("coverage must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSampling {
    pub pages_per_stage: u32,
    /// Reads-since-erase are drawn uniformly from `0..=max_reads`.
    pub max_reads: u64,
    /// Read-disturb term after `max_reads` reads, relative to the wear term.
    /// Retry histograms at one read count cannot separate the two, so this
    /// is an input rather than a fitted value.
    pub disturb_share: f64,
    pub seed: u64,
}

impl Default for CalibrationSampling {
    fn default() -> Self {
        CalibrationSampling {
            pages_per_stage: 4096,
            max_reads: 1_000,
            disturb_share: 0.05,
            seed: 7,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalibrationError {
    #[error("invalid calibration input: {0}")]
    Invalid(String),
    #[error("targets not reachable; closest fit covers young {:.1}% [{}..{}], middle {:.1}% [{}..{}], old {:.1}% [{}..{}]",
        .coverage.young * 100.0, .achieved.young.lo, .achieved.young.hi,
        .coverage.middle * 100.0, .achieved.middle.lo, .achieved.middle.hi,
        .coverage.old * 100.0, .achieved.old.lo, .achieved.old.hi)]
    Infeasible {
        /// Central 95% of retry counts per stage for the closest fit.
        achieved: PerStage<RetryRange>,
        coverage: PerStage<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub params: RberParams,
    /// Analytic coverage over the sampled pages.
    pub coverage: PerStage<f64>,
    pub achieved: PerStage<RetryRange>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verification {
    /// Read counts per retry value from a short simulated read pass.
    pub histograms: PerStage<Vec<u64>>,
    pub coverage: PerStage<f64>,
}

struct Sample {
    block: u32,
    page: u32,
    reads: u64,
}

fn samples(model: &ReliabilityModel, spec: &ModeSpec, stage: ReliabilityStage, cfg: &CalibrationSampling) -> Vec<Sample> {
    let stage_salt = stage as u64 + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ model.variation.seed.rotate_left(17) ^ (stage_salt << 56));
    (0..cfg.pages_per_stage)
        .map(|i| Sample {
            block: i / spec.pages_per_block,
            page: i % spec.pages_per_block,
            reads: rng.gen_range(0..=cfg.max_reads),
        })
        .collect()
}

fn raw_values(
    params: &RberParams,
    model: &ReliabilityModel,
    spec: &ModeSpec,
    pe: u32,
    pages: &[Sample],
) -> Vec<f64> {
    let mut m = model.clone();
    m.rber[FlashMode::Qlc] = *params;
    pages
        .iter()
        .map(|s| {
            let cond = PageCondition {
                pe_cycles: pe,
                retention_hours: 0.0,
                reads_since_erase: s.reads,
            };
            m.raw_bits(FlashMode::Qlc, spec, cond, s.block, s.page)
        })
        .collect()
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn central_range(retries: &mut [u32]) -> RetryRange {
    retries.sort_unstable();
    let n = retries.len();
    let lo = retries[((n - 1) as f64 * 0.025).round() as usize];
    let hi = retries[((n - 1) as f64 * 0.975).round() as usize];
    RetryRange::new(lo, hi)
}

fn shape_grid(monotone: bool) -> Vec<(f64, f64)> {
    let mut ks: Vec<f64> = (10..=40).map(|i| f64::from(i) / 10.0).collect();
    if !monotone {
        ks.splice(0..0, [0.0, 0.25, 0.5, 0.75]);
    }
    let base_shares = [0.0, 0.25, 0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 8.0];
    let mut grid = Vec::new();
    for &k in &ks {
        for &e in &base_shares {
            grid.push((k, e));
        }
    }
    grid
}

/// Continuous retry position of a raw-bit value; its ceiling is the count.
fn retry_position(raw: f64, retry: &RetryParams) -> f64 {
    (raw / retry.e_ldpc).ln() / (1.0 / (1.0 - retry.delta)).ln()
}

/// Small-magnitude coefficients for one grid shape; the fit multiplies them.
fn unit_params(k: f64, base_share: f64, rho: f64, mids: &PerStage<u32>, max_reads: u64) -> RberParams {
    let alpha = 1e-6 / f64::from(mids.old.max(1)).powf(k);
    RberParams {
        epsilon: base_share * alpha * f64::from(mids.young).powf(k),
        alpha_wear: alpha,
        k,
        beta: 0.0,
        m: 1.0,
        n: 1.0,
        gamma: rho * alpha / max_reads.max(1) as f64,
        p: k,
        q: 1.0,
    }
}

/// Search for QLC coefficients meeting `targets` under `model`'s retry and
/// variation settings.
pub fn calibrate(
    targets: &CalibrationTargets,
    sampling: &CalibrationSampling,
    model: &ReliabilityModel,
    spec: &ModeSpec,
) -> Result<Calibration, CalibrationError> {
    targets.validate()?;
    if sampling.pages_per_stage == 0 {
        return Err(CalibrationError::Invalid("pages_per_stage must be > 0".into()));
    }
    if !(sampling.disturb_share >= 0.0 && sampling.disturb_share.is_finite()) {
        return Err(CalibrationError::Invalid("disturb_share must be >= 0".into()));
    }
    model.validate().map_err(CalibrationError::Invalid)?;
    let pages = PerStage::from_fn(|s| samples(model, spec, s, sampling));
    let mids = PerStage::from_fn(|s| s.midpoint(spec.pe_limit));
    let bounds = PerStage::from_fn(|s| targets.ranges[s].raw_bounds(&model.retry));

    let mut best: Option<((f64, f64, f64), Calibration)> = None;
    for (k, e) in shape_grid(targets.monotone_wear) {
        let unit = unit_params(k, e, sampling.disturb_share, &mids, sampling.max_reads);
        let raws = PerStage::from_fn(|s| {
            let mut v = raw_values(&unit, model, spec, mids[s], &pages[s]);
            v.sort_by(f64::total_cmp);
            v
        });
        // Place ln(scale) midway between the tightest lower and upper bounds.
        let mut upper = f64::INFINITY;
        let mut lower = f64::NEG_INFINITY;
        for s in ReliabilityStage::ALL {
            let (lo, hi) = bounds[s];
            let top = quantile(&raws[s], 0.975);
            let bottom = quantile(&raws[s], 0.025);
            if top > 0.0 {
                upper = upper.min((hi / top).ln());
            }
            if lo > 0.0 && bottom > 0.0 {
                lower = lower.max((lo / bottom).ln());
            }
        }
        let x = match (lower.is_finite(), upper.is_finite()) {
            (true, true) => (lower + upper) / 2.0,
            (true, false) => lower,
            (false, true) => upper,
            (false, false) => 0.0,
        };
        let margin = if lower.is_finite() && upper.is_finite() { (upper - lower) / 2.0 } else { 0.0 };
        let params = unit.scaled(x.exp());
        let (coverage, achieved) = evaluate(&params, targets, model, spec, &pages, &mids);
        let worst = ReliabilityStage::ALL.iter().map(|s| coverage[*s]).fold(f64::INFINITY, f64::min);
        // Among acceptable fits prefer medians near the middle of the central ranges.
        let scale = x.exp();
        let off_centre: f64 = ReliabilityStage::ALL
            .iter()
            .map(|&s| {
                let r = targets.central[s];
                let centre = (f64::from(r.lo) - 1.0 + f64::from(r.hi)) / 2.0;
                (retry_position(quantile(&raws[s], 0.5) * scale, &model.retry) - centre).powi(2)
            })
            .sum();
        let score = (worst.min(targets.coverage), -off_centre, margin);
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, Calibration { params, coverage, achieved }));
        }
    }
    let ((worst, _, _), fit) = best.expect("grid is never empty");
    let centres = PerStage::from_fn(|s| targets.ranges[s].lo + targets.ranges[s].hi);
    let increasing = centres.young < centres.middle && centres.middle < centres.old;
    if worst + 1e-12 < targets.coverage || (targets.monotone_wear && !increasing) {
        return Err(CalibrationError::Infeasible {
            achieved: fit.achieved,
            coverage: fit.coverage,
        });
    }
    Ok(fit)
}

fn evaluate(
    params: &RberParams,
    targets: &CalibrationTargets,
    model: &ReliabilityModel,
    spec: &ModeSpec,
    pages: &PerStage<Vec<Sample>>,
    mids: &PerStage<u32>,
) -> (PerStage<f64>, PerStage<RetryRange>) {
    let mut coverage = PerStage::from_fn(|_| 0.0);
    let mut achieved = PerStage::from_fn(|_| RetryRange::new(0, 0));
    for s in ReliabilityStage::ALL {
        let mut retries: Vec<u32> = raw_values(params, model, spec, mids[s], &pages[s])
            .into_iter()
            .map(|raw| model.retry.retry_count(raw))
            .collect();
        let inside = retries.iter().filter(|r| targets.ranges[s].contains(**r)).count();
        coverage.set(s, inside as f64 / retries.len() as f64);
        achieved.set(s, central_range(&mut retries));
    }
    (coverage, achieved)
}

/// Coefficients for every mode derived from fitted QLC ones.
pub fn per_mode_params(qlc: RberParams) -> PerMode<RberParams> {
    PerMode {
        slc: qlc.scaled(SLC_RBER_SCALE),
        tlc: qlc.scaled(TLC_RBER_SCALE),
        qlc,
    }
}

/// TOML fragment that can be pasted into an experiment config.
pub fn config_fragment(qlc: RberParams) -> String {
    #[derive(Serialize)]
    struct Reliability {
        rber: PerMode<RberParams>,
    }
    #[derive(Serialize)]
    struct Fragment {
        reliability: Reliability,
    }
    toml::to_string(&Fragment {
        reliability: Reliability {
            rber: per_mode_params(qlc),
        },
    })
    .expect("plain numbers always serialize")
}

/// Age a small QLC device to each stage midpoint and read it at random until
/// every block has seen about `sampling.max_reads` reads; histogram the
/// retry counts the FTL reports.
pub fn verify(
    model: &ReliabilityModel,
    specs: &PerMode<ModeSpec>,
    targets: &CalibrationTargets,
    sampling: &CalibrationSampling,
) -> Result<Verification, CalibrationError> {
    targets.validate()?;
    let spec = specs[FlashMode::Qlc];
    let blocks = sampling.pages_per_stage.div_ceil(spec.pages_per_block).max(1) + 1;
    let geometry = Geometry {
        channels: 1,
        luns_per_channel: 1,
        planes_per_lun: 1,
        blocks_per_plane: blocks,
        page_size_kib: 16,
    };
    let mut histograms = PerStage::from_fn(|_| vec![0u64; RETRY_BUCKETS]);
    let mut coverage = PerStage::from_fn(|_| 0.0);
    for stage in ReliabilityStage::ALL {
        let mut ftl = Ftl::new(geometry, *specs, model.clone(), FlashMode::Qlc, None).map_err(CalibrationError::Invalid)?;
        let pages = u64::from(sampling.pages_per_stage);
        for lpn in 0..pages {
            ftl.host_write(lpn, lpn, 0).map_err(|e| CalibrationError::Invalid(e.to_string()))?;
        }
        ftl.set_wear(stage.midpoint(spec.pe_limit));
        let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed.wrapping_add(stage as u64));
        let total = sampling.max_reads * u64::from(sampling.pages_per_stage.div_ceil(spec.pages_per_block));
        let hist = &mut histograms[stage];
        let mut inside = 0u64;
        for _ in 0..total {
            let lpn = rng.gen_range(0..pages);
            if let Ok(Some(ev)) = ftl.host_read(lpn, 0) {
                hist[(ev.retries as usize).min(RETRY_BUCKETS - 1)] += 1;
                if targets.ranges[stage].contains(ev.retries) {
                    inside += 1;
                }
            }
        }
        coverage.set(stage, inside as f64 / total.max(1) as f64);
    }
    Ok(Verification { histograms, coverage })
}
