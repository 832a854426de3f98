//! Flash reliability model.
//!
//! Everything in here is a pure function of its inputs: raw bit error rate as
//! a function of wear, retention and read disturb, the number of read retries
//! needed to bring a codeword under the LDPC correction limit, reliability
//! stage classification and retry-inflated read latency.

use std::fmt;
use std::ops::{Index, IndexMut};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Simulated time and durations, in nanoseconds.
pub type Nanos = u64;

pub const NANOS_PER_MICRO: Nanos = 1_000;
pub const NANOS_PER_HOUR: f64 = 3.6e12;

/// Largest value an RBER evaluation may return.
pub const RBER_CEILING: f64 = 0.499_999_999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlashMode {
    Slc,
    Tlc,
    Qlc,
}

impl FlashMode {
    pub const ALL: [FlashMode; 3] = [FlashMode::Slc, FlashMode::Tlc, FlashMode::Qlc];

    pub fn bits_per_cell(self) -> u32 {
        match self {
            FlashMode::Slc => 1,
            FlashMode::Tlc => 3,
            FlashMode::Qlc => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FlashMode::Slc => "SLC",
            FlashMode::Tlc => "TLC",
            FlashMode::Qlc => "QLC",
        }
    }
}

impl fmt::Display for FlashMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlashMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "slc" => Ok(FlashMode::Slc),
            "tlc" => Ok(FlashMode::Tlc),
            "qlc" => Ok(FlashMode::Qlc),
            other => Err(format!("unknown flash mode `{other}`")),
        }
    }
}

/// One value per flash mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerMode<T> {
    pub slc: T,
    pub tlc: T,
    pub qlc: T,
}

impl<T> PerMode<T> {
    pub fn from_fn(mut f: impl FnMut(FlashMode) -> T) -> Self {
        PerMode {
            slc: f(FlashMode::Slc),
            tlc: f(FlashMode::Tlc),
            qlc: f(FlashMode::Qlc),
        }
    }
}

impl<T> Index<FlashMode> for PerMode<T> {
    type Output = T;

    fn index(&self, mode: FlashMode) -> &T {
        match mode {
            FlashMode::Slc => &self.slc,
            FlashMode::Tlc => &self.tlc,
            FlashMode::Qlc => &self.qlc,
        }
    }
}

impl<T> IndexMut<FlashMode> for PerMode<T> {
    fn index_mut(&mut self, mode: FlashMode) -> &mut T {
        match mode {
            FlashMode::Slc => &mut self.slc,
            FlashMode::Tlc => &mut self.tlc,
            FlashMode::Qlc => &mut self.qlc,
        }
    }
}

/// Per-mode device constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSpec {
    pub bits_per_cell: u32,
    pub pages_per_block: u32,
    pub read_latency_us: u64,
    pub write_latency_us: u64,
    pub erase_latency_ms: u64,
    pub pe_limit: u32,
    /// Mean reference-voltage comparisons per logical page read.
    pub n_sense: f64,
}

impl ModeSpec {
    pub fn default_for(mode: FlashMode) -> Self {
        match mode {
            FlashMode::Slc => ModeSpec {
                bits_per_cell: 1,
                pages_per_block: 256,
                read_latency_us: 20,
                write_latency_us: 160,
                erase_latency_ms: 2,
                pe_limit: 100_000,
                n_sense: 1.0,
            },
            FlashMode::Tlc => ModeSpec {
                bits_per_cell: 3,
                pages_per_block: 768,
                read_latency_us: 66,
                write_latency_us: 730,
                erase_latency_ms: 3,
                pe_limit: 3_000,
                n_sense: 7.0 / 3.0,
            },
            FlashMode::Qlc => ModeSpec {
                bits_per_cell: 4,
                pages_per_block: 1024,
                read_latency_us: 140,
                write_latency_us: 3102,
                erase_latency_ms: 10,
                pe_limit: 1_000,
                n_sense: 15.0 / 4.0,
            },
        }
    }

    pub fn read_ns(&self) -> Nanos {
        self.read_latency_us * NANOS_PER_MICRO
    }

    pub fn write_ns(&self) -> Nanos {
        self.write_latency_us * NANOS_PER_MICRO
    }

    pub fn erase_ns(&self) -> Nanos {
        self.erase_latency_ms * 1_000 * NANOS_PER_MICRO
    }
}

pub fn default_mode_specs() -> PerMode<ModeSpec> {
    PerMode::from_fn(ModeSpec::default_for)
}

/// Coefficients of the wear / retention / disturb RBER model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RberParams {
    pub epsilon: f64,
    pub alpha_wear: f64,
    pub k: f64,
    pub beta: f64,
    pub m: f64,
    pub n: f64,
    pub gamma: f64,
    pub p: f64,
    pub q: f64,
}

impl RberParams {
    /// Raw bit error rate after `cycles` P/E cycles, `hours` of retention and
    /// `reads` reads since the last erase.
    pub fn rber(&self, cycles: f64, hours: f64, reads: f64) -> f64 {
        let wear = self.alpha_wear * cycles.powf(self.k);
        let retention = self.beta * cycles.powf(self.m) * hours.powf(self.n);
        let disturb = self.gamma * cycles.powf(self.p) * reads.powf(self.q);
        let total = self.epsilon + wear + retention + disturb;
        if total.is_nan() {
            return RBER_CEILING;
        }
        total.clamp(0.0, RBER_CEILING)
    }

    /// Every coefficient multiplied by `factor`, exponents untouched.
    pub fn scaled(&self, factor: f64) -> Self {
        RberParams {
            epsilon: self.epsilon * factor,
            alpha_wear: self.alpha_wear * factor,
            beta: self.beta * factor,
            gamma: self.gamma * factor,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let coefficients = [
            ("epsilon", self.epsilon),
            ("alpha_wear", self.alpha_wear),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ];
        for (name, v) in coefficients {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be a finite value >= 0"));
            }
        }
        for (name, v) in [("k", self.k), ("m", self.m), ("n", self.n), ("p", self.p), ("q", self.q)] {
            if !v.is_finite() {
                return Err(format!("{name} must be finite"));
            }
        }
        Ok(())
    }

    /// Fitted QLC coefficients (see `calibrate`).
    pub fn default_qlc() -> Self {
        RberParams {
            epsilon: 0.007837240823233145,
            alpha_wear: 7.565285486486594e-9,
            k: 2.3,
            beta: 0.0,
            m: 1.0,
            n: 1.0,
            gamma: 3.7826427432432974e-13,
            p: 2.3,
            q: 1.0,
        }
    }
}

/// Ratio of TLC-mode coefficients to the QLC ones.
pub const TLC_RBER_SCALE: f64 = 0.05;
/// Ratio of SLC-mode coefficients to the QLC ones.
pub const SLC_RBER_SCALE: f64 = 0.001;

pub fn default_rber_params() -> PerMode<RberParams> {
    let qlc = RberParams::default_qlc();
    PerMode {
        slc: qlc.scaled(SLC_RBER_SCALE),
        tlc: qlc.scaled(TLC_RBER_SCALE),
        qlc,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetryParams {
    /// Adjacent-state error weight.
    pub alpha_sense: f64,
    /// Fraction of raw errors removed by each retry.
    pub delta: f64,
    /// Correctable bits per codeword.
    pub e_ldpc: f64,
    pub codeword_bits: u32,
}

impl Default for RetryParams {
    fn default() -> Self {
        RetryParams {
            alpha_sense: 1.0,
            delta: 0.2,
            e_ldpc: 72.0,
            codeword_bits: 8192,
        }
    }
}

impl RetryParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err("delta must lie in (0, 1)".into());
        }
        if !(self.e_ldpc > 0.0 && self.e_ldpc.is_finite()) {
            return Err("e_ldpc must be > 0".into());
        }
        if self.codeword_bits == 0 {
            return Err("codeword_bits must be > 0".into());
        }
        if !(self.alpha_sense > 0.0 && self.alpha_sense.is_finite()) {
            return Err("alpha_sense must be > 0".into());
        }
        Ok(())
    }

    /// Expected raw error bits in one codeword.
    pub fn expected_error_bits(&self, rber: f64, n_sense: f64) -> f64 {
        self.alpha_sense * rber * n_sense * f64::from(self.codeword_bits)
    }

    /// Error bits left after `retries` retries.
    pub fn residual_bits(&self, raw_bits: f64, retries: u32) -> f64 {
        raw_bits * (1.0 - self.delta).powi(retries as i32)
    }

    /// Smallest retry count that brings `raw_bits` under the correction limit.
    pub fn retry_count(&self, raw_bits: f64) -> u32 {
        if raw_bits <= self.e_ldpc {
            return 0;
        }
        let estimate = ((self.e_ldpc / raw_bits).ln() / (1.0 - self.delta).ln()).ceil();
        let mut n = if estimate.is_finite() && estimate >= 1.0 {
            estimate.min(f64::from(u16::MAX)) as u32
        } else {
            1
        };
        // The logarithm can land one off at exact ties.
        while self.residual_bits(raw_bits, n) > self.e_ldpc {
            n += 1;
        }
        while n > 1 && self.residual_bits(raw_bits, n - 1) <= self.e_ldpc {
            n -= 1;
        }
        n
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReliabilityStage {
    Young,
    Middle,
    Old,
}

impl ReliabilityStage {
    pub const ALL: [ReliabilityStage; 3] =
        [ReliabilityStage::Young, ReliabilityStage::Middle, ReliabilityStage::Old];

    /// Stage of a block with `pe_cycles` in a mode whose endurance is `pe_limit`.
    /// The limit is split into three equal bands.
    pub fn classify(pe_cycles: u32, pe_limit: u32) -> Self {
        let third = pe_limit / 3;
        if pe_cycles <= third {
            ReliabilityStage::Young
        } else if pe_cycles <= 2 * third {
            ReliabilityStage::Middle
        } else {
            ReliabilityStage::Old
        }
    }

    /// Inclusive P/E range of the stage.
    pub fn pe_range(self, pe_limit: u32) -> (u32, u32) {
        let third = pe_limit / 3;
        match self {
            ReliabilityStage::Young => (0, third),
            ReliabilityStage::Middle => (third + 1, 2 * third),
            ReliabilityStage::Old => (2 * third + 1, pe_limit),
        }
    }

    pub fn midpoint(self, pe_limit: u32) -> u32 {
        let (lo, hi) = self.pe_range(pe_limit);
        (lo + hi).div_ceil(2)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReliabilityStage::Young => "young",
            ReliabilityStage::Middle => "middle",
            ReliabilityStage::Old => "old",
        }
    }
}

impl fmt::Display for ReliabilityStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReliabilityStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "young" => Ok(ReliabilityStage::Young),
            "middle" => Ok(ReliabilityStage::Middle),
            "old" => Ok(ReliabilityStage::Old),
            other => Err(format!("unknown reliability stage `{other}`")),
        }
    }
}

pub fn reliability_stage(pe_cycles: u32, spec: &ModeSpec) -> ReliabilityStage {
    ReliabilityStage::classify(pe_cycles, spec.pe_limit)
}

/// Each retry re-senses the whole page.
pub fn read_latency_with_retries(spec: &ModeSpec, retries: u32) -> Nanos {
    (1 + u64::from(retries)) * spec.read_ns()
}

/// Deterministic per-page multiplier on expected error bits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PageVariation {
    pub seed: u64,
    pub min: f64,
    pub max: f64,
}

impl Default for PageVariation {
    fn default() -> Self {
        PageVariation {
            seed: 0x5eed_f1a5,
            min: 0.5,
            max: 1.5,
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

impl PageVariation {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.min > 0.0 && self.min <= self.max && self.max.is_finite()) {
            return Err("page variation requires 0 < min <= max".into());
        }
        Ok(())
    }

    pub fn factor(&self, block_id: u32, page_index: u32) -> f64 {
        let key = (u64::from(block_id) << 32) | u64::from(page_index);
        let h = splitmix64(splitmix64(self.seed) ^ key);
        // 53 high bits -> uniform in [0, 1)
        let unit = (h >> 11) as f64 / (1u64 << 53) as f64;
        self.min + unit * (self.max - self.min)
    }
}

pub fn page_variation_factor(variation: &PageVariation, block_id: u32, page_index: u32) -> f64 {
    variation.factor(block_id, page_index)
}

/// Wear, retention and disturb inputs for one page.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PageCondition {
    pub pe_cycles: u32,
    pub retention_hours: f64,
    pub reads_since_erase: u64,
}

/// Everything needed to turn a page's condition into a retry count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReliabilityModel {
    pub rber: PerMode<RberParams>,
    pub retry: RetryParams,
    pub variation: PageVariation,
    /// Multiplier applied to simulated time before it enters the retention term.
    pub retention_scale: f64,
}

impl Default for ReliabilityModel {
    fn default() -> Self {
        ReliabilityModel {
            rber: default_rber_params(),
            retry: RetryParams::default(),
            variation: PageVariation::default(),
            retention_scale: 1.0,
        }
    }
}

impl ReliabilityModel {
    pub fn validate(&self) -> Result<(), String> {
        for mode in FlashMode::ALL {
            self.rber[mode]
                .validate()
                .map_err(|e| format!("rber.{}: {e}", mode.as_str().to_lowercase()))?;
        }
        self.retry.validate()?;
        self.variation.validate()?;
        if !(self.retention_scale >= 0.0 && self.retention_scale.is_finite()) {
            return Err("retention_scale must be >= 0".into());
        }
        Ok(())
    }

    pub fn raw_bits(
        &self,
        mode: FlashMode,
        spec: &ModeSpec,
        cond: PageCondition,
        block_id: u32,
        page_index: u32,
    ) -> f64 {
        let rber = self.rber[mode].rber(
            f64::from(cond.pe_cycles),
            cond.retention_hours * self.retention_scale,
            cond.reads_since_erase as f64,
        );
        self.retry.expected_error_bits(rber, spec.n_sense) * self.variation.factor(block_id, page_index)
    }

    pub fn page_retries(
        &self,
        mode: FlashMode,
        spec: &ModeSpec,
        cond: PageCondition,
        block_id: u32,
        page_index: u32,
    ) -> u32 {
        self.retry
            .retry_count(self.raw_bits(mode, spec, cond, block_id, page_index))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn only_epsilon(eps: f64) -> RberParams {
        RberParams {
            epsilon: eps,
            alpha_wear: 3.0,
            k: 2.0,
            beta: 5.0,
            m: 1.0,
            n: 1.0,
            gamma: 7.0,
            p: 1.0,
            q: 1.0,
        }
    }

    #[test]
    fn rber_at_origin_is_epsilon() {
        assert_eq!(only_epsilon(1e-4).rber(0.0, 0.0, 0.0), 1e-4);
    }

    #[test]
    fn rber_linear_wear_term() {
        let params = RberParams {
            epsilon: 0.0,
            alpha_wear: 1e-7,
            k: 1.0,
            beta: 0.0,
            m: 1.0,
            n: 1.0,
            gamma: 0.0,
            p: 1.0,
            q: 1.0,
        };
        assert!((params.rber(1000.0, 0.0, 0.0) - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn rber_clamps_below_one_half() {
        let r = only_epsilon(0.0).rber(1e6, 1e6, 1e9);
        assert!(r < 0.5 && r > 0.49);
        let params = RberParams { k: f64::INFINITY, ..only_epsilon(0.0) };
        assert!(params.rber(2.0, 0.0, 0.0) < 0.5);
    }

    #[test]
    fn expected_error_bits_examples() {
        let retry = RetryParams::default();
        assert_eq!(retry.expected_error_bits(0.0, 4.0), 0.0);
        assert_eq!(retry.expected_error_bits(72.0 / 8192.0, 1.0), 72.0);
        let half = RetryParams { alpha_sense: 0.5, ..retry };
        assert!((half.expected_error_bits(0.0469, 3.75) - 720.0).abs() < 0.5);
    }

    #[test]
    fn retry_count_examples() {
        let retry = RetryParams::default();
        assert_eq!(retry.retry_count(50.0), 0);
        assert_eq!(retry.retry_count(72.0), 0);
        assert_eq!(retry.retry_count(720.0), 11);
        let halving = RetryParams { delta: 0.5, ..retry };
        assert_eq!(halving.retry_count(144.0), 1);
        assert_eq!(halving.retry_count(145.0), 2);
    }

    #[test]
    fn qlc_stage_boundaries() {
        let qlc = ModeSpec::default_for(FlashMode::Qlc);
        assert_eq!(reliability_stage(100, &qlc), ReliabilityStage::Young);
        assert_eq!(reliability_stage(333, &qlc), ReliabilityStage::Young);
        assert_eq!(reliability_stage(334, &qlc), ReliabilityStage::Middle);
        assert_eq!(reliability_stage(666, &qlc), ReliabilityStage::Middle);
        assert_eq!(reliability_stage(667, &qlc), ReliabilityStage::Old);
        assert_eq!(reliability_stage(1000, &qlc), ReliabilityStage::Old);
        let mids: Vec<u32> = ReliabilityStage::ALL.iter().map(|s| s.midpoint(1000)).collect();
        assert_eq!(mids, vec![167, 500, 834]);
    }

    #[test]
    fn tlc_stages_split_limit_in_thirds() {
        let tlc = ModeSpec::default_for(FlashMode::Tlc);
        assert_eq!(reliability_stage(1000, &tlc), ReliabilityStage::Young);
        assert_eq!(reliability_stage(1001, &tlc), ReliabilityStage::Middle);
        assert_eq!(reliability_stage(2001, &tlc), ReliabilityStage::Old);
    }

    #[test]
    fn qlc_retry_latency() {
        let qlc = ModeSpec::default_for(FlashMode::Qlc);
        assert_eq!(read_latency_with_retries(&qlc, 0), 140_000);
        assert_eq!(read_latency_with_retries(&qlc, 1), 280_000);
        assert_eq!(read_latency_with_retries(&qlc, 10), 1_540_000);
    }

    #[test]
    fn mode_spec_ordering() {
        let specs = default_mode_specs();
        let [s, t, q] = [specs.slc, specs.tlc, specs.qlc];
        assert!(s.pages_per_block < t.pages_per_block && t.pages_per_block < q.pages_per_block);
        assert!(s.read_latency_us < t.read_latency_us && t.read_latency_us < q.read_latency_us);
        assert!(s.pe_limit > t.pe_limit && t.pe_limit > q.pe_limit);
        assert!(FlashMode::Slc < FlashMode::Tlc && FlashMode::Tlc < FlashMode::Qlc);
    }

    #[test]
    fn variation_is_deterministic_bounded_and_centred() {
        let v = PageVariation::default();
        assert_eq!(v.factor(17, 300), v.factor(17, 300));
        let n = 100_000u32;
        let mut sum = 0.0;
        for i in 0..n {
            let f = page_variation_factor(&v, i / 1024, i % 1024);
            assert!((0.5..=1.5).contains(&f));
            sum += f;
        }
        let mean = sum / f64::from(n);
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
    }
}
