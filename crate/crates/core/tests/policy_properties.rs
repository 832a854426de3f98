use proptest::prelude::*;
use raro_core::policy::{migration_decision, HeatState};
use raro_core::{FlashMode, Heat, HeatConfig, PerStage, PolicyKind, PolicyThresholds, ReliabilityStage};

fn heat_strategy() -> impl Strategy<Value = Heat> {
    prop_oneof![Just(Heat::Cold), Just(Heat::Warm), Just(Heat::Hot)]
}

fn mode_strategy() -> impl Strategy<Value = FlashMode> {
    prop_oneof![Just(FlashMode::Slc), Just(FlashMode::Tlc), Just(FlashMode::Qlc)]
}

fn stage_strategy() -> impl Strategy<Value = ReliabilityStage> {
    prop_oneof![
        Just(ReliabilityStage::Young),
        Just(ReliabilityStage::Middle),
        Just(ReliabilityStage::Old)
    ]
}

fn thresholds_strategy() -> impl Strategy<Value = PolicyThresholds> {
    (1u32..6, 0u32..10, 0u32..10, 0u32..10).prop_map(|(r1, a, b, c)| PolicyThresholds {
        r1,
        r2: PerStage {
            young: r1 + a,
            middle: r1 + a + b,
            old: r1 + a + b + c,
        },
    })
}

fn density_rank(mode: FlashMode) -> u32 {
    mode.bits_per_cell()
}

proptest! {
    #[test]
    fn raro_decisions_are_a_subset_of_hotness(
        heat in heat_strategy(),
        mode in mode_strategy(),
        stage in stage_strategy(),
        retries in 0u32..40,
        th in thresholds_strategy(),
    ) {
        let raro = migration_decision(PolicyKind::Raro, heat, retries, mode, stage, &th);
        let hot = migration_decision(PolicyKind::Hotness, heat, retries, mode, stage, &th);
        if let Some(target) = raro {
            prop_assert_eq!(hot, Some(target));
        }
    }

    #[test]
    fn baseline_never_migrates(
        heat in heat_strategy(),
        mode in mode_strategy(),
        stage in stage_strategy(),
        retries in 0u32..40,
        th in thresholds_strategy(),
    ) {
        prop_assert_eq!(migration_decision(PolicyKind::Baseline, heat, retries, mode, stage, &th), None);
    }

    #[test]
    fn targets_only_lower_density(
        kind in prop_oneof![Just(PolicyKind::Hotness), Just(PolicyKind::Raro)],
        heat in heat_strategy(),
        mode in mode_strategy(),
        stage in stage_strategy(),
        retries in 0u32..40,
        th in thresholds_strategy(),
    ) {
        if let Some(target) = migration_decision(kind, heat, retries, mode, stage, &th) {
            prop_assert!(density_rank(target) < density_rank(mode));
        }
    }

    #[test]
    fn more_retries_never_withdraw_a_raro_decision(
        heat in heat_strategy(),
        mode in mode_strategy(),
        stage in stage_strategy(),
        retries in 0u32..40,
        extra in 0u32..10,
        th in thresholds_strategy(),
    ) {
        let a = migration_decision(PolicyKind::Raro, heat, retries, mode, stage, &th);
        let b = migration_decision(PolicyKind::Raro, heat, retries + extra, mode, stage, &th);
        if a.is_some() {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn heat_score_matches_decayed_sum(
        gaps in prop::collection::vec(0u64..5_000, 1..40),
        idle in 0u64..20_000,
        half_life in 100u64..50_000,
    ) {
        let config = HeatConfig { half_life, ..HeatConfig::default() };
        let mut h = HeatState::new(config, 16);
        let mut times = Vec::new();
        let mut clock = 0u64;
        for g in &gaps {
            h.advance(*g);
            h.record_access(3);
            clock += g + 1;
            times.push(clock);
        }
        h.advance(idle);
        clock += idle;
        let expected: f64 = times
            .iter()
            .map(|t| 0.5f64.powf((clock - t) as f64 / half_life as f64))
            .sum();
        prop_assert!((h.score(3) - expected).abs() <= 1e-9 * expected.max(1.0));
    }
}

#[test]
fn table_rows() {
    let th = PolicyThresholds::default();
    use FlashMode::*;
    use ReliabilityStage::*;
    let d = |kind, heat, retries, mode, stage| migration_decision(kind, heat, retries, mode, stage, &th);
    assert_eq!(d(PolicyKind::Raro, Heat::Hot, 1, Qlc, Old), Some(Slc));
    assert_eq!(d(PolicyKind::Raro, Heat::Hot, 0, Qlc, Old), None);
    assert_eq!(d(PolicyKind::Raro, Heat::Warm, 7, Qlc, Middle), Some(Tlc));
    assert_eq!(d(PolicyKind::Raro, Heat::Warm, 6, Qlc, Middle), None);
    assert_eq!(d(PolicyKind::Raro, Heat::Warm, 10, Qlc, Old), None);
    assert_eq!(d(PolicyKind::Raro, Heat::Hot, 1, Tlc, Young), Some(Slc));
    assert_eq!(d(PolicyKind::Raro, Heat::Hot, 0, Tlc, Young), None);
    assert_eq!(d(PolicyKind::Raro, Heat::Cold, 30, Qlc, Old), None);
    assert_eq!(d(PolicyKind::Hotness, Heat::Hot, 0, Tlc, Young), Some(Slc));
    assert_eq!(d(PolicyKind::Hotness, Heat::Warm, 0, Qlc, Young), Some(Tlc));
    assert_eq!(d(PolicyKind::Hotness, Heat::Warm, 9, Tlc, Old), None);
    assert_eq!(d(PolicyKind::Hotness, Heat::Hot, 9, Slc, Old), None);
}

#[test]
fn r2_below_r1_is_rejected() {
    let th = PolicyThresholds {
        r1: 1,
        r2: PerStage {
            young: 0,
            middle: 7,
            old: 11,
        },
    };
    assert!(th.validate().is_err());
    let unordered = PolicyThresholds {
        r1: 1,
        r2: PerStage {
            young: 9,
            middle: 7,
            old: 11,
        },
    };
    assert!(unordered.validate().is_ok());
    assert!(unordered.validate_ordered().is_err());
}
