mod common;

use proptest::prelude::*;
use raro_core::flash::default_mode_specs;
use raro_core::{FlashMode, Ftl, Geometry, ReliabilityModel};

const MIB: i64 = 1 << 20;

fn full_device() -> Ftl {
    Ftl::new(
        Geometry::default(),
        default_mode_specs(),
        ReliabilityModel::default(),
        FlashMode::Qlc,
        None,
    )
    .unwrap()
}

#[test]
fn qlc_to_slc_block_costs_twelve_mib() {
    let mut ftl = full_device();
    let page = Geometry::default().page_bytes() as i64;
    let before = ftl.usable_capacity() as i64;
    let report = ftl.convert_block(3, FlashMode::Slc, 0).unwrap();
    assert_eq!(report.capacity_delta_pages * page, -12 * MIB);
    assert_eq!(ftl.usable_capacity() as i64 - before, -12 * MIB);
    ftl.check_invariants().unwrap();
}

#[test]
fn qlc_to_tlc_block_costs_four_mib() {
    let mut ftl = full_device();
    let page = Geometry::default().page_bytes() as i64;
    let report = ftl.convert_block(5, FlashMode::Tlc, 0).unwrap();
    assert_eq!(report.capacity_delta_pages * page, -4 * MIB);
    let back = ftl.convert_block(5, FlashMode::Qlc, 0).unwrap();
    assert_eq!(back.capacity_delta_pages * page, 4 * MIB);
    assert_eq!(ftl.usable_capacity(), 16 << 30);
}

#[test]
fn conversion_keeps_valid_data() {
    let mut ftl = common::tiny_ftl(4096);
    for lpn in 0..2000 {
        ftl.host_write(lpn, lpn + 100, 0).unwrap();
    }
    let block = ftl.translate(700).unwrap().block;
    let report = ftl.convert_block(block, FlashMode::Tlc, 0).unwrap();
    assert!(report.relocated > 0);
    assert_eq!(ftl.block(block).mode, FlashMode::Tlc);
    for lpn in 0..2000 {
        assert_eq!(ftl.host_read(lpn, 0).unwrap().unwrap().token, lpn + 100);
    }
    ftl.check_invariants().unwrap();
}

#[test]
fn interleaving_smoke() {
    let counts = common::run_interleaving(1, 20_000).unwrap();
    assert!(counts.writes > 0 && counts.reads > 0);
    assert!(counts.migrations > 0, "{counts:?}");
    assert!(counts.conversions > 0, "{counts:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_interleavings_hold_invariants(seed in any::<u64>()) {
        let result = common::run_interleaving(seed, 10_000);
        prop_assert!(result.is_ok(), "{}", result.unwrap_err());
    }
}
