use raro_core::flash::default_mode_specs;
use raro_core::ftl::GcConfig;
use raro_core::policy::{HeatState, Policy};
use raro_core::{
    DeviceConfig, FlashMode, Ftl, Geometry, Heat, HeatConfig, Op, PolicyConfig, PolicyKind, PolicyThresholds,
    ReclaimConfig, ReliabilityModel, ReliabilityStage, Request, Simulator, Window, WorkloadSpec,
};

fn geometry(luns: u32) -> Geometry {
    Geometry {
        channels: 1,
        luns_per_channel: luns,
        planes_per_lun: 1,
        blocks_per_plane: 8,
        page_size_kib: 16,
    }
}

fn baseline(ftl: Ftl) -> Simulator {
    let heat = HeatState::new(HeatConfig::default(), ftl.logical_pages());
    Simulator::with_parts(
        ftl,
        Policy::new(PolicyKind::Baseline, PolicyThresholds::default(), heat),
        ReclaimConfig::default(),
    )
}

fn slc_device(luns: u32, pages: u64) -> Simulator {
    let mut ftl = Ftl::new(
        geometry(luns),
        default_mode_specs(),
        ReliabilityModel::default(),
        FlashMode::Slc,
        Some(1024),
    )
    .unwrap();
    for lpn in 0..pages {
        ftl.host_write_in(lpn, lpn + 1, FlashMode::Slc, 0).unwrap();
    }
    baseline(ftl)
}

fn reads(lpns: impl Fn(u64) -> u64, n: u64, queues: u32) -> Vec<Request> {
    (0..n)
        .map(|id| Request {
            id,
            op: Op::Read,
            lpn: lpns(id),
            pages: 1,
            queue: (id % u64::from(queues)) as u32,
            issue_time: 0,
        })
        .collect()
}

#[test]
fn thousand_slc_reads_take_twenty_ms() {
    let mut sim = slc_device(1, 1);
    let stats = sim.run(&reads(|_| 0, 1000, 1));
    assert_eq!(stats.retry_histogram[0], 1000);
    assert_eq!(stats.elapsed_ns, 20_000_000);
    assert!((stats.iops - 50_000.0).abs() < 1e-6);
    assert!((stats.mean_latency_us - 20.0).abs() < 1e-9);
}

#[test]
fn four_luns_give_four_times_the_iops() {
    let mut one = slc_device(1, 4);
    let mut four = slc_device(4, 4);
    let single = one.run(&reads(|id| id % 4, 4000, 4));
    let striped = four.run(&reads(|id| id % 4, 4000, 4));
    let pages_on_distinct_luns: std::collections::HashSet<usize> =
        (0..4).map(|l| four.ftl().geometry().lun_of(four.ftl().translate(l).unwrap().block)).collect();
    assert_eq!(pages_on_distinct_luns.len(), 4);
    let ratio = striped.iops / single.iops;
    assert!((ratio - 4.0).abs() < 0.01, "ratio {ratio}");
}

#[test]
fn queue_depth_on_one_lun_does_not_add_throughput() {
    let mut a = slc_device(1, 1);
    let mut b = slc_device(1, 1);
    let one = a.run(&reads(|_| 0, 2000, 1));
    let eight = b.run(&reads(|_| 0, 2000, 8));
    assert_eq!(one.elapsed_ns, eight.elapsed_ns);
    assert!(eight.mean_latency_us > one.mean_latency_us);
}

fn small_config(kind: PolicyKind) -> (DeviceConfig, PolicyConfig) {
    let device = DeviceConfig {
        geometry: geometry(2),
        modes: default_mode_specs(),
        reliability: ReliabilityModel::default(),
        gc: GcConfig::default(),
        initial_mode: FlashMode::Qlc,
        logical_pages: Some(12 * 1024),
    };
    let policy = PolicyConfig {
        kind,
        thresholds: PolicyThresholds::default(),
        heat: HeatConfig::default(),
        reclaim: ReclaimConfig::default(),
    };
    (device, policy)
}

fn workload(requests: u64, read_fraction: f64) -> Vec<Request> {
    WorkloadSpec {
        kind: raro_core::WorkloadKind::Mixed,
        read_fraction,
        dataset_bytes: 8 * 1024 * 16 * 1024,
        total_requests: requests,
        ..WorkloadSpec::default()
    }
    .generate(16 * 1024, 12 * 1024)
    .unwrap()
}

#[test]
fn requests_are_conserved() {
    let (device, policy) = small_config(PolicyKind::Raro);
    let mut sim = Simulator::new(&device, &policy).unwrap();
    sim.precondition(4096, ReliabilityStage::Old).unwrap();
    let reqs = workload(20_000, 0.7);
    let stats = sim.run(&reqs);
    assert_eq!(stats.submitted, 20_000);
    assert_eq!(stats.completed + stats.failed, stats.submitted);
    assert_eq!(stats.in_flight, 0);
    assert_eq!(stats.completed_reads + stats.completed_writes, stats.completed);
    assert_eq!(stats.retry_histogram.iter().sum::<u64>(), stats.page_reads);
    assert_eq!(stats.retry_histogram.len(), raro_core::engine::RETRY_BUCKETS);
    sim.ftl().check_invariants().unwrap();
}

#[test]
fn identical_inputs_give_identical_stats() {
    let run = || {
        let (device, policy) = small_config(PolicyKind::Raro);
        let mut sim = Simulator::new(&device, &policy).unwrap();
        sim.precondition(8192, ReliabilityStage::Middle).unwrap();
        serde_json::to_string(&sim.run(&workload(20_000, 0.9))).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn windowed_snapshot_counts_only_new_requests() {
    let (device, policy) = small_config(PolicyKind::Hotness);
    let mut sim = Simulator::new(&device, &policy).unwrap();
    sim.precondition(8192, ReliabilityStage::Young).unwrap();
    let reqs = workload(6_000, 1.0);
    let first = sim.run(&reqs[..2_000]);
    let both = sim.run(&reqs[2_000..]);
    let window = sim.snapshot_stats(Window::Since(&first));
    assert_eq!(window.completed, both.completed - first.completed);
    assert_eq!(window.completed, 4_000);
}

#[test]
fn hot_page_moving_to_slc_costs_one_block() {
    let (device, mut policy) = small_config(PolicyKind::Hotness);
    policy.heat = HeatConfig {
        theta_warm: 1.5,
        theta_hot: 1.9,
        ..HeatConfig::default()
    };
    let mut sim = Simulator::new(&device, &policy).unwrap();
    sim.precondition(100, ReliabilityStage::Old).unwrap();
    let stats = sim.run(&reads(|_| 7, 2, 1));
    assert_eq!(sim.policy().heat().classify(7), Heat::Hot);
    assert_eq!(sim.ftl().mode_of(7), Some(FlashMode::Slc));
    assert_eq!(stats.migrations.get("QLC->SLC"), Some(&1));
    assert_eq!(stats.capacity_loss_bytes, 12 << 20);
    assert_eq!(stats.block_conversions.get("QLC->SLC"), Some(&1));
}

#[test]
fn baseline_loses_no_capacity() {
    let (device, policy) = small_config(PolicyKind::Baseline);
    let mut sim = Simulator::new(&device, &policy).unwrap();
    sim.precondition(8192, ReliabilityStage::Old).unwrap();
    let stats = sim.run(&workload(20_000, 1.0));
    assert_eq!(stats.capacity_loss_bytes, 0);
    assert_eq!(stats.migration_count, 0);
    assert!(stats.mean_retries >= 11.0);
}

#[test]
fn migration_work_delays_later_reads() {
    // The same read stream takes longer when a page move is charged in between.
    let run = |kind| {
        let (device, mut policy) = small_config(kind);
        policy.heat.theta_warm = 0.5;
        policy.heat.theta_hot = 1.0;
        let mut sim = Simulator::new(&device, &policy).unwrap();
        sim.precondition(100, ReliabilityStage::Old).unwrap();
        sim.run(&reads(|_| 3, 1, 1));
        sim.lun_timelines().iter().copied().max().unwrap()
    };
    assert!(run(PolicyKind::Hotness) > run(PolicyKind::Baseline));
}
