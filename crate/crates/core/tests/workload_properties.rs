use std::collections::HashSet;

use proptest::prelude::*;
use raro_core::workload::{parse_trace, zipf_stream, WorkloadError, ZipfTable};
use raro_core::{Op, WorkloadKind, WorkloadSpec};

const PAGE: u64 = 16 * 1024;

fn spec(theta: f64, pages: u64, requests: u64) -> WorkloadSpec {
    WorkloadSpec {
        zipf_theta: theta,
        dataset_bytes: pages * PAGE,
        total_requests: requests,
        ..WorkloadSpec::default()
    }
}

#[test]
fn table_probabilities_match_power_law() {
    let n = 1000u64;
    let theta = 1.2;
    let table = ZipfTable::new(n, theta);
    let norm: f64 = (1..=n).map(|k| (k as f64).powf(-theta)).sum();
    for rank in [0usize, 1, 9, 99, 999] {
        let want = ((rank + 1) as f64).powf(-theta) / norm;
        assert!((table.probability(rank) - want).abs() < 1e-12, "rank {rank}");
    }
}

#[test]
fn sampled_frequencies_follow_the_law() {
    let pages = 4096;
    let theta = 1.5;
    let n = 400_000u64;
    let s = spec(theta, pages, n);
    let stream = zipf_stream(&s, pages, 1.0);
    let hottest: Vec<u64> = (0..8).map(|r| stream.lpn_of_rank(r)).collect();
    let mut counts = [0u64; 8];
    for r in stream {
        if let Some(i) = hottest.iter().position(|l| *l == r.lpn) {
            counts[i] += 1;
        }
    }
    let norm: f64 = (1..=pages).map(|k| (k as f64).powf(-theta)).sum();
    for (i, c) in counts.iter().enumerate() {
        let p = ((i + 1) as f64).powf(-theta) / norm;
        let mean = p * n as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!(((*c as f64) - mean).abs() < 5.0 * sd, "rank {i}: {c} vs {mean:.0}");
    }
}

#[test]
fn trace_round_trip_and_errors() {
    let reqs = parse_trace("# header\nR 10 2\nW 0 1  # tail comment\n\nr 5 1\n", 100).unwrap();
    assert_eq!(reqs.len(), 3);
    assert_eq!((reqs[0].op, reqs[0].lpn, reqs[0].pages), (Op::Read, 10, 2));
    assert_eq!((reqs[1].op, reqs[1].lpn), (Op::Write, 0));
    assert!(matches!(parse_trace("R 99 2\n", 100), Err(WorkloadError::OutOfRange { line: 1, .. })));
    assert!(matches!(parse_trace("\nX 1 1\n", 100), Err(WorkloadError::Parse { line: 2, .. })));
    assert!(matches!(parse_trace("R 1\n", 100), Err(WorkloadError::Parse { .. })));
    assert!(matches!(parse_trace("R 1 0\n", 100), Err(WorkloadError::Parse { .. })));
}

#[test]
fn trace_kind_requires_path() {
    let s = WorkloadSpec {
        kind: WorkloadKind::Trace,
        ..WorkloadSpec::default()
    };
    assert!(s.validate(PAGE, 1 << 20).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn rank_permutation_is_a_bijection(seed in any::<u64>(), pages in 1u64..3000) {
        let s = WorkloadSpec { seed, ..spec(1.2, pages, 0) };
        let stream = zipf_stream(&s, pages, 1.0);
        let lpns: HashSet<u64> = (0..pages as usize).map(|r| stream.lpn_of_rank(r)).collect();
        prop_assert_eq!(lpns.len() as u64, pages);
        prop_assert!(lpns.iter().all(|l| *l < pages));
    }

    #[test]
    fn streams_are_seed_deterministic(seed in any::<u64>(), queues in 1u32..8) {
        let s = WorkloadSpec { seed, queues, ..spec(1.2, 2048, 500) };
        let a = s.generate(PAGE, 4096).unwrap();
        let b = s.generate(PAGE, 4096).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), 500);
        for r in &a {
            prop_assert!(r.lpn + u64::from(r.pages) <= 2048);
            prop_assert_eq!(u64::from(r.queue), r.id % u64::from(queues));
        }
    }

    #[test]
    fn sequential_reads_cover_the_dataset(pages in 1u64..500, size in 1u32..8) {
        prop_assume!(pages >= u64::from(size));
        let s = WorkloadSpec {
            kind: WorkloadKind::SequentialRead,
            request_pages: size,
            ..spec(1.2, pages, pages / u64::from(size))
        };
        let reqs = s.generate(PAGE, pages).unwrap();
        let mut next = 0;
        for r in reqs {
            prop_assert_eq!(r.op, Op::Read);
            prop_assert_eq!(r.lpn, next);
            next += u64::from(size);
        }
    }

    #[test]
    fn mixed_read_share_tracks_fraction(seed in any::<u64>(), fraction in 0.05f64..0.95) {
        let n = 20_000u64;
        let s = WorkloadSpec { seed, kind: WorkloadKind::Mixed, read_fraction: fraction, ..spec(1.2, 4096, n) };
        let reads = s.generate(PAGE, 4096).unwrap().iter().filter(|r| r.op == Op::Read).count() as f64;
        let sd = (n as f64 * fraction * (1.0 - fraction)).sqrt();
        prop_assert!((reads - fraction * n as f64).abs() < 5.0 * sd);
    }
}
