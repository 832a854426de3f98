//! Request stream generation: Zipf random reads, sequential reads, read/write
//! mixes and plain-text trace replay.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flash::Nanos;
use crate::ftl::Lpn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Op {
    Read,
    Write,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub op: Op,
    pub lpn: Lpn,
    pub pages: u32,
    pub queue: u32,
    /// Filled in by the engine; generators leave it at zero.
    pub issue_time: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadKind {
    ZipfRandomRead,
    SequentialRead,
    Mixed,
    Trace,
}

pub const GIB: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub kind: WorkloadKind,
    pub zipf_theta: f64,
    pub dataset_bytes: u64,
    pub request_pages: u32,
    pub total_requests: u64,
    pub queues: u32,
    pub seed: u64,
    /// Share of reads in a `mixed` workload.
    pub read_fraction: f64,
    pub trace_path: Option<PathBuf>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            kind: WorkloadKind::ZipfRandomRead,
            zipf_theta: 1.2,
            dataset_bytes: 8 * GIB,
            request_pages: 1,
            total_requests: 1_000_000,
            queues: 4,
            seed: 42,
            read_fraction: 0.9,
            trace_path: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload: {0}")]
    Invalid(String),
    #[error("trace line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("trace line {line}: pages {lpn}..{end} outside the logical space of {limit} pages")]
    OutOfRange { line: usize, lpn: Lpn, end: u64, limit: u64 },
    #[error("cannot read trace {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl WorkloadSpec {
    pub fn dataset_pages(&self, page_bytes: u64) -> u64 {
        self.dataset_bytes / page_bytes
    }

    pub fn validate(&self, page_bytes: u64, logical_pages: u64) -> Result<(), WorkloadError> {
        let bad = |m: &str| Err(WorkloadError::Invalid(m.to_string()));
        if !(self.zipf_theta >= 0.0 && self.zipf_theta.is_finite()) {
            return bad("workload.zipf_theta must be >= 0");
        }
        if self.request_pages == 0 {
            return bad("workload.request_pages must be >= 1");
        }
        if self.queues == 0 {
            return bad("workload.queues must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.read_fraction) {
            return bad("workload.read_fraction must lie in [0, 1]");
        }
        let pages = self.dataset_pages(page_bytes);
        if pages < u64::from(self.request_pages) {
            return bad("workload.dataset_bytes is smaller than one request");
        }
        if pages > logical_pages {
            return bad("workload.dataset_bytes does not fit the logical space");
        }
        if self.kind == WorkloadKind::Trace && self.trace_path.is_none() {
            return bad("workload.trace_path is required for trace workloads");
        }
        Ok(())
    }

    /// Materialise the request stream.
    pub fn generate(&self, page_bytes: u64, logical_pages: u64) -> Result<Vec<Request>, WorkloadError> {
        self.validate(page_bytes, logical_pages)?;
        let pages = self.dataset_pages(page_bytes);
        Ok(match self.kind {
            WorkloadKind::ZipfRandomRead => zipf_stream(self, pages, 1.0).collect(),
            WorkloadKind::Mixed => zipf_stream(self, pages, self.read_fraction).collect(),
            WorkloadKind::SequentialRead => sequential_stream(self, pages).collect(),
            WorkloadKind::Trace => {
                let path = self.trace_path.as_deref().expect("validated");
                let mut reqs = load_trace(path, logical_pages)?;
                for (i, r) in reqs.iter_mut().enumerate() {
                    r.queue = (i as u64 % u64::from(self.queues)) as u32;
                }
                reqs
            }
        })
    }

    /// Accesses used to warm the heat classifier. Drawn from a separate seed
    /// so the measured stream is unaffected.
    pub fn warmup(&self, page_bytes: u64, count: u64) -> Vec<Lpn> {
        if count == 0 || !matches!(self.kind, WorkloadKind::ZipfRandomRead | WorkloadKind::Mixed) {
            return Vec::new();
        }
        let warm = WorkloadSpec {
            total_requests: count,
            ..self.clone()
        };
        let pages = self.dataset_pages(page_bytes);
        ZipfStream::new(&warm, pages, 1.0)
            .with_draw_seed(self.seed ^ 0x77a2_3b1c_0000_0001)
            .map(|r| r.lpn)
            .collect()
    }
}

/// Inverse-CDF Zipf sampler over ranks `0..n` (rank 0 most popular).
#[derive(Debug, Clone)]
pub struct ZipfTable {
    cdf: Vec<f64>,
}

impl ZipfTable {
    pub fn new(n: u64, theta: f64) -> Self {
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0;
        for rank in 1..=n {
            acc += (rank as f64).powf(-theta);
            cdf.push(acc);
        }
        for c in &mut cdf {
            *c /= acc;
        }
        if let Some(last) = cdf.last_mut() {
            *last = 1.0;
        }
        ZipfTable { cdf }
    }

    pub fn len(&self) -> usize {
        self.cdf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cdf.is_empty()
    }

    pub fn probability(&self, rank: usize) -> f64 {
        let prev = if rank == 0 { 0.0 } else { self.cdf[rank - 1] };
        self.cdf[rank] - prev
    }

    /// Rank for a uniform draw `u` in `[0, 1)`.
    pub fn rank(&self, u: f64) -> usize {
        self.cdf.partition_point(|c| *c <= u).min(self.cdf.len() - 1)
    }
}

pub struct ZipfStream {
    rng: ChaCha8Rng,
    table: ZipfTable,
    slot_of_rank: Vec<u64>,
    request_pages: u32,
    queues: u32,
    read_fraction: f64,
    next: u64,
    total: u64,
}

impl ZipfStream {
    fn new(spec: &WorkloadSpec, dataset_pages: u64, read_fraction: f64) -> Self {
        let slots = dataset_pages / u64::from(spec.request_pages);
        let mut perm_rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut slot_of_rank: Vec<u64> = (0..slots).collect();
        slot_of_rank.shuffle(&mut perm_rng);
        ZipfStream {
            rng: ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1)),
            table: ZipfTable::new(slots, spec.zipf_theta),
            slot_of_rank,
            request_pages: spec.request_pages,
            queues: spec.queues,
            read_fraction,
            next: 0,
            total: spec.total_requests,
        }
    }

    fn with_draw_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    /// LPN that rank `rank` (0 = hottest) maps to.
    pub fn lpn_of_rank(&self, rank: usize) -> Lpn {
        self.slot_of_rank[rank] * u64::from(self.request_pages)
    }
}

impl Iterator for ZipfStream {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        if self.next >= self.total {
            return None;
        }
        let rank = self.table.rank(self.rng.gen::<f64>());
        let op = if self.read_fraction >= 1.0 || self.rng.gen::<f64>() < self.read_fraction {
            Op::Read
        } else {
            Op::Write
        };
        let id = self.next;
        self.next += 1;
        Some(Request {
            id,
            op,
            lpn: self.lpn_of_rank(rank),
            pages: self.request_pages,
            queue: (id % u64::from(self.queues)) as u32,
            issue_time: 0,
        })
    }
}

/// LPNs drawn from a Zipf law, ranks scattered over the dataset by a seeded
/// permutation.
pub fn zipf_stream(spec: &WorkloadSpec, dataset_pages: u64, read_fraction: f64) -> ZipfStream {
    ZipfStream::new(spec, dataset_pages, read_fraction)
}

/// Consecutive requests from LPN 0, wrapping at the end of the dataset.
pub fn sequential_stream(spec: &WorkloadSpec, dataset_pages: u64) -> impl Iterator<Item = Request> {
    let size = u64::from(spec.request_pages);
    let slots = dataset_pages / size;
    let queues = u64::from(spec.queues);
    (0..spec.total_requests).map(move |id| Request {
        id,
        op: Op::Read,
        lpn: (id % slots) * size,
        pages: size as u32,
        queue: (id % queues) as u32,
        issue_time: 0,
    })
}

/// Parse `<R|W> <lpn> <pages>` lines; `#` starts a comment.
pub fn parse_trace(text: &str, logical_pages: u64) -> Result<Vec<Request>, WorkloadError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| WorkloadError::Parse { line, message };
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected `<R|W> <lpn> <pages>`, got {} fields", fields.len())));
        }
        let op = match fields[0] {
            "R" | "r" => Op::Read,
            "W" | "w" => Op::Write,
            other => return Err(err(format!("unknown op `{other}`"))),
        };
        let lpn: Lpn = fields[1]
            .parse()
            .map_err(|e| err(format!("bad lpn `{}`: {e}", fields[1])))?;
        let pages: u32 = fields[2]
            .parse()
            .map_err(|e| err(format!("bad page count `{}`: {e}", fields[2])))?;
        if pages == 0 {
            return Err(err("page count must be >= 1".into()));
        }
        let end = lpn.saturating_add(u64::from(pages));
        if end > logical_pages {
            return Err(WorkloadError::OutOfRange {
                line,
                lpn,
                end,
                limit: logical_pages,
            });
        }
        out.push(Request {
            id: out.len() as u64,
            op,
            lpn,
            pages,
            queue: 0,
            issue_time: 0,
        });
    }
    Ok(out)
}

pub fn load_trace(path: &Path, logical_pages: u64) -> Result<Vec<Request>, WorkloadError> {
    let text = std::fs::read_to_string(path).map_err(|source| WorkloadError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_trace(&text, logical_pages)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PAGE: u64 = 16 * 1024;

    #[test]
    fn harmonic_normalisation() {
        let t = ZipfTable::new(4, 1.0);
        let h = 1.0 + 0.5 + 1.0 / 3.0 + 0.25;
        assert!((t.probability(0) - 1.0 / h).abs() < 1e-12);
        assert!((t.probability(0) - 0.48).abs() < 1e-12);
        assert_eq!(t.rank(0.0), 0);
        assert_eq!(t.rank(0.999_999), 3);
    }

    #[test]
    fn sequential_basics() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::SequentialRead,
            total_requests: 3,
            queues: 1,
            ..WorkloadSpec::default()
        };
        let lpns: Vec<Lpn> = sequential_stream(&spec, 100).map(|r| r.lpn).collect();
        assert_eq!(lpns, vec![0, 1, 2]);
        let wrap = WorkloadSpec {
            total_requests: 5,
            ..spec
        };
        let lpns: Vec<Lpn> = sequential_stream(&wrap, 3).map(|r| r.lpn).collect();
        assert_eq!(lpns, vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn sequential_128k_pass_length() {
        let spec = WorkloadSpec {
            request_pages: 8,
            ..WorkloadSpec::default()
        };
        let pages = spec.dataset_pages(PAGE);
        assert_eq!(pages / 8, 65_536);
    }

    #[test]
    fn trace_lines() {
        let reqs = parse_trace("# header\nR 4096 1\nW 0 8  # tail comment\n\n", 1 << 20).unwrap();
        assert_eq!(reqs.len(), 2);
        assert_eq!((reqs[0].op, reqs[0].lpn, reqs[0].pages), (Op::Read, 4096, 1));
        assert_eq!((reqs[1].op, reqs[1].lpn, reqs[1].pages), (Op::Write, 0, 8));
        match parse_trace("R 1 1\nX 1 1\n", 100) {
            Err(WorkloadError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_trace("R 99 2", 100),
            Err(WorkloadError::OutOfRange { line: 1, .. })
        ));
        assert!(matches!(parse_trace("R 1", 100), Err(WorkloadError::Parse { .. })));
    }

    #[test]
    fn same_seed_same_stream() {
        let spec = WorkloadSpec {
            total_requests: 1000,
            dataset_bytes: 64 << 20,
            ..WorkloadSpec::default()
        };
        let a = spec.generate(PAGE, 1 << 20).unwrap();
        let b = spec.generate(PAGE, 1 << 20).unwrap();
        assert_eq!(a, b);
        let other = WorkloadSpec { seed: 7, ..spec };
        assert_ne!(a, other.generate(PAGE, 1 << 20).unwrap());
    }

    #[test]
    fn mixed_contains_writes() {
        let spec = WorkloadSpec {
            kind: WorkloadKind::Mixed,
            read_fraction: 0.5,
            total_requests: 2000,
            dataset_bytes: 64 << 20,
            ..WorkloadSpec::default()
        };
        let reqs = spec.generate(PAGE, 1 << 20).unwrap();
        let writes = reqs.iter().filter(|r| r.op == Op::Write).count();
        assert!((800..1200).contains(&writes), "{writes}");
    }

    #[test]
    fn dataset_must_fit() {
        let spec = WorkloadSpec::default();
        assert!(spec.validate(PAGE, 1000).is_err());
        assert!(spec.validate(PAGE, 1 << 20).is_ok());
    }
}
