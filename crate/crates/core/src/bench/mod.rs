//! Benchmark harness: the same service graph run in-process and as one OS
//! process per service (optionally with a sidecar forwarder each).
//!
//! The tax metric here covers per-request communication overhead only:
//! `1 - compute/total`, where compute is the busy-work each hop performs.

mod baseline;
mod inproc;
pub mod worker;

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub use baseline::{run_process_baseline, BaselineConfig, FaultInjection, WorkerCommand};
pub use inproc::{run_inproc, topology_manifest, MeshVariant};

pub const REPORT_CSV_HEADER: &str =
    "config,topology,payload_bytes,iterations,p50_ns,p90_ns,p99_ns,throughput_rps,infra_tax";
pub const SEED_ENV: &str = "MESHWA_BENCH_SEED";
pub const DEFAULT_SEED: u64 = 0x6d65_7368;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Topology {
    Chain { length: usize },
    FanOut { width: usize },
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Topology::Chain { length } => write!(f, "chain:{length}"),
            Topology::FanOut { width } => write!(f, "fanout:{width}"),
        }
    }
}

/// One node of a topology: its name and the names it forwards to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hop {
    pub name: String,
    pub next: Vec<String>,
}

impl Topology {
    /// Hops in request order; the first is the entry point.
    pub fn hops(&self) -> Vec<Hop> {
        match *self {
            Topology::Chain { length } => (0..length)
                .map(|i| Hop {
                    name: format!("hop{i}"),
                    next: if i + 1 < length {
                        vec![format!("hop{}", i + 1)]
                    } else {
                        vec![]
                    },
                })
                .collect(),
            Topology::FanOut { width } => {
                let leaves: Vec<String> = (0..width).map(|i| format!("leaf{i}")).collect();
                let mut v = vec![Hop {
                    name: "root".into(),
                    next: leaves.clone(),
                }];
                v.extend(leaves.into_iter().map(|name| Hop { name, next: vec![] }));
                v
            }
        }
    }

    fn validate(&self) -> Result<(), BenchError> {
        match *self {
            Topology::Chain { length: 0 } | Topology::FanOut { width: 0 } => {
                Err(BenchError::InvalidTopology(*self))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct WorkloadSpec {
    pub topology: Topology,
    pub payload_bytes: usize,
    pub iterations: u64,
    pub warmup_iterations: u64,
    pub compute_spin_ns: u64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(topology: Topology, payload_bytes: usize, iterations: u64) -> Self {
        WorkloadSpec {
            topology,
            payload_bytes,
            iterations,
            warmup_iterations: (iterations / 10).min(1000),
            compute_spin_ns: 0,
            seed: seed_from_env(),
        }
    }

    pub(crate) fn validate(&self) -> Result<(), BenchError> {
        if self.iterations == 0 {
            return Err(BenchError::ZeroIterations);
        }
        self.topology.validate()
    }
}

/// Seed from `MESHWA_BENCH_SEED`, or a fixed default.
pub fn seed_from_env() -> u64 {
    std::env::var(SEED_ENV)
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(DEFAULT_SEED)
}

/// Deterministic payload sequence shared by every harness.
pub struct PayloadGen {
    rng: ChaCha8Rng,
    len: usize,
}

impl PayloadGen {
    pub fn new(seed: u64, len: usize) -> Self {
        PayloadGen {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
        }
    }

    pub fn next_payload(&mut self) -> Vec<u8> {
        let mut v = vec![0; self.len];
        self.rng.fill_bytes(&mut v);
        v
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("iterations must be at least 1")]
    ZeroIterations,
    #[error("topology {0} needs at least one hop")]
    InvalidTopology(Topology),
    #[error("total time is zero")]
    ZeroTotalTime,
    #[error("no reports to emit")]
    EmptyReportSet,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to spawn {what}: {reason}")]
    SpawnFailure { what: String, reason: String },
    #[error("socket error: {0}")]
    SocketError(String),
    #[error("child process {child} crashed")]
    ChildCrashed { child: String },
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("response mismatch at iteration {0}")]
    ResponseMismatch(u64),
}

/// Where a report was produced.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Environment {
    pub host: String,
    pub timestamp_unix: u64,
    pub iterations: u64,
    pub warmup_iterations: u64,
    pub seed: u64,
}

impl Environment {
    pub(crate) fn capture(spec: &WorkloadSpec) -> Self {
        let host = std::fs::read_to_string("/etc/hostname")
            .ok()
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .or_else(|| std::env::var("HOSTNAME").ok())
            .unwrap_or_else(|| "unknown".into());
        Environment {
            host,
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            iterations: spec.iterations,
            warmup_iterations: spec.warmup_iterations,
            seed: spec.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: String,
    pub topology: Topology,
    pub payload_bytes: usize,
    pub iterations: u64,
    pub p50_ns: u64,
    pub p90_ns: u64,
    pub p99_ns: u64,
    pub throughput_rps: f64,
    pub total_time_ns: u64,
    pub compute_time_ns: u64,
    pub infra_tax: f64,
    /// Measured requests handled by each hop, in topology order.
    pub hop_requests: Vec<(String, u64)>,
    /// OS processes that served the run, the harness excluded for
    /// the baseline.
    pub processes: u32,
    pub environment: Environment,
}

impl BenchReport {
    pub(crate) fn build(
        config: &str,
        spec: &WorkloadSpec,
        mut latencies: Vec<u64>,
        total_time_ns: u64,
        compute_time_ns: u64,
        hop_requests: Vec<(String, u64)>,
    ) -> Result<Self, BenchError> {
        latencies.sort_unstable();
        let total_time_ns = total_time_ns.max(1);
        Ok(BenchReport {
            config: config.to_string(),
            topology: spec.topology,
            payload_bytes: spec.payload_bytes,
            iterations: spec.iterations,
            p50_ns: percentile(&latencies, 0.50),
            p90_ns: percentile(&latencies, 0.90),
            p99_ns: percentile(&latencies, 0.99),
            throughput_rps: spec.iterations as f64 / (total_time_ns as f64 / 1e9),
            total_time_ns,
            infra_tax: compute_infra_tax(compute_time_ns.min(total_time_ns) as f64, total_time_ns as f64)?,
            compute_time_ns,
            hop_requests,
            processes: 1,
            environment: Environment::capture(spec),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.2},{:.4}",
            self.config,
            self.topology,
            self.payload_bytes,
            self.iterations,
            self.p50_ns,
            self.p90_ns,
            self.p99_ns,
            self.throughput_rps,
            self.infra_tax
        )
    }
}

/// Nearest-rank percentile of sorted samples; 0 for an empty slice.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// `1 - compute/total`, clamped to `[0, 1]`.
pub fn compute_infra_tax(compute: f64, total: f64) -> Result<f64, BenchError> {
    if total <= 0.0 {
        return Err(BenchError::ZeroTotalTime);
    }
    Ok((1.0 - compute / total).clamp(0.0, 1.0))
}

/// Human-readable comparison of the reports.
pub fn summary(reports: &[BenchReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<18} {} payload={}B iters={} p50={}ns p90={}ns p99={}ns {:.0} req/s infra_tax={:.4}\n",
            r.config,
            r.topology,
            r.payload_bytes,
            r.iterations,
            r.p50_ns,
            r.p90_ns,
            r.p99_ns,
            r.throughput_rps,
            r.infra_tax
        ));
    }
    if let (Some(first), Some(last)) = (reports.first(), reports.last()) {
        if reports.len() > 1 {
            let ratio = last.p50_ns as f64 / first.p50_ns.max(1) as f64;
            s.push_str(&format!(
                "{} vs {}: median latency ratio {:.1}x, infra_tax delta {:+.4}\n",
                last.config,
                first.config,
                ratio,
                last.infra_tax - first.infra_tax
            ));
        }
    }
    s.push_str(
        "infra_tax counts per-request communication overhead only; fleet-wide costs \
         such as scheduling and observability are outside its scope\n",
    );
    s
}

/// Writes the CSV report to `path` and prints the summary to standard
/// output.
pub fn emit_report(reports: &[BenchReport], path: &Path) -> Result<(), BenchError> {
    if reports.is_empty() {
        return Err(BenchError::EmptyReportSet);
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{REPORT_CSV_HEADER}")?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()?;
    print!("{}", summary(reports));
    Ok(())
}

/// Busy-waits for about `ns` nanoseconds and returns the time actually
/// spent.
pub(crate) fn spin(ns: u64) -> u64 {
    if ns == 0 {
        return 0;
    }
    let t = std::time::Instant::now();
    while (t.elapsed().as_nanos() as u64) < ns {
        std::hint::spin_loop();
    }
    t.elapsed().as_nanos() as u64
}
