use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use crate::manifest::{Manifest, MeshMode, MeshPolicy, ServiceDescriptor, ServiceKind};
use crate::runtime::{NativeCatalog, Runtime, RuntimeConfig};
use crate::xcall::{CallError, NativeCall, NativeService};

use super::{spin, BenchError, BenchReport, PayloadGen, WorkloadSpec};

const CLIENT: &str = "client";
const PROXY: &str = "mesh.proxy";
const TOOLCHAIN: &str = "rustc-native";
pub(crate) const HOP_EXPORT: &str = "relay";

/// Mesh configuration applied to every edge of the topology.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeshVariant {
    None,
    Intercept,
    /// Proxies elide after this many calls, normally during warmup.
    Elided { after: u64 },
}

impl MeshVariant {
    pub fn config_name(self) -> &'static str {
        match self {
            MeshVariant::None => "inproc",
            MeshVariant::Intercept => "inproc+intercept",
            MeshVariant::Elided { .. } => "inproc+elided",
        }
    }
}

struct HopService {
    next: Vec<String>,
    spin_ns: u64,
    served: AtomicU64,
    spun_ns: AtomicU64,
}

impl NativeService for HopService {
    fn call(&self, cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
        self.served.fetch_add(1, Ordering::Relaxed);
        self.spun_ns.fetch_add(spin(self.spin_ns), Ordering::Relaxed);
        if self.next.is_empty() {
            let bytes = cx.payload_bytes()?;
            cx.write_payload(0, &bytes)?;
        } else {
            for n in &self.next {
                cx.call_peer(n, HOP_EXPORT, &[])?;
            }
        }
        Ok(Some(cx.payload_len() as i64))
    }
}

/// Observes every payload it is shown.
fn observe(cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
    let seen = cx.payload_bytes()?;
    Ok(Some(seen.len() as i64))
}

fn client(_: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
    Ok(None)
}

fn native(name: &str, imports: Vec<String>) -> ServiceDescriptor {
    ServiceDescriptor {
        name: name.to_string(),
        kind: ServiceKind::Native,
        image_path: None,
        memory_bytes: 65536,
        max_memory_bytes: 65536,
        toolchain: TOOLCHAIN.to_string(),
        imports,
    }
}

/// Manifest describing the benchmark graph: a client, the hops, and a
/// proxy with the chosen policy on every edge.
pub fn topology_manifest(spec: &WorkloadSpec, mesh: MeshVariant) -> Manifest {
    let hops = spec.topology.hops();
    let mut services = vec![native(CLIENT, vec![hops[0].name.clone()])];
    let mut edges = vec![(CLIENT.to_string(), hops[0].name.clone())];
    for h in &hops {
        services.push(native(&h.name, h.next.clone()));
        edges.extend(h.next.iter().map(|n| (h.name.clone(), n.clone())));
    }
    let mode = match mesh {
        MeshVariant::None => None,
        MeshVariant::Intercept => Some(MeshMode::Intercept { proxy: PROXY.into() }),
        MeshVariant::Elided { after } => Some(MeshMode::ElideAfter {
            proxy: PROXY.into(),
            n: after.max(1),
        }),
    };
    let mut mesh_policies = vec![];
    if let Some(mode) = mode {
        services.push(native(PROXY, vec![]));
        mesh_policies = edges
            .into_iter()
            .map(|(caller, callee)| MeshPolicy {
                caller,
                callee,
                mode: mode.clone(),
            })
            .collect();
    }
    Manifest {
        services,
        mesh_policies,
        allowlist: vec![TOOLCHAIN.to_string()],
    }
}

fn runtime_err(e: impl std::fmt::Display) -> BenchError {
    BenchError::Runtime(e.to_string())
}

/// Runs the workload closed-loop inside one runtime.
pub fn run_inproc(spec: &WorkloadSpec, mesh: MeshVariant) -> Result<BenchReport, BenchError> {
    spec.validate()?;
    let manifest = topology_manifest(spec, mesh);
    let hops: Vec<(String, Arc<HopService>)> = spec
        .topology
        .hops()
        .into_iter()
        .map(|h| {
            let svc = Arc::new(HopService {
                next: h.next,
                spin_ns: spec.compute_spin_ns,
                served: AtomicU64::new(0),
                spun_ns: AtomicU64::new(0),
            });
            (h.name, svc)
        })
        .collect();
    let mut catalog = NativeCatalog::new()
        .with(CLIENT, &["main"], client)
        .with(PROXY, &[crate::mesh::PROXY_EXPORT], observe);
    for (name, svc) in &hops {
        catalog.insert(name, &[HOP_EXPORT], svc.clone());
    }
    let rt = Runtime::deploy(&manifest, Path::new("."), &catalog, RuntimeConfig::default()).map_err(runtime_err)?;

    let table = rt.discover(CLIENT, &hops[0].0).map_err(runtime_err)?;
    let slot = table.slot_index(HOP_EXPORT).expect("hops export relay");
    let handle = match spec.payload_bytes {
        0 => None,
        n => Some(rt.create_object(CLIENT, n as u64).map_err(runtime_err)?),
    };
    let mut gen = PayloadGen::new(spec.seed, spec.payload_bytes);
    let mut echoed = vec![0u8; spec.payload_bytes];
    let mut one = |i: u64, timed: bool, lat: &mut Vec<u64>| -> Result<(), BenchError> {
        let payload = gen.next_payload();
        let t0 = Instant::now();
        if let Some(h) = handle {
            rt.object_write(h, CLIENT, 0, &payload).map_err(runtime_err)?;
        }
        rt.dispatch(CLIENT, &table, slot, &[], handle).map_err(runtime_err)?;
        if let Some(h) = handle {
            rt.object_read(h, CLIENT, 0, &mut echoed).map_err(runtime_err)?;
        }
        let dt = t0.elapsed().as_nanos() as u64;
        if timed {
            lat.push(dt);
        }
        if echoed != payload {
            return Err(BenchError::ResponseMismatch(i));
        }
        Ok(())
    };

    let mut latencies = Vec::with_capacity(spec.iterations as usize);
    for i in 0..spec.warmup_iterations {
        one(i, false, &mut latencies)?;
    }
    let served0: Vec<u64> = hops.iter().map(|(_, h)| h.served.load(Ordering::Relaxed)).collect();
    let spun0: u64 = hops.iter().map(|(_, h)| h.spun_ns.load(Ordering::Relaxed)).sum();
    let start = Instant::now();
    for i in 0..spec.iterations {
        one(spec.warmup_iterations + i, true, &mut latencies)?;
    }
    let total = start.elapsed().as_nanos() as u64;
    let spun: u64 = hops.iter().map(|(_, h)| h.spun_ns.load(Ordering::Relaxed)).sum::<u64>() - spun0;
    let hop_requests = hops
        .iter()
        .zip(served0)
        .map(|((n, h), s0)| (n.clone(), h.served.load(Ordering::Relaxed) - s0))
        .collect();
    BenchReport::build(mesh.config_name(), spec, latencies, total, spun, hop_requests)
}
