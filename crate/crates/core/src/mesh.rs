//! In-process service mesh.
//!
//! A policy on a (caller, callee) edge can route the caller's calls through
//! a proxy service's `on_call` export before they reach the callee. An
//! `ElideAfter` proxy steps out of the path after `n` intercepted calls by
//! rewriting the caller's table slots to direct routes.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::{Mutex, RwLock};
use serde::Serialize;
use thiserror::Error;

use crate::manifest::{MeshMode, MeshPolicy};
use crate::registry::{negotiate, FunctionTable, Route, ServiceEntry};
use crate::runtime::Runtime;
use crate::xcall::{CallError, InterceptInfo, Invocation, ObjectHandle};

pub const PROXY_EXPORT: &str = "on_call";
pub const EDGE_CSV_HEADER: &str = "caller,callee,total,intercepted,direct,elided_at,p50_ns,p99_ns";
const BUCKETS: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum MeshError {
    #[error("mesh endpoint {0:?} is not registered")]
    UnknownEndpoint(String),
    #[error("proxy {0:?} does not export on_call")]
    ProxyMissingExport(String),
    #[error("no mesh edge {caller:?} -> {callee:?}")]
    UnknownEdge { caller: String, callee: String },
}

pub(crate) struct Edge {
    policy: MeshPolicy,
    proxy: Option<Arc<ServiceEntry>>,
    table: Arc<FunctionTable>,
    intercepted: AtomicU64,
    direct: AtomicU64,
    elided_at: AtomicU64,
    elide: Mutex<()>,
    histogram: [AtomicU64; BUCKETS],
}

impl Edge {
    fn record_latency(&self, ns: u64) {
        let bucket = (64 - ns.leading_zeros()) as usize;
        self.histogram[bucket.min(BUCKETS - 1)].fetch_add(1, Ordering::Relaxed);
    }

    fn stats(&self) -> EdgeStats {
        let intercepted = self.intercepted.load(Ordering::Acquire);
        let direct = self.direct.load(Ordering::Acquire);
        let elided = self.elided_at.load(Ordering::Acquire);
        EdgeStats {
            caller: self.policy.caller.clone(),
            callee: self.policy.callee.clone(),
            calls_total: intercepted + direct,
            calls_intercepted: intercepted,
            calls_direct: direct,
            elided_at: (elided != 0).then_some(elided),
            histogram: self.histogram.iter().map(|b| b.load(Ordering::Relaxed)).collect(),
        }
    }
}

/// Counters for one edge. `calls_total` is always the sum of the other
/// two.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct EdgeStats {
    pub caller: String,
    pub callee: String,
    pub calls_total: u64,
    pub calls_intercepted: u64,
    pub calls_direct: u64,
    pub elided_at: Option<u64>,
    /// Bucket `i` counts calls whose latency `ns` has bit length `i`.
    pub histogram: Vec<u64>,
}

impl EdgeStats {
    /// Upper bound of the log2 bucket holding quantile `q`; 0 when empty.
    pub fn percentile_ns(&self, q: f64) -> u64 {
        let n: u64 = self.histogram.iter().sum();
        if n == 0 {
            return 0;
        }
        let rank = ((q * n as f64).ceil() as u64).clamp(1, n);
        let mut seen = 0;
        for (i, c) in self.histogram.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return if i == 0 { 0 } else { (1u64 << i.min(63)) - 1 };
            }
        }
        u64::MAX
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.caller,
            self.callee,
            self.calls_total,
            self.calls_intercepted,
            self.calls_direct,
            self.elided_at.map(|n| n.to_string()).unwrap_or_default(),
            self.percentile_ns(0.5),
            self.percentile_ns(0.99)
        )
    }
}

#[derive(Default)]
pub struct Mesh {
    edges: RwLock<HashMap<(String, String), Arc<Edge>>>,
}

impl Mesh {
    pub fn policies(&self) -> Vec<MeshPolicy> {
        let mut v: Vec<MeshPolicy> = self.edges.read().values().map(|e| e.policy.clone()).collect();
        v.sort_by(|a, b| (&a.caller, &a.callee).cmp(&(&b.caller, &b.callee)));
        v
    }

    pub fn all_stats(&self) -> Vec<EdgeStats> {
        let mut v: Vec<EdgeStats> = self.edges.read().values().map(|e| e.stats()).collect();
        v.sort_by(|a, b| (&a.caller, &a.callee).cmp(&(&b.caller, &b.callee)));
        v
    }

    pub(crate) fn forget_service(&self, name: &str) {
        self.edges
            .write()
            .retain(|(c, d), e| c != name && d != name && e.policy.mode.proxy() != Some(name));
    }
}

impl Runtime {
    /// Installs `p` on its edge, replacing any earlier policy there.
    pub fn install_policy(&self, p: &MeshPolicy) -> Result<(), MeshError> {
        let reg = &self.shared.registry;
        for name in [&p.caller, &p.callee] {
            if !reg.contains(name) {
                return Err(MeshError::UnknownEndpoint(name.clone()));
            }
        }
        let proxy = match p.mode.proxy() {
            None => None,
            Some(name) => {
                let entry = reg
                    .lookup(name)
                    .ok_or_else(|| MeshError::UnknownEndpoint(name.to_string()))?;
                if !entry.exports().iter().any(|e| e == PROXY_EXPORT) {
                    return Err(MeshError::ProxyMissingExport(name.to_string()));
                }
                Some(entry)
            }
        };
        let table = reg
            .discover(&p.caller, &p.callee)
            .map_err(|_| MeshError::UnknownEndpoint(p.callee.clone()))?;
        let edge = Arc::new(Edge {
            policy: p.clone(),
            proxy,
            table: table.clone(),
            intercepted: AtomicU64::new(0),
            direct: AtomicU64::new(0),
            elided_at: AtomicU64::new(0),
            elide: Mutex::new(()),
            histogram: std::array::from_fn(|_| AtomicU64::new(0)),
        });
        let route = match p.mode {
            MeshMode::Passthrough => Route::Direct,
            _ => Route::Intercepted,
        };
        let mut edges = self.shared.mesh.edges.write();
        table.set_edge(Some(edge.clone()), route);
        edges.insert((p.caller.clone(), p.callee.clone()), edge);
        Ok(())
    }

    /// Calls through the table, honouring whatever policy governs the edge.
    pub fn dispatch(
        &self,
        caller: &str,
        table: &FunctionTable,
        slot: usize,
        args: &[i64],
        payload: Option<ObjectHandle>,
    ) -> Result<Option<i64>, CallError> {
        let Some(edge) = table.edge() else {
            return self.call(caller, table, slot, args, payload);
        };
        let s = table.slots().get(slot).ok_or(CallError::SlotOutOfRange {
            slot,
            slots: table.slots().len(),
        })?;
        let t0 = Instant::now();
        let result = match (s.route(), &edge.proxy) {
            (Route::Intercepted, Some(proxy)) => {
                let r = self.intercept(caller, table, proxy, slot, args, payload);
                edge.intercepted.fetch_add(1, Ordering::AcqRel);
                self.maybe_elide_edge(&edge);
                r
            }
            _ => {
                let r = self.call(caller, table, slot, args, payload);
                edge.direct.fetch_add(1, Ordering::AcqRel);
                r
            }
        };
        edge.record_latency(t0.elapsed().as_nanos() as u64);
        result
    }

    fn intercept(
        &self,
        caller: &str,
        table: &FunctionTable,
        proxy: &Arc<ServiceEntry>,
        slot: usize,
        args: &[i64],
        payload: Option<ObjectHandle>,
    ) -> Result<Option<i64>, CallError> {
        let export = table.slots()[slot].export_name();
        let info = InterceptInfo {
            caller: caller.to_string(),
            callee: table.target_name().to_string(),
            export: export.to_string(),
            slot,
        };
        let len = match payload {
            Some(h) => self.shared.ledger.size(h)? as i64,
            None => 0,
        };
        let proxy_args = [slot as i64, len];
        let proxy_args = match proxy.export_arity(PROXY_EXPORT) {
            Some(n) => &proxy_args[..n.min(2)],
            None => &proxy_args[..],
        };
        let mode = negotiate(
            table.owner_class(),
            proxy.class(),
            self.shared.registry.force_copy(),
        );
        self.invoke_entry(
            proxy,
            Invocation {
                caller,
                export: PROXY_EXPORT,
                args: proxy_args,
                payload,
                mode,
                read_only: true,
                intercept: Some(&info),
            },
        )
        .map_err(|e| match e {
            CallError::CalleeTrapped(k) => CallError::ProxyTrapped(k),
            other => CallError::ProxyFailed(other.to_string()),
        })?;
        self.call(caller, table, slot, args, payload)
    }

    fn maybe_elide_edge(&self, edge: &Edge) -> bool {
        let MeshMode::ElideAfter { n, .. } = edge.policy.mode else {
            return false;
        };
        let _g = edge.elide.lock();
        if edge.elided_at.load(Ordering::Acquire) != 0 {
            return false;
        }
        if edge.intercepted.load(Ordering::Acquire) < n {
            return false;
        }
        for s in edge.table.slots() {
            s.set_route(Route::Direct);
        }
        edge.elided_at.store(n, Ordering::Release);
        true
    }

    /// Runs the elision check for an edge; true if it elided just now.
    pub fn maybe_elide(&self, caller: &str, callee: &str) -> Result<bool, MeshError> {
        let edge = self.edge(caller, callee)?;
        Ok(self.maybe_elide_edge(&edge))
    }

    fn edge(&self, caller: &str, callee: &str) -> Result<Arc<Edge>, MeshError> {
        self.shared
            .mesh
            .edges
            .read()
            .get(&(caller.to_string(), callee.to_string()))
            .cloned()
            .ok_or_else(|| MeshError::UnknownEdge {
                caller: caller.to_string(),
                callee: callee.to_string(),
            })
    }

    pub fn edge_stats(&self, caller: &str, callee: &str) -> Result<EdgeStats, MeshError> {
        Ok(self.edge(caller, callee)?.stats())
    }
}
