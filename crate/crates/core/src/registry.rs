//! Service discovery.
//!
//! Registration makes a service discoverable by name; `discover` hands the
//! caller a private [`FunctionTable`] whose slots are the callee's exports.
//! After discovery every interaction is a call through a table slot.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicU8, AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{ReentrantMutex, RwLock};
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::manifest::SafetyClass;
use crate::mesh::Edge;
use crate::sandbox::ServiceInstance;
use crate::xcall::{NativeService, PayloadStack};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum BindingMode {
    DirectCall,
    ProxyMediated,
    CopyInOut,
}

impl BindingMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BindingMode::DirectCall => "direct_call",
            BindingMode::ProxyMediated => "proxy_mediated",
            BindingMode::CopyInOut => "copy_in_out",
        }
    }
}

/// Picks how data crosses the edge between two safety classes.
///
/// Two object-granular services share the type system and call directly.
/// Any edge touching a region-granular service exchanges buffers through
/// proxy access, or by copy when `force_copy` is set.
pub fn negotiate(caller: SafetyClass, callee: SafetyClass, force_copy: bool) -> BindingMode {
    match (caller, callee) {
        (SafetyClass::ObjectGranular, SafetyClass::ObjectGranular) => BindingMode::DirectCall,
        _ if force_copy => BindingMode::CopyInOut,
        _ => BindingMode::ProxyMediated,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("service {0:?} is already registered")]
    DuplicateName(String),
    #[error("service {0:?} registered with no exports")]
    EmptyExports(String),
    #[error("service {0:?} not found")]
    NotFound(String),
    #[error("caller {0:?} is not registered")]
    UnknownCaller(String),
    #[error("service {0:?} is not registered")]
    UnknownService(String),
}

/// A sandboxed instance plus the payload contexts of its in-flight calls.
pub struct SandboxCell {
    pub(crate) instance: ReentrantMutex<ServiceInstance>,
    pub(crate) payloads: Arc<PayloadStack>,
    pub(crate) export_arity: HashMap<String, usize>,
}

impl SandboxCell {
    pub(crate) fn new(instance: ServiceInstance, payloads: Arc<PayloadStack>) -> Self {
        let image = instance.module().image();
        let export_arity = image
            .exports
            .iter()
            .map(|e| (e.name.clone(), image.functions[e.func as usize].nargs as usize))
            .collect();
        SandboxCell {
            instance: ReentrantMutex::new(instance),
            payloads,
            export_arity,
        }
    }
}

pub enum ServiceBody {
    Sandboxed(Box<SandboxCell>),
    Native(Arc<dyn NativeService>),
}

pub struct ServiceEntry {
    name: String,
    class: SafetyClass,
    exports: Vec<String>,
    pub(crate) body: ServiceBody,
    alive: AtomicBool,
    inflight: AtomicUsize,
    served: AtomicU64,
}

/// Marks one call as in flight on a service until dropped.
pub(crate) struct InflightGuard<'a>(&'a ServiceEntry);

impl Drop for InflightGuard<'_> {
    fn drop(&mut self) {
        self.0.inflight.fetch_sub(1, Ordering::AcqRel);
    }
}

impl ServiceEntry {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn class(&self) -> SafetyClass {
        self.class
    }

    pub fn exports(&self) -> &[String] {
        &self.exports
    }

    pub fn is_alive(&self) -> bool {
        self.alive.load(Ordering::Acquire)
    }

    pub fn is_sandboxed(&self) -> bool {
        matches!(self.body, ServiceBody::Sandboxed(_))
    }

    /// Calls admitted into this service so far.
    pub fn served(&self) -> u64 {
        self.served.load(Ordering::Relaxed)
    }

    pub(crate) fn enter(&self) -> Option<InflightGuard<'_>> {
        self.inflight.fetch_add(1, Ordering::AcqRel);
        let guard = InflightGuard(self);
        if !self.is_alive() {
            return None;
        }
        self.served.fetch_add(1, Ordering::Relaxed);
        Some(guard)
    }

    /// Argument count of a sandboxed export; `None` for native services,
    /// which accept any argument vector.
    pub(crate) fn export_arity(&self, export: &str) -> Option<usize> {
        match &self.body {
            ServiceBody::Sandboxed(cell) => cell.export_arity.get(export).copied(),
            ServiceBody::Native(_) => None,
        }
    }
}

const ROUTE_DIRECT: u8 = 0;
const ROUTE_INTERCEPTED: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Route {
    Direct,
    Intercepted,
}

pub struct TableSlot {
    export_name: String,
    binding: BindingMode,
    route: AtomicU8,
}

impl TableSlot {
    pub fn export_name(&self) -> &str {
        &self.export_name
    }

    pub fn binding(&self) -> BindingMode {
        self.binding
    }

    pub fn route(&self) -> Route {
        match self.route.load(Ordering::Acquire) {
            ROUTE_DIRECT => Route::Direct,
            _ => Route::Intercepted,
        }
    }

    pub(crate) fn set_route(&self, route: Route) {
        let v = match route {
            Route::Direct => ROUTE_DIRECT,
            Route::Intercepted => ROUTE_INTERCEPTED,
        };
        self.route.store(v, Ordering::Release);
    }
}

/// Caller-private view of one callee. Slot order is the callee's export
/// order and never changes; only a slot's route may be rewritten.
pub struct FunctionTable {
    owner: String,
    owner_class: SafetyClass,
    target: Arc<ServiceEntry>,
    slots: Vec<TableSlot>,
    edge: RwLock<Option<Arc<Edge>>>,
}

impl FunctionTable {
    pub fn owner(&self) -> &str {
        &self.owner
    }

    pub fn owner_class(&self) -> SafetyClass {
        self.owner_class
    }

    pub fn target_name(&self) -> &str {
        self.target.name()
    }

    pub fn target(&self) -> &Arc<ServiceEntry> {
        &self.target
    }

    pub fn slots(&self) -> &[TableSlot] {
        &self.slots
    }

    pub fn slot_index(&self, export: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.export_name == export)
    }

    pub(crate) fn edge(&self) -> Option<Arc<Edge>> {
        self.edge.read().clone()
    }

    pub(crate) fn set_edge(&self, edge: Option<Arc<Edge>>, route: Route) {
        let mut slot = self.edge.write();
        for s in &self.slots {
            s.set_route(route);
        }
        *slot = edge;
    }

    fn dump(&self) -> Value {
        json!({
            "owner": self.owner,
            "target": self.target.name(),
            "slots": self.slots.iter().map(|s| json!({
                "export": s.export_name,
                "binding": s.binding.as_str(),
                "route": s.route(),
            })).collect::<Vec<_>>(),
        })
    }
}

type TableMap = HashMap<String, HashMap<String, Arc<FunctionTable>>>;

#[derive(Default)]
pub struct Registry {
    services: RwLock<HashMap<String, Arc<ServiceEntry>>>,
    /// caller -> target -> table
    tables: RwLock<TableMap>,
    force_copy: AtomicBool,
}

impl Registry {
    pub fn new(force_copy: bool) -> Self {
        Registry {
            force_copy: AtomicBool::new(force_copy),
            ..Default::default()
        }
    }

    pub fn force_copy(&self) -> bool {
        self.force_copy.load(Ordering::Relaxed)
    }

    /// Applies to tables created after the change.
    pub fn set_force_copy(&self, on: bool) {
        self.force_copy.store(on, Ordering::Relaxed);
    }

    pub fn register_service(
        &self,
        name: &str,
        body: ServiceBody,
        exports: Vec<String>,
        class: SafetyClass,
    ) -> Result<Arc<ServiceEntry>, RegistryError> {
        if exports.is_empty() {
            return Err(RegistryError::EmptyExports(name.to_string()));
        }
        let mut services = self.services.write();
        if services.contains_key(name) {
            return Err(RegistryError::DuplicateName(name.to_string()));
        }
        let entry = Arc::new(ServiceEntry {
            name: name.to_string(),
            class,
            exports,
            body,
            alive: AtomicBool::new(true),
            inflight: AtomicUsize::new(0),
            served: AtomicU64::new(0),
        });
        services.insert(name.to_string(), entry.clone());
        Ok(entry)
    }

    pub fn lookup(&self, name: &str) -> Option<Arc<ServiceEntry>> {
        self.services.read().get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.services.read().contains_key(name)
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<_> = self.services.read().keys().cloned().collect();
        v.sort();
        v
    }

    /// Returns the caller's table for `target`, building it on first use.
    /// Later calls return the same table object.
    pub fn discover(&self, caller: &str, target: &str) -> Result<Arc<FunctionTable>, RegistryError> {
        if let Some(t) = self.tables.read().get(caller).and_then(|m| m.get(target)) {
            return Ok(t.clone());
        }
        let (caller_entry, target_entry) = {
            let services = self.services.read();
            let c = services
                .get(caller)
                .cloned()
                .ok_or_else(|| RegistryError::UnknownCaller(caller.to_string()))?;
            let t = services
                .get(target)
                .cloned()
                .ok_or_else(|| RegistryError::NotFound(target.to_string()))?;
            (c, t)
        };
        let mut tables = self.tables.write();
        let per_caller = tables.entry(caller.to_string()).or_default();
        if let Some(t) = per_caller.get(target) {
            return Ok(t.clone());
        }
        // the target may have been unregistered between the two locks
        if !target_entry.is_alive() {
            return Err(RegistryError::NotFound(target.to_string()));
        }
        let binding = negotiate(caller_entry.class, target_entry.class, self.force_copy());
        let table = Arc::new(FunctionTable {
            owner: caller.to_string(),
            owner_class: caller_entry.class,
            slots: target_entry
                .exports
                .iter()
                .map(|e| TableSlot {
                    export_name: e.clone(),
                    binding,
                    route: AtomicU8::new(ROUTE_DIRECT),
                })
                .collect(),
            target: target_entry,
            edge: RwLock::new(None),
        });
        per_caller.insert(target.to_string(), table.clone());
        Ok(table)
    }

    /// Removes a service once its in-flight calls drain. Tables that point
    /// at it stay valid objects but every call through them fails.
    pub fn unregister(&self, name: &str) -> Result<Arc<ServiceEntry>, RegistryError> {
        let entry = self
            .services
            .write()
            .remove(name)
            .ok_or_else(|| RegistryError::UnknownService(name.to_string()))?;
        entry.alive.store(false, Ordering::Release);
        while entry.inflight.load(Ordering::Acquire) != 0 {
            std::thread::yield_now();
        }
        let mut tables = self.tables.write();
        tables.remove(name);
        for per_caller in tables.values_mut() {
            per_caller.remove(name);
        }
        Ok(entry)
    }

    pub fn dump(&self) -> Value {
        let services = self.services.read();
        let tables = self.tables.read();
        let mut names: Vec<&String> = services.keys().collect();
        names.sort();
        let entries: Vec<Value> = names
            .into_iter()
            .map(|n| {
                let e = &services[n];
                let mut owned: Vec<&Arc<FunctionTable>> =
                    tables.get(n).map(|m| m.values().collect()).unwrap_or_default();
                owned.sort_by(|a, b| a.target_name().cmp(b.target_name()));
                json!({
                    "name": e.name,
                    "class": e.class,
                    "kind": if e.is_sandboxed() { "sandboxed" } else { "native" },
                    "exports": e.exports,
                    "tables": owned.into_iter().map(|t| t.dump()).collect::<Vec<_>>(),
                })
            })
            .collect();
        Value::Array(entries)
    }
}
