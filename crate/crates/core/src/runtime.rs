//! Loader and the process-wide runtime handle.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use parking_lot::Mutex;
use serde_json::{json, Value};
use thiserror::Error;

use crate::manifest::{validate_manifest, verify_provenance, Manifest, SafetyClass, ServiceKind, Violation};
use crate::mesh::{Mesh, MeshError};
use crate::registry::{FunctionTable, Registry, RegistryError, SandboxCell, ServiceBody, ServiceEntry};
use crate::sandbox::{
    decode_module, instantiate, verify_module, DecodeError, ImportBindings, InstantiateError, ModuleImage,
    ServiceInstance, VerifyError,
};
use crate::sasmem::{AllocError, BucketCensus, BuddyAllocator, Region, MIN_REGION_SIZE};
use crate::xcall::{
    resolve_import, BindingId, BorrowToken, CallError, CallLog, CallRecord, ImportResolveError, Invocation,
    Ledger, LedgerError, NativeService, ObjectHandle, PayloadStack, ProxyBinding, ProxyOps,
};

/// Modeled address space handed to the buddy allocator when none is given.
pub const DEFAULT_ARENA: u64 = 1 << 40;

/// Caller name used for invocations issued by the embedding host.
pub const HOST_CALLER: &str = "host";

#[derive(Clone, Debug, Default)]
pub struct RuntimeConfig {
    /// Use copy-in/out instead of proxy access on edges with a
    /// region-granular side.
    pub force_copy: bool,
    /// Keep a [`CallRecord`] for every call.
    pub record_calls: bool,
    /// Arena size for `deploy`; by default the smallest power of two that
    /// holds every service region.
    pub arena_size: Option<u64>,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("manifest has {} violation(s): {}", .0.len(), join(.0))]
    Invalid(Vec<Violation>),
    #[error("service {service:?}: toolchain {toolchain:?} is not on the allowlist")]
    Provenance { service: String, toolchain: String },
    #[error("service {service:?}: cannot read {}: {source}", path.display())]
    Io {
        service: String,
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("service {service:?}: {source}")]
    Decode { service: String, source: DecodeError },
    #[error("service {service:?}: {source}")]
    Verify { service: String, source: VerifyError },
    #[error("service {service:?}: {source}")]
    Instantiate { service: String, source: InstantiateError },
    #[error("service {service:?}: {source}")]
    Alloc { service: String, source: AllocError },
    #[error("service {service:?}: {source}")]
    Import { service: String, source: ImportResolveError },
    #[error("native service {0:?} is not provided by this host")]
    MissingNative(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
}

impl LoadError {
    /// Name of the service the error is about, if any.
    pub fn service(&self) -> Option<&str> {
        match self {
            LoadError::Provenance { service, .. }
            | LoadError::Io { service, .. }
            | LoadError::Decode { service, .. }
            | LoadError::Verify { service, .. }
            | LoadError::Instantiate { service, .. }
            | LoadError::Alloc { service, .. }
            | LoadError::Import { service, .. } => Some(service),
            LoadError::MissingNative(s) => Some(s),
            _ => None,
        }
    }
}

fn join(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

#[derive(Clone)]
pub struct NativeSpec {
    pub exports: Vec<String>,
    pub service: Arc<dyn NativeService>,
}

/// Native implementations a host can bind to `native` manifest entries.
#[derive(Clone, Default)]
pub struct NativeCatalog {
    entries: HashMap<String, NativeSpec>,
}

impl NativeCatalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, exports: &[&str], service: Arc<dyn NativeService>) {
        self.entries.insert(
            name.to_string(),
            NativeSpec {
                exports: exports.iter().map(|s| s.to_string()).collect(),
                service,
            },
        );
    }

    pub fn with(mut self, name: &str, exports: &[&str], service: impl NativeService + 'static) -> Self {
        self.insert(name, exports, Arc::new(service));
        self
    }

    pub fn get(&self, name: &str) -> Option<&NativeSpec> {
        self.entries.get(name)
    }
}

pub(crate) struct Shared {
    pub(crate) registry: Registry,
    pub(crate) ledger: Ledger,
    pub(crate) mesh: Mesh,
    pub(crate) allocator: Mutex<BuddyAllocator>,
    pub(crate) log: CallLog,
    epoch: Instant,
}

/// Cheap to clone; all clones share one runtime.
#[derive(Clone)]
pub struct Runtime {
    pub(crate) shared: Arc<Shared>,
}

/// Region length reserved for a sandboxed service with this memory budget.
pub fn region_size_for(max_memory_bytes: u64) -> u64 {
    max_memory_bytes
        .max(MIN_REGION_SIZE)
        .checked_next_power_of_two()
        .unwrap_or(1 << 63)
}

impl Runtime {
    pub fn new(config: RuntimeConfig) -> Result<Self, AllocError> {
        let arena = BuddyAllocator::new(config.arena_size.unwrap_or(DEFAULT_ARENA))?;
        Ok(Runtime {
            shared: Arc::new(Shared {
                registry: Registry::new(config.force_copy),
                ledger: Ledger::new(),
                mesh: Mesh::default(),
                allocator: Mutex::new(arena),
                log: CallLog::new(config.record_calls),
                epoch: Instant::now(),
            }),
        })
    }

    /// Validates `manifest`, loads every service and installs its mesh
    /// policies. Image paths are resolved against `base_dir`.
    pub fn deploy(
        manifest: &Manifest,
        base_dir: &Path,
        natives: &NativeCatalog,
        config: RuntimeConfig,
    ) -> Result<Self, LoadError> {
        let violations = validate_manifest(manifest);
        if !violations.is_empty() {
            return Err(LoadError::Invalid(violations));
        }
        for s in &manifest.services {
            if !verify_provenance(s, &manifest.allowlist) {
                return Err(LoadError::Provenance {
                    service: s.name.clone(),
                    toolchain: s.toolchain.clone(),
                });
            }
        }
        let mut sandboxed: Vec<_> = manifest
            .services
            .iter()
            .filter(|s| s.kind == ServiceKind::Sandboxed)
            .map(|s| (s, region_size_for(s.max_memory_bytes)))
            .collect();
        let total: u64 = sandboxed.iter().map(|(_, n)| n).sum();
        let arena = config.arena_size.unwrap_or_else(|| region_size_for(total));
        let rt = Runtime::new(RuntimeConfig {
            arena_size: Some(arena),
            ..config
        })
        .map_err(|source| LoadError::Alloc {
            service: String::new(),
            source,
        })?;

        // largest first, so a power-of-two arena holding the sum always fits
        sandboxed.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.name.cmp(&b.0.name)));
        let mut regions = HashMap::new();
        for (s, size) in &sandboxed {
            let region = rt
                .shared
                .allocator
                .lock()
                .allocate(&s.name, *size)
                .map_err(|source| LoadError::Alloc {
                    service: s.name.clone(),
                    source,
                })?;
            regions.insert(s.name.clone(), region);
        }

        for s in &manifest.services {
            match s.kind {
                ServiceKind::Sandboxed => {
                    let rel = s.image_path.as_deref().expect("validated: sandboxed has image");
                    let path = base_dir.join(rel);
                    let bytes = std::fs::read(&path).map_err(|source| LoadError::Io {
                        service: s.name.clone(),
                        path: path.clone(),
                        source,
                    })?;
                    let image = decode_module(&bytes).map_err(|source| LoadError::Decode {
                        service: s.name.clone(),
                        source,
                    })?;
                    let region = regions.remove(&s.name).expect("allocated above");
                    rt.install_sandboxed(&s.name, image, &s.imports, region)?;
                }
                ServiceKind::Native => {
                    let spec = natives
                        .get(&s.name)
                        .ok_or_else(|| LoadError::MissingNative(s.name.clone()))?;
                    rt.shared.registry.register_service(
                        &s.name,
                        ServiceBody::Native(spec.service.clone()),
                        spec.exports.clone(),
                        SafetyClass::ObjectGranular,
                    )?;
                }
            }
        }
        for p in &manifest.mesh_policies {
            rt.install_policy(p)?;
        }
        Ok(rt)
    }

    pub fn registry(&self) -> &Registry {
        &self.shared.registry
    }

    pub fn ledger(&self) -> &Ledger {
        &self.shared.ledger
    }

    pub fn mesh(&self) -> &Mesh {
        &self.shared.mesh
    }

    pub(crate) fn now_ns(&self) -> u64 {
        self.shared.epoch.elapsed().as_nanos() as u64
    }

    pub fn register_native(
        &self,
        name: &str,
        exports: &[&str],
        service: impl NativeService + 'static,
    ) -> Result<Arc<ServiceEntry>, RegistryError> {
        self.shared.registry.register_service(
            name,
            ServiceBody::Native(Arc::new(service)),
            exports.iter().map(|s| s.to_string()).collect(),
            SafetyClass::ObjectGranular,
        )
    }

    /// Verifies `image`, places it in a fresh region sized for
    /// `max_memory_bytes` and registers it under `name`.
    pub fn load_sandboxed(
        &self,
        name: &str,
        image: ModuleImage,
        imports: &[String],
        max_memory_bytes: u64,
    ) -> Result<Arc<ServiceEntry>, LoadError> {
        let region = self
            .shared
            .allocator
            .lock()
            .allocate(name, region_size_for(max_memory_bytes))
            .map_err(|source| LoadError::Alloc {
                service: name.to_string(),
                source,
            })?;
        let r = self.install_sandboxed(name, image, imports, region);
        if r.is_err() {
            let _ = self.shared.allocator.lock().free(name);
        }
        r
    }

    fn install_sandboxed(
        &self,
        name: &str,
        image: ModuleImage,
        imports: &[String],
        region: Region,
    ) -> Result<Arc<ServiceEntry>, LoadError> {
        let vm = verify_module(image).map_err(|source| LoadError::Verify {
            service: name.to_string(),
            source,
        })?;
        let payloads = Arc::new(PayloadStack::default());
        let mut bindings = ImportBindings::default();
        for imp in &vm.image().imports {
            let f = resolve_import(Arc::downgrade(&self.shared), name, payloads.clone(), imp, imports)
                .map_err(|source| LoadError::Import {
                    service: name.to_string(),
                    source,
                })?;
            bindings.push(f);
        }
        let exports = vm.image().export_names();
        let inst = instantiate(vm, bindings, region).map_err(|source| LoadError::Instantiate {
            service: name.to_string(),
            source,
        })?;
        Ok(self.shared.registry.register_service(
            name,
            ServiceBody::Sandboxed(Box::new(SandboxCell::new(inst, payloads))),
            exports,
            SafetyClass::RegionGranular,
        )?)
    }

    /// Removes a service after its in-flight calls finish and returns its
    /// region to the allocator.
    pub fn unregister(&self, name: &str) -> Result<(), RegistryError> {
        self.shared.registry.unregister(name)?;
        let _ = self.shared.allocator.lock().free(name);
        self.shared.mesh.forget_service(name);
        Ok(())
    }

    pub fn discover(&self, caller: &str, target: &str) -> Result<Arc<FunctionTable>, RegistryError> {
        self.shared.registry.discover(caller, target)
    }

    pub fn entry(&self, name: &str) -> Option<Arc<ServiceEntry>> {
        self.shared.registry.lookup(name)
    }

    /// Invokes an export from outside any service, with no payload.
    pub fn invoke_export(&self, service: &str, export: &str, args: &[i64]) -> Result<Option<i64>, CallError> {
        let entry = self
            .entry(service)
            .ok_or_else(|| RegistryError::NotFound(service.to_string()))?;
        self.invoke_entry(
            &entry,
            Invocation {
                caller: HOST_CALLER,
                export,
                args,
                payload: None,
                mode: crate::registry::BindingMode::DirectCall,
                read_only: false,
                intercept: None,
            },
        )
    }

    /// Runs `f` on a sandboxed service's instance while holding its lock.
    pub fn with_instance<R>(&self, service: &str, f: impl FnOnce(&ServiceInstance) -> R) -> Option<R> {
        let entry = self.entry(service)?;
        match &entry.body {
            ServiceBody::Sandboxed(cell) => Some(f(&cell.instance.lock())),
            ServiceBody::Native(_) => None,
        }
    }

    fn require(&self, name: &str) -> Result<(), RegistryError> {
        if self.shared.registry.contains(name) {
            Ok(())
        } else {
            Err(RegistryError::UnknownService(name.to_string()))
        }
    }

    pub fn create_object(&self, owner: &str, size: u64) -> Result<ObjectHandle, CallError> {
        if size == 0 {
            return Err(LedgerError::ZeroSize.into());
        }
        self.require(owner)?;
        Ok(self.shared.ledger.create(owner, size)?)
    }

    pub fn transfer_ownership(&self, h: ObjectHandle, from: &str, to: &str) -> Result<(), CallError> {
        self.require(to)?;
        Ok(self.shared.ledger.transfer(h, from, to)?)
    }

    pub fn borrow(&self, h: ObjectHandle, service: &str) -> Result<BorrowToken, CallError> {
        self.require(service)?;
        Ok(self.shared.ledger.borrow(h, service)?)
    }

    pub fn release(&self, token: BorrowToken) -> Result<(), LedgerError> {
        self.shared.ledger.release(token)
    }

    pub fn owner_release(&self, h: ObjectHandle, service: &str) -> Result<(), LedgerError> {
        self.shared.ledger.owner_release(h, service)
    }

    /// Direct copy out of an object by one of its holders.
    pub fn object_read(&self, h: ObjectHandle, service: &str, offset: u64, buf: &mut [u8]) -> Result<(), CallError> {
        self.check_holder(h, service)?;
        Ok(self.shared.ledger.read(h, offset, buf)?)
    }

    pub fn object_write(&self, h: ObjectHandle, service: &str, offset: u64, data: &[u8]) -> Result<(), CallError> {
        self.check_holder(h, service)?;
        Ok(self.shared.ledger.write(h, offset, data)?)
    }

    fn check_holder(&self, h: ObjectHandle, service: &str) -> Result<(), CallError> {
        if self.shared.ledger.is_holder(h, service) {
            Ok(())
        } else {
            Err(CallError::NotAuthorized {
                service: service.to_string(),
                handle: h,
            })
        }
    }

    pub fn grant_proxy(
        &self,
        h: ObjectHandle,
        granter: &str,
        grantee: &str,
        ops: ProxyOps,
    ) -> Result<ProxyBinding, CallError> {
        self.require(grantee)?;
        Ok(self.shared.ledger.grant(h, granter, grantee, ops)?)
    }

    pub fn revoke_proxy(&self, id: BindingId) -> Result<(), LedgerError> {
        self.shared.ledger.revoke(id)
    }

    /// Copies `len` object bytes at `obj_offset` into the grantee's linear
    /// memory at `mem_offset`.
    pub fn proxy_read(&self, id: BindingId, obj_offset: u64, mem_offset: u64, len: u64) -> Result<(), CallError> {
        self.proxy_transfer(id, obj_offset, mem_offset, len, true)
    }

    pub fn proxy_write(&self, id: BindingId, obj_offset: u64, mem_offset: u64, len: u64) -> Result<(), CallError> {
        self.proxy_transfer(id, obj_offset, mem_offset, len, false)
    }

    fn proxy_transfer(
        &self,
        id: BindingId,
        obj_offset: u64,
        mem_offset: u64,
        len: u64,
        into_memory: bool,
    ) -> Result<(), CallError> {
        let b = self
            .shared
            .ledger
            .binding(id)
            .ok_or(LedgerError::UnknownBinding(id))?;
        let ledger = &self.shared.ledger;
        let r = self.with_instance(&b.grantee, |inst| {
            crate::xcall::proxy_copy(ledger, id, &b.grantee, inst, obj_offset, mem_offset, len, into_memory)
        });
        match r {
            Some(r) => Ok(r?),
            None => Err(RegistryError::UnknownService(b.grantee).into()),
        }
    }

    pub fn set_recording(&self, on: bool) {
        self.shared.log.set_enabled(on);
    }

    /// Drains the recorded calls.
    pub fn take_call_records(&self) -> Vec<CallRecord> {
        self.shared.log.drain()
    }

    pub fn regions(&self) -> Vec<Region> {
        self.shared.allocator.lock().regions().cloned().collect()
    }

    pub fn fragmentation_report(&self) -> std::collections::BTreeMap<u32, BucketCensus> {
        self.shared.allocator.lock().fragmentation_report()
    }

    /// Registry, tables, mesh policies and allocator census as JSON.
    pub fn inspect(&self) -> Value {
        let alloc = self.shared.allocator.lock();
        let policies = Manifest {
            mesh_policies: self.shared.mesh.policies(),
            ..Default::default()
        }
        .to_value()["mesh"]
            .take();
        let report: serde_json::Map<String, Value> = alloc
            .fragmentation_report()
            .into_iter()
            .map(|(c, b)| (c.to_string(), json!(b)))
            .collect();
        json!({
            "registry": self.shared.registry.dump(),
            "mesh": policies,
            "edges": self.shared.mesh.all_stats(),
            "allocator": {
                "arena_size": alloc.arena_size(),
                "regions": alloc.regions().collect::<Vec<_>>(),
                "fragmentation_report": report,
            },
        })
    }
}
