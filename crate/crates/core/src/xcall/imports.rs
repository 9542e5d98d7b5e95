//! Host functions bound into sandboxed instances.
//!
//! A sandboxed service sees exactly two kinds of imports: the proxy
//! functions in [`HOST_IMPORTS`](super::HOST_IMPORTS), and peer exports
//! named `<service>.<export>` that resolve to slots of its own function
//! tables. Nothing else in the runtime is reachable from inside a sandbox.

use std::sync::{Arc, Weak};

use parking_lot::Mutex;
use thiserror::Error;

use crate::registry::FunctionTable;
use crate::runtime::{Runtime, Shared};
use crate::sandbox::{ImportFn, ServiceInstance, TrapKind, IMPORT_ARITY};

use super::{status, BindingId, CallError, Ledger, LedgerError, PayloadCtx, PayloadStack, Side};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum ImportResolveError {
    #[error("import {0:?} is neither a host function nor a peer export")]
    Forbidden(String),
    #[error("import {import:?} targets {service:?}, which is not declared in the service's imports")]
    Undeclared { import: String, service: String },
}

fn ledger_code(e: &LedgerError) -> i64 {
    match e {
        LedgerError::OutOfBounds(Side::Object) => status::OBJECT_OUT_OF_BOUNDS,
        LedgerError::OutOfBounds(Side::Grantee) => status::MEMORY_OUT_OF_BOUNDS,
        LedgerError::NotAuthorized { .. } | LedgerError::UnknownBinding(_) => status::NOT_AUTHORIZED,
        LedgerError::Revoked(_) => status::REVOKED,
        LedgerError::AlreadyDestroyed(_) => status::DESTROYED,
        _ => status::FAILED,
    }
}

fn to_range(off: i64, len: i64) -> Option<(u64, u64)> {
    if off < 0 || len < 0 {
        return None;
    }
    Some((off as u64, len as u64))
}

/// Copies between a proxied object and the grantee's linear memory.
/// `into_memory` selects the read direction.
#[allow(clippy::too_many_arguments)]
pub(crate) fn proxy_copy(
    ledger: &Ledger,
    binding: BindingId,
    grantee: &str,
    inst: &ServiceInstance,
    obj_offset: u64,
    mem_offset: u64,
    len: u64,
    into_memory: bool,
) -> Result<(), LedgerError> {
    let size = inst.memory().size();
    if mem_offset.checked_add(len).is_none_or(|e| e > size) {
        return Err(LedgerError::OutOfBounds(Side::Grantee));
    }
    let mut buf = vec![0; len as usize];
    if into_memory {
        ledger.proxy_read(binding, grantee, obj_offset, &mut buf)?;
        inst.memory()
            .write(mem_offset, &buf)
            .map_err(|_| LedgerError::OutOfBounds(Side::Grantee))
    } else {
        inst.memory()
            .read(mem_offset, &mut buf)
            .map_err(|_| LedgerError::OutOfBounds(Side::Grantee))?;
        ledger.proxy_write(binding, grantee, obj_offset, &buf)
    }
}

fn payload_copy(
    ledger: &Ledger,
    grantee: &str,
    inst: &ServiceInstance,
    ctx: PayloadCtx,
    a: [i64; IMPORT_ARITY],
    into_memory: bool,
) -> i64 {
    let (Some((obj_off, len)), Some((mem_off, _))) = (to_range(a[0], a[2]), to_range(a[1], 0)) else {
        return status::OBJECT_OUT_OF_BOUNDS;
    };
    match ctx {
        PayloadCtx::None => status::NO_PAYLOAD,
        PayloadCtx::Proxy { binding, .. } => {
            match proxy_copy(ledger, binding, grantee, inst, obj_off, mem_off, len, into_memory) {
                Ok(()) => status::OK,
                Err(e) => ledger_code(&e),
            }
        }
        PayloadCtx::Window { len: plen, .. } => {
            if obj_off.checked_add(len).is_none_or(|e| e > plen) {
                return status::OBJECT_OUT_OF_BOUNDS;
            }
            let mut mem = inst.memory();
            if mem_off.checked_add(len).is_none_or(|e| e > mem.size()) {
                return status::MEMORY_OUT_OF_BOUNDS;
            }
            let (src, dst) = if into_memory {
                (obj_off, mem_off)
            } else {
                (mem_off, obj_off)
            };
            match mem.copy_within(src, dst, len) {
                Ok(()) => status::OK,
                Err(_) => status::MEMORY_OUT_OF_BOUNDS,
            }
        }
    }
}

fn upgrade(rt: &Weak<Shared>) -> Result<Runtime, TrapKind> {
    rt.upgrade()
        .map(|shared| Runtime { shared })
        .ok_or(TrapKind::UnreachableImport)
}

/// Builds the host function for import `name` of sandboxed service
/// `service`. `declared` is the service's manifest import list.
pub(crate) fn resolve_import(
    rt: Weak<Shared>,
    service: &str,
    payloads: Arc<PayloadStack>,
    name: &str,
    declared: &[String],
) -> Result<ImportFn, ImportResolveError> {
    let me = service.to_string();
    let f: ImportFn = match name {
        "payload.len" => Arc::new(move |_, _| {
            Ok(match payloads.top() {
                PayloadCtx::None => status::NO_PAYLOAD,
                PayloadCtx::Proxy { len, .. } | PayloadCtx::Window { len, .. } => len as i64,
            })
        }),
        "payload.read" | "payload.write" => {
            let into_memory = name == "payload.read";
            Arc::new(move |inst, a| {
                let rt = upgrade(&rt)?;
                Ok(payload_copy(&rt.shared.ledger, &me, inst, payloads.top(), a, into_memory))
            })
        }
        "proxy.read" | "proxy.write" => {
            let into_memory = name == "proxy.read";
            Arc::new(move |inst, a| {
                let rt = upgrade(&rt)?;
                let (Some((obj_off, len)), Some((mem_off, _)), true) =
                    (to_range(a[1], a[3]), to_range(a[2], 0), a[0] >= 0)
                else {
                    return Ok(status::OBJECT_OUT_OF_BOUNDS);
                };
                let binding = BindingId(a[0] as u64);
                Ok(
                    match proxy_copy(&rt.shared.ledger, binding, &me, inst, obj_off, mem_off, len, into_memory) {
                        Ok(()) => status::OK,
                        Err(e) => ledger_code(&e),
                    },
                )
            })
        }
        _ => {
            let Some((target, export)) = name.rsplit_once('.') else {
                return Err(ImportResolveError::Forbidden(name.to_string()));
            };
            if target.is_empty() || export.is_empty() {
                return Err(ImportResolveError::Forbidden(name.to_string()));
            }
            if !declared.iter().any(|d| d == target) {
                return Err(ImportResolveError::Undeclared {
                    import: name.to_string(),
                    service: target.to_string(),
                });
            }
            peer_import(rt, me, payloads, target.to_string(), export.to_string())
        }
    };
    Ok(f)
}

fn peer_import(
    rt: Weak<Shared>,
    me: String,
    payloads: Arc<PayloadStack>,
    target: String,
    export: String,
) -> ImportFn {
    let cache: Mutex<Option<(Arc<FunctionTable>, usize)>> = Mutex::new(None);
    Arc::new(move |_, a| {
        let rt = upgrade(&rt)?;
        let (table, slot) = {
            let mut c = cache.lock();
            match &*c {
                Some((t, s)) if t.target().is_alive() => (t.clone(), *s),
                _ => {
                    let t = rt
                        .discover(&me, &target)
                        .map_err(|_| TrapKind::UnreachableImport)?;
                    let s = t.slot_index(&export).ok_or(TrapKind::UnreachableImport)?;
                    *c = Some((t.clone(), s));
                    (t, s)
                }
            }
        };
        let args = match table.target().export_arity(&export) {
            Some(n) if n <= IMPORT_ARITY => &a[..n],
            Some(_) => return Err(TrapKind::UnreachableImport),
            None => &a[..],
        };
        match rt.dispatch(&me, &table, slot, args, payloads.top().handle()) {
            Ok(v) => Ok(v.unwrap_or(0)),
            Err(CallError::ServiceGone(_)) => Err(TrapKind::UnreachableImport),
            Err(CallError::CalleeTrapped(TrapKind::CallDepthExceeded)) => Err(TrapKind::CallDepthExceeded),
            Err(_) => Ok(status::CALL_FAILED),
        }
    })
}
