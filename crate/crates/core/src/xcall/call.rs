use std::sync::Arc;

use crate::registry::{BindingMode, FunctionTable, SandboxCell, ServiceBody, ServiceEntry};
use crate::runtime::Runtime;
use crate::sandbox::{push_frame, InvokeError, TrapKind, PAGE_SIZE};

use super::{
    BindingId, BorrowToken, CallError, CallRecord, InterceptInfo, Ledger, LedgerError, NativeCall,
    NativeService, ObjectHandle, PayloadCtx, PayloadIo, ProxyBinding, ProxyOps, Side,
};

/// Direct access to object storage for a native holder.
struct DirectPayload<'a> {
    ledger: &'a Ledger,
    handle: ObjectHandle,
    len: u64,
    read_only: bool,
}

impl PayloadIo for DirectPayload<'_> {
    fn len(&self) -> u64 {
        self.len
    }

    fn read(&mut self, offset: u64, buf: &mut [u8]) -> Result<(), LedgerError> {
        self.ledger.read(self.handle, offset, buf)
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), LedgerError> {
        if self.read_only {
            return Err(LedgerError::NotAuthorized {
                handle: self.handle,
                service: String::new(),
            });
        }
        self.ledger.write(self.handle, offset, data)
    }
}

struct ProxyPayload<'a> {
    ledger: &'a Ledger,
    binding: BindingId,
    grantee: &'a str,
    len: u64,
}

impl PayloadIo for ProxyPayload<'_> {
    fn len(&self) -> u64 {
        self.len
    }

    fn read(&mut self, offset: u64, buf: &mut [u8]) -> Result<(), LedgerError> {
        self.ledger.proxy_read(self.binding, self.grantee, offset, buf)
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), LedgerError> {
        self.ledger.proxy_write(self.binding, self.grantee, offset, data)
    }
}

/// Private copy of the payload; written back after the call.
struct CopyPayload {
    buf: Vec<u8>,
    read_only: bool,
}

impl PayloadIo for CopyPayload {
    fn len(&self) -> u64 {
        self.buf.len() as u64
    }

    fn read(&mut self, offset: u64, out: &mut [u8]) -> Result<(), LedgerError> {
        let (a, b) = range(offset, out.len(), self.buf.len())?;
        out.copy_from_slice(&self.buf[a..b]);
        Ok(())
    }

    fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), LedgerError> {
        if self.read_only {
            return Err(LedgerError::NotAuthorized {
                handle: ObjectHandle(0),
                service: String::new(),
            });
        }
        let (a, b) = range(offset, data.len(), self.buf.len())?;
        self.buf[a..b].copy_from_slice(data);
        Ok(())
    }
}

fn range(offset: u64, len: usize, size: usize) -> Result<(usize, usize), LedgerError> {
    offset
        .checked_add(len as u64)
        .filter(|e| *e <= size as u64)
        .map(|e| (offset as usize, e as usize))
        .ok_or(LedgerError::OutOfBounds(Side::Object))
}

/// Returns a call-scoped borrow when dropped.
struct BorrowLease<'a> {
    ledger: &'a Ledger,
    token: BorrowToken,
}

impl Drop for BorrowLease<'_> {
    fn drop(&mut self) {
        let _ = self.ledger.release(self.token);
    }
}

/// Revokes a call-scoped proxy grant when dropped.
struct GrantLease<'a> {
    ledger: &'a Ledger,
    binding: BindingId,
}

impl Drop for GrantLease<'_> {
    fn drop(&mut self) {
        self.ledger.ungrant(self.binding);
    }
}

struct PayloadFrame<'a>(&'a SandboxCell);

impl Drop for PayloadFrame<'_> {
    fn drop(&mut self) {
        self.0.payloads.pop();
    }
}

pub(crate) struct Invocation<'a> {
    pub caller: &'a str,
    pub export: &'a str,
    pub args: &'a [i64],
    pub payload: Option<ObjectHandle>,
    pub mode: BindingMode,
    /// Mesh proxies may observe but not modify the payload.
    pub read_only: bool,
    pub intercept: Option<&'a InterceptInfo>,
}

fn map_invoke(service: &str, e: InvokeError) -> CallError {
    match e {
        InvokeError::Trap(k) => CallError::CalleeTrapped(k),
        InvokeError::ExportNotFound(export) => CallError::ExportNotFound {
            service: service.to_string(),
            export,
        },
        InvokeError::ArityMismatch { expected, got } => CallError::ArityMismatch { expected, got },
    }
}

impl Runtime {
    /// Calls slot `slot` of `table` as `caller`, bypassing any mesh policy
    /// on the edge.
    pub fn call(
        &self,
        caller: &str,
        table: &FunctionTable,
        slot: usize,
        args: &[i64],
        payload: Option<ObjectHandle>,
    ) -> Result<Option<i64>, CallError> {
        let s = table.slots().get(slot).ok_or(CallError::SlotOutOfRange {
            slot,
            slots: table.slots().len(),
        })?;
        self.invoke_entry(
            table.target(),
            Invocation {
                caller,
                export: s.export_name(),
                args,
                payload,
                mode: s.binding(),
                read_only: false,
                intercept: None,
            },
        )
    }

    /// Discovers `target` for `caller` and dispatches `export` through the
    /// mesh.
    pub fn call_export(
        &self,
        caller: &str,
        target: &str,
        export: &str,
        args: &[i64],
        payload: Option<ObjectHandle>,
    ) -> Result<Option<i64>, CallError> {
        let table = self.discover(caller, target)?;
        let slot = table.slot_index(export).ok_or_else(|| CallError::ExportNotFound {
            service: target.to_string(),
            export: export.to_string(),
        })?;
        self.dispatch(caller, &table, slot, args, payload)
    }

    pub(crate) fn invoke_entry(
        &self,
        entry: &Arc<ServiceEntry>,
        inv: Invocation<'_>,
    ) -> Result<Option<i64>, CallError> {
        let _frame = push_frame().map_err(CallError::CalleeTrapped)?;
        let _inflight = entry
            .enter()
            .ok_or_else(|| CallError::ServiceGone(entry.name().to_string()))?;
        if !entry.exports().iter().any(|e| e == inv.export) {
            return Err(CallError::ExportNotFound {
                service: entry.name().to_string(),
                export: inv.export.to_string(),
            });
        }
        let ledger = &self.shared.ledger;
        let start = self.now_ns();
        let (lease, len) = match inv.payload {
            Some(h) => {
                let (token, size) = ledger
                    .borrow_for_call(h, inv.caller, entry.name())
                    .map_err(|e| match e {
                        LedgerError::NotAuthorized { handle, service } => CallError::NotAuthorized { service, handle },
                        other => other.into(),
                    })?;
                (Some(BorrowLease { ledger, token }), size)
            }
            None => (None, 0),
        };
        let result = match &entry.body {
            ServiceBody::Native(svc) => self.run_native(entry, svc.as_ref(), &inv, len),
            ServiceBody::Sandboxed(cell) => self.run_sandboxed(entry, cell, &inv, len),
        };
        drop(lease);
        if self.shared.log.enabled() {
            self.shared.log.push(CallRecord {
                caller: inv.caller.to_string(),
                callee: entry.name().to_string(),
                export: inv.export.to_string(),
                binding: inv.mode,
                payload_bytes: len,
                start_ns: start,
                end_ns: self.now_ns().max(start),
            });
        }
        result
    }

    fn grant_for_call(
        &self,
        h: ObjectHandle,
        inv: &Invocation<'_>,
        grantee: &str,
    ) -> Result<ProxyBinding, CallError> {
        let ops = if inv.read_only {
            ProxyOps::READ
        } else {
            ProxyOps::READ_WRITE
        };
        Ok(self.shared.ledger.grant(h, inv.caller, grantee, ops)?)
    }

    fn run_native(
        &self,
        entry: &ServiceEntry,
        svc: &dyn NativeService,
        inv: &Invocation<'_>,
        len: u64,
    ) -> Result<Option<i64>, CallError> {
        let ledger = &self.shared.ledger;
        let mut cx = NativeCall {
            runtime: self,
            caller: inv.caller,
            service: entry.name(),
            export: inv.export,
            args: inv.args,
            payload: None,
            handle: inv.payload,
            intercept: inv.intercept,
        };
        let Some(h) = inv.payload else {
            return svc.call(&mut cx);
        };
        match inv.mode {
            BindingMode::DirectCall => {
                let mut io = DirectPayload {
                    ledger,
                    handle: h,
                    len,
                    read_only: inv.read_only,
                };
                cx.payload = Some(&mut io);
                svc.call(&mut cx)
            }
            BindingMode::ProxyMediated => {
                let binding = self.grant_for_call(h, inv, entry.name())?;
                let _grant = GrantLease {
                    ledger,
                    binding: binding.id,
                };
                let mut io = ProxyPayload {
                    ledger,
                    binding: binding.id,
                    grantee: entry.name(),
                    len,
                };
                cx.payload = Some(&mut io);
                svc.call(&mut cx)
            }
            BindingMode::CopyInOut => {
                let mut io = CopyPayload {
                    buf: vec![0; len as usize],
                    read_only: inv.read_only,
                };
                ledger.read(h, 0, &mut io.buf)?;
                let result = {
                    cx.payload = Some(&mut io);
                    svc.call(&mut cx)
                };
                if result.is_ok() && !inv.read_only {
                    ledger.write(h, 0, &io.buf)?;
                }
                result
            }
        }
    }

    fn run_sandboxed(
        &self,
        entry: &ServiceEntry,
        cell: &SandboxCell,
        inv: &Invocation<'_>,
        len: u64,
    ) -> Result<Option<i64>, CallError> {
        let ledger = &self.shared.ledger;
        let inst = cell.instance.lock();
        let mut grant = None;
        let ctx = match (inv.payload, inv.mode) {
            (None, _) => PayloadCtx::None,
            (Some(h), BindingMode::CopyInOut) => {
                let have = inst.memory().size();
                if have < len {
                    let delta = (len - have).div_ceil(PAGE_SIZE);
                    if inst.mem_grow(delta as i64) < 0 {
                        return Err(CallError::CalleeTrapped(TrapKind::GrowFailed));
                    }
                }
                let mut buf = vec![0; len as usize];
                ledger.read(h, 0, &mut buf)?;
                inst.memory()
                    .write(0, &buf)
                    .map_err(CallError::CalleeTrapped)?;
                PayloadCtx::Window { handle: h, len }
            }
            // a sandboxed callee never touches object storage directly
            (Some(h), _) => {
                let b = self.grant_for_call(h, inv, entry.name())?;
                grant = Some(GrantLease {
                    ledger,
                    binding: b.id,
                });
                PayloadCtx::Proxy {
                    handle: h,
                    binding: b.id,
                    len,
                }
            }
        };
        cell.payloads.push(ctx);
        let frame = PayloadFrame(cell);
        let result = inst
            .invoke(inv.export, inv.args)
            .map_err(|e| map_invoke(entry.name(), e));
        drop(frame);
        drop(grant);
        if let (Ok(_), PayloadCtx::Window { handle, len }) = (&result, ctx) {
            if !inv.read_only {
                let mut buf = vec![0; len as usize];
                inst.memory()
                    .read(0, &mut buf)
                    .map_err(CallError::CalleeTrapped)?;
                ledger.write(handle, 0, &buf)?;
            }
        }
        result
    }
}
