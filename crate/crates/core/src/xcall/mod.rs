//! Cross-service calls and shared objects.

mod call;
mod imports;
mod ledger;

use std::sync::atomic::{AtomicBool, Ordering};

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

use crate::registry::{BindingMode, RegistryError};
use crate::runtime::Runtime;
use crate::sandbox::TrapKind;

pub use ledger::{
    BindingId, BindingState, BorrowToken, Ledger, LedgerEntry, LedgerError, ObjectHandle, ObjectState,
    ProxyBinding, ProxyOps, Side,
};

pub(crate) use call::Invocation;
pub(crate) use imports::{proxy_copy, resolve_import};
pub use imports::ImportResolveError;

/// Host imports a sandboxed service may declare besides peer exports.
/// Each one is a proxy function over the payload of the current call or
/// over an explicitly granted binding.
pub const HOST_IMPORTS: [&str; 5] = [
    "payload.len",
    "payload.read",
    "payload.write",
    "proxy.read",
    "proxy.write",
];

/// In-band status codes returned by host imports.
pub mod status {
    pub const OK: i64 = 0;
    pub const NO_PAYLOAD: i64 = -1;
    pub const OBJECT_OUT_OF_BOUNDS: i64 = -2;
    pub const MEMORY_OUT_OF_BOUNDS: i64 = -3;
    pub const NOT_AUTHORIZED: i64 = -4;
    pub const REVOKED: i64 = -5;
    pub const DESTROYED: i64 = -6;
    pub const FAILED: i64 = -7;
    /// Result of a peer import whose callee failed or trapped.
    pub const CALL_FAILED: i64 = i64::MIN;
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum CallError {
    #[error("service {0:?} is gone")]
    ServiceGone(String),
    #[error("slot {slot} out of range for a table of {slots} slots")]
    SlotOutOfRange { slot: usize, slots: usize },
    #[error("callee trapped: {0}")]
    CalleeTrapped(TrapKind),
    #[error("mesh proxy trapped: {0}")]
    ProxyTrapped(TrapKind),
    #[error("mesh proxy failed: {0}")]
    ProxyFailed(String),
    #[error("service {service:?} has no export {export:?}")]
    ExportNotFound { service: String, export: String },
    #[error("export expects {expected} arguments, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("{service:?} does not hold {handle}")]
    NotAuthorized { service: String, handle: ObjectHandle },
    #[error("service failed: {0}")]
    Failed(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Byte access to the payload of the current call, whatever the binding.
pub trait PayloadIo {
    fn len(&self) -> u64;
    fn read(&mut self, offset: u64, buf: &mut [u8]) -> Result<(), LedgerError>;
    fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), LedgerError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn read_all(&mut self) -> Result<Vec<u8>, LedgerError> {
        let mut buf = vec![0; self.len() as usize];
        self.read(0, &mut buf)?;
        Ok(buf)
    }
}

/// Set when a call reaches a mesh proxy instead of the callee.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct InterceptInfo {
    pub caller: String,
    pub callee: String,
    pub export: String,
    pub slot: usize,
}

/// Everything a native service sees of one incoming call.
pub struct NativeCall<'a> {
    pub(crate) runtime: &'a Runtime,
    pub(crate) caller: &'a str,
    pub(crate) service: &'a str,
    pub(crate) export: &'a str,
    pub(crate) args: &'a [i64],
    pub(crate) payload: Option<&'a mut dyn PayloadIo>,
    pub(crate) handle: Option<ObjectHandle>,
    pub(crate) intercept: Option<&'a InterceptInfo>,
}

impl<'a> NativeCall<'a> {
    pub fn caller(&self) -> &str {
        self.caller
    }

    pub fn service(&self) -> &str {
        self.service
    }

    pub fn export(&self) -> &str {
        self.export
    }

    pub fn args(&self) -> &[i64] {
        self.args
    }

    pub fn intercepted(&self) -> Option<&InterceptInfo> {
        self.intercept
    }

    pub fn payload(&mut self) -> Option<&mut (dyn PayloadIo + 'a)> {
        self.payload.as_deref_mut()
    }

    pub fn payload_len(&self) -> u64 {
        self.payload.as_ref().map_or(0, |p| p.len())
    }

    /// Whole payload, or empty when the call carries none.
    pub fn payload_bytes(&mut self) -> Result<Vec<u8>, CallError> {
        match self.payload.as_deref_mut() {
            Some(p) => Ok(p.read_all()?),
            None => Ok(Vec::new()),
        }
    }

    pub fn write_payload(&mut self, offset: u64, data: &[u8]) -> Result<(), CallError> {
        match self.payload.as_deref_mut() {
            Some(p) => Ok(p.write(offset, data)?),
            None if data.is_empty() => Ok(()),
            None => Err(LedgerError::OutOfBounds(Side::Object).into()),
        }
    }

    /// Calls a peer through this service's own table for it, forwarding the
    /// current payload.
    pub fn call_peer(&self, target: &str, export: &str, args: &[i64]) -> Result<Option<i64>, CallError> {
        self.runtime
            .call_export(self.service, target, export, args, self.handle)
    }
}

pub trait NativeService: Send + Sync {
    fn call(&self, cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError>;
}

impl<F> NativeService for F
where
    F: Fn(&mut NativeCall<'_>) -> Result<Option<i64>, CallError> + Send + Sync,
{
    fn call(&self, cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
        self(cx)
    }
}

pub const CALL_CSV_HEADER: &str = "caller,callee,export,binding,payload_bytes,latency_ns";

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CallRecord {
    pub caller: String,
    pub callee: String,
    pub export: String,
    pub binding: BindingMode,
    pub payload_bytes: u64,
    /// Nanoseconds since the runtime started.
    pub start_ns: u64,
    pub end_ns: u64,
}

impl CallRecord {
    pub fn latency_ns(&self) -> u64 {
        self.end_ns - self.start_ns
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.caller,
            self.callee,
            self.export,
            self.binding.as_str(),
            self.payload_bytes,
            self.latency_ns()
        )
    }
}

#[derive(Default)]
pub(crate) struct CallLog {
    enabled: AtomicBool,
    records: Mutex<Vec<CallRecord>>,
}

impl CallLog {
    pub(crate) fn new(enabled: bool) -> Self {
        CallLog {
            enabled: AtomicBool::new(enabled),
            records: Mutex::default(),
        }
    }

    pub(crate) fn enabled(&self) -> bool {
        self.enabled.load(Ordering::Relaxed)
    }

    pub(crate) fn set_enabled(&self, on: bool) {
        self.enabled.store(on, Ordering::Relaxed);
    }

    pub(crate) fn push(&self, r: CallRecord) {
        self.records.lock().push(r);
    }

    pub(crate) fn drain(&self) -> Vec<CallRecord> {
        std::mem::take(&mut *self.records.lock())
    }
}

/// Payload context of each in-flight call into one sandboxed instance,
/// innermost last.
#[derive(Clone, Copy, Debug)]
pub(crate) enum PayloadCtx {
    None,
    /// Object reachable through a call-scoped proxy binding.
    Proxy {
        handle: ObjectHandle,
        binding: BindingId,
        len: u64,
    },
    /// Object bytes copied to `[0, len)` of the callee's linear memory.
    Window { handle: ObjectHandle, len: u64 },
}

impl PayloadCtx {
    pub(crate) fn handle(&self) -> Option<ObjectHandle> {
        match *self {
            PayloadCtx::None => None,
            PayloadCtx::Proxy { handle, .. } | PayloadCtx::Window { handle, .. } => Some(handle),
        }
    }
}

#[derive(Default)]
pub struct PayloadStack(Mutex<Vec<PayloadCtx>>);

impl PayloadStack {
    pub(crate) fn push(&self, ctx: PayloadCtx) {
        self.0.lock().push(ctx);
    }

    pub(crate) fn pop(&self) {
        self.0.lock().pop();
    }

    pub(crate) fn top(&self) -> PayloadCtx {
        self.0.lock().last().copied().unwrap_or(PayloadCtx::None)
    }
}
