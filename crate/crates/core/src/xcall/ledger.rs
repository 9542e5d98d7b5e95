//! Shared objects and their ownership ledger.
//!
//! Object storage lives here, outside every service region. Services reach
//! it only through the runtime: directly when they are native holders, or
//! through proxy bindings.

use std::collections::HashMap;
use std::fmt;

use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ObjectHandle(pub u64);

impl fmt::Display for ObjectHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "obj#{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub struct BorrowToken(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct BindingId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ProxyOps {
    pub read: bool,
    pub write: bool,
}

impl ProxyOps {
    pub const READ: ProxyOps = ProxyOps { read: true, write: false };
    pub const WRITE: ProxyOps = ProxyOps { read: false, write: true };
    pub const READ_WRITE: ProxyOps = ProxyOps { read: true, write: true };

    fn union(self, other: ProxyOps) -> ProxyOps {
        ProxyOps {
            read: self.read || other.read,
            write: self.write || other.write,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum ObjectState {
    Live,
    PendingDestroy,
    Destroyed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum BindingState {
    Active,
    Revoked,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Side {
    Object,
    Grantee,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Object => "object",
            Side::Grantee => "grantee",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("object size must be at least one byte")]
    ZeroSize,
    #[error("unknown handle {0}")]
    UnknownHandle(ObjectHandle),
    #[error("{0} is already destroyed")]
    AlreadyDestroyed(ObjectHandle),
    #[error("{service:?} is not the owner of {handle}")]
    NotOwner { handle: ObjectHandle, service: String },
    #[error("{service:?} already released ownership of {handle}")]
    OwnerReleased { handle: ObjectHandle, service: String },
    #[error("borrow token {0:?} is not outstanding")]
    DoubleRelease(BorrowToken),
    #[error("{service:?} is not authorized for this access to {handle}")]
    NotAuthorized { handle: ObjectHandle, service: String },
    #[error("binding {0:?} has been revoked")]
    Revoked(BindingId),
    #[error("unknown proxy binding {0:?}")]
    UnknownBinding(BindingId),
    #[error("access out of bounds on the {0} side")]
    OutOfBounds(Side),
}

/// Point-in-time view of one object's ledger state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerEntry {
    pub handle: ObjectHandle,
    pub size: u64,
    pub owner: String,
    /// Sorted multiset of current borrowers.
    pub borrowers: Vec<String>,
    pub state: ObjectState,
    pub destructions: u32,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ProxyBinding {
    pub id: BindingId,
    pub handle: ObjectHandle,
    pub grantee: String,
    pub ops: ProxyOps,
    pub state: BindingState,
}

struct Object {
    size: u64,
    owner: String,
    owner_released: bool,
    borrows: HashMap<u64, String>,
    state: ObjectState,
    storage: Vec<u8>,
    destructions: u32,
}

struct Binding {
    public: ProxyBinding,
    /// Outstanding call-scoped grants; explicit grants count as one.
    grants: u32,
}

#[derive(Default)]
struct State {
    next_handle: u64,
    next_token: u64,
    next_binding: u64,
    objects: HashMap<u64, Object>,
    tokens: HashMap<u64, u64>,
    bindings: HashMap<u64, Binding>,
    by_grantee: HashMap<(u64, String), u64>,
    destroyed_total: u64,
}

impl State {
    fn object(&self, h: ObjectHandle) -> Result<&Object, LedgerError> {
        self.objects.get(&h.0).ok_or(LedgerError::UnknownHandle(h))
    }

    fn object_mut(&mut self, h: ObjectHandle) -> Result<&mut Object, LedgerError> {
        self.objects.get_mut(&h.0).ok_or(LedgerError::UnknownHandle(h))
    }

    fn live_mut(&mut self, h: ObjectHandle) -> Result<&mut Object, LedgerError> {
        let o = self.object_mut(h)?;
        if o.state == ObjectState::Destroyed {
            return Err(LedgerError::AlreadyDestroyed(h));
        }
        Ok(o)
    }

    fn maybe_destroy(&mut self, h: ObjectHandle) {
        let o = self.objects.get_mut(&h.0).expect("checked by caller");
        if o.owner_released && o.borrows.is_empty() && o.state != ObjectState::Destroyed {
            o.state = ObjectState::Destroyed;
            o.storage = Vec::new();
            o.destructions += 1;
            self.destroyed_total += 1;
        }
    }
}

fn check_range(offset: u64, len: usize, size: u64, side: Side) -> Result<(usize, usize), LedgerError> {
    let end = offset
        .checked_add(len as u64)
        .filter(|e| *e <= size)
        .ok_or(LedgerError::OutOfBounds(side))?;
    Ok((offset as usize, end as usize))
}

/// Internally synchronized; every operation is linearizable.
#[derive(Default)]
pub struct Ledger {
    state: Mutex<State>,
}

impl Ledger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn create(&self, owner: &str, size: u64) -> Result<ObjectHandle, LedgerError> {
        if size == 0 {
            return Err(LedgerError::ZeroSize);
        }
        let mut st = self.state.lock();
        st.next_handle += 1;
        let h = st.next_handle;
        st.objects.insert(
            h,
            Object {
                size,
                owner: owner.to_string(),
                owner_released: false,
                borrows: HashMap::new(),
                state: ObjectState::Live,
                storage: vec![0; size as usize],
                destructions: 0,
            },
        );
        Ok(ObjectHandle(h))
    }

    pub fn transfer(&self, h: ObjectHandle, from: &str, to: &str) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let o = st.live_mut(h)?;
        if o.owner != from {
            return Err(LedgerError::NotOwner {
                handle: h,
                service: from.to_string(),
            });
        }
        if o.owner_released {
            return Err(LedgerError::OwnerReleased {
                handle: h,
                service: from.to_string(),
            });
        }
        o.owner = to.to_string();
        Ok(())
    }

    /// The owner gives the object up; it is destroyed once no borrows remain.
    pub fn owner_release(&self, h: ObjectHandle, service: &str) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let o = st.live_mut(h)?;
        if o.owner != service {
            return Err(LedgerError::NotOwner {
                handle: h,
                service: service.to_string(),
            });
        }
        if o.owner_released {
            return Err(LedgerError::OwnerReleased {
                handle: h,
                service: service.to_string(),
            });
        }
        o.owner_released = true;
        o.state = ObjectState::PendingDestroy;
        st.maybe_destroy(h);
        Ok(())
    }

    /// Borrowing is allowed while the object is Live; a pending destroy
    /// only waits for existing borrows to drain.
    pub fn borrow(&self, h: ObjectHandle, service: &str) -> Result<BorrowToken, LedgerError> {
        let mut st = self.state.lock();
        st.next_token += 1;
        let t = st.next_token;
        let o = st.live_mut(h)?;
        if o.state == ObjectState::PendingDestroy {
            return Err(LedgerError::OwnerReleased {
                handle: h,
                service: o.owner.clone(),
            });
        }
        o.borrows.insert(t, service.to_string());
        st.tokens.insert(t, h.0);
        Ok(BorrowToken(t))
    }

    /// Borrows on behalf of `callee` if `caller` holds the object; returns
    /// the token and the object size. One lock acquisition per call.
    pub(crate) fn borrow_for_call(
        &self,
        h: ObjectHandle,
        caller: &str,
        callee: &str,
    ) -> Result<(BorrowToken, u64), LedgerError> {
        let mut st = self.state.lock();
        let o = st.object(h)?;
        let holder = o.state != ObjectState::Destroyed
            && ((o.owner == caller && !o.owner_released) || o.borrows.values().any(|b| b == caller));
        if !holder {
            return Err(LedgerError::NotAuthorized {
                handle: h,
                service: caller.to_string(),
            });
        }
        if o.state == ObjectState::PendingDestroy {
            return Err(LedgerError::OwnerReleased {
                handle: h,
                service: o.owner.clone(),
            });
        }
        st.next_token += 1;
        let t = st.next_token;
        let o = st.objects.get_mut(&h.0).expect("checked above");
        o.borrows.insert(t, callee.to_string());
        let size = o.size;
        st.tokens.insert(t, h.0);
        Ok((BorrowToken(t), size))
    }

    pub fn release(&self, token: BorrowToken) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let h = st.tokens.remove(&token.0).ok_or(LedgerError::DoubleRelease(token))?;
        let o = st.objects.get_mut(&h).expect("token refers to a known object");
        o.borrows.remove(&token.0);
        st.maybe_destroy(ObjectHandle(h));
        Ok(())
    }

    pub fn entry(&self, h: ObjectHandle) -> Option<LedgerEntry> {
        let st = self.state.lock();
        let o = st.objects.get(&h.0)?;
        let mut borrowers: Vec<String> = o.borrows.values().cloned().collect();
        borrowers.sort();
        Some(LedgerEntry {
            handle: h,
            size: o.size,
            owner: o.owner.clone(),
            borrowers,
            state: o.state,
            destructions: o.destructions,
        })
    }

    pub fn size(&self, h: ObjectHandle) -> Result<u64, LedgerError> {
        Ok(self.state.lock().object(h)?.size)
    }

    /// Total destructor runs across all objects.
    pub fn destroyed_total(&self) -> u64 {
        self.state.lock().destroyed_total
    }

    /// Owner (not yet released) or current borrower of a non-destroyed object.
    pub fn is_holder(&self, h: ObjectHandle, service: &str) -> bool {
        let st = self.state.lock();
        match st.objects.get(&h.0) {
            Some(o) if o.state != ObjectState::Destroyed => {
                (o.owner == service && !o.owner_released) || o.borrows.values().any(|b| b == service)
            }
            _ => false,
        }
    }

    /// Runtime-side access used by holders and by the copy/direct bindings.
    pub fn read(&self, h: ObjectHandle, offset: u64, buf: &mut [u8]) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let o = st.live_mut(h)?;
        let (a, b) = check_range(offset, buf.len(), o.size, Side::Object)?;
        buf.copy_from_slice(&o.storage[a..b]);
        Ok(())
    }

    pub fn write(&self, h: ObjectHandle, offset: u64, data: &[u8]) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let o = st.live_mut(h)?;
        let (a, b) = check_range(offset, data.len(), o.size, Side::Object)?;
        o.storage[a..b].copy_from_slice(data);
        Ok(())
    }

    /// Grants `grantee` proxy access on behalf of `granter`, who must hold
    /// the object. A second grant to the same grantee reuses its binding.
    pub fn grant(
        &self,
        h: ObjectHandle,
        granter: &str,
        grantee: &str,
        ops: ProxyOps,
    ) -> Result<ProxyBinding, LedgerError> {
        let mut st = self.state.lock();
        let o = st.object(h)?;
        let holder = o.state != ObjectState::Destroyed
            && ((o.owner == granter && !o.owner_released) || o.borrows.values().any(|b| b == granter));
        if !holder {
            return Err(LedgerError::NotAuthorized {
                handle: h,
                service: granter.to_string(),
            });
        }
        let key = (h.0, grantee.to_string());
        if let Some(&id) = st.by_grantee.get(&key) {
            let b = st.bindings.get_mut(&id).expect("indexed binding exists");
            if b.public.state == BindingState::Active {
                b.public.ops = b.public.ops.union(ops);
                b.grants += 1;
            } else {
                b.public.ops = ops;
                b.public.state = BindingState::Active;
                b.grants = 1;
            }
            return Ok(b.public.clone());
        }
        st.next_binding += 1;
        let id = st.next_binding;
        let public = ProxyBinding {
            id: BindingId(id),
            handle: h,
            grantee: grantee.to_string(),
            ops,
            state: BindingState::Active,
        };
        st.bindings.insert(
            id,
            Binding {
                public: public.clone(),
                grants: 1,
            },
        );
        st.by_grantee.insert(key, id);
        Ok(public)
    }

    /// Revokes immediately regardless of outstanding grants.
    pub fn revoke(&self, id: BindingId) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let b = st.bindings.get_mut(&id.0).ok_or(LedgerError::UnknownBinding(id))?;
        b.public.state = BindingState::Revoked;
        b.grants = 0;
        Ok(())
    }

    /// Drops one grant; the binding is revoked when none remain.
    pub(crate) fn ungrant(&self, id: BindingId) {
        let mut st = self.state.lock();
        if let Some(b) = st.bindings.get_mut(&id.0) {
            b.grants = b.grants.saturating_sub(1);
            if b.grants == 0 {
                b.public.state = BindingState::Revoked;
            }
        }
    }

    pub fn binding(&self, id: BindingId) -> Option<ProxyBinding> {
        self.state.lock().bindings.get(&id.0).map(|b| b.public.clone())
    }

    fn check_binding(
        st: &mut State,
        id: BindingId,
        grantee: &str,
        write: bool,
    ) -> Result<ObjectHandle, LedgerError> {
        let b = &st.bindings.get(&id.0).ok_or(LedgerError::UnknownBinding(id))?.public;
        if b.state == BindingState::Revoked {
            return Err(LedgerError::Revoked(id));
        }
        let allowed = if write { b.ops.write } else { b.ops.read };
        if b.grantee != grantee || !allowed {
            return Err(LedgerError::NotAuthorized {
                handle: b.handle,
                service: grantee.to_string(),
            });
        }
        Ok(b.handle)
    }

    /// Copies object bytes out through a proxy binding. The grantee-side
    /// bounds are the caller's to check before or after.
    pub fn proxy_read(
        &self,
        id: BindingId,
        grantee: &str,
        obj_offset: u64,
        buf: &mut [u8],
    ) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let h = Self::check_binding(&mut st, id, grantee, false)?;
        let o = st.live_mut(h)?;
        let (a, b) = check_range(obj_offset, buf.len(), o.size, Side::Object)?;
        buf.copy_from_slice(&o.storage[a..b]);
        Ok(())
    }

    pub fn proxy_write(
        &self,
        id: BindingId,
        grantee: &str,
        obj_offset: u64,
        data: &[u8],
    ) -> Result<(), LedgerError> {
        let mut st = self.state.lock();
        let h = Self::check_binding(&mut st, id, grantee, true)?;
        let o = st.live_mut(h)?;
        let (a, b) = check_range(obj_offset, data.len(), o.size, Side::Object)?;
        o.storage[a..b].copy_from_slice(data);
        Ok(())
    }

    /// Size of the object behind an active binding, for proxy clients.
    pub fn binding_size(&self, id: BindingId, grantee: &str) -> Result<u64, LedgerError> {
        let mut st = self.state.lock();
        let h = match Self::check_binding(&mut st, id, grantee, false) {
            Ok(h) => h,
            Err(LedgerError::NotAuthorized { .. }) => Self::check_binding(&mut st, id, grantee, true)?,
            Err(e) => return Err(e),
        };
        Ok(st.live_mut(h)?.size)
    }
}
