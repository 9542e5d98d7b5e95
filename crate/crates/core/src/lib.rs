//! A single-address-space runtime that hosts mutually isolated services in one
//! process.
//!
//! Sandboxed services run as verified MSB bytecode confined to their own
//! linear memory; trusted native services run as ordinary Rust objects. All
//! cross-service traffic goes through per-caller function tables handed out by
//! the [`registry`], so a call between services is a function call rather than
//! a system call or a network hop.

pub mod bench;
pub mod manifest;
pub mod mesh;
pub mod registry;
pub mod runtime;
pub mod sandbox;
pub mod sasmem;
pub mod xcall;

pub use manifest::{
    parse_manifest, validate_manifest, verify_provenance, Manifest, MeshMode, MeshPolicy,
    SafetyClass, ServiceDescriptor, ServiceKind, Violation,
};
pub use mesh::{EdgeStats, Mesh, MeshError};
pub use registry::{negotiate, BindingMode, FunctionTable, Registry, RegistryError};
pub use runtime::{LoadError, NativeCatalog, Runtime, RuntimeConfig};
pub use sandbox::{decode_module, verify_module, ModuleImage, TrapKind, VerifiedModule};
pub use sasmem::{simulate_translation, BuddyAllocator, Region, TranslationMode, TranslationStats};
pub use xcall::{CallError, CallRecord, Ledger, NativeCall, NativeService, ObjectHandle, PayloadIo};
