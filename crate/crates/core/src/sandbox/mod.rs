//! Minimal Service Bytecode (MSB).
//!
//! MSB is the region-granular sandbox format: a module owns one linear memory,
//! every load and store is bounds checked against the current memory size, and
//! every branch and call target is checked by [`verify_module`] before the
//! module can be instantiated.
//!
//! Instructions are fixed width (one opcode byte plus an `i64` operand), so any
//! instruction index is a valid landing target.

mod builder;
mod decode;
mod interp;
mod memory;
mod verify;

use std::fmt;

use serde::Serialize;
use thiserror::Error;

pub use builder::{asm, ModuleBuilder};
pub use decode::{decode_module, DecodeError};
pub use interp::{
    frame_depth, instantiate, push_frame, FrameGuard, ImportBindings, ImportFn, InstantiateError,
    InvokeError, ServiceInstance,
};
pub use memory::{LinearMemory, ShadowMap, ShadowViolation};
pub use verify::{verify_module, FunctionInfo, Rule, VerifiedModule, VerifyError};

/// Bytes per linear-memory page.
pub const PAGE_SIZE: u64 = 65536;
/// Largest page count a module may declare (4 GiB of linear memory).
pub const MAX_PAGES: u32 = 65536;
/// Operand stack capacity per invocation, in values.
pub const OPERAND_STACK_CAP: usize = 4096;
/// Maximum number of live frames on one thread, across nested invocations.
pub const CALL_DEPTH_CAP: usize = 512;
/// Every `call_import` pops this many arguments and pushes one result.
pub const IMPORT_ARITY: usize = 4;

pub const MAGIC: [u8; 4] = *b"MSB1";
pub const VERSION: u32 = 1;

pub const MAX_IMPORTS: u32 = 1024;
pub const MAX_FUNCTIONS: u32 = 4096;
pub const MAX_FUNCTION_INSTRS: u32 = 65536;
pub const MAX_EXPORTS: u32 = 1024;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[repr(u8)]
pub enum Opcode {
    Const = 0x01,
    Add = 0x02,
    Sub = 0x03,
    Mul = 0x04,
    And = 0x05,
    Or = 0x06,
    Xor = 0x07,
    Eq = 0x08,
    LtS = 0x09,
    Load = 0x0A,
    Store = 0x0B,
    LocalGet = 0x0C,
    LocalSet = 0x0D,
    Br = 0x0E,
    BrIf = 0x0F,
    Call = 0x10,
    CallImport = 0x11,
    Ret = 0x12,
    MemSize = 0x13,
    MemGrow = 0x14,
}

impl Opcode {
    pub const ALL: [Opcode; 20] = [
        Opcode::Const,
        Opcode::Add,
        Opcode::Sub,
        Opcode::Mul,
        Opcode::And,
        Opcode::Or,
        Opcode::Xor,
        Opcode::Eq,
        Opcode::LtS,
        Opcode::Load,
        Opcode::Store,
        Opcode::LocalGet,
        Opcode::LocalSet,
        Opcode::Br,
        Opcode::BrIf,
        Opcode::Call,
        Opcode::CallImport,
        Opcode::Ret,
        Opcode::MemSize,
        Opcode::MemGrow,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        if (0x01..=0x14).contains(&b) {
            Some(Self::ALL[(b - 1) as usize])
        } else {
            None
        }
    }

    pub fn byte(self) -> u8 {
        self as u8
    }

    pub fn is_binary(self) -> bool {
        matches!(
            self,
            Opcode::Add
                | Opcode::Sub
                | Opcode::Mul
                | Opcode::And
                | Opcode::Or
                | Opcode::Xor
                | Opcode::Eq
                | Opcode::LtS
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Instr {
    pub op: Opcode,
    pub operand: i64,
}

impl Instr {
    pub const fn new(op: Opcode, operand: i64) -> Self {
        Instr { op, operand }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunctionBody {
    pub nargs: u8,
    pub nrets: u8,
    pub nlocals: u8,
    pub code: Vec<Instr>,
}

impl FunctionBody {
    pub fn frame_slots(&self) -> usize {
        self.nargs as usize + self.nlocals as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Export {
    pub name: String,
    pub func: u32,
}

/// A decoded, not yet verified, MSB module.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ModuleImage {
    pub version: u32,
    pub mem_pages: u32,
    pub max_pages: u32,
    pub imports: Vec<String>,
    pub functions: Vec<FunctionBody>,
    /// Exports in declaration order.
    pub exports: Vec<Export>,
}

impl ModuleImage {
    pub fn export(&self, name: &str) -> Option<u32> {
        self.exports.iter().find(|e| e.name == name).map(|e| e.func)
    }

    pub fn export_names(&self) -> Vec<String> {
        self.exports.iter().map(|e| e.name.clone()).collect()
    }

    /// Serializes into the MSB binary layout. `decode_module(&m.encode())`
    /// returns `m` for every image that satisfies the decoder's caps.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.mem_pages.to_le_bytes());
        out.extend_from_slice(&self.max_pages.to_le_bytes());
        out.extend_from_slice(&(self.imports.len() as u32).to_le_bytes());
        for name in &self.imports {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out.extend_from_slice(&(self.functions.len() as u32).to_le_bytes());
        for f in &self.functions {
            out.push(f.nargs);
            out.push(f.nrets);
            out.push(f.nlocals);
            out.extend_from_slice(&(f.code.len() as u32).to_le_bytes());
            for ins in &f.code {
                out.push(ins.op.byte());
                out.extend_from_slice(&ins.operand.to_le_bytes());
            }
        }
        out.extend_from_slice(&(self.exports.len() as u32).to_le_bytes());
        for e in &self.exports {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&e.func.to_le_bytes());
        }
        out
    }
}

/// Why an invocation was aborted. A trap ends the current invocation only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Error, Serialize)]
pub enum TrapKind {
    #[error("OutOfBounds")]
    OutOfBounds,
    #[error("StackOverflow")]
    StackOverflow,
    #[error("CallDepthExceeded")]
    CallDepthExceeded,
    #[error("UnreachableImport")]
    UnreachableImport,
    #[error("GrowFailed")]
    GrowFailed,
    /// Reserved; MSB has no division opcode.
    #[error("DivByZero")]
    DivByZero,
    #[error("FuelExhausted")]
    FuelExhausted,
}

impl TrapKind {
    pub fn name(self) -> &'static str {
        match self {
            TrapKind::OutOfBounds => "OutOfBounds",
            TrapKind::StackOverflow => "StackOverflow",
            TrapKind::CallDepthExceeded => "CallDepthExceeded",
            TrapKind::UnreachableImport => "UnreachableImport",
            TrapKind::GrowFailed => "GrowFailed",
            TrapKind::DivByZero => "DivByZero",
            TrapKind::FuelExhausted => "FuelExhausted",
        }
    }
}

impl fmt::Display for Instr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?} {}", self.op, self.operand)
    }
}
