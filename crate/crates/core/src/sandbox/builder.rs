use super::{Export, FunctionBody, Instr, ModuleImage, VERSION};

/// Programmatic construction of MSB modules.
#[derive(Clone, Debug)]
pub struct ModuleBuilder {
    image: ModuleImage,
}

impl ModuleBuilder {
    pub fn new(mem_pages: u32, max_pages: u32) -> Self {
        ModuleBuilder {
            image: ModuleImage {
                version: VERSION,
                mem_pages,
                max_pages,
                imports: Vec::new(),
                functions: Vec::new(),
                exports: Vec::new(),
            },
        }
    }

    /// Declares an import and returns its index for `call_import`.
    pub fn import(&mut self, name: &str) -> u32 {
        self.image.imports.push(name.to_string());
        (self.image.imports.len() - 1) as u32
    }

    pub fn function(&mut self, nargs: u8, nrets: u8, nlocals: u8, code: Vec<Instr>) -> u32 {
        self.image.functions.push(FunctionBody {
            nargs,
            nrets,
            nlocals,
            code,
        });
        (self.image.functions.len() - 1) as u32
    }

    /// Reserves a function index whose body is supplied later with
    /// [`ModuleBuilder::define`]; needed for mutual recursion.
    pub fn declare(&mut self, nargs: u8, nrets: u8, nlocals: u8) -> u32 {
        self.function(nargs, nrets, nlocals, Vec::new())
    }

    pub fn define(&mut self, func: u32, code: Vec<Instr>) {
        self.image.functions[func as usize].code = code;
    }

    pub fn export(&mut self, name: &str, func: u32) -> &mut Self {
        self.image.exports.push(Export {
            name: name.to_string(),
            func,
        });
        self
    }

    pub fn build(self) -> ModuleImage {
        self.image
    }
}

/// One constructor per opcode.
pub mod asm {
    use crate::sandbox::{Instr, Opcode};

    pub const fn i64_const(v: i64) -> Instr {
        Instr::new(Opcode::Const, v)
    }
    pub const fn add() -> Instr {
        Instr::new(Opcode::Add, 0)
    }
    pub const fn sub() -> Instr {
        Instr::new(Opcode::Sub, 0)
    }
    pub const fn mul() -> Instr {
        Instr::new(Opcode::Mul, 0)
    }
    pub const fn and() -> Instr {
        Instr::new(Opcode::And, 0)
    }
    pub const fn or() -> Instr {
        Instr::new(Opcode::Or, 0)
    }
    pub const fn xor() -> Instr {
        Instr::new(Opcode::Xor, 0)
    }
    pub const fn eq() -> Instr {
        Instr::new(Opcode::Eq, 0)
    }
    pub const fn lt_s() -> Instr {
        Instr::new(Opcode::LtS, 0)
    }
    pub const fn load() -> Instr {
        Instr::new(Opcode::Load, 0)
    }
    pub const fn store() -> Instr {
        Instr::new(Opcode::Store, 0)
    }
    pub const fn local_get(i: i64) -> Instr {
        Instr::new(Opcode::LocalGet, i)
    }
    pub const fn local_set(i: i64) -> Instr {
        Instr::new(Opcode::LocalSet, i)
    }
    pub const fn br(target: i64) -> Instr {
        Instr::new(Opcode::Br, target)
    }
    pub const fn br_if(target: i64) -> Instr {
        Instr::new(Opcode::BrIf, target)
    }
    pub const fn call(func: i64) -> Instr {
        Instr::new(Opcode::Call, func)
    }
    pub const fn call_import(import: i64) -> Instr {
        Instr::new(Opcode::CallImport, import)
    }
    pub const fn ret() -> Instr {
        Instr::new(Opcode::Ret, 0)
    }
    pub const fn mem_size() -> Instr {
        Instr::new(Opcode::MemSize, 0)
    }
    pub const fn mem_grow() -> Instr {
        Instr::new(Opcode::MemGrow, 0)
    }
}
