use thiserror::Error;

use super::{
    Export, FunctionBody, Instr, ModuleImage, Opcode, MAGIC, MAX_EXPORTS, MAX_FUNCTIONS,
    MAX_FUNCTION_INSTRS, MAX_IMPORTS, MAX_PAGES, VERSION,
};

const INSTR_WIDTH: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic")]
    BadMagic,
    #[error("truncated input at byte {offset} while reading {what}")]
    Truncated { offset: usize, what: &'static str },
    #[error("limit exceeded: {0}")]
    LimitExceeded(String),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown opcode 0x{opcode:02x} in function {func} at instruction {instr}")]
    UnknownOpcode { opcode: u8, func: u32, instr: u32 },
    #[error("name at byte {offset} is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("duplicate export {0:?}")]
    DuplicateExport(String),
    #[error("export {name:?} refers to function {func}, module has {count}")]
    BadExportIndex { name: String, func: u32, count: u32 },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], DecodeError> {
        if self.bytes.len() - self.pos < n {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, DecodeError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, DecodeError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, DecodeError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn i64(&mut self, what: &'static str) -> Result<i64, DecodeError> {
        let b = self.take(8, what)?;
        Ok(i64::from_le_bytes(b.try_into().unwrap()))
    }

    fn name(&mut self, what: &'static str) -> Result<String, DecodeError> {
        let len = self.u16(what)? as usize;
        let offset = self.pos;
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| DecodeError::InvalidName { offset })
    }

    /// Rejects a count whose minimal encoding cannot fit in the remaining
    /// input, so a hostile header never drives a large allocation.
    fn count(
        &mut self,
        what: &'static str,
        cap: u32,
        min_item: usize,
    ) -> Result<usize, DecodeError> {
        let n = self.u32(what)?;
        if n > cap {
            return Err(DecodeError::LimitExceeded(format!("{what} {n} > {cap}")));
        }
        if (n as usize).saturating_mul(min_item) > self.remaining() {
            return Err(DecodeError::Truncated {
                offset: self.pos,
                what,
            });
        }
        Ok(n as usize)
    }
}

/// Decodes the MSB binary layout. Trailing bytes are rejected.
pub fn decode_module(bytes: &[u8]) -> Result<ModuleImage, DecodeError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic").map_err(|_| DecodeError::BadMagic)?;
    if magic != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(DecodeError::UnsupportedVersion(version));
    }
    let mem_pages = r.u32("mem_pages")?;
    let max_pages = r.u32("max_pages")?;
    if max_pages > MAX_PAGES {
        return Err(DecodeError::LimitExceeded(format!(
            "max_pages {max_pages} > {MAX_PAGES}"
        )));
    }
    if mem_pages > max_pages {
        return Err(DecodeError::LimitExceeded(format!(
            "mem_pages {mem_pages} > max_pages {max_pages}"
        )));
    }

    let import_count = r.count("import count", MAX_IMPORTS, 2)?;
    let mut imports = Vec::with_capacity(import_count);
    for _ in 0..import_count {
        imports.push(r.name("import name")?);
    }

    let func_count = r.count("function count", MAX_FUNCTIONS, 7)?;
    let mut functions = Vec::with_capacity(func_count);
    for fi in 0..func_count {
        let nargs = r.u8("nargs")?;
        let nrets = r.u8("nrets")?;
        if nrets > 1 {
            return Err(DecodeError::LimitExceeded(format!(
                "function {fi} declares {nrets} results"
            )));
        }
        let nlocals = r.u8("nlocals")?;
        let ninstr = r.count("instruction count", MAX_FUNCTION_INSTRS, INSTR_WIDTH)?;
        let mut code = Vec::with_capacity(ninstr);
        for ii in 0..ninstr {
            let byte = r.u8("opcode")?;
            let op = Opcode::from_byte(byte).ok_or(DecodeError::UnknownOpcode {
                opcode: byte,
                func: fi as u32,
                instr: ii as u32,
            })?;
            let operand = r.i64("operand")?;
            code.push(Instr { op, operand });
        }
        functions.push(FunctionBody {
            nargs,
            nrets,
            nlocals,
            code,
        });
    }

    let export_count = r.count("export count", MAX_EXPORTS, 6)?;
    let mut exports: Vec<Export> = Vec::with_capacity(export_count);
    for _ in 0..export_count {
        let name = r.name("export name")?;
        let func = r.u32("export index")?;
        if func as usize >= functions.len() {
            return Err(DecodeError::BadExportIndex {
                name,
                func,
                count: functions.len() as u32,
            });
        }
        if exports.iter().any(|e| e.name == name) {
            return Err(DecodeError::DuplicateExport(name));
        }
        exports.push(Export { name, func });
    }

    if r.remaining() != 0 {
        return Err(DecodeError::TrailingBytes(r.remaining()));
    }

    Ok(ModuleImage {
        version,
        mem_pages,
        max_pages,
        imports,
        functions,
        exports,
    })
}
