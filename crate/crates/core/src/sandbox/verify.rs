use std::fmt;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use super::{
    FunctionBody, Instr, ModuleImage, Opcode, IMPORT_ARITY, MAX_EXPORTS, MAX_FUNCTIONS,
    MAX_FUNCTION_INSTRS, MAX_IMPORTS, MAX_PAGES, VERSION,
};

/// Verifier rules, lettered as in the module format documentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Rule {
    /// (a) br/br_if targets an instruction of the same function.
    BranchTarget,
    /// (b) call targets an existing function.
    CallTarget,
    /// (c) call_import targets a declared import.
    ImportIndex,
    /// (d) local.get/local.set index is below nargs + nlocals.
    LocalIndex,
    /// (e) static stack discipline.
    StackDepth,
    /// (f) module-level limits.
    Limits,
}

impl Rule {
    pub fn letter(self) -> char {
        match self {
            Rule::BranchTarget => 'a',
            Rule::CallTarget => 'b',
            Rule::ImportIndex => 'c',
            Rule::LocalIndex => 'd',
            Rule::StackDepth => 'e',
            Rule::Limits => 'f',
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub struct VerifyError {
    pub rule: Rule,
    pub func: Option<u32>,
    pub instr: Option<u32>,
    pub reason: String,
}

impl fmt::Display for VerifyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "rule ({})", self.rule.letter())?;
        if let Some(func) = self.func {
            write!(f, " function {func}")?;
        }
        if let Some(instr) = self.instr {
            write!(f, " instruction {instr}")?;
        }
        write!(f, ": {}", self.reason)
    }
}

/// Static annotations for one function.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FunctionInfo {
    /// Operand-stack depth on entry to each instruction; `None` if unreachable.
    pub entry_depths: Vec<Option<u32>>,
    pub max_depth: u32,
}

/// A module that passed every verifier rule. Only [`verify_module`] builds one.
#[derive(Clone, Debug)]
pub struct VerifiedModule {
    image: Arc<ModuleImage>,
    info: Arc<[FunctionInfo]>,
}

impl VerifiedModule {
    pub fn image(&self) -> &ModuleImage {
        &self.image
    }

    pub fn function_info(&self, func: u32) -> &FunctionInfo {
        &self.info[func as usize]
    }

    pub fn into_image(self) -> ModuleImage {
        Arc::unwrap_or_clone(self.image)
    }
}

fn err(rule: Rule, func: Option<usize>, instr: Option<usize>, reason: impl Into<String>) -> VerifyError {
    VerifyError {
        rule,
        func: func.map(|f| f as u32),
        instr: instr.map(|i| i as u32),
        reason: reason.into(),
    }
}

fn check_limits(m: &ModuleImage) -> Result<(), VerifyError> {
    let limit = |reason: String| Err(err(Rule::Limits, None, None, reason));
    if m.version != VERSION {
        return limit(format!("version {} unsupported", m.version));
    }
    if m.max_pages > MAX_PAGES {
        return limit(format!("max_pages {} > {MAX_PAGES}", m.max_pages));
    }
    if m.mem_pages > m.max_pages {
        return limit(format!("mem_pages {} > max_pages {}", m.mem_pages, m.max_pages));
    }
    if m.imports.len() > MAX_IMPORTS as usize {
        return limit(format!("{} imports", m.imports.len()));
    }
    if m.functions.len() > MAX_FUNCTIONS as usize {
        return limit(format!("{} functions", m.functions.len()));
    }
    if m.exports.len() > MAX_EXPORTS as usize {
        return limit(format!("{} exports", m.exports.len()));
    }
    for (fi, f) in m.functions.iter().enumerate() {
        if f.nrets > 1 {
            return Err(err(Rule::Limits, Some(fi), None, format!("{} results", f.nrets)));
        }
        if f.code.len() > MAX_FUNCTION_INSTRS as usize {
            return Err(err(Rule::Limits, Some(fi), None, format!("{} instructions", f.code.len())));
        }
    }
    for (i, e) in m.exports.iter().enumerate() {
        if e.func as usize >= m.functions.len() {
            return limit(format!("export {:?} refers to missing function {}", e.name, e.func));
        }
        if m.exports[..i].iter().any(|o| o.name == e.name) {
            return limit(format!("duplicate export {:?}", e.name));
        }
    }
    Ok(())
}

fn check_operands(m: &ModuleImage, fi: usize, f: &FunctionBody) -> Result<(), VerifyError> {
    let n = f.code.len() as i64;
    for (ii, ins) in f.code.iter().enumerate() {
        let at = |rule, reason: String| Err(err(rule, Some(fi), Some(ii), reason));
        match ins.op {
            Opcode::Br | Opcode::BrIf if !(0..n).contains(&ins.operand) => {
                return at(Rule::BranchTarget, format!("target {} outside [0, {n})", ins.operand));
            }
            Opcode::Call if !(0..m.functions.len() as i64).contains(&ins.operand) => {
                return at(Rule::CallTarget, format!("call to missing function {}", ins.operand));
            }
            Opcode::CallImport if !(0..m.imports.len() as i64).contains(&ins.operand) => {
                return at(Rule::ImportIndex, format!("import {} not declared", ins.operand));
            }
            Opcode::LocalGet | Opcode::LocalSet
                if !(0..f.frame_slots() as i64).contains(&ins.operand) =>
            {
                return at(Rule::LocalIndex, format!("local {} outside frame of {}", ins.operand, f.frame_slots()));
            }
            _ => {}
        }
    }
    Ok(())
}

/// Values popped and pushed by `ins`. Call targets must already be validated.
pub(crate) fn stack_effect(m: &ModuleImage, ins: Instr) -> (u32, u32) {
    match ins.op {
        Opcode::Const | Opcode::LocalGet | Opcode::MemSize => (0, 1),
        op if op.is_binary() => (2, 1),
        Opcode::Load | Opcode::MemGrow => (1, 1),
        Opcode::Store => (2, 0),
        Opcode::LocalSet | Opcode::BrIf => (1, 0),
        Opcode::Br | Opcode::Ret => (0, 0),
        Opcode::Call => {
            let callee = &m.functions[ins.operand as usize];
            (callee.nargs as u32, callee.nrets as u32)
        }
        Opcode::CallImport => (IMPORT_ARITY as u32, 1),
        _ => unreachable!("all opcodes covered"),
    }
}

fn check_stack(m: &ModuleImage, fi: usize, f: &FunctionBody) -> Result<FunctionInfo, VerifyError> {
    let n = f.code.len();
    if n == 0 {
        return Err(err(Rule::StackDepth, Some(fi), None, "empty function body"));
    }
    let mut depths: Vec<Option<u32>> = vec![None; n];
    let mut max_depth = 0u32;
    depths[0] = Some(0);
    let mut work = vec![0usize];
    while let Some(ii) = work.pop() {
        let depth = depths[ii].expect("queued instructions have a depth");
        let ins = f.code[ii];
        let (pops, pushes) = stack_effect(m, ins);
        if depth < pops {
            return Err(err(
                Rule::StackDepth,
                Some(fi),
                Some(ii),
                format!("{:?} pops {pops} with depth {depth}", ins.op),
            ));
        }
        let out = depth - pops + pushes;
        max_depth = max_depth.max(depth).max(out);

        let mut succ = [None, None];
        match ins.op {
            Opcode::Ret => {
                if depth != f.nrets as u32 {
                    return Err(err(
                        Rule::StackDepth,
                        Some(fi),
                        Some(ii),
                        format!("ret with depth {depth}, function returns {}", f.nrets),
                    ));
                }
            }
            Opcode::Br => succ[0] = Some(ins.operand as usize),
            Opcode::BrIf => {
                succ[0] = Some(ii + 1);
                succ[1] = Some(ins.operand as usize);
            }
            _ => succ[0] = Some(ii + 1),
        }
        for s in succ.into_iter().flatten() {
            if s >= n {
                return Err(err(Rule::StackDepth, Some(fi), Some(ii), "control falls off the end of the function"));
            }
            match depths[s] {
                None => {
                    depths[s] = Some(out);
                    work.push(s);
                }
                Some(d) if d != out => {
                    return Err(err(
                        Rule::StackDepth,
                        Some(fi),
                        Some(s),
                        format!("entry depth {d} conflicts with {out} from instruction {ii}"),
                    ));
                }
                Some(_) => {}
            }
        }
    }
    Ok(FunctionInfo {
        entry_depths: depths,
        max_depth,
    })
}

/// Statically verifies a decoded module.
pub fn verify_module(m: ModuleImage) -> Result<VerifiedModule, VerifyError> {
    check_limits(&m)?;
    for (fi, f) in m.functions.iter().enumerate() {
        check_operands(&m, fi, f)?;
    }
    let info = m
        .functions
        .iter()
        .enumerate()
        .map(|(fi, f)| check_stack(&m, fi, f))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VerifiedModule {
        image: Arc::new(m),
        info: info.into(),
    })
}
