//! A second MSB implementation for cross-checking.
//!
//! [`oracle_accepts`] decides verification by enumerating every reachable
//! `(instruction, depth)` pair. [`RefVm`] executes a module with one Rust
//! call frame per MSB frame and re-checks every verifier rule at the moment
//! an instruction runs, reporting a [`Outcome::Violation`] instead of
//! trusting the static analysis.

use std::collections::{BTreeSet, HashMap, VecDeque};

use meshwa_core::sandbox::{ModuleImage, Opcode, TrapKind};

pub const PAGE: u64 = 65536;
pub const STACK_CAP: usize = 4096;
pub const DEPTH_CAP: usize = 512;

/// `(pops, pushes)` for every opcode; calls look up the callee.
fn effect(m: &ModuleImage, op: Opcode, operand: i64) -> (u32, u32) {
    use Opcode::*;
    match op {
        Const | LocalGet | MemSize => (0, 1),
        Add | Sub | Mul | And | Or | Xor | Eq | LtS => (2, 1),
        Load | MemGrow => (1, 1),
        Store => (2, 0),
        LocalSet | BrIf => (1, 0),
        Br | Ret => (0, 0),
        CallImport => (4, 1),
        Call => {
            let f = &m.functions[operand as usize];
            (f.nargs as u32, f.nrets as u32)
        }
    }
}

fn limits_ok(m: &ModuleImage) -> bool {
    if m.version != 1 || m.max_pages > 65536 || m.mem_pages > m.max_pages {
        return false;
    }
    if m.imports.len() > 1024 || m.functions.len() > 4096 || m.exports.len() > 1024 {
        return false;
    }
    if m.functions.iter().any(|f| f.nrets > 1 || f.code.len() > 65536) {
        return false;
    }
    let mut names = BTreeSet::new();
    m.exports
        .iter()
        .all(|e| (e.func as usize) < m.functions.len() && names.insert(e.name.as_str()))
}

fn operands_ok(m: &ModuleImage, fi: usize) -> bool {
    let f = &m.functions[fi];
    let n = f.code.len() as i64;
    let slots = f.nargs as i64 + f.nlocals as i64;
    f.code.iter().all(|ins| match ins.op {
        Opcode::Br | Opcode::BrIf => (0..n).contains(&ins.operand),
        Opcode::Call => (0..m.functions.len() as i64).contains(&ins.operand),
        Opcode::CallImport => (0..m.imports.len() as i64).contains(&ins.operand),
        Opcode::LocalGet | Opcode::LocalSet => (0..slots).contains(&ins.operand),
        _ => true,
    })
}

/// Entry depth of every instruction reachable in function `fi`, found by
/// exploring `(pc, depth)` states; `Err` if any rule fails on the way.
pub fn oracle_entry_depths(m: &ModuleImage, fi: usize) -> Result<Vec<Option<u32>>, String> {
    let f = &m.functions[fi];
    let n = f.code.len();
    if n == 0 {
        return Err("empty body".into());
    }
    let mut seen: HashMap<usize, u32> = HashMap::new();
    let mut queue = VecDeque::from([(0usize, 0u32)]);
    seen.insert(0, 0);
    while let Some((pc, depth)) = queue.pop_front() {
        let ins = f.code[pc];
        let (pops, pushes) = effect(m, ins.op, ins.operand);
        if depth < pops {
            return Err(format!("pop on empty at {pc}"));
        }
        let out = depth - pops + pushes;
        let next: Vec<usize> = match ins.op {
            Opcode::Ret => {
                if depth != f.nrets as u32 {
                    return Err(format!("ret depth {depth} at {pc}"));
                }
                vec![]
            }
            Opcode::Br => vec![ins.operand as usize],
            Opcode::BrIf => vec![pc + 1, ins.operand as usize],
            _ => vec![pc + 1],
        };
        for s in next {
            if s >= n {
                return Err(format!("falls off the end after {pc}"));
            }
            match seen.get(&s) {
                Some(&d) if d != out => return Err(format!("two depths at {s}")),
                Some(_) => {}
                None => {
                    seen.insert(s, out);
                    queue.push_back((s, out));
                }
            }
        }
    }
    Ok((0..n).map(|pc| seen.get(&pc).copied()).collect())
}

/// Brute-force acceptance decision for the verifier rules.
pub fn oracle_accepts(m: &ModuleImage) -> bool {
    if !limits_ok(m) {
        return false;
    }
    if !(0..m.functions.len()).all(|fi| operands_ok(m, fi)) {
        return false;
    }
    (0..m.functions.len()).all(|fi| oracle_entry_depths(m, fi).is_ok())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Value(Option<i64>),
    Trap(TrapKind),
    /// A rule the verifier is meant to guarantee was broken at run time.
    Violation(String),
}

/// Semantics of the test host imports. `mem` is the caller's memory.
pub fn host_call(name: &str, a: [i64; 4], mem: &mut [u8], touched: &mut BTreeSet<u64>) -> i64 {
    match name {
        "mix" => a[0].wrapping_mul(31) ^ a[1] ^ a[2].rotate_left(7) ^ a[3],
        "poke" => {
            let size = mem.len() as u64;
            if a[0] < 0 || (a[0] as u64).checked_add(8).is_none_or(|e| e > size) {
                return -1;
            }
            let at = a[0] as usize;
            mem[at..at + 8].copy_from_slice(&a[1].to_le_bytes());
            touched.extend(at as u64..at as u64 + 8);
            0
        }
        _ => i64::MIN,
    }
}

enum Stop {
    Trap(TrapKind),
    Violation(String),
}

pub struct RefVm<'a> {
    m: &'a ModuleImage,
    pub mem: Vec<u8>,
    /// Every byte offset a load, store or host import touched.
    pub touched: BTreeSet<u64>,
    /// Largest memory size seen; every touched offset must be below the
    /// size in force when it was touched, hence below this.
    pub peak_size: u64,
    fuel: u64,
    live_values: usize,
    depth: usize,
    entry_depth: HashMap<(usize, usize), usize>,
}

impl<'a> RefVm<'a> {
    pub fn new(m: &'a ModuleImage) -> Self {
        let size = m.mem_pages as u64 * PAGE;
        RefVm {
            m,
            mem: vec![0; size as usize],
            touched: BTreeSet::new(),
            peak_size: size,
            fuel: 0,
            live_values: 0,
            depth: 0,
            entry_depth: HashMap::new(),
        }
    }

    pub fn cur_pages(&self) -> u64 {
        self.mem.len() as u64 / PAGE
    }

    pub fn invoke(&mut self, export: &str, args: &[i64], fuel: u64) -> Outcome {
        let Some(e) = self.m.exports.iter().find(|e| e.name == export) else {
            return Outcome::Violation(format!("no export {export}"));
        };
        let fi = e.func as usize;
        if fi >= self.m.functions.len() {
            return Outcome::Violation("export to missing function".into());
        }
        self.fuel = fuel;
        self.live_values = 0;
        self.depth = 1;
        let r = self.run(fi, args.to_vec());
        self.depth = 0;
        match r {
            Ok(v) => Outcome::Value(v),
            Err(Stop::Trap(t)) => Outcome::Trap(t),
            Err(Stop::Violation(s)) => Outcome::Violation(s),
        }
    }

    fn access(&mut self, addr: i64) -> Result<usize, Stop> {
        if addr < 0 || (addr as u64).checked_add(8).is_none_or(|e| e > self.mem.len() as u64) {
            return Err(Stop::Trap(TrapKind::OutOfBounds));
        }
        self.touched.extend(addr as u64..addr as u64 + 8);
        Ok(addr as usize)
    }

    fn run(&mut self, fi: usize, args: Vec<i64>) -> Result<Option<i64>, Stop> {
        let m = self.m;
        let f = &m.functions[fi];
        let violation = |s: String| Err(Stop::Violation(format!("function {fi}: {s}")));
        if f.nrets > 1 {
            return violation(format!("{} results", f.nrets));
        }
        if args.len() != f.nargs as usize {
            return violation("argument count".into());
        }
        let mut locals = args;
        locals.resize(f.nargs as usize + f.nlocals as usize, 0);
        let mut stack: Vec<i64> = Vec::new();
        let mut pc = 0usize;
        macro_rules! pop {
            () => {
                match stack.pop() {
                    Some(v) => {
                        self.live_values -= 1;
                        v
                    }
                    None => return violation(format!("pop on empty at {pc}")),
                }
            };
        }
        macro_rules! push_checked {
            ($v:expr) => {{
                if self.live_values >= STACK_CAP {
                    return Err(Stop::Trap(TrapKind::StackOverflow));
                }
                stack.push($v);
                self.live_values += 1;
            }};
        }
        macro_rules! push {
            ($v:expr) => {{
                stack.push($v);
                self.live_values += 1;
            }};
        }
        loop {
            if self.fuel == 0 {
                self.live_values -= stack.len();
                return Err(Stop::Trap(TrapKind::FuelExhausted));
            }
            self.fuel -= 1;
            let Some(&ins) = f.code.get(pc) else {
                return violation(format!("ran past the end at {pc}"));
            };
            match self.entry_depth.insert((fi, pc), stack.len()) {
                Some(d) if d != stack.len() => {
                    return violation(format!("instruction {pc} entered at depths {d} and {}", stack.len()));
                }
                _ => {}
            }
            pc += 1;
            let x = ins.operand;
            match ins.op {
                Opcode::Const => push_checked!(x),
                Opcode::LocalGet | Opcode::LocalSet => {
                    if x < 0 || x as usize >= locals.len() {
                        return violation(format!("local {x}"));
                    }
                    if ins.op == Opcode::LocalGet {
                        push_checked!(locals[x as usize]);
                    } else {
                        locals[x as usize] = pop!();
                    }
                }
                Opcode::MemSize => push_checked!(self.cur_pages() as i64),
                Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::And | Opcode::Or | Opcode::Xor | Opcode::Eq | Opcode::LtS => {
                    let b = pop!();
                    let a = pop!();
                    push!(match ins.op {
                        Opcode::Add => a.wrapping_add(b),
                        Opcode::Sub => a.wrapping_sub(b),
                        Opcode::Mul => a.wrapping_mul(b),
                        Opcode::And => a & b,
                        Opcode::Or => a | b,
                        Opcode::Xor => a ^ b,
                        Opcode::Eq => i64::from(a == b),
                        _ => i64::from(a < b),
                    });
                }
                Opcode::Load => {
                    let a = pop!();
                    let at = self.access(a)?;
                    push!(i64::from_le_bytes(self.mem[at..at + 8].try_into().unwrap()));
                }
                Opcode::Store => {
                    let v = pop!();
                    let a = pop!();
                    let at = self.access(a)?;
                    self.mem[at..at + 8].copy_from_slice(&v.to_le_bytes());
                }
                Opcode::Br | Opcode::BrIf => {
                    if x < 0 || x as usize >= f.code.len() {
                        return violation(format!("branch target {x}"));
                    }
                    if ins.op == Opcode::Br || pop!() != 0 {
                        pc = x as usize;
                    }
                }
                Opcode::Call => {
                    if x < 0 || x as usize >= m.functions.len() {
                        return violation(format!("call target {x}"));
                    }
                    let callee = &m.functions[x as usize];
                    if self.depth >= DEPTH_CAP {
                        self.live_values -= stack.len();
                        return Err(Stop::Trap(TrapKind::CallDepthExceeded));
                    }
                    let nargs = callee.nargs as usize;
                    if stack.len() < nargs {
                        return violation(format!("call with {} values for {nargs} arguments", stack.len()));
                    }
                    let args = stack.split_off(stack.len() - nargs);
                    self.live_values -= nargs;
                    self.depth += 1;
                    let r = self.run(x as usize, args);
                    self.depth -= 1;
                    match r {
                        Ok(Some(v)) => push_checked!(v),
                        Ok(None) => {}
                        Err(e) => {
                            self.live_values -= stack.len();
                            return Err(e);
                        }
                    }
                }
                Opcode::CallImport => {
                    if x < 0 || x as usize >= m.imports.len() {
                        return violation(format!("import {x}"));
                    }
                    let mut a = [0i64; 4];
                    for slot in a.iter_mut().rev() {
                        *slot = pop!();
                    }
                    let r = host_call(&m.imports[x as usize], a, &mut self.mem, &mut self.touched);
                    push!(r);
                }
                Opcode::Ret => {
                    if stack.len() != f.nrets as usize {
                        return violation(format!("ret with {} values, {} declared", stack.len(), f.nrets));
                    }
                    let v = if f.nrets == 1 { Some(pop!()) } else { None };
                    return Ok(v);
                }
                Opcode::MemGrow => {
                    let delta = pop!();
                    let cur = self.cur_pages() as i64;
                    let r = match cur.checked_add(delta) {
                        Some(new) if delta >= 0 && new <= m.max_pages as i64 => {
                            self.mem.resize((new as u64 * PAGE) as usize, 0);
                            self.peak_size = self.peak_size.max(self.mem.len() as u64);
                            cur
                        }
                        _ => -1,
                    };
                    push!(r);
                }
            }
        }
    }
}
