//! Random MSB modules.
//!
//! `valid_module` builds structured code that always passes verification:
//! every statement starts and ends at operand depth 0, so branches only ever
//! join paths of equal depth. `mutate` then breaks modules in ways each
//! verifier rule should catch.

use meshwa_core::sandbox::asm::*;
use meshwa_core::sandbox::{Export, FunctionBody, Instr, ModuleImage, Opcode, PAGE_SIZE};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Host functions the generated modules may import. Their semantics are
/// defined in [`super::refvm::host_call`].
pub const HOST_NAMES: [&str; 2] = ["mix", "poke"];

#[derive(Clone, Copy)]
struct Sig {
    nargs: u8,
    nrets: u8,
    nlocals: u8,
}

impl Sig {
    fn slots(self) -> i64 {
        self.nargs as i64 + self.nlocals as i64
    }
}

struct Ctx<'a> {
    rng: &'a mut ChaCha8Rng,
    sigs: &'a [Sig],
    imports: usize,
    me: Sig,
    code: Vec<Instr>,
    /// br_if sites that jump to the epilogue, patched at the end.
    early_exits: Vec<usize>,
    budget: usize,
}

fn interesting_addr(rng: &mut ChaCha8Rng) -> i64 {
    let page = PAGE_SIZE as i64;
    match rng.gen_range(0..20) {
        0 => 0,
        1 => 8,
        2 => rng.gen_range(0..page / 8) * 8,
        3 => page - 8,
        4 => page - 7,
        5 => page,
        6 => 2 * page - 8,
        7 => 2 * page - 1,
        8 => 3 * page + rng.gen_range(-16..16),
        9 => -1,
        10 => -8,
        11 => i64::MAX - 3,
        12 => i64::MIN,
        13 => rng.gen_range(0..4 * page),
        _ => rng.gen_range(0..page - 8),
    }
}

fn interesting_const(rng: &mut ChaCha8Rng) -> i64 {
    match rng.gen_range(0..6) {
        0 => rng.gen_range(-4..8),
        1 => i64::MAX,
        2 => i64::MIN,
        3 => rng.gen(),
        _ => interesting_addr(rng),
    }
}

impl Ctx<'_> {
    fn emit(&mut self, i: Instr) {
        self.code.push(i);
    }

    fn spend(&mut self) -> bool {
        if self.budget == 0 {
            return false;
        }
        self.budget -= 1;
        true
    }

    /// Emits code pushing exactly one value.
    fn expr(&mut self, nest: u32) {
        let choice = if nest >= 3 || !self.spend() {
            self.rng.gen_range(0..3)
        } else {
            self.rng.gen_range(0..9)
        };
        match choice {
            0 => {
                let c = interesting_const(self.rng);
                self.emit(i64_const(c));
            }
            1 if self.me.slots() > 0 => {
                let i = self.rng.gen_range(0..self.me.slots());
                self.emit(local_get(i));
            }
            1 | 2 => self.emit(mem_size()),
            3 | 4 => {
                self.expr(nest + 1);
                self.expr(nest + 1);
                let op = *[add(), sub(), mul(), and(), or(), xor(), eq(), lt_s()]
                    .choose(self.rng)
                    .unwrap();
                self.emit(op);
            }
            5 => {
                self.addr(nest + 1);
                self.emit(load());
            }
            6 => {
                let d = self.rng.gen_range(-1..3);
                self.emit(i64_const(d));
                self.emit(mem_grow());
            }
            7 => {
                let returning: Vec<usize> = (0..self.sigs.len()).filter(|&f| self.sigs[f].nrets == 1).collect();
                match returning.choose(self.rng) {
                    Some(&f) => self.call(f, nest),
                    None => self.emit(mem_size()),
                }
            }
            _ => {
                if self.imports == 0 {
                    self.emit(i64_const(7));
                } else {
                    for _ in 0..4 {
                        self.expr(nest + 1);
                    }
                    let i = self.rng.gen_range(0..self.imports) as i64;
                    self.emit(call_import(i));
                }
            }
        }
    }

    fn addr(&mut self, nest: u32) {
        match self.rng.gen_range(0..4) {
            0 | 1 => {
                let a = interesting_addr(self.rng);
                self.emit(i64_const(a));
            }
            2 if self.me.slots() > 0 => {
                let i = self.rng.gen_range(0..self.me.slots());
                self.emit(local_get(i));
                let a = interesting_addr(self.rng);
                self.emit(i64_const(a));
                self.emit(add());
            }
            _ => self.expr(nest),
        }
    }

    fn call(&mut self, f: usize, nest: u32) {
        for _ in 0..self.sigs[f].nargs {
            self.expr(nest + 1);
        }
        self.emit(call(f as i64));
    }

    fn block(&mut self, nest: u32) {
        let n = self.rng.gen_range(1..=4);
        for _ in 0..n {
            if !self.spend() {
                return;
            }
            self.stmt(nest);
        }
    }

    fn stmt(&mut self, nest: u32) {
        let deep = nest >= 3;
        match self.rng.gen_range(0..10) {
            0 | 1 if self.me.slots() > 0 => {
                self.expr(nest);
                let i = self.rng.gen_range(0..self.me.slots());
                self.emit(local_set(i));
            }
            0..=2 => {
                self.addr(nest);
                self.expr(nest);
                self.emit(store());
            }
            3 => {
                let f = self.rng.gen_range(0..self.sigs.len());
                self.call(f, nest);
                if self.sigs[f].nrets == 1 {
                    self.discard();
                }
            }
            4 | 5 if !deep => {
                // cond; br_if skip; block; skip:
                self.expr(nest);
                let site = self.code.len();
                self.emit(br_if(0));
                self.block(nest + 1);
                let target = self.code.len() as i64;
                self.code[site].operand = target;
            }
            6 | 7 if !deep && self.me.nlocals > 0 => {
                let c = self.me.nargs as i64 + self.rng.gen_range(0..self.me.nlocals as i64);
                let count = self.rng.gen_range(0..4);
                self.emit(i64_const(count));
                self.emit(local_set(c));
                let head = self.code.len() as i64;
                self.emit(local_get(c));
                self.emit(i64_const(0));
                self.emit(eq());
                let exit = self.code.len();
                self.emit(br_if(0));
                self.block(nest + 1);
                self.emit(local_get(c));
                self.emit(i64_const(1));
                self.emit(sub());
                self.emit(local_set(c));
                self.emit(br(head));
                let end = self.code.len() as i64;
                self.code[exit].operand = end;
            }
            8 => {
                self.expr(nest);
                self.early_exits.push(self.code.len());
                self.emit(br_if(0));
            }
            _ => {
                self.expr(nest);
                self.discard();
            }
        }
    }

    /// Consumes the value on top of the stack.
    fn discard(&mut self) {
        if self.me.slots() > 0 {
            let i = self.rng.gen_range(0..self.me.slots());
            self.emit(local_set(i));
        } else {
            self.emit(i64_const(0));
            self.emit(and());
            self.emit(i64_const(0));
            self.emit(xor());
            // leaves one value; fold it into a no-op store at a valid or
            // invalid address, which is still a legal statement
            let a = interesting_addr(self.rng);
            self.emit(i64_const(a));
            self.emit(xor());
            self.emit(i64_const(0));
            self.emit(store());
        }
    }
}

fn gen_body(rng: &mut ChaCha8Rng, sigs: &[Sig], me: usize, imports: usize, budget: usize) -> Vec<Instr> {
    let mut cx = Ctx {
        rng,
        sigs,
        imports,
        me: sigs[me],
        code: Vec::new(),
        early_exits: Vec::new(),
        budget,
    };
    cx.block(0);
    cx.block(0);
    let epilogue = cx.code.len() as i64;
    for site in std::mem::take(&mut cx.early_exits) {
        cx.code[site].operand = epilogue;
    }
    if cx.me.nrets == 1 {
        cx.budget = cx.budget.min(4);
        cx.expr(2);
    }
    cx.emit(ret());
    // unreachable tail with in-range operands
    if cx.rng.gen_bool(0.2) {
        let n = cx.code.len() as i64;
        for _ in 0..cx.rng.gen_range(1..4) {
            let op = *Opcode::ALL.choose(cx.rng).unwrap();
            let operand = match op {
                Opcode::Br | Opcode::BrIf => cx.rng.gen_range(0..n),
                Opcode::Call => cx.rng.gen_range(0..sigs.len() as i64),
                Opcode::CallImport if imports > 0 => cx.rng.gen_range(0..imports as i64),
                Opcode::CallImport => continue,
                Opcode::LocalGet | Opcode::LocalSet if cx.me.slots() > 0 => cx.rng.gen_range(0..cx.me.slots()),
                Opcode::LocalGet | Opcode::LocalSet => continue,
                _ => cx.rng.gen(),
            };
            cx.emit(Instr::new(op, operand));
        }
    }
    cx.code
}

/// A random module that passes verification.
pub fn valid_module(rng: &mut ChaCha8Rng) -> ModuleImage {
    let mem_pages = rng.gen_range(0..=2);
    let max_pages = mem_pages + rng.gen_range(0..=2);
    let mut imports: Vec<String> = Vec::new();
    for _ in 0..rng.gen_range(0..=2) {
        imports.push(HOST_NAMES.choose(rng).unwrap().to_string());
    }
    let nfuncs = rng.gen_range(1..=4);
    let sigs: Vec<Sig> = (0..nfuncs)
        .map(|_| Sig {
            nargs: rng.gen_range(0..=3),
            nrets: rng.gen_range(0..=1),
            nlocals: rng.gen_range(0..=3),
        })
        .collect();
    let functions = (0..nfuncs)
        .map(|f| {
            let budget = rng.gen_range(4..40);
            FunctionBody {
                nargs: sigs[f].nargs,
                nrets: sigs[f].nrets,
                nlocals: sigs[f].nlocals,
                code: gen_body(rng, &sigs, f, imports.len(), budget),
            }
        })
        .collect();
    let mut exports = vec![Export {
        name: "main".into(),
        func: 0,
    }];
    for f in 1..nfuncs {
        if rng.gen_bool(0.5) {
            exports.push(Export {
                name: format!("f{f}"),
                func: f as u32,
            });
        }
    }
    ModuleImage {
        version: 1,
        mem_pages,
        max_pages,
        imports,
        functions,
        exports,
    }
}

/// Random argument vector for `func`.
pub fn args_for(rng: &mut ChaCha8Rng, m: &ModuleImage, func: u32) -> Vec<i64> {
    (0..m.functions[func as usize].nargs)
        .map(|_| interesting_const(rng))
        .collect()
}

/// Applies one random structural or operand change. The result may or may
/// not still verify.
pub fn mutate(rng: &mut ChaCha8Rng, m: &mut ModuleImage) {
    let fi = rng.gen_range(0..m.functions.len());
    let nfuncs = m.functions.len() as i64;
    let nimports = m.imports.len() as i64;
    let f = &mut m.functions[fi];
    let n = f.code.len();
    match rng.gen_range(0..12) {
        0 | 1 if n > 0 => {
            let i = rng.gen_range(0..n);
            let ins = &mut f.code[i];
            ins.operand = match ins.op {
                Opcode::Br | Opcode::BrIf => rng.gen_range(-2..n as i64 + 2),
                Opcode::Call => rng.gen_range(-1..nfuncs + 2),
                Opcode::CallImport => rng.gen_range(-1..nimports + 2),
                Opcode::LocalGet | Opcode::LocalSet => rng.gen_range(-1..f.nargs as i64 + f.nlocals as i64 + 2),
                _ => rng.gen(),
            };
        }
        2 | 3 if n > 0 => {
            let i = rng.gen_range(0..n);
            f.code[i].op = *Opcode::ALL.choose(rng).unwrap();
        }
        4 if n > 0 => {
            f.code.remove(rng.gen_range(0..n));
        }
        5 => {
            let at = rng.gen_range(0..=n);
            let op = *Opcode::ALL.choose(rng).unwrap();
            f.code.insert(at, Instr::new(op, rng.gen_range(-1..4)));
        }
        6 => f.nrets = rng.gen_range(0..=2),
        7 => f.nargs = f.nargs.saturating_add(1),
        8 => f.nlocals = f.nlocals.saturating_sub(1),
        9 => match rng.gen_range(0..4) {
            0 => m.mem_pages = m.max_pages + 1,
            1 => m.max_pages = 65537,
            2 => m.exports[0].func = nfuncs as u32,
            _ => {
                let e = m.exports[0].clone();
                m.exports.push(e);
            }
        },
        10 => f.code.clear(),
        _ => {
            if n > 0 {
                let i = rng.gen_range(0..n);
                f.code[i] = Instr::new(Opcode::Const, 1);
            }
        }
    }
}
