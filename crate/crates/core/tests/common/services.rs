//! Test services: sandboxed modules built with a small label assembler and
//! their native counterparts.

use std::collections::HashMap;

use meshwa_core::sandbox::asm::*;
use meshwa_core::sandbox::{Instr, ModuleBuilder, ModuleImage};
use meshwa_core::xcall::{CallError, NativeCall};

/// Offset where the echo modules stage a payload in their own memory.
pub const STAGE: i64 = 65536;
pub const SCRAMBLE_KEY: i64 = 0x5a5a_1234_0f0f_7777;

/// Code with named branch targets.
#[derive(Default)]
pub struct Asm {
    code: Vec<Instr>,
    labels: HashMap<&'static str, i64>,
    fixups: Vec<(usize, &'static str)>,
}

impl Asm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn op(&mut self, i: Instr) -> &mut Self {
        self.code.push(i);
        self
    }

    pub fn ops(&mut self, is: &[Instr]) -> &mut Self {
        self.code.extend_from_slice(is);
        self
    }

    pub fn label(&mut self, name: &'static str) -> &mut Self {
        self.labels.insert(name, self.code.len() as i64);
        self
    }

    pub fn br(&mut self, name: &'static str) -> &mut Self {
        self.fixups.push((self.code.len(), name));
        self.op(br(0))
    }

    pub fn br_if(&mut self, name: &'static str) -> &mut Self {
        self.fixups.push((self.code.len(), name));
        self.op(br_if(0))
    }

    pub fn finish(&mut self) -> Vec<Instr> {
        let mut code = std::mem::take(&mut self.code);
        for (at, name) in self.fixups.drain(..) {
            code[at].operand = self.labels[name];
        }
        code
    }
}

/// `call_import idx` with four constant arguments already pushed by `args`.
fn import4(a: &mut Asm, idx: u32, args: [Instr; 4]) {
    a.ops(&args).op(call_import(idx as i64));
}

/// Locals: 0 len, 1 i, 2 sum.
fn echo_body(len: u32, read: u32, write: u32, scramble: bool) -> Vec<Instr> {
    let mut a = Asm::new();
    import4(&mut a, len, [i64_const(0); 4]);
    a.op(local_set(0));
    a.ops(&[local_get(0), i64_const(0), lt_s()]).br_if("no_payload");
    import4(&mut a, read, [i64_const(0), i64_const(STAGE), local_get(0), i64_const(0)]);
    a.op(local_set(2));
    a.ops(&[local_get(2), i64_const(0), eq()]).br_if("copied");
    a.ops(&[local_get(2), ret()]);
    a.label("copied");
    a.ops(&[i64_const(0), local_set(1), i64_const(0), local_set(2)]);
    a.label("loop");
    a.ops(&[local_get(0), local_get(1), i64_const(8), add(), lt_s()]).br_if("done");
    a.ops(&[local_get(2), i64_const(STAGE), local_get(1), add(), load(), add(), local_set(2)]);
    if scramble {
        a.ops(&[
            i64_const(STAGE),
            local_get(1),
            add(),
            i64_const(STAGE),
            local_get(1),
            add(),
            load(),
            i64_const(SCRAMBLE_KEY),
            xor(),
            store(),
        ]);
    }
    a.ops(&[local_get(1), i64_const(8), add(), local_set(1)]).br("loop");
    a.label("done");
    import4(&mut a, write, [i64_const(0), i64_const(STAGE), local_get(0), i64_const(0)]);
    a.op(local_set(1));
    a.ops(&[local_get(1), i64_const(0), eq()]).br_if("ok");
    a.ops(&[local_get(1), ret()]);
    a.label("ok");
    a.ops(&[local_get(2), ret()]);
    a.label("no_payload");
    a.ops(&[local_get(0), ret()]);
    a.finish()
}

/// Exports `echo` (returns the payload unchanged) and `scramble` (xors each
/// whole 8-byte word with [`SCRAMBLE_KEY`]); both return the wrapping sum of
/// the payload's whole words as read, or a negative status.
pub fn echo_module() -> ModuleImage {
    let mut b = ModuleBuilder::new(2, 2);
    let len = b.import("payload.len");
    let read = b.import("payload.read");
    let write = b.import("payload.write");
    let echo = b.function(0, 1, 3, echo_body(len, read, write, false));
    let scramble = b.function(0, 1, 3, echo_body(len, read, write, true));
    b.export("echo", echo).export("scramble", scramble);
    b.build()
}

/// What the echo exports return and leave behind, computed directly.
pub fn expected_echo(payload: &[u8], scramble: bool) -> (i64, Vec<u8>) {
    let mut out = payload.to_vec();
    let mut sum = 0i64;
    for chunk in out.chunks_exact_mut(8) {
        let w = i64::from_le_bytes(chunk.try_into().unwrap());
        sum = sum.wrapping_add(w);
        if scramble {
            chunk.copy_from_slice(&(w ^ SCRAMBLE_KEY).to_le_bytes());
        }
    }
    (sum, out)
}

/// Native twin of [`echo_module`], working on a private copy of the payload.
pub fn native_echo(cx: &mut NativeCall<'_>) -> Result<Option<i64>, CallError> {
    if cx.payload().is_none() {
        return Ok(Some(-1));
    }
    let bytes = cx.payload_bytes()?;
    let (sum, out) = expected_echo(&bytes, cx.export() == "scramble");
    cx.write_payload(0, &out)?;
    Ok(Some(sum))
}

/// `victim`: `boom` stores past the end of memory; `ok(x)` bumps a counter
/// at offset 0 and returns `x * 2 + counter`.
pub fn victim_module() -> ModuleImage {
    let mut b = ModuleBuilder::new(1, 1);
    let boom = b.function(0, 1, 0, vec![i64_const(65536 - 4), i64_const(1), store(), i64_const(0), ret()]);
    let ok = b.function(
        1,
        1,
        0,
        vec![
            i64_const(0),
            i64_const(0),
            load(),
            i64_const(1),
            add(),
            store(),
            local_get(0),
            i64_const(2),
            mul(),
            i64_const(0),
            load(),
            add(),
            ret(),
        ],
    );
    b.export("boom", boom).export("ok", ok);
    b.build()
}

/// `front` calls `victim`. `fill(seed)` writes a pattern over its first 4 KiB;
/// `hit()` calls `victim.boom`; `ping(x)` calls `victim.ok(x)`.
pub fn front_module() -> ModuleImage {
    let mut b = ModuleBuilder::new(1, 1);
    let boom = b.import("victim.boom");
    let ok = b.import("victim.ok");
    let mut a = Asm::new();
    a.ops(&[i64_const(0), local_set(1)]);
    a.label("loop");
    a.ops(&[local_get(1), i64_const(4096), eq()]).br_if("done");
    a.ops(&[
        local_get(1),
        local_get(0),
        local_get(1),
        mul(),
        i64_const(0x9e37_79b9),
        xor(),
        store(),
        local_get(1),
        i64_const(8),
        add(),
        local_set(1),
    ])
    .br("loop");
    a.label("done");
    a.op(ret());
    let fill = b.function(1, 0, 1, a.finish());
    let hit = b.function(0, 1, 0, vec![i64_const(0), i64_const(0), i64_const(0), i64_const(0), call_import(boom as i64), ret()]);
    let ping = b.function(1, 1, 0, vec![local_get(0), i64_const(0), i64_const(0), i64_const(0), call_import(ok as i64), ret()]);
    b.export("fill", fill).export("hit", hit).export("ping", ping);
    b.build()
}

/// Module whose `main` returns 42.
pub fn const42_module() -> ModuleImage {
    let mut b = ModuleBuilder::new(1, 1);
    let f = b.function(0, 1, 0, vec![i64_const(42), ret()]);
    b.export("main", f);
    b.build()
}
