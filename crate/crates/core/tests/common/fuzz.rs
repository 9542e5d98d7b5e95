//! Runs one module on the real interpreter and on [`RefVm`] side by side.

use std::sync::Arc;

use meshwa_core::sandbox::{
    instantiate, verify_module, ImportBindings, ImportFn, InvokeError, ModuleImage, ServiceInstance,
};
use meshwa_core::sasmem::Region;
use rand_chacha::ChaCha8Rng;

use super::gen::args_for;
use super::refvm::{Outcome, RefVm, PAGE};

pub const FUEL: u64 = 20_000;

/// Host functions matching [`super::refvm::host_call`].
pub fn host_bindings(m: &ModuleImage) -> ImportBindings {
    ImportBindings::new(
        m.imports
            .iter()
            .map(|name| -> ImportFn {
                match name.as_str() {
                    "mix" => Arc::new(|_, a| Ok(a[0].wrapping_mul(31) ^ a[1] ^ a[2].rotate_left(7) ^ a[3])),
                    "poke" => Arc::new(|inst: &ServiceInstance, a| {
                        Ok(match inst.memory().store_i64(a[0], a[1]) {
                            Ok(()) => 0,
                            Err(_) => -1,
                        })
                    }),
                    _ => Arc::new(|_, _| Ok(i64::MIN)),
                }
            })
            .collect(),
    )
}

/// Fresh instance with shadow tracking on, in a region sized for `max_pages`.
pub fn shadow_instance(m: ModuleImage) -> Result<ServiceInstance, String> {
    let len = (m.max_pages.max(1) as u64 * PAGE).next_power_of_two();
    let bindings = host_bindings(&m);
    let vm = verify_module(m).map_err(|e| e.to_string())?;
    let inst = instantiate(vm, bindings, Region::new(0, len, "fuzz")).map_err(|e| e.to_string())?;
    inst.memory().enable_shadow();
    Ok(inst)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CaseStats {
    pub invocations: u64,
    pub traps: u64,
    pub touched_bytes: u64,
}

fn to_outcome(r: Result<Option<i64>, InvokeError>) -> Outcome {
    match r {
        Ok(v) => Outcome::Value(v),
        Err(InvokeError::Trap(t)) => Outcome::Trap(t),
        Err(e) => Outcome::Violation(e.to_string()),
    }
}

fn bitmap(touched: &std::collections::BTreeSet<u64>) -> Vec<u64> {
    let mut bits: Vec<u64> = Vec::new();
    for &b in touched {
        let w = (b / 64) as usize;
        if w >= bits.len() {
            bits.resize(w + 1, 0);
        }
        bits[w] |= 1 << (b % 64);
    }
    bits
}

/// Invokes every export `rounds` times with random arguments on both
/// interpreters. Errors describe the first containment failure or
/// divergence.
pub fn run_pair(m: &ModuleImage, rng: &mut ChaCha8Rng, rounds: usize) -> Result<CaseStats, String> {
    let inst = shadow_instance(m.clone())?;
    let mut reference = RefVm::new(m);
    let mut stats = CaseStats::default();
    for _ in 0..rounds {
        for e in &m.exports {
            let args = args_for(rng, m, e.func);
            let got = to_outcome(inst.invoke_with_fuel(&e.name, &args, Some(FUEL)));
            let want = reference.invoke(&e.name, &args, FUEL);
            if let Outcome::Violation(v) = &want {
                return Err(format!("reference interpreter flagged a verified module: {v}"));
            }
            if got != want {
                return Err(format!("{}({args:?}): runtime {got:?}, reference {want:?}", e.name));
            }
            stats.invocations += 1;
            stats.traps += u64::from(matches!(got, Outcome::Trap(_)));
        }
    }
    let mem = inst.memory();
    let shadow = mem.shadow().expect("shadow enabled");
    if let Some(v) = shadow.violations().first() {
        return Err(format!("access outside memory: {v:?}"));
    }
    if shadow.touched_end() > mem.size() {
        return Err(format!("touched up to {} with memory size {}", shadow.touched_end(), mem.size()));
    }
    if reference.touched.last().is_some_and(|&b| b >= reference.peak_size) {
        return Err("reference touched beyond its memory".into());
    }
    if shadow.touched_words() != bitmap(&reference.touched) {
        return Err("touched-offset sets differ".into());
    }
    if mem.as_bytes() != reference.mem.as_slice() {
        return Err("final memory contents differ".into());
    }
    stats.touched_bytes = shadow.touched_count();
    Ok(stats)
}
