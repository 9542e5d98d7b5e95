use std::cell::{Cell, RefCell, RefMut};
use std::fmt;
use std::marker::PhantomData;
use std::sync::Arc;

use thiserror::Error;

use crate::sasmem::Region;

use super::{
    LinearMemory, Opcode, TrapKind, VerifiedModule, CALL_DEPTH_CAP, IMPORT_ARITY,
    OPERAND_STACK_CAP, PAGE_SIZE,
};

/// Host function bound to one import slot. Receives the calling instance so
/// it can move bytes in and out of that instance's linear memory.
pub type ImportFn =
    Arc<dyn Fn(&ServiceInstance, [i64; IMPORT_ARITY]) -> Result<i64, TrapKind> + Send + Sync>;

/// Resolved import slots, one per module import, in declaration order.
#[derive(Clone, Default)]
pub struct ImportBindings {
    slots: Vec<ImportFn>,
}

impl ImportBindings {
    pub fn new(slots: Vec<ImportFn>) -> Self {
        ImportBindings { slots }
    }

    pub fn push(&mut self, f: ImportFn) {
        self.slots.push(f);
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

impl fmt::Debug for ImportBindings {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImportBindings({} slots)", self.slots.len())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum InstantiateError {
    #[error("module declares {expected} imports, {got} bindings supplied")]
    BindingArity { expected: usize, got: usize },
    #[error("region of {available} bytes cannot hold {needed} bytes of linear memory")]
    RegionTooSmall { needed: u64, available: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum InvokeError {
    #[error("export {0:?} not found")]
    ExportNotFound(String),
    #[error("expected {expected} arguments, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("trap: {0}")]
    Trap(TrapKind),
}

impl From<TrapKind> for InvokeError {
    fn from(t: TrapKind) -> Self {
        InvokeError::Trap(t)
    }
}

thread_local! {
    static FRAME_DEPTH: Cell<usize> = const { Cell::new(0) };
}

/// Live frames on the current thread, across nested invocations.
pub fn frame_depth() -> usize {
    FRAME_DEPTH.with(Cell::get)
}

/// Holds one frame of the per-thread call-depth budget until dropped.
pub struct FrameGuard {
    _not_send: PhantomData<*const ()>,
}

/// Claims one frame of the per-thread budget, or traps at the cap.
pub fn push_frame() -> Result<FrameGuard, TrapKind> {
    FRAME_DEPTH.with(|d| {
        if d.get() >= CALL_DEPTH_CAP {
            Err(TrapKind::CallDepthExceeded)
        } else {
            d.set(d.get() + 1);
            Ok(FrameGuard {
                _not_send: PhantomData,
            })
        }
    })
}

impl Drop for FrameGuard {
    fn drop(&mut self) {
        FRAME_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

/// A verified module bound to its own linear memory and import slots.
///
/// An instance is single-threaded; callers serialize invocations on it.
/// Re-entrant invocation from an import on the same thread is allowed.
pub struct ServiceInstance {
    module: VerifiedModule,
    memory: RefCell<LinearMemory>,
    imports: ImportBindings,
}

impl fmt::Debug for ServiceInstance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServiceInstance")
            .field("region", self.memory.borrow().region())
            .field("imports", &self.imports)
            .finish()
    }
}

/// Binds a verified module to an arena region. The initial pages are zeroed.
pub fn instantiate(
    vm: VerifiedModule,
    bindings: ImportBindings,
    region: Region,
) -> Result<ServiceInstance, InstantiateError> {
    let image = vm.image();
    if bindings.len() != image.imports.len() {
        return Err(InstantiateError::BindingArity {
            expected: image.imports.len(),
            got: bindings.len(),
        });
    }
    let needed = image.max_pages as u64 * PAGE_SIZE;
    if region.length < needed {
        return Err(InstantiateError::RegionTooSmall {
            needed,
            available: region.length,
        });
    }
    let memory = LinearMemory::new(region, image.mem_pages, image.max_pages);
    Ok(ServiceInstance {
        module: vm,
        memory: RefCell::new(memory),
        imports: bindings,
    })
}

struct SavedFrame {
    func: u32,
    pc: usize,
    locals_base: usize,
    stack_base: usize,
}

impl ServiceInstance {
    pub fn module(&self) -> &VerifiedModule {
        &self.module
    }

    /// Borrows the linear memory. Must not be held across an invocation.
    pub fn memory(&self) -> RefMut<'_, LinearMemory> {
        self.memory.borrow_mut()
    }

    pub fn cur_pages(&self) -> u32 {
        self.memory.borrow().cur_pages()
    }

    /// The `mem.grow` operation: previous page count, or -1 on failure.
    pub fn mem_grow(&self, delta_pages: i64) -> i64 {
        self.memory.borrow_mut().grow(delta_pages)
    }

    pub fn invoke(&self, export: &str, args: &[i64]) -> Result<Option<i64>, InvokeError> {
        self.invoke_with_fuel(export, args, None)
    }

    /// Like [`invoke`](Self::invoke) but traps with `FuelExhausted` after
    /// `fuel` instructions.
    pub fn invoke_with_fuel(
        &self,
        export: &str,
        args: &[i64],
        fuel: Option<u64>,
    ) -> Result<Option<i64>, InvokeError> {
        let func = self
            .module
            .image()
            .export(export)
            .ok_or_else(|| InvokeError::ExportNotFound(export.to_string()))?;
        let expected = self.module.image().functions[func as usize].nargs as usize;
        if args.len() != expected {
            return Err(InvokeError::ArityMismatch {
                expected,
                got: args.len(),
            });
        }
        Ok(self.run(func, args, fuel)?)
    }

    fn run(&self, entry: u32, args: &[i64], mut fuel: Option<u64>) -> Result<Option<i64>, TrapKind> {
        let image = self.module.image();
        let mut guards = vec![push_frame()?];
        let mut stack: Vec<i64> = Vec::with_capacity(32);
        let mut locals: Vec<i64> = Vec::with_capacity(32);
        let mut frames: Vec<SavedFrame> = Vec::new();

        let mut cur = entry;
        let mut pc = 0usize;
        let mut locals_base = 0usize;
        let mut stack_base = 0usize;
        locals.extend_from_slice(args);
        locals.resize(image.functions[entry as usize].frame_slots(), 0);

        macro_rules! push {
            ($v:expr) => {{
                let v = $v;
                if stack.len() >= OPERAND_STACK_CAP {
                    return Err(TrapKind::StackOverflow);
                }
                stack.push(v);
            }};
        }
        macro_rules! pop {
            () => {
                stack.pop().expect("verified stack discipline")
            };
        }

        loop {
            if let Some(f) = fuel.as_mut() {
                if *f == 0 {
                    return Err(TrapKind::FuelExhausted);
                }
                *f -= 1;
            }
            let ins = image.functions[cur as usize].code[pc];
            pc += 1;
            match ins.op {
                Opcode::Const => push!(ins.operand),
                Opcode::Add | Opcode::Sub | Opcode::Mul | Opcode::And | Opcode::Or | Opcode::Xor | Opcode::Eq | Opcode::LtS => {
                    let b = pop!();
                    let a = pop!();
                    stack.push(match ins.op {
                        Opcode::Add => a.wrapping_add(b),
                        Opcode::Sub => a.wrapping_sub(b),
                        Opcode::Mul => a.wrapping_mul(b),
                        Opcode::And => a & b,
                        Opcode::Or => a | b,
                        Opcode::Xor => a ^ b,
                        Opcode::Eq => (a == b) as i64,
                        _ => (a < b) as i64,
                    });
                }
                Opcode::Load => {
                    let addr = pop!();
                    let v = self.memory.borrow_mut().load_i64(addr)?;
                    stack.push(v);
                }
                Opcode::Store => {
                    let value = pop!();
                    let addr = pop!();
                    self.memory.borrow_mut().store_i64(addr, value)?;
                }
                Opcode::LocalGet => push!(locals[locals_base + ins.operand as usize]),
                Opcode::LocalSet => {
                    let v = pop!();
                    locals[locals_base + ins.operand as usize] = v;
                }
                Opcode::Br => pc = ins.operand as usize,
                Opcode::BrIf => {
                    if pop!() != 0 {
                        pc = ins.operand as usize;
                    }
                }
                Opcode::Call => {
                    let callee = &image.functions[ins.operand as usize];
                    guards.push(push_frame()?);
                    let new_base = locals.len();
                    let split = stack.len() - callee.nargs as usize;
                    locals.extend(stack.drain(split..));
                    locals.resize(new_base + callee.frame_slots(), 0);
                    frames.push(SavedFrame {
                        func: cur,
                        pc,
                        locals_base,
                        stack_base,
                    });
                    cur = ins.operand as u32;
                    pc = 0;
                    locals_base = new_base;
                    stack_base = stack.len();
                }
                Opcode::CallImport => {
                    let mut a = [0i64; IMPORT_ARITY];
                    for slot in a.iter_mut().rev() {
                        *slot = pop!();
                    }
                    let host = self
                        .imports
                        .slots
                        .get(ins.operand as usize)
                        .ok_or(TrapKind::UnreachableImport)?
                        .clone();
                    let r = host(self, a)?;
                    stack.push(r);
                }
                Opcode::Ret => {
                    let result = if image.functions[cur as usize].nrets == 1 {
                        Some(pop!())
                    } else {
                        None
                    };
                    stack.truncate(stack_base);
                    locals.truncate(locals_base);
                    guards.pop();
                    match frames.pop() {
                        None => return Ok(result),
                        Some(saved) => {
                            cur = saved.func;
                            pc = saved.pc;
                            locals_base = saved.locals_base;
                            stack_base = saved.stack_base;
                            if let Some(v) = result {
                                push!(v);
                            }
                        }
                    }
                }
                Opcode::MemSize => push!(self.cur_pages() as i64),
                Opcode::MemGrow => {
                    let delta = pop!();
                    stack.push(self.mem_grow(delta));
                }
            }
        }
    }
}
