//! Plain concrete interpreter.
//!
//! Serves as the reference semantics for differential tests of the symbolic
//! engine and as the replay engine for synthesized exploits.

use std::collections::BTreeMap;

use thiserror::Error;

use super::image::{ProgramImage, MM_PROGRAM_START};
use super::isa::{AluOp, Instruction, JmpCond, Op, Operand, PqrOp, Width};

pub const MM_STACK_START: u64 = 0x2_0000_0000;
pub const MM_HEAP_START: u64 = 0x3_0000_0000;
pub const MM_INPUT_START: u64 = 0x4_0000_0000;
pub const STACK_FRAME_SIZE: u64 = 4096;
pub const MAX_CALL_DEPTH: usize = 64;
pub const STACK_SIZE: u64 = STACK_FRAME_SIZE * MAX_CALL_DEPTH as u64;
pub const HEAP_SIZE: u64 = 32 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VmError {
    #[error("access violation at pc {pc:#x}: {len} bytes at {address:#x}")]
    AccessViolation { pc: u64, address: u64, len: u64 },
    #[error("division by zero at pc {pc:#x}")]
    DivideByZero { pc: u64 },
    #[error("call depth exceeded at pc {pc:#x}")]
    CallDepth { pc: u64 },
    #[error("unsupported syscall {name}")]
    UnknownSyscall { name: String },
    #[error("unresolved call {imm:#x} at pc {pc:#x}")]
    UnresolvedCall { pc: u64, imm: u32 },
    #[error("indirect call to {target:#x} at pc {pc:#x}")]
    BadIndirectCall { pc: u64, target: u64 },
    #[error("program counter {pc:#x} left the text section")]
    PcOutOfBounds { pc: u64 },
    #[error("aborted: {0}")]
    Abort(String),
}

/// Memory regions addressed by the concrete interpreter.
#[derive(Clone, Debug)]
pub struct ConcreteMemory {
    pub program: Vec<u8>,
    pub program_base: u64,
    pub stack: Vec<u8>,
    pub heap: Vec<u8>,
    pub input: Vec<u8>,
}

impl ConcreteMemory {
    pub fn new(image: &ProgramImage, input: Vec<u8>) -> ConcreteMemory {
        // Text and read-only data share one read-only region.
        let text_start = MM_PROGRAM_START + image.text_vaddr;
        let ro_start = image.rodata_base;
        let base = if image.rodata.is_empty() { text_start } else { text_start.min(ro_start) };
        let end = (text_start + image.text.len() as u64).max(ro_start + image.rodata.len() as u64);
        let mut program = vec![0u8; (end - base) as usize];
        let t = (text_start - base) as usize;
        program[t..t + image.text.len()].copy_from_slice(&image.text);
        if !image.rodata.is_empty() {
            let r = (ro_start - base) as usize;
            program[r..r + image.rodata.len()].copy_from_slice(&image.rodata);
        }
        ConcreteMemory {
            program,
            program_base: base,
            stack: vec![0; STACK_SIZE as usize],
            heap: vec![0; HEAP_SIZE as usize],
            input,
        }
    }

    fn region(&mut self, address: u64, len: u64, write: bool) -> Option<&mut [u8]> {
        let (base, buf, writable) = match address >> 32 {
            1 => (self.program_base, &mut self.program, false),
            2 => (MM_STACK_START, &mut self.stack, true),
            3 => (MM_HEAP_START, &mut self.heap, true),
            4 => (MM_INPUT_START, &mut self.input, true),
            _ => return None,
        };
        if write && !writable {
            return None;
        }
        let off = address.checked_sub(base)?;
        let end = off.checked_add(len)?;
        if end > buf.len() as u64 {
            return None;
        }
        Some(&mut buf[off as usize..end as usize])
    }

    pub fn read(&mut self, address: u64, len: u64) -> Option<Vec<u8>> {
        self.region(address, len, false).map(|s| s.to_vec())
    }

    pub fn write(&mut self, address: u64, bytes: &[u8]) -> Option<()> {
        self.region(address, bytes.len() as u64, true).map(|s| s.copy_from_slice(bytes))
    }

    pub fn read_u64(&mut self, address: u64) -> Option<u64> {
        self.read(address, 8).map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
}

/// Syscall implementations for the concrete interpreter.
pub trait Syscalls {
    /// Returns the value placed in r0.
    fn call(&mut self, name: &str, args: [u64; 5], mem: &mut ConcreteMemory, pc: u64) -> Result<u64, VmError>;
}

/// Logging, memory helpers and abort; everything else is rejected.
#[derive(Default)]
pub struct BasicSyscalls {
    pub log: Vec<String>,
}

pub fn fault(pc: u64, address: u64, len: u64) -> VmError {
    VmError::AccessViolation { pc, address, len }
}

impl Syscalls for BasicSyscalls {
    fn call(&mut self, name: &str, a: [u64; 5], mem: &mut ConcreteMemory, pc: u64) -> Result<u64, VmError> {
        basic_syscall(name, a, mem, pc, &mut self.log)
            .unwrap_or_else(|| Err(VmError::UnknownSyscall { name: name.to_string() }))
    }
}

/// Shared concrete semantics of the non-CPI syscalls; `None` if `name` is
/// not one of them.
pub fn basic_syscall(
    name: &str,
    a: [u64; 5],
    mem: &mut ConcreteMemory,
    pc: u64,
    log: &mut Vec<String>,
) -> Option<Result<u64, VmError>> {
    let r = (|| -> Result<u64, VmError> {
        match name {
            "abort" => Err(VmError::Abort("abort".into())),
            "sol_panic_" => Err(VmError::Abort("panic".into())),
            "sol_log_" => {
                let b = mem.read(a[0], a[1]).ok_or_else(|| fault(pc, a[0], a[1]))?;
                log.push(String::from_utf8_lossy(&b).into_owned());
                Ok(0)
            }
            "sol_log_64_" => {
                log.push(format!("{:#x} {:#x} {:#x} {:#x} {:#x}", a[0], a[1], a[2], a[3], a[4]));
                Ok(0)
            }
            "sol_log_pubkey" => {
                let b = mem.read(a[0], 32).ok_or_else(|| fault(pc, a[0], 32))?;
                log.push(hex::encode(b));
                Ok(0)
            }
            "sol_log_compute_units_" => Ok(0),
            "sol_log_data" => {
                for i in 0..a[1] {
                    let ptr = mem.read_u64(a[0] + 16 * i).ok_or_else(|| fault(pc, a[0], 16))?;
                    let len = mem.read_u64(a[0] + 16 * i + 8).ok_or_else(|| fault(pc, a[0], 16))?;
                    let b = mem.read(ptr, len).ok_or_else(|| fault(pc, ptr, len))?;
                    log.push(hex::encode(b));
                }
                Ok(0)
            }
            "sol_memcpy_" | "sol_memmove_" => {
                let b = mem.read(a[1], a[2]).ok_or_else(|| fault(pc, a[1], a[2]))?;
                mem.write(a[0], &b).ok_or_else(|| fault(pc, a[0], a[2]))?;
                Ok(0)
            }
            "sol_memset_" => {
                mem.write(a[0], &vec![a[1] as u8; a[2] as usize]).ok_or_else(|| fault(pc, a[0], a[2]))?;
                Ok(0)
            }
            "sol_memcmp_" => {
                let x = mem.read(a[0], a[2]).ok_or_else(|| fault(pc, a[0], a[2]))?;
                let y = mem.read(a[1], a[2]).ok_or_else(|| fault(pc, a[1], a[2]))?;
                let res: i32 = if x == y { 0 } else { 1 };
                mem.write(a[3], &res.to_le_bytes()).ok_or_else(|| fault(pc, a[3], 4))?;
                Ok(0)
            }
            _ => Err(VmError::UnknownSyscall { name: name.to_string() }),
        }
    })();
    match r {
        Err(VmError::UnknownSyscall { .. }) => None,
        other => Some(other),
    }
}

#[derive(Clone, Debug)]
struct Frame {
    ret: u64,
    saved: [u64; 4],
    fp: u64,
}

/// One executed instruction and the register file after it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceStep {
    pub pc: u64,
    pub regs: [u64; 11],
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VmExit {
    Exited(u64),
    Failed(VmError),
    StepLimit,
}

pub struct Vm<'a> {
    pub image: &'a ProgramImage,
    pub regs: [u64; 11],
    pub pc: u64,
    pub mem: ConcreteMemory,
    frames: Vec<Frame>,
    pub steps: u64,
    pub trace: Option<Vec<TraceStep>>,
    /// Addresses of executed instructions in order, when tracing.
    pub visited: Vec<u64>,
}

pub fn sign_extend32(v: u32) -> u64 {
    v as i32 as i64 as u64
}

/// Concrete ALU semantics shared with the symbolic engine's constant folding.
pub fn alu(op: AluOp, is64: bool, a: u64, b: u64) -> Option<u64> {
    if is64 {
        Some(match op {
            AluOp::Add => a.wrapping_add(b),
            AluOp::Sub => a.wrapping_sub(b),
            AluOp::Mul => a.wrapping_mul(b),
            AluOp::Div => a.checked_div(b)?,
            AluOp::Mod => a.checked_rem(b)?,
            AluOp::Or => a | b,
            AluOp::And => a & b,
            AluOp::Xor => a ^ b,
            AluOp::Lsh => a.wrapping_shl(b as u32 & 63),
            AluOp::Rsh => a.wrapping_shr(b as u32 & 63),
            AluOp::Arsh => ((a as i64).wrapping_shr(b as u32 & 63)) as u64,
            AluOp::Neg => (a as i64).wrapping_neg() as u64,
            AluOp::Mov => b,
            AluOp::Le => match b {
                16 => a & 0xffff,
                32 => a & 0xffff_ffff,
                _ => a,
            },
            AluOp::Be => match b {
                16 => (a as u16).swap_bytes() as u64,
                32 => (a as u32).swap_bytes() as u64,
                _ => a.swap_bytes(),
            },
        })
    } else {
        let (x, y) = (a as u32, b as u32);
        Some(match op {
            AluOp::Add => sign_extend32(x.wrapping_add(y)),
            AluOp::Sub => sign_extend32(x.wrapping_sub(y)),
            AluOp::Mul => sign_extend32(x.wrapping_mul(y)),
            AluOp::Div => x.checked_div(y)? as u64,
            AluOp::Mod => x.checked_rem(y)? as u64,
            AluOp::Or => (x | y) as u64,
            AluOp::And => (x & y) as u64,
            AluOp::Xor => (x ^ y) as u64,
            AluOp::Lsh => x.wrapping_shl(y & 31) as u64,
            AluOp::Rsh => x.wrapping_shr(y & 31) as u64,
            AluOp::Arsh => (x as i32).wrapping_shr(y & 31) as u32 as u64,
            AluOp::Neg => (x as i32).wrapping_neg() as u32 as u64,
            AluOp::Mov => y as u64,
            AluOp::Le | AluOp::Be => return alu(op, true, a, b),
        })
    }
}

pub fn pqr(op: PqrOp, is64: bool, a: u64, b: u64) -> Option<u64> {
    if is64 {
        Some(match op {
            PqrOp::Uhmul => ((a as u128 * b as u128) >> 64) as u64,
            PqrOp::Shmul => ((a as i64 as i128 * b as i64 as i128) >> 64) as u64,
            PqrOp::Lmul => a.wrapping_mul(b),
            PqrOp::Udiv => a.checked_div(b)?,
            PqrOp::Urem => a.checked_rem(b)?,
            PqrOp::Sdiv => if b == 0 { return None } else { (a as i64).wrapping_div(b as i64) as u64 },
            PqrOp::Srem => if b == 0 { return None } else { (a as i64).wrapping_rem(b as i64) as u64 },
        })
    } else {
        let (x, y) = (a as u32, b as u32);
        Some(match op {
            PqrOp::Lmul => x.wrapping_mul(y) as u64,
            PqrOp::Udiv => x.checked_div(y)? as u64,
            PqrOp::Urem => x.checked_rem(y)? as u64,
            PqrOp::Sdiv => if y == 0 { return None } else { (x as i32).wrapping_div(y as i32) as u32 as u64 },
            PqrOp::Srem => if y == 0 { return None } else { (x as i32).wrapping_rem(y as i32) as u32 as u64 },
            PqrOp::Uhmul | PqrOp::Shmul => return pqr(op, true, a, b),
        })
    }
}

impl<'a> Vm<'a> {
    pub fn new(image: &'a ProgramImage, input: Vec<u8>) -> Vm<'a> {
        let mut regs = [0u64; 11];
        regs[1] = MM_INPUT_START;
        regs[10] = MM_STACK_START + STACK_FRAME_SIZE;
        Vm {
            image,
            regs,
            pc: image.entry,
            mem: ConcreteMemory::new(image, input),
            frames: Vec::new(),
            steps: 0,
            trace: None,
            visited: Vec::new(),
        }
    }

    pub fn with_trace(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub fn call_depth(&self) -> usize {
        self.frames.len()
    }

    pub fn run(&mut self, syscalls: &mut dyn Syscalls, limit: u64) -> VmExit {
        loop {
            if self.steps >= limit {
                return VmExit::StepLimit;
            }
            match self.step(syscalls) {
                Ok(Some(code)) => return VmExit::Exited(code),
                Ok(None) => {}
                Err(e) => return VmExit::Failed(e),
            }
        }
    }

    /// Execute one instruction; `Some(r0)` when the program exits.
    pub fn step(&mut self, syscalls: &mut dyn Syscalls) -> Result<Option<u64>, VmError> {
        let pc = self.pc;
        let insn: Instruction = *self.image.instruction_at(pc).ok_or(VmError::PcOutOfBounds { pc })?;
        self.steps += 1;
        self.visited.push(pc);
        let mut next = insn.next_address();
        let mut exited = None;
        let operand = |regs: &[u64; 11], o: Operand| match o {
            Operand::Imm(i) => i as u64,
            Operand::Reg(r) => regs[r as usize],
        };
        match insn.op() {
            Op::Lddw { dst, imm } => self.regs[dst as usize] = imm,
            Op::Ldx { width, dst, base, off } => {
                let addr = self.regs[base as usize].wrapping_add(off as i64 as u64);
                let n = width.bytes() as u64;
                let b = self.mem.read(addr, n).ok_or_else(|| fault(pc, addr, n))?;
                let mut v = [0u8; 8];
                v[..n as usize].copy_from_slice(&b);
                self.regs[dst as usize] = u64::from_le_bytes(v);
            }
            Op::St { width, base, off, imm } => {
                let addr = self.regs[base as usize].wrapping_add(off as i64 as u64);
                self.store(pc, width, addr, imm as u64)?;
            }
            Op::Stx { width, base, off, src } => {
                let addr = self.regs[base as usize].wrapping_add(off as i64 as u64);
                self.store(pc, width, addr, self.regs[src as usize])?;
            }
            Op::Alu { op, is64, dst, operand: o } => {
                let (a, b) = (self.regs[dst as usize], operand(&self.regs, o));
                self.regs[dst as usize] = alu(op, is64, a, b).ok_or(VmError::DivideByZero { pc })?;
            }
            Op::Pqr { op, is64, dst, operand: o } => {
                let (a, b) = (self.regs[dst as usize], operand(&self.regs, o));
                self.regs[dst as usize] = pqr(op, is64, a, b).ok_or(VmError::DivideByZero { pc })?;
            }
            Op::Ja { .. } => next = insn.jump_target().unwrap(),
            Op::Jcond { cond, dst, operand: o, .. } => {
                if jump_taken(cond, self.regs[dst as usize], operand(&self.regs, o)) {
                    next = insn.jump_target().unwrap();
                }
            }
            Op::Call { imm } => {
                if let Some(name) = self.image.syscall_name(imm) {
                    let args = [self.regs[1], self.regs[2], self.regs[3], self.regs[4], self.regs[5]];
                    self.regs[0] = syscalls.call(name, args, &mut self.mem, pc)?;
                } else if let Some(target) = self.image.call_target(imm) {
                    self.push_frame(pc, next)?;
                    next = target;
                } else {
                    return Err(VmError::UnresolvedCall { pc, imm });
                }
            }
            Op::Callx { reg } => {
                let value = self.regs[reg as usize];
                let target = value.wrapping_sub(MM_PROGRAM_START + self.image.text_vaddr);
                if self.image.index_of(target).is_none() {
                    return Err(VmError::BadIndirectCall { pc, target: value });
                }
                self.push_frame(pc, next)?;
                next = target;
            }
            Op::Exit => match self.frames.pop() {
                Some(frame) => {
                    self.regs[6..10].copy_from_slice(&frame.saved);
                    self.regs[10] = frame.fp;
                    next = frame.ret;
                }
                None => exited = Some(self.regs[0]),
            },
        }
        self.pc = next;
        if let Some(t) = &mut self.trace {
            t.push(TraceStep { pc, regs: self.regs });
        }
        Ok(exited)
    }

    fn push_frame(&mut self, pc: u64, ret: u64) -> Result<(), VmError> {
        if self.frames.len() + 1 >= MAX_CALL_DEPTH {
            return Err(VmError::CallDepth { pc });
        }
        self.frames.push(Frame {
            ret,
            saved: self.regs[6..10].try_into().unwrap(),
            fp: self.regs[10],
        });
        self.regs[10] += STACK_FRAME_SIZE;
        Ok(())
    }

    fn store(&mut self, pc: u64, width: Width, addr: u64, value: u64) -> Result<(), VmError> {
        let n = width.bytes() as usize;
        self.mem.write(addr, &value.to_le_bytes()[..n]).ok_or_else(|| fault(pc, addr, n as u64))
    }
}

pub fn jump_taken(cond: JmpCond, a: u64, b: u64) -> bool {
    cond.eval(a, b)
}

/// Addresses executed per call, keyed by address, for coverage reports.
pub fn coverage_of(visited: &[u64]) -> BTreeMap<u64, u64> {
    let mut out = BTreeMap::new();
    for &a in visited {
        *out.entry(a).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::image::load_program;

    fn run(src: &str, input: Vec<u8>) -> (VmExit, Vec<String>) {
        let image = load_program(&assemble(src).unwrap().to_elf()).unwrap();
        let mut vm = Vm::new(&image, input);
        let mut sys = BasicSyscalls::default();
        let exit = vm.run(&mut sys, 10_000);
        (exit, sys.log)
    }

    #[test]
    fn arithmetic_and_exit() {
        let (exit, _) = run("mov64 r0, 6\nmul64 r0, 7\nexit", vec![]);
        assert_eq!(exit, VmExit::Exited(42));
    }

    #[test]
    fn alu32_sign_extension_rules() {
        assert_eq!(alu(AluOp::Add, false, 0x7fff_ffff, 1), Some(0xffff_ffff_8000_0000));
        assert_eq!(alu(AluOp::Or, false, 0x8000_0000, 0), Some(0x8000_0000));
        assert_eq!(alu(AluOp::Lsh, false, 1, 33), Some(2));
        assert_eq!(alu(AluOp::Div, true, 1, 0), None);
        assert_eq!(alu(AluOp::Be, true, 0x1122, 16), Some(0x2211));
    }

    #[test]
    fn reads_input_and_calls_functions() {
        let src = "
        entrypoint:
            ldxb r6, [r1+0]
            mov64 r1, r6
            call double
            exit
        double:
            mov64 r0, r1
            add64 r0, r1
            mov64 r6, 99
            exit
        ";
        let (exit, _) = run(src, vec![21]);
        assert_eq!(exit, VmExit::Exited(42));
    }

    #[test]
    fn callee_saved_registers_restored() {
        let src = "entrypoint:\n mov64 r6, 5\n call f\n mov64 r0, r6\n exit\nf:\n mov64 r6, 9\n exit";
        assert_eq!(run(src, vec![]).0, VmExit::Exited(5));
    }

    #[test]
    fn logs_and_faults() {
        let src = "lddw r1, msg\nmov64 r2, 2\ncall sol_log_\nldxdw r0, [r1+0]\nexit\n.rodata\nmsg:\n.ascii \"hi\"";
        let (exit, log) = run(src, vec![]);
        assert_eq!(log, vec!["hi".to_string()]);
        assert!(matches!(exit, VmExit::Failed(VmError::AccessViolation { .. })), "{exit:?}");
        let (exit, _) = run("mov64 r0, 1\nmov64 r1, 0\ndiv64 r0, r1\nexit", vec![]);
        assert_eq!(exit, VmExit::Failed(VmError::DivideByZero { pc: 16 }));
    }
}
