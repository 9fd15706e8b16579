//! A deliberately small sBPF v1 interpreter used only as a test oracle.
//!
//! It reads raw instruction bytes and keeps its own memory map, so it
//! shares no decoding or execution code with the crate under test. Only
//! the loader's relocation tables (syscall and function hashes) are taken
//! from the image.

use solsym_core::bytecode::image::ProgramImage;

const PROGRAM: u64 = 0x1_0000_0000;
const STACK: u64 = 0x2_0000_0000;
const HEAP: u64 = 0x3_0000_0000;
const INPUT: u64 = 0x4_0000_0000;
const FRAME: u64 = 4096;
const FRAMES: u64 = 64;
const HEAP_LEN: u64 = 32 * 1024;

#[derive(Debug, PartialEq, Eq)]
pub enum RefExit {
    Exited(u64),
    Failed(String),
    StepLimit,
}

pub struct RefVm<'a> {
    image: &'a ProgramImage,
    pub regs: [u64; 11],
    pub pc: u64,
    program: Vec<u8>,
    stack: Vec<u8>,
    heap: Vec<u8>,
    input: Vec<u8>,
    heap_used: u64,
    frames: Vec<(u64, [u64; 4], u64)>,
    pub trace: Vec<(u64, [u64; 11])>,
}

impl<'a> RefVm<'a> {
    pub fn new(image: &'a ProgramImage, input: Vec<u8>) -> RefVm<'a> {
        let text_at = image.text_vaddr as usize;
        let ro_at = (image.rodata_base - PROGRAM) as usize;
        let len = (text_at + image.text.len()).max(ro_at + image.rodata.len());
        let mut program = vec![0u8; len];
        program[ro_at..ro_at + image.rodata.len()].copy_from_slice(&image.rodata);
        program[text_at..text_at + image.text.len()].copy_from_slice(&image.text);
        let mut regs = [0u64; 11];
        regs[1] = INPUT;
        regs[10] = STACK + FRAME;
        RefVm {
            image,
            regs,
            pc: image.entry,
            program,
            stack: vec![0; (FRAME * FRAMES) as usize],
            heap: vec![0; HEAP_LEN as usize],
            input,
            heap_used: 0,
            frames: Vec::new(),
            trace: Vec::new(),
        }
    }

    fn slice(&mut self, addr: u64, n: u64, write: bool) -> Result<&mut [u8], String> {
        let (base, buf) = match addr >> 32 {
            1 if !write => (PROGRAM, &mut self.program),
            2 => (STACK, &mut self.stack),
            3 => (HEAP, &mut self.heap),
            4 => (INPUT, &mut self.input),
            _ => return Err(format!("bad access {addr:#x}")),
        };
        let off = addr - base;
        if off.checked_add(n).is_none_or(|end| end > buf.len() as u64) {
            return Err(format!("bad access {addr:#x}+{n}"));
        }
        Ok(&mut buf[off as usize..(off + n) as usize])
    }

    fn load(&mut self, addr: u64, n: u64) -> Result<u64, String> {
        let mut b = [0u8; 8];
        b[..n as usize].copy_from_slice(self.slice(addr, n, false)?);
        Ok(u64::from_le_bytes(b))
    }

    fn store(&mut self, addr: u64, n: u64, v: u64) -> Result<(), String> {
        self.slice(addr, n, true)?.copy_from_slice(&v.to_le_bytes()[..n as usize]);
        Ok(())
    }

    fn syscall(&mut self, name: &str) -> Result<u64, String> {
        let r = self.regs;
        match name {
            "sol_log_" => self.slice(r[1], r[2], false).map(|_| 0),
            "sol_log_64_" | "sol_invoke_signed_c" | "sol_invoke_signed_rust" => Ok(0),
            "sol_memcpy_" => {
                let src = self.slice(r[2], r[3], false)?.to_vec();
                self.slice(r[1], r[3], true)?.copy_from_slice(&src);
                Ok(0)
            }
            "sol_alloc_free_" => {
                if r[2] != 0 {
                    return Ok(0);
                }
                let used = (self.heap_used + r[1] + 7) & !7;
                if used > HEAP_LEN {
                    return Ok(0);
                }
                self.heap_used = used;
                Ok(HEAP + HEAP_LEN - used)
            }
            "abort" | "sol_panic_" => Err("abort".into()),
            other => Err(format!("syscall {other}")),
        }
    }

    pub fn run(&mut self, limit: usize) -> RefExit {
        for _ in 0..limit {
            match self.step() {
                Ok(Some(code)) => return RefExit::Exited(code),
                Ok(None) => {}
                Err(e) => return RefExit::Failed(e),
            }
        }
        RefExit::StepLimit
    }

    fn step(&mut self) -> Result<Option<u64>, String> {
        let pc = self.pc;
        let at = pc as usize;
        let raw = self.image.text.get(at..at + 8).ok_or("pc out of text")?;
        let op = raw[0];
        let dst = (raw[1] & 0xf) as usize;
        let src = (raw[1] >> 4) as usize;
        let off = i16::from_le_bytes([raw[2], raw[3]]) as i64;
        let imm = i32::from_le_bytes([raw[4], raw[5], raw[6], raw[7]]);
        let simm = imm as i64 as u64;
        let mut next = pc + 8;
        let mut exit = None;
        let size = |op: u8| [4u64, 2, 1, 8][((op >> 3) & 3) as usize];
        match op & 7 {
            0 => {
                let hi = self.image.text.get(at + 12..at + 16).ok_or("truncated lddw")?;
                let hi = u32::from_le_bytes(hi.try_into().unwrap()) as u64;
                self.regs[dst] = (imm as u32 as u64) | hi << 32;
                next = pc + 16;
            }
            1 => self.regs[dst] = self.load(self.regs[src].wrapping_add(off as u64), size(op))?,
            2 => self.store(self.regs[dst].wrapping_add(off as u64), size(op), simm)?,
            3 => self.store(self.regs[dst].wrapping_add(off as u64), size(op), self.regs[src])?,
            4 | 7 => {
                let wide = op & 7 == 7;
                let b = if op & 8 != 0 { self.regs[src] } else { simm };
                self.regs[dst] = if op & 0xf0 == 0xd0 {
                    byteswap(self.regs[dst], imm, op & 8 != 0)
                } else if wide { alu64(op & 0xf0, self.regs[dst], b)? } else { alu32(op & 0xf0, self.regs[dst], b)? };
            }
            5 => match op {
                0x85 => {
                    if let Some(name) = self.image.syscalls.get(&(imm as u32)) {
                        let name = name.clone();
                        self.regs[0] = self.syscall(&name)?;
                    } else {
                        let target = *self.image.functions.get(&(imm as u32)).ok_or("unresolved call")?;
                        if self.frames.len() as u64 + 1 >= FRAMES {
                            return Err("call depth".into());
                        }
                        self.frames.push((next, self.regs[6..10].try_into().unwrap(), self.regs[10]));
                        self.regs[10] += FRAME;
                        next = target;
                    }
                }
                0x95 => match self.frames.pop() {
                    Some((ret, saved, fp)) => {
                        self.regs[6..10].copy_from_slice(&saved);
                        self.regs[10] = fp;
                        next = ret;
                    }
                    None => exit = Some(self.regs[0]),
                },
                _ => {
                    let a = self.regs[dst];
                    let b = if op & 8 != 0 { self.regs[src] } else { simm };
                    let (sa, sb) = (a as i64, b as i64);
                    let taken = match op & 0xf0 {
                        0x00 => true,
                        0x10 => a == b,
                        0x20 => a > b,
                        0x30 => a >= b,
                        0x40 => a & b != 0,
                        0x50 => a != b,
                        0x60 => sa > sb,
                        0x70 => sa >= sb,
                        0xa0 => a < b,
                        0xb0 => a <= b,
                        0xc0 => sa < sb,
                        0xd0 => sa <= sb,
                        _ => return Err(format!("opcode {op:#x}")),
                    };
                    if taken {
                        next = (pc as i64 + 8 + off * 8) as u64;
                    }
                }
            },
            _ => return Err(format!("opcode {op:#x}")),
        }
        self.pc = next;
        self.trace.push((pc, self.regs));
        Ok(exit)
    }
}

fn alu64(code: u8, a: u64, b: u64) -> Result<u64, String> {
    Ok(match code {
        0x00 => a.wrapping_add(b),
        0x10 => a.wrapping_sub(b),
        0x20 => a.wrapping_mul(b),
        0x30 => a.checked_div(b).ok_or("div by zero")?,
        0x40 => a | b,
        0x50 => a & b,
        0x60 => a << (b & 63),
        0x70 => a >> (b & 63),
        0x80 => (a as i64).wrapping_neg() as u64,
        0x90 => a.checked_rem(b).ok_or("div by zero")?,
        0xa0 => a ^ b,
        0xb0 => b,
        0xc0 => ((a as i64) >> (b & 63)) as u64,
        _ => return Err(format!("alu {code:#x}")),
    })
}

fn alu32(code: u8, a: u64, b: u64) -> Result<u64, String> {
    let (x, y) = (a as u32, b as u32);
    let sext = |v: u32| v as i32 as i64 as u64;
    Ok(match code {
        0x00 => sext(x.wrapping_add(y)),
        0x10 => sext(x.wrapping_sub(y)),
        0x20 => sext(x.wrapping_mul(y)),
        0x30 => x.checked_div(y).ok_or("div by zero")? as u64,
        0x40 => (x | y) as u64,
        0x50 => (x & y) as u64,
        0x60 => (x << (y & 31)) as u64,
        0x70 => (x >> (y & 31)) as u64,
        0x80 => (x as i32).wrapping_neg() as u32 as u64,
        0x90 => x.checked_rem(y).ok_or("div by zero")? as u64,
        0xa0 => (x ^ y) as u64,
        0xb0 => y as u64,
        0xc0 => ((x as i32) >> (y & 31)) as u32 as u64,
        _ => return Err(format!("alu {code:#x}")),
    })
}

fn byteswap(a: u64, bits: i32, big: bool) -> u64 {
    match (bits, big) {
        (16, false) => a as u16 as u64,
        (32, false) => a as u32 as u64,
        (16, true) => (a as u16).swap_bytes() as u64,
        (32, true) => (a as u32).swap_bytes() as u64,
        (_, true) => a.swap_bytes(),
        _ => a,
    }
}
