//! Byte-granular symbolic memory with copy-on-write chunks.

use std::sync::Arc;

use crate::bytecode::image::ProgramImage;
use crate::bytecode::interp::{HEAP_SIZE, MM_HEAP_START, MM_INPUT_START, MM_STACK_START, STACK_SIZE};
use crate::bytecode::image::MM_PROGRAM_START;

use super::expr::Expr;

pub const CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RegionKind {
    Program,
    Stack,
    Heap,
    Input,
}

#[derive(Clone)]
enum Backing {
    Concrete(Arc<Vec<u8>>),
    Symbolic(Vec<Option<Arc<Vec<Expr>>>>),
}

#[derive(Clone)]
pub struct Region {
    pub kind: RegionKind,
    pub base: u64,
    pub size: u64,
    pub writable: bool,
    backing: Backing,
}

impl Region {
    fn symbolic(kind: RegionKind, base: u64, size: u64, init: Option<Vec<Expr>>) -> Region {
        let n = (size as usize).div_ceil(CHUNK);
        let mut chunks: Vec<Option<Arc<Vec<Expr>>>> = vec![None; n];
        if let Some(bytes) = init {
            for (i, slot) in chunks.iter_mut().enumerate() {
                let lo = i * CHUNK;
                if lo >= bytes.len() {
                    break;
                }
                let mut chunk: Vec<Expr> = bytes[lo..bytes.len().min(lo + CHUNK)].to_vec();
                chunk.resize(CHUNK, Expr::zero_byte());
                *slot = Some(Arc::new(chunk));
            }
        }
        Region { kind, base, size, writable: true, backing: Backing::Symbolic(chunks) }
    }

    fn contains(&self, addr: u64, len: u64) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.base + self.size)
    }

    fn byte(&self, off: usize) -> Expr {
        match &self.backing {
            Backing::Concrete(bytes) => Expr::constant(bytes[off] as u128, 8),
            Backing::Symbolic(chunks) => match &chunks[off / CHUNK] {
                Some(c) => c[off % CHUNK].clone(),
                None => Expr::zero_byte(),
            },
        }
    }

    fn set_byte(&mut self, off: usize, v: Expr) {
        if let Backing::Symbolic(chunks) = &mut self.backing {
            let slot = &mut chunks[off / CHUNK];
            let chunk = slot.get_or_insert_with(|| Arc::new(vec![Expr::zero_byte(); CHUNK]));
            Arc::make_mut(chunk)[off % CHUNK] = v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemFault {
    pub address: u64,
    pub len: u64,
    pub write: bool,
}

#[derive(Clone)]
pub struct Memory {
    pub regions: Vec<Region>,
}

impl Memory {
    /// Program, stack, heap and input regions laid out like the concrete VM.
    pub fn new(image: &ProgramImage, input: Vec<Expr>) -> Memory {
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
        let input_len = input.len() as u64;
        Memory {
            regions: vec![
                Region {
                    kind: RegionKind::Program,
                    base,
                    size: program.len() as u64,
                    writable: false,
                    backing: Backing::Concrete(Arc::new(program)),
                },
                Region::symbolic(RegionKind::Stack, MM_STACK_START, STACK_SIZE, None),
                Region::symbolic(RegionKind::Heap, MM_HEAP_START, HEAP_SIZE, None),
                Region::symbolic(RegionKind::Input, MM_INPUT_START, input_len, Some(input)),
            ],
        }
    }

    pub fn region_index(&self, addr: u64, len: u64) -> Option<usize> {
        let idx = match addr >> 32 {
            1 => 0,
            2 => 1,
            3 => 2,
            4 => 3,
            _ => return None,
        };
        self.regions[idx].contains(addr, len).then_some(idx)
    }

    pub fn region_kind(&self, addr: u64, len: u64) -> Option<RegionKind> {
        self.region_index(addr, len).map(|i| self.regions[i].kind)
    }

    pub fn input_size(&self) -> u64 {
        self.regions[3].size
    }

    pub fn read_bytes(&self, addr: u64, len: u64) -> Result<Vec<Expr>, MemFault> {
        let idx = self.region_index(addr, len).ok_or(MemFault { address: addr, len, write: false })?;
        let r = &self.regions[idx];
        let off = (addr - r.base) as usize;
        Ok((0..len as usize).map(|i| r.byte(off + i)).collect())
    }

    /// Little-endian load of `len` bytes as one `8 * len` wide term.
    pub fn read(&self, addr: u64, len: u64) -> Result<Expr, MemFault> {
        let bytes = self.read_bytes(addr, len)?;
        let mut acc = bytes[bytes.len() - 1].clone();
        for b in bytes[..bytes.len() - 1].iter().rev() {
            acc = acc.concat(b);
        }
        Ok(acc)
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[Expr]) -> Result<(), MemFault> {
        let len = bytes.len() as u64;
        let fault = MemFault { address: addr, len, write: true };
        let idx = self.region_index(addr, len).ok_or(fault.clone())?;
        let r = &mut self.regions[idx];
        if !r.writable {
            return Err(fault);
        }
        let off = (addr - r.base) as usize;
        for (i, b) in bytes.iter().enumerate() {
            r.set_byte(off + i, b.clone());
        }
        Ok(())
    }

    /// Little-endian store of a term whose width is a multiple of 8.
    pub fn write(&mut self, addr: u64, value: &Expr) -> Result<(), MemFault> {
        let n = value.width() / 8;
        let bytes: Vec<Expr> = (0..n).map(|i| value.extract(8 * i + 7, 8 * i)).collect();
        self.write_bytes(addr, &bytes)
    }

    /// Addresses whose bytes differ between two memories, chunk-wise.
    pub fn diff(&self, other: &Memory) -> Vec<u64> {
        let mut out = Vec::new();
        for (a, b) in self.regions.iter().zip(&other.regions) {
            let (Backing::Symbolic(ca), Backing::Symbolic(cb)) = (&a.backing, &b.backing) else {
                continue;
            };
            for (i, (x, y)) in ca.iter().zip(cb).enumerate() {
                let same = match (x, y) {
                    (Some(x), Some(y)) => Arc::ptr_eq(x, y),
                    (None, None) => true,
                    _ => false,
                };
                if same {
                    continue;
                }
                for j in 0..CHUNK {
                    let off = i * CHUNK + j;
                    if off as u64 >= a.size {
                        break;
                    }
                    if a.byte(off) != b.byte(off) {
                        out.push(a.base + off as u64);
                    }
                }
            }
        }
        out
    }

    /// Visit every stored byte of the writable regions, in address order,
    /// allowing replacement. Untouched chunks are skipped.
    pub fn rewrite_bytes(&mut self, mut f: impl FnMut(u64, &Expr) -> Option<Expr>) {
        for r in self.regions.iter_mut() {
            let base = r.base;
            let Backing::Symbolic(chunks) = &mut r.backing else { continue };
            for (i, slot) in chunks.iter_mut().enumerate() {
                let Some(chunk) = slot else { continue };
                let updates: Vec<(usize, Expr)> = chunk
                    .iter()
                    .enumerate()
                    .filter(|(_, e)| !e.is_const())
                    .filter_map(|(j, e)| f(base + (i * CHUNK + j) as u64, e).map(|n| (j, n)))
                    .collect();
                if !updates.is_empty() {
                    let c = Arc::make_mut(chunk);
                    for (j, e) in updates {
                        c[j] = e;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::image::load_program;

    fn image() -> ProgramImage {
        let asm = assemble("entrypoint:\n  mov64 r0, 0\n  exit\n.rodata\nmsg: .ascii \"hi\"\n").unwrap();
        load_program(&asm.to_elf()).unwrap()
    }

    #[test]
    fn roundtrip_and_cow() {
        let img = image();
        let input = vec![Expr::constant(7, 8); 16];
        let mut m = Memory::new(&img, input);
        let x = Expr::var("x", 64);
        m.write(MM_STACK_START + 8, &x).unwrap();
        assert_eq!(m.read(MM_STACK_START + 8, 8).unwrap(), x);
        assert_eq!(m.read(MM_STACK_START + 10, 2).unwrap(), x.extract(31, 16));
        let snapshot = m.clone();
        m.write(MM_STACK_START + 8, &Expr::constant(1, 64)).unwrap();
        assert_eq!(snapshot.read(MM_STACK_START + 8, 8).unwrap(), x);
        assert_eq!(m.diff(&snapshot).len(), 8);
        assert_eq!(m.read(MM_INPUT_START + 3, 1).unwrap().as_const(), Some(7));
        assert!(m.read(MM_INPUT_START + 15, 2).is_err());
    }

    #[test]
    fn program_is_read_only() {
        let img = image();
        let mut m = Memory::new(&img, vec![]);
        let ro = img.rodata_base;
        assert_eq!(m.read(ro, 2).unwrap().as_const(), Some(u128::from(u16::from_le_bytes(*b"hi"))));
        assert!(m.write(ro, &Expr::constant(0, 8)).is_err());
    }
}
