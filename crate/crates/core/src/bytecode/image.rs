//! Loading sBPF shared objects into a relocated [`ProgramImage`].

use std::collections::{BTreeMap, BTreeSet};
use std::io::Cursor;

use object::elf;
use object::read::elf::{ElfFile64, FileHeader, SectionHeader};
use object::{Endianness, Object, ObjectSection, ObjectSymbol, RelocationFlags, RelocationTarget};
use thiserror::Error;

use super::isa::{decode, DecodeError, Instruction, Op, SbpfVersion, CALL_IMM, INSN_SIZE, LDDW};

/// Start of the program region in the VM address space.
pub const MM_PROGRAM_START: u64 = 0x1_0000_0000;

pub const EM_BPF: u16 = 247;
pub const EM_SBPF: u16 = 263;

pub const R_BPF_NONE: u32 = 0;
pub const R_BPF_64_64: u32 = 1;
pub const R_BPF_64_RELATIVE: u32 = 8;
pub const R_BPF_64_32: u32 = 10;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("malformed ELF ({0})")]
    Malformed(String),
    #[error("unsupported target: machine {machine}, expected sBPF")]
    UnsupportedTarget { machine: u16 },
    #[error("relocation error at offset {offset:#x}: {reason}")]
    Relocation { offset: u64, reason: String },
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

/// Murmur3 (32-bit, seed 0) as used by the loader to key syscalls and
/// internal call targets.
pub fn symbol_hash(bytes: &[u8]) -> u32 {
    murmur3::murmur3_32(&mut Cursor::new(bytes), 0).expect("reading from memory")
}

pub fn pc_hash(address: u64) -> u32 {
    symbol_hash(&(address / INSN_SIZE).to_le_bytes())
}

/// A decoded, fully relocated program.
#[derive(Clone, Debug)]
pub struct ProgramImage {
    pub instructions: Vec<Instruction>,
    /// Instruction index per 8-byte slot of the text section.
    slot_index: Vec<Option<usize>>,
    pub entry: u64,
    /// Call-site immediate to syscall name.
    pub syscalls: BTreeMap<u32, String>,
    /// Call-site immediate to internal function address.
    pub functions: BTreeMap<u32, u64>,
    pub function_starts: BTreeSet<u64>,
    pub symbols: BTreeMap<u64, String>,
    /// Virtual address of the text section inside the program region.
    pub text_vaddr: u64,
    pub text: Vec<u8>,
    /// Read-only data, mapped at `rodata_base`.
    pub rodata: Vec<u8>,
    pub rodata_base: u64,
    pub version: SbpfVersion,
}

impl ProgramImage {
    /// Build an image from raw text bytes. Used by the ELF loader and by
    /// tests that do not need a container.
    pub fn from_text(
        text: Vec<u8>,
        entry: u64,
        version: SbpfVersion,
    ) -> Result<ProgramImage, LoadError> {
        let mut image = ProgramImage {
            instructions: Vec::new(),
            slot_index: Vec::new(),
            entry,
            syscalls: BTreeMap::new(),
            functions: BTreeMap::new(),
            function_starts: BTreeSet::new(),
            symbols: BTreeMap::new(),
            text_vaddr: 0,
            text,
            rodata: Vec::new(),
            rodata_base: MM_PROGRAM_START,
            version,
        };
        image.decode_text()?;
        image.function_starts.insert(entry);
        Ok(image)
    }

    fn decode_text(&mut self) -> Result<(), LoadError> {
        if self.text.len() % INSN_SIZE as usize != 0 {
            return Err(LoadError::Malformed("text size is not a multiple of 8".into()));
        }
        let slots = self.text.len() / 8;
        let mut instructions = Vec::with_capacity(slots);
        let mut slot_index = vec![None; slots];
        let mut i = 0;
        while i < slots {
            let slot: [u8; 8] = self.text[i * 8..i * 8 + 8].try_into().unwrap();
            let next = if slot[0] == LDDW && i + 1 < slots {
                Some(self.text[i * 8 + 8..i * 8 + 16].try_into().unwrap())
            } else {
                None
            };
            let insn = decode(slot, next, (i * 8) as u64, self.version)?;
            slot_index[i] = Some(instructions.len());
            i += (insn.size() / INSN_SIZE) as usize;
            instructions.push(insn);
        }
        self.instructions = instructions;
        self.slot_index = slot_index;
        Ok(())
    }

    pub fn instruction_at(&self, address: u64) -> Option<&Instruction> {
        if address % INSN_SIZE != 0 {
            return None;
        }
        let idx = self.slot_index.get((address / INSN_SIZE) as usize).copied().flatten()?;
        self.instructions.get(idx)
    }

    pub fn index_of(&self, address: u64) -> Option<usize> {
        if address % INSN_SIZE != 0 {
            return None;
        }
        self.slot_index.get((address / INSN_SIZE) as usize).copied().flatten()
    }

    pub fn text_len(&self) -> u64 {
        self.text.len() as u64
    }

    /// VM address of the first text byte.
    pub fn text_base(&self) -> u64 {
        MM_PROGRAM_START + self.text_vaddr
    }

    pub fn syscall_name(&self, imm: u32) -> Option<&str> {
        self.syscalls.get(&imm).map(String::as_str)
    }

    /// Resolves an internal call immediate to the callee address.
    pub fn call_target(&self, imm: u32) -> Option<u64> {
        self.functions.get(&imm).copied()
    }

    /// Addresses of syscall call sites whose name satisfies `pred`.
    pub fn syscall_sites(&self, pred: impl Fn(&str) -> bool) -> Vec<u64> {
        self.instructions
            .iter()
            .filter_map(|insn| match insn.op() {
                Op::Call { imm } => match self.syscall_name(imm) {
                    Some(name) if pred(name) => Some(insn.address),
                    _ => None,
                },
                _ => None,
            })
            .collect()
    }

    pub fn function_name(&self, address: u64) -> Option<&str> {
        self.symbols.get(&address).map(String::as_str)
    }

    pub fn register_function(&mut self, address: u64) -> u32 {
        let hash = pc_hash(address);
        self.functions.insert(hash, address);
        self.function_starts.insert(address);
        hash
    }

    /// One instruction per line, `address: mnemonic operands`, with call
    /// targets and syscalls resolved to names.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for insn in &self.instructions {
            if let Some(name) = self.function_name(insn.address) {
                out.push_str(&format!("{name}:\n"));
            } else if self.function_starts.contains(&insn.address) {
                out.push_str(&format!("function_{:x}:\n", insn.address));
            }
            out.push_str(&format!("{:#06x}: {}\n", insn.address, self.render(insn)));
        }
        out
    }

    pub fn render(&self, insn: &Instruction) -> String {
        match insn.op() {
            Op::Call { imm } => {
                if let Some(name) = self.syscall_name(imm) {
                    format!("call {name}")
                } else if let Some(target) = self.call_target(imm) {
                    match self.function_name(target) {
                        Some(name) => format!("call {name}"),
                        None => format!("call function_{target:x}"),
                    }
                } else {
                    insn.to_string()
                }
            }
            _ => insn.to_string(),
        }
    }
}

fn malformed(what: &str, err: impl std::fmt::Display) -> LoadError {
    LoadError::Malformed(format!("{what}: {err}"))
}

/// Parse, relocate and decode an sBPF ELF shared object.
pub fn load_program(elf_bytes: &[u8]) -> Result<ProgramImage, LoadError> {
    load_program_with(elf_bytes, SbpfVersion::V1)
}

pub fn load_program_with(elf_bytes: &[u8], version: SbpfVersion) -> Result<ProgramImage, LoadError> {
    let header = elf::FileHeader64::<Endianness>::parse(elf_bytes).map_err(|e| malformed("file header", e))?;
    let endian = header.endian().map_err(|e| malformed("file header", e))?;
    if endian != Endianness::Little {
        return Err(LoadError::Malformed("file header: big-endian object".into()));
    }
    let machine = header.e_machine(endian);
    if machine != EM_BPF && machine != EM_SBPF {
        return Err(LoadError::UnsupportedTarget { machine });
    }
    let file = ElfFile64::<Endianness>::parse(elf_bytes).map_err(|e| malformed("section table", e))?;

    let mut texts = file.sections().filter(|s| s.name() == Ok(".text"));
    let text_section = texts.next().ok_or_else(|| LoadError::Malformed("no .text section".into()))?;
    if texts.next().is_some() {
        return Err(LoadError::Malformed("multiple .text sections".into()));
    }
    let text_vaddr = text_section.address();
    let mut text = text_section.data().map_err(|e| malformed(".text contents", e))?.to_vec();
    let text_range = text_vaddr..text_vaddr + text.len() as u64;

    // Read-only data: every allocated, non-executable section with contents.
    let mut ro_sections = Vec::new();
    for section in file.sections() {
        let shdr = section.elf_section_header();
        let flags = shdr.sh_flags(endian);
        let kind = shdr.sh_type(endian);
        let is_alloc = flags & elf::SHF_ALLOC as u64 != 0;
        let is_exec = flags & elf::SHF_EXECINSTR as u64 != 0;
        if is_alloc && !is_exec && kind == elf::SHT_PROGBITS && section.size() > 0 {
            let data = section.data().map_err(|e| malformed("read-only section", e))?;
            ro_sections.push((section.address(), data.to_vec()));
        }
    }
    let rodata_vaddr = ro_sections.iter().map(|(a, _)| *a).min().unwrap_or(0);
    let rodata_end = ro_sections.iter().map(|(a, d)| a + d.len() as u64).max().unwrap_or(0);
    let mut rodata = vec![0u8; (rodata_end.saturating_sub(rodata_vaddr)) as usize];
    for (addr, data) in &ro_sections {
        let start = (addr - rodata_vaddr) as usize;
        rodata[start..start + data.len()].copy_from_slice(data);
    }
    let rodata_range = rodata_vaddr..rodata_end;
    if !rodata.is_empty() && (rodata_range.start < text_range.end && text_range.start < rodata_range.end) {
        return Err(LoadError::Malformed("read-only data overlaps .text".into()));
    }

    let mut syscalls = BTreeMap::new();
    let mut functions = BTreeMap::new();
    let mut function_starts = BTreeSet::new();
    let mut relocated_calls = BTreeSet::new();

    let dynsyms: Vec<_> = file.dynamic_symbols().collect();
    let find_dynsym = |idx: object::SymbolIndex| dynsyms.iter().find(|s| s.index() == idx);

    if let Some(relocs) = file.dynamic_relocations() {
        for (offset, reloc) in relocs {
            let r_type = match reloc.flags() {
                RelocationFlags::Elf { r_type } => r_type,
                _ => return Err(LoadError::Relocation { offset, reason: "non-ELF relocation".into() }),
            };
            let symbol = match reloc.target() {
                RelocationTarget::Symbol(idx) if idx.0 != 0 => Some(
                    find_dynsym(idx).ok_or_else(|| LoadError::Relocation {
                        offset,
                        reason: format!("unknown symbol index {}", idx.0),
                    })?,
                ),
                _ => None,
            };
            let in_text = text_range.contains(&offset);
            match r_type {
                R_BPF_NONE => {}
                R_BPF_64_64 | R_BPF_64_RELATIVE if in_text => {
                    let at = (offset - text_vaddr) as usize;
                    if at + 16 > text.len() || text[at] != LDDW {
                        return Err(LoadError::Relocation {
                            offset,
                            reason: "relocation does not target a lddw".into(),
                        });
                    }
                    let lo = u32::from_le_bytes(text[at + 4..at + 8].try_into().unwrap()) as u64;
                    let hi = u32::from_le_bytes(text[at + 12..at + 16].try_into().unwrap()) as u64;
                    let mut addr = if r_type == R_BPF_64_64 {
                        let sym = symbol.ok_or_else(|| LoadError::Relocation {
                            offset,
                            reason: "R_BPF_64_64 without symbol".into(),
                        })?;
                        if sym.is_undefined() {
                            return Err(LoadError::Relocation {
                                offset,
                                reason: format!("undefined data symbol {:?}", sym.name().unwrap_or("")),
                            });
                        }
                        sym.address().wrapping_add(lo)
                    } else {
                        hi << 32 | lo
                    };
                    if addr < MM_PROGRAM_START {
                        addr += MM_PROGRAM_START;
                    }
                    text[at + 4..at + 8].copy_from_slice(&(addr as u32).to_le_bytes());
                    text[at + 12..at + 16].copy_from_slice(&((addr >> 32) as u32).to_le_bytes());
                }
                R_BPF_64_RELATIVE | R_BPF_64_64 => {
                    if !rodata_range.contains(&offset) || offset + 8 > rodata_range.end {
                        return Err(LoadError::Relocation {
                            offset,
                            reason: "relocation outside loadable sections".into(),
                        });
                    }
                    let at = (offset - rodata_vaddr) as usize;
                    let mut addr = u64::from_le_bytes(rodata[at..at + 8].try_into().unwrap());
                    if r_type == R_BPF_64_64 {
                        if let Some(sym) = symbol {
                            addr = addr.wrapping_add(sym.address());
                        }
                    }
                    if addr < MM_PROGRAM_START {
                        addr += MM_PROGRAM_START;
                    }
                    rodata[at..at + 8].copy_from_slice(&addr.to_le_bytes());
                }
                R_BPF_64_32 if in_text => {
                    let at = (offset - text_vaddr) as usize;
                    if at + 8 > text.len() || text[at] != CALL_IMM {
                        return Err(LoadError::Relocation {
                            offset,
                            reason: "R_BPF_64_32 does not target a call".into(),
                        });
                    }
                    let sym = symbol.ok_or_else(|| LoadError::Relocation {
                        offset,
                        reason: "call relocation without symbol".into(),
                    })?;
                    let name = sym.name().map_err(|e| LoadError::Relocation {
                        offset,
                        reason: format!("bad symbol name: {e}"),
                    })?;
                    let hash = if sym.is_undefined() {
                        if name.is_empty() {
                            return Err(LoadError::Relocation {
                                offset,
                                reason: "call to anonymous undefined symbol".into(),
                            });
                        }
                        let hash = symbol_hash(name.as_bytes());
                        syscalls.insert(hash, name.to_string());
                        hash
                    } else {
                        let target = sym.address().wrapping_sub(text_vaddr);
                        if !text_range.contains(&sym.address()) || target % INSN_SIZE != 0 {
                            return Err(LoadError::Relocation {
                                offset,
                                reason: format!("call target {name} outside .text"),
                            });
                        }
                        let hash = pc_hash(target);
                        functions.insert(hash, target);
                        function_starts.insert(target);
                        hash
                    };
                    text[at + 4..at + 8].copy_from_slice(&hash.to_le_bytes());
                    relocated_calls.insert(at as u64);
                }
                other => {
                    return Err(LoadError::Relocation {
                        offset,
                        reason: format!("unsupported relocation type {other}"),
                    })
                }
            }
        }
    }

    let entry_vaddr = header.e_entry(endian);
    if !text_range.contains(&entry_vaddr) || (entry_vaddr - text_vaddr) % INSN_SIZE != 0 {
        return Err(LoadError::Malformed(format!("entry point {entry_vaddr:#x} outside .text")));
    }
    let entry = entry_vaddr - text_vaddr;

    let mut image = ProgramImage {
        instructions: Vec::new(),
        slot_index: Vec::new(),
        entry,
        syscalls,
        functions,
        function_starts,
        symbols: BTreeMap::new(),
        text_vaddr,
        text,
        rodata,
        rodata_base: MM_PROGRAM_START + rodata_vaddr,
        version,
    };
    image.decode_text()?;
    image.function_starts.insert(entry);

    // Function symbols from both symbol tables.
    for sym in file.symbols().chain(file.dynamic_symbols()) {
        if sym.kind() == object::SymbolKind::Text && !sym.is_undefined() && text_range.contains(&sym.address()) {
            let addr = sym.address() - text_vaddr;
            if addr % INSN_SIZE == 0 && image.index_of(addr).is_some() {
                image.function_starts.insert(addr);
                if let Ok(name) = sym.name() {
                    if !name.is_empty() {
                        image.symbols.entry(addr).or_insert_with(|| name.to_string());
                    }
                }
            }
        }
    }
    for &start in image.function_starts.clone().iter() {
        image.functions.insert(pc_hash(start), start);
    }

    // Calls without a relocation carry a slot-relative displacement.
    let mut fixups = Vec::new();
    for insn in &image.instructions {
        if let Op::Call { imm } = insn.op() {
            if relocated_calls.contains(&insn.address) || insn.src != 0 {
                continue;
            }
            if image.syscalls.contains_key(&imm) || image.functions.contains_key(&imm) {
                continue;
            }
            let target = insn.relative(imm as i32 as i64);
            if image.index_of(target).is_some() {
                fixups.push((insn.address, target));
            }
        }
    }
    for (site, target) in fixups {
        let hash = image.register_function(target);
        let at = site as usize;
        image.text[at + 4..at + 8].copy_from_slice(&hash.to_le_bytes());
        let idx = image.index_of(site).unwrap();
        image.instructions[idx].imm = hash as i32 as i64;
    }
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn murmur_matches_reference_vectors() {
        // Reference values of murmur3_x86_32 with seed 0.
        assert_eq!(symbol_hash(b""), 0);
        assert_eq!(symbol_hash(b"hello"), 0x248bfa47);
    }

    #[test]
    fn rejects_non_elf() {
        assert!(matches!(load_program(b"not an elf"), Err(LoadError::Malformed(_))));
    }

    #[test]
    fn from_text_single_exit() {
        let image = ProgramImage::from_text(vec![0x95, 0, 0, 0, 0, 0, 0, 0], 0, SbpfVersion::V1).unwrap();
        assert_eq!(image.instructions.len(), 1);
        assert!(image.instruction_at(0).is_some());
        assert!(image.instruction_at(4).is_none());
    }
}
