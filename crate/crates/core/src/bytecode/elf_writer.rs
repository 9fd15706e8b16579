//! Minimal writer for sBPF shared objects, used to build fixtures.
//!
//! Produces the subset of the container the loader consumes: `.text`,
//! optional `.rodata`, dynamic symbols and `.rel.dyn` for syscalls and data
//! references, plus a static symbol table naming functions.

use super::image::{EM_BPF, R_BPF_64_32, R_BPF_64_64};

const SHT_PROGBITS: u32 = 1;
const SHT_SYMTAB: u32 = 2;
const SHT_STRTAB: u32 = 3;
const SHT_REL: u32 = 9;
const SHT_DYNSYM: u32 = 11;
const SHF_ALLOC: u64 = 2;
const SHF_EXECINSTR: u64 = 4;

const STB_GLOBAL: u8 = 1;
const STT_NOTYPE: u8 = 0;
const STT_OBJECT: u8 = 1;
const STT_FUNC: u8 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RelocKind {
    /// `call` to an external symbol (syscall).
    Syscall(String),
    /// `lddw` of a read-only data symbol; the addend sits in the low immediate.
    DataRef(String),
}

#[derive(Clone, Debug)]
pub struct TextReloc {
    /// Byte offset inside `.text`.
    pub offset: u64,
    pub kind: RelocKind,
}

#[derive(Clone, Debug, Default)]
pub struct ElfSpec {
    pub text: Vec<u8>,
    pub rodata: Vec<u8>,
    pub entry: u64,
    pub relocs: Vec<TextReloc>,
    /// Function symbols as (name, text offset).
    pub functions: Vec<(String, u64)>,
    /// Data symbols as (name, rodata offset).
    pub data_symbols: Vec<(String, u64)>,
    pub machine: Option<u16>,
}

/// Virtual address (and file offset) of `.text` in emitted objects.
pub const TEXT_VADDR: u64 = 0x120;

#[derive(Default)]
struct StrTab(Vec<u8>);

impl StrTab {
    fn new() -> StrTab {
        StrTab(vec![0])
    }

    fn add(&mut self, s: &str) -> u32 {
        if s.is_empty() {
            return 0;
        }
        let at = self.0.len() as u32;
        self.0.extend_from_slice(s.as_bytes());
        self.0.push(0);
        at
    }
}

fn sym(out: &mut Vec<u8>, name: u32, info: u8, shndx: u16, value: u64, size: u64) {
    out.extend_from_slice(&name.to_le_bytes());
    out.push(info);
    out.push(0);
    out.extend_from_slice(&shndx.to_le_bytes());
    out.extend_from_slice(&value.to_le_bytes());
    out.extend_from_slice(&size.to_le_bytes());
}

fn align(buf: &mut Vec<u8>, to: usize) {
    while buf.len() % to != 0 {
        buf.push(0);
    }
}

struct Shdr {
    name: u32,
    kind: u32,
    flags: u64,
    addr: u64,
    offset: u64,
    size: u64,
    link: u32,
    info: u32,
    align: u64,
    entsize: u64,
}

pub fn write_elf(spec: &ElfSpec) -> Vec<u8> {
    let mut file = vec![0u8; TEXT_VADDR as usize];
    let mut shstr = StrTab::new();
    let mut shdrs = vec![Shdr {
        name: 0,
        kind: 0,
        flags: 0,
        addr: 0,
        offset: 0,
        size: 0,
        link: 0,
        info: 0,
        align: 0,
        entsize: 0,
    }];

    let text_off = file.len() as u64;
    file.extend_from_slice(&spec.text);
    let text_idx = shdrs.len() as u16;
    shdrs.push(Shdr {
        name: shstr.add(".text"),
        kind: SHT_PROGBITS,
        flags: SHF_ALLOC | SHF_EXECINSTR,
        addr: text_off,
        offset: text_off,
        size: spec.text.len() as u64,
        link: 0,
        info: 0,
        align: 8,
        entsize: 0,
    });

    let mut rodata_idx = 0u16;
    let mut rodata_off = 0u64;
    if !spec.rodata.is_empty() {
        align(&mut file, 8);
        rodata_off = file.len() as u64;
        file.extend_from_slice(&spec.rodata);
        rodata_idx = shdrs.len() as u16;
        shdrs.push(Shdr {
            name: shstr.add(".rodata"),
            kind: SHT_PROGBITS,
            flags: SHF_ALLOC,
            addr: rodata_off,
            offset: rodata_off,
            size: spec.rodata.len() as u64,
            link: 0,
            info: 0,
            align: 8,
            entsize: 0,
        });
    }

    // Dynamic symbols: syscalls (undefined) and referenced data symbols.
    let mut dynstr = StrTab::new();
    let mut dynsym = Vec::new();
    sym(&mut dynsym, 0, 0, 0, 0, 0);
    let mut dyn_names: Vec<String> = Vec::new();
    for reloc in &spec.relocs {
        let name = match &reloc.kind {
            RelocKind::Syscall(n) | RelocKind::DataRef(n) => n.clone(),
        };
        if !dyn_names.contains(&name) {
            let name_off = dynstr.add(&name);
            match &reloc.kind {
                RelocKind::Syscall(_) => {
                    sym(&mut dynsym, name_off, STB_GLOBAL << 4 | STT_NOTYPE, 0, 0, 0);
                }
                RelocKind::DataRef(_) => {
                    let at = spec
                        .data_symbols
                        .iter()
                        .find(|(n, _)| *n == name)
                        .map(|(_, o)| *o)
                        .unwrap_or(0);
                    sym(&mut dynsym, name_off, STB_GLOBAL << 4 | STT_OBJECT, rodata_idx, rodata_off + at, 0);
                }
            }
            dyn_names.push(name);
        }
    }
    let mut rel = Vec::new();
    for reloc in &spec.relocs {
        let (name, r_type) = match &reloc.kind {
            RelocKind::Syscall(n) => (n, R_BPF_64_32),
            RelocKind::DataRef(n) => (n, R_BPF_64_64),
        };
        let idx = dyn_names.iter().position(|n| n == name).unwrap() as u64 + 1;
        rel.extend_from_slice(&(text_off + reloc.offset).to_le_bytes());
        rel.extend_from_slice(&(idx << 32 | r_type as u64).to_le_bytes());
    }

    align(&mut file, 8);
    let dynsym_off = file.len() as u64;
    file.extend_from_slice(&dynsym);
    let dynsym_idx = shdrs.len() as u32;
    let dynstr_idx = dynsym_idx + 1;
    shdrs.push(Shdr {
        name: shstr.add(".dynsym"),
        kind: SHT_DYNSYM,
        flags: SHF_ALLOC,
        addr: dynsym_off,
        offset: dynsym_off,
        size: dynsym.len() as u64,
        link: dynstr_idx,
        info: 1,
        align: 8,
        entsize: 24,
    });
    let dynstr_off = file.len() as u64;
    file.extend_from_slice(&dynstr.0);
    shdrs.push(Shdr {
        name: shstr.add(".dynstr"),
        kind: SHT_STRTAB,
        flags: SHF_ALLOC,
        addr: dynstr_off,
        offset: dynstr_off,
        size: dynstr.0.len() as u64,
        link: 0,
        info: 0,
        align: 1,
        entsize: 0,
    });
    align(&mut file, 8);
    let rel_off = file.len() as u64;
    file.extend_from_slice(&rel);
    shdrs.push(Shdr {
        name: shstr.add(".rel.dyn"),
        kind: SHT_REL,
        flags: SHF_ALLOC,
        addr: rel_off,
        offset: rel_off,
        size: rel.len() as u64,
        link: dynsym_idx,
        info: 0,
        align: 8,
        entsize: 16,
    });

    // Static symbols naming functions and data.
    let mut strtab = StrTab::new();
    let mut symtab = Vec::new();
    sym(&mut symtab, 0, 0, 0, 0, 0);
    for (name, off) in &spec.functions {
        sym(&mut symtab, strtab.add(name), STB_GLOBAL << 4 | STT_FUNC, text_idx, text_off + off, 0);
    }
    for (name, off) in &spec.data_symbols {
        sym(&mut symtab, strtab.add(name), STB_GLOBAL << 4 | STT_OBJECT, rodata_idx, rodata_off + off, 0);
    }
    align(&mut file, 8);
    let symtab_off = file.len() as u64;
    file.extend_from_slice(&symtab);
    let symtab_idx = shdrs.len() as u32;
    shdrs.push(Shdr {
        name: shstr.add(".symtab"),
        kind: SHT_SYMTAB,
        flags: 0,
        addr: 0,
        offset: symtab_off,
        size: symtab.len() as u64,
        link: symtab_idx + 1,
        info: 1,
        align: 8,
        entsize: 24,
    });
    let strtab_off = file.len() as u64;
    file.extend_from_slice(&strtab.0);
    shdrs.push(Shdr {
        name: shstr.add(".strtab"),
        kind: SHT_STRTAB,
        flags: 0,
        addr: 0,
        offset: strtab_off,
        size: strtab.0.len() as u64,
        link: 0,
        info: 0,
        align: 1,
        entsize: 0,
    });
    let shstrtab_name = shstr.add(".shstrtab");
    let shstr_off = file.len() as u64;
    file.extend_from_slice(&shstr.0);
    let shstr_idx = shdrs.len() as u16;
    shdrs.push(Shdr {
        name: shstrtab_name,
        kind: SHT_STRTAB,
        flags: 0,
        addr: 0,
        offset: shstr_off,
        size: shstr.0.len() as u64,
        link: 0,
        info: 0,
        align: 1,
        entsize: 0,
    });

    align(&mut file, 8);
    let shoff = file.len() as u64;
    for s in &shdrs {
        file.extend_from_slice(&s.name.to_le_bytes());
        file.extend_from_slice(&s.kind.to_le_bytes());
        file.extend_from_slice(&s.flags.to_le_bytes());
        file.extend_from_slice(&s.addr.to_le_bytes());
        file.extend_from_slice(&s.offset.to_le_bytes());
        file.extend_from_slice(&s.size.to_le_bytes());
        file.extend_from_slice(&s.link.to_le_bytes());
        file.extend_from_slice(&s.info.to_le_bytes());
        file.extend_from_slice(&s.align.to_le_bytes());
        file.extend_from_slice(&s.entsize.to_le_bytes());
    }

    let mut hdr = Vec::with_capacity(64);
    hdr.extend_from_slice(&[0x7f, b'E', b'L', b'F', 2, 1, 1, 0]);
    hdr.extend_from_slice(&[0; 8]);
    hdr.extend_from_slice(&3u16.to_le_bytes()); // ET_DYN
    hdr.extend_from_slice(&spec.machine.unwrap_or(EM_BPF).to_le_bytes());
    hdr.extend_from_slice(&1u32.to_le_bytes());
    hdr.extend_from_slice(&(text_off + spec.entry).to_le_bytes());
    hdr.extend_from_slice(&0u64.to_le_bytes()); // no program headers
    hdr.extend_from_slice(&shoff.to_le_bytes());
    hdr.extend_from_slice(&0u32.to_le_bytes());
    hdr.extend_from_slice(&64u16.to_le_bytes());
    hdr.extend_from_slice(&56u16.to_le_bytes());
    hdr.extend_from_slice(&0u16.to_le_bytes());
    hdr.extend_from_slice(&64u16.to_le_bytes());
    hdr.extend_from_slice(&(shdrs.len() as u16).to_le_bytes());
    hdr.extend_from_slice(&shstr_idx.to_le_bytes());
    file[..64].copy_from_slice(&hdr);
    file
}
