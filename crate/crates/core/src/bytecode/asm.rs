//! Text assembler for sBPF, producing loadable ELF objects.
//!
//! Syntax is one instruction per line in the form printed by the dumper
//! (`mov64 r1, 0x2a`, `ldxdw r2, [r1+0x8]`, `jeq r3, 0xff, +4`). Labels end in
//! `:`, jump and call operands may name labels, and an optional
//! `0x...:` address prefix (as in dump output) is ignored. Directives:
//! `.text`, `.rodata`, `.globl name`, `.equ NAME, expr`, `.include "file"`,
//! and in `.rodata`: `.byte`, `.half`, `.word`, `.quad`, `.ascii`, `.asciz`,
//! `.zero`, `.align`. Calls to names that are not labels become syscalls.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use thiserror::Error;

use super::elf_writer::{write_elf, ElfSpec, RelocKind, TextReloc};
use super::isa::Instruction;

#[derive(Debug, Error)]
pub enum AsmError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, AsmError> {
    Err(AsmError::Syntax { line, message: message.into() })
}

/// Result of assembling a source file.
#[derive(Clone, Debug)]
pub struct Assembly {
    pub spec: ElfSpec,
    /// Text labels and their byte offsets.
    pub labels: BTreeMap<String, u64>,
}

impl Assembly {
    pub fn to_elf(&self) -> Vec<u8> {
        write_elf(&self.spec)
    }

    pub fn label(&self, name: &str) -> Option<u64> {
        self.labels.get(name).copied()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Section {
    Text,
    Rodata,
}

struct Line {
    no: usize,
    mnemonic: String,
    operands: Vec<String>,
    address: u64,
}

/// Assemble source with `.include` resolved relative to `base`.
pub fn assemble_with_base(src: &str, base: Option<&Path>) -> Result<Assembly, AsmError> {
    let expanded = expand_includes(src, base, 0)?;
    Assembler::default().run(&expanded)
}

pub fn assemble(src: &str) -> Result<Assembly, AsmError> {
    assemble_with_base(src, None)
}

pub fn assemble_file(path: &Path) -> Result<Assembly, AsmError> {
    let src = std::fs::read_to_string(path).map_err(|source| AsmError::Io {
        path: path.display().to_string(),
        source,
    })?;
    assemble_with_base(&src, path.parent())
}

fn expand_includes(src: &str, base: Option<&Path>, depth: usize) -> Result<Vec<(usize, String)>, AsmError> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let line = strip_comment(raw);
        let trimmed = line.trim();
        if let Some(rest) = trimmed.strip_prefix(".include") {
            if depth > 8 {
                return err(i + 1, "includes nested too deeply");
            }
            let name = rest.trim().trim_matches('"');
            let path = match base {
                Some(b) => b.join(name),
                None => Path::new(name).to_path_buf(),
            };
            let text = std::fs::read_to_string(&path).map_err(|source| AsmError::Io {
                path: path.display().to_string(),
                source,
            })?;
            out.extend(expand_includes(&text, path.parent(), depth + 1)?);
        } else {
            out.push((i + 1, line.to_string()));
        }
    }
    Ok(out)
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    let bytes = line.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        match b {
            b'"' => in_str = !in_str,
            b';' | b'#' if !in_str => return &line[..i],
            b'/' if !in_str && bytes.get(i + 1) == Some(&b'/') => return &line[..i],
            _ => {}
        }
    }
    line
}

fn split_operands(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let (mut depth, mut in_str) = (0, false);
    for c in s.chars() {
        match c {
            '"' => in_str = !in_str,
            '[' if !in_str => depth += 1,
            ']' if !in_str => depth -= 1,
            ',' if !in_str && depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
                continue;
            }
            _ => {}
        }
        cur.push(c);
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

fn parse_number(s: &str) -> Option<i128> {
    let (neg, body) = match s.strip_prefix('-') {
        Some(b) => (true, b),
        None => (false, s),
    };
    let v = if let Some(hex) = body.strip_prefix("0x").or_else(|| body.strip_prefix("0X")) {
        i128::from_str_radix(&hex.replace('_', ""), 16).ok()?
    } else if body.starts_with(|c: char| c.is_ascii_digit()) {
        body.replace('_', "").parse::<i128>().ok()?
    } else {
        return None;
    };
    Some(if neg { -v } else { v })
}

fn parse_reg(s: &str) -> Option<u8> {
    let n: u8 = s.strip_prefix('r')?.parse().ok()?;
    (n <= 10).then_some(n)
}

fn is_ident(s: &str) -> bool {
    !s.is_empty()
        && !s.starts_with(|c: char| c.is_ascii_digit())
        && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.' || c == '$')
}

fn unescape(line: usize, s: &str) -> Result<Vec<u8>, AsmError> {
    let inner = s
        .trim()
        .strip_prefix('"')
        .and_then(|r| r.strip_suffix('"'))
        .ok_or_else(|| AsmError::Syntax { line, message: format!("expected string, got {s}") })?;
    let mut out = Vec::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            let mut buf = [0; 4];
            out.extend_from_slice(c.encode_utf8(&mut buf).as_bytes());
            continue;
        }
        match chars.next() {
            Some('n') => out.push(b'\n'),
            Some('t') => out.push(b'\t'),
            Some('0') => out.push(0),
            Some('\\') => out.push(b'\\'),
            Some('"') => out.push(b'"'),
            Some('x') => {
                let h: String = chars.by_ref().take(2).collect();
                out.push(u8::from_str_radix(&h, 16).map_err(|_| AsmError::Syntax {
                    line,
                    message: format!("bad escape \\x{h}"),
                })?);
            }
            other => return err(line, format!("bad escape {other:?}")),
        }
    }
    Ok(out)
}

#[derive(Default)]
struct Assembler {
    equs: BTreeMap<String, i128>,
    labels: BTreeMap<String, u64>,
    data_labels: BTreeMap<String, u64>,
    globals: BTreeSet<String>,
    lines: Vec<Line>,
    rodata: Vec<u8>,
}

impl Assembler {
    /// Evaluate `term (+|-) term ...` where terms are numbers, `.equ`
    /// constants or, when `labels` is set, text labels.
    fn eval(&self, line: usize, expr: &str, labels: bool) -> Result<i128, AsmError> {
        let expr = expr.trim();
        let mut total = 0i128;
        let mut sign = 1i128;
        let mut term = String::new();
        let flush = |term: &mut String, sign: i128, total: &mut i128| -> Result<(), AsmError> {
            let t = term.trim();
            if t.is_empty() {
                return Ok(());
            }
            let v = if let Some(n) = parse_number(t) {
                n
            } else if let Some(v) = self.equs.get(t) {
                *v
            } else if let (true, Some(v)) = (labels, self.labels.get(t)) {
                *v as i128
            } else {
                return err(line, format!("unknown value `{t}`"));
            };
            *total += sign * v;
            term.clear();
            Ok(())
        };
        for (i, c) in expr.char_indices() {
            if (c == '+' || c == '-') && i > 0 && !term.trim().is_empty() {
                flush(&mut term, sign, &mut total)?;
                sign = if c == '+' { 1 } else { -1 };
            } else if (c == '+' || c == '-') && term.trim().is_empty() {
                if c == '-' {
                    sign = -sign;
                }
            } else {
                term.push(c);
            }
        }
        flush(&mut term, sign, &mut total)?;
        Ok(total)
    }

    fn run(mut self, lines: &[(usize, String)]) -> Result<Assembly, AsmError> {
        let mut section = Section::Text;
        let mut pc = 0u64;
        for (no, raw) in lines {
            let no = *no;
            let mut text = raw.trim();
            // Optional `0x...:` address prefix from dump output.
            if let Some((head, rest)) = text.split_once(':') {
                if head.starts_with("0x") && parse_number(head).is_some() {
                    text = rest.trim();
                }
            }
            // Labels.
            while let Some((head, rest)) = text.split_once(':') {
                let head = head.trim();
                if !is_ident(head) {
                    break;
                }
                let map = match section {
                    Section::Text => &mut self.labels,
                    Section::Rodata => &mut self.data_labels,
                };
                let at = if section == Section::Text { pc } else { self.rodata.len() as u64 };
                if map.insert(head.to_string(), at).is_some() {
                    return err(no, format!("duplicate label {head}"));
                }
                text = rest.trim();
            }
            if text.is_empty() {
                continue;
            }
            let (mnemonic, rest) = match text.split_once(char::is_whitespace) {
                Some((m, r)) => (m.to_ascii_lowercase(), r.trim()),
                None => (text.to_ascii_lowercase(), ""),
            };
            match mnemonic.as_str() {
                ".text" => section = Section::Text,
                ".rodata" => section = Section::Rodata,
                ".section" => {
                    section = if rest.starts_with(".rodata") { Section::Rodata } else { Section::Text };
                }
                ".globl" | ".global" => {
                    self.globals.insert(rest.to_string());
                }
                ".equ" | ".set" => {
                    let ops = split_operands(rest);
                    if ops.len() != 2 || !is_ident(&ops[0]) {
                        return err(no, ".equ expects NAME, value");
                    }
                    let v = self.eval(no, &ops[1], false)?;
                    self.equs.insert(ops[0].clone(), v);
                }
                d if d.starts_with('.') => {
                    if section != Section::Rodata {
                        return err(no, format!("data directive {d} outside .rodata"));
                    }
                    self.data(no, d, rest)?;
                }
                _ => {
                    if section != Section::Text {
                        return err(no, "instruction outside .text");
                    }
                    let size = if mnemonic == "lddw" { 16 } else { 8 };
                    self.lines.push(Line {
                        no,
                        mnemonic,
                        operands: split_operands(rest),
                        address: pc,
                    });
                    pc += size;
                }
            }
        }
        self.finish()
    }

    fn data(&mut self, no: usize, directive: &str, rest: &str) -> Result<(), AsmError> {
        let ints = |me: &Self, size: usize| -> Result<Vec<u8>, AsmError> {
            let mut out = Vec::new();
            for op in split_operands(rest) {
                let v = me.eval(no, &op, false)?;
                out.extend_from_slice(&(v as u128).to_le_bytes()[..size]);
            }
            Ok(out)
        };
        let bytes = match directive {
            ".byte" => ints(self, 1)?,
            ".half" | ".short" => ints(self, 2)?,
            ".word" | ".long" => ints(self, 4)?,
            ".quad" => ints(self, 8)?,
            ".ascii" => unescape(no, rest)?,
            ".asciz" | ".string" => {
                let mut b = unescape(no, rest)?;
                b.push(0);
                b
            }
            ".zero" | ".space" => vec![0; self.eval(no, rest, false)? as usize],
            ".align" => {
                let to = self.eval(no, rest, false)? as usize;
                let pad = (to - self.rodata.len() % to) % to;
                vec![0; pad]
            }
            other => return err(no, format!("unknown directive {other}")),
        };
        self.rodata.extend_from_slice(&bytes);
        Ok(())
    }

    fn finish(self) -> Result<Assembly, AsmError> {
        let mut text = Vec::new();
        let mut relocs = Vec::new();
        let mut called = BTreeSet::new();
        for line in &self.lines {
            let insn = self.encode(line, &mut relocs, &mut called)?;
            text.extend_from_slice(&insn.encode());
        }
        let entry = self.labels.get("entrypoint").copied().unwrap_or(0);
        let mut functions: Vec<(String, u64)> = Vec::new();
        for (name, &addr) in &self.labels {
            if name == "entrypoint" || called.contains(name) || self.globals.contains(name) {
                functions.push((name.clone(), addr));
            }
        }
        let data_symbols = self.data_labels.iter().map(|(n, &o)| (n.clone(), o)).collect();
        Ok(Assembly {
            spec: ElfSpec {
                text,
                rodata: self.rodata,
                entry,
                relocs,
                functions,
                data_symbols,
                machine: None,
            },
            labels: self.labels,
        })
    }

    fn reg(&self, line: &Line, i: usize) -> Result<u8, AsmError> {
        let op = line.operands.get(i).map(String::as_str).unwrap_or("");
        parse_reg(op).map_or_else(|| err(line.no, format!("expected register, got `{op}`")), Ok)
    }

    fn imm(&self, line: &Line, i: usize) -> Result<i64, AsmError> {
        let op = line.operands.get(i).map(String::as_str).unwrap_or("");
        let v = self.eval(line.no, op, false)?;
        if v < i32::MIN as i128 || v > u32::MAX as i128 {
            return err(line.no, format!("immediate {op} does not fit 32 bits"));
        }
        Ok(v as i32 as i64)
    }

    /// `[rN+off]` or `[rN-off]` or `[rN]`.
    fn mem(&self, line: &Line, i: usize) -> Result<(u8, i16), AsmError> {
        let op = line.operands.get(i).map(String::as_str).unwrap_or("");
        let inner = op
            .strip_prefix('[')
            .and_then(|r| r.strip_suffix(']'))
            .ok_or_else(|| AsmError::Syntax { line: line.no, message: format!("expected memory operand, got `{op}`") })?
            .trim();
        let split = inner.find(['+', '-']);
        let (reg, off) = match split {
            Some(at) => (&inner[..at], self.eval(line.no, &inner[at..], false)?),
            None => (inner, 0),
        };
        let reg = parse_reg(reg.trim())
            .ok_or_else(|| AsmError::Syntax { line: line.no, message: format!("bad base register in `{op}`") })?;
        if off < i16::MIN as i128 || off > i16::MAX as i128 {
            return err(line.no, format!("offset in `{op}` out of range"));
        }
        Ok((reg, off as i16))
    }

    fn branch_offset(&self, line: &Line, i: usize) -> Result<i16, AsmError> {
        let op = line.operands.get(i).map(String::as_str).unwrap_or("");
        let slots = if op.starts_with(['+', '-']) {
            self.eval(line.no, op, false)?
        } else if let Some(&target) = self.labels.get(op) {
            (target as i128 - line.address as i128 - 8) / 8
        } else {
            return err(line.no, format!("unknown jump target `{op}`"));
        };
        if slots < i16::MIN as i128 || slots > i16::MAX as i128 {
            return err(line.no, "jump out of range");
        }
        Ok(slots as i16)
    }

    fn encode(
        &self,
        line: &Line,
        relocs: &mut Vec<TextReloc>,
        called: &mut BTreeSet<String>,
    ) -> Result<Instruction, AsmError> {
        let m = line.mnemonic.as_str();
        let n = line.operands.len();
        let want = |k: usize| -> Result<(), AsmError> {
            if n != k {
                return err(line.no, format!("{m} expects {k} operands, got {n}"));
            }
            Ok(())
        };
        let mut insn = match m {
            "exit" => {
                want(0)?;
                Instruction::new(0x95, 0, 0, 0, 0)
            }
            "lddw" => {
                want(2)?;
                let dst = self.reg(line, 0)?;
                let op = &line.operands[1];
                let (name, addend) = match op.split_once(['+']) {
                    Some((a, b)) => (a.trim(), self.eval(line.no, b, false)?),
                    None => (op.trim(), 0),
                };
                if self.data_labels.contains_key(name) {
                    relocs.push(TextReloc { offset: line.address, kind: RelocKind::DataRef(name.to_string()) });
                    Instruction::new(0x18, dst, 0, 0, addend as u32 as i64)
                } else {
                    let v = self.eval(line.no, op, false)?;
                    Instruction::new(0x18, dst, 0, 0, v as u64 as i64)
                }
            }
            "call" => {
                want(1)?;
                let target = line.operands[0].as_str();
                if let Some(&addr) = self.labels.get(target) {
                    called.insert(target.to_string());
                    let rel = (addr as i64 - line.address as i64 - 8) / 8;
                    Instruction::new(0x85, 0, 0, 0, rel)
                } else if let Some(v) = parse_number(target) {
                    Instruction::new(0x85, 0, 0, 0, v as u32 as i32 as i64)
                } else if is_ident(target) {
                    relocs.push(TextReloc { offset: line.address, kind: RelocKind::Syscall(target.to_string()) });
                    Instruction::new(0x85, 0, 0, 0, -1)
                } else {
                    return err(line.no, format!("bad call target `{target}`"));
                }
            }
            "callx" => {
                want(1)?;
                let r = self.reg(line, 0)?;
                Instruction::new(0x8d, 0, 0, 0, r as i64)
            }
            "ja" => {
                want(1)?;
                Instruction::new(0x05, 0, 0, self.branch_offset(line, 0)?, 0)
            }
            _ => {
                if let Some(code) = jump_code(m) {
                    want(3)?;
                    let dst = self.reg(line, 0)?;
                    let off = self.branch_offset(line, 2)?;
                    match parse_reg(&line.operands[1]) {
                        Some(src) => Instruction::new(0x05 | code | 0x08, dst, src, off, 0),
                        None => Instruction::new(0x05 | code, dst, 0, off, self.imm(line, 1)?),
                    }
                } else if let Some(width) = mem_width(m, "ldx") {
                    want(2)?;
                    let dst = self.reg(line, 0)?;
                    let (base, off) = self.mem(line, 1)?;
                    Instruction::new(0x61 | width, dst, base, off, 0)
                } else if let Some(width) = mem_width(m, "stx") {
                    want(2)?;
                    let (base, off) = self.mem(line, 0)?;
                    let src = self.reg(line, 1)?;
                    Instruction::new(0x63 | width, base, src, off, 0)
                } else if let Some(width) = mem_width(m, "st") {
                    want(2)?;
                    let (base, off) = self.mem(line, 0)?;
                    Instruction::new(0x62 | width, base, 0, off, self.imm(line, 1)?)
                } else if let Some((order, bits)) = endian_op(m) {
                    want(1)?;
                    let dst = self.reg(line, 0)?;
                    Instruction::new(order, dst, 0, 0, bits)
                } else if let Some((opcode, is_neg)) = alu_code(m) {
                    if is_neg {
                        want(1)?;
                        Instruction::new(opcode, self.reg(line, 0)?, 0, 0, 0)
                    } else {
                        want(2)?;
                        let dst = self.reg(line, 0)?;
                        match parse_reg(&line.operands[1]) {
                            Some(src) => Instruction::new(opcode | 0x08, dst, src, 0, 0),
                            None => Instruction::new(opcode, dst, 0, 0, self.imm(line, 1)?),
                        }
                    }
                } else {
                    return err(line.no, format!("unknown mnemonic `{m}`"));
                }
            }
        };
        insn.address = line.address;
        Ok(insn)
    }
}

fn jump_code(m: &str) -> Option<u8> {
    Some(match m {
        "jeq" => 0x10,
        "jgt" => 0x20,
        "jge" => 0x30,
        "jset" => 0x40,
        "jne" => 0x50,
        "jsgt" => 0x60,
        "jsge" => 0x70,
        "jlt" => 0xa0,
        "jle" => 0xb0,
        "jslt" => 0xc0,
        "jsle" => 0xd0,
        _ => return None,
    })
}

fn mem_width(m: &str, prefix: &str) -> Option<u8> {
    Some(match m.strip_prefix(prefix)? {
        "w" => 0x00,
        "h" => 0x08,
        "b" => 0x10,
        "dw" => 0x18,
        _ => return None,
    })
}

fn endian_op(m: &str) -> Option<(u8, i64)> {
    let (opcode, bits) = if let Some(b) = m.strip_prefix("le") {
        (0xd4, b)
    } else {
        (0xdc, m.strip_prefix("be")?)
    };
    let bits: i64 = bits.parse().ok()?;
    matches!(bits, 16 | 32 | 64).then_some((opcode, bits))
}

/// Opcode (with the immediate source bit clear) and whether it is unary.
fn alu_code(m: &str) -> Option<(u8, bool)> {
    let (base, class) = if let Some(b) = m.strip_suffix("64") {
        (b, 0x07)
    } else {
        (m.strip_suffix("32")?, 0x04)
    };
    let code = match base {
        "add" => 0x00,
        "sub" => 0x10,
        "mul" => 0x20,
        "div" => 0x30,
        "or" => 0x40,
        "and" => 0x50,
        "lsh" => 0x60,
        "rsh" => 0x70,
        "neg" => return Some((0x80 | class, true)),
        "mod" => 0x90,
        "xor" => 0xa0,
        "mov" => 0xb0,
        "arsh" => 0xc0,
        _ => return pqr_code(base, class == 0x07).map(|c| (0x06 | c, false)),
    };
    Some((class | code, false))
}

fn pqr_code(base: &str, is64: bool) -> Option<u8> {
    Some(match (base, is64) {
        ("uhmul", true) => 0x30,
        ("udiv", false) => 0x40,
        ("udiv", true) => 0x50,
        ("urem", false) => 0x60,
        ("urem", true) => 0x70,
        ("lmul", false) => 0x80,
        ("lmul", true) => 0x90,
        ("shmul", true) => 0xb0,
        ("sdiv", false) => 0xc0,
        ("sdiv", true) => 0xd0,
        ("srem", false) => 0xe0,
        ("srem", true) => 0xf0,
        _ => return None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::image::{load_program, MM_PROGRAM_START};
    use crate::bytecode::isa::Op;

    const SAMPLE: &str = r#"
        .equ OFF, 8
    entrypoint:
        ldxdw r2, [r1+OFF]
        jeq r2, 0xff, done
        call helper
        lddw r1, msg
        mov64 r2, 5
        call sol_log_
    done:
        mov64 r0, 0
        exit
    helper:
        mov64 r0, -1
        exit
        .rodata
    msg:
        .ascii "hello"
    "#;

    #[test]
    fn assembles_and_loads() {
        let asm = assemble(SAMPLE).unwrap();
        let image = load_program(&asm.to_elf()).unwrap();
        assert_eq!(image.entry, 0);
        let jeq = image.instruction_at(8).unwrap();
        assert_eq!(jeq.jump_target(), Some(asm.label("done").unwrap()));
        // Local call resolved to the helper through its hash.
        let call = image.instruction_at(16).unwrap();
        let Op::Call { imm } = call.op() else { panic!() };
        assert_eq!(image.call_target(imm), asm.label("helper"));
        // Data reference relocated into the program region.
        let Op::Lddw { imm, .. } = image.instruction_at(24).unwrap().op() else { panic!() };
        assert!(imm >= MM_PROGRAM_START);
        let at = (imm - image.rodata_base) as usize;
        assert_eq!(&image.rodata[at..at + 5], b"hello");
        assert_eq!(image.render(image.instruction_at(48).unwrap()), "call sol_log_");
    }

    #[test]
    fn dump_reassembles() {
        let image = load_program(&assemble(SAMPLE).unwrap().to_elf()).unwrap();
        let again = load_program(&assemble(&image.dump()).unwrap().to_elf()).unwrap();
        assert_eq!(image.dump(), again.dump());
    }

    #[test]
    fn reports_errors_with_line() {
        let e = assemble("mov64 r1\n").unwrap_err().to_string();
        assert!(e.contains("line 1"), "{e}");
        assert!(assemble("frob r1, r2").is_err());
        assert!(assemble("ja nowhere").is_err());
    }
}
