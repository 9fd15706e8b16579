//! sBPF instruction encoding.
//!
//! Every instruction occupies one 8-byte slot, except `lddw` which spans two.
//! Slot layout (little endian): `opcode:u8 | src:4 dst:4 | offset:i16 | imm:i32`.

use std::fmt;

use thiserror::Error;

pub const INSN_SIZE: u64 = 8;
pub const MAX_REGISTER: u8 = 10;
pub const FRAME_POINTER: u8 = 10;

pub const CLS_LD: u8 = 0x00;
pub const CLS_LDX: u8 = 0x01;
pub const CLS_ST: u8 = 0x02;
pub const CLS_STX: u8 = 0x03;
pub const CLS_ALU32: u8 = 0x04;
pub const CLS_JMP: u8 = 0x05;
pub const CLS_PQR: u8 = 0x06;
pub const CLS_ALU64: u8 = 0x07;

pub const LDDW: u8 = 0x18;
pub const CALL_IMM: u8 = 0x85;
pub const CALL_REG: u8 = 0x8d;
pub const EXIT: u8 = 0x95;
pub const JA: u8 = 0x05;

/// Instruction set revision. `V1` is the dialect of programs deployed before
/// the product/quotient/remainder class was introduced; `V2` adds that class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SbpfVersion {
    #[default]
    V1,
    V2,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("illegal opcode {opcode:#04x} at {address:#x}")]
    IllegalOpcode { address: u64, opcode: u8 },
    #[error("register out of range in instruction {opcode:#04x} at {address:#x}")]
    BadRegister { address: u64, opcode: u8 },
    #[error("lddw at {address:#x} is missing its second slot")]
    TruncatedWide { address: u64 },
    #[error("malformed second slot of lddw at {address:#x}")]
    BadWideSlot { address: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Width {
    B,
    H,
    W,
    DW,
}

impl Width {
    pub fn bytes(self) -> u32 {
        match self {
            Width::B => 1,
            Width::H => 2,
            Width::W => 4,
            Width::DW => 8,
        }
    }

    fn from_mode(bits: u8) -> Width {
        match bits & 0x18 {
            0x10 => Width::B,
            0x08 => Width::H,
            0x00 => Width::W,
            _ => Width::DW,
        }
    }

    fn suffix(self) -> &'static str {
        match self {
            Width::B => "b",
            Width::H => "h",
            Width::W => "w",
            Width::DW => "dw",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AluOp {
    Add,
    Sub,
    Mul,
    Div,
    Or,
    And,
    Lsh,
    Rsh,
    Neg,
    Mod,
    Xor,
    Mov,
    Arsh,
    /// Byte-order conversion to little endian (a truncation on this target).
    Le,
    /// Byte-order conversion to big endian.
    Be,
}

impl AluOp {
    fn from_code(code: u8) -> Option<AluOp> {
        Some(match code {
            0x00 => AluOp::Add,
            0x10 => AluOp::Sub,
            0x20 => AluOp::Mul,
            0x30 => AluOp::Div,
            0x40 => AluOp::Or,
            0x50 => AluOp::And,
            0x60 => AluOp::Lsh,
            0x70 => AluOp::Rsh,
            0x80 => AluOp::Neg,
            0x90 => AluOp::Mod,
            0xa0 => AluOp::Xor,
            0xb0 => AluOp::Mov,
            0xc0 => AluOp::Arsh,
            0xd0 => AluOp::Le,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            AluOp::Add => "add",
            AluOp::Sub => "sub",
            AluOp::Mul => "mul",
            AluOp::Div => "div",
            AluOp::Or => "or",
            AluOp::And => "and",
            AluOp::Lsh => "lsh",
            AluOp::Rsh => "rsh",
            AluOp::Neg => "neg",
            AluOp::Mod => "mod",
            AluOp::Xor => "xor",
            AluOp::Mov => "mov",
            AluOp::Arsh => "arsh",
            AluOp::Le => "le",
            AluOp::Be => "be",
        }
    }
}

/// Operations of the product/quotient/remainder class (V2 only).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PqrOp {
    Uhmul,
    Udiv,
    Urem,
    Lmul,
    Shmul,
    Sdiv,
    Srem,
}

impl PqrOp {
    fn from_code(code: u8) -> Option<PqrOp> {
        Some(match code {
            0x30 => PqrOp::Uhmul,
            0x40 => PqrOp::Udiv,
            0x50 => PqrOp::Udiv,
            0x60 => PqrOp::Urem,
            0x70 => PqrOp::Urem,
            0x80 => PqrOp::Lmul,
            0x90 => PqrOp::Lmul,
            0xb0 => PqrOp::Shmul,
            0xc0 => PqrOp::Sdiv,
            0xd0 => PqrOp::Sdiv,
            0xe0 => PqrOp::Srem,
            0xf0 => PqrOp::Srem,
            _ => return None,
        })
    }

    /// Whether the class code selects the 64-bit flavour.
    fn is64(code: u8) -> bool {
        matches!(code, 0x30 | 0x50 | 0x70 | 0x90 | 0xb0 | 0xd0 | 0xf0)
    }

    fn name(self) -> &'static str {
        match self {
            PqrOp::Uhmul => "uhmul",
            PqrOp::Udiv => "udiv",
            PqrOp::Urem => "urem",
            PqrOp::Lmul => "lmul",
            PqrOp::Shmul => "shmul",
            PqrOp::Sdiv => "sdiv",
            PqrOp::Srem => "srem",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JmpCond {
    Eq,
    Gt,
    Ge,
    Set,
    Ne,
    Sgt,
    Sge,
    Lt,
    Le,
    Slt,
    Sle,
}

impl JmpCond {
    fn from_code(code: u8) -> Option<JmpCond> {
        Some(match code {
            0x10 => JmpCond::Eq,
            0x20 => JmpCond::Gt,
            0x30 => JmpCond::Ge,
            0x40 => JmpCond::Set,
            0x50 => JmpCond::Ne,
            0x60 => JmpCond::Sgt,
            0x70 => JmpCond::Sge,
            0xa0 => JmpCond::Lt,
            0xb0 => JmpCond::Le,
            0xc0 => JmpCond::Slt,
            0xd0 => JmpCond::Sle,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            JmpCond::Eq => "jeq",
            JmpCond::Gt => "jgt",
            JmpCond::Ge => "jge",
            JmpCond::Set => "jset",
            JmpCond::Ne => "jne",
            JmpCond::Sgt => "jsgt",
            JmpCond::Sge => "jsge",
            JmpCond::Lt => "jlt",
            JmpCond::Le => "jle",
            JmpCond::Slt => "jslt",
            JmpCond::Sle => "jsle",
        }
    }

    pub fn is_equality(self) -> bool {
        matches!(self, JmpCond::Eq | JmpCond::Ne)
    }

    /// Concrete evaluation on 64-bit operands.
    pub fn eval(self, a: u64, b: u64) -> bool {
        match self {
            JmpCond::Eq => a == b,
            JmpCond::Gt => a > b,
            JmpCond::Ge => a >= b,
            JmpCond::Set => a & b != 0,
            JmpCond::Ne => a != b,
            JmpCond::Sgt => (a as i64) > (b as i64),
            JmpCond::Sge => (a as i64) >= (b as i64),
            JmpCond::Lt => a < b,
            JmpCond::Le => a <= b,
            JmpCond::Slt => (a as i64) < (b as i64),
            JmpCond::Sle => (a as i64) <= (b as i64),
        }
    }
}

/// Second operand of ALU and jump instructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Operand {
    Imm(i64),
    Reg(u8),
}

/// Semantic view of an [`Instruction`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    Lddw { dst: u8, imm: u64 },
    Ldx { width: Width, dst: u8, base: u8, off: i16 },
    St { width: Width, base: u8, off: i16, imm: i64 },
    Stx { width: Width, base: u8, off: i16, src: u8 },
    Alu { op: AluOp, is64: bool, dst: u8, operand: Operand },
    Pqr { op: PqrOp, is64: bool, dst: u8, operand: Operand },
    Ja { off: i16 },
    Jcond { cond: JmpCond, dst: u8, operand: Operand, off: i16 },
    Call { imm: u32 },
    Callx { reg: u8 },
    Exit,
}

/// A decoded instruction. Fields are kept raw so that [`Instruction::encode`]
/// reproduces the source bytes exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Instruction {
    pub address: u64,
    pub opcode: u8,
    pub dst: u8,
    pub src: u8,
    pub offset: i16,
    /// Sign-extended 32-bit immediate, or the full 64-bit value for `lddw`.
    pub imm: i64,
}

fn is_legal(opcode: u8, version: SbpfVersion) -> bool {
    let class = opcode & 0x07;
    match class {
        CLS_LD => opcode == LDDW,
        CLS_LDX => matches!(opcode, 0x61 | 0x69 | 0x71 | 0x79),
        CLS_ST => matches!(opcode, 0x62 | 0x6a | 0x72 | 0x7a),
        CLS_STX => matches!(opcode, 0x63 | 0x6b | 0x73 | 0x7b),
        CLS_ALU32 | CLS_ALU64 => {
            let code = opcode & 0xf0;
            let from_reg = opcode & 0x08 != 0;
            match code {
                0x80 => !from_reg,
                // le/be only exist in the 32-bit class
                0xd0 => class == CLS_ALU32,
                c => AluOp::from_code(c).is_some(),
            }
        }
        CLS_JMP => {
            let code = opcode & 0xf0;
            let from_reg = opcode & 0x08 != 0;
            match code {
                0x00 => !from_reg,
                0x80 => true,
                0x90 => !from_reg,
                c => JmpCond::from_code(c).is_some(),
            }
        }
        CLS_PQR => {
            version == SbpfVersion::V2 && {
                let code = opcode & 0xf0;
                // uhmul/shmul have no 32-bit variant
                PqrOp::from_code(code).is_some() && !(code == 0x20 || code == 0xa0)
            }
        }
        _ => false,
    }
}

/// Decode one instruction. `next8` must hold the following slot when the
/// opcode is the wide load-immediate; it is ignored otherwise.
pub fn decode(
    slot8: [u8; 8],
    next8: Option<[u8; 8]>,
    address: u64,
    version: SbpfVersion,
) -> Result<Instruction, DecodeError> {
    let opcode = slot8[0];
    if !is_legal(opcode, version) {
        return Err(DecodeError::IllegalOpcode { address, opcode });
    }
    let dst = slot8[1] & 0x0f;
    let src = slot8[1] >> 4;
    if dst > MAX_REGISTER || src > MAX_REGISTER {
        return Err(DecodeError::BadRegister { address, opcode });
    }
    let offset = i16::from_le_bytes([slot8[2], slot8[3]]);
    let imm32 = i32::from_le_bytes([slot8[4], slot8[5], slot8[6], slot8[7]]);
    let mut imm = imm32 as i64;
    if opcode == LDDW {
        let next = next8.ok_or(DecodeError::TruncatedWide { address })?;
        if next[..4] != [0, 0, 0, 0] {
            return Err(DecodeError::BadWideSlot { address });
        }
        let hi = u32::from_le_bytes([next[4], next[5], next[6], next[7]]);
        imm = ((hi as u64) << 32 | imm32 as u32 as u64) as i64;
    }
    if opcode == CALL_REG && !(0..=MAX_REGISTER as i64).contains(&imm) {
        return Err(DecodeError::BadRegister { address, opcode });
    }
    Ok(Instruction { address, opcode, dst, src, offset, imm })
}

impl Instruction {
    pub fn new(opcode: u8, dst: u8, src: u8, offset: i16, imm: i64) -> Instruction {
        Instruction { address: 0, opcode, dst, src, offset, imm }
    }

    pub fn size(&self) -> u64 {
        if self.opcode == LDDW {
            2 * INSN_SIZE
        } else {
            INSN_SIZE
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.size() as usize);
        out.push(self.opcode);
        out.push(self.src << 4 | self.dst);
        out.extend_from_slice(&self.offset.to_le_bytes());
        out.extend_from_slice(&(self.imm as u32).to_le_bytes());
        if self.opcode == LDDW {
            out.extend_from_slice(&[0, 0, 0, 0]);
            out.extend_from_slice(&((self.imm as u64 >> 32) as u32).to_le_bytes());
        }
        out
    }

    pub fn op(&self) -> Op {
        let class = self.opcode & 0x07;
        let code = self.opcode & 0xf0;
        let operand = if self.opcode & 0x08 != 0 {
            Operand::Reg(self.src)
        } else {
            Operand::Imm(self.imm)
        };
        match class {
            CLS_LD => Op::Lddw { dst: self.dst, imm: self.imm as u64 },
            CLS_LDX => Op::Ldx {
                width: Width::from_mode(self.opcode),
                dst: self.dst,
                base: self.src,
                off: self.offset,
            },
            CLS_ST => Op::St {
                width: Width::from_mode(self.opcode),
                base: self.dst,
                off: self.offset,
                imm: self.imm,
            },
            CLS_STX => Op::Stx {
                width: Width::from_mode(self.opcode),
                base: self.dst,
                off: self.offset,
                src: self.src,
            },
            CLS_ALU32 | CLS_ALU64 => {
                let mut op = AluOp::from_code(code).expect("decoded opcode");
                if op == AluOp::Le && self.opcode & 0x08 != 0 {
                    op = AluOp::Be;
                }
                let operand = match op {
                    AluOp::Le | AluOp::Be => Operand::Imm(self.imm),
                    _ => operand,
                };
                Op::Alu { op, is64: class == CLS_ALU64, dst: self.dst, operand }
            }
            CLS_PQR => Op::Pqr {
                op: PqrOp::from_code(code).expect("decoded opcode"),
                is64: PqrOp::is64(code),
                dst: self.dst,
                operand,
            },
            _ => match self.opcode {
                JA => Op::Ja { off: self.offset },
                CALL_IMM => Op::Call { imm: self.imm as u32 },
                CALL_REG => Op::Callx { reg: self.imm as u8 },
                EXIT => Op::Exit,
                _ => Op::Jcond {
                    cond: JmpCond::from_code(code).expect("decoded opcode"),
                    dst: self.dst,
                    operand,
                    off: self.offset,
                },
            },
        }
    }

    /// Address of the branch target for jumps.
    pub fn jump_target(&self) -> Option<u64> {
        match self.op() {
            Op::Ja { off } | Op::Jcond { off, .. } => Some(self.relative(off as i64)),
            _ => None,
        }
    }

    pub fn relative(&self, slots: i64) -> u64 {
        (self.address as i64 + (slots + 1) * INSN_SIZE as i64) as u64
    }

    pub fn next_address(&self) -> u64 {
        self.address + self.size()
    }

    pub fn is_conditional(&self) -> bool {
        matches!(self.op(), Op::Jcond { .. })
    }
}

/// Mnemonic rendering without symbol resolution. Branch displacements are
/// printed as signed slot offsets, which the assembler accepts back.
impl fmt::Display for Instruction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn opnd(op: Operand) -> String {
            match op {
                Operand::Imm(i) => fmt_imm(i),
                Operand::Reg(r) => format!("r{r}"),
            }
        }
        fn mem(base: u8, off: i16) -> String {
            if off < 0 {
                format!("[r{base}-{:#x}]", -(off as i32))
            } else {
                format!("[r{base}+{off:#x}]")
            }
        }
        match self.op() {
            Op::Lddw { dst, imm } => write!(f, "lddw r{dst}, {imm:#x}"),
            Op::Ldx { width, dst, base, off } => {
                write!(f, "ldx{} r{dst}, {}", width.suffix(), mem(base, off))
            }
            Op::St { width, base, off, imm } => {
                write!(f, "st{} {}, {}", width.suffix(), mem(base, off), fmt_imm(imm))
            }
            Op::Stx { width, base, off, src } => {
                write!(f, "stx{} {}, r{src}", width.suffix(), mem(base, off))
            }
            Op::Alu { op: op @ (AluOp::Le | AluOp::Be), dst, operand, .. } => {
                let Operand::Imm(bits) = operand else { unreachable!() };
                write!(f, "{}{bits} r{dst}", op.name())
            }
            Op::Alu { op: AluOp::Neg, is64, dst, .. } => {
                write!(f, "neg{} r{dst}", if is64 { "64" } else { "32" })
            }
            Op::Alu { op, is64, dst, operand } => write!(
                f,
                "{}{} r{dst}, {}",
                op.name(),
                if is64 { "64" } else { "32" },
                opnd(operand)
            ),
            Op::Pqr { op, is64, dst, operand } => write!(
                f,
                "{}{} r{dst}, {}",
                op.name(),
                if is64 { "64" } else { "32" },
                opnd(operand)
            ),
            Op::Ja { off } => write!(f, "ja {off:+}"),
            Op::Jcond { cond, dst, operand, off } => {
                write!(f, "{} r{dst}, {}, {off:+}", cond.name(), opnd(operand))
            }
            Op::Call { imm } => write!(f, "call {imm:#x}"),
            Op::Callx { reg } => write!(f, "callx r{reg}"),
            Op::Exit => write!(f, "exit"),
        }
    }
}

pub(crate) fn fmt_imm(i: i64) -> String {
    if (-9..=9).contains(&i) {
        i.to_string()
    } else if i < 0 {
        format!("-{:#x}", (i as i128).unsigned_abs())
    } else {
        format!("{i:#x}")
    }
}

/// Every legal opcode of the given dialect.
pub fn legal_opcodes(version: SbpfVersion) -> Vec<u8> {
    (0u8..=255).filter(|&op| is_legal(op, version)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(bytes: &[u8]) -> [u8; 8] {
        bytes.try_into().unwrap()
    }

    #[test]
    fn decodes_exit() {
        let insn = decode(slot(&[0x95, 0, 0, 0, 0, 0, 0, 0]), None, 0, SbpfVersion::V1).unwrap();
        assert_eq!(insn.op(), Op::Exit);
    }

    #[test]
    fn decodes_mov_imm() {
        let insn = decode(slot(&[0xb7, 0x01, 0, 0, 42, 0, 0, 0]), None, 0, SbpfVersion::V1).unwrap();
        assert_eq!(insn.dst, 1);
        assert_eq!(insn.imm, 42);
        assert_eq!(insn.to_string(), "mov64 r1, 0x2a");
    }

    #[test]
    fn decodes_marker_comparison() {
        let insn = decode(slot(&[0x15, 0x03, 4, 0, 0xff, 0, 0, 0]), None, 16, SbpfVersion::V1).unwrap();
        assert_eq!(
            insn.op(),
            Op::Jcond { cond: JmpCond::Eq, dst: 3, operand: Operand::Imm(0xff), off: 4 }
        );
        assert_eq!(insn.jump_target(), Some(16 + 5 * 8));
    }

    #[test]
    fn decodes_wide_immediate() {
        let insn = Instruction::new(LDDW, 2, 0, 0, 0x1_0000_0120);
        let bytes = insn.encode();
        let d = decode(
            bytes[..8].try_into().unwrap(),
            Some(bytes[8..].try_into().unwrap()),
            0,
            SbpfVersion::V1,
        )
        .unwrap();
        assert_eq!(d.imm, 0x1_0000_0120);
        assert_eq!(d.size(), 16);
    }

    #[test]
    fn rejects_bad_inputs() {
        let v1 = SbpfVersion::V1;
        assert!(matches!(
            decode(slot(&[0xff, 0, 0, 0, 0, 0, 0, 0]), None, 8, v1),
            Err(DecodeError::IllegalOpcode { address: 8, opcode: 0xff })
        ));
        assert!(matches!(
            decode(slot(&[0xb7, 0x0b, 0, 0, 0, 0, 0, 0]), None, 0, v1),
            Err(DecodeError::BadRegister { .. })
        ));
        assert!(matches!(
            decode(slot(&[0x18, 0, 0, 0, 0, 0, 0, 0]), None, 0, v1),
            Err(DecodeError::TruncatedWide { .. })
        ));
        // product/quotient class only behind the version flag
        assert!(decode(slot(&[0x36, 0x01, 0, 0, 3, 0, 0, 0]), None, 0, v1).is_err());
        assert!(decode(slot(&[0x36, 0x01, 0, 0, 3, 0, 0, 0]), None, 0, SbpfVersion::V2).is_ok());
    }

    #[test]
    fn opcode_space_size() {
        // lddw, 12 memory ops, 27 alu32 (incl. neg/le/be), 25 alu64, 26 jump/call/exit
        let v1 = legal_opcodes(SbpfVersion::V1);
        assert_eq!(v1.len(), 1 + 12 + 27 + 25 + 26);
        assert!(legal_opcodes(SbpfVersion::V2).len() > v1.len());
    }
}
