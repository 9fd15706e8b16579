//! Encode/decode identity over the legal opcode space.

use proptest::prelude::*;

use solsym_core::bytecode::isa::{decode, legal_opcodes, Instruction, SbpfVersion, CALL_REG, LDDW, MAX_REGISTER};

const BATCH: usize = 64;
const CASES: u32 = 1_600; // 1_600 * 64 > 10^5 instructions

fn instruction(version: SbpfVersion) -> impl Strategy<Value = Instruction> {
    let ops = legal_opcodes(version);
    (prop::sample::select(ops), 0..=MAX_REGISTER, 0..=MAX_REGISTER, any::<i16>(), any::<i32>(), any::<u32>()).prop_map(
        |(opcode, dst, src, offset, imm, hi)| {
            let imm = match opcode {
                LDDW => ((hi as u64) << 32 | imm as u32 as u64) as i64,
                CALL_REG => (imm.rem_euclid(MAX_REGISTER as i32 + 1)) as i64,
                _ => imm as i64,
            };
            Instruction::new(opcode, dst, src, offset, imm)
        },
    )
}

fn roundtrip(insn: &Instruction, version: SbpfVersion) -> Result<(), TestCaseError> {
    let bytes = insn.encode();
    let next = (bytes.len() == 16).then(|| bytes[8..16].try_into().unwrap());
    let back = decode(bytes[..8].try_into().unwrap(), next, 0, version)
        .map_err(|e| TestCaseError::fail(format!("{insn:?}: {e}")))?;
    prop_assert_eq!(&back, insn);
    prop_assert_eq!(back.encode(), bytes);
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn v1_encode_decode_identity(batch in prop::collection::vec(instruction(SbpfVersion::V1), BATCH)) {
        for insn in &batch {
            roundtrip(insn, SbpfVersion::V1)?;
        }
    }

    #[test]
    fn v2_encode_decode_identity(batch in prop::collection::vec(instruction(SbpfVersion::V2), BATCH)) {
        for insn in &batch {
            roundtrip(insn, SbpfVersion::V2)?;
        }
    }

    /// Any 8-byte slot either fails to decode or re-encodes to itself.
    #[test]
    fn decode_encode_identity(slot in any::<[u8; 8]>(), next in any::<[u8; 8]>()) {
        if let Ok(insn) = decode(slot, Some(next), 0, SbpfVersion::V2) {
            let bytes = insn.encode();
            prop_assert_eq!(&bytes[..8], &slot[..]);
            if bytes.len() == 16 {
                prop_assert_eq!(&bytes[8..], &next[..]);
            }
        }
    }
}

#[test]
fn every_legal_opcode_is_reachable() {
    for v in [SbpfVersion::V1, SbpfVersion::V2] {
        for op in legal_opcodes(v) {
            let imm = if op == CALL_REG { 1 } else { 7 };
            let insn = Instruction::new(op, 1, 2, -3, imm);
            roundtrip(&insn, v).unwrap();
        }
    }
}
