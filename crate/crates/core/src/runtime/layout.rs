//! Serialized input layout of a program invocation.
//!
//! The symbolic input gives every account its maximum footprint so buffer
//! positions are constants; the concrete serializer uses the real lengths.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::symcore::expr::Expr;
use crate::symcore::solver::Model;

pub const NON_DUP_MARKER: u8 = 0xff;
pub const ACCOUNT_HEADER: u64 = 88;
pub const MAX_PERMITTED_DATA_INCREASE: u64 = 10 * 1024;
pub const DEFAULT_ACCOUNTS: usize = 10;
pub const DEFAULT_MAX_DATA: u64 = 1024;
pub const IX_DATA_CAPACITY: u64 = 256;
pub const INPUT_REGION_SIZE: u64 = 1 << 32;

pub const OFF_SIGNER: u64 = 1;
pub const OFF_WRITABLE: u64 = 2;
pub const OFF_EXECUTABLE: u64 = 3;
pub const OFF_KEY: u64 = 8;
pub const OFF_OWNER: u64 = 40;
pub const OFF_LAMPORTS: u64 = 72;
pub const OFF_DATA_LEN: u64 = 80;
pub const OFF_DATA: u64 = 88;

#[derive(Debug, Error)]
pub enum LayoutError {
    #[error("at least one account is required")]
    NoAccounts,
    #[error("input of {0} bytes does not fit the input region")]
    Overflow(u64),
    #[error("duplicate slot {slot} must refer to an earlier account")]
    BadDuplicate { slot: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Marker,
    Signer,
    Writable,
    Executable,
    Padding,
    Key,
    Owner,
    Lamports,
    DataLen,
    Data,
    Tail,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Location {
    Count,
    Account { index: usize, field: Field, offset: u64 },
    IxLen,
    IxData(u64),
    ProgramId,
}

/// What an input variable stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Origin {
    Key(usize),
    Owner(usize),
    Lamports(usize),
    DataLen(usize),
    Data(usize),
    Signer(usize),
    Writable(usize),
    Executable(usize),
    IxLen,
    IxData,
    Pda,
    Other,
}

fn account_of(rest: &str) -> Option<(usize, &str)> {
    let digits = rest.bytes().take_while(u8::is_ascii_digit).count();
    let idx = rest[..digits].parse().ok()?;
    Some((idx, &rest[digits..]))
}

/// Classify a variable by its name.
pub fn origin(name: &str) -> Origin {
    if name == "ix_len" {
        return Origin::IxLen;
    }
    if name.starts_with("ix") && name[2..].bytes().all(|b| b.is_ascii_digit()) && name.len() > 2 {
        return Origin::IxData;
    }
    if name.starts_with("pda") {
        return Origin::Pda;
    }
    let Some(rest) = name.strip_prefix('a') else { return Origin::Other };
    let Some((i, field)) = account_of(rest) else { return Origin::Other };
    if field.starts_with("_key") {
        Origin::Key(i)
    } else if field.starts_with("_owner") {
        Origin::Owner(i)
    } else if field == "_lamports" {
        Origin::Lamports(i)
    } else if field == "_len" {
        Origin::DataLen(i)
    } else if field.starts_with("_d") {
        Origin::Data(i)
    } else if field == "_signer" {
        Origin::Signer(i)
    } else if field == "_writable" {
        Origin::Writable(i)
    } else if field == "_exec" {
        Origin::Executable(i)
    } else {
        Origin::Other
    }
}

pub fn key_var(i: usize, limb: usize) -> String {
    format!("a{i}_key{limb}")
}
pub fn owner_var(i: usize, limb: usize) -> String {
    format!("a{i}_owner{limb}")
}
pub fn lamports_var(i: usize) -> String {
    format!("a{i}_lamports")
}
pub fn data_len_var(i: usize) -> String {
    format!("a{i}_len")
}
pub fn data_var(i: usize, k: u64) -> String {
    format!("a{i}_d{k}")
}
pub fn signer_var(i: usize) -> String {
    format!("a{i}_signer")
}
pub fn writable_var(i: usize) -> String {
    format!("a{i}_writable")
}
pub fn exec_var(i: usize) -> String {
    format!("a{i}_exec")
}
pub fn ix_var(k: u64) -> String {
    format!("ix{k}")
}
pub const IX_LEN_VAR: &str = "ix_len";

fn align8(v: u64) -> u64 {
    (v + 7) & !7
}

/// Bytes taken by a non-duplicate account with `data_len` bytes of data.
pub fn footprint(data_len: u64) -> u64 {
    align8(ACCOUNT_HEADER + data_len + MAX_PERMITTED_DATA_INCREASE) + 8
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub accounts: usize,
    pub max_data: u64,
    pub ix_capacity: u64,
    pub program_id: [u8; 32],
    /// Slot `i` repeats account `dup_of[i]` when set.
    pub dup_of: Vec<Option<usize>>,
    pub offsets: Vec<u64>,
    pub ix_len_offset: u64,
    pub total: u64,
}

/// Symbolic input plus its side conditions.
pub struct SymbolicInput {
    pub bytes: Vec<Expr>,
    pub constraints: Vec<Expr>,
    pub pins: BTreeMap<Arc<str>, u128>,
}

impl InputLayout {
    pub fn new(accounts: usize, max_data: u64, program_id: [u8; 32]) -> Result<InputLayout, LayoutError> {
        InputLayout::with_duplicates(accounts, max_data, program_id, vec![None; accounts])
    }

    pub fn with_duplicates(
        accounts: usize,
        max_data: u64,
        program_id: [u8; 32],
        dup_of: Vec<Option<usize>>,
    ) -> Result<InputLayout, LayoutError> {
        if accounts == 0 {
            return Err(LayoutError::NoAccounts);
        }
        let mut offsets = Vec::with_capacity(accounts);
        let mut off = 8;
        for (i, d) in dup_of.iter().enumerate() {
            offsets.push(off);
            match d {
                Some(j) if *j >= i => return Err(LayoutError::BadDuplicate { slot: i }),
                Some(_) => off += 8,
                None => off += footprint(max_data),
            }
        }
        let total = off + 8 + IX_DATA_CAPACITY + 32;
        if total > INPUT_REGION_SIZE {
            return Err(LayoutError::Overflow(total));
        }
        Ok(InputLayout {
            accounts,
            max_data,
            ix_capacity: IX_DATA_CAPACITY,
            program_id,
            dup_of,
            offsets,
            ix_len_offset: off,
            total,
        })
    }

    /// The account a slot refers to, following duplicate markers.
    pub fn canonical(&self, slot: usize) -> usize {
        self.dup_of[slot].unwrap_or(slot)
    }

    pub fn ix_data_offset(&self) -> u64 {
        self.ix_len_offset + 8
    }

    pub fn program_id_offset(&self) -> u64 {
        self.ix_data_offset() + self.ix_capacity
    }

    pub fn locate(&self, offset: u64) -> Option<Location> {
        if offset < 8 {
            return Some(Location::Count);
        }
        if offset >= self.total {
            return None;
        }
        if offset >= self.ix_len_offset {
            let rel = offset - self.ix_len_offset;
            return Some(if rel < 8 {
                Location::IxLen
            } else if rel < 8 + self.ix_capacity {
                Location::IxData(rel - 8)
            } else {
                Location::ProgramId
            });
        }
        let slot = self.offsets.partition_point(|o| *o <= offset) - 1;
        let rel = offset - self.offsets[slot];
        if self.dup_of[slot].is_some() {
            return Some(Location::Account { index: self.canonical(slot), field: Field::Marker, offset: rel });
        }
        let field = match rel {
            0 => Field::Marker,
            OFF_SIGNER => Field::Signer,
            OFF_WRITABLE => Field::Writable,
            OFF_EXECUTABLE => Field::Executable,
            4..=7 => Field::Padding,
            8..=39 => Field::Key,
            40..=71 => Field::Owner,
            72..=79 => Field::Lamports,
            80..=87 => Field::DataLen,
            r if r < OFF_DATA + self.max_data => Field::Data,
            _ => Field::Tail,
        };
        Some(Location::Account { index: slot, field, offset: rel })
    }

    /// Build the symbolic input region: fresh variables for every field and
    /// data lengths pinned to the maximum.
    pub fn build_symbolic(&self) -> SymbolicInput {
        let mut bytes = vec![Expr::zero_byte(); self.total as usize];
        let mut constraints = Vec::new();
        let mut pins = BTreeMap::new();
        let put = |bytes: &mut Vec<Expr>, at: u64, v: &Expr| {
            for k in 0..v.width() / 8 {
                bytes[(at + k as u64) as usize] = v.extract(8 * k + 7, 8 * k);
            }
        };
        put(&mut bytes, 0, &Expr::constant(self.accounts as u128, 64));
        for slot in 0..self.accounts {
            let base = self.offsets[slot];
            if let Some(j) = self.dup_of[slot] {
                bytes[base as usize] = Expr::constant(j as u128, 8);
                continue;
            }
            let i = slot;
            bytes[base as usize] = Expr::constant(NON_DUP_MARKER as u128, 8);
            for (off, name) in [(OFF_SIGNER, signer_var(i)), (OFF_WRITABLE, writable_var(i)), (OFF_EXECUTABLE, exec_var(i))] {
                let v = Expr::var(&name, 8);
                constraints.push(v.ule(&Expr::constant(1, 8)));
                bytes[(base + off) as usize] = v;
            }
            for limb in 0..4 {
                put(&mut bytes, base + OFF_KEY + 8 * limb as u64, &Expr::var(&key_var(i, limb), 64));
                put(&mut bytes, base + OFF_OWNER + 8 * limb as u64, &Expr::var(&owner_var(i, limb), 64));
            }
            put(&mut bytes, base + OFF_LAMPORTS, &Expr::var(&lamports_var(i), 64));
            let len = Expr::var(&data_len_var(i), 64);
            constraints.push(len.ule(&Expr::constant(self.max_data as u128, 64)));
            pins.insert(Arc::from(data_len_var(i)), self.max_data as u128);
            put(&mut bytes, base + OFF_DATA_LEN, &len);
            for k in 0..self.max_data {
                bytes[(base + OFF_DATA + k) as usize] = Expr::var(&data_var(i, k), 8);
            }
        }
        let ix_len = Expr::var(IX_LEN_VAR, 64);
        constraints.push(ix_len.ule(&Expr::constant(self.ix_capacity as u128, 64)));
        pins.insert(Arc::from(IX_LEN_VAR), self.ix_capacity as u128);
        put(&mut bytes, self.ix_len_offset, &ix_len);
        for k in 0..self.ix_capacity {
            bytes[(self.ix_data_offset() + k) as usize] = Expr::var(&ix_var(k), 8);
        }
        let pid = self.program_id_offset() as usize;
        for (k, b) in self.program_id.iter().enumerate() {
            bytes[pid + k] = Expr::constant(*b as u128, 8);
        }
        SymbolicInput { bytes, constraints, pins }
    }

    /// Concrete values of one account under a model.
    pub fn concrete_account(&self, model: &Model, i: usize) -> ConcreteAccount {
        let get = |n: &str| model.get(n).copied().unwrap_or(0);
        let limbs = |f: &dyn Fn(usize) -> String| {
            let mut out = [0u8; 32];
            for limb in 0..4 {
                out[8 * limb..8 * limb + 8].copy_from_slice(&(get(&f(limb)) as u64).to_le_bytes());
            }
            out
        };
        let data_len = (get(&data_len_var(i)) as u64).min(self.max_data);
        ConcreteAccount {
            index: i,
            duplicate_of: self.dup_of[i],
            is_signer: get(&signer_var(i)) != 0,
            is_writable: get(&writable_var(i)) != 0,
            executable: get(&exec_var(i)) != 0,
            key: hex::encode(limbs(&|l| key_var(i, l))),
            owner: hex::encode(limbs(&|l| owner_var(i, l))),
            lamports: get(&lamports_var(i)) as u64,
            data: hex::encode((0..data_len).map(|k| get(&data_var(i, k)) as u8).collect::<Vec<_>>()),
        }
    }

    pub fn instruction_data(&self, model: &Model) -> Vec<u8> {
        let len = (model.get(IX_LEN_VAR).copied().unwrap_or(0) as u64).min(self.ix_capacity);
        (0..len).map(|k| model.get(ix_var(k).as_str()).copied().unwrap_or(0) as u8).collect()
    }

    /// Serialize with the real loader layout and the model's lengths.
    pub fn serialize(&self, model: &Model) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.accounts as u64).to_le_bytes());
        for slot in 0..self.accounts {
            if let Some(j) = self.dup_of[slot] {
                out.push(j as u8);
                out.extend_from_slice(&[0u8; 7]);
                continue;
            }
            let a = self.concrete_account(model, slot);
            out.push(NON_DUP_MARKER);
            out.extend_from_slice(&[a.is_signer as u8, a.is_writable as u8, a.executable as u8, 0, 0, 0, 0]);
            out.extend_from_slice(&hex::decode(&a.key).unwrap());
            out.extend_from_slice(&hex::decode(&a.owner).unwrap());
            out.extend_from_slice(&a.lamports.to_le_bytes());
            let data = hex::decode(&a.data).unwrap();
            out.extend_from_slice(&(data.len() as u64).to_le_bytes());
            out.extend_from_slice(&data);
            // Remaining data capacity and realloc space, then alignment.
            let start = out.len() - data.len();
            let end = start as u64 + data.len() as u64 + MAX_PERMITTED_DATA_INCREASE;
            let aligned = align8(end);
            out.resize(aligned as usize, 0);
            out.extend_from_slice(&0u64.to_le_bytes());
        }
        let ix = self.instruction_data(model);
        out.extend_from_slice(&(ix.len() as u64).to_le_bytes());
        out.extend_from_slice(&ix);
        out.extend_from_slice(&self.program_id);
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConcreteAccount {
    pub index: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duplicate_of: Option<usize>,
    pub is_signer: bool,
    pub is_writable: bool,
    pub executable: bool,
    pub key: String,
    pub owner: String,
    pub lamports: u64,
    pub data: String,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn footprint_at_default_size() {
        assert_eq!(footprint(DEFAULT_MAX_DATA), 11360);
        let l = InputLayout::new(2, DEFAULT_MAX_DATA, [0; 32]).unwrap();
        assert_eq!(l.offsets, vec![8, 8 + 11360]);
    }

    #[test]
    fn rejects_zero_accounts() {
        assert!(matches!(InputLayout::new(0, 16, [0; 32]), Err(LayoutError::NoAccounts)));
    }

    #[test]
    fn first_byte_is_marker() {
        let l = InputLayout::new(1, 16, [7; 32]).unwrap();
        let s = l.build_symbolic();
        assert_eq!(s.bytes[8].as_const(), Some(0xff));
        assert_eq!(s.bytes[9].var_name(), Some("a0_signer"));
        assert_eq!(l.locate(8 + OFF_OWNER + 3), Some(Location::Account { index: 0, field: Field::Owner, offset: 43 }));
        assert_eq!(l.locate(l.ix_data_offset() + 2), Some(Location::IxData(2)));
        assert_eq!(s.bytes[l.program_id_offset() as usize].as_const(), Some(7));
    }

    #[test]
    fn serialization_matches_symbolic_at_maximum_lengths() {
        let l = InputLayout::new(2, 16, [9; 32]).unwrap();
        let s = l.build_symbolic();
        let mut model = Model::new();
        model.insert(Arc::from("a0_len"), 16);
        model.insert(Arc::from("a1_len"), 16);
        model.insert(Arc::from("ix_len"), 256);
        model.insert(Arc::from("a1_d3"), 0x42);
        model.insert(Arc::from("a0_key1"), 0x1122);
        model.insert(Arc::from("ix5"), 0x99);
        let bytes = l.serialize(&model);
        assert_eq!(bytes.len() as u64, l.total);
        for (i, e) in s.bytes.iter().enumerate() {
            let v = e.eval(&|n| model.get(n).copied());
            assert_eq!(v as u8, bytes[i], "offset {i}");
        }
    }

    #[test]
    fn origins() {
        assert_eq!(origin("a3_key2"), Origin::Key(3));
        assert_eq!(origin("a10_d77"), Origin::Data(10));
        assert_eq!(origin("a0_signer"), Origin::Signer(0));
        assert_eq!(origin("ix_len"), Origin::IxLen);
        assert_eq!(origin("ix12"), Origin::IxData);
        assert_eq!(origin("pda0_1"), Origin::Pda);
        assert_eq!(origin("fresh4"), Origin::Other);
    }
}
