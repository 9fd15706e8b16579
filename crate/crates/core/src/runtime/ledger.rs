//! Per-path record of which accounts were read, checked and written.

use std::collections::BTreeSet;

use serde::Serialize;

use super::layout::{origin, Field, Origin};
use crate::symcore::expr::{BinOp, Expr, Kind, UnOp};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AccountFacts {
    pub key_read: bool,
    pub owner_read: bool,
    pub data_read: bool,
    pub lamports_read: bool,
    pub signer_read: bool,
    pub owner_compared: bool,
    pub key_vs_constant: bool,
    /// Key compared with data of an account that was already trusted.
    pub key_vs_trusted_data: bool,
    pub data_written: bool,
    pub pda_derived: bool,
    /// Key compared only with data of an untrusted account.
    pub weak_key_check: bool,
    pub writes: Vec<(Field, u64)>,
}

impl AccountFacts {
    pub fn is_read(&self) -> bool {
        self.key_read || self.owner_read || self.data_read || self.lamports_read
    }

    pub fn is_checked(&self) -> bool {
        self.owner_compared || self.key_vs_constant || self.key_vs_trusted_data || self.data_written || self.pda_derived
    }

    pub fn key_trusted(&self) -> bool {
        self.key_vs_constant || self.key_vs_trusted_data || self.pda_derived
    }

    pub fn marks(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.owner_compared {
            out.push("owner-compared");
        }
        if self.key_vs_constant || self.key_vs_trusted_data {
            out.push("key-vs-constant");
        }
        if self.data_written {
            out.push("data-written");
        }
        if self.pda_derived {
            out.push("pda-derived");
        }
        out
    }
}

/// One application of the program-address derivation function.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PdaApp {
    pub input: Vec<Expr>,
    pub output: [Expr; 4],
    pub bump: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Ledger {
    pub accounts: Vec<AccountFacts>,
    pub pda: Vec<PdaApp>,
}

impl Ledger {
    pub fn new(n: usize) -> Ledger {
        Ledger { accounts: vec![AccountFacts::default(); n], pda: Vec::new() }
    }

    pub fn read_set(&self) -> BTreeSet<usize> {
        self.accounts.iter().enumerate().filter(|(_, a)| a.is_read()).map(|(i, _)| i).collect()
    }

    pub fn checked_set(&self) -> BTreeSet<usize> {
        self.accounts.iter().enumerate().filter(|(_, a)| a.is_checked()).map(|(i, _)| i).collect()
    }

    pub fn on_read(&mut self, index: usize, field: Field) {
        let Some(a) = self.accounts.get_mut(index) else { return };
        match field {
            Field::Key => a.key_read = true,
            Field::Owner => a.owner_read = true,
            Field::Data => a.data_read = true,
            Field::Lamports => a.lamports_read = true,
            Field::Signer => a.signer_read = true,
            _ => {}
        }
    }

    pub fn on_write(&mut self, index: usize, field: Field, site: u64) {
        let Some(a) = self.accounts.get_mut(index) else { return };
        a.writes.push((field, site));
        if matches!(field, Field::Data | Field::Lamports) {
            a.data_written = true;
        }
    }

    /// Merge another path's facts: reads are joined, checks intersected, so
    /// the merged ledger never claims a check that one path lacks.
    pub fn merge_from(&mut self, other: &Ledger) {
        for (a, b) in self.accounts.iter_mut().zip(&other.accounts) {
            a.key_read |= b.key_read;
            a.owner_read |= b.owner_read;
            a.data_read |= b.data_read;
            a.lamports_read |= b.lamports_read;
            a.signer_read |= b.signer_read;
            a.owner_compared &= b.owner_compared;
            a.key_vs_constant &= b.key_vs_constant;
            a.key_vs_trusted_data &= b.key_vs_trusted_data;
            a.data_written &= b.data_written;
            a.pda_derived &= b.pda_derived;
            a.weak_key_check |= b.weak_key_check;
            for w in &b.writes {
                if !a.writes.contains(w) {
                    a.writes.push(*w);
                }
            }
        }
        for p in &other.pda {
            if !self.pda.contains(p) {
                self.pda.push(p.clone());
            }
        }
    }

    /// Record the checks expressed by a branch condition.
    pub fn observe_condition(&mut self, cond: &Expr) {
        let mut atoms = Vec::new();
        collect_compares(cond, &mut atoms, &mut BTreeSet::new());
        for (op, a, b) in atoms {
            self.observe_compare(op, &a, &b);
        }
    }

    fn observe_compare(&mut self, op: BinOp, a: &Expr, b: &Expr) {
        if a == b {
            return;
        }
        let (oa, ob) = (origins(a), origins(b));
        for o in oa.iter().chain(&ob) {
            if let Origin::Owner(i) = o {
                if let Some(f) = self.accounts.get_mut(*i) {
                    f.owner_compared = true;
                }
            }
        }
        if op != BinOp::Eq {
            return;
        }
        for (side, other) in [(&oa, &ob), (&ob, &oa)] {
            let keys: BTreeSet<usize> = side.iter().filter_map(|o| if let Origin::Key(i) = o { Some(*i) } else { None }).collect();
            for i in keys {
                if other.contains(&Origin::Key(i)) {
                    continue;
                }
                if other.is_empty() {
                    self.accounts[i].key_vs_constant = true;
                    continue;
                }
                if other.contains(&Origin::Pda) {
                    self.accounts[i].pda_derived = true;
                    continue;
                }
                let sources: BTreeSet<usize> =
                    other.iter().filter_map(|o| if let Origin::Data(j) = o { Some(*j) } else { None }).collect();
                if sources.is_empty() {
                    continue;
                }
                if sources.iter().all(|j| *j != i && self.accounts.get(*j).is_some_and(AccountFacts::is_checked)) {
                    self.accounts[i].key_vs_trusted_data = true;
                } else {
                    self.accounts[i].weak_key_check = true;
                }
            }
        }
    }
}

fn origins(e: &Expr) -> BTreeSet<Origin> {
    e.vars().iter().map(|v| origin(v)).filter(|o| *o != Origin::Other).collect()
}

/// Comparison atoms under the boolean structure of a condition.
fn collect_compares(e: &Expr, out: &mut Vec<(BinOp, Expr, Expr)>, seen: &mut BTreeSet<usize>) {
    if !seen.insert(e.id()) {
        return;
    }
    match e.kind() {
        Kind::Bin(op, a, b) if op.is_compare() => out.push((*op, a.clone(), b.clone())),
        Kind::Bin(BinOp::And | BinOp::Or | BinOp::Xor, a, b) if e.width() == 1 => {
            collect_compares(a, out, seen);
            collect_compares(b, out, seen);
        }
        Kind::Un(UnOp::Not, a) if e.width() == 1 => collect_compares(a, out, seen),
        Kind::Ite(c, a, b) => {
            collect_compares(c, out, seen);
            if e.width() == 1 {
                collect_compares(a, out, seen);
                collect_compares(b, out, seen);
            }
        }
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(i: usize) -> Expr {
        let l: Vec<Expr> = (0..4).map(|j| Expr::var(&format!("a{i}_key{j}"), 64)).collect();
        l[1].concat(&l[0])
    }

    #[test]
    fn owner_comparison_marks_owner() {
        let mut l = Ledger::new(2);
        let c = Expr::var("a0_owner0", 64).eq(&Expr::constant(5, 64)).not();
        l.observe_condition(&c);
        assert!(l.accounts[0].owner_compared);
        assert!(!l.accounts[1].is_checked());
    }

    #[test]
    fn key_against_constant_and_data() {
        let mut l = Ledger::new(3);
        l.observe_condition(&key(1).eq(&Expr::constant(77, 128)));
        assert!(l.accounts[1].key_vs_constant);
        // Data of an unchecked account is only a weak check.
        let data: Expr = (0..16).map(|k| Expr::var(&format!("a0_d{k}"), 8)).reduce(|a, b| b.concat(&a)).unwrap();
        l.observe_condition(&key(2).eq(&data));
        assert!(l.accounts[2].weak_key_check);
        assert!(!l.accounts[2].is_checked());
        l.accounts[0].owner_compared = true;
        l.observe_condition(&key(2).eq(&data));
        assert!(l.accounts[2].key_vs_trusted_data);
    }

    #[test]
    fn writes_mark_trust() {
        let mut l = Ledger::new(1);
        l.on_read(0, Field::Data);
        l.on_write(0, Field::Lamports, 0x40);
        assert!(l.accounts[0].is_checked());
        assert_eq!(l.accounts[0].writes, vec![(Field::Lamports, 0x40)]);
    }

    #[test]
    fn merge_keeps_checks_common_to_both() {
        let mut a = Ledger::new(1);
        let mut b = Ledger::new(1);
        a.accounts[0].owner_compared = true;
        b.accounts[0].data_read = true;
        a.merge_from(&b);
        assert!(!a.accounts[0].owner_compared);
        assert!(a.accounts[0].data_read);
    }
}
