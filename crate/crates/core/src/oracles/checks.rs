//! Trust rules evaluated on a path.

use std::collections::BTreeSet;
use std::time::Instant;

use crate::runtime::layout::{data_len_var, signer_var, IX_LEN_VAR};
use crate::runtime::ledger::Ledger;
use crate::symcore::expr::Expr;
use crate::symcore::solver::{Model, SatResult};
use crate::symcore::state::{step, Status, SymState};

use super::OracleCtx;

/// Accounts carrying any of the four trust marks.
pub fn checked_accounts(ledger: &Ledger) -> BTreeSet<usize> {
    ledger.checked_set()
}

fn signer_zero(i: usize) -> Expr {
    Expr::var(&signer_var(i), 8).eq(&Expr::constant(0, 8))
}

fn signer_slots(st: &SymState) -> impl Iterator<Item = usize> + '_ {
    (0..st.layout.accounts).filter(|i| st.layout.dup_of[*i].is_none())
}

/// Whether every model of the path has account `i` as a signer.
pub fn signer_forced(ctx: &OracleCtx, st: &SymState, i: usize) -> bool {
    ctx.rt.solver.is_sat(&st.query_constraints(), &signer_zero(i)) == Some(false)
}

#[derive(Clone, Debug, Default)]
pub struct SignerCheck {
    pub present: bool,
    /// The answer rests on a solver timeout.
    pub degraded: bool,
    /// A model of the path with every signer flag cleared.
    pub witness: Option<Model>,
}

/// The path re-run with all signer flags forced to zero. The recorded path
/// condition fixes every branch direction, so asking whether it stays
/// satisfiable under the forced flags is the same as replaying the trace.
pub fn has_signer_check(ctx: &OracleCtx, st: &SymState) -> SignerCheck {
    let mut cs = st.query_constraints();
    cs.extend(signer_slots(st).map(|i| signer_zero(i)));
    match ctx.rt.solver.check(&cs) {
        SatResult::Sat(m) => SignerCheck { present: false, degraded: false, witness: Some(prefer_max_lengths(ctx, st, &cs).unwrap_or(m)) },
        SatResult::Unsat => SignerCheck { present: true, degraded: false, witness: None },
        SatResult::Unknown => SignerCheck { present: true, degraded: true, witness: None },
    }
}

/// A trusted account (key checked against a constant or checked data) that
/// must have signed.
pub fn has_authority(ctx: &OracleCtx, st: &SymState) -> bool {
    st.ledger
        .accounts
        .iter()
        .enumerate()
        .filter(|(_, f)| f.key_vs_constant || f.key_vs_trusted_data)
        .any(|(i, _)| signer_forced(ctx, st, i))
}

/// Constraints pinning every data and instruction length to its maximum,
/// for variables the path left free.
pub fn max_length_pins(st: &SymState) -> Vec<Expr> {
    if !st.pins.is_empty() {
        return Vec::new();
    }
    let l = &st.layout;
    let mut out: Vec<Expr> = signer_slots(st)
        .map(|i| Expr::var(&data_len_var(i), 64).eq(&Expr::constant(l.max_data as u128, 64)))
        .collect();
    out.push(Expr::var(IX_LEN_VAR, 64).eq(&Expr::constant(l.ix_capacity as u128, 64)));
    out
}

/// Model of `cs` with maximal lengths if that is satisfiable.
pub fn prefer_max_lengths(ctx: &OracleCtx, st: &SymState, cs: &[Expr]) -> Option<Model> {
    let pins = max_length_pins(st);
    if pins.is_empty() {
        return None;
    }
    let mut q = cs.to_vec();
    q.extend(pins);
    match ctx.rt.solver.check(&q) {
        SatResult::Sat(m) => Some(m),
        _ => None,
    }
}

/// Depth-first continuation to the first exit with r0 = 0.
pub fn continue_to_exit(ctx: &OracleCtx, st: SymState, limit: Instant) -> Option<SymState> {
    let mut stack = vec![st];
    while let Some(s) = stack.pop() {
        if Instant::now() >= limit {
            return None;
        }
        match &s.status {
            Status::Exited(r0) => {
                let ok = r0.eq(&Expr::constant(0, 64));
                let mut s = s.clone();
                if s.feasible(&ctx.rt.solver, &ok) == Some(true) {
                    s.add_constraint(ok);
                    return Some(s);
                }
                continue;
            }
            Status::Active => {}
            _ => continue,
        }
        let succ = step(ctx.rt, s);
        let forked = succ.len() > 1;
        for n in succ.into_iter().rev() {
            if matches!(n.status, Status::Aborted(_) | Status::Infeasible) {
                continue;
            }
            if forked && n.is_active() && ctx.prune.is_some_and(|idx| !idx.still_reachable(ctx.cfg, &n)) {
                continue;
            }
            stack.push(n);
        }
    }
    None
}
