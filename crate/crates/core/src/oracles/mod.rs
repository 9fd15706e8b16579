//! Vulnerability oracles: classify critical actions as missing-signer,
//! missing-owner or arbitrary-CPI findings and attach an exploit.

pub mod checks;
pub mod exploit;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::bytecode::cfg::Cfg;
use crate::explore::reach::ReachabilityIndex;
use crate::runtime::layout::{origin, Origin};
use crate::runtime::{ActionKind, CriticalAction, Runtime};
use crate::symcore::expr::Expr;
use crate::symcore::solver::SatResult;
use crate::symcore::state::SymState;

pub use checks::{checked_accounts, continue_to_exit, has_authority, has_signer_check, SignerCheck};
pub use exploit::{replay, synthesize_exploit, Exploit, Replay, Sidecar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum FindingKind {
    #[serde(rename = "msc")]
    Msc,
    #[serde(rename = "moc")]
    Moc,
    #[serde(rename = "moc-msc")]
    MocMsc,
    #[serde(rename = "acpi")]
    Acpi,
}

impl FindingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FindingKind::Msc => "msc",
            FindingKind::Moc => "moc",
            FindingKind::MocMsc => "moc-msc",
            FindingKind::Acpi => "acpi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Confidence {
    High,
    /// A solver timeout or a forced concretization touched the path.
    Degraded,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AccountEvidence {
    pub index: usize,
    pub read: Vec<&'static str>,
    pub checks: Vec<&'static str>,
    pub weak_key_check: bool,
    pub signer_required: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Evidence {
    pub action: ActionKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub account: Option<usize>,
    pub accounts: Vec<AccountEvidence>,
    pub signer_check: bool,
    pub authority: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_constant: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_owner_checked: Option<bool>,
}

/// Replayable identification of the analysed path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct PathId {
    pub seed: u64,
    pub trace: Vec<(u64, bool)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Finding {
    pub kind: FindingKind,
    pub site: u64,
    pub unchecked_accounts: Vec<usize>,
    pub evidence: Evidence,
    pub confidence: Confidence,
    #[serde(skip)]
    pub exploit: Option<Exploit>,
    pub path: PathId,
}

impl Finding {
    pub fn key(&self) -> (FindingKind, u64, Vec<usize>) {
        (self.kind, self.site, self.unchecked_accounts.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Note {
    pub site: u64,
    pub kind: String,
    pub detail: String,
}

#[derive(Default)]
pub struct Verdicts {
    pub findings: Vec<Finding>,
    pub notes: Vec<Note>,
    /// Account writes dropped because no continuation exited gracefully.
    pub discarded: usize,
}

pub struct OracleCtx<'a> {
    pub rt: &'a Runtime,
    pub cfg: &'a Cfg,
    /// States that cannot reach an exit or CPI are dropped during continuation.
    pub prune: Option<&'a ReachabilityIndex>,
    pub continuation_budget: Duration,
    pub deadline: Instant,
    pub seed: u64,
}

fn confidence(st: &SymState, extra: bool) -> Confidence {
    if st.degraded || st.concretizations > 0 || extra {
        Confidence::Degraded
    } else {
        Confidence::High
    }
}

fn evidence_for(ctx: &OracleCtx, st: &SymState, action: &CriticalAction, signer: &SignerCheck) -> Vec<AccountEvidence> {
    let mut idx: BTreeSet<usize> = st.ledger.read_set();
    idx.extend(st.ledger.checked_set());
    idx.extend(action.account);
    idx.into_iter()
        .map(|i| {
            let f = &st.ledger.accounts[i];
            let mut read = Vec::new();
            for (on, name) in [(f.key_read, "key"), (f.owner_read, "owner"), (f.data_read, "data"), (f.lamports_read, "lamports")] {
                if on {
                    read.push(name);
                }
            }
            AccountEvidence {
                index: i,
                read,
                checks: f.marks(),
                weak_key_check: f.weak_key_check,
                signer_required: signer.present && checks::signer_forced(ctx, st, i),
            }
        })
        .collect()
}

/// No continuation of the path exited gracefully, so the write would be
/// rolled back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Discarded;

/// Classify an account write. The path is first continued to a graceful
/// exit; the exit state's ledger decides which accounts count as checked.
pub fn classify_write(
    ctx: &OracleCtx,
    action: &CriticalAction,
    st: &SymState,
    notes: &mut Vec<Note>,
) -> Result<Option<Finding>, Discarded> {
    let limit = Instant::now() + ctx.continuation_budget;
    let exit = continue_to_exit(ctx, st.clone(), limit.min(ctx.deadline)).ok_or(Discarded)?;
    for (i, f) in exit.ledger.accounts.iter().enumerate() {
        if f.weak_key_check && !f.key_trusted() {
            notes.push(Note {
                site: action.site,
                kind: "weak-key-check".into(),
                detail: format!("account {i} key compared only with data of an unchecked account"),
            });
        }
    }
    let ledger = &exit.ledger;
    let unchecked: Vec<usize> = ledger.read_set().difference(&ledger.checked_set()).copied().collect();
    let authority = has_authority(ctx, &exit);
    let signer = has_signer_check(ctx, &exit);
    let moc = !unchecked.is_empty() && !authority;
    let msc = !signer.present;
    let kind = match (moc, msc) {
        (true, true) => FindingKind::MocMsc,
        (true, false) => FindingKind::Moc,
        (false, true) => FindingKind::Msc,
        (false, false) => return Ok(None),
    };
    let evidence = Evidence {
        action: action.kind,
        account: action.account,
        accounts: evidence_for(ctx, &exit, action, &signer),
        signer_check: signer.present,
        authority,
        target_constant: None,
        target_owner_checked: None,
    };
    let witness = if msc { signer.witness.clone() } else { None };
    let exploit = synthesize_exploit(ctx, &exit, witness, action.site);
    Ok(Some(Finding {
        kind,
        site: action.site,
        unchecked_accounts: if moc { unchecked } else { Vec::new() },
        evidence,
        confidence: confidence(&exit, signer.degraded),
        exploit,
        path: PathId { seed: ctx.seed, trace: exit.trace.clone() },
    }))
}

/// Whether the 256-bit target has exactly one value under the path.
fn target_is_constant(ctx: &OracleCtx, st: &SymState, target: &[Expr; 4]) -> Option<bool> {
    if target.iter().all(Expr::is_const) {
        return Some(true);
    }
    let cs = st.query_constraints();
    let solver = ctx.rt.solver.as_ref();
    let model = match solver.check(&cs) {
        SatResult::Sat(m) => m,
        SatResult::Unsat => return Some(true),
        SatResult::Unknown => return None,
    };
    let value: Vec<Expr> =
        target.iter().map(|l| Expr::constant(l.eval(&|n| model.get(n).copied()), 64)).collect();
    let differs = Expr::any(target.iter().zip(&value).map(|(l, v)| l.ne(v)));
    solver.is_sat(&cs, &differs).map(|sat| !sat)
}

/// Target bytes come only from trusted keys, derived addresses or data of
/// checked accounts.
fn target_owner_checked(st: &SymState, target: &[Expr; 4]) -> bool {
    let vars: BTreeSet<_> = target.iter().flat_map(|l| l.vars().iter().cloned().collect::<Vec<_>>()).collect();
    !vars.is_empty()
        && vars.iter().all(|v| match origin(v) {
            Origin::Data(j) => st.ledger.accounts.get(j).is_some_and(|f| f.is_checked()),
            Origin::Key(i) => st.ledger.accounts.get(i).is_some_and(|f| f.key_trusted()),
            Origin::Pda => true,
            _ => false,
        })
}

fn target_accounts(st: &SymState, target: &[Expr; 4]) -> Vec<usize> {
    let mut out = BTreeSet::new();
    for l in target {
        for v in l.vars().iter() {
            if let Origin::Key(i) | Origin::Data(i) = origin(v) {
                if !st.ledger.accounts.get(i).is_some_and(|f| f.is_checked()) {
                    out.insert(i);
                }
            }
        }
    }
    out.into_iter().collect()
}

pub fn classify_cpi(ctx: &OracleCtx, action: &CriticalAction, st: &SymState, notes: &mut Vec<Note>) -> Option<Finding> {
    let target = action.target.as_ref()?;
    let constant = target_is_constant(ctx, st, target);
    if constant == Some(true) {
        return None;
    }
    let owner = target_owner_checked(st, target);
    let signer = has_signer_check(ctx, st);
    match (owner, signer.present) {
        (true, true) => None,
        (true, false) | (false, true) => {
            let guard = if owner { "owner-checked target" } else { "signer check" };
            notes.push(Note {
                site: action.site,
                kind: "cpi-single-guard".into(),
                detail: format!("cross-program invocation guarded only by {guard}"),
            });
            None
        }
        (false, false) => {
            let evidence = Evidence {
                action: action.kind,
                account: None,
                accounts: evidence_for(ctx, st, action, &signer),
                signer_check: false,
                authority: false,
                target_constant: Some(false),
                target_owner_checked: Some(false),
            };
            let exploit = synthesize_exploit(ctx, st, signer.witness.clone(), action.site);
            Some(Finding {
                kind: FindingKind::Acpi,
                site: action.site,
                unchecked_accounts: target_accounts(st, target),
                evidence,
                confidence: confidence(st, constant.is_none() || signer.degraded),
                exploit,
                path: PathId { seed: ctx.seed, trace: st.trace.clone() },
            })
        }
    }
}

/// Run the oracle matching the action's kind.
pub fn evaluate(ctx: &OracleCtx, action: &CriticalAction, st: &SymState) -> Verdicts {
    let mut v = Verdicts::default();
    match action.kind {
        ActionKind::AccountWrite => match classify_write(ctx, action, st, &mut v.notes) {
            Ok(f) => v.findings.extend(f),
            Err(Discarded) => v.discarded += 1,
        },
        ActionKind::Cpi => {
            if let Some(f) = classify_cpi(ctx, action, st, &mut v.notes) {
                v.findings.push(f);
            }
        }
    }
    v
}
