//! Transaction context model: symbolic input, syscalls and the account ledger.

pub mod layout;
pub mod ledger;
pub mod syscalls;

use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bytecode::image::ProgramImage;
use crate::bytecode::interp::{MM_INPUT_START, MM_STACK_START, STACK_FRAME_SIZE};
use crate::symcore::expr::Expr;
use crate::symcore::memory::Memory;
use crate::symcore::solver::Solver;
use crate::symcore::state::{Env, SymState};

use layout::{Field, InputLayout, Location};
use ledger::Ledger;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    AccountWrite,
    Cpi,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CriticalAction {
    pub kind: ActionKind,
    pub site: u64,
    pub account: Option<usize>,
    pub field: Option<Field>,
    /// CPI target key as four little-endian 64-bit limbs.
    pub target: Option<[Expr; 4]>,
    pub handed: Vec<usize>,
    pub state_id: u64,
}

/// Program id used for an ELF: the SHA-256 of the file.
pub fn program_id_for(elf: &[u8]) -> [u8; 32] {
    Sha256::digest(elf).into()
}

pub struct Runtime {
    pub image: Arc<ProgramImage>,
    pub solver: Arc<Solver>,
    pub layout: Arc<InputLayout>,
    pub skip_sites: BTreeSet<u64>,
    pub resolve_limit: usize,
    ids: AtomicU64,
    fresh: AtomicU64,
    pub unmodeled: Mutex<BTreeSet<String>>,
}

impl Runtime {
    pub fn new(image: Arc<ProgramImage>, solver: Arc<Solver>, layout: InputLayout) -> Runtime {
        Runtime {
            image,
            solver,
            layout: Arc::new(layout),
            skip_sites: BTreeSet::new(),
            resolve_limit: 4,
            ids: AtomicU64::new(0),
            fresh: AtomicU64::new(0),
            unmodeled: Mutex::new(BTreeSet::new()),
        }
    }

    /// Initial state for one input layout.
    pub fn initial_state_for(&self, layout: Arc<InputLayout>) -> SymState {
        let input = layout.build_symbolic();
        let mem = Memory::new(&self.image, input.bytes);
        SymState::new(
            self.next_id(),
            self.image.entry,
            mem,
            MM_INPUT_START,
            MM_STACK_START + STACK_FRAME_SIZE,
            input.constraints,
            input.pins,
            Ledger::new(layout.accounts),
            layout,
        )
    }

    /// One initial state, or two when the last slot may be a duplicate.
    pub fn initial_states(&self, duplicate_slot: bool) -> Vec<SymState> {
        let mut out = vec![self.initial_state_for(self.layout.clone())];
        let n = self.layout.accounts;
        if duplicate_slot && n >= 2 {
            let mut dup = vec![None; n];
            dup[n - 1] = Some(0);
            if let Ok(l) = InputLayout::with_duplicates(n, self.layout.max_data, self.layout.program_id, dup) {
                out.push(self.initial_state_for(Arc::new(l)));
            }
        }
        out
    }

    pub fn fresh_count(&self) -> u64 {
        self.fresh.load(Ordering::Relaxed)
    }
}

impl Env for Runtime {
    fn image(&self) -> &ProgramImage {
        &self.image
    }

    fn solver(&self) -> &Solver {
        &self.solver
    }

    fn next_id(&self) -> u64 {
        self.ids.fetch_add(1, Ordering::Relaxed)
    }

    fn fresh_name(&self, prefix: &str) -> String {
        format!("{prefix}{}", self.fresh.fetch_add(1, Ordering::Relaxed))
    }

    fn resolve_limit(&self) -> usize {
        self.resolve_limit
    }

    fn syscall(&self, st: SymState, name: &str, site: u64) -> Vec<SymState> {
        syscalls::handle(self, st, name, site)
    }

    fn on_access(&self, st: &mut SymState, addr: u64, len: u64, write: bool, site: u64, _value: Option<&Expr>) {
        let layout = st.layout.clone();
        let mut seen = BTreeSet::new();
        for a in addr..addr + len {
            let Some(Location::Account { index, field, .. }) = layout.locate(a - MM_INPUT_START) else { continue };
            if !seen.insert((index, field)) {
                continue;
            }
            if write {
                st.ledger.on_write(index, field, site);
                if matches!(field, Field::Data | Field::Lamports) {
                    let known = st.actions.iter().any(|c| {
                        c.kind == ActionKind::AccountWrite && c.site == site && c.account == Some(index)
                    });
                    if !known {
                        st.actions.push(CriticalAction {
                            kind: ActionKind::AccountWrite,
                            site,
                            account: Some(index),
                            field: Some(field),
                            target: None,
                            handed: Vec::new(),
                            state_id: st.id,
                        });
                    }
                }
            } else {
                st.ledger.on_read(index, field);
            }
        }
    }

    fn on_branch(&self, st: &mut SymState, cond: &Expr, _site: u64) {
        st.ledger.observe_condition(cond);
    }

    fn skip_call(&self, site: u64) -> bool {
        self.skip_sites.contains(&site)
    }
}
