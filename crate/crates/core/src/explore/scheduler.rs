//! State pools and the five-rule selector.
//!
//! States that entered the account-deserialization loop live in a separate
//! pool and are parked at the loop's exit test until every sibling has
//! arrived, then merged. Everything else goes through `select_next`.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bytecode::analysis::MergePoint;
use crate::bytecode::cfg::Cfg;
use crate::symcore::state::{merge, SymState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rule {
    CurrentUncovered,
    DeferredUncovered,
    CurrentAlive,
    MostRecentFork,
    Random,
}

/// Where a state stands relative to the deserialization loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    BeforeLoop,
    /// Inside the loop; `depth` is the call depth of the loop's function.
    InLoop { depth: usize },
    AfterLoop,
}

#[derive(Clone)]
pub struct Entry {
    pub st: SymState,
    pub phase: Phase,
    /// Strategy target already reached on this path.
    pub hit: bool,
}

impl Entry {
    pub fn new(st: SymState) -> Entry {
        Entry { st, phase: Phase::BeforeLoop, hit: false }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct MergeEvent {
    pub pc: u64,
    pub incoming: usize,
    pub outgoing: usize,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SchedStats {
    pub states_created: u64,
    pub states_stepped: u64,
    pub steps: u64,
    pub pruned: u64,
    pub evicted: u64,
    pub merges: Vec<MergeEvent>,
    /// States that left the deserialization loop.
    pub loop_exits: u64,
    pub max_deferred: usize,
    pub rules: [u64; 5],
}

pub struct Scheduler {
    pub current: Option<Entry>,
    pub deferred: Vec<Entry>,
    fork_counter: u64,
    in_loop: Vec<Entry>,
    parked: Vec<Entry>,
    rng: ChaCha8Rng,
    pub random_only: bool,
    pub merge: Option<MergePoint>,
    pub merging: bool,
    pub deferred_cap: usize,
    pub stats: SchedStats,
}

impl Scheduler {
    pub fn new(seed: u64, merge: Option<MergePoint>, merging: bool) -> Scheduler {
        Scheduler {
            current: None,
            deferred: Vec::new(),
            fork_counter: 0,
            in_loop: Vec::new(),
            parked: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            random_only: false,
            merge,
            merging,
            deferred_cap: 10_000,
            stats: SchedStats::default(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_none() && self.deferred.is_empty() && self.in_loop.is_empty() && self.parked.is_empty()
    }

    pub fn pending(&self) -> usize {
        self.deferred.len() + self.in_loop.len() + self.parked.len()
    }

    /// Queue a freshly created state as the most recent fork.
    pub fn defer(&mut self, mut e: Entry) {
        self.fork_counter += 1;
        e.st.fork_seq = self.fork_counter;
        self.stats.states_created += 1;
        self.push(e);
    }

    fn push(&mut self, e: Entry) {
        if matches!(e.phase, Phase::InLoop { .. }) {
            self.in_loop.push(e);
            return;
        }
        self.deferred.push(e);
        if self.deferred.len() > self.deferred_cap {
            // Evict the state with the largest constraint set.
            let (i, _) = self
                .deferred
                .iter()
                .enumerate()
                .max_by_key(|(i, e)| (e.st.constraints.len(), std::cmp::Reverse(*i)))
                .unwrap();
            self.deferred.remove(i);
            self.stats.evicted += 1;
        }
        self.stats.max_deferred = self.stats.max_deferred.max(self.deferred.len());
    }

    /// Set the state that continues on the current path.
    pub fn keep(&mut self, e: Entry) {
        if matches!(e.phase, Phase::InLoop { .. }) {
            self.in_loop.push(e);
        } else {
            self.current = Some(e);
        }
    }

    /// Next state to step, or `None` once every state is terminal.
    pub fn select_next(&mut self, covered: &BTreeSet<u64>) -> Option<Entry> {
        loop {
            if let Some(e) = self.in_loop.pop() {
                return Some(e);
            }
            if self.parked.is_empty() {
                break;
            }
            self.merge_parked();
        }
        let (e, rule) = self.pick(covered)?;
        self.stats.rules[rule as usize] += 1;
        Some(e)
    }

    fn pick(&mut self, covered: &BTreeSet<u64>) -> Option<(Entry, Rule)> {
        let current = self.current.take().filter(|e| e.st.is_active());
        if let Some(c) = &current {
            if !covered.contains(&c.st.pc) {
                return current.map(|c| (c, Rule::CurrentUncovered));
            }
        }
        let uncovered = self
            .deferred
            .iter()
            .enumerate()
            .filter(|(_, e)| !covered.contains(&e.st.pc))
            .max_by_key(|(_, e)| e.st.fork_seq)
            .map(|(i, _)| i);
        if let Some(i) = uncovered {
            let e = self.deferred.remove(i);
            if let Some(c) = current {
                self.push(c);
            }
            return Some((e, Rule::DeferredUncovered));
        }
        if let Some(c) = current {
            return Some((c, Rule::CurrentAlive));
        }
        if self.deferred.is_empty() {
            return None;
        }
        if self.random_only {
            let i = self.rng.gen_range(0..self.deferred.len());
            return Some((self.deferred.remove(i), Rule::Random));
        }
        let top = self.deferred.iter().map(|e| e.st.fork_seq).max().unwrap();
        let ties: Vec<usize> =
            self.deferred.iter().enumerate().filter(|(_, e)| e.st.fork_seq == top).map(|(i, _)| i).collect();
        if ties.len() == 1 {
            return Some((self.deferred.remove(ties[0]), Rule::MostRecentFork));
        }
        let i = ties[self.rng.gen_range(0..ties.len())];
        Some((self.deferred.remove(i), Rule::Random))
    }

    /// Classify a stepped state against the loop: park it at the merge
    /// point, or hybridize it once it leaves. Returns `None` if parked.
    pub fn track_phase(&mut self, cfg: &Cfg, mut e: Entry) -> Option<Entry> {
        let Some(mp) = &self.merge else { return Some(e) };
        if !e.st.is_active() {
            return Some(e);
        }
        let at_merge = e.st.pc == mp.address;
        match e.phase {
            Phase::BeforeLoop if at_merge => {
                e.phase = Phase::InLoop { depth: e.st.depth() };
                return self.park(e);
            }
            Phase::InLoop { depth } => {
                if at_merge && e.st.depth() == depth {
                    return self.park(e);
                }
                let d = e.st.depth();
                let outside = cfg.block_of(e.st.pc).is_none_or(|b| !mp.loop_blocks.contains(&b));
                if d < depth || (d == depth && outside) {
                    e.phase = Phase::AfterLoop;
                    e.st.hybridize();
                    self.stats.loop_exits += 1;
                }
            }
            _ => {}
        }
        Some(e)
    }

    fn park(&mut self, e: Entry) -> Option<Entry> {
        if !self.merging {
            return Some(e);
        }
        self.parked.push(e);
        None
    }

    fn merge_parked(&mut self) {
        let parked = std::mem::take(&mut self.parked);
        let incoming = parked.len();
        let pc = parked[0].st.pc;
        // Group by pc, call stack and input layout; keep first-arrival order.
        let mut groups: Vec<Vec<Entry>> = Vec::new();
        for e in parked {
            let key = merge_key(&e);
            match groups.iter_mut().find(|g| merge_key(&g[0]) == key) {
                Some(g) => g.push(e),
                None => groups.push(vec![e]),
            }
        }
        self.stats.merges.push(MergeEvent { pc, incoming, outgoing: groups.len() });
        for g in groups.into_iter().rev() {
            let phase = g[0].phase;
            let hit = g.iter().any(|e| e.hit);
            let states: Vec<SymState> = g.into_iter().map(|e| e.st).collect();
            let merged = merge(states);
            self.in_loop.push(Entry { st: merged, phase, hit });
        }
    }
}

fn merge_key(e: &Entry) -> (u64, Vec<u64>, String, Vec<Option<usize>>) {
    (
        e.st.pc,
        e.st.frames.iter().map(|f| f.ret).collect(),
        e.st.regs[10].to_string(),
        e.st.layout.dup_of.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::bytecode::asm::assemble;
    use crate::bytecode::image::load_program;
    use crate::runtime::layout::InputLayout;
    use crate::runtime::Runtime;
    use crate::symcore::solver::{Solver, SolverConfig};

    fn state(pc: u64) -> SymState {
        let asm = assemble("entrypoint:\n mov64 r0, 0\n mov64 r0, 0\n mov64 r0, 0\n exit\n").unwrap();
        let image = Arc::new(load_program(&asm.to_elf()).unwrap());
        let rt = Runtime::new(image, Arc::new(Solver::new(SolverConfig::default())), InputLayout::new(1, 8, [0; 32]).unwrap());
        let mut s = rt.initial_state_for(rt.layout.clone());
        s.pc = pc;
        s
    }

    fn sched() -> Scheduler {
        Scheduler::new(7, None, true)
    }

    #[test]
    fn keeps_current_on_fresh_code() {
        let mut s = sched();
        s.defer(Entry::new(state(8)));
        s.keep(Entry::new(state(0)));
        let covered = BTreeSet::from([8]);
        let e = s.select_next(&covered).unwrap();
        assert_eq!(e.st.pc, 0);
        assert_eq!(s.stats.rules[Rule::CurrentUncovered as usize], 1);
    }

    #[test]
    fn prefers_uncovered_deferred() {
        let mut s = sched();
        s.defer(Entry::new(state(16)));
        s.defer(Entry::new(state(8)));
        s.keep(Entry::new(state(0)));
        let covered = BTreeSet::from([0, 8]);
        assert_eq!(s.select_next(&covered).unwrap().st.pc, 16);
        // The displaced current state went back to the pool.
        assert_eq!(s.deferred.len(), 2);
    }

    #[test]
    fn most_recent_fork_when_all_covered() {
        let mut s = sched();
        s.defer(Entry::new(state(8)));
        s.defer(Entry::new(state(16)));
        let mut done = Entry::new(state(0));
        done.st.status = crate::symcore::state::Status::Exited(crate::symcore::expr::Expr::constant(0, 64));
        s.keep(done);
        let covered = BTreeSet::from([0, 8, 16]);
        let e = s.select_next(&covered).unwrap();
        assert_eq!(e.st.pc, 16);
        assert_eq!(e.st.fork_seq, 2);
    }

    #[test]
    fn random_pick_is_seeded() {
        let run = |seed| {
            let mut s = Scheduler::new(seed, None, true);
            s.random_only = true;
            for pc in [0, 8, 16, 24] {
                s.defer(Entry::new(state(pc)));
            }
            let covered = BTreeSet::from([0, 8, 16, 24]);
            (0..4).map(|_| s.select_next(&covered).unwrap().st.pc).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
    }

    #[test]
    fn empty_scheduler_selects_nothing() {
        assert!(sched().select_next(&BTreeSet::new()).is_none());
    }
}
