//! Static "can this state still get there" index over the CFG.

use std::collections::{BTreeSet, VecDeque};

use crate::bytecode::cfg::{CallKind, Cfg};
use crate::symcore::state::SymState;

/// Over-approximates, per block, whether a target address is reachable.
/// A block counts as reaching if some function containing it reaches a
/// target, either directly or through a call.
#[derive(Clone, Debug, Default)]
pub struct ReachabilityIndex {
    pub targets: BTreeSet<u64>,
    target_blocks: BTreeSet<u64>,
    /// Functions that contain a target, transitively through callees.
    hits: BTreeSet<u64>,
    reach: BTreeSet<u64>,
    /// Blocks from which their function can return.
    returns: BTreeSet<u64>,
}

impl ReachabilityIndex {
    pub fn build(cfg: &Cfg, targets: &BTreeSet<u64>) -> ReachabilityIndex {
        let target_blocks: BTreeSet<u64> = targets.iter().filter_map(|t| cfg.block_of(*t)).collect();
        let has_indirect = cfg.call_sites.values().any(|k| matches!(k, CallKind::Indirect));

        let mut hits: BTreeSet<u64> = cfg
            .functions
            .values()
            .filter(|f| f.blocks.iter().any(|b| target_blocks.contains(b)))
            .map(|f| f.entry)
            .collect();
        loop {
            let any_hit = !hits.is_empty();
            let before = hits.len();
            for f in cfg.functions.values() {
                if hits.contains(&f.entry) {
                    continue;
                }
                let via_call = f.calls.iter().any(|(_, g)| hits.contains(g));
                let via_indirect = has_indirect
                    && any_hit
                    && f.blocks.iter().any(|b| matches!(cfg.call_sites.get(&cfg.blocks[b].last), Some(CallKind::Indirect)));
                if via_call || via_indirect {
                    hits.insert(f.entry);
                }
            }
            if hits.len() == before {
                break;
            }
        }

        let mut reach = BTreeSet::new();
        let mut returns = BTreeSet::new();
        for f in cfg.functions.values() {
            let calls_hit = |b: u64| match cfg.call_sites.get(&cfg.blocks[&b].last) {
                Some(CallKind::Function(g)) => hits.contains(g),
                Some(CallKind::Indirect) => !hits.is_empty(),
                _ => false,
            };
            let seeds = f.blocks.iter().copied().filter(|b| target_blocks.contains(b) || calls_hit(*b));
            reach.extend(backward(cfg, &f.blocks, seeds));
            returns.extend(backward(cfg, &f.blocks, f.exits.iter().copied()));
        }
        ReachabilityIndex { targets: targets.clone(), target_blocks, hits, reach, returns }
    }

    pub fn is_empty(&self) -> bool {
        self.target_blocks.is_empty()
    }

    pub fn function_hits(&self, f: u64) -> bool {
        self.hits.contains(&f)
    }

    pub fn block_reaches(&self, block: u64) -> bool {
        self.reach.contains(&block)
    }

    /// Whether the state can reach a target from its block, from its
    /// function's callees, or after returning into a caller.
    pub fn still_reachable(&self, cfg: &Cfg, st: &SymState) -> bool {
        let Some(mut b) = cfg.block_of(st.pc) else { return false };
        let mut frames = st.frames.iter().rev();
        loop {
            if self.reach.contains(&b) {
                return true;
            }
            if !self.returns.contains(&b) {
                return false;
            }
            match frames.next().and_then(|f| cfg.block_of(f.ret)) {
                Some(r) => b = r,
                None => return false,
            }
        }
    }
}

/// Blocks of `within` that reach one of `seeds` over intraprocedural edges.
fn backward(cfg: &Cfg, within: &BTreeSet<u64>, seeds: impl Iterator<Item = u64>) -> BTreeSet<u64> {
    let mut seen: BTreeSet<u64> = BTreeSet::new();
    let mut queue: VecDeque<u64> = VecDeque::new();
    for s in seeds {
        if seen.insert(s) {
            queue.push_back(s);
        }
    }
    let empty = Vec::new();
    while let Some(b) = queue.pop_front() {
        for &(p, kind) in cfg.preds.get(&b).unwrap_or(&empty) {
            if kind.is_intra() && within.contains(&p) && seen.insert(p) {
                queue.push_back(p);
            }
        }
    }
    seen
}

/// Graceful exits of the entry function plus CPI sites: the states worth
/// keeping regardless of strategy.
pub fn global_targets(cfg: &Cfg, entry: u64, cpi_sites: &BTreeSet<u64>) -> BTreeSet<u64> {
    let mut out: BTreeSet<u64> = cpi_sites.clone();
    if let Some(f) = cfg.functions.get(&entry) {
        out.extend(f.exits.iter().map(|b| cfg.blocks[b].last));
    }
    out
}


#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::cfg::build_cfg;
    use crate::bytecode::image::load_program;
    use crate::runtime::layout::InputLayout;
    use crate::runtime::Runtime;
    use crate::symcore::state::Frame;
    use crate::symcore::{Solver, SolverConfig};

    const SRC: &str = "entrypoint:
    ldxb r2, [r1+96]
    jeq r2, 0, bad
    call helper
    mov64 r0, 0
    exit
bad:
    call panic_handler
    exit
helper:
    mov64 r0, 1
    exit
panic_handler:
    mov64 r1, 0
    call abort
    exit";

    fn setup() -> (Runtime, Cfg, ReachabilityIndex) {
        let image = load_program(&assemble(SRC).unwrap().to_elf()).unwrap();
        let cfg = build_cfg(&image).unwrap();
        let index = ReachabilityIndex::build(&cfg, &global_targets(&cfg, image.entry, &BTreeSet::new()));
        let rt = Runtime::new(
            Arc::new(image),
            Arc::new(Solver::new(SolverConfig::default())),
            InputLayout::new(1, 8, [0; 32]).unwrap(),
        );
        (rt, cfg, index)
    }

    fn state_in(rt: &Runtime, label: &str, ret: Option<u64>) -> SymState {
        let mut st = rt.initial_state_for(rt.layout.clone());
        st.pc = *rt.image.symbols.iter().find(|(_, n)| n.as_str() == label).unwrap().0;
        if let Some(ret) = ret {
            st.frames.push(Frame { ret, saved: std::array::from_fn(|i| st.regs[6 + i].clone()), fp: 0 });
        }
        st
    }

    #[test]
    fn panic_handler_cannot_reach_graceful_exit() {
        let (rt, cfg, index) = setup();
        // `bad` is the sixth instruction; its call never returns.
        let bad = 40;
        let st = state_in(&rt, "panic_handler", Some(bad + 8));
        assert!(!index.still_reachable(&cfg, &st));
        assert!(!index.block_reaches(cfg.block_of(bad).unwrap()));
    }

    #[test]
    fn helper_reaches_through_its_return_frame() {
        let (rt, cfg, index) = setup();
        let st = state_in(&rt, "helper", Some(32));
        assert!(index.still_reachable(&cfg, &st));
        let orphan = state_in(&rt, "helper", None);
        assert!(!index.still_reachable(&cfg, &orphan));
        assert!(index.still_reachable(&cfg, &state_in(&rt, "entrypoint", None)));
    }
}
