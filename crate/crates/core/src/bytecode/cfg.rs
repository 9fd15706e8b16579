//! Control-flow and call graphs.
//!
//! Blocks end at branches, `exit`, internal calls and calls to syscalls that
//! never return. Calls to internal functions produce a `Call` edge to the
//! callee and, when the callee can return, a `FallThrough` edge to the return
//! site plus `Return` edges from the callee's exit blocks. Dominators, loops
//! and post-dominators are computed per function over intraprocedural edges.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use super::image::ProgramImage;
use super::isa::{Instruction, Op};

/// Syscalls that terminate the program.
pub const NORETURN_SYSCALLS: &[&str] = &["abort", "sol_panic_"];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CfgError {
    #[error("instruction at {site:#x} targets {target:#x}, which is not an instruction boundary")]
    MalformedTarget { site: u64, target: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EdgeKind {
    FallThrough,
    Taken,
    Call,
    Return,
}

impl EdgeKind {
    pub fn is_intra(self) -> bool {
        matches!(self, EdgeKind::FallThrough | EdgeKind::Taken)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub start: u64,
    /// Address of the last instruction.
    pub last: u64,
    /// Address after the last instruction.
    pub end: u64,
}

/// How a call instruction is resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CallKind {
    Function(u64),
    Syscall(String),
    /// Register-indirect; any function may be the target.
    Indirect,
    Unresolved(u32),
}

#[derive(Clone, Debug, Default)]
pub struct Function {
    pub entry: u64,
    /// Block starts reachable from the entry over intraprocedural edges.
    pub blocks: BTreeSet<u64>,
    /// Blocks ending in `exit`.
    pub exits: BTreeSet<u64>,
    /// (call site, callee entry) pairs for internal calls.
    pub calls: Vec<(u64, u64)>,
    pub returns: bool,
    /// Immediate dominators keyed by block start; the entry maps to itself.
    pub idom: BTreeMap<u64, u64>,
    /// Immediate post-dominators over graceful exits; blocks that cannot
    /// reach an `exit` are absent. `None` means the virtual exit.
    pub ipdom: BTreeMap<u64, Option<u64>>,
    /// Loop header -> body blocks (header included).
    pub loops: BTreeMap<u64, BTreeSet<u64>>,
}

impl Function {
    pub fn dominates(&self, a: u64, mut b: u64) -> bool {
        loop {
            if a == b {
                return true;
            }
            match self.idom.get(&b) {
                Some(&d) if d != b => b = d,
                _ => return false,
            }
        }
    }

    pub fn post_dominates(&self, a: u64, mut b: u64) -> bool {
        loop {
            if a == b {
                return true;
            }
            match self.ipdom.get(&b) {
                Some(Some(d)) => b = *d,
                _ => return false,
            }
        }
    }

    /// Innermost loop containing `block`, by body size.
    pub fn innermost_loop(&self, block: u64) -> Option<u64> {
        self.loops
            .iter()
            .filter(|(_, body)| body.contains(&block))
            .min_by_key(|(h, body)| (body.len(), **h))
            .map(|(h, _)| *h)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Cfg {
    pub blocks: BTreeMap<u64, Block>,
    pub succs: BTreeMap<u64, Vec<(u64, EdgeKind)>>,
    pub preds: BTreeMap<u64, Vec<(u64, EdgeKind)>>,
    pub functions: BTreeMap<u64, Function>,
    /// Call site -> resolution.
    pub call_sites: BTreeMap<u64, CallKind>,
    /// Caller entry -> callee entries.
    pub callees: BTreeMap<u64, BTreeSet<u64>>,
    /// Callee entry -> caller entries.
    pub callers: BTreeMap<u64, BTreeSet<u64>>,
}

impl Cfg {
    /// Start of the block containing `address`.
    pub fn block_of(&self, address: u64) -> Option<u64> {
        let (start, block) = self.blocks.range(..=address).next_back()?;
        (address < block.end).then_some(*start)
    }

    pub fn successors(&self, block: u64) -> &[(u64, EdgeKind)] {
        self.succs.get(&block).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn intra_successors(&self, block: u64) -> impl Iterator<Item = u64> + '_ {
        self.successors(block).iter().filter(|(_, k)| k.is_intra()).map(|(b, _)| *b)
    }

    pub fn edge_count(&self) -> usize {
        self.succs.values().map(Vec::len).sum()
    }

    /// Functions whose block set contains `block`.
    pub fn functions_containing(&self, block: u64) -> impl Iterator<Item = &Function> + '_ {
        self.functions.values().filter(move |f| f.blocks.contains(&block))
    }

    /// Functions reachable from `root` through the call graph, with depth.
    pub fn call_depths(&self, root: u64) -> BTreeMap<u64, usize> {
        let mut depth = BTreeMap::from([(root, 0usize)]);
        let mut queue = VecDeque::from([root]);
        while let Some(f) = queue.pop_front() {
            let d = depth[&f];
            for &c in self.callees.get(&f).into_iter().flatten() {
                if !depth.contains_key(&c) {
                    depth.insert(c, d + 1);
                    queue.push_back(c);
                }
            }
        }
        depth
    }
}

fn classify_call(image: &ProgramImage, insn: &Instruction) -> Option<CallKind> {
    match insn.op() {
        Op::Call { imm } => Some(if let Some(name) = image.syscall_name(imm) {
            CallKind::Syscall(name.to_string())
        } else if let Some(target) = image.call_target(imm) {
            CallKind::Function(target)
        } else {
            CallKind::Unresolved(imm)
        }),
        Op::Callx { .. } => Some(CallKind::Indirect),
        _ => None,
    }
}

pub fn build_cfg(image: &ProgramImage) -> Result<Cfg, CfgError> {
    let mut cfg = Cfg::default();
    for insn in &image.instructions {
        if let Some(target) = insn.jump_target() {
            if image.index_of(target).is_none() {
                return Err(CfgError::MalformedTarget { site: insn.address, target });
            }
        }
        if let Some(kind) = classify_call(image, insn) {
            cfg.call_sites.insert(insn.address, kind);
        }
    }
    let starts: Vec<u64> =
        image.function_starts.iter().copied().filter(|s| image.index_of(*s).is_some()).collect();

    // Which functions can return: least fixpoint over instruction-level walks.
    let mut returns: BTreeSet<u64> = BTreeSet::new();
    loop {
        let mut changed = false;
        for &f in &starts {
            if !returns.contains(&f) && walk(image, &cfg.call_sites, &returns, &starts, f).1 {
                returns.insert(f);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Leaders and reachable instructions.
    let mut reachable = BTreeSet::new();
    for &f in &starts {
        reachable.extend(walk(image, &cfg.call_sites, &returns, &starts, f).0);
    }
    let mut leaders: BTreeSet<u64> = starts.iter().copied().collect();
    for &addr in &reachable {
        let insn = image.instruction_at(addr).unwrap();
        let ends = ends_block(insn, cfg.call_sites.get(&addr));
        if let Some(t) = insn.jump_target() {
            leaders.insert(t);
        }
        if ends {
            leaders.insert(insn.next_address());
        }
    }
    let mut current = 0u64;
    let mut prev_next = u64::MAX;
    for &addr in &reachable {
        if leaders.contains(&addr) || addr != prev_next {
            current = addr;
        }
        let insn = image.instruction_at(addr).unwrap();
        let block = cfg.blocks.entry(current).or_insert(Block { start: current, last: addr, end: addr });
        block.last = addr;
        block.end = insn.next_address();
        prev_next = insn.next_address();
    }

    // Edges.
    for block in cfg.blocks.values() {
        let insn = image.instruction_at(block.last).unwrap();
        let mut out = Vec::new();
        match (insn.op(), cfg.call_sites.get(&block.last)) {
            (Op::Exit, _) => {}
            (Op::Ja { .. }, _) => out.push((insn.jump_target().unwrap(), EdgeKind::Taken)),
            (Op::Jcond { .. }, _) => {
                out.push((insn.next_address(), EdgeKind::FallThrough));
                out.push((insn.jump_target().unwrap(), EdgeKind::Taken));
            }
            (_, Some(CallKind::Function(t))) => {
                out.push((*t, EdgeKind::Call));
                if returns.contains(t) {
                    out.push((insn.next_address(), EdgeKind::FallThrough));
                }
            }
            (_, Some(CallKind::Indirect)) => {
                for &f in &starts {
                    out.push((f, EdgeKind::Call));
                }
                out.push((insn.next_address(), EdgeKind::FallThrough));
            }
            (_, Some(CallKind::Syscall(name))) if NORETURN_SYSCALLS.contains(&name.as_str()) => {}
            _ => {
                if image.index_of(insn.next_address()).is_some() {
                    out.push((insn.next_address(), EdgeKind::FallThrough));
                }
            }
        }
        cfg.succs.insert(block.start, out);
    }

    // Functions.
    for &f in &starts {
        let mut func = Function { entry: f, returns: returns.contains(&f), ..Default::default() };
        let mut queue = VecDeque::from([f]);
        func.blocks.insert(f);
        while let Some(b) = queue.pop_front() {
            for s in cfg.intra_successors(b).collect::<Vec<_>>() {
                if func.blocks.insert(s) {
                    queue.push_back(s);
                }
            }
        }
        for &b in &func.blocks {
            let block = &cfg.blocks[&b];
            if matches!(image.instruction_at(block.last).unwrap().op(), Op::Exit) {
                func.exits.insert(b);
            }
            if let Some(CallKind::Function(t)) = cfg.call_sites.get(&block.last) {
                func.calls.push((block.last, *t));
            }
        }
        cfg.functions.insert(f, func);
    }
    for func in cfg.functions.values() {
        for &(_, callee) in &func.calls {
            cfg.callees.entry(func.entry).or_default().insert(callee);
            cfg.callers.entry(callee).or_default().insert(func.entry);
        }
    }
    // Return edges from callee exits to the return sites of its callers.
    let mut ret_edges = Vec::new();
    for func in cfg.functions.values() {
        for &(site, callee) in &func.calls {
            let ret = image.instruction_at(site).unwrap().next_address();
            if cfg.blocks.contains_key(&ret) && returns.contains(&callee) {
                for &x in &cfg.functions[&callee].exits {
                    ret_edges.push((x, ret));
                }
            }
        }
    }
    for (x, ret) in ret_edges {
        let list = cfg.succs.entry(x).or_default();
        if !list.contains(&(ret, EdgeKind::Return)) {
            list.push((ret, EdgeKind::Return));
        }
    }
    for (&b, list) in &cfg.succs {
        for &(s, k) in list {
            cfg.preds.entry(s).or_default().push((b, k));
        }
    }

    let entries: Vec<u64> = cfg.functions.keys().copied().collect();
    for f in entries {
        let (idom, ipdom, loops) = {
            let func = &cfg.functions[&f];
            let idom = dominators(&cfg, func);
            let ipdom = post_dominators(&cfg, func);
            let loops = natural_loops(&cfg, func, &idom);
            (idom, ipdom, loops)
        };
        let func = cfg.functions.get_mut(&f).unwrap();
        func.idom = idom;
        func.ipdom = ipdom;
        func.loops = loops;
    }
    Ok(cfg)
}

fn ends_block(insn: &Instruction, call: Option<&CallKind>) -> bool {
    match insn.op() {
        Op::Exit | Op::Ja { .. } | Op::Jcond { .. } => true,
        Op::Call { .. } | Op::Callx { .. } => match call {
            Some(CallKind::Syscall(name)) => NORETURN_SYSCALLS.contains(&name.as_str()),
            _ => true,
        },
        _ => false,
    }
}

/// Instruction-level walk of one function. Returns the reached addresses and
/// whether an `exit` is reachable.
fn walk(
    image: &ProgramImage,
    calls: &BTreeMap<u64, CallKind>,
    returns: &BTreeSet<u64>,
    starts: &[u64],
    entry: u64,
) -> (BTreeSet<u64>, bool) {
    let mut seen = BTreeSet::new();
    let mut stack = vec![entry];
    let mut exits = false;
    while let Some(addr) = stack.pop() {
        if !seen.insert(addr) {
            continue;
        }
        let Some(insn) = image.instruction_at(addr) else { continue };
        match insn.op() {
            Op::Exit => exits = true,
            Op::Ja { .. } => stack.push(insn.jump_target().unwrap()),
            Op::Jcond { .. } => {
                stack.push(insn.jump_target().unwrap());
                stack.push(insn.next_address());
            }
            _ => {
                let falls = match calls.get(&addr) {
                    Some(CallKind::Function(t)) => returns.contains(t),
                    Some(CallKind::Syscall(n)) => !NORETURN_SYSCALLS.contains(&n.as_str()),
                    Some(CallKind::Indirect) => starts.iter().any(|s| returns.contains(s)),
                    _ => true,
                };
                if falls && image.index_of(insn.next_address()).is_some() {
                    stack.push(insn.next_address());
                }
            }
        }
    }
    (seen, exits)
}

/// Reverse post-order of `func` from `root` following `next`.
fn rpo(root: u64, next: impl Fn(u64) -> Vec<u64>) -> Vec<u64> {
    let mut order = Vec::new();
    let mut seen = BTreeSet::from([root]);
    let mut stack = vec![(root, next(root), 0usize)];
    while let Some((node, succ, i)) = stack.last_mut() {
        if *i < succ.len() {
            let s = succ[*i];
            *i += 1;
            if seen.insert(s) {
                let ns = next(s);
                stack.push((s, ns, 0));
            }
        } else {
            order.push(*node);
            stack.pop();
        }
    }
    order.reverse();
    order
}

/// Cooper-Harvey-Kennedy iterative dominators over an explicit graph.
fn idoms(order: &[u64], preds: impl Fn(u64) -> Vec<u64>) -> BTreeMap<u64, u64> {
    let index: BTreeMap<u64, usize> = order.iter().enumerate().map(|(i, b)| (*b, i)).collect();
    let mut doms: Vec<Option<usize>> = vec![None; order.len()];
    if order.is_empty() {
        return BTreeMap::new();
    }
    doms[0] = Some(0);
    let intersect = |doms: &[Option<usize>], mut a: usize, mut b: usize| {
        while a != b {
            while a > b {
                a = doms[a].unwrap();
            }
            while b > a {
                b = doms[b].unwrap();
            }
        }
        a
    };
    let mut changed = true;
    while changed {
        changed = false;
        for i in 1..order.len() {
            let mut new: Option<usize> = None;
            for p in preds(order[i]) {
                let Some(&pi) = index.get(&p) else { continue };
                if doms[pi].is_none() {
                    continue;
                }
                new = Some(match new {
                    None => pi,
                    Some(n) => intersect(&doms, pi, n),
                });
            }
            if new.is_some() && doms[i] != new {
                doms[i] = new;
                changed = true;
            }
        }
    }
    order
        .iter()
        .enumerate()
        .filter_map(|(i, b)| doms[i].map(|d| (*b, order[d])))
        .collect()
}

fn dominators(cfg: &Cfg, func: &Function) -> BTreeMap<u64, u64> {
    let succ = |b: u64| cfg.intra_successors(b).filter(|s| func.blocks.contains(s)).collect::<Vec<_>>();
    let order = rpo(func.entry, succ);
    let preds = |b: u64| {
        cfg.preds
            .get(&b)
            .into_iter()
            .flatten()
            .filter(|(p, k)| k.is_intra() && func.blocks.contains(p))
            .map(|(p, _)| *p)
            .collect::<Vec<_>>()
    };
    idoms(&order, preds)
}

/// Post-dominators with a virtual exit (`u64::MAX`) fed by `exit` blocks.
fn post_dominators(cfg: &Cfg, func: &Function) -> BTreeMap<u64, Option<u64>> {
    const VEXIT: u64 = u64::MAX;
    let rsucc = |b: u64| -> Vec<u64> {
        if b == VEXIT {
            return func.exits.iter().copied().collect();
        }
        cfg.preds
            .get(&b)
            .into_iter()
            .flatten()
            .filter(|(p, k)| k.is_intra() && func.blocks.contains(p))
            .map(|(p, _)| *p)
            .collect()
    };
    let order = rpo(VEXIT, rsucc);
    let rpred = |b: u64| -> Vec<u64> {
        if b == VEXIT {
            return Vec::new();
        }
        let mut v: Vec<u64> = cfg.intra_successors(b).filter(|s| func.blocks.contains(s)).collect();
        if func.exits.contains(&b) {
            v.push(VEXIT);
        }
        v
    };
    idoms(&order, rpred)
        .into_iter()
        .filter(|(b, _)| *b != VEXIT)
        .map(|(b, d)| (b, (d != VEXIT).then_some(d)))
        .collect()
}

fn natural_loops(cfg: &Cfg, func: &Function, idom: &BTreeMap<u64, u64>) -> BTreeMap<u64, BTreeSet<u64>> {
    let dom = |a: u64, mut b: u64| loop {
        if a == b {
            return true;
        }
        match idom.get(&b) {
            Some(&d) if d != b => b = d,
            _ => return false,
        }
    };
    let mut loops: BTreeMap<u64, BTreeSet<u64>> = BTreeMap::new();
    for &b in &func.blocks {
        if !idom.contains_key(&b) {
            continue;
        }
        for h in cfg.intra_successors(b) {
            if func.blocks.contains(&h) && dom(h, b) {
                let body = loops.entry(h).or_insert_with(|| BTreeSet::from([h]));
                let mut stack = vec![b];
                while let Some(n) = stack.pop() {
                    if body.insert(n) {
                        for (p, k) in cfg.preds.get(&n).into_iter().flatten() {
                            if k.is_intra() && func.blocks.contains(p) {
                                stack.push(*p);
                            }
                        }
                    }
                }
            }
        }
    }
    loops
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::image::load_program;

    fn cfg_of(src: &str) -> (ProgramImage, Cfg) {
        let image = load_program(&assemble(src).unwrap().to_elf()).unwrap();
        let cfg = build_cfg(&image).unwrap();
        (image, cfg)
    }

    #[test]
    fn straight_line_is_one_block() {
        let (_, cfg) = cfg_of("mov64 r0, 1\nadd64 r0, 2\nexit");
        assert_eq!(cfg.blocks.len(), 1);
        assert_eq!(cfg.edge_count(), 0);
    }

    #[test]
    fn conditional_has_two_successors() {
        let (_, cfg) = cfg_of("jeq r1, 0, +1\nmov64 r0, 1\nexit");
        assert_eq!(cfg.successors(0).len(), 2);
        assert_eq!(cfg.blocks.len(), 3);
    }

    #[test]
    fn counted_loop_detected() {
        let (_, cfg) = cfg_of(
            "entrypoint:\n mov64 r2, 0\nhead:\n jge r2, 4, done\n ldxb r3, [r1+0]\n jne r3, 0xff, skip\n add64 r1, 1\nskip:\n add64 r2, 1\n ja head\ndone:\n exit",
        );
        let f = &cfg.functions[&0];
        assert_eq!(f.loops.len(), 1);
        let (&h, body) = f.loops.iter().next().unwrap();
        assert_eq!(h, 8);
        assert!(body.contains(&cfg.block_of(24).unwrap()));
        assert!(f.post_dominates(8, cfg.block_of(24).unwrap()));
    }

    #[test]
    fn panicking_callee_has_no_fallthrough() {
        let (_, cfg) = cfg_of("entrypoint:\n call fail\n exit\nfail:\n call abort\n exit");
        let fail = 16;
        assert!(!cfg.functions[&fail].returns);
        assert_eq!(cfg.successors(0), &[(fail, EdgeKind::Call)]);
        assert!(!cfg.blocks.contains_key(&8));
    }

    #[test]
    fn call_and_return_edges() {
        let (_, cfg) = cfg_of("entrypoint:\n call f\n exit\nf:\n mov64 r0, 0\n exit");
        assert!(cfg.successors(0).contains(&(16, EdgeKind::Call)));
        assert!(cfg.successors(16).contains(&(8, EdgeKind::Return)));
        assert_eq!(cfg.callers[&16], BTreeSet::from([0]));
    }

    #[test]
    fn rejects_wild_branch() {
        let image = ProgramImage::from_text(
            [[0x05u8, 0, 0x10, 0, 0, 0, 0, 0], [0x95, 0, 0, 0, 0, 0, 0, 0]].concat(),
            0,
            Default::default(),
        )
        .unwrap();
        assert!(matches!(build_cfg(&image), Err(CfgError::MalformedTarget { .. })));
    }
}
