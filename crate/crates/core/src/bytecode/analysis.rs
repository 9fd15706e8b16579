//! Static pre-analyses that steer symbolic execution.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;

use super::cfg::{CallKind, Cfg, Function};
use super::image::ProgramImage;
use super::isa::{AluOp, Instruction, JmpCond, Op, Operand, PqrOp, Width, FRAME_POINTER};

/// How deep below the entry function the account loop is searched for.
pub const MERGE_SEARCH_DEPTH: usize = 3;
/// How deep below the entry function a dispatch tree may be rooted.
pub const DISPATCH_ROOT_DEPTH: usize = 2;

pub const CPI_SYSCALLS: &[&str] = &["sol_invoke_signed_c", "sol_invoke_signed_rust"];
pub const LOG_SYSCALLS: &[&str] = &["sol_log_", "sol_log_data"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MergePoint {
    /// Start of the loop's exit-condition block.
    pub address: u64,
    pub function: u64,
    pub loop_header: u64,
    pub loop_blocks: BTreeSet<u64>,
    /// The `jeq/jne reg, 0xff` instruction.
    pub marker_compare: u64,
}

#[derive(Clone, Debug, Default)]
pub struct StaticMarks {
    pub merge_point: Option<MergePoint>,
    pub dispatch_leaves: BTreeSet<u64>,
    pub cpi_sites: BTreeSet<u64>,
    pub skip_sites: BTreeSet<u64>,
}

impl StaticMarks {
    pub fn compute(image: &ProgramImage, cfg: &Cfg) -> StaticMarks {
        StaticMarks {
            merge_point: find_deserialization_merge_point(image, cfg),
            dispatch_leaves: find_dispatch_leaves(image, cfg),
            cpi_sites: find_cpi_sites(cfg),
            skip_sites: find_format_skip_sites(image, cfg),
        }
    }
}

fn block_insns<'a>(image: &'a ProgramImage, cfg: &Cfg, block: u64) -> Vec<&'a Instruction> {
    let b = &cfg.blocks[&block];
    let (lo, hi) = (image.index_of(b.start).unwrap(), image.index_of(b.last).unwrap());
    image.instructions[lo..=hi].iter().collect()
}

/// Register written by an instruction, if any (calls clobber r0..r5).
fn defs(insn: &Instruction) -> Vec<u8> {
    match insn.op() {
        Op::Lddw { dst, .. } | Op::Ldx { dst, .. } | Op::Alu { dst, .. } | Op::Pqr { dst, .. } => vec![dst],
        Op::Call { .. } | Op::Callx { .. } => (0..=5).collect(),
        _ => vec![],
    }
}

/// Functions reachable from the entry within `depth` call levels, shallowest first.
fn functions_within(cfg: &Cfg, entry: u64, depth: usize) -> Vec<&Function> {
    let mut by_depth: Vec<(usize, u64)> =
        cfg.call_depths(entry).into_iter().filter(|(_, d)| *d <= depth).map(|(f, d)| (d, f)).collect();
    by_depth.sort();
    by_depth.into_iter().filter_map(|(_, f)| cfg.functions.get(&f)).collect()
}

pub fn find_deserialization_merge_point(image: &ProgramImage, cfg: &Cfg) -> Option<MergePoint> {
    let mut candidates: BTreeMap<u64, MergePoint> = BTreeMap::new();
    for func in functions_within(cfg, image.entry, MERGE_SEARCH_DEPTH) {
        for &block in &func.blocks {
            let insns = block_insns(image, cfg, block);
            let last = *insns.last().unwrap();
            let Op::Jcond { cond: JmpCond::Eq | JmpCond::Ne, dst, operand: Operand::Imm(0xff), .. } = last.op()
            else {
                continue;
            };
            // The compared register must hold a byte loaded in this block.
            let loaded = insns.iter().rev().skip(1).find(|i| defs(i).contains(&dst));
            if !matches!(loaded.map(|i| i.op()), Some(Op::Ldx { width: Width::B, .. })) {
                continue;
            }
            let Some(header) = func.innermost_loop(block) else { continue };
            let body = &func.loops[&header];
            let exiting = |b: u64| cfg.intra_successors(b).any(|s| !body.contains(&s));
            // Walk the post-dominator chain to the first loop-exiting block.
            let mut cur = Some(block);
            let mut exit_block = None;
            while let Some(b) = cur {
                if body.contains(&b) && exiting(b) && b != block {
                    exit_block = Some(b);
                    break;
                }
                cur = func.ipdom.get(&b).copied().flatten();
            }
            let Some(address) = exit_block else { continue };
            candidates.entry(header).or_insert(MergePoint {
                address,
                function: func.entry,
                loop_header: header,
                loop_blocks: body.clone(),
                marker_compare: last.address,
            });
        }
    }
    if candidates.len() == 1 {
        candidates.into_values().next()
    } else {
        None
    }
}

/// Equality-comparison tree on one loaded value, starting the search at `start`.
/// Returns the leaves if at least two distinct equality comparisons were seen.
fn tree_from(image: &ProgramImage, cfg: &Cfg, func: &Function, start: u64, limit: usize) -> Option<BTreeSet<u64>> {
    let mut order = VecDeque::from([start]);
    let mut seen = BTreeSet::from([start]);
    while let Some(block) = order.pop_front() {
        let insns = block_insns(image, cfg, block);
        for (i, insn) in insns.iter().enumerate() {
            let Op::Ldx { dst, .. } = insn.op() else { continue };
            if let Some(leaves) = follow_value(image, cfg, func, block, i + 1, dst) {
                return Some(leaves);
            }
        }
        if seen.len() >= limit {
            break;
        }
        for s in cfg.intra_successors(block) {
            if func.blocks.contains(&s) && seen.insert(s) {
                order.push_back(s);
            }
        }
    }
    None
}

fn follow_value(
    image: &ProgramImage,
    cfg: &Cfg,
    func: &Function,
    block: u64,
    from: usize,
    reg: u8,
) -> Option<BTreeSet<u64>> {
    let mut leaves = BTreeSet::new();
    let mut compares = BTreeSet::new();
    let mut values = BTreeSet::new();
    let mut stack = vec![(block, from)];
    let mut seen = BTreeSet::new();
    while let Some((b, at)) = stack.pop() {
        if !seen.insert((b, at)) {
            continue;
        }
        let insns = block_insns(image, cfg, b);
        let last_idx = insns.len() - 1;
        if insns[at.min(last_idx)..last_idx].iter().any(|i| defs(i).contains(&reg)) {
            continue;
        }
        let last = *insns.last().unwrap();
        if at > last_idx {
            for s in cfg.intra_successors(b) {
                if func.blocks.contains(&s) {
                    stack.push((s, 0));
                }
            }
            continue;
        }
        match last.op() {
            Op::Jcond { cond, dst, operand: Operand::Imm(v), .. } if dst == reg => {
                let (taken, fall) = (last.jump_target().unwrap(), last.next_address());
                match cond {
                    JmpCond::Eq | JmpCond::Ne => {
                        compares.insert(last.address);
                        values.insert(v);
                        let (eq, ne) = if cond == JmpCond::Eq { (taken, fall) } else { (fall, taken) };
                        leaves.insert(eq);
                        stack.push((ne, 0));
                    }
                    _ => {
                        stack.push((taken, 0));
                        stack.push((fall, 0));
                    }
                }
            }
            _ if defs(last).contains(&reg) => {}
            _ => {
                for s in cfg.intra_successors(b) {
                    if func.blocks.contains(&s) {
                        stack.push((s, 0));
                    }
                }
            }
        }
    }
    (compares.len() >= 2 && values.len() >= 2).then_some(leaves)
}

/// Leaves of the instruction dispatch tree; nested trees are refined to their
/// deepest comparisons.
pub fn find_dispatch_leaves(image: &ProgramImage, cfg: &Cfg) -> BTreeSet<u64> {
    for func in functions_within(cfg, image.entry, DISPATCH_ROOT_DEPTH) {
        if let Some(leaves) = tree_from(image, cfg, func, func.entry, usize::MAX) {
            return refine(image, cfg, func, leaves, 0);
        }
    }
    BTreeSet::new()
}

fn refine(image: &ProgramImage, cfg: &Cfg, func: &Function, leaves: BTreeSet<u64>, depth: usize) -> BTreeSet<u64> {
    let mut out = BTreeSet::new();
    for leaf in leaves {
        // A nested tree must live in code dominated by the leaf.
        let nested = (depth < 4)
            .then(|| tree_from(image, cfg, func, leaf, 8))
            .flatten()
            .filter(|inner| inner.iter().all(|b| func.dominates(leaf, *b)) && !inner.contains(&leaf));
        match nested {
            Some(inner) => out.extend(refine(image, cfg, func, inner, depth + 1)),
            None => {
                out.insert(leaf);
            }
        }
    }
    out
}

pub fn find_cpi_sites(cfg: &Cfg) -> BTreeSet<u64> {
    cfg.call_sites
        .iter()
        .filter(|(_, k)| matches!(k, CallKind::Syscall(n) if CPI_SYSCALLS.contains(&n.as_str())))
        .map(|(s, _)| *s)
        .collect()
}

fn name_has(image: &ProgramImage, f: u64, needles: &[&str]) -> bool {
    image
        .function_name(f)
        .map(|n| {
            let n = n.to_ascii_lowercase();
            needles.iter().any(|k| n.contains(k))
        })
        .unwrap_or(false)
}

/// A function that divides by ten inside a loop (decimal conversion).
fn divides_by_ten_in_loop(image: &ProgramImage, cfg: &Cfg, func: &Function) -> bool {
    func.loops.values().flatten().any(|&b| {
        block_insns(image, cfg, b).iter().any(|i| match i.op() {
            Op::Alu { op: AluOp::Div | AluOp::Mod, operand: Operand::Imm(10), .. } => true,
            Op::Pqr { op: PqrOp::Udiv | PqrOp::Urem, operand: Operand::Imm(10), .. } => true,
            _ => false,
        })
    })
}

fn is_format_fn(image: &ProgramImage, cfg: &Cfg, f: u64) -> bool {
    name_has(image, f, &["fmt", "format"]) || cfg.functions.get(&f).is_some_and(|func| divides_by_ten_in_loop(image, cfg, func))
}

fn is_dealloc_fn(image: &ProgramImage, f: u64) -> bool {
    name_has(image, f, &["dealloc", "free"])
}

/// Whether a call at `site` is a log call: the syscall itself or a function
/// that reaches it within two call levels without other side effects checked.
fn is_log_call(cfg: &Cfg, site: u64) -> bool {
    match cfg.call_sites.get(&site) {
        Some(CallKind::Syscall(n)) => LOG_SYSCALLS.contains(&n.as_str()),
        Some(CallKind::Function(f)) => calls_log(cfg, *f, 2),
        _ => false,
    }
}

fn calls_log(cfg: &Cfg, f: u64, depth: usize) -> bool {
    let Some(func) = cfg.functions.get(&f) else { return false };
    func.blocks.iter().any(|&b| {
        let last = cfg.blocks[&b].last;
        match cfg.call_sites.get(&last) {
            Some(CallKind::Function(g)) => depth > 0 && calls_log(cfg, *g, depth - 1),
            _ => false,
        }
    }) || cfg.call_sites.iter().any(|(s, k)| {
        matches!(k, CallKind::Syscall(n) if LOG_SYSCALLS.contains(&n.as_str()))
            && cfg.block_of(*s).is_some_and(|b| func.blocks.contains(&b))
    })
}

/// Frame offset `r10 + k` held by `reg` right before instruction index `at`
/// of `insns`, following `mov rX, r10; add rX, k`.
fn frame_offset_before(insns: &[&Instruction], at: usize, reg: u8) -> Option<i64> {
    let mut offset = 0i64;
    for insn in insns[..at].iter().rev() {
        match insn.op() {
            Op::Alu { op: AluOp::Add, is64: true, dst, operand: Operand::Imm(k) } if dst == reg => offset += k,
            Op::Alu { op: AluOp::Sub, is64: true, dst, operand: Operand::Imm(k) } if dst == reg => offset -= k,
            Op::Alu { op: AluOp::Mov, is64: true, dst, operand: Operand::Reg(FRAME_POINTER) } if dst == reg => {
                return Some(offset)
            }
            _ if defs(insn).contains(&reg) => return None,
            _ => {}
        }
    }
    None
}

/// Outcome of the def-use scan after a format call.
#[derive(Default)]
struct UseScan {
    forbidden: bool,
    logged: bool,
    freed: bool,
}

const STRING_SLOT: i64 = 24;
const SCAN_LIMIT: usize = 96;

fn scan_string_uses(image: &ProgramImage, cfg: &Cfg, func: &Function, site: u64, slot: i64) -> UseScan {
    let in_slot = |off: i64| off >= slot && off < slot + STRING_SLOT;
    let mut scan = UseScan::default();
    // (instruction address, tainted registers)
    let mut stack = vec![(image.instruction_at(site).unwrap().next_address(), BTreeSet::<u8>::new())];
    let mut visited = BTreeSet::new();
    let mut steps = 0;
    while let Some((addr, mut taint)) = stack.pop() {
        if !visited.insert((addr, taint.clone())) || steps > SCAN_LIMIT {
            continue;
        }
        steps += 1;
        let Some(insn) = image.instruction_at(addr) else { continue };
        let Some(block) = cfg.block_of(addr) else { continue };
        if !func.blocks.contains(&block) {
            continue;
        }
        let next = insn.next_address();
        match insn.op() {
            Op::Ldx { dst, base, off, .. } => {
                if taint.contains(&base) {
                    scan.forbidden = true;
                }
                if base == FRAME_POINTER && in_slot(off as i64) {
                    taint.insert(dst);
                } else {
                    taint.remove(&dst);
                }
                stack.push((next, taint));
            }
            Op::Stx { base, src, off, .. } => {
                if taint.contains(&base) || taint.contains(&src) {
                    scan.forbidden = true;
                }
                let _ = off;
                stack.push((next, taint));
            }
            Op::St { base, .. } => {
                if taint.contains(&base) {
                    scan.forbidden = true;
                }
                stack.push((next, taint));
            }
            Op::Alu { op, dst, operand, .. } => {
                let src_tainted = matches!(operand, Operand::Reg(r) if taint.contains(&r));
                let addr_of_slot = op == AluOp::Add
                    && matches!(operand, Operand::Imm(k) if in_slot(k))
                    && is_frame_copy(image, func, cfg, addr, dst);
                if op == AluOp::Mov {
                    if src_tainted {
                        taint.insert(dst);
                    } else {
                        taint.remove(&dst);
                    }
                } else if src_tainted || addr_of_slot {
                    taint.insert(dst);
                }
                stack.push((next, taint));
            }
            Op::Pqr { dst, operand, .. } => {
                if matches!(operand, Operand::Reg(r) if taint.contains(&r)) {
                    taint.insert(dst);
                }
                stack.push((next, taint));
            }
            Op::Lddw { dst, .. } => {
                taint.remove(&dst);
                stack.push((next, taint));
            }
            Op::Jcond { dst, operand, .. } => {
                let uses = taint.contains(&dst) || matches!(operand, Operand::Reg(r) if taint.contains(&r));
                // Only null/capacity checks against zero are tolerated.
                if uses && operand != Operand::Imm(0) {
                    scan.forbidden = true;
                }
                stack.push((insn.jump_target().unwrap(), taint.clone()));
                stack.push((next, taint));
            }
            Op::Ja { .. } => stack.push((insn.jump_target().unwrap(), taint)),
            Op::Call { .. } | Op::Callx { .. } => {
                let args_tainted = (1..=5).any(|r| taint.contains(&r));
                let callee = match cfg.call_sites.get(&addr) {
                    Some(CallKind::Function(f)) => Some(*f),
                    _ => None,
                };
                if args_tainted {
                    if is_log_call(cfg, addr) {
                        scan.logged = true;
                    } else if callee.is_some_and(|f| is_dealloc_fn(image, f)) {
                        scan.freed = true;
                    } else {
                        scan.forbidden = true;
                    }
                }
                for r in 0..=5 {
                    taint.remove(&r);
                }
                let ends_here = cfg.blocks[&block].last == addr;
                if !ends_here || cfg.successors(block).iter().any(|(s, _)| *s == next) {
                    stack.push((next, taint));
                }
            }
            Op::Exit => {}
        }
    }
    scan
}

/// Whether `reg` was set to `r10` by a `mov` earlier in the same block.
fn is_frame_copy(image: &ProgramImage, func: &Function, cfg: &Cfg, addr: u64, reg: u8) -> bool {
    let _ = func;
    let Some(block) = cfg.block_of(addr) else { return false };
    let insns = block_insns(image, cfg, block);
    let at = insns.iter().position(|i| i.address == addr).unwrap();
    frame_offset_before(&insns, at, reg) == Some(0)
}

/// Call sites of string-format routines whose result is only logged and freed.
pub fn find_format_skip_sites(image: &ProgramImage, cfg: &Cfg) -> BTreeSet<u64> {
    let mut sites = BTreeSet::new();
    for func in cfg.functions.values() {
        for &(site, callee) in &func.calls {
            if !is_format_fn(image, cfg, callee) {
                continue;
            }
            let block = cfg.block_of(site).unwrap();
            let insns = block_insns(image, cfg, block);
            let at = insns.iter().position(|i| i.address == site).unwrap();
            let Some(slot) = frame_offset_before(&insns, at, 1) else { continue };
            let scan = scan_string_uses(image, cfg, func, site, slot);
            if !scan.forbidden && scan.logged && scan.freed {
                sites.insert(site);
            }
        }
    }
    sites
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::cfg::build_cfg;
    use crate::bytecode::image::load_program;

    fn marks(src: &str) -> (crate::bytecode::asm::Assembly, StaticMarks) {
        let asm = assemble(src).unwrap();
        let image = load_program(&asm.to_elf()).unwrap();
        let cfg = build_cfg(&image).unwrap();
        let m = StaticMarks::compute(&image, &cfg);
        (asm, m)
    }

    const LOOP: &str = "
    entrypoint:
        ldxdw r2, [r1+0]
        mov64 r3, 0
    head:
        jge r3, r2, done
        ldxb r4, [r1+8]
        jne r4, 0xff, dup
        add64 r1, 16
        ja next
    dup:
        add64 r1, 8
    next:
        add64 r3, 1
        ja head
    done:
        mov64 r0, 0
        exit
    ";

    #[test]
    fn merge_point_is_loop_exit_test() {
        let (asm, m) = marks(LOOP);
        let mp = m.merge_point.unwrap();
        assert_eq!(mp.address, asm.label("head").unwrap());
        assert!(mp.loop_blocks.contains(&asm.label("dup").unwrap()));
    }

    #[test]
    fn no_marker_means_no_merge_point() {
        assert!(marks("mov64 r0, 0\nexit").1.merge_point.is_none());
    }

    #[test]
    fn two_marker_loops_disable_merging() {
        let src = "
        entrypoint:
            mov64 r3, 0
        h1:
            jge r3, 4, d1
            ldxb r4, [r1+8]
            jne r4, 0xff, s1
            add64 r1, 16
        s1:
            add64 r3, 1
            ja h1
        d1:
            mov64 r3, 0
        h2:
            jge r3, 4, d2
            ldxb r4, [r1+8]
            jeq r4, 0xff, s2
            add64 r1, 8
        s2:
            add64 r3, 1
            ja h2
        d2:
            exit
        ";
        assert!(marks(src).1.merge_point.is_none());
        let single = src.replace("jeq r4, 0xff, s2", "jeq r4, 0xfe, s2");
        assert!(marks(&single).1.merge_point.is_some());
    }

    const DISPATCH: &str = "
    entrypoint:
        ldxb r2, [r1+0]
        jeq r2, 0, h0
        jeq r2, 1, h1
        jeq r2, 2, h2
        mov64 r0, 1
        exit
    h0:
        mov64 r0, 0
        exit
    h1:
        mov64 r0, 0
        exit
    h2:
        mov64 r0, 0
        exit
    ";

    #[test]
    fn three_way_dispatch() {
        let (asm, m) = marks(DISPATCH);
        let want: BTreeSet<u64> = ["h0", "h1", "h2"].iter().map(|l| asm.label(l).unwrap()).collect();
        assert_eq!(m.dispatch_leaves, want);
    }

    #[test]
    fn straight_line_has_no_dispatch() {
        assert!(marks("ldxb r2, [r1+0]\nmov64 r0, 0\nexit").1.dispatch_leaves.is_empty());
    }

    #[test]
    fn nested_dispatch_reaches_inner_leaves() {
        let src = "
        entrypoint:
            ldxb r2, [r1+0]
            jeq r2, 0, a
            jeq r2, 1, b
            exit
        a:
            ldxb r3, [r1+1]
            jeq r3, 0, a0
            jeq r3, 1, a1
            exit
        a0:
            exit
        a1:
            exit
        b:
            ldxb r3, [r1+1]
            jeq r3, 0, b0
            jeq r3, 1, b1
            exit
        b0:
            exit
        b1:
            exit
        ";
        let (asm, m) = marks(src);
        let want: BTreeSet<u64> = ["a0", "a1", "b0", "b1"].iter().map(|l| asm.label(l).unwrap()).collect();
        assert_eq!(m.dispatch_leaves, want);
    }

    const FMT: &str = "
    entrypoint:
        ldxdw r6, [r1+8]
        mov64 r1, r10
        add64 r1, -24
        mov64 r2, r6
        call format_u64
        ldxdw r1, [r10-16]
        ldxdw r2, [r10-8]
        call sol_log_
        ldxdw r1, [r10-16]
        ldxdw r2, [r10-24]
        call dealloc
        CHECK
        mov64 r0, 0
        exit
    format_u64:
        mov64 r0, 0
    loop:
        div64 r2, 10
        jne r2, 0, loop
        exit
    dealloc:
        exit
    ";

    #[test]
    fn format_log_free_is_skippable() {
        let (asm, m) = marks(&FMT.replace("CHECK", ""));
        let site = asm.label("entrypoint").unwrap() + 8 * 4;
        assert_eq!(m.skip_sites, BTreeSet::from([site]));
    }

    #[test]
    fn format_feeding_branch_is_not_skipped() {
        let (_, m) = marks(&FMT.replace("CHECK", "ldxdw r3, [r10-8]\n jeq r3, r6, +0"));
        assert!(m.skip_sites.is_empty());
    }

    #[test]
    fn cpi_sites_are_invoke_calls() {
        let (_, m) = marks("mov64 r1, 0\ncall sol_invoke_signed_c\nexit");
        assert_eq!(m.cpi_sites, BTreeSet::from([8]));
    }
}
