//! Symbolic machine state and single-instruction stepping.
//!
//! `step` mirrors the concrete interpreter instruction for instruction; the
//! equivalence is checked by property tests against `bytecode::interp`.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::bytecode::image::{ProgramImage, MM_PROGRAM_START};
use crate::bytecode::interp::{MAX_CALL_DEPTH, STACK_FRAME_SIZE};
use crate::bytecode::isa::{AluOp, Instruction, JmpCond, Op, Operand, PqrOp, Width};
use crate::runtime::layout::InputLayout;
use crate::runtime::ledger::Ledger;
use crate::runtime::CriticalAction;

use super::expr::{Expr, Kind, UnOp};
use super::memory::Memory;
use super::solver::{model_satisfies, slice, Model, SatResult, Solver};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Status {
    Active,
    /// Returned from the entrypoint with the given r0.
    Exited(Expr),
    Aborted(String),
    Infeasible,
}

#[derive(Clone)]
pub struct Frame {
    pub ret: u64,
    pub saved: [Expr; 4],
    pub fp: u64,
}

/// Hooks the stepping core needs from its surroundings.
pub trait Env {
    fn image(&self) -> &ProgramImage;
    fn solver(&self) -> &Solver;
    fn next_id(&self) -> u64;
    fn fresh_name(&self, prefix: &str) -> String;
    /// Maximum number of values a symbolic address is split into.
    fn resolve_limit(&self) -> usize {
        4
    }
    /// Execute a syscall; `st.pc` already points past the call.
    fn syscall(&self, st: SymState, name: &str, site: u64) -> Vec<SymState>;
    fn on_access(&self, _st: &mut SymState, _addr: u64, _len: u64, _write: bool, _site: u64, _value: Option<&Expr>) {}
    fn on_branch(&self, _st: &mut SymState, _cond: &Expr, _site: u64) {}
    /// Skip an internal call whose effects cannot reach any finding.
    fn skip_call(&self, _site: u64) -> bool {
        false
    }
}

#[derive(Clone)]
pub struct SymState {
    pub id: u64,
    pub fork_seq: u64,
    pub pc: u64,
    pub regs: [Expr; 11],
    pub mem: Memory,
    pub constraints: Vec<Expr>,
    pub pins: Arc<BTreeMap<Arc<str>, u128>>,
    pub frames: Vec<Frame>,
    pub ledger: Ledger,
    pub coverage: Arc<BTreeSet<u64>>,
    pub status: Status,
    pub degraded: bool,
    /// Branch decisions since the last merge: (site, taken).
    pub trace: Vec<(u64, bool)>,
    pub model: Arc<Model>,
    pub actions: Vec<CriticalAction>,
    pub layout: Arc<InputLayout>,
    pub steps: u64,
    pub concretizations: u64,
    /// Bytes handed out by the modeled heap allocator.
    pub heap_used: u64,
}

fn c64(v: u64) -> Expr {
    Expr::constant(v as u128, 64)
}

impl SymState {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u64,
        entry: u64,
        mem: Memory,
        input_base: u64,
        stack_top: u64,
        constraints: Vec<Expr>,
        pins: BTreeMap<Arc<str>, u128>,
        ledger: Ledger,
        layout: Arc<InputLayout>,
    ) -> SymState {
        let mut regs: [Expr; 11] = std::array::from_fn(|_| c64(0));
        regs[1] = c64(input_base);
        regs[10] = c64(stack_top);
        let model: Model = pins.clone();
        SymState {
            id,
            fork_seq: 0,
            pc: entry,
            regs,
            mem,
            constraints,
            pins: Arc::new(pins),
            frames: Vec::new(),
            ledger,
            coverage: Arc::new(BTreeSet::new()),
            status: Status::Active,
            degraded: false,
            trace: Vec::new(),
            model: Arc::new(model),
            actions: Vec::new(),
            layout,
            steps: 0,
            concretizations: 0,
            heap_used: 0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.status == Status::Active
    }

    pub fn depth(&self) -> usize {
        self.frames.len()
    }

    /// Path constraints plus the equalities of still-pinned lengths.
    pub fn query_constraints(&self) -> Vec<Expr> {
        let mut cs = self.constraints.clone();
        for (name, v) in self.pins.iter() {
            cs.push(Expr::var(name, 64).eq(&Expr::constant(*v, 64)));
        }
        cs
    }

    pub fn model_value(&self, e: &Expr) -> u128 {
        e.eval(&|n| self.model.get(n).copied())
    }

    pub fn add_constraint(&mut self, c: Expr) {
        if c.is_true() {
            return;
        }
        if c.is_false() {
            self.status = Status::Infeasible;
        }
        self.constraints.push(c);
    }

    /// Feasibility of `self ∧ extra`. Updates the cached model when a solver
    /// call produced a fresh one for the relevant slice.
    pub fn feasible(&mut self, solver: &Solver, extra: &Expr) -> Option<bool> {
        if let Some(c) = extra.as_const() {
            return Some(c == 1);
        }
        let cs = self.query_constraints();
        let sl = slice(&cs, &extra.vars());
        if self.model_value(extra) == 1 && model_satisfies(&self.model, &sl) {
            return Some(true);
        }
        let mut q = sl;
        q.push(extra.clone());
        match solver.check(&q) {
            SatResult::Sat(m) => {
                let mut model = (*self.model).clone();
                model.extend(m);
                self.model = Arc::new(model);
                Some(true)
            }
            SatResult::Unsat => Some(false),
            SatResult::Unknown => None,
        }
    }

    /// Drop length pins, first replacing pointers computed from pinned
    /// lengths by their concrete values.
    pub fn hybridize(&mut self) {
        if self.pins.is_empty() {
            return;
        }
        let pins = self.pins.clone();
        let subst = |e: &Expr| -> Option<u128> {
            if !e.vars().iter().any(|v| pins.contains_key(v)) {
                return None;
            }
            let s = e.substitute(&|n| pins.get(n).map(|v| Expr::constant(*v, 64)));
            s.as_const().filter(|v| (1..=4).contains(&(v >> 32)))
        };
        for r in self.regs.iter_mut() {
            if let Some(v) = subst(r) {
                *r = Expr::constant(v, 64);
            }
        }
        for f in self.frames.iter_mut() {
            for r in f.saved.iter_mut() {
                if let Some(v) = subst(r) {
                    *r = Expr::constant(v, 64);
                }
            }
        }
        self.mem.rewrite_bytes(|_, byte| match byte.kind() {
            Kind::Extract(_, lo, inner) if inner.width() == 64 => subst(inner).map(|v| Expr::constant(v >> lo, 8)),
            _ => None,
        });
        self.pins = Arc::new(BTreeMap::new());
    }

    fn fork(&self, env: &dyn Env) -> SymState {
        let mut s = self.clone();
        s.id = env.next_id();
        s
    }
}

fn operand(st: &SymState, o: Operand) -> Expr {
    match o {
        Operand::Imm(i) => c64(i as u64),
        Operand::Reg(r) => st.regs[r as usize].clone(),
    }
}

fn low32(e: &Expr) -> Expr {
    e.extract(31, 0)
}

/// Symbolic counterpart of `interp::alu`. Division by zero is handled by
/// the caller before this is reached.
fn alu_expr(op: AluOp, is64: bool, a: &Expr, b: &Expr) -> Expr {
    if is64 {
        let sh = |b: &Expr| b.and(&c64(63));
        match op {
            AluOp::Add => a.add(b),
            AluOp::Sub => a.sub(b),
            AluOp::Mul => a.mul(b),
            AluOp::Div => a.udiv(b),
            AluOp::Mod => a.urem(b),
            AluOp::Or => a.or(b),
            AluOp::And => a.and(b),
            AluOp::Xor => a.xor(b),
            AluOp::Lsh => a.shl(&sh(b)),
            AluOp::Rsh => a.lshr(&sh(b)),
            AluOp::Arsh => a.ashr(&sh(b)),
            AluOp::Neg => a.neg(),
            AluOp::Mov => b.clone(),
            AluOp::Le | AluOp::Be => byteswap(op, a, b.as_u64().unwrap_or(64)),
        }
    } else {
        let (x, y) = (low32(a), low32(b));
        let sh = |y: &Expr| y.and(&Expr::constant(31, 32));
        match op {
            AluOp::Add => x.add(&y).sext(64),
            AluOp::Sub => x.sub(&y).sext(64),
            AluOp::Mul => x.mul(&y).sext(64),
            AluOp::Div => x.udiv(&y).zext(64),
            AluOp::Mod => x.urem(&y).zext(64),
            AluOp::Or => x.or(&y).zext(64),
            AluOp::And => x.and(&y).zext(64),
            AluOp::Xor => x.xor(&y).zext(64),
            AluOp::Lsh => x.shl(&sh(&y)).zext(64),
            AluOp::Rsh => x.lshr(&sh(&y)).zext(64),
            AluOp::Arsh => x.ashr(&sh(&y)).zext(64),
            AluOp::Neg => x.neg().zext(64),
            AluOp::Mov => y.zext(64),
            AluOp::Le | AluOp::Be => alu_expr(op, true, a, b),
        }
    }
}

fn byteswap(op: AluOp, a: &Expr, bits: u64) -> Expr {
    let bits = match bits {
        16 => 16,
        32 => 32,
        _ => 64,
    };
    if op == AluOp::Le || bits == 0 {
        return a.extract(bits - 1, 0).zext(64);
    }
    let n = bits / 8;
    let mut acc = a.extract(7, 0);
    for i in 1..n {
        acc = acc.concat(&a.extract(8 * i + 7, 8 * i));
    }
    acc.zext(64)
}

fn pqr_expr(op: PqrOp, is64: bool, a: &Expr, b: &Expr) -> Expr {
    if is64 {
        match op {
            PqrOp::Uhmul => a.zext(128).mul(&b.zext(128)).extract(127, 64),
            PqrOp::Shmul => a.sext(128).mul(&b.sext(128)).extract(127, 64),
            PqrOp::Lmul => a.mul(b),
            PqrOp::Udiv => a.udiv(b),
            PqrOp::Urem => a.urem(b),
            PqrOp::Sdiv => a.sdiv(b),
            PqrOp::Srem => a.srem(b),
        }
    } else {
        let (x, y) = (low32(a), low32(b));
        match op {
            PqrOp::Lmul => x.mul(&y).zext(64),
            PqrOp::Udiv => x.udiv(&y).zext(64),
            PqrOp::Urem => x.urem(&y).zext(64),
            PqrOp::Sdiv => x.sdiv(&y).zext(64),
            PqrOp::Srem => x.srem(&y).zext(64),
            PqrOp::Uhmul | PqrOp::Shmul => pqr_expr(op, true, a, b),
        }
    }
}

fn divides(op: &Op) -> bool {
    matches!(
        op,
        Op::Alu { op: AluOp::Div | AluOp::Mod, .. }
            | Op::Pqr { op: PqrOp::Udiv | PqrOp::Urem | PqrOp::Sdiv | PqrOp::Srem, .. }
    )
}

pub fn cond_expr(cond: JmpCond, a: &Expr, b: &Expr) -> Expr {
    match cond {
        JmpCond::Eq => a.eq(b),
        JmpCond::Ne => a.ne(b),
        JmpCond::Gt => b.ult(a),
        JmpCond::Ge => b.ule(a),
        JmpCond::Lt => a.ult(b),
        JmpCond::Le => a.ule(b),
        JmpCond::Sgt => b.slt(a),
        JmpCond::Sge => b.sle(a),
        JmpCond::Slt => a.slt(b),
        JmpCond::Sle => a.sle(b),
        JmpCond::Set => a.and(b).ne(&c64(0)),
    }
}

/// Resolve a possibly symbolic address to concrete candidates. Each entry is
/// the address plus the constraint selecting it (if the choice is not forced).
pub fn resolve_address(env: &dyn Env, st: &mut SymState, addr: &Expr, len: u64) -> Vec<(u64, Option<Expr>)> {
    if let Some(v) = addr.as_u64() {
        return vec![(v, None)];
    }
    if !st.pins.is_empty() {
        let pins = st.pins.clone();
        let s = addr.substitute(&|n| pins.get(n).map(|v| Expr::constant(*v, 64)));
        if let Some(v) = s.as_u64() {
            return vec![(v, None)];
        }
    }
    let guess = st.model_value(addr) as u64;
    let other = addr.ne(&c64(guess));
    match st.feasible(env.solver(), &other) {
        Some(false) => return vec![(guess, None)],
        None => {
            st.degraded = true;
            st.concretizations += 1;
            return vec![(guess, Some(addr.eq(&c64(guess))))];
        }
        Some(true) => {}
    }
    let k = env.resolve_limit();
    let (values, exhaustive) = env.solver().enumerate(&st.query_constraints(), addr, k);
    if exhaustive && !values.is_empty() {
        return values.into_iter().map(|v| (v as u64, Some(addr.eq(&c64(v as u64))))).collect();
    }
    // Too many candidates: pin to one, preferring a mapped address.
    st.concretizations += 1;
    let pick = values
        .iter()
        .map(|v| *v as u64)
        .find(|v| st.mem.region_index(*v, len).is_some())
        .unwrap_or(guess);
    vec![(pick, Some(addr.eq(&c64(pick))))]
}

/// Split `st` over the candidate addresses of `base + off`. When the base
/// register resolves to a single value it is written back as a constant.
fn with_address(
    env: &dyn Env,
    mut st: SymState,
    base: u8,
    off: i16,
    len: u64,
) -> Vec<(SymState, u64)> {
    let addr = st.regs[base as usize].add(&c64(off as i64 as u64));
    let cands = resolve_address(env, &mut st, &addr, len);
    if cands.len() == 1 {
        let (v, c) = cands.into_iter().next().unwrap();
        if let Some(c) = c {
            st.add_constraint(c);
        }
        if !st.regs[base as usize].is_const() && base != 10 {
            st.regs[base as usize] = c64(v.wrapping_sub(off as i64 as u64));
        }
        return vec![(st, v)];
    }
    let mut out = Vec::new();
    for (i, (v, c)) in cands.into_iter().enumerate() {
        let mut s = if i == 0 { st.clone() } else { st.fork(env) };
        if let Some(c) = c {
            s.add_constraint(c);
        }
        s.regs[base as usize] = c64(v.wrapping_sub(off as i64 as u64));
        out.push((s, v));
    }
    out
}

fn fault(mut st: SymState, what: String) -> Vec<SymState> {
    st.status = Status::Aborted(what);
    vec![st]
}

/// Execute one instruction.
pub fn step(env: &dyn Env, mut st: SymState) -> Vec<SymState> {
    if !st.is_active() {
        return vec![st];
    }
    let pc = st.pc;
    let Some(insn) = env.image().instruction_at(pc).copied() else {
        return fault(st, format!("pc out of bounds at {pc:#x}"));
    };
    st.steps += 1;
    if !st.coverage.contains(&pc) {
        Arc::make_mut(&mut st.coverage).insert(pc);
    }
    let next = insn.next_address();
    st.pc = next;
    let op = insn.op();
    match op {
        Op::Lddw { dst, imm } => st.regs[dst as usize] = c64(imm),
        Op::Ldx { width, dst, base, off } => {
            let n = width.bytes() as u64;
            let mut out = Vec::new();
            for (mut s, addr) in with_address(env, st, base, off, n) {
                match s.mem.read(addr, n) {
                    Ok(v) => {
                        if s.mem.region_kind(addr, n) == Some(super::memory::RegionKind::Input) {
                            env.on_access(&mut s, addr, n, false, pc, None);
                        }
                        s.regs[dst as usize] = v.zext(64);
                        out.push(s);
                    }
                    Err(_) => out.extend(fault(s, format!("read violation at {addr:#x} ({n} bytes) pc {pc:#x}"))),
                }
            }
            return out;
        }
        Op::St { width, base, off, imm } => return store(env, st, pc, width, base, off, c64(imm as u64)),
        Op::Stx { width, base, off, src } => {
            let v = st.regs[src as usize].clone();
            return store(env, st, pc, width, base, off, v);
        }
        Op::Alu { op: aop, is64, dst, operand: o } => {
            let (a, b) = (st.regs[dst as usize].clone(), operand(&st, o));
            if divides(&op) {
                return divide(env, st, is64, &b, dst, |b| alu_expr(aop, is64, &a, b), pc);
            }
            st.regs[dst as usize] = alu_expr(aop, is64, &a, &b);
        }
        Op::Pqr { op: pop, is64, dst, operand: o } => {
            let (a, b) = (st.regs[dst as usize].clone(), operand(&st, o));
            if divides(&op) {
                return divide(env, st, is64, &b, dst, |b| pqr_expr(pop, is64, &a, b), pc);
            }
            st.regs[dst as usize] = pqr_expr(pop, is64, &a, &b);
        }
        Op::Ja { .. } => st.pc = insn.jump_target().unwrap(),
        Op::Jcond { cond, dst, operand: o, .. } => {
            let c = cond_expr(cond, &st.regs[dst as usize], &operand(&st, o));
            return branch(env, st, &insn, c);
        }
        Op::Call { imm } => {
            let image = env.image();
            if let Some(name) = image.syscall_name(imm) {
                let name = name.to_string();
                return env.syscall(st, &name, pc);
            } else if let Some(target) = image.call_target(imm) {
                if env.skip_call(pc) {
                    st.regs[0] = c64(0);
                    return vec![st];
                }
                return push_frame(st, pc, next, target);
            } else {
                return fault(st, format!("unresolved call {imm:#x} at {pc:#x}"));
            }
        }
        Op::Callx { reg } => {
            let value = st.regs[reg as usize].clone();
            let cands = resolve_address(env, &mut st, &value, 1);
            let (v, c) = cands[0].clone();
            if cands.len() > 1 || c.is_some() {
                st.degraded = true;
            }
            if let Some(c) = c {
                st.add_constraint(c);
            }
            let target = v.wrapping_sub(MM_PROGRAM_START + env.image().text_vaddr);
            if env.image().index_of(target).is_none() {
                return fault(st, format!("bad indirect call to {v:#x} at {pc:#x}"));
            }
            return push_frame(st, pc, next, target);
        }
        Op::Exit => match st.frames.pop() {
            Some(frame) => {
                st.regs[6..10].clone_from_slice(&frame.saved);
                st.regs[10] = c64(frame.fp);
                st.pc = frame.ret;
            }
            None => {
                st.pc = pc;
                st.status = Status::Exited(st.regs[0].clone());
            }
        },
    }
    vec![st]
}

fn push_frame(mut st: SymState, pc: u64, ret: u64, target: u64) -> Vec<SymState> {
    if st.frames.len() + 1 >= MAX_CALL_DEPTH {
        return fault(st, format!("call depth exceeded at {pc:#x}"));
    }
    let fp = st.regs[10].as_u64().expect("frame pointer is concrete");
    st.frames.push(Frame { ret, saved: std::array::from_fn(|i| st.regs[6 + i].clone()), fp });
    st.regs[10] = c64(fp + STACK_FRAME_SIZE);
    st.pc = target;
    vec![st]
}

#[allow(clippy::too_many_arguments)]
fn store(env: &dyn Env, st: SymState, pc: u64, width: Width, base: u8, off: i16, value: Expr) -> Vec<SymState> {
    let n = width.bytes() as u64;
    let v = if n == 8 { value } else { value.extract(8 * n as u32 - 1, 0) };
    let mut out = Vec::new();
    for (mut s, addr) in with_address(env, st, base, off, n) {
        let input = s.mem.region_kind(addr, n) == Some(super::memory::RegionKind::Input);
        match s.mem.write(addr, &v) {
            Ok(()) => {
                if input {
                    env.on_access(&mut s, addr, n, true, pc, Some(&v));
                }
                out.push(s);
            }
            Err(_) => out.extend(fault(s, format!("write violation at {addr:#x} ({n} bytes) pc {pc:#x}"))),
        }
    }
    out
}

fn divide(
    env: &dyn Env,
    mut st: SymState,
    is64: bool,
    b: &Expr,
    dst: u8,
    f: impl Fn(&Expr) -> Expr,
    pc: u64,
) -> Vec<SymState> {
    let divisor = if is64 { b.clone() } else { low32(b) };
    let zero = divisor.eq(&Expr::constant(0, divisor.width()));
    let can_be_zero = st.feasible(env.solver(), &zero);
    let can_be_nonzero = st.feasible(env.solver(), &zero.not());
    let mut out = Vec::new();
    if can_be_zero != Some(false) {
        let mut z = st.fork(env);
        z.add_constraint(zero.clone());
        z.status = Status::Aborted(format!("division by zero at {pc:#x}"));
        out.push(z);
    }
    if can_be_nonzero != Some(false) {
        if can_be_zero != Some(false) {
            st.add_constraint(zero.not());
        }
        st.regs[dst as usize] = f(b);
        out.insert(0, st);
    }
    out
}

fn branch(env: &dyn Env, mut st: SymState, insn: &Instruction, c: Expr) -> Vec<SymState> {
    let site = insn.address;
    let target = insn.jump_target().unwrap();
    if let Some(v) = c.as_const() {
        if v == 1 {
            st.pc = target;
        }
        return vec![st];
    }
    env.on_branch(&mut st, &c, site);
    let t = st.feasible(env.solver(), &c);
    let f = st.feasible(env.solver(), &c.not());
    match (f, t) {
        (Some(false), Some(false)) => {
            st.status = Status::Infeasible;
            vec![st]
        }
        (Some(true), Some(false)) | (None, Some(false)) => {
            if f.is_none() {
                st.add_constraint(c.not());
                st.degraded = true;
            }
            vec![st]
        }
        (Some(false), Some(true)) | (Some(false), None) => {
            if t.is_none() {
                st.add_constraint(c.clone());
                st.degraded = true;
            }
            st.pc = target;
            vec![st]
        }
        _ => {
            let degraded = t.is_none() || f.is_none();
            let mut taken = st.fork(env);
            taken.add_constraint(c.clone());
            taken.pc = target;
            taken.trace.push((site, true));
            st.add_constraint(c.not());
            st.trace.push((site, false));
            if degraded {
                st.degraded = true;
                taken.degraded = true;
            }
            vec![st, taken]
        }
    }
}

// ---------------------------------------------------------------- merging

type Lit = (Expr, bool);

fn literal(c: &Expr) -> Lit {
    match c.kind() {
        Kind::Un(UnOp::Not, inner) if c.width() == 1 => (inner.clone(), false),
        _ => (c.clone(), true),
    }
}

fn lit_expr(l: &Lit) -> Expr {
    if l.1 {
        l.0.clone()
    } else {
        l.0.not()
    }
}

/// Shrink a disjunction of conjunctions by resolution and absorption.
pub fn minimize(mut terms: Vec<BTreeSet<Lit>>) -> Vec<BTreeSet<Lit>> {
    terms.sort();
    terms.dedup();
    loop {
        let mut changed = false;
        // Absorption: a term that contains another is redundant.
        let mut keep = vec![true; terms.len()];
        for i in 0..terms.len() {
            for j in 0..terms.len() {
                if i != j && keep[j] && keep[i] && terms[j].is_subset(&terms[i]) && (terms[i] != terms[j] || j < i) {
                    keep[i] = false;
                    changed = true;
                }
            }
        }
        let mut next: Vec<BTreeSet<Lit>> = terms.iter().zip(&keep).filter(|(_, k)| **k).map(|(t, _)| t.clone()).collect();
        // Resolution: X ∧ l  ∨  X ∧ ¬l  ==>  X
        'outer: for i in 0..next.len() {
            for j in i + 1..next.len() {
                if next[i].len() != next[j].len() {
                    continue;
                }
                let d1: Vec<&Lit> = next[i].difference(&next[j]).collect();
                if d1.len() != 1 {
                    continue;
                }
                let d2: Vec<&Lit> = next[j].difference(&next[i]).collect();
                if d1[0].0 == d2[0].0 && d1[0].1 != d2[0].1 {
                    let mut merged = next[i].clone();
                    merged.remove(&d1[0].clone());
                    next.remove(j);
                    next[i] = merged;
                    changed = true;
                    break 'outer;
                }
            }
        }
        next.sort();
        next.dedup();
        terms = next;
        if !changed {
            return terms;
        }
    }
}

fn dnf(terms: &[BTreeSet<Lit>]) -> Expr {
    let min = minimize(terms.to_vec());
    Expr::any(min.iter().map(|t| Expr::all(t.iter().map(lit_expr))))
}

/// Value selected by the residual guards, grouping states with equal values.
fn guarded(values: &[Expr], residuals: &[BTreeSet<Lit>]) -> Expr {
    let mut groups: Vec<(Expr, Vec<BTreeSet<Lit>>)> = Vec::new();
    for (v, r) in values.iter().zip(residuals) {
        match groups.iter_mut().find(|(g, _)| g == v) {
            Some((_, rs)) => rs.push(r.clone()),
            None => groups.push((v.clone(), vec![r.clone()])),
        }
    }
    let (last, _) = groups.pop().unwrap();
    groups.iter().rev().fold(last, |acc, (v, rs)| Expr::ite(&dnf(rs), v, &acc))
}

/// Merge states that share pc and call stack into one state whose
/// constraints are the common prefix plus the disjunction of residuals.
pub fn merge(states: Vec<SymState>) -> SymState {
    assert!(!states.is_empty());
    if states.len() == 1 {
        return states.into_iter().next().unwrap();
    }
    let first = &states[0];
    let sets: Vec<BTreeSet<Expr>> = states.iter().map(|s| s.constraints.iter().cloned().collect()).collect();
    let common: Vec<Expr> = first.constraints.iter().filter(|c| sets.iter().all(|s| s.contains(*c))).cloned().collect();
    let common_set: BTreeSet<Expr> = common.iter().cloned().collect();
    let residuals: Vec<BTreeSet<Lit>> = states
        .iter()
        .map(|s| s.constraints.iter().filter(|c| !common_set.contains(*c)).map(literal).collect())
        .collect();

    let mut out = first.clone();
    out.constraints = common;
    out.add_constraint(dnf(&residuals));
    for r in 0..11 {
        let vals: Vec<Expr> = states.iter().map(|s| s.regs[r].clone()).collect();
        if vals.iter().any(|v| *v != vals[0]) {
            out.regs[r] = guarded(&vals, &residuals);
        }
    }
    for f in 0..out.frames.len() {
        for r in 0..4 {
            let vals: Vec<Expr> = states.iter().map(|s| s.frames[f].saved[r].clone()).collect();
            if vals.iter().any(|v| *v != vals[0]) {
                out.frames[f].saved[r] = guarded(&vals, &residuals);
            }
        }
    }
    let mut addrs = BTreeSet::new();
    for s in &states[1..] {
        addrs.extend(first.mem.diff(&s.mem));
    }
    for a in addrs {
        let vals: Vec<Expr> = states.iter().map(|s| s.mem.read(a, 1).expect("diff address is mapped")).collect();
        let v = guarded(&vals, &residuals);
        out.mem.write_bytes(a, &[v]).expect("diff address is writable");
    }
    let mut coverage = (*first.coverage).clone();
    for s in &states[1..] {
        out.ledger.merge_from(&s.ledger);
        coverage.extend(s.coverage.iter().copied());
        out.degraded |= s.degraded;
        out.steps = out.steps.max(s.steps);
        out.concretizations += s.concretizations;
        for a in &s.actions {
            if !out.actions.contains(a) {
                out.actions.push(a.clone());
            }
        }
    }
    out.coverage = Arc::new(coverage);
    out.trace.clear();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::image::load_program;
    use crate::runtime::Runtime;
    use crate::symcore::{Solver, SolverConfig};

    fn table_lookup(mask: u8) -> Vec<SymState> {
        let src = format!(
            "entrypoint:\n ldxb r2, [r1+96]\n and64 r2, {mask}\n lddw r3, table\n add64 r3, r2\n ldxb r0, [r3+0]\n exit\n.rodata\ntable:\n .ascii \"0123456789abcdef\""
        );
        let image = load_program(&assemble(&src).unwrap().to_elf()).unwrap();
        let rt = Runtime::new(
            Arc::new(image),
            Arc::new(Solver::new(SolverConfig::default())),
            InputLayout::new(1, 8, [0; 32]).unwrap(),
        );
        let mut st = rt.initial_state_for(rt.layout.clone());
        for _ in 0..4 {
            st = step(&rt, st).pop().unwrap();
        }
        step(&rt, st)
    }

    #[test]
    fn few_candidates_fork() {
        let out = table_lookup(3);
        assert_eq!(out.len(), 4);
        let loaded: BTreeSet<u64> = out.iter().map(|s| s.regs[0].as_u64().unwrap()).collect();
        assert_eq!(loaded, BTreeSet::from([b'0' as u64, b'1' as u64, b'2' as u64, b'3' as u64]));
        assert!(out.iter().all(|s| s.concretizations == 0));
    }

    #[test]
    fn many_candidates_concretize() {
        let out = table_lookup(15);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].concretizations, 1);
        assert!(out[0].regs[0].as_u64().is_some());
    }

    #[test]
    fn conditions_match_concrete_comparisons() {
        let conds = [
            JmpCond::Eq,
            JmpCond::Ne,
            JmpCond::Gt,
            JmpCond::Ge,
            JmpCond::Lt,
            JmpCond::Le,
            JmpCond::Sgt,
            JmpCond::Sge,
            JmpCond::Slt,
            JmpCond::Sle,
            JmpCond::Set,
        ];
        let vals = [0u64, 1, 7, u64::MAX, 1 << 63, (1 << 63) - 1];
        for c in conds {
            for a in vals {
                for b in vals {
                    let e = cond_expr(c, &c64(a), &c64(b)).eval(&|_| None);
                    assert_eq!(e != 0, c.eval(a, b), "{c:?} {a:#x} {b:#x}");
                }
            }
        }
    }
}
