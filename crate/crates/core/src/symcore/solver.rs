//! Satisfiability checks over bitvector constraints.
//!
//! The default backend bit-blasts into CNF and runs CaDiCaL with a fresh
//! solver per query. An external SMT-LIB2 solver can be configured instead.
//! Queries are sliced to the constraints that share variables with the
//! question being asked.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write as _;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::expr::{BinOp, Expr, Kind, UnOp};

pub type Model = BTreeMap<Arc<str>, u128>;

#[derive(Clone, Debug)]
pub enum SatResult {
    Sat(Model),
    Unsat,
    Unknown,
}

impl SatResult {
    pub fn is_sat(&self) -> bool {
        matches!(self, SatResult::Sat(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Backend {
    BitBlast,
    External(PathBuf),
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub backend: Backend,
    pub timeout: Duration,
    pub dump_dir: Option<PathBuf>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { backend: Backend::BitBlast, timeout: Duration::from_secs(5), dump_dir: None }
    }
}

#[derive(Default, Debug)]
pub struct SolverStats {
    pub queries: AtomicU64,
    pub timeouts: AtomicU64,
    pub micros: AtomicU64,
}

pub struct Solver {
    pub config: SolverConfig,
    pub stats: SolverStats,
    dumps: AtomicU64,
}

impl Default for Solver {
    fn default() -> Self {
        Solver::new(SolverConfig::default())
    }
}

/// Constraints that transitively share variables with `seed`.
pub fn slice(constraints: &[Expr], seed: &BTreeSet<Arc<str>>) -> Vec<Expr> {
    let mut relevant: BTreeSet<Arc<str>> = seed.clone();
    let mut taken = vec![false; constraints.len()];
    loop {
        let mut changed = false;
        for (i, c) in constraints.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let vars = c.vars();
            if vars.is_empty() {
                // Constant constraints are cheap and decide satisfiability alone.
                taken[i] = true;
                changed = true;
                continue;
            }
            if vars.iter().any(|v| relevant.contains(v)) {
                taken[i] = true;
                changed = true;
                relevant.extend(vars.iter().cloned());
            }
        }
        if !changed {
            break;
        }
    }
    constraints.iter().zip(taken).filter(|(_, t)| *t).map(|(c, _)| c.clone()).collect()
}

/// Does `model` satisfy every constraint?
pub fn model_satisfies(model: &Model, constraints: &[Expr]) -> bool {
    let lookup = |n: &str| model.get(n).copied();
    let mut memo = HashMap::new();
    constraints.iter().all(|c| c.eval_memo(&lookup, &mut memo) == 1)
}

impl Solver {
    pub fn new(config: SolverConfig) -> Self {
        Solver { config, stats: SolverStats::default(), dumps: AtomicU64::new(0) }
    }

    /// Check the conjunction of `constraints` without slicing.
    pub fn check(&self, constraints: &[Expr]) -> SatResult {
        let live: Vec<Expr> = constraints.iter().filter(|c| !c.is_true()).cloned().collect();
        if live.iter().any(|c| c.is_false()) {
            return SatResult::Unsat;
        }
        if live.is_empty() {
            return SatResult::Sat(Model::new());
        }
        let start = Instant::now();
        self.stats.queries.fetch_add(1, Ordering::Relaxed);
        if let Some(dir) = &self.config.dump_dir {
            let n = self.dumps.fetch_add(1, Ordering::Relaxed);
            let _ = std::fs::create_dir_all(dir);
            let _ = std::fs::write(dir.join(format!("query_{n:06}.smt2")), to_smtlib(&live));
        }
        let result = match &self.config.backend {
            Backend::BitBlast => bitblast_check(&live, self.config.timeout),
            Backend::External(path) => external_check(path, &live, self.config.timeout),
        };
        if matches!(result, SatResult::Unknown) {
            self.stats.timeouts.fetch_add(1, Ordering::Relaxed);
        }
        self.stats.micros.fetch_add(start.elapsed().as_micros() as u64, Ordering::Relaxed);
        result
    }

    /// Check `constraints ∧ extra`, slicing `constraints` by the variables of
    /// `extra`. The unsliced part is assumed satisfiable.
    pub fn check_with(&self, constraints: &[Expr], extra: &[Expr]) -> SatResult {
        let mut seed = BTreeSet::new();
        for e in extra {
            seed.extend(e.vars().iter().cloned());
        }
        let mut query = slice(constraints, &seed);
        query.extend(extra.iter().cloned());
        self.check(&query)
    }

    /// `Some(true)` if satisfiable, `Some(false)` if not, `None` on timeout.
    pub fn is_sat(&self, constraints: &[Expr], extra: &Expr) -> Option<bool> {
        match self.check_with(constraints, std::slice::from_ref(extra)) {
            SatResult::Sat(_) => Some(true),
            SatResult::Unsat => Some(false),
            SatResult::Unknown => None,
        }
    }

    /// Up to `limit` distinct feasible values of `e` under `constraints`.
    /// Returns the values and whether the enumeration was exhaustive.
    pub fn enumerate(&self, constraints: &[Expr], e: &Expr, limit: usize) -> (Vec<u128>, bool) {
        if let Some(c) = e.as_const() {
            return (vec![c], true);
        }
        let mut seed = BTreeSet::new();
        seed.extend(e.vars().iter().cloned());
        let base = slice(constraints, &seed);
        let mut values = Vec::new();
        loop {
            let mut q = base.clone();
            for v in &values {
                q.push(e.ne(&Expr::constant(*v, e.width())));
            }
            match self.check(&q) {
                SatResult::Sat(m) => {
                    if values.len() == limit {
                        return (values, false);
                    }
                    let v = e.eval(&|n| m.get(n).copied());
                    values.push(v);
                }
                SatResult::Unsat => return (values, true),
                SatResult::Unknown => return (values, false),
            }
        }
    }
}

// ---------------------------------------------------------------- bit-blasting

struct Blaster {
    sat: cadical::Solver,
    next: i32,
    t: i32,
    memo: HashMap<usize, Vec<i32>>,
    divs: HashMap<(usize, usize, bool), (Vec<i32>, Vec<i32>)>,
    vars: BTreeMap<Arc<str>, Vec<i32>>,
}

impl Blaster {
    fn new() -> Self {
        let mut sat = cadical::Solver::new();
        sat.add_clause([1]);
        Blaster { sat, next: 2, t: 1, memo: HashMap::new(), divs: HashMap::new(), vars: BTreeMap::new() }
    }

    fn fresh(&mut self) -> i32 {
        let v = self.next;
        self.next += 1;
        v
    }

    fn fresh_vec(&mut self, w: usize) -> Vec<i32> {
        (0..w).map(|_| self.fresh()).collect()
    }

    fn konst(&self, v: u128, w: u32) -> Vec<i32> {
        (0..w).map(|i| if (v >> i) & 1 == 1 { self.t } else { -self.t }).collect()
    }

    fn clause(&mut self, lits: &[i32]) {
        self.sat.add_clause(lits.iter().copied());
    }

    fn and2(&mut self, a: i32, b: i32) -> i32 {
        let t = self.t;
        if a == -t || b == -t || a == -b {
            return -t;
        }
        if a == t || a == b {
            return b;
        }
        if b == t {
            return a;
        }
        let g = self.fresh();
        self.clause(&[-g, a]);
        self.clause(&[-g, b]);
        self.clause(&[g, -a, -b]);
        g
    }

    fn or2(&mut self, a: i32, b: i32) -> i32 {
        -self.and2(-a, -b)
    }

    fn xor2(&mut self, a: i32, b: i32) -> i32 {
        let t = self.t;
        if a == -t {
            return b;
        }
        if b == -t {
            return a;
        }
        if a == t {
            return -b;
        }
        if b == t {
            return -a;
        }
        if a == b {
            return -t;
        }
        if a == -b {
            return t;
        }
        let g = self.fresh();
        self.clause(&[-g, a, b]);
        self.clause(&[-g, -a, -b]);
        self.clause(&[g, -a, b]);
        self.clause(&[g, a, -b]);
        g
    }

    fn mux(&mut self, c: i32, a: i32, b: i32) -> i32 {
        let t = self.t;
        if c == t || a == b {
            return a;
        }
        if c == -t {
            return b;
        }
        let x = self.and2(c, a);
        let y = self.and2(-c, b);
        self.or2(x, y)
    }

    fn and_all(&mut self, lits: &[i32]) -> i32 {
        let mut acc = self.t;
        for &l in lits {
            acc = self.and2(acc, l);
        }
        acc
    }

    fn full_add(&mut self, a: i32, b: i32, c: i32) -> (i32, i32) {
        let ab = self.xor2(a, b);
        let sum = self.xor2(ab, c);
        let x = self.and2(a, b);
        let y = self.and2(ab, c);
        (sum, self.or2(x, y))
    }

    fn adder(&mut self, a: &[i32], b: &[i32], carry: i32) -> (Vec<i32>, i32) {
        let mut c = carry;
        let mut out = Vec::with_capacity(a.len());
        for i in 0..a.len() {
            let (s, nc) = self.full_add(a[i], b[i], c);
            out.push(s);
            c = nc;
        }
        (out, c)
    }

    fn add(&mut self, a: &[i32], b: &[i32]) -> Vec<i32> {
        let f = -self.t;
        self.adder(a, b, f).0
    }

    fn sub(&mut self, a: &[i32], b: &[i32]) -> Vec<i32> {
        let nb: Vec<i32> = b.iter().map(|l| -l).collect();
        let t = self.t;
        self.adder(a, &nb, t).0
    }

    fn neg(&mut self, a: &[i32]) -> Vec<i32> {
        let z = self.konst(0, a.len() as u32);
        self.sub(&z, a)
    }

    fn mul(&mut self, a: &[i32], b: &[i32]) -> Vec<i32> {
        let w = a.len();
        let t = self.t;
        // Put the operand with more constant bits second so partial products vanish.
        let consts = |v: &[i32]| v.iter().filter(|l| l.abs() == t).count();
        let (a, b) = if consts(a) > consts(b) { (b, a) } else { (a, b) };
        let mut acc = self.konst(0, w as u32);
        for i in 0..w {
            if b[i] == -t {
                continue;
            }
            let mut partial = vec![-t; w];
            for j in 0..w - i {
                partial[i + j] = self.and2(a[j], b[i]);
            }
            acc = self.add(&acc, &partial);
        }
        acc
    }

    fn ult(&mut self, a: &[i32], b: &[i32]) -> i32 {
        let nb: Vec<i32> = b.iter().map(|l| -l).collect();
        let t = self.t;
        let (_, carry) = self.adder(a, &nb, t);
        -carry
    }

    fn eq(&mut self, a: &[i32], b: &[i32]) -> i32 {
        let bits: Vec<i32> = (0..a.len()).map(|i| -self.xor2(a[i], b[i])).collect();
        self.and_all(&bits)
    }

    fn slt(&mut self, a: &[i32], b: &[i32]) -> i32 {
        let mut a2 = a.to_vec();
        let mut b2 = b.to_vec();
        let w = a.len() - 1;
        a2[w] = -a2[w];
        b2[w] = -b2[w];
        self.ult(&a2, &b2)
    }

    fn mux_vec(&mut self, c: i32, a: &[i32], b: &[i32]) -> Vec<i32> {
        (0..a.len()).map(|i| self.mux(c, a[i], b[i])).collect()
    }

    fn divrem(&mut self, key: (usize, usize, bool), a: &[i32], b: &[i32]) -> (Vec<i32>, Vec<i32>) {
        if let Some(r) = self.divs.get(&key) {
            return r.clone();
        }
        let w = a.len();
        let q = self.fresh_vec(w);
        let r = self.fresh_vec(w);
        let f = -self.t;
        let zeros: Vec<i32> = b.iter().map(|l| -l).collect();
        let bz = self.and_all(&zeros);
        let ext = |v: &[i32]| {
            let mut e = v.to_vec();
            e.resize(2 * w, f);
            e
        };
        let prod = self.mul(&ext(&q), &ext(b));
        let sum = self.add(&prod, &ext(&r));
        let eq = self.eq(&sum, &ext(a));
        let lt = self.ult(&r, b);
        self.clause(&[bz, eq]);
        self.clause(&[bz, lt]);
        let ones = self.konst(u128::MAX, w as u32);
        let qall = self.eq(&q, &ones);
        let req = self.eq(&r, a);
        self.clause(&[-bz, qall]);
        self.clause(&[-bz, req]);
        self.divs.insert(key, (q.clone(), r.clone()));
        (q, r)
    }

    fn shift(&mut self, op: BinOp, a: &[i32], b: &[i32]) -> Vec<i32> {
        let w = a.len();
        let fill = if op == BinOp::AShr { a[w - 1] } else { -self.t };
        let mut cur = a.to_vec();
        let mut stage = 0;
        while (1usize << stage) < w {
            let s = 1usize << stage;
            let shifted: Vec<i32> = (0..w)
                .map(|i| match op {
                    BinOp::Shl => {
                        if i >= s {
                            cur[i - s]
                        } else {
                            -self.t
                        }
                    }
                    _ => {
                        if i + s < w {
                            cur[i + s]
                        } else {
                            fill
                        }
                    }
                })
                .collect();
            cur = self.mux_vec(b[stage], &shifted, &cur);
            stage += 1;
        }
        let limit = self.konst(w as u128, w as u32);
        let in_range = self.ult(b, &limit);
        let filled = vec![fill; w];
        self.mux_vec(in_range, &cur, &filled)
    }

    fn blast(&mut self, e: &Expr) -> Vec<i32> {
        if let Some(c) = e.as_const() {
            return self.konst(c, e.width());
        }
        if let Some(v) = self.memo.get(&e.id()) {
            return v.clone();
        }
        let w = e.width();
        let bits = match e.kind() {
            Kind::Const(c) => self.konst(*c, w),
            Kind::Var(name) => {
                let v = self.fresh_vec(w as usize);
                self.vars.insert(name.clone(), v.clone());
                v
            }
            Kind::Un(UnOp::Not, a) => self.blast(a).iter().map(|l| -l).collect(),
            Kind::Un(UnOp::Neg, a) => {
                let a = self.blast(a);
                self.neg(&a)
            }
            Kind::Bin(op, a, b) => {
                let (x, y) = (self.blast(a), self.blast(b));
                match op {
                    BinOp::Add => self.add(&x, &y),
                    BinOp::Sub => self.sub(&x, &y),
                    BinOp::Mul => self.mul(&x, &y),
                    BinOp::UDiv => self.divrem((a.id(), b.id(), false), &x, &y).0,
                    BinOp::URem => self.divrem((a.id(), b.id(), false), &x, &y).1,
                    BinOp::SDiv | BinOp::SRem => {
                        let n = x.len() - 1;
                        let (sa, sb) = (x[n], y[n]);
                        let nx = self.neg(&x);
                        let ny = self.neg(&y);
                        let ax = self.mux_vec(sa, &nx, &x);
                        let ay = self.mux_vec(sb, &ny, &y);
                        let (q, r) = self.divrem((a.id(), b.id(), true), &ax, &ay);
                        if *op == BinOp::SDiv {
                            let nq = self.neg(&q);
                            let s = self.xor2(sa, sb);
                            self.mux_vec(s, &nq, &q)
                        } else {
                            let nr = self.neg(&r);
                            self.mux_vec(sa, &nr, &r)
                        }
                    }
                    BinOp::And => (0..x.len()).map(|i| self.and2(x[i], y[i])).collect(),
                    BinOp::Or => (0..x.len()).map(|i| self.or2(x[i], y[i])).collect(),
                    BinOp::Xor => (0..x.len()).map(|i| self.xor2(x[i], y[i])).collect(),
                    BinOp::Shl | BinOp::LShr | BinOp::AShr => self.shift(*op, &x, &y),
                    BinOp::Eq => vec![self.eq(&x, &y)],
                    BinOp::Ult => vec![self.ult(&x, &y)],
                    BinOp::Ule => vec![-self.ult(&y, &x)],
                    BinOp::Slt => vec![self.slt(&x, &y)],
                    BinOp::Sle => vec![-self.slt(&y, &x)],
                }
            }
            Kind::Ite(c, a, b) => {
                let c = self.blast(c)[0];
                let (x, y) = (self.blast(a), self.blast(b));
                self.mux_vec(c, &x, &y)
            }
            Kind::Extract(hi, lo, a) => self.blast(a)[*lo as usize..=*hi as usize].to_vec(),
            Kind::Concat(hi, lo) => {
                let mut v = self.blast(lo);
                v.extend(self.blast(hi));
                v
            }
            Kind::Zext(a) => {
                let mut v = self.blast(a);
                v.resize(w as usize, -self.t);
                v
            }
            Kind::Sext(a) => {
                let mut v = self.blast(a);
                let s = *v.last().unwrap();
                v.resize(w as usize, s);
                v
            }
        };
        self.memo.insert(e.id(), bits.clone());
        bits
    }
}

fn bitblast_check(constraints: &[Expr], timeout: Duration) -> SatResult {
    let mut b = Blaster::new();
    for c in constraints {
        let l = b.blast(c)[0];
        b.clause(&[l]);
    }
    b.sat.set_callbacks(Some(cadical::Timeout::new(timeout.as_secs_f32())));
    match b.sat.solve() {
        Some(true) => {
            let mut model = Model::new();
            for (name, bits) in &b.vars {
                let mut v = 0u128;
                for (i, l) in bits.iter().enumerate() {
                    if b.sat.value(*l) == Some(true) {
                        v |= 1 << i;
                    }
                }
                model.insert(name.clone(), v);
            }
            SatResult::Sat(model)
        }
        Some(false) => SatResult::Unsat,
        None => SatResult::Unknown,
    }
}

// ---------------------------------------------------------------- SMT-LIB

/// Render constraints as an SMT-LIB2 script over QF_BV.
pub fn to_smtlib(constraints: &[Expr]) -> String {
    let mut out = String::from("(set-logic QF_BV)\n(set-option :produce-models true)\n");
    let mut names: HashMap<usize, String> = HashMap::new();
    let mut decls = String::new();
    let mut defs = String::new();
    let mut vars = BTreeMap::new();
    for c in constraints {
        let n = smt_node(c, &mut names, &mut defs, &mut vars);
        defs.push_str(&format!("(assert (= {n} #b1))\n"));
    }
    for (name, w) in vars {
        decls.push_str(&format!("(declare-fun |{name}| () (_ BitVec {w}))\n"));
    }
    out.push_str(&decls);
    out.push_str(&defs);
    out.push_str("(check-sat)\n(get-model)\n");
    out
}

fn smt_node(
    e: &Expr,
    names: &mut HashMap<usize, String>,
    defs: &mut String,
    vars: &mut BTreeMap<String, u32>,
) -> String {
    let w = e.width();
    if let Some(c) = e.as_const() {
        return format!("(_ bv{c} {w})");
    }
    if let Some(n) = names.get(&e.id()) {
        return n.clone();
    }
    let body = match e.kind() {
        Kind::Const(_) => unreachable!(),
        Kind::Var(n) => {
            vars.insert(n.to_string(), w);
            let s = format!("|{n}|");
            names.insert(e.id(), s.clone());
            return s;
        }
        Kind::Un(op, a) => {
            let a = smt_node(a, names, defs, vars);
            format!("({} {a})", if *op == UnOp::Not { "bvnot" } else { "bvneg" })
        }
        Kind::Bin(op, a, b) => {
            let (a, b) = (smt_node(a, names, defs, vars), smt_node(b, names, defs, vars));
            if op.is_compare() {
                format!("(ite ({} {a} {b}) #b1 #b0)", op.smt_name())
            } else {
                format!("({} {a} {b})", op.smt_name())
            }
        }
        Kind::Ite(c, a, b) => {
            let c = smt_node(c, names, defs, vars);
            let (a, b) = (smt_node(a, names, defs, vars), smt_node(b, names, defs, vars));
            format!("(ite (= {c} #b1) {a} {b})")
        }
        Kind::Extract(h, l, a) => format!("((_ extract {h} {l}) {})", smt_node(a, names, defs, vars)),
        Kind::Concat(a, b) => {
            let (a, b) = (smt_node(a, names, defs, vars), smt_node(b, names, defs, vars));
            format!("(concat {a} {b})")
        }
        Kind::Zext(a) => {
            let k = w - a.width();
            format!("((_ zero_extend {k}) {})", smt_node(a, names, defs, vars))
        }
        Kind::Sext(a) => {
            let k = w - a.width();
            format!("((_ sign_extend {k}) {})", smt_node(a, names, defs, vars))
        }
    };
    let name = format!("t{}", names.len());
    defs.push_str(&format!("(define-fun {name} () (_ BitVec {w}) {body})\n"));
    names.insert(e.id(), name.clone());
    name
}

fn external_check(path: &PathBuf, constraints: &[Expr], timeout: Duration) -> SatResult {
    let script = to_smtlib(constraints);
    let child = Command::new(path).arg("-in").stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::null()).spawn();
    let Ok(mut child) = child else {
        log::warn!("cannot start external solver {}", path.display());
        return SatResult::Unknown;
    };
    if let Some(mut stdin) = child.stdin.take() {
        let _ = stdin.write_all(script.as_bytes());
    }
    let deadline = Instant::now() + timeout;
    loop {
        match child.try_wait() {
            Ok(Some(_)) => break,
            Ok(None) if Instant::now() < deadline => std::thread::sleep(Duration::from_millis(2)),
            _ => {
                let _ = child.kill();
                let _ = child.wait();
                return SatResult::Unknown;
            }
        }
    }
    let Ok(output) = child.wait_with_output() else {
        return SatResult::Unknown;
    };
    parse_solver_output(&String::from_utf8_lossy(&output.stdout))
}

/// Parse `check-sat` followed by a `get-model` response.
pub fn parse_solver_output(text: &str) -> SatResult {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    match lines.next() {
        Some("sat") => {}
        Some("unsat") => return SatResult::Unsat,
        _ => return SatResult::Unknown,
    }
    let rest: String = lines.collect::<Vec<_>>().join(" ");
    let mut model = Model::new();
    let mut cursor = rest.as_str();
    while let Some(pos) = cursor.find("(define-fun ") {
        cursor = &cursor[pos + 12..];
        let (name, after) = if let Some(stripped) = cursor.strip_prefix('|') {
            let end = stripped.find('|').unwrap_or(0);
            (&stripped[..end], &stripped[end + 1..])
        } else {
            let end = cursor.find(char::is_whitespace).unwrap_or(cursor.len());
            (&cursor[..end], &cursor[end..])
        };
        let value = after.find('#').and_then(|i| {
            let lit = &after[i..];
            let end = lit.find(|c: char| c == ')' || c.is_whitespace()).unwrap_or(lit.len());
            let lit = &lit[..end];
            if let Some(hex) = lit.strip_prefix("#x") {
                u128::from_str_radix(hex, 16).ok()
            } else {
                lit.strip_prefix("#b").and_then(|b| u128::from_str_radix(b, 2).ok())
            }
        });
        if let Some(v) = value {
            model.insert(Arc::from(name), v);
        }
        cursor = after;
    }
    SatResult::Sat(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c64(v: u128) -> Expr {
        Expr::constant(v, 64)
    }

    #[test]
    fn simple_queries() {
        let s = Solver::default();
        let x = Expr::var("x", 64);
        assert_eq!(s.is_sat(&[x.eq(&c64(1))], &x.ne(&c64(1))), Some(false));
        assert_eq!(s.is_sat(&[], &Expr::tru()), Some(true));
        let sq = x.mul(&x).eq(&x);
        assert_eq!(s.is_sat(&[sq, x.ne(&c64(0))], &x.ne(&c64(1))), Some(false));
    }

    #[test]
    fn model_is_consistent() {
        let s = Solver::default();
        let x = Expr::var("x", 32);
        let y = Expr::var("y", 32);
        let cs = vec![
            x.add(&y).eq(&Expr::constant(100, 32)),
            x.ult(&Expr::constant(10, 32)),
            y.udiv(&Expr::constant(7, 32)).eq(&Expr::constant(13, 32)),
        ];
        match s.check(&cs) {
            SatResult::Sat(m) => assert!(model_satisfies(&m, &cs)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn division_and_shift_semantics_agree_with_eval() {
        let s = Solver::default();
        let a = Expr::var("a", 8);
        let b = Expr::var("b", 8);
        for op in [BinOp::UDiv, BinOp::URem, BinOp::SDiv, BinOp::SRem, BinOp::Shl, BinOp::LShr, BinOp::AShr] {
            for (av, bv) in [(200u128, 0u128), (0xf9, 2), (7, 9), (0x80, 0xff), (13, 3)] {
                let expect = super::super::expr::eval_bin(op, av, bv, 8);
                let r = Expr::bin(op, &a, &b);
                let cs = vec![a.eq(&Expr::constant(av, 8)), b.eq(&Expr::constant(bv, 8))];
                let holds = r.eq(&Expr::constant(expect, 8));
                assert_eq!(s.is_sat(&cs, &holds.not()), Some(false), "{op:?} {av} {bv}");
            }
        }
    }

    #[test]
    fn enumerate_values() {
        let s = Solver::default();
        let x = Expr::var("x", 8);
        let cs = vec![x.ult(&Expr::constant(3, 8))];
        let (mut vals, exhaustive) = s.enumerate(&cs, &x, 8);
        vals.sort();
        assert!(exhaustive);
        assert_eq!(vals, vec![0, 1, 2]);
        let (vals, exhaustive) = s.enumerate(&[], &x, 4);
        assert_eq!(vals.len(), 4);
        assert!(!exhaustive);
    }

    #[test]
    fn slicing_keeps_connected_constraints() {
        let x = Expr::var("x", 8);
        let y = Expr::var("y", 8);
        let z = Expr::var("z", 8);
        let cs = vec![x.eq(&y), z.eq(&Expr::constant(1, 8)), y.ult(&Expr::constant(4, 8))];
        let mut seed = BTreeSet::new();
        seed.insert(Arc::from("x"));
        let sl = slice(&cs, &seed);
        assert_eq!(sl.len(), 2);
    }

    #[test]
    fn parses_model_text() {
        let out = "sat\n(\n (define-fun |x| () (_ BitVec 8)\n  #x2a)\n (define-fun y () (_ BitVec 2) #b10)\n)";
        match parse_solver_output(out) {
            SatResult::Sat(m) => {
                assert_eq!(m.get("x"), Some(&42));
                assert_eq!(m.get("y"), Some(&2));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn smtlib_declares_variables() {
        let x = Expr::var("acc0_key0", 64);
        let text = to_smtlib(&[x.ult(&c64(5))]);
        assert!(text.contains("(declare-fun |acc0_key0| () (_ BitVec 64))"));
        assert!(text.contains("bvult"));
    }
}
