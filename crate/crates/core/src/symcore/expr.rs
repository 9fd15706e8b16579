//! Hash-consed bitvector expressions.
//!
//! Every term is a bitvector of width 1..=128; booleans are width 1.
//! Constructors fold constants and apply a handful of local rewrites, and
//! structurally equal terms share one allocation so equality is a pointer
//! comparison. Ordering uses a structural hash and never the address, which
//! keeps iteration orders reproducible.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::hash::{Hash, Hasher};
use std::sync::{Arc, LazyLock, Mutex, OnceLock, Weak};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnOp {
    Not,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    UDiv,
    URem,
    SDiv,
    SRem,
    And,
    Or,
    Xor,
    Shl,
    LShr,
    AShr,
    Eq,
    Ult,
    Ule,
    Slt,
    Sle,
}

impl BinOp {
    pub fn is_compare(self) -> bool {
        matches!(self, BinOp::Eq | BinOp::Ult | BinOp::Ule | BinOp::Slt | BinOp::Sle)
    }

    fn commutative(self) -> bool {
        matches!(self, BinOp::Add | BinOp::Mul | BinOp::And | BinOp::Or | BinOp::Xor | BinOp::Eq)
    }

    pub fn smt_name(self) -> &'static str {
        match self {
            BinOp::Add => "bvadd",
            BinOp::Sub => "bvsub",
            BinOp::Mul => "bvmul",
            BinOp::UDiv => "bvudiv",
            BinOp::URem => "bvurem",
            BinOp::SDiv => "bvsdiv",
            BinOp::SRem => "bvsrem",
            BinOp::And => "bvand",
            BinOp::Or => "bvor",
            BinOp::Xor => "bvxor",
            BinOp::Shl => "bvshl",
            BinOp::LShr => "bvlshr",
            BinOp::AShr => "bvashr",
            BinOp::Eq => "=",
            BinOp::Ult => "bvult",
            BinOp::Ule => "bvule",
            BinOp::Slt => "bvslt",
            BinOp::Sle => "bvsle",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Kind {
    Const(u128),
    Var(Arc<str>),
    Un(UnOp, Expr),
    Bin(BinOp, Expr, Expr),
    Ite(Expr, Expr, Expr),
    Extract(u32, u32, Expr),
    Concat(Expr, Expr),
    Zext(Expr),
    Sext(Expr),
}

pub struct Node {
    pub kind: Kind,
    pub width: u32,
    shash: u64,
    depth: u32,
    vars: OnceLock<Arc<BTreeSet<Arc<str>>>>,
}

/// A shared, interned expression node.
#[derive(Clone)]
pub struct Expr(Arc<Node>);

impl PartialEq for Expr {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}
impl Eq for Expr {}

impl Hash for Expr {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.0.shash.hash(state)
    }
}

impl PartialOrd for Expr {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Expr {
    /// Structural order: hash first, then a full structural comparison on
    /// collisions so the order never depends on addresses.
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        if self == other {
            return std::cmp::Ordering::Equal;
        }
        self.0
            .shash
            .cmp(&other.0.shash)
            .then_with(|| self.width().cmp(&other.width()))
            .then_with(|| self.to_string().cmp(&other.to_string()))
    }
}

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb)
}

fn structural_hash(kind: &Kind, width: u32) -> u64 {
    let mut h = mix(0x5151, width as u64);
    match kind {
        Kind::Const(c) => {
            h = mix(h, 1);
            h = mix(h, *c as u64);
            h = mix(h, (*c >> 64) as u64);
        }
        Kind::Var(name) => {
            h = mix(h, 2);
            for chunk in name.as_bytes().chunks(8) {
                let mut b = [0u8; 8];
                b[..chunk.len()].copy_from_slice(chunk);
                h = mix(h, u64::from_le_bytes(b));
            }
        }
        Kind::Un(op, a) => {
            h = mix(mix(h, 3), *op as u64);
            h = mix(h, a.0.shash);
        }
        Kind::Bin(op, a, b) => {
            h = mix(mix(h, 4), *op as u64);
            h = mix(mix(h, a.0.shash), b.0.shash);
        }
        Kind::Ite(c, a, b) => {
            h = mix(mix(mix(mix(h, 5), c.0.shash), a.0.shash), b.0.shash);
        }
        Kind::Extract(hi, lo, a) => {
            h = mix(mix(mix(mix(h, 6), *hi as u64), *lo as u64), a.0.shash);
        }
        Kind::Concat(a, b) => h = mix(mix(mix(h, 7), a.0.shash), b.0.shash),
        Kind::Zext(a) => h = mix(mix(h, 8), a.0.shash),
        Kind::Sext(a) => h = mix(mix(h, 9), a.0.shash),
    }
    h
}

/// Interning key: the node kind with children compared by address.
#[derive(PartialEq, Eq, Hash)]
enum Key {
    Const(u128, u32),
    Var(Arc<str>, u32),
    Un(UnOp, usize, u32),
    Bin(BinOp, usize, usize, u32),
    Ite(usize, usize, usize, u32),
    Extract(u32, u32, usize),
    Concat(usize, usize),
    Ext(bool, usize, u32),
}

fn addr(e: &Expr) -> usize {
    Arc::as_ptr(&e.0) as usize
}

fn key_of(kind: &Kind, width: u32) -> Key {
    match kind {
        Kind::Const(c) => Key::Const(*c, width),
        Kind::Var(n) => Key::Var(n.clone(), width),
        Kind::Un(op, a) => Key::Un(*op, addr(a), width),
        Kind::Bin(op, a, b) => Key::Bin(*op, addr(a), addr(b), width),
        Kind::Ite(c, a, b) => Key::Ite(addr(c), addr(a), addr(b), width),
        Kind::Extract(h, l, a) => Key::Extract(*h, *l, addr(a)),
        Kind::Concat(a, b) => Key::Concat(addr(a), addr(b)),
        Kind::Zext(a) => Key::Ext(false, addr(a), width),
        Kind::Sext(a) => Key::Ext(true, addr(a), width),
    }
}

struct Interner {
    map: HashMap<Key, Weak<Node>>,
    purge_at: usize,
}

static INTERNER: LazyLock<Mutex<Interner>> =
    LazyLock::new(|| Mutex::new(Interner { map: HashMap::new(), purge_at: 1 << 16 }));

fn intern(kind: Kind, width: u32) -> Expr {
    debug_assert!((1..=128).contains(&width), "width {width}");
    let key = key_of(&kind, width);
    let mut guard = INTERNER.lock().unwrap_or_else(|p| p.into_inner());
    if let Some(node) = guard.map.get(&key).and_then(Weak::upgrade) {
        return Expr(node);
    }
    let depth = 1 + match &kind {
        Kind::Const(_) | Kind::Var(_) => 0,
        Kind::Un(_, a) | Kind::Extract(_, _, a) | Kind::Zext(a) | Kind::Sext(a) => a.0.depth,
        Kind::Bin(_, a, b) | Kind::Concat(a, b) => a.0.depth.max(b.0.depth),
        Kind::Ite(c, a, b) => c.0.depth.max(a.0.depth).max(b.0.depth),
    };
    let node = Arc::new(Node { shash: structural_hash(&kind, width), kind, width, depth, vars: OnceLock::new() });
    guard.map.insert(key, Arc::downgrade(&node));
    if guard.map.len() > guard.purge_at {
        guard.map.retain(|_, w| w.strong_count() > 0);
        guard.purge_at = (guard.map.len() * 2).max(1 << 16);
    }
    Expr(node)
}

pub fn mask(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

fn to_signed(v: u128, width: u32) -> i128 {
    if width == 128 {
        return v as i128;
    }
    let sign = 1u128 << (width - 1);
    if v & sign != 0 {
        (v | !mask(width)) as i128
    } else {
        v as i128
    }
}

/// Concrete semantics of binary operators (SMT-LIB conventions for division by zero).
pub fn eval_bin(op: BinOp, a: u128, b: u128, width: u32) -> u128 {
    let m = mask(width);
    let r = match op {
        BinOp::Add => a.wrapping_add(b),
        BinOp::Sub => a.wrapping_sub(b),
        BinOp::Mul => a.wrapping_mul(b),
        BinOp::UDiv => {
            if b == 0 {
                m
            } else {
                a / b
            }
        }
        BinOp::URem => {
            if b == 0 {
                a
            } else {
                a % b
            }
        }
        BinOp::SDiv => {
            let (sa, sb) = (to_signed(a, width), to_signed(b, width));
            let (ua, ub) = (sa.unsigned_abs() & m, sb.unsigned_abs() & m);
            let q = eval_bin(BinOp::UDiv, ua, ub, width);
            if (sa < 0) != (sb < 0) {
                q.wrapping_neg()
            } else {
                q
            }
        }
        BinOp::SRem => {
            let (sa, sb) = (to_signed(a, width), to_signed(b, width));
            let (ua, ub) = (sa.unsigned_abs() & m, sb.unsigned_abs() & m);
            let r = eval_bin(BinOp::URem, ua, ub, width);
            if sa < 0 {
                r.wrapping_neg()
            } else {
                r
            }
        }
        BinOp::And => a & b,
        BinOp::Or => a | b,
        BinOp::Xor => a ^ b,
        BinOp::Shl => {
            if b >= width as u128 {
                0
            } else {
                a << b
            }
        }
        BinOp::LShr => {
            if b >= width as u128 {
                0
            } else {
                a >> b
            }
        }
        BinOp::AShr => {
            let s = to_signed(a, width);
            if b >= width as u128 {
                if s < 0 {
                    m
                } else {
                    0
                }
            } else {
                (s >> b) as u128
            }
        }
        BinOp::Eq => (a == b) as u128,
        BinOp::Ult => (a < b) as u128,
        BinOp::Ule => (a <= b) as u128,
        BinOp::Slt => (to_signed(a, width) < to_signed(b, width)) as u128,
        BinOp::Sle => (to_signed(a, width) <= to_signed(b, width)) as u128,
    };
    if op.is_compare() {
        r
    } else {
        r & m
    }
}

impl Expr {
    pub fn width(&self) -> u32 {
        self.0.width
    }

    pub fn kind(&self) -> &Kind {
        &self.0.kind
    }

    pub fn depth(&self) -> u32 {
        self.0.depth
    }

    pub fn structural_hash(&self) -> u64 {
        self.0.shash
    }

    pub fn as_const(&self) -> Option<u128> {
        match self.kind() {
            Kind::Const(c) => Some(*c),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        self.as_const().map(|c| c as u64)
    }

    pub fn is_const(&self) -> bool {
        self.as_const().is_some()
    }

    pub fn is_true(&self) -> bool {
        self.width() == 1 && self.as_const() == Some(1)
    }

    pub fn is_false(&self) -> bool {
        self.width() == 1 && self.as_const() == Some(0)
    }

    pub fn var_name(&self) -> Option<&str> {
        match self.kind() {
            Kind::Var(n) => Some(n),
            _ => None,
        }
    }

    /// Free variables, cached per node.
    pub fn vars(&self) -> Arc<BTreeSet<Arc<str>>> {
        self.0
            .vars
            .get_or_init(|| {
                let mut set = BTreeSet::new();
                match self.kind() {
                    Kind::Const(_) => {}
                    Kind::Var(n) => {
                        set.insert(n.clone());
                    }
                    Kind::Un(_, a) | Kind::Extract(_, _, a) | Kind::Zext(a) | Kind::Sext(a) => {
                        return a.vars();
                    }
                    Kind::Bin(_, a, b) | Kind::Concat(a, b) => {
                        let (va, vb) = (a.vars(), b.vars());
                        if vb.is_empty() {
                            return va;
                        }
                        if va.is_empty() {
                            return vb;
                        }
                        set.extend(va.iter().cloned());
                        set.extend(vb.iter().cloned());
                    }
                    Kind::Ite(c, a, b) => {
                        for v in [c.vars(), a.vars(), b.vars()] {
                            set.extend(v.iter().cloned());
                        }
                    }
                }
                Arc::new(set)
            })
            .clone()
    }

    // ---- leaves ----

    pub fn constant(value: u128, width: u32) -> Expr {
        intern(Kind::Const(value & mask(width)), width)
    }

    pub fn var(name: &str, width: u32) -> Expr {
        intern(Kind::Var(Arc::from(name)), width)
    }

    pub fn bool(b: bool) -> Expr {
        Expr::constant(b as u128, 1)
    }

    pub fn tru() -> Expr {
        static T: OnceLock<Expr> = OnceLock::new();
        T.get_or_init(|| Expr::constant(1, 1)).clone()
    }

    pub fn fals() -> Expr {
        static F: OnceLock<Expr> = OnceLock::new();
        F.get_or_init(|| Expr::constant(0, 1)).clone()
    }

    pub fn zero_byte() -> Expr {
        static Z: OnceLock<Expr> = OnceLock::new();
        Z.get_or_init(|| Expr::constant(0, 8)).clone()
    }

    // ---- unary ----

    pub fn not(&self) -> Expr {
        let w = self.width();
        if let Some(c) = self.as_const() {
            return Expr::constant(!c, w);
        }
        match self.kind() {
            Kind::Un(UnOp::Not, a) => return a.clone(),
            Kind::Ite(c, a, b) if a.is_const() && b.is_const() => return Expr::ite(c, &a.not(), &b.not()),
            _ => {}
        }
        intern(Kind::Un(UnOp::Not, self.clone()), w)
    }

    pub fn neg(&self) -> Expr {
        let w = self.width();
        if let Some(c) = self.as_const() {
            return Expr::constant(c.wrapping_neg(), w);
        }
        if let Kind::Un(UnOp::Neg, a) = self.kind() {
            return a.clone();
        }
        intern(Kind::Un(UnOp::Neg, self.clone()), w)
    }

    // ---- binary ----

    pub fn bin(op: BinOp, a: &Expr, b: &Expr) -> Expr {
        assert_eq!(a.width(), b.width(), "width mismatch in {op:?}");
        let w = a.width();
        let rw = if op.is_compare() { 1 } else { w };
        if let (Some(x), Some(y)) = (a.as_const(), b.as_const()) {
            return Expr::constant(eval_bin(op, x, y, w), rw);
        }
        // Constants to the right for commutative operators.
        let (a, b) = if op.commutative() && a.is_const() { (b, a) } else { (a, b) };
        if let Some(e) = simplify_bin(op, a, b, w) {
            return e;
        }
        let (a, b) = if op.commutative() && !b.is_const() && a > b { (b, a) } else { (a, b) };
        intern(Kind::Bin(op, a.clone(), b.clone()), rw)
    }

    pub fn add(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Add, self, o)
    }
    pub fn sub(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Sub, self, o)
    }
    pub fn mul(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Mul, self, o)
    }
    pub fn udiv(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::UDiv, self, o)
    }
    pub fn urem(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::URem, self, o)
    }
    pub fn sdiv(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::SDiv, self, o)
    }
    pub fn srem(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::SRem, self, o)
    }
    pub fn and(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::And, self, o)
    }
    pub fn or(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Or, self, o)
    }
    pub fn xor(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Xor, self, o)
    }
    pub fn shl(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Shl, self, o)
    }
    pub fn lshr(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::LShr, self, o)
    }
    pub fn ashr(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::AShr, self, o)
    }
    pub fn eq(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Eq, self, o)
    }
    pub fn ne(&self, o: &Expr) -> Expr {
        self.eq(o).not()
    }
    pub fn ult(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Ult, self, o)
    }
    pub fn ule(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Ule, self, o)
    }
    pub fn slt(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Slt, self, o)
    }
    pub fn sle(&self, o: &Expr) -> Expr {
        Expr::bin(BinOp::Sle, self, o)
    }

    /// Boolean conjunction over width-1 terms.
    pub fn all(items: impl IntoIterator<Item = Expr>) -> Expr {
        items.into_iter().fold(Expr::tru(), |acc, e| acc.and(&e))
    }

    pub fn any(items: impl IntoIterator<Item = Expr>) -> Expr {
        items.into_iter().fold(Expr::fals(), |acc, e| acc.or(&e))
    }

    pub fn implies(&self, o: &Expr) -> Expr {
        self.not().or(o)
    }

    // ---- structure ----

    pub fn ite(c: &Expr, a: &Expr, b: &Expr) -> Expr {
        assert_eq!(c.width(), 1);
        assert_eq!(a.width(), b.width());
        if let Some(v) = c.as_const() {
            return if v == 1 { a.clone() } else { b.clone() };
        }
        if a == b {
            return a.clone();
        }
        if a.width() == 1 {
            if a.is_true() && b.is_false() {
                return c.clone();
            }
            if a.is_false() && b.is_true() {
                return c.not();
            }
        }
        // Canonical polarity: the condition is never a negation.
        if let Kind::Un(UnOp::Not, inner) = c.kind() {
            return Expr::ite(inner, b, a);
        }
        intern(Kind::Ite(c.clone(), a.clone(), b.clone()), a.width())
    }

    pub fn extract(&self, hi: u32, lo: u32) -> Expr {
        assert!(hi >= lo && hi < self.width(), "extract {hi}:{lo} of width {}", self.width());
        let w = hi - lo + 1;
        if w == self.width() {
            return self.clone();
        }
        if let Some(c) = self.as_const() {
            return Expr::constant(c >> lo, w);
        }
        match self.kind() {
            Kind::Extract(_, l2, inner) => return inner.extract(hi + l2, lo + l2),
            Kind::Concat(a, b) => {
                let bw = b.width();
                if hi < bw {
                    return b.extract(hi, lo);
                }
                if lo >= bw {
                    return a.extract(hi - bw, lo - bw);
                }
            }
            Kind::Zext(a) => {
                let aw = a.width();
                if hi < aw {
                    return a.extract(hi, lo);
                }
                if lo >= aw {
                    return Expr::constant(0, w);
                }
                return a.extract(aw - 1, lo).zext(w);
            }
            Kind::Sext(a) if hi < a.width() => return a.extract(hi, lo),
            Kind::Ite(c, a, b) if a.is_const() && b.is_const() => {
                return Expr::ite(c, &a.extract(hi, lo), &b.extract(hi, lo));
            }
            Kind::Bin(op @ (BinOp::And | BinOp::Or | BinOp::Xor), a, b) => {
                return Expr::bin(*op, &a.extract(hi, lo), &b.extract(hi, lo));
            }
            Kind::Bin(op @ (BinOp::Add | BinOp::Sub | BinOp::Mul), a, b) if lo == 0 => {
                return Expr::bin(*op, &a.extract(hi, 0), &b.extract(hi, 0));
            }
            _ => {}
        }
        intern(Kind::Extract(hi, lo, self.clone()), w)
    }

    /// `self` becomes the high part.
    pub fn concat(&self, low: &Expr) -> Expr {
        let w = self.width() + low.width();
        if let (Some(h), Some(l)) = (self.as_const(), low.as_const()) {
            return Expr::constant(h << low.width() | l, w);
        }
        if let (Kind::Extract(h1, l1, x), Kind::Extract(h2, l2, y)) = (self.kind(), low.kind()) {
            if x == y && *l1 == h2 + 1 {
                return x.extract(*h1, *l2);
            }
        }
        // Zero high part is a zero extension.
        if self.as_const() == Some(0) {
            return low.zext(w);
        }
        // Re-associate so adjacent extracts can meet: a ++ (b ++ c).
        if let Kind::Concat(b, c) = low.kind() {
            if let (Kind::Extract(_, l1, x), Kind::Extract(h2, _, y)) = (self.kind(), b.kind()) {
                if x == y && *l1 == h2 + 1 {
                    return self.concat(b).concat(c);
                }
            }
        }
        intern(Kind::Concat(self.clone(), low.clone()), w)
    }

    pub fn zext(&self, width: u32) -> Expr {
        assert!(width >= self.width());
        if width == self.width() {
            return self.clone();
        }
        if let Some(c) = self.as_const() {
            return Expr::constant(c, width);
        }
        match self.kind() {
            Kind::Zext(a) => return a.zext(width),
            Kind::Ite(c, a, b) if a.is_const() && b.is_const() => return Expr::ite(c, &a.zext(width), &b.zext(width)),
            _ => {}
        }
        intern(Kind::Zext(self.clone()), width)
    }

    pub fn sext(&self, width: u32) -> Expr {
        assert!(width >= self.width());
        if width == self.width() {
            return self.clone();
        }
        if let Some(c) = self.as_const() {
            return Expr::constant(to_signed(c, self.width()) as u128, width);
        }
        match self.kind() {
            Kind::Sext(a) => return a.sext(width),
            Kind::Ite(c, a, b) if a.is_const() && b.is_const() => return Expr::ite(c, &a.sext(width), &b.sext(width)),
            _ => {}
        }
        intern(Kind::Sext(self.clone()), width)
    }

    /// Concrete evaluation; unassigned variables read as zero.
    pub fn eval(&self, model: &dyn Fn(&str) -> Option<u128>) -> u128 {
        let mut memo: HashMap<usize, u128> = HashMap::new();
        self.eval_memo(model, &mut memo)
    }

    pub fn eval_memo(&self, model: &dyn Fn(&str) -> Option<u128>, memo: &mut HashMap<usize, u128>) -> u128 {
        if let Some(c) = self.as_const() {
            return c;
        }
        if let Some(v) = memo.get(&addr(self)) {
            return *v;
        }
        let w = self.width();
        let v = match self.kind() {
            Kind::Const(c) => *c,
            Kind::Var(n) => model(n).unwrap_or(0) & mask(w),
            Kind::Un(UnOp::Not, a) => !a.eval_memo(model, memo) & mask(w),
            Kind::Un(UnOp::Neg, a) => a.eval_memo(model, memo).wrapping_neg() & mask(w),
            Kind::Bin(op, a, b) => {
                let (x, y) = (a.eval_memo(model, memo), b.eval_memo(model, memo));
                eval_bin(*op, x, y, a.width())
            }
            Kind::Ite(c, a, b) => {
                if c.eval_memo(model, memo) == 1 {
                    a.eval_memo(model, memo)
                } else {
                    b.eval_memo(model, memo)
                }
            }
            Kind::Extract(_, lo, a) => (a.eval_memo(model, memo) >> lo) & mask(w),
            Kind::Concat(a, b) => a.eval_memo(model, memo) << b.width() | b.eval_memo(model, memo),
            Kind::Zext(a) => a.eval_memo(model, memo),
            Kind::Sext(a) => to_signed(a.eval_memo(model, memo), a.width()) as u128 & mask(w),
        };
        memo.insert(addr(self), v);
        v
    }

    /// Replace variables by expressions.
    pub fn substitute(&self, map: &dyn Fn(&str) -> Option<Expr>) -> Expr {
        let mut memo = HashMap::new();
        self.subst_memo(map, &mut memo)
    }

    fn subst_memo(&self, map: &dyn Fn(&str) -> Option<Expr>, memo: &mut HashMap<usize, Expr>) -> Expr {
        if self.vars().is_empty() {
            return self.clone();
        }
        if let Some(e) = memo.get(&addr(self)) {
            return e.clone();
        }
        let r = match self.kind() {
            Kind::Const(_) => self.clone(),
            Kind::Var(n) => map(n).unwrap_or_else(|| self.clone()),
            Kind::Un(UnOp::Not, a) => a.subst_memo(map, memo).not(),
            Kind::Un(UnOp::Neg, a) => a.subst_memo(map, memo).neg(),
            Kind::Bin(op, a, b) => Expr::bin(*op, &a.subst_memo(map, memo), &b.subst_memo(map, memo)),
            Kind::Ite(c, a, b) => {
                Expr::ite(&c.subst_memo(map, memo), &a.subst_memo(map, memo), &b.subst_memo(map, memo))
            }
            Kind::Extract(h, l, a) => a.subst_memo(map, memo).extract(*h, *l),
            Kind::Concat(a, b) => a.subst_memo(map, memo).concat(&b.subst_memo(map, memo)),
            Kind::Zext(a) => a.subst_memo(map, memo).zext(self.width()),
            Kind::Sext(a) => a.subst_memo(map, memo).sext(self.width()),
        };
        memo.insert(addr(self), r.clone());
        r
    }

    /// Identity usable as a map key within one process run.
    pub fn id(&self) -> usize {
        addr(self)
    }
}

fn simplify_bin(op: BinOp, a: &Expr, b: &Expr, w: u32) -> Option<Expr> {
    let bc = b.as_const();
    let ones = mask(w);
    match op {
        BinOp::Add => {
            if bc == Some(0) {
                return Some(a.clone());
            }
            // (x + c1) + c2 -> x + (c1 + c2)
            if let (Some(c2), Kind::Bin(BinOp::Add, x, c1)) = (bc, a.kind()) {
                if let Some(c1) = c1.as_const() {
                    return Some(x.add(&Expr::constant(c1.wrapping_add(c2), w)));
                }
            }
        }
        BinOp::Sub => {
            if bc == Some(0) {
                return Some(a.clone());
            }
            if a == b {
                return Some(Expr::constant(0, w));
            }
            if let Some(c) = bc {
                return Some(a.add(&Expr::constant(c.wrapping_neg(), w)));
            }
        }
        BinOp::Mul => match bc {
            Some(0) => return Some(Expr::constant(0, w)),
            Some(1) => return Some(a.clone()),
            _ => {}
        },
        BinOp::UDiv if bc == Some(1) => return Some(a.clone()),
        BinOp::And => {
            if bc == Some(0) {
                return Some(Expr::constant(0, w));
            }
            if bc == Some(ones) || a == b {
                return Some(a.clone());
            }
            if w == 1 && (a.not() == *b) {
                return Some(Expr::fals());
            }
        }
        BinOp::Or => {
            if bc == Some(0) || a == b {
                return Some(a.clone());
            }
            if bc == Some(ones) {
                return Some(Expr::constant(ones, w));
            }
            if w == 1 && (a.not() == *b) {
                return Some(Expr::tru());
            }
        }
        BinOp::Xor => {
            if bc == Some(0) {
                return Some(a.clone());
            }
            if a == b {
                return Some(Expr::constant(0, w));
            }
            if bc == Some(ones) {
                return Some(a.not());
            }
        }
        BinOp::Shl | BinOp::LShr | BinOp::AShr if bc == Some(0) => return Some(a.clone()),
        BinOp::Eq => {
            if a == b {
                return Some(Expr::tru());
            }
            if let Some(c) = bc {
                if w == 1 {
                    return Some(if c == 1 { a.clone() } else { a.not() });
                }
                match a.kind() {
                    Kind::Zext(x) => {
                        return Some(if c >> x.width() != 0 {
                            Expr::fals()
                        } else {
                            x.eq(&Expr::constant(c, x.width()))
                        });
                    }
                    Kind::Ite(cond, t, f) if t.is_const() && f.is_const() => {
                        let (tv, fv) = (t.as_const() == Some(c), f.as_const() == Some(c));
                        return Some(match (tv, fv) {
                            (true, true) => Expr::tru(),
                            (true, false) => cond.clone(),
                            (false, true) => cond.not(),
                            (false, false) => Expr::fals(),
                        });
                    }
                    Kind::Concat(hi, lo) if hi.is_const() || lo.is_const() => {
                        let lw = lo.width();
                        let ch = Expr::constant(c >> lw, hi.width());
                        let cl = Expr::constant(c, lw);
                        return Some(hi.eq(&ch).and(&lo.eq(&cl)));
                    }
                    Kind::Bin(BinOp::Add, x, k) if k.is_const() => {
                        return Some(x.eq(&Expr::constant(c.wrapping_sub(k.as_const().unwrap()), w)));
                    }
                    _ => {}
                }
            }
        }
        BinOp::Ult => {
            if bc == Some(0) || a == b {
                return Some(Expr::fals());
            }
        }
        BinOp::Ule => {
            if bc == Some(ones) || a == b || a.as_const() == Some(0) {
                return Some(Expr::tru());
            }
        }
        BinOp::Slt if a == b => return Some(Expr::fals()),
        BinOp::Sle if a == b => return Some(Expr::tru()),
        _ => {}
    }
    None
}

impl fmt::Debug for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl fmt::Display for Expr {
    /// Compact prefix rendering, mainly for diagnostics and tests.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind() {
            Kind::Const(c) => write!(f, "{c:#x}:{}", self.width()),
            Kind::Var(n) => write!(f, "{n}"),
            Kind::Un(op, a) => write!(f, "({} {a})", if *op == UnOp::Not { "not" } else { "neg" }),
            Kind::Bin(op, a, b) => write!(f, "({} {a} {b})", op.smt_name()),
            Kind::Ite(c, a, b) => write!(f, "(ite {c} {a} {b})"),
            Kind::Extract(h, l, a) => write!(f, "(extract {h} {l} {a})"),
            Kind::Concat(a, b) => write!(f, "(concat {a} {b})"),
            Kind::Zext(a) => write!(f, "(zext {} {a})", self.width()),
            Kind::Sext(a) => write!(f, "(sext {} {a})", self.width()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interning_shares_nodes() {
        let x = Expr::var("x", 64);
        let a = x.add(&Expr::constant(1, 64));
        let b = Expr::var("x", 64).add(&Expr::constant(1, 64));
        assert_eq!(a, b);
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn folds_constants() {
        let c = Expr::constant(6, 64).mul(&Expr::constant(7, 64));
        assert_eq!(c.as_const(), Some(42));
        assert_eq!(Expr::constant(5, 8).udiv(&Expr::constant(0, 8)).as_const(), Some(0xff));
        assert_eq!(Expr::constant(0x80, 8).sext(16).as_const(), Some(0xff80));
    }

    #[test]
    fn concat_of_adjacent_extracts_collapses() {
        let x = Expr::var("k", 64);
        let bytes: Vec<Expr> = (0..8).map(|i| x.extract(8 * i + 7, 8 * i)).collect();
        let mut acc = bytes[7].clone();
        for b in bytes[..7].iter().rev() {
            acc = acc.concat(b);
        }
        assert_eq!(acc, x);
    }

    #[test]
    fn ite_rules() {
        let c = Expr::var("c", 1);
        let x = Expr::var("x", 8);
        assert_eq!(Expr::ite(&c, &x, &x), x);
        let s = Expr::var("s", 8);
        let flag = Expr::ite(&s.eq(&Expr::constant(0, 8)), &Expr::constant(0, 8), &Expr::constant(1, 8));
        let test = flag.zext(64).eq(&Expr::constant(0, 64));
        assert_eq!(test, s.eq(&Expr::constant(0, 8)));
    }

    #[test]
    fn eval_matches_folding() {
        let x = Expr::var("x", 32);
        let e = x.mul(&Expr::constant(3, 32)).sub(&Expr::constant(1, 32)).extract(15, 0).sext(32);
        let v = e.eval(&|n| (n == "x").then_some(0x7000));
        let folded = e.substitute(&|n| (n == "x").then(|| Expr::constant(0x7000, 32)));
        assert_eq!(folded.as_const(), Some(v));
    }

    #[test]
    fn signed_division_semantics() {
        assert_eq!(eval_bin(BinOp::SDiv, 0xf9, 2, 8), 0xfd); // -7 / 2 = -3
        assert_eq!(eval_bin(BinOp::SRem, 0xf9, 2, 8), 0xff); // -7 % 2 = -1
        assert_eq!(eval_bin(BinOp::SDiv, 5, 0, 8), 0xff);
        assert_eq!(eval_bin(BinOp::SDiv, 0xfb, 0, 8), 1);
    }
}
