//! Properties of the symbolic stepper: agreement with concrete execution,
//! exhaustive forks and sound merges.

mod common;

use std::sync::Arc;

use proptest::prelude::*;

use common::agreement::{random_model, subject_from_source, symbolic_agrees, Subject, SymOutcome};
use solsym_core::runtime::layout::data_var;
use solsym_core::runtime::Runtime;
use solsym_core::symcore::state::merge;
use solsym_core::symcore::{step, Model, Solver, SolverConfig, SymState};

/// Account 0 data starts 96 bytes into the input.
const DATA: i16 = 96;

fn runtime(s: &Subject) -> Runtime {
    Runtime::new(Arc::new(s.image.clone()), Arc::new(Solver::new(SolverConfig::default())), s.layout.clone())
}

fn with_byte(base: &Model, v: u8) -> Model {
    let mut m = base.clone();
    m.insert(Arc::from(data_var(0, 0).as_str()), v as u128);
    m
}

fn holds(st: &SymState, model: &Model) -> bool {
    let lookup = |n: &str| Some(model.get(n).copied().unwrap_or(0));
    st.constraints.iter().all(|c| c.eval(&lookup) != 0)
}

/// Steps a single path until it reaches `pc`, returning every successor
/// produced on the way that is still active.
fn run_to(rt: &Runtime, st: SymState, pc: u64) -> Vec<SymState> {
    let mut pending = vec![st];
    let mut out = Vec::new();
    while let Some(st) = pending.pop() {
        if st.pc == pc {
            out.push(st);
        } else if st.is_active() {
            pending.extend(step(rt, st));
        }
    }
    out
}

fn alu_line() -> impl Strategy<Value = String> {
    const OPS: [&str; 11] = ["add", "sub", "mul", "or", "and", "xor", "lsh", "rsh", "arsh", "mov", "div"];
    (
        prop::sample::select(&OPS[..]),
        prop::bool::ANY,
        2u8..6,
        prop_oneof![(2u8..6).prop_map(|r| format!("r{r}")), any::<i32>().prop_map(|i| i.to_string())],
        0u8..4,
    )
        .prop_map(|(op, wide, dst, operand, extra)| {
            let w = if wide { 64 } else { 32 };
            match (op, extra) {
                (_, 0) => format!("neg{w} r{dst}"),
                (_, 1) if wide => format!("be{} r{dst}", [16, 32, 64][dst as usize % 3]),
                ("lsh" | "rsh" | "arsh", _) if !operand.starts_with('r') => {
                    format!("{op}{w} r{dst}, {}", operand.parse::<i64>().unwrap().rem_euclid(w))
                }
                ("div", _) => {
                    let d = operand.trim_start_matches('r').parse::<i64>().unwrap_or(7).unsigned_abs().max(1) | 1;
                    format!("{}{w} r{dst}, {d}", if extra == 2 { "mod" } else { "div" })
                }
                _ => format!("{op}{w} r{dst}, {operand}"),
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// Straight-line ALU code evaluates to the concrete VM's registers
    /// under every model.
    #[test]
    fn step_matches_concrete_alu(lines in prop::collection::vec(alu_line(), 1..24), seed in any::<u64>()) {
        let src = format!(
            "entrypoint:\n    ldxdw r2, [r1+{DATA}]\n    ldxdw r3, [r1+{}]\n    ldxw r4, [r1+{}]\n    ldxb r5, [r1+{}]\n    {}\n    mov64 r0, r2\n    xor64 r0, r3\n    xor64 r0, r4\n    xor64 r0, r5\n    exit\n",
            DATA + 8, DATA + 16, DATA + 20, lines.join("\n    ")
        );
        let s = subject_from_source(&src, 1, 64);
        match symbolic_agrees(&s, &random_model(&s.layout, seed)) {
            Ok(SymOutcome::Agreed(_)) => {}
            Ok(SymOutcome::Concretized(at)) => prop_assert!(false, "no consistent successor at step {at}\n{src}"),
            Err(e) => prop_assert!(false, "{e}\n{src}"),
        }
    }

    /// For every value of the tested byte exactly one successor of a
    /// conditional jump is consistent.
    #[test]
    fn forks_partition_the_input(cond in prop::sample::select(&["jeq", "jne", "jgt", "jge", "jlt", "jle", "jset", "jsgt", "jsge", "jslt", "jsle"][..]), k in -3i32..260, seed in any::<u64>()) {
        let src = format!("entrypoint:\n    ldxb r2, [r1+{DATA}]\n    {cond} r2, {k}, yes\n    mov64 r0, 1\n    exit\nyes:\n    mov64 r0, 2\n    exit\n");
        let s = subject_from_source(&src, 1, 64);
        let rt = runtime(&s);
        let st = rt.initial_state_for(rt.layout.clone());
        let branch = run_to(&rt, st, 8).pop().unwrap();
        let succ = step(&rt, branch);
        let base = random_model(&s.layout, seed);
        for v in 0..=255u8 {
            let m = with_byte(&base, v);
            let n = succ.iter().filter(|st| holds(st, &m)).count();
            prop_assert_eq!(n, 1, "{} {} with byte {}", cond, k, v);
        }
    }

    /// A merged state carries, under each model, the registers and stack
    /// bytes of the branch that model selects.
    #[test]
    fn merge_preserves_branch_values(k in 0u8..=255, x in any::<i32>(), y in any::<i32>(), seed in any::<u64>()) {
        let src = format!(
            "entrypoint:\n    ldxb r2, [r1+{DATA}]\n    jeq r2, {k}, other\n    mov64 r3, {x}\n    stdw [r10-8], {y}\n    ja join\nother:\n    mov64 r3, {y}\n    stdw [r10-8], {x}\njoin:\n    ldxdw r4, [r10-8]\n    mov64 r0, r3\n    exit\n"
        );
        let s = subject_from_source(&src, 1, 64);
        let rt = runtime(&s);
        let join = s.image.instructions.iter().rev().nth(2).unwrap().address;
        let st = rt.initial_state_for(rt.layout.clone());
        let arms = run_to(&rt, st, join);
        prop_assert_eq!(arms.len(), 2);
        let merged = merge(arms);
        let after = run_to(&rt, merged, join + 8).pop().unwrap();
        let base = random_model(&s.layout, seed);
        for v in 0..=255u8 {
            let m = with_byte(&base, v);
            prop_assert!(holds(&after, &m));
            let lookup = |n: &str| Some(m.get(n).copied().unwrap_or(0));
            let (r3, r4) = if v == k { (y, x) } else { (x, y) };
            prop_assert_eq!(after.regs[3].eval(&lookup) as u64, r3 as i64 as u64);
            prop_assert_eq!(after.regs[4].eval(&lookup) as u64, r4 as i64 as u64);
        }
    }
}
