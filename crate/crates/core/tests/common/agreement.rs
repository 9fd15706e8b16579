//! Cross-checks between the reference interpreter, the crate's concrete VM
//! and the symbolic engine.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use solsym_core::bytecode::image::{load_program, ProgramImage};
use solsym_core::bytecode::interp::{Vm, VmExit};
use solsym_core::oracles::exploit::ReplaySyscalls;
use solsym_core::runtime::layout::*;
use solsym_core::runtime::{program_id_for, Runtime};
use solsym_core::symcore::{step, Model, Solver, SolverConfig};

use super::reference::{RefExit, RefVm};

const LIMIT: usize = 200_000;
const PROGRAM_OWNER: [u64; 4] = [0x5eed5eed00000001, 0x5eed5eed00000002, 0x5eed5eed00000003, 0x5eed5eed00000004];

pub struct Subject {
    pub image: ProgramImage,
    pub layout: InputLayout,
}

pub fn subject(name: &str, accounts: usize, max_data: u64) -> Subject {
    from_elf(&super::elf(name), accounts, max_data)
}

pub fn subject_from_source(src: &str, accounts: usize, max_data: u64) -> Subject {
    let asm = solsym_core::bytecode::asm::assemble(src).unwrap_or_else(|e| panic!("{e}\n{src}"));
    from_elf(&asm.to_elf(), accounts, max_data)
}

fn from_elf(elf: &[u8], accounts: usize, max_data: u64) -> Subject {
    let image = load_program(elf).unwrap();
    let layout = InputLayout::new(accounts, max_data, program_id_for(elf)).unwrap();
    Subject { image, layout }
}

/// A random assignment that respects the length pins. Owners are the
/// program id half of the time so owner checks pass on some inputs.
pub fn random_model(layout: &InputLayout, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::new();
    let mut set = |n: String, v: u128| {
        m.insert(Arc::from(n.as_str()), v);
    };
    for i in 0..layout.accounts {
        let owned = rng.gen_bool(0.5);
        for l in 0..4 {
            set(key_var(i, l), rng.gen::<u64>() as u128);
            let owner = if owned { PROGRAM_OWNER[l] } else { rng.gen::<u64>() };
            set(owner_var(i, l), owner as u128);
        }
        set(signer_var(i), rng.gen_bool(0.5) as u128);
        set(writable_var(i), rng.gen_bool(0.5) as u128);
        set(exec_var(i), 0);
        set(lamports_var(i), rng.gen::<u64>() as u128);
        set(data_len_var(i), layout.max_data as u128);
        for k in 0..layout.max_data.min(64) {
            // Small values make dispatch tags and flags hit their cases.
            let b: u8 = if rng.gen_bool(0.5) { rng.gen_range(0..4) } else { rng.gen() };
            set(data_var(i, k), b as u128);
        }
    }
    set(IX_LEN_VAR.to_string(), layout.ix_capacity as u128);
    for k in 0..layout.ix_capacity.min(16) {
        set(ix_var(k), rng.gen::<u8>() as u128);
    }
    m
}

fn same_exit(a: &VmExit, b: &RefExit) -> bool {
    matches!(
        (a, b),
        (VmExit::Exited(x), RefExit::Exited(y)) if x == y
    ) || matches!((a, b), (VmExit::Failed(_), RefExit::Failed(_)) | (VmExit::StepLimit, RefExit::StepLimit))
}

/// Runs both concrete interpreters and compares every (pc, registers)
/// pair. Returns the number of steps compared.
pub fn reference_agrees(image: &ProgramImage, input: &[u8]) -> Result<usize, String> {
    let mut vm = Vm::new(image, input.to_vec()).with_trace();
    let exit = vm.run(&mut ReplaySyscalls::default(), LIMIT as u64);
    let mut r = RefVm::new(image, input.to_vec());
    let rexit = r.run(LIMIT);
    let trace = vm.trace.take().unwrap();
    for (i, (a, b)) in trace.iter().zip(&r.trace).enumerate() {
        if a.pc != b.0 || a.regs != b.1 {
            return Err(format!("step {i}: vm pc {:#x} {:x?} vs reference pc {:#x} {:x?}", a.pc, a.regs, b.0, b.1));
        }
    }
    if trace.len() != r.trace.len() || !same_exit(&exit, &rexit) {
        return Err(format!("vm {exit:?} after {} steps, reference {rexit:?} after {}", trace.len(), r.trace.len()));
    }
    Ok(trace.len())
}

pub enum SymOutcome {
    /// Both executions followed the same path to the end.
    Agreed(usize),
    /// The engine pinned a symbolic pointer to a value the model does not
    /// take; comparison stops there.
    Concretized(usize),
}

/// Steps the symbolic engine, always following the successor whose new
/// constraints hold under `model`, and checks that its pc sequence and
/// register values match the concrete VM on the serialized model.
pub fn symbolic_agrees(s: &Subject, model: &Model) -> Result<SymOutcome, String> {
    let input = s.layout.serialize(model);
    let mut vm = Vm::new(&s.image, input).with_trace();
    vm.run(&mut ReplaySyscalls::default(), LIMIT as u64);
    let trace = vm.trace.take().unwrap();
    let visited = std::mem::take(&mut vm.visited);

    let solver = Arc::new(Solver::new(SolverConfig::default()));
    let rt = Runtime::new(Arc::new(s.image.clone()), solver, s.layout.clone());
    let mut st = rt.initial_state_for(rt.layout.clone());
    let lookup = |n: &str| Some(model.get(n).copied().unwrap_or(0));
    for c in &st.constraints {
        if c.eval(&lookup) == 0 {
            return Err("model violates the input constraints".into());
        }
    }
    let mut i = 0;
    while st.is_active() {
        let Some(&pc) = visited.get(i) else {
            return Err(format!("symbolic path continues past the concrete one at {:#x}", st.pc));
        };
        if st.pc != pc {
            return Err(format!("step {i}: symbolic pc {:#x}, concrete pc {pc:#x}", st.pc));
        }
        let known = st.constraints.len();
        let next = step(&rt, st).into_iter().find(|n| n.constraints[known.min(n.constraints.len())..].iter().all(|c| c.eval(&lookup) != 0));
        let Some(next) = next else {
            return Ok(SymOutcome::Concretized(i));
        };
        st = next;
        if let (true, Some(concrete)) = (st.is_active(), trace.get(i)) {
            for (r, e) in st.regs.iter().enumerate() {
                let v = e.eval(&lookup) as u64;
                if v != concrete.regs[r] {
                    return Err(format!("step {i} at {:#x}: r{r} symbolic {v:#x}, concrete {:#x}", concrete.pc, concrete.regs[r]));
                }
            }
        }
        i += 1;
    }
    if i != visited.len() {
        return Err(format!("symbolic path ended after {i} steps, concrete after {}", visited.len()));
    }
    Ok(SymOutcome::Agreed(i))
}
