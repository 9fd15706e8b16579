//! Exploit synthesis and concrete replay.

use std::sync::Arc;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bytecode::image::ProgramImage;
use crate::bytecode::interp::{
    basic_syscall, fault, ConcreteMemory, Syscalls, Vm, VmError, VmExit, HEAP_SIZE, MM_HEAP_START,
};
use crate::runtime::layout::{data_len_var, ConcreteAccount, InputLayout, IX_LEN_VAR};
use crate::runtime::syscalls::{PDA_BUMP, PDA_MARKER};
use crate::symcore::expr::Expr;
use crate::symcore::solver::{Model, SatResult};
use crate::symcore::state::SymState;

use super::checks::prefer_max_lengths;
use super::OracleCtx;

/// Instruction budget for one concrete replay.
pub const REPLAY_STEP_LIMIT: u64 = 50_000_000;
const PDA_ROUNDS: usize = 8;

#[derive(Clone, Debug, Serialize)]
pub struct Sidecar {
    pub program_id: String,
    pub accounts: Vec<ConcreteAccount>,
    pub instruction_data: String,
    pub site: u64,
    pub replay: Replay,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Replay {
    pub reached_site: bool,
    pub outcome: String,
    pub steps: u64,
}

#[derive(Clone, Debug)]
pub struct Exploit {
    pub input: Vec<u8>,
    pub sidecar: Sidecar,
}

/// Concrete syscall behaviour matching the symbolic models: CPI succeeds,
/// PDAs hash with bump 255, the heap is a top-down bump allocator.
#[derive(Default)]
pub struct ReplaySyscalls {
    pub log: Vec<String>,
    pub invoked: Vec<u64>,
    heap_used: u64,
}

fn seeds(mem: &mut ConcreteMemory, ptr: u64, n: u64, pc: u64) -> Result<Option<Vec<u8>>, VmError> {
    if n > 16 {
        return Ok(None);
    }
    let mut out = Vec::new();
    for s in 0..n {
        let p = mem.read_u64(ptr + 16 * s).ok_or_else(|| fault(pc, ptr, 16))?;
        let l = mem.read_u64(ptr + 16 * s + 8).ok_or_else(|| fault(pc, ptr, 16))?;
        if l > 32 {
            return Ok(None);
        }
        out.extend(mem.read(p, l).ok_or_else(|| fault(pc, p, l))?);
    }
    Ok(Some(out))
}

pub fn derive(input: &[u8]) -> [u8; 32] {
    Sha256::digest(input).into()
}

impl Syscalls for ReplaySyscalls {
    fn call(&mut self, name: &str, a: [u64; 5], mem: &mut ConcreteMemory, pc: u64) -> Result<u64, VmError> {
        if let Some(r) = basic_syscall(name, a, mem, pc, &mut self.log) {
            return r;
        }
        match name {
            "sol_invoke_signed_c" | "sol_invoke_signed_rust" => {
                self.invoked.push(pc);
                Ok(0)
            }
            "sol_create_program_address" | "sol_try_find_program_address" => {
                let Some(mut input) = seeds(mem, a[0], a[1], pc)? else { return Ok(1) };
                let find = name == "sol_try_find_program_address";
                if find {
                    input.push(PDA_BUMP);
                }
                input.extend(mem.read(a[2], 32).ok_or_else(|| fault(pc, a[2], 32))?);
                input.extend_from_slice(PDA_MARKER);
                let key = derive(&input);
                mem.write(a[3], &key).ok_or_else(|| fault(pc, a[3], 32))?;
                if find {
                    mem.write(a[4], &[PDA_BUMP]).ok_or_else(|| fault(pc, a[4], 1))?;
                }
                Ok(0)
            }
            "sol_alloc_free_" => {
                if a[1] != 0 {
                    return Ok(0);
                }
                let used = (self.heap_used + a[0] + 7) & !7;
                if used > HEAP_SIZE {
                    return Ok(0);
                }
                self.heap_used = used;
                Ok(MM_HEAP_START + HEAP_SIZE - used)
            }
            _ => Err(VmError::UnknownSyscall { name: name.to_string() }),
        }
    }
}

/// Run the program concretely on `input` and report whether `site` executed.
pub fn replay(image: &ProgramImage, input: Vec<u8>, site: u64) -> Replay {
    let mut vm = Vm::new(image, input);
    let mut sys = ReplaySyscalls::default();
    let exit = vm.run(&mut sys, REPLAY_STEP_LIMIT);
    let outcome = match exit {
        VmExit::Exited(code) => format!("exited {code}"),
        VmExit::Failed(e) => format!("failed: {e}"),
        VmExit::StepLimit => "step limit".to_string(),
    };
    Replay { reached_site: vm.visited.contains(&site), outcome, steps: vm.steps }
}

/// Lengths absent from the model keep their maximum so the serialized
/// offsets match the ones assumed during execution.
fn complete(layout: &InputLayout, mut model: Model) -> Model {
    for i in 0..layout.accounts {
        model.entry(Arc::from(data_len_var(i))).or_insert(layout.max_data as u128);
    }
    model.entry(Arc::from(IX_LEN_VAR)).or_insert(layout.ix_capacity as u128);
    model
}

fn eval_bytes(bytes: &[Expr], model: &Model) -> Vec<u8> {
    bytes.iter().map(|b| b.eval(&|n| model.get(n).copied()) as u8).collect()
}

/// Constrain derived addresses to their real hash values until the model
/// is consistent with the concrete derivation.
fn fix_derived(ctx: &OracleCtx, st: &SymState, cs: &mut Vec<Expr>, mut model: Model) -> Option<Model> {
    for _ in 0..PDA_ROUNDS {
        let mut changed = false;
        for app in &st.ledger.pda {
            let key = derive(&eval_bytes(&app.input, &model));
            for (l, out) in app.output.iter().enumerate() {
                let want = u64::from_le_bytes(key[8 * l..8 * l + 8].try_into().unwrap()) as u128;
                if out.eval(&|n| model.get(n).copied()) != want {
                    cs.push(out.eq(&Expr::constant(want, 64)));
                    changed = true;
                }
            }
        }
        if !changed {
            return Some(model);
        }
        model = match ctx.rt.solver.check(cs) {
            SatResult::Sat(m) => m,
            _ => return None,
        };
    }
    None
}

/// Concretize the path into a serialized input and replay it. `None` means
/// no model could be produced (unsat or timeout).
pub fn synthesize_exploit(ctx: &OracleCtx, st: &SymState, witness: Option<Model>, site: u64) -> Option<Exploit> {
    let mut cs = st.query_constraints();
    let model = match witness {
        Some(m) => m,
        None => match prefer_max_lengths(ctx, st, &cs) {
            Some(m) => m,
            None => match ctx.rt.solver.check(&cs) {
                SatResult::Sat(m) => m,
                _ => return None,
            },
        },
    };
    let model = if st.ledger.pda.is_empty() {
        model
    } else {
        // Keep the witness's own assignments fixed where possible.
        cs.extend(model.iter().filter(|(n, _)| n.contains("_signer")).map(|(n, v)| Expr::var(n, 8).eq(&Expr::constant(*v, 8))));
        fix_derived(ctx, st, &mut cs, model)?
    };
    let layout = &st.layout;
    let model = complete(layout, model);
    let input = layout.serialize(&model);
    let accounts = (0..layout.accounts).map(|i| layout.concrete_account(&model, i)).collect();
    let replay = replay(&ctx.rt.image, input.clone(), site);
    Some(Exploit {
        sidecar: Sidecar {
            program_id: hex::encode(layout.program_id),
            accounts,
            instruction_data: hex::encode(layout.instruction_data(&model)),
            site,
            replay,
        },
        input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bytecode::asm::assemble;
    use crate::bytecode::image::load_program;

    #[test]
    fn replay_reports_whether_the_site_ran() {
        let src = "entrypoint:\n ldxb r2, [r1+8]\n jeq r2, 0, out\n mov64 r0, 1\nout:\n exit";
        let image = load_program(&assemble(src).unwrap().to_elf()).unwrap();
        let site = 16;
        let mut input = vec![0u8; 16];
        let r = replay(&image, input.clone(), site);
        assert!(!r.reached_site);
        assert_eq!(r.outcome, "exited 0");
        input[8] = 1;
        let r = replay(&image, input, site);
        assert!(r.reached_site);
        assert_eq!(r.outcome, "exited 1");
    }

    #[test]
    fn replay_heap_matches_the_symbolic_allocator() {
        let mut sys = ReplaySyscalls::default();
        let image = load_program(&assemble("entrypoint:\n exit").unwrap().to_elf()).unwrap();
        let mut mem = ConcreteMemory::new(&image, Vec::new());
        let a = sys.call("sol_alloc_free_", [20, 0, 0, 0, 0], &mut mem, 0).unwrap();
        let b = sys.call("sol_alloc_free_", [8, 0, 0, 0, 0], &mut mem, 0).unwrap();
        assert_eq!(a, MM_HEAP_START + HEAP_SIZE - 24);
        assert_eq!(b, a - 8);
        assert_eq!(sys.call("sol_alloc_free_", [HEAP_SIZE, 0, 0, 0, 0], &mut mem, 0).unwrap(), 0);
    }
}
