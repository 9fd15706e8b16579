//! Symbolic models of the supported syscalls.

use crate::bytecode::interp::{HEAP_SIZE, MM_HEAP_START, MM_INPUT_START};
use crate::symcore::expr::Expr;
use crate::symcore::memory::RegionKind;
use crate::symcore::state::{resolve_address, Env, Status, SymState};

use super::layout::{Field, Location};
use super::ledger::PdaApp;
use super::{ActionKind, CriticalAction, Runtime};

pub const PDA_MARKER: &[u8] = b"ProgramDerivedAddress";
pub const PDA_BUMP: u8 = 255;
const MAX_SEEDS: u64 = 16;
const MAX_CPI_ACCOUNTS: u64 = 64;

/// Names with a symbolic model.
pub const MODELED: &[&str] = &[
    "abort",
    "sol_panic_",
    "sol_log_",
    "sol_log_64_",
    "sol_log_pubkey",
    "sol_log_compute_units_",
    "sol_log_data",
    "sol_memcpy_",
    "sol_memmove_",
    "sol_memset_",
    "sol_memcmp_",
    "sol_invoke_signed_c",
    "sol_invoke_signed_rust",
    "sol_create_program_address",
    "sol_try_find_program_address",
    "sol_alloc_free_",
];

/// Account-info layouts passed to the invoke syscalls.
#[derive(Clone, Copy)]
struct InvokeAbi {
    program_id_field: u64,
    program_id_inline: bool,
    info_size: u64,
    info_writable: u64,
}

const C_ABI: InvokeAbi = InvokeAbi { program_id_field: 0, program_id_inline: false, info_size: 56, info_writable: 49 };
const RUST_ABI: InvokeAbi = InvokeAbi { program_id_field: 48, program_id_inline: true, info_size: 48, info_writable: 41 };

fn c64(v: u64) -> Expr {
    Expr::constant(v as u128, 64)
}

/// Pick one concrete value for `e`, constraining the state to it when it is
/// not already forced.
pub fn concretize(env: &dyn Env, st: &mut SymState, e: &Expr) -> u64 {
    let cands = resolve_address(env, st, e, 1);
    let (v, c) = cands[0].clone();
    if cands.len() > 1 {
        st.add_constraint(e.eq(&c64(v)));
        st.concretizations += 1;
    } else if let Some(c) = c {
        st.add_constraint(c);
    }
    v
}

fn abort(mut st: SymState, why: String) -> Vec<SymState> {
    st.status = Status::Aborted(why);
    vec![st]
}

fn read(env: &Runtime, st: &mut SymState, addr: u64, len: u64, site: u64) -> Option<Vec<Expr>> {
    let bytes = st.mem.read_bytes(addr, len).ok()?;
    if st.mem.region_kind(addr, len) == Some(RegionKind::Input) {
        env.on_access(st, addr, len, false, site, None);
    }
    Some(bytes)
}

fn write(env: &Runtime, st: &mut SymState, addr: u64, bytes: &[Expr], site: u64) -> Option<()> {
    st.mem.write_bytes(addr, bytes).ok()?;
    if st.mem.region_kind(addr, bytes.len() as u64) == Some(RegionKind::Input) {
        env.on_access(st, addr, bytes.len() as u64, true, site, None);
    }
    Some(())
}

fn read_u64(env: &Runtime, st: &mut SymState, addr: u64, site: u64) -> Option<Expr> {
    let b = read(env, st, addr, 8, site)?;
    let mut acc = b[7].clone();
    for x in b[..7].iter().rev() {
        acc = acc.concat(x);
    }
    Some(acc)
}

pub fn handle(env: &Runtime, mut st: SymState, name: &str, site: u64) -> Vec<SymState> {
    let args: Vec<Expr> = (1..=5).map(|r| st.regs[r].clone()).collect();
    st.regs[0] = c64(0);
    let fault = |st: SymState, what: &str| abort(st, format!("{what} in {name} at {site:#x}"));
    match name {
        "abort" => abort(st, "abort".into()),
        "sol_panic_" => abort(st, "panic".into()),
        "sol_log_" | "sol_log_64_" | "sol_log_pubkey" | "sol_log_compute_units_" | "sol_log_data" => vec![st],
        "sol_memcpy_" | "sol_memmove_" => {
            let dst = concretize(env, &mut st, &args[0]);
            let src = concretize(env, &mut st, &args[1]);
            let n = concretize(env, &mut st, &args[2]);
            let Some(bytes) = read(env, &mut st, src, n, site) else { return fault(st, "read violation") };
            if n > 0 && write(env, &mut st, dst, &bytes, site).is_none() {
                return fault(st, "write violation");
            }
            vec![st]
        }
        "sol_memset_" => {
            let dst = concretize(env, &mut st, &args[0]);
            let n = concretize(env, &mut st, &args[2]);
            let v = args[1].extract(7, 0);
            if n > 0 && write(env, &mut st, dst, &vec![v; n as usize], site).is_none() {
                return fault(st, "write violation");
            }
            vec![st]
        }
        "sol_memcmp_" => {
            let a = concretize(env, &mut st, &args[0]);
            let b = concretize(env, &mut st, &args[1]);
            let n = concretize(env, &mut st, &args[2]);
            let out = concretize(env, &mut st, &args[3]);
            let (Some(x), Some(y)) = (read(env, &mut st, a, n, site), read(env, &mut st, b, n, site)) else {
                return fault(st, "read violation");
            };
            let equal = bytes_equal(&x, &y);
            let res = Expr::ite(&equal, &Expr::constant(0, 32), &Expr::constant(1, 32));
            if st.mem.write(out, &res).is_err() {
                return fault(st, "write violation");
            }
            vec![st]
        }
        "sol_invoke_signed_c" => invoke(env, st, site, C_ABI, &args),
        "sol_invoke_signed_rust" => invoke(env, st, site, RUST_ABI, &args),
        "sol_create_program_address" | "sol_try_find_program_address" => {
            derive_address(env, st, site, &args, name == "sol_try_find_program_address")
        }
        "sol_alloc_free_" => {
            let size = concretize(env, &mut st, &args[0]);
            let free = concretize(env, &mut st, &args[1]);
            if free == 0 {
                let used = (st.heap_used + size + 7) & !7;
                if used <= HEAP_SIZE {
                    st.heap_used = used;
                    st.regs[0] = c64(MM_HEAP_START + HEAP_SIZE - used);
                }
            }
            vec![st]
        }
        _ => {
            env.unmodeled.lock().unwrap_or_else(|p| p.into_inner()).insert(name.to_string());
            abort(st, format!("unmodeled syscall {name}"))
        }
    }
}

/// Byte-wise equality folded into limb comparisons where possible.
pub fn bytes_equal(x: &[Expr], y: &[Expr]) -> Expr {
    let join = |v: &[Expr]| {
        let mut acc = v[v.len() - 1].clone();
        for b in v[..v.len() - 1].iter().rev() {
            acc = acc.concat(b);
        }
        acc
    };
    Expr::all(x.chunks(8).zip(y.chunks(8)).map(|(a, b)| join(a).eq(&join(b))))
}

fn limbs(bytes: &[Expr]) -> [Expr; 4] {
    std::array::from_fn(|l| {
        let chunk = &bytes[8 * l..8 * l + 8];
        let mut acc = chunk[7].clone();
        for b in chunk[..7].iter().rev() {
            acc = acc.concat(b);
        }
        acc
    })
}

fn invoke(env: &Runtime, mut st: SymState, site: u64, abi: InvokeAbi, args: &[Expr]) -> Vec<SymState> {
    let ix = concretize(env, &mut st, &args[0]);
    let infos = concretize(env, &mut st, &args[1]);
    let n_infos = concretize(env, &mut st, &args[2]).min(MAX_CPI_ACCOUNTS);
    let pid_addr = if abi.program_id_inline {
        ix + abi.program_id_field
    } else {
        let Some(p) = read_u64(env, &mut st, ix + abi.program_id_field, site) else {
            return abort(st, format!("bad instruction pointer at {site:#x}"));
        };
        concretize(env, &mut st, &p)
    };
    let Some(target) = read(env, &mut st, pid_addr, 32, site) else {
        return abort(st, format!("bad program id pointer at {site:#x}"));
    };
    let layout = st.layout.clone();
    let mut handed = Vec::new();
    let mut writable = Vec::new();
    for k in 0..n_infos {
        let base = infos + k * abi.info_size;
        let Some(kp) = read_u64(env, &mut st, base, site) else {
            return abort(st, format!("bad account info at {site:#x}"));
        };
        let kp = concretize(env, &mut st, &kp);
        if kp < MM_INPUT_START {
            continue;
        }
        if let Some(Location::Account { index, field: Field::Key, .. }) = layout.locate(kp - MM_INPUT_START) {
            let w = st.mem.read(base + abi.info_writable, 1).ok();
            if !handed.contains(&index) {
                handed.push(index);
                if w.is_none_or(|w| w.as_const() != Some(0)) {
                    writable.push(index);
                }
            }
        }
    }
    let action = CriticalAction {
        kind: ActionKind::Cpi,
        site,
        account: None,
        field: None,
        target: Some(limbs(&target)),
        handed: handed.clone(),
        state_id: st.id,
    };
    if !st.actions.iter().any(|a| a.kind == ActionKind::Cpi && a.site == site) {
        st.actions.push(action);
    }
    // The callee may change balances and data of writable accounts it receives.
    for i in writable {
        let base = MM_INPUT_START + layout.offsets[i];
        let lam = Expr::var(&env.fresh_name("cpi_lamports"), 64);
        let _ = st.mem.write(base + super::layout::OFF_LAMPORTS, &lam);
        let data: Vec<Expr> = (0..layout.max_data).map(|_| Expr::var(&env.fresh_name("cpi_data"), 8)).collect();
        let _ = st.mem.write_bytes(base + super::layout::OFF_DATA, &data);
    }
    vec![st]
}

fn derive_address(env: &Runtime, mut st: SymState, site: u64, args: &[Expr], find: bool) -> Vec<SymState> {
    let seeds = concretize(env, &mut st, &args[0]);
    let n = concretize(env, &mut st, &args[1]);
    if n > MAX_SEEDS {
        st.regs[0] = c64(1);
        return vec![st];
    }
    let mut input = Vec::new();
    for s in 0..n {
        let (Some(p), Some(l)) = (read_u64(env, &mut st, seeds + 16 * s, site), read_u64(env, &mut st, seeds + 16 * s + 8, site))
        else {
            return abort(st, format!("bad seed array at {site:#x}"));
        };
        let p = concretize(env, &mut st, &p);
        let l = concretize(env, &mut st, &l);
        if l > 32 {
            st.regs[0] = c64(1);
            return vec![st];
        }
        let Some(bytes) = read(env, &mut st, p, l, site) else {
            return abort(st, format!("bad seed at {site:#x}"));
        };
        input.extend(bytes);
    }
    let bump = find.then_some(PDA_BUMP);
    if let Some(b) = bump {
        input.push(Expr::constant(b as u128, 8));
    }
    let pid = concretize(env, &mut st, &args[2]);
    let Some(pid_bytes) = read(env, &mut st, pid, 32, site) else {
        return abort(st, format!("bad program id at {site:#x}"));
    };
    input.extend(pid_bytes);
    input.extend(PDA_MARKER.iter().map(|b| Expr::constant(*b as u128, 8)));
    let tag = env.fresh_name("pda");
    let output: [Expr; 4] = std::array::from_fn(|l| Expr::var(&format!("{tag}_{l}"), 64));
    // Functional consistency with earlier applications on equal-length inputs.
    for prev in &st.ledger.pda {
        if prev.input.len() != input.len() {
            continue;
        }
        let same_in = Expr::all(prev.input.iter().zip(&input).map(|(a, b)| a.eq(b)));
        let same_out = Expr::all(prev.output.iter().zip(&output).map(|(a, b)| a.eq(b)));
        let c = same_in.implies(&same_out);
        st.constraints.push(c);
    }
    st.ledger.pda.push(PdaApp { input, output: output.clone(), bump });
    let out = concretize(env, &mut st, &args[3]);
    for (l, limb) in output.iter().enumerate() {
        if st.mem.write(out + 8 * l as u64, limb).is_err() {
            return abort(st, format!("bad output pointer at {site:#x}"));
        }
    }
    if find {
        let bp = concretize(env, &mut st, &args[4]);
        let _ = st.mem.write(bp, &Expr::constant(PDA_BUMP as u128, 8));
    }
    vec![st]
}
