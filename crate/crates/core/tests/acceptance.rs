//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::agreement::{random_model, reference_agrees, subject, symbolic_agrees, SymOutcome};
use common::FIXTURES;
use solsym_core::bytecode::isa::{decode, legal_opcodes, Instruction, SbpfVersion, CALL_REG, LDDW, MAX_REGISTER};
use solsym_core::explore::{ExploreConfig, StrategyKind};
use solsym_core::oracles::FindingKind;
use solsym_core::report;

type Verdict = Result<String, String>;

fn kinds(name: &str, cfg: &ExploreConfig) -> BTreeSet<FindingKind> {
    common::run(name, cfg).1.kinds()
}

fn expect_kinds(cases: &[(&str, &[FindingKind])]) -> Verdict {
    let cfg = common::config();
    let mut lines = Vec::new();
    let mut ok = true;
    for (name, want) in cases {
        let got = kinds(name, &cfg);
        let want: BTreeSet<_> = want.iter().copied().collect();
        ok &= got == want;
        lines.push(format!("{name}={got:?}"));
    }
    let detail = lines.join(" ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion1() -> Verdict {
    use FindingKind::*;
    expect_kinds(&[("level0", &[Moc]), ("level1", &[Msc]), ("level4", &[Acpi]), ("clean", &[])])
}

fn criterion2() -> Verdict {
    let mut detail = Vec::new();
    let mut ok = true;
    for n in [1usize, 3, 10] {
        let cfg = ExploreConfig { max_accounts: n, strategies: vec![StrategyKind::Random], ..common::config() };
        let (_, r) = common::run("deser", &cfg);
        let merges: Vec<_> = r.strategies.iter().flat_map(|s| s.stats.merges.iter()).collect();
        let single = !merges.is_empty() && merges.iter().all(|m| m.outgoing == 1);
        ok &= single;
        detail.push(format!("n={n} merges={} outgoing={:?}", merges.len(), merges.iter().map(|m| m.outgoing).collect::<BTreeSet<_>>()));
    }
    for n in 1..=3u32 {
        let cfg = ExploreConfig { max_accounts: n as usize, merge: false, strategies: vec![StrategyKind::Random], ..common::config() };
        let (_, r) = common::run("deser", &cfg);
        let exits: u64 = r.strategies.iter().map(|s| s.stats.loop_exits).sum();
        ok &= exits == 8u64.pow(n);
        detail.push(format!("no-merge n={n} exits={exits}"));
    }
    let detail = detail.join(", ");
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion3() -> Verdict {
    expect_kinds(&[("listing4", &[FindingKind::Msc]), ("listing4_gated", &[])])
}

fn criterion4() -> Verdict {
    expect_kinds(&[("write_before", &[]), ("write_after", &[]), ("write_none", &[FindingKind::Moc])])
}

fn criterion5() -> Verdict {
    let cfg = common::config();
    let (_, owner_data) = common::run("acpi_owner_data", &cfg);
    let note_only = owner_data.findings.is_empty() && !owner_data.notes.is_empty();
    let c = kinds("acpi_const", &cfg);
    let raw = kinds("acpi_raw", &cfg);
    let detail = format!(
        "const={c:?} owner_data findings={} notes={:?} raw={raw:?}",
        owner_data.findings.len(),
        owner_data.notes.iter().map(|n| n.kind.as_str()).collect::<Vec<_>>()
    );
    if c.is_empty() && note_only && raw == BTreeSet::from([FindingKind::Acpi]) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion6() -> Verdict {
    let cfg = common::config();
    let (mut total, mut replayed) = (0, 0);
    let mut missing = Vec::new();
    for name in FIXTURES {
        let (_, r) = common::run(name, &cfg);
        for f in &r.findings {
            total += 1;
            match &f.exploit {
                Some(e) if e.sidecar.replay.reached_site => replayed += 1,
                _ => missing.push(format!("{name}@{:#x}", f.site)),
            }
        }
    }
    let detail = format!("{replayed}/{total} exploits reach their site");
    if total > 0 && replayed == total {
        Ok(detail)
    } else {
        Err(format!("{detail}; failing: {}", missing.join(",")))
    }
}

fn criterion7() -> Verdict {
    let pruned_cfg = common::config();
    let unpruned_cfg = ExploreConfig { prune: false, ..common::config() };
    let (_, pruned) = common::run("dispatch", &pruned_cfg);
    let (_, unpruned) = common::run("dispatch", &unpruned_cfg);
    let keys = |r: &solsym_core::explore::AnalysisResult| r.findings.iter().map(|f| f.key()).collect::<BTreeSet<_>>();
    let same = keys(&pruned) == keys(&unpruned);
    let (a, b) = (pruned.states_stepped(), unpruned.states_stepped());
    let detail = format!("findings equal={same} ({}), states stepped pruned={a} unpruned={b}", keys(&pruned).len());
    if same && !keys(&pruned).is_empty() && a < b {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion8() -> Verdict {
    // Decoder roundtrip over random legal instructions.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut checked = 0u64;
    for v in [SbpfVersion::V1, SbpfVersion::V2] {
        let ops = legal_opcodes(v);
        for _ in 0..60_000 {
            let op = ops[rng.gen_range(0..ops.len())];
            let imm = match op {
                LDDW => rng.gen::<i64>(),
                CALL_REG => rng.gen_range(0..=MAX_REGISTER) as i64,
                _ => rng.gen::<i32>() as i64,
            };
            let insn = Instruction::new(op, rng.gen_range(0..=MAX_REGISTER), rng.gen_range(0..=MAX_REGISTER), rng.gen(), imm);
            let bytes = insn.encode();
            let next = (bytes.len() == 16).then(|| bytes[8..16].try_into().unwrap());
            match decode(bytes[..8].try_into().unwrap(), next, 0, v) {
                Ok(back) if back == insn && back.encode() == bytes => checked += 1,
                other => return Err(format!("roundtrip failed for {insn:?}: {other:?}")),
            }
        }
    }

    // Reference interpreter and symbolic engine against the concrete VM.
    let cfg = common::config();
    let (mut runs, mut steps, mut agreed, mut pinned) = (0, 0, 0, 0);
    for name in FIXTURES {
        let s = subject(name, cfg.max_accounts, cfg.max_data);
        let (_, r) = common::run(name, &cfg);
        let mut inputs: Vec<Vec<u8>> = r.findings.iter().filter_map(|f| f.exploit.as_ref()).map(|e| e.input.clone()).collect();
        inputs.extend((0..8).map(|seed| s.layout.serialize(&random_model(&s.layout, seed))));
        for input in &inputs {
            steps += reference_agrees(&s.image, input).map_err(|e| format!("reference vs vm on {name}: {e}"))?;
            runs += 1;
        }
        for seed in 0..8 {
            match symbolic_agrees(&s, &random_model(&s.layout, seed)).map_err(|e| format!("symbolic vs vm on {name}: {e}"))? {
                SymOutcome::Agreed(_) => agreed += 1,
                SymOutcome::Concretized(_) => pinned += 1,
            }
        }
    }
    let detail = format!(
        "{checked} instructions roundtrip; reference agrees on {runs} runs ({steps} steps); symbolic agrees on {agreed} runs, {pinned} stopped at a concretized pointer"
    );
    if checked >= 100_000 && agreed > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion9() -> Verdict {
    let cfg = common::config();
    let (prep, skip) = common::run("format_log", &cfg);
    let skip_ok = !prep.marks.skip_sites.is_empty() && skip.kinds().contains(&FindingKind::Msc);

    let budget = Duration::from_secs(60);
    let no_skip_cfg = ExploreConfig {
        format_skip: false,
        strategy_budget: budget,
        global_timeout: budget * StrategyKind::ALL.len() as u32,
        ..common::config()
    };
    let started = Instant::now();
    let (_, no_skip) = common::run("format_log", &no_skip_cfg);
    let elapsed = started.elapsed();
    let stalled = no_skip.findings.is_empty();

    let (negative, _) = common::run("format_branch", &cfg);
    let negative_ok = negative.marks.skip_sites.is_empty();

    let detail = format!(
        "skip: sites={:?} findings={:?}; no-skip: findings={:?} after {:.1}s ({}); negative skip_sites={:?}",
        prep.marks.skip_sites,
        skip.kinds(),
        no_skip.kinds(),
        elapsed.as_secs_f64(),
        no_skip.termination.as_str(),
        negative.marks.skip_sites
    );
    if skip_ok && stalled && negative_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion10() -> Verdict {
    let cfg = common::config();
    for name in ["level0", "dispatch"] {
        let elf = common::elf(name);
        let render = || {
            let (prep, result) = solsym_core::explore::analyze(&elf, &cfg).map_err(|e| e.to_string())?;
            let (rep, _) = report::build(name, &elf, &prep, &result, &cfg).map_err(|e| e.to_string())?;
            report::to_json(&rep).map_err(|e| e.to_string())
        };
        let (a, b) = (render()?, render()?);
        if a != b {
            return Err(format!("{name}: report.json differs between runs"));
        }
    }
    Ok("report.json identical across two runs of level0 and dispatch".into())
}

fn main() -> ExitCode {
    let only: Option<BTreeSet<usize>> =
        std::env::var("CRITERIA").ok().map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, fn() -> Verdict); 10] = [
        (1, criterion1),
        (2, criterion2),
        (3, criterion3),
        (4, criterion4),
        (5, criterion5),
        (6, criterion6),
        (7, criterion7),
        (8, criterion8),
        (9, criterion9),
        (10, criterion10),
    ];
    let mut failed = 0;
    for (n, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        match check() {
            Ok(detail) => println!("criterion {n}: PASS {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n}: FAIL {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
