mod common;

use common::agreement::{random_model, reference_agrees, subject, symbolic_agrees, SymOutcome};
use common::FIXTURES;

const MODELS: u64 = 24;

#[test]
fn reference_interpreter_matches_on_exploits_and_random_inputs() {
    let cfg = common::config();
    for name in FIXTURES {
        let s = subject(name, cfg.max_accounts, cfg.max_data);
        let (_, result) = common::run(name, &cfg);
        let mut inputs: Vec<Vec<u8>> = result.findings.iter().filter_map(|f| f.exploit.as_ref()).map(|e| e.input.clone()).collect();
        inputs.extend((0..MODELS).map(|seed| s.layout.serialize(&random_model(&s.layout, seed))));
        for (k, input) in inputs.iter().enumerate() {
            if let Err(e) = reference_agrees(&s.image, input) {
                panic!("{name} input {k}: {e}");
            }
        }
    }
}

#[test]
fn symbolic_paths_follow_concrete_runs() {
    let cfg = common::config();
    let mut agreed = 0;
    for name in FIXTURES {
        let s = subject(name, cfg.max_accounts, cfg.max_data);
        for seed in 0..MODELS {
            match symbolic_agrees(&s, &random_model(&s.layout, seed)) {
                Ok(SymOutcome::Agreed(_)) => agreed += 1,
                Ok(SymOutcome::Concretized(at)) => eprintln!("{name} seed {seed}: pinned pointer at step {at}"),
                Err(e) => panic!("{name} seed {seed}: {e}"),
            }
        }
    }
    assert!(agreed > 0);
}
