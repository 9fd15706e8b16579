use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn solsym(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_solsym")).args(args).output().unwrap()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(format!("{name}.s"))
}

fn assemble(name: &str, dir: &Path) -> PathBuf {
    let out = dir.join(format!("{name}.so"));
    let o = solsym(&["assemble", fixture(name).to_str().unwrap(), "-o", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn analyze(target: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["analyze", target.to_str().unwrap(), "--out", out.to_str().unwrap(), "--strategy-budget", "60"];
    args.extend_from_slice(extra);
    solsym(&args)
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn exit_code_reflects_findings() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = assemble("clean", tmp.path());
    let vulnerable = assemble("level1", tmp.path());

    let o = analyze(&clean, &tmp.path().join("clean-out"), &[]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(report(&tmp.path().join("clean-out"))["findings"].as_array().unwrap().is_empty());

    let o = analyze(&vulnerable, &tmp.path().join("l1-out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    let rep = report(&tmp.path().join("l1-out"));
    assert_eq!(rep["findings"][0]["kind"], "msc");
    assert!(tmp.path().join("l1-out").join(rep["findings"][0]["exploit_file"].as_str().unwrap()).is_file());
}

#[test]
fn errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = analyze(&tmp.path().join("missing.so"), &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));

    let not_elf = tmp.path().join("garbage.so");
    std::fs::write(&not_elf, b"not a program").unwrap();
    assert_eq!(analyze(&not_elf, &tmp.path().join("out"), &[]).status.code(), Some(2));

    let bad_config = tmp.path().join("bad.toml");
    std::fs::write(&bad_config, "no-such-key = 1\n").unwrap();
    let elf = assemble("clean", tmp.path());
    let o = analyze(&elf, &tmp.path().join("out"), &["--config", bad_config.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let elf = assemble("clean", tmp.path());
    let config = tmp.path().join("solsym.toml");
    std::fs::write(&config, "seed = 5\nmax-accounts = 3\nno-merge = true\n").unwrap();
    let out = tmp.path().join("out");
    let o = analyze(&elf, &out, &["--config", config.to_str().unwrap(), "--seed", "9"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = report(&out);
    assert_eq!(rep["seed"], 9);
    assert_eq!(rep["config"]["max_accounts"], 3);
    assert_eq!(rep["config"]["merge"], false);
    assert_eq!(rep["config"]["strategy_budget_seconds"], 60);
}

#[test]
fn directory_mode_writes_one_folder_per_contract_and_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir(&corpus).unwrap();
    for name in ["level0", "level1", "level4", "clean"] {
        assemble(name, &corpus);
    }
    std::fs::write(corpus.join("README.txt"), "skipped: not an ELF file").unwrap();
    let out = tmp.path().join("out");
    let o = analyze(&corpus, &out, &["--jobs", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    for name in ["level0", "level1", "level4", "clean"] {
        assert!(out.join(name).join("report.json").is_file(), "{name}");
    }
    let summary = std::fs::read_to_string(out.join("summary.tsv")).unwrap();
    for row in ["msc\t1", "moc\t1", "acpi\t1", "any\t3", "clean\t1", "total\t4"] {
        assert!(summary.lines().any(|l| l == row), "{row} missing from\n{summary}");
    }
}

#[test]
fn dump_lists_instructions() {
    let tmp = tempfile::tempdir().unwrap();
    let elf = assemble("level1", tmp.path());
    let o = solsym(&["dump", elf.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).lines().count() > 10);
}
