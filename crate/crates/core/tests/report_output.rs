mod common;

use solsym_core::report::{self, ContractReport};

fn report_for(name: &str) -> (ContractReport, report::Artifacts) {
    let cfg = common::config();
    let elf = common::elf(name);
    let (prep, result) = common::run(name, &cfg);
    report::build(&format!("{name}.so"), &elf, &prep, &result, &cfg).unwrap()
}

fn validator() -> jsonschema::JSONSchema {
    let schema: serde_json::Value = serde_json::from_str(report::REPORT_SCHEMA).unwrap();
    jsonschema::JSONSchema::compile(&schema).unwrap()
}

#[test]
fn reports_match_the_schema() {
    let schema = validator();
    for name in ["level0", "level1", "level4", "clean", "acpi_owner_data", "format_log"] {
        let (rep, _) = report_for(name);
        let value: serde_json::Value = serde_json::from_str(&report::to_json(&rep).unwrap()).unwrap();
        let msgs: Vec<String> = match schema.validate(&value) {
            Ok(()) => Vec::new(),
            Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
        };
        assert!(msgs.is_empty(), "{name}: {}", msgs.join("; "));
    }
}

#[test]
fn schema_rejects_a_missing_field() {
    let (rep, _) = report_for("clean");
    let mut value: serde_json::Value = serde_json::to_value(&rep).unwrap();
    value.as_object_mut().unwrap().remove("termination_reason");
    assert!(!validator().is_valid(&value));
}

#[test]
fn emit_writes_report_exploits_and_series() {
    let dir = tempfile::tempdir().unwrap();
    let (rep, artifacts) = report_for("level1");
    report::emit(&rep, &artifacts, dir.path()).unwrap();
    let written: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(written["contract"]["sha256"], report::sha256_hex(&common::elf("level1")));
    assert!(!rep.findings.is_empty());
    for f in &rep.findings {
        let bin = f.exploit_file.as_ref().expect("every finding has an exploit");
        assert!(dir.path().join(bin).is_file());
        let sidecar = dir.path().join(bin).with_extension("json");
        let side: serde_json::Value = serde_json::from_slice(&std::fs::read(sidecar).unwrap()).unwrap();
        assert_eq!(side["replay"]["reached_site"], true);
    }
    for tsv in ["coverage.tsv", "progress.tsv", "strategies.tsv"] {
        let text = std::fs::read_to_string(dir.path().join(tsv)).unwrap();
        assert!(text.lines().count() >= 2, "{tsv} has no rows");
    }
}

#[test]
fn summary_counts_each_kind_once_per_contract() {
    let reports: Vec<ContractReport> = ["level0", "level1", "level4", "clean"].iter().map(|n| report_for(n).0).collect();
    let counts = report::summarize(&reports);
    assert_eq!(counts["msc"], 1);
    assert_eq!(counts["moc"], 1);
    assert_eq!(counts["acpi"], 1);
    assert_eq!(counts["any"], 3);
    assert_eq!(counts["clean"], 1);
    let tsv = report::summary_tsv(&reports);
    assert!(tsv.starts_with("kind\tcontracts\n"));
    assert!(tsv.ends_with("total\t4\n"));
}
