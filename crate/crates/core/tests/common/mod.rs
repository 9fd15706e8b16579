#![allow(dead_code)]

pub mod agreement;
pub mod reference;

use std::path::PathBuf;
use std::time::Duration;

use solsym_core::bytecode::asm::assemble_file;
use solsym_core::explore::{analyze, AnalysisResult, ExploreConfig, Prepared};

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(format!("{name}.s"))
}

pub fn elf(name: &str) -> Vec<u8> {
    assemble_file(&fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}")).to_elf()
}

/// Defaults with budgets short enough for tests.
pub fn config() -> ExploreConfig {
    ExploreConfig {
        strategy_budget: Duration::from_secs(600),
        global_timeout: Duration::from_secs(1800),
        ..ExploreConfig::default()
    }
}

pub fn run(name: &str, config: &ExploreConfig) -> (Prepared, AnalysisResult) {
    analyze(&elf(name), config).unwrap_or_else(|e| panic!("{name}: {e}"))
}

pub const FIXTURES: [&str; 16] = [
    "level0",
    "level1",
    "level4",
    "clean",
    "acpi_const",
    "acpi_owner_data",
    "acpi_raw",
    "listing4",
    "listing4_gated",
    "write_before",
    "write_after",
    "write_none",
    "dispatch",
    "deser",
    "format_log",
    "format_branch",
];
