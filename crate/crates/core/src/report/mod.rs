//! Machine-readable reports, exploit files and corpus summaries.
//!
//! `report.json` holds only values that are a function of the binary, the
//! seed and the configuration, so two identical runs produce identical
//! bytes. Wall-clock data goes to the TSV side files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::explore::{AnalysisResult, ExploreConfig, Prepared, StrategyKind};
use crate::oracles::{Confidence, Evidence, FindingKind, Note};
use crate::symcore::solver::Backend;

pub const SCHEMA_VERSION: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// JSON schema every `report.json` validates against.
pub const REPORT_SCHEMA: &str = include_str!("../../schema/report.schema.json");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot serialize report: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Debug, Serialize)]
pub struct Contract {
    pub file: String,
    pub sha256: String,
    pub program_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfigSnapshot {
    pub strategy_budget_seconds: u64,
    pub global_timeout_seconds: u64,
    pub continuation_budget_seconds: u64,
    pub solver_timeout_ms: u64,
    pub solver: &'static str,
    pub merge: bool,
    pub prune: bool,
    pub format_skip: bool,
    pub max_accounts: usize,
    pub max_data: u64,
    pub duplicate_slot: bool,
    pub deferred_cap: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finding_limit: Option<usize>,
    pub strategies: Vec<StrategyKind>,
}

impl From<&ExploreConfig> for ConfigSnapshot {
    fn from(c: &ExploreConfig) -> Self {
        ConfigSnapshot {
            strategy_budget_seconds: c.strategy_budget.as_secs(),
            global_timeout_seconds: c.global_timeout.as_secs(),
            continuation_budget_seconds: c.continuation_budget.as_secs(),
            solver_timeout_ms: c.solver_timeout.as_millis() as u64,
            solver: match c.backend {
                Backend::BitBlast => "bitblast",
                Backend::External(_) => "external",
            },
            merge: c.merge,
            prune: c.prune,
            format_skip: c.format_skip,
            max_accounts: c.max_accounts,
            max_data: c.max_data,
            duplicate_slot: c.duplicate_slot,
            deferred_cap: c.deferred_cap,
            finding_limit: c.finding_limit,
            strategies: c.strategies.clone(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ReportedFinding {
    pub kind: FindingKind,
    pub site: u64,
    pub unchecked_accounts: Vec<usize>,
    pub evidence: Evidence,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exploit_file: Option<String>,
    /// False when no input could be produced for the path.
    pub synthesized: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replay_reached_site: Option<bool>,
    pub confidence: Confidence,
    pub path_branches: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CoverageFinal {
    pub instructions: usize,
    pub instructions_covered: usize,
    pub ratio: f64,
    pub blocks: usize,
    pub blocks_covered: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ContractReport {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub contract: Contract,
    pub config: ConfigSnapshot,
    pub seed: u64,
    pub findings: Vec<ReportedFinding>,
    pub notes: Vec<Note>,
    pub coverage_final: CoverageFinal,
    pub termination_reason: &'static str,
    pub unmodeled_syscalls: Vec<String>,
    pub discarded_writes: usize,
}

/// Everything `emit` writes besides `report.json`.
pub struct Artifacts {
    pub exploits: Vec<(String, Vec<u8>, String)>,
    pub coverage_tsv: String,
    pub progress_tsv: String,
    pub strategies_tsv: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Build the report and its side files for one analysed contract.
pub fn build(
    file: &str,
    elf: &[u8],
    prep: &Prepared,
    result: &AnalysisResult,
    config: &ExploreConfig,
) -> Result<(ContractReport, Artifacts), ReportError> {
    let mut exploits = Vec::new();
    let mut findings = Vec::new();
    for f in &result.findings {
        let exploit_file = match &f.exploit {
            Some(e) => {
                let n = exploits.len();
                let sidecar = serde_json::to_string_pretty(&e.sidecar)? + "\n";
                exploits.push((format!("exploit_{n}"), e.input.clone(), sidecar));
                Some(format!("exploit_{n}.bin"))
            }
            None => None,
        };
        findings.push(ReportedFinding {
            kind: f.kind,
            site: f.site,
            unchecked_accounts: f.unchecked_accounts.clone(),
            evidence: f.evidence.clone(),
            exploit_file,
            synthesized: f.exploit.is_some(),
            replay_reached_site: f.exploit.as_ref().map(|e| e.sidecar.replay.reached_site),
            confidence: f.confidence,
            path_branches: f.path.trace.len(),
        });
    }
    let cov = &result.coverage;
    let report = ContractReport {
        schema_version: SCHEMA_VERSION,
        tool_version: TOOL_VERSION,
        contract: Contract {
            file: file.to_string(),
            sha256: sha256_hex(elf),
            program_id: hex::encode(prep.program_id),
            address: None,
        },
        config: config.into(),
        seed: config.seed,
        findings,
        notes: result.notes.clone(),
        coverage_final: CoverageFinal {
            instructions: cov.instructions,
            instructions_covered: cov.covered.len(),
            ratio: cov.ratio(),
            blocks: cov.blocks,
            blocks_covered: cov.blocks_covered,
        },
        termination_reason: result.termination.as_str(),
        unmodeled_syscalls: result.unmodeled_syscalls.clone(),
        discarded_writes: result.discarded_writes,
    };

    let mut coverage_tsv = String::from("elapsed_seconds\tinstructions_covered\tratio\n");
    for (t, n) in &cov.series {
        let ratio = crate::explore::coverage_ratio(*n, cov.instructions);
        let _ = writeln!(coverage_tsv, "{t:.3}\t{n}\t{ratio:.6}");
    }
    let mut progress_tsv = String::from("elapsed_seconds\tstrategy\tactive\tdeferred\tcoverage\n");
    for p in &result.progress {
        let _ = writeln!(
            progress_tsv,
            "{:.3}\t{}\t{}\t{}\t{:.6}",
            p.elapsed,
            p.strategy.name(),
            p.active,
            p.deferred,
            p.coverage
        );
    }
    let mut strategies_tsv =
        String::from("strategy\tskipped\texhausted\tseconds\tslices\tstates_stepped\tsteps\tpruned\tmerges\tloop_exits\n");
    for s in &result.strategies {
        let _ = writeln!(
            strategies_tsv,
            "{}\t{}\t{}\t{:.3}\t{}\t{}\t{}\t{}\t{}\t{}",
            s.kind.name(),
            s.skipped,
            s.exhausted,
            s.seconds,
            s.slices,
            s.stats.states_stepped,
            s.stats.steps,
            s.stats.pruned,
            s.stats.merges.len(),
            s.stats.loop_exits
        );
    }
    Ok((report, Artifacts { exploits, coverage_tsv, progress_tsv, strategies_tsv }))
}

pub fn to_json(report: &ContractReport) -> Result<String, ReportError> {
    Ok(serde_json::to_string_pretty(report)? + "\n")
}

fn put(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|source| ReportError::Io { path: path.clone(), source })?;
    Ok(path)
}

/// Write `report.json`, exploits and TSV files into `dir`.
pub fn emit(report: &ContractReport, artifacts: &Artifacts, dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(dir).map_err(|source| ReportError::Io { path: dir.to_path_buf(), source })?;
    let mut out = vec![put(dir, "report.json", to_json(report)?.as_bytes())?];
    for (stem, bin, sidecar) in &artifacts.exploits {
        out.push(put(dir, &format!("{stem}.bin"), bin)?);
        out.push(put(dir, &format!("{stem}.json"), sidecar.as_bytes())?);
    }
    out.push(put(dir, "coverage.tsv", artifacts.coverage_tsv.as_bytes())?);
    out.push(put(dir, "progress.tsv", artifacts.progress_tsv.as_bytes())?);
    out.push(put(dir, "strategies.tsv", artifacts.strategies_tsv.as_bytes())?);
    Ok(out)
}

/// Rows of the corpus table, in output order.
pub const SUMMARY_ROWS: [&str; 5] = ["msc", "moc", "acpi", "any", "clean"];

/// Per-kind contract counts. A contract counts once in every row it has a
/// finding for, so rows overlap; a combined finding counts as both.
pub fn summarize(reports: &[ContractReport]) -> BTreeMap<&'static str, usize> {
    let mut counts: BTreeMap<&'static str, usize> = SUMMARY_ROWS.iter().map(|r| (*r, 0)).collect();
    for r in reports {
        let has = |k: FindingKind| r.findings.iter().any(|f| f.kind == k);
        let msc = has(FindingKind::Msc) || has(FindingKind::MocMsc);
        let moc = has(FindingKind::Moc) || has(FindingKind::MocMsc);
        let acpi = has(FindingKind::Acpi);
        for (row, on) in [("msc", msc), ("moc", moc), ("acpi", acpi), ("any", !r.findings.is_empty()), ("clean", r.findings.is_empty())] {
            if on {
                *counts.get_mut(row).unwrap() += 1;
            }
        }
    }
    counts
}

pub fn summary_tsv(reports: &[ContractReport]) -> String {
    let counts = summarize(reports);
    let mut out = String::from("kind\tcontracts\n");
    for row in SUMMARY_ROWS {
        let _ = writeln!(out, "{row}\t{}", counts[row]);
    }
    let _ = writeln!(out, "total\t{}", reports.len());
    out
}
