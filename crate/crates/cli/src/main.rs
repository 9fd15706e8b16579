//! `solsym`: analyse sBPF programs for missing signer/owner checks and
//! arbitrary cross-program invocations.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Deserialize;

use solsym_core::bytecode::asm::assemble_file;
use solsym_core::bytecode::image::load_program;
use solsym_core::explore::{analyze, ExploreConfig, StrategyKind};
use solsym_core::report::{self, ContractReport};
use solsym_core::symcore::solver::Backend;

/// Overrides the solver: path to an SMT-LIB2 solver binary.
const SOLVER_ENV: &str = "SOLSYM_SOLVER";

#[derive(Parser)]
#[command(name = "solsym", version, about = "Symbolic vulnerability scanner for Solana sBPF programs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyse an ELF file or every ELF file in a directory.
    Analyze(AnalyzeArgs),
    /// Print the decoded instructions of an ELF file.
    Dump { elf: PathBuf },
    /// Assemble a text program into an ELF file.
    Assemble {
        source: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    path: PathBuf,
    /// TOML file with the same keys as the long flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parallel workers in directory mode [default: 8].
    #[arg(long)]
    jobs: Option<usize>,
    /// Seconds per contract [default: 7200].
    #[arg(long)]
    global_timeout: Option<u64>,
    /// Seconds per exploration strategy [default: 600].
    #[arg(long)]
    strategy_budget: Option<u64>,
    /// Seconds to continue a path to a graceful exit [default: 60].
    #[arg(long)]
    continuation_budget: Option<u64>,
    /// Milliseconds per solver query [default: 5000].
    #[arg(long)]
    solver_timeout_ms: Option<u64>,
    /// Accounts in the symbolic input [default: 10].
    #[arg(long)]
    max_accounts: Option<usize>,
    /// Data bytes per account [default: 1024].
    #[arg(long)]
    max_data: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: solsym-out].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Stop after this many distinct findings.
    #[arg(long)]
    finding_limit: Option<usize>,
    /// Also explore an input whose last account repeats the first.
    #[arg(long)]
    duplicate_slot: bool,
    #[arg(long)]
    no_merge: bool,
    #[arg(long)]
    no_prune: bool,
    #[arg(long)]
    no_format_skip: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
struct FileConfig {
    jobs: Option<usize>,
    global_timeout: Option<u64>,
    strategy_budget: Option<u64>,
    continuation_budget: Option<u64>,
    solver_timeout_ms: Option<u64>,
    max_accounts: Option<usize>,
    max_data: Option<u64>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    finding_limit: Option<usize>,
    duplicate_slot: Option<bool>,
    no_merge: Option<bool>,
    no_prune: Option<bool>,
    no_format_skip: Option<bool>,
}

struct Settings {
    explore: ExploreConfig,
    jobs: usize,
    out: PathBuf,
}

fn settings(a: &AnalyzeArgs) -> Result<Settings> {
    let file = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<FileConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => FileConfig::default(),
    };
    let mut c = ExploreConfig::default();
    let secs = Duration::from_secs;
    if let Some(v) = a.global_timeout.or(file.global_timeout) {
        c.global_timeout = secs(v);
    }
    if let Some(v) = a.strategy_budget.or(file.strategy_budget) {
        c.strategy_budget = secs(v);
    }
    if let Some(v) = a.continuation_budget.or(file.continuation_budget) {
        c.continuation_budget = secs(v);
    }
    if let Some(v) = a.solver_timeout_ms.or(file.solver_timeout_ms) {
        c.solver_timeout = Duration::from_millis(v);
    }
    if let Some(v) = a.max_accounts.or(file.max_accounts) {
        if v == 0 {
            bail!("--max-accounts must be at least 1");
        }
        c.max_accounts = v;
    }
    if let Some(v) = a.max_data.or(file.max_data) {
        c.max_data = v;
    }
    if let Some(v) = a.seed.or(file.seed) {
        c.seed = v;
    }
    c.finding_limit = a.finding_limit.or(file.finding_limit);
    c.duplicate_slot = a.duplicate_slot || file.duplicate_slot.unwrap_or(false);
    c.merge = !(a.no_merge || file.no_merge.unwrap_or(false));
    c.prune = !(a.no_prune || file.no_prune.unwrap_or(false));
    c.format_skip = !(a.no_format_skip || file.no_format_skip.unwrap_or(false));
    c.strategies = StrategyKind::ALL.to_vec();
    if let Some(p) = std::env::var_os(SOLVER_ENV).filter(|v| !v.is_empty()) {
        c.backend = Backend::External(PathBuf::from(p));
    }
    let jobs = a.jobs.or(file.jobs).unwrap_or(8);
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let out = a.out.clone().or(file.out).unwrap_or_else(|| PathBuf::from("solsym-out"));
    Ok(Settings { explore: c, jobs, out })
}

fn is_elf(path: &Path) -> bool {
    use std::io::Read;
    let mut magic = [0u8; 4];
    std::fs::File::open(path).and_then(|mut f| f.read_exact(&mut magic)).is_ok() && magic == *b"\x7fELF"
}

fn contracts(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        bail!("{} is neither a file nor a directory", path.display());
    }
    let mut out = Vec::new();
    for entry in std::fs::read_dir(path).with_context(|| format!("listing {}", path.display()))? {
        let p = entry?.path();
        if p.is_file() && is_elf(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn analyze_one(path: &Path, config: &ExploreConfig, out: &Path) -> Result<ContractReport> {
    let elf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (prep, result) = analyze(&elf, config).with_context(|| format!("analysing {}", path.display()))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let (rep, artifacts) = report::build(&name, &elf, &prep, &result, config)?;
    report::emit(&rep, &artifacts, out)?;
    let kinds: Vec<&str> = rep.findings.iter().map(|f| f.kind.as_str()).collect();
    println!(
        "{name}\t{}\t[{}]\tcoverage {:.1}%\t{:.1}s",
        rep.termination_reason,
        kinds.join(","),
        100.0 * rep.coverage_final.ratio,
        result.seconds
    );
    Ok(rep)
}

fn run_analyze(a: &AnalyzeArgs) -> Result<ExitCode> {
    let s = settings(a)?;
    let files = contracts(&a.path)?;
    if a.path.is_file() {
        let rep = analyze_one(&files[0], &s.explore, &s.out)?;
        return Ok(if rep.findings.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) });
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(s.jobs).build()?;
    let results: Vec<Result<ContractReport>> = pool.install(|| {
        files
            .par_iter()
            .map(|f| {
                let stem = f.file_stem().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                analyze_one(f, &s.explore, &s.out.join(stem))
            })
            .collect()
    });
    let mut reports = Vec::new();
    let mut failed = false;
    for (f, r) in files.iter().zip(results) {
        match r {
            Ok(rep) => reports.push(rep),
            Err(e) => {
                eprintln!("{}: {e:#}", f.display());
                failed = true;
            }
        }
    }
    std::fs::create_dir_all(&s.out)?;
    std::fs::write(s.out.join("summary.tsv"), report::summary_tsv(&reports))?;
    Ok(if failed {
        ExitCode::from(2)
    } else if reports.iter().any(|r| !r.findings.is_empty()) {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Analyze(a) => run_analyze(&a),
        Command::Dump { elf } => {
            let bytes = std::fs::read(&elf).with_context(|| format!("reading {}", elf.display()))?;
            print!("{}", load_program(&bytes)?.dump());
            Ok(ExitCode::SUCCESS)
        }
        Command::Assemble { source, output } => {
            let asm = assemble_file(&source)?;
            std::fs::write(&output, asm.to_elf()).with_context(|| format!("writing {}", output.display()))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
