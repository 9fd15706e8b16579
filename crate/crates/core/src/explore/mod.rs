//! Exploration driver: three targeting strategies run round-robin, each
//! with its own scheduler, sharing coverage and the finding set.

pub mod reach;
pub mod scheduler;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::bytecode::analysis::StaticMarks;
use crate::bytecode::cfg::{build_cfg, Cfg, CfgError};
use crate::bytecode::image::{load_program, LoadError, ProgramImage};
use crate::oracles::{self, Finding, FindingKind, Note, OracleCtx};
use crate::runtime::layout::{InputLayout, LayoutError, DEFAULT_ACCOUNTS, DEFAULT_MAX_DATA};
use crate::runtime::{program_id_for, ActionKind, Runtime};
use crate::symcore::solver::{Backend, Solver, SolverConfig};
use crate::symcore::state::{step, Status};

use reach::{global_targets, ReachabilityIndex};
use scheduler::{Entry, SchedStats, Scheduler};

/// How many times one (site, account) pair is handed to the oracles.
const MAX_EVALUATIONS_PER_SITE: usize = 8;
const PROGRESS_EVERY: u64 = 5_000;
const ANALYSIS_STACK: usize = 512 << 20;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("cannot load program: {0}")]
    Load(#[from] LoadError),
    #[error("cannot build control-flow graph: {0}")]
    Cfg(#[from] CfgError),
    #[error("bad input layout: {0}")]
    Layout(#[from] LayoutError),
    #[error("analysis thread failed: {0}")]
    Thread(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Cpi,
    Main,
    Random,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 3] = [StrategyKind::Cpi, StrategyKind::Main, StrategyKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Cpi => "cpi",
            StrategyKind::Main => "main",
            StrategyKind::Random => "random",
        }
    }

    /// Addresses the strategy steers towards; empty means unrestricted.
    pub fn targets(self, marks: &StaticMarks) -> BTreeSet<u64> {
        match self {
            StrategyKind::Cpi => marks.cpi_sites.clone(),
            StrategyKind::Main => marks.dispatch_leaves.clone(),
            StrategyKind::Random => BTreeSet::new(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ExploreConfig {
    pub strategy_budget: Duration,
    pub global_timeout: Duration,
    pub continuation_budget: Duration,
    pub solver_timeout: Duration,
    pub seed: u64,
    pub merge: bool,
    pub prune: bool,
    pub format_skip: bool,
    pub max_accounts: usize,
    pub max_data: u64,
    pub duplicate_slot: bool,
    pub deferred_cap: usize,
    pub finding_limit: Option<usize>,
    pub strategies: Vec<StrategyKind>,
    #[serde(skip)]
    pub backend: Backend,
    #[serde(skip)]
    pub dump_dir: Option<std::path::PathBuf>,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        ExploreConfig {
            strategy_budget: Duration::from_secs(600),
            global_timeout: Duration::from_secs(7200),
            continuation_budget: Duration::from_secs(60),
            solver_timeout: Duration::from_secs(5),
            seed: 0,
            merge: true,
            prune: true,
            format_skip: true,
            max_accounts: DEFAULT_ACCOUNTS,
            max_data: DEFAULT_MAX_DATA,
            duplicate_slot: false,
            deferred_cap: 10_000,
            finding_limit: None,
            strategies: StrategyKind::ALL.to_vec(),
            backend: Backend::BitBlast,
            dump_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    /// Every strategy ran out of states.
    Exhausted,
    /// Every remaining strategy used up its budget.
    StrategyBudget,
    GlobalTimeout,
    FindingLimit,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Exhausted => "exploration-complete",
            Termination::StrategyBudget => "strategy-budget",
            Termination::GlobalTimeout => "global-timeout",
            Termination::FindingLimit => "finding-limit",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct StrategyReport {
    pub kind: StrategyKind,
    pub skipped: bool,
    pub exhausted: bool,
    pub seconds: f64,
    pub slices: u64,
    pub stats: SchedStats,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProgressLine {
    pub elapsed: f64,
    pub strategy: StrategyKind,
    pub active: usize,
    pub deferred: usize,
    pub coverage: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Coverage {
    pub instructions: usize,
    pub covered: BTreeSet<u64>,
    pub blocks: usize,
    pub blocks_covered: usize,
    /// (elapsed seconds, covered instruction count)
    pub series: Vec<(f64, usize)>,
}

impl Coverage {
    pub fn ratio(&self) -> f64 {
        coverage_ratio(self.covered.len(), self.instructions)
    }
}

pub fn coverage_ratio(covered: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        covered as f64 / total as f64
    }
}

pub struct AnalysisResult {
    pub findings: Vec<Finding>,
    pub notes: Vec<Note>,
    pub coverage: Coverage,
    pub strategies: Vec<StrategyReport>,
    pub termination: Termination,
    pub progress: Vec<ProgressLine>,
    pub unmodeled_syscalls: Vec<String>,
    pub discarded_writes: usize,
    pub evaluations: usize,
    pub seconds: f64,
}

impl AnalysisResult {
    pub fn kinds(&self) -> BTreeSet<FindingKind> {
        self.findings.iter().map(|f| f.kind).collect()
    }

    pub fn states_stepped(&self) -> u64 {
        self.strategies.iter().map(|s| s.stats.states_stepped).sum()
    }
}

/// A loaded program with its static pre-analyses.
pub struct Prepared {
    pub image: Arc<ProgramImage>,
    pub cfg: Cfg,
    pub marks: StaticMarks,
    pub program_id: [u8; 32],
}

impl Prepared {
    pub fn from_elf(elf: &[u8]) -> Result<Prepared, AnalysisError> {
        let image = load_program(elf)?;
        let cfg = build_cfg(&image)?;
        let marks = StaticMarks::compute(&image, &cfg);
        Ok(Prepared { image: Arc::new(image), cfg, marks, program_id: program_id_for(elf) })
    }
}

struct Strategy {
    kind: StrategyKind,
    sched: Scheduler,
    index: Option<ReachabilityIndex>,
    spent: Duration,
    slices: u64,
    skipped: bool,
    exhausted: bool,
    seen: BTreeSet<u64>,
}

enum SliceEnd {
    Yield,
    Exhausted,
    Budget,
    Deadline,
}

struct Run<'a> {
    prep: &'a Prepared,
    config: &'a ExploreConfig,
    rt: Runtime,
    global: Option<ReachabilityIndex>,
    start: Instant,
    deadline: Instant,
    covered: BTreeSet<u64>,
    series: Vec<(f64, usize)>,
    findings: BTreeMap<(FindingKind, u64, Vec<usize>), Finding>,
    notes: BTreeSet<Note>,
    evaluated: BTreeMap<(u64, Option<usize>), usize>,
    evaluations: usize,
    discarded: usize,
    progress: Vec<ProgressLine>,
}

impl Run<'_> {
    fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    fn cover(&mut self, pc: u64) {
        if self.covered.insert(pc) {
            let t = self.elapsed();
            self.series.push((t, self.covered.len()));
        }
    }

    fn log_progress(&mut self, s: &Strategy) {
        let line = ProgressLine {
            elapsed: self.elapsed(),
            strategy: s.kind,
            active: s.sched.current.is_some() as usize,
            deferred: s.sched.pending(),
            coverage: coverage_ratio(self.covered.len(), self.prep.image.instructions.len()),
        };
        self.progress.push(line);
    }

    fn limit_reached(&self) -> bool {
        self.config.finding_limit.is_some_and(|n| self.findings.len() >= n)
    }

    fn slice(&mut self, s: &mut Strategy) -> SliceEnd {
        let started = Instant::now();
        let budget_end = started + self.config.strategy_budget.saturating_sub(s.spent);
        let end = budget_end.min(self.deadline);
        let mut steps = 0u64;
        let result = loop {
            let now = Instant::now();
            if now >= self.deadline {
                break SliceEnd::Deadline;
            }
            if now >= budget_end {
                break SliceEnd::Budget;
            }
            let Some(e) = s.sched.select_next(&self.covered) else { break SliceEnd::Exhausted };
            if s.seen.insert(e.st.id) {
                s.sched.stats.states_stepped += 1;
            }
            s.sched.stats.steps += 1;
            steps += 1;
            if steps % PROGRESS_EVERY == 0 {
                self.log_progress(s);
            }
            let pc = e.st.pc;
            let before = e.st.actions.len();
            let (phase, hit) = (e.phase, e.hit);
            self.cover(pc);
            let succ = step(&self.rt, e.st);
            let forked = succ.len() > 1;
            let mut yielded = false;
            let mut kept = false;
            for n in succ {
                let mut ne = Entry { st: n, phase, hit };
                if let Some(idx) = &s.index {
                    ne.hit |= idx.targets.contains(&pc) || idx.targets.contains(&ne.st.pc);
                }
                if ne.st.status != Status::Infeasible && ne.st.actions.len() > before {
                    let actions = ne.st.actions[before..].to_vec();
                    for a in &actions {
                        yielded |= self.evaluate(a, &ne.st, end);
                    }
                }
                if !ne.st.is_active() {
                    continue;
                }
                if forked && self.config.prune {
                    let dead = self.global.as_ref().is_some_and(|g| !g.still_reachable(&self.prep.cfg, &ne.st))
                        || (!ne.hit
                            && s.index.as_ref().is_some_and(|i| !i.still_reachable(&self.prep.cfg, &ne.st)));
                    if dead {
                        s.sched.stats.pruned += 1;
                        continue;
                    }
                }
                let Some(ne) = s.sched.track_phase(&self.prep.cfg, ne) else { continue };
                if kept {
                    s.sched.defer(ne);
                } else {
                    s.sched.keep(ne);
                    kept = true;
                }
            }
            if yielded {
                break SliceEnd::Yield;
            }
        };
        s.spent += started.elapsed();
        s.slices += 1;
        self.log_progress(s);
        result
    }

    /// Hand one action to the oracles; true if it was evaluated.
    fn evaluate(&mut self, action: &crate::runtime::CriticalAction, st: &crate::symcore::state::SymState, end: Instant) -> bool {
        let key = (action.site, action.account);
        let n = self.evaluated.entry(key).or_insert(0);
        if *n >= MAX_EVALUATIONS_PER_SITE {
            return false;
        }
        *n += 1;
        self.evaluations += 1;
        let ctx = OracleCtx {
            rt: &self.rt,
            cfg: &self.prep.cfg,
            prune: if self.config.prune { self.global.as_ref() } else { None },
            continuation_budget: self.config.continuation_budget,
            deadline: end,
            seed: self.config.seed,
        };
        let v = oracles::evaluate(&ctx, action, st);
        log::debug!(
            "{} at {:#x}: {} finding(s)",
            if action.kind == ActionKind::Cpi { "cpi" } else { "write" },
            action.site,
            v.findings.len()
        );
        self.discarded += v.discarded;
        self.notes.extend(v.notes);
        for f in v.findings {
            self.findings.entry(f.key()).or_insert(f);
        }
        true
    }
}

/// Explore `prep` under `config` on the calling thread.
pub fn run_analysis(prep: &Prepared, config: &ExploreConfig) -> Result<AnalysisResult, AnalysisError> {
    let start = Instant::now();
    let layout = InputLayout::new(config.max_accounts, config.max_data, prep.program_id)?;
    let solver = Solver::new(SolverConfig {
        backend: config.backend.clone(),
        timeout: config.solver_timeout,
        dump_dir: config.dump_dir.clone(),
    });
    let mut rt = Runtime::new(prep.image.clone(), Arc::new(solver), layout);
    if config.format_skip {
        rt.skip_sites = prep.marks.skip_sites.clone();
    }
    let cfg = &prep.cfg;
    let global = config
        .prune
        .then(|| ReachabilityIndex::build(cfg, &global_targets(cfg, prep.image.entry, &prep.marks.cpi_sites)));

    let mut strategies: Vec<Strategy> = Vec::new();
    for (k, kind) in config.strategies.iter().enumerate() {
        let targets = kind.targets(&prep.marks);
        let mut sched =
            Scheduler::new(config.seed.wrapping_add(k as u64), prep.marks.merge_point.clone(), config.merge);
        sched.random_only = *kind == StrategyKind::Random;
        sched.deferred_cap = config.deferred_cap;
        let mut index = None;
        let mut skipped = false;
        if *kind != StrategyKind::Random {
            let idx = ReachabilityIndex::build(cfg, &targets);
            skipped = idx.is_empty();
            index = Some(idx);
        }
        let mut first = true;
        for st in rt.initial_states(config.duplicate_slot) {
            if let Some(idx) = &index {
                if config.prune && !idx.still_reachable(cfg, &st) {
                    continue;
                }
            }
            if first {
                sched.stats.states_created += 1;
                sched.keep(Entry::new(st));
                first = false;
            } else {
                sched.defer(Entry::new(st));
            }
        }
        skipped |= first;
        if !config.prune {
            // Without pruning the targets only decide whether the strategy runs.
            index = None;
        }
        strategies.push(Strategy {
            kind: *kind,
            sched,
            index,
            spent: Duration::ZERO,
            slices: 0,
            skipped,
            exhausted: false,
            seen: BTreeSet::new(),
        });
    }

    let mut run = Run {
        prep,
        config,
        rt,
        global,
        start,
        deadline: start + config.global_timeout,
        covered: BTreeSet::new(),
        series: vec![(0.0, 0)],
        findings: BTreeMap::new(),
        notes: BTreeSet::new(),
        evaluated: BTreeMap::new(),
        evaluations: 0,
        discarded: 0,
        progress: Vec::new(),
    };

    let mut budget_hit = false;
    let termination = 'outer: loop {
        let mut progressed = false;
        for s in strategies.iter_mut() {
            if s.skipped || s.exhausted || s.spent >= config.strategy_budget {
                continue;
            }
            if run.limit_reached() {
                break 'outer Termination::FindingLimit;
            }
            progressed = true;
            match run.slice(s) {
                SliceEnd::Yield => {}
                SliceEnd::Exhausted => s.exhausted = true,
                SliceEnd::Budget => budget_hit = true,
                SliceEnd::Deadline => break 'outer Termination::GlobalTimeout,
            }
        }
        if run.limit_reached() {
            break Termination::FindingLimit;
        }
        if !progressed {
            break if budget_hit { Termination::StrategyBudget } else { Termination::Exhausted };
        }
    };

    let seconds = run.elapsed();
    run.series.push((seconds, run.covered.len()));
    let blocks_covered = cfg.blocks.keys().filter(|b| run.covered.contains(b)).count();
    let coverage = Coverage {
        instructions: prep.image.instructions.len(),
        covered: run.covered,
        blocks: cfg.blocks.len(),
        blocks_covered,
        series: run.series,
    };
    let unmodeled = run.rt.unmodeled.lock().unwrap_or_else(|p| p.into_inner()).iter().cloned().collect();
    Ok(AnalysisResult {
        findings: run.findings.into_values().collect(),
        notes: run.notes.into_iter().collect(),
        coverage,
        strategies: strategies
            .into_iter()
            .map(|s| StrategyReport {
                kind: s.kind,
                skipped: s.skipped,
                exhausted: s.exhausted,
                seconds: s.spent.as_secs_f64(),
                slices: s.slices,
                stats: s.sched.stats,
            })
            .collect(),
        termination,
        progress: run.progress,
        unmodeled_syscalls: unmodeled,
        discarded_writes: run.discarded,
        evaluations: run.evaluations,
        seconds,
    })
}

/// Load, pre-analyse and explore an ELF on a thread with a large stack
/// (deep expression trees are dropped recursively).
pub fn analyze(elf: &[u8], config: &ExploreConfig) -> Result<(Prepared, AnalysisResult), AnalysisError> {
    let elf = elf.to_vec();
    let config = config.clone();
    std::thread::Builder::new()
        .name("analysis".into())
        .stack_size(ANALYSIS_STACK)
        .spawn(move || {
            let prep = Prepared::from_elf(&elf)?;
            let result = run_analysis(&prep, &config)?;
            Ok((prep, result))
        })
        .map_err(|e| AnalysisError::Thread(e.to_string()))?
        .join()
        .map_err(|_| AnalysisError::Thread("panicked".into()))?
}
