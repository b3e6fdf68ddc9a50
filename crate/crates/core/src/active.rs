//! The budgeted query loop, oracles, evaluation metrics and session logs.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::time::Instant;

use ndarray::{Array2, ArrayView2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::adjoint::CgConfig;
use crate::error::{Error, Result};
use crate::problem::{AlignmentProblem, Coupling, SupervisionSet};
use crate::sinkhorn::{self, SinkhornConfig};
use crate::strategies::{self, ScoringContext, StrategySpec};

/// Answers "which target is the correct alignment of source `i`".
pub trait Oracle {
    /// `candidates` are the plan's top-ranked targets for `source`, best first.
    fn answer(&mut self, source: usize, candidates: &[usize]) -> Result<usize>;
}

/// Reads answers from a held-out alignment.
pub struct GroundTruthOracle<'a> {
    truth: &'a SupervisionSet,
}

impl<'a> GroundTruthOracle<'a> {
    pub fn new(truth: &'a SupervisionSet) -> Self {
        Self { truth }
    }
}

impl Oracle for GroundTruthOracle<'_> {
    fn answer(&mut self, source: usize, _candidates: &[usize]) -> Result<usize> {
        self.truth.target_of(source).ok_or(Error::Oracle {
            source_index: source,
            reason: "no ground truth for this source".into(),
        })
    }
}

/// Prompts a person on a terminal.
pub struct ConsoleOracle<R, W> {
    input: R,
    output: W,
    m: usize,
}

impl<R: BufRead, W: Write> ConsoleOracle<R, W> {
    pub fn new(input: R, output: W, m: usize) -> Self {
        Self { input, output, m }
    }
}

impl<R: BufRead, W: Write> Oracle for ConsoleOracle<R, W> {
    fn answer(&mut self, source: usize, candidates: &[usize]) -> Result<usize> {
        let fail = |reason: String| Error::Oracle {
            source_index: source,
            reason,
        };
        loop {
            writeln!(self.output, "source {source}: top candidates {candidates:?}")?;
            write!(self.output, "correct target index> ")?;
            self.output.flush()?;
            let mut line = String::new();
            if self.input.read_line(&mut line)? == 0 {
                return Err(fail("input closed".into()));
            }
            match line.trim().parse::<usize>() {
                Ok(j) if j < self.m => return Ok(j),
                _ => writeln!(self.output, "expected an integer in [0, {})", self.m)?,
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    /// Total number of sources to query.
    pub budget: usize,
    pub batch_size: usize,
    pub strategy: StrategySpec,
    pub sinkhorn: SinkhornConfig,
    pub cg: CgConfig,
    /// Support threshold relative to the plan maximum.
    pub sparsify_ratio: f64,
    pub seed: u64,
    /// Keep every round's dense plan in the outcome.
    pub keep_plans: bool,
    pub record_timings: bool,
}

impl SessionConfig {
    pub fn new(budget: usize, batch_size: usize, strategy: StrategySpec) -> Self {
        Self {
            budget,
            batch_size,
            strategy,
            sinkhorn: SinkhornConfig::default(),
            cg: CgConfig::default(),
            sparsify_ratio: sinkhorn::DEFAULT_SPARSIFY_RATIO,
            seed: 0,
            keep_plans: false,
            record_timings: true,
        }
    }

    /// `ceil(budget / rounds)`, at least 1.
    pub fn batch_for_rounds(budget: usize, rounds: usize) -> usize {
        budget.div_ceil(rounds.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::OutOfRange {
                name: "batch_size",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        self.sinkhorn.validate()
    }
}

/// Evaluation over unlabeled sources.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub recall1: f64,
    pub evaluated: usize,
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub queried: Vec<usize>,
    pub answers: Vec<usize>,
    pub mrr: Option<f64>,
    pub hits1: Option<f64>,
    pub hits5: Option<f64>,
    pub hits10: Option<f64>,
    pub drift_frobenius: f64,
    pub sinkhorn_iters: usize,
    pub cg_iters: usize,
    pub elapsed_ms: f64,
    pub scoring_ms: f64,
    pub sinkhorn_converged: bool,
    pub sinkhorn_violation: f64,
    pub cg_converged: Option<bool>,
    pub cg_residual: Option<f64>,
    pub support_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub strategy: String,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
    /// The pool emptied before the budget was spent.
    pub exhausted: bool,
    pub oracle_failure: Option<String>,
}

impl SessionLog {
    /// One JSON object per round, newline terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(&serde_json::to_string(r).expect("round record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Vec<RoundRecord>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(k, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    path: "<jsonl>".into(),
                    line: k + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }

    pub fn final_round(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn queried(&self) -> Vec<usize> {
        self.rounds.iter().flat_map(|r| r.queried.iter().copied()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub coupling: Coupling,
    pub queried: Vec<usize>,
    pub supervision: SupervisionSet,
    pub log: SessionLog,
    /// Dense plan per round when `keep_plans` is set.
    pub plans: Vec<Array2<f64>>,
}

/// Runs the query loop: score the pool, take a batch, ask the oracle, add the
/// answers to the supervision and re-solve, until the budget is spent.
pub fn run_session(
    problem: &AlignmentProblem,
    config: &SessionConfig,
    oracle: &mut dyn Oracle,
    ground_truth: Option<&SupervisionSet>,
) -> Result<SessionOutcome> {
    config.validate()?;
    config.strategy.validate(problem.n())?;
    let mut problem = problem.clone();
    let mut labeled: BTreeSet<usize> = problem.supervision().sources().collect();
    let mut pool: BTreeSet<usize> = (0..problem.n()).filter(|i| !labeled.contains(i)).collect();
    let mut log = SessionLog {
        strategy: config.strategy.name(),
        seed: config.seed,
        ..Default::default()
    };
    let mut plans = Vec::new();
    let ms = |t: Instant| if config.record_timings { t.elapsed().as_secs_f64() * 1e3 } else { 0.0 };

    let start = Instant::now();
    let (coupling, report) = sinkhorn::solve(&problem, &config.sinkhorn)?;
    let mut coupling = sinkhorn::sparsify(coupling, config.sparsify_ratio)?;
    let initial = coupling.values().to_owned();
    if config.keep_plans {
        plans.push(initial.clone());
    }
    let metrics0 = evaluate(&coupling, ground_truth, &labeled)?;
    log.rounds.push(record(0, vec![], vec![], metrics0, 0.0, &report, None, coupling.support().len(), config.seed, ms(start), 0.0));

    let mut queried = Vec::new();
    let mut round = 0;
    while queried.len() < config.budget {
        if pool.is_empty() {
            log.exhausted = true;
            break;
        }
        round += 1;
        let start = Instant::now();
        let want = config.batch_size.min(config.budget - queried.len());
        let ctx = ScoringContext {
            problem: &problem,
            labeled: &labeled,
            round,
            cg: config.cg,
        };
        let scores = strategies::score_all(&config.strategy, &pool, &coupling, &ctx)?;
        let batch = strategies::select_batch(&scores.scores, &mut pool, want);
        let scoring_ms = ms(start);
        if batch.exhausted {
            log.exhausted = true;
        }

        let mut supervision = problem.supervision().clone();
        let mut answers = Vec::with_capacity(batch.selected.len());
        for &i in &batch.selected {
            let candidates = top_candidates(coupling.values().row(i), 10);
            match oracle.answer(i, &candidates) {
                Ok(j) => {
                    supervision.insert(i, j)?;
                    answers.push(j);
                }
                Err(e) => {
                    log.oracle_failure = Some(e.to_string());
                    break;
                }
            }
        }
        if log.oracle_failure.is_some() {
            break;
        }
        labeled.extend(batch.selected.iter().copied());
        queried.extend(batch.selected.iter().copied());
        problem = problem.with_supervision(supervision)?;

        let (next, report) = sinkhorn::solve(&problem, &config.sinkhorn)?;
        coupling = sinkhorn::sparsify(next, config.sparsify_ratio)?;
        if config.keep_plans {
            plans.push(coupling.values().to_owned());
        }
        let drift = frobenius(coupling.values(), initial.view());
        let metrics = evaluate(&coupling, ground_truth, &labeled)?;
        log.rounds.push(record(
            round,
            batch.selected,
            answers,
            metrics,
            drift,
            &report,
            scores.solution.as_ref(),
            coupling.support().len(),
            config.seed,
            ms(start),
            scoring_ms,
        ));
        if log.exhausted {
            break;
        }
    }

    Ok(SessionOutcome {
        coupling,
        queried,
        supervision: problem.supervision().clone(),
        log,
        plans,
    })
}

#[allow(clippy::too_many_arguments)]
fn record(
    round: usize,
    queried: Vec<usize>,
    answers: Vec<usize>,
    metrics: Option<Metrics>,
    drift: f64,
    report: &sinkhorn::SinkhornReport,
    solution: Option<&crate::adjoint::AdjointSolution>,
    support_size: usize,
    seed: u64,
    elapsed_ms: f64,
    scoring_ms: f64,
) -> RoundRecord {
    RoundRecord {
        round,
        queried,
        answers,
        mrr: metrics.map(|m| m.mrr),
        hits1: metrics.map(|m| m.hits1),
        hits5: metrics.map(|m| m.hits5),
        hits10: metrics.map(|m| m.hits10),
        drift_frobenius: drift,
        sinkhorn_iters: report.iterations_used,
        cg_iters: solution.map_or(0, |s| s.iterations),
        elapsed_ms,
        scoring_ms,
        sinkhorn_converged: report.converged,
        sinkhorn_violation: report.final_violation,
        cg_converged: solution.map(|s| s.converged),
        cg_residual: solution.map(|s| s.final_relative_residual),
        support_size,
        seed,
    }
}

fn evaluate(coupling: &Coupling, truth: Option<&SupervisionSet>, labeled: &BTreeSet<usize>) -> Result<Option<Metrics>> {
    match truth {
        None => Ok(None),
        Some(gt) if gt.sources().all(|i| labeled.contains(&i)) => Ok(None),
        Some(gt) => metrics(coupling, gt, labeled).map(Some),
    }
}

/// Targets of `row` in descending plan order, ties by lowest index.
pub fn top_candidates(row: ArrayView1<'_, f64>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// 1-based rank of `target` in `row` sorted descending, ties by lowest index.
pub fn rank_of(row: ArrayView1<'_, f64>, target: usize) -> usize {
    let v = row[target];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && j < target))
        .count()
}

/// MRR and Hits@k over ground-truth sources that are not in `labeled`.
pub fn metrics(coupling: &Coupling, ground_truth: &SupervisionSet, labeled: &BTreeSet<usize>) -> Result<Metrics> {
    let t = coupling.values();
    let ranks: Vec<usize> = ground_truth
        .pairs()
        .filter(|(i, _)| !labeled.contains(i))
        .map(|(i, j)| rank_of(t.row(i), j))
        .collect();
    metrics_from_ranks(&ranks)
}

pub fn metrics_from_ranks(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    let hits1 = hits(1);
    Ok(Metrics {
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1,
        hits5: hits(5),
        hits10: hits(10),
        recall1: hits1,
        evaluated: ranks.len(),
    })
}

/// `||T_i - T_0||_F`.
pub fn plan_drift(current: &Coupling, initial: &Coupling) -> Result<f64> {
    if current.values().dim() != initial.values().dim() {
        return Err(Error::DimensionMismatch {
            what: "plan drift",
            expected: format!("{:?}", initial.values().dim()),
            got: format!("{:?}", current.values().dim()),
        });
    }
    Ok(frobenius(current.values(), initial.values()))
}

fn frobenius(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}
