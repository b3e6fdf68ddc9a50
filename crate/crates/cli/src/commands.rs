use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use otactive::active::{self, GroundTruthOracle, Metrics, SessionConfig, SessionOutcome};
use otactive::data::{self, Dataset};
use otactive::gradcheck::{self, UtilityCheck};
use otactive::sinkhorn;
use otactive::strategies::StrategySpec;
use otactive::suite::{self, derive_seed, SuiteConfig, PRIOR_STREAM};
use otactive::{AlignmentProblem, Error};
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Largest relative error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

fn data_err(e: Error) -> CliError {
    CliError::Data(e.to_string())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write(path, text)
}

/// Loaded data, or the generator that produces one instance per seed.
enum Source {
    Files(Dataset),
    Generator(SuiteConfig),
}

impl Source {
    fn open(config: &RunConfig) -> Result<Self, CliError> {
        match &config.data {
            Some(paths) => Ok(Source::Files(data::load_dataset(paths, config.prior_fraction).map_err(data_err)?)),
            None => Ok(Source::Generator(config.suite())),
        }
    }

    fn instance(&self, config: &RunConfig, seed: u64) -> Result<(Dataset, AlignmentProblem), CliError> {
        // Parameter errors surface here for synthetic data and are reported as config errors.
        match self {
            Source::Files(ds) => {
                let p = ds
                    .problem(config.metric, config.normalize_cost, config.beta, config.epsilon, derive_seed(seed, PRIOR_STREAM))
                    .map_err(data_err)?;
                Ok((ds.clone(), p))
            }
            Source::Generator(suite) => suite.instance(seed).map_err(|e| CliError::Config(e.to_string())),
        }
    }
}

fn session_config(config: &RunConfig, strategy: StrategySpec, n: usize, seed: u64) -> SessionConfig {
    let budget = config
        .budget
        .unwrap_or_else(|| (config.budget_fraction * n as f64).round() as usize);
    let batch = config
        .batch_size
        .unwrap_or_else(|| SessionConfig::batch_for_rounds(budget, config.rounds));
    SessionConfig {
        sinkhorn: config.sinkhorn,
        cg: config.cg,
        sparsify_ratio: config.sparsify_ratio,
        seed,
        record_timings: config.record_timings,
        ..SessionConfig::new(budget, batch, strategy)
    }
}

fn file_stem(strategy: &str) -> String {
    strategy.replace(|c: char| !(c.is_ascii_alphanumeric() || c == '_'), "_")
}

#[derive(Serialize)]
struct SolveReport {
    n: usize,
    m: usize,
    seed: u64,
    epsilon: f64,
    beta: f64,
    supervised_pairs: usize,
    sinkhorn_iters: usize,
    sinkhorn_violation: f64,
    sinkhorn_converged: bool,
    support_size: usize,
    metrics: Option<Metrics>,
}

pub fn solve(config: &RunConfig, out: &Path, emit_plan: bool) -> Result<(), CliError> {
    let source = Source::open(config)?;
    let (dataset, problem) = source.instance(config, config.seed)?;
    let (coupling, report) = match sinkhorn::solve(&problem, &config.sinkhorn) {
        Ok(r) => r,
        Err(Error::Numerical(m)) => return Err(CliError::Convergence(m)),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    if emit_plan {
        data::write_matrix(&out.join("plan.csv"), &coupling.values().to_owned()).map_err(data_err)?;
    }
    let coupling = sinkhorn::sparsify(coupling, config.sparsify_ratio).map_err(|e| CliError::Config(e.to_string()))?;
    let labeled = problem.supervision().sources().collect();
    let metrics = if dataset.ground_truth.sources().any(|i| !problem.supervision().is_labeled(i)) {
        Some(active::metrics(&coupling, &dataset.ground_truth, &labeled).map_err(data_err)?)
    } else {
        None
    };
    let summary = SolveReport {
        n: problem.n(),
        m: problem.m(),
        seed: config.seed,
        epsilon: problem.epsilon(),
        beta: problem.beta(),
        supervised_pairs: problem.supervision().len(),
        sinkhorn_iters: report.iterations_used,
        sinkhorn_violation: report.final_violation,
        sinkhorn_converged: report.converged,
        support_size: coupling.support().len(),
        metrics,
    };
    write_json(&out.join("metrics.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary).expect("report serializes"));
    if !report.converged {
        return Err(CliError::Convergence(format!(
            "Sinkhorn stopped after {} iterations with marginal violation {:e}",
            report.iterations_used, report.final_violation
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckReport {
    n: usize,
    m: usize,
    seed: u64,
    epsilon: f64,
    beta: f64,
    tolerance: f64,
    max_relative_error: f64,
    passed: bool,
    utilities: Vec<UtilityCheck>,
}

pub fn gradcheck(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let gc = &config.gradcheck;
    gc.validate().map_err(|e| CliError::Config(format!("field `gradcheck`: {e}")))?;
    let (problem, graphs) = gradcheck::random_instance(gc, config.seed).map_err(|e| CliError::Config(e.to_string()))?;
    let utilities = gradcheck::utilities(&graphs).map_err(|e| CliError::Config(e.to_string()))?;
    let checks = gradcheck::check_instance(&problem, &utilities, gc).map_err(|e| match e {
        Error::Numerical(m) => CliError::Convergence(m),
        e => CliError::Gradcheck(e.to_string()),
    })?;
    let max = checks.iter().map(UtilityCheck::max_error).fold(0.0, f64::max);
    let report = GradcheckReport {
        n: gc.n,
        m: gc.m,
        seed: config.seed,
        epsilon: gc.epsilon,
        beta: gc.beta,
        tolerance: GRADCHECK_TOLERANCE,
        max_relative_error: max,
        passed: max <= GRADCHECK_TOLERANCE,
        utilities: checks,
    };
    write_json(&out.join("gradcheck.json"), &report)?;
    for c in &report.utilities {
        let impacts = if c.impacts_exact_zero { "exact zero".to_string() } else { format!("{:.3e}", c.impact_error) };
        println!("{:<12} cost gradient {:.3e}  impacts {impacts}", c.utility, c.cost_gradient_error);
    }
    println!("max relative error {max:.3e}");
    if !report.passed {
        return Err(CliError::Gradcheck(format!("max relative error {max:e} exceeds {GRADCHECK_TOLERANCE:e}")));
    }
    Ok(())
}

fn run_one(config: &RunConfig, name: &str, seed: u64, dataset: &Dataset, problem: &AlignmentProblem) -> otactive::Result<SessionOutcome> {
    let strategy = StrategySpec::parse(name, seed, dataset.graphs.as_ref())?;
    let cfg = session_config(config, strategy, problem.n(), seed);
    let mut oracle = GroundTruthOracle::new(&dataset.ground_truth);
    active::run_session(problem, &cfg, &mut oracle, Some(&dataset.ground_truth))
}

#[derive(Default)]
struct StrategyRuns {
    mrr: Vec<f64>,
    hits1: Vec<f64>,
    hits10: Vec<f64>,
    queries: Vec<f64>,
    failures: Vec<String>,
}

pub fn run(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let source = Source::open(config)?;
    let mut logs: BTreeMap<&str, String> = config.strategies.iter().map(|s| (s.as_str(), String::new())).collect();
    let mut runs: BTreeMap<&str, StrategyRuns> = BTreeMap::new();
    for seed in config.run_seeds() {
        let (dataset, problem) = source.instance(config, seed)?;
        for name in &config.strategies {
            let entry = runs.entry(name.as_str()).or_default();
            match run_one(config, name, seed, &dataset, &problem) {
                Ok(outcome) => {
                    logs.get_mut(name.as_str()).expect("strategy listed").push_str(&outcome.log.to_jsonl());
                    if let Some(reason) = &outcome.log.oracle_failure {
                        entry.failures.push(format!("seed {seed}: oracle failed: {reason}"));
                    }
                    let last = outcome.log.final_round().expect("round 0 is always logged");
                    if let (Some(mrr), Some(h1), Some(h10)) = (last.mrr, last.hits1, last.hits10) {
                        entry.mrr.push(mrr);
                        entry.hits1.push(h1);
                        entry.hits10.push(h10);
                    }
                    entry.queries.push(outcome.queried.len() as f64);
                }
                Err(e) => {
                    eprintln!("strategy {name} seed {seed} failed: {e}");
                    entry.failures.push(format!("seed {seed}: {e}"));
                }
            }
        }
    }
    for (name, text) in &logs {
        write(&out.join(format!("{}.jsonl", file_stem(name))), text)?;
    }

    let mut csv = String::from("strategy,runs,failed,mrr_mean,mrr_std,hits1_mean,hits1_std,hits10_mean,hits10_std,queries_mean\n");
    for name in &config.strategies {
        let r = &runs[name.as_str()];
        let (mrr, mrr_sd) = suite::mean_std(&r.mrr);
        let (h1, h1_sd) = suite::mean_std(&r.hits1);
        let (h10, h10_sd) = suite::mean_std(&r.hits10);
        let (q, _) = suite::mean_std(&r.queries);
        writeln!(
            csv,
            "{name},{},{},{mrr:.6},{mrr_sd:.6},{h1:.6},{h1_sd:.6},{h10:.6},{h10_sd:.6},{q}",
            config.seeds,
            r.failures.len()
        )
        .expect("string write");
        println!("{name:<24} MRR {mrr:.4} ± {mrr_sd:.4}  Hits@1 {h1:.4}  Hits@10 {h10:.4}");
    }
    write(&out.join("summary.csv"), csv)?;

    let failed: Vec<String> = runs
        .iter()
        .flat_map(|(name, r)| r.failures.iter().map(move |f| format!("{name} {f}")))
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Strategy(failed.join("; ")))
    }
}

#[derive(Serialize)]
struct BenchSummary {
    /// `(n, dense seconds / sparse seconds)` per compared size.
    speedups: Vec<(usize, f64)>,
    /// Least-squares fit of sparse seconds against `n + m`.
    scaling_fit: Option<LinearFit>,
}

#[derive(Serialize)]
struct LinearFit {
    slope: f64,
    intercept: f64,
    r2: f64,
}

pub fn bench(config: &RunConfig, out: &Path) -> Result<(), CliError> {
    let mut csv = String::from("section,strategy,path,n,round,support_size,cg_iterations,seconds\n");

    let source = Source::open(config)?;
    let (dataset, problem) = source.instance(config, config.seed)?;
    let timed = RunConfig {
        record_timings: true,
        ..config.clone()
    };
    let mut failures = Vec::new();
    for name in &config.strategies {
        match run_one(&timed, name, config.seed, &dataset, &problem) {
            Ok(outcome) => {
                for r in outcome.log.rounds.iter().filter(|r| r.round > 0) {
                    writeln!(
                        csv,
                        "scoring,{name},,{},{},{},{},{:e}",
                        problem.n(),
                        r.round,
                        r.support_size,
                        r.cg_iters,
                        r.scoring_ms / 1e3
                    )
                    .expect("string write");
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }

    let mut suite = config.suite();
    if let Some(max) = config.bench.max_iterations {
        suite.sinkhorn.max_iterations = max;
    }
    let sweep_err = |e: Error| match e {
        Error::Numerical(m) => CliError::Convergence(m),
        e => CliError::Config(e.to_string()),
    };
    let mut speedups = Vec::new();
    for &n in &config.bench.dense_sizes {
        let (samples, _) = suite::time_scoring(&suite, n, config.seed, config.bench.repeats, true).map_err(sweep_err)?;
        for s in &samples {
            writeln!(csv, "dense_vs_sparse,,{},{n},,{},{},{:e}", s.path, s.support_size, s.cg_iterations, s.seconds).expect("string write");
        }
        speedups.push((n, samples[1].seconds / samples[0].seconds));
    }
    let mut points = Vec::new();
    for &n in &config.bench.scaling_sizes {
        let (samples, _) = suite::time_scoring(&suite, n, config.seed, config.bench.repeats, false).map_err(sweep_err)?;
        let s = &samples[0];
        writeln!(csv, "scaling,,{},{n},,{},{},{:e}", s.path, s.support_size, s.cg_iterations, s.seconds).expect("string write");
        points.push((2.0 * n as f64, s.seconds));
    }
    let scaling_fit = if points.len() >= 2 {
        let (x, y): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
        suite::linear_fit(&x, &y).ok().map(|(slope, intercept, r2)| LinearFit { slope, intercept, r2 })
    } else {
        None
    };
    write(&out.join("timing.csv"), csv)?;
    let summary = BenchSummary { speedups, scaling_fit };
    for (n, ratio) in &summary.speedups {
        println!("n = {n}: dense / sparse scoring time {ratio:.2}");
    }
    if let Some(f) = &summary.scaling_fit {
        println!("scaling fit: seconds = {:.3e} (n + m) + {:.3e}, R^2 = {:.4}", f.slope, f.intercept, f.r2);
    }
    write_json(&out.join("bench.json"), &summary)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Strategy(failures.join("; ")))
    }
}
