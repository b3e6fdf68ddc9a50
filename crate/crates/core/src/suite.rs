//! The synthetic benchmark suite: seeded ER instances, strategy sessions and
//! the scoring-time sweeps shared by the acceptance tests and the CLI.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::active::{self, GroundTruthOracle, SessionConfig, SessionOutcome};
use crate::adjoint::{self, Aggregation, CgConfig};
use crate::data::{self, Dataset, ErParams, FeatureMetric};
use crate::error::{Error, Result};
use crate::problem::{AlignmentProblem, Support};
use crate::sinkhorn::{self, SinkhornConfig, DEFAULT_SPARSIFY_RATIO};
use crate::strategies::StrategySpec;
use crate::utility::UtilitySpec;

/// Stream index of the prior-supervision draw.
pub const PRIOR_STREAM: u64 = 0x5052_494f_52;

/// Splits a root seed into independent streams.
pub fn derive_seed(root: u64, stream: u64) -> u64 {
    let mut z = root ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub er: ErParams,
    pub metric: FeatureMetric,
    pub normalize_cost: bool,
    pub beta: f64,
    pub epsilon: f64,
    pub sinkhorn: SinkhornConfig,
    pub cg: CgConfig,
    pub sparsify_ratio: f64,
    /// Budget as a fraction of the source count.
    pub budget_fraction: f64,
    pub rounds: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            er: ErParams {
                prior_fraction: 0.2,
                ..ErParams::default()
            },
            metric: FeatureMetric::SquaredEuclidean,
            normalize_cost: true,
            beta: 1.0,
            epsilon: 0.0025,
            sinkhorn: SinkhornConfig {
                log_domain: false,
                max_iterations: 3000,
                ..SinkhornConfig::default()
            },
            cg: CgConfig::default(),
            sparsify_ratio: DEFAULT_SPARSIFY_RATIO,
            budget_fraction: 0.2,
            rounds: 10,
        }
    }
}

impl SuiteConfig {
    pub fn budget(&self) -> usize {
        (self.budget_fraction * self.er.n as f64).round() as usize
    }

    /// The dataset and problem for one seed; the prior is drawn from a
    /// separate stream of the same seed.
    pub fn instance(&self, seed: u64) -> Result<(Dataset, AlignmentProblem)> {
        let dataset = data::generate_er_pair(&ErParams { seed, ..self.er })?;
        let problem = dataset.problem(
            self.metric,
            self.normalize_cost,
            self.beta,
            self.epsilon,
            derive_seed(seed, PRIOR_STREAM),
        )?;
        Ok((dataset, problem))
    }

    pub fn session_config(&self, strategy: StrategySpec, seed: u64) -> SessionConfig {
        let budget = self.budget();
        SessionConfig {
            sinkhorn: self.sinkhorn,
            cg: self.cg,
            sparsify_ratio: self.sparsify_ratio,
            seed,
            ..SessionConfig::new(budget, SessionConfig::batch_for_rounds(budget, self.rounds), strategy)
        }
    }

    /// Runs strategy `name` on the instance of `seed` with a truthful oracle.
    pub fn run(&self, name: &str, seed: u64) -> Result<SessionOutcome> {
        let (dataset, problem) = self.instance(seed)?;
        self.run_on(name, seed, &dataset, &problem)
    }

    pub fn run_on(&self, name: &str, seed: u64, dataset: &Dataset, problem: &AlignmentProblem) -> Result<SessionOutcome> {
        let strategy = StrategySpec::parse(name, seed, dataset.graphs.as_ref())?;
        let config = self.session_config(strategy, seed);
        let mut oracle = GroundTruthOracle::new(&dataset.ground_truth);
        active::run_session(problem, &config, &mut oracle, Some(&dataset.ground_truth))
    }
}

/// Scoring time of one impact pass at one size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingSample {
    pub n: usize,
    pub path: String,
    pub support_size: usize,
    pub cg_iterations: usize,
    pub seconds: f64,
}

/// Solves the round-0 plan of an ER instance of size `n` and times the
/// impact pass on the sparsified support (best of `repeats`), then once on
/// the full support when `dense` is set. Returns the samples and the score
/// vectors.
pub fn time_scoring(
    suite: &SuiteConfig,
    n: usize,
    seed: u64,
    repeats: usize,
    dense: bool,
) -> Result<(Vec<TimingSample>, Vec<Vec<f64>>)> {
    let suite = SuiteConfig {
        er: ErParams { n, ..suite.er },
        ..suite.clone()
    };
    let (_, problem) = suite.instance(seed)?;
    let (coupling, _) = sinkhorn::solve(&problem, &suite.sinkhorn)?;
    let sparse = sinkhorn::sparsify(coupling, suite.sparsify_ratio)?;
    let utility = UtilitySpec::squared_l2();
    let mut samples = Vec::new();
    let mut scores = Vec::new();
    let mut paths = vec![("sparse", sparse.clone())];
    if dense {
        paths.push(("dense", sparse.with_support(Support::full(n, n))));
    }
    for (k, (path, coupling)) in paths.into_iter().enumerate() {
        let mut best = f64::INFINITY;
        let mut last = None;
        let repeats = if k == 0 { repeats.max(1) } else { 1 };
        for _ in 0..repeats {
            let start = Instant::now();
            let out = adjoint::source_impacts(&problem, &coupling, &utility, &suite.cg, Aggregation::Posterior)?;
            best = best.min(start.elapsed().as_secs_f64());
            last = Some(out);
        }
        let out = last.expect("at least one repeat");
        samples.push(TimingSample {
            n,
            path: path.into(),
            support_size: coupling.support().len(),
            cg_iterations: out.solution.iterations,
            seconds: best,
        });
        scores.push(out.scores);
    }
    Ok((samples, scores))
}

/// Least-squares fit `y = a x + b`; returns `(a, b, r2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Invalid("linear fit needs two or more paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let a = sxy / sxx;
    let b = my - a * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((a, b, r2))
}

/// Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let (_, _, r2) = linear_fit(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    Ok(sxy.signum() * r2.sqrt())
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_has_unit_r2() {
        let (a, b, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((a - 2.0).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn suite_budget_and_batch() {
        let s = SuiteConfig::default();
        assert_eq!(s.budget(), 100);
        let c = s.session_config(StrategySpec::Entropy, 0);
        assert_eq!((c.budget, c.batch_size), (100, 10));
    }
}
