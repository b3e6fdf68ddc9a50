//! The JSON run configuration.

use std::path::{Path, PathBuf};

use otactive::adjoint::CgConfig;
use otactive::data::{DatasetPaths, ErParams, FeatureMetric};
use otactive::gradcheck::GradcheckConfig;
use otactive::sinkhorn::{SinkhornConfig, DEFAULT_SPARSIFY_RATIO};
use otactive::strategies::StrategySpec;
use otactive::suite::SuiteConfig;
use otactive::Error;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset files. Exactly one of `data` and `generator` is set.
    pub data: Option<DatasetPaths>,
    /// Synthetic ER pair parameters; `seed` and `prior_fraction` are
    /// replaced by the run seed and the top-level fraction.
    pub generator: Option<ErParams>,
    /// Fraction of the ground truth revealed before the first round.
    pub prior_fraction: f64,
    pub metric: FeatureMetric,
    pub normalize_cost: bool,
    pub beta: f64,
    pub epsilon: f64,
    pub sinkhorn: SinkhornConfig,
    pub cg: CgConfig,
    pub sparsify_ratio: f64,
    /// Total queries; defaults to `budget_fraction * n`.
    pub budget: Option<usize>,
    pub budget_fraction: f64,
    pub rounds: usize,
    /// Queries per round; defaults to `ceil(budget / rounds)`.
    pub batch_size: Option<usize>,
    pub strategies: Vec<String>,
    /// Number of seeds per strategy, `seed, seed + 1, ...`.
    pub seeds: usize,
    pub seed: u64,
    /// Wall-clock fields in logs; off makes reruns byte-identical.
    pub record_timings: bool,
    pub output_dir: PathBuf,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let suite = SuiteConfig::default();
        Self {
            data: None,
            generator: None,
            prior_fraction: suite.er.prior_fraction,
            metric: suite.metric,
            normalize_cost: suite.normalize_cost,
            beta: suite.beta,
            epsilon: suite.epsilon,
            sinkhorn: suite.sinkhorn,
            cg: suite.cg,
            sparsify_ratio: DEFAULT_SPARSIFY_RATIO,
            budget: None,
            budget_fraction: suite.budget_fraction,
            rounds: suite.rounds,
            batch_size: None,
            strategies: vec!["random".into(), "avatar_l2".into()],
            seeds: 1,
            seed: 0,
            record_timings: true,
            output_dir: PathBuf::from("out"),
            gradcheck: GradcheckConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Sizes of the sparse scoring-time sweep.
    pub scaling_sizes: Vec<usize>,
    /// Sizes at which the sparse and dense impact paths are compared.
    pub dense_sizes: Vec<usize>,
    pub repeats: usize,
    /// Sinkhorn iteration cap for the sweeps; the run cap when unset.
    pub max_iterations: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            scaling_sizes: Vec::new(),
            dense_sizes: Vec::new(),
            repeats: 3,
            max_iterations: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            CliError::Config(format!("{}: field `{field}`: {}", path.display(), e.inner()))
        })
    }

    /// Exactly one data source must be given.
    pub fn require_data(&self) -> Result<(), CliError> {
        match (&self.data, &self.generator) {
            (None, None) => Err(CliError::Config("one of `data` or `generator` is required".into())),
            _ => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.data.is_some() && self.generator.is_some() {
            return bad("`data` and `generator` are mutually exclusive".into());
        }
        if !(0.0..1.0).contains(&self.prior_fraction) {
            return bad(format!("field `prior_fraction`: {} is outside [0, 1)", self.prior_fraction));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return bad(format!("field `epsilon`: {} must be positive", self.epsilon));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("field `beta`: {} is outside [0, 1]", self.beta));
        }
        if self.sinkhorn.validate().is_err() {
            return bad("field `sinkhorn`: max_iterations must be positive and tolerance finite and positive".into());
        }
        if self.rounds == 0 {
            return bad("field `rounds`: must be positive".into());
        }
        if self.batch_size == Some(0) {
            return bad("field `batch_size`: must be positive".into());
        }
        if self.seeds == 0 {
            return bad("field `seeds`: must be positive".into());
        }
        if self.strategies.is_empty() {
            return bad("field `strategies`: at least one strategy is required".into());
        }
        for name in &self.strategies {
            match StrategySpec::parse(name, 0, None) {
                Ok(_) | Err(Error::MissingGraph(_)) => {}
                Err(e) => return bad(format!("field `strategies`: {e}")),
            }
        }
        if self.bench.repeats == 0 {
            return bad("field `bench.repeats`: must be positive".into());
        }
        Ok(())
    }

    /// The suite view of a generator config, used for synthetic instances.
    pub fn suite(&self) -> SuiteConfig {
        SuiteConfig {
            er: ErParams {
                prior_fraction: self.prior_fraction,
                ..self.generator.unwrap_or_default()
            },
            metric: self.metric,
            normalize_cost: self.normalize_cost,
            beta: self.beta,
            epsilon: self.epsilon,
            sinkhorn: self.sinkhorn,
            cg: self.cg,
            sparsify_ratio: self.sparsify_ratio,
            budget_fraction: self.budget_fraction,
            rounds: self.rounds,
        }
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|k| self.seed.wrapping_add(k)).collect()
    }
}
