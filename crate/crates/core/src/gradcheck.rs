//! Finite-difference verification of adjoint cost gradients and pairwise
//! impacts on small random instances.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{self, AdjointSolution};
use crate::error::{Error, Result};
use crate::problem::{validate_problem, AlignmentProblem, Coupling, GraphPair, ProblemParts, SupervisionSet};
use crate::sinkhorn::{self, SinkhornConfig};
use crate::sparse::SparseMatrix;
use crate::utility::{self, UtilitySpec};

/// Largest `n * m` accepted for finite differences.
pub const MAX_ENTRIES: usize = 10_000;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub n: usize,
    pub m: usize,
    pub epsilon: f64,
    pub beta: f64,
    /// Central-difference step on cost entries.
    pub cost_step: f64,
    /// Central-difference step on supervision entries.
    pub supervision_step: f64,
    /// Edge probability of the random graphs behind the consistency utility.
    pub edge_probability: f64,
    pub sinkhorn_tolerance: f64,
    pub cg_tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            n: 8,
            m: 10,
            epsilon: 0.05,
            beta: 1.0,
            cost_step: 1e-5,
            supervision_step: 1e-4,
            edge_probability: 0.4,
            sinkhorn_tolerance: 1e-12,
            cg_tolerance: 1e-12,
        }
    }
}

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Invalid("gradcheck needs n, m >= 1".into()));
        }
        if self.n * self.m > MAX_ENTRIES {
            return Err(Error::OutOfRange {
                name: "n * m",
                value: (self.n * self.m) as f64,
                range: "[1, 10000]",
            });
        }
        for (name, v) in [("cost_step", self.cost_step), ("supervision_step", self.supervision_step)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::OutOfRange {
                    name,
                    value: v,
                    range: "(0, inf)",
                });
            }
        }
        Ok(())
    }

    fn sinkhorn(&self) -> SinkhornConfig {
        SinkhornConfig {
            tolerance: self.sinkhorn_tolerance,
            max_iterations: 200_000,
            log_domain: true,
            trace_objective: false,
        }
    }
}

/// Uniform random cost in `[0, 1)`, uniform marginals, source 0 supervised
/// to a random target, and two random graphs.
pub fn random_instance(config: &GradcheckConfig, seed: u64) -> Result<(AlignmentProblem, GraphPair)> {
    config.validate()?;
    let (n, m) = (config.n, config.m);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cost = Array2::from_shape_simple_fn((n, m), || rng.gen::<f64>());
    let supervision = SupervisionSet::from_pairs(n, m, [(0, rng.gen_range(0..m))])?;
    let mut graph = |k: usize| {
        let mut edges = Vec::new();
        for u in 0..k {
            for v in u + 1..k {
                if rng.gen::<f64>() < config.edge_probability {
                    edges.push((u, v, 1.0));
                }
            }
        }
        SparseMatrix::from_undirected_edges(k, edges)
    };
    let graphs = GraphPair::new(graph(n)?, graph(m)?)?;
    let problem = validate_problem(ProblemParts {
        supervision,
        ..ProblemParts::uniform(cost, config.beta, config.epsilon)
    })?;
    Ok((problem, graphs))
}

/// The three utilities, the consistency one over the graphs' Laplacians.
pub fn utilities(graphs: &GraphPair) -> Result<Vec<UtilitySpec>> {
    let (m1, m2) = graphs.laplacians()?;
    Ok(vec![UtilitySpec::squared_l2(), UtilitySpec::entropy(), UtilitySpec::consistency(m1, m2)?])
}

/// Outcome of one utility's check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtilityCheck {
    pub utility: String,
    /// `||adjoint - fd||_inf / ||fd||_inf` for the cost gradient.
    pub cost_gradient_error: f64,
    /// Same measure for the pairwise impacts.
    pub impact_error: f64,
    /// Both the impacts and their finite differences are exactly zero.
    pub impacts_exact_zero: bool,
    pub cg_iterations: usize,
    pub cg_residual: f64,
}

impl UtilityCheck {
    pub fn max_error(&self) -> f64 {
        self.cost_gradient_error.max(self.impact_error)
    }
}

/// Relative error `||a - b||_inf / ||b||_inf`; `||a||_inf` when `b` is zero.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let diff = a.iter().zip(b).fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Adjoint quantities at the solution of `problem`.
pub struct AdjointGradients {
    pub coupling: Coupling,
    pub solution: AdjointSolution,
    /// `grad_C~ f`.
    pub cost_gradient: Array2<f64>,
    /// `d f / d H_ij` for every pair.
    pub impacts: Array2<f64>,
}

pub fn adjoint_gradients(
    problem: &AlignmentProblem,
    utility: &UtilitySpec,
    sinkhorn_config: &SinkhornConfig,
    cg_tolerance: f64,
) -> Result<AdjointGradients> {
    let (coupling, _) = sinkhorn::solve(problem, sinkhorn_config)?;
    let grad_f = utility::gradient(utility, coupling.values())?;
    let system = adjoint::assemble(&coupling, problem.marginals(), grad_f.view())?;
    let solution = adjoint::cg_solve(&system, cg_tolerance, 10 * system.dim());
    let cost_gradient = adjoint::grad_cost(&coupling, &solution, grad_f.view(), problem.epsilon())?;
    let impacts = Array2::from_shape_fn((problem.n(), problem.m()), |(i, j)| {
        adjoint::pairwise_impact(i, j, problem, &coupling, &solution, grad_f[[i, j]])
    });
    Ok(AdjointGradients {
        coupling,
        solution,
        cost_gradient,
        impacts,
    })
}

fn utility_at(problem: &AlignmentProblem, cost: &Array2<f64>, utility: &UtilitySpec, cfg: &SinkhornConfig) -> Result<f64> {
    let (t, _) = sinkhorn::solve_with_cost(problem.marginals(), cost.view(), problem.epsilon(), cfg)?;
    utility::value(utility, t.values())
}

/// Central differences of `f(T(C~ + h E_ij))` and of `f(T(H + h E_ij))`,
/// each through a full Sinkhorn solve. The supervision step is taken on the
/// smooth extension of `C~` in `H`, so unsupervised entries step below zero.
pub fn finite_differences(
    problem: &AlignmentProblem,
    utility: &UtilitySpec,
    sinkhorn_config: &SinkhornConfig,
    cost_step: f64,
    supervision_step: f64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let base = sinkhorn::build_supervised_cost(problem.cost(), problem.supervision(), problem.beta())?.into_inner();
    let (n, m) = base.dim();
    let mut cost_grad = Array2::zeros((n, m));
    let mut impacts = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut c = base.clone();
            c[[i, j]] = base[[i, j]] + cost_step;
            let up = utility_at(problem, &c, utility, sinkhorn_config)?;
            c[[i, j]] = base[[i, j]] - cost_step;
            let down = utility_at(problem, &c, utility, sinkhorn_config)?;
            cost_grad[[i, j]] = (up - down) / (2.0 * cost_step);

            let dc = problem.beta() * supervision_step * problem.cost().get(i, j);
            if dc != 0.0 {
                c[[i, j]] = base[[i, j]] - dc;
                let up = utility_at(problem, &c, utility, sinkhorn_config)?;
                c[[i, j]] = base[[i, j]] + dc;
                let down = utility_at(problem, &c, utility, sinkhorn_config)?;
                impacts[[i, j]] = (up - down) / (2.0 * supervision_step);
            }
        }
    }
    Ok((cost_grad, impacts))
}

/// Compares adjoint and finite-difference derivatives for each utility.
pub fn check_instance(
    problem: &AlignmentProblem,
    utilities: &[UtilitySpec],
    config: &GradcheckConfig,
) -> Result<Vec<UtilityCheck>> {
    let cfg = config.sinkhorn();
    utilities
        .iter()
        .map(|u| {
            let adj = adjoint_gradients(problem, u, &cfg, config.cg_tolerance)?;
            let (fd_cost, fd_impacts) = finite_differences(problem, u, &cfg, config.cost_step, config.supervision_step)?;
            let zero = |a: &Array2<f64>| a.iter().all(|&v| v == 0.0);
            Ok(UtilityCheck {
                utility: u.kind().name().into(),
                cost_gradient_error: relative_error(&adj.cost_gradient, &fd_cost),
                impact_error: relative_error(&adj.impacts, &fd_impacts),
                impacts_exact_zero: zero(&adj.impacts) && zero(&fd_impacts),
                cg_iterations: adj.solution.iterations,
                cg_residual: adj.solution.final_relative_residual,
            })
        })
        .collect()
}
