//! Entropy-regularized optimal transport with supervision-modulated costs.
//!
//! The solver alternates exact row and column scalings. In log-domain mode the
//! scalings are kept as dual potentials `(alpha, beta)` and every plan entry is
//! `exp((alpha_i + beta_j - C_ij) / eps)`; each half-step corrects the
//! potentials by the log-ratio of target and current marginals, which keeps
//! all evaluated exponentials bounded by the total mass. Rows or columns whose
//! entries underflow entirely fall back to a max-shifted log-sum-exp.

use ndarray::{Array1, Array2, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{AlignmentProblem, Coupling, CostMatrix, Marginals, Support, SupervisionSet};

/// Default `threshold_ratio` for [`sparsify`].
pub const DEFAULT_SPARSIFY_RATIO: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinkhornConfig {
    pub max_iterations: usize,
    /// Stopping threshold on the L1 marginal violation.
    pub tolerance: f64,
    pub log_domain: bool,
    /// Record primal and dual objectives after every iteration.
    pub trace_objective: bool,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10_000,
            tolerance: 1e-9,
            log_domain: true,
            trace_objective: false,
        }
    }
}

impl SinkhornConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::OutOfRange {
                name: "max_iterations",
                value: 0.0,
                range: "[1, inf)",
            });
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::OutOfRange {
                name: "tolerance",
                value: self.tolerance,
                range: "(0, inf)",
            });
        }
        Ok(())
    }
}

/// Dual potentials recovered from the scalings.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub alpha: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Objectives after one full Sinkhorn iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSample {
    /// `<C, T> - eps * Ent(T)` at the current (possibly infeasible) iterate.
    pub primal: f64,
    /// `<alpha, mu> + <beta, nu> - eps * sum(T)`.
    pub dual: f64,
}

#[derive(Debug, Clone)]
pub struct SinkhornReport {
    pub iterations_used: usize,
    pub final_violation: f64,
    pub converged: bool,
    pub potentials: DualPotentials,
    pub objective_trace: Vec<ObjectiveSample>,
}

/// `C~ = (1 - beta H) . C`.
pub fn build_supervised_cost(cost: &CostMatrix, supervision: &SupervisionSet, beta: f64) -> Result<CostMatrix> {
    let (n, m) = cost.shape();
    if supervision.n() != n || supervision.m() != m {
        return Err(Error::DimensionMismatch {
            what: "supervision vs cost",
            expected: format!("{n}x{m}"),
            got: format!("{}x{}", supervision.n(), supervision.m()),
        });
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::OutOfRange {
            name: "beta",
            value: beta,
            range: "[0, 1]",
        });
    }
    let mut values = cost.values().to_owned();
    for (i, j) in supervision.pairs() {
        values[[i, j]] *= 1.0 - beta;
    }
    CostMatrix::new(values)
}

/// Solves the supervised entropic OT problem of `problem`.
pub fn solve(problem: &AlignmentProblem, config: &SinkhornConfig) -> Result<(Coupling, SinkhornReport)> {
    let supervised = build_supervised_cost(problem.cost(), problem.supervision(), problem.beta())?;
    solve_with_cost(problem.marginals(), supervised.values(), problem.epsilon(), config)
}

/// Solves entropic OT for an explicit cost matrix. The cost is not required to
/// be non-negative, which finite-difference probes rely on.
pub fn solve_with_cost(
    marginals: &Marginals,
    cost: ArrayView2<'_, f64>,
    epsilon: f64,
    config: &SinkhornConfig,
) -> Result<(Coupling, SinkhornReport)> {
    config.validate()?;
    let (n, m) = cost.dim();
    if n != marginals.n() || m != marginals.m() {
        return Err(Error::DimensionMismatch {
            what: "cost vs marginals",
            expected: format!("{}x{}", marginals.n(), marginals.m()),
            got: format!("{n}x{m}"),
        });
    }
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: "(0, inf)",
        });
    }
    let run = if config.log_domain {
        log_domain(marginals, cost, epsilon, config)?
    } else {
        scaling_domain(marginals, cost, epsilon, config)?
    };
    let coupling = Coupling::new(run.plan, marginals)?;
    let final_violation = coupling.marginal_violation();
    let report = SinkhornReport {
        iterations_used: run.iterations,
        final_violation,
        converged: final_violation <= config.tolerance,
        potentials: DualPotentials {
            alpha: run.alpha,
            beta: run.beta,
        },
        objective_trace: run.trace,
    };
    Ok((coupling, report))
}

struct Run {
    plan: Array2<f64>,
    alpha: Array1<f64>,
    beta: Array1<f64>,
    iterations: usize,
    trace: Vec<ObjectiveSample>,
}

fn l1_gap(sums: &[f64], target: ndarray::ArrayView1<'_, f64>) -> f64 {
    sums.iter().zip(target).map(|(s, t)| (s - t).abs()).sum()
}

fn log_domain(marginals: &Marginals, cost: ArrayView2<'_, f64>, eps: f64, config: &SinkhornConfig) -> Result<Run> {
    let (n, m) = cost.dim();
    let mu = marginals.mu();
    let nu = marginals.nu();
    let mass = marginals.total_mass();
    let mut alpha = vec![0.0; n];
    let mut beta = vec![0.0; m];
    let mut row_sums = vec![0.0; n];
    let mut col_sums = vec![0.0; m];
    let mut trace = Vec::new();
    let mut iterations = 0;

    for it in 1..=config.max_iterations {
        iterations = it;
        for (i, row) in cost.outer_iter().enumerate() {
            let a = alpha[i];
            row_sums[i] = row
                .iter()
                .zip(&beta)
                .map(|(&c, &b)| ((a + b - c) / eps).exp())
                .sum();
        }
        if it > 1 {
            if config.trace_objective {
                trace.push(objectives(&alpha, &beta, &row_sums, mu, nu, mass, eps));
            }
            if l1_gap(&row_sums, mu) <= config.tolerance {
                iterations = it - 1;
                break;
            }
        }
        for i in 0..n {
            let s = row_sums[i];
            alpha[i] = if s > 0.0 && s.is_finite() {
                alpha[i] + eps * (mu[i].ln() - s.ln())
            } else {
                let lse = log_sum_exp(cost.row(i).iter().zip(&beta).map(|(&c, &b)| (b - c) / eps));
                eps * (mu[i].ln() - lse)
            };
        }

        col_sums.iter_mut().for_each(|c| *c = 0.0);
        for (i, row) in cost.outer_iter().enumerate() {
            let a = alpha[i];
            for ((acc, &c), &b) in col_sums.iter_mut().zip(row.iter()).zip(&beta) {
                *acc += ((a + b - c) / eps).exp();
            }
        }
        for j in 0..m {
            let s = col_sums[j];
            beta[j] = if s > 0.0 && s.is_finite() {
                beta[j] + eps * (nu[j].ln() - s.ln())
            } else {
                let lse = log_sum_exp(cost.column(j).iter().zip(&alpha).map(|(&c, &a)| (a - c) / eps));
                eps * (nu[j].ln() - lse)
            };
        }
        if alpha.iter().chain(&beta).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite potential at iteration {it}")));
        }
    }

    let mut plan = Array2::zeros((n, m));
    Zip::indexed(&mut plan).and(&cost).for_each(|(i, j), t, &c| {
        *t = ((alpha[i] + beta[j] - c) / eps).exp();
    });
    Ok(Run {
        plan,
        alpha: Array1::from(alpha),
        beta: Array1::from(beta),
        iterations,
        trace,
    })
}

fn scaling_domain(marginals: &Marginals, cost: ArrayView2<'_, f64>, eps: f64, config: &SinkhornConfig) -> Result<Run> {
    let (n, m) = cost.dim();
    let mu = marginals.mu();
    let nu = marginals.nu();
    let mass = marginals.total_mass();
    let kernel = cost.mapv(|c| (-c / eps).exp());
    if kernel.iter().any(|k| !k.is_finite()) {
        return Err(Error::Numerical("kernel overflow; use log-domain mode".into()));
    }
    // Row-major transpose so both half-steps are contiguous dot products.
    let kernel_t = kernel.t().as_standard_layout().into_owned();
    let mut u = Array1::<f64>::ones(n);
    let mut v = Array1::<f64>::ones(m);
    let mut kv = Array1::<f64>::zeros(n);
    let mut ktu = Array1::<f64>::zeros(m);
    let mut trace = Vec::new();
    let mut iterations = 0;

    for it in 1..=config.max_iterations {
        iterations = it;
        kv.assign(&kernel.dot(&v));
        if it > 1 {
            let row_sums: Vec<f64> = u.iter().zip(&kv).map(|(u, k)| u * k).collect();
            if config.trace_objective {
                let alpha: Vec<f64> = u.iter().map(|x| eps * x.ln()).collect();
                let beta: Vec<f64> = v.iter().map(|x| eps * x.ln()).collect();
                trace.push(objectives(&alpha, &beta, &row_sums, mu, nu, mass, eps));
            }
            if l1_gap(&row_sums, mu) <= config.tolerance {
                iterations = it - 1;
                break;
            }
        }
        for i in 0..n {
            u[i] = mu[i] / kv[i];
        }
        ktu.assign(&kernel_t.dot(&u));
        for j in 0..m {
            v[j] = nu[j] / ktu[j];
        }
        if u.iter().chain(&v).any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::Numerical(format!(
                "scaling overflow or underflow at iteration {it}; use log-domain mode"
            )));
        }
    }

    let mut plan = kernel;
    Zip::indexed(&mut plan).for_each(|(i, j), k| *k *= u[i] * v[j]);
    Ok(Run {
        plan,
        alpha: u.iter().map(|x| eps * x.ln()).collect(),
        beta: v.iter().map(|x| eps * x.ln()).collect(),
        iterations,
        trace,
    })
}

/// Objectives at an iterate whose columns are exact and whose rows sum to
/// `row_sums`. With `log T = (alpha + beta - C) / eps` the primal collapses to
/// `<alpha, T1> + <beta, nu> - eps * sum(T)`.
fn objectives(
    alpha: &[f64],
    beta: &[f64],
    row_sums: &[f64],
    mu: ndarray::ArrayView1<'_, f64>,
    nu: ndarray::ArrayView1<'_, f64>,
    mass: f64,
    eps: f64,
) -> ObjectiveSample {
    let b_nu: f64 = beta.iter().zip(nu).map(|(b, n)| b * n).sum();
    let a_row: f64 = alpha.iter().zip(row_sums).map(|(a, r)| a * r).sum();
    let a_mu: f64 = alpha.iter().zip(mu).map(|(a, m)| a * m).sum();
    ObjectiveSample {
        primal: a_row + b_nu - eps * mass,
        dual: a_mu + b_nu - eps * mass,
    }
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if !mx.is_finite() {
        return mx;
    }
    mx + xs.map(|x| (x - mx).exp()).sum::<f64>().ln()
}

/// Entropic objective `<C, T> - eps * Ent(T)` with `Ent(T) = -sum T (log T - 1)`.
pub fn entropic_objective(cost: ArrayView2<'_, f64>, plan: ArrayView2<'_, f64>, eps: f64) -> f64 {
    Zip::from(cost).and(plan).fold(0.0, |acc, &c, &t| {
        let ent = if t > 0.0 { t * (t.ln() - 1.0) } else { 0.0 };
        acc + c * t + eps * ent
    })
}

/// Retains every entry at or above `threshold_ratio * max(T)` plus each
/// row's argmax. Plan values are left untouched.
pub fn sparsify(coupling: Coupling, threshold_ratio: f64) -> Result<Coupling> {
    if !(threshold_ratio > 0.0 && threshold_ratio < 1.0) {
        return Err(Error::OutOfRange {
            name: "threshold_ratio",
            value: threshold_ratio,
            range: "(0, 1)",
        });
    }
    let values = coupling.values();
    let mx = values.iter().copied().fold(0.0, f64::max);
    let threshold = threshold_ratio * mx;
    let rows = values
        .outer_iter()
        .map(|row| {
            let mut best = 0;
            let mut kept = Vec::new();
            for (j, &t) in row.iter().enumerate() {
                if t > row[best] {
                    best = j;
                }
                if t >= threshold {
                    kept.push(j);
                }
            }
            if row.len() > 0 && row[best] < threshold {
                kept.push(best);
            }
            kept
        })
        .collect();
    let (n, m) = values.dim();
    Ok(coupling.with_support(Support::from_rows(n, m, rows)))
}
