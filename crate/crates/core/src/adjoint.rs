//! Differentiation of a plan utility through the entropic OT solution.
//!
//! Perturbing the cost by `dC` moves the potentials by `(da, db)` solving
//!
//! ```text
//! [ diag(T1)  T          ] [da]   [ (T . dC) 1   ]
//! [ T^T       diag(T^T1) ] [db] = [ (T . dC)^T 1 ]
//! ```
//!
//! so `grad_C f = (1/eps) T . (y_a 1^T + 1 y_b^T - grad_T f)` where `y` solves
//! the same system with right-hand side `[(T . grad_T f) 1; (T . grad_T f)^T 1]`.
//! The matrix is positive semidefinite with `[1; -1]` in its null space and the
//! right-hand side is orthogonal to it, so conjugate gradient started at zero
//! converges to the minimum-norm solution.
//!
//! The operator is never materialized. Its diagonal blocks are the row and
//! column masses of the retained support, which keeps `[1; -1]` an exact null
//! vector after sparsification; on a full support they equal `mu` and `nu` up
//! to the Sinkhorn tolerance.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::problem::{AlignmentProblem, Coupling, Marginals};
use crate::utility::{self, UtilitySpec};

#[derive(Debug, Clone)]
enum Operator {
    Sparse {
        row_ptr: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    },
    Dense(Array2<f64>),
}

/// Implicit adjoint system `A y = b`.
#[derive(Debug, Clone)]
pub struct AdjointSystem {
    n: usize,
    m: usize,
    op: Operator,
    row_mass: Vec<f64>,
    col_mass: Vec<f64>,
    rhs: Vec<f64>,
}

/// Builds the system from a dense gradient, reading it only on the support.
pub fn assemble(coupling: &Coupling, marginals: &Marginals, grad_f: ArrayView2<'_, f64>) -> Result<AdjointSystem> {
    if grad_f.dim() != (coupling.n(), coupling.m()) {
        return Err(Error::DimensionMismatch {
            what: "utility gradient",
            expected: format!("{}x{}", coupling.n(), coupling.m()),
            got: format!("{}x{}", grad_f.nrows(), grad_f.ncols()),
        });
    }
    let g: Vec<f64> = coupling.support().entries().map(|(i, j)| grad_f[[i, j]]).collect();
    assemble_on_support(coupling, marginals, &g)
}

/// Builds the system from gradient values listed in `support().entries()` order.
pub fn assemble_on_support(coupling: &Coupling, marginals: &Marginals, grad_support: &[f64]) -> Result<AdjointSystem> {
    let (n, m) = (coupling.n(), coupling.m());
    if marginals.n() != n || marginals.m() != m {
        return Err(Error::DimensionMismatch {
            what: "marginals vs coupling",
            expected: format!("{n}x{m}"),
            got: format!("{}x{}", marginals.n(), marginals.m()),
        });
    }
    let support = coupling.support();
    if grad_support.len() != support.len() {
        return Err(Error::DimensionMismatch {
            what: "gradient on support",
            expected: support.len().to_string(),
            got: grad_support.len().to_string(),
        });
    }
    let t = coupling.values();
    let mut row_mass = vec![0.0; n];
    let mut col_mass = vec![0.0; m];
    let mut rhs = vec![0.0; n + m];
    let mut g = grad_support.iter();

    let op = if support.is_full() {
        for ((i, j), &v) in t.indexed_iter() {
            let tg = v * g.next().expect("gradient length checked");
            row_mass[i] += v;
            col_mass[j] += v;
            rhs[i] += tg;
            rhs[n + j] += tg;
        }
        Operator::Dense(t.to_owned())
    } else {
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::with_capacity(support.len());
        let mut vals = Vec::with_capacity(support.len());
        row_ptr.push(0);
        for i in 0..n {
            for j in support.row(i) {
                let v = t[[i, j]];
                let tg = v * g.next().expect("gradient length checked");
                row_mass[i] += v;
                col_mass[j] += v;
                rhs[i] += tg;
                rhs[n + j] += tg;
                cols.push(j);
                vals.push(v);
            }
            row_ptr.push(cols.len());
        }
        Operator::Sparse { row_ptr, cols, vals }
    };
    Ok(AdjointSystem {
        n,
        m,
        op,
        row_mass,
        col_mass,
        rhs,
    })
}

impl AdjointSystem {
    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    /// Number of plan entries the operator visits per product.
    pub fn operator_nnz(&self) -> usize {
        match &self.op {
            Operator::Sparse { vals, .. } => vals.len(),
            Operator::Dense(t) => t.len(),
        }
    }

    pub fn row_mass(&self) -> &[f64] {
        &self.row_mass
    }

    pub fn col_mass(&self) -> &[f64] {
        &self.col_mass
    }

    /// `out = A v`.
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n;
        assert_eq!(v.len(), self.dim());
        assert_eq!(out.len(), self.dim());
        let (va, vb) = v.split_at(n);
        let (oa, ob) = out.split_at_mut(n);
        for ((o, &d), &x) in oa.iter_mut().zip(&self.row_mass).zip(va) {
            *o = d * x;
        }
        for ((o, &d), &x) in ob.iter_mut().zip(&self.col_mass).zip(vb) {
            *o = d * x;
        }
        match &self.op {
            Operator::Sparse { row_ptr, cols, vals } => {
                for i in 0..n {
                    let (mut acc, xa) = (0.0, va[i]);
                    for k in row_ptr[i]..row_ptr[i + 1] {
                        let (j, t) = (cols[k], vals[k]);
                        acc += t * vb[j];
                        ob[j] += t * xa;
                    }
                    oa[i] += acc;
                }
            }
            Operator::Dense(t) => {
                for (i, row) in t.outer_iter().enumerate() {
                    let xa = va[i];
                    let row = row.as_slice().expect("standard layout");
                    let mut acc = 0.0;
                    for ((o, &t), &y) in ob.iter_mut().zip(row).zip(vb) {
                        acc += t * y;
                        *o += t * xa;
                    }
                    oa[i] += acc;
                }
            }
        }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.apply(v, &mut out);
        out
    }

    /// `[1_n; -1_m]`, the null vector of the operator.
    pub fn null_vector(&self) -> Vec<f64> {
        let mut z = vec![1.0; self.n];
        z.extend(std::iter::repeat(-1.0).take(self.m));
        z
    }

    /// `max |A [1; -1]|`.
    pub fn null_space_residual(&self) -> f64 {
        self.matvec(&self.null_vector()).iter().fold(0.0, |a, v| a.max(v.abs()))
    }

    /// `|<b, [1; -1]>|`.
    pub fn range_residual(&self) -> f64 {
        dot(&self.rhs, &self.null_vector()).abs()
    }

    /// `v^T A v`, equal to `sum_ij T_ij (v_a[i] + v_b[j])^2` on the support.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        dot(v, &self.matvec(v))
    }

    /// Dense copy of the operator, for diagnostics on small instances.
    pub fn to_dense(&self) -> Array2<f64> {
        let d = self.dim();
        let mut a = Array2::zeros((d, d));
        let mut e = vec![0.0; d];
        for k in 0..d {
            e[k] = 1.0;
            for (r, v) in self.matvec(&e).into_iter().enumerate() {
                a[[r, k]] = v;
            }
            e[k] = 0.0;
        }
        a
    }
}

#[derive(Debug, Clone)]
pub struct AdjointSolution {
    pub y_alpha: Array1<f64>,
    pub y_beta: Array1<f64>,
    pub iterations: usize,
    /// `||A y - b|| / ||b||`, recomputed from the returned iterate.
    pub final_relative_residual: f64,
    pub converged: bool,
}

impl AdjointSolution {
    fn zeros(n: usize, m: usize) -> Self {
        Self {
            y_alpha: Array1::zeros(n),
            y_beta: Array1::zeros(m),
            iterations: 0,
            final_relative_residual: 0.0,
            converged: true,
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.y_alpha.iter().chain(self.y_beta.iter()).copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CgConfig {
    /// Relative residual target.
    pub tolerance: f64,
    /// `None` means `10 * (n + m)`.
    pub max_iterations: Option<usize>,
}

impl Default for CgConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: None,
        }
    }
}

pub fn cg_solve(system: &AdjointSystem, tolerance: f64, max_iterations: usize) -> AdjointSolution {
    cg_solve_observed(system, tolerance, max_iterations, |_, _| {})
}

/// Conjugate gradient from `y = 0`. `observe(k, y_k)` sees every iterate,
/// including `y_0`.
pub fn cg_solve_observed(
    system: &AdjointSystem,
    tolerance: f64,
    max_iterations: usize,
    mut observe: impl FnMut(usize, &[f64]),
) -> AdjointSolution {
    let (n, m, d) = (system.n, system.m, system.dim());
    let b = &system.rhs;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        observe(0, &vec![0.0; d]);
        return AdjointSolution::zeros(n, m);
    }

    let mut x = vec![0.0; d];
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; d];
    let mut rs = dot(&r, &r);
    let mut k = 0;
    observe(0, &x);

    let mut restarts = 0;
    loop {
        while k < max_iterations && rs.sqrt() > tolerance * b_norm {
            system.apply(&p, &mut ap);
            let pap = dot(&p, &ap);
            if !(pap > 0.0) {
                break;
            }
            let step = rs / pap;
            axpy(step, &p, &mut x);
            axpy(-step, &ap, &mut r);
            let rs_next = dot(&r, &r);
            k += 1;
            observe(k, &x);
            let momentum = rs_next / rs;
            rs = rs_next;
            for (pi, ri) in p.iter_mut().zip(&r) {
                *pi = ri + momentum * *pi;
            }
        }
        // Recursive residuals drift from true ones; restart from the true
        // residual when they disagree.
        system.apply(&x, &mut ap);
        let true_r: Vec<f64> = b.iter().zip(&ap).map(|(b, a)| b - a).collect();
        let true_rs = dot(&true_r, &true_r);
        if true_rs.sqrt() <= tolerance * b_norm || k >= max_iterations || restarts >= 3 {
            break;
        }
        restarts += 1;
        r = true_r;
        p = r.clone();
        rs = true_rs;
    }

    // Remove round-off drift along the null vector.
    let z = system.null_vector();
    let shift = dot(&x, &z) / d as f64;
    axpy(-shift, &z, &mut x);

    system.apply(&x, &mut ap);
    let res = b.iter().zip(&ap).map(|(b, a)| (b - a) * (b - a)).sum::<f64>().sqrt() / b_norm;
    AdjointSolution {
        y_alpha: Array1::from(x[..n].to_vec()),
        y_beta: Array1::from(x[n..].to_vec()),
        iterations: k,
        final_relative_residual: res,
        converged: res <= tolerance,
    }
}

/// Cost gradient `(1/eps) T . (y_a 1^T + 1 y_b^T - grad_T f)` on the support,
/// zero elsewhere.
pub fn grad_cost(
    coupling: &Coupling,
    solution: &AdjointSolution,
    grad_f: ArrayView2<'_, f64>,
    epsilon: f64,
) -> Result<Array2<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: "(0, inf)",
        });
    }
    let t = coupling.values();
    let mut out = Array2::zeros(t.dim());
    for (i, j) in coupling.support().entries() {
        out[[i, j]] = t[[i, j]] * (solution.y_alpha[i] + solution.y_beta[j] - grad_f[[i, j]]) / epsilon;
    }
    Ok(out)
}

/// Impact of labelling the pair `(i, j)`:
/// `-(beta/eps) C_ij T_ij (y_a[i] + y_b[j] - grad_T f_ij)`.
pub fn pairwise_impact(
    i: usize,
    j: usize,
    problem: &AlignmentProblem,
    coupling: &Coupling,
    solution: &AdjointSolution,
    grad_ij: f64,
) -> f64 {
    let c = problem.cost().get(i, j);
    let t = coupling.get(i, j);
    -(problem.beta() / problem.epsilon()) * c * t * (solution.y_alpha[i] + solution.y_beta[j] - grad_ij)
}

/// `sum_j T_ij I(p_ij)` over the supplied `(j, impact)` pairs of row `i`.
pub fn posterior_impact(i: usize, coupling: &Coupling, row_impacts: impl IntoIterator<Item = (usize, f64)>) -> f64 {
    row_impacts.into_iter().map(|(j, imp)| coupling.get(i, j) * imp).sum()
}

/// How pairwise impacts are folded into a per-source score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Weighted by the plan row.
    #[default]
    Posterior,
    /// Plain sum over the row.
    Uniform,
}

/// Per-source impacts for a whole plan plus the solve diagnostics.
#[derive(Debug, Clone)]
pub struct ImpactScores {
    pub scores: Vec<f64>,
    pub solution: AdjointSolution,
    pub null_space_residual: f64,
    pub range_residual: f64,
}

/// Runs gradient, assembly, CG and aggregation over the coupling's support.
/// A full support gives the dense path.
pub fn source_impacts(
    problem: &AlignmentProblem,
    coupling: &Coupling,
    utility: &UtilitySpec,
    cg: &CgConfig,
    aggregation: Aggregation,
) -> Result<ImpactScores> {
    let grad = utility::gradient_on_support(utility, coupling)?;
    let system = assemble_on_support(coupling, problem.marginals(), &grad)?;
    let max_it = cg.max_iterations.unwrap_or(10 * system.dim());
    let solution = cg_solve(&system, cg.tolerance, max_it);

    let t = coupling.values();
    let cost = problem.cost().values();
    let scale = -problem.beta() / problem.epsilon();
    let mut scores = vec![0.0; coupling.n()];
    let mut g = grad.iter();
    for (i, score) in scores.iter_mut().enumerate() {
        let ya = solution.y_alpha[i];
        let mut acc = 0.0;
        for j in coupling.support().row(i) {
            let tij = t[[i, j]];
            let impact = scale * cost[[i, j]] * tij * (ya + solution.y_beta[j] - g.next().expect("support length"));
            acc += match aggregation {
                Aggregation::Posterior => tij * impact,
                Aggregation::Uniform => impact,
            };
        }
        *score = acc;
    }
    Ok(ImpactScores {
        scores,
        null_space_residual: system.null_space_residual(),
        range_residual: system.range_residual(),
        solution,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
