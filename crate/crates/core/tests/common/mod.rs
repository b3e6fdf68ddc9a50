#![allow(dead_code)]

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;
use otactive::adjoint::AdjointSystem;
use otactive::sinkhorn::{self, SinkhornConfig};
use otactive::utility::{self, UtilitySpec};
use otactive::{validate_problem, AlignmentProblem, GraphPair, ProblemParts, SparseMatrix, SupervisionSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tight() -> SinkhornConfig {
    SinkhornConfig {
        tolerance: 1e-12,
        max_iterations: 200_000,
        log_domain: true,
        trace_objective: false,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_cost(n: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    Array2::from_shape_simple_fn((n, m), || r.gen::<f64>())
}

/// Random positive marginals with equal mass.
pub fn random_marginals(n: usize, m: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut r = rng(seed ^ 0xabc);
    let mut mu: Vec<f64> = (0..n).map(|_| 0.5 + r.gen::<f64>()).collect();
    let mut nu: Vec<f64> = (0..m).map(|_| 0.5 + r.gen::<f64>()).collect();
    let (sm, sn) = (mu.iter().sum::<f64>(), nu.iter().sum::<f64>());
    mu.iter_mut().for_each(|v| *v /= sm);
    nu.iter_mut().for_each(|v| *v /= sn);
    (mu, nu)
}

pub fn random_graph(n: usize, p: f64, r: &mut ChaCha8Rng) -> SparseMatrix {
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if r.gen::<f64>() < p {
                edges.push((u, v, 1.0));
            }
        }
    }
    SparseMatrix::from_undirected_edges(n, edges).unwrap()
}

/// Uniform marginals, random cost, source 0 supervised.
pub fn random_problem(n: usize, m: usize, eps: f64, beta: f64, seed: u64) -> (AlignmentProblem, GraphPair) {
    let mut r = rng(seed.wrapping_add(77));
    let sup = SupervisionSet::from_pairs(n, m, [(0, r.gen_range(0..m))]).unwrap();
    let graphs = GraphPair::new(random_graph(n, 0.4, &mut r), random_graph(m, 0.4, &mut r)).unwrap();
    let p = validate_problem(ProblemParts {
        supervision: sup,
        ..ProblemParts::uniform(random_cost(n, m, seed), beta, eps)
    })
    .unwrap();
    (p, graphs)
}

pub fn all_utilities(graphs: &GraphPair) -> Vec<UtilitySpec> {
    let (m1, m2) = graphs.laplacians().unwrap();
    vec![
        UtilitySpec::squared_l2(),
        UtilitySpec::entropy(),
        UtilitySpec::consistency(m1, m2).unwrap(),
    ]
}

/// `f(T(cost))` through a fresh tight solve.
pub fn f_of_cost(p: &AlignmentProblem, cost: &Array2<f64>, u: &UtilitySpec) -> f64 {
    let (t, r) = sinkhorn::solve_with_cost(p.marginals(), cost.view(), p.epsilon(), &tight()).unwrap();
    assert!(r.converged);
    utility::value(u, t.values()).unwrap()
}

pub fn supervised_cost(p: &AlignmentProblem) -> Array2<f64> {
    let mut c = p.cost().values().to_owned();
    for (i, j) in p.supervision().pairs() {
        c[[i, j]] *= 1.0 - p.beta();
    }
    c
}

/// Central differences of `f` over every cost entry.
pub fn fd_cost_gradient(p: &AlignmentProblem, u: &UtilitySpec, h: f64) -> Array2<f64> {
    let base = supervised_cost(p);
    Array2::from_shape_fn(base.dim(), |(i, j)| {
        let mut c = base.clone();
        c[[i, j]] += h;
        let up = f_of_cost(p, &c, u);
        c[[i, j]] -= 2.0 * h;
        let down = f_of_cost(p, &c, u);
        (up - down) / (2.0 * h)
    })
}

/// Forward differences of `f` in each supervision entry `H_ij`.
pub fn fd_supervision(p: &AlignmentProblem, u: &UtilitySpec, h: f64) -> Array2<f64> {
    let base = supervised_cost(p);
    let f0 = f_of_cost(p, &base, u);
    Array2::from_shape_fn(base.dim(), |(i, j)| {
        let mut c = base.clone();
        // C~_ij = (1 - beta H_ij) C_ij, so raising H_ij by h lowers it by beta h C_ij.
        c[[i, j]] -= p.beta() * h * p.cost().get(i, j);
        (f_of_cost(p, &c, u) - f0) / h
    })
}

pub fn inf_norm<'a>(a: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// `||a - b||_inf / ||b||_inf`.
pub fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let d = a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let s = inf_norm(b);
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

pub fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

/// Spectral data of a dense symmetric system for pseudoinverse and seminorm
/// computations.
pub struct Spectrum {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
    /// Eigenvalues below this are treated as zero.
    pub cutoff: f64,
}

impl Spectrum {
    pub fn of(system: &AdjointSystem) -> Self {
        let a = to_na(&system.to_dense());
        let eig = SymmetricEigen::new(a);
        let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
            cutoff: 1e-10 * max,
        }
    }

    pub fn nonzero(&self) -> Vec<f64> {
        self.values.iter().copied().filter(|&v| v > self.cutoff).collect()
    }

    pub fn zero_count(&self) -> usize {
        self.values.iter().filter(|v| v.abs() <= self.cutoff).count()
    }

    pub fn pinv_apply(&self, b: &[f64]) -> Vec<f64> {
        let b = DVector::from_column_slice(b);
        let mut y = DVector::zeros(b.len());
        for (k, &l) in self.values.iter().enumerate() {
            if l > self.cutoff {
                let v = self.vectors.column(k);
                y += v * (v.dot(&b) / l);
            }
        }
        y.iter().copied().collect()
    }

    /// `sqrt(e^T A e)` restricted to the nonzero eigenspace.
    pub fn seminorm(&self, e: &[f64]) -> f64 {
        let e = DVector::from_column_slice(e);
        let mut s = 0.0;
        for (k, &l) in self.values.iter().enumerate() {
            if l > self.cutoff {
                s += l * self.vectors.column(k).dot(&e).powi(2);
            }
        }
        s.sqrt()
    }

    /// `(sqrt(kappa) - 1) / (sqrt(kappa) + 1)` over the nonzero eigenvalues.
    pub fn rho(&self) -> f64 {
        let nz = self.nonzero();
        let hi = nz.iter().fold(0.0f64, |m, &v| m.max(v));
        let lo = nz.iter().fold(f64::INFINITY, |m, &v| m.min(v));
        let k = (hi / lo).sqrt();
        (k - 1.0) / (k + 1.0)
    }
}

/// The adjoint matrix built entry by entry from `T`, `mu` and `nu`.
pub fn dense_reference_matrix(t: &Array2<f64>, mu: &[f64], nu: &[f64]) -> Array2<f64> {
    let (n, m) = t.dim();
    let mut a = Array2::zeros((n + m, n + m));
    for i in 0..n {
        a[[i, i]] = mu[i];
    }
    for j in 0..m {
        a[[n + j, n + j]] = nu[j];
    }
    for i in 0..n {
        for j in 0..m {
            a[[i, n + j]] = t[[i, j]];
            a[[n + j, i]] = t[[i, j]];
        }
    }
    a
}

/// `[(T . G) 1; (T . G)^T 1]` by double loop.
pub fn dense_reference_rhs(t: &Array2<f64>, g: &Array2<f64>) -> Vec<f64> {
    let (n, m) = t.dim();
    let mut b = vec![0.0; n + m];
    for i in 0..n {
        for j in 0..m {
            b[i] += t[[i, j]] * g[[i, j]];
            b[n + j] += t[[i, j]] * g[[i, j]];
        }
    }
    b
}
