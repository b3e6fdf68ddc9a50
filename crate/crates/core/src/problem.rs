//! Domain types shared by the solver, the adjoint machinery and the query loop.
//!
//! Every type validates its invariants on construction and is immutable
//! afterwards, so validated values can be shared freely between threads.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

/// Relative tolerance on `|sum(mu) - sum(nu)|`.
pub const MASS_BALANCE_RTOL: f64 = 1e-12;

/// Source and target weights of a balanced transport problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginals {
    mu: Array1<f64>,
    nu: Array1<f64>,
}

impl Marginals {
    pub fn new(mu: Vec<f64>, nu: Vec<f64>) -> Result<Self> {
        check_weights("mu", &mu)?;
        check_weights("nu", &nu)?;
        let (sm, sn): (f64, f64) = (mu.iter().sum(), nu.iter().sum());
        if (sm - sn).abs() > MASS_BALANCE_RTOL * sm.max(sn) {
            return Err(Error::MassImbalance {
                source_mass: sm,
                target_mass: sn,
            });
        }
        Ok(Self {
            mu: Array1::from(mu),
            nu: Array1::from(nu),
        })
    }

    /// `1/n` on every source and `1/m` on every target.
    pub fn uniform(n: usize, m: usize) -> Self {
        assert!(n > 0 && m > 0, "uniform marginals need non-empty sides");
        Self {
            mu: Array1::from_elem(n, 1.0 / n as f64),
            nu: Array1::from_elem(m, 1.0 / m as f64),
        }
    }

    pub fn mu(&self) -> ArrayView1<'_, f64> {
        self.mu.view()
    }

    pub fn nu(&self) -> ArrayView1<'_, f64> {
        self.nu.view()
    }

    pub fn n(&self) -> usize {
        self.mu.len()
    }

    pub fn m(&self) -> usize {
        self.nu.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.mu.sum()
    }
}

fn check_weights(what: &'static str, w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(Error::Empty(what));
    }
    for (index, &value) in w.iter().enumerate() {
        if !(value.is_finite() && value > 0.0) {
            return Err(Error::NonPositiveWeight { what, index, value });
        }
    }
    Ok(())
}

/// Dense non-negative finite cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    values: Array2<f64>,
}

impl CostMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        for ((row, col), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "cost",
                    row,
                    col,
                });
            }
            if v < 0.0 {
                return Err(Error::NegativeCost { row, col, value: v });
            }
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Rescales so the largest entry is 1. An all-zero matrix is returned as is.
    pub fn normalized(&self) -> Self {
        let mx = self.max();
        if mx > 0.0 {
            Self {
                values: &self.values / mx,
            }
        } else {
            self.clone()
        }
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }
}

/// Binary supervision matrix `H`, stored as the labelled `(source, target)`
/// pairs. Each source carries at most one label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupervisionSet {
    n: usize,
    m: usize,
    pairs: BTreeMap<usize, usize>,
}

impl SupervisionSet {
    pub fn empty(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            pairs: BTreeMap::new(),
        }
    }

    pub fn from_pairs(n: usize, m: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = Self::empty(n, m);
        for (i, j) in pairs {
            set.insert(i, j)?;
        }
        Ok(set)
    }

    /// Adds `H[i, j] = 1`. A source may be labelled only once.
    pub fn insert(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.n || j >= self.m {
            return Err(Error::IndexOutOfRange {
                row: i,
                col: j,
                n: self.n,
                m: self.m,
            });
        }
        if self.pairs.contains_key(&i) {
            return Err(Error::DuplicateSource { source_index: i });
        }
        self.pairs.insert(i, j);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn target_of(&self, i: usize) -> Option<usize> {
        self.pairs.get(&i).copied()
    }

    pub fn is_labeled(&self, i: usize) -> bool {
        self.pairs.contains_key(&i)
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.target_of(i) == Some(j)
    }

    /// Pairs in increasing source order.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs.iter().map(|(&i, &j)| (i, j))
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        self.pairs.keys().copied()
    }

    pub fn is_superset_of(&self, other: &Self) -> bool {
        other.pairs().all(|(i, j)| self.contains(i, j))
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut h = Array2::zeros((self.n, self.m));
        for (i, j) in self.pairs() {
            h[[i, j]] = 1.0;
        }
        h
    }
}

/// Entries of a coupling that downstream sparse kernels visit.
#[derive(Debug, Clone, PartialEq)]
pub struct Support {
    n: usize,
    m: usize,
    rows: Option<(Vec<usize>, Vec<usize>)>,
}

impl Support {
    /// Every entry of an `n x m` plan.
    pub fn full(n: usize, m: usize) -> Self {
        Self { n, m, rows: None }
    }

    /// Builds from per-row column lists; columns are sorted and deduplicated.
    pub fn from_rows(n: usize, m: usize, rows: Vec<Vec<usize>>) -> Self {
        assert_eq!(rows.len(), n, "one column list per row");
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        row_ptr.push(0);
        for mut r in rows {
            r.sort_unstable();
            r.dedup();
            assert!(r.last().map_or(true, |&j| j < m), "support column out of range");
            cols.extend(r);
            row_ptr.push(cols.len());
        }
        Self {
            n,
            m,
            rows: Some((row_ptr, cols)),
        }
    }

    pub fn is_full(&self) -> bool {
        self.rows.is_none()
    }

    pub fn len(&self) -> usize {
        match &self.rows {
            None => self.n * self.m,
            Some((_, cols)) => cols.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Retained columns of row `i`, ascending.
    pub fn row(&self, i: usize) -> SupportRow<'_> {
        match &self.rows {
            None => SupportRow::Dense(0..self.m),
            Some((ptr, cols)) => SupportRow::Sparse(cols[ptr[i]..ptr[i + 1]].iter()),
        }
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        match &self.rows {
            None => i < self.n && j < self.m,
            Some((ptr, cols)) => i < self.n && cols[ptr[i]..ptr[i + 1]].binary_search(&j).is_ok(),
        }
    }

    /// All retained `(i, j)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.row(i).map(move |j| (i, j)))
    }
}

pub enum SupportRow<'a> {
    Dense(std::ops::Range<usize>),
    Sparse(std::slice::Iter<'a, usize>),
}

impl Iterator for SupportRow<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        match self {
            SupportRow::Dense(r) => r.next(),
            SupportRow::Sparse(it) => it.next().copied(),
        }
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        match self {
            SupportRow::Dense(r) => r.size_hint(),
            SupportRow::Sparse(it) => it.size_hint(),
        }
    }
}

/// A transport plan with its retained support and marginal residual.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    values: Array2<f64>,
    support: Support,
    marginal_violation: f64,
}

impl Coupling {
    /// Wraps a dense non-negative plan with full support, measuring its
    /// marginal violation against `marginals`.
    pub fn new(values: Array2<f64>, marginals: &Marginals) -> Result<Self> {
        let (n, m) = values.dim();
        if n != marginals.n() || m != marginals.m() {
            return Err(Error::DimensionMismatch {
                what: "coupling",
                expected: format!("{}x{}", marginals.n(), marginals.m()),
                got: format!("{n}x{m}"),
            });
        }
        for ((row, col), &v) in values.indexed_iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "coupling",
                    row,
                    col,
                });
            }
            if v < 0.0 {
                return Err(Error::Numerical(format!("negative coupling entry at ({row}, {col})")));
            }
        }
        let marginal_violation = marginal_violation(values.view(), marginals);
        Ok(Self {
            values,
            support: Support::full(n, m),
            marginal_violation,
        })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[[i, j]]
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    pub fn support(&self) -> &Support {
        &self.support
    }

    /// `max(||T1 - mu||_1, ||T^T 1 - nu||_1)` at construction time.
    pub fn marginal_violation(&self) -> f64 {
        self.marginal_violation
    }

    pub fn with_support(mut self, support: Support) -> Self {
        assert_eq!((support.n, support.m), self.values.dim(), "support shape");
        self.support = support;
        self
    }

    pub fn row_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(1))
    }

    pub fn col_sums(&self) -> Array1<f64> {
        self.values.sum_axis(Axis(0))
    }

    /// Fraction of total mass carried by the support.
    pub fn retained_mass_fraction(&self) -> f64 {
        let total = self.values.sum();
        if total == 0.0 {
            return 1.0;
        }
        let kept: f64 = self.support.entries().map(|(i, j)| self.values[[i, j]]).sum();
        kept / total
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }
}

pub(crate) fn marginal_violation(t: ArrayView2<'_, f64>, marginals: &Marginals) -> f64 {
    let rows = t.sum_axis(Axis(1));
    let cols = t.sum_axis(Axis(0));
    let r: f64 = rows.iter().zip(marginals.mu()).map(|(a, b)| (a - b).abs()).sum();
    let c: f64 = cols.iter().zip(marginals.nu()).map(|(a, b)| (a - b).abs()).sum();
    r.max(c)
}

/// Unchecked description of an alignment instance; see [`validate_problem`].
#[derive(Debug, Clone)]
pub struct ProblemParts {
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub cost: Array2<f64>,
    pub supervision: SupervisionSet,
    /// Penalizing factor applied to supervised cost entries.
    pub beta: f64,
    /// Entropic regularization weight.
    pub epsilon: f64,
}

impl ProblemParts {
    /// Uniform marginals, no supervision.
    pub fn uniform(cost: Array2<f64>, beta: f64, epsilon: f64) -> Self {
        let (n, m) = cost.dim();
        Self {
            mu: vec![1.0 / n as f64; n],
            nu: vec![1.0 / m as f64; m],
            cost,
            supervision: SupervisionSet::empty(n, m),
            beta,
            epsilon,
        }
    }
}

/// A validated OT alignment instance.
#[derive(Debug, Clone)]
pub struct AlignmentProblem {
    marginals: Marginals,
    cost: Arc<CostMatrix>,
    supervision: SupervisionSet,
    beta: f64,
    epsilon: f64,
}

/// Checks every invariant of an alignment instance and returns the validated
/// problem, or the first violated invariant.
pub fn validate_problem(parts: ProblemParts) -> Result<AlignmentProblem> {
    let (n, m) = parts.cost.dim();
    if parts.mu.len() != n || parts.nu.len() != m {
        return Err(Error::DimensionMismatch {
            what: "marginals vs cost",
            expected: format!("{n}x{m}"),
            got: format!("{}x{}", parts.mu.len(), parts.nu.len()),
        });
    }
    let marginals = Marginals::new(parts.mu, parts.nu)?;
    let cost = CostMatrix::new(parts.cost)?;
    AlignmentProblem::from_parts(marginals, Arc::new(cost), parts.supervision, parts.beta, parts.epsilon)
}

impl AlignmentProblem {
    pub fn from_parts(
        marginals: Marginals,
        cost: Arc<CostMatrix>,
        supervision: SupervisionSet,
        beta: f64,
        epsilon: f64,
    ) -> Result<Self> {
        let (n, m) = cost.shape();
        if marginals.n() != n || marginals.m() != m {
            return Err(Error::DimensionMismatch {
                what: "marginals vs cost",
                expected: format!("{n}x{m}"),
                got: format!("{}x{}", marginals.n(), marginals.m()),
            });
        }
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
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(Error::OutOfRange {
                name: "epsilon",
                value: epsilon,
                range: "(0, inf)",
            });
        }
        Ok(Self {
            marginals,
            cost,
            supervision,
            beta,
            epsilon,
        })
    }

    pub fn n(&self) -> usize {
        self.marginals.n()
    }

    pub fn m(&self) -> usize {
        self.marginals.m()
    }

    pub fn marginals(&self) -> &Marginals {
        &self.marginals
    }

    pub fn cost(&self) -> &CostMatrix {
        &self.cost
    }

    pub fn shared_cost(&self) -> Arc<CostMatrix> {
        Arc::clone(&self.cost)
    }

    pub fn supervision(&self) -> &SupervisionSet {
        &self.supervision
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Same instance with a different supervision set. The cost is shared.
    pub fn with_supervision(&self, supervision: SupervisionSet) -> Result<Self> {
        Self::from_parts(
            self.marginals.clone(),
            self.shared_cost(),
            supervision,
            self.beta,
            self.epsilon,
        )
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::from_parts(
            self.marginals.clone(),
            self.shared_cost(),
            self.supervision.clone(),
            self.beta,
            epsilon,
        )
    }

    pub fn with_cost(&self, cost: CostMatrix) -> Result<Self> {
        Self::from_parts(
            self.marginals.clone(),
            Arc::new(cost),
            self.supervision.clone(),
            self.beta,
            self.epsilon,
        )
    }
}

/// The two graphs of a network alignment instance.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPair {
    adjacency_1: SparseMatrix,
    adjacency_2: SparseMatrix,
}

impl GraphPair {
    pub fn new(adjacency_1: SparseMatrix, adjacency_2: SparseMatrix) -> Result<Self> {
        check_adjacency(&adjacency_1)?;
        check_adjacency(&adjacency_2)?;
        Ok(Self {
            adjacency_1,
            adjacency_2,
        })
    }

    pub fn source(&self) -> &SparseMatrix {
        &self.adjacency_1
    }

    pub fn target(&self) -> &SparseMatrix {
        &self.adjacency_2
    }

    /// Laplacians `(M1, M2)` of the source and target graphs.
    pub fn laplacians(&self) -> Result<(SparseMatrix, SparseMatrix)> {
        Ok((laplacian(&self.adjacency_1)?, laplacian(&self.adjacency_2)?))
    }
}

fn check_adjacency(a: &SparseMatrix) -> Result<()> {
    if let Some((row, col)) = a.asymmetry() {
        return Err(Error::Asymmetric { row, col });
    }
    for (i, j, v) in a.triplets() {
        if i == j && v != 0.0 {
            return Err(Error::SelfLoop(i));
        }
        if v < 0.0 {
            return Err(Error::NegativeWeight { row: i, col: j });
        }
    }
    Ok(())
}

/// Graph Laplacian `D - A` of a symmetric non-negative adjacency.
pub fn laplacian(adjacency: &SparseMatrix) -> Result<SparseMatrix> {
    if let Some((row, col)) = adjacency.asymmetry() {
        return Err(Error::Asymmetric { row, col });
    }
    let n = adjacency.nrows();
    let mut triplets = Vec::with_capacity(adjacency.nnz() + n);
    for i in 0..n {
        let mut degree = 0.0;
        for (j, w) in adjacency.row(i) {
            if w < 0.0 {
                return Err(Error::NegativeWeight { row: i, col: j });
            }
            if j != i {
                degree += w;
                triplets.push((i, j, -w));
            }
        }
        if degree != 0.0 {
            triplets.push((i, i, degree));
        }
    }
    SparseMatrix::from_triplets(n, n, triplets)
}
