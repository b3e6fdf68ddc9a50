//! Dataset files, feature-distance costs and synthetic graph pairs.
//!
//! Text formats:
//!
//! * edge list: one `u v` or `u v w` per line, whitespace separated;
//! * dense matrix (features or cost): a header line `rows cols`, then one
//!   comma-separated row per line, numbers in shortest round-trip decimal;
//! * ground truth: one `i j` pair per line.
//!
//! Blank lines and lines starting with `#` are ignored everywhere.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::problem::{validate_problem, AlignmentProblem, CostMatrix, GraphPair, ProblemParts, SupervisionSet};
use crate::sparse::SparseMatrix;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub n: usize,
    pub m: usize,
    pub features: Option<(Array2<f64>, Array2<f64>)>,
    pub graphs: Option<GraphPair>,
    pub cost: Option<CostMatrix>,
    pub ground_truth: SupervisionSet,
    /// Fraction of ground truth revealed as prior supervision.
    pub prior_fraction: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMetric {
    #[default]
    SquaredEuclidean,
    CosineDistance,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.features.is_none() && self.cost.is_none() {
            return Err(Error::Invalid("dataset needs features or a precomputed cost".into()));
        }
        if let Some((f1, f2)) = &self.features {
            if f1.nrows() != self.n || f2.nrows() != self.m {
                return Err(Error::DimensionMismatch {
                    what: "feature rows",
                    expected: format!("{} and {}", self.n, self.m),
                    got: format!("{} and {}", f1.nrows(), f2.nrows()),
                });
            }
        }
        if let Some(c) = &self.cost {
            if c.shape() != (self.n, self.m) {
                return Err(Error::DimensionMismatch {
                    what: "cost",
                    expected: format!("{}x{}", self.n, self.m),
                    got: format!("{:?}", c.shape()),
                });
            }
        }
        if let Some(g) = &self.graphs {
            if g.source().nrows() != self.n || g.target().nrows() != self.m {
                return Err(Error::DimensionMismatch {
                    what: "graph sizes",
                    expected: format!("{} and {}", self.n, self.m),
                    got: format!("{} and {}", g.source().nrows(), g.target().nrows()),
                });
            }
        }
        if self.ground_truth.n() != self.n || self.ground_truth.m() != self.m {
            return Err(Error::DimensionMismatch {
                what: "ground truth",
                expected: format!("{}x{}", self.n, self.m),
                got: format!("{}x{}", self.ground_truth.n(), self.ground_truth.m()),
            });
        }
        if !(0.0..1.0).contains(&self.prior_fraction) {
            return Err(Error::OutOfRange {
                name: "prior_fraction",
                value: self.prior_fraction,
                range: "[0, 1)",
            });
        }
        Ok(())
    }

    /// The precomputed cost if present, otherwise the feature distance.
    pub fn cost_matrix(&self, metric: FeatureMetric) -> Result<CostMatrix> {
        match (&self.cost, &self.features) {
            (Some(c), _) => Ok(c.clone()),
            (None, Some((f1, f2))) => cost_from_features(f1, f2, metric),
            (None, None) => Err(Error::Invalid("dataset needs features or a precomputed cost".into())),
        }
    }

    /// Uniformly samples `round(prior_fraction * |ground truth|)` pairs.
    pub fn sample_prior(&self, seed: u64) -> SupervisionSet {
        let mut pairs: Vec<(usize, usize)> = self.ground_truth.pairs().collect();
        let take = (self.prior_fraction * pairs.len() as f64).round() as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        pairs.shuffle(&mut rng);
        SupervisionSet::from_pairs(self.n, self.m, pairs.into_iter().take(take))
            .expect("ground truth pairs are valid")
    }

    /// Alignment instance with uniform marginals and seeded prior supervision.
    /// With `normalize_cost` the cost is rescaled to a maximum of 1.
    pub fn problem(
        &self,
        metric: FeatureMetric,
        normalize_cost: bool,
        beta: f64,
        epsilon: f64,
        prior_seed: u64,
    ) -> Result<AlignmentProblem> {
        self.validate()?;
        let mut cost = self.cost_matrix(metric)?;
        if normalize_cost {
            cost = cost.normalized();
        }
        validate_problem(ProblemParts {
            supervision: self.sample_prior(prior_seed),
            ..ProblemParts::uniform(cost.into_inner(), beta, epsilon)
        })
    }
}

/// Pairwise feature distances: `||x_i - y_j||^2` or `1 - cos(x_i, y_j)`.
pub fn cost_from_features(f1: &Array2<f64>, f2: &Array2<f64>, metric: FeatureMetric) -> Result<CostMatrix> {
    if f1.ncols() != f2.ncols() {
        return Err(Error::DimensionMismatch {
            what: "feature dimension",
            expected: f1.ncols().to_string(),
            got: f2.ncols().to_string(),
        });
    }
    let (n, m) = (f1.nrows(), f2.nrows());
    let mut c = Array2::zeros((n, m));
    match metric {
        FeatureMetric::SquaredEuclidean => {
            for (x, mut out) in f1.outer_iter().zip(c.outer_iter_mut()) {
                for (y, o) in f2.outer_iter().zip(out.iter_mut()) {
                    *o = x.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                }
            }
        }
        FeatureMetric::CosineDistance => {
            let norms = |f: &Array2<f64>, set: &'static str| -> Result<Vec<f64>> {
                f.outer_iter()
                    .enumerate()
                    .map(|(row, r)| {
                        let v = r.dot(&r).sqrt();
                        if v > 0.0 {
                            Ok(v)
                        } else {
                            Err(Error::ZeroNorm { set, row })
                        }
                    })
                    .collect()
            };
            let (n1, n2) = (norms(f1, "features_1")?, norms(f2, "features_2")?);
            for (i, x) in f1.outer_iter().enumerate() {
                for (j, y) in f2.outer_iter().enumerate() {
                    let cos = x.dot(&y) / (n1[i] * n2[j]);
                    c[[i, j]] = (1.0 - cos).clamp(0.0, 2.0);
                }
            }
        }
    }
    CostMatrix::new(c)
}

/// Parameters of the Erdős–Rényi benchmark pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErParams {
    pub n: usize,
    pub avg_degree: f64,
    /// Probability of dropping each edge; the same expected number of
    /// spurious edges is added.
    pub edge_noise: f64,
    /// Standard deviation of the Gaussian added to every feature entry.
    pub feature_noise: f64,
    /// Number of node label classes; features live in this dimension.
    pub feature_dim: usize,
    pub prior_fraction: f64,
    pub seed: u64,
}

impl Default for ErParams {
    fn default() -> Self {
        Self {
            n: 500,
            avg_degree: 10.0,
            edge_noise: 0.1,
            feature_noise: 0.3,
            feature_dim: 16,
            prior_fraction: 0.0,
            seed: 0,
        }
    }
}

/// Generates an ER graph, a noisy permuted copy, and features built from
/// node labels and one-hop label neighbourhoods. Ground truth is the
/// permutation.
pub fn generate_er_pair(params: &ErParams) -> Result<Dataset> {
    let ErParams {
        n,
        avg_degree,
        edge_noise,
        feature_noise,
        feature_dim,
        prior_fraction,
        seed,
    } = *params;
    if n < 2 {
        return Err(Error::Invalid(format!("ER pair needs n >= 2, got {n}")));
    }
    if !(avg_degree >= 0.0 && avg_degree < n as f64) {
        return Err(Error::OutOfRange {
            name: "avg_degree",
            value: avg_degree,
            range: "[0, n)",
        });
    }
    for (name, v) in [("edge_noise", edge_noise), ("feature_noise", feature_noise)] {
        if !(0.0..1.0).contains(&v) {
            return Err(Error::OutOfRange {
                name,
                value: v,
                range: "[0, 1)",
            });
        }
    }
    if feature_dim == 0 {
        return Err(Error::Invalid("feature_dim must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = avg_degree / (n - 1) as f64;

    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            if rng.gen::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);

    let mut present = std::collections::HashSet::new();
    let mut edges2 = Vec::new();
    for &(u, v) in &edges {
        let key = ordered(perm[u], perm[v]);
        present.insert(key);
        if rng.gen::<f64>() >= edge_noise {
            edges2.push(key);
        }
    }
    let non_edges = (n * (n - 1) / 2 - edges.len()) as u64;
    if edge_noise > 0.0 && p > 0.0 && p < 1.0 && non_edges > 0 {
        let q = (edge_noise * p / (1.0 - p)).min(1.0);
        let added = Binomial::new(non_edges, q)
            .map_err(|e| Error::Invalid(e.to_string()))?
            .sample(&mut rng) as usize;
        let mut count = 0;
        while count < added {
            let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
            if a == b {
                continue;
            }
            let key = ordered(a, b);
            if present.insert(key) {
                edges2.push(key);
                count += 1;
            }
        }
    }

    let a1 = SparseMatrix::from_undirected_edges(n, edges.iter().map(|&(u, v)| (u, v, 1.0)))?;
    let a2 = SparseMatrix::from_undirected_edges(n, edges2.iter().map(|&(u, v)| (u, v, 1.0)))?;

    let labels1: Vec<usize> = (0..n).map(|_| rng.gen_range(0..feature_dim)).collect();
    let mut labels2 = vec![0; n];
    for (u, &l) in labels1.iter().enumerate() {
        labels2[perm[u]] = l;
    }
    let mut f1 = neighbourhood_features(&a1, &labels1, feature_dim);
    let mut f2 = neighbourhood_features(&a2, &labels2, feature_dim);
    if feature_noise > 0.0 {
        for v in f1.iter_mut().chain(f2.iter_mut()) {
            *v += feature_noise * rng.sample::<f64, _>(StandardNormal);
        }
    }

    let ground_truth = SupervisionSet::from_pairs(n, n, perm.iter().enumerate().map(|(u, &v)| (u, v)))?;
    let dataset = Dataset {
        n,
        m: n,
        features: Some((f1, f2)),
        graphs: Some(GraphPair::new(a1, a2)?),
        cost: None,
        ground_truth,
        prior_fraction,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

/// `onehot(label_v) + sum_{u ~ v} onehot(label_u)`.
fn neighbourhood_features(adj: &SparseMatrix, labels: &[usize], dim: usize) -> Array2<f64> {
    let n = labels.len();
    let mut f = Array2::zeros((n, dim));
    for v in 0..n {
        f[[v, labels[v]]] += 1.0;
        for (u, w) in adj.row(v) {
            if u != v && w != 0.0 {
                f[[v, labels[u]]] += 1.0;
            }
        }
    }
    f
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::File {
        path: path.display().to_string(),
        source,
    })
}

fn meaningful_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn parse_num<T: std::str::FromStr>(path: &Path, line: usize, tok: &str) -> Result<T> {
    tok.trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("cannot parse {tok:?}")))
}

/// Reads an edge list into a symmetric adjacency. `n` defaults to the largest
/// index plus one.
pub fn load_edge_list(path: &Path, n: Option<usize>) -> Result<SparseMatrix> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (line, l) in meaningful_lines(&text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 && toks.len() != 3 {
            return Err(parse_err(path, line, "expected `u v` or `u v w`"));
        }
        let u: usize = parse_num(path, line, toks[0])?;
        let v: usize = parse_num(path, line, toks[1])?;
        let w: f64 = if toks.len() == 3 { parse_num(path, line, toks[2])? } else { 1.0 };
        if u == v {
            return Err(parse_err(path, line, "self loop"));
        }
        if !(w.is_finite() && w >= 0.0) {
            return Err(parse_err(path, line, "edge weight must be finite and non-negative"));
        }
        if let Some(n) = n {
            if u >= n || v >= n {
                return Err(parse_err(path, line, format!("node index out of range for {n} nodes")));
            }
        }
        edges.push((u, v, w));
    }
    let size = n.unwrap_or_else(|| edges.iter().map(|&(u, v, _)| u.max(v) + 1).max().unwrap_or(0));
    // Repeated edges in either orientation are collapsed to their last weight.
    let mut dedup = std::collections::BTreeMap::new();
    for (u, v, w) in edges {
        dedup.insert(ordered(u, v), w);
    }
    SparseMatrix::from_undirected_edges(size, dedup.into_iter().map(|((u, v), w)| (u, v, w)))
}

pub fn write_edge_list(path: &Path, adjacency: &SparseMatrix) -> Result<()> {
    let mut out = String::new();
    for (u, v, w) in adjacency.triplets().filter(|&(u, v, _)| v > u) {
        if w == 1.0 {
            writeln!(out, "{u} {v}").expect("string write");
        } else {
            writeln!(out, "{u} {v} {w}").expect("string write");
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = read_text(path)?;
    let mut lines = meaningful_lines(&text);
    let (hline, header) = lines.next().ok_or_else(|| parse_err(path, 1, "missing `rows cols` header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(path, hline, "header must be `rows cols`"));
    }
    let rows: usize = parse_num(path, hline, dims[0])?;
    let cols: usize = parse_num(path, hline, dims[1])?;
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (line, l) in lines {
        if seen == rows {
            return Err(parse_err(path, line, format!("more than {rows} rows")));
        }
        let before = data.len();
        for tok in l.split(',') {
            let v: f64 = parse_num(path, line, tok)?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(parse_err(path, line, format!("expected {cols} values, got {}", data.len() - before)));
        }
        seen += 1;
    }
    if seen != rows {
        return Err(parse_err(path, hline, format!("expected {rows} rows, got {seen}")));
    }
    Array2::from_shape_vec((rows, cols), data).map_err(|e| parse_err(path, hline, e.to_string()))
}

/// Writes with Rust's shortest round-trip float formatting, so loading
/// reproduces every entry exactly.
pub fn write_matrix(path: &Path, values: &Array2<f64>) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "{} {}", values.nrows(), values.ncols()).expect("string write");
    for row in values.outer_iter() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            write!(out, "{v:?}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_cost(path: &Path) -> Result<CostMatrix> {
    CostMatrix::new(load_matrix(path)?)
}

pub fn load_ground_truth(path: &Path, n: usize, m: usize) -> Result<SupervisionSet> {
    let text = read_text(path)?;
    let mut set = SupervisionSet::empty(n, m);
    for (line, l) in meaningful_lines(&text) {
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() != 2 {
            return Err(parse_err(path, line, "expected `i j`"));
        }
        let i: usize = parse_num(path, line, toks[0])?;
        let j: usize = parse_num(path, line, toks[1])?;
        set.insert(i, j).map_err(|e| parse_err(path, line, e.to_string()))?;
    }
    Ok(set)
}

pub fn write_ground_truth(path: &Path, set: &SupervisionSet) -> Result<()> {
    let mut out = String::new();
    for (i, j) in set.pairs() {
        writeln!(out, "{i} {j}").expect("string write");
    }
    fs::write(path, out)?;
    Ok(())
}

/// File locations of a dataset on disk. Either both feature files or the
/// cost file must be given.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetPaths {
    pub features_1: Option<PathBuf>,
    pub features_2: Option<PathBuf>,
    pub graph_1: Option<PathBuf>,
    pub graph_2: Option<PathBuf>,
    pub cost: Option<PathBuf>,
    pub ground_truth: PathBuf,
}

pub fn load_dataset(paths: &DatasetPaths, prior_fraction: f64) -> Result<Dataset> {
    let features = match (&paths.features_1, &paths.features_2) {
        (Some(a), Some(b)) => Some((load_matrix(a)?, load_matrix(b)?)),
        (None, None) => None,
        _ => return Err(Error::Invalid("features_1 and features_2 must be given together".into())),
    };
    let cost = paths.cost.as_deref().map(load_cost).transpose()?;
    let (n, m) = match (&cost, &features) {
        (Some(c), _) => c.shape(),
        (None, Some((a, b))) => (a.nrows(), b.nrows()),
        (None, None) => return Err(Error::Invalid("dataset needs features or a precomputed cost".into())),
    };
    let graphs = match (&paths.graph_1, &paths.graph_2) {
        (Some(a), Some(b)) => Some(GraphPair::new(load_edge_list(a, Some(n))?, load_edge_list(b, Some(m))?)?),
        (None, None) => None,
        _ => return Err(Error::Invalid("graph_1 and graph_2 must be given together".into())),
    };
    let ground_truth = load_ground_truth(&paths.ground_truth, n, m)?;
    let ds = Dataset {
        n,
        m,
        features,
        graphs,
        cost,
        ground_truth,
        prior_fraction,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes every part of `dataset` under `dir` and returns the paths.
pub fn write_dataset(dir: &Path, dataset: &Dataset) -> Result<DatasetPaths> {
    fs::create_dir_all(dir)?;
    let mut paths = DatasetPaths {
        ground_truth: dir.join("ground_truth.txt"),
        ..Default::default()
    };
    write_ground_truth(&paths.ground_truth, &dataset.ground_truth)?;
    if let Some((f1, f2)) = &dataset.features {
        let (a, b) = (dir.join("features_1.csv"), dir.join("features_2.csv"));
        write_matrix(&a, f1)?;
        write_matrix(&b, f2)?;
        paths.features_1 = Some(a);
        paths.features_2 = Some(b);
    }
    if let Some(g) = &dataset.graphs {
        let (a, b) = (dir.join("graph_1.txt"), dir.join("graph_2.txt"));
        write_edge_list(&a, g.source())?;
        write_edge_list(&b, g.target())?;
        paths.graph_1 = Some(a);
        paths.graph_2 = Some(b);
    }
    if let Some(c) = &dataset.cost {
        let p = dir.join("cost.csv");
        write_matrix(&p, &c.values().to_owned())?;
        paths.cost = Some(p);
    }
    Ok(paths)
}
