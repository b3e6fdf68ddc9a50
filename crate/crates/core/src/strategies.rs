//! Candidate scoring: the adjoint impact scorer and the baseline strategies.
//!
//! Every strategy returns "higher is better" scores so selection is a plain
//! argmax. Baselines that prefer small values (margin, least confident) are
//! negated.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::{Arc, OnceLock};

use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adjoint::{self, Aggregation, AdjointSolution, CgConfig};
use crate::error::{Error, Result};
use crate::problem::{AlignmentProblem, Coupling, GraphPair};
use crate::sparse::SparseMatrix;
use crate::utility::{UtilityKind, UtilitySpec};

/// Neighbourhood size of the density baseline.
pub const DEFAULT_DENSITY_K: usize = 20;

/// Additive floor applied before logs in the diversity KL divergence.
pub const KL_FLOOR: f64 = 1e-12;

/// Post-processing of signed impacts before the argmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImpactSign {
    #[default]
    Signed,
    Negated,
    Absolute,
}

#[derive(Debug, Clone)]
pub enum StrategySpec {
    Avatar {
        utility: UtilitySpec,
        aggregation: Aggregation,
        sign: ImpactSign,
    },
    Random {
        seed: u64,
    },
    Entropy,
    Margin,
    LeastConfident,
    Density {
        k: usize,
    },
    Diversity,
    Betweenness {
        graph: Arc<SparseMatrix>,
        cache: Arc<OnceLock<Vec<f64>>>,
    },
}

impl StrategySpec {
    pub fn avatar(utility: UtilitySpec) -> Self {
        StrategySpec::Avatar {
            utility,
            aggregation: Aggregation::Posterior,
            sign: ImpactSign::Signed,
        }
    }

    /// Builds a strategy from its [`name`](Self::name). Random strategies take
    /// `seed`; the consistency scorer and betweenness need `graphs`.
    pub fn parse(name: &str, seed: u64, graphs: Option<&GraphPair>) -> Result<Self> {
        let unknown = || Error::Invalid(format!("unknown strategy {name:?}"));
        let need_graphs = || graphs.ok_or(Error::MissingGraph("strategy needs a graph pair"));
        match name {
            "random" => return Ok(StrategySpec::Random { seed }),
            "entropy" => return Ok(StrategySpec::Entropy),
            "margin" => return Ok(StrategySpec::Margin),
            "least_confident" => return Ok(StrategySpec::LeastConfident),
            "diversity" => return Ok(StrategySpec::Diversity),
            "density" => return Ok(Self::density()),
            "betweenness" => return Ok(Self::betweenness(need_graphs()?.source().clone())),
            _ => {}
        }
        if let Some(k) = name.strip_prefix("density:") {
            let k = k.parse().map_err(|_| unknown())?;
            return Ok(StrategySpec::Density { k });
        }
        let rest = name.strip_prefix("avatar_").ok_or_else(unknown)?;
        let (rest, sign) = if let Some(r) = rest.strip_suffix("_negated") {
            (r, ImpactSign::Negated)
        } else if let Some(r) = rest.strip_suffix("_absolute") {
            (r, ImpactSign::Absolute)
        } else {
            (rest, ImpactSign::Signed)
        };
        let (rest, aggregation) = match rest.strip_suffix("_uniform") {
            Some(r) => (r, Aggregation::Uniform),
            None => (rest, Aggregation::Posterior),
        };
        let utility = match rest {
            "l2" => UtilitySpec::squared_l2(),
            "entropy" => UtilitySpec::entropy(),
            "shannon" => UtilitySpec::shannon_entropy(),
            "consist" => {
                let (m1, m2) = need_graphs()?.laplacians()?;
                UtilitySpec::consistency(m1, m2)?
            }
            _ => return Err(unknown()),
        };
        Ok(StrategySpec::Avatar {
            utility,
            aggregation,
            sign,
        })
    }

    pub fn density() -> Self {
        StrategySpec::Density { k: DEFAULT_DENSITY_K }
    }

    pub fn betweenness(graph: SparseMatrix) -> Self {
        StrategySpec::Betweenness {
            graph: Arc::new(graph),
            cache: Arc::new(OnceLock::new()),
        }
    }

    pub fn requires_graph(&self) -> bool {
        matches!(self, StrategySpec::Betweenness { .. })
    }

    pub fn name(&self) -> String {
        match self {
            StrategySpec::Avatar {
                utility,
                aggregation,
                sign,
            } => {
                let base = match utility.kind() {
                    UtilityKind::SquaredL2 => "avatar_l2",
                    UtilityKind::Entropy if utility.is_shannon() => "avatar_shannon",
                    UtilityKind::Entropy => "avatar_entropy",
                    UtilityKind::Consistency => "avatar_consist",
                };
                let agg = match aggregation {
                    Aggregation::Posterior => "",
                    Aggregation::Uniform => "_uniform",
                };
                let sign = match sign {
                    ImpactSign::Signed => "",
                    ImpactSign::Negated => "_negated",
                    ImpactSign::Absolute => "_absolute",
                };
                format!("{base}{agg}{sign}")
            }
            StrategySpec::Random { .. } => "random".into(),
            StrategySpec::Entropy => "entropy".into(),
            StrategySpec::Margin => "margin".into(),
            StrategySpec::LeastConfident => "least_confident".into(),
            StrategySpec::Density { k: DEFAULT_DENSITY_K } => "density".into(),
            StrategySpec::Density { k } => format!("density:{k}"),
            StrategySpec::Diversity => "diversity".into(),
            StrategySpec::Betweenness { .. } => "betweenness".into(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            StrategySpec::Density { k } if *k == 0 => Err(Error::OutOfRange {
                name: "density k",
                value: 0.0,
                range: "[1, inf)",
            }),
            StrategySpec::Betweenness { graph, .. } if graph.nrows() != n => Err(Error::DimensionMismatch {
                what: "betweenness graph",
                expected: n.to_string(),
                got: graph.nrows().to_string(),
            }),
            _ => Ok(()),
        }
    }
}

/// Read-only state available to a scoring pass.
pub struct ScoringContext<'a> {
    pub problem: &'a AlignmentProblem,
    /// Sources whose alignment is already known.
    pub labeled: &'a BTreeSet<usize>,
    pub round: usize,
    pub cg: CgConfig,
}

/// Scores of one pass. `solution` is set for the impact scorer only.
#[derive(Debug, Clone)]
pub struct Scores {
    pub scores: BTreeMap<usize, f64>,
    pub solution: Option<AdjointSolution>,
}

pub fn score_all(spec: &StrategySpec, pool: &BTreeSet<usize>, coupling: &Coupling, ctx: &ScoringContext<'_>) -> Result<Scores> {
    if pool.is_empty() {
        return Err(Error::Empty("query pool"));
    }
    spec.validate(coupling.n())?;
    let t = coupling.values();
    let mut solution = None;
    let per_source: Vec<f64> = match spec {
        StrategySpec::Avatar {
            utility,
            aggregation,
            sign,
        } => {
            let out = adjoint::source_impacts(ctx.problem, coupling, utility, &ctx.cg, *aggregation)?;
            solution = Some(out.solution);
            out.scores
                .into_iter()
                .map(|s| match sign {
                    ImpactSign::Signed => s,
                    ImpactSign::Negated => -s,
                    ImpactSign::Absolute => s.abs(),
                })
                .collect()
        }
        StrategySpec::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(round_seed(*seed, ctx.round));
            (0..coupling.n()).map(|_| rng.gen::<f64>()).collect()
        }
        StrategySpec::Entropy => normalized_rows(coupling)
            .outer_iter()
            .map(|p| -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>())
            .collect(),
        StrategySpec::Margin => normalized_rows(coupling)
            .outer_iter()
            .map(|p| {
                let (a, b) = top_two(p.iter().copied());
                -(a - b)
            })
            .collect(),
        StrategySpec::LeastConfident => normalized_rows(coupling)
            .outer_iter()
            .map(|p| -p.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        StrategySpec::Density { k } => density_scores(t.to_owned(), pool, ctx.labeled, *k),
        StrategySpec::Diversity => diversity_scores(&normalized_rows(coupling), ctx.labeled),
        StrategySpec::Betweenness { graph, cache } => cache.get_or_init(|| betweenness(graph)).clone(),
    };
    let scores = pool.iter().map(|&i| (i, per_source[i])).collect();
    Ok(Scores { scores, solution })
}

/// Seed for round `round` of a stream rooted at `seed`.
pub fn round_seed(seed: u64, round: usize) -> u64 {
    seed ^ (round as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn normalized_rows(coupling: &Coupling) -> Array2<f64> {
    let mut p = coupling.values().to_owned();
    for mut row in p.outer_iter_mut() {
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        }
    }
    p
}

fn top_two(xs: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for x in xs {
        if x > best.0 {
            best = (x, best.0);
        } else if x > best.1 {
            best.1 = x;
        }
    }
    if best.1 == f64::NEG_INFINITY {
        best.1 = best.0;
    }
    best
}

/// `sum_{j in U or kNN(i)} ||T_i - T_j||^2` with `U` the unlabeled sources.
fn density_scores(t: Array2<f64>, pool: &BTreeSet<usize>, labeled: &BTreeSet<usize>, k: usize) -> Vec<f64> {
    let n = t.nrows();
    let sq: Array1<f64> = t.map_axis(Axis(1), |r| r.dot(&r));
    let gram = t.dot(&t.t());
    let dist = |i: usize, j: usize| (sq[i] + sq[j] - 2.0 * gram[[i, j]]).max(0.0);
    let unlabeled: Vec<usize> = (0..n).filter(|i| !labeled.contains(i)).collect();

    let mut out = vec![0.0; n];
    for &i in pool {
        let mut neighbors: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(i, j), j)).collect();
        neighbors.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut members: BTreeSet<usize> = unlabeled.iter().copied().collect();
        members.extend(neighbors.iter().take(k).map(|&(_, j)| j));
        out[i] = members.iter().map(|&j| dist(i, j)).sum();
    }
    out
}

/// `sum_{j in L} KL(p_i || p_j)` over row-normalized plans.
fn diversity_scores(p: &Array2<f64>, labeled: &BTreeSet<usize>) -> Vec<f64> {
    let m = p.ncols();
    let mut log_q_sum = vec![0.0; m];
    for &j in labeled {
        for (acc, &q) in log_q_sum.iter_mut().zip(p.row(j)) {
            *acc += (q + KL_FLOOR).ln();
        }
    }
    let count = labeled.len() as f64;
    p.outer_iter()
        .map(|row| {
            row.iter()
                .zip(&log_q_sum)
                .map(|(&v, &lq)| v * (count * (v + KL_FLOOR).ln() - lq))
                .sum()
        })
        .collect()
}

/// Brandes betweenness on the unweighted graph of nonzero off-diagonal
/// entries. Each unordered pair is counted once.
pub fn betweenness(graph: &SparseMatrix) -> Vec<f64> {
    let n = graph.nrows();
    let adj: Vec<Vec<usize>> = (0..n)
        .map(|i| graph.row(i).filter(|&(j, w)| j != i && w != 0.0).map(|(j, _)| j).collect())
        .collect();
    let mut cb = vec![0.0; n];
    let mut sigma = vec![0.0f64; n];
    let mut dist = vec![-1i64; n];
    let mut delta = vec![0.0; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for s in 0..n {
        let mut stack = Vec::with_capacity(n);
        for v in 0..n {
            preds[v].clear();
            sigma[v] = 0.0;
            dist[v] = -1;
            delta[v] = 0.0;
        }
        sigma[s] = 1.0;
        dist[s] = 0;
        let mut queue = VecDeque::from([s]);
        while let Some(v) = queue.pop_front() {
            stack.push(v);
            for &w in &adj[v] {
                if dist[w] < 0 {
                    dist[w] = dist[v] + 1;
                    queue.push_back(w);
                }
                if dist[w] == dist[v] + 1 {
                    sigma[w] += sigma[v];
                    preds[w].push(v);
                }
            }
        }
        while let Some(w) = stack.pop() {
            for &v in &preds[w] {
                delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
            }
            if w != s {
                cb[w] += delta[w];
            }
        }
    }
    cb.iter_mut().for_each(|c| *c /= 2.0);
    cb
}

/// Outcome of one batch selection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub selected: Vec<usize>,
    /// The pool ran out before `batch_size` members were chosen.
    pub exhausted: bool,
}

/// Repeatedly takes the highest-scoring pool member (lowest index on ties)
/// and removes it from the pool.
pub fn select_batch(scores: &BTreeMap<usize, f64>, pool: &mut BTreeSet<usize>, batch_size: usize) -> Batch {
    let mut ranked: Vec<(usize, f64)> = pool
        .iter()
        .map(|&i| (i, scores.get(&i).copied().unwrap_or(f64::NEG_INFINITY)))
        .collect();
    ranked.sort_by(|a, b| {
        let (x, y) = (nan_low(a.1), nan_low(b.1));
        y.total_cmp(&x).then(a.0.cmp(&b.0))
    });
    let selected: Vec<usize> = ranked.iter().take(batch_size).map(|&(i, _)| i).collect();
    for i in &selected {
        pool.remove(i);
    }
    Batch {
        exhausted: selected.len() < batch_size,
        selected,
    }
}

fn nan_low(x: f64) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{validate_problem, Marginals, ProblemParts};
    use ndarray::array;

    fn ctx_problem(n: usize, m: usize) -> AlignmentProblem {
        validate_problem(ProblemParts::uniform(Array2::from_elem((n, m), 0.5), 1.0, 0.1)).unwrap()
    }

    fn score(spec: &StrategySpec, t: Array2<f64>, labeled: &BTreeSet<usize>) -> BTreeMap<usize, f64> {
        let (n, m) = t.dim();
        let p = ctx_problem(n, m);
        let marg = Marginals::new(t.sum_axis(Axis(1)).to_vec(), t.sum_axis(Axis(0)).to_vec()).unwrap_or(Marginals::uniform(n, m));
        let c = Coupling::new(t, &marg).unwrap();
        let pool: BTreeSet<usize> = (0..n).filter(|i| !labeled.contains(i)).collect();
        let ctx = ScoringContext {
            problem: &p,
            labeled,
            round: 0,
            cg: CgConfig::default(),
        };
        score_all(spec, &pool, &c, &ctx).unwrap().scores
    }

    #[test]
    fn entropy_of_one_hot_row_is_zero() {
        let s = score(&StrategySpec::Entropy, array![[0.5, 0.0], [0.25, 0.25]], &BTreeSet::new());
        assert_eq!(s[&0], 0.0);
        assert!((s[&1] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn margin_of_tied_row_is_zero() {
        let s = score(&StrategySpec::Margin, array![[0.25, 0.25], [0.4, 0.1]], &BTreeSet::new());
        assert_eq!(s[&0], 0.0);
        assert!((s[&1] + 0.6).abs() < 1e-12);
    }

    #[test]
    fn least_confident_is_negated_max() {
        let s = score(&StrategySpec::LeastConfident, array![[0.25, 0.25], [0.4, 0.1]], &BTreeSet::new());
        assert!((s[&0] + 0.5).abs() < 1e-15);
        assert!((s[&1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn betweenness_path_middle_is_unique_max() {
        let g = SparseMatrix::from_undirected_edges(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        assert_eq!(betweenness(&g), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn betweenness_star() {
        let g = SparseMatrix::from_undirected_edges(4, [(0, 1, 1.0), (0, 2, 1.0), (0, 3, 1.0)]).unwrap();
        assert_eq!(betweenness(&g), vec![3.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn betweenness_graph_size_checked() {
        let g = SparseMatrix::zeros(5, 5);
        let p = ctx_problem(2, 2);
        let c = Coupling::new(Array2::from_elem((2, 2), 0.25), p.marginals()).unwrap();
        let pool = BTreeSet::from([0, 1]);
        let labeled = BTreeSet::new();
        let ctx = ScoringContext {
            problem: &p,
            labeled: &labeled,
            round: 0,
            cg: CgConfig::default(),
        };
        assert!(score_all(&StrategySpec::betweenness(g), &pool, &c, &ctx).is_err());
        assert!(score_all(&StrategySpec::Entropy, &BTreeSet::new(), &c, &ctx).is_err());
    }

    #[test]
    fn diversity_without_labels_is_zero() {
        let s = score(&StrategySpec::Diversity, array![[0.3, 0.2], [0.1, 0.4]], &BTreeSet::new());
        assert!(s.values().all(|&v| v == 0.0));
    }

    #[test]
    fn diversity_matches_direct_kl() {
        let t = array![[0.3, 0.2], [0.1, 0.4], [0.25, 0.25]];
        let labeled = BTreeSet::from([2]);
        let s = score(&StrategySpec::Diversity, t.clone(), &labeled);
        let p = [0.6, 0.4];
        let q = [0.5, 0.5];
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * ((a + KL_FLOOR).ln() - (b + KL_FLOOR).ln())).sum();
        assert!((s[&0] - kl).abs() < 1e-12);
    }

    #[test]
    fn density_matches_brute_force() {
        let t = array![[0.1, 0.2, 0.0], [0.05, 0.05, 0.2], [0.0, 0.3, 0.0], [0.15, 0.0, 0.1]];
        let labeled = BTreeSet::from([3]);
        let s = score(&StrategySpec::Density { k: 1 }, t.clone(), &labeled);
        let d = |i: usize, j: usize| (&t.row(i) - &t.row(j)).mapv(|x| x * x).sum();
        // Node 0: unlabeled {0,1,2} plus its nearest neighbour.
        let nn0 = (1..4).min_by(|&a, &b| d(0, a).total_cmp(&d(0, b))).unwrap();
        let mut members = BTreeSet::from([0, 1, 2]);
        members.insert(nn0);
        let expected: f64 = members.iter().map(|&j| d(0, j)).sum();
        assert!((s[&0] - expected).abs() < 1e-12);
    }

    #[test]
    fn random_is_seeded() {
        let t = Array2::from_elem((5, 2), 0.1);
        let a = score(&StrategySpec::Random { seed: 7 }, t.clone(), &BTreeSet::new());
        let b = score(&StrategySpec::Random { seed: 7 }, t.clone(), &BTreeSet::new());
        let c = score(&StrategySpec::Random { seed: 8 }, t, &BTreeSet::new());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn select_batch_examples() {
        let scores = BTreeMap::from([(0, 3.0), (1, 5.0), (2, 5.0), (3, 1.0)]);
        let mut pool: BTreeSet<usize> = (0..4).collect();
        let b = select_batch(&scores, &mut pool, 2);
        assert_eq!(b.selected, vec![1, 2]);
        assert!(!b.exhausted);
        assert_eq!(pool, BTreeSet::from([0, 3]));

        let mut pool: BTreeSet<usize> = (0..4).collect();
        assert_eq!(select_batch(&scores, &mut pool, 1).selected, vec![1]);

        let flat = BTreeMap::from([(4, 1.0), (2, 1.0), (9, 1.0)]);
        let mut pool = BTreeSet::from([2, 4, 9]);
        assert_eq!(select_batch(&flat, &mut pool, 2).selected, vec![2, 4]);

        let b = select_batch(&flat, &mut pool, 3);
        assert_eq!(b.selected, vec![9]);
        assert!(b.exhausted);
    }

    #[test]
    fn names_round_trip() {
        let g = SparseMatrix::from_undirected_edges(3, [(0, 1, 1.0), (1, 2, 1.0)]).unwrap();
        let graphs = GraphPair::new(g.clone(), g).unwrap();
        for name in [
            "random",
            "entropy",
            "margin",
            "least_confident",
            "density",
            "density:5",
            "diversity",
            "betweenness",
            "avatar_l2",
            "avatar_entropy",
            "avatar_shannon",
            "avatar_consist",
            "avatar_l2_uniform",
            "avatar_entropy_negated",
            "avatar_consist_uniform_absolute",
        ] {
            assert_eq!(StrategySpec::parse(name, 0, Some(&graphs)).unwrap().name(), name);
        }
        assert!(StrategySpec::parse("avatar_l3", 0, None).is_err());
        assert!(matches!(StrategySpec::parse("betweenness", 0, None), Err(Error::MissingGraph(_))));
    }
}