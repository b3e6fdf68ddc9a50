mod common;

use common::*;
use nalgebra::{Matrix4, Vector4};
use ndarray::{array, Array2};
use otactive::sinkhorn::{self, build_supervised_cost, entropic_objective, sparsify, SinkhornConfig};
use otactive::{validate_problem, CostMatrix, Error, Marginals, ProblemParts, SupervisionSet};

fn problem(cost: Array2<f64>, eps: f64) -> otactive::AlignmentProblem {
    validate_problem(ProblemParts::uniform(cost, 1.0, eps)).unwrap()
}

fn plain() -> SinkhornConfig {
    SinkhornConfig {
        log_domain: false,
        ..tight()
    }
}

/// Minimizes `<C, T> + eps sum T (log T - 1)` over 3x3 couplings by Newton's
/// method on the coordinates `T = mu nu^T + sum x_k B_k`, where the `B_k`
/// span the matrices with zero row and column sums.
fn newton_oracle(c: &Array2<f64>, mu: &[f64], nu: &[f64], eps: f64) -> Array2<f64> {
    let basis: Vec<Array2<f64>> = [(0, 0), (0, 1), (1, 0), (1, 1)]
        .iter()
        .map(|&(i, j)| {
            let mut b = Array2::zeros((3, 3));
            b[[i, j]] = 1.0;
            b[[i, 2]] = -1.0;
            b[[2, j]] = -1.0;
            b[[2, 2]] = 1.0;
            b
        })
        .collect();
    let t0 = Array2::from_shape_fn((3, 3), |(i, j)| mu[i] * nu[j]);
    let plan = |x: &Vector4<f64>| {
        let mut t = t0.clone();
        for k in 0..4 {
            t.scaled_add(x[k], &basis[k]);
        }
        t
    };
    let obj = |t: &Array2<f64>| -> f64 { t.iter().zip(c).map(|(&t, &c)| c * t + eps * t * (t.ln() - 1.0)).sum() };
    let mut x = Vector4::zeros();
    for _ in 0..200 {
        let t = plan(&x);
        let g = Vector4::from_fn(|k, _| {
            basis[k].iter().zip(t.iter()).zip(c).map(|((b, t), c)| b * (c + eps * t.ln())).sum()
        });
        if g.norm() < 1e-15 {
            break;
        }
        let h = Matrix4::from_fn(|k, l| {
            basis[k].iter().zip(&basis[l]).zip(t.iter()).map(|((a, b), t)| eps * a * b / t).sum()
        });
        let step = h.lu().solve(&g).unwrap();
        let f0 = obj(&t);
        let mut s = 1.0;
        loop {
            let cand = x - step * s;
            let tc = plan(&cand);
            if tc.iter().all(|&v| v > 0.0) && obj(&tc) <= f0 + 1e-18 {
                x = cand;
                break;
            }
            s /= 2.0;
            if s < 1e-20 {
                return t;
            }
        }
    }
    plan(&x)
}

fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

#[test]
fn supervised_cost_examples() {
    let c = CostMatrix::new(Array2::from_elem((3, 6), 0.7)).unwrap();
    let empty = SupervisionSet::empty(3, 6);
    assert_eq!(build_supervised_cost(&c, &empty, 1.0).unwrap().values(), c.values());
    let h = SupervisionSet::from_pairs(3, 6, [(2, 5)]).unwrap();
    let s = build_supervised_cost(&c, &h, 1.0).unwrap();
    assert_eq!(s.get(2, 5), 0.0);
    assert_eq!(s.get(2, 4), 0.7);
    assert_eq!(build_supervised_cost(&c, &h, 0.0).unwrap().values(), c.values());
    let half = build_supervised_cost(&c, &h, 0.5).unwrap();
    assert!((half.get(2, 5) - 0.35).abs() < 1e-15);
    assert!(build_supervised_cost(&c, &h, 1.5).is_err());
}

#[test]
fn zero_cost_gives_product_plan() {
    for eps in [0.01, 1.0, 50.0] {
        for log_domain in [true, false] {
            let p = problem(Array2::zeros((2, 2)), eps);
            let cfg = SinkhornConfig { log_domain, ..tight() };
            let (t, r) = sinkhorn::solve(&p, &cfg).unwrap();
            assert!(r.converged);
            for &v in t.values() {
                assert!((v - 0.25).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn large_epsilon_approaches_product_plan() {
    for seed in 0..5 {
        let cost = random_cost(6, 9, seed);
        let (mu, nu) = random_marginals(6, 9, seed);
        let max = cost.iter().fold(0.0f64, |m, &v| m.max(v));
        let p = validate_problem(ProblemParts {
            mu: mu.clone(),
            nu: nu.clone(),
            ..ProblemParts::uniform(cost, 1.0, 1e6 * max)
        })
        .unwrap();
        let (t, _) = sinkhorn::solve(&p, &SinkhornConfig::default()).unwrap();
        for ((i, j), &v) in t.values().indexed_iter() {
            assert!((v - mu[i] * nu[j]).abs() < 1e-6);
        }
    }
}

#[test]
fn identity_cost_matches_newton_oracle() {
    let c = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 1.0 });
    let third = vec![1.0 / 3.0; 3];
    let oracle = newton_oracle(&c, &third, &third, 0.1);
    for log_domain in [true, false] {
        let (t, r) = sinkhorn::solve(&problem(c.clone(), 0.1), &SinkhornConfig { log_domain, ..tight() }).unwrap();
        assert!(r.converged);
        let t = t.into_values();
        assert!(max_diff(&t, &oracle) < 1e-10);
        for i in 0..3 {
            assert!((t[[i, i]] - t[[0, 0]]).abs() < 1e-13);
            for j in 0..3 {
                if i != j {
                    assert!(t[[i, i]] > 10.0 * t[[i, j]]);
                }
            }
        }
    }
}

#[test]
fn random_three_by_three_matches_newton_oracle() {
    for seed in 0..5 {
        let c = random_cost(3, 3, seed);
        let (mu, nu) = random_marginals(3, 3, seed);
        let p = validate_problem(ProblemParts {
            mu: mu.clone(),
            nu: nu.clone(),
            ..ProblemParts::uniform(c.clone(), 1.0, 0.1)
        })
        .unwrap();
        let (t, _) = sinkhorn::solve(&p, &tight()).unwrap();
        assert!(max_diff(&t.into_values(), &newton_oracle(&c, &mu, &nu, 0.1)) < 1e-10);
    }
}

#[test]
fn dual_consistency_in_both_modes() {
    for seed in 0..5 {
        let (p, _) = random_problem(7, 9, 0.05, 0.7, seed);
        let cs = supervised_cost(&p);
        for cfg in [tight(), plain()] {
            let (t, r) = sinkhorn::solve(&p, &cfg).unwrap();
            let (a, b) = (&r.potentials.alpha, &r.potentials.beta);
            for ((i, j), &v) in t.values().indexed_iter() {
                if v > 1e-12 {
                    assert!((v.ln() * p.epsilon() + cs[[i, j]] - a[i] - b[j]).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn marginals_hold_after_convergence() {
    for seed in 0..5 {
        let cost = random_cost(10, 6, seed);
        let (mu, nu) = random_marginals(10, 6, seed);
        let p = validate_problem(ProblemParts {
            mu,
            nu,
            ..ProblemParts::uniform(cost, 1.0, 0.02)
        })
        .unwrap();
        let (t, r) = sinkhorn::solve(&p, &SinkhornConfig::default()).unwrap();
        assert!(r.converged);
        let rows: f64 = t.row_sums().iter().zip(p.marginals().mu()).map(|(a, b)| (a - b).abs()).sum();
        let cols: f64 = t.col_sums().iter().zip(p.marginals().nu()).map(|(a, b)| (a - b).abs()).sum();
        assert!(rows <= 1e-9 && cols <= 1e-9);
    }
}

#[test]
fn dual_objective_ascends_and_gap_closes() {
    for seed in 0..4 {
        let (p, _) = random_problem(8, 8, 0.03, 1.0, seed);
        for log_domain in [true, false] {
            let cfg = SinkhornConfig {
                trace_objective: true,
                log_domain,
                ..tight()
            };
            let (t, r) = sinkhorn::solve(&p, &cfg).unwrap();
            let tr = &r.objective_trace;
            assert!(tr.len() > 2);
            for w in tr.windows(2) {
                assert!(w[1].dual >= w[0].dual - 1e-13);
            }
            let last = tr.last().unwrap();
            assert!((last.primal - last.dual).abs() < 1e-9);
            let obj = entropic_objective(supervised_cost(&p).view(), t.values(), p.epsilon());
            assert!((obj - last.dual).abs() < 1e-9);
        }
    }
}

#[test]
fn log_and_plain_modes_agree() {
    for seed in 0..8 {
        let (p, _) = random_problem(6, 11, 0.04, 1.0, seed);
        let (a, _) = sinkhorn::solve(&p, &tight()).unwrap();
        let (b, _) = sinkhorn::solve(&p, &plain()).unwrap();
        assert!(max_diff(&a.into_values(), &b.into_values()) < 1e-8);
    }
}

#[test]
fn plain_mode_underflow_is_a_numerical_error() {
    let p = problem(array![[0.0, 5.0], [5.0, 0.0], [5.0, 5.0]].mapv(|v: f64| v + 10.0), 1e-3);
    let p = validate_problem(ProblemParts {
        nu: vec![0.5, 0.5],
        ..ProblemParts::uniform(p.cost().values().to_owned(), 1.0, 1e-3)
    })
    .unwrap();
    assert!(matches!(sinkhorn::solve(&p, &plain()), Err(Error::Numerical(_))));
    let (_, r) = sinkhorn::solve(&p, &tight()).unwrap();
    assert!(r.converged);
}

#[test]
fn non_convergence_is_flagged_not_raised() {
    let (p, _) = random_problem(5, 5, 0.01, 1.0, 3);
    let cfg = SinkhornConfig {
        max_iterations: 2,
        tolerance: 1e-15,
        ..SinkhornConfig::default()
    };
    let (t, r) = sinkhorn::solve(&p, &cfg).unwrap();
    assert!(!r.converged);
    assert_eq!(r.iterations_used, 2);
    assert!(r.final_violation > 1e-15);
    assert!(t.values().iter().all(|v| v.is_finite()));
}

#[test]
fn sparsify_support_examples() {
    let marg = Marginals::uniform(4, 4);
    let perm = Array2::from_shape_fn((4, 4), |(i, j)| if j == (i + 1) % 4 { 0.25 - 3e-12 } else { 1e-12 });
    let t = otactive::Coupling::new(perm, &marg).unwrap();
    assert_eq!(sparsify(t, 1e-6).unwrap().support().len(), 4);
    let uniform = otactive::Coupling::new(Array2::from_elem((4, 4), 1.0 / 16.0), &marg).unwrap();
    assert_eq!(sparsify(uniform, 1e-6).unwrap().support().len(), 16);
}

#[test]
fn sparsify_matches_exhaustive_scan() {
    let c = Array2::from_shape_fn((3, 3), |(i, j)| if i == j { 0.0 } else { 1.0 });
    let mut cases = vec![(problem(c, 0.1), 1e-3)];
    for seed in 0..4 {
        cases.push((random_problem(6, 8, 0.02, 1.0, seed).0, 1e-3));
        cases.push((random_problem(6, 8, 0.02, 1.0, seed).0, 1e-6));
    }
    for (p, ratio) in cases {
        let (t, _) = sinkhorn::solve(&p, &tight()).unwrap();
        let values = t.values().to_owned();
        let sparse = sparsify(t, ratio).unwrap();
        let max = values.iter().fold(0.0f64, |m, &v| m.max(v));
        for i in 0..values.nrows() {
            let row = values.row(i);
            let argmax = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
            for j in 0..row.len() {
                let expected = row[j] >= ratio * max || j == argmax;
                assert_eq!(sparse.support().contains(i, j), expected, "entry ({i}, {j})");
            }
        }
        assert_eq!(sparse.values(), values.view());
    }
}

#[test]
fn sparsify_rejects_bad_ratio() {
    let (p, _) = random_problem(3, 3, 0.1, 1.0, 0);
    let (t, _) = sinkhorn::solve(&p, &tight()).unwrap();
    assert!(sparsify(t.clone(), 0.0).is_err());
    assert!(sparsify(t, 1.0).is_err());
}
