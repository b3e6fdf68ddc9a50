mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use ndarray::Array2;
use otactive::adjoint::{self, CgConfig};
use otactive::sinkhorn;
use otactive::strategies::{self, ScoringContext, StrategySpec};
use otactive::utility::{self, UtilitySpec};
use otactive::{validate_problem, Coupling, CostMatrix, Marginals, ProblemParts, SupervisionSet};
use proptest::prelude::*;
use rand::Rng;

fn supervision_pairs(n: usize, m: usize, seed: u64) -> SupervisionSet {
    let mut r = rng(seed);
    let mut set = SupervisionSet::empty(n, m);
    for i in 0..n {
        if r.gen::<f64>() < 0.4 {
            set.insert(i, r.gen_range(0..m)).unwrap();
        }
    }
    set
}

fn positive_plan(n: usize, m: usize, seed: u64) -> Array2<f64> {
    let mut r = rng(seed);
    let t = Array2::from_shape_simple_fn((n, m), || 0.01 + r.gen::<f64>().powi(3));
    let s = t.sum();
    t / s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sinkhorn_conserves_marginals(n in 2usize..8, m in 2usize..8, eps in 0.05f64..1.0, beta in 0.0f64..=1.0, seed in any::<u64>()) {
        let (mu, nu) = random_marginals(n, m, seed);
        let p = validate_problem(ProblemParts {
            mu: mu.clone(),
            nu: nu.clone(),
            supervision: supervision_pairs(n, m, seed),
            ..ProblemParts::uniform(random_cost(n, m, seed), beta, eps)
        })
        .unwrap();
        let (t, r) = sinkhorn::solve(&p, &tight()).unwrap();
        prop_assert!(r.converged);
        let rows = t.row_sums();
        let cols = t.col_sums();
        let l1: f64 = rows.iter().zip(&mu).chain(cols.iter().zip(&nu)).map(|(a, b)| (a - b).abs()).sum();
        prop_assert!(l1 <= 1e-11, "{l1}");
        prop_assert!(t.values().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn plan_is_gibbs_kernel_of_potentials(n in 2usize..8, m in 2usize..8, eps in 0.05f64..1.0, seed in any::<u64>()) {
        let (p, _) = random_problem(n, m, eps, 0.8, seed);
        let cs = supervised_cost(&p);
        let (t, r) = sinkhorn::solve(&p, &tight()).unwrap();
        let (a, b) = (&r.potentials.alpha, &r.potentials.beta);
        for ((i, j), &v) in t.values().indexed_iter() {
            let gibbs = ((a[i] + b[j] - cs[[i, j]]) / eps).exp();
            prop_assert!((v - gibbs).abs() <= 1e-9 * gibbs.max(1e-3));
        }
    }

    #[test]
    fn adjoint_system_is_psd_with_known_null_space(n in 2usize..8, m in 2usize..8, eps in 0.05f64..0.5, seed in any::<u64>()) {
        let (p, graphs) = random_problem(n, m, eps, 1.0, seed);
        let (t, r) = sinkhorn::solve(&p, &tight()).unwrap();
        let mut v_rng = rng(seed ^ 1);
        for u in all_utilities(&graphs) {
            let g = utility::gradient(&u, t.values()).unwrap();
            let sys = adjoint::assemble(&t, p.marginals(), g.view()).unwrap();
            let allowed = (10.0 * r.final_violation).max(1e-12);
            prop_assert!(sys.null_space_residual() <= allowed);
            prop_assert!(sys.range_residual() <= allowed);
            for _ in 0..5 {
                let v: Vec<f64> = (0..sys.dim()).map(|_| v_rng.gen::<f64>() * 2.0 - 1.0).collect();
                prop_assert!(sys.quadratic_form(&v) >= -1e-12);
            }
        }
    }

    #[test]
    fn deterministic_strategies_commute_with_source_relabeling(n in 3usize..9, m in 2usize..7, seed in any::<u64>()) {
        let t = positive_plan(n, m, seed);
        let mut r = rng(seed ^ 2);
        let mut perm: Vec<usize> = (0..n).collect();
        for k in (1..n).rev() {
            perm.swap(k, r.gen_range(0..=k));
        }
        let labeled: BTreeSet<usize> = (0..n).filter(|_| r.gen::<f64>() < 0.3).collect();
        let pool: BTreeSet<usize> = (0..n).filter(|i| !labeled.contains(i)).collect();
        prop_assume!(!pool.is_empty());
        let mut tp = Array2::zeros((n, m));
        for i in 0..n {
            tp.row_mut(perm[i]).assign(&t.row(i));
        }
        let relabel = |s: &BTreeSet<usize>| s.iter().map(|&i| perm[i]).collect::<BTreeSet<usize>>();
        let (labeled_p, pool_p) = (relabel(&labeled), relabel(&pool));

        let p = validate_problem(ProblemParts::uniform(Array2::from_elem((n, m), 0.5), 1.0, 0.1)).unwrap();
        let marg = Marginals::uniform(n, m);
        let (c, cp) = (Coupling::new(t, &marg).unwrap(), Coupling::new(tp, &marg).unwrap());
        let specs = [StrategySpec::Entropy, StrategySpec::Margin, StrategySpec::LeastConfident, StrategySpec::Density { k: 2 }, StrategySpec::Diversity];
        for spec in &specs {
            let ctx = ScoringContext { problem: &p, labeled: &labeled, round: 1, cg: CgConfig::default() };
            let ctx_p = ScoringContext { problem: &p, labeled: &labeled_p, round: 1, cg: CgConfig::default() };
            let a = strategies::score_all(spec, &pool, &c, &ctx).unwrap().scores;
            let b = strategies::score_all(spec, &pool_p, &cp, &ctx_p).unwrap().scores;
            for (&i, &s) in &a {
                let other = b[&perm[i]];
                prop_assert!((s - other).abs() <= 1e-12 * s.abs().max(1.0), "{}: {s} vs {other}", spec.name());
            }
        }
    }

    #[test]
    fn batch_selection_ignores_positive_scaling(scores in prop::collection::vec(-1.0f64..1.0, 1..30), c in 1e-3f64..1e3, batch in 1usize..10) {
        let map: BTreeMap<usize, f64> = scores.iter().copied().enumerate().collect();
        let scaled: BTreeMap<usize, f64> = map.iter().map(|(&i, &s)| (i, s * c)).collect();
        let mut pool_a: BTreeSet<usize> = map.keys().copied().collect();
        let mut pool_b = pool_a.clone();
        let a = strategies::select_batch(&map, &mut pool_a, batch);
        let b = strategies::select_batch(&scaled, &mut pool_b, batch);
        prop_assert_eq!(&a.selected, &b.selected);
        prop_assert_eq!(pool_a, pool_b);
        prop_assert_eq!(a.selected.len(), batch.min(scores.len()));
    }

    #[test]
    fn squared_l2_scales_quadratically(n in 1usize..8, m in 1usize..8, c in 0.01f64..100.0, seed in any::<u64>()) {
        let t = positive_plan(n, m, seed);
        let u = UtilitySpec::squared_l2();
        let v = utility::value(&u, t.view()).unwrap();
        let s = utility::value(&u, (&t * c).view()).unwrap();
        prop_assert!((s - c * c * v).abs() <= 1e-12 * s.max(1e-300));
    }

    #[test]
    fn supervised_cost_is_non_negative_and_monotone(n in 1usize..8, m in 1usize..8, beta in 0.0f64..=1.0, seed in any::<u64>()) {
        let cost = CostMatrix::new(random_cost(n, m, seed)).unwrap();
        let small = supervision_pairs(n, m, seed);
        let mut large = small.clone();
        let mut r = rng(seed ^ 3);
        for i in 0..n {
            if !large.is_labeled(i) && r.gen::<bool>() {
                large.insert(i, r.gen_range(0..m)).unwrap();
            }
        }
        let a = sinkhorn::build_supervised_cost(&cost, &small, beta).unwrap();
        let b = sinkhorn::build_supervised_cost(&cost, &large, beta).unwrap();
        for ((i, j), &v) in a.values().indexed_iter() {
            prop_assert!(v >= 0.0 && b.get(i, j) >= 0.0);
            prop_assert!(b.get(i, j) <= v);
            prop_assert!(v <= cost.get(i, j));
        }
    }
}
