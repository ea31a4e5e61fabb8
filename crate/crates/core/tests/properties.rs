//! Randomized invariants of the solvers, checks, projection and simulator.

use proptest::prelude::*;

use brwlab::checks::{max_principle_check, strong_local_test, Outcome, Verdict};
use brwlab::domain::{full_domain, moment_matrix, truncate, BoundaryPolicy, TruncatedDomain};
use brwlab::gallery::{tree_edge_breeding, tree_with_loop};
use brwlab::genfun::{eval_g, solve_global_extinction, solve_local_with_seed, SiteVector, SolveOptions, TargetSet};
use brwlab::law::{CountLaw, SiteLaw};
use brwlab::model::{BrwModel, FiniteModel};
use brwlab::montecarlo::{estimate, Event, McConfig};
use brwlab::projection::project_via_map;
use brwlab::site::Site;

/// Smallest root of `f(s) = s` on [0,1] by bisection on the sign of
/// `f(s) - s`; only valid for supercritical pmfs.
fn gw_oracle(pmf: &[f64]) -> f64 {
    let f = |s: f64| pmf.iter().rev().fold(0.0, |acc, p| acc * s + p);
    let (mut lo, mut hi) = (0.0_f64, 1.0 - 1e-9);
    if f(hi) - hi > 0.0 {
        return 1.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn normalised(w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn supercritical_pmf() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.05f64..1.0, 2..6)
        .prop_map(normalised)
        .prop_filter("mean above 1.1", |p| p.iter().enumerate().map(|(i, x)| i as f64 * x).sum::<f64>() > 1.1)
}

/// Irreducible factored model on 2 to 4 sites.
fn finite_model() -> impl Strategy<Value = BrwModel> {
    (2usize..=4)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(prop::collection::vec(0.05f64..1.0, 2..5), n),
                prop::collection::vec(prop::collection::vec(0.05f64..1.0, n), n),
            )
        })
        .prop_map(|(counts, rows)| {
            let sites: Vec<Site> = (0..counts.len()).map(|i| Site::named(format!("s{i}"))).collect();
            let laws = counts
                .into_iter()
                .zip(rows)
                .zip(&sites)
                .map(|((c, r), x)| {
                    let diffusion = sites.iter().cloned().zip(normalised(r)).collect();
                    (x.clone(), SiteLaw::factored(CountLaw::Pmf(normalised(c)), diffusion))
                })
                .collect();
            BrwModel::new(FiniteModel::new("random", sites.clone(), laws).unwrap())
        })
}

fn full(m: &BrwModel) -> TruncatedDomain {
    full_domain(m, BoundaryPolicy::OutsideExtinct).unwrap()
}

fn leq(a: &SiteVector, b: &SiteVector, tol: f64) -> bool {
    a.values.iter().zip(&b.values).all(|(x, y)| *x <= y + tol)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gw_extinction_matches_scalar_root(pmf in supercritical_pmf()) {
        let built = brwlab::gallery::gw_law(CountLaw::Pmf(pmf.clone())).unwrap();
        let q = solve_global_extinction(&full(&built.model), &SolveOptions::default()).unwrap();
        prop_assert!(q.converged);
        let want = gw_oracle(&pmf);
        prop_assert!((q.lower.values[0] - want).abs() < 1e-8, "{} vs {}", q.lower.values[0], want);
    }

    #[test]
    fn generating_function_is_monotone(m in finite_model(), a in prop::collection::vec(0.0f64..1.0, 4), b in prop::collection::vec(0.0f64..1.0, 4)) {
        let dom = full(&m);
        let w = dom.window.clone();
        let lo = SiteVector::from_fn(&w, |i, _| a[i].min(b[i]));
        let hi = SiteVector::from_fn(&w, |i, _| a[i].max(b[i]));
        prop_assert!(leq(&eval_g(&dom, &lo).unwrap(), &eval_g(&dom, &hi).unwrap(), 1e-15));
    }

    #[test]
    fn extinction_vectors_are_ordered_fixed_points(m in finite_model()) {
        let dom = full(&m);
        let opts = SolveOptions::default();
        let q = solve_global_extinction(&dom, &opts).unwrap();
        let target = TargetSet::single(Site::named("s0"));
        let (local, never) = solve_local_with_seed(&dom, &target, &opts).unwrap();
        for b in [&q, &local, &never] {
            prop_assert!(b.converged);
            prop_assert!(leq(&b.lower, &b.upper, 0.0));
        }
        // global extinction implies local extinction, and so does never visiting
        prop_assert!(leq(&q.lower, &local.upper, 1e-9));
        prop_assert!(leq(&never.lower, &local.upper, 1e-9));
        let g = eval_g(&dom, &q.lower).unwrap();
        prop_assert!(g.max_abs_diff(&q.lower) < 1e-9);
        // any other fixed point reached from above dominates q-bar
        let mut z = SiteVector::constant(&dom.window, 0.999);
        for _ in 0..20_000 {
            z = eval_g(&dom, &z).unwrap();
        }
        prop_assert!(leq(&q.lower, &z, 1e-9));
    }

    #[test]
    fn max_principle_holds_for_solver_outputs(m in finite_model()) {
        let dom = full(&m);
        let opts = SolveOptions::default();
        let q = solve_global_extinction(&dom, &opts).unwrap();
        let (local, _) = solve_local_with_seed(&dom, &TargetSet::single(Site::named("s1")), &opts).unwrap();
        for z in [&q.upper, &local.upper] {
            let rep = max_principle_check(&dom, z, &q.lower, 1e-8).unwrap();
            prop_assert_eq!(rep.outcome, Outcome::Pass, "{:?}", rep.notes);
        }
    }

    #[test]
    fn identity_projection_keeps_row_sums(m in finite_model()) {
        let dom = full(&m);
        let p = project_via_map(&dom, |s| Some(s.to_string())).unwrap();
        prop_assert!(p.valid);
        let pm = moment_matrix(&full(&p.model));
        let mm = moment_matrix(&dom);
        for x in 0..dom.window.len() {
            let y = p.labels.iter().position(|l| *l == dom.window.site(x).to_string()).unwrap();
            prop_assert!((mm.row_sum(x) - pm.row_sum(y)).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn plain_brackets_nest_in_the_radius(lambda in 0.36f64..0.6) {
        let m = tree_edge_breeding(3, lambda).unwrap();
        let opts = SolveOptions::tol(1e-10).uncertified();
        let mut prev: Option<brwlab::genfun::ExtinctionBracket> = None;
        for r in [4, 8] {
            let dom = truncate(&m, &m.root(), r, BoundaryPolicy::OutsideExtinct).unwrap();
            let b = solve_global_extinction(&dom, &opts).unwrap();
            if let Some(p) = &prev {
                for (i, x) in p.window().sites().iter().enumerate() {
                    let (lo, hi) = b.at(x).unwrap();
                    prop_assert!(p.lower.values[i] <= lo + 1e-9);
                    prop_assert!(hi <= p.upper.values[i] + 1e-9);
                }
            }
            prev = Some(b);
        }
    }

    #[test]
    fn verdicts_never_contradict_across_radii(lambda in 0.28f64..0.45) {
        let m = tree_with_loop(3, lambda, 3.0).unwrap();
        let target = TargetSet::single(m.root());
        let mut seen = Vec::new();
        for r in [6, 9] {
            let dom = truncate(&m, &m.root(), r, BoundaryPolicy::OutsideExtinct).unwrap();
            let rep = strong_local_test(&dom, &target, 1e-8, &SolveOptions::tol(1e-10)).unwrap();
            seen.push(rep.verdict.unwrap());
        }
        prop_assert!(!(seen.contains(&Verdict::Strong) && seen.contains(&Verdict::NonStrong)), "{:?}", seen);
    }

    #[test]
    fn constant_labelling_of_a_regular_tree_is_valid(lambda in 0.1f64..1.0, d in 3usize..6) {
        let m = tree_edge_breeding(d, lambda).unwrap();
        let dom = truncate(&m, &m.root(), 3, BoundaryPolicy::OutsideExtinct).unwrap();
        let p = project_via_map(&dom, |_| Some("*".into())).unwrap();
        prop_assert!(p.valid);
        let pm = moment_matrix(&full(&p.model));
        prop_assert!((pm.row_sum(0) - d as f64 * lambda).abs() < 1e-12);
    }

    #[test]
    fn simulation_is_reproducible_across_thread_counts(seed in any::<u64>()) {
        let built = brwlab::gallery::gw_law(CountLaw::Pmf(vec![0.25, 0.0, 0.75])).unwrap();
        let dom = full(&built.model);
        let cfg = McConfig { trials: 500, horizon: 30, cap: 10_000, seed };
        let events = [Event::Global, Event::NeverVisit { target: vec![built.model.root()] }];
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            pool.install(|| serde_json::to_string(&estimate(&dom, &built.model.root(), &events, &cfg).unwrap()).unwrap())
        };
        prop_assert_eq!(run(1), run(3));
    }
}
