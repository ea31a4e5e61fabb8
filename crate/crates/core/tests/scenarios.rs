//! Worked scenarios for the theorem checks on the built-in models.

use brwlab::checks::{max_principle_check, mv_witness_verify, strong_local_test, Outcome, Verdict};
use brwlab::domain::{full_domain, truncate, BoundaryPolicy, TruncatedDomain};
use brwlab::gallery::{gw_law, spataru_recursion, tree_edge_breeding, tree_with_loop, ThetaSchedule};
use brwlab::genfun::{solve_global_extinction, SiteVector, SolveOptions, TargetSet};
use brwlab::law::CountLaw;
use brwlab::model::BrwModel;
use brwlab::site::Site;

const TOL: f64 = 1e-8;

fn verdict(dom: &TruncatedDomain, target: Site) -> Verdict {
    let rep = strong_local_test(dom, &TargetSet::single(target), TOL, &SolveOptions::tol(1e-10)).unwrap();
    rep.verdict.unwrap()
}

fn tree_verdict(d: usize, lambda: f64, radius: usize) -> Verdict {
    let m = tree_edge_breeding(d, lambda).unwrap();
    let dom = truncate(&m, &m.root(), radius, BoundaryPolicy::OutsideExtinct).unwrap();
    verdict(&dom, m.root())
}

struct Spataru {
    dom: TruncatedDomain,
    z: SiteVector,
    qbar: SiteVector,
}

fn spataru() -> Spataru {
    let out = spataru_recursion(0.5, ThetaSchedule::Constant(0.5), 200).unwrap();
    let m = BrwModel::new(out.companion().unwrap());
    let dom = truncate(&m, &Site::Int(0), 40, BoundaryPolicy::OutsideExtinct).unwrap();
    let z = out.to_vector(&dom.window).unwrap();
    let qbar = SiteVector::constant(&dom.window, 1.0 / 3.0);
    Spataru { dom, z, qbar }
}

#[test]
fn spataru_fixed_point_is_a_witness_against_strong_local_survival() {
    let s = spataru();
    let zero = [Site::Int(0)];
    for x0 in [1, 5, 20] {
        let rep = mv_witness_verify(&s.dom, &zero, &s.z, &s.qbar, &[Site::Int(x0)], TOL).unwrap();
        assert_eq!(rep.outcome, Outcome::Pass, "x0 = {x0}: {:?}", rep.notes);
    }
    // a passing witness rules out STRONG for the companion
    let v = verdict(&s.dom, Site::Int(0));
    assert!(matches!(v, Verdict::NonStrong | Verdict::Undecided), "{v:?}");
}

#[test]
fn trivial_witnesses_fail() {
    let s = spataru();
    let one = SiteVector::constant(&s.dom.window, 1.0);
    for v in [&one, &s.qbar] {
        let rep = mv_witness_verify(&s.dom, &[Site::Int(0)], v, &s.qbar, &[Site::Int(3)], TOL).unwrap();
        assert_eq!(rep.outcome, Outcome::Fail);
    }
    let below = SiteVector::constant(&s.dom.window, 0.2);
    let rep = mv_witness_verify(&s.dom, &[Site::Int(0)], &below, &s.qbar, &[Site::Int(3)], TOL).unwrap();
    assert_eq!(rep.outcome, Outcome::Fail);
    assert!(rep.notes[0].contains("precondition"));
}

#[test]
fn spataru_passes_the_max_principle_through_larger_neighbours() {
    let s = spataru();
    let rep = max_principle_check(&s.dom, &s.z, &s.qbar, TOL).unwrap();
    assert_eq!(rep.outcome, Outcome::Pass, "{:?}", rep.notes);
    let ones = max_principle_check(&s.dom, &SiteVector::constant(&s.dom.window, 1.0), &s.qbar, TOL).unwrap();
    assert_eq!(ones.outcome, Outcome::Pass);
}

#[test]
fn supercritical_galton_watson_survives_strongly() {
    let m = gw_law(CountLaw::Pmf(vec![0.25, 0.0, 0.75])).unwrap().model;
    let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
    assert_eq!(verdict(&dom, m.root()), Verdict::Strong);
    let q = solve_global_extinction(&dom, &SolveOptions::default()).unwrap();
    assert!((q.lower.values[0] - 1.0 / 3.0).abs() < 1e-9);
}

// The regular tree is transitive, so the three phases are exhaustive: no
// survival up to 1/d, pure global survival up to 1/(2 sqrt(d-1)) and strong
// local survival beyond.
#[test]
fn regular_tree_trichotomy() {
    assert_eq!(tree_verdict(4, 0.20, 10), Verdict::NoSurvival);
    assert_eq!(tree_verdict(4, 0.27, 10), Verdict::NonStrong);
    assert_eq!(tree_verdict(4, 0.35, 10), Verdict::Strong);
    assert_eq!(tree_verdict(3, 0.30, 10), Verdict::NoSurvival);
    assert_eq!(tree_verdict(3, 0.40, 10), Verdict::Strong);
}

#[test]
fn ternary_tree_between_critical_values_is_not_strong() {
    let v = tree_verdict(3, 0.34, 12);
    assert!(matches!(v, Verdict::NonStrong | Verdict::Undecided), "{v:?}");
}

#[test]
fn tree_with_loop_in_the_middle_window_is_not_strong() {
    let m = tree_with_loop(3, 0.35, 3.0).unwrap();
    let dom = truncate(&m, &m.root(), 12, BoundaryPolicy::OutsideExtinct).unwrap();
    assert_eq!(verdict(&dom, m.root()), Verdict::NonStrong);
}
