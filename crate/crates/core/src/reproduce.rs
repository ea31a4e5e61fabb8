//! The acceptance scenarios, runnable one by one or as a suite.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;
use serde_json::{json, Map, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::checks::{finite_two_fixed_points, max_principle_check, strong_local_test, Verdict};
use crate::domain::{full_domain, moment_matrix, truncate, BoundaryPolicy, TruncatedDomain};
use crate::error::Result;
use crate::gallery::{self, spataru_recursion, LeftRule, ThetaSchedule};
use crate::genfun::{solve_global_extinction, solve_local_with_seed, SiteVector, SolveOptions, TargetSet};
use crate::io::{csv_field, Metadata};
use crate::law::CountLaw;
use crate::model::{build_discrete_counterpart, BrwModel, ContinuousSpec};
use crate::montecarlo::{estimate, step, trial_rng, Event, McConfig, ParticleConfiguration};
use crate::projection::project_via_map;
use crate::site::Site;
use crate::spectral::{critical_params, Indicator};

/// One measured quantity and whether it meets its tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub value: String,
    pub ok: bool,
}

fn check(name: &str, value: impl ToString, ok: bool) -> Check {
    Check { name: name.to_string(), value: value.to_string(), ok }
}

/// Plain decimals for moderate magnitudes, scientific notation otherwise.
fn num(x: f64) -> String {
    if x == 0.0 || (1e-4..1e6).contains(&x.abs()) {
        x.to_string()
    } else {
        format!("{x:.3e}")
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub seconds: f64,
    pub budget_seconds: f64,
    pub checks: Vec<Check>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CriterionResult {
    /// One line, `PASS`/`FAIL` first.
    pub fn line(&self) -> String {
        let status = if self.passed { "PASS" } else { "FAIL" };
        let mut s = format!("{status} criterion {} ({}) {:.1}s/{:.0}s", self.id, self.name, self.seconds, self.budget_seconds);
        for c in &self.checks {
            s.push_str(&format!(" | {}={}{}", c.name, c.value, if c.ok { "" } else { " (!)" }));
        }
        if let Some(e) = &self.error {
            s.push_str(&format!(" | error: {e}"));
        }
        s
    }
}

pub struct Criterion {
    pub id: u8,
    pub name: &'static str,
    pub keywords: &'static [&'static str],
    pub budget_seconds: f64,
    run: fn() -> Result<Vec<Check>>,
}

pub const CRITERIA: &[Criterion] = &[
    Criterion { id: 1, name: "gw-fixed-point", keywords: &["gw", "galton-watson"], budget_seconds: 1.0, run: gw_fixed_point },
    Criterion { id: 2, name: "tree-critical-params", keywords: &["tree", "spectral"], budget_seconds: 10.0, run: tree_critical_params },
    Criterion { id: 3, name: "three-fixed-points", keywords: &["spataru"], budget_seconds: 5.0, run: three_fixed_points },
    Criterion { id: 4, name: "non-strong-local-survival", keywords: &["halfline", "montecarlo"], budget_seconds: 300.0, run: non_strong_halfline },
    Criterion { id: 5, name: "tree-loop-pattern", keywords: &["tree-loop", "tree"], budget_seconds: 120.0, run: tree_loop_pattern },
    Criterion { id: 6, name: "property-sweep", keywords: &["properties"], budget_seconds: 180.0, run: property_sweep },
    Criterion { id: 7, name: "counterpart-identity", keywords: &["counterpart", "continuous"], budget_seconds: 60.0, run: counterpart_identity },
];

impl Criterion {
    pub fn matches(&self, filter: &str) -> bool {
        let f = filter.to_lowercase();
        f == self.id.to_string() || self.name.contains(&f) || self.keywords.iter().any(|k| k.contains(&f))
    }

    pub fn run(&self) -> CriterionResult {
        let t = Instant::now();
        let outcome = (self.run)();
        let seconds = t.elapsed().as_secs_f64();
        let (checks, error) = match outcome {
            Ok(c) => (c, None),
            Err(e) => (Vec::new(), Some(e.to_string())),
        };
        let passed = error.is_none() && !checks.is_empty() && checks.iter().all(|c| c.ok) && seconds <= self.budget_seconds;
        CriterionResult {
            id: self.id,
            name: self.name.to_string(),
            passed,
            seconds,
            budget_seconds: self.budget_seconds,
            checks,
            error,
        }
    }
}

pub fn criterion(id: u8) -> Option<&'static Criterion> {
    CRITERIA.iter().find(|c| c.id == id)
}

pub fn selected(filter: Option<&str>) -> Vec<&'static Criterion> {
    CRITERIA.iter().filter(|c| filter.is_none_or(|f| c.matches(f))).collect()
}

/// Summary table: one row per criterion, measured values as `name=value`
/// pairs separated by `;`.
pub fn summary_csv(meta: &Metadata, results: &[CriterionResult]) -> String {
    let mut s = meta.csv_header();
    s.push_str("id,name,status,seconds,budget_seconds,measured\n");
    for r in results {
        let mut measured: Vec<String> = r.checks.iter().map(|c| format!("{}={}", c.name, c.value)).collect();
        if let Some(e) = &r.error {
            measured.push(format!("error={e}"));
        }
        s.push_str(&format!(
            "{},{},{},{:.3},{},{}\n",
            r.id,
            r.name,
            if r.passed { "pass" } else { "fail" },
            r.seconds,
            r.budget_seconds,
            csv_field(&measured.join(";"))
        ));
    }
    s
}

fn params(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

fn gallery_model(name: &str, p: Value) -> Result<BrwModel> {
    Ok(gallery::build(name, &params(p))?.model)
}

// Criterion 1

fn gw_fixed_point() -> Result<Vec<Check>> {
    let model = gallery::gw_law(CountLaw::Pmf(gallery::GW_DEFAULT.to_vec()))?.model;
    let dom = full_domain(&model, BoundaryPolicy::OutsideExtinct)?;
    let q = solve_global_extinction(&dom, &SolveOptions::default())?;
    let (lo, hi) = (q.lower.values[0], q.upper.values[0]);
    let ok = |v: f64| (v - 1.0 / 3.0).abs() <= 1e-9;
    Ok(vec![check("qbar_lower", lo, ok(lo)), check("qbar_upper", hi, ok(hi)), check("residual", num(q.residual()), true)])
}

// Criterion 2

fn tree_critical_params() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for d in [3usize, 4] {
        let model = gallery::tree_edge_breeding(d, 1.0)?;
        let cp = critical_params(&model, &model.root(), 1000)?;
        let ks = 2.0 * ((d - 1) as f64).sqrt();
        let kw = d as f64;
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        out.push(check(&format!("d{d}_k_s"), cp.k_s, rel(cp.k_s, ks) <= 0.02));
        out.push(check(&format!("d{d}_k_w"), cp.k_w, rel(cp.k_w, kw) <= 0.01));
        out.push(check(&format!("d{d}_lambda_s"), cp.lambda_s, rel(cp.lambda_s, 1.0 / ks) <= 0.02));
        out.push(check(&format!("d{d}_lambda_w_lower"), cp.lambda_w_lower, rel(cp.lambda_w_lower, 1.0 / kw) <= 0.01));
        let ind = serde_json::to_value(cp.pure_global_indicator)?;
        out.push(check(&format!("d{d}_pure_global"), ind.as_str().unwrap_or("?"), cp.pure_global_indicator == Indicator::Yes));
    }
    Ok(out)
}

// Criterion 3

fn three_fixed_points() -> Result<Vec<Check>> {
    let out = spataru_recursion(0.5, ThetaSchedule::Constant(0.5), 10_000)?;
    let residual = out.residual();
    let rel = out.relative_gap_residual();
    let increasing = out.log_gap.windows(2).all(|w| w[1] < w[0]) && out.log_gap.iter().all(|l| l.is_finite());
    let in_range = out.z[0] > 1.0 / 3.0 && out.log_gap.last().is_some_and(|l| *l < 0.0);
    let p_ok = out.p.iter().skip(1).all(|p| *p > 0.0 && *p < 1.0);
    // The companion is locally isomorphic to the Galton-Watson process, so
    // its smallest fixed point is the constant 1/3.
    let companion = BrwModel::new(out.companion()?);
    let dom = truncate(&companion, &Site::Int(0), 50, BoundaryPolicy::OutsideExtinct)?;
    let proj = project_via_map(&dom, |_| Some("*".to_string()))?;
    let gw_dom = full_domain(&proj.model, BoundaryPolicy::OutsideExtinct)?;
    let qbar = solve_global_extinction(&gw_dom, &SolveOptions::tol(1e-14))?.lower.values[0];
    Ok(vec![
        check("residual", num(residual), residual < 1e-12),
        check("relative_gap_residual", num(rel), rel < 1e-12),
        check("z_strictly_increasing", increasing, increasing),
        check("z_in_(1/3,1)", in_range, in_range),
        check("p_in_(0,1)", p_ok, p_ok),
        check("p_last", out.p[out.p.len() - 1], true),
        check("locally_isomorphic_to_gw", proj.valid, proj.valid),
        check("qbar", qbar, (qbar - 1.0 / 3.0).abs() < 1e-12 && out.z[0] - qbar > 0.1),
    ])
}

// Criterion 4

pub const HALFLINE_MC_SEED: u64 = 20_240_501;
pub const HALFLINE_MC_TRIALS: u64 = 100_000;
pub const HALFLINE_MC_HORIZON: usize = 400;
/// Populations this large survive with overwhelming probability.
pub const HALFLINE_MC_CAP: u64 = 1_000_000_000_000_000;

pub fn halfline_default() -> Result<BrwModel> {
    Ok(BrwModel::new(gallery::halfline_binary(LeftRule::Geometric { p1: 0.5, a: 1.0, b: 4.0 })?))
}

fn non_strong_halfline() -> Result<Vec<Check>> {
    let model = halfline_default()?;
    let zero = Site::Int(0);
    let mut verdict_radius = None;
    for r in [10, 20, 40, 60] {
        let dom = truncate(&model, &zero, r, BoundaryPolicy::OutsideExtinct)?;
        let rep = strong_local_test(&dom, &TargetSet::single(zero.clone()), 1e-8, &SolveOptions::default())?;
        if rep.verdict == Some(Verdict::NonStrong) {
            verdict_radius = Some(r);
            break;
        }
    }
    // Particles move one step per generation, so this window is never left
    // before twice the horizon.
    let dom = truncate(&model, &zero, 2 * HALFLINE_MC_HORIZON + 2, BoundaryPolicy::OutsideImmortal)?;
    let cfg = McConfig { trials: HALFLINE_MC_TRIALS, horizon: HALFLINE_MC_HORIZON, cap: HALFLINE_MC_CAP, seed: HALFLINE_MC_SEED };
    let events = [Event::Global, Event::GlobalAvoiding { target: vec![zero.clone()], after: 50 }];
    let est = estimate(&dom, &zero, &events, &cfg)?;
    let (g, a) = (&est[0], &est[1]);
    let z = (g.point - 2.0 / 3.0).abs() / g.stderr;
    Ok(vec![
        check("non_strong_radius", verdict_radius.map_or("none".into(), |r| r.to_string()), verdict_radius.is_some()),
        check("global", format!("{:.5}+-{:.5}", g.point, g.stderr), z <= 4.0),
        check("global_z", format!("{z:.2}"), z <= 4.0),
        check("global_avoiding_0_after_50", format!("{:.5}+-{:.5}", a.point, a.stderr), a.point > 0.0),
        check("capped_trials", g.capped_trials, true),
    ])
}

// Criterion 5

pub const TREE_LOOP_PROBES: [(f64, &[Verdict]); 3] = [
    (0.30, &[Verdict::Strong, Verdict::NoSurvival]),
    (0.35, &[Verdict::NonStrong, Verdict::Undecided]),
    (0.40, &[Verdict::Strong]),
];

fn tree_loop_pattern() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (lambda, allowed) in TREE_LOOP_PROBES {
        let model = gallery::tree_with_loop(3, lambda, 3.0)?;
        let dom = truncate(&model, &model.root(), 12, BoundaryPolicy::OutsideExtinct)?;
        let rep = strong_local_test(&dom, &TargetSet::single(model.root()), 1e-8, &SolveOptions::default())?;
        let v = rep.verdict.unwrap_or(Verdict::Undecided);
        let name = serde_json::to_value(v)?.as_str().unwrap_or("?").to_string();
        out.push(check(&format!("lambda_{lambda:.2}"), name, allowed.contains(&v)));
    }
    Ok(out)
}

// Criterion 6

/// Gallery models used by the deterministic property sweep, with the site
/// at which windows are rooted.
pub fn sweep_models() -> Result<Vec<(String, BrwModel)>> {
    let mut v = vec![
        ("tree".to_string(), gallery_model("tree", json!({"d": 3, "lambda": 0.5}))?),
        ("tree-loop".to_string(), gallery_model("tree-loop", json!({"lambda": 0.35}))?),
        ("line".to_string(), gallery_model("line", json!({"lambda": 1.0}))?),
        ("line-plus-branch".to_string(), gallery_model("line-plus-branch", json!({}))?),
        ("halfline-binary".to_string(), halfline_default()?),
    ];
    let sp = spataru_recursion(0.5, ThetaSchedule::Constant(0.5), 200)?;
    v.push(("spataru".to_string(), BrwModel::new(sp.companion()?)));
    Ok(v)
}

fn nested(a: &TruncatedDomain, av: &[f64], b: &TruncatedDomain, bv: &[f64], lower: bool) -> bool {
    (0..a.len()).all(|i| match b.window.index_of(a.window.site(i)) {
        Some(j) if lower => av[i] <= bv[j] + 1e-9,
        Some(j) => av[i] >= bv[j] - 1e-9,
        None => false,
    })
}

fn property_sweep() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let opts = SolveOptions::default();
    let (mut nest_ok, mut dominance_ok, mut maxp_ok, mut order_ok) = (true, true, true, true);
    let mut failures: Vec<String> = Vec::new();
    for (name, model) in sweep_models()? {
        let root = model.root();
        let mut prev: Option<(TruncatedDomain, Vec<f64>, Vec<f64>)> = None;
        for r in [4, 8, 16] {
            let dom = truncate(&model, &root, r, BoundaryPolicy::OutsideExtinct)?;
            let plain = solve_global_extinction(&dom, &opts.clone().uncertified())?;
            if let Some((pd, pl, pu)) = &prev {
                if !(nested(pd, pl, &dom, &plain.lower.values, true) && nested(pd, pu, &dom, &plain.upper.values, false)) {
                    nest_ok = false;
                    failures.push(format!("{name}: nesting at R={r}"));
                }
            }
            prev = Some((dom.clone(), plain.lower.values.clone(), plain.upper.values.clone()));
            if r == 16 && dom.len() > 50_000 {
                continue;
            }
            let q = solve_global_extinction(&dom, &opts)?;
            let (local, _) = solve_local_with_seed(&dom, &TargetSet::single(root.clone()), &opts)?;
            let below = |v: &SiteVector, w: &SiteVector| v.values.iter().zip(&w.values).any(|(a, b)| *a < b - 1e-8);
            // q(., A) >= qbar, so the upper local bound cannot sit below the
            // lower global bound.
            if below(&local.upper, &q.lower) {
                dominance_ok = false;
                failures.push(format!("{name}: dominance at R={r}"));
            }
            if below(&q.upper, &q.lower) || below(&local.upper, &local.lower) {
                order_ok = false;
                failures.push(format!("{name}: bracket order at R={r}"));
            }
            let mut pairs = vec![(&local.upper, &q.lower), (&q.upper, &q.lower)];
            if !below(&local.lower, &q.lower) {
                pairs.push((&local.lower, &q.lower));
            }
            for (z, qb) in pairs {
                let rep = max_principle_check(&dom, z, qb, 1e-6)?;
                if !rep.passed() {
                    maxp_ok = false;
                    failures.push(format!("{name}: max principle at R={r}: {:?} {:?}", rep.notes, rep.witnesses.first()));
                }
            }
        }
    }
    out.push(check("monotone_order", order_ok, order_ok));
    out.push(check("policy_nesting", nest_ok, nest_ok));
    out.push(check("smallest_fixed_point_dominance", dominance_ok, dominance_ok));
    out.push(check("max_principle", maxp_ok, maxp_ok));

    let cubic = gallery::two_site_cubic()?;
    let rep = finite_two_fixed_points(&cubic, 32, 7, 1e-8)?;
    let dom = full_domain(&cubic, BoundaryPolicy::OutsideExtinct)?;
    let qbar = solve_global_extinction(&dom, &SolveOptions::tol(1e-14))?.lower.values[0];
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    out.push(check("cubic_two_fixed_points", rep.passed(), rep.passed()));
    out.push(check("cubic_qbar", qbar, (qbar - golden).abs() <= 1e-8));

    let same = mc_thread_determinism()?;
    out.push(check("mc_threads_1_vs_8_identical", same, same));
    if !failures.is_empty() {
        failures.truncate(5);
        out.push(check("first_failures", failures.join(" / "), false));
    }
    Ok(out)
}

/// Runs the same simulation on pools of 1 and 8 threads and compares the
/// serialized estimates byte for byte.
pub fn mc_thread_determinism() -> Result<bool> {
    let model = gallery::gw_law(CountLaw::Pmf(gallery::GW_DEFAULT.to_vec()))?.model;
    let dom = full_domain(&model, BoundaryPolicy::OutsideExtinct)?;
    let cfg = McConfig { trials: 4000, horizon: 60, cap: 100_000, seed: 7 };
    let run = |threads: usize| -> Result<String> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| crate::error::Error::Resource(e.to_string()))?;
        let est = pool.install(|| estimate(&dom, &model.root(), &[Event::Global], &cfg))?;
        Ok(serde_json::to_string(&est)?)
    };
    Ok(run(1)? == run(8)?)
}

// Criterion 7

/// Random continuous-time model description on a few named sites.
pub fn random_continuous_spec<R: Rng>(rng: &mut R) -> ContinuousSpec {
    let n = rng.random_range(2..=6);
    let sites: Vec<Site> = (0..n).map(|i| Site::named(format!("s{i}"))).collect();
    let mut rates = std::collections::BTreeMap::new();
    for x in &sites {
        for y in &sites {
            if rng.random_bool(0.6) {
                rates.insert((x.clone(), y.clone()), rng.random_range(0.05..2.0));
            }
        }
        // every site breeds somewhere
        let y = sites[rng.random_range(0..n)].clone();
        rates.entry((x.clone(), y)).or_insert(1.0);
    }
    let death = sites.iter().map(|x| (x.clone(), rng.random_range(0.5..2.0))).collect();
    ContinuousSpec { sites, rates, lambda: rng.random_range(0.1..2.0), death }
}

/// Pearson statistic of observed child counts against the geometric law,
/// with cells merged until each expects at least 5; returns (stat, dof).
pub fn chi_square_geometric(counts: &[u64], mean: f64, samples: u64) -> (f64, usize) {
    let law = CountLaw::Geometric { mean };
    let n = samples as f64;
    let mut stat = 0.0;
    let mut cells: usize = 0;
    let mut k = 0;
    let mut obs_tail: u64 = counts.iter().sum();
    let mut exp_tail = n;
    loop {
        let e = n * law.prob(k);
        // stop once the remaining tail is too thin to split further
        if e < 5.0 || exp_tail - e < 5.0 {
            break;
        }
        let o = counts.get(k).copied().unwrap_or(0);
        stat += (o as f64 - e).powi(2) / e;
        obs_tail -= o;
        exp_tail -= e;
        cells += 1;
        k += 1;
    }
    stat += (obs_tail as f64 - exp_tail).powi(2) / exp_tail;
    cells += 1;
    (stat, cells.saturating_sub(1).max(1))
}

pub const COUNTERPART_SPECS: usize = 100;
pub const COUNTERPART_SAMPLES: u64 = 100_000;
/// Family-wise level 1% over all specs.
pub const COUNTERPART_ALPHA: f64 = 0.01 / COUNTERPART_SPECS as f64;

fn counterpart_identity() -> Result<Vec<Check>> {
    let mut rng = trial_rng(2024, 0);
    let mut max_err: f64 = 0.0;
    let mut min_p: f64 = 1.0;
    let mut below_one_percent = 0;
    for spec_idx in 0..COUNTERPART_SPECS {
        let spec = random_continuous_spec(&mut rng);
        let model = build_discrete_counterpart(&spec)?;
        let dom = full_domain(&model, BoundaryPolicy::OutsideExtinct)?;
        let m = moment_matrix(&dom);
        for (i, x) in dom.window.sites().iter().enumerate() {
            for (j, y) in dom.window.sites().iter().enumerate() {
                let k = spec.rates.get(&(x.clone(), y.clone())).copied().unwrap_or(0.0);
                let want = spec.lambda * k / spec.death_at(x);
                max_err = max_err.max((m.get(i, j) - want).abs());
            }
        }
        let x = rng.random_range(0..dom.len());
        let kx: f64 = spec.rates.iter().filter(|((a, _), _)| *a == *dom.window.site(x)).map(|(_, k)| k).sum();
        let mean = spec.lambda * kx / spec.death_at(dom.window.site(x));
        let mut counts: Vec<u64> = Vec::new();
        let mut srng = trial_rng(7_000 + spec_idx as u64, 0);
        let start = ParticleConfiguration::single(x);
        for _ in 0..COUNTERPART_SAMPLES {
            let c = step(&dom, &start, &mut srng).total() as usize;
            if c >= counts.len() {
                counts.resize(c + 1, 0);
            }
            counts[c] += 1;
        }
        let (stat, dof) = chi_square_geometric(&counts, mean, COUNTERPART_SAMPLES);
        let chi = ChiSquared::new(dof as f64).map_err(|e| crate::error::Error::Resource(e.to_string()))?;
        let p = 1.0 - chi.cdf(stat);
        min_p = min_p.min(p);
        if p < 0.01 {
            below_one_percent += 1;
        }
    }
    Ok(vec![
        check("specs", COUNTERPART_SPECS, true),
        check("max_moment_error", num(max_err), max_err <= 1e-12),
        check("min_chi2_p", format!("{min_p:.4e}"), min_p >= COUNTERPART_ALPHA),
        check("specs_below_1pct", below_one_percent, true),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_square_of_exact_counts_is_small() {
        let law = CountLaw::Geometric { mean: 1.5 };
        let n = 100_000u64;
        let counts: Vec<u64> = (0..60).map(|k| (n as f64 * law.prob(k)).round() as u64).collect();
        let total: u64 = counts.iter().sum();
        let (stat, dof) = chi_square_geometric(&counts, 1.5, total);
        assert!(stat < 1.0, "{stat}");
        assert!(dof > 5);
    }

    #[test]
    fn filter_selects_by_keyword() {
        let names: Vec<u8> = selected(Some("spataru")).iter().map(|c| c.id).collect();
        assert_eq!(names, vec![3]);
        assert_eq!(selected(None).len(), 7);
    }
}
