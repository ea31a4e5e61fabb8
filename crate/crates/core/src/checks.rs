//! Executable checks of structural properties, run on solver outputs.

use rand::Rng;
use serde::Serialize;

use crate::domain::{full_domain, irreducible_classes, moment_matrix, BoundaryPolicy, TruncatedDomain};
use crate::error::{invalid, Error, Result};
use crate::genfun::{
    boundary_values, eval_g, jacobian_rows, Quantity, Side, solve_global_extinction, solve_local_with_seed, verify_fixed_point, ExtinctionBracket, Scope,
    SiteVector, SolveOptions, TargetSet,
};
use crate::law::SiteLaw;
use crate::model::BrwModel;
use crate::montecarlo::trial_rng;
use crate::site::Site;
use crate::spectral::perron_root_rows;

pub const DEFAULT_CHECK_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Pass,
    Fail,
    Undecided,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Strong,
    NonStrong,
    NoSurvival,
    Undecided,
}

#[derive(Clone, Debug, Serialize)]
pub struct Witness {
    pub site: String,
    pub values: Vec<(String, f64)>,
}

impl Witness {
    fn new(site: &Site, values: &[(&str, f64)]) -> Witness {
        Witness { site: site.to_string(), values: values.iter().map(|(k, v)| (k.to_string(), *v)).collect() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    pub witnesses: Vec<Witness>,
    pub tolerance_used: f64,
    pub notes: Vec<String>,
}

impl CheckReport {
    pub fn new(name: &str, tol: f64) -> CheckReport {
        CheckReport {
            name: name.to_string(),
            outcome: Outcome::Pass,
            verdict: None,
            witnesses: Vec::new(),
            tolerance_used: tol,
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.outcome == Outcome::Pass
    }
}

/// `(z - qbar)/(1 - qbar)`, set to 1 where `qbar` is 1.
pub fn normalise(z: &SiteVector, qbar: &SiteVector) -> Vec<f64> {
    z.values
        .iter()
        .zip(&qbar.values)
        .map(|(z, q)| if *q >= 1.0 { 1.0 } else { (z - q) / (1.0 - q) })
        .collect()
}

/// No strict local maximum of the normalised vector over neighbourhoods,
/// and value 1 propagates to every neighbour. Needs `z >= qbar` and
/// `G(z) >= z`; only sites whose children all land in the window are
/// checked, and there any window fixed point can play the role of `qbar`.
pub fn max_principle_check(dom: &TruncatedDomain, z: &SiteVector, qbar: &SiteVector, tol: f64) -> Result<CheckReport> {
    let mut rep = CheckReport::new("max-principle", tol);
    let fp = verify_fixed_point(dom, z, Scope::Interior)?;
    if fp.deficit > tol {
        rep.outcome = Outcome::Fail;
        rep.notes.push(format!("precondition G(z) >= z - tol fails: deficit {:e}", fp.deficit));
        return Ok(rep);
    }
    let w = &dom.window;
    if let Some(x) = (0..w.len()).find(|&x| z.values[x] < qbar.values[x] - tol) {
        rep.outcome = Outcome::Fail;
        rep.notes.push(format!("precondition z >= qbar fails at {}", w.site(x)));
        return Ok(rep);
    }
    let zh = normalise(z, qbar);
    for x in 0..w.len() {
        if !w.is_interior(x) {
            continue;
        }
        let nb = w.neighbours(x);
        if nb.is_empty() {
            continue;
        }
        let best = nb.iter().map(|&y| zh[y]).fold(f64::MIN, f64::max);
        if best < zh[x] - tol {
            rep.outcome = Outcome::Fail;
            rep.witnesses.push(Witness::new(w.site(x), &[("z_hat", zh[x]), ("max_nbr", best)]));
        }
        // 1 - z(x) >= 1 - G(z)(x) >= P(some child at y) (1 - z(y)), the
        // quantitative form of "value 1 propagates to neighbours".
        let law = w.law(x);
        for &y in &nb {
            let reach = prob_some_child_at(law, w.site(y));
            let (gx, gy) = (1.0 - z.values[x], 1.0 - z.values[y]);
            if reach * gy > gx + tol {
                rep.outcome = Outcome::Fail;
                rep.witnesses.push(Witness::new(
                    w.site(x),
                    &[("gap", gx), ("nbr_gap", gy), ("reach", reach)],
                ));
                break;
            }
        }
    }
    Ok(rep)
}

/// Probability that at least one child lands at `y`.
pub fn prob_some_child_at(law: &SiteLaw, y: &Site) -> f64 {
    match law {
        SiteLaw::General(g) => g
            .atoms
            .iter()
            .filter(|a| a.offspring.iter().any(|(s, k)| s == y && *k > 0))
            .map(|a| a.p)
            .sum(),
        SiteLaw::Factored(f) => {
            let p: f64 = f.diffusion.iter().filter(|(s, _)| s == y).map(|(_, p)| p).sum();
            1.0 - f.count.pgf(1.0 - p, p)
        }
    }
}

/// Strong local survival test on brackets.
pub fn strong_local_test(dom: &TruncatedDomain, target: &TargetSet, tol: f64, opts: &SolveOptions) -> Result<CheckReport> {
    let sopts = SolveOptions { tol: opts.tol.min(tol * 1e-2), ..opts.clone() };
    let qbar = solve_global_extinction(dom, &sopts)?;
    let (local, never) = solve_local_with_seed(dom, target, &sopts)?;
    Ok(strong_local_verdict(dom, &qbar, &never, &local, tol))
}

fn width(b: &ExtinctionBracket) -> f64 {
    b.width()
}

/// Verdict from precomputed brackets of `qbar`, `q_0(., A)` and `q(., A)`.
pub fn strong_local_verdict(
    dom: &TruncatedDomain,
    qbar: &ExtinctionBracket,
    never: &ExtinctionBracket,
    local: &ExtinctionBracket,
    tol: f64,
) -> CheckReport {
    let mut rep = CheckReport::new("strong-local", tol);
    let w = &dom.window;
    let n = w.len();
    let set = |rep: &mut CheckReport, v: Verdict| {
        rep.verdict = Some(v);
        rep.outcome = if v == Verdict::Undecided { Outcome::Undecided } else { Outcome::Pass };
    };
    if !(qbar.converged && never.converged && local.converged) {
        rep.notes.push("a solver run did not converge".into());
        set(&mut rep, Verdict::Undecided);
        return rep;
    }
    let (ql, qu) = (&qbar.lower.values, &qbar.upper.values);
    let (nl, nu) = (&never.lower.values, &never.upper.values);
    let (ll, lu) = (&local.lower.values, &local.upper.values);

    if ql.iter().all(|&q| q >= 1.0 - tol) {
        set(&mut rep, Verdict::NoSurvival);
        return rep;
    }
    for x in 0..n {
        if qu[x] < 1.0 && (nl[x] > qu[x] + tol || ll[x] > qu[x] + tol) {
            rep.witnesses.push(Witness::new(
                w.site(x),
                &[("qbar_upper", qu[x]), ("q0_lower", nl[x]), ("q_lower", ll[x])],
            ));
        }
    }
    if !rep.witnesses.is_empty() {
        rep.witnesses.truncate(10);
        set(&mut rep, Verdict::NonStrong);
        return rep;
    }
    let pointwise = (0..n).all(|x| nu[x] <= ql[x] + tol) && ql.iter().any(|&q| q < 1.0);
    if pointwise {
        rep.notes.push("q0 upper bound below qbar lower bound at every site".into());
        set(&mut rep, Verdict::Strong);
        return rep;
    }
    // When survival forces visits to A, local and global extinction agree
    // outside the window, and by convexity `q - qbar <= J (q - qbar)` on the
    // window with `J` the Jacobian at the upper bracket. A spectral radius
    // below 1 then forces `q = qbar`.
    if dom.model().survival_forces_visits(&local.target) {
        let b = boundary_values(w, Quantity::Local, &local.target, Side::Upper, local.certified);
        let rho = perron_root_rows(&jacobian_rows(w, lu, &b)).upper;
        rep.notes.push(format!("survival forces visits to A; Jacobian spectral radius at the upper bracket {rho:.6}"));
        if rho < 1.0 && ql.iter().any(|&q| q < 1.0) {
            set(&mut rep, Verdict::Strong);
            return rep;
        }
    }
    // Under irreducibility with positive death probability, strong local
    // survival at one site transfers to all sites.
    let irreducible = irreducible_classes(&moment_matrix(dom)).is_irreducible();
    let deaths = (0..n).all(|x| w.law(x).prob_childless() > 0.0);
    if irreducible && deaths {
        if let Some(x) = (0..n).find(|&x| lu[x] <= ql[x] + tol && qu[x] < 1.0) {
            rep.notes.push(format!("q(., A) meets qbar at {} and the window is irreducible with deaths", w.site(x)));
            rep.witnesses.push(Witness::new(w.site(x), &[("q_upper", lu[x]), ("qbar_lower", ql[x])]));
            set(&mut rep, Verdict::Strong);
            return rep;
        }
    }
    rep.notes.push(format!(
        "bracket widths: qbar {:e}, q0 {:e}, q {:e}",
        width(qbar),
        width(never),
        width(local)
    ));
    set(&mut rep, Verdict::Undecided);
    rep
}

/// Witness check for the absence of strong local survival.
pub fn mv_witness_verify(
    dom: &TruncatedDomain,
    target: &[Site],
    v: &SiteVector,
    qbar: &SiteVector,
    x0: &[Site],
    tol: f64,
) -> Result<CheckReport> {
    let mut rep = CheckReport::new("mv-witness", tol);
    let w = &dom.window;
    if target.is_empty() || x0.is_empty() {
        return Err(invalid("target set and witness sites must be nonempty"));
    }
    let idx = |s: &Site| w.index_of(s).ok_or_else(|| Error::UnknownSite(s.to_string()));
    let a: Vec<usize> = target.iter().map(idx).collect::<Result<_>>()?;
    let xs: Vec<usize> = x0.iter().map(idx).collect::<Result<_>>()?;
    if let Some(x) = xs.iter().find(|x| a.contains(x)) {
        return Err(invalid(format!("witness site {} lies in the target set", w.site(*x))));
    }
    if let Some(x) = (0..w.len()).find(|&x| v.values[x] < qbar.values[x] - tol) {
        rep.outcome = Outcome::Fail;
        rep.notes.push(format!("precondition v >= qbar fails at {}", w.site(x)));
        return Ok(rep);
    }
    let g = eval_g(dom, v)?;
    for x in 0..w.len() {
        if a.contains(&x) || !w.is_interior(x) {
            continue;
        }
        if g.values[x] < v.values[x] - tol {
            rep.outcome = Outcome::Fail;
            rep.witnesses.push(Witness::new(w.site(x), &[("G(v)", g.values[x]), ("v", v.values[x])]));
        }
    }
    let t = normalise(v, qbar);
    let outside = xs.iter().map(|&x| t[x]).fold(f64::MIN, f64::max);
    let inside = a.iter().map(|&x| t[x]).fold(f64::MIN, f64::max);
    if outside <= inside + tol {
        rep.outcome = Outcome::Fail;
        rep.notes.push(format!("max over witnesses {outside} does not exceed max over target {inside}"));
    } else {
        rep.notes.push(format!("max over witnesses {outside} exceeds max over target {inside}"));
    }
    Ok(rep)
}

/// Strict convexity condition of the generating function at a site along
/// direction `v` from `z`: some atom with positive mass puts at least two
/// children on `supp v` and all its children on `supp z` or `supp v`.
pub fn convexity_condition(law: &SiteLaw, z: &SiteVector, v: &SiteVector) -> bool {
    let in_supp = |s: &SiteVector, y: &Site| s.get(y).is_some_and(|x| x > 0.0);
    law.to_atoms(1.0 - 1e-14).iter().any(|atom| {
        atom.p > 0.0
            && atom.offspring.iter().filter(|(y, _)| in_supp(v, y)).map(|(_, k)| *k as u64).sum::<u64>() >= 2
            && atom.offspring.iter().all(|(y, k)| *k == 0 || in_supp(z, y) || in_supp(v, y))
    })
}

/// Iterates `G` from random starting points above `qbar` on a finite
/// irreducible model; passes when every limit is `qbar` or 1.
pub fn finite_two_fixed_points(model: &BrwModel, probes: usize, seed: u64, tol: f64) -> Result<CheckReport> {
    let dom = full_domain(model, BoundaryPolicy::OutsideExtinct)?;
    if !irreducible_classes(&moment_matrix(&dom)).is_irreducible() {
        return Err(invalid(format!("model '{}' is not irreducible", model.name())));
    }
    let mut rep = CheckReport::new("finite-two-fixed-points", tol);
    let qbar = solve_global_extinction(&dom, &SolveOptions::tol(1e-14))?.lower;
    let mut rng = trial_rng(seed, u64::MAX);
    let mut limits: Vec<f64> = Vec::new();
    for k in 0..probes {
        let values = qbar.values.iter().map(|q| q + rng.random::<f64>() * (1.0 - q)).collect();
        let mut z = SiteVector { window: dom.window.clone(), values };
        let mut converged = false;
        for _ in 0..1_000_000 {
            let next = eval_g(&dom, &z)?;
            let step = next.max_abs_diff(&z);
            z = next;
            if step < 1e-14 {
                converged = true;
                break;
            }
        }
        let to_q = z.max_abs_diff(&qbar);
        let to_one = z.values.iter().map(|v| (1.0 - v).abs()).fold(0.0, f64::max);
        let start = w_site(&dom, 0);
        if !converged {
            rep.outcome = Outcome::Undecided;
            rep.notes.push(format!("probe {k} did not converge"));
        } else if to_q > tol && to_one > tol {
            rep.outcome = Outcome::Fail;
            rep.witnesses.push(Witness::new(&start, &[("probe", k as f64), ("limit", z.values[0])]));
        }
        limits.push(z.values[0]);
    }
    limits.sort_by(f64::total_cmp);
    limits.dedup_by(|a, b| (*a - *b).abs() <= tol);
    rep.notes.push(format!("distinct limits at the root: {limits:?}"));
    Ok(rep)
}

fn w_site(dom: &TruncatedDomain, i: usize) -> Site {
    dom.window.site(i).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{gw_law, two_site_cubic, GW_DEFAULT};
    use crate::law::CountLaw;

    #[test]
    fn gw_and_cubic_have_two_fixed_points() {
        let gw = gw_law(CountLaw::Pmf(GW_DEFAULT.to_vec())).unwrap().model;
        assert!(finite_two_fixed_points(&gw, 20, 1, 1e-8).unwrap().passed());
        assert!(finite_two_fixed_points(&two_site_cubic().unwrap(), 20, 1, 1e-8).unwrap().passed());
    }

    #[test]
    fn single_child_atoms_are_never_strictly_convex() {
        let (a, b) = (Site::named("a"), Site::named("b"));
        let law = SiteLaw::factored(CountLaw::dirac(1), vec![(a.clone(), 0.5), (b.clone(), 0.5)]);
        let m = BrwModel::new(
            crate::model::FiniteModel::new(
                "m",
                vec![a.clone(), b.clone()],
                vec![(a.clone(), law.clone()), (b.clone(), law.clone())],
            )
            .unwrap(),
        );
        let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
        let one = SiteVector::constant(&dom.window, 1.0);
        assert!(!convexity_condition(&law, &one, &one));
    }
}
