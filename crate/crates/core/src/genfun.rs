use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domain::{CompiledLaw, Target, TruncatedDomain, Window};
use crate::error::{invalid, Error, Result};
use crate::site::Site;

/// Windows at least this large are evaluated with rayon.
const PAR_THRESHOLD: usize = 8192;
/// Slack allowed for rounding when asserting monotone iterations.
const MONOTONE_SLACK: f64 = 1e-12;

/// A vector in `[0,1]^window`, ordered like the window.
#[derive(Clone, Debug)]
pub struct SiteVector {
    pub window: Arc<Window>,
    pub values: Vec<f64>,
}

impl SiteVector {
    pub fn constant(window: &Arc<Window>, v: f64) -> SiteVector {
        SiteVector { window: window.clone(), values: vec![v; window.len()] }
    }

    pub fn from_fn(window: &Arc<Window>, f: impl Fn(usize, &Site) -> f64) -> SiteVector {
        let values = window.sites().iter().enumerate().map(|(i, s)| f(i, s)).collect();
        SiteVector { window: window.clone(), values }
    }

    pub fn get(&self, x: &Site) -> Option<f64> {
        self.window.index_of(x).map(|i| self.values[i])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.window.len() {
            return Err(invalid(format!(
                "vector has {} entries, window has {}",
                self.values.len(),
                self.window.len()
            )));
        }
        for (i, v) in self.values.iter().enumerate() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Domain {
                    site: self.window.site(i).to_string(),
                    msg: format!("value {v} outside [0,1]"),
                });
            }
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &SiteVector) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TargetSet {
    All,
    Sites(Vec<Site>),
}

impl TargetSet {
    pub fn single(x: Site) -> TargetSet {
        TargetSet::Sites(vec![x])
    }

    pub(crate) fn resolve(&self, window: &Window) -> Result<Option<Vec<usize>>> {
        match self {
            TargetSet::All => Ok(None),
            TargetSet::Sites(v) => {
                if v.is_empty() {
                    return Err(invalid("target set must be nonempty"));
                }
                let mut idx = Vec::with_capacity(v.len());
                for x in v {
                    idx.push(window.index_of(x).ok_or_else(|| Error::UnknownSite(x.to_string()))?);
                }
                idx.sort_unstable();
                idx.dedup();
                Ok(Some(idx))
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Use model-supplied bounds for sites outside the window instead of the
    /// plain policy values 0 and 1.
    pub certified: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { tol: 1e-10, max_iter: 1_000_000, certified: true }
    }
}

impl SolveOptions {
    pub fn tol(tol: f64) -> SolveOptions {
        SolveOptions { tol, ..Default::default() }
    }

    pub fn uncertified(mut self) -> SolveOptions {
        self.certified = false;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    /// Global extinction probability.
    Global,
    /// Probability of never occupying the target set.
    NeverVisit,
    /// Probability of local extinction in the target set.
    Local,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Lower,
    Upper,
}

/// Two-sided truncation bounds on an extinction vector.
#[derive(Clone, Debug)]
pub struct ExtinctionBracket {
    pub quantity: Quantity,
    pub target: Vec<Site>,
    pub lower: SiteVector,
    pub upper: SiteVector,
    pub radius: usize,
    pub iterations: usize,
    pub residual_lower: f64,
    pub residual_upper: f64,
    pub converged: bool,
    pub certified: bool,
}

impl ExtinctionBracket {
    pub fn residual(&self) -> f64 {
        self.residual_lower.max(self.residual_upper)
    }

    pub fn width(&self) -> f64 {
        self.lower.max_abs_diff(&self.upper)
    }

    pub fn window(&self) -> &Arc<Window> {
        &self.lower.window
    }

    pub fn at(&self, x: &Site) -> Option<(f64, f64)> {
        let i = self.lower.window.index_of(x)?;
        Some((self.lower.values[i], self.upper.values[i]))
    }
}

#[inline]
pub(crate) fn eval_site(law: &CompiledLaw, z: &[f64], b: &[f64]) -> f64 {
    let val = |t: Target| match t {
        Target::In(j) => z[j as usize],
        Target::Out(k) => b[k as usize],
    };
    let g = match law {
        CompiledLaw::General { atoms } => atoms
            .iter()
            .map(|(f, p)| p * f.iter().map(|&(t, k)| val(t).powi(k as i32)).product::<f64>())
            .sum(),
        CompiledLaw::Factored { count, row } => {
            let (s, gap) = row.iter().fold((0.0, 0.0), |(s, g), &(t, w)| {
                let v = val(t);
                (s + w * v, g + w * (1.0 - v))
            });
            count.pgf(s, gap)
        }
    };
    g.clamp(0.0, 1.0)
}

/// Rows of the Jacobian of `G` at `z` with respect to in-window coordinates.
pub(crate) fn jacobian_rows(window: &Window, z: &[f64], b: &[f64]) -> Vec<Vec<(usize, f64)>> {
    let val = |t: Target| match t {
        Target::In(j) => z[j as usize],
        Target::Out(k) => b[k as usize],
    };
    (0..window.len())
        .map(|i| {
            let mut row: Vec<(usize, f64)> = Vec::new();
            match window.compiled(i) {
                CompiledLaw::General { atoms } => {
                    for (f, p) in atoms {
                        for (pos, &(t, k)) in f.iter().enumerate() {
                            let Target::In(j) = t else { continue };
                            let rest: f64 = f
                                .iter()
                                .enumerate()
                                .filter(|(q, _)| *q != pos)
                                .map(|(_, &(u, m))| val(u).powi(m as i32))
                                .product();
                            row.push((j as usize, p * k as f64 * val(t).powi(k as i32 - 1) * rest));
                        }
                    }
                }
                CompiledLaw::Factored { count, row: r } => {
                    let (s, gap) = r.iter().fold((0.0, 0.0), |(s, g), &(t, w)| {
                        let v = val(t);
                        (s + w * v, g + w * (1.0 - v))
                    });
                    let df = count.pgf_derivative(s, gap);
                    for &(t, w) in r {
                        if let Target::In(j) = t {
                            row.push((j as usize, df * w));
                        }
                    }
                }
            }
            row.sort_by_key(|e| e.0);
            row.dedup_by(|a, b| {
                if a.0 == b.0 {
                    b.1 += a.1;
                    true
                } else {
                    false
                }
            });
            row
        })
        .collect()
}

/// One application of `G`, with `zero_on` forcing zeros on a target set.
fn apply(window: &Window, z: &[f64], b: &[f64], zero_on: Option<&[bool]>, out: &mut [f64]) {
    let f = |(i, o): (usize, &mut f64)| {
        *o = match zero_on {
            Some(mask) if mask[i] => 0.0,
            _ => eval_site(window.compiled(i), z, b),
        }
    };
    if window.len() >= PAR_THRESHOLD {
        out.par_iter_mut().enumerate().for_each(f);
    } else {
        out.iter_mut().enumerate().for_each(f);
    }
}

/// `G(z)` with out-of-window factors fixed by the domain's policy.
pub fn eval_g(dom: &TruncatedDomain, z: &SiteVector) -> Result<SiteVector> {
    z.validate()?;
    let b = vec![dom.policy.outside_value(); dom.window.out_sites().len()];
    let mut out = vec![0.0; z.len()];
    apply(&dom.window, &z.values, &b, None, &mut out);
    Ok(SiteVector { window: dom.window.clone(), values: out })
}

/// Out-of-window values used by one side of a bracket.
pub(crate) fn boundary_values(
    window: &Window,
    quantity: Quantity,
    target: &[Site],
    side: Side,
    certified: bool,
) -> Vec<f64> {
    let model = window.model();
    window
        .out_sites()
        .iter()
        .map(|y| {
            let bounds = if !certified {
                crate::model::Bounds::TRIVIAL
            } else {
                match quantity {
                    Quantity::Global => model.extinction_bounds(y),
                    Quantity::NeverVisit | Quantity::Local => model.local_bounds(y, target),
                }
            };
            match side {
                Side::Lower => bounds.lo,
                Side::Upper => bounds.hi,
            }
        })
        .collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Up,
    Down,
}

struct Run {
    values: Vec<f64>,
    iterations: usize,
    converged: bool,
}

fn iterate(
    window: &Window,
    b: &[f64],
    start: Vec<f64>,
    zero_on: Option<&[bool]>,
    dir: Direction,
    slack: f64,
    opts: &SolveOptions,
) -> Result<Run> {
    if !(opts.tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    let mut z = start;
    let mut next = vec![0.0; z.len()];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        apply(window, &z, b, zero_on, &mut next);
        iterations += 1;
        let mut step = 0.0f64;
        for (i, (&a, &c)) in z.iter().zip(&next).enumerate() {
            let d = c - a;
            let bad = match dir {
                Direction::Up => d < -slack,
                Direction::Down => d > slack,
            };
            if bad {
                return Err(Error::Domain {
                    site: window.site(i).to_string(),
                    msg: format!("monotone iteration violated by {d:e} at step {iterations}"),
                });
            }
            step = step.max(d.abs());
        }
        std::mem::swap(&mut z, &mut next);
        if step < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(Run { values: z, iterations, converged })
}

fn mask_for(window: &Window, idx: &[usize]) -> Vec<bool> {
    let mut m = vec![false; window.len()];
    for &i in idx {
        m[i] = true;
    }
    m
}

/// Maximum of `|F(z) - z|` for the map iterated by the solver of `quantity`.
pub fn bracket_residual(
    dom: &TruncatedDomain,
    quantity: Quantity,
    target: &[Site],
    side: Side,
    certified: bool,
    values: &[f64],
) -> Result<f64> {
    let window = &dom.window;
    let b = boundary_values(window, quantity, target, side, certified);
    let mask = match quantity {
        Quantity::NeverVisit => {
            Some(mask_for(window, &TargetSet::Sites(target.to_vec()).resolve(window)?.unwrap_or_default()))
        }
        _ => None,
    };
    let mut out = vec![0.0; values.len()];
    apply(window, values, &b, mask.as_deref(), &mut out);
    Ok(out.iter().zip(values).map(|(a, v)| (a - v).abs()).fold(0.0, f64::max))
}

fn bracket(
    dom: &TruncatedDomain,
    quantity: Quantity,
    target: Vec<Site>,
    lower: Run,
    upper: Run,
    opts: &SolveOptions,
) -> Result<ExtinctionBracket> {
    let w = &dom.window;
    let residual_lower = bracket_residual(dom, quantity, &target, Side::Lower, opts.certified, &lower.values)?;
    let residual_upper = bracket_residual(dom, quantity, &target, Side::Upper, opts.certified, &upper.values)?;
    Ok(ExtinctionBracket {
        quantity,
        target,
        radius: w.radius(),
        iterations: lower.iterations.max(upper.iterations),
        converged: lower.converged && upper.converged,
        lower: SiteVector { window: w.clone(), values: lower.values },
        upper: SiteVector { window: w.clone(), values: upper.values },
        residual_lower,
        residual_upper,
        certified: opts.certified,
    })
}

/// Smallest fixed point of `G` from both truncation policies.
pub fn solve_global_extinction(dom: &TruncatedDomain, opts: &SolveOptions) -> Result<ExtinctionBracket> {
    let w = &dom.window;
    let run = |side| {
        let b = boundary_values(w, Quantity::Global, &[], side, opts.certified);
        iterate(w, &b, vec![0.0; w.len()], None, Direction::Up, MONOTONE_SLACK, opts)
    };
    let lower = run(Side::Lower)?;
    let upper = run(Side::Upper)?;
    bracket(dom, Quantity::Global, Vec::new(), lower, upper, opts)
}

fn target_sites(window: &Window, idx: &[usize]) -> Vec<Site> {
    idx.iter().map(|&i| window.site(i).clone()).collect()
}

fn never_visit_run(window: &Window, idx: &[usize], target: &[Site], side: Side, opts: &SolveOptions) -> Result<Run> {
    let b = boundary_values(window, Quantity::NeverVisit, target, side, opts.certified);
    let mask = mask_for(window, idx);
    let start = mask.iter().map(|&a| if a { 0.0 } else { 1.0 }).collect();
    iterate(window, &b, start, Some(&mask), Direction::Down, MONOTONE_SLACK, opts)
}

/// Probability that the progeny never occupies the target set.
pub fn solve_never_visit(dom: &TruncatedDomain, target: &TargetSet, opts: &SolveOptions) -> Result<ExtinctionBracket> {
    let w = &dom.window;
    let idx = target
        .resolve(w)?
        .ok_or_else(|| invalid("never-visit probabilities need a finite target set"))?;
    let sites = target_sites(w, &idx);
    let lower = never_visit_run(w, &idx, &sites, Side::Lower, opts)?;
    let upper = never_visit_run(w, &idx, &sites, Side::Upper, opts)?;
    bracket(dom, Quantity::NeverVisit, sites, lower, upper, opts)
}

/// Local extinction probabilities together with the never-visit bracket used
/// to seed them.
pub fn solve_local_with_seed(
    dom: &TruncatedDomain,
    target: &TargetSet,
    opts: &SolveOptions,
) -> Result<(ExtinctionBracket, ExtinctionBracket)> {
    let w = &dom.window;
    let idx = match target.resolve(w)? {
        Some(idx) => idx,
        None => {
            let g = solve_global_extinction(dom, opts)?;
            return Ok((g.clone(), g));
        }
    };
    let sites = target_sites(w, &idx);
    let mut runs = Vec::with_capacity(2);
    let mut seeds = Vec::with_capacity(2);
    for side in [Side::Lower, Side::Upper] {
        let seed = never_visit_run(w, &idx, &sites, side, opts)?;
        let b = boundary_values(w, Quantity::Local, &sites, side, opts.certified);
        // The seed is a fixed point only up to the stopping tolerance, so the
        // first steps may dip by about that much. An unconverged seed gives
        // no monotonicity at all; the run is then reported as unconverged.
        let slack = if seed.converged { MONOTONE_SLACK.max(1e3 * opts.tol) } else { f64::INFINITY };
        let mut run = iterate(w, &b, seed.values.clone(), None, Direction::Up, slack, opts)?;
        run.iterations += seed.iterations;
        run.converged &= seed.converged;
        runs.push(run);
        seeds.push(seed);
    }
    let upper = runs.pop().unwrap();
    let lower = runs.pop().unwrap();
    let local = bracket(dom, Quantity::Local, sites.clone(), lower, upper, opts)?;
    let su = seeds.pop().unwrap();
    let sl = seeds.pop().unwrap();
    let never = bracket(dom, Quantity::NeverVisit, sites, sl, su, opts)?;
    Ok((local, never))
}

/// Probability of local extinction in the target set.
pub fn solve_local_extinction(dom: &TruncatedDomain, target: &TargetSet, opts: &SolveOptions) -> Result<ExtinctionBracket> {
    Ok(solve_local_with_seed(dom, target, opts)?.0)
}

/// Evaluator of the no-death generating function `T^-1 ∘ G ∘ T` built from
/// a global extinction vector.
#[derive(Clone, Debug)]
pub struct NoDeath {
    pub dom: TruncatedDomain,
    pub qbar: SiteVector,
}

pub fn no_death_transform(dom: &TruncatedDomain, qbar: &SiteVector) -> Result<NoDeath> {
    qbar.validate()?;
    if let Some(i) = qbar.values.iter().position(|&q| q >= 1.0) {
        return Err(Error::Domain {
            site: qbar.window.site(i).to_string(),
            msg: "extinction probability equals 1; the no-death transform is undefined".into(),
        });
    }
    Ok(NoDeath { dom: dom.clone(), qbar: qbar.clone() })
}

impl NoDeath {
    /// `T(z) = z (1 - qbar) + qbar`.
    pub fn t(&self, z: &SiteVector) -> SiteVector {
        let values = z.values.iter().zip(&self.qbar.values).map(|(z, q)| z * (1.0 - q) + q).collect();
        SiteVector { window: z.window.clone(), values }
    }

    /// `T^-1(z) = (z - qbar) / (1 - qbar)`.
    pub fn t_inv(&self, z: &SiteVector) -> SiteVector {
        let values = z.values.iter().zip(&self.qbar.values).map(|(z, q)| (z - q) / (1.0 - q)).collect();
        SiteVector { window: z.window.clone(), values }
    }

    pub fn eval(&self, z: &SiteVector) -> Result<SiteVector> {
        let g = eval_g(&self.dom, &self.t(z))?;
        Ok(self.t_inv(&g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    All,
    /// Only sites whose children all land inside the window.
    Interior,
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPointReport {
    /// `max |G(z) - z|`.
    pub residual: f64,
    /// `max (z - G(z))_+`, zero when `G(z) >= z`.
    pub deficit: f64,
    pub residual_site: Option<String>,
    pub deficit_site: Option<String>,
    pub sites_checked: usize,
}

impl FixedPointReport {
    pub fn is_fixed_point(&self, tol: f64) -> bool {
        self.residual <= tol
    }

    pub fn is_supersolution(&self, tol: f64) -> bool {
        self.deficit <= tol
    }
}

pub fn verify_fixed_point(dom: &TruncatedDomain, z: &SiteVector, scope: Scope) -> Result<FixedPointReport> {
    let g = eval_g(dom, z)?;
    let w = &dom.window;
    let mut rep = FixedPointReport {
        residual: 0.0,
        deficit: 0.0,
        residual_site: None,
        deficit_site: None,
        sites_checked: 0,
    };
    for i in 0..w.len() {
        if scope == Scope::Interior && !w.is_interior(i) {
            continue;
        }
        rep.sites_checked += 1;
        let d = g.values[i] - z.values[i];
        if d.abs() > rep.residual || rep.residual_site.is_none() {
            rep.residual = d.abs();
            rep.residual_site = Some(w.site(i).to_string());
        }
        if -d > rep.deficit {
            rep.deficit = -d;
            rep.deficit_site = Some(w.site(i).to_string());
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{full_domain, truncate, BoundaryPolicy};
    use crate::law::{CountLaw, SiteLaw};
    use crate::model::{BrwModel, FiniteModel};

    fn gw(count: CountLaw) -> BrwModel {
        let x = Site::named("x");
        let law = SiteLaw::factored(count, vec![(x.clone(), 1.0)]);
        BrwModel::new(FiniteModel::new("gw", vec![x.clone()], vec![(x, law)]).unwrap())
    }

    fn dom(m: &BrwModel) -> TruncatedDomain {
        full_domain(m, BoundaryPolicy::OutsideExtinct).unwrap()
    }

    #[test]
    fn gw_third_is_fixed() {
        let m = gw(CountLaw::Pmf(vec![0.25, 0.0, 0.75]));
        let d = dom(&m);
        let z = SiteVector::constant(&d.window, 1.0 / 3.0);
        let g = eval_g(&d, &z).unwrap();
        assert!((g.values[0] - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn geometric_closed_form_at_zero() {
        let m = gw(CountLaw::Geometric { mean: 2.0 });
        let d = dom(&m);
        let g = eval_g(&d, &SiteVector::constant(&d.window, 0.0)).unwrap();
        assert!((g.values[0] - 1.0 / 3.0).abs() < 1e-16);
    }

    #[test]
    fn out_of_range_input_is_rejected() {
        let m = gw(CountLaw::Geometric { mean: 2.0 });
        let d = dom(&m);
        assert!(eval_g(&d, &SiteVector::constant(&d.window, 1.5)).is_err());
    }

    #[test]
    fn subcritical_geometric_dies() {
        let m = gw(CountLaw::Geometric { mean: 0.5 });
        let b = solve_global_extinction(&dom(&m), &SolveOptions::default()).unwrap();
        assert!(b.converged);
        assert!((b.lower.values[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn no_death_rejects_sure_extinction() {
        let m = gw(CountLaw::Geometric { mean: 0.5 });
        let d = dom(&m);
        assert!(no_death_transform(&d, &SiteVector::constant(&d.window, 1.0)).is_err());
    }

    #[test]
    fn target_outside_window_is_an_error() {
        let m = gw(CountLaw::Geometric { mean: 2.0 });
        let d = truncate(&m, &Site::named("x"), 0, BoundaryPolicy::OutsideExtinct).unwrap();
        let err = solve_never_visit(&d, &TargetSet::single(Site::named("nope")), &SolveOptions::default());
        assert!(err.is_err());
    }
}
