use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, Error, Result};
use crate::law::{CountLaw, SiteLaw};
use crate::site::Site;

/// Interval known to contain an extinction probability at a site outside a
/// truncation window. The default `[0, 1]` carries no information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl Bounds {
    pub const TRIVIAL: Bounds = Bounds { lo: 0.0, hi: 1.0 };

    pub fn new(lo: f64, hi: f64) -> Bounds {
        Bounds { lo: lo.clamp(0.0, 1.0), hi: hi.clamp(0.0, 1.0) }
    }
}

/// Distance-from-root projection of edge-breeding on `T_d` with an optional
/// loop of rate `root_loop` at the root. Rates are per unit of `lambda`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialChain {
    pub degree: usize,
    pub root_loop: f64,
}

/// Backing store of a model: either an explicit finite site list or a
/// generator that expands neighbourhoods on demand.
pub trait SiteSource: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    fn root(&self) -> Site;

    fn law(&self, x: &Site) -> Result<SiteLaw>;

    /// All sites, for explicit finite models.
    fn finite_sites(&self) -> Option<Vec<Site>> {
        None
    }

    /// Reproduction parameter when the model is the counterpart of a
    /// continuous-time process.
    fn lambda(&self) -> Option<f64> {
        None
    }

    /// Radial structure when the model is edge-breeding on the homogeneous
    /// tree `T_d` seen from its root, so radial projections apply.
    fn radial(&self) -> Option<RadialChain> {
        None
    }

    /// Rigorous bounds on the global extinction probability from `outside`.
    fn extinction_bounds(&self, _outside: &Site) -> Bounds {
        Bounds::TRIVIAL
    }

    /// Rigorous bounds for the target set `target`: `lo` bounds the
    /// never-visit probability from below and `hi` bounds the local
    /// extinction probability from above.
    fn local_bounds(&self, _outside: &Site, _target: &[Site]) -> Bounds {
        Bounds::TRIVIAL
    }

    /// True when, from every site, global survival forces infinitely many
    /// visits to `target`, so local and global extinction coincide.
    fn survival_forces_visits(&self, _target: &[Site]) -> bool {
        false
    }
}

/// A branching random walk: a site set together with one offspring law per site.
#[derive(Clone)]
pub struct BrwModel {
    source: Arc<dyn SiteSource>,
}

impl fmt::Debug for BrwModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BrwModel").field("name", &self.source.name()).finish()
    }
}

impl BrwModel {
    pub fn new(source: impl SiteSource + 'static) -> BrwModel {
        BrwModel { source: Arc::new(source) }
    }

    pub fn name(&self) -> String {
        self.source.name()
    }

    pub fn root(&self) -> Site {
        self.source.root()
    }

    pub fn law(&self, x: &Site) -> Result<SiteLaw> {
        self.source.law(x)
    }

    pub fn finite_sites(&self) -> Option<Vec<Site>> {
        self.source.finite_sites()
    }

    pub fn is_finite(&self) -> bool {
        self.source.finite_sites().is_some()
    }

    pub fn lambda(&self) -> Option<f64> {
        self.source.lambda()
    }

    pub fn radial(&self) -> Option<RadialChain> {
        self.source.radial()
    }

    pub fn extinction_bounds(&self, outside: &Site) -> Bounds {
        self.source.extinction_bounds(outside)
    }

    pub fn survival_forces_visits(&self, target: &[Site]) -> bool {
        self.source.survival_forces_visits(target)
    }

    pub fn local_bounds(&self, outside: &Site, target: &[Site]) -> Bounds {
        self.source.local_bounds(outside, target)
    }
}

/// Explicit finite model.
#[derive(Clone, Debug)]
pub struct FiniteModel {
    name: String,
    root: Site,
    sites: Vec<Site>,
    laws: HashMap<Site, SiteLaw>,
    lambda: Option<f64>,
}

impl FiniteModel {
    pub fn new(name: impl Into<String>, sites: Vec<Site>, laws: Vec<(Site, SiteLaw)>) -> Result<FiniteModel> {
        if sites.is_empty() {
            return Err(invalid("finite model without sites"));
        }
        let mut seen = std::collections::HashSet::new();
        for s in &sites {
            if !seen.insert(s.clone()) {
                return Err(invalid(format!("duplicate site key '{s}'")));
            }
        }
        let mut map = HashMap::new();
        for (x, law) in laws {
            if !seen.contains(&x) {
                return Err(Error::UnknownSite(x.to_string()));
            }
            law.validate().map_err(|e| invalid(format!("law at '{x}': {e}")))?;
            for y in law.support() {
                if !seen.contains(&y) {
                    return Err(invalid(format!("law at '{x}' sends children to unknown site '{y}'")));
                }
            }
            if map.insert(x.clone(), law).is_some() {
                return Err(invalid(format!("two laws given for site '{x}'")));
            }
        }
        for s in &sites {
            if !map.contains_key(s) {
                return Err(invalid(format!("no law given for site '{s}'")));
            }
        }
        Ok(FiniteModel { name: name.into(), root: sites[0].clone(), sites, laws: map, lambda: None })
    }

    pub fn with_root(mut self, root: Site) -> Result<FiniteModel> {
        if !self.laws.contains_key(&root) {
            return Err(Error::UnknownSite(root.to_string()));
        }
        self.root = root;
        Ok(self)
    }

    pub(crate) fn with_lambda(mut self, lambda: f64) -> FiniteModel {
        self.lambda = Some(lambda);
        self
    }
}

impl SiteSource for FiniteModel {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn root(&self) -> Site {
        self.root.clone()
    }

    fn law(&self, x: &Site) -> Result<SiteLaw> {
        self.laws.get(x).cloned().ok_or_else(|| Error::UnknownSite(x.to_string()))
    }

    fn finite_sites(&self) -> Option<Vec<Site>> {
        Some(self.sites.clone())
    }

    fn lambda(&self) -> Option<f64> {
        self.lambda
    }
}

/// Continuous-time model description: each particle at `x` dies at rate `d(x)`
/// and sends a child to `y` at rate `lambda * k_xy`.
#[derive(Clone, Debug)]
pub struct ContinuousSpec {
    pub sites: Vec<Site>,
    pub rates: BTreeMap<(Site, Site), f64>,
    pub lambda: f64,
    /// Death rates; missing sites default to 1.
    pub death: BTreeMap<Site, f64>,
}

impl ContinuousSpec {
    pub fn death_at(&self, x: &Site) -> f64 {
        self.death.get(x).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        let known: std::collections::HashSet<&Site> = self.sites.iter().collect();
        for ((x, y), k) in &self.rates {
            if !(k.is_finite() && *k >= 0.0) {
                return Err(invalid(format!("rate {x}->{y} must be finite and nonnegative, got {k}")));
            }
            if !known.contains(x) || !known.contains(y) {
                return Err(invalid(format!("rate {x}->{y} refers to an unknown site")));
            }
        }
        for (x, d) in &self.death {
            if !(d.is_finite() && *d > 0.0) {
                return Err(invalid(format!("death rate at {x} must be positive, got {d}")));
            }
        }
        Ok(())
    }
}

/// Discrete-time counterpart law at one site, from its rate row.
///
/// The number of children is geometric with mean `lambda k(x) / d(x)` and each
/// child goes to `y` with probability `k_xy / k(x)`.
pub fn counterpart_law(row: &[(Site, f64)], lambda: f64, death: f64) -> Result<SiteLaw> {
    if !(lambda.is_finite() && lambda > 0.0) {
        return Err(invalid(format!("lambda must be positive, got {lambda}")));
    }
    if !(death.is_finite() && death > 0.0) {
        return Err(invalid(format!("death rate must be positive, got {death}")));
    }
    if row.iter().any(|(_, k)| !(k.is_finite() && *k >= 0.0)) {
        return Err(invalid("negative or non-finite rate"));
    }
    let k: f64 = row.iter().map(|(_, k)| k).sum();
    if k == 0.0 {
        return Ok(SiteLaw::childless());
    }
    let diffusion = row.iter().filter(|(_, v)| *v > 0.0).map(|(y, v)| (y.clone(), v / k)).collect();
    Ok(SiteLaw::factored(CountLaw::Geometric { mean: lambda * k / death }, diffusion))
}

pub fn build_discrete_counterpart(spec: &ContinuousSpec) -> Result<BrwModel> {
    Ok(BrwModel::new(counterpart_finite(spec)?))
}

pub(crate) fn counterpart_finite(spec: &ContinuousSpec) -> Result<FiniteModel> {
    spec.validate()?;
    let mut rows: BTreeMap<&Site, Vec<(Site, f64)>> = BTreeMap::new();
    for ((x, y), k) in &spec.rates {
        rows.entry(x).or_default().push((y.clone(), *k));
    }
    let mut laws = Vec::with_capacity(spec.sites.len());
    for x in &spec.sites {
        let row = rows.get(x).map(|r| r.as_slice()).unwrap_or(&[]);
        laws.push((x.clone(), counterpart_law(row, spec.lambda, spec.death_at(x))?));
    }
    Ok(FiniteModel::new("continuous", spec.sites.clone(), laws)?.with_lambda(spec.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> Site {
        Site::named(s)
    }

    #[test]
    fn single_site_counterpart_is_geometric() {
        let mut rates = BTreeMap::new();
        rates.insert((n("x"), n("x")), 1.0);
        let spec = ContinuousSpec { sites: vec![n("x")], rates, lambda: 2.0, death: BTreeMap::new() };
        let m = build_discrete_counterpart(&spec).unwrap();
        let SiteLaw::Factored(f) = m.law(&n("x")).unwrap() else { panic!("factored law expected") };
        assert_eq!(f.count, CountLaw::Geometric { mean: 2.0 });
        assert!((f.count.prob(0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((f.count.prob(3) - (1.0 / 3.0) * (8.0 / 27.0)).abs() < 1e-15);
        assert_eq!(f.diffusion, vec![(n("x"), 1.0)]);
    }

    #[test]
    fn death_rate_normalisation() {
        let mut rates = BTreeMap::new();
        rates.insert((n("x"), n("y")), 3.0);
        rates.insert((n("x"), n("z")), 1.0);
        let mut death = BTreeMap::new();
        death.insert(n("x"), 2.0);
        let spec = ContinuousSpec { sites: vec![n("x"), n("y"), n("z")], rates, lambda: 1.0, death };
        let m = build_discrete_counterpart(&spec).unwrap();
        let SiteLaw::Factored(f) = m.law(&n("x")).unwrap() else { panic!() };
        assert_eq!(f.count.mean(), 2.0);
        assert_eq!(f.diffusion, vec![(n("y"), 0.75), (n("z"), 0.25)]);
        // y and z have no outgoing rates
        assert_eq!(m.law(&n("y")).unwrap(), SiteLaw::childless());
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut rates = BTreeMap::new();
        rates.insert((n("x"), n("x")), -1.0);
        let spec = ContinuousSpec { sites: vec![n("x")], rates, lambda: 1.0, death: BTreeMap::new() };
        assert!(build_discrete_counterpart(&spec).is_err());
        let spec = ContinuousSpec { sites: vec![n("x")], rates: BTreeMap::new(), lambda: 0.0, death: BTreeMap::new() };
        assert!(build_discrete_counterpart(&spec).is_err());
        let mut death = BTreeMap::new();
        death.insert(n("x"), 0.0);
        let spec = ContinuousSpec { sites: vec![n("x")], rates: BTreeMap::new(), lambda: 1.0, death };
        assert!(build_discrete_counterpart(&spec).is_err());
    }

    #[test]
    fn finite_model_rejects_dangling_children() {
        let law = SiteLaw::factored(CountLaw::dirac(1), vec![(n("b"), 1.0)]);
        assert!(FiniteModel::new("m", vec![n("a")], vec![(n("a"), law)]).is_err());
    }
}
