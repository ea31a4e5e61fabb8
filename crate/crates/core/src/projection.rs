//! Pushing a model forward along a labelling of its sites.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::domain::TruncatedDomain;
use crate::error::{invalid, Result};
use crate::law::{CountLaw, SiteLaw};
use crate::model::{BrwModel, FiniteModel};
use crate::site::Site;

const ATOM_TOL: f64 = 1e-12;
const MAX_LABELS: usize = 1_000_000;

/// Offspring law counted per label.
#[derive(Clone, Debug, PartialEq)]
enum Pushforward {
    Factored { count: CountLaw, row: BTreeMap<String, f64> },
    Atoms(BTreeMap<Vec<(String, u32)>, f64>),
}

impl Pushforward {
    fn of(law: &SiteLaw, g: &impl Fn(&Site) -> Option<String>) -> Result<Pushforward> {
        let label = |y: &Site| g(y).ok_or_else(|| invalid(format!("labelling is undefined at '{y}'")));
        match law {
            SiteLaw::Factored(f) => {
                let mut row = BTreeMap::new();
                for (y, p) in &f.diffusion {
                    *row.entry(label(y)?).or_insert(0.0) += p;
                }
                Ok(Pushforward::Factored { count: f.count.clone(), row })
            }
            SiteLaw::General(_) => {
                let mut atoms = BTreeMap::new();
                for a in law.to_atoms(1.0) {
                    let mut counts: BTreeMap<String, u32> = BTreeMap::new();
                    for (y, k) in &a.offspring {
                        if *k > 0 {
                            *counts.entry(label(y)?).or_insert(0) += k;
                        }
                    }
                    *atoms.entry(counts.into_iter().collect()).or_insert(0.0) += a.p;
                }
                Ok(Pushforward::Atoms(atoms))
            }
        }
    }

    fn atoms(&self) -> BTreeMap<Vec<(String, u32)>, f64> {
        match self {
            Pushforward::Atoms(a) => a.clone(),
            Pushforward::Factored { count, row } => {
                let diffusion = row.iter().map(|(l, p)| (Site::named(l.clone()), *p)).collect();
                let law = SiteLaw::factored(count.clone(), diffusion);
                let mut out = BTreeMap::new();
                for a in law.to_atoms(1.0 - 1e-15) {
                    let key = a.offspring.iter().filter(|(_, k)| *k > 0).map(|(y, k)| (y.to_string(), *k)).collect();
                    *out.entry(key).or_insert(0.0) += a.p;
                }
                out
            }
        }
    }

    fn matches(&self, other: &Pushforward) -> bool {
        if let (Pushforward::Factored { count: c1, row: r1 }, Pushforward::Factored { count: c2, row: r2 }) =
            (self, other)
        {
            if counts_match(c1, c2) && maps_match(r1, r2) {
                return true;
            }
        }
        maps_match(&self.atoms(), &other.atoms())
    }

    fn to_law(&self) -> SiteLaw {
        match self {
            Pushforward::Factored { count, row } => SiteLaw::factored(
                count.clone(),
                row.iter().map(|(l, p)| (Site::named(l.clone()), *p)).collect(),
            ),
            Pushforward::Atoms(a) => SiteLaw::general(
                a.iter()
                    .map(|(f, p)| (f.iter().map(|(l, k)| (Site::named(l.clone()), *k)).collect(), *p))
                    .collect(),
            ),
        }
    }
}

fn counts_match(a: &CountLaw, b: &CountLaw) -> bool {
    match (a, b) {
        (CountLaw::Geometric { mean: m1 }, CountLaw::Geometric { mean: m2 }) => (m1 - m2).abs() <= ATOM_TOL,
        (CountLaw::Pmf(p), CountLaw::Pmf(q)) => {
            (0..p.len().max(q.len())).all(|i| (a.prob(i) - b.prob(i)).abs() <= ATOM_TOL)
        }
        _ => false,
    }
}

fn maps_match<K: Ord>(a: &BTreeMap<K, f64>, b: &BTreeMap<K, f64>) -> bool {
    let close = |x: &BTreeMap<K, f64>, y: &BTreeMap<K, f64>| {
        x.iter().all(|(k, p)| (p - y.get(k).copied().unwrap_or(0.0)).abs() <= ATOM_TOL)
    };
    close(a, b) && close(b, a)
}

#[derive(Debug)]
pub struct Projection {
    /// Model on the labels, with laws pushed forward from the first site
    /// carrying each label in window order.
    pub model: BrwModel,
    pub labels: Vec<String>,
    /// True when all sites sharing a label push forward to the same law.
    pub valid: bool,
    pub mismatches: Vec<Mismatch>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Mismatch {
    pub label: String,
    pub representative: String,
    pub site: String,
}

/// Pushes every window site's law forward along `g`. Children of boundary
/// sites are labelled too, so `g` must be defined one step past the window.
pub fn project_via_map(dom: &TruncatedDomain, g: impl Fn(&Site) -> Option<String>) -> Result<Projection> {
    let w = &dom.window;
    let mut reps: BTreeMap<String, (Site, Pushforward)> = BTreeMap::new();
    let mut labels = Vec::new();
    let mut mismatches = Vec::new();
    for (i, x) in w.sites().iter().enumerate() {
        let lx = g(x).ok_or_else(|| invalid(format!("labelling is undefined at '{x}'")))?;
        let push = Pushforward::of(w.law(i), &g)?;
        match reps.get(&lx) {
            Some((rep, first)) => {
                if !first.matches(&push) {
                    mismatches.push(Mismatch { label: lx, representative: rep.to_string(), site: x.to_string() });
                }
            }
            None => {
                if labels.len() >= MAX_LABELS {
                    return Err(invalid("labelling produces too many labels"));
                }
                labels.push(lx.clone());
                reps.insert(lx, (x.clone(), push));
            }
        }
    }
    // Labels reached only as children still need a law in the label model.
    let mut missing = Vec::new();
    for (_, p) in reps.values() {
        let targets: Vec<String> = match p {
            Pushforward::Factored { row, .. } => row.keys().cloned().collect(),
            Pushforward::Atoms(a) => a.keys().flat_map(|f| f.iter().map(|(l, _)| l.clone())).collect(),
        };
        missing.extend(targets.into_iter().filter(|l| !reps.contains_key(l)));
    }
    if !missing.is_empty() {
        missing.sort();
        missing.dedup();
        return Err(invalid(format!(
            "labels {missing:?} occur only outside the window; enlarge the radius"
        )));
    }
    let sites: Vec<Site> = labels.iter().map(|l| Site::named(l.clone())).collect();
    let laws = labels.iter().map(|l| (Site::named(l.clone()), reps[l].1.to_law())).collect();
    let root = g(w.root()).ok_or_else(|| invalid("labelling is undefined at the root"))?;
    let fm = FiniteModel::new(format!("{}/labels", dom.model().name()), sites, laws)?.with_root(Site::named(root))?;
    Ok(Projection { model: BrwModel::new(fm), labels, valid: mismatches.is_empty(), mismatches })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{full_domain, moment_matrix, truncate, BoundaryPolicy};
    use crate::gallery::{halfline_binary, LeftRule};

    #[test]
    fn halfline_collapses_to_galton_watson() {
        let h = halfline_binary(LeftRule::Geometric { p1: 0.5, a: 1.0, b: 4.0 }).unwrap();
        let m = BrwModel::new(h);
        let dom = truncate(&m, &Site::Int(0), 10, BoundaryPolicy::OutsideExtinct).unwrap();
        let p = project_via_map(&dom, |_| Some("*".to_string())).unwrap();
        assert!(p.valid);
        let law = p.model.law(&Site::named("*")).unwrap();
        let SiteLaw::Factored(f) = law else { panic!("expected a factored law") };
        assert!(counts_match(&f.count, &CountLaw::Pmf(vec![0.25, 0.0, 0.75])));
    }

    #[test]
    fn different_counts_are_not_isomorphic() {
        let (a, b) = (Site::named("a"), Site::named("b"));
        let la = SiteLaw::factored(CountLaw::Pmf(vec![0.5, 0.0, 0.5]), vec![(b.clone(), 1.0)]);
        let lb = SiteLaw::factored(CountLaw::Pmf(vec![0.25, 0.0, 0.75]), vec![(a.clone(), 1.0)]);
        let m = BrwModel::new(FiniteModel::new("ab", vec![a.clone(), b.clone()], vec![(a, la), (b, lb)]).unwrap());
        let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
        let p = project_via_map(&dom, |_| Some("*".to_string())).unwrap();
        assert!(!p.valid);
        assert_eq!(p.mismatches.len(), 1);
    }

    #[test]
    fn identity_labelling_keeps_the_moment_matrix() {
        let m = crate::gallery::two_site_cubic().unwrap();
        let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
        let p = project_via_map(&dom, |s| Some(s.to_string())).unwrap();
        assert!(p.valid);
        let d2 = full_domain(&p.model, BoundaryPolicy::OutsideExtinct).unwrap();
        let (m1, m2) = (moment_matrix(&dom), moment_matrix(&d2));
        for x in 0..2 {
            assert!((m1.row_sum(x) - m2.row_sum(x)).abs() < 1e-12);
        }
    }
}
