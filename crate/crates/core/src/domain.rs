use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;

use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::law::{CountLaw, SiteLaw};
use crate::model::BrwModel;
use crate::site::Site;

pub const DEFAULT_SITE_BUDGET: usize = 4_000_000;

/// What happens to children sent outside the window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryPolicy {
    /// Escaped particles die: out-of-window factors are 1.
    OutsideExtinct,
    /// Escaped particles live forever: out-of-window factors are 0.
    OutsideImmortal,
}

impl BoundaryPolicy {
    pub fn outside_value(self) -> f64 {
        match self {
            BoundaryPolicy::OutsideExtinct => 1.0,
            BoundaryPolicy::OutsideImmortal => 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Target {
    In(u32),
    Out(u32),
}

#[derive(Clone, Debug)]
pub(crate) enum CompiledLaw {
    General { atoms: Vec<(Vec<(Target, u32)>, f64)> },
    Factored { count: CountLaw, row: Vec<(Target, f64)> },
}

impl CompiledLaw {
    pub(crate) fn targets(&self) -> Vec<Target> {
        match self {
            CompiledLaw::General { atoms } => {
                atoms.iter().flat_map(|(f, _)| f.iter().map(|(t, _)| *t)).collect()
            }
            CompiledLaw::Factored { row, .. } => row.iter().map(|(t, _)| *t).collect(),
        }
    }
}

/// Finite set of sites with their laws compiled against window indices.
pub struct Window {
    model: BrwModel,
    root: Site,
    radius: usize,
    sites: Vec<Site>,
    index: HashMap<Site, usize>,
    keys: HashMap<String, usize>,
    dist: Vec<usize>,
    laws: Vec<SiteLaw>,
    compiled: Vec<CompiledLaw>,
    out_sites: Vec<Site>,
}

impl std::fmt::Debug for Window {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Window")
            .field("model", &self.model.name())
            .field("root", &self.root)
            .field("radius", &self.radius)
            .field("sites", &self.sites.len())
            .finish()
    }
}

impl Window {
    pub fn model(&self) -> &BrwModel {
        &self.model
    }

    pub fn root(&self) -> &Site {
        &self.root
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &Site {
        &self.sites[i]
    }

    pub fn index_of(&self, x: &Site) -> Option<usize> {
        self.index.get(x).copied()
    }

    /// Looks a site up by its display key.
    pub fn find(&self, key: &str) -> Result<usize> {
        self.keys.get(key).copied().ok_or_else(|| Error::UnknownSite(key.to_string()))
    }

    pub fn dist(&self, i: usize) -> usize {
        self.dist[i]
    }

    pub fn law(&self, i: usize) -> &SiteLaw {
        &self.laws[i]
    }

    pub(crate) fn compiled(&self, i: usize) -> &CompiledLaw {
        &self.compiled[i]
    }

    /// Sites outside the window that receive children from inside.
    pub fn out_sites(&self) -> &[Site] {
        &self.out_sites
    }

    /// True when every child of `i` lands inside the window.
    pub fn is_interior(&self, i: usize) -> bool {
        self.compiled[i].targets().iter().all(|t| matches!(t, Target::In(_)))
    }

    /// In-window sites receiving children from `i` with positive probability.
    pub fn neighbours(&self, i: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.compiled[i]
            .targets()
            .into_iter()
            .filter_map(|t| match t {
                Target::In(j) => Some(j as usize),
                Target::Out(_) => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// A window plus the policy applied to children that leave it.
#[derive(Clone, Debug)]
pub struct TruncatedDomain {
    pub window: Arc<Window>,
    pub policy: BoundaryPolicy,
}

impl TruncatedDomain {
    pub fn with_policy(&self, policy: BoundaryPolicy) -> TruncatedDomain {
        TruncatedDomain { window: self.window.clone(), policy }
    }

    pub fn model(&self) -> &BrwModel {
        self.window.model()
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn radius(&self) -> usize {
        self.window.radius()
    }
}

pub fn truncate(model: &BrwModel, root: &Site, radius: usize, policy: BoundaryPolicy) -> Result<TruncatedDomain> {
    truncate_with_budget(model, root, radius, policy, DEFAULT_SITE_BUDGET)
}

/// Ball of the given radius around `root`, laid out breadth-first with each
/// layer sorted by site order.
pub fn truncate_with_budget(
    model: &BrwModel,
    root: &Site,
    radius: usize,
    policy: BoundaryPolicy,
    budget: usize,
) -> Result<TruncatedDomain> {
    let mut laws: HashMap<Site, SiteLaw> = HashMap::new();
    let undirected = match model.finite_sites() {
        Some(all) => {
            let mut adj: HashMap<Site, Vec<Site>> = HashMap::new();
            for x in &all {
                let law = model.law(x)?;
                for y in law.support() {
                    adj.entry(x.clone()).or_default().push(y.clone());
                    adj.entry(y).or_default().push(x.clone());
                }
                laws.insert(x.clone(), law);
            }
            if !laws.contains_key(root) {
                return Err(Error::UnknownSite(root.to_string()));
            }
            Some((all, adj))
        }
        None => None,
    };

    let mut sites = vec![root.clone()];
    let mut dist = vec![0usize];
    let mut seen: HashSet<Site> = HashSet::from([root.clone()]);
    let mut frontier = vec![root.clone()];
    let mut r = 0;
    while r < radius && !frontier.is_empty() {
        let mut next = Vec::new();
        for x in &frontier {
            let nbrs = match &undirected {
                Some((_, adj)) => adj.get(x).cloned().unwrap_or_default(),
                None => {
                    if !laws.contains_key(x) {
                        laws.insert(x.clone(), model.law(x)?);
                    }
                    laws[x].support()
                }
            };
            for y in nbrs {
                if seen.insert(y.clone()) {
                    next.push(y);
                }
            }
        }
        next.sort();
        r += 1;
        if sites.len() + next.len() > budget {
            return Err(Error::Resource(format!(
                "window of radius {radius} around {root} exceeds the budget of {budget} sites (reached {} at distance {r})",
                sites.len() + next.len()
            )));
        }
        dist.extend(std::iter::repeat_n(r, next.len()));
        sites.extend(next.iter().cloned());
        frontier = next;
    }
    // Components not connected to the root are added once the radius covers
    // every site of a finite model.
    if let Some((all, _)) = &undirected {
        if radius >= all.len() {
            let mut rest: Vec<Site> = all.iter().filter(|s| !seen.contains(*s)).cloned().collect();
            rest.sort();
            dist.extend(std::iter::repeat_n(radius, rest.len()));
            sites.extend(rest);
        }
    }

    let index: HashMap<Site, usize> = sites.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    let mut keys = HashMap::with_capacity(sites.len());
    for (i, s) in sites.iter().enumerate() {
        if keys.insert(s.to_string(), i).is_some() {
            return Err(invalid(format!("two sites share the key '{s}'")));
        }
    }
    let mut out_index: HashMap<Site, u32> = HashMap::new();
    let mut out_sites = Vec::new();
    let mut site_laws = Vec::with_capacity(sites.len());
    let mut compiled = Vec::with_capacity(sites.len());
    for x in &sites {
        let law = match laws.remove(x) {
            Some(l) => l,
            None => model.law(x)?,
        };
        law.validate().map_err(|e| invalid(format!("law at {x}: {e}")))?;
        let mut target = |y: &Site| -> Target {
            match index.get(y) {
                Some(&j) => Target::In(j as u32),
                None => {
                    let k = *out_index.entry(y.clone()).or_insert_with(|| {
                        out_sites.push(y.clone());
                        (out_sites.len() - 1) as u32
                    });
                    Target::Out(k)
                }
            }
        };
        let c = match &law {
            SiteLaw::General(g) => CompiledLaw::General {
                atoms: g
                    .atoms
                    .iter()
                    .map(|a| (a.offspring.iter().filter(|(_, k)| *k > 0).map(|(y, k)| (target(y), *k)).collect(), a.p))
                    .collect(),
            },
            SiteLaw::Factored(f) => CompiledLaw::Factored {
                count: f.count.clone(),
                row: f.diffusion.iter().filter(|(_, p)| *p > 0.0).map(|(y, p)| (target(y), *p)).collect(),
            },
        };
        site_laws.push(law);
        compiled.push(c);
    }

    let window = Window {
        model: model.clone(),
        root: root.clone(),
        radius,
        sites,
        index,
        keys,
        dist,
        laws: site_laws,
        compiled,
        out_sites,
    };
    Ok(TruncatedDomain { window: Arc::new(window), policy })
}

/// Window covering every site of a finite model.
pub fn full_domain(model: &BrwModel, policy: BoundaryPolicy) -> Result<TruncatedDomain> {
    let n = model
        .finite_sites()
        .ok_or_else(|| invalid(format!("model '{}' is not finite", model.name())))?
        .len();
    truncate(model, &model.root(), n, policy)
}

/// Sparse first-moment matrix over a window. Mass sent outside the window is
/// kept per row in `boundary`.
#[derive(Clone, Debug)]
pub struct MomentMatrix {
    pub window: Arc<Window>,
    pub rows: Vec<Vec<(usize, f64)>>,
    pub boundary: Vec<f64>,
}

impl MomentMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.rows[x].iter().find(|(j, _)| *j == y).map(|(_, v)| *v).unwrap_or(0.0)
    }

    /// Total expected offspring of `x`, including mass leaving the window.
    pub fn row_sum(&self, x: usize) -> f64 {
        self.rows[x].iter().map(|(_, v)| v).sum::<f64>() + self.boundary[x]
    }

    /// `u = v M` (row vector times matrix).
    pub fn left_mul(&self, v: &[f64], u: &mut [f64]) {
        u.iter_mut().for_each(|e| *e = 0.0);
        for (x, row) in self.rows.iter().enumerate() {
            let vx = v[x];
            if vx == 0.0 {
                continue;
            }
            for &(y, m) in row {
                u[y] += vx * m;
            }
        }
    }

    /// `u = M v`.
    pub fn right_mul(&self, v: &[f64], u: &mut [f64]) {
        for (x, row) in self.rows.iter().enumerate() {
            u[x] = row.iter().map(|&(y, m)| m * v[y]).sum();
        }
    }

    /// Restriction to a subset of indices, re-indexed in the given order.
    pub fn restrict(&self, keep: &[usize]) -> Vec<Vec<(usize, f64)>> {
        let pos: HashMap<usize, usize> = keep.iter().enumerate().map(|(a, &b)| (b, a)).collect();
        keep.iter()
            .map(|&x| self.rows[x].iter().filter_map(|&(y, m)| pos.get(&y).map(|&j| (j, m))).collect())
            .collect()
    }
}

pub fn moment_matrix(dom: &TruncatedDomain) -> MomentMatrix {
    let w = &dom.window;
    let mut rows = Vec::with_capacity(w.len());
    let mut boundary = Vec::with_capacity(w.len());
    for i in 0..w.len() {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        let mut out = 0.0;
        let mut add = |t: Target, v: f64| match t {
            Target::In(j) => *acc.entry(j as usize).or_default() += v,
            Target::Out(_) => out += v,
        };
        match w.compiled(i) {
            CompiledLaw::General { atoms } => {
                for (f, p) in atoms {
                    for &(t, k) in f {
                        add(t, p * k as f64);
                    }
                }
            }
            CompiledLaw::Factored { count, row } => {
                let m = count.mean();
                for &(t, p) in row {
                    add(t, m * p);
                }
            }
        }
        rows.push(acc.into_iter().filter(|(_, v)| *v > 0.0).collect());
        boundary.push(out);
    }
    MomentMatrix { window: w.clone(), rows, boundary }
}

/// Strongly connected components of `{(x, y) : m_xy > 0}`.
#[derive(Clone, Debug)]
pub struct Classes {
    /// Window indices of each class, classes ordered by smallest member.
    pub classes: Vec<Vec<usize>>,
    pub class_of: Vec<usize>,
    /// Edges of the condensation: class `a` sends mass to class `b != a`.
    pub edges: Vec<(usize, usize)>,
}

impl Classes {
    pub fn is_irreducible(&self) -> bool {
        self.classes.len() == 1
    }

    /// True when class `a` leads to class `b` (reflexive).
    pub fn reaches(&self, a: usize, b: usize) -> bool {
        let mut stack = vec![a];
        let mut seen = vec![false; self.classes.len()];
        while let Some(c) = stack.pop() {
            if c == b {
                return true;
            }
            if std::mem::replace(&mut seen[c], true) {
                continue;
            }
            stack.extend(self.edges.iter().filter(|(s, _)| *s == c).map(|(_, t)| *t));
        }
        false
    }
}

pub fn irreducible_classes(matrix: &MomentMatrix) -> Classes {
    let n = matrix.len();
    let mut g: DiGraph<(), ()> = DiGraph::with_capacity(n, 0);
    let nodes: Vec<_> = (0..n).map(|_| g.add_node(())).collect();
    for (x, row) in matrix.rows.iter().enumerate() {
        for &(y, _) in row {
            g.add_edge(nodes[x], nodes[y], ());
        }
    }
    let mut classes: Vec<Vec<usize>> = petgraph::algo::tarjan_scc(&g)
        .into_iter()
        .map(|c| {
            let mut v: Vec<usize> = c.into_iter().map(|ni| ni.index()).collect();
            v.sort_unstable();
            v
        })
        .collect();
    classes.sort_by_key(|c| c[0]);
    let mut class_of = vec![0; n];
    for (k, c) in classes.iter().enumerate() {
        for &x in c {
            class_of[x] = k;
        }
    }
    let mut edges: Vec<(usize, usize)> = matrix
        .rows
        .iter()
        .enumerate()
        .flat_map(|(x, row)| row.iter().map(move |&(y, _)| (x, y)))
        .map(|(x, y)| (class_of[x], class_of[y]))
        .filter(|(a, b)| a != b)
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Classes { classes, class_of, edges }
}

/// Per class: true iff some site of the class puts exactly one child back in
/// the class with probability strictly below one.
pub fn assumption1_check(dom: &TruncatedDomain, classes: &Classes) -> Vec<bool> {
    let w = &dom.window;
    classes
        .classes
        .iter()
        .map(|members| {
            let set: HashSet<&Site> = members.iter().map(|&i| w.site(i)).collect();
            members.iter().any(|&i| w.law(i).prob_exactly_one_in(|y| set.contains(y)) < 1.0 - 1e-15)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::law::CountLaw;
    use crate::model::FiniteModel;

    fn n(s: &str) -> Site {
        Site::named(s)
    }

    fn self_loop(names: &[&str]) -> BrwModel {
        let sites: Vec<Site> = names.iter().map(|s| n(s)).collect();
        let laws = sites
            .iter()
            .map(|s| (s.clone(), SiteLaw::factored(CountLaw::dirac(1), vec![(s.clone(), 1.0)])))
            .collect();
        BrwModel::new(FiniteModel::new("loops", sites, laws).unwrap())
    }

    fn chain() -> BrwModel {
        let sites = vec![n("0"), n("1"), n("2")];
        let laws = vec![
            (n("0"), SiteLaw::factored(CountLaw::dirac(1), vec![(n("1"), 1.0)])),
            (n("1"), SiteLaw::factored(CountLaw::dirac(1), vec![(n("2"), 1.0)])),
            (n("2"), SiteLaw::childless()),
        ];
        BrwModel::new(FiniteModel::new("chain", sites, laws).unwrap())
    }

    #[test]
    fn identity_law_gives_identity_matrix() {
        let m = self_loop(&["a", "b"]);
        let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
        let mm = moment_matrix(&dom);
        assert_eq!(mm.get(0, 0), 1.0);
        assert_eq!(mm.get(0, 1), 0.0);
        assert_eq!(mm.get(1, 1), 1.0);
    }

    #[test]
    fn isolated_loops_are_two_classes() {
        let m = self_loop(&["a", "b"]);
        let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
        let c = irreducible_classes(&moment_matrix(&dom));
        assert_eq!(c.classes.len(), 2);
        assert!(!c.is_irreducible());
        // the identity law never leaves a one-child configuration
        assert_eq!(assumption1_check(&dom, &c), vec![false, false]);
    }

    #[test]
    fn directed_chain_has_three_classes() {
        let m = chain();
        let dom = full_domain(&m, BoundaryPolicy::OutsideExtinct).unwrap();
        assert_eq!(dom.len(), 3);
        let c = irreducible_classes(&moment_matrix(&dom));
        assert_eq!(c.classes.len(), 3);
        let a = c.class_of[0];
        let b = c.class_of[2];
        assert!(c.reaches(a, b));
        assert!(!c.reaches(b, a));
    }

    #[test]
    fn site_budget_is_enforced() {
        let m = chain();
        let err = truncate_with_budget(&m, &n("0"), 5, BoundaryPolicy::OutsideExtinct, 2).unwrap_err();
        assert!(matches!(err, Error::Resource(_)));
    }
}
