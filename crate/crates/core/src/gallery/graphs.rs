//! Edge-breeding continuous-time families on generator-backed graphs.

use crate::error::{invalid, Error, Result};
use crate::law::SiteLaw;
use crate::model::{counterpart_law, Bounds, BrwModel, RadialChain, SiteSource};
use crate::site::Site;

#[derive(Clone, Debug, PartialEq)]
enum Shape {
    /// Homogeneous tree `T_d` with an optional loop at the root.
    Tree { d: usize, root_loop: f64 },
    /// The integer line.
    Line,
    /// A copy of the natural numbers with one branch of `T_3` attached at 0.
    LinePlusBranch,
    /// `T_3` with a complete graph on `k + 1` vertices attached to the root.
    TreePlusClique { k: usize },
}

/// Continuous-time BRW with unit rate on every edge (plus optional loops),
/// death rate 1, and reproduction parameter `lambda`.
#[derive(Clone, Debug)]
pub struct RateGraph {
    name: String,
    shape: Shape,
    lambda: f64,
}

fn word_ok(w: &[u8], first: u8, rest: u8) -> bool {
    match w.split_first() {
        None => true,
        Some((h, t)) => *h < first && t.iter().all(|c| *c < rest),
    }
}

fn word_children(w: &[u8], n: u8) -> impl Iterator<Item = Site> + '_ {
    (0..n).map(move |c| {
        let mut v = w.to_vec();
        v.push(c);
        Site::Word(v)
    })
}

fn parent(w: &[u8]) -> Site {
    Site::Word(w[..w.len() - 1].to_vec())
}

impl RateGraph {
    fn new(name: &str, shape: Shape, lambda: f64) -> Result<RateGraph> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(invalid(format!("lambda must be positive, got {lambda}")));
        }
        Ok(RateGraph { name: name.to_string(), shape, lambda })
    }

    /// Out-rates `k_xy` from `x`.
    pub fn rates(&self, x: &Site) -> Result<Vec<(Site, f64)>> {
        let unknown = || Error::UnknownSite(x.to_string());
        let mut out = Vec::new();
        match (&self.shape, x) {
            (Shape::Tree { d, root_loop }, Site::Word(w)) => {
                let d = *d as u8;
                if !word_ok(w, d, d - 1) {
                    return Err(unknown());
                }
                if w.is_empty() {
                    if *root_loop > 0.0 {
                        out.push((x.clone(), *root_loop));
                    }
                    out.extend(word_children(w, d).map(|y| (y, 1.0)));
                } else {
                    out.push((parent(w), 1.0));
                    out.extend(word_children(w, d - 1).map(|y| (y, 1.0)));
                }
            }
            (Shape::Line, Site::Int(i)) => {
                out.push((Site::Int(i - 1), 1.0));
                out.push((Site::Int(i + 1), 1.0));
            }
            (Shape::LinePlusBranch, Site::Int(i)) if *i >= 0 => {
                if *i == 0 {
                    out.push((Site::root_word(), 1.0));
                } else {
                    out.push((Site::Int(i - 1), 1.0));
                }
                out.push((Site::Int(i + 1), 1.0));
            }
            (Shape::LinePlusBranch, Site::Word(w)) => {
                if !word_ok(w, 2, 2) {
                    return Err(unknown());
                }
                out.push((if w.is_empty() { Site::Int(0) } else { parent(w) }, 1.0));
                out.extend(word_children(w, 2).map(|y| (y, 1.0)));
            }
            (Shape::TreePlusClique { .. }, Site::Word(w)) => {
                if !word_ok(w, 3, 2) {
                    return Err(unknown());
                }
                if w.is_empty() {
                    out.extend(word_children(w, 3).map(|y| (y, 1.0)));
                    out.push((Site::named("c0"), 1.0));
                } else {
                    out.push((parent(w), 1.0));
                    out.extend(word_children(w, 2).map(|y| (y, 1.0)));
                }
            }
            (Shape::TreePlusClique { k }, Site::Named(s)) => {
                let j: usize = s
                    .strip_prefix('c')
                    .and_then(|n| n.parse().ok())
                    .filter(|j| j <= k)
                    .ok_or_else(unknown)?;
                if j == 0 {
                    out.push((Site::root_word(), 1.0));
                }
                out.extend((0..=*k).filter(|&i| i != j).map(|i| (Site::named(format!("c{i}")), 1.0)));
            }
            _ => return Err(unknown()),
        }
        Ok(out)
    }

    fn tree(&self) -> Option<(usize, f64)> {
        match self.shape {
            Shape::Tree { d, root_loop } => Some((d, root_loop)),
            _ => None,
        }
    }

    /// Global extinction probability of the plain tree, `min(1, 1/(d lambda))`.
    fn tree_extinction(&self, d: usize) -> f64 {
        (1.0 / (d as f64 * self.lambda)).min(1.0)
    }
}

/// Green function of `t` times the adjacency matrix of `T_d` between two
/// vertices at distance `r`; `None` when the series diverges.
pub fn green(d: usize, t: f64, r: usize) -> Option<f64> {
    let d1 = (d - 1) as f64;
    let disc = 1.0 - 4.0 * d1 * t * t;
    if !(t > 0.0) || disc < 0.0 {
        return None;
    }
    let f = (1.0 - disc.sqrt()) / (2.0 * d1 * t);
    let g0 = 1.0 / (1.0 - d as f64 * t * f);
    if !(g0.is_finite() && g0 > 0.0) {
        return None;
    }
    Some(g0 * f.powi(r as i32))
}

fn word_dist(a: &[u8], b: &[u8]) -> usize {
    let common = a.iter().zip(b).take_while(|(x, y)| x == y).count();
    a.len() + b.len() - 2 * common
}

impl SiteSource for RateGraph {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn root(&self) -> Site {
        match self.shape {
            Shape::Line | Shape::LinePlusBranch => Site::Int(0),
            _ => Site::root_word(),
        }
    }

    fn law(&self, x: &Site) -> Result<SiteLaw> {
        counterpart_law(&self.rates(x)?, self.lambda, 1.0)
    }

    fn lambda(&self) -> Option<f64> {
        Some(self.lambda)
    }

    fn radial(&self) -> Option<RadialChain> {
        self.tree().map(|(degree, root_loop)| RadialChain { degree, root_loop })
    }

    // Adding the loop only helps survival, so the plain-tree value bounds the
    // extinction probability from above. Below, convexity of the offspring
    // pgf gives `qbar_tree - qbar <= t A (qbar_tree - qbar)` away from the
    // loop with `t = f'(qbar_tree)/d`, so the deficit is at most `qbar_tree`
    // times the Green function of `t A` from the loop.
    fn extinction_bounds(&self, outside: &Site) -> Bounds {
        let Some((d, root_loop)) = self.tree() else { return Bounds::TRIVIAL };
        let Some(w) = outside.as_word() else { return Bounds::TRIVIAL };
        let q = self.tree_extinction(d);
        if root_loop == 0.0 {
            return Bounds::new(q, q);
        }
        let df = d as f64;
        let t = if df * self.lambda > 1.0 { 1.0 / (df * df * self.lambda) } else { self.lambda };
        if t * df >= 1.0 {
            return Bounds::new(0.0, q);
        }
        match green(d, t, w.len()) {
            Some(g) => Bounds::new(q * (1.0 - g), q),
            None => Bounds::new(0.0, q),
        }
    }

    // Before the first visit to a target set containing the loop the process
    // is the plain tree process, so the visit probability is at most the
    // expected number of visits, a sum of Green functions at rate lambda.
    // Above the local threshold the plain tree survives strongly locally and
    // dominates the local extinction probability from above.
    fn local_bounds(&self, outside: &Site, target: &[Site]) -> Bounds {
        let Some((d, root_loop)) = self.tree() else { return Bounds::TRIVIAL };
        let Some(w) = outside.as_word() else { return Bounds::TRIVIAL };
        let lambda_s = 1.0 / (2.0 * ((d - 1) as f64).sqrt());
        let hi = if self.lambda > lambda_s { self.tree_extinction(d) } else { 1.0 };
        let loop_in_target = target.iter().any(|a| a.as_word().is_some_and(|a| a.is_empty()));
        let mut lo = 0.0;
        if self.lambda <= lambda_s && (root_loop == 0.0 || loop_in_target) {
            let mut visits = 0.0;
            for a in target {
                match a.as_word().and_then(|a| green(d, self.lambda, word_dist(w, a))) {
                    Some(g) => visits += g,
                    None => {
                        visits = f64::INFINITY;
                        break;
                    }
                }
            }
            lo = (1.0 - visits).max(0.0);
        }
        Bounds::new(lo, hi)
    }

    // Off the loop the process is the plain tree process, whose total size
    // is a Galton-Watson process with mean d lambda. At or below 1 every
    // excursion away from the root dies out.
    fn survival_forces_visits(&self, target: &[Site]) -> bool {
        let Some((d, root_loop)) = self.tree() else { return false };
        let loop_in_target = target.iter().any(|a| a.as_word().is_some_and(|a| a.is_empty()));
        d as f64 * self.lambda <= 1.0 && (root_loop == 0.0 || loop_in_target)
    }
}

pub fn tree_edge_breeding(d: usize, lambda: f64) -> Result<BrwModel> {
    tree_with_loop(d, lambda, 0.0)
}

/// Edge-breeding on `T_d` with an extra loop of rate `k_yy` at the root.
pub fn tree_with_loop(d: usize, lambda: f64, k_yy: f64) -> Result<BrwModel> {
    if !(3..=255).contains(&d) {
        return Err(invalid(format!("tree degree must be in 3..=255, got {d}")));
    }
    if !(k_yy.is_finite() && k_yy >= 0.0) {
        return Err(invalid(format!("loop rate must be finite and nonnegative, got {k_yy}")));
    }
    let name = if k_yy > 0.0 { "tree-loop" } else { "tree" };
    Ok(BrwModel::new(RateGraph::new(name, Shape::Tree { d, root_loop: k_yy }, lambda)?))
}

/// Site-breeding on the integer line, two neighbours per site.
pub fn line(lambda: f64) -> Result<BrwModel> {
    Ok(BrwModel::new(RateGraph::new("line", Shape::Line, lambda)?))
}

pub fn line_plus_branch(lambda: f64) -> Result<BrwModel> {
    Ok(BrwModel::new(RateGraph::new("line-plus-branch", Shape::LinePlusBranch, lambda)?))
}

pub fn tree_plus_clique(lambda: f64, k: usize) -> Result<BrwModel> {
    if k < 1 {
        return Err(invalid("clique degree must be at least 1"));
    }
    Ok(BrwModel::new(RateGraph::new("tree-plus-clique", Shape::TreePlusClique { k }, lambda)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{truncate, BoundaryPolicy};

    #[test]
    fn tree_ball_sizes() {
        let m = tree_edge_breeding(3, 0.5).unwrap();
        let dom = truncate(&m, &m.root(), 2, BoundaryPolicy::OutsideExtinct).unwrap();
        assert_eq!(dom.len(), 10);
    }

    #[test]
    fn green_matches_series() {
        // Oracle: sum of t^n times the number of walks of length n between two
        // vertices at distance r, counted by dynamic programming on distances.
        let (d, t, r) = (3usize, 0.3, 2usize);
        let n_states = 400;
        let mut v = vec![0.0; n_states];
        v[0] = 1.0;
        let mut total = if r == 0 { 1.0 } else { 0.0 };
        for _ in 0..300 {
            let mut u = vec![0.0; n_states];
            for k in 0..n_states - 1 {
                if k == 0 {
                    u[1] += d as f64 * t * v[0];
                } else {
                    u[k + 1] += (d - 1) as f64 * t * v[k];
                    u[k - 1] += t * v[k];
                }
            }
            v = u;
            // walks from o to a fixed vertex at distance r: divide the layer
            // count by the layer size
            total += v[r] / (d * (d - 1).pow(r as u32 - 1)) as f64;
        }
        let g = green(d, t, r).unwrap();
        assert!((g - total).abs() < 1e-12, "{g} vs {total}");
    }

    #[test]
    fn green_diverges_above_threshold() {
        assert!(green(3, 0.36, 1).is_none());
    }

    #[test]
    fn loop_at_root_only() {
        let m = tree_with_loop(3, 0.35, 3.0).unwrap();
        let law = m.law(&Site::root_word()).unwrap();
        let row = law.mean_row();
        let at_root = row.iter().find(|(y, _)| *y == Site::root_word()).unwrap().1;
        assert!((at_root - 0.35 * 3.0).abs() < 1e-12);
        assert!(m.law(&Site::Word(vec![3])).is_err());
    }

    #[test]
    fn clique_and_branch_neighbourhoods() {
        let m = tree_plus_clique(0.3, 4).unwrap();
        assert_eq!(m.law(&Site::named("c0")).unwrap().support().len(), 5);
        assert_eq!(m.law(&Site::named("c3")).unwrap().support().len(), 4);
        let b = line_plus_branch(0.3).unwrap();
        assert_eq!(b.law(&Site::Int(0)).unwrap().support(), vec![Site::Int(1), Site::root_word()]);
        assert!(b.law(&Site::Int(-1)).is_err());
    }
}
