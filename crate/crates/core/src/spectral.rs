use serde::{Deserialize, Serialize};

use crate::domain::{irreducible_classes, moment_matrix, truncate, MomentMatrix, TruncatedDomain, BoundaryPolicy};
use crate::error::{invalid, Error, Result};
use crate::model::{BrwModel, RadialChain};
use crate::site::Site;

const PERRON_REL_TOL: f64 = 1e-12;
const PERRON_MAX_ITER: usize = 200_000;

#[derive(Clone, Debug, Serialize)]
pub struct PerronRoot {
    /// Midpoint of the final Collatz-Wielandt bounds.
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl PerronRoot {
    fn zero(n: usize) -> PerronRoot {
        let vector = vec![if n == 0 { 0.0 } else { 1.0 / n as f64 }; n];
        PerronRoot { value: 0.0, lower: 0.0, upper: 0.0, vector, iterations: 0, converged: true }
    }
}

/// Dominant eigenvalue of a nonnegative matrix given by sparse rows, assumed
/// irreducible. Power iteration on `M + cI` from the uniform vector; the
/// shift removes the sign ambiguity of bipartite structures.
pub fn perron_root_rows(rows: &[Vec<(usize, f64)>]) -> PerronRoot {
    let n = rows.len();
    let row_max = rows.iter().map(|r| r.iter().map(|(_, m)| m).sum::<f64>()).fold(0.0, f64::max);
    if n == 0 || row_max == 0.0 {
        return PerronRoot::zero(n);
    }
    let c = 0.5 * row_max;
    let mut v = vec![1.0 / n as f64; n];
    let mut w = vec![0.0; n];
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < PERRON_MAX_ITER {
        iterations += 1;
        for (x, row) in rows.iter().enumerate() {
            w[x] = c * v[x] + row.iter().map(|&(y, m)| m * v[y]).sum::<f64>();
        }
        let (mut rmin, mut rmax) = (f64::INFINITY, 0.0f64);
        for (a, b) in w.iter().zip(&v) {
            let r = a / b;
            rmin = rmin.min(r);
            rmax = rmax.max(r);
        }
        lo = f64::max(lo, rmin - c);
        hi = f64::min(hi, rmax - c);
        let top = w.iter().cloned().fold(0.0, f64::max);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / top;
        }
        if (rmax - rmin) <= PERRON_REL_TOL * rmax {
            converged = true;
            break;
        }
    }
    let lower = lo.max(0.0);
    let upper = hi.max(lower);
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|e| *e /= s);
    PerronRoot { value: 0.5 * (lower + upper), lower, upper, vector: v, iterations, converged }
}

/// Spectral radius of a window matrix, or of its restriction to `class`.
/// Without a class the result is the maximum over irreducible classes, with
/// the eigenvector supported on the maximising class.
pub fn perron_root(matrix: &MomentMatrix, class: Option<&[usize]>) -> PerronRoot {
    if let Some(c) = class {
        return perron_root_rows(&matrix.restrict(c));
    }
    let classes = irreducible_classes(matrix);
    let mut best = PerronRoot::zero(matrix.len());
    let mut have = false;
    for c in &classes.classes {
        let r = perron_root_rows(&matrix.restrict(c));
        if !have || r.value > best.value {
            have = true;
            let mut vector = vec![0.0; matrix.len()];
            for (k, &i) in c.iter().enumerate() {
                vector[i] = r.vector[k];
            }
            best = PerronRoot { vector, ..r };
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GrowthTarget {
    /// Entries `m^(n)_xy` for a fixed site `y`.
    Site(Site),
    /// Row sums `sum_y m^(n)_xy`.
    RowSum,
}

#[derive(Clone, Debug, Serialize)]
pub struct GrowthEstimate {
    /// Pairs `(n, a_n)`.
    pub sequence: Vec<(usize, f64)>,
    /// `a_n` at the largest even `n`.
    pub value: f64,
    /// 2 when odd-n terms vanish, 1 otherwise.
    pub subsequence_period: usize,
    /// Spread of even-n terms over the final half of the sequence.
    pub oscillation: f64,
    pub converged: bool,
}

impl GrowthEstimate {
    fn from_logs(logs: Vec<(usize, f64)>) -> GrowthEstimate {
        let n_max = logs.last().map(|(n, _)| *n).unwrap_or(0);
        let sequence: Vec<(usize, f64)> = logs.iter().map(|&(n, l)| (n, (l / n as f64).exp())).collect();
        let odd_vanish = sequence.iter().filter(|(n, _)| n % 2 == 1).all(|(_, a)| *a == 0.0);
        let even: Vec<(usize, f64)> = sequence.iter().filter(|(n, _)| n % 2 == 0).cloned().collect();
        let value = even.last().or(sequence.last()).map(|(_, a)| *a).unwrap_or(0.0);
        let tail: Vec<f64> = even.iter().filter(|(n, _)| 2 * n >= n_max).map(|(_, a)| *a).collect();
        let oscillation = if tail.is_empty() {
            0.0
        } else {
            tail.iter().cloned().fold(f64::MIN, f64::max) - tail.iter().cloned().fold(f64::MAX, f64::min)
        };
        let any_positive = sequence.iter().any(|(_, a)| *a > 0.0);
        let converged = !any_positive || (value > 0.0 && oscillation <= 0.05 * value);
        GrowthEstimate {
            sequence,
            value,
            subsequence_period: if odd_vanish && any_positive { 2 } else { 1 },
            oscillation,
            converged,
        }
    }
}

/// Runs `v <- v W` from `v = e_start` for `steps` steps with log scaling and
/// records `ln(read(v))` after each step.
fn log_power_sequence(
    n: usize,
    start: usize,
    steps: usize,
    mut mul: impl FnMut(&[f64], &mut [f64]),
    read: impl Fn(&[f64]) -> f64,
) -> Vec<(usize, f64)> {
    let mut v = vec![0.0; n];
    v[start] = 1.0;
    let mut u = vec![0.0; n];
    let mut scale = 0.0;
    let mut out = Vec::with_capacity(steps);
    for k in 1..=steps {
        mul(&v, &mut u);
        std::mem::swap(&mut u, &mut v);
        let top = v.iter().cloned().fold(0.0, f64::max);
        if top == 0.0 {
            out.extend((k..=steps).map(|j| (j, f64::NEG_INFINITY)));
            break;
        }
        scale += top.ln();
        v.iter_mut().for_each(|e| *e /= top);
        out.push((k, read(&v).ln() + scale));
    }
    out
}

/// Window radius needed so that truncation does not affect the first
/// `n_max` terms.
pub fn required_radius(dom: &TruncatedDomain, x: usize, target: Option<usize>, n_max: usize) -> usize {
    match target {
        None => dom.window.dist(x) + n_max,
        Some(y) => n_max.div_ceil(2) + dom.window.dist(x).max(dom.window.dist(y)),
    }
}

fn covers_model(dom: &TruncatedDomain) -> bool {
    dom.model().finite_sites().is_some_and(|s| s.len() == dom.len())
}

pub fn growth_sequence(dom: &TruncatedDomain, x: &Site, target: &GrowthTarget, n_max: usize) -> Result<GrowthEstimate> {
    if n_max == 0 {
        return Err(invalid("n_max must be positive"));
    }
    let w = &dom.window;
    let xi = w.index_of(x).ok_or_else(|| Error::UnknownSite(x.to_string()))?;
    let yi = match target {
        GrowthTarget::Site(y) => Some(w.index_of(y).ok_or_else(|| Error::UnknownSite(y.to_string()))?),
        GrowthTarget::RowSum => None,
    };
    if !covers_model(dom) {
        let required = required_radius(dom, xi, yi, n_max);
        if w.radius() < required {
            return Err(Error::WindowTooSmall { required, have: w.radius() });
        }
    }
    let m = moment_matrix(dom);
    let logs = log_power_sequence(
        m.len(),
        xi,
        n_max,
        |v, u| m.left_mul(v, u),
        |v| match yi {
            Some(y) => v[y],
            None => v.iter().sum(),
        },
    );
    Ok(GrowthEstimate::from_logs(logs))
}

/// Growth of `lambda * W` on the distance-from-root chain of a tree model.
pub fn radial_growth(chain: RadialChain, lambda: f64, steps: usize, target: RadialTarget) -> Result<GrowthEstimate> {
    if chain.degree < 2 {
        return Err(invalid(format!("radial chain needs degree >= 2, got {}", chain.degree)));
    }
    if !(lambda > 0.0) || !(chain.root_loop >= 0.0) {
        return Err(invalid("rates must be positive"));
    }
    if steps == 0 {
        return Err(invalid("number of steps must be positive"));
    }
    let states = match target {
        RadialTarget::Return => steps / 2 + 1,
        RadialTarget::RowSum => steps + 1,
    };
    let d = chain.degree as f64;
    let mul = |v: &[f64], u: &mut [f64]| {
        u.iter_mut().for_each(|e| *e = 0.0);
        u[0] += lambda * chain.root_loop * v[0];
        if states > 1 {
            u[1] += lambda * d * v[0];
        }
        for k in 1..states {
            u[k - 1] += lambda * v[k];
            if k + 1 < states {
                u[k + 1] += lambda * (d - 1.0) * v[k];
            }
        }
    };
    let logs = log_power_sequence(states, 0, steps, mul, |v| match target {
        RadialTarget::Return => v[0],
        RadialTarget::RowSum => v.iter().sum(),
    });
    Ok(GrowthEstimate::from_logs(logs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RadialTarget {
    Return,
    RowSum,
}

/// `M_s(o,o)` estimate for edge-breeding on `T_d` at rate `lambda_k`, from
/// the return probabilities of the radial chain at `2 n_max` steps.
pub fn radial_tree_growth(d: usize, lambda_k: f64, n_max: usize) -> Result<GrowthEstimate> {
    if d < 3 {
        return Err(invalid(format!("tree degree must be at least 3, got {d}")));
    }
    radial_growth(RadialChain { degree: d, root_loop: 0.0 }, lambda_k, 2 * n_max, RadialTarget::Return)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    Yes,
    No,
    Undecided,
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalParams {
    /// `K_s(x,x)`, growth at unit rate.
    pub k_s: f64,
    /// `K_w(x)`, growth at unit rate.
    pub k_w: f64,
    pub lambda_s: f64,
    pub lambda_w_lower: f64,
    pub pure_global_indicator: Indicator,
    pub margin: f64,
    pub radial: bool,
    pub diagonal: GrowthEstimate,
    pub rowsum: GrowthEstimate,
}

/// Critical parameters of a continuous-time family, read off the model at
/// its own rate and rescaled to unit rate.
pub fn critical_params(model: &BrwModel, x: &Site, n_max: usize) -> Result<CriticalParams> {
    let lambda = model
        .lambda()
        .ok_or_else(|| invalid(format!("model '{}' is not a continuous-time family", model.name())))?;
    let radial = model.radial().filter(|_| *x == model.root());
    let (diagonal, rowsum) = match radial {
        Some(chain) => (
            radial_growth(chain, lambda, 2 * n_max, RadialTarget::Return)?,
            radial_growth(chain, lambda, 2 * n_max, RadialTarget::RowSum)?,
        ),
        None => {
            let dom = match model.finite_sites() {
                Some(s) => truncate(model, x, s.len(), BoundaryPolicy::OutsideExtinct)?,
                None => truncate(model, x, n_max, BoundaryPolicy::OutsideExtinct)?,
            };
            (
                growth_sequence(&dom, x, &GrowthTarget::Site(x.clone()), n_max)?,
                growth_sequence(&dom, x, &GrowthTarget::RowSum, n_max)?,
            )
        }
    };
    let k_s = diagonal.value / lambda;
    let k_w = rowsum.value / lambda;
    let margin = 3.0 * diagonal.oscillation.max(rowsum.oscillation) / lambda;
    let pure_global_indicator = if !(diagonal.converged && rowsum.converged) {
        Indicator::Undecided
    } else if k_s < k_w - margin {
        Indicator::Yes
    } else {
        Indicator::No
    };
    Ok(CriticalParams {
        k_s,
        k_w,
        lambda_s: 1.0 / k_s,
        lambda_w_lower: 1.0 / k_w,
        pure_global_indicator,
        margin,
        radial: radial.is_some(),
        diagonal,
        rowsum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perron_scalar() {
        let r = perron_root_rows(&[vec![(0, 2.0)]]);
        assert!((r.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn perron_bipartite_pair() {
        let r = perron_root_rows(&[vec![(1, 0.5)], vec![(0, 1.0)]]);
        assert!((r.value - 0.5f64.sqrt()).abs() < 1e-11, "{}", r.value);
        assert!(r.lower <= 0.5f64.sqrt() && 0.5f64.sqrt() <= r.upper);
    }

    #[test]
    fn perron_zero_matrix() {
        assert_eq!(perron_root_rows(&[vec![], vec![]]).value, 0.0);
    }

    #[test]
    fn radial_rowsum_is_exact_for_plain_tree() {
        let g = radial_growth(RadialChain { degree: 3, root_loop: 0.0 }, 1.0, 50, RadialTarget::RowSum).unwrap();
        assert!(g.sequence.iter().all(|(_, a)| (a - 3.0).abs() < 1e-12));
    }

    #[test]
    fn radial_returns_have_period_two() {
        let g = radial_tree_growth(3, 1.0, 20).unwrap();
        assert_eq!(g.subsequence_period, 2);
    }
}
