//! Nearest-neighbour branching random walks on the natural numbers with the
//! same count law at every site.

use serde::Serialize;

use super::scalar_extinction;
use crate::error::{invalid, Error, Result};
use crate::law::{CountLaw, SiteLaw};
use crate::model::{Bounds, SiteSource};
use crate::site::Site;

/// Probability `1 - p_i` of moving left from site `i >= 1`.
///
/// Left probabilities are stored directly because `1 - 4^-i` rounds to 1
/// long before `4^-i` underflows.
#[derive(Clone, Debug, PartialEq)]
pub enum LeftRule {
    /// `p_1` given, `1 - p_i = a b^-i` for `i >= 2`.
    Geometric { p1: f64, a: f64, b: f64 },
    Constant { left: f64 },
    /// `left[i]` for `i >= 1` (entry 0 unused), the last entry repeated.
    Table { left: Vec<f64> },
    /// `left[i]` on the prefix, then `1 / (i^2 prod_{j<=i} N_j)` with
    /// `N_j = e^log_c` beyond it and `log_prod = ln prod_{j<len} N_j`.
    Extended { left: Vec<f64>, log_prod: f64, log_c: f64 },
}

impl LeftRule {
    pub fn left(&self, i: u64) -> f64 {
        if i == 0 {
            return 0.0;
        }
        match self {
            LeftRule::Geometric { p1, a, b } => {
                if i == 1 {
                    1.0 - p1
                } else if i > 2000 {
                    0.0
                } else {
                    a / b.powi(i as i32)
                }
            }
            LeftRule::Constant { left } => *left,
            LeftRule::Table { left } => {
                let k = (i as usize).min(left.len() - 1);
                left[k]
            }
            LeftRule::Extended { left, log_prod, log_c } => match left.get(i as usize) {
                Some(q) => *q,
                None => {
                    let extra = (i as usize + 1 - left.len()) as f64;
                    1.0 / ((i as f64).powi(2) * (log_prod + extra * log_c).exp())
                }
            },
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |q: f64, i: u64| {
            if q > 0.0 && q < 1.0 {
                Ok(())
            } else {
                Err(invalid(format!("p_{i} = {} must lie in (0,1)", 1.0 - q)))
            }
        };
        match self {
            LeftRule::Geometric { a, b, .. } => {
                if !(*b > 1.0 && *a > 0.0 && a / (b * b) < 1.0) {
                    return Err(invalid("geometric rule needs a > 0, b > 1 and a/b^2 < 1"));
                }
                check(self.left(1), 1)
            }
            LeftRule::Constant { left } => check(*left, 1),
            LeftRule::Table { left } | LeftRule::Extended { left, .. } => {
                if left.len() < 2 {
                    return Err(invalid("table rule needs at least one entry after index 0"));
                }
                // entries may round to 0 when p_i is within an ulp of 1
                (1..left.len() as u64).try_for_each(|i| {
                    let q = left[i as usize];
                    if q == 0.0 { Ok(()) } else { check(q, i) }
                })
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct HalfLine {
    name: String,
    count: CountLaw,
    rule: LeftRule,
    /// Probability that a child of a particle at 0 stays at 0.
    stay0: f64,
    qbar: (f64, f64),
}

impl HalfLine {
    pub fn new(name: &str, count: CountLaw, rule: LeftRule, stay0: f64) -> Result<HalfLine> {
        count.validate()?;
        rule.validate()?;
        if !(0.0..1.0).contains(&stay0) {
            return Err(invalid(format!("probability of staying at 0 must lie in [0,1), got {stay0}")));
        }
        let qbar = scalar_extinction(&count);
        Ok(HalfLine { name: name.to_string(), count, rule, stay0, qbar })
    }

    pub fn count(&self) -> &CountLaw {
        &self.count
    }

    pub fn rule(&self) -> &LeftRule {
        &self.rule
    }

    pub fn p(&self, i: u64) -> f64 {
        if i == 0 {
            1.0 - self.stay0
        } else {
            1.0 - self.rule.left(i)
        }
    }

    /// Bracket on the scalar extinction probability of the count law.
    pub fn qbar(&self) -> (f64, f64) {
        self.qbar
    }

    /// True when `sum_i c^i (1 - p_i) < inf` with `c` the largest count, so
    /// that `prod_i p_i^(c^i) > 0`.
    pub fn product_positive(&self) -> bool {
        let Some(c) = self.count.max_count() else { return false };
        match &self.rule {
            LeftRule::Geometric { b, .. } => *b > c as f64,
            LeftRule::Extended { log_c, .. } => *log_c <= (c as f64).ln(),
            _ => false,
        }
    }

    /// `sum_{i=1}^n c^i ln p_i`.
    pub fn log_product_prefix(&self, n: u64) -> f64 {
        let c = self.count.max_count().unwrap_or(0) as f64;
        (1..=n).map(|i| c.powi(i as i32) * (-self.rule.left(i)).ln_1p()).sum()
    }

    /// Expected number of children at 0 after two generations for the
    /// process confined to `{0, 1}`.
    pub fn confined_return_mean(&self) -> f64 {
        let m = self.count.mean();
        m * m * self.p(0) * self.rule.left(1)
    }

    /// Lower bound on the probability that the progeny of a particle at `y`
    /// never visits a site left of `y`: every descendant keeps moving right.
    fn never_left(&self, y: u64) -> f64 {
        let Some(c) = self.count.max_count() else { return 0.0 };
        let LeftRule::Geometric { a, b, .. } = self.rule else { return 0.0 };
        let cf = c as f64;
        if c == 0 {
            return 1.0;
        }
        if b <= cf {
            return 0.0;
        }
        const K: i32 = 200;
        let mut log = 0.0;
        for k in 0..K {
            let q = self.rule.left(y + k as u64);
            log += cf.powi(k + 1) * (-q).ln_1p();
        }
        let tail_q = a / b.powi(y as i32 + K);
        let tail = cf * a / b.powi(y as i32) * (cf / b).powi(K) / (1.0 - cf / b) / (1.0 - tail_q);
        (log - tail).exp()
    }
}

impl SiteSource for HalfLine {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn root(&self) -> Site {
        Site::Int(0)
    }

    fn law(&self, x: &Site) -> Result<SiteLaw> {
        let i = match x.as_int() {
            Some(i) if i >= 0 => i,
            _ => return Err(Error::UnknownSite(x.to_string())),
        };
        let mut row = Vec::with_capacity(2);
        if i == 0 {
            if self.stay0 > 0.0 {
                row.push((Site::Int(0), self.stay0));
            }
            row.push((Site::Int(1), 1.0 - self.stay0));
        } else {
            let q = self.rule.left(i as u64);
            row.push((Site::Int(i + 1), 1.0 - q));
            row.push((Site::Int(i - 1), q));
        }
        Ok(SiteLaw::factored(self.count.clone(), row))
    }

    // Locally isomorphic to a Galton-Watson process, so the global extinction
    // probability is the scalar root everywhere.
    fn extinction_bounds(&self, _outside: &Site) -> Bounds {
        Bounds::new(self.qbar.0, self.qbar.1)
    }

    fn local_bounds(&self, outside: &Site, target: &[Site]) -> Bounds {
        let Some(y) = outside.as_int() else { return Bounds::TRIVIAL };
        let right_of_target = target.iter().all(|a| a.as_int().is_some_and(|a| a < y));
        if y < 1 || !right_of_target {
            return Bounds::TRIVIAL;
        }
        Bounds::new(self.never_left(y as u64), 1.0)
    }
}

/// Count law `{0: 1/4, 2: 3/4}` with rightward probabilities `p_i`, `p_0 = 1`.
pub fn halfline_binary(rule: LeftRule) -> Result<HalfLine> {
    HalfLine::new("halfline-binary", CountLaw::Pmf(vec![0.25, 0.0, 0.75]), rule, 0.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct TunedSequences {
    pub qbar: f64,
    /// Value of `prod_i alpha_i`.
    pub alpha_product: f64,
    pub alpha: Vec<f64>,
    /// `N_0 = 1, N_1, ...`.
    pub n: Vec<u64>,
    /// `p_0, p_1, ...`.
    pub p: Vec<f64>,
    /// `1 - p_i`, stored without cancellation.
    pub left: Vec<f64>,
    /// Partial sum of `(1 - p_i) prod_{j<=i} N_j` over `i >= 1`.
    pub summability: f64,
    pub summability_bound: f64,
}

/// Sequences of the second half-line construction for a count law `rho`
/// with mean above one, computed for `terms` indices.
pub fn halfline_tuned(rho: CountLaw, terms: usize) -> Result<(HalfLine, TunedSequences)> {
    rho.validate()?;
    let c = rho
        .max_count()
        .ok_or_else(|| invalid("count law must have bounded support for this construction"))?;
    let mean = rho.mean();
    if mean <= 1.0 {
        return Err(invalid(format!("count law must have mean > 1, got {mean}")));
    }
    if terms < 2 {
        return Err(invalid("at least two terms are needed"));
    }
    let (qbar, _) = scalar_extinction(&rho);
    // The product of the alphas must exceed qbar; when 1 - qbar < 1 it is
    // also made to exceed 1 - qbar.
    let m = if qbar > 0.0 { qbar.max(1.0 - qbar) } else { qbar };
    let target = 0.5 * (1.0 + m);
    let cdf: Vec<f64> = (0..=c).scan(0.0, |s, k| {
        *s += rho.prob(k);
        Some(*s)
    }).collect();

    let mut n = vec![1u64];
    let mut alpha = vec![target.powf(0.5)];
    let mut log_prod = 0.0f64;
    let mut k = 0usize;
    // Continue past `terms` until the rule settles on the largest count, so
    // later indices can be extended with N = c.
    while k + 1 < terms || *n.last().unwrap() != c as u64 {
        if k > 10_000 {
            return Err(Error::Resource("sequence N did not settle".into()));
        }
        let a_next = target.powf(0.5f64.powi(k as i32 + 2));
        let need = a_next.ln() / log_prod.exp();
        let next = (0..=c)
            .find(|&j| cdf[j].ln() > need || (j == c && cdf[j] >= 1.0 - 1e-15))
            .ok_or_else(|| invalid("no admissible N"))?;
        if !(cdf[next].ln() > need) {
            return Err(invalid(format!("inequality for N_{} fails", k + 1)));
        }
        alpha.push(a_next);
        n.push(next as u64);
        log_prod += (next as f64).ln();
        k += 1;
    }
    let len = n.len();
    let p0 = 0.5 * (1.0 - 1.0 / mean);
    let mut left = vec![0.0; len];
    let mut p = vec![p0; len];
    let mut lp = 0.0;
    let mut summability = 0.0;
    for i in 1..len {
        lp += (n[i] as f64).ln();
        left[i] = 1.0 / ((i * i) as f64 * lp.exp());
        p[i] = 1.0 - left[i];
        summability += left[i] * lp.exp();
    }
    let bound = std::f64::consts::PI.powi(2) / 6.0;
    if summability >= bound {
        return Err(invalid("summability bound violated"));
    }
    let rule = LeftRule::Extended { left: left.clone(), log_prod: lp, log_c: (c as f64).ln() };
    let h = HalfLine::new("halfline-tuned", rho, rule, 1.0 - p0)?;
    let seq = TunedSequences {
        qbar,
        alpha_product: target,
        alpha,
        n,
        p,
        left,
        summability,
        summability_bound: bound,
    };
    Ok((h, seq))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_binary() -> HalfLine {
        halfline_binary(LeftRule::Geometric { p1: 0.5, a: 1.0, b: 4.0 }).unwrap()
    }

    #[test]
    fn left_probability_keeps_precision() {
        let h = default_binary();
        assert_eq!(h.rule().left(30), 4f64.powi(-30));
        assert!(h.rule().left(30) > 0.0);
        assert_eq!(h.p(1), 0.5);
    }

    #[test]
    fn confined_mean_is_nine_eighths() {
        assert!((default_binary().confined_return_mean() - 9.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn product_is_positive_for_default_rule() {
        let h = default_binary();
        assert!(h.product_positive());
        // sum_i 2^i 4^-i C with C = 1/(1 - 1/2) for the ln(1-q) <= q/(1-q) bound
        let bound = -(1..=60).map(|i| 0.5f64.powi(i) * 2.0).sum::<f64>();
        assert!(h.log_product_prefix(60) >= bound);
        let flat = halfline_binary(LeftRule::Constant { left: 0.5 }).unwrap();
        assert!(!flat.product_positive());
    }

    #[test]
    fn never_left_bound_matches_direct_product() {
        let h = default_binary();
        // Direct product with many terms; the tail beyond is negligible.
        let direct: f64 = (0..60).map(|k| 2f64.powi(k + 1) * (-h.rule().left(5 + k as u64)).ln_1p()).sum();
        let b = h.never_left(5);
        assert!(b <= direct.exp() + 1e-15);
        assert!((b - direct.exp()).abs() < 1e-12);
    }

    #[test]
    fn tuned_sequences_for_default_law() {
        let (h, s) = halfline_tuned(CountLaw::Pmf(vec![0.25, 0.0, 0.75]), 20).unwrap();
        assert!((s.qbar - 1.0 / 3.0).abs() < 1e-12);
        assert!(s.alpha_product > 2.0 / 3.0);
        assert_eq!(s.n[0], 1);
        assert!(s.summability < s.summability_bound);
        assert!((1.0 - h.p(0)) * 1.5 > 1.0);
        // the displayed inequality on the computed prefix
        let mut log_prod = 0.0;
        for i in 0..s.n.len() - 1 {
            log_prod += (s.n[i] as f64).ln();
            let cdf: f64 = (0..=s.n[i + 1] as usize).map(|j| [0.25, 0.0, 0.75].get(j).copied().unwrap_or(0.0)).sum();
            assert!(cdf.ln() > s.alpha[i + 1].ln() / log_prod.exp());
        }
    }

    #[test]
    fn tuned_rejects_unbounded_support() {
        assert!(halfline_tuned(CountLaw::Geometric { mean: 2.0 }, 10).is_err());
    }

    #[test]
    fn tuned_no_death() {
        let (_, s) = halfline_tuned(CountLaw::dirac(2), 10).unwrap();
        assert_eq!(s.qbar, 0.0);
        assert!(s.n[1..].iter().all(|&n| n == 2));
    }

    #[test]
    fn tuned_rule_extends_past_prefix() {
        let (h, s) = halfline_tuned(CountLaw::dirac(2), 10).unwrap();
        let len = s.left.len() as u64;
        let at = |i: u64| h.rule().left(i);
        // N_j = 2 throughout, so 1 - p_i = 1 / (i^2 2^i)
        for i in [1, len - 1, len, len + 5] {
            let want = 1.0 / ((i * i) as f64 * 2f64.powi(i as i32));
            assert!((at(i) - want).abs() < 1e-12 * want, "i = {i}");
        }
    }
}
