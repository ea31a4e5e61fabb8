use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::site::Site;

pub const SUM_TOL: f64 = 1e-12;

/// Law of the total number of children.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountLaw {
    /// `pmf[i]` is the probability of exactly `i` children.
    Pmf(Vec<f64>),
    /// `P(i) = (1/(1+mean)) (mean/(1+mean))^i`, stored by its mean.
    Geometric { mean: f64 },
}

impl CountLaw {
    pub fn dirac(n: usize) -> CountLaw {
        let mut pmf = vec![0.0; n + 1];
        pmf[n] = 1.0;
        CountLaw::Pmf(pmf)
    }

    pub fn from_pairs(pairs: &[(usize, f64)]) -> CountLaw {
        let len = pairs.iter().map(|&(k, _)| k + 1).max().unwrap_or(1);
        let mut pmf = vec![0.0; len];
        for &(k, p) in pairs {
            pmf[k] += p;
        }
        CountLaw::Pmf(pmf)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            CountLaw::Pmf(pmf) => {
                if pmf.is_empty() {
                    return Err(invalid("empty count pmf"));
                }
                if pmf.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(invalid("count pmf has a negative or non-finite entry"));
                }
                let s: f64 = pmf.iter().sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(invalid(format!("count pmf sums to {s}, expected 1")));
                }
            }
            CountLaw::Geometric { mean } => {
                if !mean.is_finite() || *mean < 0.0 {
                    return Err(invalid(format!("geometric mean {mean} must be finite and >= 0")));
                }
            }
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        match self {
            CountLaw::Pmf(pmf) => pmf.iter().enumerate().map(|(i, p)| i as f64 * p).sum(),
            CountLaw::Geometric { mean } => *mean,
        }
    }

    pub fn prob(&self, i: usize) -> f64 {
        match self {
            CountLaw::Pmf(pmf) => pmf.get(i).copied().unwrap_or(0.0),
            CountLaw::Geometric { mean } => {
                let q = 1.0 / (1.0 + mean);
                q * (mean * q).powi(i as i32)
            }
        }
    }

    /// Largest count with positive mass, `None` for unbounded support.
    pub fn max_count(&self) -> Option<usize> {
        match self {
            CountLaw::Pmf(pmf) => Some(pmf.iter().rposition(|&p| p > 0.0).unwrap_or(0)),
            CountLaw::Geometric { mean } if *mean == 0.0 => Some(0),
            CountLaw::Geometric { .. } => None,
        }
    }

    /// Probability generating function at `s`, given also `gap = 1 - s`
    /// computed by the caller without cancellation.
    #[inline]
    pub fn pgf(&self, s: f64, gap: f64) -> f64 {
        match self {
            CountLaw::Pmf(pmf) => pmf.iter().rev().fold(0.0, |acc, &p| acc * s + p),
            CountLaw::Geometric { mean } => 1.0 / (1.0 + mean * gap),
        }
    }

    /// Derivative of the pgf at `s`, with `gap = 1 - s`.
    pub fn pgf_derivative(&self, s: f64, gap: f64) -> f64 {
        match self {
            CountLaw::Pmf(pmf) => {
                pmf.iter().enumerate().skip(1).rev().fold(0.0, |acc, (i, &p)| acc * s + i as f64 * p)
            }
            CountLaw::Geometric { mean } => mean / (1.0 + mean * gap).powi(2),
        }
    }

    /// Direct series evaluation of the pgf, truncated once the remaining
    /// mass drops below `1 - mass`.
    pub fn pgf_series(&self, s: f64, mass: f64) -> f64 {
        let mut acc = 0.0;
        let mut seen = 0.0;
        let mut i = 0usize;
        while seen < mass {
            let p = self.prob(i);
            acc += p * s.powi(i as i32);
            seen += p;
            i += 1;
            if let Some(m) = self.max_count() {
                if i > m {
                    break;
                }
            }
        }
        acc
    }

    /// Finite list of (count, probability) pairs with positive mass, the
    /// geometric tail cut once `1 - mass` remains.
    pub fn atoms(&self, mass: f64) -> Vec<(usize, f64)> {
        match self {
            CountLaw::Pmf(pmf) => pmf
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(i, p)| (i, *p))
                .collect(),
            CountLaw::Geometric { .. } => {
                let mut out = Vec::new();
                let mut seen = 0.0;
                let mut i = 0;
                while seen < mass {
                    let p = self.prob(i);
                    out.push((i, p));
                    seen += p;
                    i += 1;
                }
                out
            }
        }
    }
}

/// One possible offspring configuration and its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub offspring: Vec<(Site, u32)>,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffspringLawGeneral {
    pub atoms: Vec<Atom>,
}

/// Children are generated by `count` and placed independently according to
/// `diffusion`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffspringLawFactored {
    pub count: CountLaw,
    pub diffusion: Vec<(Site, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SiteLaw {
    General(OffspringLawGeneral),
    Factored(OffspringLawFactored),
}

impl SiteLaw {
    pub fn factored(count: CountLaw, diffusion: Vec<(Site, f64)>) -> SiteLaw {
        SiteLaw::Factored(OffspringLawFactored { count, diffusion })
    }

    pub fn general(atoms: Vec<(Vec<(Site, u32)>, f64)>) -> SiteLaw {
        SiteLaw::General(OffspringLawGeneral {
            atoms: atoms.into_iter().map(|(offspring, p)| Atom { offspring, p }).collect(),
        })
    }

    /// No children, ever.
    pub fn childless() -> SiteLaw {
        SiteLaw::factored(CountLaw::dirac(0), Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SiteLaw::General(g) => {
                if g.atoms.is_empty() {
                    return Err(invalid("general law without atoms"));
                }
                if g.atoms.iter().any(|a| !a.p.is_finite() || a.p < 0.0 || a.p > 1.0 + SUM_TOL) {
                    return Err(invalid("atom probability outside [0,1]"));
                }
                let s: f64 = g.atoms.iter().map(|a| a.p).sum();
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(invalid(format!("atom probabilities sum to {s}, expected 1")));
                }
            }
            SiteLaw::Factored(f) => {
                f.count.validate()?;
                if f.diffusion.iter().any(|(_, p)| !p.is_finite() || *p < 0.0) {
                    return Err(invalid("diffusion row has a negative or non-finite entry"));
                }
                let s: f64 = f.diffusion.iter().map(|(_, p)| p).sum();
                let childless = f.count.max_count() == Some(0);
                if childless && f.diffusion.is_empty() {
                    return Ok(());
                }
                if (s - 1.0).abs() > SUM_TOL {
                    return Err(invalid(format!("diffusion row sums to {s}, expected 1")));
                }
            }
        }
        Ok(())
    }

    /// Expected number of children sent to each site (a row of `M`).
    pub fn mean_row(&self) -> Vec<(Site, f64)> {
        let mut row: BTreeMap<&Site, f64> = BTreeMap::new();
        match self {
            SiteLaw::General(g) => {
                for a in &g.atoms {
                    for (y, k) in &a.offspring {
                        *row.entry(y).or_default() += a.p * *k as f64;
                    }
                }
            }
            SiteLaw::Factored(f) => {
                let m = f.count.mean();
                for (y, p) in &f.diffusion {
                    *row.entry(y).or_default() += m * p;
                }
            }
        }
        row.into_iter().filter(|(_, v)| *v > 0.0).map(|(y, v)| (y.clone(), v)).collect()
    }

    /// Sites that receive children with positive probability.
    pub fn support(&self) -> Vec<Site> {
        self.mean_row().into_iter().map(|(y, _)| y).collect()
    }

    pub fn prob_childless(&self) -> f64 {
        match self {
            SiteLaw::General(g) => g
                .atoms
                .iter()
                .filter(|a| a.offspring.iter().all(|(_, k)| *k == 0))
                .map(|a| a.p)
                .sum(),
            SiteLaw::Factored(f) => f.count.prob(0),
        }
    }

    /// Probability that exactly one child lands in the set described by `inside`.
    pub fn prob_exactly_one_in(&self, inside: impl Fn(&Site) -> bool) -> f64 {
        match self {
            SiteLaw::General(g) => g
                .atoms
                .iter()
                .filter(|a| {
                    a.offspring.iter().filter(|(y, _)| inside(y)).map(|(_, k)| *k as u64).sum::<u64>()
                        == 1
                })
                .map(|a| a.p)
                .sum(),
            SiteLaw::Factored(f) => {
                let pc: f64 = f.diffusion.iter().filter(|(y, _)| inside(y)).map(|(_, p)| p).sum();
                match &f.count {
                    CountLaw::Pmf(pmf) => pmf
                        .iter()
                        .enumerate()
                        .skip(1)
                        .map(|(n, r)| r * n as f64 * pc * (1.0 - pc).powi(n as i32 - 1))
                        .sum(),
                    CountLaw::Geometric { mean } => {
                        let a = mean / (1.0 + mean);
                        let d = 1.0 - a * (1.0 - pc);
                        pc / (1.0 + mean) * a / (d * d)
                    }
                }
            }
        }
    }

    /// Enumerates the law as explicit atoms. Factored laws are expanded into
    /// their multinomial placements; geometric counts are cut at `mass`.
    pub fn to_atoms(&self, mass: f64) -> Vec<Atom> {
        match self {
            SiteLaw::General(g) => g.atoms.clone(),
            SiteLaw::Factored(f) => {
                let mut out = Vec::new();
                for (n, r) in f.count.atoms(mass) {
                    let mut buf = vec![0u32; f.diffusion.len()];
                    multinomial_atoms(&f.diffusion, n as u32, 0, r, &mut buf, &mut out);
                }
                out
            }
        }
    }
}

fn multinomial_atoms(
    row: &[(Site, f64)],
    left: u32,
    pos: usize,
    weight: f64,
    buf: &mut Vec<u32>,
    out: &mut Vec<Atom>,
) {
    if pos + 1 >= row.len() {
        if row.is_empty() {
            if left == 0 {
                out.push(Atom { offspring: Vec::new(), p: weight });
            }
            return;
        }
        let last = row.len() - 1;
        buf[last] = left;
        let p = weight * row[last].1.powi(left as i32);
        if p > 0.0 {
            let offspring = row
                .iter()
                .zip(buf.iter())
                .filter(|(_, k)| **k > 0)
                .map(|((y, _), k)| (y.clone(), *k))
                .collect();
            out.push(Atom { offspring, p });
        }
        return;
    }
    let mut binom = 1.0;
    for k in 0..=left {
        if k > 0 {
            binom *= (left - k + 1) as f64 / k as f64;
        }
        buf[pos] = k;
        let w = weight * binom * row[pos].1.powi(k as i32);
        if w > 0.0 {
            multinomial_atoms(row, left - k, pos + 1, w, buf, out);
        }
    }
    buf[pos] = 0;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(i: i64) -> Site {
        Site::Int(i)
    }

    #[test]
    fn geometric_pmf_matches_closed_form() {
        let c = CountLaw::Geometric { mean: 2.0 };
        for i in 0..10 {
            let want = (1.0 / 3.0) * (2.0f64 / 3.0).powi(i);
            assert!((c.prob(i as usize) - want).abs() < 1e-15);
        }
        assert!((c.pgf(0.0, 1.0) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pmf_validation() {
        assert!(CountLaw::Pmf(vec![0.25, 0.0, 0.75]).validate().is_ok());
        assert!(CountLaw::Pmf(vec![0.25, 0.7]).validate().is_err());
        assert!(CountLaw::Pmf(vec![-0.1, 1.1]).validate().is_err());
        assert!(CountLaw::Geometric { mean: -1.0 }.validate().is_err());
    }

    #[test]
    fn factored_mean_row() {
        let law = SiteLaw::factored(CountLaw::Pmf(vec![0.25, 0.0, 0.75]), vec![(s(0), 0.25), (s(2), 0.75)]);
        let row = law.mean_row();
        assert_eq!(row.len(), 2);
        assert!((row[0].1 - 1.5 * 0.25).abs() < 1e-15);
        assert!((row[1].1 - 1.5 * 0.75).abs() < 1e-15);
    }

    #[test]
    fn multinomial_expansion_sums_to_one() {
        let law = SiteLaw::factored(CountLaw::Pmf(vec![0.25, 0.0, 0.75]), vec![(s(0), 0.3), (s(2), 0.7)]);
        let atoms = law.to_atoms(1.0);
        // {0 children}, {2@0}, {1@0,1@2}, {2@2}
        assert_eq!(atoms.len(), 4);
        let total: f64 = atoms.iter().map(|a| a.p).sum();
        assert!((total - 1.0).abs() < 1e-14);
        let both = atoms
            .iter()
            .find(|a| a.offspring.len() == 2)
            .expect("mixed atom");
        assert!((both.p - 0.75 * 2.0 * 0.3 * 0.7).abs() < 1e-15);
    }

    #[test]
    fn exactly_one_geometric_closed_form() {
        let law = SiteLaw::factored(CountLaw::Geometric { mean: 1.7 }, vec![(s(0), 0.4), (s(1), 0.6)]);
        let want: f64 = (1..400)
            .map(|n| CountLaw::Geometric { mean: 1.7 }.prob(n) * n as f64 * 0.4 * 0.6f64.powi(n as i32 - 1))
            .sum();
        let got = law.prob_exactly_one_in(|y| *y == s(0));
        assert!((got - want).abs() < 1e-12);
    }
}
