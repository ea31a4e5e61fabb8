//! Monte Carlo simulation of BRWs on a truncated domain.
//!
//! Particles are aggregated per site: a generation step draws, for each
//! occupied site, the number of particles with each offspring outcome in one
//! multinomial draw and places the children with another. Cost per step is
//! proportional to the number of occupied sites, not to the population.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma, Geometric, Poisson};
use rayon::prelude::*;
use serde::Serialize;

use crate::domain::{moment_matrix, BoundaryPolicy, CompiledLaw, Target, TruncatedDomain};
use crate::error::{invalid, Error, Result};
use crate::law::CountLaw;
use crate::site::Site;

pub const DEFAULT_CAP: u64 = 1_000_000;

/// Particle counts per window index.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParticleConfiguration {
    pub counts: BTreeMap<usize, u64>,
    /// Children sent outside the window so far. Only kept under
    /// `OutsideImmortal`, where they count as survivors.
    pub escaped: u64,
    pub generation: usize,
}

impl ParticleConfiguration {
    pub fn single(index: usize) -> ParticleConfiguration {
        ParticleConfiguration { counts: BTreeMap::from([(index, 1)]), escaped: 0, generation: 0 }
    }

    pub fn total(&self) -> u64 {
        self.counts.values().sum()
    }
}

/// Per-trial random stream derived from the master seed and the trial index.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

fn binomial<R: Rng>(rng: &mut R, n: u64, p: f64) -> u64 {
    if n == 0 || p <= 0.0 {
        0
    } else if p >= 1.0 {
        n
    } else {
        Binomial::new(n, p).expect("valid binomial").sample(rng)
    }
}

/// Multinomial split of `n` over weights `w`, by sequential binomials with
/// conditionals taken from suffix sums.
fn multinomial<R: Rng>(rng: &mut R, n: u64, w: &[f64], out: &mut Vec<u64>) {
    out.clear();
    let mut suffix = vec![0.0; w.len() + 1];
    for i in (0..w.len()).rev() {
        suffix[i] = suffix[i + 1] + w[i];
    }
    let mut left = n;
    for i in 0..w.len() {
        if left == 0 {
            out.push(0);
            continue;
        }
        let k = if i + 1 == w.len() { left } else { binomial(rng, left, w[i] / suffix[i]) };
        out.push(k);
        left -= k;
    }
}

/// Total number of children of `n` independent particles.
fn total_children<R: Rng>(rng: &mut R, count: &CountLaw, n: u64, buf: &mut Vec<u64>) -> u64 {
    match count {
        CountLaw::Pmf(pmf) => {
            multinomial(rng, n, pmf, buf);
            buf.iter().enumerate().map(|(k, c)| k as u64 * c).sum()
        }
        CountLaw::Geometric { mean } => {
            if *mean == 0.0 {
                return 0;
            }
            let p = 1.0 / (1.0 + mean);
            if n < 16 {
                let g = Geometric::new(p).expect("valid geometric");
                (0..n).map(|_| g.sample(rng)).sum()
            } else {
                // negative binomial as a gamma mixture of Poissons
                let lam: f64 = Gamma::new(n as f64, *mean).expect("valid gamma").sample(rng);
                if lam <= 0.0 {
                    0
                } else {
                    let x: f64 = Poisson::new(lam).expect("valid poisson").sample(rng);
                    x as u64
                }
            }
        }
    }
}

/// One generation: every particle is replaced by its offspring.
pub fn step<R: Rng>(dom: &TruncatedDomain, config: &ParticleConfiguration, rng: &mut R) -> ParticleConfiguration {
    let w = &dom.window;
    let mut next: BTreeMap<usize, u64> = BTreeMap::new();
    let mut escaped = config.escaped;
    let keep_escaped = dom.policy == BoundaryPolicy::OutsideImmortal;
    let mut buf = Vec::new();
    let mut place = Vec::new();
    let mut add = |t: Target, k: u64, next: &mut BTreeMap<usize, u64>| {
        if k == 0 {
            return;
        }
        match t {
            Target::In(j) => *next.entry(j as usize).or_default() += k,
            Target::Out(_) => {
                if keep_escaped {
                    escaped += k;
                }
            }
        }
    };
    for (&x, &n) in &config.counts {
        match w.compiled(x) {
            CompiledLaw::Factored { count, row } => {
                let total = total_children(rng, count, n, &mut buf);
                let weights: Vec<f64> = row.iter().map(|(_, p)| *p).collect();
                multinomial(rng, total, &weights, &mut place);
                for (&(t, _), &k) in row.iter().zip(&place) {
                    add(t, k, &mut next);
                }
            }
            CompiledLaw::General { atoms } => {
                let weights: Vec<f64> = atoms.iter().map(|(_, p)| *p).collect();
                multinomial(rng, n, &weights, &mut place);
                for ((f, _), &k) in atoms.iter().zip(&place) {
                    for &(t, c) in f {
                        add(t, k * c as u64, &mut next);
                    }
                }
            }
        }
    }
    ParticleConfiguration { counts: next, escaped, generation: config.generation + 1 }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Event {
    /// Population positive at the horizon.
    Global,
    /// Some visit to the target at a generation `>= settle` and survival to
    /// the horizon; a proxy for infinitely many visits.
    Local { target: Vec<Site>, settle: usize },
    /// No visit to the target up to the horizon.
    NeverVisit { target: Vec<Site> },
    /// Survival to the horizon with no visit to the target at a generation
    /// `>= after`.
    GlobalAvoiding { target: Vec<Site>, after: usize },
}

impl Event {
    pub fn label(&self) -> String {
        let keys = |t: &[Site]| t.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        match self {
            Event::Global => "global".into(),
            Event::Local { target, settle } => format!("local({};{settle})", keys(target)),
            Event::NeverVisit { target } => format!("never-visit({})", keys(target)),
            Event::GlobalAvoiding { target, after } => format!("global-avoiding({};{after})", keys(target)),
        }
    }

    fn target(&self) -> Option<&[Site]> {
        match self {
            Event::Global => None,
            Event::Local { target, .. } | Event::NeverVisit { target } | Event::GlobalAvoiding { target, .. } => {
                Some(target)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct McConfig {
    pub trials: u64,
    pub horizon: usize,
    pub cap: u64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { trials: 10_000, horizon: 200, cap: DEFAULT_CAP, seed: 0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EstimateCI {
    pub event: String,
    pub point: f64,
    pub stderr: f64,
    pub trials: u64,
    pub capped_trials: u64,
    pub seed: u64,
    pub horizon: usize,
    /// The same event read at twice the horizon.
    pub point_2h: f64,
    pub stderr_2h: f64,
    /// True when the two horizons differ by more than 3 combined stderrs.
    pub horizon_flag: bool,
}

/// What one trial saw, enough to evaluate every event at both horizons.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrialOutcome {
    pub alive_h: bool,
    pub alive_2h: bool,
    pub capped: bool,
    /// Per target set: generations of the first visit and of the last visit
    /// up to `h` and up to `2h`.
    pub visits: Vec<VisitRecord>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct VisitRecord {
    pub first: Option<usize>,
    pub last_h: Option<usize>,
    pub last_2h: Option<usize>,
}

fn resolve(dom: &TruncatedDomain, sites: &[Site]) -> Result<Vec<bool>> {
    if sites.is_empty() {
        return Err(invalid("target set must be nonempty"));
    }
    let mut mask = vec![false; dom.len()];
    for s in sites {
        let i = dom.window.index_of(s).ok_or_else(|| Error::UnknownSite(s.to_string()))?;
        mask[i] = true;
    }
    Ok(mask)
}

pub fn run_trial(
    dom: &TruncatedDomain,
    start: usize,
    masks: &[Vec<bool>],
    horizon: usize,
    cap: u64,
    rng: &mut ChaCha8Rng,
) -> TrialOutcome {
    let mut config = ParticleConfiguration::single(start);
    let mut out = TrialOutcome { visits: vec![VisitRecord::default(); masks.len()], ..Default::default() };
    let record = |config: &ParticleConfiguration, out: &mut TrialOutcome| {
        let g = config.generation;
        for (m, v) in masks.iter().zip(out.visits.iter_mut()) {
            if config.counts.keys().any(|&i| m[i]) {
                v.first.get_or_insert(g);
                if g <= horizon {
                    v.last_h = Some(g);
                }
                v.last_2h = Some(g);
            }
        }
    };
    record(&config, &mut out);
    for g in 1..=2 * horizon {
        config = step(dom, &config, rng);
        record(&config, &mut out);
        let total = config.total();
        if total + config.escaped == 0 {
            return out;
        }
        if g == horizon {
            out.alive_h = true;
        }
        if total > cap {
            // the observed prefix decides; survival is assumed from here on
            out.capped = true;
            out.alive_h = true;
            out.alive_2h = true;
            return out;
        }
    }
    out.alive_2h = true;
    if horizon == 0 {
        out.alive_h = true;
    }
    out
}

fn holds(event: &Event, v: Option<&VisitRecord>, o: &TrialOutcome, at_2h: bool) -> bool {
    let alive = if at_2h { o.alive_2h } else { o.alive_h };
    let last = v.and_then(|v| if at_2h { v.last_2h } else { v.last_h });
    match event {
        Event::Global => alive,
        Event::Local { settle, .. } => alive && last.is_some_and(|g| g >= *settle),
        Event::NeverVisit { .. } => last.is_none(),
        Event::GlobalAvoiding { after, .. } => alive && !last.is_some_and(|g| g >= *after),
    }
}

fn ci(successes: u64, trials: u64) -> (f64, f64) {
    let p = successes as f64 / trials as f64;
    (p, (p * (1.0 - p) / trials as f64).sqrt())
}

/// Survival estimates from `start`. Each trial uses its own stream, so the
/// result does not depend on scheduling or thread count.
pub fn estimate(dom: &TruncatedDomain, start: &Site, events: &[Event], cfg: &McConfig) -> Result<Vec<EstimateCI>> {
    if cfg.trials == 0 {
        return Err(invalid("trials must be at least 1"));
    }
    if cfg.horizon == 0 {
        return Err(invalid("horizon must be at least 1"));
    }
    let s = dom.window.index_of(start).ok_or_else(|| Error::UnknownSite(start.to_string()))?;
    let mut masks = Vec::new();
    let mut slot = Vec::new();
    for e in events {
        match e {
            Event::Local { settle: g, .. } | Event::GlobalAvoiding { after: g, .. } if *g > cfg.horizon => {
                return Err(invalid(format!("horizon {} is below the settle generation {g}", cfg.horizon)));
            }
            _ => {}
        }
        slot.push(match e.target() {
            Some(t) => {
                masks.push(resolve(dom, t)?);
                Some(masks.len() - 1)
            }
            None => None,
        });
    }
    let outcomes: Vec<TrialOutcome> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(dom, s, &masks, cfg.horizon, cfg.cap, &mut trial_rng(cfg.seed, t)))
        .collect();
    let capped = outcomes.iter().filter(|o| o.capped).count() as u64;
    Ok(events
        .iter()
        .zip(&slot)
        .map(|(e, k)| {
            let count = |at_2h| {
                outcomes.iter().filter(|o| holds(e, k.map(|k| &o.visits[k]), o, at_2h)).count() as u64
            };
            let (point, stderr) = ci(count(false), cfg.trials);
            let (point_2h, stderr_2h) = ci(count(true), cfg.trials);
            let spread = (stderr * stderr + stderr_2h * stderr_2h).sqrt();
            EstimateCI {
                event: e.label(),
                point,
                stderr,
                trials: cfg.trials,
                capped_trials: capped,
                seed: cfg.seed,
                horizon: cfg.horizon,
                point_2h,
                stderr_2h,
                horizon_flag: (point - point_2h).abs() > 3.0 * spread,
            }
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct OccupancyRow {
    pub site: String,
    pub expected: f64,
    pub mean: f64,
    pub z: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OccupancyReport {
    pub generation: usize,
    pub trials: u64,
    pub rows: Vec<OccupancyRow>,
    /// Sites with `|z| > 4`.
    pub flagged: Vec<String>,
}

/// Empirical mean counts after `n` generations against the row of `M^n`.
pub fn occupancy_check(dom: &TruncatedDomain, start: &Site, n: usize, trials: u64, seed: u64) -> Result<OccupancyReport> {
    if trials < 2 {
        return Err(invalid("occupancy check needs at least 2 trials"));
    }
    let s = dom.window.index_of(start).ok_or_else(|| Error::UnknownSite(start.to_string()))?;
    let m = moment_matrix(dom);
    let mut row = vec![0.0; dom.len()];
    row[s] = 1.0;
    let mut tmp = vec![0.0; dom.len()];
    for _ in 0..n {
        m.left_mul(&row, &mut tmp);
        std::mem::swap(&mut row, &mut tmp);
    }
    let finals: Vec<BTreeMap<usize, u64>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let mut c = ParticleConfiguration::single(s);
            for _ in 0..n {
                c = step(dom, &c, &mut rng);
            }
            c.counts
        })
        .collect();
    let mut sum = vec![0.0; dom.len()];
    let mut sq = vec![0.0; dom.len()];
    for f in &finals {
        for (&i, &k) in f {
            sum[i] += k as f64;
            sq[i] += (k as f64) * (k as f64);
        }
    }
    let nt = trials as f64;
    let mut rows = Vec::new();
    let mut flagged = Vec::new();
    for i in 0..dom.len() {
        if row[i] == 0.0 && sum[i] == 0.0 {
            continue;
        }
        let mean = sum[i] / nt;
        let var = ((sq[i] - nt * mean * mean) / (nt - 1.0)).max(0.0);
        let se = (var / nt).sqrt();
        let diff = mean - row[i];
        let z = if se > 0.0 {
            diff / se
        } else if diff.abs() <= 1e-12 * row[i].abs().max(1.0) {
            0.0
        } else {
            f64::INFINITY
        };
        let site = dom.window.site(i).to_string();
        if z.abs() > 4.0 {
            flagged.push(site.clone());
        }
        rows.push(OccupancyRow { site, expected: row[i], mean, z });
    }
    Ok(OccupancyReport { generation: n, trials, rows, flagged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn multinomial_preserves_total() {
        let mut rng = trial_rng(1, 0);
        let mut out = Vec::new();
        for n in [0u64, 1, 7, 1000, 1 << 40] {
            multinomial(&mut rng, n, &[0.2, 0.0, 0.5, 0.3], &mut out);
            assert_eq!(out.iter().sum::<u64>(), n);
            assert_eq!(out[1], 0);
        }
    }

    #[test]
    fn streams_differ_by_trial() {
        let a: u64 = trial_rng(7, 0).random();
        let b: u64 = trial_rng(7, 1).random();
        let c: u64 = trial_rng(7, 0).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn geometric_sum_mean() {
        // both branches of the negative binomial sampler
        let mut rng = trial_rng(3, 0);
        let mut buf = Vec::new();
        let law = CountLaw::Geometric { mean: 2.0 };
        for n in [5u64, 40] {
            let reps = 20_000;
            let tot: u64 = (0..reps).map(|_| total_children(&mut rng, &law, n, &mut buf)).sum();
            let mean = tot as f64 / reps as f64;
            // variance of one draw is n m (1 + m)
            let se = ((n as f64 * 6.0) / reps as f64).sqrt();
            assert!((mean - 2.0 * n as f64).abs() < 4.0 * se, "n = {n}: {mean}");
        }
    }
}
