//! A third fixed point of the generating function of an irreducible BRW on
//! the half-line, built one site at a time.
//!
//! With count law `{0: 1/4, 2: 3/4}` the fixed-point equations read
//! `z(0) = 1/4 + 3/4 z(1)^2` and, for `n >= 1`,
//! `z(n) = 1/4 + 3/4 (p_n z(n+1) + (1 - p_n) z(n-1))^2`. Given `z(n-1)` and
//! `z(n)` we pick `z(n+1)` above `s_n = sqrt((4 z(n) - 1)/3)` and solve for
//! `p_n`.
//!
//! Gaps `1 - z(n)` shrink geometrically and underflow after a few hundred
//! steps, so everything is computed from `ln(1 - z(n))`.

use serde::Serialize;

use super::halfline::{HalfLine, LeftRule};
use crate::domain::Window;
use crate::error::{invalid, Error, Result};
use crate::genfun::SiteVector;
use crate::law::CountLaw;
use crate::site::Site;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum ThetaSchedule {
    /// `z(n+1) = s_n + theta (1 - s_n)` for every `n`.
    Constant(f64),
    /// `theta_n = 1 - 2^-(n+1)`, which drives `p_n` to 1.
    Dyadic,
}

impl ThetaSchedule {
    pub fn theta(&self, n: usize) -> f64 {
        match self {
            ThetaSchedule::Constant(t) => *t,
            ThetaSchedule::Dyadic => 1.0 - 0.5f64.powi(n as i32 + 1),
        }
    }

    /// `ln(1 - theta_n)`.
    fn ln_complement(&self, n: usize) -> f64 {
        match self {
            ThetaSchedule::Constant(t) => (-t).ln_1p(),
            ThetaSchedule::Dyadic => -((n + 1) as f64) * std::f64::consts::LN_2,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            ThetaSchedule::Constant(t) => format!("constant {t}"),
            ThetaSchedule::Dyadic => "1 - 2^-(n+1)".to_string(),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpataruOutput {
    /// `z(0..=n_max)`; entries round to 1 once the gap drops below an ulp.
    pub z: Vec<f64>,
    /// `ln(1 - z(n))`, exact in the sense that it never rounds.
    pub log_gap: Vec<f64>,
    /// `p_0..p_{n_max - 1}`, with `p_0 = 1`.
    pub p: Vec<f64>,
    /// `1 - p_n`.
    pub left: Vec<f64>,
    pub theta_schedule: ThetaSchedule,
}

/// `(1 - s)/e` where `s = sqrt(1 - 4e/3)` and `e = exp(le)`.
fn shrink(le: f64) -> f64 {
    let e = le.exp();
    (4.0 / 3.0) / (1.0 + (1.0 - 4.0 * e / 3.0).sqrt())
}

pub fn spataru_recursion(z0: f64, schedule: ThetaSchedule, n_max: usize) -> Result<SpataruOutput> {
    if !(z0 > 1.0 / 3.0 && z0 < 1.0) {
        return Err(invalid(format!("z0 must lie in (1/3, 1), got {z0}")));
    }
    if let ThetaSchedule::Constant(t) = schedule {
        if !(t > 0.0 && t < 1.0) {
            return Err(invalid(format!("theta must lie in (0,1), got {t}")));
        }
    }
    if n_max < 2 {
        return Err(invalid("n_max must be at least 2"));
    }
    let mut le = Vec::with_capacity(n_max + 1);
    le.push((-z0).ln_1p());
    // z(1) = s_0
    le.push(le[0] + shrink(le[0]).ln());
    let mut left = vec![0.0];
    for n in 1..n_max {
        let h = shrink(le[n]);
        le.push(schedule.ln_complement(n) + le[n] + h.ln());
        let theta = schedule.theta(n);
        let rho = (le[n] - le[n - 1]).exp();
        // 1 - p_n = (c_n - e_{n+1}) / (e_{n-1} - e_{n+1}) with c_n = h e_n
        // and e_{n+1} = (1 - theta) c_n
        let hr = h * rho;
        left.push(theta * hr / (1.0 - (1.0 - theta) * hr));
    }
    let z: Vec<f64> = le.iter().map(|l| -l.exp_m1()).collect();
    let p: Vec<f64> = left.iter().enumerate().map(|(n, q)| if n == 0 { 1.0 } else { 1.0 - q }).collect();
    let out = SpataruOutput { z, log_gap: le, p, left, theta_schedule: schedule };
    out.assert_invariants()?;
    Ok(out)
}

impl SpataruOutput {
    pub fn n_max(&self) -> usize {
        self.z.len() - 1
    }

    fn assert_invariants(&self) -> Result<()> {
        let bad = |n: usize, what: &str| Error::Domain { site: n.to_string(), msg: what.to_string() };
        for n in 1..self.log_gap.len() {
            if !(self.log_gap[n] < self.log_gap[n - 1]) {
                return Err(bad(n, "z is not strictly increasing"));
            }
            if !self.log_gap[n].is_finite() {
                return Err(bad(n, "z reached 1"));
            }
        }
        for (n, q) in self.left.iter().enumerate().skip(1) {
            if !(*q >= 0.0 && *q < 1.0) {
                return Err(bad(n, "p_n outside (0,1]"));
            }
        }
        Ok(())
    }

    /// `max_n |G(z)(n) - z(n)|` over `0..n_max` in plain arithmetic.
    pub fn residual(&self) -> f64 {
        let z = &self.z;
        let mut r = (0.25 + 0.75 * z[1] * z[1] - z[0]).abs();
        for n in 1..self.n_max() {
            let s = self.p[n] * z[n + 1] + self.left[n] * z[n - 1];
            r = r.max((0.25 + 0.75 * s * s - z[n]).abs());
        }
        r
    }

    /// `max_n |(1 - G(z)(n)) / (1 - z(n)) - 1|`, computed from log-gaps so
    /// it stays meaningful after `z` rounds to 1.
    pub fn relative_gap_residual(&self) -> f64 {
        let le = &self.log_gap;
        // 1 - G = (3/4) E (2 - E) with E the gap of the mixed value
        let rel = |e_over: f64, e_abs: f64| (0.75 * e_over * (2.0 - e_abs) - 1.0).abs();
        let mut r = rel((le[1] - le[0]).exp(), le[1].exp());
        for n in 1..self.n_max() {
            let mix = self.p[n] * (le[n + 1] - le[n - 1]).exp() + self.left[n];
            let e_over = mix * (le[n - 1] - le[n]).exp();
            r = r.max(rel(e_over, mix * le[n - 1].exp()));
        }
        r
    }

    /// Companion half-line model whose generating function has `z` as a
    /// fixed point on `0..n_max`.
    pub fn companion(&self) -> Result<HalfLine> {
        HalfLine::new(
            "spataru",
            CountLaw::Pmf(vec![0.25, 0.0, 0.75]),
            LeftRule::Table { left: self.left.clone() },
            0.0,
        )
    }

    /// `z` on a window of the companion model.
    pub fn to_vector(&self, window: &std::sync::Arc<Window>) -> Result<SiteVector> {
        let mut values = Vec::with_capacity(window.len());
        for s in window.sites() {
            let v = s
                .as_int()
                .and_then(|i| usize::try_from(i).ok())
                .and_then(|i| self.z.get(i))
                .ok_or_else(|| Error::UnknownSite(s.to_string()))?;
            values.push(*v);
        }
        Ok(SiteVector { window: window.clone(), values })
    }

    pub fn site(n: usize) -> Site {
        Site::Int(n as i64)
    }
}
