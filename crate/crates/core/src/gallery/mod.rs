//! Built-in model constructors, addressable by name.

mod graphs;
mod halfline;
mod spataru;

use serde_json::{json, Map, Value};

use crate::domain::{full_domain, irreducible_classes, moment_matrix, assumption1_check, BoundaryPolicy};
use crate::error::{invalid, Result};
use crate::law::{CountLaw, SiteLaw};
use crate::model::{BrwModel, FiniteModel};
use crate::site::Site;

pub use graphs::{green, line, line_plus_branch, tree_edge_breeding, tree_plus_clique, tree_with_loop, RateGraph};
pub use halfline::{halfline_binary, halfline_tuned, TunedSequences, HalfLine, LeftRule};
pub use spataru::{spataru_recursion, SpataruOutput, ThetaSchedule};

pub const NAMES: &[&str] = &[
    "gw",
    "tree",
    "tree-loop",
    "halfline-binary",
    "halfline-tuned",
    "spataru",
    "two-site-cubic",
    "line",
    "line-plus-branch",
    "tree-plus-clique",
];

/// A constructed model with constructor notes and any derived data.
#[derive(Clone, Debug)]
pub struct Built {
    pub model: BrwModel,
    pub warnings: Vec<String>,
    pub details: Value,
}

impl Built {
    fn plain(model: BrwModel) -> Built {
        Built { model, warnings: Vec::new(), details: Value::Null }
    }
}

/// Galton-Watson process: one site, all children at that site.
pub fn gw_law(count: CountLaw) -> Result<Built> {
    count.validate()?;
    let x = Site::named("x");
    let law = SiteLaw::factored(count, vec![(x.clone(), 1.0)]);
    let model = BrwModel::new(FiniteModel::new("gw", vec![x.clone()], vec![(x, law)])?);
    let dom = full_domain(&model, BoundaryPolicy::OutsideExtinct)?;
    let classes = irreducible_classes(&moment_matrix(&dom));
    let mut warnings = Vec::new();
    if assumption1_check(&dom, &classes).iter().any(|ok| !ok) {
        warnings.push("every particle has exactly one child almost surely; Assumption 1 fails".to_string());
    }
    Ok(Built { model, warnings, details: Value::Null })
}

/// Two sites; each particle has no children or three children at the other
/// site, with probability 1/2 each.
pub fn two_site_cubic() -> Result<BrwModel> {
    let (a, b) = (Site::named("a"), Site::named("b"));
    let law = |to: &Site| SiteLaw::general(vec![(vec![], 0.5), (vec![(to.clone(), 3)], 0.5)]);
    Ok(BrwModel::new(FiniteModel::new(
        "two-site-cubic",
        vec![a.clone(), b.clone()],
        vec![(a.clone(), law(&b)), (b, law(&a))],
    )?))
}

/// Smallest root of `s = f(s)` for a count law, bracketed as `[lo, hi]`.
///
/// `lo` is the limit of the increasing iteration from 0; `hi` is the first
/// point `u >= lo` found with `f(u) <= u`, or 1.
pub fn scalar_extinction(count: &CountLaw) -> (f64, f64) {
    let f = |s: f64| count.pgf(s, 1.0 - s).clamp(0.0, 1.0);
    let mut lo = 0.0;
    for _ in 0..10_000_000 {
        let next = f(lo);
        if next - lo < 1e-17 {
            lo = next.max(lo);
            break;
        }
        lo = next;
    }
    let mut step = 1e-15;
    while step < 1.0 {
        let u = lo + step;
        if u >= 1.0 {
            break;
        }
        if f(u) <= u {
            return (lo, u);
        }
        step *= 4.0;
    }
    (lo, 1.0)
}

pub type Params = Map<String, Value>;

fn num(params: &Params, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None => Ok(default),
        Some(v) => v.as_f64().ok_or_else(|| invalid(format!("parameter '{key}' must be a number"))),
    }
}

fn whole(params: &Params, key: &str, default: usize) -> Result<usize> {
    let v = num(params, key, default as f64)?;
    if v < 0.0 || v.fract() != 0.0 {
        return Err(invalid(format!("parameter '{key}' must be a nonnegative integer")));
    }
    Ok(v as usize)
}

fn pmf(params: &Params, default: &[f64]) -> Result<CountLaw> {
    if let Some(m) = params.get("mean") {
        let mean = m.as_f64().ok_or_else(|| invalid("parameter 'mean' must be a number"))?;
        return Ok(CountLaw::Geometric { mean });
    }
    match params.get("pmf") {
        None => Ok(CountLaw::Pmf(default.to_vec())),
        Some(Value::Array(a)) => Ok(CountLaw::Pmf(
            a.iter()
                .map(|v| v.as_f64().ok_or_else(|| invalid("parameter 'pmf' must be an array of numbers")))
                .collect::<Result<_>>()?,
        )),
        Some(_) => Err(invalid("parameter 'pmf' must be an array of numbers")),
    }
}

fn reject_unknown(params: &Params, allowed: &[&str]) -> Result<()> {
    for k in params.keys() {
        if !allowed.contains(&k.as_str()) {
            return Err(invalid(format!("unknown parameter '{k}' (expected one of: {})", allowed.join(", "))));
        }
    }
    Ok(())
}

pub const GW_DEFAULT: [f64; 3] = [0.25, 0.0, 0.75];

/// Builds a gallery model by name.
pub fn build(name: &str, params: &Params) -> Result<Built> {
    match name {
        "gw" => {
            reject_unknown(params, &["pmf", "mean"])?;
            gw_law(pmf(params, &GW_DEFAULT)?)
        }
        "two-site-cubic" => {
            reject_unknown(params, &[])?;
            Ok(Built::plain(two_site_cubic()?))
        }
        "tree" => {
            reject_unknown(params, &["d", "lambda"])?;
            Ok(Built::plain(tree_edge_breeding(whole(params, "d", 3)?, num(params, "lambda", 0.5)?)?))
        }
        "tree-loop" => {
            reject_unknown(params, &["d", "lambda", "k_yy"])?;
            Ok(Built::plain(tree_with_loop(
                whole(params, "d", 3)?,
                num(params, "lambda", 0.35)?,
                num(params, "k_yy", 3.0)?,
            )?))
        }
        "line" => {
            reject_unknown(params, &["lambda"])?;
            Ok(Built::plain(line(num(params, "lambda", 1.0)?)?))
        }
        "line-plus-branch" => {
            reject_unknown(params, &["lambda"])?;
            Ok(Built::plain(line_plus_branch(num(params, "lambda", 0.34)?)?))
        }
        "tree-plus-clique" => {
            reject_unknown(params, &["lambda", "k"])?;
            Ok(Built::plain(tree_plus_clique(num(params, "lambda", 0.34)?, whole(params, "k", 4)?)?))
        }
        "halfline-binary" => {
            reject_unknown(params, &["p1", "a", "b", "p"])?;
            let rule = match params.get("p") {
                Some(_) => LeftRule::Constant { left: 1.0 - num(params, "p", 0.5)? },
                None => LeftRule::Geometric {
                    p1: num(params, "p1", 0.5)?,
                    a: num(params, "a", 1.0)?,
                    b: num(params, "b", 4.0)?,
                },
            };
            let h = halfline_binary(rule)?;
            let mut warnings = Vec::new();
            if !h.product_positive() {
                warnings.push("sum of 2^i (1 - p_i) diverges; non-strong survival hypothesis unverified".into());
            }
            Ok(Built { model: BrwModel::new(h), warnings, details: Value::Null })
        }
        "halfline-tuned" => {
            reject_unknown(params, &["pmf", "terms"])?;
            let (h, seq) = halfline_tuned(pmf(params, &GW_DEFAULT)?, whole(params, "terms", 30)?)?;
            let details = serde_json::to_value(&seq).map_err(crate::error::Error::Json)?;
            Ok(Built { model: BrwModel::new(h), warnings: Vec::new(), details })
        }
        "spataru" => {
            reject_unknown(params, &["z0", "theta", "schedule", "n_max"])?;
            let schedule = match params.get("schedule").and_then(Value::as_str) {
                Some("dyadic") => ThetaSchedule::Dyadic,
                Some("constant") | None => ThetaSchedule::Constant(num(params, "theta", 0.5)?),
                Some(other) => return Err(invalid(format!("unknown theta schedule '{other}'"))),
            };
            let out = spataru_recursion(num(params, "z0", 0.5)?, schedule, whole(params, "n_max", 1000)?)?;
            let details = json!({
                "z0": out.z[0],
                "n_max": out.n_max(),
                "theta_schedule": out.theta_schedule.describe(),
                "p1": out.p.get(1),
                "p_last": out.p.last(),
            });
            Ok(Built { model: BrwModel::new(out.companion()?), warnings: Vec::new(), details })
        }
        other => Err(invalid(format!("unknown gallery model '{other}' (known: {})", NAMES.join(", ")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_root_brackets_third() {
        let (lo, hi) = scalar_extinction(&CountLaw::Pmf(GW_DEFAULT.to_vec()));
        assert!(lo <= 1.0 / 3.0 + 1e-16 && 1.0 / 3.0 <= hi);
        assert!(hi - lo < 1e-12);
    }

    #[test]
    fn scalar_root_subcritical_is_one() {
        let (lo, hi) = scalar_extinction(&CountLaw::Geometric { mean: 0.5 });
        assert!(lo > 1.0 - 1e-6);
        assert_eq!(hi, 1.0);
    }

    #[test]
    fn single_child_law_warns() {
        assert_eq!(gw_law(CountLaw::dirac(1)).unwrap().warnings.len(), 1);
        assert!(gw_law(CountLaw::Geometric { mean: 2.0 }).unwrap().warnings.is_empty());
    }

    #[test]
    fn unknown_names_and_params_rejected() {
        assert!(build("nope", &Params::new()).is_err());
        let mut p = Params::new();
        p.insert("bogus".into(), json!(1));
        assert!(build("tree", &p).is_err());
    }

    #[test]
    fn every_name_builds_with_defaults() {
        for name in NAMES {
            build(name, &Params::new()).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }
}
