use std::io::Write;
use std::path::Path;

use serde_json::{json, Map, Value};

use brwlab::checks::{
    finite_two_fixed_points, max_principle_check, strong_local_test, CheckReport, Outcome,
};
use brwlab::domain::{
    full_domain, irreducible_classes, moment_matrix, truncate, truncate_with_budget, BoundaryPolicy, TruncatedDomain,
};
use brwlab::error::{Error, Result};
use brwlab::genfun::{
    solve_global_extinction, solve_local_with_seed, ExtinctionBracket, SiteVector, SolveOptions, TargetSet,
};
use brwlab::io::{csv_field, load_model, resolve_site, write_atomic, LoadedModel, Metadata, ModelFile, VectorFile};
use brwlab::model::BrwModel;
use brwlab::montecarlo::{estimate, Event, McConfig};
use brwlab::reproduce;
use brwlab::site::Site;
use brwlab::spectral::{critical_params, growth_sequence, perron_root, CriticalParams, GrowthTarget};

use crate::{
    CheckCmd, Cmd, Format, GalleryCmd, ModelArgs, OutArgs, Policy, ReproduceCmd, SimulateCmd, SolveCmd, SolverArgs,
    SpectralCmd,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 2;
pub const EXIT_UNCONVERGED: u8 = 3;

/// Default radius for infinite models when none is given.
const DEFAULT_RADIUS: usize = 10;
/// Site budget when picking a window size automatically.
const AUTO_BUDGET: usize = 300_000;

pub fn run(cmd: Cmd) -> Result<u8> {
    match cmd {
        Cmd::Solve(c) => solve(c),
        Cmd::Spectral(c) => spectral(c),
        Cmd::Simulate(c) => simulate(c),
        Cmd::Gallery(c) => gallery_cmd(c),
        Cmd::Check(c) => check(c),
        Cmd::ReproduceAll(c) => reproduce_all(c),
    }
}

/// JSON value of a command-line string: numbers, booleans and arrays are
/// parsed, anything else stays a string.
fn parse_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}

fn parse_params(pairs: &[String]) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    for p in pairs {
        let (k, v) = p
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("parameter '{p}' is not of the form KEY=VALUE")))?;
        m.insert(k.to_string(), parse_value(v));
    }
    Ok(m)
}

/// `--key value` and `--key=value` pairs after a gallery name.
fn parse_flag_params(args: &[String]) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = if a == "-o" { "output" } else { a.as_str() };
        let key = key
            .strip_prefix("--")
            .or((key == "output").then_some(key))
            .ok_or_else(|| Error::Parse(format!("expected --KEY VALUE, found '{a}'")))?;
        let (k, v) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::Parse(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        m.insert(k.replace('-', "_"), parse_value(&v));
    }
    Ok(m)
}

fn load(m: &ModelArgs) -> Result<LoadedModel> {
    let loaded = match (&m.model, &m.gallery) {
        (Some(path), _) => load_model(path)?,
        (None, Some(name)) => ModelFile::gallery(name, parse_params(&m.params)?).build()?,
        (None, None) => return Err(Error::Parse("either --model or --gallery is required".into())),
    };
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    Ok(loaded)
}

fn root_of(model: &BrwModel, key: &Option<String>) -> Result<Site> {
    match key {
        Some(k) => resolve_site(model, k),
        None => Ok(model.root()),
    }
}

fn policy(p: Policy) -> BoundaryPolicy {
    match p {
        Policy::Extinct => BoundaryPolicy::OutsideExtinct,
        Policy::Immortal => BoundaryPolicy::OutsideImmortal,
    }
}

fn domain(model: &BrwModel, root: &Site, radius: Option<usize>, p: BoundaryPolicy) -> Result<TruncatedDomain> {
    match radius {
        None if model.is_finite() => full_domain(model, p),
        None => truncate(model, root, DEFAULT_RADIUS, p),
        Some(r) => truncate(model, root, r, p),
    }
}

fn solve_options(s: &SolverArgs) -> SolveOptions {
    SolveOptions { tol: s.tol, max_iter: s.max_iter, certified: !s.uncertified }
}

fn targets(model: &BrwModel, keys: &[String]) -> Result<Vec<Site>> {
    keys.iter().map(|k| resolve_site(model, k)).collect()
}

fn emit(out: &OutArgs, json: &str, csv: &str) -> Result<()> {
    let text = match out.format {
        Format::Json => json,
        Format::Csv => csv,
    };
    match &out.output {
        Some(p) => write_atomic(p, text),
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
            Ok(())
        }
    }
}

fn pretty(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn solve(c: SolveCmd) -> Result<u8> {
    let loaded = load(&c.model)?;
    let model = &loaded.model;
    let root = root_of(model, &c.model.root)?;
    let dom = domain(model, &root, c.window.radius, policy(c.window.policy))?;
    let opts = solve_options(&c.solver);
    let mut brackets = vec![solve_global_extinction(&dom, &opts)?];
    let target = targets(model, &c.target)?;
    if !target.is_empty() {
        let (local, never) = solve_local_with_seed(&dom, &TargetSet::Sites(target.clone()), &opts)?;
        brackets.push(local);
        brackets.push(never);
    }
    let meta = Metadata::new(
        "solve",
        None,
        json!({
            "root": root.to_string(),
            "radius": dom.radius(),
            "policy": dom.policy,
            "tol": opts.tol,
            "max_iter": opts.max_iter,
            "certified": opts.certified,
            "targets": c.target,
        }),
    );
    let file = VectorFile::new(meta, loaded.file.clone(), &dom, &brackets);
    emit(&c.out, &file.to_json()?, &file.to_csv())?;
    Ok(if brackets.iter().all(|b| b.converged) { EXIT_OK } else { unconverged("solver") })
}

fn unconverged(what: &str) -> u8 {
    eprintln!("warning: {what} did not converge; output is partial");
    EXIT_UNCONVERGED
}

/// Largest number of powers in `candidates` whose window fits the budget.
fn pick_n_max(model: &BrwModel, root: &Site, wanted: usize) -> usize {
    if model.is_finite() || model.radial().is_some() {
        return wanted;
    }
    let mut n = wanted;
    while n > 4 {
        if truncate_with_budget(model, root, n, BoundaryPolicy::OutsideExtinct, AUTO_BUDGET).is_ok() {
            return n;
        }
        n /= 2;
    }
    n
}

fn growth_csv(meta: &Metadata, diag: &[(usize, f64)], rows: &[(usize, f64)]) -> String {
    let mut s = meta.csv_header();
    s.push_str("n,diagonal,rowsum\n");
    let n = diag.len().max(rows.len());
    for i in 0..n {
        let cell = |v: &[(usize, f64)]| v.get(i).map(|(_, a)| a.to_string()).unwrap_or_default();
        let idx = diag.get(i).or(rows.get(i)).map(|(n, _)| *n).unwrap_or(i);
        s.push_str(&format!("{idx},{},{}\n", cell(diag), cell(rows)));
    }
    s
}

fn spectral(c: SpectralCmd) -> Result<u8> {
    let loaded = load(&c.model)?;
    let model = &loaded.model;
    let root = root_of(model, &c.model.root)?;
    let x = match &c.site {
        Some(k) => resolve_site(model, k)?,
        None => root.clone(),
    };
    let mut report = Map::new();
    let mut converged = true;
    let (diag, rows) = if model.lambda().is_some() {
        let cp = critical_params(model, &x, c.n_max)?;
        converged &= cp.diagonal.converged && cp.rowsum.converged;
        let seqs = (cp.diagonal.sequence.clone(), cp.rowsum.sequence.clone());
        report.insert("critical_params".into(), serde_json::to_value(&cp)?);
        seqs
    } else {
        let dom = match model.finite_sites() {
            Some(_) => full_domain(model, BoundaryPolicy::OutsideExtinct)?,
            None => truncate(model, &root, c.n_max + root_distance(model, &root, &x)?, BoundaryPolicy::OutsideExtinct)?,
        };
        let d = growth_sequence(&dom, &x, &GrowthTarget::Site(x.clone()), c.n_max)?;
        let r = growth_sequence(&dom, &x, &GrowthTarget::RowSum, c.n_max)?;
        converged &= d.converged && r.converged;
        report.insert("diagonal".into(), serde_json::to_value(&d)?);
        report.insert("rowsum".into(), serde_json::to_value(&r)?);
        (d.sequence, r.sequence)
    };
    if let Some(r) = c.radius {
        let dom = truncate(model, &root, r, BoundaryPolicy::OutsideExtinct)?;
        let p = perron_root(&moment_matrix(&dom), None);
        converged &= p.converged;
        report.insert(
            "window_perron_root".into(),
            json!({"radius": r, "value": p.value, "lower": p.lower, "upper": p.upper, "iterations": p.iterations, "converged": p.converged}),
        );
    }
    let meta = Metadata::new(
        "spectral",
        None,
        json!({"model": loaded.file, "site": x.to_string(), "n_max": c.n_max, "radius": c.radius}),
    );
    let json = pretty(&json!({"metadata": meta, "result": report}))?;
    emit(&c.out, &json, &growth_csv(&meta, &diag, &rows))?;
    Ok(if converged { EXIT_OK } else { unconverged("growth estimate") })
}

fn root_distance(model: &BrwModel, root: &Site, x: &Site) -> Result<usize> {
    if x == root {
        return Ok(0);
    }
    for r in [4, 16, 64, 256] {
        let dom = truncate_with_budget(model, root, r, BoundaryPolicy::OutsideExtinct, AUTO_BUDGET)?;
        if let Some(i) = dom.window.index_of(x) {
            return Ok(dom.window.dist(i));
        }
    }
    Err(Error::UnknownSite(x.to_string()))
}

fn simulate(c: SimulateCmd) -> Result<u8> {
    let loaded = load(&c.model)?;
    let model = &loaded.model;
    let root = root_of(model, &c.model.root)?;
    let p = policy(c.window.policy);
    // Particles move at most one step per generation in the nearest-neighbour
    // gallery models, so this default never lets them leave before 2h.
    let radius = c.window.radius.or((!model.is_finite()).then_some(2 * c.horizon + 2));
    let dom = domain(model, &root, radius, p)?;
    let target = targets(model, &c.target)?;
    let mut events = vec![Event::Global];
    if !target.is_empty() {
        let settle = c.settle.unwrap_or(c.horizon / 2);
        events.push(Event::Local { target: target.clone(), settle });
        events.push(Event::NeverVisit { target: target.clone() });
        events.push(Event::GlobalAvoiding { target, after: settle });
    }
    let cfg = McConfig { trials: c.trials, horizon: c.horizon, cap: c.cap, seed: c.seed };
    let est = estimate(&dom, &root, &events, &cfg)?;
    let meta = Metadata::new(
        "simulate",
        Some(c.seed),
        json!({
            "model": loaded.file,
            "root": root.to_string(),
            "radius": dom.radius(),
            "policy": dom.policy,
            "trials": c.trials,
            "horizon": c.horizon,
            "cap": c.cap,
            "targets": c.target,
        }),
    );
    let json = pretty(&json!({"metadata": meta, "estimates": est}))?;
    let mut csv = meta.csv_header();
    csv.push_str("event,point,stderr,trials,capped_trials,seed,horizon,point_2h,stderr_2h,horizon_flag\n");
    for e in &est {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            csv_field(&e.event),
            e.point,
            e.stderr,
            e.trials,
            e.capped_trials,
            e.seed,
            e.horizon,
            e.point_2h,
            e.stderr_2h,
            e.horizon_flag
        ));
    }
    emit(&c.out, &json, &csv)?;
    Ok(EXIT_OK)
}

fn at_root(b: &ExtinctionBracket, i: usize) -> Value {
    json!([b.lower.values[i], b.upper.values[i]])
}

/// Phase read off the spectral estimates at the model's own rate.
fn region(lambda: f64, cp: &CriticalParams) -> &'static str {
    if lambda <= cp.lambda_w_lower {
        "global-extinction"
    } else if lambda <= cp.lambda_s {
        "pure-global-survival"
    } else {
        "strong-local-survival"
    }
}

/// The trailing parameter list swallows options written after the model
/// name, so the command's own options are taken back out of it here.
fn split_gallery_options(mut c: GalleryCmd) -> Result<(GalleryCmd, Map<String, Value>)> {
    let mut params = parse_flag_params(&c.params)?;
    let bad = |k: &str, v: &Value| Error::Parse(format!("invalid value {v} for --{k}"));
    if let Some(v) = params.remove("radius") {
        c.radius = Some(v.as_u64().ok_or_else(|| bad("radius", &v))? as usize);
    }
    if let Some(v) = params.remove("tol") {
        c.tol = v.as_f64().ok_or_else(|| bad("tol", &v))?;
    }
    if let Some(v) = params.remove("format") {
        c.out.format = match v.as_str() {
            Some("csv") => Format::Csv,
            Some("json") => Format::Json,
            _ => return Err(bad("format", &v)),
        };
    }
    if let Some(v) = params.remove("output") {
        let p = v.as_str().map(String::from).unwrap_or_else(|| v.to_string());
        c.out.output = Some(p.into());
    }
    Ok((c, params))
}

fn gallery_cmd(c: GalleryCmd) -> Result<u8> {
    let (c, params) = split_gallery_options(c)?;
    let loaded = ModelFile::gallery(&c.name, params.clone()).build()?;
    for w in &loaded.warnings {
        eprintln!("warning: {w}");
    }
    let model = &loaded.model;
    let root = model.root();
    let mut report = Map::new();
    report.insert("name".into(), json!(c.name));
    report.insert("warnings".into(), json!(loaded.warnings));
    if !loaded.details.is_null() {
        report.insert("details".into(), loaded.details.clone());
    }
    if let Some(lambda) = model.lambda() {
        let n_max = pick_n_max(model, &root, if model.radial().is_some() { 1000 } else { 200 });
        let cp = critical_params(model, &root, n_max)?;
        report.insert("lambda".into(), json!(lambda));
        report.insert("lambda_s".into(), json!(cp.lambda_s));
        report.insert("lambda_w_lower".into(), json!(cp.lambda_w_lower));
        report.insert("pure_global_indicator".into(), serde_json::to_value(cp.pure_global_indicator)?);
        report.insert("region".into(), json!(region(lambda, &cp)));
        report.insert("growth_n_max".into(), json!(n_max));
    }
    let dom = domain(model, &root, c.radius, BoundaryPolicy::OutsideExtinct)?;
    let opts = SolveOptions::tol(c.tol);
    let q = solve_global_extinction(&dom, &opts)?;
    let target = TargetSet::single(root.clone());
    let (local, never) = solve_local_with_seed(&dom, &target, &opts)?;
    let rep = strong_local_test(&dom, &target, brwlab::checks::DEFAULT_CHECK_TOL, &opts)?;
    let i = dom.window.index_of(&root).unwrap_or(0);
    report.insert(
        "at_root".into(),
        json!({
            "site": root.to_string(),
            "radius": dom.radius(),
            "qbar": at_root(&q, i),
            "q_local": at_root(&local, i),
            "q_never_visit": at_root(&never, i),
        }),
    );
    report.insert("strong_local".into(), serde_json::to_value(&rep)?);
    let meta = Metadata::new("gallery", None, json!({"name": c.name, "params": params, "radius": dom.radius(), "tol": c.tol}));
    let json = pretty(&json!({"metadata": meta, "report": report}))?;
    let mut csv = meta.csv_header();
    csv.push_str("key,value\n");
    for (k, v) in &report {
        if v.is_number() || v.is_string() || v.is_boolean() {
            let s = v.as_str().map(String::from).unwrap_or_else(|| v.to_string());
            csv.push_str(&format!("{k},{}\n", csv_field(&s)));
        }
    }
    if let Some(v) = &rep.verdict {
        csv.push_str(&format!("strong_local_verdict,{}\n", serde_json::to_value(v)?.as_str().unwrap_or("")));
    }
    emit(&c.out, &json, &csv)?;
    let ok = q.converged && local.converged && never.converged;
    Ok(if ok { EXIT_OK } else { unconverged("solver") })
}

fn check(c: CheckCmd) -> Result<u8> {
    let loaded = load(&c.model)?;
    let model = &loaded.model;
    let root = root_of(model, &c.model.root)?;
    let dom = domain(model, &root, c.window.radius, policy(c.window.policy))?;
    let opts = solve_options(&c.solver);
    let target = match targets(model, &c.target)? {
        t if t.is_empty() => vec![root.clone()],
        t => t,
    };
    let q = solve_global_extinction(&dom, &opts)?;
    let (local, _) = solve_local_with_seed(&dom, &TargetSet::Sites(target.clone()), &opts)?;
    let mut reports: Vec<CheckReport> = Vec::new();
    let below = |v: &SiteVector, w: &SiteVector| v.values.iter().zip(&w.values).any(|(a, b)| *a < b - c.check_tol);
    let mut pairs = vec![("q_local_upper", &local.upper, local.converged), ("qbar_upper", &q.upper, q.converged)];
    if !below(&local.lower, &q.lower) {
        pairs.push(("q_local_lower", &local.lower, local.converged));
    }
    for (label, z, converged) in pairs {
        let name = format!("max-principle({label})");
        // an unconverged iterate is not a fixed point, so there is nothing to test
        let r = if converged && q.converged {
            CheckReport { name, ..max_principle_check(&dom, z, &q.lower, c.check_tol)? }
        } else {
            let mut r = CheckReport::new(&name, c.check_tol);
            r.outcome = Outcome::Undecided;
            r.notes.push("solver did not converge".into());
            r
        };
        reports.push(r);
    }
    reports.push(strong_local_test(&dom, &TargetSet::Sites(target), c.check_tol, &opts)?);
    if model.is_finite() {
        let full = full_domain(model, BoundaryPolicy::OutsideExtinct)?;
        if irreducible_classes(&moment_matrix(&full)).is_irreducible() {
            reports.push(finite_two_fixed_points(model, 16, c.seed, c.check_tol)?);
        }
    }
    let meta = Metadata::new(
        "check",
        Some(c.seed),
        json!({"model": loaded.file, "root": root.to_string(), "radius": dom.radius(), "check_tol": c.check_tol}),
    );
    let json = pretty(&json!({"metadata": meta, "reports": reports}))?;
    let mut csv = meta.csv_header();
    csv.push_str("name,outcome,verdict,notes\n");
    for r in &reports {
        let outcome = serde_json::to_value(r.outcome)?;
        let verdict = r.verdict.map(serde_json::to_value).transpose()?.unwrap_or(Value::Null);
        csv.push_str(&format!(
            "{},{},{},{}\n",
            csv_field(&r.name),
            outcome.as_str().unwrap_or(""),
            verdict.as_str().unwrap_or(""),
            csv_field(&r.notes.join("; "))
        ));
    }
    emit(&c.out, &json, &csv)?;
    let code = if reports.iter().any(|r| r.outcome == Outcome::Fail) {
        EXIT_CHECK_FAILED
    } else if reports.iter().any(|r| r.outcome == Outcome::Undecided) || !(q.converged && local.converged) {
        EXIT_UNCONVERGED
    } else {
        EXIT_OK
    };
    Ok(code)
}

fn ensure_writable(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let probe = dir.join(".brwlab-write-probe");
    std::fs::write(&probe, b"")?;
    std::fs::remove_file(&probe)?;
    Ok(())
}

fn reproduce_all(c: ReproduceCmd) -> Result<u8> {
    let chosen = reproduce::selected(c.filter.as_deref());
    if chosen.is_empty() {
        return Err(Error::Validation(format!("no criterion matches '{}'", c.filter.unwrap_or_default())));
    }
    ensure_writable(&c.out_dir)?;
    let mut results = Vec::new();
    for crit in chosen {
        let r = crit.run();
        println!("{}", r.line());
        results.push(r);
    }
    let meta = Metadata::new("reproduce-all", None, json!({"filter": c.filter}));
    write_atomic(&c.out_dir.join("summary.csv"), &reproduce::summary_csv(&meta, &results))?;
    Ok(if results.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_CHECK_FAILED })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_params_accept_both_spellings() {
        let m = parse_flag_params(&["--d".into(), "3".into(), "--lambda=0.5".into(), "--k-yy".into(), "2".into()]).unwrap();
        assert_eq!(m["d"], json!(3));
        assert_eq!(m["lambda"], json!(0.5));
        assert_eq!(m["k_yy"], json!(2));
        assert!(parse_flag_params(&["d".into()]).is_err());
    }

    #[test]
    fn key_value_params_parse_json() {
        let m = parse_params(&["pmf=[0.25,0,0.75]".into(), "schedule=dyadic".into()]).unwrap();
        assert_eq!(m["pmf"], json!([0.25, 0, 0.75]));
        assert_eq!(m["schedule"], json!("dyadic"));
    }
}
