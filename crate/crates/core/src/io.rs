//! Model files and result files.
//!
//! Model files are JSON with a `kind` tag; see the README for the schema.
//! Result files carry a metadata header (tool version, command, seed,
//! parameters) and list sites in breadth-first window order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::domain::{truncate, BoundaryPolicy, TruncatedDomain};
use crate::error::{invalid, Error, Result};
use crate::gallery;
use crate::genfun::{bracket_residual, ExtinctionBracket, Quantity, Side};
use crate::law::{CountLaw, SiteLaw};
use crate::model::{counterpart_law, BrwModel, FiniteModel};
use crate::site::Site;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AtomFile {
    pub p: f64,
    #[serde(default)]
    pub children: BTreeMap<String, u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactoredFile {
    pub count: CountLaw,
    #[serde(default)]
    pub diffusion: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DeathFile {
    Uniform(f64),
    PerSite(BTreeMap<String, f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteGeneralFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    pub sites: Vec<String>,
    pub laws: BTreeMap<String, Vec<AtomFile>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiniteFactoredFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    pub sites: Vec<String>,
    pub laws: BTreeMap<String, FactoredFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuousFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<String>,
    pub sites: Vec<String>,
    pub rates: BTreeMap<String, BTreeMap<String, f64>>,
    pub lambda: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub death: Option<DeathFile>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GalleryFile {
    pub name: String,
    #[serde(default)]
    pub params: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelFile {
    FiniteGeneral(FiniteGeneralFile),
    FiniteFactored(FiniteFactoredFile),
    Continuous(ContinuousFile),
    Gallery(GalleryFile),
}

#[derive(Clone, Debug)]
pub struct LoadedModel {
    pub file: ModelFile,
    pub model: BrwModel,
    pub warnings: Vec<String>,
    pub details: Value,
}

fn check_keys<'a>(sites: &[String], keys: impl Iterator<Item = &'a String>, field: &str) -> Result<()> {
    for k in keys {
        if !sites.contains(k) {
            return Err(invalid(format!("{field}.{k}: unknown site '{k}'")));
        }
    }
    Ok(())
}

fn finish(fm: FiniteModel, root: &Option<String>) -> Result<BrwModel> {
    let fm = match root {
        Some(r) => fm.with_root(Site::named(r.clone()))?,
        None => fm,
    };
    Ok(BrwModel::new(fm))
}

impl ModelFile {
    pub fn gallery(name: &str, params: Map<String, Value>) -> ModelFile {
        ModelFile::Gallery(GalleryFile { name: name.to_string(), params })
    }

    pub fn build(&self) -> Result<LoadedModel> {
        let plain = |model| LoadedModel { file: self.clone(), model, warnings: Vec::new(), details: Value::Null };
        match self {
            ModelFile::FiniteGeneral(FiniteGeneralFile { name, root, sites, laws }) => {
                check_keys(sites, laws.keys(), "laws")?;
                let mut out = Vec::new();
                for (x, atoms) in laws {
                    for (i, a) in atoms.iter().enumerate() {
                        check_keys(sites, a.children.keys(), &format!("laws.{x}[{i}].children"))?;
                    }
                    let law = SiteLaw::general(
                        atoms
                            .iter()
                            .map(|a| (a.children.iter().map(|(y, k)| (Site::named(y.clone()), *k)).collect(), a.p))
                            .collect(),
                    );
                    out.push((Site::named(x.clone()), law));
                }
                let fm = FiniteModel::new(name.clone().unwrap_or("finite-general".into()), named(sites), out)?;
                Ok(plain(finish(fm, root)?))
            }
            ModelFile::FiniteFactored(FiniteFactoredFile { name, root, sites, laws }) => {
                check_keys(sites, laws.keys(), "laws")?;
                let mut out = Vec::new();
                for (x, f) in laws {
                    check_keys(sites, f.diffusion.keys(), &format!("laws.{x}.diffusion"))?;
                    let diffusion = f.diffusion.iter().map(|(y, p)| (Site::named(y.clone()), *p)).collect();
                    out.push((Site::named(x.clone()), SiteLaw::factored(f.count.clone(), diffusion)));
                }
                let fm = FiniteModel::new(name.clone().unwrap_or("finite-factored".into()), named(sites), out)?;
                Ok(plain(finish(fm, root)?))
            }
            ModelFile::Continuous(ContinuousFile { name, root, sites, rates, lambda, death }) => {
                check_keys(sites, rates.keys(), "rates")?;
                let mut out = Vec::new();
                for x in sites {
                    let row: Vec<(Site, f64)> = match rates.get(x) {
                        Some(r) => {
                            check_keys(sites, r.keys(), &format!("rates.{x}"))?;
                            r.iter().map(|(y, k)| (Site::named(y.clone()), *k)).collect()
                        }
                        None => Vec::new(),
                    };
                    let d = match death {
                        None => 1.0,
                        Some(DeathFile::Uniform(d)) => *d,
                        Some(DeathFile::PerSite(m)) => {
                            check_keys(sites, m.keys(), "death")?;
                            m.get(x).copied().unwrap_or(1.0)
                        }
                    };
                    let law = counterpart_law(&row, *lambda, d).map_err(|e| invalid(format!("rates.{x}: {e}")))?;
                    out.push((Site::named(x.clone()), law));
                }
                let fm = FiniteModel::new(name.clone().unwrap_or("continuous".into()), named(sites), out)?
                    .with_lambda(*lambda);
                Ok(plain(finish(fm, root)?))
            }
            ModelFile::Gallery(GalleryFile { name, params }) => {
                let built = gallery::build(name, params)?;
                Ok(LoadedModel { file: self.clone(), model: built.model, warnings: built.warnings, details: built.details })
            }
        }
    }
}

fn named(sites: &[String]) -> Vec<Site> {
    sites.iter().map(|s| Site::named(s.clone())).collect()
}

fn from_value<T: serde::de::DeserializeOwned>(v: Value, origin: &str) -> Result<T> {
    serde_path_to_error::deserialize(v).map_err(|e| Error::Parse(format!("{origin}: at '{}': {}", e.path(), e.inner())))
}

/// Parses a model file; `origin` names the source in error messages, which
/// give a line and column for syntax errors and a field path otherwise.
pub fn parse_model(text: &str, origin: &str) -> Result<LoadedModel> {
    let mut v: Value = serde_json::from_str(text)
        .map_err(|e| Error::Parse(format!("{origin}:{}:{}: {e}", e.line(), e.column())))?;
    let obj = v.as_object_mut().ok_or_else(|| Error::Parse(format!("{origin}: top level must be an object")))?;
    let kind = match obj.remove("kind") {
        Some(Value::String(k)) => k,
        _ => return Err(Error::Parse(format!("{origin}: at 'kind': missing or not a string"))),
    };
    let file = match kind.as_str() {
        "finite-general" => ModelFile::FiniteGeneral(from_value(v, origin)?),
        "finite-factored" => ModelFile::FiniteFactored(from_value(v, origin)?),
        "continuous" => ModelFile::Continuous(from_value(v, origin)?),
        "gallery" => ModelFile::Gallery(from_value(v, origin)?),
        other => {
            return Err(Error::Parse(format!(
                "{origin}: at 'kind': unknown kind '{other}', expected finite-general, finite-factored, continuous or gallery"
            )))
        }
    };
    file.build().map_err(|e| match e {
        Error::Validation(m) => Error::Validation(format!("{origin}: {m}")),
        other => other,
    })
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let text = std::fs::read_to_string(path)?;
    parse_model(&text, &path.display().to_string())
}

/// Resolves a site key as printed in result files.
pub fn resolve_site(model: &BrwModel, key: &str) -> Result<Site> {
    if let Some(sites) = model.finite_sites() {
        return sites.into_iter().find(|s| s.to_string() == key).ok_or_else(|| Error::UnknownSite(key.to_string()));
    }
    if let Ok(i) = key.parse::<i64>() {
        return Ok(Site::Int(i));
    }
    if key == "o" {
        return Ok(Site::root_word());
    }
    if let Some(rest) = key.strip_prefix("o.") {
        let word: std::result::Result<Vec<u8>, _> = rest.split('.').map(str::parse::<u8>).collect();
        return word.map(Site::Word).map_err(|_| Error::UnknownSite(key.to_string()));
    }
    Ok(Site::named(key))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub parameters: Value,
}

impl Metadata {
    pub fn new(command: &str, seed: Option<u64>, parameters: Value) -> Metadata {
        Metadata { tool: "brwlab".into(), version: VERSION.into(), command: command.into(), seed, parameters }
    }

    /// Comment lines that open every CSV file.
    pub fn csv_header(&self) -> String {
        let mut s = format!("# {} {}\n# command: {}\n", self.tool, self.version, self.command);
        if let Some(seed) = self.seed {
            s.push_str(&format!("# seed: {seed}\n"));
        }
        s.push_str(&format!("# parameters: {}\n", self.parameters));
        s
    }
}

/// Quotes a CSV field when needed.
pub fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BracketRecord {
    pub quantity: Quantity,
    pub target: Vec<String>,
    pub certified: bool,
    pub converged: bool,
    pub iterations: usize,
    pub residual_lower: f64,
    pub residual_upper: f64,
    pub sites: Vec<String>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl From<&ExtinctionBracket> for BracketRecord {
    fn from(b: &ExtinctionBracket) -> BracketRecord {
        BracketRecord {
            quantity: b.quantity,
            target: b.target.iter().map(|s| s.to_string()).collect(),
            certified: b.certified,
            converged: b.converged,
            iterations: b.iterations,
            residual_lower: b.residual_lower,
            residual_upper: b.residual_upper,
            sites: b.lower.window.sites().iter().map(|s| s.to_string()).collect(),
            lower: b.lower.values.clone(),
            upper: b.upper.values.clone(),
        }
    }
}

/// Everything needed to rebuild the window and re-check the brackets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VectorFile {
    pub metadata: Metadata,
    pub model: ModelFile,
    pub root: String,
    pub radius: usize,
    pub policy: BoundaryPolicy,
    pub brackets: Vec<BracketRecord>,
}

impl VectorFile {
    pub fn new(metadata: Metadata, model: ModelFile, dom: &TruncatedDomain, brackets: &[ExtinctionBracket]) -> VectorFile {
        VectorFile {
            metadata,
            model,
            root: dom.window.root().to_string(),
            radius: dom.radius(),
            policy: dom.policy,
            brackets: brackets.iter().map(BracketRecord::from).collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// One row per site: `site` then `<quantity>_lower,<quantity>_upper` for
    /// each bracket in order.
    pub fn to_csv(&self) -> String {
        let mut s = self.metadata.csv_header();
        s.push_str("site");
        for b in &self.brackets {
            let q = serde_json::to_value(b.quantity).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            s.push_str(&format!(",{q}_lower,{q}_upper"));
        }
        s.push('\n');
        let n = self.brackets.first().map_or(0, |b| b.sites.len());
        for i in 0..n {
            s.push_str(&csv_field(&self.brackets[0].sites[i]));
            for b in &self.brackets {
                s.push_str(&format!(",{},{}", b.lower[i], b.upper[i]));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_json(text: &str) -> Result<VectorFile> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| Error::Parse(format!("at '{}': {}", e.path(), e.inner())))
    }

    /// Rebuilds the window and recomputes the residual of every bracket side.
    pub fn recompute_residuals(&self) -> Result<Vec<(f64, f64)>> {
        let loaded = self.model.build()?;
        let root = resolve_site(&loaded.model, &self.root)?;
        let dom = truncate(&loaded.model, &root, self.radius, self.policy)?;
        let mut out = Vec::new();
        for b in &self.brackets {
            let keys: Vec<String> = dom.window.sites().iter().map(|s| s.to_string()).collect();
            if keys != b.sites {
                return Err(invalid("stored site list does not match the rebuilt window"));
            }
            let target: Vec<Site> = b.target.iter().map(|k| resolve_site(&loaded.model, k)).collect::<Result<_>>()?;
            let lo = bracket_residual(&dom, b.quantity, &target, Side::Lower, b.certified, &b.lower)?;
            let hi = bracket_residual(&dom, b.quantity, &target, Side::Upper, b.certified, &b.upper)?;
            out.push((lo, hi));
        }
        Ok(out)
    }
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory, so a failed write leaves no partial output.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| invalid(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genfun::{solve_global_extinction, SolveOptions};

    const GW: &str = r#"{"kind": "finite-factored", "sites": ["x"],
        "laws": {"x": {"count": {"pmf": [0.25, 0, 0.75]}, "diffusion": {"x": 1}}}}"#;

    #[test]
    fn parses_each_kind() {
        let m = parse_model(GW, "gw").unwrap();
        assert_eq!(m.model.finite_sites().unwrap().len(), 1);
        let general = r#"{"kind": "finite-general", "sites": ["a", "b"], "root": "b",
            "laws": {"a": [{"p": 0.5}, {"p": 0.5, "children": {"b": 3}}],
                     "b": [{"p": 0.5}, {"p": 0.5, "children": {"a": 3}}]}}"#;
        assert_eq!(parse_model(general, "g").unwrap().model.root(), Site::named("b"));
        let cont = r#"{"kind": "continuous", "sites": ["a", "b"], "lambda": 2,
            "rates": {"a": {"b": 1}, "b": {"a": 1, "b": 1}}, "death": {"b": 2}}"#;
        let m = parse_model(cont, "c").unwrap();
        assert_eq!(m.model.lambda(), Some(2.0));
        let SiteLaw::Factored(f) = m.model.law(&Site::named("b")).unwrap() else { panic!() };
        assert_eq!(f.count, CountLaw::Geometric { mean: 2.0 });
        let gal = r#"{"kind": "gallery", "name": "tree", "params": {"d": 4}}"#;
        assert_eq!(parse_model(gal, "t").unwrap().model.radial().unwrap().degree, 4);
    }

    #[test]
    fn errors_carry_a_location() {
        let e = parse_model("{\"kind\": \"finite-factored\",\n \"sites\": [1}", "m.json").unwrap_err();
        assert!(e.to_string().contains("m.json:2:"), "{e}");
        let e = parse_model(r#"{"kind": "finite-factored", "sites": [1], "laws": {}}"#, "m").unwrap_err();
        assert!(e.to_string().contains("sites[0]"), "{e}");
        let e = parse_model(r#"{"kind": "gallery", "name": "tree", "bogus": 1}"#, "m").unwrap_err();
        assert!(e.to_string().contains("bogus"));
        let bad = r#"{"kind": "finite-factored", "sites": ["x"],
            "laws": {"x": {"count": {"pmf": [1]}, "diffusion": {"y": 1}}}}"#;
        assert!(parse_model(bad, "m").unwrap_err().to_string().contains("laws.x.diffusion.y"));
    }

    #[test]
    fn vector_file_round_trips_exactly() {
        let m = parse_model(GW, "gw").unwrap();
        let dom = crate::domain::full_domain(&m.model, BoundaryPolicy::OutsideExtinct).unwrap();
        let b = solve_global_extinction(&dom, &SolveOptions::default()).unwrap();
        let f = VectorFile::new(Metadata::new("solve", None, Value::Null), m.file, &dom, &[b.clone()]);
        let back = VectorFile::from_json(&f.to_json().unwrap()).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.recompute_residuals().unwrap(), vec![(b.residual_lower, b.residual_upper)]);
        assert!(f.to_csv().lines().any(|l| l.starts_with("x,0.333")));
    }

    #[test]
    fn resolves_generated_keys() {
        let t = gallery::tree_edge_breeding(3, 0.5).unwrap();
        assert_eq!(resolve_site(&t, "o.0.2").unwrap(), Site::Word(vec![0, 2]));
        assert_eq!(resolve_site(&t, "o").unwrap(), Site::root_word());
    }
}
