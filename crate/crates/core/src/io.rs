//! File formats. Every format carries an integer `schema` and readers reject
//! versions they do not know.
//!
//! * MDP and policy files are TOML. `transition` is flattened in `(s, a, s')`
//!   row-major order, `reward` and `probs` in `(s, a)` order. An MDP file may
//!   carry a `[features]` table with a flattened `(s·A + a, j)` feature table.
//! * Datasets are CSV with `# key=value` header lines (`schema`, `K`, `H`,
//!   `seed`) followed by `episode,h,s,a,r,s_next` rows, `h` 0-based. Rewards
//!   are written in shortest round-trip form, so reading back is bit-exact.
//! * FQE estimates are TOML records with the family tag, parameter layout
//!   version, flattened parameters and per-stage solver reports.
//! * Flat records (variance, bounds) are `field,value` CSV behind `#` header lines.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::approx::{Family, FeatureKind, FeatureMap, ParamVector, PARAM_LAYOUT_VERSION};
use crate::error::{Error, Result};
use crate::fqe::{FqeEstimate, SolverReport};
use crate::mdp::{Dataset, Policy, TabularMdp, Trajectory};
use crate::scalar::{lit, to_f64, Real};

pub const SCHEMA_VERSION: u32 = 1;

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn check_schema(found: u32, what: &str) -> Result<()> {
    if found != SCHEMA_VERSION {
        return Err(format_err(format!("{what} has schema {found}; this build reads schema {SCHEMA_VERSION}")));
    }
    Ok(())
}

fn parse_toml<D: for<'de> Deserialize<'de>>(text: &str, what: &str) -> Result<D> {
    toml::from_str(text).map_err(|e| format_err(format!("malformed {what}: {e}")))
}

fn to_toml<S: Serialize>(value: &S) -> Result<String> {
    toml::to_string(value).map_err(|e| format_err(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub kind: FeatureKind,
    pub dim: usize,
    pub table: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpRecord {
    pub schema: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub horizon: usize,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    pub initial_dist: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeatureRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub schema: u32,
    pub n_states: usize,
    pub n_actions: usize,
    pub probs: Vec<f64>,
}

fn widen<T: Real>(xs: impl IntoIterator<Item = T>) -> Vec<f64> {
    xs.into_iter().map(to_f64).collect()
}

pub fn mdp_to_string<T: Real>(mdp: &TabularMdp<T>, features: Option<&FeatureMap<T>>) -> Result<String> {
    let record = MdpRecord {
        schema: SCHEMA_VERSION,
        n_states: mdp.n_states(),
        n_actions: mdp.n_actions(),
        horizon: mdp.horizon(),
        transition: widen(mdp.transition().iter().copied()),
        reward: widen(mdp.reward().iter().copied()),
        initial_dist: widen(mdp.initial_dist().iter().copied()),
        features: features.map(|f| FeatureRecord {
            kind: f.kind(),
            dim: f.dim(),
            table: widen(f.table().iter().copied()),
        }),
    };
    to_toml(&record)
}

/// Parses an MDP file, returning the feature table when one is present.
pub fn mdp_from_str<T: Real>(text: &str) -> Result<(TabularMdp<T>, Option<FeatureMap<T>>)> {
    let r: MdpRecord = parse_toml(text, "MDP file")?;
    check_schema(r.schema, "MDP file")?;
    let (ns, na) = (r.n_states, r.n_actions);
    if r.transition.len() != ns * na * ns || r.reward.len() != ns * na {
        return Err(format_err("MDP arrays do not match n_states and n_actions"));
    }
    let t = Array3::from_shape_vec((ns, na, ns), r.transition.iter().map(|&x| lit::<T>(x)).collect())
        .map_err(|e| format_err(e.to_string()))?;
    let rew = Array2::from_shape_vec((ns, na), r.reward.iter().map(|&x| lit::<T>(x)).collect())
        .map_err(|e| format_err(e.to_string()))?;
    let mdp = TabularMdp::new(r.horizon, t, rew, r.initial_dist.iter().map(|&x| lit::<T>(x)).collect())?;
    let features = match r.features {
        None => None,
        Some(f) => {
            if f.dim == 0 || f.table.len() != ns * na * f.dim {
                return Err(format_err("feature table does not match n_states·n_actions × dim"));
            }
            let table = Array2::from_shape_vec((ns * na, f.dim), f.table.iter().map(|&x| lit::<T>(x)).collect())
                .map_err(|e| format_err(e.to_string()))?;
            Some(match f.kind {
                FeatureKind::OneHot => {
                    let one_hot = FeatureMap::one_hot(ns, na);
                    if *one_hot.table() != table {
                        return Err(format_err("one_hot feature table is not the identity"));
                    }
                    one_hot
                }
                _ => FeatureMap::custom(ns, na, table)?,
            })
        }
    };
    Ok((mdp, features))
}

pub fn policy_to_string<T: Real>(policy: &Policy<T>) -> Result<String> {
    to_toml(&PolicyRecord {
        schema: SCHEMA_VERSION,
        n_states: policy.n_states(),
        n_actions: policy.n_actions(),
        probs: widen(policy.probs().iter().copied()),
    })
}

pub fn policy_from_str<T: Real>(text: &str) -> Result<Policy<T>> {
    let r: PolicyRecord = parse_toml(text, "policy file")?;
    check_schema(r.schema, "policy file")?;
    if r.probs.len() != r.n_states * r.n_actions {
        return Err(format_err("policy probs do not match n_states and n_actions"));
    }
    Policy::from_flat(r.n_states, r.n_actions, r.probs.iter().map(|&x| lit::<T>(x)).collect())
}

pub const DATASET_COLUMNS: &str = "episode,h,s,a,r,s_next";

pub fn dataset_to_string<T: Real>(dataset: &Dataset<T>, provenance: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema={SCHEMA_VERSION}");
    let _ = writeln!(out, "# K={}", dataset.n_episodes());
    let _ = writeln!(out, "# H={}", dataset.horizon());
    let _ = writeln!(out, "# seed={}", dataset.seed());
    for (k, v) in provenance {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str(DATASET_COLUMNS);
    out.push('\n');
    for t in dataset.transitions() {
        let _ = writeln!(out, "{},{},{},{},{},{}", t.episode, t.h, t.s, t.a, t.r, t.s_next);
    }
    out
}

/// `# key=value` header lines of a file.
pub fn header_fields(text: &str) -> Vec<(String, String)> {
    text.lines()
        .take_while(|l| l.starts_with('#'))
        .filter_map(|l| l.trim_start_matches('#').trim().split_once('=').map(|(k, v)| (k.trim().into(), v.trim().into())))
        .collect()
}

fn header_value<X: std::str::FromStr>(fields: &[(String, String)], key: &str) -> Result<X> {
    let raw = fields
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v)
        .ok_or_else(|| format_err(format!("dataset header lacks {key}")))?;
    raw.parse().map_err(|_| format_err(format!("dataset header {key}={raw} is not valid")))
}

pub fn dataset_from_str<T: Real>(text: &str) -> Result<Dataset<T>> {
    let fields = header_fields(text);
    check_schema(header_value(&fields, "schema")?, "dataset file")?;
    let k: usize = header_value(&fields, "K")?;
    let horizon: usize = header_value(&fields, "H")?;
    let seed: u64 = header_value(&fields, "seed")?;
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    if lines.next().map(str::trim) != Some(DATASET_COLUMNS) {
        return Err(format_err(format!("dataset columns must be {DATASET_COLUMNS}")));
    }
    let mut episodes: Vec<Trajectory<T>> = (0..k)
        .map(|_| Trajectory { states: Vec::new(), actions: Vec::new(), rewards: Vec::new() })
        .collect();
    let mut expected = 0usize;
    for (line_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || format_err(format!("dataset row {} is malformed: {line}", line_no + 1));
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 6 {
            return Err(bad());
        }
        let int = |i: usize| cols[i].parse::<usize>().map_err(|_| bad());
        let (episode, h, s, a, s_next) = (int(0)?, int(1)?, int(2)?, int(3)?, int(5)?);
        let r: T = cols[4].parse().map_err(|_| bad())?;
        if episode != expected / horizon.max(1) || h != expected % horizon.max(1) || episode >= k {
            return Err(format_err(format!("dataset row {} is out of episode-major order", line_no + 1)));
        }
        let ep = &mut episodes[episode];
        if h == 0 {
            ep.states.push(s);
        } else if ep.states.last() != Some(&s) {
            return Err(format_err(format!("dataset row {} breaks the state chain", line_no + 1)));
        }
        ep.actions.push(a);
        ep.rewards.push(r);
        ep.states.push(s_next);
        expected += 1;
    }
    if expected != k * horizon {
        return Err(format_err(format!("dataset has {expected} rows, header promises {}", k * horizon)));
    }
    Dataset::new(episodes, seed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EstimateRecord {
    schema: u32,
    layout_version: u32,
    family: Family,
    horizon: usize,
    d: usize,
    value: f64,
    thetas: Vec<f64>,
    per_stage: Vec<SolverReport>,
}

pub fn estimate_to_string<T: Real>(est: &FqeEstimate<T>) -> Result<String> {
    let d = est.thetas.first().map_or(0, |t| t.dim());
    to_toml(&EstimateRecord {
        schema: SCHEMA_VERSION,
        layout_version: PARAM_LAYOUT_VERSION,
        family: est.family,
        horizon: est.thetas.len(),
        d,
        value: to_f64(est.value),
        thetas: est.thetas.iter().flat_map(|t| widen(t.0.iter().copied())).collect(),
        per_stage: est.per_stage.clone(),
    })
}

pub fn estimate_from_str<T: Real>(text: &str) -> Result<FqeEstimate<T>> {
    let r: EstimateRecord = parse_toml(text, "estimate file")?;
    check_schema(r.schema, "estimate file")?;
    if r.layout_version != PARAM_LAYOUT_VERSION {
        return Err(format_err(format!("parameter layout {} is not supported", r.layout_version)));
    }
    if r.thetas.len() != r.horizon * r.d || r.per_stage.len() != r.horizon {
        return Err(format_err("estimate arrays do not match horizon and d"));
    }
    let thetas = r
        .thetas
        .chunks(r.d.max(1))
        .take(r.horizon)
        .map(|c| ParamVector(Array1::from_iter(c.iter().map(|&x| lit::<T>(x)))))
        .collect();
    Ok(FqeEstimate { family: r.family, thetas, value: lit(r.value), per_stage: r.per_stage })
}

/// `field,value` CSV behind `# key=value` provenance lines.
pub fn flat_record(provenance: &[(String, String)], fields: &[(String, String)]) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# schema={SCHEMA_VERSION}");
    for (k, v) in provenance {
        let _ = writeln!(out, "# {k}={v}");
    }
    out.push_str("field,value\n");
    for (k, v) in fields {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

pub fn parse_flat_record(text: &str) -> Result<Vec<(String, String)>> {
    let fields = header_fields(text);
    check_schema(header_value(&fields, "schema")?, "record file")?;
    let mut lines = text.lines().skip_while(|l| l.starts_with('#'));
    if lines.next().map(str::trim) != Some("field,value") {
        return Err(format_err("record columns must be field,value"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once(',')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| format_err(format!("malformed record line: {l}")))
        })
        .collect()
}

/// One value per line.
pub fn values_to_string(values: &[f64]) -> String {
    let mut out = String::new();
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    out
}

pub fn values_from_str(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.trim().parse().map_err(|_| format_err(format!("not a number: {l}"))))
        .collect()
}

/// Provenance sidecar for a results table.
pub fn provenance_to_string(provenance: &[(String, String)]) -> Result<String> {
    let mut table = toml::map::Map::new();
    table.insert("schema".into(), toml::Value::Integer(i64::from(SCHEMA_VERSION)));
    for (k, v) in provenance {
        table.insert(k.clone(), toml::Value::String(v.clone()));
    }
    toml::to_string(&toml::Value::Table(table)).map_err(|e| format_err(e.to_string()))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_string(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}
