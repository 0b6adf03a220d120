//! Addresses, execution traces and importance-weight arithmetic.
//!
//! An [`Address`] names a random choice by its structural position: the path
//! of instrumenter-supplied site identifiers leading to it, the distribution
//! family drawn there, and how many times that (path, family) pair has already
//! occurred in the current execution. The rendered form is
//! `path/joined/by/slash:Family#instance`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::dist::Family;
use crate::error::{Error, Result};

/// A drawn or observed scalar. Multivariate quantities are split into one
/// sample statement per component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Int(i64),
    Real(f64),
}

impl Value {
    pub fn as_f64(self) -> f64 {
        match self {
            Value::Int(k) => k as f64,
            Value::Real(x) => x,
        }
    }

    pub fn as_int(self) -> Option<i64> {
        match self {
            Value::Int(k) => Some(k),
            Value::Real(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(k) => write!(f, "{k}"),
            Value::Real(x) => write!(f, "{x}"),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Real(x)
    }
}

impl From<i64> for Value {
    fn from(k: i64) -> Self {
        Value::Int(k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Address {
    pub path: Arc<[String]>,
    pub family: Family,
    pub instance: u32,
}

impl Address {
    pub fn path_string(&self) -> String {
        self.path.join("/")
    }

    /// Rendered address with the instance counter stripped. Loop sites that
    /// recur within one execution share this key.
    pub fn base(&self) -> String {
        format!("{}:{}", self.path_string(), self.family)
    }

    pub fn parse(s: &str) -> Result<Address> {
        let bad = || Error::MalformedFile(format!("bad address `{s}`"));
        let (head, instance) = s.rsplit_once('#').ok_or_else(bad)?;
        let (path, family) = head.rsplit_once(':').ok_or_else(bad)?;
        let instance = instance.parse().map_err(|_| bad())?;
        if path.is_empty() {
            return Err(bad());
        }
        let family = Family::parse(family).map_err(|_| bad())?;
        Ok(Address {
            path: path.split('/').map(str::to_owned).collect(),
            family,
            instance,
        })
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}#{}", self.path_string(), self.family, self.instance)
    }
}

impl Serialize for Address {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Address {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Address::parse(&s).map_err(serde::de::Error::custom)
    }
}

/// Per-execution occurrence counters.
#[derive(Debug, Clone, Default)]
pub struct AddressCounters {
    paths: HashMap<String, PathCounters>,
}

#[derive(Debug, Clone)]
struct PathCounters {
    // shared by every address minted at this path
    path: Arc<[String]>,
    // family -> occurrences so far
    counts: Vec<(Family, u32)>,
    // instance -> family first seen in that (path, instance) slot
    slots: Vec<Family>,
}

impl AddressCounters {
    pub fn new() -> Self {
        Self::default()
    }
}

fn valid_site_id(site_id: &str) -> bool {
    !site_id.is_empty() && !site_id.contains(['/', ':', '#'])
}

/// Extends `parent` with `site_id` and assigns the next instance number for
/// the resulting (path, family) pair.
pub fn address_extend(
    parent: &[String],
    site_id: &str,
    family: Family,
    counters: &mut AddressCounters,
) -> Result<Address> {
    if !valid_site_id(site_id) {
        return Err(Error::Precondition(format!(
            "site id `{site_id}` must be non-empty and free of '/', ':' and '#'"
        )));
    }
    let joined;
    let path_string = if parent.is_empty() {
        site_id
    } else {
        joined = format!("{}/{site_id}", parent.join("/"));
        joined.as_str()
    };
    let slot = match counters.paths.get_mut(path_string) {
        Some(slot) => slot,
        None => counters
            .paths
            .entry(path_string.to_owned())
            .or_insert_with(|| PathCounters {
                path: parent.iter().cloned().chain([site_id.to_owned()]).collect(),
                counts: Vec::new(),
                slots: Vec::new(),
            }),
    };
    let instance = match slot.counts.iter_mut().find(|(f, _)| *f == family) {
        Some((_, n)) => {
            *n += 1;
            *n - 1
        }
        None => {
            slot.counts.push((family, 1));
            0
        }
    };
    match slot.slots.get(instance as usize) {
        Some(&existing) if existing != family => {
            // Undo the count so the error leaves the counters unchanged.
            if let Some((_, n)) = slot.counts.iter_mut().find(|(f, _)| *f == family) {
                *n -= 1;
            }
            return Err(Error::AddressFamilyMismatch {
                address: format!("{path_string}#{instance}"),
                existing: existing.name().to_owned(),
                requested: family.name().to_owned(),
            });
        }
        Some(_) => {}
        None => slot.slots.push(family),
    }
    Ok(Address {
        path: Arc::clone(&slot.path),
        family,
        instance,
    })
}

/// Serializes non-finite log-densities as `null`; `null` reads back as −∞.
mod log_density {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(*x)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NEG_INFINITY))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    #[serde(rename = "addr")]
    pub address: Address,
    pub family: String,
    #[serde(rename = "params")]
    pub dist_params: Vec<f64>,
    pub value: Value,
    #[serde(with = "log_density")]
    pub log_p: f64,
    #[serde(with = "log_density")]
    pub log_q: f64,
    pub scope_id: Option<String>,
    pub iteration: u32,
    pub accepted: bool,
    /// Set when guided inference had no proposal for this address and drew
    /// from the prior instead.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserveEntry {
    #[serde(rename = "addr")]
    pub address: Address,
    #[serde(with = "log_density")]
    pub log_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub trace_id: u64,
    pub entries: Vec<TraceEntry>,
    pub observes: Vec<ObserveEntry>,
    pub predicts: BTreeMap<String, Value>,
    #[serde(with = "log_density")]
    pub log_weight: f64,
}

impl Trace {
    pub fn new(trace_id: u64) -> Self {
        Trace {
            trace_id,
            entries: Vec::new(),
            observes: Vec::new(),
            predicts: BTreeMap::new(),
            log_weight: 0.0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn finalize(&mut self) {
        self.log_weight = trace_log_weight(self);
    }

    pub fn fallback_count(&self) -> usize {
        self.entries.iter().filter(|e| e.fallback).count()
    }

    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// `Σ observe log-likelihoods + Σ (log_p − log_q)` over every executed entry,
/// including entries from rejected loop iterations.
pub fn trace_log_weight(trace: &Trace) -> f64 {
    let likelihood: f64 = trace.observes.iter().map(|o| o.log_likelihood).sum();
    let ratio: f64 = trace.entries.iter().map(|e| e.log_p - e.log_q).sum();
    likelihood + ratio
}

pub fn write_jsonl<'a, W: Write>(mut out: W, traces: impl IntoIterator<Item = &'a Trace>) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Streams traces from JSONL, skipping blank lines. Errors carry the 1-based
/// line number.
pub fn read_jsonl<R: BufRead>(input: R) -> impl Iterator<Item = Result<Trace>> {
    input
        .lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let line_no = i + 1;
            match line {
                Err(e) => Some(Err(Error::MalformedTrace {
                    line: line_no,
                    reason: e.to_string(),
                })),
                Ok(l) if l.trim().is_empty() => None,
                Ok(l) => Some(serde_json::from_str::<Trace>(&l).map_err(|e| {
                    Error::MalformedTrace {
                        line: line_no,
                        reason: e.to_string(),
                    }
                })),
            }
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(log_p: f64, log_q: f64) -> TraceEntry {
        TraceEntry {
            address: Address::parse("a:Normal#0").unwrap(),
            family: "Normal".into(),
            dist_params: vec![0.0, 1.0],
            value: Value::Real(0.25),
            log_p,
            log_q,
            scope_id: None,
            iteration: 0,
            accepted: true,
            fallback: false,
        }
    }

    #[test]
    fn first_occurrence_is_instance_zero_then_increments() {
        let mut c = AddressCounters::new();
        let a = address_extend(&[], "A1", Family::Normal, &mut c).unwrap();
        assert_eq!(a.to_string(), "A1:Normal#0");
        let b = address_extend(&[], "A1", Family::Normal, &mut c).unwrap();
        assert_eq!(b.to_string(), "A1:Normal#1");
    }

    #[test]
    fn family_change_at_same_slot_is_rejected() {
        let mut c = AddressCounters::new();
        address_extend(&[], "A1", Family::Normal, &mut c).unwrap();
        let err = address_extend(&[], "A1", Family::Categorical, &mut c).unwrap_err();
        assert!(matches!(err, Error::AddressFamilyMismatch { .. }), "{err}");
    }

    #[test]
    fn nested_paths_render_with_slashes() {
        let mut c = AddressCounters::new();
        let a = address_extend(&["disc".to_owned()], "u", Family::Uniform, &mut c).unwrap();
        assert_eq!(a.to_string(), "disc/u:Uniform#0");
        assert_eq!(a.base(), "disc/u:Uniform");
        assert_eq!(Address::parse("disc/u:Uniform#0").unwrap(), a);
    }

    #[test]
    fn bad_site_ids_are_rejected() {
        let mut c = AddressCounters::new();
        for id in ["", "a/b", "a:b", "a#1"] {
            assert!(address_extend(&[], id, Family::Normal, &mut c).is_err(), "{id:?}");
        }
    }

    #[test]
    fn log_weight_of_empty_trace_is_zero() {
        assert_eq!(trace_log_weight(&Trace::new(0)), 0.0);
    }

    #[test]
    fn log_weight_prior_proposal_terms_cancel() {
        let mut t = Trace::new(0);
        t.entries.push(entry(-1.3, -1.3));
        t.observes.push(ObserveEntry {
            address: Address::parse("y:Normal#0").unwrap(),
            log_likelihood: -0.5 * (2.0 * std::f64::consts::PI).ln(),
        });
        assert!((trace_log_weight(&t) - (-0.9189385)).abs() < 1e-7);
    }

    #[test]
    fn log_weight_hand_sum() {
        let mut t = Trace::new(0);
        t.entries.push(entry(-1.0, -2.0));
        t.observes.push(ObserveEntry {
            address: Address::parse("y:Normal#0").unwrap(),
            log_likelihood: -0.5,
        });
        assert_eq!(trace_log_weight(&t), 0.5);
    }

    #[test]
    fn jsonl_field_names_and_infinite_likelihood() {
        let mut t = Trace::new(7);
        t.entries.push(entry(-1.0, -2.0));
        t.observes.push(ObserveEntry {
            address: Address::parse("y:Uniform#0").unwrap(),
            log_likelihood: f64::NEG_INFINITY,
        });
        t.predicts.insert("channel".into(), Value::Int(3));
        t.finalize();
        let line = t.to_json_line().unwrap();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in ["trace_id", "entries", "observes", "predicts", "log_weight"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        let e = &v["entries"][0];
        for key in ["addr", "family", "params", "value", "log_p", "log_q", "scope_id", "iteration", "accepted"] {
            assert!(e.get(key).is_some(), "missing entries[].{key}");
        }
        assert!(e.get("fallback").is_none());
        assert_eq!(v["observes"][0]["addr"], "y:Uniform#0");
        assert!(v["log_weight"].is_null());

        let back: Trace = serde_json::from_str(&line).unwrap();
        assert_eq!(back.observes[0].log_likelihood, f64::NEG_INFINITY);
        assert_eq!(back.predicts["channel"], Value::Int(3));
        assert_eq!(back.entries, t.entries);
    }

    #[test]
    fn malformed_lines_report_line_numbers() {
        let good = Trace::new(0).to_json_line().unwrap();
        let input = format!("{good}\n\n{{not json\n");
        let results: Vec<_> = read_jsonl(input.as_bytes()).collect();
        assert_eq!(results.len(), 2);
        assert!(results[0].is_ok());
        match &results[1] {
            Err(Error::MalformedTrace { line, .. }) => assert_eq!(*line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
