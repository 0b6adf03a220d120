//! Trace debugging: address succession graphs, length statistics and a
//! report of the addresses and loops that make traces long.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::BufRead;

use serde::Serialize;

use crate::error::Result;
use crate::trace::{read_jsonl, Trace};

pub const START: &str = "START";
pub const END: &str = "END";

/// Directed multigraph over instance-stripped addresses. Edge weights count
/// how often one sample directly followed another.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuccessionGraph {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeMap<(String, String), u64>,
}

impl Default for SuccessionGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl SuccessionGraph {
    pub fn new() -> Self {
        SuccessionGraph {
            nodes: [START, END].iter().map(|s| s.to_string()).collect(),
            edges: BTreeMap::new(),
        }
    }

    pub fn add_trace(&mut self, trace: &Trace) {
        let keys: Vec<String> = trace.entries.iter().map(|e| e.address.base()).collect();
        self.add_sequence(keys.iter().map(String::as_str));
    }

    /// Adds one pass START → keys... → END.
    pub fn add_sequence<'a>(&mut self, keys: impl IntoIterator<Item = &'a str>) {
        let mut prev = START.to_owned();
        for key in keys {
            if !self.nodes.contains(key) {
                self.nodes.insert(key.to_owned());
            }
            *self.edges.entry((prev, key.to_owned())).or_insert(0) += 1;
            prev = key.to_owned();
        }
        *self.edges.entry((prev, END.to_owned())).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &SuccessionGraph) {
        self.nodes.extend(other.nodes.iter().cloned());
        for (edge, n) in &other.edges {
            *self.edges.entry(edge.clone()).or_insert(0) += n;
        }
    }

    pub fn out_flow(&self, node: &str) -> u64 {
        self.edges.iter().filter(|((a, _), _)| a == node).map(|(_, n)| n).sum()
    }

    pub fn in_flow(&self, node: &str) -> u64 {
        self.edges.iter().filter(|((_, b), _)| b == node).map(|(_, n)| n).sum()
    }

    /// Every non-sentinel node has equal in- and out-flow, and START and END
    /// carry the same number of traces.
    pub fn is_flow_conserved(&self) -> bool {
        let mut balance: BTreeMap<&str, i128> = BTreeMap::new();
        for ((a, b), n) in &self.edges {
            *balance.entry(a).or_insert(0) -= *n as i128;
            *balance.entry(b).or_insert(0) += *n as i128;
        }
        let start = balance.remove(START).unwrap_or(0);
        let end = balance.remove(END).unwrap_or(0);
        start == -end && balance.values().all(|b| *b == 0)
    }

    /// Elementary cycles, each listed from its lexicographically smallest
    /// node, with the smallest edge count along it.
    pub fn cycles(&self) -> Vec<Cycle> {
        let index: BTreeMap<&str, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
        let names: Vec<&str> = self.nodes.iter().map(String::as_str).collect();
        let mut adj: Vec<Vec<(usize, u64)>> = vec![Vec::new(); names.len()];
        for ((a, b), n) in &self.edges {
            adj[index[a.as_str()]].push((index[b.as_str()], *n));
        }
        let mut out = Vec::new();
        for start in 0..names.len() {
            let mut path = vec![start];
            let mut on_path = vec![false; names.len()];
            on_path[start] = true;
            cycles_from(start, start, &adj, &mut path, &mut on_path, u64::MAX, &names, &mut out);
        }
        out
    }
}

#[allow(clippy::too_many_arguments)]
fn cycles_from(
    start: usize,
    at: usize,
    adj: &[Vec<(usize, u64)>],
    path: &mut Vec<usize>,
    on_path: &mut [bool],
    min_count: u64,
    names: &[&str],
    out: &mut Vec<Cycle>,
) {
    for &(next, n) in &adj[at] {
        let m = min_count.min(n);
        if next == start {
            out.push(Cycle {
                nodes: path.iter().map(|i| names[*i].to_owned()).collect(),
                traversals: m,
            });
        } else if next > start && !on_path[next] {
            on_path[next] = true;
            path.push(next);
            cycles_from(start, next, adj, path, on_path, m, names, out);
            path.pop();
            on_path[next] = false;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cycle {
    pub nodes: Vec<String>,
    /// Smallest edge count along the cycle: a lower bound on how many times
    /// the loop was taken.
    pub traversals: u64,
}

/// Streams traces from JSONL into a graph.
pub fn build_graph<R: BufRead>(input: R) -> Result<SuccessionGraph> {
    let mut g = SuccessionGraph::new();
    for trace in read_jsonl(input) {
        g.add_trace(&trace?);
    }
    Ok(g)
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

/// DOT rendering; nodes and edges in lexicographic order.
pub fn graph_to_dot(g: &SuccessionGraph) -> String {
    let mut out = String::from("digraph succession {\n");
    for node in &g.nodes {
        let shape = if node == START || node == END { "box" } else { "ellipse" };
        writeln!(out, "  {} [shape={shape}];", quote(node)).expect("write to string");
    }
    for ((a, b), n) in &g.edges {
        writeln!(out, "  {} -> {} [label=\"{n}\"];", quote(a), quote(b)).expect("write to string");
    }
    out.push_str("}\n");
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
    pub hist: BTreeMap<usize, u64>,
}

/// Trace statistics. Length counts sample entries.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStats {
    pub n_traces: u64,
    pub length: LengthStats,
    /// Occurrences per instance-qualified address.
    pub addresses: BTreeMap<String, u64>,
    /// Per scope id: how many scope executions needed k retries.
    pub scopes: BTreeMap<String, BTreeMap<u32, u64>>,
}

impl Default for TraceStats {
    fn default() -> Self {
        TraceStats {
            n_traces: 0,
            length: LengthStats {
                min: 0,
                max: 0,
                mean: 0.0,
                hist: BTreeMap::new(),
            },
            addresses: BTreeMap::new(),
            scopes: BTreeMap::new(),
        }
    }
}

impl TraceStats {
    pub fn add_trace(&mut self, trace: &Trace) {
        let len = trace.entries.len();
        let n = self.n_traces as f64;
        self.length.mean = (self.length.mean * n + len as f64) / (n + 1.0);
        if self.n_traces == 0 {
            self.length.min = len;
            self.length.max = len;
        } else {
            self.length.min = self.length.min.min(len);
            self.length.max = self.length.max.max(len);
        }
        *self.length.hist.entry(len).or_insert(0) += 1;
        self.n_traces += 1;
        for e in &trace.entries {
            *self.addresses.entry(e.address.to_string()).or_insert(0) += 1;
        }
        // A scope execution ends where the scope changes or the iteration
        // counter falls back.
        let mut current: Option<(&str, u32)> = None;
        for e in &trace.entries {
            let next = e.scope_id.as_deref().map(|s| (s, e.iteration));
            match (current, next) {
                (Some((s, it)), Some((s2, it2))) if s == s2 && it2 >= it => current = Some((s, it2)),
                _ => {
                    self.close_scope(current);
                    current = next;
                }
            }
        }
        self.close_scope(current);
    }

    fn close_scope(&mut self, run: Option<(&str, u32)>) {
        if let Some((scope, retries)) = run {
            *self
                .scopes
                .entry(scope.to_owned())
                .or_default()
                .entry(retries)
                .or_insert(0) += 1;
        }
    }

    pub fn merge(&mut self, other: &TraceStats) {
        if other.n_traces == 0 {
            return;
        }
        let total = self.n_traces + other.n_traces;
        if self.n_traces == 0 {
            self.length.min = other.length.min;
            self.length.max = other.length.max;
        } else {
            self.length.min = self.length.min.min(other.length.min);
            self.length.max = self.length.max.max(other.length.max);
        }
        self.length.mean = (self.length.mean * self.n_traces as f64 + other.length.mean * other.n_traces as f64)
            / total as f64;
        self.n_traces = total;
        for (k, v) in &other.length.hist {
            *self.length.hist.entry(*k).or_insert(0) += v;
        }
        for (k, v) in &other.addresses {
            *self.addresses.entry(k.clone()).or_insert(0) += v;
        }
        for (scope, hist) in &other.scopes {
            let mine = self.scopes.entry(scope.clone()).or_default();
            for (k, v) in hist {
                *mine.entry(*k).or_insert(0) += v;
            }
        }
    }
}

pub fn compute_stats<R: BufRead>(input: R) -> Result<TraceStats> {
    let mut stats = TraceStats::default();
    for trace in read_jsonl(input) {
        stats.add_trace(&trace?);
    }
    Ok(stats)
}

/// Graph and statistics in one pass over a trace file.
pub fn inspect_traces<R: BufRead>(input: R) -> Result<(SuccessionGraph, TraceStats)> {
    let mut graph = SuccessionGraph::new();
    let mut stats = TraceStats::default();
    for trace in read_jsonl(input) {
        let trace = trace?;
        graph.add_trace(&trace);
        stats.add_trace(&trace);
    }
    Ok((graph, stats))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HotAddress {
    pub address: String,
    pub mean_occurrences: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HotspotReport {
    pub threshold: f64,
    pub n_traces: u64,
    pub hot_addresses: Vec<HotAddress>,
    pub cycles: Vec<Cycle>,
}

impl HotspotReport {
    pub fn is_empty(&self) -> bool {
        self.hot_addresses.is_empty() && self.cycles.is_empty()
    }
}

/// Addresses sampled more than `threshold` times per trace on average, and
/// every cycle of the graph, busiest first.
pub fn hotspot_report(stats: &TraceStats, graph: &SuccessionGraph, threshold: f64) -> HotspotReport {
    let mut hot_addresses: Vec<HotAddress> = if stats.n_traces == 0 {
        Vec::new()
    } else {
        graph
            .nodes
            .iter()
            .filter(|n| *n != START && *n != END)
            .map(|n| HotAddress {
                address: n.clone(),
                mean_occurrences: graph.in_flow(n) as f64 / stats.n_traces as f64,
            })
            .filter(|h| h.mean_occurrences > threshold)
            .collect()
    };
    hot_addresses.sort_by(|a, b| {
        b.mean_occurrences
            .total_cmp(&a.mean_occurrences)
            .then_with(|| a.address.cmp(&b.address))
    });
    let mut cycles = graph.cycles();
    cycles.sort_by(|a, b| b.traversals.cmp(&a.traversals).then_with(|| a.nodes.cmp(&b.nodes)));
    HotspotReport {
        threshold,
        n_traces: stats.n_traces,
        hot_addresses,
        cycles,
    }
}
