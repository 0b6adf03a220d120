use icppl::inspect::{build_graph, compute_stats, hotspot_report, inspect_traces, SuccessionGraph, TraceStats, END, START};
use icppl::runtime::{run_model, RunOptions};
use icppl::trace::{write_jsonl, Trace};
use icppl::zoo::ZooModel;
use proptest::prelude::*;

fn traces(model: &ZooModel, n: u64, record: bool) -> Vec<Trace> {
    (0..n)
        .map(|i| {
            let opts = if record { RunOptions::record(i) } else { RunOptions::prior(i) };
            run_model(model, &opts.with_trace_id(i)).unwrap()
        })
        .collect()
}

fn jsonl(traces: &[Trace]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_jsonl(&mut buf, traces).unwrap();
    buf
}

#[test]
fn rejection_demo_prior_traces_show_the_disc_loop() {
    let ts = traces(&ZooModel::RejectionDemo, 4000, false);
    let (g, stats) = inspect_traces(&jsonl(&ts)[..]).unwrap();
    assert!(g.is_flow_conserved());
    assert_eq!(g.out_flow(START), 4000);
    assert_eq!(g.in_flow(END), 4000);
    let expected = 2.0 * 4.0 / std::f64::consts::PI;
    assert!((stats.length.mean - expected).abs() < 0.05 * expected, "{}", stats.length.mean);

    let report = hotspot_report(&stats, &g, 1.1);
    let hot: Vec<&str> = report.hot_addresses.iter().map(|h| h.address.as_str()).collect();
    assert_eq!(hot.len(), 2);
    assert!(hot.contains(&"disc/u:Uniform") && hot.contains(&"disc/v:Uniform"));
    assert_eq!(report.cycles.len(), 1);
    assert_eq!(report.cycles[0].nodes, ["disc/u:Uniform", "disc/v:Uniform"]);

    let retries = &stats.scopes["disc"];
    assert_eq!(retries.values().sum::<u64>(), 4000);
    // P(no retry) = pi/4
    let p0 = retries[&0] as f64 / 4000.0;
    assert!((p0 - std::f64::consts::FRAC_PI_4).abs() < 0.03, "{p0}");
}

#[test]
fn record_mode_traces_have_no_loop() {
    let ts = traces(&ZooModel::RejectionDemo, 500, true);
    let (g, stats) = inspect_traces(&jsonl(&ts)[..]).unwrap();
    assert_eq!(stats.length.min, 2);
    assert_eq!(stats.length.max, 2);
    assert!(g.cycles().is_empty());
    // Retry counts survive in the iteration numbers.
    assert!(stats.scopes["disc"].keys().any(|k| *k > 0));
}

#[test]
fn split_files_merge_to_the_same_result() {
    let ts = traces(&ZooModel::RejectionDemo, 300, false);
    let whole = inspect_traces(&jsonl(&ts)[..]).unwrap();
    let (mut g, mut s) = (SuccessionGraph::new(), TraceStats::default());
    for chunk in ts.chunks(77) {
        let (gi, si) = inspect_traces(&jsonl(chunk)[..]).unwrap();
        g.merge(&gi);
        s.merge(&si);
    }
    assert_eq!(g, whole.0);
    assert_eq!(s.length.hist, whole.1.length.hist);
    assert_eq!(s.addresses, whole.1.addresses);
    assert_eq!(s.scopes, whole.1.scopes);
    assert!((s.length.mean - whole.1.length.mean).abs() < 1e-12);
}

#[test]
fn malformed_line_is_reported_with_its_number() {
    let ts = traces(&ZooModel::GaussianUnknownMean, 3, false);
    let mut buf = jsonl(&ts);
    buf.extend_from_slice(b"{\"trace_id\": oops}\n");
    let err = build_graph(&buf[..]).unwrap_err();
    assert!(matches!(err, icppl::error::Error::MalformedTrace { line: 4, .. }), "{err:?}");
    assert!(compute_stats(&buf[..]).is_err());
}

proptest! {
    #[test]
    fn every_trace_adds_len_plus_one_traversals(
        seqs in proptest::collection::vec(proptest::collection::vec(0u8..4, 0..12), 0..30)
    ) {
        let mut g = SuccessionGraph::new();
        let names = ["a", "b", "c", "d"];
        for s in &seqs {
            g.add_sequence(s.iter().map(|k| names[*k as usize]));
        }
        let total: u64 = g.edges.values().sum();
        let expected: usize = seqs.iter().map(|s| s.len() + 1).sum();
        prop_assert_eq!(total as usize, expected);
        prop_assert!(g.is_flow_conserved());
        prop_assert_eq!(g.out_flow(START) as usize, seqs.len());
        prop_assert_eq!(g.in_flow(END) as usize, seqs.len());
    }
}
