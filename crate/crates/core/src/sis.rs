//! Sequential importance sampling over complete model executions, and the
//! weighted summaries computed from the resulting particles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::runtime::{derive_seed, run_model, Model, ProposalSource, RunOptions};
use crate::trace::{Trace, Value};

pub const SUMMARY_QUANTILES: [f64; 3] = [0.05, 0.5, 0.95];

#[derive(Debug, Clone)]
pub struct ParticleSet {
    pub traces: Vec<Trace>,
    pub log_weights: Vec<f64>,
    /// Normalized weights, parallel to `traces`.
    pub weights: Vec<f64>,
    pub normalized: bool,
}

impl ParticleSet {
    pub fn from_traces(traces: Vec<Trace>) -> Result<Self> {
        let log_weights: Vec<f64> = traces.iter().map(|t| t.log_weight).collect();
        let weights = normalize_log_weights(&log_weights).map_err(|_| Error::AllWeightsZero {
            first_zero_observe: first_zero_observe(&traces),
        })?;
        Ok(ParticleSet {
            traces,
            log_weights,
            weights,
            normalized: true,
        })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn fallback_count(&self) -> usize {
        self.traces.iter().map(Trace::fallback_count).sum()
    }
}

fn first_zero_observe(traces: &[Trace]) -> String {
    traces
        .iter()
        .flat_map(|t| &t.observes)
        .find(|o| o.log_likelihood == f64::NEG_INFINITY)
        .map(|o| o.address.to_string())
        .unwrap_or_else(|| "<none>".to_owned())
}

/// Max-subtracted softmax of `log_weights`.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::AllWeightsZero {
            first_zero_observe: "<none>".to_owned(),
        });
    }
    let unnorm: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = unnorm.iter().sum();
    Ok(unnorm.into_iter().map(|w| w / total).collect())
}

pub fn sis_infer(
    model: &dyn Model,
    observation: &[f64],
    n_particles: usize,
    proposal_source: Option<&dyn ProposalSource>,
    master_seed: u64,
) -> Result<ParticleSet> {
    sis_infer_with(model, observation, n_particles, proposal_source, master_seed, Parallelism::default())
}

pub fn sis_infer_with(
    model: &dyn Model,
    observation: &[f64],
    n_particles: usize,
    proposal_source: Option<&dyn ProposalSource>,
    master_seed: u64,
    strategy: Parallelism,
) -> Result<ParticleSet> {
    if n_particles == 0 {
        return Err(Error::Precondition("n_particles must be at least 1".into()));
    }
    let traces = map_indexed(n_particles, strategy, |i| {
        let opts = RunOptions::guided(derive_seed(master_seed, i as u64), observation, proposal_source)
            .with_trace_id(i as u64);
        run_model(model, &opts)
    });
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    ParticleSet::from_traces(traces)
}

pub fn effective_sample_size(ps: &ParticleSet) -> f64 {
    ess_of_weights(&ps.weights)
}

pub fn ess_of_weights(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SummaryKind {
    Real,
    Int,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub predict: String,
    pub kind: SummaryKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub var: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quantiles: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub histogram: Option<BTreeMap<i64, f64>>,
    pub ess: f64,
    pub n_particles: usize,
}

pub fn posterior_summary(ps: &ParticleSet, predict_name: &str) -> Result<Summary> {
    let values = ps
        .traces
        .iter()
        .map(|t| t.predicts.get(predict_name).copied())
        .collect::<Option<Vec<Value>>>()
        .ok_or_else(|| Error::MissingPredict(predict_name.to_owned()))?;
    let ess = effective_sample_size(ps);
    let all_int = values.iter().all(|v| matches!(v, Value::Int(_)));
    let mut summary = Summary {
        predict: predict_name.to_owned(),
        kind: if all_int { SummaryKind::Int } else { SummaryKind::Real },
        mean: None,
        var: None,
        quantiles: None,
        histogram: None,
        ess,
        n_particles: ps.len(),
    };
    if all_int {
        let mut hist = BTreeMap::new();
        for (v, w) in values.iter().zip(&ps.weights) {
            *hist.entry(v.as_int().expect("all ints")).or_insert(0.0) += w;
        }
        summary.histogram = Some(hist);
    } else {
        let xs: Vec<f64> = values.iter().map(|v| v.as_f64()).collect();
        let (mean, var) = weighted_mean_var(&xs, &ps.weights);
        summary.mean = Some(mean);
        summary.var = Some(var);
        summary.quantiles = Some(
            SUMMARY_QUANTILES
                .iter()
                .map(|&p| (format!("{p}"), weighted_quantile(&xs, &ps.weights, p)))
                .collect(),
        );
    }
    Ok(summary)
}

pub fn weighted_mean_var(xs: &[f64], weights: &[f64]) -> (f64, f64) {
    let mean: f64 = xs.iter().zip(weights).map(|(x, w)| x * w).sum();
    let var: f64 = xs.iter().zip(weights).map(|(x, w)| w * (x - mean).powi(2)).sum();
    (mean, var)
}

/// Left inverse of the weighted empirical CDF, interpolated linearly between
/// consecutive particle values. Zero-weight particles are ignored.
pub fn weighted_quantile(xs: &[f64], weights: &[f64], p: f64) -> f64 {
    let mut pts: Vec<(f64, f64)> = xs
        .iter()
        .zip(weights)
        .filter(|(_, w)| **w > 0.0)
        .map(|(x, w)| (*x, *w))
        .collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let Some(&(first, w0)) = pts.first() else {
        return f64::NAN;
    };
    let mut cum = w0;
    if p <= cum {
        return first;
    }
    for pair in pts.windows(2) {
        let (x0, _) = pair[0];
        let (x1, w1) = pair[1];
        let next = cum + w1;
        if p <= next {
            return x0 + (p - cum) / w1 * (x1 - x0);
        }
        cum = next;
    }
    pts.last().expect("non-empty").0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set_with(values: &[Value], weights: &[f64]) -> ParticleSet {
        let traces = values
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let mut t = Trace::new(i as u64);
                t.predicts.insert("x".into(), *v);
                t.log_weight = weights[i].ln();
                t
            })
            .collect();
        ParticleSet::from_traces(traces).unwrap()
    }

    #[test]
    fn ess_examples() {
        assert!((ess_of_weights(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(ess_of_weights(&[1.0, 0.0, 0.0, 0.0]), 1.0);
        assert!((ess_of_weights(&[0.5, 0.25, 0.25]) - 1.0 / 0.375).abs() < 1e-12);
    }

    #[test]
    fn constant_int_predict_histogram() {
        let ps = set_with(&[Value::Int(2); 3], &[0.2, 0.5, 0.3]);
        let s = posterior_summary(&ps, "x").unwrap();
        assert_eq!(s.kind, SummaryKind::Int);
        let hist = s.histogram.unwrap();
        assert_eq!(hist.len(), 1);
        assert!((hist[&2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_point_mean_and_variance() {
        let ps = set_with(&[Value::Real(0.0), Value::Real(1.0)], &[0.5, 0.5]);
        let s = posterior_summary(&ps, "x").unwrap();
        assert_eq!(s.mean, Some(0.5));
        assert_eq!(s.var, Some(0.25));
        let q = s.quantiles.unwrap();
        assert_eq!(q["0.05"], 0.0);
        assert_eq!(q["0.5"], 0.0);
        assert!((q["0.95"] - 0.9).abs() < 1e-12);
    }

    #[test]
    fn missing_predict_is_an_error() {
        let mut ps = set_with(&[Value::Real(0.0), Value::Real(1.0)], &[0.5, 0.5]);
        ps.traces[1].predicts.clear();
        assert!(matches!(posterior_summary(&ps, "x"), Err(Error::MissingPredict(_))));
    }

    #[test]
    fn single_particle_normalizes_to_one() {
        let ps = set_with(&[Value::Real(3.0)], &[1e-300]);
        assert_eq!(ps.weights, vec![1.0]);
        assert_eq!(effective_sample_size(&ps), 1.0);
    }

    #[test]
    fn all_zero_weights_error() {
        let mut t = Trace::new(0);
        t.log_weight = f64::NEG_INFINITY;
        assert!(matches!(ParticleSet::from_traces(vec![t]), Err(Error::AllWeightsZero { .. })));
    }

    #[test]
    fn quantile_interpolates_weighted_cdf() {
        let xs = [3.0, 1.0, 2.0];
        let ws = [0.25, 0.25, 0.5];
        assert_eq!(weighted_quantile(&xs, &ws, 0.1), 1.0);
        assert_eq!(weighted_quantile(&xs, &ws, 0.5), 1.5);
        assert_eq!(weighted_quantile(&xs, &ws, 0.75), 2.0);
        assert_eq!(weighted_quantile(&xs, &ws, 0.875), 2.5);
        assert_eq!(weighted_quantile(&xs, &ws, 1.0), 3.0);
    }

    #[test]
    fn summary_json_shape() {
        let ps = set_with(&[Value::Real(0.0), Value::Real(1.0)], &[0.5, 0.5]);
        let v = serde_json::to_value(posterior_summary(&ps, "x").unwrap()).unwrap();
        assert_eq!(v["kind"], "real");
        assert!(v.get("histogram").is_none());
        for k in ["predict", "mean", "var", "quantiles", "ess", "n_particles"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }

    proptest! {
        #[test]
        fn normalization_sums_to_one(
            lw in proptest::collection::vec(-700.0..0.0f64, 1..200),
            shift in -1e4..1e4f64,
        ) {
            let lw: Vec<f64> = lw.iter().map(|x| x + shift).collect();
            let w = normalize_log_weights(&lw).unwrap();
            let total: f64 = w.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(w.iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn normalization_with_spread_700() {
        let lw = [0.0, -700.0, -350.0, -1.0, f64::NEG_INFINITY];
        let w = normalize_log_weights(&lw).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert_eq!(w[4], 0.0);
    }
}
