//! Distribution families, their log-densities, and the proposal family the
//! inference network parameterizes for each prior family.
//!
//! | prior         | proposal                   | raw parameters          |
//! |---------------|----------------------------|-------------------------|
//! | Normal        | Normal(mu, sigma)          | mu, softplus⁻¹(sigma)   |
//! | Uniform(a, b) | Beta(alpha, beta) on (a, b)| softplus⁻¹ of each shape|
//! | Categorical(k)| Categorical(softmax(l))    | k logits                |
//! | Exponential   | LogNormal(mu, sigma)       | mu, softplus⁻¹(sigma)   |
//! | Poisson       | Poisson(rate)              | softplus⁻¹(rate)        |

use std::fmt;

use rand::Rng;
use rand_distr::Distribution as _;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::trace::Value;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const PROB_SUM_TOL: f64 = 1e-9;
/// Lower bound applied after softplus so extreme raw outputs still yield a
/// valid distribution.
const SCALE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Family {
    Normal,
    Uniform,
    Categorical,
    Exponential,
    Poisson,
    Beta,
    LogNormal,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "Normal",
            Family::Uniform => "Uniform",
            Family::Categorical => "Categorical",
            Family::Exponential => "Exponential",
            Family::Poisson => "Poisson",
            Family::Beta => "Beta",
            Family::LogNormal => "LogNormal",
        }
    }

    pub fn parse(name: &str) -> Result<Family> {
        Ok(match name {
            "Normal" => Family::Normal,
            "Uniform" => Family::Uniform,
            "Categorical" => Family::Categorical,
            "Exponential" => Family::Exponential,
            "Poisson" => Family::Poisson,
            "Beta" => Family::Beta,
            "LogNormal" => Family::LogNormal,
            other => return Err(Error::UnknownFamily(other.to_owned())),
        })
    }

    pub fn is_discrete(self) -> bool {
        matches!(self, Family::Categorical | Family::Poisson)
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Immutable, validated distribution. Construct through the checked
/// constructors; the variants are exposed for matching only.
#[derive(Debug, Clone, PartialEq)]
pub enum Distribution {
    Normal { mu: f64, sigma: f64 },
    Uniform { lo: f64, hi: f64 },
    Categorical { log_probs: Vec<f64> },
    Exponential { rate: f64 },
    Poisson { rate: f64 },
    /// Beta(alpha, beta) rescaled from (0, 1) onto (lo, hi).
    Beta { alpha: f64, beta: f64, lo: f64, hi: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

fn invalid(family: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        family,
        reason: reason.into(),
    }
}

fn positive(family: &'static str, name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(invalid(family, format!("{name} must be finite and > 0, got {x}")))
    }
}

fn finite(family: &'static str, name: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(invalid(family, format!("{name} must be finite, got {x}")))
    }
}

impl Distribution {
    pub fn normal(mu: f64, sigma: f64) -> Result<Self> {
        finite("Normal", "mu", mu)?;
        positive("Normal", "sigma", sigma)?;
        Ok(Distribution::Normal { mu, sigma })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self> {
        finite("Uniform", "lo", lo)?;
        finite("Uniform", "hi", hi)?;
        if lo >= hi {
            return Err(invalid("Uniform", format!("need lo < hi, got ({lo}, {hi})")));
        }
        Ok(Distribution::Uniform { lo, hi })
    }

    pub fn categorical(probs: &[f64]) -> Result<Self> {
        if probs.is_empty() {
            return Err(invalid("Categorical", "no categories"));
        }
        if let Some(p) = probs.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
            return Err(invalid("Categorical", format!("probability {p} is not in [0, inf)")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid("Categorical", format!("probabilities sum to {total}")));
        }
        Ok(Distribution::Categorical {
            log_probs: probs.iter().map(|p| p.ln()).collect(),
        })
    }

    /// Categorical with probabilities `softmax(logits)`, log-probabilities
    /// kept exact in log space.
    pub fn categorical_from_logits(logits: &[f64]) -> Result<Self> {
        if logits.is_empty() {
            return Err(invalid("Categorical", "no categories"));
        }
        if let Some(l) = logits.iter().find(|l| !l.is_finite()) {
            return Err(invalid("Categorical", format!("logit {l} is not finite")));
        }
        let lse = log_sum_exp(logits);
        Ok(Distribution::Categorical {
            log_probs: logits.iter().map(|l| l - lse).collect(),
        })
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        positive("Exponential", "rate", rate)?;
        Ok(Distribution::Exponential { rate })
    }

    pub fn poisson(rate: f64) -> Result<Self> {
        positive("Poisson", "rate", rate)?;
        Ok(Distribution::Poisson { rate })
    }

    pub fn beta(alpha: f64, beta: f64, lo: f64, hi: f64) -> Result<Self> {
        positive("Beta", "alpha", alpha)?;
        positive("Beta", "beta", beta)?;
        finite("Beta", "lo", lo)?;
        finite("Beta", "hi", hi)?;
        if lo >= hi {
            return Err(invalid("Beta", format!("need lo < hi, got ({lo}, {hi})")));
        }
        Ok(Distribution::Beta { alpha, beta, lo, hi })
    }

    pub fn log_normal(mu: f64, sigma: f64) -> Result<Self> {
        finite("LogNormal", "mu", mu)?;
        positive("LogNormal", "sigma", sigma)?;
        Ok(Distribution::LogNormal { mu, sigma })
    }

    /// Rebuilds a distribution from its family name and constructor
    /// parameters, the form stored in trace files.
    pub fn from_parts(family: &str, params: &[f64]) -> Result<Self> {
        let fam = Family::parse(family)?;
        let want = |n: usize| -> Result<()> {
            if params.len() == n {
                Ok(())
            } else {
                Err(invalid(fam_static(fam), format!("expected {n} parameters, got {}", params.len())))
            }
        };
        match fam {
            Family::Normal => {
                want(2)?;
                Self::normal(params[0], params[1])
            }
            Family::Uniform => {
                want(2)?;
                Self::uniform(params[0], params[1])
            }
            Family::Categorical => Self::categorical(params),
            Family::Exponential => {
                want(1)?;
                Self::exponential(params[0])
            }
            Family::Poisson => {
                want(1)?;
                Self::poisson(params[0])
            }
            Family::Beta => {
                want(4)?;
                Self::beta(params[0], params[1], params[2], params[3])
            }
            Family::LogNormal => {
                want(2)?;
                Self::log_normal(params[0], params[1])
            }
        }
    }

    pub fn family(&self) -> Family {
        match self {
            Distribution::Normal { .. } => Family::Normal,
            Distribution::Uniform { .. } => Family::Uniform,
            Distribution::Categorical { .. } => Family::Categorical,
            Distribution::Exponential { .. } => Family::Exponential,
            Distribution::Poisson { .. } => Family::Poisson,
            Distribution::Beta { .. } => Family::Beta,
            Distribution::LogNormal { .. } => Family::LogNormal,
        }
    }

    /// Ordered constructor parameters.
    pub fn params(&self) -> Vec<f64> {
        match self {
            Distribution::Normal { mu, sigma } | Distribution::LogNormal { mu, sigma } => vec![*mu, *sigma],
            Distribution::Uniform { lo, hi } => vec![*lo, *hi],
            Distribution::Categorical { .. } => self.probs(),
            Distribution::Exponential { rate } | Distribution::Poisson { rate } => vec![*rate],
            Distribution::Beta { alpha, beta, lo, hi } => vec![*alpha, *beta, *lo, *hi],
        }
    }

    /// Category probabilities; empty for non-categorical families.
    pub fn probs(&self) -> Vec<f64> {
        match self {
            Distribution::Categorical { log_probs } => log_probs.iter().map(|l| l.exp()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            Distribution::Normal { mu, .. } => *mu,
            Distribution::Uniform { lo, hi } => 0.5 * (lo + hi),
            Distribution::Categorical { log_probs } => {
                log_probs.iter().enumerate().map(|(k, l)| k as f64 * l.exp()).sum()
            }
            Distribution::Exponential { rate } => 1.0 / rate,
            Distribution::Poisson { rate } => *rate,
            Distribution::Beta { alpha, beta, lo, hi } => lo + (hi - lo) * alpha / (alpha + beta),
            Distribution::LogNormal { mu, sigma } => (mu + 0.5 * sigma * sigma).exp(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Distribution::Normal { sigma, .. } => sigma * sigma,
            Distribution::Uniform { lo, hi } => (hi - lo).powi(2) / 12.0,
            Distribution::Categorical { log_probs } => {
                let m = self.mean();
                log_probs
                    .iter()
                    .enumerate()
                    .map(|(k, l)| (k as f64 - m).powi(2) * l.exp())
                    .sum()
            }
            Distribution::Exponential { rate } => 1.0 / (rate * rate),
            Distribution::Poisson { rate } => *rate,
            Distribution::Beta { alpha, beta, lo, hi } => {
                let s = alpha + beta;
                (hi - lo).powi(2) * alpha * beta / (s * s * (s + 1.0))
            }
            Distribution::LogNormal { mu, sigma } => {
                let s2 = sigma * sigma;
                (s2.exp() - 1.0) * (2.0 * mu + s2).exp()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Value {
        match self {
            Distribution::Normal { mu, sigma } => {
                Value::Real(rand_distr::Normal::new(*mu, *sigma).expect("validated").sample(rng))
            }
            Distribution::Uniform { lo, hi } => loop {
                let x = lo + (hi - lo) * rng.random::<f64>();
                if x > *lo && x < *hi {
                    break Value::Real(x);
                }
            },
            Distribution::Categorical { log_probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut last_positive = 0;
                for (k, l) in log_probs.iter().enumerate() {
                    let p = l.exp();
                    if p > 0.0 {
                        last_positive = k;
                    }
                    acc += p;
                    if u < acc {
                        return Value::Int(k as i64);
                    }
                }
                Value::Int(last_positive as i64)
            }
            Distribution::Exponential { rate } => {
                let d = rand_distr::Exp::new(*rate).expect("validated");
                Value::Real(open_positive(|| d.sample(rng)))
            }
            Distribution::Poisson { rate } => {
                let x: f64 = rand_distr::Poisson::new(*rate).expect("validated").sample(rng);
                Value::Int(x as i64)
            }
            Distribution::Beta { alpha, beta, lo, hi } => {
                let d = rand_distr::Beta::new(*alpha, *beta).expect("validated");
                let mut z = d.sample(rng);
                for _ in 0..64 {
                    if z > 0.0 && z < 1.0 {
                        break;
                    }
                    z = d.sample(rng);
                }
                let z = z.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                let x = lo + (hi - lo) * z;
                Value::Real(x.clamp(lo.next_up(), hi.next_down()))
            }
            Distribution::LogNormal { mu, sigma } => {
                let d = rand_distr::LogNormal::new(*mu, *sigma).expect("validated");
                Value::Real(open_positive(|| d.sample(rng)))
            }
        }
    }

    /// Closed-form log-density (continuous) or log-mass (discrete). Values
    /// outside the support, or of the wrong kind, give −∞. Continuous
    /// supports are open intervals.
    pub fn log_prob(&self, value: Value) -> f64 {
        match (self, value) {
            (Distribution::Normal { mu, sigma }, Value::Real(x)) => normal_log_pdf(x, *mu, *sigma),
            (Distribution::Uniform { lo, hi }, Value::Real(x)) => {
                if x > *lo && x < *hi {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            (Distribution::Categorical { log_probs }, Value::Int(k)) => usize::try_from(k)
                .ok()
                .and_then(|k| log_probs.get(k).copied())
                .unwrap_or(f64::NEG_INFINITY),
            (Distribution::Exponential { rate }, Value::Real(x)) => {
                if x > 0.0 && x.is_finite() {
                    rate.ln() - rate * x
                } else {
                    f64::NEG_INFINITY
                }
            }
            (Distribution::Poisson { rate }, Value::Int(k)) => {
                if k >= 0 {
                    let k = k as f64;
                    k * rate.ln() - rate - ln_gamma(k + 1.0)
                } else {
                    f64::NEG_INFINITY
                }
            }
            (Distribution::Beta { alpha, beta, lo, hi }, Value::Real(x)) => {
                if x > *lo && x < *hi {
                    let z = (x - lo) / (hi - lo);
                    beta_log_pdf_unit(z, *alpha, *beta) - (hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            (Distribution::LogNormal { mu, sigma }, Value::Real(x)) => {
                if x > 0.0 && x.is_finite() {
                    let lx = x.ln();
                    normal_log_pdf(lx, *mu, *sigma) - lx
                } else {
                    f64::NEG_INFINITY
                }
            }
            _ => f64::NEG_INFINITY,
        }
    }
}

fn fam_static(f: Family) -> &'static str {
    f.name()
}

fn open_positive(mut draw: impl FnMut() -> f64) -> f64 {
    for _ in 0..64 {
        let x = draw();
        if x > 0.0 && x.is_finite() {
            return x;
        }
    }
    f64::MIN_POSITIVE
}

fn normal_log_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -sigma.ln() - HALF_LN_2PI - 0.5 * z * z
}

fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

fn beta_log_pdf_unit(z: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * z.ln() + (b - 1.0) * (-z).ln_1p() - ln_beta(a, b)
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn scale(raw: f64) -> f64 {
    softplus(raw).max(SCALE_FLOOR)
}

/// Number of unconstrained parameters of the proposal family for `prior`.
pub fn proposal_dim(prior: &Distribution) -> usize {
    match prior {
        Distribution::Categorical { log_probs } => log_probs.len(),
        Distribution::Poisson { .. } => 1,
        _ => 2,
    }
}

fn check_dim(prior: &Distribution, raw: &[f64]) -> Result<()> {
    let expected = proposal_dim(prior);
    if raw.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: raw.len(),
        });
    }
    if let Some(r) = raw.iter().find(|r| !r.is_finite()) {
        return Err(Error::InvalidParameter {
            family: fam_static(prior.family()),
            reason: format!("raw proposal parameter {r} is not finite"),
        });
    }
    Ok(())
}

/// Maps unconstrained network outputs to a proposal whose support covers the
/// prior's support.
pub fn proposal_from_params(prior: &Distribution, raw: &[f64]) -> Result<Distribution> {
    check_dim(prior, raw)?;
    match prior {
        Distribution::Normal { .. } => Distribution::normal(raw[0], scale(raw[1])),
        Distribution::Uniform { lo, hi } | Distribution::Beta { lo, hi, .. } => {
            Distribution::beta(scale(raw[0]), scale(raw[1]), *lo, *hi)
        }
        Distribution::Categorical { .. } => Distribution::categorical_from_logits(raw),
        Distribution::Exponential { .. } | Distribution::LogNormal { .. } => {
            Distribution::log_normal(raw[0], scale(raw[1]))
        }
        Distribution::Poisson { .. } => Distribution::poisson(scale(raw[0])),
    }
}

/// `log q(value | raw)` together with its gradient with respect to `raw`.
pub fn proposal_log_prob_grad(prior: &Distribution, raw: &[f64], value: Value) -> Result<(f64, Vec<f64>)> {
    let q = proposal_from_params(prior, raw)?;
    let log_q = q.log_prob(value);
    if !log_q.is_finite() {
        return Ok((log_q, vec![0.0; raw.len()]));
    }
    let grad = match (&q, value) {
        (Distribution::Normal { mu, sigma }, Value::Real(x)) => {
            let d = x - mu;
            let s2 = sigma * sigma;
            vec![d / s2, (-1.0 / sigma + d * d / (s2 * sigma)) * sigmoid(raw[1])]
        }
        (Distribution::LogNormal { mu, sigma }, Value::Real(x)) => {
            let d = x.ln() - mu;
            let s2 = sigma * sigma;
            vec![d / s2, (-1.0 / sigma + d * d / (s2 * sigma)) * sigmoid(raw[1])]
        }
        (Distribution::Beta { alpha, beta, lo, hi }, Value::Real(x)) => {
            let z = (x - lo) / (hi - lo);
            let psi_sum = digamma(alpha + beta);
            vec![
                (z.ln() - digamma(*alpha) + psi_sum) * sigmoid(raw[0]),
                ((-z).ln_1p() - digamma(*beta) + psi_sum) * sigmoid(raw[1]),
            ]
        }
        (Distribution::Categorical { log_probs }, Value::Int(k)) => log_probs
            .iter()
            .enumerate()
            .map(|(j, l)| if j as i64 == k { 1.0 } else { 0.0 } - l.exp())
            .collect(),
        (Distribution::Poisson { rate }, Value::Int(k)) => vec![(k as f64 / rate - 1.0) * sigmoid(raw[0])],
        _ => unreachable!("finite log_q implies a matching value kind"),
    };
    Ok((log_q, grad))
}

/// Raw parameters that make [`proposal_from_params`] return `target`
/// (up to softplus round-off). `target` must itself belong to a proposal
/// family; a Uniform target maps to Beta(1, 1).
pub fn raw_params_for(target: &Distribution) -> Option<Vec<f64>> {
    match target {
        Distribution::Normal { mu, sigma } | Distribution::LogNormal { mu, sigma } => {
            Some(vec![*mu, softplus_inv(*sigma)])
        }
        Distribution::Beta { alpha, beta, .. } => Some(vec![softplus_inv(*alpha), softplus_inv(*beta)]),
        Distribution::Uniform { .. } => Some(vec![softplus_inv(1.0), softplus_inv(1.0)]),
        Distribution::Categorical { log_probs } => Some(log_probs.clone()),
        Distribution::Poisson { rate } => Some(vec![softplus_inv(*rate)]),
        Distribution::Exponential { .. } => None,
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let params: Vec<String> = self.params().iter().map(|p| format!("{p}")).collect();
        write!(f, "{}({})", self.family(), params.join(", "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    // Midpoint rule: never evaluates the (open) support endpoints.
    fn midpoint(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        (0..n).map(|i| f(a + (i as f64 + 0.5) * h)).sum::<f64>() * h
    }

    fn density(d: &Distribution) -> impl Fn(f64) -> f64 + '_ {
        move |x| {
            let lp = d.log_prob(Value::Real(x));
            if lp.is_finite() { lp.exp() } else { 0.0 }
        }
    }

    #[test]
    fn normal_log_prob_at_mean() {
        let d = Distribution::normal(0.0, 1.0).unwrap();
        assert!((d.log_prob(Value::Real(0.0)) + 0.9189385).abs() < 1e-7);
    }

    #[test]
    fn uniform_categorical_over_38() {
        let d = Distribution::categorical(&vec![1.0 / 38.0; 38]).unwrap();
        for k in [0, 17, 37] {
            assert!((d.log_prob(Value::Int(k)) + 38f64.ln()).abs() < 1e-12);
        }
        assert!((d.log_prob(Value::Int(5)) + 3.6375862).abs() < 1e-7);
        assert_eq!(d.log_prob(Value::Int(38)), f64::NEG_INFINITY);
    }

    #[test]
    fn out_of_support_is_neg_infinity() {
        let d = Distribution::uniform(0.0, 1.0).unwrap();
        assert_eq!(d.log_prob(Value::Real(1.5)), f64::NEG_INFINITY);
        assert_eq!(d.log_prob(Value::Int(0)), f64::NEG_INFINITY);
        let p = Distribution::poisson(2.0).unwrap();
        assert_eq!(p.log_prob(Value::Int(-1)), f64::NEG_INFINITY);
        assert!((p.log_prob(Value::Int(0)) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn constructors_validate() {
        assert!(Distribution::normal(5.0, 0.0).is_err());
        assert!(Distribution::normal(f64::NAN, 1.0).is_err());
        assert!(Distribution::uniform(1.0, 1.0).is_err());
        assert!(Distribution::categorical(&[0.5, 0.6]).is_err());
        assert!(Distribution::categorical(&[1.5, -0.5]).is_err());
        assert!(Distribution::categorical(&[]).is_err());
        assert!(Distribution::categorical(&[0.5, 0.5 + 5e-10]).is_ok());
        assert!(Distribution::exponential(-1.0).is_err());
        assert!(Distribution::poisson(0.0).is_err());
        assert!(Distribution::beta(1.0, 1.0, 2.0, 1.0).is_err());
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let d = Distribution::uniform(0.0, 1.0).unwrap();
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(11));
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn degenerate_categorical_always_zero() {
        let d = Distribution::categorical(&[1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(d.sample(&mut rng), Value::Int(0));
        }
    }

    #[test]
    fn proposal_mapping_examples() {
        let n = proposal_from_params(&Distribution::normal(0.0, 1.0).unwrap(), &[0.3, 0.0]).unwrap();
        assert_eq!(n, Distribution::Normal { mu: 0.3, sigma: 2f64.ln() });

        let c = proposal_from_params(&Distribution::categorical(&[0.2, 0.3, 0.5]).unwrap(), &[0.0; 3]).unwrap();
        for p in c.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }

        let b = proposal_from_params(&Distribution::uniform(2.0, 4.0).unwrap(), &[0.0, 0.0]).unwrap();
        assert_eq!(
            b,
            Distribution::Beta { alpha: 2f64.ln(), beta: 2f64.ln(), lo: 2.0, hi: 4.0 }
        );

        let e = Distribution::exponential(1.0).unwrap();
        assert!(matches!(
            proposal_from_params(&e, &[0.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn softplus_inverse_round_trips() {
        for y in [1e-8, 0.1, 1.0, 2.0, 29.0, 31.0, 400.0] {
            assert!((softplus(softplus_inv(y)) - y).abs() <= 1e-12 * y.max(1.0), "{y}");
        }
        assert!(softplus(1000.0).is_finite());
        assert!(scale(-1e6) > 0.0);
    }

    #[test]
    fn densities_integrate_to_one() {
        let continuous = [
            (Distribution::normal(1.5, 0.7).unwrap(), 1.5 - 12.0 * 0.7, 1.5 + 12.0 * 0.7),
            (Distribution::uniform(-1.0, 3.0).unwrap(), -1.0, 3.0),
            (Distribution::exponential(0.5).unwrap(), 0.0, 80.0),
            (Distribution::beta(2.5, 3.5, -2.0, 1.0).unwrap(), -2.0, 1.0),
        ];
        for (d, a, b) in &continuous {
            let total = midpoint(density(d), *a, *b, 200_000);
            assert!((total - 1.0).abs() < 1e-6, "{d}: {total}");
        }
        // log-normal integrated in log space: ∫ p(e^t) e^t dt
        let ln = Distribution::log_normal(0.3, 0.8).unwrap();
        let f = density(&ln);
        let total = midpoint(|t| f(t.exp()) * t.exp(), 0.3 - 12.0 * 0.8, 0.3 + 12.0 * 0.8, 200_000);
        assert!((total - 1.0).abs() < 1e-6, "lognormal: {total}");

        let cat = Distribution::categorical(&[0.1, 0.2, 0.3, 0.4]).unwrap();
        let total: f64 = (0..4).map(|k| cat.log_prob(Value::Int(k)).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let poi = Distribution::poisson(3.7).unwrap();
        let total: f64 = (0..200).map(|k| poi.log_prob(Value::Int(k)).exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sample_means_match_analytic_means() {
        let all = [
            Distribution::normal(-2.0, 3.0).unwrap(),
            Distribution::uniform(1.0, 5.0).unwrap(),
            Distribution::categorical(&[0.5, 0.25, 0.15, 0.07, 0.03]).unwrap(),
            Distribution::exponential(0.05).unwrap(),
            Distribution::poisson(2.5).unwrap(),
            Distribution::beta(2.0, 5.0, -1.0, 1.0).unwrap(),
            Distribution::log_normal(0.5, 0.4).unwrap(),
        ];
        let n = 100_000;
        for (i, d) in all.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + i as u64);
            let mean = (0..n).map(|_| d.sample(&mut rng).as_f64()).sum::<f64>() / n as f64;
            let se = (d.variance() / n as f64).sqrt();
            assert!((mean - d.mean()).abs() < 5.0 * se, "{d}: {mean} vs {}", d.mean());
        }
    }

    #[test]
    fn from_parts_inverts_params() {
        let all = [
            Distribution::normal(-2.0, 3.0).unwrap(),
            Distribution::categorical(&[0.5, 0.5]).unwrap(),
            Distribution::beta(2.0, 5.0, -1.0, 1.0).unwrap(),
            Distribution::poisson(2.5).unwrap(),
        ];
        for d in &all {
            let back = Distribution::from_parts(d.family().name(), &d.params()).unwrap();
            assert_eq!(back.params(), d.params());
        }
        assert!(Distribution::from_parts("Gamma", &[1.0]).is_err());
        assert!(Distribution::from_parts("Normal", &[1.0]).is_err());
    }

    fn priors() -> impl Strategy<Value = Distribution> {
        prop_oneof![
            (-5.0..5.0f64, 0.01..5.0f64).prop_map(|(m, s)| Distribution::normal(m, s).unwrap()),
            (-5.0..5.0f64, 0.01..5.0f64).prop_map(|(a, w)| Distribution::uniform(a, a + w).unwrap()),
            proptest::collection::vec(0.01..1.0f64, 1..8).prop_map(|w| {
                let t: f64 = w.iter().sum();
                Distribution::categorical(&w.iter().map(|x| x / t).collect::<Vec<_>>()).unwrap()
            }),
            (0.01..10.0f64).prop_map(|r| Distribution::exponential(r).unwrap()),
            (0.01..20.0f64).prop_map(|r| Distribution::poisson(r).unwrap()),
        ]
    }

    proptest! {
        #[test]
        fn proposal_support_covers_prior_support(
            prior in priors(),
            raw_seed in proptest::collection::vec(-30.0..30.0f64, 8),
            seed in 0u64..1000,
        ) {
            let raw = &raw_seed[..proposal_dim(&prior)];
            let q = proposal_from_params(&prior, raw).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..20 {
                let x = prior.sample(&mut rng);
                prop_assert!(prior.log_prob(x).is_finite());
                prop_assert!(q.log_prob(x).is_finite(), "{} -> {} at {}", prior, q, x);
            }
        }
    }
}
