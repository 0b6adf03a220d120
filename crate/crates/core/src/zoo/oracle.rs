//! Reference posteriors for the registered models, computed without the
//! runtime: a closed form for the Gaussian model, grid quadrature for the
//! rejection demo and channel enumeration plus 3-D quadrature for the tau toy.

use std::f64::consts::{PI, TAU};

use serde::Serialize;

use super::tau::{momentum, TauToyConfig};
use super::{Observation, DISC_OBS_SIGMA, GAUSSIAN_UNKNOWN_MEAN, REJECTION_DEMO, TAU_DECAY_TOY};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};

const HALF_LN_TAU: f64 = 0.918_938_533_204_672_7;
const COARSE_THETA: usize = 48;
const COARSE_PHI: usize = 96;
/// Coarse cells this far below the best log density are dropped from the box.
const BOX_NATS: f64 = 40.0;
const PMAG_MARGIN_SDS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum OraclePosterior {
    Gaussian { mean: f64, var: f64 },
    Rejection(RejectionOracle),
    Tau(TauOracle),
}

impl OraclePosterior {
    /// Scalar summaries, used for convergence checks.
    pub fn summary_vector(&self) -> Vec<f64> {
        match self {
            OraclePosterior::Gaussian { mean, var } => vec![*mean, *var],
            OraclePosterior::Rejection(r) => vec![r.mean_u, r.var_u, r.mean_v, r.var_v],
            OraclePosterior::Tau(t) => {
                let mut v = t.channel_probs.clone();
                v.extend(t.mean);
                v.extend(t.sd);
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionOracle {
    pub resolution: usize,
    /// Posterior mass of u in each of `resolution` equal cells on [-1, 1].
    pub u_marginal: Vec<f64>,
    pub mean_u: f64,
    pub var_u: f64,
    pub mean_v: f64,
    pub var_v: f64,
}

impl RejectionOracle {
    /// Mass of u in `n_bins` equal bins on [lo, hi], treating the marginal
    /// as piecewise constant over its cells.
    pub fn u_bin_probs(&self, lo: f64, hi: f64, n_bins: usize) -> Vec<f64> {
        let h = 2.0 / self.resolution as f64;
        let bw = (hi - lo) / n_bins as f64;
        let mut out = vec![0.0; n_bins];
        for (k, mass) in self.u_marginal.iter().enumerate() {
            let (a, b) = (-1.0 + k as f64 * h, -1.0 + (k + 1) as f64 * h);
            for (j, slot) in out.iter_mut().enumerate() {
                let (c, d) = (lo + j as f64 * bw, lo + (j + 1) as f64 * bw);
                let overlap = b.min(d) - a.max(c);
                if overlap > 0.0 {
                    *slot += mass * overlap / h;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TauOracle {
    pub resolution: usize,
    pub channel_probs: Vec<f64>,
    /// Posterior means of (p_x, p_y, p_z).
    pub mean: [f64; 3],
    /// Posterior standard deviations of (p_x, p_y, p_z).
    pub sd: [f64; 3],
}

/// Reference posterior for `observation` under `model_name`.
///
/// `resolution` is the number of grid points per dimension; the Gaussian
/// model ignores it.
pub fn oracle_posterior(model_name: &str, observation: &Observation, resolution: usize) -> Result<OraclePosterior> {
    if !matches!(model_name, GAUSSIAN_UNKNOWN_MEAN | REJECTION_DEMO | TAU_DECAY_TOY) {
        return Err(Error::UnsupportedModel(model_name.to_owned()));
    }
    if observation.model_name() != model_name {
        return Err(Error::Precondition(format!(
            "observation is for {}, not {model_name}",
            observation.model_name()
        )));
    }
    if resolution < 2 && model_name != GAUSSIAN_UNKNOWN_MEAN {
        return Err(Error::Precondition("resolution must be at least 2".into()));
    }
    Ok(match observation {
        Observation::Scalar { model, y } if model == GAUSSIAN_UNKNOWN_MEAN => OraclePosterior::Gaussian {
            mean: y / 2.0,
            var: 0.5,
        },
        Observation::Scalar { y, .. } => OraclePosterior::Rejection(rejection_oracle(*y, resolution)),
        Observation::Tau { config, cells } => OraclePosterior::Tau(tau_oracle(config, cells, resolution)?),
    })
}

fn rejection_oracle(y: f64, resolution: usize) -> RejectionOracle {
    let h = 2.0 / resolution as f64;
    let mid = |k: usize| -1.0 + (k as f64 + 0.5) * h;
    let inv = 1.0 / (2.0 * DISC_OBS_SIGMA * DISC_OBS_SIGMA);
    // Per u column: likelihood times the number of in-disc v midpoints and
    // the first two moments of v over them.
    let cols: Vec<(f64, f64, f64)> = (0..resolution)
        .map(|i| {
            let u = mid(i);
            let lik = (-(y - u).powi(2) * inv).exp();
            let (mut n, mut sv, mut svv) = (0.0, 0.0, 0.0);
            for j in 0..resolution {
                let v = mid(j);
                if u * u + v * v <= 1.0 {
                    n += 1.0;
                    sv += v;
                    svv += v * v;
                }
            }
            (lik * n, lik * sv, lik * svv)
        })
        .collect();
    let z: f64 = cols.iter().map(|c| c.0).sum();
    let u_marginal: Vec<f64> = cols.iter().map(|c| c.0 / z).collect();
    let mean_u: f64 = u_marginal.iter().enumerate().map(|(i, p)| p * mid(i)).sum();
    let var_u: f64 = u_marginal.iter().enumerate().map(|(i, p)| p * (mid(i) - mean_u).powi(2)).sum();
    let mean_v = cols.iter().map(|c| c.1).sum::<f64>() / z;
    let var_v = cols.iter().map(|c| c.2).sum::<f64>() / z - mean_v * mean_v;
    RejectionOracle {
        resolution,
        u_marginal,
        mean_u,
        var_u,
        mean_v,
        var_v: var_v.max(0.0),
    }
}

/// Log likelihood of the observed cells given a unit image scaled by `pmag`.
fn cells_loglik(cfg: &TauToyConfig, cells: &[f64], unit: &[f64], pmag: f64) -> f64 {
    let mut total = 0.0;
    for (obs, u) in cells.iter().zip(unit) {
        let e = pmag * u;
        let sigma = cfg.cell_sigma(e);
        let z = (obs - e) / sigma;
        total -= 0.5 * z * z + sigma.ln() + HALF_LN_TAU;
    }
    total
}

/// Log joint density of everything but the constant angle priors.
fn log_joint(cfg: &TauToyConfig, cells: &[f64], unit: &[f64], pmag: f64, log_prior_c: f64) -> f64 {
    let rate = 1.0 / cfg.momentum_scale;
    log_prior_c + rate.ln() - rate * pmag + cells_loglik(cfg, cells, unit, pmag)
}

/// Maximizes the log joint over pmag for a fixed shape.
fn profile_pmag(cfg: &TauToyConfig, cells: &[f64], unit: &[f64], log_prior_c: f64) -> (f64, f64) {
    let f = |lp: f64| log_joint(cfg, cells, unit, lp.exp(), log_prior_c);
    let total: f64 = cells.iter().map(|c| c.abs()).sum::<f64>().max(1e-3);
    let (lo, hi) = ((total * 1e-3).ln(), (total * 1e2).max(cfg.momentum_scale * 50.0).ln());
    let n = 60;
    let step = (hi - lo) / n as f64;
    let mut best = (lo, f(lo));
    for k in 1..=n {
        let x = lo + k as f64 * step;
        let v = f(x);
        if v > best.1 {
            best = (x, v);
        }
    }
    let (mut a, mut b) = (best.0 - step, best.0 + step);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let (mut c, mut d) = (b - g * (b - a), a + g * (b - a));
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let v = f(x);
    if v > best.1 {
        (x.exp(), v)
    } else {
        (best.0.exp(), best.1)
    }
}

/// Standard deviation in pmag from the curvature of the log joint.
fn pmag_scale(cfg: &TauToyConfig, cells: &[f64], unit: &[f64], pmag: f64) -> f64 {
    let h = (pmag * 1e-4).max(1e-6);
    let f = |p: f64| log_joint(cfg, cells, unit, p, 0.0);
    let curv = (f(pmag + h) - 2.0 * f(pmag) + f(pmag - h)) / (h * h);
    if curv < 0.0 && curv.is_finite() {
        (1.0 / -curv).sqrt()
    } else {
        pmag
    }
}

struct Coarse {
    theta: f64,
    phi: f64,
    pmag: f64,
    value: f64,
}

/// Smallest arc of the circle containing all `angles`, as (start, length).
fn covering_arc(angles: &[f64]) -> (f64, f64) {
    let mut a: Vec<f64> = angles.iter().map(|x| x.rem_euclid(TAU)).collect();
    a.sort_by(f64::total_cmp);
    let mut gap = (a[0] + TAU - a[a.len() - 1], a[0]);
    for w in a.windows(2) {
        if w[1] - w[0] > gap.0 {
            gap = (w[1] - w[0], w[1]);
        }
    }
    (gap.1, TAU - gap.0)
}

#[derive(Default, Clone, Copy)]
struct Moments {
    w: f64,
    m1: [f64; 3],
    m2: [f64; 3],
}

impl Moments {
    fn add(&mut self, o: &Moments) {
        self.w += o.w;
        for k in 0..3 {
            self.m1[k] += o.m1[k];
            self.m2[k] += o.m2[k];
        }
    }
}

fn tau_oracle(cfg: &TauToyConfig, cells: &[f64], resolution: usize) -> Result<TauOracle> {
    cfg.validate()?;
    if cells.len() != cfg.n_cells() {
        return Err(Error::DimensionMismatch {
            expected: cfg.n_cells(),
            got: cells.len(),
        });
    }
    let strategy = Parallelism::default();
    let dth = cfg.theta_max / COARSE_THETA as f64;
    let dph = TAU / COARSE_PHI as f64;

    let coarse: Vec<Vec<Coarse>> = (0..cfg.n_channels)
        .map(|c| {
            let lpc = cfg.channel_prior[c].ln();
            map_indexed(COARSE_THETA * COARSE_PHI, strategy, |k| {
                let theta = (k / COARSE_PHI) as f64 * dth + 0.5 * dth;
                let phi = -PI + (k % COARSE_PHI) as f64 * dph + 0.5 * dph;
                let unit = cfg.unit_image(c, theta, phi);
                let (pmag, value) = profile_pmag(cfg, cells, &unit, lpc);
                Coarse { theta, phi, pmag, value }
            })
        })
        .collect();
    let best = coarse
        .iter()
        .flatten()
        .map(|p| p.value)
        .fold(f64::NEG_INFINITY, f64::max);

    let mut per_channel = Vec::with_capacity(cfg.n_channels);
    for (c, points) in coarse.iter().enumerate() {
        let kept: Vec<&Coarse> = points.iter().filter(|p| p.value >= best - BOX_NATS).collect();
        if kept.is_empty() {
            per_channel.push(Moments::default());
            continue;
        }
        let top = kept.iter().max_by(|a, b| a.value.total_cmp(&b.value)).expect("non-empty");
        let sd_p = pmag_scale(cfg, cells, &cfg.unit_image(c, top.theta, top.phi), top.pmag);
        let p_lo = kept.iter().map(|p| p.pmag).fold(f64::INFINITY, f64::min);
        let p_hi = kept.iter().map(|p| p.pmag).fold(0.0, f64::max);
        let p_lo = (p_lo - PMAG_MARGIN_SDS * sd_p).max(0.0);
        let p_hi = p_hi + PMAG_MARGIN_SDS * sd_p;
        let t_lo = (kept.iter().map(|p| p.theta).fold(f64::INFINITY, f64::min) - dth).max(0.0);
        let t_hi = (kept.iter().map(|p| p.theta).fold(0.0, f64::max) + dth).min(cfg.theta_max);
        let (arc_start, arc_len) = covering_arc(&kept.iter().map(|p| p.phi).collect::<Vec<_>>());
        let (ph_lo, ph_len) = if arc_len + 2.0 * dph >= TAU {
            (-PI, TAU)
        } else {
            (arc_start - dph, arc_len + 2.0 * dph)
        };

        let r = resolution;
        let (hp, ht, hf) = ((p_hi - p_lo) / r as f64, (t_hi - t_lo) / r as f64, ph_len / r as f64);
        let cell_volume = hp * ht * hf / (cfg.theta_max * TAU);
        let lpc = cfg.channel_prior[c].ln();
        let rows = map_indexed(r * r, strategy, |k| {
            let theta = t_lo + ((k / r) as f64 + 0.5) * ht;
            let phi = ph_lo + ((k % r) as f64 + 0.5) * hf;
            let unit = cfg.unit_image(c, theta, phi);
            let mut m = Moments::default();
            for i in 0..r {
                let pmag = p_lo + (i as f64 + 0.5) * hp;
                let w = (log_joint(cfg, cells, &unit, pmag, lpc) - best).exp() * cell_volume;
                let p = momentum(pmag, theta, phi);
                m.w += w;
                for d in 0..3 {
                    m.m1[d] += w * p[d];
                    m.m2[d] += w * p[d] * p[d];
                }
            }
            m
        });
        let mut total = Moments::default();
        for m in &rows {
            total.add(m);
        }
        per_channel.push(total);
    }

    let mut all = Moments::default();
    for m in &per_channel {
        all.add(m);
    }
    if !(all.w > 0.0 && all.w.is_finite()) {
        return Err(Error::Precondition("observation has zero posterior mass on the oracle grid".into()));
    }
    let channel_probs = per_channel.iter().map(|m| m.w / all.w).collect();
    let mean: [f64; 3] = std::array::from_fn(|d| all.m1[d] / all.w);
    let sd = std::array::from_fn(|d| (all.m2[d] / all.w - mean[d] * mean[d]).max(0.0).sqrt());
    Ok(TauOracle {
        resolution,
        channel_probs,
        mean,
        sd,
    })
}
