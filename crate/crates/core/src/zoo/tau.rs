//! Desk-scale tau-decay analog: a decay channel and a momentum vector
//! produce a deterministic energy-deposit image in a segmented calorimeter,
//! observed cell by cell with deposit-proportional Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::runtime::ExecutionContext;

/// Noise scale floor, in deposit units.
pub const CELL_SIGMA_FLOOR: f64 = 0.1;

/// Longitudinal behaviour of a channel's deposits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShowerKind {
    /// Most energy in the first layers, narrow spot.
    Electromagnetic,
    /// Energy deeper in the calorimeter, wider spot.
    Hadronic,
    /// Roughly uniform in depth, narrow track.
    Minimal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauToyConfig {
    pub n_channels: usize,
    pub channel_prior: Vec<f64>,
    /// (depth, x, y)
    pub grid: [usize; 3],
    pub momentum_scale: f64,
    pub noise_sigma: f64,
    pub channel_kinds: Vec<ShowerKind>,
    /// n_channels × depth fractions of the total energy per layer.
    pub depth_profiles: Vec<Vec<f64>>,
    /// n_channels × depth transverse Gaussian widths, in cells.
    pub transverse_widths: Vec<Vec<f64>>,
    /// Upper bound of the polar-angle prior, in radians.
    pub theta_max: f64,
    /// Distance from the decay vertex to the front face, in cell widths.
    pub front_distance: f64,
}

fn em_profile(depth: usize, length: f64) -> Vec<f64> {
    normalized((0..depth).map(|d| (-(d as f64) / length).exp()))
}

fn hadronic_profile(depth: usize, center: f64, width: f64) -> Vec<f64> {
    normalized((0..depth).map(|d| (-(d as f64 - center).powi(2) / (2.0 * width * width)).exp()))
}

fn normalized(it: impl Iterator<Item = f64>) -> Vec<f64> {
    let v: Vec<f64> = it.collect();
    let total: f64 = v.iter().sum();
    v.into_iter().map(|x| x / total).collect()
}

fn widths(kind: ShowerKind, depth: usize) -> Vec<f64> {
    (0..depth)
        .map(|d| {
            let t = d as f64 / depth as f64;
            match kind {
                ShowerKind::Electromagnetic => 0.6 + 0.6 * t,
                ShowerKind::Hadronic => 1.0 + 1.0 * t,
                ShowerKind::Minimal => 0.5,
            }
        })
        .collect()
}

impl Default for TauToyConfig {
    fn default() -> Self {
        let depth = 4;
        let d = depth as f64;
        let kinds = vec![
            ShowerKind::Electromagnetic,
            ShowerKind::Hadronic,
            ShowerKind::Electromagnetic,
            ShowerKind::Hadronic,
            ShowerKind::Minimal,
        ];
        let depth_profiles = vec![
            em_profile(depth, 0.25 * d),
            hadronic_profile(depth, 0.65 * (d - 1.0), 0.3 * d),
            em_profile(depth, 0.4 * d),
            hadronic_profile(depth, 0.85 * (d - 1.0), 0.25 * d),
            vec![1.0 / d; depth],
        ];
        let transverse_widths = kinds.iter().map(|k| widths(*k, depth)).collect();
        TauToyConfig {
            n_channels: 5,
            channel_prior: vec![0.5, 0.25, 0.15, 0.07, 0.03],
            grid: [depth, 7, 7],
            momentum_scale: 20.0,
            noise_sigma: 0.2,
            channel_kinds: kinds,
            depth_profiles,
            transverse_widths,
            theta_max: 0.35,
            front_distance: 5.0,
        }
    }
}

impl TauToyConfig {
    /// 38 channels on a 20×35×35 grid. Constructible and runnable; too large
    /// for the quadrature oracle.
    pub fn full_scale() -> Self {
        let n = 38;
        let depth = 20;
        let d = depth as f64;
        let cycle = [
            ShowerKind::Electromagnetic,
            ShowerKind::Hadronic,
            ShowerKind::Electromagnetic,
            ShowerKind::Hadronic,
            ShowerKind::Minimal,
        ];
        let kinds: Vec<ShowerKind> = (0..n).map(|c| cycle[c % cycle.len()]).collect();
        let depth_profiles = kinds
            .iter()
            .enumerate()
            .map(|(c, k)| {
                let jitter = (c / cycle.len()) as f64 * 0.01;
                match k {
                    ShowerKind::Electromagnetic => em_profile(depth, (0.2 + jitter) * d),
                    ShowerKind::Hadronic => hadronic_profile(depth, (0.7 + jitter) * (d - 1.0), 0.25 * d),
                    ShowerKind::Minimal => vec![1.0 / d; depth],
                }
            })
            .collect();
        TauToyConfig {
            n_channels: n,
            channel_prior: normalized((0..n).map(|c| 0.8f64.powi(c as i32))),
            grid: [depth, 35, 35],
            transverse_widths: kinds.iter().map(|k| widths(*k, depth)).collect(),
            channel_kinds: kinds,
            depth_profiles,
            front_distance: 25.0,
            ..Self::default()
        }
    }

    pub fn n_cells(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::ConfigInvalid(m));
        let [depth, nx, ny] = self.grid;
        if depth == 0 || nx == 0 || ny == 0 {
            return bad(format!("grid dimensions must be >= 1, got {:?}", self.grid));
        }
        if self.n_channels == 0 {
            return bad("need at least one channel".into());
        }
        if self.channel_prior.len() != self.n_channels
            || self.channel_kinds.len() != self.n_channels
            || self.depth_profiles.len() != self.n_channels
            || self.transverse_widths.len() != self.n_channels
        {
            return bad("per-channel tables must have n_channels rows".into());
        }
        if let Err(e) = Distribution::categorical(&self.channel_prior) {
            return bad(format!("channel_prior: {e}"));
        }
        for (c, row) in self.depth_profiles.iter().enumerate() {
            let total: f64 = row.iter().sum();
            if row.len() != depth || row.iter().any(|f| !(*f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
                return bad(format!("depth profile of channel {c} must have {depth} non-negative entries summing to 1"));
            }
        }
        for (c, row) in self.transverse_widths.iter().enumerate() {
            if row.len() != depth || row.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
                return bad(format!("transverse widths of channel {c} must be {depth} positive values"));
            }
        }
        let positive = [
            ("momentum_scale", self.momentum_scale),
            ("noise_sigma", self.noise_sigma),
            ("theta_max", self.theta_max),
            ("front_distance", self.front_distance),
        ];
        for (name, x) in positive {
            if !(x.is_finite() && x > 0.0) {
                return bad(format!("{name} must be positive, got {x}"));
            }
        }
        if self.theta_max >= std::f64::consts::FRAC_PI_2 {
            return bad("theta_max must be below pi/2".into());
        }
        Ok(())
    }

    /// Fraction of a channel's energy in the first half of the layers.
    pub fn front_fraction(&self, channel: usize) -> f64 {
        let depth = self.grid[0] as f64;
        self.depth_profiles[channel]
            .iter()
            .enumerate()
            .filter(|(d, _)| (*d as f64) < depth / 2.0)
            .map(|(_, f)| f)
            .sum()
    }

    /// Deposit image for unit momentum, row-major over (depth, x, y). Sums
    /// to 1; scale by |p| for the expected image.
    pub fn unit_image(&self, channel: usize, theta: f64, phi: f64) -> Vec<f64> {
        let [depth, nx, ny] = self.grid;
        let mut out = Vec::with_capacity(self.n_cells());
        let (cx, cy) = ((nx as f64 - 1.0) / 2.0, (ny as f64 - 1.0) / 2.0);
        let t = theta.tan();
        let (s, c) = phi.sin_cos();
        let mut layer = vec![0.0; nx * ny];
        for d in 0..depth {
            let reach = (self.front_distance + d as f64) * t;
            let (x0, y0) = (cx + reach * c, cy + reach * s);
            let w = self.transverse_widths[channel][d];
            let inv = 1.0 / (2.0 * w * w);
            let mut min_r2 = f64::INFINITY;
            for i in 0..nx {
                for j in 0..ny {
                    let r2 = (i as f64 - x0).powi(2) + (j as f64 - y0).powi(2);
                    layer[i * ny + j] = r2;
                    min_r2 = min_r2.min(r2);
                }
            }
            let mut total = 0.0;
            for v in &mut layer {
                *v = (-(*v - min_r2) * inv).exp();
                total += *v;
            }
            let frac = self.depth_profiles[channel][d];
            out.extend(layer.iter().map(|v| frac * v / total));
        }
        out
    }

    pub fn expected_image(&self, channel: usize, pmag: f64, theta: f64, phi: f64) -> Vec<f64> {
        self.unit_image(channel, theta, phi).into_iter().map(|v| pmag * v).collect()
    }

    pub fn cell_sigma(&self, expected: f64) -> f64 {
        self.noise_sigma * expected.max(CELL_SIGMA_FLOOR)
    }
}

pub fn momentum(pmag: f64, theta: f64, phi: f64) -> [f64; 3] {
    let (st, ct) = theta.sin_cos();
    let (sp, cp) = phi.sin_cos();
    [pmag * st * cp, pmag * st * sp, pmag * ct]
}

pub(crate) fn tau_decay_toy(ctx: &mut ExecutionContext<'_>, cfg: &TauToyConfig) -> Result<()> {
    let channel = ctx.sample_index("channel", Distribution::categorical(&cfg.channel_prior)?)?;
    let pmag = ctx.sample_f64("pmag", Distribution::exponential(1.0 / cfg.momentum_scale)?)?;
    let theta = ctx.sample_f64("theta", Distribution::uniform(0.0, cfg.theta_max)?)?;
    let phi = ctx.sample_f64(
        "phi",
        Distribution::uniform(-std::f64::consts::PI, std::f64::consts::PI)?,
    )?;
    for e in cfg.expected_image(channel, pmag, theta, phi) {
        ctx.observe("cell", Distribution::normal(e, cfg.cell_sigma(e))?)?;
    }
    let [px, py, pz] = momentum(pmag, theta, phi);
    ctx.predict("channel", channel as i64)?;
    ctx.predict("p_x", px)?;
    ctx.predict("p_y", py)?;
    ctx.predict("p_z", pz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::{run_model, RunOptions};
    use crate::zoo::ZooModel;

    #[test]
    fn default_config_is_valid_and_profiles_behave() {
        let cfg = TauToyConfig::default();
        cfg.validate().unwrap();
        for (c, kind) in cfg.channel_kinds.iter().enumerate() {
            match kind {
                ShowerKind::Electromagnetic => assert!(cfg.front_fraction(c) >= 0.7, "channel {c}"),
                ShowerKind::Hadronic => assert!(1.0 - cfg.front_fraction(c) >= 0.5, "channel {c}"),
                ShowerKind::Minimal => {}
            }
        }
    }

    #[test]
    fn full_scale_config_runs() {
        let cfg = TauToyConfig::full_scale();
        cfg.validate().unwrap();
        assert_eq!(cfg.n_cells(), 20 * 35 * 35);
        for (c, kind) in cfg.channel_kinds.iter().enumerate() {
            match kind {
                ShowerKind::Electromagnetic => assert!(cfg.front_fraction(c) >= 0.7),
                ShowerKind::Hadronic => assert!(1.0 - cfg.front_fraction(c) >= 0.5),
                ShowerKind::Minimal => {}
            }
        }
        let t = run_model(&ZooModel::TauDecayToy(cfg), &RunOptions::prior(1)).unwrap();
        assert_eq!(t.entries.len(), 4);
        assert_eq!(t.observes.len(), 24_500);
    }

    #[test]
    fn deposits_conserve_energy() {
        let cfg = TauToyConfig::default();
        for (c, pmag, theta, phi) in [(0, 20.0, 0.1, 1.0), (3, 3.5, 0.349, -3.1), (4, 150.0, 0.0, 0.0)] {
            let img = cfg.expected_image(c, pmag, theta, phi);
            let total: f64 = img.iter().sum();
            assert!((total - pmag).abs() <= 1e-9 * pmag.max(1.0), "{total} vs {pmag}");
        }
    }

    #[test]
    fn prior_trace_has_four_samples_and_grid_observes() {
        let t = run_model(&ZooModel::TauDecayToy(TauToyConfig::default()), &RunOptions::prior(8)).unwrap();
        assert_eq!(t.entries.len(), 4);
        assert_eq!(t.observes.len(), 196);
        let sites: Vec<String> = t.entries.iter().map(|e| e.address.base()).collect();
        assert_eq!(sites, ["channel:Categorical", "pmag:Exponential", "theta:Uniform", "phi:Uniform"]);
        for k in ["channel", "p_x", "p_y", "p_z"] {
            assert!(t.predicts.contains_key(k));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = TauToyConfig::default();
        cfg.channel_prior[0] = 0.9;
        assert!(matches!(cfg.validate(), Err(Error::ConfigInvalid(_))));
        let mut cfg = TauToyConfig::default();
        cfg.grid = [4, 0, 7];
        assert!(cfg.validate().is_err());
        let mut cfg = TauToyConfig::default();
        cfg.depth_profiles[2][0] += 0.1;
        assert!(cfg.validate().is_err());
        assert!(ZooModel::by_name("tau_decay_toy", Some(cfg)).is_err());
    }
}
