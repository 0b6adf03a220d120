//! Registered benchmark models and their observation files.

mod oracle;
mod tau;

use serde::{Deserialize, Serialize};

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::runtime::{ExecutionContext, Model};

pub use oracle::{oracle_posterior, OraclePosterior, RejectionOracle, TauOracle};
pub use tau::{ShowerKind, TauToyConfig};

pub const GAUSSIAN_UNKNOWN_MEAN: &str = "gaussian_unknown_mean";
pub const REJECTION_DEMO: &str = "rejection_demo";
pub const TAU_DECAY_TOY: &str = "tau_decay_toy";
pub const MODEL_NAMES: [&str; 3] = [GAUSSIAN_UNKNOWN_MEAN, REJECTION_DEMO, TAU_DECAY_TOY];

/// Observation noise of the rejection demo.
pub const DISC_OBS_SIGMA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum ZooModel {
    GaussianUnknownMean,
    RejectionDemo,
    TauDecayToy(TauToyConfig),
}

impl ZooModel {
    /// Looks a model up by name. `config` only applies to the tau toy and
    /// defaults to [`TauToyConfig::default`].
    pub fn by_name(name: &str, config: Option<TauToyConfig>) -> Result<Self> {
        match name {
            GAUSSIAN_UNKNOWN_MEAN => Ok(ZooModel::GaussianUnknownMean),
            REJECTION_DEMO => Ok(ZooModel::RejectionDemo),
            TAU_DECAY_TOY => {
                let cfg = config.unwrap_or_default();
                cfg.validate()?;
                Ok(ZooModel::TauDecayToy(cfg))
            }
            other => Err(Error::UnsupportedModel(other.to_owned())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ZooModel::GaussianUnknownMean => GAUSSIAN_UNKNOWN_MEAN,
            ZooModel::RejectionDemo => REJECTION_DEMO,
            ZooModel::TauDecayToy(_) => TAU_DECAY_TOY,
        }
    }

    /// Names of the predicts every trace of this model carries.
    pub fn predict_names(&self) -> &'static [&'static str] {
        match self {
            ZooModel::GaussianUnknownMean => &["mu"],
            ZooModel::RejectionDemo => &["u", "v"],
            ZooModel::TauDecayToy(_) => &["channel", "p_x", "p_y", "p_z"],
        }
    }

    pub fn observation_dim(&self) -> usize {
        match self {
            ZooModel::GaussianUnknownMean | ZooModel::RejectionDemo => 1,
            ZooModel::TauDecayToy(cfg) => cfg.n_cells(),
        }
    }
}

impl Model for ZooModel {
    fn run(&self, ctx: &mut ExecutionContext<'_>) -> Result<()> {
        match self {
            ZooModel::GaussianUnknownMean => gaussian_unknown_mean(ctx),
            ZooModel::RejectionDemo => rejection_demo(ctx),
            ZooModel::TauDecayToy(cfg) => tau::tau_decay_toy(ctx, cfg),
        }
    }
}

/// `mu ~ Normal(0, 1)`, `y ~ Normal(mu, 1)`.
pub fn gaussian_unknown_mean(ctx: &mut ExecutionContext<'_>) -> Result<()> {
    let mu = ctx.sample_f64("mu", Distribution::normal(0.0, 1.0)?)?;
    ctx.observe("y", Distribution::normal(mu, 1.0)?)?;
    ctx.predict("mu", mu)
}

/// A point drawn uniformly in the unit disc by rejection from the square,
/// then `y ~ Normal(u, 0.1)`.
pub fn rejection_demo(ctx: &mut ExecutionContext<'_>) -> Result<()> {
    let square = Distribution::uniform(-1.0, 1.0)?;
    let (mut u, mut v) = (0.0, 0.0);
    ctx.rejection_loop("disc", |ctx| {
        u = ctx.sample_f64("u", square.clone())?;
        v = ctx.sample_f64("v", square.clone())?;
        Ok(u * u + v * v <= 1.0)
    })?;
    ctx.observe("y", Distribution::normal(u, DISC_OBS_SIGMA)?)?;
    ctx.predict("u", u)?;
    ctx.predict("v", v)
}

/// Observation file contents.
#[derive(Debug, Clone, PartialEq)]
pub enum Observation {
    Scalar { model: String, y: f64 },
    Tau { config: TauToyConfig, cells: Vec<f64> },
}

#[derive(Serialize, Deserialize)]
struct ObservationFile {
    model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config: Option<TauToyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    grid: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<f64>>,
}

impl Observation {
    /// Wraps a flat observation vector produced by `model`.
    pub fn for_model(model: &ZooModel, values: Vec<f64>) -> Result<Self> {
        if values.len() != model.observation_dim() {
            return Err(Error::Precondition(format!(
                "{} expects {} observed values, got {}",
                model.name(),
                model.observation_dim(),
                values.len()
            )));
        }
        Ok(match model {
            ZooModel::TauDecayToy(cfg) => Observation::Tau {
                config: cfg.clone(),
                cells: values,
            },
            other => Observation::Scalar {
                model: other.name().to_owned(),
                y: values[0],
            },
        })
    }

    pub fn model_name(&self) -> &str {
        match self {
            Observation::Scalar { model, .. } => model,
            Observation::Tau { .. } => TAU_DECAY_TOY,
        }
    }

    pub fn model(&self) -> Result<ZooModel> {
        match self {
            Observation::Scalar { model, .. } => ZooModel::by_name(model, None),
            Observation::Tau { config, .. } => ZooModel::by_name(TAU_DECAY_TOY, Some(config.clone())),
        }
    }

    /// The flat vector the runtime conditions on.
    pub fn values(&self) -> Vec<f64> {
        match self {
            Observation::Scalar { y, .. } => vec![*y],
            Observation::Tau { cells, .. } => cells.clone(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = match self {
            Observation::Scalar { model, y } => ObservationFile {
                model: model.clone(),
                y: Some(*y),
                config: None,
                grid: None,
                cells: None,
            },
            Observation::Tau { config, cells } => ObservationFile {
                model: TAU_DECAY_TOY.to_owned(),
                y: None,
                grid: Some(config.grid),
                config: Some(config.clone()),
                cells: Some(cells.clone()),
            },
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let bad = |m: String| Error::MalformedFile(m);
        let file: ObservationFile = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        match file.model.as_str() {
            TAU_DECAY_TOY => {
                let config = file.config.unwrap_or_default();
                config.validate()?;
                let cells = file.cells.ok_or_else(|| bad("tau observation without `cells`".into()))?;
                if let Some(grid) = file.grid {
                    if grid != config.grid {
                        return Err(bad(format!("grid {grid:?} disagrees with config grid {:?}", config.grid)));
                    }
                }
                if cells.len() != config.n_cells() {
                    return Err(bad(format!("expected {} cells, got {}", config.n_cells(), cells.len())));
                }
                if cells.iter().any(|c| !c.is_finite()) {
                    return Err(bad("non-finite cell value".into()));
                }
                Ok(Observation::Tau { config, cells })
            }
            GAUSSIAN_UNKNOWN_MEAN | REJECTION_DEMO => {
                let y = file.y.ok_or_else(|| bad("observation without `y`".into()))?;
                Ok(Observation::Scalar { model: file.model, y })
            }
            other => Err(Error::UnsupportedModel(other.to_owned())),
        }
    }
}
