use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use icppl::error::Error;
use icppl::inspect::{graph_to_dot, hotspot_report, inspect_traces};
use icppl::net::{discover_architecture, load_net, save_net, train as train_net, InferenceNet, TrainingConfig};
use icppl::par::{map_indexed, Parallelism};
use icppl::runtime::{derive_seed, execute, run_model, ProposalSource, RunOptions};
use icppl::sis::{effective_sample_size, posterior_summary, sis_infer, Summary};
use icppl::trace::write_jsonl;
use icppl::zoo::{Observation, TauToyConfig, ZooModel};
use serde::Serialize;

use crate::{GenerateMode, UsageError};

fn usage<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| UsageError(e.into()).into())
}

fn usage_msg(msg: String) -> anyhow::Error {
    UsageError(anyhow::anyhow!(msg)).into()
}

fn load_model(name: &str, config: Option<&Path>) -> Result<ZooModel> {
    let cfg = match config {
        Some(path) => {
            let text = usage(std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())))?;
            let cfg: TauToyConfig =
                usage(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())))?;
            Some(cfg)
        }
        None => None,
    };
    usage(ZooModel::by_name(name, cfg))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

#[derive(Serialize)]
struct GenerateSummary {
    n: usize,
    mean_length: f64,
}

pub fn generate(name: &str, config: Option<&Path>, n: usize, seed: u64, out: &Path, mode: GenerateMode) -> Result<()> {
    let model = load_model(name, config)?;
    let traces = map_indexed(n, Parallelism::default(), |i| {
        let s = derive_seed(seed, i as u64);
        let opts = match mode {
            GenerateMode::Prior => RunOptions::prior(s),
            GenerateMode::Record => RunOptions::record(s),
        };
        run_model(&model, &opts.with_trace_id(i as u64))
    })
    .into_iter()
    .collect::<icppl::error::Result<Vec<_>>>()?;
    let file = File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, &traces)?;
    w.flush()?;
    let total: usize = traces.iter().map(|t| t.len()).sum();
    print_json(&GenerateSummary {
        n,
        mean_length: if n == 0 { 0.0 } else { total as f64 / n as f64 },
    })
}

pub fn simulate(name: &str, config: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let model = load_model(name, config)?;
    let ex = execute(&model, &RunOptions::prior(seed))?;
    let obs = Observation::for_model(&model, ex.observation)?;
    std::fs::write(out, obs.to_json()?).with_context(|| format!("writing {}", out.display()))?;
    print_json(&ex.trace.predicts)
}

#[derive(Serialize)]
struct Telemetry {
    step: usize,
    loss: f64,
}

pub fn train(name: &str, config: Option<&Path>, out: &Path, discovery_runs: usize, cfg: TrainingConfig) -> Result<()> {
    let model = load_model(name, config)?;
    if cfg.batch_size == 0 || !(cfg.learning_rate > 0.0) || !(cfg.grad_clip_norm > 0.0) || discovery_runs == 0 {
        return Err(usage_msg(
            "--batch-size, --lr, --clip and --discovery-runs must be positive".into(),
        ));
    }
    // Fail before training if the destination cannot be written.
    File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let strategy = Parallelism::default();
    let (arch, standardization) = discover_architecture(&model, discovery_runs, cfg.master_seed, strategy)?;
    let net = InferenceNet::initialize(arch, standardization, cfg.master_seed)?;
    let mut stdout = std::io::stdout().lock();
    let mut write_err = None;
    let net = train_net(&model, net, &cfg, strategy, |step, loss| {
        if write_err.is_none() {
            let line = serde_json::to_string(&Telemetry { step, loss }).expect("plain struct");
            if let Err(e) = writeln!(stdout, "{line}") {
                write_err = Some(e);
            }
        }
    })
    .map_err(|e| match e {
        Error::NonFiniteLoss { step } => anyhow::anyhow!("training diverged: non-finite loss at step {step}"),
        other => other.into(),
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    save_net(&net, out).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

#[derive(Serialize)]
struct InferReport {
    model: String,
    n_particles: usize,
    seed: u64,
    guided: bool,
    ess: f64,
    log_evidence: f64,
    proposal_fallbacks: usize,
    summaries: Vec<Summary>,
}

pub fn infer(
    name: &str,
    observation: &Path,
    net_path: Option<&Path>,
    particles: usize,
    seed: u64,
    out: &Path,
) -> Result<()> {
    let text = usage(
        std::fs::read_to_string(observation).with_context(|| format!("reading {}", observation.display())),
    )?;
    let obs = usage(Observation::from_json(&text).with_context(|| format!("parsing {}", observation.display())))?;
    if obs.model_name() != name {
        return Err(usage_msg(format!(
            "observation file is for model {}, not {name}",
            obs.model_name()
        )));
    }
    let model = usage(obs.model())?;
    if particles == 0 {
        return Err(usage_msg("--particles must be at least 1".into()));
    }
    let net = match net_path {
        Some(p) => Some(usage(load_net(p).with_context(|| format!("loading {}", p.display())))?),
        None => None,
    };
    if let Some(net) = &net {
        if net.arch.obs_dim != model.observation_dim() {
            return Err(usage_msg(format!(
                "network expects {} observed values, model produces {}",
                net.arch.obs_dim,
                model.observation_dim()
            )));
        }
    }
    let source = net.as_ref().map(|n| n as &dyn ProposalSource);
    let ps = sis_infer(&model, &obs.values(), particles, source, seed).map_err(|e| match e {
        Error::AllWeightsZero { first_zero_observe } => anyhow::anyhow!(
            "every particle has zero weight; first zero-likelihood observe: {first_zero_observe}"
        ),
        other => other.into(),
    })?;
    let summaries = model
        .predict_names()
        .iter()
        .map(|p| posterior_summary(&ps, p))
        .collect::<icppl::error::Result<Vec<_>>>()?;
    let max = ps.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean_w = ps.log_weights.iter().map(|lw| (lw - max).exp()).sum::<f64>() / ps.len() as f64;
    let report = InferReport {
        model: name.to_owned(),
        n_particles: particles,
        seed,
        guided: net.is_some(),
        ess: effective_sample_size(&ps),
        log_evidence: max + mean_w.ln(),
        proposal_fallbacks: ps.fallback_count(),
        summaries,
    };
    let text = serde_json::to_string_pretty(&report)?;
    std::fs::write(out, format!("{text}\n")).with_context(|| format!("writing {}", out.display()))?;
    print_json(&report)
}

pub fn inspect(traces: &Path, dot: &Path, stats_out: &Path, threshold: f64) -> Result<()> {
    if !(threshold > 1.0) {
        return Err(usage_msg(format!("--threshold must exceed 1, got {threshold}")));
    }
    let file = usage(File::open(traces).with_context(|| format!("opening {}", traces.display())))?;
    let (graph, stats) = inspect_traces(BufReader::new(file))?;
    std::fs::write(dot, graph_to_dot(&graph)).with_context(|| format!("writing {}", dot.display()))?;
    let text = serde_json::to_string_pretty(&stats)?;
    std::fs::write(stats_out, format!("{text}\n")).with_context(|| format!("writing {}", stats_out.display()))?;
    print_json(&hotspot_report(&stats, &graph, threshold))
}
