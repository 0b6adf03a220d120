//! The inference network and its training.
//!
//! A feedforward network maps `(observation, address, previous value)` to the
//! raw parameters of the proposal family for the prior at that address:
//!
//! ```text
//! obs_embed = tanh(W_enc · standardize(obs) + b_enc)
//! hidden    = tanh(W_trunk · [obs_embed; embed[head]; squash(prev)] + b_trunk)
//! raw       = W_head · hidden + b_head
//! ```
//!
//! Heads are keyed by instance-stripped address, so every occurrence of a
//! loop site shares one head. Training minimizes the mean over traces of the
//! summed negative proposal log-density of the recorded values, with plain
//! SGD and global-norm gradient clipping. Gradients are computed by hand.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{proposal_dim, proposal_from_params, proposal_log_prob_grad, Distribution};
use crate::error::{Error, Result};
use crate::par::{map_indexed, Parallelism};
use crate::runtime::{derive_seed, execute, Execution, Model, ProposalSource, RunOptions};
use crate::trace::Address;

pub const NET_FILE_VERSION: u64 = 1;

const DISCOVERY_DOMAIN: u64 = 0x6469_7363_6f76_6572;
const TRAINING_DOMAIN: u64 = 0x7472_6169_6e69_6e67;
const INIT_DOMAIN: u64 = 0x696e_6974_6961_6c69;
const MIN_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetArchitecture {
    pub obs_dim: usize,
    pub obs_embed_dim: usize,
    pub addr_embed_dim: usize,
    pub hidden_dim: usize,
    /// Instance-stripped address -> raw output dimension.
    pub heads: BTreeMap<String, usize>,
}

impl NetArchitecture {
    pub fn new(obs_dim: usize, heads: BTreeMap<String, usize>) -> Self {
        NetArchitecture {
            obs_dim,
            obs_embed_dim: 32,
            addr_embed_dim: 16,
            hidden_dim: 64,
            heads,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.obs_dim, self.obs_embed_dim, self.addr_embed_dim, self.hidden_dim];
        if dims.contains(&0) || self.heads.values().any(|d| *d == 0) {
            return Err(Error::Precondition("network dimensions must be >= 1".into()));
        }
        Ok(())
    }

    fn trunk_in(&self) -> usize {
        self.obs_embed_dim + self.addr_embed_dim + 1
    }
}

/// Per-cell observation standardization, stored with the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardization {
    pub fn identity(dim: usize) -> Self {
        Standardization {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn from_samples(samples: &[Vec<f64>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Precondition("no samples to standardize from".into()));
        };
        let dim = first.len();
        if samples.iter().any(|s| s.len() != dim) {
            return Err(Error::Precondition("observation length varies between executions".into()));
        }
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, x) in mean.iter_mut().zip(s) {
                *m += x / n;
            }
        }
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((v, x), m) in var.iter_mut().zip(s).zip(&mean) {
                *v += (x - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v.sqrt() > MIN_STD { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardization { mean, std })
    }

    fn apply(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    offset: usize,
    rows: usize,
    cols: usize,
}

impl Block {
    fn len(&self) -> usize {
        self.rows * self.cols
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every parameter block inside the flat parameter vector.
#[derive(Debug, Clone)]
struct Layout {
    enc_w: Block,
    enc_b: Block,
    embed: Block,
    trunk_w: Block,
    trunk_b: Block,
    heads: Vec<(Block, Block)>,
    total: usize,
}

impl Layout {
    fn new(arch: &NetArchitecture) -> Self {
        let mut offset = 0;
        let mut block = |rows: usize, cols: usize| {
            let b = Block { offset, rows, cols };
            offset += rows * cols;
            b
        };
        let enc_w = block(arch.obs_embed_dim, arch.obs_dim);
        let enc_b = block(arch.obs_embed_dim, 1);
        let embed = block(arch.heads.len(), arch.addr_embed_dim);
        let trunk_w = block(arch.hidden_dim, arch.trunk_in());
        let trunk_b = block(arch.hidden_dim, 1);
        let heads = arch
            .heads
            .values()
            .map(|&dim| (block(dim, arch.hidden_dim), block(dim, 1)))
            .collect();
        Layout {
            enc_w,
            enc_b,
            embed,
            trunk_w,
            trunk_b,
            heads,
            total: offset,
        }
    }

    fn named_blocks(&self, arch: &NetArchitecture) -> Vec<(String, Block)> {
        let mut out = vec![
            ("encoder.weight".to_owned(), self.enc_w),
            ("encoder.bias".to_owned(), self.enc_b),
            ("address_embedding".to_owned(), self.embed),
            ("trunk.weight".to_owned(), self.trunk_w),
            ("trunk.bias".to_owned(), self.trunk_b),
        ];
        for (name, (w, b)) in arch.heads.keys().zip(&self.heads) {
            out.push((format!("head.{name}.weight"), *w));
            out.push((format!("head.{name}.bias"), *b));
        }
        out
    }
}

/// Flat parameter vector; block boundaries come from the architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    pub data: Vec<f64>,
}

/// Architecture, standardization and parameters: everything needed to
/// propose.
#[derive(Debug, Clone)]
pub struct InferenceNet {
    pub arch: NetArchitecture,
    pub standardization: Standardization,
    pub params: NetParams,
    layout: Layout,
    head_index: HashMap<String, usize>,
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], bias: &[f64], out: &mut Vec<f64>) {
    out.clear();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        out.push(bias[r] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
}

/// Compresses the previous value's dynamic range before it enters the trunk.
fn squash_prev(x: f64) -> f64 {
    x.signum() * x.abs().ln_1p()
}

struct StepCache {
    head: usize,
    input: Vec<f64>,
    hidden: Vec<f64>,
}

impl InferenceNet {
    pub fn new(arch: NetArchitecture, standardization: Standardization, params: NetParams) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.data.len() != layout.total {
            return Err(Error::MalformedFile(format!(
                "expected {} parameters, found {}",
                layout.total,
                params.data.len()
            )));
        }
        if standardization.mean.len() != arch.obs_dim || standardization.std.len() != arch.obs_dim {
            return Err(Error::MalformedFile("standardization length differs from obs_dim".into()));
        }
        let head_index = arch.heads.keys().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        Ok(InferenceNet {
            arch,
            standardization,
            params,
            layout,
            head_index,
        })
    }

    /// All parameters zero.
    pub fn zeros(arch: NetArchitecture, standardization: Standardization) -> Result<Self> {
        let total = Layout::new(&arch).total;
        Self::new(arch, standardization, NetParams { data: vec![0.0; total] })
    }

    /// Uniform ±sqrt(6 / (fan_in + fan_out)) for encoder, embedding and trunk;
    /// zero biases and zero output heads.
    pub fn initialize(arch: NetArchitecture, standardization: Standardization, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(arch, standardization)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, INIT_DOMAIN));
        let l = net.layout.clone();
        for b in [l.enc_w, l.embed, l.trunk_w] {
            let limit = (6.0 / (b.rows + b.cols) as f64).sqrt();
            for x in &mut net.params.data[b.range()] {
                *x = rng.random_range(-limit..limit);
            }
        }
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn head_for(&self, address: &Address) -> Option<usize> {
        self.head_index.get(&address.base()).copied()
    }

    fn p(&self, b: Block) -> &[f64] {
        &self.params.data[b.range()]
    }

    fn encode(&self, observation: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if observation.len() != self.arch.obs_dim {
            return Err(Error::Precondition(format!(
                "observation has length {}, network expects {}",
                observation.len(),
                self.arch.obs_dim
            )));
        }
        let x = self.standardization.apply(observation);
        let mut h = Vec::with_capacity(self.arch.obs_embed_dim);
        let l = &self.layout;
        matvec(self.p(l.enc_w), l.enc_w.rows, l.enc_w.cols, &x, self.p(l.enc_b), &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        Ok((x, h))
    }

    fn step(&self, obs_embed: &[f64], head: usize, prev_value: f64) -> (Vec<f64>, StepCache) {
        let l = &self.layout;
        let a = self.arch.addr_embed_dim;
        let mut input = Vec::with_capacity(self.arch.trunk_in());
        input.extend_from_slice(obs_embed);
        input.extend_from_slice(&self.p(l.embed)[head * a..(head + 1) * a]);
        input.push(squash_prev(prev_value));
        let mut hidden = Vec::with_capacity(self.arch.hidden_dim);
        matvec(self.p(l.trunk_w), l.trunk_w.rows, l.trunk_w.cols, &input, self.p(l.trunk_b), &mut hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let (hw, hb) = l.heads[head];
        let mut raw = Vec::with_capacity(hw.rows);
        matvec(self.p(hw), hw.rows, hw.cols, &hidden, self.p(hb), &mut raw);
        (raw, StepCache { head, input, hidden })
    }

    /// Raw proposal parameters for `address`. `prev_value` is 0.0 at the
    /// first sample of a trace.
    pub fn forward(&self, observation: &[f64], address: &Address, prev_value: f64) -> Result<Vec<f64>> {
        let head = self
            .head_for(address)
            .ok_or_else(|| Error::UnknownHead(address.base()))?;
        let (_, obs_embed) = self.encode(observation)?;
        Ok(self.step(&obs_embed, head, prev_value).0)
    }

    /// Summed negative proposal log-density of one trace, accumulating
    /// `scale ×` its gradient into `grad` when given.
    fn trace_loss(&self, ex: &Execution, grad: Option<(&mut [f64], f64)>) -> Result<f64> {
        let (x, obs_embed) = self.encode(&ex.observation)?;
        let mut loss = 0.0;
        let mut prev = 0.0;
        let mut caches = Vec::new();
        let mut raw_grads = Vec::new();
        for entry in &ex.trace.entries {
            let head = self
                .head_for(&entry.address)
                .ok_or_else(|| Error::UnknownHead(entry.address.base()))?;
            let prior = Distribution::from_parts(&entry.family, &entry.dist_params)?;
            let (raw, cache) = self.step(&obs_embed, head, prev);
            let (log_q, d_log_q) = proposal_log_prob_grad(&prior, &raw, entry.value)?;
            loss -= log_q;
            if grad.is_some() {
                caches.push(cache);
                raw_grads.push(d_log_q.into_iter().map(|g| -g).collect::<Vec<_>>());
            }
            prev = entry.value.as_f64();
        }
        let Some((g, scale)) = grad else {
            return Ok(loss);
        };
        let l = &self.layout;
        let (e_dim, a_dim, hid) = (self.arch.obs_embed_dim, self.arch.addr_embed_dim, self.arch.hidden_dim);
        let trunk_in = self.arch.trunk_in();
        let trunk_w = self.p(l.trunk_w);
        let mut d_obs_embed = vec![0.0; e_dim];
        let mut d_hidden = vec![0.0; hid];
        let mut d_input = vec![0.0; trunk_in];
        for (cache, g_raw) in caches.iter().zip(&raw_grads) {
            let (hw, hb) = l.heads[cache.head];
            let head_w = self.p(hw);
            d_hidden.iter_mut().for_each(|v| *v = 0.0);
            for (r, gr) in g_raw.iter().enumerate() {
                let gr = gr * scale;
                g[hb.offset + r] += gr;
                let row = hw.offset + r * hid;
                for j in 0..hid {
                    g[row + j] += gr * cache.hidden[j];
                    d_hidden[j] += head_w[r * hid + j] * gr;
                }
            }
            d_input.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..hid {
                let da = d_hidden[j] * (1.0 - cache.hidden[j] * cache.hidden[j]);
                if da == 0.0 {
                    continue;
                }
                g[l.trunk_b.offset + j] += da;
                let row = l.trunk_w.offset + j * trunk_in;
                for (i, z) in cache.input.iter().enumerate() {
                    g[row + i] += da * z;
                    d_input[i] += trunk_w[j * trunk_in + i] * da;
                }
            }
            for (acc, d) in d_obs_embed.iter_mut().zip(&d_input[..e_dim]) {
                *acc += d;
            }
            let emb = l.embed.offset + cache.head * a_dim;
            for (i, d) in d_input[e_dim..e_dim + a_dim].iter().enumerate() {
                g[emb + i] += d;
            }
        }
        for (r, (d, h)) in d_obs_embed.iter().zip(&obs_embed).enumerate() {
            let da = d * (1.0 - h * h);
            if da == 0.0 {
                continue;
            }
            g[l.enc_b.offset + r] += da;
            let row = l.enc_w.offset + r * self.arch.obs_dim;
            for (i, xi) in x.iter().enumerate() {
                g[row + i] += da * xi;
            }
        }
        Ok(loss)
    }

    /// Mean over the batch of each trace's summed `−log q(value | raw)`.
    pub fn ic_loss(&self, batch: &[Execution]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty training batch".into()));
        }
        let mut total = 0.0;
        for ex in batch {
            total += self.trace_loss(ex, None)?;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss together with its exact gradient, shaped like `params.data`.
    pub fn ic_loss_and_grad(&self, batch: &[Execution]) -> Result<(f64, Vec<f64>)> {
        if batch.is_empty() {
            return Err(Error::Precondition("empty training batch".into()));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grad = vec![0.0; self.layout.total];
        let mut total = 0.0;
        for ex in batch {
            total += self.trace_loss(ex, Some((&mut grad, scale)))?;
        }
        Ok((total * scale, grad))
    }

    pub fn ic_grad(&self, batch: &[Execution]) -> Result<Vec<f64>> {
        self.ic_loss_and_grad(batch).map(|(_, g)| g)
    }

    pub fn to_file(&self) -> NetFile {
        let params = self
            .layout
            .named_blocks(&self.arch)
            .into_iter()
            .map(|(name, b)| (name, self.params.data[b.range()].to_vec()))
            .collect();
        NetFile {
            version: NET_FILE_VERSION,
            arch: self.arch.clone(),
            standardization: self.standardization.clone(),
            params,
        }
    }

    pub fn from_file(file: NetFile) -> Result<Self> {
        if file.version != NET_FILE_VERSION {
            return Err(Error::VersionMismatch {
                found: file.version,
                expected: NET_FILE_VERSION,
            });
        }
        file.arch.validate().map_err(|e| Error::MalformedFile(e.to_string()))?;
        let layout = Layout::new(&file.arch);
        let mut data = vec![0.0; layout.total];
        let blocks = layout.named_blocks(&file.arch);
        if file.params.len() != blocks.len() {
            return Err(Error::MalformedFile(format!(
                "expected {} parameter arrays, found {}",
                blocks.len(),
                file.params.len()
            )));
        }
        for (name, b) in blocks {
            let values = file
                .params
                .get(&name)
                .ok_or_else(|| Error::MalformedFile(format!("missing parameter array `{name}`")))?;
            if values.len() != b.len() {
                return Err(Error::MalformedFile(format!(
                    "`{name}` has {} values, expected {}",
                    values.len(),
                    b.len()
                )));
            }
            data[b.range()].copy_from_slice(values);
        }
        Self::new(file.arch, file.standardization, NetParams { data })
    }
}

impl ProposalSource for InferenceNet {
    fn propose(
        &self,
        observation: &[f64],
        address: &Address,
        prior: &Distribution,
        prev_value: f64,
    ) -> Result<Option<Distribution>> {
        let Some(head) = self.head_for(address) else {
            return Ok(None);
        };
        let (_, obs_embed) = self.encode(observation)?;
        let (raw, _) = self.step(&obs_embed, head, prev_value);
        if raw.len() != proposal_dim(prior) {
            return Err(Error::DimensionMismatch {
                expected: proposal_dim(prior),
                got: raw.len(),
            });
        }
        proposal_from_params(prior, &raw).map(Some)
    }
}

/// On-disk network: `{version, arch, standardization, params}` where
/// `params` maps block names to row-major arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetFile {
    pub version: u64,
    pub arch: NetArchitecture,
    pub standardization: Standardization,
    pub params: BTreeMap<String, Vec<f64>>,
}

pub fn save_net(net: &InferenceNet, path: &Path) -> Result<()> {
    let text = serde_json::to_string(&net.to_file())?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_net(path: &Path) -> Result<InferenceNet> {
    let text = std::fs::read_to_string(path)?;
    parse_net(&text)
}

pub fn parse_net(text: &str) -> Result<InferenceNet> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::MalformedFile(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::MalformedFile("missing numeric `version`".into()))?;
    if version != NET_FILE_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: NET_FILE_VERSION,
        });
    }
    let file: NetFile = serde_json::from_value(value).map_err(|e| Error::MalformedFile(e.to_string()))?;
    InferenceNet::from_file(file)
}

/// Runs `n` record-mode executions to find every address the model reaches
/// (one head each) and the observation standardization.
pub fn discover_architecture(
    model: &dyn Model,
    n: usize,
    seed: u64,
    strategy: Parallelism,
) -> Result<(NetArchitecture, Standardization)> {
    let domain = derive_seed(seed, DISCOVERY_DOMAIN);
    let runs = map_indexed(n, strategy, |i| execute(model, &RunOptions::record(derive_seed(domain, i as u64))));
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let mut heads = BTreeMap::new();
    for ex in &runs {
        for e in &ex.trace.entries {
            let prior = Distribution::from_parts(&e.family, &e.dist_params)?;
            let dim = proposal_dim(&prior);
            match heads.insert(e.address.base(), dim) {
                Some(old) if old != dim => {
                    return Err(Error::Precondition(format!(
                        "address {} changes proposal dimension ({old} vs {dim})",
                        e.address.base()
                    )))
                }
                _ => {}
            }
        }
    }
    let observations: Vec<Vec<f64>> = runs.into_iter().map(|ex| ex.observation).collect();
    let standardization = Standardization::from_samples(&observations)?;
    Ok((NetArchitecture::new(standardization.mean.len(), heads), standardization))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip_norm: f64,
    pub steps: usize,
    pub master_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 64,
            learning_rate: 1e-3,
            grad_clip_norm: 10.0,
            steps: 0,
            master_seed: 0,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) {
            return Err(Error::Precondition(
                "batch_size, learning_rate and grad_clip_norm must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Fresh record-mode training batch for `step`.
pub fn training_batch(
    model: &dyn Model,
    batch_size: usize,
    master_seed: u64,
    step: usize,
    strategy: Parallelism,
) -> Result<Vec<Execution>> {
    let step_seed = derive_seed(derive_seed(master_seed, TRAINING_DOMAIN), step as u64);
    map_indexed(batch_size, strategy, |i| {
        execute(model, &RunOptions::record(derive_seed(step_seed, i as u64)).with_trace_id(i as u64))
    })
    .into_iter()
    .collect()
}

/// Runs `config.steps` clipped SGD steps on batches simulated from the
/// model's prior. `telemetry` receives `(step, loss)` before each update.
pub fn train(
    model: &dyn Model,
    mut net: InferenceNet,
    config: &TrainingConfig,
    strategy: Parallelism,
    mut telemetry: impl FnMut(usize, f64),
) -> Result<InferenceNet> {
    config.validate()?;
    for step in 0..config.steps {
        let batch = training_batch(model, config.batch_size, config.master_seed, step, strategy)?;
        let (loss, mut grad) = match net.ic_loss_and_grad(&batch) {
            Ok(v) => v,
            // Proposal construction rejects only non-finite head outputs.
            Err(Error::InvalidParameter { .. }) => return Err(Error::NonFiniteLoss { step }),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        telemetry(step, loss);
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        if norm > config.grad_clip_norm {
            let s = config.grad_clip_norm / norm;
            grad.iter_mut().for_each(|g| *g *= s);
        }
        for (p, g) in net.params.data.iter_mut().zip(&grad) {
            *p -= config.learning_rate * g;
        }
        if net.params.data.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }
    }
    Ok(net)
}
