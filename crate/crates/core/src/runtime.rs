//! Executes instrumented models and records their traces.
//!
//! A model is ordinary code that receives an [`ExecutionContext`] and calls
//! [`sample`](ExecutionContext::sample), [`observe`](ExecutionContext::observe)
//! and [`predict`](ExecutionContext::predict) on it. The same model runs in
//! three modes:
//!
//! * [`Mode::Prior`]: every latent is drawn from its prior.
//! * [`Mode::Record`]: as `Prior`, but rejection scopes keep only the accepted
//!   iteration, so the trace is a training example for the inference network.
//! * [`Mode::Guided`]: latents are drawn from proposals supplied by a
//!   [`ProposalSource`]; each trace carries the importance weight.
//!
//! Rejection loops are annotated with [`scope_begin`](ExecutionContext::scope_begin),
//! [`scope_retry`](ExecutionContext::scope_retry) and
//! [`scope_end`](ExecutionContext::scope_end). In guided mode every executed
//! draw stays in the trace and in the weight; proposals are computed on the
//! first iteration of a scope and reused on every retry.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dist::Distribution;
use crate::error::{Error, Result};
use crate::trace::{address_extend, Address, AddressCounters, ObserveEntry, Trace, TraceEntry, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Prior,
    Record,
    Guided,
}

/// Answers "which proposal should be used at this address?".
pub trait ProposalSource: Sync {
    /// `Ok(None)` means no proposal is available for `address`; the runtime
    /// then draws from the prior and flags the entry.
    fn propose(
        &self,
        observation: &[f64],
        address: &Address,
        prior: &Distribution,
        prev_value: f64,
    ) -> Result<Option<Distribution>>;
}

/// Proposes the prior itself at every address.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorProposal;

impl ProposalSource for PriorProposal {
    fn propose(&self, _: &[f64], _: &Address, prior: &Distribution, _: f64) -> Result<Option<Distribution>> {
        Ok(Some(prior.clone()))
    }
}

/// Fixed raw proposal parameters keyed by instance-stripped address.
/// Addresses without an entry report no proposal.
#[derive(Debug, Clone, Default)]
pub struct FixedProposals {
    raw: HashMap<String, Vec<f64>>,
}

impl FixedProposals {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, base_address: impl Into<String>, raw: Vec<f64>) -> Self {
        self.raw.insert(base_address.into(), raw);
        self
    }
}

impl ProposalSource for FixedProposals {
    fn propose(&self, _: &[f64], address: &Address, prior: &Distribution, _: f64) -> Result<Option<Distribution>> {
        self.raw
            .get(&address.base())
            .map(|raw| crate::dist::proposal_from_params(prior, raw))
            .transpose()
    }
}

pub trait Model: Sync {
    fn run(&self, ctx: &mut ExecutionContext<'_>) -> Result<()>;
}

impl<F> Model for F
where
    F: Fn(&mut ExecutionContext<'_>) -> Result<()> + Sync,
{
    fn run(&self, ctx: &mut ExecutionContext<'_>) -> Result<()> {
        self(ctx)
    }
}

#[derive(Debug)]
struct RejectionScope {
    scope_id: String,
    iteration: u32,
    // (base address, occurrence within the iteration) -> proposal chosen on iteration 0
    cached_proposals: HashMap<(String, u32), Option<Distribution>>,
    iteration_counts: HashMap<String, u32>,
    // Trace lengths and counters at scope entry; retries rewind to these in
    // record mode and mark everything after them rejected otherwise.
    entries_mark: usize,
    observes_mark: usize,
    generated_mark: usize,
    cursor_mark: usize,
    counters_mark: AddressCounters,
}

pub struct ExecutionContext<'a> {
    mode: Mode,
    rng: ChaCha8Rng,
    counters: AddressCounters,
    trace: Trace,
    frames: Vec<String>,
    scopes: Vec<RejectionScope>,
    proposal_source: Option<&'a dyn ProposalSource>,
    observation: Option<&'a [f64]>,
    generated: Vec<f64>,
    cursor: usize,
    prev_value: f64,
    last_site: Option<Site>,
}

#[derive(Debug, Clone, Copy)]
enum Site {
    Entry(usize),
    Observe(usize),
}

impl<'a> ExecutionContext<'a> {
    fn new(opts: &RunOptions<'a>) -> Self {
        ExecutionContext {
            mode: opts.mode,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
            counters: AddressCounters::new(),
            trace: Trace::new(opts.trace_id),
            frames: Vec::new(),
            scopes: Vec::new(),
            proposal_source: opts.proposal_source,
            observation: opts.observation,
            generated: Vec::new(),
            cursor: 0,
            prev_value: 0.0,
            last_site: None,
        }
    }

    fn last_address(&self) -> String {
        let address = match self.last_site {
            Some(Site::Entry(i)) => self.trace.entries.get(i).map(|e| &e.address),
            Some(Site::Observe(i)) => self.trace.observes.get(i).map(|o| &o.address),
            None => None,
        };
        address.map_or_else(|| "<start>".to_owned(), Address::to_string)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// The conditioning data, if this execution was given one.
    pub fn observation(&self) -> Option<&[f64]> {
        self.observation
    }

    pub fn trace(&self) -> &Trace {
        &self.trace
    }

    /// Pushes a path component for the addresses created until the matching
    /// [`pop_frame`](Self::pop_frame).
    pub fn push_frame(&mut self, name: &str) {
        self.frames.push(name.to_owned());
    }

    pub fn pop_frame(&mut self) {
        self.frames.pop();
    }

    fn scope_tag(&self) -> (Option<String>, u32) {
        match self.scopes.last() {
            Some(s) => (Some(s.scope_id.clone()), s.iteration),
            None => (None, 0),
        }
    }

    fn guided_proposal(&mut self, address: &Address, prior: &Distribution) -> Result<Option<Distribution>> {
        let Some(source) = self.proposal_source else {
            return Ok(Some(prior.clone()));
        };
        let observation = self.observation.unwrap_or(&[]);
        let prev = self.prev_value;
        let Some(scope) = self.scopes.last_mut() else {
            return source.propose(observation, address, prior, prev);
        };
        let base = address.base();
        let occurrence = scope.iteration_counts.entry(base.clone()).or_insert(0);
        let key = (base, *occurrence);
        *occurrence += 1;
        if let Some(cached) = scope.cached_proposals.get(&key) {
            return Ok(cached.clone());
        }
        let proposal = source.propose(observation, address, prior, prev)?;
        if scope.iteration == 0 {
            scope.cached_proposals.insert(key, proposal.clone());
        }
        Ok(proposal)
    }

    /// Draws a latent at `site_id` and appends it to the trace.
    pub fn sample(&mut self, site_id: &str, prior: Distribution) -> Result<Value> {
        let address = address_extend(&self.frames, site_id, prior.family(), &mut self.counters)?;
        let (proposal, fallback) = match self.mode {
            Mode::Prior | Mode::Record => (None, false),
            Mode::Guided => match self.guided_proposal(&address, &prior)? {
                Some(q) => (Some(q), false),
                None => (None, self.proposal_source.is_some()),
            },
        };
        let value = proposal.as_ref().unwrap_or(&prior).sample(&mut self.rng);
        let log_p = prior.log_prob(value);
        let log_q = proposal.as_ref().map_or(log_p, |q| q.log_prob(value));
        let (scope_id, iteration) = self.scope_tag();
        self.last_site = Some(Site::Entry(self.trace.entries.len()));
        self.prev_value = value.as_f64();
        self.trace.entries.push(TraceEntry {
            family: address.family.name().to_owned(),
            address,
            dist_params: prior.params(),
            value,
            log_p,
            log_q,
            scope_id,
            iteration,
            accepted: true,
            fallback,
        });
        Ok(value)
    }

    pub fn sample_f64(&mut self, site_id: &str, prior: Distribution) -> Result<f64> {
        Ok(self.sample(site_id, prior)?.as_f64())
    }

    pub fn sample_index(&mut self, site_id: &str, prior: Distribution) -> Result<usize> {
        match self.sample(site_id, prior)? {
            Value::Int(k) if k >= 0 => Ok(k as usize),
            other => Err(Error::Precondition(format!("expected a non-negative integer draw, got {other}"))),
        }
    }

    /// Conditions on the next value of the observation vector. Without an
    /// observation (prior/record runs) the value is drawn from `dist` and
    /// becomes part of the generated observation.
    pub fn observe(&mut self, site_id: &str, dist: Distribution) -> Result<Value> {
        let value = match self.observation {
            Some(obs) => {
                let x = *obs.get(self.cursor).ok_or(Error::ObservationExhausted {
                    index: self.cursor,
                    len: obs.len(),
                })?;
                if dist.family().is_discrete() {
                    Value::Int(x.round() as i64)
                } else {
                    Value::Real(x)
                }
            }
            None => {
                let v = dist.sample(&mut self.rng);
                self.generated.push(v.as_f64());
                v
            }
        };
        self.cursor += 1;
        self.observe_value(site_id, dist, value)?;
        Ok(value)
    }

    /// Conditions on an explicitly supplied value. Never consumes randomness.
    pub fn observe_value(&mut self, site_id: &str, dist: Distribution, value: Value) -> Result<()> {
        let address = address_extend(&self.frames, site_id, dist.family(), &mut self.counters)?;
        self.last_site = Some(Site::Observe(self.trace.observes.len()));
        self.trace.observes.push(ObserveEntry {
            address,
            log_likelihood: dist.log_prob(value),
        });
        Ok(())
    }

    pub fn predict(&mut self, name: &str, value: impl Into<Value>) -> Result<()> {
        if self.trace.predicts.contains_key(name) {
            return Err(Error::DuplicatePredictName(name.to_owned()));
        }
        self.trace.predicts.insert(name.to_owned(), value.into());
        Ok(())
    }

    pub fn scope_begin(&mut self, scope_id: &str) -> Result<()> {
        if self.scopes.iter().any(|s| s.scope_id == scope_id) {
            return Err(Error::NestedScopeReuse(scope_id.to_owned()));
        }
        self.scopes.push(RejectionScope {
            scope_id: scope_id.to_owned(),
            iteration: 0,
            cached_proposals: HashMap::new(),
            iteration_counts: HashMap::new(),
            entries_mark: self.trace.entries.len(),
            observes_mark: self.trace.observes.len(),
            generated_mark: self.generated.len(),
            cursor_mark: self.cursor,
            counters_mark: self.counters.clone(),
        });
        self.frames.push(scope_id.to_owned());
        Ok(())
    }

    /// Rejects the current iteration of the innermost scope.
    pub fn scope_retry(&mut self) -> Result<()> {
        let scope = self.scopes.last_mut().ok_or(Error::ScopeUnderflow)?;
        match self.mode {
            Mode::Record => {
                self.trace.entries.truncate(scope.entries_mark);
                self.trace.observes.truncate(scope.observes_mark);
                self.generated.truncate(scope.generated_mark);
                self.cursor = scope.cursor_mark;
                self.counters = scope.counters_mark.clone();
            }
            Mode::Prior | Mode::Guided => {
                for e in &mut self.trace.entries[scope.entries_mark..] {
                    e.accepted = false;
                }
                scope.entries_mark = self.trace.entries.len();
            }
        }
        scope.iteration += 1;
        scope.iteration_counts.clear();
        Ok(())
    }

    pub fn scope_end(&mut self) -> Result<()> {
        self.scopes.pop().ok_or(Error::ScopeUnderflow)?;
        self.frames.pop();
        Ok(())
    }

    /// Runs `body` inside a rejection scope until it returns `true`.
    pub fn rejection_loop(
        &mut self,
        scope_id: &str,
        mut body: impl FnMut(&mut Self) -> Result<bool>,
    ) -> Result<()> {
        self.scope_begin(scope_id)?;
        while !body(self)? {
            self.scope_retry()?;
        }
        self.scope_end()
    }
}

#[derive(Clone, Copy)]
pub struct RunOptions<'a> {
    pub mode: Mode,
    pub seed: u64,
    pub trace_id: u64,
    pub observation: Option<&'a [f64]>,
    pub proposal_source: Option<&'a dyn ProposalSource>,
}

impl<'a> RunOptions<'a> {
    pub fn prior(seed: u64) -> Self {
        RunOptions {
            mode: Mode::Prior,
            seed,
            trace_id: 0,
            observation: None,
            proposal_source: None,
        }
    }

    pub fn record(seed: u64) -> Self {
        RunOptions {
            mode: Mode::Record,
            ..Self::prior(seed)
        }
    }

    pub fn guided(seed: u64, observation: &'a [f64], proposal_source: Option<&'a dyn ProposalSource>) -> Self {
        RunOptions {
            mode: Mode::Guided,
            seed,
            trace_id: 0,
            observation: Some(observation),
            proposal_source,
        }
    }

    pub fn with_trace_id(mut self, trace_id: u64) -> Self {
        self.trace_id = trace_id;
        self
    }

    pub fn with_observation(mut self, observation: &'a [f64]) -> Self {
        self.observation = Some(observation);
        self
    }
}

/// A finished execution: its trace and the observation it was conditioned
/// on (or generated, for prior and record runs without one).
#[derive(Debug, Clone)]
pub struct Execution {
    pub trace: Trace,
    pub observation: Vec<f64>,
}

pub fn execute(model: &dyn Model, opts: &RunOptions<'_>) -> Result<Execution> {
    match (opts.mode, opts.observation) {
        (Mode::Guided, None) => {
            return Err(Error::Precondition("guided mode requires an observation".into()));
        }
        (Mode::Record, Some(_)) => {
            return Err(Error::Precondition(
                "record mode generates its own observations".into(),
            ));
        }
        _ => {}
    }
    let mut ctx = ExecutionContext::new(opts);
    if let Err(e) = model.run(&mut ctx) {
        return Err(Error::Model {
            address: ctx.last_address(),
            source: Box::new(e),
        });
    }
    if !ctx.scopes.is_empty() {
        return Err(Error::UnclosedScope(ctx.scopes.len()));
    }
    let mut trace = ctx.trace;
    trace.finalize();
    let observation = match opts.observation {
        Some(obs) => obs.to_vec(),
        None => ctx.generated,
    };
    Ok(Execution { trace, observation })
}

pub fn run_model(model: &dyn Model, opts: &RunOptions<'_>) -> Result<Trace> {
    execute(model, opts).map(|e| e.trace)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th independent execution under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    splitmix64(master ^ splitmix64(index))
}
