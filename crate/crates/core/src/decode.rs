//! Autoregressive generation with early exit. Exited tokens wait on a
//! pending stack with their shallow hidden state; the next token that goes
//! deeper carries them along, so every cached deep key/value is exact.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::kvcache::KvBank;
use crate::model::forward::{layer_kv, run_layers, Binder, KvCtx};
use crate::model::weights::block_param;
use crate::model::{intermediate_logits, Model};
use crate::ops::confidence;
use crate::routing::{self, AuxMode, RouterConfig, RouterKind};
use crate::tensor::{argmax, softmax_row, Tensor};
use crate::threshold::AdaptiveThreshold;

pub const DEFAULT_EXIT_RUN_CAP: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub enum ThresholdSource {
    Fixed(f64),
    Adaptive(AdaptiveThreshold),
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExitPolicy {
    None,
    /// Exit at the first depth whose top-1 probability exceeds the threshold.
    Confidence(ThresholdSource),
    /// Exit at the first depth whose prediction matches the final depth's.
    Oracle,
    Static(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExitRecord {
    pub sample_id: usize,
    pub position: usize,
    pub exit_depth: usize,
    pub confidence: f64,
}

pub fn write_trace<W: Write>(mut w: W, trace: &[ExitRecord]) -> Result<()> {
    for r in trace {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Reads exit records, skipping blank lines and `{"header": …}` lines.
pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<ExitRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() || line.trim_start().starts_with("{\"header\"") {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse(format!("trace line {}: {e}", i + 1)))?);
    }
    Ok(out)
}

/// Smallest 1-based depth whose argmax equals the last depth's argmax.
pub fn oracle_exit_depth(per_depth: &[Vec<f64>]) -> usize {
    let Some(last) = per_depth.last() else { return 0 };
    let target = argmax(last);
    per_depth.iter().position(|l| argmax(l) == target).map_or(per_depth.len(), |d| d + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampler {
    Greedy,
    TopK(usize),
    Nucleus(f64),
}

fn parse_arg<T: std::str::FromStr>(what: &str, v: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::Config(format!("{what}: cannot parse `{v}`")))
}

/// `greedy`, `topk:<k>` or `nucleus:<p>`.
impl std::str::FromStr for Sampler {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        let s = match (kind.trim(), arg) {
            ("greedy", None) => Sampler::Greedy,
            ("topk", Some(a)) => Sampler::TopK(parse_arg("topk", a)?),
            ("nucleus", Some(a)) => Sampler::Nucleus(parse_arg("nucleus", a)?),
            _ => return Err(Error::Config(format!("unknown sampler `{s}`"))),
        };
        s.validate()?;
        Ok(s)
    }
}

/// `none`, `oracle`, `confidence:<λ>` or `static:<d>`.
impl std::str::FromStr for ExitPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let (kind, arg) = s.split_once(':').map_or((s, None), |(k, a)| (k, Some(a)));
        Ok(match (kind.trim(), arg) {
            ("none", None) => ExitPolicy::None,
            ("oracle", None) => ExitPolicy::Oracle,
            ("confidence", Some(a)) => {
                let l: f64 = parse_arg("confidence", a)?;
                if !(0.0..=1.0).contains(&l) {
                    return Err(Error::Config(format!("confidence threshold {l} outside [0, 1]")));
                }
                ExitPolicy::Confidence(ThresholdSource::Fixed(l))
            }
            ("static", Some(a)) => ExitPolicy::Static(parse_arg("static", a)?),
            _ => return Err(Error::Config(format!("unknown exit policy `{s}`"))),
        })
    }
}

/// Draws an index with probability proportional to its weight, scanning in
/// the given order.
fn draw<R: Rng + ?Sized>(weights: &[(usize, f64)], rng: &mut R) -> usize {
    let total: f64 = weights.iter().map(|w| w.1).sum();
    let u = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for &(i, w) in weights {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.last().map_or(0, |w| w.0)
}

fn probs(logits: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; logits.len()];
    softmax_row(logits, &mut p);
    p
}

/// Plain sampling from the softmax of `logits`.
pub fn categorical<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> usize {
    let p: Vec<(usize, f64)> = probs(logits).into_iter().enumerate().collect();
    draw(&p, rng)
}

impl Sampler {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Sampler::TopK(0) => Err(Error::Config("top-k sampling needs k >= 1".into())),
            Sampler::Nucleus(p) if !(p > 0.0 && p <= 1.0) => Err(Error::Config(format!("nucleus p {p} outside (0, 1]"))),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, logits: &[f64], rng: &mut R) -> Result<usize> {
        self.validate()?;
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        let p = probs(logits);
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let keep = match *self {
            Sampler::Greedy => return Ok(argmax(logits)),
            Sampler::TopK(k) => k.min(p.len()),
            Sampler::Nucleus(top) => {
                let mut acc = 0.0;
                let mut n = 0;
                while n < order.len() && acc < top {
                    acc += p[order[n]];
                    n += 1;
                }
                n.max(1)
            }
        };
        let mut kept = order[..keep].to_vec();
        kept.sort_unstable();
        let w: Vec<(usize, f64)> = kept.into_iter().map(|i| (i, p[i])).collect();
        Ok(draw(&w, rng))
    }
}

/// An exited token whose deeper stages are not yet computed. `depth` is the
/// number of stages already applied to `hidden`.
#[derive(Clone, Debug, PartialEq)]
pub struct Pending {
    pub position: usize,
    pub hidden: Vec<f64>,
    pub depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub depth: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub steps: usize,
    pub exits: usize,
    /// Row count of every forward past the first stage.
    pub deep_widths: Vec<usize>,
    /// Forced deep forwards because the pending stack hit the cap.
    pub capped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeOutput {
    pub ids: Vec<usize>,
    pub trace: Vec<ExitRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreOutput {
    pub nll: f64,
    pub tokens: usize,
    pub trace: Vec<ExitRecord>,
}

impl ScoreOutput {
    pub fn perplexity(&self) -> f64 {
        (self.nll / self.tokens.max(1) as f64).exp()
    }
}

#[derive(Clone, Copy, Debug)]
enum Decide {
    Never,
    At(usize),
    Above(f64),
}

enum StageInput<'a> {
    Ids(&'a [usize]),
    Hidden(Tensor),
}

struct TokenRun {
    logits: Vec<f64>,
    depth: usize,
    per_depth: Vec<Vec<f64>>,
}

/// Decoding state for one sequence at a time over shared weights.
pub struct DecodeSession<'m> {
    model: &'m Model,
    bank: KvBank,
    policy: ExitPolicy,
    state_copy: bool,
    exit_run_cap: usize,
    pending: Vec<Pending>,
    next_pos: usize,
    sample_id: usize,
    generated: Vec<usize>,
    trace: Vec<ExitRecord>,
    stats: DecodeStats,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m Model, policy: ExitPolicy) -> Result<Self> {
        let spec = model.spec();
        spec.validate()?;
        let n_r = spec.n_recursions;
        match &policy {
            ExitPolicy::None => {}
            _ if model.router.is_some() => {
                return Err(Error::Config("routed models choose their own depth; exit policies need a plain model".into()))
            }
            ExitPolicy::Static(d) if *d == 0 || *d > n_r => {
                return Err(Error::Config(format!("static exit depth {d} outside 1..={n_r}")))
            }
            ExitPolicy::Confidence(ThresholdSource::Fixed(l)) if !(0.0..=1.0).contains(l) => return Err(Error::Domain(*l)),
            _ => {}
        }
        Ok(DecodeSession {
            model,
            bank: KvBank::for_model(spec, model.kv_mode),
            policy,
            state_copy: false,
            exit_run_cap: DEFAULT_EXIT_RUN_CAP,
            pending: Vec::new(),
            next_pos: 0,
            sample_id: 0,
            generated: Vec::new(),
            trace: Vec::new(),
            stats: DecodeStats::default(),
        })
    }

    /// Exited tokens get their deeper keys/values from a copy of their
    /// shallow hidden state instead of waiting on the pending stack.
    pub fn with_state_copy(mut self, on: bool) -> Self {
        self.state_copy = on;
        self
    }

    pub fn with_exit_run_cap(mut self, cap: usize) -> Self {
        self.exit_run_cap = cap;
        self
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn bank(&self) -> &KvBank {
        &self.bank
    }

    pub fn policy(&self) -> &ExitPolicy {
        &self.policy
    }

    pub fn pending(&self) -> &[Pending] {
        &self.pending
    }

    pub fn position(&self) -> usize {
        self.next_pos
    }

    pub fn generated(&self) -> &[usize] {
        &self.generated
    }

    pub fn trace(&self) -> &[ExitRecord] {
        &self.trace
    }

    pub fn stats(&self) -> &DecodeStats {
        &self.stats
    }

    /// Current confidence threshold, if the policy uses one.
    pub fn threshold(&self) -> Option<f64> {
        match &self.policy {
            ExitPolicy::Confidence(ThresholdSource::Fixed(l)) => Some(*l),
            ExitPolicy::Confidence(ThresholdSource::Adaptive(t)) => Some(t.lambda),
            _ => None,
        }
    }

    /// Starts a new sequence. Cache and pending stack are dropped; the trace
    /// and the adaptive threshold carry over.
    pub fn reset(&mut self, sample_id: usize) {
        self.bank = KvBank::for_model(self.model.spec(), self.model.kv_mode);
        self.pending.clear();
        self.next_pos = 0;
        self.sample_id = sample_id;
        self.generated.clear();
    }

    fn check_room(&self, n: usize) -> Result<()> {
        let ctx = self.model.spec().context_len;
        if self.next_pos + n > ctx {
            return Err(Error::Length(format!("{} positions exceed context {ctx}", self.next_pos + n)));
        }
        Ok(())
    }

    fn run_stage(&mut self, r: usize, input: StageInput, pos: &[usize]) -> Result<Tensor> {
        let model = self.model;
        let spec = model.spec();
        let mut g = Graph::new();
        let mut bind = Binder::new(&model.weights.params, false);
        let x = match input {
            StageInput::Ids(ids) => {
                let e = bind.var(&mut g, "embed")?;
                g.embedding(e, ids)?
            }
            StageInput::Hidden(t) => g.constant(t),
        };
        let mut ctx = KvCtx::with_bank(model.kv_mode, &mut self.bank, 0);
        let out = run_layers(&mut g, &mut bind, spec, &spec.stage_layers(r), x, pos, &mut ctx)?;
        if r > 0 {
            self.stats.deep_widths.push(pos.len());
        }
        Ok(g.value(out).clone())
    }

    /// Runs stage `d` over the pending rows at depth `d` plus `current`.
    fn lift(&mut self, d: usize, current: Option<(usize, &Tensor)>) -> Result<Option<Tensor>> {
        let n_r = self.model.spec().n_recursions;
        let idx: Vec<usize> = (0..self.pending.len()).filter(|&i| self.pending[i].depth == d).collect();
        let mut rows: Vec<Vec<f64>> = idx.iter().map(|&i| self.pending[i].hidden.clone()).collect();
        let mut pos: Vec<usize> = idx.iter().map(|&i| self.pending[i].position).collect();
        if let Some((p, h)) = current {
            rows.push(h.row(0).to_vec());
            pos.push(p);
        }
        if rows.is_empty() {
            return Ok(None);
        }
        let out = self.run_stage(d, StageInput::Hidden(Tensor::from_rows(&rows)?), &pos)?;
        for (j, &i) in idx.iter().enumerate() {
            self.pending[i].hidden = out.row(j).to_vec();
            self.pending[i].depth = d + 1;
        }
        self.pending.retain(|q| q.depth < n_r);
        Ok(current.map(|_| Tensor::from_rows(&[out.row(idx.len()).to_vec()])).transpose()?)
    }

    fn check_pending(&self, p: usize) -> Result<()> {
        let consecutive = self.pending.windows(2).all(|w| w[1].position == w[0].position + 1);
        let adjacent = self.pending.last().is_none_or(|q| q.position + 1 == p);
        if !(consecutive && adjacent) {
            let got: Vec<usize> = self.pending.iter().map(|q| q.position).collect();
            return Err(Error::Consistency(format!("pending positions {got:?} before position {p}")));
        }
        Ok(())
    }

    /// Deeper keys/values for an exited token computed from its shallow state.
    fn copy_state(&mut self, h: &Tensor, p: usize, d: usize) -> Result<()> {
        let model = self.model;
        let spec = model.spec();
        let mut g = Graph::new();
        let mut bind = Binder::new(&model.weights.params, false);
        let x = g.constant(h.clone());
        for s in d..spec.n_recursions {
            for ell in spec.stage_layers(s) {
                if !self.bank.writes(ell) {
                    continue;
                }
                let w = bind.var(&mut g, &block_param(spec.layer_index_map(ell)?, "attn_norm"))?;
                let n = g.rmsnorm(x, w)?;
                let (k, v) = layer_kv(&mut g, &mut bind, spec, ell, n, &[p])?;
                self.bank.append_rows(ell, 0, &[p], g.value(k), g.value(v))?;
            }
        }
        Ok(())
    }

    fn run_token(&mut self, id: usize, decide: Decide) -> Result<TokenRun> {
        let model = self.model;
        let n_r = model.spec().n_recursions;
        let p = self.next_pos;
        let may_exit = self.pending.len() < self.exit_run_cap;
        let mut h = self.run_stage(0, StageInput::Ids(&[id]), &[p])?;
        let mut per_depth = Vec::with_capacity(n_r);
        for d in 1..=n_r {
            let logits = intermediate_logits(model, &h)?.row(0).to_vec();
            per_depth.push(logits.clone());
            if d == n_r {
                if !may_exit && !matches!(decide, Decide::Never) {
                    self.stats.capped += 1;
                }
                return Ok(TokenRun { logits, depth: n_r, per_depth });
            }
            let exit = match decide {
                Decide::Never => false,
                Decide::At(e) => e == d,
                Decide::Above(l) => confidence(&logits) > l,
            };
            if exit && may_exit {
                if self.state_copy {
                    self.copy_state(&h, p, d)?;
                } else {
                    self.pending.push(Pending { position: p, hidden: h.row(0).to_vec(), depth: d });
                }
                self.stats.exits += 1;
                return Ok(TokenRun { logits, depth: d, per_depth });
            }
            h = self.lift(d, Some((p, &h)))?.expect("current row");
        }
        unreachable!("loop returns at the final depth")
    }

    /// Feeds one token at the next position and returns its logits under
    /// the exit policy.
    pub fn step(&mut self, id: usize) -> Result<StepOutput> {
        self.check_room(1)?;
        if id >= self.model.spec().vocab {
            return Err(Error::Index(format!("token {id} of vocabulary {}", self.model.spec().vocab)));
        }
        let p = self.next_pos;
        let out = match self.model.router.clone() {
            Some(cfg) => self.step_routed(id, &cfg)?,
            None => self.step_plain(id)?,
        };
        self.next_pos += 1;
        self.stats.steps += 1;
        self.trace.push(ExitRecord { sample_id: self.sample_id, position: p, exit_depth: out.depth, confidence: out.confidence });
        Ok(out)
    }

    fn step_plain(&mut self, id: usize) -> Result<StepOutput> {
        self.check_pending(self.next_pos)?;
        let n_r = self.model.spec().n_recursions;
        let calibrating = matches!(&self.policy, ExitPolicy::Confidence(ThresholdSource::Adaptive(t)) if t.calibrating());
        let decide = match &self.policy {
            ExitPolicy::None | ExitPolicy::Oracle => Decide::Never,
            ExitPolicy::Static(d) => Decide::At(*d),
            ExitPolicy::Confidence(_) if calibrating => Decide::Never,
            ExitPolicy::Confidence(ThresholdSource::Fixed(l)) => Decide::Above(*l),
            ExitPolicy::Confidence(ThresholdSource::Adaptive(t)) => Decide::Above(t.lambda),
        };
        let run = if self.policy == ExitPolicy::Oracle {
            let snapshot = (self.bank.clone(), self.pending.clone(), self.stats.clone());
            let full = self.run_token(id, Decide::Never)?;
            let d = oracle_exit_depth(&full.per_depth);
            if d == n_r || snapshot.1.len() >= self.exit_run_cap {
                full
            } else {
                (self.bank, self.pending, self.stats) = snapshot;
                self.run_token(id, Decide::At(d))?
            }
        } else {
            self.run_token(id, decide)?
        };
        if calibrating {
            if let ExitPolicy::Confidence(ThresholdSource::Adaptive(t)) = &mut self.policy {
                let shallow = &run.per_depth[0];
                let agrees = argmax(shallow) == argmax(&run.logits);
                t.record(confidence(shallow), agrees);
            }
        }
        Ok(StepOutput { confidence: confidence(&run.logits), logits: run.logits, depth: run.depth })
    }

    /// One token through a routed model: the router decides each recursion.
    fn step_routed(&mut self, id: usize, cfg: &RouterConfig) -> Result<StepOutput> {
        let model = self.model;
        let spec = model.spec();
        let pos = [self.next_pos];
        let mut g = Graph::new();
        let mut bind = Binder::new(&model.weights.params, false);
        let mut ctx = KvCtx::with_bank(model.kv_mode, &mut self.bank, 0);
        let e = bind.var(&mut g, "embed")?;
        let mut h = g.embedding(e, &[id])?;
        if let Some(l) = spec.prelude_layer() {
            h = run_layers(&mut g, &mut bind, spec, &[l], h, &pos, &mut ctx)?;
        }
        let mut depth = 0;
        match cfg.kind {
            RouterKind::ExpertChoice => {
                for r in 0..spec.n_recursions {
                    let logits = routing::router_logits(&mut g, &mut bind, cfg, false, r, h)?;
                    let decide = if cfg.aux_mode == AuxMode::AuxRouter {
                        let al = routing::router_logits(&mut g, &mut bind, cfg, true, r, h)?;
                        routing::unit_scores(&mut g, cfg.activation, al)
                    } else {
                        routing::unit_scores(&mut g, cfg.activation, logits)
                    };
                    // The first step keeps every token during training.
                    if r > 0 && !(g.value(decide).item() > 0.5) {
                        break;
                    }
                    let gate = routing::gate(&mut g, cfg.activation, cfg.alpha, logits);
                    let gate = g.reshape(gate, vec![1])?;
                    let layers: Vec<usize> = spec.recursion_layers(r).collect();
                    let f = run_layers(&mut g, &mut bind, spec, &layers, h, &pos, &mut ctx)?;
                    let upd = g.scale_rows(f, gate)?;
                    h = g.add(h, upd)?;
                    depth = r + 1;
                }
            }
            RouterKind::TokenChoice => {
                let logits = routing::router_logits(&mut g, &mut bind, cfg, false, 0, h)?;
                let gates = routing::gate(&mut g, cfg.activation, cfg.alpha, logits);
                let bias = model.weights.params.get(routing::BIAS_STATE).map(|b| b.data().to_vec()).unwrap_or_default();
                let i = routing::token_choice_assign(g.value(gates), &bias)?[0];
                let gi = g.pick(gates, &[i - 1])?;
                let h1 = h;
                for r in 0..i {
                    let layers: Vec<usize> = spec.recursion_layers(r).collect();
                    let f = run_layers(&mut g, &mut bind, spec, &layers, h, &pos, &mut ctx)?;
                    h = g.scale_rows(f, gi)?;
                    if r + 1 == i {
                        h = g.add(h, h1)?;
                    }
                }
                depth = i;
            }
        }
        if let Some(c) = spec.coda_layer() {
            h = run_layers(&mut g, &mut bind, spec, &[c], h, &pos, &mut ctx)?;
        }
        let out = crate::model::forward::head(&mut g, &mut bind, h, model.weights.head_name())?;
        let logits = g.value(out).row(0).to_vec();
        Ok(StepOutput { confidence: confidence(&logits), logits, depth })
    }

    /// Full-depth forward over a prompt; returns the logits of its last token.
    pub fn prefill(&mut self, prompt: &[usize]) -> Result<Vec<f64>> {
        if prompt.is_empty() {
            return Err(Error::Length("empty prompt".into()));
        }
        self.check_room(prompt.len())?;
        if self.model.router.is_some() || !self.pending.is_empty() {
            let mut last = Vec::new();
            for &t in prompt {
                last = self.step(t)?.logits;
                self.trace.pop();
            }
            return Ok(last);
        }
        if let Some(&t) = prompt.iter().find(|&&t| t >= self.model.spec().vocab) {
            return Err(Error::Index(format!("token {t} of vocabulary {}", self.model.spec().vocab)));
        }
        let pos: Vec<usize> = (self.next_pos..self.next_pos + prompt.len()).collect();
        let mut h = self.run_stage(0, StageInput::Ids(prompt), &pos)?;
        for d in 1..self.model.spec().n_recursions {
            h = self.run_stage(d, StageInput::Hidden(h), &pos)?;
        }
        self.next_pos += prompt.len();
        let last = Tensor::from_rows(&[h.row(h.rows() - 1).to_vec()])?;
        Ok(intermediate_logits(self.model, &last)?.row(0).to_vec())
    }

    /// Materializes every pending token through the remaining stages.
    pub fn flush(&mut self) -> Result<()> {
        while let Some(d) = self.pending.iter().map(|q| q.depth).min() {
            self.lift(d, None)?;
        }
        Ok(())
    }

    /// Ends the sequence: flushes the stack and updates an adaptive threshold.
    pub fn finish(&mut self) -> Result<()> {
        self.flush()?;
        if let ExitPolicy::Confidence(ThresholdSource::Adaptive(t)) = &mut self.policy {
            t.end_sequence();
        }
        Ok(())
    }

    /// Generates up to `max_tokens` tokens after `prompt`.
    pub fn decode<R: Rng + ?Sized>(
        &mut self,
        sample_id: usize,
        prompt: &[usize],
        max_tokens: usize,
        sampler: Sampler,
        rng: &mut R,
    ) -> Result<DecodeOutput> {
        sampler.validate()?;
        self.reset(sample_id);
        let ctx = self.model.spec().context_len;
        if prompt.len() + max_tokens.saturating_sub(1) > ctx {
            return Err(Error::Length(format!("prompt {} plus {max_tokens} tokens exceeds context {ctx}", prompt.len())));
        }
        let start = self.trace.len();
        if max_tokens == 0 {
            return Ok(DecodeOutput { ids: Vec::new(), trace: Vec::new() });
        }
        let mut logits = self.prefill(prompt)?;
        loop {
            let t = sampler.sample(&logits, rng)?;
            self.generated.push(t);
            if self.generated.len() == max_tokens {
                break;
            }
            logits = self.step(t)?.logits;
        }
        self.finish()?;
        Ok(DecodeOutput { ids: self.generated.clone(), trace: self.trace[start..].to_vec() })
    }

    /// Teacher-forced negative log-likelihood of `ids[1..]` under the exit policy.
    pub fn score(&mut self, sample_id: usize, ids: &[usize]) -> Result<ScoreOutput> {
        if ids.len() < 2 {
            return Err(Error::Length("scoring needs at least two tokens".into()));
        }
        self.reset(sample_id);
        let start = self.trace.len();
        let mut nll = 0.0;
        for w in ids.windows(2) {
            let out = self.step(w[0])?;
            let lse = crate::tensor::logsumexp_row(&out.logits);
            nll += lse - out.logits[w[1]];
        }
        self.finish()?;
        if !nll.is_finite() {
            return Err(Error::NonFinite("sequence likelihood".into()));
        }
        Ok(ScoreOutput { nll, tokens: ids.len() - 1, trace: self.trace[start..].to_vec() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, ModelWeights, ShareStrategy};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(l: usize, n_r: usize) -> Model {
        Model::new(ModelWeights::init(&ModelSpec::toy(l, n_r, ShareStrategy::Cycle), 3).unwrap())
    }

    #[test]
    fn oracle_depth_rules() {
        assert_eq!(oracle_exit_depth(&[vec![0.0, 1.0], vec![0.0, 2.0]]), 1);
        assert_eq!(oracle_exit_depth(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 2.0]]), 3);
    }

    #[test]
    fn no_exit_matches_plain_logits() {
        let m = model(4, 2);
        let ids = [5, 9, 1, 30, 2];
        let full = m.logits(&ids).unwrap();
        let mut s = DecodeSession::new(&m, ExitPolicy::Confidence(ThresholdSource::Fixed(1.0))).unwrap();
        for (i, &t) in ids.iter().enumerate() {
            let out = s.step(t).unwrap();
            assert_eq!(out.depth, 2);
            let d = out.logits.iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10);
        }
        assert!(s.pending().is_empty());
    }

    #[test]
    fn stacked_exits_flush_in_one_wide_forward() {
        let m = model(4, 2);
        let mut s = DecodeSession::new(&m, ExitPolicy::Static(1)).unwrap();
        s.step(1).unwrap();
        s.step(2).unwrap();
        s.step(3).unwrap();
        assert_eq!(s.pending().len(), 3);
        s.policy = ExitPolicy::None;
        s.step(4).unwrap();
        assert_eq!(s.stats().deep_widths, vec![4]);
        assert!(s.pending().is_empty());
        assert_eq!(s.bank().last_position(2, 0), Some(3));
    }

    #[test]
    fn exit_run_cap_forces_deep_forward() {
        let m = model(4, 2);
        let mut s = DecodeSession::new(&m, ExitPolicy::Static(1)).unwrap().with_exit_run_cap(2);
        let depths: Vec<usize> = (0..5).map(|t| s.step(t).unwrap().depth).collect();
        assert_eq!(depths, vec![1, 1, 2, 1, 1]);
        assert_eq!(s.stats().capped, 1);
        s.finish().unwrap();
        assert!(s.pending().is_empty());
    }

    #[test]
    fn samplers_limits() {
        let logits = [0.1, 2.0, -1.0, 0.7];
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            assert_eq!(Sampler::Nucleus(1.0).sample(&logits, &mut a).unwrap(), categorical(&logits, &mut b));
            assert_eq!(Sampler::TopK(1).sample(&logits, &mut rand::thread_rng()).unwrap(), 1);
        }
        assert!(Sampler::TopK(0).validate().is_err());
        assert!(Sampler::Nucleus(0.0).validate().is_err());
    }

    #[test]
    fn trace_roundtrip() {
        let t = vec![ExitRecord { sample_id: 1, position: 4, exit_depth: 2, confidence: 0.5 }];
        let mut buf = Vec::new();
        write_trace(&mut buf, &t).unwrap();
        assert_eq!(read_trace(buf.as_slice()).unwrap(), t);
    }
}
