//! Discrete-event simulation of batched serving: batch-at-a-time, continuous
//! sequence-wise refill, and continuous depth-wise batching where tokens at
//! different recursion depths share a tick.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::decode::ExitRecord;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Vanilla,
    Csb,
    Cdb,
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vanilla" => Ok(Strategy::Vanilla),
            "csb" => Ok(Strategy::Csb),
            "cdb" => Ok(Strategy::Cdb),
            _ => Err(Error::Config(format!("unknown strategy `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: usize,
    pub arrival: f64,
    pub tokens: usize,
    /// Exit depth of each token; empty means every token runs all stages.
    #[serde(default)]
    pub exits: Vec<usize>,
}

impl Request {
    pub fn new(id: usize, arrival: f64, tokens: usize) -> Self {
        Request { id, arrival, tokens, exits: Vec::new() }
    }

    fn exit_at(&self, token: usize, n_stages: usize) -> usize {
        self.exits.get(token).copied().unwrap_or(n_stages)
    }
}

/// Tick cost by batch width. `stage[w - 1]` is the cost of a stage tick of
/// width `w` (the last entry covers wider ticks); empty means unit cost.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostTable {
    #[serde(default)]
    pub stage: Vec<f64>,
    /// Cost of one batched head pass over accumulated early-exited tokens.
    #[serde(default)]
    pub residual: f64,
    /// Extra cost per stage tick for cache updates, charged when enabled.
    #[serde(default)]
    pub kv_update: f64,
    #[serde(default)]
    pub include_kv_update: bool,
}

impl CostTable {
    pub fn unit() -> Self {
        CostTable::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage.iter().chain([&self.residual, &self.kv_update]).any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::Config("cost table entries must be finite and non-negative".into()));
        }
        if self.stage.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config("stage costs must not decrease with width".into()));
        }
        Ok(())
    }

    pub fn stage_cost(&self, width: usize) -> f64 {
        let base = match self.stage.len() {
            0 => 1.0,
            n => self.stage[width.clamp(1, n) - 1],
        };
        base + if self.include_kv_update { self.kv_update } else { 0.0 }
    }
}

/// One unit of work: stage `stage` (1-based) of token `token` of a request.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub request: usize,
    pub token: usize,
    pub stage: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub start: f64,
    pub end: f64,
    /// Occupied slots (stage ticks) or exited tokens served (residual ticks).
    pub width: usize,
    pub residual: bool,
    pub work: Vec<Work>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub request: usize,
    pub arrival: f64,
    pub start: f64,
    pub finish: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub strategy: Strategy,
    pub max_batch: usize,
    pub n_stages: usize,
    pub ticks: Vec<Tick>,
    pub completions: Vec<Completion>,
}

impl Timeline {
    fn new(strategy: Strategy, max_batch: usize, n_stages: usize) -> Self {
        Timeline { strategy, max_batch, n_stages, ticks: Vec::new(), completions: Vec::new() }
    }

    pub fn finish(&self) -> f64 {
        self.ticks.last().map_or(0.0, |t| t.end)
    }

    pub fn tokens(&self) -> usize {
        self.completions.iter().map(|c| c.tokens).sum()
    }

    fn tick(&mut self, start: f64, cost: f64, width: usize, residual: bool, work: Vec<Work>) -> f64 {
        self.ticks.push(Tick { start, end: start + cost, width, residual, work });
        start + cost
    }

    /// Writes ticks then completions as tagged line-delimited records.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        #[derive(Serialize)]
        #[serde(tag = "type", rename_all = "snake_case")]
        enum Line<'a> {
            Tick(&'a Tick),
            Completion(&'a Completion),
        }
        let json = |l: Line| serde_json::to_string(&l).map_err(|e| Error::Parse(e.to_string()));
        for t in &self.ticks {
            writeln!(w, "{}", json(Line::Tick(t))?)?;
        }
        for c in &self.completions {
            writeln!(w, "{}", json(Line::Completion(c))?)?;
        }
        Ok(())
    }
}

fn check_inputs(requests: &[Request], max_batch: usize, n_stages: usize, cost: &CostTable) -> Result<()> {
    cost.validate()?;
    if max_batch == 0 || n_stages == 0 {
        return Err(Error::Config("batch size and stage count must be positive".into()));
    }
    for r in requests {
        if r.tokens == 0 {
            return Err(Error::Config(format!("request {} generates no tokens", r.id)));
        }
        if !(r.arrival.is_finite() && r.arrival >= 0.0) {
            return Err(Error::Config(format!("request {} arrival {}", r.id, r.arrival)));
        }
        if !r.exits.is_empty() && r.exits.len() != r.tokens {
            return Err(Error::Replay(format!("request {} has {} exit depths for {} tokens", r.id, r.exits.len(), r.tokens)));
        }
        if let Some(d) = r.exits.iter().find(|&&d| d == 0 || d > n_stages) {
            return Err(Error::Replay(format!("request {} exit depth {d} outside 1..={n_stages}", r.id)));
        }
    }
    Ok(())
}

/// FIFO arrival queue ordered by arrival then id.
struct Queue<'a> {
    pending: VecDeque<&'a Request>,
}

impl<'a> Queue<'a> {
    fn new(requests: &'a [Request]) -> Self {
        let mut v: Vec<&Request> = requests.iter().collect();
        v.sort_by(|a, b| a.arrival.total_cmp(&b.arrival).then(a.id.cmp(&b.id)));
        Queue { pending: v.into() }
    }

    fn pop_arrived(&mut self, t: f64) -> Option<&'a Request> {
        if self.pending.front().is_some_and(|r| r.arrival <= t) {
            self.pending.pop_front()
        } else {
            None
        }
    }

    fn next_arrival(&self) -> Option<f64> {
        self.pending.front().map(|r| r.arrival)
    }

    fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

/// Batch-at-a-time: a batch runs every stage of every decoding step until
/// its longest request finishes; only then is the next batch formed.
pub fn schedule_vanilla(requests: &[Request], max_batch: usize, n_stages: usize, cost: &CostTable) -> Result<Timeline> {
    check_inputs(requests, max_batch, n_stages, cost)?;
    let mut tl = Timeline::new(Strategy::Vanilla, max_batch, n_stages);
    let mut q = Queue::new(requests);
    let mut t = 0.0;
    while !q.is_empty() {
        t = f64::max(t, q.next_arrival().expect("non-empty"));
        let mut batch = Vec::new();
        while batch.len() < max_batch {
            match q.pop_arrived(t) {
                Some(r) => batch.push(r),
                None => break,
            }
        }
        let start = t;
        let steps = batch.iter().map(|r| r.tokens).max().unwrap_or(0);
        for s in 0..steps {
            let active: Vec<&Request> = batch.iter().copied().filter(|r| r.tokens > s).collect();
            for stage in 1..=n_stages {
                let work = active.iter().map(|r| Work { request: r.id, token: s, stage }).collect();
                t = tl.tick(t, cost.stage_cost(active.len()), active.len(), false, work);
            }
            for r in active.iter().filter(|r| r.tokens == s + 1) {
                tl.completions.push(Completion { request: r.id, arrival: r.arrival, start, finish: t, tokens: r.tokens });
            }
        }
    }
    Ok(tl)
}

#[derive(Clone, Copy)]
struct Slot<'a> {
    req: &'a Request,
    token: usize,
    stage: usize,
    start: f64,
}

fn refill<'a>(slots: &mut [Option<Slot<'a>>], q: &mut Queue<'a>, t: f64) {
    for s in slots.iter_mut().filter(|s| s.is_none()) {
        match q.pop_arrived(t) {
            Some(req) => *s = Some(Slot { req, token: 0, stage: 0, start: t }),
            None => break,
        }
    }
}

/// Continuous sequence-wise batching: slots march through the stages in
/// lockstep; finished sequences are replaced between decoding steps.
pub fn schedule_csb(requests: &[Request], max_batch: usize, n_stages: usize, cost: &CostTable) -> Result<Timeline> {
    check_inputs(requests, max_batch, n_stages, cost)?;
    let mut tl = Timeline::new(Strategy::Csb, max_batch, n_stages);
    let mut q = Queue::new(requests);
    let mut slots: Vec<Option<Slot>> = vec![None; max_batch];
    let mut t = 0.0;
    loop {
        refill(&mut slots, &mut q, t);
        let occupied: Vec<usize> = (0..max_batch).filter(|&i| slots[i].is_some()).collect();
        if occupied.is_empty() {
            match q.next_arrival() {
                Some(a) => {
                    t = f64::max(t, a);
                    continue;
                }
                None => break,
            }
        }
        for stage in 1..=n_stages {
            let work = occupied
                .iter()
                .map(|&i| {
                    let s = slots[i].expect("occupied");
                    Work { request: s.req.id, token: s.token, stage }
                })
                .collect();
            t = tl.tick(t, cost.stage_cost(occupied.len()), occupied.len(), false, work);
        }
        for &i in &occupied {
            let s = slots[i].as_mut().expect("occupied");
            s.token += 1;
            if s.token == s.req.tokens {
                tl.completions.push(Completion { request: s.req.id, arrival: s.req.arrival, start: s.start, finish: t, tokens: s.req.tokens });
                slots[i] = None;
            }
        }
    }
    Ok(tl)
}

/// Continuous depth-wise batching: each tick applies the shared stage to
/// every occupied slot whatever its depth. A token leaves at its exit depth
/// and its request's next token starts at stage 1; finished requests vacate
/// and the slot refills FIFO at the next tick.
pub fn schedule_cdb(requests: &[Request], max_batch: usize, n_stages: usize, cost: &CostTable) -> Result<Timeline> {
    check_inputs(requests, max_batch, n_stages, cost)?;
    let mut tl = Timeline::new(Strategy::Cdb, max_batch, n_stages);
    let mut q = Queue::new(requests);
    let mut slots: Vec<Option<Slot>> = vec![None; max_batch];
    let mut t = 0.0;
    let mut exited = 0;
    loop {
        refill(&mut slots, &mut q, t);
        let occupied: Vec<usize> = (0..max_batch).filter(|&i| slots[i].is_some()).collect();
        if occupied.is_empty() {
            match q.next_arrival() {
                Some(a) => {
                    t = f64::max(t, a);
                    continue;
                }
                None => break,
            }
        }
        let work = occupied
            .iter()
            .map(|&i| {
                let s = slots[i].expect("occupied");
                Work { request: s.req.id, token: s.token, stage: s.stage + 1 }
            })
            .collect();
        t = tl.tick(t, cost.stage_cost(occupied.len()), occupied.len(), false, work);
        for &i in &occupied {
            let s = slots[i].as_mut().expect("occupied");
            s.stage += 1;
            let exit = s.req.exit_at(s.token, n_stages);
            if s.stage < exit {
                continue;
            }
            if exit < n_stages {
                exited += 1;
            }
            s.token += 1;
            s.stage = 0;
            if s.token == s.req.tokens {
                tl.completions.push(Completion { request: s.req.id, arrival: s.req.arrival, start: s.start, finish: t, tokens: s.req.tokens });
                slots[i] = None;
            }
        }
        if cost.residual > 0.0 && exited >= max_batch {
            t = tl.tick(t, cost.residual, max_batch, true, Vec::new());
            exited -= max_batch;
        }
    }
    if cost.residual > 0.0 && exited > 0 {
        tl.tick(t, cost.residual, exited, true, Vec::new());
    }
    Ok(tl)
}

pub fn schedule(strategy: Strategy, requests: &[Request], max_batch: usize, n_stages: usize, cost: &CostTable) -> Result<Timeline> {
    match strategy {
        Strategy::Vanilla => schedule_vanilla(requests, max_batch, n_stages, cost),
        Strategy::Csb => schedule_csb(requests, max_batch, n_stages, cost),
        Strategy::Cdb => schedule_cdb(requests, max_batch, n_stages, cost),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub strategy: Strategy,
    pub tokens: usize,
    pub finish: f64,
    pub tokens_per_tick: f64,
    pub mean_latency: f64,
    pub p95_latency: f64,
    pub utilization: f64,
}

pub fn throughput_report(tl: &Timeline) -> ThroughputReport {
    let finish = tl.finish();
    let tokens = tl.tokens();
    let mut lat: Vec<f64> = tl.completions.iter().map(|c| c.finish - c.arrival).collect();
    lat.sort_by(f64::total_cmp);
    let mean_latency = if lat.is_empty() { 0.0 } else { lat.iter().sum::<f64>() / lat.len() as f64 };
    // Nearest-rank percentile.
    let p95_latency = match lat.len() {
        0 => 0.0,
        n => lat[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1],
    };
    let stage_ticks = tl.ticks.iter().filter(|t| !t.residual);
    let (used, total) = stage_ticks.fold((0.0, 0.0), |(u, a), t| {
        let d = t.end - t.start;
        (u + t.width as f64 * d, a + tl.max_batch as f64 * d)
    });
    ThroughputReport {
        strategy: tl.strategy,
        tokens,
        finish,
        tokens_per_tick: if finish > 0.0 { tokens as f64 / finish } else { 0.0 },
        mean_latency,
        p95_latency,
        utilization: if total > 0.0 { used / total } else { 0.0 },
    }
}

/// Sets each request's exit depths from a decode trace: records of the
/// matching `sample_id` in position order, one per generated token.
pub fn attach_trace(requests: &mut [Request], trace: &[ExitRecord], n_stages: usize) -> Result<()> {
    let mut by_sample: BTreeMap<usize, Vec<&ExitRecord>> = BTreeMap::new();
    for r in trace {
        by_sample.entry(r.sample_id).or_default().push(r);
    }
    for req in requests.iter_mut() {
        let Some(recs) = by_sample.get_mut(&req.id) else {
            return Err(Error::Replay(format!("no trace records for request {}", req.id)));
        };
        recs.sort_by_key(|r| r.position);
        if recs.len() < req.tokens {
            return Err(Error::Replay(format!("request {} needs {} tokens, trace has {}", req.id, req.tokens, recs.len())));
        }
        let exits: Vec<usize> = recs[..req.tokens].iter().map(|r| r.exit_depth).collect();
        if let Some(d) = exits.iter().find(|&&d| d == 0 || d > n_stages) {
            return Err(Error::Replay(format!("request {} exit depth {d} outside 1..={n_stages}", req.id)));
        }
        req.exits = exits;
    }
    Ok(())
}

/// One request per traced sample, all arriving at time zero, with one
/// token per record.
pub fn requests_from_trace(trace: &[ExitRecord], n_stages: usize) -> Result<Vec<Request>> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for r in trace {
        *counts.entry(r.sample_id).or_default() += 1;
    }
    let mut out: Vec<Request> = counts.into_iter().map(|(id, n)| Request::new(id, 0.0, n)).collect();
    attach_trace(&mut out, trace, n_stages)?;
    Ok(out)
}

/// A block of identical requests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Group {
    pub count: usize,
    #[serde(default)]
    pub arrival: f64,
    #[serde(default = "one")]
    pub tokens: usize,
    /// Exit depth for every token of the group; all stages when absent.
    #[serde(default)]
    pub exit_depth: Option<usize>,
}

fn one() -> usize {
    1
}

/// Random workload: token counts from a rounded normal (at least one),
/// arrivals all at once or from a Poisson process, and exit depths drawn
/// from `exit_probs` (probability of exiting at depth 1, 2, ...).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generate {
    pub requests: usize,
    pub seed: u64,
    pub mean_tokens: f64,
    #[serde(default)]
    pub std_tokens: f64,
    /// Arrivals per tick; zero queues everything at tick 0.
    #[serde(default)]
    pub arrival_rate: f64,
    #[serde(default)]
    pub exit_probs: Vec<f64>,
}

impl Generate {
    pub fn build(&self, n_stages: usize, first_id: usize) -> Result<Vec<Request>> {
        if self.mean_tokens < 1.0 || self.std_tokens < 0.0 || self.arrival_rate < 0.0 {
            return Err(Error::Config("generator needs mean_tokens >= 1 and non-negative spread and rate".into()));
        }
        if !self.exit_probs.is_empty() && self.exit_probs.len() != n_stages {
            return Err(Error::Config(format!("{} exit probabilities for {n_stages} stages", self.exit_probs.len())));
        }
        let total: f64 = self.exit_probs.iter().sum();
        if !self.exit_probs.is_empty() && (self.exit_probs.iter().any(|p| *p < 0.0) || total <= 0.0) {
            return Err(Error::Config("exit probabilities must be non-negative with a positive sum".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let len = Normal::new(self.mean_tokens, self.std_tokens).map_err(|e| Error::Config(e.to_string()))?;
        let gap = (self.arrival_rate > 0.0).then(|| Exp::new(self.arrival_rate)).transpose().map_err(|e| Error::Config(e.to_string()))?;
        let mut t = 0.0;
        let mut out = Vec::with_capacity(self.requests);
        for i in 0..self.requests {
            if let Some(e) = &gap {
                t += e.sample(&mut rng);
            }
            let tokens = (len.sample(&mut rng).round() as i64).max(1) as usize;
            let exits = if self.exit_probs.is_empty() {
                Vec::new()
            } else {
                (0..tokens)
                    .map(|_| {
                        let u = rng.gen::<f64>() * total;
                        let mut acc = 0.0;
                        for (d, p) in self.exit_probs.iter().enumerate() {
                            acc += p;
                            if u < acc {
                                return d + 1;
                            }
                        }
                        n_stages
                    })
                    .collect()
            };
            out.push(Request { id: first_id + i, arrival: t, tokens, exits });
        }
        Ok(out)
    }
}

/// Scenario file contents. Requests come from explicit entries, groups and
/// an optional generator, in that order of id assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub max_batch: usize,
    pub n_stages: usize,
    #[serde(default = "all_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub cost: CostTable,
    #[serde(default)]
    pub requests: Vec<Request>,
    #[serde(default)]
    pub groups: Vec<Group>,
    #[serde(default)]
    pub generate: Option<Generate>,
    /// Decode trace (line-delimited exit records) supplying exit depths.
    #[serde(default)]
    pub trace: Option<String>,
}

fn all_strategies() -> Vec<Strategy> {
    vec![Strategy::Vanilla, Strategy::Csb, Strategy::Cdb]
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Loads a scenario; a relative trace path resolves against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut s = Scenario::parse(&std::fs::read_to_string(path)?)?;
        if let (Some(t), Some(dir)) = (&s.trace, path.parent()) {
            s.trace = Some(dir.join(t).to_string_lossy().into_owned());
        }
        Ok(s)
    }

    pub fn build_requests(&self) -> Result<Vec<Request>> {
        let mut out = self.requests.clone();
        let mut next = out.iter().map(|r| r.id + 1).max().unwrap_or(0);
        for g in &self.groups {
            if let Some(d) = g.exit_depth {
                if d == 0 || d > self.n_stages {
                    return Err(Error::Config(format!("group exit depth {d} outside 1..={}", self.n_stages)));
                }
            }
            for _ in 0..g.count {
                let exits = g.exit_depth.map_or_else(Vec::new, |d| vec![d; g.tokens]);
                out.push(Request { id: next, arrival: g.arrival, tokens: g.tokens, exits });
                next += 1;
            }
        }
        if let Some(gen) = &self.generate {
            out.extend(gen.build(self.n_stages, next)?);
        }
        if let Some(path) = &self.trace {
            let f = std::fs::File::open(path)?;
            let trace = crate::decode::read_trace(std::io::BufReader::new(f))?;
            attach_trace(&mut out, &trace, self.n_stages)?;
        }
        let mut ids: Vec<usize> = out.iter().map(|r| r.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("duplicate request ids".into()));
        }
        Ok(out)
    }

    pub fn run(&self) -> Result<Vec<Timeline>> {
        let reqs = self.build_requests()?;
        self.strategies.iter().map(|&s| schedule(s, &reqs, self.max_batch, self.n_stages, &self.cost)).collect()
    }
}
