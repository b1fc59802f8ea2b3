//! Training loop: exit-loss schedules, distillation, router losses and AdamW.

pub mod data;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{ByteTokenizer, Corpus};
pub use loss::{exit_loss, kd_dyna_loss, kd_dyna_map, ExitMode, KdMode, LossSchedule};
pub use optim::{AdamWConfig, LrSchedule, OptimState};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::forward::head;
use crate::model::{forward, Binder, ForwardOptions, Model, ModelSpec, Routing};
use crate::routing::{self, BalanceMode, RouteRecord, RouterConfig, RouterKind, RouterMetrics};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Input tokens per sequence; each sample holds one more for the targets.
    pub seq_len: usize,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub optim: AdamWConfig,
    pub loss: LossSchedule,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 200,
            batch_size: 8,
            seq_len: 32,
            lr: 3e-3,
            lr_schedule: LrSchedule::default(),
            optim: AdamWConfig::default(),
            loss: LossSchedule::single(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ModelSpec, router: Option<&RouterConfig>) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::Config("steps, batch_size and seq_len must be positive".into()));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.seq_len > spec.context_len {
            return Err(Error::Config(format!("seq_len {} exceeds context {}", self.seq_len, spec.context_len)));
        }
        self.lr_schedule.validate()?;
        self.optim.validate()?;
        validate_schedule(spec, router, &self.loss)?;
        if let Some(r) = router {
            if r.kind == RouterKind::ExpertChoice {
                routing::capacity_schedule(spec.n_recursions, self.seq_len)?;
            }
        }
        Ok(())
    }
}

fn validate_schedule(spec: &ModelSpec, router: Option<&RouterConfig>, schedule: &LossSchedule) -> Result<()> {
    schedule.validate()?;
    if router.is_some() && (schedule.mode != ExitMode::Single || schedule.kd != KdMode::None) {
        return Err(Error::Config("routed models train on the final output only (single mode, no kd)".into()));
    }
    if schedule.kd == KdMode::LayerwiseDyna {
        let (shallow, deep) = dyna_split(spec)?;
        if shallow == 0 || shallow > deep {
            return Err(Error::Config(format!("layerwise kd maps {shallow} shallow layers onto {deep} deeper layers")));
        }
    }
    Ok(())
}

/// Layers in the first stage and layers after it.
fn dyna_split(spec: &ModelSpec) -> Result<(usize, usize)> {
    if spec.n_recursions < 2 {
        return Err(Error::Config("layerwise kd needs at least two recursions".into()));
    }
    let shallow = spec.prelude_layer().map_or(0, |_| 1) + spec.recursion_layers(0).count();
    Ok((shallow, spec.n_layers - shallow))
}

/// Loss terms of one sequence or the mean over a batch. `total` is the sum
/// of the others.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub aux: f64,
    pub balance: f64,
    pub z: f64,
}

impl LossParts {
    fn add_scaled(&mut self, o: &LossParts, s: f64) {
        self.total += s * o.total;
        self.ce += s * o.ce;
        self.kd += s * o.kd;
        self.aux += s * o.aux;
        self.balance += s * o.balance;
        self.z += s * o.z;
    }
}

pub struct SequenceResult {
    pub parts: LossParts,
    pub grads: BTreeMap<String, Vec<f64>>,
    pub routing: Option<Routing>,
}

fn sum_vars(g: &mut Graph, vars: &[Var]) -> Result<Option<Var>> {
    let mut it = vars.iter().copied();
    let Some(mut acc) = it.next() else { return Ok(None) };
    for v in it {
        acc = g.add(acc, v)?;
    }
    Ok(Some(acc))
}

/// Total loss of one sequence (`seq[..n-1]` predicting `seq[1..]`) and its
/// gradient with respect to every trainable parameter.
pub fn loss_and_gradients(model: &Model, seq: &[usize], schedule: &LossSchedule) -> Result<SequenceResult> {
    if seq.len() < 2 {
        return Err(Error::Length("training sequence needs at least two tokens".into()));
    }
    validate_schedule(model.spec(), model.router.as_ref(), schedule)?;
    let (input, targets) = (&seq[..seq.len() - 1], &seq[1..]);
    let mut g = Graph::new();
    let mut bind = Binder::new(&model.weights.params, true);
    let opts = ForwardOptions { record_layers: schedule.kd == KdMode::LayerwiseDyna, ..Default::default() };
    let out = forward(&mut g, &mut bind, model, input, None, &opts)?;
    let n = out.stage_hidden.len();
    let coeffs = schedule.coefficients(n)?;
    let mut logits = Vec::with_capacity(n);
    for (i, &h) in out.stage_hidden.iter().enumerate() {
        let wanted = coeffs[i] > 0.0 || schedule.kd == KdMode::ForwardKl;
        logits.push(if i + 1 == n {
            out.logits
        } else if wanted {
            head(&mut g, &mut bind, h, model.weights.head_name())?
        } else {
            // Unused intermediate: a zero-weight placeholder that is skipped.
            out.logits
        });
    }
    let (ce, mut kd) = exit_loss(&mut g, &logits, targets, schedule)?;
    if schedule.kd == KdMode::LayerwiseDyna && schedule.kd_coeff > 0.0 {
        let (shallow, _) = dyna_split(model.spec())?;
        let (l, _) = kd_dyna_loss(&mut g, &out.layer_hidden[..shallow], &out.layer_hidden[shallow..])?;
        kd = Some(g.scale(l, schedule.kd_coeff));
    }
    let terms: Vec<Var> = [Some(ce), kd, out.losses.aux, out.losses.balance, out.losses.z].into_iter().flatten().collect();
    let total = sum_vars(&mut g, &terms)?.expect("cross-entropy term");
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let parts = LossParts {
        total: g.value(total).item(),
        ce: g.value(ce).item(),
        kd: val(kd),
        aux: val(out.losses.aux),
        balance: val(out.losses.balance),
        z: val(out.losses.z),
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {parts:?}")));
    }
    g.backward(total)?;
    Ok(SequenceResult { parts, grads: bind.gradients(&g), routing: out.routing })
}

/// Trace records of one routed forward plus, per record, the decision the
/// inference rule would have made.
pub fn route_records(sample_id: usize, routing: &Routing) -> (Vec<RouteRecord>, Vec<bool>) {
    let mut recs = Vec::new();
    let mut inference = Vec::new();
    if let Some(gates) = &routing.gates {
        for (t, &d) in routing.depth.iter().enumerate() {
            recs.push(RouteRecord { sample_id, token_index: t, step: d - 1, score: gates.at(t, d - 1), selected: true, depth: d });
            inference.push(true);
        }
        return (recs, inference);
    }
    for (r, step) in routing.steps.iter().enumerate() {
        for (k, &t) in step.eligible.iter().enumerate() {
            recs.push(RouteRecord {
                sample_id,
                token_index: t,
                step: r,
                score: step.scores[k],
                selected: step.selected.contains(&t),
                depth: routing.depth[t],
            });
            inference.push(step.predicted[k]);
        }
    }
    (recs, inference)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
    pub grad_norm: f64,
    pub router: Option<RouterMetrics>,
}

pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optim: OptimState,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate(model.spec(), model.router.as_ref())?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Trainer { model, config, optim: OptimState::default(), rng })
    }

    pub fn step(&self) -> usize {
        self.optim.step
    }

    /// One optimizer update from the mean gradient of `batch`.
    pub fn train_step(&mut self, batch: &[Vec<usize>]) -> Result<StepMetrics> {
        if batch.is_empty() {
            return Err(Error::Length("empty batch".into()));
        }
        let step = self.optim.step;
        let scale = 1.0 / batch.len() as f64;
        let mut parts = LossParts::default();
        let mut grads: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut records = Vec::new();
        let mut inference = Vec::new();
        let mut counts = vec![0usize; self.model.spec().n_recursions];
        for (b, seq) in batch.iter().enumerate() {
            let res = loss_and_gradients(&self.model, seq, &self.config.loss).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("step {step}, sequence {b}: {m}")),
                e => e,
            })?;
            parts.add_scaled(&res.parts, scale);
            for (name, gr) in res.grads {
                let acc = grads.entry(name).or_insert_with(|| vec![0.0; gr.len()]);
                acc.iter_mut().zip(&gr).for_each(|(a, x)| *a += scale * x);
            }
            if let Some(r) = &res.routing {
                let (rec, inf) = route_records(b, r);
                records.extend(rec);
                inference.extend(inf);
                for &d in &r.depth {
                    if d >= 1 {
                        counts[d - 1] += 1;
                    }
                }
            }
        }
        let lr = self.config.lr_schedule.lr_at(self.config.lr, step, self.config.steps);
        let grad_norm = self.optim.step(&self.config.optim, &mut self.model.weights.params, &grads, lr)?;
        if let Some(cfg) = &self.model.router {
            if cfg.kind == RouterKind::TokenChoice && cfg.balance_mode == BalanceMode::LossFree {
                if let Some(bias) = self.model.weights.params.get_mut(routing::BIAS_STATE) {
                    let next = routing::loss_free_update(&counts, bias.data(), cfg.bias_update_rate)?;
                    bias.data_mut().copy_from_slice(&next);
                }
            }
        }
        let router = if records.is_empty() {
            None
        } else {
            Some(routing::router_metrics(&records, self.model.spec().n_recursions, Some(&inference))?)
        };
        Ok(StepMetrics { step, lr, loss: parts, grad_norm, router })
    }

    /// Draws `batch_size` samples of `seq_len + 1` tokens.
    pub fn next_batch(&mut self, corpus: &Corpus) -> Vec<Vec<usize>> {
        corpus.batch(&mut self.rng, self.config.batch_size, self.config.seq_len + 1)
    }

    /// Runs the remaining steps, handing each step's metrics to `on_step`.
    pub fn fit<F>(&mut self, corpus: &Corpus, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        corpus.validate()?;
        if self.model.spec().vocab < data::VOCAB {
            return Err(Error::Config(format!("vocab {} is smaller than the byte vocabulary {}", self.model.spec().vocab, data::VOCAB)));
        }
        while self.optim.step < self.config.steps {
            let batch = self.next_batch(corpus);
            let m = self.train_step(&batch)?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}

/// Router behaviour on held-out sequences: metrics plus the pooled scores of
/// selected and unselected tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterEval {
    pub metrics: RouterMetrics,
    pub selected: Vec<f64>,
    pub unselected: Vec<f64>,
    pub overlap: f64,
}

pub const OVERLAP_BINS: usize = 20;

pub fn evaluate_router(model: &Model, sequences: &[Vec<usize>]) -> Result<RouterEval> {
    if model.router.is_none() {
        return Err(Error::Config("router evaluation needs a routed model".into()));
    }
    let mut records = Vec::new();
    let mut inference = Vec::new();
    for (b, seq) in sequences.iter().enumerate() {
        let mut g = Graph::new();
        let mut bind = Binder::new(&model.weights.params, false);
        let out = forward(&mut g, &mut bind, model, seq, None, &ForwardOptions::default())?;
        let (rec, inf) = route_records(b, out.routing.as_ref().expect("routed forward"));
        records.extend(rec);
        inference.extend(inf);
    }
    let metrics = routing::router_metrics(&records, model.spec().n_recursions, Some(&inference))?;
    let (sel, unsel): (Vec<&RouteRecord>, Vec<&RouteRecord>) = records.iter().partition(|r| r.selected);
    let selected: Vec<f64> = sel.iter().map(|r| r.score).collect();
    let unselected: Vec<f64> = unsel.iter().map(|r| r.score).collect();
    let overlap = if unselected.is_empty() { 0.0 } else { routing::histogram_overlap(&selected, &unselected, OVERLAP_BINS)? };
    Ok(RouterEval { metrics, selected, unselected, overlap })
}
