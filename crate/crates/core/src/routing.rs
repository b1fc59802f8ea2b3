//! Recursion routers: expert-choice top-k selection per recursion step and
//! token-choice top-1 assignment of a recursion count, with their auxiliary
//! losses, bias balancing and load metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::weights::ParamStore;
use crate::model::Binder;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    ExpertChoice,
    TokenChoice,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterArch {
    Linear,
    Mlp,
    WideMlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxMode {
    AuxLoss,
    AuxRouter,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMode {
    BalanceLoss,
    LossFree,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    pub kind: RouterKind,
    pub activation: Activation,
    pub arch: RouterArch,
    pub alpha: f64,
    pub aux_mode: AuxMode,
    pub balance_mode: BalanceMode,
    pub aux_coeff: f64,
    pub balance_coeff: f64,
    pub z_coeff: f64,
    pub bias_update_rate: f64,
}

impl RouterConfig {
    pub fn expert_choice() -> Self {
        RouterConfig {
            kind: RouterKind::ExpertChoice,
            activation: Activation::Sigmoid,
            arch: RouterArch::Linear,
            alpha: 0.1,
            aux_mode: AuxMode::AuxLoss,
            balance_mode: BalanceMode::None,
            aux_coeff: 0.001,
            balance_coeff: 0.0,
            z_coeff: 0.0,
            bias_update_rate: 0.0,
        }
    }

    pub fn token_choice() -> Self {
        RouterConfig {
            kind: RouterKind::TokenChoice,
            activation: Activation::Softmax,
            arch: RouterArch::Linear,
            alpha: 1.0,
            aux_mode: AuxMode::None,
            balance_mode: BalanceMode::BalanceLoss,
            aux_coeff: 0.0,
            balance_coeff: 0.1,
            z_coeff: 1e-3,
            bias_update_rate: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        match self.kind {
            RouterKind::ExpertChoice => {
                if self.activation == Activation::Softmax {
                    return bad("expert-choice scores one value per token; use sigmoid or tanh");
                }
                if self.balance_mode != BalanceMode::None {
                    return bad("expert-choice is balanced by construction; balance_mode must be none");
                }
            }
            RouterKind::TokenChoice => {
                if self.activation == Activation::Tanh {
                    return bad("token-choice gates need softmax or sigmoid");
                }
                if self.aux_mode != AuxMode::None {
                    return bad("token-choice has no top-k leakage; aux_mode must be none");
                }
            }
        }
        for (n, v) in [
            ("alpha", self.alpha),
            ("aux_coeff", self.aux_coeff),
            ("balance_coeff", self.balance_coeff),
            ("z_coeff", self.z_coeff),
            ("bias_update_rate", self.bias_update_rate),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{n} must be finite and non-negative, got {v}")));
            }
        }
        if self.balance_mode == BalanceMode::LossFree && self.bias_update_rate <= 0.0 {
            return bad("loss-free balancing needs bias_update_rate > 0");
        }
        Ok(())
    }
}

pub const BIAS_STATE: &str = "state.router_bias";

fn router_prefix(kind: RouterKind, aux: bool, r: usize) -> String {
    match (kind, aux) {
        (RouterKind::TokenChoice, _) => "router.tc".to_string(),
        (_, false) => format!("router.{r}"),
        (_, true) => format!("router_aux.{r}"),
    }
}

fn init_mlp(params: &mut ParamStore, prefix: &str, arch: RouterArch, d: usize, out: usize, rng: &mut ChaCha8Rng) {
    let std = 1.0 / (d as f64).sqrt();
    match arch {
        RouterArch::Linear => params.insert(format!("{prefix}.w"), Tensor::randn(&[out, d], std, rng)),
        RouterArch::Mlp | RouterArch::WideMlp => {
            let h = if arch == RouterArch::Mlp { d } else { 4 * d };
            params.insert(format!("{prefix}.w1"), Tensor::randn(&[h, d], std, rng));
            params.insert(format!("{prefix}.w2"), Tensor::randn(&[out, h], 1.0 / (h as f64).sqrt(), rng));
        }
    }
}

/// Adds router parameters (and the balancing bias state) for `n_r` recursions.
pub fn init_router(params: &mut ParamStore, cfg: &RouterConfig, d_model: usize, n_r: usize, seed: u64) -> Result<()> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_a11);
    match cfg.kind {
        RouterKind::ExpertChoice => {
            for r in 0..n_r {
                init_mlp(params, &router_prefix(cfg.kind, false, r), cfg.arch, d_model, 1, &mut rng);
                if cfg.aux_mode == AuxMode::AuxRouter {
                    init_mlp(params, &router_prefix(cfg.kind, true, r), cfg.arch, d_model, 1, &mut rng);
                }
            }
        }
        RouterKind::TokenChoice => {
            init_mlp(params, &router_prefix(cfg.kind, false, 0), cfg.arch, d_model, n_r, &mut rng);
            params.insert(BIAS_STATE, Tensor::zeros(&[n_r]));
        }
    }
    Ok(())
}

/// Router pre-activation logits for the rows of `h`: `[T×1]` for
/// expert-choice step `r`, `[T×N_r]` for token-choice.
pub(crate) fn router_logits(g: &mut Graph, bind: &mut Binder, cfg: &RouterConfig, aux: bool, r: usize, h: Var) -> Result<Var> {
    let prefix = router_prefix(cfg.kind, aux, r);
    match cfg.arch {
        RouterArch::Linear => {
            let w = bind.var(g, &format!("{prefix}.w"))?;
            g.matmul_nt(h, w)
        }
        RouterArch::Mlp | RouterArch::WideMlp => {
            let w1 = bind.var(g, &format!("{prefix}.w1"))?;
            let w2 = bind.var(g, &format!("{prefix}.w2"))?;
            let z = g.matmul_nt(h, w1)?;
            let a = g.gelu(z);
            g.matmul_nt(a, w2)
        }
    }
}

/// Activation output mapped into (0,1): the quantity the auxiliary BCE
/// trains and the 0.5 inference threshold compares against.
pub(crate) fn unit_scores(g: &mut Graph, act: Activation, logits: Var) -> Var {
    match act {
        Activation::Sigmoid => g.sigmoid(logits),
        Activation::Softmax => g.softmax(logits),
        Activation::Tanh => {
            let t = g.tanh(logits);
            let s = g.scale(t, 0.5);
            let half = g.constant(Tensor::filled(g.value(s).shape(), 0.5));
            g.add(s, half).expect("same shape")
        }
    }
}

/// Raw activation output scaled by α: the gate multiplying block outputs.
pub(crate) fn gate(g: &mut Graph, act: Activation, alpha: f64, logits: Var) -> Var {
    let a = match act {
        Activation::Sigmoid => g.sigmoid(logits),
        Activation::Softmax => g.softmax(logits),
        Activation::Tanh => g.tanh(logits),
    };
    g.scale(a, alpha)
}

/// Number of tokens each recursion step keeps: `floor(T(N_r - r + 1)/N_r)`.
pub fn capacity_schedule(n_r: usize, t: usize) -> Result<Vec<usize>> {
    if n_r == 0 || t < n_r {
        return Err(Error::Capacity { requested: n_r, available: t });
    }
    Ok((1..=n_r).map(|r| t * (n_r - r + 1) / n_r).collect())
}

/// Indices of the `k` highest scores, ties to the lower index, returned in
/// ascending index order.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::Capacity { requested: k, available: scores.len() });
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    Ok(idx)
}

pub fn expert_choice_select(scores: &[f64], k: usize) -> Result<Vec<bool>> {
    let mut mask = vec![false; scores.len()];
    for i in top_k(scores, k)? {
        mask[i] = true;
    }
    Ok(mask)
}

/// Inference-time selection: scores above 0.5, trimmed to the top `k` when
/// more than `k` qualify.
pub fn threshold_select(scores: &[f64], k: usize) -> Vec<usize> {
    let over: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.5).collect();
    if over.len() <= k {
        return over;
    }
    let sub: Vec<f64> = over.iter().map(|&i| scores[i]).collect();
    top_k(&sub, k).expect("k < len").into_iter().map(|j| over[j]).collect()
}

/// Recursion count (1-based) per token: `argmax_j (g_tj + b_j)`. The bias
/// only steers the choice; gate values are read from `g` unchanged.
pub fn token_choice_assign(g: &Tensor, bias: &[f64]) -> Result<Vec<usize>> {
    let n = g.cols();
    if !bias.is_empty() && bias.len() != n {
        return Err(Error::Dimension(format!("{} biases for {n} experts", bias.len())));
    }
    Ok((0..g.rows())
        .map(|t| {
            let row: Vec<f64> = g.row(t).iter().enumerate().map(|(j, v)| v + bias.get(j).unwrap_or(&0.0)).collect();
            tensor::argmax(&row) + 1
        })
        .collect())
}

const BCE_CLIP: f64 = 1e-7;

pub fn aux_bce_loss(scores: &[f64], mask: &[bool]) -> Result<f64> {
    if scores.len() != mask.len() || scores.is_empty() {
        return Err(Error::Dimension(format!("{} scores, {} mask entries", scores.len(), mask.len())));
    }
    let s: f64 = scores
        .iter()
        .zip(mask)
        .map(|(p, &m)| {
            let p = p.clamp(BCE_CLIP, 1.0 - BCE_CLIP);
            if m {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(s / scores.len() as f64)
}

/// Fraction `f_i = (N_r/T)·count_i` of tokens per expert.
pub fn load_fractions(assign: &[usize], n_r: usize) -> Vec<f64> {
    let t = assign.len().max(1) as f64;
    let mut f = vec![0.0; n_r];
    for &a in assign {
        f[a - 1] += n_r as f64 / t;
    }
    f
}

/// `coeff · Σ_i f_i P_i` with `P_i` the mean gate of expert `i`.
pub fn balancing_loss(g: &Tensor, assign: &[usize], coeff: f64) -> Result<f64> {
    let (t, n) = g.dims2()?;
    if assign.len() != t {
        return Err(Error::Dimension(format!("{} assignments for {t} tokens", assign.len())));
    }
    let f = load_fractions(assign, n);
    let mut s = 0.0;
    for (i, fi) in f.iter().enumerate() {
        let p: f64 = (0..t).map(|r| g.at(r, i)).sum::<f64>() / t as f64;
        s += fi * p;
    }
    Ok(coeff * s)
}

pub(crate) fn balancing_loss_graph(g: &mut Graph, gates: Var, assign: &[usize], coeff: f64) -> Result<Var> {
    let (t, n) = g.value(gates).dims2()?;
    let f = load_fractions(assign, n);
    let mut w = Vec::with_capacity(t * n);
    for _ in 0..t {
        w.extend(f.iter().map(|fi| coeff * fi / t as f64));
    }
    let w = g.constant(Tensor::new(vec![t, n], w)?);
    let prod = g.mul(gates, w)?;
    Ok(g.sum(prod))
}

pub fn z_loss(logits: &Tensor) -> f64 {
    let b = logits.rows();
    (0..b).map(|i| tensor::logsumexp_row(logits.row(i)).powi(2)).sum::<f64>() / b as f64
}

pub(crate) fn z_loss_graph(g: &mut Graph, logits: Var) -> Result<Var> {
    let lse = g.logsumexp_rows(logits);
    let sq = g.mul(lse, lse)?;
    Ok(g.mean(sq))
}

/// `b_i += u · sign(mean(c) - c_i)`, with `sign(0) = 0`.
pub fn loss_free_update(counts: &[usize], biases: &[f64], u: f64) -> Result<Vec<f64>> {
    if counts.len() != biases.len() {
        return Err(Error::Dimension(format!("{} counts for {} biases", counts.len(), biases.len())));
    }
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    Ok(biases
        .iter()
        .zip(counts)
        .map(|(b, &c)| {
            let e = mean - c as f64;
            let s = if e > 0.0 {
                1.0
            } else if e < 0.0 {
                -1.0
            } else {
                0.0
            };
            b + u * s
        })
        .collect())
}

/// `(max_i load_i - mean) / mean`.
pub fn max_violation(loads: &[usize]) -> Result<f64> {
    if loads.is_empty() {
        return Err(Error::Metric("no experts".into()));
    }
    let mean = loads.iter().sum::<usize>() as f64 / loads.len() as f64;
    if mean == 0.0 {
        return Err(Error::Metric("zero total load".into()));
    }
    let max = *loads.iter().max().expect("non-empty") as f64;
    Ok((max - mean) / mean)
}

/// Shared mass of the normalised histograms of two score sets over
/// `[0, 1]`: `Σ_b min(p_b, q_b)`. Zero means perfect separation.
pub fn histogram_overlap(a: &[f64], b: &[f64], bins: usize) -> Result<f64> {
    if a.is_empty() || b.is_empty() || bins == 0 {
        return Err(Error::Metric("overlap needs two non-empty score sets".into()));
    }
    let hist = |xs: &[f64]| -> Result<Vec<f64>> {
        let mut h = vec![0.0; bins];
        for &x in xs {
            if !(0.0..=1.0).contains(&x) {
                return Err(Error::Domain(x));
            }
            h[((x * bins as f64) as usize).min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        Ok(h)
    };
    let (ha, hb) = (hist(a)?, hist(b)?);
    Ok(ha.iter().zip(&hb).map(|(p, q)| p.min(*q)).sum())
}

/// `-Σ p ln p` of the expert-usage distribution.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|x| x * x.ln()).sum::<f64>()
}

/// One routing decision, as written to trace files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouteRecord {
    pub sample_id: usize,
    pub token_index: usize,
    pub step: usize,
    pub score: f64,
    pub selected: bool,
    pub depth: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RouterMetrics {
    pub dead_token_ratio: f64,
    pub maxvio: f64,
    pub entropy: f64,
    pub sampling_accuracy: f64,
}

/// Metrics over traces of one evaluation. `inference_selected`, when given,
/// holds per record the inference-time decision to compare against the
/// training top-k flag.
pub fn router_metrics(records: &[RouteRecord], n_r: usize, inference_selected: Option<&[bool]>) -> Result<RouterMetrics> {
    if records.is_empty() || n_r == 0 {
        return Err(Error::Metric("empty trace".into()));
    }
    let mut depth = std::collections::BTreeMap::new();
    for r in records {
        let d: &mut usize = depth.entry((r.sample_id, r.token_index)).or_insert(0);
        *d = (*d).max(r.depth);
    }
    let positions = depth.len();
    // A position is dead when no sample carries it through the final step.
    let mut reached = std::collections::BTreeMap::new();
    for (&(_, t), &d) in &depth {
        *reached.entry(t).or_insert(false) |= d >= n_r;
    }
    let dead = reached.values().filter(|&&r| !r).count() as f64 / reached.len() as f64;
    let mut loads = vec![0usize; n_r];
    for &d in depth.values() {
        if d >= 1 {
            loads[d.min(n_r) - 1] += 1;
        }
    }
    let p: Vec<f64> = loads.iter().map(|&c| c as f64 / positions as f64).collect();
    let sampling_accuracy = match inference_selected {
        Some(inf) => {
            if inf.len() != records.len() {
                return Err(Error::Metric("inference decisions do not align with trace".into()));
            }
            records.iter().zip(inf).filter(|(r, &i)| r.selected == i).count() as f64 / records.len() as f64
        }
        None => 1.0,
    };
    Ok(RouterMetrics {
        dead_token_ratio: dead,
        maxvio: max_violation(&loads).unwrap_or(0.0),
        entropy: entropy(&p),
        sampling_accuracy,
    })
}
