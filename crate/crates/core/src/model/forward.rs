use std::collections::BTreeMap;

use super::weights::{block_param, lora_param, ParamStore};
use super::{Model, ModelSpec};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::kvcache::{KvBank, KvMode};
use crate::routing::{self, AuxMode, RouterConfig, RouterKind};
use crate::tensor::Tensor;

/// Binds named tensors into a graph on first use, as trainable parameters
/// or as constants.
pub struct Binder<'p> {
    params: &'p ParamStore,
    trainable: bool,
    bound: BTreeMap<String, Var>,
}

impl<'p> Binder<'p> {
    pub fn new(params: &'p ParamStore, trainable: bool) -> Self {
        Binder { params, trainable, bound: BTreeMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.require(name)?.clone();
        let v = if self.trainable && !name.starts_with("state.") { g.param(t) } else { g.constant(t) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn has(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    /// Gradients of every bound parameter that received one.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter_map(|(n, v)| g.grad(*v).map(|gr| (n.clone(), gr.to_vec())))
            .collect()
    }
}

/// Rotated keys, values and positions produced by one layer.
#[derive(Clone, Debug)]
pub(crate) struct LayerKeys {
    pub k: Var,
    pub v: Var,
    pub positions: Vec<usize>,
}

/// `x·Wᵀ`, plus `x·Aᵀ·Bᵀ` when the layer's use of the block carries a LoRA delta.
pub(crate) fn linear(g: &mut Graph, bind: &mut Binder, spec: &ModelSpec, ell: usize, mat: &str, x: Var) -> Result<Var> {
    let b = spec.layer_index_map(ell)?;
    let w = bind.var(g, &block_param(b, mat))?;
    let base = g.matmul_nt(x, w)?;
    let depth = spec.occurrence(ell)?;
    let (an, bn) = (lora_param(b, mat, "a", depth), lora_param(b, mat, "b", depth));
    if !(bind.has(&an) && bind.has(&bn)) {
        return Ok(base);
    }
    let a = bind.var(g, &an)?;
    let up = bind.var(g, &bn)?;
    let low = g.matmul_nt(x, a)?;
    let delta = g.matmul_nt(low, up)?;
    g.add(base, delta)
}

/// Keys and values for rows of `x` at layer `ell` (keys rotated by position).
pub(crate) fn layer_kv(g: &mut Graph, bind: &mut Binder, spec: &ModelSpec, ell: usize, normed: Var, pos: &[usize]) -> Result<(Var, Var)> {
    let k = linear(g, bind, spec, ell, "wk", normed)?;
    let k = g.rope(k, pos, spec.d_head)?;
    let v = linear(g, bind, spec, ell, "wv", normed)?;
    Ok((k, v))
}

/// Pre-norm block. Keys seen by the queries are `prefix` followed by the
/// rows' own keys when `own_kv` is set.
pub(crate) fn block_forward(
    g: &mut Graph,
    bind: &mut Binder,
    spec: &ModelSpec,
    ell: usize,
    x: Var,
    pos: &[usize],
    prefix: Option<&LayerKeys>,
    own_kv: bool,
) -> Result<(Var, Option<LayerKeys>)> {
    let b = spec.layer_index_map(ell)?;
    let an = bind.var(g, &block_param(b, "attn_norm"))?;
    let n1 = g.rmsnorm(x, an)?;
    let q = linear(g, bind, spec, ell, "wq", n1)?;
    let q = g.rope(q, pos, spec.d_head)?;
    let own = if own_kv {
        let (k, v) = layer_kv(g, bind, spec, ell, n1, pos)?;
        Some(LayerKeys { k, v, positions: pos.to_vec() })
    } else {
        None
    };
    let (k, v, kpos) = match (prefix, &own) {
        (Some(p), Some(o)) if !p.positions.is_empty() => {
            let k = g.concat_rows(&[p.k, o.k])?;
            let v = g.concat_rows(&[p.v, o.v])?;
            (k, v, [p.positions.as_slice(), o.positions.as_slice()].concat())
        }
        (_, Some(o)) => (o.k, o.v, o.positions.clone()),
        (Some(p), None) => (p.k, p.v, p.positions.clone()),
        (None, None) => return Err(Error::Cache(format!("layer {ell} has no keys to attend to"))),
    };
    let att = g.attention(q, k, v, pos, &kpos, spec.heads())?;
    let o = linear(g, bind, spec, ell, "wo", att)?;
    let h = g.add(x, o)?;
    let fnorm = bind.var(g, &block_param(b, "ffn_norm"))?;
    let n2 = g.rmsnorm(h, fnorm)?;
    let gate = linear(g, bind, spec, ell, "w_gate", n2)?;
    let gate = g.silu(gate);
    let up = linear(g, bind, spec, ell, "w_up", n2)?;
    let prod = g.mul(gate, up)?;
    let down = linear(g, bind, spec, ell, "w_down", prod)?;
    Ok((g.add(h, down)?, own))
}

/// Key handling while running layers: the caching mode, keys produced so
/// far in this forward (for sharing), and an optional bank to read a cached
/// prefix from and write new entries to.
pub(crate) struct KvCtx<'b> {
    pub mode: KvMode,
    pub produced: BTreeMap<usize, LayerKeys>,
    pub bank: Option<(&'b mut KvBank, usize)>,
}

impl<'b> KvCtx<'b> {
    pub fn new(mode: KvMode) -> Self {
        KvCtx { mode, produced: BTreeMap::new(), bank: None }
    }

    pub fn with_bank(mode: KvMode, bank: &'b mut KvBank, slot: usize) -> Self {
        KvCtx { mode, produced: BTreeMap::new(), bank: Some((bank, slot)) }
    }
}

fn depth_of(spec: &ModelSpec, ell: usize) -> usize {
    spec.recursion_of_layer(ell).map_or(1, |r| r + 1)
}

pub(crate) fn run_layers(
    g: &mut Graph,
    bind: &mut Binder,
    spec: &ModelSpec,
    layers: &[usize],
    mut x: Var,
    pos: &[usize],
    ctx: &mut KvCtx,
) -> Result<Var> {
    // Cached entries strictly precede the rows of this forward; anything at
    // or after the first row was written by this forward itself.
    // Under sharing with a bank, deep layers read the shared entries up to
    // the last query, since those were written by an earlier layer.
    let first = pos.iter().copied().min().unwrap_or(0);
    let last = pos.iter().copied().max().unwrap_or(0);
    for &ell in layers {
        let deep = depth_of(spec, ell) > 1;
        let src = spec.share_source_layer(ell);
        let shared = deep && ctx.mode == KvMode::RecursiveShare;
        let hybrid = deep && ctx.mode == KvMode::RecursionWiseHybrid;
        let mut parts: Vec<LayerKeys> = Vec::new();
        let upto = if shared { Some(last) } else { first.checked_sub(1) };
        if let (Some((bank, slot)), Some(q)) = (ctx.bank.as_ref(), upto) {
            let c = bank.gather(ell, *slot, q)?;
            if !c.is_empty() {
                let k = g.constant(c.k);
                let v = g.constant(c.v);
                parts.push(LayerKeys { k, v, positions: c.positions });
            }
        }
        if (shared && ctx.bank.is_none()) || hybrid {
            if let Some(s) = ctx.produced.get(&src) {
                let keep: Vec<usize> = (0..s.positions.len())
                    .filter(|&i| !(hybrid && pos.binary_search(&s.positions[i]).is_ok()))
                    .collect();
                if !keep.is_empty() {
                    let k = g.gather_rows(s.k, &keep)?;
                    let v = g.gather_rows(s.v, &keep)?;
                    parts.push(LayerKeys { k, v, positions: keep.iter().map(|&i| s.positions[i]).collect() });
                }
            }
        }
        let prefix = match parts.len() {
            0 => None,
            1 => parts.pop(),
            _ => {
                let ks: Vec<Var> = parts.iter().map(|p| p.k).collect();
                let vs: Vec<Var> = parts.iter().map(|p| p.v).collect();
                let k = g.concat_rows(&ks)?;
                let v = g.concat_rows(&vs)?;
                Some(LayerKeys { k, v, positions: parts.into_iter().flat_map(|p| p.positions).collect() })
            }
        };
        let (out, own) = block_forward(g, bind, spec, ell, x, pos, prefix.as_ref(), !shared)?;
        if let Some(own) = own {
            if let Some((bank, slot)) = ctx.bank.as_mut() {
                if bank.writes(ell) {
                    let (k, v) = (g.value(own.k).clone(), g.value(own.v).clone());
                    bank.append_rows(ell, *slot, &own.positions, &k, &v)?;
                }
            }
            ctx.produced.insert(ell, own);
        }
        x = out;
    }
    Ok(x)
}

/// Final norm and classifier head.
pub(crate) fn head(g: &mut Graph, bind: &mut Binder, h: Var, head_name: &str) -> Result<Var> {
    let fnorm = bind.var(g, "final_norm")?;
    let n = g.rmsnorm(h, fnorm)?;
    let w = bind.var(g, head_name)?;
    g.matmul_nt(n, w)
}

/// How expert-choice picks tokens during a full-sequence forward.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RouteMode {
    /// Top-k by capacity over the whole sequence.
    #[default]
    TopK,
    /// Scores above 0.5, capped at capacity.
    Threshold,
}

/// One expert-choice step: eligible tokens, their (0,1) scores, the chosen
/// tokens and what the inference rule would have chosen.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RouteStep {
    pub eligible: Vec<usize>,
    pub scores: Vec<f64>,
    pub selected: Vec<usize>,
    pub predicted: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Routing {
    /// Recursions applied to each token.
    pub depth: Vec<usize>,
    pub steps: Vec<RouteStep>,
    /// Token-choice gates `[T×N_r]` and raw router logits.
    pub gates: Option<Tensor>,
    pub logits: Option<Tensor>,
}

#[derive(Clone, Debug, Default)]
pub struct RouterLosses {
    pub aux: Option<Var>,
    pub balance: Option<Var>,
    pub z: Option<Var>,
}

impl RouterLosses {
    /// Sum of the present terms, each already scaled by its coefficient.
    pub fn total(&self, g: &mut Graph) -> Result<Option<Var>> {
        let terms: Vec<Var> = [self.aux, self.balance, self.z].into_iter().flatten().collect();
        let mut it = terms.into_iter();
        let Some(mut acc) = it.next() else { return Ok(None) };
        for t in it {
            acc = g.add(acc, t)?;
        }
        Ok(Some(acc))
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Hidden state after each stage (recursion boundary), `N_r` entries.
    pub stage_hidden: Vec<Var>,
    pub routing: Option<Routing>,
    pub losses: RouterLosses,
    /// Output of every unrolled layer, when requested (plain models only).
    pub layer_hidden: Vec<Var>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    pub route: RouteMode,
    /// Overrides the linear capacity schedule for expert-choice.
    pub capacity: Option<Vec<usize>>,
    pub record_layers: bool,
}

/// Full-sequence forward. With a bank, cached entries are used as a prefix
/// and the rows' new entries are appended to `slot`.
pub fn forward(
    g: &mut Graph,
    bind: &mut Binder,
    model: &Model,
    ids: &[usize],
    bank: Option<(&mut KvBank, usize)>,
    opts: &ForwardOptions,
) -> Result<ForwardOutput> {
    let spec = &model.weights.spec;
    spec.validate()?;
    if ids.is_empty() {
        return Err(Error::Length("empty input".into()));
    }
    let start = match &bank {
        Some((b, slot)) => (0..b.n_layers()).filter_map(|l| b.last_position(l, *slot)).max().map_or(0, |p| p + 1),
        None => 0,
    };
    let t = ids.len();
    if start + t > spec.context_len {
        return Err(Error::Length(format!("{} positions exceed context {}", start + t, spec.context_len)));
    }
    let pos: Vec<usize> = (start..start + t).collect();
    let mut ctx = match bank {
        Some((b, slot)) => KvCtx::with_bank(model.kv_mode, b, slot),
        None => KvCtx::new(model.kv_mode),
    };
    if opts.record_layers && model.router.is_some() {
        return Err(Error::Config("per-layer recording needs a model without a router".into()));
    }
    let mut layer_hidden = Vec::new();
    let mut run = |g: &mut Graph, bind: &mut Binder, layers: &[usize], mut h: Var, ctx: &mut KvCtx| -> Result<Var> {
        if !opts.record_layers {
            return run_layers(g, bind, spec, layers, h, &pos, ctx);
        }
        for &ell in layers {
            h = run_layers(g, bind, spec, &[ell], h, &pos, ctx)?;
            layer_hidden.push(h);
        }
        Ok(h)
    };
    let embed = bind.var(g, "embed")?;
    let mut h = g.embedding(embed, ids)?;
    if let Some(p) = spec.prelude_layer() {
        h = run(g, bind, &[p], h, &mut ctx)?;
    }
    let n_r = spec.n_recursions;
    let mut stage_hidden = Vec::with_capacity(n_r);
    let mut losses = RouterLosses::default();
    let routing = match &model.router {
        None => {
            for r in 0..n_r {
                let layers: Vec<usize> = spec.recursion_layers(r).collect();
                h = run(g, bind, &layers, h, &mut ctx)?;
                if r + 1 < n_r {
                    stage_hidden.push(h);
                }
            }
            None
        }
        Some(cfg) if cfg.kind == RouterKind::ExpertChoice => {
            let (out, routing, aux) = expert_choice(g, bind, spec, cfg, h, &pos, &mut ctx, opts, &mut stage_hidden)?;
            h = out;
            losses.aux = aux;
            Some(routing)
        }
        Some(cfg) => {
            let (out, routing, l) = token_choice(g, bind, spec, cfg, h, &pos, &mut ctx, &mut stage_hidden)?;
            h = out;
            losses = l;
            Some(routing)
        }
    };
    if let Some(c) = spec.coda_layer() {
        h = run(g, bind, &[c], h, &mut ctx)?;
    }
    stage_hidden.push(h);
    let logits = head(g, bind, h, model.weights.head_name())?;
    Ok(ForwardOutput { logits, stage_hidden, routing, losses, layer_hidden })
}

fn column(g: &Graph, v: Var) -> Vec<f64> {
    g.value(v).data().to_vec()
}

#[allow(clippy::too_many_arguments)]
fn expert_choice(
    g: &mut Graph,
    bind: &mut Binder,
    spec: &ModelSpec,
    cfg: &RouterConfig,
    mut h: Var,
    pos: &[usize],
    ctx: &mut KvCtx,
    opts: &ForwardOptions,
    stage_hidden: &mut Vec<Var>,
) -> Result<(Var, Routing, Option<Var>)> {
    let t = pos.len();
    let n_r = spec.n_recursions;
    let caps = match &opts.capacity {
        Some(c) if c.len() == n_r => c.clone(),
        Some(c) => return Err(Error::Config(format!("capacity schedule of length {} for {n_r} recursions", c.len()))),
        None => routing::capacity_schedule(n_r, t)?,
    };
    let mut active: Vec<usize> = (0..t).collect();
    let mut steps = Vec::with_capacity(n_r);
    let mut depth = vec![0; t];
    let mut aux_terms = Vec::new();
    for (r, &cap) in caps.iter().enumerate() {
        if active.is_empty() {
            steps.push(RouteStep::default());
            if r + 1 < n_r {
                stage_hidden.push(h);
            }
            continue;
        }
        let h_act = g.gather_rows(h, &active)?;
        let logits = routing::router_logits(g, bind, cfg, false, r, h_act)?;
        let unit = routing::unit_scores(g, cfg.activation, logits);
        let gate = routing::gate(g, cfg.activation, cfg.alpha, logits);
        let scores = column(g, unit);
        let k = cap.min(active.len());
        let chosen = match opts.route {
            RouteMode::TopK => routing::top_k(&scores, k)?,
            RouteMode::Threshold => routing::threshold_select(&scores, k),
        };
        let mask: Vec<f64> = {
            let mut m = vec![0.0; active.len()];
            chosen.iter().for_each(|&i| m[i] = 1.0);
            m
        };
        let predicted = match cfg.aux_mode {
            AuxMode::AuxRouter => {
                let detached = g.detach(h_act);
                let al = routing::router_logits(g, bind, cfg, true, r, detached)?;
                let au = routing::unit_scores(g, cfg.activation, al);
                let p = column(g, au).iter().map(|&s| s > 0.5).collect();
                if cfg.aux_coeff > 0.0 {
                    aux_terms.push(g.bce(au, &mask)?);
                }
                p
            }
            AuxMode::AuxLoss => {
                if cfg.aux_coeff > 0.0 {
                    aux_terms.push(g.bce(unit, &mask)?);
                }
                scores.iter().map(|&s| s > 0.5).collect()
            }
            AuxMode::None => scores.iter().map(|&s| s > 0.5).collect(),
        };
        let sel: Vec<usize> = chosen.iter().map(|&i| active[i]).collect();
        if !sel.is_empty() {
            let hs = g.gather_rows(h, &sel)?;
            let sel_pos: Vec<usize> = sel.iter().map(|&i| pos[i]).collect();
            let layers: Vec<usize> = spec.recursion_layers(r).collect();
            let f = run_layers(g, bind, spec, &layers, hs, &sel_pos, ctx)?;
            let gs = g.gather_rows(gate, &chosen)?;
            let gs = g.reshape(gs, vec![chosen.len()])?;
            let upd = g.scale_rows(f, gs)?;
            h = g.scatter_add_rows(h, upd, &sel)?;
        }
        for &i in &sel {
            depth[i] = r + 1;
        }
        steps.push(RouteStep { eligible: active.clone(), scores, selected: sel.clone(), predicted });
        active = sel;
        if r + 1 < n_r {
            stage_hidden.push(h);
        }
    }
    let aux = if aux_terms.is_empty() {
        None
    } else {
        let n = aux_terms.len() as f64;
        let mut acc = aux_terms[0];
        for &a in &aux_terms[1..] {
            acc = g.add(acc, a)?;
        }
        Some(g.scale(acc, cfg.aux_coeff / n))
    };
    Ok((h, Routing { depth, steps, gates: None, logits: None }, aux))
}

#[allow(clippy::too_many_arguments)]
fn token_choice(
    g: &mut Graph,
    bind: &mut Binder,
    spec: &ModelSpec,
    cfg: &RouterConfig,
    mut h: Var,
    pos: &[usize],
    ctx: &mut KvCtx,
    stage_hidden: &mut Vec<Var>,
) -> Result<(Var, Routing, RouterLosses)> {
    let n_r = spec.n_recursions;
    let h1 = h;
    let logits = routing::router_logits(g, bind, cfg, false, 0, h)?;
    let gates = routing::gate(g, cfg.activation, cfg.alpha, logits);
    let bias = match bind.params().get(routing::BIAS_STATE) {
        Some(b) => b.data().to_vec(),
        None => vec![],
    };
    let assign = routing::token_choice_assign(g.value(gates), &bias)?;
    let mut losses = RouterLosses::default();
    if cfg.balance_mode == routing::BalanceMode::BalanceLoss && cfg.balance_coeff > 0.0 {
        losses.balance = Some(routing::balancing_loss_graph(g, gates, &assign, cfg.balance_coeff)?);
    }
    if cfg.z_coeff > 0.0 {
        let z = routing::z_loss_graph(g, logits)?;
        losses.z = Some(g.scale(z, cfg.z_coeff));
    }
    for r in 0..n_r {
        let active: Vec<usize> = (0..pos.len()).filter(|&i| assign[i] > r).collect();
        if !active.is_empty() {
            let h_act = g.gather_rows(h, &active)?;
            let act_pos: Vec<usize> = active.iter().map(|&i| pos[i]).collect();
            let layers: Vec<usize> = spec.recursion_layers(r).collect();
            let f = run_layers(g, bind, spec, &layers, h_act, &act_pos, ctx)?;
            let ga = g.gather_rows(gates, &active)?;
            let cols: Vec<usize> = active.iter().map(|&i| assign[i] - 1).collect();
            let gsel = g.pick(ga, &cols)?;
            let mut new_rows = g.scale_rows(f, gsel)?;
            let last: Vec<f64> = active.iter().map(|&i| if assign[i] == r + 1 { 1.0 } else { 0.0 }).collect();
            if last.iter().any(|&x| x > 0.0) {
                let base = g.gather_rows(h1, &active)?;
                let m = g.constant(Tensor::vector(last));
                let res = g.scale_rows(base, m)?;
                new_rows = g.add(new_rows, res)?;
            }
            let diff = g.sub(new_rows, h_act)?;
            h = g.scatter_add_rows(h, diff, &active)?;
        }
        if r + 1 < n_r {
            stage_hidden.push(h);
        }
    }
    let routing = Routing {
        depth: assign,
        steps: Vec::new(),
        gates: Some(g.value(gates).clone()),
        logits: Some(g.value(logits).clone()),
    };
    Ok((h, routing, losses))
}

/// Final-norm and shared head applied to a hidden state taken at any
/// recursion boundary.
pub fn intermediate_logits(model: &Model, hidden: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut bind = Binder::new(&model.weights.params, false);
    let h = g.constant(hidden.clone());
    let l = head(&mut g, &mut bind, h, model.weights.head_name())?;
    Ok(g.value(l).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelWeights, ShareStrategy};
    use crate::routing::RouterConfig;

    fn ids(n: usize) -> Vec<usize> {
        (0..n).map(|i| (i * 7 + 3) % 32).collect()
    }

    #[test]
    fn tied_forward_equals_unrolled_copy() {
        for share in [ShareStrategy::Cycle, ShareStrategy::Sequence] {
            let m = Model::new(ModelWeights::init(&ModelSpec::toy(6, 3, share), 4).unwrap());
            let u = Model::new(m.weights.unroll().unwrap());
            assert_eq!(m.logits(&ids(9)).unwrap(), u.logits(&ids(9)).unwrap(), "{share:?}");
        }
    }

    #[test]
    fn final_stage_hidden_gives_forward_logits() {
        let m = Model::new(ModelWeights::init(&ModelSpec::toy(8, 2, ShareStrategy::MiddleCycle), 1).unwrap());
        let (logits, hidden) = m.forward_states(&ids(5)).unwrap();
        assert_eq!(hidden.len(), 2);
        assert_eq!(intermediate_logits(&m, hidden.last().unwrap()).unwrap(), logits);
    }

    #[test]
    fn expert_choice_keeps_capacity_and_nesting() {
        let spec = ModelSpec::toy(6, 3, ShareStrategy::Cycle);
        let m = Model::init(&spec, Some(RouterConfig::expert_choice()), KvMode::RecursionWise, 2).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&m.weights.params, true);
        let out = forward(&mut g, &mut b, &m, &ids(9), None, &ForwardOptions::default()).unwrap();
        let r = out.routing.unwrap();
        let sizes: Vec<usize> = r.steps.iter().map(|s| s.selected.len()).collect();
        assert_eq!(sizes, vec![9, 6, 3]);
        for w in r.steps.windows(2) {
            assert!(w[1].selected.iter().all(|t| w[0].selected.contains(t)));
        }
        assert!(out.losses.aux.is_some());
    }

    #[test]
    fn token_choice_runs_each_token_to_its_depth() {
        let spec = ModelSpec::toy(6, 3, ShareStrategy::Cycle);
        let m = Model::init(&spec, Some(RouterConfig::token_choice()), KvMode::RecursionWise, 5).unwrap();
        let mut g = Graph::new();
        let mut b = Binder::new(&m.weights.params, true);
        let out = forward(&mut g, &mut b, &m, &ids(9), None, &ForwardOptions::default()).unwrap();
        let r = out.routing.unwrap();
        assert!(r.depth.iter().all(|&d| (1..=3).contains(&d)));
        assert!(out.losses.balance.is_some() && out.losses.z.is_some());
        let total = out.losses.total(&mut g).unwrap().unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(b.bound()["router.tc.w"]).is_some());
    }

    #[test]
    fn bank_prefill_then_step_matches_full_forward() {
        let spec = ModelSpec::toy(4, 2, ShareStrategy::Cycle);
        let m = Model::new(ModelWeights::init(&spec, 9).unwrap());
        let seq = ids(6);
        let full = m.logits(&seq).unwrap();
        let mut bank = KvBank::for_model(&spec, KvMode::PerDepth);
        let mut last = None;
        for (i, &t) in seq.iter().enumerate() {
            let mut g = Graph::new();
            let mut b = Binder::new(&m.weights.params, false);
            let out = forward(&mut g, &mut b, &m, &[t], Some((&mut bank, 0)), &ForwardOptions::default()).unwrap();
            let row = g.value(out.logits).row(0).to_vec();
            let diff = row.iter().zip(full.row(i)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(diff <= 1e-10, "position {i}: {diff}");
            last = Some(row);
        }
        assert!(last.is_some());
    }
}
