//! Analytic parameter, FLOPs and KV-cache accounting. Linear layers cost two
//! FLOPs per parameter per token; attention counts the query-key products
//! and value weighting over the causal lower triangle; norms and
//! activations are free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KvMode;
use crate::model::weights::block_linears;
use crate::model::{ModelSpec, ShareStrategy};
use crate::routing::RouterKind;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBreakdown {
    pub embedding: usize,
    /// Stored (unique) non-embedding parameters.
    pub non_embedding: usize,
    /// Non-embedding parameters applied per token when unrolled.
    pub non_embedding_unrolled: usize,
    pub per_block: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embedding + self.non_embedding
    }
}

fn block_linear_params(spec: &ModelSpec) -> usize {
    block_linears(spec).iter().map(|(_, o, i)| o * i).sum()
}

pub fn count_params(spec: &ModelSpec) -> Result<ParamBreakdown> {
    spec.validate()?;
    let per_block = block_linear_params(spec) + 2 * spec.d_model;
    let heads = if spec.tie_embeddings { 1 } else { 2 };
    Ok(ParamBreakdown {
        embedding: heads * spec.vocab * spec.d_model,
        non_embedding: spec.n_unique_blocks() * per_block + spec.d_model,
        non_embedding_unrolled: spec.n_layers * per_block + spec.d_model,
        per_block,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsOptions {
    /// Fraction of tokens active at each recursion; defaults to all tokens
    /// for plain models and to the linear schedule for routed ones.
    pub capacity: Option<Vec<f64>>,
    pub router: Option<RouterKind>,
    pub kv_mode: KvMode,
    pub include_router: bool,
    pub include_head: bool,
    /// Uniform LoRA rank on the shared layers; zero for none.
    pub lora_rank: usize,
}

impl Default for FlopsOptions {
    fn default() -> Self {
        FlopsOptions { capacity: None, router: None, kv_mode: KvMode::PerDepth, include_router: true, include_head: false, lora_rank: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub linear: f64,
    pub attention: f64,
    pub router: f64,
    pub lora: f64,
    pub head: f64,
    pub total: f64,
    /// Tokens processed at each recursion.
    pub effective_lengths: Vec<usize>,
    pub seq_len: usize,
}

impl FlopsBreakdown {
    pub fn per_token(&self) -> f64 {
        self.total / self.seq_len as f64
    }

    /// Forward FLOPs for `tokens` training tokens.
    pub fn for_tokens(&self, tokens: f64) -> f64 {
        self.per_token() * tokens
    }
}

/// Active tokens per recursion.
pub fn effective_lengths(spec: &ModelSpec, seq_len: usize, capacity: Option<&[f64]>, routed: bool) -> Result<Vec<usize>> {
    let n_r = spec.n_recursions;
    match capacity {
        Some(c) => {
            if c.len() != n_r {
                return Err(Error::Config(format!("capacity of length {} for {n_r} recursions", c.len())));
            }
            if let Some(f) = c.iter().find(|f| !(0.0..=1.0).contains(*f)) {
                return Err(Error::Domain(*f));
            }
            Ok(c.iter().map(|f| (f * seq_len as f64).floor() as usize).collect())
        }
        None if routed => crate::routing::capacity_schedule(n_r, seq_len),
        None => Ok(vec![seq_len; n_r]),
    }
}

/// Causal query-key pairs for `q` queries against `keys` keys. Queries over
/// their own keys use the triangle; queries spread over a longer key set see
/// half of it on average.
fn causal_pairs(q: usize, keys: usize) -> f64 {
    if q == keys {
        (q * (q + 1)) as f64 / 2.0
    } else {
        q as f64 * (keys + 1) as f64 / 2.0
    }
}

pub fn forward_flops(spec: &ModelSpec, seq_len: usize, opts: &FlopsOptions) -> Result<FlopsBreakdown> {
    spec.validate()?;
    if seq_len == 0 {
        return Err(Error::Length("zero sequence length".into()));
    }
    let lens = effective_lengths(spec, seq_len, opts.capacity.as_deref(), opts.router.is_some())?;
    let linears = block_linears(spec);
    let full: usize = linears.iter().map(|(_, o, i)| o * i).sum();
    let kv_proj: usize = linears.iter().filter(|(n, _, _)| *n == "wk" || *n == "wv").map(|(_, o, i)| o * i).sum();
    let lora_per_token: usize = linears.iter().map(|(_, o, i)| opts.lora_rank * (o + i)).sum();
    let attn_width = spec.q_width() as f64;
    let shared_blocks = spec.share != ShareStrategy::None;
    let (mut linear, mut attention, mut lora) = (0.0, 0.0, 0.0);
    for ell in 0..spec.n_layers {
        let (tokens, deep) = match spec.recursion_of_layer(ell) {
            Some(r) => (lens[r], r > 0),
            None => (seq_len, false),
        };
        let shares_kv = deep && opts.kv_mode == KvMode::RecursiveShare;
        let params = if shares_kv { full - kv_proj } else { full };
        linear += 2.0 * params as f64 * tokens as f64;
        let keys = match opts.kv_mode {
            KvMode::RecursiveShare | KvMode::RecursionWiseHybrid if deep => seq_len,
            _ => tokens,
        };
        // Scores and value weighting, two FLOPs per multiply-add each.
        attention += 4.0 * attn_width * causal_pairs(tokens, keys);
        if shared_blocks && spec.recursion_of_layer(ell).is_some() {
            lora += 2.0 * lora_per_token as f64 * tokens as f64;
        }
    }
    let router = match (opts.router, opts.include_router) {
        (Some(RouterKind::ExpertChoice), true) => {
            // Step r scores the tokens still eligible after step r-1.
            let eligible: usize = (0..lens.len()).map(|r| if r == 0 { seq_len } else { lens[r - 1] }).sum();
            2.0 * spec.d_model as f64 * eligible as f64
        }
        (Some(RouterKind::TokenChoice), true) => 2.0 * (spec.d_model * spec.n_recursions) as f64 * seq_len as f64,
        _ => 0.0,
    };
    let head = if opts.include_head { 2.0 * (spec.d_model * spec.vocab) as f64 * seq_len as f64 } else { 0.0 };
    Ok(FlopsBreakdown {
        linear,
        attention,
        router,
        lora,
        head,
        total: linear + attention + router + lora + head,
        effective_lengths: lens,
        seq_len,
    })
}

/// Cached entries per layer for one sequence under `mode`.
pub fn kv_entries(spec: &ModelSpec, seq_len: usize, mode: KvMode, capacity: Option<&[f64]>, routed: bool) -> Result<Vec<usize>> {
    spec.validate()?;
    let lens = effective_lengths(spec, seq_len, capacity, routed)?;
    Ok((0..spec.n_layers)
        .map(|ell| match spec.recursion_of_layer(ell) {
            None => seq_len,
            Some(r) => match mode {
                KvMode::PerDepth => seq_len,
                KvMode::RecursionWise | KvMode::RecursionWiseHybrid => lens[r],
                KvMode::RecursiveShare if r == 0 => seq_len,
                KvMode::RecursiveShare => 0,
            },
        })
        .collect())
}

/// `2 · n_kv_heads · d_head · Σ entries · bytes` for one sequence.
pub fn kv_bytes(spec: &ModelSpec, seq_len: usize, mode: KvMode, capacity: Option<&[f64]>, routed: bool, bytes_per_element: usize) -> Result<usize> {
    let entries: usize = kv_entries(spec, seq_len, mode, capacity, routed)?.iter().sum();
    Ok(2 * spec.kv_width() * entries * bytes_per_element)
}

/// Sequences that fit in `budget` bytes next to the weights.
pub fn max_batch(budget: usize, param_bytes: usize, kv_bytes_per_sequence: usize) -> usize {
    if kv_bytes_per_sequence == 0 {
        return usize::MAX;
    }
    budget.saturating_sub(param_bytes) / kv_bytes_per_sequence
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostBreakdown {
    pub params: ParamBreakdown,
    pub flops: FlopsBreakdown,
    pub flops_per_token: f64,
    pub kv_bytes: usize,
    pub kv_bytes_per_token: f64,
}

pub fn cost_breakdown(spec: &ModelSpec, seq_len: usize, opts: &FlopsOptions, bytes_per_element: usize) -> Result<CostBreakdown> {
    let params = count_params(spec)?;
    let flops = forward_flops(spec, seq_len, opts)?;
    let kv = kv_bytes(spec, seq_len, opts.kv_mode, opts.capacity.as_deref(), opts.router.is_some(), bytes_per_element)?;
    Ok(CostBreakdown {
        params,
        flops_per_token: flops.per_token(),
        flops,
        kv_bytes: kv,
        kv_bytes_per_token: kv as f64 / seq_len as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_is_two_flops_per_parameter() {
        let mut s = ModelSpec::toy(1, 1, ShareStrategy::None);
        s.context_len = 8;
        let f = forward_flops(&s, 1, &FlopsOptions::default()).unwrap();
        assert_eq!(f.linear, 2.0 * block_linear_params(&s) as f64);
        // One query, one key: q·k and the weighted value per head width.
        assert_eq!(f.attention, 4.0 * s.q_width() as f64);
    }

    #[test]
    fn vanilla_360m_non_embedding() {
        let p = count_params(&ModelSpec::smollm_360m()).unwrap();
        assert!((p.non_embedding as f64 / 315e6 - 1.0).abs() < 0.02);
    }

    #[test]
    fn recursion_wise_memory_ratio() {
        for n_r in [2, 3, 4] {
            let s = ModelSpec { n_layers: 12, n_recursions: n_r, share: ShareStrategy::Cycle, context_len: 4096, ..ModelSpec::toy(12, n_r, ShareStrategy::Cycle) };
            let v = kv_bytes(&s, 2048, KvMode::PerDepth, None, false, 2).unwrap() as f64;
            let rw = kv_bytes(&s, 2048, KvMode::RecursionWise, None, true, 2).unwrap() as f64;
            let sh = kv_bytes(&s, 2048, KvMode::RecursiveShare, None, true, 2).unwrap() as f64;
            let want = (n_r + 1) as f64 / (2 * n_r) as f64;
            assert!((rw / v - want).abs() < 1e-3, "{n_r}: {}", rw / v);
            assert!((sh / v - 1.0 / n_r as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn routed_360m_flops_ratio() {
        let v = forward_flops(&ModelSpec::smollm_360m(), 2048, &FlopsOptions::default()).unwrap();
        let opts = FlopsOptions { router: Some(RouterKind::ExpertChoice), kv_mode: KvMode::RecursionWise, ..Default::default() };
        let m = forward_flops(&ModelSpec::routed_360m(2), 2048, &opts).unwrap();
        let ratio = m.total / v.total;
        assert!((ratio / (12.3 / 16.5) - 1.0).abs() < 0.05, "{ratio}");
    }
}
