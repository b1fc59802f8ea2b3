//! Model construction: the sharing map, weight store, forward pass and checkpoints.

pub mod checkpoint;
pub mod forward;
pub mod spec;
pub mod weights;

pub use forward::{forward, intermediate_logits, Binder, ForwardOptions, ForwardOutput, RouteMode, RouteStep, Routing};
pub use spec::{ModelSpec, ShareStrategy};
pub use weights::{ModelWeights, ParamStore};

use crate::error::Result;
use crate::graph::Graph;
use crate::kvcache::KvMode;
use crate::routing::RouterConfig;
use crate::tensor::Tensor;

/// Weights plus the routing and caching choices that shape the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub weights: ModelWeights,
    pub router: Option<RouterConfig>,
    pub kv_mode: KvMode,
}

impl Model {
    pub fn new(weights: ModelWeights) -> Self {
        Model { weights, router: None, kv_mode: KvMode::PerDepth }
    }

    /// Random weights, with router parameters when `router` is given.
    pub fn init(spec: &ModelSpec, router: Option<RouterConfig>, kv_mode: KvMode, seed: u64) -> Result<Self> {
        let mut weights = ModelWeights::init(spec, seed)?;
        if let Some(cfg) = &router {
            crate::routing::init_router(&mut weights.params, cfg, spec.d_model, spec.n_recursions, seed)?;
        }
        Ok(Model { weights, router, kv_mode })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.weights.spec
    }

    /// Inference logits `[T×V]` for a whole sequence.
    pub fn logits(&self, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::new();
        let mut bind = Binder::new(&self.weights.params, false);
        let out = forward(&mut g, &mut bind, self, ids, None, &ForwardOptions::default())?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits and hidden state at every recursion boundary.
    pub fn forward_states(&self, ids: &[usize]) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let mut bind = Binder::new(&self.weights.params, false);
        let out = forward(&mut g, &mut bind, self, ids, None, &ForwardOptions::default())?;
        let hidden = out.stage_hidden.iter().map(|v| g.value(*v).clone()).collect();
        Ok((g.value(out.logits).clone(), hidden))
    }
}
