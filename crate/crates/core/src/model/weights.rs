use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::spec::ModelSpec;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named tensors; iteration order is the lexical name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Index(format!("missing tensor `{name}`")))
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn n_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn n_values_with_prefix(&self, prefix: &str) -> usize {
        self.tensors.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, t)| t.len()).sum()
    }
}

/// Linear projections of one block, as `(suffix, out_dim, in_dim)`.
pub fn block_linears(spec: &ModelSpec) -> [(&'static str, usize, usize); 7] {
    let d = spec.d_model;
    [
        ("wq", spec.q_width(), d),
        ("wk", spec.kv_width(), d),
        ("wv", spec.kv_width(), d),
        ("wo", d, spec.q_width()),
        ("w_gate", spec.d_inter, d),
        ("w_up", spec.d_inter, d),
        ("w_down", d, spec.d_inter),
    ]
}

pub const BLOCK_NORMS: [&str; 2] = ["attn_norm", "ffn_norm"];

pub fn block_param(block: usize, suffix: &str) -> String {
    format!("block.{block}.{suffix}")
}

/// Name of a depth-wise LoRA factor (`part` is `a` or `b`) for the
/// `depth`-th use of `block`'s matrix `mat`.
pub fn lora_param(block: usize, mat: &str, part: &str, depth: usize) -> String {
    format!("lora.block.{block}.{mat}.{part}.depth{depth}")
}

/// Embedding, unique blocks, final norm and (optionally untied) classifier head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub spec: ModelSpec,
    pub params: ParamStore,
}

impl ModelWeights {
    /// Random init: linears ~ N(0, 1/fan_in), output projections further
    /// scaled by 1/sqrt(2L), embedding ~ N(0, 1/d), norms at one.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = spec.d_model;
        let mut params = ParamStore::new();
        params.insert("embed", Tensor::randn(&[spec.vocab, d], 1.0 / (d as f64).sqrt(), &mut rng));
        let out_scale = 1.0 / (2.0 * spec.n_layers as f64).sqrt();
        for b in 0..spec.n_unique_blocks() {
            for (name, out, inp) in block_linears(spec) {
                let mut std = 1.0 / (inp as f64).sqrt();
                if name == "wo" || name == "w_down" {
                    std *= out_scale;
                }
                params.insert(block_param(b, name), Tensor::randn(&[out, inp], std, &mut rng));
            }
            for n in BLOCK_NORMS {
                params.insert(block_param(b, n), Tensor::filled(&[d], 1.0));
            }
        }
        params.insert("final_norm", Tensor::filled(&[d], 1.0));
        if !spec.tie_embeddings {
            params.insert("head", Tensor::randn(&[spec.vocab, d], 1.0 / (d as f64).sqrt(), &mut rng));
        }
        Ok(ModelWeights { spec: spec.clone(), params })
    }

    pub fn head_name(&self) -> &'static str {
        if self.spec.tie_embeddings {
            "embed"
        } else {
            "head"
        }
    }

    /// Checks that every block referenced by the sharing map resolves.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let mut needed = vec!["embed".to_string(), "final_norm".to_string()];
        if !self.spec.tie_embeddings {
            needed.push("head".into());
        }
        for b in self.spec.unrolled()? {
            for (n, _, _) in block_linears(&self.spec) {
                needed.push(block_param(b, n));
            }
            for n in BLOCK_NORMS {
                needed.push(block_param(b, n));
            }
        }
        for n in needed {
            self.params.require(&n)?;
        }
        Ok(())
    }

    pub fn n_unique_blocks_stored(&self) -> usize {
        (0..).take_while(|b| self.params.contains(&block_param(*b, "wq"))).count()
    }

    /// Builds an untied (`None` strategy) copy with every unrolled layer's
    /// weights copied from the block it maps to, LoRA deltas merged in.
    pub fn unroll(&self) -> Result<ModelWeights> {
        let mut spec = self.spec.clone();
        spec.share = crate::model::ShareStrategy::None;
        let mut params = ParamStore::new();
        for (k, v) in self.params.iter() {
            if !k.starts_with("block.") && !k.starts_with("lora.") {
                params.insert(k.clone(), v.clone());
            }
        }
        for (ell, b) in self.spec.unrolled()?.into_iter().enumerate() {
            let depth = self.spec.occurrence(ell)?;
            for (n, _, _) in block_linears(&self.spec) {
                let mut w = self.params.require(&block_param(b, n))?.clone();
                if let (Some(a), Some(up)) = (
                    self.params.get(&lora_param(b, n, "a", depth)),
                    self.params.get(&lora_param(b, n, "b", depth)),
                ) {
                    let delta = up.matmul(a)?;
                    w.data_mut().iter_mut().zip(delta.data()).for_each(|(x, d)| *x += d);
                }
                params.insert(block_param(ell, n), w);
            }
            for n in BLOCK_NORMS {
                params.insert(block_param(ell, n), self.params.require(&block_param(b, n))?.clone());
            }
        }
        Ok(ModelWeights { spec, params })
    }

    /// Parameters of all unique blocks, excluding embedding/head/final norm and LoRA.
    pub fn n_block_params(&self) -> usize {
        self.params.n_values_with_prefix("block.")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ShareStrategy;

    #[test]
    fn unique_block_counts_follow_sharing() {
        let none = ModelWeights::init(&ModelSpec::toy(6, 3, ShareStrategy::None), 0).unwrap();
        let cyc = ModelWeights::init(&ModelSpec::toy(6, 3, ShareStrategy::Cycle), 0).unwrap();
        let mid = ModelWeights::init(&ModelSpec::toy(8, 3, ShareStrategy::MiddleCycle), 0).unwrap();
        assert_eq!(none.n_unique_blocks_stored(), 6);
        assert_eq!(cyc.n_unique_blocks_stored(), 2);
        assert_eq!(mid.n_unique_blocks_stored(), 4);
        assert_eq!(cyc.n_block_params() * 3, none.n_block_params());
        for w in [&none, &cyc, &mid] {
            w.validate().unwrap();
        }
    }

    #[test]
    fn missing_block_is_reported() {
        let mut w = ModelWeights::init(&ModelSpec::toy(4, 2, ShareStrategy::Cycle), 1).unwrap();
        w.params.remove("block.1.wq");
        assert!(matches!(w.validate(), Err(Error::Index(_))));
    }
}
