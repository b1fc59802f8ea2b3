use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Heads;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShareStrategy {
    None,
    Cycle,
    Sequence,
    MiddleCycle,
    MiddleSequence,
}

impl ShareStrategy {
    pub fn is_middle(self) -> bool {
        matches!(self, ShareStrategy::MiddleCycle | ShareStrategy::MiddleSequence)
    }
}

impl std::str::FromStr for ShareStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "none" | "vanilla" => ShareStrategy::None,
            "cycle" => ShareStrategy::Cycle,
            "sequence" => ShareStrategy::Sequence,
            "middlecycle" | "mcyc" => ShareStrategy::MiddleCycle,
            "middlesequence" | "mseq" => ShareStrategy::MiddleSequence,
            _ => return Err(Error::Config(format!("unknown share strategy `{s}`"))),
        })
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_layers: usize,
    pub n_recursions: usize,
    pub share: ShareStrategy,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_inter: usize,
    pub vocab: usize,
    pub context_len: usize,
    #[serde(default = "default_true")]
    pub tie_embeddings: bool,
}

fn default_true() -> bool {
    true
}

impl ModelSpec {
    /// Small Llama-style configuration for tests and smoke runs.
    pub fn toy(n_layers: usize, n_recursions: usize, share: ShareStrategy) -> Self {
        ModelSpec {
            n_layers,
            n_recursions,
            share,
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 1,
            d_head: 4,
            d_inter: 16,
            vocab: 32,
            context_len: 64,
            tie_embeddings: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_recursions == 0 {
            return cfg("n_layers and n_recursions must be positive".into());
        }
        if self.share.is_middle() {
            if self.n_layers < 3 {
                return cfg(format!("{:?} needs at least 3 layers", self.share));
            }
            if (self.n_layers - 2) % self.n_recursions != 0 {
                return cfg(format!(
                    "n_recursions {} must divide n_layers - 2 = {} for {:?}",
                    self.n_recursions,
                    self.n_layers - 2,
                    self.share
                ));
            }
        } else if self.n_layers % self.n_recursions != 0 {
            return cfg(format!(
                "n_recursions {} must divide n_layers {}",
                self.n_recursions, self.n_layers
            ));
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return cfg(format!(
                "n_heads {} must be divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_head == 0 || self.d_head % 2 != 0 {
            return cfg("d_head must be positive and even (rotary pairs)".into());
        }
        if self.d_model == 0 || self.d_inter == 0 || self.vocab == 0 || self.context_len == 0 {
            return cfg("dimensions must be positive".into());
        }
        Ok(())
    }

    pub fn heads(&self) -> Heads {
        Heads { n_heads: self.n_heads, n_kv_heads: self.n_kv_heads, d_head: self.d_head }
    }

    pub fn q_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Layers per recursion in the shared (routed) part of the stack.
    pub fn recursion_span(&self) -> usize {
        if self.share.is_middle() {
            (self.n_layers - 2) / self.n_recursions
        } else {
            self.n_layers / self.n_recursions
        }
    }

    pub fn n_unique_blocks(&self) -> usize {
        match self.share {
            ShareStrategy::None => self.n_layers,
            ShareStrategy::Cycle | ShareStrategy::Sequence => self.n_layers / self.n_recursions,
            ShareStrategy::MiddleCycle | ShareStrategy::MiddleSequence => {
                (self.n_layers - 2) / self.n_recursions + 2
            }
        }
    }

    /// Unique-block id used at unrolled layer `ell`.
    pub fn layer_index_map(&self, ell: usize) -> Result<usize> {
        self.validate()?;
        let l = self.n_layers;
        if ell >= l {
            return Err(Error::Index(format!("layer {ell} of {l}")));
        }
        let nr = self.n_recursions;
        Ok(match self.share {
            ShareStrategy::None => ell,
            ShareStrategy::Cycle => ell % (l / nr),
            ShareStrategy::Sequence => ell / nr,
            ShareStrategy::MiddleCycle | ShareStrategy::MiddleSequence => {
                let span = (l - 2) / nr;
                if ell == 0 {
                    0
                } else if ell == l - 1 {
                    span + 1
                } else if self.share == ShareStrategy::MiddleCycle {
                    (ell - 1) % span + 1
                } else {
                    (ell - 1) / nr + 1
                }
            }
        })
    }

    /// Block ids for every unrolled layer.
    pub fn unrolled(&self) -> Result<Vec<usize>> {
        (0..self.n_layers).map(|l| self.layer_index_map(l)).collect()
    }

    /// Unique layer applied to all tokens before the recursions, if any.
    pub fn prelude_layer(&self) -> Option<usize> {
        self.share.is_middle().then_some(0)
    }

    /// Unique layer applied to all tokens after the recursions, if any.
    pub fn coda_layer(&self) -> Option<usize> {
        self.share.is_middle().then_some(self.n_layers - 1)
    }

    /// Unrolled layers of recursion `r` (0-based), excluding prelude and coda.
    pub fn recursion_layers(&self, r: usize) -> std::ops::Range<usize> {
        let span = self.recursion_span();
        let off = usize::from(self.share.is_middle());
        off + r * span..off + (r + 1) * span
    }

    /// Recursion (0-based) that unrolled layer `ell` belongs to; `None` for
    /// the unique prelude and coda layers.
    pub fn recursion_of_layer(&self, ell: usize) -> Option<usize> {
        if self.prelude_layer() == Some(ell) || self.coda_layer() == Some(ell) {
            return None;
        }
        let off = usize::from(self.share.is_middle());
        Some((ell - off) / self.recursion_span())
    }

    /// Layers executed when a token runs stage `r`: recursion `r`, plus the
    /// prelude in the first stage and the coda in the last.
    pub fn stage_layers(&self, r: usize) -> Vec<usize> {
        let mut v = Vec::new();
        if r == 0 {
            v.extend(self.prelude_layer());
        }
        v.extend(self.recursion_layers(r));
        if r + 1 == self.n_recursions {
            v.extend(self.coda_layer());
        }
        v
    }

    /// Layer whose depth-1 keys/values a deeper layer reads under recursive KV sharing.
    pub fn share_source_layer(&self, ell: usize) -> usize {
        match self.recursion_of_layer(ell) {
            None => ell,
            Some(r) => ell - r * self.recursion_span(),
        }
    }

    /// Loop iteration index of `ell` among the layers that share its block.
    pub fn occurrence(&self, ell: usize) -> Result<usize> {
        let b = self.layer_index_map(ell)?;
        let mut n = 0;
        for l in 0..ell {
            if self.layer_index_map(l)? == b {
                n += 1;
            }
        }
        Ok(n)
    }

    /// SmolLM-style 360M vanilla configuration.
    pub fn smollm_360m() -> Self {
        ModelSpec {
            n_layers: 32,
            n_recursions: 1,
            share: ShareStrategy::None,
            d_model: 960,
            n_heads: 15,
            n_kv_heads: 5,
            d_head: 64,
            d_inter: 2560,
            vocab: 49152,
            context_len: 2048,
            tie_embeddings: true,
        }
    }

    /// The 360M trunk as a Middle-Cycle recursive model. Layers are padded
    /// so that `N_r` divides the middle part.
    pub fn routed_360m(n_recursions: usize) -> Self {
        let base = ModelSpec::smollm_360m();
        let span = (base.n_layers - 2).div_ceil(n_recursions.max(1));
        ModelSpec { n_layers: 2 + span * n_recursions, n_recursions, share: ShareStrategy::MiddleCycle, ..base }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(l: usize, nr: usize, share: ShareStrategy) -> ModelSpec {
        ModelSpec::toy(l, nr, share)
    }

    fn chunks(s: &ModelSpec) -> Vec<Vec<usize>> {
        let ids = s.unrolled().unwrap();
        ids.chunks(s.n_layers / s.n_recursions).map(<[usize]>::to_vec).collect()
    }

    #[test]
    fn cycle_unrolls_block_repeatedly() {
        assert_eq!(chunks(&spec(9, 3, ShareStrategy::Cycle)), vec![vec![0, 1, 2]; 3]);
    }

    #[test]
    fn sequence_repeats_each_layer_consecutively() {
        assert_eq!(
            chunks(&spec(9, 3, ShareStrategy::Sequence)),
            vec![vec![0, 0, 0], vec![1, 1, 1], vec![2, 2, 2]]
        );
        let s = spec(8, 2, ShareStrategy::Sequence);
        assert_eq!(s.unrolled().unwrap(), vec![0, 0, 1, 1, 2, 2, 3, 3]);
    }

    #[test]
    fn middle_cycle_keeps_unique_ends() {
        let s = spec(11, 3, ShareStrategy::MiddleCycle);
        assert_eq!(s.layer_index_map(5).unwrap(), 2);
        assert_eq!(s.layer_index_map(0).unwrap(), 0);
        assert_eq!(s.layer_index_map(10).unwrap(), 4);
        assert_eq!(s.n_unique_blocks(), 5);
        let m = spec(11, 3, ShareStrategy::MiddleSequence);
        assert_eq!(m.unrolled().unwrap(), vec![0, 1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(matches!(spec(9, 2, ShareStrategy::Cycle).validate(), Err(Error::Config(_))));
        assert!(matches!(spec(10, 3, ShareStrategy::MiddleCycle).validate(), Err(Error::Config(_))));
        let mut s = spec(4, 2, ShareStrategy::Cycle);
        s.n_kv_heads = 3;
        assert!(s.validate().is_err());
    }

    #[test]
    fn map_is_surjective_onto_unique_blocks() {
        for (l, nr, share) in [
            (6, 2, ShareStrategy::Cycle),
            (6, 3, ShareStrategy::Sequence),
            (8, 2, ShareStrategy::None),
            (11, 3, ShareStrategy::MiddleCycle),
            (11, 3, ShareStrategy::MiddleSequence),
        ] {
            let s = spec(l, nr, share);
            let mut ids = s.unrolled().unwrap();
            ids.sort_unstable();
            ids.dedup();
            assert_eq!(ids, (0..s.n_unique_blocks()).collect::<Vec<_>>(), "{share:?}");
        }
    }

    #[test]
    fn stages_cover_every_layer_once() {
        let s = spec(8, 3, ShareStrategy::MiddleCycle);
        let all: Vec<usize> = (0..3).flat_map(|r| s.stage_layers(r)).collect();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
        assert_eq!(s.share_source_layer(5), 1);
        assert_eq!(s.share_source_layer(7), 7);
        assert_eq!(s.recursion_of_layer(0), None);
        assert_eq!(s.occurrence(5).unwrap(), 2);
    }
}
