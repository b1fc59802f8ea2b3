//! Per-layer, per-slot key/value storage with recursion-aware write and read
//! rules, plus the closed-form cost ratios of each caching mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Every depth caches every token that reaches it.
    #[default]
    PerDepth,
    /// A depth caches only the tokens routed through it.
    RecursionWise,
    /// Only depth 1 is written; deeper depths read depth-1 entries.
    RecursiveShare,
    /// Recursion-wise entries where present, depth-1 entries for the
    /// positions a depth skipped.
    RecursionWiseHybrid,
}

impl std::str::FromStr for KvMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "perdepth" | "vanilla" => KvMode::PerDepth,
            "recursionwise" => KvMode::RecursionWise,
            "recursiveshare" | "share" => KvMode::RecursiveShare,
            "hybrid" | "recursionwisehybrid" => KvMode::RecursionWiseHybrid,
            _ => return Err(Error::Config(format!("unknown kv mode `{s}`"))),
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Entries {
    positions: Vec<usize>,
    k: Vec<f64>,
    v: Vec<f64>,
}

/// Keys (already rotated), values and their absolute positions.
#[derive(Clone, Debug, PartialEq)]
pub struct Gathered {
    pub k: Tensor,
    pub v: Tensor,
    pub positions: Vec<usize>,
}

impl Gathered {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Storage is indexed by cache layer. Each layer carries a recursion depth
/// (1-based) and the layer it reads from under sharing.
#[derive(Clone, Debug, PartialEq)]
pub struct KvBank {
    mode: KvMode,
    width: usize,
    depth: Vec<usize>,
    source: Vec<usize>,
    store: Vec<Vec<Entries>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheStats {
    pub bytes: usize,
    pub entries_per_depth: Vec<usize>,
}

impl KvBank {
    /// A bank with one cache layer per recursion depth.
    pub fn per_depth(mode: KvMode, n_depths: usize, width: usize) -> Self {
        KvBank {
            mode,
            width,
            depth: (1..=n_depths).collect(),
            source: vec![0; n_depths],
            store: vec![Vec::new(); n_depths],
        }
    }

    /// A bank covering every unrolled layer of `spec`. The unique first and
    /// last layers of the Middle strategies count as depth 1.
    pub fn for_model(spec: &ModelSpec, mode: KvMode) -> Self {
        let l = spec.n_layers;
        let depth = (0..l).map(|ell| spec.recursion_of_layer(ell).map_or(1, |r| r + 1)).collect();
        let source = (0..l).map(|ell| spec.share_source_layer(ell)).collect();
        KvBank { mode, width: spec.kv_width(), depth, source, store: vec![Vec::new(); l] }
    }

    pub fn mode(&self) -> KvMode {
        self.mode
    }

    pub fn n_layers(&self) -> usize {
        self.depth.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth_of(&self, layer: usize) -> usize {
        self.depth[layer]
    }

    /// Whether keys/values computed at `layer` are stored at all.
    pub fn writes(&self, layer: usize) -> bool {
        !(self.mode == KvMode::RecursiveShare && self.depth[layer] > 1)
    }

    fn check_layer(&self, layer: usize) -> Result<()> {
        if layer >= self.depth.len() {
            return Err(Error::Index(format!("cache layer {layer} of {}", self.depth.len())));
        }
        Ok(())
    }

    fn entries(&self, layer: usize, slot: usize) -> Option<&Entries> {
        self.store[layer].get(slot)
    }

    pub fn last_position(&self, layer: usize, slot: usize) -> Option<usize> {
        self.entries(layer, slot).and_then(|e| e.positions.last().copied())
    }

    pub fn append(&mut self, layer: usize, slot: usize, position: usize, k: &[f64], v: &[f64]) -> Result<()> {
        self.check_layer(layer)?;
        if !self.writes(layer) {
            return Err(Error::Mode(format!(
                "recursive sharing stores depth 1 only; write at depth {}",
                self.depth[layer]
            )));
        }
        if k.len() != self.width || v.len() != self.width {
            return Err(Error::Dimension(format!(
                "cache width {} got k {} v {}",
                self.width,
                k.len(),
                v.len()
            )));
        }
        if let Some(last) = self.last_position(layer, slot) {
            if position <= last {
                return Err(Error::Ordering { position, last });
            }
        }
        let slots = &mut self.store[layer];
        if slots.len() <= slot {
            slots.resize(slot + 1, Entries::default());
        }
        let e = &mut slots[slot];
        e.positions.push(position);
        e.k.extend_from_slice(k);
        e.v.extend_from_slice(v);
        Ok(())
    }

    /// Appends every row of `k`/`v` in order.
    pub fn append_rows(&mut self, layer: usize, slot: usize, positions: &[usize], k: &Tensor, v: &Tensor) -> Result<()> {
        for (i, &p) in positions.iter().enumerate() {
            self.append(layer, slot, p, k.row(i), v.row(i))?;
        }
        Ok(())
    }

    fn collect(&self, layer: usize, slot: usize, query_position: usize, skip: &[usize]) -> Entries {
        let mut out = Entries::default();
        let w = self.width;
        if let Some(e) = self.entries(layer, slot) {
            for (i, &p) in e.positions.iter().enumerate() {
                if p > query_position {
                    break;
                }
                if skip.binary_search(&p).is_ok() {
                    continue;
                }
                out.positions.push(p);
                out.k.extend_from_slice(&e.k[i * w..(i + 1) * w]);
                out.v.extend_from_slice(&e.v[i * w..(i + 1) * w]);
            }
        }
        out
    }

    /// Entries visible to a query at `query_position`, ordered by position.
    pub fn gather(&self, layer: usize, slot: usize, query_position: usize) -> Result<Gathered> {
        self.check_layer(layer)?;
        let deep = self.depth[layer] > 1;
        let e = match self.mode {
            KvMode::RecursiveShare if deep => self.collect(self.source[layer], slot, query_position, &[]),
            KvMode::RecursionWiseHybrid if deep => {
                let own = self.collect(layer, slot, query_position, &[]);
                let shared = self.collect(self.source[layer], slot, query_position, &own.positions);
                merge(own, shared, self.width)
            }
            _ => self.collect(layer, slot, query_position, &[]),
        };
        let n = e.positions.len();
        Ok(Gathered {
            k: Tensor::new(vec![n, self.width], e.k)?,
            v: Tensor::new(vec![n, self.width], e.v)?,
            positions: e.positions,
        })
    }

    /// Drops every entry of `slot`.
    pub fn clear_slot(&mut self, slot: usize) {
        for layer in &mut self.store {
            if let Some(e) = layer.get_mut(slot) {
                *e = Entries::default();
            }
        }
    }

    pub fn entries_at(&self, layer: usize) -> usize {
        self.store[layer].iter().map(|e| e.positions.len()).sum()
    }

    /// Stored bytes assuming `bytes_per_element` per key/value scalar.
    pub fn bytes(&self, bytes_per_element: usize) -> usize {
        let entries: usize = (0..self.n_layers()).map(|l| self.entries_at(l)).sum();
        entries * 2 * self.width * bytes_per_element
    }

    pub fn stats(&self) -> CacheStats {
        let max_depth = self.depth.iter().copied().max().unwrap_or(0);
        let mut per = vec![0; max_depth];
        for l in 0..self.n_layers() {
            per[self.depth[l] - 1] += self.entries_at(l);
        }
        CacheStats { bytes: self.bytes(std::mem::size_of::<f64>()), entries_per_depth: per }
    }
}

fn merge(a: Entries, b: Entries, w: usize) -> Entries {
    let mut out = Entries::default();
    let (mut i, mut j) = (0, 0);
    while i < a.positions.len() || j < b.positions.len() {
        let take_a = j >= b.positions.len() || (i < a.positions.len() && a.positions[i] < b.positions[j]);
        let (src, idx) = if take_a { (&a, &mut i) } else { (&b, &mut j) };
        out.positions.push(src.positions[*idx]);
        out.k.extend_from_slice(&src.k[*idx * w..(*idx + 1) * w]);
        out.v.extend_from_slice(&src.v[*idx * w..(*idx + 1) * w]);
        *idx += 1;
    }
    out
}

/// Cost of a caching mode relative to a vanilla transformer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeCosts {
    pub kv_memory: f64,
    pub kv_io: f64,
    pub attn_flops: f64,
}

/// `k` is the number of tokens selected per layer, `n_ctx` the context length.
pub fn relative_costs(mode: KvMode, n_r: usize, k: usize, n_ctx: usize) -> Result<RelativeCosts> {
    if n_r == 0 || k == 0 || k > n_ctx {
        return Err(Error::Config(format!("need 1 <= k <= n_ctx and n_r >= 1 (k={k}, n_ctx={n_ctx}, n_r={n_r})")));
    }
    let nr = n_r as f64;
    let frac = k as f64 / n_ctx as f64;
    Ok(match mode {
        KvMode::PerDepth => RelativeCosts { kv_memory: 1.0, kv_io: 1.0, attn_flops: 1.0 },
        KvMode::RecursionWise | KvMode::RecursionWiseHybrid => {
            let r = (nr + 1.0) / (2.0 * nr);
            RelativeCosts { kv_memory: r, kv_io: r, attn_flops: frac * frac }
        }
        KvMode::RecursiveShare => RelativeCosts { kv_memory: 1.0 / nr, kv_io: 1.0, attn_flops: frac },
    })
}
