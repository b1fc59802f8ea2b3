//! Initializing shared blocks from an untied source model, and depth-wise
//! low-rank deltas that relax the tying.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::weights::{block_linears, block_param, lora_param, BLOCK_NORMS};
use crate::model::{ModelSpec, ModelWeights, ParamStore, ShareStrategy};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMethod {
    Stepwise,
    Average,
    Lower,
    Random,
}

/// Norm weights under `Average`: mean over the tied group, the first
/// layer's weights, or zeros.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormVariant {
    #[default]
    NormAvg,
    NormChoice,
    NormZero,
}

impl std::str::FromStr for InitMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "stepwise" => InitMethod::Stepwise,
            "average" => InitMethod::Average,
            "lower" => InitMethod::Lower,
            "random" => InitMethod::Random,
            _ => return Err(Error::Config(format!("unknown init method `{s}`"))),
        })
    }
}

/// `round(j(n-1)/(k-1))` for `j in 0..k`: evenly spaced picks that keep
/// both ends.
pub fn stepwise_indices(n: usize, k: usize) -> Vec<usize> {
    if k <= 1 {
        return vec![0; k];
    }
    (0..k).map(|j| ((j * (n - 1)) as f64 / (k - 1) as f64).round() as usize).collect()
}

/// Source layer(s) each unique block of `spec` is initialized from.
pub fn block_sources(spec: &ModelSpec, method: InitMethod) -> Result<Vec<Vec<usize>>> {
    let l = spec.n_layers;
    let n_blocks = spec.n_unique_blocks();
    let map = spec.unrolled()?;
    let groups: Vec<Vec<usize>> =
        (0..n_blocks).map(|b| (0..l).filter(|&ell| map[ell] == b).collect()).collect();
    Ok(match method {
        InitMethod::Average => groups,
        InitMethod::Lower => {
            let mut v: Vec<Vec<usize>> = (0..n_blocks).map(|b| vec![b]).collect();
            if spec.share.is_middle() {
                v[n_blocks - 1] = vec![l - 1];
            }
            v
        }
        InitMethod::Stepwise | InitMethod::Random => {
            if spec.share.is_middle() {
                let span = n_blocks - 2;
                let mut v = vec![vec![0]];
                v.extend(stepwise_indices(l - 2, span).into_iter().map(|i| vec![i + 1]));
                v.push(vec![l - 1]);
                v
            } else if spec.share == ShareStrategy::None {
                (0..l).map(|i| vec![i]).collect()
            } else {
                stepwise_indices(l, n_blocks).into_iter().map(|i| vec![i]).collect()
            }
        }
    })
}

fn mean_of(ts: &[&Tensor]) -> Tensor {
    let mut out = Tensor::zeros(ts[0].shape());
    for t in ts {
        out.data_mut().iter_mut().zip(t.data()).for_each(|(o, v)| *o += v);
    }
    let n = ts.len() as f64;
    out.data_mut().iter_mut().for_each(|o| *o /= n);
    out
}

fn check_source(source: &ModelWeights, spec: &ModelSpec) -> Result<()> {
    let s = &source.spec;
    let same = s.n_layers == spec.n_layers
        && s.d_model == spec.d_model
        && s.n_heads == spec.n_heads
        && s.n_kv_heads == spec.n_kv_heads
        && s.d_head == spec.d_head
        && s.d_inter == spec.d_inter
        && s.vocab == spec.vocab
        && s.tie_embeddings == spec.tie_embeddings;
    if !same || s.share != ShareStrategy::None {
        return Err(Error::Init("source must be an untied model with the target's dimensions and depth".into()));
    }
    source.validate().map_err(|e| Error::Init(e.to_string()))
}

/// Shared blocks of `spec` initialized from the untied `source`.
pub fn init_looped(source: &ModelWeights, spec: &ModelSpec, method: InitMethod, norms: NormVariant, seed: u64) -> Result<ModelWeights> {
    spec.validate()?;
    check_source(source, spec)?;
    let mut params = ParamStore::new();
    for (k, v) in source.params.iter() {
        if !k.starts_with("block.") && !k.starts_with("lora.") {
            params.insert(k.clone(), v.clone());
        }
    }
    let sources = block_sources(spec, method)?;
    let fresh = (method == InitMethod::Random).then(|| ModelWeights::init(spec, seed)).transpose()?;
    for (b, src) in sources.iter().enumerate() {
        for (mat, _, _) in block_linears(spec) {
            let t = match &fresh {
                Some(f) => f.params.require(&block_param(b, mat))?.clone(),
                None => {
                    let ts: Vec<&Tensor> =
                        src.iter().map(|&l| source.params.require(&block_param(l, mat))).collect::<Result<_>>()?;
                    mean_of(&ts)
                }
            };
            params.insert(block_param(b, mat), t);
        }
        for n in BLOCK_NORMS {
            let ts: Vec<&Tensor> = src.iter().map(|&l| source.params.require(&block_param(l, n))).collect::<Result<_>>()?;
            let t = match (method, norms) {
                (InitMethod::Random, _) => fresh.as_ref().expect("random init").params.require(&block_param(b, n))?.clone(),
                (InitMethod::Average, NormVariant::NormChoice) => ts[0].clone(),
                (InitMethod::Average, NormVariant::NormZero) => Tensor::zeros(ts[0].shape()),
                _ => mean_of(&ts),
            };
            params.insert(block_param(b, n), t);
        }
    }
    Ok(ModelWeights { spec: spec.clone(), params })
}

/// Low-rank delta `B·A` added to a tied weight for one loop iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraDelta {
    /// `[r×k]`
    pub a: Tensor,
    /// `[d×r]`
    pub b: Tensor,
    pub rank: usize,
}

impl LoraDelta {
    pub fn delta(&self) -> Result<Tensor> {
        if self.rank == 0 {
            return Ok(Tensor::zeros(&[self.b.rows(), self.a.cols()]));
        }
        self.b.matmul(&self.a)
    }

    pub fn n_params(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// Rank-`r` truncated SVD of `source - tied`: `B = U_r Σ_r`, `A = V_rᵀ`.
/// An all-zero residual falls back to Gaussian `A` and zero `B`.
pub fn init_lora_svd(source: &Tensor, tied: &Tensor, rank: usize, seed: u64) -> Result<LoraDelta> {
    let (d, k) = source.dims2()?;
    if tied.shape() != source.shape() {
        return Err(Error::Init(format!("residual of {:?} and {:?}", source.shape(), tied.shape())));
    }
    if rank > d.min(k) {
        return Err(Error::Init(format!("rank {rank} exceeds min({d}, {k})")));
    }
    let resid: Vec<f64> = source.data().iter().zip(tied.data()).map(|(a, b)| a - b).collect();
    if resid.iter().all(|&x| x == 0.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        return Ok(LoraDelta {
            a: Tensor::randn(&[rank, k], 1.0 / (k as f64).sqrt(), &mut rng),
            b: Tensor::zeros(&[d, rank]),
            rank,
        });
    }
    let m = DMatrix::from_row_slice(d, k, &resid);
    let svd = m.svd(true, true);
    let u = svd.u.ok_or_else(|| Error::Init("svd produced no U".into()))?;
    let vt = svd.v_t.ok_or_else(|| Error::Init("svd produced no Vᵀ".into()))?;
    let s = svd.singular_values;
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut b = Vec::with_capacity(d * rank);
    for row in 0..d {
        for &c in order.iter().take(rank) {
            b.push(u[(row, c)] * s[c]);
        }
    }
    let mut a = Vec::with_capacity(rank * k);
    for &c in order.iter().take(rank) {
        for col in 0..k {
            a.push(vt[(c, col)]);
        }
    }
    Ok(LoraDelta { a: Tensor::new(vec![rank, k], a)?, b: Tensor::new(vec![d, rank], b)?, rank })
}

/// `x·W'ᵀ + (x·Aᵀ)·Bᵀ`.
pub fn lora_forward(base: &Tensor, delta: &LoraDelta, x: &Tensor) -> Result<Tensor> {
    let mut out = x.matmul(&base.transpose()?)?;
    if delta.rank > 0 {
        let low = x.matmul(&delta.a.transpose()?)?;
        let up = low.matmul(&delta.b.transpose()?)?;
        out.data_mut().iter_mut().zip(up.data()).for_each(|(o, v)| *o += v);
    }
    Ok(out)
}

/// Ranks per block matrix (`wq`, `wk`, ...); matrices not listed use `default`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LoraRanks {
    pub default: usize,
    #[serde(default)]
    pub per_matrix: std::collections::BTreeMap<String, usize>,
}

impl LoraRanks {
    pub fn uniform(r: usize) -> Self {
        LoraRanks { default: r, per_matrix: Default::default() }
    }

    pub fn rank(&self, mat: &str) -> usize {
        self.per_matrix.get(mat).copied().unwrap_or(self.default)
    }
}

/// Adds SVD-initialized deltas for every looped layer (a layer whose block
/// is used more than once), matching each layer back to its source layer.
/// Ranks larger than a matrix allows are capped at full rank.
pub fn relax(looped: &mut ModelWeights, source: &ModelWeights, ranks: &LoraRanks, seed: u64) -> Result<()> {
    let spec = looped.spec.clone();
    check_source(source, &spec)?;
    let map = spec.unrolled()?;
    for ell in 0..spec.n_layers {
        let b = map[ell];
        if map.iter().filter(|&&x| x == b).count() < 2 {
            continue;
        }
        let depth = spec.occurrence(ell)?;
        for (i, (mat, out, inp)) in block_linears(&spec).into_iter().enumerate() {
            let r = ranks.rank(mat).min(out.min(inp));
            if r == 0 {
                continue;
            }
            let w = source.params.require(&block_param(ell, mat))?;
            let tied = looped.params.require(&block_param(b, mat))?;
            let s = seed.wrapping_add((ell * 16 + i) as u64);
            let delta = init_lora_svd(w, tied, r, s)?;
            looped.params.insert(lora_param(b, mat, "a", depth), delta.a);
            looped.params.insert(lora_param(b, mat, "b", depth), delta.b);
        }
    }
    Ok(())
}
