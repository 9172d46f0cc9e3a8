//! Block-level KV cache: prefill the prompt once, denoise each block against
//! the cached prefix, commit finished clean blocks.

use ndarray::{Array2, Axis};

use super::model::{
    embed_sequence, layer_forward_cached, velocity_head, PosSpec, TokenInput,
};
use super::params::BackboneParams;
use crate::error::{Error, Result};

/// Per-layer cached keys/values covering prompt + lyrics + committed clean
/// blocks. Append-only across a generation run.
#[derive(Debug, Clone)]
pub struct KvCache {
    layers_kv: Vec<(Array2<f64>, Array2<f64>)>,
    pub prompt_len: usize,
    pub lyric_len: usize,
    pub committed_blocks: usize,
    pub block_size: usize,
    prefilled: bool,
}

impl KvCache {
    pub fn new(n_layers: usize, model_dim: usize, block_size: usize) -> Self {
        Self {
            layers_kv: (0..n_layers)
                .map(|_| (Array2::zeros((0, model_dim)), Array2::zeros((0, model_dim))))
                .collect(),
            prompt_len: 0,
            lyric_len: 0,
            committed_blocks: 0,
            block_size,
            prefilled: false,
        }
    }

    /// Number of cached positions: `prompt + lyrics + committed_blocks * b`.
    pub fn len(&self) -> usize {
        self.layers_kv.first().map_or(0, |(k, _)| k.nrows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_prefilled(&self) -> bool {
        self.prefilled
    }

    fn append(&mut self, layer: usize, k: &Array2<f64>, v: &Array2<f64>) {
        let (ck, cv) = &mut self.layers_kv[layer];
        ck.append(Axis(0), k.view()).expect("contiguous cache append");
        cv.append(Axis(0), v.view()).expect("contiguous cache append");
    }

    /// Positional index of the next uncommitted block's first frame.
    fn next_block_pos(&self) -> usize {
        self.prompt_len + self.lyric_len + self.committed_blocks * self.block_size
    }
}

/// The conditioning prompt for a generation run.
#[derive(Debug, Clone)]
pub struct Prompt {
    pub style_id: usize,
    pub lyrics: Vec<u16>,
}

/// Prompt input for prefill: the real prompt or the learned null prompt of
/// matching lyric length (classifier-free guidance branch).
#[derive(Debug, Clone)]
pub enum PromptInput<'a> {
    Real(&'a Prompt),
    Null { lyric_len: usize },
}

impl PromptInput<'_> {
    fn lyric_len(&self) -> usize {
        match self {
            PromptInput::Real(p) => p.lyrics.len(),
            PromptInput::Null { lyric_len } => *lyric_len,
        }
    }
}

/// One invocation of the cached model.
pub enum CacheOp<'a> {
    /// Embed prompt+lyrics at tag `-1` into an empty cache.
    Prefill(PromptInput<'a>),
    /// Evaluate one noisy block at tag `t`; reads the cache, never extends it.
    Denoise { frames: &'a Array2<f64>, t: f64 },
    /// Run one clean block at tag `1` and append its keys/values.
    Commit { frames: &'a Array2<f64> },
}

/// Dispatches one cached-model call. `Denoise` returns the block velocity
/// estimate; the other modes return `None`.
pub fn forward_cached(
    params: &BackboneParams,
    op: CacheOp<'_>,
    cache: &mut KvCache,
) -> Result<Option<Array2<f64>>> {
    match op {
        CacheOp::Prefill(prompt) => {
            prefill(params, &prompt, cache)?;
            Ok(None)
        }
        CacheOp::Denoise { frames, t } => denoise(params, frames, t, cache).map(Some),
        CacheOp::Commit { frames } => {
            commit(params, frames, cache)?;
            Ok(None)
        }
    }
}

/// Runs prompt + lyrics through the model at tag `-1`, caching per-layer
/// keys/values. The prefix attends bidirectionally to itself.
pub fn prefill(params: &BackboneParams, prompt: &PromptInput<'_>, cache: &mut KvCache) -> Result<()> {
    if cache.prefilled || !cache.is_empty() {
        return Err(Error::CacheState("prefill requires an empty cache".into()));
    }
    if cache.layers_kv.len() != params.layers.len() {
        return Err(Error::CacheState("cache layer count mismatch".into()));
    }
    let lyric_len = prompt.lyric_len();
    let mut specs: Vec<PosSpec> = Vec::with_capacity(1 + lyric_len);
    match prompt {
        PromptInput::Real(p) => {
            specs.push(PosSpec {
                input: TokenInput::Style(p.style_id),
                pos_index: 0,
                tag: -1.0,
            });
            for (j, &tok) in p.lyrics.iter().enumerate() {
                specs.push(PosSpec {
                    input: TokenInput::Lyric(tok),
                    pos_index: 1 + j,
                    tag: -1.0,
                });
            }
        }
        PromptInput::Null { lyric_len } => {
            specs.push(PosSpec {
                input: TokenInput::NullStyle,
                pos_index: 0,
                tag: -1.0,
            });
            for j in 0..*lyric_len {
                specs.push(PosSpec {
                    input: TokenInput::NullLyric,
                    pos_index: 1 + j,
                    tag: -1.0,
                });
            }
        }
    }
    let (mut x, _) = embed_sequence(params, &specs)?;
    let empty_k = Array2::zeros((0, params.cfg.model_dim));
    let empty_v = Array2::zeros((0, params.cfg.model_dim));
    for (li, lp) in params.layers.iter().enumerate() {
        let out = layer_forward_cached(lp, &x, &empty_k, &empty_v, params.cfg.heads);
        cache.append(li, &out.k_self, &out.v_self);
        x = out.x_out;
    }
    cache.prompt_len = 1;
    cache.lyric_len = lyric_len;
    cache.prefilled = true;
    Ok(())
}

fn block_specs<'a>(
    params: &BackboneParams,
    frames: &'a Array2<f64>,
    tag: f64,
    cache: &KvCache,
    context: &'static str,
) -> Result<Vec<PosSpec<'a>>> {
    if !cache.prefilled {
        return Err(Error::CacheState(format!("{context} before prefill")));
    }
    if frames.nrows() != cache.block_size || frames.ncols() != params.cfg.latent_dim {
        return Err(Error::ShapeMismatch {
            context: "cached block",
            expected: format!("({}, {})", cache.block_size, params.cfg.latent_dim),
            got: format!("{:?}", frames.dim()),
        });
    }
    let start = cache.next_block_pos();
    Ok((0..frames.nrows())
        .map(|j| PosSpec {
            input: TokenInput::Latent(frames.row(j)),
            pos_index: start + j,
            tag,
        })
        .collect())
}

/// Velocity estimate for one noisy block at timestep `t`. Positional indices
/// equal those the block will occupy after commit. Read-only on the cache.
pub fn denoise(
    params: &BackboneParams,
    frames: &Array2<f64>,
    t: f64,
    cache: &KvCache,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidTimestep { t });
    }
    let specs = block_specs(params, frames, t, cache, "denoise")?;
    let (mut x, _) = embed_sequence(params, &specs)?;
    for (li, lp) in params.layers.iter().enumerate() {
        let (ck, cv) = &cache.layers_kv[li];
        let out = layer_forward_cached(lp, &x, ck, cv, params.cfg.heads);
        x = out.x_out;
    }
    Ok(velocity_head(params, &x))
}

/// Commits one clean block at tag `1`, extending the cache by `b` positions.
pub fn commit(params: &BackboneParams, frames: &Array2<f64>, cache: &mut KvCache) -> Result<()> {
    let specs = block_specs(params, frames, 1.0, cache, "commit")?;
    let (mut x, _) = embed_sequence(params, &specs)?;
    for (li, lp) in params.layers.iter().enumerate() {
        let (ck, cv) = {
            let (k, v) = &cache.layers_kv[li];
            (k.clone(), v.clone())
        };
        let out = layer_forward_cached(lp, &x, &ck, &cv, params.cfg.heads);
        cache.append(li, &out.k_self, &out.v_self);
        x = out.x_out;
    }
    cache.committed_blocks += 1;
    Ok(())
}
