//! The toy diffusion transformer: sequence layout, block attention mask,
//! timestep tags, traced training forward/backward, and the block-level KV
//! cache used at inference.

mod cache;
mod model;
mod params;

pub use cache::{commit, denoise, forward_cached, prefill, CacheOp, KvCache, Prompt, PromptInput};
pub use model::{
    backward_train, build_train_specs, embed_sequence, forward_train, infer_full, time_features,
    ForwardTrace, ModelGrads, ModelOutput, PosSpec, TokenInput,
};
pub use params::{BackboneParams, LayerParams, TIME_FEATURES, TIME_SCALE};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_ff_mult() -> usize {
    2
}
fn default_repa_feature_dim() -> usize {
    32
}

/// Architecture hyperparameters of the backbone `f_theta`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub n_styles: usize,
    pub max_positions: usize,
    #[serde(default = "default_ff_mult")]
    pub ff_mult: usize,
    #[serde(default = "default_repa_feature_dim")]
    pub repa_feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            model_dim: 128,
            heads: 4,
            latent_dim: 8,
            vocab_size: 16,
            n_styles: 8,
            max_positions: 256,
            ff_mult: default_ff_mult(),
            repa_feature_dim: default_repa_feature_dim(),
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn ff_dim(&self) -> usize {
        self.model_dim * self.ff_mult
    }

    /// Index of the layer whose output feeds the REPA projection
    /// (mid-depth: output of layer ceil(layers/2), counting from 1).
    pub fn tap_layers(&self) -> usize {
        self.layers.div_ceil(2)
    }

    pub fn validate(&self, max_latent_frames: usize, prompt_len: usize, lyric_len: usize) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config("model_dim must be divisible by heads".into()));
        }
        if self.layers == 0 {
            return Err(Error::Config("layers must be >= 1".into()));
        }
        let needed = prompt_len + lyric_len + 2 * max_latent_frames;
        if self.max_positions < needed {
            return Err(Error::Config(format!(
                "max_positions {} < prompt+lyric+2*max_frames = {needed}",
                self.max_positions
            )));
        }
        Ok(())
    }

    /// A deliberately small configuration used across the unit tests.
    pub fn tiny_for_tests() -> Self {
        Self {
            layers: 2,
            model_dim: 16,
            heads: 2,
            latent_dim: 3,
            vocab_size: 6,
            n_styles: 3,
            max_positions: 96,
            ff_mult: 2,
            repa_feature_dim: 5,
        }
    }
}

/// Role of one position in the concatenated training sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    Prompt,
    Lyric,
    /// Clean (teacher-forced) block, 0-based index.
    Clean(usize),
    /// Noisy block, 0-based index.
    Noisy(usize),
}

/// Geometry of the `(S, L, Z, Z_t)` training sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub prompt_len: usize,
    pub lyric_len: usize,
    pub n_blocks: usize,
    pub block_size: usize,
}

impl SequenceLayout {
    pub fn new(prompt_len: usize, lyric_len: usize, n_blocks: usize, block_size: usize) -> Result<Self> {
        if n_blocks == 0 || block_size == 0 {
            return Err(Error::Layout("need at least one block of size >= 1".into()));
        }
        Ok(Self {
            prompt_len,
            lyric_len,
            n_blocks,
            block_size,
        })
    }

    pub fn prefix_len(&self) -> usize {
        self.prompt_len + self.lyric_len
    }

    pub fn frames(&self) -> usize {
        self.n_blocks * self.block_size
    }

    pub fn clean_start(&self) -> usize {
        self.prefix_len()
    }

    pub fn noisy_start(&self) -> usize {
        self.prefix_len() + self.frames()
    }

    pub fn total_len(&self) -> usize {
        self.prefix_len() + 2 * self.frames()
    }

    pub fn segment(&self, pos: usize) -> Segment {
        if pos < self.prompt_len {
            Segment::Prompt
        } else if pos < self.prefix_len() {
            Segment::Lyric
        } else if pos < self.noisy_start() {
            Segment::Clean((pos - self.clean_start()) / self.block_size)
        } else {
            Segment::Noisy((pos - self.noisy_start()) / self.block_size)
        }
    }

    /// Positional-encoding index. Noisy positions reuse the indices of their
    /// clean counterparts so cached inference sees identical positions.
    pub fn pos_index(&self, pos: usize) -> usize {
        if pos < self.noisy_start() {
            pos
        } else {
            pos - self.frames()
        }
    }

    /// Row range of noisy block `i` within the noisy output slice.
    pub fn noisy_block_rows(&self, i: usize) -> std::ops::Range<usize> {
        i * self.block_size..(i + 1) * self.block_size
    }
}

/// Builds the block-causal training mask. `mask[q][k]` is true when query
/// position `q` may attend to key position `k`:
///
/// - prompt/lyric keys are visible to every query;
/// - prompt/lyric queries see only prompt+lyric;
/// - clean block `i` additionally sees clean blocks `<= i`;
/// - noisy block `i` additionally sees clean blocks `< i` and itself.
pub fn build_training_mask(layout: &SequenceLayout) -> Result<Array2<bool>> {
    let n = layout.total_len();
    if layout.prefix_len() == 0 {
        return Err(Error::Layout("empty prompt+lyric prefix".into()));
    }
    let mut mask = Array2::from_elem((n, n), false);
    for q in 0..n {
        let qs = layout.segment(q);
        for k in 0..n {
            let ks = layout.segment(k);
            let allowed = match (qs, ks) {
                (_, Segment::Prompt) | (_, Segment::Lyric) => true,
                (Segment::Prompt | Segment::Lyric, _) => false,
                (Segment::Clean(i), Segment::Clean(j)) => j <= i,
                (Segment::Clean(_), Segment::Noisy(_)) => false,
                (Segment::Noisy(i), Segment::Clean(j)) => j < i,
                (Segment::Noisy(i), Segment::Noisy(j)) => i == j,
            };
            mask[[q, k]] = allowed;
        }
    }
    Ok(mask)
}

/// Mask for an inference-shaped sequence `[prefix, clean_blocks * b, one
/// noisy block]`, used by the uncached generation baseline.
pub fn build_inference_mask(
    prompt_len: usize,
    lyric_len: usize,
    clean_blocks: usize,
    block_size: usize,
) -> Array2<bool> {
    let prefix = prompt_len + lyric_len;
    let n = prefix + clean_blocks * block_size + block_size;
    let noisy_start = prefix + clean_blocks * block_size;
    let mut mask = Array2::from_elem((n, n), false);
    for q in 0..n {
        for k in 0..n {
            let allowed = if k < prefix {
                true
            } else if q < prefix {
                false
            } else if q < noisy_start {
                // clean block attends clean blocks up to its own
                k < noisy_start && (k - prefix) / block_size <= (q - prefix) / block_size
            } else {
                // the noisy block attends all committed clean blocks and itself
                true
            };
            mask[[q, k]] = allowed;
        }
    }
    mask
}

/// Per-position timestep tags: prompt/lyric `-1`, clean `1`, noisy block `i`
/// gets `sampled_t[i]` (constant within the block).
pub fn timestep_tags(layout: &SequenceLayout, sampled_t: &[f64]) -> Result<Vec<f64>> {
    if sampled_t.len() != layout.n_blocks {
        return Err(Error::Layout(format!(
            "expected {} block timesteps, got {}",
            layout.n_blocks,
            sampled_t.len()
        )));
    }
    for &t in sampled_t {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidTimestep { t });
        }
    }
    let mut tags = Vec::with_capacity(layout.total_len());
    for pos in 0..layout.total_len() {
        let tag = match layout.segment(pos) {
            Segment::Prompt | Segment::Lyric => -1.0,
            Segment::Clean(_) => 1.0,
            Segment::Noisy(i) => sampled_t[i],
        };
        tags.push(tag);
    }
    Ok(tags)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_block_noisy_sees_only_prefix_and_itself() {
        let layout = SequenceLayout::new(1, 2, 1, 3).unwrap();
        let mask = build_training_mask(&layout).unwrap();
        let q = layout.noisy_start(); // first noisy position
        for k in 0..layout.total_len() {
            let expect = matches!(layout.segment(k), Segment::Prompt | Segment::Lyric)
                || matches!(layout.segment(k), Segment::Noisy(0));
            assert_eq!(mask[[q, k]], expect, "key {k}");
        }
    }

    #[test]
    fn k2_b2_mask_matches_figure_pattern() {
        // Prompt 1, lyrics 1, two blocks of size 2: clean block 2 attends
        // clean blocks 1-2; noisy block 2 attends clean block 1 and itself.
        let layout = SequenceLayout::new(1, 1, 2, 2).unwrap();
        let mask = build_training_mask(&layout).unwrap();
        let n = layout.total_len();
        assert_eq!(n, 10);
        // Row layout: [P, L, C1a, C1b, C2a, C2b, N1a, N1b, N2a, N2b]
        let expect_rows: [&[bool; 10]; 10] = [
            &[true, true, false, false, false, false, false, false, false, false], // P
            &[true, true, false, false, false, false, false, false, false, false], // L
            &[true, true, true, true, false, false, false, false, false, false],   // C1a
            &[true, true, true, true, false, false, false, false, false, false],   // C1b
            &[true, true, true, true, true, true, false, false, false, false],     // C2a
            &[true, true, true, true, true, true, false, false, false, false],     // C2b
            &[true, true, false, false, false, false, true, true, false, false],   // N1a
            &[true, true, false, false, false, false, true, true, false, false],   // N1b
            &[true, true, true, true, false, false, false, false, true, true],     // N2a
            &[true, true, true, true, false, false, false, false, true, true],     // N2b
        ];
        for q in 0..n {
            for k in 0..n {
                assert_eq!(mask[[q, k]], expect_rows[q][k], "q={q} k={k}");
            }
        }
    }

    #[test]
    fn mask_equals_bruteforce_receptive_sets() {
        // Independent enumeration: for each block i, the receptive set of a
        // single-block inference layout with i committed clean blocks.
        for k in 1..=8usize {
            let layout = SequenceLayout::new(1, 3, k, 2).unwrap();
            let mask = build_training_mask(&layout).unwrap();
            let prefix = layout.prefix_len();
            let b = layout.block_size;
            for i in 0..k {
                // Noisy block i: visible = prefix + clean blocks < i + itself.
                for qr in 0..b {
                    let q = layout.noisy_start() + i * b + qr;
                    let mut expect = vec![false; layout.total_len()];
                    for p in 0..prefix {
                        expect[p] = true;
                    }
                    for j in 0..i {
                        for kr in 0..b {
                            expect[layout.clean_start() + j * b + kr] = true;
                        }
                    }
                    for kr in 0..b {
                        expect[layout.noisy_start() + i * b + kr] = true;
                    }
                    for key in 0..layout.total_len() {
                        assert_eq!(mask[[q, key]], expect[key], "k={k} i={i} q={q} key={key}");
                    }
                }
            }
        }
    }

    #[test]
    fn tags_assign_blockwise_constants() {
        let layout = SequenceLayout::new(1, 2, 3, 2).unwrap();
        let tags = timestep_tags(&layout, &[0.2, 0.9, 0.5]).unwrap();
        assert_eq!(&tags[..3], &[-1.0, -1.0, -1.0]);
        for pos in layout.clean_start()..layout.noisy_start() {
            assert_eq!(tags[pos], 1.0);
        }
        let ns = layout.noisy_start();
        assert_eq!(&tags[ns..], &[0.2, 0.2, 0.9, 0.9, 0.5, 0.5]);
    }

    #[test]
    fn tags_reject_out_of_range() {
        let layout = SequenceLayout::new(1, 1, 1, 2).unwrap();
        assert!(matches!(
            timestep_tags(&layout, &[1.2]),
            Err(Error::InvalidTimestep { .. })
        ));
        assert!(matches!(
            timestep_tags(&layout, &[-0.1]),
            Err(Error::InvalidTimestep { .. })
        ));
        assert!(timestep_tags(&layout, &[0.0]).is_ok());
    }

    #[test]
    fn noisy_positions_share_clean_positional_indices() {
        let layout = SequenceLayout::new(2, 3, 2, 4).unwrap();
        for i in 0..layout.frames() {
            let clean_pos = layout.clean_start() + i;
            let noisy_pos = layout.noisy_start() + i;
            assert_eq!(layout.pos_index(clean_pos), layout.pos_index(noisy_pos));
        }
    }
}
