//! Block-by-block cached generation with EOP stopping, and the
//! cached-vs-uncached generation benchmark.

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::backbone::{
    build_inference_mask, commit, denoise, infer_full, prefill, BackboneParams, KvCache, PosSpec,
    Prompt, PromptInput, TokenInput,
};
use crate::error::{Error, Result};
use crate::flow::{sample_block, SamplerConfig, VelocityField};
use crate::rng;
use crate::synthdata::{pad_eop_frames, LatentSequence, EOP_VALUE};

pub const DEFAULT_EOP_THRESHOLD: f64 = 0.5;

/// A generation request: prompt, block budget, sampler settings, seed.
#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub prompt: Prompt,
    pub max_blocks: usize,
    pub sampler: SamplerConfig,
    /// Mean-absolute-deviation threshold for EOP detection; `<= 0` disables
    /// detection entirely (used by the benchmark to force fixed lengths).
    pub eop_threshold: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoppedBy {
    Eop,
    MaxBlocks,
}

/// Output of one generation run.
#[derive(Debug, Clone)]
pub struct GenerateResult {
    /// Canonical block-aligned form: content frames followed by exact EOP
    /// padding (the raw tail past the first detected EOP is dropped).
    pub latents: LatentSequence,
    /// Raw sampled blocks before EOP canonicalization.
    pub raw_blocks: Array2<f64>,
    pub blocks_emitted: usize,
    pub stopped_by: StoppedBy,
    pub per_block_ms: Vec<f64>,
}

/// Finds the first EOP frame in a block: frame `j` is EOP iff
/// `mean_d |frame[j][d] - 1| < threshold`.
pub fn detect_eop(block: &Array2<f64>, threshold: f64) -> Option<usize> {
    if threshold <= 0.0 {
        return None;
    }
    let d = block.ncols() as f64;
    (0..block.nrows()).find(|&j| {
        let devimum: f64 = block.row(j).iter().map(|&x| (x - EOP_VALUE).abs()).sum();
        devimum / d < threshold
    })
}

fn gaussian_block(rows: usize, cols: usize, seed: u64, block_idx: u64) -> Array2<f64> {
    let mut r = rng::stream(seed, "gen_noise", block_idx);
    Array2::from_shape_fn((rows, cols), |_| r.sample(StandardNormal))
}

fn canonicalize(
    raw_blocks: &Array2<f64>,
    content_frames: usize,
    block_size: usize,
) -> LatentSequence {
    if content_frames == 0 {
        return LatentSequence {
            data: Array2::from_elem((block_size, raw_blocks.ncols()), EOP_VALUE),
            block_size,
            content_length: 0,
        };
    }
    let content = raw_blocks.slice(s![..content_frames, ..]).to_owned();
    pad_eop_frames(&content, block_size)
}

fn validate_request(params: &BackboneParams, req: &GenerateRequest) -> Result<()> {
    if req.max_blocks < 1 {
        return Err(Error::Config("max_blocks must be >= 1".into()));
    }
    req.sampler.validate()?;
    if req.prompt.style_id >= params.cfg.n_styles {
        return Err(Error::Config(format!(
            "style id {} out of range",
            req.prompt.style_id
        )));
    }
    Ok(())
}

/// Algorithm: prefill the prompt at tag -1, then per block draw noise, run
/// the sampling process against the cache, commit the clean block at tag 1,
/// and stop at the first detected EOP frame (or the block budget).
pub fn generate(
    params: &BackboneParams,
    req: &GenerateRequest,
    block_size: usize,
) -> Result<GenerateResult> {
    validate_request(params, req)?;
    let d = params.cfg.latent_dim;
    let mut cache = KvCache::new(params.cfg.layers, params.cfg.model_dim, block_size);
    prefill(params, &PromptInput::Real(&req.prompt), &mut cache)?;

    let guided = req.sampler.guidance_scale > 1.0;
    let mut uncond_cache = if guided {
        let mut c = KvCache::new(params.cfg.layers, params.cfg.model_dim, block_size);
        prefill(
            params,
            &PromptInput::Null {
                lyric_len: req.prompt.lyrics.len(),
            },
            &mut c,
        )?;
        Some(c)
    } else {
        None
    };

    let mut raw = Array2::zeros((0, d));
    let mut per_block_ms = Vec::new();
    let mut stopped_by = StoppedBy::MaxBlocks;
    let mut content_frames = None;

    for i in 0..req.max_blocks {
        let start = Instant::now();
        let z0 = gaussian_block(block_size, d, req.seed, i as u64);
        let block = {
            let mut cond = |x: &Array2<f64>, t: f64| denoise(params, x, t, &cache);
            let mut uncond_field = uncond_cache.as_ref().map(|c| {
                move |x: &Array2<f64>, t: f64| denoise(params, x, t, c)
            });
            run_sampler(&mut cond, uncond_field.as_mut(), &z0, &req.sampler)
                .map_err(|e| Error::Generation {
                    block: i,
                    source: Box::new(e),
                })?
        };

        commit(params, &block, &mut cache).map_err(|e| Error::Generation {
            block: i,
            source: Box::new(e),
        })?;
        if let Some(uc) = uncond_cache.as_mut() {
            commit(params, &block, uc).map_err(|e| Error::Generation {
                block: i,
                source: Box::new(e),
            })?;
        }
        raw.append(ndarray::Axis(0), block.view()).unwrap();
        per_block_ms.push(start.elapsed().as_secs_f64() * 1e3);

        if let Some(j) = detect_eop(&block, req.eop_threshold) {
            stopped_by = StoppedBy::Eop;
            content_frames = Some(i * block_size + j);
            break;
        }
    }

    let blocks_emitted = per_block_ms.len();
    let content = content_frames.unwrap_or(blocks_emitted * block_size);
    Ok(GenerateResult {
        latents: canonicalize(&raw, content, block_size),
        raw_blocks: raw,
        blocks_emitted,
        stopped_by,
        per_block_ms,
    })
}

fn run_sampler<C, U>(
    cond: &mut C,
    uncond: Option<&mut U>,
    z0: &Array2<f64>,
    cfg: &SamplerConfig,
) -> Result<Array2<f64>>
where
    C: VelocityField,
    U: VelocityField,
{
    sample_block(cond, uncond, z0, cfg)
}

/// No-cache baseline: identical algorithm, but every velocity evaluation
/// re-embeds and re-attends the full `[prompt, lyrics, committed clean
/// blocks, current noisy block]` sequence.
pub fn generate_uncached(
    params: &BackboneParams,
    req: &GenerateRequest,
    block_size: usize,
) -> Result<GenerateResult> {
    validate_request(params, req)?;
    let d = params.cfg.latent_dim;
    if req.sampler.guidance_scale > 1.0 {
        return Err(Error::Config(
            "the uncached baseline does not implement guidance".into(),
        ));
    }

    let mut committed: Array2<f64> = Array2::zeros((0, d));
    let mut raw = Array2::zeros((0, d));
    let mut per_block_ms = Vec::new();
    let mut stopped_by = StoppedBy::MaxBlocks;
    let mut content_frames = None;
    let prompt = &req.prompt;

    for i in 0..req.max_blocks {
        let start = Instant::now();
        let z0 = gaussian_block(block_size, d, req.seed, i as u64);
        let mask = build_inference_mask(1, prompt.lyrics.len(), i, block_size);
        let prefix = 1 + prompt.lyrics.len();
        let block = {
            let committed_ref = &committed;
            let mut field = |x: &Array2<f64>, t: f64| -> Result<Array2<f64>> {
                let mut specs: Vec<PosSpec> = Vec::with_capacity(prefix + (i + 1) * block_size);
                specs.push(PosSpec {
                    input: TokenInput::Style(prompt.style_id),
                    pos_index: 0,
                    tag: -1.0,
                });
                for (j, &tok) in prompt.lyrics.iter().enumerate() {
                    specs.push(PosSpec {
                        input: TokenInput::Lyric(tok),
                        pos_index: 1 + j,
                        tag: -1.0,
                    });
                }
                for r in 0..committed_ref.nrows() {
                    specs.push(PosSpec {
                        input: TokenInput::Latent(committed_ref.row(r)),
                        pos_index: prefix + r,
                        tag: 1.0,
                    });
                }
                for r in 0..block_size {
                    specs.push(PosSpec {
                        input: TokenInput::Latent(x.row(r)),
                        pos_index: prefix + i * block_size + r,
                        tag: t,
                    });
                }
                let n = specs.len();
                infer_full(params, &specs, &mask, n - block_size..n)
            };
            let mut no_uncond: Option<&mut fn(&Array2<f64>, f64) -> Result<Array2<f64>>> = None;
            sample_block(&mut field, no_uncond.take(), &z0, &req.sampler).map_err(|e| {
                Error::Generation {
                    block: i,
                    source: Box::new(e),
                }
            })?
        };

        committed.append(ndarray::Axis(0), block.view()).unwrap();
        raw.append(ndarray::Axis(0), block.view()).unwrap();
        per_block_ms.push(start.elapsed().as_secs_f64() * 1e3);

        if let Some(j) = detect_eop(&block, req.eop_threshold) {
            stopped_by = StoppedBy::Eop;
            content_frames = Some(i * block_size + j);
            break;
        }
    }

    let blocks_emitted = per_block_ms.len();
    let content = content_frames.unwrap_or(blocks_emitted * block_size);
    Ok(GenerateResult {
        latents: canonicalize(&raw, content, block_size),
        raw_blocks: raw,
        blocks_emitted,
        stopped_by,
        per_block_ms,
    })
}

/// One row of the generation-speed comparison.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchEntry {
    pub k: usize,
    pub cached_ms: f64,
    pub uncached_ms: f64,
    pub speedup: f64,
    /// Max elementwise |cached - uncached| over the raw outputs.
    pub max_output_diff: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub repeats: usize,
    pub sampler_steps: usize,
}

/// Times cached vs uncached generation at fixed block counts. EOP detection
/// is disabled so both paths emit exactly `k` blocks; outputs are asserted
/// equivalent. A warmup run precedes timing; the min over `repeats` is kept.
pub fn bench(
    params: &BackboneParams,
    base: &GenerateRequest,
    block_size: usize,
    ks: &[usize],
    repeats: usize,
) -> Result<BenchReport> {
    let mut entries = Vec::new();
    for &k in ks {
        let req = GenerateRequest {
            max_blocks: k,
            eop_threshold: 0.0,
            ..base.clone()
        };
        // Warmup + equivalence check.
        let cached = generate(params, &req, block_size)?;
        let uncached = generate_uncached(params, &req, block_size)?;
        if cached.raw_blocks.dim() != uncached.raw_blocks.dim() {
            return Err(Error::ShapeMismatch {
                context: "bench outputs",
                expected: format!("{:?}", cached.raw_blocks.dim()),
                got: format!("{:?}", uncached.raw_blocks.dim()),
            });
        }
        let max_diff = cached
            .raw_blocks
            .iter()
            .zip(uncached.raw_blocks.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);

        let mut cached_ms = f64::INFINITY;
        let mut uncached_ms = f64::INFINITY;
        for _ in 0..repeats.max(1) {
            let t = Instant::now();
            let _ = generate(params, &req, block_size)?;
            cached_ms = cached_ms.min(t.elapsed().as_secs_f64() * 1e3);
            let t = Instant::now();
            let _ = generate_uncached(params, &req, block_size)?;
            uncached_ms = uncached_ms.min(t.elapsed().as_secs_f64() * 1e3);
        }
        entries.push(BenchEntry {
            k,
            cached_ms,
            uncached_ms,
            speedup: uncached_ms / cached_ms,
            max_output_diff: max_diff,
        });
    }
    Ok(BenchReport {
        entries,
        repeats,
        sampler_steps: base.sampler.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;
    use crate::synthdata::{Corpus, ToySpec};

    fn tiny_params() -> BackboneParams {
        BackboneParams::init(&ModelConfig::tiny_for_tests(), 21)
    }

    fn req(max_blocks: usize, seed: u64) -> GenerateRequest {
        GenerateRequest {
            prompt: Prompt {
                style_id: 0,
                lyrics: vec![1, 2, 3],
            },
            max_blocks,
            sampler: SamplerConfig {
                steps: 4,
                ..Default::default()
            },
            eop_threshold: DEFAULT_EOP_THRESHOLD,
            seed,
        }
    }

    #[test]
    fn detect_eop_examples() {
        let mut block = Array2::zeros((3, 4));
        assert_eq!(detect_eop(&block, 0.5), None); // all zeros: deviation 1.0
        block.row_mut(1).fill(EOP_VALUE);
        assert_eq!(detect_eop(&block, 0.5), Some(1));
        block.row_mut(0).fill(EOP_VALUE);
        assert_eq!(detect_eop(&block, 0.5), Some(0));
        // Disabled detection.
        assert_eq!(detect_eop(&block, 0.0), None);
    }

    #[test]
    fn detect_eop_threshold_sweep_on_corpus_separates_perfectly() {
        // On the sigma = 0.1 corpus, threshold 0.5 must classify every
        // content frame as non-EOP and every padding frame as EOP.
        let spec = ToySpec::default();
        let corpus = Corpus::generate(&spec, 300).unwrap();
        let mut best: Option<(f64, f64, f64)> = None;
        for threshold in [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9] {
            let mut tp = 0usize;
            let mut fp = 0usize;
            let mut fn_ = 0usize;
            for song in &corpus.songs {
                let padded = crate::synthdata::pad_eop(song, spec.block_size);
                for j in 0..padded.total_frames() {
                    let frame = padded.data.slice(s![j..j + 1, ..]).to_owned();
                    let detected = detect_eop(&frame, threshold).is_some();
                    let is_eop = j >= padded.content_length;
                    match (detected, is_eop) {
                        (true, true) => tp += 1,
                        (true, false) => fp += 1,
                        (false, true) => fn_ += 1,
                        (false, false) => {}
                    }
                }
            }
            let precision = tp as f64 / (tp + fp).max(1) as f64;
            let recall = tp as f64 / (tp + fn_).max(1) as f64;
            if threshold == 0.5 {
                best = Some((threshold, precision, recall));
            }
        }
        let (_, p, r) = best.unwrap();
        assert_eq!(p, 1.0, "precision at threshold 0.5");
        assert_eq!(r, 1.0, "recall at threshold 0.5");
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        let params = tiny_params();
        let a = generate(&params, &req(3, 5), 2).unwrap();
        let b = generate(&params, &req(3, 5), 2).unwrap();
        assert_eq!(a.raw_blocks, b.raw_blocks);
        assert_eq!(a.blocks_emitted, b.blocks_emitted);
        assert!(a.blocks_emitted <= 3);
        let c = generate(&params, &req(3, 6), 2).unwrap();
        assert!(a.raw_blocks != c.raw_blocks);
    }

    #[test]
    fn single_block_budget_stops_at_one_block() {
        let params = tiny_params();
        let mut r = req(1, 7);
        r.eop_threshold = 0.0;
        let out = generate(&params, &r, 2).unwrap();
        assert_eq!(out.blocks_emitted, 1);
        assert_eq!(out.stopped_by, StoppedBy::MaxBlocks);
    }

    #[test]
    fn cached_and_uncached_agree_on_random_params() {
        let params = tiny_params();
        for seed in 0..3u64 {
            let mut r = req(3, seed);
            r.eop_threshold = 0.0;
            let cached = generate(&params, &r, 2).unwrap();
            let uncached = generate_uncached(&params, &r, 2).unwrap();
            assert_eq!(cached.raw_blocks.dim(), uncached.raw_blocks.dim());
            for (a, b) in cached.raw_blocks.iter().zip(uncached.raw_blocks.iter()) {
                assert!(
                    (a - b).abs() <= 1e-5 * (1.0 + a.abs().max(b.abs())),
                    "seed {seed}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn canonical_output_is_valid_latent_sequence() {
        let params = tiny_params();
        let out = generate(&params, &req(4, 11), 2).unwrap();
        out.latents.validate().unwrap();
        if out.stopped_by == StoppedBy::Eop {
            // The final raw block must contain a detected EOP frame.
            let b = 2;
            let last = out
                .raw_blocks
                .slice(s![(out.blocks_emitted - 1) * b.., ..])
                .to_owned();
            assert!(detect_eop(&last, DEFAULT_EOP_THRESHOLD).is_some());
        }
    }
}
