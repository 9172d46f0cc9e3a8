//! Cross-pair preference optimization: candidate scoring, winner/loser pair
//! construction with loser-case balancing, DPO with a flow-matching MSE
//! reward surrogate, and the separate-DPO-plus-merge baseline.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_train, build_train_specs, build_training_mask, forward_train, BackboneParams, Prompt,
    SequenceLayout,
};
use crate::checkpoint::merge_models;
use crate::error::{Error, Result};
use crate::flow;
use crate::generator::{generate, GenerateRequest, DEFAULT_EOP_THRESHOLD};
use crate::rng;
use crate::synthdata::{score_preferences, Corpus, LatentSequence, PreferenceScores, SCORE_DIMS};
use crate::trainer::AdamW;

/// The two cross-pair groups. Dimension indices follow
/// [`PreferenceScores::as_array`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairGroup {
    /// (musicality, lyric_alignment)
    G1,
    /// (style_similarity, audio_quality)
    G2,
}

impl PairGroup {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            PairGroup::G1 => (0, 2),
            PairGroup::G2 => (1, 3),
        }
    }

    pub fn dim_names(&self) -> (&'static str, &'static str) {
        let (a, b) = self.dims();
        (SCORE_DIMS[a], SCORE_DIMS[b])
    }
}

/// Which constraint the losing sample satisfies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoserCase {
    FirstOnly,
    SecondOnly,
    BothButWorse,
}

/// Per-dimension satisfaction thresholds, fixed per experiment.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Thresholds(pub [f64; 4]);

impl Thresholds {
    /// Per-dimension medians over a candidate pool.
    pub fn from_pool(pool: &CandidatePool) -> Self {
        let mut out = [0.0; 4];
        for d in 0..4 {
            let mut vals: Vec<f64> = pool
                .candidates
                .iter()
                .map(|c| c.scores.as_array()[d])
                .collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = vals.len();
            out[d] = if n == 0 {
                0.5
            } else if n % 2 == 1 {
                vals[n / 2]
            } else {
                0.5 * (vals[n / 2 - 1] + vals[n / 2])
            };
        }
        Self(out)
    }

    pub fn satisfied(&self, scores: &PreferenceScores) -> [bool; 4] {
        let arr = scores.as_array();
        [
            arr[0] >= self.0[0],
            arr[1] >= self.0[1],
            arr[2] >= self.0[2],
            arr[3] >= self.0[3],
        ]
    }
}

/// One scored generation.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub prompt_idx: usize,
    pub seed: u64,
    pub latents: LatentSequence,
    pub scores: PreferenceScores,
}

/// All candidates for a prompt set, flat with prompt indices.
#[derive(Debug, Clone)]
pub struct CandidatePool {
    pub prompts: Vec<Prompt>,
    pub candidates: Vec<Candidate>,
}

impl CandidatePool {
    pub fn by_prompt(&self, prompt_idx: usize) -> Vec<usize> {
        (0..self.candidates.len())
            .filter(|&i| self.candidates[i].prompt_idx == prompt_idx)
            .collect()
    }
}

/// Generates and scores `n_candidates` seeded samples for each of
/// `n_prompts` prompts drawn from the corpus.
pub fn generate_candidates(
    params: &BackboneParams,
    corpus: &Corpus,
    n_prompts: usize,
    n_candidates: usize,
    sampler: &crate::flow::SamplerConfig,
    seed: u64,
) -> Result<CandidatePool> {
    if n_prompts == 0 || n_candidates < 2 {
        return Err(Error::Config(
            "need at least one prompt and two candidates per prompt".into(),
        ));
    }
    let emb = corpus.embeddings();
    let spec = &corpus.spec;
    let mut order: Vec<usize> = (0..corpus.songs.len()).collect();
    let mut r = rng::stream(seed, "cand_prompts", 0);
    order.shuffle(&mut r);
    let prompts: Vec<Prompt> = order
        .into_iter()
        .take(n_prompts)
        .map(|i| Prompt {
            style_id: corpus.songs[i].style_id,
            lyrics: corpus.songs[i].lyrics.clone(),
        })
        .collect();

    let max_blocks = spec.max_padded_frames() / spec.block_size + 1;
    use rayon::prelude::*;
    let jobs: Vec<(usize, u64)> = (0..prompts.len())
        .flat_map(|p| {
            (0..n_candidates)
                .map(move |c| (p, rng::derive_seed(seed, "cand_gen", (p * n_candidates + c) as u64)))
        })
        .collect();
    let candidates: Vec<Candidate> = jobs
        .par_iter()
        .map(|&(p, gen_seed)| -> Result<Candidate> {
            let req = GenerateRequest {
                prompt: prompts[p].clone(),
                max_blocks,
                sampler: sampler.clone(),
                eop_threshold: DEFAULT_EOP_THRESHOLD,
                seed: gen_seed,
            };
            let out = generate(params, &req, spec.block_size)?;
            let scores = score_preferences(
                &out.latents,
                prompts[p].style_id,
                &prompts[p].lyrics,
                spec,
                &emb,
                &corpus.stats,
            );
            Ok(Candidate {
                prompt_idx: p,
                seed: gen_seed,
                latents: out.latents,
                scores,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidatePool {
        prompts,
        candidates,
    })
}

/// A winner/loser pair within one group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt_idx: usize,
    pub winner: usize,
    pub loser: usize,
    pub group: PairGroup,
    pub loser_case: LoserCase,
    pub winner_scores: PreferenceScores,
    pub loser_scores: PreferenceScores,
}

/// Output of pair construction.
#[derive(Debug, Clone)]
pub struct PairBuild {
    pub pairs: Vec<PreferencePair>,
    pub prompts_skipped: usize,
    pub raw_case_counts: [usize; 3],
}

fn case_index(case: LoserCase) -> usize {
    match case {
        LoserCase::FirstOnly => 0,
        LoserCase::SecondOnly => 1,
        LoserCase::BothButWorse => 2,
    }
}

/// Builds pairs for one group: the winner (best summed group score among
/// candidates satisfying both dimensions) against every loser satisfying at
/// least one dimension with a strictly lower sum. The three loser cases are
/// then balanced to equal counts, discarding surplus pairs (strongest margin
/// first within each case).
pub fn build_pairs(
    pool: &CandidatePool,
    thresholds: &Thresholds,
    group: PairGroup,
    target_count: usize,
) -> PairBuild {
    let (d1, d2) = group.dims();
    let mut by_case: [Vec<PreferencePair>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut prompts_skipped = 0usize;

    for p in 0..pool.prompts.len() {
        let cand_idx = pool.by_prompt(p);
        let mut winner: Option<(usize, f64)> = None;
        for &ci in &cand_idx {
            let c = &pool.candidates[ci];
            let flags = thresholds.satisfied(&c.scores);
            if flags[d1] && flags[d2] {
                let sum = c.scores.as_array()[d1] + c.scores.as_array()[d2];
                let better = match winner {
                    None => true,
                    Some((_, best)) => sum > best,
                };
                if better {
                    winner = Some((ci, sum));
                }
            }
        }
        let Some((w, wsum)) = winner else {
            prompts_skipped += 1;
            continue;
        };
        for &ci in &cand_idx {
            if ci == w {
                continue;
            }
            let c = &pool.candidates[ci];
            let flags = thresholds.satisfied(&c.scores);
            let lsum = c.scores.as_array()[d1] + c.scores.as_array()[d2];
            if lsum >= wsum {
                continue; // strict inequality required
            }
            let case = match (flags[d1], flags[d2]) {
                (true, false) => LoserCase::FirstOnly,
                (false, true) => LoserCase::SecondOnly,
                (true, true) => LoserCase::BothButWorse,
                (false, false) => continue, // never a loser
            };
            by_case[case_index(case)].push(PreferencePair {
                prompt_idx: p,
                winner: w,
                loser: ci,
                group,
                loser_case: case,
                winner_scores: pool.candidates[w].scores,
                loser_scores: c.scores,
            });
        }
    }

    let raw_case_counts = [by_case[0].len(), by_case[1].len(), by_case[2].len()];
    // Strongest margins first, deterministic tie-break on indices.
    for case in by_case.iter_mut() {
        case.sort_by(|a, b| {
            let (d1, d2) = group.dims();
            let ma = a.winner_scores.as_array()[d1] + a.winner_scores.as_array()[d2]
                - a.loser_scores.as_array()[d1]
                - a.loser_scores.as_array()[d2];
            let mb = b.winner_scores.as_array()[d1] + b.winner_scores.as_array()[d2]
                - b.loser_scores.as_array()[d1]
                - b.loser_scores.as_array()[d2];
            mb.partial_cmp(&ma)
                .unwrap()
                .then(a.prompt_idx.cmp(&b.prompt_idx))
                .then(a.loser.cmp(&b.loser))
        });
    }
    let per_case = raw_case_counts
        .iter()
        .copied()
        .min()
        .unwrap_or(0)
        .min(target_count / 3);
    let mut pairs = Vec::with_capacity(per_case * 3);
    for case in &by_case {
        pairs.extend(case.iter().take(per_case).cloned());
    }
    PairBuild {
        pairs,
        prompts_skipped,
        raw_case_counts,
    }
}

/// Pairs for single-dimension DPO (the merge-of-four baseline): winner
/// satisfies the dimension, loser does not, strictly lower score.
pub fn build_pairs_single_dim(
    pool: &CandidatePool,
    thresholds: &Thresholds,
    dim: usize,
    target_count: usize,
) -> PairBuild {
    let mut pairs = Vec::new();
    let mut prompts_skipped = 0usize;
    for p in 0..pool.prompts.len() {
        let cand_idx = pool.by_prompt(p);
        let mut winner: Option<(usize, f64)> = None;
        for &ci in &cand_idx {
            let s = pool.candidates[ci].scores.as_array()[dim];
            if s >= thresholds.0[dim] {
                let better = match winner {
                    None => true,
                    Some((_, best)) => s > best,
                };
                if better {
                    winner = Some((ci, s));
                }
            }
        }
        let Some((w, wscore)) = winner else {
            prompts_skipped += 1;
            continue;
        };
        for &ci in &cand_idx {
            if ci == w {
                continue;
            }
            let s = pool.candidates[ci].scores.as_array()[dim];
            if s < thresholds.0[dim] && s < wscore {
                pairs.push(PreferencePair {
                    prompt_idx: p,
                    winner: w,
                    loser: ci,
                    group: PairGroup::G1, // group label unused for single-dim
                    loser_case: LoserCase::FirstOnly,
                    winner_scores: pool.candidates[w].scores,
                    loser_scores: pool.candidates[ci].scores,
                });
            }
        }
    }
    pairs.sort_by(|a, b| {
        a.prompt_idx
            .cmp(&b.prompt_idx)
            .then(a.winner.cmp(&b.winner))
            .then(a.loser.cmp(&b.loser))
    });
    pairs.truncate(target_count);
    PairBuild {
        pairs,
        prompts_skipped,
        raw_case_counts: [0, 0, 0],
    }
}

// ---------------------------------------------------------------------------
// DPO loss and training
// ---------------------------------------------------------------------------

/// The cross-pair DPO loss given the four flow MSEs:
/// implicit rewards `r = -(mse_policy - mse_reference)` per sample,
/// `loss = -log sigmoid(beta * (r_w - r_l))`. Returns the loss and its
/// gradients with respect to the two policy MSEs.
pub fn cpdpo_core(
    mse_policy_winner: f64,
    mse_ref_winner: f64,
    mse_policy_loser: f64,
    mse_ref_loser: f64,
    beta: f64,
) -> Result<(f64, f64, f64)> {
    let delta =
        (mse_ref_winner - mse_policy_winner) + (mse_policy_loser - mse_ref_loser);
    if !delta.is_finite() {
        return Err(Error::NonFinite {
            context: "cpdpo reward",
            step: None,
        });
    }
    // -ln sigmoid(beta * delta) = softplus(-beta * delta), computed stably.
    let z = -beta * delta;
    let loss = if z > 30.0 { z } else { (1.0 + z.exp()).ln() };
    let sig = 1.0 / (1.0 + (beta * delta).exp()); // sigmoid(-beta*delta)
    let d_mse_pw = beta * sig;
    let d_mse_pl = -beta * sig;
    Ok((loss, d_mse_pw, d_mse_pl))
}

/// DPO optimization settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoConfig {
    pub beta: f64,
    pub lr: f64,
    pub steps: usize,
    pub pairs_per_step: usize,
    pub holdout_frac: f64,
    pub grad_clip_norm: f64,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            lr: 1e-5,
            steps: 200,
            pairs_per_step: 4,
            holdout_frac: 0.2,
            grad_clip_norm: 0.5,
            seed: 99,
        }
    }
}

struct SampleNoise {
    block_t: Vec<f64>,
    z0: Array2<f64>,
}

fn draw_noise(latents: &LatentSequence, r: &mut impl Rng) -> SampleNoise {
    let k = latents.n_blocks();
    let block_t: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
    let z0 = Array2::from_shape_fn(latents.data.raw_dim(), |_| r.sample(StandardNormal));
    SampleNoise { block_t, z0 }
}

/// Flow-matching MSE (the Eq.-4 objective) of a sample under `params` at the
/// given noise draw; optionally backpropagates `upstream` into `grads`.
fn mse_flow(
    params: &BackboneParams,
    prompt: &Prompt,
    latents: &LatentSequence,
    noise: &SampleNoise,
    upstream_and_grads: Option<(f64, &mut BackboneParams)>,
) -> Result<f64> {
    let b = latents.block_size;
    let k = latents.n_blocks();
    let layout = SequenceLayout::new(1, prompt.lyrics.len(), k, b)?;
    let clean = &latents.data;
    let noisy = flow::interpolate(clean, &noise.z0, &noise.block_t, b)?;
    let target = flow::velocity_target(clean, &noise.z0)?;
    let mask = build_training_mask(&layout)?;
    let specs = build_train_specs(
        Some(prompt.style_id),
        Some(&prompt.lyrics),
        prompt.lyrics.len(),
        clean,
        &noisy,
        &noise.block_t,
        &layout,
    );
    let (out, trace) = forward_train(params, &specs, &mask, &layout)?;
    let loss = flow::bfm_loss(&out.vhat, &target, k)?;
    if let Some((upstream, grads)) = upstream_and_grads {
        let d_vhat = flow::bfm_loss_grad(&out.vhat, &target, k, upstream)?;
        backward_train(params, &trace, &d_vhat, None, grads);
    }
    Ok(loss)
}

/// Mean implicit-reward margin `r_w - r_l` over a pair set with seeded noise.
pub fn reward_margin(
    policy: &BackboneParams,
    reference: &BackboneParams,
    pool: &CandidatePool,
    pairs: &[PreferencePair],
    seed: u64,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    use rayon::prelude::*;
    let margins: Vec<Result<f64>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let mut r = rng::stream(seed, "margin_noise", i as u64);
            let w = &pool.candidates[pair.winner];
            let l = &pool.candidates[pair.loser];
            let prompt = &pool.prompts[pair.prompt_idx];
            let noise_w = draw_noise(&w.latents, &mut r);
            let noise_l = draw_noise(&l.latents, &mut r);
            let mse_pw = mse_flow(policy, prompt, &w.latents, &noise_w, None)?;
            let mse_rw = mse_flow(reference, prompt, &w.latents, &noise_w, None)?;
            let mse_pl = mse_flow(policy, prompt, &l.latents, &noise_l, None)?;
            let mse_rl = mse_flow(reference, prompt, &l.latents, &noise_l, None)?;
            Ok((mse_rw - mse_pw) + (mse_pl - mse_rl))
        })
        .collect();
    let mut total = 0.0;
    for m in margins {
        total += m?;
    }
    Ok(total / pairs.len() as f64)
}

/// Outcome of one DPO run.
pub struct DpoOutcome {
    pub params: BackboneParams,
    pub holdout_margin: f64,
    pub train_pairs: usize,
    pub holdout_pairs: usize,
    pub mean_loss_last_quarter: f64,
}

/// Runs DPO from `base` (also the frozen reference) over the given pairs.
pub fn run_dpo(
    base: &BackboneParams,
    pool: &CandidatePool,
    pairs: &[PreferencePair],
    cfg: &DpoConfig,
) -> Result<DpoOutcome> {
    if pairs.is_empty() {
        return Err(Error::Training("no preference pairs".into()));
    }
    let reference = base;
    let ref_fingerprint: Vec<f64> = reference
        .collect()
        .iter()
        .map(|(_, a)| a.sum())
        .collect();

    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut r = rng::stream(cfg.seed, "dpo_split", 0);
    order.shuffle(&mut r);
    let n_holdout = ((pairs.len() as f64 * cfg.holdout_frac).round() as usize)
        .min(pairs.len().saturating_sub(1));
    let holdout: Vec<PreferencePair> = order[..n_holdout].iter().map(|&i| pairs[i].clone()).collect();
    let train: Vec<PreferencePair> = order[n_holdout..].iter().map(|&i| pairs[i].clone()).collect();
    if train.is_empty() {
        return Err(Error::Training("no training pairs after holdout split".into()));
    }

    let mut policy = base.clone();
    let mut opt = AdamW::new(&policy, (0.8, 0.9), 0.0);
    let mut recent_losses = Vec::new();

    for step in 1..=cfg.steps {
        let mut step_rng = rng::stream(cfg.seed, "dpo_step", step as u64);
        let idx_dist = rand::distributions::Uniform::new(0, train.len());
        use rand::distributions::Distribution;
        let chosen: Vec<usize> = (0..cfg.pairs_per_step)
            .map(|_| idx_dist.sample(&mut step_rng))
            .collect();
        // Pre-draw noise serially so parallel evaluation stays deterministic.
        let jobs: Vec<(usize, SampleNoise, SampleNoise)> = chosen
            .iter()
            .map(|&pi| {
                let w = &pool.candidates[train[pi].winner];
                let l = &pool.candidates[train[pi].loser];
                let nw = draw_noise(&w.latents, &mut step_rng);
                let nl = draw_noise(&l.latents, &mut step_rng);
                (pi, nw, nl)
            })
            .collect();

        use rayon::prelude::*;
        let upstream = 1.0 / jobs.len() as f64;
        let results: Vec<Result<(f64, BackboneParams)>> = jobs
            .par_iter()
            .map(|(pi, nw, nl)| {
                let pair = &train[*pi];
                let prompt = &pool.prompts[pair.prompt_idx];
                let w = &pool.candidates[pair.winner];
                let l = &pool.candidates[pair.loser];
                // Policy passes with traces, reference without.
                let mse_rw = mse_flow(reference, prompt, &w.latents, nw, None)?;
                let mse_rl = mse_flow(reference, prompt, &l.latents, nl, None)?;
                let mse_pw = mse_flow(&policy, prompt, &w.latents, nw, None)?;
                let mse_pl = mse_flow(&policy, prompt, &l.latents, nl, None)?;
                let (loss, d_pw, d_pl) =
                    cpdpo_core(mse_pw, mse_rw, mse_pl, mse_rl, cfg.beta)?;
                let mut grads = policy.zeros_like();
                mse_flow(
                    &policy,
                    prompt,
                    &w.latents,
                    nw,
                    Some((d_pw * upstream, &mut grads)),
                )?;
                mse_flow(
                    &policy,
                    prompt,
                    &l.latents,
                    nl,
                    Some((d_pl * upstream, &mut grads)),
                )?;
                Ok((loss, grads))
            })
            .collect();

        let mut step_loss = 0.0;
        let mut total: Option<BackboneParams> = None;
        for res in results {
            let (loss, g) = res?;
            step_loss += loss * upstream;
            match &mut total {
                None => total = Some(g),
                Some(t) => t.add_scaled(&g, 1.0),
            }
        }
        let mut grads = total.expect("non-empty dpo batch");
        let norm = grads.global_norm();
        if !norm.is_finite() || !step_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "dpo step",
                step: Some(step),
            });
        }
        if norm > cfg.grad_clip_norm {
            grads.scale(cfg.grad_clip_norm / norm);
        }
        opt.update(&mut policy, &grads, cfg.lr);
        recent_losses.push(step_loss);
    }

    // Reference must be untouched.
    let after: Vec<f64> = reference.collect().iter().map(|(_, a)| a.sum()).collect();
    if ref_fingerprint != after {
        return Err(Error::Training("reference parameters changed during DPO".into()));
    }

    let eval_pairs = if holdout.is_empty() { &train } else { &holdout };
    let holdout_margin = reward_margin(&policy, reference, pool, eval_pairs, cfg.seed)?;
    let q = recent_losses.len().div_ceil(4);
    let mean_loss_last_quarter =
        recent_losses[recent_losses.len() - q..].iter().sum::<f64>() / q as f64;
    Ok(DpoOutcome {
        params: policy,
        holdout_margin,
        train_pairs: train.len(),
        holdout_pairs: holdout.len(),
        mean_loss_last_quarter,
    })
}

/// Outcome of the full cross-pair optimization.
pub struct CppoOutcome {
    pub merged: BackboneParams,
    pub group_models: Vec<(PairGroup, BackboneParams)>,
    pub group_margins: Vec<(PairGroup, f64)>,
    pub pair_counts: Vec<(PairGroup, usize)>,
}

/// Trains one model per group from the base checkpoint, then merges the two
/// by uniform parameter average.
pub fn run_cppo(
    base: &BackboneParams,
    pool: &CandidatePool,
    thresholds: &Thresholds,
    cfg: &DpoConfig,
    target_pairs: usize,
) -> Result<CppoOutcome> {
    let mut group_models = Vec::new();
    let mut group_margins = Vec::new();
    let mut pair_counts = Vec::new();
    for group in [PairGroup::G1, PairGroup::G2] {
        let built = build_pairs(pool, thresholds, group, target_pairs);
        let outcome = run_dpo(base, pool, &built.pairs, cfg)?;
        pair_counts.push((group, built.pairs.len()));
        group_margins.push((group, outcome.holdout_margin));
        group_models.push((group, outcome.params));
    }
    let merged = merge_models(
        &[&group_models[0].1, &group_models[1].1],
        &[0.5, 0.5],
    )?;
    Ok(CppoOutcome {
        merged,
        group_models,
        group_margins,
        pair_counts,
    })
}

/// The ablation baseline: separate DPO per preference dimension, then a
/// uniform merge of the four models.
pub fn run_merge4(
    base: &BackboneParams,
    pool: &CandidatePool,
    thresholds: &Thresholds,
    cfg: &DpoConfig,
    target_pairs: usize,
) -> Result<BackboneParams> {
    let mut models = Vec::new();
    for dim in 0..4 {
        let built = build_pairs_single_dim(pool, thresholds, dim, target_pairs);
        if built.pairs.is_empty() {
            return Err(Error::Training(format!(
                "no single-dimension pairs for {}",
                SCORE_DIMS[dim]
            )));
        }
        let outcome = run_dpo(base, pool, &built.pairs, cfg)?;
        models.push(outcome.params);
    }
    let refs: Vec<&BackboneParams> = models.iter().collect();
    merge_models(&refs, &[0.25; 4])
}

// ---------------------------------------------------------------------------
// Pair-file serialization (JSON lines)
// ---------------------------------------------------------------------------

/// JSONL record for the pair dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: PromptRecord,
    pub winner: usize,
    pub loser: usize,
    pub group: PairGroup,
    pub loser_case: LoserCase,
    pub winner_scores: PreferenceScores,
    pub loser_scores: PreferenceScores,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptRecord {
    pub style_id: usize,
    pub lyrics: Vec<u16>,
}

pub fn pair_records(pool: &CandidatePool, pairs: &[PreferencePair]) -> Vec<PairRecord> {
    pairs
        .iter()
        .map(|p| PairRecord {
            prompt: PromptRecord {
                style_id: pool.prompts[p.prompt_idx].style_id,
                lyrics: pool.prompts[p.prompt_idx].lyrics.clone(),
            },
            winner: p.winner,
            loser: p.loser,
            group: p.group,
            loser_case: p.loser_case,
            winner_scores: p.winner_scores,
            loser_scores: p.loser_scores,
        })
        .collect()
}
