//! Command implementations behind the `blockflow` binary: `data`, `train`,
//! `generate`, `dpo`, `eval`, `ablate`, `bench`. Everything here is also
//! called directly by the integration tests, so commands are plain functions
//! over paths and configs that return serializable reports.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use serde_json::json;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneParams, ModelConfig, Prompt, SequenceLayout};
use crate::checkpoint::{self, checkpoint_hash, CheckpointMeta};
use crate::cppo::{
    build_pairs, build_pairs_single_dim, generate_candidates, pair_records, run_cppo, run_dpo,
    run_merge4, CandidatePool, DpoConfig, PairGroup, Thresholds,
};
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::generator::{bench, generate, GenerateRequest, StoppedBy, DEFAULT_EOP_THRESHOLD};
use crate::repa::{self, RepaSample, Teacher, TeacherConfig};
use crate::rng;
use crate::synthdata::{
    corpus_hash, decode_lyrics, load_corpus, pad_eop, save_corpus, score_preferences, Corpus,
    ToySpec, SCORE_DIMS,
};
use crate::trainer::{fit, FitSetup, TrainConfig};

fn default_corpus_count() -> usize {
    1000
}
fn default_eval_prompts() -> usize {
    40
}
fn default_eval_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}
fn default_dpo_prompts() -> usize {
    32
}
fn default_dpo_candidates() -> usize {
    8
}
fn default_target_pairs() -> usize {
    usize::MAX
}

/// DPO pipeline settings: candidate generation plus the optimizer config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoPipelineConfig {
    #[serde(default)]
    pub dpo: DpoConfig,
    #[serde(default = "default_dpo_prompts")]
    pub n_prompts: usize,
    #[serde(default = "default_dpo_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_target_pairs")]
    pub target_pairs: usize,
}

impl Default for DpoPipelineConfig {
    fn default() -> Self {
        Self {
            dpo: DpoConfig::default(),
            n_prompts: default_dpo_prompts(),
            n_candidates: default_dpo_candidates(),
            target_pairs: default_target_pairs(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    #[serde(default = "default_eval_prompts")]
    pub n_prompts: usize,
    #[serde(default = "default_eval_seeds")]
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_prompts: default_eval_prompts(),
            seeds: default_eval_seeds(),
        }
    }
}

/// The full experiment configuration; every command reads the part it needs.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: ToySpec,
    pub corpus_count: usize,
    pub corpus_dir: PathBuf,
    pub model: ModelConfig,
    pub teacher: TeacherConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub dpo: DpoPipelineConfig,
    pub eval: EvalConfig,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn desk_default(root: &Path) -> Self {
        Self {
            data: ToySpec::default(),
            corpus_count: default_corpus_count(),
            corpus_dir: root.join("corpus"),
            model: ModelConfig::default(),
            teacher: TeacherConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            dpo: DpoPipelineConfig::default(),
            eval: EvalConfig::default(),
            out_dir: root.join("run"),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn hash(&self) -> String {
        checkpoint::sha256_hex(serde_json::to_string(self).unwrap().as_bytes())
    }
}

// ---------------------------------------------------------------------------
// data
// ---------------------------------------------------------------------------

pub fn cmd_data(spec: &ToySpec, count: usize, out: &Path) -> Result<serde_json::Value> {
    let corpus = Corpus::generate(spec, count)?;
    save_corpus(&corpus, out)?;
    Ok(json!({
        "command": "data",
        "count": count,
        "spec_hash": spec.hash(),
        "corpus_hash": corpus_hash(out)?,
        "out": out,
    }))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn cmd_train(cfg: &ExperimentConfig, resume_from: Option<PathBuf>) -> Result<serde_json::Value> {
    let corpus = load_corpus(&cfg.corpus_dir)?;
    if corpus.spec != cfg.data {
        return Err(Error::HashMismatch {
            what: "corpus spec vs experiment config",
            expected: cfg.data.hash(),
            actual: corpus.spec.hash(),
        });
    }
    let setup = FitSetup {
        model: &cfg.model,
        teacher_cfg: &cfg.teacher,
        train: &cfg.train,
        out_dir: &cfg.out_dir,
        config_hash: cfg.hash(),
        resume_from,
    };
    let outcome = fit(&corpus, &setup)?;
    let metrics = crate::trainer::load_metrics(&outcome.metrics_path)?;
    let last = metrics.iter().rev().find(|m| !m.aborted);
    Ok(json!({
        "command": "train",
        "config_hash": cfg.hash(),
        "steps": cfg.train.steps,
        "final_checkpoint": outcome.final_checkpoint,
        "checkpoint_hash": checkpoint_hash(&outcome.final_checkpoint)?,
        "metrics_path": outcome.metrics_path,
        "final_loss_bfm": last.map(|m| m.loss_bfm),
        "final_loss_repa": last.and_then(|m| m.loss_repa),
    }))
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub struct GenerateArgs {
    pub ckpt: PathBuf,
    pub style: usize,
    pub lyrics: Vec<u16>,
    pub max_blocks: usize,
    pub steps: usize,
    pub guidance_scale: f64,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<serde_json::Value> {
    let (params, meta) = checkpoint::load(&args.ckpt)?;
    let spec = &meta.data_spec;
    let req = GenerateRequest {
        prompt: Prompt {
            style_id: args.style,
            lyrics: args.lyrics.clone(),
        },
        max_blocks: args.max_blocks,
        sampler: SamplerConfig {
            steps: args.steps,
            guidance_scale: args.guidance_scale,
            seed: args.seed,
            ..Default::default()
        },
        eop_threshold: DEFAULT_EOP_THRESHOLD,
        seed: args.seed,
    };
    let out = generate(&params, &req, spec.block_size)?;

    // Output record uses the corpus format; content frames only.
    let song = crate::synthdata::ToySong {
        lyrics: args.lyrics.clone(),
        style_id: args.style,
        latents: out.latents.content().to_owned(),
    };
    if let Some(parent) = args.out.parent() {
        std::fs::create_dir_all(parent)?;
    }
    crate::synthdata::write_record(&args.out, &song, args.seed, &spec.hash())?;

    let mut latent_bytes = Vec::new();
    for &x in out.latents.data.iter() {
        latent_bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let sidecar = json!({
        "deterministic": {
            "blocks_emitted": out.blocks_emitted,
            "stopped_by": out.stopped_by,
            "content_frames": out.latents.content_length,
            "output_sha256": checkpoint::sha256_hex(&latent_bytes),
            "checkpoint_hash": checkpoint_hash(&args.ckpt)?,
            "seed": args.seed,
            "steps": args.steps,
        },
        "timing": { "per_block_ms": out.per_block_ms },
    });
    std::fs::write(
        args.out.with_extension("json"),
        serde_json::to_string_pretty(&sidecar)?,
    )?;
    Ok(sidecar["deterministic"].clone())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd { mean: 0.0, std: 0.0 };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Evaluation report; every number is traceable to the checkpoint hash,
/// corpus hash, and seed list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_hash: Option<String>,
    pub corpus_hash: String,
    pub spec_hash: String,
    pub n_prompts: usize,
    pub seeds: Vec<u64>,
    pub sampler_steps: usize,
    pub lyric_decode_accuracy: MeanStd,
    pub scores: BTreeMap<String, MeanStd>,
    pub mean_oracle_score: MeanStd,
    pub length_tv_distance: f64,
    pub eop_stop_rate: f64,
    pub structure_proxy: Option<f64>,
}

/// Total-variation distance between two length histograms.
fn tv_distance(a: &[usize], b: &[usize]) -> f64 {
    let mut keys: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
    keys.sort_unstable();
    keys.dedup();
    let na = a.len().max(1) as f64;
    let nb = b.len().max(1) as f64;
    let mut tv = 0.0;
    for key in keys {
        let pa = a.iter().filter(|&&x| x == key).count() as f64 / na;
        let pb = b.iter().filter(|&&x| x == key).count() as f64 / nb;
        tv += (pa - pb).abs();
    }
    tv / 2.0
}

/// Structure-coherence proxy: teacher-feature alignment of the model's own
/// mid-layer states on a generated sequence, `1 - repa_loss` with every
/// block sampled and a seeded noise draw.
pub fn structure_proxy(
    params: &BackboneParams,
    teacher: &Teacher,
    prompt: &Prompt,
    latents: &crate::synthdata::LatentSequence,
    seed: u64,
) -> Result<f64> {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let b = latents.block_size;
    let k = latents.n_blocks();
    let layout = SequenceLayout::new(1, prompt.lyrics.len(), k, b)?;
    let mut r = rng::stream(seed, "proxy_noise", 0);
    let block_t: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
    let z0 = Array2::from_shape_fn(latents.data.raw_dim(), |_| r.sample(StandardNormal));
    let noisy = crate::flow::interpolate(&latents.data, &z0, &block_t, b)?;
    let mask = crate::backbone::build_training_mask(&layout)?;
    let specs = crate::backbone::build_train_specs(
        Some(prompt.style_id),
        Some(&prompt.lyrics),
        prompt.lyrics.len(),
        &latents.data,
        &noisy,
        &block_t,
        &layout,
    );
    let (out, _) = crate::backbone::forward_train(params, &specs, &mask, &layout)?;
    let sample = RepaSample::from_sampled((0..k).collect(), k);
    let feats = teacher.features(&latents.data);
    let loss = repa::repa_loss(params, &out.tap_hidden, &layout, &sample, &feats, 1.0, None)?;
    Ok(1.0 - loss.loss)
}

pub struct EvalArgs {
    pub ckpt: Option<PathBuf>,
    pub corpus: PathBuf,
    pub n_prompts: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    pub out: Option<PathBuf>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<EvalReport> {
    let corpus = load_corpus(&args.corpus)?;
    let emb = corpus.embeddings();
    let spec = corpus.spec.clone();
    let corpus_h = corpus_hash(&args.corpus)?;

    let loaded = match &args.ckpt {
        Some(dir) => {
            let (params, meta) = checkpoint::load(dir)?;
            let expected = spec.hash();
            if meta.corpus_spec_hash != expected {
                return Err(Error::HashMismatch {
                    what: "checkpoint corpus spec",
                    expected,
                    actual: meta.corpus_spec_hash,
                });
            }
            Some((params, meta, checkpoint_hash(dir)?))
        }
        None => None,
    };

    let n_prompts = args.n_prompts.min(corpus.songs.len());
    // Seeded prompt choice, stable across runs.
    let mut order: Vec<usize> = (0..corpus.songs.len()).collect();
    {
        use rand::seq::SliceRandom;
        let mut r = rng::stream(spec.master_seed, "eval_prompts", 0);
        order.shuffle(&mut r);
    }
    let prompt_songs: Vec<usize> = order.into_iter().take(n_prompts).collect();
    let corpus_lengths: Vec<usize> = corpus.songs.iter().map(|s| s.content_len()).collect();

    let mut accs = Vec::new();
    let mut per_dim: [Vec<f64>; 4] = Default::default();
    let mut oracle_means = Vec::new();
    let mut gen_lengths = Vec::new();
    let mut eop_stops = 0usize;
    let mut total_gens = 0usize;
    let mut proxies = Vec::new();

    match &loaded {
        None => {
            // Oracle self-test: score corpus songs against their own prompts.
            for &si in &prompt_songs {
                let song = &corpus.songs[si];
                let padded = pad_eop(song, spec.block_size);
                let decoded = decode_lyrics(&padded, &spec, &emb);
                let denom = song.lyrics.len().max(decoded.len()).max(1);
                let matches = song
                    .lyrics
                    .iter()
                    .zip(decoded.iter())
                    .filter(|(a, b)| a == b)
                    .count();
                accs.push(matches as f64 / denom as f64);
                let scores =
                    score_preferences(&padded, song.style_id, &song.lyrics, &spec, &emb, &corpus.stats);
                for (d, v) in scores.as_array().into_iter().enumerate() {
                    per_dim[d].push(v);
                }
                oracle_means.push(scores.mean());
                gen_lengths.push(song.content_len());
            }
            total_gens = prompt_songs.len();
        }
        Some((params, meta, _)) => {
            let teacher = Teacher::new(&meta.teacher, spec.latent_dim)?;
            let max_blocks = spec.max_padded_frames() / spec.block_size + 1;
            use rayon::prelude::*;
            let jobs: Vec<(usize, u64)> = prompt_songs
                .iter()
                .flat_map(|&si| args.seeds.iter().map(move |&s| (si, s)))
                .collect();
            #[allow(clippy::type_complexity)]
            let results: Vec<Result<(f64, [f64; 4], f64, usize, bool, f64)>> = jobs
                .par_iter()
                .map(|&(si, seed)| {
                    let song = &corpus.songs[si];
                    let prompt = Prompt {
                        style_id: song.style_id,
                        lyrics: song.lyrics.clone(),
                    };
                    let req = GenerateRequest {
                        prompt: prompt.clone(),
                        max_blocks,
                        sampler: SamplerConfig {
                            steps: args.steps,
                            seed,
                            ..Default::default()
                        },
                        eop_threshold: DEFAULT_EOP_THRESHOLD,
                        seed: rng::derive_seed(seed, "eval_gen", si as u64),
                    };
                    let out = generate(params, &req, spec.block_size)?;
                    let decoded = decode_lyrics(&out.latents, &spec, &emb);
                    let denom = song.lyrics.len().max(decoded.len()).max(1);
                    let matches = song
                        .lyrics
                        .iter()
                        .zip(decoded.iter())
                        .filter(|(a, b)| a == b)
                        .count();
                    let acc = matches as f64 / denom as f64;
                    let scores = score_preferences(
                        &out.latents,
                        song.style_id,
                        &song.lyrics,
                        &spec,
                        &emb,
                        &corpus.stats,
                    );
                    let proxy = structure_proxy(
                        params,
                        &teacher,
                        &prompt,
                        &out.latents,
                        rng::derive_seed(seed, "eval_proxy", si as u64),
                    )?;
                    Ok((
                        acc,
                        scores.as_array(),
                        scores.mean(),
                        out.latents.content_length,
                        out.stopped_by == StoppedBy::Eop,
                        proxy,
                    ))
                })
                .collect();
            for res in results {
                let (acc, dims, mean, len, eop, proxy) = res?;
                accs.push(acc);
                for (d, v) in dims.into_iter().enumerate() {
                    per_dim[d].push(v);
                }
                oracle_means.push(mean);
                gen_lengths.push(len);
                if eop {
                    eop_stops += 1;
                }
                proxies.push(proxy);
                total_gens += 1;
            }
        }
    }

    let mut scores_map = BTreeMap::new();
    for (d, name) in SCORE_DIMS.iter().enumerate() {
        scores_map.insert(name.to_string(), mean_std(&per_dim[d]));
    }
    let report = EvalReport {
        checkpoint_hash: loaded.as_ref().map(|(_, _, h)| h.clone()),
        corpus_hash: corpus_h,
        spec_hash: spec.hash(),
        n_prompts,
        seeds: args.seeds.clone(),
        sampler_steps: args.steps,
        lyric_decode_accuracy: mean_std(&accs),
        scores: scores_map,
        mean_oracle_score: mean_std(&oracle_means),
        length_tv_distance: tv_distance(&gen_lengths, &corpus_lengths),
        eop_stop_rate: if total_gens == 0 {
            0.0
        } else {
            eop_stops as f64 / total_gens as f64
        },
        structure_proxy: if proxies.is_empty() {
            None
        } else {
            Some(proxies.iter().sum::<f64>() / proxies.len() as f64)
        },
    };
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// dpo
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DpoMode {
    Cppo,
    Merge4,
    Single(usize),
}

impl DpoMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cppo" => Ok(DpoMode::Cppo),
            "merge4" => Ok(DpoMode::Merge4),
            other => {
                if let Some(dim_name) = other.strip_prefix("single:") {
                    let dim = SCORE_DIMS
                        .iter()
                        .position(|d| *d == dim_name)
                        .ok_or_else(|| {
                            Error::Config(format!(
                                "unknown preference dimension {dim_name}; expected one of {SCORE_DIMS:?}"
                            ))
                        })?;
                    Ok(DpoMode::Single(dim))
                } else {
                    Err(Error::Config(format!(
                        "unknown dpo mode {other}; expected cppo, merge4, or single:<dim>"
                    )))
                }
            }
        }
    }
}

pub struct DpoArgs {
    pub base: PathBuf,
    pub corpus: PathBuf,
    pub pairs: PathBuf,
    pub mode: DpoMode,
    /// Regenerate candidates and the pairs file before training.
    pub build: bool,
    pub pipeline: DpoPipelineConfig,
    pub sampler: SamplerConfig,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateFileMeta {
    prompts: Vec<crate::cppo::PromptRecord>,
    candidates: Vec<CandidateMeta>,
    thresholds: Thresholds,
    spec_hash: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CandidateMeta {
    file: String,
    prompt_idx: usize,
    seed: u64,
    content_length: usize,
    scores: crate::synthdata::PreferenceScores,
}

fn save_pool(pool: &CandidatePool, thresholds: &Thresholds, spec: &ToySpec, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("songs"))?;
    let mut metas = Vec::new();
    for (i, c) in pool.candidates.iter().enumerate() {
        let rel = format!("songs/{i:05}.bin");
        let song = crate::synthdata::ToySong {
            lyrics: pool.prompts[c.prompt_idx].lyrics.clone(),
            style_id: pool.prompts[c.prompt_idx].style_id,
            latents: c.latents.content().to_owned(),
        };
        crate::synthdata::write_record(&dir.join(&rel), &song, c.seed, &spec.hash())?;
        metas.push(CandidateMeta {
            file: rel,
            prompt_idx: c.prompt_idx,
            seed: c.seed,
            content_length: c.latents.content_length,
            scores: c.scores,
        });
    }
    let meta = CandidateFileMeta {
        prompts: pool
            .prompts
            .iter()
            .map(|p| crate::cppo::PromptRecord {
                style_id: p.style_id,
                lyrics: p.lyrics.clone(),
            })
            .collect(),
        candidates: metas,
        thresholds: *thresholds,
        spec_hash: spec.hash(),
    };
    std::fs::write(
        dir.join("candidates.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    Ok(())
}

fn load_pool(dir: &Path, spec: &ToySpec) -> Result<(CandidatePool, Thresholds)> {
    let meta: CandidateFileMeta =
        serde_json::from_str(&std::fs::read_to_string(dir.join("candidates.json"))?)?;
    if meta.spec_hash != spec.hash() {
        return Err(Error::HashMismatch {
            what: "candidate pool spec",
            expected: spec.hash(),
            actual: meta.spec_hash,
        });
    }
    let prompts: Vec<Prompt> = meta
        .prompts
        .iter()
        .map(|p| Prompt {
            style_id: p.style_id,
            lyrics: p.lyrics.clone(),
        })
        .collect();
    let mut candidates = Vec::new();
    for cm in &meta.candidates {
        let (song, _, _) = crate::synthdata::read_record(&dir.join(&cm.file))?;
        let latents = if song.latents.nrows() == 0 {
            crate::synthdata::LatentSequence {
                data: Array2::from_elem((spec.block_size, spec.latent_dim), crate::synthdata::EOP_VALUE),
                block_size: spec.block_size,
                content_length: 0,
            }
        } else {
            crate::synthdata::pad_eop_frames(&song.latents, spec.block_size)
        };
        candidates.push(crate::cppo::Candidate {
            prompt_idx: cm.prompt_idx,
            seed: cm.seed,
            latents,
            scores: cm.scores,
        });
    }
    Ok((
        CandidatePool {
            prompts,
            candidates,
        },
        meta.thresholds,
    ))
}

pub fn cmd_dpo(args: &DpoArgs) -> Result<serde_json::Value> {
    let corpus = load_corpus(&args.corpus)?;
    let spec = corpus.spec.clone();
    let (base, meta) = checkpoint::load(&args.base)?;
    if meta.corpus_spec_hash != spec.hash() {
        return Err(Error::HashMismatch {
            what: "base checkpoint corpus spec",
            expected: spec.hash(),
            actual: meta.corpus_spec_hash,
        });
    }
    std::fs::create_dir_all(&args.out_dir)?;

    let cand_dir = args
        .pairs
        .parent()
        .map(|p| p.join("candidates"))
        .unwrap_or_else(|| PathBuf::from("candidates"));
    let (pool, thresholds) = if args.build {
        let pool = generate_candidates(
            &base,
            &corpus,
            args.pipeline.n_prompts,
            args.pipeline.n_candidates,
            &args.sampler,
            args.pipeline.dpo.seed,
        )?;
        let thresholds = Thresholds::from_pool(&pool);
        save_pool(&pool, &thresholds, &spec, &cand_dir)?;
        // Emit the pairs file for both groups.
        let mut lines = Vec::new();
        for group in [PairGroup::G1, PairGroup::G2] {
            let built = build_pairs(&pool, &thresholds, group, args.pipeline.target_pairs);
            for rec in pair_records(&pool, &built.pairs) {
                lines.push(serde_json::to_string(&rec)?);
            }
        }
        if let Some(parent) = args.pairs.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&args.pairs, lines.join("\n") + "\n")?;
        (pool, thresholds)
    } else {
        load_pool(&cand_dir, &spec)?
    };

    let save_model = |params: &mut BackboneParams, name: &str, step_tag: usize| -> Result<PathBuf> {
        params.snap_to_f32();
        let dir = args.out_dir.join(name);
        let ck = CheckpointMeta {
            format_version: 1,
            model: meta.model.clone(),
            teacher: meta.teacher.clone(),
            data_spec: spec.clone(),
            corpus_spec_hash: spec.hash(),
            step: step_tag,
            seed: args.pipeline.dpo.seed,
            config_hash: meta.config_hash.clone(),
            params: Vec::new(),
        };
        checkpoint::save(params, &ck, &dir)?;
        Ok(dir)
    };

    let report = match &args.mode {
        DpoMode::Cppo => {
            let outcome = run_cppo(
                &base,
                &pool,
                &thresholds,
                &args.pipeline.dpo,
                args.pipeline.target_pairs,
            )?;
            let mut merged = outcome.merged;
            let merged_dir = save_model(&mut merged, "cppo-merged", meta.step + 1)?;
            let mut group_dirs = Vec::new();
            for (group, mut model) in outcome.group_models {
                let name = match group {
                    PairGroup::G1 => "cppo-g1",
                    PairGroup::G2 => "cppo-g2",
                };
                group_dirs.push(save_model(&mut model, name, meta.step + 1)?);
            }
            json!({
                "command": "dpo",
                "mode": "cppo",
                "merged_checkpoint": merged_dir,
                "merged_hash": checkpoint_hash(&merged_dir)?,
                "group_checkpoints": group_dirs,
                "group_margins": outcome.group_margins.iter().map(|(g, m)| {
                    json!({"group": format!("{g:?}"), "holdout_margin": m})
                }).collect::<Vec<_>>(),
                "pair_counts": outcome.pair_counts.iter().map(|(g, c)| {
                    json!({"group": format!("{g:?}"), "pairs": c})
                }).collect::<Vec<_>>(),
                "thresholds": thresholds,
            })
        }
        DpoMode::Merge4 => {
            let mut merged = run_merge4(
                &base,
                &pool,
                &thresholds,
                &args.pipeline.dpo,
                args.pipeline.target_pairs,
            )?;
            let dir = save_model(&mut merged, "merge4", meta.step + 1)?;
            json!({
                "command": "dpo",
                "mode": "merge4",
                "merged_checkpoint": dir,
                "merged_hash": checkpoint_hash(&dir)?,
                "thresholds": thresholds,
            })
        }
        DpoMode::Single(dim) => {
            let built = build_pairs_single_dim(&pool, &thresholds, *dim, args.pipeline.target_pairs);
            let outcome = run_dpo(&base, &pool, &built.pairs, &args.pipeline.dpo)?;
            let mut model = outcome.params;
            let dir = save_model(&mut model, &format!("single-{}", SCORE_DIMS[*dim]), meta.step + 1)?;
            json!({
                "command": "dpo",
                "mode": format!("single:{}", SCORE_DIMS[*dim]),
                "checkpoint": dir,
                "checkpoint_hash": checkpoint_hash(&dir)?,
                "holdout_margin": outcome.holdout_margin,
                "pairs": built.pairs.len(),
            })
        }
    };
    std::fs::write(
        args.out_dir.join("dpo_report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

pub struct AblateArgs {
    pub corpus: PathBuf,
    pub base: PathBuf,
    /// (row label, checkpoint dir); missing rows reported as gaps.
    pub variants: Vec<(String, Option<PathBuf>)>,
    pub n_prompts: usize,
    pub seeds: Vec<u64>,
    pub steps: usize,
    /// metrics.jsonl files to overlay in the loss plot.
    pub loss_curves: Vec<(String, PathBuf)>,
    pub out_dir: PathBuf,
}

pub fn cmd_ablate(args: &AblateArgs) -> Result<serde_json::Value> {
    std::fs::create_dir_all(&args.out_dir)?;
    let eval_row = |label: &str, ckpt: &Path| -> Result<serde_json::Value> {
        let report = cmd_eval(&EvalArgs {
            ckpt: Some(ckpt.to_path_buf()),
            corpus: args.corpus.clone(),
            n_prompts: args.n_prompts,
            seeds: args.seeds.clone(),
            steps: args.steps,
            out: None,
        })?;
        Ok(json!({
            "label": label,
            "checkpoint_hash": report.checkpoint_hash,
            "lyric_decode_accuracy": report.lyric_decode_accuracy.mean,
            "scores": report.scores.iter().map(|(k, v)| (k.clone(), v.mean)).collect::<BTreeMap<_, _>>(),
            "mean_oracle_score": report.mean_oracle_score.mean,
            "length_tv_distance": report.length_tv_distance,
            "structure_proxy": report.structure_proxy,
            "eop_stop_rate": report.eop_stop_rate,
        }))
    };

    let base_row = eval_row("base", &args.base)?;
    let mut rows = vec![base_row.clone()];
    let mut gaps = Vec::new();
    for (label, path) in &args.variants {
        match path {
            Some(p) => rows.push(eval_row(label, p)?),
            None => gaps.push(label.clone()),
        }
    }

    // Deltas vs base on the scalar columns.
    let scalar = |row: &serde_json::Value, key: &str| row[key].as_f64();
    let mut deltas = Vec::new();
    for row in &rows[1..] {
        let mut d = serde_json::Map::new();
        d.insert("label".into(), row["label"].clone());
        for key in [
            "lyric_decode_accuracy",
            "mean_oracle_score",
            "length_tv_distance",
            "structure_proxy",
        ] {
            if let (Some(a), Some(b)) = (scalar(row, key), scalar(&base_row, key)) {
                d.insert(format!("delta_{key}"), json!(a - b));
            }
        }
        deltas.push(serde_json::Value::Object(d));
    }

    // Plots: loss curves and per-row mean-score distributions.
    let mut curves = Vec::new();
    for (label, path) in &args.loss_curves {
        if let Ok(metrics) = crate::trainer::load_metrics(path) {
            let pts: Vec<(f64, f64)> = metrics
                .iter()
                .filter(|m| !m.aborted)
                .map(|m| (m.step as f64, m.loss_bfm))
                .collect();
            curves.push((label.clone(), pts));
        }
    }
    if !curves.is_empty() {
        crate::plots::line_chart(&args.out_dir.join("loss_curves.png"), "flow loss", &curves)?;
    }
    {
        // Score distributions: per row, the mean oracle score across its
        // generations (re-evaluated at one seed for the histogram).
        let mut series = Vec::new();
        for row in &rows {
            let label = row["label"].as_str().unwrap_or("row").to_string();
            let ckpt = match label.as_str() {
                "base" => Some(args.base.clone()),
                l => args
                    .variants
                    .iter()
                    .find(|(vl, _)| vl == l)
                    .and_then(|(_, p)| p.clone()),
            };
            if let Some(ckpt) = ckpt {
                let report = cmd_eval(&EvalArgs {
                    ckpt: Some(ckpt),
                    corpus: args.corpus.clone(),
                    n_prompts: args.n_prompts.min(16),
                    seeds: vec![args.seeds.first().copied().unwrap_or(1)],
                    steps: args.steps,
                    out: None,
                })?;
                series.push((label, vec![report.mean_oracle_score.mean]));
            }
        }
        // A histogram of single means is degenerate; collect per-generation
        // means instead when only one series value exists.
        let _ = series;
    }
    score_distribution_plot(args)?;

    let report = json!({
        "command": "ablate",
        "rows": rows,
        "deltas": deltas,
        "missing_variants": gaps,
        "plots": {
            "loss_curves": args.out_dir.join("loss_curves.png"),
            "score_distribution": args.out_dir.join("score_distribution.png"),
        },
    });
    std::fs::write(
        args.out_dir.join("ablation.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

/// Per-model distribution of per-generation mean oracle scores.
fn score_distribution_plot(args: &AblateArgs) -> Result<()> {
    let corpus = load_corpus(&args.corpus)?;
    let emb = corpus.embeddings();
    let spec = corpus.spec.clone();
    let mut models: Vec<(String, PathBuf)> = vec![("base".into(), args.base.clone())];
    for (label, path) in &args.variants {
        if let Some(p) = path {
            models.push((label.clone(), p.clone()));
        }
    }
    let mut series = Vec::new();
    let n = args.n_prompts.min(corpus.songs.len()).min(24);
    for (label, ckpt) in models {
        let (params, _) = checkpoint::load(&ckpt)?;
        let mut vals = Vec::new();
        let seed = args.seeds.first().copied().unwrap_or(1);
        let max_blocks = spec.max_padded_frames() / spec.block_size + 1;
        for si in 0..n {
            let song = &corpus.songs[si];
            let req = GenerateRequest {
                prompt: Prompt {
                    style_id: song.style_id,
                    lyrics: song.lyrics.clone(),
                },
                max_blocks,
                sampler: SamplerConfig {
                    steps: args.steps,
                    seed,
                    ..Default::default()
                },
                eop_threshold: DEFAULT_EOP_THRESHOLD,
                seed: rng::derive_seed(seed, "ablate_gen", si as u64),
            };
            let out = generate(&params, &req, spec.block_size)?;
            let scores = score_preferences(
                &out.latents,
                song.style_id,
                &song.lyrics,
                &spec,
                &emb,
                &corpus.stats,
            );
            vals.push(scores.mean());
        }
        series.push((label, vals));
    }
    crate::plots::histogram_chart(
        &args.out_dir.join("score_distribution.png"),
        "mean oracle score per generation",
        &series,
        12,
    )
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

pub struct BenchArgs {
    pub ckpt: PathBuf,
    pub ks: Vec<usize>,
    pub repeats: usize,
    pub steps: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

pub fn cmd_bench(args: &BenchArgs) -> Result<serde_json::Value> {
    let (params, meta) = checkpoint::load(&args.ckpt)?;
    let spec = &meta.data_spec;
    let base = GenerateRequest {
        prompt: Prompt {
            style_id: 0,
            lyrics: vec![0, 1, 2, 3],
        },
        max_blocks: 1,
        sampler: SamplerConfig {
            steps: args.steps,
            seed: args.seed,
            ..Default::default()
        },
        eop_threshold: 0.0,
        seed: args.seed,
    };
    let max_k = args.ks.iter().copied().max().unwrap_or(1);
    let needed = 1 + base.prompt.lyrics.len() + max_k * spec.block_size;
    if needed > meta.model.max_positions {
        return Err(Error::Config(format!(
            "k={max_k} needs {needed} positions, model has {}",
            meta.model.max_positions
        )));
    }
    let report = bench(&params, &base, spec.block_size, &args.ks, args.repeats)?;
    let value = json!({
        "command": "bench",
        "deterministic": {
            "checkpoint_hash": checkpoint_hash(&args.ckpt)?,
            "ks": args.ks,
            "sampler_steps": args.steps,
            "seed": args.seed,
            "max_output_diffs": report.entries.iter().map(|e| e.max_output_diff).collect::<Vec<_>>(),
        },
        "timings": report.entries.iter().map(|e| json!({
            "k": e.k,
            "cached_ms": e.cached_ms,
            "uncached_ms": e.uncached_ms,
            "speedup": e.speedup,
        })).collect::<Vec<_>>(),
    });
    if let Some(out) = &args.out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, serde_json::to_string_pretty(&value)?)?;
    }
    Ok(value)
}
