//! Training loop: batch assembly with per-block timestep sampling, combined
//! flow + REPA loss, AdamW with decoupled weight decay, gradient clipping,
//! metrics logging, and checkpointing.

use ndarray::Array2;
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{
    backward_train, build_train_specs, build_training_mask, forward_train, BackboneParams,
    ModelConfig, ModelGrads, SequenceLayout,
};
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::flow;
use crate::repa::{self, Teacher, TeacherConfig};
use crate::rng;
use crate::synthdata::{pad_eop, Corpus};

fn default_betas() -> (f64, f64) {
    (0.8, 0.9)
}

/// Optimization hyperparameters. Defaults follow the reference setup scaled
/// to desk size: AdamW with 1e-2 weight decay and (0.8, 0.9) betas, gradient
/// clipping at max norm 0.5, uniform per-block timestep sampling, linear
/// warmup.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    pub grad_clip_norm: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub repa_lambda: f64,
    pub prompt_dropout: f64,
    /// Blocks sampled per sequence for the REPA loss.
    pub repa_samples: usize,
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            warmup_steps: 500,
            weight_decay: 1e-2,
            betas: default_betas(),
            grad_clip_norm: 0.5,
            batch_size: 16,
            steps: 2000,
            repa_lambda: 0.5,
            prompt_dropout: 0.1,
            repa_samples: 10,
            checkpoint_every: 500,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 && self.steps > 0 && self.lr != 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config("lr must be >= 0".into()));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.prompt_dropout) {
            return Err(Error::Config("prompt_dropout must be in [0,1]".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            return self.lr;
        }
        self.lr * (step as f64 / self.warmup_steps as f64).min(1.0)
    }
}

/// One training sequence with everything the forward pass needs.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub style: Option<usize>,
    pub lyrics: Option<Vec<u16>>,
    pub lyric_len: usize,
    pub clean: Array2<f64>,
    pub noisy: Array2<f64>,
    pub target_v: Array2<f64>,
    pub block_t: Vec<f64>,
    pub layout: SequenceLayout,
}

/// A batch: items share a layout (length-bucketed), so one mask serves all.
#[derive(Debug, Clone)]
pub struct TrainingBatch {
    pub items: Vec<TrainItem>,
    pub mask: Array2<bool>,
}

/// Songs bucketed by content length (which fixes both the lyric length and
/// the padded length) so a batch can share one layout.
pub struct Buckets {
    /// content frames -> song indices
    by_len: BTreeMap<usize, Vec<usize>>,
}

impl Buckets {
    pub fn build(corpus: &Corpus) -> Result<Self> {
        if corpus.songs.is_empty() {
            return Err(Error::Training("empty corpus".into()));
        }
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, song) in corpus.songs.iter().enumerate() {
            by_len.entry(song.content_len()).or_default().push(i);
        }
        Ok(Self { by_len })
    }

    fn pick<'a>(&'a self, r: &mut impl Rng) -> (&'a [usize], usize) {
        let total: usize = self.by_len.values().map(Vec::len).sum();
        let mut target = Uniform::new(0, total).sample(r);
        for (len, idxs) in &self.by_len {
            if target < idxs.len() {
                return (idxs, *len);
            }
            target -= idxs.len();
        }
        unreachable!("bucket weights cover total")
    }
}

/// Assembles one batch: picks a length bucket, samples songs with
/// replacement, draws per-block timesteps and noise, applies interpolation
/// and (whole-batch) prompt dropout. Deterministic in `(corpus, cfg, step)`.
pub fn make_batch(
    corpus: &Corpus,
    buckets: &Buckets,
    cfg: &TrainConfig,
    step: usize,
) -> Result<TrainingBatch> {
    let mut r = rng::stream(cfg.seed, "batch", step as u64);
    let spec = &corpus.spec;
    let (bucket, _padded) = buckets.pick(&mut r);
    let null_prompt = r.gen::<f64>() < cfg.prompt_dropout;

    let mut items = Vec::with_capacity(cfg.batch_size);
    let idx_dist = Uniform::new(0, bucket.len());
    for _ in 0..cfg.batch_size {
        let song = &corpus.songs[bucket[idx_dist.sample(&mut r)]];
        let padded = pad_eop(song, spec.block_size);
        let k = padded.n_blocks();
        let layout = SequenceLayout::new(1, song.lyrics.len(), k, spec.block_size)?;

        let block_t: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();
        let clean = padded.data;
        let noise = Array2::from_shape_fn(clean.raw_dim(), |_| r.sample(StandardNormal));
        let noisy = flow::interpolate(&clean, &noise, &block_t, spec.block_size)?;
        let target_v = flow::velocity_target(&clean, &noise)?;

        items.push(TrainItem {
            style: (!null_prompt).then_some(song.style_id),
            lyrics: (!null_prompt).then(|| song.lyrics.clone()),
            lyric_len: song.lyrics.len(),
            clean,
            noisy,
            target_v,
            block_t,
            layout,
        });
    }
    let mask = build_training_mask(&items[0].layout)?;
    Ok(TrainingBatch { items, mask })
}

/// AdamW with decoupled weight decay and bias correction.
pub struct AdamW {
    m: ModelGrads,
    v: ModelGrads,
    updates: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &BackboneParams, betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            updates: 0,
            betas,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn update(&mut self, params: &mut BackboneParams, grads: &ModelGrads, lr: f64) {
        self.updates += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.updates as i32);
        let bc2 = 1.0 - b2.powi(self.updates as i32);
        let mut ps = params.collect_mut();
        let gs = grads.collect();
        let mut ms = self.m.collect_mut();
        let mut vs = self.v.collect_mut();
        for i in 0..ps.len() {
            debug_assert_eq!(ps[i].0, gs[i].0);
            let p: &mut Array2<f64> = ps[i].1;
            let g: &Array2<f64> = gs[i].1;
            let m: &mut Array2<f64> = ms[i].1;
            let v: &mut Array2<f64> = vs[i].1;
            ndarray::Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * *p);
                });
        }
    }
}

/// Per-step metrics, also the JSONL record schema of the metrics file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_bfm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_repa: Option<f64>,
    pub grad_norm: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub aborted: bool,
}

impl StepMetrics {
    pub fn total_loss(&self, repa_lambda: f64) -> f64 {
        self.loss_bfm + repa_lambda * self.loss_repa.unwrap_or(0.0)
    }
}

/// Forward + backward over one batch; returns summed (already batch-averaged)
/// gradients and the loss components.
pub fn batch_grads(
    params: &BackboneParams,
    teacher: &Teacher,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<(f64, Option<f64>, ModelGrads)> {
    let b_inv = 1.0 / batch.items.len() as f64;
    let repa_on = cfg.repa_lambda > 0.0;

    let results: Vec<Result<(f64, f64, ModelGrads)>> = batch
        .items
        .par_iter()
        .enumerate()
        .map(|(bi, item)| {
            let specs = build_train_specs(
                item.style,
                item.lyrics.as_deref(),
                item.lyric_len,
                &item.clean,
                &item.noisy,
                &item.block_t,
                &item.layout,
            );
            let (out, trace) = forward_train(params, &specs, &batch.mask, &item.layout)?;
            let loss_bfm = flow::bfm_loss(&out.vhat, &item.target_v, item.layout.n_blocks)?;
            let d_vhat =
                flow::bfm_loss_grad(&out.vhat, &item.target_v, item.layout.n_blocks, b_inv)?;

            let mut grads = params.zeros_like();
            let mut loss_repa = 0.0;
            let d_tap = if repa_on {
                let sample_seed =
                    rng::derive_seed(cfg.seed, "repa_sample", (step * cfg.batch_size + bi) as u64);
                let sample =
                    repa::sample_blocks(item.layout.n_blocks, cfg.repa_samples, sample_seed)?;
                let feats = teacher.features(&item.clean);
                let out_repa = repa::repa_loss(
                    params,
                    &out.tap_hidden,
                    &item.layout,
                    &sample,
                    &feats,
                    cfg.repa_lambda * b_inv,
                    Some(&mut grads),
                )?;
                loss_repa = out_repa.loss;
                Some(out_repa.d_tap)
            } else {
                None
            };
            backward_train(params, &trace, &d_vhat, d_tap.as_ref(), &mut grads);
            Ok((loss_bfm, loss_repa, grads))
        })
        .collect();

    let mut loss_bfm = 0.0;
    let mut loss_repa = 0.0;
    let mut total: Option<ModelGrads> = None;
    for res in results {
        let (lb, lr_, g) = res?;
        loss_bfm += lb * b_inv;
        loss_repa += lr_ * b_inv;
        match &mut total {
            None => total = Some(g),
            Some(t) => t.add_scaled(&g, 1.0),
        }
    }
    let grads = total.expect("non-empty batch");
    Ok((loss_bfm, repa_on.then_some(loss_repa), grads))
}

/// One optimization step. On a non-finite loss or gradient the parameters
/// are left untouched and an error is returned.
pub fn train_step(
    params: &mut BackboneParams,
    opt: &mut AdamW,
    teacher: &Teacher,
    batch: &TrainingBatch,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    let (loss_bfm, loss_repa, mut grads) = batch_grads(params, teacher, batch, cfg, step)?;
    if !loss_bfm.is_finite() || loss_repa.map_or(false, |l| !l.is_finite()) {
        return Err(Error::NonFinite {
            context: "loss",
            step: Some(step),
        });
    }
    let norm = grads.global_norm();
    if !norm.is_finite() {
        return Err(Error::NonFinite {
            context: "gradient",
            step: Some(step),
        });
    }
    if norm > cfg.grad_clip_norm {
        grads.scale(cfg.grad_clip_norm / norm);
    }
    let post_clip = norm.min(cfg.grad_clip_norm);
    let lr = cfg.lr_at(step);
    opt.update(params, &grads, lr);
    Ok(StepMetrics {
        step,
        loss_bfm,
        loss_repa,
        grad_norm: post_clip,
        lr,
        aborted: false,
    })
}

/// Everything `fit` needs beyond the corpus.
pub struct FitSetup<'a> {
    pub model: &'a ModelConfig,
    pub teacher_cfg: &'a TeacherConfig,
    pub train: &'a TrainConfig,
    pub out_dir: &'a Path,
    pub config_hash: String,
    pub resume_from: Option<PathBuf>,
}

/// Result of a training run: final parameters and where they were saved.
pub struct FitOutcome {
    pub params: BackboneParams,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
}

/// Runs the training loop: warmup schedule, periodic checkpoints, loss
/// logging to `metrics.jsonl`. Training aborts after 3 consecutive failed
/// steps.
pub fn fit(corpus: &Corpus, setup: &FitSetup<'_>) -> Result<FitOutcome> {
    setup.train.validate()?;
    setup.model.validate(
        corpus.spec.max_padded_frames(),
        1,
        corpus.spec.lyric_len_range.1,
    )?;
    if setup.model.latent_dim != corpus.spec.latent_dim {
        return Err(Error::Config("model latent_dim != data latent_dim".into()));
    }
    if setup.model.repa_feature_dim != setup.teacher_cfg.feature_dim {
        return Err(Error::Config(
            "model repa_feature_dim != teacher feature_dim".into(),
        ));
    }
    std::fs::create_dir_all(setup.out_dir)?;
    let teacher = Teacher::new(setup.teacher_cfg, corpus.spec.latent_dim)?;
    let teacher_fp = teacher.fingerprint();
    let buckets = Buckets::build(corpus)?;

    let (mut params, start_step) = match &setup.resume_from {
        Some(dir) => {
            let (p, meta) = checkpoint::load(dir)?;
            if meta.model != *setup.model {
                return Err(Error::Checkpoint(
                    "resume checkpoint has a different model config".into(),
                ));
            }
            (p, meta.step)
        }
        None => (
            BackboneParams::init(setup.model, rng::derive_seed(setup.train.seed, "init", 0)),
            0,
        ),
    };
    let mut opt = AdamW::new(&params, setup.train.betas, setup.train.weight_decay);

    let metrics_path = setup.out_dir.join("metrics.jsonl");
    let mut metrics_file = std::fs::OpenOptions::new()
        .create(true)
        .append(start_step > 0)
        .write(true)
        .truncate(start_step == 0)
        .open(&metrics_path)?;

    let make_meta = |step: usize| CheckpointMeta {
        format_version: 1,
        model: setup.model.clone(),
        teacher: setup.teacher_cfg.clone(),
        data_spec: corpus.spec.clone(),
        corpus_spec_hash: corpus.spec.hash(),
        step,
        seed: setup.train.seed,
        config_hash: setup.config_hash.clone(),
        params: Vec::new(),
    };

    let mut consecutive_failures = 0usize;
    for step in start_step + 1..=setup.train.steps {
        let batch = make_batch(corpus, &buckets, setup.train, step)?;
        match train_step(&mut params, &mut opt, &teacher, &batch, setup.train, step) {
            Ok(metrics) => {
                consecutive_failures = 0;
                writeln!(metrics_file, "{}", serde_json::to_string(&metrics)?)?;
            }
            Err(err) => {
                consecutive_failures += 1;
                let incident = StepMetrics {
                    step,
                    loss_bfm: f64::NAN,
                    loss_repa: None,
                    grad_norm: f64::NAN,
                    lr: setup.train.lr_at(step),
                    aborted: true,
                };
                writeln!(metrics_file, "{}", serde_json::to_string(&incident)?)?;
                if consecutive_failures >= 3 {
                    return Err(Error::Training(format!(
                        "3 consecutive aborted steps, last error: {err}"
                    )));
                }
            }
        }
        if setup.train.checkpoint_every > 0
            && step % setup.train.checkpoint_every == 0
            && step != setup.train.steps
        {
            params.snap_to_f32();
            let dir = setup.out_dir.join(format!("ckpt-{step}"));
            checkpoint::save(&params, &make_meta(step), &dir)?;
        }
    }

    if teacher.fingerprint() != teacher_fp {
        return Err(Error::Training("teacher parameters changed".into()));
    }

    params.snap_to_f32();
    let final_dir = setup.out_dir.join("ckpt-final");
    checkpoint::save(&params, &make_meta(setup.train.steps), &final_dir)?;
    Ok(FitOutcome {
        params,
        final_checkpoint: final_dir,
        metrics_path,
    })
}

/// Reads a metrics file back.
pub fn load_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line)?);
    }
    Ok(out)
}
