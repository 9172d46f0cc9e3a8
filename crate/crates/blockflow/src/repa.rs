//! Stochastic block representation-alignment loss.
//!
//! Mid-layer hidden states of (clean prefix + noisy block) compositions are
//! aligned, through a trainable projection, with features of the full clean
//! sequence produced by a frozen random causal-window teacher. Only a random
//! subset of blocks is sampled per sequence; clean-prefix blocks shared by
//! several compositions are down-weighted so each block's total weight is
//! exactly 1.

use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, ModelGrads, SequenceLayout};
use crate::error::{Error, Result};
use crate::rng;

/// Frozen-teacher settings; serialized into checkpoints so evaluation reuses
/// the identical teacher.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TeacherConfig {
    pub feature_dim: usize,
    /// Causal window length in frames; must be odd.
    pub window: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            window: 3,
            seed: 17,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window % 2 == 0 {
            return Err(Error::Config("teacher window must be odd".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("teacher feature_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// The frozen teacher: a fixed random linear map over a causal window of
/// frames followed by tanh. Never trained.
#[derive(Debug, Clone)]
pub struct Teacher {
    pub cfg: TeacherConfig,
    w: Array2<f64>,
    b: Array1<f64>,
}

impl Teacher {
    pub fn new(cfg: &TeacherConfig, latent_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut r = rng::stream(cfg.seed, "teacher", 0);
        use rand::Rng;
        use rand_distr::StandardNormal;
        let rows = cfg.window * latent_dim;
        let std = 1.0 / (rows as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cfg.feature_dim), |_| {
            let x: f64 = r.sample(StandardNormal);
            x * std
        });
        let b = Array1::from_shape_fn(cfg.feature_dim, |_| {
            let x: f64 = r.sample(StandardNormal);
            x * 0.1
        });
        Ok(Self {
            cfg: cfg.clone(),
            w,
            b,
        })
    }

    /// Fingerprint of the frozen weights, used to assert the teacher never
    /// changes across training.
    pub fn fingerprint(&self) -> String {
        let mut bytes = Vec::with_capacity((self.w.len() + self.b.len()) * 8);
        for &x in self.w.iter().chain(self.b.iter()) {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        crate::checkpoint::sha256_hex(&bytes)
    }

    /// Features of clean latents: feature row `j` depends on frames
    /// `(j - window, j]`, zero-padded before the start.
    pub fn features(&self, clean: &Array2<f64>) -> Array2<f64> {
        let frames = clean.nrows();
        let dim = clean.ncols();
        let w = self.cfg.window;
        let mut stacked = Array2::zeros((frames, w * dim));
        for j in 0..frames {
            for (slot, src) in (0..w).map(|o| (o, j as isize - (w - 1 - o) as isize)) {
                if src >= 0 {
                    stacked
                        .slice_mut(s![j, slot * dim..(slot + 1) * dim])
                        .assign(&clean.row(src as usize));
                }
            }
        }
        let mut out = stacked.dot(&self.w);
        for mut row in out.rows_mut() {
            row += &self.b;
        }
        out.mapv_inplace(f64::tanh);
        out
    }
}

/// A stochastic block sample: which noisy blocks get a composition, and the
/// per-clean-block weight that makes every used block's total weight 1.
#[derive(Debug, Clone)]
pub struct RepaSample {
    /// Sampled block indices, 0-based, sorted ascending.
    pub sampled: Vec<usize>,
    /// `clean_weight[j] = 1 / |{sampled i : i > j}|`, or 0 when unused.
    pub clean_weight: Vec<f64>,
    pub n_blocks: usize,
}

/// Samples `min(m, k)` distinct block indices uniformly without replacement
/// and derives the clean-prefix weights.
pub fn sample_blocks(k: usize, m: usize, seed: u64) -> Result<RepaSample> {
    if k < 1 {
        return Err(Error::Layout("sample_blocks requires k >= 1".into()));
    }
    let m_eff = m.min(k);
    let mut r = rng::stream(seed, "repa_blocks", 0);
    let mut idx: Vec<usize> = (0..k).collect();
    idx.shuffle(&mut r);
    let mut sampled: Vec<usize> = idx.into_iter().take(m_eff).collect();
    sampled.sort_unstable();
    Ok(RepaSample::from_sampled(sampled, k))
}

impl RepaSample {
    /// Builds the weight table for a given set of sampled blocks.
    pub fn from_sampled(sampled: Vec<usize>, k: usize) -> Self {
        let mut clean_weight = vec![0.0; k];
        for (j, w) in clean_weight.iter_mut().enumerate() {
            let count = sampled.iter().filter(|&&i| i > j).count();
            if count > 0 {
                *w = 1.0 / count as f64;
            }
        }
        Self {
            sampled,
            clean_weight,
            n_blocks: k,
        }
    }

    /// Accumulated weight of clean block `j` over all compositions.
    pub fn accumulated_weight(&self, j: usize) -> f64 {
        let count = self.sampled.iter().filter(|&&i| i > j).count();
        count as f64 * self.clean_weight[j]
    }

    /// Total weight mass over all (composition, block) pairs, counting each
    /// frame once: `b * (#sampled + #used clean blocks)` after normalization.
    fn total_weight_blocks(&self) -> f64 {
        let used_clean = self
            .clean_weight
            .iter()
            .filter(|&&w| w > 0.0)
            .count();
        (self.sampled.len() + used_clean) as f64
    }
}

fn gelu(x: f64) -> f64 {
    let c = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let c = 0.797_884_560_802_865_4;
    let a = 0.044715;
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x)
}

fn project(params: &BackboneParams, h: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut u = h.dot(&params.repa_w1);
    for mut row in u.rows_mut() {
        row += &params.repa_b1.row(0);
    }
    let a = u.mapv(gelu);
    let mut p = a.dot(&params.repa_w2);
    for mut row in p.rows_mut() {
        row += &params.repa_b2.row(0);
    }
    (p, a, u)
}

const COS_EPS: f64 = 1e-12;

fn cos_and_grad(p: &Array1<f64>, f: &Array1<f64>) -> (f64, Array1<f64>) {
    let np = p.dot(p).sqrt().max(COS_EPS);
    let nf = f.dot(f).sqrt().max(COS_EPS);
    let cos = p.dot(f) / (np * nf);
    // d(1 - cos)/dp = cos * p / |p|^2 - f / (|p| |f|)
    let grad = p * (cos / (np * np)) - &(f / (np * nf));
    (cos, grad)
}

/// Result of a REPA loss evaluation with gradients.
pub struct RepaLossOut {
    pub loss: f64,
    /// Gradient w.r.t. the tap hidden states, full sequence shape.
    pub d_tap: Array2<f64>,
}

/// Weighted alignment loss over the sampled compositions.
///
/// For each sampled block `i`: clean blocks `j < i` (weight `1/c_j`) and the
/// noisy block `i` (weight 1) are projected and compared to the teacher
/// features of the clean sequence at the same frame positions with
/// `1 - cosine`. The total is divided by the accumulated weight mass so a
/// uniformly orthogonal projection scores exactly 1. `upstream` scales the
/// gradients (lambda / batch for training); gradients accumulate into
/// `grads` (projection) and the returned `d_tap` (backbone tap point).
pub fn repa_loss(
    params: &BackboneParams,
    tap_hidden: &Array2<f64>,
    layout: &SequenceLayout,
    sample: &RepaSample,
    teacher_feats: &Array2<f64>,
    upstream: f64,
    grads: Option<&mut ModelGrads>,
) -> Result<RepaLossOut> {
    let b = layout.block_size;
    if sample.n_blocks != layout.n_blocks {
        return Err(Error::Layout("repa sample block count mismatch".into()));
    }
    if teacher_feats.nrows() != layout.frames() {
        return Err(Error::ShapeMismatch {
            context: "teacher features",
            expected: format!("{} frames", layout.frames()),
            got: format!("{}", teacher_feats.nrows()),
        });
    }
    if teacher_feats.ncols() != params.cfg.repa_feature_dim {
        return Err(Error::ShapeMismatch {
            context: "teacher feature dim",
            expected: format!("{}", params.cfg.repa_feature_dim),
            got: format!("{}", teacher_feats.ncols()),
        });
    }

    // (hidden row, teacher frame, weight) triples; clean block j contributes
    // once with its accumulated weight since its hidden states are shared
    // across compositions.
    let mut entries: Vec<(usize, usize, f64)> = Vec::new();
    for &i in &sample.sampled {
        for r in 0..b {
            let row = layout.noisy_start() + i * b + r;
            entries.push((row, i * b + r, 1.0));
        }
    }
    for j in 0..layout.n_blocks {
        let w = sample.accumulated_weight(j);
        if w > 0.0 {
            for r in 0..b {
                let row = layout.clean_start() + j * b + r;
                entries.push((row, j * b + r, w));
            }
        }
    }
    let normalizer = sample.total_weight_blocks() * b as f64;

    // Project only the rows we need.
    let mut h = Array2::zeros((entries.len(), params.cfg.model_dim));
    for (e, &(row, _, _)) in entries.iter().enumerate() {
        h.row_mut(e).assign(&tap_hidden.row(row));
    }
    let (p, a, u) = project(params, &h);

    let mut loss = 0.0;
    let mut dp = Array2::zeros(p.raw_dim());
    for (e, &(_, feat_row, w)) in entries.iter().enumerate() {
        let pe = p.row(e).to_owned();
        let fe = teacher_feats.row(feat_row).to_owned();
        let (cos, grad) = cos_and_grad(&pe, &fe);
        loss += w * (1.0 - cos);
        let mut dr = dp.row_mut(e);
        dr.assign(&(grad * (w / normalizer)));
    }
    loss /= normalizer;

    let mut d_tap = Array2::zeros(tap_hidden.raw_dim());
    if let Some(grads) = grads {
        let dp = dp * upstream;
        // Back through the projection MLP.
        grads.repa_w2 += &a.t().dot(&dp);
        grads.repa_b2 += &dp.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let da = dp.dot(&params.repa_w2.t());
        let du = &da * &u.mapv(gelu_prime);
        grads.repa_w1 += &h.t().dot(&du);
        grads.repa_b1 += &du.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let dh = du.dot(&params.repa_w1.t());
        for (e, &(row, _, _)) in entries.iter().enumerate() {
            let mut dr = d_tap.row_mut(row);
            dr += &dh.row(e);
        }
    }

    Ok(RepaLossOut { loss, d_tap })
}
