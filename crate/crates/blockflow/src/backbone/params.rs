//! Model parameters as named 2-D tensors.
//!
//! Every parameter is an `Array2<f64>` (vectors are `1 x n`), addressed by a
//! stable name. The same struct doubles as the gradient / optimizer-moment
//! container, and the name enumeration is what checkpointing and model
//! merging are built on.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ModelConfig;
use crate::rng;

/// Sinusoidal feature width for the timestep tag embedding.
pub const TIME_FEATURES: usize = 64;
/// Angle scale applied to the tag before the sinusoid. Kept low so the
/// embedding stays smooth over [0, 1] at sampler-grid resolution.
pub const TIME_SCALE: f64 = 100.0;

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub wq: Array2<f64>,
    pub bq: Array2<f64>,
    pub wk: Array2<f64>,
    pub bk: Array2<f64>,
    pub wv: Array2<f64>,
    pub bv: Array2<f64>,
    pub wo: Array2<f64>,
    pub bo: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub ff_w1: Array2<f64>,
    pub ff_b1: Array2<f64>,
    pub ff_w2: Array2<f64>,
    pub ff_b2: Array2<f64>,
}

/// All trainable parameters of the backbone, including the REPA projection
/// head (trained jointly, stored in the same checkpoint).
#[derive(Debug, Clone)]
pub struct BackboneParams {
    pub cfg: ModelConfig,
    /// Style embedding table; row `n_styles` is the learned null prompt.
    pub style_embed: Array2<f64>,
    /// Lyric token table; row `vocab_size` is the learned null token.
    pub lyric_embed: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub latent_in_w: Array2<f64>,
    pub latent_in_b: Array2<f64>,
    pub time_w1: Array2<f64>,
    pub time_b1: Array2<f64>,
    pub time_w2: Array2<f64>,
    pub time_b2: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub final_ln_g: Array2<f64>,
    pub final_ln_b: Array2<f64>,
    pub out_w: Array2<f64>,
    pub out_b: Array2<f64>,
    pub repa_w1: Array2<f64>,
    pub repa_b1: Array2<f64>,
    pub repa_w2: Array2<f64>,
    pub repa_b2: Array2<f64>,
}

fn normal(rows: usize, cols: usize, std: f64, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| {
        let x: f64 = r.sample(StandardNormal);
        x * std
    })
}

fn glorot(rows: usize, cols: usize, r: &mut impl Rng, scale: f64) -> Array2<f64> {
    let std = (2.0 / (rows + cols) as f64).sqrt() * scale;
    normal(rows, cols, std, r)
}

impl BackboneParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        let d = cfg.model_dim;
        let ff = cfg.ff_dim();
        let mut r = rng::stream(seed, "model_init", 0);
        let resid_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();

        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                wq: glorot(d, d, &mut r, 1.0),
                bq: Array2::zeros((1, d)),
                wk: glorot(d, d, &mut r, 1.0),
                bk: Array2::zeros((1, d)),
                wv: glorot(d, d, &mut r, 1.0),
                bv: Array2::zeros((1, d)),
                wo: glorot(d, d, &mut r, resid_scale),
                bo: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                ff_w1: glorot(d, ff, &mut r, 1.0),
                ff_b1: Array2::zeros((1, ff)),
                ff_w2: glorot(ff, d, &mut r, resid_scale),
                ff_b2: Array2::zeros((1, d)),
            })
            .collect();

        Self {
            cfg: cfg.clone(),
            style_embed: normal(cfg.n_styles + 1, d, 0.02, &mut r),
            lyric_embed: normal(cfg.vocab_size + 1, d, 0.02, &mut r),
            pos_embed: normal(cfg.max_positions, d, 0.02, &mut r),
            latent_in_w: glorot(cfg.latent_dim, d, &mut r, 1.0),
            latent_in_b: Array2::zeros((1, d)),
            time_w1: glorot(TIME_FEATURES, d, &mut r, 1.0),
            time_b1: Array2::zeros((1, d)),
            time_w2: glorot(d, d, &mut r, 1.0),
            time_b2: Array2::zeros((1, d)),
            layers,
            final_ln_g: Array2::ones((1, d)),
            final_ln_b: Array2::zeros((1, d)),
            out_w: glorot(d, cfg.latent_dim, &mut r, resid_scale),
            out_b: Array2::zeros((1, cfg.latent_dim)),
            repa_w1: glorot(d, d, &mut r, 1.0),
            repa_b1: Array2::zeros((1, d)),
            repa_w2: glorot(d, cfg.repa_feature_dim, &mut r, 1.0),
            repa_b2: Array2::zeros((1, cfg.repa_feature_dim)),
        }
    }

    /// Same structure with every tensor zeroed; the gradient / moment container.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.for_each_mut(|_, a| a.fill(0.0));
        out
    }

    /// Named views over every parameter in canonical (declaration) order.
    pub fn collect(&self) -> Vec<(String, &Array2<f64>)> {
        let mut v: Vec<(String, &Array2<f64>)> = vec![
            ("style_embed".into(), &self.style_embed),
            ("lyric_embed".into(), &self.lyric_embed),
            ("pos_embed".into(), &self.pos_embed),
            ("latent_in_w".into(), &self.latent_in_w),
            ("latent_in_b".into(), &self.latent_in_b),
            ("time_w1".into(), &self.time_w1),
            ("time_b1".into(), &self.time_b1),
            ("time_w2".into(), &self.time_w2),
            ("time_b2".into(), &self.time_b2),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            v.push((format!("layers.{i}.ln1_g"), &l.ln1_g));
            v.push((format!("layers.{i}.ln1_b"), &l.ln1_b));
            v.push((format!("layers.{i}.wq"), &l.wq));
            v.push((format!("layers.{i}.bq"), &l.bq));
            v.push((format!("layers.{i}.wk"), &l.wk));
            v.push((format!("layers.{i}.bk"), &l.bk));
            v.push((format!("layers.{i}.wv"), &l.wv));
            v.push((format!("layers.{i}.bv"), &l.bv));
            v.push((format!("layers.{i}.wo"), &l.wo));
            v.push((format!("layers.{i}.bo"), &l.bo));
            v.push((format!("layers.{i}.ln2_g"), &l.ln2_g));
            v.push((format!("layers.{i}.ln2_b"), &l.ln2_b));
            v.push((format!("layers.{i}.ff_w1"), &l.ff_w1));
            v.push((format!("layers.{i}.ff_b1"), &l.ff_b1));
            v.push((format!("layers.{i}.ff_w2"), &l.ff_w2));
            v.push((format!("layers.{i}.ff_b2"), &l.ff_b2));
        }
        v.push(("final_ln_g".into(), &self.final_ln_g));
        v.push(("final_ln_b".into(), &self.final_ln_b));
        v.push(("out_w".into(), &self.out_w));
        v.push(("out_b".into(), &self.out_b));
        v.push(("repa_w1".into(), &self.repa_w1));
        v.push(("repa_b1".into(), &self.repa_b1));
        v.push(("repa_w2".into(), &self.repa_w2));
        v.push(("repa_b2".into(), &self.repa_b2));
        v
    }

    /// Mutable counterpart of [`collect`](Self::collect), same order.
    pub fn collect_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut v: Vec<(String, &mut Array2<f64>)> = vec![
            ("style_embed".into(), &mut self.style_embed),
            ("lyric_embed".into(), &mut self.lyric_embed),
            ("pos_embed".into(), &mut self.pos_embed),
            ("latent_in_w".into(), &mut self.latent_in_w),
            ("latent_in_b".into(), &mut self.latent_in_b),
            ("time_w1".into(), &mut self.time_w1),
            ("time_b1".into(), &mut self.time_b1),
            ("time_w2".into(), &mut self.time_w2),
            ("time_b2".into(), &mut self.time_b2),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            v.push((format!("layers.{i}.ln1_g"), &mut l.ln1_g));
            v.push((format!("layers.{i}.ln1_b"), &mut l.ln1_b));
            v.push((format!("layers.{i}.wq"), &mut l.wq));
            v.push((format!("layers.{i}.bq"), &mut l.bq));
            v.push((format!("layers.{i}.wk"), &mut l.wk));
            v.push((format!("layers.{i}.bk"), &mut l.bk));
            v.push((format!("layers.{i}.wv"), &mut l.wv));
            v.push((format!("layers.{i}.bv"), &mut l.bv));
            v.push((format!("layers.{i}.wo"), &mut l.wo));
            v.push((format!("layers.{i}.bo"), &mut l.bo));
            v.push((format!("layers.{i}.ln2_g"), &mut l.ln2_g));
            v.push((format!("layers.{i}.ln2_b"), &mut l.ln2_b));
            v.push((format!("layers.{i}.ff_w1"), &mut l.ff_w1));
            v.push((format!("layers.{i}.ff_b1"), &mut l.ff_b1));
            v.push((format!("layers.{i}.ff_w2"), &mut l.ff_w2));
            v.push((format!("layers.{i}.ff_b2"), &mut l.ff_b2));
        }
        v.push(("final_ln_g".into(), &mut self.final_ln_g));
        v.push(("final_ln_b".into(), &mut self.final_ln_b));
        v.push(("out_w".into(), &mut self.out_w));
        v.push(("out_b".into(), &mut self.out_b));
        v.push(("repa_w1".into(), &mut self.repa_w1));
        v.push(("repa_b1".into(), &mut self.repa_b1));
        v.push(("repa_w2".into(), &mut self.repa_w2));
        v.push(("repa_b2".into(), &mut self.repa_b2));
        v
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut Array2<f64>)) {
        for (name, a) in self.collect_mut() {
            f(&name, a);
        }
    }

    pub fn n_params(&self) -> usize {
        self.collect().iter().map(|(_, a)| a.len()).sum()
    }

    /// Adds `other * scale` into self, elementwise.
    pub fn add_scaled(&mut self, other: &Self, scale: f64) {
        let mut mine = self.collect_mut();
        let theirs = other.collect();
        assert_eq!(mine.len(), theirs.len());
        for ((_, a), (_, b)) in mine.iter_mut().zip(theirs.iter()) {
            a.scaled_add(scale, b);
        }
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.collect()
            .iter()
            .map(|(_, a)| a.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        self.for_each_mut(|_, a| *a *= factor);
    }

    /// Rounds every value through f32, matching the checkpoint encoding, so a
    /// saved-then-reloaded model is bit-identical to the in-memory one.
    pub fn snap_to_f32(&mut self) {
        self.for_each_mut(|_, a| a.mapv_inplace(|x| x as f32 as f64));
    }

    pub fn is_finite(&self) -> bool {
        self.collect()
            .iter()
            .all(|(_, a)| a.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_stable_and_shapes_match_mut() {
        let cfg = ModelConfig::tiny_for_tests();
        let p = BackboneParams::init(&cfg, 1);
        let mut q = p.clone();
        let names: Vec<String> = p.collect().into_iter().map(|(n, _)| n).collect();
        let names_mut: Vec<String> = q.collect_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, names_mut);
        assert!(names.contains(&"layers.0.wq".to_string()));
        assert_eq!(names.len(), names.iter().collect::<std::collections::HashSet<_>>().len());
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::tiny_for_tests();
        let a = BackboneParams::init(&cfg, 3);
        let b = BackboneParams::init(&cfg, 3);
        for ((_, x), (_, y)) in a.collect().iter().zip(b.collect().iter()) {
            assert_eq!(x, y);
        }
        let c = BackboneParams::init(&cfg, 4);
        assert!(a
            .collect()
            .iter()
            .zip(c.collect().iter())
            .any(|((_, x), (_, y))| x != y));
    }
}
