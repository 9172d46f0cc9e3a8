//! Masked-training-forward vs per-block-inference equivalence, and
//! cached vs uncached forward equivalence, on random parameters.

use blockflow::backbone::{
    build_inference_mask, build_train_specs, build_training_mask, commit, denoise, forward_train,
    infer_full, prefill, BackboneParams, KvCache, ModelConfig, PosSpec, Prompt, PromptInput,
    SequenceLayout, TokenInput,
};
use ndarray::{s, Array2};
use rand::Rng;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn rand_mat(rows: usize, cols: usize, r: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| r.gen::<f64>() * 2.0 - 1.0)
}

/// The NOISY(i) slice of the masked training forward must equal an
/// independent single-block inference forward that sees only
/// `(S, L, z^{<i}, z_t^i, t^i)` — 100 random trials, k up to 8.
#[test]
fn training_mask_equals_per_block_inference_forward() {
    let cfg = ModelConfig {
        layers: 3,
        model_dim: 24,
        heads: 2,
        latent_dim: 4,
        vocab_size: 8,
        n_styles: 4,
        max_positions: 128,
        ff_mult: 2,
        repa_feature_dim: 6,
    };
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let mut r = blockflow::rng::stream(1000, "equiv_trial", trial);
        let params = BackboneParams::init(&cfg, blockflow::rng::derive_seed(7, "p", trial));
        let k = r.gen_range(1..=8usize);
        let b = r.gen_range(1..=3usize);
        let lyric_len = r.gen_range(1..=4usize);
        let layout = SequenceLayout::new(1, lyric_len, k, b).unwrap();
        let mask = build_training_mask(&layout).unwrap();

        let style = r.gen_range(0..cfg.n_styles);
        let lyrics: Vec<u16> = (0..lyric_len)
            .map(|_| r.gen_range(0..cfg.vocab_size as u16))
            .collect();
        let clean = rand_mat(layout.frames(), cfg.latent_dim, &mut r);
        let noisy = rand_mat(layout.frames(), cfg.latent_dim, &mut r);
        let block_t: Vec<f64> = (0..k).map(|_| r.gen::<f64>()).collect();

        let specs = build_train_specs(
            Some(style),
            Some(&lyrics),
            lyric_len,
            &clean,
            &noisy,
            &block_t,
            &layout,
        );
        let (full, _) = forward_train(&params, &specs, &mask, &layout).unwrap();

        // One random block via the independent inference-shaped layout.
        let i = r.gen_range(0..k);
        let prefix = 1 + lyric_len;
        let imask = build_inference_mask(1, lyric_len, i, b);
        let mut ispecs: Vec<PosSpec> = Vec::new();
        ispecs.push(PosSpec {
            input: TokenInput::Style(style),
            pos_index: 0,
            tag: -1.0,
        });
        for (j, &tok) in lyrics.iter().enumerate() {
            ispecs.push(PosSpec {
                input: TokenInput::Lyric(tok),
                pos_index: 1 + j,
                tag: -1.0,
            });
        }
        for row in 0..i * b {
            ispecs.push(PosSpec {
                input: TokenInput::Latent(clean.row(row)),
                pos_index: prefix + row,
                tag: 1.0,
            });
        }
        for row in i * b..(i + 1) * b {
            ispecs.push(PosSpec {
                input: TokenInput::Latent(noisy.row(row)),
                pos_index: prefix + row,
                tag: block_t[i],
            });
        }
        let n = ispecs.len();
        let vhat_block = infer_full(&params, &ispecs, &imask, n - b..n).unwrap();

        let full_block = full.vhat.slice(s![i * b..(i + 1) * b, ..]);
        for (a, c) in full_block.iter().zip(vhat_block.iter()) {
            let e = rel_err(*a, *c);
            worst = worst.max(e);
            assert!(e <= 1e-5, "trial {trial} block {i}: {a} vs {c} rel {e}");
        }
    }
    println!("receptive-field equivalence worst rel err: {worst:.3e}");
}

/// DENOISE through the KV cache must match the NOISY(i) slice of the full
/// training forward on the same clean prefix, block, and timestep.
#[test]
fn cached_denoise_matches_training_slice() {
    let cfg = ModelConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        latent_dim: 3,
        vocab_size: 6,
        n_styles: 3,
        max_positions: 128,
        ff_mult: 2,
        repa_feature_dim: 4,
    };
    for trial in 0..20u64 {
        let mut r = blockflow::rng::stream(2000, "cache_trial", trial);
        let params = BackboneParams::init(&cfg, blockflow::rng::derive_seed(9, "cp", trial));
        let k = r.gen_range(1..=6usize);
        let b = 2;
        let lyric_len = 2;
        let layout = SequenceLayout::new(1, lyric_len, k, b).unwrap();
        let mask = build_training_mask(&layout).unwrap();
        let lyrics: Vec<u16> = (0..lyric_len).map(|_| r.gen_range(0..6u16)).collect();
        let style = r.gen_range(0..3usize);
        let clean = rand_mat(layout.frames(), cfg.latent_dim, &mut r);
        let noisy = rand_mat(layout.frames(), cfg.latent_dim, &mut r);
        let t = r.gen::<f64>();
        let block_t = vec![t; k];

        let specs = build_train_specs(
            Some(style),
            Some(&lyrics),
            lyric_len,
            &clean,
            &noisy,
            &block_t,
            &layout,
        );
        let (full, _) = forward_train(&params, &specs, &mask, &layout).unwrap();

        // Cache path: prefill, commit clean blocks < i, denoise block i.
        let i = r.gen_range(0..k);
        let mut cache = KvCache::new(cfg.layers, cfg.model_dim, b);
        let prompt = Prompt {
            style_id: style,
            lyrics: lyrics.clone(),
        };
        prefill(&params, &PromptInput::Real(&prompt), &mut cache).unwrap();
        for j in 0..i {
            let block = clean.slice(s![j * b..(j + 1) * b, ..]).to_owned();
            commit(&params, &block, &mut cache).unwrap();
        }
        let noisy_block = noisy.slice(s![i * b..(i + 1) * b, ..]).to_owned();
        let vhat = denoise(&params, &noisy_block, t, &cache).unwrap();

        let full_block = full.vhat.slice(s![i * b..(i + 1) * b, ..]);
        for (a, c) in full_block.iter().zip(vhat.iter()) {
            let e = rel_err(*a, *c);
            assert!(e <= 1e-5, "trial {trial} block {i}: {a} vs {c} rel {e}");
        }
    }
}

/// Perturbing positions outside NOISY(i)'s receptive set leaves its output
/// bit-identical (machine-precision independence probe).
#[test]
fn receptive_field_independence_probe() {
    let cfg = ModelConfig {
        layers: 2,
        model_dim: 16,
        heads: 2,
        latent_dim: 3,
        vocab_size: 6,
        n_styles: 3,
        max_positions: 96,
        ff_mult: 2,
        repa_feature_dim: 4,
    };
    let mut r = blockflow::rng::stream(3000, "probe", 0);
    let params = BackboneParams::init(&cfg, 55);
    let k = 4;
    let b = 2;
    let layout = SequenceLayout::new(1, 2, k, b).unwrap();
    let mask = build_training_mask(&layout).unwrap();
    let lyrics = vec![1u16, 2];
    let clean = rand_mat(layout.frames(), cfg.latent_dim, &mut r);
    let noisy = rand_mat(layout.frames(), cfg.latent_dim, &mut r);
    let block_t = vec![0.25, 0.5, 0.75, 0.9];

    let specs = build_train_specs(Some(0), Some(&lyrics), 2, &clean, &noisy, &block_t, &layout);
    let (base, _) = forward_train(&params, &specs, &mask, &layout).unwrap();

    let i = 1; // probe NOISY(1): receptive set = prefix + CLEAN(0) + NOISY(1)
    // Perturb clean blocks >= i, all other noisy blocks, and their timesteps.
    let mut clean2 = clean.clone();
    for row in i * b..k * b {
        for c in 0..cfg.latent_dim {
            clean2[[row, c]] += 5.0 + r.gen::<f64>();
        }
    }
    let mut noisy2 = noisy.clone();
    for blk in 0..k {
        if blk == i {
            continue;
        }
        for row in blk * b..(blk + 1) * b {
            for c in 0..cfg.latent_dim {
                noisy2[[row, c]] -= 3.0 + r.gen::<f64>();
            }
        }
    }
    let mut block_t2 = vec![0.1, 0.5, 0.2, 0.05];
    block_t2[i] = block_t[i];
    let specs2 =
        build_train_specs(Some(0), Some(&lyrics), 2, &clean2, &noisy2, &block_t2, &layout);
    let (probed, _) = forward_train(&params, &specs2, &mask, &layout).unwrap();

    for row in i * b..(i + 1) * b {
        for c in 0..cfg.latent_dim {
            assert_eq!(
                base.vhat[[row, c]],
                probed.vhat[[row, c]],
                "row {row} changed under out-of-field perturbation"
            );
        }
    }
}
