//! Temporary diagnostic probe (not part of the suite): run with
//! `cargo test --test probe -- --ignored --nocapture`.

use blockflow::backbone::{commit, denoise, prefill, KvCache, Prompt, PromptInput};
use blockflow::checkpoint;
use blockflow::flow::{sample_block, SamplerConfig};
use blockflow::synthdata::{load_corpus, pad_eop};
use ndarray::{s, Array2};
use std::path::Path;

#[test]
#[ignore]
fn probe_teacher_forced_vs_free_generation() {
    let (params, _meta) = checkpoint::load(Path::new("/tmp/cal/run2/ckpt-final")).unwrap();
    let corpus = load_corpus(Path::new("/tmp/ref/corpus")).unwrap();
    let emb = corpus.embeddings();
    let spec = &corpus.spec;
    let b = spec.block_size;

    for song_idx in 0..3usize {
        let song = &corpus.songs[song_idx];
        let padded = pad_eop(song, b);
        let k = padded.n_blocks();
        println!(
            "song {song_idx}: style {} lyrics {:?} frames {} k {k}",
            song.style_id,
            song.lyrics,
            song.content_len()
        );

        // Teacher-forced: commit TRUE clean blocks, sample each block.
        let mut cache = KvCache::new(params.cfg.layers, params.cfg.model_dim, b);
        let prompt = Prompt {
            style_id: song.style_id,
            lyrics: song.lyrics.clone(),
        };
        prefill(&params, &PromptInput::Real(&prompt), &mut cache).unwrap();
        for i in 0..k {
            let truth = padded.data.slice(s![i * b..(i + 1) * b, ..]).to_owned();
            let z0 = Array2::from_shape_fn((b, spec.latent_dim), |(r, c)| {
                use rand::Rng;
                let mut rng = blockflow::rng::stream(77, "probe_z0", (i * 1000 + r * 10 + c) as u64);
                rng.gen::<f64>() * 2.0 - 1.0
            });
            let cfg = SamplerConfig {
                steps: 32,
                ..Default::default()
            };
            let mut field = |x: &Array2<f64>, t: f64| denoise(&params, x, t, &cache);
            let mut no_un: Option<&mut fn(&Array2<f64>, f64) -> blockflow::Result<Array2<f64>>> =
                None;
            let sampled = sample_block(&mut field, no_un.take(), &z0, &cfg).unwrap();
            let err = (&sampled - &truth).mapv(|x| x * x).mean().unwrap();
            // Per-t denoise MSE on the true interpolation path.
            let mut path_err = Vec::new();
            for &t in &[0.1, 0.5, 0.9] {
                use rand::Rng;
                let mut rng = blockflow::rng::stream(99, "probe_t", (i * 7) as u64);
                let z0p: Array2<f64> = Array2::from_shape_fn((b, spec.latent_dim), |_| {
                    rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng)
                });
                let zt = &z0p * (1.0 - t) + &truth * t;
                let v_true = &truth - &z0p;
                let v_hat = denoise(&params, &zt, t, &cache).unwrap();
                path_err.push((&v_hat - &v_true).mapv(|x| x * x).mean().unwrap());
            }
            println!(
                "  block {i}: sample MSE {err:.4}; denoise MSE at t=0.1/0.5/0.9: {:.3} {:.3} {:.3}",
                path_err[0], path_err[1], path_err[2]
            );
            commit(&params, &truth, &mut cache).unwrap();
        }

        // Decode the teacher-forced samples? Instead decode block means.
        let decoded = blockflow::synthdata::decode_lyrics(&padded, spec, &emb);
        println!("  oracle decode of truth: {decoded:?}");
    }
}
