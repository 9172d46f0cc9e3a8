//! Synthetic latent-song corpus with exact oracles.
//!
//! Each song is a sequence of latent frames built from fixed unit-norm token
//! embeddings plus a style offset plus Gaussian noise, so lyric decoding,
//! style similarity, and length are all checkable without a learned model.
//! The module also owns EOP padding: sequences are padded with all-ones
//! frames so the final block always carries at least one stop marker.

use ndarray::{s, Array1, Array2};
use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;

/// Value of every component of the EOP marker frame.
pub const EOP_VALUE: f64 = 1.0;

/// Parameters of the synthetic latent-song domain.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ToySpec {
    pub latent_dim: usize,
    pub vocab_size: usize,
    pub n_styles: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub style_scale: f64,
    /// Block size `b` in frames.
    pub block_size: usize,
    /// Inclusive range of lyric lengths in tokens.
    pub lyric_len_range: (usize, usize),
    pub master_seed: u64,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            vocab_size: 16,
            n_styles: 8,
            frames_per_token: 4,
            noise_sigma: 0.1,
            style_scale: 0.5,
            block_size: 5,
            lyric_len_range: (3, 12),
            master_seed: 20250810,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::Config("latent_dim must be >= 2".into()));
        }
        if self.frames_per_token < 1 || self.block_size < 1 {
            return Err(Error::Config(
                "frames_per_token and block_size must be >= 1".into(),
            ));
        }
        if self.noise_sigma < 0.0 || self.style_scale <= 0.0 {
            return Err(Error::Config("scales must be positive".into()));
        }
        if self.vocab_size < 2 || self.n_styles < 1 {
            return Err(Error::Config("vocab_size >= 2 and n_styles >= 1".into()));
        }
        if self.lyric_len_range.0 < 1 || self.lyric_len_range.0 > self.lyric_len_range.1 {
            return Err(Error::Config("bad lyric_len_range".into()));
        }
        Ok(())
    }

    /// Longest content length in frames a corpus song can have.
    pub fn max_content_frames(&self) -> usize {
        self.lyric_len_range.1 * self.frames_per_token
    }

    /// Longest padded length in frames (full EOP block included).
    pub fn max_padded_frames(&self) -> usize {
        let l = self.max_content_frames();
        padded_len(l, self.block_size)
    }

    /// Hash of the spec used to tie corpora, checkpoints, and reports together.
    pub fn hash(&self) -> String {
        crate::checkpoint::sha256_hex(serde_json::to_string(self).unwrap().as_bytes())
    }
}

/// Token embeddings `e_tau` and style offsets `g_s`: fixed unit-norm vectors
/// drawn once from the master seed.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub token: Array2<f64>,
    pub style: Array2<f64>,
}

impl Embeddings {
    pub fn from_spec(spec: &ToySpec) -> Self {
        let token = unit_rows(spec.vocab_size, spec.latent_dim, spec.master_seed, "token_emb");
        let style = unit_rows(spec.n_styles, spec.latent_dim, spec.master_seed, "style_emb");
        Self { token, style }
    }
}

fn unit_rows(n: usize, dim: usize, master: u64, tag: &str) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for i in 0..n {
        let mut r = rng::stream(master, tag, i as u64);
        let mut v: Array1<f64> = Array1::zeros(dim);
        loop {
            for x in v.iter_mut() {
                *x = r.sample(StandardNormal);
            }
            let norm = v.dot(&v).sqrt();
            if norm > 1e-8 {
                v /= norm;
                break;
            }
        }
        out.row_mut(i).assign(&v);
    }
    out
}

/// A generated song: the ground truth behind every oracle.
#[derive(Debug, Clone)]
pub struct ToySong {
    pub lyrics: Vec<u16>,
    pub style_id: usize,
    /// Content latents, `l` frames by `latent_dim`, no EOP padding.
    pub latents: Array2<f64>,
}

impl ToySong {
    pub fn content_len(&self) -> usize {
        self.latents.nrows()
    }
}

/// A block-aligned latent sequence with EOP padding.
#[derive(Debug, Clone)]
pub struct LatentSequence {
    pub data: Array2<f64>,
    pub block_size: usize,
    /// Frames before EOP padding.
    pub content_length: usize,
}

impl LatentSequence {
    pub fn n_blocks(&self) -> usize {
        self.data.nrows() / self.block_size
    }

    pub fn total_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn content(&self) -> ndarray::ArrayView2<'_, f64> {
        self.data.slice(s![..self.content_length, ..])
    }

    /// Checks the block layout and that every padding frame is exactly EOP.
    pub fn validate(&self) -> Result<()> {
        let n = self.data.nrows();
        if n == 0 || self.block_size == 0 || n % self.block_size != 0 {
            return Err(Error::Layout(format!(
                "total frames {n} not a positive multiple of block size {}",
                self.block_size
            )));
        }
        if self.content_length > n {
            return Err(Error::Layout("content_length exceeds total frames".into()));
        }
        for j in self.content_length..n {
            if self.data.row(j).iter().any(|&x| x != EOP_VALUE) {
                return Err(Error::Layout(format!("frame {j} is not an exact EOP frame")));
            }
        }
        Ok(())
    }
}

/// Padded length for content length `l` and block size `b`: the smallest
/// multiple of `b` that is >= `l`, bumped by one extra block when `l` is
/// already block-aligned so the final block always contains an EOP frame.
pub fn padded_len(l: usize, b: usize) -> usize {
    if l % b == 0 {
        l + b
    } else {
        l + (b - l % b)
    }
}

/// Appends EOP frames to a song's latents per the padding rule.
pub fn pad_eop(song: &ToySong, b: usize) -> LatentSequence {
    pad_eop_frames(&song.latents, b)
}

/// EOP-pads an arbitrary content array.
pub fn pad_eop_frames(content: &Array2<f64>, b: usize) -> LatentSequence {
    let l = content.nrows();
    assert!(l >= 1, "pad_eop requires at least one content frame");
    let total = padded_len(l, b);
    let mut data = Array2::from_elem((total, content.ncols()), EOP_VALUE);
    data.slice_mut(s![..l, ..]).assign(content);
    LatentSequence {
        data,
        block_size: b,
        content_length: l,
    }
}

/// Generates one song. Pure function of `(spec, seed)`; the token/style
/// embedding tables come from the spec's master seed.
pub fn generate_song(spec: &ToySpec, emb: &Embeddings, seed: u64) -> ToySong {
    let mut r = rng::stream(seed, "song", 0);
    let len_dist = Uniform::new_inclusive(spec.lyric_len_range.0, spec.lyric_len_range.1);
    let n_tokens = len_dist.sample(&mut r);
    let tok_dist = Uniform::new(0, spec.vocab_size as u16);
    let lyrics: Vec<u16> = (0..n_tokens).map(|_| tok_dist.sample(&mut r)).collect();
    let style_id = Uniform::new(0, spec.n_styles).sample(&mut r);
    let latents = render_latents(spec, emb, &lyrics, style_id, &mut r);
    ToySong {
        lyrics,
        style_id,
        latents,
    }
}

/// Frame j of token tau under style s is `e_tau + style_scale * g_s + sigma * eps`.
pub fn render_latents(
    spec: &ToySpec,
    emb: &Embeddings,
    lyrics: &[u16],
    style_id: usize,
    r: &mut impl Rng,
) -> Array2<f64> {
    let l = lyrics.len() * spec.frames_per_token;
    let mut out = Array2::zeros((l, spec.latent_dim));
    for (ti, &tok) in lyrics.iter().enumerate() {
        for f in 0..spec.frames_per_token {
            let row = ti * spec.frames_per_token + f;
            for d in 0..spec.latent_dim {
                let noise: f64 = r.sample(StandardNormal);
                out[[row, d]] = emb.token[[tok as usize, d]]
                    + spec.style_scale * emb.style[[style_id, d]]
                    + spec.noise_sigma * noise;
            }
        }
    }
    out
}

fn cosine(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    let na = a.dot(a).sqrt();
    let nb = b.dot(b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.dot(b) / (na * nb)
}

/// Decodes lyric tokens from content frames.
///
/// The style offset is removed first: for each candidate style the segment
/// means are matched to the nearest token embedding by cosine similarity and
/// the style with the best total fit wins. Content frames only; sequences
/// shorter than one token segment decode to the empty list.
pub fn decode_lyrics(latents: &LatentSequence, spec: &ToySpec, emb: &Embeddings) -> Vec<u16> {
    decode_content(&latents.content().to_owned(), spec, emb)
}

/// Decodes directly from a content-frame array (no EOP frames).
pub fn decode_content(content: &Array2<f64>, spec: &ToySpec, emb: &Embeddings) -> Vec<u16> {
    let (style, tokens) = decode_with_style(content, spec, emb);
    let _ = style;
    tokens
}

/// Returns the estimated style and decoded tokens.
pub fn decode_with_style(
    content: &Array2<f64>,
    spec: &ToySpec,
    emb: &Embeddings,
) -> (usize, Vec<u16>) {
    let fpt = spec.frames_per_token;
    let n_seg = content.nrows() / fpt;
    if n_seg == 0 {
        return (0, Vec::new());
    }
    let seg_means: Vec<Array1<f64>> = (0..n_seg)
        .map(|si| {
            content
                .slice(s![si * fpt..(si + 1) * fpt, ..])
                .mean_axis(ndarray::Axis(0))
                .unwrap()
        })
        .collect();

    let mut best_style = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    let mut best_tokens: Vec<u16> = Vec::new();
    for sid in 0..spec.n_styles {
        let offset = emb.style.row(sid).to_owned() * spec.style_scale;
        let mut score = 0.0;
        let mut tokens = Vec::with_capacity(n_seg);
        for m in &seg_means {
            let resid = m - &offset;
            let mut bt = 0u16;
            let mut bc = f64::NEG_INFINITY;
            for tok in 0..spec.vocab_size {
                let c = cosine(&resid, &emb.token.row(tok).to_owned());
                if c > bc {
                    bc = c;
                    bt = tok as u16;
                }
            }
            score += bc;
            tokens.push(bt);
        }
        if score > best_score {
            best_score = score;
            best_style = sid;
            best_tokens = tokens;
        }
    }
    (best_style, best_tokens)
}

/// The four toy preference scores, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct PreferenceScores {
    pub musicality: f64,
    pub style_similarity: f64,
    pub lyric_alignment: f64,
    pub audio_quality: f64,
}

impl PreferenceScores {
    /// Canonical dimension order: musicality, style_similarity,
    /// lyric_alignment, audio_quality.
    pub fn as_array(&self) -> [f64; 4] {
        [
            self.musicality,
            self.style_similarity,
            self.lyric_alignment,
            self.audio_quality,
        ]
    }

    pub fn mean(&self) -> f64 {
        self.as_array().iter().sum::<f64>() / 4.0
    }
}

/// Names matching [`PreferenceScores::as_array`] order.
pub const SCORE_DIMS: [&str; 4] = [
    "musicality",
    "style_similarity",
    "lyric_alignment",
    "audio_quality",
];

/// Reference statistics computed once from the training corpus and used by
/// the musicality / audio-quality oracles.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct CorpusStats {
    /// Mean over corpus songs of the mean squared first difference.
    pub mean_sq_first_diff: f64,
    /// Mean over corpus songs of the mean per-frame L2 norm.
    pub mean_frame_norm: f64,
}

fn mean_sq_first_diff(content: &Array2<f64>) -> f64 {
    let n = content.nrows();
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in 0..n - 1 {
        for d in 0..content.ncols() {
            let diff = content[[j + 1, d]] - content[[j, d]];
            acc += diff * diff;
        }
    }
    acc / ((n - 1) as f64 * content.ncols() as f64)
}

fn mean_frame_norm(content: &Array2<f64>) -> f64 {
    let n = content.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut acc = 0.0;
    for j in 0..n {
        let row = content.row(j);
        acc += row.dot(&row).sqrt();
    }
    acc / n as f64
}

impl CorpusStats {
    pub fn from_songs(songs: &[ToySong]) -> Self {
        let n = songs.len().max(1) as f64;
        let msfd = songs.iter().map(|s| mean_sq_first_diff(&s.latents)).sum::<f64>() / n;
        let mfn = songs.iter().map(|s| mean_frame_norm(&s.latents)).sum::<f64>() / n;
        Self {
            mean_sq_first_diff: msfd,
            mean_frame_norm: mfn,
        }
    }
}

/// Scores a latent sequence against a `(style_id, lyrics)` prompt using the
/// deterministic toy oracles.
pub fn score_preferences(
    latents: &LatentSequence,
    prompt_style: usize,
    prompt_lyrics: &[u16],
    spec: &ToySpec,
    emb: &Embeddings,
    stats: &CorpusStats,
) -> PreferenceScores {
    let content = latents.content().to_owned();
    let (est_style, decoded) = decode_with_style(&content, spec, emb);
    let _ = est_style;

    // Lyric alignment: positionwise token accuracy, penalizing length error.
    let denom = prompt_lyrics.len().max(decoded.len()).max(1);
    let matches = prompt_lyrics
        .iter()
        .zip(decoded.iter())
        .filter(|(a, b)| a == b)
        .count();
    let lyric_alignment = matches as f64 / denom as f64;

    // Style similarity: cosine between the mean decoded-token residual and
    // the prompt's style offset direction.
    let style_similarity = if content.nrows() == 0 {
        0.0
    } else {
        let fpt = spec.frames_per_token;
        let mut resid = Array1::<f64>::zeros(spec.latent_dim);
        let mut count = 0usize;
        for j in 0..content.nrows() {
            let seg = j / fpt;
            if seg >= decoded.len() {
                break;
            }
            let tok = decoded[seg] as usize;
            for d in 0..spec.latent_dim {
                resid[d] += content[[j, d]] - emb.token[[tok, d]];
            }
            count += 1;
        }
        if count == 0 {
            0.0
        } else {
            resid /= count as f64;
            cosine(&resid, &emb.style.row(prompt_style).to_owned()).max(0.0)
        }
    };

    let musicality = (-mean_sq_first_diff(&content) / stats.mean_sq_first_diff.max(1e-12)).exp();
    let audio_quality = (-(mean_frame_norm(&content) - stats.mean_frame_norm).abs()
        / stats.mean_frame_norm.max(1e-12))
    .exp();

    PreferenceScores {
        musicality,
        style_similarity,
        lyric_alignment,
        audio_quality,
    }
}

// ---------------------------------------------------------------------------
// Corpus container and on-disk format
// ---------------------------------------------------------------------------

/// An in-memory corpus: the spec, its songs, and the oracle reference stats.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: ToySpec,
    pub songs: Vec<ToySong>,
    pub stats: CorpusStats,
    /// Per-song generation seeds, parallel to `songs`.
    pub seeds: Vec<u64>,
}

impl Corpus {
    /// Generates `count` songs; song `i` uses a seed derived from the spec's
    /// master seed, so generation can be partitioned by index.
    pub fn generate(spec: &ToySpec, count: usize) -> Result<Self> {
        spec.validate()?;
        let emb = Embeddings::from_spec(spec);
        let seeds: Vec<u64> = (0..count)
            .map(|i| rng::derive_seed(spec.master_seed, "corpus_song", i as u64))
            .collect();
        use rayon::prelude::*;
        let songs: Vec<ToySong> = seeds
            .par_iter()
            .map(|&s| generate_song(spec, &emb, s))
            .collect();
        let stats = CorpusStats::from_songs(&songs);
        Ok(Self {
            spec: spec.clone(),
            songs,
            stats,
            seeds,
        })
    }

    pub fn embeddings(&self) -> Embeddings {
        Embeddings::from_spec(&self.spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecordMeta {
    pub file: String,
    pub seed: u64,
    pub style_id: usize,
    pub lyrics: Vec<u16>,
    pub length_frames: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: ToySpec,
    pub spec_hash: String,
    pub stats: CorpusStats,
    pub records: Vec<RecordMeta>,
}

const RECORD_MAGIC: &[u8; 8] = b"BFSONG1\0";

/// Writes one song record: magic, spec-hash, seed, style, lyrics, length,
/// then raw little-endian f32 frames.
pub fn write_record(path: &Path, song: &ToySong, seed: u64, spec_hash: &str) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(RECORD_MAGIC);
    let hash_bytes = spec_hash.as_bytes();
    buf.extend_from_slice(&(hash_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(hash_bytes);
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(song.style_id as u32).to_le_bytes());
    buf.extend_from_slice(&(song.lyrics.len() as u32).to_le_bytes());
    for &t in &song.lyrics {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend_from_slice(&(song.latents.nrows() as u32).to_le_bytes());
    buf.extend_from_slice(&(song.latents.ncols() as u32).to_le_bytes());
    for &x in song.latents.iter() {
        buf.extend_from_slice(&(x as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn read_record(path: &Path) -> Result<(ToySong, u64, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::Corpus(format!("truncated record {}", path.display())));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    if take(&mut off, 8)? != RECORD_MAGIC {
        return Err(Error::Corpus(format!("bad magic in {}", path.display())));
    }
    let hash_len = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let spec_hash = String::from_utf8_lossy(take(&mut off, hash_len)?).into_owned();
    let seed = u64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap());
    let style_id = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let n_tokens = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut lyrics = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        lyrics.push(u16::from_le_bytes(take(&mut off, 2)?.try_into().unwrap()));
    }
    let rows = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut latents = Array2::zeros((rows, cols));
    for j in 0..rows {
        for d in 0..cols {
            let v = f32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
            latents[[j, d]] = v as f64;
        }
    }
    Ok((
        ToySong {
            lyrics,
            style_id,
            latents,
        },
        seed,
        spec_hash,
    ))
}

/// Saves the corpus as `manifest.json` plus one binary record per song.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("songs"))?;
    let spec_hash = corpus.spec.hash();
    let mut records = Vec::with_capacity(corpus.songs.len());
    for (i, song) in corpus.songs.iter().enumerate() {
        let rel = format!("songs/{i:05}.bin");
        write_record(&dir.join(&rel), song, corpus.seeds[i], &spec_hash)?;
        records.push(RecordMeta {
            file: rel,
            seed: corpus.seeds[i],
            style_id: song.style_id,
            lyrics: song.lyrics.clone(),
            length_frames: song.content_len(),
        });
    }
    let manifest = CorpusManifest {
        spec: corpus.spec.clone(),
        spec_hash,
        stats: corpus.stats,
        records,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    std::fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let expected = manifest.spec.hash();
    if expected != manifest.spec_hash {
        return Err(Error::HashMismatch {
            what: "corpus spec",
            expected,
            actual: manifest.spec_hash.clone(),
        });
    }
    let mut songs = Vec::with_capacity(manifest.records.len());
    let mut seeds = Vec::with_capacity(manifest.records.len());
    for rec in &manifest.records {
        let (song, seed, hash) = read_record(&dir.join(&rec.file))?;
        if hash != manifest.spec_hash {
            return Err(Error::HashMismatch {
                what: "corpus record",
                expected: manifest.spec_hash.clone(),
                actual: hash,
            });
        }
        songs.push(song);
        seeds.push(seed);
    }
    Ok(Corpus {
        spec: manifest.spec,
        stats: manifest.stats,
        songs,
        seeds,
    })
}

/// Hash of a corpus directory's manifest, used for report traceability.
pub fn corpus_hash(dir: &Path) -> Result<String> {
    let bytes = std::fs::read(dir.join("manifest.json"))?;
    Ok(crate::checkpoint::sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_noise_spec() -> ToySpec {
        ToySpec {
            noise_sigma: 0.0,
            ..ToySpec::default()
        }
    }

    #[test]
    fn zero_noise_frames_equal_token_plus_style() {
        let spec = zero_noise_spec();
        let emb = Embeddings::from_spec(&spec);
        let mut r = rng::stream(1, "t", 0);
        let latents = render_latents(&spec, &emb, &[3], 0, &mut r);
        assert_eq!(latents.nrows(), spec.frames_per_token);
        for j in 0..latents.nrows() {
            for d in 0..spec.latent_dim {
                let expect = emb.token[[3, d]] + 0.5 * emb.style[[0, d]];
                assert!((latents[[j, d]] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = ToySpec::default();
        let emb = Embeddings::from_spec(&spec);
        let a = generate_song(&spec, &emb, 99);
        let b = generate_song(&spec, &emb, 99);
        assert_eq!(a.lyrics, b.lyrics);
        assert_eq!(a.style_id, b.style_id);
        assert_eq!(a.latents, b.latents);
    }

    #[test]
    fn padding_rule_examples() {
        // l=10, b=4: 2 EOP frames appended, total 12, k=3.
        let content = Array2::zeros((10, 4));
        let seq = pad_eop_frames(&content, 4);
        assert_eq!(seq.total_frames(), 12);
        assert_eq!(seq.n_blocks(), 3);
        assert_eq!(seq.content_length, 10);

        // l=8, b=4: an additional full block of EOPs, total 12, k=3.
        let content = Array2::zeros((8, 4));
        let seq = pad_eop_frames(&content, 4);
        assert_eq!(seq.total_frames(), 12);
        assert_eq!(seq.n_blocks(), 3);

        // l=1, b=1: one EOP frame appended, total 2, k=2.
        let content = Array2::zeros((1, 4));
        let seq = pad_eop_frames(&content, 1);
        assert_eq!(seq.total_frames(), 2);
        assert_eq!(seq.n_blocks(), 2);
    }

    #[test]
    fn padding_rule_exhaustive() {
        // Independent restatement of the rule: padded length is the smallest
        // multiple of b strictly greater than l when l % b == 0, else the
        // smallest multiple >= l; final block always has >= 1 EOP frame.
        for b in 1..=10usize {
            for l in 1..=50usize {
                let mut m = b;
                while m < l {
                    m += b;
                }
                let expect = if l % b == 0 { m + b } else { m };
                let content = Array2::zeros((l, 3));
                let seq = pad_eop_frames(&content, b);
                assert_eq!(seq.total_frames(), expect, "l={l} b={b}");
                assert!(seq.total_frames() - l >= 1);
                assert!(seq.total_frames() - l <= b);
                seq.validate().unwrap();
            }
        }
    }

    #[test]
    fn decode_zero_noise_roundtrip() {
        let spec = zero_noise_spec();
        let emb = Embeddings::from_spec(&spec);
        for seed in 0..50u64 {
            let song = generate_song(&spec, &emb, seed);
            let padded = pad_eop(&song, spec.block_size);
            let decoded = decode_lyrics(&padded, &spec, &emb);
            assert_eq!(decoded, song.lyrics, "seed {seed}");
        }
    }

    #[test]
    fn decode_pure_eop_is_empty() {
        let spec = ToySpec::default();
        let emb = Embeddings::from_spec(&spec);
        let seq = LatentSequence {
            data: Array2::from_elem((spec.block_size, spec.latent_dim), EOP_VALUE),
            block_size: spec.block_size,
            content_length: 0,
        };
        assert!(decode_lyrics(&seq, &spec, &emb).is_empty());
    }

    #[test]
    fn decode_shorter_than_token_segment_is_empty() {
        let spec = ToySpec::default();
        let emb = Embeddings::from_spec(&spec);
        let content = Array2::zeros((spec.frames_per_token - 1, spec.latent_dim));
        assert!(decode_content(&content, &spec, &emb).is_empty());
    }

    #[test]
    fn corpus_roundtrip_is_exact_after_f32_quantization() {
        let spec = ToySpec::default();
        let corpus = Corpus::generate(&spec, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_corpus(&corpus, dir.path()).unwrap();
        let loaded = load_corpus(dir.path()).unwrap();
        assert_eq!(loaded.songs.len(), 5);
        for (a, b) in corpus.songs.iter().zip(loaded.songs.iter()) {
            assert_eq!(a.lyrics, b.lyrics);
            assert_eq!(a.style_id, b.style_id);
            for (x, y) in a.latents.iter().zip(b.latents.iter()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
    }

    #[test]
    fn self_scored_corpus_song_has_perfect_alignment() {
        let spec = ToySpec::default();
        let corpus = Corpus::generate(&spec, 20).unwrap();
        let emb = corpus.embeddings();
        for song in &corpus.songs {
            let padded = pad_eop(song, spec.block_size);
            let scores = score_preferences(
                &padded,
                song.style_id,
                &song.lyrics,
                &spec,
                &emb,
                &corpus.stats,
            );
            assert_eq!(scores.lyric_alignment, 1.0);
            assert!(scores.musicality > 0.0 && scores.musicality <= 1.0);
            assert!(scores.audio_quality > 0.0 && scores.audio_quality <= 1.0);
            assert!(scores.style_similarity >= 0.0 && scores.style_similarity <= 1.0);
        }
    }
}
