//! Forward and backward passes of the toy diffusion transformer.
//!
//! Three execution paths share the same math:
//!
//! - [`forward_train`] / [`backward_train`] — full traced pass over the
//!   concatenated `(S, L, Z, Z_t)` sequence with an explicit attention mask;
//! - [`infer_full`] — lean untraced pass used by the uncached generation
//!   baseline and the receptive-field equivalence checks;
//! - the incremental cached pass in [`super::cache`].
//!
//! All math is f64. Gradients are accumulated into a [`ModelGrads`] mirror of
//! the parameter struct.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};

use super::params::{BackboneParams, LayerParams, TIME_FEATURES, TIME_SCALE};
use super::SequenceLayout;
use crate::error::{Error, Result};

/// Gradients use the same named-tensor layout as the parameters.
pub type ModelGrads = BackboneParams;

const LN_EPS: f64 = 1e-6;

/// What one sequence position carries into the embedding stage.
#[derive(Debug, Clone)]
pub enum TokenInput<'a> {
    Style(usize),
    NullStyle,
    Lyric(u16),
    NullLyric,
    Latent(ArrayView1<'a, f64>),
}

/// One position of an embedded sequence: its content, positional-encoding
/// index, and timestep tag.
#[derive(Debug, Clone)]
pub struct PosSpec<'a> {
    pub input: TokenInput<'a>,
    pub pos_index: usize,
    pub tag: f64,
}

/// Output of a training forward pass.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    /// Velocity estimates for all noisy positions, `(k*b) x latent_dim`.
    pub vhat: Array2<f64>,
    /// Residual-stream hidden states after the mid-depth tap layer, `n x d`.
    pub tap_hidden: Array2<f64>,
}

// ---------------------------------------------------------------------------
// Scalar nonlinearities
// ---------------------------------------------------------------------------

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_prime(x: f64) -> f64 {
    let sig = 1.0 / (1.0 + (-x).exp());
    sig * (1.0 + x * (1.0 - sig))
}

/// Sinusoidal features of a timestep tag; defined for negative tags too.
pub fn time_features(tag: f64) -> Array1<f64> {
    let half = TIME_FEATURES / 2;
    let mut out = Array1::zeros(TIME_FEATURES);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / (half - 1) as f64).exp();
        let angle = tag * TIME_SCALE * freq;
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    out
}

// ---------------------------------------------------------------------------
// Small matrix helpers
// ---------------------------------------------------------------------------

fn add_row_inplace(a: &mut Array2<f64>, row: &Array2<f64>) {
    let r = row.row(0);
    for mut out in a.rows_mut() {
        out += &r;
    }
}

fn col_sums(a: &Array2<f64>) -> Array2<f64> {
    a.sum_axis(Axis(0)).insert_axis(Axis(0))
}

/// Row-wise layer norm; returns `(out, xhat, inv_std)`.
fn layer_norm_fwd(
    x: &Array2<f64>,
    g: &Array2<f64>,
    b: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = x.nrows();
    let d = x.ncols();
    let mut xhat = Array2::zeros((n, d));
    let mut inv = Array1::zeros(n);
    let mut out = Array2::zeros((n, d));
    for i in 0..n {
        let row = x.row(i);
        let mean = row.sum() / d as f64;
        let mut var = 0.0;
        for &v in row {
            let c = v - mean;
            var += c * c;
        }
        var /= d as f64;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv[i] = istd;
        for j in 0..d {
            let xh = (x[[i, j]] - mean) * istd;
            xhat[[i, j]] = xh;
            out[[i, j]] = g[[0, j]] * xh + b[[0, j]];
        }
    }
    (out, xhat, inv)
}

/// Backward of layer norm; accumulates `dg`/`db` and returns `dx`.
fn layer_norm_bwd(
    dout: &Array2<f64>,
    xhat: &Array2<f64>,
    inv: &Array1<f64>,
    g: &Array2<f64>,
    dg: &mut Array2<f64>,
    db: &mut Array2<f64>,
) -> Array2<f64> {
    let n = dout.nrows();
    let d = dout.ncols();
    let mut dx = Array2::zeros((n, d));
    for i in 0..n {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dy = dout[[i, j]];
            dg[[0, j]] += dy * xhat[[i, j]];
            db[[0, j]] += dy;
            let dxh = dy * g[[0, j]];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat[[i, j]];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        for j in 0..d {
            let dxh = dout[[i, j]] * g[[0, j]];
            dx[[i, j]] = inv[i] * (dxh - mean_dxhat - xhat[[i, j]] * mean_dxhat_xhat);
        }
    }
    dx
}

/// Row-wise stable softmax over scores that may contain `-inf`.
fn softmax_rows(mut scores: Array2<f64>) -> Array2<f64> {
    for mut row in scores.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    scores
}

// ---------------------------------------------------------------------------
// Embedding
// ---------------------------------------------------------------------------

pub struct EmbedTrace<'a> {
    feats: Array2<f64>,
    u1: Array2<f64>,
    s1: Array2<f64>,
    latent_rows: Vec<usize>,
    latent_inputs: Array2<f64>,
    /// `(sequence row, is_style_table, table row)` for token inputs.
    token_refs: Vec<(usize, bool, usize)>,
    pos_indices: Vec<usize>,
    _marker: std::marker::PhantomData<&'a ()>,
}

/// Embeds a sequence of position specs:
/// `x[i] = content_embed(i) + pos_embed[pos_index(i)] + time_mlp(sinusoid(tag_i))`.
pub fn embed_sequence<'a>(
    params: &BackboneParams,
    specs: &[PosSpec<'a>],
) -> Result<(Array2<f64>, EmbedTrace<'a>)> {
    let n = specs.len();
    let d = params.cfg.model_dim;
    let mut feats = Array2::zeros((n, TIME_FEATURES));
    for (i, spec) in specs.iter().enumerate() {
        feats.row_mut(i).assign(&time_features(spec.tag));
    }
    let mut u1 = feats.dot(&params.time_w1);
    add_row_inplace(&mut u1, &params.time_b1);
    let s1 = u1.mapv(silu);
    let mut time_out = s1.dot(&params.time_w2);
    add_row_inplace(&mut time_out, &params.time_b2);

    let mut x = time_out;
    let mut latent_rows = Vec::new();
    let mut token_refs = Vec::new();
    let mut pos_indices = Vec::with_capacity(n);
    for (i, spec) in specs.iter().enumerate() {
        if spec.pos_index >= params.cfg.max_positions {
            return Err(Error::Layout(format!(
                "position index {} exceeds max_positions {}",
                spec.pos_index, params.cfg.max_positions
            )));
        }
        pos_indices.push(spec.pos_index);
        let mut row = x.row_mut(i);
        row += &params.pos_embed.row(spec.pos_index);
        match &spec.input {
            TokenInput::Style(id) => {
                if *id >= params.cfg.n_styles {
                    return Err(Error::Layout(format!("style id {id} out of range")));
                }
                row += &params.style_embed.row(*id);
                token_refs.push((i, true, *id));
            }
            TokenInput::NullStyle => {
                row += &params.style_embed.row(params.cfg.n_styles);
                token_refs.push((i, true, params.cfg.n_styles));
            }
            TokenInput::Lyric(tok) => {
                let tok = *tok as usize;
                if tok >= params.cfg.vocab_size {
                    return Err(Error::Layout(format!("lyric token {tok} out of range")));
                }
                row += &params.lyric_embed.row(tok);
                token_refs.push((i, false, tok));
            }
            TokenInput::NullLyric => {
                row += &params.lyric_embed.row(params.cfg.vocab_size);
                token_refs.push((i, false, params.cfg.vocab_size));
            }
            TokenInput::Latent(v) => {
                if v.len() != params.cfg.latent_dim {
                    return Err(Error::ShapeMismatch {
                        context: "latent frame",
                        expected: format!("{}", params.cfg.latent_dim),
                        got: format!("{}", v.len()),
                    });
                }
                latent_rows.push(i);
            }
        }
    }

    let m = latent_rows.len();
    let mut latent_inputs = Array2::zeros((m, params.cfg.latent_dim));
    for (r, &i) in latent_rows.iter().enumerate() {
        if let TokenInput::Latent(v) = &specs[i].input {
            latent_inputs.row_mut(r).assign(v);
        }
    }
    if m > 0 {
        let mut proj = latent_inputs.dot(&params.latent_in_w);
        add_row_inplace(&mut proj, &params.latent_in_b);
        for (r, &i) in latent_rows.iter().enumerate() {
            let mut row = x.row_mut(i);
            row += &proj.row(r);
        }
    }

    let _ = d;
    Ok((
        x,
        EmbedTrace {
            feats,
            u1,
            s1,
            latent_rows,
            latent_inputs,
            token_refs,
            pos_indices,
            _marker: std::marker::PhantomData,
        },
    ))
}

fn embed_backward(
    params: &BackboneParams,
    trace: &EmbedTrace,
    dx: &Array2<f64>,
    grads: &mut ModelGrads,
) {
    // Time MLP: every position receives the time embedding.
    let ds1 = dx.dot(&params.time_w2.t());
    grads.time_w2 += &trace.s1.t().dot(dx);
    grads.time_b2 += &col_sums(dx);
    let du1 = &ds1 * &trace.u1.mapv(silu_prime);
    grads.time_w1 += &trace.feats.t().dot(&du1);
    grads.time_b1 += &col_sums(&du1);

    for (i, &pidx) in trace.pos_indices.iter().enumerate() {
        let mut row = grads.pos_embed.row_mut(pidx);
        row += &dx.row(i);
    }
    for &(i, is_style, tr) in &trace.token_refs {
        if is_style {
            let mut row = grads.style_embed.row_mut(tr);
            row += &dx.row(i);
        } else {
            let mut row = grads.lyric_embed.row_mut(tr);
            row += &dx.row(i);
        }
    }
    let m = trace.latent_rows.len();
    if m > 0 {
        let mut dx_lat = Array2::zeros((m, dx.ncols()));
        for (r, &i) in trace.latent_rows.iter().enumerate() {
            dx_lat.row_mut(r).assign(&dx.row(i));
        }
        grads.latent_in_w += &trace.latent_inputs.t().dot(&dx_lat);
        grads.latent_in_b += &col_sums(&dx_lat);
    }
}

// ---------------------------------------------------------------------------
// Transformer layers
// ---------------------------------------------------------------------------

struct LayerTrace {
    a1: Array2<f64>,
    xhat1: Array2<f64>,
    inv1: Array1<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    p: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    xhat2: Array2<f64>,
    inv2: Array1<f64>,
    a2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

fn qkv(lp: &LayerParams, a1: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let mut q = a1.dot(&lp.wq);
    add_row_inplace(&mut q, &lp.bq);
    let mut k = a1.dot(&lp.wk);
    add_row_inplace(&mut k, &lp.bk);
    let mut v = a1.dot(&lp.wv);
    add_row_inplace(&mut v, &lp.bv);
    (q, k, v)
}

/// Masked multi-head attention over one sequence. Returns per-head softmax
/// matrices and the concatenated context.
fn attention_full(
    q: &Array2<f64>,
    k: &Array2<f64>,
    v: &Array2<f64>,
    mask: Option<&Array2<bool>>,
    heads: usize,
) -> (Vec<Array2<f64>>, Array2<f64>) {
    let n = q.nrows();
    let m = k.nrows();
    let d = q.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut ctx = Array2::zeros((n, d));
    let mut ps = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t()) * scale;
        if let Some(mask) = mask {
            for qi in 0..n {
                for ki in 0..m {
                    if !mask[[qi, ki]] {
                        scores[[qi, ki]] = f64::NEG_INFINITY;
                    }
                }
            }
        }
        let p = softmax_rows(scores);
        let ch = p.dot(&vh);
        ctx.slice_mut(s![.., cols]).assign(&ch);
        ps.push(p);
    }
    (ps, ctx)
}

fn layer_forward(
    lp: &LayerParams,
    x: &Array2<f64>,
    mask: Option<&Array2<bool>>,
    heads: usize,
) -> (Array2<f64>, LayerTrace) {
    let (a1, xhat1, inv1) = layer_norm_fwd(x, &lp.ln1_g, &lp.ln1_b);
    let (q, k, v) = qkv(lp, &a1);
    let (p, ctx) = attention_full(&q, &k, &v, mask, heads);
    let mut o = ctx.dot(&lp.wo);
    add_row_inplace(&mut o, &lp.bo);
    let x_mid = x + &o;

    let (a2, xhat2, inv2) = layer_norm_fwd(&x_mid, &lp.ln2_g, &lp.ln2_b);
    let mut u = a2.dot(&lp.ff_w1);
    add_row_inplace(&mut u, &lp.ff_b1);
    let g = u.mapv(gelu);
    let mut f = g.dot(&lp.ff_w2);
    add_row_inplace(&mut f, &lp.ff_b2);
    let x_out = &x_mid + &f;

    (
        x_out,
        LayerTrace {
            a1,
            xhat1,
            inv1,
            q,
            k,
            v,
            p,
            ctx,
            xhat2,
            inv2,
            a2,
            u,
            g,
        },
    )
}

fn layer_backward(
    lp: &LayerParams,
    tr: &LayerTrace,
    dx_out: &Array2<f64>,
    heads: usize,
    gl: &mut LayerParams,
) -> Array2<f64> {
    let d = dx_out.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // FFN branch.
    let df = dx_out;
    let dg = df.dot(&lp.ff_w2.t());
    gl.ff_w2 += &tr.g.t().dot(df);
    gl.ff_b2 += &col_sums(df);
    let du = &dg * &tr.u.mapv(gelu_prime);
    gl.ff_w1 += &tr.a2.t().dot(&du);
    gl.ff_b1 += &col_sums(&du);
    let da2 = du.dot(&lp.ff_w1.t());
    let dx_mid =
        dx_out + &layer_norm_bwd(&da2, &tr.xhat2, &tr.inv2, &lp.ln2_g, &mut gl.ln2_g, &mut gl.ln2_b);

    // Attention branch.
    let do_ = &dx_mid;
    let dctx = do_.dot(&lp.wo.t());
    gl.wo += &tr.ctx.t().dot(do_);
    gl.bo += &col_sums(do_);

    let n = dx_out.nrows();
    let mut dq = Array2::zeros((n, d));
    let mut dk = Array2::zeros((n, d));
    let mut dv = Array2::zeros((n, d));
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        let p = &tr.p[h];
        let vh = tr.v.slice(s![.., cols.clone()]);
        let kh = tr.k.slice(s![.., cols.clone()]);
        let qh = tr.q.slice(s![.., cols.clone()]);
        let dctx_h = dctx.slice(s![.., cols.clone()]);
        let dp = dctx_h.dot(&vh.t());
        let dvh = p.t().dot(&dctx_h);
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let mut ds = Array2::zeros(p.raw_dim());
        for qi in 0..p.nrows() {
            for ki in 0..p.ncols() {
                ds[[qi, ki]] = p[[qi, ki]] * (dp[[qi, ki]] - row_dot[qi]) * scale;
            }
        }
        let dqh = ds.dot(&kh);
        let dkh = ds.t().dot(&qh);
        dq.slice_mut(s![.., cols.clone()]).assign(&dqh);
        dk.slice_mut(s![.., cols.clone()]).assign(&dkh);
        dv.slice_mut(s![.., cols]).assign(&dvh);
    }

    let da1 = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t());
    gl.wq += &tr.a1.t().dot(&dq);
    gl.bq += &col_sums(&dq);
    gl.wk += &tr.a1.t().dot(&dk);
    gl.bk += &col_sums(&dk);
    gl.wv += &tr.a1.t().dot(&dv);
    gl.bv += &col_sums(&dv);

    &dx_mid + &layer_norm_bwd(&da1, &tr.xhat1, &tr.inv1, &lp.ln1_g, &mut gl.ln1_g, &mut gl.ln1_b)
}

// ---------------------------------------------------------------------------
// Full traced forward / backward
// ---------------------------------------------------------------------------

pub struct ForwardTrace<'a> {
    embed: EmbedTrace<'a>,
    layers: Vec<LayerTrace>,
    /// Final-LN trace over the noisy slice.
    af: Array2<f64>,
    xhatf: Array2<f64>,
    invf: Array1<f64>,
    n_total: usize,
    noisy_rows: std::ops::Range<usize>,
}

/// Builds the position specs for a `(S, L, Z, Z_t)` training sequence.
pub fn build_train_specs<'a>(
    style: Option<usize>,
    lyrics: Option<&'a [u16]>,
    lyric_len: usize,
    clean: &'a Array2<f64>,
    noisy: &'a Array2<f64>,
    block_t: &[f64],
    layout: &SequenceLayout,
) -> Vec<PosSpec<'a>> {
    let mut specs = Vec::with_capacity(layout.total_len());
    specs.push(PosSpec {
        input: match style {
            Some(id) => TokenInput::Style(id),
            None => TokenInput::NullStyle,
        },
        pos_index: 0,
        tag: -1.0,
    });
    for j in 0..lyric_len {
        specs.push(PosSpec {
            input: match lyrics {
                Some(l) => TokenInput::Lyric(l[j]),
                None => TokenInput::NullLyric,
            },
            pos_index: layout.prompt_len + j,
            tag: -1.0,
        });
    }
    for r in 0..layout.frames() {
        specs.push(PosSpec {
            input: TokenInput::Latent(clean.row(r)),
            pos_index: layout.prefix_len() + r,
            tag: 1.0,
        });
    }
    for r in 0..layout.frames() {
        specs.push(PosSpec {
            input: TokenInput::Latent(noisy.row(r)),
            pos_index: layout.prefix_len() + r,
            tag: block_t[r / layout.block_size],
        });
    }
    specs
}

/// Traced forward pass over a masked training sequence. Returns velocity
/// estimates for the noisy slice and mid-depth hidden states for REPA.
pub fn forward_train<'a>(
    params: &BackboneParams,
    specs: &[PosSpec<'a>],
    mask: &Array2<bool>,
    layout: &SequenceLayout,
) -> Result<(ModelOutput, ForwardTrace<'a>)> {
    let n = layout.total_len();
    if specs.len() != n {
        return Err(Error::Layout(format!(
            "specs length {} does not match layout total {n}",
            specs.len()
        )));
    }
    if mask.dim() != (n, n) {
        return Err(Error::ShapeMismatch {
            context: "training mask",
            expected: format!("({n}, {n})"),
            got: format!("{:?}", mask.dim()),
        });
    }
    let (mut x, embed) = embed_sequence(params, specs)?;
    let mut layer_traces = Vec::with_capacity(params.cfg.layers);
    let mut tap_hidden = None;
    for (li, lp) in params.layers.iter().enumerate() {
        let (x_next, tr) = layer_forward(lp, &x, Some(mask), params.cfg.heads);
        layer_traces.push(tr);
        x = x_next;
        if li + 1 == params.cfg.tap_layers() {
            tap_hidden = Some(x.clone());
        }
    }
    let tap_hidden = tap_hidden.expect("tap layer within range");

    let noisy_rows = layout.noisy_start()..layout.total_len();
    let xt = x.slice(s![noisy_rows.clone(), ..]).to_owned();
    let (af, xhatf, invf) = layer_norm_fwd(&xt, &params.final_ln_g, &params.final_ln_b);
    let mut vhat = af.dot(&params.out_w);
    add_row_inplace(&mut vhat, &params.out_b);

    if vhat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "forward_train vhat",
            step: None,
        });
    }

    Ok((
        ModelOutput { vhat, tap_hidden },
        ForwardTrace {
            embed,
            layers: layer_traces,
            af,
            xhatf,
            invf,
            n_total: n,
            noisy_rows,
        },
    ))
}

/// Backward pass matching [`forward_train`]. `d_vhat` is the loss gradient at
/// the velocity head; `d_tap` (same shape as the hidden sequence) is injected
/// at the REPA tap point and may be zero.
pub fn backward_train(
    params: &BackboneParams,
    trace: &ForwardTrace,
    d_vhat: &Array2<f64>,
    d_tap: Option<&Array2<f64>>,
    grads: &mut ModelGrads,
) {
    let heads = params.cfg.heads;

    // Velocity head and final LN over the noisy slice.
    let da = d_vhat.dot(&params.out_w.t());
    grads.out_w += &trace.af.t().dot(d_vhat);
    grads.out_b += &col_sums(d_vhat);
    let dxt = layer_norm_bwd(
        &da,
        &trace.xhatf,
        &trace.invf,
        &params.final_ln_g,
        &mut grads.final_ln_g,
        &mut grads.final_ln_b,
    );
    let mut dx = Array2::zeros((trace.n_total, params.cfg.model_dim));
    dx.slice_mut(s![trace.noisy_rows.clone(), ..]).assign(&dxt);

    let tap = params.cfg.tap_layers();
    for li in (tap..params.layers.len()).rev() {
        dx = layer_backward(
            &params.layers[li],
            &trace.layers[li],
            &dx,
            heads,
            &mut grads.layers[li],
        );
    }
    if let Some(d_tap) = d_tap {
        dx += d_tap;
    }
    for li in (0..tap).rev() {
        dx = layer_backward(
            &params.layers[li],
            &trace.layers[li],
            &dx,
            heads,
            &mut grads.layers[li],
        );
    }
    embed_backward(params, &trace.embed, &dx, grads);
}

/// Lean untraced forward over an arbitrary masked sequence; returns the
/// velocity head applied to `out_rows`.
pub fn infer_full(
    params: &BackboneParams,
    specs: &[PosSpec],
    mask: &Array2<bool>,
    out_rows: std::ops::Range<usize>,
) -> Result<Array2<f64>> {
    let (mut x, _embed) = embed_sequence(params, specs)?;
    if mask.dim() != (specs.len(), specs.len()) {
        return Err(Error::ShapeMismatch {
            context: "inference mask",
            expected: format!("({0}, {0})", specs.len()),
            got: format!("{:?}", mask.dim()),
        });
    }
    for lp in &params.layers {
        let (x_next, _) = layer_forward(lp, &x, Some(mask), params.cfg.heads);
        x = x_next;
    }
    let xt = x.slice(s![out_rows, ..]).to_owned();
    let (af, _, _) = layer_norm_fwd(&xt, &params.final_ln_g, &params.final_ln_b);
    let mut vhat = af.dot(&params.out_w);
    add_row_inplace(&mut vhat, &params.out_b);
    Ok(vhat)
}

// Shared with the cache module.
pub(super) use internal::*;

mod internal {
    use super::*;

    pub struct LeanLayerOut {
        pub k_self: Array2<f64>,
        pub v_self: Array2<f64>,
        pub x_out: Array2<f64>,
    }

    /// One layer over a query block whose keys are `[cache_kv; self]`.
    pub fn layer_forward_cached(
        lp: &LayerParams,
        x: &Array2<f64>,
        cache_k: &Array2<f64>,
        cache_v: &Array2<f64>,
        heads: usize,
    ) -> LeanLayerOut {
        let (a1, _, _) = layer_norm_fwd(x, &lp.ln1_g, &lp.ln1_b);
        let (q, k_self, v_self) = qkv(lp, &a1);
        let k_all = ndarray::concatenate(Axis(0), &[cache_k.view(), k_self.view()]).unwrap();
        let v_all = ndarray::concatenate(Axis(0), &[cache_v.view(), v_self.view()]).unwrap();
        let (_, ctx) = attention_full(&q, &k_all, &v_all, None, heads);
        let mut o = ctx.dot(&lp.wo);
        add_row_inplace(&mut o, &lp.bo);
        let x_mid = x + &o;
        let (a2, _, _) = layer_norm_fwd(&x_mid, &lp.ln2_g, &lp.ln2_b);
        let mut u = a2.dot(&lp.ff_w1);
        add_row_inplace(&mut u, &lp.ff_b1);
        let g = u.mapv(gelu);
        let mut f = g.dot(&lp.ff_w2);
        add_row_inplace(&mut f, &lp.ff_b2);
        LeanLayerOut {
            k_self,
            v_self,
            x_out: &x_mid + &f,
        }
    }

    pub fn velocity_head(params: &BackboneParams, x: &Array2<f64>) -> Array2<f64> {
        let (af, _, _) = layer_norm_fwd(x, &params.final_ln_g, &params.final_ln_b);
        let mut vhat = af.dot(&params.out_w);
        add_row_inplace(&mut vhat, &params.out_b);
        vhat
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{build_training_mask, ModelConfig, SequenceLayout};
    use rand::Rng;

    fn rand_mat(rows: usize, cols: usize, r: &mut impl Rng) -> Array2<f64> {
        Array2::from_shape_fn((rows, cols), |_| r.gen::<f64>() * 2.0 - 1.0)
    }

    fn setup(k: usize, b: usize) -> (BackboneParams, SequenceLayout, Array2<bool>) {
        let cfg = ModelConfig::tiny_for_tests();
        let params = BackboneParams::init(&cfg, 11);
        let layout = SequenceLayout::new(1, 2, k, b).unwrap();
        let mask = build_training_mask(&layout).unwrap();
        (params, layout, mask)
    }

    #[test]
    fn output_shape_contract() {
        let (params, layout, mask) = setup(3, 2);
        let mut r = crate::rng::stream(1, "shape", 0);
        let clean = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let noisy = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let specs = build_train_specs(Some(0), Some(&[1, 2]), 2, &clean, &noisy, &[0.3, 0.5, 0.9], &layout);
        let (out, _) = forward_train(&params, &specs, &mask, &layout).unwrap();
        assert_eq!(out.vhat.dim(), (layout.frames(), params.cfg.latent_dim));
        assert_eq!(out.tap_hidden.dim(), (layout.total_len(), params.cfg.model_dim));
    }

    #[test]
    fn forward_is_deterministic() {
        let (params, layout, mask) = setup(2, 3);
        let mut r = crate::rng::stream(2, "det", 0);
        let clean = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let noisy = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let specs = build_train_specs(Some(1), Some(&[0, 3]), 2, &clean, &noisy, &[0.1, 0.7], &layout);
        let (a, _) = forward_train(&params, &specs, &mask, &layout).unwrap();
        let (b, _) = forward_train(&params, &specs, &mask, &layout).unwrap();
        assert_eq!(a.vhat, b.vhat);
    }

    #[test]
    fn masked_independence_noisy_block_ignores_later_clean_content() {
        // Two inputs differing only in CLEAN(j) for j > i produce identical
        // v_hat on NOISY(i), to machine precision.
        let (params, layout, mask) = setup(3, 2);
        let mut r = crate::rng::stream(3, "probe", 0);
        let clean_a = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let mut clean_b = clean_a.clone();
        // Perturb clean block 2 (0-based), leaving blocks 0..=1 alone.
        for row in 4..6 {
            for c in 0..params.cfg.latent_dim {
                clean_b[[row, c]] += 10.0 * (1.0 + r.gen::<f64>());
            }
        }
        let noisy = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let t = [0.4, 0.6, 0.2];
        let sa = build_train_specs(Some(0), Some(&[1, 2]), 2, &clean_a, &noisy, &t, &layout);
        let sb = build_train_specs(Some(0), Some(&[1, 2]), 2, &clean_b, &noisy, &t, &layout);
        let (oa, _) = forward_train(&params, &sa, &mask, &layout).unwrap();
        let (ob, _) = forward_train(&params, &sb, &mask, &layout).unwrap();
        // Blocks 0 and 1 (rows 0..4) see clean blocks < 2 only.
        for row in 0..4 {
            for c in 0..params.cfg.latent_dim {
                assert_eq!(oa.vhat[[row, c]], ob.vhat[[row, c]], "row {row}");
            }
        }
        // Block 2's own output may change (its clean input is in-range for
        // later blocks only; CLEAN(2) is not visible to NOISY(2) though).
        // NOISY(2) sees CLEAN(0..1) + NOISY(2): also unchanged.
        for row in 4..6 {
            for c in 0..params.cfg.latent_dim {
                assert_eq!(oa.vhat[[row, c]], ob.vhat[[row, c]], "row {row}");
            }
        }
    }

    #[test]
    fn noisy_output_depends_only_on_own_block_timestep() {
        // With identical block contents, v_hat on NOISY(i) is a function of
        // t_i alone: changing other blocks' timesteps leaves it unchanged,
        // and giving block i the same t under a permuted assignment
        // reproduces the same block output.
        let (params, layout, mask) = setup(3, 2);
        let mut r = crate::rng::stream(4, "perm", 0);
        let one_block = rand_mat(layout.block_size, params.cfg.latent_dim, &mut r);
        let mut clean = Array2::zeros((layout.frames(), params.cfg.latent_dim));
        let mut noisy = Array2::zeros((layout.frames(), params.cfg.latent_dim));
        for i in 0..3 {
            clean
                .slice_mut(s![i * 2..(i + 1) * 2, ..])
                .assign(&one_block);
            noisy
                .slice_mut(s![i * 2..(i + 1) * 2, ..])
                .assign(&(&one_block * 0.5));
        }
        let t1 = [0.2, 0.5, 0.8];
        let t2 = [0.2, 0.9, 0.1]; // block 0 keeps its t
        let s1 = build_train_specs(Some(0), Some(&[1, 1]), 2, &clean, &noisy, &t1, &layout);
        let s2 = build_train_specs(Some(0), Some(&[1, 1]), 2, &clean, &noisy, &t2, &layout);
        let (o1, _) = forward_train(&params, &s1, &mask, &layout).unwrap();
        let (o2, _) = forward_train(&params, &s2, &mask, &layout).unwrap();
        for row in 0..2 {
            for c in 0..params.cfg.latent_dim {
                assert_eq!(o1.vhat[[row, c]], o2.vhat[[row, c]]);
            }
        }
        // And block 1 under t=0.5 equals block 1 under a swapped vector
        // that still assigns 0.5 to block 1.
        let t3 = [0.8, 0.5, 0.2];
        let s3 = build_train_specs(Some(0), Some(&[1, 1]), 2, &clean, &noisy, &t3, &layout);
        let (o3, _) = forward_train(&params, &s3, &mask, &layout).unwrap();
        for row in 2..4 {
            for c in 0..params.cfg.latent_dim {
                assert_eq!(o1.vhat[[row, c]], o3.vhat[[row, c]]);
            }
        }
    }

    #[test]
    fn clean_tag_is_a_live_input() {
        // Forcing a clean block's tag away from 1 changes downstream outputs.
        let (params, layout, mask) = setup(2, 2);
        let mut r = crate::rng::stream(5, "tag", 0);
        let clean = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let noisy = rand_mat(layout.frames(), params.cfg.latent_dim, &mut r);
        let t = [0.5, 0.5];
        let mut specs = build_train_specs(Some(0), Some(&[1, 1]), 2, &clean, &noisy, &t, &layout);
        let (o1, _) = forward_train(&params, &specs, &mask, &layout).unwrap();
        // Clean block 0 occupies rows prefix..prefix+2.
        specs[layout.clean_start()].tag = 0.25;
        specs[layout.clean_start() + 1].tag = 0.25;
        let (o2, _) = forward_train(&params, &specs, &mask, &layout).unwrap();
        // NOISY(1) sees CLEAN(0), so its output must change.
        let rows = 2..4;
        let mut any_diff = false;
        for row in rows {
            for c in 0..params.cfg.latent_dim {
                if o1.vhat[[row, c]] != o2.vhat[[row, c]] {
                    any_diff = true;
                }
            }
        }
        assert!(any_diff, "clean tag change did not affect dependent output");
    }
}
