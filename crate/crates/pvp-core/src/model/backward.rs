//! Cross-entropy loss and exact gradients via hand-rolled backpropagation.
//!
//! The training forward pass mirrors `forward::forward` arithmetic but keeps
//! the caches backprop needs. Batch gradients are accumulated over a fixed
//! chunk grid and reduced in chunk order, so results are bitwise identical
//! regardless of thread count.

use ndarray::{s, Array1, Array2};
use rayon::prelude::*;

use crate::error::{PvpError, Result};
use crate::image::CellImage;
use crate::model::forward::{
    attention_prefix_end, flatten_patches, gelu, gelu_grad, softmax, LN_EPS,
};
use crate::model::params::{Params, TensorDef};
use crate::vocab::TokenId;

/// One supervised example: predict `target` at the answer-cue position.
#[derive(Debug, Clone)]
pub struct TrainItem<'a> {
    pub image: Option<&'a CellImage>,
    pub tokens: &'a [TokenId],
    pub target: TokenId,
}

/// Fixed number of accumulation chunks per batch. Chunk boundaries depend
/// only on the batch size, never on the thread pool.
const GRAD_CHUNKS: usize = 8;

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

fn layernorm_cached(x: &Array2<f64>, gain: &[f64], shift: &[f64]) -> (Array2<f64>, LnCache) {
    let (rows, cols) = (x.nrows(), x.ncols());
    let mut out = Array2::zeros((rows, cols));
    let mut xhat = Array2::zeros((rows, cols));
    let mut inv_std = Vec::with_capacity(rows);
    let n = cols as f64;
    for i in 0..rows {
        let row = x.row(i);
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        for j in 0..cols {
            let xh = (row[j] - mean) * inv;
            xhat[(i, j)] = xh;
            out[(i, j)] = xh * gain[j] + shift[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Backward through layer norm. Returns dx; accumulates dgain/dshift.
fn layernorm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    gain: &[f64],
    dgain: &mut [f64],
    dshift: &mut [f64],
) -> Array2<f64> {
    let (rows, cols) = (d_out.nrows(), d_out.ncols());
    let n = cols as f64;
    let mut dx = Array2::zeros((rows, cols));
    for i in 0..rows {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..cols {
            let dy = d_out[(i, j)];
            let xh = cache.xhat[(i, j)];
            dgain[j] += dy * xh;
            dshift[j] += dy;
            let dxhat = dy * gain[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xh;
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        let inv = cache.inv_std[i];
        for j in 0..cols {
            let dxhat = d_out[(i, j)] * gain[j];
            dx[(i, j)] = inv * (dxhat - mean_dxhat - cache.xhat[(i, j)] * mean_dxhat_xhat);
        }
    }
    dx
}

struct LayerCache {
    ln1: LnCache,
    a1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attn: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    ln2: LnCache,
    a2: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

fn acc(grads: &mut [f64], def: &TensorDef, delta: &Array2<f64>) {
    let slice = &mut grads[def.range()];
    for (g, d) in slice.iter_mut().zip(delta.iter()) {
        *g += d;
    }
}

fn acc_row(grads: &mut [f64], def: &TensorDef, row: usize, delta: &[f64]) {
    let base = def.offset + row * def.cols;
    for (j, d) in delta.iter().enumerate() {
        grads[base + j] += d;
    }
}

/// Forward with caches + backward for a single sample. Accumulates raw
/// (unscaled) gradients into `grads` and returns the sample's loss.
fn sample_loss_and_grad(
    params: &Params,
    image: Option<&CellImage>,
    tokens: &[TokenId],
    target: TokenId,
    grads: &mut [f64],
) -> Result<f64> {
    let cfg = &params.config;
    if target as usize >= cfg.vocab_size {
        return Err(PvpError::Argument(format!(
            "target token {target} outside vocabulary"
        )));
    }
    let (x0, image_span) = crate::model::forward::embed_sequence(params, image, tokens)?;
    let seq = x0.nrows();
    let cue = seq - 1;
    let (n_heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    // ---- forward with caches ----
    let mut x = x0.clone();
    let mut caches: Vec<LayerCache> = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let refs = params.layout.layers[l];
        let (a1, ln1) =
            layernorm_cached(&x, params.vec(refs.ln1_gain), params.vec(refs.ln1_shift));
        let q = a1.dot(&params.mat(refs.wq));
        let k = a1.dot(&params.mat(refs.wk));
        let v = a1.dot(&params.mat(refs.wv));
        let mut ctx = Array2::zeros((seq, cfg.d_model));
        let mut attn = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = q.slice(s![.., cols.clone()]);
            let kh = k.slice(s![.., cols.clone()]);
            let vh = v.slice(s![.., cols.clone()]);
            let scores = qh.dot(&kh.t()) * scale;
            let mut weights = Array2::zeros((seq, seq));
            for i in 0..seq {
                let end = attention_prefix_end(i, image_span);
                let row = scores.row(i);
                let max = row
                    .iter()
                    .take(end)
                    .cloned()
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..end {
                    let e = (row[j] - max).exp();
                    weights[(i, j)] = e;
                    sum += e;
                }
                for j in 0..end {
                    weights[(i, j)] /= sum;
                }
            }
            ctx.slice_mut(s![.., cols]).assign(&weights.dot(&vh));
            attn.push(weights);
        }
        let x_mid = &x + &ctx.dot(&params.mat(refs.wo));
        let (a2, ln2) = layernorm_cached(
            &x_mid,
            params.vec(refs.ln2_gain),
            params.vec(refs.ln2_shift),
        );
        let pre = a2.dot(&params.mat(refs.mlp_in));
        let act = pre.mapv(gelu);
        x = &x_mid + &act.dot(&params.mat(refs.mlp_out));
        caches.push(LayerCache {
            ln1,
            a1,
            q,
            k,
            v,
            attn,
            ctx,
            ln2,
            a2,
            pre,
            act,
        });
    }

    // Final norm + unembedding at the cue.
    let cue_state: Vec<f64> = x.row(cue).to_vec();
    let final_gain = params.vec(params.layout.final_gain);
    let final_shift = params.vec(params.layout.final_shift);
    let d = cfg.d_model;
    let n = d as f64;
    let mean = cue_state.iter().sum::<f64>() / n;
    let var = cue_state.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    let xhat_f: Vec<f64> = cue_state.iter().map(|v| (v - mean) * inv).collect();
    let normed: Vec<f64> = xhat_f
        .iter()
        .enumerate()
        .map(|(j, xh)| xh * final_gain[j] + final_shift[j])
        .collect();
    let unembed_idx = params.layout.unembed.unwrap_or(params.layout.tok_embed);
    let unembed = params.mat(unembed_idx);
    let normed_arr = Array1::from_vec(normed.clone());
    let logits = unembed.dot(&normed_arr).to_vec();
    let probs = softmax(&logits);
    let loss = -probs[target as usize].max(f64::MIN_POSITIVE).ln();

    // ---- backward ----
    let mut dlogits = probs;
    dlogits[target as usize] -= 1.0;

    // Unembedding.
    let mut dnormed = vec![0.0f64; d];
    {
        let udef = &params.layout.defs[unembed_idx];
        for (vtok, &dl) in dlogits.iter().enumerate() {
            let base = udef.offset + vtok * d;
            for j in 0..d {
                grads[base + j] += dl * normed[j];
                dnormed[j] += dl * unembed[(vtok, j)];
            }
        }
    }

    // Final layer norm (vector form).
    let mut dcue = vec![0.0f64; d];
    {
        let gdef = &params.layout.defs[params.layout.final_gain];
        let sdef = &params.layout.defs[params.layout.final_shift];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            grads[gdef.offset + j] += dnormed[j] * xhat_f[j];
            grads[sdef.offset + j] += dnormed[j];
            let dxh = dnormed[j] * final_gain[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xhat_f[j];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for j in 0..d {
            let dxh = dnormed[j] * final_gain[j];
            dcue[j] = inv * (dxh - mean_dxhat - xhat_f[j] * mean_dxhat_xhat);
        }
    }

    let mut dx = Array2::<f64>::zeros((seq, d));
    for j in 0..d {
        dx[(cue, j)] = dcue[j];
    }

    for l in (0..cfg.n_layers).rev() {
        let refs = params.layout.layers[l];
        let cache = &caches[l];

        // MLP: x_out = x_mid + act . W_out
        let d_act = dx.dot(&params.mat(refs.mlp_out).t());
        let dw_out = cache.act.t().dot(&dx);
        acc(grads, &params.layout.defs[refs.mlp_out], &dw_out);
        let mut d_pre = d_act;
        for (dp, p) in d_pre.iter_mut().zip(cache.pre.iter()) {
            *dp *= gelu_grad(*p);
        }
        let dw_in = cache.a2.t().dot(&d_pre);
        acc(grads, &params.layout.defs[refs.mlp_in], &dw_in);
        let d_a2 = d_pre.dot(&params.mat(refs.mlp_in).t());

        let mut dgain2 = vec![0.0; d];
        let mut dshift2 = vec![0.0; d];
        let d_from_ln2 = layernorm_backward(
            &d_a2,
            &cache.ln2,
            params.vec(refs.ln2_gain),
            &mut dgain2,
            &mut dshift2,
        );
        acc_row(grads, &params.layout.defs[refs.ln2_gain], 0, &dgain2);
        acc_row(grads, &params.layout.defs[refs.ln2_shift], 0, &dshift2);
        let d_x_mid = &dx + &d_from_ln2;

        // Attention: x_mid = x_in + ctx . Wo
        let dwo = cache.ctx.t().dot(&d_x_mid);
        acc(grads, &params.layout.defs[refs.wo], &dwo);
        let d_ctx = d_x_mid.dot(&params.mat(refs.wo).t());

        let mut dq = Array2::<f64>::zeros((seq, d));
        let mut dk = Array2::<f64>::zeros((seq, d));
        let mut dv = Array2::<f64>::zeros((seq, d));
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let weights = &cache.attn[h];
            let d_ctxh = d_ctx.slice(s![.., cols.clone()]);
            let vh = cache.v.slice(s![.., cols.clone()]);
            let qh = cache.q.slice(s![.., cols.clone()]);
            let kh = cache.k.slice(s![.., cols.clone()]);

            dv.slice_mut(s![.., cols.clone()])
                .assign(&weights.t().dot(&d_ctxh));

            let d_attn = d_ctxh.dot(&vh.t());
            let mut d_scores = Array2::<f64>::zeros((seq, seq));
            for i in 0..seq {
                let end = attention_prefix_end(i, image_span);
                let mut dot = 0.0;
                for j in 0..end {
                    dot += weights[(i, j)] * d_attn[(i, j)];
                }
                for j in 0..end {
                    d_scores[(i, j)] = weights[(i, j)] * (d_attn[(i, j)] - dot) * scale;
                }
            }
            dq.slice_mut(s![.., cols.clone()]).assign(&d_scores.dot(&kh));
            dk.slice_mut(s![.., cols]).assign(&d_scores.t().dot(&qh));
        }

        let dwq = cache.a1.t().dot(&dq);
        let dwk = cache.a1.t().dot(&dk);
        let dwv = cache.a1.t().dot(&dv);
        acc(grads, &params.layout.defs[refs.wq], &dwq);
        acc(grads, &params.layout.defs[refs.wk], &dwk);
        acc(grads, &params.layout.defs[refs.wv], &dwv);

        let d_a1 = dq.dot(&params.mat(refs.wq).t())
            + dk.dot(&params.mat(refs.wk).t())
            + dv.dot(&params.mat(refs.wv).t());
        let mut dgain1 = vec![0.0; d];
        let mut dshift1 = vec![0.0; d];
        let d_from_ln1 = layernorm_backward(
            &d_a1,
            &cache.ln1,
            params.vec(refs.ln1_gain),
            &mut dgain1,
            &mut dshift1,
        );
        acc_row(grads, &params.layout.defs[refs.ln1_gain], 0, &dgain1);
        acc_row(grads, &params.layout.defs[refs.ln1_shift], 0, &dshift1);

        dx = &d_x_mid + &d_from_ln1;
    }

    // ---- embedding backward ----
    match image {
        Some(img) => {
            let patches = flatten_patches(img, cfg.patch_px)?;
            let pdef = &params.layout.defs[params.layout.patch_proj];
            let posdef = &params.layout.defs[params.layout.img_pos];
            for (i, flat) in patches.iter().enumerate() {
                for (j, g) in dx.row(i).iter().enumerate() {
                    grads[posdef.offset + i * d + j] += g;
                }
                for (pi, &pv) in flat.iter().enumerate() {
                    if pv == 0.0 {
                        continue;
                    }
                    let base = pdef.offset + pi * d;
                    for (j, g) in dx.row(i).iter().enumerate() {
                        grads[base + j] += pv * g;
                    }
                }
            }
        }
        None => {
            let bdef = &params.layout.defs[params.layout.blank_image];
            for (j, g) in dx.row(0).iter().enumerate() {
                grads[bdef.offset + j] += g;
            }
        }
    }
    let edef_idx = params.layout.tok_embed;
    let edef = &params.layout.defs[edef_idx];
    let tdef = &params.layout.defs[params.layout.text_pos];
    for (t, &tok) in tokens.iter().enumerate() {
        let row = dx.row(image_span + t);
        let ebase = edef.offset + tok as usize * d;
        let tbase = tdef.offset + t * d;
        for (j, g) in row.iter().enumerate() {
            grads[ebase + j] += g;
            grads[tbase + j] += g;
        }
    }

    Ok(loss)
}

/// Mean cross-entropy over the batch and matching gradients for every
/// parameter, in the flat layout order.
pub fn loss_and_grads(params: &Params, batch: &[TrainItem<'_>]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(PvpError::Argument("empty training batch".into()));
    }
    let chunk_size = batch.len().div_ceil(GRAD_CHUNKS);
    let chunks: Vec<&[TrainItem<'_>]> = batch.chunks(chunk_size).collect();

    let partials: Vec<Result<(f64, Vec<f64>)>> = chunks
        .par_iter()
        .map(|chunk| {
            let mut grads = vec![0.0f64; params.n_params()];
            let mut loss_sum = 0.0;
            for item in *chunk {
                loss_sum +=
                    sample_loss_and_grad(params, item.image, item.tokens, item.target, &mut grads)?;
            }
            Ok((loss_sum, grads))
        })
        .collect();

    let mut total_loss = 0.0;
    let mut grads = vec![0.0f64; params.n_params()];
    for partial in partials {
        let (l, g) = partial?;
        total_loss += l;
        for (acc, x) in grads.iter_mut().zip(&g) {
            *acc += x;
        }
    }
    let inv_n = 1.0 / batch.len() as f64;
    total_loss *= inv_n;
    for g in grads.iter_mut() {
        *g *= inv_n;
    }
    if !total_loss.is_finite() {
        return Err(PvpError::Numeric(format!(
            "non-finite loss {total_loss} over batch of {}",
            batch.len()
        )));
    }
    Ok((total_loss, grads))
}
