//! Inference forward pass with per-layer trace capture and steering hooks.
//!
//! Sequence layout: image tokens (or one learned blank-image token) first,
//! then text tokens. Text positions attend causally among themselves and to
//! every image position; image positions attend only among image positions.
//! The final prompt token is the answer cue, where logits are decoded and
//! steering deltas are injected.

use ndarray::{s, Array1, Array2};

use crate::error::{PvpError, Result};
use crate::image::CellImage;
use crate::model::params::Params;
use crate::vocab::TokenId;

pub const LN_EPS: f64 = 1e-5;

/// A steering intervention resolved against per-layer vectors.
///
/// After block `l` completes, for each `l` in `[start_layer, start_layer +
/// window]`, `scale * layer_vectors[l]` is added to the residual state at
/// the answer-cue position. Several hooks may be active at once; their
/// deltas combine before the addition, and an exactly-zero combined delta is
/// skipped so zero-scale and mutually-cancelling hooks are bit-level no-ops.
#[derive(Debug, Clone)]
pub struct SteeringHook<'a> {
    pub start_layer: usize,
    pub window: usize,
    pub scale: f64,
    pub layer_vectors: &'a [Vec<f64>],
}

/// Captured forward pass: post-block residual states, attention maps, and
/// the answer-cue logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Leading positions occupied by the image region (n_image_tokens, or 1
    /// for the blank-image token).
    pub image_span: usize,
    pub has_image: bool,
    pub seq_len: usize,
    pub cue_pos: usize,
    /// `hidden[l]` is the `[seq, d_model]` residual state after block `l`
    /// (after the MLP residual add and any steering addition).
    pub hidden: Vec<Array2<f64>>,
    /// `attn[l][h]` is the `[seq, seq]` attention weight matrix; rows sum to
    /// one over each query's allowed prefix, and are zero beyond it.
    pub attn: Vec<Vec<Array2<f64>>>,
    /// Logits over the vocabulary at the answer-cue position.
    pub logits: Vec<f64>,
}

impl ForwardTrace {
    /// Positions counted as image tokens for attention-mass analysis. Empty
    /// for blank-image runs: the blank token is not image evidence.
    pub fn image_positions(&self) -> Vec<usize> {
        if self.has_image {
            (0..self.image_span).collect()
        } else {
            Vec::new()
        }
    }

    pub fn text_positions(&self) -> Vec<usize> {
        (self.image_span..self.seq_len).collect()
    }
}

pub(crate) fn gelu(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * u * (1.0 + (C * (u + A * u * u * u)).tanh())
}

pub(crate) fn gelu_grad(u: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044715;
    let t = (C * (u + A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * C * (1.0 + 3.0 * A * u * u)
}

/// Layer norm over the last axis of `x`, with gain and shift.
pub(crate) fn layernorm_rows(x: &Array2<f64>, gain: &[f64], shift: &[f64]) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * gain[j] + shift[j];
        }
    }
    out
}

fn layernorm_vec(x: &[f64], gain: &[f64], shift: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * gain[j] + shift[j])
        .collect()
}

/// Flatten non-overlapping patches in raster order; row-major RGB per patch.
pub(crate) fn flatten_patches(image: &CellImage, patch_px: usize) -> Result<Vec<Vec<f64>>> {
    if image.width % patch_px != 0 || image.height % patch_px != 0 {
        return Err(PvpError::Shape(format!(
            "image {}x{} not divisible by patch size {patch_px}",
            image.width, image.height
        )));
    }
    let (pw, ph) = (image.width / patch_px, image.height / patch_px);
    let mut patches = Vec::with_capacity(pw * ph);
    for py in 0..ph {
        for px in 0..pw {
            let mut flat = Vec::with_capacity(patch_px * patch_px * 3);
            for dy in 0..patch_px {
                for dx in 0..patch_px {
                    let (r, g, b) = image.pixel(px * patch_px + dx, py * patch_px + dy);
                    flat.extend_from_slice(&[r, g, b]);
                }
            }
            patches.push(flat);
        }
    }
    Ok(patches)
}

/// Patch projections without position embeddings.
pub fn patch_embeddings(params: &Params, image: &CellImage) -> Result<Array2<f64>> {
    let cfg = &params.config;
    let patches = flatten_patches(image, cfg.patch_px)?;
    if patches.len() != cfg.n_image_tokens {
        return Err(PvpError::Shape(format!(
            "image yields {} patches, model expects {}",
            patches.len(),
            cfg.n_image_tokens
        )));
    }
    let proj = params.mat(params.layout.patch_proj);
    let mut out = Array2::zeros((cfg.n_image_tokens, cfg.d_model));
    for (i, flat) in patches.iter().enumerate() {
        let row = Array1::from_vec(flat.clone());
        out.row_mut(i).assign(&row.dot(&proj));
    }
    Ok(out)
}

/// Patch projections plus image position embeddings, in raster order.
pub fn embed_image(params: &Params, image: &CellImage) -> Result<Array2<f64>> {
    let mut out = patch_embeddings(params, image)?;
    let pos = params.mat(params.layout.img_pos);
    out += &pos;
    Ok(out)
}

/// Assemble the full input sequence. Returns `(embeddings, image_span)`.
pub(crate) fn embed_sequence(
    params: &Params,
    image: Option<&CellImage>,
    tokens: &[TokenId],
) -> Result<(Array2<f64>, usize)> {
    let cfg = &params.config;
    if tokens.is_empty() {
        return Err(PvpError::Argument("empty token sequence".into()));
    }
    for &t in tokens {
        if t as usize >= cfg.vocab_size {
            return Err(PvpError::Vocab(format!("<id {t}>")));
        }
    }
    let image_span = match image {
        Some(_) => cfg.n_image_tokens,
        None => 1,
    };
    let seq = image_span + tokens.len();
    if seq > cfg.max_seq {
        return Err(PvpError::Shape(format!(
            "sequence length {seq} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut x = Array2::zeros((seq, cfg.d_model));
    match image {
        Some(img) => {
            let emb = embed_image(params, img)?;
            x.slice_mut(s![..image_span, ..]).assign(&emb);
        }
        None => {
            let blank = params.vec(params.layout.blank_image);
            x.row_mut(0).assign(&Array1::from_vec(blank.to_vec()));
        }
    }
    let tok_embed = params.mat(params.layout.tok_embed);
    let text_pos = params.mat(params.layout.text_pos);
    for (t, &tok) in tokens.iter().enumerate() {
        let mut row = x.row_mut(image_span + t);
        for j in 0..cfg.d_model {
            row[j] = tok_embed[(tok as usize, j)] + text_pos[(t, j)];
        }
    }
    Ok((x, image_span))
}

/// End of the allowed key prefix for query position `i`.
pub(crate) fn attention_prefix_end(i: usize, image_span: usize) -> usize {
    if i < image_span {
        image_span
    } else {
        i + 1
    }
}

fn validate_hooks(params: &Params, hooks: &[SteeringHook<'_>]) -> Result<()> {
    let cfg = &params.config;
    for h in hooks {
        if h.start_layer + h.window > cfg.n_layers - 1 {
            return Err(PvpError::Intervention(format!(
                "window [{}, {}] extends past last layer {}",
                h.start_layer,
                h.start_layer + h.window,
                cfg.n_layers - 1
            )));
        }
        if h.layer_vectors.len() != cfg.n_layers {
            return Err(PvpError::Shape(format!(
                "steering vectors cover {} layers, model has {}",
                h.layer_vectors.len(),
                cfg.n_layers
            )));
        }
        if h.layer_vectors.iter().any(|v| v.len() != cfg.d_model) {
            return Err(PvpError::Shape(
                "steering vector width does not match d_model".into(),
            ));
        }
    }
    Ok(())
}

/// Full forward pass. `hooks` may be empty; when present, their combined
/// delta is added to the answer-cue state after each in-window block.
pub fn forward(
    params: &Params,
    image: Option<&CellImage>,
    tokens: &[TokenId],
    hooks: &[SteeringHook<'_>],
) -> Result<ForwardTrace> {
    validate_hooks(params, hooks)?;
    let cfg = &params.config;
    let (mut x, image_span) = embed_sequence(params, image, tokens)?;
    let seq = x.nrows();
    let cue_pos = seq - 1;
    let (n_heads, dh) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut hidden = Vec::with_capacity(cfg.n_layers);
    let mut attn_all = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let refs = params.layout.layers[l];
        let a1 = layernorm_rows(&x, params.vec(refs.ln1_gain), params.vec(refs.ln1_shift));
        let q = a1.dot(&params.mat(refs.wq));
        let k = a1.dot(&params.mat(refs.wk));
        let v = a1.dot(&params.mat(refs.wv));

        let mut ctx = Array2::zeros((seq, cfg.d_model));
        let mut attn_layer = Vec::with_capacity(n_heads);
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
            attn_layer.push(weights);
        }
        x = x + ctx.dot(&params.mat(refs.wo));

        let a2 = layernorm_rows(&x, params.vec(refs.ln2_gain), params.vec(refs.ln2_shift));
        let pre = a2.dot(&params.mat(refs.mlp_in));
        let act = pre.mapv(gelu);
        x = x + act.dot(&params.mat(refs.mlp_out));

        apply_hooks(&mut x, cue_pos, l, hooks);

        hidden.push(x.clone());
        attn_all.push(attn_layer);
    }

    let cue_state: Vec<f64> = x.row(cue_pos).to_vec();
    let logits = decode_state(params, &cue_state);
    Ok(ForwardTrace {
        image_span,
        has_image: image.is_some(),
        seq_len: seq,
        cue_pos,
        hidden,
        attn: attn_all,
        logits,
    })
}

fn apply_hooks(x: &mut Array2<f64>, cue_pos: usize, layer: usize, hooks: &[SteeringHook<'_>]) {
    let active: Vec<&SteeringHook<'_>> = hooks
        .iter()
        .filter(|h| layer >= h.start_layer && layer <= h.start_layer + h.window)
        .collect();
    if active.is_empty() {
        return;
    }
    let d = x.ncols();
    let mut delta = vec![0.0f64; d];
    for h in &active {
        for (j, dv) in delta.iter_mut().enumerate() {
            *dv += h.scale * h.layer_vectors[layer][j];
        }
    }
    if delta.iter().all(|&v| v == 0.0) {
        return;
    }
    let mut row = x.row_mut(cue_pos);
    for (j, dv) in delta.iter().enumerate() {
        row[j] += dv;
    }
}

/// Final layer norm followed by the unembedding: the single arithmetic path
/// used for both final logits and early decoding at any layer.
pub fn decode_state(params: &Params, state: &[f64]) -> Vec<f64> {
    let normed = layernorm_vec(
        state,
        params.vec(params.layout.final_gain),
        params.vec(params.layout.final_shift),
    );
    let unembed = match params.layout.unembed {
        Some(idx) => params.mat(idx),
        None => params.mat(params.layout.tok_embed),
    };
    let normed = Array1::from_vec(normed);
    unembed.dot(&normed).to_vec()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Argmax prediction at the answer cue. The probability always comes from
/// the full-vocabulary softmax; `candidates` restricts only the argmax.
pub fn predict_answer(
    params: &Params,
    image: Option<&CellImage>,
    tokens: &[TokenId],
    hooks: &[SteeringHook<'_>],
    candidates: Option<&[TokenId]>,
) -> Result<(TokenId, f64)> {
    let trace = forward(params, image, tokens, hooks)?;
    let probs = softmax(&trace.logits);
    let pool: Vec<TokenId> = match candidates {
        Some(c) => c.to_vec(),
        None => (0..probs.len() as TokenId).collect(),
    };
    let mut best = pool[0];
    for &t in &pool[1..] {
        if probs[t as usize] > probs[best as usize] {
            best = t;
        }
    }
    Ok((best, probs[best as usize]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::default_palette;
    use crate::image::render_object_image;
    use crate::model::config::ModelConfig;
    use crate::universe::ObjectSpec;

    pub(crate) fn test_config() -> ModelConfig {
        ModelConfig {
            n_layers: 3,
            d_model: 16,
            n_heads: 2,
            mlp_hidden: 32,
            vocab_size: 12,
            patch_px: 8,
            n_image_tokens: 4,
            max_seq: 12,
            tie_unembedding: true,
        }
    }

    fn test_image() -> CellImage {
        let obj = ObjectSpec {
            id: 0,
            name: "strawberry".into(),
            canonical_color: 0,
            size_units: 1.0,
        };
        render_object_image(&obj, &default_palette()[0], 12, 16, 5).unwrap()
    }

    #[test]
    fn attention_rows_sum_to_one_over_prefix() {
        let params = Params::init(&test_config(), 1).unwrap();
        let img = test_image();
        let trace = forward(&params, Some(&img), &[1, 2, 3, 0], &[]).unwrap();
        for layer in &trace.attn {
            for head in layer {
                for (i, row) in head.rows().into_iter().enumerate() {
                    let end = attention_prefix_end(i, trace.image_span);
                    let sum: f64 = row.iter().take(end).sum();
                    assert!((sum - 1.0).abs() < 1e-6, "row {i} sums to {sum}");
                    assert!(row.iter().all(|&w| w >= 0.0));
                    assert!(row.iter().skip(end).all(|&w| w == 0.0));
                }
            }
        }
    }

    #[test]
    fn logits_match_decode_of_last_hidden() {
        let params = Params::init(&test_config(), 2).unwrap();
        let img = test_image();
        let trace = forward(&params, Some(&img), &[1, 2, 3, 0], &[]).unwrap();
        let last = trace.hidden.last().unwrap().row(trace.cue_pos).to_vec();
        assert_eq!(decode_state(&params, &last), trace.logits);
    }

    #[test]
    fn changing_a_later_token_leaves_earlier_positions_unchanged() {
        let params = Params::init(&test_config(), 3).unwrap();
        let img = test_image();
        let a = forward(&params, Some(&img), &[1, 2, 3, 0], &[]).unwrap();
        let b = forward(&params, Some(&img), &[1, 2, 9, 0], &[]).unwrap();
        // Positions before the changed text token (index 2 in text) are
        // bit-identical at every layer.
        let changed_pos = a.image_span + 2;
        for l in 0..a.hidden.len() {
            for p in 0..changed_pos {
                let ra = a.hidden[l].row(p);
                let rb = b.hidden[l].row(p);
                assert_eq!(ra.to_vec(), rb.to_vec(), "layer {l} position {p}");
            }
        }
    }

    #[test]
    fn blank_image_run_has_single_prefix_position() {
        let params = Params::init(&test_config(), 4).unwrap();
        let trace = forward(&params, None, &[1, 2, 0], &[]).unwrap();
        assert_eq!(trace.image_span, 1);
        assert!(!trace.has_image);
        assert_eq!(trace.seq_len, 4);
        assert!(trace.image_positions().is_empty());
        assert_eq!(trace.text_positions(), vec![1, 2, 3]);
    }

    #[test]
    fn all_white_image_gives_identical_patch_vectors() {
        let params = Params::init(&test_config(), 5).unwrap();
        let img = CellImage::blank(16, 16);
        let pe = patch_embeddings(&params, &img).unwrap();
        let first = pe.row(0).to_vec();
        for i in 1..pe.nrows() {
            assert_eq!(pe.row(i).to_vec(), first);
        }
    }

    #[test]
    fn one_patch_perturbation_changes_exactly_one_vector() {
        let params = Params::init(&test_config(), 6).unwrap();
        let mut img = CellImage::blank(16, 16);
        let base = patch_embeddings(&params, &img).unwrap();
        img.set_pixel(9, 2, (0.25, 0.5, 0.75)); // inside patch (1, 0) => index 1
        let bumped = patch_embeddings(&params, &img).unwrap();
        for i in 0..base.nrows() {
            let same = base.row(i) == bumped.row(i);
            assert_eq!(same, i != 1, "patch {i}");
        }
    }

    #[test]
    fn oversized_sequence_is_rejected() {
        let params = Params::init(&test_config(), 7).unwrap();
        let img = test_image();
        let long: Vec<TokenId> = vec![1; 9];
        assert!(forward(&params, Some(&img), &long, &[]).is_err());
    }

    #[test]
    fn out_of_range_window_is_rejected() {
        let params = Params::init(&test_config(), 8).unwrap();
        let vectors = vec![vec![0.0; 16]; 3];
        let hook = SteeringHook {
            start_layer: 2,
            window: 1,
            scale: 1.0,
            layer_vectors: &vectors,
        };
        let err = forward(&params, None, &[1, 0], &[hook]);
        assert!(matches!(err, Err(PvpError::Intervention(_))));
    }

    #[test]
    fn probabilities_sum_to_one_and_candidates_restrict_argmax() {
        let params = Params::init(&test_config(), 9).unwrap();
        let img = test_image();
        let trace = forward(&params, Some(&img), &[1, 2, 3, 0], &[]).unwrap();
        let probs = softmax(&trace.logits);
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);

        let (tok, p) = predict_answer(&params, Some(&img), &[1, 2, 3, 0], &[], Some(&[4, 5])).unwrap();
        assert!(tok == 4 || tok == 5);
        assert!((p - probs[tok as usize]).abs() < 1e-15);
    }

    #[test]
    fn predict_matches_independent_recompute() {
        let params = Params::init(&test_config(), 10).unwrap();
        let img = test_image();
        let (tok, p) = predict_answer(&params, Some(&img), &[1, 2, 3, 0], &[], None).unwrap();
        // Recompute through a second forward call and a hand-rolled softmax.
        let trace = forward(&params, Some(&img), &[1, 2, 3, 0], &[]).unwrap();
        let max = trace.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = trace.logits.iter().map(|z| (z - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let (mut best, mut best_p) = (0u32, f64::MIN);
        for (i, e) in exps.iter().enumerate() {
            let prob = e / sum;
            if prob > best_p {
                best = i as u32;
                best_p = prob;
            }
        }
        assert_eq!(tok, best);
        assert!((p - best_p).abs() < 1e-12);
    }
}
