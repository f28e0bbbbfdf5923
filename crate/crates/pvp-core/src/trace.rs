//! Layer-wise introspection: early decoding, answer-probability traces,
//! flip counting, and attention-mass profiles.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{PvpError, Result};
use crate::model::{decode_state, forward, softmax, ForwardTrace, Params};

/// Which of the two candidate answers an early decode favors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Leaning {
    Wk,
    Cf,
    Tie,
}

/// Probability gap below which the two answers count as tied; avoids
/// spurious flips from float noise.
pub const TIE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerDecode {
    pub p_wk: f64,
    pub p_cf: f64,
    pub leaning: Leaning,
}

/// Per-layer probabilities of a sample's two candidate answers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub layers: Vec<LayerDecode>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipStats {
    pub flipped: bool,
    pub n_wk_to_cf: usize,
    pub n_cf_to_wk: usize,
    pub first_flip_layer: Option<usize>,
}

/// Aggregate flip statistics. Averages follow the convention of counting
/// only samples where a flip occurred; they are `None` when nothing flipped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipSummary {
    pub n_samples: usize,
    pub pct_with_flip: f64,
    pub pct_without_flip: f64,
    pub avg_wk_to_cf: Option<f64>,
    pub avg_cf_to_wk: Option<f64>,
    /// first-flip-layer histogram over flipped samples
    pub first_flip_layers: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerMass {
    pub image_mass: f64,
    pub text_mass: f64,
    pub other_mass: f64,
}

/// Head-averaged attention mass from the answer-cue position, per layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttentionMassProfile {
    pub layers: Vec<LayerMass>,
}

/// Decode layer `layer`'s post-block state at `position` through the final
/// layer norm and unembedding; returns the softmax distribution.
pub fn early_decode(
    params: &Params,
    trace: &ForwardTrace,
    layer: usize,
    position: usize,
) -> Result<Vec<f64>> {
    if layer >= trace.hidden.len() {
        return Err(PvpError::Argument(format!(
            "layer {layer} out of range [0, {})",
            trace.hidden.len()
        )));
    }
    if position >= trace.seq_len {
        return Err(PvpError::Argument(format!(
            "position {position} out of range [0, {})",
            trace.seq_len
        )));
    }
    let state = trace.hidden[layer].row(position).to_vec();
    Ok(softmax(&decode_state(params, &state)))
}

fn leaning(p_wk: f64, p_cf: f64) -> Leaning {
    if (p_wk - p_cf).abs() <= TIE_EPS {
        Leaning::Tie
    } else if p_wk > p_cf {
        Leaning::Wk
    } else {
        Leaning::Cf
    }
}

/// Layer-wise probabilities of the sample's two answers at the answer cue.
/// Requires a CF-variant sample (both answers defined).
pub fn answer_trace(params: &Params, sample: &Sample) -> Result<DecodeTrace> {
    let cf_answer = sample.cf_answer.ok_or_else(|| {
        PvpError::Argument(format!(
            "sample `{}` has no counterfactual answer; traces need CF variants",
            sample.id
        ))
    })?;
    let trace = forward(params, sample.image.as_deref(), &sample.tokens, &[])?;
    decode_trace_from_forward(params, &trace, sample.wk_answer, cf_answer)
}

/// As `answer_trace`, over an existing forward trace.
pub fn decode_trace_from_forward(
    params: &Params,
    trace: &ForwardTrace,
    wk_answer: u32,
    cf_answer: u32,
) -> Result<DecodeTrace> {
    let mut layers = Vec::with_capacity(trace.hidden.len());
    for l in 0..trace.hidden.len() {
        let probs = early_decode(params, trace, l, trace.cue_pos)?;
        let p_wk = probs[wk_answer as usize];
        let p_cf = probs[cf_answer as usize];
        layers.push(LayerDecode {
            p_wk,
            p_cf,
            leaning: leaning(p_wk, p_cf),
        });
    }
    Ok(DecodeTrace { layers })
}

/// Count answer flips: collapse the leaning sequence to its non-tie entries
/// and count adjacent transitions in each direction.
pub fn count_flips(trace: &DecodeTrace) -> Result<FlipStats> {
    if trace.layers.len() < 2 {
        return Err(PvpError::Argument(format!(
            "flip counting needs at least 2 layers, got {}",
            trace.layers.len()
        )));
    }
    let committed: Vec<(usize, Leaning)> = trace
        .layers
        .iter()
        .enumerate()
        .filter(|(_, l)| l.leaning != Leaning::Tie)
        .map(|(i, l)| (i, l.leaning))
        .collect();
    let mut stats = FlipStats {
        flipped: false,
        n_wk_to_cf: 0,
        n_cf_to_wk: 0,
        first_flip_layer: None,
    };
    for pair in committed.windows(2) {
        let ((_, prev), (layer, next)) = (pair[0], pair[1]);
        if prev == next {
            continue;
        }
        match next {
            Leaning::Cf => stats.n_wk_to_cf += 1,
            Leaning::Wk => stats.n_cf_to_wk += 1,
            Leaning::Tie => unreachable!("ties were filtered"),
        }
        if stats.first_flip_layer.is_none() {
            stats.first_flip_layer = Some(layer);
        }
    }
    stats.flipped = stats.n_wk_to_cf + stats.n_cf_to_wk > 0;
    Ok(stats)
}

/// Aggregate per-sample flip statistics.
pub fn aggregate_flip_stats(stats: &[FlipStats]) -> Result<FlipSummary> {
    if stats.is_empty() {
        return Err(PvpError::Argument("no flip statistics to aggregate".into()));
    }
    let n = stats.len();
    let flipped: Vec<&FlipStats> = stats.iter().filter(|s| s.flipped).collect();
    let n_flipped = flipped.len();
    let mut first_flip_layers = BTreeMap::new();
    for s in &flipped {
        if let Some(l) = s.first_flip_layer {
            *first_flip_layers.entry(l).or_default() += 1;
        }
    }
    let avg = |f: fn(&FlipStats) -> usize| -> Option<f64> {
        if n_flipped == 0 {
            None
        } else {
            Some(flipped.iter().map(|s| f(s) as f64).sum::<f64>() / n_flipped as f64)
        }
    };
    Ok(FlipSummary {
        n_samples: n,
        pct_with_flip: 100.0 * n_flipped as f64 / n as f64,
        pct_without_flip: 100.0 * (n - n_flipped) as f64 / n as f64,
        avg_wk_to_cf: avg(|s| s.n_wk_to_cf),
        avg_cf_to_wk: avg(|s| s.n_cf_to_wk),
        first_flip_layers,
    })
}

/// Head-averaged attention mass from the answer cue onto the given position
/// sets, per layer. The sets must be disjoint; the remainder is `other`.
pub fn attention_mass(
    trace: &ForwardTrace,
    image_positions: &[usize],
    text_positions: &[usize],
) -> Result<AttentionMassProfile> {
    if image_positions.iter().any(|p| text_positions.contains(p)) {
        return Err(PvpError::Argument(
            "image and text position sets overlap".into(),
        ));
    }
    for &p in image_positions.iter().chain(text_positions) {
        if p >= trace.seq_len {
            return Err(PvpError::Argument(format!(
                "position {p} outside sequence of length {}",
                trace.seq_len
            )));
        }
    }
    let n_heads = trace.attn[0].len() as f64;
    let mut layers = Vec::with_capacity(trace.attn.len());
    for layer in &trace.attn {
        let mut avg_row = vec![0.0f64; trace.seq_len];
        for head in layer {
            for (j, w) in head.row(trace.cue_pos).iter().enumerate() {
                avg_row[j] += w / n_heads;
            }
        }
        let image_mass: f64 = image_positions.iter().map(|&p| avg_row[p]).sum();
        let text_mass: f64 = text_positions.iter().map(|&p| avg_row[p]).sum();
        let total: f64 = avg_row.iter().sum();
        layers.push(LayerMass {
            image_mass,
            text_mass,
            other_mass: total - image_mass - text_mass,
        });
    }
    Ok(AttentionMassProfile { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    use crate::model::{forward, ModelConfig, Params};

    fn test_config() -> ModelConfig {
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

    #[test]
    fn last_layer_decode_equals_final_logits_bit_exactly() {
        let params = Params::init(&test_config(), 1).unwrap();
        let trace = forward(&params, None, &[1, 2, 3, 0], &[]).unwrap();
        let dist = early_decode(&params, &trace, 2, trace.cue_pos).unwrap();
        let final_dist = crate::model::softmax(&trace.logits);
        assert_eq!(dist, final_dist);
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn early_decode_matches_independent_reimplementation() {
        // Second implementation of layer norm + unembedding, written directly
        // from the formulas.
        let params = Params::init(&test_config(), 2).unwrap();
        let trace = forward(&params, None, &[4, 5, 0], &[]).unwrap();
        let gain = params.vec(params.layout.final_gain);
        let shift = params.vec(params.layout.final_shift);
        let embed = params.mat(params.layout.tok_embed);
        for (layer, pos) in [(0, 0), (0, 3), (1, 2), (2, 3), (2, 1), (1, 0), (0, 2), (2, 0), (1, 3), (2, 2)] {
            let got = early_decode(&params, &trace, layer, pos).unwrap();
            let h = trace.hidden[layer].row(pos).to_vec();
            let d = h.len() as f64;
            let mean = h.iter().sum::<f64>() / d;
            let var = h.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let normed: Vec<f64> = h
                .iter()
                .enumerate()
                .map(|(j, x)| (x - mean) / (var + 1e-5).sqrt() * gain[j] + shift[j])
                .collect();
            let mut logits = vec![0.0; params.config.vocab_size];
            for (v, row) in logits.iter_mut().zip(embed.rows()) {
                *v = row.iter().zip(&normed).map(|(a, b)| a * b).sum();
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (g, e) in got.iter().zip(&exps) {
                assert!((g - e / sum).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn out_of_range_layer_is_rejected() {
        let params = Params::init(&test_config(), 3).unwrap();
        let trace = forward(&params, None, &[1, 0], &[]).unwrap();
        assert!(early_decode(&params, &trace, 3, 0).is_err());
        assert!(early_decode(&params, &trace, 0, 99).is_err());
    }

    fn trace_of(leanings: &[(f64, f64)]) -> DecodeTrace {
        DecodeTrace {
            layers: leanings
                .iter()
                .map(|&(p_wk, p_cf)| LayerDecode {
                    p_wk,
                    p_cf,
                    leaning: leaning(p_wk, p_cf),
                })
                .collect(),
        }
    }

    #[test]
    fn monotone_sequence_has_no_flips() {
        let t = trace_of(&[(0.8, 0.1), (0.7, 0.2), (0.6, 0.3)]);
        let s = count_flips(&t).unwrap();
        assert_eq!(
            s,
            FlipStats {
                flipped: false,
                n_wk_to_cf: 0,
                n_cf_to_wk: 0,
                first_flip_layer: None
            }
        );
    }

    #[test]
    fn alternating_sequence_counts_both_directions() {
        // WK, WK, CF, WK, CF
        let t = trace_of(&[(0.8, 0.1), (0.7, 0.2), (0.2, 0.7), (0.6, 0.3), (0.1, 0.8)]);
        let s = count_flips(&t).unwrap();
        assert_eq!(s.n_wk_to_cf, 2);
        assert_eq!(s.n_cf_to_wk, 1);
        assert!(s.flipped);
        assert_eq!(s.first_flip_layer, Some(2));
    }

    #[test]
    fn ties_are_skipped() {
        // tie, WK, tie, CF
        let t = trace_of(&[(0.5, 0.5), (0.7, 0.2), (0.4, 0.4), (0.1, 0.8)]);
        let s = count_flips(&t).unwrap();
        assert_eq!(s.n_wk_to_cf, 1);
        assert_eq!(s.n_cf_to_wk, 0);
        assert_eq!(s.first_flip_layer, Some(3));
    }

    #[test]
    fn all_tie_trace_has_zero_flips() {
        let t = trace_of(&[(0.5, 0.5), (0.3, 0.3)]);
        let s = count_flips(&t).unwrap();
        assert!(!s.flipped);
        assert_eq!(s.first_flip_layer, None);
    }

    #[test]
    fn aggregation_matches_hand_arithmetic() {
        let a = FlipStats {
            flipped: true,
            n_wk_to_cf: 2,
            n_cf_to_wk: 1,
            first_flip_layer: Some(3),
        };
        let b = FlipStats {
            flipped: false,
            n_wk_to_cf: 0,
            n_cf_to_wk: 0,
            first_flip_layer: None,
        };
        let summary = aggregate_flip_stats(&[a, b]).unwrap();
        assert_eq!(summary.pct_with_flip, 50.0);
        assert_eq!(summary.pct_without_flip, 50.0);
        assert_eq!(summary.avg_wk_to_cf, Some(2.0));
        assert_eq!(summary.avg_cf_to_wk, Some(1.0));
        assert_eq!(summary.first_flip_layers.get(&3), Some(&1));
    }

    #[test]
    fn unflipped_aggregate_reports_null_averages() {
        let b = FlipStats {
            flipped: false,
            n_wk_to_cf: 0,
            n_cf_to_wk: 0,
            first_flip_layer: None,
        };
        let summary = aggregate_flip_stats(&[b, b]).unwrap();
        assert_eq!(summary.pct_without_flip, 100.0);
        assert_eq!(summary.avg_wk_to_cf, None);
        assert_eq!(summary.avg_cf_to_wk, None);
        let json = serde_json::to_value(&summary).unwrap();
        assert!(json["avg_wk_to_cf"].is_null());
    }

    #[test]
    fn masses_partition_unity() {
        let params = Params::init(&test_config(), 4).unwrap();
        let img_obj = crate::universe::ObjectSpec {
            id: 0,
            name: "x".into(),
            canonical_color: 0,
            size_units: 1.0,
        };
        let img = crate::image::render_object_image(
            &img_obj,
            &crate::color::default_palette()[0],
            12,
            16,
            3,
        )
        .unwrap();
        let trace = forward(&params, Some(&img), &[1, 2, 0], &[]).unwrap();
        let profile =
            attention_mass(&trace, &trace.image_positions(), &trace.text_positions()).unwrap();
        for lm in &profile.layers {
            assert!((lm.image_mass + lm.text_mass + lm.other_mass - 1.0).abs() < 1e-6);
            assert!(lm.image_mass >= 0.0 && lm.text_mass >= 0.0);
            assert!(lm.other_mass.abs() < 1e-9, "nothing should be left over");
        }
    }

    #[test]
    fn no_image_run_has_zero_image_mass() {
        let params = Params::init(&test_config(), 5).unwrap();
        let trace = forward(&params, None, &[1, 2, 0], &[]).unwrap();
        let profile =
            attention_mass(&trace, &trace.image_positions(), &trace.text_positions()).unwrap();
        for lm in &profile.layers {
            assert_eq!(lm.image_mass, 0.0);
        }
    }

    #[test]
    fn uniform_synthetic_trace_splits_mass_by_set_size() {
        // Hand-built trace: 2 positions, uniform attention.
        let uniform = Array2::from_elem((2, 2), 0.5);
        let trace = ForwardTrace {
            image_span: 1,
            has_image: true,
            seq_len: 2,
            cue_pos: 1,
            hidden: vec![Array2::zeros((2, 4))],
            attn: vec![vec![uniform.clone(), uniform]],
            logits: vec![],
        };
        let profile = attention_mass(&trace, &[0], &[1]).unwrap();
        assert_eq!(profile.layers[0].image_mass, 0.5);
        assert_eq!(profile.layers[0].text_mass, 0.5);
    }

    #[test]
    fn overlapping_sets_are_rejected() {
        let uniform = Array2::from_elem((2, 2), 0.5);
        let trace = ForwardTrace {
            image_span: 1,
            has_image: true,
            seq_len: 2,
            cue_pos: 1,
            hidden: vec![Array2::zeros((2, 4))],
            attn: vec![vec![uniform]],
            logits: vec![],
        };
        assert!(attention_mass(&trace, &[0], &[0, 1]).is_err());
    }
}
