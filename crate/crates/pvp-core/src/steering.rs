//! Steering vectors from contrasting prompts, windowed interventions,
//! flip-rate evaluation on originally-incorrect sets, and key-layer search.

use std::fs;
use std::io::Read;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::digest::digest_bytes;
use crate::error::{PvpError, Result};
use crate::model::{forward, predict_answer, Params, SteeringHook};
use crate::vocab::{PromptKind, Task, TokenId, Variant};

const VECTORS_FORMAT_VERSION: u32 = 1;

/// Steering direction: toward the counterfactual (pixel) answer or back
/// toward the world-knowledge (prior) answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ToCf,
    ToWk,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::ToCf => "wk_to_cf",
            Direction::ToWk => "cf_to_wk",
        }
    }

    fn sign(self) -> f64 {
        match self {
            Direction::ToCf => 1.0,
            Direction::ToWk => -1.0,
        }
    }
}

/// Per-layer steering vectors in the counterfactual direction. The
/// world-knowledge vectors are the exact negation, derived on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringVectors {
    pub task: Task,
    /// `per_layer[l]` has `d_model` entries.
    pub per_layer: Vec<Vec<f64>>,
    pub n_pairs: usize,
    pub checkpoint_digest: String,
}

impl SteeringVectors {
    /// S_WK[l] = -S_CF[l], exactly.
    pub fn wk_vector(&self, layer: usize) -> Vec<f64> {
        self.per_layer[layer].iter().map(|x| -x).collect()
    }
}

/// A windowed intervention: add the direction's vector, scaled by `alpha`,
/// to the answer-cue state after every block in `[start_layer, start_layer
/// + window]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InterventionSpec {
    pub direction: Direction,
    pub start_layer: usize,
    pub window: usize,
    pub alpha: f64,
}

impl InterventionSpec {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        if self.start_layer + self.window > n_layers.saturating_sub(1) {
            return Err(PvpError::Intervention(format!(
                "window [{}, {}] exceeds last layer {}",
                self.start_layer,
                self.start_layer + self.window,
                n_layers.saturating_sub(1)
            )));
        }
        Ok(())
    }
}

/// One contrastive fit pair: both prompt forms over the same image.
#[derive(Debug, Clone)]
pub struct SteerPair<'a> {
    pub this: &'a Sample,
    pub most: &'a Sample,
}

/// Resolve an intervention against fitted vectors into a forward-pass hook.
pub fn hook_for<'a>(
    params: &Params,
    vectors: &'a SteeringVectors,
    spec: &InterventionSpec,
) -> Result<SteeringHook<'a>> {
    if vectors.per_layer.len() != params.config.n_layers
        || vectors.per_layer.iter().any(|v| v.len() != params.config.d_model)
    {
        return Err(PvpError::Compat(format!(
            "vectors fitted for {} layers x {} dims, model has {} x {}",
            vectors.per_layer.len(),
            vectors.per_layer.first().map_or(0, Vec::len),
            params.config.n_layers,
            params.config.d_model
        )));
    }
    spec.validate(params.config.n_layers)?;
    Ok(SteeringHook {
        start_layer: spec.start_layer,
        window: spec.window,
        scale: spec.alpha * spec.direction.sign(),
        layer_vectors: &vectors.per_layer,
    })
}

/// Fit PvP steering vectors: per layer, the mean difference between the
/// answer-cue hidden state under the "this" prompt and under the "most"
/// prompt, both over the same counterfactual image.
pub fn compute_pvp(params: &Params, pairs: &[SteerPair<'_>], task: Task) -> Result<SteeringVectors> {
    if pairs.is_empty() {
        return Err(PvpError::Argument("steering fit needs at least one pair".into()));
    }
    for p in pairs {
        if p.this.task != task || p.most.task != task {
            return Err(PvpError::Argument(format!(
                "pair `{}`/`{}` does not match task {}",
                p.this.id,
                p.most.id,
                task.label()
            )));
        }
    }
    let (n_layers, d) = (params.config.n_layers, params.config.d_model);

    let diffs: Vec<Result<Vec<Vec<f64>>>> = pairs
        .par_iter()
        .map(|pair| {
            let this_trace =
                forward(params, pair.this.image.as_deref(), &pair.this.tokens, &[])?;
            let most_trace =
                forward(params, pair.most.image.as_deref(), &pair.most.tokens, &[])?;
            let mut per_layer = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let ht = this_trace.hidden[l].row(this_trace.cue_pos);
                let hm = most_trace.hidden[l].row(most_trace.cue_pos);
                per_layer.push(ht.iter().zip(hm.iter()).map(|(a, b)| a - b).collect());
            }
            Ok(per_layer)
        })
        .collect();

    let mut sum = vec![vec![0.0f64; d]; n_layers];
    for diff in diffs {
        let diff = diff?;
        for (acc, layer) in sum.iter_mut().zip(&diff) {
            for (a, x) in acc.iter_mut().zip(layer) {
                *a += x;
            }
        }
    }
    let inv = 1.0 / pairs.len() as f64;
    for layer in sum.iter_mut() {
        for x in layer.iter_mut() {
            *x *= inv;
        }
    }
    Ok(SteeringVectors {
        task,
        per_layer: sum,
        n_pairs: pairs.len(),
        checkpoint_digest: params.digest(),
    })
}

/// Prediction with the intervention active; otherwise identical to
/// `predict_answer`.
pub fn steer_predict(
    params: &Params,
    sample: &Sample,
    vectors: &SteeringVectors,
    spec: &InterventionSpec,
    candidates: Option<&[TokenId]>,
) -> Result<(TokenId, f64)> {
    let hook = hook_for(params, vectors, spec)?;
    predict_answer(params, sample.image.as_deref(), &sample.tokens, &[hook], candidates)
}

/// Per-sample record in a flip evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipRecord {
    pub sample_id: String,
    pub before: TokenId,
    pub after: TokenId,
    pub flipped: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipEval {
    pub direction: Direction,
    pub spec: InterventionSpec,
    /// Samples the unsteered model answered with the direction's source
    /// token; steering success is measured only on these.
    pub n_target: usize,
    pub n_flipped: usize,
    pub flip_rate_pct: f64,
    pub ledger: Vec<FlipRecord>,
}

fn expected_cell(direction: Direction) -> PromptKind {
    match direction {
        Direction::ToCf => PromptKind::Most,
        Direction::ToWk => PromptKind::This,
    }
}

/// The "originally incorrect" target set for a direction: CF samples of the
/// matching prompt kind whose unsteered answer is the source-side token.
pub fn select_targets<'a>(
    params: &Params,
    direction: Direction,
    samples: &[&'a Sample],
) -> Result<Vec<&'a Sample>> {
    let kind = expected_cell(direction);
    for s in samples {
        if s.variant != Some(Variant::Cf) || s.prompt_kind != kind {
            return Err(PvpError::Argument(format!(
                "sample `{}` is not a {}-prompt CF sample required for {}",
                s.id,
                kind.label(),
                direction.label()
            )));
        }
    }
    let verdicts: Vec<Result<bool>> = samples
        .par_iter()
        .map(|s| {
            let (tok, _) = predict_answer(params, s.image.as_deref(), &s.tokens, &[], None)?;
            let source = match direction {
                Direction::ToCf => s.wk_answer,
                Direction::ToWk => s.cf_answer.expect("CF samples carry cf_answer"),
            };
            Ok(tok == source)
        })
        .collect();
    let mut targets = Vec::new();
    for (s, v) in samples.iter().zip(verdicts) {
        if v? {
            targets.push(*s);
        }
    }
    if targets.is_empty() {
        return Err(PvpError::Evaluation(format!(
            "no {} sample is answered with the {} source token; nothing to steer",
            kind.label(),
            direction.label()
        )));
    }
    Ok(targets)
}

fn rate_over_targets(
    params: &Params,
    vectors: &SteeringVectors,
    spec: &InterventionSpec,
    targets: &[&Sample],
) -> Result<FlipEval> {
    let records: Vec<Result<FlipRecord>> = targets
        .par_iter()
        .map(|s| {
            let (after, _) = steer_predict(params, s, vectors, spec, None)?;
            let (before, goal) = match spec.direction {
                Direction::ToCf => (s.wk_answer, s.cf_answer.expect("CF sample")),
                Direction::ToWk => (s.cf_answer.expect("CF sample"), s.wk_answer),
            };
            Ok(FlipRecord {
                sample_id: s.id.clone(),
                before,
                after,
                flipped: after == goal,
            })
        })
        .collect();
    let mut ledger = Vec::with_capacity(targets.len());
    for r in records {
        ledger.push(r?);
    }
    let n_flipped = ledger.iter().filter(|r| r.flipped).count();
    Ok(FlipEval {
        direction: spec.direction,
        spec: *spec,
        n_target: ledger.len(),
        n_flipped,
        flip_rate_pct: 100.0 * n_flipped as f64 / ledger.len() as f64,
        ledger,
    })
}

/// Flip rate of an intervention over the originally-incorrect subset of
/// `samples` (ToCf: most+CF answered with the prior; ToWk: this+CF answered
/// with the counterfactual).
pub fn eval_flip_rate(
    params: &Params,
    vectors: &SteeringVectors,
    spec: &InterventionSpec,
    samples: &[&Sample],
) -> Result<FlipEval> {
    let targets = select_targets(params, spec.direction, samples)?;
    rate_over_targets(params, vectors, spec, &targets)
}

/// Search bounds for the key-layer window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowBounds {
    pub start_min: usize,
    pub start_max: usize,
    pub window_max: usize,
}

/// One scored cell of the window grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchCell {
    pub start_layer: usize,
    pub window: usize,
    pub alpha: f64,
    pub flip_rate_pct: f64,
    pub n_target: usize,
}

/// Pick the winning cell: highest flip rate, ties broken by smaller window,
/// then smaller start layer.
pub fn select_best(cells: &[SearchCell]) -> Option<&SearchCell> {
    cells.iter().reduce(|best, c| {
        if c.flip_rate_pct > best.flip_rate_pct
            || (c.flip_rate_pct == best.flip_rate_pct
                && (c.window < best.window
                    || (c.window == best.window && c.start_layer < best.start_layer)))
        {
            c
        } else {
            best
        }
    })
}

/// Exhaustive grid search over `(start_layer, window)` at fixed alpha,
/// scored by flip rate on the validation samples.
pub fn search_window(
    params: &Params,
    vectors: &SteeringVectors,
    direction: Direction,
    validation: &[&Sample],
    bounds: &WindowBounds,
    alpha: f64,
) -> Result<(InterventionSpec, Vec<SearchCell>)> {
    let last = params.config.n_layers - 1;
    let mut grid = Vec::new();
    for start in bounds.start_min..=bounds.start_max.min(last) {
        for window in 0..=bounds.window_max.min(last - start) {
            grid.push((start, window));
        }
    }
    if grid.is_empty() {
        return Err(PvpError::Argument(format!(
            "empty window grid for bounds {bounds:?}"
        )));
    }
    let targets = select_targets(params, direction, validation)?;
    let cells: Vec<Result<SearchCell>> = grid
        .par_iter()
        .map(|&(start_layer, window)| {
            let spec = InterventionSpec {
                direction,
                start_layer,
                window,
                alpha,
            };
            let eval = rate_over_targets(params, vectors, &spec, &targets)?;
            Ok(SearchCell {
                start_layer,
                window,
                alpha,
                flip_rate_pct: eval.flip_rate_pct,
                n_target: eval.n_target,
            })
        })
        .collect();
    let mut table = Vec::with_capacity(cells.len());
    for c in cells {
        table.push(c?);
    }
    let best = select_best(&table).expect("grid is non-empty");
    let spec = InterventionSpec {
        direction,
        start_layer: best.start_layer,
        window: best.window,
        alpha,
    };
    Ok((spec, table))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VectorsHeader {
    format_version: u32,
    task: Task,
    n_layers: usize,
    d_model: usize,
    n_pairs: usize,
    checkpoint_digest: String,
    data_digest: String,
}

/// Persist vectors: u32 header length, JSON header, float32 matrix rows in
/// layer order.
pub fn save_vectors(vectors: &SteeringVectors, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut data = Vec::new();
    for layer in &vectors.per_layer {
        for &x in layer {
            data.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
    let header = VectorsHeader {
        format_version: VECTORS_FORMAT_VERSION,
        task: vectors.task,
        n_layers: vectors.per_layer.len(),
        d_model: vectors.per_layer.first().map_or(0, Vec::len),
        n_pairs: vectors.n_pairs,
        checkpoint_digest: vectors.checkpoint_digest.clone(),
        data_digest: digest_bytes(&data),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| PvpError::Integrity(format!("vectors header encode: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    crate::persist::atomic_write(path, &out)
}

pub fn load_vectors(path: impl AsRef<Path>) -> Result<SteeringVectors> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|e| PvpError::io(path, e))?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|e| PvpError::io(path, e))?;
    let mut header_bytes = vec![0u8; u32::from_le_bytes(len_bytes) as usize];
    file.read_exact(&mut header_bytes)
        .map_err(|e| PvpError::io(path, e))?;
    let header: VectorsHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| PvpError::Integrity(format!("vectors header decode: {e}")))?;
    if header.format_version != VECTORS_FORMAT_VERSION {
        return Err(PvpError::Integrity(format!(
            "unsupported vectors format version {}",
            header.format_version
        )));
    }
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| PvpError::io(path, e))?;
    if data.len() != header.n_layers * header.d_model * 4 {
        return Err(PvpError::Integrity(format!(
            "vectors payload is {} bytes, expected {}",
            data.len(),
            header.n_layers * header.d_model * 4
        )));
    }
    if digest_bytes(&data) != header.data_digest {
        return Err(PvpError::Integrity("vectors digest mismatch".into()));
    }
    let mut per_layer = Vec::with_capacity(header.n_layers);
    let mut it = data.chunks_exact(4);
    for _ in 0..header.n_layers {
        let mut layer = Vec::with_capacity(header.d_model);
        for _ in 0..header.d_model {
            let chunk = it.next().expect("length checked");
            layer.push(f32::from_le_bytes(chunk.try_into().expect("chunk of 4")) as f64);
        }
        per_layer.push(layer);
    }
    Ok(SteeringVectors {
        task: header.task,
        per_layer,
        n_pairs: header.n_pairs,
        checkpoint_digest: header.checkpoint_digest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::color::default_palette;
    use crate::image::render_object_image;
    use crate::model::{forward, ModelConfig, Params};
    use crate::universe::ObjectSpec;

    fn test_config() -> ModelConfig {
        ModelConfig {
            n_layers: 4,
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

    fn cf_sample(id: &str, kind: PromptKind, tokens: Vec<u32>) -> Sample {
        let obj = ObjectSpec {
            id: 0,
            name: "strawberry".into(),
            canonical_color: 0,
            size_units: 1.0,
        };
        let image = render_object_image(&obj, &default_palette()[4], 12, 16, 9).unwrap();
        Sample {
            id: id.into(),
            task: Task::Color,
            prompt_kind: kind,
            variant: Some(Variant::Cf),
            tokens,
            wk_answer: 6,
            cf_answer: Some(7),
            object_ids: vec![0],
            image_id: Some(format!("img-{id}")),
            image: Some(Arc::new(image)),
            pair_index: Some(0),
        }
    }

    #[test]
    fn identical_prompts_give_zero_vectors() {
        let params = Params::init(&test_config(), 1).unwrap();
        let this = cf_sample("a", PromptKind::This, vec![1, 2, 0]);
        let mut most = cf_sample("b", PromptKind::Most, vec![1, 2, 0]);
        most.image = this.image.clone();
        let pairs = [SteerPair {
            this: &this,
            most: &most,
        }];
        let vectors = compute_pvp(&params, &pairs, Task::Color).unwrap();
        for layer in &vectors.per_layer {
            assert!(layer.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn wk_vectors_are_exact_negation() {
        let params = Params::init(&test_config(), 2).unwrap();
        let this = cf_sample("a", PromptKind::This, vec![1, 2, 0]);
        let most = cf_sample("b", PromptKind::Most, vec![1, 3, 0]);
        let pairs = [SteerPair {
            this: &this,
            most: &most,
        }];
        let vectors = compute_pvp(&params, &pairs, Task::Color).unwrap();
        for l in 0..vectors.per_layer.len() {
            let wk = vectors.wk_vector(l);
            for (a, b) in wk.iter().zip(&vectors.per_layer[l]) {
                assert_eq!(*a, -*b);
                assert_eq!(a + b, 0.0);
            }
        }
    }

    #[test]
    fn two_pair_fit_matches_hand_rolled_mean() {
        let params = Params::init(&test_config(), 3).unwrap();
        let t1 = cf_sample("t1", PromptKind::This, vec![1, 2, 0]);
        let m1 = cf_sample("m1", PromptKind::Most, vec![1, 3, 0]);
        let t2 = cf_sample("t2", PromptKind::This, vec![4, 2, 0]);
        let m2 = cf_sample("m2", PromptKind::Most, vec![4, 3, 0]);
        let pairs = [
            SteerPair { this: &t1, most: &m1 },
            SteerPair { this: &t2, most: &m2 },
        ];
        let vectors = compute_pvp(&params, &pairs, Task::Color).unwrap();

        // Oracle: capture states straight from forward traces and average.
        let mut expect = vec![vec![0.0f64; 16]; 4];
        for pair in &pairs {
            let tt = forward(&params, pair.this.image.as_deref(), &pair.this.tokens, &[]).unwrap();
            let tm = forward(&params, pair.most.image.as_deref(), &pair.most.tokens, &[]).unwrap();
            for l in 0..4 {
                for j in 0..16 {
                    expect[l][j] += (tt.hidden[l][(tt.cue_pos, j)]
                        - tm.hidden[l][(tm.cue_pos, j)])
                        / 2.0;
                }
            }
        }
        for l in 0..4 {
            for j in 0..16 {
                assert!((vectors.per_layer[l][j] - expect[l][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_or_mixed_fit_is_rejected() {
        let params = Params::init(&test_config(), 4).unwrap();
        assert!(compute_pvp(&params, &[], Task::Color).is_err());
        let this = cf_sample("a", PromptKind::This, vec![1, 2, 0]);
        let most = cf_sample("b", PromptKind::Most, vec![1, 3, 0]);
        let pairs = [SteerPair {
            this: &this,
            most: &most,
        }];
        assert!(compute_pvp(&params, &pairs, Task::Size).is_err());
    }

    #[test]
    fn zero_alpha_is_bit_identical_to_unsteered() {
        let params = Params::init(&test_config(), 5).unwrap();
        let this = cf_sample("a", PromptKind::This, vec![1, 2, 0]);
        let most = cf_sample("b", PromptKind::Most, vec![1, 3, 0]);
        let pairs = [SteerPair {
            this: &this,
            most: &most,
        }];
        let vectors = compute_pvp(&params, &pairs, Task::Color).unwrap();
        let spec = InterventionSpec {
            direction: Direction::ToCf,
            start_layer: 1,
            window: 2,
            alpha: 0.0,
        };
        let hook = hook_for(&params, &vectors, &spec).unwrap();
        let plain = forward(&params, this.image.as_deref(), &this.tokens, &[]).unwrap();
        let hooked = forward(&params, this.image.as_deref(), &this.tokens, &[hook]).unwrap();
        for l in 0..plain.hidden.len() {
            assert_eq!(plain.hidden[l], hooked.hidden[l]);
        }
        assert_eq!(plain.logits, hooked.logits);
    }

    #[test]
    fn simultaneous_opposite_hooks_cancel_bit_exactly() {
        let params = Params::init(&test_config(), 6).unwrap();
        let this = cf_sample("a", PromptKind::This, vec![1, 2, 0]);
        let most = cf_sample("b", PromptKind::Most, vec![1, 3, 0]);
        let pairs = [SteerPair {
            this: &this,
            most: &most,
        }];
        let vectors = compute_pvp(&params, &pairs, Task::Color).unwrap();
        let spec_cf = InterventionSpec {
            direction: Direction::ToCf,
            start_layer: 0,
            window: 3,
            alpha: 1.0,
        };
        let spec_wk = InterventionSpec {
            direction: Direction::ToWk,
            ..spec_cf
        };
        let h1 = hook_for(&params, &vectors, &spec_cf).unwrap();
        let h2 = hook_for(&params, &vectors, &spec_wk).unwrap();
        let plain = forward(&params, most.image.as_deref(), &most.tokens, &[]).unwrap();
        let both = forward(&params, most.image.as_deref(), &most.tokens, &[h1, h2]).unwrap();
        assert_eq!(plain.logits, both.logits);
        for l in 0..plain.hidden.len() {
            assert_eq!(plain.hidden[l], both.hidden[l]);
        }
    }

    #[test]
    fn mismatched_dimensions_are_a_compat_error() {
        let params = Params::init(&test_config(), 7).unwrap();
        let vectors = SteeringVectors {
            task: Task::Color,
            per_layer: vec![vec![0.0; 8]; 4],
            n_pairs: 1,
            checkpoint_digest: "x".into(),
        };
        let spec = InterventionSpec {
            direction: Direction::ToCf,
            start_layer: 0,
            window: 0,
            alpha: 1.0,
        };
        assert!(matches!(
            hook_for(&params, &vectors, &spec),
            Err(PvpError::Compat(_))
        ));
    }

    #[test]
    fn tie_break_prefers_smaller_window_then_start() {
        let cell = |start_layer, window, rate| SearchCell {
            start_layer,
            window,
            alpha: 1.0,
            flip_rate_pct: rate,
            n_target: 10,
        };
        let table = vec![cell(2, 3, 80.0), cell(3, 2, 80.0), cell(1, 4, 70.0)];
        let best = select_best(&table).unwrap();
        assert_eq!((best.start_layer, best.window), (3, 2));

        let table = vec![cell(5, 1, 60.0), cell(2, 1, 60.0)];
        let best = select_best(&table).unwrap();
        assert_eq!((best.start_layer, best.window), (2, 1));

        let single = vec![cell(4, 0, 10.0)];
        assert_eq!(select_best(&single).unwrap().start_layer, 4);
    }

    #[test]
    fn empty_target_set_is_an_evaluation_error() {
        // A zeroed model answers token 0 everywhere, which is neither answer.
        let params = Params::zeros(&test_config()).unwrap();
        let sample = cf_sample("a", PromptKind::Most, vec![1, 2, 0]);
        let err = select_targets(&params, Direction::ToCf, &[&sample]);
        assert!(matches!(err, Err(PvpError::Evaluation(_))));
    }

    #[test]
    fn vectors_file_round_trips() {
        let params = Params::init(&test_config(), 8).unwrap();
        let this = cf_sample("a", PromptKind::This, vec![1, 2, 0]);
        let most = cf_sample("b", PromptKind::Most, vec![1, 3, 0]);
        let pairs = [SteerPair {
            this: &this,
            most: &most,
        }];
        let mut vectors = compute_pvp(&params, &pairs, Task::Color).unwrap();
        // Snap to f32 so the round trip is exact.
        for layer in vectors.per_layer.iter_mut() {
            for x in layer.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vectors.bin");
        save_vectors(&vectors, &path).unwrap();
        let loaded = load_vectors(&path).unwrap();
        assert_eq!(loaded, vectors);

        // Corruption is caught.
        let mut bytes = fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_vectors(&path), Err(PvpError::Integrity(_))));
    }
}
