//! Counterfactual dataset generation: train / steer-fit / eval splits.
//!
//! Train teaches two things at once: "this"-prompts are answered with the
//! rendered attribute over randomized renders, while "most"-prompts only
//! ever appear with prior-consistent images (or with no image at all, which
//! installs the prior directly in the weights). Pixels and priors are
//! dissociated only at evaluation time.
//!
//! Split hygiene is enforced on (objects, attribute, task, prompt kind,
//! variant) keys: the objects used for the eval WK cells never appear in
//! image-based "most" training, never render their canonical color in
//! "this" training, and every eval CF combination is held out of training.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{default_palette, ColorSpec};
use crate::digest::{derive_seed, digest_bytes};
use crate::error::{PvpError, Result};
use crate::image::{compose_size_pair, render_object_image, BiggerSide, CellImage};
use crate::universe::{admissible_cf_colors, build_universe, make_size_relations, ObjectSpec, SizeRelation};
use crate::vocab::{build_prompt, PromptKind, Task, TokenId, Variant, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub n_objects: usize,
    pub palette: Vec<ColorSpec>,
    pub canvas_px: usize,
    pub color_blob_px: usize,
    /// Objects reserved for the eval WK cells (their "most" image samples
    /// and "this" canonical renders never appear in train).
    pub n_eval_objects: usize,
    /// Counterfactual colors per object reserved for eval.
    pub heldout_cf_per_object: usize,
    /// Counterfactual colors per object available to train and steer-fit.
    pub train_cf_per_object: usize,
    pub train_this_repeats: usize,
    pub train_most_repeats: usize,
    /// "most" records whose image shows a different object rendered
    /// canonically; they teach prior recall to survive image context.
    pub train_most_distractor_repeats: usize,
    /// Image-free "most" QA records installing priors in the weights.
    pub train_text_most_repeats: usize,
    pub steer_repeats: usize,
    pub eval_wk_repeats: usize,
    pub eval_cf_repeats: usize,
    /// Fraction of size relations reserved for eval.
    pub eval_relation_fraction: f64,
    pub size_this_repeats: usize,
    pub size_most_repeats: usize,
    pub size_most_distractor_repeats: usize,
    pub size_text_most_repeats: usize,
    pub size_steer_repeats: usize,
    pub size_eval_wk_repeats: usize,
    pub size_eval_cf_repeats: usize,
    /// Extra grounding-only object pairs for the size task ("this" prompts,
    /// both orientations). They diversify the bigger-side copying skill and
    /// never appear in eval or in "most" training.
    pub size_aux_pairs: usize,
    pub size_aux_repeats: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_objects: 24,
            palette: default_palette(),
            canvas_px: 32,
            color_blob_px: 24,
            n_eval_objects: 8,
            heldout_cf_per_object: 2,
            train_cf_per_object: 3,
            train_this_repeats: 3,
            train_most_repeats: 4,
            train_most_distractor_repeats: 2,
            train_text_most_repeats: 6,
            steer_repeats: 1,
            eval_wk_repeats: 3,
            eval_cf_repeats: 2,
            eval_relation_fraction: 0.34,
            size_this_repeats: 4,
            size_most_repeats: 3,
            size_most_distractor_repeats: 1,
            size_text_most_repeats: 4,
            size_steer_repeats: 2,
            size_eval_wk_repeats: 2,
            size_eval_cf_repeats: 3,
            size_aux_pairs: 80,
            size_aux_repeats: 2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_eval_objects == 0 || self.n_eval_objects >= self.n_objects {
            return Err(PvpError::Config(format!(
                "n_eval_objects {} must be in [1, n_objects)",
                self.n_eval_objects
            )));
        }
        if self.heldout_cf_per_object == 0 || self.train_cf_per_object == 0 {
            return Err(PvpError::Config(
                "heldout_cf_per_object and train_cf_per_object must be positive".into(),
            ));
        }
        if self.color_blob_px == 0 || self.color_blob_px > self.canvas_px {
            return Err(PvpError::Config(format!(
                "color_blob_px {} must fit canvas {}",
                self.color_blob_px, self.canvas_px
            )));
        }
        for (name, v) in [
            ("train_this_repeats", self.train_this_repeats),
            ("steer_repeats", self.steer_repeats),
            ("eval_wk_repeats", self.eval_wk_repeats),
            ("eval_cf_repeats", self.eval_cf_repeats),
            ("size_this_repeats", self.size_this_repeats),
            ("size_steer_repeats", self.size_steer_repeats),
            ("size_eval_wk_repeats", self.size_eval_wk_repeats),
            ("size_eval_cf_repeats", self.size_eval_cf_repeats),
        ] {
            if v == 0 {
                return Err(PvpError::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.eval_relation_fraction) {
            return Err(PvpError::Config(
                "eval_relation_fraction must be in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    SteerFit,
    Eval,
}

impl Split {
    pub fn label(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::SteerFit => "steerfit",
            Split::Eval => "eval",
        }
    }
}

/// One prompt/image example. `image` and `variant` are both absent for
/// text-only prior-installation records.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub task: Task,
    pub prompt_kind: PromptKind,
    pub variant: Option<Variant>,
    pub tokens: Vec<TokenId>,
    pub wk_answer: TokenId,
    pub cf_answer: Option<TokenId>,
    pub object_ids: Vec<usize>,
    pub image_id: Option<String>,
    pub image: Option<Arc<CellImage>>,
    /// Links the This/Most samples built over the same image.
    pub pair_index: Option<usize>,
}

impl Sample {
    /// The attribute actually rendered in the image (canonical for WK).
    pub fn rendered_answer(&self) -> TokenId {
        self.cf_answer.unwrap_or(self.wk_answer)
    }

    /// Scoring target: "this" prompts are judged against the rendered
    /// attribute, "most" prompts against the canonical one.
    pub fn scoring_target(&self) -> TokenId {
        match self.prompt_kind {
            PromptKind::This => self.rendered_answer(),
            PromptKind::Most => self.wk_answer,
        }
    }

    pub fn quadrant(&self) -> String {
        let variant = match (self.variant, &self.image) {
            (Some(v), _) => v.label(),
            (None, None) => "text",
            (None, Some(_)) => "distractor",
        };
        format!("{}/{}/{}", self.task.label(), self.prompt_kind.label(), variant)
    }

    /// Split-hygiene key: objects, rendered attribute, task, prompt kind and
    /// variant. Text-only records carry no variant and thus never collide
    /// with image-based eval keys.
    pub fn hygiene_key(&self) -> (Vec<usize>, TokenId, Task, PromptKind, Option<Variant>) {
        (
            self.object_ids.clone(),
            self.rendered_answer(),
            self.task,
            self.prompt_kind,
            self.variant,
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config: DatasetConfig,
    pub universe_digest: String,
    pub palette: Vec<ColorSpec>,
    /// Sample counts keyed by `split/task/kind/variant`.
    pub counts: BTreeMap<String, usize>,
    pub split_sizes: BTreeMap<String, usize>,
    /// Digest of every persisted file; filled when the dataset is written.
    pub file_digests: BTreeMap<String, String>,
    /// Checksum binding seed, config and file digests together.
    pub integrity: String,
}

impl DatasetManifest {
    pub fn compute_integrity(&self) -> String {
        let payload = serde_json::json!({
            "seed": self.seed,
            "config": self.config,
            "universe_digest": self.universe_digest,
            "file_digests": self.file_digests,
        });
        digest_bytes(payload.to_string().as_bytes())
    }
}

/// Serialized form of the object universe (palette + objects).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UniverseFile {
    pub palette: Vec<ColorSpec>,
    pub objects: Vec<ObjectSpec>,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub seed: u64,
    pub config: DatasetConfig,
    pub universe: Vec<ObjectSpec>,
    pub palette: Vec<ColorSpec>,
    pub vocab: Vocab,
    pub train: Vec<Sample>,
    pub steerfit: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub manifest: DatasetManifest,
}

impl DatasetBundle {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::SteerFit => &self.steerfit,
            Split::Eval => &self.eval,
        }
    }

    /// Samples of one eval cell.
    pub fn eval_cell(&self, task: Task, kind: PromptKind, variant: Variant) -> Vec<&Sample> {
        self.eval
            .iter()
            .filter(|s| s.task == task && s.prompt_kind == kind && s.variant == Some(variant))
            .collect()
    }

    /// (This, Most) sample pairs sharing one image, in pair order.
    pub fn paired(&self, split: Split, task: Task, variant: Variant) -> Vec<(&Sample, &Sample)> {
        let mut by_pair: BTreeMap<usize, (Option<&Sample>, Option<&Sample>)> = BTreeMap::new();
        for s in self.split(split) {
            if s.task != task || s.variant != Some(variant) {
                continue;
            }
            let Some(p) = s.pair_index else { continue };
            let entry = by_pair.entry(p).or_default();
            match s.prompt_kind {
                PromptKind::This => entry.0 = Some(s),
                PromptKind::Most => entry.1 = Some(s),
            }
        }
        by_pair
            .values()
            .filter_map(|(t, m)| Some(((*t)?, (*m)?)))
            .collect()
    }
}

struct GenContext<'a> {
    cfg: &'a DatasetConfig,
    seed: u64,
    palette: &'a [ColorSpec],
    vocab: &'a Vocab,
}

impl GenContext<'_> {
    fn render_color(&self, object: &ObjectSpec, color_idx: usize, image_id: &str) -> Result<Arc<CellImage>> {
        let img = render_object_image(
            object,
            &self.palette[color_idx],
            self.cfg.color_blob_px,
            self.cfg.canvas_px,
            derive_seed(self.seed, image_id),
        )?;
        Ok(Arc::new(img))
    }

    fn color_sample(
        &self,
        id: String,
        kind: PromptKind,
        object: &ObjectSpec,
        rendered: Option<(usize, &str, Arc<CellImage>)>,
        pair_index: Option<usize>,
    ) -> Result<Sample> {
        let tokens = build_prompt(self.vocab, Task::Color, kind, &[&object.name])?;
        let wk_answer = self.vocab.color_token(object.canonical_color)?;
        let (variant, cf_answer, image_id, image) = match rendered {
            Some((color_idx, image_id, image)) => {
                if color_idx == object.canonical_color {
                    (Some(Variant::Wk), None, Some(image_id.to_string()), Some(image))
                } else {
                    (
                        Some(Variant::Cf),
                        Some(self.vocab.color_token(color_idx)?),
                        Some(image_id.to_string()),
                        Some(image),
                    )
                }
            }
            None => (None, None, None, None),
        };
        Ok(Sample {
            id,
            task: Task::Color,
            prompt_kind: kind,
            variant,
            tokens,
            wk_answer,
            cf_answer,
            object_ids: vec![object.id],
            image_id,
            image,
            pair_index,
        })
    }

    /// Presentation order for a relation: even relation indices present
    /// (small, big), odd present (big, small), so the canonical winner's
    /// prompt slot varies across pairs.
    fn relation_order<'b>(
        &self,
        rel_idx: usize,
        rel: &SizeRelation,
        objs: &'b [ObjectSpec],
    ) -> (&'b ObjectSpec, &'b ObjectSpec) {
        let small = &objs[rel.small];
        let big = &objs[rel.big];
        if rel_idx % 2 == 0 {
            (small, big)
        } else {
            (big, small)
        }
    }

    fn render_size(
        &self,
        a: &ObjectSpec,
        b: &ObjectSpec,
        bigger: BiggerSide,
        image_id: &str,
    ) -> Result<Arc<CellImage>> {
        let img = compose_size_pair(
            a,
            &self.palette[a.canonical_color],
            b,
            &self.palette[b.canonical_color],
            bigger,
            self.cfg.canvas_px,
            derive_seed(self.seed, image_id),
        )?;
        Ok(Arc::new(img))
    }

    #[allow(clippy::too_many_arguments)]
    fn size_sample(
        &self,
        id: String,
        kind: PromptKind,
        a: &ObjectSpec,
        b: &ObjectSpec,
        canonical_winner: usize,
        rendered: Option<(usize, &str, Arc<CellImage>)>,
        pair_index: Option<usize>,
    ) -> Result<Sample> {
        let tokens = build_prompt(self.vocab, Task::Size, kind, &[&a.name, &b.name])?;
        let winner_token = |obj_id: usize| -> Result<TokenId> { self.vocab.object_token(obj_id) };
        let wk_answer = winner_token(canonical_winner)?;
        let (variant, cf_answer, image_id, image) = match rendered {
            Some((rendered_winner, image_id, image)) => {
                if rendered_winner == canonical_winner {
                    (Some(Variant::Wk), None, Some(image_id.to_string()), Some(image))
                } else {
                    (
                        Some(Variant::Cf),
                        Some(winner_token(rendered_winner)?),
                        Some(image_id.to_string()),
                        Some(image),
                    )
                }
            }
            None => (None, None, None, None),
        };
        Ok(Sample {
            id,
            task: Task::Size,
            prompt_kind: kind,
            variant,
            tokens,
            wk_answer,
            cf_answer,
            object_ids: vec![a.id, b.id],
            image_id,
            image,
            pair_index,
        })
    }
}

/// Generate the three splits and the manifest. Deterministic in
/// `(config, seed)`; every image's render seed derives from its id.
pub fn generate_dataset(config: &DatasetConfig, seed: u64) -> Result<DatasetBundle> {
    config.validate()?;
    let universe = build_universe(seed, config.n_objects, &config.palette)?;
    let palette = config.palette.clone();
    let vocab = Vocab::build(&palette, &universe)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split-structure"));

    // Eval-reserved objects.
    let mut object_ids: Vec<usize> = (0..universe.len()).collect();
    object_ids.shuffle(&mut rng);
    let eval_objects: BTreeSet<usize> =
        object_ids[..config.n_eval_objects].iter().copied().collect();

    // Per-object counterfactual color partition: held-out vs trainable.
    let mut heldout_cf: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut train_cf: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for obj in &universe {
        let mut admissible = admissible_cf_colors(obj, &palette);
        let need = config.heldout_cf_per_object + config.train_cf_per_object;
        if admissible.len() < need {
            return Err(PvpError::Config(format!(
                "object `{}` has {} admissible counterfactual colors, config needs {need}",
                obj.name,
                admissible.len()
            )));
        }
        admissible.shuffle(&mut rng);
        let mut held: Vec<usize> = admissible[..config.heldout_cf_per_object].to_vec();
        let mut train: Vec<usize> = admissible
            [config.heldout_cf_per_object..need]
            .to_vec();
        held.sort_unstable();
        train.sort_unstable();
        heldout_cf.insert(obj.id, held);
        train_cf.insert(obj.id, train);
    }

    // Size relations; a fraction is reserved for eval.
    let relations = make_size_relations(&universe);
    if relations.is_empty() {
        return Err(PvpError::Config(
            "universe yields no factor-10 size relations; increase n_objects".into(),
        ));
    }
    let n_eval_rels = ((relations.len() as f64 * config.eval_relation_fraction).round() as usize)
        .clamp(1, relations.len() - 1);
    let mut rel_ids: Vec<usize> = (0..relations.len()).collect();
    rel_ids.shuffle(&mut rng);
    let eval_rels: BTreeSet<usize> = rel_ids[..n_eval_rels].iter().copied().collect();

    let ctx = GenContext {
        cfg: config,
        seed,
        palette: &palette,
        vocab: &vocab,
    };

    let mut train: Vec<Sample> = Vec::new();
    let mut steerfit: Vec<Sample> = Vec::new();
    let mut eval: Vec<Sample> = Vec::new();

    // ---- color task ----
    for obj in &universe {
        let cname = |idx: usize| palette[idx].name.clone();

        // Train "this": randomized rendered attributes over the trainable
        // colors, plus the canonical color for non-eval objects.
        let mut attrs: Vec<usize> = Vec::new();
        if !eval_objects.contains(&obj.id) {
            attrs.push(obj.canonical_color);
        }
        attrs.extend(&train_cf[&obj.id]);
        for &attr in &attrs {
            for r in 0..config.train_this_repeats {
                let image_id = format!("img-color-train-this-{}-{}-{r}", obj.name, cname(attr));
                let image = ctx.render_color(obj, attr, &image_id)?;
                train.push(ctx.color_sample(
                    format!("color-train-this-{}-{}-{r}", obj.name, cname(attr)),
                    PromptKind::This,
                    obj,
                    Some((attr, &image_id, image)),
                    None,
                )?);
            }
        }

        // Train "most" with prior-consistent images (non-eval objects only).
        if !eval_objects.contains(&obj.id) {
            for r in 0..config.train_most_repeats {
                let image_id = format!("img-color-train-most-{}-{r}", obj.name);
                let image = ctx.render_color(obj, obj.canonical_color, &image_id)?;
                train.push(ctx.color_sample(
                    format!("color-train-most-{}-{r}", obj.name),
                    PromptKind::Most,
                    obj,
                    Some((obj.canonical_color, &image_id, image)),
                    None,
                )?);
            }
        }

        // Distractor images: a different object rendered canonically; the
        // answer still follows the prompted object's prior.
        if config.train_most_distractor_repeats > 0 {
            let partner = universe
                .iter()
                .cycle()
                .skip(obj.id + 1)
                .take(universe.len())
                .find(|p| {
                    p.id != obj.id
                        && !eval_objects.contains(&p.id)
                        && p.canonical_color != obj.canonical_color
                })
                .ok_or_else(|| {
                    PvpError::Config("no distractor partner with a distinct color".into())
                })?;
            for r in 0..config.train_most_distractor_repeats {
                let image_id = format!("img-color-train-mostdistract-{}-{r}", obj.name);
                let image = ctx.render_color(partner, partner.canonical_color, &image_id)?;
                let tokens = build_prompt(ctx.vocab, Task::Color, PromptKind::Most, &[&obj.name])?;
                train.push(Sample {
                    id: format!("color-train-mostdistract-{}-{r}", obj.name),
                    task: Task::Color,
                    prompt_kind: PromptKind::Most,
                    variant: None,
                    tokens,
                    wk_answer: ctx.vocab.color_token(obj.canonical_color)?,
                    cf_answer: None,
                    object_ids: vec![obj.id],
                    image_id: Some(image_id),
                    image: Some(image),
                    pair_index: None,
                });
            }
        }

        // Image-free "most" prior installation, all objects.
        for r in 0..config.train_text_most_repeats {
            train.push(ctx.color_sample(
                format!("color-train-mosttext-{}-{r}", obj.name),
                PromptKind::Most,
                obj,
                None,
                None,
            )?);
        }
    }

    // Steer-fit: counterfactual images with both prompt forms.
    let mut pair_counter = 0usize;
    for obj in &universe {
        for &attr in &train_cf[&obj.id] {
            for r in 0..config.steer_repeats {
                let cname = &palette[attr].name;
                let image_id = format!("img-color-steer-{}-{cname}-{r}", obj.name);
                let image = ctx.render_color(obj, attr, &image_id)?;
                for kind in [PromptKind::This, PromptKind::Most] {
                    steerfit.push(ctx.color_sample(
                        format!("color-steer-{}-{}-{cname}-{r}", kind.label(), obj.name),
                        kind,
                        obj,
                        Some((attr, &image_id, image.clone())),
                        Some(pair_counter),
                    )?);
                }
                pair_counter += 1;
            }
        }
    }

    // Eval WK cells over the reserved objects.
    for obj in &universe {
        if !eval_objects.contains(&obj.id) {
            continue;
        }
        for r in 0..config.eval_wk_repeats {
            let image_id = format!("img-color-eval-wk-{}-{r}", obj.name);
            let image = ctx.render_color(obj, obj.canonical_color, &image_id)?;
            for kind in [PromptKind::This, PromptKind::Most] {
                eval.push(ctx.color_sample(
                    format!("color-eval-wk-{}-{}-{r}", kind.label(), obj.name),
                    kind,
                    obj,
                    Some((obj.canonical_color, &image_id, image.clone())),
                    Some(pair_counter),
                )?);
            }
            pair_counter += 1;
        }
    }

    // Eval CF cells over held-out combinations, all objects.
    for obj in &universe {
        for &attr in &heldout_cf[&obj.id] {
            for r in 0..config.eval_cf_repeats {
                let cname = &palette[attr].name;
                let image_id = format!("img-color-eval-cf-{}-{cname}-{r}", obj.name);
                let image = ctx.render_color(obj, attr, &image_id)?;
                for kind in [PromptKind::This, PromptKind::Most] {
                    eval.push(ctx.color_sample(
                        format!("color-eval-cf-{}-{}-{cname}-{r}", kind.label(), obj.name),
                        kind,
                        obj,
                        Some((attr, &image_id, image.clone())),
                        Some(pair_counter),
                    )?);
                }
                pair_counter += 1;
            }
        }
    }

    // ---- size task ----
    for (ri, rel) in relations.iter().enumerate() {
        let (a, b) = ctx.relation_order(ri, rel, &universe);
        let canonical = rel.big;
        let counterfactual = rel.small;
        let winner_side = |winner: usize| -> BiggerSide {
            if winner == a.id {
                BiggerSide::A
            } else {
                BiggerSide::B
            }
        };

        if !eval_rels.contains(&ri) {
            // Train "this": both orientations.
            for (orient, winner) in [("wk", canonical), ("cf", counterfactual)] {
                for r in 0..config.size_this_repeats {
                    let image_id = format!("img-size-train-this-{ri}-{orient}-{r}");
                    let image = ctx.render_size(a, b, winner_side(winner), &image_id)?;
                    train.push(ctx.size_sample(
                        format!("size-train-this-{ri}-{orient}-{r}"),
                        PromptKind::This,
                        a,
                        b,
                        canonical,
                        Some((winner, &image_id, image)),
                        None,
                    )?);
                }
            }
            // Train "most" with the canonical orientation.
            for r in 0..config.size_most_repeats {
                let image_id = format!("img-size-train-most-{ri}-{r}");
                let image = ctx.render_size(a, b, winner_side(canonical), &image_id)?;
                train.push(ctx.size_sample(
                    format!("size-train-most-{ri}-{r}"),
                    PromptKind::Most,
                    a,
                    b,
                    canonical,
                    Some((canonical, &image_id, image)),
                    None,
                )?);
            }
            // Steer-fit pairs over counterfactual orientations.
            for r in 0..config.size_steer_repeats {
                let image_id = format!("img-size-steer-{ri}-{r}");
                let image = ctx.render_size(a, b, winner_side(counterfactual), &image_id)?;
                for kind in [PromptKind::This, PromptKind::Most] {
                    steerfit.push(ctx.size_sample(
                        format!("size-steer-{}-{ri}-{r}", kind.label()),
                        kind,
                        a,
                        b,
                        canonical,
                        Some((counterfactual, &image_id, image.clone())),
                        Some(pair_counter),
                    )?);
                }
                pair_counter += 1;
            }
        } else {
            // Eval cells.
            for r in 0..config.size_eval_wk_repeats {
                let image_id = format!("img-size-eval-wk-{ri}-{r}");
                let image = ctx.render_size(a, b, winner_side(canonical), &image_id)?;
                for kind in [PromptKind::This, PromptKind::Most] {
                    eval.push(ctx.size_sample(
                        format!("size-eval-wk-{}-{ri}-{r}", kind.label()),
                        kind,
                        a,
                        b,
                        canonical,
                        Some((canonical, &image_id, image.clone())),
                        Some(pair_counter),
                    )?);
                }
                pair_counter += 1;
            }
            for r in 0..config.size_eval_cf_repeats {
                let image_id = format!("img-size-eval-cf-{ri}-{r}");
                let image = ctx.render_size(a, b, winner_side(counterfactual), &image_id)?;
                for kind in [PromptKind::This, PromptKind::Most] {
                    eval.push(ctx.size_sample(
                        format!("size-eval-cf-{}-{ri}-{r}", kind.label()),
                        kind,
                        a,
                        b,
                        canonical,
                        Some((counterfactual, &image_id, image.clone())),
                        Some(pair_counter),
                    )?);
                }
                pair_counter += 1;
            }
        }
        // Distractor images: an unrelated pair's canonical rendering; the
        // answer still follows the prompted relation's prior.
        for r in 0..config.size_most_distractor_repeats {
            let other_idx = relations
                .iter()
                .enumerate()
                .cycle()
                .skip(ri + 1)
                .take(relations.len())
                .find(|(oi, o)| {
                    *oi != ri
                        && !eval_rels.contains(oi)
                        && o.small != rel.small
                        && o.big != rel.big
                })
                .map(|(oi, _)| oi);
            let Some(other_idx) = other_idx else { break };
            let (oa, ob) = ctx.relation_order(other_idx, &relations[other_idx], &universe);
            let o_canonical = relations[other_idx].big;
            let side = if o_canonical == oa.id {
                BiggerSide::A
            } else {
                BiggerSide::B
            };
            let image_id = format!("img-size-train-mostdistract-{ri}-{r}");
            let image = ctx.render_size(oa, ob, side, &image_id)?;
            let tokens = build_prompt(ctx.vocab, Task::Size, PromptKind::Most, &[&a.name, &b.name])?;
            train.push(Sample {
                id: format!("size-train-mostdistract-{ri}-{r}"),
                task: Task::Size,
                prompt_kind: PromptKind::Most,
                variant: None,
                tokens,
                wk_answer: ctx.vocab.object_token(canonical)?,
                cf_answer: None,
                object_ids: vec![a.id, b.id],
                image_id: Some(image_id),
                image: Some(image),
                pair_index: None,
            });
        }

        // Image-free "most" prior installation covers every relation.
        for r in 0..config.size_text_most_repeats {
            train.push(ctx.size_sample(
                format!("size-train-mosttext-{ri}-{r}"),
                PromptKind::Most,
                a,
                b,
                canonical,
                None,
                None,
            )?);
        }
    }

    // Auxiliary size-grounding pairs: arbitrary object pairs, "this" prompts
    // only, both orientations, excluding the pairs reserved for eval.
    if config.size_aux_pairs > 0 {
        let eval_pairs: BTreeSet<(usize, usize)> = eval_rels
            .iter()
            .map(|&ri| {
                let r = &relations[ri];
                (r.small.min(r.big), r.small.max(r.big))
            })
            .collect();
        let mut candidates: Vec<(usize, usize)> = Vec::new();
        for i in 0..universe.len() {
            for j in (i + 1)..universe.len() {
                if !eval_pairs.contains(&(i, j)) {
                    candidates.push((i, j));
                }
            }
        }
        if candidates.len() < config.size_aux_pairs {
            return Err(PvpError::Config(format!(
                "size_aux_pairs {} exceeds the {} available object pairs",
                config.size_aux_pairs,
                candidates.len()
            )));
        }
        candidates.shuffle(&mut rng);
        for (pi, &(i, j)) in candidates[..config.size_aux_pairs].iter().enumerate() {
            let (a, b) = if pi % 2 == 0 {
                (&universe[i], &universe[j])
            } else {
                (&universe[j], &universe[i])
            };
            let canonical = if a.size_units >= b.size_units { a.id } else { b.id };
            let other = if canonical == a.id { b.id } else { a.id };
            for (orient, winner) in [("wk", canonical), ("cf", other)] {
                for r in 0..config.size_aux_repeats {
                    let image_id = format!("img-size-train-aux-{pi}-{orient}-{r}");
                    let side = if winner == a.id {
                        BiggerSide::A
                    } else {
                        BiggerSide::B
                    };
                    let image = ctx.render_size(a, b, side, &image_id)?;
                    train.push(ctx.size_sample(
                        format!("size-train-aux-{pi}-{orient}-{r}"),
                        PromptKind::This,
                        a,
                        b,
                        canonical,
                        Some((winner, &image_id, image)),
                        None,
                    )?);
                }
            }
        }
    }

    // Manifest.
    let universe_file = UniverseFile {
        palette: palette.clone(),
        objects: universe.clone(),
    };
    let universe_json = serde_json::to_vec_pretty(&universe_file)
        .map_err(|e| PvpError::Generation(format!("universe encode: {e}")))?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut split_sizes: BTreeMap<String, usize> = BTreeMap::new();
    for (split, samples) in [
        (Split::Train, &train),
        (Split::SteerFit, &steerfit),
        (Split::Eval, &eval),
    ] {
        split_sizes.insert(split.label().to_string(), samples.len());
        for s in samples {
            *counts
                .entry(format!("{}/{}", split.label(), s.quadrant()))
                .or_default() += 1;
        }
    }
    let manifest = DatasetManifest {
        schema_version: 1,
        seed,
        config: config.clone(),
        universe_digest: digest_bytes(&universe_json),
        palette: palette.clone(),
        counts,
        split_sizes,
        file_digests: BTreeMap::new(),
        integrity: String::new(),
    };

    let bundle = DatasetBundle {
        seed,
        config: config.clone(),
        universe,
        palette,
        vocab,
        train,
        steerfit,
        eval,
        manifest,
    };
    check_split_hygiene(&bundle)?;
    Ok(bundle)
}

/// Train/eval and steer-fit/eval splits must not share hygiene keys.
pub fn check_split_hygiene(bundle: &DatasetBundle) -> Result<()> {
    let keys = |samples: &[Sample]| -> BTreeSet<_> {
        samples.iter().map(Sample::hygiene_key).collect()
    };
    let eval_keys = keys(&bundle.eval);
    for (name, samples) in [("train", &bundle.train), ("steerfit", &bundle.steerfit)] {
        let overlap: Vec<_> = keys(samples).intersection(&eval_keys).cloned().collect();
        if !overlap.is_empty() {
            return Err(PvpError::Generation(format!(
                "{name} and eval share {} hygiene keys, first: {:?}",
                overlap.len(),
                overlap[0]
            )));
        }
    }
    Ok(())
}
