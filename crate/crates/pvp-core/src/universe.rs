//! Synthetic object universe: canonical colors and canonical sizes.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{circular_hue_distance, validate_palette, ColorSpec, MIN_HUE_SEPARATION_DEG};
use crate::error::{PvpError, Result};

/// An object with a canonical color and a canonical size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: usize,
    pub name: String,
    /// Index into the palette.
    pub canonical_color: usize,
    /// Canonical size in abstract area units, > 0.
    pub size_units: f64,
}

/// Ordered size relation: `big` is canonically at least 10x `small`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeRelation {
    pub small: usize,
    pub big: usize,
}

/// Required canonical size ratio between the two objects of a relation.
pub const SIZE_RATIO_THRESHOLD: f64 = 10.0;

/// Span of the size distribution in decades; guarantees factor-10 pairs.
const SIZE_SPAN_DECADES: f64 = 4.0;

const OBJECT_NAMES: &[&str] = &[
    "strawberry", "cherry", "banana", "apple", "lime", "plum", "carrot", "pumpkin", "frog",
    "fox", "crow", "flamingo", "squirrel", "alligator", "whale", "ant", "beetle", "sparrow",
    "horse", "elephant", "kettle", "wagon", "barrel", "lantern", "anchor", "canoe", "drum",
    "ladder", "mailbox", "piano", "tent", "windmill", "acorn", "bucket", "cabin", "dome",
    "engine", "fountain", "glacier", "hut",
];

/// Deterministic object name for index `i`.
fn object_name(i: usize) -> String {
    match OBJECT_NAMES.get(i) {
        Some(name) => (*name).to_string(),
        None => format!("thing{i}"),
    }
}

/// Build the object universe.
///
/// Canonical colors are assigned round-robin over the palette and then
/// shuffled by seed. Sizes are drawn log-uniformly from a 4-decade range,
/// stratified so neighbors at a factor of 10 always exist, then shuffled so
/// object id carries no size information.
pub fn build_universe(seed: u64, n_objects: usize, palette: &[ColorSpec]) -> Result<Vec<ObjectSpec>> {
    if n_objects < 4 {
        return Err(PvpError::Config(format!(
            "need at least 4 objects, got {n_objects}"
        )));
    }
    validate_palette(palette, 4)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut colors: Vec<usize> = (0..n_objects).map(|i| i % palette.len()).collect();
    colors.shuffle(&mut rng);

    let mut log_sizes: Vec<f64> = (0..n_objects)
        .map(|i| {
            let jitter: f64 = rng.gen_range(0.05..0.95);
            SIZE_SPAN_DECADES * (i as f64 + jitter) / n_objects as f64
        })
        .collect();
    log_sizes.shuffle(&mut rng);

    Ok((0..n_objects)
        .map(|i| ObjectSpec {
            id: i,
            name: object_name(i),
            canonical_color: colors[i],
            size_units: 10f64.powf(log_sizes[i]),
        })
        .collect())
}

/// Palette indices admissible as a counterfactual color for `object`:
/// distinct from the canonical color by at least 30 degrees of hue.
pub fn admissible_cf_colors(object: &ObjectSpec, palette: &[ColorSpec]) -> Vec<usize> {
    let canonical = &palette[object.canonical_color];
    (0..palette.len())
        .filter(|&i| {
            i != object.canonical_color
                && circular_hue_distance(palette[i].hue_deg, canonical.hue_deg)
                    >= MIN_HUE_SEPARATION_DEG
        })
        .collect()
}

/// Sample a counterfactual color for `object`, uniform over the admissible set.
pub fn select_cf_color(
    object: &ObjectSpec,
    palette: &[ColorSpec],
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    if palette.len() < 2 {
        return Err(PvpError::Config(
            "palette needs at least 2 entries to pick a counterfactual color".into(),
        ));
    }
    let admissible = admissible_cf_colors(object, palette);
    if admissible.is_empty() {
        return Err(PvpError::Generation(format!(
            "no palette color is hue-distinct from `{}`'s canonical color",
            object.name
        )));
    }
    Ok(admissible[rng.gen_range(0..admissible.len())])
}

/// Emit size relations: for every object with both a >=10x smaller and a
/// >=10x larger neighbor, pair it with the nearest such neighbor on each
/// side. Duplicates are removed; order follows ascending size.
pub fn make_size_relations(universe: &[ObjectSpec]) -> Vec<SizeRelation> {
    let mut by_size: Vec<&ObjectSpec> = universe.iter().collect();
    by_size.sort_by(|a, b| {
        a.size_units
            .partial_cmp(&b.size_units)
            .expect("sizes are finite")
            .then(a.id.cmp(&b.id))
    });

    let mut relations = Vec::new();
    for (rank, obj) in by_size.iter().enumerate() {
        // Nearest neighbor at least 10x smaller: scan downward.
        let below = by_size[..rank]
            .iter()
            .rev()
            .find(|o| obj.size_units >= SIZE_RATIO_THRESHOLD * o.size_units);
        // Nearest neighbor at least 10x larger: scan upward.
        let above = by_size[rank + 1..]
            .iter()
            .find(|o| o.size_units >= SIZE_RATIO_THRESHOLD * obj.size_units);
        if let (Some(small), Some(big)) = (below, above) {
            let lower = SizeRelation {
                small: small.id,
                big: obj.id,
            };
            let upper = SizeRelation {
                small: obj.id,
                big: big.id,
            };
            if !relations.contains(&lower) {
                relations.push(lower);
            }
            if !relations.contains(&upper) {
                relations.push(upper);
            }
        }
    }
    relations
}
