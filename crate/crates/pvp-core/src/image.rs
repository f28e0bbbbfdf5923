//! Pixel grids, object masks, and the counterfactual image edits.
//!
//! Pixels are f64 triples snapped to the f32 grid at every write, so the
//! in-memory image and its on-disk float32 form are always interchangeable.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::color::{hsv_to_rgb, rgb_to_hsv, ColorSpec};
use crate::error::{PvpError, Result};
use crate::universe::ObjectSpec;

/// One object's occupancy mask over the pixel grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMask {
    pub object_id: usize,
    pub bits: Vec<bool>,
}

/// Pixel grid with per-object masks and an optional reference baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CellImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, `3 * width * height` values in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub masks: Vec<ObjectMask>,
    pub baseline_row: Option<usize>,
}

/// Which of the two composed objects is rendered bigger. Object A always
/// sits on the left, object B on the right.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiggerSide {
    A,
    B,
}

/// Rendered side-length ratio between the big and small object of a pair.
pub const SIZE_RENDER_RATIO: (usize, usize) = (25, 8);

/// Per-pixel value jitter applied when rendering blobs.
const VALUE_JITTER: f64 = 0.1;

/// Snap to the f32 grid.
fn q32(x: f64) -> f64 {
    x as f32 as f64
}

impl CellImage {
    pub fn blank(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![1.0; 3 * width * height],
            masks: Vec::new(),
            baseline_row: None,
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> (f64, f64, f64) {
        let i = 3 * (y * self.width + x);
        (self.pixels[i], self.pixels[i + 1], self.pixels[i + 2])
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: (f64, f64, f64)) {
        let i = 3 * (y * self.width + x);
        self.pixels[i] = q32(rgb.0);
        self.pixels[i + 1] = q32(rgb.1);
        self.pixels[i + 2] = q32(rgb.2);
    }

    /// Union of all masks.
    pub fn any_mask(&self) -> Vec<bool> {
        let mut out = vec![false; self.width * self.height];
        for m in &self.masks {
            for (o, &b) in out.iter_mut().zip(&m.bits) {
                *o = *o || b;
            }
        }
        out
    }

    pub fn mask_for(&self, object_id: usize) -> Option<&ObjectMask> {
        self.masks.iter().find(|m| m.object_id == object_id)
    }

    /// Mask invariants: matching dimensions and pairwise disjointness.
    pub fn validate_masks(&self) -> Result<()> {
        for m in &self.masks {
            if m.bits.len() != self.width * self.height {
                return Err(PvpError::Shape(format!(
                    "mask for object {} has {} bits, image has {} pixels",
                    m.object_id,
                    m.bits.len(),
                    self.width * self.height
                )));
            }
        }
        for i in 0..self.masks.len() {
            for j in (i + 1)..self.masks.len() {
                let overlap = self.masks[i]
                    .bits
                    .iter()
                    .zip(&self.masks[j].bits)
                    .any(|(&a, &b)| a && b);
                if overlap {
                    return Err(PvpError::Shape(format!(
                        "masks for objects {} and {} overlap",
                        self.masks[i].object_id, self.masks[j].object_id
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Draw a disc of diameter `side` with its bounding box at `(x0, y0)`,
/// colored from `color` with per-pixel value jitter. Returns the mask bits.
fn draw_disc(
    img: &mut CellImage,
    x0: usize,
    y0: usize,
    side: usize,
    color: &ColorSpec,
    rng: &mut ChaCha8Rng,
) -> Vec<bool> {
    let mut bits = vec![false; img.width * img.height];
    let r = side as f64 / 2.0;
    let cx = x0 as f64 + r;
    let cy = y0 as f64 + r;
    for y in y0..(y0 + side).min(img.height) {
        for x in x0..(x0 + side).min(img.width) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                let jitter: f64 = rng.gen_range(-VALUE_JITTER..=VALUE_JITTER);
                let v = (color.val + jitter).clamp(0.05, 1.0);
                img.set_pixel(x, y, hsv_to_rgb(color.hue_deg, color.sat, v));
                bits[y * img.width + x] = true;
            }
        }
    }
    bits
}

/// Render a single object as a centered blob on a white canvas.
pub fn render_object_image(
    object: &ObjectSpec,
    color: &ColorSpec,
    side_px: usize,
    canvas_px: usize,
    seed: u64,
) -> Result<CellImage> {
    if side_px == 0 {
        return Err(PvpError::Argument("blob side must be positive".into()));
    }
    if side_px > canvas_px {
        return Err(PvpError::Argument(format!(
            "blob side {side_px} exceeds canvas {canvas_px}"
        )));
    }
    let mut img = CellImage::blank(canvas_px, canvas_px);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let origin = (canvas_px - side_px) / 2;
    let bits = draw_disc(&mut img, origin, origin, side_px, color, &mut rng);
    img.masks.push(ObjectMask {
        object_id: object.id,
        bits,
    });
    Ok(img)
}

/// Replace the hue of every masked pixel with the target's hue, leaving
/// saturation and value untouched. Pixels whose hue already equals the
/// target are copied verbatim; everything off-mask is untouched.
pub fn hue_remap(image: &CellImage, mask: &[bool], target: &ColorSpec) -> Result<CellImage> {
    if mask.len() != image.width * image.height {
        return Err(PvpError::Shape(format!(
            "mask has {} bits, image has {} pixels",
            mask.len(),
            image.width * image.height
        )));
    }
    if target.sat <= 0.0 {
        return Err(PvpError::Argument(format!(
            "achromatic remap target `{}` is unsupported",
            target.name
        )));
    }
    let mut out = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if !mask[y * image.width + x] {
                continue;
            }
            let (r, g, b) = image.pixel(x, y);
            let (h, s, v) = rgb_to_hsv(r, g, b);
            if h == target.hue_deg {
                continue;
            }
            out.set_pixel(x, y, hsv_to_rgb(target.hue_deg, s, v));
        }
    }
    Ok(out)
}

/// Pick the rendered side lengths for a pair: the largest big side whose
/// 25:8 companion still fits the canvas with margins and a baseline strip.
fn size_pair_sides(canvas_px: usize) -> Result<(usize, usize)> {
    let (num, den) = SIZE_RENDER_RATIO;
    let max_side = canvas_px.saturating_sub(4);
    for big in (1..=max_side).rev() {
        let small = ((big * den) as f64 / num as f64).round() as usize;
        if small < 2 {
            continue;
        }
        // left margin 1, gap 2, right margin 1
        if 1 + big + 2 + small + 1 <= canvas_px {
            return Ok((big, small));
        }
    }
    Err(PvpError::Config(format!(
        "canvas {canvas_px}px cannot hold a {num}:{den} pair"
    )))
}

/// Compose two blobs side by side at the 25:8 render ratio, both resting on
/// a dashed black baseline. Object A is drawn left, object B right.
pub fn compose_size_pair(
    obj_a: &ObjectSpec,
    color_a: &ColorSpec,
    obj_b: &ObjectSpec,
    color_b: &ColorSpec,
    bigger: BiggerSide,
    canvas_px: usize,
    seed: u64,
) -> Result<CellImage> {
    if obj_a.id == obj_b.id {
        return Err(PvpError::Argument("size pair needs two distinct objects".into()));
    }
    let (big, small) = size_pair_sides(canvas_px)?;
    let (side_a, side_b) = match bigger {
        BiggerSide::A => (big, small),
        BiggerSide::B => (small, big),
    };
    let baseline_row = canvas_px - 3;

    let mut img = CellImage::blank(canvas_px, canvas_px);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let ax0 = 1;
    let bx0 = canvas_px - 1 - side_b;
    let bits_a = draw_disc(&mut img, ax0, baseline_row - side_a, side_a, color_a, &mut rng);
    let bits_b = draw_disc(&mut img, bx0, baseline_row - side_b, side_b, color_b, &mut rng);
    img.masks.push(ObjectMask {
        object_id: obj_a.id,
        bits: bits_a,
    });
    img.masks.push(ObjectMask {
        object_id: obj_b.id,
        bits: bits_b,
    });

    // Dashed reference line: 4 pixels on, 4 off.
    for x in 0..canvas_px {
        if (x / 4) % 2 == 0 {
            img.set_pixel(x, baseline_row, (0.0, 0.0, 0.0));
        }
    }
    img.baseline_row = Some(baseline_row);
    Ok(img)
}

/// Bounding-box side length of a mask (max of width and height extents).
pub fn mask_bbox_side(width: usize, bits: &[bool]) -> usize {
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (usize::MAX, 0, usize::MAX, 0);
    for (i, &b) in bits.iter().enumerate() {
        if b {
            let (x, y) = (i % width, i / width);
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if min_x == usize::MAX {
        return 0;
    }
    (max_x - min_x + 1).max(max_y - min_y + 1)
}
