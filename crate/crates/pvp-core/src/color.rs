//! Palette colors and RGB/HSV conversion.
//!
//! Pixels are continuous RGB triples in `[0,1]`. Conversions run in `f64`
//! so hue edits preserve saturation and value far below the 1e-6 contract.

use serde::{Deserialize, Serialize};

use crate::error::{PvpError, Result};

/// A named palette color, defined in HSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColorSpec {
    pub name: String,
    /// Hue angle in degrees, `[0, 360)`.
    pub hue_deg: f64,
    /// Saturation in `(0, 1]`. Achromatic palette entries are not allowed.
    pub sat: f64,
    /// Value in `(0, 1]`.
    pub val: f64,
}

impl ColorSpec {
    pub fn new(name: &str, hue_deg: f64, sat: f64, val: f64) -> Self {
        Self {
            name: name.to_string(),
            hue_deg,
            sat,
            val,
        }
    }
}

/// Minimum circular hue separation (degrees) between any two palette
/// entries, and between a canonical color and its counterfactual.
pub const MIN_HUE_SEPARATION_DEG: f64 = 30.0;

/// Default palette: six hues on exact 60-degree sectors.
///
/// Sector-aligned hues survive the RGB round trip bit-exactly, which keeps
/// the hue-remap identity fast path honest.
pub fn default_palette() -> Vec<ColorSpec> {
    vec![
        ColorSpec::new("red", 0.0, 0.90, 0.80),
        ColorSpec::new("yellow", 60.0, 0.85, 0.85),
        ColorSpec::new("green", 120.0, 0.80, 0.70),
        ColorSpec::new("cyan", 180.0, 0.75, 0.80),
        ColorSpec::new("blue", 240.0, 0.85, 0.75),
        ColorSpec::new("magenta", 300.0, 0.80, 0.80),
    ]
}

/// Validate palette invariants: at least `min_len` entries, unique hues with
/// pairwise circular distance >= 30 degrees, chromatic (sat > 0), in-range.
pub fn validate_palette(palette: &[ColorSpec], min_len: usize) -> Result<()> {
    if palette.len() < min_len {
        return Err(PvpError::Config(format!(
            "palette has {} entries, need at least {min_len}",
            palette.len()
        )));
    }
    for c in palette {
        if !(0.0..360.0).contains(&c.hue_deg) {
            return Err(PvpError::Config(format!(
                "palette color `{}` hue {} outside [0, 360)",
                c.name, c.hue_deg
            )));
        }
        if c.sat <= 0.0 || c.sat > 1.0 || c.val <= 0.0 || c.val > 1.0 {
            return Err(PvpError::Config(format!(
                "palette color `{}` must have sat, val in (0, 1]",
                c.name
            )));
        }
    }
    for i in 0..palette.len() {
        for j in (i + 1)..palette.len() {
            let d = circular_hue_distance(palette[i].hue_deg, palette[j].hue_deg);
            if d < MIN_HUE_SEPARATION_DEG {
                return Err(PvpError::Config(format!(
                    "palette colors `{}` and `{}` are only {d:.1} degrees apart",
                    palette[i].name, palette[j].name
                )));
            }
        }
    }
    Ok(())
}

/// Circular distance between two hue angles, in `[0, 180]`.
pub fn circular_hue_distance(a_deg: f64, b_deg: f64) -> f64 {
    let d = (a_deg - b_deg).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// RGB (each in `[0,1]`) to HSV (hue in degrees).
///
/// Channel comparisons are checked in r, g, b order so that ties resolve
/// deterministically; hues on exact 60-degree sectors round-trip exactly.
pub fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let range = max - min;
    let v = max;
    if max == 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let s = range / max;
    if range == 0.0 {
        return (0.0, 0.0, v);
    }
    let mut h = if r == max {
        60.0 * ((g - b) / range)
    } else if g == max {
        60.0 * ((b - r) / range + 2.0)
    } else {
        60.0 * ((r - g) / range + 4.0)
    };
    if h < 0.0 {
        h += 360.0;
    }
    (h, s, v)
}

/// HSV (hue in degrees, `[0, 360)` after wrapping) to RGB in `[0,1]`.
pub fn hsv_to_rgb(h_deg: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h = h_deg.rem_euclid(360.0) / 60.0;
    let sector = h.floor() as i64 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}
