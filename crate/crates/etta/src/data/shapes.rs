//! Procedural renderer for the ten shape classes.
//!
//! Every sample is fully described by a `SampleSpec`; rendering is a pure
//! function of the spec, so identical specs give identical image bytes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NUM_SHAPE_CLASSES: usize = 10;

/// Human-readable class names, index-aligned with the label ids.
pub const CLASS_NAMES: [&str; NUM_SHAPE_CLASSES] = [
    "disk", "ring", "square", "frame", "triangle", "cross", "diamond", "hbars", "vbars",
    "checker",
];

/// Complete geometric and color description of one rendered sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSpec {
    /// Shape class, `0..NUM_SHAPE_CLASSES`.
    pub class: u32,
    /// Shape center in normalized image coordinates.
    pub cx: f32,
    pub cy: f32,
    /// Shape half-extent in normalized image units.
    pub scale: f32,
    /// Foreground hue in [0, 1).
    pub hue: f32,
    /// Background hue in [0, 1).
    pub bg_hue: f32,
    /// Background value (brightness); kept well below the foreground's.
    pub bg_value: f32,
    /// Seed of the per-pixel dither noise.
    pub seed: u64,
}

impl SampleSpec {
    /// Draws a random spec for `class`. Ranges keep the shape fully inside
    /// the frame and guarantee foreground/background brightness contrast.
    pub fn sample(class: u32, rng: &mut ChaCha8Rng) -> SampleSpec {
        SampleSpec {
            class,
            cx: rng.gen_range(0.32..0.68),
            cy: rng.gen_range(0.32..0.68),
            scale: rng.gen_range(0.16..0.30),
            hue: rng.gen_range(0.0..1.0),
            bg_hue: rng.gen_range(0.0..1.0),
            bg_value: rng.gen_range(0.15..0.42),
            seed: rng.gen(),
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h = (h.rem_euclid(1.0)) * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Shape membership test in shape-local coordinates, where the shape's
/// bounding box is `[-1, 1]^2`.
fn inside(class: u32, u: f32, v: f32) -> bool {
    let (au, av) = (u.abs(), v.abs());
    match class {
        // disk
        0 => u * u + v * v <= 1.0,
        // ring
        1 => {
            let r2 = u * u + v * v;
            r2 <= 1.0 && r2 >= 0.55 * 0.55
        }
        // square
        2 => au.max(av) <= 1.0,
        // frame
        3 => {
            let m = au.max(av);
            m <= 1.0 && m >= 0.55
        }
        // triangle, apex up: vertices (0,-1), (-1,1), (1,1)
        4 => av <= 1.0 && v >= 2.0 * au - 1.0,
        // cross
        5 => (au <= 0.35 && av <= 1.0) || (av <= 0.35 && au <= 1.0),
        // diamond
        6 => au + av <= 1.0,
        // horizontal bars: the outer and inner third of the box rows
        7 => {
            if au.max(av) > 1.0 {
                return false;
            }
            let band = (((v + 1.0) * 1.5) as i32).min(2);
            band != 1
        }
        // vertical bars
        8 => {
            if au.max(av) > 1.0 {
                return false;
            }
            let band = (((u + 1.0) * 1.5) as i32).min(2);
            band != 1
        }
        // checker: opposite quadrants of the box
        9 => {
            if au.max(av) > 1.0 {
                return false;
            }
            let qu = if u < 0.0 { 0 } else { 1 };
            let qv = if v < 0.0 { 0 } else { 1 };
            qu == qv
        }
        _ => false,
    }
}

/// Renders the spec into a `[3, size, size]` channel-major pixel buffer with
/// values in [0, 1]. Edges are antialiased with a 2x2 supersample; a small
/// seeded dither keeps flat regions from being bit-constant.
pub fn render_sample(spec: &SampleSpec, size: usize) -> Vec<f32> {
    let fg = hsv_to_rgb(spec.hue, 0.85, 0.88);
    let bg = hsv_to_rgb(spec.bg_hue, 0.35, spec.bg_value);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = vec![0.0f32; 3 * size * size];
    let inv = 1.0 / size as f32;
    // Supersample offsets inside one pixel.
    const OFFS: [f32; 2] = [0.25, 0.75];
    for y in 0..size {
        for x in 0..size {
            let mut cover = 0.0f32;
            for oy in OFFS {
                for ox in OFFS {
                    let px = (x as f32 + ox) * inv;
                    let py = (y as f32 + oy) * inv;
                    let u = (px - spec.cx) / spec.scale;
                    let v = (py - spec.cy) / spec.scale;
                    if inside(spec.class, u, v) {
                        cover += 0.25;
                    }
                }
            }
            for c in 0..3 {
                let base = cover * fg[c] + (1.0 - cover) * bg[c];
                let dither = rng.gen_range(-0.015..0.015);
                out[c * size * size + y * size + x] = (base + dither).clamp(0.0, 1.0);
            }
        }
    }
    out
}
