//! Corruption transforms and their committed severity tables.
//!
//! Each transform is a pure function of an image plus explicit parameters;
//! `corrupt` looks the parameters up in the severity tables shipped as data
//! (`severity_tables.json`) and dispatches. All outputs are clipped to
//! [0, 1]. Parameters that make a transform the mathematical identity
//! (sigma 0, factor 1, delta 0, radius 0, block <= 1) return the input
//! unchanged, bit for bit.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The implemented corruption family: two noise kinds, one blur, two
/// photometric shifts, one digital artifact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    BoxBlur,
    Contrast,
    Brightness,
    Pixelate,
}

pub const ALL_CORRUPTIONS: [CorruptionKind; 6] = [
    CorruptionKind::GaussianNoise,
    CorruptionKind::ImpulseNoise,
    CorruptionKind::BoxBlur,
    CorruptionKind::Contrast,
    CorruptionKind::Brightness,
    CorruptionKind::Pixelate,
];

impl CorruptionKind {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Pixelate => "pixelate",
        }
    }
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_CORRUPTIONS
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown corruption kind {s:?}")))
    }
}

/// One corruption instance: kind, severity 1..=5, noise seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub seed: u64,
}

/// Severity-indexed parameters, parsed once from the committed table file.
/// Magnitudes are non-decreasing in severity; contrast is stored as a
/// strength (factor = 1 - strength) so that rule holds for it too.
#[derive(Debug, Clone)]
pub struct SeverityTables {
    pub gaussian_sigma: [f32; 5],
    pub impulse_fraction: [f32; 5],
    pub blur_radius: [usize; 5],
    pub contrast_strength: [f32; 5],
    pub brightness_delta: [f32; 5],
    pub pixelate_block: [usize; 5],
}

#[derive(Deserialize)]
struct RawTables {
    gaussian_noise: [f64; 5],
    impulse_noise: [f64; 5],
    box_blur: [f64; 5],
    contrast: [f64; 5],
    brightness: [f64; 5],
    pixelate: [f64; 5],
}

const TABLE_SOURCE: &str = include_str!("severity_tables.json");

fn to_f32(v: [f64; 5]) -> [f32; 5] {
    v.map(|x| x as f32)
}

fn to_usize(name: &str, v: [f64; 5]) -> [usize; 5] {
    v.map(|x| {
        assert!(
            x.fract() == 0.0 && x >= 0.0,
            "severity table {name} must hold non-negative integers"
        );
        x as usize
    })
}

/// The committed severity tables. Panics only if the committed data file is
/// itself malformed, which the table tests rule out.
pub fn severity_tables() -> &'static SeverityTables {
    static TABLES: OnceLock<SeverityTables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let raw: RawTables =
            serde_json::from_str(TABLE_SOURCE).expect("severity_tables.json is well-formed");
        let t = SeverityTables {
            gaussian_sigma: to_f32(raw.gaussian_noise),
            impulse_fraction: to_f32(raw.impulse_noise),
            blur_radius: to_usize("box_blur", raw.box_blur),
            contrast_strength: to_f32(raw.contrast),
            brightness_delta: to_f32(raw.brightness),
            pixelate_block: to_usize("pixelate", raw.pixelate),
        };
        for w in t.gaussian_sigma.windows(2) {
            assert!(w[0] <= w[1], "gaussian sigma not monotone");
        }
        t
    })
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    if image.rank() != 3 {
        return Err(Error::shape(format!(
            "corruptions take one [C, H, W] image, got {:?}",
            image.shape()
        )));
    }
    Ok((image.shape()[0], image.shape()[1], image.shape()[2]))
}

fn clipped(data: Vec<f32>, shape: Vec<usize>) -> Tensor {
    Tensor::from_raw(shape, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Adds iid N(0, sigma^2) noise to every channel value.
pub fn gaussian_noise(image: &Tensor, sigma: f32, seed: u64) -> Result<Tensor> {
    check_image(image)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    if sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .map(|&v| {
            // Box-Muller standard normal.
            let u1: f32 = rng.gen_range(f32::EPSILON..1.0);
            let u2: f32 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f32::consts::TAU * u2).cos();
            v + sigma * z
        })
        .collect();
    Ok(clipped(data, image.shape().to_vec()))
}

/// Salt-and-pepper noise: each channel value is independently forced to 0 or
/// 1 with probability `fraction`.
pub fn impulse_noise(image: &Tensor, fraction: f32, seed: u64) -> Result<Tensor> {
    check_image(image)?;
    if fraction == 0.0 {
        return Ok(image.clone());
    }
    if !(0.0..=1.0).contains(&fraction) {
        return Err(Error::Config(format!(
            "impulse fraction must be in [0, 1], got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = image
        .data()
        .iter()
        .map(|&v| {
            if rng.gen_range(0.0f32..1.0) < fraction {
                if rng.gen_range(0.0f32..1.0) < 0.5 {
                    0.0
                } else {
                    1.0
                }
            } else {
                v
            }
        })
        .collect();
    Ok(clipped(data, image.shape().to_vec()))
}

/// Mean filter over a (2*radius+1)^2 window with clamp-to-edge padding.
pub fn box_blur(image: &Tensor, radius: usize) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    if radius == 0 {
        return Ok(image.clone());
    }
    let r = radius as isize;
    let norm = 1.0 / ((2 * radius + 1) * (2 * radius + 1)) as f32;
    let mut out = vec![0.0f32; c * h * w];
    let src = image.data();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f32;
                for dy in -r..=r {
                    let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -r..=r {
                        let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[yy * w + xx];
                    }
                }
                out[ch * h * w + y as usize * w + x as usize] = acc * norm;
            }
        }
    }
    Ok(clipped(out, image.shape().to_vec()))
}

/// Scales deviations from the global image mean: `y = (x - m) * factor + m`.
pub fn contrast(image: &Tensor, factor: f32) -> Result<Tensor> {
    check_image(image)?;
    if factor == 1.0 {
        return Ok(image.clone());
    }
    if factor < 0.0 {
        return Err(Error::Config(format!(
            "contrast factor must be >= 0, got {factor}"
        )));
    }
    let m = (image.data().iter().map(|&v| v as f64).sum::<f64>() / image.len() as f64) as f32;
    let data = image.data().iter().map(|&v| (v - m) * factor + m).collect();
    Ok(clipped(data, image.shape().to_vec()))
}

/// Uniform brightness shift.
pub fn brightness(image: &Tensor, delta: f32) -> Result<Tensor> {
    check_image(image)?;
    if delta == 0.0 {
        return Ok(image.clone());
    }
    let data = image.data().iter().map(|&v| v + delta).collect();
    Ok(clipped(data, image.shape().to_vec()))
}

/// Nearest-neighbor downsample by `block` followed by nearest-neighbor
/// upsample back to the original size: every block of pixels collapses to
/// the sample at its center.
pub fn pixelate(image: &Tensor, block: usize) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    if block <= 1 {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = ((y / block) * block + block / 2).min(h - 1);
            for x in 0..w {
                let sx = ((x / block) * block + block / 2).min(w - 1);
                out[ch * h * w + y * w + x] = plane[sy * w + sx];
            }
        }
    }
    Ok(Tensor::from_raw(image.shape().to_vec(), out))
}

/// Applies the corruption described by `spec`, looking the transform
/// parameter up in the committed severity tables.
pub fn corrupt(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::Config(format!(
            "severity must be 1..=5, got {}",
            spec.severity
        )));
    }
    let t = severity_tables();
    let s = (spec.severity - 1) as usize;
    match spec.kind {
        CorruptionKind::GaussianNoise => gaussian_noise(image, t.gaussian_sigma[s], spec.seed),
        CorruptionKind::ImpulseNoise => impulse_noise(image, t.impulse_fraction[s], spec.seed),
        CorruptionKind::BoxBlur => box_blur(image, t.blur_radius[s]),
        CorruptionKind::Contrast => contrast(image, 1.0 - t.contrast_strength[s]),
        CorruptionKind::Brightness => brightness(image, t.brightness_delta[s]),
        CorruptionKind::Pixelate => pixelate(image, t.pixelate_block[s]),
    }
}

/// Corrupts every image of a `[B, C, H, W]` batch, deriving a distinct
/// per-image noise seed from `spec.seed` and the image index so the noise
/// pattern differs across images but not across runs.
pub fn corrupt_batch(images: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    if images.rank() != 4 {
        return Err(Error::shape(format!(
            "corrupt_batch takes [B, C, H, W], got {:?}",
            images.shape()
        )));
    }
    let b = images.shape()[0];
    let per = images.len() / b;
    let mut out = Vec::with_capacity(images.len());
    for i in 0..b {
        let img = Tensor::from_raw(
            images.shape()[1..].to_vec(),
            images.data()[i * per..(i + 1) * per].to_vec(),
        );
        let seed = spec
            .seed
            .wrapping_add((i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let done = corrupt(&img, &CorruptionSpec { seed, ..spec.clone() })?;
        out.extend_from_slice(done.data());
    }
    Ok(Tensor::from_raw(images.shape().to_vec(), out))
}
