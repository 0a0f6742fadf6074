//! Test-split distribution shifts and their severity tables.
//!
//! The tables are versioned: any change to a value must bump
//! [`SHIFT_TABLE_VERSION`], which is recorded in every dataset manifest.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::keyed_rng;

pub const SHIFT_TABLE_VERSION: u32 = 1;

/// Additive gaussian noise standard deviation, in 8-bit pixel units.
pub const NOISE_STD: [f64; 5] = [8.0, 16.0, 24.0, 36.0, 48.0];
/// Rotation magnitude in degrees; the sign is drawn per image.
pub const ROTATION_DEG: [f64; 5] = [6.0, 12.0, 18.0, 24.0, 30.0];
/// Per-channel offset magnitude in 8-bit pixel units; signs are drawn per
/// image and channel.
pub const CHANNEL_SHIFT: [f64; 5] = [10.0, 20.0, 30.0, 45.0, 60.0];
/// Gaussian blur standard deviation in pixels.
pub const BLUR_SIGMA: [f64; 5] = [0.5, 0.75, 1.0, 1.5, 2.0];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftKind {
    #[default]
    None,
    GaussianNoise,
    Rotation,
    ChannelShift,
    Blur,
}

impl fmt::Display for ShiftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShiftKind::None => "none",
            ShiftKind::GaussianNoise => "gaussian_noise",
            ShiftKind::Rotation => "rotation",
            ShiftKind::ChannelShift => "channel_shift",
            ShiftKind::Blur => "blur",
        })
    }
}

impl FromStr for ShiftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ShiftKind::None),
            "gaussian_noise" | "noise" => Ok(ShiftKind::GaussianNoise),
            "rotation" => Ok(ShiftKind::Rotation),
            "channel_shift" => Ok(ShiftKind::ChannelShift),
            "blur" => Ok(ShiftKind::Blur),
            other => Err(Error::config(format!("unknown shift kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub kind: ShiftKind,
    /// 1 to 5.
    pub severity: u8,
    pub seed: u64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            kind: ShiftKind::None,
            severity: 1,
            seed: 0,
        }
    }
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=5).contains(&self.severity) {
            return Err(Error::config(format!("severity {} outside 1..=5", self.severity)));
        }
        Ok(())
    }

    /// The table value for this kind and severity (0 for `none`).
    pub fn magnitude(&self) -> f64 {
        let i = usize::from(self.severity.clamp(1, 5) - 1);
        match self.kind {
            ShiftKind::None => 0.0,
            ShiftKind::GaussianNoise => NOISE_STD[i],
            ShiftKind::Rotation => ROTATION_DEG[i],
            ShiftKind::ChannelShift => CHANNEL_SHIFT[i],
            ShiftKind::Blur => BLUR_SIGMA[i],
        }
    }

    /// Shift one C×H×W 8-bit image. `sample` keys the random stream.
    pub fn apply(&self, pixels: &[u8], channels: usize, height: usize, width: usize, sample: u64) -> Result<Vec<u8>> {
        self.validate()?;
        if pixels.len() != channels * height * width {
            return Err(Error::shape("shift_apply", "pixel count disagrees with image shape"));
        }
        let mut rng = keyed_rng(b"ttlshift", self.seed, sample, 0);
        let m = self.magnitude();
        let out = match self.kind {
            ShiftKind::None => pixels.to_vec(),
            ShiftKind::GaussianNoise => {
                let normal = Normal::new(0.0, m).map_err(|e| Error::config(e.to_string()))?;
                pixels
                    .iter()
                    .map(|&p| quantize(f64::from(p) + normal.sample(&mut rng)))
                    .collect()
            }
            ShiftKind::ChannelShift => {
                let mut out = Vec::with_capacity(pixels.len());
                for plane in pixels.chunks_exact(height * width) {
                    let offset = if rng.gen::<bool>() { m } else { -m };
                    out.extend(plane.iter().map(|&p| quantize(f64::from(p) + offset)));
                }
                out
            }
            ShiftKind::Rotation => {
                let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                rotate(pixels, channels, height, width, sign * m.to_radians())
            }
            ShiftKind::Blur => blur(pixels, channels, height, width, m),
        };
        Ok(out)
    }
}

fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Rotate about the image center by `theta` radians, bilinear, edge-clamped.
fn rotate(pixels: &[u8], channels: usize, height: usize, width: usize, theta: f64) -> Vec<u8> {
    let (s, c) = theta.sin_cos();
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let mut out = vec![0u8; pixels.len()];
    let sample = |plane: &[u8], y: f64, x: f64| {
        let y = y.clamp(0.0, height as f64 - 1.0);
        let x = x.clamp(0.0, width as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(height - 1), (x0 + 1).min(width - 1));
        let (ty, tx) = (y - y0 as f64, x - x0 as f64);
        let at = |yy: usize, xx: usize| f64::from(plane[yy * width + xx]);
        let top = at(y0, x0) * (1.0 - tx) + at(y0, x1) * tx;
        let bottom = at(y1, x0) * (1.0 - tx) + at(y1, x1) * tx;
        top * (1.0 - ty) + bottom * ty
    };
    for ch in 0..channels {
        let plane = &pixels[ch * height * width..(ch + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let sy = c * dy - s * dx + cy;
                let sx = s * dy + c * dx + cx;
                out[(ch * height + y) * width + x] = quantize(sample(plane, sy, sx));
            }
        }
    }
    out
}

/// Separable gaussian blur with radius `⌈3σ⌉`, edge-clamped.
fn blur(pixels: &[u8], channels: usize, height: usize, width: usize, sigma: f64) -> Vec<u8> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let mut out = vec![0u8; pixels.len()];
    let mut tmp = vec![0.0; height * width];
    for ch in 0..channels {
        let plane = &pixels[ch * height * width..(ch + 1) * height * width];
        for y in 0..height {
            for x in 0..width {
                tmp[y * width + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let xx = (x as isize + k as isize - radius).clamp(0, width as isize - 1) as usize;
                        w * f64::from(plane[y * width + xx])
                    })
                    .sum();
            }
        }
        for y in 0..height {
            for x in 0..width {
                let v: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let yy = (y as isize + k as isize - radius).clamp(0, height as isize - 1) as usize;
                        w * tmp[yy * width + x]
                    })
                    .sum();
                out[(ch * height + y) * width + x] = quantize(v);
            }
        }
    }
    out
}
