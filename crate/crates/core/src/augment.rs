//! Seeded random-resized-crop and horizontal-flip views of a test image.
//!
//! View `i` of sample `s` draws from its own ChaCha stream keyed by
//! `(seed, s, i)`, so batches do not depend on evaluation order.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `C×H×W` row-major float image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels * height * width != data.len() {
            return Err(Error::shape(
                "image",
                format!("{channels}×{height}×{width} needs {} values, got {}", channels * height * width, data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub num_views: usize,
    /// Crop area as a fraction of the image area.
    pub crop_scale: (f64, f64),
    /// Crop width / height.
    pub crop_aspect: (f64, f64),
    pub flip_probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            num_views: 64,
            crop_scale: (0.5, 1.0),
            crop_aspect: (0.75, 4.0 / 3.0),
            flip_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if self.num_views == 0 {
            return Err(Error::config("num_views must be at least 1"));
        }
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("crop scale ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1")));
        }
        let (alo, ahi) = self.crop_aspect;
        if !(alo > 0.0 && alo <= ahi && ahi.is_finite()) {
            return Err(Error::config(format!("crop aspect ({alo}, {ahi}) is invalid")));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::config("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Where a view came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropParams {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flipped: bool,
    pub is_original: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub views: Vec<Image>,
    pub params: Vec<CropParams>,
}

impl ViewBatch {
    pub fn len(&self) -> usize {
        self.views.len()
    }

    pub fn is_empty(&self) -> bool {
        self.views.is_empty()
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.views.iter().map(|v| v.data.as_slice()).collect()
    }
}

/// The RNG stream for view `view` of sample `sample`.
pub fn view_rng(seed: u64, sample: u64, view: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&sample.to_le_bytes());
    key[16..24].copy_from_slice(&view.to_le_bytes());
    key[24..].copy_from_slice(b"ttl-view");
    ChaCha8Rng::from_seed(key)
}

/// Sample a crop rectangle: up to ten attempts at a random area fraction in
/// `crop_scale` and a log-uniform aspect ratio in `crop_aspect`; if none
/// fits, a centered crop of area `hi·H·W` with the image's own aspect.
pub fn sample_crop(rng: &mut impl Rng, height: usize, width: usize, cfg: &AugmentConfig) -> (usize, usize, usize, usize) {
    let area = (height * width) as f64;
    let (lo, hi) = cfg.crop_scale;
    let (log_lo, log_hi) = (cfg.crop_aspect.0.ln(), cfg.crop_aspect.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, lo, hi);
        let ratio = uniform(rng, log_lo, log_hi).exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if (1..=width).contains(&w) && (1..=height).contains(&h) {
            let top = rng.gen_range(0..=height - h);
            let left = rng.gen_range(0..=width - w);
            return (top, left, h, w);
        }
    }
    let h = ((height as f64 * hi.sqrt()).round() as usize).clamp(1, height);
    let w = ((width as f64 * hi.sqrt()).round() as usize).clamp(1, width);
    ((height - h) / 2, (width - w) / 2, h, w)
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Bilinear resize of the crop `(top, left, h, w)` to `out_h × out_w`.
///
/// Half-pixel centers (corners not aligned): output pixel `o` samples the
/// crop at `s = (o + 0.5)·(in/out) − 0.5`, clamped below at 0. With
/// `i0 = floor(s)`, `i1 = min(i0 + 1, in − 1)` and `t = s − i0`, the value
/// is `(1−t)·v[i0] + t·v[i1]`, applied along rows then columns. When the
/// crop already has the output size every sample lands on a pixel center
/// and the copy is exact.
pub fn resize_crop(img: &Image, crop: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Image {
    let (top, left, h, w) = crop;
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut data = Vec::with_capacity(img.channels * out_h * out_w);
    for c in 0..img.channels {
        for &(y0, y1, ty) in &ys {
            for &(x0, x1, tx) in &xs {
                let v00 = img.at(c, top + y0, left + x0);
                let v01 = img.at(c, top + y0, left + x1);
                let v10 = img.at(c, top + y1, left + x0);
                let v11 = img.at(c, top + y1, left + x1);
                let r0 = if tx == 0.0 { v00 } else { (1.0 - tx) * v00 + tx * v01 };
                let r1 = if tx == 0.0 { v10 } else { (1.0 - tx) * v10 + tx * v11 };
                data.push(if ty == 0.0 { r0 } else { (1.0 - ty) * r0 + ty * r1 });
            }
        }
    }
    Image {
        channels: img.channels,
        height: out_h,
        width: out_w,
        data,
    }
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut data = Vec::with_capacity(img.data.len());
    for c in 0..img.channels {
        for y in 0..img.height {
            for x in (0..img.width).rev() {
                data.push(img.at(c, y, x));
            }
        }
    }
    Image {
        data,
        ..img.clone()
    }
}

/// One augmented view drawn from the stream `(cfg.seed, sample, view)`.
pub fn augment_view(image: &Image, cfg: &AugmentConfig, sample: u64, view: u64) -> (Image, CropParams) {
    let mut rng = view_rng(cfg.seed, sample, view);
    let (top, left, h, w) = sample_crop(&mut rng, image.height, image.width, cfg);
    let flipped = rng.gen::<f64>() < cfg.flip_probability;
    let mut out = resize_crop(image, (top, left, h, w), image.height, image.width);
    if flipped {
        out = flip_horizontal(&out);
    }
    let params = CropParams {
        top,
        left,
        height: h,
        width: w,
        flipped,
        is_original: false,
    };
    (out, params)
}

/// The original image followed by `N − 1` independent augmented views.
/// `min_side` is the smallest accepted image side (the encoder's patch size).
pub fn make_views(image: &Image, cfg: &AugmentConfig, sample: u64, min_side: usize) -> Result<ViewBatch> {
    cfg.validate()?;
    if image.height < min_side.max(1) || image.width < min_side.max(1) || image.channels == 0 {
        return Err(Error::shape(
            "make_views",
            format!(
                "image {}×{}×{} is smaller than {min_side} pixels per side",
                image.channels, image.height, image.width
            ),
        ));
    }
    let mut views = Vec::with_capacity(cfg.num_views);
    let mut params = Vec::with_capacity(cfg.num_views);
    views.push(image.clone());
    params.push(CropParams {
        top: 0,
        left: 0,
        height: image.height,
        width: image.width,
        flipped: false,
        is_original: true,
    });
    for v in 1..cfg.num_views {
        let (img, p) = augment_view(image, cfg, sample, v as u64);
        views.push(img);
        params.push(p);
    }
    Ok(ViewBatch { views, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let data = (0..3 * h * w).map(|i| (i % 97) as f64 * 0.1).collect();
        Image::new(3, h, w, data).unwrap()
    }

    #[test]
    fn single_view_is_the_original() {
        let img = ramp(32, 32);
        let cfg = AugmentConfig {
            num_views: 1,
            ..AugmentConfig::default()
        };
        let b = make_views(&img, &cfg, 0, 8).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.views[0], img);
        assert!(b.params[0].is_original);
    }

    #[test]
    fn same_seed_same_batch() {
        let img = ramp(32, 32);
        let cfg = AugmentConfig::default();
        let a = make_views(&img, &cfg, 5, 8).unwrap();
        let b = make_views(&img, &cfg, 5, 8).unwrap();
        assert_eq!(a, b);
        let c = make_views(&img, &cfg, 6, 8).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn identity_transform_reproduces_original() {
        let img = ramp(32, 32);
        let cfg = AugmentConfig {
            num_views: 8,
            crop_scale: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_probability: 0.0,
            seed: 9,
        };
        let b = make_views(&img, &cfg, 3, 8).unwrap();
        for v in &b.views {
            assert_eq!(v, &img);
        }
    }

    #[test]
    fn degenerate_images_are_rejected() {
        let img = ramp(4, 32);
        assert!(make_views(&img, &AugmentConfig::default(), 0, 8).is_err());
    }

    #[test]
    fn empirical_flip_rate() {
        let cfg = AugmentConfig::default();
        let flips = (0..10_000u64)
            .filter(|&i| {
                let mut rng = view_rng(cfg.seed, i, 1);
                let _ = sample_crop(&mut rng, 32, 32, &cfg);
                rng.gen::<f64>() < cfg.flip_probability
            })
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((rate - 0.5).abs() <= 0.02, "flip rate {rate}");
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(5, 7);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        assert_eq!(flip_horizontal(&img).at(1, 2, 0), img.at(1, 2, 6));
    }

    #[test]
    fn bilinear_upsample_of_two_pixels() {
        // 1×1×2 row [0, 1] resized to width 4: samples at -0.25→0, 0.25, 0.75, 1.25→1.
        let img = Image::new(1, 1, 2, vec![0.0, 1.0]).unwrap();
        let out = resize_crop(&img, (0, 0, 1, 2), 1, 4);
        assert_eq!(out.data, vec![0.0, 0.25, 0.75, 1.0]);
    }

    proptest! {
        #[test]
        fn crops_stay_in_bounds_and_near_requested_area(
            seed in any::<u64>(),
            h in 8usize..64,
            w in 8usize..64,
            lo in 0.1f64..1.0,
        ) {
            let cfg = AugmentConfig { crop_scale: (lo, 1.0), ..AugmentConfig::default() };
            let mut rng = view_rng(seed, 0, 1);
            let (top, left, ch, cw) = sample_crop(&mut rng, h, w, &cfg);
            prop_assert!(ch >= 1 && cw >= 1);
            prop_assert!(top + ch <= h && left + cw <= w);
            let area = (ch * cw) as f64;
            // Rounding each side by up to half a pixel.
            let slack = 0.5 * (ch + cw) as f64 + 0.25;
            prop_assert!(area >= lo * (h * w) as f64 - slack);
            prop_assert!(area <= (h * w) as f64);
        }
    }
}
