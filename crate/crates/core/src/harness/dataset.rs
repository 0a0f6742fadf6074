//! Procedural image datasets with a shifted test split.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::Image;
use crate::error::{Error, Result};

use super::container::{self, NamedTensor, TensorData};
use super::keyed_rng;
use super::shifts::{ShiftSpec, SHIFT_TABLE_VERSION};

pub const DATASET_FORMAT: &str = "ttl-dataset";
pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;

pub const SHAPE_CLASSES: [&str; 8] = [
    "circle",
    "square",
    "triangle",
    "cross",
    "ring",
    "bar-horizontal",
    "bar-vertical",
    "checker",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    #[default]
    Shapes,
    DigitsLike,
}

impl DatasetKind {
    pub fn class_names(self) -> Vec<String> {
        match self {
            DatasetKind::Shapes => SHAPE_CLASSES.iter().map(|s| s.to_string()).collect(),
            DatasetKind::DigitsLike => (0..10).map(|d| d.to_string()).collect(),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetKind::Shapes => "shapes",
            DatasetKind::DigitsLike => "digits-like",
        })
    }
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "shapes" => Ok(DatasetKind::Shapes),
            "digits-like" | "digits_like" | "digits" => Ok(DatasetKind::DigitsLike),
            other => Err(Error::config(format!("unknown dataset kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    #[default]
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn code(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub shift: ShiftSpec,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kind: DatasetKind::Shapes,
            train: 4000,
            val: 500,
            test: 500,
            shift: ShiftSpec::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub kind: DatasetKind,
    pub class_names: Vec<String>,
    /// `[channels, height, width]`.
    pub image_shape: [usize; 3],
    /// Per-channel statistics of the clean training pixels scaled to [0, 1].
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub shift: ShiftSpec,
    pub shift_table_version: u32,
    pub seed: u64,
    pub counts: SplitCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitData {
    /// `n × C × H × W` bytes.
    pub images: Vec<u8>,
    pub labels: Vec<u32>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    /// Generate every split; the shift touches the test split only.
    pub fn generate(spec: &DatasetSpec) -> Result<Self> {
        spec.shift.validate()?;
        let names = spec.kind.class_names();
        let classes = names.len();
        let mut splits = Split::ALL.iter().map(|&split| {
            let n = spec.count(split);
            let mut images = Vec::with_capacity(n * CHANNELS * IMAGE_SIDE * IMAGE_SIDE);
            let mut labels = Vec::with_capacity(n);
            for i in 0..n {
                let label = i % classes;
                let mut rng = keyed_rng(b"ttlimage", spec.seed, split.code(), i as u64);
                let clean = match spec.kind {
                    DatasetKind::Shapes => render_shape(&mut rng, label),
                    DatasetKind::DigitsLike => render_digit(&mut rng, label),
                };
                let pixels = if split == Split::Test {
                    spec.shift.apply(&clean, CHANNELS, IMAGE_SIDE, IMAGE_SIDE, i as u64)?
                } else {
                    clean
                };
                images.extend_from_slice(&pixels);
                labels.push(label as u32);
            }
            Ok(SplitData { images, labels })
        });
        let train = splits.next().expect("three splits")?;
        let val = splits.next().expect("three splits")?;
        let test = splits.next().expect("three splits")?;
        let (mean, std) = channel_stats(&train.images);
        Ok(Dataset {
            meta: DatasetMeta {
                kind: spec.kind,
                class_names: names,
                image_shape: [CHANNELS, IMAGE_SIDE, IMAGE_SIDE],
                mean,
                std,
                shift: spec.shift.clone(),
                shift_table_version: SHIFT_TABLE_VERSION,
                seed: spec.seed,
                counts: SplitCounts {
                    train: spec.train,
                    val: spec.val,
                    test: spec.test,
                },
            },
            train,
            val,
            test,
        })
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.meta.class_names.len()
    }

    fn image_len(&self) -> usize {
        self.meta.image_shape.iter().product()
    }

    /// Raw bytes of image `i`.
    pub fn pixels(&self, split: Split, i: usize) -> &[u8] {
        let n = self.image_len();
        &self.split(split).images[i * n..(i + 1) * n]
    }

    /// Image `i` scaled to [0, 1] and normalized with the manifest statistics.
    pub fn image(&self, split: Split, i: usize) -> Image {
        let [c, h, w] = self.meta.image_shape;
        let plane = h * w;
        let data = self
            .pixels(split, i)
            .iter()
            .enumerate()
            .map(|(k, &p)| {
                let ch = k / plane;
                (f64::from(p) / 255.0 - self.meta.mean[ch]) / self.meta.std[ch]
            })
            .collect();
        Image::new(c, h, w, data).expect("dataset images match their declared shape")
    }

    pub fn images(&self, split: Split) -> Vec<Image> {
        (0..self.split(split).len()).map(|i| self.image(split, i)).collect()
    }

    pub fn write(&self, base: &Path) -> Result<()> {
        let [c, h, w] = self.meta.image_shape;
        let mut tensors = Vec::new();
        for split in Split::ALL {
            let data = self.split(split);
            tensors.push(NamedTensor::new(
                format!("{split}.images"),
                vec![data.len(), c, h, w],
                TensorData::U8(data.images.clone()),
            ));
            tensors.push(NamedTensor::new(
                format!("{split}.labels"),
                vec![data.len()],
                TensorData::U32(data.labels.clone()),
            ));
        }
        let meta = serde_json::to_value(&self.meta).map_err(|e| Error::config(e.to_string()))?;
        container::write(base, DATASET_FORMAT, &tensors, meta)
    }

    /// Load and validate counts, shapes and label range against the manifest.
    pub fn read(base: &Path) -> Result<Self> {
        let c = container::read(base, DATASET_FORMAT)?;
        let path = container::manifest_path(base);
        let bad = |detail: String| Error::Format {
            path: path.clone(),
            detail,
        };
        let meta: DatasetMeta = serde_json::from_value(c.manifest.metadata.clone()).map_err(|e| bad(e.to_string()))?;
        let [ch, h, w] = meta.image_shape;
        if meta.mean.len() != ch || meta.std.len() != ch || meta.std.iter().any(|&s| !(s > 0.0)) {
            return Err(bad("normalization statistics do not match the channel count".into()));
        }
        let classes = meta.class_names.len() as u32;
        let load = |split: Split, expected: usize| -> Result<SplitData> {
            let images = c.get(&format!("{split}.images"), &path)?;
            let labels = c.get(&format!("{split}.labels"), &path)?;
            if images.shape != [expected, ch, h, w] || labels.shape != [expected] {
                return Err(bad(format!("{split} split disagrees with the declared counts")));
            }
            let (TensorData::U8(images), TensorData::U32(labels)) = (&images.data, &labels.data) else {
                return Err(bad(format!("{split} split has the wrong dtypes")));
            };
            if let Some(l) = labels.iter().find(|&&l| l >= classes) {
                return Err(bad(format!("{split} label {l} outside [0, {classes})")));
            }
            Ok(SplitData {
                images: images.clone(),
                labels: labels.clone(),
            })
        };
        let train = load(Split::Train, meta.counts.train)?;
        let val = load(Split::Val, meta.counts.val)?;
        let test = load(Split::Test, meta.counts.test)?;
        Ok(Dataset { meta, train, val, test })
    }
}

fn channel_stats(images: &[u8]) -> (Vec<f64>, Vec<f64>) {
    let plane = IMAGE_SIDE * IMAGE_SIDE;
    let mut sum = [0.0f64; CHANNELS];
    let mut sq = [0.0f64; CHANNELS];
    let mut count = 0usize;
    for img in images.chunks_exact(CHANNELS * plane) {
        for (ch, px) in img.chunks_exact(plane).enumerate() {
            for &p in px {
                let v = f64::from(p) / 255.0;
                sum[ch] += v;
                sq[ch] += v * v;
            }
        }
        count += plane;
    }
    if count == 0 {
        return (vec![0.5; CHANNELS], vec![0.25; CHANNELS]);
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(1e-6).sqrt())
        .collect();
    (mean, std)
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

/// Background and foreground colors with at least 60 levels of luminance
/// contrast.
fn colors(rng: &mut impl Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let bg = [0; 3].map(|_: i32| rng.gen_range(0.0..255.0));
        let fg = [0; 3].map(|_: i32| rng.gen_range(0.0..255.0));
        if (luminance(bg) - luminance(fg)).abs() >= 60.0 {
            return (bg, fg);
        }
    }
}

/// Rasterize a coverage predicate with 2×2 supersampling.
fn rasterize(bg: [f64; 3], fg: [f64; 3], inside: impl Fn(f64, f64) -> bool) -> Vec<u8> {
    let mut out = vec![0u8; CHANNELS * IMAGE_SIDE * IMAGE_SIDE];
    for y in 0..IMAGE_SIDE {
        for x in 0..IMAGE_SIDE {
            let mut hits = 0;
            for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                if inside(x as f64 + ox, y as f64 + oy) {
                    hits += 1;
                }
            }
            let a = f64::from(hits) / 4.0;
            for ch in 0..CHANNELS {
                let v = bg[ch] * (1.0 - a) + fg[ch] * a;
                out[(ch * IMAGE_SIDE + y) * IMAGE_SIDE + x] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

fn render_shape(rng: &mut impl Rng, class: usize) -> Vec<u8> {
    let (bg, fg) = colors(rng);
    let cx = rng.gen_range(11.0..21.0);
    let cy = rng.gen_range(11.0..21.0);
    let s: f64 = rng.gen_range(6.0..10.0);
    let thick = (0.3 * s).max(1.5);
    rasterize(bg, fg, move |px, py| {
        let (u, v) = (px - cx, py - cy);
        let r2 = u * u + v * v;
        match class {
            0 => r2 <= s * s,
            1 => u.abs() <= 0.8 * s && v.abs() <= 0.8 * s,
            2 => v >= -s && v <= 0.8 * s && u.abs() <= (v + s) / 1.8,
            3 => (u.abs() <= thick && v.abs() <= s) || (v.abs() <= thick && u.abs() <= s),
            4 => r2 <= s * s && r2 >= (0.55 * s) * (0.55 * s),
            5 => u.abs() <= 1.3 * s && v.abs() <= thick,
            6 => v.abs() <= 1.3 * s && u.abs() <= thick,
            _ => {
                let cell = s / 2.0;
                u.abs() <= s && v.abs() <= s && (((u + s) / cell).floor() as i64 + ((v + s) / cell).floor() as i64) % 2 == 0
            }
        }
    })
}

/// Seven-segment glyphs: segments a (top), b, c, d (bottom), e, f, g (middle).
const DIGIT_SEGMENTS: [[bool; 7]; 10] = [
    [true, true, true, true, true, true, false],
    [false, true, true, false, false, false, false],
    [true, true, false, true, true, false, true],
    [true, true, true, true, false, false, true],
    [false, true, true, false, false, true, true],
    [true, false, true, true, false, true, true],
    [true, false, true, true, true, true, true],
    [true, true, true, false, false, false, false],
    [true, true, true, true, true, true, true],
    [true, true, true, true, false, true, true],
];

fn render_digit(rng: &mut impl Rng, digit: usize) -> Vec<u8> {
    let (bg, fg) = colors(rng);
    let h: f64 = rng.gen_range(16.0..24.0);
    let w = 0.6 * h;
    let t: f64 = rng.gen_range(2.0..3.5);
    let x0 = rng.gen_range(2.0..(30.0 - w));
    let y0 = rng.gen_range(2.0..(30.0 - h));
    let seg = DIGIT_SEGMENTS[digit];
    let mid = y0 + h / 2.0;
    rasterize(bg, fg, move |px, py| {
        let in_x = px >= x0 && px <= x0 + w;
        let in_y = py >= y0 && py <= y0 + h;
        let horiz = |yc: f64| in_x && (py - yc).abs() <= t / 2.0;
        let left = px >= x0 && px <= x0 + t;
        let right = px >= x0 + w - t && px <= x0 + w;
        let upper = in_y && py <= mid;
        let lower = in_y && py >= mid;
        (seg[0] && horiz(y0 + t / 2.0))
            || (seg[1] && right && upper)
            || (seg[2] && right && lower)
            || (seg[3] && horiz(y0 + h - t / 2.0))
            || (seg[4] && left && lower)
            || (seg[5] && left && upper)
            || (seg[6] && horiz(mid))
    })
}
