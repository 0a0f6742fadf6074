//! Evaluation runs and their CSV reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::{evaluate_stream, AdaptConfig, Episode, Method, Sample, StreamResult};
use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::lora::LoraSpec;
use crate::objective::{octile_report, OctileReport, WeightedLossConfig};

use super::dataset::{Dataset, Split};
use super::model::Model;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub lora: LoraSpec,
    pub augment: AugmentConfig,
    pub loss: WeightedLossConfig,
    pub adapt: AdaptConfig,
    pub split: Split,
    /// Evaluate only the first `limit` samples of the split.
    pub limit: Option<usize>,
}

impl EvalConfig {
    /// Seed both the adapter initialization and the view stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lora.seed = seed;
        self.augment.seed = seed;
        self
    }

    pub fn with_method(mut self, method: Method) -> Self {
        self.adapt.method = method;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: Method,
    pub config_hash: String,
    pub top1: f64,
    pub top1_pre: f64,
    pub mean_pre_entropy: f64,
    pub mean_post_entropy: f64,
    pub episodes: usize,
    pub fallbacks: usize,
}

pub const SUMMARY_HEADER: [&str; 8] = [
    "method",
    "config_hash",
    "top1",
    "top1_pre",
    "mean_pre_entropy",
    "mean_post_entropy",
    "episodes",
    "fallbacks",
];

impl SummaryRow {
    pub fn record(&self) -> Vec<String> {
        vec![
            self.method.to_string(),
            self.config_hash.clone(),
            self.top1.to_string(),
            self.top1_pre.to_string(),
            self.mean_pre_entropy.to_string(),
            self.mean_post_entropy.to_string(),
            self.episodes.to_string(),
            self.fallbacks.to_string(),
        ]
    }
}

pub const SAMPLE_HEADER: [&str; 10] = [
    "sample",
    "label",
    "pre_class",
    "post_class",
    "pre_entropy",
    "post_entropy",
    "pre_correct",
    "post_correct",
    "fallback",
    "first_loss",
];

pub const OCTILE_HEADER: [&str; 6] = ["octile", "count", "min_entropy", "max_entropy", "mean_entropy", "accuracy"];

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub summary: SummaryRow,
    pub labels: Vec<usize>,
    pub stream: StreamResult,
}

impl EvalOutcome {
    pub fn sample_records(&self) -> Vec<Vec<String>> {
        self.stream
            .reports
            .iter()
            .zip(&self.labels)
            .map(|(r, &label)| {
                vec![
                    r.sample.to_string(),
                    label.to_string(),
                    r.pre_class().to_string(),
                    r.post_class().to_string(),
                    r.pre.entropy.to_string(),
                    r.post.entropy.to_string(),
                    u8::from(r.pre_class() == label).to_string(),
                    u8::from(r.post_class() == label).to_string(),
                    u8::from(r.fallback).to_string(),
                    r.losses.first().map(f64::to_string).unwrap_or_default(),
                ]
            })
            .collect()
    }

    /// Octiles of the pre-adaptation entropy against pre-adaptation accuracy.
    pub fn octiles(&self) -> Result<OctileReport> {
        octile_report(&self.stream.octile_records)
    }
}

pub fn octile_records(report: &OctileReport) -> Vec<Vec<String>> {
    report
        .bins
        .iter()
        .map(|b| {
            vec![
                b.index.to_string(),
                b.count.to_string(),
                b.min_entropy.to_string(),
                b.max_entropy.to_string(),
                b.mean_entropy.to_string(),
                b.accuracy.to_string(),
            ]
        })
        .collect()
}

/// SHA-256 of the dataset manifest metadata, images and labels of one split.
pub fn dataset_digest(dataset: &Dataset, split: Split) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&dataset.meta).expect("metadata serializes"));
    let data = dataset.split(split);
    h.update(&data.images);
    for l in &data.labels {
        h.update(l.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Hash of the canonical JSON of the configuration plus model and data
/// digests; equal hashes imply equal result rows.
pub fn config_hash(cfg: &EvalConfig, model: &Model, dataset: &Dataset) -> String {
    #[derive(Serialize)]
    struct Keyed<'a> {
        config: &'a EvalConfig,
        model: String,
        dataset: String,
    }
    let keyed = Keyed {
        config: cfg,
        model: model.checksum(),
        dataset: dataset_digest(dataset, cfg.split),
    };
    let text = serde_json::to_string(&keyed).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Evaluate `cfg` on one split of `dataset`.
pub fn run_eval(model: &Model, dataset: &Dataset, cfg: &EvalConfig) -> Result<EvalOutcome> {
    let [c, h, w] = dataset.meta.image_shape;
    let ec = &model.checkpoint.config;
    if c != ec.channels || h != ec.image_size || w != ec.image_size {
        return Err(Error::shape(
            "eval",
            format!("dataset images are {c}×{h}×{w}, encoder expects {}×{s}×{s}", ec.channels, s = ec.image_size),
        ));
    }
    if dataset.num_classes() != model.prototypes.num_classes() {
        return Err(Error::shape(
            "eval",
            format!(
                "dataset has {} classes, model has {} prototypes",
                dataset.num_classes(),
                model.prototypes.num_classes()
            ),
        ));
    }
    cfg.lora.validate(ec)?;
    let mut adapt = cfg.adapt.clone();
    adapt.temperature = model.temperature;
    let split = dataset.split(cfg.split);
    let n = cfg.limit.map_or(split.len(), |l| l.min(split.len()));
    let images: Vec<_> = (0..n).map(|i| dataset.image(cfg.split, i)).collect();
    let labels: Vec<usize> = split.labels[..n].iter().map(|&l| l as usize).collect();
    let samples: Vec<Sample<'_>> = images
        .iter()
        .zip(&labels)
        .enumerate()
        .map(|(i, (image, &label))| Sample {
            id: i as u64,
            image,
            label,
        })
        .collect();
    let ep = Episode {
        checkpoint: &model.checkpoint,
        prototypes: &model.prototypes,
        augment: &cfg.augment,
        loss: &cfg.loss,
        adapt: &adapt,
    };
    let stream = evaluate_stream(&ep, &cfg.lora, &samples)?;
    let m = &stream.metrics;
    let summary = SummaryRow {
        method: cfg.adapt.method,
        config_hash: config_hash(cfg, model, dataset),
        top1: m.top1,
        top1_pre: m.top1_pre,
        mean_pre_entropy: m.mean_pre_entropy,
        mean_post_entropy: m.mean_post_entropy,
        episodes: m.episodes,
        fallbacks: m.fallbacks,
    };
    Ok(EvalOutcome { summary, labels, stream })
}

/// Write a header and rows as UTF-8 CSV.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let io = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(io)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Render rows to a CSV string (used for byte comparisons).
pub fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}
