//! Encoder pretraining against fixed random orthonormal class prototypes.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapt::{AdamW, AdamWConfig};
use crate::augment::{augment_view, AugmentConfig, Image};
use crate::error::{Error, Result};
use crate::objective::{predict_probs, ProbVector, DEFAULT_TEMPERATURE};
use crate::tensor::{Tape, Tensor};
use crate::vit::{encode_batch, EncoderCheckpoint, EncoderConfig};

use super::dataset::{Dataset, Split};
use super::keyed_rng;
use super::model::{random_orthonormal_prototypes, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    /// Crop/flip augmentation of training images; `None` trains on the
    /// images as stored.
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            epochs: 20,
            batch_size: 64,
            learning_rate: 3e-3,
            weight_decay: 0.05,
            temperature: DEFAULT_TEMPERATURE,
            augment: Some(AugmentConfig {
                num_views: 1,
                crop_scale: (0.6, 1.0),
                ..AugmentConfig::default()
            }),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warmup = (total / 20).max(1);
        if step < warmup {
            self.learning_rate * (step + 1) as f64 / warmup as f64
        } else {
            let t = (step - warmup) as f64 / (total - warmup).max(1) as f64;
            0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

/// Train an encoder on the train split and score it on the val split.
pub fn pretrain(dataset: &Dataset, cfg: &PretrainConfig) -> Result<(Model, PretrainReport)> {
    cfg.validate()?;
    let [c, h, w] = dataset.meta.image_shape;
    let ec = &cfg.encoder;
    if c != ec.channels || h != ec.image_size || w != ec.image_size {
        return Err(Error::config(format!(
            "encoder expects {}×{s}×{s} images, dataset has {c}×{h}×{w}",
            ec.channels,
            s = ec.image_size
        )));
    }
    if dataset.train.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let prototypes = random_orthonormal_prototypes(dataset.meta.class_names.clone(), ec.out_dim, cfg.seed)?;
    let mut checkpoint = EncoderCheckpoint::init(ec.clone(), cfg.seed)?;
    let train = dataset.images(Split::Train);
    let labels: Vec<usize> = dataset.train.labels.iter().map(|&l| l as usize).collect();
    let classes = prototypes.num_classes();

    let lens: Vec<usize> = checkpoint.named_tensors().iter().map(|(_, t)| t.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
        &lens,
    );
    let batches = train.len().div_ceil(cfg.batch_size);
    let total = batches * cfg.epochs;
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut keyed_rng(b"ttlorder", cfg.seed, epoch as u64, 0));
        let mut sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<Image> = idx
                .iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => augment_view(&train[i], a, i as u64, epoch as u64).0,
                    None => train[i].clone(),
                })
                .collect();
            let mut onehot = vec![0.0; idx.len() * classes];
            for (r, &i) in idx.iter().enumerate() {
                onehot[r * classes + labels[i]] = 1.0;
            }
            let onehot = Tensor::from_vec(vec![idx.len(), classes], onehot)?;

            let tape = Tape::new();
            let watched = checkpoint.watched(&tape);
            let views: Vec<&[f64]> = images.iter().map(|i| i.data.as_slice()).collect();
            let emb = encode_batch(&tape, &watched, None, &views)?;
            let sims = tape.linear(&emb, prototypes.matrix(), None)?;
            let logits = tape.scale(&sims, cfg.temperature)?;
            // Cosine logits are bounded by the temperature, so exp cannot overflow.
            let lse = tape.log(&tape.sum_last(&tape.exp(&logits)?)?)?;
            let picked = tape.sum_last(&tape.mul(&logits, &onehot)?)?;
            let nll = tape.add(&lse, &tape.scale(&picked, -1.0)?)?;
            let loss = tape.mean(&nll)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, batch });
            }
            sum += value * idx.len() as f64;
            let grads = tape.backward(&loss)?;
            let g: Vec<Tensor> = watched
                .named_tensors()
                .into_iter()
                .map(|(_, t)| grads.get_or_zeros(t))
                .collect();
            let g: Vec<&[f64]> = g.iter().map(Tensor::data).collect();
            let mut params: Vec<Vec<f64>> = checkpoint
                .named_tensors()
                .into_iter()
                .map(|(_, t)| t.data().to_vec())
                .collect();
            let mut refs: Vec<&mut [f64]> = params.iter_mut().map(Vec::as_mut_slice).collect();
            opt.step(cfg.lr_at(step, total), &mut refs, &g)?;
            if params.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Diverged { epoch, batch });
            }
            checkpoint = checkpoint.with_data(params)?;
            step += 1;
        }
        epoch_loss.push(sum / train.len() as f64);
    }
    let mut model = Model::new(checkpoint, prototypes)?;
    model.temperature = cfg.temperature;
    let train_accuracy = accuracy(&model, &train, &labels)?;
    let val_images = dataset.images(Split::Val);
    let val_labels: Vec<usize> = dataset.val.labels.iter().map(|&l| l as usize).collect();
    let val_accuracy = if val_images.is_empty() {
        f64::NAN
    } else {
        accuracy(&model, &val_images, &val_labels)?
    };
    Ok((
        model,
        PretrainReport {
            epoch_loss,
            train_accuracy,
            val_accuracy,
        },
    ))
}

/// Zero-shot probabilities for many images, batched.
pub fn classify(model: &Model, images: &[Image]) -> Result<Vec<ProbVector>> {
    let out_dim = model.checkpoint.config.out_dim;
    let mut probs = Vec::with_capacity(images.len());
    for chunk in images.chunks(128) {
        let views: Vec<&[f64]> = chunk.iter().map(|i| i.data.as_slice()).collect();
        let emb = encode_batch(&Tape::new(), &model.checkpoint, None, &views)?;
        for row in emb.data().chunks_exact(out_dim) {
            let e = Tensor::from_vec(vec![out_dim], row.to_vec())?;
            probs.push(predict_probs(&e, &model.prototypes, model.temperature)?);
        }
    }
    Ok(probs)
}

/// Zero-shot top-1 accuracy.
pub fn accuracy(model: &Model, images: &[Image], labels: &[usize]) -> Result<f64> {
    if images.is_empty() || images.len() != labels.len() {
        return Err(Error::config("accuracy needs one label per image"));
    }
    let probs = classify(model, images)?;
    let correct = probs.iter().zip(labels).filter(|(p, &l)| p.argmax() == l).count();
    Ok(correct as f64 / images.len() as f64)
}
