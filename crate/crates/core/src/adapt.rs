//! Episodic test-time adaptation: build views, score them, take a few AdamW
//! steps on the adapter factors only, predict, then reset.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, AugmentConfig, Image};
use crate::error::{Error, Result};
use crate::lora::{LoraAdapterSet, LoraSpec};
use crate::objective::{
    mean_entropy_loss, predict_probs, probs_on_tape, selected_entropy_loss, weighted_entropy_loss,
    ClassPrototypes, LossOutput, ProbVector, WeightedLossConfig, DEFAULT_TEMPERATURE,
};
use crate::tensor::Tape;
use crate::vit::{encode, encode_batch, EncoderCheckpoint};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, param_lens: &[usize]) -> Self {
        AdamW {
            config,
            step: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.iter_mut().chain(self.v.iter_mut()).for_each(|b| b.fill(0.0));
    }

    /// One update: `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + eps)`.
    pub fn step(&mut self, lr: f64, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                "adamw_step",
                format!("{} params, {} grads, state for {}", params.len(), grads.len(), self.m.len()),
            ));
        }
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::shape("adamw_step", "parameter/gradient length mismatch"));
            }
            for i in 0..p.len() {
                p[i] -= lr * weight_decay * p[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Confidence-weighted per-view entropy.
    #[default]
    TtlWeighted,
    /// Entropy of the averaged prediction over all views.
    TtlUnweighted,
    /// Entropy of the averaged prediction over the `⌈ρ·N⌉` most confident views.
    EntropySelect,
    /// No adaptation.
    Zeroshot,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::TtlWeighted => "ttl_weighted",
            Method::TtlUnweighted => "ttl_unweighted",
            Method::EntropySelect => "entropy_select",
            Method::Zeroshot => "zeroshot",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ttl_weighted" | "ttl" => Ok(Method::TtlWeighted),
            "ttl_unweighted" => Ok(Method::TtlUnweighted),
            "entropy_select" => Ok(Method::EntropySelect),
            "zeroshot" | "zero_shot" => Ok(Method::Zeroshot),
            other => Err(Error::config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionProtocol {
    /// Predict from the untouched test image.
    #[default]
    OriginalView,
    /// Average the adapted model's probabilities over all views.
    MeanProbs,
}

impl FromStr for PredictionProtocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original_view" | "original" => Ok(PredictionProtocol::OriginalView),
            "mean_probs" | "mean" => Ok(PredictionProtocol::MeanProbs),
            other => Err(Error::config(format!("unknown prediction protocol '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: AdamWConfig,
    pub method: Method,
    pub prediction_protocol: PredictionProtocol,
    pub episodic_reset: bool,
    pub temperature: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            steps: 1,
            learning_rate: 5e-3,
            optimizer: AdamWConfig::default(),
            method: Method::TtlWeighted,
            prediction_protocol: PredictionProtocol::OriginalView,
            episodic_reset: true,
            temperature: DEFAULT_TEMPERATURE,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning rate must be finite and non-negative"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        Ok(())
    }
}

/// Everything needed to run episodes, borrowed from the caller.
#[derive(Clone, Copy)]
pub struct Episode<'a> {
    pub checkpoint: &'a EncoderCheckpoint,
    pub prototypes: &'a ClassPrototypes,
    pub augment: &'a AugmentConfig,
    pub loss: &'a WeightedLossConfig,
    pub adapt: &'a AdaptConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub sample: u64,
    pub pre: ProbVector,
    /// Prediction under the configured protocol after adaptation.
    pub post: ProbVector,
    /// Adapted prediction on the original view (equal to `post` under
    /// `original_view`).
    pub post_original: ProbVector,
    /// Adapted prediction averaged over views, when that protocol is chosen.
    pub post_mean: Option<ProbVector>,
    /// Per-view entropies and weights from the first adaptation step.
    pub view_entropies: Vec<f64>,
    pub view_betas: Vec<f64>,
    pub losses: Vec<f64>,
    pub fallback: bool,
    pub wall_time_ms: f64,
}

impl AdaptReport {
    pub fn pre_class(&self) -> usize {
        self.pre.argmax()
    }

    pub fn post_class(&self) -> usize {
        self.post.argmax()
    }
}

fn predict(ep: &Episode<'_>, adapters: Option<&LoraAdapterSet>, image: &Image) -> Result<ProbVector> {
    let bound = adapters.map(LoraAdapterSet::constants);
    let emb = encode(ep.checkpoint, bound.as_ref(), &image.data)?;
    predict_probs(&emb, ep.prototypes, ep.adapt.temperature)
}

/// The loss selected by `method` over N×C view probabilities.
pub fn method_loss(tape: &Tape, method: Method, probs: &crate::tensor::Tensor, cfg: &WeightedLossConfig) -> Result<LossOutput> {
    match method {
        Method::TtlWeighted => weighted_entropy_loss(tape, probs, cfg),
        Method::TtlUnweighted => selected_entropy_loss(tape, probs, 1.0),
        Method::EntropySelect => selected_entropy_loss(tape, probs, cfg.cutoff_percentile),
        Method::Zeroshot => mean_entropy_loss(tape, probs),
    }
}

/// Gradients of the configured loss with respect to every adapter factor,
/// in [`LoraAdapterSet::params_mut`] order, plus the loss breakdown.
pub fn adapter_gradients(
    ep: &Episode<'_>,
    adapters: &LoraAdapterSet,
    views: &[&[f64]],
) -> Result<(Vec<Vec<f64>>, LossOutput)> {
    let tape = Tape::new();
    let bound = adapters.bind(&tape);
    let emb = encode_batch(&tape, ep.checkpoint, Some(&bound), views)?;
    let probs = probs_on_tape(&tape, &emb, ep.prototypes, ep.adapt.temperature)?;
    let out = method_loss(&tape, ep.adapt.method, &probs, ep.loss)?;
    if !out.loss.item()?.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    let grads = tape.backward(&out.loss)?;
    let flat = bound
        .tensors()
        .into_iter()
        .map(|t| grads.get_or_zeros(t).into_vec())
        .collect();
    Ok((flat, out))
}

/// Run one episode on `image` (sample id `sample`, which keys the view RNG).
///
/// For `zeroshot` no adapters are used and `pre == post`. Otherwise the
/// adapters take `steps` AdamW steps on the method's loss. A non-finite loss
/// yields the zero-shot prediction with `fallback` set. Adapters are reset
/// afterwards when `episodic_reset` is on.
pub fn adapt_one(ep: &Episode<'_>, adapters: &mut LoraAdapterSet, sample: u64, image: &Image) -> Result<AdaptReport> {
    ep.adapt.validate()?;
    ep.loss.validate()?;
    let start = Instant::now();
    if ep.adapt.method == Method::Zeroshot {
        let pre = predict(ep, None, image)?;
        return Ok(AdaptReport {
            sample,
            post: pre.clone(),
            post_original: pre.clone(),
            post_mean: None,
            pre,
            view_entropies: Vec::new(),
            view_betas: Vec::new(),
            losses: Vec::new(),
            fallback: false,
            wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }

    let pre = predict(ep, Some(adapters), image)?;
    let needs_views = ep.adapt.steps > 0 || ep.adapt.prediction_protocol == PredictionProtocol::MeanProbs;
    let batch = if needs_views {
        Some(make_views(image, ep.augment, sample, ep.checkpoint.config.patch_size)?)
    } else {
        None
    };

    let mut losses = Vec::with_capacity(ep.adapt.steps);
    let mut view_entropies = Vec::new();
    let mut view_betas = Vec::new();
    let mut fallback = false;
    if let Some(batch) = batch.as_ref().filter(|_| ep.adapt.steps > 0) {
        let views = batch.slices();
        let mut opt = AdamW::new(ep.adapt.optimizer.clone(), &adapters.param_lens());
        for step in 0..ep.adapt.steps {
            let (grads, out) = match adapter_gradients(ep, adapters, &views) {
                Ok(r) => r,
                Err(e) if e.is_numerical() => {
                    fallback = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            losses.push(out.loss.item()?);
            if step == 0 {
                view_entropies = out.entropies;
                view_betas = out.betas;
            }
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(ep.adapt.learning_rate, &mut adapters.params_mut(), &grad_refs)?;
        }
    }

    let result = if fallback {
        predict(ep, None, image).map(|p| (p.clone(), p, None))
    } else {
        finish_prediction(ep, adapters, image, batch.as_ref().map(|b| b.slices()))
    };
    let (post, post_original, post_mean) = match result {
        Ok(r) => r,
        Err(e) if e.is_numerical() => {
            fallback = true;
            let p = predict(ep, None, image)?;
            (p.clone(), p, None)
        }
        Err(e) => return Err(e),
    };
    if ep.adapt.episodic_reset {
        adapters.reset();
    }
    Ok(AdaptReport {
        sample,
        pre,
        post,
        post_original,
        post_mean,
        view_entropies,
        view_betas,
        losses,
        fallback,
        wall_time_ms: start.elapsed().as_secs_f64() * 1e3,
    })
}

fn finish_prediction(
    ep: &Episode<'_>,
    adapters: &LoraAdapterSet,
    image: &Image,
    views: Option<Vec<&[f64]>>,
) -> Result<(ProbVector, ProbVector, Option<ProbVector>)> {
    let original = predict(ep, Some(adapters), image)?;
    match (ep.adapt.prediction_protocol, views) {
        (PredictionProtocol::MeanProbs, Some(views)) => {
            let bound = adapters.constants();
            let emb = encode_batch(&Tape::new(), ep.checkpoint, Some(&bound), &views)?;
            let out_dim = ep.checkpoint.config.out_dim;
            let per_view = emb
                .data()
                .chunks_exact(out_dim)
                .map(|row| {
                    let t = crate::tensor::Tensor::from_vec(vec![out_dim], row.to_vec())?;
                    predict_probs(&t, ep.prototypes, ep.adapt.temperature)
                })
                .collect::<Result<Vec<_>>>()?;
            let mean = ProbVector::average(&per_view)?;
            Ok((mean.clone(), original, Some(mean)))
        }
        _ => Ok((original.clone(), original, None)),
    }
}

/// Aggregate results of a labelled evaluation stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StreamMetrics {
    pub episodes: usize,
    pub top1: f64,
    pub top1_pre: f64,
    pub mean_pre_entropy: f64,
    pub mean_post_entropy: f64,
    pub fallbacks: usize,
}

#[derive(Clone, Debug)]
pub struct StreamResult {
    pub metrics: StreamMetrics,
    pub reports: Vec<AdaptReport>,
    /// (pre-adaptation entropy, pre-adaptation correct) per sample, for
    /// octile analysis.
    pub octile_records: Vec<(f64, bool)>,
}

/// A labelled test sample with a stable id.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub id: u64,
    pub image: &'a Image,
    pub label: usize,
}

/// Run every sample through [`adapt_one`]. With episodic reset, samples are
/// processed in parallel, each worker owning its own adapter set; reports
/// come back in input order. Without reset, one adapter set is carried
/// through the stream sequentially.
pub fn evaluate_stream(ep: &Episode<'_>, lora: &LoraSpec, samples: &[Sample<'_>]) -> Result<StreamResult> {
    if samples.is_empty() {
        return Err(Error::config("empty evaluation stream"));
    }
    let config = &ep.checkpoint.config;
    let template = LoraAdapterSet::init(lora, config)?;
    let reports: Vec<AdaptReport> = if ep.adapt.episodic_reset {
        samples
            .par_iter()
            .map_init(
                || template.clone(),
                |adapters, s| adapt_one(ep, adapters, s.id, s.image),
            )
            .collect::<Result<Vec<_>>>()?
    } else {
        let mut adapters = template;
        samples
            .iter()
            .map(|s| adapt_one(ep, &mut adapters, s.id, s.image))
            .collect::<Result<Vec<_>>>()?
    };
    let n = samples.len() as f64;
    let correct = samples
        .iter()
        .zip(&reports)
        .filter(|(s, r)| r.post_class() == s.label)
        .count();
    let correct_pre = samples
        .iter()
        .zip(&reports)
        .filter(|(s, r)| r.pre_class() == s.label)
        .count();
    let metrics = StreamMetrics {
        episodes: samples.len(),
        top1: correct as f64 / n,
        top1_pre: correct_pre as f64 / n,
        mean_pre_entropy: reports.iter().map(|r| r.pre.entropy).sum::<f64>() / n,
        mean_post_entropy: reports.iter().map(|r| r.post.entropy).sum::<f64>() / n,
        fallbacks: reports.iter().filter(|r| r.fallback).count(),
    };
    let octile_records = samples
        .iter()
        .zip(&reports)
        .map(|(s, r)| (r.pre.entropy, r.pre_class() == s.label))
        .collect();
    Ok(StreamResult {
        metrics,
        reports,
        octile_records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg, &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let before = p.clone();
        opt.step(5e-3, &mut [p.as_mut_slice()], &[&[0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        };
        let mut opt = AdamW::new(cfg.clone(), &[1]);
        let mut p = vec![1.0];
        opt.step(5e-3, &mut [p.as_mut_slice()], &[&[1.0]]).unwrap();
        let expected = 1.0 - 5e-3 * (1.0 / (1.0 + cfg.eps));
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn repeated_steps_accumulate_state() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[1]);
        let mut p = vec![1.0];
        opt.step(5e-3, &mut [p.as_mut_slice()], &[&[1.0]]).unwrap();
        let d1 = 1.0 - p[0];
        let before = p[0];
        opt.step(5e-3, &mut [p.as_mut_slice()], &[&[1.0]]).unwrap();
        let d2 = before - p[0];
        assert_ne!(d1, d2);
        assert_eq!(opt.steps_taken(), 2);
        opt.reset();
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn mismatched_state_is_rejected() {
        let mut opt = AdamW::new(AdamWConfig::default(), &[2]);
        let mut p = vec![1.0];
        assert!(opt.step(1e-3, &mut [p.as_mut_slice()], &[&[1.0]]).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::TtlWeighted, Method::TtlUnweighted, Method::EntropySelect, Method::Zeroshot] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("tpt".parse::<Method>().is_err());
    }
}
