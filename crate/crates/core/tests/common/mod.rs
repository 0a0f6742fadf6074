//! Helpers shared by the integration tests: finite differences, the micro
//! model used for gradient checks and a straight-line encoder oracle.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ttl_core::adapt::{adapter_gradients, method_loss, AdaptConfig, Episode, Method};
use ttl_core::augment::AugmentConfig;
use ttl_core::harness::model::random_orthonormal_prototypes;
use ttl_core::lora::{InitPolicy, LoraAdapterSet, LoraPair, LoraSpec, Projection};
use ttl_core::objective::{probs_on_tape, ClassPrototypes, WeightedLossConfig};
use ttl_core::tensor::{Tape, Tensor};
use ttl_core::vit::{encode_batch, EncoderCheckpoint, EncoderConfig, LAYER_NORM_EPS};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-5;
/// Denominator floor of the relative error. Central-difference roundoff is
/// about 1e-11 in absolute terms for O(1) losses, so entries smaller than
/// this are judged on absolute error at this scale.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_difference(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + FD_STEP;
            let up = f(&probe);
            probe[i] = x[i] - FD_STEP;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Micro encoder, three orthonormal prototypes and four random views.
pub struct Micro {
    pub checkpoint: EncoderCheckpoint,
    pub prototypes: ClassPrototypes,
    pub views: Vec<Vec<f64>>,
    pub augment: AugmentConfig,
    pub loss: WeightedLossConfig,
    pub adapt: AdaptConfig,
}

/// Softmax temperature for gradient checks: low enough that the random
/// micro encoder is not saturated.
pub const MICRO_TEMPERATURE: f64 = 10.0;

impl Micro {
    pub fn new(seed: u64) -> Self {
        let config = EncoderConfig::micro();
        let checkpoint = EncoderCheckpoint::init(config.clone(), seed).unwrap();
        let names = (0..3).map(|i| format!("c{i}")).collect();
        let prototypes = random_orthonormal_prototypes(names, config.out_dim, seed + 1).unwrap();
        let mut r = rng(seed + 2);
        let views = (0..4).map(|_| uniform(&mut r, config.image_len(), -1.5, 1.5)).collect();
        Micro {
            checkpoint,
            prototypes,
            views,
            augment: AugmentConfig {
                num_views: 4,
                ..AugmentConfig::default()
            },
            loss: WeightedLossConfig::default(),
            adapt: AdaptConfig {
                temperature: MICRO_TEMPERATURE,
                ..AdaptConfig::default()
            },
        }
    }

    pub fn episode(&self) -> Episode<'_> {
        Episode {
            checkpoint: &self.checkpoint,
            prototypes: &self.prototypes,
            augment: &self.augment,
            loss: &self.loss,
            adapt: &self.adapt,
        }
    }

    pub fn view_refs(&self) -> Vec<&[f64]> {
        self.views.iter().map(Vec::as_slice).collect()
    }

    /// Rank-2 adapters on Q, K and V of both blocks.
    pub fn spec(policy: InitPolicy, seed: u64) -> LoraSpec {
        LoraSpec {
            rank: 2,
            alpha: 4.0,
            target_layers: [1, 2].into(),
            target_projections: [Projection::Q, Projection::K, Projection::V].into(),
            init_policy: policy,
            seed,
            ..LoraSpec::default()
        }
    }

    /// Adapters whose B factors are overwritten with small random values.
    pub fn perturbed_adapters(&self, policy: InitPolicy, seed: u64) -> LoraAdapterSet {
        let spec = Self::spec(policy, seed);
        let mut set = LoraAdapterSet::init(&spec, &self.checkpoint.config).unwrap();
        let mut r = rng(seed + 100);
        let keys: Vec<(usize, Projection)> = set.pairs().keys().copied().collect();
        for (layer, proj) in keys {
            let pair = set.get(layer, proj).unwrap().clone();
            let b = Tensor::from_vec(pair.b.shape().to_vec(), uniform(&mut r, pair.b.len(), -0.5, 0.5)).unwrap();
            set.set_pair(layer, proj, LoraPair { a: pair.a, b }).unwrap();
        }
        set
    }

    /// Loss of the episode's method evaluated off-tape.
    pub fn loss_value(&self, adapters: &LoraAdapterSet) -> f64 {
        let tape = Tape::new();
        let probs = self.view_probs(&tape, adapters);
        method_loss(&tape, self.adapt.method, &probs, &self.loss).unwrap().loss.item().unwrap()
    }

    fn view_probs(&self, tape: &Tape, adapters: &LoraAdapterSet) -> Tensor {
        let views = self.view_refs();
        let emb = encode_batch(tape, &self.checkpoint, Some(&adapters.constants()), &views).unwrap();
        probs_on_tape(tape, &emb, &self.prototypes, self.adapt.temperature).unwrap()
    }

    /// `Σ_kept β_v·H_v / |kept|` with the weights held at the given values,
    /// the function whose gradient a stop-gradient β defines.
    pub fn frozen_beta_loss(&self, adapters: &LoraAdapterSet, betas: &[f64], kept: &[usize]) -> f64 {
        let probs = self.view_probs(&Tape::new(), adapters);
        let c = self.prototypes.num_classes();
        let h: Vec<f64> = probs
            .data()
            .chunks_exact(c)
            .map(|row| -row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>())
            .collect();
        kept.iter().map(|&i| betas[i] * h[i]).sum::<f64>() / kept.len() as f64
    }

    /// Max relative error between the analytic adapter gradient and central
    /// differences over every adapter parameter.
    pub fn gradient_error(&self, adapters: &LoraAdapterSet) -> (f64, usize) {
        let (analytic, out) = adapter_gradients(&self.episode(), adapters, &self.view_refs()).unwrap();
        let frozen = self.adapt.method == Method::TtlWeighted && self.loss.beta_stop_gradient;
        let flat: Vec<f64> = analytic.iter().flatten().copied().collect();
        let lens = adapters.param_lens();
        let base: Vec<f64> = {
            let mut a = adapters.clone();
            a.params_mut().iter().flat_map(|p| p.to_vec()).collect()
        };
        let numeric = central_difference(&base, |x| {
            let mut a = adapters.clone();
            let mut offset = 0;
            for (p, &n) in a.params_mut().into_iter().zip(&lens) {
                p.copy_from_slice(&x[offset..offset + n]);
                offset += n;
            }
            if frozen {
                self.frozen_beta_loss(&a, &out.betas, &out.kept)
            } else {
                self.loss_value(&a)
            }
        });
        (max_rel_err(&flat, &numeric), flat.len())
    }
}

pub fn with_method(mut m: Micro, method: Method) -> Micro {
    m.adapt.method = method;
    m
}

/// Straight-line reimplementation of the encoder forward pass with plain
/// loops, for comparison against the tape implementation.
pub fn oracle_encode(ck: &EncoderCheckpoint, adapters: Option<&LoraAdapterSet>, image: &[f64]) -> Vec<f64> {
    let cfg = &ck.config;
    let (s, p, c, d) = (cfg.image_size, cfg.patch_size, cfg.channels, cfg.embed_dim);
    let g = s / p;
    let seq = g * g + 1;
    let w = |t: &Tensor| t.data().to_vec();
    let matvec = |m: &[f64], rows: usize, cols: usize, x: &[f64]| -> Vec<f64> {
        (0..rows).map(|r| (0..cols).map(|k| m[r * cols + k] * x[k]).sum()).collect()
    };
    let layer_norm = |x: &[f64], gamma: &[f64], beta: &[f64]| -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        (0..x.len()).map(|i| (x[i] - mean) * inv * gamma[i] + beta[i]).collect()
    };
    let gelu = |x: f64| 0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());

    let pw = w(&ck.patch_weight);
    let pb = w(&ck.patch_bias);
    let mut tokens: Vec<Vec<f64>> = Vec::with_capacity(seq);
    tokens.push(w(&ck.cls_token));
    for gy in 0..g {
        for gx in 0..g {
            let mut patch = Vec::with_capacity(c * p * p);
            for ch in 0..c {
                for y in 0..p {
                    for x in 0..p {
                        patch.push(image[(ch * s + gy * p + y) * s + gx * p + x]);
                    }
                }
            }
            let mut e = matvec(&pw, d, c * p * p, &patch);
            e.iter_mut().zip(&pb).for_each(|(a, b)| *a += b);
            tokens.push(e);
        }
    }
    let pos = w(&ck.pos_embed);
    for (t, tok) in tokens.iter_mut().enumerate() {
        tok.iter_mut().zip(&pos[t * d..(t + 1) * d]).for_each(|(a, b)| *a += b);
    }

    let heads = cfg.num_heads;
    let hd = d / heads;
    let hidden = cfg.hidden_dim();
    for (li, b) in ck.blocks.iter().enumerate() {
        let layer = li + 1;
        let normed: Vec<Vec<f64>> = tokens.iter().map(|t| layer_norm(t, b.ln1_weight.data(), b.ln1_bias.data())).collect();
        let project = |proj: Projection, h: &[f64]| -> Vec<f64> {
            let (wt, bias) = b.projection(proj);
            let mut out = matvec(wt.data(), d, d, h);
            out.iter_mut().zip(bias.data()).for_each(|(a, bb)| *a += bb);
            if let Some(pair) = adapters.and_then(|a| a.get(layer, proj)) {
                let r = pair.a.shape()[0];
                let ah = matvec(pair.a.data(), r, d, h);
                let bah = matvec(pair.b.data(), d, r, &ah);
                let gamma = adapters.unwrap().gamma();
                out.iter_mut().zip(&bah).for_each(|(o, v)| *o += gamma * v);
            }
            out
        };
        let q: Vec<Vec<f64>> = normed.iter().map(|h| project(Projection::Q, h)).collect();
        let k: Vec<Vec<f64>> = normed.iter().map(|h| project(Projection::K, h)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|h| project(Projection::V, h)).collect();
        let mut attn = vec![vec![0.0; d]; seq];
        for head in 0..heads {
            let cols = head * hd..(head + 1) * hd;
            for i in 0..seq {
                let logits: Vec<f64> = (0..seq)
                    .map(|j| cols.clone().map(|cc| q[i][cc] * k[j][cc]).sum::<f64>() / (hd as f64).sqrt())
                    .collect();
                let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..seq {
                    for cc in cols.clone() {
                        attn[i][cc] += e[j] / z * v[j][cc];
                    }
                }
            }
        }
        for (t, a) in tokens.iter_mut().zip(&attn) {
            let mut o = matvec(b.out_weight.data(), d, d, a);
            o.iter_mut().zip(b.out_bias.data()).for_each(|(x, y)| *x += y);
            t.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
        }
        for t in tokens.iter_mut() {
            let h = layer_norm(t, b.ln2_weight.data(), b.ln2_bias.data());
            let mut m = matvec(b.fc1_weight.data(), hidden, d, &h);
            m.iter_mut().zip(b.fc1_bias.data()).for_each(|(x, y)| *x = gelu(*x + y));
            let mut o = matvec(b.fc2_weight.data(), d, hidden, &m);
            o.iter_mut().zip(b.fc2_bias.data()).for_each(|(x, y)| *x += y);
            t.iter_mut().zip(&o).for_each(|(x, y)| *x += y);
        }
    }
    let pooled = layer_norm(&tokens[0], ck.ln_post_weight.data(), ck.ln_post_bias.data());
    let out = matvec(ck.proj.data(), cfg.out_dim, d, &pooled);
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    out.iter().map(|v| v / norm).collect()
}
