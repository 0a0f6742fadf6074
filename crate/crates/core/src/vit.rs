//! Small pre-norm vision transformer with low-rank adapter injection points
//! on the query, key and value projections.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{BoundAdapters, Projection};
use crate::tensor::{AttentionLayout, Tape, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub out_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_layers: 6,
            num_heads: 4,
            mlp_ratio: 4.0,
            out_dim: 64,
        }
    }
}

impl EncoderConfig {
    /// The two-layer, width-8 configuration used for gradient checks.
    pub fn micro() -> Self {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 8,
            num_layers: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            out_dim: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("patch_size", self.patch_size),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("out_dim", self.out_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::config("mlp_ratio must give a positive hidden width"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Tokens per image: patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}

/// Frozen weights of one transformer block. Linear weights are stored
/// `out × in`, so a projection computes `W·h` per token.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights {
    pub ln1_weight: Tensor,
    pub ln1_bias: Tensor,
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    pub k_weight: Tensor,
    pub k_bias: Tensor,
    pub v_weight: Tensor,
    pub v_bias: Tensor,
    pub out_weight: Tensor,
    pub out_bias: Tensor,
    pub ln2_weight: Tensor,
    pub ln2_bias: Tensor,
    pub fc1_weight: Tensor,
    pub fc1_bias: Tensor,
    pub fc2_weight: Tensor,
    pub fc2_bias: Tensor,
}

impl BlockWeights {
    const NAMES: [&'static str; 16] = [
        "ln1.weight",
        "ln1.bias",
        "attn.q.weight",
        "attn.q.bias",
        "attn.k.weight",
        "attn.k.bias",
        "attn.v.weight",
        "attn.v.bias",
        "attn.out.weight",
        "attn.out.bias",
        "ln2.weight",
        "ln2.bias",
        "mlp.fc1.weight",
        "mlp.fc1.bias",
        "mlp.fc2.weight",
        "mlp.fc2.bias",
    ];

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_weight,
            &self.ln1_bias,
            &self.q_weight,
            &self.q_bias,
            &self.k_weight,
            &self.k_bias,
            &self.v_weight,
            &self.v_bias,
            &self.out_weight,
            &self.out_bias,
            &self.ln2_weight,
            &self.ln2_bias,
            &self.fc1_weight,
            &self.fc1_bias,
            &self.fc2_weight,
            &self.fc2_bias,
        ]
    }

    fn from_tensors(mut t: impl Iterator<Item = Tensor>) -> Self {
        let mut next = || t.next().expect("block tensor count");
        BlockWeights {
            ln1_weight: next(),
            ln1_bias: next(),
            q_weight: next(),
            q_bias: next(),
            k_weight: next(),
            k_bias: next(),
            v_weight: next(),
            v_bias: next(),
            out_weight: next(),
            out_bias: next(),
            ln2_weight: next(),
            ln2_bias: next(),
            fc1_weight: next(),
            fc1_bias: next(),
            fc2_weight: next(),
            fc2_bias: next(),
        }
    }

    fn shapes(cfg: &EncoderConfig) -> [Vec<usize>; 16] {
        let d = cfg.embed_dim;
        let h = cfg.hidden_dim();
        [
            vec![d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d, d],
            vec![d],
            vec![d],
            vec![d],
            vec![h, d],
            vec![h],
            vec![d, h],
            vec![d],
        ]
    }

    pub fn projection(&self, proj: Projection) -> (&Tensor, &Tensor) {
        match proj {
            Projection::Q => (&self.q_weight, &self.q_bias),
            Projection::K => (&self.k_weight, &self.k_bias),
            Projection::V => (&self.v_weight, &self.v_bias),
        }
    }
}

/// Frozen encoder weights plus the architecture they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderCheckpoint {
    pub config: EncoderConfig,
    pub patch_weight: Tensor,
    pub patch_bias: Tensor,
    pub cls_token: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
    pub ln_post_weight: Tensor,
    pub ln_post_bias: Tensor,
    pub proj: Tensor,
}

impl EncoderCheckpoint {
    /// Random initialization: Xavier-uniform linear weights, zero biases,
    /// unit layer-norm gains, N(0, 0.02²) class token and positions.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let small = Normal::new(0.0, 0.02).expect("valid std");
        let mut shapes = Self::shapes(&config).into_iter();
        let mut tensors = Vec::new();
        for (name, shape) in Self::names(&config).iter().zip(&mut shapes) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = if name.ends_with("ln1.weight")
                || name.ends_with("ln2.weight")
                || name == "ln_post.weight"
            {
                vec![1.0; n]
            } else if name.ends_with("bias") {
                vec![0.0; n]
            } else if name == "cls_token" || name == "pos_embed" {
                (0..n).map(|_| small.sample(&mut rng)).collect()
            } else {
                let (fan_out, fan_in) = (shape[0], shape[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            tensors.push(Tensor::from_vec(shape.clone(), data)?);
        }
        Self::from_ordered(config, tensors)
    }

    /// Tensor names in canonical order.
    pub fn names(config: &EncoderConfig) -> Vec<String> {
        let mut names = vec![
            "patch_embed.weight".to_string(),
            "patch_embed.bias".to_string(),
            "cls_token".to_string(),
            "pos_embed".to_string(),
        ];
        for l in 0..config.num_layers {
            names.extend(BlockWeights::NAMES.iter().map(|n| format!("blocks.{l}.{n}")));
        }
        names.extend(["ln_post.weight", "ln_post.bias", "proj.weight"].map(String::from));
        names
    }

    fn shapes(config: &EncoderConfig) -> Vec<Vec<usize>> {
        let d = config.embed_dim;
        let mut shapes = vec![
            vec![d, config.patch_dim()],
            vec![d],
            vec![d],
            vec![config.seq_len(), d],
        ];
        for _ in 0..config.num_layers {
            shapes.extend(BlockWeights::shapes(config));
        }
        shapes.extend([vec![d], vec![d], vec![config.out_dim, d]]);
        shapes
    }

    /// All tensors in canonical order, paired with their names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut all = vec![&self.patch_weight, &self.patch_bias, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            all.extend(b.tensors());
        }
        all.extend([&self.ln_post_weight, &self.ln_post_bias, &self.proj]);
        Self::names(&self.config).into_iter().zip(all).collect()
    }

    /// Build from a name → tensor map, checking every shape against `config`.
    pub fn from_named(config: EncoderConfig, mut map: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let mut ordered = Vec::new();
        for (name, shape) in Self::names(&config).iter().zip(Self::shapes(&config)) {
            let t = map
                .remove(name)
                .ok_or_else(|| Error::shape("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("{name} has shape {:?}, config needs {shape:?}", t.shape()),
                ));
            }
            ordered.push(t);
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::shape("checkpoint", format!("unexpected tensor {extra}")));
        }
        Self::from_ordered(config, ordered)
    }

    fn from_ordered(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut it = tensors.into_iter();
        let patch_weight = it.next().expect("ordered");
        let patch_bias = it.next().expect("ordered");
        let cls_token = it.next().expect("ordered");
        let pos_embed = it.next().expect("ordered");
        let blocks = (0..config.num_layers)
            .map(|_| BlockWeights::from_tensors(it.by_ref().take(16)))
            .collect();
        let ln_post_weight = it.next().expect("ordered");
        let ln_post_bias = it.next().expect("ordered");
        let proj = it.next().expect("ordered");
        Ok(EncoderCheckpoint {
            config,
            patch_weight,
            patch_bias,
            cls_token,
            pos_embed,
            blocks,
            ln_post_weight,
            ln_post_bias,
            proj,
        })
    }

    /// Copy of every tensor registered on `tape` as a trainable leaf.
    pub fn watched(&self, tape: &Tape) -> Self {
        let tensors = self.named_tensors().into_iter().map(|(_, t)| tape.watch(t)).collect();
        Self::from_ordered(self.config.clone(), tensors).expect("same layout")
    }

    /// Rebuild with new data for every tensor, in canonical order.
    pub fn with_data(&self, data: Vec<Vec<f64>>) -> Result<Self> {
        let tensors = self
            .named_tensors()
            .into_iter()
            .zip(data)
            .map(|((_, t), d)| Tensor::from_vec(t.shape().to_vec(), d))
            .collect::<Result<Vec<_>>>()?;
        Self::from_ordered(self.config.clone(), tensors)
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// SHA-256 over names, shapes and little-endian values of all tensors.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Split images (each `C×H×W`, row-major) into a `(B·P) × (C·p·p)` patch
/// matrix. Patches are taken in raster order; each patch vector is ordered
/// channel, row, column.
pub fn patchify(config: &EncoderConfig, images: &[&[f64]]) -> Result<Tensor> {
    let (s, p, c) = (config.image_size, config.patch_size, config.channels);
    let grid = config.grid();
    let mut out = Vec::with_capacity(images.len() * config.num_patches() * config.patch_dim());
    for img in images {
        if img.len() != config.image_len() {
            return Err(Error::shape(
                "encode",
                format!("image has {} values, config needs {c}×{s}×{s}", img.len()),
            ));
        }
        for gy in 0..grid {
            for gx in 0..grid {
                for ch in 0..c {
                    for y in 0..p {
                        let row = ch * s * s + (gy * p + y) * s + gx * p;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![images.len() * config.num_patches(), config.patch_dim()], out)
}

/// Pre-norm block: `x + Attn(LN1(x))`, then `x + MLP(LN2(x))`. When adapters
/// target this layer, each adapted projection adds `γ·B·A·h` to `W·h + b`.
pub fn attention_block(
    tape: &Tape,
    config: &EncoderConfig,
    x: &Tensor,
    weights: &BlockWeights,
    layer: usize,
    adapters: Option<&BoundAdapters>,
) -> Result<Tensor> {
    let batch = x.shape()[0] / config.seq_len();
    let h = tape.layer_norm(x, &weights.ln1_weight, &weights.ln1_bias, LAYER_NORM_EPS)?;
    let project = |proj: Projection| -> Result<Tensor> {
        let (w, b) = weights.projection(proj);
        let frozen = tape.linear(&h, w, Some(b))?;
        match adapters.and_then(|a| a.get(layer, proj)) {
            Some(pair) => tape.add(&frozen, &pair.delta_forward(tape, &h)?),
            None => Ok(frozen),
        }
    };
    let q = project(Projection::Q)?;
    let k = project(Projection::K)?;
    let v = project(Projection::V)?;
    let layout = AttentionLayout {
        batch,
        seq: config.seq_len(),
        heads: config.num_heads,
        head_dim: config.head_dim(),
    };
    let attn = tape.attention(&q, &k, &v, layout)?;
    let attn = tape.linear(&attn, &weights.out_weight, Some(&weights.out_bias))?;
    let x = tape.add(x, &attn)?;
    let h2 = tape.layer_norm(&x, &weights.ln2_weight, &weights.ln2_bias, LAYER_NORM_EPS)?;
    let m = tape.linear(&h2, &weights.fc1_weight, Some(&weights.fc1_bias))?;
    let m = tape.gelu(&m)?;
    let m = tape.linear(&m, &weights.fc2_weight, Some(&weights.fc2_bias))?;
    tape.add(&x, &m)
}

/// Encode a batch of images into unit-norm embeddings, `B × out_dim`.
///
/// Pooling takes the final class-token row, applies the post layer norm and
/// the projection head, then L2-normalizes.
pub fn encode_batch(
    tape: &Tape,
    ckpt: &EncoderCheckpoint,
    adapters: Option<&BoundAdapters>,
    images: &[&[f64]],
) -> Result<Tensor> {
    let config = &ckpt.config;
    if images.is_empty() {
        return Err(Error::shape("encode", "empty image batch"));
    }
    if let Some(a) = adapters {
        a.check_against(config)?;
    }
    let batch = images.len();
    let patches = patchify(config, images)?;
    let emb = tape.linear(&patches, &ckpt.patch_weight, Some(&ckpt.patch_bias))?;
    let mut x = tape.embed_tokens(&emb, &ckpt.cls_token, &ckpt.pos_embed, batch)?;
    for (layer, block) in ckpt.blocks.iter().enumerate() {
        x = attention_block(tape, config, &x, block, layer + 1, adapters)?;
    }
    let cls_rows: Vec<usize> = (0..batch).map(|b| b * config.seq_len()).collect();
    let pooled = tape.gather_rows(&x, &cls_rows)?;
    let pooled = tape.layer_norm(&pooled, &ckpt.ln_post_weight, &ckpt.ln_post_bias, LAYER_NORM_EPS)?;
    let projected = tape.linear(&pooled, &ckpt.proj, None)?;
    tape.normalize_rows(&projected)
}

/// Encode a single image without recording gradients, returning its
/// `out_dim` unit-norm embedding.
pub fn encode(
    ckpt: &EncoderCheckpoint,
    adapters: Option<&BoundAdapters>,
    image: &[f64],
) -> Result<Tensor> {
    let tape = Tape::new();
    let constants = adapters.map(BoundAdapters::detached);
    let e = encode_batch(&tape, ckpt, constants.as_ref(), &[image])?;
    let n = e.len();
    tape.reshape(&e, vec![n])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::{InitPolicy, LoraAdapterSet, LoraSpec};

    fn micro() -> EncoderCheckpoint {
        EncoderCheckpoint::init(EncoderConfig::micro(), 3).unwrap()
    }

    fn image(cfg: &EncoderConfig, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..cfg.image_len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn default_config_geometry() {
        let cfg = EncoderConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.seq_len(), 17);
        assert_eq!(cfg.hidden_dim(), 256);
    }

    #[test]
    fn config_rejects_indivisible_sizes() {
        let mut cfg = EncoderConfig::default();
        cfg.patch_size = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = EncoderConfig::default();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn embedding_is_unit_norm_and_deterministic() {
        let ckpt = micro();
        let img = image(&ckpt.config, 1);
        let a = encode(&ckpt, None, &img).unwrap();
        let b = encode(&ckpt, None, &img).unwrap();
        assert_eq!(a.shape(), &[ckpt.config.out_dim]);
        assert_eq!(a.data(), b.data());
        let norm: f64 = a.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let ckpt = micro();
        assert!(matches!(encode(&ckpt, None, &[0.0; 5]), Err(Error::Shape { .. })));
    }

    #[test]
    fn zero_b_adapters_leave_forward_bit_identical() {
        let ckpt = micro();
        let spec = LoraSpec {
            rank: 2,
            alpha: 4.0,
            target_layers: [1, 2].into(),
            target_projections: [Projection::Q, Projection::K, Projection::V].into(),
            init_policy: InitPolicy::XavierAZeroB,
            seed: 11,
            ..LoraSpec::default()
        };
        let set = LoraAdapterSet::init(&spec, &ckpt.config).unwrap();
        let tape = Tape::new();
        let bound = set.bind(&tape);
        let img = image(&ckpt.config, 2);
        let plain = encode(&ckpt, None, &img).unwrap();
        let adapted = encode(&ckpt, Some(&bound), &img).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&plain), bits(&adapted));
    }

    #[test]
    fn batch_rows_match_single_image_encodes() {
        let ckpt = micro();
        let imgs: Vec<Vec<f64>> = (0..3).map(|i| image(&ckpt.config, i)).collect();
        let refs: Vec<&[f64]> = imgs.iter().map(|v| v.as_slice()).collect();
        let batch = encode_batch(&Tape::new(), &ckpt, None, &refs).unwrap();
        for (i, img) in imgs.iter().enumerate() {
            let single = encode(&ckpt, None, img).unwrap();
            let row = &batch.data()[i * 8..(i + 1) * 8];
            for (a, b) in row.iter().zip(single.data()) {
                assert!((a - b).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn checkpoint_named_round_trip() {
        let ckpt = micro();
        let map: BTreeMap<String, Tensor> = ckpt
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        let back = EncoderCheckpoint::from_named(ckpt.config.clone(), map.clone()).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.checksum(), ckpt.checksum());

        let mut broken = map;
        broken.insert("cls_token".into(), Tensor::zeros(vec![3]));
        assert!(EncoderCheckpoint::from_named(ckpt.config.clone(), broken).is_err());
    }

    #[test]
    fn patchify_orders_channel_row_column() {
        let cfg = EncoderConfig {
            image_size: 4,
            patch_size: 2,
            channels: 1,
            embed_dim: 2,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            out_dim: 2,
        };
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patchify(&cfg, &[&img]).unwrap();
        assert_eq!(p.shape(), &[4, 4]);
        assert_eq!(&p.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p.data()[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p.data()[12..], &[10.0, 11.0, 14.0, 15.0]);
    }
}
