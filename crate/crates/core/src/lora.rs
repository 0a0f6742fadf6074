//! Low-rank adapters for attention projections.
//!
//! A targeted projection `W` (d×k) computes `W·h + γ·B·A·h` with `A` (r×k)
//! and `B` (d×r) trainable. Under the default convention `γ = r/α`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::vit::EncoderConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
}

impl fmt::Display for Projection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
        })
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "q" => Ok(Projection::Q),
            "k" => Ok(Projection::K),
            "v" => Ok(Projection::V),
            other => Err(Error::config(format!("unknown projection '{other}'"))),
        }
    }
}

/// Parse a comma-separated projection list such as `q,v`.
pub fn parse_projections(s: &str) -> Result<BTreeSet<Projection>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(Projection::from_str)
        .collect()
}

/// Parse a layer selection: `4-6`, `1,3,5` or a mix such as `1,4-6`.
/// Layers are 1-based.
pub fn parse_layers(s: &str) -> Result<BTreeSet<usize>> {
    let bad = || Error::config(format!("invalid layer selection '{s}'"));
    let mut out = BTreeSet::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let lo: usize = lo.trim().parse().map_err(|_| bad())?;
                let hi: usize = hi.trim().parse().map_err(|_| bad())?;
                if lo > hi {
                    return Err(bad());
                }
                out.extend(lo..=hi);
            }
            None => {
                out.insert(part.parse().map_err(|_| bad())?);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Both factors Xavier-uniform.
    XavierBoth,
    /// `A` Xavier-uniform, `B` zero, so the adapted model starts frozen.
    #[default]
    XavierAZeroB,
    /// Both factors Kaiming-uniform (ReLU gain).
    KaimingBoth,
    /// Both factors N(0, 1/r²).
    GaussianBoth,
}

impl fmt::Display for InitPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitPolicy::XavierBoth => "xavier_both",
            InitPolicy::XavierAZeroB => "xavier_a_zero_b",
            InitPolicy::KaimingBoth => "kaiming_both",
            InitPolicy::GaussianBoth => "gaussian_both",
        })
    }
}

impl FromStr for InitPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "xavier_both" | "xavier" => Ok(InitPolicy::XavierBoth),
            "xavier_a_zero_b" => Ok(InitPolicy::XavierAZeroB),
            "kaiming_both" | "kaiming" => Ok(InitPolicy::KaimingBoth),
            "gaussian_both" | "gaussian" => Ok(InitPolicy::GaussianBoth),
            other => Err(Error::config(format!("unknown init policy '{other}'"))),
        }
    }
}

/// How `γ` is derived from rank and alpha.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingConvention {
    /// `γ = r / α`
    #[default]
    Paper,
    /// `γ = α / r`
    Conventional,
}

impl FromStr for ScalingConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "paper" => Ok(ScalingConvention::Paper),
            "conventional" => Ok(ScalingConvention::Conventional),
            other => Err(Error::config(format!("unknown scaling convention '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    /// 1-based indices of the adapted transformer blocks.
    pub target_layers: BTreeSet<usize>,
    pub target_projections: BTreeSet<Projection>,
    pub init_policy: InitPolicy,
    pub seed: u64,
    pub scaling: ScalingConvention,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec {
            rank: 16,
            alpha: 32.0,
            target_layers: [4, 5, 6].into(),
            target_projections: [Projection::Q, Projection::V].into(),
            init_policy: InitPolicy::default(),
            seed: 0,
            scaling: ScalingConvention::default(),
        }
    }
}

impl LoraSpec {
    pub fn gamma(&self) -> f64 {
        match self.scaling {
            ScalingConvention::Paper => self.rank as f64 / self.alpha,
            ScalingConvention::Conventional => self.alpha / self.rank as f64,
        }
    }

    pub fn validate(&self, config: &EncoderConfig) -> Result<()> {
        let d = config.embed_dim;
        if self.rank == 0 || self.rank > d {
            return Err(Error::config(format!(
                "rank {} must lie in [1, min(d, k)] = [1, {d}]",
                self.rank
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.target_projections.is_empty() {
            return Err(Error::config("no target projections"));
        }
        if self.target_layers.is_empty() {
            return Err(Error::config("no target layers"));
        }
        if let Some(&l) = self
            .target_layers
            .iter()
            .find(|&&l| l == 0 || l > config.num_layers)
        {
            return Err(Error::config(format!(
                "adapter targets layer {l}, encoder has layers 1..={}",
                config.num_layers
            )));
        }
        Ok(())
    }

    /// Σ over targets of r·(d + k).
    pub fn trainable_parameter_count(&self, config: &EncoderConfig) -> usize {
        let (d, k) = (config.embed_dim, config.embed_dim);
        self.target_layers.len() * self.target_projections.len() * self.rank * (d + k)
    }
}

/// One adapter's factors: `A` is r×k, `B` is d×r.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// `γ·B·(A·h)` for token rows `h` (n×k), via a throwaway tape.
pub fn delta_forward(pair: &LoraPair, gamma: f64, h: &Tensor) -> Result<Tensor> {
    let bound = BoundPair {
        a: pair.a.detach(),
        b: pair.b.detach(),
        gamma,
    };
    bound.delta_forward(&Tape::new(), h)
}

/// Adapter factors for every (layer, projection) target, plus the snapshot
/// they are restored to between episodes.
#[derive(Clone, Debug)]
pub struct LoraAdapterSet {
    spec: LoraSpec,
    gamma: f64,
    pairs: BTreeMap<(usize, Projection), LoraPair>,
    snapshot: BTreeMap<(usize, Projection), LoraPair>,
}

impl LoraAdapterSet {
    pub fn init(spec: &LoraSpec, config: &EncoderConfig) -> Result<Self> {
        spec.validate(config)?;
        let (d, k, r) = (config.embed_dim, config.embed_dim, spec.rank);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut pairs = BTreeMap::new();
        for &layer in &spec.target_layers {
            for &proj in &spec.target_projections {
                // A: fan_in = k, fan_out = r.  B: fan_in = r, fan_out = d.
                let a = draw(&mut rng, spec.init_policy, Factor::A, r * k, k, r, r);
                let b = draw(&mut rng, spec.init_policy, Factor::B, d * r, r, d, r);
                pairs.insert(
                    (layer, proj),
                    LoraPair {
                        a: Tensor::from_vec(vec![r, k], a)?,
                        b: Tensor::from_vec(vec![d, r], b)?,
                    },
                );
            }
        }
        Ok(LoraAdapterSet {
            spec: spec.clone(),
            gamma: spec.gamma(),
            snapshot: pairs.clone(),
            pairs,
        })
    }

    pub fn spec(&self) -> &LoraSpec {
        &self.spec
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rank(&self) -> usize {
        self.spec.rank
    }

    pub fn pairs(&self) -> &BTreeMap<(usize, Projection), LoraPair> {
        &self.pairs
    }

    pub fn get(&self, layer: usize, proj: Projection) -> Option<&LoraPair> {
        self.pairs.get(&(layer, proj))
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.pairs.values().map(|p| p.a.len() + p.b.len()).sum()
    }

    /// Restore every factor to its initialization snapshot.
    pub fn reset(&mut self) {
        self.pairs.clone_from(&self.snapshot);
    }

    /// Register all factors on `tape` as trainable leaves.
    pub fn bind(&self, tape: &Tape) -> BoundAdapters {
        self.bound_with(|t| tape.watch(t))
    }

    /// Untracked view of the current factors, for inference.
    pub fn constants(&self) -> BoundAdapters {
        self.bound_with(Tensor::detach)
    }

    fn bound_with(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> BoundAdapters {
        let pairs = self
            .pairs
            .iter()
            .map(|(key, p)| {
                (
                    *key,
                    BoundPair {
                        a: f(&p.a),
                        b: f(&p.b),
                        gamma: self.gamma,
                    },
                )
            })
            .collect();
        BoundAdapters { pairs }
    }

    /// Flat parameter buffers in canonical order: for each target in
    /// (layer, projection) order, `A` then `B`.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.pairs
            .values_mut()
            .flat_map(|p| [p.a.data_mut(), p.b.data_mut()])
            .collect()
    }

    pub fn param_lens(&self) -> Vec<usize> {
        self.pairs.values().flat_map(|p| [p.a.len(), p.b.len()]).collect()
    }

    /// Overwrite the current (not snapshot) factors for one target.
    pub fn set_pair(&mut self, layer: usize, proj: Projection, pair: LoraPair) -> Result<()> {
        let slot = self
            .pairs
            .get_mut(&(layer, proj))
            .ok_or_else(|| Error::config(format!("no adapter at layer {layer} {proj}")))?;
        if slot.a.shape() != pair.a.shape() || slot.b.shape() != pair.b.shape() {
            return Err(Error::shape("set_pair", "factor shapes differ"));
        }
        *slot = pair;
        Ok(())
    }
}

#[derive(Clone, Copy)]
enum Factor {
    A,
    B,
}

fn draw(
    rng: &mut ChaCha8Rng,
    policy: InitPolicy,
    factor: Factor,
    n: usize,
    fan_in: usize,
    fan_out: usize,
    rank: usize,
) -> Vec<f64> {
    let uniform = |rng: &mut ChaCha8Rng, bound: f64| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
    };
    let xavier = (6.0 / (fan_in + fan_out) as f64).sqrt();
    match (policy, factor) {
        (InitPolicy::XavierAZeroB, Factor::B) => vec![0.0; n],
        (InitPolicy::XavierBoth | InitPolicy::XavierAZeroB, _) => uniform(rng, xavier),
        (InitPolicy::KaimingBoth, _) => uniform(rng, (6.0 / fan_in as f64).sqrt()),
        (InitPolicy::GaussianBoth, _) => {
            let normal = Normal::new(0.0, 1.0 / rank as f64).expect("valid std");
            (0..n).map(|_| normal.sample(rng)).collect()
        }
    }
}

/// Adapter factors as tensors usable inside a forward pass.
#[derive(Clone, Debug)]
pub struct BoundPair {
    pub a: Tensor,
    pub b: Tensor,
    pub gamma: f64,
}

impl BoundPair {
    /// `γ·(h·Aᵀ)·Bᵀ` for token rows `h` (n×k).
    pub fn delta_forward(&self, tape: &Tape, h: &Tensor) -> Result<Tensor> {
        let low = tape.linear(h, &self.a, None)?;
        let up = tape.linear(&low, &self.b, None)?;
        tape.scale(&up, self.gamma)
    }
}

#[derive(Clone, Debug)]
pub struct BoundAdapters {
    pairs: BTreeMap<(usize, Projection), BoundPair>,
}

impl BoundAdapters {
    pub fn get(&self, layer: usize, proj: Projection) -> Option<&BoundPair> {
        self.pairs.get(&(layer, proj))
    }

    pub fn detached(&self) -> BoundAdapters {
        let pairs = self
            .pairs
            .iter()
            .map(|(k, p)| {
                (
                    *k,
                    BoundPair {
                        a: p.a.detach(),
                        b: p.b.detach(),
                        gamma: p.gamma,
                    },
                )
            })
            .collect();
        BoundAdapters { pairs }
    }

    /// Tensors in the same order as [`LoraAdapterSet::params_mut`].
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.pairs.values().flat_map(|p| [&p.a, &p.b]).collect()
    }

    pub fn check_against(&self, config: &EncoderConfig) -> Result<()> {
        for ((layer, proj), pair) in &self.pairs {
            if *layer == 0 || *layer > config.num_layers {
                return Err(Error::config(format!(
                    "adapter targets layer {layer}, encoder has layers 1..={}",
                    config.num_layers
                )));
            }
            let d = config.embed_dim;
            let (ra, ka) = (pair.a.shape()[0], pair.a.shape()[1]);
            if ka != d || pair.b.shape() != [d, ra] {
                return Err(Error::shape(
                    "adapter",
                    format!(
                        "layer {layer} {proj}: A {:?}, B {:?} for width {d}",
                        pair.a.shape(),
                        pair.b.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(policy: InitPolicy) -> LoraSpec {
        LoraSpec {
            rank: 4,
            alpha: 8.0,
            target_layers: [1, 2].into(),
            target_projections: [Projection::Q, Projection::V].into(),
            init_policy: policy,
            seed: 42,
            scaling: ScalingConvention::Paper,
        }
    }

    #[test]
    fn gamma_follows_rank_over_alpha() {
        let s = LoraSpec {
            rank: 16,
            alpha: 32.0,
            ..LoraSpec::default()
        };
        assert_eq!(s.gamma(), 0.5);
        let c = LoraSpec {
            scaling: ScalingConvention::Conventional,
            ..s
        };
        assert_eq!(c.gamma(), 2.0);
    }

    #[test]
    fn hand_delta_forward() {
        let pair = LoraPair {
            a: Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).unwrap(),
            b: Tensor::from_vec(vec![2, 1], vec![2.0, 0.0]).unwrap(),
        };
        let h = Tensor::from_vec(vec![1, 2], vec![3.0, 7.0]).unwrap();
        let out = delta_forward(&pair, 0.5, &h).unwrap();
        assert_eq!(out.data(), &[3.0, 0.0]);
    }

    #[test]
    fn zero_b_gives_zero_delta() {
        let cfg = EncoderConfig::micro();
        let set = LoraAdapterSet::init(&spec(InitPolicy::XavierAZeroB), &cfg).unwrap();
        let h = Tensor::from_vec(vec![2, 8], (0..16).map(f64::from).collect()).unwrap();
        for pair in set.pairs().values() {
            let out = delta_forward(pair, set.gamma(), &h).unwrap();
            assert!(out.data().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_bounded() {
        let cfg = EncoderConfig::micro();
        let a = LoraAdapterSet::init(&spec(InitPolicy::XavierBoth), &cfg).unwrap();
        let b = LoraAdapterSet::init(&spec(InitPolicy::XavierBoth), &cfg).unwrap();
        assert_eq!(a.pairs(), b.pairs());
        let bound_a = (6.0f64 / 12.0).sqrt();
        for p in a.pairs().values() {
            assert_eq!(p.a.shape(), &[4, 8]);
            assert_eq!(p.b.shape(), &[8, 4]);
            assert!(p.a.data().iter().all(|v| v.abs() < bound_a));
            assert!(p.b.data().iter().any(|v| *v != 0.0));
        }
    }

    #[test]
    fn every_policy_materializes() {
        let cfg = EncoderConfig::micro();
        for policy in [
            InitPolicy::XavierBoth,
            InitPolicy::XavierAZeroB,
            InitPolicy::KaimingBoth,
            InitPolicy::GaussianBoth,
        ] {
            let set = LoraAdapterSet::init(&spec(policy), &cfg).unwrap();
            assert_eq!(set.trainable_parameter_count(), 2 * 2 * 4 * 16);
            assert_eq!(policy.to_string().parse::<InitPolicy>().unwrap(), policy);
        }
    }

    #[test]
    fn rank_and_layer_bounds_are_enforced() {
        let cfg = EncoderConfig::micro();
        let mut s = spec(InitPolicy::XavierBoth);
        s.rank = 9;
        assert!(LoraAdapterSet::init(&s, &cfg).is_err());
        let mut s = spec(InitPolicy::XavierBoth);
        s.target_layers = [3].into();
        assert!(LoraAdapterSet::init(&s, &cfg).is_err());
        let mut s = spec(InitPolicy::XavierBoth);
        s.target_projections.clear();
        assert!(LoraAdapterSet::init(&s, &cfg).is_err());
    }

    #[test]
    fn reset_restores_snapshot_and_is_idempotent() {
        let cfg = EncoderConfig::micro();
        let mut set = LoraAdapterSet::init(&spec(InitPolicy::XavierAZeroB), &cfg).unwrap();
        let original = set.pairs().clone();
        for buf in set.params_mut() {
            buf.iter_mut().for_each(|v| *v += 0.25);
        }
        assert_ne!(set.pairs(), &original);
        set.reset();
        assert_eq!(set.pairs(), &original);
        set.reset();
        assert_eq!(set.pairs(), &original);
    }

    #[test]
    fn parameter_count_formula_at_vit_base_scale() {
        let cfg = EncoderConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
            out_dim: 512,
        };
        let s = LoraSpec {
            target_layers: [10, 11, 12].into(),
            ..LoraSpec::default()
        };
        assert_eq!(s.trainable_parameter_count(&cfg), 6 * 16 * 1536);
        assert_eq!(s.trainable_parameter_count(&cfg), 147_456);
    }

    #[test]
    fn layer_and_projection_parsing() {
        assert_eq!(parse_layers("4-6").unwrap(), [4, 5, 6].into());
        assert_eq!(parse_layers("1,3-4").unwrap(), [1, 3, 4].into());
        assert!(parse_layers("6-4").is_err());
        assert!(parse_layers("x").is_err());
        assert_eq!(
            parse_projections("q,k,v").unwrap(),
            [Projection::Q, Projection::K, Projection::V].into()
        );
        assert!(parse_projections("q,o").is_err());
    }
}
