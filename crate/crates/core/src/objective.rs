//! Class probabilities from prototype similarity, per-view entropy, the
//! confidence-weighted entropy objective and the confidence-selection
//! baseline, plus entropy-octile analytics.
//!
//! Entropies are in nats. The weighted objective is
//! `(1/N) Σ β(H_v)·H_v` over the kept views, with `β(H) = exp(ε − H)` in the
//! default `confident_up` direction. The selection baseline keeps the
//! `⌈ρ·N⌉` lowest-entropy views and takes the entropy of their averaged
//! probability vector.

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{softmax_into, Tape, Tensor};

pub const DEFAULT_TEMPERATURE: f64 = 100.0;

/// One unit-norm prototype row per class, standing in for text features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrototypes {
    matrix: Tensor,
    names: Vec<String>,
}

impl ClassPrototypes {
    /// Rows must already be unit norm (to 1e-12).
    pub fn new(matrix: Tensor, names: Vec<String>) -> Result<Self> {
        let (c, e) = match matrix.shape() {
            [c, e] => (*c, *e),
            s => return Err(Error::shape("prototypes", format!("expected C×D, got {s:?}"))),
        };
        if names.len() != c || c == 0 {
            return Err(Error::shape(
                "prototypes",
                format!("{} class names for {c} rows", names.len()),
            ));
        }
        for (i, row) in matrix.data().chunks_exact(e).enumerate() {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-12 {
                return Err(Error::shape(
                    "prototypes",
                    format!("row {i} has norm {norm}, expected 1"),
                ));
            }
        }
        Ok(ClassPrototypes { matrix, names })
    }

    /// Normalize arbitrary rows and wrap them.
    pub fn from_rows(rows: Vec<Vec<f64>>, names: Vec<String>) -> Result<Self> {
        let e = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * e);
        for row in &rows {
            if row.len() != e {
                return Err(Error::shape("prototypes", "ragged rows"));
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::shape("prototypes", "zero-norm prototype"));
            }
            data.extend(row.iter().map(|v| v / norm));
        }
        Self::new(Tensor::from_vec(vec![rows.len(), e], data)?, names)
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn num_classes(&self) -> usize {
        self.names.len()
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// A class distribution with its logits (`τ·s`) and entropy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbVector {
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
    pub entropy: f64,
}

impl ProbVector {
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    fn from_logits(logits: Vec<f64>) -> Self {
        let mut probs = vec![0.0; logits.len()];
        softmax_into(&logits, 1.0, &mut probs);
        let entropy = entropy_unchecked(&probs);
        ProbVector {
            probs,
            logits,
            entropy,
        }
    }

    /// Average several distributions. Logits become log-probabilities.
    pub fn average(items: &[ProbVector]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::shape("average", "no distributions"))?;
        let mut probs = vec![0.0; first.probs.len()];
        for p in items {
            probs.iter_mut().zip(&p.probs).for_each(|(a, b)| *a += b);
        }
        probs.iter_mut().for_each(|v| *v /= items.len() as f64);
        let entropy = entropy_unchecked(&probs);
        let logits = probs.iter().map(|p| p.ln()).collect();
        Ok(ProbVector {
            probs,
            logits,
            entropy,
        })
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `softmax(τ · cos(embedding, prototype_c))` over classes.
pub fn predict_probs(embedding: &Tensor, prototypes: &ClassPrototypes, temperature: f64) -> Result<ProbVector> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {temperature}")));
    }
    let e = embedding.data();
    if e.len() != prototypes.dim() {
        return Err(Error::shape(
            "predict_probs",
            format!("embedding of {} against prototypes of width {}", e.len(), prototypes.dim()),
        ));
    }
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::NonFinite { op: "predict_probs" });
    }
    let logits = prototypes
        .matrix
        .data()
        .chunks_exact(e.len())
        .map(|row| temperature * row.iter().zip(e).map(|(p, x)| p * x).sum::<f64>() / norm)
        .collect();
    Ok(ProbVector::from_logits(logits))
}

/// Class probabilities for a batch of unit-norm embeddings (N×D) on a tape.
pub fn probs_on_tape(
    tape: &Tape,
    embeddings: &Tensor,
    prototypes: &ClassPrototypes,
    temperature: f64,
) -> Result<Tensor> {
    let sims = tape.linear(embeddings, &prototypes.matrix, None)?;
    tape.softmax(&sims, temperature)
}

fn entropy_unchecked(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// `H = −Σ p ln p` with `0·ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(Error::config("probability vector has negative or non-finite entries"));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::config(format!("probabilities sum to {total}, not 1")));
    }
    Ok(entropy_unchecked(probs))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDirection {
    /// `β = exp(ε − H)`: confident views weigh more.
    #[default]
    ConfidentUp,
    /// `β = exp(ε + H)`: high-entropy views weigh more.
    Literal,
    /// `β = 1` for every view.
    Uniform,
}

impl FromStr for WeightDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "confident_up" => Ok(WeightDirection::ConfidentUp),
            "literal" => Ok(WeightDirection::Literal),
            "uniform" => Ok(WeightDirection::Uniform),
            other => Err(Error::config(format!("unknown weight direction '{other}'"))),
        }
    }
}

impl fmt::Display for WeightDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightDirection::ConfidentUp => "confident_up",
            WeightDirection::Literal => "literal",
            WeightDirection::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedLossConfig {
    pub epsilon: f64,
    pub beta_stop_gradient: bool,
    pub weight_direction: WeightDirection,
    pub cutoff_percentile: f64,
}

impl Default for WeightedLossConfig {
    fn default() -> Self {
        WeightedLossConfig {
            epsilon: 0.4,
            beta_stop_gradient: true,
            weight_direction: WeightDirection::ConfidentUp,
            cutoff_percentile: 1.0,
        }
    }
}

impl WeightedLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() {
            return Err(Error::config("epsilon must be finite"));
        }
        check_rho(self.cutoff_percentile)
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::config(format!("cutoff percentile {rho} outside (0, 1]")));
    }
    Ok(())
}

pub fn beta_weight(entropy: f64, cfg: &WeightedLossConfig) -> f64 {
    match cfg.weight_direction {
        WeightDirection::ConfidentUp => (cfg.epsilon - entropy).exp(),
        WeightDirection::Literal => (cfg.epsilon + entropy).exp(),
        WeightDirection::Uniform => 1.0,
    }
}

/// Indices of the `⌈ρ·N⌉` lowest-entropy views, ordered by entropy with
/// ties broken by index.
pub fn select_confident(entropies: &[f64], rho: f64) -> Result<Vec<usize>> {
    check_rho(rho)?;
    let n = entropies.len();
    // Tolerance absorbs representation error in products such as 0.3·10.
    let keep = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| entropies[a].total_cmp(&entropies[b]).then(a.cmp(&b)));
    order.truncate(keep.min(n));
    Ok(order)
}

/// Row entropies of an N×C probability matrix, computed off-tape.
pub fn row_entropies(probs: &Tensor) -> Result<Vec<f64>> {
    let c = match probs.shape() {
        [_, c] => *c,
        s => return Err(Error::shape("row_entropies", format!("expected N×C, got {s:?}"))),
    };
    Ok(probs.data().chunks_exact(c).map(entropy_unchecked).collect())
}

/// Loss value plus the per-view quantities that produced it.
#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: Tensor,
    /// Entropy of every view, in input order.
    pub entropies: Vec<f64>,
    /// β for every view in input order (1 where the method has no weights).
    pub betas: Vec<f64>,
    /// Views that contributed to the loss.
    pub kept: Vec<usize>,
}

/// `(1/N) Σ β(H_v)·H_v` over the `⌈ρ·N⌉` most confident of the N×C view
/// probabilities (all views at the default ρ = 1).
pub fn weighted_entropy_loss(tape: &Tape, probs: &Tensor, cfg: &WeightedLossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    let entropies = row_entropies(probs)?;
    if entropies.is_empty() {
        return Err(Error::shape("weighted_entropy_loss", "no views"));
    }
    let kept = select_confident(&entropies, cfg.cutoff_percentile)?;
    let betas: Vec<f64> = entropies.iter().map(|&h| beta_weight(h, cfg)).collect();
    let rows: Vec<usize> = if kept.len() == entropies.len() {
        (0..kept.len()).collect()
    } else {
        kept.clone()
    };
    let kept_probs = if kept.len() == entropies.len() {
        probs.clone()
    } else {
        tape.gather_rows(probs, &rows)?
    };
    let h = tape.entropy_rows(&kept_probs)?;
    let beta = if cfg.beta_stop_gradient || cfg.weight_direction == WeightDirection::Uniform {
        Tensor::from_vec(vec![rows.len()], rows.iter().map(|&i| betas[i]).collect())?
    } else {
        let exponent = match cfg.weight_direction {
            WeightDirection::ConfidentUp => tape.scale(&h, -1.0)?,
            WeightDirection::Literal | WeightDirection::Uniform => h.clone(),
        };
        let exponent = tape.add_scalar(&exponent, cfg.epsilon)?;
        tape.exp(&exponent)?
    };
    let weighted = tape.mul(&beta, &h)?;
    let loss = tape.mean(&weighted)?;
    Ok(LossOutput {
        loss,
        entropies,
        betas,
        kept,
    })
}

/// Mean per-view entropy with every weight fixed to one.
pub fn mean_entropy_loss(tape: &Tape, probs: &Tensor) -> Result<LossOutput> {
    let entropies = row_entropies(probs)?;
    if entropies.is_empty() {
        return Err(Error::shape("mean_entropy_loss", "no views"));
    }
    let h = tape.entropy_rows(probs)?;
    let loss = tape.mean(&h)?;
    Ok(LossOutput {
        loss,
        betas: vec![1.0; entropies.len()],
        kept: (0..entropies.len()).collect(),
        entropies,
    })
}

/// Entropy of the averaged probability vector over the `⌈ρ·N⌉` lowest-entropy
/// views.
pub fn selected_entropy_loss(tape: &Tape, probs: &Tensor, rho: f64) -> Result<LossOutput> {
    let entropies = row_entropies(probs)?;
    if entropies.is_empty() {
        return Err(Error::shape("selected_entropy_loss", "no views"));
    }
    let kept = select_confident(&entropies, rho)?;
    let kept_probs = tape.gather_rows(probs, &kept)?;
    let avg = tape.mean_rows(&kept_probs)?;
    let c = avg.len();
    let avg = tape.reshape(&avg, vec![1, c])?;
    let h = tape.entropy_rows(&avg)?;
    let loss = tape.reshape(&h, Vec::new())?;
    Ok(LossOutput {
        loss,
        betas: vec![1.0; entropies.len()],
        kept,
        entropies,
    })
}

/// One entropy octile: records sorted by entropy, eight near-equal slices.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OctileBin {
    pub index: usize,
    pub count: usize,
    pub min_entropy: f64,
    pub max_entropy: f64,
    pub mean_entropy: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OctileReport {
    pub bins: Vec<OctileBin>,
    /// Bin of each input record, in input order.
    pub assignment: Vec<usize>,
}

/// Sort by entropy (stable) and split into 8 bins; the first `n mod 8`
/// bins take one extra record.
pub fn octile_report(records: &[(f64, bool)]) -> Result<OctileReport> {
    let n = records.len();
    if n < 8 {
        return Err(Error::config(format!("octile report needs at least 8 records, got {n}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| records[a].0.total_cmp(&records[b].0));
    let (base, extra) = (n / 8, n % 8);
    let mut assignment = vec![0; n];
    let mut bins = Vec::with_capacity(8);
    let mut start = 0;
    for index in 0..8 {
        let size = base + usize::from(index < extra);
        let slice = &order[start..start + size];
        for &i in slice {
            assignment[i] = index;
        }
        let ents: Vec<f64> = slice.iter().map(|&i| records[i].0).collect();
        let correct = slice.iter().filter(|&&i| records[i].1).count();
        bins.push(OctileBin {
            index,
            count: size,
            min_entropy: ents.iter().copied().fold(f64::INFINITY, f64::min),
            max_entropy: ents.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            mean_entropy: ents.iter().sum::<f64>() / size as f64,
            accuracy: correct as f64 / size as f64,
        });
        start += size;
    }
    Ok(OctileReport { bins, assignment })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_tensor(rows: &[&[f64]]) -> Tensor {
        let c = rows[0].len();
        Tensor::from_vec(vec![rows.len(), c], rows.concat()).unwrap()
    }

    #[test]
    fn entropy_reference_values() {
        let uniform = vec![0.1; 10];
        assert!((entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let h = entropy(&[0.7, 0.2, 0.1]).unwrap();
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((h - oracle).abs() < 1e-15);
        assert!((h - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn entropy_rejects_invalid_vectors() {
        assert!(entropy(&[-0.1, 1.1]).is_err());
        assert!(entropy(&[0.5, 0.4]).is_err());
    }

    #[test]
    fn beta_reference_values() {
        let cfg = WeightedLossConfig::default();
        assert_eq!(beta_weight(0.4, &cfg), 1.0);
        assert!((beta_weight(0.0, &cfg) - 0.4f64.exp()).abs() < 1e-15);
        assert!((beta_weight(0.0, &cfg) - 1.491825).abs() < 1e-6);
        let lit = WeightedLossConfig {
            weight_direction: WeightDirection::Literal,
            ..cfg
        };
        assert!((beta_weight(0.1, &lit) - 0.5f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn beta_monotonicity_over_grid() {
        let up = WeightedLossConfig::default();
        let lit = WeightedLossConfig {
            weight_direction: WeightDirection::Literal,
            ..up.clone()
        };
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
        for w in grid.windows(2) {
            assert!(beta_weight(w[1], &up) < beta_weight(w[0], &up));
            assert!(beta_weight(w[1], &lit) > beta_weight(w[0], &lit));
        }
    }

    #[test]
    fn predict_probs_limits() {
        let names: Vec<String> = (0..3).map(|i| format!("c{i}")).collect();
        let protos = ClassPrototypes::from_rows(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            names.clone(),
        )
        .unwrap();
        let e = Tensor::from_vec(vec![3], vec![0.0, 1.0, 0.0]).unwrap();
        let p = predict_probs(&e, &protos, 100.0).unwrap();
        assert_eq!(p.argmax(), 1);
        assert!(p.probs[0] < 1e-40 && p.probs[2] < 1e-40);

        let same = ClassPrototypes::from_rows(vec![vec![1.0, 2.0, 0.0]; 3], names).unwrap();
        let p = predict_probs(&e, &same, 100.0).unwrap();
        for v in &p.probs {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((p.entropy - 3f64.ln()).abs() < 1e-12);

        let zero = Tensor::zeros(vec![3]);
        assert!(predict_probs(&zero, &protos, 100.0).is_err());
    }

    #[test]
    fn prototypes_must_be_unit_rows() {
        let m = Tensor::from_vec(vec![1, 2], vec![1.0, 1.0]).unwrap();
        assert!(ClassPrototypes::new(m, vec!["a".into()]).is_err());
    }

    #[test]
    fn weighted_loss_hand_cases() {
        let tape = Tape::new();
        let cfg = WeightedLossConfig::default();
        let one_hot = probs_tensor(&[&[0.0, 1.0, 0.0]]);
        let out = weighted_entropy_loss(&tape, &one_hot, &cfg).unwrap();
        assert_eq!(out.loss.item().unwrap(), 0.0);

        // Two views at H = ε: β = 1, so the loss is the mean entropy ε.
        let h_eps = two_class_with_entropy(0.4);
        let two = probs_tensor(&[&h_eps, &h_eps]);
        let out = weighted_entropy_loss(&tape, &two, &cfg).unwrap();
        assert_eq!(out.betas, vec![1.0, 1.0]);
        assert!((out.loss.item().unwrap() - 0.4).abs() < 1e-12);
    }

    /// Two-class distribution with the requested entropy, by bisection.
    fn two_class_with_entropy(target: f64) -> [f64; 2] {
        let (mut lo, mut hi) = (1e-12, 0.5);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if entropy(&[mid, 1.0 - mid]).unwrap() < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let p = 0.5 * (lo + hi);
        [p, 1.0 - p]
    }

    #[test]
    fn selection_keeps_ceil_rho_n() {
        let ents = [0.5, 0.1, 0.9, 0.3];
        assert_eq!(select_confident(&ents, 0.5).unwrap(), vec![1, 3]);
        assert_eq!(select_confident(&ents, 0.25).unwrap(), vec![1]);
        assert_eq!(select_confident(&ents, 1.0).unwrap().len(), 4);
        assert_eq!(select_confident(&[0.0; 10], 0.3).unwrap().len(), 3);
        assert!(select_confident(&ents, 0.0).is_err());
        assert!(select_confident(&ents, 1.5).is_err());
    }

    #[test]
    fn octiles_small_cases() {
        let records: Vec<(f64, bool)> = (1..=8).map(|i| (i as f64, i % 2 == 0)).collect();
        let r = octile_report(&records).unwrap();
        assert!(r.bins.iter().all(|b| b.count == 1));
        assert!(r.bins.iter().all(|b| b.accuracy == 0.0 || b.accuracy == 1.0));
        let all: Vec<(f64, bool)> = (0..20).map(|i| (i as f64 * 0.1, true)).collect();
        let r = octile_report(&all).unwrap();
        assert!(r.bins.iter().all(|b| b.accuracy == 1.0));
        assert_eq!(r.bins.iter().map(|b| b.count).collect::<Vec<_>>(), [3, 3, 3, 3, 2, 2, 2, 2]);
        assert!(octile_report(&records[..7]).is_err());
    }
}
