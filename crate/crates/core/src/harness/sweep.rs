//! One-axis ablation sweeps over the evaluation configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{parse_layers, parse_projections, InitPolicy};

use super::dataset::Dataset;
use super::eval::{run_eval, EvalConfig, SummaryRow, SUMMARY_HEADER};
use super::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Rank,
    Alpha,
    Layers,
    AttentionGroups,
    CutoffRho,
    NumViews,
    Steps,
    Epsilon,
    InitPolicy,
}

impl SweepAxis {
    /// Whether one value may itself contain commas (a set of layers or
    /// projections).
    pub fn takes_sets(self) -> bool {
        matches!(self, SweepAxis::Layers | SweepAxis::AttentionGroups)
    }

    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &EvalConfig, value: &str) -> Result<EvalConfig> {
        let mut cfg = base.clone();
        let v = value.trim();
        let bad = |what: &str| Error::config(format!("invalid {what} value '{v}'"));
        match self {
            SweepAxis::Rank => cfg.lora.rank = v.parse().map_err(|_| bad("rank"))?,
            SweepAxis::Alpha => cfg.lora.alpha = v.parse().map_err(|_| bad("alpha"))?,
            SweepAxis::Layers => cfg.lora.target_layers = parse_layers(v)?,
            SweepAxis::AttentionGroups => cfg.lora.target_projections = parse_projections(v)?,
            SweepAxis::CutoffRho => cfg.loss.cutoff_percentile = v.parse().map_err(|_| bad("cutoff_rho"))?,
            SweepAxis::NumViews => cfg.augment.num_views = v.parse().map_err(|_| bad("num_views"))?,
            SweepAxis::Steps => cfg.adapt.steps = v.parse().map_err(|_| bad("steps"))?,
            SweepAxis::Epsilon => cfg.loss.epsilon = v.parse().map_err(|_| bad("epsilon"))?,
            SweepAxis::InitPolicy => cfg.lora.init_policy = v.parse::<InitPolicy>()?,
        }
        cfg.loss.validate()?;
        cfg.augment.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Rank => "rank",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Layers => "layers",
            SweepAxis::AttentionGroups => "attention_groups",
            SweepAxis::CutoffRho => "cutoff_rho",
            SweepAxis::NumViews => "num_views",
            SweepAxis::Steps => "steps",
            SweepAxis::Epsilon => "epsilon",
            SweepAxis::InitPolicy => "init_policy",
        })
    }
}

impl FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "rank" => Ok(SweepAxis::Rank),
            "alpha" => Ok(SweepAxis::Alpha),
            "layers" => Ok(SweepAxis::Layers),
            "attention_groups" | "proj" => Ok(SweepAxis::AttentionGroups),
            "cutoff_rho" | "rho" => Ok(SweepAxis::CutoffRho),
            "num_views" | "views" => Ok(SweepAxis::NumViews),
            "steps" => Ok(SweepAxis::Steps),
            "epsilon" => Ok(SweepAxis::Epsilon),
            "init_policy" | "init" => Ok(SweepAxis::InitPolicy),
            other => Err(Error::config(format!("unknown sweep axis '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<String>,
}

impl SweepSpec {
    /// Build from raw arguments. For scalar axes each argument may hold a
    /// comma-separated list; for set-valued axes each argument is one value.
    pub fn parse(axis: SweepAxis, args: &[String]) -> Result<Self> {
        let values: Vec<String> = if axis.takes_sets() {
            args.iter().map(|a| a.trim().to_string()).collect()
        } else {
            args.iter()
                .flat_map(|a| a.split(','))
                .map(|s| s.trim().to_string())
                .filter(|s| !s.is_empty())
                .collect()
        };
        let spec = SweepSpec { axis, values };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("a sweep needs at least one value"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: String,
    pub seed: u64,
    pub summary: SummaryRow,
}

pub fn sweep_header() -> Vec<&'static str> {
    let mut h = vec!["axis", "value", "seed"];
    h.extend(SUMMARY_HEADER);
    h
}

impl SweepRow {
    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.axis.to_string(), self.value.clone(), self.seed.to_string()];
        r.extend(self.summary.record());
        r
    }
}

/// One evaluation per (value, seed); every value sees the same seeds.
pub fn run_sweep(model: &Model, dataset: &Dataset, base: &EvalConfig, spec: &SweepSpec, seeds: &[u64]) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("a sweep needs at least one seed"));
    }
    let configs = spec
        .values
        .iter()
        .map(|v| spec.axis.apply(base, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len() * seeds.len());
    for (value, cfg) in configs {
        for &seed in seeds {
            let outcome = run_eval(model, dataset, &cfg.clone().with_seed(seed))?;
            rows.push(SweepRow {
                axis: spec.axis,
                value: value.clone(),
                seed,
                summary: outcome.summary,
            });
        }
    }
    Ok(rows)
}
