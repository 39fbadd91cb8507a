//! JSON run configuration: the estimand, nuisance models, estimator kind,
//! and ingestion schema, in one versionable file.

use crate::data::{Dataset, IngestSchema, TypeProportions, TypeRule};
use crate::error::{Error, Result};
use crate::estimand::{
    de_spec, generic_spec, ie_spec, Allocation, EstimandSpec, GenericWeightTable,
    PolicyAllocation,
};
use crate::estimator::{NuisancePlan, OutcomeFitter, PropensityFitter};
use crate::outcome::{DesignSpec, KernelFitOptions, LinearFitOptions};
use crate::propensity::{
    FeatureSpec, KnownRandomization, LogisticFitOptions, DEFAULT_QUAD_ORDER,
};
use serde::Deserialize;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

/// Top-level run configuration.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub estimand: EstimandConfig,
    pub propensity: PropensityConfig,
    #[serde(default)]
    pub outcome: OutcomeConfig,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    /// Two-sided level for intervals and significance flags.
    #[serde(default = "default_level")]
    pub level: f64,
    #[serde(default)]
    pub data: DataConfig,
}

fn default_level() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind")]
pub enum EstimandConfig {
    #[serde(rename = "DE")]
    DirectEffect { alpha: Allocation },
    #[serde(rename = "IE")]
    IndirectEffect {
        alpha: Allocation,
        alpha_prime: Allocation,
    },
    /// Covariate-independent weight table: type -> assignment bits -> weights.
    /// Assignments are keyed by bit strings like `"01"` (unit order).
    #[serde(rename = "generic")]
    Generic {
        weights: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PropensityConfig {
    Known {
        prob: KnownProb,
    },
    LogisticMixed {
        #[serde(default = "default_quad")]
        quad_nodes: usize,
        #[serde(default)]
        feature_cols: Option<Vec<usize>>,
        #[serde(default)]
        pool_types: bool,
    },
}

fn default_quad() -> usize {
    DEFAULT_QUAD_ORDER
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum KnownProb {
    Scalar(f64),
    PerType(BTreeMap<String, f64>),
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutcomeConfig {
    #[default]
    LinearMixed,
    LinearMixedCustom {
        #[serde(default)]
        own_cols: Option<Vec<usize>>,
        #[serde(default)]
        peer_cols: Option<Vec<usize>>,
        #[serde(default)]
        interactions: Vec<crate::outcome::Interaction>,
        #[serde(default)]
        pool_types: bool,
    },
    Kernel {
        #[serde(default = "default_scale")]
        bandwidth_scale: f64,
        #[serde(default)]
        symmetrize_peers: bool,
    },
    Zero,
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
pub struct EstimatorConfig {
    #[serde(default)]
    pub kind: EstimatorKind,
    /// Fold seed for cross-fitting.
    #[serde(default)]
    pub seed: u64,
    /// `true` drops the type-proportion variance term; a map additionally
    /// fixes the proportions at design values.
    #[serde(default)]
    pub p_known: PKnown,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            kind: EstimatorKind::Aipw,
            seed: 0,
            p_known: PKnown::Flag(false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Aipw,
    Crossfit,
    /// Plug-in with the zero outcome model: pure inverse probability weighting.
    Ipw,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum PKnown {
    Flag(bool),
    Values(BTreeMap<String, f64>),
}

impl Default for PKnown {
    fn default() -> Self {
        PKnown::Flag(false)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default)]
    pub type_rule: TypeRule,
    #[serde(default)]
    pub discrete_cols: Vec<usize>,
    #[serde(default)]
    pub enumeration_cap: Option<usize>,
}

fn parse_type_key(key: &str) -> Result<usize> {
    key.parse::<usize>()
        .map_err(|_| Error::Config(format!("type key `{key}` is not an integer")))
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        if !(0.0..=1.0).contains(&cfg.level) {
            return Err(Error::Config(format!(
                "level must lie in [0, 1], got {}",
                cfg.level
            )));
        }
        Ok(cfg)
    }

    pub fn ingest_schema(&self) -> IngestSchema {
        IngestSchema {
            type_rule: self.data.type_rule,
            discrete_cols: self.data.discrete_cols.clone(),
            enumeration_cap: self
                .data
                .enumeration_cap
                .unwrap_or(crate::data::DEFAULT_ENUMERATION_CAP),
        }
    }

    pub fn build_spec(&self) -> Result<EstimandSpec> {
        match &self.estimand {
            EstimandConfig::DirectEffect { alpha } => Ok(de_spec(PolicyAllocation {
                alpha: alpha.clone(),
                alpha_prime: None,
            })),
            EstimandConfig::IndirectEffect { alpha, alpha_prime } => {
                ie_spec(PolicyAllocation {
                    alpha: alpha.clone(),
                    alpha_prime: Some(alpha_prime.clone()),
                })
            }
            EstimandConfig::Generic { weights } => {
                let mut table: GenericWeightTable = Default::default();
                for (k_key, by_assignment) in weights {
                    let k = parse_type_key(k_key)?;
                    for (bits_key, w) in by_assignment {
                        let bits: Vec<u8> = bits_key
                            .chars()
                            .map(|c| match c {
                                '0' => Ok(0u8),
                                '1' => Ok(1u8),
                                other => Err(Error::Config(format!(
                                    "assignment key `{bits_key}` contains `{other}`"
                                ))),
                            })
                            .collect::<Result<_>>()?;
                        let w = w.clone();
                        table.insert((k, bits), Arc::new(move |_x: &[Vec<f64>]| w.clone()));
                    }
                }
                Ok(generic_spec(
                    "generic",
                    table,
                    Arc::new(|p| p),
                    Arc::new(|_| 1.0),
                ))
            }
        }
    }

    pub fn build_plan(&self) -> Result<NuisancePlan> {
        let propensity = match &self.propensity {
            PropensityConfig::Known { prob } => {
                let design = match prob {
                    KnownProb::Scalar(p) => KnownRandomization::uniform(*p)?,
                    KnownProb::PerType(map) => {
                        let mut by_type = BTreeMap::new();
                        for (key, &p) in map {
                            by_type.insert(parse_type_key(key)?, p);
                        }
                        KnownRandomization::per_type(by_type)?
                    }
                };
                PropensityFitter::Known(design)
            }
            PropensityConfig::LogisticMixed {
                quad_nodes,
                feature_cols,
                pool_types,
            } => PropensityFitter::LogisticMixed(LogisticFitOptions {
                features: FeatureSpec {
                    cols: feature_cols.clone(),
                },
                quad_order: *quad_nodes,
                pool_types: *pool_types,
                ..LogisticFitOptions::default()
            }),
        };
        let outcome = if self.estimator.kind == EstimatorKind::Ipw {
            OutcomeFitter::Zero
        } else {
            match &self.outcome {
                OutcomeConfig::LinearMixed => {
                    OutcomeFitter::LinearMixed(LinearFitOptions::default())
                }
                OutcomeConfig::LinearMixedCustom {
                    own_cols,
                    peer_cols,
                    interactions,
                    pool_types,
                } => OutcomeFitter::LinearMixed(LinearFitOptions {
                    design: DesignSpec {
                        own_cols: own_cols.clone(),
                        peer_cols: peer_cols.clone(),
                        interactions: interactions.clone(),
                    },
                    pool_types: *pool_types,
                    ..LinearFitOptions::default()
                }),
                OutcomeConfig::Kernel {
                    bandwidth_scale,
                    symmetrize_peers,
                } => OutcomeFitter::Kernel(KernelFitOptions {
                    bandwidth_scale: *bandwidth_scale,
                    symmetrize_peers: *symmetrize_peers,
                }),
                OutcomeConfig::Zero => OutcomeFitter::Zero,
            }
        };
        Ok(NuisancePlan {
            propensity,
            outcome,
        })
    }

    pub fn proportions(&self, data: &Dataset) -> Result<TypeProportions> {
        match &self.estimator.p_known {
            PKnown::Flag(false) => Ok(TypeProportions::estimated(data)),
            PKnown::Flag(true) => {
                let mut p = TypeProportions::estimated(data);
                p.known = true;
                Ok(p)
            }
            PKnown::Values(map) => {
                let mut by_type = BTreeMap::new();
                for (key, &v) in map {
                    by_type.insert(parse_type_key(key)?, v);
                }
                TypeProportions::known(by_type)
            }
        }
    }

    /// Cross-check per-type configuration entries against the loaded data:
    /// every type referenced must exist, and per-type maps must cover every
    /// type present.
    pub fn validate_against(&self, data: &Dataset) -> Result<()> {
        let check_alloc = |alloc: &Allocation, what: &str| -> Result<()> {
            if let Allocation::PerType(map) = alloc {
                for &k in map.keys() {
                    data.type_info(k).map_err(|_| {
                        Error::Config(format!("{what} references type {k}, absent from the data"))
                    })?;
                }
                for &k in data.types().keys() {
                    if !map.contains_key(&k) {
                        return Err(Error::Config(format!(
                            "{what} has no entry for type {k} present in the data"
                        )));
                    }
                }
            }
            Ok(())
        };
        match &self.estimand {
            EstimandConfig::DirectEffect { alpha } => check_alloc(alpha, "estimand.alpha")?,
            EstimandConfig::IndirectEffect { alpha, alpha_prime } => {
                check_alloc(alpha, "estimand.alpha")?;
                check_alloc(alpha_prime, "estimand.alpha_prime")?;
            }
            EstimandConfig::Generic { weights } => {
                for k_key in weights.keys() {
                    let k = parse_type_key(k_key)?;
                    data.type_info(k).map_err(|_| {
                        Error::Config(format!(
                            "generic weights reference type {k}, absent from the data"
                        ))
                    })?;
                }
            }
        }
        if let PropensityConfig::Known {
            prob: KnownProb::PerType(map),
        } = &self.propensity
        {
            for key in map.keys() {
                let k = parse_type_key(key)?;
                data.type_info(k).map_err(|_| {
                    Error::Config(format!(
                        "propensity.prob references type {k}, absent from the data"
                    ))
                })?;
            }
            for &k in data.types().keys() {
                if !map.contains_key(&k.to_string()) {
                    return Err(Error::Config(format!(
                        "propensity.prob has no entry for type {k} present in the data"
                    )));
                }
            }
        }
        if let PKnown::Values(map) = &self.estimator.p_known {
            for key in map.keys() {
                let k = parse_type_key(key)?;
                data.type_info(k).map_err(|_| {
                    Error::Config(format!(
                        "estimator.p_known references type {k}, absent from the data"
                    ))
                })?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_de_known_config() {
        let cfg = RunConfig::from_str(
            r#"{
                "estimand": {"kind": "DE", "alpha": {"1": 0.628, "2": 0.449}},
                "propensity": {"kind": "known", "prob": {"1": 0.628, "2": 0.449}},
                "outcome": {"kind": "zero"},
                "estimator": {"kind": "ipw"}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.level, 0.05);
        let spec = cfg.build_spec().unwrap();
        assert_eq!(spec.name, "DE");
        cfg.build_plan().unwrap();
    }

    #[test]
    fn parses_logistic_mixed_and_kernel() {
        let cfg = RunConfig::from_str(
            r#"{
                "estimand": {"kind": "IE", "alpha": 0.8, "alpha_prime": 0.2},
                "propensity": {"kind": "logistic_mixed", "quad_nodes": 20},
                "outcome": {"kind": "kernel", "bandwidth_scale": 1.5},
                "estimator": {"kind": "crossfit", "seed": 11},
                "data": {"discrete_cols": [1]}
            }"#,
        )
        .unwrap();
        cfg.build_spec().unwrap();
        cfg.build_plan().unwrap();
        assert_eq!(cfg.ingest_schema().discrete_cols, vec![1]);
    }

    #[test]
    fn rejects_bad_level_and_unknown_fields() {
        assert!(RunConfig::from_str(
            r#"{"estimand": {"kind": "DE", "alpha": 0.4},
                "propensity": {"kind": "known", "prob": 0.5},
                "level": 1.5}"#,
        )
        .is_err());
        assert!(RunConfig::from_str(
            r#"{"estimand": {"kind": "DE", "alpha": 0.4},
                "propensity": {"kind": "known", "prob": 0.5},
                "unknown_field": 1}"#,
        )
        .is_err());
    }

    #[test]
    fn generic_weight_table_from_json() {
        let cfg = RunConfig::from_str(
            r#"{
                "estimand": {"kind": "generic", "weights": {"1": {"00": [0.0, 0.0], "10": [0.5, 0.0], "01": [0.0, 0.5], "11": [0.5, 0.5]}}},
                "propensity": {"kind": "known", "prob": 0.5}
            }"#,
        )
        .unwrap();
        let spec = cfg.build_spec().unwrap();
        let a = crate::data::TreatmentVector::new(vec![1, 0]).unwrap();
        let w = spec
            .weights(&a, &[vec![0.0], vec![0.0]], 1)
            .unwrap();
        assert_eq!(w, vec![0.5, 0.0]);
    }
}
