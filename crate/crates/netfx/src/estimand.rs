//! Weight systems defining the estimand family: a member is determined by a
//! per-type weight vector `w_k(a, x)` over treatment assignments together
//! with a population weight `v_k(p_k)` and its derivative.
//!
//! Built-ins cover the direct effect (own treatment 1 vs 0, peers allocated
//! at rate `alpha`) and the indirect effect (untreated unit, peer rates
//! `alpha` vs `alpha_prime`). Any other bounded linear weight system can be
//! supplied through [`generic_spec`].

use crate::data::{policy_weight, TreatmentVector};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

/// A per-type allocation probability, either one value broadcast to all
/// types or an explicit map. In JSON the map is keyed by the type label as a
/// string: `0.4` or `{"1": 0.628, "2": 0.449}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "AllocationRepr", into = "AllocationRepr")]
pub enum Allocation {
    Scalar(f64),
    PerType(BTreeMap<usize, f64>),
}

#[derive(Serialize, Deserialize, Clone)]
#[serde(untagged)]
pub enum AllocationRepr {
    Scalar(f64),
    PerType(BTreeMap<String, f64>),
}

impl TryFrom<AllocationRepr> for Allocation {
    type Error = String;

    fn try_from(repr: AllocationRepr) -> std::result::Result<Self, String> {
        match repr {
            AllocationRepr::Scalar(v) => Ok(Allocation::Scalar(v)),
            AllocationRepr::PerType(map) => {
                let mut out = BTreeMap::new();
                for (key, v) in map {
                    let k: usize = key
                        .parse()
                        .map_err(|_| format!("type key `{key}` is not an integer"))?;
                    out.insert(k, v);
                }
                Ok(Allocation::PerType(out))
            }
        }
    }
}

impl From<Allocation> for AllocationRepr {
    fn from(alloc: Allocation) -> Self {
        match alloc {
            Allocation::Scalar(v) => AllocationRepr::Scalar(v),
            Allocation::PerType(map) => AllocationRepr::PerType(
                map.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            ),
        }
    }
}

impl Allocation {
    pub fn get(&self, k: usize) -> Result<f64> {
        let v = match self {
            Allocation::Scalar(v) => *v,
            Allocation::PerType(map) => *map.get(&k).ok_or_else(|| {
                Error::Config(format!("no allocation probability configured for type {k}"))
            })?,
        };
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!(
                "allocation probability for type {k} must lie in (0, 1), got {v}"
            )));
        }
        Ok(v)
    }
}

/// Counterfactual policy: `alpha` (and `alpha_prime` for contrasts between
/// two policies).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyAllocation {
    pub alpha: Allocation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_prime: Option<Allocation>,
}

impl PolicyAllocation {
    pub fn scalar(alpha: f64) -> Self {
        Self {
            alpha: Allocation::Scalar(alpha),
            alpha_prime: None,
        }
    }

    pub fn scalar_pair(alpha: f64, alpha_prime: f64) -> Self {
        Self {
            alpha: Allocation::Scalar(alpha),
            alpha_prime: Some(Allocation::Scalar(alpha_prime)),
        }
    }
}

type WeightClosure =
    dyn Fn(&TreatmentVector, &[Vec<f64>], usize) -> Result<Vec<f64>> + Send + Sync;
type ScalarFn = dyn Fn(f64) -> f64 + Send + Sync;

/// Which built-in (if any) a spec realizes. Estimators use this to reach the
/// simplified variance formulas available for the direct and indirect
/// effects.
#[derive(Clone)]
pub enum SpecKind {
    DirectEffect { alloc: PolicyAllocation },
    IndirectEffect { alloc: PolicyAllocation },
    Generic,
}

/// A member of the estimand family: weights plus the population weight pair
/// `(v, v')`. Immutable and freely shareable; weight evaluation is pure.
#[derive(Clone)]
pub struct EstimandSpec {
    pub name: String,
    pub kind: SpecKind,
    weight: Arc<WeightClosure>,
    v: Arc<ScalarFn>,
    v_prime: Arc<ScalarFn>,
}

impl std::fmt::Debug for EstimandSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EstimandSpec").field("name", &self.name).finish()
    }
}

impl EstimandSpec {
    /// Evaluate `w_k(a, x)`; every entry must be finite.
    pub fn weights(&self, a: &TreatmentVector, x: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
        let w = (self.weight)(a, x, k)?;
        if w.len() != a.len() {
            return Err(Error::Config(format!(
                "weight vector for type {k} has length {}, expected {}",
                w.len(),
                a.len()
            )));
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config(format!(
                "non-finite weight produced for type {k} under {}",
                self.name
            )));
        }
        Ok(w)
    }

    pub fn v(&self, p: f64) -> f64 {
        (self.v)(p)
    }

    pub fn v_prime(&self, p: f64) -> f64 {
        (self.v_prime)(p)
    }

    /// The allocation pair, for specs built from `alpha`-policies.
    pub fn allocation(&self) -> Option<&PolicyAllocation> {
        match &self.kind {
            SpecKind::DirectEffect { alloc } | SpecKind::IndirectEffect { alloc } => Some(alloc),
            SpecKind::Generic => None,
        }
    }
}

/// Direct-effect weights: entry `j` is
/// `{1(a_j = 1) - 1(a_j = 0)} pi(a_(-j); alpha_k) / M_k`, with `v(p) = p`.
pub fn de_spec(alloc: PolicyAllocation) -> EstimandSpec {
    let alloc_for_weight = alloc.clone();
    EstimandSpec {
        name: "DE".into(),
        kind: SpecKind::DirectEffect {
            alloc: alloc.clone(),
        },
        weight: Arc::new(move |a, _x, k| {
            let alpha = alloc_for_weight.alpha.get(k)?;
            let m = a.len() as f64;
            (0..a.len())
                .map(|j| {
                    let sign = if a.bit(j) == 1 { 1.0 } else { -1.0 };
                    Ok(sign * policy_weight(&a.without(j), alpha)? / m)
                })
                .collect()
        }),
        v: Arc::new(|p| p),
        v_prime: Arc::new(|_| 1.0),
    }
}

/// Indirect-effect weights: entry `j` is
/// `1(a_j = 0) {pi(a_(-j); alpha_k) - pi(a_(-j); alpha'_k)} / M_k`, with `v(p) = p`.
pub fn ie_spec(alloc: PolicyAllocation) -> Result<EstimandSpec> {
    if alloc.alpha_prime.is_none() {
        return Err(Error::Config(
            "indirect effect requires alpha_prime for the comparison policy".into(),
        ));
    }
    let alloc_for_weight = alloc.clone();
    Ok(EstimandSpec {
        name: "IE".into(),
        kind: SpecKind::IndirectEffect {
            alloc: alloc.clone(),
        },
        weight: Arc::new(move |a, _x, k| {
            let alpha = alloc_for_weight.alpha.get(k)?;
            let alpha_prime = alloc_for_weight
                .alpha_prime
                .as_ref()
                .expect("checked at construction")
                .get(k)?;
            let m = a.len() as f64;
            (0..a.len())
                .map(|j| {
                    if a.bit(j) == 0 {
                        let peers = a.without(j);
                        Ok((policy_weight(&peers, alpha)? - policy_weight(&peers, alpha_prime)?)
                            / m)
                    } else {
                        Ok(0.0)
                    }
                })
                .collect()
        }),
        v: Arc::new(|p| p),
        v_prime: Arc::new(|_| 1.0),
    })
}

/// A user-supplied weight table keyed by `(type, assignment)`. The value is a
/// weight vector as a function of the cluster's covariate matrix.
pub type GenericWeightTable =
    HashMap<(usize, Vec<u8>), Arc<dyn Fn(&[Vec<f64>]) -> Vec<f64> + Send + Sync>>;

/// Wrap an arbitrary bounded linear weight system. Undefined `(k, a)` pairs
/// and non-finite entries surface as configuration errors at evaluation.
pub fn generic_spec(
    name: &str,
    table: GenericWeightTable,
    v: Arc<ScalarFn>,
    v_prime: Arc<ScalarFn>,
) -> EstimandSpec {
    EstimandSpec {
        name: name.to_string(),
        kind: SpecKind::Generic,
        weight: Arc::new(move |a, x, k| {
            let f = table.get(&(k, a.bits().to_vec())).ok_or_else(|| {
                Error::Config(format!(
                    "generic weight table has no entry for type {k}, assignment {:?}",
                    a.bits()
                ))
            })?;
            Ok(f(x))
        }),
        v,
        v_prime,
    }
}
