//! Cluster-structured data: treatment vectors, cluster observations,
//! dataset validation, CSV ingestion, and the treatment-allocation weights
//! `pi(a; alpha)` that define counterfactual policies.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

/// Default cap on cluster size for treatment enumeration. Evaluating a
/// cluster touches all `2^M` assignments, so cost is exponential in `M`.
pub const DEFAULT_ENUMERATION_CAP: usize = 15;

/// A binary treatment assignment for one cluster, one entry per unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TreatmentVector(Vec<u8>);

impl TreatmentVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Domain("treatment entries must be 0 or 1".into()));
        }
        Ok(Self(bits))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn bit(&self, j: usize) -> u8 {
        self.0[j]
    }

    /// Number of treated units.
    pub fn ones(&self) -> usize {
        self.0.iter().map(|&b| b as usize).sum()
    }

    /// Entries for all units except `j`, preserving order.
    pub fn without(&self, j: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len().saturating_sub(1));
        for (i, &b) in self.0.iter().enumerate() {
            if i != j {
                out.push(b);
            }
        }
        out
    }
}

/// All `2^m` treatment vectors of length `m` in lexicographic order with the
/// least-significant unit index varying fastest. Deterministic, so results
/// that sum over assignments are bit-reproducible.
pub fn enumerate_assignments(m: usize) -> Result<Vec<TreatmentVector>> {
    enumerate_assignments_capped(m, DEFAULT_ENUMERATION_CAP)
}

/// As [`enumerate_assignments`], with an explicit cap.
pub fn enumerate_assignments_capped(m: usize, cap: usize) -> Result<Vec<TreatmentVector>> {
    if m > cap {
        return Err(Error::Capacity { requested: m, cap });
    }
    let count = 1usize << m;
    let mut out = Vec::with_capacity(count);
    for n in 0..count {
        let bits = (0..m).map(|j| ((n >> j) & 1) as u8).collect();
        out.push(TreatmentVector(bits));
    }
    Ok(out)
}

/// Probability of peers' assignment `a_minus_j` when each peer is treated
/// independently with probability `alpha`: the product of `alpha^a (1-alpha)^(1-a)`.
pub fn policy_weight(a_minus_j: &[u8], alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!(
            "allocation probability alpha must lie in (0, 1), got {alpha}"
        )));
    }
    let mut w = 1.0;
    for &b in a_minus_j {
        w *= if b == 1 { alpha } else { 1.0 - alpha };
    }
    Ok(w)
}

/// Whether a covariate column is smoothed continuously or matched discretely
/// by the kernel outcome model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateKind {
    Continuous,
    Discrete,
}

/// One cluster's observed data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterObservation {
    pub cluster_id: String,
    /// Cluster type `k` in `1..=K`.
    pub type_label: usize,
    /// Outcomes, one per unit.
    pub y: Vec<f64>,
    /// Observed treatment vector.
    pub a: TreatmentVector,
    /// Covariate rows, one per unit; all rows share the type's dimension.
    pub x: Vec<Vec<f64>>,
}

impl ClusterObservation {
    pub fn size(&self) -> usize {
        self.y.len()
    }

    pub fn covariate_dim(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }
}

/// Per-type bookkeeping: size `M_k`, covariate dimension `d_k`, count `N_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterTypeInfo {
    pub k: usize,
    pub size: usize,
    pub covariate_dim: usize,
    pub count: usize,
}

/// An immutable collection of clusters grouped into types. Construction
/// validates every invariant; afterwards the dataset is safe to share across
/// threads read-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    clusters: Vec<ClusterObservation>,
    types: BTreeMap<usize, ClusterTypeInfo>,
    covariate_kinds: Vec<CovariateKind>,
    enumeration_cap: usize,
}

impl Dataset {
    /// Assemble and validate a dataset from cluster observations.
    pub fn new(
        clusters: Vec<ClusterObservation>,
        covariate_kinds: Vec<CovariateKind>,
        enumeration_cap: usize,
    ) -> Result<Self> {
        Self::build(clusters, covariate_kinds, enumeration_cap, true)
    }

    fn build(
        clusters: Vec<ClusterObservation>,
        covariate_kinds: Vec<CovariateKind>,
        enumeration_cap: usize,
        require_contiguous: bool,
    ) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Parse {
                row: None,
                msg: "dataset contains no clusters".into(),
            });
        }
        let mut seen_ids = std::collections::HashSet::with_capacity(clusters.len());
        for c in &clusters {
            if !seen_ids.insert(c.cluster_id.as_str()) {
                return Err(Error::Parse {
                    row: None,
                    msg: format!("duplicate cluster id {}", c.cluster_id),
                });
            }
        }
        let mut types: BTreeMap<usize, ClusterTypeInfo> = BTreeMap::new();
        for c in &clusters {
            let m = c.size();
            if m == 0 {
                return Err(Error::Parse {
                    row: None,
                    msg: format!("cluster {} has no units", c.cluster_id),
                });
            }
            if m > enumeration_cap {
                return Err(Error::Capacity {
                    requested: m,
                    cap: enumeration_cap,
                });
            }
            if c.a.len() != m || c.x.len() != m {
                return Err(Error::Parse {
                    row: None,
                    msg: format!(
                        "cluster {}: outcome, treatment, and covariate row counts disagree",
                        c.cluster_id
                    ),
                });
            }
            let d = c.covariate_dim();
            if c.x.iter().any(|row| row.len() != d) {
                return Err(Error::Parse {
                    row: None,
                    msg: format!("cluster {}: ragged covariate rows", c.cluster_id),
                });
            }
            if c.y.iter().any(|v| !v.is_finite())
                || c.x.iter().flatten().any(|v| !v.is_finite())
            {
                return Err(Error::Parse {
                    row: None,
                    msg: format!("cluster {}: non-finite value", c.cluster_id),
                });
            }
            let entry = types.entry(c.type_label).or_insert(ClusterTypeInfo {
                k: c.type_label,
                size: m,
                covariate_dim: d,
                count: 0,
            });
            if entry.size != m {
                return Err(Error::Parse {
                    row: None,
                    msg: format!(
                        "cluster {}: size {} differs from type {}'s size {}",
                        c.cluster_id, m, c.type_label, entry.size
                    ),
                });
            }
            if entry.covariate_dim != d {
                return Err(Error::Parse {
                    row: None,
                    msg: format!(
                        "cluster {}: covariate dimension {} differs from type {}'s dimension {}",
                        c.cluster_id, d, c.type_label, entry.covariate_dim
                    ),
                });
            }
            entry.count += 1;
        }
        if require_contiguous {
            let labels: Vec<usize> = types.keys().copied().collect();
            for (expected, &got) in (1..).zip(&labels) {
                if expected != got {
                    return Err(Error::Parse {
                        row: None,
                        msg: format!("type labels must be contiguous 1..K; found {labels:?}"),
                    });
                }
            }
        }
        let max_d = types.values().map(|t| t.covariate_dim).max().unwrap_or(0);
        let mut kinds = covariate_kinds;
        if kinds.len() < max_d {
            kinds.resize(max_d, CovariateKind::Continuous);
        }
        Ok(Self {
            clusters,
            types,
            covariate_kinds: kinds,
            enumeration_cap,
        })
    }

    pub fn clusters(&self) -> &[ClusterObservation] {
        &self.clusters
    }

    pub fn types(&self) -> &BTreeMap<usize, ClusterTypeInfo> {
        &self.types
    }

    pub fn type_info(&self, k: usize) -> Result<&ClusterTypeInfo> {
        self.types
            .get(&k)
            .ok_or_else(|| Error::Config(format!("cluster type {k} is not present in the data")))
    }

    /// Total number of clusters `N`.
    pub fn n(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_types(&self) -> usize {
        self.types.len()
    }

    pub fn covariate_kinds(&self) -> &[CovariateKind] {
        &self.covariate_kinds
    }

    pub fn enumeration_cap(&self) -> usize {
        self.enumeration_cap
    }

    pub fn clusters_of_type(&self, k: usize) -> impl Iterator<Item = &ClusterObservation> {
        self.clusters.iter().filter(move |c| c.type_label == k)
    }

    /// Restriction to the clusters at the given indices, preserving order.
    /// A subset may legally miss some types, so label contiguity is not
    /// re-enforced here.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let clusters = indices
            .iter()
            .map(|&i| self.clusters[i].clone())
            .collect::<Vec<_>>();
        Dataset::build(
            clusters,
            self.covariate_kinds.clone(),
            self.enumeration_cap,
            false,
        )
    }

    /// Relabel every cluster through `f` and re-validate.
    pub fn relabel<F: Fn(&ClusterObservation) -> usize>(&self, f: F) -> Result<Dataset> {
        let mut clusters = self.clusters.clone();
        for c in &mut clusters {
            c.type_label = f(c);
        }
        Dataset::new(clusters, self.covariate_kinds.clone(), self.enumeration_cap)
    }
}

/// Cluster-type proportions `p_k`, either estimated as `N_k / N` or supplied
/// as known design constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeProportions {
    pub p: BTreeMap<usize, f64>,
    pub known: bool,
}

impl TypeProportions {
    pub fn estimated(data: &Dataset) -> Self {
        let n = data.n() as f64;
        let p = data
            .types()
            .iter()
            .map(|(&k, info)| (k, info.count as f64 / n))
            .collect();
        Self { p, known: false }
    }

    pub fn known(p: BTreeMap<usize, f64>) -> Result<Self> {
        let total: f64 = p.values().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Domain(format!(
                "known type proportions must sum to 1, got {total}"
            )));
        }
        if p.values().any(|&v| v <= 0.0 || v > 1.0) {
            return Err(Error::Domain("type proportions must lie in (0, 1]".into()));
        }
        Ok(Self { p, known: true })
    }

    pub fn get(&self, k: usize) -> Result<f64> {
        self.p
            .get(&k)
            .copied()
            .ok_or_else(|| Error::Config(format!("no proportion recorded for type {k}")))
    }
}

/// How the loader assigns cluster types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeRule {
    /// Use the `type` column when present, otherwise derive from cluster size.
    #[default]
    Auto,
    /// Derive labels from cluster size (distinct sizes ranked ascending).
    BySize,
    /// Require the explicit `type` column.
    FromColumn,
}

/// Ingestion options for the long-format CSV
/// `cluster_id,unit_id,y,a,x1,...,xd[,type]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestSchema {
    #[serde(default)]
    pub type_rule: TypeRule,
    /// Zero-based covariate columns treated as discrete by kernel smoothing.
    #[serde(default)]
    pub discrete_cols: Vec<usize>,
    #[serde(default = "default_cap")]
    pub enumeration_cap: usize,
}

fn default_cap() -> usize {
    DEFAULT_ENUMERATION_CAP
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            type_rule: TypeRule::Auto,
            discrete_cols: Vec::new(),
            enumeration_cap: DEFAULT_ENUMERATION_CAP,
        }
    }
}

struct RawUnit {
    row: usize,
    unit_id: i64,
    y: f64,
    a: u8,
    x: Vec<f64>,
    type_label: Option<usize>,
}

/// Load a dataset from the long-format CSV. Units within a cluster are
/// ordered by `unit_id`; clusters keep their order of first appearance.
pub fn load_dataset(path: &Path, schema: &IngestSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    if cols.len() < 4 || cols[0] != "cluster_id" || cols[1] != "unit_id" || cols[2] != "y" || cols[3] != "a" {
        return Err(Error::Parse {
            row: Some(1),
            msg: "header must start with cluster_id,unit_id,y,a".into(),
        });
    }
    let has_type_col = cols.last().map(String::as_str) == Some("type");
    if schema.type_rule == TypeRule::FromColumn && !has_type_col {
        return Err(Error::Parse {
            row: Some(1),
            msg: "schema requires a `type` column but none is present".into(),
        });
    }
    let use_type_col = has_type_col && schema.type_rule != TypeRule::BySize;
    let x_end = if has_type_col { cols.len() - 1 } else { cols.len() };
    let d = x_end - 4;

    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<RawUnit>> = BTreeMap::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 2; // header is row 1
        let record = record?;
        if record.len() != cols.len() {
            return Err(Error::Parse {
                row: Some(row),
                msg: format!("expected {} fields, found {}", cols.len(), record.len()),
            });
        }
        let field = |i: usize| -> &str { record.get(i).unwrap_or("").trim() };
        let parse_f64 = |i: usize| -> Result<f64> {
            let raw = field(i);
            if raw.is_empty() {
                return Err(Error::Parse {
                    row: Some(row),
                    msg: format!("missing value in column `{}`", cols[i]),
                });
            }
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row: Some(row),
                msg: format!("could not parse `{raw}` in column `{}`", cols[i]),
            })
        };
        let cluster_id = field(0).to_string();
        if cluster_id.is_empty() {
            return Err(Error::Parse {
                row: Some(row),
                msg: "missing cluster_id".into(),
            });
        }
        let unit_id = field(1).parse::<i64>().map_err(|_| Error::Parse {
            row: Some(row),
            msg: format!("could not parse unit_id `{}`", field(1)),
        })?;
        let y = parse_f64(2)?;
        let a_raw = parse_f64(3)?;
        if a_raw != 0.0 && a_raw != 1.0 {
            return Err(Error::Parse {
                row: Some(row),
                msg: format!("treatment must be 0 or 1, got `{}`", field(3)),
            });
        }
        let mut x = Vec::with_capacity(d);
        for i in 4..x_end {
            x.push(parse_f64(i)?);
        }
        let type_label = if use_type_col {
            let t = field(cols.len() - 1);
            Some(t.parse::<usize>().map_err(|_| Error::Parse {
                row: Some(row),
                msg: format!("could not parse type label `{t}`"),
            })?)
        } else {
            None
        };
        if !groups.contains_key(&cluster_id) {
            order.push(cluster_id.clone());
        }
        groups.entry(cluster_id).or_default().push(RawUnit {
            row,
            unit_id,
            y,
            a: a_raw as u8,
            x,
            type_label,
        });
    }

    let mut clusters = Vec::with_capacity(order.len());
    for cid in &order {
        let mut units = groups.remove(cid).unwrap();
        units.sort_by_key(|u| u.unit_id);
        let label = if use_type_col {
            let first = units[0].type_label.unwrap();
            if let Some(bad) = units.iter().find(|u| u.type_label != Some(first)) {
                return Err(Error::Parse {
                    row: Some(bad.row),
                    msg: format!("cluster {cid} mixes type labels"),
                });
            }
            first
        } else {
            0 // filled in below from the size ranking
        };
        let y: Vec<f64> = units.iter().map(|u| u.y).collect();
        let a = TreatmentVector::new(units.iter().map(|u| u.a).collect())?;
        let x: Vec<Vec<f64>> = units.into_iter().map(|u| u.x).collect();
        clusters.push(ClusterObservation {
            cluster_id: cid.clone(),
            type_label: label,
            y,
            a,
            x,
        });
    }

    if !use_type_col {
        let mut sizes: Vec<usize> = clusters.iter().map(ClusterObservation::size).collect();
        sizes.sort_unstable();
        sizes.dedup();
        for c in &mut clusters {
            c.type_label = sizes.iter().position(|&s| s == c.size()).unwrap() + 1;
        }
    }

    let kinds = (0..d)
        .map(|i| {
            if schema.discrete_cols.contains(&i) {
                CovariateKind::Discrete
            } else {
                CovariateKind::Continuous
            }
        })
        .collect();
    Dataset::new(clusters, kinds, schema.enumeration_cap)
}

/// Write a dataset back out in the standard long format (with a `type`
/// column, so a reload reproduces the labels exactly).
pub fn write_csv<W: Write>(data: &Dataset, out: W) -> Result<()> {
    let d = data
        .types()
        .values()
        .map(|t| t.covariate_dim)
        .max()
        .unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["cluster_id".to_string(), "unit_id".into(), "y".into(), "a".into()];
    for i in 1..=d {
        header.push(format!("x{i}"));
    }
    header.push("type".into());
    w.write_record(&header)?;
    for c in data.clusters() {
        for j in 0..c.size() {
            let mut rec = vec![
                c.cluster_id.clone(),
                (j + 1).to_string(),
                format_float(c.y[j]),
                c.a.bit(j).to_string(),
            ];
            for v in &c.x[j] {
                rec.push(format_float(*v));
            }
            rec.push(c.type_label.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Shortest round-trippable decimal representation.
fn format_float(v: f64) -> String {
    let mut s = format!("{v}");
    if !s.contains('.') && !s.contains('e') && !s.contains("inf") && !s.contains("NaN") {
        s.push_str(".0");
    }
    s
}
