//! Cluster-level propensity score `e(a | x, k)`: the joint probability of a
//! cluster's full treatment vector.
//!
//! Two evaluators are provided. [`KnownRandomization`] multiplies per-unit
//! Bernoulli probabilities, as in a designed experiment. [`LogisticMixedModel`]
//! is a logistic regression with a shared cluster random intercept
//! `b_i ~ N(0, 1/lambda_k)` on features `[1, x_j, sum_{l != j} x_l]`; its group
//! propensity integrates the conditional product over the random intercept,
//! evaluated by mode-centered Gauss-Hermite quadrature.

use crate::data::{Dataset, TreatmentVector};
use crate::error::{Error, Result};
use crate::numeric::{bfgs, GaussHermite};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::Arc;

/// Default positivity floor: estimated propensities are clipped into
/// `[floor, 1 - floor]` at the point of use, with clips counted.
pub const DEFAULT_PROPENSITY_FLOOR: f64 = 1e-6;

/// Default Gauss-Hermite order for the random-intercept integral.
pub const DEFAULT_QUAD_ORDER: usize = 30;

#[inline]
fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn log1p_exp(u: f64) -> f64 {
    // softplus, stable for large |u|
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

/// Per-unit probability function `(unit, x_unit, type) -> p`.
pub type UnitProbFn = dyn Fn(usize, &[f64], usize) -> f64 + Send + Sync;

/// Per-unit treatment probabilities fixed by design.
#[derive(Clone)]
pub struct KnownRandomization {
    source: ProbSource,
}

#[derive(Clone)]
enum ProbSource {
    PerType(BTreeMap<usize, f64>),
    Custom(Arc<UnitProbFn>),
}

impl std::fmt::Debug for KnownRandomization {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &self.source {
            ProbSource::PerType(map) => f.debug_tuple("KnownRandomization").field(map).finish(),
            ProbSource::Custom(_) => f.write_str("KnownRandomization(custom)"),
        }
    }
}

impl KnownRandomization {
    /// One Bernoulli probability per cluster type.
    pub fn per_type(probs: BTreeMap<usize, f64>) -> Result<Self> {
        for (&k, &p) in &probs {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Domain(format!(
                    "design probability for type {k} must lie in (0, 1), got {p}"
                )));
            }
        }
        Ok(Self {
            source: ProbSource::PerType(probs),
        })
    }

    pub fn uniform(p: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "design probability must lie in (0, 1), got {p}"
            )));
        }
        Ok(Self {
            source: ProbSource::Custom(Arc::new(move |_, _, _| p)),
        })
    }

    /// Fully custom per-unit probability `(j, x_j, k) -> p`.
    pub fn custom(f: Arc<UnitProbFn>) -> Self {
        Self {
            source: ProbSource::Custom(f),
        }
    }

    fn unit_prob(&self, j: usize, x_j: &[f64], k: usize) -> Result<f64> {
        let p = match &self.source {
            ProbSource::PerType(map) => *map.get(&k).ok_or_else(|| {
                Error::Config(format!("no design probability configured for type {k}"))
            })?,
            ProbSource::Custom(f) => f(j, x_j, k),
        };
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!(
                "unit probability {p} outside (0, 1) for type {k}"
            )));
        }
        Ok(p)
    }
}

/// Which covariate columns feed the logistic features
/// `[1, x_j[cols], sum_{l != j} x_l[cols]]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    /// `None` uses every covariate column.
    pub cols: Option<Vec<usize>>,
}

impl FeatureSpec {
    pub fn all() -> Self {
        Self { cols: None }
    }

    pub fn columns(cols: Vec<usize>) -> Self {
        Self { cols: Some(cols) }
    }

    fn dim(&self, d: usize) -> usize {
        1 + 2 * self.cols.as_ref().map_or(d, Vec::len)
    }

    /// Feature row for unit `j` in a cluster with covariate rows `x`.
    pub fn row(&self, x: &[Vec<f64>], j: usize) -> Vec<f64> {
        let select = |row: &Vec<f64>| -> Vec<f64> {
            match &self.cols {
                None => row.clone(),
                Some(cols) => cols.iter().map(|&c| row[c]).collect(),
            }
        };
        let own = select(&x[j]);
        let mut peers = vec![0.0; own.len()];
        for (l, row) in x.iter().enumerate() {
            if l != j {
                for (acc, v) in peers.iter_mut().zip(select(row)) {
                    *acc += v;
                }
            }
        }
        let mut z = Vec::with_capacity(1 + 2 * own.len());
        z.push(1.0);
        z.extend(own);
        z.extend(peers);
        z
    }
}

/// Convergence report for one fitted type.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PropensityFitInfo {
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Standard errors of `(beta, lambda)` from the observed information.
    pub param_se: Vec<f64>,
}

/// Logistic mixed-effects propensity model with per-type coefficients
/// `beta_k` and random-intercept precision `lambda_k`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticMixedModel {
    pub beta: BTreeMap<usize, Vec<f64>>,
    pub lambda: BTreeMap<usize, f64>,
    pub features: FeatureSpec,
    pub quad_order: usize,
    pub fit_info: BTreeMap<usize, PropensityFitInfo>,
}

impl LogisticMixedModel {
    pub fn new(
        beta: BTreeMap<usize, Vec<f64>>,
        lambda: BTreeMap<usize, f64>,
        features: FeatureSpec,
        quad_order: usize,
    ) -> Result<Self> {
        for (&k, &l) in &lambda {
            if l <= 0.0 {
                return Err(Error::Domain(format!(
                    "random-intercept precision for type {k} must be positive, got {l}"
                )));
            }
        }
        Ok(Self {
            beta,
            lambda,
            features,
            quad_order,
            fit_info: BTreeMap::new(),
        })
    }

    fn params(&self, k: usize) -> Result<(&[f64], f64)> {
        let beta = self.beta.get(&k).ok_or_else(|| {
            Error::Config(format!("no propensity coefficients fitted for type {k}"))
        })?;
        let lambda = *self
            .lambda
            .get(&k)
            .ok_or_else(|| Error::Config(format!("no precision fitted for type {k}")))?;
        Ok((beta, lambda))
    }
}

/// Propensity evaluator: either a known design or a fitted model.
#[derive(Debug, Clone)]
pub enum PropensityModel {
    Known(KnownRandomization),
    LogisticMixed(LogisticMixedModel),
}

impl PropensityModel {
    /// `e(a | x, k)`, the probability of observing the full vector `a`.
    pub fn group_propensity(&self, a: &TreatmentVector, x: &[Vec<f64>], k: usize) -> Result<f64> {
        self.cluster_evaluator(x, k)?.prob(a)
    }

    /// Precompute the `a`-independent parts for one cluster so that sweeps
    /// over all `2^M` assignments only pay for the assignment-specific work.
    pub fn cluster_evaluator(&self, x: &[Vec<f64>], k: usize) -> Result<ClusterPropensity> {
        match self {
            PropensityModel::Known(design) => {
                let probs = x
                    .iter()
                    .enumerate()
                    .map(|(j, row)| design.unit_prob(j, row, k))
                    .collect::<Result<Vec<f64>>>()?;
                Ok(ClusterPropensity::Known { probs })
            }
            PropensityModel::LogisticMixed(model) => {
                let (beta, lambda) = model.params(k)?;
                let eta: Vec<f64> = (0..x.len())
                    .map(|j| {
                        let z = model.features.row(x, j);
                        if z.len() != beta.len() {
                            return Err(Error::Config(format!(
                                "feature dimension {} does not match coefficient length {} for type {k}",
                                z.len(),
                                beta.len()
                            )));
                        }
                        Ok(z.iter().zip(beta).map(|(a, b)| a * b).sum())
                    })
                    .collect::<Result<_>>()?;
                Ok(ClusterPropensity::Logistic {
                    eta,
                    lambda,
                    rule: GaussHermite::new(model.quad_order)?,
                })
            }
        }
    }
}

/// Assignment-level evaluator for one cluster.
pub enum ClusterPropensity {
    Known { probs: Vec<f64> },
    Logistic { eta: Vec<f64>, lambda: f64, rule: GaussHermite },
}

impl ClusterPropensity {
    pub fn prob(&self, a: &TreatmentVector) -> Result<f64> {
        match self {
            ClusterPropensity::Known { probs } => {
                if probs.len() != a.len() {
                    return Err(Error::Config(
                        "treatment vector length does not match cluster size".into(),
                    ));
                }
                let mut e = 1.0;
                for (j, &p) in probs.iter().enumerate() {
                    e *= if a.bit(j) == 1 { p } else { 1.0 - p };
                }
                Ok(e)
            }
            ClusterPropensity::Logistic { eta, lambda, rule } => {
                if eta.len() != a.len() {
                    return Err(Error::Config(
                        "treatment vector length does not match cluster size".into(),
                    ));
                }
                let quad = adaptive_quadrature(eta, a.bits(), *lambda, rule);
                Ok(quad.log_integral.exp())
            }
        }
    }
}

/// Mode-centered quadrature state for one `(cluster, assignment)` pair.
struct QuadratureResult {
    log_integral: f64,
    /// Quadrature abscissae in `b` with normalized posterior weights.
    points: Vec<(f64, f64)>,
}

/// `h(b) = sum_j [a_j (eta_j + b) - softplus(eta_j + b)] + log phi(b; 0, 1/lambda)`.
fn log_integrand(eta: &[f64], a: &[u8], lambda: f64, b: f64) -> f64 {
    let mut h = 0.5 * (lambda / (2.0 * std::f64::consts::PI)).ln() - 0.5 * lambda * b * b;
    for (j, &e) in eta.iter().enumerate() {
        let u = e + b;
        h += f64::from(a[j]) * u - log1p_exp(u);
    }
    h
}

fn adaptive_quadrature(eta: &[f64], a: &[u8], lambda: f64, rule: &GaussHermite) -> QuadratureResult {
    // Newton for the mode of the strictly concave log-integrand.
    let mut b_hat = 0.0;
    for _ in 0..60 {
        let mut g = -lambda * b_hat;
        let mut hess = -lambda;
        for (j, &e) in eta.iter().enumerate() {
            let s = expit(e + b_hat);
            g += f64::from(a[j]) - s;
            hess -= s * (1.0 - s);
        }
        let step = g / hess;
        b_hat -= step.clamp(-5.0, 5.0);
        if step.abs() < 1e-13 {
            break;
        }
    }
    let mut curv = lambda;
    for &e in eta {
        let s = expit(e + b_hat);
        curv += s * (1.0 - s);
    }
    let scale = curv.sqrt().recip();
    let h_mode = log_integrand(eta, a, lambda, b_hat);

    let mut total = 0.0;
    let mut points = Vec::with_capacity(rule.order());
    for (&t, &w) in rule.nodes.iter().zip(&rule.weights) {
        let b = b_hat + std::f64::consts::SQRT_2 * scale * t;
        let wt = w * (t * t + log_integrand(eta, a, lambda, b) - h_mode).exp();
        total += wt;
        points.push((b, wt));
    }
    for p in &mut points {
        p.1 /= total;
    }
    QuadratureResult {
        log_integral: (std::f64::consts::SQRT_2 * scale).ln() + h_mode + total.ln(),
        points,
    }
}

/// Feature rows and treatment bits of one cluster, precomputed once per fit.
struct PackedCluster {
    z: Vec<Vec<f64>>,
    a: Vec<u8>,
}

fn pack_clusters(
    clusters: &[(&TreatmentVector, &[Vec<f64>])],
    features: &FeatureSpec,
) -> Vec<PackedCluster> {
    clusters
        .iter()
        .map(|(a, x)| PackedCluster {
            z: (0..x.len()).map(|j| features.row(x, j)).collect(),
            a: a.bits().to_vec(),
        })
        .collect()
}

/// One quadrature pass per cluster, producing the log-likelihood and, when
/// requested, the score: the posterior means of
/// `sum_j (a_j - expit(eta_j + b)) z_j` and `(1 - lambda b^2) / (2 lambda)`.
fn packed_loglik_score(
    packed: &[PackedCluster],
    beta: &[f64],
    lambda: f64,
    rule: &GaussHermite,
    score: Option<&mut [f64]>,
) -> Result<f64> {
    if lambda <= 0.0 {
        return Err(Error::Domain("lambda must be positive".into()));
    }
    let dim = beta.len();
    let mut total = 0.0;
    let mut score_acc = score;
    if let Some(s) = score_acc.as_deref_mut() {
        s.fill(0.0);
    }
    let mut eta = Vec::new();
    for cluster in packed {
        eta.clear();
        eta.extend(
            cluster
                .z
                .iter()
                .map(|z| z.iter().zip(beta).map(|(zi, bi)| zi * bi).sum::<f64>()),
        );
        let quad = adaptive_quadrature(&eta, &cluster.a, lambda, rule);
        total += quad.log_integral;
        if let Some(s) = score_acc.as_deref_mut() {
            for &(b, w) in &quad.points {
                for (j, z) in cluster.z.iter().enumerate() {
                    let resid = f64::from(cluster.a[j]) - expit(eta[j] + b);
                    for (si, zi) in s[..dim].iter_mut().zip(z) {
                        *si += w * resid * zi;
                    }
                }
                s[dim] += w * (1.0 - lambda * b * b) / (2.0 * lambda);
            }
        }
    }
    Ok(total)
}

/// Marginal log-likelihood of the treatment vectors for one type,
/// `sum_i log e(A_i | X_i, k; beta, lambda)`.
pub fn logistic_mixed_loglik(
    clusters: &[(&TreatmentVector, &[Vec<f64>])],
    features: &FeatureSpec,
    beta: &[f64],
    lambda: f64,
    rule: &GaussHermite,
) -> Result<f64> {
    let packed = pack_clusters(clusters, features);
    packed_loglik_score(&packed, beta, lambda, rule, None)
}

/// Analytic score of [`logistic_mixed_loglik`] in `(beta, lambda)`.
pub fn logistic_mixed_score(
    clusters: &[(&TreatmentVector, &[Vec<f64>])],
    features: &FeatureSpec,
    beta: &[f64],
    lambda: f64,
    rule: &GaussHermite,
) -> Result<Vec<f64>> {
    let packed = pack_clusters(clusters, features);
    let mut score = vec![0.0; beta.len() + 1];
    packed_loglik_score(&packed, beta, lambda, rule, Some(&mut score))?;
    Ok(score)
}

/// Options for [`fit_logistic_mixed`].
#[derive(Debug, Clone)]
pub struct LogisticFitOptions {
    pub features: FeatureSpec,
    pub quad_order: usize,
    /// Tolerance on the infinity norm of the per-cluster-averaged score.
    pub tol: f64,
    pub max_iter: usize,
    /// Fit one shared parameter vector across all types instead of per-type.
    pub pool_types: bool,
}

impl Default for LogisticFitOptions {
    fn default() -> Self {
        Self {
            features: FeatureSpec::all(),
            quad_order: DEFAULT_QUAD_ORDER,
            tol: 1e-8,
            max_iter: 200,
            pool_types: false,
        }
    }
}

/// Maximum-likelihood fit of the logistic mixed-effects propensity model,
/// per cluster type (or pooled). Quasi-Newton on `(beta, log lambda)` with the
/// analytic score; `beta` is initialized from a plain logistic fit that
/// ignores the random effect, `lambda` starts at 1.
pub fn fit_logistic_mixed(data: &Dataset, opts: &LogisticFitOptions) -> Result<LogisticMixedModel> {
    let rule = GaussHermite::new(opts.quad_order)?;
    let mut beta_map = BTreeMap::new();
    let mut lambda_map = BTreeMap::new();
    let mut info_map = BTreeMap::new();

    let groups: Vec<Vec<usize>> = if opts.pool_types {
        vec![(0..data.n()).collect()]
    } else {
        data.types()
            .keys()
            .map(|&k| {
                (0..data.n())
                    .filter(|&i| data.clusters()[i].type_label == k)
                    .collect()
            })
            .collect()
    };

    for idx in &groups {
        let clusters: Vec<(&TreatmentVector, &[Vec<f64>])> = idx
            .iter()
            .map(|&i| {
                let c = &data.clusters()[i];
                (&c.a, c.x.as_slice())
            })
            .collect();
        let label = data.clusters()[idx[0]].type_label;
        let treated: usize = clusters.iter().map(|(a, _)| a.ones()).sum();
        let units: usize = clusters.iter().map(|(a, _)| a.len()).sum();
        if treated == 0 || treated == units {
            return Err(Error::Domain(format!(
                "propensity fit needs both treated and untreated units (type group {label})"
            )));
        }

        let dim = opts.features.dim(clusters[0].1[0].len());
        let beta0 = plain_logistic_init(&clusters, &opts.features, dim)?;
        let n = clusters.len() as f64;
        let packed = pack_clusters(&clusters, &opts.features);

        let mut theta0 = beta0;
        theta0.push(0.0); // log lambda = 0 -> lambda = 1
        let mut score = vec![0.0; dim + 1];
        let out = bfgs(&theta0, opts.tol, opts.max_iter, |theta, grad| {
            let (beta, log_lambda) = theta.split_at(dim);
            let lambda = log_lambda[0].exp();
            if beta.iter().any(|b| b.abs() > 50.0) {
                return Err(Error::Separation {
                    what: format!("logistic mixed model (type group {label})"),
                    norm: beta.iter().fold(0.0f64, |m, b| m.max(b.abs())),
                });
            }
            let ll = packed_loglik_score(&packed, beta, lambda, &rule, Some(&mut score))?;
            for (g, s) in grad.iter_mut().zip(&score) {
                *g = -s / n;
            }
            // chain rule for the log-lambda coordinate
            grad[dim] *= lambda;
            Ok(-ll / n)
        })
        .map_err(|e| match e {
            Error::NonConvergence { iterations, grad_norm, .. } => Error::NonConvergence {
                what: format!("logistic mixed fit (type group {label})"),
                iterations,
                grad_norm,
            },
            other => other,
        })?;

        let beta_hat = out.x[..dim].to_vec();
        let lambda_hat = out.x[dim].exp();
        if beta_hat.iter().any(|b| b.abs() > 30.0) {
            return Err(Error::Separation {
                what: format!("logistic mixed model (type group {label})"),
                norm: beta_hat.iter().fold(0.0f64, |m, b| m.max(b.abs())),
            });
        }
        let loglik = packed_loglik_score(&packed, &beta_hat, lambda_hat, &rule, None)?;
        let se = observed_information_se(&out.x, dim, |theta| {
            let lambda = theta[dim].exp();
            let mut s = vec![0.0; dim + 1];
            packed_loglik_score(&packed, &theta[..dim], lambda, &rule, Some(&mut s))?;
            Ok(s)
        })?;
        let info = PropensityFitInfo {
            loglik,
            iterations: out.iterations,
            grad_norm: out.grad_norm,
            param_se: se,
        };

        let labels: Vec<usize> = if opts.pool_types {
            data.types().keys().copied().collect()
        } else {
            vec![label]
        };
        for k in labels {
            beta_map.insert(k, beta_hat.clone());
            lambda_map.insert(k, lambda_hat);
            info_map.insert(k, info.clone());
        }
    }

    let mut model =
        LogisticMixedModel::new(beta_map, lambda_map, opts.features.clone(), opts.quad_order)?;
    model.fit_info = info_map;
    Ok(model)
}

/// Newton-Raphson logistic regression on pooled unit-level rows, ignoring the
/// random intercept. Supplies starting values only, so a loose tolerance and
/// iteration cap are enough.
fn plain_logistic_init(
    clusters: &[(&TreatmentVector, &[Vec<f64>])],
    features: &FeatureSpec,
    dim: usize,
) -> Result<Vec<f64>> {
    let mut rows = Vec::new();
    let mut resp = Vec::new();
    for (a, x) in clusters {
        for j in 0..x.len() {
            rows.push(features.row(x, j));
            resp.push(f64::from(a.bit(j)));
        }
    }
    let n = rows.len();
    let mut beta = DVector::<f64>::zeros(dim);
    for _ in 0..25 {
        let mut hess = DMatrix::<f64>::zeros(dim, dim);
        let mut grad = DVector::<f64>::zeros(dim);
        for (row, &y) in rows.iter().zip(&resp) {
            let z = DVector::from_column_slice(row);
            let s = expit(beta.dot(&z));
            grad += (y - s) * &z;
            hess += s * (1.0 - s) * &z * z.transpose();
        }
        for i in 0..dim {
            hess[(i, i)] += 1e-8 * n as f64;
        }
        let step = hess.clone().cholesky().map(|ch| ch.solve(&grad));
        let Some(step) = step else { break };
        beta += &step;
        if beta.amax() > 30.0 {
            // diverging initialization; fall back toward zero and let the
            // marginal fit report separation if it persists
            beta *= 0.5;
            break;
        }
        if step.amax() < 1e-6 {
            break;
        }
    }
    Ok(beta.as_slice().to_vec())
}

/// Standard errors from the observed information, obtained by central finite
/// differences of the analytic score in the internal coordinates.
fn observed_information_se<F>(theta: &[f64], dim: usize, score: F) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    let p = theta.len();
    let h = 1e-5;
    let mut info = DMatrix::<f64>::zeros(p, p);
    for i in 0..p {
        let mut hi = theta.to_vec();
        let mut lo = theta.to_vec();
        hi[i] += h;
        lo[i] -= h;
        let s_hi = score(&hi)?;
        let s_lo = score(&lo)?;
        for j in 0..p {
            info[(j, i)] = -(s_hi[j] - s_lo[j]) / (2.0 * h);
        }
    }
    // symmetrize and map the log-lambda coordinate back to lambda
    let info = (&info + info.transpose()) * 0.5;
    match info.try_inverse() {
        Some(cov) => {
            let mut se: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            let lambda = theta[dim].exp();
            se[dim] *= lambda; // delta method: Var(lambda) = lambda^2 Var(log lambda)
            Ok(se)
        }
        None => Ok(vec![f64::NAN; p]),
    }
}
