//! Outcome regression `g(a, x, k)`: the vector of conditional mean outcomes
//! for a cluster given its full treatment vector.
//!
//! Three evaluators:
//! - [`LinearMixedModel`]: per-unit design
//!   `h_j = [1, a_j, sum_{l != j} a_l, x_j, sum_{l != j} x_l]` (optionally with
//!   treatment-by-covariate interactions) plus a shared cluster effect
//!   `xi_i ~ N(0, rho_k)` and unit error `eps_ij ~ N(0, 1/eta_k)`, which give
//!   the compound-symmetry covariance `S_k = eta^{-1} I + rho 11^T`. All
//!   algebra uses the rank-one closed forms for `S_k^{-1}` and `det S_k`.
//! - [`KernelModel`]: Nadaraya-Watson smoothing with a mixed kernel, exact on
//!   `(a_j, k)`, Gaussian over continuous covariates, and a mismatch kernel
//!   `h_d^{1(z != Z)}` over peers' treatments and discrete covariates.
//! - [`OutcomeModel::Zero`]: predicts zero, yielding the pure
//!   inverse-probability-weighted estimator.

use crate::data::{CovariateKind, Dataset, TreatmentVector};
use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

// ---------------------------------------------------------------------------
// compound-symmetry algebra
// ---------------------------------------------------------------------------

/// Feasibility of `(eta, rho)` for cluster size `m`: `eta > 0` and
/// `1 + m rho eta > 0` keep `S` positive definite.
pub fn cs_feasible(eta: f64, rho: f64, m: usize) -> bool {
    eta > 0.0 && 1.0 + m as f64 * rho * eta > 0.0
}

/// `S^{-1} = eta I - rho eta^2 / (1 + m rho eta) 11^T` as a dense matrix.
pub fn cs_inverse(eta: f64, rho: f64, m: usize) -> Result<DMatrix<f64>> {
    if !cs_feasible(eta, rho, m) {
        return Err(Error::Domain(format!(
            "(eta, rho) = ({eta}, {rho}) is infeasible for m = {m}"
        )));
    }
    let c = rho * eta * eta / (1.0 + m as f64 * rho * eta);
    let mut s_inv = DMatrix::from_element(m, m, -c);
    for i in 0..m {
        s_inv[(i, i)] += eta;
    }
    Ok(s_inv)
}

/// `log det S = -m log eta + log(1 + m rho eta)`.
pub fn cs_logdet(eta: f64, rho: f64, m: usize) -> Result<f64> {
    if !cs_feasible(eta, rho, m) {
        return Err(Error::Domain(format!(
            "(eta, rho) = ({eta}, {rho}) is infeasible for m = {m}"
        )));
    }
    Ok(-(m as f64) * eta.ln() + (1.0 + m as f64 * rho * eta).ln())
}

/// Quadratic form `r^T S^{-1} r` without materializing the matrix.
#[inline]
fn cs_quadratic(eta: f64, rho: f64, m: usize, r: &[f64]) -> f64 {
    let sum: f64 = r.iter().sum();
    let sq: f64 = r.iter().map(|v| v * v).sum();
    let c = rho * eta * eta / (1.0 + m as f64 * rho * eta);
    eta * sq - c * sum * sum
}

// ---------------------------------------------------------------------------
// design
// ---------------------------------------------------------------------------

/// Treatment factor entering an interaction term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentTerm {
    /// The unit's own indicator `a_j`.
    Own,
    /// The number of treated peers `sum_{l != j} a_l`.
    PeerSum,
}

/// Extra column `a-term * x_{j, col}` appended to the base design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interaction {
    pub term: TreatmentTerm,
    pub col: usize,
}

/// Column layout of the per-unit regression
/// `[1, a_j, sum a_(-j), x_j[own], sum x_(-j)[peer], interactions...]`.
///
/// Restricting `own_cols`/`peer_cols` lets a caller drop covariates (for
/// example, cluster-level covariates must leave the peer block, where their
/// sum is collinear with the own entry at fixed cluster size).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(default)]
    pub own_cols: Option<Vec<usize>>,
    #[serde(default)]
    pub peer_cols: Option<Vec<usize>>,
    #[serde(default)]
    pub interactions: Vec<Interaction>,
}

impl DesignSpec {
    pub fn dim(&self, d: usize) -> usize {
        let own = self.own_cols.as_ref().map_or(d, Vec::len);
        let peer = self.peer_cols.as_ref().map_or(d, Vec::len);
        3 + own + peer + self.interactions.len()
    }

    /// `h_j(a, x)` for unit `j`.
    pub fn row(&self, a: &TreatmentVector, x: &[Vec<f64>], j: usize) -> Vec<f64> {
        let d = x[j].len();
        let peer_treated = (a.ones() - a.bit(j) as usize) as f64;
        let mut h = Vec::with_capacity(self.dim(d));
        h.push(1.0);
        h.push(f64::from(a.bit(j)));
        h.push(peer_treated);
        match &self.own_cols {
            None => h.extend(x[j].iter().copied()),
            Some(cols) => h.extend(cols.iter().map(|&c| x[j][c])),
        }
        let peer_cols: Vec<usize> = match &self.peer_cols {
            None => (0..d).collect(),
            Some(cols) => cols.clone(),
        };
        for &c in &peer_cols {
            let mut sum = 0.0;
            for (l, row) in x.iter().enumerate() {
                if l != j {
                    sum += row[c];
                }
            }
            h.push(sum);
        }
        for inter in &self.interactions {
            let factor = match inter.term {
                TreatmentTerm::Own => f64::from(a.bit(j)),
                TreatmentTerm::PeerSum => peer_treated,
            };
            h.push(factor * x[j][inter.col]);
        }
        h
    }
}

// ---------------------------------------------------------------------------
// linear mixed model
// ---------------------------------------------------------------------------

/// Convergence report for one fitted type group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutcomeFitInfo {
    pub loglik: f64,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Standard errors of `(beta, eta, rho)` from the observed information.
    pub param_se: Vec<f64>,
}

/// Linear mixed-effects outcome model with compound-symmetry covariance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearMixedModel {
    pub beta: BTreeMap<usize, Vec<f64>>,
    /// Residual precision `eta_k > 0`.
    pub eta: BTreeMap<usize, f64>,
    /// Cluster-effect variance weight `rho_k` with `1 + M_k rho_k eta_k > 0`.
    pub rho: BTreeMap<usize, f64>,
    pub design: DesignSpec,
    pub fit_info: BTreeMap<usize, OutcomeFitInfo>,
}

impl LinearMixedModel {
    pub fn new(
        beta: BTreeMap<usize, Vec<f64>>,
        eta: BTreeMap<usize, f64>,
        rho: BTreeMap<usize, f64>,
        design: DesignSpec,
    ) -> Result<Self> {
        for (&k, &e) in &eta {
            if e <= 0.0 {
                return Err(Error::Domain(format!(
                    "residual precision for type {k} must be positive, got {e}"
                )));
            }
        }
        Ok(Self {
            beta,
            eta,
            rho,
            design,
            fit_info: BTreeMap::new(),
        })
    }

    fn coefficients(&self, k: usize) -> Result<&[f64]> {
        self.beta
            .get(&k)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("no outcome coefficients fitted for type {k}")))
    }
}

/// Training row retained by the kernel smoother.
#[derive(Debug, Clone)]
struct KernelRow {
    k: usize,
    y: f64,
    a_own: u8,
    a_peers: Vec<f64>,
    x_own: Vec<f64>,
    x_peers: Vec<Vec<f64>>,
}

/// Nadaraya-Watson outcome regression over mixed discrete/continuous data.
#[derive(Debug, Clone)]
pub struct KernelModel {
    rows: Vec<KernelRow>,
    pub h_c: f64,
    pub h_d: f64,
    pub symmetrize_peers: bool,
    kinds: Vec<CovariateKind>,
    fallbacks: Arc<AtomicUsize>,
}

/// Outcome evaluator.
#[derive(Debug, Clone)]
pub enum OutcomeModel {
    LinearMixed(LinearMixedModel),
    Kernel(KernelModel),
    /// Predicts the zero vector; with a correct propensity this reduces the
    /// estimator to pure inverse probability weighting.
    Zero,
}

impl OutcomeModel {
    /// `g(a, x, k)`, one prediction per unit.
    pub fn predict(&self, a: &TreatmentVector, x: &[Vec<f64>], k: usize) -> Result<Vec<f64>> {
        if a.len() != x.len() {
            return Err(Error::Config(
                "treatment vector length does not match covariate rows".into(),
            ));
        }
        match self {
            OutcomeModel::Zero => Ok(vec![0.0; a.len()]),
            OutcomeModel::LinearMixed(model) => {
                let beta = model.coefficients(k)?;
                (0..a.len())
                    .map(|j| {
                        let h = model.design.row(a, x, j);
                        if h.len() != beta.len() {
                            return Err(Error::Config(format!(
                                "design dimension {} does not match coefficient length {} for type {k}",
                                h.len(),
                                beta.len()
                            )));
                        }
                        Ok(h.iter().zip(beta).map(|(hi, bi)| hi * bi).sum())
                    })
                    .collect()
            }
            OutcomeModel::Kernel(model) => {
                (0..a.len()).map(|j| model.predict_unit(a, x, j, k)).collect()
            }
        }
    }

    /// Number of kernel empty-neighborhood fallbacks since construction.
    pub fn kernel_fallbacks(&self) -> usize {
        match self {
            OutcomeModel::Kernel(m) => m.fallbacks.load(Ordering::Relaxed),
            _ => 0,
        }
    }
}

// ---------------------------------------------------------------------------
// linear mixed likelihood and fitting
// ---------------------------------------------------------------------------

type OutcomeCluster<'a> = (&'a TreatmentVector, &'a [Vec<f64>], &'a [f64]);

/// Design rows and outcomes of one cluster, precomputed once per fit.
struct PackedOutcome {
    rows: Vec<Vec<f64>>,
    y: Vec<f64>,
}

fn pack_outcome(clusters: &[OutcomeCluster<'_>], design: &DesignSpec) -> Vec<PackedOutcome> {
    clusters
        .iter()
        .map(|(a, x, y)| PackedOutcome {
            rows: (0..y.len()).map(|j| design.row(a, x, j)).collect(),
            y: y.to_vec(),
        })
        .collect()
}

fn packed_residuals(cluster: &PackedOutcome, beta: &[f64]) -> Vec<f64> {
    cluster
        .rows
        .iter()
        .zip(&cluster.y)
        .map(|(h, y)| y - h.iter().zip(beta).map(|(hi, bi)| hi * bi).sum::<f64>())
        .collect()
}

fn packed_loglik(packed: &[PackedOutcome], beta: &[f64], eta: f64, rho: f64) -> Result<f64> {
    let mut total = 0.0;
    for cluster in packed {
        let m = cluster.y.len();
        if !cs_feasible(eta, rho, m) {
            return Err(Error::Domain(format!(
                "(eta, rho) = ({eta}, {rho}) is infeasible for m = {m}"
            )));
        }
        let resid = packed_residuals(cluster, beta);
        total += -0.5 * (m as f64) * (2.0 * std::f64::consts::PI).ln()
            - 0.5 * cs_logdet(eta, rho, m)?
            - 0.5 * cs_quadratic(eta, rho, m, &resid);
    }
    Ok(total)
}

fn packed_score(packed: &[PackedOutcome], beta: &[f64], eta: f64, rho: f64) -> Result<Vec<f64>> {
    let p = beta.len();
    let mut score = vec![0.0; p + 2];
    for cluster in packed {
        let m = cluster.y.len();
        if !cs_feasible(eta, rho, m) {
            return Err(Error::Domain(format!(
                "(eta, rho) = ({eta}, {rho}) is infeasible for m = {m}"
            )));
        }
        let mf = m as f64;
        let denom = 1.0 + mf * rho * eta;
        let resid = packed_residuals(cluster, beta);
        let rsum: f64 = resid.iter().sum();
        let rsq: f64 = resid.iter().map(|v| v * v).sum();
        let c = rho * eta * eta / denom;

        // d/d beta: H S^{-1} eps
        for (j, h) in cluster.rows.iter().enumerate() {
            let s_inv_eps_j = eta * resid[j] - c * rsum;
            for (si, hi) in score[..p].iter_mut().zip(h) {
                *si += hi * s_inv_eps_j;
            }
        }
        score[p] += -0.5 * rsq + 0.5 * rho * eta * (2.0 + mf * rho * eta) / (denom * denom)
            * rsum
            * rsum
            + mf / (2.0 * eta)
            - mf * rho / (2.0 * denom);
        score[p + 1] +=
            eta * eta / (2.0 * denom * denom) * rsum * rsum - mf * eta / (2.0 * denom);
    }
    Ok(score)
}

/// Gaussian log-likelihood `sum_i [-1/2 log det(2 pi S) - 1/2 eps^T S^{-1} eps]`
/// with `eps = y - H^T beta`.
pub fn linear_mixed_loglik(
    clusters: &[OutcomeCluster<'_>],
    design: &DesignSpec,
    beta: &[f64],
    eta: f64,
    rho: f64,
) -> Result<f64> {
    packed_loglik(&pack_outcome(clusters, design), beta, eta, rho)
}

/// Analytic score of [`linear_mixed_loglik`] in `(beta, eta, rho)`.
pub fn linear_mixed_score(
    clusters: &[OutcomeCluster<'_>],
    design: &DesignSpec,
    beta: &[f64],
    eta: f64,
    rho: f64,
) -> Result<Vec<f64>> {
    packed_score(&pack_outcome(clusters, design), beta, eta, rho)
}

/// Options for [`fit_linear_mixed`].
#[derive(Debug, Clone)]
pub struct LinearFitOptions {
    pub design: DesignSpec,
    /// Tolerance on the infinity norm of the per-cluster-averaged score in
    /// the variance-component coordinates.
    pub tol: f64,
    pub max_iter: usize,
    pub pool_types: bool,
}

impl Default for LinearFitOptions {
    fn default() -> Self {
        Self {
            design: DesignSpec::default(),
            tol: 1e-8,
            max_iter: 200,
            pool_types: false,
        }
    }
}

#[inline]
fn softplus(s: f64) -> f64 {
    if s > 30.0 {
        s
    } else {
        s.exp().ln_1p()
    }
}

#[inline]
fn softplus_inv(d: f64) -> f64 {
    if d > 30.0 {
        d
    } else {
        (d.exp() - 1.0).ln()
    }
}

/// Per-type maximum likelihood: `beta` profiled out by generalized least
/// squares given the variance components, and `(eta, rho)` maximized by
/// Newton steps on `(log eta, s)` where `softplus(s) = 1 + m_ref rho eta`
/// keeps `S` positive definite without a constrained solver.
pub fn fit_linear_mixed(data: &Dataset, opts: &LinearFitOptions) -> Result<LinearMixedModel> {
    let mut beta_map = BTreeMap::new();
    let mut eta_map = BTreeMap::new();
    let mut rho_map = BTreeMap::new();
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
        let label = data.clusters()[idx[0]].type_label;
        if idx.len() < 2 {
            return Err(Error::Domain(format!(
                "outcome fit needs at least 2 clusters (type group {label} has {})",
                idx.len()
            )));
        }
        let clusters: Vec<OutcomeCluster<'_>> = idx
            .iter()
            .map(|&i| {
                let c = &data.clusters()[i];
                (&c.a, c.x.as_slice(), c.y.as_slice())
            })
            .collect();
        let (beta_hat, eta_hat, rho_hat, info) = fit_one_group(&clusters, opts, label)?;

        let labels: Vec<usize> = if opts.pool_types {
            data.types().keys().copied().collect()
        } else {
            vec![label]
        };
        for k in labels {
            beta_map.insert(k, beta_hat.clone());
            eta_map.insert(k, eta_hat);
            rho_map.insert(k, rho_hat);
            info_map.insert(k, info.clone());
        }
    }

    let mut model = LinearMixedModel::new(beta_map, eta_map, rho_map, opts.design.clone())?;
    model.fit_info = info_map;
    Ok(model)
}

fn fit_one_group(
    clusters: &[OutcomeCluster<'_>],
    opts: &LinearFitOptions,
    label: usize,
) -> Result<(Vec<f64>, f64, f64, OutcomeFitInfo)> {
    let design = &opts.design;
    let p = design.dim(clusters[0].1[0].len());
    let n = clusters.len() as f64;
    let m_ref = clusters.iter().map(|(_, _, y)| y.len()).max().unwrap();
    let packed = pack_outcome(clusters, design);

    // OLS residual variance seeds the variance components.
    let beta_ols = gls_beta(&packed, p, 1.0, 0.0, label)?;
    let mut ss = 0.0;
    let mut count = 0.0;
    for cluster in &packed {
        for r in packed_residuals(cluster, &beta_ols) {
            ss += r * r;
            count += 1.0;
        }
    }
    let total_var = (ss / count).max(1e-8);
    let eta0 = 1.0 / (0.9 * total_var);
    let rho0 = 0.1 * total_var;

    let mut u = eta0.ln();
    let mut s = softplus_inv(1.0 + m_ref as f64 * rho0 * eta0);
    let mut iterations = 0;

    // profiled objective and gradient (per-cluster averages)
    let eval = |u: f64, s: f64| -> Result<(Vec<f64>, f64, [f64; 2])> {
        let eta = u.exp();
        let delta = softplus(s);
        if delta <= 1e-12 {
            return Err(Error::Domain(format!(
                "variance components pinned at the positive-definiteness boundary (type group {label})"
            )));
        }
        let rho = (delta - 1.0) / (m_ref as f64 * eta);
        let beta = gls_beta(&packed, p, eta, rho, label)?;
        let ll = packed_loglik(&packed, &beta, eta, rho)? / n;
        let score = packed_score(&packed, &beta, eta, rho)?;
        let d_eta = score[p] / n;
        let d_rho = score[p + 1] / n;
        // chain rule: rho varies with u at fixed s
        let sig = 1.0 / (1.0 + (-s).exp());
        let g = [
            eta * d_eta - rho * d_rho,
            d_rho * sig / (m_ref as f64 * eta),
        ];
        Ok((beta, ll, g))
    };

    let (mut beta_cur, mut ll_cur, mut g_cur) = {
        let (b, l, g) = eval(u, s)?;
        (b, l, g)
    };

    for iter in 0..opts.max_iter {
        iterations = iter;
        let grad_norm = g_cur[0].abs().max(g_cur[1].abs());
        if grad_norm <= opts.tol {
            break;
        }
        // Newton direction from a finite-difference Hessian of the analytic gradient
        let h = 1e-6;
        let (_, _, gu) = eval(u + h, s)?;
        let (_, _, gu2) = eval(u - h, s)?;
        let (_, _, gs) = eval(u, s + h)?;
        let (_, _, gs2) = eval(u, s - h)?;
        let h11 = (gu[0] - gu2[0]) / (2.0 * h);
        let h21 = (gu[1] - gu2[1]) / (2.0 * h);
        let h12 = (gs[0] - gs2[0]) / (2.0 * h);
        let h22 = (gs[1] - gs2[1]) / (2.0 * h);
        let hess = [
            [h11, 0.5 * (h12 + h21)],
            [0.5 * (h12 + h21), h22],
        ];
        let det = hess[0][0] * hess[1][1] - hess[0][1] * hess[1][0];
        // ascend: -H^{-1} g when H is negative definite, else plain gradient
        let (mut du, mut ds) = if det > 0.0 && hess[0][0] < 0.0 {
            (
                -(hess[1][1] * g_cur[0] - hess[0][1] * g_cur[1]) / det,
                -(-hess[1][0] * g_cur[0] + hess[0][0] * g_cur[1]) / det,
            )
        } else {
            (g_cur[0], g_cur[1])
        };
        let norm = du.abs().max(ds.abs());
        if norm > 5.0 {
            du *= 5.0 / norm;
            ds *= 5.0 / norm;
        }

        let mut step = 1.0;
        let mut advanced = false;
        for _ in 0..40 {
            match eval(u + step * du, s + step * ds) {
                Ok((b, ll, g)) if ll.is_finite() && ll >= ll_cur - 1e-14 => {
                    if ll > ll_cur || g[0].abs().max(g[1].abs()) < grad_norm {
                        u += step * du;
                        s += step * ds;
                        beta_cur = b;
                        ll_cur = ll;
                        g_cur = g;
                        advanced = true;
                    }
                    break;
                }
                _ => step *= 0.5,
            }
        }
        if !advanced {
            break;
        }
    }

    let grad_norm = g_cur[0].abs().max(g_cur[1].abs());
    if grad_norm > opts.tol {
        return Err(Error::NonConvergence {
            what: format!("linear mixed fit (type group {label})"),
            iterations,
            grad_norm,
        });
    }
    let beta_hat = beta_cur;

    let eta_hat = u.exp();
    let delta = softplus(s);
    let rho_hat = (delta - 1.0) / (m_ref as f64 * eta_hat);

    // observed information over (beta, eta, rho) for reporting
    let mut theta: Vec<f64> = beta_hat.clone();
    theta.push(eta_hat);
    theta.push(rho_hat);
    let se = {
        let h = 1e-5;
        let dim = theta.len();
        let mut info = DMatrix::<f64>::zeros(dim, dim);
        let mut ok = true;
        for i in 0..dim {
            let mut hi = theta.clone();
            let mut lo = theta.clone();
            hi[i] += h;
            lo[i] -= h;
            let s_hi = packed_score(&packed, &hi[..p], hi[p], hi[p + 1]);
            let s_lo = packed_score(&packed, &lo[..p], lo[p], lo[p + 1]);
            match (s_hi, s_lo) {
                (Ok(a), Ok(b)) => {
                    for j in 0..dim {
                        info[(j, i)] = -(a[j] - b[j]) / (2.0 * h);
                    }
                }
                _ => ok = false,
            }
        }
        if ok {
            let info = (&info + info.transpose()) * 0.5;
            info.try_inverse()
                .map(|cov| (0..dim).map(|i| cov[(i, i)].max(0.0).sqrt()).collect())
                .unwrap_or_else(|| vec![f64::NAN; dim])
        } else {
            vec![f64::NAN; dim]
        }
    };

    let info = OutcomeFitInfo {
        loglik: packed_loglik(&packed, &beta_hat, eta_hat, rho_hat)?,
        iterations,
        grad_norm,
        param_se: se,
    };
    Ok((beta_hat, eta_hat, rho_hat, info))
}

/// Generalized least squares for `beta` at fixed variance components, using
/// `H S^{-1} H^T = eta H H^T - c (H 1)(H 1)^T`.
fn gls_beta(
    packed: &[PackedOutcome],
    p: usize,
    eta: f64,
    rho: f64,
    label: usize,
) -> Result<Vec<f64>> {
    let mut a_mat = DMatrix::<f64>::zeros(p, p);
    let mut b_vec = DVector::<f64>::zeros(p);
    let mut h = DVector::<f64>::zeros(p);
    for cluster in packed {
        let m = cluster.y.len();
        let c = rho * eta * eta / (1.0 + m as f64 * rho * eta);
        let mut h_rowsum = DVector::<f64>::zeros(p);
        let mut ysum = 0.0;
        for (j, row) in cluster.rows.iter().enumerate() {
            h.copy_from_slice(row);
            a_mat.syger(eta, &h, &h, 1.0);
            b_vec.axpy(eta * cluster.y[j], &h, 1.0);
            h_rowsum += &h;
            ysum += cluster.y[j];
        }
        a_mat.syger(-c, &h_rowsum, &h_rowsum, 1.0);
        b_vec.axpy(-c * ysum, &h_rowsum, 1.0);
    }
    // syger fills the lower triangle; mirror it
    for i in 0..p {
        for j in (i + 1)..p {
            a_mat[(i, j)] = a_mat[(j, i)];
        }
    }
    match a_mat.clone().cholesky() {
        Some(ch) => Ok(ch.solve(&b_vec).as_slice().to_vec()),
        None => {
            // name the (near-)collinear columns via the smallest singular direction
            let svd = a_mat.svd(true, true);
            let vt = svd.v_t.as_ref();
            let mut cols = Vec::new();
            if let Some(vt) = vt {
                let last = vt.nrows() - 1;
                for j in 0..p {
                    if vt[(last, j)].abs() > 0.3 {
                        cols.push(j);
                    }
                }
            }
            Err(Error::RankDeficient {
                type_label: label,
                columns: cols,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// kernel model
// ---------------------------------------------------------------------------

/// Options for [`fit_nw`].
#[derive(Debug, Clone)]
pub struct KernelFitOptions {
    /// Scale constant `c0` in `h_c = c0 sigma_pooled N^(-1/(4+p))`.
    pub bandwidth_scale: f64,
    /// Summarize peers by their treated count and covariate means instead of
    /// the raw per-peer vectors.
    pub symmetrize_peers: bool,
}

impl Default for KernelFitOptions {
    fn default() -> Self {
        Self {
            bandwidth_scale: 1.0,
            symmetrize_peers: false,
        }
    }
}

/// Bandwidth rule: `h_c = c0 sigma_pooled N^(-1/(4+p))` with `p` the number
/// of continuous covariate columns, and `h_d = min(1, h_c^2)`. The training
/// fold is retained for prediction.
pub fn fit_nw(data: &Dataset, opts: &KernelFitOptions) -> Result<OutcomeModel> {
    if data.n() == 0 {
        return Err(Error::Domain("kernel fit requires a nonempty fold".into()));
    }
    let kinds = data.covariate_kinds().to_vec();
    let p = kinds
        .iter()
        .filter(|k| **k == CovariateKind::Continuous)
        .count();
    let n = data.n() as f64;

    let sigma_pooled = if p == 0 {
        1.0
    } else {
        let mut sum = 0.0;
        let mut used = 0usize;
        for (c, kind) in kinds.iter().enumerate() {
            if *kind != CovariateKind::Continuous {
                continue;
            }
            let mut vals = Vec::new();
            for cl in data.clusters() {
                for row in &cl.x {
                    if c < row.len() {
                        vals.push(row[c]);
                    }
                }
            }
            if vals.len() > 1 {
                let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                let var =
                    vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (vals.len() - 1) as f64;
                sum += var.sqrt();
                used += 1;
            }
        }
        if used == 0 {
            1.0
        } else {
            (sum / used as f64).max(1e-12)
        }
    };

    let raw = opts.bandwidth_scale * n.powf(-1.0 / (4.0 + p as f64));
    let h_c = sigma_pooled * raw;
    let h_d = (raw * raw).min(1.0);

    let mut rows = Vec::new();
    for cl in data.clusters() {
        for j in 0..cl.size() {
            rows.push(make_row(
                cl.type_label,
                cl.y[j],
                &cl.a,
                &cl.x,
                j,
                opts.symmetrize_peers,
            ));
        }
    }

    Ok(OutcomeModel::Kernel(KernelModel {
        rows,
        h_c,
        h_d,
        symmetrize_peers: opts.symmetrize_peers,
        kinds,
        fallbacks: Arc::new(AtomicUsize::new(0)),
    }))
}

fn make_row(
    k: usize,
    y: f64,
    a: &TreatmentVector,
    x: &[Vec<f64>],
    j: usize,
    symmetrize: bool,
) -> KernelRow {
    let peers: Vec<usize> = (0..x.len()).filter(|&l| l != j).collect();
    if symmetrize {
        let treated: f64 = peers.iter().map(|&l| f64::from(a.bit(l))).sum();
        let d = x[j].len();
        let mut means = vec![0.0; d];
        if !peers.is_empty() {
            for &l in &peers {
                for (acc, v) in means.iter_mut().zip(&x[l]) {
                    *acc += v;
                }
            }
            for v in &mut means {
                *v /= peers.len() as f64;
            }
        }
        KernelRow {
            k,
            y,
            a_own: a.bit(j),
            a_peers: vec![treated],
            x_own: x[j].clone(),
            x_peers: vec![means],
        }
    } else {
        KernelRow {
            k,
            y,
            a_own: a.bit(j),
            a_peers: peers.iter().map(|&l| f64::from(a.bit(l))).collect(),
            x_own: x[j].clone(),
            x_peers: peers.iter().map(|&l| x[l].clone()).collect(),
        }
    }
}

impl KernelModel {
    fn predict_unit(
        &self,
        a: &TreatmentVector,
        x: &[Vec<f64>],
        j: usize,
        k: usize,
    ) -> Result<f64> {
        let query = make_row(k, 0.0, a, x, j, self.symmetrize_peers);
        if let Some(v) = self.ratio(&query, self.h_d) {
            return Ok(v);
        }
        // widen the discrete bandwidth once, then fall back to stratum means
        self.fallbacks.fetch_add(1, Ordering::Relaxed);
        if let Some(v) = self.ratio(&query, self.h_d.sqrt()) {
            return Ok(v);
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in &self.rows {
            if row.k == k && row.a_own == query.a_own {
                sum += row.y;
                count += 1;
            }
        }
        if count > 0 {
            return Ok(sum / count as f64);
        }
        let mut sum = 0.0;
        let mut count = 0usize;
        for row in &self.rows {
            if row.k == k {
                sum += row.y;
                count += 1;
            }
        }
        if count > 0 {
            return Ok(sum / count as f64);
        }
        let total: f64 = self.rows.iter().map(|r| r.y).sum();
        Ok(total / self.rows.len() as f64)
    }

    fn ratio(&self, query: &KernelRow, h_d: f64) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0.0;
        for row in &self.rows {
            if row.k != query.k || row.a_own != query.a_own {
                continue;
            }
            if row.a_peers.len() != query.a_peers.len() {
                continue;
            }
            let w = self.weight(query, row, h_d);
            num += w * row.y;
            den += w;
        }
        (den > 0.0).then(|| num / den)
    }

    fn weight(&self, q: &KernelRow, r: &KernelRow, h_d: f64) -> f64 {
        let mut mismatches = 0u32;
        for (a, b) in q.a_peers.iter().zip(&r.a_peers) {
            if a != b {
                mismatches += 1;
            }
        }
        let mut w_cont = 0.0f64; // accumulated -u^2/2 exponent
        let mut count_cont = |qv: f64, rv: f64| {
            let u = (qv - rv) / self.h_c;
            w_cont -= 0.5 * u * u;
        };
        for (c, kind) in self.kinds.iter().enumerate() {
            if c >= q.x_own.len() {
                break;
            }
            match kind {
                CovariateKind::Continuous => count_cont(q.x_own[c], r.x_own[c]),
                CovariateKind::Discrete => {
                    if q.x_own[c] != r.x_own[c] {
                        mismatches += 1;
                    }
                }
            }
        }
        for (qp, rp) in q.x_peers.iter().zip(&r.x_peers) {
            for (c, kind) in self.kinds.iter().enumerate() {
                if c >= qp.len() {
                    break;
                }
                match kind {
                    CovariateKind::Continuous => count_cont(qp[c], rp[c]),
                    CovariateKind::Discrete => {
                        if qp[c] != rp[c] {
                            mismatches += 1;
                        }
                    }
                }
            }
        }
        let discrete = if mismatches == 0 {
            1.0
        } else {
            h_d.powi(mismatches as i32)
        };
        discrete * w_cont.exp()
    }
}
