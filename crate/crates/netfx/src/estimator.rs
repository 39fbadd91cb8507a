//! Point estimation and inference for the estimand family.
//!
//! The per-cluster estimating function is
//!
//! `phi_k(O_i) = w_k(A_i, X_i)^T {Y_i - g(A_i, X_i, k)} / e(A_i | X_i, k)
//!             + sum_{a} w_k(a, X_i)^T g(a, X_i, k)`
//!
//! with the sum over all `2^{M_k}` assignments. Averaging within type gives
//! `theta_k`, and `tau = sum_k v_k(p_k) theta_k`. The estimator is doubly
//! robust: it is consistent if either the propensity or the outcome model is
//! correct. The variance estimate is the empirical second moment of the
//! influence contributions
//!
//! `v_k(p_k) 1(L_i = k) {phi_k - theta_k} / p_k + {1(L_i = k) - p_k} v_k'(p_k) theta_k`
//!
//! where the second term is dropped when the type proportions are known by
//! design. Cross-fitting refits the nuisances on each fold's complement and
//! evaluates held-out clusters, two folds, stratified by type.

use crate::data::{enumerate_assignments_capped, ClusterObservation, Dataset, TypeProportions};
use crate::error::{Error, Result};
use crate::estimand::{EstimandSpec, SpecKind};
use crate::numeric::{normal_quantile, KahanSum};
use crate::outcome::{
    fit_linear_mixed, fit_nw, KernelFitOptions, LinearFitOptions, OutcomeModel,
};
use crate::propensity::{
    fit_logistic_mixed, KnownRandomization, LogisticFitOptions, PropensityModel,
    DEFAULT_PROPENSITY_FLOOR,
};
use crate::rng::CounterRng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};

/// Two-fold assignment of clusters, stratified by type.
#[derive(Debug, Clone)]
pub struct FoldAssignment {
    /// Fold (1 or 2) per cluster id.
    pub fold: BTreeMap<String, u8>,
    pub seed: u64,
    fold1: Vec<usize>,
    fold2: Vec<usize>,
}

impl FoldAssignment {
    pub fn fold_indices(&self, fold: u8) -> &[usize] {
        match fold {
            1 => &self.fold1,
            _ => &self.fold2,
        }
    }
}

/// Per-type shuffle with the given seed; the first `ceil(N_k / 2)` shuffled
/// clusters of each type go to fold 1. Deterministic given the seed.
pub fn cross_fit_split(data: &Dataset, seed: u64) -> Result<FoldAssignment> {
    if data.n() < 2 {
        return Err(Error::Domain("cross-fitting needs at least 2 clusters".into()));
    }
    let mut fold = BTreeMap::new();
    let mut fold1 = Vec::new();
    let mut fold2 = Vec::new();
    for &k in data.types().keys() {
        let mut idx: Vec<usize> = (0..data.n())
            .filter(|&i| data.clusters()[i].type_label == k)
            .collect();
        let mut rng = CounterRng::stream(seed, k as u64);
        rng.shuffle(&mut idx);
        let cut = idx.len().div_ceil(2);
        for (pos, &i) in idx.iter().enumerate() {
            let f = if pos < cut { 1u8 } else { 2u8 };
            fold.insert(data.clusters()[i].cluster_id.clone(), f);
            if f == 1 {
                fold1.push(i);
            } else {
                fold2.push(i);
            }
        }
    }
    fold1.sort_unstable();
    fold2.sort_unstable();
    Ok(FoldAssignment {
        fold,
        seed,
        fold1,
        fold2,
    })
}

/// Estimation diagnostics carried alongside the point estimate.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    /// Propensity evaluations clipped into `[floor, 1 - floor]`.
    pub propensity_clips: usize,
    /// Kernel predictions that fell back past an empty neighborhood.
    pub kernel_fallbacks: usize,
    /// Fold sizes per type, when cross-fitting was used.
    pub fold_sizes: Option<BTreeMap<usize, (usize, usize)>>,
    pub nuisance_summaries: Vec<String>,
    pub warnings: Vec<String>,
}

/// Point estimate, per-type components, and influence-function inference.
#[derive(Debug, Clone, Serialize)]
pub struct EstimateResult {
    pub tau: f64,
    pub theta_by_type: BTreeMap<usize, f64>,
    pub p_by_type: BTreeMap<usize, f64>,
    /// Variance of the per-cluster influence contribution; the squared
    /// standard error is `variance / n`.
    pub variance: Option<f64>,
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
    /// Two-sided level: `0.05` yields a 95% interval.
    pub level: f64,
    pub n: usize,
    pub diagnostics: Diagnostics,
}

fn z_for_level(level: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::Domain(format!("level must lie in [0, 1], got {level}")));
    }
    normal_quantile(1.0 - level / 2.0)
}

/// Wald interval `tau -/+ z_{1 - level/2} * sqrt(variance / n)`.
pub fn confidence_interval(result: &EstimateResult, level: f64) -> Result<(f64, f64)> {
    let variance = result.variance.ok_or_else(|| {
        Error::VarianceUnavailable("no influence-function variance on this result".into())
    })?;
    let z = z_for_level(level)?;
    let se = (variance / result.n as f64).sqrt();
    Ok((result.tau - z * se, result.tau + z * se))
}

#[inline]
fn clip_propensity(e: f64, floor: f64, clips: &AtomicUsize) -> f64 {
    if e < floor {
        clips.fetch_add(1, Ordering::Relaxed);
        floor
    } else if e > 1.0 - floor {
        clips.fetch_add(1, Ordering::Relaxed);
        1.0 - floor
    } else {
        e
    }
}

/// The per-cluster estimating function `phi_k` for the cluster's own type.
pub fn phi_k(
    cluster: &ClusterObservation,
    e: &PropensityModel,
    g: &OutcomeModel,
    spec: &EstimandSpec,
    floor: f64,
    clips: &AtomicUsize,
) -> Result<f64> {
    let k = cluster.type_label;
    let m = cluster.size();
    let w_obs = spec.weights(&cluster.a, &cluster.x, k)?;
    let g_obs = g.predict(&cluster.a, &cluster.x, k)?;
    let e_obs = clip_propensity(
        e.group_propensity(&cluster.a, &cluster.x, k)?,
        floor,
        clips,
    );

    let mut value = 0.0;
    for j in 0..m {
        value += w_obs[j] * (cluster.y[j] - g_obs[j]);
    }
    value /= e_obs;

    for a in enumerate_assignments_capped(m, m)? {
        let w = spec.weights(&a, &cluster.x, k)?;
        let pred = g.predict(&a, &cluster.x, k)?;
        for j in 0..m {
            value += w[j] * pred[j];
        }
    }
    if !value.is_finite() {
        return Err(Error::Domain(format!(
            "non-finite influence contribution for cluster {}",
            cluster.cluster_id
        )));
    }
    Ok(value)
}

/// `psi_k(a, alpha)`: the unit-averaged augmented estimate of the mean
/// potential outcome at own-treatment `a` under peer allocation `alpha`.
/// The direct and indirect effects are contrasts of these.
pub fn psi_k(
    cluster: &ClusterObservation,
    e: &PropensityModel,
    g: &OutcomeModel,
    a_value: u8,
    alpha: f64,
    floor: f64,
    clips: &AtomicUsize,
) -> Result<f64> {
    let k = cluster.type_label;
    let m = cluster.size();
    let g_obs = g.predict(&cluster.a, &cluster.x, k)?;
    let e_obs = clip_propensity(
        e.group_propensity(&cluster.a, &cluster.x, k)?,
        floor,
        clips,
    );

    let mut total = 0.0;
    for j in 0..m {
        if cluster.a.bit(j) == a_value {
            let pi = crate::data::policy_weight(&cluster.a.without(j), alpha)?;
            total += (cluster.y[j] - g_obs[j]) * pi / e_obs;
        }
    }
    for a in enumerate_assignments_capped(m, m)? {
        let pred = g.predict(&a, &cluster.x, k)?;
        for j in 0..m {
            if a.bit(j) == a_value {
                total += pred[j] * crate::data::policy_weight(&a.without(j), alpha)?;
            }
        }
    }
    Ok(total / m as f64)
}

/// Options shared by the estimators.
#[derive(Debug, Clone)]
pub struct EstimatorOptions {
    pub propensity_floor: f64,
    /// Two-sided level for the reported interval.
    pub level: f64,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            propensity_floor: DEFAULT_PROPENSITY_FLOOR,
            level: 0.05,
        }
    }
}

/// Assemble `theta`, `tau`, and the influence-function variance from
/// per-cluster `phi` values. Shared by the plug-in and cross-fitting paths.
fn assemble(
    entries: &[(usize, f64)], // (type, phi) in cluster order
    p: &TypeProportions,
    spec: &EstimandSpec,
    level: f64,
    mut diagnostics: Diagnostics,
    n: usize,
) -> Result<EstimateResult> {
    let mut sums: BTreeMap<usize, KahanSum> = BTreeMap::new();
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &(k, phi) in entries {
        sums.entry(k).or_default().add(phi);
        *counts.entry(k).or_default() += 1;
    }
    let mut theta: BTreeMap<usize, f64> = BTreeMap::new();
    for (&k, sum) in &sums {
        theta.insert(k, sum.value() / counts[&k] as f64);
    }

    let mut tau = KahanSum::default();
    for (&k, &th) in &theta {
        tau.add(spec.v(p.get(k)?) * th);
    }
    let tau = tau.value();

    let variance_ok = counts.values().all(|&c| c >= 2);
    if !variance_ok {
        diagnostics.warnings.push(
            "a cluster type has a single cluster; point estimate kept, variance suppressed"
                .into(),
        );
    }

    let (variance, se, ci) = if variance_ok {
        // cross-type constant in the p-score term
        let mut p_term_mean = 0.0;
        if !p.known {
            for (&k, &th) in &theta {
                let pk = p.get(k)?;
                p_term_mean += pk * spec.v_prime(pk) * th;
            }
        }
        let mut acc = KahanSum::default();
        for &(k, phi) in entries {
            let pk = p.get(k)?;
            let mut inf = spec.v(pk) * (phi - theta[&k]) / pk;
            if !p.known {
                inf += spec.v_prime(pk) * theta[&k] - p_term_mean;
            }
            acc.add(inf * inf);
        }
        let variance = acc.value() / n as f64;
        let se = (variance / n as f64).sqrt();
        let z = z_for_level(level)?;
        (Some(variance), Some(se), Some((tau - z * se, tau + z * se)))
    } else {
        (None, None, None)
    };

    Ok(EstimateResult {
        tau,
        theta_by_type: theta,
        p_by_type: p.p.clone(),
        variance,
        se,
        ci,
        level,
        n,
        diagnostics,
    })
}

/// Plug-in estimator: evaluate `phi_k` with the supplied nuisances on every
/// cluster, average within type, and weight by `v(p)`.
pub fn aipw_estimate(
    data: &Dataset,
    e: &PropensityModel,
    g: &OutcomeModel,
    spec: &EstimandSpec,
    p: &TypeProportions,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    for &k in data.types().keys() {
        p.get(k)?;
    }
    let clips = AtomicUsize::new(0);
    let entries: Vec<(usize, f64)> = data
        .clusters()
        .par_iter()
        .map(|c| Ok((c.type_label, phi_k(c, e, g, spec, opts.propensity_floor, &clips)?)))
        .collect::<Result<_>>()?;
    let diagnostics = Diagnostics {
        propensity_clips: clips.load(Ordering::Relaxed),
        kernel_fallbacks: g.kernel_fallbacks(),
        ..Diagnostics::default()
    };
    assemble(&entries, p, spec, opts.level, diagnostics, data.n())
}

/// How each nuisance is (re)fitted on a fold complement.
#[derive(Debug, Clone)]
pub enum PropensityFitter {
    Known(KnownRandomization),
    LogisticMixed(LogisticFitOptions),
    /// Use an already-fitted model on every fold.
    Prefit(PropensityModel),
}

#[derive(Debug, Clone)]
pub enum OutcomeFitter {
    LinearMixed(LinearFitOptions),
    Kernel(KernelFitOptions),
    Zero,
    /// Use an already-fitted model on every fold.
    Prefit(OutcomeModel),
}

/// The pair of nuisance fitters driving estimation.
#[derive(Debug, Clone)]
pub struct NuisancePlan {
    pub propensity: PropensityFitter,
    pub outcome: OutcomeFitter,
}

impl NuisancePlan {
    pub fn fit_propensity(&self, data: &Dataset) -> Result<PropensityModel> {
        match &self.propensity {
            PropensityFitter::Known(design) => Ok(PropensityModel::Known(design.clone())),
            PropensityFitter::LogisticMixed(opts) => {
                Ok(PropensityModel::LogisticMixed(fit_logistic_mixed(data, opts)?))
            }
            PropensityFitter::Prefit(model) => Ok(model.clone()),
        }
    }

    pub fn fit_outcome(&self, data: &Dataset) -> Result<OutcomeModel> {
        match &self.outcome {
            OutcomeFitter::LinearMixed(opts) => {
                Ok(OutcomeModel::LinearMixed(fit_linear_mixed(data, opts)?))
            }
            OutcomeFitter::Kernel(opts) => fit_nw(data, opts),
            OutcomeFitter::Zero => Ok(OutcomeModel::Zero),
            OutcomeFitter::Prefit(model) => Ok(model.clone()),
        }
    }

    fn summaries(&self, e: &PropensityModel, g: &OutcomeModel) -> Vec<String> {
        let mut out = Vec::new();
        if let PropensityModel::LogisticMixed(m) = e {
            for (k, info) in &m.fit_info {
                out.push(format!(
                    "propensity type {k}: loglik {:.4}, {} iterations, grad {:.2e}",
                    info.loglik, info.iterations, info.grad_norm
                ));
            }
        }
        if let OutcomeModel::LinearMixed(m) = g {
            for (k, info) in &m.fit_info {
                out.push(format!(
                    "outcome type {k}: loglik {:.4}, {} iterations, grad {:.2e}",
                    info.loglik, info.iterations, info.grad_norm
                ));
            }
        }
        out
    }
}

/// Fit both nuisances on the full sample and run [`aipw_estimate`].
pub fn fit_and_estimate(
    data: &Dataset,
    plan: &NuisancePlan,
    spec: &EstimandSpec,
    p: &TypeProportions,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let e = plan.fit_propensity(data)?;
    let g = plan.fit_outcome(data)?;
    let mut result = aipw_estimate(data, &e, &g, spec, p, opts)?;
    result.diagnostics.nuisance_summaries = plan.summaries(&e, &g);
    Ok(result)
}

/// Everything the cross-fitting estimator produced, including the fold models
/// for variance cross-checks.
pub struct CrossfitDetail {
    pub result: EstimateResult,
    pub folds: FoldAssignment,
    /// `(propensity, outcome)` fitted on the complement of fold 1 and 2.
    pub fold_models: Vec<(PropensityModel, OutcomeModel)>,
    /// `(type, phi)` per cluster in data order, evaluated with the held-out
    /// fold's models.
    pub per_cluster: Vec<(usize, f64)>,
}

/// Cross-fitting estimator: split by type, fit nuisances on each fold's
/// complement, evaluate `phi_k` on the held-out fold, then pool.
pub fn crossfit_estimate(
    data: &Dataset,
    plan: &NuisancePlan,
    spec: &EstimandSpec,
    p: &TypeProportions,
    opts: &EstimatorOptions,
    seed: u64,
) -> Result<EstimateResult> {
    Ok(crossfit_estimate_detailed(data, plan, spec, p, opts, seed)?.result)
}

/// As [`crossfit_estimate`], returning the fold assignment and fold models.
pub fn crossfit_estimate_detailed(
    data: &Dataset,
    plan: &NuisancePlan,
    spec: &EstimandSpec,
    p: &TypeProportions,
    opts: &EstimatorOptions,
    seed: u64,
) -> Result<CrossfitDetail> {
    for &k in data.types().keys() {
        p.get(k)?;
    }
    let folds = cross_fit_split(data, seed)?;
    let mut fold_sizes: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for &k in data.types().keys() {
        let c1 = folds
            .fold_indices(1)
            .iter()
            .filter(|&&i| data.clusters()[i].type_label == k)
            .count();
        let c2 = folds
            .fold_indices(2)
            .iter()
            .filter(|&&i| data.clusters()[i].type_label == k)
            .count();
        if c1 == 0 || c2 == 0 {
            return Err(Error::Domain(format!(
                "cross-fitting requires both folds to contain type {k} (sizes {c1}/{c2})"
            )));
        }
        fold_sizes.insert(k, (c1, c2));
    }

    let mut fold_models = Vec::with_capacity(2);
    let mut summaries = Vec::new();
    for fold in [1u8, 2u8] {
        let complement = folds.fold_indices(if fold == 1 { 2 } else { 1 });
        let train = data.subset(complement)?;
        let e = plan.fit_propensity(&train).map_err(|e| Error::FoldFit {
            fold: fold as usize,
            model: "propensity".into(),
            source: Box::new(e),
        })?;
        let g = plan.fit_outcome(&train).map_err(|e| Error::FoldFit {
            fold: fold as usize,
            model: "outcome".into(),
            source: Box::new(e),
        })?;
        summaries.extend(
            plan.summaries(&e, &g)
                .into_iter()
                .map(|s| format!("fold {fold}: {s}")),
        );
        fold_models.push((e, g));
    }

    let (result, per_cluster) = crossfit_eval_entries(data, &folds, &fold_models, spec, p, opts)?;
    let mut result = result;
    result.diagnostics.fold_sizes = Some(fold_sizes);
    result.diagnostics.nuisance_summaries = summaries;
    Ok(CrossfitDetail {
        result,
        folds,
        fold_models,
        per_cluster,
    })
}

/// Evaluate an estimand on held-out clusters with already-fitted fold models.
/// Used by allocation sweeps to avoid refitting nuisances per grid point.
pub fn crossfit_eval(
    data: &Dataset,
    folds: &FoldAssignment,
    fold_models: &[(PropensityModel, OutcomeModel)],
    spec: &EstimandSpec,
    p: &TypeProportions,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    Ok(crossfit_eval_entries(data, folds, fold_models, spec, p, opts)?.0)
}

fn crossfit_eval_entries(
    data: &Dataset,
    folds: &FoldAssignment,
    fold_models: &[(PropensityModel, OutcomeModel)],
    spec: &EstimandSpec,
    p: &TypeProportions,
    opts: &EstimatorOptions,
) -> Result<(EstimateResult, Vec<(usize, f64)>)> {
    let clips = AtomicUsize::new(0);
    let fallbacks_before: usize = fold_models.iter().map(|(_, g)| g.kernel_fallbacks()).sum();
    let per_cluster: Vec<(usize, f64)> = data
        .clusters()
        .par_iter()
        .map(|c| {
            let fold = folds.fold[&c.cluster_id];
            let (e, g) = &fold_models[(fold - 1) as usize];
            Ok((
                c.type_label,
                phi_k(c, e, g, spec, opts.propensity_floor, &clips)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let fallbacks_after: usize = fold_models.iter().map(|(_, g)| g.kernel_fallbacks()).sum();
    let diagnostics = Diagnostics {
        propensity_clips: clips.load(Ordering::Relaxed),
        kernel_fallbacks: fallbacks_after - fallbacks_before,
        ..Diagnostics::default()
    };
    let result = assemble(&per_cluster, p, spec, opts.level, diagnostics, data.n())?;
    Ok((result, per_cluster))
}

/// Simplified mean-squared-deviation variance available for the direct and
/// indirect effects: the average of
/// `{psi_k(a, alpha) - psi_k(a', alpha') - tau}^2` over clusters, with each
/// cluster evaluated under its held-out fold's nuisances. An independent
/// route to the general influence-function variance.
pub fn simplified_contrast_variance(
    data: &Dataset,
    folds: &FoldAssignment,
    fold_models: &[(PropensityModel, OutcomeModel)],
    spec: &EstimandSpec,
    tau: f64,
    floor: f64,
) -> Result<f64> {
    let alloc = spec.allocation().ok_or_else(|| {
        Error::Config("simplified variance exists only for the DE/IE built-ins".into())
    })?;
    let clips = AtomicUsize::new(0);
    let mut acc = KahanSum::default();
    for c in data.clusters() {
        let k = c.type_label;
        let fold = folds.fold[&c.cluster_id];
        let (e, g) = &fold_models[(fold - 1) as usize];
        let contrast = match &spec.kind {
            SpecKind::DirectEffect { .. } => {
                let alpha = alloc.alpha.get(k)?;
                psi_k(c, e, g, 1, alpha, floor, &clips)?
                    - psi_k(c, e, g, 0, alpha, floor, &clips)?
            }
            SpecKind::IndirectEffect { .. } => {
                let alpha = alloc.alpha.get(k)?;
                let alpha_prime = alloc
                    .alpha_prime
                    .as_ref()
                    .ok_or_else(|| Error::Config("IE requires alpha_prime".into()))?
                    .get(k)?;
                psi_k(c, e, g, 0, alpha, floor, &clips)?
                    - psi_k(c, e, g, 0, alpha_prime, floor, &clips)?
            }
            SpecKind::Generic => unreachable!("guarded by allocation()"),
        };
        let dev = contrast - tau;
        acc.add(dev * dev);
    }
    Ok(acc.value() / data.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CovariateKind, TreatmentVector};
    use crate::estimand::{de_spec, ie_spec, PolicyAllocation};
    use crate::outcome::{DesignSpec, LinearMixedModel};
    use approx::assert_relative_eq;

    fn tv(bits: &[u8]) -> TreatmentVector {
        TreatmentVector::new(bits.to_vec()).unwrap()
    }

    fn linear_outcome(beta: Vec<f64>, types: &[usize]) -> OutcomeModel {
        let mut bmap = BTreeMap::new();
        let mut emap = BTreeMap::new();
        let mut rmap = BTreeMap::new();
        for &k in types {
            bmap.insert(k, beta.clone());
            emap.insert(k, 1.0);
            rmap.insert(k, 0.0);
        }
        OutcomeModel::LinearMixed(
            LinearMixedModel::new(bmap, emap, rmap, DesignSpec::default()).unwrap(),
        )
    }

    /// Clusters with outcomes equal to the linear model's conditional mean.
    fn noiseless_dataset(beta: &[f64], n: usize, seed: u64) -> Dataset {
        let mut rng = CounterRng::new(seed);
        let design = DesignSpec::default();
        let mut clusters = Vec::new();
        for i in 0..n {
            let m = 2;
            let x: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.normal()]).collect();
            let bits: Vec<u8> = (0..m).map(|_| u8::from(rng.bernoulli(0.4))).collect();
            let a = tv(&bits);
            let y: Vec<f64> = (0..m)
                .map(|j| {
                    design
                        .row(&a, &x, j)
                        .iter()
                        .zip(beta)
                        .map(|(h, b)| h * b)
                        .sum()
                })
                .collect();
            clusters.push(ClusterObservation {
                cluster_id: format!("c{i}"),
                type_label: 1,
                y,
                a,
                x,
            });
        }
        Dataset::new(clusters, vec![CovariateKind::Continuous], 15).unwrap()
    }

    #[test]
    fn phi_zero_residual_reduces_to_augmentation() {
        let beta = vec![0.5, 2.0, 0.7, 1.1, -0.4];
        let data = noiseless_dataset(&beta, 5, 7);
        let g = linear_outcome(beta.clone(), &[1]);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.4).unwrap());
        let spec = de_spec(PolicyAllocation::scalar(0.3));
        let clips = AtomicUsize::new(0);
        for c in data.clusters() {
            let phi = phi_k(c, &e, &g, &spec, 1e-6, &clips).unwrap();
            let mut aug = 0.0;
            for a in crate::data::enumerate_assignments(2).unwrap() {
                let w = spec.weights(&a, &c.x, 1).unwrap();
                let pred = g.predict(&a, &c.x, 1).unwrap();
                aug += w.iter().zip(&pred).map(|(wi, gi)| wi * gi).sum::<f64>();
            }
            assert_relative_eq!(phi, aug, epsilon = 1e-12);
            // for the DE weights with a linear model this is the own-treatment coefficient
            assert_relative_eq!(phi, beta[1], epsilon = 1e-12);
        }
        assert_eq!(clips.load(Ordering::Relaxed), 0);
    }

    #[test]
    fn phi_constant_outcome_and_prediction_vanishes() {
        let c = ClusterObservation {
            cluster_id: "c0".into(),
            type_label: 1,
            y: vec![2.5, 2.5],
            a: tv(&[1, 0]),
            x: vec![vec![0.0], vec![0.0]],
        };
        let g = linear_outcome(vec![2.5, 0.0, 0.0, 0.0, 0.0], &[1]);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.5).unwrap());
        let spec = de_spec(PolicyAllocation::scalar(0.5));
        let clips = AtomicUsize::new(0);
        let phi = phi_k(&c, &e, &g, &spec, 1e-6, &clips).unwrap();
        assert!(phi.abs() < 1e-12);
    }

    /// Exhaustive-expectation oracle on a fully discrete instance: one type,
    /// M = 2, binary unit covariate, product propensity depending on x.
    struct DiscreteInstance {
        q: f64, // pr(x = 1)
        beta_true: Vec<f64>,
        e_true: PropensityModel,
    }

    impl DiscreteInstance {
        fn new() -> Self {
            Self {
                q: 0.4,
                beta_true: vec![0.3, 1.7, 0.6, -0.9, 0.5],
                e_true: PropensityModel::Known(KnownRandomization::custom(std::sync::Arc::new(
                    |_, x, _| 0.25 + 0.4 * x[0],
                ))),
            }
        }

        fn g_true(&self) -> OutcomeModel {
            linear_outcome(self.beta_true.clone(), &[1])
        }

        fn x_configs(&self) -> Vec<(Vec<Vec<f64>>, f64)> {
            let mut out = Vec::new();
            for b0 in 0..2u8 {
                for b1 in 0..2u8 {
                    let p = self.q.powi(i32::from(b0) + i32::from(b1))
                        * (1.0 - self.q).powi(2 - i32::from(b0) - i32::from(b1));
                    out.push((vec![vec![f64::from(b0)], vec![f64::from(b1)]], p));
                }
            }
            out
        }

        /// `theta* = sum_a E_x[w(a, x)^T g*(a, x)]`.
        fn theta_star(&self, spec: &EstimandSpec) -> f64 {
            let g = self.g_true();
            let mut theta = 0.0;
            for (x, px) in self.x_configs() {
                for a in crate::data::enumerate_assignments(2).unwrap() {
                    let w = spec.weights(&a, &x, 1).unwrap();
                    let pred = g.predict(&a, &x, 1).unwrap();
                    theta += px * w.iter().zip(&pred).map(|(wi, gi)| wi * gi).sum::<f64>();
                }
            }
            theta
        }

        /// Exhaustive `E[phi]` with `Y` at its conditional mean.
        fn expected_phi(&self, e: &PropensityModel, g: &OutcomeModel, spec: &EstimandSpec) -> f64 {
            let g_star = self.g_true();
            let mut expect = 0.0;
            let clips = AtomicUsize::new(0);
            for (x, px) in self.x_configs() {
                for a in crate::data::enumerate_assignments(2).unwrap() {
                    let e_star = self.e_true.group_propensity(&a, &x, 1).unwrap();
                    let y = g_star.predict(&a, &x, 1).unwrap();
                    let cluster = ClusterObservation {
                        cluster_id: "o".into(),
                        type_label: 1,
                        y,
                        a: a.clone(),
                        x: x.clone(),
                    };
                    expect += px * e_star * phi_k(&cluster, e, g, spec, 1e-12, &clips).unwrap();
                }
            }
            expect
        }
    }

    #[test]
    fn exhaustive_expectation_matches_theta_star() {
        let inst = DiscreteInstance::new();
        let spec = de_spec(PolicyAllocation::scalar(0.35));
        let theta = inst.theta_star(&spec);
        let expect = inst.expected_phi(&inst.e_true, &inst.g_true(), &spec);
        assert!((expect - theta).abs() < 1e-12, "{expect} vs {theta}");
    }

    #[test]
    fn double_robustness_wrong_outcome() {
        let inst = DiscreteInstance::new();
        for spec in [
            de_spec(PolicyAllocation::scalar(0.35)),
            ie_spec(PolicyAllocation::scalar_pair(0.7, 0.25)).unwrap(),
        ] {
            let theta = inst.theta_star(&spec);
            let g_wrong = linear_outcome(vec![-0.8, 0.2, -0.1, 1.5, 0.3], &[1]);
            let expect = inst.expected_phi(&inst.e_true, &g_wrong, &spec);
            assert!((expect - theta).abs() < 1e-12, "{expect} vs {theta}");
        }
    }

    #[test]
    fn double_robustness_wrong_propensity() {
        let inst = DiscreteInstance::new();
        for spec in [
            de_spec(PolicyAllocation::scalar(0.35)),
            ie_spec(PolicyAllocation::scalar_pair(0.7, 0.25)).unwrap(),
        ] {
            let theta = inst.theta_star(&spec);
            let e_wrong = PropensityModel::Known(KnownRandomization::uniform(0.55).unwrap());
            let expect = inst.expected_phi(&e_wrong, &inst.g_true(), &spec);
            assert!((expect - theta).abs() < 1e-12, "{expect} vs {theta}");
        }
    }

    #[test]
    fn ipw_special_case_is_unbiased() {
        let inst = DiscreteInstance::new();
        let spec = de_spec(PolicyAllocation::scalar(0.5));
        let theta = inst.theta_star(&spec);
        let expect = inst.expected_phi(&inst.e_true, &OutcomeModel::Zero, &spec);
        assert!((expect - theta).abs() < 1e-12, "{expect} vs {theta}");
    }

    #[test]
    fn mean_zero_influence_function_with_p_term() {
        // K = 1 forces the p-term to zero pointwise; check the full identity
        // E[v(p) (phi - theta)/p + (1(L=1) - p) v' theta] = 0 exhaustively.
        let inst = DiscreteInstance::new();
        let spec = de_spec(PolicyAllocation::scalar(0.35));
        let theta = inst.theta_star(&spec);
        let expect = inst.expected_phi(&inst.e_true, &inst.g_true(), &spec);
        // p = 1: influence reduces to phi - theta
        assert!((expect - theta).abs() < 1e-12);
    }

    #[test]
    fn aipw_exact_on_noiseless_data() {
        let beta = vec![0.5, 2.0, 0.7, 1.1, -0.4];
        let data = noiseless_dataset(&beta, 40, 13);
        let g = linear_outcome(beta.clone(), &[1]);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.4).unwrap());
        let spec = de_spec(PolicyAllocation::scalar(0.65));
        let p = TypeProportions::estimated(&data);
        let result =
            aipw_estimate(&data, &e, &g, &spec, &p, &EstimatorOptions::default()).unwrap();
        assert_relative_eq!(result.tau, beta[1], epsilon = 1e-12);
        // every cluster contributes the same phi, so the variance collapses
        assert!(result.variance.unwrap() < 1e-20);
    }

    #[test]
    fn single_cluster_type_suppresses_variance() {
        let beta = vec![0.5, 2.0, 0.7, 1.1, -0.4];
        let mut clusters: Vec<ClusterObservation> =
            noiseless_dataset(&beta, 4, 21).clusters().to_vec();
        // one three-unit cluster forms its own type
        clusters.push(ClusterObservation {
            cluster_id: "big".into(),
            type_label: 2,
            y: vec![1.0, 0.5, -0.25],
            a: tv(&[1, 0, 1]),
            x: vec![vec![0.1], vec![0.2], vec![-0.3]],
        });
        let data = Dataset::new(clusters, vec![CovariateKind::Continuous], 15).unwrap();
        let g = linear_outcome(beta, &[1, 2]);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.4).unwrap());
        let spec = de_spec(PolicyAllocation::scalar(0.5));
        let p = TypeProportions::estimated(&data);
        let result =
            aipw_estimate(&data, &e, &g, &spec, &p, &EstimatorOptions::default()).unwrap();
        assert!(result.variance.is_none());
        assert!(result.se.is_none());
        assert!(!result.diagnostics.warnings.is_empty());
        assert!(confidence_interval(&result, 0.05).is_err());
    }

    fn mixed_type_dataset(n1: usize, n2: usize, seed: u64) -> Dataset {
        let mut rng = CounterRng::new(seed);
        let mut clusters = Vec::new();
        for i in 0..(n1 + n2) {
            let (m, k) = if i < n1 { (2, 1) } else { (3, 2) };
            let x: Vec<Vec<f64>> = (0..m).map(|_| vec![rng.normal()]).collect();
            let bits: Vec<u8> = (0..m).map(|_| u8::from(rng.bernoulli(0.5))).collect();
            let y: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            clusters.push(ClusterObservation {
                cluster_id: format!("c{i}"),
                type_label: k,
                y,
                a: tv(&bits),
                x,
            });
        }
        Dataset::new(clusters, vec![CovariateKind::Continuous], 15).unwrap()
    }

    #[test]
    fn split_sizes_and_determinism() {
        let data = mixed_type_dataset(10, 6, 3);
        let folds = cross_fit_split(&data, 7).unwrap();
        let count = |fold: u8, k: usize| {
            folds
                .fold_indices(fold)
                .iter()
                .filter(|&&i| data.clusters()[i].type_label == k)
                .count()
        };
        assert_eq!((count(1, 1), count(2, 1)), (5, 5));
        assert_eq!((count(1, 2), count(2, 2)), (3, 3));

        let again = cross_fit_split(&data, 7).unwrap();
        assert_eq!(folds.fold, again.fold);
        let other = cross_fit_split(&data, 8).unwrap();
        assert_ne!(folds.fold, other.fold);

        let data7 = mixed_type_dataset(7, 4, 5);
        let folds7 = cross_fit_split(&data7, 1).unwrap();
        let c1 = folds7
            .fold_indices(1)
            .iter()
            .filter(|&&i| data7.clusters()[i].type_label == 1)
            .count();
        assert_eq!(c1, 4);

        // union covers everything, intersection empty
        let mut all: Vec<usize> = folds.fold_indices(1).to_vec();
        all.extend_from_slice(folds.fold_indices(2));
        all.sort_unstable();
        assert_eq!(all, (0..data.n()).collect::<Vec<_>>());
    }

    #[test]
    fn crossfit_with_prefit_nuisances_equals_aipw() {
        let beta = vec![0.5, 2.0, 0.7, 1.1, -0.4];
        let mut data_clusters = noiseless_dataset(&beta, 30, 99).clusters().to_vec();
        // perturb outcomes so the estimator is not degenerate
        let mut rng = CounterRng::new(1234);
        for c in &mut data_clusters {
            for y in &mut c.y {
                *y += rng.normal();
            }
        }
        let data = Dataset::new(data_clusters, vec![CovariateKind::Continuous], 15).unwrap();
        let e = PropensityModel::Known(KnownRandomization::uniform(0.4).unwrap());
        let g = linear_outcome(beta, &[1]);
        let spec = de_spec(PolicyAllocation::scalar(0.3));
        let p = TypeProportions::estimated(&data);
        let opts = EstimatorOptions::default();
        let plan = NuisancePlan {
            propensity: PropensityFitter::Prefit(e.clone()),
            outcome: OutcomeFitter::Prefit(g.clone()),
        };
        let direct = aipw_estimate(&data, &e, &g, &spec, &p, &opts).unwrap();
        let crossed = crossfit_estimate(&data, &plan, &spec, &p, &opts, 5).unwrap();
        assert_relative_eq!(direct.tau, crossed.tau, epsilon = 1e-12);
        assert_relative_eq!(
            direct.variance.unwrap(),
            crossed.variance.unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn general_variance_matches_simplified_form() {
        // random data, prefit nuisances: the influence-sum variance and the
        // psi-contrast mean squared deviation are two routes to one number
        for seed in [1u64, 2, 3] {
            let data = mixed_type_dataset(12, 9, seed);
            let e = PropensityModel::Known(KnownRandomization::uniform(0.5).unwrap());
            let g = linear_outcome(vec![0.2, 0.9, 0.1, 0.4, -0.2], &[1, 2]);
            let p = TypeProportions::estimated(&data);
            let opts = EstimatorOptions::default();
            let plan = NuisancePlan {
                propensity: PropensityFitter::Prefit(e.clone()),
                outcome: OutcomeFitter::Prefit(g.clone()),
            };
            for spec in [
                de_spec(PolicyAllocation::scalar(0.45)),
                ie_spec(PolicyAllocation::scalar_pair(0.7, 0.3)).unwrap(),
            ] {
                let detail =
                    crossfit_estimate_detailed(&data, &plan, &spec, &p, &opts, seed).unwrap();
                let simplified = simplified_contrast_variance(
                    &data,
                    &detail.folds,
                    &detail.fold_models,
                    &spec,
                    detail.result.tau,
                    opts.propensity_floor,
                )
                .unwrap();
                let general = detail.result.variance.unwrap();
                assert!(
                    (general - simplified).abs() < 1e-10,
                    "seed {seed} {}: {general} vs {simplified}",
                    spec.name
                );
            }
        }
    }

    #[test]
    fn ie_with_identical_policies_is_exactly_zero() {
        let data = mixed_type_dataset(8, 6, 42);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.5).unwrap());
        let g = linear_outcome(vec![0.2, 0.9, 0.1, 0.4, -0.2], &[1, 2]);
        let p = TypeProportions::estimated(&data);
        let spec = ie_spec(PolicyAllocation::scalar_pair(0.6, 0.6)).unwrap();
        let plan = NuisancePlan {
            propensity: PropensityFitter::Prefit(e),
            outcome: OutcomeFitter::Prefit(g),
        };
        let result =
            crossfit_estimate(&data, &plan, &spec, &p, &EstimatorOptions::default(), 11).unwrap();
        assert_eq!(result.tau, 0.0);
        assert_eq!(result.variance.unwrap(), 0.0);
    }

    #[test]
    fn wald_interval_worked_examples() {
        let mut result = EstimateResult {
            tau: 0.0,
            theta_by_type: BTreeMap::new(),
            p_by_type: BTreeMap::new(),
            variance: Some(1.0),
            se: Some(0.1),
            ci: None,
            level: 0.05,
            n: 100,
            diagnostics: Diagnostics::default(),
        };
        let (lo, hi) = confidence_interval(&result, 0.05).unwrap();
        assert!((lo + 0.196).abs() < 5e-4, "lo = {lo}");
        assert!((hi - 0.196).abs() < 5e-4, "hi = {hi}");
        let (lo, hi) = confidence_interval(&result, 1.0).unwrap();
        assert_eq!((lo, hi), (0.0, 0.0));
        result.variance = None;
        assert!(confidence_interval(&result, 0.05).is_err());
    }

    #[test]
    fn alpha_invariance_without_interference() {
        // outcome model with zero peer coefficient and zero residuals: the
        // direct effect is the same for every alpha, the indirect effect 0
        let beta = vec![0.5, 2.0, 0.0, 1.1, -0.4];
        let data = noiseless_dataset(&beta, 25, 31);
        let g = linear_outcome(beta.clone(), &[1]);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.4).unwrap());
        let p = TypeProportions::estimated(&data);
        let opts = EstimatorOptions::default();
        let mut taus = Vec::new();
        for alpha in [0.1, 0.35, 0.6, 0.9] {
            let spec = de_spec(PolicyAllocation::scalar(alpha));
            taus.push(aipw_estimate(&data, &e, &g, &spec, &p, &opts).unwrap().tau);
        }
        for t in &taus {
            assert_relative_eq!(*t, taus[0], epsilon = 1e-12);
        }
        let ie = ie_spec(PolicyAllocation::scalar_pair(0.8, 0.15)).unwrap();
        let result = aipw_estimate(&data, &e, &g, &ie, &p, &opts).unwrap();
        assert!(result.tau.abs() < 1e-12);
    }

    #[test]
    fn near_zero_propensities_are_clipped_and_counted() {
        let data = mixed_type_dataset(6, 0, 88);
        // a design probability this small pushes some group propensities
        // below the positivity floor
        let e = PropensityModel::Known(KnownRandomization::uniform(1e-7).unwrap());
        let g = OutcomeModel::Zero;
        let spec = de_spec(PolicyAllocation::scalar(0.5));
        let p = TypeProportions::estimated(&data);
        let result =
            aipw_estimate(&data, &e, &g, &spec, &p, &EstimatorOptions::default()).unwrap();
        assert!(result.diagnostics.propensity_clips > 0);
        assert!(result.tau.is_finite());
    }

    #[test]
    fn generic_table_estimate_matches_de_path() {
        use crate::data::{enumerate_assignments, policy_weight};
        use crate::estimand::{generic_spec, GenericWeightTable};
        use std::sync::Arc;

        let data = mixed_type_dataset(9, 0, 55); // single type (n2 = 0 keeps K = 1)
        let e = PropensityModel::Known(KnownRandomization::uniform(0.5).unwrap());
        let g = linear_outcome(vec![0.2, 0.9, 0.1, 0.4, -0.2], &[1]);
        let p = TypeProportions::estimated(&data);
        let opts = EstimatorOptions::default();
        let alpha = 0.35;
        let de = de_spec(PolicyAllocation::scalar(alpha));

        let mut table: GenericWeightTable = Default::default();
        for a in enumerate_assignments(2).unwrap() {
            let w: Vec<f64> = (0..2)
                .map(|j| {
                    let sign = if a.bit(j) == 1 { 1.0 } else { -1.0 };
                    sign * policy_weight(&a.without(j), alpha).unwrap() / 2.0
                })
                .collect();
            table.insert((1, a.bits().to_vec()), Arc::new(move |_: &[Vec<f64>]| w.clone()));
        }
        let gen = generic_spec("DE-table", table, Arc::new(|p| p), Arc::new(|_| 1.0));

        let r_de = aipw_estimate(&data, &e, &g, &de, &p, &opts).unwrap();
        let r_gen = aipw_estimate(&data, &e, &g, &gen, &p, &opts).unwrap();
        assert!((r_de.tau - r_gen.tau).abs() < 1e-12);
        assert!((r_de.variance.unwrap() - r_gen.variance.unwrap()).abs() < 1e-12);
    }

    #[test]
    fn unit_average_weight_recovers_psi_mean() {
        use crate::data::{enumerate_assignments, policy_weight};
        use crate::estimand::{generic_spec, GenericWeightTable};
        use std::sync::Arc;

        let data = mixed_type_dataset(10, 0, 66);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.5).unwrap());
        let g = linear_outcome(vec![0.2, 0.9, 0.1, 0.4, -0.2], &[1]);
        let p = TypeProportions::estimated(&data);
        let opts = EstimatorOptions::default();
        let (a_value, alpha) = (1u8, 0.6);

        // weight 1(a_j = a) pi(a_(-j); alpha) / M defines the mean potential
        // outcome that psi_k estimates directly
        let mut table: GenericWeightTable = Default::default();
        for a in enumerate_assignments(2).unwrap() {
            let w: Vec<f64> = (0..2)
                .map(|j| {
                    if a.bit(j) == a_value {
                        policy_weight(&a.without(j), alpha).unwrap() / 2.0
                    } else {
                        0.0
                    }
                })
                .collect();
            table.insert((1, a.bits().to_vec()), Arc::new(move |_: &[Vec<f64>]| w.clone()));
        }
        let spec = generic_spec("unit-average", table, Arc::new(|p| p), Arc::new(|_| 1.0));
        let result = aipw_estimate(&data, &e, &g, &spec, &p, &opts).unwrap();

        let clips = AtomicUsize::new(0);
        let mean_psi: f64 = data
            .clusters()
            .iter()
            .map(|c| psi_k(c, &e, &g, a_value, alpha, 1e-6, &clips).unwrap())
            .sum::<f64>()
            / data.n() as f64;
        assert!((result.tau - mean_psi).abs() < 1e-12);
    }

    #[test]
    fn known_p_variance_never_exceeds_estimated_p() {
        let data = mixed_type_dataset(12, 9, 77);
        let e = PropensityModel::Known(KnownRandomization::uniform(0.5).unwrap());
        let g = linear_outcome(vec![0.2, 0.9, 0.1, 0.4, -0.2], &[1, 2]);
        let spec = de_spec(PolicyAllocation::scalar(0.45));
        let opts = EstimatorOptions::default();
        let p_est = TypeProportions::estimated(&data);
        let mut p_known = p_est.clone();
        p_known.known = true;
        let v_est = aipw_estimate(&data, &e, &g, &spec, &p_est, &opts)
            .unwrap()
            .variance
            .unwrap();
        let v_known = aipw_estimate(&data, &e, &g, &spec, &p_known, &opts)
            .unwrap()
            .variance
            .unwrap();
        assert!(v_known <= v_est + 1e-12, "{v_known} > {v_est}");
    }
}
