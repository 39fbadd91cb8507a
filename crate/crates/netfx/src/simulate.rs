//! Data-generating processes, closed-form truths, and the Monte-Carlo study
//! harness.
//!
//! Two scenarios are built in:
//! - [`GlmmScenario`]: two cluster types of sizes 3 and 4, treatments from a
//!   logistic mixed model, outcomes from a linear mixed model with
//!   treatment-by-covariate interactions. Closed-form targets:
//!   `tau_de = 2.75` and `tau_ie(0.8, 0.2) = 0.9`. Misspecification switches
//!   select which feature sets the nuisance fitters see and how cluster
//!   types are assigned.
//! - [`NoInterferenceScenario`]: one type of size 2, completely randomized
//!   treatment, outcomes without interference. Used for the adaptivity study
//!   of the direct-effect variance over the allocation grid.
//!
//! Replications draw from independent counter-RNG streams, so studies are
//! bit-reproducible for a given seed regardless of thread count.

use crate::data::{ClusterObservation, CovariateKind, Dataset, TreatmentVector};
use crate::error::{Error, Result};
use crate::estimand::{de_spec, ie_spec, EstimandSpec, PolicyAllocation};
use crate::estimator::{
    aipw_estimate, fit_and_estimate, EstimateResult, EstimatorOptions, NuisancePlan,
    OutcomeFitter, PropensityFitter,
};
use crate::numeric::KahanSum;
use crate::outcome::{
    fit_linear_mixed, DesignSpec, Interaction, LinearFitOptions, OutcomeModel, TreatmentTerm,
};
use crate::propensity::{FeatureSpec, KnownRandomization, LogisticFitOptions, PropensityModel};
use crate::rng::CounterRng;
use rayon::prelude::*;
use serde::Serialize;

#[inline]
fn expit(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// GLMM scenario
// ---------------------------------------------------------------------------

/// Two-type generalized-linear-mixed-model scenario.
///
/// Covariates per unit are `x = (C, W1, W2)` with cluster-level
/// `C ~ N(0, 1)`, `W1 ~ Bernoulli(0.5)`, `W2 ~ N(0, 1)`. Treatments follow
/// `logit pr(A = 1 | b) = [1, W, sum W_peers] beta_e,k + b`,
/// `b ~ N(0, lambda_var)`. Outcomes follow
/// `Y = [1, A, sumA, A C, sumA C, x, sum W_peers] beta_g,k + xi + eps`.
///
/// `p1` is pr(type 1). The generator's canonical targets `tau_de = 2.75` and
/// `tau_ie(0.8, 0.2) = 0.9` pin it to 0.75: the type-mixing identities
/// `p1 * 3 + (1-p1) * 2 = 2.75` and `p1 * 0.96 + (1-p1) * 0.72 = 0.9` have
/// that single common solution.
#[derive(Debug, Clone)]
pub struct GlmmScenario {
    pub p1: f64,
    pub sizes: [usize; 2],
    pub beta_e: [Vec<f64>; 2],
    /// Variance of the treatment random intercept `b`.
    pub lambda_var: f64,
    pub beta_g: [Vec<f64>; 2],
    /// Variance of the outcome random effect `xi`.
    pub xi_var: f64,
    /// Variance of the unit error `eps`.
    pub eps_var: f64,
}

impl Default for GlmmScenario {
    fn default() -> Self {
        Self {
            p1: 0.75,
            sizes: [3, 4],
            beta_e: [
                vec![-1.25, 2.0, 0.3, 0.2, 0.1],
                vec![-1.0, 1.25, 0.2, 0.15, 0.1],
            ],
            lambda_var: 0.25,
            beta_g: [
                vec![2.0, 3.0, 0.8, 1.0, 0.5, 0.8, -1.0, 0.5, -0.3, 0.15],
                vec![1.0, 2.0, 0.4, 0.5, 0.3, 0.6, -0.8, 0.4, -0.2, 0.1],
            ],
            xi_var: 0.1,
            eps_var: 1.0,
        }
    }
}

impl GlmmScenario {
    /// Closed-form direct effect: the own-treatment coefficients mixed over
    /// types (interaction terms vanish because `E[C] = 0`); independent of
    /// the allocation.
    pub fn true_de(&self) -> f64 {
        self.p1 * self.beta_g[0][1] + (1.0 - self.p1) * self.beta_g[1][1]
    }

    /// Closed-form indirect effect:
    /// `sum_k p_k (M_k - 1)(alpha - alpha') beta_peer,k`.
    pub fn true_ie(&self, alpha: f64, alpha_prime: f64) -> f64 {
        let d = alpha - alpha_prime;
        self.p1 * (self.sizes[0] - 1) as f64 * d * self.beta_g[0][2]
            + (1.0 - self.p1) * (self.sizes[1] - 1) as f64 * d * self.beta_g[1][2]
    }

    /// Conditional mean outcome of unit `j` given the full treatment vector.
    fn mean_outcome(&self, k_idx: usize, a: &[u8], x: &[Vec<f64>], j: usize) -> f64 {
        let beta = &self.beta_g[k_idx];
        let c = x[j][0];
        let peers_treated: f64 = (0..a.len())
            .filter(|&l| l != j)
            .map(|l| f64::from(a[l]))
            .sum();
        let own = f64::from(a[j]);
        let mut sw1 = 0.0;
        let mut sw2 = 0.0;
        for (l, row) in x.iter().enumerate() {
            if l != j {
                sw1 += row[1];
                sw2 += row[2];
            }
        }
        beta[0]
            + beta[1] * own
            + beta[2] * peers_treated
            + beta[3] * own * c
            + beta[4] * peers_treated * c
            + beta[5] * c
            + beta[6] * x[j][1]
            + beta[7] * x[j][2]
            + beta[8] * sw1
            + beta[9] * sw2
    }
}

/// Draw `n` clusters from the GLMM scenario. Deterministic given the seed.
pub fn simulate_glmm(scenario: &GlmmScenario, n: usize, seed: u64) -> Result<Dataset> {
    let mut rng = CounterRng::new(seed);
    let mut clusters = Vec::with_capacity(n);
    for i in 0..n {
        let k_idx = usize::from(!rng.bernoulli(scenario.p1)); // 0 -> type 1, 1 -> type 2
        let m = scenario.sizes[k_idx];
        let c = rng.normal();
        let x: Vec<Vec<f64>> = (0..m)
            .map(|_| vec![c, f64::from(rng.bernoulli(0.5)), rng.normal()])
            .collect();
        let b = rng.normal() * scenario.lambda_var.sqrt();
        let beta_e = &scenario.beta_e[k_idx];
        let mut bits = vec![0u8; m];
        for j in 0..m {
            let mut sw1 = 0.0;
            let mut sw2 = 0.0;
            for (l, row) in x.iter().enumerate() {
                if l != j {
                    sw1 += row[1];
                    sw2 += row[2];
                }
            }
            let logit = beta_e[0]
                + beta_e[1] * x[j][1]
                + beta_e[2] * x[j][2]
                + beta_e[3] * sw1
                + beta_e[4] * sw2
                + b;
            bits[j] = u8::from(rng.bernoulli(expit(logit)));
        }
        let xi = rng.normal() * scenario.xi_var.sqrt();
        let y: Vec<f64> = (0..m)
            .map(|j| {
                scenario.mean_outcome(k_idx, &bits, &x, j)
                    + xi
                    + rng.normal() * scenario.eps_var.sqrt()
            })
            .collect();
        clusters.push(ClusterObservation {
            cluster_id: format!("c{i}"),
            type_label: k_idx + 1,
            y,
            a: TreatmentVector::new(bits)?,
            x,
        });
    }
    Dataset::new(
        clusters,
        vec![
            CovariateKind::Continuous,
            CovariateKind::Discrete,
            CovariateKind::Continuous,
        ],
        15,
    )
}

/// Outcome-regression specification switch: correctly specified (the
/// generator's design) or misspecified (drops the treatment-covariate
/// interactions, the cluster covariate `C`, and `W2`, keeping `Z = W1`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutcomeSwitch {
    Correct,
    Misspecified,
}

/// Propensity specification switch: correct features `(W1, W2)` or the
/// misspecified reduced set `Z = W1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensitySwitch {
    Correct,
    Misspecified,
}

/// Cluster-typing switch: by size (correct), pooled into one shared
/// parameter set (misspecified), or over-split on `(size, 1(C < 1.5))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypingSwitch {
    Correct,
    Pooled,
    Over,
}

/// Nuisance-fit switches for a GLMM study, e.g. `(CO, CP, CT)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlmmSpecSwitches {
    pub outcome: OutcomeSwitch,
    pub propensity: PropensitySwitch,
    pub typing: TypingSwitch,
}

impl GlmmSpecSwitches {
    /// Parse labels like `CO,CP,CT` or `MO,MP,OT`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "expected three comma-separated switches like CO,CP,CT; got `{text}`"
            )));
        }
        let outcome = match parts[0].to_ascii_uppercase().as_str() {
            "CO" => OutcomeSwitch::Correct,
            "MO" => OutcomeSwitch::Misspecified,
            other => return Err(Error::Config(format!("unknown outcome switch `{other}`"))),
        };
        let propensity = match parts[1].to_ascii_uppercase().as_str() {
            "CP" => PropensitySwitch::Correct,
            "MP" => PropensitySwitch::Misspecified,
            other => {
                return Err(Error::Config(format!("unknown propensity switch `{other}`")))
            }
        };
        let typing = match parts[2].to_ascii_uppercase().as_str() {
            "CT" => TypingSwitch::Correct,
            "MT" => TypingSwitch::Pooled,
            "OT" => TypingSwitch::Over,
            other => return Err(Error::Config(format!("unknown typing switch `{other}`"))),
        };
        Ok(Self {
            outcome,
            propensity,
            typing,
        })
    }

    pub fn label(&self) -> String {
        format!(
            "{},{},{}",
            match self.outcome {
                OutcomeSwitch::Correct => "CO",
                OutcomeSwitch::Misspecified => "MO",
            },
            match self.propensity {
                PropensitySwitch::Correct => "CP",
                PropensitySwitch::Misspecified => "MP",
            },
            match self.typing {
                TypingSwitch::Correct => "CT",
                TypingSwitch::Pooled => "MT",
                TypingSwitch::Over => "OT",
            }
        )
    }
}

/// The design used by the correctly specified outcome fit: all covariates in
/// the own block, unit-level covariates in the peer block (the cluster
/// covariate's peer sum is collinear with its own entry), and the
/// generator's two interactions with `C`.
pub fn glmm_correct_design() -> DesignSpec {
    DesignSpec {
        own_cols: None,
        peer_cols: Some(vec![1, 2]),
        interactions: vec![
            Interaction {
                term: TreatmentTerm::Own,
                col: 0,
            },
            Interaction {
                term: TreatmentTerm::PeerSum,
                col: 0,
            },
        ],
    }
}

/// The generator's outcome coefficients permuted into [`glmm_correct_design`]
/// column order.
pub fn glmm_beta_in_design_order(beta_generator: &[f64]) -> Vec<f64> {
    vec![
        beta_generator[0],
        beta_generator[1],
        beta_generator[2],
        beta_generator[5],
        beta_generator[6],
        beta_generator[7],
        beta_generator[8],
        beta_generator[9],
        beta_generator[3],
        beta_generator[4],
    ]
}

/// Build the nuisance plan realizing a switch combination.
pub fn glmm_plan(switches: GlmmSpecSwitches) -> NuisancePlan {
    let pool = switches.typing == TypingSwitch::Pooled;
    let outcome_design = match switches.outcome {
        OutcomeSwitch::Correct => glmm_correct_design(),
        OutcomeSwitch::Misspecified => DesignSpec {
            own_cols: Some(vec![1]),
            peer_cols: Some(vec![1]),
            interactions: vec![],
        },
    };
    let propensity_features = match switches.propensity {
        PropensitySwitch::Correct => FeatureSpec::columns(vec![1, 2]),
        PropensitySwitch::Misspecified => FeatureSpec::columns(vec![1]),
    };
    NuisancePlan {
        propensity: PropensityFitter::LogisticMixed(LogisticFitOptions {
            features: propensity_features,
            pool_types: pool,
            ..LogisticFitOptions::default()
        }),
        outcome: OutcomeFitter::LinearMixed(LinearFitOptions {
            design: outcome_design,
            pool_types: pool,
            ..LinearFitOptions::default()
        }),
    }
}

/// Apply the typing switch to a simulated dataset. `Over` splits each size
/// class on the cluster covariate `1(C < 1.5)`.
pub fn apply_typing(data: &Dataset, switches: GlmmSpecSwitches) -> Result<Dataset> {
    match switches.typing {
        TypingSwitch::Correct | TypingSwitch::Pooled => Ok(data.clone()),
        TypingSwitch::Over => data.relabel(|c| {
            let small_c = usize::from(c.x[0][0] < 1.5);
            // (size class, C stratum) -> 1..=4
            (c.type_label - 1) * 2 + small_c + 1
        }),
    }
}

// ---------------------------------------------------------------------------
// no-interference scenario
// ---------------------------------------------------------------------------

/// One cluster type of size 2 with completely randomized treatment and no
/// interference in the outcome: `Y = 1 + 3 A_j + 2 X_j + 0.5 X_peer + eps`.
#[derive(Debug, Clone, Copy)]
pub struct NoInterferenceScenario {
    pub p_a: f64,
}

impl NoInterferenceScenario {
    /// The average treatment effect (the own-treatment coefficient).
    pub fn true_ate(&self) -> f64 {
        3.0
    }

    /// Mean outcome of unit `j` given treatments and covariates.
    pub fn mean_outcome(&self, a: &[u8], x: &[Vec<f64>], j: usize) -> f64 {
        let peer = 1 - j;
        1.0 + 3.0 * f64::from(a[j]) + 2.0 * x[j][0] + 0.5 * x[peer][0]
    }
}

/// Draw `n` two-unit clusters. Deterministic given the seed.
pub fn simulate_noint(p_a: f64, n: usize, seed: u64) -> Result<Dataset> {
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(Error::Domain(format!(
            "treatment probability must lie in (0, 1), got {p_a}"
        )));
    }
    let scenario = NoInterferenceScenario { p_a };
    let mut rng = CounterRng::new(seed);
    let mut clusters = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<Vec<f64>> = (0..2).map(|_| vec![rng.normal()]).collect();
        let bits: Vec<u8> = (0..2).map(|_| u8::from(rng.bernoulli(p_a))).collect();
        let y: Vec<f64> = (0..2)
            .map(|j| scenario.mean_outcome(&bits, &x, j) + rng.normal())
            .collect();
        clusters.push(ClusterObservation {
            cluster_id: format!("c{i}"),
            type_label: 1,
            y,
            a: TreatmentVector::new(bits)?,
            x,
        });
    }
    Dataset::new(clusters, vec![CovariateKind::Continuous], 15)
}

/// Asymptotic variance of the interference-aware direct-effect estimator in
/// the no-interference model:
/// `0.5 { (1-a)^2/(1-p)^2 + (a^2 + (1-a)^2)/(p(1-p)) + a^2/p^2 }`.
pub fn theoretical_de_variance(alpha: f64, p_a: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) || !(p_a > 0.0 && p_a < 1.0) {
        return Err(Error::Domain(format!(
            "alpha and p must lie in (0, 1), got ({alpha}, {p_a})"
        )));
    }
    let q = 1.0 - p_a;
    let one_minus = 1.0 - alpha;
    Ok(0.5
        * (one_minus * one_minus / (q * q)
            + (alpha * alpha + one_minus * one_minus) / (p_a * q)
            + alpha * alpha / (p_a * p_a)))
}

/// Semiparametric efficiency bound of the average treatment effect in the
/// no-interference scenario: `1 / (2 p (1 - p))`.
pub fn seb_ate(p_a: f64) -> Result<f64> {
    if !(p_a > 0.0 && p_a < 1.0) {
        return Err(Error::Domain(format!(
            "treatment probability must lie in (0, 1), got {p_a}"
        )));
    }
    Ok(1.0 / (2.0 * p_a * (1.0 - p_a)))
}

// ---------------------------------------------------------------------------
// Monte-Carlo harness
// ---------------------------------------------------------------------------

/// Aggregates of one estimand across replications.
#[derive(Debug, Clone, Serialize)]
pub struct McResult {
    pub estimand: String,
    pub truth: f64,
    pub reps: usize,
    pub failures: usize,
    pub bias: f64,
    /// Standard deviation of the point estimates across replications.
    pub emp_se: f64,
    /// Average of the reported standard errors.
    pub mean_se: f64,
    /// Fraction of confidence intervals covering the truth.
    pub coverage: f64,
}

/// One replication's output per estimand: estimate, standard error, interval.
pub type RepOutput = Vec<(f64, Option<f64>, Option<(f64, f64)>)>;

/// Generic replication driver. `rep_fn` receives an independent stream seed
/// per replication; failed replications are excluded and counted.
/// Aggregation uses compensated sums in fixed replication order, so results
/// do not depend on the number of worker threads.
pub fn run_mc<F>(
    truths: &[(String, f64)],
    reps: usize,
    seed: u64,
    rep_fn: F,
) -> Result<Vec<McResult>>
where
    F: Fn(u64) -> Result<RepOutput> + Sync,
{
    if reps == 0 {
        return Err(Error::Domain("at least one replication is required".into()));
    }
    let outputs: Vec<Result<RepOutput>> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut stream = CounterRng::stream(seed, r as u64);
            rep_fn(stream.next_u64())
        })
        .collect();

    let mut results = Vec::with_capacity(truths.len());
    for (e_idx, (name, truth)) in truths.iter().enumerate() {
        let mut est_sum = KahanSum::default();
        let mut est_sq = KahanSum::default();
        let mut se_sum = KahanSum::default();
        let mut covered = 0usize;
        let mut with_ci = 0usize;
        let mut used = 0usize;
        let mut failures = 0usize;
        for out in &outputs {
            match out {
                Ok(rows) => {
                    let (est, se, ci) = rows[e_idx];
                    used += 1;
                    est_sum.add(est);
                    est_sq.add(est * est);
                    if let Some(se) = se {
                        se_sum.add(se);
                    }
                    if let Some((lo, hi)) = ci {
                        with_ci += 1;
                        if lo <= *truth && *truth <= hi {
                            covered += 1;
                        }
                    }
                }
                Err(_) => failures += 1,
            }
        }
        if used == 0 {
            return Err(Error::Domain(format!(
                "every replication failed for estimand {name}"
            )));
        }
        let n = used as f64;
        let mean = est_sum.value() / n;
        let var = if used > 1 {
            (est_sq.value() - n * mean * mean) / (n - 1.0)
        } else {
            0.0
        };
        results.push(McResult {
            estimand: name.clone(),
            truth: *truth,
            reps: used,
            failures,
            bias: mean - truth,
            emp_se: var.max(0.0).sqrt(),
            mean_se: se_sum.value() / (used as f64).max(1.0),
            coverage: if with_ci > 0 {
                covered as f64 / with_ci as f64
            } else {
                f64::NAN
            },
        })
    }
    Ok(results)
}

/// An estimand request for the GLMM study.
#[derive(Debug, Clone, Copy)]
pub enum GlmmEstimand {
    DirectEffect { alpha: f64 },
    IndirectEffect { alpha: f64, alpha_prime: f64 },
}

impl GlmmEstimand {
    pub fn label(&self) -> String {
        match self {
            GlmmEstimand::DirectEffect { alpha } => format!("DE({alpha})"),
            GlmmEstimand::IndirectEffect { alpha, alpha_prime } => {
                format!("IE({alpha},{alpha_prime})")
            }
        }
    }

    pub fn truth(&self, scenario: &GlmmScenario) -> f64 {
        match self {
            GlmmEstimand::DirectEffect { .. } => scenario.true_de(),
            GlmmEstimand::IndirectEffect { alpha, alpha_prime } => {
                scenario.true_ie(*alpha, *alpha_prime)
            }
        }
    }

    pub fn spec(&self) -> Result<EstimandSpec> {
        match self {
            GlmmEstimand::DirectEffect { alpha } => Ok(de_spec(PolicyAllocation::scalar(*alpha))),
            GlmmEstimand::IndirectEffect { alpha, alpha_prime } => {
                ie_spec(PolicyAllocation::scalar_pair(*alpha, *alpha_prime))
            }
        }
    }
}

/// Bias/SE/coverage study of the plug-in estimator on the GLMM scenario.
/// Nuisances are refitted once per replication and shared by all estimands.
pub fn glmm_mc_study(
    scenario: &GlmmScenario,
    switches: GlmmSpecSwitches,
    estimands: &[GlmmEstimand],
    reps: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<McResult>> {
    let truths: Vec<(String, f64)> = estimands
        .iter()
        .map(|e| (e.label(), e.truth(scenario)))
        .collect();
    let specs: Vec<EstimandSpec> = estimands
        .iter()
        .map(GlmmEstimand::spec)
        .collect::<Result<_>>()?;
    let plan = glmm_plan(switches);
    let opts = EstimatorOptions::default();

    run_mc(&truths, reps, seed, |rep_seed| {
        let raw = simulate_glmm(scenario, n, rep_seed)?;
        let data = apply_typing(&raw, switches)?;
        let p = crate::data::TypeProportions::estimated(&data);
        let e_model = plan.fit_propensity(&data)?;
        let g_model = plan.fit_outcome(&data)?;
        specs
            .iter()
            .map(|spec| {
                let r: EstimateResult = aipw_estimate(&data, &e_model, &g_model, spec, &p, &opts)?;
                Ok((r.tau, r.se, r.ci))
            })
            .collect()
    })
}

/// One grid point of the no-interference adaptivity study.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaVarianceRow {
    pub alpha: f64,
    pub mean_tau: f64,
    pub bias: f64,
    /// Empirical variance of the direct-effect estimate across replications.
    pub emp_var: f64,
    /// `theoretical_de_variance(alpha, p) / n`.
    pub theory_var: f64,
    pub reps: usize,
}

/// Variance of the interference-aware direct-effect estimator over an
/// allocation grid when the truth has no interference. The outcome model is
/// the correctly specified interference-allowing linear mixed design; the
/// propensity is the known randomization.
pub fn noint_variance_study(
    p_a: f64,
    alpha_grid: &[f64],
    reps: usize,
    n: usize,
    seed: u64,
) -> Result<Vec<AlphaVarianceRow>> {
    if alpha_grid.is_empty() {
        return Err(Error::Domain("empty allocation grid".into()));
    }
    let scenario = NoInterferenceScenario { p_a };
    let truths: Vec<(String, f64)> = alpha_grid
        .iter()
        .map(|a| (format!("DE({a})"), scenario.true_ate()))
        .collect();
    let opts = EstimatorOptions::default();

    let results = run_mc(&truths, reps, seed, |rep_seed| {
        let data = simulate_noint(p_a, n, rep_seed)?;
        let p = crate::data::TypeProportions::estimated(&data);
        let e_model = PropensityModel::Known(KnownRandomization::uniform(p_a)?);
        let g_model = OutcomeModel::LinearMixed(fit_linear_mixed(
            &data,
            &LinearFitOptions::default(),
        )?);
        alpha_grid
            .iter()
            .map(|&alpha| {
                let spec = de_spec(PolicyAllocation::scalar(alpha));
                let r = aipw_estimate(&data, &e_model, &g_model, &spec, &p, &opts)?;
                Ok((r.tau, r.se, r.ci))
            })
            .collect()
    })?;

    Ok(alpha_grid
        .iter()
        .zip(&results)
        .map(|(&alpha, r)| AlphaVarianceRow {
            alpha,
            mean_tau: r.truth + r.bias,
            bias: r.bias,
            emp_var: r.emp_se * r.emp_se,
            theory_var: theoretical_de_variance(alpha, p_a).unwrap_or(f64::NAN) / n as f64,
            reps: r.reps,
        })
        .collect())
}

/// Convenience wrapper used by the command line: fit-and-estimate per the
/// switches on one simulated dataset.
pub fn glmm_single_estimate(
    scenario: &GlmmScenario,
    switches: GlmmSpecSwitches,
    estimand: GlmmEstimand,
    n: usize,
    seed: u64,
) -> Result<EstimateResult> {
    let raw = simulate_glmm(scenario, n, seed)?;
    let data = apply_typing(&raw, switches)?;
    let p = crate::data::TypeProportions::estimated(&data);
    fit_and_estimate(
        &data,
        &glmm_plan(switches),
        &estimand.spec()?,
        &p,
        &EstimatorOptions::default(),
    )
}
