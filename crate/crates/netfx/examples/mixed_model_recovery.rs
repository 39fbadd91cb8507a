//! Fit the two mixed-effects nuisance models on one large simulated draw and
//! compare the estimates against the generator's parameters.
//!
//! ```bash
//! cargo run --release --example mixed_model_recovery
//! ```

use netfx::outcome::fit_linear_mixed;
use netfx::propensity::fit_logistic_mixed;
use netfx::simulate::{
    glmm_beta_in_design_order, glmm_correct_design, simulate_glmm, GlmmScenario,
};

fn main() -> netfx::Result<()> {
    let scenario = GlmmScenario::default();
    let data = simulate_glmm(&scenario, 4000, 77)?;

    let prop = fit_logistic_mixed(
        &data,
        &netfx::propensity::LogisticFitOptions {
            features: netfx::propensity::FeatureSpec::columns(vec![1, 2]),
            ..Default::default()
        },
    )?;
    println!("logistic mixed propensity (per type):");
    for k in 1..=2usize {
        let truth = &scenario.beta_e[k - 1];
        let est = &prop.beta[&k];
        let se = &prop.fit_info[&k].param_se;
        println!("  type {k} (lambda = {:.3}, generator 4.0):", prop.lambda[&k]);
        for (i, (b, t)) in est.iter().zip(truth).enumerate() {
            println!("    beta[{i}] = {b:+.3} +- {:.3}   (generator {t:+.3})", se[i]);
        }
    }

    let out = fit_linear_mixed(
        &data,
        &netfx::outcome::LinearFitOptions {
            design: glmm_correct_design(),
            ..Default::default()
        },
    )?;
    println!("linear mixed outcome (per type):");
    for k in 1..=2usize {
        let truth = glmm_beta_in_design_order(&scenario.beta_g[k - 1]);
        let est = &out.beta[&k];
        let se = &out.fit_info[&k].param_se;
        println!(
            "  type {k} (eta = {:.3}, rho = {:.3}; generator 1.0, 0.1):",
            out.eta[&k], out.rho[&k]
        );
        for (i, (b, t)) in est.iter().zip(&truth).enumerate() {
            println!("    beta[{i}] = {b:+.3} +- {:.3}   (generator {t:+.3})", se[i]);
        }
    }
    Ok(())
}
