//! A small replication study: bias, empirical and estimated standard errors,
//! and interval coverage for the direct and spillover effects under correct
//! and doubly misspecified nuisance models.
//!
//! ```bash
//! cargo run --release --example bias_coverage_study
//! ```

use netfx::simulate::{glmm_mc_study, GlmmEstimand, GlmmScenario, GlmmSpecSwitches};

fn main() -> netfx::Result<()> {
    let scenario = GlmmScenario::default();
    let estimands = [
        GlmmEstimand::DirectEffect { alpha: 0.4 },
        GlmmEstimand::IndirectEffect {
            alpha: 0.8,
            alpha_prime: 0.2,
        },
    ];
    println!("spec      estimand     truth   bias      emp_se  mean_se coverage fails");
    for label in ["CO,CP,CT", "MO,MP,CT"] {
        let switches = GlmmSpecSwitches::parse(label)?;
        let results = glmm_mc_study(&scenario, switches, &estimands, 60, 400, 90210)?;
        for r in &results {
            println!(
                "{label}  {:<11} {:.2}   {:+.4}   {:.4}  {:.4}  {:.3}    {}",
                r.estimand, r.truth, r.bias, r.emp_se, r.mean_se, r.coverage, r.failures
            );
        }
    }
    println!("(correct specification keeps bias near zero; double misspecification does not)");
    Ok(())
}
