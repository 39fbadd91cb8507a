//! Sweep the counterfactual allocation probability and report the direct
//! effect across the grid, fitting the nuisance models once.
//!
//! ```bash
//! cargo run --release --example policy_sweep
//! ```

use netfx::data::TypeProportions;
use netfx::estimand::{de_spec, PolicyAllocation};
use netfx::estimator::{aipw_estimate, EstimatorOptions};
use netfx::simulate::{glmm_plan, simulate_glmm, GlmmScenario, GlmmSpecSwitches};

fn main() -> netfx::Result<()> {
    let data = simulate_glmm(&GlmmScenario::default(), 1200, 19)?;
    let plan = glmm_plan(GlmmSpecSwitches::parse("CO,CP,CT")?);
    let e = plan.fit_propensity(&data)?;
    let g = plan.fit_outcome(&data)?;
    let p = TypeProportions::estimated(&data);
    let opts = EstimatorOptions::default();

    println!("alpha    tau      se      95% CI");
    for i in 1..=9 {
        let alpha = i as f64 / 10.0;
        let spec = de_spec(PolicyAllocation::scalar(alpha));
        let r = aipw_estimate(&data, &e, &g, &spec, &p, &opts)?;
        let (lo, hi) = r.ci.unwrap();
        println!(
            "{alpha:.2}   {:+.4}  {:.4}  ({lo:+.4}, {hi:+.4})",
            r.tau,
            r.se.unwrap()
        );
    }
    println!("(the generator's direct effect is allocation-invariant at 2.75)");
    Ok(())
}
