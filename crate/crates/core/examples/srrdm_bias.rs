//! With unequal propensities, rerandomizing on the pooled difference in
//! means biases the stratified estimator. This compares the asymptotic
//! bias with a direct Monte Carlo over SRRdM assignments.

use stratrr::balance::{build_design_matrices, threshold_for, BalanceCriterion, Rerandomizer};
use stratrr::inference::{srrdm_bias, stratified_diff_in_means};
use stratrr::rng::stream_rng;
use stratrr::sim::{generate_population, DgpConfig, PropensityMode};

fn main() -> stratrr::Result<()> {
    let mut dgp = DgpConfig::case3(200).with_propensity(PropensityMode::Unequal);
    dgp.p = 2;
    let pop = generate_population(&dgp)?;
    let dm = build_design_matrices(&pop)?;
    let a = threshold_for(pop.dim(), 0.05)?;

    let theory = srrdm_bias(&pop, &dm, a, 100_000, &mut stream_rng(1, 0))?;
    println!("asymptotic bias of sqrt(n)(tau_hat - tau): {:.4} (mc se {:.4})", theory.bias, theory.mc_se);

    let rr = Rerandomizer::new(&pop, &dm, &BalanceCriterion::srrdm(pop.dim(), 0.05)?)?;
    let tau = pop.tau()?;
    let reps = 2000;
    let mut sum = 0.0;
    for r in 0..reps {
        let z = rr.draw(&mut stream_rng(2, r))?.assignment;
        let y = pop.observed_outcomes(&z)?;
        sum += stratified_diff_in_means(&pop, &z, &y)? - tau;
    }
    let n = pop.len() as f64;
    println!("simulated bias over {reps} draws:          {:.4}", n.sqrt() * sum / reps as f64);
    Ok(())
}
