//! Enumerates every assignment of a tiny stratified population and checks
//! that the stratified difference in means is exactly unbiased.

use stratrr::design::{assignment_count, enumerate_assignments, PopulationInput, PotentialOutcomes};
use stratrr::inference::stratified_diff_in_means;

fn main() -> stratrr::Result<()> {
    // two strata of 4 and 6 units, one covariate
    let x = vec![0.3, -1.2, 0.8, 2.0, -0.5, 1.1, 0.0, -2.2, 0.9, 1.7];
    let control: Vec<f64> = x.iter().map(|v| 1.0 + 2.0 * v).collect();
    let treated: Vec<f64> = x.iter().enumerate().map(|(i, v)| 3.0 + 1.5 * v + 0.1 * i as f64).collect();
    let pop = PopulationInput::from_sizes(&[4, 6], vec![0.5, 0.5], 1, x)
        .with_potential(PotentialOutcomes { treated, control })
        .build()?;

    let tau = pop.tau()?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for z in enumerate_assignments(&pop, 1_000)? {
        let y = pop.observed_outcomes(&z)?;
        let t = stratified_diff_in_means(&pop, &z, &y)?;
        sum += t;
        sum_sq += t * t;
        count += 1;
    }
    let mean = sum / count as f64;
    println!("assignments      {count} (expected {})", assignment_count(&pop));
    println!("tau              {tau:.6}");
    println!("mean of tau_hat  {mean:.6}");
    println!("var of tau_hat   {:.6}", sum_sq / count as f64 - mean * mean);
    Ok(())
}
