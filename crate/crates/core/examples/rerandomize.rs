//! Draws one assignment under each balance criterion and reports how many
//! candidates were needed and how balanced the result is.

use stratrr::balance::{build_design_matrices, mahalanobis_dm, BalanceCriterion, Rerandomizer};
use stratrr::rng::stream_rng;
use stratrr::sim::{generate_population, DgpConfig, PropensityMode};

fn main() -> stratrr::Result<()> {
    let pop = generate_population(&DgpConfig::case3(200).with_propensity(PropensityMode::Unequal))?;
    let dm = build_design_matrices(&pop)?;
    let p = pop.dim();
    let k = pop.num_strata();

    let criteria = [
        ("SR", BalanceCriterion::sr()),
        ("SRRoM", BalanceCriterion::srrom(p, 0.001)?),
        ("SRRsM(f)", BalanceCriterion::srrsm_fair(p, 0.001, k)?),
        ("SRRdM", BalanceCriterion::srrdm(p, 0.001)?),
    ];
    println!("{:<10} {:>9} {:>12} {:>14}", "criterion", "attempts", "threshold", "pooled M_dm");
    for (name, criterion) in &criteria {
        let rr = Rerandomizer::new(&pop, &dm, criterion)?;
        let out = rr.draw(&mut stream_rng(42, 0))?;
        let thr = criterion.thresholds.first().map_or("-".into(), |a| format!("{a:.3}"));
        let m = mahalanobis_dm(&pop, &dm, &out.assignment);
        println!("{name:<10} {:>9} {thr:>12} {m:>14.4}", out.attempts);
    }
    Ok(())
}
