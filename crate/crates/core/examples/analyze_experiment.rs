//! Full workflow on simulated data: rerandomize, observe one outcome per
//! unit, then build the matching confidence interval.

use stratrr::balance::{build_design_matrices, BalanceCriterion, Rerandomizer};
use stratrr::inference::{analyze, ci_sr, LawConfig};
use stratrr::rng::stream_rng;
use stratrr::sim::{generate_population, DgpConfig};

fn main() -> stratrr::Result<()> {
    let pop = generate_population(&DgpConfig::case4(200))?;
    let dm = build_design_matrices(&pop)?;
    let p = pop.dim();
    println!("true tau {:.4}", pop.tau()?);

    for criterion in [BalanceCriterion::srrom(p, 0.001)?, BalanceCriterion::srrsm_fair(p, 0.001, pop.num_strata())?] {
        let out = Rerandomizer::new(&pop, &dm, &criterion)?.draw(&mut stream_rng(7, 0))?;
        let y = pop.observed_outcomes(&out.assignment)?;
        let rep = analyze(&pop, &dm, &out.assignment, &y, &criterion, 0.05, LawConfig::default())?;
        let naive = ci_sr(&pop, &dm, &out.assignment, &y, 0.05)?;
        println!(
            "{:<6} tau_hat {:.4}  CI [{:.4}, {:.4}] length {:.4}  (SR interval length {:.4})",
            criterion.method.name(),
            rep.tau_hat,
            rep.ci.lower,
            rep.ci.upper,
            rep.ci.length(),
            naive.ci.length()
        );
        println!("       R2 estimates {:?}", rep.r2_estimate.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>());
    }
    Ok(())
}
