//! Quantiles of the limiting law `(1 − R²)^{1/2} ε + R L_{p,a}` for a few
//! values of `R²`, next to the normal quantile it replaces.

use stratrr::balance::threshold_for;
use stratrr::inference::{v_pa, LawConfig, TruncatedGaussianLaw};
use stratrr::numeric::normal_quantile;

fn main() -> stratrr::Result<()> {
    let p = 8;
    let a = threshold_for(p, 0.001)?;
    println!("p = {p}, a = {a:.4}, v_pa = {:.5}", v_pa(p, a)?);
    println!("normal 97.5% quantile {:.4}", normal_quantile(0.975)?);
    println!("{:>5} {:>10} {:>10} {:>10} {:>9}", "R2", "variance", "q2.5", "q97.5", "mc_se");
    for r2 in [0.0, 0.25, 0.5, 0.75, 0.95] {
        let law = TruncatedGaussianLaw::overall(r2, p, a, LawConfig::default())?;
        let q = law.quantiles(&[0.025, 0.975])?;
        println!("{r2:>5.2} {:>10.4} {:>10.4} {:>10.4} {:>9.5}", law.variance()?, q[0].value, q[1].value, q[1].mc_se);
    }
    Ok(())
}
