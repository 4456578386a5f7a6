//! Oracle asymptotic variances under SR, SRRoM and SRRsM for the four
//! simulation cases.

use stratrr::balance::{build_design_matrices, threshold_for};
use stratrr::inference::theoretical_variances;
use stratrr::sim::{generate_population, DgpConfig};

fn main() -> stratrr::Result<()> {
    let cases = [DgpConfig::case1(50), DgpConfig::case2(10), DgpConfig::case3(200), DgpConfig::case4(200)];
    println!("{:<5} {:>8} {:>8} {:>9} {:>9} {:>9} {:>8} {:>8}", "case", "n", "R2", "var SR", "SRRoM", "SRRsM", "red om%", "red sm%");
    for dgp in cases {
        let pop = generate_population(&dgp)?;
        let dm = build_design_matrices(&pop)?;
        let a = threshold_for(pop.dim(), 0.001)?;
        let t = theoretical_variances(&pop, &dm, a, &vec![a; pop.num_strata()])?;
        println!(
            "{:<5} {:>8} {:>8.3} {:>9.3} {:>9.3} {:>9.3} {:>8.1} {:>8.1}",
            dgp.case.number(),
            pop.len(),
            t.r2,
            t.var_sr,
            t.var_srrom,
            t.var_srrsm,
            t.reduction_srrom,
            t.reduction_srrsm
        );
    }
    Ok(())
}
