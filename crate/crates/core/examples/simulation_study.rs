//! A reduced simulation study comparing SR with the rerandomized designs.
//! Pass a replication count as the first argument (default 300).

use stratrr::inference::LawConfig;
use stratrr::sim::{run_study, DgpConfig, MethodKind, StudyConfig};

fn main() -> stratrr::Result<()> {
    let reps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let cfg = StudyConfig::new(DgpConfig::case3(200))
        .with_methods(&[MethodKind::Sr, MethodKind::Srrom, MethodKind::SrrsmFair, MethodKind::SrrsmUnfair])
        .with_reps(reps)
        .with_law(LawConfig { draws: 20_000, seed: 1 });
    let res = run_study(&cfg)?;
    println!("n = {}, tau = {:.4}, {reps} replications", res.n, res.tau);
    print!("{}", res.table());
    if let Some(t) = &res.theory {
        println!("asymptotic reduction vs SR: SRRoM {:.1}%, SRRsM {:.1}%", t.reduction_srrom, t.reduction_srrsm);
    }
    Ok(())
}
