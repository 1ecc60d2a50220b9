//! Recomputes the published fold skill scores and per-class recalls from
//! their confusion-matrix counts.

use anyhow::{bail, Result};
use flarecast::evaluation::{published, verify_tables, SkillReport};

fn main() -> Result<()> {
    let report = SkillReport::from_matrices(
        published::FOLDS
            .iter()
            .enumerate()
            .map(|(i, cm)| (format!("Fold-{}", i + 1), *cm)),
        published::LOCATIONS,
    )?;
    println!("{report}\n");
    let checks = verify_tables()?;
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed()).count();
    if failed > 0 {
        bail!("{failed} checks failed");
    }
    Ok(())
}
