//! Finite-difference check of the full pretraining loss on a tiny model.
//!
//! cargo run --release --example gradient_check [seed]

use std::time::Instant;

use kmerl::numerics::GradCheckConfig;
use kmerl::pipeline::gradcheck_total_loss;

fn main() -> kmerl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = Instant::now();
    let report = gradcheck_total_loss(seed, GradCheckConfig::default())?;
    println!(
        "checked {} coordinates in {:.1?}: max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
        report.coords_checked,
        start.elapsed(),
        report.max_rel_error,
        report.worst_param.as_deref().unwrap_or("-"),
        report.worst_coord,
        report.analytic,
        report.numeric,
    );
    Ok(())
}
