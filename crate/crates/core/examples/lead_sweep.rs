//! Zero-shot macro AUC with the first k leads, k = 1..12, with dropped leads
//! and with zero-padded leads.
//!
//! cargo run --release --example lead_sweep [run_dir]

mod common;

use kmerl::eval::SweepMode;
use kmerl::pipeline::run_lead_sweep;

fn main() -> kmerl::Result<()> {
    let (cfg, layout, ckpt) = common::pretrained_run()?;
    let dropped = run_lead_sweep(&cfg, &layout, &ckpt, SweepMode::ZeroShot, false)?;
    let padded = run_lead_sweep(&cfg, &layout, &ckpt, SweepMode::ZeroShot, true)?;
    println!(" k  dropped  zero-padded");
    for (d, p) in dropped.iter().zip(&padded) {
        let f = |v: Option<f64>| v.map_or("-".into(), |a| format!("{a:.3}"));
        println!("{:>2}  {:<8} {}", d.leads.len(), f(d.macro_auc), f(p.macro_auc));
    }
    println!("curves written to {}", layout.eval().display());
    Ok(())
}
