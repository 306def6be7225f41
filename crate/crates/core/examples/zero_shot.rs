//! Zero-shot classification: class names become queries for the cardiac
//! query network; no labels are used.
//!
//! cargo run --release --example zero_shot [run_dir]

mod common;

use kmerl::pipeline::run_zero_shot;

fn main() -> kmerl::Result<()> {
    let (cfg, layout, ckpt) = common::pretrained_run()?;
    let report = run_zero_shot(&cfg, &layout, &ckpt)?;
    for ((c, auc), f1) in report.class_names.iter().zip(&report.auc).zip(&report.f1) {
        println!("{c:<34} auc {:<6} f1 {f1:.3}", auc.map_or("-".into(), |a| format!("{a:.3}")));
    }
    println!("macro AUC {:?} over {} records", report.macro_auc, report.num_records);
    Ok(())
}
