//! Linear probes on frozen encoder features at 1%, 10% and 100% of the
//! training split.
//!
//! cargo run --release --example linear_probe [run_dir]

mod common;

use kmerl::pipeline::run_linear_probe;

fn main() -> kmerl::Result<()> {
    let (cfg, layout, ckpt) = common::pretrained_run()?;
    for fraction in [0.01, 0.1, 1.0] {
        let mut c = cfg.clone();
        c.eval.probe.fraction = fraction;
        match run_linear_probe(&c, &layout, &ckpt) {
            Ok(out) => println!(
                "{:>5}% ({} records, best epoch {}): macro AUC {:?}",
                fraction * 100.0,
                out.train_indices.len(),
                out.best_epoch,
                out.report.macro_auc
            ),
            // tiny splits cannot keep a positive of every class at 1%
            Err(e) => println!("{:>5}%: {e}", fraction * 100.0),
        }
    }
    Ok(())
}
