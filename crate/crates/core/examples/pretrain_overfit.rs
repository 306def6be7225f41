//! Synthesize a small corpus, mine it with the rule client, pretrain, and
//! score the held-out split zero-shot.
//!
//! cargo run --release --example pretrain_overfit [run_dir] [key=value ...]

use std::time::Instant;

use kmerl::config::RunConfig;
use kmerl::pipeline::{mine, record_run, run_pretrain, run_zero_shot, synth, RunLayout};

fn main() -> kmerl::Result<()> {
    env_logger::init();
    let mut args = std::env::args().skip(1);
    let layout = RunLayout::new(args.next().unwrap_or_else(|| "runs/overfit".into()));
    let overrides: Vec<String> = args.collect();
    let cfg = RunConfig::default()
        .with_overrides(&["pretrain.max_steps=300", "pretrain.optimizer.lr=5e-4"])?
        .with_overrides(&overrides)?;
    record_run(&cfg, &layout, "pretrain_overfit")?;

    synth(&cfg, &layout)?;
    let mined = mine(&cfg, &layout)?;
    println!("vocabulary: {:?}", mined.vocabulary.entities);

    let start = Instant::now();
    let out = run_pretrain(&cfg, &layout, None)?;
    let first = &out.history[0];
    let last = out.history.last().expect("at least one step");
    println!(
        "{} steps in {:.1?}: loss {:.4} -> {:.4}, reduction over the last 10 steps {:.1}%",
        out.history.len(),
        start.elapsed(),
        first.loss_total,
        last.loss_total,
        100.0 * out.loss_reduction(10)
    );

    let report = run_zero_shot(&cfg, &layout, &out.paths.final_checkpoint)?;
    for (c, a) in report.class_names.iter().zip(&report.auc) {
        println!("  {c:<32} auc {}", a.map_or("-".into(), |v| format!("{v:.3}")));
    }
    println!("zero-shot macro AUC {:?}", report.macro_auc);
    Ok(())
}
