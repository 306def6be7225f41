use std::path::PathBuf;

use kmerl::config::RunConfig;
use kmerl::pipeline::{mine, run_pretrain, synth, RunLayout};

/// Run directory from the first argument (default `runs/overfit`), with a
/// short pretraining pass when it holds no checkpoint yet.
pub fn pretrained_run() -> kmerl::Result<(RunConfig, RunLayout, PathBuf)> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "runs/overfit".into());
    let layout = RunLayout::new(root);
    let cfg = if layout.root.join("config.json").exists() {
        RunConfig::load(&layout.root.join("config.json"))?
    } else {
        RunConfig::default().with_overrides(&["pretrain.max_steps=300", "pretrain.optimizer.lr=5e-4"])?
    };
    let ckpt = layout.pretrain().join("final.ckpt");
    if !ckpt.exists() {
        println!("no checkpoint in {}; pretraining first", layout.root.display());
        synth(&cfg, &layout)?;
        mine(&cfg, &layout)?;
        run_pretrain(&cfg, &layout, None)?;
    }
    Ok((cfg, layout, ckpt))
}
