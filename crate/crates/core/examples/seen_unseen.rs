//! Split downstream class names into seen and unseen by cosine similarity
//! to the mined vocabulary.
//!
//! cargo run --release --example seen_unseen [run_dir] [threshold]

mod common;

use kmerl::pipeline::run_seen_unseen;

fn main() -> kmerl::Result<()> {
    let (mut cfg, layout, ckpt) = common::pretrained_run()?;
    if let Some(t) = std::env::args().nth(2).and_then(|s| s.parse().ok()) {
        cfg.eval.overlap_threshold = t;
    }
    let split = run_seen_unseen(&cfg, &layout, &ckpt)?;
    for (tag, group) in [("seen", &split.seen), ("unseen", &split.unseen)] {
        for c in group {
            println!(
                "{tag:<6} {:<34} nearest {:<34} cos {}",
                c.class_name,
                c.nearest_entity.as_deref().unwrap_or("-"),
                c.max_similarity.map_or("-".into(), |s| format!("{s:.3}"))
            );
        }
    }
    Ok(())
}
