//! Tokenize one record into lead x segment patches, then apply lead masking
//! and segment masking.
//!
//! cargo run --release --example tokenize_and_mask [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use kmerl::data::{generate_synthetic, normalize_record, SyntheticConfig};
use kmerl::encoder::{dynamic_lead_mask, segment_mask, EncoderConfig, TokenGrid};

fn show(label: &str, g: &TokenGrid) {
    let leads: Vec<&str> = g.leads().iter().map(|l| l.name()).collect();
    println!("{label:<14} {} leads, {} of {} tokens kept: {}", leads.len(), g.num_kept(), leads.len() * g.segments(), leads.join(" "));
}

fn main() -> kmerl::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let corpus = generate_synthetic(&SyntheticConfig { num_records: 4, num_valid: 0, num_test: 0, ..SyntheticConfig::default() })?;
    let rec = normalize_record(corpus.records[0].clone());
    let grid = TokenGrid::from_record(&rec, &EncoderConfig::default())?;
    show("full", &grid);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dlm = dynamic_lead_mask(&grid, 9, 11, &mut rng)?;
    show("lead-masked", &dlm);
    let lsm = segment_mask(&dlm, 0.25, &mut rng)?;
    show("+ segments", &lsm);
    for row in 0..lsm.leads().len() {
        let pattern: String = (0..lsm.segments()).map(|s| if lsm.is_kept(row, s) { '#' } else { '.' }).collect();
        println!("  {:<4} {pattern}", lsm.leads()[row].name());
    }
    Ok(())
}
