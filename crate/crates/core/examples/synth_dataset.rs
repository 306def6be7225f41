//! Generate the synthetic 12-lead corpus and print a few records.
//!
//! cargo run --release --example synth_dataset [out_dir]

use kmerl::data::{generate_synthetic, load_manifest, Split, SyntheticConfig};

fn main() -> kmerl::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "runs/synth".into());
    let corpus = generate_synthetic(&SyntheticConfig::default())?;
    let manifest = corpus.write(dir.as_ref())?;
    let reloaded = load_manifest(&std::path::Path::new(&dir).join("manifest.json"))?;
    assert_eq!(reloaded.len(), manifest.len());

    for split in [Split::Train, Split::Valid, Split::Test] {
        println!("{split:?}: {} records", manifest.entries(split).count());
    }
    for (rec, &class) in corpus.records.iter().zip(&corpus.classes).take(4) {
        let lead_ii = rec.lead_signal(kmerl::data::Lead::from_name("II")?).expect("12-lead record");
        let peak = lead_ii.iter().cloned().fold(f64::MIN, f64::max);
        println!("{} [{}] peak II {peak:.2} mV: {}", rec.id(), corpus.class_names[class], rec.report());
    }
    println!("rule tables: {} dictionary terms", corpus.rules.dictionary.len());
    Ok(())
}
