//! Mine entities, synonym merges and superclasses from reports, then label
//! each report. Uses the offline rule client by default; pass an endpoint to
//! use a chat-completion server instead.
//!
//! cargo run --release --example mine_knowledge [endpoint]

use kmerl::data::{generate_synthetic, SyntheticConfig};
use kmerl::knowledge::{mine_reports, ChatClient, LlmClient, LlmClientConfig, MiningOptions, RuleBasedClient};

fn main() -> kmerl::Result<()> {
    env_logger::init();
    let corpus = generate_synthetic(&SyntheticConfig { num_records: 12, num_valid: 0, num_test: 0, ..SyntheticConfig::default() })?;
    let reports: Vec<String> = corpus.records.iter().map(|r| r.report().to_string()).collect();
    let client: Box<dyn ChatClient> = match std::env::args().nth(1) {
        Some(endpoint) => Box::new(LlmClient::new(LlmClientConfig { endpoint, ..LlmClientConfig::default() })?),
        None => Box::new(RuleBasedClient::new(corpus.rules.clone())),
    };
    let out = mine_reports(&reports, client.as_ref(), &MiningOptions::default())?;

    println!("vocabulary ({}): {}", out.vocabulary.len(), out.vocabulary.entities.join(", "));
    for (raw, canon) in out.vocabulary.merge_map.iter().filter(|(r, c)| r != c) {
        println!("  merge {raw} -> {canon}");
    }
    for (sup, members) in &out.vocabulary.superclasses {
        println!("  {sup} <- {}", members.join(", "));
    }
    for ((report, ents), labels) in reports.iter().zip(&out.extracted).zip(&out.labels).take(5) {
        let names: Vec<&str> = labels.indices().into_iter().map(|i| out.vocabulary.entities[i].as_str()).collect();
        println!("{report}\n  mentions {ents:?}\n  labels   {names:?}");
    }
    Ok(())
}
