//! Prints the predicted keyword probabilities for one sample and what hard
//! (top-m) and soft (threshold) selection pick from them.
//!
//! Usage: `cargo run --release --example keyword_selection -- CHECKPOINT [DATA_DIR] [INDEX]`
//! The sample is taken from the dev split.

use std::path::PathBuf;

use tgdial::bridging::{select_hard, select_soft, BridgeSelection};
use tgdial::checkpoint::load_checkpoint;
use tgdial::corpus::{encode_sample, load_dataset, KeywordInventory};
use tgdial::generator::{DecodeSettings, GenerationContext};

fn describe(sel: &BridgeSelection, inv: &KeywordInventory) -> String {
    let types: Vec<String> = sel
        .type_picks
        .iter()
        .map(|p| format!("{} ({:.2})", inv.type_name(p.id), p.weight))
        .collect();
    let topics: Vec<String> = sel
        .topic_picks
        .iter()
        .map(|p| format!("{} ({:.2})", inv.topic_name(p.id), p.weight))
        .collect();
    let fb = if sel.fallback.iter().any(|f| *f) {
        format!("  fallback {:?}", sel.fallback)
    } else {
        String::new()
    };
    format!(
        "types [{}] topics [{}]{fb}",
        types.join(", "),
        topics.join(", ")
    )
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = load_checkpoint(&PathBuf::from(
        args.first()
            .ok_or("usage: keyword_selection CHECKPOINT [DATA_DIR] [INDEX]")?,
    ))?;
    let data = args.get(1).map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny"),
        PathBuf::from,
    );
    let index: usize = args.get(2).map_or(Ok(0), |s| s.parse())?;
    let (split, inv) = load_dataset(&data, Some(&ckpt.inventory))?;
    let sample = split.dev.get(index).ok_or("index out of range")?;
    let m = ckpt.meta.loss.m;

    let gold: Vec<String> = sample
        .bridge
        .iter()
        .map(|k| {
            format!(
                "{} | {}",
                inv.type_name(k.type_id),
                inv.topic_name(k.topic_id)
            )
        })
        .collect();
    println!("gold keywords for the next {m} turns: {}", gold.join("; "));

    let ex = encode_sample(sample, &ckpt.vocab, &inv, m, ckpt.model.config.limits())?;
    let ctx = GenerationContext::prepare(&ckpt.model, &ex, DecodeSettings::default())?;
    let dist = ctx.distribution.ok_or("bridging is disabled")?;
    let mut topics: Vec<(usize, f64)> = dist.topic_probs.iter().copied().enumerate().collect();
    topics.sort_by(|a, b| b.1.total_cmp(&a.1));
    println!("\nmost probable topics:");
    for (id, p) in topics.iter().take(6) {
        println!("  {p:.3}  {}", inv.topic_name(*id));
    }
    println!(
        "\nhard m={m}:    {}",
        describe(&select_hard(&dist, m)?, &inv)
    );
    for delta in [0.1, 0.2, 0.5, 0.9] {
        println!(
            "soft delta={delta}: {}",
            describe(&select_soft(&dist, delta)?, &inv)
        );
    }
    Ok(())
}
