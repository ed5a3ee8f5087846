//! Shows the vocabulary bias for one sample with both scenario sources,
//! with each one dropped, and with the bias switched off.
//!
//! Usage: `cargo run --release --example scenario_bias -- CHECKPOINT [DATA_DIR] [INDEX]`
//! The sample is taken from the dev split.

use std::path::PathBuf;

use tgdial::checkpoint::load_checkpoint;
use tgdial::corpus::{encode_sample, load_dataset};
use tgdial::generator::{DecodeSettings, GenerationContext};
use tgdial::scenario::{ablate, scenario_bias, ScenarioBias};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = load_checkpoint(&PathBuf::from(
        args.first()
            .ok_or("usage: scenario_bias CHECKPOINT [DATA_DIR] [INDEX]")?,
    ))?;
    let data = args.get(1).map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny"),
        PathBuf::from,
    );
    let index: usize = args.get(2).map_or(Ok(0), |s| s.parse())?;
    let (split, _) = load_dataset(&data, Some(&ckpt.inventory))?;
    let sample = split.dev.get(index).ok_or("index out of range")?;

    println!("profile:   {:?}", sample.profile);
    for t in &sample.knowledge {
        println!("knowledge: {} | {} | {}", t.subject, t.relation, t.object);
    }
    println!("reference: {}\n", sample.reference);

    let ex = encode_sample(
        sample,
        &ckpt.vocab,
        &ckpt.inventory,
        ckpt.meta.loss.m,
        ckpt.model.config.limits(),
    )?;
    let ctx = GenerationContext::prepare(&ckpt.model, &ex, DecodeSettings::default())?;
    let b = ckpt.model.scenario.bias_matrix(&ckpt.model.store);
    let variants = [
        ("knowledge + profile", ctx.bias.clone()),
        (
            "knowledge only",
            scenario_bias(&ablate(&ctx.pooled, false, true), b)?,
        ),
        (
            "profile only",
            scenario_bias(&ablate(&ctx.pooled, true, false), b)?,
        ),
        ("off", ScenarioBias::uniform(ckpt.vocab.len())),
    ];
    for (label, bias) in variants {
        let top: Vec<String> = bias
            .top_k(&ckpt.vocab, 8)
            .into_iter()
            .map(|e| format!("{} {:.3}", e.token, e.prob))
            .collect();
        println!("{label:<20} {}", top.join(", "));
    }
    Ok(())
}
