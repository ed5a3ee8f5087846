//! Compares analytic gradients with central differences on an untrained
//! model over the bundled fixtures, grouped by model component.
//!
//! Usage: `cargo run --release --example grad_check -- [N_COORDS] [EPSILON]`

use std::collections::BTreeMap;
use std::path::PathBuf;

use tgdial::backbone::ModelConfig;
use tgdial::corpus::{build_vocabulary, encode_all, load_dataset};
use tgdial::model::{DialogueModel, LossOptions};
use tgdial::trainer::grad_check;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let n_coords: usize = args.first().map_or(Ok(90), |s| s.parse())?;
    let epsilon: f64 = args.get(1).map_or(Ok(1e-5), |s| s.parse())?;

    let (split, inventory) = load_dataset(
        &PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny"),
        None,
    )?;
    let vocab = build_vocabulary(&split.train, &inventory, 1);
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_width: 64,
        vocab_size: vocab.len(),
        max_src_len: 96,
        max_tgt_len: 32,
        dropout: 0.0,
        seed: 3,
    };
    let loss = LossOptions::default();
    let batch = encode_all(
        &split.train[..2],
        &vocab,
        &inventory,
        loss.m,
        config.limits(),
    )?;
    let mut model = DialogueModel::new(&config, inventory.n_types(), inventory.n_topics())?;
    let report = grad_check(&mut model, &batch, &loss, epsilon, n_coords, 1)?;

    let mut by_group: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for e in &report.entries {
        let slot = by_group.entry(format!("{:?}", e.group)).or_default();
        slot.0 += 1;
        slot.1 = slot.1.max(e.rel_error);
    }
    println!("{:<16} {:>6} {:>12}", "group", "coords", "max rel err");
    for (group, (n, err)) in by_group {
        println!("{group:<16} {n:>6} {err:>12.2e}");
    }
    println!(
        "overall max relative error {:.2e} at epsilon {epsilon:e}",
        report.max_rel_error
    );
    Ok(())
}
