//! Writes a synthetic corpus in the JSONL layout the loader reads.
//!
//! Usage: `cargo run --example synthetic_corpus -- OUT_DIR [TRAIN DEV TEST_ID TEST_OOD]`
//! where the optional counts truncate each split to that many samples.

use std::path::PathBuf;

use tgdial::corpus::{synth, verify_ood, SplitName};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = PathBuf::from(args.first().map_or("data/synthetic", String::as_str));
    let cfg = synth::SynthConfig::default();
    let (mut split, inventory) = synth::generate(&cfg)?;
    if args.len() == 5 {
        let mut counts = [0; 4];
        for (c, a) in counts.iter_mut().zip(&args[1..]) {
            *c = a.parse()?;
        }
        synth::truncate_split(&mut split, counts);
    }
    let report = verify_ood(&split, &inventory);
    synth::write_dataset(&out, &split, &inventory)?;
    for name in SplitName::ALL {
        println!("{name:<9} {:>5} samples", split.get(name).len());
    }
    println!(
        "{} types, {} topics, ood disjoint: {}",
        inventory.n_types(),
        inventory.n_topics(),
        report.disjoint
    );
    println!("wrote {}", out.display());
    Ok(())
}
