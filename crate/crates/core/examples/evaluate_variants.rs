//! Evaluates one checkpoint under every ablation variant and both keyword
//! selection modes, printing the results table.
//!
//! Usage: `cargo run --release --example evaluate_variants -- CHECKPOINT [DATA_DIR] [SPLIT]`
//! SPLIT is one of train, dev, test_id, test_ood (default dev).

use std::path::PathBuf;

use tgdial::bridging::SelectionMode;
use tgdial::checkpoint::load_checkpoint;
use tgdial::corpus::{load_dataset, SplitName};
use tgdial::generator::DecodeSettings;
use tgdial::metrics::{evaluate_split, EvalReport, DEFAULT_STOPWORDS};
use tgdial::model::Ablation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let ckpt = load_checkpoint(&PathBuf::from(
        args.first()
            .ok_or("usage: evaluate_variants CHECKPOINT [DATA_DIR] [SPLIT]")?,
    ))?;
    let data = args.get(1).map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny"),
        PathBuf::from,
    );
    let name: SplitName = args.get(2).map_or("dev", String::as_str).parse()?;
    let (split, _) = load_dataset(&data, Some(&ckpt.inventory))?;

    let full = Ablation::default();
    let variants = [
        full,
        Ablation {
            drop_k: true,
            ..full
        },
        Ablation {
            drop_u: true,
            ..full
        },
        Ablation {
            use_csm: false,
            ..full
        },
        Ablation {
            use_ikb: false,
            ..full
        },
        Ablation::BARE,
    ];
    println!("{}", EvalReport::table_header());
    for ablation in variants {
        let modes: &[SelectionMode] = if ablation.use_ikb {
            &[SelectionMode::Hard, SelectionMode::Soft]
        } else {
            &[SelectionMode::Hard]
        };
        for &mode in modes {
            let settings = DecodeSettings {
                mode,
                ablation,
                max_len: ckpt.model.config.max_tgt_len,
                m: ckpt.meta.loss.m,
                ..DecodeSettings::default()
            };
            let (report, _) = evaluate_split(
                &ckpt.model,
                &ckpt.vocab,
                &ckpt.inventory,
                split.get(name),
                name.as_str(),
                settings,
                DEFAULT_STOPWORDS,
            )?;
            println!("{}", report.table_row());
        }
    }
    Ok(())
}
