//! Trains a small model and writes `best/` and `last/` checkpoints.
//!
//! Usage: `cargo run --release --example train_fixtures -- [DATA_DIR] [OUT_DIR] [EPOCHS]`
//! DATA_DIR defaults to the bundled tiny fixtures, OUT_DIR to `runs/fixtures`.

use std::path::PathBuf;

use tgdial::backbone::ModelConfig;
use tgdial::corpus::{build_vocabulary, encode_all, load_dataset};
use tgdial::generator::DecodeSettings;
use tgdial::metrics::EvalReport;
use tgdial::model::{DialogueModel, LossOptions};
use tgdial::trainer::{fit, FitData, OptimizerConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let data = args.first().map_or_else(
        || PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny"),
        PathBuf::from,
    );
    let out = PathBuf::from(args.get(1).map_or("runs/fixtures", String::as_str));
    let epochs: usize = args.get(2).map_or(Ok(30), |s| s.parse())?;

    let (split, inventory) = load_dataset(&data, None)?;
    let vocab = build_vocabulary(&split.train, &inventory, 1);
    let config = ModelConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        ffn_width: 64,
        vocab_size: vocab.len(),
        max_src_len: 96,
        max_tgt_len: 32,
        dropout: 0.1,
        seed: 1,
    };
    let loss = LossOptions::default();
    let train = encode_all(&split.train, &vocab, &inventory, loss.m, config.limits())?;
    let dev = encode_all(&split.dev, &vocab, &inventory, loss.m, config.limits())?;
    let model = DialogueModel::new(&config, inventory.n_types(), inventory.n_topics())?;
    println!(
        "{} train / {} dev samples, vocab {}, {} parameters",
        train.len(),
        dev.len(),
        vocab.len(),
        model.store.count()
    );

    let opt = OptimizerConfig {
        learning_rate: 3e-3,
        epochs,
        ..OptimizerConfig::default()
    };
    let mut trainer = Trainer::new(model, opt, loss)?;
    let data = FitData {
        train: &train,
        dev: &dev,
        dev_samples: &split.dev,
        vocab: &vocab,
        inventory: &inventory,
    };
    let settings = DecodeSettings {
        max_len: 32,
        ..DecodeSettings::default()
    };
    let outcome = fit(
        &mut trainer,
        &data,
        &out,
        Some(settings),
        |log, improved| {
            println!(
                "epoch {:>3} step {:>5} train {:.4} dev {:.4}{}",
                log.epoch,
                log.step,
                log.train_loss,
                log.dev_loss.unwrap_or(f64::NAN),
                if improved { " *" } else { "" }
            );
        },
    )?;
    if let Some(report) = outcome.dev_report {
        println!("{}", EvalReport::table_header());
        println!("{}", report.table_row());
    }
    println!("best checkpoint: {}", outcome.best.display());
    Ok(())
}
