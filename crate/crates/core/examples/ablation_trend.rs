//! Trains the full model and the variant without keyword bridging on the
//! same synthetic corpus, then compares them on test_id.
//!
//! Usage: `cargo run --release --example ablation_trend -- [EPOCHS] [TRAIN_DIALOGUES]`
//! Defaults (120 epochs, 140 dialogues) take roughly ten minutes on one core.

use std::time::Instant;

use tgdial::backbone::ModelConfig;
use tgdial::bridging::SelectionMode;
use tgdial::corpus::{build_vocabulary, encode_all, synth};
use tgdial::generator::DecodeSettings;
use tgdial::metrics::{evaluate_split, EvalReport, DEFAULT_STOPWORDS};
use tgdial::model::{Ablation, DialogueModel, LossOptions};
use tgdial::trainer::{OptimizerConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(Ok(120), |s| s.parse())?;
    let dialogues: usize = args.get(1).map_or(Ok(140), |s| s.parse())?;

    let cfg = synth::SynthConfig {
        train_dialogues: dialogues,
        dev_dialogues: 10,
        test_id_dialogues: 60,
        test_ood_dialogues: 10,
        entities_per_domain: 16,
        ..synth::SynthConfig::default()
    };
    let (split, inventory) = synth::generate(&cfg)?;
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
    let train = encode_all(&split.train, &vocab, &inventory, 4, config.limits())?;
    println!(
        "{} train samples, {} topics, vocab {}",
        train.len(),
        inventory.n_topics(),
        vocab.len()
    );

    let mut rows = Vec::new();
    for ablation in [
        Ablation::default(),
        Ablation {
            use_ikb: false,
            ..Ablation::default()
        },
    ] {
        let t0 = Instant::now();
        let model = DialogueModel::new(&config, inventory.n_types(), inventory.n_topics())?;
        let opt = OptimizerConfig {
            learning_rate: 3e-3,
            epochs,
            predicted_bridge_from_epoch: Some(epochs / 3),
            ..OptimizerConfig::default()
        };
        let mut trainer = Trainer::new(
            model,
            opt,
            LossOptions {
                ablation,
                ..LossOptions::default()
            },
        )?;
        for _ in 0..epochs {
            trainer.run_epoch(&train, |_| Ok(()))?;
        }
        println!(
            "trained {} in {:.0}s",
            ablation.label(),
            t0.elapsed().as_secs_f64()
        );
        let modes: &[SelectionMode] = if ablation.use_ikb {
            &[SelectionMode::Hard, SelectionMode::Soft]
        } else {
            &[SelectionMode::Hard]
        };
        for &mode in modes {
            let settings = DecodeSettings {
                mode,
                ablation,
                max_len: 32,
                ..DecodeSettings::default()
            };
            let (report, _) = evaluate_split(
                &trainer.model,
                &vocab,
                &inventory,
                &split.test_id,
                "test_id",
                settings,
                DEFAULT_STOPWORDS,
            )?;
            rows.push(report.table_row());
        }
    }
    println!("\n{}", EvalReport::table_header());
    for r in rows {
        println!("{r}");
    }
    Ok(())
}
