//! Train a small twin network on a synthetic corpus and report validation
//! Prec@1 after each epoch.
//!
//! `cargo run --release --example train_twins`

use coverdet::dataset::synth::{synthesize_corpus, SynthConfig};
use coverdet::pipeline::{evaluate, extract_dir, load_features, split, SplitMode};
use coverdet::siamese::{train, ArchitectureConfig, ConvLayer, SiameseModel, TrainConfig, Trainer};

fn main() -> anyhow::Result<()> {
    let dir = tempfile::tempdir()?;
    let corpus = synthesize_corpus(&SynthConfig {
        n_cliques: 16,
        versions_per_clique: 3,
        seed: 5,
        out_dir: dir.path().join("corpus"),
    })?;
    let feats = dir.path().join("features");
    extract_dir(
        &dir.path().join("corpus/audio"),
        &feats,
        &Default::default(),
        22050,
        None,
    )?;

    let arch = ArchitectureConfig {
        conv_layers: vec![
            ConvLayer {
                filters: 16,
                kernel: (5, 5),
            },
            ConvLayer {
                filters: 8,
                kernel: (3, 3),
            },
        ],
        fc_widths: vec![64, 32],
        ..ArchitectureConfig::default()
    };
    let cs = corpus.cliques;
    let features = load_features(&cs, &feats, arch.input_shape.1, 5)?;
    let sp = split(&cs, SplitMode::ByClique { val_cliques: 8 }, 5)?;
    let cfg = TrainConfig {
        epochs: 4,
        seed: 5,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(SiameseModel::new(arch, 5)?, cfg)?;
    train(&mut trainer, &sp.train_data(&features), |m| {
        println!(
            "epoch {} train loss {:.4} val Prec@1 {:.3}",
            m.epoch,
            m.train_loss,
            m.val_prec_at_1.unwrap_or(f64::NAN)
        )
    })?;
    let report = evaluate(
        &trainer.model,
        &features,
        &sp.val_positives,
        &sp.val_cliques,
        5,
    )?;
    println!(
        "held-out Prec@1 {:.3} over {} batches",
        report.prec_at_1, report.n_batches
    );
    Ok(())
}
