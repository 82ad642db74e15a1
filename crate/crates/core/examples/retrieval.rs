//! Prec@1 over batches of 16 tracks and nearest-neighbour queries by cosine
//! distance, on hand-made embeddings.

use coverdet::dataset::PairSample;
use coverdet::eval::{prec_at_1, EmbeddingIndex, EVAL_BATCH_SIZE};
use coverdet::seed;
use rand::Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = seed::rng(4);
    let pairs: Vec<PairSample> = (0..64)
        .map(|i| PairSample::new(&format!("song{i:02}_a"), &format!("song{i:02}_b"), 1))
        .collect();
    for noise in [0.0, 0.5, 1.0, 4.0] {
        let mut index = EmbeddingIndex::new(8);
        for p in &pairs {
            let centre: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
            for t in [&p.track_a, &p.track_b] {
                let v = centre
                    .iter()
                    .map(|c| c + noise * rng.random_range(-0.5..0.5))
                    .collect();
                index.insert(t.clone(), v)?;
            }
        }
        let report = prec_at_1(&index, &pairs, EVAL_BATCH_SIZE, 1)?;
        println!(
            "noise {noise:3.1}: Prec@1 {:.3} over {} batches",
            report.prec_at_1, report.n_batches
        );
        if noise == 1.0 {
            for (track, d) in index.nearest("song00_a", 3)? {
                println!("    nearest to song00_a: {track} ({d:.3})");
            }
        }
    }
    println!("random guessing: {:.3}", 1.0 / (EVAL_BATCH_SIZE - 1) as f64);
    Ok(())
}
