//! Render a small synthetic corpus of cover cliques and print its manifest.
//!
//! `cargo run --release --example synth_corpus -- [out dir]`

use coverdet::dataset::synth::{synthesize_corpus, SynthConfig};

fn main() -> anyhow::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("coverdet-synth"));
    let corpus = synthesize_corpus(&SynthConfig {
        n_cliques: 4,
        versions_per_clique: 3,
        seed: 7,
        out_dir: out.clone(),
    })?;
    let cs = &corpus.cliques;
    println!(
        "{} cliques, {} tracks, {} cover pairs under {}",
        cs.n_cliques(),
        cs.n_tracks(),
        cs.n_positive_pairs(),
        out.display()
    );
    print!("{}", cs.to_manifest_string());
    Ok(())
}
