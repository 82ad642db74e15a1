//! Cover pairs, sampled non-cover pairs and a clique-strict hold-out.

use coverdet::dataset::{parse_manifest_str, positive_pairs, sample_negatives, split_by_clique};

const MANIFEST: &str = "\
# clique headers start with '-'
-yesterday
y_orig
y_live
y_jazz
-imagine
i_orig
i_piano
-hallelujah
h_orig
h_cover
";

fn main() -> anyhow::Result<()> {
    let cs = parse_manifest_str(MANIFEST)?;
    let pos = positive_pairs(&cs);
    println!("{} tracks in {} cliques", cs.n_tracks(), cs.n_cliques());
    for p in &pos {
        println!("cover     {} / {}", p.track_a, p.track_b);
    }
    for p in sample_negatives(&cs, pos.len(), 11)? {
        println!("non-cover {} / {}", p.track_a, p.track_b);
    }
    let (train, val) = split_by_clique(&cs, 1, 3)?;
    println!(
        "train cliques {:?}, validation cliques {:?}",
        train.clique_ids(),
        val.clique_ids()
    );
    Ok(())
}
