//! Constant-Q features of pure tones and of a synthetic melody.

use coverdet::audio::{AudioClip, CANONICAL_RATE};
use coverdet::cqt::{bin_frequencies, compute_cqt, CqtParams, C1_HZ, N_BINS};
use coverdet::dataset::synth::{render_melody, Melody, VersionParams};
use coverdet::seed;

fn main() -> anyhow::Result<()> {
    let params = CqtParams::default();
    let freqs = bin_frequencies(C1_HZ, N_BINS, 12)?;
    for hz in [C1_HZ, 220.0, 440.0, 880.0] {
        let samples = (0..3 * CANONICAL_RATE as usize)
            .map(|i| {
                (2.0 * std::f64::consts::PI * hz * i as f64 / CANONICAL_RATE as f64).sin() as f32
            })
            .collect();
        let spec = compute_cqt(&AudioClip::new(samples, CANONICAL_RATE, "tone"), &params)?;
        let k = spec.argmax_bin();
        println!(
            "{hz:8.2} Hz -> bin {k:2} ({:.2} Hz), {} frames",
            freqs[k], spec.n_frames
        );
    }

    let mut rng = seed::rng(3);
    let melody = Melody::random(&mut rng);
    let original = render_melody(&melody, &VersionParams::identity(0.9), CANONICAL_RATE);
    let cover = render_melody(
        &melody,
        &VersionParams::random(&mut rng, melody.notes.len()),
        CANONICAL_RATE,
    );
    for (name, samples) in [("original", original), ("cover", cover)] {
        let spec = compute_cqt(&AudioClip::new(samples, CANONICAL_RATE, name), &params)?;
        let energy = spec.mean_per_bin();
        let loudest = (0..N_BINS)
            .max_by(|&a, &b| energy[a].total_cmp(&energy[b]))
            .unwrap_or(0);
        println!(
            "{name:>8}: {} bins x {} frames, loudest bin {loudest} ({:.1} Hz)",
            spec.n_bins, spec.n_frames, freqs[loudest]
        );
    }
    Ok(())
}
