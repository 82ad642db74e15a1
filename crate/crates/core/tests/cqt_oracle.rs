use std::f64::consts::PI;

use coverdet::audio::AudioClip;
use coverdet::cqt::{bin_frequencies, compute_cqt, cqt_magnitudes, CqtParams, C1_HZ};
use coverdet::oracle::{max_relative_error, naive_cqt, naive_log_normalize};
use rand::Rng;

const SR: u32 = 22050;

fn tone(hz: f64, seconds: f64, amp: f64) -> Vec<f32> {
    let n = (seconds * SR as f64) as usize;
    (0..n)
        .map(|i| (amp * (2.0 * PI * hz * i as f64 / SR as f64).sin()) as f32)
        .collect()
}

fn argmax_bin(samples: Vec<f32>) -> usize {
    compute_cqt(&AudioClip::new(samples, SR, "t"), &CqtParams::default())
        .unwrap()
        .argmax_bin()
}

fn naive_argmax(samples: &[f32]) -> usize {
    let params = CqtParams::default();
    let mags = naive_cqt(samples, SR, &params).unwrap();
    let frames = mags.len() / params.n_bins;
    let means: Vec<f64> = mags
        .chunks(frames)
        .map(|row| row.iter().sum::<f64>() / frames as f64)
        .collect();
    (0..means.len())
        .max_by(|&a, &b| means[a].partial_cmp(&means[b]).unwrap().then(b.cmp(&a)))
        .unwrap()
}

#[test]
fn fast_transform_matches_naive_dft_on_random_signals() {
    let params = CqtParams::default();
    let mut rng = coverdet::seed::rng(11);
    for _ in 0..5 {
        let x: Vec<f32> = (0..3 * SR as usize)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let (fast, _) = cqt_magnitudes(&x, SR, &params).unwrap();
        let slow = naive_cqt(&x, SR, &params).unwrap();
        assert!(max_relative_error(&fast, &slow) < 1e-6);

        let db = compute_cqt(&AudioClip::new(x.clone(), SR, "r"), &params).unwrap();
        for (a, b) in db.data.iter().zip(naive_log_normalize(&slow)) {
            assert!(
                (*a as f64 - b).abs() <= 1e-6 * b.abs().max(1.0),
                "{a} vs {b}"
            );
        }
    }
}

#[test]
fn grid_endpoints_are_c1_and_b7() {
    let f = bin_frequencies(C1_HZ, 84, 12).unwrap();
    assert!((f[0] - 32.7032).abs() < 1e-4);
    assert!((f[12] - 2.0 * f[0]).abs() < 1e-9);
    assert!((f[83] - 3951.066).abs() < 1e-2);
}

#[test]
fn pure_tones_localize_like_the_naive_oracle() {
    for (hz, expect) in [(C1_HZ, 0), (440.0, 45), (3951.066, 83)] {
        let x = tone(hz, 3.0, 1.0);
        let oracle = naive_argmax(&x);
        assert_eq!(oracle, expect, "{hz} Hz");
        assert_eq!(argmax_bin(x), oracle, "{hz} Hz");
    }
}

#[test]
fn octave_shift_moves_argmax_by_twelve_bins() {
    for k in [3usize, 17, 30, 45, 60] {
        let f = C1_HZ * 2f64.powf(k as f64 / 12.0);
        let lo = argmax_bin(tone(f, 3.0, 0.7));
        let hi = argmax_bin(tone(2.0 * f, 3.0, 0.7));
        assert_eq!(lo, k);
        assert_eq!(hi, lo + 12);
    }
}

#[test]
fn halving_amplitude_lowers_raw_log_energy_by_6_02_db() {
    let params = CqtParams::default();
    let x = tone(261.63, 3.0, 0.8);
    let half: Vec<f32> = x.iter().map(|v| v * 0.5).collect();
    let (a, _) = cqt_magnitudes(&x, SR, &params).unwrap();
    let (b, _) = cqt_magnitudes(&half, SR, &params).unwrap();
    let peak = a.iter().cloned().fold(0.0, f64::max);
    let shift = -20.0 * 2f64.log10();
    for (m, h) in a.iter().zip(&b) {
        if *m > peak * 1e-4 {
            let d = 20.0 * (h / m).log10();
            assert!((d - shift).abs() < 1e-3, "{d}");
        }
    }
}

#[test]
fn periodic_signal_gives_identical_interior_frames() {
    // 441 Hz repeats every 50 samples, and the hop is a multiple of 50.
    let params = CqtParams::with_hop(5000);
    let x = tone(441.0, 6.0, 0.5);
    let spec = compute_cqt(&AudioClip::new(x, SR, "p"), &params).unwrap();
    let interior: Vec<usize> = (3..spec.n_frames - 3).collect();
    for k in 30..84 {
        let row = spec.row(k);
        for &t in &interior {
            assert!(
                (row[t] - row[interior[0]]).abs() < 1e-3,
                "bin {k} frame {t}"
            );
        }
    }
}

#[test]
fn silence_sits_on_the_floor() {
    let spec = compute_cqt(
        &AudioClip::new(vec![0.0; 3 * SR as usize], SR, "s"),
        &CqtParams::default(),
    )
    .unwrap();
    assert!(spec.data.iter().all(|&v| v == -80.0));
}
