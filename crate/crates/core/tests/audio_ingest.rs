use std::f64::consts::PI;

use coverdet::audio::{load_wav, load_wav_at, write_wav_pcm16, AudioClip, CANONICAL_RATE};

fn write_pcm16(path: &std::path::Path, rate: u32, channels: u16, samples: &[i16]) {
    let spec = hound::WavSpec {
        channels,
        sample_rate: rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).unwrap();
    for &s in samples {
        w.write_sample(s).unwrap();
    }
    w.finalize().unwrap();
}

/// Magnitude of a direct DFT at an integer frequency for a one-second signal.
fn dft_mag(x: &[f32], sr: f64, hz: usize) -> f64 {
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &v) in x.iter().enumerate() {
        let ph = -2.0 * PI * hz as f64 * n as f64 / sr;
        re += v as f64 * ph.cos();
        im += v as f64 * ph.sin();
    }
    re.hypot(im)
}

#[test]
fn sine_at_44k1_resamples_to_a_peak_at_440() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a4.wav");
    let samples: Vec<i16> = (0..44100)
        .map(|n| ((2.0 * PI * 440.0 * n as f64 / 44100.0).sin() * 32767.0).round() as i16)
        .collect();
    write_pcm16(&p, 44100, 1, &samples);
    let clip = load_wav(&p).unwrap();
    assert_eq!(clip.sample_rate_hz, CANONICAL_RATE);
    assert_eq!(clip.samples.len(), 22050);
    // With one second of signal, DFT bin k sits at k Hz.
    let peak = (20..2000)
        .max_by(|&a, &b| {
            dft_mag(&clip.samples, 22050.0, a)
                .partial_cmp(&dft_mag(&clip.samples, 22050.0, b))
                .unwrap()
        })
        .unwrap();
    assert!((439..=441).contains(&peak), "peak at {peak} Hz");
}

#[test]
fn resampling_preserves_duration_across_rates() {
    let dir = tempfile::tempdir().unwrap();
    for (i, &rate) in [8000u32, 11025, 16000, 22050, 32000, 44100, 48000]
        .iter()
        .enumerate()
    {
        for len in [rate as usize, rate as usize * 3 / 2 + 7] {
            let p = dir.path().join(format!("r{i}_{len}.wav"));
            write_pcm16(&p, rate, 1, &vec![100; len]);
            let clip = load_wav(&p).unwrap();
            let err = (clip.samples.len() as f64 / 22050.0 - len as f64 / rate as f64).abs();
            assert!(err < 1.0 / 22050.0, "rate {rate} len {len}: {err}");
        }
    }
}

#[test]
fn identical_stereo_channels_downmix_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("st.wav");
    let mono: Vec<i16> = (0..22050)
        .map(|n| ((n * 37) % 2000) as i16 - 1000)
        .collect();
    let inter: Vec<i16> = mono.iter().flat_map(|&s| [s, s]).collect();
    write_pcm16(&p, 22050, 2, &inter);
    let clip = load_wav(&p).unwrap();
    for (a, &b) in clip.samples.iter().zip(&mono) {
        assert_eq!(*a, b as f32 / 32768.0);
    }
}

#[test]
fn loading_is_deterministic_and_round_trips_pcm16() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("rt.wav");
    let src: Vec<f32> = (0..5000).map(|n| ((n as f32) * 0.01).sin() * 0.8).collect();
    write_wav_pcm16(&p, &AudioClip::new(src.clone(), 22050, "rt")).unwrap();
    let a = load_wav_at(&p, 22050).unwrap();
    let b = load_wav_at(&p, 22050).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.source_id, "rt");
    for (x, y) in a.samples.iter().zip(&src) {
        assert!((x - y).abs() < 1.0 / 16000.0);
    }
}
