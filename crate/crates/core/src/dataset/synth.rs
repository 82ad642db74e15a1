//! Desk-scale cover-song corpus: each clique is a random melody, each version
//! a transposed, re-timed, re-levelled rendering of it with a little noise.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;

use super::{CliqueSet, DatasetError, Track};
use crate::audio::{write_wav_pcm16, AudioClip, CANONICAL_RATE};
use crate::seed;

/// Nominal length of an untransformed rendering.
pub const SYNTH_SECONDS: f64 = 30.0;

const MAJOR: [i32; 7] = [0, 2, 4, 5, 7, 9, 11];
const MINOR: [i32; 7] = [0, 2, 3, 5, 7, 8, 10];
const DURATIONS: [f64; 4] = [0.5, 1.0, 1.5, 2.0];
const HARMONICS: usize = 5;
const NOISE_LEVEL: f64 = 0.005;

#[derive(Debug, Clone, PartialEq)]
pub struct Note {
    /// Pitch as a (possibly fractional) MIDI number.
    pub pitch: f64,
    pub start_beats: f64,
    pub beats: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Melody {
    pub notes: Vec<Note>,
    pub beat_seconds: f64,
}

impl Melody {
    pub fn total_beats(&self) -> f64 {
        self.notes
            .last()
            .map(|n| n.start_beats + n.beats)
            .unwrap_or(0.0)
    }

    /// A random 16 to 32 note melody in a random key, spread over about
    /// [`SYNTH_SECONDS`].
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let n_notes = rng.random_range(16..=32);
        let scale = if rng.random_bool(0.5) { &MAJOR } else { &MINOR };
        let tonic = rng.random_range(55..=67);
        let mut degree: i32 = 0;
        let mut start = 0.0;
        let mut notes = Vec::with_capacity(n_notes);
        for _ in 0..n_notes {
            let beats = *DURATIONS.choose(rng).expect("non-empty");
            let octave = degree.div_euclid(7);
            let pitch = tonic + 12 * octave + scale[degree.rem_euclid(7) as usize];
            notes.push(Note {
                pitch: pitch as f64,
                start_beats: start,
                beats,
            });
            start += beats;
            let step = rng.random_range(-3..=3);
            degree = (degree + step).clamp(-7, 10);
        }
        Self {
            beat_seconds: SYNTH_SECONDS / start,
            notes,
        }
    }
}

/// How one version departs from its clique's melody.
#[derive(Debug, Clone, PartialEq)]
pub struct VersionParams {
    pub transpose: i32,
    /// Playback speed; 1.25 plays 25% faster.
    pub tempo: f64,
    pub gain: f64,
    /// Per-note level multipliers; missing entries count as 1.
    pub note_gains: Vec<f64>,
    pub noise_level: f64,
    pub noise_seed: u64,
}

impl VersionParams {
    pub fn identity(gain: f64) -> Self {
        Self {
            transpose: 0,
            tempo: 1.0,
            gain,
            note_gains: Vec::new(),
            noise_level: 0.0,
            noise_seed: 0,
        }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n_notes: usize) -> Self {
        Self {
            transpose: rng.random_range(-5..=6),
            tempo: rng.random_range(0.8..=1.25),
            gain: rng.random_range(0.5..=0.95),
            note_gains: (0..n_notes).map(|_| rng.random_range(0.8..=1.2)).collect(),
            noise_level: NOISE_LEVEL,
            noise_seed: rng.random(),
        }
    }
}

fn midi_hz(pitch: f64) -> f64 {
    440.0 * 2f64.powf((pitch - 69.0) / 12.0)
}

/// Renders a version of `melody` at `sample_rate`. The noiseless mix is
/// scaled so its peak equals `0.9 * gain`.
pub fn render_melody(melody: &Melody, version: &VersionParams, sample_rate: u32) -> Vec<f32> {
    let sr = sample_rate as f64;
    let beat = melody.beat_seconds / version.tempo;
    let total = (melody.total_beats() * beat * sr).ceil() as usize;
    let mut mix = vec![0.0f64; total.max(1)];
    let attack = (0.01 * sr) as usize;
    let release = (0.03 * sr) as usize;
    for (i, note) in melody.notes.iter().enumerate() {
        let f0 = midi_hz(note.pitch + version.transpose as f64);
        let level = version.note_gains.get(i).copied().unwrap_or(1.0);
        let start = (note.start_beats * beat * sr).round() as usize;
        let len = ((note.beats * beat * sr).round() as usize).min(mix.len().saturating_sub(start));
        for n in 0..len {
            let t = n as f64 / sr;
            let mut env = (-t / 0.8).exp();
            if n < attack {
                env *= n as f64 / attack as f64;
            }
            if len - n < release {
                env *= (len - n) as f64 / release as f64;
            }
            let mut v = 0.0;
            for h in 1..=HARMONICS {
                let fh = f0 * h as f64;
                if fh < sr / 2.0 {
                    v += (2.0 * PI * fh * t).sin() / h as f64;
                }
            }
            mix[start + n] += level * env * v;
        }
    }
    let peak = mix.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > 0.0 {
        0.9 * version.gain / peak
    } else {
        0.0
    };
    let mut noise_rng = seed::rng(version.noise_seed);
    mix.iter()
        .map(|&v| {
            let noise = if version.noise_level > 0.0 {
                version.noise_level * noise_rng.random_range(-1.0..=1.0)
            } else {
                0.0
            };
            (v * scale + noise).clamp(-1.0, 1.0) as f32
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_cliques: usize,
    pub versions_per_clique: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub manifest_path: PathBuf,
    pub cliques: CliqueSet,
}

pub fn clique_id(c: usize) -> String {
    format!("c{c:03}")
}

pub fn track_id(c: usize, v: usize) -> String {
    format!("c{c:03}_v{v}")
}

/// Writes `n_cliques * versions_per_clique` WAV files under `out_dir/audio`
/// and a manifest at `out_dir/manifest.txt`. Deterministic under the seed.
pub fn synthesize_corpus(cfg: &SynthConfig) -> Result<SynthOutput, DatasetError> {
    if cfg.n_cliques < 2 || cfg.versions_per_clique < 2 {
        return Err(DatasetError::InvalidParam(
            "need at least 2 cliques and 2 versions per clique".into(),
        ));
    }
    let audio_dir = cfg.out_dir.join("audio");
    fs::create_dir_all(&audio_dir).map_err(|source| DatasetError::IoFailure {
        path: audio_dir.display().to_string(),
        source,
    })?;

    let groups = (0..cfg.n_cliques)
        .into_par_iter()
        .map(|c| render_clique(cfg, c, &audio_dir))
        .collect::<Result<Vec<_>, _>>()?;

    let cliques = CliqueSet::from_groups(groups)?;
    let manifest_path = cfg.out_dir.join("manifest.txt");
    cliques.write_manifest(&manifest_path)?;
    Ok(SynthOutput {
        manifest_path,
        cliques,
    })
}

fn render_clique(
    cfg: &SynthConfig,
    c: usize,
    audio_dir: &Path,
) -> Result<(String, Vec<Track>), DatasetError> {
    let mut rng = seed::rng(seed::derive_indexed(cfg.seed, "synth-clique", &[c as u64]));
    let melody = Melody::random(&mut rng);
    let mut members = Vec::with_capacity(cfg.versions_per_clique);
    for v in 0..cfg.versions_per_clique {
        let params = VersionParams::random(&mut rng, melody.notes.len());
        let samples = render_melody(&melody, &params, CANONICAL_RATE);
        let id = track_id(c, v);
        let rel = PathBuf::from("audio").join(format!("{id}.wav"));
        write_wav_pcm16(
            audio_dir.join(format!("{id}.wav")),
            &AudioClip::new(samples, CANONICAL_RATE, &id),
        )?;
        members.push(Track::new(id, Some(rel)));
    }
    Ok((clique_id(c), members))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn melody_shape() {
        for s in 0..20 {
            let m = Melody::random(&mut seed::rng(s));
            assert!((16..=32).contains(&m.notes.len()));
            assert!((m.total_beats() * m.beat_seconds - SYNTH_SECONDS).abs() < 1e-9);
            // Pitches plus the widest transposition stay inside C1..B7.
            assert!(m
                .notes
                .iter()
                .all(|n| n.pitch - 5.0 >= 24.0 && n.pitch + 6.0 <= 107.0));
        }
    }

    #[test]
    fn identity_version_only_rescales() {
        let m = Melody::random(&mut seed::rng(3));
        let base = render_melody(&m, &VersionParams::identity(1.0), 22050);
        let soft = render_melody(&m, &VersionParams::identity(0.6), 22050);
        assert_eq!(base.len(), soft.len());
        for (a, b) in base.iter().zip(&soft) {
            assert!((a * 0.6 - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tempo_changes_duration() {
        let m = Melody::random(&mut seed::rng(4));
        let mut fast = VersionParams::identity(0.8);
        fast.tempo = 1.25;
        let n = render_melody(&m, &fast, 22050).len() as f64 / 22050.0;
        assert!((n - SYNTH_SECONDS / 1.25).abs() < 0.01, "{n}");
    }
}
