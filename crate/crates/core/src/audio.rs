//! PCM WAV ingestion and canonicalization to a mono stream at the pipeline rate.

use std::path::Path;

use thiserror::Error;

/// Sample rate every clip is brought to before feature extraction.
pub const CANONICAL_RATE: u32 = 22050;

/// Accepted input sample-rate range, inclusive.
pub const MIN_INPUT_RATE: u32 = 8000;
pub const MAX_INPUT_RATE: u32 = 48000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("malformed WAV container {path}: {reason}")]
    MalformedContainer { path: String, reason: String },
    #[error("unsupported WAV encoding in {path}: {reason}")]
    UnsupportedEncoding { path: String, reason: String },
    #[error("WAV file {path} contains no samples")]
    EmptyAudio { path: String },
    #[error("cannot write WAV {path}: {reason}")]
    Write { path: String, reason: String },
}

/// A mono clip with amplitudes in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
    pub source_id: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32, source_id: impl Into<String>) -> Self {
        Self {
            samples,
            sample_rate_hz,
            source_id: source_id.into(),
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    /// Scales so the largest absolute sample is 1. Silent clips are left alone.
    pub fn peak_normalize(&mut self) {
        let peak = self.samples.iter().fold(0.0f32, |m, s| m.max(s.abs()));
        if peak > 0.0 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
    }
}

/// Loads a WAV file and canonicalizes it to mono at [`CANONICAL_RATE`].
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip, AudioError> {
    load_wav_at(path, CANONICAL_RATE)
}

/// Loads a WAV file and canonicalizes it to mono at `target_rate`.
pub fn load_wav_at(path: impl AsRef<Path>, target_rate: u32) -> Result<AudioClip, AudioError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let mut reader = hound::WavReader::open(path).map_err(|e| classify(&shown, e))?;
    let spec = reader.spec();

    if spec.channels == 0 || spec.channels > 2 {
        return Err(AudioError::UnsupportedEncoding {
            path: shown,
            reason: format!("{} channels (expected 1 or 2)", spec.channels),
        });
    }
    if !(MIN_INPUT_RATE..=MAX_INPUT_RATE).contains(&spec.sample_rate) {
        return Err(AudioError::UnsupportedEncoding {
            path: shown,
            reason: format!("sample rate {} Hz outside [8000, 48000]", spec.sample_rate),
        });
    }

    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            let scale = 1.0 / 32768.0f32;
            reader
                .samples::<i16>()
                .map(|s| s.map(|v| v as f32 * scale))
                .collect::<Result<_, _>>()
                .map_err(|e| classify(&shown, e))?
        }
        (hound::SampleFormat::Int, 32) => {
            let scale = 1.0 / 2147483648.0f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(|e| classify(&shown, e))?
        }
        (hound::SampleFormat::Float, 32) => {
            let raw: Vec<f32> = reader
                .samples::<f32>()
                .collect::<Result<_, _>>()
                .map_err(|e| classify(&shown, e))?;
            if raw.iter().any(|s| !s.is_finite()) {
                return Err(AudioError::MalformedContainer {
                    path: shown,
                    reason: "non-finite float sample".into(),
                });
            }
            raw.into_iter().map(|s| s.clamp(-1.0, 1.0)).collect()
        }
        (fmt, bits) => {
            return Err(AudioError::UnsupportedEncoding {
                path: shown,
                reason: format!("{fmt:?} {bits}-bit samples"),
            })
        }
    };

    let mono = downmix(&interleaved, spec.channels as usize);
    if mono.is_empty() {
        return Err(AudioError::EmptyAudio { path: shown });
    }
    let samples = resample_linear(&mono, spec.sample_rate, target_rate);
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip::new(samples, target_rate, source_id))
}

fn classify(path: &str, err: hound::Error) -> AudioError {
    match err {
        hound::Error::Unsupported => AudioError::UnsupportedEncoding {
            path: path.to_string(),
            reason: "compressed or non-PCM format".into(),
        },
        other => AudioError::MalformedContainer {
            path: path.to_string(),
            reason: other.to_string(),
        },
    }
}

/// Averages interleaved frames down to one channel.
pub fn downmix(interleaved: &[f32], channels: usize) -> Vec<f32> {
    match channels {
        1 => interleaved.to_vec(),
        2 => interleaved
            .chunks_exact(2)
            .map(|lr| {
                if lr[0] == lr[1] {
                    lr[0]
                } else {
                    0.5 * (lr[0] + lr[1])
                }
            })
            .collect(),
        n => interleaved
            .chunks_exact(n)
            .map(|f| f.iter().sum::<f32>() / n as f32)
            .collect(),
    }
}

/// Linear-interpolation resampler. Output length is `round(len * to / from)`.
pub fn resample_linear(input: &[f32], from_hz: u32, to_hz: u32) -> Vec<f32> {
    if from_hz == to_hz || input.is_empty() {
        return input.to_vec();
    }
    let out_len =
        ((input.len() as u64 * to_hz as u64 + from_hz as u64 / 2) / from_hz as u64) as usize;
    let ratio = from_hz as f64 / to_hz as f64;
    let last = input.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let lo = (pos.floor() as usize).min(last);
            let hi = (lo + 1).min(last);
            let frac = (pos - lo as f64) as f32;
            if frac == 0.0 {
                input[lo]
            } else {
                input[lo] + (input[hi] - input[lo]) * frac
            }
        })
        .collect()
}

/// Writes a mono clip as 16-bit PCM.
pub fn write_wav_pcm16(path: impl AsRef<Path>, clip: &AudioClip) -> Result<(), AudioError> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let err = |e: hound::Error| AudioError::Write {
        path: path.display().to_string(),
        reason: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(err)?;
    for &s in &clip.samples {
        writer.write_sample(quantize_pcm16(s)).map_err(err)?;
    }
    writer.finalize().map_err(err)
}

pub fn quantize_pcm16(s: f32) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn write_i16(path: &Path, rate: u32, channels: u16, data: &[i16]) {
        let spec = hound::WavSpec {
            channels,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for &s in data {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
    }

    #[test]
    fn silence_loads_as_zeros() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("silence.wav");
        write_i16(&p, 22050, 1, &vec![0; 22050]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples.len(), 22050);
        assert!(clip.samples.iter().all(|&s| s == 0.0));
        assert_eq!(clip.sample_rate_hz, 22050);
        assert_eq!(clip.source_id, "silence");
    }

    #[test]
    fn max_int16_scales_by_two_to_fifteen() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("max.wav");
        write_i16(&p, 22050, 1, &[32767, -32768]);
        let clip = load_wav(&p).unwrap();
        assert_eq!(clip.samples[0], 32767.0 / 32768.0);
        assert_eq!(clip.samples[1], -1.0);
    }

    #[test]
    fn identical_stereo_channels_downmix_exactly() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("st.wav");
        let left: Vec<i16> = (0..1000).map(|i| ((i * 37) % 2000 - 1000) as i16).collect();
        let inter: Vec<i16> = left.iter().flat_map(|&s| [s, s]).collect();
        write_i16(&p, 22050, 2, &inter);
        let clip = load_wav(&p).unwrap();
        let expect: Vec<f32> = left.iter().map(|&s| s as f32 / 32768.0).collect();
        assert_eq!(clip.samples, expect);
    }

    #[test]
    fn float_wav_is_accepted_and_clamped() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 22050,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&p, spec).unwrap();
        for s in [0.25f32, 1.5, -2.0] {
            w.write_sample(s).unwrap();
        }
        w.finalize().unwrap();
        assert_eq!(load_wav(&p).unwrap().samples, vec![0.25, 1.0, -1.0]);
    }

    #[test]
    fn empty_and_garbage_files_are_rejected() {
        let dir = tempdir().unwrap();
        let empty = dir.path().join("empty.wav");
        write_i16(&empty, 22050, 1, &[]);
        assert!(matches!(
            load_wav(&empty),
            Err(AudioError::EmptyAudio { .. })
        ));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"this is not a riff file at all").unwrap();
        assert!(matches!(
            load_wav(&junk),
            Err(AudioError::MalformedContainer { .. })
        ));
    }

    #[test]
    fn compressed_format_tag_is_unsupported() {
        // Minimal RIFF with an A-law (0x0006) fmt chunk.
        let mut b = Vec::new();
        b.extend_from_slice(b"RIFF");
        b.extend_from_slice(&36u32.to_le_bytes());
        b.extend_from_slice(b"WAVEfmt ");
        b.extend_from_slice(&16u32.to_le_bytes());
        b.extend_from_slice(&0x0006u16.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&22050u32.to_le_bytes());
        b.extend_from_slice(&22050u32.to_le_bytes());
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&8u16.to_le_bytes());
        b.extend_from_slice(b"data");
        b.extend_from_slice(&0u32.to_le_bytes());
        let dir = tempdir().unwrap();
        let p = dir.path().join("alaw.wav");
        std::fs::write(&p, b).unwrap();
        assert!(matches!(
            load_wav(&p),
            Err(AudioError::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn out_of_range_rate_is_unsupported() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("hi.wav");
        write_i16(&p, 96000, 1, &[0; 100]);
        assert!(matches!(
            load_wav(&p),
            Err(AudioError::UnsupportedEncoding { .. })
        ));
    }

    #[test]
    fn resampling_preserves_duration() {
        for (len, rate) in [
            (44100usize, 44100u32),
            (16001, 16000),
            (7, 8000),
            (48000 * 3 + 11, 48000),
        ] {
            let input = vec![0.1f32; len];
            let out = resample_linear(&input, rate, CANONICAL_RATE);
            let err = (out.len() as f64 / 22050.0 - len as f64 / rate as f64).abs();
            assert!(err < 1.0 / 22050.0, "len {len} rate {rate}: {err}");
        }
    }

    #[test]
    fn loading_is_deterministic() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("d.wav");
        let data: Vec<i16> = (0..5000)
            .map(|i| ((i * 7919) % 65536 - 32768) as i16)
            .collect();
        write_i16(&p, 32000, 1, &data);
        assert_eq!(load_wav(&p).unwrap(), load_wav(&p).unwrap());
    }
}
