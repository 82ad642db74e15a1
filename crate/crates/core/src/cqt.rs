//! Constant-Q log spectrogram: 7 octaves of semitone bins from C1, computed
//! with a direct windowed inner product per bin, plus the cached feature file.

use std::f64::consts::PI;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng as _;
use thiserror::Error;

use crate::audio::AudioClip;
use crate::seed;

/// Equal-temperament C1 with A4 = 440 Hz.
pub const C1_HZ: f64 = 32.703_195_662_574_83;
pub const BINS_PER_OCTAVE: usize = 12;
pub const N_BINS: usize = 84;
pub const DEFAULT_HOP: usize = 5120;
pub const DEFAULT_FRAMES: usize = 130;
/// Log floor in dB below the per-spectrogram maximum.
pub const FLOOR_DB: f32 = -80.0;

const MAGIC: &[u8; 4] = b"CQT1";
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum CqtError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("clip {source_id} too short: {got} samples, longest analysis window needs {needed}")]
    ClipTooShort {
        source_id: String,
        needed: usize,
        got: usize,
    },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a CQT1 feature file")]
    FormatVersionMismatch { path: String },
    #[error("{path}: checksum mismatch or truncated payload")]
    ChecksumMismatch { path: String },
}

/// Analysis parameters. The defaults are the pipeline's feature settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CqtParams {
    pub fmin_hz: f64,
    pub n_bins: usize,
    pub bins_per_octave: usize,
    pub hop_samples: usize,
}

impl Default for CqtParams {
    fn default() -> Self {
        Self {
            fmin_hz: C1_HZ,
            n_bins: N_BINS,
            bins_per_octave: BINS_PER_OCTAVE,
            hop_samples: DEFAULT_HOP,
        }
    }
}

impl CqtParams {
    pub fn with_hop(hop_samples: usize) -> Self {
        Self {
            hop_samples,
            ..Self::default()
        }
    }

    /// Quality factor shared by every bin.
    pub fn q(&self) -> f64 {
        1.0 / (2f64.powf(1.0 / self.bins_per_octave as f64) - 1.0)
    }

    /// Window length of bin `k` in samples.
    pub fn window_len(&self, k: usize, sample_rate: f64) -> Result<usize, CqtError> {
        let freqs = bin_frequencies(self.fmin_hz, self.n_bins, self.bins_per_octave)?;
        Ok(window_len_for(self.q(), sample_rate, freqs[k]))
    }

    fn validate(&self, sample_rate: f64) -> Result<Vec<f64>, CqtError> {
        if self.hop_samples == 0 {
            return Err(CqtError::InvalidParam("hop must be positive".into()));
        }
        let freqs = bin_frequencies(self.fmin_hz, self.n_bins, self.bins_per_octave)?;
        let top = *freqs.last().expect("n_bins >= 1");
        if top >= sample_rate / 2.0 {
            return Err(CqtError::InvalidParam(format!(
                "top bin {top:.1} Hz is above Nyquist for {sample_rate} Hz"
            )));
        }
        Ok(freqs)
    }
}

fn window_len_for(q: f64, sample_rate: f64, freq: f64) -> usize {
    (q * sample_rate / freq).ceil() as usize
}

/// Geometrically spaced bin centers `fmin * 2^(k / bins_per_octave)`.
pub fn bin_frequencies(
    fmin_hz: f64,
    n_bins: usize,
    bins_per_octave: usize,
) -> Result<Vec<f64>, CqtError> {
    if !(fmin_hz > 0.0) || !fmin_hz.is_finite() {
        return Err(CqtError::InvalidParam(format!(
            "fmin must be positive, got {fmin_hz}"
        )));
    }
    if n_bins == 0 || bins_per_octave == 0 {
        return Err(CqtError::InvalidParam(
            "n_bins and bins_per_octave must be at least 1".into(),
        ));
    }
    Ok((0..n_bins)
        .map(|k| fmin_hz * 2f64.powf(k as f64 / bins_per_octave as f64))
        .collect())
}

/// Log-magnitude constant-Q spectrogram, `n_bins` rows by `n_frames` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct CqtSpectrogram {
    /// Row-major `[n_bins][n_frames]`, dB relative to the spectrogram maximum.
    pub data: Vec<f32>,
    pub n_bins: usize,
    pub n_frames: usize,
    pub hop_seconds: f64,
    pub fmin_hz: f64,
    pub bins_per_octave: usize,
    pub source_id: String,
}

impl CqtSpectrogram {
    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.data[bin * self.n_frames + frame]
    }

    pub fn row(&self, bin: usize) -> &[f32] {
        &self.data[bin * self.n_frames..(bin + 1) * self.n_frames]
    }

    /// Mean level of each bin across frames.
    pub fn mean_per_bin(&self) -> Vec<f64> {
        (0..self.n_bins)
            .map(|k| self.row(k).iter().map(|&v| v as f64).sum::<f64>() / self.n_frames as f64)
            .collect()
    }

    /// Bin with the highest mean level.
    pub fn argmax_bin(&self) -> usize {
        argmax(&self.mean_per_bin())
    }
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Precomputed complex kernel for one bin: windowed, scaled by 1/N.
struct BinKernel {
    len: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

impl BinKernel {
    fn new(freq: f64, len: usize, sample_rate: f64) -> Self {
        let norm = 1.0 / len as f64;
        let omega = 2.0 * PI * freq / sample_rate;
        let mut re = Vec::with_capacity(len);
        let mut im = Vec::with_capacity(len);
        for n in 0..len {
            let w = hann(n, len) * norm;
            let (s, c) = (omega * n as f64).sin_cos();
            re.push(w * c);
            im.push(-w * s);
        }
        Self { len, re, im }
    }

    fn magnitude_at(&self, signal: &[f64], center: usize) -> f64 {
        // Window starts half a window before the frame center; outside samples are zero.
        let start = center as isize - (self.len / 2) as isize;
        let lo = (-start).max(0) as usize;
        let hi = (signal.len() as isize - start).clamp(0, self.len as isize) as usize;
        let (mut acc_re, mut acc_im) = (0.0, 0.0);
        if lo < hi {
            let seg = &signal[(start + lo as isize) as usize..(start + hi as isize) as usize];
            for ((x, r), i) in seg.iter().zip(&self.re[lo..hi]).zip(&self.im[lo..hi]) {
                acc_re += x * r;
                acc_im += x * i;
            }
        }
        acc_re.hypot(acc_im)
    }
}

/// Periodic Hann window value.
pub(crate) fn hann(n: usize, len: usize) -> f64 {
    0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos()
}

/// Number of frames for a signal of `len` samples: frames are centered at `t * hop`.
pub fn frame_count(len: usize, hop: usize) -> usize {
    len.div_ceil(hop).max(1)
}

/// Raw constant-Q magnitudes `|X_k(t)|`, row-major `[n_bins][n_frames]`, before
/// any log scaling or normalization.
pub fn cqt_magnitudes(
    samples: &[f32],
    sample_rate: u32,
    params: &CqtParams,
) -> Result<(Vec<f64>, usize), CqtError> {
    let sr = sample_rate as f64;
    let freqs = params.validate(sr)?;
    let q = params.q();
    let longest = window_len_for(q, sr, freqs[0]);
    if samples.len() < longest {
        return Err(CqtError::ClipTooShort {
            source_id: String::new(),
            needed: longest,
            got: samples.len(),
        });
    }
    let signal: Vec<f64> = samples.iter().map(|&s| s as f64).collect();
    let n_frames = frame_count(signal.len(), params.hop_samples);
    let mut out = vec![0.0; params.n_bins * n_frames];
    for (k, &f) in freqs.iter().enumerate() {
        let kernel = BinKernel::new(f, window_len_for(q, sr, f), sr);
        let row = &mut out[k * n_frames..(k + 1) * n_frames];
        for (t, cell) in row.iter_mut().enumerate() {
            *cell = kernel.magnitude_at(&signal, t * params.hop_samples);
        }
    }
    Ok((out, n_frames))
}

/// Converts raw magnitudes to dB relative to their maximum, floored at [`FLOOR_DB`].
pub fn log_normalize(magnitudes: &[f64]) -> Vec<f32> {
    let peak = magnitudes.iter().cloned().fold(0.0f64, f64::max);
    if !(peak > 0.0) {
        return vec![FLOOR_DB; magnitudes.len()];
    }
    magnitudes
        .iter()
        .map(|&m| {
            let db = 20.0 * (m / peak).log10();
            if db.is_finite() {
                (db as f32).max(FLOOR_DB)
            } else {
                FLOOR_DB
            }
        })
        .collect()
}

/// Computes the normalized log-magnitude CQT of a canonical clip.
pub fn compute_cqt(clip: &AudioClip, params: &CqtParams) -> Result<CqtSpectrogram, CqtError> {
    let (mags, n_frames) =
        cqt_magnitudes(&clip.samples, clip.sample_rate_hz, params).map_err(|e| match e {
            CqtError::ClipTooShort { needed, got, .. } => CqtError::ClipTooShort {
                source_id: clip.source_id.clone(),
                needed,
                got,
            },
            other => other,
        })?;
    Ok(CqtSpectrogram {
        data: log_normalize(&mags),
        n_bins: params.n_bins,
        n_frames,
        hop_seconds: params.hop_samples as f64 / clip.sample_rate_hz as f64,
        fmin_hz: params.fmin_hz,
        bins_per_octave: params.bins_per_octave,
        source_id: clip.source_id.clone(),
    })
}

/// Forces the spectrogram to `target_frames` columns: a seeded random contiguous
/// crop when longer, right-padding with the log floor when shorter.
pub fn crop_or_pad(spec: &CqtSpectrogram, target_frames: usize, rng_seed: u64) -> CqtSpectrogram {
    let target = target_frames.max(1);
    let t = spec.n_frames;
    let start = if t > target {
        seed::rng(rng_seed).random_range(0..=t - target)
    } else {
        0
    };
    let mut data = Vec::with_capacity(spec.n_bins * target);
    for k in 0..spec.n_bins {
        let row = spec.row(k);
        let take = &row[start..(start + target).min(t)];
        data.extend_from_slice(take);
        data.extend(std::iter::repeat_n(FLOOR_DB, target - take.len()));
    }
    CqtSpectrogram {
        data,
        n_frames: target,
        ..spec.clone()
    }
}

/// Crop start chosen by [`crop_or_pad`] for a spectrogram of `n_frames` columns.
pub fn crop_start(n_frames: usize, target_frames: usize, rng_seed: u64) -> usize {
    if n_frames > target_frames {
        seed::rng(rng_seed).random_range(0..=n_frames - target_frames)
    } else {
        0
    }
}

fn encode(spec: &CqtSpectrogram) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + spec.data.len() * 4 + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(spec.n_bins as u32).to_le_bytes());
    buf.extend_from_slice(&(spec.n_frames as u32).to_le_bytes());
    buf.extend_from_slice(&spec.hop_seconds.to_le_bytes());
    buf.extend_from_slice(&spec.fmin_hz.to_le_bytes());
    for v in &spec.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf[4..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Writes a feature file atomically (temp file then rename).
pub fn save_cqt(spec: &CqtSpectrogram, path: impl AsRef<Path>) -> Result<(), CqtError> {
    let path = path.as_ref();
    let io = |source| CqtError::IoFailure {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("cqt.tmp");
    {
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(&encode(spec)).map_err(io)?;
        f.sync_all().map_err(io)?;
    }
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_cqt(path: impl AsRef<Path>) -> Result<CqtSpectrogram, CqtError> {
    let path = path.as_ref();
    let shown = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CqtError::IoFailure {
        path: shown.clone(),
        source,
    })?;
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&bytes, &shown, source_id)
}

fn decode(bytes: &[u8], shown: &str, source_id: String) -> Result<CqtSpectrogram, CqtError> {
    let checksum = || CqtError::ChecksumMismatch {
        path: shown.to_string(),
    };
    if bytes.len() < MAGIC.len() {
        return if MAGIC.starts_with(bytes) {
            Err(checksum())
        } else {
            Err(CqtError::FormatVersionMismatch {
                path: shown.to_string(),
            })
        };
    }
    if &bytes[..4] != MAGIC {
        return Err(CqtError::FormatVersionMismatch {
            path: shown.to_string(),
        });
    }
    if bytes.len() < HEADER_LEN + 4 {
        return Err(checksum());
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let n_bins = u32_at(4) as usize;
    let n_frames = u32_at(8) as usize;
    let cells = n_bins.checked_mul(n_frames).ok_or_else(checksum)?;
    let expected = cells
        .checked_mul(4)
        .and_then(|d| d.checked_add(HEADER_LEN + 4))
        .ok_or_else(checksum)?;
    if bytes.len() != expected {
        return Err(checksum());
    }
    let payload_end = expected - 4;
    if crc32fast::hash(&bytes[4..payload_end]) != u32_at(payload_end) {
        return Err(checksum());
    }
    let data = bytes[HEADER_LEN..payload_end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CqtSpectrogram {
        data,
        n_bins,
        n_frames,
        hop_seconds: f64_at(12),
        fmin_hz: f64_at(20),
        bins_per_octave: BINS_PER_OCTAVE,
        source_id,
    })
}
