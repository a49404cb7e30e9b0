//! WAV decoding/encoding and integer-factor anti-aliased decimation.

use std::f64::consts::PI;
use std::path::Path;

use crate::error::{Error, Result};

/// Lowest rate we decimate to; narrowband telephony still covers speech up to 4 kHz.
pub const MIN_TARGET_RATE: u32 = 8000;

pub const FIR_TAPS: usize = 63;
/// Cutoff as a fraction of the target Nyquist frequency.
pub const FIR_CUTOFF_FRACTION: f64 = 0.45;

const PCM_SCALE: f32 = 32768.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub id: String,
    /// Mono samples in [-1, 1].
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// KSS rating 1..=9, when known.
    pub label: Option<u8>,
}

impl AudioClip {
    pub fn new(id: impl Into<String>, samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            id: id.into(),
            samples,
            sample_rate,
            label: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
            path: path.to_path_buf(),
            reason: "truncated file".into(),
        },
        hound::Error::IoError(e) => Error::io(path, e),
        hound::Error::FormatError(reason) => Error::Format {
            path: path.to_path_buf(),
            reason: reason.into(),
        },
        hound::Error::Unsupported => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "codec not supported".into(),
        },
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Reads a 16-bit PCM WAV file. Multichannel audio is averaged to mono and
/// each integer sample `v` is mapped to `v / 32768`. The clip id is the file stem.
pub fn decode_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    let mut reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: format!(
                "{}-bit {:?} samples, expected 16-bit integer PCM",
                spec.bits_per_sample, spec.sample_format
            ),
        });
    }
    let channels = usize::from(spec.channels.max(1));
    let raw = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(path, e))?;

    let samples = if channels == 1 {
        raw.iter().map(|&v| f32::from(v) / PCM_SCALE).collect()
    } else {
        raw.chunks_exact(channels)
            .map(|frame| {
                let sum: i32 = frame.iter().map(|&v| i32::from(v)).sum();
                (sum as f32 / channels as f32) / PCM_SCALE
            })
            .collect()
    };
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioClip {
        id,
        samples,
        sample_rate: spec.sample_rate,
        label: None,
    })
}

fn quantize(x: f32) -> i16 {
    (x * PCM_SCALE).round().clamp(-32768.0, 32767.0) as i16
}

/// Writes the clip as 16-bit mono PCM.
pub fn encode_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    {
        let mut w = writer.get_i16_writer(clip.samples.len() as u32);
        for &s in &clip.samples {
            w.write_sample(quantize(s));
        }
        w.flush().map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}

/// Linear-phase Hamming-windowed sinc low-pass, normalized to unit DC gain.
/// `cutoff` is in cycles per sample (0 < cutoff < 0.5).
pub fn lowpass_taps(taps: usize, cutoff: f64) -> Vec<f64> {
    let centre = (taps as f64 - 1.0) / 2.0;
    let denom = (taps as f64 - 1.0).max(1.0);
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let m = n as f64 - centre;
            let sinc = if m == 0.0 {
                2.0 * cutoff
            } else {
                (2.0 * PI * cutoff * m).sin() / (PI * m)
            };
            let window = 0.54 - 0.46 * (2.0 * PI * n as f64 / denom).cos();
            sinc * window
        })
        .collect();
    let sum: f64 = h.iter().sum();
    h.iter_mut().for_each(|c| *c /= sum);
    h
}

/// Integer-factor decimation: anti-alias FIR (zero-padded, centred so the
/// signal is not delayed) followed by keeping every `factor`-th sample.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let from = clip.sample_rate;
    let unsupported = |reason: &str| Error::UnsupportedRate {
        from,
        to: target_rate,
        reason: reason.into(),
    };
    if target_rate == from {
        return Ok(clip.clone());
    }
    if target_rate == 0 || target_rate > from {
        return Err(unsupported("only down-sampling is supported"));
    }
    if target_rate < MIN_TARGET_RATE {
        return Err(unsupported("target rate below 8 kHz"));
    }
    if from % target_rate != 0 {
        return Err(unsupported("rates must differ by an integer factor"));
    }
    let factor = (from / target_rate) as usize;
    let cutoff = FIR_CUTOFF_FRACTION * (f64::from(target_rate) / 2.0) / f64::from(from);
    let taps = lowpass_taps(FIR_TAPS, cutoff);
    let half = FIR_TAPS / 2;
    let x = &clip.samples;
    let out_len = x.len() / factor;

    let samples = (0..out_len)
        .map(|j| {
            let centre = j * factor;
            let mut acc = 0.0f64;
            for (k, &c) in taps.iter().enumerate() {
                // y[n] = sum_k h[k] x[n + half - k]
                let idx = centre as isize + half as isize - k as isize;
                if idx >= 0 && (idx as usize) < x.len() {
                    acc += c * f64::from(x[idx as usize]);
                }
            }
            (acc as f32).clamp(-1.0, 1.0)
        })
        .collect();

    Ok(AudioClip {
        id: clip.id.clone(),
        samples,
        sample_rate: target_rate,
        label: clip.label,
    })
}
