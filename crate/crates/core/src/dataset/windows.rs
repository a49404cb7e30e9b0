use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Sliding-window geometry. Window and stride must be whole sample counts at
/// `sample_rate`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowingConfig {
    pub window_size_s: f64,
    pub stride_s: f64,
    pub sample_rate: u32,
    /// Emit a single zero-padded window for clips shorter than the window
    /// instead of failing.
    pub pad_short: bool,
}

impl Default for WindowingConfig {
    fn default() -> Self {
        Self {
            window_size_s: 1.5,
            stride_s: 0.1,
            sample_rate: 16000,
            pad_short: false,
        }
    }
}

fn whole_samples(seconds: f64, rate: u32, what: &str) -> Result<usize> {
    if !(seconds > 0.0) || !seconds.is_finite() {
        return Err(Error::Config(format!("{what} must be positive, got {seconds}")));
    }
    let exact = seconds * f64::from(rate);
    let rounded = exact.round();
    if (exact - rounded).abs() > 1e-6 * exact.max(1.0) || rounded < 1.0 {
        return Err(Error::Config(format!(
            "{what} of {seconds} s is not a whole number of samples at {rate} Hz"
        )));
    }
    Ok(rounded as usize)
}

impl WindowingConfig {
    pub fn new(window_size_s: f64, stride_s: f64, sample_rate: u32) -> Self {
        Self {
            window_size_s,
            stride_s,
            sample_rate,
            pad_short: false,
        }
    }

    pub fn window_len(&self) -> Result<usize> {
        whole_samples(self.window_size_s, self.sample_rate, "window size")
    }

    pub fn stride_len(&self) -> Result<usize> {
        whole_samples(self.stride_s, self.sample_rate, "stride")
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        self.window_len()?;
        self.stride_len()?;
        Ok(())
    }

    /// Start indices of every window for a clip of `len` samples:
    /// `max(1, floor((len - w) / s))` windows at multiples of the stride.
    pub fn offsets(&self, len: usize) -> Result<Vec<usize>> {
        let w = self.window_len()?;
        let s = self.stride_len()?;
        if len < w {
            return Ok(if self.pad_short { vec![0] } else { Vec::new() });
        }
        let count = ((len - w) / s).max(1);
        Ok((0..count).map(|i| i * s).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    pub samples: Vec<f32>,
    /// KSS label, possibly noise-perturbed.
    pub label: f32,
    pub source_id: String,
    pub offset_s: f64,
}

pub(crate) fn copy_window(src: &[f32], start: usize, out: &mut [f32]) {
    let avail = src.len().saturating_sub(start).min(out.len());
    out[..avail].copy_from_slice(&src[start..start + avail]);
    out[avail..].fill(0.0);
}

/// Cuts fixed-length windows from a labelled clip. Every window inherits the
/// clip label.
pub fn extract_windows(clip: &AudioClip, cfg: &WindowingConfig) -> Result<Vec<WindowSample>> {
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Config(format!(
            "clip {} is at {} Hz but windows are configured for {} Hz",
            clip.id, clip.sample_rate, cfg.sample_rate
        )));
    }
    let w = cfg.window_len()?;
    if clip.len() < w && !cfg.pad_short {
        return Err(Error::ClipTooShort {
            id: clip.id.clone(),
            len: clip.len(),
            window: w,
        });
    }
    let label = clip
        .label
        .ok_or_else(|| Error::Input(format!("clip {} has no label", clip.id)))?;
    let rate = f64::from(cfg.sample_rate);
    Ok(cfg
        .offsets(clip.len())?
        .into_iter()
        .map(|start| {
            let mut samples = vec![0.0; w];
            copy_window(&clip.samples, start, &mut samples);
            WindowSample {
                samples,
                label: f32::from(label),
                source_id: clip.id.clone(),
                offset_s: start as f64 / rate,
            }
        })
        .collect())
}
