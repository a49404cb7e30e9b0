//! Lazily materialized window collections.
//!
//! A 1.5 s window at 16 kHz is 96 KB of f32; the windows of a few hundred clips
//! would not fit in memory, so a [`WindowSet`] stores only (clip, offset,
//! label, variant) records and cuts samples out of the source clips on demand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::rng::indexed_rng;

use super::augment::{extract_background, noisy_label, overlay_in_place, AugmentConfig};
use super::balance::{balance, Labeled};
use super::windows::{copy_window, WindowSample, WindowingConfig};

pub const WINDOW_FILE_MAGIC: &[u8; 4] = b"RVW1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variant {
    Original,
    Reversed,
    /// Background noise read cyclically from `noise_start`, scaled by `alpha`.
    Overlay { noise_start: usize, alpha: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowRef {
    pub source: usize,
    pub start: usize,
    pub label: f32,
    pub variant: Variant,
}

impl Labeled for WindowRef {
    fn label(&self) -> f32 {
        self.label
    }
}

#[derive(Debug, Clone)]
struct Source {
    id: String,
    samples: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct WindowSet {
    window_len: usize,
    sample_rate: u32,
    sources: Vec<Source>,
    background: Vec<f32>,
    items: Vec<WindowRef>,
}

impl WindowSet {
    /// Plain sliding windows over labelled clips, in clip order.
    pub fn from_clips(clips: Vec<AudioClip>, cfg: &WindowingConfig) -> Result<Self> {
        cfg.validate()?;
        let window_len = cfg.window_len()?;
        let mut sources = Vec::with_capacity(clips.len());
        let mut items = Vec::new();
        for clip in clips {
            if clip.sample_rate != cfg.sample_rate {
                return Err(Error::Config(format!(
                    "clip {} is at {} Hz but windows are configured for {} Hz",
                    clip.id, clip.sample_rate, cfg.sample_rate
                )));
            }
            if clip.len() < window_len && !cfg.pad_short {
                return Err(Error::ClipTooShort {
                    id: clip.id,
                    len: clip.samples.len(),
                    window: window_len,
                });
            }
            let label = clip
                .label
                .ok_or_else(|| Error::Input(format!("clip {} has no label", clip.id)))?;
            let source = sources.len();
            items.extend(cfg.offsets(clip.len())?.into_iter().map(|start| WindowRef {
                source,
                start,
                label: f32::from(label),
                variant: Variant::Original,
            }));
            sources.push(Source {
                id: clip.id,
                samples: clip.samples,
            });
        }
        Ok(Self {
            window_len,
            sample_rate: cfg.sample_rate,
            sources,
            background: Vec::new(),
            items,
        })
    }

    /// Wraps already-materialized windows; each window becomes its own source.
    pub fn from_windows(windows: Vec<WindowSample>, sample_rate: u32) -> Result<Self> {
        let window_len = windows.first().map_or(0, |w| w.samples.len());
        let mut sources = Vec::with_capacity(windows.len());
        let mut items = Vec::with_capacity(windows.len());
        for (i, w) in windows.into_iter().enumerate() {
            if w.samples.len() != window_len {
                return Err(Error::Length(format!(
                    "window {i} has {} samples, expected {window_len}",
                    w.samples.len()
                )));
            }
            items.push(WindowRef {
                source: i,
                start: 0,
                label: w.label,
                variant: Variant::Original,
            });
            sources.push(Source {
                id: w.source_id,
                samples: w.samples,
            });
        }
        Ok(Self {
            window_len,
            sample_rate,
            sources,
            background: Vec::new(),
            items,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn items(&self) -> &[WindowRef] {
        &self.items
    }

    pub fn label(&self, i: usize) -> f32 {
        self.items[i].label
    }

    pub fn labels(&self) -> Vec<f32> {
        self.items.iter().map(|w| w.label).collect()
    }

    pub fn source_id(&self, i: usize) -> &str {
        &self.sources[self.items[i].source].id
    }

    pub fn background_len(&self) -> usize {
        self.background.len()
    }

    /// Writes window `i` into `out` (length `window_len`).
    pub fn fill(&self, i: usize, out: &mut [f32]) {
        let item = &self.items[i];
        copy_window(&self.sources[item.source].samples, item.start, out);
        match item.variant {
            Variant::Original => {}
            Variant::Reversed => out.reverse(),
            Variant::Overlay { noise_start, alpha } => {
                let bg = &self.background;
                let noise: Vec<f32> = (0..out.len())
                    .map(|k| bg[(noise_start + k) % bg.len()])
                    .collect();
                overlay_in_place(out, &noise, alpha);
            }
        }
    }

    pub fn window(&self, i: usize) -> WindowSample {
        let mut samples = vec![0.0; self.window_len];
        self.fill(i, &mut samples);
        let item = &self.items[i];
        WindowSample {
            samples,
            label: item.label,
            source_id: self.sources[item.source].id.clone(),
            offset_s: item.start as f64 / f64::from(self.sample_rate.max(1)),
        }
    }

    /// Indices of windows grouped by source, in first-appearance order.
    pub fn windows_by_source(&self) -> Vec<(String, Vec<usize>)> {
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); self.sources.len()];
        let mut order = Vec::new();
        for (i, item) in self.items.iter().enumerate() {
            if groups[item.source].is_empty() {
                order.push(item.source);
            }
            groups[item.source].push(i);
        }
        order
            .into_iter()
            .map(|s| (self.sources[s].id.clone(), std::mem::take(&mut groups[s])))
            .collect()
    }

    pub fn balanced(mut self, seed: u64) -> Result<Self> {
        self.items = balance(std::mem::take(&mut self.items), seed)?;
        Ok(self)
    }

    /// Collects background frames from every source clip.
    pub fn collect_background(&mut self, threshold: f32, frame_s: f64) {
        self.background = self
            .sources
            .iter()
            .flat_map(|s| {
                let clip = AudioClip::new(s.id.clone(), s.samples.clone(), self.sample_rate);
                extract_background(&clip, threshold, frame_s)
            })
            .collect();
    }

    /// Appends one modified copy of every current window per enabled
    /// technique. Randomness is keyed by the window's position, so duplicates
    /// produced by balancing still get distinct noise.
    pub fn augmented(mut self, cfg: &AugmentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let originals = self.items.clone();
        if cfg.reverse {
            self.items.extend(originals.iter().map(|w| WindowRef {
                variant: Variant::Reversed,
                ..*w
            }));
        }
        if cfg.overlay {
            if self.background.is_empty() {
                self.collect_background(cfg.background_threshold, cfg.background_frame_s);
            }
            if self.background.is_empty() {
                return Err(Error::Input(format!(
                    "no background frames below RMS {} to overlay",
                    cfg.background_threshold
                )));
            }
            let bg_len = self.background.len();
            self.items.extend(originals.iter().enumerate().map(|(i, w)| {
                let mut rng = indexed_rng(seed, "overlay", i as u64);
                let noise_start = rng.random_range(0..bg_len);
                let alpha = if cfg.overlay_alpha_max > cfg.overlay_alpha_min {
                    rng.random_range(cfg.overlay_alpha_min..=cfg.overlay_alpha_max)
                } else {
                    cfg.overlay_alpha_min
                };
                WindowRef {
                    variant: Variant::Overlay { noise_start, alpha },
                    ..*w
                }
            }));
        }
        if cfg.noisy_labels {
            self.items.extend(originals.iter().enumerate().map(|(i, w)| {
                let mut rng = indexed_rng(seed, "label-noise", i as u64);
                WindowRef {
                    label: noisy_label(w.label, cfg.label_sigma, &mut rng),
                    ..*w
                }
            }));
        }
        Ok(self)
    }

    /// Streams the set to an `RVW1` file: magic, u32 count, u32 window
    /// length, then per window an f32 label followed by the f32 samples, all
    /// little-endian.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        let count = u32::try_from(self.len())
            .map_err(|_| Error::Length("too many windows for a u32 count".into()))?;
        w.write_all(WINDOW_FILE_MAGIC).map_err(io)?;
        w.write_all(&count.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.window_len as u32).to_le_bytes()).map_err(io)?;
        let mut buf = vec![0.0f32; self.window_len];
        for i in 0..self.len() {
            self.fill(i, &mut buf);
            w.write_all(&self.label(i).to_le_bytes()).map_err(io)?;
            for s in &buf {
                w.write_all(&s.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>, sample_rate: u32) -> Result<Self> {
        let path = path.as_ref();
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| corrupt("missing header"))?;
        if &word != WINDOW_FILE_MAGIC {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: "bad magic, expected RVW1".into(),
            });
        }
        let mut read_u32 = |r: &mut BufReader<File>| -> Result<u32> {
            r.read_exact(&mut word).map_err(|_| corrupt("truncated header"))?;
            Ok(u32::from_le_bytes(word))
        };
        let count = read_u32(&mut r)? as usize;
        let len = read_u32(&mut r)? as usize;
        let mut windows = Vec::with_capacity(count);
        let mut bytes = vec![0u8; 4 * (len + 1)];
        for i in 0..count {
            r.read_exact(&mut bytes).map_err(|_| corrupt("truncated window data"))?;
            let mut floats = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
            let label = floats.next().unwrap_or(0.0);
            windows.push(WindowSample {
                samples: floats.collect(),
                label,
                source_id: format!("w{i}"),
                offset_s: 0.0,
            });
        }
        let mut set = Self::from_windows(windows, sample_rate)?;
        set.window_len = len;
        Ok(set)
    }
}
