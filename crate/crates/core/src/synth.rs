//! Deterministic synthetic corpus: the KSS label is encoded in a tone frequency.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::audio::{encode_wav, AudioClip, MIN_TARGET_RATE};
use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::rng::{indexed_rng, item_rng};

pub const TONE_AMPLITUDE: f32 = 0.5;
pub const MANIFEST_FILE: &str = "manifest.csv";
/// Highest admissible tone as a fraction of the Nyquist rate at the lowest
/// supported sample rate.
pub const MAX_TONE_FRACTION: f64 = 0.4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub clips_per_label: usize,
    pub duration_mean_s: f64,
    pub duration_std_s: f64,
    pub duration_min_s: f64,
    pub duration_max_s: f64,
    pub base_freq_hz: f64,
    pub freq_step_hz: f64,
    /// Half-width of the uniform noise added to every sample.
    pub noise_floor: f32,
    /// Noise-only lead-in at the start of every clip, counted in its duration.
    pub pause_s: f64,
    pub sample_rate: u32,
    pub seed: u64,
    /// Labels to generate; three labels give the classification variant.
    pub labels: Vec<u8>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            clips_per_label: 20,
            duration_mean_s: 3.87,
            duration_std_s: 0.64,
            duration_min_s: 1.56,
            duration_max_s: 5.00,
            base_freq_hz: 200.0,
            freq_step_hz: 150.0,
            noise_floor: 0.01,
            pause_s: 0.2,
            sample_rate: 16000,
            seed: 0,
            labels: (1..=9).collect(),
        }
    }
}

impl SynthSpec {
    pub fn frequency(&self, label: u8) -> f64 {
        self.base_freq_hz + self.freq_step_hz * f64::from(label - 1)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clips_per_label == 0 {
            return bad("clips_per_label must be at least 1".into());
        }
        if !(self.duration_min_s <= self.duration_mean_s && self.duration_mean_s <= self.duration_max_s)
            || self.duration_min_s <= 0.0
        {
            return bad(format!(
                "duration bounds need 0 < min <= mean <= max, got {} / {} / {}",
                self.duration_min_s, self.duration_mean_s, self.duration_max_s
            ));
        }
        if !(self.duration_std_s >= 0.0) {
            return bad(format!("duration std {} must be >= 0", self.duration_std_s));
        }
        if !(0.0..self.duration_min_s).contains(&self.pause_s) {
            return bad(format!(
                "pause {} s must lie in [0, min duration {})",
                self.pause_s, self.duration_min_s
            ));
        }
        if !(self.noise_floor >= 0.0 && self.noise_floor <= 0.5) {
            return bad(format!("noise floor {} must lie in [0, 0.5]", self.noise_floor));
        }
        if self.sample_rate < MIN_TARGET_RATE {
            return bad(format!("sample rate {} is below {MIN_TARGET_RATE}", self.sample_rate));
        }
        if self.labels.is_empty() {
            return bad("at least one label is required".into());
        }
        let mut seen = [false; 10];
        let limit = MAX_TONE_FRACTION * f64::from(MIN_TARGET_RATE) / 2.0;
        for &k in &self.labels {
            if !(1..=9).contains(&k) || std::mem::replace(&mut seen[usize::from(k)], true) {
                return bad(format!("labels must be distinct values in 1..=9, got {k}"));
            }
            let f = self.frequency(k);
            if !(f > 0.0 && f < limit) {
                return bad(format!("tone for label {k} is {f} Hz, outside (0, {limit}) Hz"));
            }
        }
        Ok(())
    }
}

/// Relative path of a generated clip inside the corpus directory.
pub fn clip_path(label: u8, index: usize) -> PathBuf {
    PathBuf::from("wav").join(format!("k{label}_{index:04}.wav"))
}

/// Renders one clip; `index` is its position within the label.
pub fn synthesize_clip(spec: &SynthSpec, label: u8, index: usize) -> Result<AudioClip> {
    let mut rng = item_rng(spec.seed, format!("clip/{label}/{index}").as_bytes());
    let normal = Normal::new(spec.duration_mean_s, spec.duration_std_s)
        .map_err(|e| Error::Config(format!("duration distribution: {e}")))?;
    let duration = normal
        .sample(&mut rng)
        .clamp(spec.duration_min_s, spec.duration_max_s);
    let sr = f64::from(spec.sample_rate);
    let len = (duration * sr).round() as usize;
    let pause = (spec.pause_s * sr).round() as usize;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let w = std::f64::consts::TAU * spec.frequency(label) / sr;
    let floor = spec.noise_floor;
    let samples = (0..len)
        .map(|n| {
            let noise = if floor > 0.0 { rng.random_range(-floor..=floor) } else { 0.0 };
            let tone = if n < pause {
                0.0
            } else {
                TONE_AMPLITUDE * (w * (n - pause) as f64 + phase).sin() as f32
            };
            tone + noise
        })
        .collect();
    let id = clip_path(label, index).to_string_lossy().into_owned();
    Ok(AudioClip::new(id, samples, spec.sample_rate).with_label(label))
}

/// Split assignment within one label: a seeded permutation cut 40/30/30.
pub fn assign_splits(spec: &SynthSpec, label: u8) -> Vec<Split> {
    let n = spec.clips_per_label;
    let n_train = (0.4 * n as f64).round() as usize;
    let n_dev = ((0.3 * n as f64).round() as usize).min(n - n_train);
    let mut splits: Vec<Split> = (0..n)
        .map(|i| match i {
            i if i < n_train => Split::Train,
            i if i < n_train + n_dev => Split::Dev,
            _ => Split::Test,
        })
        .collect();
    splits.shuffle(&mut indexed_rng(spec.seed, "split", u64::from(label)));
    splits
}

/// Writes every clip under `out_dir/wav/` plus `out_dir/manifest.csv`.
pub fn generate_corpus(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    let wav_dir = out_dir.join("wav");
    std::fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
    let mut entries = Vec::with_capacity(spec.labels.len() * spec.clips_per_label);
    for &label in &spec.labels {
        for (index, split) in assign_splits(spec, label).into_iter().enumerate() {
            let clip = synthesize_clip(spec, label, index)?;
            let file = clip_path(label, index);
            encode_wav(&clip, out_dir.join(&file))?;
            entries.push(ManifestEntry { file, label, split });
        }
    }
    let manifest = Manifest { entries };
    manifest.write(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
