//! From labelled clips to balanced, augmented training windows.

mod augment;
mod balance;
mod manifest;
mod set;
mod windows;

use std::path::Path;

pub use augment::{
    extract_background, noisy_label, overlay_noise, reverse_augment, AugmentConfig,
};
pub use balance::{balance, balance_target, bucket_counts, bucket_of, Labeled};
pub use manifest::{
    corpus_durations, corpus_stats, load_manifest, render_stats_table, stats_table, validate_label,
    CorpusStats, Manifest, ManifestEntry, Split,
};
pub use set::{Variant, WindowRef, WindowSet, WINDOW_FILE_MAGIC};
pub use windows::{extract_windows, WindowSample, WindowingConfig};

use crate::audio::{decode_wav, resample, AudioClip};
use crate::error::Result;

/// Decodes every clip of `split`, attaches manifest labels, and decimates to
/// `target_rate`. Clip ids are the manifest paths.
pub fn load_split(
    manifest: &Manifest,
    audio_root: impl AsRef<Path>,
    split: Split,
    target_rate: u32,
) -> Result<Vec<AudioClip>> {
    let root = audio_root.as_ref();
    manifest
        .split(split)
        .map(|entry| {
            let mut clip = decode_wav(root.join(&entry.file))?;
            clip.id = entry.file.to_string_lossy().into_owned();
            clip.label = Some(entry.label);
            resample(&clip, target_rate)
        })
        .collect()
}

/// Training windows: extract, balance (optional), then augment.
pub fn training_windows(
    clips: Vec<AudioClip>,
    cfg: &WindowingConfig,
    augment: &AugmentConfig,
    balance_buckets: bool,
    seed: u64,
) -> Result<WindowSet> {
    let mut set = WindowSet::from_clips(clips, cfg)?;
    if balance_buckets {
        set = set.balanced(seed)?;
    }
    if augment.any() {
        set = set.augmented(augment, seed)?;
    }
    Ok(set)
}
