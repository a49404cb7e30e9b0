//! Label-bucket balancing: up-sample sparse KSS ratings, down-sample dense ones.

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::rng::indexed_rng;

use super::windows::WindowSample;

pub trait Labeled {
    fn label(&self) -> f32;
}

impl Labeled for WindowSample {
    fn label(&self) -> f32 {
        self.label
    }
}

/// Rounds half away from zero and maps the label onto a bucket 1..=9.
pub fn bucket_of(label: f32) -> Result<usize> {
    let r = label.round();
    if (1.0..=9.0).contains(&r) {
        Ok(r as usize)
    } else {
        Err(Error::Input(format!("label {label} does not fall in a KSS bucket")))
    }
}

/// Lower-middle median of the non-empty bucket counts.
pub fn balance_target(counts: &[usize]) -> Option<usize> {
    let mut nonempty: Vec<usize> = counts.iter().copied().filter(|&c| c > 0).collect();
    if nonempty.is_empty() {
        return None;
    }
    nonempty.sort_unstable();
    Some(nonempty[(nonempty.len() - 1) / 2])
}

/// Resizes every non-empty bucket to the median bucket count. Oversized buckets
/// keep a seeded subset (original order); undersized ones are repeated whole
/// and topped up with a seeded subset. Output is grouped by bucket, 1 to 9.
pub fn balance<W: Labeled + Clone>(windows: Vec<W>, seed: u64) -> Result<Vec<W>> {
    let mut buckets: Vec<Vec<W>> = vec![Vec::new(); 10];
    for w in windows {
        let b = bucket_of(w.label())?;
        buckets[b].push(w);
    }
    let counts: Vec<usize> = buckets.iter().map(Vec::len).collect();
    let Some(target) = balance_target(&counts) else {
        return Ok(Vec::new());
    };

    let mut out = Vec::with_capacity(target * counts.iter().filter(|&&c| c > 0).count());
    for (label, bucket) in buckets.into_iter().enumerate() {
        let n = bucket.len();
        if n == 0 {
            continue;
        }
        let mut rng = indexed_rng(seed, "balance", label as u64);
        let extra = target % n;
        for _ in 0..target / n {
            out.extend(bucket.iter().cloned());
        }
        if extra > 0 {
            let mut picked = sample(&mut rng, n, extra).into_vec();
            picked.sort_unstable();
            out.extend(picked.into_iter().map(|i| bucket[i].clone()));
        }
    }
    Ok(out)
}

pub fn bucket_counts<W: Labeled>(windows: &[W]) -> Result<[usize; 10]> {
    let mut counts = [0usize; 10];
    for w in windows {
        counts[bucket_of(w.label())?] += 1;
    }
    Ok(counts)
}
