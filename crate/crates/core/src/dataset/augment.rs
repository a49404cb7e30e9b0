use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

use super::windows::WindowSample;

/// Which additive augmentations to apply. Each enabled technique adds one
/// modified copy of every original window; techniques are never combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub reverse: bool,
    pub overlay: bool,
    pub noisy_labels: bool,
    pub label_sigma: f32,
    pub overlay_alpha_min: f32,
    pub overlay_alpha_max: f32,
    /// RMS gate (full scale) below which a frame counts as background.
    pub background_threshold: f32,
    pub background_frame_s: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            reverse: false,
            overlay: false,
            noisy_labels: false,
            label_sigma: 0.5,
            overlay_alpha_min: 0.1,
            overlay_alpha_max: 0.3,
            background_threshold: 0.02,
            background_frame_s: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn any(&self) -> bool {
        self.reverse || self.overlay || self.noisy_labels
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_sigma >= 0.0) {
            return Err(Error::Config("label sigma must be non-negative".into()));
        }
        if !(0.0 <= self.overlay_alpha_min
            && self.overlay_alpha_min <= self.overlay_alpha_max
            && self.overlay_alpha_max <= 1.0)
        {
            return Err(Error::Config(
                "overlay alpha range must satisfy 0 <= min <= max <= 1".into(),
            ));
        }
        if !(self.background_frame_s > 0.0) {
            return Err(Error::Config("background frame length must be positive".into()));
        }
        Ok(())
    }
}

pub fn reverse_augment(window: &WindowSample) -> WindowSample {
    let mut out = window.clone();
    out.samples.reverse();
    out
}

pub(crate) fn overlay_in_place(samples: &mut [f32], noise: &[f32], alpha: f32) {
    for (s, &n) in samples.iter_mut().zip(noise) {
        *s = (*s + alpha * n).clamp(-1.0, 1.0);
    }
}

/// `out[i] = clamp(window[i] + alpha * noise[i], -1, 1)`.
pub fn overlay_noise(window: &WindowSample, noise: &[f32], alpha: f32) -> Result<WindowSample> {
    if noise.len() < window.samples.len() {
        return Err(Error::Length(format!(
            "noise has {} samples, window needs {}",
            noise.len(),
            window.samples.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("mixing coefficient {alpha} outside [0, 1]")));
    }
    let mut out = window.clone();
    overlay_in_place(&mut out.samples, noise, alpha);
    Ok(out)
}

/// Concatenates every frame whose RMS is below `energy_threshold`. The final
/// partial frame is judged on its own samples.
pub fn extract_background(clip: &AudioClip, energy_threshold: f32, frame_s: f64) -> Vec<f32> {
    let frame = ((frame_s * f64::from(clip.sample_rate)).round() as usize).max(1);
    clip.samples
        .chunks(frame)
        .filter(|chunk| {
            let ms = chunk.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>() / chunk.len() as f64;
            ms.sqrt() < f64::from(energy_threshold)
        })
        .flatten()
        .copied()
        .collect()
}

/// `label + N(0, sigma)`, clamped to the KSS range.
pub fn noisy_label<R: Rng + ?Sized>(label: f32, sigma: f32, rng: &mut R) -> f32 {
    if sigma <= 0.0 {
        return label;
    }
    let normal = Normal::new(0.0f64, f64::from(sigma)).expect("finite positive sigma");
    (f64::from(label) + normal.sample(rng)).clamp(1.0, 9.0) as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn win(samples: Vec<f32>) -> WindowSample {
        WindowSample {
            samples,
            label: 3.0,
            source_id: "s".into(),
            offset_s: 0.0,
        }
    }

    #[test]
    fn reverse_examples() {
        let w = win(vec![0.1, 0.2, 0.3]);
        let r = reverse_augment(&w);
        assert_eq!(r.samples, vec![0.3, 0.2, 0.1]);
        assert_eq!((r.label, r.source_id.as_str()), (3.0, "s"));
        assert_eq!(reverse_augment(&r), w);
        let pal = win(vec![0.1, 0.5, 0.1]);
        assert_eq!(reverse_augment(&pal), pal);
    }

    #[test]
    fn overlay_examples() {
        let w = win(vec![0.3, -0.2]);
        assert_eq!(overlay_noise(&w, &[0.9, 0.9], 0.0).unwrap(), w);

        let z = win(vec![0.0; 4]);
        let o = overlay_noise(&z, &[0.5; 4], 0.2).unwrap();
        assert!(o.samples.iter().all(|&x| (x - 0.1).abs() < 1e-7));

        let loud = win(vec![0.95]);
        assert_eq!(overlay_noise(&loud, &[0.9], 0.5).unwrap().samples, vec![1.0]);
    }

    #[test]
    fn overlay_rejects_short_noise() {
        let w = win(vec![0.0; 4]);
        assert!(matches!(overlay_noise(&w, &[0.1; 3], 0.2), Err(Error::Length(_))));
    }

    #[test]
    fn background_of_silence_and_square() {
        let silent = AudioClip::new("s", vec![0.0; 1600], 16000);
        assert_eq!(extract_background(&silent, 0.01, 0.01).len(), 1600);
        let square = AudioClip::new(
            "q",
            (0..1600).map(|i| if (i / 8) % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            16000,
        );
        assert!(extract_background(&square, 0.01, 0.01).is_empty());
    }

    #[test]
    fn label_noise_edges() {
        let mut rng = seeded(1);
        assert_eq!(noisy_label(6.0, 0.0, &mut rng), 6.0);
        for _ in 0..100 {
            let l = noisy_label(9.0, 2.0, &mut rng);
            assert!((1.0..=9.0).contains(&l));
        }
    }
}
