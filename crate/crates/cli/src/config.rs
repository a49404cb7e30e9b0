//! Flat `key = value` configuration: defaults, then a file, then `--set`
//! overrides. Unknown keys are rejected.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

use sleepnet::dataset::{AugmentConfig, Split, WindowingConfig};
use sleepnet::eval::{Aggregation, RatingCast};
use sleepnet::model::{Head, ModelSpec};
use sleepnet::synth::SynthSpec;
use sleepnet::train::TrainConfig;

/// Name of the effective-configuration echo written into output directories.
pub const ECHO_FILE: &str = "run.conf";
pub const SYNTH_ECHO_FILE: &str = "synth.conf";

/// Parses `key = value` lines. Blank lines and text after `#` are ignored.
pub fn parse_flat(text: &str) -> Result<Vec<(String, String)>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("line {}: expected `key = value`, got `{line}`", i + 1))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            bail!("line {}: empty key", i + 1);
        }
        if !seen.insert(k.to_string()) {
            bail!("line {}: duplicate key `{k}`", i + 1);
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

/// A configuration expressible as flat keys.
pub trait FlatConfig: Default {
    /// Applies one key. Relative paths are resolved against `base`.
    fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<()>;
    fn entries(&self) -> Vec<(&'static str, String)>;
    fn validate(&self) -> Result<()>;

    fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}

/// Defaults, then `file`, then `overrides` (`key=value`), then validation.
pub fn load_layered<C: FlatConfig>(file: Option<&Path>, overrides: &[String]) -> Result<C> {
    let mut cfg = C::default();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for (k, v) in parse_flat(&text).with_context(|| format!("in {}", path.display()))? {
            cfg.set(&k, &v, base)
                .with_context(|| format!("in {}", path.display()))?;
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| anyhow!("override `{o}` is not key=value"))?;
        cfg.set(k.trim(), v.trim(), Path::new("."))
            .with_context(|| format!("in override `{o}`"))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn write_echo<C: FlatConfig>(cfg: &C, dir: &Path, name: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, cfg.render()).with_context(|| format!("writing {}", path.display()))
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| anyhow!("`{key}`: cannot parse `{v}`: {e}"))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => bail!("`{key}`: expected true or false, got `{v}`"),
    }
}

/// Absolute form of `v` relative to `base`; an empty value clears the path.
fn parse_path(v: &str, base: &Path) -> Result<Option<PathBuf>> {
    if v.is_empty() {
        return Ok(None);
    }
    let p = Path::new(v);
    let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
    Ok(Some(std::path::absolute(&joined).unwrap_or(joined)))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn unknown(key: &str) -> anyhow::Error {
    anyhow!("unknown configuration key `{key}`")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Regression,
    Classification,
}

/// Every knob of a preprocessing, training or evaluation run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    /// Root for manifest-relative audio paths; defaults to the manifest's directory.
    pub data_root: Option<PathBuf>,
    /// Preprocessed training windows used instead of the manifest's train split.
    pub train_windows: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub windowing: WindowingConfig,
    pub conv_blocks: usize,
    pub filters_per_conv: usize,
    pub kernel_size: usize,
    pub pool_size: usize,
    pub dense_units: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
    pub head: HeadKind,
    pub classes: usize,
    pub train: TrainConfig,
    pub balance: bool,
    pub augment: AugmentConfig,
    pub aggregation: Aggregation,
    pub rating_cast: RatingCast,
    pub eval_split: Split,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelSpec::default();
        Self {
            manifest: None,
            data_root: None,
            train_windows: None,
            model: None,
            windowing: WindowingConfig::default(),
            conv_blocks: m.conv_blocks,
            filters_per_conv: m.filters_per_conv,
            kernel_size: m.kernel_size,
            pool_size: m.pool_size,
            dense_units: m.dense_units,
            conv_dropout: m.conv_dropout,
            dense_dropout: m.dense_dropout,
            head: HeadKind::Regression,
            classes: 3,
            train: TrainConfig::default(),
            balance: true,
            augment: AugmentConfig::default(),
            aggregation: Aggregation::default(),
            rating_cast: RatingCast::default(),
            eval_split: Split::Dev,
        }
    }
}

impl RunConfig {
    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            sample_rate: self.windowing.sample_rate,
            window_size_s: self.windowing.window_size_s,
            conv_blocks: self.conv_blocks,
            filters_per_conv: self.filters_per_conv,
            kernel_size: self.kernel_size,
            pool_size: self.pool_size,
            dense_units: self.dense_units,
            conv_dropout: self.conv_dropout,
            dense_dropout: self.dense_dropout,
            head: match self.head {
                HeadKind::Regression => Head::Regression,
                HeadKind::Classification => Head::Classification {
                    classes: self.classes,
                },
            },
        }
    }

    /// Audio root: `data_root`, else the manifest's directory.
    pub fn audio_root(&self) -> Option<PathBuf> {
        self.data_root.clone().or_else(|| {
            self.manifest
                .as_ref()
                .map(|m| m.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf))
        })
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest
            .as_deref()
            .ok_or_else(|| anyhow!("no manifest configured (set `manifest`)"))
    }

    pub fn require_model(&self) -> Result<&Path> {
        self.model
            .as_deref()
            .ok_or_else(|| anyhow!("no model configured (set `model`)"))
    }
}

impl FlatConfig for RunConfig {
    fn set(&mut self, key: &str, v: &str, base: &Path) -> Result<()> {
        match key {
            "manifest" => self.manifest = parse_path(v, base)?,
            "data_root" => self.data_root = parse_path(v, base)?,
            "train_windows" => self.train_windows = parse_path(v, base)?,
            "model" => self.model = parse_path(v, base)?,
            "sample_rate" => self.windowing.sample_rate = parse(key, v)?,
            "window_size_s" => self.windowing.window_size_s = parse(key, v)?,
            "stride_s" => self.windowing.stride_s = parse(key, v)?,
            "pad_short" => self.windowing.pad_short = parse_bool(key, v)?,
            "conv_blocks" => self.conv_blocks = parse(key, v)?,
            "filters_per_conv" => self.filters_per_conv = parse(key, v)?,
            "kernel_size" => self.kernel_size = parse(key, v)?,
            "pool_size" => self.pool_size = parse(key, v)?,
            "dense_units" => self.dense_units = parse(key, v)?,
            "conv_dropout" => self.conv_dropout = parse(key, v)?,
            "dense_dropout" => self.dense_dropout = parse(key, v)?,
            "head" => {
                self.head = match v {
                    "regression" => HeadKind::Regression,
                    "classification" => HeadKind::Classification,
                    _ => bail!("`head`: expected regression or classification, got `{v}`"),
                }
            }
            "classes" => self.classes = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "lr" => self.train.lr = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            "shuffle" => self.train.shuffle = parse_bool(key, v)?,
            "balance" => self.balance = parse_bool(key, v)?,
            "augment_reverse" => self.augment.reverse = parse_bool(key, v)?,
            "augment_overlay" => self.augment.overlay = parse_bool(key, v)?,
            "augment_noisy_labels" => self.augment.noisy_labels = parse_bool(key, v)?,
            "label_sigma" => self.augment.label_sigma = parse(key, v)?,
            "overlay_alpha_min" => self.augment.overlay_alpha_min = parse(key, v)?,
            "overlay_alpha_max" => self.augment.overlay_alpha_max = parse(key, v)?,
            "background_threshold" => self.augment.background_threshold = parse(key, v)?,
            "background_frame_s" => self.augment.background_frame_s = parse(key, v)?,
            "aggregation" => self.aggregation = parse(key, v)?,
            "rating_cast" => self.rating_cast = parse(key, v)?,
            "eval_split" => self.eval_split = parse(key, v)?,
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        vec![
            ("manifest", show_path(&self.manifest)),
            ("data_root", show_path(&self.data_root)),
            ("train_windows", show_path(&self.train_windows)),
            ("model", show_path(&self.model)),
            ("sample_rate", self.windowing.sample_rate.to_string()),
            ("window_size_s", self.windowing.window_size_s.to_string()),
            ("stride_s", self.windowing.stride_s.to_string()),
            ("pad_short", self.windowing.pad_short.to_string()),
            ("conv_blocks", self.conv_blocks.to_string()),
            ("filters_per_conv", self.filters_per_conv.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("pool_size", self.pool_size.to_string()),
            ("dense_units", self.dense_units.to_string()),
            ("conv_dropout", self.conv_dropout.to_string()),
            ("dense_dropout", self.dense_dropout.to_string()),
            (
                "head",
                match self.head {
                    HeadKind::Regression => "regression",
                    HeadKind::Classification => "classification",
                }
                .to_string(),
            ),
            ("classes", self.classes.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("lr", self.train.lr.to_string()),
            ("seed", self.train.seed.to_string()),
            ("shuffle", self.train.shuffle.to_string()),
            ("balance", self.balance.to_string()),
            ("augment_reverse", a.reverse.to_string()),
            ("augment_overlay", a.overlay.to_string()),
            ("augment_noisy_labels", a.noisy_labels.to_string()),
            ("label_sigma", a.label_sigma.to_string()),
            ("overlay_alpha_min", a.overlay_alpha_min.to_string()),
            ("overlay_alpha_max", a.overlay_alpha_max.to_string()),
            ("background_threshold", a.background_threshold.to_string()),
            ("background_frame_s", a.background_frame_s.to_string()),
            ("aggregation", self.aggregation.to_string()),
            (
                "rating_cast",
                match self.rating_cast {
                    RatingCast::Truncate => "truncate",
                    RatingCast::Round => "round",
                }
                .to_string(),
            ),
            ("eval_split", self.eval_split.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        for (key, p) in [
            ("manifest", &self.manifest),
            ("data_root", &self.data_root),
            ("train_windows", &self.train_windows),
            ("model", &self.model),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    bail!("`{key}` path {} does not exist", p.display());
                }
            }
        }
        self.windowing.validate()?;
        self.train.validate()?;
        self.augment.validate()?;
        self.model_spec().validate()?;
        Ok(())
    }
}

impl FlatConfig for SynthSpec {
    fn set(&mut self, key: &str, v: &str, _base: &Path) -> Result<()> {
        match key {
            "clips_per_label" => self.clips_per_label = parse(key, v)?,
            "duration_mean_s" => self.duration_mean_s = parse(key, v)?,
            "duration_std_s" => self.duration_std_s = parse(key, v)?,
            "duration_min_s" => self.duration_min_s = parse(key, v)?,
            "duration_max_s" => self.duration_max_s = parse(key, v)?,
            "base_freq_hz" => self.base_freq_hz = parse(key, v)?,
            "freq_step_hz" => self.freq_step_hz = parse(key, v)?,
            "noise_floor" => self.noise_floor = parse(key, v)?,
            "pause_s" => self.pause_s = parse(key, v)?,
            "sample_rate" => self.sample_rate = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "labels" => {
                self.labels = v
                    .split(',')
                    .map(|s| parse::<u8>(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            _ => return Err(unknown(key)),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let labels: Vec<String> = self.labels.iter().map(u8::to_string).collect();
        vec![
            ("clips_per_label", self.clips_per_label.to_string()),
            ("duration_mean_s", self.duration_mean_s.to_string()),
            ("duration_std_s", self.duration_std_s.to_string()),
            ("duration_min_s", self.duration_min_s.to_string()),
            ("duration_max_s", self.duration_max_s.to_string()),
            ("base_freq_hz", self.base_freq_hz.to_string()),
            ("freq_step_hz", self.freq_step_hz.to_string()),
            ("noise_floor", self.noise_floor.to_string()),
            ("pause_s", self.pause_s.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("seed", self.seed.to_string()),
            ("labels", labels.join(",")),
        ]
    }

    fn validate(&self) -> Result<()> {
        Ok(SynthSpec::validate(self)?)
    }
}
