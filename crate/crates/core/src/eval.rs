//! Clip-level aggregation of window predictions and the evaluation metrics.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use crate::audio::AudioClip;
use crate::dataset::{WindowSet, WindowingConfig};
use crate::error::{Error, Result};
use crate::model::{Head, SleepNet};
use crate::train::predict_windows;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    /// Lower-middle element for even counts.
    Median,
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::Mean => "mean",
            Aggregation::Median => "median",
        })
    }
}

impl FromStr for Aggregation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "median" => Ok(Aggregation::Median),
            other => Err(format!("unknown aggregation `{other}` (mean|median)")),
        }
    }
}

/// How the clamped clip score becomes an integer rating.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RatingCast {
    /// Truncation toward zero, like an integer typecast.
    #[default]
    Truncate,
    Round,
}

impl FromStr for RatingCast {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "truncate" => Ok(RatingCast::Truncate),
            "round" => Ok(RatingCast::Round),
            other => Err(format!("unknown rating cast `{other}` (truncate|round)")),
        }
    }
}

fn combine(preds: &[f64], method: Aggregation) -> f64 {
    match method {
        Aggregation::Mean => preds.iter().sum::<f64>() / preds.len() as f64,
        Aggregation::Median => {
            let mut v = preds.to_vec();
            v.sort_by(|a, b| a.total_cmp(b));
            v[(v.len() - 1) / 2]
        }
    }
}

/// Combines window predictions, clamps to [1, 9], and casts to a KSS rating.
pub fn aggregate_with(preds: &[f64], method: Aggregation, cast: RatingCast) -> Result<u8> {
    if preds.is_empty() {
        return Err(Error::Input("cannot aggregate an empty prediction list".into()));
    }
    if preds.iter().any(|p| p.is_nan()) {
        return Err(Error::Input("NaN window prediction".into()));
    }
    let clamped = combine(preds, method).clamp(1.0, 9.0);
    Ok(match cast {
        RatingCast::Truncate => clamped.trunc() as u8,
        RatingCast::Round => clamped.round() as u8,
    })
}

pub fn aggregate(preds: &[f64], method: Aggregation) -> Result<u8> {
    aggregate_with(preds, method, RatingCast::Truncate)
}

/// 1-based fractional ranks; ties share the average of their positions.
pub fn fractional_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && values[order[j]] == values[order[i]] {
            j += 1;
        }
        // positions i..j (0-based) hold ranks i+1..=j
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        i = j;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rank correlation: Pearson correlation of average-tie ranks.
pub fn spearman_rho(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground-truth ratings",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::UndefinedMetric(
            "rank correlation needs at least two items".into(),
        ));
    }
    pearson(&fractional_ranks(pred), &fractional_ranks(truth)).ok_or_else(|| {
        Error::UndefinedMetric("rank correlation of a constant sequence".into())
    })
}

fn paired(pred: &[f64], truth: &[f64]) -> Result<()> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground-truth ratings",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Input("metric over an empty list".into()));
    }
    Ok(())
}

pub fn mse_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    paired(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

pub fn mae_metric(pred: &[f64], truth: &[f64]) -> Result<f64> {
    paired(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// Unweighted average recall over `classes` 0-based classes.
pub fn uar(pred: &[usize], truth: &[usize], classes: usize) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} ground-truth classes",
            pred.len(),
            truth.len()
        )));
    }
    if let Some(&c) = pred.iter().chain(truth).find(|&&c| c >= classes) {
        return Err(Error::Index(format!("class {c} outside [0, {classes})")));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    if let Some(missing) = totals.iter().position(|&n| n == 0) {
        return Err(Error::UndefinedMetric(format!(
            "class {missing} never occurs in the ground truth"
        )));
    }
    Ok(hits
        .iter()
        .zip(&totals)
        .map(|(&h, &n)| h as f64 / n as f64)
        .sum::<f64>()
        / classes as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipPrediction {
    pub clip_id: String,
    /// Regression outputs, or the probability of the chosen class per window.
    pub window_predictions: Vec<f32>,
    pub rating: u8,
    pub truth: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub clips: Vec<ClipPrediction>,
    /// `None` when the predicted ratings are all equal (rank correlation undefined).
    pub rho: Option<f64>,
    pub mse: f64,
    pub mae: f64,
    pub uar: Option<f64>,
    pub method: Aggregation,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x}"))
}

impl EvalReport {
    /// `clip_id,true,pred` rows, then a `__mean__` row with the column means.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("clip_id,true,pred\n");
        for c in &self.clips {
            let _ = writeln!(s, "{},{},{}", c.clip_id, c.truth, c.rating);
        }
        let n = self.clips.len().max(1) as f64;
        let mt = self.clips.iter().map(|c| f64::from(c.truth)).sum::<f64>() / n;
        let mp = self.clips.iter().map(|c| f64::from(c.rating)).sum::<f64>() / n;
        let _ = writeln!(s, "__mean__,{mt},{mp}");
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "method = {}", self.method);
        let _ = writeln!(s, "clips = {}", self.clips.len());
        let _ = writeln!(s, "mse = {}", self.mse);
        let _ = writeln!(s, "mae = {}", self.mae);
        let _ = writeln!(s, "rho = {}", fmt_opt(self.rho));
        if self.uar.is_some() {
            let _ = writeln!(s, "uar = {}", fmt_opt(self.uar));
        }
        s
    }

    pub fn write(&self, csv_path: impl AsRef<Path>, summary_path: impl AsRef<Path>) -> Result<()> {
        let (c, s) = (csv_path.as_ref(), summary_path.as_ref());
        std::fs::write(c, self.to_csv()).map_err(|e| Error::io(c, e))?;
        std::fs::write(s, self.summary()).map_err(|e| Error::io(s, e))
    }
}

/// Window outputs grouped per clip, in clip order, with each clip's label.
pub fn clip_window_outputs(
    model: &SleepNet,
    clips: Vec<AudioClip>,
    cfg: &WindowingConfig,
    batch_size: usize,
) -> Result<Vec<(String, Option<u8>, Vec<Vec<f32>>)>> {
    let meta: Vec<(String, Option<u8>)> = clips.iter().map(|c| (c.id.clone(), c.label)).collect();
    // window labels are never read here; unlabelled clips get a placeholder
    let clips = clips
        .into_iter()
        .map(|c| if c.label.is_some() { c } else { c.with_label(1) })
        .collect();
    let set = WindowSet::from_clips(clips, cfg)?;
    let outputs = predict_windows(model, &set, batch_size)?;
    let mut groups = set.windows_by_source().into_iter();
    meta.into_iter()
        .map(|(id, label)| {
            let (_, idx) = groups
                .next()
                .ok_or_else(|| Error::Input(format!("clip {id} produced no windows")))?;
            Ok((id, label, idx.iter().map(|&i| outputs[i].clone()).collect()))
        })
        .collect()
}

/// One clip's rating from its window outputs, plus the per-window values
/// behind it. Classification takes the argmax of the aggregated class
/// probabilities (mean or per-class median); the rating is the 1-based class.
pub fn rate_clip(
    head: Head,
    outputs: &[Vec<f32>],
    method: Aggregation,
    cast: RatingCast,
) -> Result<(u8, Vec<f32>)> {
    if outputs.is_empty() {
        return Err(Error::Input("clip without window predictions".into()));
    }
    match head {
        Head::Regression => {
            let preds: Vec<f32> = outputs.iter().map(|o| o[0]).collect();
            let p64: Vec<f64> = preds.iter().map(|&p| f64::from(p)).collect();
            Ok((aggregate_with(&p64, method, cast)?, preds))
        }
        Head::Classification { classes } => {
            let scores: Vec<f64> = (0..classes)
                .map(|c| {
                    let col: Vec<f64> = outputs.iter().map(|p| f64::from(p[c])).collect();
                    combine(&col, method)
                })
                .collect();
            // first maximum wins
            let best = (0..classes).fold(0, |b, c| if scores[c] > scores[b] { c } else { b });
            Ok((best as u8 + 1, outputs.iter().map(|p| p[best]).collect()))
        }
    }
}

/// Ratings for unlabelled clips, in input order.
pub fn predict_clips(
    model: &SleepNet,
    clips: Vec<AudioClip>,
    cfg: &WindowingConfig,
    method: Aggregation,
    cast: RatingCast,
    batch_size: usize,
) -> Result<Vec<(String, u8)>> {
    let head = model.spec().head;
    clip_window_outputs(model, clips, cfg, batch_size)?
        .into_iter()
        .map(|(id, _, outputs)| Ok((id, rate_clip(head, &outputs, method, cast)?.0)))
        .collect()
}

/// Windows every clip exactly as for training (no balancing or augmentation),
/// runs inference, aggregates per clip, and computes the metrics over clips.
pub fn evaluate_clips(
    model: &SleepNet,
    clips: Vec<AudioClip>,
    cfg: &WindowingConfig,
    method: Aggregation,
    cast: RatingCast,
    batch_size: usize,
) -> Result<EvalReport> {
    if clips.len() < 2 {
        return Err(Error::UndefinedMetric(format!(
            "evaluation over {} clip(s): rank correlation needs at least two",
            clips.len()
        )));
    }
    let head = model.spec().head;
    let mut out = Vec::with_capacity(clips.len());
    for (clip_id, label, outputs) in clip_window_outputs(model, clips, cfg, batch_size)? {
        let truth = label.ok_or_else(|| Error::Input(format!("clip {clip_id} has no label")))?;
        let (rating, window_predictions) = rate_clip(head, &outputs, method, cast)?;
        out.push(ClipPrediction {
            clip_id,
            window_predictions,
            rating,
            truth,
        });
    }
    let pred: Vec<f64> = out.iter().map(|c| f64::from(c.rating)).collect();
    let truth: Vec<f64> = out.iter().map(|c| f64::from(c.truth)).collect();
    let rho = match spearman_rho(&pred, &truth) {
        Ok(r) => Some(r),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    let uar_value = match head {
        Head::Regression => None,
        Head::Classification { classes } => {
            let p: Vec<usize> = out.iter().map(|c| usize::from(c.rating) - 1).collect();
            let t: Vec<usize> = out
                .iter()
                .map(|c| usize::from(c.truth).saturating_sub(1))
                .collect();
            Some(uar(&p, &t, classes)?)
        }
    };
    Ok(EvalReport {
        rho,
        mse: mse_metric(&pred, &truth)?,
        mae: mae_metric(&pred, &truth)?,
        uar: uar_value,
        method,
        clips: out,
    })
}
