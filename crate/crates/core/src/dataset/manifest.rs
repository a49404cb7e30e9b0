use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::audio::decode_wav;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the audio root.
    pub file: PathBuf,
    pub label: u8,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::from("file,label,split\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.file.display(), e.label, e.split));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

pub fn validate_label(label: i64) -> std::result::Result<u8, String> {
    if (1..=9).contains(&label) {
        Ok(label as u8)
    } else {
        Err(format!("label {label} outside the KSS range 1..=9"))
    }
}

/// Parses a `file,label,split` CSV manifest. Errors carry the 1-based line number.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };

    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, e.to_string()))?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| parse_err(1, format!("missing column `{name}`")))
    };
    let (file_col, label_col, split_col) = (column("file")?, column("label")?, column("split")?);

    let mut seen = HashSet::new();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, name: &str| {
            record
                .get(i)
                .ok_or_else(|| parse_err(line, format!("missing `{name}` field")))
        };
        let file = field(file_col, "file")?;
        if file.is_empty() {
            return Err(parse_err(line, "empty file path".into()));
        }
        let label: i64 = field(label_col, "label")?
            .parse()
            .map_err(|_| parse_err(line, "label is not an integer".into()))?;
        let label = validate_label(label).map_err(|r| parse_err(line, r))?;
        let split = field(split_col, "split")?
            .parse::<Split>()
            .map_err(|r| parse_err(line, r))?;
        if !seen.insert(file.to_string()) {
            return Err(parse_err(line, format!("duplicate path `{file}`")));
        }
        entries.push(ManifestEntry {
            file: PathBuf::from(file),
            label,
            split,
        });
    }
    Ok(Manifest { entries })
}

/// Per-split clip duration statistics, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl CorpusStats {
    pub fn from_durations(durations: &[f64]) -> Option<Self> {
        if durations.is_empty() {
            return None;
        }
        let n = durations.len() as f64;
        let mean = durations.iter().sum::<f64>() / n;
        let var = durations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n;
        let min = durations.iter().copied().fold(f64::INFINITY, f64::min);
        let max = durations.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            count: durations.len(),
            mean,
            std: var.sqrt(),
            min,
            max,
        })
    }
}

/// Clip durations in seconds, grouped by split in manifest order.
pub fn corpus_durations(
    manifest: &Manifest,
    audio_root: impl AsRef<Path>,
) -> Result<BTreeMap<Split, Vec<f64>>> {
    let root = audio_root.as_ref();
    let mut durations: BTreeMap<Split, Vec<f64>> = BTreeMap::new();
    for entry in &manifest.entries {
        let clip = decode_wav(root.join(&entry.file))?;
        durations
            .entry(entry.split)
            .or_default()
            .push(clip.duration_seconds());
    }
    Ok(durations)
}

pub fn corpus_stats(
    manifest: &Manifest,
    audio_root: impl AsRef<Path>,
) -> Result<BTreeMap<Split, CorpusStats>> {
    Ok(corpus_durations(manifest, audio_root)?
        .into_iter()
        .filter_map(|(split, d)| CorpusStats::from_durations(&d).map(|s| (split, s)))
        .collect())
}

/// One row per non-empty split plus an `all` row over the whole corpus.
pub fn stats_table(
    manifest: &Manifest,
    audio_root: impl AsRef<Path>,
) -> Result<Vec<(String, CorpusStats)>> {
    let durations = corpus_durations(manifest, audio_root)?;
    let all: Vec<f64> = durations.values().flatten().copied().collect();
    Ok(durations
        .iter()
        .filter_map(|(split, d)| CorpusStats::from_durations(d).map(|s| (split.to_string(), s)))
        .chain(CorpusStats::from_durations(&all).map(|s| ("all".to_string(), s)))
        .collect())
}

/// `dataset,samples,mean,std,min,max`, durations in seconds.
pub fn render_stats_table(rows: &[(String, CorpusStats)]) -> String {
    let mut out = String::from("dataset,samples,mean,std,min,max\n");
    for (name, s) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            s.count, s.mean, s.std, s.min, s.max
        ));
    }
    out
}
