//! Corpus manifests, speaker-disjoint splits and the synthetic tone corpus.
//!
//! Manifest CSV header: `clip_id,wav_path,speaker_id,label_task,label_value`
//! with an optional trailing `split` column (`train`, `dev`, `test`).
//! Relative WAV paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{write_wav, AudioClip};
use crate::cache::FeatureCache;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::metrics::label_to_class;
use crate::model::TaskKind;
use crate::seed;
use crate::train::LabeledExample;

pub const MANIFEST_COLUMNS: [&str; 5] = ["clip_id", "wav_path", "speaker_id", "label_task", "label_value"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
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
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            _ => Err(Error::invalid(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// As written in the manifest.
    pub wav_path: PathBuf,
    pub speaker_id: Option<String>,
    pub task: TaskKind,
    pub label_value: f64,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory relative WAV paths are resolved against.
    pub base_dir: PathBuf,
}

impl CorpusManifest {
    pub fn new(entries: Vec<ManifestEntry>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Validation(format!("duplicate clip_id `{}`", e.clip_id)));
            }
        }
        Ok(Self {
            entries,
            base_dir: base_dir.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.wav_path.is_absolute() {
            entry.wav_path.clone()
        } else {
            self.base_dir.join(&entry.wav_path)
        }
    }

    pub fn has_splits(&self) -> bool {
        self.entries.iter().any(|e| e.split.is_some())
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == Some(split)).collect()
    }
}

fn parse_err(line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

/// Parses manifest CSV text. Paths are not checked.
pub fn parse_manifest(text: &str, base_dir: impl Into<PathBuf>) -> Result<CorpusManifest> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0usize; 5];
    for (slot, name) in idx.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = col(name).ok_or_else(|| parse_err(1, format!("missing column `{name}`")))?;
    }
    let split_col = col("split");

    let mut entries = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| {
            rec.get(i)
                .map(str::trim)
                .ok_or_else(|| parse_err(line, format!("missing value for `{name}`")))
        };
        let clip_id = field(idx[0], "clip_id")?;
        if clip_id.is_empty() {
            return Err(parse_err(line, "empty clip_id"));
        }
        let wav_path = field(idx[1], "wav_path")?;
        let speaker = field(idx[2], "speaker_id")?;
        let task = field(idx[3], "label_task")?
            .parse::<TaskKind>()
            .map_err(|e| parse_err(line, e.to_string()))?;
        let value_text = field(idx[4], "label_value")?;
        let label_value: f64 = value_text
            .parse()
            .map_err(|_| parse_err(line, format!("label_value `{value_text}` is not a number")))?;
        let split = match split_col.and_then(|i| rec.get(i)).map(str::trim) {
            None | Some("") => None,
            Some(s) => Some(s.parse::<Split>().map_err(|e| parse_err(line, e.to_string()))?),
        };
        entries.push(ManifestEntry {
            clip_id: clip_id.to_owned(),
            wav_path: PathBuf::from(wav_path),
            speaker_id: (!speaker.is_empty()).then(|| speaker.to_owned()),
            task,
            label_value,
            split,
        });
    }
    CorpusManifest::new(entries, base_dir)
}

/// Loads and validates a manifest; every referenced WAV must exist.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<CorpusManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = parse_manifest(&text, base)?;
    for e in &manifest.entries {
        let wav = manifest.resolve(e);
        if !wav.is_file() {
            return Err(Error::io(
                wav,
                std::io::Error::new(std::io::ErrorKind::NotFound, format!("WAV for clip `{}` not found", e.clip_id)),
            ));
        }
    }
    Ok(manifest)
}

pub fn manifest_to_csv(manifest: &CorpusManifest) -> String {
    let with_split = manifest.has_splits();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = MANIFEST_COLUMNS.to_vec();
    if with_split {
        header.push("split");
    }
    w.write_record(&header).expect("in-memory write");
    for e in &manifest.entries {
        let value = e.label_value.to_string();
        let mut row = vec![
            e.clip_id.as_str(),
            e.wav_path.to_str().unwrap_or_default(),
            e.speaker_id.as_deref().unwrap_or(""),
            e.task.as_str(),
            value.as_str(),
        ];
        if with_split {
            row.push(e.split.map_or("", Split::as_str));
        }
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

pub fn save_manifest(manifest: &CorpusManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest_to_csv(manifest)).map_err(|e| Error::io(path, e))
}

/// Assigns every entry to train/dev/test so that no speaker spans two
/// splits. Entries without a speaker count as their own speaker. Speakers
/// are shuffled with `seed` and taken greedily until each split reaches its
/// share of clips.
pub fn assign_speaker_splits(manifest: &mut CorpusManifest, fractions: [f64; 3], seed: u64) -> Result<()> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("split fractions must be non-negative and sum to 1"));
    }
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in manifest.entries.iter().enumerate() {
        let key = e.speaker_id.clone().unwrap_or_else(|| format!("\u{0}{}", e.clip_id));
        groups.entry(key).or_default().push(i);
    }
    let mut speakers: Vec<Vec<usize>> = groups.into_values().collect();
    speakers.shuffle(&mut seed::rng(seed));

    let total = manifest.len() as f64;
    let train_end = fractions[0] * total;
    let dev_end = (fractions[0] + fractions[1]) * total;
    let mut assigned = 0usize;
    for members in speakers {
        let split = if (assigned as f64) < train_end {
            Split::Train
        } else if (assigned as f64) < dev_end {
            Split::Dev
        } else {
            Split::Test
        };
        assigned += members.len();
        for i in members {
            manifest.entries[i].split = Some(split);
        }
    }
    Ok(())
}

pub const DEFAULT_SPLIT: [f64; 3] = [0.7, 0.15, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub clips_per_class: usize,
    pub duration_seconds: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 2,
            clips_per_class: 20,
            duration_seconds: 4.0,
            sample_rate: 16_000,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > TaskKind::DepressionSeverity.n_classes() {
            return Err(Error::invalid("classes must be between 2 and 24"));
        }
        if self.clips_per_class == 0 {
            return Err(Error::invalid("clips_per_class must be positive"));
        }
        if !(self.duration_seconds > 0.0) || self.sample_rate == 0 {
            return Err(Error::invalid("duration and sample rate must be positive"));
        }
        Ok(())
    }

    /// dep-bin for two classes, dep-sev otherwise.
    pub fn task(&self) -> TaskKind {
        if self.classes == 2 {
            TaskKind::DepressionBinary
        } else {
            TaskKind::DepressionSeverity
        }
    }
}

pub const SYNTH_SPEAKERS: usize = 10;

/// Fundamental of class `c`.
pub fn class_fundamental(class: usize) -> f64 {
    200.0 * (class + 1) as f64
}

/// One synthetic clip: four harmonics of the class fundamental with seeded
/// phases and amplitudes, a slow tremolo, and low-level uniform noise.
pub fn synthesize_clip(spec: &SyntheticSpec, class: usize, index: usize) -> Result<AudioClip> {
    let mut rng = seed::rng(seed::derive(spec.seed, &[class as u64, index as u64]));
    let f0 = class_fundamental(class);
    let rate = spec.sample_rate as f64;
    let n = (spec.duration_seconds * rate).round().max(1.0) as usize;
    let harmonics: Vec<(f64, f64, f64)> = (1..=4)
        .map(|k| {
            let amp = rng.random_range(0.6..1.0) / k as f64;
            let phase = rng.random_range(0.0..2.0 * PI);
            (k as f64 * f0, amp, phase)
        })
        .filter(|(f, _, _)| *f < rate / 2.0)
        .collect();
    let norm: f64 = harmonics.iter().map(|h| h.1).sum();
    let tremolo = rng.random_range(1.0..4.0);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / rate;
            let tone: f64 = harmonics.iter().map(|(f, a, p)| a * (2.0 * PI * f * t + p).sin()).sum();
            let env = 0.85 + 0.15 * (2.0 * PI * tremolo * t).sin();
            (0.5 * env * tone / norm + 0.01 * rng.random_range(-1.0..1.0)).clamp(-1.0, 1.0)
        })
        .collect();
    AudioClip::new(format!("c{class}_{index:03}"), samples, spec.sample_rate)
}

/// Writes `<id>.wav` files and `manifest.csv` into `out_dir`.
pub fn generate_synthetic_corpus(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<CorpusManifest> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(usize, usize)> = (0..spec.classes)
        .flat_map(|c| (0..spec.clips_per_class).map(move |i| (c, i)))
        .collect();
    let entries = jobs
        .par_iter()
        .map(|&(c, i)| {
            let clip = synthesize_clip(spec, c, i)?;
            let file = format!("{}.wav", clip.clip_id());
            write_wav(&clip, out_dir.join(&file))?;
            Ok(ManifestEntry {
                clip_id: clip.clip_id().to_owned(),
                wav_path: PathBuf::from(file),
                speaker_id: Some(format!("spk{:02}", i % SYNTH_SPEAKERS)),
                task: spec.task(),
                label_value: c as f64,
                split: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest::new(entries, out_dir)?;
    save_manifest(&manifest, out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

/// Decodes, extracts (through `cache` when given) and labels manifest entries.
pub fn load_examples(
    manifest: &CorpusManifest,
    entries: &[&ManifestEntry],
    task: TaskKind,
    extractor: &FeatureExtractor,
    cache: Option<&FeatureCache>,
) -> Result<Vec<LabeledExample>> {
    entries
        .par_iter()
        .map(|e| {
            if e.task != task {
                return Err(Error::Validation(format!(
                    "clip `{}` is labelled for {}, not {task}",
                    e.clip_id, e.task
                )));
            }
            let label = label_to_class(e.label_value, task)?;
            let path = manifest.resolve(e);
            let features = match cache {
                Some(c) => c.load_or_compute(&path, &e.clip_id, extractor)?.0,
                None => extractor.extract(&crate::audio::load_wav(&path)?.with_id(e.clip_id.clone()))?,
            };
            Ok(LabeledExample {
                clip_id: e.clip_id.clone(),
                features,
                label,
                raw_label: Some(e.label_value),
            })
        })
        .collect()
}
