//! Command-line surface. Exit status: 0 success, 1 usage or validation
//! failure, 2 I/O failure. Diagnostics go to stderr; machine-readable
//! results go to files or to stdout as JSON.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::audio::{load_wav, write_wav};
use crate::augment::{augment_corpus, AugmentSpec};
use crate::cache::{write_record, FeatureCache};
use crate::checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, ModelMeta};
use crate::corpus::{
    assign_speaker_splits, generate_synthetic_corpus, load_examples, load_manifest, CorpusManifest, ManifestEntry,
    Split, SyntheticSpec, DEFAULT_SPLIT,
};
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureExtractor};
use crate::metrics::{class_center, ValueMode};
use crate::model::{predict_label, TaskKind};
use crate::spectro::write_png;
use crate::train::{evaluate, save_history, train_model, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "emoaudionet", version, about = "Two-stream speech affect and depression toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FeatureKind {
    Mfcc,
    Spectro,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ValueModeArg {
    Argmax,
    Expectation,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Compute features for every clip of a manifest into the cache.
    Extract {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum)]
        kind: FeatureKind,
        /// Also write all records of this kind into one file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Dump 8-bit spectrogram PNGs here (spectro only).
        #[arg(long)]
        png: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Write noise and pitch variants of every WAV in a directory.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.02, 0.03])]
        noise: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 2.0, 5.0])]
        pitch: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic harmonic-tone corpus.
    Synth {
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 20)]
        per_class: usize,
        #[arg(long, default_value_t = 4.0)]
        duration: f64,
        #[arg(long, default_value_t = 16_000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the train split, early-stopping on the dev split.
    Train {
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        corpus: PathBuf,
        /// JSON with TrainConfig fields; missing fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch CSV (default: `<out>.history.csv`).
        #[arg(long)]
        history: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write a metrics report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "argmax")]
        value_mode: ValueModeArg,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
    },
    /// Classify one WAV file; prints JSON.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        wav: PathBuf,
        /// Defaults to the checkpoint's task.
        #[arg(long)]
        task: Option<TaskKind>,
    },
}

impl clap::builder::ValueParserFactory for TaskKind {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<TaskKind>().map_err(|e| e.to_string()))
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_INVALID
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Extract {
            corpus,
            kind,
            out,
            png,
            cache_dir,
        } => extract(&corpus, kind, out.as_deref(), png.as_deref(), cache_dir),
        Command::Augment {
            input,
            out,
            noise,
            pitch,
            seed,
        } => augment(&input, &out, noise, pitch, seed),
        Command::Synth {
            classes,
            per_class,
            duration,
            sample_rate,
            seed,
            out,
        } => {
            let spec = SyntheticSpec {
                classes,
                clips_per_class: per_class,
                duration_seconds: duration,
                sample_rate,
                seed,
            };
            let m = generate_synthetic_corpus(&spec, &out)?;
            eprintln!("wrote {} clips and {}", m.len(), out.join("manifest.csv").display());
            Ok(())
        }
        Command::Train {
            task,
            corpus,
            config,
            out,
            history,
            cache_dir,
        } => train(task, &corpus, config.as_deref(), &out, history, cache_dir),
        Command::Eval {
            ckpt,
            corpus,
            report,
            split,
            value_mode,
            cache_dir,
        } => eval(&ckpt, &corpus, &report, split, value_mode, cache_dir),
        Command::Predict { ckpt, wav, task } => predict(&ckpt, &wav, task),
    }
}

fn cache_for(manifest: &CorpusManifest, dir: Option<PathBuf>) -> FeatureCache {
    match dir {
        Some(d) => FeatureCache::new(d),
        None => FeatureCache::from_env_or(manifest.base_dir.join(".feature_cache")),
    }
}

fn extract(corpus: &Path, kind: FeatureKind, out: Option<&Path>, png: Option<&Path>, cache_dir: Option<PathBuf>) -> Result<()> {
    let manifest = load_manifest(corpus)?;
    let cache = cache_for(&manifest, cache_dir);
    let extractor = FeatureExtractor::new(FeatureConfig::default())?;
    if let Some(dir) = png {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut records = Vec::new();
    let mut hits = 0;
    for e in &manifest.entries {
        let (features, hit) = cache.load_or_compute(&manifest.resolve(e), &e.clip_id, &extractor)?;
        hits += usize::from(hit);
        let values = match kind {
            FeatureKind::Mfcc => &features.mfcc.values,
            FeatureKind::Spectro => &features.spectro.pixels,
        };
        write_record(&mut records, &e.clip_id, values).expect("in-memory write");
        if let (Some(dir), FeatureKind::Spectro) = (png, kind) {
            write_png(&features.spectro, dir.join(format!("{}.png", e.clip_id)))?;
        }
    }
    if let Some(out) = out {
        fs::write(out, &records).map_err(|e| Error::io(out, e))?;
    }
    eprintln!(
        "extracted {} clips ({hits} from cache) into {}",
        manifest.len(),
        cache.dir().display()
    );
    Ok(())
}

fn augment(input: &Path, out: &Path, noise: Vec<f64>, pitch: Vec<f64>, seed: u64) -> Result<()> {
    let spec = AugmentSpec {
        noise_factors: noise,
        pitch_semitones: pitch,
        seed,
    };
    spec.validate()?;
    let mut wavs: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|d| d.ok().map(|d| d.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    wavs.sort();
    let clips = wavs.iter().map(load_wav).collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let augmented = augment_corpus(&clips, &spec)?;
    for a in &augmented {
        write_wav(&a.clip, out.join(format!("{}.wav", a.clip.clip_id())))?;
    }
    eprintln!("wrote {} clips from {} sources", augmented.len(), clips.len());
    Ok(())
}

fn with_splits(mut manifest: CorpusManifest, seed: u64) -> Result<CorpusManifest> {
    if !manifest.has_splits() {
        assign_speaker_splits(&mut manifest, DEFAULT_SPLIT, seed)?;
    }
    Ok(manifest)
}

fn train(
    task: TaskKind,
    corpus: &Path,
    config: Option<&Path>,
    out: &Path,
    history: Option<PathBuf>,
    cache_dir: Option<PathBuf>,
) -> Result<()> {
    let config = match config {
        Some(p) => TrainConfig::from_json(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => TrainConfig::default(),
    };
    let manifest = with_splits(load_manifest(corpus)?, config.seed)?;
    let cache = cache_for(&manifest, cache_dir);
    let features = FeatureConfig::default();
    let extractor = FeatureExtractor::new(features.clone())?;
    let train_set = load_examples(&manifest, &manifest.split(Split::Train), task, &extractor, Some(&cache))?;
    let dev_set = load_examples(&manifest, &manifest.split(Split::Dev), task, &extractor, Some(&cache))?;
    eprintln!("training on {} clips, early stopping on {} dev clips", train_set.len(), dev_set.len());

    let outcome = train_model(&train_set, &dev_set, task, &config)?;
    let meta = ModelMeta::for_model(&outcome.model, features, config.seed);
    save_checkpoint(&outcome.model, &meta, out)?;
    let history = history.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".history.csv");
        PathBuf::from(s)
    });
    save_history(&outcome.history, &history)?;
    eprintln!(
        "best dev accuracy {:.4} at epoch {} of {}",
        outcome.best_dev_accuracy,
        outcome.best_epoch,
        outcome.history.len()
    );
    Ok(())
}

fn eval(
    ckpt: &Path,
    corpus: &Path,
    report: &Path,
    split: SplitArg,
    value_mode: ValueModeArg,
    cache_dir: Option<PathBuf>,
) -> Result<()> {
    let (net, meta) = load_checkpoint(ckpt)?;
    let manifest = with_splits(load_manifest(corpus)?, meta.seed)?;
    let entries: Vec<&ManifestEntry> = match split {
        SplitArg::All => manifest.entries.iter().collect(),
        SplitArg::Train => manifest.split(Split::Train),
        SplitArg::Dev => manifest.split(Split::Dev),
        SplitArg::Test => manifest.split(Split::Test),
    };
    if entries.is_empty() {
        return Err(Error::Validation(format!("no clips in the {split:?} split")));
    }
    let cache = cache_for(&manifest, cache_dir);
    let extractor = FeatureExtractor::new(meta.features.clone())?;
    let examples = load_examples(&manifest, &entries, meta.task, &extractor, Some(&cache))?;
    let mode = match value_mode {
        ValueModeArg::Argmax => ValueMode::Argmax,
        ValueModeArg::Expectation => ValueMode::Expectation,
    };
    let metrics = evaluate(&net, &examples, mode)?;
    let json = serde_json::to_string_pretty(&metrics).expect("report serializes");
    fs::write(report, json).map_err(|e| Error::io(report, e))?;
    eprintln!("accuracy {:.4} on {} clips", metrics.accuracy, examples.len());
    Ok(())
}

fn predict(ckpt: &Path, wav: &Path, task: Option<TaskKind>) -> Result<()> {
    let meta = crate::checkpoint::load_meta(ckpt)?;
    let task = task.unwrap_or(meta.task);
    let (net, meta) = load_checkpoint_as(ckpt, task, meta.architecture)?;
    let clip = load_wav(wav)?;
    let extractor = FeatureExtractor::new(meta.features)?;
    let probs = predict_label(&net, &clip, task, &extractor)?;
    let out = json!({
        "clip_id": clip.clip_id(),
        "task": task,
        "predicted_class": probs.predicted_class,
        "value": class_center(probs.predicted_class, task),
        "probs": probs.probs,
    });
    println!("{out}");
    Ok(())
}
