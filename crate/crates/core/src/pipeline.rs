//! Stage plumbing shared by the command-line tool, the examples and the
//! acceptance tests: feature extraction over a directory, feature loading,
//! train/validation splitting and the end-to-end synthetic experiment.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::audio::{load_wav_at, AudioError};
use crate::cqt::{compute_cqt, crop_or_pad, load_cqt, save_cqt, CqtError, CqtParams};
use crate::dataset::synth::{synthesize_corpus, SynthConfig};
use crate::dataset::{
    positive_pairs, sample_negatives, split_by_clique, split_validation, CliqueSet, DatasetError,
    PairSample,
};
use crate::eval::{EvalError, EvalReport};
use crate::seed;
use crate::siamese::{
    self, spectrogram_input, ArchitectureConfig, EpochMetrics, FeatureStore, SiameseError,
    SiameseModel, TrainConfig, TrainData, Trainer, Validation,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Cqt(#[from] CqtError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Siamese(#[from] SiameseError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("missing feature file for track {track}: {path}")]
    MissingFeature { track: String, path: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    InvalidInput { path: String, detail: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Sorted `.wav` files directly inside `dir`.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let p = entry.map_err(io_err(dir))?.path();
        let is_wav = p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if is_wav && p.is_file() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

/// Peak-normalizes every WAV in `in_dir` and writes its feature file `<out_dir>/<stem>.cqt`,
/// optionally cropped or padded to `(frames, master_seed)` as in
/// [`load_features`]. Returns the written paths in sorted order.
pub fn extract_dir(
    in_dir: &Path,
    out_dir: &Path,
    params: &CqtParams,
    sample_rate: u32,
    crop: Option<(usize, u64)>,
) -> Result<Vec<PathBuf>, PipelineError> {
    let wavs = wav_files(in_dir)?;
    if wavs.is_empty() {
        return Err(PipelineError::InvalidInput {
            path: in_dir.display().to_string(),
            detail: "no .wav files found".into(),
        });
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    wavs.par_iter()
        .map(|wav| {
            let mut clip = load_wav_at(wav, sample_rate)?;
            clip.peak_normalize();
            let mut spec = compute_cqt(&clip, params)?;
            if let Some((frames, master_seed)) = crop {
                spec = crop_or_pad(&spec, frames, crop_seed(master_seed, &clip.source_id));
            }
            let out = feature_path(out_dir, &clip.source_id);
            save_cqt(&spec, &out)?;
            Ok(out)
        })
        .collect()
}

fn crop_seed(master_seed: u64, track: &str) -> u64 {
    seed::derive_seed(master_seed, &format!("crop/{track}"))
}

pub fn feature_path(dir: &Path, track: &str) -> PathBuf {
    dir.join(format!("{track}.cqt"))
}

/// Loads every track of `cs` from `feature_dir` as a fixed-width network input.
/// Longer spectrograms are cropped at a seeded per-track offset.
pub fn load_features(
    cs: &CliqueSet,
    feature_dir: &Path,
    frames: usize,
    master_seed: u64,
) -> Result<FeatureStore, PipelineError> {
    let ids = cs.track_ids();
    let loaded = ids
        .par_iter()
        .map(|id| {
            let path = feature_path(feature_dir, id);
            if !path.is_file() {
                return Err(PipelineError::MissingFeature {
                    track: id.clone(),
                    path: path.display().to_string(),
                });
            }
            let spec = load_cqt(&path)?;
            let fixed = crop_or_pad(&spec, frames, crop_seed(master_seed, id));
            Ok((id.clone(), spectrogram_input(&fixed)))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(loaded.into_iter().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SplitMode {
    /// Whole cliques are held out; no track is shared across the split.
    ByClique { val_cliques: usize },
    /// Cover pairs are held out; tracks may appear on both sides.
    ByPair { val_pairs: usize },
}

impl SplitMode {
    /// A quarter of the cliques, or a fifth of the cover pairs.
    pub fn default_for(cs: &CliqueSet, by_clique: bool) -> Self {
        if by_clique {
            SplitMode::ByClique {
                val_cliques: (cs.n_cliques() / 4).max(1),
            }
        } else {
            SplitMode::ByPair {
                val_pairs: (cs.n_positive_pairs() / 5).max(1),
            }
        }
    }
}

/// Training and validation sets derived from one manifest.
#[derive(Debug, Clone)]
pub struct Split {
    pub train_positives: Vec<PairSample>,
    /// Cliques that training negatives are drawn from.
    pub train_pool: CliqueSet,
    /// Held-out labelled pairs, half covers, for the validation loss.
    pub val_pairs: Vec<PairSample>,
    /// Held-out cover pairs for Prec@1.
    pub val_positives: Vec<PairSample>,
    /// Cliques covering every validation track.
    pub val_cliques: CliqueSet,
    /// Validation negatives, never used as training negatives.
    pub exclude: HashSet<(String, String)>,
}

pub fn split(cs: &CliqueSet, mode: SplitMode, master_seed: u64) -> Result<Split, PipelineError> {
    let split_seed = seed::derive_seed(master_seed, "split");
    let neg_seed = seed::derive_seed(master_seed, "val-negatives");
    let (train_positives, train_pool, val_positives, val_cliques, neg_pool) = match mode {
        SplitMode::ByClique { val_cliques } => {
            let (train, val) = split_by_clique(cs, val_cliques, split_seed)?;
            (
                positive_pairs(&train),
                train,
                positive_pairs(&val),
                val.clone(),
                val,
            )
        }
        SplitMode::ByPair { val_pairs } => {
            let (train, val) = split_validation(&positive_pairs(cs), val_pairs, split_seed)?;
            (train, cs.clone(), val, cs.clone(), cs.clone())
        }
    };
    let negatives = if neg_pool.n_cliques() >= 2 {
        sample_negatives(&neg_pool, val_positives.len(), neg_seed)?
    } else {
        Vec::new()
    };
    let exclude = negatives.iter().map(PairSample::key).collect();
    let mut val_pairs: Vec<PairSample> = val_positives.iter().cloned().chain(negatives).collect();
    val_pairs.sort();
    Ok(Split {
        train_positives,
        train_pool,
        val_pairs,
        val_positives,
        val_cliques,
        exclude,
    })
}

impl Split {
    pub fn train_data<'a>(&'a self, features: &'a FeatureStore) -> TrainData<'a> {
        TrainData {
            features,
            positives: self.train_positives.clone(),
            negative_pool: &self.train_pool,
            exclude: self.exclude.clone(),
            validation: Some(Validation {
                pairs: self.val_pairs.clone(),
                eval_pairs: self.val_positives.clone(),
                cliques: Some(&self.val_cliques),
            }),
        }
    }
}

/// Settings of the end-to-end synthetic experiment.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub n_cliques: usize,
    pub versions_per_clique: usize,
    pub master_seed: u64,
    pub architecture: ArchitectureConfig,
    pub train: TrainConfig,
    pub work_dir: PathBuf,
}

impl ExperimentConfig {
    /// 32 cliques of 4 versions, default network and training settings.
    pub fn standard(master_seed: u64, work_dir: impl Into<PathBuf>) -> Self {
        Self {
            n_cliques: 32,
            versions_per_clique: 4,
            master_seed,
            architecture: ArchitectureConfig::default(),
            train: TrainConfig {
                seed: seed::derive_seed(master_seed, "train"),
                ..TrainConfig::default()
            },
            work_dir: work_dir.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentResult {
    pub history: Vec<EpochMetrics>,
    pub report: EvalReport,
    #[serde(skip)]
    pub model: SiameseModel,
}

/// Synthesizes a corpus, extracts features, trains on a clique-strict split
/// and evaluates Prec@1 on the held-out cliques.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<ExperimentResult, PipelineError> {
    let corpus_dir = cfg.work_dir.join("corpus");
    let feature_dir = cfg.work_dir.join("features");
    let synth = synthesize_corpus(&SynthConfig {
        n_cliques: cfg.n_cliques,
        versions_per_clique: cfg.versions_per_clique,
        seed: seed::derive_seed(cfg.master_seed, "synth"),
        out_dir: corpus_dir.clone(),
    })?;
    extract_dir(
        &corpus_dir.join("audio"),
        &feature_dir,
        &CqtParams::default(),
        crate::audio::CANONICAL_RATE,
        None,
    )?;
    let cs = synth.cliques;
    let features = load_features(
        &cs,
        &feature_dir,
        cfg.architecture.input_shape.1,
        cfg.master_seed,
    )?;
    let sp = split(&cs, SplitMode::default_for(&cs, true), cfg.master_seed)?;

    let model = SiameseModel::new(
        cfg.architecture.clone(),
        seed::derive_seed(cfg.master_seed, "init"),
    )?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let history = siamese::train(&mut trainer, &sp.train_data(&features), on_epoch)?;
    let report = evaluate(
        &trainer.model,
        &features,
        &sp.val_positives,
        &sp.val_cliques,
        cfg.train.seed,
    )?;
    Ok(ExperimentResult {
        history,
        report,
        model: trainer.model,
    })
}

/// Prec@1 of `model` over clique-distinct batches of `eval_pairs`. Batches
/// match the per-epoch validation batches of a run trained with `master_seed`.
pub fn evaluate(
    model: &SiameseModel,
    features: &FeatureStore,
    eval_pairs: &[PairSample],
    cliques: &CliqueSet,
    master_seed: u64,
) -> Result<EvalReport, PipelineError> {
    let (_, report) = siamese::validate(
        model,
        features,
        &Validation {
            pairs: Vec::new(),
            eval_pairs: eval_pairs.to_vec(),
            cliques: Some(cliques),
        },
        seed::derive_seed(master_seed, "eval"),
    )?;
    report.ok_or_else(|| PipelineError::InvalidInput {
        path: "manifest".into(),
        detail: "no cover pairs to evaluate".into(),
    })
}
