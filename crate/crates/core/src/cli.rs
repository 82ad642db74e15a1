//! The `coverdet` command line: synth, extract, train, evaluate, embed,
//! nearest and selftest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use thiserror::Error;

use crate::audio::CANONICAL_RATE;
use crate::config::{ConfigError, PipelineConfig};
use crate::cqt::{CqtParams, DEFAULT_FRAMES, DEFAULT_HOP};
use crate::dataset::synth::{synthesize_corpus, SynthConfig};
use crate::dataset::{parse_manifest, positive_pairs, CliqueSet, DatasetError};
use crate::eval::EmbeddingIndex;
use crate::oracle;
use crate::pipeline::{self, PipelineError, SplitMode};
use crate::seed;
use crate::siamese::{self, embed_tracks, SiameseError, SiameseModel, Trainer};

#[derive(Debug, Parser)]
#[command(
    name = "coverdet",
    version,
    about = "Cover-song detection with a twin convolutional network"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic corpus of cover cliques and its manifest.
    Synth {
        #[arg(long, default_value_t = 32)]
        cliques: usize,
        #[arg(long, default_value_t = 4)]
        versions: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute log constant-Q feature files for every WAV in a directory.
    Extract {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_HOP)]
        hop: usize,
        /// Crop or pad every spectrogram to this many frames; 0 keeps full length.
        #[arg(long, default_value_t = DEFAULT_FRAMES)]
        frames: usize,
        #[arg(long, default_value_t = CANONICAL_RATE)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the twin network on the cover pairs of a manifest.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Hold out whole cliques instead of cover pairs.
        #[arg(long)]
        split_by_clique: bool,
    },
    /// Mean Prec@1 over batches of 16 tracks from the manifest's cover pairs.
    Evaluate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the embedding of every manifest track as JSON.
    Embed {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the k tracks nearest to a query by cosine distance.
    Nearest {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 5)]
        k: usize,
    },
    /// Check gradients and the constant-Q transform against reference implementations.
    Selftest {
        /// Seeded instances per differentiable op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
    },
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub features: PathBuf,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Siamese(#[from] SiameseError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Failed(String),
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.display().to_string(),
            source,
        })?;
    }
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn emit(value: serde_json::Value) {
    println!("{value}");
}

fn manifest(path: &Path) -> Result<CliqueSet, CliError> {
    Ok(parse_manifest(path)?)
}

/// Runs one subcommand; structured output goes to standard output.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            cliques,
            versions,
            seed,
            out,
        } => {
            let o = synthesize_corpus(&SynthConfig {
                n_cliques: cliques,
                versions_per_clique: versions,
                seed,
                out_dir: out,
            })?;
            emit(json!({
                "stage": "synth",
                "cliques": o.cliques.n_cliques(),
                "tracks": o.cliques.n_tracks(),
                "positive_pairs": o.cliques.n_positive_pairs(),
                "manifest": o.manifest_path,
            }));
        }
        Command::Extract {
            input,
            out,
            hop,
            frames,
            sample_rate,
            seed,
        } => {
            let crop = (frames > 0).then_some((frames, seed));
            let written =
                pipeline::extract_dir(&input, &out, &CqtParams::with_hop(hop), sample_rate, crop)?;
            emit(json!({"stage": "extract", "files": written.len(), "out": out}));
        }
        Command::Train {
            manifest: manifest_path,
            features,
            config,
            out,
            seed,
            split_by_clique,
        } => train(
            &manifest_path,
            &features,
            config.as_deref(),
            &out,
            seed,
            split_by_clique,
        )?,
        Command::Evaluate { model, seed, out } => {
            let (m, cs, feats) = load_model_inputs(&model)?;
            let report = pipeline::evaluate(&m, &feats, &positive_pairs(&cs), &cs, seed)?;
            let text = serde_json::to_string_pretty(&report).expect("report serializes");
            if let Some(path) = out {
                write_file(&path, &text)?;
            }
            emit(json!({
                "stage": "evaluate",
                "prec_at_1": report.prec_at_1,
                "n_batches": report.n_batches,
                "dropped_pairs": report.dropped_pairs,
            }));
        }
        Command::Embed { model, out } => {
            let index = build_index(&model)?;
            write_file(
                &out,
                &serde_json::to_string(&index).expect("index serializes"),
            )?;
            emit(json!({"stage": "embed", "tracks": index.len(), "dim": index.dim(), "out": out}));
        }
        Command::Nearest { model, query, k } => {
            let index = build_index(&model)?;
            for (track, d) in index.nearest(&query, k)? {
                println!("{track}\t{d:.6}");
            }
        }
        Command::Selftest { instances } => selftest(instances)?,
    }
    Ok(())
}

fn load_model_inputs(
    args: &ModelArgs,
) -> Result<(SiameseModel, CliqueSet, siamese::FeatureStore), CliError> {
    let model = SiameseModel::load(&args.model)?;
    let cs = manifest(&args.manifest)?;
    let feats = pipeline::load_features(&cs, &args.features, model.config().input_shape.1, 0)?;
    Ok((model, cs, feats))
}

fn build_index(args: &ModelArgs) -> Result<EmbeddingIndex, CliError> {
    let (model, cs, feats) = load_model_inputs(args)?;
    Ok(embed_tracks(&model, &feats, &cs.track_ids())?)
}

fn train(
    manifest_path: &Path,
    features: &Path,
    config: Option<&Path>,
    out: &Path,
    seed_override: Option<u64>,
    split_by_clique: bool,
) -> Result<(), CliError> {
    let mut cfg = match config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = seed_override {
        cfg.train.seed = s;
    }
    cfg.split_by_clique |= split_by_clique;
    let master = cfg.train.seed;
    let cs = manifest(manifest_path)?;
    let feats = pipeline::load_features(&cs, features, cfg.architecture.input_shape.1, 0)?;
    let mode = match (cfg.split_by_clique, cfg.val_size) {
        (true, Some(n)) => SplitMode::ByClique { val_cliques: n },
        (false, Some(n)) => SplitMode::ByPair { val_pairs: n },
        (by_clique, None) => SplitMode::default_for(&cs, by_clique),
    };
    let sp = pipeline::split(&cs, mode, master)?;
    if cfg.split_by_clique {
        sp.val_cliques
            .write_manifest(out.with_extension("val.txt"))?;
    }
    let model = SiameseModel::new(cfg.architecture.clone(), seed::derive_seed(master, "init"))?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let start = Instant::now();
    siamese::train(&mut trainer, &sp.train_data(&feats), |m| {
        emit(json!({
            "stage": "train",
            "epoch": m.epoch,
            "steps": m.steps,
            "train_loss": m.train_loss,
            "val_loss": m.val_loss,
            "val_prec_at_1": m.val_prec_at_1,
            "wall_s": start.elapsed().as_secs_f64(),
        }));
    })?;
    trainer.model.save(out, Some(&trainer.adam))?;
    emit(json!({"stage": "train", "checkpoint": out}));
    Ok(())
}

fn selftest(instances: usize) -> Result<(), CliError> {
    let reports = oracle::gradcheck_suite(instances, 0).map_err(SiameseError::from)?;
    let mut grad_ok = true;
    for r in &reports {
        grad_ok &= r.check.passed();
        emit(json!({
            "stage": "selftest",
            "check": "gradcheck",
            "op": r.op,
            "instances": r.instances,
            "coordinates": r.check.checked,
            "skipped": r.check.skipped,
            "max_rel_err": r.check.max_rel_err,
        }));
    }
    let cqt_err = oracle::cqt_oracle_suite(5, 3.0, CANONICAL_RATE, 0)
        .map_err(|e| CliError::Failed(e.to_string()))?;
    let cqt_ok = cqt_err < oracle::CQT_TOL;
    emit(json!({"stage": "selftest", "check": "cqt-oracle", "max_rel_err": cqt_err}));
    let word = |ok: bool| if ok { "PASS" } else { "FAIL" };
    println!("gradcheck: {}, cqt-oracle: {}", word(grad_ok), word(cqt_ok));
    if grad_ok && cqt_ok {
        Ok(())
    } else {
        Err(CliError::Failed("selftest failed".into()))
    }
}
