//! Mini-batch training of the twin network.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use super::{bce_loss, compare, SiameseError, SiameseModel, TrainConfig};
use crate::dataset::{sample_negatives_excluding, CliqueSet, PairSample};
use crate::eval::{prec_at_1, prec_at_1_by_clique, EmbeddingIndex, EvalReport, EVAL_BATCH_SIZE};
use crate::seed;
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, Tensor, TensorError};

/// Network inputs by track id, each `[1, 1, bins, frames]`.
pub type FeatureStore = BTreeMap<String, Tensor>;

#[derive(Debug, Clone)]
pub struct Validation<'a> {
    /// Labelled pairs for the validation loss.
    pub pairs: Vec<PairSample>,
    /// Cover pairs batched for Prec@1.
    pub eval_pairs: Vec<PairSample>,
    /// When set, Prec@1 batches never repeat a clique.
    pub cliques: Option<&'a CliqueSet>,
}

#[derive(Debug, Clone)]
pub struct TrainData<'a> {
    pub features: &'a FeatureStore,
    pub positives: Vec<PairSample>,
    /// Cliques from which fresh non-cover pairs are drawn every epoch.
    pub negative_pool: &'a CliqueSet,
    /// Pairs never drawn as training negatives.
    pub exclude: HashSet<(String, String)>,
    pub validation: Option<Validation<'a>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_prec_at_1: Option<f64>,
}

/// Model plus optimizer state. Each pair gets its own graph; the twins share
/// one set of parameter nodes inside it, so their gradients accumulate.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: SiameseModel,
    pub adam: AdamState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: SiameseModel, config: TrainConfig) -> Result<Self, SiameseError> {
        config.validate()?;
        let adam = AdamState::new(model.params(), adam_config(&config));
        Ok(Self {
            model,
            adam,
            config,
        })
    }

    pub fn resume(
        model: SiameseModel,
        adam: AdamState,
        config: TrainConfig,
    ) -> Result<Self, SiameseError> {
        config.validate()?;
        let mut adam = adam;
        adam.config = adam_config(&config);
        Ok(Self {
            model,
            adam,
            config,
        })
    }

    /// BCE of one pair and its gradient for every parameter.
    pub fn pair_gradients(
        &self,
        a: &Tensor,
        b: &Tensor,
        label: f64,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Tensor>), SiameseError> {
        let mut g = Graph::new();
        let bound = self.model.bind(&mut g, true);
        let rate = self.config.dropout_rate;
        let xa = g.input(a.clone());
        let xb = g.input(b.clone());
        // Both twins drop the same units, so the distance compares the songs
        // rather than two independent masks.
        let va =
            self.model
                .extract(&mut g, &bound, xa, rate, true, &mut seed::rng(dropout_seed))?;
        let vb =
            self.model
                .extract(&mut g, &bound, xb, rate, true, &mut seed::rng(dropout_seed))?;
        let p = self.model.head(&mut g, &bound, va, vb)?;
        let loss = g.bce(p, &[label])?;
        g.backward(loss)?;
        let grads = bound
            .vars()
            .iter()
            .zip(self.model.params().iter())
            .map(|(&v, p)| {
                g.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(p.value.shape().to_vec()))
            })
            .collect();
        Ok((g.value(loss).data()[0], grads))
    }

    /// One optimizer step on the mean BCE of `batch`. Pair gradients are
    /// computed in parallel and summed in batch order.
    pub fn step(
        &mut self,
        batch: &[(&Tensor, &Tensor, f64)],
        step_seed: u64,
    ) -> Result<f64, SiameseError> {
        if batch.is_empty() {
            return Err(SiameseError::EmptyDataset);
        }
        let results = batch
            .par_iter()
            .enumerate()
            .map(|(i, (a, b, y))| {
                self.pair_gradients(
                    a,
                    b,
                    *y,
                    seed::derive_indexed(step_seed, "dropout", &[i as u64]),
                )
            })
            .collect::<Vec<_>>();
        let scale = 1.0 / batch.len() as f64;
        let mut total = self.model.params().zeros_like();
        let mut loss = 0.0;
        for r in results {
            let (l, grads) = r?;
            loss += l * scale;
            for (acc, g) in total.iter_mut().zip(grads) {
                for (x, y) in acc.data_mut().iter_mut().zip(g.data()) {
                    *x += y * scale;
                }
            }
        }
        if !loss.is_finite() || total.iter().any(|t| !t.all_finite()) {
            return Err(TensorError::NumericalFault {
                op: "batch gradient",
            }
            .into());
        }
        adam_step(self.model.params_mut(), &total, &mut self.adam)?;
        Ok(loss)
    }
}

fn adam_config(cfg: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: cfg.lr,
        l2_lambda: cfg.l2_lambda,
        ..AdamConfig::default()
    }
}

fn feature<'a>(features: &'a FeatureStore, id: &str) -> Result<&'a Tensor, SiameseError> {
    features
        .get(id)
        .ok_or_else(|| SiameseError::MissingFeature(id.to_string()))
}

/// Inference embeddings for `ids`, computed in parallel.
pub fn embed_tracks(
    model: &SiameseModel,
    features: &FeatureStore,
    ids: &[String],
) -> Result<EmbeddingIndex, SiameseError> {
    let vecs = ids
        .par_iter()
        .map(|id| model.embed(feature(features, id)?))
        .collect::<Result<Vec<_>, _>>()?;
    let mut index = EmbeddingIndex::new(model.embedding_dim());
    for (id, v) in ids.iter().zip(vecs) {
        index.insert(id.clone(), v)?;
    }
    Ok(index)
}

/// Validation loss and Prec@1 of `model`.
pub fn validate(
    model: &SiameseModel,
    features: &FeatureStore,
    val: &Validation<'_>,
    eval_seed: u64,
) -> Result<(f64, Option<EvalReport>), SiameseError> {
    let mut ids: Vec<String> = val
        .pairs
        .iter()
        .chain(&val.eval_pairs)
        .flat_map(|p| [p.track_a.clone(), p.track_b.clone()])
        .collect();
    ids.sort();
    ids.dedup();
    let index = embed_tracks(model, features, &ids)?;
    let alpha = model.alpha();
    let mut loss = 0.0;
    for p in &val.pairs {
        let prob = compare(
            alpha,
            index.get(&p.track_a).expect("embedded above"),
            index.get(&p.track_b).expect("embedded above"),
        )?;
        loss += bce_loss(prob, p.label as f64);
    }
    let loss = if val.pairs.is_empty() {
        f64::NAN
    } else {
        loss / val.pairs.len() as f64
    };
    let report = if val.eval_pairs.is_empty() {
        None
    } else {
        Some(match val.cliques {
            Some(cs) => {
                prec_at_1_by_clique(&index, &val.eval_pairs, cs, EVAL_BATCH_SIZE, eval_seed)?
            }
            None => prec_at_1(&index, &val.eval_pairs, EVAL_BATCH_SIZE, eval_seed)?,
        })
    };
    Ok((loss, report))
}

/// Trains for `config.epochs` epochs. Every epoch draws a fresh set of
/// negatives as large as the positive set, interleaves the two so each
/// batch is balanced, and reports metrics through `on_epoch`.
pub fn train(
    trainer: &mut Trainer,
    data: &TrainData<'_>,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>, SiameseError> {
    if data.positives.is_empty() {
        return Err(SiameseError::EmptyDataset);
    }
    let cfg = trainer.config.clone();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let e = epoch as u64;
        let mut pos = data.positives.clone();
        let mut neg = sample_negatives_excluding(
            data.negative_pool,
            pos.len(),
            seed::derive_indexed(cfg.seed, "negatives", &[e]),
            &data.exclude,
        )?;
        let mut order_rng = seed::rng(seed::derive_indexed(cfg.seed, "order", &[e]));
        pos.shuffle(&mut order_rng);
        neg.shuffle(&mut order_rng);
        let pairs: Vec<&PairSample> = pos.iter().zip(&neg).flat_map(|(p, n)| [p, n]).collect();

        let mut loss_sum = 0.0;
        let mut steps = 0;
        for (step, chunk) in pairs.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|p| {
                    Ok((
                        feature(data.features, &p.track_a)?,
                        feature(data.features, &p.track_b)?,
                        p.label as f64,
                    ))
                })
                .collect::<Result<Vec<_>, SiameseError>>()?;
            let step_seed = seed::derive_indexed(cfg.seed, "step", &[e, step as u64]);
            let loss = trainer.step(&batch, step_seed).map_err(|err| match err {
                SiameseError::Tensor(TensorError::NumericalFault { op }) => {
                    SiameseError::NumericalFault {
                        epoch,
                        step,
                        detail: format!("non-finite value in {op}"),
                    }
                }
                other => other,
            })?;
            loss_sum += loss * chunk.len() as f64;
            steps += 1;
        }

        let (val_loss, val_prec) = match &data.validation {
            Some(v) => {
                let (l, r) = validate(
                    &trainer.model,
                    data.features,
                    v,
                    seed::derive_seed(cfg.seed, "eval"),
                )?;
                (Some(l).filter(|l| l.is_finite()), r.map(|r| r.prec_at_1))
            }
            None => (None, None),
        };
        let m = EpochMetrics {
            epoch,
            steps,
            train_loss: loss_sum / pairs.len() as f64,
            val_loss,
            val_prec_at_1: val_prec,
        };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::super::{ArchitectureConfig, ConvLayer};
    use super::*;
    use rand::Rng;

    fn tiny() -> ArchitectureConfig {
        ArchitectureConfig {
            conv_layers: vec![ConvLayer {
                filters: 2,
                kernel: (3, 3),
            }],
            fc_widths: vec![5, 3],
            input_shape: (6, 8),
            alpha_init: 0.0,
            alpha_flip_every: 0,
        }
    }

    fn store(ids: &[&str]) -> FeatureStore {
        ids.iter()
            .enumerate()
            .map(|(i, id)| {
                let mut r = seed::rng(100 + i as u64);
                let t = Tensor::new(
                    vec![1, 1, 6, 8],
                    (0..48).map(|_| r.random::<f64>()).collect(),
                )
                .unwrap();
                (id.to_string(), t)
            })
            .collect()
    }

    #[test]
    fn step_matches_batched_graph_without_dropout() {
        let model = SiameseModel::new(tiny(), 3).unwrap();
        let cfg = TrainConfig {
            dropout_rate: 0.0,
            l2_lambda: 0.0,
            ..Default::default()
        };
        let trainer = Trainer::new(model.clone(), cfg).unwrap();
        let f = store(&["a", "b", "c"]);
        let batch = [(&f["a"], &f["b"], 1.0), (&f["a"], &f["c"], 0.0)];

        let mut rng = seed::rng(0);
        let (mut g, bound, loss) = model
            .batch_loss_graph(&batch, 0.0, false, &mut rng)
            .unwrap();
        g.backward(loss).unwrap();
        let mut per = model.params().zeros_like();
        let mut l = 0.0;
        for (a, b, y) in batch {
            let (li, gi) = trainer.pair_gradients(a, b, y, 0).unwrap();
            l += li / 2.0;
            for (acc, x) in per.iter_mut().zip(gi) {
                for (s, v) in acc.data_mut().iter_mut().zip(x.data()) {
                    *s += v / 2.0;
                }
            }
        }
        assert!((l - g.value(loss).data()[0]).abs() < 1e-12);
        for (v, acc) in bound.vars().iter().zip(&per) {
            let full = g.grad(*v).unwrap();
            for (x, y) in full.data().iter().zip(acc.data()) {
                assert!((x - y).abs() < 1e-10, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn training_is_deterministic() {
        let groups = vec![
            ("A".to_string(), vec!["a1", "a2"]),
            ("B".to_string(), vec!["b1", "b2"]),
            ("C".to_string(), vec!["c1", "c2"]),
        ];
        let cs = CliqueSet::from_groups(groups.into_iter().map(|(c, m)| {
            (
                c,
                m.into_iter()
                    .map(|t| crate::dataset::Track::new(t, None))
                    .collect(),
            )
        }))
        .unwrap();
        let f = store(&["a1", "a2", "b1", "b2", "c1", "c2"]);
        let data = TrainData {
            features: &f,
            positives: crate::dataset::positive_pairs(&cs),
            negative_pool: &cs,
            exclude: HashSet::new(),
            validation: Some(Validation {
                pairs: crate::dataset::positive_pairs(&cs),
                eval_pairs: Vec::new(),
                cliques: None,
            }),
        };
        let cfg = TrainConfig {
            batch_size: 2,
            epochs: 2,
            ..Default::default()
        };
        let run = || {
            let mut t = Trainer::new(SiameseModel::new(tiny(), 1).unwrap(), cfg.clone()).unwrap();
            let h = train(&mut t, &data, |_| {}).unwrap();
            (h, t.model)
        };
        let (h1, m1) = run();
        let (h2, m2) = run();
        assert_eq!(h1, h2);
        assert_eq!(m1, m2);
        assert_eq!(h1.len(), 2);
        assert_eq!(h1[0].steps, 3);
        assert!(h1[0].val_loss.is_some());
    }

    #[test]
    fn empty_positives_are_rejected() {
        let cs = CliqueSet::default();
        let f = FeatureStore::new();
        let data = TrainData {
            features: &f,
            positives: Vec::new(),
            negative_pool: &cs,
            exclude: HashSet::new(),
            validation: None,
        };
        let mut t = Trainer::new(
            SiameseModel::new(tiny(), 1).unwrap(),
            TrainConfig::default(),
        )
        .unwrap();
        assert!(matches!(
            train(&mut t, &data, |_| {}),
            Err(SiameseError::EmptyDataset)
        ));
    }
}
