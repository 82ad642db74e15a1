//! Twin convolutional feature extractor with shared weights, the learned
//! weighted-squared-difference comparison head and its BCE objective.

mod train;

pub use train::{
    embed_tracks, train, validate, EpochMetrics, FeatureStore, TrainData, Trainer, Validation,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cqt::{CqtSpectrogram, FLOOR_DB};
use crate::dataset::DatasetError;
use crate::eval::EvalError;
use crate::seed;
use crate::tensor::{
    load_tensors, save_tensors, AdamState, CheckpointError, Graph, NamedTensor, ParamSet, Tensor,
    TensorError, Var,
};

pub use crate::tensor::BCE_CLAMP;

#[derive(Debug, Error)]
pub enum SiameseError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid architecture: {0}")]
    InvalidConfig(String),
    #[error("training set has no cover pairs")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NumericalFault {
        epoch: usize,
        step: usize,
        detail: String,
    },
    #[error("missing features for track {0}")]
    MissingFeature(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub filters: usize,
    pub kernel: (usize, usize),
}

/// Layer stack of the feature extractor. Each conv layer is followed by ReLU
/// and 2x2 max pooling; every FC layer but the last is followed by ReLU, and
/// dropout is applied to the input of every FC layer while training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureConfig {
    pub conv_layers: Vec<ConvLayer>,
    pub fc_widths: Vec<usize>,
    /// `(frequency bins, frames)`.
    pub input_shape: (usize, usize),
    /// Initial comparison weight. Covers are labelled 1, so a negative weight
    /// makes near pairs score high; a positive start has to cross zero before
    /// the head can rank covers at all.
    pub alpha_init: f64,
    /// Every `alpha_flip_every`-th weight starts at `-alpha_init` instead (0
    /// disables). The head has no bias, so with one sign throughout it can
    /// only answer on one side of 0.5.
    pub alpha_flip_every: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            conv_layers: vec![
                ConvLayer {
                    filters: 64,
                    kernel: (5, 5),
                },
                ConvLayer {
                    filters: 32,
                    kernel: (3, 3),
                },
                ConvLayer {
                    filters: 16,
                    kernel: (3, 3),
                },
            ],
            fc_widths: vec![128, 64],
            input_shape: (crate::cqt::N_BINS, crate::cqt::DEFAULT_FRAMES),
            alpha_init: DEFAULT_ALPHA_INIT,
            alpha_flip_every: DEFAULT_ALPHA_FLIP_EVERY,
        }
    }
}

/// See [`ArchitectureConfig::alpha_init`].
pub const DEFAULT_ALPHA_INIT: f64 = -0.1;
pub const DEFAULT_ALPHA_FLIP_EVERY: usize = 4;

impl ArchitectureConfig {
    pub fn embedding_dim(&self) -> usize {
        *self
            .fc_widths
            .last()
            .expect("validated: at least one FC layer")
    }

    /// Output `(channels, height, width)` after every conv block.
    pub fn conv_output_shapes(&self) -> Result<Vec<(usize, usize, usize)>, SiameseError> {
        let (mut h, mut w) = self.input_shape;
        let mut out = Vec::with_capacity(self.conv_layers.len());
        for (i, l) in self.conv_layers.iter().enumerate() {
            let (kh, kw) = l.kernel;
            if l.filters == 0 || kh == 0 || kw == 0 || kh > h || kw > w {
                return Err(SiameseError::InvalidConfig(format!(
                    "conv layer {i}: {} filters, kernel {kh}x{kw} on a {h}x{w} map",
                    l.filters
                )));
            }
            h = (h - kh + 1).div_ceil(2);
            w = (w - kw + 1).div_ceil(2);
            out.push((l.filters, h, w));
        }
        Ok(out)
    }

    pub fn flatten_dim(&self) -> Result<usize, SiameseError> {
        let shapes = self.conv_output_shapes()?;
        let (c, h, w) = *shapes.last().ok_or_else(|| {
            SiameseError::InvalidConfig("at least one conv layer is required".into())
        })?;
        Ok(c * h * w)
    }

    pub fn validate(&self) -> Result<(), SiameseError> {
        if self.conv_layers.is_empty() {
            return Err(SiameseError::InvalidConfig(
                "at least one conv layer is required".into(),
            ));
        }
        if self.fc_widths.is_empty() || self.fc_widths.contains(&0) {
            return Err(SiameseError::InvalidConfig(
                "at least one FC layer of nonzero width is required".into(),
            ));
        }
        if !self.alpha_init.is_finite() {
            return Err(SiameseError::InvalidConfig(
                "alpha_init must be finite".into(),
            ));
        }
        self.flatten_dim().map(|_| ())
    }

    pub fn filters_non_increasing(&self) -> bool {
        self.conv_layers
            .windows(2)
            .all(|w| w[0].filters >= w[1].filters)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Pairs per mini-batch, half covers and half non-covers.
    pub batch_size: usize,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub l2_lambda: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            epochs: 5,
            dropout_rate: 0.5,
            l2_lambda: 0.005,
            lr: 0.001,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SiameseError> {
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return Err(SiameseError::InvalidConfig(format!(
                "batch_size must be even and at least 2, got {}",
                self.batch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(SiameseError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if !(self.lr >= 0.0) || !(self.l2_lambda >= 0.0) {
            return Err(SiameseError::InvalidConfig(
                "lr and l2_lambda must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Maps a log spectrogram (dB in `[FLOOR_DB, 0]`) to a `[1, 1, bins, frames]`
/// network input in `[0, 1]`.
pub fn spectrogram_input(spec: &CqtSpectrogram) -> Tensor {
    let scale = -1.0 / FLOOR_DB as f64;
    let data = spec
        .data
        .iter()
        .map(|&v| (v as f64 - FLOOR_DB as f64) * scale)
        .collect();
    Tensor::new(vec![1, 1, spec.n_bins, spec.n_frames], data).expect("spectrogram is non-empty")
}

/// Similarity `sigmoid(sum_j alpha_j (a_j - b_j)^2)`.
pub fn compare(alpha: &[f64], va: &[f64], vb: &[f64]) -> Result<f64, SiameseError> {
    if va.len() != vb.len() || alpha.len() != va.len() {
        return Err(TensorError::ShapeMismatch {
            op: "compare",
            detail: format!("alpha {}, v_a {}, v_b {}", alpha.len(), va.len(), vb.len()),
        }
        .into());
    }
    let s: f64 = alpha
        .iter()
        .zip(va.iter().zip(vb))
        .map(|(w, (a, b))| w * (a - b) * (a - b))
        .sum();
    Ok(crate::tensor::sigmoid(s))
}

/// Binary cross-entropy with the probability clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Graph handles for every model parameter, in [`SiameseModel`] order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    conv: Vec<(Var, Var)>,
    fc: Vec<(Var, Var)>,
    pub alpha: Var,
    all: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.all
    }
}

/// The shared extractor `f` and the comparison weights `alpha`. There is one
/// parameter set; both twins read it.
#[derive(Debug, Clone, PartialEq)]
pub struct SiameseModel {
    config: ArchitectureConfig,
    params: ParamSet,
}

impl SiameseModel {
    /// He-initialized weights, zero biases, `alpha` from `alpha_init` and
    /// `alpha_flip_every`.
    pub fn new(config: ArchitectureConfig, init_seed: u64) -> Result<Self, SiameseError> {
        config.validate()?;
        let mut rng = seed::rng(init_seed);
        let mut params = ParamSet::new();
        let mut channels = 1;
        for (i, l) in config.conv_layers.iter().enumerate() {
            let (kh, kw) = l.kernel;
            let fan_in = channels * kh * kw;
            params.push(
                format!("conv{i}.weight"),
                he_init(&mut rng, vec![l.filters, channels, kh, kw], fan_in),
                true,
            );
            params.push(
                format!("conv{i}.bias"),
                Tensor::zeros(vec![l.filters]),
                false,
            );
            channels = l.filters;
        }
        let mut width = config.flatten_dim()?;
        for (i, &k) in config.fc_widths.iter().enumerate() {
            params.push(
                format!("fc{i}.weight"),
                he_init(&mut rng, vec![width, k], width),
                true,
            );
            params.push(format!("fc{i}.bias"), Tensor::zeros(vec![k]), false);
            width = k;
        }
        let flip = config.alpha_flip_every;
        let alpha = (0..width)
            .map(|j| {
                if flip > 0 && j % flip == flip - 1 {
                    -config.alpha_init
                } else {
                    config.alpha_init
                }
            })
            .collect();
        params.push("alpha", Tensor::from_vec(alpha), false);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.embedding_dim()
    }

    pub fn alpha(&self) -> &[f64] {
        let i = self.params.len() - 1;
        self.params.get(i).value.data()
    }

    /// Registers every parameter on `graph`. With `trainable` false they are
    /// constants and no gradients are tracked.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BoundParams {
        let vars: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.input(p.value.clone())
                }
            })
            .collect();
        self.bind_vars(&vars)
    }

    /// Groups existing graph nodes, one per parameter in model order.
    pub fn bind_vars(&self, vars: &[Var]) -> BoundParams {
        assert_eq!(vars.len(), self.params.len(), "one node per parameter");
        let all = vars.to_vec();
        let n_conv = self.config.conv_layers.len();
        let n_fc = self.config.fc_widths.len();
        let conv = (0..n_conv).map(|i| (all[2 * i], all[2 * i + 1])).collect();
        let fc = (0..n_fc)
            .map(|i| (all[2 * (n_conv + i)], all[2 * (n_conv + i) + 1]))
            .collect();
        BoundParams {
            conv,
            fc,
            alpha: *all.last().expect("alpha is always present"),
            all,
        }
    }

    /// The feature extractor `f`: `[N, 1, bins, frames]` to `[N, embedding_dim]`.
    pub fn extract<R: Rng + ?Sized>(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        input: Var,
        dropout_rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, SiameseError> {
        let shape = graph.value(input).shape().to_vec();
        let (h, w) = self.config.input_shape;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != h || shape[3] != w {
            return Err(TensorError::ShapeMismatch {
                op: "embed",
                detail: format!("input {shape:?}, model expects [N, 1, {h}, {w}]"),
            }
            .into());
        }
        let mut x = input;
        for &(k, b) in &bound.conv {
            x = graph.conv2d(x, k, b)?;
            x = graph.relu(x)?;
            x = graph.maxpool2(x)?;
        }
        x = graph.flatten(x)?;
        let last = bound.fc.len() - 1;
        for (i, &(wt, b)) in bound.fc.iter().enumerate() {
            x = graph.dropout(x, dropout_rate, training, rng)?;
            x = graph.dense(x, wt, b)?;
            if i < last {
                x = graph.relu(x)?;
            }
        }
        Ok(x)
    }

    /// Comparison head on graph values: `v_a, v_b [N, d]` to `p [N]`.
    pub fn head(
        &self,
        graph: &mut Graph,
        bound: &BoundParams,
        va: Var,
        vb: Var,
    ) -> Result<Var, SiameseError> {
        let diff = graph.sub(va, vb)?;
        let sq = graph.square(diff)?;
        let weighted = graph.mul_row(sq, bound.alpha)?;
        let s = graph.sum_last(weighted)?;
        Ok(graph.sigmoid(s)?)
    }

    /// Inference-mode embedding of one `[1, 1, bins, frames]` input.
    pub fn embed(&self, input: &Tensor) -> Result<Vec<f64>, SiameseError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = g.input(input.clone());
        let mut unused = seed::rng(0);
        let v = self.extract(&mut g, &bound, x, 0.0, false, &mut unused)?;
        Ok(g.value(v).data().to_vec())
    }

    pub fn embed_spectrogram(&self, spec: &CqtSpectrogram) -> Result<Vec<f64>, SiameseError> {
        self.embed(&spectrogram_input(spec))
    }

    /// Inference-mode cover probability of a pair of inputs.
    pub fn predict(&self, a: &Tensor, b: &Tensor) -> Result<f64, SiameseError> {
        compare(self.alpha(), &self.embed(a)?, &self.embed(b)?)
    }

    /// Mean BCE of a batch of `(a, b, label)` pairs in one graph; returns the
    /// graph, bound parameters and loss node so callers can differentiate.
    /// Both twins of a pair share one dropout mask drawn from `rng`.
    pub fn batch_loss_graph<R: Rng + ?Sized>(
        &self,
        batch: &[(&Tensor, &Tensor, f64)],
        dropout_rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<(Graph, BoundParams, Var), SiameseError> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, true);
        let stack = |which: usize| -> Result<Tensor, SiameseError> {
            let (h, w) = self.config.input_shape;
            let mut data = Vec::with_capacity(batch.len() * h * w);
            for item in batch {
                let t = if which == 0 { item.0 } else { item.1 };
                data.extend_from_slice(t.data());
            }
            Ok(Tensor::new(vec![batch.len(), 1, h, w], data)?)
        };
        let xa = g.input(stack(0)?);
        let xb = g.input(stack(1)?);
        let mask_seed = rng.next_u64();
        let va = self.extract(
            &mut g,
            &bound,
            xa,
            dropout_rate,
            training,
            &mut seed::rng(mask_seed),
        )?;
        let vb = self.extract(
            &mut g,
            &bound,
            xb,
            dropout_rate,
            training,
            &mut seed::rng(mask_seed),
        )?;
        let p = self.head(&mut g, &bound, va, vb)?;
        let labels: Vec<f64> = batch.iter().map(|b| b.2).collect();
        let loss = g.bce(p, &labels)?;
        Ok((g, bound, loss))
    }

    /// Parameters as named tensors, plus the input shape under `meta.input_shape`.
    pub fn to_named_tensors(&self) -> Vec<NamedTensor> {
        let mut out: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|p| NamedTensor::new(p.name.clone(), p.value.clone()))
            .collect();
        let (h, w) = self.config.input_shape;
        out.push(NamedTensor::new(
            META_INPUT_SHAPE,
            Tensor::from_vec(vec![h as f64, w as f64]),
        ));
        out
    }

    /// Rebuilds a model from named tensors, inferring the architecture from
    /// parameter shapes.
    pub fn from_named_tensors(entries: &[NamedTensor]) -> Result<Self, SiameseError> {
        let find = |name: &str| entries.iter().find(|e| e.name == name).map(|e| &e.tensor);
        let bad = |m: &str| SiameseError::InvalidConfig(format!("checkpoint: {m}"));
        let shape = find(META_INPUT_SHAPE).ok_or_else(|| bad("missing input shape"))?;
        let input_shape = (shape.data()[0] as usize, shape.data()[1] as usize);
        let mut conv_layers = Vec::new();
        while let Some(k) = find(&format!("conv{}.weight", conv_layers.len())) {
            let s = k.shape();
            if s.len() != 4 {
                return Err(bad("conv weight must be rank 4"));
            }
            conv_layers.push(ConvLayer {
                filters: s[0],
                kernel: (s[2], s[3]),
            });
        }
        let mut fc_widths = Vec::new();
        while let Some(w) = find(&format!("fc{}.weight", fc_widths.len())) {
            if w.shape().len() != 2 {
                return Err(bad("fc weight must be rank 2"));
            }
            fc_widths.push(w.shape()[1]);
        }
        let config = ArchitectureConfig {
            conv_layers,
            fc_widths,
            input_shape,
            alpha_init: DEFAULT_ALPHA_INIT,
            alpha_flip_every: DEFAULT_ALPHA_FLIP_EVERY,
        };
        let mut model = Self::new(config, 0)?;
        for i in 0..model.params.len() {
            let name = model.params.get(i).name.clone();
            let t = find(&name).ok_or_else(|| bad(&format!("missing {name}")))?;
            if t.shape() != model.params.get(i).value.shape() {
                return Err(bad(&format!("{name} has shape {:?}", t.shape())));
            }
            model.params.get_mut(i).value = t.clone();
        }
        Ok(model)
    }

    /// Writes the model, and the optimizer moments when given, to one checkpoint.
    pub fn save(
        &self,
        path: impl AsRef<std::path::Path>,
        adam: Option<&AdamState>,
    ) -> Result<(), SiameseError> {
        let mut entries = self.to_named_tensors();
        if let Some(st) = adam {
            entries.push(NamedTensor::new(
                "adam.step",
                Tensor::scalar(st.step as f64),
            ));
            for (i, p) in self.params.iter().enumerate() {
                entries.push(NamedTensor::new(
                    format!("adam.m.{}", p.name),
                    st.m[i].clone(),
                ));
                entries.push(NamedTensor::new(
                    format!("adam.v.{}", p.name),
                    st.v[i].clone(),
                ));
            }
        }
        save_tensors(path, &entries)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, SiameseError> {
        Self::from_named_tensors(&load_tensors(path)?)
    }

    /// Restores ADAM moments saved by [`SiameseModel::save`], if present.
    pub fn load_adam(
        &self,
        path: impl AsRef<std::path::Path>,
        config: crate::tensor::AdamConfig,
    ) -> Result<Option<AdamState>, SiameseError> {
        let entries = load_tensors(path)?;
        let find = |name: &str| {
            entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| e.tensor.clone())
        };
        let Some(step) = find("adam.step") else {
            return Ok(None);
        };
        let mut st = AdamState::new(&self.params, config);
        st.step = step.data()[0] as u64;
        for (i, p) in self.params.iter().enumerate() {
            if let (Some(m), Some(v)) = (
                find(&format!("adam.m.{}", p.name)),
                find(&format!("adam.v.{}", p.name)),
            ) {
                st.m[i] = m;
                st.v[i] = v;
            }
        }
        Ok(Some(st))
    }
}

const META_INPUT_SHAPE: &str = "meta.input_shape";

fn he_init<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ArchitectureConfig {
        ArchitectureConfig {
            conv_layers: vec![ConvLayer {
                filters: 2,
                kernel: (3, 3),
            }],
            fc_widths: vec![4],
            input_shape: (8, 10),
            alpha_init: DEFAULT_ALPHA_INIT,
            alpha_flip_every: 0,
        }
    }

    fn noise_input(seed_: u64, h: usize, w: usize) -> Tensor {
        let mut r = seed::rng(seed_);
        Tensor::new(
            vec![1, 1, h, w],
            (0..h * w).map(|_| r.random::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn alpha_starts_with_both_signs() {
        let m = SiameseModel::new(ArchitectureConfig::default(), 1).unwrap();
        let a = m.alpha();
        assert_eq!(a.len(), 64);
        assert_eq!(a.iter().filter(|&&x| x == DEFAULT_ALPHA_INIT).count(), 48);
        assert_eq!(a.iter().filter(|&&x| x == -DEFAULT_ALPHA_INIT).count(), 16);
        assert_eq!(a[3], -DEFAULT_ALPHA_INIT);
    }

    #[test]
    fn default_architecture_shapes() {
        let cfg = ArchitectureConfig::default();
        cfg.validate().unwrap();
        assert!(cfg.filters_non_increasing());
        assert_eq!(cfg.embedding_dim(), 64);
        assert_eq!(
            cfg.conv_output_shapes().unwrap(),
            vec![(64, 40, 63), (32, 19, 31), (16, 9, 15)]
        );
        assert_eq!(cfg.flatten_dim().unwrap(), 2160);
    }

    #[test]
    fn invalid_architectures_are_rejected() {
        let mut c = tiny_config();
        c.conv_layers.clear();
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.fc_widths.clear();
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.conv_layers[0].kernel = (9, 3);
        assert!(c.validate().is_err());
        let mut t = TrainConfig::default();
        t.batch_size = 3;
        assert!(t.validate().is_err());
    }

    #[test]
    fn compare_closed_forms() {
        let v = [0.3, -1.0, 2.5];
        assert_eq!(compare(&[1.0, 2.0, -3.0], &v, &v).unwrap(), 0.5);
        assert_eq!(compare(&[0.0; 3], &v, &[9.0, 9.0, 9.0]).unwrap(), 0.5);
        let p = compare(&[1.0, -1.0], &[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((p - 1.0 / (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        assert!((p - 0.7311).abs() < 1e-4);
        assert!(compare(&[1.0], &[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(0.5, 1.0) - 2f64.ln()).abs() < 1e-15);
        assert!((bce_loss(1.0 - 1e-7, 1.0) - 1e-7).abs() < 1e-12);
        assert!((bce_loss(0.9, 0.0) - 10f64.ln()).abs() < 1e-12);
        assert!(bce_loss(0.0, 1.0).is_finite());
        assert!(bce_loss(1.0, 0.0).is_finite());
    }

    #[test]
    fn embedding_is_deterministic_and_shared() {
        let m = SiameseModel::new(tiny_config(), 1).unwrap();
        let x = noise_input(2, 8, 10);
        let y = noise_input(3, 8, 10);
        let e1 = m.embed(&x).unwrap();
        assert_eq!(e1, m.embed(&x).unwrap());
        assert_eq!(e1.len(), 4);

        // Perturbing one extractor weight moves both twins' outputs.
        let ey = m.embed(&y).unwrap();
        let mut m2 = m.clone();
        m2.params_mut().get_mut(0).value.data_mut()[0] += 0.5;
        assert_ne!(m2.embed(&x).unwrap(), e1);
        assert_ne!(m2.embed(&y).unwrap(), ey);
    }

    #[test]
    fn seeded_models_are_reproducible() {
        let a = SiameseModel::new(tiny_config(), 7).unwrap();
        let b = SiameseModel::new(tiny_config(), 7).unwrap();
        assert_eq!(a, b);
        let floor = Tensor::zeros(vec![1, 1, 8, 10]);
        let ea = a.embed(&floor).unwrap();
        assert!(ea.iter().all(|v| v.is_finite()));
        assert_eq!(ea, b.embed(&floor).unwrap());
        assert_ne!(a, SiameseModel::new(tiny_config(), 8).unwrap());
    }

    #[test]
    fn embed_rejects_wrong_shape() {
        let m = SiameseModel::new(tiny_config(), 1).unwrap();
        assert!(m.embed(&Tensor::zeros(vec![1, 1, 8, 11])).is_err());
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        let mut cfg = tiny_config();
        cfg.conv_layers.push(ConvLayer {
            filters: 2,
            kernel: (2, 2),
        });
        cfg.fc_widths = vec![6, 3];
        let m = SiameseModel::new(cfg.clone(), 5).unwrap();
        let adam = AdamState::new(m.params(), Default::default());
        m.save(&p, Some(&adam)).unwrap();
        let back = SiameseModel::load(&p).unwrap();
        assert_eq!(back.config().conv_layers, cfg.conv_layers);
        assert_eq!(back.config().fc_widths, cfg.fc_widths);
        for (a, b) in m.params().iter().zip(back.params().iter()) {
            for (x, y) in a.value.data().iter().zip(b.value.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let st = back.load_adam(&p, Default::default()).unwrap().unwrap();
        assert_eq!(st.step, 0);
    }
}
