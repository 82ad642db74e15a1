//! Independent reference implementations used to check the fast paths: a
//! direct per-bin DFT constant-Q transform and central finite differences
//! for every differentiable graph op.

use std::f64::consts::PI;

use rand::Rng;

use crate::cqt::{CqtError, CqtParams, FLOOR_DB};
use crate::seed;
use crate::siamese::{ArchitectureConfig, ConvLayer, SiameseModel};
use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Constant-Q magnitudes evaluated term by term, with the complex exponential
/// referenced to absolute sample time. Row-major `[n_bins][n_frames]`.
pub fn naive_cqt(
    samples: &[f32],
    sample_rate: u32,
    params: &CqtParams,
) -> Result<Vec<f64>, CqtError> {
    let sr = sample_rate as f64;
    let b = params.bins_per_octave as f64;
    let q = 1.0 / (2f64.powf(1.0 / b) - 1.0);
    let n_frames = samples.len().div_ceil(params.hop_samples).max(1);
    let mut out = Vec::with_capacity(params.n_bins * n_frames);
    for k in 0..params.n_bins {
        let f = params.fmin_hz * 2f64.powf(k as f64 / b);
        if f >= sr / 2.0 {
            return Err(CqtError::InvalidParam(format!(
                "bin {k} at {f} Hz exceeds Nyquist"
            )));
        }
        let len = (q * sr / f).ceil() as usize;
        for t in 0..n_frames {
            let start = (t * params.hop_samples) as i64 - (len / 2) as i64;
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..len {
                let idx = start + n as i64;
                if idx < 0 || idx >= samples.len() as i64 {
                    continue;
                }
                let x = samples[idx as usize] as f64;
                let w = (PI * n as f64 / len as f64).sin().powi(2);
                let phase = -2.0 * PI * f * idx as f64 / sr;
                re += x * w * phase.cos();
                im += x * w * phase.sin();
            }
            out.push(re.hypot(im) / len as f64);
        }
    }
    Ok(out)
}

/// dB relative to the maximum, floored, computed from [`naive_cqt`] output.
pub fn naive_log_normalize(mags: &[f64]) -> Vec<f64> {
    let peak = mags.iter().cloned().fold(0.0, f64::max);
    mags.iter()
        .map(|&m| {
            if peak > 0.0 && m > 0.0 {
                (20.0 * (m / peak).log10()).max(FLOOR_DB as f64)
            } else {
                FLOOR_DB as f64
            }
        })
        .collect()
}

/// Largest elementwise error between two magnitude arrays, relative to the
/// reference peak.
pub fn max_relative_error(actual: &[f64], reference: &[f64]) -> f64 {
    let peak = reference
        .iter()
        .cloned()
        .fold(0.0, |m: f64, v| m.max(v.abs()));
    actual
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / peak.max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}

/// Central-difference step.
pub const FD_EPS: f64 = 1e-4;
/// Accepted relative error between analytic and numeric gradients.
pub const FD_TOL: f64 = 1e-3;
/// Gradients smaller than this in magnitude are compared absolutely.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink (relu sign, pooling
    /// winner or loss clamp) and so have no finite-difference reference.
    pub skipped: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            checked: self.checked + other.checked,
            skipped: self.skipped + other.skipped,
        }
    }

    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < FD_TOL
    }
}

/// Compares the analytic gradient of the scalar built by `build` against
/// central differences, for every coordinate of every input in `wrt`.
pub fn gradcheck<F>(inputs: &[Tensor], wrt: &[usize], build: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var, TensorError>,
{
    let run = |vals: &[Tensor], grads: bool| -> Result<(Graph, Vec<Var>, Var), TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if grads && wrt.contains(&i) {
                    g.param(t.clone())
                } else {
                    g.input(t.clone())
                }
            })
            .collect();
        let out = build(&mut g, &vars)?;
        Ok((g, vars, out))
    };
    let (mut g, vars, out) = run(inputs, true)?;
    let base_branches = g.branch_fingerprint();
    g.backward(out)?;

    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for &i in wrt {
        let analytic = g
            .grad(vars[i])
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            let mut eval = |v: f64| -> Result<(f64, bool), TensorError> {
                work[i].data_mut()[j] = v;
                let (g2, _, o) = run(&work, false)?;
                Ok((
                    g2.value(o).data()[0],
                    g2.branch_fingerprint() == base_branches,
                ))
            };
            let (fp, same_p) = eval(orig + FD_EPS)?;
            let (fm, same_m) = eval(orig - FD_EPS)?;
            work[i].data_mut()[j] = orig;
            if !(same_p && same_m) {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * FD_EPS);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FD_FLOOR);
            report.max_rel_err = report.max_rel_err.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("non-empty")
}

/// Reduces `out` to a scalar through fixed random weights so every output
/// coordinate contributes a distinct amount to the gradient.
fn weighted_sum(g: &mut Graph, out: Var, seed_: u64) -> Result<Var, TensorError> {
    let shape = g.value(out).shape().to_vec();
    let w = random_tensor(&mut seed::rng(seed_), shape, -1.0, 1.0);
    let w = g.input(w);
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

/// Names of the ops covered by [`op_gradcheck`].
pub const GRADCHECK_OPS: &[&str] = &[
    "conv2d", "maxpool2", "dense", "relu", "sigmoid", "square", "dropout", "reshape", "flatten",
    "add", "sub", "mul", "mul_row", "sum_last", "sum", "mean", "bce",
];

/// Gradient check of one op on one seeded random instance.
pub fn op_gradcheck(op: &str, instance_seed: u64) -> Result<GradCheck, TensorError> {
    let mut rng = seed::rng(instance_seed);
    let ws = seed::derive_seed(instance_seed, "weights");
    let n = rng.random_range(1..=3);
    let c = rng.random_range(1..=2);
    let h = rng.random_range(3..=6);
    let w = rng.random_range(3..=6);
    let d = rng.random_range(2..=5);
    let x4 = || {
        random_tensor(
            &mut seed::rng(seed::derive_indexed(instance_seed, "x", &[1])),
            vec![n, c, h, w],
            -1.0,
            1.0,
        )
    };
    let x2 = |s: u64| {
        random_tensor(
            &mut seed::rng(seed::derive_indexed(instance_seed, "x", &[s])),
            vec![n, d],
            -1.0,
            1.0,
        )
    };
    match op {
        "conv2d" => {
            let f = rng.random_range(1..=3);
            let kh = rng.random_range(1..=3);
            let kw = rng.random_range(1..=3);
            let inputs = [
                x4(),
                random_tensor(&mut rng, vec![f, c, kh, kw], -1.0, 1.0),
                random_tensor(&mut rng, vec![f], -0.5, 0.5),
            ];
            gradcheck(&inputs, &[0, 1, 2], |g, v| {
                let y = g.conv2d(v[0], v[1], v[2])?;
                weighted_sum(g, y, ws)
            })
        }
        "maxpool2" => gradcheck(&[x4()], &[0], |g, v| {
            let y = g.maxpool2(v[0])?;
            weighted_sum(g, y, ws)
        }),
        "dense" => {
            let k = rng.random_range(1..=4);
            let inputs = [
                x2(1),
                random_tensor(&mut rng, vec![d, k], -1.0, 1.0),
                random_tensor(&mut rng, vec![k], -0.5, 0.5),
            ];
            gradcheck(&inputs, &[0, 1, 2], |g, v| {
                let y = g.dense(v[0], v[1], v[2])?;
                weighted_sum(g, y, ws)
            })
        }
        "relu" | "sigmoid" | "square" | "flatten" => gradcheck(&[x4()], &[0], |g, v| {
            let y = match op {
                "relu" => g.relu(v[0])?,
                "sigmoid" => g.sigmoid(v[0])?,
                "square" => g.square(v[0])?,
                _ => g.flatten(v[0])?,
            };
            weighted_sum(g, y, ws)
        }),
        "dropout" => {
            let mask_seed = seed::derive_seed(instance_seed, "mask");
            gradcheck(&[x2(1)], &[0], |g, v| {
                let y = g.dropout(v[0], 0.5, true, &mut seed::rng(mask_seed))?;
                weighted_sum(g, y, ws)
            })
        }
        "reshape" => gradcheck(&[x4()], &[0], |g, v| {
            let y = g.reshape(v[0], vec![n * c, h * w])?;
            weighted_sum(g, y, ws)
        }),
        "add" | "sub" | "mul" => gradcheck(&[x2(1), x2(2)], &[0, 1], |g, v| {
            let y = match op {
                "add" => g.add(v[0], v[1])?,
                "sub" => g.sub(v[0], v[1])?,
                _ => g.mul(v[0], v[1])?,
            };
            weighted_sum(g, y, ws)
        }),
        "mul_row" => {
            let row = random_tensor(&mut rng, vec![d], -1.0, 1.0);
            gradcheck(&[x2(1), row], &[0, 1], |g, v| {
                let y = g.mul_row(v[0], v[1])?;
                weighted_sum(g, y, ws)
            })
        }
        "sum_last" => gradcheck(&[x2(1)], &[0], |g, v| {
            let y = g.sum_last(v[0])?;
            weighted_sum(g, y, ws)
        }),
        "sum" => gradcheck(&[x4()], &[0], |g, v| g.sum(v[0])),
        "mean" => gradcheck(&[x4()], &[0], |g, v| g.mean(v[0])),
        "bce" => {
            let p = random_tensor(&mut rng, vec![d], 0.05, 0.95);
            let labels: Vec<f64> = (0..d).map(|_| f64::from(rng.random_bool(0.5))).collect();
            gradcheck(&[p], &[0], |g, v| g.bce(v[0], &labels))
        }
        other => Err(TensorError::InvalidParam {
            op: "gradcheck",
            detail: format!("unknown op {other}"),
        }),
    }
}

/// A two-filter, four-dimensional twin network for end-to-end checks.
pub fn tiny_architecture() -> ArchitectureConfig {
    ArchitectureConfig {
        conv_layers: vec![ConvLayer {
            filters: 2,
            kernel: (3, 3),
        }],
        fc_widths: vec![4],
        input_shape: (8, 10),
        alpha_init: 1.0,
        alpha_flip_every: 0,
    }
}

/// Gradient check of the full twin-extractor, comparison head and BCE loss
/// with respect to every parameter, on a random pair with dropout active.
pub fn pipeline_gradcheck(instance_seed: u64) -> Result<GradCheck, TensorError> {
    let arch = tiny_architecture();
    let model =
        SiameseModel::new(arch.clone(), seed::derive_seed(instance_seed, "init")).map_err(|e| {
            TensorError::InvalidParam {
                op: "gradcheck",
                detail: e.to_string(),
            }
        })?;
    let mut rng = seed::rng(instance_seed);
    let (h, w) = arch.input_shape;
    let mut inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
    // Alpha of either sign exercises both sides of the head.
    let alpha_idx = inputs.len() - 1;
    inputs[alpha_idx] = random_tensor(&mut rng, vec![arch.embedding_dim()], -1.0, 1.0);
    let n_params = inputs.len();
    inputs.push(random_tensor(&mut rng, vec![1, 1, h, w], 0.0, 1.0));
    inputs.push(random_tensor(&mut rng, vec![1, 1, h, w], 0.0, 1.0));
    let label = f64::from(rng.random_bool(0.5));
    let mask_seed = seed::derive_seed(instance_seed, "mask");
    let wrt: Vec<usize> = (0..n_params).collect();
    gradcheck(&inputs, &wrt, |g, v| {
        let bound = model.bind_vars(&v[..n_params]);
        let (xa, xb) = (v[n_params], v[n_params + 1]);
        let mut mask_rng = seed::rng(mask_seed);
        let map = |e: crate::siamese::SiameseError| TensorError::InvalidParam {
            op: "gradcheck",
            detail: e.to_string(),
        };
        let va = model
            .extract(g, &bound, xa, 0.5, true, &mut mask_rng)
            .map_err(map)?;
        let vb = model
            .extract(g, &bound, xb, 0.5, true, &mut mask_rng)
            .map_err(map)?;
        let p = model.head(g, &bound, va, vb).map_err(map)?;
        g.bce(p, &[label])
    })
}

/// Outcome of the gradient-check suite for one op.
#[derive(Debug, Clone, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub instances: usize,
    pub check: GradCheck,
}

/// Runs [`op_gradcheck`] on `instances` seeds for every op, then
/// [`pipeline_gradcheck`] on as many seeds, reported under `"pipeline"`.
pub fn gradcheck_suite(instances: usize, master_seed: u64) -> Result<Vec<OpReport>, TensorError> {
    let mut out = Vec::with_capacity(GRADCHECK_OPS.len() + 1);
    for &op in GRADCHECK_OPS.iter().chain(&["pipeline"]) {
        let mut check = GradCheck::default();
        for i in 0..instances {
            let s = seed::derive_indexed(master_seed, op, &[i as u64]);
            let r = if op == "pipeline" {
                pipeline_gradcheck(s)?
            } else {
                op_gradcheck(op, s)?
            };
            check = check.merge(r);
        }
        out.push(OpReport {
            op,
            instances,
            check,
        });
    }
    Ok(out)
}

/// Largest error, relative to the spectrogram peak, between the fast
/// transform and [`naive_cqt`] on `n_signals` seeded white-noise clips of
/// `seconds` at `sample_rate`.
pub fn cqt_oracle_suite(
    n_signals: usize,
    seconds: f64,
    sample_rate: u32,
    master_seed: u64,
) -> Result<f64, CqtError> {
    let params = CqtParams::default();
    let len = (seconds * sample_rate as f64).round() as usize;
    let mut worst = 0.0f64;
    for i in 0..n_signals {
        let mut rng = seed::rng(seed::derive_indexed(master_seed, "cqt-oracle", &[i as u64]));
        let samples: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let (fast, _) = crate::cqt::cqt_magnitudes(&samples, sample_rate, &params)?;
        let slow = naive_cqt(&samples, sample_rate, &params)?;
        worst = worst.max(max_relative_error(&fast, &slow));
    }
    Ok(worst)
}

/// Tolerance of the transform comparison.
pub const CQT_TOL: f64 = 1e-6;
