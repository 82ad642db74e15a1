use rand::Rng;

use super::gemm::gemm;
use super::{shape_err, Tensor, TensorError};

/// Handle to a node on a [`Graph`] tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the log.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
        /// im2col matrix per batch element, `[C*kh*kw, H'*W']`.
        cols: Vec<Vec<f64>>,
    },
    MaxPool2 {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu(Var),
    Sigmoid(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow {
        input: Var,
        row: Var,
    },
    Square(Var),
    SumLast(Var),
    Sum(Var),
    Mean(Var),
    Bce {
        p: Var,
        labels: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Dense { .. } => "dense",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Dropout { .. } => "dropout",
            Op::Reshape(_) => "reshape",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulRow { .. } => "mul_row",
            Op::Square(_) => "square",
            Op::SumLast(_) => "sum_last",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-use tape. Build the forward pass with the op methods, then call
/// [`Graph::backward`] once on a scalar output.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NumericalFault { op: op.name() });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; gradients are not tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Trainable leaf; its gradient is available after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    /// Valid cross-correlation, stride 1. `input [N,C,H,W]`, `kernel [F,C,kh,kw]`, `bias [F]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        let ks = self.value(kernel).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?}, kernel {ks:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, kc, kh, kw) = (ks[0], ks[1], ks[2], ks[3]);
        if kc != c || kh > h || kw > w || bs != [f] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}, bias {bs:?}"),
            ));
        }
        let (oh, ow) = (h - kh + 1, w - kw + 1);
        let (ckk, p) = (c * kh * kw, oh * ow);
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; n * f * p];
        let mut cols = Vec::with_capacity(n);
        for s in 0..n {
            let col = im2col(&x[s * c * h * w..(s + 1) * c * h * w], c, h, w, kh, kw);
            let o = &mut out[s * f * p..(s + 1) * f * p];
            for (fi, row) in o.chunks_exact_mut(p).enumerate() {
                row.fill(b[fi]);
            }
            gemm(f, ckk, p, k, false, &col, false, 1.0, o);
            cols.push(col);
        }
        let rg = self.rg(&[input, kernel, bias]);
        self.push(
            Tensor::new(vec![n, f, oh, ow], out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                cols,
            },
            rg,
        )
    }

    /// 2x2 non-overlapping max pooling. Odd trailing rows/columns are pooled
    /// over the elements that exist, as if padded with negative infinity.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        if xs.len() != 4 {
            return Err(shape_err("maxpool2", format!("input {xs:?}")));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let (y, xx) = (2 * oy + dy, 2 * ox + dx);
                        if y < h && xx < w {
                            let idx = base + y * w + xx;
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[input]);
        self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::MaxPool2 { input, argmax },
            rg,
        )
    }

    /// Affine map `input [N,D] · weight [D,K] + bias [K]`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var, TensorError> {
        let xs = self.value(input).shape().to_vec();
        let ws = self.value(weight).shape().to_vec();
        let bs = self.value(bias).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || bs != [ws[1]] {
            return Err(shape_err(
                "dense",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (n, d, k) = (xs[0], xs[1], ws[1]);
        let b = self.value(bias).data();
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.iter().copied()).collect();
        gemm(
            n,
            d,
            k,
            self.value(input).data(),
            false,
            self.value(weight).data(),
            false,
            1.0,
            &mut out,
        );
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            Tensor::new(vec![n, k], out)?,
            Op::Dense {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, TensorError> {
        let v = self.value(x);
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| f(a)).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Op::Relu(x), |a| if a > 0.0 { a } else { 0.0 })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, Op::Square(x), |a| a * a)
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var, TensorError> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::InvalidParam {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().zip(&mask).map(|(a, m)| a * m).collect(),
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::Dropout { input: x, mask }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let out = self.value(x).reshaped(shape)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Reshape(x), rg)
    }

    /// Collapses `[N, ...]` to `[N, rest]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).shape();
        let n = s[0];
        let rest = s[1..].iter().product();
        self.reshape(x, vec![n, rest])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape != vb.shape {
            return Err(shape_err(name, format!("{:?} vs {:?}", va.shape, vb.shape)));
        }
        let out = Tensor {
            shape: va.shape.clone(),
            data: va
                .data
                .iter()
                .zip(&vb.data)
                .map(|(&x, &y)| f(x, y))
                .collect(),
        };
        let rg = self.rg(&[a, b]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Scales each row of `input [N,D]` elementwise by `row [D]`.
    pub fn mul_row(&mut self, input: Var, row: Var) -> Result<Var, TensorError> {
        let (vi, vr) = (self.value(input), self.value(row));
        if vi.shape.len() != 2 || vr.shape != [vi.shape[1]] {
            return Err(shape_err(
                "mul_row",
                format!("{:?} by {:?}", vi.shape, vr.shape),
            ));
        }
        let d = vi.shape[1];
        let data = vi
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| x * vr.data[i % d])
            .collect();
        let out = Tensor {
            shape: vi.shape.clone(),
            data,
        };
        let rg = self.rg(&[input, row]);
        self.push(out, Op::MulRow { input, row }, rg)
    }

    /// Sums `[N,D]` over its last axis, giving `[N]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape.len() != 2 {
            return Err(shape_err("sum_last", format!("{:?}", v.shape)));
        }
        let d = v.shape[1];
        let data = v.data.chunks_exact(d).map(|r| r.iter().sum()).collect();
        let out = Tensor {
            shape: vec![v.shape[0]],
            data,
        };
        let rg = self.rg(&[x]);
        self.push(out, Op::SumLast(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let s = self.value(x).data.iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean binary cross-entropy of probabilities `p [N]` against 0/1 labels.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var, TensorError> {
        let v = self.value(p);
        if v.shape.len() != 1 || v.len() != labels.len() {
            return Err(shape_err(
                "bce",
                format!("p {:?} vs {} labels", v.shape, labels.len()),
            ));
        }
        let total: f64 = v
            .data
            .iter()
            .zip(labels)
            .map(|(&pi, &y)| bce_term(pi, y))
            .sum();
        let loss = total / labels.len() as f64;
        let rg = self.rg(&[p]);
        self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Fingerprint of every branch taken at a non-differentiable point (relu
    /// signs, pooling winners, BCE clamps). Two forward passes with equal
    /// fingerprints lie on the same smooth piece.
    pub fn branch_fingerprint(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for chunk in self.nodes[x.0].value.data.chunks(64) {
                        let mut bits = 0u64;
                        for (i, &a) in chunk.iter().enumerate() {
                            if a > 0.0 {
                                bits |= 1 << i;
                            }
                        }
                        out.push(bits);
                    }
                }
                Op::MaxPool2 { argmax, .. } => out.extend(argmax.iter().map(|&i| i as u64)),
                Op::Bce { p, .. } => {
                    out.extend(self.nodes[p.0].value.data.iter().map(|&pi| {
                        u64::from(pi < BCE_CLAMP) | (u64::from(pi > 1.0 - BCE_CLAMP) << 1)
                    }))
                }
                _ => {}
            }
        }
        out
    }

    fn accumulate(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, d) in g.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    /// Reverse pass from a single-element output. Gradients accumulate into
    /// every node that requires them.
    pub fn backward(&mut self, output: Var) -> Result<(), TensorError> {
        if self.value(output).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got {:?}", self.value(output).shape),
            ));
        }
        for g in &mut self.grads {
            *g = None;
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NumericalFault {
                    op: self.nodes[i].op.name(),
                });
            }
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Ops borrow node values immutably while grads are written; split the
        // borrow by computing deltas first.
        let deltas: Vec<(Var, Vec<f64>)> = {
            let node = &self.nodes[i];
            let val = |v: Var| &self.nodes[v.0].value;
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => Vec::new(),
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                    cols,
                } => {
                    let xs = val(*input).shape();
                    let ks = val(*kernel).shape();
                    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (f, kh, kw) = (ks[0], ks[2], ks[3]);
                    let (oh, ow) = (h - kh + 1, w - kw + 1);
                    let (ckk, p) = (c * kh * kw, oh * ow);
                    let mut out = Vec::new();
                    if needs(*kernel) {
                        let mut dk = vec![0.0; f * ckk];
                        for s in 0..n {
                            gemm(
                                f,
                                p,
                                ckk,
                                &g[s * f * p..(s + 1) * f * p],
                                false,
                                &cols[s],
                                true,
                                1.0,
                                &mut dk,
                            );
                        }
                        out.push((*kernel, dk));
                    }
                    if needs(*bias) {
                        let mut db = vec![0.0; f];
                        for s in 0..n {
                            for (fi, row) in
                                g[s * f * p..(s + 1) * f * p].chunks_exact(p).enumerate()
                            {
                                db[fi] += row.iter().sum::<f64>();
                            }
                        }
                        out.push((*bias, db));
                    }
                    if needs(*input) {
                        let k = val(*kernel).data();
                        let mut dx = vec![0.0; n * c * h * w];
                        let mut dcol = vec![0.0; ckk * p];
                        for s in 0..n {
                            gemm(
                                ckk,
                                f,
                                p,
                                k,
                                true,
                                &g[s * f * p..(s + 1) * f * p],
                                false,
                                0.0,
                                &mut dcol,
                            );
                            col2im_add(
                                &dcol,
                                &mut dx[s * c * h * w..(s + 1) * c * h * w],
                                c,
                                h,
                                w,
                                kh,
                                kw,
                            );
                        }
                        out.push((*input, dx));
                    }
                    out
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut dx = vec![0.0; val(*input).len()];
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        dx[idx] += gi;
                    }
                    vec![(*input, dx)]
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let ws = val(*weight).shape();
                    let (d, k) = (ws[0], ws[1]);
                    let n = val(*input).shape()[0];
                    let mut out = Vec::new();
                    if needs(*input) {
                        let mut dx = vec![0.0; n * d];
                        gemm(n, k, d, g, false, val(*weight).data(), true, 0.0, &mut dx);
                        out.push((*input, dx));
                    }
                    if needs(*weight) {
                        let mut dw = vec![0.0; d * k];
                        gemm(d, n, k, val(*input).data(), true, g, false, 0.0, &mut dw);
                        out.push((*weight, dw));
                    }
                    if needs(*bias) {
                        let mut db = vec![0.0; k];
                        for row in g.chunks_exact(k) {
                            for (a, b) in db.iter_mut().zip(row) {
                                *a += b;
                            }
                        }
                        out.push((*bias, db));
                    }
                    out
                }
                Op::Relu(x) => {
                    let dx = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&a, &gi)| if a > 0.0 { gi } else { 0.0 })
                        .collect();
                    vec![(*x, dx)]
                }
                Op::Sigmoid(x) => {
                    let dx = node
                        .value
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&s, &gi)| gi * s * (1.0 - s))
                        .collect();
                    vec![(*x, dx)]
                }
                Op::Dropout { input, mask } => {
                    vec![(*input, g.iter().zip(mask).map(|(a, m)| a * m).collect())]
                }
                Op::Reshape(x) => vec![(*x, g.to_vec())],
                Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
                Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a).data(), val(*b).data());
                    vec![
                        (*a, g.iter().zip(vb).map(|(x, y)| x * y).collect()),
                        (*b, g.iter().zip(va).map(|(x, y)| x * y).collect()),
                    ]
                }
                Op::MulRow { input, row } => {
                    let vi = val(*input);
                    let vr = val(*row).data();
                    let d = vr.len();
                    let dx = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gi)| gi * vr[j % d])
                        .collect();
                    let mut dr = vec![0.0; d];
                    for (j, (&gi, &x)) in g.iter().zip(vi.data()).enumerate() {
                        dr[j % d] += gi * x;
                    }
                    vec![(*input, dx), (*row, dr)]
                }
                Op::Square(x) => {
                    let dx = val(*x)
                        .data()
                        .iter()
                        .zip(g)
                        .map(|(&a, &gi)| 2.0 * a * gi)
                        .collect();
                    vec![(*x, dx)]
                }
                Op::SumLast(x) => {
                    let d = val(*x).shape()[1];
                    let dx = g
                        .iter()
                        .flat_map(|&gi| std::iter::repeat_n(gi, d))
                        .collect();
                    vec![(*x, dx)]
                }
                Op::Sum(x) => vec![(*x, vec![g[0]; val(*x).len()])],
                Op::Mean(x) => {
                    let n = val(*x).len();
                    vec![(*x, vec![g[0] / n as f64; n])]
                }
                Op::Bce { p, labels } => {
                    let n = labels.len() as f64;
                    let dp = val(*p)
                        .data()
                        .iter()
                        .zip(labels)
                        .map(|(&pi, &y)| g[0] * bce_term_grad(pi, y) / n)
                        .collect();
                    vec![(*p, dp)]
                }
            }
        };
        for (v, d) in deltas {
            self.accumulate(v, &d);
        }
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

fn bce_term_grad(p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    -y / p + (1.0 - y) / (1.0 - p)
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let p = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * p];
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let r = (ci * kh + i) * kw + j;
                let dst = &mut cols[r * p..(r + 1) * p];
                for y in 0..oh {
                    let src = (ci * h + y + i) * w + j;
                    dst[y * ow..(y + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
    cols
}

fn col2im_add(cols: &[f64], dx: &mut [f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let p = oh * ow;
    for ci in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let r = (ci * kh + i) * kw + j;
                let src = &cols[r * p..(r + 1) * p];
                for y in 0..oh {
                    let dst = (ci * h + y + i) * w + j;
                    for (d, s) in dx[dst..dst + ow].iter_mut().zip(&src[y * ow..(y + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let k = g.param(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.param(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).data(), &[9.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 3.0).collect();
        let mut g = Graph::new();
        let x = g.input(t(&[1, 1, 4, 5], &data));
        let k = g.param(Tensor::full(vec![1, 1, 1, 1], 1.0));
        let b = g.param(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, k, b).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(vec![1, 1, 2, 2]));
        let k = g.param(Tensor::zeros(vec![1, 1, 3, 3]));
        let b = g.param(Tensor::zeros(vec![1]));
        assert!(matches!(
            g.conv2d(x, k, b),
            Err(TensorError::ShapeMismatch { .. })
        ));
        let k2 = g.param(Tensor::zeros(vec![1, 2, 1, 1]));
        assert!(g.conv2d(x, k2, b).is_err());
    }

    #[test]
    fn maxpool_picks_max_and_breaks_ties_to_first() {
        let mut g = Graph::new();
        let x = g.param(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![1, 1, 2, 4], 7.0));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[7.0, 7.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn maxpool_handles_odd_sizes() {
        let mut g = Graph::new();
        let x = g.input(t(
            &[1, 1, 3, 3],
            &[1.0, 2.0, 9.0, 4.0, 5.0, 6.0, -1.0, 8.0, -7.0],
        ));
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[5.0, 9.0, 8.0, -7.0]);
    }

    #[test]
    fn sigmoid_and_relu_conventions() {
        assert_eq!(sigmoid(0.0), 0.5);
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![-3.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn sigmoid_of_dense_matches_closed_form() {
        // y = sum(sigmoid(x W + b)); dy/dW[i][j] = x_i * s_j (1 - s_j).
        let xv = [0.3, -1.2];
        let wv = [0.5, -0.25, 1.5, 0.75];
        let bv = [0.1, -0.2];
        let mut g = Graph::new();
        let x = g.input(t(&[1, 2], &xv));
        let w = g.param(t(&[2, 2], &wv));
        let b = g.param(t(&[2], &bv));
        let z = g.dense(x, w, b).unwrap();
        let s = g.sigmoid(z).unwrap();
        let y = g.sum(s).unwrap();
        g.backward(y).unwrap();
        let pre = [
            xv[0] * wv[0] + xv[1] * wv[2] + bv[0],
            xv[0] * wv[1] + xv[1] * wv[3] + bv[1],
        ];
        let ds: Vec<f64> = pre
            .iter()
            .map(|&z| sigmoid(z) * (1.0 - sigmoid(z)))
            .collect();
        let gw = g.grad(w).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((gw.data()[i * 2 + j] - xv[i] * ds[j]).abs() < 1e-15);
            }
        }
        let gb = g.grad(b).unwrap();
        assert!((gb.data()[0] - ds[0]).abs() < 1e-15);
        assert!((gb.data()[1] - ds[1]).abs() < 1e-15);
    }

    #[test]
    fn dropout_contract() {
        let mut rng = seed::rng(5);
        let mut g = Graph::new();
        let x = g.param(Tensor::full(vec![100], 2.0));
        assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, false, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
        assert!(g.dropout(x, -0.1, true, &mut rng).is_err());
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn dropout_survivor_fraction_concentrates() {
        let mut rng = seed::rng(2024);
        let mut g = Graph::new();
        let x = g.input(Tensor::full(vec![100_000], 1.0));
        let y = g.dropout(x, 0.5, true, &mut rng).unwrap();
        let kept = g.value(y).data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e5;
        assert!((0.49..=0.51).contains(&kept), "{kept}");
    }

    #[test]
    fn bce_values_and_clamp() {
        let mut g = Graph::new();
        let p = g.param(Tensor::from_vec(vec![0.5, 0.9, 1.0]));
        let l = g.bce(p, &[1.0, 0.0, 1.0]).unwrap();
        let want = (2f64.ln() + 10f64.ln() + -(1.0 - BCE_CLAMP).ln()) / 3.0;
        assert!((g.value(l).data()[0] - want).abs() < 1e-12);
        g.backward(l).unwrap();
        assert_eq!(g.grad(p).unwrap().data()[2], 0.0);
    }

    #[test]
    fn non_finite_forward_is_a_fault() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_vec(vec![1e200]));
        assert!(matches!(
            g.square(a),
            Err(TensorError::NumericalFault { op: "square" })
        ));
    }

    #[test]
    fn shared_leaf_accumulates_gradient() {
        let mut g = Graph::new();
        let w = g.param(Tensor::from_vec(vec![3.0]));
        let a = g.mul(w, w).unwrap();
        let b = g.add(a, w).unwrap();
        let s = g.sum(b).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(w).unwrap().data(), &[7.0]);
    }
}
