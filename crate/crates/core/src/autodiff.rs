//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its variables. Values are
//! computed eagerly on insertion, so the tape doubles as the forward pass.
//! [`Graph::backward`] walks the tape in reverse and accumulates adjoints.
//!
//! Every op checks its output for NaN/Inf and fails with
//! [`Error::NonFinite`] naming the op, instead of letting a bad value leak
//! into the rest of the computation.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{contract, Error, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Tanh(Var),
    SqDist(Var, Var),
    SqNorm(Var),
    HingeBelow(Var, f64),
    Sum(Var),
    Mean(Var),
    SoftmaxNll(Var, Vec<usize>),
    Conv1d { input: Var, weight: Var, bias: Var, in_channels: usize, length: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`. Variables the loss does
    /// not depend on get an all-zero buffer.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &'static str, detail: alloc::string::String) -> Error {
    Error::Shape { op, detail }
}

/// Splits a shape into (rows, cols) treating scalars/vectors as a single row.
fn as_matrix(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => (shape[0], numel(&shape[1..])),
    }
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

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { shape, value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: &Tensor) -> Result<Var> {
        self.push("input", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.push("param", t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<Var> {
        self.push("input", Vec::new(), vec![v], Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let n = self.node(v);
        if n.value.len() != 1 {
            return Err(shape_err("scalar", format!("expected one value, found shape {:?}", n.shape)));
        }
        Ok(n.value[0])
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// `(n×k) · (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = as_matrix(self.shape(a));
        let (k2, m) = as_matrix(self.shape(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("{}x{} times {}x{}", n, k, k2, m)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let x = av[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[p * m..(p + 1) * m];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("matmul", vec![n, m], out, Op::MatMul(a, b), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(name, shape, out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a row vector to every row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (n, m) = as_matrix(self.shape(a));
        if numel(self.shape(row)) != m {
            return Err(shape_err("add_row", format!("row of {} for {}x{}", numel(self.shape(row)), n, m)));
        }
        let rv = self.value(row);
        let out = self.value(a).iter().enumerate().map(|(i, &x)| x + rv[i % m]).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, row]);
        self.push("add_row", shape, out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("scale", shape, out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("add_scalar", shape, out, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("relu", shape, out, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| libm::tanh(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("tanh", shape, out, Op::Tanh(a), rg)
    }

    /// Pairwise squared Euclidean distances between the rows of `a` (n×d)
    /// and the rows of `b` (m×d), giving an n×m matrix.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = as_matrix(self.shape(a));
        let (m, d2) = as_matrix(self.shape(b));
        if d != d2 {
            return Err(shape_err("sq_dist", format!("row widths {} and {}", d, d2)));
        }
        let av = self.value(a);
        let bv = self.value(b);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * d..(i + 1) * d];
            for j in 0..m {
                let br = &bv[j * d..(j + 1) * d];
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
            }
        }
        let rg = self.rg(&[a, b]);
        self.push("sq_dist", vec![n, m], out, Op::SqDist(a, b), rg)
    }

    /// Sum of squares of all entries.
    pub fn sq_norm(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().map(|x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push("sq_norm", Vec::new(), vec![s], Op::SqNorm(a), rg)
    }

    /// `max(0, c - x)` elementwise.
    pub fn hinge_below(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| if c - x > 0.0 { c - x } else { 0.0 }).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("hinge_below", shape, out, Op::HingeBelow(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor".into()));
        }
        let s = self.value(a).iter().sum::<f64>() / n as f64;
        let rg = self.rg(&[a]);
        self.push("mean", Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// `logits` (n×k).
    pub fn softmax_nll(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = as_matrix(self.shape(logits));
        if targets.len() != n || n == 0 {
            return Err(shape_err("softmax_nll", format!("{} targets for {} rows", targets.len(), n)));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(shape_err("softmax_nll", format!("target {} out of {} classes", t, k)));
        }
        let lv = self.value(logits);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[t];
        }
        let rg = self.rg(&[logits]);
        self.push("softmax_nll", Vec::new(), vec![total / n as f64], Op::SoftmaxNll(logits, targets.to_vec()), rg)
    }

    /// Valid-padding 1-D convolution.
    ///
    /// `input` is `n × (in_channels·length)` with channel-major rows,
    /// `weight` is `[out, in_channels, kernel]`, `bias` has `out` entries.
    /// The output is `n × (out·(length - kernel + 1))`, channel-major.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, in_channels: usize, length: usize) -> Result<Var> {
        let (n, width) = as_matrix(self.shape(input));
        let ws = self.shape(weight).to_vec();
        if ws.len() != 3 || ws[1] != in_channels || width != in_channels * length {
            return Err(shape_err(
                "conv1d",
                format!("input {}x{} with weight {:?} for {} channels of {}", n, width, ws, in_channels, length),
            ));
        }
        let (out_ch, kernel) = (ws[0], ws[2]);
        if kernel == 0 || kernel > length || numel(self.shape(bias)) != out_ch {
            return Err(shape_err("conv1d", format!("kernel {} over length {}", kernel, length)));
        }
        let out_len = length - kernel + 1;
        let xv = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; n * out_ch * out_len];
        for b in 0..n {
            let x = &xv[b * width..(b + 1) * width];
            for o in 0..out_ch {
                let orow = &mut out[(b * out_ch + o) * out_len..(b * out_ch + o + 1) * out_len];
                orow.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..in_channels {
                    let xc = &x[c * length..(c + 1) * length];
                    let wk = &wv[(o * in_channels + c) * kernel..(o * in_channels + c + 1) * kernel];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        *ov += wk.iter().zip(&xc[t..t + kernel]).map(|(w, x)| w * x).sum::<f64>();
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        self.push(
            "conv1d",
            vec![n, out_ch * out_len],
            out,
            Op::Conv1d { input, weight, bias, in_channels, length },
            rg,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(contract!("backward needs a scalar loss, got shape {:?}", self.node(loss).shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        // Leaves the loss does not depend on still get a zero buffer.
        for (node, slot) in self.nodes.iter().zip(grads.iter_mut()) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && slot.is_none() {
                *slot = Some(vec![0.0; node.value.len()]);
            }
            if let Some(g) = slot {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = as_matrix(&nodes[a.0].shape);
                let (_, m) = as_matrix(&nodes[b.0].shape);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &bv[p * m..(p + 1) * m];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let x = av[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(o, x)| *o -= x));
            }
            Op::Mul(a, b) => {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
                acc(*row, &mut |gr| {
                    let m = gr.len();
                    for (i, x) in g.iter().enumerate() {
                        gr[i % m] += x;
                    }
                });
            }
            Op::Scale(a, s) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += s * x));
            }
            Op::AddScalar(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(o, x)| *o += x));
            }
            Op::Relu(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::SqDist(a, b) => {
                let (n, d) = as_matrix(&nodes[a.0].shape);
                let (m, _) = as_matrix(&nodes[b.0].shape);
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = 2.0 * g[i * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                ga[i * d + t] += w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..n {
                        for j in 0..m {
                            let w = 2.0 * g[i * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            for t in 0..d {
                                gb[j * d + t] -= w * (av[i * d + t] - bv[j * d + t]);
                            }
                        }
                    }
                });
            }
            Op::SqNorm(a) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| ga.iter_mut().zip(av).for_each(|(o, x)| *o += 2.0 * x * g[0]));
            }
            Op::HingeBelow(a, c) => {
                let av = &nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if c - av[i] > 0.0 {
                            ga[i] -= g[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|o| *o += g[0] / n));
            }
            Op::SoftmaxNll(logits, targets) => {
                let (n, k) = as_matrix(&nodes[logits.0].shape);
                let lv = &nodes[logits.0].value;
                acc(*logits, &mut |gl| {
                    let scale = g[0] / n as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        let row = &lv[i * k..(i + 1) * k];
                        let lse = log_sum_exp(row);
                        for j in 0..k {
                            let p = libm::exp(row[j] - lse);
                            let y = if j == t { 1.0 } else { 0.0 };
                            gl[i * k + j] += scale * (p - y);
                        }
                    }
                });
            }
            Op::Conv1d { input, weight, bias, in_channels, length } => {
                let (in_channels, length) = (*in_channels, *length);
                let ws = &nodes[weight.0].shape;
                let (out_ch, kernel) = (ws[0], ws[2]);
                let out_len = length - kernel + 1;
                let (n, width) = as_matrix(&nodes[input.0].shape);
                let xv = &nodes[input.0].value;
                let wv = &nodes[weight.0].value;
                acc(*bias, &mut |gb| {
                    for b in 0..n {
                        for (o, gbo) in gb.iter_mut().enumerate() {
                            let base = (b * out_ch + o) * out_len;
                            *gbo += g[base..base + out_len].iter().sum::<f64>();
                        }
                    }
                });
                acc(*weight, &mut |gw| {
                    for b in 0..n {
                        let x = &xv[b * width..(b + 1) * width];
                        for o in 0..out_ch {
                            let go = &g[(b * out_ch + o) * out_len..(b * out_ch + o + 1) * out_len];
                            for c in 0..in_channels {
                                let xc = &x[c * length..(c + 1) * length];
                                for kk in 0..kernel {
                                    gw[(o * in_channels + c) * kernel + kk] +=
                                        go.iter().zip(&xc[kk..kk + out_len]).map(|(a, b)| a * b).sum::<f64>();
                                }
                            }
                        }
                    }
                });
                acc(*input, &mut |gx| {
                    for b in 0..n {
                        for o in 0..out_ch {
                            let go = &g[(b * out_ch + o) * out_len..(b * out_ch + o + 1) * out_len];
                            for c in 0..in_channels {
                                let wk = &wv[(o * in_channels + c) * kernel..(o * in_channels + c + 1) * kernel];
                                let gxc = &mut gx[b * width + c * length..b * width + (c + 1) * length];
                                for (t, &gv) in go.iter().enumerate() {
                                    for (kk, &w) in wk.iter().enumerate() {
                                        gxc[t + kk] += gv * w;
                                    }
                                }
                            }
                        }
                    }
                });
            }
        }
        Ok(())
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + libm::log(row.iter().map(|&x| libm::exp(x - max)).sum::<f64>())
}

/// Evaluates `build` on fresh parameter leaves, runs the reverse pass, and
/// stores each parameter's gradient in its tensor. Returns the loss value.
pub fn forward_backward<F>(params: &mut [Tensor], build: F) -> Result<f64>
where
    F: FnOnce(&mut Graph, &[Var]) -> Result<Var>,
{
    for p in params.iter() {
        if !p.is_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
    }
    let mut g = Graph::new();
    let vars = params.iter().map(|p| g.param(p)).collect::<Result<Vec<_>>>()?;
    let loss = build(&mut g, &vars)?;
    let value = g.scalar(loss)?;
    let grads = g.backward(loss)?;
    for (p, v) in params.iter_mut().zip(&vars) {
        let grad = grads.get(*v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; p.len()]);
        p.set_grad(grad)?;
    }
    Ok(value)
}
