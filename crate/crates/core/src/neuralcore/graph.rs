//! Tape-based reverse-mode autodiff over dense matrices.
//!
//! A [`Graph`] records every forward op in execution order; [`Graph::backward`]
//! walks the tape in reverse, accumulating (`+=`) parameter gradients into the
//! owning [`ParamStore`]. A graph lives for one forward/backward pass and is
//! confined to one thread.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::{matmul, matmul_nt, matmul_tn};
use super::{BufferId, NnError, ParamId, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch statistics produced by a train-mode batch-norm op; applied to the
/// running buffers by the caller after the step.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub tracked: BufferId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    /// Unbiased batch variance.
    pub batch_var: Vec<f64>,
}

impl StatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .buffer_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .buffer_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        store.buffer_mut(self.tracked).data_mut()[0] += 1.0;
    }
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    Mask(Var, Vec<f64>),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    rng: ChaCha8Rng,
    param_vars: HashMap<ParamId, Var>,
    stat_updates: Vec<StatUpdate>,
}

/// Node gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self::with_seed(mode, 0)
    }

    /// `seed` drives dropout masks in train mode.
    pub fn with_seed(mode: Mode, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            param_vars: HashMap::new(),
            stat_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Values of every row-softmax node recorded so far (attention weights
    /// in the bundled architectures), in creation order.
    pub fn softmax_outputs(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Softmax(_)))
            .map(|n| &n.value)
            .collect()
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, NnError> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims(&self, v: Var, op: &'static str) -> Result<(usize, usize), NnError> {
        self.value(v)
            .dims2()
            .ok_or_else(|| NnError::shape(op, "expected a rank-1 or rank-2 tensor"))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, NnError> {
        self.push("constant", value, Op::Constant)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, NnError> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.get(id).value.clone(), Op::Param(id))?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// `x[n,in] · w[out,in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NnError> {
        let (n, k) = self.dims(x, "linear")?;
        let (out, k2) = self.dims(w, "linear")?;
        if k != k2 {
            return Err(NnError::shape(
                "linear",
                format!("input has {k} features, weight expects {k2}"),
            ));
        }
        let mut y = matmul_nt(self.value(x).data(), self.value(w).data(), n, k, out);
        if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != out {
                return Err(NnError::shape(
                    "linear",
                    format!("bias length {} != {out}", bias.len()),
                ));
            }
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::matrix(n, out, y)?;
        self.push("linear", value, Op::Linear { x, w, b })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (n, k) = self.dims(a, "matmul")?;
        let (k2, m) = self.dims(b, "matmul")?;
        if k != k2 {
            return Err(NnError::shape("matmul", format!("[{n},{k}] x [{k2},{m}]")));
        }
        let y = matmul(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul", Tensor::matrix(n, m, y)?, Op::MatMul(a, b))
    }

    /// `a[n,k] · b[m,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        let (n, k) = self.dims(a, "matmul_nt")?;
        let (m, k2) = self.dims(b, "matmul_nt")?;
        if k != k2 {
            return Err(NnError::shape("matmul_nt", format!("[{n},{k}] x [{m},{k2}]^T")));
        }
        let y = matmul_nt(self.value(a).data(), self.value(b).data(), n, k, m);
        self.push("matmul_nt", Tensor::matrix(n, m, y)?, Op::MatMulNt(a, b))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), NnError> {
        let (sa, sb) = (self.value(a).dims2(), self.value(b).dims2());
        if sa.is_none() || sa != sb {
            return Err(NnError::shape(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        Ok(())
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NnError> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NnError> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NnError> {
        let (_, c) = self.dims(x, "add_row")?;
        if self.value(row).len() != c {
            return Err(NnError::shape("add_row", "row length differs from column count"));
        }
        let r = self.value(row).data();
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(c) {
            chunk.iter_mut().zip(r).for_each(|(v, b)| *v += b);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow { x, row })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NnError> {
        let value = self.map(x, |v| v * c)?;
        self.push("scale", value, Op::Scale(x, c))
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Result<Tensor, NnError> {
        let vx = self.value(x);
        Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| f(v)).collect())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.map(x, sigmoid)?;
        self.push("sigmoid", value, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.map(x, f64::tanh)?;
        self.push("tanh", value, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, NnError> {
        let value = self.map(x, |v| if v > 0.0 { v } else { 0.0 })?;
        self.push("relu", value, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NnError> {
        let value = self.map(x, |v| if v >= 0.0 { v } else { slope * v })?;
        self.push("leaky_relu", value, Op::LeakyRelu(x, slope))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NnError> {
        let (_, c) = self.dims(x, "softmax")?;
        let vx = self.value(x);
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", value, Op::Softmax(x))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::shape("concat_cols", "no inputs"))?;
        let n = self.dims(first, "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims(p, "concat_cols")?;
            if r != n {
                return Err(NnError::shape("concat_cols", format!("row counts {n} vs {r}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(n, total, data)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NnError> {
        let first = *parts
            .first()
            .ok_or_else(|| NnError::shape("concat_rows", "no inputs"))?;
        let c = self.dims(first, "concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c2) = self.dims(p, "concat_rows")?;
            if c2 != c {
                return Err(NnError::shape("concat_rows", format!("column counts {c} vs {c2}")));
            }
            data.extend_from_slice(self.value(p).data());
            n += r;
        }
        let value = Tensor::matrix(n, c, data)?;
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (n, c) = self.dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(NnError::shape("slice_cols", format!("{start}+{len} > {c}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * len);
        for r in 0..n {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let value = Tensor::matrix(n, len, data)?;
        self.push("slice_cols", value, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NnError> {
        let (n, c) = self.dims(x, "slice_rows")?;
        if len == 0 || start + len > n {
            return Err(NnError::shape("slice_rows", format!("{start}+{len} > {n}")));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::matrix(len, c, data)?;
        self.push("slice_rows", value, Op::SliceRows { x, start })
    }

    /// Row lookup `table[idx[i]]` into an `[idx.len(), dim]` matrix.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, NnError> {
        let (n, c) = self.dims(table, "gather_rows")?;
        if idx.is_empty() {
            return Err(NnError::shape("gather_rows", "no indices"));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= n {
                return Err(NnError::shape("gather_rows", format!("row {i} of {n}")));
            }
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        let value = Tensor::matrix(idx.len(), c, data)?;
        self.push(
            "gather_rows",
            value,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// Inverted dropout; identity in eval mode or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var, NnError> {
        if !(0.0..1.0).contains(&p) {
            return Err(NnError::invalid("dropout", format!("p must be in [0, 1), got {p}")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let vx = self.value(x);
        let data = vx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("dropout", value, Op::Mask(x, mask))
    }

    /// Batch normalisation over rows. `batch` carries the batch statistics
    /// route; `None` normalises with the supplied running statistics.
    pub(crate) fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        running: Option<(&[f64], &[f64])>,
    ) -> Result<(Var, Option<(Vec<f64>, Vec<f64>)>), NnError> {
        let (n, c) = self.dims(x, "batch_norm")?;
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(NnError::shape("batch_norm", "gamma/beta length differs from features"));
        }
        let xs = self.value(x).data();
        let (mean, var, batch_stats) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec(), false),
            None => {
                if n < 2 {
                    return Err(NnError::invalid(
                        "batch_norm",
                        "train-mode batch statistics need at least 2 rows",
                    ));
                }
                let mut mean = vec![0.0; c];
                for row in xs.chunks(c) {
                    mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in xs.chunks(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var, true)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(n * c);
        for row in xs.chunks(c) {
            for j in 0..c {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let y: Vec<f64> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| g[i % c] * h + b[i % c])
            .collect();
        let value = Tensor::matrix(n, c, y)?;
        let stats = batch_stats.then(|| {
            let unbiased = var.iter().map(|v| v * n as f64 / (n as f64 - 1.0)).collect();
            (mean, unbiased)
        });
        let out = self.push(
            "batch_norm",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            },
        )?;
        Ok((out, stats))
    }

    pub(crate) fn record_stat_update(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    /// Mean cross-entropy of `targets` under `softmax(logits)`, fused through
    /// log-sum-exp.
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NnError> {
        let (n, k) = self.dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(NnError::shape(
                "cross_entropy",
                format!("{} targets for {n} rows", targets.len()),
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(NnError::TargetOutOfRange { target: t, classes: k });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(row);
        }
        let loss = (loss / n as f64).max(0.0);
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NnError> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NnError> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x))
    }

    /// Back-propagates from the scalar `loss`, adding parameter gradients
    /// into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients, NnError> {
        if self.value(loss).len() != 1 {
            return Err(NnError::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            self.backprop_node(node, &gy, &mut grads, store);
            grads[i] = Some(gy);
        }
        if grads.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(NnError::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(
        &self,
        node: &Node,
        gy: &[f64],
        grads: &mut [Option<Vec<f64>>],
        store: &mut ParamStore,
    ) {
        let y = node.value.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => {
                store
                    .get_mut(*id)
                    .grad
                    .data_mut()
                    .iter_mut()
                    .zip(gy)
                    .for_each(|(g, d)| *g += d);
            }
            Op::Linear { x, w, b } => {
                let (n, k) = self.value(*x).dims2().unwrap();
                let out = self.value(*w).rows();
                let dx = matmul(gy, self.value(*w).data(), n, out, k);
                accumulate(grads, *x, dx);
                let dw = matmul_tn(gy, self.value(*x).data(), n, out, k);
                accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let mut db = vec![0.0; out];
                    for row in gy.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).cols();
                accumulate(grads, *a, matmul_nt(gy, self.value(*b).data(), n, m, k));
                accumulate(grads, *b, matmul_tn(self.value(*a).data(), gy, n, k, m));
            }
            Op::MatMulNt(a, b) => {
                let (n, k) = self.value(*a).dims2().unwrap();
                let m = self.value(*b).rows();
                accumulate(grads, *a, matmul(gy, self.value(*b).data(), n, m, k));
                accumulate(grads, *b, matmul_tn(gy, self.value(*a).data(), n, m, k));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, gy.to_vec());
                accumulate(grads, *b, gy.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, gy.to_vec());
                accumulate(grads, *b, gy.iter().map(|g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, gy.iter().zip(vb).map(|(g, v)| g * v).collect());
                accumulate(grads, *b, gy.iter().zip(va).map(|(g, v)| g * v).collect());
            }
            Op::AddRow { x, row } => {
                accumulate(grads, *x, gy.to_vec());
                let c = self.value(*row).len();
                let mut dr = vec![0.0; c];
                for chunk in gy.chunks(c) {
                    dr.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                }
                accumulate(grads, *row, dr);
            }
            Op::Scale(x, c) => accumulate(grads, *x, gy.iter().map(|g| g * c).collect()),
            Op::Sigmoid(x) => accumulate(
                grads,
                *x,
                gy.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect(),
            ),
            Op::Tanh(x) => accumulate(
                grads,
                *x,
                gy.iter().zip(y).map(|(g, t)| g * (1.0 - t * t)).collect(),
            ),
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                accumulate(
                    grads,
                    *x,
                    gy.iter()
                        .zip(vx)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                )
            }
            Op::LeakyRelu(x, slope) => {
                let vx = self.value(*x).data();
                accumulate(
                    grads,
                    *x,
                    gy.iter()
                        .zip(vx)
                        .map(|(g, v)| if *v >= 0.0 { *g } else { slope * g })
                        .collect(),
                )
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut dx = Vec::with_capacity(gy.len());
                for (grow, yrow) in gy.chunks(c).zip(y.chunks(c)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(g, s)| g * s).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, s)| s * (g - dot)));
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let (n, w) = self.value(p).dims2().unwrap();
                    let mut dp = Vec::with_capacity(n * w);
                    for r in 0..n {
                        dp.extend_from_slice(&gy[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(grads, p, dp);
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    accumulate(grads, p, gy[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols { x, start } => {
                let (n, c) = self.value(*x).dims2().unwrap();
                let len = node.value.cols();
                let mut dx = vec![0.0; n * c];
                for r in 0..n {
                    dx[r * c + start..r * c + start + len]
                        .copy_from_slice(&gy[r * len..(r + 1) * len]);
                }
                accumulate(grads, *x, dx);
            }
            Op::SliceRows { x, start } => {
                let c = self.value(*x).cols();
                let mut dx = vec![0.0; self.value(*x).len()];
                dx[start * c..start * c + gy.len()].copy_from_slice(gy);
                accumulate(grads, *x, dx);
            }
            Op::Gather { table, idx } => {
                let c = self.value(*table).cols();
                let mut dt = vec![0.0; self.value(*table).len()];
                for (r, &i) in idx.iter().enumerate() {
                    dt[i * c..(i + 1) * c]
                        .iter_mut()
                        .zip(&gy[r * c..(r + 1) * c])
                        .for_each(|(d, g)| *d += g);
                }
                accumulate(grads, *table, dt);
            }
            Op::Mask(x, mask) => {
                accumulate(grads, *x, gy.iter().zip(mask).map(|(g, m)| g * m).collect())
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = node.value.dims2().unwrap();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (grow, hrow) in gy.chunks(c).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        dgamma[j] += grow[j] * hrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                let mut dx = vec![0.0; n * c];
                if *batch_stats {
                    // dxhat = gy·γ ; dx = inv_std/n · (n·dxhat − Σdxhat − x̂·Σ(dxhat·x̂))
                    let nf = n as f64;
                    for j in 0..c {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for r in 0..n {
                            let d = gy[r * c + j] * g[j];
                            s1 += d;
                            s2 += d * xhat[r * c + j];
                        }
                        for r in 0..n {
                            let d = gy[r * c + j] * g[j];
                            dx[r * c + j] =
                                inv_std[j] / nf * (nf * d - s1 - xhat[r * c + j] * s2);
                        }
                    }
                } else {
                    for (i, d) in dx.iter_mut().enumerate() {
                        let j = i % c;
                        *d = gy[i] * g[j] * inv_std[j];
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = self.value(*logits).cols();
                let n = targets.len() as f64;
                let mut dl: Vec<f64> = probs.iter().map(|p| p * gy[0] / n).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * k + t] -= gy[0] / n;
                }
                accumulate(grads, *logits, dl);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![gy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![gy[0] / n as f64; n])
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
