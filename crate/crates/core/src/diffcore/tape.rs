use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations supported by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Relu,
    Tanh,
    Sigmoid,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    /// `[m×n] + [1×n]`, bias row broadcast over rows.
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softmax(Var),
    /// Identity forward, gradient scaled by `-coeff` backward.
    Reverse(Var, f64),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    /// Picks `x[i, labels[i]]` into an `[m×1]` column.
    Pick(Var, Vec<usize>),
    LogClamped(Var, f64, f64),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations for reverse-mode differentiation.
///
/// Values and gradients live on the nodes. A tape is single-use: after
/// [`Tape::backward`] it must be [`Tape::reset`] before recording again.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.backward_done = false;
    }

    /// Records a leaf. Its gradient slot is tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, mut t: Tensor) -> Var {
        t.zero_grad();
        self.push(t, Op::Leaf)
    }

    /// Records a differentiable copy of `t`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut copy = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        copy.set_requires_grad(true);
        self.push(copy, Op::Leaf)
    }

    /// Records a non-differentiable copy of `t`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(
            Tensor::from_parts(t.shape().to_vec(), t.data().to_vec()),
            Op::Leaf,
        )
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.grad()
    }

    /// The single value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn tracks(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn derived(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let mut t = Tensor::from_parts(shape, data);
        t.set_requires_grad(inputs.iter().any(|&v| self.tracks(v)));
        self.push(t, op)
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "variable {} is not on this tape",
                v.0
            )))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        Ok(self.derived(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        match (op, inputs) {
            (Elementwise::Add, &[a, b]) => self.add(a, b),
            (Elementwise::Mul, &[a, b]) => self.mul(a, b),
            (Elementwise::Relu, &[a]) => Ok(self.relu(a)),
            (Elementwise::Tanh, &[a]) => Ok(self.tanh(a)),
            (Elementwise::Sigmoid, &[a]) => Ok(self.sigmoid(a)),
            _ => Err(Error::contract(format!(
                "{op:?} takes {} input(s), got {}",
                if matches!(op, Elementwise::Add | Elementwise::Mul) { 2 } else { 1 },
                inputs.len()
            ))),
        }
    }

    /// Elementwise sum; `b` may also be a `[1×n]` row added to every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
            return Ok(self.derived(av.shape().to_vec(), out, Op::Add(a, b), &[a, b]));
        }
        let row_broadcast = match (av.shape(), bv.shape()) {
            (&[_, n], &[1, n2]) => n == n2,
            _ => false,
        };
        if !row_broadcast {
            return Err(Error::Dimension {
                op: "add",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let n = bv.numel();
        let bias = bv.data();
        let out = av
            .data()
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        Ok(self.derived(av.shape().to_vec(), out, Op::AddRow(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::Dimension {
                op: "mul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        Ok(self.derived(av.shape().to_vec(), out, Op::Mul(a, b), &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&x| f(x)).collect();
        self.derived(av.shape().to_vec(), out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    /// Gradient reversal: identity forward, `-coeff × upstream` backward.
    pub fn reverse_grad(&mut self, a: Var, coeff: f64) -> Var {
        let av = self.value(a);
        let out = av.data().to_vec();
        self.derived(av.shape().to_vec(), out, Op::Reverse(a, coeff), &[a])
    }

    /// Row-wise softmax of a `[batch×k]` tensor, `k ≥ 2`.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (_, k) = av.dims2()?;
        if k < 2 {
            return Err(Error::contract(format!("softmax needs k >= 2, got {k}")));
        }
        if let Some(bad) = av.data().iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit {bad}")));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                total += *x;
            }
            row.iter_mut().for_each(|x| *x /= total);
        }
        let shape = av.shape().to_vec();
        Ok(self.derived(shape, out, Op::Softmax(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.derived(vec![1], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s = av.data().iter().sum::<f64>() / av.numel() as f64;
        self.derived(vec![1], vec![s], Op::Mean(a), &[a])
    }

    /// Selects `a[i, labels[i]]` for every row `i`, giving `[batch×1]`.
    pub fn pick(&mut self, a: Var, labels: &[usize]) -> Result<Var> {
        self.check(a)?;
        let av = self.value(a);
        let (m, k) = av.dims2()?;
        if labels.len() != m {
            return Err(Error::Dimension {
                op: "pick",
                left: av.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} out of range 0..{k}")));
        }
        let out = labels.iter().enumerate().map(|(i, &y)| av.data()[i * k + y]).collect();
        Ok(self.derived(vec![m, 1], out, Op::Pick(a, labels.to_vec()), &[a]))
    }

    /// `ln(clamp(x, lo, hi))`; the gradient is zero where the clamp is active.
    pub fn log_clamped(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, |x| x.clamp(lo, hi).ln(), Op::LogClamped(a, lo, hi))
    }

    /// Accumulates `∂root/∂v` into every tracked node, visiting operations in
    /// reverse execution order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.backward_done {
            return Err(Error::contract(
                "backward already ran on this tape; reset it first",
            ));
        }
        if !self.nodes[root.0].value.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                self.nodes[root.0].value.shape()
            )));
        }
        self.backward_done = true;
        if !self.tracks(root) {
            return Ok(());
        }
        self.nodes[root.0].value.grad_mut()[0] = 1.0;
        for i in (0..=root.0).rev() {
            if !self.nodes[i].value.requires_grad() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let g = self.nodes[i].value.take_grad();
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.propagate(i, &op, &g);
            self.nodes[i].op = op;
            self.nodes[i].value.put_grad(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: impl IntoIterator<Item = f64>) {
        if !self.tracks(v) {
            return;
        }
        let grad = self.nodes[v.0].value.grad_mut();
        for (slot, c) in grad.iter_mut().zip(contrib) {
            *slot += c;
        }
    }

    fn propagate(&mut self, out: usize, op: &Op, g: &[f64]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().expect("matmul input is 2-D");
                let n = g.len() / m;
                if self.tracks(a) {
                    // g · bᵀ
                    let bt = transpose(self.value(b).data(), k, n);
                    let ga = matmul_raw(g, &bt, m, n, k);
                    self.accumulate(a, ga);
                }
                if self.tracks(b) {
                    // aᵀ · g
                    let at = transpose(self.value(a).data(), m, k);
                    let gb = matmul_raw(&at, g, k, m, n);
                    self.accumulate(b, gb);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(a, g.iter().copied());
                self.accumulate(b, g.iter().copied());
            }
            Op::AddRow(a, b) => {
                self.accumulate(a, g.iter().copied());
                let n = self.value(b).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                self.accumulate(b, gb);
            }
            Op::Mul(a, b) => {
                let ga: Vec<f64> = g.iter().zip(self.value(b).data()).map(|(g, y)| g * y).collect();
                let gb: Vec<f64> = g.iter().zip(self.value(a).data()).map(|(g, x)| g * x).collect();
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::Relu(a) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(a, ga);
            }
            Op::Tanh(a) => {
                let y = self.nodes[out].value.data();
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let y = self.nodes[out].value.data();
                let ga: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(a, ga);
            }
            Op::Softmax(a) => {
                let y = self.nodes[out].value.data();
                let k = self.nodes[out].value.shape()[1];
                let mut ga = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(k).zip(g.chunks_exact(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accumulate(a, ga);
            }
            Op::Reverse(a, c) => {
                let ga: Vec<f64> = g.iter().map(|g| -c * g).collect();
                self.accumulate(a, ga);
            }
            Op::Scale(a, c) => {
                let ga: Vec<f64> = g.iter().map(|g| c * g).collect();
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, std::iter::repeat_n(g[0], n));
            }
            Op::Mean(a) => {
                let n = self.value(a).numel();
                self.accumulate(a, std::iter::repeat_n(g[0] / n as f64, n));
            }
            Op::Pick(a, ref labels) => {
                let k = self.value(a).shape()[1];
                let mut ga = vec![0.0; self.value(a).numel()];
                for (i, (&y, gi)) in labels.iter().zip(g).enumerate() {
                    ga[i * k + y] += gi;
                }
                self.accumulate(a, ga);
            }
            Op::LogClamped(a, lo, hi) => {
                let ga: Vec<f64> = g
                    .iter()
                    .zip(self.value(a).data())
                    .map(|(g, &x)| if x > lo && x < hi { g / x } else { 0.0 })
                    .collect();
                self.accumulate(a, ga);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
