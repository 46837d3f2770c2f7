//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] is an append-only list of nodes. Each node stores its forward
//! value and the operation that produced it; inputs always have smaller
//! indices, so a single reverse sweep visits every node after all of its
//! consumers.

use std::sync::Arc;

use super::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marks a zero-filled slot in a gather index.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softplus(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sin(Var),
    Cos(Var),
    Sqrt(Var),
    Square(Var),
    Exp(Var),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    TileCols(Var, usize),
    Transpose(Var),
    Reshape(Var),
    Gather(Var, Arc<Vec<u32>>),
    ScatterAdd(Var, Arc<Vec<u32>>),
    ColumnNorm(Var),
    Composite {
        alpha: Var,
        color: Var,
        segments: Arc<Vec<usize>>,
        background: [f64; 3],
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of a node; zeros when the output does not depend on it.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.0];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get_ref(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + exp(beta * x)) / beta`, evaluated without overflow.
pub fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    if z > 0.0 {
        x + (-z).exp().ln_1p() / beta
    } else {
        z.exp().ln_1p() / beta
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).map(f);
        let t = self.tracked(&[a]);
        self.push(value, op, t)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let t = self.tracked(&[a, b]);
        self.push(value, Op::MatMul(a, b), t)
    }

    /// `x + b` with the column `b` broadcast across the columns of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(b));
        assert_eq!((bv.rows, bv.cols), (xv.rows, 1), "bias must be a column matching rows");
        let mut value = xv.clone();
        for r in 0..value.rows {
            let bb = bv.data[r];
            for v in &mut value.data[r * value.cols..(r + 1) * value.cols] {
                *v += bb;
            }
        }
        let t = self.tracked(&[x, b]);
        self.push(value, Op::AddBias(x, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Add(a, b), t)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Sub(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let t = self.tracked(&[a, b]);
        self.push(value, Op::Mul(a, b), t)
    }

    /// Multiplies every element of `a` by the 1x1 node `k`.
    pub fn mul_scalar(&mut self, a: Var, k: Var) -> Var {
        let kv = self.value(k).item();
        let value = self.value(a).map(|x| x * kv);
        let t = self.tracked(&[a, k]);
        self.push(value, Op::MulScalar(a, k), t)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Smooth ReLU `ln(1 + exp(beta x)) / beta`.
    pub fn softplus(&mut self, a: Var, beta: f64) -> Var {
        self.unary(a, Op::Softplus(a, beta), |x| softplus(x, beta))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn sin(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sin(a), f64::sin)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        self.unary(a, Op::Cos(a), f64::cos)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    /// Sum of all elements, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).data.iter().sum());
        let t = self.tracked(&[a]);
        self.push(value, Op::Sum(a), t)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `m x n -> 1 x n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Tensor::zeros(1, av.cols);
        for r in 0..av.rows {
            for c in 0..av.cols {
                value.data[c] += av.data[r * av.cols + c];
            }
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::SumRows(a), t)
    }

    /// Row sums: `m x n -> m x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let data = (0..av.rows)
            .map(|r| av.data[r * av.cols..(r + 1) * av.cols].iter().sum())
            .collect();
        let value = Tensor::from_vec(av.rows, 1, data);
        let t = self.tracked(&[a]);
        self.push(value, Op::SumCols(a), t)
    }

    /// Repeats the column `a` (m x 1) `n` times.
    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.cols, 1, "broadcast_cols expects a column");
        let mut value = Tensor::zeros(av.rows, n);
        for r in 0..av.rows {
            value.data[r * n..(r + 1) * n].fill(av.data[r]);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::BroadcastCols(a), t)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pv.data);
            rows += pv.rows;
        }
        let t = self.tracked(parts);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.data[r * cols + off..r * cols + off + pv.cols]
                    .copy_from_slice(&pv.data[r * pv.cols..(r + 1) * pv.cols]);
            }
            off += pv.cols;
        }
        let t = self.tracked(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows, "slice_rows out of range");
        let value = Tensor::from_vec(
            len,
            av.cols,
            av.data[start * av.cols..(start + len) * av.cols].to_vec(),
        );
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceRows(a, start), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols, "slice_cols out of range");
        let mut value = Tensor::zeros(av.rows, len);
        for r in 0..av.rows {
            value.data[r * len..(r + 1) * len]
                .copy_from_slice(&av.data[r * av.cols + start..r * av.cols + start + len]);
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::SliceCols(a, start), t)
    }

    /// `[a a ... a]` with `k` copies side by side.
    pub fn tile_cols(&mut self, a: Var, k: usize) -> Var {
        let av = self.value(a);
        let n = av.cols;
        let mut value = Tensor::zeros(av.rows, n * k);
        for r in 0..av.rows {
            for j in 0..k {
                value.data[r * n * k + j * n..r * n * k + (j + 1) * n]
                    .copy_from_slice(&av.data[r * n..(r + 1) * n]);
            }
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::TileCols(a, k), t)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let t = self.tracked(&[a]);
        self.push(value, Op::Transpose(a), t)
    }

    /// Reinterprets the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let value = Tensor::from_vec(rows, cols, self.value(a).data.clone());
        let t = self.tracked(&[a]);
        self.push(value, Op::Reshape(a), t)
    }

    /// `out.data[k] = a.data[index[k]]`, or zero for [`GATHER_ZERO`].
    pub fn gather(&mut self, a: Var, index: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        assert_eq!(index.len(), rows * cols, "gather index length mismatch");
        let av = self.value(a);
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { av.data[i as usize] })
            .collect();
        let t = self.tracked(&[a]);
        self.push(Tensor::from_vec(rows, cols, data), Op::Gather(a, index), t)
    }

    /// Adjoint of [`Tape::gather`]: `out.data[index[k]] += a.data[k]`.
    pub fn scatter_add(&mut self, a: Var, index: Arc<Vec<u32>>, rows: usize, cols: usize) -> Var {
        let av = self.value(a);
        assert_eq!(index.len(), av.len(), "scatter index length mismatch");
        let mut value = Tensor::zeros(rows, cols);
        for (k, &i) in index.iter().enumerate() {
            if i != GATHER_ZERO {
                value.data[i as usize] += av.data[k];
            }
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::ScatterAdd(a, index), t)
    }

    /// Euclidean norm of each column: `m x n -> 1 x n`.
    pub fn column_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut value = Tensor::zeros(1, av.cols);
        for r in 0..av.rows {
            for c in 0..av.cols {
                let x = av.data[r * av.cols + c];
                value.data[c] += x * x;
            }
        }
        for v in &mut value.data {
            *v = v.sqrt();
        }
        let t = self.tracked(&[a]);
        self.push(value, Op::ColumnNorm(a), t)
    }

    /// Front-to-back alpha compositing of ray segments.
    ///
    /// `alpha` is `1 x P`, `color` is `3 x P`, and ray `r` owns samples
    /// `segments[r]..segments[r + 1]`, ordered near to far. The result is
    /// `3 x R`: `sum_i w_i c_i + (1 - sum_i w_i) * background` with
    /// `w_i = alpha_i * prod_{j<i} (1 - alpha_j)`.
    pub fn composite(
        &mut self,
        alpha: Var,
        color: Var,
        segments: Arc<Vec<usize>>,
        background: [f64; 3],
    ) -> Var {
        let (av, cv) = (self.value(alpha), self.value(color));
        let p = av.cols;
        assert_eq!(av.rows, 1, "alpha must be a row");
        assert_eq!((cv.rows, cv.cols), (3, p), "color must be 3 x P");
        assert_eq!(*segments.last().unwrap_or(&0), p, "segments must cover all samples");
        let n_rays = segments.len() - 1;
        let mut value = Tensor::zeros(3, n_rays);
        for r in 0..n_rays {
            let mut trans = 1.0;
            let mut acc = [0.0; 3];
            for i in segments[r]..segments[r + 1] {
                let a = av.data[i];
                assert!((0.0..=1.0).contains(&a), "opacity {a} outside [0, 1]");
                let w = a * trans;
                for ch in 0..3 {
                    acc[ch] += w * cv.data[ch * p + i];
                }
                trans *= 1.0 - a;
            }
            for ch in 0..3 {
                value.data[ch * n_rays + r] = acc[ch] + trans * background[ch];
            }
        }
        let t = self.tracked(&[alpha, color]);
        self.push(
            value,
            Op::Composite {
                alpha,
                color,
                segments,
                background,
            },
            t,
        )
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let shape = self.value(output).shape();
        assert_eq!(shape, (1, 1), "backward() needs a scalar output, got {shape:?}");
        self.backward_with_seed(output, Tensor::scalar(1.0))
    }

    /// Vector-Jacobian product: propagates `seed` (shaped like `output`).
    pub fn backward_with_seed(&self, output: Var, seed: Tensor) -> Gradients {
        assert_eq!(
            seed.shape(),
            self.value(output).shape(),
            "seed shape must match the output"
        );
        let n = output.0 + 1;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].tracked;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if want(*a) {
                    let mut ga = Tensor::zeros(val(*a).rows, val(*a).cols);
                    gemm(g, false, val(*b), true, &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if want(*b) {
                    let mut gb = Tensor::zeros(val(*b).rows, val(*b).cols);
                    gemm(val(*a), true, g, false, &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::AddBias(x, b) => {
                if want(*b) {
                    let gb = (0..g.rows)
                        .map(|r| g.data[r * g.cols..(r + 1) * g.cols].iter().sum())
                        .collect();
                    self.accumulate(grads, *b, Tensor::column(gb));
                }
                self.accumulate(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if want(*b) {
                    self.accumulate(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    self.accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                }
                if want(*b) {
                    self.accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::MulScalar(a, k) => {
                let kv = val(*k).item();
                if want(*a) {
                    self.accumulate(grads, *a, g.map(|x| x * kv));
                }
                if want(*k) {
                    let s = g.data.iter().zip(&val(*a).data).map(|(x, y)| x * y).sum();
                    self.accumulate(grads, *k, Tensor::scalar(s));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| x * c)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Softplus(a, beta) => {
                let d = val(*a).map(|x| sigmoid(beta * x));
                self.accumulate(grads, *a, g.zip_map(&d, |x, y| x * y));
            }
            Op::Sigmoid(a) => {
                self.accumulate(grads, *a, g.zip_map(out, |x, s| x * s * (1.0 - s)));
            }
            Op::Relu(a) => {
                self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { slope * x }),
                );
            }
            Op::Sin(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| x * y.cos())),
            Op::Cos(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| -x * y.sin())),
            Op::Sqrt(a) => self.accumulate(grads, *a, g.zip_map(out, |x, s| 0.5 * x / s)),
            Op::Square(a) => self.accumulate(grads, *a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, |x, e| x * e)),
            Op::Sum(a) => {
                let av = val(*a);
                let gs = g.item();
                self.accumulate(grads, *a, Tensor::from_vec(av.rows, av.cols, vec![gs; av.len()]));
            }
            Op::SumRows(a) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.data[r * av.cols..(r + 1) * av.cols].copy_from_slice(&g.data);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.data[r * av.cols..(r + 1) * av.cols].fill(g.data[r]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::BroadcastCols(a) => {
                let gb = (0..g.rows)
                    .map(|r| g.data[r * g.cols..(r + 1) * g.cols].iter().sum())
                    .collect();
                self.accumulate(grads, *a, Tensor::column(gb));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    let n = pv.len();
                    if want(p) {
                        let gp = Tensor::from_vec(pv.rows, pv.cols, g.data[off..off + n].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let pv = val(p);
                    if want(p) {
                        let mut gp = Tensor::zeros(pv.rows, pv.cols);
                        for r in 0..pv.rows {
                            gp.data[r * pv.cols..(r + 1) * pv.cols].copy_from_slice(
                                &g.data[r * g.cols + off..r * g.cols + off + pv.cols],
                            );
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += pv.cols;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                ga.data[start * av.cols..start * av.cols + g.len()].copy_from_slice(&g.data);
                self.accumulate(grads, *a, ga);
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    ga.data[r * av.cols + start..r * av.cols + start + g.cols]
                        .copy_from_slice(&g.data[r * g.cols..(r + 1) * g.cols]);
                }
                self.accumulate(grads, *a, ga);
            }
            Op::TileCols(a, k) => {
                let av = val(*a);
                let n = av.cols;
                let mut ga = Tensor::zeros(av.rows, n);
                for r in 0..av.rows {
                    for j in 0..*k {
                        for c in 0..n {
                            ga.data[r * n + c] += g.data[r * n * k + j * n + c];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let av = val(*a);
                self.accumulate(grads, *a, Tensor::from_vec(av.rows, av.cols, g.data.clone()));
            }
            Op::Gather(a, index) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for (k, &ix) in index.iter().enumerate() {
                    if ix != GATHER_ZERO {
                        ga.data[ix as usize] += g.data[k];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::ScatterAdd(a, index) => {
                let av = val(*a);
                let data = index
                    .iter()
                    .map(|&ix| if ix == GATHER_ZERO { 0.0 } else { g.data[ix as usize] })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_vec(av.rows, av.cols, data));
            }
            Op::ColumnNorm(a) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows, av.cols);
                for c in 0..av.cols {
                    let nrm = out.data[c];
                    if nrm > 0.0 {
                        let k = g.data[c] / nrm;
                        for r in 0..av.rows {
                            ga.data[r * av.cols + c] = k * av.data[r * av.cols + c];
                        }
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Composite {
                alpha,
                color,
                segments,
                background,
            } => {
                let (av, cv) = (val(*alpha), val(*color));
                let p = av.cols;
                let n_rays = segments.len() - 1;
                let mut ga = Tensor::zeros(1, p);
                let mut gc = Tensor::zeros(3, p);
                for r in 0..n_rays {
                    let (lo, hi) = (segments[r], segments[r + 1]);
                    let gr = [g.data[r], g.data[n_rays + r], g.data[2 * n_rays + r]];
                    // Transmittance before each sample.
                    let mut trans = 1.0;
                    for i in lo..hi {
                        let w = av.data[i] * trans;
                        for ch in 0..3 {
                            gc.data[ch * p + i] = w * gr[ch];
                        }
                        ga.data[i] = trans; // temporarily T_i
                        trans *= 1.0 - av.data[i];
                    }
                    // d rgb / d alpha_k = T_k * (e_k - U_k), with
                    // U_k = sum_{i>k} alpha_i e_i prod_{k<j<i} (1 - alpha_j)
                    // and e_i = g . (c_i - background).
                    let mut tail = 0.0;
                    for i in (lo..hi).rev() {
                        let e: f64 = (0..3)
                            .map(|ch| gr[ch] * (cv.data[ch * p + i] - background[ch]))
                            .sum();
                        let t_i = ga.data[i];
                        ga.data[i] = t_i * (e - tail);
                        tail = av.data[i] * e + (1.0 - av.data[i]) * tail;
                    }
                }
                if want(*alpha) {
                    self.accumulate(grads, *alpha, ga);
                }
                if want(*color) {
                    self.accumulate(grads, *color, gc);
                }
            }
        }
    }
}
