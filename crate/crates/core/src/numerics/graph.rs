//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a node
//! holding its forward value; [`Graph::backward`] walks the nodes in reverse and
//! accumulates gradients into every node that (transitively) depends on a leaf
//! flagged `requires_grad`.

use super::{NumericsError, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Softmax { x: Var, axis: usize },
    MeanPool { x: Var, axis: usize },
    Sum(Var),
    Mean(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    GatherRows { x: Var, indices: Vec<usize> },
    SliceCols { x: Var, start: usize },
    L2Normalize { x: Var, axis: usize, norms: Vec<T> },
    CrossEntropyRows { logits: Var, targets: Vec<usize> },
    BceWithLogits { logits: Var, labels: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require grad or received no contribution.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Iteration layout for reductions along an axis of the matrix view.
#[derive(Debug, Clone, Copy)]
struct Lanes {
    count: usize,
    len: usize,
    lane_stride: usize,
    elem_stride: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Result<Self, NumericsError> {
        let (rows, cols) = match shape.len() {
            1 => (1, shape[0]),
            _ => (shape[0], shape[1]),
        };
        let along_cols = match (shape.len(), axis) {
            (1, 0) | (2, 1) => true,
            (2, 0) => false,
            _ => return Err(NumericsError::Axis { axis, rank: shape.len() }),
        };
        Ok(if along_cols {
            Lanes { count: rows, len: cols, lane_stride: cols, elem_stride: 1 }
        } else {
            Lanes { count: cols, len: rows, lane_stride: 1, elem_stride: cols }
        })
    }

    #[inline]
    fn idx(&self, lane: usize, i: usize) -> usize {
        lane * self.lane_stride + i * self.elem_stride
    }

    fn reduced_shape(&self) -> Vec<usize> {
        vec![self.count]
    }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    if shape.len() == 1 {
        (1, shape[0])
    } else {
        (shape[0], shape[1])
    }
}

/// `c = a(m x k) * b`, where `b` is `k x n`, or `n x k` when `trans_b`.
fn gemm_into<T: Scalar>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    beta: T,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths checked above; c does not alias a or b.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    // max(x, 0) + ln(1 + exp(-|x|))
    let relu = if x > T::ZERO { x } else { T::ZERO };
    relu + (T::ONE + (-x.abs()).exp()).ln()
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Reverse-mode computation graph over tensors of element type `T`.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, false)
    }

    /// `a (m x k) * b^T` with `b` stored as `n x k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, NumericsError> {
        let (m, k) = matrix_dims(self.shape(a));
        let (br, bc) = matrix_dims(self.shape(b));
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::ZERO; m * n];
        gemm_into(
            self.nodes[a.0].value.data(),
            false,
            self.nodes[b.0].value.data(),
            trans_b,
            m,
            k,
            n,
            &mut out,
            T::ZERO,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (r, c) = matrix_dims(self.shape(x));
        let src = self.nodes[x.0].value.data();
        let mut out = vec![T::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.nodes[x.0].value.clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Broadcast-add a `[c]` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let c = self.nodes[x.0].value.cols();
        if self.nodes[bias.0].value.len() != c {
            return Err(NumericsError::ShapeMismatch {
                op: "add_row",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let bv = self.nodes[bias.0].value.data();
        let out: Vec<T> = self.nodes[x.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bv[i % c])
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow { x, bias }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let out: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let value = self.nodes[x.0].value.clone();
        let shape = value.shape().to_vec();
        let out: Vec<T> = value.into_data().into_iter().map(|v| v * f).collect();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out).expect("shape preserved"),
            Op::Scale(x, factor),
            rg,
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of length `cols`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = (xv.rows(), xv.cols());
        if cols == 0 {
            return Err(NumericsError::EmptyAxis("layer_norm"));
        }
        if self.nodes[gamma.0].value.len() != cols || self.nodes[beta.0].value.len() != cols {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: xv.shape().to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let g = self.nodes[gamma.0].value.data();
        let b = self.nodes[beta.0].value.data();
        let n = T::from_f64(cols as f64);
        let eps = T::from_f64(eps);
        let mut xhat = vec![T::ZERO; rows * cols];
        let mut rstd = vec![T::ZERO; rows];
        let mut out = vec![T::ZERO; rows * cols];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::ONE / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let a = T::from_f64(GELU_A);
        let half = T::from_f64(0.5);
        let value = &self.nodes[x.0].value;
        let out: Vec<T> = value
            .data()
            .iter()
            .map(|&v| half * v * (T::ONE + (c * (v + a * v * v * v)).tanh()))
            .collect();
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        self.push(Tensor::new(shape, out).expect("shape preserved"), Op::Gelu(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let value = &self.nodes[x.0].value;
        let lanes = Lanes::of(value.shape(), axis)?;
        if lanes.len == 0 {
            return Err(NumericsError::EmptyAxis("softmax"));
        }
        let src = value.data();
        let mut out = vec![T::ZERO; src.len()];
        for l in 0..lanes.count {
            let mut mx = src[lanes.idx(l, 0)];
            for i in 1..lanes.len {
                mx = mx.max(src[lanes.idx(l, i)]);
            }
            let mut total = T::ZERO;
            for i in 0..lanes.len {
                let j = lanes.idx(l, i);
                let e = (src[j] - mx).exp();
                out[j] = e;
                total += e;
            }
            for i in 0..lanes.len {
                out[lanes.idx(l, i)] /= total;
            }
        }
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, axis }, rg))
    }

    /// Mean along `axis`; the reduced axis is removed.
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let value = &self.nodes[x.0].value;
        let lanes = Lanes::of(value.shape(), axis)?;
        if lanes.len == 0 {
            return Err(NumericsError::EmptyAxis("mean_pool"));
        }
        let src = value.data();
        let n = T::from_f64(lanes.len as f64);
        let out: Vec<T> = (0..lanes.count)
            .map(|l| (0..lanes.len).map(|i| src[lanes.idx(l, i)]).sum::<T>() / n)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(lanes.reduced_shape(), out)?, Op::MeanPool { x, axis }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.nodes[x.0].value.data().iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let value = &self.nodes[x.0].value;
        if value.is_empty() {
            return Err(NumericsError::EmptyAxis("mean"));
        }
        let s: T = value.data().iter().copied().sum::<T>() / T::from_f64(value.len() as f64);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Concatenate matrix views along `axis` (0: stack rows, 1: join columns).
    /// The result is always rank 2.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, NumericsError> {
        if inputs.is_empty() {
            return Err(NumericsError::EmptyAxis("concat"));
        }
        let dims: Vec<(usize, usize)> = inputs.iter().map(|v| matrix_dims(self.shape(*v))).collect();
        let out = match axis {
            0 => {
                let c = dims[0].1;
                if let Some(bad) = inputs.iter().zip(&dims).find(|(_, d)| d.1 != c) {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        left: self.shape(inputs[0]).to_vec(),
                        right: self.shape(*bad.0).to_vec(),
                    });
                }
                let rows: usize = dims.iter().map(|d| d.0).sum();
                let mut data = Vec::with_capacity(rows * c);
                for v in inputs {
                    data.extend_from_slice(self.nodes[v.0].value.data());
                }
                Tensor::new(vec![rows, c], data)?
            }
            1 => {
                let r = dims[0].0;
                if let Some(bad) = inputs.iter().zip(&dims).find(|(_, d)| d.0 != r) {
                    return Err(NumericsError::ShapeMismatch {
                        op: "concat",
                        left: self.shape(inputs[0]).to_vec(),
                        right: self.shape(*bad.0).to_vec(),
                    });
                }
                let cols: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(r * cols);
                for row in 0..r {
                    for (v, d) in inputs.iter().zip(&dims) {
                        let src = self.nodes[v.0].value.data();
                        data.extend_from_slice(&src[row * d.1..(row + 1) * d.1]);
                    }
                }
                Tensor::new(vec![r, cols], data)?
            }
            _ => return Err(NumericsError::Axis { axis, rank: 2 }),
        };
        let rg = self.rg(inputs);
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Select rows of the matrix view; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let value = &self.nodes[x.0].value;
        let (r, c) = (value.rows(), value.cols());
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(NumericsError::Index { index: i, len: r });
            }
            data.extend_from_slice(value.row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), c], data)?,
            Op::GatherRows { x, indices: indices.to_vec() },
            rg,
        ))
    }

    /// Columns `[start, start + len)` of the matrix view.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let value = &self.nodes[x.0].value;
        let (r, c) = (value.rows(), value.cols());
        if start + len > c {
            return Err(NumericsError::Index { index: start + len, len: c });
        }
        let mut data = Vec::with_capacity(r * len);
        for row in 0..r {
            data.extend_from_slice(&value.row(row)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, rg))
    }

    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let value = &self.nodes[x.0].value;
        let lanes = Lanes::of(value.shape(), axis)?;
        let src = value.data();
        let mut out = vec![T::ZERO; src.len()];
        let mut norms = Vec::with_capacity(lanes.count);
        for l in 0..lanes.count {
            let sq: T = (0..lanes.len).map(|i| {
                let v = src[lanes.idx(l, i)];
                v * v
            }).sum();
            let norm = sq.sqrt();
            if norm == T::ZERO || !norm.is_finite() {
                return Err(NumericsError::ZeroNorm);
            }
            for i in 0..lanes.len {
                let j = lanes.idx(l, i);
                out[j] = src[j] / norm;
            }
            norms.push(norm);
        }
        let shape = value.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::L2Normalize { x, axis, norms }, rg))
    }

    /// Mean over rows of `-log softmax(logits_row)[target]`.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let value = &self.nodes[logits.0].value;
        let (r, c) = (value.rows(), value.cols());
        if targets.len() != r || r == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy_rows",
                left: value.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        if c == 0 {
            return Err(NumericsError::EmptyAxis("cross_entropy_rows"));
        }
        let mut total = T::ZERO;
        for (row, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(NumericsError::Index { index: t, len: c });
            }
            let xs = value.row(row);
            let mx = xs.iter().copied().fold(xs[0], T::max);
            let lse = mx + xs.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            total += lse - xs[t];
        }
        let loss = total / T::from_f64(r as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropyRows { logits, targets: targets.to_vec() },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `labels`, in
    /// the stable `softplus(x) - y x` form.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[T]) -> Result<Var, NumericsError> {
        let value = &self.nodes[logits.0].value;
        if value.len() != labels.len() || labels.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_with_logits",
                left: value.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let total: T = value
            .data()
            .iter()
            .zip(labels)
            .map(|(&x, &y)| softplus(x) - y * x)
            .sum();
        let loss = total / T::from_f64(labels.len() as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits { logits, labels: labels.to_vec() },
            rg,
        ))
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(T::ONE));
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Tensor::new(shape, delta).expect("gradient matches value shape"));
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let dy = gy.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = matrix_dims(self.shape(*a));
                let n = node.value.cols();
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.wants(*a) {
                    // dA = dC * op(B)^T
                    let mut da = vec![T::ZERO; m * k];
                    gemm_into(dy, false, bv, !*trans_b, m, n, k, &mut da, T::ZERO);
                    self.accumulate(grads, *a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::ZERO; k * n];
                    if *trans_b {
                        // B is n x k: dB = dC^T * A
                        gemm_into(dy, true, av, false, n, m, k, &mut db, T::ZERO);
                    } else {
                        // dB = A^T * dC
                        gemm_into(av, true, dy, false, k, m, n, &mut db, T::ZERO);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(x) => {
                let (r, c) = matrix_dims(self.shape(*x));
                let mut dx = vec![T::ZERO; r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, dy.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, dy.to_vec());
                self.accumulate(grads, *b, dy.to_vec());
            }
            Op::AddRow { x, bias } => {
                self.accumulate(grads, *x, dy.to_vec());
                if self.wants(*bias) {
                    let c = node.value.cols();
                    let mut db = vec![T::ZERO; c];
                    for (i, &g) in dy.iter().enumerate() {
                        db[i % c] += g;
                    }
                    self.accumulate(grads, *bias, db);
                }
            }
            Op::Mul(a, b) => {
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                if self.wants(*a) {
                    self.accumulate(grads, *a, dy.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, dy.iter().zip(av).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Scale(x, f) => {
                let f = T::from_f64(*f);
                self.accumulate(grads, *x, dy.iter().map(|&g| g * f).collect());
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = (node.value.rows(), node.value.cols());
                let g = self.nodes[gamma.0].value.data();
                if self.wants(*gamma) {
                    let mut dg = vec![T::ZERO; cols];
                    for (i, (&d, &h)) in dy.iter().zip(xhat).enumerate() {
                        dg[i % cols] += d * h;
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    let mut db = vec![T::ZERO; cols];
                    for (i, &d) in dy.iter().enumerate() {
                        db[i % cols] += d;
                    }
                    self.accumulate(grads, *beta, db);
                }
                if self.wants(*x) {
                    let n = T::from_f64(cols as f64);
                    let mut dx = vec![T::ZERO; rows * cols];
                    for r in 0..rows {
                        let o = r * cols;
                        let mut m1 = T::ZERO;
                        let mut m2 = T::ZERO;
                        for c in 0..cols {
                            let dh = dy[o + c] * g[c];
                            m1 += dh;
                            m2 += dh * xhat[o + c];
                        }
                        m1 /= n;
                        m2 /= n;
                        for c in 0..cols {
                            let dh = dy[o + c] * g[c];
                            dx[o + c] = rstd[r] * (dh - m1 - xhat[o + c] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let a = T::from_f64(GELU_A);
                let half = T::from_f64(0.5);
                let three_a = T::from_f64(3.0 * GELU_A);
                let xv = self.nodes[x.0].value.data();
                let dx = xv
                    .iter()
                    .zip(dy)
                    .map(|(&v, &g)| {
                        let t = (c * (v + a * v * v * v)).tanh();
                        let du = c * (T::ONE + three_a * v * v);
                        g * (half * (T::ONE + t) + half * v * (T::ONE - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Softmax { x, axis } => {
                let lanes = Lanes::of(node.value.shape(), *axis).expect("validated in forward");
                let y = node.value.data();
                let mut dx = vec![T::ZERO; y.len()];
                for l in 0..lanes.count {
                    let dot: T = (0..lanes.len)
                        .map(|i| {
                            let j = lanes.idx(l, i);
                            dy[j] * y[j]
                        })
                        .sum();
                    for i in 0..lanes.len {
                        let j = lanes.idx(l, i);
                        dx[j] = y[j] * (dy[j] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanPool { x, axis } => {
                let shape = self.shape(*x);
                let lanes = Lanes::of(shape, *axis).expect("validated in forward");
                let n = T::from_f64(lanes.len as f64);
                let mut dx = vec![T::ZERO; shape.iter().product()];
                for l in 0..lanes.count {
                    let g = dy[l] / n;
                    for i in 0..lanes.len {
                        dx[lanes.idx(l, i)] = g;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                let g = dy[0] / T::from_f64(n as f64);
                self.accumulate(grads, *x, vec![g; n]);
            }
            Op::Concat { inputs, axis } => {
                let total_cols = node.value.cols();
                let mut row_off = 0;
                let mut col_off = 0;
                for v in inputs {
                    let (r, c) = matrix_dims(self.shape(*v));
                    if self.wants(*v) {
                        let mut dx = Vec::with_capacity(r * c);
                        if *axis == 0 {
                            dx.extend_from_slice(&dy[row_off * c..(row_off + r) * c]);
                        } else {
                            for row in 0..r {
                                let o = row * total_cols + col_off;
                                dx.extend_from_slice(&dy[o..o + c]);
                            }
                        }
                        self.accumulate(grads, *v, dx);
                    }
                    row_off += r;
                    col_off += c;
                }
            }
            Op::GatherRows { x, indices } => {
                if self.wants(*x) {
                    let xv = &self.nodes[x.0].value;
                    let c = xv.cols();
                    let mut dx = vec![T::ZERO; xv.len()];
                    for (k, &i) in indices.iter().enumerate() {
                        for j in 0..c {
                            dx[i * c + j] += dy[k * c + j];
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::SliceCols { x, start } => {
                if self.wants(*x) {
                    let xv = &self.nodes[x.0].value;
                    let (r, c) = (xv.rows(), xv.cols());
                    let len = node.value.cols();
                    let mut dx = vec![T::ZERO; r * c];
                    for row in 0..r {
                        dx[row * c + start..row * c + start + len]
                            .copy_from_slice(&dy[row * len..(row + 1) * len]);
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::L2Normalize { x, axis, norms } => {
                let lanes = Lanes::of(node.value.shape(), *axis).expect("validated in forward");
                let y = node.value.data();
                let mut dx = vec![T::ZERO; y.len()];
                for l in 0..lanes.count {
                    let dot: T = (0..lanes.len)
                        .map(|i| {
                            let j = lanes.idx(l, i);
                            dy[j] * y[j]
                        })
                        .sum();
                    for i in 0..lanes.len {
                        let j = lanes.idx(l, i);
                        dx[j] = (dy[j] - y[j] * dot) / norms[l];
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CrossEntropyRows { logits, targets } => {
                let xv = &self.nodes[logits.0].value;
                let (r, c) = (xv.rows(), xv.cols());
                let scale = dy[0] / T::from_f64(r as f64);
                let mut dx = vec![T::ZERO; r * c];
                for (row, &t) in targets.iter().enumerate() {
                    let xs = xv.row(row);
                    let mx = xs.iter().copied().fold(xs[0], T::max);
                    let total: T = xs.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..c {
                        let p = (xs[j] - mx).exp() / total;
                        let onehot = if j == t { T::ONE } else { T::ZERO };
                        dx[row * c + j] = (p - onehot) * scale;
                    }
                }
                self.accumulate(grads, *logits, dx);
            }
            Op::BceWithLogits { logits, labels } => {
                let xv = self.nodes[logits.0].value.data();
                let scale = dy[0] / T::from_f64(labels.len() as f64);
                let dx = xv
                    .iter()
                    .zip(labels)
                    .map(|(&x, &y)| (sigmoid(x) - y) * scale)
                    .collect();
                self.accumulate(grads, *logits, dx);
            }
        }
    }
}

/// Logistic function, numerically stable for large `|x|`.
pub fn logistic<T: Scalar>(x: T) -> T {
    sigmoid(x)
}
