use crate::kernels::{self, dot, gelu, gelu_grad, js_rows_with, log_sum_exp, sigmoid};
use crate::{Real, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower and upper clamp applied to probabilities inside [`Tape::bce`].
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    MulConst {
        x: Var,
        c: Vec<T>,
    },
    Sigmoid(Var),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    NormalizeRows {
        x: Var,
        sums: Vec<T>,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    PairwiseJs(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    NtXent {
        sim: Var,
        positives: Vec<usize>,
        anchors: Vec<usize>,
    },
    Bce {
        p: Var,
        target: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow { .. } => "add_row",
            Op::Scale { .. } => "scale",
            Op::MulConst { .. } => "mul_const",
            Op::Sigmoid(_) => "sigmoid",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Gather { .. } => "gather",
            Op::SelectRows { .. } => "select_rows",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::PairwiseJs(_) => "pairwise_js",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::NtXent { .. } => "nt_xent",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of a forward computation.
///
/// Nodes are appended in execution order, so every operation's inputs
/// precede it and a reverse sweep is a valid topological order.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    checked: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf; `None` for values that were not marked `requires_grad`.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: false,
        }
    }

    /// A tape that rejects any operation producing NaN or infinity.
    pub fn checked() -> Self {
        Tape {
            nodes: Vec::new(),
            checked: true,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::shape(op, sa, sb));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(TensorError::contract(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (br, bc) = self.matrix_dims("matmul", b)?;
        let (bk, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != bk {
            return Err(TensorError::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if trans_b {
                kernels::matmul_nt(ad, bd, &mut out, m, k, n);
            } else {
                kernels::matmul_nn(ad, bd, &mut out, m, k, n);
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        )
    }

    /// Batched product of `a[B×m×k]` with `b[B×k×n]` (or `b[B×n×k]ᵀ`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[batch, m, k], &[bb, b1, b2]) = (&sa[..], &sb[..]) else {
            return Err(TensorError::shape("batch_matmul", &sa, &sb));
        };
        let (bk, n) = if trans_b { (b2, b1) } else { (b1, b2) };
        if batch != bb || k != bk {
            return Err(TensorError::shape("batch_matmul", &sa, &sb));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for t in 0..batch {
                let a_blk = &ad[t * m * k..(t + 1) * m * k];
                let b_blk = &bd[t * k * n..(t + 1) * k * n];
                let o_blk = &mut out[t * m * n..(t + 1) * m * n];
                if trans_b {
                    kernels::matmul_nt(a_blk, b_blk, o_blk, m, k, n);
                } else {
                    kernels::matmul_nn(a_blk, b_blk, o_blk, m, k, n);
                }
            }
        }
        let value = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.numel() == 1 && vb.numel() != 1 || vb.numel() == 1 && va.numel() != 1 {
            return Err(TensorError::contract(
                op,
                "scalar broadcast is expressed with `scale`; operands must share a shape",
            ));
        }
        self.same_shape(op, a, b)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("add", a, b, |x, y| x + y)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("sub", a, b, |x, y| x - y)?;
        self.push(value, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_with("mul", a, b, |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    /// Adds `row` (length = last dimension of `x`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (vx, vr) = (self.value(x), self.value(row));
        let c = vx.last_dim();
        if vr.rank() != 1 || vr.numel() != c {
            return Err(TensorError::shape("add_row", vx.shape(), vr.shape()));
        }
        let r = vr.data();
        let data = vx
            .data()
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::AddRow { x, row }, &[x, row])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * c).collect())?;
        self.push(value, Op::Scale { x, c }, &[x])
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape() != c.shape() {
            return Err(TensorError::shape("mul_const", vx.shape(), c.shape()));
        }
        let data = vx.data().iter().zip(c.data()).map(|(&a, &b)| a * b).collect();
        let value = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(value, Op::MulConst { x, c: c.into_data() }, &[x])
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let vx = self.value(x);
        Tensor::from_fn(vx.shape().to_vec(), |i| f(vx.data()[i]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, gelu);
        self.push(value, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.map(x, |v| v.max(T::zero()));
        self.push(value, Op::Relu(x), &[x])
    }

    // ---- normalization --------------------------------------------------

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(TensorError::contract("layer_norm", "eps must be positive"));
        }
        let vx = self.value(x);
        let h = vx.last_dim();
        for p in [gain, bias] {
            let s = self.shape(p);
            if s != [h] {
                return Err(TensorError::shape("layer_norm", vx.shape(), s));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = vx.rows();
        let hf = T::lit(h as f64);
        let mut out = vec![T::zero(); vx.numel()];
        let mut xhat = vec![T::zero(); vx.numel()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().copied().sum::<T>() / hf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / hf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..h {
                let xh = (row[j] - mean) * rs;
                xhat[r * h + j] = xh;
                out[r * h + j] = xh * g[j] + b[j];
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_masked(x, None)
    }

    /// Softmax over the last dimension with excluded keys.
    ///
    /// `mask` is `(keep, rows_per_group)`: row `r` uses the key flags
    /// `keep[g*c..(g+1)*c]` with `g = r / rows_per_group`. Excluded keys get
    /// probability exactly zero. A row with no kept key is all zeros.
    pub fn softmax_masked(&mut self, x: Var, mask: Option<(&[bool], usize)>) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let rows = vx.rows();
        if let Some((keep, per)) = mask {
            if per == 0 || keep.len() % c != 0 || keep.len() / c * per != rows {
                return Err(TensorError::contract(
                    "softmax",
                    format!("mask of {} flags does not tile {rows} rows of width {c}", keep.len()),
                ));
            }
        }
        let mut out = vec![T::zero(); vx.numel()];
        for r in 0..rows {
            let row = vx.row(r);
            let keep_row = mask.map(|(keep, per)| &keep[(r / per) * c..(r / per + 1) * c]);
            let kept = |j: usize| keep_row.map_or(true, |k| k[j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if kept(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let o = &mut out[r * c..(r + 1) * c];
            let mut sum = T::zero();
            for j in 0..c {
                if kept(j) {
                    o[j] = (row[j] - max).exp();
                    sum += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= sum;
            }
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// `(x + eps) / Σ(x + eps)` per row.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let vx = self.value(x);
        let c = vx.last_dim();
        let mut sums = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let s: T = row.iter().map(|&v| v + eps).sum();
            if s <= T::zero() {
                return Err(TensorError::contract("normalize_rows", format!("row {r} has non-positive mass")));
            }
            sums.push(s);
            out.extend(row.iter().map(|&v| (v + eps) / s));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        debug_assert_eq!(value.last_dim(), c);
        self.push(value, Op::NormalizeRows { x, sums }, &[x])
    }

    /// Scales each row to unit Euclidean norm. Zero rows are a contract error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let mut norms = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.numel());
        for r in 0..vx.rows() {
            let row = vx.row(r);
            let n = dot(row, row).sqrt();
            if n == T::zero() {
                return Err(TensorError::contract("l2_normalize_rows", format!("row {r} has zero norm")));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(vx.shape().to_vec(), out)?;
        self.push(value, Op::L2NormalizeRows { x, norms }, &[x])
    }

    // ---- indexing and layout -------------------------------------------

    /// Looks up rows of `table[V×H]`, producing `[ids.len()×H]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, h) = self.matrix_dims("gather", table)?;
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * h);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "gather",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&t[id * h..(id + 1) * h]);
        }
        let value = Tensor::new(vec![ids.len(), h], out)?;
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Selects rows of `x` viewed as a matrix over its last dimension.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let (n, c) = (vx.rows(), vx.last_dim());
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    size: n,
                });
            }
            out.extend_from_slice(vx.row(r));
        }
        let value = Tensor::new(vec![rows.len(), c], out)?;
        self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::contract("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(vx.data(), shape, perm);
        let value = Tensor::new(out_shape, out)?;
        self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        )
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.numel() == 0 {
            return Err(TensorError::contract("mean", "empty tensor"));
        }
        let s: T = vx.data().iter().copied().sum();
        let m = s / T::lit(vx.numel() as f64);
        self.push(Tensor::scalar(m), Op::Mean(x), &[x])
    }

    /// Sums each row over the last dimension; drops that dimension.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        let shape = vx.shape();
        let out_shape = shape[..shape.len().saturating_sub(1)].to_vec();
        let data = (0..vx.rows()).map(|r| vx.row(r).iter().copied().sum()).collect();
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::RowSum(x), &[x])
    }

    // ---- fused losses and similarities ----------------------------------

    /// Jensen-Shannon divergence between every pair of rows of `x[n×V]`.
    pub fn pairwise_js(&mut self, x: Var) -> Result<Var> {
        let (n, _) = self.matrix_dims("pairwise_js", x)?;
        let vx = self.value(x);
        if vx.data().iter().any(|&v| v < T::zero()) {
            return Err(TensorError::contract("pairwise_js", "rows must be non-negative"));
        }
        let h: Vec<T> = (0..n)
            .map(|i| vx.row(i).iter().fold(T::zero(), |acc, &v| acc + kernels::xlogx(v)))
            .collect();
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in i + 1..n {
                let js = js_rows_with(vx.row(i), vx.row(j), h[i], h[j]);
                out[i * n + j] = js;
                out[j * n + i] = js;
            }
        }
        let value = Tensor::new(vec![n, n], out)?;
        self.push(value, Op::PairwiseJs(x), &[x])
    }

    /// Mean softmax cross-entropy of `logits[r×V]` against class `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, v) = self.matrix_dims("cross_entropy", logits)?;
        if labels.len() != r {
            return Err(TensorError::shape("cross_entropy", &[r, v], &[labels.len()]));
        }
        if r == 0 {
            return Err(TensorError::contract("cross_entropy", "no rows"));
        }
        let vl = self.value(logits);
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            if label >= v {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: label,
                    size: v,
                });
            }
            let row = vl.row(i);
            let lse = log_sum_exp(row, |_| true);
            total += lse - row[label];
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / T::lit(r as f64));
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// InfoNCE over a square similarity matrix.
    ///
    /// For each anchor `i`, the loss is `-sim[i][pos_i] + logsumexp_{k≠i} sim[i][k]`;
    /// the result is the mean over anchors.
    pub fn nt_xent(&mut self, sim: Var, positives: &[usize], anchors: &[usize]) -> Result<Var> {
        let (n, c) = self.matrix_dims("nt_xent", sim)?;
        if n != c || positives.len() != n {
            return Err(TensorError::shape("nt_xent", &[n, c], &[positives.len()]));
        }
        if anchors.is_empty() {
            return Err(TensorError::contract("nt_xent", "no anchors"));
        }
        let vs = self.value(sim);
        let mut total = T::zero();
        for &i in anchors {
            let p = positives[i];
            if i >= n || p >= n || p == i {
                return Err(TensorError::contract("nt_xent", format!("anchor {i} has invalid positive {p}")));
            }
            let row = vs.row(i);
            total += log_sum_exp(row, |k| k != i) - row[p];
        }
        let value = Tensor::scalar(total / T::lit(anchors.len() as f64));
        self.push(
            value,
            Op::NtXent {
                sim,
                positives: positives.to_vec(),
                anchors: anchors.to_vec(),
            },
            &[sim],
        )
    }

    /// Elementwise binary cross-entropy `-(y ln p + (1-y) ln(1-p))` with `p`
    /// clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`. Gradient is zero where the
    /// clamp is active.
    pub fn bce(&mut self, p: Var, target: &Tensor<T>) -> Result<Var> {
        let vp = self.value(p);
        if vp.shape() != target.shape() {
            return Err(TensorError::shape("bce", vp.shape(), target.shape()));
        }
        let (lo, hi) = clamp_bounds::<T>();
        let data = vp
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &y)| {
                let pc = pv.max(lo).min(hi);
                -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln())
            })
            .collect();
        let value = Tensor::new(vp.shape().to_vec(), data)?;
        self.push(
            value,
            Op::Bce {
                p,
                target: target.data().to_vec(),
            },
            &[p],
        )
    }

    // ---- reverse sweep --------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires a gradient. Leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if matches!(node.op, Op::Leaf) && node.requires_grad {
                    let data = grads[i].take().unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("gradient shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.requires_grad(a) {
                    let ga = slot(grads, a, m * k);
                    if trans_b {
                        kernels::matmul_nn(g, bd, ga, m, n, k);
                    } else {
                        kernels::matmul_nt(g, bd, ga, m, n, k);
                    }
                }
                if self.requires_grad(b) {
                    let gb = slot(grads, b, k * n);
                    if trans_b {
                        kernels::matmul_tn(g, ad, gb, m, n, k);
                    } else {
                        kernels::matmul_tn(ad, g, gb, m, k, n);
                    }
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                for t in 0..batch {
                    let gt = &g[t * m * n..(t + 1) * m * n];
                    let a_blk = &ad[t * m * k..(t + 1) * m * k];
                    let b_blk = &bd[t * k * n..(t + 1) * k * n];
                    if self.requires_grad(a) {
                        let ga = &mut slot(grads, a, batch * m * k)[t * m * k..(t + 1) * m * k];
                        if trans_b {
                            kernels::matmul_nn(gt, b_blk, ga, m, n, k);
                        } else {
                            kernels::matmul_nt(gt, b_blk, ga, m, n, k);
                        }
                    }
                    if self.requires_grad(b) {
                        let gb = &mut slot(grads, b, batch * k * n)[t * k * n..(t + 1) * k * n];
                        if trans_b {
                            kernels::matmul_tn(gt, a_blk, gb, m, n, k);
                        } else {
                            kernels::matmul_tn(a_blk, gt, gb, m, k, n);
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g, T::one());
                self.accumulate(grads, b, g, T::one());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g, T::one());
                self.accumulate(grads, b, g, -T::one());
            }
            &Op::Mul(a, b) => {
                let (ad, bd) = (self.value(a).data(), self.value(b).data());
                if self.requires_grad(a) {
                    let ga = slot(grads, a, g.len());
                    for ((d, &gv), &bv) in ga.iter_mut().zip(g).zip(bd) {
                        *d += gv * bv;
                    }
                }
                if self.requires_grad(b) {
                    let gb = slot(grads, b, g.len());
                    for ((d, &gv), &av) in gb.iter_mut().zip(g).zip(ad) {
                        *d += gv * av;
                    }
                }
            }
            &Op::AddRow { x, row } => {
                self.accumulate(grads, x, g, T::one());
                if self.requires_grad(row) {
                    let c = self.value(row).numel();
                    let gr = slot(grads, row, c);
                    for chunk in g.chunks(c) {
                        for (d, &v) in gr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                }
            }
            &Op::Scale { x, c } => {
                self.accumulate(grads, x, g, c);
            }
            Op::MulConst { x, c } => {
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, g.len());
                    for ((d, &gv), &cv) in gx.iter_mut().zip(g).zip(c) {
                        *d += gv * cv;
                    }
                }
            }
            &Op::Sigmoid(x) => {
                self.elementwise_grad(grads, x, g, |i, _| out[i] * (T::one() - out[i]));
            }
            &Op::Gelu(x) => {
                let xd = self.value(x).data();
                self.elementwise_grad(grads, x, g, |i, _| gelu_grad(xd[i]));
            }
            &Op::Relu(x) => {
                let xd = self.value(x).data();
                self.elementwise_grad(grads, x, g, |i, _| if xd[i] > T::zero() { T::one() } else { T::zero() });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gd = self.value(*gain).data();
                let h = gd.len();
                let hf = T::lit(h as f64);
                if self.requires_grad(*x) {
                    let gx = slot(grads, *x, g.len());
                    let mut dxhat = vec![T::zero(); h];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * h..(r + 1) * h];
                        let xr = &xhat[r * h..(r + 1) * h];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..h {
                            dxhat[j] = gr[j] * gd[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xr[j];
                        }
                        mean_d /= hf;
                        mean_dx /= hf;
                        for j in 0..h {
                            gx[r * h + j] += rs * (dxhat[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                }
                if self.requires_grad(*gain) {
                    let gg = slot(grads, *gain, h);
                    for (gr, xr) in g.chunks(h).zip(xhat.chunks(h)) {
                        for j in 0..h {
                            gg[j] += gr[j] * xr[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let gb = slot(grads, *bias, h);
                    for gr in g.chunks(h) {
                        for j in 0..h {
                            gb[j] += gr[j];
                        }
                    }
                }
            }
            &Op::Softmax(x) => {
                if self.requires_grad(x) {
                    let c = node.value.last_dim();
                    let gx = slot(grads, x, g.len());
                    for r in 0..node.value.rows() {
                        let y = &out[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = dot(y, gr);
                        for j in 0..c {
                            gx[r * c + j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::NormalizeRows { x, sums } => {
                if self.requires_grad(*x) {
                    let c = node.value.last_dim();
                    let gx = slot(grads, *x, g.len());
                    for (r, &s) in sums.iter().enumerate() {
                        let y = &out[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let d = dot(y, gr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - d) / s;
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if self.requires_grad(*x) {
                    let c = node.value.last_dim();
                    let gx = slot(grads, *x, g.len());
                    for (r, &nrm) in norms.iter().enumerate() {
                        let y = &out[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let d = dot(y, gr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - y[j] * d) / nrm;
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if self.requires_grad(*table) {
                    let h = node.value.last_dim();
                    let gt = slot(grads, *table, self.value(*table).numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..h {
                            gt[id * h + j] += g[r * h + j];
                        }
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                if self.requires_grad(*x) {
                    let c = node.value.last_dim();
                    let gx = slot(grads, *x, self.value(*x).numel());
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            gx[r * c + j] += g[i * c + j];
                        }
                    }
                }
            }
            &Op::Reshape(x) => {
                self.accumulate(grads, x, g, T::one());
            }
            Op::Permute { x, perm } => {
                if self.requires_grad(*x) {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let back = permute_data(g, node.value.shape(), &inverse);
                    let gx = slot(grads, *x, back.len());
                    axpy(gx, &back, T::one());
                }
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                if self.requires_grad(x) {
                    slot(grads, x, n).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                let gv = g[0] / T::lit(n as f64);
                if self.requires_grad(x) {
                    slot(grads, x, n).iter_mut().for_each(|d| *d += gv);
                }
            }
            &Op::RowSum(x) => {
                if self.requires_grad(x) {
                    let c = self.value(x).last_dim();
                    let gx = slot(grads, x, self.value(x).numel());
                    for (r, &gv) in g.iter().enumerate() {
                        for d in &mut gx[r * c..(r + 1) * c] {
                            *d += gv;
                        }
                    }
                }
            }
            &Op::PairwiseJs(x) => {
                if self.requires_grad(x) {
                    let vx = self.value(x);
                    let (n, c) = (vx.rows(), vx.last_dim());
                    let gx = slot(grads, x, vx.numel());
                    let half = T::lit(0.5);
                    let two = T::lit(2.0);
                    let tiny = T::min_positive_value();
                    // d JS / dp = ½ (ln 2p − ln(p+q)); the ln 2p half is per row
                    let ln2p: Vec<T> = vx.data().iter().map(|&v| (two * v.max(tiny)).ln()).collect();
                    for i in 0..n {
                        for j in i + 1..n {
                            let w = g[i * n + j] + g[j * n + i];
                            if w == T::zero() {
                                continue;
                            }
                            let wh = w * half;
                            let (p, q) = (vx.row(i), vx.row(j));
                            for t in 0..c {
                                let ls = (p[t] + q[t]).max(tiny).ln();
                                gx[i * c + t] += wh * (ln2p[i * c + t] - ls);
                                gx[j * c + t] += wh * (ln2p[j * c + t] - ls);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if self.requires_grad(*logits) {
                    let v = self.value(*logits).last_dim();
                    let scale = g[0] / T::lit(labels.len() as f64);
                    let gl = slot(grads, *logits, probs.len());
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..v {
                            let onehot = if j == label { T::one() } else { T::zero() };
                            gl[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                }
            }
            Op::NtXent {
                sim,
                positives,
                anchors,
            } => {
                if self.requires_grad(*sim) {
                    let vs = self.value(*sim);
                    let n = vs.rows();
                    let scale = g[0] / T::lit(anchors.len() as f64);
                    let gs = slot(grads, *sim, n * n);
                    for &i in anchors {
                        let row = vs.row(i);
                        let lse = log_sum_exp(row, |k| k != i);
                        for k in 0..n {
                            if k == i {
                                continue;
                            }
                            let pk = (row[k] - lse).exp();
                            let target = if k == positives[i] { T::one() } else { T::zero() };
                            gs[i * n + k] += scale * (pk - target);
                        }
                    }
                }
            }
            Op::Bce { p, target } => {
                let pd = self.value(*p).data();
                let (lo, hi) = clamp_bounds::<T>();
                self.elementwise_grad(grads, *p, g, |i, _| {
                    let pv = pd[i];
                    if pv < lo || pv > hi {
                        T::zero()
                    } else {
                        let y = target[i];
                        -y / pv + (T::one() - y) / (T::one() - pv)
                    }
                });
            }
        }
    }

    fn elementwise_grad(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], local: impl Fn(usize, T) -> T) {
        if self.requires_grad(x) {
            let gx = slot(grads, x, g.len());
            for (i, (d, &gv)) in gx.iter_mut().zip(g).enumerate() {
                *d += gv * local(i, gv);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], x: Var, g: &[T], a: T) {
        if self.requires_grad(x) {
            axpy(slot(grads, x, g.len()), g, a);
        }
    }
}

fn clamp_bounds<T: Real>() -> (T, T) {
    let lo = T::lit(BCE_CLAMP);
    (lo, T::one() - lo)
}

fn slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], a: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}
