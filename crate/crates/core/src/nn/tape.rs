use super::{NnError, ParamStore, Tensor, BN_EPS, BN_MOMENTUM, Mode};
use std::rc::Rc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: Option<usize> },
    MatMul { a: NodeId, b: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Square { x: NodeId },
    Neg { x: NodeId },
    Sum { x: NodeId },
    Min { a: NodeId, b: NodeId },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, cache: BnCache },
    NeighborSum { x: NodeId, adjacency: Rc<Vec<Vec<usize>>> },
    MeanRows { x: NodeId },
    ConcatCols { a: NodeId, b: NodeId },
    TileRows { x: NodeId },
    Reshape { x: NodeId },
    SoftmaxMasked { x: NodeId, mask: Rc<Vec<bool>> },
    LogProb { dist: NodeId, index: usize },
    Entropy { dist: NodeId },
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Dynamic computation tape: records forward ops, replays them in reverse
/// for exact gradients. One tape per forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<NodeId, NnError> {
        if !value.all_finite() {
            return Err(NnError::NonFinite(name));
        }
        let grad = Tensor::zeros(&value.shape);
        self.nodes.push(Node { value, grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A constant input; no gradient is routed anywhere.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId, NnError> {
        self.push(value, Op::Leaf { param: None }, "constant")
    }

    /// A parameter leaf; backward accumulates its gradient into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId, NnError> {
        let idx = store.idx(name)?;
        self.push(store.entries()[idx].value.clone(), Op::Leaf { param: Some(idx) }, "param")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, k, k2, m) = (ta.rows(), ta.cols(), tb.rows(), tb.cols());
        if k != k2 {
            return Err(NnError::ShapeMismatch {
                op: "matmul",
                details: format!("{:?} x {:?}", ta.shape, tb.shape),
            });
        }
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &ta.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * m..(i + 1) * m];
            for (p, &av) in row.iter().enumerate() {
                let brow = &tb.data[p * m..(p + 1) * m];
                for (o, &bv) in out_row.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::MatMul { a, b }, "matmul")
    }

    /// Adds a bias row vector to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let (n, m) = (tx.rows(), tx.cols());
        if tb.len() != m {
            return Err(NnError::ShapeMismatch {
                op: "add_bias",
                details: format!("{:?} + {:?}", tx.shape, tb.shape),
            });
        }
        let mut out = tx.data.clone();
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] += tb.data[j];
            }
        }
        self.push(Tensor::from_vec(&tx.shape.clone(), out), Op::AddBias { x, b }, "add_bias")
    }

    /// Fully connected layer `x W + b`.
    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let xw = self.matmul(x, w)?;
        self.add_bias(xw, b)
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.len() != tb.len() {
            return Err(NnError::ShapeMismatch {
                op: name,
                details: format!("{:?} vs {:?}", ta.shape, tb.shape),
            });
        }
        let data = ta.data.iter().zip(&tb.data).map(|(&x, &y)| f(x, y)).collect();
        self.push(Tensor::from_vec(&ta.shape.clone(), data), op, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn min(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        self.elementwise(a, b, "min", f64::min, Op::Min { a, b })
    }

    fn map(
        &mut self,
        x: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data.iter().map(|&v| f(v)).collect();
        self.push(Tensor::from_vec(&tx.shape.clone(), data), op, name)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId, NnError> {
        self.map(x, "scale", |v| c * v, Op::Scale { x, c })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.map(x, "relu", |v| v.max(0.0), Op::Relu { x })
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.map(x, "exp", f64::exp, Op::Exp { x })
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.map(x, "square", |v| v * v, Op::Square { x })
    }

    pub fn neg(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        self.map(x, "neg", |v| -v, Op::Neg { x })
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId, NnError> {
        self.map(x, "clamp", |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let total = self.nodes[x.0].value.data.iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, "sum")
    }

    /// Batch normalization over the row (node/batch) dimension.
    ///
    /// In [`Mode::Train`] the batch statistics normalize and the running
    /// statistics in the store are updated in place; in [`Mode::Eval`] the
    /// running statistics normalize and nothing is written.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        store: &mut ParamStore,
        running_mean: &str,
        running_var: &str,
        mode: Mode,
    ) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        let (n, m) = (tx.rows(), tx.cols());
        if self.nodes[gamma.0].value.len() != m || self.nodes[beta.0].value.len() != m {
            return Err(NnError::ShapeMismatch {
                op: "batch_norm",
                details: format!("x {:?}, gamma {:?}", tx.shape, self.nodes[gamma.0].value.shape),
            });
        }
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; m];
                let mut var = vec![0.0; m];
                for row in tx.data.chunks(m) {
                    for (v, x) in mean.iter_mut().zip(row) {
                        *v += x;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= n as f64);
                for row in tx.data.chunks(m) {
                    for ((v, x), mu) in var.iter_mut().zip(row).zip(&mean) {
                        let d = x - mu;
                        *v += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                // update running stats with the unbiased variance when possible
                let correction = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                let rm = store.get_mut(running_mean)?;
                for (r, &b) in rm.data.iter_mut().zip(&mean) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
                }
                let rv = store.get_mut(running_var)?;
                for (r, &b) in rv.data.iter_mut().zip(&var) {
                    *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * (b * correction);
                }
                (mean, var)
            }
            Mode::Eval => (
                store.get(running_mean)?.data.clone(),
                store.get(running_var)?.data.clone(),
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let tx = &self.nodes[x.0].value;
        let mut xhat = vec![0.0; n * m];
        let mut out = vec![0.0; n * m];
        let g = &self.nodes[gamma.0].value.data;
        let b = &self.nodes[beta.0].value.data;
        for i in 0..n {
            for j in 0..m {
                let h = (tx.data[i * m + j] - mean[j]) * inv_std[j];
                xhat[i * m + j] = h;
                out[i * m + j] = g[j] * h + b[j];
            }
        }
        let cache = BnCache { xhat, inv_std, train: mode == Mode::Train };
        self.push(
            Tensor::from_vec(&[n, m], out),
            Op::BatchNorm { x, gamma, beta, cache },
            "batch_norm",
        )
    }

    /// Sums incoming-neighbor rows: `out[v] = sum over u in N(v) of x[u]`.
    /// An empty neighbor list yields a zero row.
    pub fn neighbor_sum(
        &mut self,
        x: NodeId,
        adjacency: Rc<Vec<Vec<usize>>>,
    ) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        let (n, m) = (tx.rows(), tx.cols());
        if adjacency.len() != n {
            return Err(NnError::ShapeMismatch {
                op: "neighbor_sum",
                details: format!("adjacency has {} rows, x has {n}", adjacency.len()),
            });
        }
        let mut out = vec![0.0; n * m];
        for (v, neighbors) in adjacency.iter().enumerate() {
            for &u in neighbors {
                for j in 0..m {
                    out[v * m + j] += tx.data[u * m + j];
                }
            }
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::NeighborSum { x, adjacency }, "neighbor_sum")
    }

    /// Mean over rows, producing a `1 x m` matrix.
    pub fn mean_rows(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        let (n, m) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; m];
        for row in tx.data.chunks(m) {
            for (v, x) in out.iter_mut().zip(row) {
                *v += x;
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        self.push(Tensor::from_vec(&[1, m], out), Op::MeanRows { x }, "mean_rows")
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NnError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (n, ma, mb) = (ta.rows(), ta.cols(), tb.cols());
        if tb.rows() != n {
            return Err(NnError::ShapeMismatch {
                op: "concat_cols",
                details: format!("{:?} | {:?}", ta.shape, tb.shape),
            });
        }
        let mut out = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            out.extend_from_slice(&ta.data[i * ma..(i + 1) * ma]);
            out.extend_from_slice(&tb.data[i * mb..(i + 1) * mb]);
        }
        self.push(Tensor::from_vec(&[n, ma + mb], out), Op::ConcatCols { a, b }, "concat_cols")
    }

    /// Repeats a `1 x m` row `n` times.
    pub fn tile_rows(&mut self, x: NodeId, n: usize) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        if tx.rows() != 1 {
            return Err(NnError::ShapeMismatch {
                op: "tile_rows",
                details: format!("expected one row, got {:?}", tx.shape),
            });
        }
        let m = tx.cols();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(&tx.data);
        }
        self.push(Tensor::from_vec(&[n, m], out), Op::TileRows { x }, "tile_rows")
    }

    /// Shape-only view; gradients pass through untouched.
    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        if shape.iter().product::<usize>() != tx.len() {
            return Err(NnError::ShapeMismatch {
                op: "reshape",
                details: format!("{:?} -> {:?}", tx.shape, shape),
            });
        }
        let t = Tensor::from_vec(shape, tx.data.clone());
        self.push(t, Op::Reshape { x }, "reshape")
    }

    /// Softmax over unmasked entries; masked entries get probability 0.
    pub fn softmax_masked(&mut self, x: NodeId, mask: Rc<Vec<bool>>) -> Result<NodeId, NnError> {
        let tx = &self.nodes[x.0].value;
        if mask.len() != tx.len() {
            return Err(NnError::ShapeMismatch {
                op: "softmax_masked",
                details: format!("mask {} vs x {}", mask.len(), tx.len()),
            });
        }
        let max = tx
            .data
            .iter()
            .zip(mask.iter())
            .filter(|(_, &m)| m)
            .map(|(&v, _)| v)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(NnError::EmptyMask);
        }
        let mut out = vec![0.0; tx.len()];
        let mut total = 0.0;
        for (i, (&v, &keep)) in tx.data.iter().zip(mask.iter()).enumerate() {
            if keep {
                out[i] = (v - max).exp();
                total += out[i];
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        self.push(
            Tensor::from_vec(&[mask.len()], out),
            Op::SoftmaxMasked { x, mask },
            "softmax_masked",
        )
    }

    /// Natural log of one probability of a distribution node.
    pub fn log_prob(&mut self, dist: NodeId, index: usize) -> Result<NodeId, NnError> {
        let p = self.nodes[dist.0].value.data[index];
        self.push(Tensor::scalar(p.max(f64::MIN_POSITIVE).ln()), Op::LogProb { dist, index }, "log_prob")
    }

    /// Shannon entropy of a distribution node (zero entries contribute 0).
    pub fn entropy(&mut self, dist: NodeId) -> Result<NodeId, NnError> {
        let h = -self.nodes[dist.0]
            .value
            .data
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.ln())
            .sum::<f64>();
        self.push(Tensor::scalar(h), Op::Entropy { dist }, "entropy")
    }

    /// Reverse pass from a scalar root with seed gradient `seed`.
    /// Parameter-leaf gradients are accumulated into `store`.
    pub fn backward(&mut self, root: NodeId, seed: f64, store: &mut ParamStore) -> Result<(), NnError> {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        self.nodes[root.0].grad.data[0] = seed;
        for i in (0..=root.0).rev() {
            // take the grad out to appease the borrow checker; nodes only
            // reference strictly earlier nodes
            let grad = std::mem::replace(&mut self.nodes[i].grad, Tensor::zeros(&[0]));
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf { param } => {
                    if let Some(idx) = param {
                        store.accumulate_grad(idx, &grad);
                    }
                }
                Op::MatMul { a, b } => {
                    let (n, k) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let m = self.nodes[b.0].value.cols();
                    // dA = dC * B^T
                    let bdat = self.nodes[b.0].value.data.clone();
                    {
                        let da = &mut self.nodes[a.0].grad.data;
                        for i2 in 0..n {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += grad.data[i2 * m + j] * bdat[p * m + j];
                                }
                                da[i2 * k + p] += acc;
                            }
                        }
                    }
                    // dB = A^T * dC
                    let adat = self.nodes[a.0].value.data.clone();
                    let db = &mut self.nodes[b.0].grad.data;
                    for p in 0..k {
                        for j in 0..m {
                            let mut acc = 0.0;
                            for i2 in 0..n {
                                acc += adat[i2 * k + p] * grad.data[i2 * m + j];
                            }
                            db[p * m + j] += acc;
                        }
                    }
                }
                Op::AddBias { x, b } => {
                    let m = self.nodes[b.0].value.len();
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                    let db = &mut self.nodes[b.0].grad.data;
                    for (i2, d) in grad.data.iter().enumerate() {
                        db[i2 % m] += d;
                    }
                }
                Op::Add { a, b } => {
                    for (g, d) in self.nodes[a.0].grad.data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                }
                Op::Sub { a, b } => {
                    for (g, d) in self.nodes[a.0].grad.data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                    for (g, d) in self.nodes[b.0].grad.data.iter_mut().zip(&grad.data) {
                        *g -= d;
                    }
                }
                Op::Mul { a, b } => {
                    let bv = self.nodes[b.0].value.data.clone();
                    for ((g, d), v) in self.nodes[a.0].grad.data.iter_mut().zip(&grad.data).zip(&bv) {
                        *g += d * v;
                    }
                    let av = self.nodes[a.0].value.data.clone();
                    for ((g, d), v) in self.nodes[b.0].grad.data.iter_mut().zip(&grad.data).zip(&av) {
                        *g += d * v;
                    }
                }
                Op::Min { a, b } => {
                    let av = self.nodes[a.0].value.data.clone();
                    let bv = self.nodes[b.0].value.data.clone();
                    for (i2, d) in grad.data.iter().enumerate() {
                        if av[i2] <= bv[i2] {
                            self.nodes[a.0].grad.data[i2] += d;
                        } else {
                            self.nodes[b.0].grad.data[i2] += d;
                        }
                    }
                }
                Op::Scale { x, c } => {
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data) {
                        *g += c * d;
                    }
                }
                Op::Relu { x } => {
                    let xv = self.nodes[x.0].value.data.clone();
                    for ((g, d), v) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data).zip(&xv) {
                        if *v > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::Exp { x } => {
                    let yv = self.nodes[i].value.data.clone();
                    for ((g, d), y) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data).zip(&yv) {
                        *g += d * y;
                    }
                }
                Op::Square { x } => {
                    let xv = self.nodes[x.0].value.data.clone();
                    for ((g, d), v) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data).zip(&xv) {
                        *g += 2.0 * v * d;
                    }
                }
                Op::Neg { x } => {
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data) {
                        *g -= d;
                    }
                }
                Op::Sum { x } => {
                    let d = grad.data[0];
                    for g in self.nodes[x.0].grad.data.iter_mut() {
                        *g += d;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.nodes[x.0].value.data.clone();
                    for ((g, d), v) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data).zip(&xv) {
                        if (lo..=hi).contains(v) {
                            *g += d;
                        }
                    }
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let m = self.nodes[gamma.0].value.len();
                    let n = grad.data.len() / m;
                    let gv = self.nodes[gamma.0].value.data.clone();
                    // dgamma, dbeta
                    for i2 in 0..n {
                        for j in 0..m {
                            let d = grad.data[i2 * m + j];
                            self.nodes[gamma.0].grad.data[j] += d * cache.xhat[i2 * m + j];
                            self.nodes[beta.0].grad.data[j] += d;
                        }
                    }
                    if cache.train {
                        // full batch-statistics gradient
                        let mut sum_dxhat = vec![0.0; m];
                        let mut sum_dxhat_xhat = vec![0.0; m];
                        for i2 in 0..n {
                            for j in 0..m {
                                let dxhat = grad.data[i2 * m + j] * gv[j];
                                sum_dxhat[j] += dxhat;
                                sum_dxhat_xhat[j] += dxhat * cache.xhat[i2 * m + j];
                            }
                        }
                        let nf = n as f64;
                        for i2 in 0..n {
                            for j in 0..m {
                                let dxhat = grad.data[i2 * m + j] * gv[j];
                                let dx = (cache.inv_std[j] / nf)
                                    * (nf * dxhat
                                        - sum_dxhat[j]
                                        - cache.xhat[i2 * m + j] * sum_dxhat_xhat[j]);
                                self.nodes[x.0].grad.data[i2 * m + j] += dx;
                            }
                        }
                    } else {
                        // running stats are constants: affine transform
                        for i2 in 0..n {
                            let xrow = &mut self.nodes[x.0].grad.data[i2 * m..(i2 + 1) * m];
                            for (j, xg) in xrow.iter_mut().enumerate() {
                                *xg += grad.data[i2 * m + j] * gv[j] * cache.inv_std[j];
                            }
                        }
                    }
                }
                Op::NeighborSum { x, adjacency } => {
                    let m = self.nodes[x.0].value.cols();
                    for (v, neighbors) in adjacency.iter().enumerate() {
                        for &u in neighbors {
                            for j in 0..m {
                                self.nodes[x.0].grad.data[u * m + j] += grad.data[v * m + j];
                            }
                        }
                    }
                }
                Op::MeanRows { x } => {
                    let (n, m) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let nf = n as f64;
                    for i2 in 0..n {
                        for j in 0..m {
                            self.nodes[x.0].grad.data[i2 * m + j] += grad.data[j] / nf;
                        }
                    }
                }
                Op::ConcatCols { a, b } => {
                    let (n, ma) = (self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let mb = self.nodes[b.0].value.cols();
                    for i2 in 0..n {
                        for j in 0..ma {
                            self.nodes[a.0].grad.data[i2 * ma + j] += grad.data[i2 * (ma + mb) + j];
                        }
                        for j in 0..mb {
                            self.nodes[b.0].grad.data[i2 * mb + j] +=
                                grad.data[i2 * (ma + mb) + ma + j];
                        }
                    }
                }
                Op::TileRows { x } => {
                    let m = self.nodes[x.0].value.cols();
                    for (i2, d) in grad.data.iter().enumerate() {
                        self.nodes[x.0].grad.data[i2 % m] += d;
                    }
                }
                Op::Reshape { x } => {
                    for (g, d) in self.nodes[x.0].grad.data.iter_mut().zip(&grad.data) {
                        *g += d;
                    }
                }
                Op::SoftmaxMasked { x, mask } => {
                    let y = self.nodes[i].value.data.clone();
                    let dot: f64 = grad.data.iter().zip(&y).map(|(d, p)| d * p).sum();
                    for (i2, &keep) in mask.iter().enumerate() {
                        if keep {
                            self.nodes[x.0].grad.data[i2] += y[i2] * (grad.data[i2] - dot);
                        }
                    }
                }
                Op::LogProb { dist, index } => {
                    let p = self.nodes[dist.0].value.data[index].max(f64::MIN_POSITIVE);
                    self.nodes[dist.0].grad.data[index] += grad.data[0] / p;
                }
                Op::Entropy { dist } => {
                    let d = grad.data[0];
                    let pv = self.nodes[dist.0].value.data.clone();
                    for (g, &p) in self.nodes[dist.0].grad.data.iter_mut().zip(&pv) {
                        if p > 0.0 {
                            *g += d * (-(p.ln() + 1.0));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with(name: &str, t: Tensor) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(name, t, true);
        s
    }

    #[test]
    fn square_gradient() {
        let mut store = store_with("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let w = tape.param(&store, "w").unwrap();
        let y = tape.square(w).unwrap();
        tape.backward(y, 1.0, &mut store).unwrap();
        assert_eq!(store.grad("w").unwrap().data, vec![6.0]);
    }

    #[test]
    fn softmax_masked_basics() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2], vec![1.0, 1.0])).unwrap();
        let d = tape.softmax_masked(x, Rc::new(vec![true, true])).unwrap();
        assert_eq!(tape.value(d).data, vec![0.5, 0.5]);

        let x = tape.constant(Tensor::from_vec(&[2], vec![5.0, -2.0])).unwrap();
        let d = tape.softmax_masked(x, Rc::new(vec![false, true])).unwrap();
        assert_eq!(tape.value(d).data, vec![0.0, 1.0]);

        let x = tape.constant(Tensor::from_vec(&[2], vec![0.0, 0.0])).unwrap();
        assert!(matches!(
            tape.softmax_masked(x, Rc::new(vec![false, false])),
            Err(NnError::EmptyMask)
        ));
    }

    #[test]
    fn entropy_of_uniform() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::from_vec(&[2], vec![0.5, 0.5])).unwrap();
        let h = tape.entropy(d).unwrap();
        assert!((tape.value(h).item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn neighbor_sum_empty_list_is_zero() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]))
            .unwrap();
        let out = tape.neighbor_sum(x, Rc::new(vec![vec![], vec![0]])).unwrap();
        assert_eq!(tape.value(out).data, vec![0.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308)).unwrap();
        let y = tape.square(x);
        assert!(matches!(y, Err(NnError::NonFinite(_))));
    }

    /// Central finite differences over every parameter coordinate.
    fn finite_diff_check(
        build: impl Fn(&mut Tape, &mut ParamStore) -> NodeId,
        store: &mut ParamStore,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let root = build(&mut tape, &mut store.clone());
        tape.backward(root, 1.0, store).unwrap();
        let h = 1e-5;
        for idx in 0..store.len() {
            if !store.entries()[idx].trainable {
                continue;
            }
            let name = store.entries()[idx].name.clone();
            for k in 0..store.entries()[idx].value.len() {
                let orig = store.entries()[idx].value.data[k];
                store.entry_mut(idx).value.data[k] = orig + h;
                let mut t1 = Tape::new();
                let f1 = {
                    let r = build(&mut t1, &mut store.clone());
                    t1.value(r).item()
                };
                store.entry_mut(idx).value.data[k] = orig - h;
                let mut t2 = Tape::new();
                let f2 = {
                    let r = build(&mut t2, &mut store.clone());
                    t2.value(r).item()
                };
                store.entry_mut(idx).value.data[k] = orig;
                let numeric = (f1 - f2) / (2.0 * h);
                let analytic = store.entries()[idx].grad.data[k];
                let denom = numeric.abs().max(analytic.abs()).max(1.0);
                assert!(
                    (numeric - analytic).abs() / denom < tol,
                    "{name}[{k}]: numeric {numeric} vs analytic {analytic}"
                );
            }
        }
    }

    #[test]
    fn dense_relu_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        store.insert(
            "w",
            Tensor::from_vec(&[3, 2], (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()),
            true,
        );
        store.insert("b", Tensor::from_vec(&[2], vec![0.1, -0.2]), true);
        let x = Tensor::from_vec(&[4, 3], (0..12).map(|_| rng.random_range(-1.0..1.0)).collect());
        finite_diff_check(
            |tape, store| {
                let xn = tape.constant(x.clone()).unwrap();
                let w = tape.param(store, "w").unwrap();
                let b = tape.param(store, "b").unwrap();
                let z = tape.dense(xn, w, b).unwrap();
                let r = tape.relu(z).unwrap();
                tape.sum(r).unwrap()
            },
            &mut store,
            1e-4,
        );
    }

    #[test]
    fn batch_norm_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        store.insert(
            "x",
            Tensor::from_vec(&[5, 4], (0..20).map(|_| rng.random_range(-2.0..2.0)).collect()),
            true,
        );
        store.insert("gamma", Tensor::from_vec(&[4], vec![1.0, 0.7, 1.3, 0.5]), true);
        store.insert("beta", Tensor::from_vec(&[4], vec![0.0, 0.1, -0.1, 0.4]), true);
        store.insert("rm", Tensor::zeros(&[4]), false);
        store.insert("rv", Tensor::from_vec(&[4], vec![1.0; 4]), false);
        finite_diff_check(
            |tape, store| {
                let x = tape.param(store, "x").unwrap();
                let g = tape.param(store, "gamma").unwrap();
                let b = tape.param(store, "beta").unwrap();
                let y = tape.batch_norm(x, g, b, store, "rm", "rv", Mode::Train).unwrap();
                let sq = tape.square(y).unwrap();
                tape.sum(sq).unwrap()
            },
            &mut store,
            1e-3,
        );
    }

    #[test]
    fn softmax_log_prob_entropy_match_finite_differences() {
        let mut store = ParamStore::new();
        store.insert("logits", Tensor::from_vec(&[4], vec![0.3, -0.6, 1.2, 0.05]), true);
        let mask = Rc::new(vec![true, false, true, true]);
        finite_diff_check(
            |tape, store| {
                let x = tape.param(store, "logits").unwrap();
                let d = tape.softmax_masked(x, mask.clone()).unwrap();
                let lp = tape.log_prob(d, 2).unwrap();
                let h = tape.entropy(d).unwrap();
                let both = tape.add(lp, h).unwrap();
                tape.sum(both).unwrap()
            },
            &mut store,
            1e-4,
        );
    }

    #[test]
    fn clipped_surrogate_matches_finite_differences() {
        let mut store = ParamStore::new();
        store.insert("r", Tensor::from_vec(&[3], vec![0.6, 1.0, 1.7]), true);
        finite_diff_check(
            |tape, store| {
                let r = tape.param(store, "r").unwrap();
                let adv = tape.constant(Tensor::from_vec(&[3], vec![1.5, -2.0, 0.5])).unwrap();
                let unclipped = tape.mul(r, adv).unwrap();
                let clipped_r = tape.clamp(r, 0.8, 1.2).unwrap();
                let clipped = tape.mul(clipped_r, adv).unwrap();
                let m = tape.min(unclipped, clipped).unwrap();
                tape.sum(m).unwrap()
            },
            &mut store,
            1e-4,
        );
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[3, 3], (0..9).map(|_| rng.random_range(-1.0..1.0)).collect());
        let run = || {
            let mut store = store_with("w", Tensor::from_vec(&[3, 1], vec![0.2, -0.4, 0.9]));
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone()).unwrap();
            let w = tape.param(&store, "w").unwrap();
            let y = tape.matmul(xn, w).unwrap();
            let s = tape.sum(y).unwrap();
            tape.backward(s, 1.0, &mut store).unwrap();
            (tape.value(s).item(), store.grad("w").unwrap().data.clone())
        };
        assert_eq!(run(), run());
    }
}
