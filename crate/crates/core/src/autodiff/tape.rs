use super::tensor::{
    gelu, gelu_grad, log_softmax_rows, matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc,
    normalize_rows, softmax_rows, transpose, Scalar, Tensor,
};
use crate::error::{Error, Result};

/// Additive score applied to attention logits of padded keys.
const MASKED_SCORE: f64 = -1e9;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }

    #[cfg(test)]
    pub(crate) fn from_index(i: usize) -> Var {
        Var(i)
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op<T> {
    /// Input tensor. `param_offset` places its adjoint in the flat gradient.
    Leaf { param_offset: Option<usize> },
    MatMul { a: Var, b: Var },
    /// `[n,m,k] x [n,k,p]`, or `[n,m,k] x [n,p,k]^T` when `transpose_b`.
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { a: Var, bias: Var },
    Scale { a: Var, factor: T },
    Tanh { a: Var },
    Gelu { a: Var },
    Softmax { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var },
    GatherRows { table: Var, rows: Vec<usize> },
    SplitHeads { a: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { a: Var, batch: usize, seq: usize, heads: usize },
    /// Adds a large negative score to attention logits whose key is padding.
    MaskKeys { a: Var, key_valid: Vec<bool>, heads: usize },
    MeanPoolValid { a: Var, valid: Vec<bool>, seq: usize },
    CrossEntropy { logits: Var, labels: Vec<usize> },
    SoftCrossEntropy { logits: Var, target: Vec<T> },
    Sum { a: Var },
}

impl<T> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::AddBias { .. } => "add_bias",
            Op::Scale { .. } => "scale",
            Op::Tanh { .. } => "tanh",
            Op::Gelu { .. } => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::GatherRows { .. } => "gather_rows",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::MaskKeys { .. } => "mask_keys",
            Op::MeanPoolValid { .. } => "mean_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::SoftCrossEntropy { .. } => "soft_cross_entropy",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    /// Forward by-products reused by the adjoint (normalized rows,
    /// probabilities).
    cache: Vec<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, which is a topological order: every
/// operation refers only to nodes recorded before it.
#[derive(Debug, Clone, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints of every node after a reverse sweep.
#[derive(Debug, Clone)]
pub struct Adjoints<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adjoints<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Scalar> Tape<T> {
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

    /// Non-differentiated input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, None)
    }

    /// Differentiated input whose adjoint lands at `offset` in the flat
    /// parameter gradient.
    pub fn param(&mut self, t: Tensor<T>, offset: usize) -> Var {
        self.push_leaf(t, Some(offset))
    }

    fn push_leaf(&mut self, value: Tensor<T>, param_offset: Option<usize>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf { param_offset },
            value,
            cache: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op<T>) -> Result<Var> {
        let index = self.nodes.len();
        let (value, cache) = evaluate(&op, &self.nodes)?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                index,
                op: op.name(),
            });
        }
        self.nodes.push(Node { op, value, cache });
        Ok(Var(index))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul { a, b })
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        self.record(Op::BatchMatMul { a, b, transpose_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul { a, b })
    }

    /// Broadcast-add of a `[n]` bias over the rows of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        self.record(Op::AddBias { a, bias })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.record(Op::Scale { a, factor })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Tanh { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Gelu { a })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Softmax { a })
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.record(Op::LayerNorm { x, gain, bias })
    }

    /// Embedding lookup / row selection: output row `i` is `table[rows[i]]`.
    pub fn gather_rows(&mut self, table: Var, rows: Vec<usize>) -> Result<Var> {
        self.record(Op::GatherRows { table, rows })
    }

    /// `[batch*seq, heads*dh]` -> `[batch*heads, seq, dh]`
    pub fn split_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.record(Op::SplitHeads { a, batch, seq, heads })
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, a: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        self.record(Op::MergeHeads { a, batch, seq, heads })
    }

    /// `a` is `[batch*heads, seq, seq]` attention logits, `key_valid` is
    /// `[batch, seq]`.
    pub fn mask_keys(&mut self, a: Var, key_valid: Vec<bool>, heads: usize) -> Result<Var> {
        self.record(Op::MaskKeys { a, key_valid, heads })
    }

    /// Mean over the valid positions of each sequence: `[batch*seq, d]` ->
    /// `[batch, d]`.
    pub fn mean_pool_valid(&mut self, a: Var, valid: Vec<bool>, seq: usize) -> Result<Var> {
        self.record(Op::MeanPoolValid { a, valid, seq })
    }

    /// Mean cross-entropy of `logits` rows against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.record(Op::CrossEntropy { logits, labels })
    }

    /// Mean over rows of `-sum_v target_v * log softmax(logits)_v`.
    pub fn soft_cross_entropy(&mut self, logits: Var, target: Vec<T>) -> Result<Var> {
        self.record(Op::SoftCrossEntropy { logits, target })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.record(Op::Sum { a })
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<T>>> {
        let mut replayed: Vec<Node<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, cache) = match node.op {
                Op::Leaf { .. } => (node.value.clone(), Vec::new()),
                ref op => evaluate(op, &replayed)?,
            };
            replayed.push(Node {
                op: node.op.clone(),
                value,
                cache,
            });
        }
        Ok(replayed.into_iter().map(|n| n.value).collect())
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Adjoints<T>> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::NotScalar(root_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for index in (0..=root.0).rev() {
            let Some(g) = grads[index].take() else {
                continue;
            };
            propagate(&self.nodes, index, &g, &mut grads);
            grads[index] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Adjoints { grads })
    }

    /// Reverse sweep returning the gradient scattered into a flat vector of
    /// `len` parameters.
    pub fn gradient(&self, root: Var, len: usize) -> Result<Vec<T>> {
        let adjoints = self.backward(root)?;
        let mut flat = vec![T::zero(); len];
        for (node, g) in self.nodes.iter().zip(&adjoints.grads) {
            if let (Op::Leaf { param_offset: Some(offset) }, Some(g)) = (&node.op, g) {
                let end = offset + g.len();
                if end > len {
                    return Err(Error::LengthMismatch {
                        what: "parameter slot outside gradient",
                        left: end,
                        right: len,
                    });
                }
                for (dst, &src) in flat[*offset..end].iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
        }
        Ok(flat)
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

fn evaluate<T: Scalar>(op: &Op<T>, nodes: &[Node<T>]) -> Result<(Tensor<T>, Vec<T>)> {
    let val = |v: &Var| &nodes[v.0].value;
    let out = match op {
        Op::Leaf { .. } => unreachable!("leaves are never re-evaluated"),
        Op::MatMul { a, b } => {
            let (a, b) = (val(a), val(b));
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(shape_err("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul(a.data(), b.data(), m, k, n))?
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let (a, b) = (val(a), val(b));
            let (sa, sb) = (a.shape(), b.shape());
            let ok = sa.len() == 3
                && sb.len() == 3
                && sa[0] == sb[0]
                && if *transpose_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
            if !ok {
                return Err(shape_err("batch_matmul", sa, sb));
            }
            let (nb, m, k) = (sa[0], sa[1], sa[2]);
            let n = if *transpose_b { sb[1] } else { sb[2] };
            let mut c = vec![T::zero(); nb * m * n];
            for i in 0..nb {
                let ab = &a.data()[i * m * k..(i + 1) * m * k];
                let bb = &b.data()[i * k * n..(i + 1) * k * n];
                let cb = &mut c[i * m * n..(i + 1) * m * n];
                if *transpose_b {
                    let bt = transpose(bb, n, k);
                    matmul_acc(ab, &bt, cb, m, k, n);
                } else {
                    matmul_acc(ab, bb, cb, m, k, n);
                }
            }
            Tensor::new(vec![nb, m, n], c)?
        }
        Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => {
            let (a, b) = (val(a), val(b));
            if a.shape() != b.shape() {
                return Err(shape_err(op.name(), a.shape(), b.shape()));
            }
            let f: fn(T, T) -> T = match op {
                Op::Add { .. } => |x, y| x + y,
                Op::Sub { .. } => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::AddBias { a, bias } => {
            let (a, bias) = (val(a), val(bias));
            if bias.shape().len() != 1 || bias.len() != a.cols() {
                return Err(shape_err("add_bias", a.shape(), bias.shape()));
            }
            let mut data = a.data().to_vec();
            for row in data.chunks_mut(bias.len()) {
                for (x, &b) in row.iter_mut().zip(bias.data()) {
                    *x += b;
                }
            }
            Tensor::new(a.shape().to_vec(), data)?
        }
        Op::Scale { a, factor } => {
            let a = val(a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| x * *factor).collect())?
        }
        Op::Tanh { a } => {
            let a = val(a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|x| x.tanh()).collect())?
        }
        Op::Gelu { a } => {
            let a = val(a);
            Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| gelu(x)).collect())?
        }
        Op::Softmax { a } => {
            let a = val(a);
            Tensor::new(a.shape().to_vec(), softmax_rows(a.data(), a.cols()))?
        }
        Op::LayerNorm { x, gain, bias } => {
            let (x, gain, bias) = (val(x), val(gain), val(bias));
            let d = x.cols();
            if gain.len() != d || bias.len() != d {
                return Err(shape_err("layer_norm", x.shape(), gain.shape()));
            }
            let (xhat, inv_std) = normalize_rows(x.data(), d);
            let mut out = xhat.clone();
            for row in out.chunks_mut(d) {
                for ((o, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
                    *o = *o * g + b;
                }
            }
            let mut cache = xhat;
            cache.extend(inv_std);
            return Ok((Tensor::new(x.shape().to_vec(), out)?, cache));
        }
        Op::GatherRows { table, rows } => {
            let t = val(table);
            if t.shape().len() != 2 || rows.is_empty() {
                return Err(shape_err("gather_rows", t.shape(), &[rows.len()]));
            }
            let d = t.cols();
            let mut data = Vec::with_capacity(rows.len() * d);
            for &r in rows {
                if r >= t.shape()[0] {
                    return Err(shape_err("gather_rows", t.shape(), &[r]));
                }
                data.extend_from_slice(&t.data()[r * d..(r + 1) * d]);
            }
            Tensor::new(vec![rows.len(), d], data)?
        }
        Op::SplitHeads { a, batch, seq, heads } => {
            let a = val(a);
            let (b, l, h) = (*batch, *seq, *heads);
            if a.shape().len() != 2 || a.shape()[0] != b * l || a.cols() % h != 0 {
                return Err(shape_err("split_heads", a.shape(), &[b, l, h]));
            }
            let d = a.cols();
            let dh = d / h;
            let mut data = vec![T::zero(); a.len()];
            for bi in 0..b {
                for t in 0..l {
                    for hi in 0..h {
                        let src = &a.data()[(bi * l + t) * d + hi * dh..][..dh];
                        data[((bi * h + hi) * l + t) * dh..][..dh].copy_from_slice(src);
                    }
                }
            }
            Tensor::new(vec![b * h, l, dh], data)?
        }
        Op::MergeHeads { a, batch, seq, heads } => {
            let a = val(a);
            let (b, l, h) = (*batch, *seq, *heads);
            if a.shape().len() != 3 || a.shape()[0] != b * h || a.shape()[1] != l {
                return Err(shape_err("merge_heads", a.shape(), &[b, l, h]));
            }
            let dh = a.shape()[2];
            let d = dh * h;
            let mut data = vec![T::zero(); a.len()];
            for bi in 0..b {
                for t in 0..l {
                    for hi in 0..h {
                        let src = &a.data()[((bi * h + hi) * l + t) * dh..][..dh];
                        data[(bi * l + t) * d + hi * dh..][..dh].copy_from_slice(src);
                    }
                }
            }
            Tensor::new(vec![b * l, d], data)?
        }
        Op::MaskKeys { a, key_valid, heads } => {
            let a = val(a);
            let s = a.shape();
            if s.len() != 3 || s[1] != s[2] || key_valid.len() * heads != s[0] * s[2] {
                return Err(shape_err("mask_keys", s, &[key_valid.len(), *heads]));
            }
            let l = s[2];
            let masked = T::of(MASKED_SCORE);
            let mut data = a.data().to_vec();
            for (bh, block) in data.chunks_mut(l * l).enumerate() {
                let valid = &key_valid[(bh / heads) * l..][..l];
                for row in block.chunks_mut(l) {
                    for (x, &ok) in row.iter_mut().zip(valid) {
                        if !ok {
                            *x += masked;
                        }
                    }
                }
            }
            Tensor::new(s.to_vec(), data)?
        }
        Op::MeanPoolValid { a, valid, seq } => {
            let a = val(a);
            if a.shape().len() != 2 || valid.len() != a.rows() || a.rows() % seq != 0 {
                return Err(shape_err("mean_pool", a.shape(), &[valid.len(), *seq]));
            }
            let d = a.cols();
            let b = a.rows() / seq;
            let mut data = vec![T::zero(); b * d];
            for bi in 0..b {
                let count = valid[bi * seq..(bi + 1) * seq].iter().filter(|&&v| v).count();
                if count == 0 {
                    return Err(Error::AllPadRow(bi));
                }
                let out = &mut data[bi * d..(bi + 1) * d];
                for t in 0..*seq {
                    if valid[bi * seq + t] {
                        let row = &a.data()[(bi * seq + t) * d..][..d];
                        for (o, &x) in out.iter_mut().zip(row) {
                            *o += x;
                        }
                    }
                }
                let inv = T::one() / T::of(count as f64);
                for o in out.iter_mut() {
                    *o *= inv;
                }
            }
            Tensor::new(vec![b, d], data)?
        }
        Op::CrossEntropy { logits, labels } => {
            let z = val(logits);
            let v = z.cols();
            if z.shape().len() != 2 || labels.len() != z.rows() || labels.iter().any(|&y| y >= v) {
                return Err(shape_err("cross_entropy", z.shape(), &[labels.len()]));
            }
            let logp = log_softmax_rows(z.data(), v);
            let total: T = labels
                .iter()
                .enumerate()
                .map(|(i, &y)| -logp[i * v + y])
                .sum();
            let probs = logp.iter().map(|x| x.exp()).collect();
            return Ok((Tensor::scalar(total / T::of(labels.len() as f64)), probs));
        }
        Op::SoftCrossEntropy { logits, target } => {
            let z = val(logits);
            if z.shape().len() != 2 || target.len() != z.len() {
                return Err(shape_err("soft_cross_entropy", z.shape(), &[target.len()]));
            }
            let logp = log_softmax_rows(z.data(), z.cols());
            let total: T = logp.iter().zip(target).map(|(&l, &q)| -(q * l)).sum();
            let probs = logp.iter().map(|x| x.exp()).collect();
            return Ok((Tensor::scalar(total / T::of(z.rows() as f64)), probs));
        }
        Op::Sum { a } => Tensor::scalar(val(a).data().iter().copied().sum()),
    };
    Ok((out, Vec::new()))
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, shape: &[usize], delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (x, d) in g.data_mut().iter_mut().zip(delta) {
                *x += d;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), delta).expect("adjoint shape"));
        }
    }
}

fn propagate<T: Scalar>(nodes: &[Node<T>], index: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let node = &nodes[index];
    let val = |v: &Var| &nodes[v.0].value;
    let gd = g.data();
    match &node.op {
        Op::Leaf { .. } => {}
        Op::MatMul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            let mut ga = vec![T::zero(); m * k];
            matmul_nt_acc(gd, bv.data(), &mut ga, m, k, n);
            let mut gb = vec![T::zero(); k * n];
            matmul_tn_acc(av.data(), gd, &mut gb, m, k, n);
            accumulate(grads, *a, av.shape(), ga);
            accumulate(grads, *b, bv.shape(), gb);
        }
        Op::BatchMatMul { a, b, transpose_b } => {
            let (av, bv) = (val(a), val(b));
            let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let n = node.value.shape()[2];
            let mut ga = vec![T::zero(); av.len()];
            let mut gb = vec![T::zero(); bv.len()];
            for i in 0..nb {
                let ab = &av.data()[i * m * k..(i + 1) * m * k];
                let bb = &bv.data()[i * k * n..(i + 1) * k * n];
                let gi = &gd[i * m * n..(i + 1) * m * n];
                let ga_i = &mut ga[i * m * k..(i + 1) * m * k];
                let gb_i = &mut gb[i * k * n..(i + 1) * k * n];
                if *transpose_b {
                    // c = a b^T with b: [n,k]; dA = g b, dB = g^T a
                    matmul_acc(gi, bb, ga_i, m, n, k);
                    matmul_tn_acc(gi, ab, gb_i, m, n, k);
                } else {
                    matmul_nt_acc(gi, bb, ga_i, m, k, n);
                    matmul_tn_acc(ab, gi, gb_i, m, k, n);
                }
            }
            accumulate(grads, *a, av.shape(), ga);
            accumulate(grads, *b, bv.shape(), gb);
        }
        Op::Add { a, b } => {
            accumulate(grads, *a, g.shape(), gd.to_vec());
            accumulate(grads, *b, g.shape(), gd.to_vec());
        }
        Op::Sub { a, b } => {
            accumulate(grads, *a, g.shape(), gd.to_vec());
            accumulate(grads, *b, g.shape(), gd.iter().map(|&x| -x).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            let ga = gd.iter().zip(bv.data()).map(|(&g, &y)| g * y).collect();
            let gb = gd.iter().zip(av.data()).map(|(&g, &x)| g * x).collect();
            accumulate(grads, *a, g.shape(), ga);
            accumulate(grads, *b, g.shape(), gb);
        }
        Op::AddBias { a, bias } => {
            let n = val(bias).len();
            let mut gb = vec![T::zero(); n];
            for row in gd.chunks(n) {
                for (acc, &x) in gb.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            accumulate(grads, *a, g.shape(), gd.to_vec());
            accumulate(grads, *bias, &[n], gb);
        }
        Op::Scale { a, factor } => {
            accumulate(grads, *a, g.shape(), gd.iter().map(|&x| x * *factor).collect());
        }
        Op::Tanh { a } => {
            let y = node.value.data();
            let ga = gd.iter().zip(y).map(|(&g, &y)| g * (T::one() - y * y)).collect();
            accumulate(grads, *a, g.shape(), ga);
        }
        Op::Gelu { a } => {
            let x = val(a).data();
            let ga = gd.iter().zip(x).map(|(&g, &x)| g * gelu_grad(x)).collect();
            accumulate(grads, *a, g.shape(), ga);
        }
        Op::Softmax { a } => {
            let y = node.value.data();
            let cols = node.value.cols();
            let mut ga = vec![T::zero(); y.len()];
            for ((yr, gr), out) in y.chunks(cols).zip(gd.chunks(cols)).zip(ga.chunks_mut(cols)) {
                let dot: T = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum();
                for ((o, &y), &g) in out.iter_mut().zip(yr).zip(gr) {
                    *o = y * (g - dot);
                }
            }
            accumulate(grads, *a, g.shape(), ga);
        }
        Op::LayerNorm { x, gain, bias } => {
            let xv = val(x);
            let d = xv.cols();
            let rows = xv.rows();
            let (xhat, inv_std) = node.cache.split_at(rows * d);
            let gain_v = val(gain).data();
            let mut gx = vec![T::zero(); xv.len()];
            let mut ggain = vec![T::zero(); d];
            let mut gbias = vec![T::zero(); d];
            let n = T::of(d as f64);
            let mut dxhat = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &gd[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    ggain[j] += gr[j] * xr[j];
                    gbias[j] += gr[j];
                    dxhat[j] = gr[j] * gain_v[j];
                }
                let sum_d: T = dxhat.iter().copied().sum();
                let sum_dx: T = dxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum();
                let scale = inv_std[r] / n;
                for j in 0..d {
                    gx[r * d + j] = scale * (n * dxhat[j] - sum_d - xr[j] * sum_dx);
                }
            }
            accumulate(grads, *x, xv.shape(), gx);
            accumulate(grads, *gain, &[d], ggain);
            accumulate(grads, *bias, &[d], gbias);
        }
        Op::GatherRows { table, rows } => {
            let t = val(table);
            let d = t.cols();
            let mut gt = vec![T::zero(); t.len()];
            for (i, &r) in rows.iter().enumerate() {
                for (dst, &src) in gt[r * d..(r + 1) * d].iter_mut().zip(&gd[i * d..(i + 1) * d]) {
                    *dst += src;
                }
            }
            accumulate(grads, *table, t.shape(), gt);
        }
        Op::SplitHeads { a, batch, seq, heads } => {
            let av = val(a);
            let (b, l, h) = (*batch, *seq, *heads);
            let d = av.cols();
            let dh = d / h;
            let mut ga = vec![T::zero(); av.len()];
            for bi in 0..b {
                for t in 0..l {
                    for hi in 0..h {
                        let src = &gd[((bi * h + hi) * l + t) * dh..][..dh];
                        ga[(bi * l + t) * d + hi * dh..][..dh].copy_from_slice(src);
                    }
                }
            }
            accumulate(grads, *a, av.shape(), ga);
        }
        Op::MergeHeads { a, batch, seq, heads } => {
            let av = val(a);
            let (b, l, h) = (*batch, *seq, *heads);
            let dh = av.shape()[2];
            let d = dh * h;
            let mut ga = vec![T::zero(); av.len()];
            for bi in 0..b {
                for t in 0..l {
                    for hi in 0..h {
                        let src = &gd[(bi * l + t) * d + hi * dh..][..dh];
                        ga[((bi * h + hi) * l + t) * dh..][..dh].copy_from_slice(src);
                    }
                }
            }
            accumulate(grads, *a, av.shape(), ga);
        }
        Op::MaskKeys { a, .. } => {
            accumulate(grads, *a, g.shape(), gd.to_vec());
        }
        Op::MeanPoolValid { a, valid, seq } => {
            let av = val(a);
            let d = av.cols();
            let mut ga = vec![T::zero(); av.len()];
            for bi in 0..av.rows() / seq {
                let count = valid[bi * seq..(bi + 1) * seq].iter().filter(|&&v| v).count();
                let inv = T::one() / T::of(count as f64);
                for t in 0..*seq {
                    if valid[bi * seq + t] {
                        for j in 0..d {
                            ga[(bi * seq + t) * d + j] = gd[bi * d + j] * inv;
                        }
                    }
                }
            }
            accumulate(grads, *a, av.shape(), ga);
        }
        Op::CrossEntropy { logits, labels } => {
            let z = val(logits);
            let v = z.cols();
            let scale = gd[0] / T::of(labels.len() as f64);
            let mut gz: Vec<T> = node.cache.iter().map(|&p| p * scale).collect();
            for (i, &y) in labels.iter().enumerate() {
                gz[i * v + y] -= scale;
            }
            accumulate(grads, *logits, z.shape(), gz);
        }
        Op::SoftCrossEntropy { logits, target } => {
            let z = val(logits);
            let v = z.cols();
            let scale = gd[0] / T::of(z.rows() as f64);
            let mut gz = vec![T::zero(); z.len()];
            for r in 0..z.rows() {
                let q = &target[r * v..(r + 1) * v];
                let mass: T = q.iter().copied().sum();
                for j in 0..v {
                    gz[r * v + j] = (node.cache[r * v + j] * mass - q[j]) * scale;
                }
            }
            accumulate(grads, *logits, z.shape(), gz);
        }
        Op::Sum { a } => {
            let av = val(a);
            accumulate(grads, *a, av.shape(), vec![gd[0]; av.len()]);
        }
    }
}
