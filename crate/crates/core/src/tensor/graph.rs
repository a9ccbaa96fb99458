use std::borrow::Cow;

use rand::Rng;

use super::{softmax_in_place, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    LinComb(Vec<(Var, T)>),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gather { table: Var, ids: Vec<usize> },
    GatherMean { table: Var, groups: Vec<Vec<usize>> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows { x: Var, rows: Vec<usize> },
    NormalizeSum(Var),
    Clamp { x: Var, lo: T, hi: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
    Bce { q: Var, labels: Vec<T> },
    Sum(Var),
    Dropout { x: Var, mask: Vec<T> },
}

struct Node<'p, T: Real> {
    value: Cow<'p, Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation tape.
///
/// Nodes are created in topological order, so the tape is acyclic by
/// construction and backward is a single reverse sweep. Parameter leaves
/// borrow their tensors from the parameter slice the graph was created with.
pub struct Graph<'p, T: Real> {
    nodes: Vec<Node<'p, T>>,
    params: &'p [Tensor<T>],
    param_vars: Vec<Option<Var>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    param_nodes: Vec<Option<Var>>,
    param_shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for parameter `i`; zeros when the loss does not reach it.
    pub fn param(&self, i: usize) -> Tensor<T> {
        self.param_nodes[i]
            .and_then(|v| self.grads[v.0].clone())
            .unwrap_or_else(|| Tensor::zeros(&self.param_shapes[i]))
    }

    /// Gradients for every parameter, in parameter order.
    pub fn into_params(mut self) -> Vec<Tensor<T>> {
        (0..self.param_nodes.len())
            .map(|i| {
                self.param_nodes[i]
                    .and_then(|v| self.grads[v.0].take())
                    .unwrap_or_else(|| Tensor::zeros(&self.param_shapes[i]))
            })
            .collect()
    }
}

#[derive(Clone, Copy)]
struct View<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a, T: Real> View<'a, T> {
    fn of(t: &'a Tensor<T>) -> Self {
        View {
            data: t.data(),
            rows: t.rows(),
            cols: t.cols(),
            rs: t.cols() as isize,
            cs: 1,
        }
    }

    fn raw(data: &'a [T], rows: usize, cols: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn maybe_t(self, flag: bool) -> Self {
        if flag {
            self.t()
        } else {
            self
        }
    }
}

/// `c = beta * c + a * b` with `c` row-major `a.rows x b.cols`.
fn gemm<T: Real>(a: View<T>, b: View<T>, beta: T, c: &mut [T]) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(c.len(), a.rows * b.cols);
    T::gemm(
        a.rows,
        a.cols,
        b.cols,
        a.data,
        a.rs,
        a.cs,
        b.data,
        b.rs,
        b.cs,
        beta,
        c,
        b.cols as isize,
        1,
    );
}

impl<T: Real> Default for Graph<'static, T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Real> Graph<'static, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: &[],
            param_vars: Vec::new(),
        }
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn with_params(params: &'p [Tensor<T>]) -> Self {
        Graph {
            nodes: Vec::with_capacity(1024),
            params,
            param_vars: vec![None; params.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created after the first `len`; their handles become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        for slot in &mut self.param_vars {
            if matches!(slot, Some(v) if v.0 >= len) {
                *slot = None;
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Cow<'p, Tensor<T>>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_owned(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(name, Cow::Owned(value), op, needs)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("variable", Cow::Owned(t), Op::Leaf, true)
    }

    /// Leaf for parameter `i`, created on first use.
    pub fn param(&mut self, i: usize) -> Result<Var> {
        if let Some(v) = self.param_vars.get(i).copied().flatten() {
            return Ok(v);
        }
        let t = self
            .params
            .get(i)
            .ok_or_else(|| Error::invalid(format!("parameter {i} out of range")))?;
        let v = self.push("param", Cow::Borrowed(t), Op::Param, true)?;
        self.param_vars[i] = Some(v);
        Ok(v)
    }

    fn mm_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<(usize, usize, usize)> {
        let (ar, ac) = (self.rows(a), self.cols(a));
        let (br, bc) = (self.rows(b), self.cols(b));
        let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k1 != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?}{} x {:?}{}", self.shape(a), if ta { "^T" } else { "" }, self.shape(b), if tb { "^T" } else { "" }),
            ));
        }
        Ok((m, k1, n))
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_ex(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (m, _, n) = self.mm_dims(a, b, ta, tb)?;
        let mut out = vec![T::zero(); m * n];
        {
            let av = View::of(self.value(a)).maybe_t(ta);
            let bv = View::of(self.value(b)).maybe_t(tb);
            gemm(av, bv, T::zero(), &mut out);
        }
        self.push_owned("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, false)
    }

    /// `a * b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false, true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        self.push_owned("add", out, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`cols` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.cols(a);
        if self.value(bias).len() != c {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(bias))));
        }
        let mut out = self.value(a).clone();
        if c > 0 {
            let b = self.value(bias).data();
            for row in out.data_mut().chunks_mut(c) {
                for (o, &x) in row.iter_mut().zip(b) {
                    *o += x;
                }
            }
        }
        self.push_owned("add_row", out, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, &x) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        self.push_owned("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.lincomb(&[(a, c)])
    }

    /// `sum_i c_i * v_i` over same-shaped inputs.
    pub fn lincomb(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let (first, _) = *terms.first().ok_or_else(|| Error::invalid("lincomb of no terms"))?;
        let mut out = Tensor::zeros(self.shape(first));
        for &(v, c) in terms {
            self.same_shape("lincomb", first, v)?;
            for (o, &x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push_owned("lincomb", out, Op::LinComb(terms.to_vec()), &inputs)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
        self.push_owned("relu", out, Op::Relu(a), &[a])
    }

    /// Row-wise softmax. With `causal`, the matrix must be square and
    /// entry `(i, j)` is excluded (probability 0) for `j > i`.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Result<Var> {
        let (r, c) = (self.rows(a), self.cols(a));
        if causal && r != c {
            return Err(Error::shape("softmax", format!("causal mask needs a square matrix, got {r}x{c}")));
        }
        let mut out = self.value(a).clone();
        if c > 0 {
            for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
                if causal {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(T::zero());
                } else {
                    softmax_in_place(row);
                }
            }
        }
        self.push_owned("softmax", out, Op::Softmax(a), &[a])
    }

    /// Row-wise layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let c = self.cols(x);
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape("layer_norm", format!("{:?} with gain {:?}", self.shape(x), self.shape(gain))));
        }
        let r = self.rows(x);
        let eps = T::c(eps);
        let n = T::c(c as f64);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        {
            let xv = self.value(x).data();
            let g = self.value(gain).data();
            let b = self.value(bias).data();
            for i in 0..r {
                let row = &xv[i * c..(i + 1) * c];
                let mean = row.iter().copied().sum::<T>() / n;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
                let is = T::one() / (var + eps).sqrt();
                inv_std[i] = is;
                for j in 0..c {
                    let h = (row[j] - mean) * is;
                    xhat[i * c + j] = h;
                    out[i * c + j] = h * g[j] + b[j];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.push_owned(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        )
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = (self.rows(table), self.cols(table));
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(Error::shape("gather", format!("id {id} outside table of {r} rows")));
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        self.push_owned(
            "gather",
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Gather { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// One output row per group: the mean of the table rows it names.
    pub fn gather_mean(&mut self, table: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (r, c) = (self.rows(table), self.cols(table));
        let mut out = vec![T::zero(); groups.len() * c];
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                return Err(Error::invalid("gather_mean over an empty group"));
            }
            let w = T::one() / T::c(group.len() as f64);
            let dst = &mut out[gi * c..(gi + 1) * c];
            for &id in group {
                if id >= r {
                    return Err(Error::shape("gather_mean", format!("id {id} outside table of {r} rows")));
                }
                for (o, &x) in dst.iter_mut().zip(self.value(table).row(id)) {
                    *o += x;
                }
            }
            for o in dst.iter_mut() {
                *o *= w;
            }
        }
        self.push_owned(
            "gather_mean",
            Tensor::new(vec![groups.len(), c], out)?,
            Op::GatherMean { table, groups: groups.to_vec() },
            &[table],
        )
    }

    /// Stacks matrices with equal column counts. Zero-row parts are allowed.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.cols(p)).ok_or_else(|| Error::invalid("concat of nothing"))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != c || self.shape(p).len() != 2 {
                return Err(Error::shape("concat_rows", format!("{:?} with {c} columns", self.shape(p))));
            }
            rows += self.rows(p);
            out.extend_from_slice(self.value(p).data());
        }
        self.push_owned("concat_rows", Tensor::new(vec![rows, c], out)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.rows(p)).ok_or_else(|| Error::invalid("concat of nothing"))?;
        if parts.iter().any(|&p| self.rows(p) != r) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.cols(p)).sum();
        let mut out = vec![T::zero(); r * total];
        let mut off = 0;
        for &p in parts {
            let c = self.cols(p);
            for i in 0..r {
                out[i * total + off..i * total + off + c].copy_from_slice(self.value(p).row(i));
            }
            off += c;
        }
        self.push_owned("concat_cols", Tensor::new(vec![r, total], out)?, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("{start}..{} of {c} columns", start + len)));
        }
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&self.value(x).row(i)[start..start + len]);
        }
        self.push_owned("slice_cols", Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, &[x])
    }

    /// `1 x cols` mean over the listed rows.
    pub fn mean_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = (self.rows(x), self.cols(x));
        if rows.is_empty() || rows.iter().any(|&i| i >= r) {
            return Err(Error::shape("mean_rows", format!("rows {rows:?} of {r}")));
        }
        let w = T::one() / T::c(rows.len() as f64);
        let mut out = vec![T::zero(); c];
        for &i in rows {
            for (o, &v) in out.iter_mut().zip(self.value(x).row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o *= w;
        }
        self.push_owned("mean_rows", Tensor::new(vec![1, c], out)?, Op::MeanRows { x, rows: rows.to_vec() }, &[x])
    }

    /// Divides every element by the total sum.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.value(x).data().iter().copied().sum();
        if s <= T::zero() {
            return Err(Error::invalid("normalize_sum of a non-positive total"));
        }
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = *v / s;
        }
        self.push_owned("normalize_sum", out, Op::NormalizeSum(x), &[x])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Result<Var> {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            *v = v.max(lo).min(hi);
        }
        self.push_owned("clamp", out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax
    /// of `logits`, over unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (r, c) = (self.rows(logits), self.cols(logits));
        if targets.len() != r || mask.len() != r {
            return Err(Error::shape(
                "cross_entropy",
                format!("{r} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy with every position masked"));
        }
        if let Some(&bad) = targets.iter().zip(mask).filter(|(_, &m)| m).map(|(t, _)| t).find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target id {bad} outside vocabulary of {c}")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut nll = T::zero();
        for (i, row) in probs.chunks_mut(c).enumerate() {
            softmax_in_place(row);
            if mask[i] {
                // log-softmax computed directly to avoid log(0) on confident rows
                let lr = self.value(logits).row(i);
                let max = lr.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = lr.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
                nll += lse - lr[targets[i]];
            }
        }
        let loss = nll / T::c(count as f64);
        self.push_owned(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), probs, count },
            &[logits],
        )
    }

    /// Mean binary cross-entropy of probabilities `q` against 0/1 labels.
    pub fn bce(&mut self, q: Var, labels: &[bool]) -> Result<Var> {
        let n = self.value(q).len();
        if labels.len() != n || n == 0 {
            return Err(Error::shape("bce", format!("{n} probabilities, {} labels", labels.len())));
        }
        let qv = self.value(q).data();
        if qv.iter().any(|&p| !(p > T::zero() && p < T::one())) {
            return Err(Error::invalid("bce probabilities must lie strictly inside (0, 1)"));
        }
        let labels: Vec<T> = labels.iter().map(|&y| if y { T::one() } else { T::zero() }).collect();
        let mut total = T::zero();
        for (&p, &y) in qv.iter().zip(&labels) {
            total += -(y * p.ln() + (T::one() - y) * (T::one() - p).ln());
        }
        let loss = total / T::c(n as f64);
        self.push_owned("bce", Tensor::scalar(loss), Op::Bce { q, labels }, &[q])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.push_owned("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Inverted dropout; identity when `rate` is zero.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        if rate >= 1.0 {
            return Err(Error::invalid(format!("dropout rate {rate} must be below 1")));
        }
        let keep = T::c(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut out = self.value(x).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.push_owned("dropout", out, Op::Dropout { x, mask }, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got {:?}", self.shape(loss))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        Ok(Gradients {
            grads,
            param_nodes: self.param_vars.clone(),
            param_shapes: self.params.iter().map(|p| p.shape().to_vec()).collect(),
        })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop(&self, node: &Node<'p, T>, gout: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let g = gout.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul { a, b, ta, tb } => {
                let av = View::of(self.value(a)).maybe_t(ta);
                let bv = View::of(self.value(b)).maybe_t(tb);
                let gv = View::raw(g, av.rows, bv.cols);
                if let Some(ga) = self.acc(grads, a) {
                    if ta {
                        gemm(bv, gv.t(), T::one(), ga);
                    } else {
                        gemm(gv, bv.t(), T::one(), ga);
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    if tb {
                        gemm(gv.t(), av, T::one(), gb);
                    } else {
                        gemm(av.t(), gv, T::one(), gb);
                    }
                }
            }
            &Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            &Op::AddRow(a, bias) => {
                if let Some(ga) = self.acc(grads, a) {
                    add_into(ga, g);
                }
                let c = self.cols(a);
                if let Some(gb) = self.acc(grads, bias) {
                    if c > 0 {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &gi), &bi) in ga.iter_mut().zip(g).zip(self.value(b).data()) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((o, &gi), &ai) in gb.iter_mut().zip(g).zip(self.value(a).data()) {
                        *o += gi * ai;
                    }
                }
            }
            Op::LinComb(terms) => {
                for &(v, c) in terms {
                    if let Some(gv) = self.acc(grads, v) {
                        for (o, &gi) in gv.iter_mut().zip(g) {
                            *o += c * gi;
                        }
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(ga) = self.acc(grads, a) {
                    for ((o, &gi), &x) in ga.iter_mut().zip(g).zip(self.value(a).data()) {
                        if x > T::zero() {
                            *o += gi;
                        }
                    }
                }
            }
            &Op::Softmax(a) => {
                let c = self.cols(a);
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, a) {
                    if c > 0 {
                        for ((gr, yr), orow) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                            let dot: T = gr.iter().zip(yr).map(|(&gi, &yi)| gi * yi).sum();
                            for ((o, &gi), &yi) in orow.iter_mut().zip(gr).zip(yr) {
                                *o += yi * (gi - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let c = self.cols(x);
                if let Some(gb) = self.acc(grads, bias) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = self.acc(grads, gain) {
                    for (row, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((o, &gi), &h) in gg.iter_mut().zip(row).zip(hrow) {
                            *o += gi * h;
                        }
                    }
                }
                let gamma = self.value(gain).data();
                let n = T::c(c as f64);
                if let Some(gx) = self.acc(grads, x) {
                    for (i, (row, hrow)) in g.chunks(c).zip(xhat.chunks(c)).enumerate() {
                        let mut mean_d = T::zero();
                        let mut mean_dh = T::zero();
                        for j in 0..c {
                            let d = row[j] * gamma[j];
                            mean_d += d;
                            mean_dh += d * hrow[j];
                        }
                        mean_d = mean_d / n;
                        mean_dh = mean_dh / n;
                        for j in 0..c {
                            let d = row[j] * gamma[j];
                            gx[i * c + j] += inv_std[i] * (d - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let c = self.cols(*table);
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * c..(id + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                }
            }
            Op::GatherMean { table, groups } => {
                let c = self.cols(*table);
                if let Some(gt) = self.acc(grads, *table) {
                    for (k, group) in groups.iter().enumerate() {
                        let w = T::one() / T::c(group.len() as f64);
                        let src = &g[k * c..(k + 1) * c];
                        for &id in group {
                            for (o, &gi) in gt[id * c..(id + 1) * c].iter_mut().zip(src) {
                                *o += w * gi;
                            }
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = gout.cols();
                let mut off = 0;
                for &p in parts {
                    let (r, c) = (self.rows(p), self.cols(p));
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..r {
                            add_into(&mut gp[i * c..(i + 1) * c], &g[i * total + off..i * total + off + c]);
                        }
                    }
                    off += c;
                }
            }
            &Op::SliceCols { x, start } => {
                let c = self.cols(x);
                let len = gout.cols();
                if let Some(gx) = self.acc(grads, x) {
                    if len > 0 {
                        for (i, row) in g.chunks(len).enumerate() {
                            add_into(&mut gx[i * c + start..i * c + start + len], row);
                        }
                    }
                }
            }
            Op::MeanRows { x, rows } => {
                let c = self.cols(*x);
                let w = T::one() / T::c(rows.len() as f64);
                if let Some(gx) = self.acc(grads, *x) {
                    for &i in rows {
                        for (o, &gi) in gx[i * c..(i + 1) * c].iter_mut().zip(g) {
                            *o += w * gi;
                        }
                    }
                }
            }
            &Op::NormalizeSum(x) => {
                let y = node.value.data();
                let s: T = self.value(x).data().iter().copied().sum();
                let dot: T = g.iter().zip(y).map(|(&gi, &yi)| gi * yi).sum();
                if let Some(gx) = self.acc(grads, x) {
                    for (o, &gi) in gx.iter_mut().zip(g) {
                        *o += (gi - dot) / s;
                    }
                }
            }
            &Op::Clamp { x, lo, hi } => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((o, &gi), &v) in gx.iter_mut().zip(g).zip(self.value(x).data()) {
                        if v > lo && v < hi {
                            *o += gi;
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, mask, probs, count } => {
                let c = self.cols(*logits);
                let w = g[0] / T::c(*count as f64);
                if let Some(gl) = self.acc(grads, *logits) {
                    for (i, (orow, prow)) in gl.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                        if !mask[i] {
                            continue;
                        }
                        for (o, &p) in orow.iter_mut().zip(prow) {
                            *o += w * p;
                        }
                        orow[targets[i]] += -w;
                    }
                }
            }
            Op::Bce { q, labels } => {
                let w = g[0] / T::c(labels.len() as f64);
                let qv = self.value(*q).data();
                if let Some(gq) = self.acc(grads, *q) {
                    for ((o, &p), &y) in gq.iter_mut().zip(qv).zip(labels) {
                        *o += w * (-y / p + (T::one() - y) / (T::one() - p));
                    }
                }
            }
            &Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for ((o, &gi), &m) in gx.iter_mut().zip(g).zip(mask) {
                        *o += gi * m;
                    }
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
