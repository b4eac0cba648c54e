use super::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    CrossEntropy {
        probs: Var,
        targets: Vec<usize>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    SliceCols {
        src: Var,
        start: usize,
    },
    SliceRows {
        src: Var,
        start: usize,
    },
    BatchedVecMat {
        v: Var,
        mats: Var,
    },
    AttnScores {
        members: Var,
        query: Var,
        k: usize,
    },
    AttnMix {
        alpha: Var,
        members: Var,
        k: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so the tape is topologically sorted
/// by construction and [`Tape::backward`] is a single reverse sweep. A tape is
/// meant to live for one forward/backward step.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    debug_checks: bool,
}

/// Gradients of a scalar output with respect to every node that needs one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros shaped like it when nothing flowed back.
    pub fn wrt_or_zeros(&self, tape: &Tape<T>, var: Var) -> Vec<T> {
        self.wrt(var)
            .map(<[T]>::to_vec)
            .unwrap_or_else(|| vec![T::zero(); tape.value(var).len()])
    }
}

fn mismatch(op: &'static str, a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = (s - max).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            debug_checks: false,
        }
    }

    /// Scan every op output for NaN/Inf and fail the op that produced one.
    pub fn with_debug_checks(mut self, on: bool) -> Self {
        self.debug_checks = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn scalar_value(&self, var: Var) -> T {
        self.nodes[var.0].value.data()[0]
    }

    /// Records a leaf; it is differentiated iff the tensor requires grad.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        let needs_grad = value.requires_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        if self.debug_checks && !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn two(&self, a: Var, b: Var) -> (&Tensor<T>, &Tensor<T>) {
        (&self.nodes[a.0].value, &self.nodes[b.0].value)
    }

    /// `a · b` for `p×q` and `q×s` operands.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = self.two(a, b);
        let (p, q) = ta.dims2();
        let (q2, s) = tb.dims2();
        if q != q2 || tb.shape().len() != 2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![T::zero(); p * s];
        T::gemm(
            p,
            q,
            s,
            ta.data(),
            (q as isize, 1),
            tb.data(),
            (s as isize, 1),
            T::zero(),
            &mut out,
            (s as isize, 1),
        );
        let value = Tensor::from_vec(vec![p, s], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `p×q` and `s×q` operands.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = self.two(a, b);
        let (p, q) = ta.dims2();
        let (s, q2) = tb.dims2();
        if q != q2 {
            return Err(mismatch("matmul_t", ta, tb));
        }
        let mut out = vec![T::zero(); p * s];
        T::gemm(
            p,
            q,
            s,
            ta.data(),
            (q as isize, 1),
            tb.data(),
            (1, q as isize),
            T::zero(),
            &mut out,
            (s as isize, 1),
        );
        let value = Tensor::from_vec(vec![p, s], out)?;
        self.push("matmul_t", value, Op::MatMulT(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>, TensorError> {
        let (ta, tb) = self.two(a, b);
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::from_vec(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, TensorError> {
        let (ta, tb) = self.two(a, bias);
        let (_, cols) = ta.dims2();
        if tb.len() != cols {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (x, &b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), data)?;
        self.push("add_row", value, Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let value = Tensor::from_vec(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| x * c).collect(),
        )?;
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(T) -> T) -> Result<Tensor<T>, TensorError> {
        let ta = self.value(a);
        Tensor::from_vec(
            ta.shape().to_vec(),
            ta.data().iter().map(|&x| f(x)).collect(),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.map(a, sigmoid)?;
        self.push("sigmoid", value, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let value = self.map(a, T::tanh)?;
        self.push("tanh", value, Op::Tanh(a), &[a])
    }

    /// Row-wise softmax, stabilised by subtracting each row's maximum.
    pub fn softmax(&mut self, a: Var) -> Result<Var, TensorError> {
        let ta = self.value(a);
        let (_, cols) = ta.dims2();
        let mut out = vec![T::zero(); ta.len()];
        for (src, dst) in ta.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst);
        }
        let value = Tensor::from_vec(ta.shape().to_vec(), out)?;
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let total = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a), &[a])
    }

    /// `Σ_rows −ln probs[row, targets[row]]` over rows that are already distributions.
    pub fn cross_entropy(&mut self, probs: Var, targets: &[usize]) -> Result<Var, TensorError> {
        let tp = self.value(probs);
        let (rows, cols) = tp.dims2();
        if rows != targets.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                left: tp.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: cols,
                });
            }
            total -= tp.data()[r * cols + t].ln();
        }
        let op = Op::CrossEntropy {
            probs,
            targets: targets.to_vec(),
        };
        self.push("cross_entropy", Tensor::scalar(total), op, &[probs])
    }

    /// Fused `Σ_rows weight · −ln softmax(logits)[row, target]`.
    ///
    /// Rows with zero weight contribute neither loss nor gradient.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var, TensorError> {
        let tl = self.value(logits);
        let (rows, cols) = tl.dims2();
        if rows != targets.len() || rows != weights.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len(), weights.len()],
            });
        }
        let mut probs = vec![T::zero(); tl.len()];
        let mut total = T::zero();
        for (r, (src, dst)) in tl
            .data()
            .chunks(cols)
            .zip(probs.chunks_mut(cols))
            .enumerate()
        {
            let t = targets[r];
            if t >= cols {
                return Err(TensorError::IndexOutOfRange {
                    op: "softmax_cross_entropy",
                    index: t,
                    bound: cols,
                });
            }
            softmax_row(src, dst);
            if weights[r] != T::zero() {
                let max = src.iter().copied().fold(T::neg_infinity(), T::max);
                let lse = src.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
                total += weights[r] * (lse - src[t]);
            }
        }
        let op = Op::SoftmaxCrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(total),
            op,
            &[logits],
        )
    }

    /// Looks up `per_row` rows of `table` for each output row and lays them
    /// side by side: `ids.len() / per_row` rows of `per_row · table_cols`.
    pub fn gather(
        &mut self,
        table: Var,
        ids: &[usize],
        per_row: usize,
    ) -> Result<Var, TensorError> {
        let tt = self.value(table);
        let (n, cols) = tt.dims2();
        if per_row == 0 || ids.is_empty() || !ids.len().is_multiple_of(per_row) {
            return Err(TensorError::Empty { op: "gather" });
        }
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather",
                    index: id,
                    bound: n,
                });
            }
            out.extend_from_slice(&tt.data()[id * cols..(id + 1) * cols]);
        }
        let value = Tensor::from_vec(vec![ids.len() / per_row, per_row * cols], out)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather", value, op, &[table])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = *parts
            .first()
            .ok_or(TensorError::Empty { op: "concat_cols" })?;
        let (rows, _) = self.value(first).dims2();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != rows {
                return Err(mismatch("concat_cols", self.value(first), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::from_vec(vec![rows, total], out)?;
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ts = self.value(src);
        let (rows, cols) = ts.dims2();
        if len == 0 || start + len > cols {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut out = Vec::with_capacity(rows * len);
        for row in ts.data().chunks(cols) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::from_vec(vec![rows, len], out)?;
        self.push("slice_cols", value, Op::SliceCols { src, start }, &[src])
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, src: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let ts = self.value(src);
        let (rows, cols) = ts.dims2();
        if len == 0 || start + len > rows {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                bound: rows,
            });
        }
        let value = Tensor::from_vec(
            vec![len, cols],
            ts.data()[start * cols..(start + len) * cols].to_vec(),
        )?;
        self.push("slice_rows", value, Op::SliceRows { src, start }, &[src])
    }

    /// Row `b` of the result is `v[b] · mats[b]`, where `mats[b]` is the
    /// `p×q` matrix stored row-major in row `b` of `mats`.
    pub fn batched_vecmat(&mut self, v: Var, mats: Var) -> Result<Var, TensorError> {
        let (tv, tm) = self.two(v, mats);
        let (rows, p) = tv.dims2();
        let (mrows, pq) = tm.dims2();
        if rows != mrows || pq % p != 0 {
            return Err(mismatch("batched_vecmat", tv, tm));
        }
        let q = pq / p;
        let mut out = vec![T::zero(); rows * q];
        for b in 0..rows {
            T::gemm(
                1,
                p,
                q,
                &tv.data()[b * p..],
                (p as isize, 1),
                &tm.data()[b * pq..],
                (q as isize, 1),
                T::zero(),
                &mut out[b * q..(b + 1) * q],
                (q as isize, 1),
            );
        }
        let value = Tensor::from_vec(vec![rows, q], out)?;
        self.push(
            "batched_vecmat",
            value,
            Op::BatchedVecMat { v, mats },
            &[v, mats],
        )
    }

    /// Bilinear attention scores: `out[b, i] = ⟨members[b, i-th block], query[b]⟩`
    /// where `members` holds `k` equal-width blocks per row.
    pub fn attn_scores(&mut self, members: Var, query: Var, k: usize) -> Result<Var, TensorError> {
        let (tm, tq) = self.two(members, query);
        let (rows, width) = tm.dims2();
        let (qrows, fi) = tq.dims2();
        if k == 0 || rows != qrows || width != k * fi {
            return Err(mismatch("attn_scores", tm, tq));
        }
        let mut out = Vec::with_capacity(rows * k);
        for b in 0..rows {
            let q = &tq.data()[b * fi..(b + 1) * fi];
            for i in 0..k {
                let m = &tm.data()[b * width + i * fi..b * width + (i + 1) * fi];
                out.push(m.iter().zip(q).map(|(&x, &y)| x * y).sum());
            }
        }
        let value = Tensor::from_vec(vec![rows, k], out)?;
        self.push(
            "attn_scores",
            value,
            Op::AttnScores { members, query, k },
            &[members, query],
        )
    }

    /// Convex combination of member blocks: `out[b] = Σ_i alpha[b, i] · members[b, i-th block]`.
    pub fn attn_mix(&mut self, alpha: Var, members: Var, k: usize) -> Result<Var, TensorError> {
        let (ta, tm) = self.two(alpha, members);
        let (rows, ka) = ta.dims2();
        let (mrows, width) = tm.dims2();
        if k == 0 || ka != k || rows != mrows || width % k != 0 {
            return Err(mismatch("attn_mix", ta, tm));
        }
        let fi = width / k;
        let mut out = vec![T::zero(); rows * fi];
        for b in 0..rows {
            let dst = &mut out[b * fi..(b + 1) * fi];
            for i in 0..k {
                let a = ta.data()[b * k + i];
                let m = &tm.data()[b * width + i * fi..b * width + (i + 1) * fi];
                for (d, &x) in dst.iter_mut().zip(m) {
                    *d += a * x;
                }
            }
        }
        let value = Tensor::from_vec(vec![rows, fi], out)?;
        self.push(
            "attn_mix",
            value,
            Op::AttnMix { alpha, members, k },
            &[alpha, members],
        )
    }

    /// Reverse sweep from the scalar `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>, TensorError> {
        let out = &self.nodes[output.0].value;
        if out.len() != 1 {
            return Err(TensorError::NotScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let n = nodes[v.0].value.len();
                    let $buf: &mut Vec<T> = grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
                    $body
                }
            }};
        }
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (p, q) = val(*a).dims2();
                let (_, s) = val(*b).dims2();
                with_grad!(*a, |ga| {
                    T::gemm(
                        p,
                        s,
                        q,
                        g,
                        (s as isize, 1),
                        val(*b).data(),
                        (1, s as isize),
                        T::one(),
                        ga,
                        (q as isize, 1),
                    );
                });
                with_grad!(*b, |gb| {
                    T::gemm(
                        q,
                        p,
                        s,
                        val(*a).data(),
                        (1, q as isize),
                        g,
                        (s as isize, 1),
                        T::one(),
                        gb,
                        (s as isize, 1),
                    );
                });
            }
            Op::MatMulT(a, b) => {
                let (p, q) = val(*a).dims2();
                let (s, _) = val(*b).dims2();
                with_grad!(*a, |ga| {
                    T::gemm(
                        p,
                        s,
                        q,
                        g,
                        (s as isize, 1),
                        val(*b).data(),
                        (q as isize, 1),
                        T::one(),
                        ga,
                        (q as isize, 1),
                    );
                });
                with_grad!(*b, |gb| {
                    T::gemm(
                        s,
                        p,
                        q,
                        g,
                        (1, s as isize),
                        val(*a).data(),
                        (q as isize, 1),
                        T::one(),
                        gb,
                        (q as isize, 1),
                    );
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |gv| {
                        for (d, &x) in gv.iter_mut().zip(g) {
                            *d += x;
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                with_grad!(*a, |ga| {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(tb.data()) {
                        *d += x * y;
                    }
                });
                with_grad!(*b, |gb| {
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(ta.data()) {
                        *d += x * y;
                    }
                });
            }
            Op::AddRow(a, bias) => {
                with_grad!(*a, |ga| {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                });
                with_grad!(*bias, |gb| {
                    let cols = gb.len();
                    for row in g.chunks(cols) {
                        for (d, &x) in gb.iter_mut().zip(row) {
                            *d += x;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                with_grad!(*a, |ga| {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * *c;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                with_grad!(*a, |ga| {
                    for ((d, &x), &s) in ga.iter_mut().zip(g).zip(y) {
                        *d += x * s * (T::one() - s);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                with_grad!(*a, |ga| {
                    for ((d, &x), &t) in ga.iter_mut().zip(g).zip(y) {
                        *d += x * (T::one() - t * t);
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let (_, cols) = node.value.dims2();
                with_grad!(*a, |ga| {
                    for ((d, gr), yr) in ga.chunks_mut(cols).zip(g.chunks(cols)).zip(y.chunks(cols))
                    {
                        let dot: T = gr.iter().zip(yr).map(|(&x, &s)| x * s).sum();
                        for ((dd, &x), &s) in d.iter_mut().zip(gr).zip(yr) {
                            *dd += s * (x - dot);
                        }
                    }
                });
            }
            Op::Sum(a) => {
                with_grad!(*a, |ga| {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::CrossEntropy { probs, targets } => {
                let tp = val(*probs);
                let (_, cols) = tp.dims2();
                with_grad!(*probs, |gp| {
                    for (r, &t) in targets.iter().enumerate() {
                        gp[r * cols + t] -= g[0] / tp.data()[r * cols + t];
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let (_, cols) = val(*logits).dims2();
                with_grad!(*logits, |gl| {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let scale = g[0] * w;
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        for (d, &p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *d += scale * p;
                        }
                        row[t] -= scale;
                    }
                });
            }
            Op::Gather { table, ids } => {
                let (_, cols) = val(*table).dims2();
                with_grad!(*table, |gt| {
                    for (j, &id) in ids.iter().enumerate() {
                        for (d, &x) in gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(&g[j * cols..(j + 1) * cols])
                        {
                            *d += x;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = val(p).dims2();
                    with_grad!(p, |gp| {
                        for r in 0..rows {
                            for (d, &x) in gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(&g[r * total + offset..])
                            {
                                *d += x;
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { src, start } => {
                let (_, cols) = val(*src).dims2();
                let (_, len) = node.value.dims2();
                with_grad!(*src, |gs| {
                    for (row, gr) in gs.chunks_mut(cols).zip(g.chunks(len)) {
                        for (d, &x) in row[*start..*start + len].iter_mut().zip(gr) {
                            *d += x;
                        }
                    }
                });
            }
            Op::SliceRows { src, start } => {
                let (_, cols) = val(*src).dims2();
                with_grad!(*src, |gs| {
                    for (d, &x) in gs[start * cols..start * cols + g.len()].iter_mut().zip(g) {
                        *d += x;
                    }
                });
            }
            Op::BatchedVecMat { v, mats } => {
                let (tv, tm) = (val(*v), val(*mats));
                let (rows, p) = tv.dims2();
                let (_, pq) = tm.dims2();
                let q = pq / p;
                with_grad!(*v, |gv| {
                    for b in 0..rows {
                        for i in 0..p {
                            let m = &tm.data()[b * pq + i * q..b * pq + (i + 1) * q];
                            gv[b * p + i] += m
                                .iter()
                                .zip(&g[b * q..(b + 1) * q])
                                .map(|(&x, &y)| x * y)
                                .sum::<T>();
                        }
                    }
                });
                with_grad!(*mats, |gm| {
                    for b in 0..rows {
                        let gb = &g[b * q..(b + 1) * q];
                        for i in 0..p {
                            let vi = tv.data()[b * p + i];
                            for (d, &x) in
                                gm[b * pq + i * q..b * pq + (i + 1) * q].iter_mut().zip(gb)
                            {
                                *d += vi * x;
                            }
                        }
                    }
                });
            }
            Op::AttnScores { members, query, k } => {
                let (tm, tq) = (val(*members), val(*query));
                let (rows, width) = tm.dims2();
                let fi = width / k;
                with_grad!(*members, |gm| {
                    for b in 0..rows {
                        let q = &tq.data()[b * fi..(b + 1) * fi];
                        for i in 0..*k {
                            let s = g[b * k + i];
                            for (d, &x) in gm[b * width + i * fi..b * width + (i + 1) * fi]
                                .iter_mut()
                                .zip(q)
                            {
                                *d += s * x;
                            }
                        }
                    }
                });
                with_grad!(*query, |gq| {
                    for b in 0..rows {
                        for i in 0..*k {
                            let s = g[b * k + i];
                            let m = &tm.data()[b * width + i * fi..b * width + (i + 1) * fi];
                            for (d, &x) in gq[b * fi..(b + 1) * fi].iter_mut().zip(m) {
                                *d += s * x;
                            }
                        }
                    }
                });
            }
            Op::AttnMix { alpha, members, k } => {
                let (ta, tm) = (val(*alpha), val(*members));
                let (rows, width) = tm.dims2();
                let fi = width / k;
                with_grad!(*alpha, |ga| {
                    for b in 0..rows {
                        let gb = &g[b * fi..(b + 1) * fi];
                        for i in 0..*k {
                            let m = &tm.data()[b * width + i * fi..b * width + (i + 1) * fi];
                            ga[b * k + i] += m.iter().zip(gb).map(|(&x, &y)| x * y).sum::<T>();
                        }
                    }
                });
                with_grad!(*members, |gm| {
                    for b in 0..rows {
                        let gb = &g[b * fi..(b + 1) * fi];
                        for i in 0..*k {
                            let a = ta.data()[b * k + i];
                            for (d, &x) in gm[b * width + i * fi..b * width + (i + 1) * fi]
                                .iter_mut()
                                .zip(gb)
                            {
                                *d += a * x;
                            }
                        }
                    }
                });
            }
        }
    }
}
