//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Ops are evaluated eagerly when recorded; the tape keeps every forward
//! value so the backward sweep needs no recomputation. A tape is
//! single-owner: build one per forward pass (or per training example) and
//! drop it after reading the gradients.

use crate::error::{Error, Result};

use super::{
    check_conv_args, conv1d_bank_unchecked, ensure_finite, mixture_density, sigmoid,
    softmax_unchecked, softplus_unchecked, ConvMode, Real, Tensor,
};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    Relu(Var),
    Sqrt(Var),
    Square(Var),
    LogFloor(Var, T),
    Softmax(Var),
    Sum(Var),
    Dot(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    WeightedRows(Var, Var),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Reshape(Var, Vec<usize>),
    Gather(Var, usize),
    Stack(Vec<Var>),
    Conv(Var, Var, ConvMode),
    Mixture([Var; 4]),
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    ops: Vec<Op<T>>,
    values: Vec<Tensor<T>>,
}

/// Partial derivatives of a scalar with respect to every recorded value.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    sizes: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// Gradient buffer for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient for `v`, with zeros standing in for "no influence".
    pub fn dense(&self, v: Var) -> Vec<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.sizes[v.0]],
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            ops: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drops every node recorded after the first `len`; handles to dropped
    /// nodes become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.ops.truncate(len);
        self.values.truncate(len);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn data(&self, v: Var) -> &[T] {
        self.values[v.0].data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.values[v.0].data()[0]
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.ops.push(op);
        self.values.push(value);
        Var(self.ops.len() - 1)
    }

    fn record(&mut self, op: Op<T>) -> Var {
        let value = apply(&op, &self.values);
        self.push(op, value)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Constant, value)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.record(Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.record(Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.record(Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        self.record(Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: T) -> Var {
        self.record(Op::Offset(a, k))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.record(Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.record(Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.record(Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.record(Op::Log(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.record(Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.record(Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.record(Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.record(Op::Square(a))
    }

    /// `max(ln x, floor)`, with `x ≤ 0` mapping to `floor`. The gradient is
    /// zero wherever the floor is active.
    pub fn log_floor(&mut self, a: Var, floor: T) -> Var {
        self.record(Op::LogFloor(a, floor))
    }

    /// Softmax over all entries of `a` (which must be finite).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.values[a.0].numel() == 0 {
            return Err(Error::Empty("softmax"));
        }
        ensure_finite(self.data(a), "softmax input")?;
        Ok(self.record(Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        self.record(Op::Sum(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.values[a.0].numel() != self.values[b.0].numel() {
            return Err(Error::shape(
                "dot",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(self.record(Op::Dot(a, b)))
    }

    /// `x · wᵀ`: `x` is `[k]` or `[m, k]`, `w` is `[n, k]`; the result is
    /// `[n]` or `[m, n]`. With `w` stored as `[out, in]` this is a linear layer.
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (&self.values[x.0], &self.values[w.0]);
        if wv.shape().len() != 2 || xv.cols() != wv.cols() {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} · {:?}ᵀ", xv.shape(), wv.shape()),
            ));
        }
        Ok(self.record(Op::MatMulT(x, w)))
    }

    /// Adds vector `v` to every row of matrix `m`.
    pub fn add_row(&mut self, m: Var, v: Var) -> Result<Var> {
        let (mv, vv) = (&self.values[m.0], &self.values[v.0]);
        if mv.cols() != vv.numel() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", mv.shape(), vv.shape()),
            ));
        }
        Ok(self.record(Op::AddRow(m, v)))
    }

    /// `Σ_j weights[j] · rows[j, :]`.
    pub fn weighted_rows(&mut self, weights: Var, rows: Var) -> Result<Var> {
        let (wv, rv) = (&self.values[weights.0], &self.values[rows.0]);
        if rv.shape().len() != 2 || wv.numel() != rv.rows() {
            return Err(Error::shape(
                "weighted_rows",
                format!("weights {:?} over rows {:?}", wv.shape(), rv.shape()),
            ));
        }
        Ok(self.record(Op::WeightedRows(weights, rows)))
    }

    /// Concatenates the flattened values of `parts` into one vector.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat"));
        }
        Ok(self.record(Op::Concat(parts.to_vec())))
    }

    /// Contiguous slice `[start, start + len)` of the flattened value.
    pub fn slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.values[a.0].numel() {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of {:?}", start + len, self.shape(a)),
            ));
        }
        Ok(self.record(Op::Slice(a, start, len)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.values[a.0].numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(a)),
            ));
        }
        Ok(self.record(Op::Reshape(a, shape.to_vec())))
    }

    /// Row `i` of a matrix, as a vector (embedding lookup).
    pub fn gather_row(&mut self, m: Var, i: usize) -> Result<Var> {
        if self.shape(m).len() != 2 || i >= self.values[m.0].rows() {
            return Err(Error::shape(
                "gather_row",
                format!("row {i} of {:?}", self.shape(m)),
            ));
        }
        Ok(self.record(Op::Gather(m, i)))
    }

    /// Stacks equal-length vectors into a `[rows.len(), n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::Empty("stack_rows"))?;
        let n = self.values[first.0].numel();
        if rows.iter().any(|r| self.values[r.0].numel() != n) {
            return Err(Error::shape("stack_rows", "rows differ in length"));
        }
        Ok(self.record(Op::Stack(rows.to_vec())))
    }

    /// Filter-bank convolution of a vector `signal[L]` with `filters[count, len]`;
    /// returns `[L, count]`.
    pub fn conv1d_bank(&mut self, signal: Var, filters: Var, mode: ConvMode) -> Result<Var> {
        let (sv, fv) = (&self.values[signal.0], &self.values[filters.0]);
        if fv.shape().len() != 2 {
            return Err(Error::shape(
                "conv1d_bank",
                format!("filters must be [count, len], got {:?}", fv.shape()),
            ));
        }
        check_conv_args(sv.numel(), fv.cols(), mode)?;
        Ok(self.record(Op::Conv(signal, filters, mode)))
    }

    /// Unnormalized Gaussian mixture sampled at `0..len`; see
    /// [`super::mixture_density`]. All four parameter vectors have length K.
    pub fn mixture(&mut self, w: Var, z: Var, mu: Var, sigma: Var, len: usize) -> Result<Var> {
        let k = self.values[w.0].numel();
        if [z, mu, sigma].iter().any(|v| self.values[v.0].numel() != k) {
            return Err(Error::shape("mixture", "parameter vectors differ in length"));
        }
        if len == 0 {
            return Err(Error::Empty("mixture positions"));
        }
        if self.data(sigma).iter().any(|&s| !(s > T::zero())) {
            return Err(Error::InvalidArgument(
                "mixture widths must be strictly positive".into(),
            ));
        }
        let value = {
            let d = |v: Var| self.values[v.0].data();
            Tensor::vector(mixture_density(d(w), d(z), d(mu), d(sigma), len))
        };
        Ok(self.push(Op::Mixture([w, z, mu, sigma]), value))
    }

    /// Recomputes every node from the leaves and constants.
    pub fn replay(&self) -> Vec<Tensor<T>> {
        let mut out: Vec<Tensor<T>> = Vec::with_capacity(self.values.len());
        for (op, recorded) in self.ops.iter().zip(&self.values) {
            let v = match op {
                Op::Leaf | Op::Constant => recorded.clone(),
                Op::Mixture([w, z, mu, sigma]) => Tensor::vector(mixture_density(
                    out[w.0].data(),
                    out[z.0].data(),
                    out[mu.0].data(),
                    out[sigma.0].data(),
                    recorded.numel(),
                )),
                _ => apply(op, &out),
            };
            out.push(v);
        }
        out
    }

    /// Reverse sweep from a one-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.values[loss.0].numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got {:?}", self.shape(loss)),
            ));
        }
        if !self.values[loss.0].is_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..n).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let sizes = self.values.iter().map(Tensor::numel).collect();
        Ok(Gradients { grads, sizes })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let vals = &self.values;
        let out = vals[idx].data();
        let zero = T::zero();
        let one = T::one();

        // Accumulate `f(i)` into the gradient buffer of `v`.
        macro_rules! acc {
            ($v:expr, |$i:ident| $e:expr) => {{
                let v: Var = $v;
                if !matches!(self.ops[v.0], Op::Constant) {
                    let n = vals[v.0].numel();
                    let buf = grads[v.0].get_or_insert_with(|| vec![zero; n]);
                    for $i in 0..n {
                        buf[$i] = buf[$i] + $e;
                    }
                }
            }};
        }

        match &self.ops[idx] {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |i| g[i]);
                acc!(*b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                acc!(*a, |i| g[i] * bv[i]);
                acc!(*b, |i| g[i] * av[i]);
            }
            Op::Scale(a, k) => acc!(*a, |i| g[i] * *k),
            Op::Offset(a, _) => acc!(*a, |i| g[i]),
            Op::Tanh(a) => acc!(*a, |i| g[i] * (one - out[i] * out[i])),
            Op::Sigmoid(a) => acc!(*a, |i| g[i] * out[i] * (one - out[i])),
            Op::Exp(a) => acc!(*a, |i| g[i] * out[i]),
            Op::Log(a) => {
                let av = vals[a.0].data();
                acc!(*a, |i| g[i] / av[i]);
            }
            Op::Softplus(a) => {
                let av = vals[a.0].data();
                acc!(*a, |i| g[i] * sigmoid(av[i]));
            }
            Op::Relu(a) => {
                let av = vals[a.0].data();
                acc!(*a, |i| if av[i] > zero { g[i] } else { zero });
            }
            Op::Sqrt(a) => acc!(*a, |i| g[i] / (out[i] + out[i])),
            Op::Square(a) => {
                let av = vals[a.0].data();
                acc!(*a, |i| g[i] * (av[i] + av[i]));
            }
            Op::LogFloor(a, floor) => {
                let av = vals[a.0].data();
                acc!(*a, |i| if av[i] > zero && out[i] > *floor {
                    g[i] / av[i]
                } else {
                    zero
                });
            }
            Op::Softmax(a) => {
                let gy: T = g.iter().zip(out).map(|(&gi, &yi)| gi * yi).sum();
                acc!(*a, |i| out[i] * (g[i] - gy));
            }
            Op::Sum(a) => acc!(*a, |_i| g[0]),
            Op::Dot(a, b) => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                acc!(*a, |i| g[0] * bv[i]);
                acc!(*b, |i| g[0] * av[i]);
            }
            Op::MatMulT(x, w) => {
                let (xv, wv) = (&vals[x.0], &vals[w.0]);
                let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
                let (xd, wd) = (xv.data(), wv.data());
                if !matches!(self.ops[x.0], Op::Constant) {
                    let buf = grads[x.0].get_or_insert_with(|| vec![zero; m * k]);
                    for r in 0..m {
                        let gx = &mut buf[r * k..(r + 1) * k];
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == zero {
                                continue;
                            }
                            let wrow = &wd[c * k..(c + 1) * k];
                            for (dst, &wv) in gx.iter_mut().zip(wrow) {
                                *dst = *dst + gv * wv;
                            }
                        }
                    }
                }
                if !matches!(self.ops[w.0], Op::Constant) {
                    let buf = grads[w.0].get_or_insert_with(|| vec![zero; n * k]);
                    for r in 0..m {
                        let xrow = &xd[r * k..(r + 1) * k];
                        for c in 0..n {
                            let gv = g[r * n + c];
                            if gv == zero {
                                continue;
                            }
                            let gw = &mut buf[c * k..(c + 1) * k];
                            for (dst, &xv) in gw.iter_mut().zip(xrow) {
                                *dst = *dst + gv * xv;
                            }
                        }
                    }
                }
            }
            Op::AddRow(m, v) => {
                let cols = vals[v.0].numel();
                acc!(*m, |i| g[i]);
                if !matches!(self.ops[v.0], Op::Constant) {
                    let buf = grads[v.0].get_or_insert_with(|| vec![zero; cols]);
                    for row in g.chunks(cols) {
                        for (dst, &gv) in buf.iter_mut().zip(row) {
                            *dst = *dst + gv;
                        }
                    }
                }
            }
            Op::WeightedRows(wts, rows) => {
                let (wv, rv) = (vals[wts.0].data(), &vals[rows.0]);
                let d = rv.cols();
                let rd = rv.data();
                acc!(*wts, |j| {
                    let mut s = zero;
                    for c in 0..d {
                        s = s + g[c] * rd[j * d + c];
                    }
                    s
                });
                acc!(*rows, |i| wv[i / d] * g[i % d]);
            }
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = vals[p.0].numel();
                    let s = start;
                    acc!(*p, |i| g[s + i]);
                    start += n;
                }
            }
            Op::Slice(a, start, _) => {
                let len = g.len();
                let s = *start;
                acc!(*a, |i| if i >= s && i < s + len { g[i - s] } else { zero });
            }
            Op::Reshape(a, _) => acc!(*a, |i| g[i]),
            Op::Gather(m, row) => {
                let c = vals[m.0].cols();
                let r = *row;
                if !matches!(self.ops[m.0], Op::Constant) {
                    let n = vals[m.0].numel();
                    let buf = grads[m.0].get_or_insert_with(|| vec![zero; n]);
                    for (dst, &gv) in buf[r * c..(r + 1) * c].iter_mut().zip(g) {
                        *dst = *dst + gv;
                    }
                }
            }
            Op::Stack(rows) => {
                let n = g.len() / rows.len();
                for (r, v) in rows.iter().enumerate() {
                    acc!(*v, |i| g[r * n + i]);
                }
            }
            Op::Conv(signal, filters, mode) => {
                let sv = vals[signal.0].data();
                let fv = &vals[filters.0];
                let (count, len) = (fv.rows(), fv.cols());
                let fd = fv.data();
                let l = sv.len() as isize;
                let off = mode.offset(len);
                // out[j, f] = Σ_k fd[f, k] · s[j − k + off]
                if !matches!(self.ops[signal.0], Op::Constant) {
                    let buf = grads[signal.0].get_or_insert_with(|| vec![zero; sv.len()]);
                    for (s_idx, dst) in buf.iter_mut().enumerate() {
                        let mut acc = zero;
                        for k in 0..len {
                            let j = s_idx as isize + k as isize - off;
                            if j < 0 || j >= l {
                                continue;
                            }
                            let grow = &g[j as usize * count..(j as usize + 1) * count];
                            for (f, &gv) in grow.iter().enumerate() {
                                acc = acc + gv * fd[f * len + k];
                            }
                        }
                        *dst = *dst + acc;
                    }
                }
                if !matches!(self.ops[filters.0], Op::Constant) {
                    let buf = grads[filters.0].get_or_insert_with(|| vec![zero; count * len]);
                    for (s_idx, &s) in sv.iter().enumerate() {
                        if s == zero {
                            continue;
                        }
                        for k in 0..len {
                            let j = s_idx as isize + k as isize - off;
                            if j < 0 || j >= l {
                                continue;
                            }
                            let grow = &g[j as usize * count..(j as usize + 1) * count];
                            for (f, &gv) in grow.iter().enumerate() {
                                buf[f * len + k] = buf[f * len + k] + gv * s;
                            }
                        }
                    }
                }
            }
            Op::Mixture([w, z, mu, sigma]) => {
                let (wd, zd, md, sd) = (
                    vals[w.0].data(),
                    vals[z.0].data(),
                    vals[mu.0].data(),
                    vals[sigma.0].data(),
                );
                let k = wd.len();
                let half = T::lit(0.5);
                let (mut gw, mut gz, mut gm, mut gs) =
                    (vec![zero; k], vec![zero; k], vec![zero; k], vec![zero; k]);
                for c in 0..k {
                    let inv_var = one / (sd[c] * sd[c]);
                    let amp = wd[c] / zd[c];
                    let (mut se, mut sed, mut sed2) = (zero, zero, zero);
                    for (j, &gj) in g.iter().enumerate() {
                        let d = T::lit(j as f64) - md[c];
                        let e = (-half * d * d * inv_var).exp();
                        let ge = gj * e;
                        se = se + ge;
                        sed = sed + ge * d;
                        sed2 = sed2 + ge * d * d;
                    }
                    gw[c] = se / zd[c];
                    gz[c] = -amp * se / zd[c];
                    gm[c] = amp * sed * inv_var;
                    gs[c] = amp * sed2 * inv_var / sd[c];
                }
                acc!(*w, |i| gw[i]);
                acc!(*z, |i| gz[i]);
                acc!(*mu, |i| gm[i]);
                acc!(*sigma, |i| gs[i]);
            }
        }
    }
}

/// Forward kernel shared by recording and replay. Shapes are validated by
/// the recording methods, so this never fails.
fn apply<T: Real>(op: &Op<T>, vals: &[Tensor<T>]) -> Tensor<T> {
    let unary = |a: &Var, f: &dyn Fn(T) -> T| {
        let t = &vals[a.0];
        Tensor::from_fn(t.shape(), |i| f(t.data()[i]))
    };
    let binary = |a: &Var, b: &Var, f: &dyn Fn(T, T) -> T| {
        let (x, y) = (&vals[a.0], &vals[b.0]);
        Tensor::from_fn(x.shape(), |i| f(x.data()[i], y.data()[i]))
    };
    match op {
        Op::Leaf | Op::Constant | Op::Mixture(_) => {
            unreachable!("leaves and mixtures are materialized by the caller")
        }
        Op::Add(a, b) => binary(a, b, &|x, y| x + y),
        Op::Sub(a, b) => binary(a, b, &|x, y| x - y),
        Op::Mul(a, b) => binary(a, b, &|x, y| x * y),
        Op::Scale(a, k) => unary(a, &|x| x * *k),
        Op::Offset(a, k) => unary(a, &|x| x + *k),
        Op::Tanh(a) => unary(a, &|x| x.tanh()),
        Op::Sigmoid(a) => unary(a, &sigmoid),
        Op::Exp(a) => unary(a, &|x| x.exp()),
        Op::Log(a) => unary(a, &|x| x.ln()),
        Op::Softplus(a) => unary(a, &softplus_unchecked),
        Op::Relu(a) => unary(a, &|x| x.max(T::zero())),
        Op::Sqrt(a) => unary(a, &|x| x.sqrt()),
        Op::Square(a) => unary(a, &|x| x * x),
        Op::LogFloor(a, floor) => unary(a, &|x| {
            if x > T::zero() {
                x.ln().max(*floor)
            } else {
                *floor
            }
        }),
        Op::Softmax(a) => {
            let t = &vals[a.0];
            Tensor::vector(softmax_unchecked(t.data())).with_shape(t.shape().to_vec())
        }
        Op::Sum(a) => Tensor::scalar(vals[a.0].data().iter().copied().sum()),
        Op::Dot(a, b) => Tensor::scalar(
            vals[a.0]
                .data()
                .iter()
                .zip(vals[b.0].data())
                .map(|(&x, &y)| x * y)
                .sum(),
        ),
        Op::MatMulT(x, w) => {
            let (xv, wv) = (&vals[x.0], &vals[w.0]);
            let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
            let (xd, wd) = (xv.data(), wv.data());
            let mut out = Vec::with_capacity(m * n);
            for r in 0..m {
                let xrow = &xd[r * k..(r + 1) * k];
                for c in 0..n {
                    let wrow = &wd[c * k..(c + 1) * k];
                    let mut s = T::zero();
                    for (&a, &b) in xrow.iter().zip(wrow) {
                        s = s + a * b;
                    }
                    out.push(s);
                }
            }
            let shape = if xv.is_vector() { vec![n] } else { vec![m, n] };
            Tensor::vector(out).with_shape(shape)
        }
        Op::AddRow(m, v) => {
            let (mv, vv) = (&vals[m.0], vals[v.0].data());
            let c = vv.len();
            Tensor::from_fn(mv.shape(), |i| mv.data()[i] + vv[i % c])
        }
        Op::WeightedRows(w, r) => {
            let (wv, rv) = (vals[w.0].data(), &vals[r.0]);
            let d = rv.cols();
            let mut out = vec![T::zero(); d];
            for (j, &a) in wv.iter().enumerate() {
                for (o, &h) in out.iter_mut().zip(rv.row(j)) {
                    *o = *o + a * h;
                }
            }
            Tensor::vector(out)
        }
        Op::Concat(parts) => {
            let mut out = Vec::new();
            for p in parts {
                out.extend_from_slice(vals[p.0].data());
            }
            Tensor::vector(out)
        }
        Op::Slice(a, start, len) => Tensor::vector(vals[a.0].data()[*start..start + len].to_vec()),
        Op::Reshape(a, shape) => vals[a.0].clone().with_shape(shape.clone()),
        Op::Gather(m, row) => Tensor::vector(vals[m.0].row(*row).to_vec()),
        Op::Stack(rows) => {
            let n = vals[rows[0].0].numel();
            let mut out = Vec::with_capacity(n * rows.len());
            for r in rows {
                out.extend_from_slice(vals[r.0].data());
            }
            Tensor::vector(out).with_shape(vec![rows.len(), n])
        }
        Op::Conv(signal, filters, mode) => {
            let (sv, fv) = (vals[signal.0].data(), &vals[filters.0]);
            let (count, len) = (fv.rows(), fv.cols());
            Tensor::vector(conv1d_bank_unchecked(sv, fv.data(), count, len, *mode))
                .with_shape(vec![sv.len(), count])
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_is_bit_exact() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(vec![0.3, -1.1, 2.0]));
        let w = t.leaf(Tensor::matrix(2, 3, vec![0.1, 0.2, -0.3, 0.5, -0.7, 0.9]).unwrap());
        let h = t.matmul_t(x, w).unwrap();
        let a = t.tanh(h);
        let s = t.softmax(a).unwrap();
        let l = t.log_floor(s, -1e6);
        let total = t.sum(l);
        let replayed = t.replay();
        for (i, v) in replayed.iter().enumerate() {
            assert_eq!(v, t.value(Var(i)));
        }
        assert!(t.scalar(total).is_finite());
    }

    #[test]
    fn constant_gets_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = t.leaf(Tensor::vector(vec![3.0, 4.0]));
        let y = t.mul(c, x).unwrap();
        let loss = t.sum(y);
        let g = t.backward(loss).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.dense(c), vec![0.0, 0.0]);
        assert_eq!(g.dense(x), vec![1.0, 2.0]);
    }

    #[test]
    fn unrelated_leaf_has_zero_gradient() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::vector(vec![1.0]));
        let y = t.leaf(Tensor::vector(vec![2.0]));
        let loss = t.square(x);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.dense(y), vec![0.0]);
        assert_eq!(g.dense(x), vec![2.0]);
    }

    #[test]
    fn shape_errors() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]));
        let b = t.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(t.add(a, b).is_err());
        assert!(t.matmul_t(a, b).is_err());
        assert!(t.slice(a, 1, 2).is_err());
        let loss = t.sum(a);
        let g = t.backward(a);
        assert!(g.is_err());
        assert!(t.backward(loss).is_ok());
    }

    #[test]
    fn log_floor_clamps() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(Tensor::vector(vec![0.0, 1.0, 1e-300, -2.0]));
        let l = t.log_floor(a, -10.0);
        assert_eq!(t.data(l), &[-10.0, 0.0, -10.0, -10.0]);
    }
}
