//! Reverse-mode differentiation over an explicit tape of tensor primitives.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.
//! A node is *tracked* when some tracked leaf (a parameter) reaches it;
//! untracked nodes (inputs, constants, and anything behind [`Graph::detach`])
//! never receive or forward gradients.

use crate::error::{Error, Result};
use crate::exec;
use crate::ndmath::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Detach,
    Conv2d { x: Var, w: Var, b: Var, stride: usize },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log { x: Var, floor: f64 },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MulScalar { x: Var, s: Var },
    MatMulT(Var, Var),
    SoftmaxRows(Var),
    L2NormRows(Var),
    LayerNormRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    ConcatCols(Var, Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    tracked: bool,
    /// Per-row statistics cached by normalization ops.
    aux: Vec<T>,
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of one backward pass, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Output extent of a valid (unpadded) convolution.
pub fn conv_out(size: usize, kernel: usize, stride: usize) -> usize {
    (size - kernel) / stride + 1
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    s: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    for oy in 0..self.ho {
                        let src = (c * self.h + oy * self.s + ki) * self.w + kj;
                        let dst = row + oy * self.wo;
                        for ox in 0..self.wo {
                            col[dst + ox] = x[src + ox * self.s];
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let p = self.positions();
        for c in 0..self.c {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = ((c * self.k + ki) * self.k + kj) * p;
                    for oy in 0..self.ho {
                        let dst = (c * self.h + oy * self.s + ki) * self.w + kj;
                        let src = row + oy * self.wo;
                        for ox in 0..self.wo {
                            let d = &mut dx[dst + ox * self.s];
                            *d = *d + col[src + ox];
                        }
                    }
                }
            }
        }
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op, tracked: bool) -> Var {
        self.push_aux(value, op, tracked, Vec::new())
    }

    fn push_aux(&mut self, value: Tensor<T>, op: Op, tracked: bool, aux: Vec<T>) -> Var {
        self.nodes.push(Node {
            value,
            op,
            tracked,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; gradients never flow into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `x`, but cut from the gradient path.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.push(value, Op::Detach, false)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn conv_geom(&self, x: Var, w: Var, b: Var, stride: usize) -> Result<ConvGeom> {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] || ws[1] != xs[1] {
            return Err(Error::shape(format!("conv2d input {xs:?} with kernel {ws:?}")));
        }
        if self.value(b).len() != ws[0] {
            return Err(Error::shape("conv2d bias length"));
        }
        let k = ws[2];
        if stride == 0 || xs[2] < k || xs[3] < k {
            return Err(Error::shape(format!("conv2d kernel {k} larger than input {xs:?}")));
        }
        Ok(ConvGeom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            s: stride,
            ho: conv_out(xs[2], k, stride),
            wo: conv_out(xs[3], k, stride),
        })
    }

    /// Valid 2-D convolution: `x [B,C,H,W]`, `w [O,C,k,k]`, `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let g = self.conv_geom(x, w, b, stride)?;
        let batch = self.value(x).rows();
        let (patch, p) = (g.patch(), g.positions());
        let mut out = vec![T::zero(); batch * g.o * p];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            let in_len = g.c * g.h * g.w;
            exec::for_each_chunk(&mut out, g.o * p, |i, y| {
                let mut col = vec![T::zero(); patch * p];
                g.im2col(&xv[i * in_len..(i + 1) * in_len], &mut col);
                for (o, row) in y.chunks_mut(p).enumerate() {
                    row.fill(bv[o]);
                }
                T::gemm(g.o, patch, p, wv, false, &col, false, T::one(), y);
            });
        }
        let value = Tensor::new(&[batch, g.o, g.ho, g.wo], out)?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(value, Op::Conv2d { x, w, b, stride }, tracked))
    }

    /// Affine map over rows: `x [B,I]`, `w [O,I]`, `b [O]` gives `[B,O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (batch, inp) = (self.value(x).rows(), self.value(x).row_len());
        let ws = self.value(w).shape();
        if ws.len() != 2 || ws[1] != inp || self.value(b).len() != ws[0] {
            return Err(Error::shape(format!(
                "linear input width {inp} with weight {ws:?}"
            )));
        }
        let out_dim = ws[0];
        let mut out = Vec::with_capacity(batch * out_dim);
        for _ in 0..batch {
            out.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            inp,
            out_dim,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            T::one(),
            &mut out,
        );
        let value = Tensor::new(&[batch, out_dim], out)?;
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        Ok(self.push(value, Op::Linear { x, w, b }, tracked))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let tracked = self.tracked(x);
        self.push(value, op, tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: f64) -> Var {
        let fl = T::lit(floor);
        self.unary(x, Op::Log { x, floor }, move |v| v.max(fl).ln())
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let ct = T::lit(c);
        self.unary(x, Op::Scale(x, c), move |v| v * ct)
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let ct = T::lit(c);
        self.unary(x, Op::Offset(x), move |v| v + ct)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, what: &str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let av = self.value(a);
        let data = av
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(av.shape(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Min(a, b), "min", |x, y| if y < x { y } else { x })
    }

    /// Multiply every element of `x` by the one-element node `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar expects a one-element scalar"));
        }
        let sv = self.scalar(s);
        let value = self.value(x).map(|v| v * sv);
        let tracked = self.tracked(x) || self.tracked(s);
        Ok(self.push(value, Op::MulScalar { x, s }, tracked))
    }

    /// `a · bᵀ` for `a [N,D]`, `b [M,D]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::ndmath::tensor::matmul_t(self.value(a), self.value(b))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::MatMulT(a, b), tracked))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let tracked = self.tracked(x);
        self.push(value, Op::SoftmaxRows(x), tracked)
    }

    /// Scale each row to unit norm; fails with `ZeroNorm` on a null row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let mut value = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let n = crate::ndmath::tensor::norm(src.row(i));
            if !(n.as_f64() >= 1e-12) {
                return Err(Error::ZeroNorm(n.as_f64()));
            }
            value.row_mut(i).iter_mut().for_each(|v| *v = *v / n);
            norms.push(n);
        }
        let tracked = self.tracked(x);
        Ok(self.push_aux(value, Op::L2NormRows(x), tracked, norms))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = T::lit(src.row_len() as f64);
        let eps = T::lit(1e-5);
        let mut value = src.clone();
        let mut inv_std = Vec::with_capacity(src.rows());
        for i in 0..src.rows() {
            let row = value.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / d;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        let tracked = self.tracked(x);
        self.push_aux(value, Op::LayerNormRows(x), tracked, inv_std)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::SumAll(x), tracked)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = T::lit(self.value(x).len() as f64);
        let value = Tensor::scalar(self.value(x).sum() / n);
        let tracked = self.tracked(x);
        self.push(value, Op::MeanAll(x), tracked)
    }

    /// Sum along the last axis: `[R, D]` to `[R, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data: Vec<T> = (0..src.rows()).map(|i| src.row(i).iter().copied().sum()).collect();
        let value = Tensor::new(&[src.rows(), 1], data).expect("row count positive");
        let tracked = self.tracked(x);
        self.push(value, Op::SumRows(x), tracked)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape("concat_cols row counts differ"));
        }
        let (wa, wb) = (av.row_len(), bv.row_len());
        let mut data = Vec::with_capacity(av.len() + bv.len());
        for i in 0..av.rows() {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let value = Tensor::new(&[av.rows(), wa + wb], data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::ConcatCols(a, b), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::Reshape(x), tracked))
    }

    /// Collapse all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let shape = [v.rows(), v.row_len()];
        self.reshape(x, &shape)
    }

    /// Backpropagate from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        if !self.tracked(root) {
            return Ok(Gradients { grads });
        }
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.tracked(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, &b)| *a = *a + b),
            slot => *slot = Some(g),
        }
    }

    fn zip_map(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape(), data).expect("shapes checked at construction")
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match node.op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d { x, w, b, stride } => self.conv_backward(x, w, b, stride, g, grads)?,
            Op::Linear { x, w, b } => {
                let xv = self.value(x);
                let wv = self.value(w);
                let (batch, inp, out) = (xv.rows(), xv.row_len(), wv.rows());
                if self.tracked(x) {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(batch, out, inp, g.data(), false, wv.data(), false, T::zero(), &mut dx);
                    self.accum(grads, x, Tensor::new(xv.shape(), dx)?);
                }
                if self.tracked(w) {
                    let mut dw = vec![T::zero(); out * inp];
                    T::gemm(out, batch, inp, g.data(), true, xv.data(), false, T::zero(), &mut dw);
                    self.accum(grads, w, Tensor::new(wv.shape(), dw)?);
                }
                if self.tracked(b) {
                    let mut db = vec![T::zero(); out];
                    for r in 0..batch {
                        for (d, &v) in db.iter_mut().zip(g.row(r)) {
                            *d = *d + v;
                        }
                    }
                    self.accum(grads, b, Tensor::new(&[out], db)?);
                }
            }
            Op::Relu(x) => {
                let dx = Self::zip_map(g, y, |gv, yv| if yv > T::zero() { gv } else { T::zero() });
                self.accum(grads, x, dx);
            }
            Op::Tanh(x) => {
                let dx = Self::zip_map(g, y, |gv, yv| gv * (T::one() - yv * yv));
                self.accum(grads, x, dx);
            }
            Op::Exp(x) => {
                self.accum(grads, x, Self::zip_map(g, y, |gv, yv| gv * yv));
            }
            Op::Log { x, floor } => {
                let fl = T::lit(floor);
                let dx = Self::zip_map(g, self.value(x), |gv, xv| {
                    if xv > fl {
                        gv / xv
                    } else {
                        T::zero()
                    }
                });
                self.accum(grads, x, dx);
            }
            Op::Add(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, g.clone());
                self.accum(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.tracked(a) {
                    self.accum(grads, a, Self::zip_map(g, self.value(b), |gv, bv| gv * bv));
                }
                if self.tracked(b) {
                    self.accum(grads, b, Self::zip_map(g, self.value(a), |gv, av| gv * av));
                }
            }
            Op::Min(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let mut da = g.clone();
                let mut db = g.clone();
                for ((x, y), (ga, gb)) in av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .zip(da.data_mut().iter_mut().zip(db.data_mut()))
                {
                    if y < x {
                        *ga = T::zero();
                    } else {
                        *gb = T::zero();
                    }
                }
                self.accum(grads, a, da);
                self.accum(grads, b, db);
            }
            Op::Scale(x, c) => {
                let ct = T::lit(c);
                self.accum(grads, x, g.map(|v| v * ct));
            }
            Op::Offset(x) | Op::Reshape(x) => {
                let dx = g.clone().reshape(self.value(x).shape())?;
                self.accum(grads, x, dx);
            }
            Op::MulScalar { x, s } => {
                let sv = self.scalar(s);
                if self.tracked(x) {
                    self.accum(grads, x, g.map(|v| v * sv));
                }
                if self.tracked(s) {
                    let ds = crate::ndmath::tensor::dot(g.data(), self.value(x).data());
                    self.accum(grads, s, Tensor::new(self.value(s).shape(), vec![ds])?);
                }
            }
            Op::MatMulT(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let (n, d, m) = (av.rows(), av.row_len(), bv.rows());
                if self.tracked(a) {
                    let mut da = vec![T::zero(); n * d];
                    T::gemm(n, m, d, g.data(), false, bv.data(), false, T::zero(), &mut da);
                    self.accum(grads, a, Tensor::new(av.shape(), da)?);
                }
                if self.tracked(b) {
                    let mut db = vec![T::zero(); m * d];
                    T::gemm(m, n, d, g.data(), true, av.data(), false, T::zero(), &mut db);
                    self.accum(grads, b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::SoftmaxRows(x) => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = crate::ndmath::tensor::dot(yr, gr);
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - inner);
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::L2NormRows(x) => {
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = crate::ndmath::tensor::dot(yr, gr);
                    let n = node.aux[r];
                    for ((d, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *d = (gv - yv * inner) / n;
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::LayerNormRows(x) => {
                let d = T::lit(y.row_len() as f64);
                let mut dx = g.clone();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mean_g = gr.iter().copied().sum::<T>() / d;
                    let mean_gy = crate::ndmath::tensor::dot(yr, gr) / d;
                    let inv = node.aux[r];
                    for ((dv, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *dv = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accum(grads, x, dx);
            }
            Op::SumAll(x) => {
                let gv = g.data()[0];
                self.accum(grads, x, Tensor::full(self.value(x).shape(), gv));
            }
            Op::MeanAll(x) => {
                let xv = self.value(x);
                let gv = g.data()[0] / T::lit(xv.len() as f64);
                self.accum(grads, x, Tensor::full(xv.shape(), gv));
            }
            Op::SumRows(x) => {
                let xv = self.value(x);
                let w = xv.row_len();
                let dx = Tensor::from_fn(xv.shape(), |idx| g.data()[idx / w]);
                self.accum(grads, x, dx);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                let wa = av.row_len();
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(bv.len());
                for r in 0..g.rows() {
                    let row = g.row(r);
                    da.extend_from_slice(&row[..wa]);
                    db.extend_from_slice(&row[wa..]);
                }
                self.accum(grads, a, Tensor::new(av.shape(), da)?);
                self.accum(grads, b, Tensor::new(bv.shape(), db)?);
            }
        }
        Ok(())
    }

    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let geom = self.conv_geom(x, w, b, stride)?;
        let (patch, p) = (geom.patch(), geom.positions());
        let xv = self.value(x);
        let wv = self.value(w);
        let batch = xv.rows();
        let in_len = geom.c * geom.h * geom.w;
        let out_len = geom.o * p;
        let need_x = self.tracked(x);
        let need_w = self.tracked(w) || self.tracked(b);

        // Per-sample partials, reduced below in sample order.
        let partials = exec::map_range(batch, |i| {
            let gy = &g.data()[i * out_len..(i + 1) * out_len];
            let mut col = vec![T::zero(); patch * p];
            let mut dw = Vec::new();
            let mut db = Vec::new();
            if need_w {
                geom.im2col(&xv.data()[i * in_len..(i + 1) * in_len], &mut col);
                dw = vec![T::zero(); geom.o * patch];
                T::gemm(geom.o, p, patch, gy, false, &col, true, T::zero(), &mut dw);
                db = gy.chunks(p).map(|r| r.iter().copied().sum()).collect();
            }
            let mut dx = Vec::new();
            if need_x {
                T::gemm(patch, geom.o, p, wv.data(), true, gy, false, T::zero(), &mut col);
                dx = vec![T::zero(); in_len];
                geom.col2im(&col, &mut dx);
            }
            (dw, db, dx)
        });

        if need_w {
            let mut dw = vec![T::zero(); geom.o * patch];
            let mut db = vec![T::zero(); geom.o];
            for (pw, pb, _) in &partials {
                dw.iter_mut().zip(pw).for_each(|(a, &v)| *a = *a + v);
                db.iter_mut().zip(pb).for_each(|(a, &v)| *a = *a + v);
            }
            self.accum(grads, w, Tensor::new(wv.shape(), dw)?);
            self.accum(grads, b, Tensor::new(&[geom.o], db)?);
        }
        if need_x {
            let mut dx = Vec::with_capacity(batch * in_len);
            for (_, _, px) in partials {
                dx.extend(px);
            }
            self.accum(grads, x, Tensor::new(xv.shape(), dx)?);
        }
        Ok(())
    }
}
