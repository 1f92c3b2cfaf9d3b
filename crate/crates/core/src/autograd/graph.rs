//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly (values are computed as nodes
//! are pushed) and [`Graph::backward`] walks the tape in reverse, pushing
//! adjoints only into nodes that require a gradient.

use crate::autograd::conv::{conv_forward, conv_transpose_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::scalar::{matmul, MatRef, Scalar};
use crate::tensor::{check_logits, cross_entropy_row, gelu, normal_cdf, normal_pdf, sigmoid, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    /// `geom` is the adjoint convolution (layer output -> layer input).
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    /// Holds `gelu'(x)`, computed during the forward pass.
    Gelu {
        input: Var,
        deriv: Vec<T>,
    },
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
        rest: Vec<T>,
    },
    SquaredError {
        input: Var,
        target: Tensor<T>,
    },
    SumPerExample(Var),
    Mean(Var),
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<Var>,
    param_grads: bool,
}

/// Adjoints produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient of the root w.r.t. `v`; `None` if `v` does not require a
    /// gradient or does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// Graph whose parameter leaves are treated as constants.
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), param_grads: false }
    }

    /// Graph that also differentiates w.r.t. parameter leaves.
    pub fn with_param_grads() -> Self {
        Self { nodes: Vec::new(), params: Vec::new(), param_grads: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable leaf (e.g. the image under attack).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Model parameter; differentiable only on graphs built with
    /// [`Graph::with_param_grads`].
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let rg = self.param_grads;
        let v = self.push(t, Op::Leaf, rg);
        self.params.push(v);
        v
    }

    /// Parameter leaves in registration order.
    pub fn params(&self) -> &[Var] {
        &self.params
    }

    /// `x: N x C x H x W`, `w: O x C x k x k`, `b: O`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, wd) = dims4(self.shape(x))?;
        let &[o, wc, k, k2] = self.shape(w) else {
            return Err(Error::invalid(format!("conv weight must be rank 4, got {:?}", self.shape(w))));
        };
        if wc != c || k != k2 {
            return Err(Error::shape(&[o, c, k, k], self.shape(w)));
        }
        self.value(b).expect_shape(&[o])?;
        let geom = ConvGeom::conv(c, h, wd, o, k, stride, padding)?;
        let mut out = vec![T::zero(); n * geom.out_len()];
        let mut cols = vec![T::zero(); geom.patch_len() * geom.out_pixels()];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for (i, out_i) in out.chunks_mut(geom.out_len()).enumerate() {
                conv_forward(&geom, &xv[i * geom.in_len()..(i + 1) * geom.in_len()], wv, bv, &mut cols, out_i);
            }
        }
        let value = Tensor::new([n, o, geom.out_h, geom.out_w], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Conv2d { input: x, weight: w, bias: b, geom }, rg))
    }

    /// `x: N x Cin x H x W`, `w: Cin x Cout x k x k`, `b: Cout`. Output side
    /// is `(H - 1) * stride - 2 * padding + k + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (n, cin, h, wd) = dims4(self.shape(x))?;
        let &[wc, cout, k, k2] = self.shape(w) else {
            return Err(Error::invalid(format!("transposed conv weight must be rank 4, got {:?}", self.shape(w))));
        };
        if wc != cin || k != k2 {
            return Err(Error::shape(&[cin, cout, k, k], self.shape(w)));
        }
        if output_padding >= stride {
            return Err(Error::invalid("output_padding must be smaller than stride"));
        }
        self.value(b).expect_shape(&[cout])?;
        let side = |s: usize| ((s - 1) * stride + k + output_padding).checked_sub(2 * padding);
        let (Some(oh), Some(ow)) = (side(h), side(wd)) else {
            return Err(Error::invalid("transposed conv output would be empty"));
        };
        let geom = ConvGeom::conv(cout, oh, ow, cin, k, stride, padding)?;
        if geom.out_h != h || geom.out_w != wd {
            return Err(Error::invalid("inconsistent transposed conv geometry"));
        }
        let mut out = vec![T::zero(); n * geom.in_len()];
        let mut cols = vec![T::zero(); geom.patch_len() * geom.out_pixels()];
        {
            let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
            for (i, out_i) in out.chunks_mut(geom.in_len()).enumerate() {
                conv_transpose_forward(
                    &geom,
                    &xv[i * geom.out_len()..(i + 1) * geom.out_len()],
                    wv,
                    bv,
                    &mut cols,
                    out_i,
                );
            }
        }
        let value = Tensor::new([n, cout, oh, ow], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::ConvTranspose2d { input: x, weight: w, bias: b, geom }, rg))
    }

    /// `x: N x in`, `w: out x in`, `b: out`; returns `x * w^T + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let &[n, d] = self.shape(x) else {
            return Err(Error::invalid(format!("dense input must be rank 2, got {:?}", self.shape(x))));
        };
        let &[o, wd] = self.shape(w) else {
            return Err(Error::invalid(format!("dense weight must be rank 2, got {:?}", self.shape(w))));
        };
        if wd != d {
            return Err(Error::shape(&[o, d], self.shape(w)));
        }
        self.value(b).expect_shape(&[o])?;
        let mut out = Vec::with_capacity(n * o);
        for _ in 0..n {
            out.extend_from_slice(self.value(b).data());
        }
        matmul(
            T::one(),
            MatRef::new(self.value(x).data(), n, d),
            MatRef::new(self.value(w).data(), o, d).t(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new([n, o], out)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(value, Op::Dense { input: x, weight: w, bias: b }, rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let rg = self.rg(x);
        let xv = self.value(x);
        let (value, deriv) = if rg {
            let mut value = Vec::with_capacity(xv.len());
            let mut deriv = Vec::with_capacity(xv.len());
            for &v in xv.data() {
                let cdf = normal_cdf(v);
                value.push(v * cdf);
                deriv.push(cdf + v * normal_pdf(v));
            }
            (Tensor::new(xv.shape().to_vec(), value).expect("same shape"), deriv)
        } else {
            (xv.map(gelu), Vec::new())
        };
        self.push(value, Op::Gelu { input: x, deriv }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(value, Op::Scale(x, s), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Collapses all but the leading dimension.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = [t.batch_size(), t.example_len()];
        self.reshape(x, &shape)
    }

    /// Per-example softmax cross-entropy, shape `[N]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, k) = check_logits(self.value(logits), labels)?;
        let mut probs = vec![T::zero(); n * k];
        let mut rest = Vec::with_capacity(n);
        let mut losses = Vec::with_capacity(n);
        {
            let z = self.value(logits).data();
            for i in 0..n {
                let (loss, r) = cross_entropy_row(&z[i * k..(i + 1) * k], labels[i], &mut probs[i * k..(i + 1) * k]);
                losses.push(loss);
                rest.push(r);
            }
        }
        let rg = self.rg(logits);
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs, rest };
        Ok(self.push(Tensor::new([n], losses)?, op, rg))
    }

    /// Per-example mean squared error against a fixed target, shape `[N]`.
    pub fn squared_error(&mut self, x: Var, target: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        xv.expect_shape(target.shape())?;
        let n = xv.batch_size();
        let m = T::lit(xv.example_len().max(1) as f64);
        let losses = (0..n)
            .map(|i| xv.example(i).iter().zip(target.example(i)).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / m)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n], losses)?, Op::SquaredError { input: x, target: target.clone() }, rg))
    }

    /// Sums each example, shape `[N]`.
    pub fn sum_per_example(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.batch_size();
        let value = Tensor::from_fn([n], |i| xv.example(i).iter().copied().sum());
        let rg = self.rg(x);
        self.push(value, Op::SumPerExample(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = T::lit(xv.len().max(1) as f64);
        let value = Tensor::scalar(xv.data().iter().copied().sum::<T>() / m);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().copied().sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Grads<T>> {
        let root_val = &self.nodes[root.0].value;
        if root_val.len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must hold one element, has shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads { grads });
        }
        grads[root.0] = Some(Tensor::full(root_val.shape().to_vec(), T::one()));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.propagate(node, &dy, &mut grads)?;
        }
        Ok(Grads { grads })
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, geom } => {
                let xv = self.value(*input).data();
                let wv = self.value(*weight).data();
                let n = self.value(*input).batch_size();
                let (p, npix) = (geom.patch_len(), geom.out_pixels());
                let mut cols = vec![T::zero(); p * npix];
                let mut dcols = vec![T::zero(); p * npix];
                let mut dw = self.rg(*weight).then(|| vec![T::zero(); wv.len()]);
                let mut dx = self.rg(*input).then(|| vec![T::zero(); xv.len()]);
                let mut db = self.rg(*bias).then(|| vec![T::zero(); geom.out_c]);
                for i in 0..n {
                    let dy_i = &dy.data()[i * geom.out_len()..(i + 1) * geom.out_len()];
                    if let Some(db) = db.as_mut() {
                        for (c, row) in dy_i.chunks(npix).enumerate() {
                            db[c] += row.iter().copied().sum();
                        }
                    }
                    if let Some(dw) = dw.as_mut() {
                        geom.im2col(&xv[i * geom.in_len()..(i + 1) * geom.in_len()], &mut cols);
                        matmul(
                            T::one(),
                            MatRef::new(dy_i, geom.out_c, npix),
                            MatRef::new(&cols, p, npix).t(),
                            T::one(),
                            dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(
                            T::one(),
                            MatRef::new(wv, geom.out_c, p).t(),
                            MatRef::new(dy_i, geom.out_c, npix),
                            T::zero(),
                            &mut dcols,
                        );
                        geom.col2im(&dcols, &mut dx[i * geom.in_len()..(i + 1) * geom.in_len()]);
                    }
                }
                self.accumulate_raw(grads, *weight, dw)?;
                self.accumulate_raw(grads, *input, dx)?;
                self.accumulate_raw(grads, *bias, db)?;
            }
            Op::ConvTranspose2d { input, weight, bias, geom } => {
                let xv = self.value(*input).data();
                let wv = self.value(*weight).data();
                let n = self.value(*input).batch_size();
                let (p, npix) = (geom.patch_len(), geom.out_pixels());
                let plane = geom.in_h * geom.in_w;
                let mut dcols = vec![T::zero(); p * npix];
                let mut dw = self.rg(*weight).then(|| vec![T::zero(); wv.len()]);
                let mut dx = self.rg(*input).then(|| vec![T::zero(); xv.len()]);
                let mut db = self.rg(*bias).then(|| vec![T::zero(); geom.in_c]);
                for i in 0..n {
                    let dy_i = &dy.data()[i * geom.in_len()..(i + 1) * geom.in_len()];
                    if let Some(db) = db.as_mut() {
                        for (c, row) in dy_i.chunks(plane).enumerate() {
                            db[c] += row.iter().copied().sum();
                        }
                    }
                    if dw.is_none() && dx.is_none() {
                        continue;
                    }
                    geom.im2col(dy_i, &mut dcols);
                    if let Some(dw) = dw.as_mut() {
                        let x_i = &xv[i * geom.out_len()..(i + 1) * geom.out_len()];
                        matmul(
                            T::one(),
                            MatRef::new(x_i, geom.out_c, npix),
                            MatRef::new(&dcols, p, npix).t(),
                            T::one(),
                            dw,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dx_i = &mut dx[i * geom.out_len()..(i + 1) * geom.out_len()];
                        matmul(T::one(), MatRef::new(wv, geom.out_c, p), MatRef::new(&dcols, p, npix), T::zero(), dx_i);
                    }
                }
                self.accumulate_raw(grads, *weight, dw)?;
                self.accumulate_raw(grads, *input, dx)?;
                self.accumulate_raw(grads, *bias, db)?;
            }
            Op::Dense { input, weight, bias } => {
                let &[n, d] = self.shape(*input) else { unreachable!() };
                let o = self.shape(*weight)[0];
                if self.rg(*input) {
                    let mut dx = vec![T::zero(); n * d];
                    matmul(
                        T::one(),
                        MatRef::new(dy.data(), n, o),
                        MatRef::new(self.value(*weight).data(), o, d),
                        T::zero(),
                        &mut dx,
                    );
                    self.accumulate_raw(grads, *input, Some(dx))?;
                }
                if self.rg(*weight) {
                    let mut dw = vec![T::zero(); o * d];
                    matmul(
                        T::one(),
                        MatRef::new(dy.data(), n, o).t(),
                        MatRef::new(self.value(*input).data(), n, d),
                        T::zero(),
                        &mut dw,
                    );
                    self.accumulate_raw(grads, *weight, Some(dw))?;
                }
                if self.rg(*bias) {
                    let mut db = vec![T::zero(); o];
                    for row in dy.data().chunks(o) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.accumulate_raw(grads, *bias, Some(db))?;
                }
            }
            Op::Gelu { input, deriv } => {
                let d = dy.data().iter().zip(deriv).map(|(&g, &s)| g * s).collect();
                accumulate(grads, *input, Tensor::new(dy.shape().to_vec(), d)?);
            }
            Op::Sigmoid(x) => {
                let d = node.value.zip_map(dy, |s, g| g * s * (T::one() - s))?;
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.zip_map(self.value(*b), |g, v| g * v)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.zip_map(self.value(*a), |g, v| g * v)?);
                }
            }
            Op::Scale(x, s) => {
                let s = *s;
                accumulate(grads, *x, dy.map(|g| g * s));
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, dy.clone().reshape(self.shape(*x).to_vec())?);
            }
            Op::CrossEntropy { logits, labels, probs, rest } => {
                let k = self.shape(*logits)[1];
                let mut d = probs.clone();
                for (i, row) in d.chunks_mut(k).enumerate() {
                    let g = dy.data()[i];
                    row[labels[i]] = -rest[i];
                    for v in row.iter_mut() {
                        *v *= g;
                    }
                }
                accumulate(grads, *logits, Tensor::new(self.shape(*logits).to_vec(), d)?);
            }
            Op::SquaredError { input, target } => {
                let xv = self.value(*input);
                let m = xv.example_len().max(1);
                let two_over_m = T::lit(2.0 / m as f64);
                let mut d = Vec::with_capacity(xv.len());
                for (i, (&a, &b)) in xv.data().iter().zip(target.data()).enumerate() {
                    d.push(dy.data()[i / m] * two_over_m * (a - b));
                }
                accumulate(grads, *input, Tensor::new(xv.shape().to_vec(), d)?);
            }
            Op::SumPerExample(x) => {
                let xv = self.value(*x);
                let m = xv.example_len().max(1);
                let d = Tensor::from_fn(xv.shape().to_vec(), |j| dy.data()[j / m]);
                accumulate(grads, *x, d);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let g = dy.data()[0] / T::lit(xv.len().max(1) as f64);
                accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), g));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.shape().to_vec(), dy.data()[0]));
            }
        }
        Ok(())
    }

    fn accumulate_raw(&self, grads: &mut [Option<Tensor<T>>], v: Var, d: Option<Vec<T>>) -> Result<()> {
        if let Some(d) = d {
            accumulate(grads, v, Tensor::new(self.shape(v).to_vec(), d)?);
        }
        Ok(())
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}

fn dims4(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::invalid(format!("expected an N x C x H x W tensor, got {shape:?}"))),
    }
}
