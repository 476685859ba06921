//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it is evaluated. Leaves are either
//! constants ([`Graph::input`]) or named parameters ([`Graph::param`]);
//! [`Graph::backward`] walks the tape in reverse from a scalar root.

pub mod gradcheck;
mod kernels;

use indexmap::IndexMap;

pub use kernels::Padding;
use kernels::ConvGeom;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Relu(Var),
    LogClamped { x: Var, floor: T },
    SumTrailing { x: Var, scale: T },
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Dense { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Upsample2d { x: Var, factor: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: IndexMap<String, Var>,
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    by_node: Vec<Option<Tensor<T>>>,
    named: IndexMap<String, Tensor<T>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root w.r.t. `v`, if `v` requires grad.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable named parameter, in registration order.
    /// Parameters the root does not depend on get zeros.
    pub fn named(&self) -> &IndexMap<String, Tensor<T>> {
        &self.named
    }

    pub fn into_named(self) -> IndexMap<String, Tensor<T>> {
        self.named
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
        None => *slot = Some(contrib),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: IndexMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Unnamed leaf that may participate in differentiation.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Named parameter leaf. Frozen parameters (`trainable = false`) are
    /// evaluated but receive no gradient.
    pub fn param(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<Var> {
        if self.params.contains_key(name) {
            return Err(Error::invalid(format!("parameter {name} registered twice")));
        }
        let v = self.push(value, Op::Leaf, trainable);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(x);
        self.push(out, Op::Affine { x, scale }, rg)
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| {
            // split on sign so exp never overflows
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        });
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(out, Op::Relu(x), rg)
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log_clamped(&mut self, x: Var, floor: T) -> Var {
        let out = self.value(x).map(|v| v.max(floor).ln());
        let rg = self.rg(x);
        self.push(out, Op::LogClamped { x, floor }, rg)
    }

    /// Sum over the trailing `axes` axes. Reducing every axis yields shape `[1]`.
    pub fn sum_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        self.reduce_trailing(x, axes, false)
    }

    pub fn mean_trailing(&mut self, x: Var, axes: usize) -> Result<Var> {
        self.reduce_trailing(x, axes, true)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        self.reduce_trailing(x, rank, false).expect("full reduction is always valid")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let rank = self.shape(x).len();
        self.reduce_trailing(x, rank, true).expect("full reduction is always valid")
    }

    fn reduce_trailing(&mut self, x: Var, axes: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axes == 0 || axes > shape.len() {
            return Err(Error::invalid(format!(
                "cannot reduce {axes} trailing axes of shape {shape:?}"
            )));
        }
        let keep = shape.len() - axes;
        let inner: usize = shape[keep..].iter().product();
        let mut out_shape = shape[..keep].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let scale = if mean {
            T::one() / T::from_f64(inner as f64)
        } else {
            T::one()
        };
        let data = self
            .value(x)
            .data()
            .chunks(inner)
            .map(|c| c.iter().copied().sum::<T>() * scale)
            .collect();
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::SumTrailing { x, scale }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Affine layer: `x [n, in]`, `w [out, in]`, `b [out]` gives `x w^T + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[n, fan_in], &[fan_out, w_in]) = (xs.as_slice(), ws.as_slice()) else {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        };
        if fan_in != w_in {
            return Err(Error::ShapeMismatch {
                op: "dense",
                lhs: xs,
                rhs: ws,
            });
        }
        let mut data = match b {
            Some(b) => {
                same_shape("dense bias", self.shape(b), &[fan_out])?;
                let bias = self.value(b).data();
                (0..n).flat_map(|_| bias.iter().copied()).collect()
            }
            None => vec![T::zero(); n * fan_out],
        };
        T::gemm(
            n,
            fan_in,
            fan_out,
            T::one(),
            self.value(x).data(),
            (fan_in as isize, 1),
            self.value(w).data(),
            (1, fan_in as isize),
            T::one(),
            &mut data,
            (fan_out as isize, 1),
        );
        let out = Tensor::new(vec![n, fan_out], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Dense { x, w, b }, rg))
    }

    /// 2-D cross-correlation. `x` is `[c, h, w]` or `[n, c, h, w]`, the
    /// kernel `[c_out, c_in, kh, kw]` and the optional bias `[c_out]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (geom, batched) = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            same_shape("conv2d bias", self.shape(b), &[geom.c_out])?;
        }
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(geom.output_shape(batched), data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// Non-overlapping `size x size` max pooling over the last two axes.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = split_planes(&shape, "max_pool2d")?;
        if size == 0 || h % size != 0 || w % size != 0 {
            return Err(Error::invalid(format!(
                "max_pool2d window {size} does not tile spatial extent {h}x{w}"
            )));
        }
        let (data, argmax) = kernels::max_pool2d_forward(self.value(x).data(), planes, h, w, size);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h / size;
        out_shape[r - 1] = w / size;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2d { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling of the last two axes by `factor`.
    pub fn upsample_nearest2d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (planes, h, w) = split_planes(&shape, "upsample_nearest2d")?;
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be at least 1"));
        }
        let data = kernels::upsample_nearest_forward(self.value(x).data(), planes, h, w, factor);
        let mut out_shape = shape;
        let r = out_shape.len();
        out_shape[r - 2] = h * factor;
        out_shape[r - 1] = w * factor;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2d { x, factor }, rg))
    }

    /// Reverse-mode sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {root_shape:?}"
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.rg(root) {
            grads[root.0] = Some(vec![T::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let by_node: Vec<Option<Tensor<T>>> = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                n.requires_grad.then(|| {
                    let data = g.unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                    Tensor::new(n.value.shape().to_vec(), data).expect("gradient shape")
                })
            })
            .collect();
        let named = self
            .params
            .iter()
            .filter_map(|(name, v)| by_node[v.0].clone().map(|g| (name.clone(), g)))
            .collect();
        Ok(Gradients { by_node, named })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut send = |v: Var, contrib: Vec<T>| {
            if self.rg(v) {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.rg(*a) {
                    send(*a, g.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                }
                if self.rg(*b) {
                    send(*b, g.iter().zip(va).map(|(&g, &x)| g * x).collect());
                }
            }
            Op::Affine { x, scale } => send(*x, g.iter().map(|&g| g * *scale).collect()),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(&g, &y)| g * y * (T::one() - y)).collect());
            }
            Op::Relu(x) => {
                let xv = val(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::LogClamped { x, floor } => {
                let xv = val(*x);
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(&g, &v)| if v > *floor { g / v } else { T::zero() })
                        .collect(),
                );
            }
            Op::SumTrailing { x, scale } => {
                let n = self.nodes[x.0].value.numel();
                let inner = n / g.len();
                let mut dx = Vec::with_capacity(n);
                for &gi in g {
                    dx.extend(std::iter::repeat_n(gi * *scale, inner));
                }
                send(*x, dx);
            }
            Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let chunk = self.shape(v)[*axis] * inner;
                    if self.rg(v) {
                        let mut dv = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            dv.extend_from_slice(&g[o * total + offset..o * total + offset + chunk]);
                        }
                        send(v, dv);
                    }
                    offset += chunk;
                }
            }
            Op::Dense { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fan_in) = (xs[0], xs[1]);
                let fan_out = self.shape(*w)[0];
                if self.rg(*x) {
                    let mut dx = vec![T::zero(); n * fan_in];
                    T::gemm(
                        n,
                        fan_out,
                        fan_in,
                        T::one(),
                        g,
                        (fan_out as isize, 1),
                        val(*w),
                        (fan_in as isize, 1),
                        T::zero(),
                        &mut dx,
                        (fan_in as isize, 1),
                    );
                    send(*x, dx);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::zero(); fan_out * fan_in];
                    T::gemm(
                        fan_out,
                        n,
                        fan_in,
                        T::one(),
                        g,
                        (1, fan_out as isize),
                        val(*x),
                        (fan_in as isize, 1),
                        T::zero(),
                        &mut dw,
                        (fan_in as isize, 1),
                    );
                    send(*w, dw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); fan_out];
                        for row in g.chunks(fan_out) {
                            db.iter_mut().zip(row).for_each(|(d, &r)| *d += r);
                        }
                        send(*b, db);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_dx = self.rg(*x);
                let (dx, dk, db) = kernels::conv2d_backward(geom, val(*x), val(*w), g, need_dx);
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                send(*w, dk);
                if let Some(b) = b {
                    send(*b, db);
                }
            }
            Op::MaxPool2d { x, argmax } => {
                let mut dx = vec![T::zero(); self.nodes[x.0].value.numel()];
                for (&idx, &gi) in argmax.iter().zip(g) {
                    dx[idx] += gi;
                }
                send(*x, dx);
            }
            Op::Upsample2d { x, factor } => {
                let (planes, h, w) = split_planes(self.shape(*x), "upsample").expect("checked");
                send(*x, kernels::upsample_nearest_backward(g, planes, h, w, *factor));
            }
        }
    }
}

fn split_planes(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![],
        });
    }
    let r = shape.len();
    Ok((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

#[cfg(test)]
mod tests;
