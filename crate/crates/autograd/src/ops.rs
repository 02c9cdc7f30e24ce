//! Differentiable tensor operations.
//!
//! Every backward rule in this file is expressed with tensor operations, so
//! gradients produced under `create_graph` can be differentiated again.

use std::ops;

use ndarray::{Axis, Ix2, IxDyn, Slice};

use crate::error::Result;
use crate::tensor::{Array, Backward, Tensor};

/// Sums `a` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn sum_to_array(a: &Array, shape: &[usize]) -> Array {
    if a.shape() == shape {
        return a.clone();
    }
    let mut out = a.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (i, &s) in shape.iter().enumerate() {
        if s == 1 && out.shape()[i] != 1 {
            out = out.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    assert_eq!(out.shape(), shape, "cannot sum shape {:?} to {:?}", a.shape(), shape);
    out
}

fn keepdim_shape(shape: &[usize], axes: &[usize]) -> Vec<usize> {
    shape
        .iter()
        .enumerate()
        .map(|(i, &s)| if axes.contains(&i) { 1 } else { s })
        .collect()
}

fn sum_axes_array(a: &Array, axes: &[usize], keepdim: bool) -> Array {
    let mut sorted = axes.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut out = a.clone();
    for &ax in sorted.iter().rev() {
        out = out.sum_axis(Axis(ax));
    }
    if keepdim {
        out.into_shape_with_order(IxDyn(&keepdim_shape(a.shape(), &sorted)))
            .expect("keepdim reshape")
    } else {
        out
    }
}

/// Row-wise maximum along `axis`, keeping the reduced axis.
pub fn max_keepdim(a: &Array, axis: usize) -> Array {
    let m = a.fold_axis(Axis(axis), f64::NEG_INFINITY, |&acc, &x| acc.max(x));
    m.insert_axis(Axis(axis))
}

macro_rules! unary_op {
    ($name:ident, $label:literal, |$inputs:ident, $out:ident, $g:ident| $body:expr) => {
        struct $name;
        impl Backward for $name {
            fn name(&self) -> &'static str {
                $label
            }
            fn backward(&self, $inputs: &[Tensor], $out: &Tensor, $g: &Tensor) -> Result<Vec<Option<Tensor>>> {
                Ok(vec![Some($body)])
            }
        }
    };
}

struct AddOp;
impl Backward for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(inputs
            .iter()
            .map(|x| x.requires_grad().then(|| g.sum_to(x.shape())))
            .collect())
    }
}

struct SubOp;
impl Backward for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        Ok(vec![
            a.requires_grad().then(|| g.sum_to(a.shape())),
            b.requires_grad().then(|| g.sum_to(b.shape()).neg()),
        ])
    }
}

struct MulOp;
impl Backward for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        Ok(vec![
            a.requires_grad().then(|| g.mul(b).sum_to(a.shape())),
            b.requires_grad().then(|| g.mul(a).sum_to(b.shape())),
        ])
    }
}

struct DivOp;
impl Backward for DivOp {
    fn name(&self) -> &'static str {
        "div"
    }
    fn backward(&self, inputs: &[Tensor], out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        Ok(vec![
            a.requires_grad().then(|| g.div(b).sum_to(a.shape())),
            b.requires_grad().then(|| g.mul(out).div(b).sum_to(b.shape()).neg()),
        ])
    }
}

unary_op!(NegOp, "neg", |_i, _o, g| g.neg());
unary_op!(AddScalarOp, "add_scalar", |_i, _o, g| g.clone());
unary_op!(ExpOp, "exp", |_i, out, g| g.mul(out));
unary_op!(LnOp, "ln", |inputs, _o, g| g.div(&inputs[0]));
unary_op!(SqrtOp, "sqrt", |_i, out, g| g.div(out).scale(0.5));
unary_op!(TanhOp, "tanh", |_i, out, g| g.mul(&out.mul(out).neg().add_scalar(1.0)));
unary_op!(TransposeOp, "transpose", |_i, _o, g| g.t());

struct ScaleOp(f64);
impl Backward for ScaleOp {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.scale(self.0))])
    }
}

/// Elementwise multiplication by a constant mask (piecewise-linear activations).
struct MaskOp {
    name: &'static str,
    mask: Tensor,
}
impl Backward for MaskOp {
    fn name(&self) -> &'static str {
        self.name
    }
    fn backward(&self, _inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.mul(&self.mask))])
    }
}

struct MatMulOp;
impl Backward for MatMulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let (a, b) = (&inputs[0], &inputs[1]);
        Ok(vec![
            a.requires_grad().then(|| g.matmul(&b.t())),
            b.requires_grad().then(|| a.t().matmul(g)),
        ])
    }
}

struct SumToOp;
impl Backward for SumToOp {
    fn name(&self) -> &'static str {
        "sum_to"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.broadcast_to(inputs[0].shape()))])
    }
}

struct BroadcastToOp;
impl Backward for BroadcastToOp {
    fn name(&self) -> &'static str {
        "broadcast_to"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.sum_to(inputs[0].shape()))])
    }
}

struct ReshapeOp;
impl Backward for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.reshape(inputs[0].shape()))])
    }
}

struct SumAxesOp {
    keep_shape: Vec<usize>,
}
impl Backward for SumAxesOp {
    fn name(&self) -> &'static str {
        "sum_axes"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![Some(g.reshape(&self.keep_shape).broadcast_to(inputs[0].shape()))])
    }
}

struct NarrowOp {
    axis: usize,
    start: usize,
}
impl Backward for NarrowOp {
    fn name(&self) -> &'static str {
        "narrow"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let full = inputs[0].shape()[self.axis];
        Ok(vec![Some(g.embed(self.axis, self.start, full))])
    }
}

struct EmbedOp {
    axis: usize,
    start: usize,
}
impl Backward for EmbedOp {
    fn name(&self) -> &'static str {
        "embed"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let len = inputs[0].shape()[self.axis];
        Ok(vec![Some(g.narrow(self.axis, self.start, len))])
    }
}

struct ConcatOp {
    axis: usize,
}
impl Backward for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Tensor], _out: &Tensor, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let mut start = 0;
        let mut grads = Vec::with_capacity(inputs.len());
        for x in inputs {
            let len = x.shape()[self.axis];
            grads.push(x.requires_grad().then(|| g.narrow(self.axis, start, len)));
            start += len;
        }
        Ok(grads)
    }
}

impl Tensor {
    #[track_caller]
    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = self.value() + other.value();
        Tensor::from_op(v, vec![self.clone(), other.clone()], AddOp)
    }

    #[track_caller]
    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = self.value() - other.value();
        Tensor::from_op(v, vec![self.clone(), other.clone()], SubOp)
    }

    #[track_caller]
    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = self.value() * other.value();
        Tensor::from_op(v, vec![self.clone(), other.clone()], MulOp)
    }

    #[track_caller]
    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = self.value() / other.value();
        Tensor::from_op(v, vec![self.clone(), other.clone()], DivOp)
    }

    pub fn neg(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(|x| -x), vec![self.clone()], NegOp)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        Tensor::from_op(self.value() * c, vec![self.clone()], ScaleOp(c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        Tensor::from_op(self.value() + c, vec![self.clone()], AddScalarOp)
    }

    pub fn exp(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::exp), vec![self.clone()], ExpOp)
    }

    pub fn ln(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::ln), vec![self.clone()], LnOp)
    }

    pub fn sqrt(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::sqrt), vec![self.clone()], SqrtOp)
    }

    pub fn tanh(&self) -> Tensor {
        Tensor::from_op(self.value().mapv(f64::tanh), vec![self.clone()], TanhOp)
    }

    pub fn square(&self) -> Tensor {
        self.mul(self)
    }

    pub fn relu(&self) -> Tensor {
        self.leaky_relu(0.0)
    }

    /// `max(x, 0) + slope * min(x, 0)`; the derivative at 0 is taken as `slope`.
    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        let x = self.value();
        let v = x.mapv(|x| if x > 0.0 { x } else { slope * x });
        let mask = x.mapv(|x| if x > 0.0 { 1.0 } else { slope });
        let name = if slope == 0.0 { "relu" } else { "leaky_relu" };
        Tensor::from_op(v, vec![self.clone()], MaskOp { name, mask: Tensor::constant(mask) })
    }

    /// `max(x, floor)` with zero gradient where the floor is active.
    pub fn clamp_min(&self, floor: f64) -> Tensor {
        let x = self.value();
        let v = x.mapv(|x| x.max(floor));
        let mask = x.mapv(|x| if x > floor { 1.0 } else { 0.0 });
        Tensor::from_op(v, vec![self.clone()], MaskOp { name: "clamp_min", mask: Tensor::constant(mask) })
    }

    /// Matrix product of two rank-2 tensors.
    #[track_caller]
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self.value().view().into_dimensionality::<Ix2>().expect("matmul lhs must be rank 2");
        let b = other.value().view().into_dimensionality::<Ix2>().expect("matmul rhs must be rank 2");
        let v = a.dot(&b).into_dyn();
        Tensor::from_op(v, vec![self.clone(), other.clone()], MatMulOp)
    }

    /// Transpose of a rank-2 tensor.
    #[track_caller]
    pub fn t(&self) -> Tensor {
        assert_eq!(self.ndim(), 2, "t() expects rank 2, got {:?}", self.shape());
        let v = self.value().t().as_standard_layout().into_owned();
        Tensor::from_op(v, vec![self.clone()], TransposeOp)
    }

    #[track_caller]
    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|e| panic!("cannot reshape {:?} to {:?}: {e}", self.shape(), shape));
        Tensor::from_op(v, vec![self.clone()], ReshapeOp)
    }

    #[track_caller]
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        let v = self
            .value()
            .broadcast(IxDyn(shape))
            .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", self.shape(), shape))
            .to_owned();
        Tensor::from_op(v, vec![self.clone()], BroadcastToOp)
    }

    /// Reverse of broadcasting: sums leading and size-1 axes down to `shape`.
    #[track_caller]
    pub fn sum_to(&self, shape: &[usize]) -> Tensor {
        if self.shape() == shape {
            return self.clone();
        }
        Tensor::from_op(sum_to_array(self.value(), shape), vec![self.clone()], SumToOp)
    }

    pub fn sum_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let keep_shape = keepdim_shape(self.shape(), axes);
        let v = sum_axes_array(self.value(), axes, keepdim);
        Tensor::from_op(v, vec![self.clone()], SumAxesOp { keep_shape })
    }

    pub fn mean_axes(&self, axes: &[usize], keepdim: bool) -> Tensor {
        let n: usize = axes.iter().map(|&a| self.shape()[a]).product();
        self.sum_axes(axes, keepdim).scale(1.0 / n as f64)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&self) -> Tensor {
        let axes: Vec<usize> = (0..self.ndim()).collect();
        self.sum_axes(&axes, false)
    }

    pub fn mean(&self) -> Tensor {
        self.sum().scale(1.0 / self.len().max(1) as f64)
    }

    /// Sub-range `[start, start + len)` along `axis`.
    #[track_caller]
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.shape()[axis], "narrow out of range");
        let v = self
            .value()
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        Tensor::from_op(v, vec![self.clone()], NarrowOp { axis, start })
    }

    /// Places `self` at offset `start` along `axis` of a zero tensor with
    /// extent `full` on that axis.
    #[track_caller]
    pub fn embed(&self, axis: usize, start: usize, full: usize) -> Tensor {
        let len = self.shape()[axis];
        assert!(start + len <= full, "embed out of range");
        let mut shape = self.shape().to_vec();
        shape[axis] = full;
        let mut v = Array::zeros(IxDyn(&shape));
        v.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
            .assign(self.value());
        Tensor::from_op(v, vec![self.clone()], EmbedOp { axis, start })
    }

    /// Concatenation along `axis`.
    #[track_caller]
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let views: Vec<_> = parts.iter().map(|t| t.value().view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes must agree off-axis");
        Tensor::from_op(v, parts.to_vec(), ConcatOp { axis })
    }

    /// Numerically stable log-softmax along `axis`.
    pub fn log_softmax(&self, axis: usize) -> Tensor {
        let shift = Tensor::constant(max_keepdim(self.value(), axis));
        let shifted = self.sub(&shift);
        let lse = shifted.exp().sum_axes(&[axis], true).ln();
        shifted.sub(&lse)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let shift = Tensor::constant(max_keepdim(self.value(), axis));
        let e = self.sub(&shift).exp();
        let z = e.sum_axes(&[axis], true);
        e.div(&z)
    }
}

macro_rules! binary_impl {
    ($trait:ident, $method:ident) => {
        impl ops::$trait<&Tensor> for &Tensor {
            type Output = Tensor;
            #[track_caller]
            fn $method(self, rhs: &Tensor) -> Tensor {
                Tensor::$method(self, rhs)
            }
        }
    };
}

binary_impl!(Add, add);
binary_impl!(Sub, sub);
binary_impl!(Mul, mul);
binary_impl!(Div, div);

impl ops::Neg for &Tensor {
    type Output = Tensor;
    fn neg(self) -> Tensor {
        Tensor::neg(self)
    }
}
