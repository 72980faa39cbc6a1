//! Dense rank-4 tensors with reverse-mode automatic differentiation.
//!
//! Every value in the toolkit is a [`Tensor`]: a row-major `[N, C, H, W]`
//! buffer of `f32`. Operations record a computation graph on the fly;
//! [`Tensor::backward`] walks it in reverse topological order and
//! accumulates `d(loss)/d(leaf)` into each tracked leaf. Tensors are
//! immutable after construction except for that gradient accumulation.

use alloc::boxed::Box;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::shape::Shape;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Computes the gradient contributions to each parent, given the gradient
/// with respect to this node's output. Returns one entry per parent, in
/// parent order; `None` for parents that do not require gradients.
type GradFn = Box<dyn Fn(&[f32]) -> Vec<Option<Vec<f32>>>>;

struct Step {
    parents: Vec<Tensor>,
    grad_fn: GradFn,
}

struct Node {
    id: u64,
    shape: Shape,
    data: Vec<f32>,
    requires_grad: bool,
    /// Persistent accumulated gradient; only leaves receive one.
    grad: RefCell<Option<Vec<f32>>>,
    /// `None` for leaves.
    step: Option<Step>,
}

#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl core::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("is_leaf", &self.node.step.is_none())
            .finish()
    }
}

impl Tensor {
    // ── Construction ────────────────────────────────────────────────

    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Self::leaf(shape, data, false))
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::leaf(shape, vec![0.0; shape.numel()], false)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self::leaf(shape, vec![value; shape.numel()], false)
    }

    pub fn scalar(value: f32) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// A leaf copy of this tensor that participates in gradient tracking.
    pub fn tracked(&self) -> Tensor {
        Self::leaf(self.shape(), self.data().to_vec(), true)
    }

    /// A constant leaf copy: cuts the tensor out of the gradient graph.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.shape(), self.data().to_vec(), false)
    }

    fn leaf(shape: Shape, data: Vec<f32>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                step: None,
            }),
        }
    }

    /// Builds an op output node. If no parent requires gradients the result
    /// is a plain constant and the graph edge is dropped.
    pub(crate) fn from_op(shape: Shape, data: Vec<f32>, parents: Vec<Tensor>, grad_fn: GradFn) -> Tensor {
        debug_assert_eq!(data.len(), shape.numel());
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let step = if requires_grad {
            Some(Step { parents, grad_fn })
        } else {
            None
        };
        Tensor {
            node: Rc::new(Node {
                id: fresh_id(),
                shape,
                data,
                requires_grad,
                grad: RefCell::new(None),
                step,
            }),
        }
    }

    // ── Accessors ───────────────────────────────────────────────────

    pub fn shape(&self) -> Shape {
        self.node.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.step.is_none()
    }

    /// Accumulated gradient of a leaf, if `backward` has reached it.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Value of a scalar tensor.
    pub fn item(&self) -> f32 {
        debug_assert!(self.shape().is_scalar());
        self.node.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data().iter().all(|v| v.is_finite())
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Every tracked leaf reachable
    /// from `self` receives `d(self)/d(leaf)` added into its gradient
    /// buffer; calling `backward` again accumulates on top.
    pub fn backward(&self) -> Result<()> {
        if !self.shape().is_scalar() {
            return Err(Error::NonScalarLoss(self.shape()));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Iterative post-order DFS: parents end up before children, so the
        // reversed order propagates from the loss down to the leaves.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: BTreeSet<u64> = BTreeSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.node.id);
        while let Some((t, child_idx)) = stack.pop() {
            let parents: &[Tensor] = match &t.node.step {
                Some(step) => &step.parents,
                None => &[],
            };
            if child_idx < parents.len() {
                let next = parents[child_idx].clone();
                stack.push((t, child_idx + 1));
                if next.requires_grad() && visited.insert(next.node.id) {
                    stack.push((next, 0));
                }
            } else {
                order.push(t);
            }
        }

        let mut pass: BTreeMap<u64, Vec<f32>> = BTreeMap::new();
        pass.insert(self.node.id, vec![1.0]);

        for t in order.iter().rev() {
            let Some(grad_out) = pass.remove(&t.node.id) else {
                continue;
            };
            if let Some(step) = &t.node.step {
                let contributions = (step.grad_fn)(&grad_out);
                debug_assert_eq!(contributions.len(), step.parents.len());
                for (parent, contrib) in step.parents.iter().zip(contributions) {
                    let Some(contrib) = contrib else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(contrib.len(), parent.shape().numel());
                    match pass.get_mut(&parent.node.id) {
                        Some(acc) => add_into(acc, &contrib),
                        None => {
                            pass.insert(parent.node.id, contrib);
                        }
                    }
                }
            } else {
                // Tracked leaf: fold the pass gradient into persistent storage.
                let mut slot = t.node.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => add_into(acc, &grad_out),
                    None => *slot = Some(grad_out),
                }
            }
        }
        Ok(())
    }

    // ── Elementwise arithmetic ──────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = zip_map(self.data(), rhs.data(), |a, b| a + b);
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = zip_map(self.data(), rhs.data(), |a, b| a - b);
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(|g| {
                vec![
                    Some(g.to_vec()),
                    Some(g.iter().map(|v| -v).collect()),
                ]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = zip_map(self.data(), rhs.data(), |a, b| a * b);
        let lhs_c = self.clone();
        let rhs_c = rhs.clone();
        Ok(Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                vec![
                    Some(zip_map(g, rhs_c.data(), |g, b| g * b)),
                    Some(zip_map(g, lhs_c.data(), |g, a| g * a)),
                ]
            }),
        ))
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        let data = self.data().iter().map(|v| v * factor).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * factor).collect())]),
        )
    }

    pub fn add_scalar(&self, value: f32) -> Tensor {
        let data = self.data().iter().map(|v| v + value).collect();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    // ── Activations ─────────────────────────────────────────────────

    /// `y = x` for `x >= 0`, `slope * x` otherwise. `slope` must lie in (0, 1).
    pub fn leaky_relu(&self, slope: f32) -> Tensor {
        debug_assert!(slope > 0.0 && slope < 1.0);
        let data = self
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(zip_map(g, x.data(), |g, x| {
                    if x >= 0.0 {
                        g
                    } else {
                        slope * g
                    }
                }))]
            }),
        )
    }

    /// Numerically stable logistic function, `1 / (1 + e^(-x))`.
    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        let x = self.clone();
        Tensor::from_op(
            self.shape(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                vec![Some(zip_map(g, x.data(), |g, x| {
                    let y = sigmoid_scalar(x);
                    g * y * (1.0 - y)
                }))]
            }),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all elements, as a scalar tensor. Accumulates in f64 so that
    /// large reductions (losses) stay stable under finite-difference probing.
    pub fn sum(&self) -> Tensor {
        let total = self.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        let shape = self.shape();
        Tensor::from_op(
            Shape::scalar(),
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; shape.numel()])]),
        )
    }

    /// Mean of all elements, as a scalar tensor.
    pub fn mean(&self) -> Tensor {
        let n = self.shape().numel() as f32;
        self.sum().scale(1.0 / n)
    }

    // ── Structural ops ──────────────────────────────────────────────

    /// Concatenates tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let first = parts[0].shape();
        let mut c_total = 0;
        for p in parts {
            let s = p.shape();
            if !s.same_spatial(&first) {
                return Err(Error::AxisMismatch {
                    context: "concat_channels",
                    axis: "spatial extents",
                    expected: first.h * first.w,
                    got: s.h * s.w,
                });
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let plane = first.plane();
        let mut data = vec![0.0f32; out_shape.numel()];
        for n in 0..first.n {
            let mut c_off = 0;
            for p in parts {
                let s = p.shape();
                let src = &p.data()[n * s.c * plane..(n + 1) * s.c * plane];
                let dst_start = (n * c_total + c_off) * plane;
                data[dst_start..dst_start + s.c * plane].copy_from_slice(src);
                c_off += s.c;
            }
        }
        let channel_counts: Vec<usize> = parts.iter().map(|p| p.shape().c).collect();
        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let n_batch = first.n;
        Ok(Tensor::from_op(
            out_shape,
            data,
            parents,
            Box::new(move |g| {
                let mut out: Vec<Option<Vec<f32>>> = channel_counts
                    .iter()
                    .map(|&c| Some(vec![0.0f32; n_batch * c * plane]))
                    .collect();
                for n in 0..n_batch {
                    let mut c_off = 0;
                    for (i, &c) in channel_counts.iter().enumerate() {
                        let src_start = (n * c_total + c_off) * plane;
                        let dst = out[i].as_mut().unwrap();
                        dst[n * c * plane..(n + 1) * c * plane]
                            .copy_from_slice(&g[src_start..src_start + c * plane]);
                        c_off += c;
                    }
                }
                out
            }),
        ))
    }

    /// Channels `start..end` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let s = self.shape();
        if end > s.c || start >= end {
            return Err(Error::AxisMismatch {
                context: "slice_channels",
                axis: "channels",
                expected: s.c,
                got: end,
            });
        }
        let plane = s.plane();
        let c_out = end - start;
        let out_shape = Shape::new(s.n, c_out, s.h, s.w);
        let mut data = vec![0.0f32; out_shape.numel()];
        for n in 0..s.n {
            let src_start = (n * s.c + start) * plane;
            data[n * c_out * plane..(n + 1) * c_out * plane]
                .copy_from_slice(&self.data()[src_start..src_start + c_out * plane]);
        }
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0f32; s.numel()];
                for n in 0..s.n {
                    let dst_start = (n * s.c + start) * plane;
                    dx[dst_start..dst_start + c_out * plane]
                        .copy_from_slice(&g[n * c_out * plane..(n + 1) * c_out * plane]);
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Stacks single-sample tensors along the batch axis (constant result).
    pub fn stack_batch(parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty());
        let s0 = parts[0].shape();
        let mut data = Vec::with_capacity(s0.numel() * parts.len());
        let mut n_total = 0;
        for p in parts {
            let s = p.shape();
            if s.c != s0.c || s.h != s0.h || s.w != s0.w {
                return Err(Error::AxisMismatch {
                    context: "stack_batch",
                    axis: "channels or spatial extents",
                    expected: s0.c * s0.h * s0.w,
                    got: s.c * s.h * s.w,
                });
            }
            data.extend_from_slice(p.data());
            n_total += s.n;
        }
        Tensor::from_vec(Shape::new(n_total, s0.c, s0.h, s0.w), data)
    }

    /// One sample of a batch as a new constant tensor.
    pub fn select_batch(&self, n: usize) -> Tensor {
        let s = self.shape();
        debug_assert!(n < s.n);
        let per = s.c * s.plane();
        let data = self.data()[n * per..(n + 1) * per].to_vec();
        Self::leaf(Shape::new(1, s.c, s.h, s.w), data, false)
    }

    // ── Padding helpers (constant tensors, used outside the graph) ──

    /// Reflect-pads the spatial axes (PyTorch `reflect` convention: the
    /// border row/column is not repeated). Pad must be smaller than the
    /// corresponding extent. The result is a constant.
    pub fn reflect_pad(&self, left: usize, right: usize, top: usize, bottom: usize) -> Tensor {
        let s = self.shape();
        debug_assert!(left < s.w && right < s.w && top < s.h && bottom < s.h);
        let oh = s.h + top + bottom;
        let ow = s.w + left + right;
        let out_shape = Shape::new(s.n, s.c, oh, ow);
        let mut data = vec![0.0f32; out_shape.numel()];
        let reflect = |i: isize, len: usize| -> usize {
            let len = len as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= len {
                i = 2 * (len - 1) - i;
            }
            i as usize
        };
        for n in 0..s.n {
            for c in 0..s.c {
                for oy in 0..oh {
                    let iy = reflect(oy as isize - top as isize, s.h);
                    for ox in 0..ow {
                        let ix = reflect(ox as isize - left as isize, s.w);
                        data[out_shape.at(n, c, oy, ox)] = self.data()[s.at(n, c, iy, ix)];
                    }
                }
            }
        }
        Self::leaf(out_shape, data, false)
    }

    /// Crops the spatial axes to `[top..top+h, left..left+w]` (constant result).
    pub fn crop(&self, left: usize, top: usize, w: usize, h: usize) -> Tensor {
        let s = self.shape();
        debug_assert!(left + w <= s.w && top + h <= s.h);
        let out_shape = Shape::new(s.n, s.c, h, w);
        let mut data = vec![0.0f32; out_shape.numel()];
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..h {
                    let src = s.at(n, c, top + y, left);
                    let dst = out_shape.at(n, c, y, 0);
                    data[dst..dst + w].copy_from_slice(&self.data()[src..src + w]);
                }
            }
        }
        Self::leaf(out_shape, data, false)
    }
}

#[inline]
fn sigmoid_scalar(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::expf(-x))
    } else {
        let e = libm::expf(x);
        e / (1.0 + e)
    }
}

fn same_shape(context: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok(());
    }
    let (axis, expected, got) = if sa.n != sb.n {
        ("batch", sa.n, sb.n)
    } else if sa.c != sb.c {
        ("channels", sa.c, sb.c)
    } else if sa.h != sb.h {
        ("height", sa.h, sb.h)
    } else {
        ("width", sa.w, sb.w)
    };
    Err(Error::AxisMismatch {
        context,
        axis,
        expected,
        got,
    })
}

fn zip_map(a: &[f32], b: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    a.iter().zip(b).map(|(&a, &b)| f(a, b)).collect()
}

fn add_into(acc: &mut [f32], src: &[f32]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0; 3]).unwrap_err();
        assert_eq!(err, Error::DataLength { expected: 4, got: 3 });
    }

    #[test]
    fn sum_backward_is_all_ones() {
        let x = t(Shape::new(1, 2, 2, 2), &[1.0, -2.0, 3.0, 0.5, 4.0, 5.0, -1.0, 2.0]).tracked();
        x.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 8]);
    }

    #[test]
    fn half_square_sum_backward_is_identity() {
        let x = t(Shape::new(1, 1, 2, 2), &[1.0, -2.0, 3.0, 0.5]).tracked();
        let loss = x.mul(&x).unwrap().sum().scale(0.5);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -2.0, 3.0, 0.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).tracked();
        let loss = x.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).tracked();
        assert!(matches!(x.backward(), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn mul_with_shared_parent_accumulates_both_sides() {
        // d/dx of sum(x * x) = 2x.
        let x = t(Shape::new(1, 1, 1, 3), &[1.0, -2.0, 3.0]).tracked();
        x.mul(&x).unwrap().sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn leaky_relu_values_and_gradient() {
        let x = t(Shape::new(1, 1, 1, 3), &[2.0, -2.0, -1.0]).tracked();
        let y = x.leaky_relu(0.1);
        assert_eq!(y.data(), &[2.0, -0.2, -0.1]);
        y.sum().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.1, 0.1]);
    }

    #[test]
    fn sigmoid_values_and_gradient() {
        let x = t(Shape::new(1, 1, 1, 3), &[0.0, 40.0, -40.0]).tracked();
        let y = x.sigmoid();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < f32::EPSILON);
        assert!(y.data()[2] >= 0.0 && y.data()[2] < 1e-15);
        y.sum().backward().unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 0.25).abs() < 1e-7); // sigma'(0) = 0.25
    }

    #[test]
    fn detach_blocks_gradient() {
        let x = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).tracked();
        let d = x.detach();
        assert!(!d.requires_grad());
        d.sum().backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn concat_slice_round_trip_and_gradient() {
        let a = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]).tracked();
        let b = t(Shape::new(1, 2, 1, 2), &[3.0, 4.0, 5.0, 6.0]).tracked();
        let cat = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mid = cat.slice_channels(1, 3).unwrap();
        assert_eq!(mid.data(), &[3.0, 4.0, 5.0, 6.0]);
        mid.sum().backward().unwrap();
        assert!(a.grad().unwrap().iter().all(|&g| g == 0.0));
        assert!(b.grad().unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn reflect_pad_then_crop_is_identity() {
        let x = t(Shape::new(1, 1, 2, 3), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let padded = x.reflect_pad(1, 1, 1, 1);
        assert_eq!(padded.shape(), Shape::new(1, 1, 4, 5));
        // Row -1 reflects to row 1, column -1 to column 1.
        assert_eq!(padded.data()[0], 5.0);
        let back = padded.crop(1, 1, 3, 2);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn stack_and_select_batch() {
        let a = t(Shape::new(1, 1, 1, 2), &[1.0, 2.0]);
        let b = t(Shape::new(1, 1, 1, 2), &[3.0, 4.0]);
        let s = Tensor::stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 1, 2));
        assert_eq!(s.select_batch(1).data(), &[3.0, 4.0]);
    }
}
