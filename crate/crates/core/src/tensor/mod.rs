//! Dense 4-D tensors with tape-free reverse-mode differentiation.
//!
//! Every tensor is `(batch, channels, height, width)` in row-major order.
//! Operations that involve a tensor with `requires_grad` record a backward
//! closure on their output; [`Tensor::backward`] walks the resulting DAG in
//! reverse topological order and accumulates gradients additively.
//!
//! The scalar type is generic: models train in `f32` and gradient checks run
//! the same code in `f64`.

mod conv;
mod dump;
mod gradcheck;
mod norm;
mod ops;
mod pool;
mod resize;

use std::cell::{Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};
use std::rc::Rc;

use crate::error::{shape_err, CtdError, Result};

pub use conv::{conv2d, conv2d_direct, conv2d_with, Conv2dGeometry, ConvAlgo};
pub use dump::{format_dump, parse_dump, read_dump, write_dump};
pub use gradcheck::{grad_check, probe_sum, GradCheckReport, DEFAULT_FLOOR};
pub use norm::{batch_norm, BatchNormStats};
pub use ops::{
    add, concat_channels, mean_all, mul, mul_broadcast, relu, scale, sigmoid, sub, sum_all,
};
pub use pool::{channel_pool, global_avg_pool, pool2d, PoolKind};
pub use resize::bilinear_upsample;

/// Scalar element type usable inside tensors.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::iter::Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + fmt::Debug
    + fmt::Display
    + fmt::LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// Strides and extents must describe memory inside the given slices.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(x).expect("literal fits scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix product `c (m×n) = op(a) · op(b) (+ c when accumulate)`.
///
/// `a` is stored `m×k` (or `k×m` when `trans_a`), `b` is `k×n` (or `n×k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the asserts above bound every index touched by these strides.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Extents of a 4-D tensor.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(b: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { b, c, h, w }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub fn numel(&self) -> usize {
        self.b * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.b, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.b == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(shape_err!("all extents must be >= 1, got {self}"));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.b, self.c, self.h, self.w)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

/// Backward rule of one recorded operation.
pub(crate) trait GradFn<T: Float> {
    fn inputs(&self) -> Vec<Tensor<T>>;

    /// Accumulate input gradients given the gradient of `out`.
    fn apply(&self, out: &Tensor<T>, grad_out: &[T]);
}

struct Inner<T: Float> {
    shape: Shape,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<Box<dyn GradFn<T>>>,
}

/// Reference-counted handle to a dense tensor node.
pub struct Tensor<T: Float> {
    inner: Rc<Inner<T>>,
}

impl<T: Float> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Float> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<T: Float> Tensor<T> {
    fn build(
        shape: Shape,
        data: Vec<T>,
        requires_grad: bool,
        grad_fn: Option<Box<dyn GradFn<T>>>,
    ) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Untracked tensor from raw data.
    pub fn new(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(shape_err!(
                "data length {} does not match shape {shape} ({} elements)",
                data.len(),
                shape.numel()
            ));
        }
        Ok(Self::build(shape, data, false, None))
    }

    /// Tracked leaf tensor (a learnable parameter or a probed input).
    pub fn leaf(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.shape(), t.into_vec(), true, None))
    }

    pub fn zeros(shape: impl Into<Shape>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Shape>, value: T) -> Self {
        let shape = shape.into();
        Self::build(shape, vec![value; shape.numel()], false, None)
    }

    pub fn from_fn(shape: impl Into<Shape>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let data = (0..shape.numel()).map(&mut f).collect();
        Self::build(shape, data, false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    /// Output of a recorded op. The backward rule is kept only when some
    /// input is tracked.
    pub(crate) fn from_op(shape: Shape, data: Vec<T>, grad_fn: Box<dyn GradFn<T>>) -> Self {
        let tracked = grad_fn.inputs().iter().any(|t| t.requires_grad());
        if tracked {
            Self::build(shape, data, true, Some(grad_fn))
        } else {
            Self::build(shape, data, false, None)
        }
    }

    pub fn shape(&self) -> Shape {
        self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.grad_fn.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.inner.data.borrow()
    }

    /// Mutable access to the values, used for parameter updates and
    /// finite-difference probes. Nodes recorded downstream are not refreshed.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.inner.data.borrow().clone()
    }

    fn into_vec(self) -> Vec<T> {
        self.to_vec()
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[T]) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    pub(crate) fn accumulate_grad_vec(&self, g: Vec<T>) {
        if !self.inner.requires_grad {
            return;
        }
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g),
        }
    }

    /// Copy of the values with no history.
    pub fn detach(&self) -> Self {
        Self::build(self.shape(), self.to_vec(), false, None)
    }

    pub fn item(&self) -> Result<T> {
        if !self.shape().is_scalar() {
            return Err(shape_err!(
                "item() needs a 1x1x1x1 tensor, got {}",
                self.shape()
            ));
        }
        Ok(self.data()[0])
    }

    pub fn get(&self, b: usize, c: usize, h: usize, w: usize) -> T {
        let s = self.shape();
        self.data()[((b * s.c + c) * s.h + h) * s.w + w]
    }

    /// Values of one `(batch, channel)` plane.
    pub fn plane(&self, b: usize, c: usize) -> Vec<T> {
        let s = self.shape();
        let start = (b * s.c + c) * s.plane();
        self.data()[start..start + s.plane()].to_vec()
    }

    pub fn same_values(&self, other: &Tensor<T>) -> bool {
        self.shape() == other.shape() && *self.data() == *other.data()
    }

    /// Converts the values to another scalar type; the result is untracked.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        let data = self
            .data()
            .iter()
            .map(|&v| U::lit(v.to_f64_lossy()))
            .collect();
        Tensor::build(self.shape(), data, false, None)
    }

    /// Reverse-mode sweep seeded with d(self)/d(self) = 1.
    pub fn backward(&self) -> Result<()> {
        if !self.shape().is_scalar() {
            return Err(CtdError::Usage(format!(
                "backward() needs a scalar loss, got shape {}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Err(CtdError::Usage(
                "backward() called on a tensor that does not require grad".into(),
            ));
        }
        let order = self.topo_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let Some(grad_fn) = node.inner.grad_fn.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow().clone();
            if let Some(g) = grad {
                grad_fn.apply(node, &g);
            }
        }
        Ok(())
    }

    /// Post-order over tracked ancestors.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut visited: HashSet<*const Inner<T>> = HashSet::new();
        let mut order = Vec::new();
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            let key = Rc::as_ptr(&node.inner);
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(key) {
                continue;
            }
            stack.push((node.clone(), true));
            if let Some(f) = node.inner.grad_fn.as_ref() {
                for input in f.inputs() {
                    if input.requires_grad() && !visited.contains(&Rc::as_ptr(&input.inner)) {
                        stack.push((input, false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn check_same_shape<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "{op}: shape mismatch {} vs {}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}
