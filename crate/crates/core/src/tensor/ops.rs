//! Elementwise arithmetic, activations, reductions and channel concat.

use super::{check_same_shape, Float, GradFn, Shape, Tensor};
use crate::error::{shape_err, Result};

struct AddBack<T: Float> {
    a: Tensor<T>,
    b: Tensor<T>,
    sign_b: T,
}

impl<T: Float> GradFn<T> for AddBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        self.a.accumulate_grad(g);
        if self.sign_b == T::one() {
            self.b.accumulate_grad(g);
        } else {
            self.b
                .accumulate_grad_vec(g.iter().map(|&v| v * self.sign_b).collect());
        }
    }
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "add")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x + y)
        .collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        Box::new(AddBack {
            a: a.clone(),
            b: b.clone(),
            sign_b: T::one(),
        }),
    ))
}

pub fn sub<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "sub")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x - y)
        .collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        Box::new(AddBack {
            a: a.clone(),
            b: b.clone(),
            sign_b: -T::one(),
        }),
    ))
}

struct MulBack<T: Float> {
    a: Tensor<T>,
    b: Tensor<T>,
}

impl<T: Float> GradFn<T> for MulBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        if self.a.requires_grad() {
            let gb: Vec<T> = g
                .iter()
                .zip(self.b.data().iter())
                .map(|(&g, &b)| g * b)
                .collect();
            self.a.accumulate_grad_vec(gb);
        }
        if self.b.requires_grad() {
            let ga: Vec<T> = g
                .iter()
                .zip(self.a.data().iter())
                .map(|(&g, &a)| g * a)
                .collect();
            self.b.accumulate_grad_vec(ga);
        }
    }
}

/// Elementwise product of equal-shape tensors.
pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "mul")?;
    let data = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(&x, &y)| x * y)
        .collect();
    Ok(Tensor::from_op(
        a.shape(),
        data,
        Box::new(MulBack {
            a: a.clone(),
            b: b.clone(),
        }),
    ))
}

struct MulBroadcastBack<T: Float> {
    a: Tensor<T>,
    b: Tensor<T>,
}

fn broadcast_index(out: Shape, small: Shape) -> impl Fn(usize) -> usize {
    move |i| {
        let w = i % out.w;
        let h = (i / out.w) % out.h;
        let c = (i / out.plane()) % out.c;
        let b = i / (out.c * out.plane());
        let (b, c, h, w) = (
            if small.b == 1 { 0 } else { b },
            if small.c == 1 { 0 } else { c },
            if small.h == 1 { 0 } else { h },
            if small.w == 1 { 0 } else { w },
        );
        ((b * small.c + c) * small.h + h) * small.w + w
    }
}

impl<T: Float> GradFn<T> for MulBroadcastBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone(), self.b.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let idx = broadcast_index(self.a.shape(), self.b.shape());
        if self.a.requires_grad() {
            let b = self.b.data();
            let ga: Vec<T> = g.iter().enumerate().map(|(i, &g)| g * b[idx(i)]).collect();
            self.a.accumulate_grad_vec(ga);
        }
        if self.b.requires_grad() {
            let a = self.a.data();
            let mut gb = vec![T::zero(); self.b.numel()];
            for (i, &g) in g.iter().enumerate() {
                gb[idx(i)] += g * a[i];
            }
            self.b.accumulate_grad_vec(gb);
        }
    }
}

/// `a ⊗ b` where every extent of `b` either equals `a`'s or is 1.
///
/// Used for spatial attention maps `(B,1,H,W)` and channel attention vectors
/// `(B,C,1,1)`. Any other mismatch is a shape error.
pub fn mul_broadcast<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let ok = sa
        .dims()
        .iter()
        .zip(sb.dims().iter())
        .all(|(&x, &y)| x == y || y == 1);
    if !ok {
        return Err(shape_err!("mul_broadcast: cannot broadcast {sb} onto {sa}"));
    }
    let idx = broadcast_index(sa, sb);
    let data = {
        let (ad, bd) = (a.data(), b.data());
        ad.iter()
            .enumerate()
            .map(|(i, &x)| x * bd[idx(i)])
            .collect()
    };
    Ok(Tensor::from_op(
        sa,
        data,
        Box::new(MulBroadcastBack {
            a: a.clone(),
            b: b.clone(),
        }),
    ))
}

struct ScaleBack<T: Float> {
    a: Tensor<T>,
    k: T,
}

impl<T: Float> GradFn<T> for ScaleBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        self.a
            .accumulate_grad_vec(g.iter().map(|&v| v * self.k).collect());
    }
}

pub fn scale<T: Float>(a: &Tensor<T>, k: T) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x * k).collect();
    Tensor::from_op(a.shape(), data, Box::new(ScaleBack { a: a.clone(), k }))
}

struct ReluBack<T: Float> {
    a: Tensor<T>,
}

impl<T: Float> GradFn<T> for ReluBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let a = self.a.data();
        let ga = g
            .iter()
            .zip(a.iter())
            .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
            .collect();
        drop(a);
        self.a.accumulate_grad_vec(ga);
    }
}

pub fn relu<T: Float>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|&x| x.max(T::zero())).collect();
    Tensor::from_op(a.shape(), data, Box::new(ReluBack { a: a.clone() }))
}

struct SigmoidBack<T: Float> {
    a: Tensor<T>,
}

impl<T: Float> GradFn<T> for SigmoidBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone()]
    }

    fn apply(&self, out: &Tensor<T>, g: &[T]) {
        let y = out.data();
        let ga = g
            .iter()
            .zip(y.iter())
            .map(|(&g, &y)| g * y * (T::one() - y))
            .collect();
        drop(y);
        self.a.accumulate_grad_vec(ga);
    }
}

pub(crate) fn sigmoid_scalar<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(a: &Tensor<T>) -> Tensor<T> {
    let data = a.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Tensor::from_op(a.shape(), data, Box::new(SigmoidBack { a: a.clone() }))
}

struct ConcatBack<T: Float> {
    parts: Vec<Tensor<T>>,
}

impl<T: Float> GradFn<T> for ConcatBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        self.parts.clone()
    }

    fn apply(&self, out: &Tensor<T>, g: &[T]) {
        let os = out.shape();
        let plane = os.plane();
        let mut c_off = 0;
        for p in &self.parts {
            let pc = p.shape().c;
            if p.requires_grad() {
                let mut gp = Vec::with_capacity(p.numel());
                for b in 0..os.b {
                    let start = (b * os.c + c_off) * plane;
                    gp.extend_from_slice(&g[start..start + pc * plane]);
                }
                p.accumulate_grad_vec(gp);
            }
            c_off += pc;
        }
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Float>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err!("concat_channels: no inputs"))?
        .shape();
    for p in parts {
        let s = p.shape();
        if s.b != first.b || s.h != first.h || s.w != first.w {
            return Err(shape_err!("concat_channels: {s} incompatible with {first}"));
        }
    }
    let total_c: usize = parts.iter().map(|p| p.shape().c).sum();
    let out_shape = first.with_channels(total_c);
    let plane = first.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for b in 0..first.b {
        for p in parts {
            let pc = p.shape().c;
            let start = b * pc * plane;
            data.extend_from_slice(&p.data()[start..start + pc * plane]);
        }
    }
    Ok(Tensor::from_op(
        out_shape,
        data,
        Box::new(ConcatBack {
            parts: parts.iter().map(|&p| p.clone()).collect(),
        }),
    ))
}

struct SumBack<T: Float> {
    a: Tensor<T>,
    k: T,
}

impl<T: Float> GradFn<T> for SumBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.a.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        self.a
            .accumulate_grad_vec(vec![g[0] * self.k; self.a.numel()]);
    }
}

/// Sum of every element, as a scalar tensor.
pub fn sum_all<T: Float>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.data().iter().copied().sum();
    Tensor::from_op(
        Shape::scalar(),
        vec![s],
        Box::new(SumBack {
            a: a.clone(),
            k: T::one(),
        }),
    )
}

pub fn mean_all<T: Float>(a: &Tensor<T>) -> Tensor<T> {
    let n = T::lit(a.numel() as f64);
    let s: T = a.data().iter().copied().sum();
    Tensor::from_op(
        Shape::scalar(),
        vec![s / n],
        Box::new(SumBack {
            a: a.clone(),
            k: T::one() / n,
        }),
    )
}
