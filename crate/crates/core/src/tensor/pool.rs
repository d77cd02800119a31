//! Spatial pooling, global average pooling and channel pooling.

use super::conv::Conv2dGeometry;
use super::{Float, GradFn, Shape, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolKind {
    #[default]
    Avg,
    Max,
}

impl std::str::FromStr for PoolKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "avg" => Ok(PoolKind::Avg),
            "max" => Ok(PoolKind::Max),
            other => Err(format!("unknown pooling kind `{other}` (expected avg|max)")),
        }
    }
}

impl std::fmt::Display for PoolKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
        })
    }
}

enum PoolRoute<T> {
    /// Flat input index of the winning cell for each output.
    Max(Vec<usize>),
    /// In-bounds divisor for each output (as reciprocal).
    Avg(Vec<T>),
}

struct Pool2dBack<T: Float> {
    input: Tensor<T>,
    out_shape: Shape,
    kernel: usize,
    geo: Conv2dGeometry,
    route: PoolRoute<T>,
}

impl<T: Float> GradFn<T> for Pool2dBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let s = self.input.shape();
        let mut gx = vec![T::zero(); s.numel()];
        match &self.route {
            PoolRoute::Max(arg) => {
                for (i, &src) in arg.iter().enumerate() {
                    gx[src] += g[i];
                }
            }
            PoolRoute::Avg(recip) => {
                let o = self.out_shape;
                let (k, st, pad) = (
                    self.kernel,
                    self.geo.stride as isize,
                    self.geo.padding as isize,
                );
                for bc in 0..s.b * s.c {
                    let ibase = bc * s.plane();
                    for oy in 0..o.h {
                        for ox in 0..o.w {
                            let oi = bc * o.plane() + oy * o.w + ox;
                            let share = g[oi] * recip[oi];
                            for ki in 0..k {
                                let iy = oy as isize * st - pad + ki as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = ox as isize * st - pad + kj as isize;
                                    if ix >= 0 && ix < s.w as isize {
                                        gx[ibase + iy as usize * s.w + ix as usize] += share;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        self.input.accumulate_grad_vec(gx);
    }
}

/// Square-window pooling. Average pooling divides by the number of in-bounds
/// cells, so padding never dilutes the mean; max pooling ignores padding.
pub fn pool2d<T: Float>(
    input: &Tensor<T>,
    kind: PoolKind,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let s = input.shape();
    let geo = Conv2dGeometry::new(stride, padding);
    if kernel == 0 {
        return Err(shape_err!("pool2d: kernel must be >= 1"));
    }
    if padding >= kernel && kernel > 1 {
        return Err(shape_err!(
            "pool2d: padding {padding} must be smaller than kernel {kernel}"
        ));
    }
    let oh = geo.output_extent(s.h, kernel)?;
    let ow = geo.output_extent(s.w, kernel)?;
    let o = s.with_spatial(oh, ow);
    let x = input.data();
    let mut out = vec![T::zero(); o.numel()];
    let (st, pad) = (stride as isize, padding as isize);
    let route = match kind {
        PoolKind::Max => {
            let mut arg = vec![0usize; o.numel()];
            for bc in 0..s.b * s.c {
                let ibase = bc * s.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for ki in 0..kernel {
                            let iy = oy as isize * st - pad + ki as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kj in 0..kernel {
                                let ix = ox as isize * st - pad + kj as isize;
                                if ix < 0 || ix >= s.w as isize {
                                    continue;
                                }
                                let idx = ibase + iy as usize * s.w + ix as usize;
                                if best_i == usize::MAX || x[idx] > best {
                                    best = x[idx];
                                    best_i = idx;
                                }
                            }
                        }
                        let oi = bc * o.plane() + oy * ow + ox;
                        out[oi] = best;
                        arg[oi] = best_i;
                    }
                }
            }
            PoolRoute::Max(arg)
        }
        PoolKind::Avg => {
            let mut recip = vec![T::zero(); o.numel()];
            for bc in 0..s.b * s.c {
                let ibase = bc * s.plane();
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        let mut count = 0usize;
                        for ki in 0..kernel {
                            let iy = oy as isize * st - pad + ki as isize;
                            if iy < 0 || iy >= s.h as isize {
                                continue;
                            }
                            for kj in 0..kernel {
                                let ix = ox as isize * st - pad + kj as isize;
                                if ix >= 0 && ix < s.w as isize {
                                    acc += x[ibase + iy as usize * s.w + ix as usize];
                                    count += 1;
                                }
                            }
                        }
                        let oi = bc * o.plane() + oy * ow + ox;
                        let r = T::one() / T::lit(count as f64);
                        out[oi] = acc * r;
                        recip[oi] = r;
                    }
                }
            }
            PoolRoute::Avg(recip)
        }
    };
    drop(x);
    Ok(Tensor::from_op(
        o,
        out,
        Box::new(Pool2dBack {
            input: input.clone(),
            out_shape: o,
            kernel,
            geo,
            route,
        }),
    ))
}

struct GapBack<T: Float> {
    input: Tensor<T>,
}

impl<T: Float> GradFn<T> for GapBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let s = self.input.shape();
        let inv = T::one() / T::lit(s.plane() as f64);
        let mut gx = Vec::with_capacity(s.numel());
        for &gv in g {
            gx.extend(std::iter::repeat_n(gv * inv, s.plane()));
        }
        self.input.accumulate_grad_vec(gx);
    }
}

/// Spatial mean of each channel: `(B, C, H, W) → (B, C, 1, 1)`.
pub fn global_avg_pool<T: Float>(input: &Tensor<T>) -> Tensor<T> {
    let s = input.shape();
    let inv = T::one() / T::lit(s.plane() as f64);
    let out = input
        .data()
        .chunks(s.plane())
        .map(|p| p.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_op(
        s.with_spatial(1, 1),
        out,
        Box::new(GapBack {
            input: input.clone(),
        }),
    )
}

struct ChannelPoolBack<T: Float> {
    input: Tensor<T>,
    /// Winning channel per output cell for max pooling.
    argmax: Option<Vec<usize>>,
}

impl<T: Float> GradFn<T> for ChannelPoolBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let s = self.input.shape();
        let plane = s.plane();
        let mut gx = vec![T::zero(); s.numel()];
        match &self.argmax {
            Some(arg) => {
                for b in 0..s.b {
                    for p in 0..plane {
                        let oi = b * plane + p;
                        gx[(b * s.c + arg[oi]) * plane + p] += g[oi];
                    }
                }
            }
            None => {
                let inv = T::one() / T::lit(s.c as f64);
                for b in 0..s.b {
                    for c in 0..s.c {
                        for p in 0..plane {
                            gx[(b * s.c + c) * plane + p] = g[b * plane + p] * inv;
                        }
                    }
                }
            }
        }
        self.input.accumulate_grad_vec(gx);
    }
}

/// Reduces over the channel axis: `(B, C, H, W) → (B, 1, H, W)`.
pub fn channel_pool<T: Float>(input: &Tensor<T>, kind: PoolKind) -> Tensor<T> {
    let s = input.shape();
    let plane = s.plane();
    let x = input.data();
    let mut out = vec![T::zero(); s.b * plane];
    let argmax = match kind {
        PoolKind::Avg => {
            let inv = T::one() / T::lit(s.c as f64);
            for b in 0..s.b {
                for c in 0..s.c {
                    let base = (b * s.c + c) * plane;
                    for p in 0..plane {
                        out[b * plane + p] += x[base + p];
                    }
                }
                for v in &mut out[b * plane..(b + 1) * plane] {
                    *v *= inv;
                }
            }
            None
        }
        PoolKind::Max => {
            let mut arg = vec![0usize; s.b * plane];
            for b in 0..s.b {
                for p in 0..plane {
                    let mut best = x[b * s.c * plane + p];
                    let mut bi = 0;
                    for c in 1..s.c {
                        let v = x[(b * s.c + c) * plane + p];
                        if v > best {
                            best = v;
                            bi = c;
                        }
                    }
                    out[b * plane + p] = best;
                    arg[b * plane + p] = bi;
                }
            }
            Some(arg)
        }
    };
    drop(x);
    Tensor::from_op(
        s.with_channels(1),
        out,
        Box::new(ChannelPoolBack {
            input: input.clone(),
            argmax,
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> Tensor<f64> {
        Tensor::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()
    }

    #[test]
    fn max_and_avg_on_two_by_two() {
        assert_eq!(
            pool2d(&grid(), PoolKind::Max, 2, 2, 0).unwrap().to_vec(),
            vec![4.0]
        );
        assert_eq!(
            pool2d(&grid(), PoolKind::Avg, 2, 2, 0).unwrap().to_vec(),
            vec![2.5]
        );
    }

    #[test]
    fn padded_average_keeps_constants() {
        let x = Tensor::<f64>::full([1, 2, 5, 4], 0.37);
        for (k, p) in [(3, 1), (5, 2), (7, 3)] {
            let y = pool2d(&x, PoolKind::Avg, k, 1, p).unwrap();
            assert_eq!(y.shape(), x.shape());
            assert!(y.to_vec().iter().all(|&v| (v - 0.37).abs() < 1e-15));
        }
    }

    #[test]
    fn kernel_larger_than_padded_extent_fails() {
        assert!(pool2d(&grid(), PoolKind::Max, 3, 1, 0).is_err());
        assert!(pool2d(&grid(), PoolKind::Max, 0, 1, 0).is_err());
    }

    #[test]
    fn gap_means() {
        let x =
            Tensor::<f64>::new([1, 2, 2, 2], vec![1.0, 3.0, 5.0, 7.0, 2.0, 2.0, 2.0, 2.0]).unwrap();
        assert_eq!(global_avg_pool(&x).to_vec(), vec![4.0, 2.0]);
    }

    #[test]
    fn channel_pooling_values() {
        let x = Tensor::<f64>::new([1, 3, 1, 1], vec![1.0, 2.0, 6.0]).unwrap();
        assert_eq!(channel_pool(&x, PoolKind::Avg).to_vec(), vec![3.0]);
        assert_eq!(channel_pool(&x, PoolKind::Max).to_vec(), vec![6.0]);
    }

    #[test]
    fn single_channel_pooling_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 1, 3, 3], |i| i as f64 * 0.5 - 2.0);
        assert!(channel_pool(&x, PoolKind::Avg).same_values(&x));
        assert!(channel_pool(&x, PoolKind::Max).same_values(&x));
    }
}
