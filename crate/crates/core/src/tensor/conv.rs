//! 2-D convolution: an im2col + GEMM fast path and a direct-loop path.
//!
//! Weights are stored as a `(C_out, C_in, k, k)` tensor and the optional bias
//! as `(1, C_out, 1, 1)`. Both paths produce the same values up to float
//! reassociation; backward always runs through im2col.

use rayon::prelude::*;

use super::{matmul, Float, GradFn, Shape, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeometry {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeometry { stride, padding }
    }

    /// `floor((extent + 2·padding − k) / stride) + 1`.
    pub fn output_extent(&self, extent: usize, k: usize) -> Result<usize> {
        if self.stride == 0 {
            return Err(shape_err!("stride must be >= 1"));
        }
        if k == 0 {
            return Err(shape_err!("kernel extent must be >= 1"));
        }
        let padded = extent + 2 * self.padding;
        if k > padded {
            return Err(shape_err!("kernel {k} larger than padded extent {padded}"));
        }
        Ok((padded - k) / self.stride + 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ConvAlgo {
    #[default]
    Im2col,
    Direct,
}

#[derive(Clone, Copy)]
struct Plan {
    input: Shape,
    cout: usize,
    k: usize,
    geo: Conv2dGeometry,
    hout: usize,
    wout: usize,
}

impl Plan {
    fn new(input: Shape, weight: Shape, bias: Option<Shape>, geo: Conv2dGeometry) -> Result<Self> {
        if weight.h != weight.w {
            return Err(shape_err!(
                "conv2d: only square kernels are supported, got {weight}"
            ));
        }
        if weight.c != input.c {
            return Err(shape_err!(
                "conv2d: input has {} channels but weight expects {}",
                input.c,
                weight.c
            ));
        }
        if let Some(bs) = bias {
            if bs.numel() != weight.b {
                return Err(shape_err!(
                    "conv2d: bias has {} entries for {} output channels",
                    bs.numel(),
                    weight.b
                ));
            }
        }
        let k = weight.h;
        let hout = geo.output_extent(input.h, k)?;
        let wout = geo.output_extent(input.w, k)?;
        Ok(Plan {
            input,
            cout: weight.b,
            k,
            geo,
            hout,
            wout,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.input.b, self.cout, self.hout, self.wout)
    }

    fn col_rows(&self) -> usize {
        self.input.c * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.geo.stride == 1 && self.geo.padding == 0
    }
}

fn im2col<T: Float>(p: &Plan, sample: &[T], cols: &mut [T]) {
    let (h, w) = (p.input.h as isize, p.input.w as isize);
    let (k, s, pad) = (p.k, p.geo.stride as isize, p.geo.padding as isize);
    let n = p.col_cols();
    for c in 0..p.input.c {
        let chan = &sample[c * p.input.plane()..(c + 1) * p.input.plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..p.hout {
                    let iy = oy as isize * s - pad + ki as isize;
                    let line = &mut dst[oy * p.wout..(oy + 1) * p.wout];
                    if iy < 0 || iy >= h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * w as usize..(iy as usize + 1) * w as usize];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = ox as isize * s - pad + kj as isize;
                        *v = if ix < 0 || ix >= w {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Float>(p: &Plan, cols: &[T], sample_grad: &mut [T]) {
    let (h, w) = (p.input.h as isize, p.input.w as isize);
    let (k, s, pad) = (p.k, p.geo.stride as isize, p.geo.padding as isize);
    let n = p.col_cols();
    for c in 0..p.input.c {
        let chan = &mut sample_grad[c * p.input.plane()..(c + 1) * p.input.plane()];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..p.hout {
                    let iy = oy as isize * s - pad + ki as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = iy as usize * w as usize;
                    for ox in 0..p.wout {
                        let ix = ox as isize * s - pad + kj as isize;
                        if ix >= 0 && ix < w {
                            chan[base + ix as usize] += src[oy * p.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

fn forward_im2col<T: Float>(p: &Plan, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let in_len = p.input.c * p.input.plane();
    let out_len = p.cout * p.col_cols();
    let mut out = vec![T::zero(); p.input.b * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(b, dst)| {
            let sample = &x[b * in_len..(b + 1) * in_len];
            if p.is_pointwise() {
                matmul(
                    p.cout,
                    p.input.c,
                    p.col_cols(),
                    wt,
                    false,
                    sample,
                    false,
                    dst,
                    false,
                );
            } else {
                let mut cols = vec![T::zero(); p.col_rows() * p.col_cols()];
                im2col(p, sample, &mut cols);
                matmul(
                    p.cout,
                    p.col_rows(),
                    p.col_cols(),
                    wt,
                    false,
                    &cols,
                    false,
                    dst,
                    false,
                );
            }
            if let Some(bias) = bias {
                for (co, chunk) in dst.chunks_mut(p.col_cols()).enumerate() {
                    for v in chunk {
                        *v += bias[co];
                    }
                }
            }
        });
    out
}

fn forward_direct<T: Float>(p: &Plan, x: &[T], wt: &[T], bias: Option<&[T]>) -> Vec<T> {
    let s = p.input;
    let (k, stride, pad) = (p.k, p.geo.stride as isize, p.geo.padding as isize);
    let out_len = p.cout * p.col_cols();
    let mut out = vec![T::zero(); s.b * out_len];
    out.par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(b, dst)| {
            for co in 0..p.cout {
                let b0 = bias.map_or(T::zero(), |bv| bv[co]);
                for oy in 0..p.hout {
                    for ox in 0..p.wout {
                        let mut acc = T::zero();
                        for ci in 0..s.c {
                            let wbase = (co * s.c + ci) * k * k;
                            let xbase = (b * s.c + ci) * s.plane();
                            for ki in 0..k {
                                let iy = oy as isize * stride - pad + ki as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                for kj in 0..k {
                                    let ix = ox as isize * stride - pad + kj as isize;
                                    if ix < 0 || ix >= s.w as isize {
                                        continue;
                                    }
                                    acc += wt[wbase + ki * k + kj]
                                        * x[xbase + iy as usize * s.w + ix as usize];
                                }
                            }
                        }
                        dst[(co * p.hout + oy) * p.wout + ox] = acc + b0;
                    }
                }
            }
        });
    out
}

struct ConvBack<T: Float> {
    plan: Plan,
    input: Tensor<T>,
    weight: Tensor<T>,
    bias: Option<Tensor<T>>,
}

impl<T: Float> GradFn<T> for ConvBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.input.clone(), self.weight.clone()];
        if let Some(b) = &self.bias {
            v.push(b.clone());
        }
        v
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let p = self.plan;
        let in_len = p.input.c * p.input.plane();
        let out_len = p.cout * p.col_cols();
        let (rows, ncols) = (p.col_rows(), p.col_cols());

        if let Some(bias) = &self.bias {
            if bias.requires_grad() {
                let mut gb = vec![T::zero(); p.cout];
                for chunk in g.chunks(out_len) {
                    for (co, plane) in chunk.chunks(ncols).enumerate() {
                        gb[co] += plane.iter().copied().sum::<T>();
                    }
                }
                bias.accumulate_grad_vec(gb);
            }
        }

        let x = self.input.data();
        let wt = self.weight.data();
        let want_w = self.weight.requires_grad();
        let want_x = self.input.requires_grad();
        let (xs, ws): (&[T], &[T]) = (&x, &wt);

        // Per-sample partials, reduced in batch order so results do not
        // depend on thread scheduling.
        let partials: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..p.input.b)
            .into_par_iter()
            .map(|b| {
                let gy = &g[b * out_len..(b + 1) * out_len];
                let sample = &xs[b * in_len..(b + 1) * in_len];
                let gw = want_w.then(|| {
                    let mut gw = vec![T::zero(); p.cout * rows];
                    if p.is_pointwise() {
                        matmul(p.cout, ncols, rows, gy, false, sample, true, &mut gw, false);
                    } else {
                        let mut cols = vec![T::zero(); rows * ncols];
                        im2col(&p, sample, &mut cols);
                        matmul(p.cout, ncols, rows, gy, false, &cols, true, &mut gw, false);
                    }
                    gw
                });
                let gx = want_x.then(|| {
                    if p.is_pointwise() {
                        let mut gx = vec![T::zero(); in_len];
                        matmul(rows, p.cout, ncols, ws, true, gy, false, &mut gx, false);
                        gx
                    } else {
                        let mut gcols = vec![T::zero(); rows * ncols];
                        matmul(rows, p.cout, ncols, ws, true, gy, false, &mut gcols, false);
                        let mut gx = vec![T::zero(); in_len];
                        col2im_add(&p, &gcols, &mut gx);
                        gx
                    }
                });
                (gw, gx)
            })
            .collect();
        drop(x);
        drop(wt);

        if want_w {
            let mut gw = vec![T::zero(); p.cout * rows];
            for (part, _) in &partials {
                for (a, &v) in gw.iter_mut().zip(part.as_ref().expect("weight partial")) {
                    *a += v;
                }
            }
            self.weight.accumulate_grad_vec(gw);
        }
        if want_x {
            let mut gx = Vec::with_capacity(p.input.numel());
            for (_, part) in partials {
                gx.extend(part.expect("input partial"));
            }
            self.input.accumulate_grad_vec(gx);
        }
    }
}

/// Convolution using the im2col fast path.
pub fn conv2d<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: Conv2dGeometry,
) -> Result<Tensor<T>> {
    conv2d_with(input, weight, bias, geo, ConvAlgo::Im2col)
}

/// Convolution using direct nested loops in the forward pass.
pub fn conv2d_direct<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: Conv2dGeometry,
) -> Result<Tensor<T>> {
    conv2d_with(input, weight, bias, geo, ConvAlgo::Direct)
}

pub fn conv2d_with<T: Float>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    geo: Conv2dGeometry,
    algo: ConvAlgo,
) -> Result<Tensor<T>> {
    let plan = Plan::new(input.shape(), weight.shape(), bias.map(|b| b.shape()), geo)?;
    let data = {
        let x = input.data();
        let wt = weight.data();
        let bd = bias.map(|b| b.data());
        let bias_slice = bd.as_ref().map(|b| b.as_slice());
        match algo {
            ConvAlgo::Im2col => forward_im2col(&plan, &x, &wt, bias_slice),
            ConvAlgo::Direct => forward_direct(&plan, &x, &wt, bias_slice),
        }
    };
    Ok(Tensor::from_op(
        plan.out_shape(),
        data,
        Box::new(ConvBack {
            plan,
            input: input.clone(),
            weight: weight.clone(),
            bias: bias.cloned(),
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: [usize; 4]) -> Tensor<f64> {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn all_ones_valid_convolution_is_nine() {
        let y = conv2d(
            &ones([1, 1, 3, 3]),
            &ones([1, 1, 3, 3]),
            None,
            Conv2dGeometry::new(1, 0),
        )
        .unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 1, 1));
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn all_ones_padded_convolution_counts_neighbours() {
        for algo in [ConvAlgo::Im2col, ConvAlgo::Direct] {
            let y = conv2d_with(
                &ones([1, 1, 3, 3]),
                &ones([1, 1, 3, 3]),
                None,
                Conv2dGeometry::new(1, 1),
                algo,
            )
            .unwrap();
            assert_eq!(
                y.to_vec(),
                vec![4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
            );
        }
    }

    #[test]
    fn shape_errors() {
        let x = ones([1, 2, 3, 3]);
        assert!(conv2d(&x, &ones([1, 3, 3, 3]), None, Conv2dGeometry::new(1, 0)).is_err());
        assert!(conv2d(&x, &ones([1, 2, 5, 5]), None, Conv2dGeometry::new(1, 0)).is_err());
        assert!(conv2d(&x, &ones([1, 2, 5, 5]), None, Conv2dGeometry::new(1, 1)).is_ok());
        assert!(conv2d(
            &x,
            &ones([4, 2, 1, 1]),
            Some(&ones([1, 3, 1, 1])),
            Conv2dGeometry::new(1, 0)
        )
        .is_err());
    }

    #[test]
    fn stride_two_extent() {
        let g = Conv2dGeometry::new(2, 1);
        assert_eq!(g.output_extent(44, 3).unwrap(), 22);
        assert_eq!(g.output_extent(7, 3).unwrap(), 4);
    }
}
