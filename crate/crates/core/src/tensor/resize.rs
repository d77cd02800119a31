//! Bilinear resampling with half-pixel centers (no corner alignment).
//!
//! Output pixel `o` samples the input at `(o + 0.5)·(in/out) − 0.5`; samples
//! left of the first center clamp to it, and the right neighbour clamps to
//! the last cell.

use super::{Float, GradFn, Tensor};
use crate::error::{shape_err, Result};

#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    frac: T,
}

fn taps<T: Float>(in_len: usize, out_len: usize) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: T::lit(src - lo as f64),
            }
        })
        .collect()
}

struct ResizeBack<T: Float> {
    input: Tensor<T>,
    rows: Vec<Tap<T>>,
    cols: Vec<Tap<T>>,
}

impl<T: Float> GradFn<T> for ResizeBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone()]
    }

    fn apply(&self, out: &Tensor<T>, g: &[T]) {
        let s = self.input.shape();
        let o = out.shape();
        let mut gx = vec![T::zero(); s.numel()];
        for bc in 0..s.b * s.c {
            let ib = bc * s.plane();
            let ob = bc * o.plane();
            for (oy, r) in self.rows.iter().enumerate() {
                for (ox, c) in self.cols.iter().enumerate() {
                    let gv = g[ob + oy * o.w + ox];
                    let (wy1, wx1) = (r.frac, c.frac);
                    let (wy0, wx0) = (T::one() - wy1, T::one() - wx1);
                    gx[ib + r.lo * s.w + c.lo] += gv * wy0 * wx0;
                    gx[ib + r.lo * s.w + c.hi] += gv * wy0 * wx1;
                    gx[ib + r.hi * s.w + c.lo] += gv * wy1 * wx0;
                    gx[ib + r.hi * s.w + c.hi] += gv * wy1 * wx1;
                }
            }
        }
        self.input.accumulate_grad_vec(gx);
    }
}

pub fn bilinear_upsample<T: Float>(
    input: &Tensor<T>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(shape_err!(
            "bilinear_upsample: target {out_h}x{out_w} must be >= 1"
        ));
    }
    let s = input.shape();
    let o = s.with_spatial(out_h, out_w);
    let rows = taps::<T>(s.h, out_h);
    let cols = taps::<T>(s.w, out_w);
    let x = input.data();
    let mut out = vec![T::zero(); o.numel()];
    for bc in 0..s.b * s.c {
        let ib = bc * s.plane();
        let ob = bc * o.plane();
        for (oy, r) in rows.iter().enumerate() {
            let top = &x[ib + r.lo * s.w..ib + (r.lo + 1) * s.w];
            let bot = &x[ib + r.hi * s.w..ib + (r.hi + 1) * s.w];
            for (ox, c) in cols.iter().enumerate() {
                let t = top[c.lo] + (top[c.hi] - top[c.lo]) * c.frac;
                let b = bot[c.lo] + (bot[c.hi] - bot[c.lo]) * c.frac;
                out[ob + oy * out_w + ox] = t + (b - t) * r.frac;
            }
        }
    }
    drop(x);
    Ok(Tensor::from_op(
        o,
        out,
        Box::new(ResizeBack {
            input: input.clone(),
            rows,
            cols,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_value_fills_output() {
        let x = Tensor::<f64>::full([1, 1, 1, 1], 0.7);
        let y = bilinear_upsample(&x, 2, 2).unwrap();
        assert_eq!(y.to_vec(), vec![0.7; 4]);
    }

    #[test]
    fn same_size_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 4, 5], |i| (i as f64).sin());
        let y = bilinear_upsample(&x, 4, 5).unwrap();
        assert!(y.same_values(&x));
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(bilinear_upsample(&x, 0, 2).is_err());
    }
}
