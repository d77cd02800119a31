//! Per-channel batch normalization over (batch, height, width).

use super::{Float, GradFn, Tensor};
use crate::error::{shape_err, Result};

/// Running statistics and hyperparameters shared by train and eval modes.
pub struct BatchNormStats<'a, T: Float> {
    pub running_mean: &'a Tensor<T>,
    pub running_var: &'a Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

struct BnBack<T: Float> {
    input: Tensor<T>,
    gamma: Tensor<T>,
    beta: Tensor<T>,
    x_hat: Vec<T>,
    inv_std: Vec<T>,
    training: bool,
}

impl<T: Float> GradFn<T> for BnBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.input.clone(), self.gamma.clone(), self.beta.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, g: &[T]) {
        let s = self.input.shape();
        let plane = s.plane();
        let n = T::lit((s.b * plane) as f64);
        let mut sum_g = vec![T::zero(); s.c];
        let mut sum_gx = vec![T::zero(); s.c];
        for b in 0..s.b {
            for c in 0..s.c {
                let base = (b * s.c + c) * plane;
                for i in base..base + plane {
                    sum_g[c] += g[i];
                    sum_gx[c] += g[i] * self.x_hat[i];
                }
            }
        }
        self.gamma.accumulate_grad(&sum_gx);
        self.beta.accumulate_grad(&sum_g);
        if !self.input.requires_grad() {
            return;
        }
        let gamma = self.gamma.data();
        let mut gx = vec![T::zero(); s.numel()];
        for b in 0..s.b {
            for c in 0..s.c {
                let base = (b * s.c + c) * plane;
                let k = gamma[c] * self.inv_std[c];
                for i in base..base + plane {
                    gx[i] = if self.training {
                        k * (g[i] - sum_g[c] / n - self.x_hat[i] * sum_gx[c] / n)
                    } else {
                        k * g[i]
                    };
                }
            }
        }
        drop(gamma);
        self.input.accumulate_grad_vec(gx);
    }
}

/// Batch normalization. In training mode batch statistics normalize the
/// input and the running statistics are updated in place (unbiased variance);
/// in eval mode the running statistics are used.
pub fn batch_norm<T: Float>(
    input: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    stats: BatchNormStats<'_, T>,
    training: bool,
) -> Result<Tensor<T>> {
    let s = input.shape();
    for (name, t) in [
        ("gamma", gamma),
        ("beta", beta),
        ("running_mean", stats.running_mean),
        ("running_var", stats.running_var),
    ] {
        if t.numel() != s.c {
            return Err(shape_err!(
                "batch_norm: {name} has {} entries for {} channels",
                t.numel(),
                s.c
            ));
        }
    }
    let plane = s.plane();
    let count = s.b * plane;
    let x = input.data();
    let (mean, var) = if training {
        let mut mean = vec![T::zero(); s.c];
        let mut var = vec![T::zero(); s.c];
        for c in 0..s.c {
            let mut acc = 0.0f64;
            for b in 0..s.b {
                let base = (b * s.c + c) * plane;
                acc += x[base..base + plane]
                    .iter()
                    .map(|v| v.to_f64_lossy())
                    .sum::<f64>();
            }
            let m = acc / count as f64;
            let mut sq = 0.0f64;
            for b in 0..s.b {
                let base = (b * s.c + c) * plane;
                sq += x[base..base + plane]
                    .iter()
                    .map(|v| {
                        let d = v.to_f64_lossy() - m;
                        d * d
                    })
                    .sum::<f64>();
            }
            mean[c] = T::lit(m);
            var[c] = T::lit(sq / count as f64);
        }
        let mut rm = stats.running_mean.data_mut();
        let mut rv = stats.running_var.data_mut();
        let unbias = if count > 1 {
            T::lit(count as f64 / (count - 1) as f64)
        } else {
            T::one()
        };
        for c in 0..s.c {
            rm[c] = (T::one() - stats.momentum) * rm[c] + stats.momentum * mean[c];
            rv[c] = (T::one() - stats.momentum) * rv[c] + stats.momentum * var[c] * unbias;
        }
        (mean, var)
    } else {
        (stats.running_mean.to_vec(), stats.running_var.to_vec())
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + stats.eps).sqrt())
        .collect();
    let gm = gamma.data();
    let bt = beta.data();
    let mut x_hat = vec![T::zero(); s.numel()];
    let mut out = vec![T::zero(); s.numel()];
    for b in 0..s.b {
        for c in 0..s.c {
            let base = (b * s.c + c) * plane;
            for i in base..base + plane {
                let xh = (x[i] - mean[c]) * inv_std[c];
                x_hat[i] = xh;
                out[i] = gm[c] * xh + bt[c];
            }
        }
    }
    drop((x, gm, bt));
    Ok(Tensor::from_op(
        s,
        out,
        Box::new(BnBack {
            input: input.clone(),
            gamma: gamma.clone(),
            beta: beta.clone(),
            x_hat,
            inv_std,
            training,
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    struct Bn {
        gamma: Tensor<f64>,
        beta: Tensor<f64>,
        rm: Tensor<f64>,
        rv: Tensor<f64>,
    }

    fn bn(c: usize, gamma: f64, beta: f64) -> Bn {
        Bn {
            gamma: Tensor::leaf([1, c, 1, 1], vec![gamma; c]).unwrap(),
            beta: Tensor::leaf([1, c, 1, 1], vec![beta; c]).unwrap(),
            rm: Tensor::zeros([1, c, 1, 1]),
            rv: Tensor::full([1, c, 1, 1], 1.0),
        }
    }

    fn run(x: &Tensor<f64>, p: &Bn, training: bool) -> Result<Tensor<f64>> {
        batch_norm(
            x,
            &p.gamma,
            &p.beta,
            BatchNormStats {
                running_mean: &p.rm,
                running_var: &p.rv,
                momentum: 0.1,
                eps: 1e-5,
            },
            training,
        )
    }

    #[test]
    fn train_mode_standardizes_each_channel() {
        let x = Tensor::from_fn([3, 2, 2, 2], |i| ((i * 7919) % 13) as f64 - 4.0);
        let p = bn(2, 1.0, 0.0);
        let y = run(&x, &p, true).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..3).flat_map(|b| y.plane(b, c)).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
        assert!(p.rm.to_vec().iter().any(|&m| m != 0.0));
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::full([2, 1, 3, 3], 4.2);
        let y = run(&x, &bn(1, 1.0, 0.0), true).unwrap();
        assert!(y.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = Tensor::full([1, 1, 1, 1], 1.0);
        let y = run(&x, &bn(1, 2.0, 3.0), false).unwrap();
        assert!((y.to_vec()[0] - 5.0).abs() < 1e-4);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 3, 2, 2));
        assert!(run(&x, &bn(2, 1.0, 0.0), true).is_err());
    }
}
