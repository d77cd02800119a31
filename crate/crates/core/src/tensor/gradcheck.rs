//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mul, sum_all, Float, Tensor};
use crate::error::{CtdError, Result};

/// Denominator floor for the relative error.
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares analytic gradients of the scalar `f` w.r.t. every element of
/// `wrt` against central differences with step `eps`.
///
/// `f` must rebuild its graph from the current values of `wrt` on each call.
/// The error per element is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check<F>(mut f: F, wrt: &[Tensor<f64>], eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: FnMut() -> Result<Tensor<f64>>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(CtdError::Usage(format!(
            "grad_check: eps must be > 0, got {eps}"
        )));
    }
    for t in wrt {
        t.zero_grad();
        if !t.requires_grad() {
            return Err(CtdError::Usage(
                "grad_check: probed tensor does not require grad".into(),
            ));
        }
    }
    let loss = f()?;
    finite_or_err(loss.item()?, "loss")?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    drop(loss);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for (ti, t) in wrt.iter().enumerate() {
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + eps;
            let up = f()?.item()?;
            t.data_mut()[i] = orig - eps;
            let down = f()?.item()?;
            t.data_mut()[i] = orig;
            finite_or_err(up, "perturbed loss")?;
            finite_or_err(down, "perturbed loss")?;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[ti][i];
            finite_or_err(a, "analytic gradient")?;
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (ti, i);
            }
            report.checked += 1;
        }
    }
    for t in wrt {
        t.zero_grad();
    }
    Ok(report)
}

fn finite_or_err(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(CtdError::Numerical(format!(
            "grad_check: non-finite {what} ({v})"
        )))
    }
}

/// `Σ out ⊙ r` for a fixed pseudo-random `r` in [-1, 1): turns any tensor
/// into a scalar whose gradient exercises every output element differently.
pub fn probe_sum<T: Float>(out: &Tensor<T>, seed: u64) -> Result<Tensor<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(out.shape(), |_| T::lit(rng.random_range(-1.0..1.0)));
    Ok(sum_all(&mul(out, &r)?))
}
