use crate::tensor::{Float, Tensor};

/// Linear warm-up from 0 to `max_lr` over `w = round(warmup_frac · total)`
/// steps, then linear decay to 0 at `total`.
pub fn lr_schedule(step: usize, total: usize, max_lr: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total);
    let w = (warmup_frac * total as f64).round() as usize;
    if step < w {
        max_lr * step as f64 / w as f64
    } else if w == total {
        max_lr
    } else {
        max_lr * (total - step) as f64 / (total - w) as f64
    }
}

/// One tensor under optimization with its velocity and group index.
struct Slot<T: Float> {
    param: Tensor<T>,
    velocity: Vec<f64>,
    group: usize,
}

/// SGD with classic momentum: `v ← m·v + g + wd·p`, `p ← p − lr·v`.
pub struct Sgd<T: Float> {
    slots: Vec<Slot<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl<T: Float> Sgd<T> {
    /// `params` pairs each tensor with its learning-rate group.
    pub fn new(params: Vec<(Tensor<T>, usize)>, momentum: f64, weight_decay: f64) -> Self {
        let slots = params
            .into_iter()
            .map(|(param, group)| Slot {
                velocity: vec![0.0; param.numel()],
                param,
                group,
            })
            .collect();
        Sgd {
            slots,
            momentum,
            weight_decay,
        }
    }

    /// Applies one update with `lrs[group]` per tensor; tensors without a
    /// gradient still feel weight decay.
    pub fn step(&mut self, lrs: &[f64]) {
        for slot in &mut self.slots {
            let lr = lrs[slot.group];
            let grad = slot.param.grad();
            let mut data = slot.param.data_mut();
            for (i, (p, v)) in data.iter_mut().zip(slot.velocity.iter_mut()).enumerate() {
                let g = grad.as_ref().map_or(0.0, |g| g[i].to_f64_lossy());
                let pv = p.to_f64_lossy();
                *v = self.momentum * *v + g + self.weight_decay * pv;
                *p = T::lit(pv - lr * *v);
            }
        }
    }

    pub fn zero_grad(&self) {
        for slot in &self.slots {
            slot.param.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{mul, sum_all};

    #[test]
    fn schedule_fixture() {
        assert!((lr_schedule(525, 1000, 5e-2, 0.05) - 0.025).abs() < 1e-12);
        assert_eq!(lr_schedule(50, 1000, 5e-2, 0.05), 5e-2);
        assert_eq!(lr_schedule(1000, 1000, 5e-2, 0.05), 0.0);
        assert_eq!(lr_schedule(0, 1000, 5e-2, 0.05), 0.0);
    }

    #[test]
    fn momentum_two_step_hand_calculation() {
        // f(p) = p^2, p0 = 1, lr = 0.1, m = 0.9, wd = 0.
        // step 1: g = 2, v = 2, p = 0.8
        // step 2: g = 1.6, v = 0.9·2 + 1.6 = 3.4, p = 0.8 − 0.34 = 0.46
        let p = Tensor::<f64>::leaf([1, 1, 1, 1], vec![1.0]).unwrap();
        let mut opt = Sgd::new(vec![(p.clone(), 0)], 0.9, 0.0);
        for _ in 0..2 {
            opt.zero_grad();
            sum_all(&mul(&p, &p).unwrap()).backward().unwrap();
            opt.step(&[0.1]);
        }
        assert!((p.item().unwrap() - 0.46).abs() < 1e-12);
    }

    #[test]
    fn zero_lr_and_decay_is_a_null_update() {
        let p = Tensor::<f32>::leaf([1, 1, 1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let mut opt = Sgd::new(vec![(p.clone(), 0)], 0.9, 0.0);
        sum_all(&mul(&p, &p).unwrap()).backward().unwrap();
        opt.step(&[0.0]);
        assert_eq!(p.to_vec(), vec![0.5, -1.0, 2.0]);
    }
}
