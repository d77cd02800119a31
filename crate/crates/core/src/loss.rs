//! Pixel losses, the saliency and boundary combinations, and the
//! deep-supervised total over the six heads.

use std::fmt;
use std::str::FromStr;

use crate::error::{CtdError, Result};
use crate::model::HeadOutputs;
use crate::tensor::{add, bilinear_upsample, scale, Float, GradFn, Shape, Tensor};

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` inside logarithms.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    #[default]
    Mean,
}

impl FromStr for Reduction {
    type Err = CtdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "mean" => Ok(Reduction::Mean),
            other => Err(CtdError::Config(format!("unknown reduction `{other}`"))),
        }
    }
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Mean => "mean",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    /// BCE weight in the saliency loss.
    pub beta: f64,
    /// L1 weight in the saliency loss.
    pub gamma: f64,
    /// Per-head weights for d_p123, d_p12, d_p1, e_g5, e6.
    pub alpha: [f64; 5],
    /// Weight on the boundary term; 1 in the standard total.
    pub boundary: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 0.6,
            gamma: 1.0,
            alpha: [1.0; 5],
            boundary: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.beta, self.gamma, self.boundary]
            .into_iter()
            .chain(self.alpha);
        for w in all {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(CtdError::Config(format!(
                    "loss weights must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }
}

fn check_pair<T: Float>(p: &Tensor<T>, g: &Tensor<T>, what: &str) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(CtdError::Shape(format!(
            "{what}: prediction {} vs target {}",
            p.shape(),
            g.shape()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum PixelKind {
    Bce,
    L1,
}

struct PixelBack<T: Float> {
    p: Tensor<T>,
    g: Tensor<T>,
    kind: PixelKind,
    norm: f64,
}

impl<T: Float> GradFn<T> for PixelBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.p.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, grad_out: &[T]) {
        let go = grad_out[0].to_f64_lossy() / self.norm;
        let p = self.p.data();
        let g = self.g.data();
        let grad = p
            .iter()
            .zip(g.iter())
            .map(|(&p, &g)| {
                let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
                let d = match self.kind {
                    PixelKind::Bce if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) => {
                        (p - g) / (p * (1.0 - p))
                    }
                    PixelKind::Bce => 0.0,
                    PixelKind::L1 if p > g => 1.0,
                    PixelKind::L1 if p < g => -1.0,
                    PixelKind::L1 => 0.0,
                };
                T::lit(go * d)
            })
            .collect();
        self.p.accumulate_grad_vec(grad);
    }
}

fn pixel_loss<T: Float>(
    p: &Tensor<T>,
    g: &Tensor<T>,
    kind: PixelKind,
    reduction: Reduction,
) -> Result<Tensor<T>> {
    let total: f64 = p
        .data()
        .iter()
        .zip(g.data().iter())
        .map(|(&p, &g)| {
            let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
            match kind {
                PixelKind::Bce => {
                    let pc = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
                    -(g * pc.ln() + (1.0 - g) * (1.0 - pc).ln())
                }
                PixelKind::L1 => (g - p).abs(),
            }
        })
        .sum();
    let norm = match reduction {
        Reduction::Sum => 1.0,
        Reduction::Mean => p.numel() as f64,
    };
    Ok(Tensor::from_op(
        Shape::scalar(),
        vec![T::lit(total / norm)],
        Box::new(PixelBack {
            p: p.clone(),
            g: g.detach(),
            kind,
            norm,
        }),
    ))
}

/// Binary cross-entropy with clamped probabilities.
pub fn bce_loss<T: Float>(p: &Tensor<T>, g: &Tensor<T>, reduction: Reduction) -> Result<Tensor<T>> {
    check_pair(p, g, "bce")?;
    pixel_loss(p, g, PixelKind::Bce, reduction)
}

/// Absolute error; the subgradient at `p = g` is 0.
pub fn l1_loss<T: Float>(p: &Tensor<T>, g: &Tensor<T>, reduction: Reduction) -> Result<Tensor<T>> {
    check_pair(p, g, "l1")?;
    pixel_loss(p, g, PixelKind::L1, reduction)
}

struct IouBack<T: Float> {
    p: Tensor<T>,
    g: Tensor<T>,
    /// Per-sample `(intersection, union)`.
    terms: Vec<(f64, f64)>,
}

impl<T: Float> GradFn<T> for IouBack<T> {
    fn inputs(&self) -> Vec<Tensor<T>> {
        vec![self.p.clone()]
    }

    fn apply(&self, _out: &Tensor<T>, grad_out: &[T]) {
        let go = grad_out[0].to_f64_lossy() / self.terms.len() as f64;
        let per = self.p.shape().numel() / self.terms.len();
        let g = self.g.data();
        let grad = g
            .iter()
            .enumerate()
            .map(|(i, &g)| {
                let (inter, union) = self.terms[i / per];
                if union == 0.0 {
                    return T::zero();
                }
                let g = g.to_f64_lossy();
                T::lit(-go * (g * union - inter * (1.0 - g)) / (union * union))
            })
            .collect();
        self.p.accumulate_grad_vec(grad);
    }
}

/// IoU loss averaged over the batch, and whether any sample had an empty
/// union (counted as a perfect match).
pub fn iou_loss_flagged<T: Float>(p: &Tensor<T>, g: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    check_pair(p, g, "iou")?;
    let b = p.shape().b;
    let per = p.numel() / b;
    let (pd, gd) = (p.data(), g.data());
    let terms: Vec<(f64, f64)> = (0..b)
        .map(|s| {
            let range = s * per..(s + 1) * per;
            pd[range.clone()]
                .iter()
                .zip(&gd[range])
                .fold((0.0, 0.0), |(i, u), (&p, &g)| {
                    let (p, g) = (p.to_f64_lossy(), g.to_f64_lossy());
                    (i + g * p, u + g + p - g * p)
                })
        })
        .collect();
    drop((pd, gd));
    let empty = terms.iter().any(|&(_, u)| u == 0.0);
    let value = terms
        .iter()
        .map(|&(i, u)| if u == 0.0 { 0.0 } else { 1.0 - i / u })
        .sum::<f64>()
        / b as f64;
    let loss = Tensor::from_op(
        Shape::scalar(),
        vec![T::lit(value)],
        Box::new(IouBack {
            p: p.clone(),
            g: g.detach(),
            terms,
        }),
    );
    Ok((loss, empty))
}

pub fn iou_loss<T: Float>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(iou_loss_flagged(p, g)?.0)
}

/// Loss value with its individual terms.
#[derive(Clone, Debug)]
pub struct SaliencyTerms<T: Float> {
    pub total: Tensor<T>,
    pub iou: f64,
    pub bce: f64,
    pub l1: f64,
    pub empty_union: bool,
}

fn weighted_sum<T: Float>(parts: &[(&Tensor<T>, f64)]) -> Result<Tensor<T>> {
    let mut acc: Option<Tensor<T>> = None;
    for &(t, w) in parts {
        if w == 0.0 {
            continue;
        }
        let term = if w == 1.0 {
            t.clone()
        } else {
            scale(t, T::lit(w))
        };
        acc = Some(match acc {
            Some(a) => add(&a, &term)?,
            None => term,
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::scalar(T::zero())))
}

/// `iou + beta·bce + gamma·l1`.
pub fn saliency_loss<T: Float>(
    p: &Tensor<T>,
    g: &Tensor<T>,
    w: &LossWeights,
) -> Result<SaliencyTerms<T>> {
    let (iou, empty_union) = iou_loss_flagged(p, g)?;
    let bce = bce_loss(p, g, w.reduction)?;
    let l1 = l1_loss(p, g, w.reduction)?;
    let total = weighted_sum(&[(&iou, 1.0), (&bce, w.beta), (&l1, w.gamma)])?;
    Ok(SaliencyTerms {
        iou: iou.item()?.to_f64_lossy(),
        bce: bce.item()?.to_f64_lossy(),
        l1: l1.item()?.to_f64_lossy(),
        total,
        empty_union,
    })
}

/// `(bce + l1) / 2`.
pub fn boundary_loss<T: Float>(
    p_b: &Tensor<T>,
    g_b: &Tensor<T>,
    reduction: Reduction,
) -> Result<Tensor<T>> {
    let bce = bce_loss(p_b, g_b, reduction)?;
    let l1 = l1_loss(p_b, g_b, reduction)?;
    weighted_sum(&[(&bce, 0.5), (&l1, 0.5)])
}

/// Total loss with α-weighted term sums for logging.
#[derive(Clone, Debug)]
pub struct LossBreakdown<T: Float> {
    pub total: Tensor<T>,
    pub iou: f64,
    pub bce: f64,
    pub l1: f64,
    pub boundary: f64,
    pub empty_union: bool,
}

fn to_target<T: Float>(p: &Tensor<T>, target: Shape) -> Result<Tensor<T>> {
    let s = p.shape();
    if s.h == target.h && s.w == target.w {
        Ok(p.clone())
    } else {
        bilinear_upsample(p, target.h, target.w)
    }
}

/// Boundary loss on `d_p3` plus α-weighted saliency losses on the other five
/// heads, every prediction resized to the ground-truth resolution.
pub fn total_loss<T: Float>(
    heads: &HeadOutputs<T>,
    g: &Tensor<T>,
    g_b: &Tensor<T>,
    w: &LossWeights,
) -> Result<LossBreakdown<T>> {
    w.validate()?;
    let mut parts: Vec<(Tensor<T>, f64)> = Vec::with_capacity(6);
    let (mut iou, mut bce, mut l1, mut empty_union) = (0.0, 0.0, 0.0, false);
    for (p, &alpha) in heads.saliency_predictions().into_iter().zip(&w.alpha) {
        if alpha == 0.0 {
            continue;
        }
        let terms = saliency_loss(&to_target(p, g.shape())?, g, w)?;
        iou += alpha * terms.iou;
        bce += alpha * terms.bce;
        l1 += alpha * terms.l1;
        empty_union |= terms.empty_union;
        parts.push((terms.total, alpha));
    }
    let mut boundary = 0.0;
    if w.boundary != 0.0 {
        let b = boundary_loss(
            &to_target(heads.boundary_prediction(), g_b.shape())?,
            g_b,
            w.reduction,
        )?;
        boundary = b.item()?.to_f64_lossy();
        parts.push((b, w.boundary));
    }
    let refs: Vec<(&Tensor<T>, f64)> = parts.iter().map(|(t, a)| (t, *a)).collect();
    Ok(LossBreakdown {
        total: weighted_sum(&refs)?,
        iou,
        bce,
        l1,
        boundary,
        empty_union,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn bce_of_half_map_is_n_ln2() {
        let p = Tensor::full([1, 1, 4, 4], 0.5);
        let g = Tensor::from_fn([1, 1, 4, 4], |i| (i % 3 == 0) as u8 as f64);
        let v = bce_loss(&p, &g, Reduction::Sum).unwrap().item().unwrap();
        assert!((v - 16.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let half = Tensor::full([1, 1, 2, 2], 0.5f64);
        assert!((iou_loss(&half, &half).unwrap().item().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let g = t([1, 1, 2, 2], &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(iou_loss(&g, &g).unwrap().item().unwrap(), 0.0);
        assert_eq!(
            iou_loss(&Tensor::zeros([1, 1, 2, 2]), &g)
                .unwrap()
                .item()
                .unwrap(),
            1.0
        );
        let z = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let (v, flag) = iou_loss_flagged(&z, &z).unwrap();
        assert_eq!(v.item().unwrap(), 0.0);
        assert!(flag);
    }

    #[test]
    fn l1_examples() {
        let p = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let g = Tensor::full([1, 1, 2, 2], 1.0);
        assert_eq!(
            l1_loss(&p, &g, Reduction::Sum).unwrap().item().unwrap(),
            4.0
        );
        assert_eq!(
            l1_loss(&g, &p, Reduction::Mean).unwrap().item().unwrap(),
            1.0
        );
    }

    #[test]
    fn saliency_collapses_to_iou() {
        let p = t([1, 1, 2, 2], &[0.2, 0.7, 0.9, 0.4]);
        let g = t([1, 1, 2, 2], &[0.0, 1.0, 1.0, 0.0]);
        let w = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            ..Default::default()
        };
        let s = saliency_loss(&p, &g, &w).unwrap().total.item().unwrap();
        assert_eq!(s, iou_loss(&p, &g).unwrap().item().unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let p = Tensor::<f64>::zeros([1, 1, 2, 2]);
        let g = Tensor::<f64>::zeros([1, 1, 2, 3]);
        assert!(matches!(
            bce_loss(&p, &g, Reduction::Sum),
            Err(CtdError::Shape(_))
        ));
        assert!(iou_loss(&p, &g).is_err());
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            gamma: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
