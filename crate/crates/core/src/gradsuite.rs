//! Finite-difference checks over every layer, fusion block and loss, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::loss::{
    bce_loss, boundary_loss, iou_loss, l1_loss, saliency_loss, LossWeights, Reduction,
};
use crate::nn::{
    named_parameters, Brm, Cam, ConvBnRelu, Ffm, Mode, Module, ParamInit, PredictionHead, Sam, Sap,
    SapConfig,
};
use crate::tensor::{
    batch_norm, bilinear_upsample, channel_pool, concat_channels, conv2d_with, global_avg_pool,
    grad_check, mul_broadcast, pool2d, probe_sum, relu, sigmoid, BatchNormStats, Conv2dGeometry,
    ConvAlgo, GradCheckReport, PoolKind, Shape, Tensor, DEFAULT_FLOOR,
};

/// Acceptance bound on the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < GRAD_TOLERANCE
    }
}

struct Suite {
    rng: ChaCha8Rng,
    seed: u64,
    cases: Vec<GradCase>,
}

impl Suite {
    fn leaf(&mut self, shape: impl Into<Shape>, lo: f64, hi: f64) -> Tensor<f64> {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| self.rng.random_range(lo..hi))
            .collect();
        Tensor::leaf(shape, data).expect("consistent shape")
    }

    fn target(&mut self, shape: impl Into<Shape>) -> Tensor<f64> {
        let shape = shape.into();
        let data = (0..shape.numel())
            .map(|_| self.rng.random_bool(0.5) as u8 as f64)
            .collect();
        Tensor::new(shape, data).expect("consistent shape")
    }

    fn init(&mut self) -> ParamInit {
        ParamInit::new(self.rng.random())
    }

    fn check<F>(&mut self, name: &'static str, wrt: Vec<Tensor<f64>>, mut f: F) -> Result<()>
    where
        F: FnMut() -> Result<Tensor<f64>>,
    {
        let seed = self.seed;
        let report = grad_check(|| probe_sum(&f()?, seed), &wrt, GRAD_EPS, DEFAULT_FLOOR)?;
        self.cases.push(GradCase { name, report });
        Ok(())
    }

    /// Scalar-valued `f` checked directly, without a probe.
    fn check_scalar<F>(&mut self, name: &'static str, wrt: Vec<Tensor<f64>>, f: F) -> Result<()>
    where
        F: FnMut() -> Result<Tensor<f64>>,
    {
        let report = grad_check(f, &wrt, GRAD_EPS, DEFAULT_FLOOR)?;
        self.cases.push(GradCase { name, report });
        Ok(())
    }
}

fn with_params(inputs: &[&Tensor<f64>], m: &dyn Module<f64>) -> Vec<Tensor<f64>> {
    let mut v: Vec<Tensor<f64>> = inputs.iter().map(|t| (*t).clone()).collect();
    v.extend(named_parameters(m).into_iter().map(|(_, t)| t));
    v
}

fn layer_cases(s: &mut Suite) -> Result<()> {
    for (name, k, stride, pad, algo) in [
        ("conv2d 3x3 im2col", 3, 1, 1, ConvAlgo::Im2col),
        ("conv2d 3x3 stride 2 direct", 3, 2, 1, ConvAlgo::Direct),
        ("conv2d 1x1", 1, 1, 0, ConvAlgo::Im2col),
        ("conv2d 5x5 pad 2", 5, 1, 2, ConvAlgo::Im2col),
    ] {
        let x = s.leaf([2, 3, 5, 5], -1.0, 1.0);
        let w = s.leaf([4, 3, k, k], -0.5, 0.5);
        let b = s.leaf([1, 4, 1, 1], -0.5, 0.5);
        let g = Conv2dGeometry::new(stride, pad);
        s.check(name, vec![x.clone(), w.clone(), b.clone()], || {
            conv2d_with(&x, &w, Some(&b), g, algo)
        })?;
    }

    let x = s.leaf([3, 2, 3, 3], -2.0, 2.0);
    let gamma = s.leaf([1, 2, 1, 1], 0.5, 1.5);
    let beta = s.leaf([1, 2, 1, 1], -0.5, 0.5);
    let (rm, rv) = (Tensor::zeros([1, 2, 1, 1]), Tensor::full([1, 2, 1, 1], 1.0));
    s.check(
        "batch_norm train",
        vec![x.clone(), gamma.clone(), beta.clone()],
        || {
            let stats = BatchNormStats {
                running_mean: &rm,
                running_var: &rv,
                momentum: 0.1,
                eps: 1e-5,
            };
            batch_norm(&x, &gamma, &beta, stats, true)
        },
    )?;
    s.check(
        "batch_norm eval",
        vec![x.clone(), gamma.clone(), beta.clone()],
        || {
            let stats = BatchNormStats {
                running_mean: &rm,
                running_var: &rv,
                momentum: 0.1,
                eps: 1e-5,
            };
            batch_norm(&x, &gamma, &beta, stats, false)
        },
    )?;

    let x = s.leaf([2, 3, 4, 4], -1.0, 1.0);
    s.check("relu", vec![x.clone()], || Ok(relu(&x)))?;
    s.check("sigmoid", vec![x.clone()], || Ok(sigmoid(&x)))?;
    s.check("avg_pool 3x3 pad 1", vec![x.clone()], || {
        pool2d(&x, PoolKind::Avg, 3, 1, 1)
    })?;
    s.check("max_pool 3x3 stride 2", vec![x.clone()], || {
        pool2d(&x, PoolKind::Max, 3, 2, 1)
    })?;
    s.check("global_avg_pool", vec![x.clone()], || {
        Ok(global_avg_pool(&x))
    })?;
    s.check("channel_pool avg", vec![x.clone()], || {
        Ok(channel_pool(&x, PoolKind::Avg))
    })?;
    s.check("channel_pool max", vec![x.clone()], || {
        Ok(channel_pool(&x, PoolKind::Max))
    })?;
    s.check("bilinear_upsample", vec![x.clone()], || {
        bilinear_upsample(&x, 7, 5)
    })?;
    let m = s.leaf([2, 1, 4, 4], 0.0, 1.0);
    s.check("mul_broadcast", vec![x.clone(), m.clone()], || {
        mul_broadcast(&x, &m)
    })?;
    s.check("concat_channels", vec![x.clone(), m.clone()], || {
        concat_channels(&[&x, &m])
    })?;

    let mut init = s.init();
    let unit: ConvBnRelu<f64> = ConvBnRelu::same(&mut init, 3, 4, 3);
    let x = s.leaf([2, 3, 4, 4], -1.0, 1.0);
    s.check("conv_bn_relu", with_params(&[&x], &unit), || {
        unit.forward(&x, Mode::Train)
    })?;
    let head: PredictionHead<f64> = PredictionHead::new(&mut init, 3);
    s.check("prediction_head", with_params(&[&x], &head), || {
        head.forward(&x)
    })?;
    Ok(())
}

fn block_cases(s: &mut Suite) -> Result<()> {
    let c = 3;
    let mut init = s.init();

    let ffm: Ffm<f64> = Ffm::new(&mut init, c);
    let (a, b) = (
        s.leaf([2, c, 4, 4], -1.0, 1.0),
        s.leaf([2, c, 4, 4], -1.0, 1.0),
    );
    s.check("ffm", with_params(&[&a, &b], &ffm), || {
        ffm.forward(&a, &b, Mode::Train)
    })?;

    let sam: Sam<f64> = Sam::new(&mut init, c, 2);
    let x = s.leaf([2, c, 5, 5], -1.0, 1.0);
    s.check("sam", with_params(&[&x], &sam), || {
        sam.forward(&x, Mode::Train)
    })?;

    let sap = Sap::new(SapConfig::default());
    let proj: ConvBnRelu<f64> = ConvBnRelu::same(&mut init, sap.out_channels(2), c, 3);
    let x = s.leaf([2, 2, 5, 5], -1.0, 1.0);
    s.check("sap + projection", with_params(&[&x], &proj), || {
        proj.forward(&sap.forward(&x)?, Mode::Train)
    })?;
    let x = s.leaf([1, 2, 6, 6], -1.0, 1.0);
    let max_sap = Sap::new(SapConfig {
        branches: 3,
        kind: PoolKind::Max,
    });
    s.check("sap max", vec![x.clone()], || max_sap.forward(&x))?;

    let cam: Cam<f64> = Cam::new(&mut init, c);
    let (p1, p2) = (
        s.leaf([2, c, 2, 2], -1.0, 1.0),
        s.leaf([2, c, 4, 4], -1.0, 1.0),
    );
    s.check("cam", with_params(&[&p1, &p2], &cam), || {
        cam.forward(&p1, &p2, Mode::Train)
    })?;

    let brm: Brm<f64> = Brm::new(&mut init, c);
    let (p12, p3) = (
        s.leaf([2, c, 2, 2], -1.0, 1.0),
        s.leaf([2, c, 4, 4], -1.0, 1.0),
    );
    s.check("brm", with_params(&[&p12, &p3], &brm), || {
        brm.forward(&p12, &p3, Mode::Train)
    })?;
    Ok(())
}

fn loss_cases(s: &mut Suite) -> Result<()> {
    let shape = [2, 1, 4, 4];
    let p = s.leaf(shape, 0.05, 0.95);
    let g = s.target(shape);
    for reduction in [Reduction::Sum, Reduction::Mean] {
        let (bce_name, l1_name) = match reduction {
            Reduction::Sum => ("bce sum", "l1 sum"),
            Reduction::Mean => ("bce mean", "l1 mean"),
        };
        s.check_scalar(bce_name, vec![p.clone()], || bce_loss(&p, &g, reduction))?;
        s.check_scalar(l1_name, vec![p.clone()], || l1_loss(&p, &g, reduction))?;
    }
    s.check_scalar("iou", vec![p.clone()], || iou_loss(&p, &g))?;
    let soft = s.leaf(shape, 0.0, 1.0).detach();
    s.check_scalar("iou soft target", vec![p.clone()], || iou_loss(&p, &soft))?;
    let w = LossWeights::default();
    s.check_scalar("saliency", vec![p.clone()], || {
        Ok(saliency_loss(&p, &g, &w)?.total)
    })?;
    s.check_scalar("boundary", vec![p.clone()], || {
        boundary_loss(&p, &g, Reduction::Mean)
    })?;
    Ok(())
}

/// Runs every case with inputs and weights drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        seed,
        cases: Vec::new(),
    };
    layer_cases(&mut s)?;
    block_cases(&mut s)?;
    loss_cases(&mut s)?;
    Ok(s.cases)
}
