use ctd::backbone::{BackboneConfig, Encoder};
use ctd::data::{augment_traced, generate_dataset, generate_sample, AugmentConfig, SyntheticSpec};
use ctd::loss::{bce_loss, iou_loss, l1_loss, saliency_loss, total_loss, LossWeights, Reduction};
use ctd::metrics::{
    boundary_from_mask, mae, max_f_measure, Connectivity, EvalPair, FMeasureConfig, Map,
};
use ctd::model::{Ctd, VariantConfig, VariantName};
use ctd::nn::{count_parameters, Ffm, Mode, ParamInit};
use ctd::tensor::{
    bilinear_upsample, channel_pool, global_avg_pool, pool2d, sum_all, PoolKind, Shape, Tensor,
};
use ctd::train::lr_schedule;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn map_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(0.0f32..=1.0, h * w)
}

fn binary_strategy(h: usize, w: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f32), h * w)
}

fn t64(shape: [usize; 4], v: &[f32]) -> Tensor<f64> {
    Tensor::new(shape, v.iter().map(|&x| x as f64).collect()).unwrap()
}

fn all_equal(t: &Tensor<f64>, v: f64) -> bool {
    t.to_vec().iter().all(|x| (x - v).abs() < 1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn constant_inputs_stay_constant(v in -3.0f64..3.0, h in 2usize..9, w in 2usize..9, oh in 1usize..13, ow in 1usize..13) {
        let x = Tensor::full([2, 3, h, w], v);
        prop_assert!(all_equal(&bilinear_upsample(&x, oh, ow).unwrap(), v));
        prop_assert!(all_equal(&pool2d(&x, PoolKind::Avg, 2, 2, 0).unwrap(), v));
        prop_assert!(all_equal(&global_avg_pool(&x), v));
        prop_assert!(all_equal(&channel_pool(&x, PoolKind::Avg), v));
    }

    #[test]
    fn max_pool_dominates_avg_pool(data in prop::collection::vec(-2.0f64..2.0, 2 * 6 * 6), k in 1usize..4, s in 1usize..3) {
        let x = Tensor::new([1, 2, 6, 6], data).unwrap();
        let mx = pool2d(&x, PoolKind::Max, k, s, 0).unwrap().to_vec();
        let av = pool2d(&x, PoolKind::Avg, k, s, 0).unwrap().to_vec();
        prop_assert!(mx.iter().zip(&av).all(|(m, a)| m >= &(a - 1e-12)));
    }

    #[test]
    fn losses_are_bounded(p in map_strategy(4, 4), g in binary_strategy(4, 4)) {
        let (p, g) = (t64([1, 1, 4, 4], &p), t64([1, 1, 4, 4], &g));
        let iou = iou_loss(&p, &g).unwrap().item().unwrap();
        prop_assert!((0.0..=1.0).contains(&iou));
        prop_assert!(bce_loss(&p, &g, Reduction::Mean).unwrap().item().unwrap() >= 0.0);
        prop_assert!(l1_loss(&p, &g, Reduction::Sum).unwrap().item().unwrap() >= 0.0);
    }

    #[test]
    fn perfect_prediction_has_near_zero_loss(g in binary_strategy(5, 5)) {
        let g = t64([1, 1, 5, 5], &g);
        let terms = saliency_loss(&g, &g, &LossWeights::default()).unwrap();
        prop_assert!(terms.total.item().unwrap() < 1e-5);
    }

    #[test]
    fn losses_are_permutation_invariant(p in map_strategy(3, 4), g in binary_strategy(3, 4), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..12).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pp: Vec<f32> = idx.iter().map(|&i| p[i]).collect();
        let gp: Vec<f32> = idx.iter().map(|&i| g[i]).collect();
        let w = LossWeights::default();
        let a = saliency_loss(&t64([1, 1, 3, 4], &p), &t64([1, 1, 3, 4], &g), &w).unwrap();
        let b = saliency_loss(&t64([1, 1, 3, 4], &pp), &t64([1, 1, 3, 4], &gp), &w).unwrap();
        prop_assert!((a.total.item().unwrap() - b.total.item().unwrap()).abs() < 1e-12);
    }

    #[test]
    fn l1_is_symmetric(p in map_strategy(4, 4), q in map_strategy(4, 4)) {
        let (p, q) = (t64([1, 1, 4, 4], &p), t64([1, 1, 4, 4], &q));
        let a = l1_loss(&p, &q, Reduction::Sum).unwrap().item().unwrap();
        let b = l1_loss(&q, &p, Reduction::Sum).unwrap().item().unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn mae_is_symmetric_and_bounded(p in binary_strategy(6, 6), g in binary_strategy(6, 6)) {
        let (pm, gm) = (Map::new(6, 6, p).unwrap(), Map::new(6, 6, g).unwrap());
        let a = mae(&EvalPair::new(pm.clone(), gm.clone()).unwrap());
        let b = mae(&EvalPair::new(gm, pm).unwrap());
        prop_assert_eq!(a, b);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn f_curve_is_bounded_and_max_is_pointwise(p in map_strategy(6, 6), g in binary_strategy(6, 6)) {
        let pair = EvalPair::new(Map::new(6, 6, p).unwrap(), Map::new(6, 6, g).unwrap()).unwrap();
        let curve = max_f_measure(&[pair], &FMeasureConfig::default()).unwrap();
        prop_assert!(curve.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let top = curve.values.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert_eq!(curve.max, top);
    }

    #[test]
    fn boundary_is_subset_without_interior(m in binary_strategy(7, 8)) {
        let mask = Map::new(7, 8, m).unwrap();
        let b = boundary_from_mask(&mask, Connectivity::Four).unwrap();
        for y in 0..7 {
            for x in 0..8 {
                prop_assert!(b.at(y, x) <= mask.at(y, x));
                let interior = y > 0 && x > 0 && y < 6 && x < 7
                    && mask.at(y, x) == 1.0
                    && [mask.at(y - 1, x), mask.at(y + 1, x), mask.at(y, x - 1), mask.at(y, x + 1)].iter().all(|&v| v == 1.0);
                if interior {
                    prop_assert_eq!(b.at(y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn schedule_is_nonnegative_and_bounded(total in 10usize..2000, frac in 0.01f64..0.5, step in 0usize..2000) {
        let lr = lr_schedule(step.min(total), total, 0.05, frac);
        prop_assert!((0.0..=0.05 + 1e-15).contains(&lr));
    }

    #[test]
    fn ffm_is_commutative(a in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 3 * 3), b in prop::collection::vec(-1.0f64..1.0, 2 * 3 * 3 * 3)) {
        let ffm: Ffm<f64> = Ffm::new(&mut ParamInit::new(3), 3);
        let (x, y) = (Tensor::new([2, 3, 3, 3], a).unwrap(), Tensor::new([2, 3, 3, 3], b).unwrap());
        let p = ffm.forward(&x, &y, Mode::Train).unwrap().to_vec();
        let q = ffm.forward(&y, &x, Mode::Train).unwrap().to_vec();
        prop_assert_eq!(p, q);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn augmentation_never_invents_foreground(index in 0u64..500, seed in any::<u64>()) {
        let spec = SyntheticSpec { size: 80, ..Default::default() };
        let sample = generate_sample(&spec, index).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (out, trace) = augment_traced(&sample, &mut rng, 64, &AugmentConfig::default()).unwrap();
        let src = |o: usize, n_in: usize| -> (usize, usize) {
            let s = ((o as f64 + 0.5) * n_in as f64 / trace.resized as f64 - 0.5).max(0.0);
            let lo = (s.floor() as usize).min(n_in - 1);
            (lo, (lo + 1).min(n_in - 1))
        };
        for y in 0..64 {
            for x in 0..64 {
                if out.mask.at(y, x) == 0.0 {
                    continue;
                }
                let cx = if trace.flipped { 63 - x } else { x };
                let (y0, y1) = src(y + trace.offset.0, sample.height);
                let (x0, x1) = src(cx + trace.offset.1, sample.width);
                let any = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].iter().any(|&(a, b)| sample.mask.at(a, b) == 1.0);
                prop_assert!(any, "foreground at ({y},{x}) has no source support");
            }
        }
        prop_assert!(out.mask.is_binary());
    }
}

#[test]
fn doubling_tiny_width_roughly_quadruples_parameters() {
    let base = BackboneConfig::tiny();
    let n1 = count_parameters(&Encoder::<f32>::new(&base, &mut ParamInit::new(0)).unwrap()) as f64;
    let n2 = count_parameters(
        &Encoder::<f32>::new(&base.clone().with_width(2.0), &mut ParamInit::new(0)).unwrap(),
    ) as f64;
    let ratio = n2 / n1;
    assert!((ratio - 4.0).abs() <= 0.2, "ratio {ratio}");
}

#[test]
fn parameter_count_survives_forward_and_backward() {
    let model: Ctd<f64> = Ctd::new(&VariantConfig::desk(VariantName::M), 1).unwrap();
    let before = count_parameters(&model);
    let x = Tensor::from_fn([1, 3, 64, 64], |i| (i % 17) as f64 / 17.0);
    let heads = model.forward(&x, Mode::Train).unwrap();
    sum_all(&heads.d_p123.prediction).backward().unwrap();
    assert_eq!(count_parameters(&model), before);
}

#[test]
fn total_loss_is_linear_in_each_alpha() {
    let model: Ctd<f64> = Ctd::new(&VariantConfig::desk(VariantName::S), 2).unwrap();
    let x = Tensor::from_fn([1, 3, 64, 64], |i| ((i * 7) % 23) as f64 / 23.0);
    let heads = model.forward(&x, Mode::Eval).unwrap();
    let g = Tensor::from_fn(Shape::new(1, 1, 64, 64), |i| {
        ((i / 64) > 20 && (i % 64) < 40) as u8 as f64
    });
    let at = |k: usize, a: f64| {
        let mut w = LossWeights::default();
        w.alpha[k] = a;
        total_loss(&heads, &g, &g, &w)
            .unwrap()
            .total
            .item()
            .unwrap()
    };
    for k in 0..5 {
        let (l0, l1, l3) = (at(k, 0.0), at(k, 1.0), at(k, 3.0));
        assert!((l3 - l0 - 3.0 * (l1 - l0)).abs() < 1e-9, "head {k}");
    }
}

#[test]
fn gradient_routing_separates_boundary_and_saliency_heads() {
    let model: Ctd<f64> = Ctd::new(&VariantConfig::desk(VariantName::M), 5).unwrap();
    let x = Tensor::from_fn([2, 3, 64, 64], |i| ((i * 11) % 29) as f64 / 29.0);
    let g = Tensor::from_fn(Shape::new(2, 1, 64, 64), |i| ((i % 64) > 30) as u8 as f64);
    let probe = |w: LossWeights| {
        let heads = model.forward(&x, Mode::Train).unwrap();
        total_loss(&heads, &g, &g, &w)
            .unwrap()
            .total
            .backward()
            .unwrap();
        let grads = ctd::nn::named_parameters(&model)
            .into_iter()
            .map(|(n, t)| {
                let nz = t.grad().is_some_and(|g| g.iter().any(|v| *v != 0.0));
                t.zero_grad();
                (n, nz)
            })
            .collect::<Vec<_>>();
        grads
    };
    let boundary_only = probe(LossWeights {
        alpha: [0.0; 5],
        ..Default::default()
    });
    let saliency_only = probe(LossWeights {
        boundary: 0.0,
        ..Default::default()
    });
    for ((name, b), (_, s)) in boundary_only.iter().zip(&saliency_only) {
        if name.starts_with("heads.d_p3.") {
            assert!(
                *b && !*s,
                "{name}: boundary head must see only the boundary loss"
            );
        } else if name.starts_with("heads.") {
            assert!(
                !*b && *s,
                "{name}: saliency head must see only saliency losses"
            );
        }
    }
}

#[test]
fn synthetic_datasets_are_reproducible() {
    let spec = SyntheticSpec {
        size: 64,
        seed: 99,
        ..Default::default()
    };
    let a = generate_dataset(&spec, 6).unwrap();
    let b = generate_dataset(&spec, 6).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.mask.data, y.mask.data);
    }
}

#[test]
fn schedule_is_continuous_with_single_peak() {
    let (total, max) = (400, 0.1);
    let lrs: Vec<f64> = (0..=total)
        .map(|s| lr_schedule(s, total, max, 0.1))
        .collect();
    let peak = lrs.iter().position(|&v| v == max).unwrap();
    assert_eq!(lrs.iter().filter(|&&v| v == max).count(), 1);
    assert!(lrs[..=peak].windows(2).all(|w| w[1] > w[0]));
    assert!(lrs[peak..].windows(2).all(|w| w[1] < w[0]));
    assert!(lrs
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() <= max / 40.0 + 1e-12));
}
