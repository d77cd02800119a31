#![allow(dead_code)]

use ctd::tensor::{conv2d, Conv2dGeometry, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seven nested loops in f64, no im2col, no shared code with the library.
pub fn naive_conv(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [b, cin, h, wd] = xs;
    let [cout, _, k, _] = ws;
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; b * cout * ho * wo];
    for n in 0..b {
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |bv| bv[o]);
                    for c in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((n * cin + c) * h + iy as usize) * wd + ix as usize;
                                let wi = ((o * cin + c) * k + ky) * k + kx;
                                acc += x[xi] * w[wi];
                            }
                        }
                    }
                    out[((n * cout + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, [b, cout, ho, wo])
}

#[derive(Clone, Debug)]
pub struct ConvInstance {
    pub x: Vec<f64>,
    pub xs: [usize; 4],
    pub w: Vec<f64>,
    pub ws: [usize; 4],
    pub bias: Option<Vec<f64>>,
    pub stride: usize,
    pub pad: usize,
}

impl ConvInstance {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let k = [1, 3, 5][rng.random_range(0..3)];
        let pad = rng.random_range(0..=k / 2 + 1);
        let stride = rng.random_range(1..=2);
        let h = rng.random_range(k.max(1)..=9);
        let wd = rng.random_range(k.max(1)..=9);
        let (b, cin, cout) = (
            rng.random_range(1..=2),
            rng.random_range(1..=4),
            rng.random_range(1..=4),
        );
        let xs = [b, cin, h, wd];
        let ws = [cout, cin, k, k];
        let x = (0..xs.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let w = (0..ws.iter().product::<usize>())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let bias = rng
            .random_bool(0.5)
            .then(|| (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect());
        ConvInstance {
            x,
            xs,
            w,
            ws,
            bias,
            stride,
            pad,
        }
    }

    /// Largest absolute deviation between the library conv and the oracle.
    pub fn max_error(&self) -> f64 {
        let [b, c, h, w] = self.xs;
        let [o, i, k, _] = self.ws;
        let x = Tensor::new(Shape::new(b, c, h, w), self.x.clone()).unwrap();
        let wt = Tensor::new(Shape::new(o, i, k, k), self.w.clone()).unwrap();
        let bt = self
            .bias
            .as_ref()
            .map(|bv| Tensor::new(Shape::new(1, o, 1, 1), bv.clone()).unwrap());
        let fast = conv2d(
            &x,
            &wt,
            bt.as_ref(),
            Conv2dGeometry::new(self.stride, self.pad),
        )
        .unwrap();
        let (slow, dims) = naive_conv(
            &self.x,
            self.xs,
            &self.w,
            self.ws,
            self.bias.as_deref(),
            self.stride,
            self.pad,
        );
        assert_eq!(fast.shape().dims(), dims);
        fast.to_vec()
            .iter()
            .zip(&slow)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Runs `count` seeded random instances and returns the worst error.
pub fn conv_oracle_sweep(seed: u64, count: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| ConvInstance::random(&mut rng).max_error())
        .fold(0.0, f64::max)
}
