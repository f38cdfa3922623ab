//! Batch normalization for batched 2D maps and single 3D volumes.
//!
//! Both variants normalize per channel; the shared core works on a (C, N)
//! view where N collects every element the channel statistics run over.
//! Training uses batch statistics and refreshes running estimates; eval
//! uses the running estimates and caches nothing.

use super::Param;
use ndarray::{Array1, Array2, Array4, ArrayD};

const BN_EPS: f32 = 1e-5;
/// Fraction of each batch statistic blended into the running estimate.
const BN_UPDATE: f32 = 0.1;

#[derive(Debug, Clone)]
struct BnCore {
    gamma: Param,
    beta: Param,
    running_mean: ArrayD<f32>,
    running_var: ArrayD<f32>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Array2<f32>,
    inv_std: Array1<f32>,
}

impl BnCore {
    fn new(channels: usize) -> Self {
        Self {
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
            running_mean: ArrayD::zeros(ndarray::IxDyn(&[channels])),
            running_var: ArrayD::from_elem(ndarray::IxDyn(&[channels]), 1.0),
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.count()
    }

    fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        let (c_n, n) = x.dim();
        assert_eq!(c_n, self.channels());
        assert!(n > 0);
        let x_s = x.as_slice().expect("x must be standard layout");
        let mut y = Array2::zeros((c_n, n));
        let y_s = y.as_slice_mut().unwrap();
        if train {
            let mut x_hat = Array2::zeros((c_n, n));
            let xh_s = x_hat.as_slice_mut().unwrap();
            let mut inv_std = Array1::zeros(c_n);
            for c in 0..c_n {
                let row = &x_s[c * n..(c + 1) * n];
                let mean = row.iter().sum::<f32>() / n as f32;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / n as f32;
                let is = 1.0 / (var + BN_EPS).sqrt();
                inv_std[c] = is;
                self.running_mean[[c]] = (1.0 - BN_UPDATE) * self.running_mean[[c]] + BN_UPDATE * mean;
                self.running_var[[c]] = (1.0 - BN_UPDATE) * self.running_var[[c]] + BN_UPDATE * var;
                let g = self.gamma.value[[c]];
                let b = self.beta.value[[c]];
                let xh_row = &mut xh_s[c * n..(c + 1) * n];
                let y_row = &mut y_s[c * n..(c + 1) * n];
                for ((xh, y), &v) in xh_row.iter_mut().zip(y_row.iter_mut()).zip(row) {
                    let norm = (v - mean) * is;
                    *xh = norm;
                    *y = g * norm + b;
                }
            }
            self.cache = Some(BnCache { x_hat, inv_std });
        } else {
            for c in 0..c_n {
                let row = &x_s[c * n..(c + 1) * n];
                let mean = self.running_mean[[c]];
                let is = 1.0 / (self.running_var[[c]] + BN_EPS).sqrt();
                let g = self.gamma.value[[c]];
                let b = self.beta.value[[c]];
                for (y, &v) in y_s[c * n..(c + 1) * n].iter_mut().zip(row) {
                    *y = g * (v - mean) * is + b;
                }
            }
        }
        y
    }

    fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let BnCache { x_hat, inv_std } =
            self.cache.take().expect("forward(train) must precede backward");
        let (c_n, n) = dy.dim();
        let dy_s = dy.as_slice().expect("dy must be standard layout");
        let xh_s = x_hat.as_slice().unwrap();
        let mut dx = Array2::zeros((c_n, n));
        let dx_s = dx.as_slice_mut().unwrap();
        for c in 0..c_n {
            let dy_row = &dy_s[c * n..(c + 1) * n];
            let xh_row = &xh_s[c * n..(c + 1) * n];
            let sum_dy: f32 = dy_row.iter().sum();
            let sum_dy_xh: f32 = dy_row.iter().zip(xh_row).map(|(&d, &h)| d * h).sum();
            self.gamma.grad[[c]] += sum_dy_xh;
            self.beta.grad[[c]] += sum_dy;
            let scale = self.gamma.value[[c]] * inv_std[c];
            let mean_dy = sum_dy / n as f32;
            let mean_dy_xh = sum_dy_xh / n as f32;
            for ((d, &g), &h) in dx_s[c * n..(c + 1) * n]
                .iter_mut()
                .zip(dy_row)
                .zip(xh_row)
            {
                *d = scale * (g - mean_dy - h * mean_dy_xh);
            }
        }
        dx
    }
}

/// BatchNorm over (B, C, H, W): statistics per channel across batch and
/// positions.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    core: BnCore,
}

fn to_cn(x: &Array4<f32>) -> Array2<f32> {
    let (b, c, h, w) = x.dim();
    let permuted = x.view().permuted_axes([1, 0, 2, 3]);
    permuted
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((c, b * h * w))
        .unwrap()
}

fn from_cn(m: Array2<f32>, b: usize, h: usize, w: usize) -> Array4<f32> {
    let c = m.nrows();
    let x = m.into_shape_with_order((c, b, h, w)).unwrap();
    x.view()
        .permuted_axes([1, 0, 2, 3])
        .as_standard_layout()
        .to_owned()
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            core: BnCore::new(channels),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("gamma", &mut self.core.gamma), ("beta", &mut self.core.beta)]
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut ArrayD<f32>)> {
        vec![
            ("running_mean", &mut self.core.running_mean),
            ("running_var", &mut self.core.running_var),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.core.gamma.count() + self.core.beta.count()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (b, _, h, w) = x.dim();
        let y = self.core.forward(&to_cn(x), train);
        from_cn(y, b, h, w)
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (b, _, h, w) = dy.dim();
        let dx = self.core.backward(&to_cn(dy));
        from_cn(dx, b, h, w)
    }
}

/// BatchNorm over a single (C, D, H, W) volume: statistics per channel
/// across all volume positions.
#[derive(Debug, Clone)]
pub struct BatchNormVol {
    core: BnCore,
}

impl BatchNormVol {
    pub fn new(channels: usize) -> Self {
        Self {
            core: BnCore::new(channels),
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("gamma", &mut self.core.gamma), ("beta", &mut self.core.beta)]
    }

    pub fn buffers_mut(&mut self) -> Vec<(&'static str, &mut ArrayD<f32>)> {
        vec![
            ("running_mean", &mut self.core.running_mean),
            ("running_var", &mut self.core.running_var),
        ]
    }

    pub fn param_count(&self) -> usize {
        self.core.gamma.count() + self.core.beta.count()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (c, d, h, w) = x.dim();
        let flat = x
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((c, d * h * w))
            .unwrap();
        let y = self.core.forward(&flat, train);
        y.into_shape_with_order((c, d, h, w)).unwrap()
    }

    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (c, d, h, w) = dy.dim();
        let flat = dy
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((c, d * h * w))
            .unwrap();
        let dx = self.core.backward(&flat);
        dx.into_shape_with_order((c, d, h, w)).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr2, Array, Axis};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_normalizes_each_channel() {
        let mut bn = BatchNorm2d::new(2);
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let x = Array::from_shape_simple_fn((4, 2, 3, 3), || r.random_range(-2.0f32..2.0));
        let y = bn.forward(&x, true);
        let flat = to_cn(&y);
        for c in 0..2 {
            let row = flat.row(c);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / row.len() as f32;
            assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn gamma_beta_shift_and_scale() {
        let mut bn = BatchNorm2d::new(1);
        bn.core.gamma.value.fill(3.0);
        bn.core.beta.value.fill(-1.0);
        let x = Array::from_shape_fn((2, 1, 1, 2), |(b, _, _, w)| (b * 2 + w) as f32);
        let y = bn.forward(&x, true);
        let flat = to_cn(&y);
        let mean = flat.row(0).mean().unwrap();
        assert!((mean - (-1.0)).abs() < 1e-5);
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let mut bn = BatchNorm2d::new(1);
        // Fresh layer: running mean 0, var 1, so eval is near-identity.
        let x = Array::from_elem((1, 1, 2, 2), 0.5f32);
        let y = bn.forward(&x, false);
        for &v in y.iter() {
            assert!((v - 0.5 / (1.0f32 + 1e-5).sqrt()).abs() < 1e-6);
        }
        // After many training batches the running stats absorb the batch
        // distribution and eval normalizes like train does.
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let data = Array::from_shape_simple_fn((8, 1, 4, 4), || 5.0 + 2.0 * r.random_range(-1.0f32..1.0));
        for _ in 0..200 {
            bn.forward(&data, true);
        }
        let y = bn.forward(&data, false);
        let flat = to_cn(&y);
        let mean = flat.row(0).mean().unwrap();
        assert!(mean.abs() < 0.05, "eval mean {mean}");
    }

    #[test]
    fn volume_norm_statistics_span_the_volume() {
        let mut bn = BatchNormVol::new(2);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x = Array::from_shape_simple_fn((2, 4, 3, 3), || r.random_range(-1.0f32..3.0));
        let y = bn.forward(&x, true);
        for c in 0..2 {
            let ch = y.index_axis(Axis(0), c);
            let mean = ch.mean().unwrap();
            assert!(mean.abs() < 1e-5);
        }
    }

    #[test]
    fn backward_gradients_match_finite_difference_on_tiny_case() {
        // Scalar-loss FD check on a 1-channel, 4-element case in f32; the
        // full-rank f64 checks live in the gradient test suite.
        let x = arr2(&[[0.5f32, -1.0, 2.0, 0.25]]);
        let weights = arr2(&[[1.0f32, 2.0, -1.0, 0.5]]);
        let loss = |bn: &mut BnCore, x: &Array2<f32>| -> f32 {
            let y = bn.forward(x, true);
            (&y * &weights).sum()
        };
        let mut bn = BnCore::new(1);
        bn.gamma.value.fill(1.5);
        bn.beta.value.fill(0.3);
        loss(&mut bn, &x);
        let dx = bn.backward(&weights);
        let h = 1e-3f32;
        for i in 0..4 {
            let mut xp = x.clone();
            xp[[0, i]] += h;
            let mut xm = x.clone();
            xm[[0, i]] -= h;
            let mut bn_p = BnCore::new(1);
            bn_p.gamma.value.fill(1.5);
            bn_p.beta.value.fill(0.3);
            let mut bn_m = bn_p.clone();
            let fd = (loss(&mut bn_p, &xp) - loss(&mut bn_m, &xm)) / (2.0 * h);
            assert!(
                (dx[[0, i]] - fd).abs() < 2e-2,
                "i {i}: analytic {} fd {fd}",
                dx[[0, i]]
            );
        }
    }
}
