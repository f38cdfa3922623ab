//! Conditional generator: noise plus a multi-hot condition in, a two-digit
//! canvas out.
//!
//! Noise and condition enter through separate projections onto a 4x7 seed
//! grid, concatenate along channels, and upsample through three
//! fractionally strided convolutions to 32x56. The extra four rows are
//! cropped symmetrically to the 28x56 canvas; tanh bounds the output to the
//! dataset's pixel range. BatchNorm sits on every block except the output
//! layer, per standard DCGAN practice.

use crate::nn::act::{LeakyRelu, Tanh};
use crate::nn::conv::ConvTranspose2d;
use crate::nn::linear::Linear;
use crate::nn::norm::BatchNorm2d;
use crate::nn::Param;
use ndarray::{s, Array2, Array4, ArrayD, Ix4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const LEAKY_SLOPE: f32 = 0.2;
const SEED_H: usize = 4;
const SEED_W: usize = 7;
/// Channels of the noise / condition seed projections.
const NOISE_CH: usize = 48;
const COND_CH: usize = 16;
/// Rows cropped off the top of the final 32-row map; same amount comes off
/// the bottom.
const CROP_TOP: usize = 2;

pub const OUT_H: usize = 28;
pub const OUT_W: usize = 56;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub noise_dim: usize,
    pub num_classes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            noise_dim: 100,
            num_classes: 10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    fc_noise: Linear,
    bn_noise: BatchNorm2d,
    act_noise: LeakyRelu<Ix4>,
    fc_cond: Linear,
    bn_cond: BatchNorm2d,
    act_cond: LeakyRelu<Ix4>,
    ct1: ConvTranspose2d,
    bn1: BatchNorm2d,
    act1: LeakyRelu<Ix4>,
    ct2: ConvTranspose2d,
    bn2: BatchNorm2d,
    act2: LeakyRelu<Ix4>,
    ct3: ConvTranspose2d,
    tanh: Tanh<Ix4>,
}

impl Generator {
    pub fn new(config: GeneratorConfig, rng: &mut impl Rng) -> Self {
        assert!(config.noise_dim > 0);
        assert!(config.num_classes >= 2);
        let seed = SEED_H * SEED_W;
        Self {
            fc_noise: Linear::new(config.noise_dim, NOISE_CH * seed, rng),
            bn_noise: BatchNorm2d::new(NOISE_CH),
            act_noise: LeakyRelu::new(LEAKY_SLOPE),
            fc_cond: Linear::new(config.num_classes, COND_CH * seed, rng),
            bn_cond: BatchNorm2d::new(COND_CH),
            act_cond: LeakyRelu::new(LEAKY_SLOPE),
            ct1: ConvTranspose2d::new(NOISE_CH + COND_CH, 32, (4, 4), 2, 1, rng),
            bn1: BatchNorm2d::new(32),
            act1: LeakyRelu::new(LEAKY_SLOPE),
            ct2: ConvTranspose2d::new(32, 16, (4, 4), 2, 1, rng),
            bn2: BatchNorm2d::new(16),
            act2: LeakyRelu::new(LEAKY_SLOPE),
            ct3: ConvTranspose2d::new(16, 1, (4, 4), 2, 1, rng),
            tanh: Tanh::new(),
            config,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Standard normal latent batch.
    pub fn sample_noise(batch: usize, noise_dim: usize, rng: &mut impl Rng) -> Array2<f32> {
        Array2::from_shape_simple_fn((batch, noise_dim), || StandardNormal.sample(rng))
    }

    /// noise (B, noise_dim) and condition (B, num_classes) to images
    /// (B, 1, 28, 56) in [-1, 1].
    pub fn forward(&mut self, noise: &Array2<f32>, cond: &Array2<f32>, train: bool) -> Array4<f32> {
        let b = noise.nrows();
        assert_eq!(noise.ncols(), self.config.noise_dim);
        assert_eq!(cond.dim(), (b, self.config.num_classes));

        let n = self.fc_noise.forward(noise, train);
        let n = n.into_shape_with_order((b, NOISE_CH, SEED_H, SEED_W)).unwrap();
        let n = self.act_noise.forward(self.bn_noise.forward(&n, train), train);

        let c = self.fc_cond.forward(cond, train);
        let c = c.into_shape_with_order((b, COND_CH, SEED_H, SEED_W)).unwrap();
        let c = self.act_cond.forward(self.bn_cond.forward(&c, train), train);

        let seed = ndarray::concatenate(ndarray::Axis(1), &[n.view(), c.view()]).unwrap();
        let x = self.ct1.forward(&seed, train);
        let x = self.act1.forward(self.bn1.forward(&x, train), train);
        let x = self.ct2.forward(&x, train);
        let x = self.act2.forward(self.bn2.forward(&x, train), train);
        let x = self.ct3.forward(&x, train);
        let cropped = x
            .slice(s![.., .., CROP_TOP..CROP_TOP + OUT_H, ..])
            .to_owned();
        self.tanh.forward(&cropped, train)
    }

    /// Backpropagates d(loss)/d(image) into parameter gradients.
    pub fn backward(&mut self, dy: &Array4<f32>) {
        let (b, c, h, w) = dy.dim();
        assert_eq!((c, h, w), (1, OUT_H, OUT_W));
        let d = self.tanh.backward(dy.clone());
        let mut padded = Array4::zeros((b, 1, OUT_H + 2 * CROP_TOP, OUT_W));
        padded
            .slice_mut(s![.., .., CROP_TOP..CROP_TOP + OUT_H, ..])
            .assign(&d);
        let d = self.ct3.backward(&padded);
        let d = self.bn2.backward(&self.act2.backward(d));
        let d = self.ct2.backward(&d);
        let d = self.bn1.backward(&self.act1.backward(d));
        let d = self.ct1.backward(&d);

        let dn = d.slice(s![.., ..NOISE_CH, .., ..]).to_owned();
        let dc = d.slice(s![.., NOISE_CH.., .., ..]).to_owned();

        let dn = self.bn_noise.backward(&self.act_noise.backward(dn));
        let dn = dn
            .into_shape_with_order((b, NOISE_CH * SEED_H * SEED_W))
            .unwrap();
        self.fc_noise.backward(&dn);

        let dc = self.bn_cond.backward(&self.act_cond.backward(dc));
        let dc = dc
            .into_shape_with_order((b, COND_CH * SEED_H * SEED_W))
            .unwrap();
        self.fc_cond.backward(&dc);
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (layer, params) in [
            ("fc_noise", self.fc_noise.params_mut()),
            ("bn_noise", self.bn_noise.params_mut()),
            ("fc_cond", self.fc_cond.params_mut()),
            ("bn_cond", self.bn_cond.params_mut()),
            ("ct1", self.ct1.params_mut()),
            ("bn1", self.bn1.params_mut()),
            ("ct2", self.ct2.params_mut()),
            ("bn2", self.bn2.params_mut()),
            ("ct3", self.ct3.params_mut()),
        ] {
            for (name, p) in params {
                out.push((format!("{layer}.{name}"), p));
            }
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut ArrayD<f32>)> {
        let mut out = Vec::new();
        for (layer, buffers) in [
            ("bn_noise", self.bn_noise.buffers_mut()),
            ("bn_cond", self.bn_cond.buffers_mut()),
            ("bn1", self.bn1.buffers_mut()),
            ("bn2", self.bn2.buffers_mut()),
        ] {
            for (name, b) in buffers {
                out.push((format!("{layer}.{name}"), b));
            }
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params_mut().iter().map(|(_, p)| p.count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Generator, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Generator::new(GeneratorConfig::default(), &mut rng);
        (g, rng)
    }

    #[test]
    fn output_is_canvas_shaped_and_bounded() {
        let (mut g, mut rng) = small();
        let noise = Generator::sample_noise(3, 100, &mut rng);
        let cond = Array2::from_elem((3, 10), 0.0);
        let y = g.forward(&noise, &cond, false);
        assert_eq!(y.dim(), (3, 1, OUT_H, OUT_W));
        assert!(y.iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn same_seed_same_image() {
        let mut r1 = ChaCha8Rng::seed_from_u64(4);
        let mut r2 = ChaCha8Rng::seed_from_u64(4);
        let mut g1 = Generator::new(GeneratorConfig::default(), &mut r1);
        let mut g2 = Generator::new(GeneratorConfig::default(), &mut r2);
        let noise = Generator::sample_noise(2, 100, &mut r1);
        let noise2 = Generator::sample_noise(2, 100, &mut r2);
        assert_eq!(noise, noise2);
        let cond = Array2::from_elem((2, 10), 1.0);
        assert_eq!(g1.forward(&noise, &cond, false), g2.forward(&noise2, &cond, false));
    }

    #[test]
    fn condition_changes_the_output() {
        let (mut g, mut rng) = small();
        let noise = Generator::sample_noise(2, 100, &mut rng);
        let mut c1 = Array2::zeros((2, 10));
        c1[[0, 0]] = 1.0;
        c1[[0, 1]] = 1.0;
        c1[[1, 0]] = 1.0;
        c1[[1, 1]] = 1.0;
        let mut c2 = c1.clone();
        c2[[0, 1]] = 0.0;
        c2[[0, 7]] = 1.0;
        let y1 = g.forward(&noise, &c1, false);
        let y2 = g.forward(&noise, &c2, false);
        let diff = (&y1 - &y2).mapv(f32::abs).sum();
        assert!(diff > 1e-3, "condition had no effect (diff {diff})");
    }

    #[test]
    fn parameter_count_is_pinned() {
        // fc_noise 135744, bn_noise 96, fc_cond 4928, bn_cond 32,
        // ct1 32800, bn1 64, ct2 8208, bn2 32, ct3 257.
        let (mut g, _) = small();
        assert_eq!(g.param_count(), 182_161);
    }

    #[test]
    fn backward_touches_every_parameter() {
        let (mut g, mut rng) = small();
        let noise = Generator::sample_noise(4, 100, &mut rng);
        let mut cond = Array2::zeros((4, 10));
        for i in 0..4 {
            cond[[i, i]] = 1.0;
            cond[[i, i + 1]] = 1.0;
        }
        let y = g.forward(&noise, &cond, true);
        g.backward(&Array4::from_elem(y.dim(), 1.0));
        for (name, p) in g.named_params_mut() {
            let norm: f32 = p.grad.iter().map(|&v| v * v).sum();
            assert!(norm.is_finite(), "{name} grad not finite");
            assert!(norm > 0.0, "{name} grad all zero");
        }
    }

    #[test]
    fn zero_grads_resets_accumulators() {
        let (mut g, mut rng) = small();
        let noise = Generator::sample_noise(2, 100, &mut rng);
        let cond = Array2::from_elem((2, 10), 0.5);
        let y = g.forward(&noise, &cond, true);
        g.backward(&Array4::from_elem(y.dim(), 1.0));
        g.zero_grads();
        for (_, p) in g.named_params_mut() {
            assert!(p.grad.iter().all(|&v| v == 0.0));
        }
    }
}
