//! Dual-branch conditional discriminator.
//!
//! Branch one scores each sample on its own: image and broadcast condition
//! meet in separate stem convolutions, concatenate, and reduce to one logit
//! per sample. Branch two stacks the whole minibatch into a single 3D
//! volume (depth = batch) and convolves across samples, producing one
//! shared logit that reflects batch-level statistics such as repeated
//! outputs. A learned attention layer weighs the two logits per sample.
//!
//! Branch two is deliberately small: its parameter budget must stay under
//! 20% of branch one so per-sample discrimination keeps most of the
//! capacity. Construction enforces the cap.

use crate::nn::act::LeakyRelu;
use crate::nn::conv::Conv2d;
use crate::nn::conv3d::Conv3d;
use crate::nn::linear::Linear;
use crate::nn::norm::{BatchNorm2d, BatchNormVol};
use crate::nn::Param;
use ndarray::{s, Array1, Array2, Array4, ArrayD, Ix4};
use rand::Rng;

const LEAKY_SLOPE: f32 = 0.2;

/// Maximum branch-two parameter share relative to branch one.
pub const BRANCH2_BUDGET: f64 = 0.20;

#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorConfig {
    pub num_classes: usize,
    /// When false, the volume branch and fusion are bypassed entirely:
    /// the fused score is branch one's score, alpha = 1, beta = 0.
    pub d2_enabled: bool,
    /// Channel widths of the three volume-branch conv layers. Construction
    /// panics if the resulting branch breaches [`BRANCH2_BUDGET`].
    pub branch2_channels: [usize; 3],
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            num_classes: 10,
            d2_enabled: true,
            branch2_channels: B2_CH,
        }
    }
}

/// A minibatch rearranged as one 3D volume: (B, 1, H, W) -> (1, B, H, W).
/// Depth is the sample axis, so 3D kernels see cross-sample structure.
pub struct BatchVolume(pub Array4<f32>);

impl BatchVolume {
    pub fn from_batch(images: &Array4<f32>) -> Self {
        let (b, c, h, w) = images.dim();
        assert_eq!(c, 1, "volume branch expects single-channel images");
        assert!(b >= 2, "a batch volume needs at least 2 samples, got {b}");
        let mut vol = Array4::zeros((1, b, h, w));
        vol.slice_mut(s![0, .., .., ..])
            .assign(&images.slice(s![.., 0, .., ..]));
        Self(vol)
    }

    /// Adjoint of [`from_batch`] for gradients: (1, B, H, W) -> (B, 1, H, W).
    pub fn unstack_grad(grad: &Array4<f32>) -> Array4<f32> {
        let (c, b, h, w) = grad.dim();
        assert_eq!(c, 1);
        let mut out = Array4::zeros((b, 1, h, w));
        out.slice_mut(s![.., 0, .., ..])
            .assign(&grad.slice(s![0, .., .., ..]));
        out
    }
}

/// Per-sample scoring branch.
#[derive(Debug, Clone)]
struct BranchOne {
    conv_img: Conv2d,
    bn_img: BatchNorm2d,
    act_img: LeakyRelu<Ix4>,
    conv_cond: Conv2d,
    bn_cond: BatchNorm2d,
    act_cond: LeakyRelu<Ix4>,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    act2: LeakyRelu<Ix4>,
    conv3: Conv2d,
    bn3: BatchNorm2d,
    act3: LeakyRelu<Ix4>,
    head: Linear,
    img_channels: usize,
    head_dim: (usize, usize, usize),
}

const B1_IMG_CH: usize = 16;
const B1_COND_CH: usize = 8;
const B1_MID_CH: usize = 48;
const B1_TOP_CH: usize = 96;

impl BranchOne {
    fn new(num_classes: usize, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let conv_img = Conv2d::new(1, B1_IMG_CH, (4, 4), 2, 1, rng);
        let conv_cond = Conv2d::new(num_classes, B1_COND_CH, (4, 4), 2, 1, rng);
        let conv2 = Conv2d::new(B1_IMG_CH + B1_COND_CH, B1_MID_CH, (4, 4), 2, 1, rng);
        let conv3 = Conv2d::new(B1_MID_CH, B1_TOP_CH, (4, 4), 2, 1, rng);
        let (h1, w1) = conv_img.out_shape(h, w);
        let (h2, w2) = conv2.out_shape(h1, w1);
        let (h3, w3) = conv3.out_shape(h2, w2);
        let head_dim = (B1_TOP_CH, h3, w3);
        Self {
            head: Linear::new(B1_TOP_CH * h3 * w3, 1, rng),
            conv_img,
            bn_img: BatchNorm2d::new(B1_IMG_CH),
            act_img: LeakyRelu::new(LEAKY_SLOPE),
            conv_cond,
            bn_cond: BatchNorm2d::new(B1_COND_CH),
            act_cond: LeakyRelu::new(LEAKY_SLOPE),
            conv2,
            bn2: BatchNorm2d::new(B1_MID_CH),
            act2: LeakyRelu::new(LEAKY_SLOPE),
            conv3,
            bn3: BatchNorm2d::new(B1_TOP_CH),
            act3: LeakyRelu::new(LEAKY_SLOPE),
            img_channels: 1,
            head_dim,
        }
    }

    fn forward(&mut self, x: &Array4<f32>, cond_sp: &Array4<f32>, train: bool) -> Array1<f32> {
        let b = x.dim().0;
        assert_eq!(x.dim().1, self.img_channels);
        let xi = self.conv_img.forward(x, train);
        let xi = self.act_img.forward(self.bn_img.forward(&xi, train), train);
        let xc = self.conv_cond.forward(cond_sp, train);
        let xc = self.act_cond.forward(self.bn_cond.forward(&xc, train), train);
        let cat = ndarray::concatenate(ndarray::Axis(1), &[xi.view(), xc.view()]).unwrap();
        let y = self.conv2.forward(&cat, train);
        let y = self.act2.forward(self.bn2.forward(&y, train), train);
        let y = self.conv3.forward(&y, train);
        let y = self.act3.forward(self.bn3.forward(&y, train), train);
        let (c3, h3, w3) = self.head_dim;
        let flat = y.into_shape_with_order((b, c3 * h3 * w3)).unwrap();
        let logits = self.head.forward(&flat, train);
        logits.column(0).to_owned()
    }

    /// Returns d(loss)/d(image input).
    fn backward(&mut self, dlogit: &Array1<f32>) -> Array4<f32> {
        let b = dlogit.len();
        let dl = dlogit.view().insert_axis(ndarray::Axis(1)).to_owned();
        let dflat = self.head.backward(&dl);
        let (c3, h3, w3) = self.head_dim;
        let dy = dflat.into_shape_with_order((b, c3, h3, w3)).unwrap();
        let dy = self.bn3.backward(&self.act3.backward(dy));
        let dy = self.conv3.backward(&dy);
        let dy = self.bn2.backward(&self.act2.backward(dy));
        let dcat = self.conv2.backward(&dy);
        let dxi = dcat.slice(s![.., ..B1_IMG_CH, .., ..]).to_owned();
        let dxc = dcat.slice(s![.., B1_IMG_CH.., .., ..]).to_owned();
        // Condition planes are inputs, not activations; their gradient stops
        // at the stem after updating its parameters.
        let dxc = self.bn_cond.backward(&self.act_cond.backward(dxc));
        let _ = self.conv_cond.backward(&dxc);
        let dxi = self.bn_img.backward(&self.act_img.backward(dxi));
        self.conv_img.backward(&dxi)
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (layer, params) in [
            ("conv_img", self.conv_img.params_mut()),
            ("bn_img", self.bn_img.params_mut()),
            ("conv_cond", self.conv_cond.params_mut()),
            ("bn_cond", self.bn_cond.params_mut()),
            ("conv2", self.conv2.params_mut()),
            ("bn2", self.bn2.params_mut()),
            ("conv3", self.conv3.params_mut()),
            ("bn3", self.bn3.params_mut()),
            ("head", self.head.params_mut()),
        ] {
            for (name, p) in params {
                out.push((format!("{layer}.{name}"), p));
            }
        }
        out
    }

    fn named_buffers_mut(&mut self) -> Vec<(String, &mut ArrayD<f32>)> {
        let mut out = Vec::new();
        for (layer, buffers) in [
            ("bn_img", self.bn_img.buffers_mut()),
            ("bn_cond", self.bn_cond.buffers_mut()),
            ("bn2", self.bn2.buffers_mut()),
            ("bn3", self.bn3.buffers_mut()),
        ] {
            for (name, b) in buffers {
                out.push((format!("{layer}.{name}"), b));
            }
        }
        out
    }

    fn param_count(&mut self) -> usize {
        self.named_params_mut().iter().map(|(_, p)| p.count()).sum()
    }
}

const B2_CH: [usize; 3] = [4, 8, 16];
const B2_KERNEL: (usize, usize, usize) = (3, 4, 4);
const B2_STRIDE: (usize, usize, usize) = (2, 2, 2);
const B2_PAD: (usize, usize, usize) = (1, 1, 1);

/// Whole-batch volume branch: one shared logit for the minibatch.
///
/// Public so it can be trained on its own, e.g. as a binary probe that
/// separates homogeneous batches from diverse ones.
#[derive(Debug, Clone)]
pub struct VolumeCritic {
    conv1: Conv3d,
    bn1: BatchNormVol,
    act1: LeakyRelu<Ix4>,
    conv2: Conv3d,
    bn2: BatchNormVol,
    act2: LeakyRelu<Ix4>,
    conv3: Conv3d,
    bn3: BatchNormVol,
    act3: LeakyRelu<Ix4>,
    head: Linear,
    pool_dim: Option<(usize, usize, usize)>,
}

impl VolumeCritic {
    pub fn new(channels: [usize; 3], rng: &mut impl Rng) -> Self {
        Self {
            conv1: Conv3d::new(1, channels[0], B2_KERNEL, B2_STRIDE, B2_PAD, rng),
            bn1: BatchNormVol::new(channels[0]),
            act1: LeakyRelu::new(LEAKY_SLOPE),
            conv2: Conv3d::new(channels[0], channels[1], B2_KERNEL, B2_STRIDE, B2_PAD, rng),
            bn2: BatchNormVol::new(channels[1]),
            act2: LeakyRelu::new(LEAKY_SLOPE),
            conv3: Conv3d::new(channels[1], channels[2], B2_KERNEL, B2_STRIDE, B2_PAD, rng),
            bn3: BatchNormVol::new(channels[2]),
            act3: LeakyRelu::new(LEAKY_SLOPE),
            head: Linear::new(channels[2], 1, rng),
            pool_dim: None,
        }
    }

    pub fn forward(&mut self, volume: &BatchVolume, train: bool) -> f32 {
        let y = self.conv1.forward(&volume.0, train);
        let y = self.act1.forward(self.bn1.forward(&y, train), train);
        let y = self.conv2.forward(&y, train);
        let y = self.act2.forward(self.bn2.forward(&y, train), train);
        let y = self.conv3.forward(&y, train);
        let y = self.act3.forward(self.bn3.forward(&y, train), train);
        let (c, d, h, w) = y.dim();
        // Global average pool keeps the head independent of batch size.
        let mut pooled = Array2::zeros((1, c));
        for ci in 0..c {
            pooled[[0, ci]] = y.index_axis(ndarray::Axis(0), ci).mean().unwrap();
        }
        if train {
            self.pool_dim = Some((d, h, w));
        }
        self.head.forward(&pooled, train)[[0, 0]]
    }

    /// Returns d(loss)/d(volume).
    pub fn backward(&mut self, dlogit: f32) -> Array4<f32> {
        let (d, h, w) = self.pool_dim.take().expect("forward(train) must precede backward");
        let dl = Array2::from_elem((1, 1), dlogit);
        let dpool = self.head.backward(&dl);
        let c = dpool.ncols();
        let n = (d * h * w) as f32;
        let mut dy = Array4::zeros((c, d, h, w));
        for ci in 0..c {
            dy.index_axis_mut(ndarray::Axis(0), ci).fill(dpool[[0, ci]] / n);
        }
        let dy = self.bn3.backward(&self.act3.backward(dy));
        let dy = self.conv3.backward(&dy);
        let dy = self.bn2.backward(&self.act2.backward(dy));
        let dy = self.conv2.backward(&dy);
        let dy = self.bn1.backward(&self.act1.backward(dy));
        self.conv1.backward(&dy)
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (layer, params) in [
            ("conv1", self.conv1.params_mut()),
            ("bn1", self.bn1.params_mut()),
            ("conv2", self.conv2.params_mut()),
            ("bn2", self.bn2.params_mut()),
            ("conv3", self.conv3.params_mut()),
            ("bn3", self.bn3.params_mut()),
            ("head", self.head.params_mut()),
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
            ("bn1", self.bn1.buffers_mut()),
            ("bn2", self.bn2.buffers_mut()),
            ("bn3", self.bn3.buffers_mut()),
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

macro_rules! impl_fuse_scalar {
    ($name:ident, $t:ty) => {
        /// Attention fusion of one sample's branch scores. Returns
        /// (fused, alpha, beta) for weights `a` (2x2) and bias `b`:
        /// [alpha, beta] = leaky_relu(a . [d1, d2] + b),
        /// fused = alpha * d1 + beta * d2.
        pub fn $name(a: &[[$t; 2]; 2], b: &[$t; 2], d1: $t, d2: $t, slope: $t) -> ($t, $t, $t) {
            let pre0 = a[0][0] * d1 + a[0][1] * d2 + b[0];
            let pre1 = a[1][0] * d1 + a[1][1] * d2 + b[1];
            let alpha = if pre0 > 0.0 { pre0 } else { slope * pre0 };
            let beta = if pre1 > 0.0 { pre1 } else { slope * pre1 };
            (alpha * d1 + beta * d2, alpha, beta)
        }
    };
}

impl_fuse_scalar!(fuse_scalar, f32);
impl_fuse_scalar!(fuse_scalar_f64, f64);

/// Learned per-sample attention over the two branch scores.
#[derive(Debug, Clone)]
pub struct Fusion {
    pub a: Param,
    pub b: Param,
    cache: Option<FusionCache>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    d1: Array1<f32>,
    d2: f32,
    pre: Array2<f32>,
    alpha: Array1<f32>,
    beta: Array1<f32>,
}

impl Fusion {
    /// Identity weights and unit bias: with small early logits the fused
    /// score starts near d1 + d2, so both branches receive gradient from
    /// the first step.
    #[allow(clippy::new_without_default)]
    pub fn new() -> Self {
        let a = Param::new(
            ndarray::arr2(&[[1.0f32, 0.0], [0.0, 1.0]]).into_dyn(),
        );
        let b = Param::new(ndarray::arr1(&[1.0f32, 1.0]).into_dyn());
        Self { a, b, cache: None }
    }

    pub fn weights(&self) -> ([[f32; 2]; 2], [f32; 2]) {
        (
            [
                [self.a.value[[0, 0]], self.a.value[[0, 1]]],
                [self.a.value[[1, 0]], self.a.value[[1, 1]]],
            ],
            [self.b.value[[0]], self.b.value[[1]]],
        )
    }

    pub fn forward(&mut self, d1: &Array1<f32>, d2: f32, train: bool) -> (Array1<f32>, Array1<f32>, Array1<f32>) {
        let n = d1.len();
        let (a, b) = self.weights();
        let mut fused = Array1::zeros(n);
        let mut alpha = Array1::zeros(n);
        let mut beta = Array1::zeros(n);
        let mut pre = Array2::zeros((n, 2));
        for i in 0..n {
            pre[[i, 0]] = a[0][0] * d1[i] + a[0][1] * d2 + b[0];
            pre[[i, 1]] = a[1][0] * d1[i] + a[1][1] * d2 + b[1];
            let (_, al, be) = fuse_scalar(&a, &b, d1[i], d2, LEAKY_SLOPE);
            // Combine in f64 so the reported alpha/beta reproduce the fused
            // score to one f32 rounding, independent of logit scale.
            fused[i] = (al as f64 * d1[i] as f64 + be as f64 * d2 as f64) as f32;
            alpha[i] = al;
            beta[i] = be;
        }
        if train {
            self.cache = Some(FusionCache {
                d1: d1.clone(),
                d2,
                pre,
                alpha: alpha.clone(),
                beta: beta.clone(),
            });
        }
        (fused, alpha, beta)
    }

    /// Returns (d_loss/d_d1, d_loss/d_d2), accumulating da/db.
    pub fn backward(&mut self, dfused: &Array1<f32>) -> (Array1<f32>, f32) {
        let FusionCache { d1, d2, pre, alpha, beta } =
            self.cache.take().expect("forward(train) must precede backward");
        let (a, _) = self.weights();
        let n = d1.len();
        let mut dd1 = Array1::zeros(n);
        let mut dd2 = 0.0f32;
        for i in 0..n {
            let g = dfused[i];
            let s0 = if pre[[i, 0]] > 0.0 { 1.0 } else { LEAKY_SLOPE };
            let s1 = if pre[[i, 1]] > 0.0 { 1.0 } else { LEAKY_SLOPE };
            // d fused / d pre0 = d1 * s0, d fused / d pre1 = d2 * s1
            let gp0 = g * d1[i] * s0;
            let gp1 = g * d2 * s1;
            self.a.grad[[0, 0]] += gp0 * d1[i];
            self.a.grad[[0, 1]] += gp0 * d2;
            self.b.grad[[0]] += gp0;
            self.a.grad[[1, 0]] += gp1 * d1[i];
            self.a.grad[[1, 1]] += gp1 * d2;
            self.b.grad[[1]] += gp1;
            dd1[i] = g * (alpha[i] + d1[i] * s0 * a[0][0] + d2 * s1 * a[1][0]);
            dd2 += g * (beta[i] + d1[i] * s0 * a[0][1] + d2 * s1 * a[1][1]);
        }
        (dd1, dd2)
    }
}

/// Per-sample outputs of one discriminator pass.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput {
    /// Final logits, one per sample.
    pub fused: Array1<f32>,
    /// Branch-one logits.
    pub d1: Array1<f32>,
    /// Branch-two logit, shared by the whole batch (0 when disabled).
    pub d2: f32,
    pub alpha: Array1<f32>,
    pub beta: Array1<f32>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    b1: BranchOne,
    b2: VolumeCritic,
    fusion: Fusion,
    canvas: (usize, usize),
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, h: usize, w: usize, rng: &mut impl Rng) -> Self {
        let mut b1 = BranchOne::new(config.num_classes, h, w, rng);
        let mut b2 = VolumeCritic::new(config.branch2_channels, rng);
        let (c1, c2) = (b1.param_count(), b2.param_count());
        assert!(
            (c2 as f64) < BRANCH2_BUDGET * c1 as f64,
            "volume branch has {c2} parameters, over the {:.0}% cap of the per-sample branch's {c1}",
            BRANCH2_BUDGET * 100.0
        );
        Self {
            config,
            b1,
            b2,
            fusion: Fusion::new(),
            canvas: (h, w),
        }
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    pub fn branch1_param_count(&mut self) -> usize {
        self.b1.param_count()
    }

    pub fn branch2_param_count(&mut self) -> usize {
        self.b2.param_count()
    }

    /// Current fusion weights (a, b), for identity checks and telemetry.
    pub fn fusion_weights(&self) -> ([[f32; 2]; 2], [f32; 2]) {
        self.fusion.weights()
    }

    /// Broadcast (B, C) conditions into constant planes (B, C, H, W).
    pub fn spatial_conditions(&self, cond: &Array2<f32>) -> Array4<f32> {
        let (b, c) = cond.dim();
        assert_eq!(c, self.config.num_classes);
        let (h, w) = self.canvas;
        let mut out = Array4::zeros((b, c, h, w));
        for bi in 0..b {
            for ci in 0..c {
                if cond[[bi, ci]] != 0.0 {
                    out.slice_mut(s![bi, ci, .., ..]).fill(cond[[bi, ci]]);
                }
            }
        }
        out
    }

    pub fn forward(&mut self, images: &Array4<f32>, cond: &Array2<f32>, train: bool) -> DiscriminatorOutput {
        let (b, _, h, w) = images.dim();
        assert_eq!((h, w), self.canvas);
        assert_eq!(cond.nrows(), b);
        assert!(b >= 2, "discriminator needs at least 2 samples, got {b}");
        let cond_sp = self.spatial_conditions(cond);
        let d1 = self.b1.forward(images, &cond_sp, train);
        if self.config.d2_enabled {
            let volume = BatchVolume::from_batch(images);
            let d2 = self.b2.forward(&volume, train);
            let (fused, alpha, beta) = self.fusion.forward(&d1, d2, train);
            DiscriminatorOutput { fused, d1, d2, alpha, beta }
        } else {
            DiscriminatorOutput {
                fused: d1.clone(),
                d1,
                d2: 0.0,
                alpha: Array1::ones(b),
                beta: Array1::zeros(b),
            }
        }
    }

    /// Backpropagates d(loss)/d(fused logits); returns d(loss)/d(images),
    /// combining the per-sample path with the volume path.
    pub fn backward(&mut self, dfused: &Array1<f32>) -> Array4<f32> {
        if self.config.d2_enabled {
            let (dd1, dd2) = self.fusion.backward(dfused);
            let dx1 = self.b1.backward(&dd1);
            let dvol = self.b2.backward(dd2);
            dx1 + BatchVolume::unstack_grad(&dvol)
        } else {
            self.b1.backward(dfused)
        }
    }

    /// All parameters. `active_only` drops the volume branch and fusion
    /// when that path is disabled so the optimizer never touches them.
    pub fn named_params_mut(&mut self, active_only: bool) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        for (name, p) in self.b1.named_params_mut() {
            out.push((format!("b1.{name}"), p));
        }
        if !active_only || self.config.d2_enabled {
            for (name, p) in self.b2.named_params_mut() {
                out.push((format!("b2.{name}"), p));
            }
            out.push(("fusion.a".into(), &mut self.fusion.a));
            out.push(("fusion.b".into(), &mut self.fusion.b));
        }
        out
    }

    pub fn named_buffers_mut(&mut self) -> Vec<(String, &mut ArrayD<f32>)> {
        let mut out: Vec<(String, &mut ArrayD<f32>)> = Vec::new();
        for (name, b) in self.b1.named_buffers_mut() {
            out.push((format!("b1.{name}"), b));
        }
        for (name, b) in self.b2.named_buffers_mut() {
            out.push((format!("b2.{name}"), b));
        }
        out
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut(false) {
            p.zero_grad();
        }
    }

    pub fn param_count(&mut self) -> usize {
        self.named_params_mut(false).iter().map(|(_, p)| p.count()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn disc(d2: bool) -> Discriminator {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        Discriminator::new(
            DiscriminatorConfig {
                d2_enabled: d2,
                ..DiscriminatorConfig::default()
            },
            28,
            56,
            &mut rng,
        )
    }

    fn batch(b: usize, seed: u64) -> (Array4<f32>, Array2<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Array4::from_shape_simple_fn((b, 1, 28, 56), || {
            rng.random_range(-1.0f32..1.0)
        });
        let mut cond = Array2::zeros((b, 10));
        for i in 0..b {
            cond[[i, i % 10]] = 1.0;
            cond[[i, (i + 3) % 10]] = 1.0;
        }
        (images, cond)
    }

    #[test]
    fn volume_stacking_round_trips() {
        let (images, _) = batch(5, 0);
        let vol = BatchVolume::from_batch(&images);
        assert_eq!(vol.0.dim(), (1, 5, 28, 56));
        assert_eq!(vol.0[[0, 3, 10, 40]], images[[3, 0, 10, 40]]);
        let back = BatchVolume::unstack_grad(&vol.0);
        assert_eq!(back, images);
    }

    #[test]
    fn branch_two_stays_under_budget() {
        let mut d = disc(true);
        let (c1, c2) = (d.branch1_param_count(), d.branch2_param_count());
        assert!((c2 as f64) < 0.2 * c1 as f64, "b2 {c2} vs b1 {c1}");
        // Pinned sizes so accidental architecture drift is caught.
        assert_eq!(c1, 96_217);
        assert_eq!(c2, 7_973);
    }

    #[test]
    fn oversized_volume_branch_fails_construction() {
        let result = std::panic::catch_unwind(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            Discriminator::new(
                DiscriminatorConfig {
                    branch2_channels: [32, 64, 128],
                    ..DiscriminatorConfig::default()
                },
                28,
                56,
                &mut rng,
            )
        });
        assert!(result.is_err());
    }

    #[test]
    #[should_panic(expected = "at least 2 samples")]
    fn single_sample_volume_is_rejected() {
        let images = Array4::<f32>::zeros((1, 1, 28, 56));
        let _ = BatchVolume::from_batch(&images);
    }

    #[test]
    fn fuse_scalar_identity_weights() {
        let a = [[1.0f32, 0.0], [0.0, 1.0]];
        let b = [0.0f32, 0.0];
        // Positive branch: alpha = d1, beta = d2, fused = d1^2 + d2^2.
        let (fused, alpha, beta) = fuse_scalar(&a, &b, 2.0, 3.0, 0.2);
        assert!((alpha - 2.0).abs() < 1e-6);
        assert!((beta - 3.0).abs() < 1e-6);
        assert!((fused - 13.0).abs() < 1e-6);
        // Leaky branch on alpha only.
        let (fused, alpha, beta) = fuse_scalar(&a, &b, -1.0, 0.0, 0.2);
        assert!((alpha - (-0.2)).abs() < 1e-6);
        assert!((beta - 0.0).abs() < 1e-6);
        assert!((fused - 0.2).abs() < 1e-6);
    }

    #[test]
    fn fuse_scalar_worked_example() {
        let a = [[0.5f32, 0.1], [-0.3, 0.2]];
        let b = [0.1f32, -0.1];
        let (fused, alpha, beta) = fuse_scalar(&a, &b, 1.0, 2.0, 0.2);
        // pre = [0.8, 0.0]; leaky(0.8) = 0.8, leaky(0.0) = 0.0
        assert!((alpha - 0.8).abs() < 1e-6);
        assert!((beta - 0.0).abs() < 1e-6);
        assert!((fused - 0.8).abs() < 1e-6);
    }

    #[test]
    fn fuse_scalar_negative_preactivation_leaks() {
        let a = [[1.0f32, 0.0], [0.0, 1.0]];
        let b = [0.0f32, 0.0];
        let (fused, alpha, beta) = fuse_scalar(&a, &b, -2.0, -1.0, 0.2);
        assert!((alpha - (-0.4)).abs() < 1e-6);
        assert!((beta - (-0.2)).abs() < 1e-6);
        assert!((fused - (0.8 + 0.2)).abs() < 1e-6);
    }

    #[test]
    fn forward_reports_identity_consistent_outputs() {
        let mut d = disc(true);
        let (images, cond) = batch(8, 1);
        let out = d.forward(&images, &cond, false);
        assert_eq!(out.fused.len(), 8);
        let (a, b) = d.fusion_weights();
        for i in 0..8 {
            let (f, al, be) = fuse_scalar(&a, &b, out.d1[i], out.d2, 0.2);
            assert!((out.fused[i] - f).abs() < 1e-6);
            assert!((out.alpha[i] - al).abs() < 1e-6);
            assert!((out.beta[i] - be).abs() < 1e-6);
        }
    }

    #[test]
    fn disabled_volume_branch_passes_d1_through() {
        let mut d = disc(false);
        let (images, cond) = batch(6, 2);
        let out = d.forward(&images, &cond, false);
        assert_eq!(out.fused, out.d1);
        assert_eq!(out.d2, 0.0);
        assert!(out.alpha.iter().all(|&a| a == 1.0));
        assert!(out.beta.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn disabled_volume_branch_is_not_trained() {
        let mut d = disc(false);
        let (images, cond) = batch(6, 3);
        let out = d.forward(&images, &cond, true);
        let _ = d.backward(&Array1::from_elem(out.fused.len(), 1.0));
        let active: Vec<String> = d
            .named_params_mut(true)
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        assert!(active.iter().all(|n| n.starts_with("b1.")));
        for (name, p) in d.named_params_mut(false) {
            if name.starts_with("b2.") || name.starts_with("fusion.") {
                assert!(p.grad.iter().all(|&g| g == 0.0), "{name} got gradient");
            }
        }
    }

    #[test]
    fn backward_reaches_both_branches_when_enabled() {
        let mut d = disc(true);
        let (images, cond) = batch(8, 4);
        let out = d.forward(&images, &cond, true);
        let dx = d.backward(&Array1::from_elem(out.fused.len(), 0.5));
        assert_eq!(dx.dim(), images.dim());
        let mut b1_norm = 0.0f32;
        let mut b2_norm = 0.0f32;
        for (name, p) in d.named_params_mut(false) {
            let n: f32 = p.grad.iter().map(|&v| v * v).sum();
            assert!(n.is_finite(), "{name} grad not finite");
            if name.starts_with("b1.") {
                b1_norm += n;
            } else {
                b2_norm += n;
            }
        }
        assert!(b1_norm > 0.0);
        assert!(b2_norm > 0.0);
    }

    #[test]
    fn eval_scores_are_per_sample() {
        // d1[i] depends only on sample i: permuting the batch permutes d1,
        // duplicating a row duplicates its score, and editing sample j
        // leaves every other d1 untouched. d2 has no such guarantee; the
        // cross-sample flow is the point of the volume branch.
        let mut d = disc(true);
        let (images, cond) = batch(6, 7);
        let base = d.forward(&images, &cond, false);

        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pimages = images.clone();
        let mut pcond = cond.clone();
        for (dst, &src) in perm.iter().enumerate() {
            pimages
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&images.index_axis(ndarray::Axis(0), src));
            pcond
                .index_axis_mut(ndarray::Axis(0), dst)
                .assign(&cond.index_axis(ndarray::Axis(0), src));
        }
        let permuted = d.forward(&pimages, &pcond, false);
        for (dst, &src) in perm.iter().enumerate() {
            assert!((permuted.d1[dst] - base.d1[src]).abs() < 1e-6);
        }

        let mut dimages = images.clone();
        let mut dcond = cond.clone();
        dimages
            .index_axis_mut(ndarray::Axis(0), 5)
            .assign(&images.index_axis(ndarray::Axis(0), 0));
        dcond
            .index_axis_mut(ndarray::Axis(0), 5)
            .assign(&cond.index_axis(ndarray::Axis(0), 0));
        let duped = d.forward(&dimages, &dcond, false);
        assert!((duped.d1[5] - duped.d1[0]).abs() < 1e-6);
        for i in 0..5 {
            assert!((duped.d1[i] - base.d1[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn volume_logit_depends_on_depth_order() {
        // 3D convolution is not permutation-invariant along depth; with
        // random weights a reordered batch should score differently.
        let mut d = disc(true);
        let (images, cond) = batch(6, 8);
        let base = d.forward(&images, &cond, false);
        let mut rimages = images.clone();
        for i in 0..6 {
            rimages
                .index_axis_mut(ndarray::Axis(0), i)
                .assign(&images.index_axis(ndarray::Axis(0), 5 - i));
        }
        let reversed = d.forward(&rimages, &cond, false);
        assert!((base.d2 - reversed.d2).abs() > 1e-6);
    }

    #[test]
    fn spatial_conditions_are_constant_planes() {
        let d = disc(true);
        let mut cond = Array2::zeros((2, 10));
        cond[[0, 4]] = 1.0;
        cond[[1, 9]] = 1.0;
        let sp = d.spatial_conditions(&cond);
        assert_eq!(sp.dim(), (2, 10, 28, 56));
        assert_eq!(sp[[0, 4, 13, 40]], 1.0);
        assert_eq!(sp[[0, 5, 13, 40]], 0.0);
        assert_eq!(sp[[1, 9, 0, 0]], 1.0);
        assert_eq!(sp.index_axis(ndarray::Axis(0), 0).sum(), 28.0 * 56.0);
    }

    #[test]
    fn fusion_gradients_match_finite_difference() {
        // f32 finite difference on the scalar fusion function directly.
        let mut fusion = Fusion::new();
        fusion.a.value[[0, 0]] = 0.7;
        fusion.a.value[[0, 1]] = -0.2;
        fusion.a.value[[1, 0]] = 0.3;
        fusion.a.value[[1, 1]] = 0.9;
        fusion.b.value[[0]] = 0.05;
        fusion.b.value[[1]] = -0.4;
        let d1 = ndarray::arr1(&[0.6f32, -1.1, 0.2]);
        let d2 = 0.8f32;
        let upstream = ndarray::arr1(&[1.0f32, -0.5, 0.25]);

        fusion.forward(&d1, d2, true);
        let (dd1, dd2) = fusion.backward(&upstream);

        let (a, b) = fusion.weights();
        let loss = |d1v: &Array1<f32>, d2v: f32| -> f32 {
            (0..3)
                .map(|i| upstream[i] * fuse_scalar(&a, &b, d1v[i], d2v, 0.2).0)
                .sum()
        };
        let h = 1e-3;
        for i in 0..3 {
            let mut dp = d1.clone();
            dp[i] += h;
            let mut dm = d1.clone();
            dm[i] -= h;
            let fd = (loss(&dp, d2) - loss(&dm, d2)) / (2.0 * h);
            assert!((dd1[i] - fd).abs() < 1e-3, "dd1[{i}] {} vs {fd}", dd1[i]);
        }
        let fd2 = (loss(&d1, d2 + h) - loss(&d1, d2 - h)) / (2.0 * h);
        assert!((dd2 - fd2).abs() < 1e-3, "dd2 {dd2} vs {fd2}");
    }
}
