//! Adversarial training loop: alternating discriminator and generator Adam
//! steps under the standard sigmoid-cross-entropy GAN criterion.
//!
//! Everything random flows from one user seed through fixed ChaCha streams
//! (weight init, training draws, per-epoch shuffles), so a run is a pure
//! function of (config, dataset) and a checkpoint can resume it exactly.
//! The loop is single-threaded; reproducibility is bitwise.

pub mod checkpoint;
pub mod telemetry;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, TensorEntry};
pub use telemetry::{
    analyze_telemetry, parse_telemetry, telemetry_line, StepTelemetry, TelemetryError,
    TelemetrySummary, TELEMETRY_HEADER,
};

use crate::condition::{condition_matrix, ConditionVector};
use crate::dataset::{sample_distinct_pair, ComposedSample, LabeledBatch};
use crate::discriminator::{Discriminator, DiscriminatorConfig, DiscriminatorOutput};
use crate::generator::{Generator, GeneratorConfig, OUT_H, OUT_W};
use crate::nn::loss::{sigmoid, sigmoid_bce_with_logits, softplus};
use crate::nn::Adam;
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Stream ids for the one-seed-many-streams scheme. The epoch base leaves
// room for the fixed streams below it; epoch e shuffles on BASE + e.
const STREAM_G_INIT: u64 = 1;
const STREAM_D_INIT: u64 = 2;
const STREAM_TRAIN: u64 = 3;
const STREAM_DATA: u64 = 4;
const STREAM_EPOCH_BASE: u64 = 0x100;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// RNG for composing the training dataset. Its draws live on their own
/// stream so dataset size never shifts the training-time draws.
pub fn dataset_rng(seed: u64) -> ChaCha8Rng {
    stream_rng(seed, STREAM_DATA)
}

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("dataset has {samples} samples; one step needs {needed}")]
    DatasetTooSmall { samples: usize, needed: usize },
    #[error("non-finite {quantity} at step {step}; aborting")]
    NonFinite { quantity: String, step: u64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint disagrees with the run config on `{field}`: checkpoint {checkpoint}, config {config}")]
    ConfigMismatch {
        field: &'static str,
        checkpoint: String,
        config: String,
    },
}

/// Which generator objective to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeneratorLoss {
    /// Maximize log D(fake): gradients stay useful while D is winning.
    NonSaturating,
    /// Original minimax form: minimize log(1 - D(fake)).
    Minimax,
}

impl std::fmt::Display for GeneratorLoss {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GeneratorLoss::NonSaturating => "non_saturating",
            GeneratorLoss::Minimax => "minimax",
        })
    }
}

impl std::str::FromStr for GeneratorLoss {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "non_saturating" => Ok(GeneratorLoss::NonSaturating),
            "minimax" => Ok(GeneratorLoss::Minimax),
            other => Err(format!(
                "unknown generator loss `{other}` (expected non_saturating or minimax)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_d: f32,
    pub lr_g: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_dim: usize,
    pub seed: u64,
    pub d2_enabled: bool,
    pub d_steps_per_g_step: usize,
    pub generator_loss: GeneratorLoss,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_d: 2e-4,
            lr_g: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 64,
            epochs: 20,
            noise_dim: 100,
            seed: 0,
            d2_enabled: true,
            d_steps_per_g_step: 1,
            generator_loss: GeneratorLoss::NonSaturating,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        if !(self.lr_d > 0.0 && self.lr_d.is_finite()) {
            return fail(format!("lr_d must be positive, got {}", self.lr_d));
        }
        if !(self.lr_g > 0.0 && self.lr_g.is_finite()) {
            return fail(format!("lr_g must be positive, got {}", self.lr_g));
        }
        if !(0.0 <= self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return fail(format!(
                "need 0 <= beta1 < beta2 < 1, got beta1 {} beta2 {}",
                self.beta1, self.beta2
            ));
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if self.noise_dim == 0 {
            return fail("noise_dim must be >= 1".into());
        }
        if self.d_steps_per_g_step == 0 {
            return fail("d_steps_per_g_step must be >= 1".into());
        }
        Ok(())
    }
}

/// Discriminator objective: mean sigmoid cross-entropy against target 1 for
/// real logits plus target 0 for fake logits, in stable log-sum-exp form.
/// Returns (loss, d loss/d real_logits, d loss/d fake_logits).
pub fn gan_d_loss(real: &Array1<f32>, fake: &Array1<f32>) -> (f32, Array1<f32>, Array1<f32>) {
    let (loss_real, grad_real) = sigmoid_bce_with_logits(real, &Array1::ones(real.len()));
    let (loss_fake, grad_fake) = sigmoid_bce_with_logits(fake, &Array1::zeros(fake.len()));
    (loss_real + loss_fake, grad_real, grad_fake)
}

/// Generator objective over fake logits. Returns (loss, d loss/d logits).
pub fn gan_g_loss(fake: &Array1<f32>, form: GeneratorLoss) -> (f32, Array1<f32>) {
    match form {
        GeneratorLoss::NonSaturating => sigmoid_bce_with_logits(fake, &Array1::ones(fake.len())),
        GeneratorLoss::Minimax => {
            // loss = mean log(1 - sigmoid(l)) = mean -softplus(l), so the
            // gradient is -sigmoid(l)/B. Unbounded below by construction.
            let n = fake.len() as f32;
            let loss = -fake.iter().map(|&l| softplus(l)).sum::<f32>() / n;
            let grad = fake.mapv(|l| -sigmoid(l) / n);
            (loss, grad)
        }
    }
}

/// One training run's mutable state: both networks, their optimizers, the
/// training RNG, and the step cursor. Steps are driven one at a time so the
/// caller decides where telemetry, checkpoints, and sample grids go.
#[derive(Debug)]
pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    config: TrainConfig,
    num_classes: usize,
    adam_d: Adam,
    adam_g: Adam,
    train_rng: ChaCha8Rng,
    step: u64,
    epoch_order: Option<(u64, Vec<usize>)>,
    max_identity_gap: f64,
}

impl Trainer {
    pub fn new(config: TrainConfig, num_classes: usize) -> Result<Self, TrainError> {
        config.validate()?;
        if num_classes < 2 {
            return Err(TrainError::Config(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut g_rng = stream_rng(config.seed, STREAM_G_INIT);
        let mut d_rng = stream_rng(config.seed, STREAM_D_INIT);
        let generator = Generator::new(
            GeneratorConfig {
                noise_dim: config.noise_dim,
                num_classes,
            },
            &mut g_rng,
        );
        let discriminator = Discriminator::new(
            DiscriminatorConfig {
                num_classes,
                d2_enabled: config.d2_enabled,
                ..DiscriminatorConfig::default()
            },
            OUT_H,
            OUT_W,
            &mut d_rng,
        );
        Ok(Self {
            generator,
            discriminator,
            adam_d: Adam::new(config.lr_d, config.beta1, config.beta2),
            adam_g: Adam::new(config.lr_g, config.beta1, config.beta2),
            train_rng: stream_rng(config.seed, STREAM_TRAIN),
            step: 0,
            epoch_order: None,
            max_identity_gap: 0.0,
            num_classes,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Completed steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Largest observed violation of fused = alpha*d1 + beta*d2 across all
    /// discriminator forwards so far, measured in f64.
    pub fn max_identity_gap(&self) -> f64 {
        self.max_identity_gap
    }

    /// One step consumes d_steps_per_g_step batches; partial batches at the
    /// end of an epoch are dropped.
    pub fn steps_per_epoch(&self, dataset_len: usize) -> u64 {
        ((dataset_len / self.config.batch_size) / self.config.d_steps_per_g_step) as u64
    }

    pub fn total_steps(&self, dataset_len: usize) -> u64 {
        self.steps_per_epoch(dataset_len) * self.config.epochs as u64
    }

    /// Fresh fake-batch conditions, drawn exactly like dataset composition:
    /// uniform over ordered distinct class pairs.
    fn sample_conditions(&mut self, n: usize) -> Vec<ConditionVector> {
        (0..n)
            .map(|_| {
                let (left, right) = sample_distinct_pair(self.num_classes, &mut self.train_rng);
                let mut bits = vec![0u8; self.num_classes];
                bits[left] = 1;
                bits[right] = 1;
                ConditionVector::from_bits(bits).expect("bits are 0/1")
            })
            .collect()
    }

    fn observe_identity(&mut self, out: &DiscriminatorOutput) {
        let d2 = out.d2 as f64;
        for i in 0..out.fused.len() {
            let want = out.alpha[i] as f64 * out.d1[i] as f64 + out.beta[i] as f64 * d2;
            let gap = (out.fused[i] as f64 - want).abs();
            if gap > self.max_identity_gap {
                self.max_identity_gap = gap;
            }
        }
    }

    fn ensure_finite(&self, quantity: &str, value: f32) -> Result<(), TrainError> {
        if value.is_finite() {
            Ok(())
        } else {
            Err(TrainError::NonFinite {
                quantity: quantity.to_string(),
                step: self.step,
            })
        }
    }

    fn ensure_finite_params(&mut self) -> Result<(), TrainError> {
        let step = self.step;
        let check = |prefix: &str, name: &str, values: &ndarray::ArrayD<f32>| {
            if values.iter().all(|v| v.is_finite()) {
                Ok(())
            } else {
                Err(TrainError::NonFinite {
                    quantity: format!("parameter {prefix}.{name}"),
                    step,
                })
            }
        };
        for (name, p) in self.generator.named_params_mut() {
            check("g", &name, &p.value)?;
        }
        for (name, p) in self.discriminator.named_params_mut(false) {
            check("d", &name, &p.value)?;
        }
        Ok(())
    }

    /// Runs the next step, or returns None once epochs * steps_per_epoch
    /// steps have completed. The RNG draw order per discriminator sub-step
    /// is pinned (fake conditions, then noise), and likewise for the
    /// generator step; changing it would break checkpoint resume.
    pub fn step_once(
        &mut self,
        dataset: &[ComposedSample],
    ) -> Result<Option<StepTelemetry>, TrainError> {
        let b = self.config.batch_size;
        let k = self.config.d_steps_per_g_step;
        let spe = self.steps_per_epoch(dataset.len());
        if spe == 0 {
            return Err(TrainError::DatasetTooSmall {
                samples: dataset.len(),
                needed: b * k,
            });
        }
        if let Some(sample) = dataset.first() {
            let dim = sample.image.dim();
            if dim != (1, OUT_H, OUT_W) {
                return Err(TrainError::Config(format!(
                    "dataset canvas {dim:?} does not match the networks' (1, {OUT_H}, {OUT_W})"
                )));
            }
        }
        if self.step >= self.total_steps(dataset.len()) {
            return Ok(None);
        }

        let epoch = self.step / spe;
        if self.epoch_order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = stream_rng(self.config.seed, STREAM_EPOCH_BASE + epoch);
            let mut order: Vec<usize> = (0..dataset.len()).collect();
            order.shuffle(&mut rng);
            self.epoch_order = Some((epoch, order));
        }
        let step_in_epoch = (self.step % spe) as usize;

        let mut d_loss = 0.0;
        let mut d2_real = 0.0;
        let mut d2_fake = 0.0;
        for j in 0..k {
            let start = (step_in_epoch * k + j) * b;
            let order = &self.epoch_order.as_ref().expect("set above").1;
            let samples: Vec<ComposedSample> = order[start..start + b]
                .iter()
                .map(|&i| dataset[i].clone())
                .collect();
            let real = LabeledBatch::from_samples(&samples);

            self.discriminator.zero_grads();
            let out_real = self
                .discriminator
                .forward(&real.images, &real.condition_matrix(), true);
            self.observe_identity(&out_real);

            let fake_conds = self.sample_conditions(b);
            let fake_cond_mat = condition_matrix(&fake_conds);
            let noise = Generator::sample_noise(b, self.config.noise_dim, &mut self.train_rng);
            let fake_images = self.generator.forward(&noise, &fake_cond_mat, true);

            // Backward for the real half must run before the fake forward
            // overwrites the discriminator's caches.
            let (loss_real, grad_real) =
                sigmoid_bce_with_logits(&out_real.fused, &Array1::ones(b));
            self.discriminator.backward(&grad_real);

            let out_fake = self.discriminator.forward(&fake_images, &fake_cond_mat, true);
            self.observe_identity(&out_fake);
            let (loss_fake, grad_fake) =
                sigmoid_bce_with_logits(&out_fake.fused, &Array1::zeros(b));
            self.discriminator.backward(&grad_fake);

            d_loss = loss_real + loss_fake;
            d2_real = out_real.d2;
            d2_fake = out_fake.d2;
            self.ensure_finite("d_loss", d_loss)?;
            self.adam_d
                .step(self.discriminator.named_params_mut(true).into_iter().map(|(_, p)| p));
        }

        // Generator step on a fresh fake batch. The discriminator backward
        // pass here smears gradients into its parameters; the next D
        // sub-step zeroes them before they can matter.
        self.generator.zero_grads();
        let conds = self.sample_conditions(b);
        let cond_mat = condition_matrix(&conds);
        let noise = Generator::sample_noise(b, self.config.noise_dim, &mut self.train_rng);
        let fake = self.generator.forward(&noise, &cond_mat, true);
        let out = self.discriminator.forward(&fake, &cond_mat, true);
        self.observe_identity(&out);
        let (g_loss, grad) = gan_g_loss(&out.fused, self.config.generator_loss);
        self.ensure_finite("g_loss", g_loss)?;
        let dx = self.discriminator.backward(&grad);
        self.generator.backward(&dx);
        self.adam_g
            .step(self.generator.named_params_mut().into_iter().map(|(_, p)| p));

        self.ensure_finite_params()?;
        let telemetry = StepTelemetry {
            step: self.step,
            d_loss,
            g_loss,
            mean_alpha: out.alpha.mean().unwrap_or(0.0),
            mean_beta: out.beta.mean().unwrap_or(0.0),
            d2_real,
            d2_fake,
        };
        for (name, value) in [
            ("mean_alpha", telemetry.mean_alpha),
            ("mean_beta", telemetry.mean_beta),
            ("d2_real", telemetry.d2_real),
            ("d2_fake", telemetry.d2_fake),
        ] {
            self.ensure_finite(name, value)?;
        }
        self.step += 1;
        Ok(Some(telemetry))
    }
}

/// Small config for loop tests: 4-sample batches, 2 epochs.
#[cfg(test)]
pub(crate) fn test_config() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 2,
        noise_dim: 16,
        seed: 11,
        ..TrainConfig::default()
    }
}

/// Random 28x28 "digits" with round-robin labels; big enough to cut a few
/// batches without touching real data files.
#[cfg(test)]
pub(crate) fn test_samples(n: usize) -> Vec<ComposedSample> {
    use rand::Rng;
    let exemplars = 40;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&crate::idx::IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(exemplars as u32).to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    for _ in 0..exemplars * 28 * 28 {
        bytes.push(rng.random_range(0..=255u8));
    }
    let images = crate::idx::parse_images(&bytes).unwrap();
    let labels: Vec<u8> = (0..exemplars).map(|i| (i % 10) as u8).collect();
    let dataset =
        crate::dataset::PairedDataset::new(images, labels, crate::condition::ConditionSchema::digits())
            .unwrap();
    dataset.compose(n, &mut dataset_rng(11))
}
