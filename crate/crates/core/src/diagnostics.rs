//! Collapse and adherence metrics for generated pair images.
//!
//! Diversity and near-duplicate rate are pixel-space proxies: RMS distance
//! is cheap, deterministic, and sensitive to the failure mode that matters
//! here (a generator emitting near-copies). Condition adherence is scored
//! by a separately trained digit classifier that reads each half of a
//! 28x56 canvas independently; an unordered comparison against the
//! requested class pair makes left/right placement irrelevant.
//!
//! The classifier is only trusted as an oracle above a fixed held-out
//! accuracy floor; everything downstream refuses to run with a weaker one.

use crate::condition::ConditionVector;
use crate::dataset::normalize_pixel;
use crate::idx::IdxImages;
use crate::nn::act::LeakyRelu;
use crate::nn::conv::Conv2d;
use crate::nn::linear::Linear;
use crate::nn::loss::{predictions, softmax_cross_entropy};
use crate::nn::norm::BatchNorm2d;
use crate::nn::{Adam, Param};
use crate::training::checkpoint::{
    container_bytes, parse_container, CheckpointError, RawContainer, TensorEntry,
};
use ndarray::{s, Array2, Array4, ArrayD, ArrayView3, Axis, Ix4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::path::Path;

use crate::generator::{OUT_H, OUT_W};

/// Width of one digit cell on the pair canvas; also the classifier input.
const HALF_W: usize = OUT_W / 2;
const NUM_DIGITS: usize = 10;

/// Minimum held-out accuracy before a classifier may score adherence.
pub const ORACLE_ACCURACY_FLOOR: f32 = 0.98;

/// Nearest-other RMS distance below which a sample counts as a duplicate.
/// Calibrated on real composed pairs: over fixed-condition batches of 150
/// (four class pairs, three seeds each) the smallest nearest-other
/// distance observed was 0.279, so real batches score 0.0 here, while a
/// collapsed generator's near-copies land well under it.
pub const DUPLICATE_THRESHOLD: f32 = 0.25;

const LEAKY_SLOPE: f32 = 0.2;
const ORACLE_CH: [usize; 2] = [16, 32];
const ORACLE_LR: f32 = 1e-3;
const ORACLE_BATCH: usize = 128;
const ORACLE_MAX_EPOCHS: usize = 5;
const ORACLE_HEADER: &str = "duogan-oracle v1";
// Independent artifact, so its streams need not dodge the trainer's.
const STREAM_ORACLE_INIT: u64 = 1;
const STREAM_ORACLE_SHUFFLE: u64 = 2;
/// Inference chunk size; bounds im2col scratch memory for large requests.
const PREDICT_CHUNK: usize = 256;

#[derive(Debug, thiserror::Error)]
pub enum DiagnosticsError {
    #[error("need at least {needed} samples, got {got}")]
    NotEnoughSamples { got: usize, needed: usize },
    #[error("near-duplicate threshold must be positive and finite, got {0}")]
    BadThreshold(f32),
    #[error("expected {want_h}x{want_w} pair images, got {got_h}x{got_w}")]
    BadImageShape {
        want_h: usize,
        want_w: usize,
        got_h: usize,
        got_w: usize,
    },
    #[error("{images} images but {conditions} conditions")]
    LengthMismatch { images: usize, conditions: usize },
    #[error("condition {index} selects {popcount} classes; adherence is defined for exactly two")]
    ConditionArity { index: usize, popcount: usize },
    #[error("classifier accuracy {accuracy} is below the oracle floor {floor}")]
    OracleBelowFloor { accuracy: f32, floor: f32 },
    #[error("oracle training set is empty")]
    EmptyTrainingSet,
    #[error("{images} training images but {labels} labels")]
    LabelMismatch { images: usize, labels: usize },
    #[error("training images are {rows}x{cols}, classifier expects {want}x{want}")]
    BadDigitShape {
        rows: usize,
        cols: usize,
        want: usize,
    },
    #[error("training label {label} at index {index} is outside 0..10")]
    BadLabel { index: usize, label: u8 },
    #[error(transparent)]
    Container(#[from] CheckpointError),
}

fn rms_distance(a: ArrayView3<f32>, b: ArrayView3<f32>) -> f64 {
    let mut acc = 0f64;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = (x - y) as f64;
        acc += d * d;
    }
    (acc / a.len() as f64).sqrt()
}

/// Mean RMS pixel distance over all unordered sample pairs. Zero means the
/// batch collapsed to one image.
pub fn diversity_score(batch: &Array4<f32>) -> Result<f32, DiagnosticsError> {
    let b = batch.dim().0;
    if b < 2 {
        return Err(DiagnosticsError::NotEnoughSamples { got: b, needed: 2 });
    }
    let mut total = 0f64;
    for i in 0..b {
        for j in i + 1..b {
            total += rms_distance(batch.index_axis(Axis(0), i), batch.index_axis(Axis(0), j));
        }
    }
    let pairs = (b * (b - 1) / 2) as f64;
    Ok((total / pairs) as f32)
}

/// Fraction of samples whose nearest other sample lies closer than
/// `threshold` in RMS pixel distance. Brute force over all pairs.
pub fn near_duplicate_rate(batch: &Array4<f32>, threshold: f32) -> Result<f32, DiagnosticsError> {
    let b = batch.dim().0;
    if b < 2 {
        return Err(DiagnosticsError::NotEnoughSamples { got: b, needed: 2 });
    }
    if !(threshold.is_finite() && threshold > 0.0) {
        return Err(DiagnosticsError::BadThreshold(threshold));
    }
    let mut nearest = vec![f64::INFINITY; b];
    for i in 0..b {
        for j in i + 1..b {
            let d = rms_distance(batch.index_axis(Axis(0), i), batch.index_axis(Axis(0), j));
            nearest[i] = nearest[i].min(d);
            nearest[j] = nearest[j].min(d);
        }
    }
    let dupes = nearest.iter().filter(|&&d| d < threshold as f64).count();
    Ok(dupes as f32 / b as f32)
}

/// Digit classifier used as the adherence oracle: two strided conv blocks,
/// then a linear head over the flattened map. Small on purpose; it only
/// needs MNIST-level accuracy, not robustness.
#[derive(Debug)]
pub struct DigitClassifier {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    act1: LeakyRelu<Ix4>,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    act2: LeakyRelu<Ix4>,
    head: Linear,
    head_dim: (usize, usize, usize),
    val_accuracy: f32,
}

impl DigitClassifier {
    fn new(rng: &mut impl rand::Rng) -> Self {
        let conv1 = Conv2d::new(1, ORACLE_CH[0], (4, 4), 2, 1, rng);
        let conv2 = Conv2d::new(ORACLE_CH[0], ORACLE_CH[1], (4, 4), 2, 1, rng);
        let (h1, w1) = conv1.out_shape(OUT_H, HALF_W);
        let (h2, w2) = conv2.out_shape(h1, w1);
        let head_dim = (ORACLE_CH[1], h2, w2);
        Self {
            conv1,
            bn1: BatchNorm2d::new(ORACLE_CH[0]),
            act1: LeakyRelu::new(LEAKY_SLOPE),
            conv2,
            bn2: BatchNorm2d::new(ORACLE_CH[1]),
            act2: LeakyRelu::new(LEAKY_SLOPE),
            head: Linear::new(ORACLE_CH[1] * h2 * w2, NUM_DIGITS, rng),
            head_dim,
            val_accuracy: 0.0,
        }
    }

    /// Held-out accuracy recorded at training time; the usability gate.
    pub fn val_accuracy(&self) -> f32 {
        self.val_accuracy
    }

    fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array2<f32> {
        let b = x.dim().0;
        let y = self.conv1.forward(x, train);
        let y = self.bn1.forward(&y, train);
        let y = self.act1.forward(y, train);
        let y = self.conv2.forward(&y, train);
        let y = self.bn2.forward(&y, train);
        let y = self.act2.forward(y, train);
        let (c, h, w) = self.head_dim;
        let flat = y.into_shape_with_order((b, c * h * w)).unwrap();
        self.head.forward(&flat, train)
    }

    fn backward(&mut self, dlogits: &Array2<f32>) {
        let b = dlogits.dim().0;
        let dflat = self.head.backward(dlogits);
        let (c, h, w) = self.head_dim;
        let dy = dflat.into_shape_with_order((b, c, h, w)).unwrap();
        let dy = self.act2.backward(dy);
        let dy = self.bn2.backward(&dy);
        let dy = self.conv2.backward(&dy);
        let dy = self.act1.backward(dy);
        let dy = self.bn1.backward(&dy);
        self.conv1.backward(&dy);
    }

    /// Argmax digit per image, in eval mode (running BN statistics), so
    /// each prediction is independent of what else is in the request.
    pub fn predict(&mut self, images: &Array4<f32>) -> Vec<usize> {
        let b = images.dim().0;
        let mut out = Vec::with_capacity(b);
        let mut start = 0;
        while start < b {
            let end = (start + PREDICT_CHUNK).min(b);
            let chunk = images.slice(s![start..end, .., .., ..]).to_owned();
            let logits = self.forward(&chunk, false);
            out.extend(predictions(&logits));
            start = end;
        }
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out = Vec::new();
        for (layer, params) in [
            ("conv1", self.conv1.params_mut()),
            ("bn1", self.bn1.params_mut()),
            ("conv2", self.conv2.params_mut()),
            ("bn2", self.bn2.params_mut()),
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
        for (layer, buffers) in [("bn1", self.bn1.buffers_mut()), ("bn2", self.bn2.buffers_mut())] {
            for (name, b) in buffers {
                out.push((format!("{layer}.{name}"), b));
            }
        }
        out
    }

    fn zero_grads(&mut self) {
        for (_, p) in self.named_params_mut() {
            p.zero_grad();
        }
    }
}

/// Serializes an oracle deterministically: parameter values and BN running
/// statistics, no optimizer state. Inference artifact, not a resume point.
pub fn oracle_bytes(oracle: &mut DigitClassifier) -> Vec<u8> {
    let fields = [("val_accuracy", oracle.val_accuracy.to_string())];
    let mut tensors = Vec::new();
    let mut push = |name: String, value: &ArrayD<f32>| {
        tensors.push(TensorEntry {
            name,
            shape: value.shape().to_vec(),
            data: value.iter().copied().collect(),
        });
    };
    for (name, p) in oracle.named_params_mut() {
        push(name, &p.value);
    }
    for (name, buf) in oracle.named_buffers_mut() {
        push(name, buf);
    }
    container_bytes(ORACLE_HEADER, &fields, &tensors)
}

pub fn save_oracle(oracle: &mut DigitClassifier, path: &Path) -> Result<(), DiagnosticsError> {
    std::fs::write(path, oracle_bytes(oracle)).map_err(|source| {
        DiagnosticsError::Container(CheckpointError::Io {
            action: "write",
            path: path.to_path_buf(),
            source,
        })
    })
}

pub fn load_oracle(path: &Path) -> Result<DigitClassifier, DiagnosticsError> {
    let data = std::fs::read(path).map_err(|source| {
        DiagnosticsError::Container(CheckpointError::Io {
            action: "read",
            path: path.to_path_buf(),
            source,
        })
    })?;
    parse_oracle(&data)
}

pub fn parse_oracle(data: &[u8]) -> Result<DigitClassifier, DiagnosticsError> {
    let RawContainer {
        mut fields,
        tensors,
        line_no,
    } = parse_container(data, ORACLE_HEADER)?;
    let accuracy_text = fields
        .remove("val_accuracy")
        .ok_or(CheckpointError::Manifest {
            line: line_no,
            msg: "missing key `val_accuracy`".into(),
        })?;
    let val_accuracy = accuracy_text
        .parse::<f32>()
        .map_err(|e| CheckpointError::Manifest {
            line: line_no,
            msg: format!("bad value for `val_accuracy`: {e}"),
        })?;
    if let Some(key) = fields.keys().next() {
        return Err(CheckpointError::Manifest {
            line: line_no,
            msg: format!("unknown key `{key}`"),
        }
        .into());
    }

    let mut by_name: HashMap<&str, &TensorEntry> =
        tensors.iter().map(|t| (t.name.as_str(), t)).collect();
    let mut oracle = DigitClassifier::new(&mut ChaCha8Rng::seed_from_u64(0));
    let mut fill = |name: String, value: &mut ArrayD<f32>| -> Result<(), CheckpointError> {
        let entry = by_name
            .remove(name.as_str())
            .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        if entry.shape != value.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name,
                want: value.shape().to_vec(),
                got: entry.shape.clone(),
            });
        }
        for (dst, &src) in value.iter_mut().zip(&entry.data) {
            *dst = src;
        }
        Ok(())
    };
    for (name, p) in oracle.named_params_mut() {
        fill(name, &mut p.value)?;
    }
    for (name, buf) in oracle.named_buffers_mut() {
        fill(name, buf)?;
    }
    if let Some(name) = by_name.keys().next() {
        return Err(CheckpointError::UnknownTensor(name.to_string()).into());
    }
    oracle.val_accuracy = val_accuracy;
    Ok(oracle)
}

fn gather_digits(images: &IdxImages, order: &[usize]) -> Array4<f32> {
    let mut x = Array4::zeros((order.len(), 1, OUT_H, HALF_W));
    for (slot, &i) in order.iter().enumerate() {
        for (dst, &src) in x
            .slice_mut(s![slot, 0, .., ..])
            .iter_mut()
            .zip(images.image(i))
        {
            *dst = normalize_pixel(src);
        }
    }
    x
}

fn accuracy_on(
    oracle: &mut DigitClassifier,
    images: &IdxImages,
    labels: &[u8],
    indices: &[usize],
) -> f32 {
    let x = gather_digits(images, indices);
    let predicted = oracle.predict(&x);
    let hits = indices
        .iter()
        .zip(&predicted)
        .filter(|(&i, &p)| labels[i] as usize == p)
        .count();
    hits as f32 / indices.len() as f32
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Adam-trains the classifier for a fixed number of epochs. Deterministic
/// per seed: init and shuffle draws come from fixed streams of it.
fn fit_classifier(
    images: &IdxImages,
    labels: &[u8],
    train_len: usize,
    seed: u64,
    epochs: usize,
    batch: usize,
    epoch_end: &mut impl FnMut(&mut DigitClassifier) -> bool,
) -> DigitClassifier {
    let mut oracle = DigitClassifier::new(&mut stream_rng(seed, STREAM_ORACLE_INIT));
    let mut adam = Adam::new(ORACLE_LR, 0.9, 0.999);
    let mut shuffle_rng = stream_rng(seed, STREAM_ORACLE_SHUFFLE);
    let mut order: Vec<usize> = (0..train_len).collect();
    for _ in 0..epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks_exact(batch) {
            let x = gather_digits(images, chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i] as usize).collect();
            let logits = oracle.forward(&x, true);
            let (_, dlogits) = softmax_cross_entropy(&logits, &y);
            oracle.zero_grads();
            oracle.backward(&dlogits);
            adam.step(oracle.named_params_mut().into_iter().map(|(_, p)| p));
        }
        if epoch_end(&mut oracle) {
            break;
        }
    }
    oracle
}

/// Trains the adherence oracle on labeled single digits, holding out the
/// last sixth for validation. Succeeds only once held-out accuracy clears
/// the floor; an under-trained classifier is returned as an error, never
/// as a usable oracle.
pub fn train_eval_classifier(
    images: &IdxImages,
    labels: &[u8],
    seed: u64,
) -> Result<DigitClassifier, DiagnosticsError> {
    if images.count == 0 {
        return Err(DiagnosticsError::EmptyTrainingSet);
    }
    if images.count != labels.len() {
        return Err(DiagnosticsError::LabelMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    if images.rows != OUT_H || images.cols != HALF_W {
        return Err(DiagnosticsError::BadDigitShape {
            rows: images.rows,
            cols: images.cols,
            want: OUT_H,
        });
    }
    if let Some((index, &label)) = labels
        .iter()
        .enumerate()
        .find(|(_, &l)| l as usize >= NUM_DIGITS)
    {
        return Err(DiagnosticsError::BadLabel { index, label });
    }
    if images.count < 2 {
        return Err(DiagnosticsError::NotEnoughSamples {
            got: images.count,
            needed: 2,
        });
    }

    let val_len = (images.count / 6).max(1);
    let train_len = images.count - val_len;
    let val_indices: Vec<usize> = (train_len..images.count).collect();

    let mut best = 0f32;
    let oracle = fit_classifier(
        images,
        labels,
        train_len,
        seed,
        ORACLE_MAX_EPOCHS,
        ORACLE_BATCH,
        &mut |oracle| {
            let acc = accuracy_on(oracle, images, labels, &val_indices);
            best = best.max(acc);
            if acc >= ORACLE_ACCURACY_FLOOR {
                oracle.val_accuracy = acc;
                true
            } else {
                false
            }
        },
    );
    if oracle.val_accuracy >= ORACLE_ACCURACY_FLOOR {
        Ok(oracle)
    } else {
        Err(DiagnosticsError::OracleBelowFloor {
            accuracy: best,
            floor: ORACLE_ACCURACY_FLOOR,
        })
    }
}

/// Fraction of pair images whose two halves classify to exactly the
/// requested class pair, in either order.
pub fn condition_adherence(
    images: &Array4<f32>,
    conditions: &[ConditionVector],
    oracle: &mut DigitClassifier,
) -> Result<f32, DiagnosticsError> {
    if oracle.val_accuracy < ORACLE_ACCURACY_FLOOR {
        return Err(DiagnosticsError::OracleBelowFloor {
            accuracy: oracle.val_accuracy,
            floor: ORACLE_ACCURACY_FLOOR,
        });
    }
    let (b, c, h, w) = images.dim();
    if b == 0 {
        return Err(DiagnosticsError::NotEnoughSamples { got: 0, needed: 1 });
    }
    if conditions.len() != b {
        return Err(DiagnosticsError::LengthMismatch {
            images: b,
            conditions: conditions.len(),
        });
    }
    if c != 1 || h != OUT_H || w != OUT_W {
        return Err(DiagnosticsError::BadImageShape {
            want_h: OUT_H,
            want_w: OUT_W,
            got_h: h,
            got_w: w,
        });
    }
    for (index, cond) in conditions.iter().enumerate() {
        if cond.popcount() != 2 {
            return Err(DiagnosticsError::ConditionArity {
                index,
                popcount: cond.popcount(),
            });
        }
    }

    let left = oracle.predict(&images.slice(s![.., .., .., ..HALF_W]).to_owned());
    let right = oracle.predict(&images.slice(s![.., .., .., HALF_W..]).to_owned());
    let hits = conditions
        .iter()
        .zip(left.iter().zip(&right))
        .filter(|(cond, (&l, &r))| {
            let got = [l.min(r), l.max(r)];
            cond.classes() == got
        })
        .count();
    Ok(hits as f32 / b as f32)
}

/// One evaluation's worth of collapse and adherence numbers.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub n_samples: usize,
    /// Mean pairwise RMS distance; 0 means total collapse.
    pub diversity: f32,
    pub duplicate_rate: f32,
    pub adherence: f32,
}

impl DiagnosticsReport {
    /// Human-readable form, written alongside the key-value form.
    pub fn text(&self) -> String {
        format!(
            "samples evaluated    {}\n\
             mean pairwise rms    {:.4}\n\
             near-duplicate rate  {:.4}\n\
             condition adherence  {:.4}\n",
            self.n_samples, self.diversity, self.duplicate_rate, self.adherence
        )
    }

    /// Machine-readable form; values round-trip through `parse` exactly.
    pub fn key_values(&self) -> String {
        format!(
            "n_samples = {}\ndiversity = {}\nduplicate_rate = {}\nadherence = {}\n",
            self.n_samples, self.diversity, self.duplicate_rate, self.adherence
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Constant-valued image batch; RMS distance between two constants is
    /// their absolute difference, which makes fixtures hand-checkable.
    fn constant_batch(values: &[f32]) -> Array4<f32> {
        let mut x = Array4::zeros((values.len(), 1, 4, 4));
        for (i, &v) in values.iter().enumerate() {
            x.slice_mut(s![i, .., .., ..]).fill(v);
        }
        x
    }

    #[test]
    fn identical_batch_has_zero_diversity() {
        let batch = constant_batch(&[0.3, 0.3, 0.3]);
        assert_eq!(diversity_score(&batch).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_pair_scores_its_offset() {
        let batch = constant_batch(&[-1.0, 1.0]);
        let d = diversity_score(&batch).unwrap();
        assert!((d - 2.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn three_image_fixture_averages_the_three_pairs() {
        // Pairwise distances 2, 2, 0; mean 4/3.
        let batch = constant_batch(&[-1.0, 1.0, 1.0]);
        let d = diversity_score(&batch).unwrap();
        assert!((d - 4.0 / 3.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn undersized_batches_are_rejected() {
        let one = constant_batch(&[0.5]);
        assert!(matches!(
            diversity_score(&one),
            Err(DiagnosticsError::NotEnoughSamples { got: 1, needed: 2 })
        ));
        assert!(matches!(
            near_duplicate_rate(&one, 0.1),
            Err(DiagnosticsError::NotEnoughSamples { got: 1, needed: 2 })
        ));
    }

    #[test]
    fn bad_thresholds_are_rejected() {
        let batch = constant_batch(&[0.0, 1.0]);
        for t in [0.0, -0.5, f32::NAN, f32::INFINITY] {
            assert!(
                matches!(
                    near_duplicate_rate(&batch, t),
                    Err(DiagnosticsError::BadThreshold(_))
                ),
                "threshold {t} should be rejected"
            );
        }
    }

    #[test]
    fn identical_batch_is_entirely_duplicates() {
        let batch = constant_batch(&[0.2; 5]);
        assert_eq!(near_duplicate_rate(&batch, 0.01).unwrap(), 1.0);
    }

    #[test]
    fn spaced_singles_have_no_duplicates() {
        let batch = constant_batch(&[0.0, 0.5, 1.0, 1.5]);
        assert_eq!(near_duplicate_rate(&batch, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn fifteen_of_150_duplicated_scores_ten_percent() {
        // 135 spaced singles, six duplicated pairs, one triplicate: exactly
        // 15 samples sit at zero distance from another.
        let mut values: Vec<f32> = (0..135).map(|i| i as f32).collect();
        for k in 0..6 {
            let v = 200.0 + k as f32;
            values.push(v);
            values.push(v);
        }
        values.extend([300.0, 300.0, 300.0]);
        assert_eq!(values.len(), 150);
        let batch = constant_batch(&values);
        let rate = near_duplicate_rate(&batch, 0.5).unwrap();
        assert!((rate - 0.10).abs() < 1e-6, "{rate}");
    }

    proptest! {
        #[test]
        fn diversity_ignores_order_and_global_sign(
            pixels in proptest::collection::vec(-1.0f32..1.0, 5 * 9),
            swap in (0usize..5, 0usize..5),
        ) {
            let batch = Array4::from_shape_vec((5, 1, 3, 3), pixels).unwrap();
            let base = diversity_score(&batch).unwrap();

            let mut permuted = batch.clone();
            let a = batch.index_axis(Axis(0), swap.0).to_owned();
            let b = batch.index_axis(Axis(0), swap.1).to_owned();
            permuted.index_axis_mut(Axis(0), swap.0).assign(&b);
            permuted.index_axis_mut(Axis(0), swap.1).assign(&a);
            let negated = batch.mapv(|v| -v);

            prop_assert!((diversity_score(&permuted).unwrap() - base).abs() <= 1e-6);
            prop_assert!((diversity_score(&negated).unwrap() - base).abs() <= 1e-6);
        }

        #[test]
        fn duplicate_rate_is_monotone_in_threshold(
            pixels in proptest::collection::vec(-1.0f32..1.0, 6 * 4),
            lo in 0.01f32..1.0,
            hi in 0.01f32..1.0,
        ) {
            let batch = Array4::from_shape_vec((6, 1, 2, 2), pixels).unwrap();
            let (lo, hi) = (lo.min(hi), lo.max(hi));
            prop_assert!(
                near_duplicate_rate(&batch, lo).unwrap()
                    <= near_duplicate_rate(&batch, hi).unwrap()
            );
        }
    }

    /// Synthetic trivially separable "digits": class k lights a distinct
    /// 9x14 block of the 28x28 canvas. Lets oracle tests train in seconds.
    fn block_pattern_set(per_class: usize, noise_seed: u64) -> (IdxImages, Vec<u8>) {
        use rand::Rng;
        let n = per_class * NUM_DIGITS;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut bytes = Vec::with_capacity(16 + n * OUT_H * HALF_W);
        bytes.extend(crate::idx::IMAGE_MAGIC.to_be_bytes());
        bytes.extend((n as u32).to_be_bytes());
        bytes.extend((OUT_H as u32).to_be_bytes());
        bytes.extend((HALF_W as u32).to_be_bytes());
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % NUM_DIGITS;
            let (bh, bw) = (OUT_H / 5, HALF_W / 2);
            let (row0, col0) = ((class / 2) * bh, (class % 2) * bw);
            for r in 0..OUT_H {
                for c in 0..HALF_W {
                    let lit = (row0..row0 + bh).contains(&r) && (col0..col0 + bw).contains(&c);
                    let base: u8 = if lit { 220 } else { 20 };
                    bytes.push(base.saturating_add(rng.random_range(0..30)));
                }
            }
            labels.push(class as u8);
        }
        (crate::idx::parse_images(&bytes).unwrap(), labels)
    }

    fn block_image(class: usize) -> Array2<f32> {
        let (images, labels) = block_pattern_set(1, 99);
        let i = labels.iter().position(|&l| l as usize == class).unwrap();
        gather_digits(&images, &[i])
            .index_axis(Axis(0), 0)
            .index_axis(Axis(0), 0)
            .to_owned()
    }

    fn pair_image(left: usize, right: usize) -> Array4<f32> {
        let mut canvas = Array4::zeros((1, 1, OUT_H, OUT_W));
        canvas
            .slice_mut(s![0, 0, .., ..HALF_W])
            .assign(&block_image(left));
        canvas
            .slice_mut(s![0, 0, .., HALF_W..])
            .assign(&block_image(right));
        canvas
    }

    fn bits_for(pair: (usize, usize)) -> ConditionVector {
        let mut bits = vec![0u8; NUM_DIGITS];
        bits[pair.0] = 1;
        bits[pair.1] = 1;
        ConditionVector::from_bits(bits).unwrap()
    }

    /// Oracle fitted on block patterns, trained once and shared; tests
    /// work on their own parsed copies.
    fn trained_oracle() -> DigitClassifier {
        static TRAINED: std::sync::OnceLock<Vec<u8>> = std::sync::OnceLock::new();
        let bytes = TRAINED.get_or_init(|| {
            let (images, labels) = block_pattern_set(140, 7);
            let mut oracle = train_eval_classifier(&images, &labels, 3).unwrap();
            assert!(oracle.val_accuracy() >= ORACLE_ACCURACY_FLOOR);
            oracle_bytes(&mut oracle)
        });
        parse_oracle(bytes).unwrap()
    }

    #[test]
    fn same_seed_fits_identical_classifiers() {
        let (images, labels) = block_pattern_set(20, 7);
        let fit = |_| fit_classifier(&images, &labels, 180, 5, 1, 32, &mut |_| false);
        assert_eq!(oracle_bytes(&mut fit(0)), oracle_bytes(&mut fit(1)));
    }

    #[test]
    fn oracle_scores_pair_adherence() {
        let mut oracle = trained_oracle();

        // Unordered-set contract: either placement of {3,7} adheres, a
        // repeated digit does not, and a wrong pair does not.
        let batch = ndarray::concatenate(
            Axis(0),
            &[
                pair_image(3, 7).view(),
                pair_image(7, 3).view(),
                pair_image(3, 3).view(),
                pair_image(1, 4).view(),
            ],
        )
        .unwrap();
        let conditions = vec![
            bits_for((3, 7)),
            bits_for((3, 7)),
            bits_for((3, 7)),
            bits_for((2, 6)),
        ];
        let frac = condition_adherence(&batch, &conditions, &mut oracle).unwrap();
        assert!((frac - 0.5).abs() < 1e-6, "{frac}");
    }

    #[test]
    fn oracle_round_trips_through_its_file() {
        let mut oracle = trained_oracle();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("oracle.bin");
        save_oracle(&mut oracle, &path).unwrap();
        let mut restored = load_oracle(&path).unwrap();
        assert_eq!(restored.val_accuracy(), oracle.val_accuracy());
        assert_eq!(oracle_bytes(&mut restored), oracle_bytes(&mut oracle));

        let probe = pair_image(5, 2);
        let probe_half = probe.slice(s![.., .., .., ..HALF_W]).to_owned();
        assert_eq!(restored.predict(&probe_half), oracle.predict(&probe_half));
    }

    #[test]
    fn unusable_oracles_are_refused() {
        let fresh = &mut DigitClassifier::new(&mut ChaCha8Rng::seed_from_u64(1));
        let batch = pair_image(3, 7);
        let err = condition_adherence(&batch, &[bits_for((3, 7))], fresh).unwrap_err();
        assert!(matches!(err, DiagnosticsError::OracleBelowFloor { .. }), "{err}");
    }

    #[test]
    fn adherence_validates_its_arguments() {
        let mut oracle = trained_oracle();

        let batch = pair_image(3, 7);
        let single = ConditionVector::from_bits(vec![0, 0, 0, 1, 0, 0, 0, 0, 0, 0]).unwrap();
        assert!(matches!(
            condition_adherence(&batch, &[single], &mut oracle),
            Err(DiagnosticsError::ConditionArity {
                index: 0,
                popcount: 1
            })
        ));
        assert!(matches!(
            condition_adherence(&batch, &[bits_for((3, 7)), bits_for((1, 2))], &mut oracle),
            Err(DiagnosticsError::LengthMismatch { .. })
        ));
        let square = Array4::zeros((1, 1, OUT_H, OUT_H));
        assert!(matches!(
            condition_adherence(&square, &[bits_for((3, 7))], &mut oracle),
            Err(DiagnosticsError::BadImageShape { .. })
        ));
    }

    #[test]
    fn oracle_training_validates_its_arguments() {
        let (images, labels) = block_pattern_set(1, 7);
        let empty = crate::idx::parse_images(&{
            let mut b = Vec::new();
            b.extend(crate::idx::IMAGE_MAGIC.to_be_bytes());
            b.extend(0u32.to_be_bytes());
            b.extend((OUT_H as u32).to_be_bytes());
            b.extend((HALF_W as u32).to_be_bytes());
            b
        })
        .unwrap();
        assert!(matches!(
            train_eval_classifier(&empty, &[], 0),
            Err(DiagnosticsError::EmptyTrainingSet)
        ));
        assert!(matches!(
            train_eval_classifier(&images, &labels[..5], 0),
            Err(DiagnosticsError::LabelMismatch { .. })
        ));
        let mut bad_labels = labels.clone();
        bad_labels[3] = 11;
        assert!(matches!(
            train_eval_classifier(&images, &bad_labels, 0),
            Err(DiagnosticsError::BadLabel { index: 3, label: 11 })
        ));
    }

    #[test]
    fn report_forms_agree_on_their_values() {
        let report = DiagnosticsReport {
            n_samples: 150,
            diversity: 0.8125,
            duplicate_rate: 0.06,
            adherence: 0.9266667,
        };
        let text = report.text();
        assert!(text.contains("samples evaluated    150"), "{text}");
        assert!(text.contains("0.8125"), "{text}");

        let kv = report.key_values();
        for line in ["n_samples = 150", "diversity = 0.8125", "adherence = 0.9266667"] {
            assert!(kv.contains(line), "{kv}");
        }
        let parsed: f32 = kv
            .lines()
            .find_map(|l| l.strip_prefix("duplicate_rate = "))
            .unwrap()
            .parse()
            .unwrap();
        assert_eq!(parsed, report.duplicate_rate);
    }
}
