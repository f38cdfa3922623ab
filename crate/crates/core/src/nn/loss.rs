//! Numerically stable classification losses.

use ndarray::{Array1, Array2};

/// ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross entropy on logits, with its gradient. Uses the
/// rearrangement max(l,0) - l*t + ln(1 + e^-|l|), which never exponentiates
/// a positive number.
pub fn sigmoid_bce_with_logits(logits: &Array1<f32>, targets: &Array1<f32>) -> (f32, Array1<f32>) {
    assert_eq!(logits.len(), targets.len());
    let n = logits.len() as f32;
    let mut loss = 0.0;
    let mut grad = Array1::zeros(logits.len());
    for (i, (&l, &t)) in logits.iter().zip(targets.iter()).enumerate() {
        loss += l.max(0.0) - l * t + (-l.abs()).exp().ln_1p();
        grad[i] = (sigmoid(l) - t) / n;
    }
    (loss / n, grad)
}

/// Mean softmax cross entropy over integer labels, with its gradient.
pub fn softmax_cross_entropy(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let (b, c) = logits.dim();
    assert_eq!(b, labels.len());
    let mut loss = 0.0;
    let mut grad = Array2::zeros((b, c));
    for (i, (&label, row)) in labels.iter().zip(logits.rows()).enumerate() {
        assert!(label < c, "label {label} out of range for {c} classes");
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let sum_exp: f32 = row.iter().map(|&l| (l - max).exp()).sum();
        let lse = max + sum_exp.ln();
        loss += lse - row[label];
        for j in 0..c {
            let p = (row[j] - max).exp() / sum_exp;
            grad[[i, j]] = (p - if j == label { 1.0 } else { 0.0 }) / b as f32;
        }
    }
    (loss / b as f32, grad)
}

/// Argmax class per row.
pub fn predictions(logits: &Array2<f32>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap()
        })
        .collect()
}
