//! Slow, obviously-correct f64 layer implementations.
//!
//! These exist as oracles: the production f32 layers are checked against
//! them for forward agreement, and their finite differences stand in for
//! analytic gradients in tests. Nothing here is reachable from production
//! paths; keep every function a direct transcription of the math.

use ndarray::{Array2, Array4, ArrayView1};

/// Convolution, weights (O, C, kh, kw), zero padding.
pub fn conv2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b_n, c_n, h, wd) = x.dim();
    let (o_n, ci, kh, kw) = w.dim();
    assert_eq!(c_n, ci);
    let ph = (h + 2 * pad - kh) / stride + 1;
    let pw = (wd + 2 * pad - kw) / stride + 1;
    let mut y = Array4::zeros((b_n, o_n, ph, pw));
    for bi in 0..b_n {
        for o in 0..o_n {
            for py in 0..ph {
                for px in 0..pw {
                    let mut acc = b[o];
                    for c in 0..c_n {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (py * stride + ky) as isize - pad as isize;
                                let ix = (px * stride + kx) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w[[o, c, ky, kx]]
                                        * x[[bi, c, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[bi, o, py, px]] = acc;
                }
            }
        }
    }
    y
}

/// Transposed convolution, weights (C_in, C_out, kh, kw).
pub fn conv_transpose2d(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: ArrayView1<f64>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (b_n, ci, h, wd) = x.dim();
    let (wi, o_n, kh, kw) = w.dim();
    assert_eq!(ci, wi);
    let ho = (h - 1) * stride + kh - 2 * pad;
    let wo = (wd - 1) * stride + kw - 2 * pad;
    let mut y = Array4::zeros((b_n, o_n, ho, wo));
    for bi in 0..b_n {
        for o in 0..o_n {
            for ty in 0..ho {
                for tx in 0..wo {
                    y[[bi, o, ty, tx]] = b[o];
                }
            }
        }
        for c in 0..ci {
            for py in 0..h {
                for px in 0..wd {
                    let v = x[[bi, c, py, px]];
                    for o in 0..o_n {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let ty = (py * stride + ky) as isize - pad as isize;
                                let tx = (px * stride + kx) as isize - pad as isize;
                                if ty >= 0 && ty < ho as isize && tx >= 0 && tx < wo as isize {
                                    y[[bi, o, ty as usize, tx as usize]] +=
                                        v * w[[c, o, ky, kx]];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Single-volume 3D convolution, input (C, D, H, W), weights flattened as
/// (O, C, kd, kh, kw) in a 5-entry shape slice.
#[allow(clippy::too_many_arguments)]
pub fn conv3d(
    x: &Array4<f64>,
    w: &ndarray::ArrayD<f64>,
    b: ArrayView1<f64>,
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Array4<f64> {
    let (c_n, d, h, wd) = x.dim();
    let ws = w.shape();
    let (o_n, ci, kd, kh, kw) = (ws[0], ws[1], ws[2], ws[3], ws[4]);
    assert_eq!(c_n, ci);
    let pd = (d + 2 * pad.0 - kd) / stride.0 + 1;
    let ph = (h + 2 * pad.1 - kh) / stride.1 + 1;
    let pw = (wd + 2 * pad.2 - kw) / stride.2 + 1;
    let mut y = Array4::zeros((o_n, pd, ph, pw));
    for o in 0..o_n {
        for pz in 0..pd {
            for py in 0..ph {
                for px in 0..pw {
                    let mut acc = b[o];
                    for c in 0..c_n {
                        for kz in 0..kd {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iz = (pz * stride.0 + kz) as isize - pad.0 as isize;
                                    let iy = (py * stride.1 + ky) as isize - pad.1 as isize;
                                    let ix = (px * stride.2 + kx) as isize - pad.2 as isize;
                                    if iz >= 0
                                        && iz < d as isize
                                        && iy >= 0
                                        && iy < h as isize
                                        && ix >= 0
                                        && ix < wd as isize
                                    {
                                        acc += w[[o, c, kz, ky, kx]]
                                            * x[[c, iz as usize, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                    }
                    y[[o, pz, py, px]] = acc;
                }
            }
        }
    }
    y
}

/// Train-mode batch normalization on a (C, N) view with biased variance.
pub fn batchnorm(
    x: &Array2<f64>,
    gamma: ArrayView1<f64>,
    beta: ArrayView1<f64>,
    eps: f64,
) -> Array2<f64> {
    let (c_n, n) = x.dim();
    let mut y = Array2::zeros((c_n, n));
    for c in 0..c_n {
        let row = x.row(c);
        let mean = row.sum() / n as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for i in 0..n {
            y[[c, i]] = gamma[c] * (x[[c, i]] - mean) * inv + beta[c];
        }
    }
    y
}

pub fn linear(x: &Array2<f64>, w: &Array2<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let (b_n, i_n) = x.dim();
    let (o_n, wi) = w.dim();
    assert_eq!(i_n, wi);
    let mut y = Array2::zeros((b_n, o_n));
    for bi in 0..b_n {
        for o in 0..o_n {
            let mut acc = b[o];
            for i in 0..i_n {
                acc += x[[bi, i]] * w[[o, i]];
            }
            y[[bi, o]] = acc;
        }
    }
    y
}

pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

/// Central finite difference of a scalar function of one coordinate.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64, h: f64) -> f64 {
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}
