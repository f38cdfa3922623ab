//! 3D convolution over a single volume (no batch axis).
//!
//! The minibatch-volume branch stacks a whole batch into one (C, D, H, W)
//! tensor and convolves across the depth axis, so cross-sample structure
//! reaches the filters directly. Shapes follow the 2D module: im2col into a
//! (C*kd*kh*kw, Pd*Ph*Pw) matrix, one GEMM per pass.

use super::conv::{conv_out, valid_anchors};
use super::Param;
use ndarray::{Array2, Array4, Ix5};
use rand::Rng;

type Extent3 = (usize, usize, usize);

pub fn im2col3(
    x: &Array4<f32>,
    pos: Extent3,
    kernel: Extent3,
    stride: Extent3,
    pad: Extent3,
) -> Array2<f32> {
    let (c_n, d, h, w) = x.dim();
    let (pd, ph, pw) = pos;
    let (kd, kh, kw) = kernel;
    let x = x.as_standard_layout();
    let x_s = x.as_slice().unwrap();
    let col_n = pd * ph * pw;
    let mut cols = Array2::zeros((c_n * kd * kh * kw, col_n));
    let cols_s = cols.as_slice_mut().unwrap();
    for c in 0..c_n {
        for kz in 0..kd {
            let (pz_lo, pz_hi) = valid_anchors(pd, d, kz, stride.0, pad.0);
            for ky in 0..kh {
                let (py_lo, py_hi) = valid_anchors(ph, h, ky, stride.1, pad.1);
                for kx in 0..kw {
                    let (px_lo, px_hi) = valid_anchors(pw, w, kx, stride.2, pad.2);
                    if px_lo >= px_hi {
                        continue;
                    }
                    let row_base = (((c * kd + kz) * kh + ky) * kw + kx) * col_n;
                    for pz in pz_lo..pz_hi {
                        let iz = pz * stride.0 + kz - pad.0;
                        let x_plane = (c * d + iz) * h * w;
                        for py in py_lo..py_hi {
                            let iy = py * stride.1 + ky - pad.1;
                            let x_row = x_plane + iy * w;
                            let col_row = row_base + (pz * ph + py) * pw;
                            let src_start = x_row + (px_lo * stride.2 + kx - pad.2);
                            let dst = &mut cols_s[col_row + px_lo..col_row + px_hi];
                            if stride.2 == 1 {
                                dst.copy_from_slice(&x_s[src_start..src_start + dst.len()]);
                            } else {
                                let src = x_s[src_start..].iter().step_by(stride.2);
                                for (dv, &v) in dst.iter_mut().zip(src) {
                                    *dv = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im3(
    cols: &Array2<f32>,
    out_dim: (usize, usize, usize, usize),
    pos: Extent3,
    kernel: Extent3,
    stride: Extent3,
    pad: Extent3,
) -> Array4<f32> {
    let (c_n, d, h, w) = out_dim;
    let (pd, ph, pw) = pos;
    let (kd, kh, kw) = kernel;
    let col_n = pd * ph * pw;
    assert_eq!(cols.dim(), (c_n * kd * kh * kw, col_n));
    let cols = cols.as_standard_layout();
    let cols_s = cols.as_slice().unwrap();
    let mut out = Array4::zeros(out_dim);
    let out_s = out.as_slice_mut().unwrap();
    for c in 0..c_n {
        for kz in 0..kd {
            let (pz_lo, pz_hi) = valid_anchors(pd, d, kz, stride.0, pad.0);
            for ky in 0..kh {
                let (py_lo, py_hi) = valid_anchors(ph, h, ky, stride.1, pad.1);
                for kx in 0..kw {
                    let (px_lo, px_hi) = valid_anchors(pw, w, kx, stride.2, pad.2);
                    if px_lo >= px_hi {
                        continue;
                    }
                    let row_base = (((c * kd + kz) * kh + ky) * kw + kx) * col_n;
                    for pz in pz_lo..pz_hi {
                        let tz = pz * stride.0 + kz - pad.0;
                        let o_plane = (c * d + tz) * h * w;
                        for py in py_lo..py_hi {
                            let ty = py * stride.1 + ky - pad.1;
                            let o_row = o_plane + ty * w;
                            let col_row = row_base + (pz * ph + py) * pw;
                            let dst_start = o_row + (px_lo * stride.2 + kx - pad.2);
                            let src = &cols_s[col_row + px_lo..col_row + px_hi];
                            if stride.2 == 1 {
                                for (dv, &v) in out_s[dst_start..dst_start + src.len()]
                                    .iter_mut()
                                    .zip(src)
                                {
                                    *dv += v;
                                }
                            } else {
                                let dst = out_s[dst_start..].iter_mut().step_by(stride.2);
                                for (dv, &v) in dst.zip(src) {
                                    *dv += v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Strided 3D convolution on one volume. Input (Cin, D, H, W), weights
/// (Cout, Cin, kd, kh, kw), output (Cout, Pd, Ph, Pw).
#[derive(Debug, Clone)]
pub struct Conv3d {
    pub w: Param,
    pub b: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: Extent3,
    stride: Extent3,
    pad: Extent3,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize))>,
}

impl Conv3d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: Extent3,
        stride: Extent3,
        pad: Extent3,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Param::normal(
                &[out_channels, in_channels, kernel.0, kernel.1, kernel.2],
                super::INIT_STD,
                rng,
            ),
            b: Param::zeros(&[out_channels]),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }

    pub fn param_count(&self) -> usize {
        self.w.count() + self.b.count()
    }

    pub fn out_shape(&self, d: usize, h: usize, w: usize) -> Extent3 {
        (
            conv_out(d, self.kernel.0, self.stride.0, self.pad.0),
            conv_out(h, self.kernel.1, self.stride.1, self.pad.1),
            conv_out(w, self.kernel.2, self.stride.2, self.pad.2),
        )
    }

    fn w_mat(&self) -> Array2<f32> {
        let k = self.in_channels * self.kernel.0 * self.kernel.1 * self.kernel.2;
        self.w
            .value
            .view()
            .into_dimensionality::<Ix5>()
            .unwrap()
            .into_shape_with_order((self.out_channels, k))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (c_n, d, h, w) = x.dim();
        assert_eq!(c_n, self.in_channels);
        let (pd, ph, pw) = self.out_shape(d, h, w);
        let cols = im2col3(x, (pd, ph, pw), self.kernel, self.stride, self.pad);
        let y_mat = self.w_mat().dot(&cols);
        let mut y = y_mat
            .into_shape_with_order((self.out_channels, pd, ph, pw))
            .unwrap();
        for (o, mut vol) in y.outer_iter_mut().enumerate() {
            vol += self.b.value[[o]];
        }
        if train {
            self.cache = Some((cols, x.dim()));
        }
        y
    }

    /// Accumulates dw/db and returns dx.
    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (cols, x_dim) = self.cache.take().expect("forward(train) must precede backward");
        let (o_n, pd, ph, pw) = dy.dim();
        assert_eq!(o_n, self.out_channels);
        let dy_owned = dy.as_standard_layout();
        let dy_mat = dy_owned
            .view()
            .into_shape_with_order((o_n, pd * ph * pw))
            .unwrap()
            .to_owned();

        let dw = dy_mat.dot(&cols.t());
        self.w.grad += &dw.into_shape_with_order(self.w.value.raw_dim()).unwrap();
        for o in 0..o_n {
            self.b.grad[[o]] += dy_mat.row(o).sum();
        }

        let dcols = self.w_mat().t().dot(&dy_mat);
        col2im3(&dcols, x_dim, (pd, ph, pw), self.kernel, self.stride, self.pad)
    }
}
