//! 2D convolution and fractionally strided (transposed) convolution.
//!
//! Both layers reduce to one GEMM per pass through a shared im2col/col2im
//! pair. `im2col` gathers kernel windows anchored on a position grid;
//! `col2im` is its adjoint and scatter-adds windows back. A forward
//! convolution and the input gradient of a transposed convolution are the
//! same gather; the remaining passes are the same scatter.

use super::Param;
use ndarray::{Array1, Array2, Array4, Axis, Ix4};
use rand::Rng;

/// Output extent of a strided convolution along one axis.
pub fn conv_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    assert!(
        extent + 2 * pad >= kernel,
        "kernel {kernel} larger than padded extent {}",
        extent + 2 * pad
    );
    (extent + 2 * pad - kernel) / stride + 1
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out(extent: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (extent - 1) * stride + kernel - 2 * pad
}

/// Anchor range [lo, hi) whose source index p*stride + k - pad lands in
/// [0, extent), clipped to [0, anchors).
pub(crate) fn valid_anchors(
    anchors: usize,
    extent: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    let last_source = extent + pad;
    if last_source <= k {
        return (0, 0);
    }
    let hi = ((last_source - 1 - k) / stride + 1).min(anchors);
    (lo.min(hi), hi)
}

/// Gathers kernel windows into a (C*kh*kw, B*Ph*Pw) matrix. Window anchor
/// (py, px) reads source pixel (py*stride - pad + ky, px*stride - pad + kx);
/// out-of-bounds reads stay zero.
pub fn im2col(
    x: &Array4<f32>,
    pos: (usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array2<f32> {
    let (b_n, c_n, h, w) = x.dim();
    let (ph, pw) = pos;
    let (kh, kw) = kernel;
    let x = x.as_standard_layout();
    let x_s = x.as_slice().unwrap();
    let col_n = b_n * ph * pw;
    let mut cols = Array2::zeros((c_n * kh * kw, col_n));
    let cols_s = cols.as_slice_mut().unwrap();
    for c in 0..c_n {
        for ky in 0..kh {
            let (py_lo, py_hi) = valid_anchors(ph, h, ky, stride, pad);
            for kx in 0..kw {
                let (px_lo, px_hi) = valid_anchors(pw, w, kx, stride, pad);
                if px_lo >= px_hi {
                    continue;
                }
                let row_base = ((c * kh + ky) * kw + kx) * col_n;
                for b in 0..b_n {
                    let x_base = (b * c_n + c) * h * w;
                    for py in py_lo..py_hi {
                        let iy = py * stride + ky - pad;
                        let x_row = x_base + iy * w;
                        let col_row = row_base + (b * ph + py) * pw;
                        let src_start = x_row + (px_lo * stride + kx - pad);
                        let dst = &mut cols_s[col_row + px_lo..col_row + px_hi];
                        if stride == 1 {
                            dst.copy_from_slice(&x_s[src_start..src_start + dst.len()]);
                        } else {
                            let src = x_s[src_start..].iter().step_by(stride);
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = v;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds windows into a (B, C, H, W) tensor.
pub fn col2im(
    cols: &Array2<f32>,
    out_dim: (usize, usize, usize, usize),
    pos: (usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Array4<f32> {
    let (b_n, c_n, h, w) = out_dim;
    let (ph, pw) = pos;
    let (kh, kw) = kernel;
    let col_n = b_n * ph * pw;
    assert_eq!(cols.dim(), (c_n * kh * kw, col_n));
    let cols = cols.as_standard_layout();
    let cols_s = cols.as_slice().unwrap();
    let mut out = Array4::zeros(out_dim);
    let out_s = out.as_slice_mut().unwrap();
    for c in 0..c_n {
        for ky in 0..kh {
            let (py_lo, py_hi) = valid_anchors(ph, h, ky, stride, pad);
            for kx in 0..kw {
                let (px_lo, px_hi) = valid_anchors(pw, w, kx, stride, pad);
                if px_lo >= px_hi {
                    continue;
                }
                let row_base = ((c * kh + ky) * kw + kx) * col_n;
                for b in 0..b_n {
                    let o_base = (b * c_n + c) * h * w;
                    for py in py_lo..py_hi {
                        let ty = py * stride + ky - pad;
                        let o_row = o_base + ty * w;
                        let col_row = row_base + (b * ph + py) * pw;
                        let dst_start = o_row + (px_lo * stride + kx - pad);
                        let src = &cols_s[col_row + px_lo..col_row + px_hi];
                        if stride == 1 {
                            for (d, &v) in out_s[dst_start..dst_start + src.len()]
                                .iter_mut()
                                .zip(src)
                            {
                                *d += v;
                            }
                        } else {
                            let dst = out_s[dst_start..].iter_mut().step_by(stride);
                            for (d, &v) in dst.zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn add_channel_bias(y: &mut Array4<f32>, b: &Param) {
    for (c, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
        plane += b.value[[c]];
    }
}

/// (B, O, Ph, Pw) gradient flattened to the (O, B*Ph*Pw) GEMM layout.
fn to_channel_major(dy: &Array4<f32>) -> Array2<f32> {
    let (b, o, ph, pw) = dy.dim();
    let permuted = dy.view().permuted_axes([1, 0, 2, 3]);
    let owned = permuted.as_standard_layout().to_owned();
    owned.into_shape_with_order((o, b * ph * pw)).unwrap()
}

/// (O, B*Ph*Pw) GEMM output unflattened to (B, O, Ph, Pw).
fn from_channel_major(mat: Array2<f32>, b: usize, ph: usize, pw: usize) -> Array4<f32> {
    let o = mat.nrows();
    let y = mat.into_shape_with_order((o, b, ph, pw)).unwrap();
    let permuted = y.view().permuted_axes([1, 0, 2, 3]);
    permuted.as_standard_layout().to_owned()
}

/// Strided convolution, weights (out, in, kh, kw).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize))>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Param::normal(
                &[out_channels, in_channels, kernel.0, kernel.1],
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

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_out(h, self.kernel.0, self.stride, self.pad),
            conv_out(w, self.kernel.1, self.stride, self.pad),
        )
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (b_n, c_n, h, w) = x.dim();
        assert_eq!(c_n, self.in_channels);
        let (ph, pw) = self.out_shape(h, w);
        let cols = im2col(x, (ph, pw), self.kernel, self.stride, self.pad);
        let w_mat = self
            .w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((self.out_channels, c_n * self.kernel.0 * self.kernel.1))
            .unwrap()
            .to_owned();
        let y_mat = w_mat.dot(&cols);
        let mut y = from_channel_major(y_mat, b_n, ph, pw);
        add_channel_bias(&mut y, &self.b);
        if train {
            self.cache = Some((cols, x.dim()));
        }
        y
    }

    /// Accumulates dw/db and returns dx.
    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (cols, x_dim) = self.cache.take().expect("forward(train) must precede backward");
        let (_, o_n, ph, pw) = dy.dim();
        assert_eq!(o_n, self.out_channels);
        let k = self.in_channels * self.kernel.0 * self.kernel.1;
        let dy_mat = to_channel_major(dy);

        let dw = dy_mat.dot(&cols.t());
        self.w.grad += &dw.into_shape_with_order(self.w.value.raw_dim()).unwrap();
        let db: Array1<f32> = dy
            .sum_axis(Axis(0))
            .sum_axis(Axis(1))
            .sum_axis(Axis(1));
        self.b.grad += &db.into_dyn();

        let w_mat = self
            .w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((o_n, k))
            .unwrap()
            .to_owned();
        let dcols = w_mat.t().dot(&dy_mat);
        col2im(&dcols, x_dim, (ph, pw), self.kernel, self.stride, self.pad)
    }
}

/// Fractionally strided convolution, weights (in, out, kh, kw). Upsamples
/// by `stride`; output extent is (in-1)*stride + k - 2*pad per axis.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub w: Param,
    pub b: Param,
    in_channels: usize,
    out_channels: usize,
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
    cache: Option<(Array2<f32>, (usize, usize, usize, usize))>,
}

impl ConvTranspose2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: Param::normal(
                &[in_channels, out_channels, kernel.0, kernel.1],
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

    pub fn out_shape(&self, h: usize, w: usize) -> (usize, usize) {
        (
            conv_transpose_out(h, self.kernel.0, self.stride, self.pad),
            conv_transpose_out(w, self.kernel.1, self.stride, self.pad),
        )
    }

    fn w_mat(&self) -> Array2<f32> {
        self.w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .into_shape_with_order((
                self.in_channels,
                self.out_channels * self.kernel.0 * self.kernel.1,
            ))
            .unwrap()
            .to_owned()
    }

    pub fn forward(&mut self, x: &Array4<f32>, train: bool) -> Array4<f32> {
        let (b_n, c_n, h, w) = x.dim();
        assert_eq!(c_n, self.in_channels);
        let (ho, wo) = self.out_shape(h, w);
        let x_mat = to_channel_major(x);
        let cols = self.w_mat().t().dot(&x_mat);
        let mut y = col2im(
            &cols,
            (b_n, self.out_channels, ho, wo),
            (h, w),
            self.kernel,
            self.stride,
            self.pad,
        );
        add_channel_bias(&mut y, &self.b);
        if train {
            self.cache = Some((x_mat, x.dim()));
        }
        y
    }

    /// Accumulates dw/db and returns dx.
    pub fn backward(&mut self, dy: &Array4<f32>) -> Array4<f32> {
        let (x_mat, x_dim) = self.cache.take().expect("forward(train) must precede backward");
        let (b_n, _, h, w) = x_dim;
        let dy_cols = im2col(dy, (h, w), self.kernel, self.stride, self.pad);

        let dw = x_mat.dot(&dy_cols.t());
        self.w.grad += &dw.into_shape_with_order(self.w.value.raw_dim()).unwrap();
        let db: Array1<f32> = dy
            .sum_axis(Axis(0))
            .sum_axis(Axis(1))
            .sum_axis(Axis(1));
        self.b.grad += &db.into_dyn();

        let dx_mat = self.w_mat().dot(&dy_cols);
        let dx = dx_mat
            .into_shape_with_order((self.in_channels, b_n, h, w))
            .unwrap();
        let permuted = dx.view().permuted_axes([1, 0, 2, 3]);
        permuted.as_standard_layout().to_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn conv_output_extents() {
        assert_eq!(conv_out(28, 4, 2, 1), 14);
        assert_eq!(conv_out(56, 4, 2, 1), 28);
        assert_eq!(conv_out(7, 4, 2, 1), 3);
        assert_eq!(conv_transpose_out(4, 4, 2, 1), 8);
        assert_eq!(conv_transpose_out(14, 4, 2, 1), 28);
    }

    #[test]
    fn conv_forward_matches_hand_computation() {
        let mut c = Conv2d::new(1, 1, (2, 2), 1, 0, &mut rng());
        c.w.value.assign(
            &Array::from_shape_vec((1, 1, 2, 2), vec![1.0f32, 0.0, 0.0, 1.0])
                .unwrap()
                .into_dyn(),
        );
        c.b.value.assign(&arr1(&[0.5f32]).into_dyn());
        let x = Array::from_shape_vec(
            (1, 1, 3, 3),
            vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
        )
        .unwrap();
        let y = c.forward(&x, false);
        let expect = Array::from_shape_vec((1, 1, 2, 2), vec![6.5f32, 8.5, 12.5, 14.5]).unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn conv_transpose_stride_two_paints_blocks() {
        let mut c = ConvTranspose2d::new(1, 1, (2, 2), 2, 0, &mut rng());
        c.w.value
            .assign(&Array::from_elem((1, 1, 2, 2), 1.0f32).into_dyn());
        c.b.value.fill(0.0);
        let x = Array::from_shape_vec((1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = c.forward(&x, false);
        let expect = Array::from_shape_vec(
            (1, 1, 4, 4),
            vec![
                1.0f32, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0,
            ],
        )
        .unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn conv_transpose_stride_one_overlaps() {
        let mut c = ConvTranspose2d::new(1, 1, (2, 2), 1, 0, &mut rng());
        c.w.value
            .assign(&Array::from_elem((1, 1, 2, 2), 1.0f32).into_dyn());
        c.b.value.fill(0.0);
        let x = Array::from_shape_vec((1, 1, 2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let y = c.forward(&x, false);
        let expect = Array::from_shape_vec(
            (1, 1, 3, 3),
            vec![1.0f32, 3.0, 2.0, 4.0, 10.0, 6.0, 3.0, 7.0, 4.0],
        )
        .unwrap();
        assert_eq!(y, expect);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for any x and c: the defining
        // property that makes the conv backward pass correct.
        let mut r = rng();
        let x = Array4::from_shape_simple_fn((2, 3, 5, 4), || r.random_range(-1.0f32..1.0));
        let pos = (3, 2);
        let kernel = (3, 3);
        let cols = im2col(&x, pos, kernel, 2, 1);
        let c = Array2::from_shape_simple_fn(cols.dim(), || r.random_range(-1.0f32..1.0));
        let lhs: f32 = (&cols * &c).sum();
        let back = col2im(&c, x.dim(), pos, kernel, 2, 1);
        let rhs: f32 = (&x * &back).sum();
        assert!((lhs - rhs).abs() < 1e-3, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn conv_backward_shapes_and_bias_grad() {
        let mut c = Conv2d::new(3, 5, (4, 4), 2, 1, &mut rng());
        let x = Array4::from_elem((2, 3, 8, 8), 0.1f32);
        let y = c.forward(&x, true);
        assert_eq!(y.dim(), (2, 5, 4, 4));
        let dy = Array4::from_elem(y.dim(), 1.0f32);
        let dx = c.backward(&dy);
        assert_eq!(dx.dim(), x.dim());
        // db = sum over batch and positions = 2*4*4
        assert!((c.b.grad[[0]] - 32.0).abs() < 1e-4);
    }

    #[test]
    fn conv_transpose_backward_shapes() {
        let mut c = ConvTranspose2d::new(4, 2, (4, 4), 2, 1, &mut rng());
        let x = Array4::from_elem((2, 4, 4, 7), 0.1f32);
        let y = c.forward(&x, true);
        assert_eq!(y.dim(), (2, 2, 8, 14));
        let dx = c.backward(&Array4::from_elem(y.dim(), 1.0f32));
        assert_eq!(dx.dim(), x.dim());
        assert!((c.b.grad[[1]] - (2 * 8 * 14) as f32).abs() < 1e-3);
    }

    #[test]
    fn channel_major_round_trip() {
        let mut r = rng();
        let x = Array4::from_shape_simple_fn((3, 2, 4, 5), || r.random_range(-1.0f32..1.0));
        let mat = to_channel_major(&x);
        assert_eq!(mat.dim(), (2, 3 * 4 * 5));
        let back = from_channel_major(mat, 3, 4, 5);
        assert_eq!(back, x);
    }

    #[test]
    fn gemm_path_matches_naive_loops_f32() {
        let mut r = rng();
        let mut c = Conv2d::new(2, 3, (3, 3), 2, 1, &mut rng());
        let x = Array4::from_shape_simple_fn((2, 2, 6, 5), || r.random_range(-1.0f32..1.0));
        let y = c.forward(&x, false);
        let w = c.w.value.view().into_dimensionality::<Ix4>().unwrap();
        let (ph, pw) = c.out_shape(6, 5);
        for b in 0..2 {
            for o in 0..3 {
                for py in 0..ph {
                    for px in 0..pw {
                        let mut acc = c.b.value[[o]];
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (py * 2 + ky) as isize - 1;
                                    let ix = (px * 2 + kx) as isize - 1;
                                    if iy >= 0 && iy < 6 && ix >= 0 && ix < 5 {
                                        acc += w[[o, ci, ky, kx]]
                                            * x[[b, ci, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        assert!((y[[b, o, py, px]] - acc).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
