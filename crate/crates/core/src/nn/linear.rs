//! Fully connected layer.

use super::Param;
use ndarray::{Array1, Array2, Axis, Ix2};
use rand::Rng;

/// y = x.w^T + b with x of shape (batch, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Param,
    pub b: Param,
    in_features: usize,
    out_features: usize,
    cache: Option<Array2<f32>>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Param::normal(&[out_features, in_features], super::INIT_STD, rng),
            b: Param::zeros(&[out_features]),
            in_features,
            out_features,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn out_features(&self) -> usize {
        self.out_features
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Param)> {
        vec![("w", &mut self.w), ("b", &mut self.b)]
    }

    pub fn param_count(&self) -> usize {
        self.w.count() + self.b.count()
    }

    pub fn forward(&mut self, x: &Array2<f32>, train: bool) -> Array2<f32> {
        assert_eq!(x.ncols(), self.in_features);
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            for (v, &b) in row.iter_mut().zip(self.b.value.iter()) {
                *v += b;
            }
        }
        if train {
            self.cache = Some(x.clone());
        }
        y
    }

    /// Accumulates dw/db and returns dx.
    pub fn backward(&mut self, dy: &Array2<f32>) -> Array2<f32> {
        let x = self.cache.take().expect("forward(train) must precede backward");
        let dw = dy.t().dot(&x);
        let db: Array1<f32> = dy.sum_axis(Axis(0));
        self.w.grad += &dw.into_dyn();
        self.b.grad += &db.into_dyn();
        let w = self.w.value.view().into_dimensionality::<Ix2>().unwrap();
        dy.dot(&w)
    }
}
