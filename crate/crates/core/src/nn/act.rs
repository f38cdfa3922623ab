//! Elementwise activations with cached inputs for the backward pass.

use ndarray::{Array, Dimension};

/// LeakyReLU with a configurable negative slope.
#[derive(Debug, Clone)]
pub struct LeakyRelu<D: Dimension> {
    pub slope: f32,
    cache: Option<Array<f32, D>>,
}

impl<D: Dimension> LeakyRelu<D> {
    pub fn new(slope: f32) -> Self {
        Self { slope, cache: None }
    }

    pub fn forward(&mut self, x: Array<f32, D>, train: bool) -> Array<f32, D> {
        let slope = self.slope;
        let y = x.mapv(|v| if v > 0.0 { v } else { slope * v });
        if train {
            self.cache = Some(x);
        }
        y
    }

    pub fn backward(&mut self, mut dy: Array<f32, D>) -> Array<f32, D> {
        let x = self.cache.take().expect("forward(train) must precede backward");
        ndarray::Zip::from(&mut dy).and(&x).for_each(|d, &v| {
            if v <= 0.0 {
                *d *= self.slope;
            }
        });
        dy
    }
}

/// Tanh; the backward pass uses the cached output, 1 - y^2.
#[derive(Debug, Clone)]
pub struct Tanh<D: Dimension> {
    cache: Option<Array<f32, D>>,
}

impl<D: Dimension> Tanh<D> {
    pub fn new() -> Self {
        Self { cache: None }
    }

    pub fn forward(&mut self, x: &Array<f32, D>, train: bool) -> Array<f32, D> {
        let y = x.mapv(f32::tanh);
        if train {
            self.cache = Some(y.clone());
        }
        y
    }

    pub fn backward(&mut self, mut dy: Array<f32, D>) -> Array<f32, D> {
        let y = self.cache.take().expect("forward(train) must precede backward");
        ndarray::Zip::from(&mut dy).and(&y).for_each(|d, &v| {
            *d *= 1.0 - v * v;
        });
        dy
    }
}

impl<D: Dimension> Default for Tanh<D> {
    fn default() -> Self {
        Self::new()
    }
}
