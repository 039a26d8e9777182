use serde::{Deserialize, Serialize};

use crate::numerics::{NumericsError, Tensor};

/// Row-major 2D grid of attenuation values.
///
/// Row 0 is the top of the physical domain (largest `y`), column 0 the left
/// edge (smallest `x`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if data.len() != height * width {
            return Err(NumericsError::DataLength {
                shape: vec![height, width],
                len: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn dot(&self, other: &Image) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scaled(&self, s: f64) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Single-channel `[1, h, w]` tensor view for the network primitives.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width], self.data.clone()).expect("consistent")
    }

    /// Accepts `[h, w]` or `[1, h, w]` tensors.
    pub fn from_tensor(t: &Tensor) -> Result<Self, NumericsError> {
        match *t.shape() {
            [h, w] | [1, h, w] => Self::new(h, w, t.data().to_vec()),
            _ => Err(NumericsError::Rank {
                op: "image",
                expected: 3,
                found: t.shape().to_vec(),
            }),
        }
    }
}
