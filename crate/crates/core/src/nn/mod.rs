//! Minimal CPU building blocks for the detector and generator networks.
//!
//! Parameters of a network live in one flat `Vec<f64>`; each layer holds
//! offsets into it. Forward passes only borrow the parameters, so a frozen
//! network can be shared between threads, and gradients accumulate into a
//! separate flat buffer of the same length.

mod adam;
mod conv;
mod linear;
mod ops;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;
pub use ops::{
    concat_channels, leaky_relu_backward, leaky_relu_inplace, softplus_backward, softplus_inplace,
    split_channels, upsample2, upsample2_backward,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A dense `channels × height × width` feature map.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Hands out contiguous parameter ranges while a network is being laid out.
#[derive(Debug, Default, Clone, Copy)]
pub struct ParamLayout {
    len: usize,
}

impl ParamLayout {
    pub fn alloc(&mut self, n: usize) -> usize {
        let offset = self.len;
        self.len += n;
        offset
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// He-normal fill for a weight block with the given fan-in.
pub(crate) fn he_normal<R: Rng>(rng: &mut R, weights: &mut [f64], fan_in: usize, gain: f64) {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    for w in weights {
        *w = normal.sample(rng);
    }
}
