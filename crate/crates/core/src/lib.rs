//! Pedestrian trajectory forecasting on probability maps.
//!
//! The crate turns world-coordinate pedestrian tracks into dense per-frame
//! probability maps (one peak-normalized Gaussian per pedestrian, composed
//! with a cellwise max), pushes sequences of those maps through a stacked
//! convolutional LSTM trained with hand-derived backpropagation through
//! time, and decodes the predicted maps back into coordinates for ADE/FDE
//! evaluation against standard walking datasets.
//!
//! Everything here is pure computation over heap-allocated buffers; the
//! crate builds without `std` (default feature `std` only widens float
//! intrinsics and is required by some downstream tooling). File formats,
//! checkpoints on disk, and the command-line front end live in the
//! companion `socprob` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;
pub mod convlstm;
pub mod evaluation;
pub mod prob_map;
pub mod tensor;
pub mod training;
pub mod trajectory;

pub use error::{Error, ErrorClass, Result};

// Float intrinsics (sqrt, exp, ...) on concrete f64 come from the trait
// in no_std builds; with std the inherent methods resolve first.
#[cfg(not(feature = "std"))]
use num_traits::Float as _;

/// A position in world coordinates (meters).
///
/// Dataset coordinates, grid geometry, and metrics always use `f64`;
/// only map cell values and model parameters are generic in precision.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WorldPoint {
    pub x: f64,
    pub y: f64,
}

impl WorldPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    /// Euclidean distance to `other`.
    pub fn distance(&self, other: &WorldPoint) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}
