use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Complex;

/// Complex `N_t × N_r` channel matrix, row-major (`data[t * nr + r]`).
///
/// The same type carries gradients, where each entry holds `∂L/∂Re + j ∂L/∂Im`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelMatrix {
    pub nt: usize,
    pub nr: usize,
    pub data: Vec<Complex>,
}

impl ChannelMatrix {
    pub fn zeros(nt: usize, nr: usize) -> Self {
        ChannelMatrix { nt, nr, data: vec![Complex::new(0.0, 0.0); nt * nr] }
    }

    pub fn from_vec(nt: usize, nr: usize, data: Vec<Complex>) -> Result<Self> {
        if data.len() != nt * nr {
            return Err(Error::shape(format!("{} entries for a {nt}x{nr} matrix", data.len())));
        }
        Ok(ChannelMatrix { nt, nr, data })
    }

    pub fn get(&self, t: usize, r: usize) -> Complex {
        self.data[t * self.nr + r]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.nt, self.nr)
    }

    /// Squared Frobenius norm.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn scaled(&self, s: f64) -> Self {
        ChannelMatrix { nt: self.nt, nr: self.nr, data: self.data.iter().map(|c| c * s).collect() }
    }

    /// Squared Frobenius norm of `self - other`.
    pub fn error_energy(&self, other: &ChannelMatrix) -> Result<f64> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!("{:?} vs {:?}", self.dims(), other.dims())));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm_sqr()).sum())
    }
}
