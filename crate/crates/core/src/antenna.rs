//! Antenna array layouts and far-field steering vectors.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Complex, Vec3};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

pub fn wavelength(carrier_hz: f64) -> f64 {
    SPEED_OF_LIGHT / carrier_hz
}

/// Array geometry with element spacing in wavelengths. Element 0 is the reference.
///
/// A URA lies in the y-z plane (`rows` along z, `cols` along y) so its broadside
/// is the x axis; a ULA lies along y.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ArraySpec {
    Ura { rows: usize, cols: usize, spacing_lambda: f64 },
    Ula { n: usize, spacing_lambda: f64 },
}

impl ArraySpec {
    pub fn single() -> Self {
        ArraySpec::Ula { n: 1, spacing_lambda: 0.5 }
    }

    pub fn len(&self) -> usize {
        match *self {
            ArraySpec::Ura { rows, cols, .. } => rows * cols,
            ArraySpec::Ula { n, .. } => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing_lambda(&self) -> f64 {
        match *self {
            ArraySpec::Ura { spacing_lambda, .. } | ArraySpec::Ula { spacing_lambda, .. } => spacing_lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::InvalidArgument("antenna array has no elements".into()));
        }
        if !(self.spacing_lambda() > 0.0) {
            return Err(Error::InvalidArgument("element spacing must be positive".into()));
        }
        Ok(())
    }

    /// In-plane element coordinates in meters: `(col·d, row·d)` for a URA and
    /// `(i·d, 0)` for a ULA.
    pub fn planar_coords(&self, wavelength: f64) -> Vec<(f64, f64)> {
        let d = self.spacing_lambda() * wavelength;
        match *self {
            ArraySpec::Ura { rows, cols, .. } => {
                (0..rows).flat_map(|m| (0..cols).map(move |n| (n as f64 * d, m as f64 * d))).collect()
            }
            ArraySpec::Ula { n, .. } => (0..n).map(|i| (i as f64 * d, 0.0)).collect(),
        }
    }

    /// Element offsets in scene coordinates.
    pub fn element_offsets(&self, wavelength: f64) -> Vec<Vec3> {
        self.planar_coords(wavelength).into_iter().map(|(a, b)| Vec3::new(0.0, a, b)).collect()
    }
}

/// Unit direction with azimuth `az` and elevation `el`.
pub fn direction(az: f64, el: f64) -> Vec3 {
    Vec3::new(az.cos() * el.cos(), az.sin() * el.cos(), el.sin())
}

/// `exp(j 2π/λ · d·u(az, el))` for every element offset `d`.
pub fn steering_vector(offsets: &[Vec3], wavelength: f64, az: f64, el: f64) -> Vec<Complex> {
    let u = direction(az, el);
    let k = 2.0 * PI / wavelength;
    offsets.iter().map(|d| Complex::from_polar(1.0, k * d.dot(u))).collect()
}
