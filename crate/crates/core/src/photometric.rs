//! Synthetic stand-in for the photometric loss: a sum of isotropic Gaussian
//! wells with an analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Aabb, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Well {
    pub center: Vec3,
    /// Depth of the well; positive values attract.
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhotometricField {
    pub wells: Vec<Well>,
}

impl PhotometricField {
    pub fn zero() -> Self {
        PhotometricField::default()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, w) in self.wells.iter().enumerate() {
            if !(w.sigma > 0.0) || !w.center.is_finite() || !w.amplitude.is_finite() {
                return Err(Error::Config(format!("photometric well {i} is invalid")));
            }
        }
        Ok(())
    }

    /// `L(x) = -sum a exp(-|x - c|^2 / 2 s^2)`.
    pub fn loss(&self, x: Vec3) -> f64 {
        self.wells
            .iter()
            .map(|w| {
                let r = x - w.center;
                -w.amplitude * (-r.dot(r) / (2.0 * w.sigma * w.sigma)).exp()
            })
            .sum()
    }

    pub fn gradient(&self, x: Vec3) -> Vec3 {
        let mut g = Vec3::ZERO;
        for w in &self.wells {
            let r = x - w.center;
            let s2 = w.sigma * w.sigma;
            g += r * (w.amplitude / s2 * (-r.dot(r) / (2.0 * s2)).exp());
        }
        g
    }

    /// Many narrow wells with Pareto-distributed depths: a gradient field
    /// whose norm distribution has a heavy tail and sharp spikes.
    pub fn heavy_tailed(seed: u64, bounds: Aabb, count: usize, sigma: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ext = bounds.extent();
        let wells = (0..count)
            .map(|_| {
                let u = Vec3::new(rng.random(), rng.random(), rng.random());
                let center = bounds.min + Vec3::new(u.x * ext.x, u.y * ext.y, u.z * ext.z);
                // Pareto(x_m = 0.2, alpha = 1.2)
                let v: f64 = rng.random_range(1e-6..1.0);
                let amplitude = 0.2 * v.powf(-1.0 / 1.2);
                let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                Well { center, amplitude: sign * amplitude, sigma }
            })
            .collect();
        PhotometricField { wells }
    }
}
