//! Geometric energy potentials and their forces.
//!
//! Three terms, all evaluated everywhere:
//!
//! * occupancy attraction, a Welsch kernel on `d_occ`;
//! * unknown-space weak prior, the same kernel on `d_unk` with a wide bandwidth;
//! * free-space barrier, a softplus of the penetration depth `d_trust`,
//!   masked to voxels labelled FREE.
//!
//! Forces are the interpolated distance gradients scaled by the analytic
//! derivative of each potential. `tau` is a dimensionless temperature on the
//! normalized depth `(d_trust - delta) / tau` with distances in meters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{interpolant_gradient, FieldBundle, FieldQueryResult, Label};
use crate::math::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnergyParams {
    pub w_occ: f64,
    pub sigma_occ: f64,
    pub w_unk: f64,
    pub sigma_unk: f64,
    pub lambda_free: f64,
    pub delta: f64,
    pub tau: f64,
}

impl Default for EnergyParams {
    fn default() -> Self {
        EnergyParams {
            w_occ: 1.0,
            sigma_occ: 1.0,
            w_unk: 0.25,
            sigma_unk: 2.0,
            lambda_free: 1.0,
            delta: 0.5,
            tau: 0.5,
        }
    }
}

impl EnergyParams {
    /// Near-surface stiffness `w / sigma^2` of the occupancy kernel.
    pub fn k_occ(&self) -> f64 {
        self.w_occ / (self.sigma_occ * self.sigma_occ)
    }

    pub fn k_unk(&self) -> f64 {
        self.w_unk / (self.sigma_unk * self.sigma_unk)
    }

    /// Every parameter strictly positive and finite.
    pub fn validate_positive(&self) -> Result<()> {
        let all = [
            ("w_occ", self.w_occ),
            ("sigma_occ", self.sigma_occ),
            ("w_unk", self.w_unk),
            ("sigma_unk", self.sigma_unk),
            ("lambda_free", self.lambda_free),
            ("delta", self.delta),
            ("tau", self.tau),
        ];
        for (name, v) in all {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        Ok(())
    }

    /// Positivity plus the stiffness hierarchy `k_unk < k_occ`.
    pub fn validate(&self) -> Result<()> {
        self.validate_positive()?;
        if !(self.k_unk() < self.k_occ()) {
            return Err(Error::Config(format!(
                "w_unk/sigma_unk^2 ({}) must be below w_occ/sigma_occ^2 ({})",
                self.k_unk(),
                self.k_occ()
            )));
        }
        Ok(())
    }

    /// Rescale the two weights so that `k_occ / k_unk = ratio` while the
    /// geometric mean `sqrt(k_occ * k_unk)` and both bandwidths stay fixed.
    /// Ratios below one deliberately break the hierarchy checked by
    /// [`EnergyParams::validate`].
    pub fn with_stiffness_ratio(&self, ratio: f64) -> EnergyParams {
        let gm = (self.k_occ() * self.k_unk()).sqrt();
        let k_occ = gm * ratio.sqrt();
        let k_unk = gm / ratio.sqrt();
        EnergyParams {
            w_occ: k_occ * self.sigma_occ * self.sigma_occ,
            w_unk: k_unk * self.sigma_unk * self.sigma_unk,
            ..*self
        }
    }

    /// Upper bound on the total force magnitude: the two Welsch maxima at
    /// `d = sigma` plus the saturated barrier `lambda / tau`.
    pub fn force_bound(&self) -> f64 {
        let e_half = (-0.5f64).exp();
        self.w_occ / self.sigma_occ * e_half + self.w_unk / self.sigma_unk * e_half + self.lambda_free / self.tau
    }

    /// Lipschitz bound of the force field: both spring constants plus the
    /// maximum curvature `lambda / (4 tau^2)` of the barrier.
    pub fn lipschitz_bound(&self) -> f64 {
        self.k_occ() + self.k_unk() + self.lambda_free / (4.0 * self.tau * self.tau)
    }
}

fn welsch(d: f64, w: f64, sigma: f64) -> f64 {
    -w * (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// `(w / sigma^2) d exp(-d^2 / 2 sigma^2)`: magnitude of a Welsch force at
/// distance `d`.
pub fn prop3_magnitude(d: f64, w: f64, sigma: f64) -> f64 {
    w / (sigma * sigma) * d * (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn energy_occ(d: f64, p: &EnergyParams) -> f64 {
    welsch(d, p.w_occ, p.sigma_occ)
}

pub fn energy_unk(d: f64, p: &EnergyParams) -> f64 {
    welsch(d, p.w_unk, p.sigma_unk)
}

/// Barrier energy including the `lambda_free` weight; zero outside FREE.
pub fn energy_free(d_trust: f64, is_free: bool, p: &EnergyParams) -> f64 {
    if is_free {
        p.lambda_free * softplus((d_trust - p.delta) / p.tau)
    } else {
        0.0
    }
}

/// Attraction toward the nearest LiDAR point, `-coef * grad d_occ`.
pub fn force_occ(q: &FieldQueryResult, p: &EnergyParams) -> Vec3 {
    -(q.grad_occ * prop3_magnitude(q.d_occ, p.w_occ, p.sigma_occ))
}

pub fn force_unk(q: &FieldQueryResult, p: &EnergyParams) -> Vec3 {
    -(q.grad_unk * prop3_magnitude(q.d_unk, p.w_unk, p.sigma_unk))
}

/// Repulsion out of FREE: `-(lambda / tau) sigmoid((d - delta) / tau) grad d_trust`.
pub fn force_free(q: &FieldQueryResult, p: &EnergyParams) -> Vec3 {
    if q.label != Label::Free {
        return Vec3::ZERO;
    }
    let coef = p.lambda_free / p.tau * sigmoid((q.d_trust - p.delta) / p.tau);
    -(q.grad_trust * coef)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergySample {
    pub e_occ: f64,
    pub e_unk: f64,
    /// Barrier energy, already weighted by `lambda_free`.
    pub e_free: f64,
    pub e_total: f64,
    pub force: Vec3,
    pub label: Label,
    pub clamped: bool,
}

/// Energy and force from an existing field query.
pub fn sample_from_query(q: &FieldQueryResult, occ_active: bool, p: &EnergyParams) -> EnergySample {
    let is_free = q.label == Label::Free;
    let (e_occ, f_occ) = if occ_active {
        (energy_occ(q.d_occ, p), force_occ(q, p))
    } else {
        (0.0, Vec3::ZERO)
    };
    let e_unk = energy_unk(q.d_unk, p);
    let e_free = energy_free(q.d_trust, is_free, p);
    EnergySample {
        e_occ,
        e_unk,
        e_free,
        e_total: e_occ + e_unk + e_free,
        force: f_occ + force_unk(q, p) + force_free(q, p),
        label: q.label,
        clamped: q.clamped,
    }
}

/// Total geometric energy and force at `pos`.
pub fn total_force(bundle: &FieldBundle, pos: Vec3, p: &EnergyParams) -> Result<EnergySample> {
    let q = bundle.query(pos)?;
    Ok(sample_from_query(&q, bundle.fields.occ_active, p))
}

/// Force from the exact gradient of the trilinear interpolants of the
/// distance grids, chained through the same potential derivatives. This is
/// the true negative gradient of the interpolated energy inside a cell; the
/// relaxation uses [`total_force`] instead.
pub fn interpolant_force(bundle: &FieldBundle, pos: Vec3, p: &EnergyParams) -> Result<Vec3> {
    let q = bundle.query(pos)?;
    let frame = bundle.frame();
    let pos = frame.bounds().clamp(pos);
    let f = &bundle.fields;
    let mut force = -(interpolant_gradient(frame, &f.d_unk, pos) * prop3_magnitude(q.d_unk, p.w_unk, p.sigma_unk));
    if f.occ_active {
        force = force - interpolant_gradient(frame, &f.d_occ, pos) * prop3_magnitude(q.d_occ, p.w_occ, p.sigma_occ);
    }
    if q.label == Label::Free {
        let coef = p.lambda_free / p.tau * sigmoid((q.d_trust - p.delta) / p.tau);
        force = force - interpolant_gradient(frame, &f.d_trust, pos) * coef;
    }
    Ok(force)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn q_with(d_occ: f64, grad_occ: Vec3) -> FieldQueryResult {
        FieldQueryResult {
            label: Label::Occ,
            d_occ,
            d_trust: 0.0,
            d_unk: 0.0,
            grad_occ,
            grad_trust: Vec3::ZERO,
            grad_unk: Vec3::ZERO,
            clamped: false,
        }
    }

    #[test]
    fn occ_energy_values() {
        let p = EnergyParams::default();
        assert_eq!(energy_occ(0.0, &p), -1.0);
        assert!(energy_occ(50.0, &p) <= 0.0 && energy_occ(50.0, &p) > -1e-300);
        assert!(close(energy_occ(1.0, &p), -0.6065306597126334, 1e-15));
    }

    #[test]
    fn occ_force_values() {
        let p = EnergyParams::default();
        assert_eq!(force_occ(&q_with(0.0, Vec3::new(1.0, 0.0, 0.0)), &p), -Vec3::ZERO);
        let f = force_occ(&q_with(1.0, Vec3::new(1.0, 0.0, 0.0)), &p);
        assert!(close(f.x, -0.6065306597126334, 1e-15));
        assert_eq!((f.y, f.z), (0.0, 0.0));
    }

    #[test]
    fn fixed_stiffness_keeps_near_field() {
        // w / sigma^2 held at 1: the small-d force is ~k d for every sigma
        for sigma in [1.0f64, 2.0, 4.0, 8.0, 16.0] {
            let w = sigma * sigma;
            let near = prop3_magnitude(0.01, w, sigma);
            assert!(close(near, 0.01, 1e-6));
            let far = prop3_magnitude(2.0, w, sigma);
            assert!(far <= 2.0 && far >= 2.0 * (-2.0f64).exp());
        }
    }

    #[test]
    fn free_energy_values() {
        let p = EnergyParams { lambda_free: 2.0, ..EnergyParams::default() };
        assert!(close(energy_free(p.delta, true, &p), 2.0 * std::f64::consts::LN_2, 1e-15));
        assert!(close(energy_free(0.0, true, &p), 2.0 * 0.31326168751822286, 1e-14));
        assert_eq!(energy_free(3.0, false, &p), 0.0);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) == 0.0);
        assert!(close(softplus(30.0), 30.0, 1e-12));
        assert!(close(softplus(0.0), std::f64::consts::LN_2, 1e-16));
    }

    #[test]
    fn free_force_limits() {
        let p = EnergyParams::default();
        let mut q = q_with(5.0, Vec3::ZERO);
        q.label = Label::Free;
        q.grad_trust = Vec3::new(0.0, 0.0, 1.0);
        q.d_trust = p.delta;
        assert!(close(force_free(&q, &p).norm(), p.lambda_free / (2.0 * p.tau), 1e-15));
        q.d_trust = 40.0;
        assert!(close(force_free(&q, &p).norm(), p.lambda_free / p.tau, 1e-12));
        q.d_trust = 0.0;
        let small = force_free(&q, &p).norm();
        q.d_trust = 1e-3;
        assert!(small < force_free(&q, &p).norm());
        assert!(force_free(&q, &p).z < 0.0);
        q.label = Label::Occ;
        assert_eq!(force_free(&q, &p), Vec3::ZERO);
    }

    #[test]
    fn unk_values() {
        let p = EnergyParams::default();
        assert_eq!(energy_unk(0.0, &p), -0.25);
        assert!(close(prop3_magnitude(2.0, 0.25, 2.0), 0.0758163324640792, 1e-15));
        let mut q = q_with(1.0, Vec3::ZERO);
        q.grad_unk = Vec3::ZERO;
        q.d_unk = 0.0;
        assert_eq!(force_unk(&q, &p).norm(), 0.0);
    }

    #[test]
    fn prop3_values() {
        let r = prop3_magnitude(1.0, 1.0, 10.0) / prop3_magnitude(1.0, 1.0, 1.0);
        assert!(close(r, 0.01 * (0.5f64 - 0.005).exp(), 1e-15));
        assert!(close(r, 0.01640, 5e-6));
        assert_eq!(prop3_magnitude(0.0, 1.0, 3.0), 0.0);
        assert!(prop3_magnitude(1.0, 1.0, 1e6) < 1e-11);
    }

    #[test]
    fn welsch_force_is_bounded() {
        let p = EnergyParams::default();
        let bound = p.w_occ / (p.sigma_occ * std::f64::consts::E.sqrt());
        let mut max = 0.0f64;
        for i in 0..100_000 {
            let d = i as f64 * 1e-4;
            max = max.max(prop3_magnitude(d, p.w_occ, p.sigma_occ));
        }
        assert!(max <= bound + 1e-15);
        assert!(close(max, bound, 1e-8));
    }

    #[test]
    fn barrier_is_monotone() {
        let p = EnergyParams::default();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..20_000 {
            let e = energy_free(i as f64 * 1e-3, true, &p);
            assert!(e > prev);
            prev = e;
        }
    }

    #[test]
    fn ratio_rescaling_keeps_geometric_mean() {
        let p = EnergyParams::default();
        assert!(close(p.k_occ() / p.k_unk(), 16.0, 1e-12));
        for r in [1.0 / 16.0, 0.25, 4.0, 16.0, 64.0] {
            let q = p.with_stiffness_ratio(r);
            assert!(close(q.k_occ() / q.k_unk(), r, 1e-12));
            assert!(close(q.k_occ() * q.k_unk(), p.k_occ() * p.k_unk(), 1e-15));
            assert_eq!(q.sigma_unk, p.sigma_unk);
        }
        let same = p.with_stiffness_ratio(16.0);
        assert!(close(same.w_occ, 1.0, 1e-12) && close(same.w_unk, 0.25, 1e-12));
        assert!(p.with_stiffness_ratio(1.0 / 16.0).validate().is_err());
    }

    #[test]
    fn params_validation() {
        assert!(EnergyParams::default().validate().is_ok());
        let bad = EnergyParams { tau: 0.0, ..EnergyParams::default() };
        assert!(bad.validate().is_err());
    }

    proptest::proptest! {
        #[test]
        fn prop3_decay(d in 0.0f64..20.0, w in 0.01f64..10.0, sigma in 0.05f64..50.0) {
            let f = prop3_magnitude(d, w, sigma);
            proptest::prop_assert!(f <= w * d / (sigma * sigma) + 1e-15);
            if sigma >= d {
                proptest::prop_assert!(prop3_magnitude(d, w, sigma * 1.01) <= f);
            }
        }
    }
}
