//! Closed-form model functions of the radial Townsend discharge.
//!
//! The ionization rate is `h(ℓ) = a ℓ exp(-b/ℓ)` as a function of the field
//! magnitude `ℓ`; the net electron growth rate after the exponential change of
//! variables is `g(ℓ) = h(ℓ) - ℓ²/4`. The applied potential between the anode
//! (`r = 1`) and the cathode (`r = 2`) is `λ H(r)` with the harmonic profile
//! `H(r) = 2 (1 - 1/r)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Radius of the anode sphere.
pub const R_ANODE: f64 = 1.0;
/// Radius of the cathode sphere.
pub const R_CATHODE: f64 = 2.0;

/// Tolerance used by [`high_voltage_condition`].
pub const HIGH_VOLTAGE_TOL: f64 = 1e-12;

/// Fixed geometry of the spherical shell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometryConstants {
    pub r_anode: f64,
    pub r_cathode: f64,
}

impl Default for GeometryConstants {
    fn default() -> Self {
        Self {
            r_anode: R_ANODE,
            r_cathode: R_CATHODE,
        }
    }
}

/// Physical constants of the discharge. All strictly positive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// Ionization amplitude.
    pub a: f64,
    /// Ionization activation field.
    pub b: f64,
    /// Secondary-emission yield at the cathode.
    pub gamma: f64,
    /// Electron mobility.
    pub k_e: f64,
    /// Ion mobility.
    pub k_i: f64,
}

impl Parameters {
    /// Builds a validated parameter set.
    pub fn new(a: f64, b: f64, gamma: f64, k_e: f64, k_i: f64) -> Result<Self> {
        let p = Self { a, b, gamma, k_e, k_i };
        p.validate()?;
        Ok(p)
    }

    /// Unit mobilities, the default used throughout the tests and the CLI.
    pub fn with_unit_mobilities(a: f64, b: f64, gamma: f64) -> Result<Self> {
        Self::new(a, b, gamma, 1.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("a", self.a),
            ("b", self.b),
            ("gamma", self.gamma),
            ("k_e", self.k_e),
            ("k_i", self.k_i),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be a positive finite number, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Ionization rate `h(ℓ) = a ℓ e^{-b/ℓ}`, extended by continuity with `h(0) = 0`.
pub fn townsend_h(ell: f64, p: &Parameters) -> f64 {
    if ell <= 0.0 {
        return 0.0;
    }
    p.a * ell * (-p.b / ell).exp()
}

/// Derivative `h'(ℓ) = a e^{-b/ℓ} (1 + b/ℓ)` for `ℓ > 0`.
pub fn townsend_h_prime(ell: f64, p: &Parameters) -> Result<f64> {
    if !(ell > 0.0) {
        return Err(Error::Domain(format!(
            "h' requires a positive field magnitude, got {ell}"
        )));
    }
    Ok(h_prime_unchecked(ell, p))
}

/// `h'` with the continuous extension `h'(0) = 0`; every derivative of `h`
/// vanishes as `ℓ → 0⁺`.
pub(crate) fn h_prime_unchecked(ell: f64, p: &Parameters) -> f64 {
    if ell <= 0.0 {
        return 0.0;
    }
    p.a * (-p.b / ell).exp() * (1.0 + p.b / ell)
}

/// `d/dE h(|E|)`, the derivative used by the steady-state Jacobian.
pub(crate) fn h_abs_derivative(field: f64, p: &Parameters) -> f64 {
    if field > 0.0 {
        h_prime_unchecked(field, p)
    } else if field < 0.0 {
        -h_prime_unchecked(-field, p)
    } else {
        0.0
    }
}

/// Net growth rate `g(ℓ) = h(ℓ) - ℓ²/4`.
pub fn g_fn(ell: f64, p: &Parameters) -> f64 {
    townsend_h(ell, p) - 0.25 * ell * ell
}

/// `g'(ℓ) = h'(ℓ) - ℓ/2` for `ℓ > 0`.
pub fn g_prime(ell: f64, p: &Parameters) -> Result<f64> {
    Ok(townsend_h_prime(ell, p)? - 0.5 * ell)
}

fn check_radius(r: f64) -> Result<()> {
    if !(R_ANODE..=R_CATHODE).contains(&r) {
        return Err(Error::Domain(format!("radius {r} outside [1, 2]")));
    }
    Ok(())
}

/// Harmonic profile `H(r) = 2(1 - 1/r)`, with `H(1) = 0` and `H(2) = 1`.
pub fn harmonic_h(r: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(harmonic_h_unchecked(r))
}

/// `H'(r) = 2/r²`.
pub fn harmonic_dh(r: f64) -> Result<f64> {
    check_radius(r)?;
    Ok(harmonic_dh_unchecked(r))
}

#[inline]
pub(crate) fn harmonic_h_unchecked(r: f64) -> f64 {
    2.0 * (1.0 - 1.0 / r)
}

#[inline]
pub(crate) fn harmonic_dh_unchecked(r: f64) -> f64 {
    2.0 / (r * r)
}

/// Parameter region where a sparking voltage is guaranteed to exist:
/// `γ > 1/a` and `b > 4a/e`.
pub fn in_gamma_region(p: &Parameters) -> bool {
    p.gamma > 1.0 / p.a && p.b > 4.0 * p.a / std::f64::consts::E
}

/// Non-degeneracy hypothesis of the high-voltage analysis:
/// `γ/(1+γ) ≠ e^{-a}`, decided with tolerance [`HIGH_VOLTAGE_TOL`].
pub fn high_voltage_condition(p: &Parameters) -> bool {
    (p.gamma / (1.0 + p.gamma) - (-p.a).exp()).abs() > HIGH_VOLTAGE_TOL
}
