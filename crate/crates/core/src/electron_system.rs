//! The linear electron problem
//!
//! ```text
//! u'' + (2/r) u' + g(2λ/r²) u = 0,   u(1) = 0,   u'(2) = 1
//! ```
//!
//! and the non-local cathode functional
//! `B(λ, u) = u'(2) + (λ/4) u(2) - γ ∫₁² p(r, λ) u dr`. The sparking voltage
//! `λ†` is the first voltage at which `B` changes sign from positive to
//! negative.

use log::debug;
use rayon::prelude::*;
use roots::{find_root_brent, Convergency};
use serde::{Deserialize, Serialize};

use crate::discretization::{
    boundary_derivative, cathode_stencil, sturm_liouville_rows, trapezoid, GridFunction, RadialGrid, Side,
};
use crate::error::{Error, Result};
use crate::linalg::BandedMatrix;
use crate::model::{g_fn, Parameters};

/// Default root tolerance on `|B|`.
pub const DEFAULT_ROOT_TOL: f64 = 1e-10;
/// Default upper end of the voltage scan.
pub const DEFAULT_LAMBDA_MAX: f64 = 100.0;

/// How the one-dimensional solution family of the ODE is pinned down.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `u'(2) = 1` through the one-sided stencil.
    #[default]
    CathodeSlope,
    /// `u(2) = 1`.
    CathodeValue,
}

#[derive(Clone, Debug)]
pub struct ElectronSolution {
    pub lambda: f64,
    pub u: GridFunction,
    /// `u'(2)`: exactly 1 under slope normalization, otherwise the stencil value.
    pub cathode_slope: f64,
    pub b_value: f64,
    /// `u > 0` on every node of `(1, 2]`.
    pub positive_flag: bool,
}

/// `p(r, λ) = a (λ/2) e^{-λ/2 + λ/r - b r²/(2λ)}` at the grid nodes.
pub fn ionization_kernel(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Vec<f64> {
    grid.nodes()
        .iter()
        .map(|&r| p.a * 0.5 * lambda * (-0.5 * lambda + lambda / r - p.b * r * r / (2.0 * lambda)).exp())
        .collect()
}

/// Electron ODE rows on the nodes `1..=N` (the anode value is pinned to 0
/// and eliminated) closed by the chosen normalization row at the cathode.
pub(crate) fn electron_matrix(
    lambda: f64,
    p: &Parameters,
    grid: &RadialGrid,
    norm: Normalization,
) -> Result<BandedMatrix> {
    let last = grid.last();
    let q: Vec<f64> = grid.nodes().iter().map(|&r| g_fn(2.0 * lambda / (r * r), p)).collect();
    let rows = sturm_liouville_rows(grid, &q)?;
    // unknown k holds node k + 1
    let mut m = BandedMatrix::zeros(last, 2, 1);
    for j in 1..last {
        let k = j - 1;
        if j > 1 {
            m.add(k, k - 1, rows.lower[j]);
        }
        m.add(k, k, rows.diag[j]);
        m.add(k, k + 1, rows.upper[j]);
    }
    let k = last - 1;
    match norm {
        Normalization::CathodeSlope => {
            let s = cathode_stencil(grid.delta());
            m.add(k, k - 2, s[0]);
            m.add(k, k - 1, s[1]);
            m.add(k, k, s[2]);
        }
        Normalization::CathodeValue => m.add(k, k, 1.0),
    }
    Ok(m)
}

/// Solves the electron problem with `u'(2) = 1`.
pub fn solve_electron(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Result<ElectronSolution> {
    solve_electron_normalized(lambda, p, grid, Normalization::CathodeSlope)
}

pub fn solve_electron_normalized(
    lambda: f64,
    p: &Parameters,
    grid: &RadialGrid,
    norm: Normalization,
) -> Result<ElectronSolution> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "voltage must be positive, got {lambda}"
        )));
    }
    let m = electron_matrix(lambda, p, grid, norm)?;
    let lu = m.factor("electron system")?;
    let mut rhs = vec![0.0; grid.last()];
    rhs[grid.last() - 1] = 1.0;
    let mut u = vec![0.0];
    u.extend(lu.solve(&rhs));
    let cathode_slope = match norm {
        Normalization::CathodeSlope => 1.0,
        Normalization::CathodeValue => boundary_derivative(&u, grid, Side::Cathode),
    };
    let b_value = boundary_b(lambda, &u, cathode_slope, p, grid);
    let positive_flag = u[1..].iter().all(|&v| v > 0.0);
    Ok(ElectronSolution {
        lambda,
        u: GridFunction(u),
        cathode_slope,
        b_value,
        positive_flag,
    })
}

/// `B(λ, u) = u'(2) + (λ/4)u(2) - γ ∫ p u dr`.
///
/// The cathode slope is passed in rather than differentiated from samples so
/// that the imposed normalization enters exactly.
pub fn boundary_b(lambda: f64, u: &[f64], cathode_slope: f64, p: &Parameters, grid: &RadialGrid) -> f64 {
    let kernel = ionization_kernel(lambda, p, grid);
    let pu: Vec<f64> = kernel.iter().zip(u).map(|(k, u)| k * u).collect();
    cathode_slope + 0.25 * lambda * u[u.len() - 1] - p.gamma * trapezoid(&pu, grid)
}

impl ElectronSolution {
    pub fn boundary_b(&self, p: &Parameters, grid: &RadialGrid) -> f64 {
        boundary_b(self.lambda, &self.u, self.cathode_slope, p, grid)
    }
}

/// The yield `γ` for which `B(λ, u) = 0`.
pub fn critical_gamma(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Result<f64> {
    let sol = solve_electron(lambda, p, grid)?;
    let kernel = ionization_kernel(lambda, p, grid);
    let pu: Vec<f64> = kernel.iter().zip(sol.u.iter()).map(|(k, u)| k * u).collect();
    let denom = trapezoid(&pu, grid);
    if !(denom > 0.0) {
        return Err(Error::NonPositiveDenominator(denom));
    }
    Ok((sol.cathode_slope + 0.25 * lambda * sol.u[grid.last()]) / denom)
}

/// Voltage scan used to bracket the sparking voltage: geometric points on
/// `[lambda_min, 1]` followed by uniform steps up to `lambda_max`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparkScan {
    pub lambda_min: f64,
    pub geometric_points: usize,
    pub uniform_step: f64,
    pub lambda_max: f64,
}

impl Default for SparkScan {
    fn default() -> Self {
        Self {
            lambda_min: 1e-2,
            geometric_points: 64,
            uniform_step: 0.25,
            lambda_max: DEFAULT_LAMBDA_MAX,
        }
    }
}

impl SparkScan {
    pub fn with_lambda_max(lambda_max: f64) -> Self {
        Self {
            lambda_max,
            ..Self::default()
        }
    }

    pub fn points(&self) -> Vec<f64> {
        let mut out = Vec::new();
        let geo_end = self.lambda_max.min(1.0);
        let k = self.geometric_points.max(2);
        let ratio = (geo_end / self.lambda_min).ln() / (k - 1) as f64;
        for i in 0..k {
            out.push(self.lambda_min * (ratio * i as f64).exp());
        }
        *out.last_mut().unwrap() = geo_end;
        let mut i = 1usize;
        loop {
            let l = geo_end + self.uniform_step * i as f64;
            if l > self.lambda_max + 1e-12 {
                break;
            }
            out.push(l);
            i += 1;
        }
        out
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda_min > 0.0
            && self.lambda_max > self.lambda_min
            && self.uniform_step > 0.0
            && self.geometric_points >= 2)
        {
            return Err(Error::InvalidParameter(format!("invalid voltage scan {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SparkingResult {
    pub lambda_dagger: f64,
    pub bracket: (f64, f64),
    pub residual_b: f64,
    pub u_dagger: GridFunction,
}

struct RootTolerance {
    tol: f64,
}

impl Convergency<f64> for RootTolerance {
    fn is_root_found(&mut self, y: f64) -> bool {
        y.abs() <= self.tol
    }

    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        (x1 - x2).abs() <= 4.0 * f64::EPSILON * x1.abs().max(x2.abs())
    }

    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter >= 200
    }
}

/// First positive-to-negative sign change of `B` on the default scan up to
/// `lambda_max`, refined with Brent's method to `|B| ≤ tol`.
pub fn sparking_voltage(p: &Parameters, lambda_max: f64, grid: &RadialGrid, tol: f64) -> Result<SparkingResult> {
    sparking_voltage_with(
        p,
        &SparkScan::with_lambda_max(lambda_max),
        grid,
        tol,
        Normalization::CathodeSlope,
    )
}

pub fn sparking_voltage_with(
    p: &Parameters,
    scan: &SparkScan,
    grid: &RadialGrid,
    tol: f64,
    norm: Normalization,
) -> Result<SparkingResult> {
    scan.validate()?;
    let lambdas = scan.points();
    let b_of = |l: f64| solve_electron_normalized(l, p, grid, norm).map(|s| s.b_value);
    let values: Vec<Result<f64>> = lambdas.par_iter().map(|&l| b_of(l)).collect();

    let mut bracket = None;
    let mut prev: Option<f64> = None;
    for (i, v) in values.into_iter().enumerate() {
        let v = v?;
        if let Some(pv) = prev {
            if pv > 0.0 && v <= 0.0 {
                bracket = Some((lambdas[i - 1], lambdas[i]));
                break;
            }
        }
        prev = Some(v);
    }
    let (lo, hi) = bracket.ok_or(Error::NoSignChange {
        lambda_min: scan.lambda_min,
        lambda_max: scan.lambda_max,
    })?;
    debug!("B changes sign on [{lo}, {hi}]");

    let mut failure = None;
    let f = |l: f64| match b_of(l) {
        Ok(b) => b,
        Err(e) => {
            failure.get_or_insert(e);
            f64::NAN
        }
    };
    let root = find_root_brent(lo, hi, f, &mut RootTolerance { tol }).map_err(|e| Error::RootFinding(format!("{e:?}")));
    if let Some(e) = failure {
        return Err(e);
    }
    let lambda_dagger = root?;
    let sol = solve_electron_normalized(lambda_dagger, p, grid, norm)?;
    if !(sol.b_value.abs() <= tol) {
        return Err(Error::RootFinding(format!(
            "|B| = {:e} above tolerance {tol:e} at λ = {lambda_dagger}",
            sol.b_value.abs()
        )));
    }
    Ok(SparkingResult {
        lambda_dagger,
        bracket: (lo, hi),
        residual_b: sol.b_value,
        u_dagger: sol.u,
    })
}

/// `α_λ = 4 / (1 + e^{-λ})`.
pub fn alpha_lambda(lambda: f64) -> f64 {
    4.0 / (1.0 + (-lambda).exp())
}

/// `(U, U', U'')` of the closed-form solution of
/// `U'' + (2/r)U' - (λ²/r⁴)U = 0`, `U(1) = 0`, `U'(2) = 1`.
pub fn auxiliary_u_derivatives(lambda: f64, r: f64) -> (f64, f64, f64) {
    let alpha = alpha_lambda(lambda);
    // both exponents are ≤ 0 on [1, 2]
    let e1 = (0.5 * lambda - lambda / r).exp();
    let e2 = (-1.5 * lambda + lambda / r).exp();
    let u = alpha / lambda * (e1 - e2);
    let du = alpha / (r * r) * (e1 + e2);
    let ddu = alpha * (-2.0 * (e1 + e2) / (r * r * r) + lambda * (e1 - e2) / (r * r * r * r));
    (u, du, ddu)
}

pub fn auxiliary_u(lambda: f64, grid: &RadialGrid) -> GridFunction {
    GridFunction::from_fn(grid, |r| auxiliary_u_derivatives(lambda, r).0)
}

/// `B(λ, U)` with the exact slope `U'(2) = 1` and `U(2) = (4/λ) tanh(λ/2)`.
pub fn boundary_b_of_u(lambda: f64, p: &Parameters, grid: &RadialGrid) -> f64 {
    let alpha = alpha_lambda(lambda);
    // p·U = (aα/2) e^{-br²/2λ} (1 - e^{-2λ + 2λ/r}), free of large exponentials
    let pu: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&r| {
            0.5 * p.a * alpha * (-p.b * r * r / (2.0 * lambda)).exp() * (1.0 - (-2.0 * lambda + 2.0 * lambda / r).exp())
        })
        .collect();
    let u2 = 4.0 / lambda * (0.5 * lambda).tanh();
    1.0 + 0.25 * lambda * u2 - p.gamma * trapezoid(&pu, grid)
}
