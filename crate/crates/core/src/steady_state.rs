//! Discrete steady system in the variables `(λ, ρ_i, R_e, V)` where
//! `ρ_e = R_e e^{-λH/2}` and the potential is `Φ = V + λH`.
//!
//! Rows, with `E = V' + λH'` the radial field:
//!
//! ```text
//! F1 = (k_i/r²)(r² ρ_i E)' - k_e h(|E|) e^{-λH/2} R_e          nodes 1..=N
//! F2 = -ΔR_e - V'R_e' + {(λ/2)V'H' - ΔV + (λ²/4)H'² - h(|E|)} R_e   nodes 1..N-1
//! F3 = ΔV - ρ_i + e^{-λH/2} R_e                                nodes 1..N-1
//! F4 = R_e'(2) + ((λ/2)H'(2) + V'(2)) R_e(2) - γ (k_i/k_e) e^{λ/2} E(2) ρ_i(2)
//! ```
//!
//! `F1` is discretized as a conservative box scheme: the flux difference is a
//! backward (upwind for `E > 0`) difference and the source is averaged over
//! the cell `[r_{j-1}, r_j]`. This keeps the row first order pointwise while
//! making `r² ρ_i E` exactly the running trapezoid integral of the source.
//!
//! Unknowns are interleaved by node, `[ρ_i, R_e, V]` at nodes `1..N-1` and
//! `[ρ_i, R_e]` at the cathode node `N`; the row order matches.

use std::fmt;

use crate::discretization::{anode_stencil, cathode_stencil, cumulative_trapezoid, max_abs, GridFunction, RadialGrid};
use crate::error::{Error, Result};
use crate::linalg::{BandedMatrix, BorderedMatrix};
use crate::model::{h_abs_derivative, harmonic_dh_unchecked, harmonic_h_unchecked, townsend_h, Parameters};

/// Default floor on the field used by the admissibility monitor.
pub const DEFAULT_FIELD_FLOOR: f64 = 1e-6;
/// Default Newton tolerance on the residual norm.
pub const DEFAULT_NEWTON_TOL: f64 = 1e-10;

const ARMIJO_C: f64 = 1e-4;
const MIN_DAMPING: f64 = 1.0 / (1u64 << 20) as f64;
/// Half bandwidth of the state Jacobian.
pub const BANDWIDTH: usize = 6;

/// Voltage and the three profiles, stored on the full grid with the
/// boundary values `ρ_i(1) = R_e(1) = V(1) = V(2) = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct State {
    pub lambda: f64,
    pub rho_i: GridFunction,
    pub r_e: GridFunction,
    pub v: GridFunction,
}

impl State {
    pub fn trivial(lambda: f64, grid: &RadialGrid) -> Self {
        Self {
            lambda,
            rho_i: GridFunction::zeros(grid),
            r_e: GridFunction::zeros(grid),
            v: GridFunction::zeros(grid),
        }
    }

    /// Number of unknowns excluding `λ`.
    pub fn dim(grid: &RadialGrid) -> usize {
        3 * grid.last() - 1
    }

    pub fn to_unknowns(&self) -> Vec<f64> {
        let last = self.rho_i.len() - 1;
        let mut x = Vec::with_capacity(3 * last - 1);
        for j in 1..=last {
            x.push(self.rho_i[j]);
            x.push(self.r_e[j]);
            if j < last {
                x.push(self.v[j]);
            }
        }
        x
    }

    pub fn from_unknowns(lambda: f64, x: &[f64], grid: &RadialGrid) -> Self {
        let last = grid.last();
        assert_eq!(x.len(), Self::dim(grid));
        let mut s = Self::trivial(lambda, grid);
        for j in 1..=last {
            let k = 3 * (j - 1);
            s.rho_i[j] = x[k];
            s.r_e[j] = x[k + 1];
            if j < last {
                s.v[j] = x[k + 2];
            }
        }
        s
    }

    /// `√(∫ r² (ρ_i² + R_e² + V²) dr)` with trapezoid weights.
    pub fn profile_norm(&self, grid: &RadialGrid) -> f64 {
        weighted_profile_norm_sq(&self.rho_i, &self.r_e, &self.v, grid).sqrt()
    }

    pub fn check(&self, grid: &RadialGrid) -> Result<()> {
        grid.check(&self.rho_i)?;
        grid.check(&self.r_e)?;
        grid.check(&self.v)?;
        Ok(())
    }
}

pub(crate) fn weighted_profile_norm_sq(a: &[f64], b: &[f64], c: &[f64], grid: &RadialGrid) -> f64 {
    (0..grid.len())
        .map(|j| {
            let r = grid.r(j);
            grid.weights()[j] * r * r * (a[j] * a[j] + b[j] * b[j] + c[j] * c[j])
        })
        .sum()
}

/// Unknown index of `ρ_i` at node `j ≥ 1`.
#[inline]
pub(crate) fn idx_rho(j: usize) -> usize {
    3 * (j - 1)
}

#[inline]
pub(crate) fn idx_re(j: usize) -> usize {
    3 * (j - 1) + 1
}

#[inline]
pub(crate) fn idx_v(j: usize) -> usize {
    3 * (j - 1) + 2
}

/// Residual rows on the full grid; entries outside a row's node range are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub f1: GridFunction,
    pub f2: GridFunction,
    pub f3: GridFunction,
    pub f4: f64,
}

impl Residual {
    /// Rows in unknown order.
    pub fn to_vec(&self) -> Vec<f64> {
        let last = self.f1.len() - 1;
        let mut out = Vec::with_capacity(3 * last - 1);
        for j in 1..=last {
            out.push(self.f1[j]);
            if j < last {
                out.push(self.f2[j]);
                out.push(self.f3[j]);
            } else {
                out.push(self.f4);
            }
        }
        out
    }

    /// Inverse of [`Residual::to_vec`].
    pub fn from_rows(rows: &[f64], grid: &RadialGrid) -> Self {
        let n = grid.len();
        let last = grid.last();
        let (mut f1, mut f2, mut f3) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        let mut f4 = 0.0;
        for j in 1..=last {
            let k = 3 * (j - 1);
            f1[j] = rows[k];
            if j < last {
                f2[j] = rows[k + 1];
                f3[j] = rows[k + 2];
            } else {
                f4 = rows[k + 1];
            }
        }
        Self {
            f1: GridFunction(f1),
            f2: GridFunction(f2),
            f3: GridFunction(f3),
            f4,
        }
    }

    /// `√(∫ r² (F1² + F2² + F3²) dr + F4²)`.
    pub fn y_norm(&self, grid: &RadialGrid) -> f64 {
        (weighted_profile_norm_sq(&self.f1, &self.f2, &self.f3, grid) + self.f4 * self.f4).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.f1)
            .max(max_abs(&self.f2))
            .max(max_abs(&self.f3))
            .max(self.f4.abs())
    }
}

/// `Y`-norm of a row vector in unknown order.
pub fn y_norm_of_rows(rows: &[f64], grid: &RadialGrid) -> f64 {
    let last = grid.last();
    let mut s = 0.0;
    for j in 1..=last {
        let wr2 = grid.weights()[j] * grid.r(j) * grid.r(j);
        let k = 3 * (j - 1);
        if j < last {
            s += wr2 * (rows[k] * rows[k] + rows[k + 1] * rows[k + 1] + rows[k + 2] * rows[k + 2]);
        } else {
            s += wr2 * rows[k] * rows[k] + rows[k + 1] * rows[k + 1];
        }
    }
    s.sqrt()
}

/// First-derivative stencil of `V` at node `j` as `(node, coefficient)` pairs.
fn d1_stencil(j: usize, grid: &RadialGrid) -> [(usize, f64); 3] {
    let d = grid.delta();
    let last = grid.last();
    if j == 0 {
        let s = anode_stencil(d);
        [(0, s[0]), (1, s[1]), (2, s[2])]
    } else if j == last {
        let s = cathode_stencil(d);
        [(last - 2, s[0]), (last - 1, s[1]), (last, s[2])]
    } else {
        let c = 0.5 / d;
        [(j - 1, -c), (j + 1, c), (j, 0.0)]
    }
}

/// Pointwise quantities shared by residual and Jacobian.
struct Fields {
    dv: Vec<f64>,
    field: Vec<f64>,
    h: Vec<f64>,
    dh_abs: Vec<f64>,
    decay: Vec<f64>,
    hh: Vec<f64>,
    dhh: Vec<f64>,
}

fn fields(state: &State, p: &Parameters, grid: &RadialGrid) -> Fields {
    let n = grid.len();
    let lambda = state.lambda;
    let mut f = Fields {
        dv: vec![0.0; n],
        field: vec![0.0; n],
        h: vec![0.0; n],
        dh_abs: vec![0.0; n],
        decay: vec![0.0; n],
        hh: vec![0.0; n],
        dhh: vec![0.0; n],
    };
    for j in 0..n {
        let r = grid.r(j);
        let dv: f64 = d1_stencil(j, grid).iter().map(|&(m, c)| c * state.v[m]).sum();
        f.hh[j] = harmonic_h_unchecked(r);
        f.dhh[j] = harmonic_dh_unchecked(r);
        f.dv[j] = dv;
        f.field[j] = dv + lambda * f.dhh[j];
        f.h[j] = townsend_h(f.field[j].abs(), p);
        f.dh_abs[j] = h_abs_derivative(f.field[j], p);
        f.decay[j] = (-0.5 * lambda * f.hh[j]).exp();
    }
    f
}

/// Evaluates the four residual rows.
pub fn residual(state: &State, p: &Parameters, grid: &RadialGrid) -> Residual {
    let n = grid.len();
    let last = grid.last();
    let d = grid.delta();
    let lambda = state.lambda;
    let f = fields(state, p, grid);
    let (rho, re, v) = (&state.rho_i, &state.r_e, &state.v);

    let flux = |m: usize| grid.r(m) * grid.r(m) * rho[m] * f.field[m];
    let source = |m: usize| grid.r(m) * grid.r(m) * f.h[m] * f.decay[m] * re[m];

    let mut f1 = vec![0.0; n];
    let mut f2 = vec![0.0; n];
    let mut f3 = vec![0.0; n];
    for j in 1..=last {
        let r2 = grid.r(j) * grid.r(j);
        f1[j] = p.k_i * (flux(j) - flux(j - 1)) / (r2 * d) - p.k_e * 0.5 * (source(j - 1) + source(j)) / r2;
    }
    let inv_d2 = 1.0 / (d * d);
    for j in 1..last {
        let r = grid.r(j);
        let d1r = 0.5 * (re[j + 1] - re[j - 1]) / d;
        let d2r = (re[j + 1] - 2.0 * re[j] + re[j - 1]) * inv_d2;
        let d2v = (v[j + 1] - 2.0 * v[j] + v[j - 1]) * inv_d2;
        let lap_v = d2v + 2.0 / r * f.dv[j];
        let coeff = 0.5 * lambda * f.dv[j] * f.dhh[j] - lap_v + 0.25 * lambda * lambda * f.dhh[j] * f.dhh[j] - f.h[j];
        f2[j] = -d2r - 2.0 / r * d1r - f.dv[j] * d1r + coeff * re[j];
        f3[j] = lap_v - rho[j] + f.decay[j] * re[j];
    }
    let cs = cathode_stencil(d);
    let d1r_n = cs[0] * re[last - 2] + cs[1] * re[last - 1] + cs[2] * re[last];
    let kappa = p.gamma * p.k_i / p.k_e * (0.5 * lambda).exp();
    let f4 = d1r_n + (0.5 * lambda * f.dhh[last] + f.dv[last]) * re[last] - kappa * f.field[last] * rho[last];
    Residual {
        f1: GridFunction(f1),
        f2: GridFunction(f2),
        f3: GridFunction(f3),
        f4,
    }
}

/// Exact derivative of [`residual`]: the banded state block and the column
/// `∂F/∂λ`, both in unknown order.
pub struct Jacobian {
    pub state: BandedMatrix,
    pub lambda_column: Vec<f64>,
}

impl Jacobian {
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        self.state.to_dense()
    }
}

pub fn jacobian(state: &State, p: &Parameters, grid: &RadialGrid) -> Jacobian {
    let last = grid.last();
    let d = grid.delta();
    let lambda = state.lambda;
    let f = fields(state, p, grid);
    let (rho, re) = (&state.rho_i, &state.r_e);
    let dim = State::dim(grid);
    let mut m = BandedMatrix::zeros(dim, BANDWIDTH, BANDWIDTH);
    let mut col = vec![0.0; dim];

    // adds c·∂E_node/∂V to row `row`
    let add_field = |m: &mut BandedMatrix, row: usize, node: usize, c: f64| {
        for (k, s) in d1_stencil(node, grid) {
            if k >= 1 && k < last && s != 0.0 {
                m.add(row, idx_v(k), c * s);
            }
        }
    };

    // ion rows
    for j in 1..=last {
        let row = idx_rho(j);
        let r2 = grid.r(j) * grid.r(j);
        let mut dlam = 0.0;
        for (node, sign) in [(j - 1, -1.0), (j, 1.0)] {
            let rm2 = grid.r(node) * grid.r(node);
            let flux_c = sign * p.k_i * rm2 / (r2 * d);
            let src_c = -p.k_e * 0.5 * rm2 / r2;
            if node >= 1 {
                m.add(row, idx_rho(node), flux_c * f.field[node]);
                m.add(row, idx_re(node), src_c * f.h[node] * f.decay[node]);
            }
            let de = flux_c * rho[node] + src_c * f.dh_abs[node] * f.decay[node] * re[node];
            add_field(&mut m, row, node, de);
            dlam += de * f.dhh[node] + src_c * f.h[node] * re[node] * f.decay[node] * (-0.5 * f.hh[node]);
        }
        col[row] = dlam;
    }

    let inv_d2 = 1.0 / (d * d);
    for j in 1..last {
        let r = grid.r(j);
        let d1r = 0.5 * (re[j + 1] - re[j - 1]) / d;
        let d2v = (state.v[j + 1] - 2.0 * state.v[j] + state.v[j - 1]) * inv_d2;
        let lap_v = d2v + 2.0 / r * f.dv[j];
        let coeff = 0.5 * lambda * f.dv[j] * f.dhh[j] - lap_v + 0.25 * lambda * lambda * f.dhh[j] * f.dhh[j] - f.h[j];

        // electron row
        let row = idx_re(j);
        let adv = 2.0 / r + f.dv[j];
        if j > 1 {
            m.add(row, idx_re(j - 1), -inv_d2 + 0.5 * adv / d);
        }
        m.add(row, idx_re(j), 2.0 * inv_d2 + coeff);
        m.add(row, idx_re(j + 1), -inv_d2 - 0.5 * adv / d);
        // V enters through V' (centered) and ΔV
        let c_dv = -d1r + re[j] * (0.5 * lambda * f.dhh[j] - 2.0 / r - f.dh_abs[j]);
        let c_d2v = -re[j];
        for (k, s1, s2) in [
            (j - 1, -0.5 / d, inv_d2),
            (j, 0.0, -2.0 * inv_d2),
            (j + 1, 0.5 / d, inv_d2),
        ] {
            if k >= 1 && k < last {
                m.add(row, idx_v(k), c_dv * s1 + c_d2v * s2);
            }
        }
        col[row] = re[j] * (0.5 * f.dv[j] * f.dhh[j] + 0.5 * lambda * f.dhh[j] * f.dhh[j] - f.dh_abs[j] * f.dhh[j]);

        // Poisson row
        let row = idx_v(j);
        for (k, c) in [
            (j - 1, inv_d2 - 1.0 / (r * d)),
            (j, -2.0 * inv_d2),
            (j + 1, inv_d2 + 1.0 / (r * d)),
        ] {
            if k >= 1 && k < last {
                m.add(row, idx_v(k), c);
            }
        }
        m.add(row, idx_rho(j), -1.0);
        m.add(row, idx_re(j), f.decay[j]);
        col[row] = -0.5 * f.hh[j] * f.decay[j] * re[j];
    }

    // cathode row
    let row = idx_re(last);
    let cs = cathode_stencil(d);
    let kappa = p.gamma * p.k_i / p.k_e * (0.5 * lambda).exp();
    m.add(row, idx_re(last - 2), cs[0]);
    m.add(row, idx_re(last - 1), cs[1]);
    m.add(row, idx_re(last), cs[2] + 0.5 * lambda * f.dhh[last] + f.dv[last]);
    m.add(row, idx_rho(last), -kappa * f.field[last]);
    add_field(&mut m, row, last, re[last] - kappa * rho[last]);
    col[row] = 0.5 * f.dhh[last] * re[last] - kappa * rho[last] * (0.5 * f.field[last] + f.dhh[last]);

    Jacobian {
        state: m,
        lambda_column: col,
    }
}

/// Smallest field `V' + λH'` over the nodes and whether it clears the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Admissibility {
    pub min_field: f64,
    pub ok: bool,
}

pub fn admissibility(state: &State, grid: &RadialGrid) -> Admissibility {
    admissibility_with_floor(state, grid, DEFAULT_FIELD_FLOOR)
}

pub fn admissibility_with_floor(state: &State, grid: &RadialGrid, floor: f64) -> Admissibility {
    let min_field = (0..grid.len())
        .map(|j| {
            let dv: f64 = d1_stencil(j, grid).iter().map(|&(m, c)| c * state.v[m]).sum();
            dv + state.lambda * harmonic_dh_unchecked(grid.r(j))
        })
        .fold(f64::INFINITY, f64::min);
    Admissibility {
        min_field,
        ok: min_field > floor,
    }
}

/// Max-norm gap between `ρ_i` and the integral representation
/// `(k_e/k_i) (r² E)⁻¹ ∫₁^r t² h(|E|) e^{-λH/2} R_e dt`.
pub fn ion_consistency(state: &State, p: &Parameters, grid: &RadialGrid) -> f64 {
    let f = fields(state, p, grid);
    let src: Vec<f64> = (0..grid.len())
        .map(|m| grid.r(m) * grid.r(m) * f.h[m] * f.decay[m] * state.r_e[m])
        .collect();
    let integral = cumulative_trapezoid(&src, grid);
    (1..grid.len())
        .map(|j| {
            let formula = p.k_e / p.k_i * integral[j] / (grid.r(j) * grid.r(j) * f.field[j]);
            (state.rho_i[j] - formula).abs()
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Densities {
    pub rho_e: GridFunction,
    pub sup_rho_i: f64,
    pub sup_rho_e: f64,
    /// Both densities strictly positive on every node of `(1, 2]`.
    pub positive: bool,
}

pub fn densities(state: &State, grid: &RadialGrid) -> Densities {
    let rho_e: Vec<f64> = grid
        .nodes()
        .iter()
        .zip(state.r_e.iter())
        .map(|(&r, &re)| re * (-0.5 * state.lambda * harmonic_h_unchecked(r)).exp())
        .collect();
    let sup = |v: &[f64]| v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let positive = (1..grid.len()).all(|j| state.rho_i[j] > 0.0 && rho_e[j] > 0.0);
    Densities {
        sup_rho_i: sup(&state.rho_i),
        sup_rho_e: sup(&rho_e),
        rho_e: GridFunction(rho_e),
        positive,
    }
}

/// Extra scalar equation closing the system when `λ` is an unknown.
pub trait ScalarConstraint {
    fn value(&self, state: &State, grid: &RadialGrid) -> f64;
    /// Gradient with respect to the unknowns (state order) and to `λ`.
    fn gradient(&self, state: &State, grid: &RadialGrid) -> (Vec<f64>, f64);
}

#[derive(Clone, Copy)]
pub enum NewtonMode<'a> {
    FixedLambda,
    Extended(&'a dyn ScalarConstraint),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub field_floor: f64,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_NEWTON_TOL,
            max_iter: 30,
            field_floor: DEFAULT_FIELD_FLOOR,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NewtonOutcome {
    pub state: State,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual norm before each iteration and at the end.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NewtonFailureKind {
    MaxIterExceeded,
    LineSearchStall,
    SingularJacobian,
}

#[derive(Clone, Debug)]
pub struct NewtonFailure {
    pub kind: NewtonFailureKind,
    pub last_iterate: State,
    pub residual_norm: f64,
    pub iterations: usize,
}

impl fmt::Display for NewtonFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Newton failed ({:?}) after {} iterations, residual {:e}, λ = {}",
            self.kind, self.iterations, self.residual_norm, self.last_iterate.lambda
        )
    }
}

fn extended_norm(state: &State, p: &Parameters, grid: &RadialGrid, mode: NewtonMode) -> (Residual, f64, f64) {
    let res = residual(state, p, grid);
    let y = res.y_norm(grid);
    match mode {
        NewtonMode::FixedLambda => (res, y, 0.0),
        NewtonMode::Extended(c) => {
            let cv = c.value(state, grid);
            (res, (y * y + cv * cv).sqrt(), cv)
        }
    }
}

/// Damped Newton iteration with Armijo backtracking on the residual norm.
pub fn newton_solve(
    guess: &State,
    mode: NewtonMode,
    p: &Parameters,
    grid: &RadialGrid,
    opts: &NewtonOptions,
) -> Result<NewtonOutcome> {
    guess.check(grid)?;
    let adm = admissibility_with_floor(guess, grid, opts.field_floor);
    if !adm.ok {
        return Err(Error::Admissibility {
            min_field: adm.min_field,
            floor: opts.field_floor,
        });
    }
    let mut state = guess.clone();
    let (mut res, mut norm, mut cval) = extended_norm(&state, p, grid, mode);
    let mut history = vec![norm];
    let fail = |kind, state: State, norm, it| {
        Error::Newton(Box::new(NewtonFailure {
            kind,
            last_iterate: state,
            residual_norm: norm,
            iterations: it,
        }))
    };
    for it in 0..=opts.max_iter {
        if norm <= opts.tol {
            return Ok(NewtonOutcome {
                state,
                iterations: it,
                residual_norm: norm,
                history,
            });
        }
        if it == opts.max_iter || !norm.is_finite() {
            break;
        }
        let jac = jacobian(&state, p, grid);
        let mut rhs: Vec<f64> = res.to_vec().into_iter().map(|v| -v).collect();
        let step = match mode {
            NewtonMode::FixedLambda => match jac.state.factor("Newton") {
                Ok(lu) => {
                    let mut s = lu.solve(&rhs);
                    s.push(0.0);
                    s
                }
                Err(_) => return Err(fail(NewtonFailureKind::SingularJacobian, state, norm, it)),
            },
            NewtonMode::Extended(c) => {
                let (row, corner) = c.gradient(&state, grid);
                rhs.push(-cval);
                let bm = BorderedMatrix {
                    a: jac.state,
                    column: jac.lambda_column,
                    row,
                    corner,
                };
                match bm.factor("extended Newton") {
                    Ok(lu) => lu.solve(&rhs),
                    Err(_) => return Err(fail(NewtonFailureKind::SingularJacobian, state, norm, it)),
                }
            }
        };
        let x0 = state.to_unknowns();
        let dim = x0.len();
        let mut t = 1.0;
        loop {
            let x: Vec<f64> = x0.iter().zip(&step).map(|(x, s)| x + t * s).collect();
            let trial = State::from_unknowns(state.lambda + t * step[dim], &x, grid);
            let (r_t, n_t, c_t) = extended_norm(&trial, p, grid, mode);
            if n_t.is_finite() && n_t <= (1.0 - ARMIJO_C * t) * norm {
                state = trial;
                res = r_t;
                norm = n_t;
                cval = c_t;
                break;
            }
            t *= 0.5;
            if t < MIN_DAMPING {
                return Err(fail(NewtonFailureKind::LineSearchStall, state, norm, it + 1));
            }
        }
        history.push(norm);
    }
    let iterations = history.len() - 1;
    Err(fail(NewtonFailureKind::MaxIterExceeded, state, norm, iterations))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::validation::fd_jacobian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn params() -> Parameters {
        Parameters::with_unit_mobilities(2.0, 3.0, 1.0).unwrap()
    }

    pub(crate) fn smooth_state(lambda: f64, grid: &RadialGrid, seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c: Vec<f64> = (0..6).map(|_| rng.gen_range(0.2..1.0)).collect();
        let mut s = State::trivial(lambda, grid);
        for (j, &r) in grid.nodes().iter().enumerate() {
            let x = r - 1.0;
            s.rho_i[j] = c[0] * x * (1.0 + c[1] * r);
            s.r_e[j] = c[2] * x * (2.0 - c[3] * x);
            s.v[j] = 0.1 * c[4] * x * (1.0 - x) * (1.0 + c[5] * r);
        }
        if lambda > 0.0 {
            s.v[grid.last()] = 0.0;
        }
        s
    }

    #[test]
    fn trivial_state_residual_vanishes() {
        let g = RadialGrid::new(129).unwrap();
        let p = params();
        let res = residual(&State::trivial(7.3, &g), &p, &g);
        assert_eq!(res.max_abs(), 0.0);
    }

    #[test]
    fn unknown_roundtrip() {
        let g = RadialGrid::new(33).unwrap();
        let s = smooth_state(3.0, &g, 1);
        let x = s.to_unknowns();
        assert_eq!(x.len(), State::dim(&g));
        assert_eq!(State::from_unknowns(3.0, &x, &g), s);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let g = RadialGrid::new(65).unwrap();
        let p = params();
        for seed in 0..3 {
            let s = smooth_state(2.0 + seed as f64, &g, seed);
            let jac = jacobian(&s, &p, &g);
            let fd = fd_jacobian(&s, &p, &g, 1e-6);
            let dense = jac.to_dense();
            let dim = State::dim(&g);
            let mut scale = 0.0f64;
            let mut gap = 0.0f64;
            for i in 0..dim {
                for k in 0..dim {
                    scale = scale.max(dense[(i, k)].abs());
                    gap = gap.max((dense[(i, k)] - fd[(i, k)]).abs());
                }
                scale = scale.max(jac.lambda_column[i].abs());
                gap = gap.max((jac.lambda_column[i] - fd[(i, dim)]).abs());
            }
            assert!(gap <= 1e-6 * scale, "seed {seed}: gap {gap:e} scale {scale:e}");
        }
    }

    #[test]
    fn admissibility_examples() {
        let g = RadialGrid::new(65).unwrap();
        let a = admissibility(&State::trivial(1.0, &g), &g);
        assert!((a.min_field - 0.5).abs() < 1e-15 && a.ok);
        let a = admissibility(&State::trivial(1e-8, &g), &g);
        assert!((a.min_field - 5e-9).abs() < 1e-20 && !a.ok);
    }

    #[test]
    fn densities_examples() {
        let g = RadialGrid::new(65).unwrap();
        let d = densities(&State::trivial(2.0, &g), &g);
        assert_eq!((d.sup_rho_i, d.sup_rho_e, d.positive), (0.0, 0.0, false));
        let mut s = State::trivial(0.0, &g);
        s.r_e = GridFunction::from_fn(&g, harmonic_h_unchecked);
        let d = densities(&s, &g);
        assert_eq!(d.sup_rho_e, 1.0);
        assert_eq!(d.rho_e, s.r_e);
    }

    #[test]
    fn ion_consistency_detects_corruption() {
        let g = RadialGrid::new(65).unwrap();
        let p = params();
        assert_eq!(ion_consistency(&State::trivial(3.0, &g), &p, &g), 0.0);
        // build ρ_i from the integral formula, then corrupt it
        let mut s = smooth_state(3.0, &g, 4);
        let f = fields(&s, &p, &g);
        let src: Vec<f64> = (0..g.len())
            .map(|m| g.r(m) * g.r(m) * f.h[m] * f.decay[m] * s.r_e[m])
            .collect();
        let integral = cumulative_trapezoid(&src, &g);
        for j in 0..g.len() {
            s.rho_i[j] = integral[j] / (g.r(j) * g.r(j) * f.field[j]);
        }
        assert!(ion_consistency(&s, &p, &g) < 1e-14);
        assert!(max_abs(&residual(&s, &p, &g).f1) < 1e-12);
        let sup = max_abs(&s.rho_i);
        s.rho_i.iter_mut().for_each(|v| *v *= 1.1);
        let gap = ion_consistency(&s, &p, &g);
        assert!((gap - 0.1 * sup).abs() < 1e-12, "{gap} vs {}", 0.1 * sup);
    }

    #[test]
    fn newton_from_trivial_guess() {
        let g = RadialGrid::new(65).unwrap();
        let p = params();
        let out = newton_solve(
            &State::trivial(2.0, &g),
            NewtonMode::FixedLambda,
            &p,
            &g,
            &NewtonOptions::default(),
        )
        .unwrap();
        assert_eq!(out.iterations, 0);
        let bad = State::trivial(1e-9, &g);
        assert!(matches!(
            newton_solve(&bad, NewtonMode::FixedLambda, &p, &g, &NewtonOptions::default()),
            Err(Error::Admissibility { .. })
        ));
    }
}
