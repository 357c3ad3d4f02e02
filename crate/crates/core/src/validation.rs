//! Independent oracles: adaptive Runge–Kutta shooting for the linear
//! boundary value problems, central-difference Jacobians and grid
//! refinement (Richardson) studies.

use nalgebra::DMatrix;

use crate::discretization::{GridFunction, RadialGrid};
use crate::error::{Error, Result};
use crate::model::{g_fn, harmonic_h_unchecked, townsend_h, Parameters};
use crate::steady_state::{residual, State};

/// Per-step tolerance of the embedded error estimate.
pub const SHOOTING_TOL: f64 = 1e-11;

/// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [
        19372.0 / 6561.0,
        -25360.0 / 2187.0,
        64448.0 / 6561.0,
        -212.0 / 729.0,
        0.0,
        0.0,
    ],
    [
        9017.0 / 3168.0,
        -355.0 / 33.0,
        46732.0 / 5247.0,
        49.0 / 176.0,
        -5103.0 / 18656.0,
        0.0,
    ],
    [
        35.0 / 384.0,
        0.0,
        500.0 / 1113.0,
        125.0 / 192.0,
        -2187.0 / 6784.0,
        11.0 / 84.0,
    ],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

type Rhs<'a> = &'a dyn Fn(f64, [f64; 2]) -> [f64; 2];

/// Integrates `y' = f(r, y)` from node to node, landing exactly on every
/// grid node. Returns `(y, y')` samples.
fn integrate(f: Rhs, y0: [f64; 2], grid: &RadialGrid, tol: f64) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(grid.len());
    out.push(y0);
    let mut y = y0;
    let mut h = grid.delta();
    for pair in grid.nodes().windows(2) {
        let (mut r, end) = (pair[0], pair[1]);
        while r < end {
            let last = h >= end - r;
            let step = if last { end - r } else { h };
            let mut k = [[0.0; 2]; 7];
            for s in 0..7 {
                let mut ys = y;
                for (m, km) in k.iter().enumerate().take(s) {
                    ys[0] += step * A[s][m] * km[0];
                    ys[1] += step * A[s][m] * km[1];
                }
                k[s] = f(r + C[s] * step, ys);
            }
            let mut y5 = y;
            let mut err = 0.0f64;
            for i in 0..2 {
                let (mut s5, mut s4) = (0.0, 0.0);
                for s in 0..7 {
                    s5 += B5[s] * k[s][i];
                    s4 += B4[s] * k[s][i];
                }
                y5[i] += step * s5;
                let scale = tol * (1.0 + y[i].abs().max(y5[i].abs()));
                err = err.max((step * (s5 - s4)).abs() / scale);
            }
            if err <= 1.0 {
                r = if last { end } else { r + step };
                y = y5;
            }
            let factor = if err == 0.0 {
                5.0
            } else {
                (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
            };
            h = step * factor;
            if h < 1e-14 {
                return Err(Error::StepUnderflow { r });
            }
        }
        out.push(y);
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ShootingResult {
    pub u_samples: GridFunction,
    /// `|u'(2) - 1|` after rescaling.
    pub match_norm: f64,
}

/// Shoots `u'' + (2/r)u' + q(r) u = 0` from `u(1) = 0`, `u'(1) = slope` and
/// rescales to `u'(2) = 1`.
pub fn shoot_homogeneous(q: &dyn Fn(f64) -> f64, grid: &RadialGrid, slope: f64) -> Result<ShootingResult> {
    let f = |r: f64, y: [f64; 2]| [y[1], -2.0 / r * y[1] - q(r) * y[0]];
    let ys = integrate(&f, [0.0, slope], grid, SHOOTING_TOL)?;
    let end = ys[grid.last()][1];
    let u: Vec<f64> = ys.iter().map(|y| y[0] / end).collect();
    Ok(ShootingResult {
        u_samples: GridFunction(u),
        match_norm: (ys[grid.last()][1] / end - 1.0).abs(),
    })
}

/// Shooting oracle for the electron problem with `u'(2) = 1`.
pub fn shoot_electron(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Result<ShootingResult> {
    let q = |r: f64| g_fn(2.0 * lambda / (r * r), p);
    shoot_homogeneous(&q, grid, 1.0)
}

/// Shooting oracle for the adjoint problem
/// `-(1/r²)(r² w')' - g w - γ e^{λ/2} h e^{-λH/2} = 0`, `w(1) = 0`,
/// `w'(2) = -λ/4`, by superposing a particular and a homogeneous solution.
pub fn shoot_adjoint(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Result<GridFunction> {
    let q = |r: f64| g_fn(2.0 * lambda / (r * r), p);
    let forcing = |r: f64| {
        p.gamma * townsend_h(2.0 * lambda / (r * r), p) * (0.5 * lambda - 0.5 * lambda * harmonic_h_unchecked(r)).exp()
    };
    let fp = |r: f64, y: [f64; 2]| [y[1], -2.0 / r * y[1] - q(r) * y[0] - forcing(r)];
    let fh = |r: f64, y: [f64; 2]| [y[1], -2.0 / r * y[1] - q(r) * y[0]];
    let yp = integrate(&fp, [0.0, 0.0], grid, SHOOTING_TOL)?;
    let yh = integrate(&fh, [0.0, 1.0], grid, SHOOTING_TOL)?;
    let last = grid.last();
    let c = (-0.25 * lambda - yp[last][1]) / yh[last][1];
    Ok(GridFunction(yp.iter().zip(&yh).map(|(a, b)| a[0] + c * b[0]).collect()))
}

/// Central-difference Jacobian of the steady residual. Columns follow the
/// unknown order; the last column is `∂F/∂λ`.
pub fn fd_jacobian(state: &State, p: &Parameters, grid: &RadialGrid, eps: f64) -> DMatrix<f64> {
    let x0 = state.to_unknowns();
    let dim = x0.len();
    let mut jac = DMatrix::zeros(dim, dim + 1);
    let eval = |x: &[f64], lambda: f64| residual(&State::from_unknowns(lambda, x, grid), p, grid).to_vec();
    for k in 0..=dim {
        let (plus, minus, step) = if k < dim {
            let step = eps * x0[k].abs().max(1.0);
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[k] += step;
            xm[k] -= step;
            (eval(&xp, state.lambda), eval(&xm, state.lambda), step)
        } else {
            let step = eps * state.lambda.abs().max(1.0);
            (eval(&x0, state.lambda + step), eval(&x0, state.lambda - step), step)
        };
        for i in 0..dim {
            jac[(i, k)] = (plus[i] - minus[i]) / (2.0 * step);
        }
    }
    jac
}

/// Errors on successively doubled grids and the observed orders
/// `log₂(e_k / e_{k+1})`.
#[derive(Clone, Debug)]
pub struct RichardsonStudy {
    pub nodes: Vec<usize>,
    pub errors: Vec<f64>,
    pub orders: Vec<f64>,
}

impl RichardsonStudy {
    pub fn min_order(&self) -> f64 {
        self.orders.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Runs `study` (returning an error measure) on each grid size and fits the
/// convergence order between consecutive doublings.
pub fn richardson<F>(study: F, nodes: &[usize]) -> Result<RichardsonStudy>
where
    F: Fn(&RadialGrid) -> Result<f64>,
{
    let errors = nodes
        .iter()
        .map(|&n| RadialGrid::new(n).and_then(|g| study(&g)))
        .collect::<Result<Vec<f64>>>()?;
    let orders = errors.windows(2).map(|e| (e[0] / e[1]).abs().log2()).collect();
    Ok(RichardsonStudy {
        nodes: nodes.to_vec(),
        errors,
        orders,
    })
}

/// Self-convergence order of a scalar quantity computed on three doubled
/// grids, `log₂ |q₁ - q₂| / |q₂ - q₃|`, with the extrapolated limit.
pub fn richardson_self(q: [f64; 3]) -> (f64, f64) {
    let order = ((q[0] - q[1]) / (q[1] - q[2])).abs().log2();
    let factor = 2f64.powf(order);
    let limit = q[2] + (q[2] - q[1]) / (factor - 1.0);
    (order, limit)
}
