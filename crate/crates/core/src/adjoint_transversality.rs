//! Nullspace of the linearization at the sparking voltage, the adjoint
//! problem normalized by `ψ_e(2) = 1`, and the transversality functional.
//!
//! The linearization at the trivial state is the steady Jacobian evaluated
//! at `(λ, 0, 0, 0)`:
//!
//! ```text
//! 𝓛₁ = 2(k_i/r²) λ S_i' - k_e h(λH') e^{-λH/2} S_e
//! 𝓛₂ = -(1/r²)(r² S_e')' - g(λH') S_e
//! 𝓛₃ = (1/r²)(r² W')' - S_i + e^{-λH/2} S_e
//! 𝓛₄ = S_e'(2) + (λ/4) S_e(2) - γ (k_i/k_e) e^{λ/2} (λ/2) S_i(2)
//! ```
//!
//! and its formal adjoint under `∫ r² · dr` plus the cathode scalar is
//!
//! ```text
//! 𝓛₁* = -2 k_i λ r⁻² ψ_i' - ψ_v
//! 𝓛₂* = -(1/r²)(r² ψ_e')' - g ψ_e - k_e h e^{-λH/2} ψ_i + e^{-λH/2} ψ_v
//! 𝓛₃* = (1/r²)(r² ψ_v')'
//! ```
//!
//! on `ψ_e(1) = 0`, `ψ_e'(2) = -(λ/4) ψ_e(2)`, `ψ_b = 4 ψ_e(2)`,
//! `ψ_v(1) = ψ_v(2) = 0`, `ψ_i(2) = γ e^{λ/2} ψ_b / (4 k_e)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::discretization::{
    boundary_derivative, cumulative_trapezoid, derivative, trapezoid, GridFunction, RadialGrid, Side,
};
use crate::electron_system::{electron_matrix, Normalization};
use crate::error::{Error, Result};
use crate::linalg::BandedMatrix;
use crate::model::{g_fn, h_prime_unchecked, harmonic_dh_unchecked, harmonic_h_unchecked, townsend_h, Parameters};
use crate::steady_state::{jacobian, Jacobian, Residual, State};

/// Largest grid for which the dense singular value probe is allowed.
pub const MAX_DENSE_NODES: usize = 257;

/// Solution of the adjoint boundary value problem normalized by `w(2) = 1`.
#[derive(Clone, Debug)]
pub struct AdjointSolution {
    pub lambda: f64,
    pub w: GridFunction,
}

/// `γ e^{λ/2} h(λH') e^{-λH/2}`, combined into one exponent.
fn adjoint_forcing(lambda: f64, p: &Parameters, r: f64) -> f64 {
    p.gamma * townsend_h(2.0 * lambda / (r * r), p) * (0.5 * lambda * (1.0 - harmonic_h_unchecked(r))).exp()
}

/// Solves `-(1/r²)(r² w')' - g w = γ e^{λ/2} h e^{-λH/2}` with `w(1) = 0`
/// and `w'(2) = -λ/4`.
pub fn solve_adjoint_w(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Result<AdjointSolution> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "voltage must be positive, got {lambda}"
        )));
    }
    let last = grid.last();
    let m = electron_matrix(lambda, p, grid, Normalization::CathodeSlope)?;
    let lu = m.factor("adjoint system")?;
    let mut rhs: Vec<f64> = (1..=last).map(|j| adjoint_forcing(lambda, p, grid.r(j))).collect();
    rhs[last - 1] = -0.25 * lambda;
    let mut w = vec![0.0];
    w.extend(lu.solve(&rhs));
    Ok(AdjointSolution {
        lambda,
        w: GridFunction(w),
    })
}

/// Discrete nullspace basis `(φ_i, φ_e, φ_v)` of the linearization.
#[derive(Clone, Debug)]
pub struct NullTriple {
    pub lambda: f64,
    pub phi_i: GridFunction,
    pub phi_e: GridFunction,
    pub phi_v: GridFunction,
}

impl NullTriple {
    /// The state `(λ, s φ_i, s φ_e, s φ_v)`.
    pub fn scaled_state(&self, s: f64) -> State {
        State {
            lambda: self.lambda,
            rho_i: self.phi_i.scaled(s),
            r_e: self.phi_e.scaled(s),
            v: self.phi_v.scaled(s),
        }
    }

    pub fn norm(&self, grid: &RadialGrid) -> f64 {
        self.scaled_state(1.0).profile_norm(grid)
    }
}

/// Solves `(1/r²)(r² W')' = f` with `W(1) = W(2) = 0`.
pub fn solve_poisson(f: &[f64], grid: &RadialGrid) -> Result<GridFunction> {
    grid.check(f)?;
    let last = grid.last();
    let d = grid.delta();
    let inv_d2 = 1.0 / (d * d);
    let mut m = BandedMatrix::zeros(last - 1, 1, 1);
    for j in 1..last {
        let k = j - 1;
        let adv = 1.0 / (grid.r(j) * d);
        if j > 1 {
            m.add(k, k - 1, inv_d2 - adv);
        }
        m.add(k, k, -2.0 * inv_d2);
        if j + 1 < last {
            m.add(k, k + 1, inv_d2 + adv);
        }
    }
    let lu = m.factor("Poisson")?;
    let mut w = vec![0.0];
    w.extend(lu.solve(&f[1..last]));
    w.push(0.0);
    Ok(GridFunction(w))
}

/// Builds the triple from an electron profile: `φ_e = u`,
/// `φ_i = (k_e/(2 k_i λ)) ∫₁^r t² h(2λ/t²) e^{-λH/2} φ_e dt` and `φ_v` from
/// the Poisson row.
pub fn nullspace_triple(lambda: f64, u: &[f64], p: &Parameters, grid: &RadialGrid) -> Result<NullTriple> {
    grid.check(u)?;
    let decay: Vec<f64> = grid
        .nodes()
        .iter()
        .map(|&r| (-0.5 * lambda * harmonic_h_unchecked(r)).exp())
        .collect();
    let integrand: Vec<f64> = grid
        .nodes()
        .iter()
        .enumerate()
        .map(|(j, &r)| r * r * townsend_h(2.0 * lambda / (r * r), p) * decay[j] * u[j])
        .collect();
    let scale = p.k_e / (2.0 * p.k_i * lambda);
    let phi_i: Vec<f64> = cumulative_trapezoid(&integrand, grid)
        .into_iter()
        .map(|v| scale * v)
        .collect();
    let rhs: Vec<f64> = (0..grid.len()).map(|j| phi_i[j] - decay[j] * u[j]).collect();
    let phi_v = solve_poisson(&rhs, grid)?;
    Ok(NullTriple {
        lambda,
        phi_i: GridFunction(phi_i),
        phi_e: GridFunction(u.to_vec()),
        phi_v,
    })
}

/// The discrete linearization at the trivial state.
pub fn linearized_operator(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Jacobian {
    jacobian(&State::trivial(lambda, grid), p, grid)
}

/// `𝓛 · (S_i, S_e, W)` as residual rows.
pub fn apply_linearized(lambda: f64, s: &State, p: &Parameters, grid: &RadialGrid) -> Residual {
    let op = linearized_operator(lambda, p, grid);
    Residual::from_rows(&op.state.mul_vec(&s.to_unknowns()), grid)
}

/// Transversality functional with `w(2) = 1`:
///
/// ```text
/// F = -γ e^{λ/2} ∫ r² {h'(λH')H' - h(λH')H/2} e^{-λH/2} u dr
///     - ∫ r² w g'(λH') H' u dr + u(2) - 2u'(2) - (λ/2)u(2)
/// ```
pub fn transversality_f(lambda: f64, u: &[f64], w: &AdjointSolution, p: &Parameters, grid: &RadialGrid) -> f64 {
    let last = grid.last();
    let mut t1 = Vec::with_capacity(grid.len());
    let mut t2 = Vec::with_capacity(grid.len());
    for (j, &r) in grid.nodes().iter().enumerate() {
        let dh = harmonic_dh_unchecked(r);
        let hh = harmonic_h_unchecked(r);
        let ell = lambda * dh;
        let h = townsend_h(ell, p);
        let hp = h_prime_unchecked(ell, p);
        // e^{λ/2} e^{-λH/2} combined
        let growth = (0.5 * lambda * (1.0 - hh)).exp();
        t1.push(r * r * (hp * dh - 0.5 * h * hh) * growth * u[j]);
        t2.push(r * r * w.w[j] * (hp - 0.5 * ell) * dh * u[j]);
    }
    let slope = boundary_derivative(u, grid, Side::Cathode);
    -p.gamma * trapezoid(&t1, grid) - trapezoid(&t2, grid) + u[last] - 2.0 * slope - 0.5 * lambda * u[last]
}

/// Evaluates `⟨f_i, ψ_i⟩ + ⟨f_e, ψ_e⟩ + ψ_b f_b` for the `λ`-derivative
/// `(f_i, f_e, f_v, f_b)` of the linearization applied to the triple and the
/// adjoint null vector `ψ_i = (γ/k_e) e^{λ/2}`, `ψ_e = w`, `ψ_v = 0`,
/// `ψ_b = 4`.
pub fn transversality_crosscheck(
    lambda: f64,
    triple: &NullTriple,
    w: &AdjointSolution,
    p: &Parameters,
    grid: &RadialGrid,
) -> f64 {
    let last = grid.last();
    let growth_half = (0.5 * lambda).exp();
    let psi_i = p.gamma / p.k_e * growth_half;
    let phi_e = &triple.phi_e;
    // ∫ r² 2(k_i/r²) φ_i' dr telescopes to 2 k_i φ_i(2)
    let ion_flux = 2.0 * p.k_i * (triple.phi_i[last] - triple.phi_i[0]);
    let mut ion_src = Vec::with_capacity(grid.len());
    let mut fe = Vec::with_capacity(grid.len());
    for (j, &r) in grid.nodes().iter().enumerate() {
        let dh = harmonic_dh_unchecked(r);
        let hh = harmonic_h_unchecked(r);
        let ell = lambda * dh;
        let h = townsend_h(ell, p);
        let hp = h_prime_unchecked(ell, p);
        let decay = (-0.5 * lambda * hh).exp();
        ion_src.push(r * r * p.k_e * (hp * dh - 0.5 * h * hh) * decay * phi_e[j]);
        fe.push(-r * r * (hp - 0.5 * ell) * dh * phi_e[j] * w.w[j]);
    }
    let fi = ion_flux - trapezoid(&ion_src, grid);
    let fb = 0.25 * phi_e[last] - p.gamma * p.k_i / p.k_e * growth_half * (0.25 * lambda + 0.5) * triple.phi_i[last];
    psi_i * fi + trapezoid(&fe, grid) + 4.0 * fb
}

/// An element `(ψ_i, ψ_e, ψ_v, ψ_b)` of the adjoint space.
#[derive(Clone, Debug)]
pub struct AdjointTuple {
    pub psi_i: GridFunction,
    pub psi_e: GridFunction,
    pub psi_v: GridFunction,
    pub psi_b: f64,
}

impl AdjointTuple {
    /// The adjoint null vector built from the normalized `w`.
    pub fn null_vector(w: &AdjointSolution, p: &Parameters, grid: &RadialGrid) -> Self {
        let psi_i = p.gamma / p.k_e * (0.5 * w.lambda).exp();
        Self {
            psi_i: GridFunction(vec![psi_i; grid.len()]),
            psi_e: w.w.clone(),
            psi_v: GridFunction::zeros(grid),
            psi_b: 4.0,
        }
    }
}

/// `(1/r²)(r² u')'` at every node with one-sided second-order stencils at
/// the ends.
fn laplacian_full(u: &[f64], grid: &RadialGrid) -> Vec<f64> {
    let n = u.len();
    let d = grid.delta();
    let inv_d2 = 1.0 / (d * d);
    let du = derivative(u, grid);
    let mut out = vec![0.0; n];
    for j in 0..n {
        let d2 = if j == 0 {
            (2.0 * u[0] - 5.0 * u[1] + 4.0 * u[2] - u[3]) * inv_d2
        } else if j == n - 1 {
            (2.0 * u[j] - 5.0 * u[j - 1] + 4.0 * u[j - 2] - u[j - 3]) * inv_d2
        } else {
            (u[j + 1] - 2.0 * u[j] + u[j - 1]) * inv_d2
        };
        out[j] = d2 + 2.0 / grid.r(j) * du[j];
    }
    out
}

/// `𝓛* Ψ` on the full grid, component by component.
pub fn apply_adjoint(lambda: f64, psi: &AdjointTuple, p: &Parameters, grid: &RadialGrid) -> [Vec<f64>; 3] {
    let n = grid.len();
    let dpsi_i = derivative(&psi.psi_i, grid);
    let lap_e = laplacian_full(&psi.psi_e, grid);
    let lap_v = laplacian_full(&psi.psi_v, grid);
    let mut a1 = vec![0.0; n];
    let mut a2 = vec![0.0; n];
    for (j, &r) in grid.nodes().iter().enumerate() {
        let ell = lambda * harmonic_dh_unchecked(r);
        let decay = (-0.5 * lambda * harmonic_h_unchecked(r)).exp();
        a1[j] = -2.0 * p.k_i * lambda / (r * r) * dpsi_i[j] - psi.psi_v[j];
        a2[j] = -lap_e[j] - g_fn(ell, p) * psi.psi_e[j] - p.k_e * townsend_h(ell, p) * decay * psi.psi_i[j]
            + decay * psi.psi_v[j];
    }
    [a1, a2, lap_v]
}

/// Discrete pairing `⟨f, Ψ⟩`. Ion rows live on cells `[r_{j-1}, r_j]` and are
/// paired with the cell average of `ψ_i`. Electron rows exist at interior
/// nodes only, so their weighted product is the trapezoid rule with the
/// cathode value of the integrand extrapolated linearly; dropping that half
/// cell would cost a full order. Poisson rows use the plain trapezoid rule
/// since `ψ_v(2) = 0`. The cathode scalar is multiplied by `ψ_b`.
pub fn adjoint_pairing(res: &Residual, psi: &AdjointTuple, grid: &RadialGrid) -> f64 {
    let d = grid.delta();
    let last = grid.last();
    let mut s = 0.0;
    for j in 1..=last {
        let r2 = grid.r(j) * grid.r(j);
        s += d * r2 * res.f1[j] * 0.5 * (psi.psi_i[j - 1] + psi.psi_i[j]);
    }
    for j in 1..last {
        let weight = match last - j {
            1 => 2.0 * d,
            2 => 0.5 * d,
            _ => d,
        };
        let r2 = grid.r(j) * grid.r(j);
        s += r2 * (weight * res.f2[j] * psi.psi_e[j] + d * res.f3[j] * psi.psi_v[j]);
    }
    s + psi.psi_b * res.f4
}

/// `⟨𝒰, 𝓛*Ψ⟩` with the weighted trapezoid product.
pub fn state_pairing(s: &State, adj: &[Vec<f64>; 3], grid: &RadialGrid) -> f64 {
    (0..grid.len())
        .map(|j| {
            let wr2 = grid.weights()[j] * grid.r(j) * grid.r(j);
            wr2 * (s.rho_i[j] * adj[0][j] + s.r_e[j] * adj[1][j] + s.v[j] * adj[2][j])
        })
        .sum()
}

/// Random smooth `(S_i, S_e, W)` with `S_i(1) = S_e(1) = W(1) = W(2) = 0`.
pub fn random_domain_state(lambda: f64, grid: &RadialGrid, rng: &mut impl Rng) -> State {
    use std::f64::consts::PI;
    let c: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut s = State::trivial(lambda, grid);
    for (j, &r) in grid.nodes().iter().enumerate() {
        let x = r - 1.0;
        s.rho_i[j] = c[0] * x + c[1] * (0.5 * PI * x).sin() + c[2] * x * x;
        s.r_e[j] = c[3] * (0.5 * PI * x).sin() + c[4] * x * x + c[5] * (PI * x).sin();
        s.v[j] = c[6] * (PI * x).sin() + c[7] * (2.0 * PI * x).sin() + c[8] * x * (1.0 - x);
    }
    s.v[grid.last()] = 0.0;
    s
}

/// Random smooth `Ψ` satisfying the adjoint boundary conditions.
pub fn random_adjoint_tuple(lambda: f64, p: &Parameters, grid: &RadialGrid, rng: &mut impl Rng) -> AdjointTuple {
    use std::f64::consts::PI;
    let c: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    // f(1) = 0; the cubic bump (r-1)²(r-2) has slope 1 and value 0 at r = 2
    let f = |x: f64| c[0] * x + c[1] * (0.5 * PI * x).sin() + c[2] * x * x;
    let df2 = c[0] + 2.0 * c[2];
    let f2 = f(1.0);
    let mismatch = df2 + 0.25 * lambda * f2;
    let psi_b = 4.0 * f2;
    let end_i = p.gamma * (0.5 * lambda).exp() * psi_b / (4.0 * p.k_e);
    let psi_e = GridFunction::from_fn(grid, |r| {
        let x = r - 1.0;
        f(x) - mismatch * x * x * (r - 2.0)
    });
    let psi_i = GridFunction::from_fn(grid, |r| end_i + c[3] * (r - 2.0) + c[4] * (r - 2.0) * (r - 2.0) * r);
    let psi_v = GridFunction::from_fn(grid, |r| {
        let x = r - 1.0;
        c[5] * (PI * x).sin() + c[6] * x * (1.0 - x) + c[7] * (2.0 * PI * x).sin()
    });
    let mut psi_v = psi_v;
    psi_v[grid.last()] = 0.0;
    AdjointTuple {
        psi_i,
        psi_e,
        psi_v,
        psi_b,
    }
}

/// `|⟨𝓛𝒰, Ψ⟩ - ⟨𝒰, 𝓛*Ψ⟩|` for one random pair drawn from `seed`.
pub fn adjoint_identity_check(lambda: f64, p: &Parameters, grid: &RadialGrid, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = random_domain_state(lambda, grid, &mut rng);
    let psi = random_adjoint_tuple(lambda, p, grid, &mut rng);
    adjoint_discrepancy(lambda, &s, &psi, p, grid)
}

pub fn adjoint_discrepancy(lambda: f64, s: &State, psi: &AdjointTuple, p: &Parameters, grid: &RadialGrid) -> f64 {
    let lhs = adjoint_pairing(&apply_linearized(lambda, s, p, grid), psi, grid);
    let rhs = state_pairing(s, &apply_adjoint(lambda, psi, p, grid), grid);
    (lhs - rhs).abs()
}

/// The two smallest singular values of the dense linearization.
pub fn smallest_singular_values(lambda: f64, p: &Parameters, grid: &RadialGrid) -> Result<(f64, f64)> {
    if grid.len() > MAX_DENSE_NODES {
        return Err(Error::InvalidGrid(format!(
            "dense singular value probe limited to {MAX_DENSE_NODES} nodes, got {}",
            grid.len()
        )));
    }
    let dense = linearized_operator(lambda, p, grid).to_dense();
    let svd = dense.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("right singular vectors were requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&i, &j| svd.singular_values[i].total_cmp(&svd.singular_values[j]));
    // the decomposition flushes tiny singular values to zero; ‖A v‖ does not
    let sigma = |k: usize| (&dense * v_t.row(order[k]).transpose()).norm();
    Ok((sigma(0), sigma(1)))
}
