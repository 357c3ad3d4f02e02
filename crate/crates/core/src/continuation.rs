//! Pseudo-arclength continuation of the nontrivial branch leaving the trivial
//! solution at the sparking voltage.
//!
//! The extended unknown is `x = (y, λ)` with `y` in unknown order. Tangents
//! and arclength increments use the weighted product
//! `⟨a, b⟩ = Σ_j w_j r_j² a_j b_j + a_λ b_λ` with trapezoid weights `w_j`.

use std::fmt;

use log::{debug, warn};

use crate::adjoint_transversality::{nullspace_triple, NullTriple};
use crate::discretization::RadialGrid;
use crate::electron_system::{sparking_voltage, DEFAULT_LAMBDA_MAX, DEFAULT_ROOT_TOL};
use crate::error::{Error, Result};
use crate::linalg::BorderedMatrix;
use crate::model::{high_voltage_condition, Parameters};
use crate::steady_state::{
    admissibility, densities, jacobian, newton_solve, residual, NewtonMode, NewtonOptions, ScalarConstraint, State,
    DEFAULT_FIELD_FLOOR, DEFAULT_NEWTON_TOL,
};

/// Bordered-Jacobian singular value below which a possible secondary
/// bifurcation is logged.
pub const CROSSING_WARNING: f64 = 1e-4;
/// Newton iteration count at or below which a corrector counts as easy.
const EASY_ITERATIONS: usize = 3;
const GROWTH: f64 = 1.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BranchLimits {
    pub max_steps: usize,
    pub sup_density_cap: f64,
    pub lambda_cap: f64,
    pub field_floor: f64,
    pub loop_eps: f64,
    pub h_init: f64,
    pub h_min: f64,
    pub h_max: f64,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
}

impl Default for BranchLimits {
    fn default() -> Self {
        Self {
            max_steps: 5000,
            sup_density_cap: 1e3,
            lambda_cap: 1e3,
            field_floor: DEFAULT_FIELD_FLOOR,
            loop_eps: 1e-6,
            h_init: 1e-3,
            h_min: 1e-6,
            h_max: 0.1,
            newton_tol: DEFAULT_NEWTON_TOL,
            newton_max_iter: 30,
        }
    }
}

impl BranchLimits {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("sup_density_cap", self.sup_density_cap),
            ("lambda_cap", self.lambda_cap),
            ("loop_eps", self.loop_eps),
            ("h_min", self.h_min),
            ("newton_tol", self.newton_tol),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        if !(self.field_floor.is_finite() && self.field_floor >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "field_floor must be >= 0, got {}",
                self.field_floor
            )));
        }
        if !(self.h_min <= self.h_init && self.h_init <= self.h_max && self.h_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need h_min <= h_init <= h_max, got {} {} {}",
                self.h_min, self.h_init, self.h_max
            )));
        }
        if self.max_steps == 0 || self.newton_max_iter == 0 {
            return Err(Error::InvalidParameter(
                "max_steps and newton_max_iter must be positive".into(),
            ));
        }
        Ok(())
    }

    fn newton(&self) -> NewtonOptions {
        NewtonOptions {
            tol: self.newton_tol,
            max_iter: self.newton_max_iter,
            field_floor: self.field_floor,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Diagnostics {
    pub sup_rho_i: f64,
    pub sup_rho_e: f64,
    pub min_field: f64,
    pub positive: bool,
    pub newton_iters: usize,
    pub residual_norm: f64,
    /// Extended residual norm before each corrector iteration and at the end.
    pub newton_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchPoint {
    pub s: f64,
    pub state: State,
    pub diagnostics: Diagnostics,
}

impl BranchPoint {
    fn new(s: f64, state: State, newton_history: Vec<f64>, grid: &RadialGrid) -> Self {
        let dens = densities(&state, grid);
        let adm = admissibility(&state, grid);
        let residual_norm = *newton_history.last().unwrap_or(&0.0);
        Self {
            s,
            diagnostics: Diagnostics {
                sup_rho_i: dens.sup_rho_i,
                sup_rho_e: dens.sup_rho_e,
                min_field: adm.min_field,
                positive: dens.positive,
                newton_iters: newton_history.len().saturating_sub(1),
                residual_norm,
                newton_history,
            },
            state,
        }
    }

    /// The trivial solution at `λ`, as the start of a branch.
    pub fn trivial(lambda: f64, grid: &RadialGrid) -> Self {
        Self::new(0.0, State::trivial(lambda, grid), vec![0.0], grid)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TerminationKind {
    DensityBlowup,
    VoltageBlowup,
    HalfLoop { lambda_ddagger: f64 },
    FieldDegeneracy,
    PositivityLoss,
    MaxSteps,
    NewtonFailure,
}

impl TerminationKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::DensityBlowup => "DensityBlowup",
            Self::VoltageBlowup => "VoltageBlowup",
            Self::HalfLoop { .. } => "HalfLoop",
            Self::FieldDegeneracy => "FieldDegeneracy",
            Self::PositivityLoss => "PositivityLoss",
            Self::MaxSteps => "MaxSteps",
            Self::NewtonFailure => "NewtonFailure",
        }
    }
}

impl fmt::Display for TerminationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::HalfLoop { lambda_ddagger } => write!(f, "HalfLoop({lambda_ddagger})"),
            other => f.write_str(other.name()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Termination {
    pub kind: TerminationKind,
    pub evidence: String,
}

/// Unit tangent in the extended space.
#[derive(Clone, Debug, PartialEq)]
pub struct Tangent {
    pub dy: Vec<f64>,
    pub dlambda: f64,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub lambda_dagger: f64,
    pub triple: NullTriple,
    pub start: BranchPoint,
    pub points: Vec<BranchPoint>,
    pub termination: Termination,
    pub warnings: Vec<String>,
}

/// Per-unknown weights `w_j r_j²` of the weighted product.
pub fn unknown_weights(grid: &RadialGrid) -> Vec<f64> {
    let last = grid.last();
    let mut w = Vec::with_capacity(State::dim(grid));
    for j in 1..=last {
        let wr2 = grid.weights()[j] * grid.r(j) * grid.r(j);
        let count = if j < last { 3 } else { 2 };
        w.extend(std::iter::repeat_n(wr2, count));
    }
    w
}

fn weighted_dot(a: &[f64], b: &[f64], w: &[f64]) -> f64 {
    a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum()
}

/// Tangent at the bifurcation point: the normalized null triple with no
/// `λ` component, oriented toward positive densities.
pub fn initial_tangent(triple: &NullTriple, grid: &RadialGrid) -> Result<Tangent> {
    let norm = triple.norm(grid);
    if !(norm.is_finite() && norm > 0.0) {
        return Err(Error::Domain(format!("null triple has norm {norm}")));
    }
    let dy = triple.scaled_state(1.0 / norm).to_unknowns();
    Ok(Tangent { dy, dlambda: 0.0 })
}

/// `⟨τ, x - x₀⟩ - h`.
struct Arclength<'a> {
    anchor: Vec<f64>,
    anchor_lambda: f64,
    tangent: &'a Tangent,
    weights: &'a [f64],
    h: f64,
}

impl ScalarConstraint for Arclength<'_> {
    fn value(&self, state: &State, _grid: &RadialGrid) -> f64 {
        let x = state.to_unknowns();
        let along: f64 = (0..x.len())
            .map(|k| self.weights[k] * self.tangent.dy[k] * (x[k] - self.anchor[k]))
            .sum();
        along + self.tangent.dlambda * (state.lambda - self.anchor_lambda) - self.h
    }

    fn gradient(&self, _state: &State, _grid: &RadialGrid) -> (Vec<f64>, f64) {
        let row = self.tangent.dy.iter().zip(self.weights).map(|(t, w)| t * w).collect();
        (row, self.tangent.dlambda)
    }
}

/// Step-size controller: halve on failure, grow after two easy steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepControl {
    pub h: f64,
    pub h_min: f64,
    pub h_max: f64,
    easy_streak: usize,
}

impl StepControl {
    pub fn new(limits: &BranchLimits) -> Self {
        Self {
            h: limits.h_init,
            h_min: limits.h_min,
            h_max: limits.h_max,
            easy_streak: 0,
        }
    }

    fn accepted(&mut self, iterations: usize) {
        if iterations <= EASY_ITERATIONS {
            self.easy_streak += 1;
            if self.easy_streak >= 2 {
                self.h = (self.h * GROWTH).min(self.h_max);
                self.easy_streak = 0;
            }
        } else {
            self.easy_streak = 0;
        }
    }
}

/// Result of one accepted continuation step.
#[derive(Clone, Debug)]
pub struct Step {
    pub point: BranchPoint,
    pub tangent: Tangent,
    pub h_used: f64,
    /// Estimate of the smallest singular value of the bordered Jacobian.
    pub bordered_sigma: f64,
}

/// One Euler predictor and Newton corrector step. On corrector failure the
/// step is halved and retried; `StepFailure` once it drops below `h_min`.
pub fn arclength_step(
    current: &BranchPoint,
    tangent: &Tangent,
    control: &mut StepControl,
    p: &Parameters,
    grid: &RadialGrid,
    limits: &BranchLimits,
) -> Result<Step> {
    let weights = unknown_weights(grid);
    let x0 = current.state.to_unknowns();
    let lambda0 = current.state.lambda;
    let opts = limits.newton();
    let mut last_err = None;
    while control.h >= control.h_min {
        let h = control.h;
        let x: Vec<f64> = x0.iter().zip(&tangent.dy).map(|(x, t)| x + h * t).collect();
        let guess = State::from_unknowns(lambda0 + h * tangent.dlambda, &x, grid);
        let constraint = Arclength {
            anchor: x0.clone(),
            anchor_lambda: lambda0,
            tangent,
            weights: &weights,
            h,
        };
        match newton_solve(&guess, NewtonMode::Extended(&constraint), p, grid, &opts) {
            Ok(out) => {
                let (next, sigma) = next_tangent(&out.state, tangent, &weights, p, grid)?;
                control.accepted(out.iterations);
                let point = BranchPoint::new(current.s + h, out.state, out.history, grid);
                return Ok(Step {
                    point,
                    tangent: next,
                    h_used: h,
                    bordered_sigma: sigma,
                });
            }
            Err(e) => {
                debug!("corrector failed at h = {h:e}: {e}");
                last_err = Some(e);
                control.h *= 0.5;
                control.easy_streak = 0;
            }
        }
    }
    if let Some(e) = last_err {
        debug!("last corrector error: {e}");
    }
    Err(Error::StepFailure {
        step: control.h,
        min_step: control.h_min,
    })
}

/// Solves `[J J_λ; τᵀW] z = e` for the new tangent and normalizes it. The
/// last row fixes `⟨τ_old, z⟩ = 1 > 0`, so the orientation is kept.
fn next_tangent(
    state: &State,
    old: &Tangent,
    weights: &[f64],
    p: &Parameters,
    grid: &RadialGrid,
) -> Result<(Tangent, f64)> {
    let jac = jacobian(state, p, grid);
    let dim = jac.lambda_column.len();
    let bm = BorderedMatrix {
        a: jac.state,
        column: jac.lambda_column,
        row: old.dy.iter().zip(weights).map(|(t, w)| t * w).collect(),
        corner: old.dlambda,
    };
    let lu = bm.factor("tangent")?;
    let mut rhs = vec![0.0; dim + 1];
    rhs[dim] = 1.0;
    let z = lu.solve(&rhs);
    let norm = (weighted_dot(&z[..dim], &z[..dim], weights) + z[dim] * z[dim]).sqrt();
    let sigma = lu.smallest_singular_value_estimate(4);
    Ok((
        Tangent {
            dy: z[..dim].iter().map(|v| v / norm).collect(),
            dlambda: z[dim] / norm,
        },
        sigma,
    ))
}

/// Weighted inner product of two tangents.
pub fn tangent_dot(a: &Tangent, b: &Tangent, grid: &RadialGrid) -> f64 {
    weighted_dot(&a.dy, &b.dy, &unknown_weights(grid)) + a.dlambda * b.dlambda
}

/// Termination test applied after every accepted point.
pub fn classify(
    point: &BranchPoint,
    lambda_dagger: f64,
    limits: &BranchLimits,
    grid: &RadialGrid,
) -> Option<Termination> {
    let d = &point.diagnostics;
    let lambda = point.state.lambda;
    let norm = point.state.profile_norm(grid);
    let sup = d.sup_rho_i + d.sup_rho_e;
    let term = |kind, evidence: String| Some(Termination { kind, evidence });
    if sup > limits.sup_density_cap {
        return term(
            TerminationKind::DensityBlowup,
            format!(
                "sup_rho_i + sup_rho_e = {sup:e} > {:e} at lambda = {lambda}",
                limits.sup_density_cap
            ),
        );
    }
    if lambda > limits.lambda_cap {
        return term(
            TerminationKind::VoltageBlowup,
            format!("lambda = {lambda} > {:e}", limits.lambda_cap),
        );
    }
    if norm < limits.loop_eps && lambda > lambda_dagger + 10.0 * limits.loop_eps {
        return term(
            TerminationKind::HalfLoop { lambda_ddagger: lambda },
            format!(
                "state norm {norm:e} < {:e} at lambda = {lambda} > {lambda_dagger}",
                limits.loop_eps
            ),
        );
    }
    if d.min_field < limits.field_floor {
        return term(
            TerminationKind::FieldDegeneracy,
            format!(
                "min field {:e} < {:e} at lambda = {lambda}",
                d.min_field, limits.field_floor
            ),
        );
    }
    if !d.positive {
        // a genuine loss of positivity comes with R_e collapsing as a whole
        let re_norm = point
            .state
            .r_e
            .iter()
            .zip(grid.weights())
            .zip(grid.nodes())
            .map(|((v, w), r)| w * r * r * v * v)
            .sum::<f64>()
            .sqrt();
        let collapsed = re_norm < limits.loop_eps.max(1e3 * limits.newton_tol);
        return term(
            TerminationKind::PositivityLoss,
            format!(
                "nonpositive density at an interior node, lambda = {lambda}, |R_e| = {re_norm:e} ({})",
                if collapsed {
                    "global collapse"
                } else {
                    "isolated zero without collapse, likely numerical"
                }
            ),
        );
    }
    None
}

/// Traces the branch from the sparking voltage until a termination rule
/// fires. Solver failures end the trace as `NewtonFailure`; only the
/// preparation (sparking voltage, null triple) can return an error.
pub fn trace_branch(p: &Parameters, grid: &RadialGrid, limits: &BranchLimits) -> Result<Branch> {
    limits.validate()?;
    let spark = sparking_voltage(p, DEFAULT_LAMBDA_MAX, grid, DEFAULT_ROOT_TOL)?;
    let lambda_dagger = spark.lambda_dagger;
    let triple = nullspace_triple(lambda_dagger, &spark.u_dagger, p, grid)?;
    let mut tangent = initial_tangent(&triple, grid)?;
    let start = BranchPoint::trivial(lambda_dagger, grid);
    let mut control = StepControl::new(limits);
    let mut points: Vec<BranchPoint> = Vec::new();
    let mut warnings = Vec::new();

    let termination = loop {
        if points.len() >= limits.max_steps {
            break Termination {
                kind: TerminationKind::MaxSteps,
                evidence: format!("{} steps taken", points.len()),
            };
        }
        let current = points.last().unwrap_or(&start);
        match arclength_step(current, &tangent, &mut control, p, grid, limits) {
            Ok(step) => {
                if step.bordered_sigma < CROSSING_WARNING {
                    let msg = format!(
                        "bordered Jacobian singular value {:e} at lambda = {}: possible secondary bifurcation",
                        step.bordered_sigma, step.point.state.lambda
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                }
                tangent = step.tangent;
                let verdict = classify(&step.point, lambda_dagger, limits, grid);
                points.push(step.point);
                if let Some(t) = verdict {
                    break t;
                }
            }
            Err(e) => {
                let at = points.last().unwrap_or(&start);
                break Termination {
                    kind: TerminationKind::NewtonFailure,
                    evidence: format!(
                        "{e}; last point s = {}, lambda = {}, min field = {:e}, sup density = {:e}",
                        at.s,
                        at.state.lambda,
                        at.diagnostics.min_field,
                        at.diagnostics.sup_rho_i + at.diagnostics.sup_rho_e
                    ),
                };
            }
        }
    };
    Ok(Branch {
        lambda_dagger,
        triple,
        start,
        points,
        termination,
        warnings,
    })
}

/// Fit of `‖y(s) - s·t̂‖` against `s` over the first points of a branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalLaw {
    pub s: Vec<f64>,
    pub remainder: Vec<f64>,
    /// Least-squares slope of `log remainder` against `log s`.
    pub slope: f64,
}

pub fn local_branch_law(branch: &Branch, count: usize, grid: &RadialGrid) -> Result<LocalLaw> {
    let pts = &branch.points[..count.min(branch.points.len())];
    if pts.len() < 3 {
        return Err(Error::Domain(format!(
            "need at least 3 branch points, have {}",
            pts.len()
        )));
    }
    let t = initial_tangent(&branch.triple, grid)?;
    let w = unknown_weights(grid);
    let mut s = Vec::with_capacity(pts.len());
    let mut rem = Vec::with_capacity(pts.len());
    for pt in pts {
        let y = pt.state.to_unknowns();
        let gap: Vec<f64> = y.iter().zip(&t.dy).map(|(y, t)| y - pt.s * t).collect();
        s.push(pt.s);
        rem.push(weighted_dot(&gap, &gap, &w).sqrt());
    }
    let lx: Vec<f64> = s.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = rem.iter().map(|v| v.ln()).collect();
    let m = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / m, ly.iter().sum::<f64>() / m);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    Ok(LocalLaw {
        s,
        remainder: rem,
        slope: sxy / sxx,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum HighVoltageVerdict {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct HighVoltageReport {
    pub verdict: HighVoltageVerdict,
    /// `(λ, sup ρ_i, ∫ r²|ρ_e|)` over the last quartile of the branch.
    pub tail: Vec<(f64, f64, f64)>,
}

/// Dilute-gas trend check on the tail of a branch that ran off to high
/// voltage: both `sup ρ_i` and `∫ r²|ρ_e|` must decrease monotonically over
/// the last quartile.
pub fn high_voltage_diagnostic(branch: &Branch, p: &Parameters, grid: &RadialGrid) -> HighVoltageReport {
    let skip = |why: &str| HighVoltageReport {
        verdict: HighVoltageVerdict::Skipped(why.to_string()),
        tail: Vec::new(),
    };
    if branch.termination.kind != TerminationKind::VoltageBlowup {
        return skip(&format!("branch terminated with {}", branch.termination.kind));
    }
    if !high_voltage_condition(p) {
        return skip("non-degeneracy condition on (a, gamma) fails");
    }
    let n = branch.points.len();
    let from = n - (n / 4).max(2).min(n);
    let tail: Vec<(f64, f64, f64)> = branch.points[from..]
        .iter()
        .map(|pt| {
            let dens = densities(&pt.state, grid);
            let l1: f64 = dens
                .rho_e
                .iter()
                .zip(grid.weights())
                .zip(grid.nodes())
                .map(|((v, w), r)| w * r * r * v.abs())
                .sum();
            (pt.state.lambda, dens.sup_rho_i, l1)
        })
        .collect();
    let decreasing = tail.windows(2).all(|w| w[1].1 < w[0].1 && w[1].2 < w[0].2);
    HighVoltageReport {
        verdict: if decreasing {
            HighVoltageVerdict::Pass
        } else {
            HighVoltageVerdict::Fail
        },
        tail,
    }
}

/// Residual norm of a stored point, recomputed from scratch.
pub fn point_residual(point: &BranchPoint, p: &Parameters, grid: &RadialGrid) -> f64 {
    residual(&point.state, p, grid).y_norm(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::electron_system::SparkingResult;

    fn params() -> Parameters {
        Parameters::with_unit_mobilities(2.0, 3.0, 1.0).unwrap()
    }

    fn setup(n: usize) -> (Parameters, RadialGrid, SparkingResult, NullTriple) {
        let p = params();
        let g = RadialGrid::new(n).unwrap();
        let spark = sparking_voltage(&p, 100.0, &g, DEFAULT_ROOT_TOL).unwrap();
        let t = nullspace_triple(spark.lambda_dagger, &spark.u_dagger, &p, &g).unwrap();
        (p, g, spark, t)
    }

    fn first_step(h: f64, n: usize) -> (f64, Step, Tangent) {
        let (p, g, spark, t) = setup(n);
        let tangent = initial_tangent(&t, &g).unwrap();
        let limits = BranchLimits {
            h_init: h,
            ..Default::default()
        };
        let mut control = StepControl::new(&limits);
        let start = BranchPoint::trivial(spark.lambda_dagger, &g);
        let step = arclength_step(&start, &tangent, &mut control, &p, &g, &limits).unwrap();
        (spark.lambda_dagger, step, tangent)
    }

    #[test]
    fn initial_tangent_is_a_positive_unit_vector() {
        let (_, g, _, t) = setup(129);
        let tau = initial_tangent(&t, &g).unwrap();
        assert!((tangent_dot(&tau, &tau, &g) - 1.0).abs() < 1e-12);
        assert_eq!(tau.dlambda, 0.0);
        let s = State::from_unknowns(1.0, &tau.dy, &g);
        assert!((1..g.len()).all(|j| s.rho_i[j] > 0.0 && s.r_e[j] > 0.0));
    }

    #[test]
    fn first_point_follows_the_bifurcation_expansion() {
        let (ld, a, _) = first_step(1e-3, 129);
        let (_, b, _) = first_step(5e-4, 129);
        let g = RadialGrid::new(129).unwrap();
        for (h, st) in [(1e-3, &a), (5e-4, &b)] {
            let norm = st.point.state.profile_norm(&g);
            assert!((norm / h - 1.0).abs() < 1e-2, "{norm} vs {h}");
            assert!(st.point.diagnostics.positive);
            assert!(st.point.diagnostics.residual_norm <= DEFAULT_NEWTON_TOL);
        }
        // λ leaves λ† linearly: the slopes at h and h/2 agree to O(h)
        let (ka, kb) = ((a.point.state.lambda - ld) / 1e-3, (b.point.state.lambda - ld) / 5e-4);
        assert!(ka > 0.0 && (ka - kb).abs() < 0.05 * kb.abs(), "{ka} {kb}");
    }

    #[test]
    fn halving_the_step_halves_the_gap() {
        let g = RadialGrid::new(129).unwrap();
        let gap = |ld: f64, st: &Step| {
            let y = st.point.state.to_unknowns();
            let w = unknown_weights(&g);
            let lam = st.point.state.lambda - ld;
            (weighted_dot(&y, &y, &w) + lam * lam).sqrt()
        };
        let (ld, a, _) = first_step(2e-3, 129);
        let (_, b, _) = first_step(1e-3, 129);
        let ratio = gap(ld, &a) / gap(ld, &b);
        assert!((ratio - 2.0).abs() < 0.02, "{ratio}");
    }

    #[test]
    fn short_trace_keeps_orientation_and_invariants() {
        let p = params();
        let g = RadialGrid::new(129).unwrap();
        let limits = BranchLimits {
            max_steps: 40,
            ..Default::default()
        };
        let b = trace_branch(&p, &g, &limits).unwrap();
        assert_eq!(b.termination.kind, TerminationKind::MaxSteps);
        assert_eq!(b.points.len(), 40);
        for w in b.points.windows(2) {
            assert!(w[1].s > w[0].s);
        }
        for pt in &b.points {
            assert!(pt.diagnostics.residual_norm <= DEFAULT_NEWTON_TOL);
            assert!(point_residual(pt, &p, &g) <= DEFAULT_NEWTON_TOL);
            assert!(pt.diagnostics.positive);
            assert!(pt.state.lambda > 0.0);
        }
        // the state moves monotonically along the null direction
        let t = initial_tangent(&b.triple, &g).unwrap();
        let w = unknown_weights(&g);
        let along: Vec<f64> = b
            .points
            .iter()
            .map(|pt| weighted_dot(&pt.state.to_unknowns(), &t.dy, &w))
            .collect();
        assert!(along.windows(2).all(|v| v[1] > v[0]));
    }

    #[test]
    fn successive_tangents_do_not_reverse() {
        let (p, g, spark, t) = setup(129);
        let limits = BranchLimits::default();
        let mut control = StepControl::new(&limits);
        let mut tangent = initial_tangent(&t, &g).unwrap();
        let mut point = BranchPoint::trivial(spark.lambda_dagger, &g);
        for _ in 0..25 {
            let step = arclength_step(&point, &tangent, &mut control, &p, &g, &limits).unwrap();
            assert!(tangent_dot(&tangent, &step.tangent, &g) > 0.0);
            assert!((tangent_dot(&step.tangent, &step.tangent, &g) - 1.0).abs() < 1e-10);
            tangent = step.tangent;
            point = step.point;
        }
        assert!(control.h > limits.h_init, "step never grew: {}", control.h);
    }

    #[test]
    fn local_law_remainder_is_superlinear() {
        let p = params();
        let g = RadialGrid::new(129).unwrap();
        let limits = BranchLimits {
            max_steps: 10,
            ..Default::default()
        };
        let b = trace_branch(&p, &g, &limits).unwrap();
        let law = local_branch_law(&b, 10, &g).unwrap();
        assert!(law.slope >= 1.5, "{law:?}");
        assert!(law.remainder.iter().zip(&law.s).all(|(r, s)| r / s < 0.1));
    }

    #[test]
    fn unreachable_tolerance_ends_as_newton_failure() {
        let p = params();
        let g = RadialGrid::new(65).unwrap();
        let limits = BranchLimits {
            newton_tol: 1e-30,
            h_min: 1e-4,
            ..Default::default()
        };
        let b = trace_branch(&p, &g, &limits).unwrap();
        assert_eq!(b.termination.kind, TerminationKind::NewtonFailure);
        assert!(b.points.is_empty());
        assert!(b.termination.evidence.contains("fell below minimum"));
    }

    fn synthetic(lambda: f64, scale: f64, g: &RadialGrid) -> BranchPoint {
        let mut s = State::trivial(lambda, g);
        for j in 1..g.len() {
            s.rho_i[j] = scale;
            s.r_e[j] = scale;
        }
        BranchPoint::new(1.0, s, vec![0.0], g)
    }

    #[test]
    fn classification_rules() {
        let g = RadialGrid::new(33).unwrap();
        let lim = BranchLimits::default();
        let ld = 3.5;
        assert_eq!(classify(&synthetic(4.0, 1.0, &g), ld, &lim, &g), None);
        let kind = |pt: &BranchPoint| classify(pt, ld, &lim, &g).map(|t| t.kind);
        assert_eq!(kind(&synthetic(4.0, 2e3, &g)), Some(TerminationKind::DensityBlowup));
        assert_eq!(kind(&synthetic(2e3, 1.0, &g)), Some(TerminationKind::VoltageBlowup));
        assert_eq!(
            kind(&synthetic(4.0, 1e-8, &g)),
            Some(TerminationKind::HalfLoop { lambda_ddagger: 4.0 })
        );
        // the start point sits at λ† and is not a returning loop
        let start = kind(&BranchPoint::trivial(ld, &g));
        assert!(!matches!(start, Some(TerminationKind::HalfLoop { .. })), "{start:?}");
        let near = kind(&synthetic(ld + 5e-6, 1e-8, &g));
        assert!(!matches!(near, Some(TerminationKind::HalfLoop { .. })), "{near:?}");
        let mut flat = synthetic(4.0, 1.0, &g);
        flat.state.v = crate::discretization::GridFunction::from_fn(&g, |r| -8.0 * (r - 1.0) * (2.0 - r));
        flat.diagnostics.min_field = admissibility(&flat.state, &g).min_field;
        assert_eq!(kind(&flat), Some(TerminationKind::FieldDegeneracy));
        let mut dip = synthetic(4.0, 1.0, &g);
        dip.state.r_e[10] = -0.1;
        dip.diagnostics.positive = densities(&dip.state, &g).positive;
        let t = classify(&dip, ld, &lim, &g).unwrap();
        assert_eq!(t.kind, TerminationKind::PositivityLoss);
        assert!(t.evidence.contains("without collapse"));
    }

    #[test]
    fn high_voltage_diagnostic_guards() {
        let p = params();
        let g = RadialGrid::new(65).unwrap();
        let limits = BranchLimits {
            max_steps: 5,
            ..Default::default()
        };
        let b = trace_branch(&p, &g, &limits).unwrap();
        let r = high_voltage_diagnostic(&b, &p, &g);
        assert!(matches!(r.verdict, HighVoltageVerdict::Skipped(_)));
        let mut fake = b.clone();
        fake.termination.kind = TerminationKind::VoltageBlowup;
        let degenerate = Parameters::with_unit_mobilities(std::f64::consts::LN_2, 3.0, 1.0).unwrap();
        assert!(matches!(
            high_voltage_diagnostic(&fake, &degenerate, &g).verdict,
            HighVoltageVerdict::Skipped(_)
        ));
        // densities grow along this stretch, so the dilute trend is absent
        assert_eq!(high_voltage_diagnostic(&fake, &p, &g).verdict, HighVoltageVerdict::Fail);
        fake.points.reverse();
        assert_eq!(high_voltage_diagnostic(&fake, &p, &g).verdict, HighVoltageVerdict::Pass);
    }

    #[test]
    fn limits_validation() {
        assert!(BranchLimits::default().validate().is_ok());
        assert!(BranchLimits {
            h_init: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BranchLimits {
            loop_eps: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(BranchLimits {
            max_steps: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
