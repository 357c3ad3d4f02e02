//! Uniform radial grid on `[1, 2]`, trapezoid quadrature and the finite
//! difference stencils shared by every solver in the crate.

use std::ops::{Deref, DerefMut};

use crate::error::{Error, Result};

/// Smallest admissible node count.
pub const MIN_NODES: usize = 33;
/// Default node count; `Δ ≈ 3.9e-3`.
pub const DEFAULT_NODES: usize = 257;

/// Uniform nodes `r_j = 1 + jΔ` with trapezoid weights for `∫₁² · dr`.
#[derive(Clone, Debug, PartialEq)]
pub struct RadialGrid {
    n: usize,
    delta: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl RadialGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < MIN_NODES {
            return Err(Error::InvalidGrid(format!("need at least {MIN_NODES} nodes, got {n}")));
        }
        let last = n - 1;
        let delta = 1.0 / last as f64;
        // r_j = 1 + j/N keeps both endpoints exact
        let nodes: Vec<f64> = (0..n).map(|j| 1.0 + j as f64 / last as f64).collect();
        let mut weights = vec![delta; n];
        weights[0] = 0.5 * delta;
        weights[last] = 0.5 * delta;
        Ok(Self {
            n,
            delta,
            nodes,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Index of the cathode node.
    pub fn last(&self) -> usize {
        self.n - 1
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn r(&self, j: usize) -> f64 {
        self.nodes[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// The grid with twice as many intervals.
    pub fn refined(&self) -> Self {
        Self::new(2 * self.n - 1).expect("refining a valid grid")
    }

    pub fn check(&self, u: &[f64]) -> Result<()> {
        if u.len() != self.n {
            return Err(Error::GridMismatch {
                expected: self.n,
                found: u.len(),
            });
        }
        Ok(())
    }
}

/// Nodal values aligned with a [`RadialGrid`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GridFunction(pub Vec<f64>);

impl GridFunction {
    pub fn zeros(grid: &RadialGrid) -> Self {
        Self(vec![0.0; grid.len()])
    }

    pub fn from_fn(grid: &RadialGrid, f: impl Fn(f64) -> f64) -> Self {
        Self(grid.nodes().iter().map(|&r| f(r)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|v| c * v).collect())
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.0)
    }
}

impl From<Vec<f64>> for GridFunction {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl Deref for GridFunction {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for GridFunction {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Trapezoid approximation of `∫₁² f dr`.
pub fn trapezoid(f: &[f64], grid: &RadialGrid) -> f64 {
    debug_assert_eq!(f.len(), grid.len());
    f.iter().zip(grid.weights()).map(|(f, w)| f * w).sum()
}

/// Running trapezoid integral `∫₁^{r_j} f dr`, zero at the anode.
pub fn cumulative_trapezoid(f: &[f64], grid: &RadialGrid) -> Vec<f64> {
    let half = 0.5 * grid.delta();
    let mut out = Vec::with_capacity(f.len());
    let mut acc = 0.0;
    out.push(0.0);
    for pair in f.windows(2) {
        acc += half * (pair[0] + pair[1]);
        out.push(acc);
    }
    out
}

/// Trapezoid approximation of `∫₁² r² u v dr`.
pub fn weighted_inner(u: &[f64], v: &[f64], grid: &RadialGrid) -> Result<f64> {
    grid.check(u)?;
    grid.check(v)?;
    Ok(u.iter()
        .zip(v)
        .zip(grid.nodes().iter().zip(grid.weights()))
        .map(|((u, v), (r, w))| w * r * r * u * v)
        .sum())
}

/// Which end of the interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Anode,
    Cathode,
}

/// Second-order one-sided derivative at `r = 1` or `r = 2`.
pub fn boundary_derivative(u: &[f64], grid: &RadialGrid, side: Side) -> f64 {
    let d = grid.delta();
    match side {
        Side::Anode => (-3.0 * u[0] + 4.0 * u[1] - u[2]) / (2.0 * d),
        Side::Cathode => {
            let n = u.len() - 1;
            (3.0 * u[n] - 4.0 * u[n - 1] + u[n - 2]) / (2.0 * d)
        }
    }
}

/// Coefficients of the cathode one-sided derivative on nodes `N-2, N-1, N`.
pub(crate) fn cathode_stencil(delta: f64) -> [f64; 3] {
    [0.5 / delta, -2.0 / delta, 1.5 / delta]
}

/// Coefficients of the anode one-sided derivative on nodes `0, 1, 2`.
pub(crate) fn anode_stencil(delta: f64) -> [f64; 3] {
    [-1.5 / delta, 2.0 / delta, -0.5 / delta]
}

/// First derivative at every node: centered inside, one-sided at the ends.
pub fn derivative(u: &[f64], grid: &RadialGrid) -> Vec<f64> {
    let n = u.len();
    let d2 = 2.0 * grid.delta();
    let mut out = vec![0.0; n];
    out[0] = boundary_derivative(u, grid, Side::Anode);
    for j in 1..n - 1 {
        out[j] = (u[j + 1] - u[j - 1]) / d2;
    }
    out[n - 1] = boundary_derivative(u, grid, Side::Cathode);
    out
}

/// Tridiagonal interior rows; the first and last rows are left to callers
/// and stored as zeros.
#[derive(Clone, Debug)]
pub struct TridiagonalRows {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
}

impl TridiagonalRows {
    /// Applies the interior rows; the boundary entries of the result are 0.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let n = u.len();
        let mut out = vec![0.0; n];
        for j in 1..n - 1 {
            out[j] = self.lower[j] * u[j - 1] + self.diag[j] * u[j] + self.upper[j] * u[j + 1];
        }
        out
    }
}

/// Interior rows of `-u'' - (2/r)u' - q u` with centered differences.
pub fn sturm_liouville_rows(grid: &RadialGrid, q: &[f64]) -> Result<TridiagonalRows> {
    grid.check(q)?;
    let n = grid.len();
    let d = grid.delta();
    let inv_d2 = 1.0 / (d * d);
    let mut rows = TridiagonalRows {
        lower: vec![0.0; n],
        diag: vec![0.0; n],
        upper: vec![0.0; n],
    };
    for j in 1..n - 1 {
        let adv = 1.0 / (grid.r(j) * d);
        rows.lower[j] = -inv_d2 + adv;
        rows.diag[j] = 2.0 * inv_d2 - q[j];
        rows.upper[j] = -inv_d2 - adv;
    }
    Ok(rows)
}

/// `(1/r²)(r² u')'` at interior nodes, centered; zero at the ends.
pub fn radial_laplacian(u: &[f64], grid: &RadialGrid) -> Vec<f64> {
    let zero = vec![0.0; u.len()];
    let rows = sturm_liouville_rows(grid, &zero).expect("matching grid");
    rows.apply(u).into_iter().map(|v| -v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::harmonic_h_unchecked;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn grid_layout() {
        let g = RadialGrid::new(257).unwrap();
        assert_eq!(g.r(0), 1.0);
        assert_eq!(g.r(256), 2.0);
        assert_relative_eq!(g.weights().iter().sum::<f64>(), 1.0, epsilon = 1e-14);
        assert!(g.weights().iter().all(|&w| w > 0.0));
        assert!(RadialGrid::new(32).is_err());
        assert_eq!(g.refined().len(), 513);
    }

    #[test]
    fn weighted_inner_examples() {
        let g = RadialGrid::new(257).unwrap();
        let one = vec![1.0; 257];
        let zero = vec![0.0; 257];
        let d = g.delta();
        // trapezoid error for ∫ r² is exactly Δ²/6
        let v = weighted_inner(&one, &one, &g).unwrap();
        assert!((v - 7.0 / 3.0).abs() <= d * d / 6.0 + 1e-13);
        assert_eq!(weighted_inner(&one, &zero, &g).unwrap(), 0.0);
        let inv = GridFunction::from_fn(&g, |r| 1.0 / r);
        assert_relative_eq!(weighted_inner(&inv, &inv, &g).unwrap(), 1.0, epsilon = 1e-13);
        assert!(matches!(
            weighted_inner(&one[..10], &one, &g),
            Err(Error::GridMismatch { .. })
        ));
    }

    #[test]
    fn weighted_inner_second_order() {
        let exact = {
            // ∫₁² r² sin r cos r dr = ∫ r² sin(2r)/2
            let f = |r: f64| {
                let s = (2.0 * r).sin();
                let c = (2.0 * r).cos();
                0.5 * (-0.5 * r * r * c + 0.5 * r * s + 0.25 * c)
            };
            f(2.0) - f(1.0)
        };
        let err = |n| {
            let g = RadialGrid::new(n).unwrap();
            let u = GridFunction::from_fn(&g, f64::sin);
            let v = GridFunction::from_fn(&g, f64::cos);
            (weighted_inner(&u, &v, &g).unwrap() - exact).abs()
        };
        let order = (err(65) / err(129)).log2();
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn boundary_derivative_exact_on_quadratics() {
        let g = RadialGrid::new(65).unwrap();
        let lin = GridFunction::from_fn(&g, |r| r);
        assert_relative_eq!(boundary_derivative(&lin, &g, Side::Anode), 1.0, epsilon = 1e-11);
        assert_relative_eq!(boundary_derivative(&lin, &g, Side::Cathode), 1.0, epsilon = 1e-11);
        let sq = GridFunction::from_fn(&g, |r| r * r);
        assert_relative_eq!(boundary_derivative(&sq, &g, Side::Anode), 2.0, epsilon = 1e-10);
        assert_relative_eq!(boundary_derivative(&sq, &g, Side::Cathode), 4.0, epsilon = 1e-10);
        let g = RadialGrid::new(257).unwrap();
        let h = GridFunction::from_fn(&g, harmonic_h_unchecked);
        let d = g.delta();
        assert!((boundary_derivative(&h, &g, Side::Cathode) - 0.5).abs() < 2.0 * d * d);
    }

    #[test]
    fn sturm_liouville_kernels() {
        let g = RadialGrid::new(129).unwrap();
        let q = vec![0.0; 129];
        let rows = sturm_liouville_rows(&g, &q).unwrap();
        let ones = vec![1.0; 129];
        assert!(rows.apply(&ones).iter().all(|&v| v.abs() < 1e-9));
        let h = GridFunction::from_fn(&g, harmonic_h_unchecked);
        let d = g.delta();
        assert!(max_abs(&rows.apply(&h)) < 20.0 * d * d);
    }

    // -u'' - (2/r)u' - q u with u = sin(3r), q = r
    fn mms_error(n: usize) -> f64 {
        let g = RadialGrid::new(n).unwrap();
        let q = GridFunction::from_fn(&g, |r| r);
        let u = GridFunction::from_fn(&g, |r| (3.0 * r).sin());
        let rows = sturm_liouville_rows(&g, &q).unwrap();
        let lu = rows.apply(&u);
        (1..n - 1)
            .map(|j| {
                let r = g.r(j);
                let exact = 9.0 * (3.0 * r).sin() - (2.0 / r) * 3.0 * (3.0 * r).cos() - r * (3.0 * r).sin();
                (lu[j] - exact).abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn sturm_liouville_second_order() {
        let e = [mms_error(65), mms_error(129), mms_error(257)];
        for k in 0..2 {
            let order = (e[k] / e[k + 1]).log2();
            assert!((order - 2.0).abs() < 0.15, "order {order}");
        }
    }

    #[test]
    fn cumulative_matches_total() {
        let g = RadialGrid::new(101).unwrap();
        let f = GridFunction::from_fn(&g, |r| r.exp());
        let c = cumulative_trapezoid(&f, &g);
        assert_eq!(c[0], 0.0);
        assert_relative_eq!(c[100], trapezoid(&f, &g), epsilon = 1e-13);
    }

    proptest! {
        #[test]
        fn inner_is_symmetric_and_bilinear(c in -5.0f64..5.0, k in 0.1f64..4.0) {
            let g = RadialGrid::new(65).unwrap();
            let u = GridFunction::from_fn(&g, |r| (k * r).sin());
            let v = GridFunction::from_fn(&g, |r| r.powf(k));
            let a = weighted_inner(&u, &v, &g).unwrap();
            prop_assert!((a - weighted_inner(&v, &u, &g).unwrap()).abs() <= 1e-14 * (1.0 + a.abs()));
            let cu = u.scaled(c);
            prop_assert!((weighted_inner(&cu, &v, &g).unwrap() - c * a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
