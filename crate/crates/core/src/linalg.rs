//! Banded LU with partial pivoting and a bordered (one extra row and column)
//! solver built on top of it.
//!
//! Every discrete operator in this crate couples only nearby grid nodes, so
//! the state Jacobian is banded. Pseudo-arclength continuation adds one
//! dense column (the voltage) and one dense row (the arclength constraint);
//! those are handled by block elimination in [`BorderedLu`].

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Square band matrix. Row `i` stores the columns `i - kl ..= i + ku + kl`;
/// the extra `kl` superdiagonals hold the fill produced by row interchanges.
#[derive(Clone, Debug)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self {
            n,
            kl,
            ku,
            width,
            data: vec![0.0; n * width],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn lower_bandwidth(&self) -> usize {
        self.kl
    }

    pub fn upper_bandwidth(&self) -> usize {
        self.ku
    }

    #[inline]
    fn slot(&self, i: usize, j: usize) -> Option<usize> {
        if j + self.kl < i || j > i + self.ku + self.kl {
            None
        } else {
            Some(i * self.width + (j + self.kl - i))
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.slot(i, j).map_or(0.0, |s| self.data[s])
    }

    /// Adds `v` to entry `(i, j)`. Panics when the entry lies outside the
    /// declared band, which is always an assembly bug.
    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(
            j + self.kl >= i && j <= i + self.ku,
            "entry ({i}, {j}) outside band kl={} ku={}",
            self.kl,
            self.ku
        );
        let s = i * self.width + (j + self.kl - i);
        self.data[s] += v;
    }

    #[inline]
    fn set_raw(&mut self, i: usize, j: usize, v: f64) {
        let s = self.slot(i, j).expect("slot inside storage");
        self.data[s] = v;
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            for (j, yj) in y.iter_mut().enumerate().take(hi + 1).skip(lo) {
                *yj += self.get(i, j) * x[i];
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| self.get(i, j))
    }

    /// In-place LU factorization with partial pivoting.
    pub fn factor(mut self, context: &'static str) -> Result<BandedLu> {
        let n = self.n;
        let kl = self.kl;
        let reach = self.ku + self.kl;
        let mut piv = vec![0usize; n];
        let mut swaps = 0usize;
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in k + 1..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            piv[k] = p;
            if best == 0.0 || !best.is_finite() {
                return Err(Error::SingularSystem {
                    context,
                    condition_estimate: f64::INFINITY,
                });
            }
            let last_col = (k + reach).min(n - 1);
            if p != k {
                swaps += 1;
                for j in k..=last_col {
                    let a = self.get(k, j);
                    let b = self.get(p, j);
                    self.set_raw(k, j, b);
                    self.set_raw(p, j, a);
                }
            }
            let pivot = self.get(k, k);
            for i in k + 1..=last_row {
                let l = self.get(i, k) / pivot;
                self.set_raw(i, k, l);
                if l != 0.0 {
                    for j in k + 1..=last_col {
                        let v = self.get(i, j) - l * self.get(k, j);
                        self.set_raw(i, j, v);
                    }
                }
            }
        }
        let (mut umax, mut umin) = (0.0f64, f64::INFINITY);
        let mut negative = swaps % 2 == 1;
        for k in 0..n {
            let d = self.get(k, k);
            umax = umax.max(d.abs());
            umin = umin.min(d.abs());
            if d < 0.0 {
                negative = !negative;
            }
        }
        let condition_estimate = umax / umin;
        if condition_estimate > 1e15 {
            return Err(Error::SingularSystem {
                context,
                condition_estimate,
            });
        }
        Ok(BandedLu {
            lu: self,
            piv,
            condition_estimate,
            det_negative: negative,
        })
    }
}

/// Factorized band matrix.
#[derive(Clone, Debug)]
pub struct BandedLu {
    lu: BandedMatrix,
    piv: Vec<usize>,
    condition_estimate: f64,
    det_negative: bool,
}

impl BandedLu {
    pub fn dim(&self) -> usize {
        self.lu.n
    }

    /// Ratio of the largest to the smallest pivot magnitude.
    pub fn condition_estimate(&self) -> f64 {
        self.condition_estimate
    }

    /// Sign of the determinant of the factored matrix.
    pub fn det_sign(&self) -> f64 {
        if self.det_negative {
            -1.0
        } else {
            1.0
        }
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.lu.n;
        let kl = self.lu.kl;
        let reach = self.lu.ku + self.lu.kl;
        let mut x = rhs.to_vec();
        for k in 0..n {
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
            let xk = x[k];
            if xk != 0.0 {
                for i in k + 1..=(k + kl).min(n - 1) {
                    x[i] -= self.lu.get(i, k) * xk;
                }
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for j in k + 1..=(k + reach).min(n - 1) {
                s -= self.lu.get(k, j) * x[j];
            }
            x[k] = s / self.lu.get(k, k);
        }
        x
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.lu.n;
        let kl = self.lu.kl;
        let reach = self.lu.ku + self.lu.kl;
        let mut x = rhs.to_vec();
        // Uᵀ z = b
        for k in 0..n {
            let lo = k.saturating_sub(reach);
            let mut s = x[k];
            for j in lo..k {
                s -= self.lu.get(j, k) * x[j];
            }
            x[k] = s / self.lu.get(k, k);
        }
        // undo the elimination steps in reverse order
        for k in (0..n).rev() {
            let mut s = x[k];
            for i in k + 1..=(k + kl).min(n - 1) {
                s -= self.lu.get(i, k) * x[i];
            }
            x[k] = s;
            let p = self.piv[k];
            if p != k {
                x.swap(k, p);
            }
        }
        x
    }
}

/// `[[A, b], [cᵀ, d]]` with a banded `A`.
#[derive(Clone, Debug)]
pub struct BorderedMatrix {
    pub a: BandedMatrix,
    pub column: Vec<f64>,
    pub row: Vec<f64>,
    pub corner: f64,
}

impl BorderedMatrix {
    pub fn dim(&self) -> usize {
        self.a.dim() + 1
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.a.dim();
        let (xs, mu) = (&x[..n], x[n]);
        let mut y = self.a.mul_vec(xs);
        for (yi, ci) in y.iter_mut().zip(&self.column) {
            *yi += ci * mu;
        }
        y.push(dot(&self.row, xs) + self.corner * mu);
        y
    }

    pub fn mul_vec_transpose(&self, x: &[f64]) -> Vec<f64> {
        let n = self.a.dim();
        let (xs, mu) = (&x[..n], x[n]);
        let mut y = self.a.mul_vec_transpose(xs);
        for (yi, ri) in y.iter_mut().zip(&self.row) {
            *yi += ri * mu;
        }
        y.push(dot(&self.column, xs) + self.corner * mu);
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.a.dim();
        let mut m = DMatrix::zeros(n + 1, n + 1);
        m.view_mut((0, 0), (n, n)).copy_from(&self.a.to_dense());
        for i in 0..n {
            m[(i, n)] = self.column[i];
            m[(n, i)] = self.row[i];
        }
        m[(n, n)] = self.corner;
        m
    }

    pub fn factor(&self, context: &'static str) -> Result<BorderedLu> {
        let lu = self.a.clone().factor(context)?;
        let z = lu.solve(&self.column);
        let schur = self.corner - dot(&self.row, &z);
        let zt = lu.solve_transpose(&self.row);
        let schur_t = self.corner - dot(&self.column, &zt);
        let scale = self.corner.abs() + l2(&self.row) * l2(&z) + f64::MIN_POSITIVE;
        if schur.abs() <= 1e-14 * scale {
            return Err(Error::SingularSystem {
                context,
                condition_estimate: scale / schur.abs().max(f64::MIN_POSITIVE),
            });
        }
        Ok(BorderedLu {
            matrix: self.clone(),
            lu,
            z,
            schur,
            zt,
            schur_t,
        })
    }
}

/// Block-elimination solver for a [`BorderedMatrix`], with one step of
/// iterative refinement against the full bordered operator.
#[derive(Clone, Debug)]
pub struct BorderedLu {
    matrix: BorderedMatrix,
    lu: BandedLu,
    z: Vec<f64>,
    schur: f64,
    zt: Vec<f64>,
    schur_t: f64,
}

impl BorderedLu {
    /// Sign of the determinant of the full bordered matrix.
    pub fn det_sign(&self) -> f64 {
        self.lu.det_sign() * self.schur.signum()
    }

    fn solve_once(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.lu.dim();
        let y = self.lu.solve(&rhs[..n]);
        let mu = (rhs[n] - dot(&self.matrix.row, &y)) / self.schur;
        let mut x: Vec<f64> = y.iter().zip(&self.z).map(|(y, z)| y - mu * z).collect();
        x.push(mu);
        x
    }

    fn solve_transpose_once(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.lu.dim();
        let y = self.lu.solve_transpose(&rhs[..n]);
        let mu = (rhs[n] - dot(&self.matrix.column, &y)) / self.schur_t;
        let mut x: Vec<f64> = y.iter().zip(&self.zt).map(|(y, z)| y - mu * z).collect();
        x.push(mu);
        x
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.solve_once(rhs);
        let ax = self.matrix.mul_vec(&x);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = self.solve_once(&r);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        x
    }

    pub fn solve_transpose(&self, rhs: &[f64]) -> Vec<f64> {
        let mut x = self.solve_transpose_once(rhs);
        let ax = self.matrix.mul_vec_transpose(&x);
        let r: Vec<f64> = rhs.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let dx = self.solve_transpose_once(&r);
        for (xi, di) in x.iter_mut().zip(&dx) {
            *xi += di;
        }
        x
    }

    /// Estimate of the smallest singular value by inverse iteration on
    /// `(MᵀM)⁻¹`, started from a deterministic vector.
    pub fn smallest_singular_value_estimate(&self, iterations: usize) -> f64 {
        let n = self.matrix.dim();
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.5 * ((i as f64) * 0.7).sin()).collect();
        normalize(&mut v);
        let mut sigma = f64::INFINITY;
        for _ in 0..iterations.max(1) {
            let w = self.solve(&v);
            let mut u = self.solve_transpose(&w);
            let growth = l2(&u);
            if !(growth.is_finite() && growth > 0.0) {
                return 0.0;
            }
            sigma = 1.0 / growth.sqrt();
            normalize(&mut u);
            v = u;
        }
        sigma
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn l2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalize(v: &mut [f64]) {
    let n = l2(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}
