//! One-sided (Hestenes) Jacobi SVD.
//!
//! Column pairs of a working copy are rotated until mutually orthogonal; the
//! rotations accumulate into `V` and the final column norms are the singular
//! values. Work is done in `f64` and rounded to `f32` on the way out.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 30;
const SINE_TOLERANCE: f64 = 1e-10;

/// Thin SVD `m = U · diag(sigma) · Vᵀ` with `r = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `rows × r`, orthonormal columns.
    pub u: Matrix,
    /// Descending, nonnegative.
    pub sigma: Vec<f32>,
    /// `cols × r`, orthonormal columns.
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for r in 0..us.rows() {
            for (x, s) in us.row_mut(r).iter_mut().zip(&self.sigma) {
                *x *= s;
            }
        }
        super::matmul(&us, &self.v.transpose()).expect("svd factors are conformable")
    }
}

/// Column-major f64 working matrix.
struct Cols {
    cols: Vec<Vec<f64>>,
}

impl Cols {
    fn from_matrix(m: &Matrix) -> Self {
        let cols = (0..m.cols())
            .map(|c| (0..m.rows()).map(|r| f64::from(m.get(r, c))).collect())
            .collect();
        Self { cols }
    }

    fn identity(n: usize) -> Self {
        let cols = (0..n)
            .map(|c| {
                let mut v = vec![0.0; n];
                v[c] = 1.0;
                v
            })
            .collect();
        Self { cols }
    }

    fn rotate(&mut self, p: usize, q: usize, c: f64, s: f64) {
        let (lo, hi) = self.cols.split_at_mut(q);
        let (cp, cq) = (&mut lo[p], &mut hi[0]);
        for (a, b) in cp.iter_mut().zip(cq.iter_mut()) {
            let (x, y) = (*a, *b);
            *a = c * x - s * y;
            *b = s * x + c * y;
        }
    }
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Decomposes `m`, which must be finite.
///
/// Singular vectors follow a fixed sign convention: the entry of largest
/// magnitude in each column of `V` is positive.
pub fn svd(m: &Matrix) -> Result<Svd> {
    if !m.is_finite() {
        return Err(Error::NonFinite("svd input"));
    }
    if m.rows() < m.cols() {
        // Work on the tall orientation and swap the factors back.
        let t = svd_tall(&m.transpose());
        return Ok(fix_signs(Svd {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        }));
    }
    Ok(fix_signs(svd_tall(m)))
}

fn svd_tall(m: &Matrix) -> Svd {
    let (n, d) = m.shape();
    let mut w = Cols::from_matrix(m);
    let mut v = Cols::identity(d);

    for _ in 0..MAX_SWEEPS {
        let mut max_sine = 0.0f64;
        for p in 0..d {
            for q in p + 1..d {
                let alpha = norm2(&w.cols[p]);
                let beta = norm2(&w.cols[q]);
                let gamma = dot64(&w.cols[p], &w.cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                max_sine = max_sine.max(s.abs());
                w.rotate(p, q, c, s);
                v.rotate(p, q, c, s);
            }
        }
        if max_sine < SINE_TOLERANCE {
            break;
        }
    }

    let mut order: Vec<(usize, f64)> = w.cols.iter().map(|c| norm2(c).sqrt()).enumerate().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let top = order.first().map_or(0.0, |o| o.1);
    let negligible = top * (n.max(d) as f64) * 1e-13;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut deficient = Vec::new();
    let mut sigma = Vec::with_capacity(d);
    let mut v_cols = Vec::with_capacity(d);
    for (slot, &(j, s)) in order.iter().enumerate() {
        if s > negligible && s > 0.0 {
            u_cols.push(w.cols[j].iter().map(|x| x / s).collect());
            sigma.push(s);
        } else {
            u_cols.push(vec![0.0; n]);
            sigma.push(0.0);
            deficient.push(slot);
        }
        v_cols.push(v.cols[j].clone());
    }
    if !deficient.is_empty() {
        fill_null_columns(&mut u_cols, &deficient, n);
    }

    Svd {
        u: cols_to_matrix(&u_cols, n),
        sigma: sigma.into_iter().map(|s| s as f32).collect(),
        v: cols_to_matrix(&v_cols, d),
    }
}

/// Replaces the listed zero columns with unit vectors orthogonal to the rest.
fn fill_null_columns(cols: &mut [Vec<f64>], slots: &[usize], n: usize) {
    let mut candidate = 0usize;
    for &slot in slots {
        loop {
            assert!(candidate < n, "ran out of basis vectors completing U");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            for (k, c) in cols.iter().enumerate() {
                if k == slot || norm2(c) == 0.0 {
                    continue;
                }
                let proj = dot64(&e, c);
                e.iter_mut().zip(c).for_each(|(x, y)| *x -= proj * y);
            }
            let len = norm2(&e).sqrt();
            if len > 1e-6 {
                e.iter_mut().for_each(|x| *x /= len);
                cols[slot] = e;
                break;
            }
        }
    }
}

fn cols_to_matrix(cols: &[Vec<f64>], rows: usize) -> Matrix {
    let mut m = Matrix::zeros(rows, cols.len());
    for (c, col) in cols.iter().enumerate() {
        for (r, &x) in col.iter().enumerate() {
            m.set(r, c, x as f32);
        }
    }
    m
}

fn fix_signs(mut s: Svd) -> Svd {
    for c in 0..s.v.cols() {
        let col = s.v.column(c);
        let pivot = col
            .iter()
            .enumerate()
            .fold(
                (0usize, 0.0f32),
                |best, (i, &x)| {
                    if x.abs() > best.1 {
                        (i, x.abs())
                    } else {
                        best
                    }
                },
            )
            .0;
        if col[pivot] < 0.0 {
            for r in 0..s.v.rows() {
                s.v.set(r, c, -s.v.get(r, c));
            }
            for r in 0..s.u.rows() {
                s.u.set(r, c, -s.u.get(r, c));
            }
        }
    }
    s
}

/// Extends orthonormal columns `q (n×r)` to a full `n×n` orthogonal matrix.
pub fn complete_orthonormal(q: &Matrix) -> Matrix {
    let (n, r) = q.shape();
    let mut cols: Vec<Vec<f64>> = (0..r)
        .map(|c| q.column(c).into_iter().map(f64::from).collect())
        .collect();
    cols.extend((r..n).map(|_| vec![0.0; n]));
    let slots: Vec<usize> = (r..n).collect();
    fill_null_columns(&mut cols, &slots, n);
    cols_to_matrix(&cols, n)
}
