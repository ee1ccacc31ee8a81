//! Solves of the discounted fixed-point system `(I - gamma * M) x = b`.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Systems with at most this many unknowns are solved by LU factorization.
pub const DIRECT_SOLVE_MAX: usize = 2000;
/// Residual target of the iterative fallback.
pub const ITERATIVE_TOLERANCE: f64 = 1e-10;
const ITERATIVE_MAX_SWEEPS: usize = 10_000_000;

/// Which side of `M` the unknown multiplies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `x = b + gamma * M x` (values).
    Right,
    /// `x = b + gamma * M^T x` (occupancies).
    Left,
}

/// Solves `(I - gamma * M) x = b` (or the transposed system) where `m` is a
/// row-major `n x n` substochastic matrix.
pub fn solve_discounted(m: &[f64], n: usize, gamma: f64, b: &[f64], side: Side) -> Result<Vec<f64>> {
    solve_with_threshold(m, n, gamma, b, side, DIRECT_SOLVE_MAX)
}

pub(crate) fn solve_with_threshold(
    m: &[f64],
    n: usize,
    gamma: f64,
    b: &[f64],
    side: Side,
    direct_max: usize,
) -> Result<Vec<f64>> {
    debug_assert_eq!(m.len(), n * n);
    debug_assert_eq!(b.len(), n);
    if n <= direct_max {
        solve_direct(m, n, gamma, b, side)
    } else {
        solve_iterative(m, n, gamma, b, side)
    }
}

fn solve_direct(m: &[f64], n: usize, gamma: f64, b: &[f64], side: Side) -> Result<Vec<f64>> {
    let a = DMatrix::from_fn(n, n, |i, j| {
        let entry = match side {
            Side::Right => m[i * n + j],
            Side::Left => m[j * n + i],
        };
        let diag = if i == j { 1.0 } else { 0.0 };
        diag - gamma * entry
    });
    let rhs = DVector::from_column_slice(b);
    let x = a
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Internal("singular discounted system".into()))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Internal("non-finite solution of discounted system".into()));
    }
    Ok(x.iter().copied().collect())
}

fn solve_iterative(m: &[f64], n: usize, gamma: f64, b: &[f64], side: Side) -> Result<Vec<f64>> {
    let mut x = b.to_vec();
    let mut next = vec![0.0; n];
    for _ in 0..ITERATIVE_MAX_SWEEPS {
        apply(m, n, &x, side, &mut next);
        let mut residual: f64 = 0.0;
        for i in 0..n {
            let updated = b[i] + gamma * next[i];
            residual = residual.max((updated - x[i]).abs());
            next[i] = updated;
        }
        core::mem::swap(&mut x, &mut next);
        if residual <= ITERATIVE_TOLERANCE {
            return Ok(x);
        }
    }
    Err(Error::Internal("iterative discounted solve did not converge".into()))
}

fn apply(m: &[f64], n: usize, x: &[f64], side: Side, out: &mut [f64]) {
    match side {
        Side::Right => {
            for (i, o) in out.iter_mut().enumerate() {
                *o = m[i * n..(i + 1) * n].iter().zip(x).map(|(a, b)| a * b).sum();
            }
        }
        Side::Left => {
            out.fill(0.0);
            for (i, xi) in x.iter().enumerate() {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += m[i * n + j] * xi;
                }
            }
        }
    }
}
