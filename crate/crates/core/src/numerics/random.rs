use rand::Rng;
use rand_distr::StandardNormal;

use super::matrix::{dot, Matrix};
use super::rng::RngStream;
use crate::error::{invalid, Result};
use crate::scalar::Real;

pub(crate) fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R) -> T {
    T::lit(rng.sample::<f64, _>(StandardNormal))
}

/// `rows x cols` matrix of i.i.d. standard normal entries drawn from `stream`.
pub fn gaussian_matrix<T: Real>(rows: usize, cols: usize, stream: &RngStream) -> Result<Matrix<T>> {
    if rows == 0 || cols == 0 {
        return invalid(format!(
            "gaussian matrix needs positive dims, got {rows}x{cols}"
        ));
    }
    let mut rng = stream.generator();
    let data = (0..rows * cols).map(|_| normal(&mut rng)).collect();
    Ok(Matrix::from_raw(rows, cols, data))
}

/// `m x d` block-orthogonal Gaussian ensemble.
///
/// Rows come in blocks of `d`; inside a block they are orthogonalized with
/// modified Gram-Schmidt and then rescaled to the norm of an independent
/// `N(0, I_d)` vector, so every row keeps the marginal `N(0, I_d)` law.
pub fn block_orthogonal_gaussian<T: Real>(
    m: usize,
    d: usize,
    stream: &RngStream,
) -> Result<Matrix<T>> {
    if m == 0 || d == 0 {
        return invalid(format!(
            "block orthogonal ensemble needs m, d >= 1, got m={m} d={d}"
        ));
    }
    let mut rng = stream.generator();
    let mut out = Vec::with_capacity(m * d);
    let mut remaining = m;
    while remaining > 0 {
        let block_rows = remaining.min(d);
        let mut block: Vec<Vec<T>> = Vec::with_capacity(block_rows);
        while block.len() < block_rows {
            let mut v: Vec<T> = (0..d).map(|_| normal(&mut rng)).collect();
            for u in &block {
                let proj = dot(&v, u);
                for (vi, &ui) in v.iter_mut().zip(u) {
                    *vi -= proj * ui;
                }
            }
            let n = dot(&v, &v).sqrt();
            // a draw (numerically) inside the span of previous rows is redrawn
            if n <= T::tol(1e-10) {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            block.push(v);
        }
        for u in block {
            let radius = (0..d)
                .map(|_| normal::<T, _>(&mut rng).powi(2))
                .sum::<T>()
                .sqrt();
            out.extend(u.into_iter().map(|x| x * radius));
        }
        remaining -= block_rows;
    }
    Ok(Matrix::from_raw(m, d, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_deterministic() {
        let s = RngStream::new(11, 0);
        let a: Matrix<f64> = gaussian_matrix(1, 1, &s).unwrap();
        let b: Matrix<f64> = gaussian_matrix(1, 1, &s).unwrap();
        assert_eq!(a, b);
        let c: Matrix<f64> = gaussian_matrix(2, 3, &s).unwrap();
        assert_eq!(c.shape(), (2, 3));
        assert!(c.as_slice().iter().all(|v| v.is_finite()));
        assert!(gaussian_matrix::<f64>(0, 3, &s).is_err());
    }

    #[test]
    fn gaussian_moments() {
        // mean of 1e6 N(0,1) draws has standard error 1e-3
        let g: Matrix<f64> = gaussian_matrix(1000, 1000, &RngStream::new(3, 9)).unwrap();
        let n = g.as_slice().len() as f64;
        let mean = g.as_slice().iter().sum::<f64>() / n;
        let var = g.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    fn gram(w: &Matrix<f64>) -> Matrix<f64> {
        w.matmul_t(w).unwrap()
    }

    #[test]
    fn square_block_is_orthogonal() {
        let w: Matrix<f64> = block_orthogonal_gaussian(4, 4, &RngStream::new(5, 1)).unwrap();
        let g = gram(&w);
        for i in 0..4 {
            for j in 0..4 {
                if i != j {
                    assert!(g.get(i, j).abs() <= 1e-12, "({i},{j}) = {}", g.get(i, j));
                }
            }
        }
    }

    #[test]
    fn blocks_orthogonal_within_not_across() {
        let d = 5;
        let w: Matrix<f64> =
            block_orthogonal_gaussian(2 * d + 2, d, &RngStream::new(8, 2)).unwrap();
        let g = gram(&w);
        let block = |i: usize| i / d;
        let mut max_across = 0.0f64;
        for i in 0..w.rows() {
            for j in 0..w.rows() {
                if i != j && block(i) == block(j) {
                    assert!(g.get(i, j).abs() <= 1e-12);
                } else if i != j {
                    max_across = max_across.max(g.get(i, j).abs());
                }
            }
        }
        assert!(max_across > 1e-3);
    }

    #[test]
    fn row_norm_matches_gaussian() {
        // E||w||^2 = d for w ~ N(0, I_d)
        let d = 8;
        let mut total = 0.0;
        let trials = 10_000;
        for seed in 0..trials {
            let w: Matrix<f64> =
                block_orthogonal_gaussian(d, d, &RngStream::new(seed as u64, 77)).unwrap();
            total += w.as_slice().iter().map(|v| v * v).sum::<f64>();
        }
        let mean = total / (trials * d) as f64;
        assert!((mean - 8.0).abs() < 0.2, "mean squared norm {mean}");
    }
}
