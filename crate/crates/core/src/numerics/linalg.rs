use super::matrix::Matrix;
use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Pivot threshold below which a PSD matrix is treated as singular.
pub const SINGULAR_PIVOT: f64 = 1e-14;

/// Numerically stable softmax (max-subtracted).
pub fn softmax_vec<T: Real>(v: &[T]) -> Result<Vec<T>> {
    if v.is_empty() {
        return invalid("softmax of an empty vector");
    }
    if v.iter().any(|x| !x.is_finite()) {
        return invalid("softmax input must be finite");
    }
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn check_symmetric<T: Real>(m: &Matrix<T>, what: &str) -> Result<()> {
    if !m.is_square() {
        return invalid(format!(
            "{what}: matrix is {}x{}, not square",
            m.rows(),
            m.cols()
        ));
    }
    let tol = T::tol(1e-10) * T::one().max(m.max_abs());
    if !m.is_symmetric(tol) {
        return invalid(format!("{what}: matrix is not symmetric"));
    }
    Ok(())
}

/// Lower Cholesky factor, or `None` once a pivot drops below `min_pivot`.
pub fn cholesky<T: Real>(m: &Matrix<T>, min_pivot: T) -> Option<Matrix<T>> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = m.get(j, j);
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if !(pivot >= min_pivot) || pivot <= T::zero() {
            return None;
        }
        let d = pivot.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Determinant of a symmetric PSD matrix through its Cholesky factor.
///
/// Returns exactly 0 when a pivot falls below [`SINGULAR_PIVOT`].
pub fn det_psd<T: Real>(m: &Matrix<T>) -> Result<T> {
    check_symmetric(m, "det_psd")?;
    Ok(match cholesky(m, T::lit(SINGULAR_PIVOT)) {
        Some(l) => (0..m.rows())
            .map(|i| l.get(i, i) * l.get(i, i))
            .fold(T::one(), |a, b| a * b),
        None => T::zero(),
    })
}

/// `log det` of a symmetric positive definite matrix; `-inf` if it is not.
pub fn logdet_pd<T: Real>(m: &Matrix<T>) -> Result<T> {
    check_symmetric(m, "logdet_pd")?;
    Ok(match cholesky(m, T::min_positive_value()) {
        Some(l) => (0..m.rows()).map(|i| l.get(i, i).ln()).sum::<T>() * T::lit(2.0),
        None => T::neg_infinity(),
    })
}

/// Inverse of a symmetric positive definite matrix.
pub fn spd_inverse<T: Real>(m: &Matrix<T>) -> Result<Matrix<T>> {
    check_symmetric(m, "spd_inverse")?;
    let n = m.rows();
    let l = cholesky(m, T::min_positive_value())
        .ok_or_else(|| crate::IapError::Degenerate("matrix is not positive definite".into()))?;
    // solve L Lᵀ x = e_c column by column
    let mut inv = Matrix::zeros(n, n);
    let mut y = vec![T::zero(); n];
    for c in 0..n {
        for i in 0..n {
            let mut s = if i == c { T::one() } else { T::zero() };
            for k in 0..i {
                s -= l.get(i, k) * y[k];
            }
            y[i] = s / l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l.get(k, i) * inv.get(k, c);
            }
            inv.set(i, c, s / l.get(i, i));
        }
    }
    Ok(inv)
}

/// Eigenvalues of a symmetric matrix (cyclic Jacobi), ascending.
pub fn sym_eigenvalues<T: Real>(m: &Matrix<T>) -> Result<Vec<T>> {
    check_symmetric(m, "sym_eigenvalues")?;
    let n = m.rows();
    let mut a = m.clone();
    let scale = T::one().max(a.max_abs());
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a.get(i, j).powi(2))
            .sum();
        if off.sqrt() <= T::epsilon() * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == T::zero() {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
            }
        }
    }
    let mut ev: Vec<T> = (0..n).map(|i| a.get(i, i)).collect();
    ev.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
    Ok(ev)
}

/// `exp(scale * omega)` for skew-symmetric `omega`, by scaling and squaring
/// a Taylor series.
pub fn expm_skew<T: Real>(omega: &Matrix<T>, scale: T) -> Result<Matrix<T>> {
    if !omega.is_square() {
        return invalid("expm_skew needs a square matrix");
    }
    let tol = T::tol(1e-10) * T::one().max(omega.max_abs());
    if !omega.is_skew(tol) {
        return invalid("expm_skew input is not skew-symmetric");
    }
    let n = omega.rows();
    let a = omega.scale(scale);
    let norm1 = (0..n)
        .map(|c| (0..n).map(|r| a.get(r, c).abs()).sum::<T>())
        .fold(T::zero(), T::max);
    let mut squarings = 0u32;
    let mut b = a;
    let mut bn = norm1;
    while bn > T::lit(0.25) {
        bn = bn / T::lit(2.0);
        squarings += 1;
    }
    if squarings > 0 {
        b = b.scale(T::lit(0.5f64.powi(squarings as i32)));
    }
    let mut sum = Matrix::identity(n);
    let mut term = Matrix::identity(n);
    for k in 1..40 {
        term = term.matmul(&b)?.scale(T::one() / T::from_usize_lossy(k));
        sum = sum.add(&term)?;
        if term.max_abs() <= T::epsilon() * T::lit(0.01) {
            break;
        }
    }
    for _ in 0..squarings {
        sum = sum.matmul(&sum)?;
    }
    Ok(sum)
}

/// `max |MᵀM - I|`.
pub fn orthogonality_error<T: Real>(m: &Matrix<T>) -> T {
    match m.t_matmul(m) {
        Ok(g) => g.max_abs_diff(&Matrix::identity(m.cols())),
        Err(_) => T::infinity(),
    }
}

/// Determinant by partial-pivot LU; used only for sign checks on small matrices.
pub fn det_lu<T: Real>(m: &Matrix<T>) -> Result<T> {
    if !m.is_square() {
        return invalid("det_lu needs a square matrix");
    }
    let n = m.rows();
    let mut a = m.clone();
    let mut det = T::one();
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| a.get(i, c).abs().partial_cmp(&a.get(j, c).abs()).unwrap())
            .unwrap_or(c);
        if a.get(p, c) == T::zero() {
            return Ok(T::zero());
        }
        if p != c {
            for k in 0..n {
                let t = a.get(c, k);
                a.set(c, k, a.get(p, k));
                a.set(p, k, t);
            }
            det = -det;
        }
        let pivot = a.get(c, c);
        det *= pivot;
        for r in c + 1..n {
            let f = a.get(r, c) / pivot;
            for k in c..n {
                let v = a.get(r, k) - f * a.get(c, k);
                a.set(r, k, v);
            }
        }
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, RngStream};

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_vec(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        for c in [-800.0f64, 0.0, 3.5, 900.0] {
            let p = softmax_vec(&[c, c, c]).unwrap();
            assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        }
        let p = softmax_vec(&[2f64.ln(), 0.0]).unwrap();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax_vec::<f64>(&[]).is_err());
    }

    #[test]
    fn det_examples() {
        assert!((det_psd(&Matrix::<f64>::identity(3)).unwrap() - 1.0).abs() < 1e-15);
        let singular = m(&[&[1.0, 2.0, 0.5], &[1.0, 2.0, 0.5], &[0.5, 0.5, 3.0]]);
        // equal rows; symmetrize to stay inside the contract
        let g = singular.matmul_t(&singular).unwrap();
        assert_eq!(det_psd(&g).unwrap(), 0.0);
        let corr = m(&[&[1.0, 0.5], &[0.5, 1.0]]);
        assert!((det_psd(&corr).unwrap() - 0.75).abs() < 1e-15);
        assert!(det_psd(&Matrix::<f64>::zeros(2, 3)).is_err());
        assert!(det_psd(&m(&[&[1.0, 0.2], &[0.0, 1.0]])).is_err());
    }

    #[test]
    fn inverse_and_logdet() {
        let a = m(&[&[4.0, 1.0], &[1.0, 3.0]]);
        let inv = spd_inverse(&a).unwrap();
        assert!(a.matmul(&inv).unwrap().max_abs_diff(&Matrix::identity(2)) < 1e-14);
        assert!((logdet_pd(&a).unwrap() - 11f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        let a = m(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let ev = sym_eigenvalues(&a).unwrap();
        assert!((ev[0] - 1.0).abs() < 1e-14 && (ev[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let r = expm_skew(&Matrix::<f64>::zeros(3, 3), 1.0).unwrap();
        assert_eq!(r, Matrix::identity(3));
    }

    #[test]
    fn expm_planar_rotation() {
        let theta = 0.7f64;
        let omega = m(&[&[0.0, -theta], &[theta, 0.0]]);
        let r = expm_skew(&omega, 1.0).unwrap();
        let expect = m(&[&[theta.cos(), -theta.sin()], &[theta.sin(), theta.cos()]]);
        assert!(r.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn expm_random_skew_is_rotation() {
        let g: Matrix<f64> = gaussian_matrix(5, 5, &RngStream::new(4, 4)).unwrap();
        let omega = g.sub(&g.transpose()).unwrap();
        let r = expm_skew(&omega, 1.3).unwrap();
        assert!(orthogonality_error(&r) <= 1e-9);
        assert!((det_lu(&r).unwrap() - 1.0).abs() <= 1e-8);
        assert!(expm_skew(&g, 1.0).is_err());
    }
}
