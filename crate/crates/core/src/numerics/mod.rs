//! Dense linear algebra, seeded randomness and small matrix functions
//! shared by the rest of the crate.

mod linalg;
mod matrix;
mod random;
mod rng;

pub use linalg::{
    cholesky, det_lu, det_psd, expm_skew, logdet_pd, orthogonality_error, softmax_vec, spd_inverse,
    sym_eigenvalues, SINGULAR_PIVOT,
};
pub use matrix::{axpy, dot, norm, Matrix};
pub(crate) use random::normal;
pub use random::{block_orthogonal_gaussian, gaussian_matrix};
pub(crate) use rng::splitmix64;
pub use rng::RngStream;

/// Counts scalar multiplications performed by instrumented code paths.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCounter {
    pub muls: u64,
}

impl MulCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, n: usize) {
        self.muls += n as u64;
    }

    pub fn matmul<T: crate::Real>(
        &mut self,
        a: &Matrix<T>,
        b: &Matrix<T>,
    ) -> crate::Result<Matrix<T>> {
        self.add(a.rows() * a.cols() * b.cols());
        a.matmul(b)
    }

    pub fn t_matmul<T: crate::Real>(
        &mut self,
        a: &Matrix<T>,
        b: &Matrix<T>,
    ) -> crate::Result<Matrix<T>> {
        self.add(a.rows() * a.cols() * b.cols());
        a.t_matmul(b)
    }
}
