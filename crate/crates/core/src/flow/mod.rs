//! Double-bracket flow `dP/dt = P [PᵀQP, N]` on the orthogonal group, its
//! exponential discretization and the single-Givens stochastic variant.
//!
//! With `Q = diag(1, ..., n)` and `N = diag(s)` the flow increases
//! `tr(N PᵀQP)` and settles on the permutation that places `s` in
//! ascending order; [`sorting_projection`] reverses it to sort descending.

use rand::Rng;

use crate::error::{invalid, IapError, Result};
use crate::numerics::{expm_skew, gaussian_matrix, orthogonality_error, Matrix, RngStream};
use crate::scalar::Real;

/// Drift of `PᵀP` from the identity that triggers re-orthogonalization.
pub const REORTHO_DRIFT: f64 = 1e-10;

/// Off-pattern magnitude below which `P` counts as a permutation.
pub const CONVERGED_OFF_PATTERN: f64 = 0.05;

/// Relative spacing added to tied scores.
pub const TIE_JITTER: f64 = 1e-12;

/// `U W - W U`.
pub fn lie_bracket<T: Real>(u: &Matrix<T>, w: &Matrix<T>) -> Result<Matrix<T>> {
    if !u.is_square() || u.shape() != w.shape() {
        return invalid(format!(
            "lie bracket of {:?} and {:?}",
            u.shape(),
            w.shape()
        ));
    }
    u.matmul(w)?.sub(&w.matmul(u)?)
}

/// Rotation by `theta` in the `(k, l)` plane, acting on columns as
/// `[[c, -s], [s, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GivensRotation<T> {
    pub k: usize,
    pub l: usize,
    pub theta: T,
}

impl<T: Real> GivensRotation<T> {
    pub fn new(k: usize, l: usize, theta: T) -> Result<Self> {
        if k >= l {
            return invalid(format!("Givens indices need k < l, got ({k}, {l})"));
        }
        Ok(Self { k, l, theta })
    }

    pub fn matrix(&self, n: usize) -> Matrix<T> {
        let mut g = Matrix::identity(n);
        let (s, c) = self.theta.sin_cos();
        g.set(self.k, self.k, c);
        g.set(self.k, self.l, -s);
        g.set(self.l, self.k, s);
        g.set(self.l, self.l, c);
        g
    }

    /// `M <- M G` touching only columns `k` and `l`.
    pub fn apply_right(&self, m: &mut Matrix<T>) {
        let (s, c) = self.theta.sin_cos();
        for r in 0..m.rows() {
            let (a, b) = (m.get(r, self.k), m.get(r, self.l));
            m.set(r, self.k, a * c + b * s);
            m.set(r, self.l, b * c - a * s);
        }
    }
}

/// `H_{k,l}`: `+1` at `(k, l)`, `-1` at `(l, k)`.
pub fn skew_unit<T: Real>(n: usize, k: usize, l: usize) -> Matrix<T> {
    let mut h = Matrix::zeros(n, n);
    h.set(k, l, T::one());
    h.set(l, k, -T::one());
    h
}

/// Factor multiplying `Omega_kl H_kl` in the one-pair estimate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum EstimatorScale {
    /// `n (n - 1) / 2`, the number of pairs; the estimate is unbiased.
    #[default]
    PairCount,
    /// `n²`.
    Square,
}

impl EstimatorScale {
    pub fn factor<T: Real>(self, n: usize) -> T {
        match self {
            EstimatorScale::PairCount => T::from_usize_lossy(n * (n - 1) / 2),
            EstimatorScale::Square => T::from_usize_lossy(n * n),
        }
    }
}

/// A sampled pair, the bracket entry `Omega_kl` and the rotation it induces.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SkewSample<T> {
    pub rotation: GivensRotation<T>,
    pub omega_kl: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowState<T> {
    p: Matrix<T>,
    q_flow: Matrix<T>,
    n_param: Matrix<T>,
    eta: T,
    scale: EstimatorScale,
    iteration: u64,
}

impl<T: Real> FlowState<T> {
    pub fn new(p: Matrix<T>, q_flow: Matrix<T>, n_param: Matrix<T>, eta: T) -> Result<Self> {
        let n = p.rows();
        if !p.is_square() || q_flow.shape() != (n, n) || n_param.shape() != (n, n) {
            return invalid("P, Q and N must be square of one size");
        }
        if !(eta > T::zero()) {
            return invalid(format!("step size must be positive, got {eta}"));
        }
        let tol = T::tol(1e-12) * q_flow.max_abs().max(n_param.max_abs()).max(T::one());
        if !q_flow.is_symmetric(tol) || !n_param.is_symmetric(tol) {
            return invalid("Q and N must be symmetric");
        }
        if orthogonality_error(&p) > T::lit(1e-8) {
            return invalid("P must be orthogonal");
        }
        Ok(Self {
            p,
            q_flow,
            n_param,
            eta,
            scale: EstimatorScale::PairCount,
            iteration: 0,
        })
    }

    pub fn with_scale(mut self, scale: EstimatorScale) -> Self {
        self.scale = scale;
        self
    }

    /// Default step `0.05 / n²`.
    pub fn default_eta(n: usize) -> T {
        T::lit(0.05) / T::from_usize_lossy(n * n)
    }

    pub fn p(&self) -> &Matrix<T> {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.rows()
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn scale(&self) -> EstimatorScale {
        self.scale
    }

    /// `PᵀQP`.
    pub fn rotated_q(&self) -> Result<Matrix<T>> {
        self.p.t_matmul(&self.q_flow.matmul(&self.p)?)
    }

    /// `Omega = [PᵀQP, N]`.
    pub fn omega(&self) -> Result<Matrix<T>> {
        lie_bracket(&self.rotated_q()?, &self.n_param)
    }

    /// `tr(N PᵀQP)`, non-decreasing along the exact flow.
    pub fn energy(&self) -> Result<T> {
        Ok(self.n_param.matmul(&self.rotated_q()?)?.trace())
    }

    fn omega_entry(&self, k: usize, l: usize) -> Result<T> {
        let n = self.dim();
        let qp = self.q_flow.matmul(&self.p)?;
        // rows k and l of H = PᵀQP
        let h = |r: usize, j: usize| (0..n).map(|i| self.p.get(i, r) * qp.get(i, j)).sum::<T>();
        let mut v = T::zero();
        for j in 0..n {
            v += h(k, j) * self.n_param.get(j, l) - self.n_param.get(k, j) * h(j, l);
        }
        Ok(v)
    }

    fn reorthogonalize_if_drifting(&mut self) {
        if orthogonality_error(&self.p) > T::lit(REORTHO_DRIFT) {
            self.p = gram_schmidt_columns(&self.p);
        }
    }

    /// `P <- P exp(eta Omega)`.
    pub fn step_dense(&mut self) -> Result<()> {
        let omega = self.omega()?;
        let tol = T::tol(1e-9) * omega.max_abs().max(T::one());
        if !omega.is_skew(tol) {
            return Err(IapError::State("flow generator lost skew symmetry".into()));
        }
        self.p = self.p.matmul(&expm_skew(&omega, self.eta)?)?;
        self.reorthogonalize_if_drifting();
        self.iteration += 1;
        Ok(())
    }

    /// Uniform pair `k < l` and the rotation `exp(eta c Omega_kl H_kl)`.
    pub fn sample_skew_estimate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SkewSample<T>> {
        let n = self.dim();
        if n < 2 {
            return invalid("stochastic flow needs n >= 2");
        }
        let k = rng.random_range(0..n);
        let mut l = rng.random_range(0..n - 1);
        if l >= k {
            l += 1;
        }
        let (k, l) = (k.min(l), k.max(l));
        self.skew_estimate_at(k, l)
    }

    /// The estimate for a fixed pair `k < l`.
    pub fn skew_estimate_at(&self, k: usize, l: usize) -> Result<SkewSample<T>> {
        if k >= l || l >= self.dim() {
            return invalid(format!("pair ({k}, {l}) invalid for n = {}", self.dim()));
        }
        let omega_kl = self.omega_entry(k, l)?;
        // exp(a H_kl) is the column rotation by -a
        let a = self.eta * self.scale.factor::<T>(self.dim()) * omega_kl;
        Ok(SkewSample {
            rotation: GivensRotation::new(k, l, -a)?,
            omega_kl,
        })
    }

    /// `P <- P G_kl(theta)` for a sampled pair.
    pub fn step_givens<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<SkewSample<T>> {
        let sample = self.sample_skew_estimate(rng)?;
        sample.rotation.apply_right(&mut self.p);
        self.iteration += 1;
        Ok(sample)
    }
}

pub fn flow_step_dense<T: Real>(state: &mut FlowState<T>) -> Result<()> {
    state.step_dense()
}

pub fn sample_skew_estimate<T: Real, R: Rng + ?Sized>(
    state: &FlowState<T>,
    rng: &mut R,
) -> Result<SkewSample<T>> {
    state.sample_skew_estimate(rng)
}

pub fn stochastic_givens_step<T: Real, R: Rng + ?Sized>(
    state: &mut FlowState<T>,
    rng: &mut R,
) -> Result<SkewSample<T>> {
    state.step_givens(rng)
}

/// Orthonormalizes the columns of `m` (modified Gram-Schmidt).
pub fn gram_schmidt_columns<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut t = m.transpose();
    for i in 0..t.rows() {
        for j in 0..i {
            let d: T = (0..t.cols()).map(|c| t.get(i, c) * t.get(j, c)).sum();
            for c in 0..t.cols() {
                let v = t.get(i, c) - d * t.get(j, c);
                t.set(i, c, v);
            }
        }
        let norm = t.row(i).iter().map(|&x| x * x).sum::<T>().sqrt();
        for x in t.row_mut(i) {
            *x /= norm;
        }
    }
    t.transpose()
}

/// Random orthogonal matrix from the Gram-Schmidt of a Gaussian draw.
pub fn random_orthogonal<T: Real>(n: usize, stream: &RngStream) -> Result<Matrix<T>> {
    Ok(gram_schmidt_columns(&gaussian_matrix(n, n, stream)?))
}

/// The permutation `P` is close to, as `perm[col] = row` of its unit
/// entries, when every other entry is below `tol` in magnitude.
pub fn nearest_permutation<T: Real>(p: &Matrix<T>, tol: T) -> Option<Vec<usize>> {
    let n = p.rows();
    let mut perm = vec![usize::MAX; n];
    let mut used = vec![false; n];
    for c in 0..n {
        for r in 0..n {
            let v = p.get(r, c).abs();
            if v > T::lit(0.5) {
                if used[r] || perm[c] != usize::MAX {
                    return None;
                }
                perm[c] = r;
                used[r] = true;
            } else if v >= tol {
                return None;
            }
        }
        if perm[c] == usize::MAX {
            return None;
        }
    }
    Some(perm)
}

/// Settings of [`sorting_projection`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SortingOptions {
    pub eta: f64,
    /// Steps between convergence checks.
    pub check_every: usize,
    /// Seed of the random orthogonal starting point.
    pub seed: u64,
}

impl Default for SortingOptions {
    fn default() -> Self {
        Self {
            eta: 0.2,
            check_every: 25,
            seed: 0x5eed,
        }
    }
}

/// Flow parameters `Q = diag(1..n)`, `N = diag(normalized scores)`.
pub fn sorting_flow<T: Real>(scores: &[T], eta: T, seed: u64) -> Result<FlowState<T>> {
    let n = scores.len();
    let q = Matrix::diag(&(1..=n).map(T::from_usize_lossy).collect::<Vec<_>>());
    let p0 = random_orthogonal(n, &RngStream::new(seed, n as u64))?;
    FlowState::new(p0, q, Matrix::diag(&normalize_scores(scores)?), eta)
}

/// Min-max scaling to `[0, 1]` with tied entries separated so that the
/// lower index ranks higher.
fn normalize_scores<T: Real>(scores: &[T]) -> Result<Vec<T>> {
    if let Some(x) = scores.iter().find(|x| !x.is_finite()) {
        return invalid(format!("non-finite score {x}"));
    }
    let lo = scores.iter().copied().fold(T::infinity(), T::min);
    let hi = scores.iter().copied().fold(T::neg_infinity(), T::max);
    let span = if hi > lo { hi - lo } else { T::one() };
    let mut out: Vec<T> = scores.iter().map(|&x| (x - lo) / span).collect();
    let jitter = T::lit(TIE_JITTER);
    for i in 0..out.len() {
        for j in 0..i {
            if scores[j] == scores[i] {
                out[i] -= jitter;
            }
        }
    }
    Ok(out)
}

/// Permutation matrix `Pi` with `Pi s` sorted in descending order, read off
/// the converged dense flow.
pub fn sorting_projection<T: Real>(scores: &[T], budget: usize) -> Result<Matrix<T>> {
    sorting_projection_with(scores, budget, SortingOptions::default())
}

pub fn sorting_projection_with<T: Real>(
    scores: &[T],
    budget: usize,
    options: SortingOptions,
) -> Result<Matrix<T>> {
    Ok(sort_with_flow(scores, budget, options)?.permutation)
}

/// A converged sorting flow.
#[derive(Clone, Debug, PartialEq)]
pub struct SortingRun<T> {
    pub permutation: Matrix<T>,
    /// Dense steps taken until the convergence check passed.
    pub steps: usize,
}

pub fn sort_with_flow<T: Real>(
    scores: &[T],
    budget: usize,
    options: SortingOptions,
) -> Result<SortingRun<T>> {
    let n = scores.len();
    if n == 0 {
        return invalid("cannot sort an empty score vector");
    }
    if n == 1 {
        return Ok(SortingRun {
            permutation: Matrix::identity(1),
            steps: 0,
        });
    }
    let mut state = sorting_flow(scores, T::lit(options.eta), options.seed)?;
    let check = options.check_every.max(1);
    for step in 1..=budget {
        state.step_dense()?;
        if step % check == 0 || step == budget {
            if let Some(perm) = nearest_permutation(state.p(), T::lit(CONVERGED_OFF_PATTERN)) {
                let mut pi = Matrix::zeros(n, n);
                for (col, &row) in perm.iter().enumerate() {
                    pi.set(n - 1 - row, col, T::one());
                }
                return Ok(SortingRun {
                    permutation: pi,
                    steps: step,
                });
            }
        }
    }
    Err(IapError::Convergence(format!(
        "sorting flow did not settle within {budget} steps"
    )))
}

/// Row order of a permutation matrix: `out[i]` is the input index placed
/// at position `i`.
pub fn permutation_order<T: Real>(pi: &Matrix<T>) -> Vec<usize> {
    (0..pi.rows())
        .map(|r| {
            (0..pi.cols())
                .find(|&c| pi.get(r, c) > T::lit(0.5))
                .expect("permutation row")
        })
        .collect()
}
