//! Multi-head softmax attention and determinant-based head diversity.
//!
//! Heads are compared either through a kernel on their flattened outputs
//! or through the distribution-level kernel between their attention rows;
//! either Gram matrix feeds `det` / `logdet`.

use crate::attention::PairKernel;
use crate::error::{invalid, Result};
use crate::numerics::{
    det_psd, dot, gaussian_matrix, logdet_pd, softmax_vec, spd_inverse, Matrix, RngStream,
};
use crate::scalar::Real;

/// Ridge added to the Gram matrix before taking the log-determinant.
pub const LOGDET_RIDGE: f64 = 1e-8;

/// Tolerance on row sums of attention distributions.
pub const STOCHASTIC_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

/// `N_h` heads of equal shape plus the output projection `W^O`
/// (`N_h d_out x D_out`).
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSet<T> {
    heads: Vec<Head<T>>,
    w_o: Matrix<T>,
}

impl<T: Real> HeadSet<T> {
    pub fn new(heads: Vec<Head<T>>, w_o: Matrix<T>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return invalid("head set needs at least one head");
        };
        let (d_in, d_k) = first.w_q.shape();
        let d_out = first.w_v.cols();
        for (i, h) in heads.iter().enumerate() {
            if h.w_q.shape() != (d_in, d_k)
                || h.w_k.shape() != (d_in, d_k)
                || h.w_v.shape() != (d_in, d_out)
            {
                return invalid(format!("head {i} does not share the shapes of head 0"));
            }
        }
        if w_o.rows() != heads.len() * d_out {
            return invalid(format!(
                "W^O has {} rows, expected N_h * d_out = {}",
                w_o.rows(),
                heads.len() * d_out
            ));
        }
        Ok(Self { heads, w_o })
    }

    /// Gaussian weights with `1/sqrt(fan_in)` scaling.
    pub fn random(
        n_heads: usize,
        d_in: usize,
        d_k: usize,
        d_out: usize,
        d_model: usize,
        stream: &RngStream,
    ) -> Result<Self> {
        let s_in = T::one() / T::from_usize_lossy(d_in).sqrt();
        let heads = (0..n_heads)
            .map(|h| {
                let s = stream.substream(h as u64);
                Ok(Head {
                    w_q: gaussian_matrix::<T>(d_in, d_k, &s.substream(0))?.scale(s_in),
                    w_k: gaussian_matrix::<T>(d_in, d_k, &s.substream(1))?.scale(s_in),
                    w_v: gaussian_matrix::<T>(d_in, d_out, &s.substream(2))?.scale(s_in),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let s_o = T::one() / T::from_usize_lossy(n_heads * d_out).sqrt();
        let w_o =
            gaussian_matrix::<T>(n_heads * d_out, d_model, &stream.substream(u64::MAX))?.scale(s_o);
        Self::new(heads, w_o)
    }

    pub fn heads(&self) -> &[Head<T>] {
        &self.heads
    }

    pub fn w_o(&self) -> &Matrix<T> {
        &self.w_o
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.heads[0].w_q.rows()
    }

    pub fn key_dim(&self) -> usize {
        self.heads[0].w_q.cols()
    }

    pub fn head_output_dim(&self) -> usize {
        self.heads[0].w_v.cols()
    }
}

/// Row-stochastic `softmax((X W_Q)(Y W_K)ᵀ / sqrt(d_k))` and the head
/// output `A (Y W_V)`.
pub fn head_attention<T: Real>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    head: &Head<T>,
) -> Result<(Matrix<T>, Matrix<T>)> {
    if x.cols() != head.w_q.rows() || y.cols() != head.w_k.rows() {
        return invalid(format!(
            "inputs of width {} and {} do not match head input {}",
            x.cols(),
            y.cols(),
            head.w_q.rows()
        ));
    }
    let q = x.matmul(&head.w_q)?;
    let k = y.matmul(&head.w_k)?;
    let v = y.matmul(&head.w_v)?;
    let scale = T::one() / T::from_usize_lossy(head.w_q.cols()).sqrt();
    let logits = q.matmul_t(&k)?.scale(scale);
    let mut rows = Vec::with_capacity(logits.rows() * logits.cols());
    for r in logits.row_iter() {
        rows.extend(softmax_vec(r)?);
    }
    let a = Matrix::from_vec(logits.rows(), logits.cols(), rows)?;
    let out = a.matmul(&v)?;
    Ok((a, out))
}

/// Per-head outputs `H^(i)` (each `T x d_out`).
pub fn head_outputs<T: Real>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    heads: &HeadSet<T>,
) -> Result<Vec<Matrix<T>>> {
    heads
        .heads
        .iter()
        .map(|h| Ok(head_attention(x, y, h)?.1))
        .collect()
}

/// Per-head attention matrices (rows are distributions over `Y`).
pub fn head_attention_matrices<T: Real>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    heads: &HeadSet<T>,
) -> Result<Vec<Matrix<T>>> {
    heads
        .heads
        .iter()
        .map(|h| Ok(head_attention(x, y, h)?.0))
        .collect()
}

/// `[H^(1), ..., H^(N_h)] W^O`.
pub fn multi_head_attention<T: Real>(
    x: &Matrix<T>,
    y: &Matrix<T>,
    heads: &HeadSet<T>,
) -> Result<Matrix<T>> {
    let outs = head_outputs(x, y, heads)?;
    let mut cat = outs[0].clone();
    for h in &outs[1..] {
        cat = cat.hconcat(h)?;
    }
    cat.matmul(&heads.w_o)
}

/// Gaussian kernel `exp(-|a - b|² / (2 sigma²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rbf<T> {
    pub bandwidth: T,
}

impl<T: Real> PairKernel<T> for Rbf<T> {
    fn eval(&self, u: &[T], v: &[T]) -> Result<T> {
        if u.len() != v.len() {
            return invalid(format!("rbf inputs of length {} and {}", u.len(), v.len()));
        }
        let d2: T = u.iter().zip(v).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok((-d2 / (T::lit(2.0) * self.bandwidth * self.bandwidth)).exp())
    }
}

/// Kernel between flattened head outputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GramKernel<T> {
    /// RBF; `None` picks the median pairwise distance.
    Rbf(Option<T>),
    Linear,
}

/// Symmetric PSD matrix of pairwise head-kernel values.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadGram<T> {
    matrix: Matrix<T>,
    /// Resolved RBF bandwidth, if the Gram came from an RBF kernel.
    bandwidth: Option<T>,
}

impl<T: Real> HeadGram<T> {
    pub fn from_matrix(matrix: Matrix<T>) -> Result<Self> {
        if !matrix.is_square() || matrix.rows() < 2 {
            return invalid(format!(
                "Gram matrix must be square with >= 2 heads, got {:?}",
                matrix.shape()
            ));
        }
        let tol = T::tol(1e-10) * matrix.max_abs().max(T::one());
        if !matrix.is_symmetric(tol) {
            return invalid("Gram matrix must be symmetric");
        }
        Ok(Self {
            matrix,
            bandwidth: None,
        })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    pub fn bandwidth(&self) -> Option<T> {
        self.bandwidth
    }

    pub fn len(&self) -> usize {
        self.matrix.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.rows() == 0
    }
}

fn flatten_all<T: Real>(outputs: &[Matrix<T>]) -> Result<Vec<&[T]>> {
    if outputs.len() < 2 {
        return invalid(format!(
            "head Gram needs at least 2 heads, got {}",
            outputs.len()
        ));
    }
    let shape = outputs[0].shape();
    if outputs.iter().any(|o| o.shape() != shape) {
        return invalid("all head outputs must share one shape");
    }
    Ok(outputs.iter().map(|o| o.as_slice()).collect())
}

/// Median pairwise Euclidean distance; 1 when all inputs coincide.
pub fn median_bandwidth<T: Real>(points: &[&[T]]) -> T {
    let mut d = Vec::new();
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(
                points[i]
                    .iter()
                    .zip(points[j])
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum::<T>()
                    .sqrt(),
            );
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / T::lit(2.0)
    };
    if med > T::zero() {
        med
    } else {
        T::one()
    }
}

pub fn head_gram<T: Real>(outputs: &[Matrix<T>], kernel: GramKernel<T>) -> Result<HeadGram<T>> {
    let flat = flatten_all(outputs)?;
    let n = flat.len();
    let (matrix, bandwidth) = match kernel {
        GramKernel::Linear => (Matrix::from_fn(n, n, |i, j| dot(flat[i], flat[j])), None),
        GramKernel::Rbf(bw) => {
            let bandwidth = bw.unwrap_or_else(|| median_bandwidth(&flat));
            let k = Rbf { bandwidth };
            let mut m = Matrix::identity(n);
            for i in 0..n {
                for j in i + 1..n {
                    let v = k.eval(flat[i], flat[j])?;
                    m.set(i, j, v);
                    m.set(j, i, v);
                }
            }
            (m, Some(bandwidth))
        }
    };
    Ok(HeadGram { matrix, bandwidth })
}

/// `Div = det(K)`.
pub fn diversity_det<T: Real>(gram: &HeadGram<T>) -> Result<T> {
    det_psd(&gram.matrix)
}

fn ridged<T: Real>(gram: &HeadGram<T>) -> Matrix<T> {
    let n = gram.len();
    gram.matrix
        .add(&Matrix::identity(n).scale(T::lit(LOGDET_RIDGE)))
        .expect("same shape")
}

/// `log det(K + delta I)`.
pub fn log_diversity<T: Real>(gram: &HeadGram<T>) -> Result<T> {
    logdet_pd(&ridged(gram))
}

/// Gradient of [`log_diversity`] with respect to the Gram entries,
/// `(K + delta I)⁻¹`.
pub fn log_diversity_grad<T: Real>(gram: &HeadGram<T>) -> Result<Matrix<T>> {
    spd_inverse(&ridged(gram))
}

/// Gradient of [`log_diversity`] with respect to each head's flattened
/// output, for an RBF Gram at fixed bandwidth: `tr((K + delta I)⁻¹ dK)`.
pub fn log_diversity_grad_outputs<T: Real>(
    outputs: &[Matrix<T>],
    bandwidth: T,
) -> Result<Vec<Matrix<T>>> {
    let gram = head_gram(outputs, GramKernel::Rbf(Some(bandwidth)))?;
    let inv = log_diversity_grad(&gram)?;
    let s2 = bandwidth * bandwidth;
    let n = outputs.len();
    let mut grads = Vec::with_capacity(n);
    for a in 0..n {
        let mut g = Matrix::zeros(outputs[a].rows(), outputs[a].cols());
        for b in 0..n {
            if a == b {
                continue;
            }
            let c = T::lit(2.0) * inv.get(a, b) * gram.matrix.get(a, b) / s2;
            for ((gi, &ha), &hb) in g
                .as_mut_slice()
                .iter_mut()
                .zip(outputs[a].as_slice())
                .zip(outputs[b].as_slice())
            {
                *gi -= c * (ha - hb);
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Which way the diversity term enters the joint loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum DiversitySign {
    /// `task - lambda logdet`: minimizing the loss spreads the heads.
    #[default]
    Encourage,
    /// `task + lambda logdet`.
    Penalize,
}

pub fn joint_loss<T: Real>(
    task_loss: T,
    gram: &HeadGram<T>,
    lambda: T,
    sign: DiversitySign,
) -> Result<T> {
    if !(lambda >= T::zero()) {
        return invalid(format!("lambda must be >= 0, got {lambda}"));
    }
    if lambda == T::zero() {
        return Ok(task_loss);
    }
    let ld = log_diversity(gram)?;
    Ok(match sign {
        DiversitySign::Encourage => task_loss - lambda * ld,
        DiversitySign::Penalize => task_loss + lambda * ld,
    })
}

fn check_distribution<T: Real>(p: &[T], len: usize) -> Result<()> {
    if p.len() != len {
        return invalid(format!(
            "distribution over {} tokens, expected {len}",
            p.len()
        ));
    }
    let total: T = p.iter().copied().sum();
    if p.iter().any(|&x| !(x >= T::zero())) || (total - T::one()).abs() > T::tol(STOCHASTIC_TOL) {
        return invalid(format!("not a probability vector (sum {total})"));
    }
    Ok(())
}

/// `sum_a sum_b p1_a p2_b K(x_a, x_b)` over the rows of `x`.
pub fn cross_similarity<T: Real>(
    p1: &[T],
    p2: &[T],
    x: &Matrix<T>,
    kernel: &impl PairKernel<T>,
) -> Result<T> {
    check_distribution(p1, x.rows())?;
    check_distribution(p2, x.rows())?;
    let mut total = T::zero();
    for (a, &pa) in p1.iter().enumerate() {
        if pa == T::zero() {
            continue;
        }
        for (b, &pb) in p2.iter().enumerate() {
            if pb != T::zero() {
                total += pa * pb * kernel.eval(x.row(a), x.row(b))?;
            }
        }
    }
    Ok(total)
}

/// Squared kernel distance (MMD²) between two attention rows.
pub fn head_distance_sq<T: Real>(
    p1: &[T],
    p2: &[T],
    x: &Matrix<T>,
    kernel: &impl PairKernel<T>,
) -> Result<T> {
    Ok(
        cross_similarity(p1, p1, x, kernel)? + cross_similarity(p2, p2, x, kernel)?
            - T::lit(2.0) * cross_similarity(p1, p2, x, kernel)?,
    )
}

/// Mean row-wise cross-similarity of two attention matrices.
pub fn head_kernel<T: Real>(
    a1: &Matrix<T>,
    a2: &Matrix<T>,
    x: &Matrix<T>,
    kernel: &impl PairKernel<T>,
) -> Result<T> {
    if a1.shape() != a2.shape() {
        return invalid(format!(
            "attention shapes {:?} and {:?} differ",
            a1.shape(),
            a2.shape()
        ));
    }
    let mut total = T::zero();
    for i in 0..a1.rows() {
        total += cross_similarity(a1.row(i), a2.row(i), x, kernel)?;
    }
    Ok(total / T::from_usize_lossy(a1.rows()))
}

/// Gram of [`head_kernel`] values between every pair of heads.
pub fn distribution_gram<T: Real>(
    attn: &[Matrix<T>],
    x: &Matrix<T>,
    kernel: &impl PairKernel<T>,
) -> Result<HeadGram<T>> {
    let n = attn.len();
    if n < 2 {
        return invalid(format!("head Gram needs at least 2 heads, got {n}"));
    }
    let mut m = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = head_kernel(&attn[i], &attn[j], x, kernel)?;
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    Ok(HeadGram {
        matrix: m,
        bandwidth: None,
    })
}
