//! Implicit attention: patch scoring and selection (rank modes), learned
//! compression (trans mode) and the explicit brute-force reference.
//!
//! Nothing on the implicit path forms an `L x L` matrix; products are
//! bracketed so every intermediate is `L x m` or smaller.

mod cache;

pub use cache::{cross_attention_step, feature_cost, CrossStepOutput, KeyCache};

use rand::Rng;

use crate::error::{invalid, IapError, Result};
use crate::features::{ExactKernel, FeatureMap, FeatureMapSpec, Role};
use crate::numerics::{dot, Matrix, MulCounter};
use crate::scalar::Real;

/// Largest `L` the explicit reference will materialize by default.
pub const BRUTE_FORCE_CAP: usize = 8192;

/// Variance floor of [`layer_norm_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMode {
    /// Zero the rows of unselected patches.
    RankMask,
    /// Keep only the selected rows.
    RankCompress,
    /// Learned `l x L` projection of the attention matrix.
    Trans,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionRule {
    TopL,
    SoftmaxSample,
}

/// Row vector aggregating attention rows into patch scores.
#[derive(Clone, Debug, PartialEq)]
pub enum ScoreRow<T> {
    Ones,
    Learned(Vec<T>),
}

impl<T: Real> ScoreRow<T> {
    fn weights(&self, len: usize) -> Result<Vec<T>> {
        match self {
            ScoreRow::Ones => Ok(vec![T::one(); len]),
            ScoreRow::Learned(w) if w.len() == len => Ok(w.clone()),
            ScoreRow::Learned(w) => {
                invalid(format!("score row has length {}, expected {len}", w.len()))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig<T> {
    pub features: FeatureMapSpec,
    pub mode: AttentionMode,
    pub l: usize,
    pub selection: SelectionRule,
    pub score_row: ScoreRow<T>,
    /// Divide attention rows by their sums.
    pub normalize: bool,
    /// Trans mode only: add `P V` and layer-normalize each output row.
    pub residual_layernorm: bool,
}

impl<T: Real> AttentionConfig<T> {
    /// Rank mode with top-`l` selection and un-normalized scores.
    pub fn rank(features: FeatureMapSpec, mode: AttentionMode, l: usize) -> Self {
        Self {
            features,
            mode,
            l,
            selection: SelectionRule::TopL,
            score_row: ScoreRow::Ones,
            normalize: mode == AttentionMode::Trans,
            residual_layernorm: false,
        }
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        if self.l == 0 || self.l > len {
            return invalid(format!("l = {} must lie in [1, {len}]", self.l));
        }
        if self.residual_layernorm && self.mode != AttentionMode::Trans {
            return invalid("residual + layer norm only applies to trans mode");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankResult<T> {
    pub scores: Vec<T>,
    /// Ascending, distinct.
    pub selected: Vec<usize>,
    pub mask: Vec<bool>,
}

impl<T: Real> RankResult<T> {
    pub fn new(scores: Vec<T>, mut selected: Vec<usize>) -> Result<Self> {
        selected.sort_unstable();
        let mut mask = vec![false; scores.len()];
        for &i in &selected {
            if i >= scores.len() || mask[i] {
                return invalid(format!("selection index {i} out of range or repeated"));
            }
            mask[i] = true;
        }
        Ok(Self {
            scores,
            selected,
            mask,
        })
    }
}

/// Kernel evaluated pairwise by the explicit reference.
pub trait PairKernel<T> {
    fn eval(&self, u: &[T], v: &[T]) -> Result<T>;
}

impl<T: Real> PairKernel<T> for ExactKernel {
    fn eval(&self, u: &[T], v: &[T]) -> Result<T> {
        ExactKernel::eval(self, u, v)
    }
}

/// The kernel `phi(u)ᵀ phi(v)` realized by a drawn feature map.
impl<T: Real> PairKernel<T> for FeatureMap<T> {
    fn eval(&self, u: &[T], v: &[T]) -> Result<T> {
        self.estimate(u, v)
    }
}

impl<T, F: Fn(&[T], &[T]) -> T> PairKernel<T> for F {
    fn eval(&self, u: &[T], v: &[T]) -> Result<T> {
        Ok(self(u, v))
    }
}

/// Explicit `L x L` matrix `A(i, j) = K(q_i, k_j)`.
pub fn attention_matrix<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    kernel: &impl PairKernel<T>,
    cap: usize,
) -> Result<Matrix<T>> {
    if q.cols() != k.cols() {
        return invalid(format!(
            "query width {} and key width {} differ",
            q.cols(),
            k.cols()
        ));
    }
    if q.rows().max(k.rows()) > cap {
        return Err(IapError::ResourceGuard(format!(
            "brute-force attention with L = {} exceeds the cap of {cap}",
            q.rows().max(k.rows())
        )));
    }
    let mut data = Vec::with_capacity(q.rows() * k.rows());
    for qi in q.row_iter() {
        for kj in k.row_iter() {
            data.push(kernel.eval(qi, kj)?);
        }
    }
    Matrix::from_vec(q.rows(), k.rows(), data)
}

/// Reference `A V` (or `D⁻¹ A V` when `normalized`) with `A` materialized.
pub fn brute_force_attention<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    kernel: &impl PairKernel<T>,
    normalized: bool,
) -> Result<Matrix<T>> {
    brute_force_attention_capped(q, k, v, kernel, normalized, BRUTE_FORCE_CAP)
}

pub fn brute_force_attention_capped<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    kernel: &impl PairKernel<T>,
    normalized: bool,
    cap: usize,
) -> Result<Matrix<T>> {
    if k.rows() != v.rows() {
        return invalid(format!("{} keys but {} values", k.rows(), v.rows()));
    }
    let a = attention_matrix(q, k, kernel, cap)?;
    let mut out = a.matmul(v)?;
    if normalized {
        for (i, d) in a.row_sums().into_iter().enumerate() {
            divide_row(&mut out, i, d)?;
        }
    }
    Ok(out)
}

/// Reference column scores `(1/L) pᵀ A` (or `(1/L) pᵀ D⁻¹ A`).
pub fn brute_force_scores<T: Real>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    kernel: &impl PairKernel<T>,
    row: &ScoreRow<T>,
    normalized: bool,
) -> Result<Vec<T>> {
    let a = attention_matrix(q, k, kernel, BRUTE_FORCE_CAP)?;
    let mut p = row.weights(q.rows())?;
    if normalized {
        for (pi, d) in p.iter_mut().zip(a.row_sums()) {
            *pi /= nonzero(d)?;
        }
    }
    let inv_l = T::one() / T::from_usize_lossy(q.rows());
    Ok(a.vecmat(&p)?.into_iter().map(|x| x * inv_l).collect())
}

fn nonzero<T: Real>(d: T) -> Result<T> {
    if !(d.abs() > T::min_positive_value()) || !d.is_finite() {
        return Err(IapError::Degenerate(format!(
            "attention row sum {d} cannot normalize"
        )));
    }
    Ok(d)
}

fn divide_row<T: Real>(m: &mut Matrix<T>, i: usize, d: T) -> Result<()> {
    let d = nonzero(d)?;
    for x in m.row_mut(i) {
        *x /= d;
    }
    Ok(())
}

/// Row sums `D = Q′ (K′ᵀ 1)` of the implicit attention matrix.
pub fn implicit_row_sums<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    counter: &mut MulCounter,
) -> Result<Vec<T>> {
    check_widths(q_prime, k_prime)?;
    let k_sum = k_prime.column_sums();
    counter.add(q_prime.rows() * q_prime.cols());
    q_prime.matvec(&k_sum)
}

fn check_widths<T: Real>(q_prime: &Matrix<T>, k_prime: &Matrix<T>) -> Result<()> {
    if q_prime.cols() != k_prime.cols() {
        return invalid(format!(
            "feature widths differ: Q′ has {}, K′ has {}",
            q_prime.cols(),
            k_prime.cols()
        ));
    }
    Ok(())
}

/// `r = (1/L) (p Q′) K′ᵀ`, evaluated left to right.
pub fn rank_scores<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    row: &ScoreRow<T>,
) -> Result<Vec<T>> {
    rank_scores_counted(q_prime, k_prime, row, false, &mut MulCounter::new())
}

/// Scores of the row-normalized attention matrix, `(1/L) (p D⁻¹ Q′) K′ᵀ`.
pub fn rank_scores_normalized<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    row: &ScoreRow<T>,
) -> Result<Vec<T>> {
    rank_scores_counted(q_prime, k_prime, row, true, &mut MulCounter::new())
}

pub fn rank_scores_counted<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    row: &ScoreRow<T>,
    normalized: bool,
    counter: &mut MulCounter,
) -> Result<Vec<T>> {
    check_widths(q_prime, k_prime)?;
    let mut p = row.weights(q_prime.rows())?;
    if normalized {
        for (pi, d) in p
            .iter_mut()
            .zip(implicit_row_sums(q_prime, k_prime, counter)?)
        {
            *pi /= nonzero(d)?;
        }
    }
    let z = q_prime.vecmat(&p)?;
    counter.add(q_prime.rows() * q_prime.cols());
    let inv_l = T::one() / T::from_usize_lossy(q_prime.rows());
    let r = k_prime.matvec(&z)?;
    counter.add(k_prime.rows() * k_prime.cols());
    Ok(r.into_iter().map(|x| x * inv_l).collect())
}

fn check_scores<T: Real>(r: &[T], l: usize) -> Result<()> {
    if l == 0 || l > r.len() {
        return invalid(format!("cannot select {l} of {} patches", r.len()));
    }
    if let Some(x) = r.iter().find(|x| !x.is_finite()) {
        return invalid(format!("non-finite score {x}"));
    }
    Ok(())
}

/// Indices of the `l` largest scores, ties toward the lower index, ascending.
pub fn select_top_l<T: Real>(r: &[T], l: usize) -> Result<Vec<usize>> {
    check_scores(r, l)?;
    let mut idx: Vec<usize> = (0..r.len()).collect();
    idx.sort_by(|&a, &b| r[b].partial_cmp(&r[a]).expect("finite").then(a.cmp(&b)));
    idx.truncate(l);
    idx.sort_unstable();
    Ok(idx)
}

/// Draws `l` distinct indices sequentially, each with probability
/// proportional to `exp(r_i)` among the remaining ones. Returned in draw order.
pub fn softmax_sample_selection<T: Real, R: Rng + ?Sized>(
    r: &[T],
    l: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    check_scores(r, l)?;
    let mut remaining: Vec<usize> = (0..r.len()).collect();
    let mut out = Vec::with_capacity(l);
    while out.len() < l {
        let max = remaining
            .iter()
            .map(|&i| r[i])
            .fold(T::neg_infinity(), T::max);
        let weights: Vec<f64> = remaining
            .iter()
            .map(|&i| (r[i] - max).exp().to_f64_lossy())
            .collect();
        let total: f64 = weights.iter().sum();
        let mut u = rng.random::<f64>() * total;
        let mut pick = remaining.len() - 1;
        for (slot, w) in weights.iter().enumerate() {
            if u < *w {
                pick = slot;
                break;
            }
            u -= w;
        }
        out.push(remaining.remove(pick));
    }
    Ok(out)
}

/// Selection from scores by the configured rule.
pub fn select<T: Real, R: Rng + ?Sized>(
    r: Vec<T>,
    l: usize,
    rule: SelectionRule,
    rng: &mut R,
) -> Result<RankResult<T>> {
    let selected = match rule {
        SelectionRule::TopL => select_top_l(&r, l)?,
        SelectionRule::SoftmaxSample => softmax_sample_selection(&r, l, rng)?,
    };
    RankResult::new(r, selected)
}

pub fn apply_selection<T: Real>(
    v: &Matrix<T>,
    result: &RankResult<T>,
    mode: AttentionMode,
) -> Result<Matrix<T>> {
    if result.mask.len() != v.rows() {
        return invalid(format!(
            "mask length {} does not match {} rows",
            result.mask.len(),
            v.rows()
        ));
    }
    match mode {
        AttentionMode::RankMask => {
            let mut out = v.clone();
            for (i, keep) in result.mask.iter().enumerate() {
                if !keep {
                    out.row_mut(i).fill(T::zero());
                }
            }
            Ok(out)
        }
        AttentionMode::RankCompress => v.select_rows(&result.selected),
        AttentionMode::Trans => invalid("apply_selection needs a rank mode"),
    }
}

/// Bracketing of the trans-mode product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TransOrder {
    /// `((P Q′) K′ᵀ) V`
    ProjectFirst,
    /// `P (Q′ (K′ᵀ V))`
    ValuesFirst,
}

impl TransOrder {
    /// Cheaper order for `l` compressed rows and value width `d_v`.
    pub fn for_dims(l: usize, d_v: usize) -> Self {
        if l < d_v {
            TransOrder::ProjectFirst
        } else {
            TransOrder::ValuesFirst
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct TransOptions {
    pub normalized: bool,
    pub residual_layernorm: bool,
}

/// `P A V` for the implicit `A = Q′ K′ᵀ`, in the cheaper bracketing.
pub fn iap_trans<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    v: &Matrix<T>,
    p: &Matrix<T>,
    options: TransOptions,
) -> Result<Matrix<T>> {
    let order = TransOrder::for_dims(p.rows(), v.cols());
    iap_trans_counted(
        q_prime,
        k_prime,
        v,
        p,
        options,
        order,
        &mut MulCounter::new(),
    )
}

pub fn iap_trans_counted<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    v: &Matrix<T>,
    p: &Matrix<T>,
    options: TransOptions,
    order: TransOrder,
    counter: &mut MulCounter,
) -> Result<Matrix<T>> {
    check_widths(q_prime, k_prime)?;
    if k_prime.rows() != v.rows() {
        return invalid(format!("{} keys but {} values", k_prime.rows(), v.rows()));
    }
    if p.cols() != q_prime.rows() {
        return invalid(format!(
            "projection has {} columns, expected {}",
            p.cols(),
            q_prime.rows()
        ));
    }
    let p_eff = if options.normalized {
        let d = implicit_row_sums(q_prime, k_prime, counter)?;
        let mut scaled = p.clone();
        for i in 0..scaled.rows() {
            for (x, &dj) in scaled.row_mut(i).iter_mut().zip(&d) {
                *x /= nonzero(dj)?;
            }
        }
        counter.add(p.rows() * p.cols());
        scaled
    } else {
        p.clone()
    };
    let mut out = match order {
        TransOrder::ProjectFirst => {
            let pq = counter.matmul(&p_eff, q_prime)?;
            let pqk = pq.matmul_t(k_prime)?;
            counter.add(pq.rows() * pq.cols() * k_prime.rows());
            counter.matmul(&pqk, v)?
        }
        TransOrder::ValuesFirst => {
            let kv = counter.t_matmul(k_prime, v)?;
            let qkv = counter.matmul(q_prime, &kv)?;
            counter.matmul(&p_eff, &qkv)?
        }
    };
    if options.residual_layernorm {
        out = out.add(&counter.matmul(p, v)?)?;
        layer_norm_rows(&mut out);
    }
    Ok(out)
}

/// Centers each row and scales it to unit variance.
pub fn layer_norm_rows<T: Real>(m: &mut Matrix<T>) {
    let n = T::from_usize_lossy(m.cols());
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
        let inv = T::one() / (var + T::lit(LAYER_NORM_EPS)).sqrt();
        for x in row.iter_mut() {
            *x = (*x - mean) * inv;
        }
    }
}

/// Full implicit attention `Q′ (K′ᵀ V)`, optionally row-normalized.
pub fn implicit_attention<T: Real>(
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    v: &Matrix<T>,
    normalized: bool,
) -> Result<Matrix<T>> {
    check_widths(q_prime, k_prime)?;
    let mut out = q_prime.matmul(&k_prime.t_matmul(v)?)?;
    if normalized {
        for (i, d) in implicit_row_sums(q_prime, k_prime, &mut MulCounter::new())?
            .into_iter()
            .enumerate()
        {
            divide_row(&mut out, i, d)?;
        }
    }
    Ok(out)
}

/// Output of one attention forward.
#[derive(Clone, Debug, PartialEq)]
pub enum AttentionOutput<T> {
    Rank {
        result: RankResult<T>,
        values: Matrix<T>,
    },
    Trans(Matrix<T>),
}

/// Applies `map` to queries and keys and runs the configured mode.
/// `p_kl` is required in trans mode and must have `config.l` rows.
pub fn iap_forward<T: Real, R: Rng + ?Sized>(
    config: &AttentionConfig<T>,
    map: &FeatureMap<T>,
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    p_kl: Option<&Matrix<T>>,
    rng: &mut R,
    counter: &mut MulCounter,
) -> Result<AttentionOutput<T>> {
    config.validate(q.rows())?;
    let q_prime = map.apply(q, Role::Query)?;
    let k_prime = map.apply(k, Role::Key)?;
    let cost = feature_cost(map.spec(), q.rows());
    counter.add(2 * cost);
    attend_features(config, &q_prime, &k_prime, v, p_kl, rng, counter)
}

pub(crate) fn attend_features<T: Real, R: Rng + ?Sized>(
    config: &AttentionConfig<T>,
    q_prime: &Matrix<T>,
    k_prime: &Matrix<T>,
    v: &Matrix<T>,
    p_kl: Option<&Matrix<T>>,
    rng: &mut R,
    counter: &mut MulCounter,
) -> Result<AttentionOutput<T>> {
    match config.mode {
        AttentionMode::RankMask | AttentionMode::RankCompress => {
            let r = rank_scores_counted(
                q_prime,
                k_prime,
                &config.score_row,
                config.normalize,
                counter,
            )?;
            let result = select(r, config.l, config.selection, rng)?;
            let values = apply_selection(v, &result, config.mode)?;
            Ok(AttentionOutput::Rank { result, values })
        }
        AttentionMode::Trans => {
            let p = p_kl
                .ok_or_else(|| IapError::InvalidArgument("trans mode needs a projection".into()))?;
            if p.rows() != config.l {
                return invalid(format!(
                    "projection has {} rows, expected l = {}",
                    p.rows(),
                    config.l
                ));
            }
            let options = TransOptions {
                normalized: config.normalize,
                residual_layernorm: config.residual_layernorm,
            };
            let order = TransOrder::for_dims(p.rows(), v.cols());
            Ok(AttentionOutput::Trans(iap_trans_counted(
                q_prime, k_prime, v, p, options, order, counter,
            )?))
        }
    }
}

/// Angle between `a` and `b` in `[0, pi]`.
pub fn angle<T: Real>(a: &[T], b: &[T]) -> T {
    let c = dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt());
    c.max(-T::one()).min(T::one()).acos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gaussian_matrix, RngStream};

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn hand_computed_scores() {
        let q = m(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let k = m(&[&[2.0, 0.0], &[1.0, 0.0]]);
        // z = (2, 0); r_i = z·k_i / L
        assert_eq!(
            rank_scores(&q, &k, &ScoreRow::Ones).unwrap(),
            vec![2.0, 1.0]
        );
        let same = m(&[&[0.3, 0.1], &[0.3, 0.1], &[0.3, 0.1]]);
        let r = rank_scores(&q.select_rows(&[0, 1, 0]).unwrap(), &same, &ScoreRow::Ones).unwrap();
        assert!(r.iter().all(|&x| x == r[0]));
        assert!(rank_scores(&q, &Matrix::zeros(2, 3), &ScoreRow::Ones).is_err());
    }

    #[test]
    fn top_l_rules() {
        assert_eq!(select_top_l(&[2.0, 1.0, 3.0], 2).unwrap(), vec![0, 2]);
        assert_eq!(select_top_l(&[2.0, 1.0, 3.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_top_l(&[1.0, 1.0, 1.0], 2).unwrap(), vec![0, 1]);
        assert!(select_top_l(&[1.0, 2.0], 3).is_err());
        assert!(select_top_l(&[1.0, 2.0], 0).is_err());
    }

    #[test]
    fn softmax_sampling() {
        let mut rng = RngStream::new(1, 0).generator();
        let n = 10_000;
        let zeros = (0..n)
            .filter(|_| softmax_sample_selection(&[0.0, 0.0], 1, &mut rng).unwrap()[0] == 0)
            .count();
        assert!((zeros as f64 / n as f64 - 0.5).abs() <= 0.02);
        let firsts = (0..n)
            .filter(|_| softmax_sample_selection(&[1e3, 0.0], 1, &mut rng).unwrap()[0] == 0)
            .count();
        assert!(firsts as f64 / n as f64 >= 0.999);
        let mut perm = softmax_sample_selection(&[0.1, 2.0, -1.0, 0.5], 4, &mut rng).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, vec![0, 1, 2, 3]);
        let a = softmax_sample_selection(
            &[0.1, 2.0, -1.0, 0.5],
            2,
            &mut RngStream::new(5, 5).generator(),
        )
        .unwrap();
        let b = softmax_sample_selection(
            &[0.1, 2.0, -1.0, 0.5],
            2,
            &mut RngStream::new(5, 5).generator(),
        )
        .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_application() {
        let v = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64 + 1.0);
        let all = RankResult::new(vec![0.0; 4], vec![0, 1, 2, 3]).unwrap();
        assert_eq!(
            apply_selection(&v, &all, AttentionMode::RankMask).unwrap(),
            v
        );
        let two = RankResult::new(vec![0.0; 4], vec![3, 1]).unwrap();
        assert_eq!(two.selected, vec![1, 3]);
        assert_eq!(two.mask, vec![false, true, false, true]);
        let c = apply_selection(&v, &two, AttentionMode::RankCompress).unwrap();
        assert_eq!(c.row(0), v.row(1));
        assert_eq!(c.row(1), v.row(3));
        let masked = apply_selection(&v, &two, AttentionMode::RankMask).unwrap();
        assert!(masked.row(0).iter().chain(masked.row(2)).all(|&x| x == 0.0));
        assert!(RankResult::new(vec![0.0; 2], vec![1, 1]).is_err());
    }

    #[test]
    fn brute_force_small_cases() {
        let q = m(&[&[1.0, -1.0]]);
        let k = m(&[&[2.0, 0.5]]);
        let v = m(&[&[3.0, -2.0]]);
        let out = brute_force_attention(&q, &k, &v, &ExactKernel::Relu, false).unwrap();
        assert_eq!(out, m(&[&[6.0, -4.0]]));
        assert_eq!(
            brute_force_attention(&q, &k, &v, &ExactKernel::Relu, true).unwrap(),
            v
        );
        let constant = |_: &[f64], _: &[f64]| 1.0;
        let q3 = Matrix::from_fn(3, 2, |i, j| (i + j) as f64);
        let v3 = Matrix::from_fn(3, 2, |i, j| (i * j) as f64 + 1.0);
        let out = brute_force_attention(&q3, &q3, &v3, &constant, false).unwrap();
        let mean = brute_force_attention(&q3, &q3, &v3, &constant, true).unwrap();
        for i in 0..3 {
            assert_eq!(out.row(i), v3.column_sums().as_slice());
            for j in 0..2 {
                assert!((mean.get(i, j) - v3.column_sums()[j] / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn brute_force_cap() {
        let q = Matrix::<f64>::zeros(20, 2);
        let err = brute_force_attention_capped(&q, &q, &q, &ExactKernel::Linear, false, 16);
        assert!(matches!(err, Err(IapError::ResourceGuard(_))));
    }

    #[test]
    fn trans_orders_agree() {
        let s = RngStream::new(8, 0);
        let qp = gaussian_matrix::<f64>(64, 6, &s.substream(0))
            .unwrap()
            .map(f64::abs);
        let kp = gaussian_matrix::<f64>(64, 6, &s.substream(1))
            .unwrap()
            .map(f64::abs);
        let v = gaussian_matrix::<f64>(64, 5, &s.substream(2)).unwrap();
        let p = gaussian_matrix::<f64>(3, 64, &s.substream(3)).unwrap();
        for normalized in [false, true] {
            let opts = TransOptions {
                normalized,
                residual_layernorm: false,
            };
            let mut c = MulCounter::new();
            let a = iap_trans_counted(&qp, &kp, &v, &p, opts, TransOrder::ProjectFirst, &mut c)
                .unwrap();
            let b =
                iap_trans_counted(&qp, &kp, &v, &p, opts, TransOrder::ValuesFirst, &mut c).unwrap();
            assert!(a.max_abs_diff(&b) <= 1e-9 * b.max_abs());
        }
        assert_eq!(TransOrder::for_dims(3, 5), TransOrder::ProjectFirst);
        assert_eq!(TransOrder::for_dims(5, 5), TransOrder::ValuesFirst);
    }

    #[test]
    fn trans_mean_readout() {
        let s = RngStream::new(9, 0);
        let qp = gaussian_matrix::<f64>(10, 4, &s.substream(0)).unwrap();
        let kp = gaussian_matrix::<f64>(10, 4, &s.substream(1)).unwrap();
        let v = gaussian_matrix::<f64>(10, 3, &s.substream(2)).unwrap();
        let p = Matrix::filled(1, 10, 0.1);
        let out = iap_trans(&qp, &kp, &v, &p, TransOptions::default()).unwrap();
        let full = qp.matmul_t(&kp).unwrap().matmul(&v).unwrap();
        let mean: Vec<f64> = full.column_sums().iter().map(|x| x / 10.0).collect();
        for j in 0..3 {
            assert!((out.get(0, j) - mean[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn residual_layer_norm_rows() {
        let s = RngStream::new(10, 0);
        let qp = gaussian_matrix::<f64>(12, 4, &s.substream(0))
            .unwrap()
            .map(f64::abs);
        let v = gaussian_matrix::<f64>(12, 6, &s.substream(2)).unwrap();
        let p = gaussian_matrix::<f64>(2, 12, &s.substream(3)).unwrap();
        let opts = TransOptions {
            normalized: true,
            residual_layernorm: true,
        };
        let out = iap_trans(&qp, &qp, &v, &p, opts).unwrap();
        for row in out.row_iter() {
            let mean = row.iter().sum::<f64>() / 6.0;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 6.0;
            assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn normalized_scores_match_reference() {
        let s = RngStream::new(12, 0);
        let q = gaussian_matrix::<f64>(40, 3, &s.substream(0)).unwrap();
        let k = gaussian_matrix::<f64>(40, 3, &s.substream(1)).unwrap();
        let row = ScoreRow::Learned((0..40).map(|i| 1.0 + i as f64 / 40.0).collect());
        let qp = q.map(|x| x.max(0.0) + 0.1);
        let kp = k.map(|x| x.max(0.0) + 0.1);
        let lin = ExactKernel::Linear;
        for normalized in [false, true] {
            let reference = brute_force_scores(&qp, &kp, &lin, &row, normalized).unwrap();
            let got =
                rank_scores_counted(&qp, &kp, &row, normalized, &mut MulCounter::new()).unwrap();
            for (a, b) in got.iter().zip(&reference) {
                assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn config_validation() {
        let spec = FeatureMapSpec::relu(4);
        let cfg = AttentionConfig::<f64>::rank(spec, AttentionMode::RankCompress, 5);
        assert!(cfg.validate(5).is_ok());
        assert!(cfg.validate(4).is_err());
        let bad = AttentionConfig::<f64> {
            residual_layernorm: true,
            ..cfg
        };
        assert!(bad.validate(10).is_err());
    }
}
