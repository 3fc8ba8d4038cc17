use crate::error::{invalid, Result};
use crate::scalar::Real;

/// Relative slack removed before rounding up, so a formula landing on an
/// integer is not pushed to the next one by rounding noise.
const CEIL_GUARD: f64 = 1e-12;

fn guarded_ceil(x: f64) -> usize {
    (x * (1.0 - CEIL_GUARD)).ceil().max(0.0) as usize
}

fn positive(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0) || !x.is_finite() {
        return invalid(format!("{name} must be positive and finite, got {x}"));
    }
    Ok(())
}

fn probability(p: f64) -> Result<()> {
    if !(p > 0.0 && p < 1.0) {
        return invalid(format!("probability must lie in (0, 1), got {p}"));
    }
    Ok(())
}

/// Sketch width `ceil(2 / (p eps²) (ln L + ln I))` for an approximate
/// top-l ensemble with probability `1 - p` over `steps` steps.
pub fn min_sketch_width(p: f64, eps: f64, len: f64, steps: f64) -> Result<usize> {
    probability(p)?;
    positive("eps", eps)?;
    if !(len >= 1.0) || !(steps >= 1.0) {
        return invalid(format!("L and I must be >= 1, got {len} and {steps}"));
    }
    Ok(guarded_ceil(
        2.0 / (p * eps * eps) * (len.ln() + steps.ln()),
    ))
}

/// Number of trig features for `eps`-accurate ranking of inputs with norm
/// at most `r`.
pub fn min_projections_trig(eps: f64, p: f64, r: f64, d_qk: usize) -> Result<usize> {
    positive("eps", eps)?;
    probability(p)?;
    positive("R", r)?;
    if d_qk == 0 {
        return invalid("d_qk must be >= 1");
    }
    let sd = (d_qk as f64).sqrt();
    let inner = 10.0 + (r * r * sd / (p * eps * eps)).ln() + r * r / sd;
    Ok(guarded_ceil(
        4.0 * (d_qk as f64 + 2.0) * inner / (eps * eps),
    ))
}

/// Features needed so that every patch at angle at least `alpha` from the
/// aggregated query keeps a score of at most `eps`.
pub fn unimportant_patch_bound(
    set_size: usize,
    steps: f64,
    p: f64,
    eps: f64,
    alpha: f64,
    d_qk: usize,
) -> Result<usize> {
    probability(p)?;
    positive("eps", eps)?;
    positive("I", steps)?;
    if set_size == 0 || d_qk == 0 {
        return invalid("set size and d_qk must be >= 1");
    }
    if !(0.0..=std::f64::consts::PI).contains(&alpha) {
        return invalid(format!("alpha must lie in [0, pi], got {alpha}"));
    }
    let sd = (d_qk as f64).sqrt();
    let s2 = (alpha / 2.0).sin().powi(2);
    let n = set_size as f64;
    let value = n * n * steps / (p * eps * eps)
        * (8.0 * sd * s2 - 2.0 * sd).exp()
        * (1.0 - (-4.0 * sd * s2).exp());
    Ok(guarded_ceil(value))
}

/// `2 exp(-m' eps² / 2)`.
pub fn azuma_tail(m_prime: usize, eps: f64) -> f64 {
    2.0 * (-(m_prime as f64) * eps * eps / 2.0).exp()
}

/// True when `selected` holds the top scores of some ranking within `eps`
/// of `r` in the max norm.
pub fn is_epsilon_approximate<T: Real>(r: &[T], selected: &[usize], eps: T) -> bool {
    let mut inside = vec![false; r.len()];
    for &i in selected {
        if i >= r.len() {
            return false;
        }
        inside[i] = true;
    }
    let min_in = r
        .iter()
        .zip(&inside)
        .filter(|(_, &s)| s)
        .map(|(&x, _)| x)
        .fold(T::infinity(), T::min);
    let max_out = r
        .iter()
        .zip(&inside)
        .filter(|(_, &s)| !s)
        .map(|(&x, _)| x)
        .fold(T::neg_infinity(), T::max);
    min_in - max_out >= -(eps + eps)
}

/// A ranking within `eps` of `r` in which `selected` scores at least as high
/// as every other patch, if one exists.
pub fn epsilon_approximate_witness<T: Real>(r: &[T], selected: &[usize], eps: T) -> Option<Vec<T>> {
    if !is_epsilon_approximate(r, selected, eps) {
        return None;
    }
    let mut inside = vec![false; r.len()];
    for &i in selected {
        inside[i] = true;
    }
    let min_in = r
        .iter()
        .zip(&inside)
        .filter(|(_, &s)| s)
        .map(|(&x, _)| x)
        .fold(T::infinity(), T::min);
    let max_out = r
        .iter()
        .zip(&inside)
        .filter(|(_, &s)| !s)
        .map(|(&x, _)| x)
        .fold(T::neg_infinity(), T::max);
    if min_in >= max_out {
        return Some(r.to_vec());
    }
    let mid = (min_in + max_out) / T::lit(2.0);
    Some(
        r.iter()
            .zip(&inside)
            .map(|(&x, &s)| if s { x.max(mid) } else { x.min(mid) })
            .collect(),
    )
}
