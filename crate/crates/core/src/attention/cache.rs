use rand::Rng;

use super::{attend_features, AttentionConfig, AttentionOutput};
use crate::error::{invalid, IapError, Result};
use crate::features::{FeatureKind, FeatureMap, FeatureMapSpec, Role};
use crate::numerics::{Matrix, MulCounter};
use crate::patches::QkvProjection;
use crate::scalar::Real;

/// Multiplications spent mapping `len` inputs through a feature map.
pub fn feature_cost(spec: &FeatureMapSpec, len: usize) -> usize {
    match spec.kind {
        FeatureKind::Positive | FeatureKind::Trig => len * spec.m * spec.d_qk,
        FeatureKind::Relu => 0,
        FeatureKind::Learned => len * (spec.hidden * spec.d_qk + spec.m * spec.hidden),
    }
}

/// Transformed keys `K′` reused across steps and refreshed every
/// `period` steps. `age` counts the steps served by the current `K′`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyCache<T> {
    k_prime: Option<Matrix<T>>,
    period: usize,
    age: usize,
    refreshes: u64,
}

impl<T: Real> KeyCache<T> {
    pub fn new(period: usize) -> Result<Self> {
        if period == 0 {
            return invalid("key refresh period must be >= 1");
        }
        Ok(Self {
            k_prime: None,
            period,
            age: 0,
            refreshes: 0,
        })
    }

    pub fn is_initialized(&self) -> bool {
        self.k_prime.is_some()
    }

    pub fn k_prime(&self) -> Option<&Matrix<T>> {
        self.k_prime.as_ref()
    }

    pub fn period(&self) -> usize {
        self.period
    }

    pub fn age(&self) -> usize {
        self.age
    }

    pub fn refreshes(&self) -> u64 {
        self.refreshes
    }

    /// Recomputes `K′ = phi(X W_K)` and resets the age.
    pub fn refresh(
        &mut self,
        x: &Matrix<T>,
        proj: &QkvProjection<T>,
        map: &FeatureMap<T>,
        counter: &mut MulCounter,
    ) -> Result<()> {
        let k = counter.matmul(x, &proj.w_k)?;
        let k_prime = map.apply(&k, Role::Key)?;
        counter.add(feature_cost(map.spec(), x.rows()));
        self.k_prime = Some(k_prime);
        self.age = 0;
        self.refreshes += 1;
        Ok(())
    }

    /// FNV-1a over the bit patterns of `K′`.
    pub fn checksum(&self) -> Option<u64> {
        self.k_prime.as_ref().map(|k| {
            let mut h: u64 = 0xcbf2_9ce4_8422_2325;
            for x in k.as_slice() {
                for b in x.to_f64_lossy().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
            h
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CrossStepOutput<T> {
    pub output: AttentionOutput<T>,
    pub refreshed: bool,
}

/// One step of cross-attention: queries and values come from the fresh
/// input `x`, keys from the cache (recomputed once `period` steps have
/// used them).
#[allow(clippy::too_many_arguments)]
pub fn cross_attention_step<T: Real, R: Rng + ?Sized>(
    cache: &mut KeyCache<T>,
    x: &Matrix<T>,
    proj: &QkvProjection<T>,
    map: &FeatureMap<T>,
    config: &AttentionConfig<T>,
    p_kl: Option<&Matrix<T>>,
    rng: &mut R,
    counter: &mut MulCounter,
) -> Result<CrossStepOutput<T>> {
    let Some(k_prime) = cache.k_prime.as_ref() else {
        return Err(IapError::State(
            "key cache used before initialization".into(),
        ));
    };
    if k_prime.rows() != x.rows() {
        return invalid(format!(
            "cached keys cover {} patches, input has {}",
            k_prime.rows(),
            x.rows()
        ));
    }
    config.validate(x.rows())?;
    let refreshed = cache.age >= cache.period;
    if refreshed {
        cache.refresh(x, proj, map, counter)?;
    }
    let q = counter.matmul(x, &proj.w_q)?;
    let v = counter.matmul(x, &proj.w_v)?;
    let q_prime = map.apply(&q, Role::Query)?;
    counter.add(feature_cost(map.spec(), x.rows()));
    let k_prime = cache.k_prime.as_ref().expect("initialized");
    let output = attend_features(config, &q_prime, k_prime, &v, p_kl, rng, counter)?;
    cache.age += 1;
    Ok(CrossStepOutput { output, refreshed })
}
