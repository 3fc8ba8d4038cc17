//! Kernel feature maps `phi` with `K(u, v) = E[phi(u)ᵀ phi(v)]`.
//!
//! Random maps (`Positive`, `Trig`) estimate the softmax kernel
//! `exp(xᵀy)`; `Relu` is the deterministic map of the ReLU kernel and
//! `Learned` pushes inputs through a small positive-output network.

mod learned;

pub use learned::{LearnedFeatureNet, LearnedFeaturePair, OutputNonlinearity};

use crate::error::{invalid, IapError, Result};
use crate::numerics::{block_orthogonal_gaussian, dot, gaussian_matrix, Matrix, RngStream};
use crate::scalar::Real;

/// Largest exponent accepted before reporting overflow.
pub const MAX_EXPONENT: f64 = 700.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureKind {
    Trig,
    Positive,
    Relu,
    Learned,
}

/// Input rescaling applied before the softmax kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScalingMode {
    Raw,
    /// `d^{-1/4} u`
    InvFourth,
    /// `d^{1/4} u / |u|`
    Normalized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ProjectionSource {
    Iid,
    BlockOrthogonal,
}

/// Whether the random projections are fixed for the lifetime of a map or
/// redrawn on every forward call.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RedrawPolicy {
    Fixed,
    PerCall,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Key,
}

/// Configuration of a feature map.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureMapSpec {
    pub kind: FeatureKind,
    /// Number of random projections (or learned output width).
    pub m: usize,
    pub d_qk: usize,
    pub scaling: ScalingMode,
    pub source: ProjectionSource,
    pub redraw: RedrawPolicy,
    pub stream: RngStream,
    /// Hidden width of the learned networks.
    pub hidden: usize,
    pub output: OutputNonlinearity,
}

impl FeatureMapSpec {
    pub fn new(kind: FeatureKind, m: usize, d_qk: usize) -> Self {
        Self {
            kind,
            m,
            d_qk,
            scaling: ScalingMode::InvFourth,
            source: ProjectionSource::BlockOrthogonal,
            redraw: RedrawPolicy::Fixed,
            stream: RngStream::new(0, 0),
            hidden: 16,
            output: OutputNonlinearity::Exp,
        }
    }

    pub fn relu(d_qk: usize) -> Self {
        Self {
            scaling: ScalingMode::Raw,
            ..Self::new(FeatureKind::Relu, d_qk, d_qk)
        }
    }

    pub fn with_scaling(mut self, scaling: ScalingMode) -> Self {
        self.scaling = scaling;
        self
    }

    pub fn with_source(mut self, source: ProjectionSource) -> Self {
        self.source = source;
        self
    }

    pub fn with_stream(mut self, stream: RngStream) -> Self {
        self.stream = stream;
        self
    }

    pub fn with_redraw(mut self, redraw: RedrawPolicy) -> Self {
        self.redraw = redraw;
        self
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            FeatureKind::Trig => 2 * self.m,
            FeatureKind::Positive | FeatureKind::Learned => self.m,
            FeatureKind::Relu => self.d_qk,
        }
    }

    /// True when every feature coordinate is strictly positive.
    pub fn is_positive(&self) -> bool {
        matches!(self.kind, FeatureKind::Positive | FeatureKind::Learned)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d_qk == 0 {
            return invalid(format!(
                "feature map needs m, d_qk >= 1 (m={}, d_qk={})",
                self.m, self.d_qk
            ));
        }
        if self.kind == FeatureKind::Learned && self.hidden == 0 {
            return invalid("learned feature map needs a positive hidden width");
        }
        Ok(())
    }
}

pub fn scale_input<T: Real>(u: &[T], mode: ScalingMode, d_qk: usize) -> Result<Vec<T>> {
    let d = T::from_usize_lossy(d_qk);
    match mode {
        ScalingMode::Raw => Ok(u.to_vec()),
        ScalingMode::InvFourth => {
            let s = d.powf(T::lit(-0.25));
            Ok(u.iter().map(|&x| x * s).collect())
        }
        ScalingMode::Normalized => {
            let n = dot(u, u).sqrt();
            if !(n > T::zero()) {
                return invalid("normalized scaling of a zero vector");
            }
            let s = d.powf(T::lit(0.25)) / n;
            Ok(u.iter().map(|&x| x * s).collect())
        }
    }
}

fn exponent_limit<T: Real>() -> T {
    T::lit(MAX_EXPONENT).min(T::max_value().ln())
}

/// `exp(xᵀy)`.
pub fn softmax_kernel_exact<T: Real>(x: &[T], y: &[T]) -> Result<T> {
    let e = dot(x, y);
    if e > exponent_limit() {
        return Err(IapError::Range(format!(
            "softmax kernel exponent {e} overflows"
        )));
    }
    Ok(e.exp())
}

/// Positive random features `exp(ω_iᵀz - |z|²/2) / sqrt(m)`.
pub fn phi_positive<T: Real>(z: &[T], omega: &Matrix<T>) -> Result<Vec<T>> {
    if z.len() != omega.cols() {
        return invalid(format!(
            "input width {} does not match projections {}",
            z.len(),
            omega.cols()
        ));
    }
    let half_sq = dot(z, z) / T::lit(2.0);
    let inv_sqrt_m = T::one() / T::from_usize_lossy(omega.rows()).sqrt();
    let limit = exponent_limit::<T>();
    omega
        .row_iter()
        .map(|w| {
            let e = dot(w, z) - half_sq;
            if e > limit {
                Err(IapError::Range(format!(
                    "positive feature exponent {e} overflows"
                )))
            } else {
                Ok(e.exp() * inv_sqrt_m)
            }
        })
        .collect()
}

/// Trigonometric features `exp(|z|²/2) / sqrt(m) (sin ω_iᵀz, cos ω_iᵀz)_i`.
pub fn phi_trig<T: Real>(z: &[T], omega: &Matrix<T>) -> Result<Vec<T>> {
    if z.len() != omega.cols() {
        return invalid(format!(
            "input width {} does not match projections {}",
            z.len(),
            omega.cols()
        ));
    }
    let half_sq = dot(z, z) / T::lit(2.0);
    if half_sq > exponent_limit() {
        return Err(IapError::Range(format!(
            "trig feature scale exp({half_sq}) overflows"
        )));
    }
    let s = half_sq.exp() / T::from_usize_lossy(omega.rows()).sqrt();
    let mut out = Vec::with_capacity(2 * omega.rows());
    for w in omega.row_iter() {
        let (sin, cos) = dot(w, z).sin_cos();
        out.push(s * sin);
        out.push(s * cos);
    }
    Ok(out)
}

pub fn phi_relu<T: Real>(z: &[T]) -> Vec<T> {
    z.iter().map(|&x| x.max(T::zero())).collect()
}

/// Exact kernels that the feature maps estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ExactKernel {
    Softmax { scaling: ScalingMode, d_qk: usize },
    Relu,
    Linear,
}

impl ExactKernel {
    pub fn eval<T: Real>(&self, u: &[T], v: &[T]) -> Result<T> {
        match *self {
            ExactKernel::Softmax { scaling, d_qk } => softmax_kernel_exact(
                &scale_input(u, scaling, d_qk)?,
                &scale_input(v, scaling, d_qk)?,
            ),
            ExactKernel::Relu => Ok(dot(&phi_relu(u), &phi_relu(v))),
            ExactKernel::Linear => Ok(dot(u, v)),
        }
    }
}

/// A feature map with its random projections (or learned nets) drawn.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    spec: FeatureMapSpec,
    omega: Option<Matrix<T>>,
    learned: Option<LearnedFeaturePair<T>>,
}

impl<T: Real> FeatureMap<T> {
    /// Draws projections from `spec.stream`; learned maps get small random weights.
    pub fn new(spec: FeatureMapSpec) -> Result<Self> {
        spec.validate()?;
        Self::draw(spec, spec.stream)
    }

    fn draw(spec: FeatureMapSpec, stream: RngStream) -> Result<Self> {
        let (omega, learned) = match spec.kind {
            FeatureKind::Positive | FeatureKind::Trig => {
                let w = match spec.source {
                    ProjectionSource::Iid => gaussian_matrix(spec.m, spec.d_qk, &stream)?,
                    ProjectionSource::BlockOrthogonal => {
                        block_orthogonal_gaussian(spec.m, spec.d_qk, &stream)?
                    }
                };
                (Some(w), None)
            }
            FeatureKind::Relu => (None, None),
            FeatureKind::Learned => (
                None,
                Some(LearnedFeaturePair::random(
                    spec.d_qk,
                    spec.hidden,
                    spec.m,
                    spec.output,
                    &stream,
                )?),
            ),
        };
        Ok(Self {
            spec,
            omega,
            learned,
        })
    }

    /// Learned map with explicit networks.
    pub fn with_learned(spec: FeatureMapSpec, nets: LearnedFeaturePair<T>) -> Result<Self> {
        spec.validate()?;
        if spec.kind != FeatureKind::Learned {
            return invalid("with_learned needs FeatureKind::Learned");
        }
        if nets.query.input_dim() != spec.d_qk || nets.key.input_dim() != spec.d_qk {
            return invalid("learned nets input width does not match d_qk");
        }
        if nets.query.output_dim() != spec.m || nets.key.output_dim() != spec.m {
            return invalid("learned nets output width does not match m");
        }
        Ok(Self {
            spec,
            omega: None,
            learned: Some(nets),
        })
    }

    /// Independent redraw number `draw` of the same map.
    pub fn redrawn(&self, draw: u64) -> Result<Self> {
        if self.spec.kind == FeatureKind::Learned {
            return Ok(self.clone());
        }
        Self::draw(self.spec, self.spec.stream.substream(draw))
    }

    /// Map to use for forward call number `call`, honoring the redraw policy.
    pub fn for_call(&self, call: u64) -> Result<std::borrow::Cow<'_, Self>> {
        Ok(match self.spec.redraw {
            RedrawPolicy::Fixed => std::borrow::Cow::Borrowed(self),
            RedrawPolicy::PerCall => std::borrow::Cow::Owned(self.redrawn(call)?),
        })
    }

    pub fn spec(&self) -> &FeatureMapSpec {
        &self.spec
    }

    pub fn omega(&self) -> Option<&Matrix<T>> {
        self.omega.as_ref()
    }

    pub fn learned(&self) -> Option<&LearnedFeaturePair<T>> {
        self.learned.as_ref()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// The kernel this map estimates, when it has a closed form.
    pub fn exact_kernel(&self) -> Option<ExactKernel> {
        match self.spec.kind {
            FeatureKind::Positive | FeatureKind::Trig => Some(ExactKernel::Softmax {
                scaling: self.spec.scaling,
                d_qk: self.spec.d_qk,
            }),
            FeatureKind::Relu => Some(ExactKernel::Relu),
            FeatureKind::Learned => None,
        }
    }

    /// `phi(scale(u))` for one input vector.
    pub fn features(&self, u: &[T], role: Role) -> Result<Vec<T>> {
        if u.len() != self.spec.d_qk {
            return invalid(format!(
                "input width {} does not match d_qk {}",
                u.len(),
                self.spec.d_qk
            ));
        }
        match self.spec.kind {
            FeatureKind::Positive => phi_positive(
                &scale_input(u, self.spec.scaling, self.spec.d_qk)?,
                self.omega_ref(),
            ),
            FeatureKind::Trig => phi_trig(
                &scale_input(u, self.spec.scaling, self.spec.d_qk)?,
                self.omega_ref(),
            ),
            FeatureKind::Relu => Ok(phi_relu(&scale_input(
                u,
                self.spec.scaling,
                self.spec.d_qk,
            )?)),
            FeatureKind::Learned => {
                let nets = self.learned.as_ref().expect("learned map carries nets");
                let net = match role {
                    Role::Query => &nets.query,
                    Role::Key => &nets.key,
                };
                net.forward_vec(u)
            }
        }
    }

    /// Row-wise features: `L x d_qk` to `L x output_dim`.
    pub fn apply(&self, x: &Matrix<T>, role: Role) -> Result<Matrix<T>> {
        if x.cols() != self.spec.d_qk {
            return invalid(format!(
                "input width {} does not match d_qk {}",
                x.cols(),
                self.spec.d_qk
            ));
        }
        if self.spec.kind == FeatureKind::Learned {
            let nets = self.learned.as_ref().expect("learned map carries nets");
            return match role {
                Role::Query => learned::learned_features(x, &nets.query),
                Role::Key => learned::learned_features(x, &nets.key),
            };
        }
        let width = self.output_dim();
        let mut data = Vec::with_capacity(x.rows() * width);
        let omega = match self.spec.kind {
            FeatureKind::Positive | FeatureKind::Trig => self.omega_ref(),
            _ => {
                for row in x.row_iter() {
                    data.extend(self.features(row, role)?);
                }
                return Matrix::from_vec(x.rows(), width, data);
            }
        };
        // batched form of `features`, same operations in the same order
        let d = T::from_usize_lossy(self.spec.d_qk);
        let fixed = match self.spec.scaling {
            ScalingMode::Raw => Some(T::one()),
            ScalingMode::InvFourth => Some(d.powf(T::lit(-0.25))),
            ScalingMode::Normalized => None,
        };
        let inv_sqrt_m = T::one() / T::from_usize_lossy(omega.rows()).sqrt();
        let limit = exponent_limit::<T>();
        let mut z = vec![T::zero(); self.spec.d_qk];
        for row in x.row_iter() {
            match fixed {
                Some(_) if self.spec.scaling == ScalingMode::Raw => z.copy_from_slice(row),
                Some(s) => z.iter_mut().zip(row).for_each(|(o, &u)| *o = u * s),
                None => z = scale_input(row, ScalingMode::Normalized, self.spec.d_qk)?,
            }
            let half_sq = dot(&z, &z) / T::lit(2.0);
            if self.spec.kind == FeatureKind::Positive {
                for w in omega.row_iter() {
                    let e = dot(w, &z) - half_sq;
                    if e > limit {
                        return Err(IapError::Range(format!(
                            "positive feature exponent {e} overflows"
                        )));
                    }
                    data.push(e.exp() * inv_sqrt_m);
                }
            } else {
                if half_sq > limit {
                    return Err(IapError::Range(format!(
                        "trig feature scale exp({half_sq}) overflows"
                    )));
                }
                let s = half_sq.exp() / T::from_usize_lossy(omega.rows()).sqrt();
                for w in omega.row_iter() {
                    let (sin, cos) = dot(w, &z).sin_cos();
                    data.push(s * sin);
                    data.push(s * cos);
                }
            }
        }
        Matrix::from_vec(x.rows(), width, data)
    }

    /// One-sample kernel estimate `phi(u)ᵀ phi(v)` (`u` as query, `v` as key).
    pub fn estimate(&self, u: &[T], v: &[T]) -> Result<T> {
        Ok(dot(
            &self.features(u, Role::Query)?,
            &self.features(v, Role::Key)?,
        ))
    }

    fn omega_ref(&self) -> &Matrix<T> {
        self.omega
            .as_ref()
            .expect("random feature map carries projections")
    }
}

pub use learned::learned_features;
