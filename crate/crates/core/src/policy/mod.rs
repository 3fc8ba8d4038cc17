//! Attention-bottleneck policies, the toy steering task they are trained
//! on, an evolution-strategies optimizer and parameter accounting.

mod checkpoint;
mod env;
mod es;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use env::{capped_velocity_reward, EnvConfig, Step, TextureSet, ToyVisionEnv, TEST_SEED_BASE};
pub use es::{centered_ranks, es_optimize, es_step, EsConfig, EsStep};
pub use train::{evaluate, train_policy, TrainConfig, TrainLogRow, TrainOutcome};

use std::borrow::Cow;

use rand::Rng;

use crate::attention::{iap_forward, AttentionConfig, AttentionMode, AttentionOutput};
use crate::error::{invalid, Result};
use crate::features::{
    FeatureKind, FeatureMap, FeatureMapSpec, LearnedFeatureNet, LearnedFeaturePair,
};
use crate::numerics::{gaussian_matrix, Matrix, MulCounter, RngStream};
use crate::patches::{
    extract_patches, grid_dims, position_encoding, project_qkv, ImageTensor, QkvProjection,
};
use crate::scalar::Real;

pub const ACTION_DIM: usize = 2;
pub const CONTROLLER_HIDDEN: usize = 16;
pub const DEFAULT_VALUE_DIM: usize = 4;

/// Shape of a policy: image, patching, attention and controller widths.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig<T> {
    /// `(height, width, channels)`.
    pub image: (usize, usize, usize),
    pub patch_size: usize,
    pub stride: usize,
    pub d_pos: usize,
    pub d_v: usize,
    pub hidden: usize,
    pub attention: AttentionConfig<T>,
}

impl<T: Real> PolicyConfig<T> {
    /// Non-overlapping patches, 16-wide positional code, value width 4.
    pub fn new(
        image: (usize, usize, usize),
        patch_size: usize,
        attention: AttentionConfig<T>,
    ) -> Result<Self> {
        let config = Self {
            image,
            patch_size,
            stride: patch_size,
            d_pos: crate::patches::DEFAULT_POS_DIM,
            d_v: DEFAULT_VALUE_DIM,
            hidden: CONTROLLER_HIDDEN,
            attention,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let (_, _, c) = self.image;
        if c != 3 && c != 4 {
            return invalid(format!("expected 3 or 4 channels, got {c}"));
        }
        if self.d_v == 0 || self.hidden == 0 {
            return invalid("value and hidden widths must be positive");
        }
        if self.d_pos < 2 || self.d_pos % 2 != 0 {
            return invalid(format!(
                "positional width must be even and >= 2, got {}",
                self.d_pos
            ));
        }
        self.attention.features.validate()?;
        self.attention.validate(self.len()?)
    }

    pub fn grid(&self) -> Result<(usize, usize)> {
        grid_dims(self.image.0, self.image.1, self.patch_size, self.stride)
    }

    /// Number of patches `L`.
    pub fn len(&self) -> Result<usize> {
        let (a, b) = self.grid()?;
        Ok(a * b)
    }

    /// Enriched patch width `C p² + d_pos`.
    pub fn input_dim(&self) -> usize {
        self.image.2 * self.patch_size * self.patch_size + self.d_pos
    }

    pub fn d_qk(&self) -> usize {
        self.attention.features.d_qk
    }

    /// Width of the flattened attention output fed to the controller.
    pub fn controller_input(&self) -> Result<usize> {
        let a = &self.attention;
        Ok(match a.mode {
            AttentionMode::RankCompress => a.l * (self.d_v + 2),
            AttentionMode::RankMask => self.len()? * (self.d_v + 2),
            AttentionMode::Trans => a.l * self.d_v,
        })
    }

    pub fn layout(&self) -> Result<GenomeLayout> {
        let (d, k) = (self.input_dim(), self.d_qk());
        let mut slices = vec![("w_q", d, k), ("w_k", d, k), ("w_v", d, self.d_v)];
        if self.attention.mode == AttentionMode::Trans {
            slices.push(("p_kl", self.attention.l, self.len()?));
        }
        let f = &self.attention.features;
        if f.kind == FeatureKind::Learned {
            let n = LearnedFeatureNet::<T>::count(f.d_qk, f.hidden, f.m);
            slices.push(("phi_query", 1, n));
            slices.push(("phi_key", 1, n));
        }
        slices.push(("ctrl_w1", self.controller_input()?, self.hidden));
        slices.push(("ctrl_b1", 1, self.hidden));
        slices.push(("ctrl_w2", self.hidden, ACTION_DIM));
        slices.push(("ctrl_b2", 1, ACTION_DIM));
        Ok(GenomeLayout::new(
            slices.into_iter().map(|(n, r, c)| (n.to_string(), r, c)),
        ))
    }
}

/// Named matrix slice of a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayoutSlice {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl LayoutSlice {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenomeLayout {
    slices: Vec<LayoutSlice>,
    total: usize,
}

impl GenomeLayout {
    /// Slices packed in the given order.
    pub fn new(shapes: impl IntoIterator<Item = (String, usize, usize)>) -> Self {
        let mut offset = 0;
        let slices = shapes
            .into_iter()
            .map(|(name, rows, cols)| {
                let s = LayoutSlice {
                    name,
                    rows,
                    cols,
                    offset,
                };
                offset += s.len();
                s
            })
            .collect();
        Self {
            slices,
            total: offset,
        }
    }

    pub fn slices(&self) -> &[LayoutSlice] {
        &self.slices
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&LayoutSlice> {
        self.slices.iter().find(|s| s.name == name)
    }
}

/// Flat trainable parameters with their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGenome<T> {
    layout: GenomeLayout,
    params: Vec<T>,
}

impl<T: Real> PolicyGenome<T> {
    pub fn new(layout: GenomeLayout, params: Vec<T>) -> Result<Self> {
        if params.len() != layout.total() {
            return invalid(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total()
            ));
        }
        Ok(Self { layout, params })
    }

    pub fn zeros(layout: GenomeLayout) -> Self {
        let params = vec![T::zero(); layout.total()];
        Self { layout, params }
    }

    /// Gaussian weights with variance `1 / rows`, zero biases and a zero
    /// action layer, so the initial policy stands still.
    pub fn init(layout: GenomeLayout, stream: &RngStream) -> Result<Self> {
        let mut params = vec![T::zero(); layout.total()];
        for (i, s) in layout.slices().iter().enumerate() {
            if s.name.starts_with("ctrl_b") || s.name == "ctrl_w2" {
                continue;
            }
            let g = gaussian_matrix::<T>(s.rows, s.cols, &stream.substream(i as u64))?;
            let scale = T::one() / T::from_usize_lossy(s.rows).sqrt();
            for (dst, &v) in params[s.range()].iter_mut().zip(g.as_slice()) {
                *dst = v * scale;
            }
        }
        Self::new(layout, params)
    }

    pub fn layout(&self) -> &GenomeLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn with_params(&self, params: Vec<T>) -> Result<Self> {
        Self::new(self.layout.clone(), params)
    }

    pub fn slice(&self, name: &str) -> Result<&[T]> {
        match self.layout.get(name) {
            Some(s) => Ok(&self.params[s.range()]),
            None => invalid(format!("genome has no slice {name:?}")),
        }
    }

    pub fn matrix(&self, name: &str) -> Result<Matrix<T>> {
        let s = self
            .layout
            .get(name)
            .ok_or_else(|| crate::IapError::InvalidArgument(format!("no slice {name:?}")))?;
        Matrix::from_vec(s.rows, s.cols, self.params[s.range()].to_vec())
    }

    /// FNV-1a over the little-endian `f64` images of the parameters.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for b in p.to_f64_lossy().to_le_bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// A policy configuration with its fixed random feature map.
#[derive(Clone, Debug)]
pub struct Policy<T> {
    config: PolicyConfig<T>,
    layout: GenomeLayout,
    map: Option<FeatureMap<T>>,
    /// Positional code of every patch, shared by all frames.
    positions: Matrix<T>,
}

impl<T: Real> Policy<T> {
    pub fn new(config: PolicyConfig<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout()?;
        let map = match config.attention.features.kind {
            FeatureKind::Learned => None,
            _ => Some(FeatureMap::new(config.attention.features)?),
        };
        let (rows, cols) = config.grid()?;
        let mut data = Vec::with_capacity(rows * cols * config.d_pos);
        for i in 0..rows * cols {
            data.extend(position_encoding::<T>(i / cols, i % cols, config.d_pos));
        }
        let positions = Matrix::from_vec(rows * cols, config.d_pos, data)?;
        Ok(Self {
            config,
            layout,
            map,
            positions,
        })
    }

    pub fn config(&self) -> &PolicyConfig<T> {
        &self.config
    }

    pub fn layout(&self) -> &GenomeLayout {
        &self.layout
    }

    /// Unpacks `genome` into matrices once for repeated forwards.
    pub fn bind<'a>(&'a self, genome: &PolicyGenome<T>) -> Result<BoundPolicy<'a, T>> {
        if genome.layout() != &self.layout {
            return invalid("genome layout does not match the policy configuration");
        }
        let f = &self.config.attention.features;
        let map = match &self.map {
            Some(m) => Cow::Borrowed(m),
            None => {
                let out = f.output;
                let net = |name| {
                    LearnedFeatureNet::from_flat(f.d_qk, f.hidden, f.m, out, genome.slice(name)?)
                };
                let pair = LearnedFeaturePair {
                    query: net("phi_query")?,
                    key: net("phi_key")?,
                };
                Cow::Owned(FeatureMap::with_learned(*f, pair)?)
            }
        };
        let p_kl = match self.config.attention.mode {
            AttentionMode::Trans => Some(genome.matrix("p_kl")?),
            _ => None,
        };
        Ok(BoundPolicy {
            policy: self,
            map,
            proj: QkvProjection::new(
                genome.matrix("w_q")?,
                genome.matrix("w_k")?,
                genome.matrix("w_v")?,
            )?,
            p_kl,
            w1: genome.matrix("ctrl_w1")?,
            b1: genome.slice("ctrl_b1")?.to_vec(),
            w2: genome.matrix("ctrl_w2")?,
            b2: genome.slice("ctrl_b2")?.to_vec(),
        })
    }
}

/// A policy with its parameters unpacked.
#[derive(Clone, Debug)]
pub struct BoundPolicy<'a, T: Real> {
    policy: &'a Policy<T>,
    map: Cow<'a, FeatureMap<T>>,
    proj: QkvProjection<T>,
    p_kl: Option<Matrix<T>>,
    w1: Matrix<T>,
    b1: Vec<T>,
    w2: Matrix<T>,
    b2: Vec<T>,
}

impl<T: Real> BoundPolicy<'_, T> {
    /// Controller input: the attention output flattened, each selected
    /// value row followed by its patch center in `[-1, 1]²`.
    pub fn encode<R: Rng + ?Sized>(&self, frame: &ImageTensor<T>, rng: &mut R) -> Result<Vec<T>> {
        let c = &self.policy.config;
        if (frame.height(), frame.width(), frame.channels()) != c.image {
            return invalid(format!(
                "frame {}x{}x{} does not match policy input {:?}",
                frame.height(),
                frame.width(),
                frame.channels(),
                c.image
            ));
        }
        let grid = extract_patches(frame, c.patch_size, c.stride)?;
        let qkv = project_qkv(&grid.patches.hconcat(&self.policy.positions)?, &self.proj)?;
        let mut counter = MulCounter::new();
        let out = iap_forward(
            &c.attention,
            &self.map,
            &qkv.q,
            &qkv.k,
            &qkv.v,
            self.p_kl.as_ref(),
            rng,
            &mut counter,
        )?;
        let center = |i: usize| {
            let (oy, ox) = grid.positions[i];
            let half = T::lit(c.patch_size as f64 / 2.0);
            let norm = |o: usize, n: usize| {
                (T::from_usize_lossy(o) + half) / T::from_usize_lossy(n) * T::lit(2.0) - T::one()
            };
            [norm(oy, c.image.0), norm(ox, c.image.1)]
        };
        let mut input = Vec::with_capacity(c.controller_input()?);
        match out {
            AttentionOutput::Rank { result, values } => match c.attention.mode {
                AttentionMode::RankCompress => {
                    for (row, &i) in result.selected.iter().enumerate() {
                        input.extend_from_slice(values.row(row));
                        input.extend(center(i));
                    }
                }
                _ => {
                    for i in 0..values.rows() {
                        input.extend_from_slice(values.row(i));
                        input.extend(if result.mask[i] {
                            center(i)
                        } else {
                            [T::zero(); 2]
                        });
                    }
                }
            },
            AttentionOutput::Trans(m) => input.extend_from_slice(m.as_slice()),
        }
        Ok(input)
    }

    /// Action in `[-1, 1]²`.
    pub fn act<R: Rng + ?Sized>(
        &self,
        frame: &ImageTensor<T>,
        rng: &mut R,
    ) -> Result<[T; ACTION_DIM]> {
        let input = self.encode(frame, rng)?;
        let h: Vec<T> = self
            .w1
            .vecmat(&input)?
            .into_iter()
            .zip(&self.b1)
            .map(|(a, &b)| (a + b).tanh())
            .collect();
        let o = self.w2.vecmat(&h)?;
        Ok([(o[0] + self.b2[0]).tanh(), (o[1] + self.b2[1]).tanh()])
    }
}

/// One forward pass of the attention-bottleneck policy.
pub fn iap_policy_forward<T: Real, R: Rng + ?Sized>(
    frame: &ImageTensor<T>,
    genome: &PolicyGenome<T>,
    policy: &Policy<T>,
    rng: &mut R,
) -> Result<[T; ACTION_DIM]> {
    policy.bind(genome)?.act(frame, rng)
}

/// Resets `env` from `rng`, runs one episode and returns the summed reward.
pub fn rollout<T: Real, R: Rng + ?Sized>(
    env: &mut ToyVisionEnv,
    genome: &PolicyGenome<T>,
    policy: &Policy<T>,
    rng: &mut R,
) -> Result<f64> {
    let bound = policy.bind(genome)?;
    env.reset(rng)?;
    run_episode(env, &bound, rng)
}

pub(crate) fn run_episode<T: Real, R: Rng + ?Sized>(
    env: &mut ToyVisionEnv,
    bound: &BoundPolicy<'_, T>,
    rng: &mut R,
) -> Result<f64> {
    let mut total = 0.0;
    loop {
        let a = bound.act(&env.render::<T>()?, rng)?;
        let step = env.step([a[0].to_f64_lossy(), a[1].to_f64_lossy()])?;
        total += step.reward;
        if step.done {
            return Ok(total);
        }
    }
}

/// Convolutional reference: valid 2D convolutions, then a dense hidden
/// layer and the action head.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnSpec {
    pub image: (usize, usize, usize),
    pub channels: Vec<usize>,
    pub kernel: usize,
    pub stride: usize,
    pub dense: usize,
    pub outputs: usize,
}

impl CnnSpec {
    /// Three 3x3 stride-2 layers of 16, 32 and 32 channels, dense 16.
    pub fn baseline(image: (usize, usize, usize)) -> Self {
        Self {
            image,
            channels: vec![16, 32, 32],
            kernel: 3,
            stride: 2,
            dense: 16,
            outputs: ACTION_DIM,
        }
    }

    pub fn parameter_count(&self) -> Result<usize> {
        let (mut h, mut w, mut c) = self.image;
        let mut total = 0;
        for &out in &self.channels {
            if h < self.kernel || w < self.kernel || self.stride == 0 {
                return invalid(format!(
                    "{h}x{w} map too small for a {} kernel",
                    self.kernel
                ));
            }
            total += (self.kernel * self.kernel * c + 1) * out;
            h = (h - self.kernel) / self.stride + 1;
            w = (w - self.kernel) / self.stride + 1;
            c = out;
        }
        total += (h * w * c + 1) * self.dense;
        total += (self.dense + 1) * self.outputs;
        Ok(total)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParameterCount {
    pub iap: usize,
    pub cnn: usize,
    /// `cnn / iap`.
    pub ratio: f64,
}

pub fn parameter_count<T: Real>(config: &PolicyConfig<T>, cnn: &CnnSpec) -> Result<ParameterCount> {
    let iap = config.layout()?.total();
    let cnn = cnn.parameter_count()?;
    Ok(ParameterCount {
        iap,
        cnn,
        ratio: cnn as f64 / iap as f64,
    })
}

/// Positional width of the toy policy, small so keys are driven by color.
pub const TOY_POS_DIM: usize = 2;

/// Policy used by the toy task: positive features, rank-compress, top-`l`.
pub fn toy_policy_config<T: Real>(
    size: usize,
    patch_size: usize,
    l: usize,
    seed: u64,
) -> Result<PolicyConfig<T>> {
    let grid = size / patch_size;
    let features =
        FeatureMapSpec::new(FeatureKind::Positive, 16, 4).with_stream(RngStream::new(seed, 0xfea7));
    let attention = AttentionConfig::rank(
        features,
        AttentionMode::RankCompress,
        l.min(grid * grid).max(1),
    );
    let mut config = PolicyConfig::new((size, size, 3), patch_size, attention)?;
    config.d_pos = TOY_POS_DIM;
    Ok(config)
}
