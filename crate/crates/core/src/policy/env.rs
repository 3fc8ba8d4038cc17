//! Crosshair-steering task on procedurally textured backgrounds.
//!
//! The agent sees a square view centered on its crosshair. A red target
//! blob sits somewhere in view; each step moves the crosshair by at most
//! `speed` and pays the capped decrease in distance to the target.

use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::splitmix64;
use crate::patches::ImageTensor;
use crate::scalar::Real;

/// Texture seeds `[0, TEST_SEED_BASE)` are for training, the rest held out.
pub const TEST_SEED_BASE: u64 = 1 << 32;

/// Pixel spacing of the background noise lattice.
const LATTICE: f64 = 4.0;

const TARGET_COLOR: [f64; 3] = [0.95, 0.1, 0.1];
const TARGET_RADIUS: f64 = 1.5;

const TRAIN_PALETTE: [[f64; 3]; 4] = [
    [0.2, 0.5, 0.3],
    [0.3, 0.35, 0.6],
    [0.45, 0.45, 0.4],
    [0.1, 0.3, 0.2],
];
const TEST_PALETTE: [[f64; 3]; 4] = [
    [0.6, 0.5, 0.2],
    [0.5, 0.25, 0.5],
    [0.2, 0.6, 0.6],
    [0.7, 0.7, 0.7],
];

/// `clamp(x_t - x_prev, -v_cap, v_cap)`.
pub fn capped_velocity_reward(x_t: f64, x_prev: f64, v_cap: f64) -> Result<f64> {
    if !(v_cap > 0.0) {
        return invalid(format!("v_cap must be positive, got {v_cap}"));
    }
    Ok((x_t - x_prev).clamp(-v_cap, v_cap))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TextureSet {
    Train,
    Test,
}

impl TextureSet {
    pub fn draw<R: Rng + ?Sized>(self, rng: &mut R) -> u64 {
        match self {
            TextureSet::Train => rng.random_range(0..TEST_SEED_BASE),
            TextureSet::Test => rng.random_range(TEST_SEED_BASE..u64::MAX),
        }
    }

    pub fn contains(self, seed: u64) -> bool {
        (seed < TEST_SEED_BASE) == (self == TextureSet::Train)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnvConfig {
    /// Side of the square view in pixels.
    pub size: usize,
    pub horizon: usize,
    pub v_cap: f64,
    /// Largest crosshair displacement per step.
    pub speed: f64,
    /// Range of the initial crosshair-target distance.
    pub min_start: f64,
    pub max_start: f64,
    pub textures: TextureSet,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            size: 16,
            horizon: 50,
            v_cap: 1.0,
            speed: 1.0,
            min_start: 3.0,
            max_start: 6.0,
            textures: TextureSet::Train,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.size < 2 {
            return invalid(format!("view size must be >= 2, got {}", self.size));
        }
        if self.horizon == 0 {
            return invalid("horizon must be positive");
        }
        if !(self.v_cap > 0.0 && self.speed > 0.0) {
            return invalid("v_cap and speed must be positive");
        }
        let half = self.size as f64 / 2.0 - TARGET_RADIUS;
        if !(0.0 <= self.min_start && self.min_start <= self.max_start && self.max_start <= half) {
            return invalid(format!(
                "start distances must satisfy 0 <= min <= max <= {half}"
            ));
        }
        Ok(())
    }
}

/// Outcome of one environment step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub reward: f64,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyVisionEnv {
    config: EnvConfig,
    texture_seed: u64,
    /// World coordinates `(x, y)`.
    target: (f64, f64),
    crosshair: (f64, f64),
    start_distance: f64,
    t: usize,
}

impl ToyVisionEnv {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let mut env = Self {
            config,
            texture_seed: 0,
            target: (0.0, 0.0),
            crosshair: (0.0, 0.0),
            start_distance: 0.0,
            t: 0,
        };
        env.reset_with(0, (config.min_start, 0.0))?;
        Ok(env)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    /// Random texture from the configured set, crosshair at a random world
    /// point and the target at a random offset within the start range.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let seed = self.config.textures.draw(rng);
        let r = rng.random_range(self.config.min_start..=self.config.max_start);
        let a = rng.random_range(0.0..std::f64::consts::TAU);
        self.reset_with(seed, (r * a.cos(), r * a.sin()))?;
        self.crosshair = (rng.random_range(-64.0..64.0), rng.random_range(-64.0..64.0));
        self.target = (
            self.crosshair.0 + r * a.cos(),
            self.crosshair.1 + r * a.sin(),
        );
        Ok(())
    }

    /// Deterministic reset: crosshair at the origin, target at `offset`.
    pub fn reset_with(&mut self, texture_seed: u64, offset: (f64, f64)) -> Result<()> {
        let d = offset.0.hypot(offset.1);
        let half = self.config.size as f64 / 2.0;
        if offset.0.abs() >= half || offset.1.abs() >= half {
            return invalid(format!("target offset {offset:?} outside the view"));
        }
        self.texture_seed = texture_seed;
        self.crosshair = (0.0, 0.0);
        self.target = offset;
        self.start_distance = d;
        self.t = 0;
        Ok(())
    }

    pub fn texture_seed(&self) -> u64 {
        self.texture_seed
    }

    pub fn target(&self) -> (f64, f64) {
        self.target
    }

    pub fn crosshair(&self) -> (f64, f64) {
        self.crosshair
    }

    pub fn time(&self) -> usize {
        self.t
    }

    pub fn distance(&self) -> f64 {
        (self.target.0 - self.crosshair.0).hypot(self.target.1 - self.crosshair.1)
    }

    /// Best achievable return: the shortest path covered at the capped speed.
    pub fn max_return(&self) -> f64 {
        let per_step = self.config.speed.min(self.config.v_cap);
        self.start_distance
            .min(per_step * self.config.horizon as f64)
    }

    /// Action heading straight for the target, shortened on the last step.
    pub fn oracle_action(&self) -> [f64; 2] {
        let (dx, dy) = (
            self.target.0 - self.crosshair.0,
            self.target.1 - self.crosshair.1,
        );
        let d = dx.hypot(dy);
        if d == 0.0 {
            return [0.0, 0.0];
        }
        let s = (d / self.config.speed).min(1.0) / d;
        [dx * s, dy * s]
    }

    /// Moves by `speed * a`, with `a` projected onto the unit disc.
    pub fn step(&mut self, action: [f64; 2]) -> Result<Step> {
        if self.t >= self.config.horizon {
            return Err(crate::IapError::State("episode already finished".into()));
        }
        let [mut ax, mut ay] = action;
        if !(ax.is_finite() && ay.is_finite()) {
            return invalid(format!("non-finite action {action:?}"));
        }
        let n = ax.hypot(ay);
        if n > 1.0 {
            ax /= n;
            ay /= n;
        }
        let before = -self.distance();
        self.crosshair.0 += self.config.speed * ax;
        self.crosshair.1 += self.config.speed * ay;
        let reward = capped_velocity_reward(-self.distance(), before, self.config.v_cap)?;
        self.t += 1;
        Ok(Step {
            reward,
            done: self.t >= self.config.horizon,
        })
    }

    /// RGB view centered on the crosshair.
    pub fn render<T: Real>(&self) -> Result<ImageTensor<T>> {
        let n = self.config.size;
        let half = n as f64 / 2.0;
        let palette = if self.texture_seed < TEST_SEED_BASE {
            &TRAIN_PALETTE
        } else {
            &TEST_PALETTE
        };
        let mut data = Vec::with_capacity(n * n * 3);
        for py in 0..n {
            for px in 0..n {
                let wx = self.crosshair.0 - half + px as f64 + 0.5;
                let wy = self.crosshair.1 - half + py as f64 + 0.5;
                let rgb = if (wx - self.target.0).hypot(wy - self.target.1) <= TARGET_RADIUS {
                    TARGET_COLOR
                } else {
                    texture(self.texture_seed, palette, wx, wy)
                };
                data.extend(rgb.map(|v| T::lit(v.clamp(0.0, 1.0))));
            }
        }
        ImageTensor::new(n, n, 3, data)
    }
}

/// Bilinear value noise over palette colors keyed by lattice cell.
fn texture(seed: u64, palette: &[[f64; 3]; 4], wx: f64, wy: f64) -> [f64; 3] {
    let (gx, gy) = (wx / LATTICE, wy / LATTICE);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (fx, fy) = (gx - x0, gy - y0);
    let node = |ix: f64, iy: f64| {
        let h = splitmix64(seed ^ splitmix64((ix as i64 as u64) ^ splitmix64(iy as i64 as u64)));
        let shade = 0.2 * (((h >> 8) % 1000) as f64 / 1000.0 - 0.5);
        palette[(h % 4) as usize].map(|c| c + shade)
    };
    let (a, b, c, d) = (
        node(x0, y0),
        node(x0 + 1.0, y0),
        node(x0, y0 + 1.0),
        node(x0 + 1.0, y0 + 1.0),
    );
    std::array::from_fn(|ch| {
        let top = a[ch] * (1.0 - fx) + b[ch] * fx;
        let bottom = c[ch] * (1.0 - fx) + d[ch] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}
