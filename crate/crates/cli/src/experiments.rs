//! Workloads shared by the commands and the acceptance suite: timing of
//! implicit against explicit attention and top-l accuracy of random
//! features on image-patch queries and keys.

use std::time::Instant;

use iap_core::alloc_stats::measure_peak;
use iap_core::attention::{attention_matrix, brute_force_scores, implicit_attention, rank_scores, select_top_l, ScoreRow};
use iap_core::features::{ExactKernel, FeatureKind, FeatureMap, FeatureMapSpec, Role};
use iap_core::numerics::gaussian_matrix;
use iap_core::patches::{add_position_encoding, extract_patches, ImageTensor, DEFAULT_POS_DIM};
use iap_core::{IapError, Matrix, Result, RngStream};
use rand::Rng;

use crate::config::KernelChoice;

pub fn feature_spec(kernel: KernelChoice, m: usize, d_qk: usize, stream: RngStream) -> FeatureMapSpec {
    match kernel {
        KernelChoice::Positive => FeatureMapSpec::new(FeatureKind::Positive, m, d_qk).with_stream(stream),
        KernelChoice::Trig => FeatureMapSpec::new(FeatureKind::Trig, m, d_qk).with_stream(stream),
        KernelChoice::Relu => FeatureMapSpec::relu(d_qk),
    }
}

/// Queries, keys and values with i.i.d. `N(0, 1/d_qk)` query/key entries.
pub fn bench_inputs(len: usize, d_qk: usize, d_v: usize, seed: u64) -> Result<(Matrix<f64>, Matrix<f64>, Matrix<f64>)> {
    let s = RngStream::new(seed, len as u64);
    let scale = 1.0 / (d_qk as f64).sqrt();
    Ok((
        gaussian_matrix(len, d_qk, &s.substream(0))?.scale(scale),
        gaussian_matrix(len, d_qk, &s.substream(1))?.scale(scale),
        gaussian_matrix(len, d_v, &s.substream(2))?,
    ))
}

/// `Q′ (K′ᵀ V)` including the feature maps.
pub fn implicit_forward(map: &FeatureMap<f64>, q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>) -> Result<Matrix<f64>> {
    implicit_attention(&map.apply(q, Role::Query)?, &map.apply(k, Role::Key)?, v, false)
}

/// `A V` with `A` materialized under `kernel`.
pub fn explicit_forward(
    kernel: &ExactKernel,
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    v: &Matrix<f64>,
    cap: usize,
) -> Result<Matrix<f64>> {
    attention_matrix(q, k, kernel, cap)?.matmul(v)
}

/// Sum of all entries; agrees between mechanisms to print precision.
pub fn output_checksum(m: &Matrix<f64>) -> f64 {
    m.as_slice().iter().sum()
}

/// Median, min and max wallclock of `repeats` timed runs after one
/// untimed warm-up, plus the warm-up's peak heap and output.
pub struct Timing {
    pub median_ns: u128,
    pub min_ns: u128,
    pub max_ns: u128,
    pub peak_bytes: usize,
    pub output: Matrix<f64>,
}

pub fn time_runs(repeats: usize, mut f: impl FnMut() -> Result<Matrix<f64>>) -> Result<Timing> {
    let (output, peak_bytes) = measure_peak(&mut f);
    let output = output?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        std::hint::black_box(f()?);
        times.push(t.elapsed().as_nanos());
    }
    times.sort_unstable();
    Ok(Timing {
        median_ns: times[times.len() / 2],
        min_ns: times[0],
        max_ns: times[times.len() - 1],
        peak_bytes,
        output,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRecord {
    pub len: usize,
    pub mechanism: String,
    pub m: usize,
    pub median_ns: u128,
    pub min_ns: u128,
    pub max_ns: u128,
    pub peak_bytes: usize,
    pub checksum: Option<f64>,
    pub skipped: bool,
}

impl BenchRecord {
    pub const HEADER: &'static str = "L,mechanism,m,wallclock_ns,wallclock_ns_min,wallclock_ns_max,peak_bytes,checksum,status";

    pub fn csv_row(&self) -> String {
        if self.skipped {
            return format!("{},{},{},,,,,,skipped", self.len, self.mechanism, self.m);
        }
        format!(
            "{},{},{},{},{},{},{},{:.9e},ok",
            self.len,
            self.mechanism,
            self.m,
            self.median_ns,
            self.min_ns,
            self.max_ns,
            self.peak_bytes,
            self.checksum.unwrap_or(f64::NAN)
        )
    }
}

/// Implicit and explicit rows for one `(L, kernel)` point; the explicit
/// row is a skip marker above `cap`.
pub fn bench_point(
    len: usize,
    kernel: KernelChoice,
    m: usize,
    d_qk: usize,
    d_v: usize,
    repeats: usize,
    seed: u64,
    cap: usize,
) -> Result<Vec<BenchRecord>> {
    let (q, k, v) = bench_inputs(len, d_qk, d_v, seed)?;
    let map = FeatureMap::new(feature_spec(kernel, m, d_qk, RngStream::new(seed, 0xbe)))?;
    let width = map.output_dim();
    let record = |mechanism: String, t: Option<Timing>| match t {
        Some(t) => BenchRecord {
            len,
            mechanism,
            m: width,
            median_ns: t.median_ns,
            min_ns: t.min_ns,
            max_ns: t.max_ns,
            peak_bytes: t.peak_bytes,
            checksum: Some(output_checksum(&t.output)),
            skipped: false,
        },
        None => BenchRecord {
            len,
            mechanism,
            m: width,
            median_ns: 0,
            min_ns: 0,
            max_ns: 0,
            peak_bytes: 0,
            checksum: None,
            skipped: true,
        },
    };
    let implicit = time_runs(repeats, || implicit_forward(&map, &q, &k, &v))?;
    let mut rows = vec![record(format!("implicit-{}", kernel.name()), Some(implicit))];
    let exact = map.exact_kernel().expect("random and relu maps have an exact kernel");
    let explicit = if len <= cap {
        Some(time_runs(repeats, || explicit_forward(&exact, &q, &k, &v, cap))?)
    } else {
        None
    };
    rows.push(record(format!("explicit-{}", kernel.name()), explicit));
    Ok(rows)
}

/// Colored discs and bars on a smooth background, values in `[0, 1]`.
pub fn synthetic_scene(size: usize, seed: u64) -> Result<ImageTensor<f64>> {
    let mut rng = RngStream::new(seed, 0x5ce).generator();
    let shapes: Vec<(f64, f64, f64, [f64; 3])> = (0..12)
        .map(|_| {
            let c = [rng.random::<f64>(), rng.random::<f64>(), rng.random::<f64>()];
            (
                rng.random::<f64>() * size as f64,
                rng.random::<f64>() * size as f64,
                2.0 + rng.random::<f64>() * size as f64 / 8.0,
                c,
            )
        })
        .collect();
    let s = size as f64;
    ImageTensor::from_fn(size, size, 3, |y, x, ch| {
        let (fy, fx) = (y as f64, x as f64);
        let mut v = 0.25 + 0.2 * (fx / s) + 0.1 * (fy / s) * ch as f64;
        for &(cy, cx, r, c) in &shapes {
            if (fy - cy).hypot(fx - cx) <= r {
                v = c[ch];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// Queries and keys from patches of a synthetic scene with positional
/// codes and random `N(0, 1/d)` projections.
pub fn scene_queries_keys(image_size: usize, d_qk: usize, seed: u64) -> Result<(Matrix<f64>, Matrix<f64>)> {
    let img = synthetic_scene(image_size, seed)?;
    let x = add_position_encoding(&extract_patches(&img, 4, 4)?, DEFAULT_POS_DIM)?.features;
    let d = x.cols();
    let s = RngStream::new(seed, 0x9e);
    let scale = 1.0 / (d as f64).sqrt();
    let w_q = gaussian_matrix(d, d_qk, &s.substream(0))?.scale(scale);
    let w_k = gaussian_matrix(d, d_qk, &s.substream(1))?.scale(scale);
    Ok((x.matmul(&w_q)?, x.matmul(&w_k)?))
}

/// Agreement of estimated and exact column scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Agreement {
    /// `|top-l(estimate) ∩ top-l(exact)| / l`.
    pub overlap: f64,
    pub max_abs_err: f64,
    pub mse: f64,
}

pub fn score_agreement(
    q: &Matrix<f64>,
    k: &Matrix<f64>,
    kernel: KernelChoice,
    m: usize,
    top_l: usize,
    stream: RngStream,
    cap: usize,
) -> Result<Agreement> {
    if q.rows() > cap {
        return Err(IapError::ResourceGuard(format!(
            "exact oracle over L = {} exceeds the cap {cap}",
            q.rows()
        )));
    }
    let map = FeatureMap::new(feature_spec(kernel, m, q.cols(), stream))?;
    let exact_kernel = map.exact_kernel().expect("random and relu maps have an exact kernel");
    let exact = brute_force_scores(q, k, &exact_kernel, &ScoreRow::Ones, false)?;
    let approx = rank_scores(&map.apply(q, Role::Query)?, &map.apply(k, Role::Key)?, &ScoreRow::Ones)?;
    let a = select_top_l(&exact, top_l)?;
    let b = select_top_l(&approx, top_l)?;
    let shared = a.iter().filter(|i| b.contains(i)).count();
    let diffs = exact.iter().zip(&approx).map(|(x, y)| (x - y).abs());
    let max_abs_err = diffs.clone().fold(0.0, f64::max);
    let mse = diffs.map(|d| d * d).sum::<f64>() / exact.len() as f64;
    Ok(Agreement {
        overlap: shared as f64 / top_l as f64,
        max_abs_err,
        mse,
    })
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
