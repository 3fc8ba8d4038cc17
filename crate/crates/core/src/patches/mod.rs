//! Image to patch-matrix conversion, positional encoding and the
//! query/key/value projections.
//!
//! Patch vectors are laid out row-major over the pixels of the patch with
//! the channel index innermost: entry `(py * p + px) * C + ch`.

mod image_io;

pub use image_io::{read_iapi, read_ppm, write_iapi, IAPI_MAGIC};

use crate::error::{invalid, Result};
use crate::numerics::Matrix;
use crate::scalar::Real;

/// Default width of the appended positional encoding.
pub const DEFAULT_POS_DIM: usize = 16;

/// `H x W x C` image with values in `[0, 1]`, stored row-major with
/// channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> ImageTensor<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return invalid(format!("image dims must be positive, got {height}x{width}"));
        }
        if channels != 3 && channels != 4 {
            return invalid(format!(
                "expected 3 (RGB) or 4 (RGBD) channels, got {channels}"
            ));
        }
        if data.len() != height * width * channels {
            return invalid(format!(
                "image data length {} does not match {height}x{width}x{channels}",
                data.len()
            ));
        }
        if let Some(v) = data.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return invalid(format!("pixel value {v} outside [0, 1]"));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[T] {
        let at = (y * self.width + x) * self.channels;
        &self.data[at..at + self.channels]
    }
}

/// Vectorized patches of an image on an `a x b` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub patches: Matrix<T>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_size: usize,
    pub stride: usize,
    pub channels: usize,
    /// Pixel origin `(row, col)` of each patch, in patch order.
    pub positions: Vec<(usize, usize)>,
}

impl<T: Real> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.patches.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.rows() == 0
    }

    /// Reassembles the covered image region from non-overlapping patches.
    pub fn assemble(&self) -> Result<ImageTensor<T>> {
        if self.stride != self.patch_size {
            return invalid("assemble needs stride == patch_size");
        }
        let (p, ch) = (self.patch_size, self.channels);
        let (h, w) = (self.grid_rows * p, self.grid_cols * p);
        let mut data = vec![T::zero(); h * w * ch];
        for (i, &(oy, ox)) in self.positions.iter().enumerate() {
            let row = self.patches.row(i);
            for py in 0..p {
                for px in 0..p {
                    let dst = ((oy + py) * w + ox + px) * ch;
                    let src = (py * p + px) * ch;
                    data[dst..dst + ch].copy_from_slice(&row[src..src + ch]);
                }
            }
        }
        ImageTensor::new(h, w, ch, data)
    }
}

/// Grid extent `(a, b)` for the given image and patch geometry.
pub fn grid_dims(
    height: usize,
    width: usize,
    patch_size: usize,
    stride: usize,
) -> Result<(usize, usize)> {
    if patch_size == 0 || stride == 0 {
        return invalid("patch size and stride must be positive");
    }
    if stride > patch_size {
        return invalid(format!("stride {stride} exceeds patch size {patch_size}"));
    }
    if patch_size > height || patch_size > width {
        return invalid(format!(
            "patch size {patch_size} exceeds image {height}x{width}"
        ));
    }
    Ok((
        (height - patch_size) / stride + 1,
        (width - patch_size) / stride + 1,
    ))
}

/// Cuts `img` into `patch_size x patch_size` patches every `stride` pixels.
/// Border pixels not reached by a full patch are dropped.
pub fn extract_patches<T: Real>(
    img: &ImageTensor<T>,
    patch_size: usize,
    stride: usize,
) -> Result<PatchGrid<T>> {
    let (a, b) = grid_dims(img.height, img.width, patch_size, stride)?;
    let ch = img.channels;
    let c = patch_size * patch_size * ch;
    let mut data = Vec::with_capacity(a * b * c);
    let mut positions = Vec::with_capacity(a * b);
    for i in 0..a {
        for j in 0..b {
            let (oy, ox) = (i * stride, j * stride);
            positions.push((oy, ox));
            for py in 0..patch_size {
                let start = ((oy + py) * img.width + ox) * ch;
                data.extend_from_slice(&img.data[start..start + patch_size * ch]);
            }
        }
    }
    Ok(PatchGrid {
        patches: Matrix::from_raw(a * b, c, data),
        grid_rows: a,
        grid_cols: b,
        patch_size,
        stride,
        channels: ch,
        positions,
    })
}

/// Patches with a positional encoding appended as extra columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EnrichedPatches<T> {
    pub features: Matrix<T>,
    /// Width of the raw patch part (`c`); encoding columns follow.
    pub patch_width: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub positions: Vec<(usize, usize)>,
}

impl<T: Real> EnrichedPatches<T> {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.rows() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// 2D sinusoidal encoding of grid cell `(i, j)`: the first half of the
/// columns encodes the row index, the second half the column index.
pub fn position_encoding<T: Real>(i: usize, j: usize, d_pos: usize) -> Vec<T> {
    let half = d_pos / 2;
    let mut out = Vec::with_capacity(d_pos);
    for pos in [i, j] {
        let pos = pos as f64;
        for k in 0..half {
            let freq = 10000f64.powf(-((2 * (k / 2)) as f64) / half as f64);
            let angle = pos * freq;
            out.push(T::lit(if k % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

pub fn add_position_encoding<T: Real>(
    grid: &PatchGrid<T>,
    d_pos: usize,
) -> Result<EnrichedPatches<T>> {
    if d_pos < 2 || d_pos % 2 != 0 {
        return invalid(format!(
            "positional encoding width must be even and >= 2, got {d_pos}"
        ));
    }
    let c = grid.patches.cols();
    let width = c + d_pos;
    let mut data = Vec::with_capacity(grid.len() * width);
    for r in 0..grid.len() {
        data.extend_from_slice(grid.patches.row(r));
        data.extend(position_encoding::<T>(
            r / grid.grid_cols,
            r % grid.grid_cols,
            d_pos,
        ));
    }
    Ok(EnrichedPatches {
        features: Matrix::from_raw(grid.len(), width, data),
        patch_width: c,
        grid_rows: grid.grid_rows,
        grid_cols: grid.grid_cols,
        positions: grid.positions.clone(),
    })
}

/// Trainable projections producing queries, keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct QkvProjection<T> {
    pub w_q: Matrix<T>,
    pub w_k: Matrix<T>,
    pub w_v: Matrix<T>,
}

impl<T: Real> QkvProjection<T> {
    pub fn new(w_q: Matrix<T>, w_k: Matrix<T>, w_v: Matrix<T>) -> Result<Self> {
        if w_q.shape() != w_k.shape() {
            return invalid(format!(
                "W_Q {:?} and W_K {:?} must have the same shape",
                w_q.shape(),
                w_k.shape()
            ));
        }
        if w_v.rows() != w_q.rows() {
            return invalid("W_V must have as many rows as W_Q");
        }
        Ok(Self { w_q, w_k, w_v })
    }

    pub fn input_dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn qk_dim(&self) -> usize {
        self.w_q.cols()
    }

    pub fn value_dim(&self) -> usize {
        self.w_v.cols()
    }
}

/// Queries, keys and values of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Qkv<T> {
    pub q: Matrix<T>,
    pub k: Matrix<T>,
    pub v: Matrix<T>,
}

pub fn project_qkv<T: Real>(x: &Matrix<T>, proj: &QkvProjection<T>) -> Result<Qkv<T>> {
    if x.cols() != proj.input_dim() {
        return invalid(format!(
            "enriched width {} does not match projection input {}",
            x.cols(),
            proj.input_dim()
        ));
    }
    Ok(Qkv {
        q: x.matmul(&proj.w_q)?,
        k: x.matmul(&proj.w_k)?,
        v: x.matmul(&proj.w_v)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> ImageTensor<f64> {
        let n = (h * w * c) as f64;
        let mut k = 0.0;
        ImageTensor::from_fn(h, w, c, |_, _, _| {
            k += 1.0;
            k / n
        })
        .unwrap()
    }

    #[test]
    fn patch_counts() {
        let g = extract_patches(&ramp(4, 4, 3), 2, 2).unwrap();
        assert_eq!((g.len(), g.patches.cols()), (4, 12));
        let g = extract_patches(&ramp(32, 32, 3), 1, 1).unwrap();
        assert_eq!(g.len(), 1024);
        assert_eq!(grid_dims(240, 320, 2, 2).unwrap(), (120, 160));
        assert_eq!(120 * 160, 19200);
    }

    #[test]
    fn patch_layout_is_row_major_channel_innermost() {
        let img = ramp(4, 4, 3);
        let g = extract_patches(&img, 2, 2).unwrap();
        // patch 1 has origin (0, 2)
        assert_eq!(g.positions[1], (0, 2));
        let row = g.patches.row(1);
        assert_eq!(&row[0..3], img.pixel(0, 2));
        assert_eq!(&row[3..6], img.pixel(0, 3));
        assert_eq!(&row[6..9], img.pixel(1, 2));
    }

    #[test]
    fn overlap_and_dropped_border() {
        let img = ramp(5, 5, 3);
        let g = extract_patches(&img, 2, 1).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (4, 4));
        let g = extract_patches(&img, 2, 2).unwrap();
        assert_eq!((g.grid_rows, g.grid_cols), (2, 2));
        assert!(extract_patches(&img, 6, 1).is_err());
        assert!(extract_patches(&img, 2, 3).is_err());
    }

    #[test]
    fn round_trip_with_disjoint_patches() {
        let img = ramp(6, 4, 4);
        let g = extract_patches(&img, 2, 2).unwrap();
        assert_eq!(g.assemble().unwrap(), img);
    }

    #[test]
    fn encoding_at_origin() {
        let e = position_encoding::<f64>(0, 0, 16);
        for (k, v) in e.iter().enumerate() {
            let expect = if (k % 8) % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(*v, expect);
        }
    }

    #[test]
    fn encodings_distinct_and_bounded() {
        let (a, b) = (24, 24);
        let codes: Vec<Vec<f64>> = (0..a * b)
            .map(|r| position_encoding(r / b, r % b, DEFAULT_POS_DIM))
            .collect();
        for (x, cx) in codes.iter().enumerate() {
            assert!(cx.iter().all(|v| (-1.0..=1.0).contains(v)));
            for cy in &codes[x + 1..] {
                let gap = cx
                    .iter()
                    .zip(cy)
                    .map(|(p, q)| (p - q).abs())
                    .fold(0.0, f64::max);
                assert!(gap > 1e-9);
            }
        }
    }

    #[test]
    fn enriched_width_and_prefix() {
        let g = extract_patches(&ramp(4, 4, 3), 2, 2).unwrap();
        let e = add_position_encoding(&g, 6).unwrap();
        assert_eq!(e.width(), 12 + 6);
        for r in 0..e.len() {
            assert_eq!(&e.features.row(r)[..12], g.patches.row(r));
        }
        assert!(add_position_encoding(&g, 5).is_err());
        assert!(add_position_encoding(&g, 0).is_err());
    }

    #[test]
    fn projection_examples() {
        let g = extract_patches(&ramp(4, 4, 3), 2, 2).unwrap();
        let e = add_position_encoding(&g, 4).unwrap();
        let w = e.width();
        let w_v = Matrix::from_fn(w, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        let w_k = Matrix::from_fn(w, 2, |r, c| (r + c) as f64 * 0.1);
        let proj = QkvProjection::new(Matrix::zeros(w, 2), w_k, w_v).unwrap();
        let qkv = project_qkv(&e.features, &proj).unwrap();
        assert_eq!(qkv.q, Matrix::zeros(4, 2));
        assert_eq!(qkv.k.shape(), (4, 2));
        for r in 0..4 {
            assert_eq!(qkv.v.row(r), &e.features.row(r)[..3]);
        }
        assert!(project_qkv(&g.patches, &proj).is_err());
    }
}
