//! Image data model shared by every stage of the pipeline.
//!
//! Row index is depth (row 0 touches the transducer face), column index is
//! lateral position. All geometry is expressed in pixels.

use std::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major real-valued 2D grid with no range restriction.
///
/// Used for intermediate filter responses (band-passed images, Riesz
/// components) that are signed or unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::arg(format!("grid dimensions must be positive, got {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::arg(format!(
                "grid data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "grid dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    /// Access with replicate (clamp-to-edge) boundary handling.
    #[inline]
    pub fn get_clamped(&self, row: isize, col: isize) -> f64 {
        let r = row.clamp(0, self.height as isize - 1) as usize;
        let c = col.clamp(0, self.width as isize - 1) as usize;
        self.data[r * self.width + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pixelwise combination of two equally sized grids.
    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_same_dims(other)?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same_dims(&self, other: &Grid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::arg(format!(
                "dimension mismatch: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Min-max rescale to [0,1]. A constant grid maps to all zeros.
    pub fn rescale_unit(&self) -> Frame {
        let (lo, hi) = self.min_max();
        let span = hi - lo;
        if !(span > 0.0) || !span.is_finite() {
            return Frame(Grid::zeros(self.height, self.width));
        }
        Frame(self.map(|v| ((v - lo) / span).clamp(0.0, 1.0)))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A single b-mode frame: a [`Grid`] whose values are finite and in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Frame(Grid);

impl Frame {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::try_from_grid(Grid::new(height, width, data)?)
    }

    pub fn try_from_grid(grid: Grid) -> Result<Self> {
        if let Some(bad) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::arg(format!("frame value {bad} outside [0,1]")));
        }
        Ok(Frame(grid))
    }

    /// Clamps every value into [0,1]; non-finite values become 0.
    pub fn from_grid_clamped(grid: Grid) -> Self {
        Frame(grid.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Frame(Grid::zeros(height, width))
    }

    pub fn as_grid(&self) -> &Grid {
        &self.0
    }

    pub fn into_grid(self) -> Grid {
        self.0
    }

    /// Bilinear resize with half-pixel centres. Equal sizes are an exact copy.
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Frame> {
        if height == 0 || width == 0 {
            return Err(Error::arg("target size must be positive"));
        }
        if (height, width) == self.dims() {
            return Ok(self.clone());
        }
        let (sh, sw) = self.dims();
        let map_axis = |dst: usize, src_n: usize, dst_n: usize| {
            let x = ((dst as f64 + 0.5) * src_n as f64 / dst_n as f64 - 0.5)
                .clamp(0.0, (src_n - 1) as f64);
            let i0 = x.floor() as usize;
            let i1 = (i0 + 1).min(src_n - 1);
            (i0, i1, x - i0 as f64)
        };
        let rows: Vec<_> = (0..height).map(|r| map_axis(r, sh, height)).collect();
        let cols: Vec<_> = (0..width).map(|c| map_axis(c, sw, width)).collect();
        let grid = Grid::from_fn(height, width, |r, c| {
            let (r0, r1, fr) = rows[r];
            let (c0, c1, fc) = cols[c];
            let top = self.get(r0, c0) * (1.0 - fc) + self.get(r0, c1) * fc;
            let bottom = self.get(r1, c0) * (1.0 - fc) + self.get(r1, c1) * fc;
            top * (1.0 - fr) + bottom * fr
        });
        Ok(Frame::from_grid_clamped(grid))
    }
}

impl Deref for Frame {
    type Target = Grid;

    fn deref(&self) -> &Grid {
        &self.0
    }
}

/// An ordered sweep of equally sized frames.
#[derive(Debug, Clone)]
pub struct VideoSequence {
    frames: Vec<Frame>,
    frame_rate: f64,
}

impl VideoSequence {
    pub fn new(frames: Vec<Frame>, frame_rate: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::arg(format!(
                "a sequence needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let dims = frames[0].dims();
        if let Some((i, f)) = frames.iter().enumerate().find(|(_, f)| f.dims() != dims) {
            return Err(Error::arg(format!(
                "frame {i} is {}x{}, expected {}x{}",
                f.height(),
                f.width(),
                dims.0,
                dims.1
            )));
        }
        Ok(Self { frames, frame_rate })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Indices `(t, t + separation)` with `t` uniform in `[0, len - separation)`,
    /// drawn with replacement from a generator seeded by `seed`.
    pub fn pair_indices(&self, separation: usize, count: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
        if self.len() <= separation {
            return Err(Error::arg(format!(
                "sequence of {} frames is too short for separation {separation}",
                self.len()
            )));
        }
        if count == 0 {
            return Err(Error::arg("pair count must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let upper = self.len() - separation;
        Ok((0..count)
            .map(|_| {
                let t = rng.random_range(0..upper);
                (t, t + separation)
            })
            .collect())
    }

    pub fn frame_pairs(&self, separation: usize, count: usize, seed: u64) -> Result<Vec<(&Frame, &Frame)>> {
        Ok(self
            .pair_indices(separation, count, seed)?
            .into_iter()
            .map(|(a, b)| (&self.frames[a], &self.frames[b]))
            .collect())
    }
}

/// Network input for one frame: the TGA frame followed by one bone map per scale.
#[derive(Debug, Clone)]
pub struct ScaleStack {
    channels: Vec<Frame>,
    scales: Vec<f64>,
}

impl ScaleStack {
    pub fn new(channels: Vec<Frame>, scales: Vec<f64>) -> Result<Self> {
        if channels.len() != scales.len() + 1 {
            return Err(Error::arg(format!(
                "scale stack needs {} channels for {} scales, got {}",
                scales.len() + 1,
                scales.len(),
                channels.len()
            )));
        }
        let dims = channels[0].dims();
        if channels.iter().any(|c| c.dims() != dims) {
            return Err(Error::arg("scale stack channels differ in size"));
        }
        Ok(Self { channels, scales })
    }

    pub fn channels(&self) -> &[Frame] {
        &self.channels
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }
}

/// Pixel rectangle, `top`/`left` inclusive and `bottom`/`right` exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RectRoi {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl RectRoi {
    pub fn new(top: usize, left: usize, bottom: usize, right: usize) -> Result<Self> {
        let roi = Self { top, left, bottom, right };
        if top >= bottom || left >= right {
            return Err(Error::arg(format!("degenerate ROI {roi:?}")));
        }
        Ok(roi)
    }

    pub fn whole(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            bottom: height,
            right: width,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.top >= self.bottom || self.left >= self.right || self.bottom > height || self.right > width {
            return Err(Error::arg(format!("ROI {self:?} invalid for {height}x{width} image")));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.bottom - self.top
    }

    pub fn width(&self) -> usize {
        self.right - self.left
    }

    pub fn area(&self) -> usize {
        self.height() * self.width()
    }

    pub fn contains_pixel(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom).contains(&row) && (self.left..self.right).contains(&col)
    }

    /// Whether a continuous pixel coordinate lies on the area covered by the
    /// ROI's pixels (pixel `i` spans `[i - 0.5, i + 0.5]`), boundary included.
    pub fn contains_point(&self, row: f64, col: f64) -> bool {
        row >= self.top as f64 - 0.5
            && row <= self.bottom as f64 - 0.5
            && col >= self.left as f64 - 0.5
            && col <= self.right as f64 - 0.5
    }
}

/// Keypoints of one frame in pixel coordinates `(row, col)` of a
/// `resolution`-sized image.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
    pub resolution: (usize, usize),
}

impl KeypointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Maps normalized `[-1,1]` coordinates onto pixel centres: -1 is pixel
    /// 0 and +1 is pixel `n - 1`.
    pub fn from_normalized(coords: &[[f64; 2]], resolution: (usize, usize)) -> Self {
        let to_px = |v: f64, n: usize| (v.clamp(-1.0, 1.0) + 1.0) * 0.5 * (n as f64 - 1.0);
        Self {
            points: coords
                .iter()
                .map(|&[r, c]| [to_px(r, resolution.0), to_px(c, resolution.1)])
                .collect(),
            resolution,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sequence(n: usize) -> VideoSequence {
        let frames = (0..n)
            .map(|i| Frame::constant(4, 4, i as f64 / n as f64).unwrap())
            .collect();
        VideoSequence::new(frames, 25.0).unwrap()
    }

    #[test]
    fn frame_rejects_out_of_range_values() {
        assert!(Frame::new(1, 2, vec![0.5, 1.5]).is_err());
        assert!(Frame::new(1, 2, vec![0.5, f64::NAN]).is_err());
        assert!(Frame::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn identity_resize_is_exact() {
        let f = Frame::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(f.resize_bilinear(2, 2).unwrap(), f);
    }

    #[test]
    fn resize_preserves_constants() {
        let f = Frame::constant(7, 13, 128.0 / 255.0).unwrap();
        let g = f.resize_bilinear(32, 5).unwrap();
        assert!(g.data().iter().all(|&v| (v - 128.0 / 255.0).abs() < 1e-12));
    }

    #[test]
    fn pairs_have_exact_gap() {
        let seq = sequence(256);
        let pairs = seq.pair_indices(4, 500, 7).unwrap();
        assert_eq!(pairs.len(), 500);
        assert!(pairs.iter().all(|&(a, b)| b == a + 4 && b < 256));
    }

    #[test]
    fn zero_separation_pairs_a_frame_with_itself() {
        let seq = sequence(10);
        for (a, b) in seq.frame_pairs(0, 20, 1).unwrap() {
            assert!(std::ptr::eq(a, b));
        }
    }

    #[test]
    fn pairs_are_seed_deterministic() {
        let seq = sequence(50);
        assert_eq!(seq.pair_indices(4, 64, 9).unwrap(), seq.pair_indices(4, 64, 9).unwrap());
        assert_ne!(seq.pair_indices(4, 64, 9).unwrap(), seq.pair_indices(4, 64, 10).unwrap());
    }

    #[test]
    fn short_sequence_is_an_argument_error() {
        let seq = sequence(4);
        assert!(matches!(seq.pair_indices(4, 1, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn sequence_requires_uniform_dims() {
        let frames = vec![Frame::zeros(4, 4), Frame::zeros(4, 5)];
        assert!(VideoSequence::new(frames, 25.0).is_err());
        assert!(VideoSequence::new(vec![Frame::zeros(4, 4)], 25.0).is_err());
    }

    #[test]
    fn normalized_keypoint_mapping() {
        let kp = KeypointSet::from_normalized(&[[-1.0, -1.0], [0.0, 0.0], [1.0, 1.0]], (256, 256));
        assert_eq!(kp.points[0], [0.0, 0.0]);
        assert_eq!(kp.points[1], [127.5, 127.5]);
        assert_eq!(kp.points[2], [255.0, 255.0]);
    }

    #[test]
    fn roi_point_containment_is_boundary_inclusive() {
        let roi = RectRoi::new(10, 10, 11, 11).unwrap();
        assert!(roi.contains_point(10.0, 10.0));
        assert!(roi.contains_point(10.5, 9.5));
        assert!(!roi.contains_point(11.0, 10.0));
        assert!(RectRoi::new(5, 5, 5, 6).is_err());
    }
}
