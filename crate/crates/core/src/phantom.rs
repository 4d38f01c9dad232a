//! Synthetic ultrasound sweeps with known bone geometry.
//!
//! Every frame is fully developed speckle over soft tissue, a bright
//! Gaussian ridge along the bone surface, an acoustic shadow under it and a
//! bright near-field band in the top tenth of the rows. The bone drifts
//! vertically along one sinusoid period over the sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, Grid, RectRoi, VideoSequence};

/// Extra mean intensity at the transducer face.
const NEAR_FIELD_LEVEL: f64 = 0.6;
/// Standard deviation of the ridge cross-section in pixels.
const RIDGE_SIGMA: f64 = 1.0;
/// Ridge half-width used for truth boxes (2 sigma).
pub const RIDGE_HALF_WIDTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractureSpec {
    pub column: usize,
    pub gap_width: usize,
    /// Extra depth of the bone right of the gap, pixels.
    #[serde(default)]
    pub step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub size: usize,
    pub frames: usize,
    pub bone_depth: f64,
    /// Parabolic sag: columns at the lateral edges sit this much deeper.
    pub bone_curvature: f64,
    pub bone_brightness: f64,
    /// Soft-tissue mean intensity before shadowing.
    pub tissue_level: f64,
    /// Intensity factor applied below the bone surface.
    pub shadow_attenuation: f64,
    /// Speckle correlation length in pixels.
    pub speckle_grain: f64,
    pub drift_amplitude: f64,
    pub fracture: Option<FractureSpec>,
    pub frame_rate: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            size: 256,
            frames: 256,
            bone_depth: 100.0,
            bone_curvature: 0.0,
            bone_brightness: 0.9,
            tissue_level: 0.15,
            shadow_attenuation: 0.5,
            speckle_grain: 1.5,
            drift_amplitude: 6.0,
            fracture: None,
            frame_rate: 25.0,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    /// Default geometry rescaled to a `size`-pixel frame.
    pub fn scaled(size: usize) -> Self {
        let k = size as f64 / 256.0;
        let d = Self::default();
        Self {
            size,
            bone_depth: (d.bone_depth * k).round(),
            drift_amplitude: d.drift_amplitude * k,
            speckle_grain: (d.speckle_grain * k).max(0.75),
            ..d
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 8 {
            return Err(Error::arg(format!("phantom size must be at least 8, got {}", self.size)));
        }
        if self.frames < 2 {
            return Err(Error::arg("a phantom sweep needs at least 2 frames"));
        }
        if !(0.0..=1.0).contains(&self.bone_brightness) {
            return Err(Error::arg("bone_brightness must lie in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.tissue_level) {
            return Err(Error::arg("tissue_level must lie in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.shadow_attenuation) {
            return Err(Error::arg("shadow_attenuation must lie in [0,1)"));
        }
        if !(self.speckle_grain > 0.0) {
            return Err(Error::arg("speckle_grain must be positive"));
        }
        if self.bone_curvature < 0.0 || self.drift_amplitude < 0.0 {
            return Err(Error::arg("curvature and drift must be non-negative"));
        }
        let near_field = near_field_rows(self.size) as f64;
        let step = self.fracture.map_or(0.0, |f| f.step.max(0.0));
        let shallowest = self.bone_depth - self.drift_amplitude;
        let deepest = self.bone_depth + self.bone_curvature + self.drift_amplitude + step + RIDGE_HALF_WIDTH as f64;
        if shallowest < near_field || deepest > (self.size - 1) as f64 {
            return Err(Error::arg(format!(
                "bone geometry spans rows {shallowest}..{deepest}, outside {near_field}..{}",
                self.size - 1
            )));
        }
        if let Some(f) = self.fracture {
            if f.gap_width < 1 {
                return Err(Error::arg("fracture gap_width must be at least 1"));
            }
            if f.column >= self.size {
                return Err(Error::arg("fracture column outside the image"));
            }
        }
        Ok(())
    }

    fn drift(&self, frame: usize) -> f64 {
        let phase = 2.0 * std::f64::consts::PI * frame as f64 / self.frames as f64;
        self.drift_amplitude * phase.sin()
    }

    /// Bone surface depth per column for one frame; `None` inside a fracture gap.
    pub fn curve(&self, frame: usize) -> Vec<Option<f64>> {
        let half = (self.size as f64 - 1.0) / 2.0;
        let offset = self.drift(frame);
        (0..self.size)
            .map(|c| {
                let mut depth = self.bone_depth + offset;
                let u = (c as f64 - half) / half;
                depth += self.bone_curvature * u * u;
                if let Some(f) = self.fracture {
                    let dist = (c as i64 - f.column as i64).unsigned_abs() as usize;
                    if dist <= f.gap_width / 2 {
                        return None;
                    }
                    if c > f.column {
                        depth += f.step;
                    }
                }
                Some(depth)
            })
            .collect()
    }
}

fn near_field_rows(size: usize) -> usize {
    (size as f64 * 0.1).ceil() as usize
}

/// Ground truth of a generated sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomTruth {
    pub height: usize,
    pub width: usize,
    pub ridge_half_width: usize,
    pub fracture: Option<FractureSpec>,
    /// `curves[frame][column]` is the bone surface depth, `None` in a gap.
    pub curves: Vec<Vec<Option<f64>>>,
}

impl PhantomTruth {
    pub fn frames(&self) -> usize {
        self.curves.len()
    }

    /// Tight box around the frame's bone surface and ridge, dilated by
    /// `margin` pixels and clipped to the image.
    pub fn truth_roi(&self, frame_index: usize, margin: usize) -> Result<RectRoi> {
        let curve = self.curves.get(frame_index).ok_or_else(|| {
            Error::arg(format!(
                "frame index {frame_index} out of range for {} frames",
                self.curves.len()
            ))
        })?;
        let bone: Vec<(usize, f64)> = curve
            .iter()
            .enumerate()
            .filter_map(|(c, d)| d.map(|d| (c, d)))
            .collect();
        if bone.is_empty() {
            return Err(Error::arg(format!("frame {frame_index} has no bone")));
        }
        let min_d = bone.iter().map(|b| b.1).fold(f64::INFINITY, f64::min).round() as i64;
        let max_d = bone.iter().map(|b| b.1).fold(f64::NEG_INFINITY, f64::max).round() as i64;
        let (first_c, last_c) = (bone[0].0 as i64, bone[bone.len() - 1].0 as i64);
        let m = margin as i64;
        let clip = |v: i64, hi: usize| v.clamp(0, hi as i64) as usize;
        RectRoi::new(
            clip(min_d - m, self.height - 1),
            clip(first_c - m, self.width - 1),
            clip(max_d + self.ridge_half_width as i64 + m + 1, self.height),
            clip(last_c + m + 1, self.width),
        )
    }

    /// Pixels within the ridge half-width of the bone surface.
    pub fn bone_mask(&self, frame_index: usize) -> Vec<bool> {
        let mut mask = vec![false; self.height * self.width];
        for (c, depth) in self.curves[frame_index].iter().enumerate() {
            if let Some(d) = depth {
                for r in 0..self.height {
                    if (r as f64 - d).abs() <= self.ridge_half_width as f64 {
                        mask[r * self.width + c] = true;
                    }
                }
            }
        }
        mask
    }

    pub fn document(&self, margin: usize) -> Result<TruthDocument> {
        let rois = (0..self.frames())
            .map(|i| self.truth_roi(i, margin))
            .collect::<Result<Vec<_>>>()?;
        Ok(TruthDocument {
            truth: self.clone(),
            margin,
            rois,
        })
    }
}

/// On-disk `truth.json`: geometry plus precomputed ROIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    #[serde(flatten)]
    pub truth: PhantomTruth,
    pub margin: usize,
    pub rois: Vec<RectRoi>,
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur with periodic boundaries.
fn blur_periodic(data: &[f64], n: usize, kernel: &[f64]) -> Vec<f64> {
    let radius = (kernel.len() / 2) as i64;
    let wrap = |i: i64| i.rem_euclid(n as i64) as usize;
    let mut tmp = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            tmp[r * n + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * data[r * n + wrap(c as i64 + k as i64 - radius)])
                .sum();
        }
    }
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            out[r * n + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| w * tmp[wrap(r as i64 + k as i64 - radius) * n + c])
                .sum();
        }
    }
    out
}

/// Unit-mean speckle: squared magnitude of low-pass filtered complex noise.
fn speckle(size: usize, grain: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = size * size;
    let mut re: Vec<f64> = Vec::with_capacity(n);
    let mut im: Vec<f64> = Vec::with_capacity(n);
    for _ in 0..n {
        re.push(StandardNormal.sample(rng));
        im.push(StandardNormal.sample(rng));
    }
    let kernel = gaussian_kernel(grain);
    let re = blur_periodic(&re, size, &kernel);
    let im = blur_periodic(&im, size, &kernel);
    let power: Vec<f64> = re.iter().zip(&im).map(|(a, b)| a * a + b * b).collect();
    let mean = power.iter().sum::<f64>() / n as f64;
    power.into_iter().map(|p| p / mean).collect()
}

fn render_frame(cfg: &PhantomConfig, index: usize, curve: &[Option<f64>]) -> Frame {
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let tissue = speckle(n, cfg.speckle_grain, &mut rng);
    let near = near_field_rows(n);
    let grid = Grid::from_fn(n, n, |r, c| {
        let s = tissue[r * n + c];
        let mut v = cfg.tissue_level * s;
        if r < near {
            v += NEAR_FIELD_LEVEL * s * (1.0 - 0.5 * r as f64 / near as f64);
        }
        if let Some(depth) = curve[c] {
            let dr = r as f64 - depth;
            if dr > 0.0 {
                v *= cfg.shadow_attenuation;
            }
            v += cfg.bone_brightness * (-(dr * dr) / (2.0 * RIDGE_SIGMA * RIDGE_SIGMA)).exp();
        }
        v
    });
    Frame::from_grid_clamped(grid)
}

/// Renders the sweep and its ground truth. Deterministic in `cfg.seed`;
/// each frame draws from its own stream so frames are independent.
pub fn generate(cfg: &PhantomConfig) -> Result<(VideoSequence, PhantomTruth)> {
    cfg.validate()?;
    let curves: Vec<Vec<Option<f64>>> = (0..cfg.frames).map(|t| cfg.curve(t)).collect();
    let frames = curves
        .iter()
        .enumerate()
        .map(|(t, curve)| render_frame(cfg, t, curve))
        .collect();
    let seq = VideoSequence::new(frames, cfg.frame_rate)?;
    Ok((
        seq,
        PhantomTruth {
            height: cfg.size,
            width: cfg.size,
            ridge_half_width: RIDGE_HALF_WIDTH,
            fracture: cfg.fracture,
            curves,
        },
    ))
}
