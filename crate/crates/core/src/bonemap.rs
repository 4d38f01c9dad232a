//! Local-phase bone probability maps.
//!
//! Pipeline per scale `lambda0`:
//!
//! 1. isotropic log-Gabor band-pass of the TGA frame,
//! 2. even (Hessian outer product) and odd (gradient x gradient-of-Laplacian)
//!    derivative tensors of the band-passed image,
//! 3. the local phase tensor image `LPT`,
//! 4. monogenic triple of `LPT` via the Riesz transform,
//! 5. local phase `LP`, feature symmetry `FS` and integrated backscatter `IBS`,
//! 6. `T = LP * FS * (1 - IBS)`.
//!
//! Derivatives are central differences with replicate borders, so they are
//! exact for polynomials of degree 2 only away from the outermost pixels.

use std::f64::consts::FRAC_PI_2;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, Grid, ScaleStack};
use crate::spectral::{Bin, Spectrum};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaborConfig {
    /// Centre wavelength in pixels.
    pub lambda0: f64,
    /// Bandwidth ratio, strictly between 0 and 1.
    pub sigma0: f64,
}

impl GaborConfig {
    pub fn new(lambda0: f64, sigma0: f64) -> Result<Self> {
        let cfg = Self { lambda0, sigma0 };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 2.0) || !self.lambda0.is_finite() {
            return Err(Error::arg(format!("lambda0 must be >= 2 px, got {}", self.lambda0)));
        }
        if !(self.sigma0 > 0.0 && self.sigma0 < 1.0) {
            return Err(Error::arg(format!("sigma0 must lie in (0,1), got {}", self.sigma0)));
        }
        Ok(())
    }

    /// Centre frequency in radians per pixel.
    pub fn omega0(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.lambda0
    }

    /// Radial log-Gabor gain at angular frequency `omega`; zero at DC.
    pub fn gain(&self, omega: f64) -> f64 {
        let omega = omega.abs();
        if omega == 0.0 {
            return 0.0;
        }
        let num = (omega / self.omega0()).ln();
        let den = self.sigma0.ln();
        (-(num * num) / (2.0 * den * den)).exp()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoneMapConfig {
    /// Gabor centre wavelengths in pixels, one bone map each.
    pub scales: Vec<f64>,
    pub sigma0: f64,
    /// Feature-symmetry noise threshold, relative to the frame's peak even energy.
    pub fs_tau: f64,
    pub epsilon: f64,
}

impl Default for BoneMapConfig {
    fn default() -> Self {
        Self {
            scales: vec![8.0, 16.0, 32.0],
            sigma0: 0.55,
            fs_tau: 0.2,
            epsilon: 1e-8,
        }
    }
}

impl BoneMapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::arg("at least one scale is required"));
        }
        for &s in &self.scales {
            GaborConfig::new(s, self.sigma0)?;
        }
        if !(self.fs_tau >= 0.0) {
            return Err(Error::arg(format!("fs_tau must be >= 0, got {}", self.fs_tau)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::arg(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn gabor(&self, scale_index: usize) -> Result<GaborConfig> {
        let lambda0 = *self.scales.get(scale_index).ok_or_else(|| {
            Error::arg(format!(
                "scale index {scale_index} out of range for {} scales",
                self.scales.len()
            ))
        })?;
        GaborConfig::new(lambda0, self.sigma0)
    }
}

/// Symmetric 2x2 matrix stored as `[dd, dc, cc]` (depth/lateral axes).
pub type Sym2 = [f64; 3];

#[inline]
pub fn frobenius(m: &Sym2) -> f64 {
    (m[0] * m[0] + 2.0 * m[1] * m[1] + m[2] * m[2]).sqrt()
}

/// Per-pixel even and odd derivative tensors of a band-passed image.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorField {
    pub height: usize,
    pub width: usize,
    pub t_even: Vec<Sym2>,
    pub t_odd: Vec<Sym2>,
}

impl TensorField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            t_even: vec![[0.0; 3]; height * width],
            t_odd: vec![[0.0; 3]; height * width],
        }
    }

    pub fn even_norm(&self) -> Vec<f64> {
        self.t_even.iter().map(frobenius).collect()
    }

    pub fn odd_norm(&self) -> Vec<f64> {
        self.t_odd.iter().map(frobenius).collect()
    }
}

/// `(m1, m2, m3)`: the signal and its depth and lateral Riesz components.
#[derive(Debug, Clone, PartialEq)]
pub struct MonogenicTriple {
    pub m1: Grid,
    pub m2: Grid,
    pub m3: Grid,
}

/// Band-passed image: inverse transform of the spectrum times the radial
/// log-Gabor gain. The result carries no DC component.
pub fn log_gabor_response(frame: &Grid, cfg: &GaborConfig) -> Result<Grid> {
    cfg.validate()?;
    if frame.height() < 4 || frame.width() < 4 {
        return Err(Error::arg(format!(
            "log-Gabor filtering needs at least 4x4 pixels, got {}x{}",
            frame.height(),
            frame.width()
        )));
    }
    let out = Spectrum::forward(frame).filtered(|bin| Complex64::new(cfg.gain(bin.radius()), 0.0));
    // Cropping a padded grid leaves a small residual mean.
    let mean = out.mean();
    Ok(out.map(|v| v - mean))
}

fn d_row(g: &Grid, r: usize, c: usize) -> f64 {
    let (r, c) = (r as isize, c as isize);
    0.5 * (g.get_clamped(r + 1, c) - g.get_clamped(r - 1, c))
}

fn d_col(g: &Grid, r: usize, c: usize) -> f64 {
    let (r, c) = (r as isize, c as isize);
    0.5 * (g.get_clamped(r, c + 1) - g.get_clamped(r, c - 1))
}

/// Second derivatives `[dd, dc, cc]` by central differences.
fn hessian(g: &Grid, r: usize, c: usize) -> Sym2 {
    let (ri, ci) = (r as isize, c as isize);
    let centre = g.get(r, c);
    let dd = g.get_clamped(ri + 1, ci) - 2.0 * centre + g.get_clamped(ri - 1, ci);
    let cc = g.get_clamped(ri, ci + 1) - 2.0 * centre + g.get_clamped(ri, ci - 1);
    let dc = 0.25
        * (g.get_clamped(ri + 1, ci + 1) - g.get_clamped(ri + 1, ci - 1) - g.get_clamped(ri - 1, ci + 1)
            + g.get_clamped(ri - 1, ci - 1));
    [dd, dc, cc]
}

/// Laplacian by central differences with replicate borders.
pub fn laplacian(g: &Grid) -> Grid {
    Grid::from_fn(g.height(), g.width(), |r, c| {
        let h = hessian(g, r, c);
        h[0] + h[2]
    })
}

/// Depth derivative by central differences with replicate borders.
pub fn depth_gradient(g: &Grid) -> Grid {
    Grid::from_fn(g.height(), g.width(), |r, c| d_row(g, r, c))
}

/// `T_even = H H^T` and `T_odd = -1/2 (g q^T + q g^T)` where `H` is the
/// Hessian, `g` the gradient and `q` the gradient of the Laplacian.
pub fn derivative_tensors(i_bp: &Grid) -> TensorField {
    let (h, w) = i_bp.dims();
    let lap = laplacian(i_bp);
    let mut tf = TensorField::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let [dd, dc, cc] = hessian(i_bp, r, c);
            // H is symmetric, so H H^T = H^2.
            let even = [dd * dd + dc * dc, dc * (dd + cc), dc * dc + cc * cc];
            let g = [d_row(i_bp, r, c), d_col(i_bp, r, c)];
            let q = [d_row(&lap, r, c), d_col(&lap, r, c)];
            let odd = [-g[0] * q[0], -0.5 * (g[0] * q[1] + g[1] * q[0]), -g[1] * q[1]];
            let i = r * w + c;
            tf.t_even[i] = even;
            tf.t_odd[i] = odd;
        }
    }
    tf
}

fn signum0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Signed local phase tensor response before rescaling.
///
/// The even part is `|T_even|` signed by `-laplacian` (bright ridges are
/// positive), the odd part `|T_odd|` signed by the depth derivative, and the
/// response is `sqrt(e^2 + o^2) cos(atan2(o, e))`.
pub fn lpt_raw(tf: &TensorField, i_bp: &Grid) -> Result<Grid> {
    if (tf.height, tf.width) != i_bp.dims() {
        return Err(Error::arg("tensor field and image differ in size"));
    }
    let lap = laplacian(i_bp);
    let grad_d = depth_gradient(i_bp);
    let data = (0..i_bp.len())
        .map(|i| {
            let e = frobenius(&tf.t_even[i]) * signum0(-lap.data()[i]);
            let o = frobenius(&tf.t_odd[i]) * signum0(grad_d.data()[i]);
            let phase = o.atan2(e);
            e.hypot(o) * phase.cos()
        })
        .collect();
    Grid::new(i_bp.height(), i_bp.width(), data)
}

/// Local phase tensor image, min-max rescaled to [0,1].
pub fn lpt_image(tf: &TensorField, i_bp: &Grid) -> Result<Frame> {
    Ok(lpt_raw(tf, i_bp)?.rescale_unit())
}

/// Frequency response of the depth (`m2`) or lateral (`m3`) Riesz filter.
///
/// Off the self-conjugate Nyquist lines this is `i * omega_axis / |omega|`.
/// A purely imaginary response cannot survive on a Nyquist line of a real
/// signal, so there the response is the real `|omega_axis| / |omega|`,
/// which keeps both outputs real and the pair unitary off DC.
fn riesz_response(bin: Bin, lateral: bool) -> Complex64 {
    if bin.is_dc() {
        return Complex64::new(0.0, 0.0);
    }
    let (axis, nyquist) = if lateral {
        (bin.omega_col(), bin.col_nyquist())
    } else {
        (bin.omega_row(), bin.row_nyquist())
    };
    let ratio = axis / bin.radius();
    if nyquist {
        Complex64::new(ratio.abs(), 0.0)
    } else {
        Complex64::new(0.0, ratio)
    }
}

pub fn riesz_monogenic(lpt: &Grid) -> MonogenicTriple {
    let spectrum = Spectrum::forward(lpt);
    MonogenicTriple {
        m1: lpt.clone(),
        m2: spectrum.filtered(|b| riesz_response(b, false)),
        m3: spectrum.filtered(|b| riesz_response(b, true)),
    }
}

/// `1 - atan(|(m2, m3)| / (|m1| + eps)) / (pi/2)`, in [0,1].
pub fn lp_map(m: &MonogenicTriple, eps: f64) -> Result<Frame> {
    m.m1.check_same_dims(&m.m2)?;
    m.m1.check_same_dims(&m.m3)?;
    let data = (0..m.m1.len())
        .map(|i| {
            let odd = m.m2.data()[i].hypot(m.m3.data()[i]);
            let phase = (odd / (m.m1.data()[i].abs() + eps)).atan();
            (1.0 - phase / FRAC_PI_2).clamp(0.0, 1.0)
        })
        .collect();
    Frame::new(m.m1.height(), m.m1.width(), data)
}

/// Feature symmetry `max(e - |T_odd| - tau, 0) / (m1^2 + m2^2 + m3^2 + eps)`,
/// min-max rescaled to [0,1].
///
/// `e` is `|T_even|` signed by `-laplacian(i_bp)` as in [`lpt_raw`], so dark
/// valleys never count as symmetric features. Tensor norms are divided by
/// the frame's peak `|T_even|`, making `tau` relative to the strongest even
/// response.
pub fn fs_map(tf: &TensorField, i_bp: &Grid, m: &MonogenicTriple, tau: f64, eps: f64) -> Result<Frame> {
    if (tf.height, tf.width) != m.m1.dims() || i_bp.dims() != m.m1.dims() {
        return Err(Error::arg("tensor field, image and monogenic triple differ in size"));
    }
    let lap = laplacian(i_bp);
    let even_abs = tf.even_norm();
    let even: Vec<f64> = even_abs
        .iter()
        .zip(lap.data())
        .map(|(&e, &l)| e * signum0(-l))
        .collect();
    let odd = tf.odd_norm();
    let peak = even_abs.iter().cloned().fold(0.0, f64::max);
    if !(peak > 0.0) {
        return Ok(Frame::zeros(tf.height, tf.width));
    }
    let data = (0..even.len())
        .map(|i| {
            let num = (even[i] / peak - odd[i] / peak - tau).max(0.0);
            let energy = m.m1.data()[i].powi(2) + m.m2.data()[i].powi(2) + m.m3.data()[i].powi(2);
            num / (energy + eps)
        })
        .collect();
    Ok(Grid::new(tf.height, tf.width, data)?.rescale_unit())
}

/// Per-column cumulative squared intensity normalized by the column total.
pub fn ibs_map(frame: &Frame) -> Frame {
    let (h, w) = frame.dims();
    let mut out = Grid::zeros(h, w);
    for c in 0..w {
        let mut acc = 0.0;
        for r in 0..h {
            acc += frame.get(r, c).powi(2);
            out.set(r, c, acc);
        }
        if acc > 0.0 {
            for r in 0..h {
                out.set(r, c, (out.get(r, c) / acc).min(1.0));
            }
        }
    }
    Frame::from_grid_clamped(out)
}

/// Intermediate maps of one scale, for inspection.
#[derive(Debug, Clone)]
pub struct BoneMapLayers {
    pub band_pass: Grid,
    pub lpt: Frame,
    pub lp: Frame,
    pub fs: Frame,
    pub ibs: Frame,
    pub bone: Frame,
}

pub fn bone_map_layers(frame_tga: &Frame, cfg: &BoneMapConfig, scale_index: usize) -> Result<BoneMapLayers> {
    cfg.validate()?;
    let gabor = cfg.gabor(scale_index)?;
    let band_pass = log_gabor_response(frame_tga, &gabor)?;
    let tf = derivative_tensors(&band_pass);
    let lpt = lpt_image(&tf, &band_pass)?;
    let mono = riesz_monogenic(&lpt);
    let lp = lp_map(&mono, cfg.epsilon)?;
    let fs = fs_map(&tf, &band_pass, &mono, cfg.fs_tau, cfg.epsilon)?;
    let ibs = ibs_map(frame_tga);
    let product = Grid::from_fn(frame_tga.height(), frame_tga.width(), |r, c| {
        lp.get(r, c) * fs.get(r, c) * (1.0 - ibs.get(r, c))
    });
    Ok(BoneMapLayers {
        band_pass,
        lpt,
        lp,
        fs,
        ibs,
        bone: Frame::from_grid_clamped(product),
    })
}

/// `LP * FS * (1 - IBS)` at `cfg.scales[scale_index]`.
pub fn bone_probability_map(frame_tga: &Frame, cfg: &BoneMapConfig, scale_index: usize) -> Result<Frame> {
    Ok(bone_map_layers(frame_tga, cfg, scale_index)?.bone)
}

/// Channel 0 is the TGA frame, channels 1..=S the bone maps in scale order.
pub fn build_scale_stack(frame_tga: &Frame, cfg: &BoneMapConfig) -> Result<ScaleStack> {
    cfg.validate()?;
    let mut channels = Vec::with_capacity(cfg.scales.len() + 1);
    channels.push(frame_tga.clone());
    for i in 0..cfg.scales.len() {
        channels.push(bone_probability_map(frame_tga, cfg, i)?);
    }
    ScaleStack::new(channels, cfg.scales.clone())
}
