//! Keypoint-in-ROI hit rate and overlay rendering.

use std::collections::BTreeMap;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Frame, KeypointSet, RectRoi};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: usize,
    pub keypoints: Vec<[f64; 2]>,
    pub roi: RectRoi,
    pub inside: usize,
    pub hit: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames_evaluated: usize,
    pub frames_hit: usize,
    pub hit_rate: f64,
    pub top_n: usize,
    pub records: Vec<FrameRecord>,
}

/// A frame is a hit when at least `top_n` of its keypoints fall inside its ROI.
pub fn eval_hit_rate(keypoints: &[KeypointSet], rois: &[RectRoi], top_n: usize) -> Result<EvalReport> {
    eval_hit_rate_indexed(keypoints.iter().enumerate(), rois, top_n)
}

/// As [`eval_hit_rate`], with explicit frame indices into `rois`.
pub fn eval_hit_rate_indexed<'a>(
    keypoints: impl IntoIterator<Item = (usize, &'a KeypointSet)>,
    rois: &[RectRoi],
    top_n: usize,
) -> Result<EvalReport> {
    let keypoints: Vec<(usize, &KeypointSet)> = keypoints.into_iter().collect();
    if keypoints.is_empty() {
        return Err(Error::arg("no frames to evaluate"));
    }
    if top_n == 0 {
        return Err(Error::arg("top_n must be at least 1"));
    }
    let mut records = Vec::with_capacity(keypoints.len());
    for (frame, kp) in keypoints {
        let roi = *rois.get(frame).ok_or_else(|| {
            Error::arg(format!("no ROI for frame {frame} ({} ROIs given)", rois.len()))
        })?;
        if top_n > kp.len() {
            return Err(Error::arg(format!(
                "top_n {top_n} exceeds the {} keypoints of frame {frame}",
                kp.len()
            )));
        }
        let inside = kp.points.iter().filter(|p| roi.contains_point(p[0], p[1])).count();
        records.push(FrameRecord {
            frame,
            keypoints: kp.points.clone(),
            roi,
            inside,
            hit: inside >= top_n,
        });
    }
    Ok(report_from_records(records, top_n))
}

fn report_from_records(records: Vec<FrameRecord>, top_n: usize) -> EvalReport {
    let frames_hit = records.iter().filter(|r| r.hit).count();
    EvalReport {
        frames_evaluated: records.len(),
        frames_hit,
        hit_rate: frames_hit as f64 / records.len() as f64,
        top_n,
        records,
    }
}

/// Keypoint interchange: frame index to `[[row, col], ...]` in pixels.
pub type KeypointFile = BTreeMap<usize, Vec<[f64; 2]>>;

pub fn write_keypoints(kps: &KeypointFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(kps).expect("keypoint map serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_keypoints(path: impl AsRef<Path>) -> Result<KeypointFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

const ROI_COLOR: Rgb<u8> = Rgb([255, 255, 0]);

const PALETTE: [[u8; 3]; 10] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [0, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

pub fn keypoint_color(index: usize) -> Rgb<u8> {
    Rgb(PALETTE[index % PALETTE.len()])
}

/// Grayscale base, optional 1 px ROI outline, keypoints as filled radius-3 discs.
pub fn render_overlay_image(frame: &Frame, keypoints: &KeypointSet, roi: Option<&RectRoi>) -> RgbImage {
    let (h, w) = frame.dims();
    let mut img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let v = (frame.get(y as usize, x as usize) * 255.0).round() as u8;
        Rgb([v, v, v])
    });
    if let Some(roi) = roi {
        let bottom = roi.bottom.min(h).saturating_sub(1);
        let right = roi.right.min(w).saturating_sub(1);
        for x in roi.left..=right {
            img.put_pixel(x as u32, roi.top as u32, ROI_COLOR);
            img.put_pixel(x as u32, bottom as u32, ROI_COLOR);
        }
        for y in roi.top..=bottom {
            img.put_pixel(roi.left as u32, y as u32, ROI_COLOR);
            img.put_pixel(right as u32, y as u32, ROI_COLOR);
        }
    }
    for (k, p) in keypoints.points.iter().enumerate() {
        let (cr, cc) = (p[0].round() as i64, p[1].round() as i64);
        for dr in -3i64..=3 {
            for dc in -3i64..=3 {
                if dr * dr + dc * dc > 9 {
                    continue;
                }
                let (r, c) = (cr + dr, cc + dc);
                if r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w {
                    img.put_pixel(c as u32, r as u32, keypoint_color(k));
                }
            }
        }
    }
    img
}

pub fn render_overlay(frame: &Frame, keypoints: &KeypointSet, roi: Option<&RectRoi>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    render_overlay_image(frame, keypoints, roi)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}
