//! PNG and raw-float (`USF1`) frame files, and frame-directory videos.
//!
//! `USF1` layout: the 4 magic bytes, height and width as `u32` LE, then
//! `height * width` `f32` LE values in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Luma};

use crate::error::{Error, Result};
use crate::grid::{Frame, Grid, VideoSequence};

pub const USF_MAGIC: &[u8; 4] = b"USF1";

/// Loads an 8-bit PNG (converted to grayscale) or a `USF1` file and resizes
/// it bilinearly to `target` `(height, width)`.
pub fn load_frame(path: impl AsRef<Path>, target: (usize, usize)) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let frame = if bytes.starts_with(USF_MAGIC) {
        let grid = decode_usf(&bytes).map_err(|m| Error::format(path, m))?;
        Frame::try_from_grid(grid).map_err(|e| Error::format(path, e.to_string()))?
    } else {
        decode_png(&bytes).map_err(|m| Error::format(path, m))?
    };
    frame.resize_bilinear(target.0, target.1)
}

/// Loads a frame at its native size.
pub fn load_frame_native(path: impl AsRef<Path>) -> Result<Frame> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(USF_MAGIC) {
        let grid = decode_usf(&bytes).map_err(|m| Error::format(path, m))?;
        Frame::try_from_grid(grid).map_err(|e| Error::format(path, e.to_string()))
    } else {
        decode_png(&bytes).map_err(|m| Error::format(path, m))
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<Frame, String> {
    let img = ImageReader::new(std::io::Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map_err(|e| e.to_string())?
        .to_luma8();
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err("image has a zero dimension".into());
    }
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Frame::new(h as usize, w as usize, data).map_err(|e| e.to_string())
}

/// Writes `round(v * 255)` as an 8-bit grayscale PNG.
pub fn save_frame(frame: &Frame, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let img = GrayImage::from_fn(frame.width() as u32, frame.height() as u32, |x, y| {
        Luma([(frame.get(y as usize, x as usize) * 255.0).round().clamp(0.0, 255.0) as u8])
    });
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}

pub fn encode_usf(grid: &Grid) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * grid.len());
    out.extend_from_slice(USF_MAGIC);
    out.extend_from_slice(&(grid.height() as u32).to_le_bytes());
    out.extend_from_slice(&(grid.width() as u32).to_le_bytes());
    for &v in grid.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_usf(bytes: &[u8]) -> std::result::Result<Grid, String> {
    if bytes.len() < 12 || &bytes[..4] != USF_MAGIC {
        return Err("missing USF1 header".into());
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if h == 0 || w == 0 {
        return Err("zero dimension".into());
    }
    let payload = &bytes[12..];
    if payload.len() != 4 * h * w {
        return Err(format!("expected {} payload bytes, found {}", 4 * h * w, payload.len()));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Grid::new(h, w, data).map_err(|e| e.to_string())
}

pub fn save_usf(grid: &Grid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_usf(grid)).map_err(|e| Error::io(path, e))
}

pub fn load_usf(path: impl AsRef<Path>) -> Result<Grid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_usf(&bytes).map_err(|m| Error::format(path, m))
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

/// Sorted list of `frame_*.png` files in a video directory.
pub fn list_frame_files(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("frame_") && n.ends_with(".png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads a directory of `frame_NNNN.png` files, resizing each to `target`.
pub fn load_video(dir: impl AsRef<Path>, target: (usize, usize), frame_rate: f64) -> Result<VideoSequence> {
    let dir = dir.as_ref();
    let files = list_frame_files(dir)?;
    if files.is_empty() {
        return Err(Error::format(dir, "no frame_*.png files"));
    }
    let frames = files
        .iter()
        .map(|p| load_frame(p, target))
        .collect::<Result<Vec<_>>>()?;
    VideoSequence::new(frames, frame_rate).map_err(|e| Error::format(dir, e.to_string()))
}

pub fn save_video(seq: &VideoSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, frame) in seq.frames().iter().enumerate() {
        save_frame(frame, dir.join(frame_file_name(i)))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
    }

    #[test]
    fn checkerboard_png_loads_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, 2, 2, |x, y| if x == y { 0 } else { 255 });
        let f = load_frame(&p, (2, 2)).unwrap();
        assert_eq!(f.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn identity_size_png_is_value_over_255() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, 256, 256, |x, y| ((x * 7 + y * 3) % 256) as u8);
        let f = load_frame(&p, (256, 256)).unwrap();
        for y in 0..256 {
            for x in 0..256 {
                let expected = ((x * 7 + y * 3) % 256) as f64 / 255.0;
                assert_eq!(f.get(y, x), expected);
            }
        }
    }

    #[test]
    fn constant_png_resizes_to_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        write_png(&p, 37, 19, |_, _| 128);
        let f = load_frame(&p, (256, 256)).unwrap();
        assert!(f.data().iter().all(|&v| (v - 0.50196).abs() < 1e-5));
    }

    #[test]
    fn endpoint_values_save_as_0_and_255() {
        let dir = tempfile::tempdir().unwrap();
        for (value, byte) in [(1.0, 255u8), (0.0, 0u8)] {
            let p = dir.path().join(format!("{byte}.png"));
            save_frame(&Frame::constant(3, 5, value).unwrap(), &p).unwrap();
            let img = image::open(&p).unwrap().to_luma8();
            assert!(img.as_raw().iter().all(|&v| v == byte));
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_frame("/nonexistent/frame.png", (4, 4)).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn garbage_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("junk.png");
        fs::write(&p, b"not an image").unwrap();
        assert!(matches!(load_frame(&p, (4, 4)).unwrap_err(), Error::Format { .. }));
    }

    #[test]
    fn usf_layout_is_bit_exact() {
        let g = Grid::new(1, 2, vec![0.5, -2.0]).unwrap();
        let bytes = encode_usf(&g);
        let mut expected = b"USF1".to_vec();
        expected.extend_from_slice(&[1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend_from_slice(&0.5f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(bytes, expected);
        assert_eq!(decode_usf(&bytes).unwrap(), g);
        assert!(decode_usf(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn usf_frame_loads_through_load_frame() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.usf");
        let g = Grid::from_fn(3, 4, |r, c| (r * 4 + c) as f64 / 16.0);
        save_usf(&g, &p).unwrap();
        let f = load_frame(&p, (3, 4)).unwrap();
        assert_eq!(f.as_grid(), &g);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn png_roundtrip_error_is_at_most_one_level(
            h in 1usize..24, w in 1usize..24, values in proptest::collection::vec(0.0f64..=1.0, 24 * 24),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("f.png");
            let f = Frame::new(h, w, values[..h * w].to_vec()).unwrap();
            save_frame(&f, &p).unwrap();
            let back = load_frame(&p, (h, w)).unwrap();
            for (a, b) in f.data().iter().zip(back.data()) {
                proptest::prop_assert!((a - b).abs() <= 1.0 / 255.0);
            }
        }
    }
}
