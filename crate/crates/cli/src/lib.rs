//! `usbone` command-line driver.
//!
//! Exit codes: 0 success, 1 usage or argument error, 2 I/O or file-format error.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use usbone_core::eval::{eval_hit_rate_indexed, read_keypoints, render_overlay, write_keypoints, KeypointFile};
use usbone_core::io::{frame_file_name, load_frame_native, load_video, save_frame, save_usf};
use usbone_core::phantom::TruthDocument;
use usbone_core::{
    apply_tga, build_scale_stack, generate, Error as CoreError, Frame, KeypointSet, RectRoi, VideoSequence,
};
use usbone_transporter::checkpoint;
use usbone_transporter::train::{infer_batch, prepare_sequence};
use usbone_transporter::{train_to_dir, Dataset, Transporter};

pub use config::RunConfig;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ARGUMENT: i32 = 1;
pub const EXIT_IO: i32 = 2;

const FRAME_RATE: f64 = 25.0;

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_ARGUMENT };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<usbone_transporter::Error> for Failure {
    fn from(e: usbone_transporter::Error) -> Self {
        let code = if e.is_io() { EXIT_IO } else { EXIT_ARGUMENT };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_ARGUMENT,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

#[derive(Debug, Parser)]
#[command(name = "usbone", version, about = "Ultrasound bone keypoints: phantoms, bone maps, transporter training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sweep with truth.json.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Frame side in pixels; depth, drift and speckle grain scale with it.
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        bone_depth: Option<f64>,
        #[arg(long)]
        curvature: Option<f64>,
        /// Truth ROI margin in pixels.
        #[arg(long, default_value_t = 10)]
        margin: usize,
    },
    /// Apply time-gain-attenuation compensation to a frame or video directory.
    Tga {
        /// A PNG frame or a directory of frame_NNNN.png files.
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Attenuation coefficient per pixel row.
        #[arg(long = "a")]
        attenuation_a: Option<f64>,
    },
    /// Write bone probability maps as USF1 grids plus PNG previews,
    /// one sub-directory per scale.
    Bonemap {
        #[arg(long = "in", alias = "input")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        /// Log-Gabor wavelengths in pixels.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<f64>>,
        #[arg(long = "a")]
        attenuation_a: Option<f64>,
    },
    /// Train the transporter on one or more video directories.
    Train {
        #[arg(long, required = true, num_args = 1..)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        train_pairs: Option<usize>,
        #[arg(long)]
        val_pairs: Option<usize>,
        #[arg(long)]
        keypoints: Option<usize>,
        /// Resize frames to this square side before training.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Detect keypoints on every frame of a video directory.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        keypoints: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
    },
    /// Keypoint-in-ROI hit rate as JSON.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 1)]
        top_n: usize,
        /// Recompute ROIs from the truth curves with this margin.
        #[arg(long)]
        margin: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render keypoints (and truth ROIs) over the frames of a video directory.
    Overlay {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        margin: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.phantom.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> CmdResult {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> CmdResult {
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e).into())
}

/// Frames of a video directory at native size or resized to `size`.
fn read_video(dir: &Path, size: Option<usize>) -> std::result::Result<VideoSequence, Failure> {
    let files = usbone_core::io::list_frame_files(dir)?;
    let first = files.first().ok_or_else(|| Failure::from(CoreError::format(dir, "no frame_*.png files")))?;
    let dims = match size {
        Some(s) if s > 0 => (s, s),
        Some(_) => return Err(usage("--size must be positive")),
        None => load_frame_native(first)?.dims(),
    };
    Ok(load_video(dir, dims, FRAME_RATE)?)
}

fn read_truth(path: &Path) -> std::result::Result<TruthDocument, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CoreError::format(path, e.to_string()).into())
}

fn truth_rois(doc: &TruthDocument, margin: Option<usize>) -> std::result::Result<Vec<RectRoi>, Failure> {
    match margin {
        None => Ok(doc.rois.clone()),
        Some(m) => Ok((0..doc.truth.frames())
            .map(|i| doc.truth.truth_roi(i, m))
            .collect::<usbone_core::Result<Vec<_>>>()?),
    }
}

fn cmd_phantom(
    out: &Path,
    common: &Common,
    size: Option<usize>,
    frames: Option<usize>,
    bone_depth: Option<f64>,
    curvature: Option<f64>,
    margin: usize,
) -> CmdResult {
    let mut cfg = load_config(common)?.phantom;
    if let Some(s) = size {
        // Same rescaling as PhantomConfig::scaled, applied to the loaded geometry.
        let k = s as f64 / cfg.size as f64;
        cfg.size = s;
        cfg.bone_depth = (cfg.bone_depth * k).round();
        cfg.drift_amplitude *= k;
        cfg.speckle_grain = (cfg.speckle_grain * k).max(0.75);
    }
    if let Some(f) = frames {
        cfg.frames = f;
    }
    if let Some(d) = bone_depth {
        cfg.bone_depth = d;
    }
    if let Some(c) = curvature {
        cfg.bone_curvature = c;
    }
    let (seq, truth) = generate(&cfg)?;
    usbone_core::io::save_video(&seq, out)?;
    let doc = truth.document(margin)?;
    write_text(&out.join("truth.json"), &serde_json::to_string_pretty(&doc).expect("truth serializes"))
}

fn cmd_tga(input: &Path, out: &Path, common: &Common, a: Option<f64>) -> CmdResult {
    let mut cfg = load_config(common)?.tga;
    if let Some(a) = a {
        cfg.attenuation_a = a;
    }
    cfg.validate()?;
    if input.is_dir() {
        let seq = read_video(input, None)?;
        create_dir(out)?;
        seq.frames().par_iter().enumerate().try_for_each(|(i, f)| -> CmdResult {
            save_frame(&apply_tga(f, &cfg)?, out.join(frame_file_name(i)))?;
            Ok(())
        })
    } else {
        Ok(save_frame(&apply_tga(&load_frame_native(input)?, &cfg)?, out)?)
    }
}

fn cmd_bonemap(
    input: &Path,
    out: &Path,
    common: &Common,
    scales: Option<Vec<f64>>,
    a: Option<f64>,
) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = scales {
        cfg.bonemap.scales = s;
    }
    if let Some(a) = a {
        cfg.tga.attenuation_a = a;
    }
    cfg.tga.validate()?;
    cfg.bonemap.validate()?;
    let frames: Vec<(String, Frame)> = if input.is_dir() {
        let seq = read_video(input, None)?;
        seq.frames().iter().enumerate().map(|(i, f)| (frame_file_name(i), f.clone())).collect()
    } else {
        let name = input.file_name().and_then(|n| n.to_str()).unwrap_or("frame.png").to_string();
        vec![(name, load_frame_native(input)?)]
    };
    for i in 0..cfg.bonemap.scales.len() {
        create_dir(&out.join(format!("scale_{i}")))?;
    }
    frames.par_iter().try_for_each(|(name, frame)| -> CmdResult {
        let stack = build_scale_stack(&apply_tga(frame, &cfg.tga)?, &cfg.bonemap)?;
        for (i, map) in stack.channels()[1..].iter().enumerate() {
            let path = out.join(format!("scale_{i}")).join(name);
            save_usf(map, path.with_extension("usf"))?;
            save_frame(map, path.with_extension("png"))?;
        }
        Ok(())
    })
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &[PathBuf],
    out: &Path,
    common: &Common,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    train_pairs: Option<usize>,
    val_pairs: Option<usize>,
    keypoints: Option<usize>,
    size: Option<usize>,
) -> CmdResult {
    let mut cfg = load_config(common)?;
    let t = &mut cfg.train;
    for (slot, value) in [
        (&mut t.epochs, epochs),
        (&mut t.batch_size, batch_size),
        (&mut t.train_pairs, train_pairs),
        (&mut t.val_pairs, val_pairs),
        (&mut cfg.network.keypoints, keypoints),
    ] {
        if let Some(v) = value {
            *slot = v;
        }
    }
    let seqs = data.iter().map(|d| read_video(d, size)).collect::<std::result::Result<Vec<_>, _>>()?;
    let dataset = Dataset::build(&seqs, &cfg.tga, &cfg.bonemap)?;
    create_dir(out)?;
    write_text(&out.join("config.json"), &cfg.to_canonical_json())?;
    let outcome = train_to_dir(&dataset, &cfg.train, &cfg.network, out)?;
    if let Some(m) = outcome.metrics.last() {
        eprintln!(
            "trained {} epochs: train loss {:.6}, val loss {:.6}",
            outcome.metrics.len(),
            m.train_loss,
            m.val_loss
        );
    }
    Ok(())
}

fn cmd_infer(
    ckpt: &Path,
    data: &Path,
    out: &Path,
    common: &Common,
    keypoints: Option<usize>,
    size: Option<usize>,
    batch_size: usize,
) -> CmdResult {
    let mut cfg = load_config(common)?;
    if let Some(k) = keypoints {
        cfg.network.keypoints = k;
    }
    let native = read_video(data, None)?;
    let seq = match size {
        None => native.clone(),
        Some(_) => read_video(data, size)?,
    };
    let inputs = prepare_sequence(&seq, &cfg.tga, &cfg.bonemap)?;
    let channels = inputs[0].shape()[1];
    let mut model = Transporter::<f32>::new(&cfg.network, channels, 0)?;
    checkpoint::load(&mut model, ckpt)?;
    let kps = infer_batch(&mut model, &inputs, batch_size, native.dims())?;
    let file: KeypointFile = kps.into_iter().enumerate().map(|(i, k)| (i, k.points)).collect();
    Ok(write_keypoints(&file, out)?)
}

fn cmd_eval(pred: &Path, truth: &Path, top_n: usize, margin: Option<usize>, out: Option<&Path>) -> CmdResult {
    let kps = read_keypoints(pred)?;
    let doc = read_truth(truth)?;
    let rois = truth_rois(&doc, margin)?;
    let res = (doc.truth.height, doc.truth.width);
    let sets: BTreeMap<usize, KeypointSet> = kps
        .into_iter()
        .map(|(i, points)| (i, KeypointSet { points, resolution: res }))
        .collect();
    let report = eval_hit_rate_indexed(sets.iter().map(|(&i, k)| (i, k)), &rois, top_n)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(p) = out {
        write_text(p, &text)?;
    }
    Ok(())
}

fn cmd_overlay(data: &Path, pred: &Path, truth: Option<&Path>, margin: Option<usize>, out: &Path) -> CmdResult {
    let seq = read_video(data, None)?;
    let kps = read_keypoints(pred)?;
    let rois = match truth {
        Some(t) => Some(truth_rois(&read_truth(t)?, margin)?),
        None => None,
    };
    create_dir(out)?;
    let res = seq.dims();
    kps.par_iter().try_for_each(|(&i, points)| -> CmdResult {
        let frame = seq
            .frames()
            .get(i)
            .ok_or_else(|| usage(format!("keypoints for frame {i}, but the video has {} frames", seq.len())))?;
        let roi = match &rois {
            Some(r) => Some(r.get(i).ok_or_else(|| usage(format!("no ROI for frame {i}")))?),
            None => None,
        };
        let set = KeypointSet {
            points: points.clone(),
            resolution: res,
        };
        render_overlay(frame, &set, roi, out.join(format!("overlay_{i:04}.png")))?;
        Ok(())
    })
}

pub fn execute(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Phantom {
            out,
            common,
            size,
            frames,
            bone_depth,
            curvature,
            margin,
        } => cmd_phantom(&out, &common, size, frames, bone_depth, curvature, margin),
        Command::Tga {
            input,
            out,
            common,
            attenuation_a,
        } => cmd_tga(&input, &out, &common, attenuation_a),
        Command::Bonemap {
            input,
            out,
            common,
            scales,
            attenuation_a,
        } => cmd_bonemap(&input, &out, &common, scales, attenuation_a),
        Command::Train {
            data,
            out,
            common,
            epochs,
            batch_size,
            train_pairs,
            val_pairs,
            keypoints,
            size,
        } => cmd_train(&data, &out, &common, epochs, batch_size, train_pairs, val_pairs, keypoints, size),
        Command::Infer {
            checkpoint,
            data,
            out,
            common,
            keypoints,
            size,
            batch_size,
        } => cmd_infer(&checkpoint, &data, &out, &common, keypoints, size, batch_size),
        Command::Eval {
            pred,
            truth,
            top_n,
            margin,
            out,
        } => cmd_eval(&pred, &truth, top_n, margin, out.as_deref()),
        Command::Overlay {
            data,
            pred,
            truth,
            margin,
            out,
        } => cmd_overlay(&data, &pred, truth.as_deref(), margin, &out),
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprint!("{}", e.render());
            return EXIT_ARGUMENT;
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(f) => {
            eprintln!("usbone: {}", f.message);
            f.code
        }
    }
}
