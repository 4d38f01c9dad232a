//! Ultrasound frame model, time-gain-attenuation compensation, multi-scale
//! local-phase bone probability maps, synthetic phantom sweeps and the
//! keypoint hit-rate evaluation.

pub mod bonemap;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod phantom;
pub mod spectral;
pub mod tga;

pub use bonemap::{
    bone_probability_map, build_scale_stack, derivative_tensors, fs_map, ibs_map, log_gabor_response, lp_map,
    lpt_image, riesz_monogenic, BoneMapConfig, GaborConfig, MonogenicTriple, TensorField,
};
pub use error::{Error, Result};
pub use eval::{eval_hit_rate, render_overlay, EvalReport};
pub use grid::{Frame, Grid, KeypointSet, RectRoi, ScaleStack, VideoSequence};
pub use io::{load_frame, save_frame};
pub use phantom::{generate, PhantomConfig, PhantomTruth};
pub use tga::{apply_tga, tga_mask, TgaConfig};
