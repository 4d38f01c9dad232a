//! Keypoint transporter for ultrasound sweeps: CPU tensors with explicit
//! backward passes, the FF-CNN/KeyNet/RefineNet networks, feature transport,
//! Adam training and checkpoints.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod keypoints;
pub mod layers;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use layers::Mode;
pub use net::{ConvBlockSpec, NetworkSpec, Transporter};
pub use tensor::{Real, Tensor};
pub use train::{infer_keypoints, infer_sequence, train, train_to_dir, Dataset, EpochMetrics, TrainConfig, TrainOutcome};
