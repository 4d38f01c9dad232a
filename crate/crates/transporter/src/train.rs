//! Dataset preparation, the training loop and keypoint inference.

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use usbone_core::{apply_tga, build_scale_stack, BoneMapConfig, Frame, KeypointSet, ScaleStack, TgaConfig, VideoSequence};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::layers::Mode;
use crate::net::{NetworkSpec, Transporter};
use crate::optim::{learning_rate, Adam};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub batch_size: usize,
    pub train_pairs: usize,
    pub val_pairs: usize,
    /// Frame offset between source and target.
    pub pair_separation: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.001,
            lr_decay: 0.95,
            decay_every: 10,
            batch_size: 16,
            train_pairs: 1024,
            val_pairs: 512,
            pair_separation: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("epochs", self.epochs),
            ("decay_every", self.decay_every),
            ("batch_size", self.batch_size),
            ("train_pairs", self.train_pairs),
            ("val_pairs", self.val_pairs),
            ("pair_separation", self.pair_separation),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::arg(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::arg("learning_rate must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::arg("lr_decay must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        learning_rate(self.learning_rate, self.lr_decay, self.decay_every, epoch)
    }
}

/// Network input `[1, C, H, W]` for one stack.
pub fn stack_tensor(stack: &ScaleStack) -> Tensor<f32> {
    let (h, w) = stack.dims();
    let data = stack.channels().iter().flat_map(|f| f.data().iter().map(|&v| v as f32)).collect();
    Tensor::new([1, stack.num_channels(), h, w], data)
}

pub fn prepare_frame(frame: &Frame, tga: &TgaConfig, bonemap: &BoneMapConfig) -> Result<Tensor<f32>> {
    Ok(stack_tensor(&build_scale_stack(&apply_tga(frame, tga)?, bonemap)?))
}

/// Network inputs for every frame, computed in parallel and kept in frame order.
pub fn prepare_sequence(seq: &VideoSequence, tga: &TgaConfig, bonemap: &BoneMapConfig) -> Result<Vec<Tensor<f32>>> {
    tga.validate()?;
    bonemap.validate()?;
    seq.frames().par_iter().map(|f| prepare_frame(f, tga, bonemap)).collect()
}

/// Precomputed network inputs of one or more sweeps.
#[derive(Debug, Clone)]
pub struct Dataset {
    sequences: Vec<Vec<Tensor<f32>>>,
}

/// `(sequence, source frame, target frame)`.
pub type PairIndex = (usize, usize, usize);

impl Dataset {
    pub fn build(seqs: &[VideoSequence], tga: &TgaConfig, bonemap: &BoneMapConfig) -> Result<Self> {
        let sequences = seqs.iter().map(|s| prepare_sequence(s, tga, bonemap)).collect::<Result<Vec<_>>>()?;
        Self::from_tensors(sequences)
    }

    pub fn from_tensors(sequences: Vec<Vec<Tensor<f32>>>) -> Result<Self> {
        let first = sequences
            .iter()
            .flatten()
            .next()
            .ok_or_else(|| Error::arg("dataset has no frames"))?
            .shape();
        if sequences.iter().flatten().any(|t| t.shape() != first || first[0] != 1) {
            return Err(Error::arg("all frames of a dataset must share one shape"));
        }
        Ok(Self { sequences })
    }

    pub fn input_shape(&self) -> [usize; 4] {
        self.sequences.iter().flatten().next().expect("non-empty").shape()
    }

    pub fn frames(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// `count` pairs drawn with replacement, uniform over every valid
    /// source frame of every sequence.
    pub fn draw_pairs(&self, separation: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<PairIndex>> {
        let starts: Vec<usize> = self.sequences.iter().map(|s| s.len().saturating_sub(separation)).collect();
        let total: usize = starts.iter().sum();
        if total == 0 {
            return Err(Error::arg(format!(
                "no sequence is longer than the pair separation {separation}"
            )));
        }
        Ok((0..count)
            .map(|_| {
                let mut u = rng.random_range(0..total);
                let mut s = 0;
                while u >= starts[s] {
                    u -= starts[s];
                    s += 1;
                }
                (s, u, u + separation)
            })
            .collect())
    }

    /// Source batch, target batch and reconstruction target.
    pub fn batch(&self, pairs: &[PairIndex], all_channels: bool) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
        let src: Vec<Tensor<f32>> = pairs.iter().map(|&(s, a, _)| self.sequences[s][a].clone()).collect();
        let tgt: Vec<Tensor<f32>> = pairs.iter().map(|&(s, _, b)| self.sequences[s][b].clone()).collect();
        let target = Tensor::stack_batch(&tgt);
        let recon = if all_channels {
            target.clone()
        } else {
            let [n, _, h, w] = target.shape();
            let data = (0..n).flat_map(|b| target.plane(b, 0).to_vec()).collect();
            Tensor::new([n, 1, h, w], data)
        };
        (Tensor::stack_batch(&src), target, recon)
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Transporter<f32>,
    pub metrics: Vec<EpochMetrics>,
    /// Training loss of every optimizer step in order.
    pub step_losses: Vec<f64>,
}

const PAIR_STREAM_TRAIN: u64 = 1;
const PAIR_STREAM_VAL: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn mean_loss(model: &mut Transporter<f32>, data: &Dataset, pairs: &[PairIndex], batch: usize) -> Result<f64> {
    let all = model.spec.reconstruct_all_channels;
    let mut total = 0.0;
    for chunk in pairs.chunks(batch) {
        let (s, t, r) = data.batch(chunk, all);
        total += model.step(&s, &t, &r, Mode::Eval)?.loss as f64 * chunk.len() as f64;
    }
    Ok(total / pairs.len() as f64)
}

/// Trains a fresh model. `on_epoch` runs after every epoch with that
/// epoch's metrics and the current model.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    spec: &NetworkSpec,
    mut on_epoch: impl FnMut(&EpochMetrics, &mut Transporter<f32>) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let [_, channels, h, w] = data.input_shape();
    let mut model = Transporter::<f32>::new(spec, channels, cfg.seed)?;
    model.check_input(&Tensor::zeros([1, channels, h, w]))?;
    let train_pairs = data.draw_pairs(cfg.pair_separation, cfg.train_pairs, &mut stream(cfg.seed, PAIR_STREAM_TRAIN))?;
    let val_pairs = data.draw_pairs(cfg.pair_separation, cfg.val_pairs, &mut stream(cfg.seed, PAIR_STREAM_VAL))?;
    let mut shuffle = stream(cfg.seed, SHUFFLE_STREAM);
    let mut adam = Adam::default();
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut order = train_pairs;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (s, t, r) = data.batch(chunk, spec.reconstruct_all_channels);
            model.zero_grad();
            let loss = model.step(&s, &t, &r, Mode::Train)?.loss as f64;
            if !loss.is_finite() {
                return Err(Error::NonFinite { epoch, step, loss });
            }
            adam.update(&mut model, lr);
            step_losses.push(loss);
            total += loss * chunk.len() as f64;
        }
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: total / order.len() as f64,
            val_loss: mean_loss(&mut model, data, &val_pairs, cfg.batch_size)?,
        };
        on_epoch(&m, &mut model)?;
        metrics.push(m);
    }
    Ok(TrainOutcome {
        model,
        metrics,
        step_losses,
    })
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ustp";

/// Trains while appending `metrics.jsonl` and rewriting `checkpoint.ustp`
/// in `out_dir` after every epoch.
pub fn train_to_dir(data: &Dataset, cfg: &TrainConfig, spec: &NetworkSpec, out_dir: impl AsRef<Path>) -> Result<TrainOutcome> {
    let dir = out_dir.as_ref();
    let io = |p: &Path, e| Error::Core(usbone_core::Error::io(p, e));
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let metrics_path: PathBuf = dir.join(METRICS_FILE);
    let mut log = File::create(&metrics_path).map_err(|e| io(&metrics_path, e))?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    train(data, cfg, spec, |m, model| {
        let line = serde_json::to_string(m).expect("metrics serialize");
        writeln!(log, "{line}").and_then(|_| log.flush()).map_err(|e| io(&metrics_path, e))?;
        checkpoint::save(model, &ckpt)
    })
}

/// Keypoints of every input, mapped onto a `resolution` pixel grid.
pub fn infer_batch(
    model: &mut Transporter<f32>,
    inputs: &[Tensor<f32>],
    batch: usize,
    resolution: (usize, usize),
) -> Result<Vec<KeypointSet>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(batch.max(1)) {
        let x = Tensor::stack_batch(chunk);
        let kp = model.keynet_forward(&x, Mode::Eval)?;
        for coords in &kp.coords {
            let c: Vec<[f64; 2]> = coords.iter().map(|p| [p[0] as f64, p[1] as f64]).collect();
            out.push(KeypointSet::from_normalized(&c, resolution));
        }
    }
    Ok(out)
}

/// TGA, scale stack and KeyNet for one raw frame.
pub fn infer_keypoints(model: &mut Transporter<f32>, frame: &Frame, tga: &TgaConfig, bonemap: &BoneMapConfig) -> Result<KeypointSet> {
    let x = prepare_frame(frame, tga, bonemap)?;
    Ok(infer_batch(model, &[x], 1, frame.dims())?.remove(0))
}

pub fn infer_sequence(
    model: &mut Transporter<f32>,
    seq: &VideoSequence,
    tga: &TgaConfig,
    bonemap: &BoneMapConfig,
    batch: usize,
) -> Result<Vec<KeypointSet>> {
    infer_batch(model, &prepare_sequence(seq, tga, bonemap)?, batch, seq.dims())
}
