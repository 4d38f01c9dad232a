//! FF-CNN encoder, KeyNet and RefineNet, and the transporter model that
//! ties them together.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{
    combine_heatmaps, combine_heatmaps_backward, render_gaussians, render_gaussians_backward, soft_argmax,
    soft_argmax_backward, transport, transport_backward, Coords,
};
use crate::layers::{
    mse, relu, relu_backward, sigmoid, sigmoid_backward, upsample2x, upsample2x_backward, BatchNorm2d, BnCache, Conv2d,
    Mode, StateRef, Visitor,
};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// ReLU then batch normalization after the convolution.
    pub activation: bool,
}

impl ConvBlockSpec {
    fn new(in_channels: usize, out_channels: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: 3,
            stride,
            activation: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkSpec {
    /// Output channels of the six encoder blocks; the last is the feature depth.
    pub widths: [usize; 6],
    /// Zero-based encoder blocks with stride 2.
    pub downsample_blocks: Vec<usize>,
    pub keypoints: usize,
    /// Heatmap standard deviation in normalized coordinates.
    pub heatmap_sigma: f64,
    /// Reconstruct every input channel instead of the TGA frame alone.
    pub reconstruct_all_channels: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            widths: [32, 32, 64, 64, 128, 128],
            downsample_blocks: vec![2, 4],
            keypoints: 10,
            heatmap_sigma: 0.1,
            reconstruct_all_channels: false,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.keypoints == 0 {
            return Err(Error::arg("keypoints must be at least 1"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::arg("channel widths must be positive"));
        }
        if self.downsample_blocks.iter().any(|&b| b >= 6) {
            return Err(Error::arg("downsample block index must be below 6"));
        }
        let mut sorted = self.downsample_blocks.clone();
        sorted.dedup();
        if sorted.len() != self.downsample_blocks.len() || !sorted.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::arg("downsample blocks must be strictly increasing"));
        }
        if !(self.heatmap_sigma > 0.0 && self.heatmap_sigma.is_finite()) {
            return Err(Error::arg("heatmap_sigma must be positive"));
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.widths[5]
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.downsample_blocks.len()
    }

    /// Feature-map side for an input side, or an error when it does not divide.
    pub fn feature_side(&self, input_side: usize) -> Result<usize> {
        let f = self.downsample_factor();
        if input_side == 0 || input_side % f != 0 {
            return Err(Error::arg(format!(
                "input side {input_side} is not divisible by the downsampling factor {f}"
            )));
        }
        Ok(input_side / f)
    }

    pub fn output_channels(&self, input_channels: usize) -> usize {
        if self.reconstruct_all_channels {
            input_channels
        } else {
            1
        }
    }

    pub fn encoder_blocks(&self, input_channels: usize) -> Vec<ConvBlockSpec> {
        let mut prev = input_channels;
        (0..6)
            .map(|i| {
                let stride = if self.downsample_blocks.contains(&i) { 2 } else { 1 };
                let b = ConvBlockSpec::new(prev, self.widths[i], stride);
                prev = self.widths[i];
                b
            })
            .collect()
    }

    /// RefineNet mirrors the encoder widths; the last block is a plain
    /// convolution onto the output channels.
    pub fn refine_blocks(&self, input_channels: usize) -> Vec<ConvBlockSpec> {
        let rev: Vec<usize> = self.widths.iter().rev().copied().collect();
        let mut blocks: Vec<ConvBlockSpec> = (0..5).map(|i| ConvBlockSpec::new(rev[i], rev[i + 1], 1)).collect();
        blocks.push(ConvBlockSpec {
            activation: false,
            ..ConvBlockSpec::new(rev[5], self.output_channels(input_channels), 1)
        });
        blocks
    }

    /// RefineNet blocks followed by a nearest 2x upsampling.
    fn refine_upsample_after(&self) -> Vec<usize> {
        self.downsample_blocks.iter().rev().map(|&b| 5 - b).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ConvBlock<T> {
    pub conv: Conv2d<T>,
    pub bn: Option<BatchNorm2d<T>>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    input: Tensor<T>,
    relu_out: Option<Tensor<T>>,
    bn: Option<BnCache<T>>,
}

impl<T: Real> ConvBlock<T> {
    pub fn new(spec: &ConvBlockSpec, rng: &mut ChaCha8Rng) -> Self {
        Self {
            conv: Conv2d::new(spec.in_channels, spec.out_channels, spec.kernel, spec.stride, rng),
            bn: spec.activation.then(|| BatchNorm2d::new(spec.out_channels)),
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BlockCache<T>) {
        let z = self.conv.forward(x);
        match self.bn.as_mut() {
            None => (
                z,
                BlockCache {
                    input: x.clone(),
                    relu_out: None,
                    bn: None,
                },
            ),
            Some(bn) => {
                let r = relu(&z);
                let (y, c) = bn.forward(&r, mode);
                (
                    y,
                    BlockCache {
                        input: x.clone(),
                        relu_out: Some(r),
                        bn: Some(c),
                    },
                )
            }
        }
    }

    pub fn backward(&mut self, cache: &BlockCache<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let dz = match (self.bn.as_mut(), &cache.bn, &cache.relu_out) {
            (Some(bn), Some(bc), Some(r)) => relu_backward(r, &bn.backward(bc, dy)),
            _ => dy.clone(),
        };
        self.conv.backward(&cache.input, &dz, need_dx)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        if let Some(bn) = self.bn.as_mut() {
            bn.visit(&format!("{prefix}.bn"), f);
        }
    }
}

/// Conv blocks with optional 2x upsampling after selected blocks.
#[derive(Debug, Clone)]
pub struct ConvStack<T> {
    pub blocks: Vec<ConvBlock<T>>,
    upsample_after: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
}

impl<T: Real> ConvStack<T> {
    pub fn new(specs: &[ConvBlockSpec], upsample_after: Vec<usize>, rng: &mut ChaCha8Rng) -> Self {
        Self {
            blocks: specs.iter().map(|s| ConvBlock::new(s, rng)).collect(),
            upsample_after,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.blocks[0].conv.in_channels()
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, StackCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for (i, block) in self.blocks.iter_mut().enumerate() {
            let (y, c) = block.forward(&cur, mode);
            caches.push(c);
            cur = if self.upsample_after.contains(&i) { upsample2x(&y) } else { y };
        }
        (cur, StackCache { blocks: caches })
    }

    pub fn backward(&mut self, cache: &StackCache<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let mut grad = dy.clone();
        for i in (0..self.blocks.len()).rev() {
            if self.upsample_after.contains(&i) {
                grad = upsample2x_backward(&grad);
            }
            let want = need_dx || i > 0;
            match self.blocks[i].backward(&cache.blocks[i], &grad, want) {
                Some(g) => grad = g,
                None => return None,
            }
        }
        Some(grad)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit(&format!("{prefix}.{i}"), f);
        }
    }
}

/// Encoder, keypoint network and reconstructor.
#[derive(Debug, Clone)]
pub struct Transporter<T> {
    pub spec: NetworkSpec,
    pub ffcnn: ConvStack<T>,
    pub keynet: ConvStack<T>,
    pub keynet_head: Conv2d<T>,
    pub refinenet: ConvStack<T>,
}

/// Keypoints and heatmaps of a batch.
#[derive(Debug, Clone)]
pub struct KeypointOutput<T> {
    pub coords: Coords<T>,
    /// One Gaussian per keypoint, `[n, K, h, w]`.
    pub heatmaps: Tensor<T>,
}

/// Losses and reconstruction from one training or validation step.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub loss: T,
    pub reconstruction: Tensor<T>,
}

impl<T: Real> Transporter<T> {
    pub fn new(spec: &NetworkSpec, input_channels: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if input_channels == 0 {
            return Err(Error::arg("input channel count must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = spec.encoder_blocks(input_channels);
        let ffcnn = ConvStack::new(&enc, vec![], &mut rng);
        let keynet = ConvStack::new(&enc, vec![], &mut rng);
        let keynet_head = Conv2d::new(spec.feature_channels(), spec.keypoints, 1, 1, &mut rng);
        let refinenet = ConvStack::new(&spec.refine_blocks(input_channels), spec.refine_upsample_after(), &mut rng);
        Ok(Self {
            spec: spec.clone(),
            ffcnn,
            keynet,
            keynet_head,
            refinenet,
        })
    }

    pub fn input_channels(&self) -> usize {
        self.ffcnn.in_channels()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, h, w] = x.shape();
        if c != self.input_channels() {
            return Err(Error::arg(format!(
                "network expects {} input channels, got {c}",
                self.input_channels()
            )));
        }
        self.spec.feature_side(h)?;
        self.spec.feature_side(w)?;
        Ok(())
    }

    /// Feature map of the encoder.
    pub fn ffcnn_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(x)?;
        Ok(self.ffcnn.forward(x, mode).0)
    }

    fn keynet_logits(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, StackCache<T>, Tensor<T>) {
        let (f, cache) = self.keynet.forward(x, mode);
        let logits = self.keynet_head.forward(&f);
        (logits, cache, f)
    }

    pub fn keynet_forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<KeypointOutput<T>> {
        self.check_input(x)?;
        let (logits, _, _) = self.keynet_logits(x, mode);
        let [_, _, h, w] = logits.shape();
        let (coords, _) = soft_argmax(&logits);
        let heatmaps = render_gaussians(&coords, h, w, self.spec.heatmap_sigma);
        Ok(KeypointOutput { coords, heatmaps })
    }

    pub fn refinenet_forward(&mut self, psi_hat: &Tensor<T>, mode: Mode) -> Tensor<T> {
        sigmoid(&self.refinenet.forward(psi_hat, mode).0)
    }

    /// Source features and combined source heatmap. Both are treated as
    /// constants by [`Transporter::target_step`].
    pub fn source_branch(&mut self, source: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_input(source)?;
        let psi_s = self.ffcnn.forward(source, mode).0;
        let (logits, _, _) = self.keynet_logits(source, mode);
        let [_, _, fh, fw] = logits.shape();
        let maps = render_gaussians(&soft_argmax(&logits).0, fh, fw, self.spec.heatmap_sigma);
        Ok((psi_s, combine_heatmaps(&maps)))
    }

    /// Reconstruction of `target` from the source/target pair. Gradients are
    /// accumulated when `mode` is `Train`; the source branch is detached.
    pub fn step(&mut self, source: &Tensor<T>, target: &Tensor<T>, recon_target: &Tensor<T>, mode: Mode) -> Result<StepOutput<T>> {
        if source.shape() != target.shape() {
            return Err(Error::arg("source and target batches differ in shape"));
        }
        let (psi_s, h_s) = self.source_branch(source, mode)?;
        self.target_step(&psi_s, &h_s, target, recon_target, mode)
    }

    pub fn target_step(
        &mut self,
        psi_s: &Tensor<T>,
        h_s: &Tensor<T>,
        target: &Tensor<T>,
        recon_target: &Tensor<T>,
        mode: Mode,
    ) -> Result<StepOutput<T>> {
        self.check_input(target)?;
        let sigma = self.spec.heatmap_sigma;
        let (psi_t, ff_cache) = self.ffcnn.forward(target, mode);
        let (logits_t, kn_cache, kn_feat) = self.keynet_logits(target, mode);
        let [_, _, fh, fw] = logits_t.shape();
        let (coords_t, sa_cache) = soft_argmax(&logits_t);
        let maps_t = render_gaussians(&coords_t, fh, fw, sigma);
        let h_t = combine_heatmaps(&maps_t);

        let psi_hat = transport(psi_s, &psi_t, h_s, &h_t)?;
        let (raw, rf_cache) = self.refinenet.forward(&psi_hat, mode);
        let recon = sigmoid(&raw);
        if recon.shape() != recon_target.shape() {
            return Err(Error::arg(format!(
                "reconstruction {:?} does not match target {:?}",
                recon.shape(),
                recon_target.shape()
            )));
        }
        let (loss, dloss) = mse(&recon, recon_target);
        if mode == Mode::Train {
            let draw = sigmoid_backward(&recon, &dloss);
            let dpsi_hat = self.refinenet.backward(&rf_cache, &draw, true).expect("input gradient requested");
            let tg = transport_backward(psi_s, &psi_t, h_s, &h_t, &dpsi_hat);
            let dmaps = combine_heatmaps_backward(&maps_t, &tg.h_t);
            let dcoords = render_gaussians_backward(&coords_t, &maps_t, &dmaps, sigma);
            let dlogits = soft_argmax_backward(&sa_cache, &dcoords);
            let dfeat = self.keynet_head.backward(&kn_feat, &dlogits, true).expect("input gradient requested");
            self.keynet.backward(&kn_cache, &dfeat, false);
            self.ffcnn.backward(&ff_cache, &tg.psi_t, false);
        }
        Ok(StepOutput {
            loss,
            reconstruction: recon,
        })
    }

    /// Visits every parameter and buffer in a fixed order with stable names.
    pub fn visit(&mut self, f: &mut Visitor<'_, T>) {
        self.ffcnn.visit("ffcnn", f);
        self.keynet.visit("keynet", f);
        self.keynet_head.visit("keynet.head", f);
        self.refinenet.visit("refinenet", f);
    }

    pub fn zero_grad(&mut self) {
        self.visit(&mut |_, s| {
            if let StateRef::Param(p) = s {
                p.zero_grad();
            }
        });
    }

    pub fn parameter_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, s| {
            if let StateRef::Param(p) = s {
                n += p.value.len();
            }
        });
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn default_shapes_at_full_resolution() {
        let spec = NetworkSpec::default();
        let mut net = Transporter::<f32>::new(&spec, 4, 0).unwrap();
        let x = random_input([1, 4, 256, 256], 1);
        let psi = net.ffcnn_forward(&x, Mode::Eval).unwrap();
        assert_eq!(psi.shape(), [1, 128, 64, 64]);
        let kp = net.keynet_forward(&x, Mode::Eval).unwrap();
        assert_eq!(kp.coords[0].len(), 10);
        assert_eq!(kp.heatmaps.shape(), [1, 10, 64, 64]);
        let out = net.refinenet_forward(&psi, Mode::Eval);
        assert_eq!(out.shape(), [1, 1, 256, 256]);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn block_layout_matches_the_default_architecture() {
        let spec = NetworkSpec::default();
        let enc = spec.encoder_blocks(4);
        let strides: Vec<usize> = enc.iter().map(|b| b.stride).collect();
        assert_eq!(strides, [1, 1, 2, 1, 2, 1]);
        assert_eq!(enc[0].in_channels, 4);
        let refine = spec.refine_blocks(4);
        assert_eq!(refine.len(), 6);
        assert_eq!(refine[0].in_channels, 128);
        assert_eq!(refine[5].out_channels, 1);
        assert!(!refine[5].activation);
        assert_eq!(spec.refine_upsample_after(), vec![1, 3]);
        let all = NetworkSpec {
            reconstruct_all_channels: true,
            ..spec
        };
        assert_eq!(all.refine_blocks(4)[5].out_channels, 4);
    }

    #[test]
    fn zeroed_final_block_gives_zero_features() {
        let mut net = Transporter::<f32>::new(&NetworkSpec::default(), 4, 3).unwrap();
        let last = net.ffcnn.blocks.last_mut().unwrap();
        last.conv.weight.value.data_mut().fill(0.0);
        last.conv.bias.value.data_mut().fill(0.0);
        let bn = last.bn.as_mut().unwrap();
        bn.gamma.value.data_mut().fill(0.0);
        bn.beta.value.data_mut().fill(0.0);
        let psi = net.ffcnn_forward(&Tensor::zeros([1, 4, 32, 32]), Mode::Eval).unwrap();
        assert!(psi.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identical_batch_items_give_identical_outputs() {
        let mut net = Transporter::<f32>::new(&NetworkSpec::default(), 4, 4).unwrap();
        let one = random_input([1, 4, 16, 16], 7);
        let x = Tensor::stack_batch(&[one.clone(), one]);
        let psi = net.ffcnn_forward(&x, Mode::Eval).unwrap();
        assert_eq!(psi.item(0), psi.item(1));
        let a = net.refinenet_forward(&psi, Mode::Eval);
        let b = net.refinenet_forward(&psi, Mode::Eval);
        assert_eq!(a, b);
    }

    #[test]
    fn shape_mismatch_is_an_argument_error() {
        let mut net = Transporter::<f32>::new(&NetworkSpec::default(), 4, 0).unwrap();
        assert!(net.ffcnn_forward(&Tensor::zeros([1, 3, 16, 16]), Mode::Eval).is_err());
        assert!(net.keynet_forward(&Tensor::zeros([1, 4, 18, 16]), Mode::Eval).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let bad = NetworkSpec {
            keypoints: 0,
            ..NetworkSpec::default()
        };
        assert!(bad.validate().is_err());
        let bad = NetworkSpec {
            downsample_blocks: vec![4, 2],
            ..NetworkSpec::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut net = Transporter::<f32>::new(&NetworkSpec::default(), 4, 0).unwrap();
        let mut names = Vec::new();
        net.visit(&mut |n, _| names.push(n));
        let count = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), count);
        assert!(names.contains(&"refinenet.5.conv.weight".to_string()));
        assert!(!names.contains(&"refinenet.5.bn.gamma".to_string()));
    }
}
