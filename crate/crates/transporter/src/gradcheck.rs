//! Finite-difference audit of every differentiable operation, in f64.
//!
//! Each check draws [`INSTANCES`] random small problems and compares the
//! analytic gradient with central differences at a spread of coordinates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::keypoints::*;
use crate::layers::*;
use crate::net::{ConvBlock, ConvBlockSpec, NetworkSpec, Transporter};
use crate::tensor::Tensor;

pub const REL: f64 = 1e-3;
pub const FLOOR: f64 = 1e-5;
pub const H: f64 = 1e-6;
pub const INSTANCES: u64 = 5;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 4], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn close(a: f64, n: f64) -> bool {
    (a - n).abs() <= FLOOR.max(REL * a.abs().max(n.abs()))
}

/// Compares `analytic` with central differences of `loss` at up to `limit`
/// coordinates of `x`.
/// Coordinates compared, or a description of the first mismatch.
pub type CheckResult = std::result::Result<usize, String>;

fn audit(
    label: &str,
    x: &Tensor<f64>,
    analytic: &Tensor<f64>,
    limit: usize,
    mut loss: impl FnMut(&Tensor<f64>) -> f64,
) -> CheckResult {
    if x.shape() != analytic.shape() {
        return Err(format!("{label}: gradient shape {:?} vs {:?}", analytic.shape(), x.shape()));
    }
    let mut checked = 0;
    let stride = (x.len() / limit).max(1);
    for i in (0..x.len()).step_by(stride) {
        let mut p = x.clone();
        p.data_mut()[i] += H;
        let up = loss(&p);
        p.data_mut()[i] -= 2.0 * H;
        let down = loss(&p);
        let numeric = (up - down) / (2.0 * H);
        let a = analytic.data()[i];
        if !close(a, numeric) {
            return Err(format!("{label}[{i}]: analytic {a} numeric {numeric}"));
        }
        checked += 1;
    }
    Ok(checked)
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Keeps inputs away from the ReLU kink so differences stay on one side.
fn off_kink(t: Tensor<f64>) -> Tensor<f64> {
    t.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
}

pub fn conv2d_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (kernel, stride) = [(3, 1), (3, 2), (1, 1)][seed as usize % 3];
        let conv = Conv2d::<f64>::new(2, 3, kernel, stride, &mut rng);
        let x = random(&mut rng, [2, 2, 6, 5], -1.0, 1.0);
        let y = conv.forward(&x);
        let r = random(&mut rng, y.shape(), -1.0, 1.0);
        let mut c = conv.clone();
        let dx = c.backward(&x, &r, true).unwrap();
        n += audit("conv dx", &x, &dx, 200, |p| dot(&conv.forward(p), &r))?;
        n += audit("conv dw", &conv.weight.value, &c.weight.grad, 200, |w| {
            let mut k = conv.clone();
            k.weight.value = w.clone();
            dot(&k.forward(&x), &r)
        })?;
        n += audit("conv db", &conv.bias.value, &c.bias.grad, 10, |b| {
            let mut k = conv.clone();
            k.bias.value = b.clone();
            dot(&k.forward(&x), &r)
        })?;
    }
    Ok(n)
}

pub fn batch_norm_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mode = if seed < 3 { Mode::Train } else { Mode::Eval };
        let mut bn = BatchNorm2d::<f64>::new(3);
        bn.gamma.value = random(&mut rng, [1, 3, 1, 1], 0.5, 1.5);
        bn.beta.value = random(&mut rng, [1, 3, 1, 1], -0.5, 0.5);
        bn.running_mean = random(&mut rng, [1, 3, 1, 1], -0.5, 0.5);
        bn.running_var = random(&mut rng, [1, 3, 1, 1], 0.5, 2.0);
        let x = random(&mut rng, [2, 3, 4, 3], -2.0, 2.0);
        let (y, cache) = bn.clone().forward(&x, mode);
        let r = random(&mut rng, y.shape(), -1.0, 1.0);
        let mut b = bn.clone();
        let dx = b.backward(&cache, &r);
        let eval = |k: &BatchNorm2d<f64>, p: &Tensor<f64>| dot(&k.clone().forward(p, mode).0, &r);
        n += audit("bn dx", &x, &dx, 100, |p| eval(&bn, p))?;
        n += audit("bn dgamma", &bn.gamma.value, &b.gamma.grad, 3, |g| {
            let mut k = bn.clone();
            k.gamma.value = g.clone();
            eval(&k, &x)
        })?;
        n += audit("bn dbeta", &bn.beta.value, &b.beta.grad, 3, |g| {
            let mut k = bn.clone();
            k.beta.value = g.clone();
            eval(&k, &x)
        })?;
    }
    Ok(n)
}

pub fn pointwise_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let x = off_kink(random(&mut rng, [2, 2, 3, 4], -2.0, 2.0));
        let r = random(&mut rng, x.shape(), -1.0, 1.0);
        n += audit("relu", &x, &relu_backward(&relu(&x), &r), 100, |p| dot(&relu(p), &r))?;
        n += audit("sigmoid", &x, &sigmoid_backward(&sigmoid(&x), &r), 100, |p| dot(&sigmoid(p), &r))?;
        let ru = random(&mut rng, [2, 2, 6, 8], -1.0, 1.0);
        n += audit("upsample", &x, &upsample2x_backward(&ru), 100, |p| dot(&upsample2x(p), &ru))?;
        let t = random(&mut rng, x.shape(), 0.0, 1.0);
        n += audit("mse", &x, &mse(&x, &t).1, 100, |p| mse(p, &t).0)?;
    }
    Ok(n)
}

fn coords_tensor(c: &Coords<f64>) -> Tensor<f64> {
    let (n, k) = (c.len(), c[0].len());
    Tensor::from_fn([n, k, 1, 2], |i| c[i / (2 * k)][(i / 2) % k][i % 2])
}

fn tensor_coords(t: &Tensor<f64>) -> Coords<f64> {
    let [n, k, _, _] = t.shape();
    (0..n).map(|b| (0..k).map(|j| [t.at(b, j, 0, 0), t.at(b, j, 0, 1)]).collect()).collect()
}

pub fn soft_argmax_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let logits = random(&mut rng, [2, 3, 5, 6], -2.0, 2.0);
        let (coords, cache) = soft_argmax(&logits);
        let r = random(&mut rng, coords_tensor(&coords).shape(), -1.0, 1.0);
        let dl = soft_argmax_backward(&cache, &tensor_coords(&r));
        n += audit("soft-argmax", &logits, &dl, 200, |p| dot(&coords_tensor(&soft_argmax(p).0), &r))?;
    }
    Ok(n)
}

pub fn gaussian_render_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let sigma = rng.random_range(0.1..0.4);
        let c = random(&mut rng, [2, 3, 1, 2], -0.9, 0.9);
        let maps = render_gaussians(&tensor_coords(&c), 7, 6, sigma);
        let r = random(&mut rng, maps.shape(), -1.0, 1.0);
        let g = coords_tensor(&render_gaussians_backward(&tensor_coords(&c), &maps, &r, sigma));
        n += audit("render", &c, &g, 20, |p| dot(&render_gaussians(&tensor_coords(p), 7, 6, sigma), &r))?;
    }
    Ok(n)
}

pub fn heatmap_combination_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let maps = random(&mut rng, [2, 3, 4, 4], 0.0, 0.95);
        let r = random(&mut rng, [2, 1, 4, 4], -1.0, 1.0);
        n += audit("combine", &maps, &combine_heatmaps_backward(&maps, &r), 100, |p| dot(&combine_heatmaps(p), &r))?;
    }
    Ok(n)
}

pub fn transport_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let ps = random(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
        let pt = random(&mut rng, [2, 3, 4, 4], -1.0, 1.0);
        let hs = random(&mut rng, [2, 1, 4, 4], 0.0, 1.0);
        let ht = random(&mut rng, [2, 1, 4, 4], 0.0, 1.0);
        let r = random(&mut rng, ps.shape(), -1.0, 1.0);
        let g = transport_backward(&ps, &pt, &hs, &ht, &r);
        let f = |a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>, d: &Tensor<f64>| dot(&transport(a, b, c, d).unwrap(), &r);
        n += audit("transport psi_s", &ps, &g.psi_s, 100, |p| f(p, &pt, &hs, &ht))?;
        n += audit("transport psi_t", &pt, &g.psi_t, 100, |p| f(&ps, p, &hs, &ht))?;
        n += audit("transport h_s", &hs, &g.h_s, 100, |p| f(&ps, &pt, p, &ht))?;
        n += audit("transport h_t", &ht, &g.h_t, 100, |p| f(&ps, &pt, &hs, p))?;
    }
    Ok(n)
}

pub fn conv_block_gradients() -> CheckResult {
    let mut n = 0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + seed);
        let spec = ConvBlockSpec {
            in_channels: 2,
            out_channels: 3,
            kernel: 3,
            stride: 1 + seed as usize % 2,
            activation: true,
        };
        let block = ConvBlock::<f64>::new(&spec, &mut rng);
        let x = random(&mut rng, [2, 2, 5, 5], -1.0, 1.0);
        let (y, cache) = block.clone().forward(&x, Mode::Train);
        let r = random(&mut rng, y.shape(), -1.0, 1.0);
        let mut b = block.clone();
        let dx = b.backward(&cache, &r, true).unwrap();
        n += audit("block dx", &x, &dx, 50, |p| dot(&block.clone().forward(p, Mode::Train).0, &r))?;
        n += audit("block dw", &block.conv.weight.value, &b.conv.weight.grad, 50, |w| {
            let mut k = block.clone();
            k.conv.weight.value = w.clone();
            dot(&k.forward(&x, Mode::Train).0, &r)
        })?;
    }
    Ok(n)
}

fn toy_spec() -> NetworkSpec {
    NetworkSpec {
        widths: [3, 3, 4, 4, 5, 5],
        keypoints: 2,
        heatmap_sigma: 0.3,
        ..NetworkSpec::default()
    }
}

type Batch = (Tensor<f64>, Tensor<f64>, Tensor<f64>, Tensor<f64>);

/// Loss of the target step with one parameter replaced and the source
/// branch held at the unperturbed network's output.
fn step_loss(net: &Transporter<f64>, name: &str, value: &Tensor<f64>, b: &Batch) -> f64 {
    let mut n = net.clone();
    n.visit(&mut |k, mut s| {
        if k == name {
            *s.tensor() = value.clone();
        }
    });
    n.target_step(&b.0, &b.1, &b.2, &b.3, Mode::Train).unwrap().loss
}

fn param(net: &mut Transporter<f64>, name: &str, grad: bool) -> Tensor<f64> {
    let mut out = None;
    net.visit(&mut |k, s| {
        if let (true, StateRef::Param(p)) = (k == name, s) {
            out = Some(if grad { p.grad.clone() } else { p.value.clone() });
        }
    });
    out.unwrap_or_else(|| panic!("no parameter {name}"))
}

pub fn end_to_end_step_gradients() -> CheckResult {
    let mut n = 0;
    let names = [
        "refinenet.5.conv.weight",
        "refinenet.2.conv.weight",
        "refinenet.0.bn.gamma",
        "keynet.head.weight",
        "keynet.4.conv.weight",
        "ffcnn.5.conv.bias",
        "ffcnn.0.conv.weight",
    ];
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let mut net = Transporter::<f64>::new(&toy_spec(), 2, seed).unwrap();
        let source = random(&mut rng, [2, 2, 16, 16], 0.0, 1.0);
        let target = random(&mut rng, [2, 2, 16, 16], 0.0, 1.0);
        let recon = random(&mut rng, [2, 1, 16, 16], 0.0, 1.0);
        let (psi_s, h_s) = net.source_branch(&source, Mode::Eval).unwrap();
        let batch = (psi_s, h_s, target, recon);
        let frozen = net.clone();
        net.zero_grad();
        net.target_step(&batch.0, &batch.1, &batch.2, &batch.3, Mode::Train).unwrap();
        for name in names {
            let value = param(&mut net.clone(), name, false);
            let grad = param(&mut net, name, true);
            n += audit(name, &value, &grad, 12, |v| step_loss(&frozen, name, v, &batch))?;
        }
    }
    Ok(n)
}


/// Every check by name, in a fixed order.
pub const CHECKS: [(&str, fn() -> CheckResult); 9] = [
    ("conv2d", conv2d_gradients),
    ("batch_norm", batch_norm_gradients),
    ("pointwise", pointwise_gradients),
    ("soft_argmax", soft_argmax_gradients),
    ("gaussian_render", gaussian_render_gradients),
    ("heatmap_combination", heatmap_combination_gradients),
    ("transport", transport_gradients),
    ("conv_block", conv_block_gradients),
    ("end_to_end_step", end_to_end_step_gradients),
];
