//! Convolution, batch normalization and pointwise layers with explicit
//! backward passes. Backward functions accumulate parameter gradients and
//! return the gradient with respect to the layer input.

use rand::Rng;

use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated.
    Train,
    /// Running averages only.
    Eval,
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}

/// Borrowed model state handed to visitors: learnable parameters and
/// non-learnable buffers (batch-norm running statistics).
pub enum StateRef<'a, T> {
    Param(&'a mut Param<T>),
    Buffer(&'a mut Tensor<T>),
}

impl<T: Real> StateRef<'_, T> {
    pub fn tensor(&mut self) -> &mut Tensor<T> {
        match self {
            StateRef::Param(p) => &mut p.value,
            StateRef::Buffer(b) => b,
        }
    }
}

pub type Visitor<'v, T> = dyn FnMut(String, StateRef<'_, T>) + 'v;

/// Square-kernel 2-D convolution with zero padding `kernel / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub kernel: usize,
    pub stride: usize,
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Input coordinate for output position `o` and kernel tap `t`.
    #[inline]
    fn src(o: usize, t: usize, s: usize, pad: usize, n: usize) -> Option<usize> {
        let v = (o * s + t).checked_sub(pad)?;
        (v < n).then_some(v)
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.cols();
        for ch in 0..self.c {
            let plane = &x[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    let out = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let dst = &mut out[oy * self.wo..(oy + 1) * self.wo];
                        match Self::src(oy, ki, self.s, self.pad, self.h) {
                            None => dst.fill(T::zero()),
                            Some(iy) => {
                                let line = &plane[iy * self.w..(iy + 1) * self.w];
                                for (ox, d) in dst.iter_mut().enumerate() {
                                    *d = Self::src(ox, kj, self.s, self.pad, self.w).map_or(T::zero(), |ix| line[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let p = self.cols();
        for ch in 0..self.c {
            let plane = &mut dx[ch * self.h * self.w..(ch + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (ch * self.k + ki) * self.k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let Some(iy) = Self::src(oy, ki, self.s, self.pad, self.h) else {
                            continue;
                        };
                        for ox in 0..self.wo {
                            if let Some(ix) = Self::src(ox, kj, self.s, self.pad, self.w) {
                                plane[iy * self.w + ix] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl<T: Real> Conv2d<T> {
    /// Weights and bias drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(in_channels > 0 && out_channels > 0, "channel counts must be positive");
        assert!(kernel % 2 == 1 && stride >= 1);
        let fan_in = (in_channels * kernel * kernel) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let mut draw = |_| T::of(rng.random_range(-bound..bound));
        let weight = Tensor::from_fn([out_channels, in_channels, kernel, kernel], &mut draw);
        let bias = Tensor::from_fn([1, out_channels, 1, 1], &mut draw);
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            kernel,
            stride,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    fn geometry(&self, x: &Tensor<T>) -> Geometry {
        let [_, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels(), "conv expects {} input channels", self.in_channels());
        let (ho, wo) = self.out_dims(h, w);
        Geometry {
            c,
            h,
            w,
            k: self.kernel,
            s: self.stride,
            pad: self.kernel / 2,
            ho,
            wo,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let g = self.geometry(x);
        let n = x.shape()[0];
        let o = self.out_channels();
        let (rows, p) = (g.rows(), g.cols());
        let mut out = Tensor::zeros([n, o, g.ho, g.wo]);
        let mut cols = vec![T::zero(); rows * p];
        let bias = self.bias.value.data();
        let w = self.weight.value.data();
        for b in 0..n {
            g.im2col(x.item(b), &mut cols);
            let y = &mut out.data_mut()[b * o * p..(b + 1) * o * p];
            for (oc, chunk) in y.chunks_mut(p).enumerate() {
                chunk.fill(bias[oc]);
            }
            T::gemm(o, rows, p, T::one(), w, (rows as isize, 1), &cols, (p as isize, 1), T::one(), y, (p as isize, 1));
        }
        out
    }

    /// Accumulates weight and bias gradients; returns the input gradient
    /// when `need_dx`.
    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let g = self.geometry(x);
        let n = x.shape()[0];
        let o = self.out_channels();
        let (rows, p) = (g.rows(), g.cols());
        assert_eq!(dy.shape(), [n, o, g.ho, g.wo], "conv output gradient has the wrong shape");
        let mut cols = vec![T::zero(); rows * p];
        let mut dcols = vec![T::zero(); rows * p];
        let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
        for b in 0..n {
            let dyb = dy.item(b);
            for (oc, chunk) in dyb.chunks(p).enumerate() {
                let s: T = chunk.iter().copied().sum();
                self.bias.grad.data_mut()[oc] += s;
            }
            g.im2col(x.item(b), &mut cols);
            T::gemm(
                o,
                p,
                rows,
                T::one(),
                dyb,
                (p as isize, 1),
                &cols,
                (1, p as isize),
                T::one(),
                self.weight.grad.data_mut(),
                (rows as isize, 1),
            );
            if let Some(dx) = dx.as_mut() {
                T::gemm(
                    rows,
                    o,
                    p,
                    T::one(),
                    self.weight.value.data(),
                    (1, rows as isize),
                    dyb,
                    (p as isize, 1),
                    T::zero(),
                    &mut dcols,
                    (p as isize, 1),
                );
                let len = x.item_len();
                g.col2im(&dcols, &mut dx.data_mut()[b * len..(b + 1) * len]);
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(format!("{prefix}.weight"), StateRef::Param(&mut self.weight));
        f(format!("{prefix}.bias"), StateRef::Param(&mut self.bias));
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    x_hat: Tensor<T>,
    inv_std: Vec<T>,
    mode: Mode,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: Param::new(Tensor::full(shape, T::one())),
            beta: Param::new(Tensor::zeros(shape)),
            running_mean: Tensor::zeros(shape),
            running_var: Tensor::full(shape, T::one()),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> (Tensor<T>, BnCache<T>) {
        let [n, c, _, _] = x.shape();
        assert_eq!(c, self.gamma.value.len(), "batch norm channel mismatch");
        let plane = x.plane_len();
        let count = n * plane;
        let eps = T::of(self.eps);
        let mut inv_std = vec![T::zero(); c];
        let mut mean = vec![T::zero(); c];
        match mode {
            Mode::Train => {
                let m = T::of(self.momentum);
                for ch in 0..c {
                    let (mut s, mut s2) = (0.0, 0.0);
                    for b in 0..n {
                        for &v in x.plane(b, ch) {
                            let v = v.to_f64().unwrap();
                            s += v;
                            s2 += v * v;
                        }
                    }
                    let mu = s / count as f64;
                    let var = (s2 / count as f64 - mu * mu).max(0.0);
                    mean[ch] = T::of(mu);
                    inv_std[ch] = T::one() / (T::of(var) + eps).sqrt();
                    let unbiased = if count > 1 { var * count as f64 / (count - 1) as f64 } else { var };
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (T::one() - m) * *rm + m * T::of(mu);
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (T::one() - m) * *rv + m * T::of(unbiased);
                }
            }
            Mode::Eval => {
                for ch in 0..c {
                    mean[ch] = self.running_mean.data()[ch];
                    inv_std[ch] = T::one() / (self.running_var.data()[ch] + eps).sqrt();
                }
            }
        }
        let mut x_hat = Tensor::zeros(x.shape());
        let mut y = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                let (gm, bt) = (self.gamma.value.data()[ch], self.beta.value.data()[ch]);
                let src = x.plane(b, ch);
                let xh = &mut x_hat.data_mut()[off..off + plane];
                for (d, &v) in xh.iter_mut().zip(src) {
                    *d = (v - mean[ch]) * inv_std[ch];
                }
                for (d, &v) in y.data_mut()[off..off + plane].iter_mut().zip(x_hat.plane(b, ch)) {
                    *d = gm * v + bt;
                }
            }
        }
        (y, BnCache { x_hat, inv_std, mode })
    }

    pub fn backward(&mut self, cache: &BnCache<T>, dy: &Tensor<T>) -> Tensor<T> {
        let [n, c, _, _] = dy.shape();
        let plane = dy.plane_len();
        let count = T::of((n * plane) as f64);
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let (mut sum_dy, mut sum_dy_xh) = (T::zero(), T::zero());
            for b in 0..n {
                for (&g, &xh) in dy.plane(b, ch).iter().zip(cache.x_hat.plane(b, ch)) {
                    sum_dy += g;
                    sum_dy_xh += g * xh;
                }
            }
            self.gamma.grad.data_mut()[ch] += sum_dy_xh;
            self.beta.grad.data_mut()[ch] += sum_dy;
            let scale = self.gamma.value.data()[ch] * cache.inv_std[ch];
            let (mean_dy, mean_dy_xh) = (sum_dy / count, sum_dy_xh / count);
            for b in 0..n {
                let off = (b * c + ch) * plane;
                let out = &mut dx.data_mut()[off..off + plane];
                for ((d, &g), &xh) in out.iter_mut().zip(dy.plane(b, ch)).zip(cache.x_hat.plane(b, ch)) {
                    *d = match cache.mode {
                        Mode::Train => scale * (g - mean_dy - xh * mean_dy_xh),
                        Mode::Eval => scale * g,
                    };
                }
            }
        }
        dx
    }

    pub fn visit(&mut self, prefix: &str, f: &mut Visitor<'_, T>) {
        f(format!("{prefix}.gamma"), StateRef::Param(&mut self.gamma));
        f(format!("{prefix}.beta"), StateRef::Param(&mut self.beta));
        f(format!("{prefix}.running_mean"), StateRef::Buffer(&mut self.running_mean));
        f(format!("{prefix}.running_var"), StateRef::Buffer(&mut self.running_var));
    }
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip(y, dy, |y, g| if y > T::zero() { g } else { T::zero() })
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| T::one() / (T::one() + (-v).exp()))
}

/// Gradient of the sigmoid given its output.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip(y, dy, |y, g| g * y * (T::one() - y))
}

pub fn upsample2x<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let (h2, w2) = (2 * h, 2 * w);
    Tensor::from_fn([n, c, h2, w2], |i| {
        let (plane, rest) = (i / (h2 * w2), i % (h2 * w2));
        let (r, col) = (rest / w2, rest % w2);
        x.data()[plane * h * w + (r / 2) * w + col / 2]
    })
}

pub fn upsample2x_backward<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = dy.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for plane in 0..n * c {
        for r in 0..h2 {
            for col in 0..w2 {
                dx.data_mut()[plane * h * w + (r / 2) * w + col / 2] += dy.data()[plane * h2 * w2 + r * w2 + col];
            }
        }
    }
    dx
}

pub(crate) fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    Tensor::new(a.shape(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// Mean squared error over every element, and its gradient.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> (T, Tensor<T>) {
    assert_eq!(pred.shape(), target.shape(), "prediction and target differ in shape");
    let n = T::of(pred.len() as f64);
    let loss = pred.data().iter().zip(target.data()).map(|(&p, &t)| (p - t) * (p - t)).sum::<T>() / n;
    let two = T::of(2.0);
    (loss, zip(pred, target, |p, t| two * (p - t) / n))
}
