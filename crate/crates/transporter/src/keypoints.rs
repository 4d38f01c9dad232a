//! Spatial soft-argmax, Gaussian heatmaps and feature transport.
//!
//! Keypoint coordinates are `(row, col)` in `[-1, 1]`: cell `i` of an
//! `n`-cell axis sits at `-1 + 2i / (n - 1)`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Normalized coordinate of every cell along an axis of `n` cells.
pub fn axis_coords<T: Real>(n: usize) -> Vec<T> {
    if n == 1 {
        return vec![T::zero()];
    }
    (0..n).map(|i| T::of(-1.0 + 2.0 * i as f64 / (n - 1) as f64)).collect()
}

/// Keypoints of a batch, `coords[b][k] = [row, col]`.
pub type Coords<T> = Vec<Vec<[T; 2]>>;

#[derive(Debug, Clone)]
pub struct SoftArgmaxCache<T> {
    probs: Tensor<T>,
    coords: Coords<T>,
}

/// Per-channel spatial softmax followed by the expected position.
pub fn soft_argmax<T: Real>(logits: &Tensor<T>) -> (Coords<T>, SoftArgmaxCache<T>) {
    let [n, k, h, w] = logits.shape();
    let (rows, cols) = (axis_coords::<T>(h), axis_coords::<T>(w));
    let mut probs = Tensor::zeros(logits.shape());
    let mut coords = vec![vec![[T::zero(); 2]; k]; n];
    let plane = h * w;
    for b in 0..n {
        for ch in 0..k {
            let src = logits.plane(b, ch);
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            let off = (b * k + ch) * plane;
            let dst = &mut probs.data_mut()[off..off + plane];
            let mut z = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - max).exp();
                z += *d;
            }
            let (mut er, mut ec) = (T::zero(), T::zero());
            for (i, d) in dst.iter_mut().enumerate() {
                *d = *d / z;
                er += *d * rows[i / w];
                ec += *d * cols[i % w];
            }
            coords[b][ch] = [er, ec];
        }
    }
    let cache = SoftArgmaxCache {
        probs,
        coords: coords.clone(),
    };
    (coords, cache)
}

pub fn soft_argmax_backward<T: Real>(cache: &SoftArgmaxCache<T>, dcoords: &Coords<T>) -> Tensor<T> {
    let [n, k, h, w] = cache.probs.shape();
    let (rows, cols) = (axis_coords::<T>(h), axis_coords::<T>(w));
    let plane = h * w;
    let mut dl = Tensor::zeros(cache.probs.shape());
    for b in 0..n {
        for ch in 0..k {
            let [mr, mc] = cache.coords[b][ch];
            let [gr, gc] = dcoords[b][ch];
            let off = (b * k + ch) * plane;
            let p = cache.probs.plane(b, ch);
            for (i, d) in dl.data_mut()[off..off + plane].iter_mut().enumerate() {
                *d = p[i] * (gr * (rows[i / w] - mr) + gc * (cols[i % w] - mc));
            }
        }
    }
    dl
}

/// Isotropic Gaussians with peak 1 at each keypoint, `sigma` in normalized units.
pub fn render_gaussians<T: Real>(coords: &Coords<T>, h: usize, w: usize, sigma: f64) -> Tensor<T> {
    let n = coords.len();
    let k = coords.first().map_or(0, Vec::len);
    let (rows, cols) = (axis_coords::<T>(h), axis_coords::<T>(w));
    let inv = T::of(1.0 / (2.0 * sigma * sigma));
    Tensor::from_fn([n, k, h, w], |i| {
        let (r, c) = ((i / w) % h, i % w);
        let (b, ch) = (i / (k * h * w), (i / (h * w)) % k);
        let [mr, mc] = coords[b][ch];
        let (dr, dc) = (rows[r] - mr, cols[c] - mc);
        (-(dr * dr + dc * dc) * inv).exp()
    })
}

pub fn render_gaussians_backward<T: Real>(coords: &Coords<T>, maps: &Tensor<T>, dmaps: &Tensor<T>, sigma: f64) -> Coords<T> {
    let [n, k, h, w] = maps.shape();
    let (rows, cols) = (axis_coords::<T>(h), axis_coords::<T>(w));
    let inv_var = T::of(1.0 / (sigma * sigma));
    let mut out = vec![vec![[T::zero(); 2]; k]; n];
    for b in 0..n {
        for ch in 0..k {
            let [mr, mc] = coords[b][ch];
            let (mut gr, mut gc) = (T::zero(), T::zero());
            for (i, (&m, &g)) in maps.plane(b, ch).iter().zip(dmaps.plane(b, ch)).enumerate() {
                let t = g * m * inv_var;
                gr += t * (rows[i / w] - mr);
                gc += t * (cols[i % w] - mc);
            }
            out[b][ch] = [gr, gc];
        }
    }
    out
}

/// `1 - prod_k (1 - H_k)`, clamped to `[0, 1]`; one channel per batch item.
pub fn combine_heatmaps<T: Real>(maps: &Tensor<T>) -> Tensor<T> {
    let [n, k, h, w] = maps.shape();
    let plane = h * w;
    Tensor::from_fn([n, 1, h, w], |i| {
        let (b, p) = (i / plane, i % plane);
        let keep = (0..k).fold(T::one(), |acc, ch| acc * (T::one() - maps.plane(b, ch)[p]));
        (T::one() - keep).max(T::zero()).min(T::one())
    })
}

pub fn combine_heatmaps_backward<T: Real>(maps: &Tensor<T>, dcombined: &Tensor<T>) -> Tensor<T> {
    let [_, k, h, w] = maps.shape();
    let plane = h * w;
    Tensor::from_fn(maps.shape(), |i| {
        let (b, ch, p) = (i / (k * plane), (i / plane) % k, i % plane);
        let others = (0..k)
            .filter(|&j| j != ch)
            .fold(T::one(), |acc, j| acc * (T::one() - maps.plane(b, j)[p]));
        dcombined.plane(b, 0)[p] * others
    })
}

fn check_transport_shapes<T: Real>(psi_s: &Tensor<T>, psi_t: &Tensor<T>, h_s: &Tensor<T>, h_t: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = psi_s.shape();
    if psi_t.shape() != psi_s.shape() {
        return Err(Error::arg(format!(
            "source features {:?} and target features {:?} differ",
            psi_s.shape(),
            psi_t.shape()
        )));
    }
    for hm in [h_s, h_t] {
        if hm.shape() != [n, 1, h, w] {
            return Err(Error::arg(format!(
                "heatmap {:?} does not match features {:?}",
                hm.shape(),
                psi_s.shape()
            )));
        }
    }
    Ok(())
}

/// `(1 - H_s)(1 - H_t) psi_s + H_t psi_t`, heatmaps broadcast over channels.
pub fn transport<T: Real>(psi_s: &Tensor<T>, psi_t: &Tensor<T>, h_s: &Tensor<T>, h_t: &Tensor<T>) -> Result<Tensor<T>> {
    check_transport_shapes(psi_s, psi_t, h_s, h_t)?;
    let [_, c, h, w] = psi_s.shape();
    let plane = h * w;
    Ok(Tensor::from_fn(psi_s.shape(), |i| {
        let (b, p) = (i / (c * plane), i % plane);
        let (hs, ht) = (h_s.plane(b, 0)[p], h_t.plane(b, 0)[p]);
        (T::one() - hs) * (T::one() - ht) * psi_s.data()[i] + ht * psi_t.data()[i]
    }))
}

#[derive(Debug, Clone)]
pub struct TransportGrads<T> {
    pub psi_s: Tensor<T>,
    pub psi_t: Tensor<T>,
    pub h_s: Tensor<T>,
    pub h_t: Tensor<T>,
}

pub fn transport_backward<T: Real>(
    psi_s: &Tensor<T>,
    psi_t: &Tensor<T>,
    h_s: &Tensor<T>,
    h_t: &Tensor<T>,
    dout: &Tensor<T>,
) -> TransportGrads<T> {
    let [n, c, h, w] = psi_s.shape();
    let plane = h * w;
    let mut g = TransportGrads {
        psi_s: Tensor::zeros(psi_s.shape()),
        psi_t: Tensor::zeros(psi_t.shape()),
        h_s: Tensor::zeros(h_s.shape()),
        h_t: Tensor::zeros(h_t.shape()),
    };
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for p in 0..plane {
                let i = off + p;
                let (hs, ht) = (h_s.plane(b, 0)[p], h_t.plane(b, 0)[p]);
                let (d, s, t) = (dout.data()[i], psi_s.data()[i], psi_t.data()[i]);
                g.psi_s.data_mut()[i] = d * (T::one() - hs) * (T::one() - ht);
                g.psi_t.data_mut()[i] = d * ht;
                g.h_s.data_mut()[b * plane + p] -= d * (T::one() - ht) * s;
                g.h_t.data_mut()[b * plane + p] += d * (t - (T::one() - hs) * s);
            }
        }
    }
    g
}
