//! Scalar objectives with analytic gradients, Adam, and a central-difference
//! gradient estimator.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::image::{GrayImage, Image, RgbImage};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;
pub const DICE_EPS: f64 = 1e-6;

/// Weights of the SSIM, Dice and rigidity terms; the RGB term has weight 1.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub ssim: f64,
    pub dice: f64,
    pub rigidity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.2,
            dice: 1.0,
            rigidity: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("ssim", self.ssim), ("dice", self.dice), ("rigidity", self.rigidity)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Domain(format!("loss weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct LossParts {
    pub rgb: f64,
    pub ssim: f64,
    pub dice: f64,
    pub rigidity: f64,
}

pub fn total_loss(parts: &LossParts, w: &LossWeights) -> f64 {
    parts.rgb + w.ssim * parts.ssim + w.dice * parts.dice + w.rigidity * parts.rigidity
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_rgb(img: &RgbImage, gt: &RgbImage) -> Result<(f64, RgbImage)> {
    img.check_shape(gt)?;
    let n = (img.len() * 3) as f64;
    let mut loss = 0.0;
    let mut grad = Image::filled(img.width, img.height, [0.0; 3]);
    for ((a, b), g) in img.data.iter().zip(&gt.data).zip(grad.data.iter_mut()) {
        for k in 0..3 {
            let d = a[k] - b[k];
            loss += d.abs();
            g[k] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((loss / n, grad))
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - c;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable Gaussian filter over every window that fits entirely in the
/// image; output is `(w - 10) x (h - 10)`.
fn blur_valid(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                s += t * src[y * w + x + k];
            }
            rows[y * ow + x] = s;
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (k, t) in taps.iter().enumerate() {
                s += t * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: scatters window values back onto the full
/// image.
fn blur_adjoint(src: &[f64], w: usize, h: usize, taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                rows[(y + k) * ow + x] += t * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for (k, t) in taps.iter().enumerate() {
                out[y * w + x + k] += t * v;
            }
        }
    }
    out
}

/// `1 - mean SSIM`, averaged over channels, with an 11x11 Gaussian window
/// (sigma 1.5) evaluated only where the window fits inside the image.
pub fn ssim_loss(img: &RgbImage, gt: &RgbImage) -> Result<(f64, RgbImage)> {
    img.check_shape(gt)?;
    let (w, h) = (img.width, img.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall {
            width: w,
            height: h,
            window: SSIM_WINDOW,
        });
    }
    let taps = gaussian_taps();
    let n_out = ((w + 1 - SSIM_WINDOW) * (h + 1 - SSIM_WINDOW)) as f64;
    let scale = -1.0 / (3.0 * n_out);
    let mut grad = Image::filled(w, h, [0.0; 3]);
    let mut ssim_sum = 0.0;
    for ch in 0..3 {
        let x: Vec<f64> = img.data.iter().map(|p| p[ch]).collect();
        let y: Vec<f64> = gt.data.iter().map(|p| p[ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mx = blur_valid(&x, w, h, &taps);
        let my = blur_valid(&y, w, h, &taps);
        let exx = blur_valid(&xx, w, h, &taps);
        let eyy = blur_valid(&yy, w, h, &taps);
        let exy = blur_valid(&xy, w, h, &taps);
        let m = mx.len();
        let (mut da, mut db, mut dc) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            ssim_sum += s;
            let ds_dux = 2.0 * uy * a2 / (b1 * b2) - s * 2.0 * ux / b1;
            let ds_dvx = -s / b2;
            let ds_dcxy = 2.0 * a1 / (b1 * b2);
            da[i] = scale * (ds_dux - 2.0 * ux * ds_dvx - uy * ds_dcxy);
            db[i] = scale * 2.0 * ds_dvx;
            dc[i] = scale * ds_dcxy;
        }
        let ga = blur_adjoint(&da, w, h, &taps);
        let gb = blur_adjoint(&db, w, h, &taps);
        let gc = blur_adjoint(&dc, w, h, &taps);
        for p in 0..w * h {
            grad.data[p][ch] = ga[p] + gb[p] * x[p] + gc[p] * y[p];
        }
    }
    Ok((1.0 - ssim_sum / (3.0 * n_out), grad))
}

/// Soft Dice loss `1 - (2 sum(p g) + eps) / (sum p + sum g + eps)` and its
/// gradient with respect to `pred`.
pub fn dice_loss(pred: &GrayImage, target: &GrayImage) -> Result<(f64, GrayImage)> {
    pred.check_shape(target)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (p, g) in pred.data.iter().zip(&target.data) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = sp + sg + DICE_EPS;
    let grad = target
        .data
        .iter()
        .map(|g| -(2.0 * g * den - num) / (den * den))
        .collect();
    Ok((1.0 - num / den, Image::from_vec(pred.width, pred.height, grad)?))
}

/// Fixed k-nearest-neighbour graph over initial positions with Gaussian
/// distance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RigidityGraph {
    pub n: usize,
    pub k: usize,
    /// `(i, j, weight)` for every primitive `i` and each of its neighbours.
    pub edges: Vec<(usize, usize, f64)>,
}

impl RigidityGraph {
    /// Builds the graph; `sigma = None` uses the median neighbour distance.
    /// A zero sigma weights coincident pairs 1 and all others 0.
    pub fn new(positions: &[Vector3<f64>], k: usize, sigma: Option<f64>) -> Result<Self> {
        let n = positions.len();
        if n < 2 {
            return Err(Error::TooFewPrimitives(n));
        }
        if k == 0 {
            return Err(Error::Domain("rigidity neighbourhood size must be >= 1".into()));
        }
        let k = k.min(n - 1);
        let mut pairs = Vec::with_capacity(n * k);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            cand.clear();
            cand.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| ((positions[i] - positions[j]).norm_squared(), j)),
            );
            cand.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut nearest = cand[..k].to_vec();
            nearest.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            pairs.extend(nearest.into_iter().map(|(d2, j)| (i, j, d2)));
        }
        let sigma = match sigma {
            Some(s) => s,
            None => {
                let mut d: Vec<f64> = pairs.iter().map(|p| p.2.sqrt()).collect();
                d.sort_by(f64::total_cmp);
                let m = d.len();
                if m % 2 == 1 {
                    d[m / 2]
                } else {
                    0.5 * (d[m / 2 - 1] + d[m / 2])
                }
            }
        };
        let s2 = sigma * sigma;
        let edges = pairs
            .into_iter()
            .map(|(i, j, d2)| {
                let w = if s2 > 0.0 {
                    (-d2 / s2).exp()
                } else if d2 == 0.0 {
                    1.0
                } else {
                    0.0
                };
                (i, j, w)
            })
            .collect();
        Ok(Self { n, k, edges })
    }

    /// `(1 / (n k)) sum w_ij |c_i - c_j|^2` and its gradient.
    pub fn loss(&self, coeffs: &[Vec<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
        if coeffs.len() != self.n {
            return Err(Error::shape(format!("{} coefficient vectors", self.n), coeffs.len()));
        }
        let b = coeffs.first().map_or(0, Vec::len);
        let norm = 1.0 / (self.n * self.k) as f64;
        let mut loss = 0.0;
        let mut grad = vec![vec![0.0; b]; self.n];
        for &(i, j, w) in &self.edges {
            if w == 0.0 {
                continue;
            }
            for c in 0..b {
                let d = coeffs[i][c] - coeffs[j][c];
                loss += norm * w * d * d;
                grad[i][c] += 2.0 * norm * w * d;
                grad[j][c] -= 2.0 * norm * w * d;
            }
        }
        Ok((loss, grad))
    }
}

/// One-shot rigidity loss with the median-distance weighting.
pub fn rigidity_loss(
    positions: &[Vector3<f64>],
    coeffs: &[Vec<f64>],
    k: usize,
) -> Result<(f64, Vec<Vec<f64>>)> {
    RigidityGraph::new(positions, k, None)?.loss(coeffs)
}

/// Adam moments for one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(
                format!("{} parameters", self.m.len()),
                format!("{} params / {} grads", params.len(), grads.len()),
            ));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` at `params`.
pub fn finite_diff<F: FnMut(&[f64]) -> f64>(mut f: F, params: &[f64], eps: f64) -> Vec<f64> {
    let mut x = params.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + eps;
            let fp = f(&x);
            x[i] = orig - eps;
            let fm = f(&x);
            x[i] = orig;
            (fp - fm) / (2.0 * eps)
        })
        .collect()
}
