//! Photometric reconstruction loss: a blend of mean absolute error and
//! structural dissimilarity.

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable same-size blur of one H×W plane with zero padding. The kernel
/// is symmetric, so this is also its own adjoint.
fn blur(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as isize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let xx = x as isize + i as isize - r;
                if xx >= 0 && (xx as usize) < w {
                    s += kv * plane[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (i, kv) in k.iter().enumerate() {
                let yy = y as isize + i as isize - r;
                if yy >= 0 && (yy as usize) < h {
                    s += kv * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

fn channel(img: &[f64], c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(3).copied().collect()
}

/// Mean SSIM over pixels and channels of two H×W×3 images, with the
/// gradient with respect to `x` when asked.
pub fn ssim(x: &[f64], y: &[f64], w: usize, h: usize, want_grad: bool) -> (f64, Option<Vec<f64>>) {
    let k = gaussian_kernel();
    let n = (w * h * 3) as f64;
    let per_channel: Vec<(f64, Option<Vec<f64>>)> = (0..3)
        .into_par_iter()
        .map(|c| {
            let xc = channel(x, c);
            let yc = channel(y, c);
            let xx: Vec<f64> = xc.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = yc.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = xc.iter().zip(&yc).map(|(a, b)| a * b).collect();
            let (mx, my) = (blur(&xc, w, h, &k), blur(&yc, w, h, &k));
            let (sxx, syy, sxy) = (blur(&xx, w, h, &k), blur(&yy, w, h, &k), blur(&xy, w, h, &k));
            let mut total = 0.0;
            let mut g_mu = vec![0.0; w * h];
            let mut g_xx = vec![0.0; w * h];
            let mut g_xy = vec![0.0; w * h];
            for p in 0..w * h {
                let (mx, my) = (mx[p], my[p]);
                let a1 = 2.0 * mx * my + C1;
                let a2 = 2.0 * (sxy[p] - mx * my) + C2;
                let b1 = mx * mx + my * my + C1;
                let b2 = (sxx[p] - mx * mx) + (syy[p] - my * my) + C2;
                let s = a1 * a2 / (b1 * b2);
                total += s;
                if want_grad {
                    g_mu[p] = s * (2.0 * my / a1 - 2.0 * my / a2 - 2.0 * mx / b1 + 2.0 * mx / b2) / n;
                    g_xx[p] = -s / b2 / n;
                    g_xy[p] = s * 2.0 / a2 / n;
                }
            }
            let grad = want_grad.then(|| {
                let (bm, bxx, bxy) = (blur(&g_mu, w, h, &k), blur(&g_xx, w, h, &k), blur(&g_xy, w, h, &k));
                (0..w * h).map(|p| bm[p] + 2.0 * xc[p] * bxx[p] + yc[p] * bxy[p]).collect::<Vec<f64>>()
            });
            (total, grad)
        })
        .collect();
    let value = per_channel.iter().map(|(t, _)| t).sum::<f64>() / n;
    let grad = want_grad.then(|| {
        let mut g = vec![0.0; w * h * 3];
        for (c, (_, gc)) in per_channel.iter().enumerate() {
            for (p, v) in gc.as_ref().unwrap().iter().enumerate() {
                g[p * 3 + c] = *v;
            }
        }
        g
    });
    (value, grad)
}

#[derive(Clone, Debug)]
pub struct ReconLoss {
    pub total: f64,
    pub l1: f64,
    pub ssim: f64,
    /// With respect to the rendered image.
    pub grad: Vec<f64>,
}

/// `(1 − λ)·L1 + λ·(1 − SSIM)` between a render and its target.
pub fn reconstruction_loss(render: &[f64], target: &[f64], w: usize, h: usize, lambda: f64) -> Result<ReconLoss> {
    if render.len() != w * h * 3 || target.len() != w * h * 3 {
        return Err(Error::ShapeMismatch(format!(
            "images of {} and {} values for {w}x{h}x3",
            render.len(),
            target.len()
        )));
    }
    let n = render.len() as f64;
    let mut l1 = 0.0;
    let mut grad: Vec<f64> = render
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            l1 += d.abs();
            (1.0 - lambda) * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 } / n
        })
        .collect();
    l1 /= n;
    let (s, sg) = ssim(render, target, w, h, lambda != 0.0);
    if let Some(sg) = sg {
        grad.iter_mut().zip(&sg).for_each(|(g, v)| *g -= lambda * v);
    }
    Ok(ReconLoss {
        total: (1.0 - lambda) * l1 + lambda * (1.0 - s),
        l1,
        ssim: s,
        grad,
    })
}

/// Peak signal-to-noise ratio in dB for images in [0, 1].
pub fn psnr(a: &[f64], b: &[f64]) -> f64 {
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64;
    -10.0 * mse.max(1e-20).log10()
}
