//! Image losses and quality metrics with analytic gradients.
//!
//! SSIM uses an 11x11 Gaussian window (sigma 1.5) evaluated at every fully
//! covered position ("valid" mode), constants `C1 = 0.01^2`, `C2 = 0.03^2`,
//! averaged over positions and channels.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::image::{Image, Mask};
use crate::math;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

static EMPTY_JAW_MASKS: AtomicU64 = AtomicU64::new(0);

/// How many jaw-loss evaluations met an empty jaw mask (and returned zero).
pub fn empty_jaw_mask_count() -> u64 {
    EMPTY_JAW_MASKS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// D-SSIM weight.
    pub lambda: f64,
    /// Jaw-region weight.
    pub beta: f64,
    /// Perceptual weight; used only when a plugin is supplied.
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.5, beta: 0.001, gamma: 0.2 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda, self.beta, self.gamma].iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config(alloc::format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Individual terms of a stage loss and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub jaw: f64,
    pub perceptual: f64,
}

/// A perceptual distance with its gradient w.r.t. the first image.
pub trait PerceptualLoss {
    fn loss_and_grad(&self, prediction: &Image, target: &Image) -> Result<(f64, Image)>;
}

fn check_pair(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<()> {
    a.check_same_shape(b, "loss operands")?;
    if let Some(m) = mask {
        m.check_resolution(a.width, a.height)?;
    }
    Ok(())
}

/// Mean absolute difference over all values, or over the channels of masked
/// pixels.
pub fn l1(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<f64> {
    Ok(l1_with_grad(a, b, mask)?.0)
}

/// L1 and its gradient w.r.t. `a`.
pub fn l1_with_grad(a: &Image, b: &Image, mask: Option<&Mask>) -> Result<(f64, Image)> {
    check_pair(a, b, mask)?;
    let ch = a.channels;
    let pixels = match mask {
        Some(m) if m.is_empty() => return Err(Error::EmptyRegion),
        Some(m) => m.count(),
        None => a.pixel_count(),
    };
    let n = (pixels * ch) as f64;
    let mut grad = Image::new(a.width, a.height, ch);
    let mut sum = 0.0;
    for p in 0..a.pixel_count() {
        if mask.is_some_and(|m| !m.data[p]) {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let d = a.data[i] - b.data[i];
            sum += d.abs();
            grad.data[i] = if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    Ok((sum / n, grad))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = math::exp(-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable filtering of a `w x h` plane.
fn filter_valid(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * rows[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to `w x h`.
fn filter_adjoint(map: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut cols = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                cols[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = cols[y * ow + x];
            for (i, ki) in k.iter().enumerate() {
                out[y * w + x + i] += ki * v;
            }
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.iter().skip(c).step_by(img.channels).copied().collect()
}

/// Mean SSIM and, if requested, its gradient w.r.t. `a`.
fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_pair(a, b, None)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: w, height: h, window: SSIM_WINDOW });
    }
    let k = gaussian_kernel();
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let count = (ow * oh * a.channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(w, h, a.channels));
    for c in 0..a.channels {
        let pa = plane(a, c);
        let pb = plane(b, c);
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, w, h, &k);
        let mu_b = filter_valid(&pb, w, h, &k);
        let e_aa = filter_valid(&aa, w, h, &k);
        let e_bb = filter_valid(&bb, w, h, &k);
        let e_ab = filter_valid(&ab, w, h, &k);
        let n = ow * oh;
        let (mut g_mu, mut g_aa, mut g_ab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let a1 = 2.0 * ma * mb + SSIM_C1;
            let a2 = 2.0 * cov + SSIM_C2;
            let b1 = ma * ma + mb * mb + SSIM_C1;
            let b2 = var_a + var_b + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let ds_dma = 2.0 * mb * a2 / (b1 * b2) - s * 2.0 * ma / b1;
                let ds_dvar = -s / b2;
                let ds_dcov = 2.0 * a1 / (b1 * b2);
                // var_a = E[a^2] - mu_a^2 and cov = E[ab] - mu_a mu_b
                g_mu[i] = ds_dma - 2.0 * ma * ds_dvar - mb * ds_dcov;
                g_aa[i] = ds_dvar;
                g_ab[i] = ds_dcov;
            }
        }
        if let Some(g) = grad.as_mut() {
            let t_mu = filter_adjoint(&g_mu, w, h, &k);
            let t_aa = filter_adjoint(&g_aa, w, h, &k);
            let t_ab = filter_adjoint(&g_ab, w, h, &k);
            for p in 0..w * h {
                g.data[p * a.channels + c] = (t_mu[p] + 2.0 * pa[p] * t_aa[p] + pb[p] * t_ab[p]) / count;
            }
        }
    }
    Ok((total / count, grad))
}

pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// `(1 - SSIM) / 2`.
pub fn dssim(a: &Image, b: &Image) -> Result<f64> {
    Ok((1.0 - ssim(a, b)?) / 2.0)
}

/// D-SSIM and its gradient w.r.t. `a`.
pub fn dssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (s, g) = ssim_impl(a, b, true)?;
    let mut g = g.expect("gradient requested");
    g.data.iter_mut().for_each(|v| *v *= -0.5);
    Ok(((1.0 - s) / 2.0, g))
}

/// L1 inside the jaw mask. An empty mask contributes zero and bumps
/// [`empty_jaw_mask_count`].
pub fn jaw_loss_with_grad(render: &Image, target: &Image, jaw: &Mask) -> Result<(f64, Image)> {
    check_pair(render, target, Some(jaw))?;
    if jaw.is_empty() {
        EMPTY_JAW_MASKS.fetch_add(1, Ordering::Relaxed);
        return Ok((0.0, Image::new(render.width, render.height, render.channels)));
    }
    l1_with_grad(render, target, Some(jaw))
}

pub fn jaw_loss(render: &Image, target: &Image, jaw: &Mask) -> Result<f64> {
    Ok(jaw_loss_with_grad(render, target, jaw)?.0)
}

fn add_scaled(acc: &mut Image, g: &Image, k: f64) {
    for (a, b) in acc.data.iter_mut().zip(&g.data) {
        *a += k * b;
    }
}

/// `L1 + lambda * D-SSIM`, used for the static stage.
pub fn static_loss(render: &Image, target: &Image, weights: &LossWeights) -> Result<(LossBreakdown, Image)> {
    let (l1v, mut grad) = l1_with_grad(render, target, None)?;
    let (ds, gd) = dssim_with_grad(render, target)?;
    add_scaled(&mut grad, &gd, weights.lambda);
    let total = l1v + weights.lambda * ds;
    Ok((LossBreakdown { total, l1: l1v, dssim: ds, ..Default::default() }, grad))
}

/// `L1 + lambda * D-SSIM + beta * L_jaw` against the masked target.
pub fn motion_loss(
    render: &Image,
    masked_target: &Image,
    jaw: &Mask,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Image)> {
    let (mut parts, mut grad) = static_loss(render, masked_target, weights)?;
    let (jv, gj) = jaw_loss_with_grad(render, masked_target, jaw)?;
    add_scaled(&mut grad, &gj, weights.beta);
    parts.jaw = jv;
    parts.total += weights.beta * jv;
    Ok((parts, grad))
}

/// `L1 + lambda * D-SSIM (+ gamma * perceptual)` on the fused image.
pub fn finetune_loss(
    fused: &Image,
    target: &Image,
    weights: &LossWeights,
    perceptual: Option<&dyn PerceptualLoss>,
) -> Result<(LossBreakdown, Image)> {
    let (mut parts, mut grad) = static_loss(fused, target, weights)?;
    if let Some(p) = perceptual {
        let (pv, gp) = p.loss_and_grad(fused, target)?;
        add_scaled(&mut grad, &gp, weights.gamma);
        parts.perceptual = pv;
        parts.total += weights.gamma * pv;
    }
    Ok((parts, grad))
}

/// `10 log10(1 / MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair(a, b, None)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * math::log10(1.0 / mse))
}
