//! Training objectives.
//!
//! Stage 1 reconstructs each modality: mean squared error plus a
//! (1 - SSIM) structural term scaled by `w_s = 1e4`. Stage 2 drives the
//! fused image toward two analytic targets: an intensity target that
//! composites the sources through binary local-brightness masks, and a
//! detail target that takes the pixelwise max of the clipped 3x3-blurred
//! sources, weighted by `w_g = 10`. Pixel losses are normalized to means
//! so the weights keep their meaning across image sizes.

use crate::autograd::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::tensor::{self, BorderMode, Tensor};

pub const DEFAULT_W_S: f64 = 1e4;
pub const DEFAULT_W_G: f64 = 10.0;

/// Trade-off weights of the two training stages.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub w_s: f64,
    pub w_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { w_s: DEFAULT_W_S, w_g: DEFAULT_W_G }
    }
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01; // (K1 * L)^2 with dynamic range L = 1
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Normalized 2D Gaussian window.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Vec<f64> {
    let half = (k / 2) as f64;
    let mut kern = vec![0.0; k * k];
    let mut sum = 0.0;
    for y in 0..k {
        for x in 0..k {
            let dy = y as f64 - half;
            let dx = x as f64 - half;
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            kern[y * k + x] = v;
            sum += v;
        }
    }
    for v in kern.iter_mut() {
        *v /= sum;
    }
    kern
}

fn check_same_image_shape(a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let (ha, wa) = a.dims2()?;
    let (hb, wb) = b.dims2()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(format!(
            "image shapes differ: {ha}x{wa} vs {hb}x{wb}"
        )));
    }
    Ok((ha, wa))
}

/// Single-scale SSIM over `[1, H, W]` nodes: 11x11 Gaussian window,
/// sigma 1.5, C1 = 1e-4, C2 = 9e-4 (dynamic range 1), reflect borders,
/// averaged over all positions.
pub fn ssim_node(tape: &mut Tape, a: ValueId, b: ValueId) -> Result<ValueId> {
    let window = gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA);
    let blur = |t: &mut Tape, x: ValueId| -> Result<ValueId> {
        t.filter_fixed(x, window.clone(), SSIM_WINDOW, BorderMode::Reflect)
    };
    let mu_a = blur(tape, a)?;
    let mu_b = blur(tape, b)?;
    let aa = tape.mul(a, a)?;
    let bb = tape.mul(b, b)?;
    let ab = tape.mul(a, b)?;
    let mu_aa = blur(tape, aa)?;
    let mu_bb = blur(tape, bb)?;
    let mu_ab = blur(tape, ab)?;
    let mu_a2 = tape.mul(mu_a, mu_a)?;
    let mu_b2 = tape.mul(mu_b, mu_b)?;
    let mu_ab2 = tape.mul(mu_a, mu_b)?;
    let sigma_a = tape.sub(mu_aa, mu_a2)?;
    let sigma_b = tape.sub(mu_bb, mu_b2)?;
    let sigma_ab = tape.sub(mu_ab, mu_ab2)?;

    let n1 = tape.scale(mu_ab2, 2.0);
    let n1 = tape.add_scalar(n1, SSIM_C1);
    let n2 = tape.scale(sigma_ab, 2.0);
    let n2 = tape.add_scalar(n2, SSIM_C2);
    let num = tape.mul(n1, n2)?;

    let d1 = tape.add(mu_a2, mu_b2)?;
    let d1 = tape.add_scalar(d1, SSIM_C1);
    let d2 = tape.add(sigma_a, sigma_b)?;
    let d2 = tape.add_scalar(d2, SSIM_C2);
    let den = tape.mul(d1, d2)?;

    let map = tape.div(num, den)?;
    Ok(tape.mean(map))
}

/// Forward-only SSIM of two `[H, W]` images in [0, 1].
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_image_shape(a, b)?;
    let mut tape = Tape::new();
    let ai = tape.constant(a.as_single_channel()?);
    let bi = tape.constant(b.as_single_channel()?);
    let s = ssim_node(&mut tape, ai, bi)?;
    tape.scalar_value(s)
}

/// Node ids of the stage-1 loss and its components.
pub struct AutoLossNodes {
    pub total: ValueId,
    pub mse: ValueId,
    pub ssim: ValueId,
}

/// Reconstruction loss `mse(I, I_r) + w_s * (1 - ssim(I, I_r))`; zero
/// exactly when the reconstruction matches the input.
pub fn loss_auto_node(
    tape: &mut Tape,
    original: ValueId,
    recon: ValueId,
    w_s: f64,
) -> Result<AutoLossNodes> {
    let mse = tape.mse(original, recon)?;
    let ssim = ssim_node(tape, original, recon)?;
    let neg = tape.scale(ssim, -1.0);
    let dissim = tape.add_scalar(neg, 1.0);
    let weighted = tape.scale(dissim, w_s);
    let total = tape.add(mse, weighted)?;
    Ok(AutoLossNodes { total, mse, ssim })
}

/// Forward-only stage-1 loss on `[H, W]` images.
pub fn loss_auto(original: &Tensor, recon: &Tensor, w: &LossWeights) -> Result<f64> {
    check_same_image_shape(original, recon)?;
    let mut tape = Tape::new();
    let o = tape.constant(original.as_single_channel()?);
    let r = tape.constant(recon.as_single_channel()?);
    let nodes = loss_auto_node(&mut tape, o, r, w.w_s)?;
    tape.scalar_value(nodes.total)
}

pub const MASK_WINDOW: usize = 11;
const DETAIL_WINDOW: usize = 3;
const LOC_EPS: f64 = 1e-12;

/// Binary intensity masks from 11x11 local means: each pixel goes to the
/// brighter-on-average source, ties to infrared, and the two masks
/// partition the image (`M_ir + M_vi == 1` everywhere). On images
/// smaller than the window, the window shrinks to the largest odd size
/// that fits.
pub fn intensity_masks(i_ir: &Tensor, i_vi: &Tensor) -> Result<(Tensor, Tensor)> {
    let (h, w) = check_same_image_shape(i_ir, i_vi)?;
    let mut k = MASK_WINDOW.min(h).min(w);
    if k % 2 == 0 {
        k -= 1;
    }
    let avg_ir = tensor::mean_filter(i_ir, k)?;
    let avg_vi = tensor::mean_filter(i_vi, k)?;
    let mut m_ir = vec![0.0; h * w];
    let mut m_vi = vec![0.0; h * w];
    for i in 0..h * w {
        let (a, b) = (avg_ir.data()[i], avg_vi.data()[i]);
        let sum = a + b;
        let (loc_ir, loc_vi) = if sum.abs() < LOC_EPS {
            (0.5, 0.5)
        } else {
            (a / sum, b / sum)
        };
        if loc_ir >= loc_vi {
            m_ir[i] = 1.0;
        } else {
            m_vi[i] = 1.0;
        }
    }
    Ok((
        Tensor::new_unchecked(vec![h, w], m_ir),
        Tensor::new_unchecked(vec![h, w], m_vi),
    ))
}

/// Mask-composited intensity target `M_ir * I_ir + M_vi * I_vi`.
pub fn intensity_target(i_ir: &Tensor, i_vi: &Tensor) -> Result<Tensor> {
    let (m_ir, m_vi) = intensity_masks(i_ir, i_vi)?;
    let a = m_ir.zip_map(i_ir, |m, v| m * v)?;
    let b = m_vi.zip_map(i_vi, |m, v| m * v)?;
    a.zip_map(&b, |x, y| x + y)
}

/// Detail target: pixelwise `max(clip(blur3(I_ir)), clip(blur3(I_vi)))`
/// with `clip(x) = max(x, 0)`.
pub fn gradient_target(i_ir: &Tensor, i_vi: &Tensor) -> Result<Tensor> {
    check_same_image_shape(i_ir, i_vi)?;
    let b_ir = tensor::mean_filter(i_ir, DETAIL_WINDOW)?.map(|v| v.max(0.0));
    let b_vi = tensor::mean_filter(i_vi, DETAIL_WINDOW)?.map(|v| v.max(0.0));
    b_ir.zip_map(&b_vi, f64::max)
}

fn mse_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "mse over {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Intensity loss: mse between the fused image and the mask composite.
pub fn loss_int(fused: &Tensor, i_ir: &Tensor, i_vi: &Tensor) -> Result<f64> {
    check_same_image_shape(fused, i_ir)?;
    mse_value(fused, &intensity_target(i_ir, i_vi)?)
}

/// Detail loss: mse between the fused image and the clipped-max target.
pub fn loss_gra(fused: &Tensor, i_ir: &Tensor, i_vi: &Tensor) -> Result<f64> {
    check_same_image_shape(fused, i_ir)?;
    mse_value(fused, &gradient_target(i_ir, i_vi)?)
}

/// Stage-2 loss `loss_int + w_g * loss_gra`.
pub fn loss_cam(fused: &Tensor, i_ir: &Tensor, i_vi: &Tensor, w: &LossWeights) -> Result<f64> {
    Ok(loss_int(fused, i_ir, i_vi)? + w.w_g * loss_gra(fused, i_ir, i_vi)?)
}

/// Node ids of the stage-2 loss and its components.
pub struct CamLossNodes {
    pub total: ValueId,
    pub int: ValueId,
    pub gra: ValueId,
}

/// Tape version of the stage-2 loss; the targets are data-dependent
/// constants, so callers precompute them once per pair.
pub fn loss_cam_node(
    tape: &mut Tape,
    fused: ValueId,
    target_int: &Tensor,
    target_gra: &Tensor,
    w_g: f64,
) -> Result<CamLossNodes> {
    let t_int = tape.constant(target_int.as_single_channel()?);
    let t_gra = tape.constant(target_gra.as_single_channel()?);
    let int = tape.mse(fused, t_int)?;
    let gra = tape.mse(fused, t_gra)?;
    let weighted = tape.scale(gra, w_g);
    let total = tape.add(int, weighted)?;
    Ok(CamLossNodes { total, int, gra })
}
