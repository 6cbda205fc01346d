//! Image reconstruction with intensity-aware skip fusion.
//!
//! At each skip level the two encoder features blend into the decoder
//! stream through analytic (not learned) weights: a 3x3 box filter
//! estimates per-position strength — base intensity at the deep level,
//! `|1 - blurred|` detail at the shallow level — and each modality's
//! weight is its strength divided by the summed strength. Where the sum
//! vanishes both weights fall back to 0.5.

use rand_chacha::ChaCha20Rng;

use crate::autograd::{ParamBinding, Tape, ValueId, SAFE_DIV_EPS};
use crate::error::{Error, Result};
use crate::params::{he_normal, ParamStore};
use crate::tensor::{self, BorderMode, PaddingMode, Tensor};

/// Uniform 3x3 averaging kernel used by the strength extractor.
pub const BOX3: [f64; 9] = [1.0 / 9.0; 9];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipLevel {
    Deep,
    Shallow,
}

/// Strength extractor: deep level is the box-filtered map itself; shallow
/// level is `|1 - box-filtered map|` (written `sqrt((1 - k*phi)^2)`).
pub fn nabla_node(tape: &mut Tape, phi: ValueId, level: SkipLevel) -> Result<ValueId> {
    let blurred = tape.filter_fixed(phi, BOX3.to_vec(), 3, BorderMode::Reflect)?;
    match level {
        SkipLevel::Deep => Ok(blurred),
        SkipLevel::Shallow => {
            let neg = tape.scale(blurred, -1.0);
            let one_minus = tape.add_scalar(neg, 1.0);
            Ok(tape.abs(one_minus))
        }
    }
}

/// Forward-only strength extraction on a `[C, H, W]` map.
pub fn nabla(phi: &Tensor, level: SkipLevel) -> Result<Tensor> {
    let blurred = tensor::filter2d(phi, &BOX3, 3, BorderMode::Reflect)?;
    Ok(match level {
        SkipLevel::Deep => blurred,
        SkipLevel::Shallow => blurred.map(|v| (1.0 - v).abs()),
    })
}

/// Per-position, per-channel blend weights for the two modality features:
/// each modality's strength magnitude over the summed magnitudes, which
/// matches the ratio of raw strengths whenever both are nonnegative and
/// stays a convex combination when deep features go negative. Wherever
/// the summed magnitude is below `SAFE_DIV_EPS` both weights are 0.5, so
/// they always sum to 1.
pub fn skip_weights(phi_ir: &Tensor, phi_vi: &Tensor, level: SkipLevel) -> Result<(Tensor, Tensor)> {
    let n_ir = nabla(phi_ir, level)?.map(f64::abs);
    let n_vi = nabla(phi_vi, level)?.map(f64::abs);
    let denom = n_ir.zip_map(&n_vi, |a, b| a + b)?;
    let w_ir = n_ir.zip_map(&denom, |n, d| if d.abs() < SAFE_DIV_EPS { 0.5 } else { n / d })?;
    let w_vi = n_vi.zip_map(&denom, |n, d| if d.abs() < SAFE_DIV_EPS { 0.5 } else { n / d })?;
    Ok((w_ir, w_vi))
}

/// Intensity-aware skip fusion:
/// `phi_df = phi_c + w_ir * phi_ir + w_vi * phi_vi`.
pub fn skip_fuse_node(
    tape: &mut Tape,
    phi_c: ValueId,
    phi_ir: ValueId,
    phi_vi: ValueId,
    level: SkipLevel,
) -> Result<ValueId> {
    let shape_c = tape.value(phi_c).shape().to_vec();
    if shape_c != tape.value(phi_ir).shape() || shape_c != tape.value(phi_vi).shape() {
        return Err(Error::shape(format!(
            "skip fusion maps differ: {:?} / {:?} / {:?}",
            shape_c,
            tape.value(phi_ir).shape(),
            tape.value(phi_vi).shape()
        )));
    }
    let n_ir = nabla_node(tape, phi_ir, level)?;
    let n_vi = nabla_node(tape, phi_vi, level)?;
    let n_ir = tape.abs(n_ir);
    let n_vi = tape.abs(n_vi);
    let denom = tape.add(n_ir, n_vi)?;
    let w_ir = tape.safe_div(n_ir, denom)?;
    let w_vi = tape.safe_div(n_vi, denom)?;
    let a = tape.mul(w_ir, phi_ir)?;
    let b = tape.mul(w_vi, phi_vi)?;
    let blend = tape.add(a, b)?;
    tape.add(phi_c, blend)
}

/// Forward-only skip fusion.
pub fn skip_fuse(phi_c: &Tensor, phi_ir: &Tensor, phi_vi: &Tensor, level: SkipLevel) -> Result<Tensor> {
    let (w_ir, w_vi) = skip_weights(phi_ir, phi_vi, level)?;
    let a = w_ir.zip_map(phi_ir, |w, p| w * p)?;
    let b = w_vi.zip_map(phi_vi, |w, p| w * p)?;
    phi_c.zip_map(&a.zip_map(&b, |x, y| x + y)?, |c, s| c + s)
}

/// Decoder: three upsample+conv stages (64 -> 32 -> 16 -> 16 channels),
/// shallow skip fusion, then a final 3x3 conv squashed by a sigmoid.
#[derive(Debug, Clone)]
pub struct DecoderDesc {
    pub prefix: String,
}

const STAGE_IO: [(usize, usize); 3] = [(64, 32), (32, 16), (16, 16)];

impl DecoderDesc {
    pub fn new(prefix: impl Into<String>) -> Self {
        Self { prefix: prefix.into() }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) -> Result<()> {
        for (i, (cin, cout)) in STAGE_IO.iter().enumerate() {
            let w = he_normal(rng, &[*cout, *cin, 3, 3], cin * 9, 1.0);
            store.insert(format!("{}.up{}.w", self.prefix, i + 1), w, true)?;
            store.insert(format!("{}.up{}.b", self.prefix, i + 1), Tensor::zeros(&[*cout]), true)?;
        }
        // small output head keeps the initial image near mid-gray and the
        // sigmoid well away from saturation
        let w = he_normal(rng, &[1, 16, 3, 3], 16 * 9, 0.25);
        store.insert(format!("{}.out.w", self.prefix), w, true)?;
        store.insert(format!("{}.out.b", self.prefix), Tensor::zeros(&[1]), true)?;
        Ok(())
    }

    /// `fused_deep` plus the two skip bundles in, `[1, H, W]` image in
    /// (0, 1) out.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bind: &ParamBinding,
        fused_deep: ValueId,
        deep_ir: ValueId,
        deep_vi: ValueId,
        shallow_ir: ValueId,
        shallow_vi: ValueId,
    ) -> Result<ValueId> {
        let mut t = skip_fuse_node(tape, fused_deep, deep_ir, deep_vi, SkipLevel::Deep)?;
        for i in 1..=STAGE_IO.len() {
            let up = tape.upsample2(t)?;
            let w = bind.get(&format!("{}.up{i}.w", self.prefix))?;
            let b = bind.get(&format!("{}.up{i}.b", self.prefix))?;
            let c = tape.conv2d(up, w, b, 1, PaddingMode::Same)?;
            t = tape.relu(c);
        }
        t = skip_fuse_node(tape, t, shallow_ir, shallow_vi, SkipLevel::Shallow)?;
        let w = bind.get(&format!("{}.out.w", self.prefix))?;
        let b = bind.get(&format!("{}.out.b", self.prefix))?;
        let o = tape.conv2d(t, w, b, 1, PaddingMode::Same)?;
        Ok(tape.sigmoid(o))
    }
}
