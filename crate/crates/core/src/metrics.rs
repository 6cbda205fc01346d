//! Objective fusion-quality metrics: entropy (EN), standard deviation
//! (SD), summed mutual information with both sources (MI), feature-based
//! mutual information over pixel or per-block DCT features (FMI), and the
//! sum of correlations of differences (SCD).
//!
//! Histogram metrics quantize to 8 bits (256 bins); SCD works on the raw
//! intensities. All metrics are pure functions of their inputs.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const BINS: usize = 256;

fn quantize(img: &Tensor) -> Vec<u8> {
    img.data()
        .iter()
        .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Shannon entropy (bits) of the 8-bit histogram.
pub fn entropy(img: &Tensor) -> f64 {
    let q = quantize(img);
    let mut hist = [0usize; BINS];
    for v in q {
        hist[v as usize] += 1;
    }
    let n = img.numel() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// Population standard deviation of the 8-bit intensities.
pub fn std_dev(img: &Tensor) -> f64 {
    let q = quantize(img);
    let n = q.len() as f64;
    let mean = q.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = q.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    var.sqrt()
}

/// Mutual information (bits) between two quantized images from their
/// 256x256 joint histogram.
fn mi_pair(a: &[u8], b: &[u8]) -> f64 {
    let n = a.len() as f64;
    let mut joint = vec![0u32; BINS * BINS];
    let mut ha = [0u32; BINS];
    let mut hb = [0u32; BINS];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * BINS + y as usize] += 1;
        ha[x as usize] += 1;
        hb[y as usize] += 1;
    }
    let mut mi = 0.0;
    for x in 0..BINS {
        if ha[x] == 0 {
            continue;
        }
        for y in 0..BINS {
            let c = joint[x * BINS + y];
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / n;
            let px = ha[x] as f64 / n;
            let py = hb[y] as f64 / n;
            mi += pxy * (pxy / (px * py)).log2();
        }
    }
    mi
}

fn entropy_of(codes: &[u8]) -> f64 {
    let mut hist = [0usize; BINS];
    for &v in codes {
        hist[v as usize] += 1;
    }
    let n = codes.len() as f64;
    hist.iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

fn joint_entropy(a: &[u8], b: &[u8]) -> f64 {
    let mut joint = vec![0u32; BINS * BINS];
    for (&x, &y) in a.iter().zip(b) {
        joint[x as usize * BINS + y as usize] += 1;
    }
    let n = a.len() as f64;
    joint
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

/// `MI(F, A) + MI(F, B)` in bits.
pub fn mutual_info(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(fused, a)?;
    check_same_shape(fused, b)?;
    let f = quantize(fused);
    Ok(mi_pair(&f, &quantize(a)) + mi_pair(&f, &quantize(b)))
}

/// Feature domain for [`fmi`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FmiFeature {
    /// Raw pixel intensities.
    Pixel,
    /// Per-8x8-block orthonormal DCT coefficient magnitudes.
    Dct,
}

const DCT_BLOCK: usize = 8;

/// Orthonormal 2D DCT-II magnitudes computed blockwise.
fn dct_feature(img: &Tensor) -> Result<Tensor> {
    let (h, w) = img.dims2()?;
    if h % DCT_BLOCK != 0 || w % DCT_BLOCK != 0 {
        return Err(Error::shape(format!(
            "dct feature needs dims divisible by {DCT_BLOCK}, got {h}x{w}"
        )));
    }
    let n = DCT_BLOCK;
    // basis[u][y] = alpha(u) cos(pi (2y + 1) u / (2n))
    let mut basis = [[0.0f64; DCT_BLOCK]; DCT_BLOCK];
    for u in 0..n {
        let alpha = if u == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for y in 0..n {
            basis[u][y] =
                alpha * (std::f64::consts::PI * (2 * y + 1) as f64 * u as f64 / (2 * n) as f64).cos();
        }
    }
    let src = img.data();
    let mut out = vec![0.0; h * w];
    for by in (0..h).step_by(n) {
        for bx in (0..w).step_by(n) {
            for u in 0..n {
                for v in 0..n {
                    let mut acc = 0.0;
                    for y in 0..n {
                        for x in 0..n {
                            acc += basis[u][y] * basis[v][x] * src[(by + y) * w + bx + x];
                        }
                    }
                    out[(by + u) * w + bx + v] = acc.abs();
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![h, w], out))
}

/// Quantize a feature image to 256 levels after min-max normalization
/// (constant features map to all zeros).
fn feature_codes(feat: &Tensor) -> Vec<u8> {
    let lo = feat.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = feat.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo < 1e-15 {
        return vec![0; feat.numel()];
    }
    feat.data()
        .iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect()
}

/// Normalized mutual information `I(X; Y) / H(X, Y)`; zero when the joint
/// entropy vanishes.
fn nmi(a: &[u8], b: &[u8]) -> f64 {
    let hj = joint_entropy(a, b);
    if hj <= 0.0 {
        return 0.0;
    }
    let i = entropy_of(a) + entropy_of(b) - hj;
    (i / hj).clamp(0.0, 1.0)
}

/// Feature mutual information: extract feature images, then average the
/// normalized mutual information between the fused features and each
/// source's features. Identical inputs score 1; independent inputs
/// score near 0.
pub fn fmi(fused: &Tensor, a: &Tensor, b: &Tensor, feature: FmiFeature) -> Result<f64> {
    check_same_shape(fused, a)?;
    check_same_shape(fused, b)?;
    let extract = |img: &Tensor| -> Result<Vec<u8>> {
        Ok(match feature {
            FmiFeature::Pixel => feature_codes(img),
            FmiFeature::Dct => feature_codes(&dct_feature(img)?),
        })
    };
    let f = extract(fused)?;
    let fa = nmi(&f, &extract(a)?);
    let fb = nmi(&f, &extract(b)?);
    Ok((fa + fb) / 2.0)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    // zero-variance operands contribute nothing; the threshold absorbs
    // rounding noise from numerically constant inputs
    if va <= 1e-24 || vb <= 1e-24 {
        return 0.0;
    }
    cov / (va.sqrt() * vb.sqrt())
}

/// Sum of correlations of differences:
/// `corr(F - B, A) + corr(F - A, B)`, each term Pearson correlation.
pub fn scd(fused: &Tensor, a: &Tensor, b: &Tensor) -> Result<f64> {
    check_same_shape(fused, a)?;
    check_same_shape(fused, b)?;
    let fd = fused.data();
    let ad = a.data();
    let bd = b.data();
    let f_minus_b: Vec<f64> = fd.iter().zip(bd).map(|(f, b)| f - b).collect();
    let f_minus_a: Vec<f64> = fd.iter().zip(ad).map(|(f, a)| f - a).collect();
    Ok(pearson(&f_minus_b, ad) + pearson(&f_minus_a, bd))
}

/// Per-pair metric values.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub en: f64,
    pub sd: f64,
    pub mi: f64,
    pub fmi_dct: f64,
    pub fmi_pixel: f64,
    pub scd: f64,
}

/// Evaluate all six metrics for one fused image and its sources.
pub fn evaluate_pair(name: &str, fused: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<MetricRow> {
    Ok(MetricRow {
        name: name.to_string(),
        en: entropy(fused),
        sd: std_dev(fused),
        mi: mutual_info(fused, ir, vi)?,
        fmi_dct: fmi(fused, ir, vi, FmiFeature::Dct)?,
        fmi_pixel: fmi(fused, ir, vi, FmiFeature::Pixel)?,
        scd: scd(fused, ir, vi)?,
    })
}

/// Per-pair rows plus the corpus mean.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    pub fn mean(&self) -> MetricRow {
        let n = self.rows.len().max(1) as f64;
        let mut mean = MetricRow {
            name: "mean".into(),
            en: 0.0,
            sd: 0.0,
            mi: 0.0,
            fmi_dct: 0.0,
            fmi_pixel: 0.0,
            scd: 0.0,
        };
        for r in &self.rows {
            mean.en += r.en;
            mean.sd += r.sd;
            mean.mi += r.mi;
            mean.fmi_dct += r.fmi_dct;
            mean.fmi_pixel += r.fmi_pixel;
            mean.scd += r.scd;
        }
        mean.en /= n;
        mean.sd /= n;
        mean.mi /= n;
        mean.fmi_dct /= n;
        mean.fmi_pixel /= n;
        mean.scd /= n;
        mean
    }

    /// CSV with the columns method, EN, SD, MI, FMI_dct, FMI_pixel, SCD;
    /// one row per pair plus a final mean row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,EN,SD,MI,FMI_dct,FMI_pixel,SCD\n");
        let mut write_row = |r: &MetricRow| {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.name, r.en, r.sd, r.mi, r.fmi_dct, r.fmi_pixel, r.scd
            );
        };
        for r in &self.rows {
            write_row(r);
        }
        write_row(&self.mean());
        s
    }
}
