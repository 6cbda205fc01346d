//! Image file I/O and color-space conversion.
//!
//! Grayscale travels as binary PGM (P5, maxval 255) or PNG; RGB as
//! binary PPM (P6) or PNG. The netpbm writers emit a canonical header
//! (`P5\n<w> <h>\n255\n`) so outputs are byte-reproducible. Intensities
//! map to [0, 1] as v/255; writing rounds and clamps.
//!
//! RGB/YCrCb conversion follows full-range BT.601 with chroma offset 0.5
//! (the JPEG convention); RGB fed to a grayscale path collapses to the
//! BT.601 luma.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A loaded visible-side image: grayscale or full color.
#[derive(Debug, Clone)]
pub enum LoadedImage {
    /// `[H, W]` intensities in [0, 1].
    Gray(Tensor),
    /// `[3, H, W]` planes in [0, 1].
    Rgb(Tensor),
}

impl LoadedImage {
    /// Collapse to grayscale (BT.601 luma for RGB inputs).
    pub fn into_gray(self) -> Tensor {
        match self {
            LoadedImage::Gray(t) => t,
            LoadedImage::Rgb(t) => rgb_to_luma(&t),
        }
    }
}

pub fn rgb_to_luma(rgb: &Tensor) -> Tensor {
    let (c, h, w) = rgb.dims3().expect("rgb tensor must be [3, H, W]");
    assert_eq!(c, 3);
    let d = rgb.data();
    let n = h * w;
    Tensor::from_fn(&[h, w], |i| {
        0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]
    })
}

/// Full-range BT.601 RGB -> (Y, Cr, Cb) planes, all in [0, 1] with the
/// chroma planes centered at 0.5.
pub fn rgb_to_ycrcb(rgb: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let d = rgb.data();
    let n = h * w;
    let mut y = vec![0.0; n];
    let mut cr = vec![0.0; n];
    let mut cb = vec![0.0; n];
    for i in 0..n {
        let (r, g, b) = (d[i], d[n + i], d[2 * n + i]);
        y[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        cr[i] = 0.5 * r - 0.418688 * g - 0.081312 * b + 0.5;
        cb[i] = -0.168736 * r - 0.331264 * g + 0.5 * b + 0.5;
    }
    Ok((
        Tensor::new_unchecked(vec![h, w], y),
        Tensor::new_unchecked(vec![h, w], cr),
        Tensor::new_unchecked(vec![h, w], cb),
    ))
}

/// Inverse of [`rgb_to_ycrcb`]; output clamped to [0, 1].
pub fn ycrcb_to_rgb(y: &Tensor, cr: &Tensor, cb: &Tensor) -> Result<Tensor> {
    let (h, w) = y.dims2()?;
    if cr.shape() != y.shape() || cb.shape() != y.shape() {
        return Err(Error::shape("ycrcb planes differ in shape"));
    }
    let n = h * w;
    let mut out = vec![0.0; 3 * n];
    for i in 0..n {
        let yy = y.data()[i];
        let crv = cr.data()[i] - 0.5;
        let cbv = cb.data()[i] - 0.5;
        out[i] = (yy + 1.402 * crv).clamp(0.0, 1.0);
        out[n + i] = (yy - 0.344136 * cbv - 0.714136 * crv).clamp(0.0, 1.0);
        out[2 * n + i] = (yy + 1.772 * cbv).clamp(0.0, 1.0);
    }
    Ok(Tensor::new_unchecked(vec![3, h, w], out))
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Read one whitespace-delimited netpbm header token, skipping `#`
/// comments.
fn read_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Image("unexpected end of netpbm header".into()));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' {
            let mut line = String::new();
            r.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

fn read_netpbm(path: &Path, expect_magic: &str) -> Result<(usize, usize, Vec<u8>)> {
    let file = fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let magic = read_token(&mut r)?;
    if magic != expect_magic {
        return Err(Error::Image(format!(
            "{}: expected {expect_magic}, found `{magic}`",
            path.display()
        )));
    }
    let w: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Image("bad width".into()))?;
    let h: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Image("bad height".into()))?;
    let maxval: usize = read_token(&mut r)?
        .parse()
        .map_err(|_| Error::Image("bad maxval".into()))?;
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported maxval {maxval} (want 255)")));
    }
    let channels = if expect_magic == "P6" { 3 } else { 1 };
    let mut data = vec![0u8; w * h * channels];
    r.read_exact(&mut data)
        .map_err(|_| Error::Image("truncated pixel data".into()))?;
    Ok((h, w, data))
}

/// Binary PGM (P5) -> `[H, W]` intensities.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let (h, w, data) = read_netpbm(path, "P5")?;
    Ok(Tensor::from_fn(&[h, w], |i| data[i] as f64 / 255.0))
}

/// `[H, W]` intensities -> binary PGM (P5), canonical header.
pub fn write_pgm(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = img.dims2()?;
    let mut out = Vec::with_capacity(h * w + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    fs::write(path, out)?;
    Ok(())
}

/// Binary PPM (P6) -> `[3, H, W]` planes.
pub fn read_ppm(path: &Path) -> Result<Tensor> {
    let (h, w, data) = read_netpbm(path, "P6")?;
    let n = h * w;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (ch, p) = (i / n, i % n);
        data[p * 3 + ch] as f64 / 255.0
    }))
}

/// `[3, H, W]` planes -> binary PPM (P6), canonical header.
pub fn write_ppm(rgb: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let d = rgb.data();
    let mut out = Vec::with_capacity(3 * n + 32);
    out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
    for p in 0..n {
        out.push(to_byte(d[p]));
        out.push(to_byte(d[n + p]));
        out.push(to_byte(d[2 * n + p]));
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<LoadedImage> {
    let img = image::open(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    match img {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = (g.width() as usize, g.height() as usize);
            let raw = g.into_raw();
            Ok(LoadedImage::Gray(Tensor::from_fn(&[h, w], |i| {
                raw[i] as f64 / 255.0
            })))
        }
        other => {
            let rgb = other.into_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let raw = rgb.into_raw();
            let n = h * w;
            Ok(LoadedImage::Rgb(Tensor::from_fn(&[3, h, w], |i| {
                let (ch, p) = (i / n, i % n);
                raw[p * 3 + ch] as f64 / 255.0
            })))
        }
    }
}

fn write_png_gray(img: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = img.dims2()?;
    let buf: Vec<u8> = img.data().iter().map(|&v| to_byte(v)).collect();
    let gray = image::GrayImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("gray buffer size mismatch".into()))?;
    gray.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn write_png_rgb(rgb: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = rgb.dims3()?;
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    let n = h * w;
    let d = rgb.data();
    let mut buf = Vec::with_capacity(3 * n);
    for p in 0..n {
        buf.push(to_byte(d[p]));
        buf.push(to_byte(d[n + p]));
        buf.push(to_byte(d[2 * n + p]));
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .ok_or_else(|| Error::Image("rgb buffer size mismatch".into()))?;
    img.save(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

fn extension_of(path: &Path) -> Result<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .ok_or_else(|| Error::Image(format!("{}: missing file extension", path.display())))
}

/// Load any supported image, preserving color when present.
pub fn load_image(path: &Path) -> Result<LoadedImage> {
    match extension_of(path)?.as_str() {
        "pgm" => Ok(LoadedImage::Gray(read_pgm(path)?)),
        "ppm" => Ok(LoadedImage::Rgb(read_ppm(path)?)),
        "png" => read_png(path),
        other => Err(Error::Image(format!("unsupported image format `.{other}`"))),
    }
}

/// Load as grayscale (RGB inputs collapse to BT.601 luma).
pub fn load_gray(path: &Path) -> Result<Tensor> {
    Ok(load_image(path)?.into_gray())
}

/// Write a grayscale image; the format follows the extension.
pub fn save_gray(img: &Tensor, path: &Path) -> Result<()> {
    match extension_of(path)?.as_str() {
        "pgm" => write_pgm(img, path),
        "png" => write_png_gray(img, path),
        other => Err(Error::Image(format!("unsupported grayscale format `.{other}`"))),
    }
}

/// Write an RGB image; the format follows the extension.
pub fn save_rgb(rgb: &Tensor, path: &Path) -> Result<()> {
    match extension_of(path)?.as_str() {
        "ppm" => write_ppm(rgb, path),
        "png" => write_png_rgb(rgb, path),
        other => Err(Error::Image(format!("unsupported rgb format `.{other}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn pgm_roundtrip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Tensor::from_fn(&[5, 7], |i| (i % 256) as f64 / 255.0);
        write_pgm(&img, &path).unwrap();
        let back = read_pgm(&path).unwrap();
        assert_eq!(back.shape(), &[5, 7]);
        assert_eq!(back.data(), img.data());

        // writing again yields identical bytes (canonical header)
        let bytes1 = std::fs::read(&path).unwrap();
        write_pgm(&back, &path).unwrap();
        assert_eq!(bytes1, std::fs::read(&path).unwrap());
    }

    #[test]
    fn pgm_header_with_comments_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# a comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 192, 255, 10]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_pgm(&path).unwrap();
        assert_eq!(img.shape(), &[2, 3]);
        assert_eq!(img.data()[1], 64.0 / 255.0);
    }

    #[test]
    fn pgm_rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P4\n2 2\n255\n....").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Image(_))));
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_pgm(&path), Err(Error::Image(_))));
    }

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let rgb = Tensor::from_fn(&[3, 4, 4], |i| ((i * 17) % 256) as f64 / 255.0);
        write_ppm(&rgb, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.data(), rgb.data());
    }

    #[test]
    fn png_roundtrip_gray_and_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let gray = Tensor::from_fn(&[6, 5], |i| (i % 256) as f64 / 255.0);
        let gpath = dir.path().join("g.png");
        save_gray(&gray, &gpath).unwrap();
        match load_image(&gpath).unwrap() {
            LoadedImage::Gray(t) => assert_eq!(t.data(), gray.data()),
            _ => panic!("expected grayscale"),
        }

        let rgb = Tensor::from_fn(&[3, 4, 6], |i| ((i * 7) % 256) as f64 / 255.0);
        let cpath = dir.path().join("c.png");
        save_rgb(&rgb, &cpath).unwrap();
        match load_image(&cpath).unwrap() {
            LoadedImage::Rgb(t) => assert_eq!(t.data(), rgb.data()),
            _ => panic!("expected rgb"),
        }
    }

    #[test]
    fn ycrcb_roundtrip_is_tight() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let rgb = Tensor::from_fn(&[3, 8, 8], |_| rng.random::<f64>());
        let (y, cr, cb) = rgb_to_ycrcb(&rgb).unwrap();
        let back = ycrcb_to_rgb(&y, &cr, &cb).unwrap();
        for (a, b) in rgb.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn luma_matches_bt601_weights() {
        let rgb = Tensor::new(vec![3, 1, 1], vec![1.0, 0.5, 0.25]).unwrap();
        let l = rgb_to_luma(&rgb);
        assert!((l.data()[0] - (0.299 + 0.587 * 0.5 + 0.114 * 0.25)).abs() < 1e-12);
        let (y, _, _) = rgb_to_ycrcb(&rgb).unwrap();
        assert_eq!(y.data()[0], l.data()[0]);
    }

    #[test]
    fn gray_rgb_produces_centered_chroma() {
        let rgb = Tensor::from_fn(&[3, 2, 2], |i| ((i % 4) as f64) / 10.0 + 0.3);
        let (_, cr, cb) = rgb_to_ycrcb(&rgb).unwrap();
        for (a, b) in cr.data().iter().zip(cb.data()) {
            assert!((a - 0.5).abs() < 1e-12);
            assert!((b - 0.5).abs() < 1e-12);
        }
    }
}
