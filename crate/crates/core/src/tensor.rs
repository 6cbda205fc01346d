//! Dense row-major f64 tensors and the image-processing primitives the
//! rest of the crate composes.
//!
//! Shape conventions used throughout:
//! - grayscale image: `[H, W]`
//! - feature map: `[C, H, W]`
//! - token matrix: `[N, D]` (token `y*W + x` carries channel vector `D`)
//! - conv kernel weights: `[OUT, IN, KH, KW]`
//! - scalar: `[]`

use crate::error::{Error, Result};

/// Dense row-major tensor of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Construct from shape and data; rejects length mismatch and
    /// non-finite values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    /// Internal constructor for operation outputs; skips the finite scan.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![0.0; numel])
    }

    pub fn filled(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), vec![v; numel])
    }

    pub fn scalar(v: f64) -> Self {
        Self::new_unchecked(vec![], vec![v])
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Self::new_unchecked(shape.to_vec(), (0..numel).map(|i| f(i)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().product::<usize>() == 1
    }

    pub fn scalar_value(&self) -> Result<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(Error::shape(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::shape(format!("expected rank 2, got {:?}", self.shape))),
        }
    }

    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    /// Reinterpret an `[H, W]` image as a single-channel `[1, H, W]` map.
    pub fn as_single_channel(&self) -> Result<Tensor> {
        let (h, w) = self.dims2()?;
        Ok(Tensor::new_unchecked(vec![1, h, w], self.data.clone()))
    }

    /// Drop the leading channel axis of a `[1, H, W]` map.
    pub fn into_image(self) -> Result<Tensor> {
        let (c, h, w) = self.dims3()?;
        if c != 1 {
            return Err(Error::shape(format!("expected 1 channel, got {c}")));
        }
        Ok(Tensor::new_unchecked(vec![h, w], self.data))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new_unchecked(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::new_unchecked(self.shape.clone(), data))
    }
}

/// Padding behavior of [`conv2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaddingMode {
    /// No padding; output shrinks by the kernel extent.
    Valid,
    /// Reflect (symmetric, edge duplicated) padding keeping spatial size
    /// when the kernel is odd and the stride is 1.
    Same,
}

/// Border handling of [`filter2d`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BorderMode {
    /// Symmetric reflection, edge pixel duplicated.
    Reflect,
    /// Torus wrap-around.
    Periodic,
}

/// 2D convolution weights plus a per-output-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel2D {
    weights: Tensor,
    bias: Vec<f64>,
}

impl Kernel2D {
    pub fn new(weights: Tensor, bias: Vec<f64>) -> Result<Self> {
        let (out_ch, _in_ch, kh, kw) = weights.dims4()?;
        if bias.len() != out_ch {
            return Err(Error::shape(format!(
                "bias length {} != out channels {}",
                bias.len(),
                out_ch
            )));
        }
        if kh == 0 || kw == 0 || out_ch == 0 {
            return Err(Error::argument("kernel dimensions must be positive"));
        }
        Ok(Self { weights, bias })
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.weights.shape()[2], self.weights.shape()[3])
    }
}

/// Reflect an index into `[0, n)` by mirroring at the borders
/// (edge duplicated: -1 -> 0, -2 -> 1, n -> n-1).
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n > 0);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i as usize;
        }
    }
}

/// Wrap an index onto the torus `[0, n)`.
pub(crate) fn wrap_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    (((i % n) + n) % n) as usize
}

/// Reflect-pad the spatial axes of a `[C, H, W]` map by `pad` on each side.
pub fn pad_reflect(map: &Tensor, pad: usize) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let (oh, ow) = (h + 2 * pad, w + 2 * pad);
    let mut out = vec![0.0; c * oh * ow];
    let src = map.data();
    for ch in 0..c {
        for y in 0..oh {
            let sy = reflect_index(y as isize - pad as isize, h);
            for x in 0..ow {
                let sx = reflect_index(x as isize - pad as isize, w);
                out[(ch * oh + y) * ow + x] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c, oh, ow], out))
}

fn conv2d_output_dim(in_dim: usize, k: usize, stride: usize) -> Option<usize> {
    if in_dim < k {
        None
    } else {
        Some((in_dim - k) / stride + 1)
    }
}

/// 2D cross-correlation of a `[C, H, W]` map with a [`Kernel2D`].
///
/// Output spatial size per axis is `floor((H + 2p - kh) / stride) + 1`
/// with `p = (kh - 1) / 2` for [`PaddingMode::Same`] (reflect) and
/// `p = 0` for [`PaddingMode::Valid`].
pub fn conv2d(
    input: &Tensor,
    kernel: &Kernel2D,
    stride: usize,
    padding: PaddingMode,
) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::argument("stride must be >= 1"));
    }
    let (in_ch, _h, _w) = input.dims3()?;
    if in_ch != kernel.in_channels() {
        return Err(Error::shape(format!(
            "conv2d: input has {} channels, kernel expects {}",
            in_ch,
            kernel.in_channels()
        )));
    }
    let (kh, kw) = kernel.kernel_hw();
    let padded;
    let src = match padding {
        PaddingMode::Valid => input,
        PaddingMode::Same => {
            if kh % 2 == 0 || kw % 2 == 0 {
                return Err(Error::argument(
                    "same-padding convolution requires odd kernel dims",
                ));
            }
            padded = pad_reflect(input, (kh - 1) / 2)?;
            &padded
        }
    };
    conv2d_valid(src, kernel.weights(), kernel.bias(), stride)
}

/// Valid cross-correlation; `weights` is `[OUT, IN, KH, KW]`.
pub fn conv2d_valid(input: &Tensor, weights: &Tensor, bias: &[f64], stride: usize) -> Result<Tensor> {
    let (in_ch, h, w) = input.dims3()?;
    let (out_ch, k_in, kh, kw) = weights.dims4()?;
    if in_ch != k_in {
        return Err(Error::shape(format!(
            "conv2d: input has {in_ch} channels, kernel expects {k_in}"
        )));
    }
    if bias.len() != out_ch {
        return Err(Error::shape("conv2d: bias length != out channels"));
    }
    let (oh, ow) = match (conv2d_output_dim(h, kh, stride), conv2d_output_dim(w, kw, stride)) {
        (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
        _ => {
            return Err(Error::shape(format!(
                "conv2d: empty output for input {h}x{w}, kernel {kh}x{kw}, stride {stride}"
            )))
        }
    };
    let x = input.data();
    let k = weights.data();
    let mut out = vec![0.0; out_ch * oh * ow];
    for oc in 0..out_ch {
        let plane = &mut out[oc * oh * ow..(oc + 1) * oh * ow];
        plane.fill(bias[oc]);
        for ic in 0..in_ch {
            for ky in 0..kh {
                for kx in 0..kw {
                    let kv = k[((oc * in_ch + ic) * kh + ky) * kw + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..oh {
                        let iy = oy * stride + ky;
                        let row = &x[(ic * h + iy) * w..(ic * h + iy) * w + w];
                        let dst = &mut plane[oy * ow..oy * ow + ow];
                        for ox in 0..ow {
                            dst[ox] += kv * row[ox * stride + kx];
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![out_ch, oh, ow], out))
}

/// 2x2 max pooling with stride 2; spatial dims must be even.
pub fn maxpool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!(
            "maxpool2 requires even spatial dims, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, xx) = (oy * 2, ox * 2);
                let i = (ch * h + y) * w + xx;
                let m = x[i].max(x[i + 1]).max(x[i + w]).max(x[i + w + 1]);
                out[(ch * oh + oy) * ow + ox] = m;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c, oh, ow], out))
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = (h * 2, w * 2);
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for xx in 0..ow {
                out[(ch * oh + y) * ow + xx] = x[(ch * h + y / 2) * w + xx / 2];
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c, oh, ow], out))
}

/// Torus translation of the spatial grid: `out[y][x] = in[(y-dy) mod H][(x-dx) mod W]`,
/// i.e. content moves down/right by `(dy, dx)`. Exact inverse is `(-dy, -dx)`.
pub fn cyclic_shift(map: &Tensor, dy: i64, dx: i64) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let x = map.data();
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = wrap_index(y as isize - dy as isize, h);
            for xx in 0..w {
                let sx = wrap_index(xx as isize - dx as isize, w);
                out[(ch * h + y) * w + xx] = x[(ch * h + sy) * w + sx];
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c, h, w], out))
}

/// Depthwise k x k correlation of a `[C, H, W]` map with a constant kernel,
/// border handled per `mode`; output keeps the input size.
pub fn filter2d(map: &Tensor, kernel: &[f64], k: usize, mode: BorderMode) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    if k % 2 == 0 || k == 0 {
        return Err(Error::argument(format!("filter2d kernel size {k} must be odd")));
    }
    if kernel.len() != k * k {
        return Err(Error::shape("filter2d kernel length != k*k"));
    }
    // A kernel larger than the map is fine: the border rules fold
    // indices until they land in range.
    let p = (k / 2) as isize;
    let x = map.data();
    let mut out = vec![0.0; c * h * w];
    let index = |i: isize, n: usize| -> usize {
        match mode {
            BorderMode::Reflect => reflect_index(i, n),
            BorderMode::Periodic => wrap_index(i, n),
        }
    };
    for ch in 0..c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let sy = index(y as isize + ky as isize - p, h);
                    for kx in 0..k {
                        let sx = index(xx as isize + kx as isize - p, w);
                        acc += kernel[ky * k + kx] * x[(ch * h + sy) * w + sx];
                    }
                }
                out[(ch * h + y) * w + xx] = acc;
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![c, h, w], out))
}

/// k x k mean filter over an `[H, W]` image with reflect padding.
/// `k` must be odd and no larger than either image dim.
pub fn mean_filter(image: &Tensor, k: usize) -> Result<Tensor> {
    mean_filter_with(image, k, BorderMode::Reflect)
}

/// Mean filter with an explicit border mode (periodic preserves the
/// global mean exactly).
pub fn mean_filter_with(image: &Tensor, k: usize, mode: BorderMode) -> Result<Tensor> {
    let (h, w) = image.dims2()?;
    if k > h || k > w {
        return Err(Error::argument(format!(
            "mean_filter kernel {k} exceeds image dims {h}x{w}"
        )));
    }
    let map = Tensor::new_unchecked(vec![1, h, w], image.data().to_vec());
    let kernel = vec![1.0 / (k * k) as f64; k * k];
    filter2d(&map, &kernel, k, mode)?.into_image()
}

/// Matrix product of `[N, K]` and `[K, M]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, ka) = a.dims2()?;
    let (kb, m) = b.dims2()?;
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul: inner dims {ka} vs {kb} differ"
        )));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for kk in 0..ka {
            let av = ad[i * ka + kk];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[kk * m..kk * m + m];
            let orow = &mut out[i * m..i * m + m];
            for j in 0..m {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor::new_unchecked(vec![n, m], out))
}

pub fn transpose(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    let x = m.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    Ok(Tensor::new_unchecked(vec![c, r], out))
}

/// Numerically stable softmax over each row of an `[N, M]` matrix.
/// Rows sum to 1 and the result is invariant to per-row shifts.
pub fn rowwise_softmax(m: &Tensor) -> Result<Tensor> {
    let (r, c) = m.dims2()?;
    if c == 0 {
        return Err(Error::shape("softmax over empty rows"));
    }
    let x = m.data();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[i * c..(i + 1) * c];
        let mut sum = 0.0;
        for j in 0..c {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum += e;
        }
        for v in orow.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor::new_unchecked(vec![r, c], out))
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Per-row layer normalization of an `[N, D]` matrix with affine
/// parameters. Epsilon sits inside the square root, so constant rows
/// normalize to zero rather than dividing by zero.
pub fn layer_norm(x: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(format!(
            "layer_norm affine dims {}/{} != feature dim {d}",
            gamma.len(),
            beta.len()
        )));
    }
    let xd = x.data();
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let row = &xd[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let orow = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            orow[j] = gamma[j] * ((row[j] - mean) * inv) + beta[j];
        }
    }
    Ok(Tensor::new_unchecked(vec![n, d], out))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(|v| 1.0 / (1.0 + (-v).exp()))
}

/// Reinterpret a `[C, H, W]` map as `[H*W, C]` tokens (row-major over
/// the spatial grid). Exact inverse of [`map_from_tokens`].
pub fn tokens_from_map(map: &Tensor) -> Result<Tensor> {
    let (c, h, w) = map.dims3()?;
    let x = map.data();
    let n = h * w;
    let mut out = vec![0.0; n * c];
    for ch in 0..c {
        for p in 0..n {
            out[p * c + ch] = x[ch * n + p];
        }
    }
    Ok(Tensor::new_unchecked(vec![n, c], out))
}

/// Reassemble `[H*W, C]` tokens into a `[C, H, W]` map.
pub fn map_from_tokens(tokens: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (n, c) = tokens.dims2()?;
    if n != h * w {
        return Err(Error::shape(format!(
            "token count {n} != spatial size {h}x{w}"
        )));
    }
    let x = tokens.data();
    let mut out = vec![0.0; c * n];
    for ch in 0..c {
        for p in 0..n {
            out[ch * n + p] = x[p * c + ch];
        }
    }
    Ok(Tensor::new_unchecked(vec![c, h, w], out))
}
