//! The robustness module: sampled transport distortions applied between
//! encoder and decoder during training, plus the real JPEG codec used as
//! oracle and for sweeps.

use std::f64::consts::PI;

use cpmark_tensor::{Real, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::imaging::{encode_jpeg, ImageTensor, RGB_TO_YUV, YUV_TO_RGB};

/// Annex K luminance quantization table, row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Annex K chrominance quantization table, row-major.
pub const CHROMA_QUANT: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, //
    18, 21, 26, 66, 99, 99, 99, 99, //
    24, 26, 56, 99, 99, 99, 99, 99, //
    47, 66, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99, //
    99, 99, 99, 99, 99, 99, 99, 99,
];

pub const MIN_QUALITY: u8 = 25;
pub const MAX_QUALITY: u8 = 100;
pub const BLUR_KERNELS: [usize; 4] = [3, 5, 7, 9];

/// IJG quality scaling of a base table.
pub fn scaled_quant_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    base.map(|t| ((t as u32 * scale + 50) / 100).clamp(1, 255) as u16)
}

/// Blur sigma tied to kernel size: `0.3 ((k - 1) / 2 - 1) + 0.8`.
pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized 1D Gaussian taps; the 2D kernel is their outer product.
pub fn gaussian_kernel(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    let taps: Vec<f64> = (0..kernel)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Brightness shift, contrast and saturation factors, hue rotation (in turns).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterParams {
    pub const IDENTITY: Self = Self {
        brightness: 0.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    None,
    Jpeg,
    GaussianBlur,
    ColorJitter,
}

impl DistortionKind {
    pub const ALL: [Self; 4] = [Self::None, Self::Jpeg, Self::GaussianBlur, Self::ColorJitter];
}

/// One draw `t` from the robustness distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DistortionSpec {
    None,
    Jpeg { quality: u8 },
    GaussianBlur { kernel: usize, sigma: f64 },
    ColorJitter(JitterParams),
}

impl DistortionSpec {
    pub fn kind(&self) -> DistortionKind {
        match self {
            Self::None => DistortionKind::None,
            Self::Jpeg { .. } => DistortionKind::Jpeg,
            Self::GaussianBlur { .. } => DistortionKind::GaussianBlur,
            Self::ColorJitter(_) => DistortionKind::ColorJitter,
        }
    }

    /// Blur with the conventional sigma for `kernel`.
    pub fn blur(kernel: usize) -> Self {
        Self::GaussianBlur {
            kernel,
            sigma: blur_sigma(kernel),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::None | Self::ColorJitter(_) => {}
            Self::Jpeg { quality } => ensure!(
                (MIN_QUALITY..=MAX_QUALITY).contains(&quality),
                "JPEG quality {quality} outside [{MIN_QUALITY}, {MAX_QUALITY}]"
            ),
            Self::GaussianBlur { kernel, sigma } => {
                ensure!(kernel % 2 == 1, "blur kernel {kernel} must be odd");
                ensure!(sigma > 0.0 && sigma.is_finite(), "blur sigma must be positive");
            }
        }
        Ok(())
    }
}

/// Probability of each distortion kind for a training sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KindProbabilities {
    pub none: f64,
    pub jpeg: f64,
    pub blur: f64,
    pub jitter: f64,
}

impl Default for KindProbabilities {
    fn default() -> Self {
        Self {
            none: 0.25,
            jpeg: 0.25,
            blur: 0.25,
            jitter: 0.25,
        }
    }
}

/// Parameter ranges of the robustness distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustnessConfig {
    pub probabilities: KindProbabilities,
    /// Inclusive `[low, high]` JPEG quality range.
    pub jpeg_quality: [u8; 2],
    pub blur_kernels: Vec<usize>,
    /// Brightness shift drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    /// Saturation factor drawn from `[1 - s, 1 + s]`.
    pub saturation: f64,
    /// Hue rotation drawn from `[-h, h]` turns.
    pub hue: f64,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        Self {
            probabilities: KindProbabilities::default(),
            jpeg_quality: [MIN_QUALITY, MAX_QUALITY],
            blur_kernels: BLUR_KERNELS.to_vec(),
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.05,
        }
    }
}

impl RobustnessConfig {
    /// A distribution that never distorts.
    pub fn disabled() -> Self {
        Self {
            probabilities: KindProbabilities {
                none: 1.0,
                jpeg: 0.0,
                blur: 0.0,
                jitter: 0.0,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.probabilities;
        let all = [p.none, p.jpeg, p.blur, p.jitter];
        let bad = |m: String| Err(Error::Config(m));
        if all.iter().any(|v| !(*v >= 0.0)) {
            return bad(format!("distortion probabilities must be non-negative, got {all:?}"));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("distortion probabilities sum to {sum}, expected 1"));
        }
        let [lo, hi] = self.jpeg_quality;
        if lo > hi || lo < MIN_QUALITY || hi > MAX_QUALITY {
            return bad(format!(
                "jpeg_quality [{lo}, {hi}] must be ordered within [{MIN_QUALITY}, {MAX_QUALITY}]"
            ));
        }
        if self.blur_kernels.is_empty() || self.blur_kernels.iter().any(|k| !BLUR_KERNELS.contains(k)) {
            return bad(format!(
                "blur_kernels {:?} must be a non-empty subset of {BLUR_KERNELS:?}",
                self.blur_kernels
            ));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("jitter range {name} must be finite and non-negative"));
            }
        }
        if self.contrast > 1.0 || self.saturation > 1.0 {
            return bad("contrast and saturation ranges must not exceed 1".into());
        }
        Ok(())
    }
}

/// Draws a kind, then its parameters uniformly from the configured ranges.
pub fn sample_transform(rng: &mut impl Rng, config: &RobustnessConfig) -> Result<DistortionSpec> {
    config.validate()?;
    let p = &config.probabilities;
    let u: f64 = rng.random();
    let kind = if u < p.none {
        DistortionKind::None
    } else if u < p.none + p.jpeg {
        DistortionKind::Jpeg
    } else if u < p.none + p.jpeg + p.blur {
        DistortionKind::GaussianBlur
    } else if p.jitter > 0.0 {
        DistortionKind::ColorJitter
    } else {
        // rounding slack when the last kinds have zero mass
        [DistortionKind::GaussianBlur, DistortionKind::Jpeg, DistortionKind::None]
            .into_iter()
            .zip([p.blur, p.jpeg, p.none])
            .find(|&(_, w)| w > 0.0)
            .map(|(k, _)| k)
            .unwrap_or(DistortionKind::None)
    };
    let symmetric = |rng: &mut dyn rand::RngCore, r: f64| {
        if r == 0.0 {
            0.0
        } else {
            rng.random_range(-r..=r)
        }
    };
    Ok(match kind {
        DistortionKind::None => DistortionSpec::None,
        DistortionKind::Jpeg => DistortionSpec::Jpeg {
            quality: rng.random_range(config.jpeg_quality[0]..=config.jpeg_quality[1]),
        },
        DistortionKind::GaussianBlur => {
            DistortionSpec::blur(config.blur_kernels[rng.random_range(0..config.blur_kernels.len())])
        }
        DistortionKind::ColorJitter => DistortionSpec::ColorJitter(JitterParams {
            brightness: symmetric(rng, config.brightness),
            contrast: 1.0 + symmetric(rng, config.contrast),
            saturation: 1.0 + symmetric(rng, config.saturation),
            hue: symmetric(rng, config.hue),
        }),
    })
}

fn block_table<T: Real>(table: &[u16; 64], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_fn([1, 1, h, w], |i| {
        let (y, x) = (i / w, i % w);
        T::lit(table[(y % 8) * 8 + x % 8] as f64)
    })
}

/// DCT, quantize with the rounding surrogate, dequantize, inverse DCT.
fn quantize_planes<'t, T: Real>(x: Var<'t, T>, table: &[u16; 64]) -> Var<'t, T> {
    let shape = x.shape();
    let (h, w) = (shape[2], shape[3]);
    let tape = x.tape();
    let steps = block_table::<T>(table, h, w);
    let inv = tape.constant(steps.map(|v| T::one() / v)).expand(shape.clone());
    let steps = tape.constant(steps).expand(shape);
    let coeffs = x.block_dct8(false);
    ((coeffs * inv).round_cubic() * steps).block_dct8(true)
}

/// Differentiable JPEG over an `(n, 3, h, w)` batch in `[0, 1]`.
///
/// YCbCr, 4:2:0 chroma, 8x8 DCT, quantization with the cubic rounding
/// surrogate. Chroma is decimated and reconstructed the way the real codec
/// pair does it: top-left sample of each 2x2 cell, then libjpeg-style
/// triangle upsampling.
/// Sizes that are not multiples of 16 are reflect-padded and cropped back.
///
/// # Panics
/// If `quality` is outside `[25, 100]`.
pub fn diff_jpeg_var<'t, T: Real>(x: Var<'t, T>, quality: u8) -> Var<'t, T> {
    assert!(
        (MIN_QUALITY..=MAX_QUALITY).contains(&quality),
        "JPEG quality {quality} outside [{MIN_QUALITY}, {MAX_QUALITY}]"
    );
    let shape = x.shape();
    let (h, w) = (shape[2], shape[3]);
    let (ph, pw) = (h.next_multiple_of(16) - h, w.next_multiple_of(16) - w);
    let padded = if ph + pw > 0 { x.pad_reflect(0, ph, 0, pw) } else { x };

    // level-shifted 8-bit YCbCr: Y - 128, Cb - 128, Cr - 128
    let forward = RGB_TO_YUV.map(|v| v * 255.0);
    let ycc = padded.channel_mix(&forward, &[-128.0, 0.0, 0.0]);
    let luma = quantize_planes(ycc.narrow(1, 0, 1), &scaled_quant_table(&LUMA_QUANT, quality));
    let chroma = quantize_planes(
        ycc.narrow(1, 1, 2).decimate2(),
        &scaled_quant_table(&CHROMA_QUANT, quality),
    )
    .upsample_triangle2();

    let inverse = YUV_TO_RGB.map(|v| v / 255.0);
    let rgb = Var::cat(&[luma, chroma], 1)
        .channel_mix(&inverse, &[128.0 / 255.0; 3])
        .clamp(0.0, 1.0);
    if ph + pw > 0 {
        rgb.crop(0, 0, h, w)
    } else {
        rgb
    }
}

/// Depthwise Gaussian blur with reflect padding.
pub fn gaussian_blur_var<'t, T: Real>(x: Var<'t, T>, kernel: usize, sigma: f64) -> Var<'t, T> {
    x.blur_separable(&gaussian_kernel(kernel, sigma))
}

fn luma_rows() -> [f64; 3] {
    [RGB_TO_YUV[0], RGB_TO_YUV[1], RGB_TO_YUV[2]]
}

/// Brightness, contrast, saturation, hue, then clamp.
pub fn color_jitter_var<'t, T: Real>(x: Var<'t, T>, p: &JitterParams) -> Var<'t, T> {
    let mut x = x.add_scalar(p.brightness);
    let luma = luma_rows();
    if p.contrast != 1.0 {
        let shape = x.shape();
        let mean = x.channel_mix(&luma, &[0.0]).mean_axes(&[1, 2, 3]).expand(shape);
        x = x.mul_scalar(p.contrast) + mean.mul_scalar(1.0 - p.contrast);
    }
    if p.saturation != 1.0 {
        let s = p.saturation;
        let mut m = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                m[r * 3 + c] = (1.0 - s) * luma[c] + if r == c { s } else { 0.0 };
            }
        }
        x = x.channel_mix(&m, &[0.0; 3]);
    }
    if p.hue != 0.0 {
        // rotate the (U, V) plane about neutral grey; the chroma offsets cancel
        let (sin, cos) = (2.0 * PI * p.hue).sin_cos();
        let rot = [1.0, 0.0, 0.0, 0.0, cos, -sin, 0.0, sin, cos];
        let m = matmul3(&YUV_TO_RGB, &matmul3(&rot, &RGB_TO_YUV));
        x = x.channel_mix(&m, &[0.0; 3]);
    }
    x.clamp(0.0, 1.0)
}

fn matmul3(a: &[f64; 9], b: &[f64; 9]) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[r * 3 + c] = (0..3).map(|k| a[r * 3 + k] * b[k * 3 + c]).sum();
        }
    }
    out
}

/// Applies `spec` to a batch; `None` is the identity.
pub fn apply_var<'t, T: Real>(spec: &DistortionSpec, x: Var<'t, T>) -> Var<'t, T> {
    match *spec {
        DistortionSpec::None => x,
        DistortionSpec::Jpeg { quality } => diff_jpeg_var(x, quality),
        DistortionSpec::GaussianBlur { kernel, sigma } => gaussian_blur_var(x, kernel, sigma),
        DistortionSpec::ColorJitter(ref p) => color_jitter_var(x, p),
    }
}

fn on_image(img: &ImageTensor, f: impl for<'t> Fn(Var<'t, f32>) -> Var<'t, f32>) -> Result<ImageTensor> {
    let tape = Tape::new();
    let x = tape.constant(ImageTensor::batch(std::slice::from_ref(img))?);
    Ok(ImageTensor::unbatch(&f(x).value()).remove(0))
}

fn ensure_rgb(img: &ImageTensor) -> Result<()> {
    ensure!(
        img.color_space() == crate::imaging::ColorSpace::Rgb,
        "distortions expect an RGB image"
    );
    Ok(())
}

pub fn diff_jpeg(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    ensure_rgb(img)?;
    DistortionSpec::Jpeg { quality }.validate()?;
    ensure!(
        img.height() >= 9 && img.width() >= 9,
        "diff_jpeg needs at least 9x9 pixels for reflect padding"
    );
    on_image(img, |x| diff_jpeg_var(x, quality))
}

pub fn gaussian_blur(img: &ImageTensor, kernel: usize, sigma: f64) -> Result<ImageTensor> {
    ensure_rgb(img)?;
    DistortionSpec::GaussianBlur { kernel, sigma }.validate()?;
    ensure!(
        kernel / 2 < img.height().min(img.width()),
        "blur kernel {kernel} too large for a {}x{} image",
        img.height(),
        img.width()
    );
    on_image(img, |x| gaussian_blur_var(x, kernel, sigma))
}

pub fn color_jitter(img: &ImageTensor, params: &JitterParams) -> Result<ImageTensor> {
    ensure_rgb(img)?;
    on_image(img, |x| color_jitter_var(x, params))
}

pub fn apply(spec: &DistortionSpec, img: &ImageTensor) -> Result<ImageTensor> {
    spec.validate()?;
    match *spec {
        DistortionSpec::None => Ok(img.clone()),
        DistortionSpec::Jpeg { quality } => diff_jpeg(img, quality),
        DistortionSpec::GaussianBlur { kernel, sigma } => gaussian_blur(img, kernel, sigma),
        DistortionSpec::ColorJitter(ref p) => color_jitter(img, p),
    }
}

/// Encodes to real JPEG bytes (4:2:0) and decodes them again. Not differentiable.
pub fn real_jpeg_roundtrip(img: &ImageTensor, quality: u8) -> Result<ImageTensor> {
    ensure_rgb(img)?;
    let bytes = encode_jpeg(&img.to_rgb8(), quality)?;
    let decoded = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(ImageTensor::from_rgb8(&decoded.to_rgb8()))
}
