//! Image I/O, resizing and the RGB/YUV conversion shared by the YUV loss and diff-JPEG.

use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use cpmark_tensor::{Real, Tensor, Var};
use image::{ImageReader, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// BT.601 full-range luma/chroma matrix, row-major, rows `Y, U, V`.
///
/// `U = 0.5 (B - Y) / 0.886`, `V = 0.5 (R - Y) / 0.701`; add [`YUV_OFFSET`].
pub const RGB_TO_YUV: [f64; 9] = [
    0.299,
    0.587,
    0.114,
    -0.5 * 0.299 / 0.886,
    -0.5 * 0.587 / 0.886,
    0.5,
    0.5,
    -0.5 * 0.587 / 0.701,
    -0.5 * 0.114 / 0.701,
];

/// Chroma offset keeping `U` and `V` inside `[0, 1]`.
pub const YUV_OFFSET: [f64; 3] = [0.0, 0.5, 0.5];

/// Closed-form inverse of [`RGB_TO_YUV`] (applied after removing the offset).
pub const YUV_TO_RGB: [f64; 9] = [
    1.0,
    0.0,
    2.0 * 0.701,
    1.0,
    -2.0 * 0.886 * 0.114 / 0.587,
    -2.0 * 0.701 * 0.299 / 0.587,
    1.0,
    2.0 * 0.886,
    0.0,
];

/// Offset to pass with [`YUV_TO_RGB`] to [`Var::channel_mix`]: `-M * YUV_OFFSET`.
pub fn yuv_to_rgb_offset() -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = -(0..3).map(|c| YUV_TO_RGB[r * 3 + c] * YUV_OFFSET[c]).sum::<f64>();
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorSpace {
    Rgb,
    Yuv,
}

/// A `(3, height, width)` image with finite unit-interval values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Tensor<f32>,
    color_space: ColorSpace,
}

impl ImageTensor {
    pub fn new(data: Tensor<f32>, color_space: ColorSpace) -> Result<Self> {
        ensure!(
            data.shape().len() == 3 && data.shape()[0] == 3,
            "image must have shape (3, h, w), got {:?}",
            data.shape()
        );
        ensure!(data.numel() > 0, "image must be non-empty");
        ensure!(data.all_finite(), "image contains non-finite values");
        Ok(Self { data, color_space })
    }

    pub fn rgb(data: Tensor<f32>) -> Result<Self> {
        Self::new(data, ColorSpace::Rgb)
    }

    /// RGB image from `f(channel, y, x)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let plane = height * width;
        let data = Tensor::from_fn([3, height, width], |i| {
            f(i / plane, (i % plane) / width, i % width)
        });
        Self::rgb(data).expect("from_fn produced an invalid image")
    }

    pub fn constant(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        Self::from_fn(height, width, |c, _, _| rgb[c])
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Tensor<f32> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.data
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color_space
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn clamp_unit(&self) -> Self {
        Self {
            data: self.data.map(|v| v.clamp(0.0, 1.0)),
            color_space: self.color_space,
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.data.shape() == other.data.shape()
    }

    /// 8-bit RGB raster, `round(clamp(v) * 255)`.
    pub fn to_rgb8(&self) -> RgbImage {
        let (h, w) = (self.height(), self.width());
        RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (self.at(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn from_rgb8(raster: &RgbImage) -> Self {
        let (w, h) = (raster.width() as usize, raster.height() as usize);
        Self::from_fn(h, w, |c, y, x| raster.get_pixel(x as u32, y as u32)[c] as f32 / 255.0)
    }

    /// Stacks equally sized images into an `(n, 3, h, w)` batch.
    pub fn batch(images: &[Self]) -> Result<Tensor<f32>> {
        ensure!(!images.is_empty(), "cannot batch zero images");
        ensure!(
            images.iter().all(|i| i.same_shape(&images[0])),
            "batched images must share one size"
        );
        let parts: Vec<Tensor<f32>> = images.iter().map(|i| i.data.clone()).collect();
        Ok(Tensor::stack(&parts))
    }

    /// Splits an `(n, 3, h, w)` batch back into RGB images.
    pub fn unbatch<T: Real>(batch: &Tensor<T>) -> Vec<Self> {
        let (n, ..) = batch.dims4();
        (0..n)
            .map(|i| Self::rgb(batch.index0(i).cast()).expect("batch slice is a valid image"))
            .collect()
    }
}

/// Bilinear resize with half-pixel centres and edge clamping (no antialiasing).
pub fn resize_bilinear(img: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    let (ih, iw) = (img.height(), img.width());
    if (ih, iw) == (height, width) {
        return img.clone();
    }
    let taps = |out: usize, input: usize| -> Vec<(usize, usize, f64)> {
        let scale = input as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
                let lo = s.floor() as usize;
                (lo, (lo + 1).min(input - 1), s - lo as f64)
            })
            .collect()
    };
    let (ty, tx) = (taps(height, ih), taps(width, iw));
    let out = ImageTensor::from_fn(height, width, |c, y, x| {
        let (y0, y1, fy) = ty[y];
        let (x0, x1, fx) = tx[x];
        let p = |yy, xx| img.at(c, yy, xx) as f64;
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    });
    ImageTensor {
        color_space: img.color_space,
        ..out
    }
}

/// Decodes an 8-bit RGB image and resizes it to `side x side`.
pub fn load_image(path: impl AsRef<Path>, side: usize) -> Result<ImageTensor> {
    let path = path.as_ref();
    ensure!(side > 0, "side must be positive");
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|source| match source {
        image::ImageError::IoError(e) if e.kind() == ErrorKind::NotFound => Error::io(path, e),
        source => Error::Format {
            path: path.to_path_buf(),
            source,
        },
    })?;
    let img = ImageTensor::from_rgb8(&decoded.to_rgb8());
    Ok(resize_bilinear(&img, side, side))
}

/// On-disk encoding for [`save_image`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SaveFormat {
    /// PNG with exact `round(v * 255)` bytes. Mandatory for encoded images.
    Png,
    /// Baseline JPEG, 4:2:0 chroma, quality in `1..=100`.
    Jpeg { quality: u8 },
}

/// Encodes an RGB raster as 4:2:0 baseline JPEG.
pub fn encode_jpeg(raster: &RgbImage, quality: u8) -> Result<Vec<u8>> {
    ensure!((1..=100).contains(&quality), "JPEG quality {quality} outside 1..=100");
    let mut bytes = Vec::new();
    let mut encoder = jpeg_encoder::Encoder::new(&mut bytes, quality);
    encoder.set_sampling_factor(jpeg_encoder::SamplingFactor::R_4_2_0);
    encoder
        .encode(
            raster.as_raw(),
            raster.width() as u16,
            raster.height() as u16,
            jpeg_encoder::ColorType::Rgb,
        )
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(bytes)
}

pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>, format: SaveFormat) -> Result<()> {
    let path = path.as_ref();
    ensure!(img.color_space == ColorSpace::Rgb, "only RGB images can be saved");
    let raster = img.to_rgb8();
    let bytes = match format {
        SaveFormat::Png => {
            let mut out = std::io::Cursor::new(Vec::new());
            raster
                .write_to(&mut out, image::ImageFormat::Png)
                .map_err(|e| Error::Codec(e.to_string()))?;
            out.into_inner()
        }
        SaveFormat::Jpeg { quality } => encode_jpeg(&raster, quality)?,
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn mix(img: &ImageTensor, matrix: &[f64; 9], offset: &[f64; 3]) -> Tensor<f32> {
    let (h, w) = (img.height(), img.width());
    let plane = h * w;
    let src = img.data.data();
    Tensor::from_fn([3, h, w], |i| {
        let (c, p) = (i / plane, i % plane);
        let v: f64 = (0..3)
            .map(|k| matrix[c * 3 + k] * src[k * plane + p] as f64)
            .sum::<f64>()
            + offset[c];
        v as f32
    })
}

pub fn rgb_to_yuv(img: &ImageTensor) -> Result<ImageTensor> {
    ensure!(img.color_space == ColorSpace::Rgb, "rgb_to_yuv expects an RGB image");
    ImageTensor::new(mix(img, &RGB_TO_YUV, &YUV_OFFSET), ColorSpace::Yuv)
}

/// Inverse of [`rgb_to_yuv`], clamped to `[0, 1]`.
pub fn yuv_to_rgb(img: &ImageTensor) -> Result<ImageTensor> {
    ensure!(img.color_space == ColorSpace::Yuv, "yuv_to_rgb expects a YUV image");
    let rgb = mix(img, &YUV_TO_RGB, &yuv_to_rgb_offset()).map(|v| v.clamp(0.0, 1.0));
    ImageTensor::rgb(rgb)
}

/// Differentiable [`rgb_to_yuv`] over an `(n, 3, h, w)` batch.
pub fn rgb_to_yuv_var<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    x.channel_mix(&RGB_TO_YUV, &YUV_OFFSET)
}

/// Differentiable inverse of [`rgb_to_yuv_var`], without clamping.
pub fn yuv_to_rgb_var<'t, T: Real>(x: Var<'t, T>) -> Var<'t, T> {
    x.channel_mix(&YUV_TO_RGB, &yuv_to_rgb_offset())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn yuv_matrices_are_inverse() {
        for r in 0..3 {
            for c in 0..3 {
                let v: f64 = (0..3).map(|k| YUV_TO_RGB[r * 3 + k] * RGB_TO_YUV[k * 3 + c]).sum();
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!((v - expect).abs() < 1e-12, "({r},{c}) = {v}");
            }
        }
    }

    #[test]
    fn black_and_white_have_neutral_chroma() {
        let black = rgb_to_yuv(&ImageTensor::constant(2, 2, [0.0; 3])).unwrap();
        assert_eq!(black.data().data()[..4], [0.0; 4]);
        assert!(black.data().data()[4..].iter().all(|&v| v == 0.5));
        let white = rgb_to_yuv(&ImageTensor::constant(1, 1, [1.0; 3])).unwrap();
        for (got, want) in white.data().data().iter().zip([1.0, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn wrong_colour_space_is_rejected() {
        let rgb = ImageTensor::constant(1, 1, [0.2; 3]);
        assert!(matches!(yuv_to_rgb(&rgb), Err(Error::Contract(_))));
        let yuv = rgb_to_yuv(&rgb).unwrap();
        assert!(matches!(rgb_to_yuv(&yuv), Err(Error::Contract(_))));
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let img = ImageTensor::from_fn(5, 4, |c, y, x| (c + y * 4 + x) as f32 / 30.0);
        assert_eq!(resize_bilinear(&img, 5, 4), img);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(ImageTensor::rgb(Tensor::zeros([1, 4, 4])).is_err());
        assert!(ImageTensor::rgb(Tensor::full([3, 1, 1], f32::NAN)).is_err());
    }
}
