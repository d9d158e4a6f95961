//! Image tensors, raster decode/encode, bilinear resizing and normalization.
//!
//! Intensities live in `[0, 1]` as `f32` in row-major HWC order. Quantization
//! to 8-bit happens only when encoding.

use std::io;
use std::path::{Path, PathBuf};

use image::{ColorType, ImageFormat};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image file not found: {0}")]
    NotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(PathBuf),
    #[error("corrupt image stream in {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("image dimensions must be at least 1x1, got {height}x{width}")]
    ZeroDimension { height: usize, width: usize },
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    Channels(usize),
    #[error("channel mismatch: image has {image}, spec has {spec}")]
    ChannelMismatch { image: usize, spec: usize },
    #[error("data length {len} does not match {height}x{width}x{channels}")]
    Shape {
        len: usize,
        height: usize,
        width: usize,
        channels: usize,
    },
    #[error("intensity {value} at index {index} outside [0, 1]")]
    Range { index: usize, value: f32 },
    #[error("normalization scale must be strictly positive, got {0}")]
    Scale(f32),
}

/// An `H x W x C` image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self, ImageError> {
        check_dims(height, width)?;
        if channels != 1 && channels != 3 {
            return Err(ImageError::Channels(channels));
        }
        if data.len() != height * width * channels {
            return Err(ImageError::Shape {
                len: data.len(),
                height,
                width,
                channels,
            });
        }
        if let Some((index, &value)) = data
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(ImageError::Range { index, value });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Result<Self, ImageError> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    /// Builds a tensor from 8-bit samples, mapping each byte `b` to `b / 255`.
    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::new(
            height,
            width,
            channels,
            bytes.iter().map(|&b| f32::from(b) / 255.0).collect(),
        )
    }

    /// Internal constructor for values already known to be valid; clamps to `[0, 1]`.
    pub(crate) fn from_raw_clamped(height: usize, width: usize, channels: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), height * width * channels);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Rounds every intensity to the nearest 8-bit level.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    /// The tensor after an 8-bit encode/decode cycle.
    pub fn quantized(&self) -> Self {
        let bytes = self.to_u8();
        Self::from_u8(self.height, self.width, self.channels, &bytes).expect("quantized data is valid")
    }

    /// Converts to the requested channel count (gray is replicated, color is
    /// reduced with Rec. 601 luma weights).
    pub fn with_channels(&self, channels: usize) -> Result<Self, ImageError> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (1, 3) => Ok(Self {
                height: self.height,
                width: self.width,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            }),
            (3, 1) => Ok(Self::from_raw_clamped(
                self.height,
                self.width,
                1,
                self.data
                    .chunks_exact(3)
                    .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                    .collect(),
            )),
            (_, c) => Err(ImageError::Channels(c)),
        }
    }

    /// Samples channel `c` at a continuous position whose coordinates are
    /// already inside `[0, h-1] x [0, w-1]`.
    #[inline]
    pub(crate) fn sample_bilinear(&self, y: f64, x: f64, c: usize) -> f64 {
        let y0 = (y.floor() as usize).min(self.height - 1);
        let x0 = (x.floor() as usize).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f64;
        let fx = x - x0 as f64;
        let v00 = f64::from(self.get(y0, x0, c));
        let v01 = f64::from(self.get(y0, x1, c));
        let v10 = f64::from(self.get(y1, x0, c));
        let v11 = f64::from(self.get(y1, x1, c));
        let top = v00 + (v01 - v00) * fx;
        let bottom = v10 + (v11 - v10) * fx;
        top + (bottom - top) * fy
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_dims(height: usize, width: usize) -> Result<(), ImageError> {
    if height == 0 || width == 0 {
        return Err(ImageError::ZeroDimension { height, width });
    }
    Ok(())
}

/// Channel layout requested when decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ColorMode {
    /// Keep what the file holds (alpha is dropped).
    #[default]
    Native,
    Gray,
    Rgb,
}

impl ColorMode {
    pub fn for_channels(channels: usize) -> Self {
        if channels == 1 {
            ColorMode::Gray
        } else {
            ColorMode::Rgb
        }
    }
}

pub fn load_image(path: &Path) -> Result<ImageTensor, ImageError> {
    load_image_as(path, ColorMode::Native)
}

/// Decodes a PNG or JPEG file. Grayscale sources are promoted to three
/// channels when `mode` is [`ColorMode::Rgb`].
pub fn load_image_as(path: &Path, mode: ColorMode) -> Result<ImageTensor, ImageError> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => ImageError::NotFound(path.to_path_buf()),
        _ => ImageError::Io {
            path: path.to_path_buf(),
            source: e,
        },
    })?;
    decode_image(&bytes, mode).map_err(|e| match e {
        DecodeFailure::Unsupported => ImageError::UnsupportedFormat(path.to_path_buf()),
        DecodeFailure::Corrupt(reason) => ImageError::Corrupt {
            path: path.to_path_buf(),
            reason,
        },
        DecodeFailure::Image(e) => e,
    })
}

enum DecodeFailure {
    Unsupported,
    Corrupt(String),
    Image(ImageError),
}

fn decode_image(bytes: &[u8], mode: ColorMode) -> Result<ImageTensor, DecodeFailure> {
    let format = image::guess_format(bytes).map_err(|_| DecodeFailure::Unsupported)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(DecodeFailure::Unsupported);
    }
    let decoded = image::load_from_memory_with_format(bytes, format)
        .map_err(|e| DecodeFailure::Corrupt(e.to_string()))?;
    let native_gray = matches!(
        decoded.color(),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16
    );
    let gray = match mode {
        ColorMode::Native => native_gray,
        ColorMode::Gray => true,
        ColorMode::Rgb => false,
    };
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let result = if gray {
        ImageTensor::from_u8(h, w, 1, decoded.to_luma8().as_raw())
    } else {
        ImageTensor::from_u8(h, w, 3, decoded.to_rgb8().as_raw())
    };
    result.map_err(DecodeFailure::Image)
}

/// Encodes to PNG or JPEG, chosen by the file extension.
pub fn save_image(img: &ImageTensor, path: &Path) -> Result<(), ImageError> {
    let format = match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("png") => ImageFormat::Png,
        Some("jpg") | Some("jpeg") => ImageFormat::Jpeg,
        _ => return Err(ImageError::UnsupportedFormat(path.to_path_buf())),
    };
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::save_buffer_with_format(
        path,
        &img.to_u8(),
        img.width as u32,
        img.height as u32,
        color,
        format,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(source) => ImageError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => ImageError::Corrupt {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

/// Encodes to an in-memory PNG stream.
pub fn encode_png(img: &ImageTensor) -> Vec<u8> {
    use image::ImageEncoder;
    let mut out = Vec::new();
    let color = if img.channels == 1 {
        image::ExtendedColorType::L8
    } else {
        image::ExtendedColorType::Rgb8
    };
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(&img.to_u8(), img.width as u32, img.height as u32, color)
        .expect("png encoding into memory cannot fail for valid dimensions");
    out
}

/// Bilinear resize with the align-corners-false convention: output pixel
/// `i` samples source coordinate `(i + 0.5) * in / out - 0.5`, clamped to the
/// image.
pub fn resize_bilinear(img: &ImageTensor, out_h: usize, out_w: usize) -> Result<ImageTensor, ImageError> {
    check_dims(out_h, out_w)?;
    if out_h == img.height && out_w == img.width {
        return Ok(img.clone());
    }
    let sy = img.height as f64 / out_h as f64;
    let sx = img.width as f64 / out_w as f64;
    let max_y = (img.height - 1) as f64;
    let max_x = (img.width - 1) as f64;
    let mut data = Vec::with_capacity(out_h * out_w * img.channels);
    for y in 0..out_h {
        let src_y = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        for x in 0..out_w {
            let src_x = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            for c in 0..img.channels {
                data.push(img.sample_bilinear(src_y, src_x, c) as f32);
            }
        }
    }
    Ok(ImageTensor::from_raw_clamped(out_h, out_w, img.channels, data))
}

/// Per-channel affine normalization `(v - mean) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl NormalizationSpec {
    pub fn new(mean: Vec<f32>, scale: Vec<f32>) -> Result<Self, ImageError> {
        if mean.len() != scale.len() {
            return Err(ImageError::ChannelMismatch {
                image: mean.len(),
                spec: scale.len(),
            });
        }
        if let Some(&s) = scale.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
            return Err(ImageError::Scale(s));
        }
        Ok(Self { mean, scale })
    }

    /// Mean 0.5, scale 0.5 on every channel, mapping `[0, 1]` onto `[-1, 1]`.
    pub fn symmetric(channels: usize) -> Self {
        Self {
            mean: vec![0.5; channels],
            scale: vec![0.5; channels],
        }
    }

    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Normalized image data; values are unconstrained.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Row-major HWC.
    pub data: Vec<f32>,
}

impl NormalizedImage {
    /// Planar CHW copy in double precision, the network's input layout.
    pub fn to_chw(&self) -> Vec<f64> {
        let plane = self.height * self.width;
        let mut out = vec![0.0; plane * self.channels];
        for (i, px) in self.data.chunks_exact(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * plane + i] = f64::from(v);
            }
        }
        out
    }
}

pub fn normalize(img: &ImageTensor, spec: &NormalizationSpec) -> Result<NormalizedImage, ImageError> {
    if spec.channels() != img.channels {
        return Err(ImageError::ChannelMismatch {
            image: img.channels,
            spec: spec.channels(),
        });
    }
    let c = img.channels;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| (v - spec.mean[i % c]) / spec.scale[i % c])
        .collect();
    Ok(NormalizedImage {
        height: img.height,
        width: img.width,
        channels: c,
        data,
    })
}

/// Inverse of [`normalize`]; the result is clamped back into `[0, 1]`.
pub fn denormalize(img: &NormalizedImage, spec: &NormalizationSpec) -> Result<ImageTensor, ImageError> {
    if spec.channels() != img.channels {
        return Err(ImageError::ChannelMismatch {
            image: img.channels,
            spec: spec.channels(),
        });
    }
    let c = img.channels;
    let data = img
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| v * spec.scale[i % c] + spec.mean[i % c])
        .collect();
    Ok(ImageTensor::from_raw_clamped(img.height, img.width, c, data))
}
