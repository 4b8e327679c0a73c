//! Pixel-domain operators on planar float images in `[0, 255]`.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PIXEL_MAX: f64 = 255.0;

/// Bicubic kernel constant (Catmull-Rom).
pub const BICUBIC_A: f64 = -0.5;

/// Channel-planar image, `data[(c * height + y) * width + x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Validation(format!("empty image {channels}x{height}x{width}")));
        }
        if data.len() != channels * height * width {
            return Err(Error::Validation(format!(
                "image buffer of {} values for {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(FloatImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn constant(channels: usize, height: usize, width: usize, value: f64) -> Self {
        FloatImage {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_rgb8(img: &RgbImage) -> Result<Self> {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = p[c] as f64;
            }
        }
        FloatImage::new(3, h, w, data)
    }

    /// Rounds to the nearest integer level and clamps to `[0, 255]`.
    pub fn to_rgb8(&self) -> Result<RgbImage> {
        if self.channels != 3 {
            return Err(Error::Validation(format!("expected 3 channels, got {}", self.channels)));
        }
        let (h, w) = (self.height, self.width);
        Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| quantize(self.data[(c * h + y as usize) * w + x as usize]);
            Rgb([px(0), px(1), px(2)])
        }))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| image_error(path, e))?;
        FloatImage::from_rgb8(&img.to_rgb8())
    }

    /// Writes a lossless PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8()?
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| image_error(path, e))
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.height * self.width..(c + 1) * self.height * self.width]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width) {
            row.reverse();
        }
        out
    }
}

pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, PIXEL_MAX) as u8
}

pub(crate) fn image_error(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    }
}

fn cubic(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Tap positions and normalised weights for one output coordinate.
struct Taps {
    start: usize,
    weights: Vec<f64>,
}

/// Pixel-centre aligned bicubic taps; the kernel is widened by the scale
/// factor when shrinking (antialiasing). Taps outside the source are dropped
/// and the rest renormalised.
fn taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let stretch = scale.max(1.0);
    let support = 2.0 * stretch;
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor() as isize).max(0) as usize;
            let hi = ((center + support).ceil() as isize).min(in_len as isize) as usize;
            let mut weights: Vec<f64> = (lo..hi).map(|j| cubic((j as f64 + 0.5 - center) / stretch)).collect();
            let sum: f64 = weights.iter().sum();
            for w in &mut weights {
                *w /= sum;
            }
            Taps { start: lo, weights }
        })
        .collect()
}

/// Bicubic resampling of every channel to `(height, width)`, clamped to the pixel range.
pub fn bicubic_resize(image: &FloatImage, target: (usize, usize)) -> Result<FloatImage> {
    let (th, tw) = target;
    if image.height == 0 || image.width == 0 || image.data.is_empty() {
        return Err(Error::Validation("cannot resize an empty image".into()));
    }
    if th == 0 || tw == 0 {
        return Err(Error::Validation(format!("resize target {th}x{tw} is empty")));
    }
    let (h, w, ch) = (image.height, image.width, image.channels);
    if (h, w) == (th, tw) {
        return Ok(image.clone());
    }
    let xt = taps(w, tw);
    let yt = taps(h, th);
    let mut tmp = vec![0.0; ch * h * tw];
    for c in 0..ch {
        for y in 0..h {
            let src = &image.data[(c * h + y) * w..][..w];
            let dst = &mut tmp[(c * h + y) * tw..][..tw];
            for (o, t) in dst.iter_mut().zip(&xt) {
                let v: f64 = t.weights.iter().zip(&src[t.start..]).map(|(a, b)| a * b).sum();
                *o = v.clamp(0.0, PIXEL_MAX);
            }
        }
    }
    let mut out = vec![0.0; ch * th * tw];
    for c in 0..ch {
        for (oy, t) in yt.iter().enumerate() {
            let dst = &mut out[(c * th + oy) * tw..][..tw];
            for (k, &wgt) in t.weights.iter().enumerate() {
                let src = &tmp[(c * h + t.start + k) * tw..][..tw];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += wgt * s;
                }
            }
            for o in dst {
                *o = o.clamp(0.0, PIXEL_MAX);
            }
        }
    }
    FloatImage::new(ch, th, tw, out)
}

/// Normalised 1-D Gaussian weights; `sigma == 0` gives the delta kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Result<Vec<f64>> {
    if size % 2 == 0 {
        return Err(Error::Config(format!("blur kernel size must be odd, got {size}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("blur sigma must be finite and non-negative, got {sigma}")));
    }
    let r = (size / 2) as isize;
    if sigma == 0.0 {
        return Ok((-r..=r).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect());
    }
    let raw: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(image: &FloatImage, size: usize, sigma: f64) -> Result<FloatImage> {
    let k = gaussian_kernel(size, sigma)?;
    if sigma == 0.0 {
        return Ok(image.clone());
    }
    let (ch, h, w) = (image.channels, image.height, image.width);
    let r = (size / 2) as isize;
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; image.data.len()];
    for c in 0..ch {
        for y in 0..h {
            let row = &image.data[(c * h + y) * w..][..w];
            for x in 0..w {
                tmp[(c * h + y) * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * row[clamp(x as isize + j as isize - r, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; image.data.len()];
    for c in 0..ch {
        for y in 0..h {
            for x in 0..w {
                let v: f64 = k
                    .iter()
                    .enumerate()
                    .map(|(j, &kv)| kv * tmp[(c * h + clamp(y as isize + j as isize - r, h)) * w + x])
                    .sum();
                out[(c * h + y) * w + x] = v.clamp(0.0, PIXEL_MAX);
            }
        }
    }
    FloatImage::new(ch, h, w, out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMethod {
    #[default]
    Bicubic,
}

/// How low-resolution images are fabricated and prepared for the student.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    pub scale_method: ScaleMethod,
    pub target_size: usize,
    pub blur_sigma: f64,
    pub blur_kernel: usize,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        DegradationSpec {
            scale_method: ScaleMethod::Bicubic,
            target_size: 14,
            blur_sigma: 1.0,
            blur_kernel: 3,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::Config("degradation target_size must be at least 1".into()));
        }
        gaussian_kernel(self.blur_kernel, self.blur_sigma).map(|_| ())
    }
}

/// Per-channel pixel statistics of a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    pub fn normalize(&self, image: &FloatImage) -> Result<FloatImage> {
        if self.mean.len() != image.channels || self.std.len() != image.channels {
            return Err(Error::Validation(format!(
                "statistics for {} channels, image has {}",
                self.mean.len(),
                image.channels
            )));
        }
        let plane = image.height * image.width;
        let mut out = image.clone();
        for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    /// Accumulates mean and population std over a set of images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a FloatImage>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            if sum.is_empty() {
                sum = vec![0.0; img.channels];
                sq = vec![0.0; img.channels];
            } else if sum.len() != img.channels {
                return Err(Error::Validation("images with differing channel counts".into()));
            }
            for c in 0..img.channels {
                for &v in img.plane(c) {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            count += img.height * img.width;
        }
        if count == 0 {
            return Err(Error::Dataset("no images to compute statistics from".into()));
        }
        let n = count as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();
        Ok(ChannelStats { mean, std })
    }
}

/// Upscales a low-resolution image to the network input, blurs it, then
/// normalises it when statistics are given.
pub fn prepare_student_input(
    lr: &FloatImage,
    input_size: (usize, usize),
    spec: &DegradationSpec,
    stats: Option<&ChannelStats>,
) -> Result<FloatImage> {
    spec.validate()?;
    let up = bicubic_resize(lr, input_size)?;
    let blurred = gaussian_blur(&up, spec.blur_kernel, spec.blur_sigma)?;
    match stats {
        Some(s) => s.normalize(&blurred),
        None => Ok(blurred),
    }
}

/// Downscales a high-resolution image to the spec's target and quantises it
/// to the stored 8-bit levels.
pub fn degrade(hr: &FloatImage, spec: &DegradationSpec) -> Result<FloatImage> {
    spec.validate()?;
    let mut lr = bicubic_resize(hr, (spec.target_size, spec.target_size))?;
    for v in &mut lr.data {
        *v = quantize(*v) as f64;
    }
    Ok(lr)
}
