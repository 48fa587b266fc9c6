//! Deterministic grayscale image preprocessing: histogram equalization,
//! 3x3 Gaussian blur, intensity normalization, and bilinear resizing.
//!
//! The full pipeline runs equalize -> blur -> normalize -> resize (the
//! equalize/blur order can be swapped by configuration; the choice is
//! recorded in run manifests). Every step is a pure function of its inputs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A single-channel image with pixel values in [0, 1], stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::invalid(
                "image",
                format!("{height}x{width} image needs {} pixels, got {}", height * width, pixels.len()),
            ));
        }
        if let Some(bad) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::invalid(
                "image",
                format!("pixel value {bad} outside [0, 1]"),
            ));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }
}

/// Remap intensities through the normalized cumulative histogram. A pixel in
/// the k-th of `bins` equal-width bins maps to CDF(k); the map is monotone
/// and lands in (0, 1].
pub fn histogram_equalize(img: &Image, bins: usize) -> Result<Image> {
    if bins < 2 {
        return Err(Error::invalid("histogram_equalize", "bins must be >= 2"));
    }
    let n = img.pixels.len();
    let mut hist = vec![0u64; bins];
    let bin_of = |p: f64| -> usize { ((p * bins as f64) as usize).min(bins - 1) };
    for &p in &img.pixels {
        hist[bin_of(p)] += 1;
    }
    let mut cdf = vec![0.0f64; bins];
    let mut acc = 0u64;
    for (c, &h) in cdf.iter_mut().zip(&hist) {
        acc += h;
        *c = acc as f64 / n as f64;
    }
    let pixels = img.pixels.iter().map(|&p| cdf[bin_of(p)]).collect();
    Image::new(img.height, img.width, pixels)
}

/// Standard deviation of the fixed 3x3 Gaussian blur kernel.
pub const BLUR_SIGMA: f64 = 0.8;

fn blur_kernel() -> [f64; 9] {
    let mut k = [0.0f64; 9];
    let mut sum = 0.0;
    for dy in -1i32..=1 {
        for dx in -1i32..=1 {
            let w = (-((dx * dx + dy * dy) as f64) / (2.0 * BLUR_SIGMA * BLUR_SIGMA)).exp();
            k[((dy + 1) * 3 + (dx + 1)) as usize] = w;
            sum += w;
        }
    }
    for w in k.iter_mut() {
        *w /= sum;
    }
    k
}

/// 3x3 Gaussian blur with replicate padding at the borders. The kernel is a
/// convex combination, so output values stay inside the input's range.
pub fn gaussian_blur3(img: &Image) -> Result<Image> {
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return Err(Error::ImageTooSmall {
            height: h,
            width: w,
            min: 3,
        });
    }
    let k = blur_kernel();
    let src = &img.pixels;
    let mut out = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for dy in -1i32..=1 {
                let sy = (y as i64 + dy as i64).clamp(0, h as i64 - 1) as usize;
                for dx in -1i32..=1 {
                    let sx = (x as i64 + dx as i64).clamp(0, w as i64 - 1) as usize;
                    acc += k[((dy + 1) * 3 + (dx + 1)) as usize] * src[sy * w + sx];
                }
            }
            // convex combinations can drift a few ulps past the bounds
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, out)
}

/// Bilinear interpolation of a row-major grid to a new size, with the
/// half-pixel (corner-aligned-false) sampling convention.
pub fn bilinear_resize_grid(
    src: &[f64],
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0f64; out_h * out_w];
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bottom = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
        }
    }
    out
}

/// Bilinear resize of an image.
pub fn resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize", "output dimensions must be positive"));
    }
    let pixels = bilinear_resize_grid(&img.pixels, img.height, img.width, out_h, out_w);
    Image::new(out_h, out_w, pixels)
}

/// Shift and scale intensities, emitting a (1, 1, H, W) tensor.
pub fn normalize(img: &Image, mean: f64, std: f64) -> Result<Tensor> {
    if std <= 0.0 {
        return Err(Error::NonPositiveStd { std });
    }
    let data = img.pixels.iter().map(|&p| (p - mean) / std).collect();
    Tensor::from_vec(vec![1, 1, img.height, img.width], data)
}

/// Bilinear resize of a (1, 1, H, W) tensor (used after normalization, where
/// values are no longer confined to [0, 1]).
pub fn resize_tensor(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let sh = t.shape();
    if sh.len() != 4 || sh[0] != 1 || sh[1] != 1 {
        return Err(Error::invalid(
            "resize_tensor",
            format!("expected shape [1, 1, H, W], got {sh:?}"),
        ));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_tensor", "output dimensions must be positive"));
    }
    let data = bilinear_resize_grid(t.data(), sh[2], sh[3], out_h, out_w);
    Tensor::from_vec(vec![1, 1, out_h, out_w], data)
}

/// Whether equalization runs before the blur (the default) or after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageOrder {
    EqualizeThenBlur,
    BlurThenEqualize,
}

impl StageOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            StageOrder::EqualizeThenBlur => "equalize-blur",
            StageOrder::BlurThenEqualize => "blur-equalize",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "equalize-blur" => Some(StageOrder::EqualizeThenBlur),
            "blur-equalize" => Some(StageOrder::BlurThenEqualize),
            _ => None,
        }
    }
}

/// Full preprocessing configuration; every field lands in the run manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessConfig {
    pub bins: usize,
    pub order: StageOrder,
    /// Square model input size the image is resized to.
    pub out_size: usize,
    /// Intensity statistics for normalization (typically computed over the
    /// training split and stored with the run).
    pub mean: f64,
    pub std: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            bins: 256,
            order: StageOrder::EqualizeThenBlur,
            out_size: 128,
            mean: 0.0,
            std: 1.0,
        }
    }
}

/// equalize/blur (configured order) -> normalize -> resize, producing the
/// model input tensor (1, 1, out_size, out_size).
pub fn run_pipeline(img: &Image, cfg: &PreprocessConfig) -> Result<Tensor> {
    let staged = match cfg.order {
        StageOrder::EqualizeThenBlur => gaussian_blur3(&histogram_equalize(img, cfg.bins)?)?,
        StageOrder::BlurThenEqualize => histogram_equalize(&gaussian_blur3(img)?, cfg.bins)?,
    };
    let normalized = normalize(&staged, cfg.mean, cfg.std)?;
    resize_tensor(&normalized, cfg.out_size, cfg.out_size)
}

/// Mean and (population) standard deviation of the pixels of a set of images.
pub fn intensity_stats<'a>(images: impl Iterator<Item = &'a Image>) -> (f64, f64) {
    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut sumsq = 0.0f64;
    for img in images {
        for &p in &img.pixels {
            sum += p;
            sumsq += p * p;
            count += 1;
        }
    }
    if count == 0 {
        return (0.0, 1.0);
    }
    let mean = sum / count as f64;
    let var = (sumsq / count as f64 - mean * mean).max(0.0);
    (mean, var.sqrt())
}

/// Load a grayscale image: 8- or 16-bit grayscale PNG, or a raw `.img` file
/// holding a rank-2 tensor in the crate's binary format.
pub fn load_image(path: &Path) -> Result<Image> {
    if path.extension().and_then(|e| e.to_str()) == Some("img") {
        let t = crate::tensor::io::load_tensor(path)?;
        let sh = t.shape().to_vec();
        if sh.len() != 2 {
            return Err(Error::invalid(
                "load_image",
                format!("raw image {} must be rank 2, got shape {sh:?}", path.display()),
            ));
        }
        let (_, data) = t.into_parts();
        return Image::new(sh[0], sh[1], data);
    }
    let dynimg = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    match dynimg {
        image::DynamicImage::ImageLuma8(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let pixels = buf.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
            Image::new(h, w, pixels)
        }
        image::DynamicImage::ImageLuma16(buf) => {
            let (w, h) = (buf.width() as usize, buf.height() as usize);
            let pixels = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
            Image::new(h, w, pixels)
        }
        other => Err(Error::invalid(
            "load_image",
            format!(
                "{}: expected 8- or 16-bit grayscale PNG, got {:?}",
                path.display(),
                other.color()
            ),
        )),
    }
}

/// Write an image as an 8-bit grayscale PNG (values quantized to 0..=255).
pub fn save_png(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img
        .pixels
        .iter()
        .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .expect("buffer length matches dimensions");
    out.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}
