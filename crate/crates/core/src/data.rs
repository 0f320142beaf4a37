//! Image I/O, bicubic resampling, LR generation and the dataset layout
//! `<root>/<split>/HR/*.png` paired with `<root>/<split>/LR_x{s}/*.png`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// 8-bit interleaved RGB image.
pub type RgbImage = ImageBuffer<Rgb<u8>, Vec<u8>>;

/// Real-valued planar image, `(channels, height, width)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "planar buffer size");
        Self { channels, height, width, data }
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        Self::new(channels, height, width, vec![v; channels * height * width])
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Planar `[0, 255]` copy of an 8-bit image.
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = px[c] as f64;
            }
        }
        Self::new(3, h, w, data)
    }

    /// Rounds half away from zero and clamps to `[0, 255]`.
    pub fn to_rgb8(&self) -> RgbImage {
        assert_eq!(self.channels, 3, "RGB conversion needs three planes");
        let n = self.width * self.height;
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let i = y as usize * self.width + x as usize;
            Rgb([0, 1, 2].map(|c| quantize(self.data[c * n + i])))
        })
    }
}

/// Round half away from zero, clamp to `[0, 255]`.
pub fn quantize(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// `(1, 3, H, W)` tensor with values in `[0, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![T::zero(); 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = T::from_f64_lossy(px[c] as f64 / 255.0);
        }
    }
    Tensor::from_vec(Shape::new(1, 3, h, w), data).expect("image tensor shape")
}

/// Item `n` of a `[0, 1]` tensor back to 8 bits (scaled by 255, then quantised).
pub fn tensor_to_image<T: Scalar>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let s = t.shape();
    if s.c() != 3 {
        return Err(Error::ChannelMismatch { op: "tensor_to_image", expected: 3, actual: s.c() });
    }
    let item = t.item(n);
    let plane = s.plane_len();
    Ok(RgbImage::from_fn(s.w() as u32, s.h() as u32, |x, y| {
        let i = y as usize * s.w() + x as usize;
        Rgb([0, 1, 2].map(|c| quantize(item[c * plane + i].as_f64() * 255.0)))
    }))
}

/// Reads a PNG as 8-bit RGB. 16-bit samples are scaled by 1/257 and rounded,
/// gray is replicated, alpha dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })?;
    Ok(to_rgb8(img))
}

fn to_rgb8(img: DynamicImage) -> RgbImage {
    match img {
        DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA16(_)
        | DynamicImage::ImageRgb16(_)
        | DynamicImage::ImageRgba16(_) => {
            let wide = img.into_rgb16();
            let (w, h) = wide.dimensions();
            RgbImage::from_fn(w, h, |x, y| {
                let p = wide.get_pixel(x, y);
                Rgb([0, 1, 2].map(|c| (p[c] as f64 / 257.0).round() as u8))
            })
        }
        other => other.into_rgb8(),
    }
}

pub fn write_png(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Image { path: path.to_path_buf(), reason: e.to_string() })
}

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let ax = x.abs();
    if ax <= 1.0 {
        (A + 2.0) * ax.powi(3) - (A + 3.0) * ax.powi(2) + 1.0
    } else if ax < 2.0 {
        A * ax.powi(3) - 5.0 * A * ax.powi(2) + 8.0 * A * ax - 4.0 * A
    } else {
        0.0
    }
}

/// Source indices and normalised weights for each output sample of a 1-D resize.
pub fn resize_weights(in_len: usize, out_len: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    let scale = out_len as f64 / in_len as f64;
    // Downscaling widens the kernel by 1/scale (antialiasing).
    let (kscale, width) = if scale < 1.0 { (scale, 4.0 / scale) } else { (1.0, 4.0) };
    let taps = width.ceil() as isize + 2;
    (0..out_len)
        .map(|i| {
            // 1-based pixel-centre mapping.
            let u = (i + 1) as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - width / 2.0).floor() as isize;
            let mut idx = Vec::with_capacity(taps as usize);
            let mut wts = Vec::with_capacity(taps as usize);
            for j in 0..taps {
                let p = left + j;
                let w = kscale * cubic(kscale * (u - p as f64));
                if w == 0.0 {
                    continue;
                }
                idx.push((p.clamp(1, in_len as isize) - 1) as usize);
                wts.push(w);
            }
            let total: f64 = wts.iter().sum();
            wts.iter_mut().for_each(|w| *w /= total);
            (idx, wts)
        })
        .collect()
}

/// Separable bicubic resize (`a = -0.5`, antialiased when shrinking, clamped edges).
pub fn bicubic_resize(img: &FloatImage, out_h: usize, out_w: usize) -> Result<FloatImage> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument(format!("output size {out_h}x{out_w} must be positive")));
    }
    let (h, w) = (img.height, img.width);
    let wx = resize_weights(w, out_w);
    let wy = resize_weights(h, out_h);
    let mut out = Vec::with_capacity(img.channels * out_h * out_w);
    let mut tmp = vec![0.0; h * out_w];
    for c in 0..img.channels {
        let plane = img.plane(c);
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (x, (idx, wts)) in wx.iter().enumerate() {
                tmp[y * out_w + x] = idx.iter().zip(wts).map(|(&i, &k)| row[i] * k).sum();
            }
        }
        for (idx, wts) in &wy {
            for x in 0..out_w {
                out.push(idx.iter().zip(wts).map(|(&i, &k)| tmp[i * out_w + x] * k).sum());
            }
        }
    }
    Ok(FloatImage::new(img.channels, out_h, out_w, out))
}

/// Top-left crop to dimensions divisible by `scale`.
pub fn mod_crop(img: &RgbImage, scale: usize) -> RgbImage {
    let w = img.width() - img.width() % scale as u32;
    let h = img.height() - img.height() % scale as u32;
    image::imageops::crop_imm(img, 0, 0, w, h).to_image()
}

/// Bicubic downscale by exactly `1/scale`, rounded and clamped to 8 bits.
/// The input must already be divisible by `scale` (see [`mod_crop`]).
pub fn downscale(hr: &RgbImage, scale: usize) -> Result<RgbImage> {
    let (w, h) = (hr.width() as usize, hr.height() as usize);
    if w % scale != 0 || h % scale != 0 || w < scale || h < scale {
        return Err(Error::InvalidArgument(format!("{w}x{h} is not divisible by scale {scale}")));
    }
    Ok(bicubic_resize(&FloatImage::from_rgb8(hr), h / scale, w / scale)?.to_rgb8())
}

/// Bicubic upscale by `scale`, rounded and clamped to 8 bits.
pub fn upscale_bicubic(lr: &RgbImage, scale: usize) -> Result<RgbImage> {
    let (w, h) = (lr.width() as usize, lr.height() as usize);
    Ok(bicubic_resize(&FloatImage::from_rgb8(lr), h * scale, w * scale)?.to_rgb8())
}

/// BT.601 studio-swing luma, unrounded: `16 + (65.481 R + 128.553 G + 24.966 B) / 255`.
pub fn rgb_to_y(img: &RgbImage) -> FloatImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img
        .pixels()
        .map(|p| 16.0 + (65.481 * p[0] as f64 + 128.553 * p[1] as f64 + 24.966 * p[2] as f64) / 255.0)
        .collect();
    FloatImage::new(1, h, w, data)
}

/// An HR image and its degraded LR counterpart.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub hr: RgbImage,
    pub lr: RgbImage,
    pub scale: usize,
    pub source: PathBuf,
}

impl ImagePair {
    /// Crops `hr` to a multiple of `scale` and derives the LR image by bicubic downscaling.
    pub fn from_hr(hr: &RgbImage, scale: usize, source: impl Into<PathBuf>) -> Result<Self> {
        let hr = mod_crop(hr, scale);
        let lr = downscale(&hr, scale)?;
        Ok(Self { hr, lr, scale, source: source.into() })
    }

    pub fn new(hr: RgbImage, lr: RgbImage, scale: usize, source: impl Into<PathBuf>) -> Result<Self> {
        let source = source.into();
        let hr = mod_crop(&hr, scale);
        if hr.width() != lr.width() * scale as u32 || hr.height() != lr.height() * scale as u32 {
            return Err(Error::InvalidArgument(format!(
                "{}: HR {}x{} is not {scale}x LR {}x{}",
                source.display(),
                hr.width(),
                hr.height(),
                lr.width(),
                lr.height()
            )));
        }
        Ok(Self { hr, lr, scale, source })
    }
}

/// Lexicographically sorted `.png` files of a directory.
pub fn list_pngs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    Ok(files)
}

/// Paired HR/LR paths of one split.
#[derive(Clone, Debug)]
pub struct DatasetIndex {
    pub split: String,
    pub scale: usize,
    /// `(hr path, lr path)`; the LR path may not exist when LR images are to
    /// be generated on the fly.
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

impl DatasetIndex {
    pub fn hr_dir(split_dir: &Path) -> PathBuf {
        split_dir.join("HR")
    }

    pub fn lr_dir(split_dir: &Path, scale: usize) -> PathBuf {
        split_dir.join(format!("LR_x{scale}"))
    }

    /// Indexes `<split_dir>/HR` against `<split_dir>/LR_x{scale}`.
    pub fn open(split_dir: impl AsRef<Path>, scale: usize) -> Result<Self> {
        let split_dir = split_dir.as_ref();
        let hr_dir = Self::hr_dir(split_dir);
        if !hr_dir.is_dir() {
            return Err(Error::io(&hr_dir, std::io::Error::new(std::io::ErrorKind::NotFound, "HR directory not found")));
        }
        let lr_dir = Self::lr_dir(split_dir, scale);
        let pairs = list_pngs(&hr_dir)?
            .into_iter()
            .map(|hr| {
                let lr = lr_dir.join(hr.file_name().expect("file name"));
                (hr, lr)
            })
            .collect();
        let split = split_dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(Self { split, scale, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Loads pair `i`, degrading the HR image when no LR file exists.
    pub fn load(&self, i: usize) -> Result<ImagePair> {
        let (hr_path, lr_path) = &self.pairs[i];
        let hr = read_png(hr_path)?;
        if lr_path.exists() {
            ImagePair::new(hr, read_png(lr_path)?, self.scale, hr_path)
        } else {
            ImagePair::from_hr(&hr, self.scale, hr_path)
        }
    }
}

/// Outcome of [`degrade`].
#[derive(Debug, Default)]
pub struct DegradeReport {
    pub written: Vec<PathBuf>,
    pub skipped: Vec<(PathBuf, String)>,
}

/// Writes the bicubic LR counterpart of every PNG in `hr_dir` to `out_dir`,
/// mirroring filenames. Unreadable images are skipped; it is an error if none
/// could be converted.
pub fn degrade(hr_dir: impl AsRef<Path>, scale: usize, out_dir: impl AsRef<Path>) -> Result<DegradeReport> {
    let (hr_dir, out_dir) = (hr_dir.as_ref(), out_dir.as_ref());
    if !(2..=4).contains(&scale) {
        return Err(Error::UnsupportedScale(scale));
    }
    let files = list_pngs(hr_dir)?;
    if files.is_empty() {
        return Err(Error::InvalidArgument(format!("no PNG files in {}", hr_dir.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut report = DegradeReport::default();
    for path in files {
        let result = read_png(&path).and_then(|hr| ImagePair::from_hr(&hr, scale, &path)).and_then(|pair| {
            let dst = out_dir.join(path.file_name().expect("file name"));
            write_png(&dst, &pair.lr).map(|_| dst)
        });
        match result {
            Ok(dst) => report.written.push(dst),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                report.skipped.push((path, e.to_string()));
            }
        }
    }
    if report.written.is_empty() {
        return Err(Error::InvalidArgument(format!("no image in {} could be degraded", hr_dir.display())));
    }
    Ok(report)
}
