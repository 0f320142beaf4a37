//! PSNR, SSIM and dataset evaluation.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::{rgb_to_y, DatasetIndex, FloatImage, RgbImage};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn ensure_same_dims(a: &FloatImage, b: &FloatImage, op: &str) -> Result<()> {
    if (a.channels, a.height, a.width) != (b.channels, b.height, b.width) {
        return Err(Error::InvalidArgument(format!(
            "{op}: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    Ok(())
}

pub fn mse(a: &FloatImage, b: &FloatImage) -> Result<f64> {
    ensure_same_dims(a, b, "mse")?;
    let n = a.data.len() as f64;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / MSE)` over all channels; `+inf` for identical inputs.
pub fn psnr(a: &FloatImage, b: &FloatImage, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / m).log10())
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Valid-mode separable filtering of a `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = g.iter().zip(&src[x..x + k]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = g.iter().enumerate().map(|(i, gi)| gi * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize, peak: f64) -> f64 {
    let g = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (SSIM_K1 * peak).powi(2);
    let c2 = (SSIM_K2 * peak).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &g);
    let mu_b = filter_valid(b, h, w, &g);
    let e_aa = filter_valid(&aa, h, w, &g);
    let e_bb = filter_valid(&bb, h, w, &g);
    let e_ab = filter_valid(&ab, h, w, &g);
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / n as f64
}

/// Mean SSIM over all valid 11x11 Gaussian windows, averaged over channels.
pub fn ssim(a: &FloatImage, b: &FloatImage, peak: f64) -> Result<f64> {
    ensure_same_dims(a, b, "ssim")?;
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.height, a.width
        )));
    }
    let total: f64 = (0..a.channels).map(|c| ssim_plane(a.plane(c), b.plane(c), a.height, a.width, peak)).sum();
    Ok(total / a.channels as f64)
}

/// Removes `border` pixels from every side.
pub fn crop_border(img: &FloatImage, border: usize) -> Result<FloatImage> {
    if 2 * border >= img.height || 2 * border >= img.width {
        return Err(Error::InvalidArgument(format!(
            "border {border} is too large for a {}x{} image",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height - 2 * border, img.width - 2 * border);
    let mut data = Vec::with_capacity(img.channels * h * w);
    for c in 0..img.channels {
        let p = img.plane(c);
        for y in border..border + h {
            data.extend_from_slice(&p[y * img.width + border..y * img.width + border + w]);
        }
    }
    Ok(FloatImage::new(img.channels, h, w, data))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Channel {
    #[default]
    Y,
    Rgb,
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Channel::Y => "y",
            Channel::Rgb => "rgb",
        })
    }
}

impl FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "y" => Ok(Channel::Y),
            "rgb" => Ok(Channel::Rgb),
            other => Err(Error::Config(format!("unknown channel `{other}` (expected y or rgb)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalProtocol {
    pub channel: Channel,
    /// Pixels cropped from each side; `None` means the scale factor.
    pub border: Option<usize>,
    pub peak: f64,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self { channel: Channel::Y, border: None, peak: 255.0 }
    }
}

impl EvalProtocol {
    pub fn border_for(&self, scale: usize) -> usize {
        self.border.unwrap_or(scale)
    }

    /// Converts an 8-bit image into the planes that are scored.
    pub fn prepare(&self, img: &RgbImage, scale: usize) -> Result<FloatImage> {
        let planes = match self.channel {
            Channel::Y => rgb_to_y(img),
            Channel::Rgb => FloatImage::from_rgb8(img),
        };
        crop_border(&planes, self.border_for(scale))
    }

    /// `(psnr, ssim)` of `sr` against `hr`.
    pub fn score(&self, sr: &RgbImage, hr: &RgbImage, scale: usize) -> Result<(f64, f64)> {
        if sr.dimensions() != hr.dimensions() {
            return Err(Error::InvalidArgument(format!(
                "prediction is {}x{} but the reference is {}x{}",
                sr.width(),
                sr.height(),
                hr.width(),
                hr.height()
            )));
        }
        let a = self.prepare(sr, scale)?;
        let b = self.prepare(hr, scale)?;
        Ok((psnr(&a, &b, self.peak)?, ssim(&a, &b, self.peak)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<(String, String)>,
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        self.rows.iter().map(|r| r.psnr).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.rows.iter().map(|r| r.ssim).sum::<f64>() / self.rows.len() as f64
    }

    /// Tab-separated table: header, one row per image, `mean`, then one
    /// `# skipped` line per skipped pair.
    pub fn to_table(&self) -> String {
        let mut s = String::from("image\tpsnr\tssim\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{:.4}\t{:.6}\n", r.name, r.psnr, r.ssim));
        }
        if !self.rows.is_empty() {
            s.push_str(&format!("mean\t{:.4}\t{:.6}\n", self.mean_psnr(), self.mean_ssim()));
        }
        for (name, reason) in &self.skipped {
            s.push_str(&format!("# skipped\t{name}\t{reason}\n"));
        }
        s
    }
}

/// Scores `upscale(lr)` against `hr` for every pair of `index`, in index order.
/// Pairs that fail to load or score are skipped and listed in the report.
pub fn evaluate<F>(index: &DatasetIndex, protocol: &EvalProtocol, upscale: F) -> EvalReport
where
    F: Fn(&RgbImage, &RgbImage) -> Result<RgbImage> + Sync,
{
    let results: Vec<(String, Result<(f64, f64)>)> = (0..index.len())
        .into_par_iter()
        .map(|i| {
            let name = index.pairs[i].0.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let scored = index.load(i).and_then(|pair| {
                let sr = upscale(&pair.lr, &pair.hr)?;
                protocol.score(&sr, &pair.hr, index.scale)
            });
            (name, scored)
        })
        .collect();
    let mut report = EvalReport::default();
    for (name, r) in results {
        match r {
            Ok((psnr, ssim)) => report.rows.push(EvalRow { name, psnr, ssim }),
            Err(e) => {
                log::warn!("skipping {name}: {e}");
                report.skipped.push((name, e.to_string()));
            }
        }
    }
    report
}
