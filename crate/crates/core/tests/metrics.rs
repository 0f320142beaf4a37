use std::fs;

use adsrnet_core::data::{write_png, DatasetIndex, FloatImage, ImagePair, RgbImage};
use adsrnet_core::metrics::{crop_border, evaluate, mse, psnr, ssim, Channel, EvalProtocol};
use image::Rgb;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn plane(h: usize, w: usize, seed: u64) -> FloatImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    FloatImage::new(1, h, w, (0..h * w).map(|_| rng.random_range(0.0..255.0)).collect())
}

fn shifted(a: &FloatImage, d: f64) -> FloatImage {
    FloatImage::new(a.channels, a.height, a.width, a.data.iter().map(|v| v + d).collect())
}

#[test]
fn psnr_closed_forms() {
    let a = plane(8, 9, 1);
    assert_eq!(psnr(&a, &a, 255.0).unwrap(), f64::INFINITY);
    let one = psnr(&a, &shifted(&a, 1.0), 255.0).unwrap();
    assert!((one - 20.0 * 255f64.log10()).abs() < 1e-3);
    assert!((one - 48.1308).abs() < 1e-3);
    let zero = FloatImage::filled(1, 4, 4, 0.0);
    assert!(psnr(&zero, &FloatImage::filled(1, 4, 4, 255.0), 255.0).unwrap().abs() < 1e-12);
    assert!(psnr(&a, &plane(8, 8, 1), 255.0).is_err());
    assert!((mse(&a, &shifted(&a, 3.0)).unwrap() - 9.0).abs() < 1e-9);
}

#[test]
fn ssim_identity_and_constants() {
    let a = plane(16, 13, 2);
    assert_eq!(ssim(&a, &a, 255.0).unwrap(), 1.0);
    let c1 = (0.01f64 * 255.0).powi(2);
    for (c, d) in [(100.0, 20.0), (0.0, 255.0), (50.0, -30.0)] {
        let x = FloatImage::filled(1, 12, 12, c);
        let y = FloatImage::filled(1, 12, 12, c + d);
        let expect = (2.0 * c * (c + d) + c1) / (c * c + (c + d) * (c + d) + c1);
        assert!((ssim(&x, &y, 255.0).unwrap() - expect).abs() < 1e-9);
    }
    assert!(ssim(&plane(10, 20, 3), &plane(10, 20, 4), 255.0).is_err());
}

/// Sliding 11x11 window with 2-D Gaussian weights, evaluated position by position.
fn ssim_window_oracle(a: &FloatImage, b: &FloatImage) -> f64 {
    let (c1, c2) = ((0.01f64 * 255.0).powi(2), (0.03f64 * 255.0).powi(2));
    let mut w = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=a.height - 11 {
        for x in 0..=a.width - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = w[i][j] / total;
                    ma += k * a.get(0, y + i, x + j);
                    mb += k * b.get(0, y + i, x + j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = w[i][j] / total;
                    let (da, db) = (a.get(0, y + i, x + j) - ma, b.get(0, y + i, x + j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

#[test]
fn ssim_matches_window_loop() {
    let a = plane(17, 14, 5);
    let noise = plane(17, 14, 6);
    let b = FloatImage::new(1, 17, 14, a.data.iter().zip(&noise.data).map(|(x, n)| 0.8 * x + 0.2 * n).collect());
    assert!((ssim(&a, &b, 255.0).unwrap() - ssim_window_oracle(&a, &b)).abs() < 1e-6);
    let c = plane(11, 11, 7);
    assert!((ssim(&a.clone(), &b, 255.0).unwrap() - ssim(&b, &a, 255.0).unwrap()).abs() < 1e-12);
    assert!((ssim(&c, &plane(11, 11, 8), 255.0).unwrap() - ssim_window_oracle(&c, &plane(11, 11, 8))).abs() < 1e-6);
}

#[test]
fn border_crop() {
    let img = FloatImage::new(2, 6, 5, (0..60).map(f64::from).collect());
    let c = crop_border(&img, 2).unwrap();
    assert_eq!((c.height, c.width), (2, 1));
    assert_eq!(c.data, vec![12.0, 17.0, 42.0, 47.0]);
    assert_eq!(crop_border(&img, 0).unwrap(), img);
    assert!(crop_border(&img, 3).is_err());
}

#[test]
fn protocol_parsing_and_border_default() {
    assert_eq!("Y".parse::<Channel>().unwrap(), Channel::Y);
    assert_eq!("rgb".parse::<Channel>().unwrap(), Channel::Rgb);
    assert!("lab".parse::<Channel>().is_err());
    let p = EvalProtocol::default();
    assert_eq!((p.channel, p.border_for(3), p.peak), (Channel::Y, 3, 255.0));
    assert_eq!(EvalProtocol { border: Some(0), ..p }.border_for(4), 0);
}

fn noise(w: u32, h: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |x, y| {
        let base = ((x * 7 + y * 5) % 200) as u8;
        Rgb([base.saturating_add(rng.random_range(0..40)), base, base / 2])
    })
}

fn split_with(names: &[&str], scale: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let hr = DatasetIndex::hr_dir(dir.path());
    let lr = DatasetIndex::lr_dir(dir.path(), scale);
    fs::create_dir_all(&hr).unwrap();
    fs::create_dir_all(&lr).unwrap();
    for (i, name) in names.iter().enumerate() {
        let img = noise(36, 30, i as u64);
        write_png(hr.join(name), &img).unwrap();
        write_png(lr.join(name), &ImagePair::from_hr(&img, scale, *name).unwrap().lr).unwrap();
    }
    dir
}

#[test]
fn identity_upscaler_scores_infinite_psnr() {
    let dir = split_with(&["b.png", "a.png"], 2);
    let index = DatasetIndex::open(dir.path(), 2).unwrap();
    let report = evaluate(&index, &EvalProtocol::default(), |_, hr| Ok(hr.clone()));
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].name, "a.png");
    assert_eq!(report.mean_psnr(), f64::INFINITY);
    assert_eq!(report.mean_ssim(), 1.0);
    let table = report.to_table();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "image\tpsnr\tssim");
    assert!(lines[3].starts_with("mean\t"));
}

#[test]
fn broken_pairs_are_skipped_and_reported() {
    let dir = split_with(&["a.png", "b.png"], 2);
    fs::write(DatasetIndex::hr_dir(dir.path()).join("c.png"), b"junk").unwrap();
    let index = DatasetIndex::open(dir.path(), 2).unwrap();
    let report = evaluate(&index, &EvalProtocol::default(), |lr, _| adsrnet_core::data::upscale_bicubic(lr, 2));
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.skipped.len(), 1);
    assert!(report.to_table().lines().last().unwrap().starts_with("# skipped\tc.png"));
    assert!(report.mean_psnr().is_finite() && report.mean_psnr() > 15.0);
}

#[test]
fn border_setting_changes_scores() {
    let dir = split_with(&["a.png"], 3);
    let index = DatasetIndex::open(dir.path(), 3).unwrap();
    let up = |lr: &RgbImage, _: &RgbImage| adsrnet_core::data::upscale_bicubic(lr, 3);
    let cropped = evaluate(&index, &EvalProtocol::default(), up);
    let full = evaluate(&index, &EvalProtocol { border: Some(0), ..EvalProtocol::default() }, up);
    let rgb = evaluate(&index, &EvalProtocol { channel: Channel::Rgb, ..EvalProtocol::default() }, up);
    assert_ne!(cropped.mean_psnr(), full.mean_psnr());
    assert_ne!(cropped.mean_psnr(), rgb.mean_psnr());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn metrics_are_symmetric(seed in 0u64..10_000) {
        let a = plane(12, 12, seed);
        let b = plane(12, 12, seed + 1);
        prop_assert_eq!(psnr(&a, &b, 255.0).unwrap(), psnr(&b, &a, 255.0).unwrap());
        prop_assert!((ssim(&a, &b, 255.0).unwrap() - ssim(&b, &a, 255.0).unwrap()).abs() < 1e-12);
        let s = ssim(&a, &b, 255.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn psnr_decreases_with_offset(d1 in 0.5f64..100.0, extra in 0.1f64..50.0) {
        let a = plane(6, 6, 9);
        prop_assert!(psnr(&a, &shifted(&a, d1), 255.0).unwrap() > psnr(&a, &shifted(&a, d1 + extra), 255.0).unwrap());
    }
}
