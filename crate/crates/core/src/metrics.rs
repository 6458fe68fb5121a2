//! PSNR and SSIM in the linear and tonemapped domains.

use std::io::Write;

use crate::error::{Error, Result};
use crate::radiance::{tonemap, RadianceImage, RgbImage, TonemapParams};

/// Reported in place of +inf for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if a.same_dims(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "cannot compare {:?} with {:?}",
            a.dims(),
            b.dims()
        )))
    }
}

pub fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let n = a.data().len().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio with peak 1, capped at [`PSNR_CAP_DB`].
pub fn psnr_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP_DB))
}

pub fn psnr(a: &RadianceImage, b: &RadianceImage) -> Result<f64> {
    psnr_rgb(a.pixels(), b.pixels())
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Window side used for an `h x w` plane: 11, shrunk to the largest odd size
/// that fits smaller images.
fn window_size(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Valid-mode separable filtering of a single `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let ow = w + 1 - n;
    let oh = h + 1 - n;
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        let row = &plane[r * w..(r + 1) * w];
        for c in 0..ow {
            tmp[r * ow + c] = taps.iter().zip(&row[c..c + n]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| taps[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean SSIM of two single-channel planes with dynamic range 1.
pub fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    assert_eq!(x.len(), h * w);
    assert_eq!(y.len(), h * w);
    let size = window_size(h, w);
    if size == 0 {
        return 1.0;
    }
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, oh, ow) = filter_valid(x, h, w, &taps);
    let (my, _, _) = filter_valid(y, h, w, &taps);
    let (exx, _, _) = filter_valid(&xx, h, w, &taps);
    let (eyy, _, _) = filter_valid(&yy, h, w, &taps);
    let (exy, _, _) = filter_valid(&xy, h, w, &taps);
    let mut total = 0.0;
    for i in 0..oh * ow {
        let (ux, uy) = (mx[i], my[i]);
        let sx = exx[i] - ux * ux;
        let sy = eyy[i] - uy * uy;
        let sxy = exy[i] - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * sxy + c2)) / ((ux * ux + uy * uy + c1) * (sx + sy + c2));
    }
    total / (oh * ow) as f64
}

fn channel_plane(img: &RgbImage, ch: usize) -> Vec<f64> {
    img.data().iter().skip(ch).step_by(3).copied().collect()
}

pub fn ssim_rgb(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a, b)?;
    let (h, w) = a.dims();
    Ok((0..3)
        .map(|ch| ssim_plane(&channel_plane(a, ch), &channel_plane(b, ch), h, w))
        .sum::<f64>()
        / 3.0)
}

/// Mean structural similarity, 11x11 Gaussian window (sigma 1.5), averaged over channels.
pub fn ssim(a: &RadianceImage, b: &RadianceImage) -> Result<f64> {
    ssim_rgb(a.pixels(), b.pixels())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub psnr_t: f64,
    pub ssim_t: f64,
    pub psnr_l: f64,
    pub ssim_l: f64,
}

impl MetricsReport {
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Some(MetricsReport {
            psnr_t: avg(|r| r.psnr_t),
            ssim_t: avg(|r| r.ssim_t),
            psnr_l: avg(|r| r.psnr_l),
            ssim_l: avg(|r| r.ssim_l),
        })
    }
}

/// PSNR/SSIM of tonemapped pairs (`-T`) and of the raw radiance pairs (`-L`).
pub fn evaluate(
    predicted: &RadianceImage,
    truth: &RadianceImage,
    params: TonemapParams,
) -> Result<MetricsReport> {
    check_dims(predicted.pixels(), truth.pixels())?;
    let pt = tonemap(predicted, params);
    let tt = tonemap(truth, params);
    Ok(MetricsReport {
        psnr_t: psnr(&pt, &tt)?,
        ssim_t: ssim(&pt, &tt)?,
        psnr_l: psnr(predicted, truth)?,
        ssim_l: ssim(predicted, truth)?,
    })
}

/// Writes `scene,psnr_t,ssim_t,psnr_l,ssim_l` rows followed by a `mean` row.
pub fn write_report<W: Write>(mut w: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    writeln!(w, "scene,psnr_t,ssim_t,psnr_l,ssim_l")?;
    let fmt = |r: &MetricsReport| {
        format!(
            "{:.6},{:.6},{:.6},{:.6}",
            r.psnr_t, r.ssim_t, r.psnr_l, r.ssim_l
        )
    };
    for (name, r) in rows {
        writeln!(w, "{},{}", name, fmt(r))?;
    }
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    if let Some(m) = MetricsReport::mean(&reports) {
        writeln!(w, "mean,{}", fmt(&m))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(w: usize, h: usize, seed: u64) -> RgbImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * 3).map(|_| rng.gen()).collect();
        RgbImage::from_vec(w, h, data).unwrap()
    }

    #[test]
    fn psnr_closed_forms() {
        let a = RgbImage::filled(16, 16, 0.25);
        assert_eq!(psnr_rgb(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert!((psnr_rgb(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = a.map(|v| v + 0.01);
        assert!((psnr_rgb(&a, &c).unwrap() - 40.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_is_symmetric_and_decreasing_in_noise() {
        let a = noise_image(20, 20, 1);
        let b = noise_image(20, 20, 2);
        assert_eq!(psnr_rgb(&a, &b).unwrap(), psnr_rgb(&b, &a).unwrap());
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.02, 0.05, 0.1, 0.2] {
            let noisy = a.map(|v| v + amp);
            let p = psnr_rgb(&a, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_self_similarity_is_exactly_one() {
        let a = noise_image(32, 24, 4);
        assert_eq!(ssim_rgb(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_negative_is_low() {
        let a = RgbImage::from_fn(
            32,
            32,
            |r, c, _| if (r / 2 + c / 2) % 2 == 0 { 0.9 } else { 0.1 },
        );
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim_rgb(&a, &neg).unwrap() < 0.2);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = noise_image(20, 20, 5);
        let b = noise_image(20, 20, 6);
        assert!((ssim_rgb(&a, &b).unwrap() - ssim_rgb(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = RgbImage::new(4, 4);
        let b = RgbImage::new(5, 4);
        assert!(matches!(psnr_rgb(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(ssim_rgb(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn evaluate_identical_is_capped() {
        let a = RadianceImage::new(noise_image(16, 16, 7)).unwrap();
        let r = evaluate(&a, &a, TonemapParams::default()).unwrap();
        assert_eq!(
            r,
            MetricsReport {
                psnr_t: 99.0,
                ssim_t: 1.0,
                psnr_l: 99.0,
                ssim_l: 1.0
            }
        );
    }

    #[test]
    fn report_has_mean_row() {
        let rows = vec![
            (
                "a".to_string(),
                MetricsReport {
                    psnr_t: 30.0,
                    ssim_t: 0.9,
                    psnr_l: 20.0,
                    ssim_l: 0.8,
                },
            ),
            (
                "b".to_string(),
                MetricsReport {
                    psnr_t: 40.0,
                    ssim_t: 1.0,
                    psnr_l: 30.0,
                    ssim_l: 0.6,
                },
            ),
        ];
        let mut buf = Vec::new();
        write_report(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text.lines().last().unwrap(),
            "mean,35.000000,0.950000,25.000000,0.700000"
        );
    }
}
