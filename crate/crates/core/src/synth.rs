//! Synthetic textures, radiance maps and bracketed scenes for tests, demos and
//! the scaled-down experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{fit_dlt, Homography};
use crate::dataset::Scene;
use crate::error::Result;
use crate::radiance::{ExposureStack, RadianceImage, RgbImage, DEFAULT_GAMMA};

fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.into_iter().map(|t| t / s).collect();
    let (h, w) = img.dims();
    let (hi, wi) = (h as isize, w as isize);
    let tmp = RgbImage::from_fn(w, h, |row, col, ch| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| {
                t * img.get(
                    row,
                    (col as isize + i as isize - r).clamp(0, wi - 1) as usize,
                    ch,
                )
            })
            .sum()
    });
    RgbImage::from_fn(w, h, |row, col, ch| {
        taps.iter()
            .enumerate()
            .map(|(i, t)| {
                t * tmp.get(
                    (row as isize + i as isize - r).clamp(0, hi - 1) as usize,
                    col,
                    ch,
                )
            })
            .sum()
    })
}

/// Smooth background with random rectangles and discs, blurred so that
/// bilinear resampling is nearly lossless. Values in `[0.05, 0.95]`.
pub fn texture(width: usize, height: usize, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g: [[f64; 3]; 3] =
        std::array::from_fn(|_| std::array::from_fn(|_| rng.gen_range(0.2..0.6)));
    let mut img = RgbImage::from_fn(width, height, |r, c, ch| {
        let (u, v) = (c as f64 / width as f64, r as f64 / height as f64);
        g[0][ch] + (g[1][ch] - 0.4) * u + (g[2][ch] - 0.4) * v
    });
    let shapes = (width * height / 300).max(8);
    for _ in 0..shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.05..0.95));
        let cx = rng.gen_range(0.0..width as f64);
        let cy = rng.gen_range(0.0..height as f64);
        let a = rng.gen_range(2.0..12.0);
        let b = rng.gen_range(2.0..12.0);
        let disc = rng.gen_bool(0.3);
        let (r0, r1) = (
            (cy - b).max(0.0) as usize,
            ((cy + b).ceil() as usize).min(height),
        );
        let (c0, c1) = (
            (cx - a).max(0.0) as usize,
            ((cx + a).ceil() as usize).min(width),
        );
        for r in r0..r1 {
            for c in c0..c1 {
                let (dx, dy) = ((c as f64 - cx) / a, (r as f64 - cy) / b);
                if !disc || dx * dx + dy * dy <= 1.0 {
                    for (ch, &v) in color.iter().enumerate() {
                        img.set(r, c, ch, v);
                    }
                }
            }
        }
    }
    gaussian_blur(&img, 2.0).map(|v| v.clamp(0.05, 0.95))
}

/// HDR-domain radiance in `[0, 1]` spanning roughly `floor..1` logarithmically.
pub fn radiance_map(width: usize, height: usize, floor: f64, seed: u64) -> RgbImage {
    let tex = texture(width, height, seed);
    let lf = floor.ln();
    tex.map(|v| (lf * (1.0 - (v - 0.05) / 0.9)).exp().clamp(0.0, 1.0))
}

/// Random homography moving the four image corners by up to `magnitude` pixels.
pub fn random_homography(
    width: usize,
    height: usize,
    magnitude: f64,
    rng: &mut impl Rng,
) -> Homography {
    let (w, h) = ((width - 1) as f64, (height - 1) as f64);
    let corners = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    loop {
        let pairs: Vec<_> = corners
            .iter()
            .map(|&(x, y)| {
                let dx = rng.gen_range(-magnitude..=magnitude);
                let dy = rng.gen_range(-magnitude..=magnitude);
                ((x, y), (x + dx, y + dy))
            })
            .collect();
        if let Some(h) = fit_dlt(&pairs).and_then(|m| Homography::from_matrix(m).ok()) {
            return h;
        }
    }
}

/// Camera simulation used to expose synthetic radiance.
#[derive(Debug, Clone)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub biases: Vec<f64>,
    pub reference: usize,
    pub gamma: f64,
    /// Additive Gaussian noise on LDR intensities before quantization.
    pub noise_std: f64,
    /// Quantization levels (255 for 8-bit); 0 disables quantization.
    pub levels: u32,
    /// Darkest radiance of the log-uniform background.
    pub radiance_floor: f64,
    /// Displacement in pixels of a moving disc between consecutive frames; 0 for a static scene.
    pub motion: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 128,
            height: 128,
            biases: vec![-2.0, 0.0, 2.0],
            reference: 1,
            gamma: DEFAULT_GAMMA,
            noise_std: 0.0,
            levels: 255,
            radiance_floor: 1e-3,
            motion: 0.0,
        }
    }
}

fn paste_disc(img: &mut RgbImage, cx: f64, cy: f64, radius: f64, color: [f64; 3]) {
    let (h, w) = img.dims();
    for r in 0..h {
        for c in 0..w {
            let d = ((c as f64 - cx).powi(2) + (r as f64 - cy).powi(2)).sqrt();
            // one-pixel soft edge
            let a = (radius + 0.5 - d).clamp(0.0, 1.0);
            if a > 0.0 {
                for (ch, &v) in color.iter().enumerate() {
                    let old = img.get(r, c, ch);
                    img.set(r, c, ch, old * (1.0 - a) + v * a);
                }
            }
        }
    }
}

/// Exposes `radiance` through the inverse of the exposure normalisation: `I = (H t)^(1/gamma)`,
/// with noise, clipping and quantization.
pub fn expose(radiance: &RgbImage, time: f64, cfg: &SceneConfig, rng: &mut impl Rng) -> RgbImage {
    let data = radiance
        .data()
        .iter()
        .map(|&h| {
            let mut i = (h * time).powf(1.0 / cfg.gamma);
            if cfg.noise_std > 0.0 {
                i += cfg.noise_std * standard_normal(rng);
            }
            let i = i.clamp(0.0, 1.0);
            if cfg.levels > 0 {
                (i * cfg.levels as f64).round() / cfg.levels as f64
            } else {
                i
            }
        })
        .collect();
    RgbImage::from_vec(radiance.width(), radiance.height(), data).expect("same size")
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// A bracketed scene with ground truth aligned to the reference frame.
pub fn scene(name: &str, cfg: &SceneConfig, seed: u64) -> Result<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa11ce);
    let background = radiance_map(cfg.width, cfg.height, cfg.radiance_floor, seed);
    let radius = (cfg.width.min(cfg.height) as f64 / 8.0).max(3.0);
    let (cx, cy) = (cfg.width as f64 * 0.4, cfg.height as f64 * 0.5);
    let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.3..0.9));
    let at = |i: usize| {
        let mut img = background.clone();
        if cfg.motion > 0.0 {
            let off = (i as f64 - cfg.reference as f64) * cfg.motion;
            paste_disc(&mut img, cx + off, cy + off * 0.3, radius, color);
        }
        img
    };
    let ref_bias = cfg.biases[cfg.reference];
    let frames: Vec<RgbImage> = cfg
        .biases
        .iter()
        .enumerate()
        .map(|(i, &b)| expose(&at(i), (b - ref_bias).exp2(), cfg, &mut rng))
        .collect();
    let stack = ExposureStack::from_biases(frames, &cfg.biases, cfg.reference)?;
    Scene::new(name, stack, RadianceImage::new(at(cfg.reference))?)
}
